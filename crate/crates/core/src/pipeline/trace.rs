use serde::{Deserialize, Serialize};

/// One optimization iteration at one timestep.
///
/// Gradient columns describe the weighted term each constraint contributed
/// to the combined update, not the raw loss gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub iter: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss_sap: Option<f64>,
    pub loss_caa: Option<f64>,
    pub grad_sap_mean_abs: Option<f64>,
    pub grad_caa_mean_abs: Option<f64>,
    pub grad_sap_l2: Option<f64>,
    pub grad_caa_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientTrace {
    pub rows: Vec<TraceRow>,
}

impl GradientTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows_at(&self, t: usize) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.t == t)
    }

    /// Distinct timesteps in execution order.
    pub fn timesteps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.t) {
                out.push(r.t);
            }
        }
        out
    }
}
