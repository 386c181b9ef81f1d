//! Time-step dependent constraint weights and the gradient combination rules.
//!
//! The canonical weights (`Form::Eq14`) are
//!
//! ```text
//! λ₁*(t) = β₁ (1 - exp(-k₁ (T - t)))
//! λ₂*(t) = β₂ exp(-k₂ (T - t))
//! ```
//!
//! so the preservation weight starts at zero when denoising begins (`t = T`)
//! and grows, while the alignment weight starts at `β₂` and decays.
//! `Form::Alg1` gives the alternative closed form
//! `λ₁ = β₁ exp(-k₁ t)`, `λ₂ = β₂ (1 - exp(-k₂ t))`, which disagrees with the
//! canonical one in both the exponent argument and which weight rises; it is
//! kept only for side-by-side comparison.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::backend::LatentGrid;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Gradient norms below this contribute nothing after normalization.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    #[default]
    Eq14,
    Alg1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerParams {
    pub beta1: f64,
    pub beta2: f64,
    pub k1: f64,
    pub k2: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub form: Form,
}

impl SchedulerParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Validation("T must be at least 1".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) || !self.k1.is_finite() || !self.k2.is_finite() {
            return Err(Error::Validation(format!(
                "rate factors must be positive, got k1={}, k2={}",
                self.k1, self.k2
            )));
        }
        // zero scales are allowed so single-constraint ablations can be
        // expressed as a scheduler setting
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) || !self.beta1.is_finite() || !self.beta2.is_finite() {
            return Err(Error::Validation(format!(
                "scaling factors must be non-negative, got beta1={}, beta2={}",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

pub fn lambda_weights(t: usize, p: &SchedulerParams) -> Result<(f64, f64)> {
    p.validate()?;
    if t < 1 || t > p.steps {
        return Err(Error::Range(format!("t={t} outside [1, {}]", p.steps)));
    }
    Ok(match p.form {
        Form::Eq14 => {
            let elapsed = (p.steps - t) as f64;
            (
                p.beta1 * (1.0 - (-p.k1 * elapsed).exp()),
                p.beta2 * (-p.k2 * elapsed).exp(),
            )
        }
        Form::Alg1 => {
            let t = t as f64;
            (
                p.beta1 * (-p.k1 * t).exp(),
                p.beta2 * (1.0 - (-p.k2 * t).exp()),
            )
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Norm,
    Blc,
    SapOnly,
    CaaOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Naive,
        Strategy::Norm,
        Strategy::Blc,
        Strategy::SapOnly,
        Strategy::CaaOnly,
    ];

    pub fn uses_sap(self) -> bool {
        self != Strategy::CaaOnly
    }

    pub fn uses_caa(self) -> bool {
        self != Strategy::SapOnly
    }

    /// Whether λ follows the time-step scheduler (otherwise the constant βs).
    pub fn scheduled(self) -> bool {
        matches!(self, Strategy::Blc | Strategy::SapOnly | Strategy::CaaOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Norm => "norm",
            Strategy::Blc => "blc",
            Strategy::SapOnly => "sap_only",
            Strategy::CaaOnly => "caa_only",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedGradient {
    pub values: Array3<f64>,
    pub strategy: Strategy,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl CombinedGradient {
    pub fn zeros(dim: (usize, usize, usize), strategy: Strategy) -> Self {
        Self {
            values: Array3::zeros(dim),
            strategy,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("gradients differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn l2_norm(g: &Array3<f64>) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `λ · g / ‖g‖₂`, or `None` when `‖g‖₂` is below [`NORM_GUARD`].
pub fn scaled_unit(g: &Array3<f64>, lambda: f64) -> Option<Array3<f64>> {
    let n = l2_norm(g);
    (n >= NORM_GUARD).then(|| g.mapv(|v| lambda * (v / n)))
}

fn sum_terms(dim: (usize, usize, usize), a: Option<Array3<f64>>, b: Option<Array3<f64>>) -> Array3<f64> {
    match (a, b) {
        (Some(a), Some(b)) => a + &b,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => Array3::zeros(dim),
    }
}

pub fn combine_naive(g_sap: &Array3<f64>, g_caa: &Array3<f64>, lambda1: f64, lambda2: f64) -> Result<CombinedGradient> {
    check_same(g_sap, g_caa)?;
    Ok(CombinedGradient {
        values: Zip::from(g_sap)
            .and(g_caa)
            .map_collect(|&s, &c| lambda1 * s + lambda2 * c),
        strategy: Strategy::Naive,
        lambda1,
        lambda2,
    })
}

pub fn combine_normalized(
    g_sap: &Array3<f64>,
    g_caa: &Array3<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<CombinedGradient> {
    check_same(g_sap, g_caa)?;
    Ok(CombinedGradient {
        values: sum_terms(
            g_sap.dim(),
            scaled_unit(g_sap, lambda1),
            scaled_unit(g_caa, lambda2),
        ),
        strategy: Strategy::Norm,
        lambda1,
        lambda2,
    })
}

/// Normalized combination weighted by the time-step scheduler at `t`.
pub fn combine_balanced(
    g_sap: &Array3<f64>,
    g_caa: &Array3<f64>,
    t: usize,
    p: &SchedulerParams,
) -> Result<CombinedGradient> {
    let (lambda1, lambda2) = lambda_weights(t, p)?;
    let mut g = combine_normalized(g_sap, g_caa, lambda1, lambda2)?;
    g.strategy = Strategy::Blc;
    Ok(g)
}

/// `ẑ = z - M ⊙ g`; cells outside the mask are left untouched.
pub fn apply_update(z: &LatentGrid, g: &CombinedGradient, mask: &BinaryMask) -> Result<LatentGrid> {
    if z.values.dim() != g.values.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} vs gradient {:?}",
            z.values.dim(),
            g.values.dim()
        )));
    }
    let (c, h, w) = z.shape();
    let m = mask.resample(h, w)?;
    let mut out = z.values.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if m.values()[[y, x]] == 1.0 {
                    out[[ch, y, x]] -= g.values[[ch, y, x]];
                }
            }
        }
    }
    Ok(LatentGrid {
        values: out,
        timestep: z.timestep,
    })
}

/// `ε̂ = ε - g`.
pub fn apply_noise_guidance(eps: &Array3<f64>, g: &CombinedGradient) -> Result<Array3<f64>> {
    check_same(eps, &g.values)?;
    Ok(eps - &g.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use proptest::prelude::*;
    use super::Strategy;

    fn params() -> SchedulerParams {
        SchedulerParams {
            beta1: 5.0,
            beta2: 5.0,
            k1: 0.05,
            k2: 0.05,
            steps: 50,
            form: Form::Eq14,
        }
    }

    #[test]
    fn eq14_endpoint_is_exact() {
        assert_eq!(lambda_weights(50, &params()).unwrap(), (0.0, 5.0));
    }

    #[test]
    fn eq14_interior_values() {
        // frozen from an independent evaluation: 5(1 - e^{-1.25}), 5e^{-1.25}
        let (a, b) = lambda_weights(25, &params()).unwrap();
        assert!((a - 3.567_476_015_699_049).abs() < 1e-12);
        assert!((b - 1.432_523_984_300_951).abs() < 1e-12);
        let (a, b) = lambda_weights(1, &params()).unwrap();
        assert!((a - 4.568_532_067_503_147).abs() < 1e-12);
        assert!((b - 0.431_467_932_496_852_4).abs() < 1e-12);
    }

    #[test]
    fn alg1_form() {
        let p = SchedulerParams {
            form: Form::Alg1,
            ..params()
        };
        let (a, b) = lambda_weights(20, &p).unwrap();
        assert!((a - 5.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((b - 5.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_timestep() {
        assert!(matches!(lambda_weights(0, &params()), Err(Error::Range(_))));
        assert!(matches!(lambda_weights(51, &params()), Err(Error::Range(_))));
    }

    #[test]
    fn invalid_params() {
        let p = SchedulerParams { k1: 0.0, ..params() };
        assert!(p.validate().is_err());
        let p = SchedulerParams { steps: 0, ..params() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn naive_cases() {
        let s = arr3(&[[[1.0, 0.0]]]);
        let c = arr3(&[[[0.0, 2.0]]]);
        assert!(combine_naive(&s, &c, 0.0, 0.0).unwrap().values.iter().all(|&v| v == 0.0));
        assert_eq!(combine_naive(&s, &c, 2.0, 3.0).unwrap().values, arr3(&[[[2.0, 6.0]]]));
        let zero = Array3::zeros((1, 1, 2));
        assert_eq!(combine_naive(&s, &zero, 1.5, 9.0).unwrap().values, s.mapv(|v| 1.5 * v));
    }

    #[test]
    fn normalized_cases() {
        let s = arr3(&[[[2.0, 0.0]]]);
        let c = arr3(&[[[0.0, 7.0]]]);
        let g = combine_normalized(&s, &c, 3.0, 0.0).unwrap();
        assert!((l2_norm(&g.values) - 3.0).abs() < 1e-15);

        let p = arr3(&[[[1.0, 2.0]]]);
        let g = combine_normalized(&p, &p, 1.0, 1.0).unwrap();
        assert!((l2_norm(&g.values) - 2.0).abs() < 1e-15);

        let zero = Array3::zeros((1, 1, 2));
        let g = combine_normalized(&zero, &c, 1.0, 4.0).unwrap();
        assert!(g.values.iter().all(|v| v.is_finite()));
        assert_eq!(g.values, arr3(&[[[0.0, 4.0]]]));
    }

    #[test]
    fn balanced_cases() {
        let s = arr3(&[[[1.0, 0.0]]]);
        let c = arr3(&[[[0.0, 1.0]]]);
        let g = combine_balanced(&s, &c, 50, &params()).unwrap();
        assert_eq!(g.values, scaled_unit(&c, 5.0).unwrap());

        let g = combine_balanced(&s, &c, 25, &params()).unwrap();
        let expected = 3.567_476_015_699_049f64.hypot(1.432_523_984_300_951);
        assert!((l2_norm(&g.values) - expected).abs() < 1e-12);

        let zero = Array3::zeros((1, 1, 2));
        let g = combine_balanced(&s, &zero, 25, &params()).unwrap();
        let (l1, _) = lambda_weights(25, &params()).unwrap();
        assert_eq!(g.values, s.mapv(|v| l1 * v));
    }

    #[test]
    fn update_cases() {
        let z = LatentGrid {
            values: arr3(&[[[1.0]]]),
            timestep: 4,
        };
        let g = CombinedGradient {
            values: arr3(&[[[0.25]]]),
            strategy: Strategy::Blc,
            lambda1: 0.0,
            lambda2: 0.0,
        };
        assert_eq!(apply_update(&z, &g, &BinaryMask::ones(1, 1)).unwrap().values, arr3(&[[[0.75]]]));
        assert_eq!(apply_update(&z, &g, &BinaryMask::zeros(1, 1)).unwrap().values, z.values);
        let zero = CombinedGradient::zeros((1, 1, 1), Strategy::Blc);
        assert_eq!(apply_update(&z, &zero, &BinaryMask::ones(1, 1)).unwrap().values, z.values);
    }

    #[test]
    fn noise_guidance_cases() {
        let guidance = |v: Array3<f64>| CombinedGradient {
            values: v,
            strategy: Strategy::Blc,
            lambda1: 0.0,
            lambda2: 0.0,
        };
        let eps = arr3(&[[[0.5]]]);
        let g = guidance(arr3(&[[[0.1]]]));
        assert!((apply_noise_guidance(&eps, &g).unwrap()[[0, 0, 0]] - 0.4).abs() < 1e-15);
        assert_eq!(apply_noise_guidance(&eps, &guidance(Array3::zeros((1, 1, 1)))).unwrap(), eps);

        let eps = arr3(&[[[0.5, -0.25]]]);
        let g = guidance(arr3(&[[[0.125, 0.5]]]));
        let once = apply_noise_guidance(&eps, &g).unwrap();
        let back = guidance(-&g.values);
        assert_eq!(apply_noise_guidance(&once, &back).unwrap(), eps);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn eq14_monotone_and_bounded(b1 in 0.1f64..10.0, b2 in 0.1f64..10.0, k1 in 0.01f64..1.0, k2 in 0.01f64..1.0, steps in 1usize..100) {
            let p = SchedulerParams { beta1: b1, beta2: b2, k1, k2, steps, form: Form::Eq14 };
            let mut prev: Option<(f64, f64)> = None;
            for t in 1..=steps {
                let (l1, l2) = lambda_weights(t, &p).unwrap();
                // strict upper bound only holds while exp(-k1 (T - t)) is representable above epsilon
                prop_assert!(l1 >= 0.0 && l1 <= b1);
                if k1 * ((steps - t) as f64) < 30.0 {
                    prop_assert!(l1 < b1);
                }
                prop_assert!(l2 > 0.0 && l2 <= b2);
                if let Some((p1, p2)) = prev {
                    prop_assert!(l1 <= p1);
                    prop_assert!(l2 >= p2);
                }
                prev = Some((l1, l2));
            }
        }

        #[test]
        fn normalized_norm_bound(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6), l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
            let a = Array3::from_shape_vec((1, 2, 3), a).unwrap();
            let b = Array3::from_shape_vec((1, 2, 3), b).unwrap();
            let g = combine_normalized(&a, &b, l1, l2).unwrap();
            prop_assert!(l2_norm(&g.values) <= l1 + l2 + 1e-12);
        }

        #[test]
        fn balanced_equals_normalized_with_scheduled_lambdas(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6), t in 1usize..=50) {
            let a = Array3::from_shape_vec((1, 2, 3), a).unwrap();
            let b = Array3::from_shape_vec((1, 2, 3), b).unwrap();
            let (l1, l2) = lambda_weights(t, &params()).unwrap();
            prop_assert_eq!(
                combine_balanced(&a, &b, t, &params()).unwrap().values,
                combine_normalized(&a, &b, l1, l2).unwrap().values
            );
        }

        #[test]
        fn update_outside_mask_is_identity(z in prop::collection::vec(-3.0f64..3.0, 8), g in prop::collection::vec(-3.0f64..3.0, 8), bits in prop::collection::vec(0u8..2, 4)) {
            let z = LatentGrid { values: Array3::from_shape_vec((2, 2, 2), z).unwrap(), timestep: 1 };
            let g = CombinedGradient { values: Array3::from_shape_vec((2, 2, 2), g).unwrap(), strategy: Strategy::Blc, lambda1: 0.0, lambda2: 0.0 };
            let m = BinaryMask::new_allow_empty(ndarray::Array2::from_shape_vec((2, 2), bits.iter().map(|&b| b as f64).collect()).unwrap()).unwrap();
            let out = apply_update(&z, &g, &m).unwrap();
            for ch in 0..2 { for y in 0..2 { for x in 0..2 {
                if m.values()[[y, x]] == 0.0 {
                    prop_assert_eq!(out.values[[ch, y, x]].to_bits(), z.values[[ch, y, x]].to_bits());
                }
            }}}
        }
    }
}
