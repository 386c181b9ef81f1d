use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{GradientTrace, TraceRow};

pub const TRACE_HEADER: &str =
    "t,iter,lambda1,lambda2,loss_sap,loss_caa,grad_sap_mean_abs,grad_caa_mean_abs,grad_sap_l2,grad_caa_l2";

/// Significant digits kept for real-valued trace columns.
pub const TRACE_DIGITS: usize = 9;

pub fn format_real(v: f64) -> String {
    format!("{:.*e}", TRACE_DIGITS - 1, v)
}

/// `v` as it reads back after a trip through the trace format.
pub fn quantize(v: f64) -> f64 {
    format_real(v).parse().expect("formatted real parses")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

pub fn trace_to_csv(trace: &GradientTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let fields = [
            r.t.to_string(),
            r.iter.to_string(),
            format_real(r.lambda1),
            format_real(r.lambda2),
            opt(r.loss_sap),
            opt(r.loss_caa),
            opt(r.grad_sap_mean_abs),
            opt(r.grad_caa_mean_abs),
            opt(r.grad_sap_l2),
            opt(r.grad_caa_l2),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn emit_trace(trace: &GradientTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path, e))
}

pub fn parse_trace(text: &str) -> Result<GradientTrace> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == TRACE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing trace header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line, message };
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 10 {
            return Err(bad(format!("expected 10 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { real(s).map(Some) };
        rows.push(TraceRow {
            t: int(f[0])?,
            iter: int(f[1])?,
            lambda1: real(f[2])?,
            lambda2: real(f[3])?,
            loss_sap: opt(f[4])?,
            loss_caa: opt(f[5])?,
            grad_sap_mean_abs: opt(f[6])?,
            grad_caa_mean_abs: opt(f[7])?,
            grad_sap_l2: opt(f[8])?,
            grad_caa_l2: opt(f[9])?,
        });
    }
    Ok(GradientTrace { rows })
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<GradientTrace> {
    let path = path.as_ref();
    parse_trace(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Plot-ready long format: one `t,iter,series,value` line per present value.
pub fn trace_long_format(trace: &GradientTrace) -> String {
    let mut out = String::from("t,iter,series,value\n");
    for r in &trace.rows {
        let series = [
            ("lambda1", Some(r.lambda1)),
            ("lambda2", Some(r.lambda2)),
            ("loss_sap", r.loss_sap),
            ("loss_caa", r.loss_caa),
            ("grad_sap_mean_abs", r.grad_sap_mean_abs),
            ("grad_caa_mean_abs", r.grad_caa_mean_abs),
            ("grad_sap_l2", r.grad_sap_l2),
            ("grad_caa_l2", r.grad_caa_l2),
        ];
        for (name, v) in series {
            if let Some(v) = v {
                out.push_str(&format!("{},{},{name},{}\n", r.t, r.iter, format_real(v)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> TraceRow {
        TraceRow {
            t: 50,
            iter: 1,
            lambda1: 0.0,
            lambda2: 5.0,
            loss_sap: Some(1.234567891234),
            loss_caa: None,
            grad_sap_mean_abs: Some(-3.0e-7),
            grad_caa_mean_abs: None,
            grad_sap_l2: Some(0.1),
            grad_caa_l2: None,
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(trace_to_csv(&GradientTrace::new()), format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn one_row_round_trip() {
        let t = GradientTrace { rows: vec![row()] };
        let csv = trace_to_csv(&t);
        assert_eq!(csv.lines().count(), 2);
        let back = parse_trace(&csv).unwrap();
        assert_eq!(back.rows[0].loss_sap, Some(1.23456789));
        assert_eq!(trace_to_csv(&back), csv);
    }

    #[test]
    fn rejects_short_rows() {
        let text = format!("{TRACE_HEADER}\n1,2,3\n");
        assert!(matches!(parse_trace(&text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn long_format_skips_absent_values() {
        let s = trace_long_format(&GradientTrace { rows: vec![row()] });
        assert_eq!(s.lines().count(), 1 + 5);
    }
}
