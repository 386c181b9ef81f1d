//! Attention-map losses: self-attention preservation (global and
//! region-restricted) and cross-attention alignment, with their analytic
//! derivatives with respect to the target-branch maps.
//!
//! All losses are evaluated in `f64`.

use ndarray::{Array1, Array2};

use crate::backend::AttentionMap;
use crate::error::{Error, Result};
use crate::mask::{FlattenedMask, SaMaskOuter};

/// Floor applied to a ratio before taking its square root.
pub const RATIO_FLOOR: f64 = 1e-12;

fn check_aligned(src: &[AttentionMap], tgt: &[AttentionMap]) -> Result<()> {
    if src.len() != tgt.len() {
        return Err(Error::Validation(format!(
            "SA layer lists differ in length: {} source vs {} target",
            src.len(),
            tgt.len()
        )));
    }
    for (a, b) in src.iter().zip(tgt) {
        if a.layer_id != b.layer_id || a.resolution != b.resolution {
            return Err(Error::Validation(format!(
                "SA layers misaligned: source ({}, {}) vs target ({}, {})",
                a.layer_id, a.resolution, b.layer_id, b.resolution
            )));
        }
        if a.map.dim() != b.map.dim() {
            return Err(Error::Shape(format!(
                "SA layer {} shapes differ: {:?} vs {:?}",
                a.layer_id,
                a.map.dim(),
                b.map.dim()
            )));
        }
    }
    Ok(())
}

fn outer_for(masks: &[SaMaskOuter], layer: &AttentionMap) -> Result<Array2<f64>> {
    let m = masks
        .iter()
        .find(|m| m.resolution() == layer.resolution)
        .ok_or_else(|| {
            Error::Shape(format!(
                "no SA mask for resolution {} (layer {})",
                layer.resolution, layer.layer_id
            ))
        })?;
    if m.matrix().dim() != layer.map.dim() {
        return Err(Error::Shape(format!(
            "SA mask {:?} does not match layer {} map {:?}",
            m.matrix().dim(),
            layer.layer_id,
            layer.map.dim()
        )));
    }
    Ok(m.matrix().clone())
}

fn masked_sq_diff(a: &Array2<f64>, b: &Array2<f64>, m: Option<&Array2<f64>>) -> f64 {
    let mut acc = 0.0;
    match m {
        None => {
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc += d * d;
            }
        }
        Some(m) => {
            for ((x, y), w) in a.iter().zip(b.iter()).zip(m.iter()) {
                let d = w * x - w * y;
                acc += d * d;
            }
        }
    }
    acc
}

/// Sum over layers and entries of `(A_src - A_tgt)²`.
pub fn sa_preservation(src: &[AttentionMap], tgt: &[AttentionMap]) -> Result<f64> {
    check_aligned(src, tgt)?;
    Ok(src
        .iter()
        .zip(tgt)
        .map(|(a, b)| masked_sq_diff(&a.map, &b.map, None))
        .sum())
}

/// Sum of `(M̂ ⊙ A_src - M̂ ⊙ A_tgt)²`, one `M̂` per resolution.
pub fn region_sa_preservation(
    src: &[AttentionMap],
    tgt: &[AttentionMap],
    masks: &[SaMaskOuter],
) -> Result<f64> {
    check_aligned(src, tgt)?;
    let mut total = 0.0;
    for (a, b) in src.iter().zip(tgt) {
        let m = outer_for(masks, b)?;
        total += masked_sq_diff(&a.map, &b.map, Some(&m));
    }
    Ok(total)
}

/// Gradient of the (optionally masked) SA preservation loss with respect to
/// each target map, in target-layer order.
pub fn sa_preservation_grad(
    src: &[AttentionMap],
    tgt: &[AttentionMap],
    masks: Option<&[SaMaskOuter]>,
) -> Result<Vec<Array2<f64>>> {
    check_aligned(src, tgt)?;
    src.iter()
        .zip(tgt)
        .map(|(a, b)| {
            let mut g = (&b.map - &a.map) * 2.0;
            if let Some(masks) = masks {
                let m = outer_for(masks, b)?;
                // d/dB (mA - mB)^2 = 2 m^2 (B - A)
                g *= &m.mapv(|w| w * w);
            }
            Ok(g)
        })
        .collect()
}

fn check_column(map: &Array2<f64>, token: usize, mask: &FlattenedMask) -> Result<()> {
    if token >= map.ncols() {
        return Err(Error::Range(format!(
            "token index {token} out of range for {} tokens",
            map.ncols()
        )));
    }
    if mask.len() != map.nrows() {
        return Err(Error::Shape(format!(
            "mask length {} does not match CA map with {} cells",
            mask.len(),
            map.nrows()
        )));
    }
    Ok(())
}

struct RatioParts {
    inside_mean: f64,
    outside_mean: Option<f64>,
    inside_count: f64,
    outside_count: f64,
}

impl RatioParts {
    fn ratio(&self) -> f64 {
        match self.outside_mean {
            Some(out) => self.inside_mean / out,
            None => self.inside_mean,
        }
    }

    /// dR/dc_j for a cell that is inside (`true`) or outside the mask.
    fn d_ratio(&self, inside: bool) -> f64 {
        match (self.outside_mean, inside) {
            (None, true) => 1.0 / self.inside_count,
            (None, false) => 0.0,
            (Some(out), true) => 1.0 / (self.inside_count * out),
            (Some(out), false) => -self.inside_mean / (self.outside_count * out * out),
        }
    }
}

fn ratio_parts(column: &Array1<f64>, mask: &FlattenedMask) -> Result<RatioParts> {
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0.0, 0.0, 0.0);
    for (&c, &m) in column.iter().zip(mask.vector()) {
        if m == 1.0 {
            s_in += c;
            n_in += 1.0;
        } else {
            s_out += c;
            n_out += 1.0;
        }
    }
    if n_in == 0.0 {
        return Err(Error::DegenerateMask(
            "mask has no inside cells at the CA resolution".into(),
        ));
    }
    Ok(RatioParts {
        inside_mean: s_in / n_in,
        // all-ones mask: the outside mean is empty and the denominator is 1
        outside_mean: (n_out > 0.0).then(|| s_out / n_out),
        inside_count: n_in,
        outside_count: n_out,
    })
}

fn group_column(map: &Array2<f64>, group: &[usize]) -> Array1<f64> {
    let mut col = Array1::<f64>::zeros(map.nrows());
    for &k in group {
        col += &map.column(k);
    }
    col / group.len() as f64
}

/// Inside-to-outside mean ratio of one token's CA column.
pub fn ca_ratio(map: &Array2<f64>, token: usize, mask: &FlattenedMask) -> Result<f64> {
    check_column(map, token, mask)?;
    Ok(ratio_parts(&map.column(token).to_owned(), mask)?.ratio())
}

/// Ratio for a token made of several sub-tokens (mean of their columns).
pub fn ca_ratio_group(map: &Array2<f64>, group: &[usize], mask: &FlattenedMask) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::Validation("empty token group".into()));
    }
    for &k in group {
        check_column(map, k, mask)?;
    }
    Ok(ratio_parts(&group_column(map, group), mask)?.ratio())
}

/// `mean_i -(Σ_l √R_l)²` over single-index tokens.
pub fn ca_alignment(layers: &[Array2<f64>], tokens: &[usize], mask: &FlattenedMask) -> Result<f64> {
    let groups: Vec<Vec<usize>> = tokens.iter().map(|&t| vec![t]).collect();
    ca_alignment_groups(layers, &groups, mask)
}

pub fn ca_alignment_groups(
    layers: &[Array2<f64>],
    groups: &[Vec<usize>],
    mask: &FlattenedMask,
) -> Result<f64> {
    Ok(ca_alignment_with_grad(layers, groups, mask, false)?.0)
}

/// CA alignment loss together with its gradient with respect to every layer map.
pub fn ca_alignment_grad(
    layers: &[Array2<f64>],
    groups: &[Vec<usize>],
    mask: &FlattenedMask,
) -> Result<(f64, Vec<Array2<f64>>)> {
    ca_alignment_with_grad(layers, groups, mask, true)
}

fn ca_alignment_with_grad(
    layers: &[Array2<f64>],
    groups: &[Vec<usize>],
    mask: &FlattenedMask,
    want_grad: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if layers.is_empty() {
        return Err(Error::Validation("CA alignment needs at least one layer".into()));
    }
    if groups.is_empty() {
        return Err(Error::Validation("CA alignment needs at least one token".into()));
    }
    let mut grads: Vec<Array2<f64>> = if want_grad {
        layers.iter().map(|m| Array2::zeros(m.dim())).collect()
    } else {
        Vec::new()
    };
    let scale = 1.0 / groups.len() as f64;
    let mut total = 0.0;
    for group in groups {
        if group.is_empty() {
            return Err(Error::Validation("empty token group".into()));
        }
        let mut parts = Vec::with_capacity(layers.len());
        for map in layers {
            for &k in group {
                check_column(map, k, mask)?;
            }
            parts.push(ratio_parts(&group_column(map, group), mask)?);
        }
        let roots: Vec<f64> = parts
            .iter()
            .map(|p| p.ratio().max(RATIO_FLOOR).sqrt())
            .collect();
        let s: f64 = roots.iter().sum();
        total += -(s * s);
        if !want_grad {
            continue;
        }
        for ((p, root), g) in parts.iter().zip(&roots).zip(grads.iter_mut()) {
            if p.ratio() <= RATIO_FLOOR {
                continue;
            }
            // d(-S²)/dR = -2S · 1/(2√R)
            let d_loss_d_ratio = -s / root * scale;
            let per_sub = 1.0 / group.len() as f64;
            for (j, &m) in mask.vector().iter().enumerate() {
                let d = d_loss_d_ratio * p.d_ratio(m == 1.0) * per_sub;
                if d != 0.0 {
                    for &k in group {
                        g[[j, k]] += d;
                    }
                }
            }
        }
    }
    Ok((total * scale, grads))
}
