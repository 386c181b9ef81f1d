#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use unifyedit::backend::{
    AttentionMap, CaptureConfig, ConstraintDescriptor, ConstraintKind, DiffusionBackend, LatentGrid,
    PromptEncoding,
};
use unifyedit::constraints;
use unifyedit::mask::{mask_outer, BinaryMask};

pub fn random_latent(seed: u64, dim: (usize, usize, usize), t: usize) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Array3::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
    LatentGrid::new(v, t).unwrap()
}

pub fn square_mask(size: usize, lo: usize, hi: usize) -> BinaryMask {
    let mut m = Array2::zeros((size, size));
    m.slice_mut(ndarray::s![lo..hi, lo..hi]).fill(1.0);
    BinaryMask::new(m).unwrap()
}

/// Constraint loss evaluated from captured maps only (no backward pass).
pub fn forward_loss(
    backend: &dyn DiffusionBackend,
    z: &LatentGrid,
    t: usize,
    prompt: &PromptEncoding,
    c: &ConstraintDescriptor,
) -> f64 {
    let info = backend.info();
    let (_, bundle) = backend
        .predict_noise(z, t, prompt, &CaptureConfig::all(info))
        .unwrap();
    match c.kind {
        ConstraintKind::Sap | ConstraintKind::RegionSap => {
            let reference = c.reference_sa.as_ref().unwrap();
            let tgt: Vec<AttentionMap> = bundle
                .sa_layers
                .iter()
                .filter(|m| match &c.sa_resolutions {
                    Some(s) => s.contains(&m.resolution),
                    None => reference.iter().any(|r| r.layer_id == m.layer_id),
                })
                .cloned()
                .collect();
            let src: Vec<AttentionMap> = tgt
                .iter()
                .map(|m| reference.iter().find(|r| r.layer_id == m.layer_id).unwrap().clone())
                .collect();
            if c.kind == ConstraintKind::Sap {
                constraints::sa_preservation(&src, &tgt).unwrap()
            } else {
                let mask = c.mask.as_ref().unwrap();
                let res: BTreeSet<usize> = tgt.iter().map(|m| m.resolution).collect();
                let outers: Vec<_> = res
                    .iter()
                    .map(|&r| mask_outer(&mask.resample(r, r).unwrap().flatten().unwrap()))
                    .collect();
                constraints::region_sa_preservation(&src, &tgt, &outers).unwrap()
            }
        }
        ConstraintKind::Caa => {
            let r = info.semantic_resolution;
            let maps: Vec<Array2<f64>> = bundle.ca_at(r).map(|m| m.map.clone()).collect();
            let mask = c.mask.as_ref().unwrap().resample(r, r).unwrap().flatten().unwrap();
            constraints::ca_alignment_groups(&maps, c.token_indices.as_ref().unwrap(), &mask).unwrap()
        }
    }
}

pub struct FdReport {
    pub max_rel_coord: f64,
    pub rel_directional: f64,
}

/// Central finite differences on `coords` random coordinates plus one random
/// direction, compared to the analytic gradient.
pub fn finite_difference_check(
    backend: &dyn DiffusionBackend,
    z: &LatentGrid,
    t: usize,
    prompt: &PromptEncoding,
    c: &ConstraintDescriptor,
    step: f64,
    coords: usize,
    seed: u64,
) -> FdReport {
    let analytic = backend.latent_gradient(z, t, prompt, c).unwrap().gradient;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ch, h, w) = z.shape();
    let eval = |dz: &Array3<f64>, s: f64| {
        let zz = LatentGrid::new(&z.values + &(dz * s), z.timestep).unwrap();
        forward_loss(backend, &zz, t, prompt, c)
    };
    let mut max_rel = 0.0f64;
    for _ in 0..coords {
        let idx = (rng.random_range(0..ch), rng.random_range(0..h), rng.random_range(0..w));
        let mut e = Array3::zeros((ch, h, w));
        e[idx] = 1.0;
        let fd = (eval(&e, step) - eval(&e, -step)) / (2.0 * step);
        let an = analytic[idx];
        let denom = fd.abs().max(an.abs()).max(1e-3 * scale).max(1e-12);
        max_rel = max_rel.max((fd - an).abs() / denom);
    }
    let dir = Array3::from_shape_simple_fn((ch, h, w), || StandardNormal.sample(&mut rng));
    let dir = &dir / dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    let fd = (eval(&dir, step) - eval(&dir, -step)) / (2.0 * step);
    let an = (&analytic * &dir).sum();
    let rel_dir = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
    FdReport {
        max_rel_coord: max_rel,
        rel_directional: rel_dir,
    }
}

pub fn toy() -> unifyedit::backend::ToyBackend {
    unifyedit::backend::ToyBackend::new(unifyedit::backend::ToyConfig::default()).unwrap()
}

/// The fixed edit used by the balance and dominance checks.
pub fn car_spec() -> unifyedit::pipeline::EditSpec {
    unifyedit::pipeline::EditSpec {
        source_prompt: "a photo of a red car".into(),
        target_prompt: "a photo of a blue car".into(),
        target_tokens: vec!["blue".into()],
        mask: Some(square_mask(16, 4, 12)),
        edit_type: unifyedit::pipeline::EditType::Texture,
    }
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
