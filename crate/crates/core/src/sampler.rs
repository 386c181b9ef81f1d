//! Deterministic DDIM inversion and sampling, classifier-free guidance and
//! mask blending.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::backend::{
    AlphaSchedule, AttentionBundle, CaptureConfig, DiffusionBackend, LatentGrid, Pass, PromptEncoding,
};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
///
/// Scales of exactly 1 and 0 return the conditional and unconditional
/// predictions unchanged.
pub fn cfg_noise(eps_uncond: &Array3<f64>, eps_cond: &Array3<f64>, scale: f64) -> Result<Array3<f64>> {
    if eps_uncond.dim() != eps_cond.dim() {
        return Err(Error::Shape(format!(
            "CFG inputs differ: {:?} vs {:?}",
            eps_uncond.dim(),
            eps_cond.dim()
        )));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(Zip::from(eps_uncond)
        .and(eps_cond)
        .map_collect(|&u, &c| u + scale * (c - u)))
}

fn check_alpha(a: f64, name: &str) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {a} outside (0, 1]")))
    }
}

/// Moves a latent from the noise level `alpha_from` to `alpha_to` with a
/// shared noise estimate; inversion and sampling are the same map with the
/// roles of the two alphas swapped.
fn ddim_transfer(
    z: &Array3<f64>,
    eps: &Array3<f64>,
    alpha_from: f64,
    alpha_to: f64,
) -> Result<Array3<f64>> {
    if z.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise {:?}",
            z.dim(),
            eps.dim()
        )));
    }
    let scale = (alpha_to / alpha_from).sqrt();
    let noise = alpha_to.sqrt() * ((1.0 / alpha_to - 1.0).sqrt() - (1.0 / alpha_from - 1.0).sqrt());
    Ok(Zip::from(z).and(eps).map_collect(|&z, &e| scale * z + noise * e))
}

/// One inversion step `t -> t+1`.
pub fn ddim_invert_step(z: &LatentGrid, eps: &Array3<f64>, alpha_t: f64, alpha_next: f64) -> Result<LatentGrid> {
    check_alpha(alpha_t, "alpha_t")?;
    check_alpha(alpha_next, "alpha_next")?;
    Ok(LatentGrid {
        values: ddim_transfer(&z.values, eps, alpha_t, alpha_next)?,
        timestep: z.timestep + 1,
    })
}

/// One sampling step `t -> t-1`.
pub fn ddim_sample_step(z: &LatentGrid, eps: &Array3<f64>, alpha_t: f64, alpha_prev: f64) -> Result<LatentGrid> {
    check_alpha(alpha_t, "alpha_t")?;
    check_alpha(alpha_prev, "alpha_prev")?;
    if z.timestep == 0 {
        return Err(Error::Range("cannot sample below t=0".into()));
    }
    Ok(LatentGrid {
        values: ddim_transfer(&z.values, eps, alpha_t, alpha_prev)?,
        timestep: z.timestep - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inversion,
    Sampling,
}

/// Latents for `t = 0..=T` (index = timestep), plus per-step noise and
/// optionally the attention captured at each step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub latents: Vec<LatentGrid>,
    /// `noise[k]` is the estimate used between timesteps `k` and `k+1`.
    pub noise: Vec<Array3<f64>>,
    /// `bundles[k]` was captured on the model call for step `k <-> k+1`,
    /// which runs at timestep `k+1`.
    pub bundles: Option<Vec<AttentionBundle>>,
    pub direction: Direction,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn at(&self, t: usize) -> &LatentGrid {
        &self.latents[t]
    }

    pub fn last(&self) -> &LatentGrid {
        self.latents.last().expect("trajectory is never empty")
    }

    /// Stacks all latents into one `(T+1, C, H, W)` array.
    pub fn stacked(&self) -> ndarray::Array4<f64> {
        let (c, h, w) = self.latents[0].shape();
        let mut out = ndarray::Array4::zeros((self.latents.len(), c, h, w));
        for (i, z) in self.latents.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(&z.values);
        }
        out
    }
}

/// Produces the inverted noise latent `z_T` (and the path to it) for a clean latent.
pub trait InversionProvider: Send + Sync {
    fn id(&self) -> &str;

    fn invert(
        &self,
        z0: &LatentGrid,
        prompt: &PromptEncoding,
        schedule: &AlphaSchedule,
        backend: &dyn DiffusionBackend,
        capture: Option<&CaptureConfig>,
    ) -> Result<Trajectory>;
}

/// Plain DDIM inversion with guidance scale 1 (conditional pass only).
#[derive(Debug, Clone, Copy, Default)]
pub struct DdimInversion;

impl InversionProvider for DdimInversion {
    fn id(&self) -> &str {
        "ddim"
    }

    fn invert(
        &self,
        z0: &LatentGrid,
        prompt: &PromptEncoding,
        schedule: &AlphaSchedule,
        backend: &dyn DiffusionBackend,
        capture: Option<&CaptureConfig>,
    ) -> Result<Trajectory> {
        invert_trajectory(z0, prompt, schedule, backend, capture)
    }
}

pub fn invert_trajectory(
    z0: &LatentGrid,
    prompt: &PromptEncoding,
    schedule: &AlphaSchedule,
    backend: &dyn DiffusionBackend,
    capture: Option<&CaptureConfig>,
) -> Result<Trajectory> {
    if z0.timestep != 0 {
        return Err(Error::Validation(format!(
            "inversion starts from t=0, got t={}",
            z0.timestep
        )));
    }
    let steps = schedule.steps();
    let no_capture = CaptureConfig::none();
    let mut latents = Vec::with_capacity(steps + 1);
    let mut noise = Vec::with_capacity(steps);
    let mut bundles = capture.map(|_| Vec::with_capacity(steps));
    latents.push(z0.clone());
    for k in 0..steps {
        let z = &latents[k];
        let (eps, bundle) = backend.predict_noise(z, k + 1, prompt, capture.unwrap_or(&no_capture))?;
        let next = ddim_invert_step(z, &eps, schedule.alpha(k), schedule.alpha(k + 1))?;
        if let Some(b) = bundles.as_mut() {
            b.push(bundle);
        }
        noise.push(eps);
        latents.push(next);
    }
    Ok(Trajectory {
        latents,
        noise,
        bundles,
        direction: Direction::Inversion,
    })
}

/// CFG-combined noise for one latent. Maps are taken from the pass named by
/// `capture.capture_pass`. A scale of exactly 1 skips the unconditional pass.
pub fn guided_noise(
    backend: &dyn DiffusionBackend,
    z: &LatentGrid,
    t: usize,
    cond: &PromptEncoding,
    uncond: &PromptEncoding,
    scale: f64,
    capture: &CaptureConfig,
) -> Result<(Array3<f64>, AttentionBundle)> {
    let (eps_c, bundle_c) = backend.predict_noise(z, t, cond, capture)?;
    if scale == 1.0 {
        return Ok((eps_c, bundle_c));
    }
    let (eps_u, bundle_u) = backend.predict_noise(z, t, uncond, capture)?;
    let bundle = match capture.capture_pass {
        Pass::Conditional => bundle_c,
        Pass::Unconditional => bundle_u,
    };
    Ok((cfg_noise(&eps_u, &eps_c, scale)?, bundle))
}

/// Denoises `z_T` to `t = 0`. With `replay`, the stored per-step noise
/// (indexed as in [`Trajectory::noise`]) is used instead of the model.
pub fn sample_trajectory(
    z_t: &LatentGrid,
    cond: &PromptEncoding,
    uncond: &PromptEncoding,
    schedule: &AlphaSchedule,
    backend: &dyn DiffusionBackend,
    cfg_scale: f64,
    replay: Option<&[Array3<f64>]>,
) -> Result<Trajectory> {
    let steps = schedule.steps();
    if z_t.timestep != steps {
        return Err(Error::Validation(format!(
            "sampling starts from t={steps}, got t={}",
            z_t.timestep
        )));
    }
    if let Some(r) = replay {
        if r.len() != steps {
            return Err(Error::Validation(format!(
                "replay holds {} noise estimates for {steps} steps",
                r.len()
            )));
        }
    }
    let mut rev = vec![z_t.clone()];
    let mut noise = vec![Array3::zeros(z_t.values.dim()); steps];
    for t in (1..=steps).rev() {
        let z = rev.last().unwrap();
        let eps = match replay {
            Some(r) => r[t - 1].clone(),
            None => guided_noise(backend, z, t, cond, uncond, cfg_scale, &CaptureConfig::none())?.0,
        };
        let next = ddim_sample_step(z, &eps, schedule.alpha(t), schedule.alpha(t - 1))?;
        noise[t - 1] = eps;
        rev.push(next);
    }
    rev.reverse();
    Ok(Trajectory {
        latents: rev,
        noise,
        bundles: None,
        direction: Direction::Sampling,
    })
}

/// `M ⊙ z_target + (1 - M) ⊙ z_source`, with the mask resampled to the
/// latent's spatial size and broadcast over channels.
pub fn blend_latents(z_target: &LatentGrid, z_source: &LatentGrid, mask: &BinaryMask) -> Result<LatentGrid> {
    if z_target.shape() != z_source.shape() {
        return Err(Error::Shape(format!(
            "blend inputs differ: {:?} vs {:?}",
            z_target.shape(),
            z_source.shape()
        )));
    }
    let (c, h, w) = z_target.shape();
    let m = mask.resample(h, w)?;
    let mut out = z_source.values.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if m.values()[[y, x]] == 1.0 {
                    out[[ch, y, x]] = z_target.values[[ch, y, x]];
                }
            }
        }
    }
    Ok(LatentGrid {
        values: out,
        timestep: z_target.timestep,
    })
}
