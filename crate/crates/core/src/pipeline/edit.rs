use std::collections::BTreeSet;

use ndarray::Array3;

use super::config::{EditConfig, EditSpec, GuidanceMode, SaSource, SapMode};
use super::trace::{GradientTrace, TraceRow};
use crate::backend::{
    AlphaSchedule, AttentionMap, CaptureConfig, ConstraintDescriptor, DiffusionBackend, LatentGrid, Pass,
    PromptEncoding,
};
use crate::constraints::{ca_ratio_group, sa_preservation};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::sampler::{blend_latents, ddim_sample_step, guided_noise, InversionProvider};
use crate::scheduler::{
    apply_noise_guidance, apply_update, combine_balanced, combine_naive, combine_normalized, l2_norm,
    lambda_weights, scaled_unit, CombinedGradient, Strategy,
};

#[derive(Debug, Clone)]
pub enum EditInput {
    /// A clean latent (`t = 0`); it is inverted first.
    Clean(LatentGrid),
    /// An already inverted latent (`t = T`).
    Noise(LatentGrid),
}

/// Source SA maps used as preservation references.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceMaps {
    /// Captured fresh from the co-simulated source branch at each step.
    CoSimulated,
    /// `maps[t - 1]` holds the inversion pass maps for denoising step `t`.
    Recorded(Vec<Vec<AttentionMap>>),
}

impl ReferenceMaps {
    pub fn len(&self) -> usize {
        match self {
            ReferenceMaps::CoSimulated => 0,
            ReferenceMaps::Recorded(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sa_resolutions(config: &EditConfig, backend: &dyn DiffusionBackend) -> BTreeSet<usize> {
    config
        .sa_resolutions
        .clone()
        .unwrap_or_else(|| backend.info().sa_resolutions.clone())
}

fn sa_capture(resolutions: &BTreeSet<usize>) -> CaptureConfig {
    CaptureConfig {
        sa_resolutions: resolutions.clone(),
        ca_resolutions: BTreeSet::new(),
        capture_pass: Pass::Conditional,
    }
}

/// Inverts `z0` under the source prompt and, for `sa_source =
/// inversion_trajectory`, keeps the SA maps of every inversion step.
pub fn capture_reference_maps(
    z0: &LatentGrid,
    spec: &EditSpec,
    config: &EditConfig,
    backend: &dyn DiffusionBackend,
    inversion: &dyn InversionProvider,
) -> Result<(LatentGrid, ReferenceMaps)> {
    let schedule = AlphaSchedule::scaled_linear(config.steps())?;
    let prompt = backend.encode_prompt(&spec.source_prompt)?;
    let res = sa_resolutions(config, backend);
    let capture = sa_capture(&res);
    let record = config.sa_source == SaSource::InversionTrajectory;
    let traj = inversion.invert(z0, &prompt, &schedule, backend, record.then_some(&capture))?;
    let z_t = traj.last().clone();
    let reference = match traj.bundles {
        Some(bundles) if record => {
            ReferenceMaps::Recorded(bundles.into_iter().map(|b| b.sa_in(Some(&res))).collect())
        }
        _ => ReferenceMaps::CoSimulated,
    };
    Ok((z_t, reference))
}

/// Sub-token column groups of each target word in the target encoding.
pub fn resolve_tokens(
    backend: &dyn DiffusionBackend,
    prompt: &PromptEncoding,
    tokens: &[String],
) -> Result<Vec<Vec<usize>>> {
    tokens
        .iter()
        .map(|word| {
            let subs: Vec<String> = word
                .split_whitespace()
                .flat_map(|w| backend.tokenize_word(w))
                .collect();
            if subs.is_empty() {
                return Err(Error::Spec(format!("target token {word:?} tokenizes to nothing")));
            }
            prompt
                .token_strings
                .windows(subs.len())
                .position(|w| w == subs.as_slice())
                .map(|start| (start..start + subs.len()).collect())
                .ok_or_else(|| Error::Spec(format!("target token {word:?} not found in the target prompt")))
        })
        .collect()
}

/// Mean inside/outside CA ratio over the semantic layers and target words.
pub fn alignment_score(
    backend: &dyn DiffusionBackend,
    z: &LatentGrid,
    t: usize,
    prompt: &PromptEncoding,
    groups: &[Vec<usize>],
    mask: &BinaryMask,
) -> Result<Option<f64>> {
    if groups.is_empty() {
        return Ok(None);
    }
    let info = backend.info();
    let r = info.semantic_resolution;
    let capture = CaptureConfig {
        sa_resolutions: BTreeSet::new(),
        ca_resolutions: BTreeSet::from([r]),
        capture_pass: Pass::Conditional,
    };
    let (_, bundle) = backend.predict_noise(z, t, prompt, &capture)?;
    let flat = mask.resample(r, r)?.flatten()?;
    let mut total = 0.0;
    let mut n = 0usize;
    for layer in bundle.ca_at(r) {
        for g in groups {
            total += ca_ratio_group(&layer.map, g, &flat)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation(format!("no CA layers at resolution {r}")));
    }
    Ok(Some(total / n as f64))
}

/// Global SA preservation loss between the two branches' conditional passes.
pub fn structure_score(
    backend: &dyn DiffusionBackend,
    source: (&LatentGrid, &PromptEncoding),
    target: (&LatentGrid, &PromptEncoding),
    t: usize,
    resolutions: &BTreeSet<usize>,
) -> Result<f64> {
    let capture = sa_capture(resolutions);
    let (_, a) = backend.predict_noise(source.0, t, source.1, &capture)?;
    let (_, b) = backend.predict_noise(target.0, t, target.1, &capture)?;
    sa_preservation(&a.sa_layers, &b.sa_layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub source: LatentGrid,
    pub target: LatentGrid,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub source: LatentGrid,
    /// Target latent at `t - 1`, after blending.
    pub target: LatentGrid,
    /// Target latent at `t` after the optimization updates.
    pub target_optimized: LatentGrid,
    pub rows: Vec<TraceRow>,
}

/// Everything one edit needs besides the evolving latents.
pub struct EditSession<'a> {
    pub backend: &'a dyn DiffusionBackend,
    pub spec: EditSpec,
    pub config: EditConfig,
    pub schedule: AlphaSchedule,
    pub source_prompt: PromptEncoding,
    pub target_prompt: PromptEncoding,
    pub unconditional: PromptEncoding,
    pub token_groups: Vec<Vec<usize>>,
    pub mask: BinaryMask,
    pub resolutions: BTreeSet<usize>,
    pub reference: ReferenceMaps,
}

fn divergence(t: usize, iteration: usize, detail: &str) -> Error {
    Error::Divergence {
        t,
        iteration,
        detail: detail.to_string(),
    }
}

fn term_stats(g: &Array3<f64>) -> (f64, f64) {
    let mean_abs = g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
    (mean_abs, l2_norm(g))
}

impl<'a> EditSession<'a> {
    pub fn new(
        spec: EditSpec,
        config: EditConfig,
        backend: &'a dyn DiffusionBackend,
        reference: ReferenceMaps,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate_for(backend.info())?;
        if let ReferenceMaps::Recorded(m) = &reference {
            if m.len() != config.steps() {
                return Err(Error::Validation(format!(
                    "{} recorded reference steps for T = {}",
                    m.len(),
                    config.steps()
                )));
            }
        }
        let schedule = AlphaSchedule::scaled_linear(config.steps())?;
        let source_prompt = backend.encode_prompt(&spec.source_prompt)?;
        let target_prompt = backend.encode_prompt(&spec.target_prompt)?;
        let unconditional = backend.encode_unconditional()?;
        let token_groups = resolve_tokens(backend, &target_prompt, &spec.target_tokens)?;
        let mask = spec.effective_mask(backend.info().spatial)?;
        let resolutions = sa_resolutions(&config, backend);
        Ok(Self {
            backend,
            spec,
            config,
            schedule,
            source_prompt,
            target_prompt,
            unconditional,
            token_groups,
            mask,
            resolutions,
            reference,
        })
    }

    fn sap_active(&self, t: usize) -> bool {
        self.config.sap_active(t)
    }

    fn caa_active(&self, t: usize) -> bool {
        self.config.caa_active(t) && !self.token_groups.is_empty()
    }

    fn lambdas(&self, t: usize) -> Result<(f64, f64)> {
        let p = &self.config.scheduler;
        if self.config.strategy.scheduled() {
            lambda_weights(t, p)
        } else {
            Ok((p.beta1, p.beta2))
        }
    }

    fn weighted_term(&self, g: &Array3<f64>, lambda: f64) -> Array3<f64> {
        match self.config.strategy {
            Strategy::Naive => g * lambda,
            _ => scaled_unit(g, lambda).unwrap_or_else(|| Array3::zeros(g.dim())),
        }
    }

    fn combined_gradient(
        &self,
        z: &LatentGrid,
        t: usize,
        iter: usize,
        reference: &[AttentionMap],
    ) -> Result<(CombinedGradient, TraceRow)> {
        let (l1, l2) = self.lambdas(t)?;
        let dim = z.values.dim();
        let sap = if self.sap_active(t) {
            let desc = match self.config.sap_mode {
                SapMode::Global => ConstraintDescriptor::sap(reference.to_vec(), Some(self.resolutions.clone())),
                SapMode::Region => ConstraintDescriptor::region_sap(
                    reference.to_vec(),
                    self.mask.clone(),
                    Some(self.resolutions.clone()),
                ),
            };
            Some(self.backend.latent_gradient(z, t, &self.target_prompt, &desc)?)
        } else {
            None
        };
        let caa = if self.caa_active(t) {
            let desc = ConstraintDescriptor::caa(self.token_groups.clone(), self.mask.clone());
            Some(self.backend.latent_gradient(z, t, &self.target_prompt, &desc)?)
        } else {
            None
        };
        let zeros = Array3::zeros(dim);
        let g_sap = sap.as_ref().map_or(&zeros, |s| &s.gradient);
        let g_caa = caa.as_ref().map_or(&zeros, |s| &s.gradient);
        let mut combined = match self.config.strategy {
            Strategy::Naive => combine_naive(g_sap, g_caa, l1, l2)?,
            Strategy::Norm => combine_normalized(g_sap, g_caa, l1, l2)?,
            Strategy::Blc => combine_balanced(g_sap, g_caa, t, &self.config.scheduler)?,
            Strategy::SapOnly | Strategy::CaaOnly => combine_normalized(g_sap, g_caa, l1, l2)?,
        };
        combined.strategy = self.config.strategy;
        let sap_stats = sap.as_ref().map(|s| term_stats(&self.weighted_term(&s.gradient, l1)));
        let caa_stats = caa.as_ref().map(|s| term_stats(&self.weighted_term(&s.gradient, l2)));
        let row = TraceRow {
            t,
            iter,
            lambda1: l1,
            lambda2: l2,
            loss_sap: sap.as_ref().map(|s| s.loss),
            loss_caa: caa.as_ref().map(|s| s.loss),
            grad_sap_mean_abs: sap_stats.map(|s| s.0),
            grad_caa_mean_abs: caa_stats.map(|s| s.0),
            grad_sap_l2: sap_stats.map(|s| s.1),
            grad_caa_l2: caa_stats.map(|s| s.1),
        };
        if !combined.values.iter().all(|v| v.is_finite()) {
            return Err(divergence(t, iter, "combined gradient is not finite"));
        }
        Ok((combined, row))
    }

    /// One denoising step of both branches with the target optimized first.
    pub fn step(&self, state: &StepState) -> Result<StepOutput> {
        let t = state.t;
        let steps = self.config.steps();
        if t < 1 || t > steps {
            return Err(Error::Range(format!("step t = {t} outside [1, {steps}]")));
        }
        if state.source.timestep != t || state.target.timestep != t {
            return Err(Error::Validation(format!(
                "latents tagged t = {}/{}, step is at t = {t}",
                state.source.timestep, state.target.timestep
            )));
        }
        let scale = self.config.cfg_scale;
        let capture = sa_capture(&self.resolutions);
        let (eps_src, src_bundle) = guided_noise(
            self.backend,
            &state.source,
            t,
            &self.source_prompt,
            &self.unconditional,
            scale,
            &capture,
        )?;
        let reference = match &self.reference {
            ReferenceMaps::CoSimulated => src_bundle.sa_layers,
            ReferenceMaps::Recorded(m) => m[t - 1].clone(),
        };

        let mut z = state.target.clone();
        let mut rows = Vec::new();
        let mut guidance = None;
        if self.sap_active(t) || self.caa_active(t) {
            let iters = match self.config.guidance_mode {
                GuidanceMode::LatentOptimization => self.config.max_it,
                GuidanceMode::NoiseGuidance => 1,
            };
            for i in 1..=iters {
                let (g, row) = self.combined_gradient(&z, t, i, &reference)?;
                rows.push(row);
                match self.config.guidance_mode {
                    GuidanceMode::LatentOptimization => {
                        z = apply_update(&z, &g, &self.mask)?;
                        if !z.is_finite() {
                            return Err(divergence(t, i, "target latent not finite after update"));
                        }
                    }
                    GuidanceMode::NoiseGuidance => guidance = Some(g),
                }
            }
        }

        let (mut eps_tgt, _) = guided_noise(
            self.backend,
            &z,
            t,
            &self.target_prompt,
            &self.unconditional,
            scale,
            &CaptureConfig::none(),
        )?;
        if let Some(g) = &guidance {
            eps_tgt = apply_noise_guidance(&eps_tgt, g)?;
        }
        let (a_t, a_prev) = (self.schedule.alpha(t), self.schedule.alpha(t - 1));
        let source = ddim_sample_step(&state.source, &eps_src, a_t, a_prev)?;
        let mut target = ddim_sample_step(&z, &eps_tgt, a_t, a_prev)?;
        if self.spec.blends() {
            target = blend_latents(&target, &source, &self.mask)?;
        }
        if !source.is_finite() || !target.is_finite() {
            return Err(divergence(t, rows.len(), "latent not finite after the DDIM step"));
        }
        Ok(StepOutput {
            source,
            target,
            target_optimized: z,
            rows,
        })
    }

    pub fn alignment(&self, z: &LatentGrid, t: usize) -> Result<Option<f64>> {
        alignment_score(self.backend, z, t, &self.target_prompt, &self.token_groups, &self.mask)
    }

    pub fn structure(&self, source: &LatentGrid, target: &LatentGrid, t: usize) -> Result<f64> {
        structure_score(
            self.backend,
            (source, &self.source_prompt),
            (target, &self.target_prompt),
            t,
            &self.resolutions,
        )
    }
}

/// Free-function form of [`EditSession::step`].
pub fn unifyedit_step(state: &StepState, session: &EditSession<'_>) -> Result<StepOutput> {
    session.step(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalScores {
    /// SA preservation loss between the final source and target latents.
    pub loss_sap: f64,
    /// Mean CA ratio of the target words; absent without target words.
    pub mean_ratio: Option<f64>,
    /// The same ratio on the initial noise latent.
    pub initial_mean_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub initial_latent: LatentGrid,
    pub final_source: LatentGrid,
    pub final_latent: LatentGrid,
    pub trace: GradientTrace,
    pub config_echo: EditConfig,
    pub scores: FinalScores,
}

pub fn run_edit(
    input: EditInput,
    spec: &EditSpec,
    config: &EditConfig,
    backend: &dyn DiffusionBackend,
    inversion: &dyn InversionProvider,
) -> Result<EditResult> {
    spec.validate()?;
    config.validate_for(backend.info())?;
    let steps = config.steps();
    let (z_t, reference) = match input {
        EditInput::Clean(z0) => capture_reference_maps(&z0, spec, config, backend, inversion)?,
        EditInput::Noise(z_t) => {
            if config.sa_source == SaSource::InversionTrajectory {
                return Err(Error::Validation(
                    "sa_source = inversion_trajectory needs a clean input latent".into(),
                ));
            }
            if z_t.timestep != steps {
                return Err(Error::Validation(format!(
                    "noise latent tagged t = {}, expected {steps}",
                    z_t.timestep
                )));
            }
            (z_t, ReferenceMaps::CoSimulated)
        }
    };
    let session = EditSession::new(spec.clone(), config.clone(), backend, reference)?;
    let initial_mean_ratio = session.alignment(&z_t, steps)?;
    let mut state = StepState {
        source: z_t.clone(),
        target: z_t.clone(),
        t: steps,
    };
    let mut trace = GradientTrace::new();
    for t in (1..=steps).rev() {
        let out = session.step(&state)?;
        trace.rows.extend(out.rows);
        state = StepState {
            source: out.source,
            target: out.target,
            t: t - 1,
        };
    }
    let scores = FinalScores {
        loss_sap: session.structure(&state.source, &state.target, 0)?,
        mean_ratio: session.alignment(&state.target, 0)?,
        initial_mean_ratio,
    };
    Ok(EditResult {
        initial_latent: z_t,
        final_source: state.source,
        final_latent: state.target,
        trace,
        config_echo: config.clone(),
        scores,
    })
}
