//! Denoising-model interface.
//!
//! A backend predicts noise for a latent and exposes the self- and
//! cross-attention maps of that forward pass. It also answers gradient
//! queries: the derivative of an attention-map constraint with respect to the
//! input latent. [`ToyBackend`] is a small analytic implementation used for
//! testing; adapters for pretrained checkpoints implement the same trait
//! (computing gradients by automatic differentiation) plus [`LatentCodec`].

pub(crate) mod toy;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub use toy::{ToyBackend, ToyConfig};

/// A latent at one timestep. Shape is `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: Array3<f64>,
    pub timestep: usize,
}

impl LatentGrid {
    pub fn new(values: Array3<f64>, timestep: usize) -> Result<Self> {
        let z = Self { values, timestep };
        z.check_finite()?;
        Ok(z)
    }

    pub fn zeros(channels: usize, height: usize, width: usize, timestep: usize) -> Self {
        Self {
            values: Array3::zeros((channels, height, width)),
            timestep,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "latent at t={} has non-finite entries",
                self.timestep
            )))
        }
    }

    pub fn with_timestep(mut self, timestep: usize) -> Self {
        self.timestep = timestep;
        self
    }
}

/// Which classifier-free-guidance branch a forward pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding {
    pub token_embeddings: Array2<f64>,
    pub token_strings: Vec<String>,
    pub pass: Pass,
}

impl PromptEncoding {
    pub fn new(token_embeddings: Array2<f64>, token_strings: Vec<String>, pass: Pass) -> Result<Self> {
        if token_strings.is_empty() {
            return Err(Error::Validation("prompt encoding needs at least one token".into()));
        }
        if token_embeddings.nrows() != token_strings.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows for {} tokens",
                token_embeddings.nrows(),
                token_strings.len()
            )));
        }
        Ok(Self {
            token_embeddings,
            token_strings,
            pass,
        })
    }

    pub fn token_count(&self) -> usize {
        self.token_strings.len()
    }
}

/// One captured attention map. SA maps are `(HW, HW)`, CA maps `(HW, tokens)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer_id: usize,
    pub resolution: usize,
    pub map: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    pub sa_layers: Vec<AttentionMap>,
    pub ca_layers: Vec<AttentionMap>,
    pub source_pass: Pass,
}

impl AttentionBundle {
    pub fn empty(pass: Pass) -> Self {
        Self {
            sa_layers: Vec::new(),
            ca_layers: Vec::new(),
            source_pass: pass,
        }
    }

    pub fn ca_at(&self, resolution: usize) -> impl Iterator<Item = &AttentionMap> {
        self.ca_layers.iter().filter(move |m| m.resolution == resolution)
    }

    pub fn sa_in<'a>(&'a self, resolutions: Option<&'a BTreeSet<usize>>) -> Vec<AttentionMap> {
        self.sa_layers
            .iter()
            .filter(|m| resolutions.is_none_or(|r| r.contains(&m.resolution)))
            .cloned()
            .collect()
    }

    /// Checks row normalization (within `tol`) and the `[0, 1]` range.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for m in self.sa_layers.iter().chain(&self.ca_layers) {
            if m.map.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Validation(format!(
                    "layer {} has entries outside [0, 1]",
                    m.layer_id
                )));
            }
            for (i, s) in m.map.sum_axis(Axis(1)).iter().enumerate() {
                if (s - 1.0).abs() > tol {
                    return Err(Error::Validation(format!(
                        "layer {} row {i} sums to {s}",
                        m.layer_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cumulative signal coefficients `ᾱ_t` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSchedule {
    alphas: Vec<f64>,
}

impl AlphaSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::Validation("alpha schedule needs at least T=1".into()));
        }
        if !(alphas[0] > 0.99 && alphas[0] <= 1.0) {
            return Err(Error::Validation(format!(
                "alphas[0] = {} must lie in (0.99, 1]",
                alphas[0]
            )));
        }
        for (t, w) in alphas.windows(2).enumerate() {
            if !(w[1] < w[0]) {
                return Err(Error::Validation(format!(
                    "alphas must strictly decrease (t={} -> {})",
                    t,
                    t + 1
                )));
            }
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Validation("alphas must lie in (0, 1]".into()));
        }
        Ok(Self { alphas })
    }

    /// The usual latent-diffusion schedule: scaled-linear betas from 0.00085
    /// to 0.012 over 1000 training steps, subsampled to `steps` DDIM steps
    /// with leading spacing and an offset of one.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        const TRAIN_STEPS: usize = 1000;
        if steps == 0 || steps >= TRAIN_STEPS {
            return Err(Error::Config(format!("unsupported step count {steps}")));
        }
        let (start, end) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        let mut cumprod = Vec::with_capacity(TRAIN_STEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_STEPS {
            let b = start + (end - start) * i as f64 / (TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - b * b;
            cumprod.push(acc);
        }
        let ratio = TRAIN_STEPS / steps;
        let mut alphas = vec![cumprod[0]];
        alphas.extend((1..=steps).map(|t| cumprod[(t - 1) * ratio + 1]));
        Self::new(alphas)
    }

    /// Parses one real per line; line index is `t`. Blank lines and `#`
    /// comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut alphas = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("not a real number: {line:?}"),
            })?;
            alphas.push(v);
        }
        Self::new(alphas)
    }

    pub fn to_text(&self) -> String {
        self.alphas.iter().map(|a| format!("{a:e}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureConfig {
    pub sa_resolutions: BTreeSet<usize>,
    pub ca_resolutions: BTreeSet<usize>,
    pub capture_pass: Pass,
}

impl CaptureConfig {
    pub fn none() -> Self {
        Self {
            sa_resolutions: BTreeSet::new(),
            ca_resolutions: BTreeSet::new(),
            capture_pass: Pass::Conditional,
        }
    }

    /// Every resolution the backend declares, conditional pass.
    pub fn all(info: &BackendInfo) -> Self {
        Self {
            sa_resolutions: info.sa_resolutions.clone(),
            ca_resolutions: info.ca_resolutions.clone(),
            capture_pass: Pass::Conditional,
        }
    }

    pub fn validate(&self, info: &BackendInfo) -> Result<()> {
        if !self.sa_resolutions.is_subset(&info.sa_resolutions) {
            return Err(Error::Config(format!(
                "requested SA resolutions {:?} not within backend's {:?}",
                self.sa_resolutions, info.sa_resolutions
            )));
        }
        if !self.ca_resolutions.is_subset(&info.ca_resolutions) {
            return Err(Error::Config(format!(
                "requested CA resolutions {:?} not within backend's {:?}",
                self.ca_resolutions, info.ca_resolutions
            )));
        }
        Ok(())
    }
}

/// Static description of a backend's latent and attention layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendInfo {
    pub channels: usize,
    pub spatial: usize,
    pub sa_resolutions: BTreeSet<usize>,
    pub ca_resolutions: BTreeSet<usize>,
    /// Resolution whose CA layers feed the alignment constraint.
    pub semantic_resolution: usize,
    /// Number of CA layers at `semantic_resolution` (`L`).
    pub semantic_layers: usize,
    /// Largest timestep the backend accepts.
    pub timesteps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Sap,
    RegionSap,
    Caa,
}

/// Parameterizes one constraint for a gradient query.
#[derive(Debug, Clone)]
pub struct ConstraintDescriptor {
    pub kind: ConstraintKind,
    pub reference_sa: Option<Vec<AttentionMap>>,
    pub mask: Option<BinaryMask>,
    /// Target tokens; each entry lists the sub-token columns of one word.
    pub token_indices: Option<Vec<Vec<usize>>>,
    /// `None` means every SA resolution present in the reference.
    pub sa_resolutions: Option<BTreeSet<usize>>,
}

impl ConstraintDescriptor {
    pub fn sap(reference_sa: Vec<AttentionMap>, sa_resolutions: Option<BTreeSet<usize>>) -> Self {
        Self {
            kind: ConstraintKind::Sap,
            reference_sa: Some(reference_sa),
            mask: None,
            token_indices: None,
            sa_resolutions,
        }
    }

    pub fn region_sap(
        reference_sa: Vec<AttentionMap>,
        mask: BinaryMask,
        sa_resolutions: Option<BTreeSet<usize>>,
    ) -> Self {
        Self {
            kind: ConstraintKind::RegionSap,
            reference_sa: Some(reference_sa),
            mask: Some(mask),
            token_indices: None,
            sa_resolutions,
        }
    }

    pub fn caa(token_indices: Vec<Vec<usize>>, mask: BinaryMask) -> Self {
        Self {
            kind: ConstraintKind::Caa,
            reference_sa: None,
            mask: Some(mask),
            token_indices: Some(token_indices),
            sa_resolutions: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ConstraintKind::Sap | ConstraintKind::RegionSap => {
                if self.reference_sa.is_none() {
                    return Err(Error::Validation(format!(
                        "{:?} constraint needs reference SA maps",
                        self.kind
                    )));
                }
                if self.kind == ConstraintKind::RegionSap && self.mask.is_none() {
                    return Err(Error::Validation("region SAP constraint needs a mask".into()));
                }
            }
            ConstraintKind::Caa => {
                match &self.token_indices {
                    Some(t) if !t.is_empty() && t.iter().all(|g| !g.is_empty()) => {}
                    _ => {
                        return Err(Error::Validation(
                            "CAA constraint needs non-empty token indices".into(),
                        ))
                    }
                }
                if self.mask.is_none() {
                    return Err(Error::Validation("CAA constraint needs a mask".into()));
                }
            }
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to the latent.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Array3<f64>,
}

pub trait DiffusionBackend: Send + Sync {
    fn id(&self) -> String;

    fn info(&self) -> &BackendInfo;

    fn encode_prompt(&self, text: &str) -> Result<PromptEncoding>;

    /// The empty-prompt encoding used by the unconditional CFG pass.
    fn encode_unconditional(&self) -> Result<PromptEncoding>;

    /// Sub-token strings for a single word, as they appear in encodings.
    fn tokenize_word(&self, word: &str) -> Vec<String>;

    /// Noise prediction and the attention maps requested by `capture`.
    ///
    /// Maps are captured only when `prompt.pass == capture.capture_pass`;
    /// otherwise the returned bundle is empty and tagged with the pass that ran.
    fn predict_noise(
        &self,
        z: &LatentGrid,
        t: usize,
        prompt: &PromptEncoding,
        capture: &CaptureConfig,
    ) -> Result<(Array3<f64>, AttentionBundle)>;

    /// Constraint loss on this pass's maps and its derivative with respect to `z`.
    fn latent_gradient(
        &self,
        z: &LatentGrid,
        t: usize,
        prompt: &PromptEncoding,
        constraint: &ConstraintDescriptor,
    ) -> Result<LossGradient>;
}

/// Image/latent conversion, required of adapters for pretrained models.
pub trait LatentCodec {
    fn encode_image(&self, rgb: &Array3<f64>) -> Result<LatentGrid>;
    fn decode_latent(&self, z: &LatentGrid) -> Result<Array3<f64>>;
}

/// Wraps a backend and forces its noise prediction to zero, keeping the
/// attention maps and gradient queries of the inner backend.
#[derive(Debug, Clone)]
pub struct ZeroNoise<B>(pub B);

impl<B: DiffusionBackend> DiffusionBackend for ZeroNoise<B> {
    fn id(&self) -> String {
        format!("{}+zero-noise", self.0.id())
    }

    fn info(&self) -> &BackendInfo {
        self.0.info()
    }

    fn encode_prompt(&self, text: &str) -> Result<PromptEncoding> {
        self.0.encode_prompt(text)
    }

    fn encode_unconditional(&self) -> Result<PromptEncoding> {
        self.0.encode_unconditional()
    }

    fn tokenize_word(&self, word: &str) -> Vec<String> {
        self.0.tokenize_word(word)
    }

    fn predict_noise(
        &self,
        z: &LatentGrid,
        t: usize,
        prompt: &PromptEncoding,
        capture: &CaptureConfig,
    ) -> Result<(Array3<f64>, AttentionBundle)> {
        let (eps, bundle) = self.0.predict_noise(z, t, prompt, capture)?;
        Ok((Array3::zeros(eps.dim()), bundle))
    }

    fn latent_gradient(
        &self,
        z: &LatentGrid,
        t: usize,
        prompt: &PromptEncoding,
        constraint: &ConstraintDescriptor,
    ) -> Result<LossGradient> {
        self.0.latent_gradient(z, t, prompt, constraint)
    }
}

/// Attention map: row-softmax of `QKᵀ/√d`, and output `map · V`.
pub fn compute_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    d: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if d == 0 || q.ncols() != d || k.ncols() != d {
        return Err(Error::Shape(format!(
            "attention dim {d} vs Q {:?} and K {:?}",
            q.dim(),
            k.dim()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "K has {} rows but V has {}",
            k.nrows(),
            v.nrows()
        )));
    }
    let map = softmax_rows(q.dot(&k.t()) / (d as f64).sqrt());
    let output = map.dot(v);
    Ok((output, map))
}

pub(crate) fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    logits
}
