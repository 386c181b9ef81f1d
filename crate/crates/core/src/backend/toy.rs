use std::collections::{BTreeSet, HashMap};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    compute_attention, AttentionBundle, AttentionMap, BackendInfo, CaptureConfig, ConstraintDescriptor,
    ConstraintKind, DiffusionBackend, LatentGrid, LossGradient, Pass, PromptEncoding,
};
use crate::constraints;
use crate::error::{Error, Result};
use crate::mask::{mask_outer, SaMaskOuter};

const START_TOKEN: &str = "<start>";
const MAX_TOKENS: usize = 77;
const SA_CONTENT_GAIN: f64 = 0.5;
const CA_CONTENT_GAIN: f64 = 2.0;
const POSITION_GAIN: f64 = 0.7;
const TOKEN_POSITION_GAIN: f64 = 0.3;
const SKIP_GAIN: f64 = 0.5;
const CROSS_READOUT_GAIN: f64 = 0.003;

fn default_seed() -> u64 {
    0
}
fn default_channels() -> usize {
    4
}
fn default_spatial() -> usize {
    16
}
fn default_sa() -> Vec<usize> {
    vec![16, 8, 4]
}
fn default_ca() -> Vec<usize> {
    vec![16, 8]
}
fn default_layers() -> usize {
    5
}
fn default_embed() -> usize {
    16
}
fn default_head() -> usize {
    8
}
fn default_timesteps() -> usize {
    50
}
fn default_semantic() -> usize {
    16
}

/// Toy backend configuration; readable from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_spatial")]
    pub spatial: usize,
    #[serde(default = "default_sa")]
    pub sa_resolutions: Vec<usize>,
    #[serde(default = "default_ca")]
    pub ca_resolutions: Vec<usize>,
    /// CA layer count at `semantic_resolution`.
    #[serde(default = "default_layers", rename = "L", alias = "layers")]
    pub layers: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_head")]
    pub head_dim: usize,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_semantic")]
    pub semantic_resolution: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            channels: default_channels(),
            spatial: default_spatial(),
            sa_resolutions: default_sa(),
            ca_resolutions: default_ca(),
            layers: default_layers(),
            embed_dim: default_embed(),
            head_dim: default_head(),
            timesteps: default_timesteps(),
            semantic_resolution: default_semantic(),
        }
    }
}

impl ToyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("toy config serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.spatial == 0 || self.embed_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("L must be at least 1".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        for &r in self.sa_resolutions.iter().chain(&self.ca_resolutions) {
            if r == 0 || self.spatial % r != 0 {
                return Err(Error::Config(format!(
                    "spatial size {} is not divisible by resolution {r}",
                    self.spatial
                )));
            }
        }
        if !self.ca_resolutions.contains(&self.semantic_resolution) {
            return Err(Error::Config(format!(
                "semantic resolution {} is not among the CA resolutions {:?}",
                self.semantic_resolution, self.ca_resolutions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    SelfAttn,
    CrossAttn,
}

#[derive(Debug, Clone)]
struct Layer {
    id: usize,
    kind: LayerKind,
    resolution: usize,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    pos_q: Array2<f64>,
    pos_k: Option<Array2<f64>>,
}

struct LayerPass {
    q: Array2<f64>,
    k: Array2<f64>,
    map: Array2<f64>,
    output: Array2<f64>,
}

/// Small analytic denoiser.
///
/// For each attention layer the latent is average-pooled to the layer's
/// resolution and linearly projected (plus a fixed positional term) to
/// queries. SA layers project keys and values from the same features; CA
/// layers project them from the prompt embeddings. The noise prediction is a
/// fixed linear readout of all layer outputs, upsampled to full size, plus a
/// skip term. All weights are drawn from `ChaCha8` seeded with `config.seed`.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    info: BackendInfo,
    layers: Vec<Layer>,
    token_positions: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

pub(crate) fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, d, e) = (config.channels, config.head_dim, config.embed_dim);

        let sa: BTreeSet<usize> = config.sa_resolutions.iter().copied().collect();
        let ca: BTreeSet<usize> = config.ca_resolutions.iter().copied().collect();
        let all: BTreeSet<usize> = sa.union(&ca).copied().collect();

        let mut layers = Vec::new();
        for &r in all.iter().rev() {
            let cells = r * r;
            if sa.contains(&r) {
                layers.push(Layer {
                    id: layers.len(),
                    kind: LayerKind::SelfAttn,
                    resolution: r,
                    wq: normal_matrix(&mut rng, c, d, SA_CONTENT_GAIN / (c as f64).sqrt()),
                    wk: normal_matrix(&mut rng, c, d, SA_CONTENT_GAIN / (c as f64).sqrt()),
                    wv: normal_matrix(&mut rng, c, d, 1.0 / (c as f64).sqrt()),
                    wo: normal_matrix(&mut rng, d, c, 1.0 / (d as f64).sqrt()),
                    pos_q: normal_matrix(&mut rng, cells, d, POSITION_GAIN),
                    pos_k: Some(normal_matrix(&mut rng, cells, d, POSITION_GAIN)),
                });
            }
            if ca.contains(&r) {
                let count = if r == config.semantic_resolution {
                    config.layers
                } else {
                    1
                };
                for _ in 0..count {
                    layers.push(Layer {
                        id: layers.len(),
                        kind: LayerKind::CrossAttn,
                        resolution: r,
                        wq: normal_matrix(&mut rng, c, d, CA_CONTENT_GAIN / (c as f64).sqrt()),
                        wk: normal_matrix(&mut rng, e, d, 1.0 / (e as f64).sqrt()),
                        wv: normal_matrix(&mut rng, e, d, 1.0 / (e as f64).sqrt()),
                        wo: normal_matrix(&mut rng, d, c, 1.0 / (d as f64).sqrt()),
                        pos_q: normal_matrix(&mut rng, cells, d, POSITION_GAIN),
                        pos_k: None,
                    });
                }
            }
        }
        let token_positions = normal_matrix(&mut rng, MAX_TOKENS, e, TOKEN_POSITION_GAIN);
        let info = BackendInfo {
            channels: c,
            spatial: config.spatial,
            sa_resolutions: sa,
            ca_resolutions: ca,
            semantic_resolution: config.semantic_resolution,
            semantic_layers: config.layers,
            timesteps: config.timesteps,
        };
        Ok(Self {
            config,
            info,
            layers,
            token_positions,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn word_embedding(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ fnv1a(token));
        Array1::from_shape_simple_fn(self.config.embed_dim, || StandardNormal.sample(&mut rng))
    }

    fn encode_tokens(&self, tokens: Vec<String>, pass: Pass) -> Result<PromptEncoding> {
        if tokens.len() > MAX_TOKENS {
            return Err(Error::Validation(format!(
                "prompt has {} tokens, limit is {MAX_TOKENS}",
                tokens.len()
            )));
        }
        let mut emb = Array2::zeros((tokens.len(), self.config.embed_dim));
        for (i, tok) in tokens.iter().enumerate() {
            let row = self.word_embedding(tok) + self.token_positions.row(i);
            emb.row_mut(i).assign(&row);
        }
        PromptEncoding::new(emb, tokens, pass)
    }

    fn check_inputs(&self, z: &LatentGrid, t: usize) -> Result<()> {
        if t > self.info.timesteps {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {}]",
                self.info.timesteps
            )));
        }
        let s = self.info.spatial;
        if z.shape() != (self.info.channels, s, s) {
            return Err(Error::Shape(format!(
                "latent shape {:?}, backend expects {:?}",
                z.shape(),
                (self.info.channels, s, s)
            )));
        }
        z.check_finite()
    }

    /// Average pool to `r x r`, rescaled by the pool factor so white noise
    /// keeps unit variance. Rows are cells in row-major order.
    fn pool(&self, z: &Array3<f64>, r: usize) -> Array2<f64> {
        let f = self.info.spatial / r;
        let c = self.info.channels;
        let mut x = Array2::zeros((r * r, c));
        for ch in 0..c {
            for y in 0..self.info.spatial {
                for xx in 0..self.info.spatial {
                    x[[(y / f) * r + xx / f, ch]] += z[[ch, y, xx]];
                }
            }
        }
        x / f as f64
    }

    fn unpool_into(&self, dx: &Array2<f64>, r: usize, dz: &mut Array3<f64>) {
        let f = self.info.spatial / r;
        let inv = 1.0 / f as f64;
        for ch in 0..self.info.channels {
            for y in 0..self.info.spatial {
                for xx in 0..self.info.spatial {
                    dz[[ch, y, xx]] += dx[[(y / f) * r + xx / f, ch]] * inv;
                }
            }
        }
    }

    fn forward_layer(&self, layer: &Layer, x: &Array2<f64>, prompt: &PromptEncoding) -> Result<LayerPass> {
        let q = x.dot(&layer.wq) + &layer.pos_q;
        let (k, v) = match layer.kind {
            LayerKind::SelfAttn => (
                x.dot(&layer.wk) + layer.pos_k.as_ref().expect("SA layer has key positions"),
                x.dot(&layer.wv),
            ),
            LayerKind::CrossAttn => {
                if prompt.token_embeddings.ncols() != self.config.embed_dim {
                    return Err(Error::Shape(format!(
                        "prompt embedding dim {} vs backend {}",
                        prompt.token_embeddings.ncols(),
                        self.config.embed_dim
                    )));
                }
                (
                    prompt.token_embeddings.dot(&layer.wk),
                    prompt.token_embeddings.dot(&layer.wv),
                )
            }
        };
        let (output, map) = compute_attention(&q, &k, &v, self.config.head_dim)?;
        Ok(LayerPass { q, k, map, output })
    }

    /// dL/dX for one layer given dL/dA.
    fn backward_layer(&self, layer: &Layer, pass: &LayerPass, d_map: &Array2<f64>) -> Array2<f64> {
        let row_dot = (&pass.map * d_map).sum_axis(Axis(1));
        let mut d_logits = d_map - &row_dot.insert_axis(Axis(1));
        d_logits *= &pass.map;
        d_logits /= (self.config.head_dim as f64).sqrt();
        let d_q = d_logits.dot(&pass.k);
        let mut d_x = d_q.dot(&layer.wq.t());
        if layer.kind == LayerKind::SelfAttn {
            let d_k = d_logits.t().dot(&pass.q);
            d_x += &d_k.dot(&layer.wk.t());
        }
        d_x
    }

    fn time_gain(&self, t: usize) -> f64 {
        1.0 + 0.3 * (std::f64::consts::PI * t as f64 / self.info.timesteps as f64).cos()
    }

    fn sa_gradient(
        &self,
        z: &LatentGrid,
        prompt: &PromptEncoding,
        constraint: &ConstraintDescriptor,
    ) -> Result<LossGradient> {
        let reference = constraint.reference_sa.as_ref().expect("validated");
        let wanted = |l: &Layer| match &constraint.sa_resolutions {
            Some(set) => set.contains(&l.resolution),
            None => reference.iter().any(|m| m.layer_id == l.id),
        };
        let selected: Vec<&Layer> = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::SelfAttn && wanted(l))
            .collect();

        let mut src = Vec::with_capacity(selected.len());
        for l in &selected {
            let m = reference.iter().find(|m| m.layer_id == l.id).ok_or_else(|| {
                Error::Validation(format!("reference SA maps lack layer {}", l.id))
            })?;
            src.push(m.clone());
        }

        let mut dz = Array3::zeros(z.values.dim());
        let region_mask = match constraint.kind {
            ConstraintKind::RegionSap => {
                let mask = constraint.mask.as_ref().expect("validated");
                if mask.is_empty() {
                    return Ok(LossGradient { loss: 0.0, gradient: dz });
                }
                let mut outers: Vec<SaMaskOuter> = Vec::new();
                for r in selected.iter().map(|l| l.resolution).collect::<BTreeSet<_>>() {
                    outers.push(mask_outer(&mask.resample(r, r)?.flatten()?));
                }
                Some(outers)
            }
            _ => None,
        };

        let mut pooled: HashMap<usize, Array2<f64>> = HashMap::new();
        let mut passes = Vec::with_capacity(selected.len());
        let mut tgt = Vec::with_capacity(selected.len());
        for l in &selected {
            let x = pooled
                .entry(l.resolution)
                .or_insert_with(|| self.pool(&z.values, l.resolution));
            let p = self.forward_layer(l, x, prompt)?;
            tgt.push(AttentionMap {
                layer_id: l.id,
                resolution: l.resolution,
                map: p.map.clone(),
            });
            passes.push(p);
        }

        let loss = match &region_mask {
            Some(m) => constraints::region_sa_preservation(&src, &tgt, m)?,
            None => constraints::sa_preservation(&src, &tgt)?,
        };
        let d_maps = constraints::sa_preservation_grad(&src, &tgt, region_mask.as_deref())?;
        for ((l, p), d_map) in selected.iter().zip(&passes).zip(&d_maps) {
            let dx = self.backward_layer(l, p, d_map);
            self.unpool_into(&dx, l.resolution, &mut dz);
        }
        Ok(LossGradient { loss, gradient: dz })
    }

    fn ca_gradient(
        &self,
        z: &LatentGrid,
        prompt: &PromptEncoding,
        constraint: &ConstraintDescriptor,
    ) -> Result<LossGradient> {
        let groups = constraint.token_indices.as_ref().expect("validated");
        let r = self.info.semantic_resolution;
        let mask = constraint
            .mask
            .as_ref()
            .expect("validated")
            .resample(r, r)?
            .flatten()?;
        let x = self.pool(&z.values, r);
        let selected: Vec<&Layer> = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::CrossAttn && l.resolution == r)
            .collect();
        let passes = selected
            .iter()
            .map(|l| self.forward_layer(l, &x, prompt))
            .collect::<Result<Vec<_>>>()?;
        let maps: Vec<Array2<f64>> = passes.iter().map(|p| p.map.clone()).collect();
        let (loss, d_maps) = constraints::ca_alignment_grad(&maps, groups, &mask)?;

        let mut dx = Array2::zeros(x.dim());
        for ((l, p), d_map) in selected.iter().zip(&passes).zip(&d_maps) {
            dx += &self.backward_layer(l, p, d_map);
        }
        let mut dz = Array3::zeros(z.values.dim());
        self.unpool_into(&dx, r, &mut dz);
        Ok(LossGradient { loss, gradient: dz })
    }
}

impl DiffusionBackend for ToyBackend {
    fn id(&self) -> String {
        format!("toy:seed={}", self.config.seed)
    }

    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn encode_prompt(&self, text: &str) -> Result<PromptEncoding> {
        let mut tokens = vec![START_TOKEN.to_string()];
        tokens.extend(text.split_whitespace().flat_map(|w| self.tokenize_word(w)));
        self.encode_tokens(tokens, Pass::Conditional)
    }

    fn encode_unconditional(&self) -> Result<PromptEncoding> {
        self.encode_tokens(vec![START_TOKEN.to_string()], Pass::Unconditional)
    }

    fn tokenize_word(&self, word: &str) -> Vec<String> {
        let w: String = word
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        if w.is_empty() {
            Vec::new()
        } else {
            vec![w]
        }
    }

    fn predict_noise(
        &self,
        z: &LatentGrid,
        t: usize,
        prompt: &PromptEncoding,
        capture: &CaptureConfig,
    ) -> Result<(Array3<f64>, AttentionBundle)> {
        self.check_inputs(z, t)?;
        capture.validate(&self.info)?;
        let capturing = prompt.pass == capture.capture_pass;
        let mut bundle = AttentionBundle::empty(prompt.pass);

        let s = self.info.spatial;
        let c = self.info.channels;
        let mut readout = Array3::<f64>::zeros((c, s, s));
        let mut pooled: HashMap<usize, Array2<f64>> = HashMap::new();
        for layer in &self.layers {
            let x = pooled
                .entry(layer.resolution)
                .or_insert_with(|| self.pool(&z.values, layer.resolution));
            let pass = self.forward_layer(layer, x, prompt)?;

            let mut out = pass.output.dot(&layer.wo);
            if layer.kind == LayerKind::CrossAttn {
                out *= CROSS_READOUT_GAIN;
            }
            let f = s / layer.resolution;
            for ch in 0..c {
                for y in 0..s {
                    for xx in 0..s {
                        readout[[ch, y, xx]] += out[[(y / f) * layer.resolution + xx / f, ch]];
                    }
                }
            }

            if capturing {
                let wanted = match layer.kind {
                    LayerKind::SelfAttn => capture.sa_resolutions.contains(&layer.resolution),
                    LayerKind::CrossAttn => capture.ca_resolutions.contains(&layer.resolution),
                };
                if wanted {
                    let m = AttentionMap {
                        layer_id: layer.id,
                        resolution: layer.resolution,
                        map: pass.map,
                    };
                    match layer.kind {
                        LayerKind::SelfAttn => bundle.sa_layers.push(m),
                        LayerKind::CrossAttn => bundle.ca_layers.push(m),
                    }
                }
            }
        }
        let gain = self.time_gain(t) / (self.layers.len() as f64).sqrt();
        let eps = readout * gain + &(&z.values * SKIP_GAIN);
        Ok((eps, bundle))
    }

    fn latent_gradient(
        &self,
        z: &LatentGrid,
        t: usize,
        prompt: &PromptEncoding,
        constraint: &ConstraintDescriptor,
    ) -> Result<LossGradient> {
        constraint.validate()?;
        self.check_inputs(z, t)?;
        match constraint.kind {
            ConstraintKind::Sap | ConstraintKind::RegionSap => self.sa_gradient(z, prompt, constraint),
            ConstraintKind::Caa => self.ca_gradient(z, prompt, constraint),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;

    fn random_latent(seed: u64, cfg: &ToyConfig) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array3::from_shape_simple_fn((cfg.channels, cfg.spatial, cfg.spatial), || {
            StandardNormal.sample(&mut rng)
        });
        LatentGrid::new(v, 10).unwrap()
    }

    #[test]
    fn rejects_non_divisible_resolution() {
        let cfg = ToyConfig {
            spatial: 12,
            ..ToyConfig::default()
        };
        assert!(matches!(ToyBackend::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn declares_semantic_layer_count() {
        let b = ToyBackend::new(ToyConfig::default()).unwrap();
        let z = random_latent(1, b.config());
        let p = b.encode_prompt("a red car").unwrap();
        let (_, bundle) = b.predict_noise(&z, 5, &p, &CaptureConfig::all(b.info())).unwrap();
        assert_eq!(bundle.ca_at(16).count(), 5);
        let ids: BTreeSet<usize> = bundle.ca_at(16).map(|m| m.layer_id).collect();
        assert_eq!(ids.len(), 5);
        bundle.check_normalized(1e-5).unwrap();
    }

    #[test]
    fn timestep_out_of_range() {
        let b = ToyBackend::new(ToyConfig::default()).unwrap();
        let z = random_latent(1, b.config());
        let p = b.encode_prompt("x").unwrap();
        assert!(matches!(
            b.predict_noise(&z, 51, &p, &CaptureConfig::none()),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn unconditional_pass_is_not_captured_as_conditional() {
        let b = ToyBackend::new(ToyConfig::default()).unwrap();
        let z = random_latent(1, b.config());
        let u = b.encode_unconditional().unwrap();
        let (_, bundle) = b.predict_noise(&z, 5, &u, &CaptureConfig::all(b.info())).unwrap();
        assert_eq!(bundle.source_pass, Pass::Unconditional);
        assert!(bundle.sa_layers.is_empty() && bundle.ca_layers.is_empty());
    }

    #[test]
    fn tokenizer_normalizes_words() {
        let b = ToyBackend::new(ToyConfig::default()).unwrap();
        let p = b.encode_prompt("A Red, car!").unwrap();
        assert_eq!(p.token_strings, vec!["<start>", "a", "red", "car"]);
        assert_eq!(p.token_count(), 4);
    }

    #[test]
    fn region_gradient_with_empty_mask_is_zero() {
        let b = ToyBackend::new(ToyConfig::default()).unwrap();
        let z = random_latent(3, b.config());
        let p = b.encode_prompt("a cat").unwrap();
        let (_, bundle) = b.predict_noise(&random_latent(4, b.config()), 5, &p, &CaptureConfig::all(b.info())).unwrap();
        let c = ConstraintDescriptor::region_sap(bundle.sa_layers, BinaryMask::zeros(16, 16), None);
        let g = b.latent_gradient(&z, 5, &p, &c).unwrap();
        assert!(g.gradient.iter().all(|&v| v == 0.0));
        assert_eq!(g.loss, 0.0);
    }
}
