use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{BenchItem, ImageData};
use crate::backend::toy::fnv1a;
use crate::error::{Error, Result};
use crate::pipeline::EditType;

/// Structural distance between two images (0 for identical inputs).
pub trait StructureProvider: Send + Sync {
    fn id(&self) -> &str;
    fn distance(&self, source: &ImageData, edited: &ImageData) -> Result<f64>;
}

/// Agreement between an image and an item's target text.
pub trait AlignmentProvider: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, image: &ImageData, item: &BenchItem) -> Result<f64>;
}

fn pixel_vectors(img: &ImageData) -> Array2<f64> {
    let (c, h, w) = img.latent.dim();
    img.latent
        .to_shape((c, h * w))
        .expect("contiguous reshape")
        .t()
        .to_owned()
}

fn cosine_matrix(v: &Array2<f64>) -> Array2<f64> {
    let norms: Array1<f64> = v.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut s = v.dot(&v.t());
    for ((i, j), x) in s.indexed_iter_mut() {
        let d = norms[i] * norms[j];
        *x = if d > 0.0 { *x / d } else { 0.0 };
    }
    s
}

/// Mean squared difference of per-pixel cosine self-similarity matrices.
#[derive(Debug, Default)]
pub struct SelfSimilarityStub;

impl StructureProvider for SelfSimilarityStub {
    fn id(&self) -> &str {
        "stub-selfsim"
    }

    fn distance(&self, source: &ImageData, edited: &ImageData) -> Result<f64> {
        if source.latent.dim() != edited.latent.dim() {
            return Err(Error::Shape(format!(
                "images differ: {:?} vs {:?}",
                source.latent.dim(),
                edited.latent.dim()
            )));
        }
        let a = cosine_matrix(&pixel_vectors(source));
        let b = cosine_matrix(&pixel_vectors(edited));
        Ok((&a - &b).mapv(|d| d * d).mean().unwrap_or(0.0))
    }
}

fn normalize_word(w: &str) -> String {
    w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase()
}

/// Fraction of target tokens found among the caption's words; 0 without a caption.
#[derive(Debug, Default)]
pub struct CaptionStub;

impl AlignmentProvider for CaptionStub {
    fn id(&self) -> &str {
        "stub-caption"
    }

    fn score(&self, image: &ImageData, item: &BenchItem) -> Result<f64> {
        let (Some(caption), false) = (&image.caption, item.target_tokens.is_empty()) else {
            return Ok(0.0);
        };
        let words: Vec<String> = caption.split_whitespace().map(normalize_word).collect();
        let hits = item
            .target_tokens
            .iter()
            .filter(|t| words.contains(&normalize_word(t)))
            .count();
        Ok(hits as f64 / item.target_tokens.len() as f64)
    }
}

/// `100 · max(0, cos)` between the image's mean pixel vector and a fixed
/// pseudo-random direction per target token, averaged over tokens.
#[derive(Debug, Default)]
pub struct EmbeddingStub;

impl AlignmentProvider for EmbeddingStub {
    fn id(&self) -> &str {
        "stub-embed"
    }

    fn score(&self, image: &ImageData, item: &BenchItem) -> Result<f64> {
        if item.target_tokens.is_empty() {
            return Ok(0.0);
        }
        let pixels = pixel_vectors(image);
        let mean = pixels.mean_axis(Axis(0)).expect("non-empty image");
        let mn = mean.dot(&mean).sqrt();
        let mut total = 0.0;
        for tok in &item.target_tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&normalize_word(tok)));
            let dir: Array1<f64> = Array1::from_shape_simple_fn(mean.len(), || StandardNormal.sample(&mut rng));
            let dn: f64 = dir.dot(&dir).sqrt();
            let cos = if mn > 0.0 && dn > 0.0 { mean.dot(&dir) / (mn * dn) } else { 0.0 };
            total += 100.0 * cos.max(0.0);
        }
        Ok(total / item.target_tokens.len() as f64)
    }
}

#[derive(Clone, Default)]
pub struct ProviderRegistry {
    structure: HashMap<String, Arc<dyn StructureProvider>>,
    alignment: HashMap<String, Arc<dyn AlignmentProvider>>,
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_stubs() -> Self {
        let mut r = Self::empty();
        r.register_structure(Arc::new(SelfSimilarityStub));
        r.register_alignment(Arc::new(CaptionStub));
        r.register_alignment(Arc::new(EmbeddingStub));
        r
    }

    pub fn register_structure(&mut self, p: Arc<dyn StructureProvider>) {
        self.structure.insert(p.id().to_string(), p);
    }

    pub fn register_alignment(&mut self, p: Arc<dyn AlignmentProvider>) {
        self.alignment.insert(p.id().to_string(), p);
    }

    pub fn structure(&self, id: &str) -> Result<Arc<dyn StructureProvider>> {
        self.structure
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("structure provider {id:?} is not registered")))
    }

    pub fn alignment(&self, id: &str) -> Result<Arc<dyn AlignmentProvider>> {
        self.alignment
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("alignment provider {id:?} is not registered")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub dino_similarity: f64,
    pub clip_score: f64,
    pub provider_ids: Vec<String>,
}

/// Structure distance on the full images; alignment on the edited image,
/// cropped to the item's bbox when one is given.
pub fn evaluate(
    source: &ImageData,
    edited: &ImageData,
    item: &BenchItem,
    structure: &dyn StructureProvider,
    alignment: &dyn AlignmentProvider,
) -> Result<MetricRecord> {
    if source.latent.dim() != edited.latent.dim() {
        return Err(Error::Shape(format!(
            "source {:?} and edited {:?} differ",
            source.latent.dim(),
            edited.latent.dim()
        )));
    }
    let dino = structure.distance(source, edited)?;
    let scored = match item.bbox {
        Some(b) => edited.crop(b)?,
        None => edited.clone(),
    };
    let clip = alignment.score(&scored, item)?;
    if !dino.is_finite() || !clip.is_finite() || dino < 0.0 {
        return Err(Error::Validation(format!(
            "item {:?}: metrics not finite or negative ({dino}, {clip})",
            item.id
        )));
    }
    Ok(MetricRecord {
        id: item.id.clone(),
        dino_similarity: dino,
        clip_score: clip,
        provider_ids: vec![structure.id().to_string(), alignment.id().to_string()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub count: usize,
    pub mean_dino_similarity: f64,
    pub mean_clip_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub method_tag: String,
    pub edit_type: EditType,
    pub clip: f64,
    pub dino: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_type: BTreeMap<EditType, TypeSummary>,
    pub scatter: Vec<ScatterRow>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Per-edit-type means plus one scatter row per type. Records are sorted by
/// id first, so the result does not depend on their order.
pub fn aggregate(records: &[MetricRecord], manifest: &[BenchItem], method_tag: &str) -> Result<Summary> {
    let types: HashMap<&str, EditType> = manifest.iter().map(|i| (i.id.as_str(), i.edit_type)).collect();
    let mut sorted: Vec<&MetricRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut buckets: BTreeMap<EditType, Vec<&MetricRecord>> = BTreeMap::new();
    for r in sorted {
        let t = types
            .get(r.id.as_str())
            .ok_or_else(|| Error::Join(format!("record {:?} has no manifest item", r.id)))?;
        buckets.entry(*t).or_default().push(r);
    }
    let mut per_type = BTreeMap::new();
    let mut scatter = Vec::new();
    for (t, rs) in buckets {
        let n = rs.len() as f64;
        let dino = rs.iter().map(|r| r.dino_similarity).sum::<f64>() / n;
        let clip = rs.iter().map(|r| r.clip_score).sum::<f64>() / n;
        per_type.insert(
            t,
            TypeSummary {
                count: rs.len(),
                mean_dino_similarity: dino,
                mean_clip_score: clip,
            },
        );
        scatter.push(ScatterRow {
            method_tag: method_tag.to_string(),
            edit_type: t,
            clip,
            dino,
        });
    }
    Ok(Summary { per_type, scatter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn item(id: &str, t: EditType, tokens: &[&str]) -> BenchItem {
        BenchItem {
            id: id.into(),
            image_path: format!("{id}.uear"),
            mask_path: Some(format!("{id}.png")),
            source_prompt: "a cat".into(),
            target_prompt: "a cat".into(),
            target_tokens: tokens.iter().map(|s| s.to_string()).collect(),
            edit_type: t,
            bbox: None,
        }
    }

    fn image(seed: u64) -> ImageData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageData::new(Array3::from_shape_simple_fn((4, 6, 6), || StandardNormal.sample(&mut rng)))
    }

    fn record(id: &str, dino: f64, clip: f64) -> MetricRecord {
        MetricRecord {
            id: id.into(),
            dino_similarity: dino,
            clip_score: clip,
            provider_ids: vec![],
        }
    }

    #[test]
    fn self_distance_is_zero() {
        let img = image(1);
        let r = evaluate(&img, &img, &item("a", EditType::Color, &["red"]), &SelfSimilarityStub, &EmbeddingStub).unwrap();
        assert_eq!(r.dino_similarity, 0.0);
        assert_eq!(r.provider_ids, vec!["stub-selfsim", "stub-embed"]);
    }

    #[test]
    fn full_bbox_matches_no_bbox() {
        let (a, b) = (image(1), image(2));
        let mut it = item("a", EditType::Color, &["red"]);
        let plain = evaluate(&a, &b, &it, &SelfSimilarityStub, &EmbeddingStub).unwrap();
        it.bbox = Some([0, 0, 6, 6]);
        assert_eq!(evaluate(&a, &b, &it, &SelfSimilarityStub, &EmbeddingStub).unwrap(), plain);
    }

    #[test]
    fn caption_stub_fraction() {
        let mut img = image(1);
        img.caption = Some("A blue car, parked.".into());
        let it = item("a", EditType::Color, &["blue", "truck"]);
        assert_eq!(CaptionStub.score(&img, &it).unwrap(), 0.5);
    }

    #[test]
    fn missing_provider_is_named() {
        let reg = ProviderRegistry::with_stubs();
        match reg.structure("dino-vitb8") {
            Err(Error::Config(m)) => assert!(m.contains("dino-vitb8")),
            _ => panic!("expected a configuration error"),
        }
    }

    #[test]
    fn aggregate_means_and_buckets() {
        let items = vec![item("a", EditType::Color, &[]), item("b", EditType::Color, &[]), item("c", EditType::Face, &[])];
        let s = aggregate(&[record("a", 0.2, 20.0), record("b", 0.4, 22.0)], &items, "ours").unwrap();
        let c = &s.per_type[&EditType::Color];
        assert!((c.mean_dino_similarity - 0.3).abs() < 1e-15);
        assert_eq!(c.mean_clip_score, 21.0);
        assert!(!s.per_type.contains_key(&EditType::Face));
        assert_eq!(s.scatter.len(), 1);
        let one = aggregate(&[record("c", 0.7, 30.0)], &items, "ours").unwrap();
        assert_eq!(one.per_type[&EditType::Face].mean_dino_similarity, 0.7);
    }

    #[test]
    fn aggregate_unknown_id() {
        assert!(matches!(aggregate(&[record("z", 0.0, 0.0)], &[], "x"), Err(Error::Join(_))));
    }
}
