use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Ix3};
use serde::{Deserialize, Serialize};

use crate::array_io;
use crate::backend::LatentGrid;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::pipeline::{EditSpec, EditType};

/// Mask pixels at or above this 8-bit value are inside the edit region.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchItem {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub source_prompt: String,
    pub target_prompt: String,
    #[serde(default)]
    pub target_tokens: Vec<String>,
    pub edit_type: EditType,
    /// `(x, y, w, h)` in latent pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
}

impl BenchItem {
    fn check_schema(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.mask_path.is_none() && !self.edit_type.is_global() {
            return Err(format!("{} item {:?} has no mask_path", self.edit_type, self.id));
        }
        if let Some([_, _, w, h]) = self.bbox {
            if w == 0 || h == 0 {
                return Err(format!("item {:?} has an empty bbox", self.id));
            }
        }
        Ok(())
    }

    pub fn spec(&self, mask: Option<BinaryMask>) -> EditSpec {
        EditSpec {
            source_prompt: self.source_prompt.clone(),
            target_prompt: self.target_prompt.clone(),
            target_tokens: self.target_tokens.clone(),
            mask,
            edit_type: self.edit_type,
        }
    }
}

/// Parses and schema-checks manifest text; asset files are not touched.
pub fn parse_manifest_str(text: &str) -> Result<Vec<BenchItem>> {
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let item: BenchItem = serde_json::from_str(raw).map_err(|e| {
            let message = e.to_string();
            if e.is_data() {
                Error::Schema { line, message }
            } else {
                Error::Parse { line, message }
            }
        })?;
        item.check_schema()
            .map_err(|message| Error::Schema { line, message })?;
        if !ids.insert(item.id.clone()) {
            return Err(Error::Schema {
                line,
                message: format!("duplicate id {:?}", item.id),
            });
        }
        items.push(item);
    }
    Ok(items)
}

pub fn serialize_manifest(items: &[BenchItem]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    out
}

pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

/// Loads a manifest and checks that every referenced asset exists and that
/// bounding boxes fit the image. Relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<BenchItem>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let items = parse_manifest_str(&text)?;
    let base = manifest_dir(path);
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (item, &line) in items.iter().zip(&lines) {
        let schema = |message: String| Error::Schema { line, message };
        let image = resolve(&base, &item.image_path);
        let shape = array_io::read_shape(&image)
            .map_err(|e| schema(format!("image {}: {e}", image.display())))?;
        if shape.len() != 3 {
            return Err(schema(format!("image {} has {} axes, expected 3", image.display(), shape.len())));
        }
        if let Some(m) = &item.mask_path {
            let mp = resolve(&base, m);
            if !mp.is_file() {
                return Err(schema(format!("mask {} not found", mp.display())));
            }
        }
        if let Some([x, y, w, h]) = item.bbox {
            if x + w > shape[2] || y + h > shape[1] {
                return Err(schema(format!(
                    "bbox {:?} exceeds image size {}x{}",
                    item.bbox.unwrap(),
                    shape[2],
                    shape[1]
                )));
            }
        }
    }
    Ok(items)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other}", path.display())),
    }
}

/// Reads an 8-bit grayscale PNG mask, thresholded at [`MASK_THRESHOLD`].
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let values = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD {
            1.0
        } else {
            0.0
        }
    });
    BinaryMask::new_allow_empty(values)
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (mask.height() as u32, mask.width() as u32);
    let img = image::GrayImage::from_fn(w, h, |x, y| {
        image::Luma([if mask.values()[[y as usize, x as usize]] == 1.0 { 255 } else { 0 }])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// An image in latent form, with an optional caption read from a sidecar
/// file next to it (same stem, `.txt`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub latent: Array3<f64>,
    pub caption: Option<String>,
}

impl ImageData {
    pub fn new(latent: Array3<f64>) -> Self {
        Self { latent, caption: None }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let latent = array_io::read(path)?
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape(format!("{} is not a (C, H, W) array", path.display())))?;
        let sidecar = path.with_extension("txt");
        let caption = if sidecar.is_file() {
            Some(std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?)
        } else {
            None
        };
        Ok(Self { latent, caption })
    }

    pub fn to_latent(&self) -> Result<LatentGrid> {
        LatentGrid::new(self.latent.clone(), 0)
    }

    pub fn height(&self) -> usize {
        self.latent.dim().1
    }

    pub fn width(&self) -> usize {
        self.latent.dim().2
    }

    /// Tight crop to `(x, y, w, h)`, no padding.
    pub fn crop(&self, bbox: [usize; 4]) -> Result<Self> {
        let [x, y, w, h] = bbox;
        if w == 0 || h == 0 || x + w > self.width() || y + h > self.height() {
            return Err(Error::Range(format!(
                "bbox {bbox:?} outside image {}x{}",
                self.width(),
                self.height()
            )));
        }
        Ok(Self {
            latent: self.latent.slice(ndarray::s![.., y..y + h, x..x + w]).to_owned(),
            caption: self.caption.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STYLE: &str = r#"{"id":"a","image_path":"a.uear","source_prompt":"a cat","target_prompt":"a cat in ink","target_tokens":["ink"],"edit_type":"style"}"#;
    const COLOR_NO_MASK: &str = r#"{"id":"b","image_path":"b.uear","source_prompt":"a red car","target_prompt":"a blue car","target_tokens":["blue"],"edit_type":"color"}"#;

    #[test]
    fn empty_manifest() {
        assert!(parse_manifest_str("").unwrap().is_empty());
    }

    #[test]
    fn style_without_mask_is_accepted() {
        let items = parse_manifest_str(STYLE).unwrap();
        assert_eq!(items[0].edit_type, EditType::Style);
    }

    #[test]
    fn color_without_mask_is_a_schema_error() {
        let text = format!("{STYLE}\n{COLOR_NO_MASK}\n");
        assert!(matches!(parse_manifest_str(&text), Err(Error::Schema { line: 2, .. })));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = format!("{STYLE}\n\n{{\"id\": \n");
        assert!(matches!(parse_manifest_str(&text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn unknown_edit_type_is_a_schema_error() {
        let text = STYLE.replace("\"style\"", "\"pose\"");
        assert!(matches!(parse_manifest_str(&text), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{STYLE}\n{STYLE}\n");
        assert!(matches!(parse_manifest_str(&text), Err(Error::Schema { line: 2, .. })));
    }

    #[test]
    fn round_trip() {
        let items = parse_manifest_str(STYLE).unwrap();
        assert_eq!(parse_manifest_str(&serialize_manifest(&items)).unwrap(), items);
    }

    #[test]
    fn mask_png_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        image::GrayImage::from_fn(3, 1, |x, _| image::Luma([[127u8, 128, 255][x as usize]]))
            .save(&p)
            .unwrap();
        let m = load_mask_png(&p).unwrap();
        assert_eq!(m.values().row(0).to_vec(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn crop_full_image_is_identity() {
        let img = ImageData::new(Array3::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 12 + y * 4 + x) as f64));
        assert_eq!(img.crop([0, 0, 4, 3]).unwrap(), img);
        assert_eq!(img.crop([1, 1, 2, 2]).unwrap().latent[[1, 0, 0]], 17.0);
        assert!(img.crop([3, 0, 2, 1]).is_err());
    }
}
