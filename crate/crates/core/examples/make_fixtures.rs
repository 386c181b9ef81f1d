//! Writes the bundled benchmark fixture: latents, masks, captions and a
//! manifest with two items per edit type.
//!
//! cargo run --example make_fixtures -- crates/core/tests/fixtures/bench

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use unifyedit::array_io;
use unifyedit::bench::{serialize_manifest, write_mask_png, BenchItem};
use unifyedit::mask::BinaryMask;
use unifyedit::pipeline::EditType;

const LATENT: (usize, usize, usize) = (4, 16, 16);
const MASK_SIZE: usize = 64;

struct Case {
    id: &'static str,
    edit_type: EditType,
    source: &'static str,
    target: &'static str,
    tokens: &'static [&'static str],
    /// `(x, y, w, h)` in latent pixels; `None` for global edits.
    region: Option<[usize; 4]>,
}

const CASES: &[Case] = &[
    Case { id: "color-01", edit_type: EditType::Color, source: "a red car", target: "a blue car", tokens: &["blue"], region: Some([4, 5, 8, 6]) },
    Case { id: "color-02", edit_type: EditType::Color, source: "a white cat", target: "a black cat", tokens: &["black"], region: Some([3, 3, 9, 10]) },
    Case { id: "texture-01", edit_type: EditType::Texture, source: "a wooden table", target: "a marble table", tokens: &["marble"], region: Some([2, 8, 12, 6]) },
    Case { id: "texture-02", edit_type: EditType::Texture, source: "a leather bag", target: "a woven bag", tokens: &["woven"], region: Some([5, 4, 6, 8]) },
    Case { id: "object-01", edit_type: EditType::ObjectReplacement, source: "a dog on grass", target: "a cat on grass", tokens: &["cat"], region: Some([4, 4, 8, 8]) },
    Case { id: "object-02", edit_type: EditType::ObjectReplacement, source: "an apple on a plate", target: "an orange on a plate", tokens: &["orange"], region: Some([6, 5, 5, 5]) },
    Case { id: "background-01", edit_type: EditType::Background, source: "a bird in a forest", target: "a bird in a desert", tokens: &["desert"], region: Some([0, 0, 16, 6]) },
    Case { id: "background-02", edit_type: EditType::Background, source: "a car on a street", target: "a car on a beach", tokens: &["beach"], region: Some([0, 10, 16, 6]) },
    Case { id: "style-01", edit_type: EditType::Style, source: "a house by a lake", target: "a watercolor painting of a house by a lake", tokens: &["watercolor"], region: None },
    Case { id: "style-02", edit_type: EditType::Style, source: "a portrait of a man", target: "a sketch portrait of a man", tokens: &["sketch"], region: None },
    Case { id: "face-01", edit_type: EditType::Face, source: "a smiling woman", target: "a smiling woman with glasses", tokens: &["glasses"], region: Some([4, 5, 8, 3]) },
    Case { id: "face-02", edit_type: EditType::Face, source: "a young man", target: "an old man", tokens: &["old"], region: Some([3, 2, 10, 12]) },
];

fn main() -> unifyedit::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/tests/fixtures/bench".into())
        .into();
    std::fs::create_dir_all(&dir).expect("fixture directory");
    let mut items = Vec::new();
    for (i, case) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let z = Array3::from_shape_simple_fn(LATENT, || StandardNormal.sample(&mut rng));
        let image = format!("{}.uear", case.id);
        array_io::write(dir.join(&image), &z.into_dyn())?;
        std::fs::write(dir.join(format!("{}.txt", case.id)), case.source).expect("caption");

        let mask_path = match case.region {
            Some([x, y, w, h]) => {
                let f = MASK_SIZE / LATENT.2;
                let values = Array2::from_shape_fn((MASK_SIZE, MASK_SIZE), |(r, c)| {
                    let inside = (y * f..(y + h) * f).contains(&r) && (x * f..(x + w) * f).contains(&c);
                    if inside { 1.0 } else { 0.0 }
                });
                let name = format!("{}.mask.png", case.id);
                write_mask_png(dir.join(&name), &BinaryMask::new(values)?)?;
                Some(name)
            }
            None => None,
        };
        items.push(BenchItem {
            id: case.id.into(),
            image_path: image,
            mask_path,
            source_prompt: case.source.into(),
            target_prompt: case.target.into(),
            target_tokens: case.tokens.iter().map(|s| s.to_string()).collect(),
            edit_type: case.edit_type,
            bbox: case.region,
        });
    }
    std::fs::write(dir.join("manifest.jsonl"), serialize_manifest(&items)).expect("manifest");
    println!("wrote {} items to {}", items.len(), dir.display());
    Ok(())
}
