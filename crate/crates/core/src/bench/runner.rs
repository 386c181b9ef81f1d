use std::path::Path;

use rayon::prelude::*;

use super::manifest::{load_mask_png, resolve, BenchItem, ImageData};
use super::metrics::{evaluate, MetricRecord, ProviderRegistry};
use crate::backend::DiffusionBackend;
use crate::error::{Error, Result};
use crate::pipeline::{run_edit, EditConfig, EditInput, EditResult, EditType};
use crate::sampler::InversionProvider;

pub struct BenchOptions<'a> {
    pub structure_provider: String,
    pub alignment_provider: String,
    /// Worker count; `None` uses rayon's default.
    pub threads: Option<usize>,
    pub configure: &'a (dyn Fn(EditType) -> EditConfig + Sync),
}

#[derive(Debug, Clone)]
pub struct ItemOutcome {
    pub record: MetricRecord,
    pub result: EditResult,
}

/// Loads one item's assets and runs the edit on its clean latent.
pub fn edit_item(
    item: &BenchItem,
    base: &Path,
    backend: &dyn DiffusionBackend,
    inversion: &dyn InversionProvider,
    config: &EditConfig,
) -> Result<(ImageData, EditResult)> {
    let source = ImageData::load(resolve(base, &item.image_path))?;
    let mask = match &item.mask_path {
        Some(m) => Some(load_mask_png(resolve(base, m))?),
        None => None,
    };
    let spec = item.spec(mask);
    let result = run_edit(EditInput::Clean(source.to_latent()?), &spec, config, backend, inversion)?;
    Ok((source, result))
}

/// Edits and scores every item, one edit session per worker. Outcomes are
/// returned sorted by item id.
pub fn run_bench(
    items: &[BenchItem],
    base: &Path,
    backend: &dyn DiffusionBackend,
    inversion: &dyn InversionProvider,
    registry: &ProviderRegistry,
    options: &BenchOptions<'_>,
) -> Result<Vec<ItemOutcome>> {
    let structure = registry.structure(&options.structure_provider)?;
    let alignment = registry.alignment(&options.alignment_provider)?;
    let work = || -> Result<Vec<ItemOutcome>> {
        items
            .par_iter()
            .map(|item| {
                let config = (options.configure)(item.edit_type);
                let (source, result) = edit_item(item, base, backend, inversion, &config)?;
                let edited = ImageData::new(result.final_latent.values.clone());
                let record = evaluate(&source, &edited, item, structure.as_ref(), alignment.as_ref())?;
                Ok(ItemOutcome { record, result })
            })
            .collect()
    };
    let mut out = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    out.sort_by(|a, b| a.record.id.cmp(&b.record.id));
    Ok(out)
}
