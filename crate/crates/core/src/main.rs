use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use unifyedit::array_io;
use unifyedit::backend::{AlphaSchedule, DiffusionBackend, ToyBackend, ToyConfig};
use unifyedit::bench::{
    aggregate, edit_item, emit_trace, load_manifest, load_trace, manifest_dir, run_bench,
    trace_long_format, BenchItem, BenchOptions, ImageData, ProviderRegistry,
};
use unifyedit::pipeline::{
    preset_for_edit_type, EditConfig, EditResult, EditType, GuidanceMode, SaSource, SapMode,
};
use unifyedit::sampler::{DdimInversion, InversionProvider};
use unifyedit::scheduler::{Form, Strategy};
use unifyedit::{Error, Result};

#[derive(Parser)]
#[command(name = "unifyedit", version, about = "Attention-constrained latent editing on diffusion backends")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Backend seed (overrides the backend config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `toy` or `adapter:<id>`.
    #[arg(long, global = true, default_value = "toy")]
    backend: String,
    /// TOML file with backend settings.
    #[arg(long, global = true)]
    backend_config: Option<PathBuf>,
    /// Start from this edit type's preset instead of the item's own.
    #[arg(long, global = true)]
    preset: Option<EditType>,
    /// TOML edit config applied before the individual overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    beta1: Option<f64>,
    #[arg(long, global = true)]
    beta2: Option<f64>,
    #[arg(long, global = true)]
    k1: Option<f64>,
    #[arg(long, global = true)]
    k2: Option<f64>,
    /// Number of denoising steps `T`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// `eq14` or `alg1`.
    #[arg(long, global = true)]
    form: Option<String>,
    #[arg(long, global = true)]
    tau1: Option<usize>,
    #[arg(long, global = true)]
    tau2: Option<usize>,
    #[arg(long, global = true)]
    max_it: Option<usize>,
    #[arg(long, global = true)]
    cfg_scale: Option<f64>,
    /// Comma-separated resolutions, or `all`.
    #[arg(long, global = true)]
    sa_resolutions: Option<String>,
    #[arg(long, global = true)]
    sap_mode: Option<SapMode>,
    #[arg(long, global = true)]
    sa_source: Option<SaSource>,
    #[arg(long, global = true)]
    guidance_mode: Option<GuidanceMode>,
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ItemArgs {
    /// Manifest to take the item from.
    #[arg(long, requires = "item")]
    manifest: Option<PathBuf>,
    /// Item id within the manifest.
    #[arg(long)]
    item: Option<String>,
    /// Clean latent file (explicit spec).
    #[arg(long, conflicts_with = "manifest")]
    image: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    source_prompt: Option<String>,
    #[arg(long)]
    target_prompt: Option<String>,
    /// Comma-separated target words.
    #[arg(long, value_delimiter = ',')]
    tokens: Vec<String>,
    #[arg(long)]
    edit_type: Option<EditType>,
}

#[derive(Subcommand)]
enum Command {
    /// Invert a clean latent and write the noise latent and trajectory.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
    },
    /// Run one edit and write the edited latent, trace and scores.
    Edit(ItemArgs),
    /// Run every combination strategy on one item.
    Ablate(ItemArgs),
    /// Edit and score every manifest item.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "stub-selfsim")]
        structure_provider: String,
        #[arg(long, default_value = "stub-embed")]
        alignment_provider: String,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "unifyedit")]
        method_tag: String,
    },
    /// Convert a trace CSV to long format.
    Trace {
        #[arg(long)]
        input: PathBuf,
    },
}

fn toy_config(g: &Global) -> Result<ToyConfig> {
    let mut cfg = match &g.backend_config {
        Some(p) => ToyConfig::from_toml(&read_text(p)?)?,
        None => ToyConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn make_backend(g: &Global) -> Result<Box<dyn DiffusionBackend>> {
    match g.backend.as_str() {
        "toy" => Ok(Box::new(ToyBackend::new(toy_config(g)?)?)),
        other => match other.strip_prefix("adapter:") {
            Some(id) => Err(Error::Config(format!(
                "adapter backend {id:?} is not available in this build"
            ))),
            None => Err(Error::Config(format!(
                "unknown backend {other:?}; expected toy or adapter:<id>"
            ))),
        },
    }
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn make_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

/// Preset (or config file), then individual overrides.
fn build_config(g: &Global, edit_type: EditType) -> Result<EditConfig> {
    let mut c = match &g.config {
        Some(p) => EditConfig::from_toml(&read_text(p)?)?,
        None => preset_for_edit_type(g.preset.unwrap_or(edit_type)),
    };
    let s = &mut c.scheduler;
    if let Some(v) = g.beta1 {
        s.beta1 = v;
    }
    if let Some(v) = g.beta2 {
        s.beta2 = v;
    }
    if let Some(v) = g.k1 {
        s.k1 = v;
    }
    if let Some(v) = g.k2 {
        s.k2 = v;
    }
    if let Some(v) = g.steps {
        s.steps = v;
    }
    if let Some(f) = &g.form {
        s.form = match f.as_str() {
            "eq14" => Form::Eq14,
            "alg1" => Form::Alg1,
            other => return Err(Error::Validation(format!("unknown scheduler form {other:?}"))),
        };
    }
    if let Some(v) = g.tau1 {
        c.tau1 = v;
    }
    if let Some(v) = g.tau2 {
        c.tau2 = v;
    }
    if let Some(v) = g.max_it {
        c.max_it = v;
    }
    if let Some(v) = g.cfg_scale {
        c.cfg_scale = v;
    }
    if let Some(r) = &g.sa_resolutions {
        c.sa_resolutions = if r == "all" {
            None
        } else {
            Some(
                r.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Validation(format!("SA resolution {v:?}: {e}")))
                    })
                    .collect::<Result<BTreeSet<usize>>>()?,
            )
        };
    }
    if let Some(v) = g.sap_mode {
        c.sap_mode = v;
    }
    if let Some(v) = g.sa_source {
        c.sa_source = v;
    }
    if let Some(v) = g.guidance_mode {
        c.guidance_mode = v;
    }
    if let Some(v) = g.strategy {
        c.strategy = v;
    }
    c.validate()?;
    Ok(c)
}

/// The item to edit and the directory its relative paths resolve against.
fn resolve_item(a: &ItemArgs) -> Result<(BenchItem, PathBuf)> {
    if let (Some(m), Some(id)) = (&a.manifest, &a.item) {
        let items = load_manifest(m)?;
        let item = items
            .into_iter()
            .find(|i| &i.id == id)
            .ok_or_else(|| Error::Validation(format!("no item {id:?} in {}", m.display())))?;
        return Ok((item, manifest_dir(m)));
    }
    let need = |v: &Option<String>, name: &str| {
        v.clone()
            .ok_or_else(|| Error::Validation(format!("--{name} is required without --manifest")))
    };
    let image = a
        .image
        .as_ref()
        .ok_or_else(|| Error::Validation("either --manifest/--item or --image is required".into()))?;
    let item = BenchItem {
        id: "cli".into(),
        image_path: image.to_string_lossy().into_owned(),
        mask_path: a.mask.as_ref().map(|p| p.to_string_lossy().into_owned()),
        source_prompt: need(&a.source_prompt, "source-prompt")?,
        target_prompt: need(&a.target_prompt, "target-prompt")?,
        target_tokens: a.tokens.clone(),
        edit_type: a
            .edit_type
            .ok_or_else(|| Error::Validation("--edit-type is required without --manifest".into()))?,
        bbox: None,
    };
    if item.mask_path.is_none() && !item.edit_type.is_global() {
        return Err(Error::Spec(format!("{} edits need --mask", item.edit_type)));
    }
    Ok((item, PathBuf::new()))
}

#[derive(Serialize)]
struct ScoresReport<'a> {
    strategy: &'a str,
    final_loss_sap: f64,
    final_mean_ratio: Option<f64>,
    initial_mean_ratio: Option<f64>,
    trace_rows: usize,
}

fn write_result(dir: &Path, result: &EditResult) -> Result<()> {
    make_dir(dir)?;
    array_io::write(dir.join("edited.uear"), &result.final_latent.values.clone().into_dyn())?;
    array_io::write(dir.join("source.uear"), &result.final_source.values.clone().into_dyn())?;
    emit_trace(&result.trace, dir.join("trace.csv"))?;
    write_text(&dir.join("config.toml"), &result.config_echo.to_toml())?;
    let report = ScoresReport {
        strategy: result.config_echo.strategy.name(),
        final_loss_sap: result.scores.loss_sap,
        final_mean_ratio: result.scores.mean_ratio,
        initial_mean_ratio: result.scores.initial_mean_ratio,
        trace_rows: result.trace.len(),
    };
    write_text(
        &dir.join("scores.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Invert { image, prompt } => {
            let backend = make_backend(g)?;
            let config = build_config(g, g.preset.unwrap_or(EditType::Color))?;
            let z0 = ImageData::load(image)?.to_latent()?;
            let schedule = AlphaSchedule::scaled_linear(config.steps())?;
            let enc = backend.encode_prompt(prompt)?;
            let traj = DdimInversion.invert(&z0, &enc, &schedule, backend.as_ref(), None)?;
            make_dir(&g.out)?;
            array_io::write(g.out.join("noise.uear"), &traj.last().values.clone().into_dyn())?;
            array_io::write(g.out.join("trajectory.uear"), &traj.stacked().into_dyn())?;
            println!("inverted to t={} -> {}", traj.steps(), g.out.display());
        }
        Command::Edit(a) => {
            let backend = make_backend(g)?;
            let (item, base) = resolve_item(a)?;
            let config = build_config(g, item.edit_type)?;
            let (_, result) = edit_item(&item, &base, backend.as_ref(), &DdimInversion, &config)?;
            write_result(&g.out, &result)?;
            println!(
                "edited {} ({} trace rows) -> {}",
                item.id,
                result.trace.len(),
                g.out.display()
            );
        }
        Command::Ablate(a) => {
            let backend = make_backend(g)?;
            let (item, base) = resolve_item(a)?;
            let base_config = build_config(g, item.edit_type)?;
            let mut rows = Vec::new();
            for s in Strategy::ALL {
                let config = EditConfig {
                    strategy: s,
                    ..base_config.clone()
                };
                let (_, result) = edit_item(&item, &base, backend.as_ref(), &DdimInversion, &config)?;
                write_result(&g.out.join(s.name()), &result)?;
                rows.push(serde_json::json!({
                    "strategy": s.name(),
                    "final_loss_sap": result.scores.loss_sap,
                    "final_mean_ratio": result.scores.mean_ratio,
                }));
                println!(
                    "{:<9} loss_sap={:.6e} mean_ratio={}",
                    s.name(),
                    result.scores.loss_sap,
                    result
                        .scores
                        .mean_ratio
                        .map_or("-".to_string(), |r| format!("{r:.6e}"))
                );
            }
            write_text(
                &g.out.join("ablation.json"),
                &serde_json::to_string_pretty(&rows).expect("rows serialize"),
            )?;
        }
        Command::Bench {
            manifest,
            structure_provider,
            alignment_provider,
            threads,
            method_tag,
        } => {
            let backend = make_backend(g)?;
            let items = load_manifest(manifest)?;
            let configs = EditType::ALL
                .into_iter()
                .map(|t| build_config(g, t).map(|c| (t, c)))
                .collect::<Result<std::collections::BTreeMap<_, _>>>()?;
            let configure = |t: EditType| configs[&t].clone();
            let options = BenchOptions {
                structure_provider: structure_provider.clone(),
                alignment_provider: alignment_provider.clone(),
                threads: *threads,
                configure: &configure,
            };
            let outcomes = run_bench(
                &items,
                &manifest_dir(manifest),
                backend.as_ref(),
                &DdimInversion,
                &ProviderRegistry::with_stubs(),
                &options,
            )?;
            make_dir(&g.out)?;
            let mut lines = String::new();
            for o in &outcomes {
                lines.push_str(&serde_json::to_string(&o.record).expect("record serializes"));
                lines.push('\n');
                emit_trace(&o.result.trace, g.out.join(format!("{}.trace.csv", o.record.id)))?;
            }
            write_text(&g.out.join("metrics.jsonl"), &lines)?;
            let records: Vec<_> = outcomes.into_iter().map(|o| o.record).collect();
            let summary = aggregate(&records, &items, method_tag)?;
            write_text(&g.out.join("summary.json"), &summary.to_json())?;
            for (t, s) in &summary.per_type {
                println!(
                    "{t:<18} n={} dino={:.6e} clip={:.6e}",
                    s.count, s.mean_dino_similarity, s.mean_clip_score
                );
            }
        }
        Command::Trace { input } => {
            let trace = load_trace(input)?;
            make_dir(&g.out)?;
            let path = g.out.join("trace_long.csv");
            write_text(&path, &trace_long_format(&trace))?;
            println!("{} rows -> {}", trace.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
