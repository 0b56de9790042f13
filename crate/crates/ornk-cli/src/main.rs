//! Batch runner for the ranking pipeline. Every subcommand works inside
//! one run directory: it snapshots the effective config there, reads the
//! artifacts earlier stages produced, writes its own, and finishes with
//! a machine-readable summary. Composed commands (`end2end`, `compare`)
//! are exactly the stage commands in sequence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ornk::cam::{roi_for_image, roi_to_gray, RoiVariant};
use ornk::config::{load_run_config, RunConfig};
use ornk::dataset::{load_unlabeled, split_manifest, write_png, SplitManifests};
use ornk::experiment::{
    evaluate_experiment, extract_roi_stage, prepare_region, run_experiment, train_baseline_stage,
    train_final_stage, train_primitive_stage, ExperimentPlan, MethodName, RegionData,
};
use ornk::manifest::Manifest;
use ornk::metrics::round2;
use ornk::preprocess::{preprocess, RegionKind, RegionSpec};
use ornk::ranking::SubModelBank;
use ornk::roi_cache::RoiCache;
use ornk::tensor::Tensor;
use ornk::trainer::LossKind;

#[derive(Parser)]
#[command(
    name = "ornk",
    version,
    about = "Ordinal image classification via banks of binary ranking models",
    after_help = "All artifacts live under --out; stage commands read what earlier stages wrote there."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration TOML; defaults apply when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory; artifacts and the config snapshot land here
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Max concurrently training sub-models
    #[arg(long, env = "ORNK_WORKERS")]
    workers: Option<usize>,
    /// Comma-separated subset of trk,rk,mc,mc1,mc2
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated subset of disc,edisc,original
    #[arg(long)]
    regions: Option<String>,
    /// Orientation of the fused region channel
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Loss for the second training stage
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Standard,
    Swapped,
}

impl From<VariantArg> for RoiVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Standard => RoiVariant::Standard,
            VariantArg::Swapped => RoiVariant::Swapped,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Cea,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossKind::Ce,
            LossArg::Cea => LossKind::Cea,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Rk,
    Mc,
    Mc1,
    Mc2,
}

impl From<BaselineArg> for MethodName {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Rk => MethodName::Rk,
            BaselineArg::Mc => MethodName::Mc,
            BaselineArg::Mc1 => MethodName::Mc1,
            BaselineArg::Mc2 => MethodName::Mc2,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under the run directory
    Synth(RunArgs),
    /// Split the dataset manifest into train/val/test manifests
    Split(RunArgs),
    /// Train the first-stage ranking bank for each region
    TrainPrimitive(RunArgs),
    /// Compute and cache the fused region channel for train/val samples
    ExtractRoi(RunArgs),
    /// Train the second-stage bank from the cached region channels
    TrainFinal(RunArgs),
    /// Train one baseline model per region
    TrainBaseline {
        /// Which baseline to train
        #[arg(value_enum)]
        which: BaselineArg,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Score the trained artifacts on the test split and write reports
    Evaluate(RunArgs),
    /// Full run per seed, then tabulate method accuracies across seeds
    Compare {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated seeds, one full run each
        #[arg(long, default_value = "7,8,9")]
        seeds: String,
    },
    /// synth, split, every training stage, and evaluate, in one run
    End2end(RunArgs),
    /// Export side-by-side image / region-channel rasters for inspection
    ExportHeatmaps {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated sample ids (see data/manifest.csv)
        #[arg(long)]
        ids: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => dispatch(&args, "synth", cmd_synth),
        Command::Split(args) => dispatch(&args, "split", cmd_split),
        Command::TrainPrimitive(args) => dispatch(&args, "train-primitive", |run| {
            per_region(run, |plan, data, dir| {
                train_primitive_stage(plan, data, dir)?;
                Ok(())
            })?;
            Ok(Vec::new())
        }),
        Command::ExtractRoi(args) => dispatch(&args, "extract-roi", |run| {
            let mut written = 0;
            per_region(run, |plan, data, dir| {
                written += extract_roi_stage(plan, data, dir)?;
                Ok(())
            })?;
            Ok(vec![("region channels written".into(), written as f64)])
        }),
        Command::TrainFinal(args) => dispatch(&args, "train-final", |run| {
            per_region(run, |plan, data, dir| {
                train_final_stage(plan, data, dir)?;
                Ok(())
            })?;
            Ok(Vec::new())
        }),
        Command::TrainBaseline { which, args } => dispatch(&args, "train-baseline", |run| {
            per_region(run, |plan, data, dir| {
                train_baseline_stage(plan, which.into(), data, dir)?;
                Ok(())
            })?;
            Ok(Vec::new())
        }),
        Command::Evaluate(args) => dispatch(&args, "evaluate", |run| {
            let splits = load_splits(&run.out)?;
            let summary =
                evaluate_experiment(&run.plan, &splits, &data_dir(&run.out), &run.out)?;
            print!("{}", summary.table);
            Ok(summary.headline())
        }),
        Command::Compare { args, seeds } => {
            let seeds = parse_seeds(&seeds)?;
            dispatch(&args, "compare", |run| cmd_compare(run, &seeds))
        }
        Command::End2end(args) => dispatch(&args, "end2end", cmd_end2end),
        Command::ExportHeatmaps { args, ids } => {
            dispatch(&args, "export-heatmaps", |run| cmd_export_heatmaps(run, &ids))
        }
    }
}

struct Run {
    config: RunConfig,
    plan: ExperimentPlan,
    out: PathBuf,
}

fn dispatch(
    args: &RunArgs,
    name: &str,
    body: impl FnOnce(&Run) -> Result<Vec<(String, f64)>>,
) -> Result<()> {
    let started = Instant::now();
    let run = setup(args)?;
    let headline = body(&run)?;
    write_summary(&run, name, started, &headline)?;
    println!(
        "{name}: done in {:.1}s (seed {}, config {})",
        started.elapsed().as_secs_f64(),
        run.config.seed,
        &run.config.hash()[..12]
    );
    Ok(())
}

fn setup(args: &RunArgs) -> Result<Run> {
    let config = effective_config(args)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("create run directory {}", args.out.display()))?;
    let snapshot = toml::to_string_pretty(&config).context("serialize config snapshot")?;
    let path = args.out.join("config.toml");
    std::fs::write(&path, snapshot).with_context(|| format!("write {}", path.display()))?;
    let plan = config.to_plan();
    Ok(Run { config, plan, out: args.out.clone() })
}

fn effective_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => load_run_config(path)
            .with_context(|| format!("run config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(methods) = &args.methods {
        config.experiment.methods = MethodName::parse_list(methods)?;
    }
    if let Some(regions) = &args.regions {
        config.experiment.regions = parse_regions(regions, &config.experiment.regions)?;
    }
    if let Some(variant) = args.variant {
        config.experiment.variant = variant.into();
    }
    if let Some(loss) = args.loss {
        config.final_schedule.loss = Some(loss.into());
    }
    config.validate().context("run configuration")?;
    Ok(config)
}

/// Region kinds from the command line keep the expansion the config gave
/// that kind, if any.
fn parse_regions(s: &str, configured: &[RegionSpec]) -> Result<Vec<RegionSpec>> {
    let mut specs: Vec<RegionSpec> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let key = part.trim().to_ascii_lowercase();
        let kind = match key.as_str() {
            "disc" => RegionKind::Disc,
            "edisc" => RegionKind::Edisc,
            "original" => RegionKind::Original,
            _ => bail!("unknown region {part:?} (try disc, edisc, original)"),
        };
        if specs.iter().any(|spec| spec.kind == kind) {
            bail!("region {key} listed twice");
        }
        specs.push(
            configured
                .iter()
                .find(|spec| spec.kind == kind)
                .copied()
                .unwrap_or(RegionSpec { kind, expansion: None }),
        );
    }
    if specs.is_empty() {
        bail!("no regions requested");
    }
    Ok(specs)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("seed {p:?}")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    for (i, seed) in seeds.iter().enumerate() {
        if seeds[..i].contains(seed) {
            bail!("seed {seed} listed twice");
        }
    }
    Ok(seeds)
}

fn write_summary(run: &Run, command: &str, started: Instant, headline: &[(String, f64)]) -> Result<()> {
    let head: serde_json::Map<String, serde_json::Value> =
        headline.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
    let summary = serde_json::json!({
        "command": command,
        "seed": run.config.seed,
        "config_hash": run.config.hash(),
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "headline": head,
    });
    let path = run.out.join("summary.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&summary)?)
        .with_context(|| format!("write {}", path.display()))
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn splits_dir(out: &Path) -> PathBuf {
    out.join("splits")
}

fn load_data_manifest(out: &Path) -> Result<Manifest> {
    let path = data_dir(out).join("manifest.csv");
    if !path.is_file() {
        bail!("no dataset manifest at {}; run `ornk synth` first", path.display());
    }
    Ok(Manifest::load(path)?)
}

fn load_splits(out: &Path) -> Result<SplitManifests> {
    let dir = splits_dir(out);
    if !dir.join("train.csv").is_file() {
        bail!("no split manifests under {}; run `ornk split` first", dir.display());
    }
    Ok(SplitManifests {
        train: Manifest::load(dir.join("train.csv"))?,
        val: Manifest::load(dir.join("val.csv"))?,
        test: Manifest::load(dir.join("test.csv"))?,
    })
}

fn per_region(
    run: &Run,
    mut body: impl FnMut(&ExperimentPlan, &RegionData, &Path) -> Result<()>,
) -> Result<()> {
    let splits = load_splits(&run.out)?;
    for spec in &run.plan.regions {
        let data =
            prepare_region(spec, &splits, &data_dir(&run.out), run.plan.backbone.input_size)?;
        body(&run.plan, &data, &run.out.join(spec.kind.label()))?;
    }
    Ok(())
}

fn cmd_synth(run: &Run) -> Result<Vec<(String, f64)>> {
    let dir = data_dir(&run.out);
    let manifest = ornk::synth::generate(&run.config.synth, &dir)?;
    log::info!("wrote {} images under {}", manifest.len(), dir.display());
    Ok(vec![("images".into(), manifest.len() as f64)])
}

fn cmd_split(run: &Run) -> Result<Vec<(String, f64)>> {
    let manifest = load_data_manifest(&run.out)?;
    let splits = split_manifest(
        &manifest,
        run.config.dataset.test_fraction,
        run.config.dataset.val_fraction,
        run.config.seed,
    )?;
    let dir = splits_dir(&run.out);
    std::fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;
    splits.train.save(dir.join("train.csv"))?;
    splits.val.save(dir.join("val.csv"))?;
    splits.test.save(dir.join("test.csv"))?;
    Ok(vec![
        ("train".into(), splits.train.len() as f64),
        ("val".into(), splits.val.len() as f64),
        ("test".into(), splits.test.len() as f64),
    ])
}

fn cmd_end2end(run: &Run) -> Result<Vec<(String, f64)>> {
    cmd_synth(run)?;
    cmd_split(run)?;
    let splits = load_splits(&run.out)?;
    let summary = run_experiment(&run.plan, &splits, &data_dir(&run.out), &run.out)?;
    print!("{}", summary.table);
    Ok(summary.headline())
}

fn cmd_compare(run: &Run, seeds: &[u64]) -> Result<Vec<(String, f64)>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut accs: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for &seed in seeds {
        let mut config = run.config.clone();
        config.seed = seed;
        config.synth.seed = seed;
        let plan = config.to_plan();
        let seed_out = run.out.join(format!("s{seed}"));
        std::fs::create_dir_all(&seed_out)
            .with_context(|| format!("create {}", seed_out.display()))?;
        std::fs::write(seed_out.join("config.toml"), toml::to_string_pretty(&config)?)?;

        let manifest = ornk::synth::generate(&config.synth, &data_dir(&seed_out))?;
        let splits = split_manifest(
            &manifest,
            config.dataset.test_fraction,
            config.dataset.val_fraction,
            config.seed,
        )?;
        let dir = splits_dir(&seed_out);
        std::fs::create_dir_all(&dir)?;
        splits.train.save(dir.join("train.csv"))?;
        splits.val.save(dir.join("val.csv"))?;
        splits.test.save(dir.join("test.csv"))?;

        let summary = run_experiment(&plan, &splits, &data_dir(&seed_out), &seed_out)?;
        println!("seed {seed}:");
        print!("{}", summary.table);
        for r in &summary.reports {
            if let Some(acc) = r.acc {
                let key = (r.method.clone(), r.region.clone());
                if !order.contains(&key) {
                    order.push(key.clone());
                }
                accs.entry(key).or_default().push((seed, acc));
            }
        }
    }

    let mut csv = String::from("method,region,seed,acc\n");
    let mut headline = Vec::new();
    for key in &order {
        let rows = &accs[key];
        for (seed, acc) in rows {
            csv.push_str(&format!("{},{},{seed},{acc:.2}\n", key.0, key.1));
        }
        let mean = rows.iter().map(|(_, a)| a).sum::<f64>() / rows.len() as f64;
        csv.push_str(&format!("{},{},mean,{mean:.2}\n", key.0, key.1));
        headline.push((format!("mean {} ({})", key.0, key.1), round2(mean)));
    }
    let path = run.out.join("compare.csv");
    std::fs::write(&path, &csv).with_context(|| format!("write {}", path.display()))?;
    println!("mean accuracy over {} seeds:", seeds.len());
    for (k, v) in &headline {
        println!("  {k}: {v:.2}");
    }
    Ok(headline)
}

/// Left half: the region crop the models saw. Right half: the fused
/// region channel, min-max stretched to gray (uniform mid-gray when the
/// channel is all zero).
fn side_by_side(image: &Tensor, gray: &[u8]) -> Result<Tensor> {
    let &[_, h, w] = image.shape() else {
        bail!("expected a [3,H,W] image, got {:?}", image.shape());
    };
    let mut out = vec![0.0; 3 * h * 2 * w];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * 2 * w + x] = image.data()[(ch * h + y) * w + x];
                out[(ch * h + y) * 2 * w + w + x] = f64::from(gray[y * w + x]) / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, 2 * w], out)?)
}

fn cmd_export_heatmaps(run: &Run, ids: &str) -> Result<Vec<(String, f64)>> {
    let requested: Vec<&str> = ids.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if requested.is_empty() {
        bail!("no sample ids given");
    }
    let spec = run.plan.regions[0];
    let region_dir = run.out.join(spec.kind.label());
    let bank_dir = region_dir.join("primitive.bank");
    if !bank_dir.join("manifest.json").is_file() {
        bail!(
            "no first-stage bank at {}; run train-primitive and extract-roi first",
            bank_dir.display()
        );
    }
    let bank = SubModelBank::load(bank_dir)?;
    let cache = RoiCache::open(
        region_dir.join(format!("roi.{}", run.plan.variant.label())),
        bank.content_hash()?,
        run.plan.variant,
    )?;

    let manifest = load_data_manifest(&run.out)?;
    let known = Manifest {
        rows: manifest
            .rows
            .iter()
            .filter(|r| requested.contains(&r.id.as_str()))
            .cloned()
            .collect(),
    };
    let records = load_unlabeled(&known, &data_dir(&run.out), true)?;
    let skipped: Vec<&str> = requested
        .iter()
        .copied()
        .filter(|id| !records.iter().any(|r| r.id == *id))
        .collect();
    if !skipped.is_empty() {
        log::warn!("skipping unknown ids: {}", skipped.join(", "));
    }

    let out_dir = run.out.join("heatmaps");
    std::fs::create_dir_all(&out_dir).with_context(|| format!("create {}", out_dir.display()))?;
    let mut exported = 0;
    for id in &requested {
        let Some(record) = records.iter().find(|r| r.id == *id) else { continue };
        let image =
            preprocess(&record.image, &spec, record.disc_box.as_ref(), run.plan.backbone.input_size)?;
        let roi = match cache.load(id) {
            Ok(entry) => entry.values,
            Err(ornk::Error::Missing(_)) => {
                roi_for_image(&bank, &image, run.plan.variant, run.plan.upsample)?.values
            }
            Err(other) => return Err(other.into()),
        };
        let composite = side_by_side(&image, &roi_to_gray(&roi))?;
        write_png(&out_dir.join(format!("{id}.png")), &composite)?;
        exported += 1;
    }
    log::info!("exported {exported} rasters to {}", out_dir.display());
    Ok(vec![("exported".into(), f64::from(exported)), ("skipped".into(), skipped.len() as f64)])
}
