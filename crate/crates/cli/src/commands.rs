use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::Serialize;
use serde_json::Value;

use changecast_core::dataset::io::{bucket_dir, derive_dataset, write_location, DeriveOptions};
use changecast_core::dataset::{synth_generate, ArchiveSource, PatchSource, SynthConfig, FORECAST_RANGES, TIME_RANGE_HORIZON};
use changecast_core::evaluation::plots::{render_dir, write_reference};
use changecast_core::evaluation::{emit_plots, evaluate, EvalSet};
use changecast_core::network::{load_checkpoint, load_external_backbone};
use changecast_core::training::{apply_json, apply_overrides, train, TrainData, TrainOutcome};
use changecast_core::{BackboneInit, EvalOptions, EvalReport, Split, Task, TrainConfig};

use crate::{ConfigArgs, TrainArgs};

/// Record of one command invocation, written next to its outputs.
#[derive(Serialize)]
struct CommandRecord<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    deterministic: bool,
    config: &'a C,
}

fn write_record<C: Serialize>(dir: &Path, command: &str, seed: u64, deterministic: bool, config: &C) -> Result<()> {
    let record = CommandRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        deterministic,
        config,
    };
    let path = dir.join("command.json");
    fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))
}

/// Defaults, then the config file, then `--set`, then `--seed`.
fn layered<T: Serialize + serde::de::DeserializeOwned>(base: T, args: &ConfigArgs) -> Result<T> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg = apply_json(&cfg, &patch).with_context(|| format!("applying {}", path.display()))?;
    }
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(apply_overrides(&cfg, &overrides)?)
}

pub fn synth(root: &Path, args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    #[derive(Serialize, serde::Deserialize)]
    struct SynthRun {
        seed: u64,
        #[serde(flatten)]
        world: SynthConfig,
    }
    let run = layered(
        SynthRun {
            seed: 0,
            world: SynthConfig::default(),
        },
        args,
    )?;
    run.world.validate()?;
    let out = out.unwrap_or_else(|| root.join("raw"));
    fs::create_dir_all(&out)?;
    let series = synth_generate(&run.world, run.seed)?;
    for s in &series {
        write_location(&out, s)?;
    }
    write_record(&out, "synth", run.seed, true, &run.world)?;
    info!("wrote {} locations to {}", series.len(), out.display());
    Ok(())
}

pub fn derive(root: &Path, input: Option<PathBuf>, out: Option<PathBuf>, ranges: &[u32], seed: u64) -> Result<()> {
    if ranges.is_empty() || ranges.contains(&0) {
        bail!("ranges must be positive month counts");
    }
    let opts = DeriveOptions {
        input: input.unwrap_or_else(|| root.join("raw")),
        out: out.unwrap_or_else(|| root.join("derived")),
        ranges: ranges.to_vec(),
        seed,
    };
    let summary = derive_dataset(&opts).with_context(|| format!("deriving from {}", opts.input.display()))?;
    write_record(&opts.out, "derive", seed, true, &opts.ranges)?;
    for b in &summary.buckets {
        println!(
            "r={:>2}  pairs={:>6}  patches={:>7}  changed={:.4}%",
            b.range_months,
            b.pairs,
            b.patches,
            100.0 * b.change_fraction()
        );
    }
    if !summary.failures.is_empty() {
        let mut msg = format!("{} location(s) failed:", summary.failures.len());
        for (loc, e) in &summary.failures {
            msg.push_str(&format!("\n  {loc}: {e}"));
        }
        bail!(msg);
    }
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.as_str() == name)
        .ok_or_else(|| anyhow!("unknown split '{name}' (expected train, val or test)"))
}

/// Ranges with a derived bucket directory, ascending.
fn derived_ranges(data: &Path) -> Result<Vec<u32>> {
    let pairs = data.join("pairs");
    let entries = fs::read_dir(&pairs).with_context(|| format!("no derived data at {}", pairs.display()))?;
    let mut ranges: Vec<u32> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix('r')?.parse().ok())
        .collect();
    ranges.sort_unstable();
    Ok(ranges)
}

/// Patches of `split` pooled over `ranges`; `None` if no such patches exist.
fn open_split(data: &Path, ranges: &[u32], split: Split) -> Result<Option<ArchiveSource>> {
    let mut dirs = Vec::new();
    for &r in ranges {
        let bucket = bucket_dir(data, r);
        if !bucket.is_dir() {
            bail!(
                "no derived bucket for the {r}-month range at {}; run `changecast derive --ranges {r}`",
                bucket.display()
            );
        }
        let dir = bucket.join(split.as_str());
        if dir.is_dir() {
            dirs.push(dir);
        }
    }
    let source = ArchiveSource::open(&dirs)?;
    Ok((!source.is_empty()).then_some(source))
}

fn parse_init(init: &str, cfg: &TrainConfig) -> Result<BackboneInit> {
    if init == "scratch" {
        return Ok(BackboneInit::Scratch);
    }
    if let Some(path) = init.strip_prefix("external:") {
        let backbone = load_external_backbone(Path::new(path), cfg.backbone)
            .with_context(|| format!("loading external backbone {path}"))?;
        return Ok(BackboneInit::External(backbone));
    }
    let bundle = load_checkpoint(Path::new(init)).with_context(|| format!("loading checkpoint {init}"))?;
    Ok(BackboneInit::Stage1(bundle))
}

fn run_training(root: &Path, args: &TrainArgs, task: Task, ranges: &[u32], init: &str) -> Result<()> {
    let cfg = layered(TrainConfig::for_task(task), &args.config)?;
    if cfg.task != task {
        bail!("config sets task {} but the command trains {task}", cfg.task);
    }
    let data = args.data.clone().unwrap_or_else(|| root.join("derived"));
    let out = args.out.clone().unwrap_or_else(|| root.join("runs").join(task.to_string()));
    let train_src = open_split(&data, ranges, Split::Train)?
        .ok_or_else(|| anyhow!("no training patches for ranges {ranges:?} in {}", data.display()))?;
    let val_src = open_split(&data, ranges, Split::Val)?;
    let init = parse_init(init, &cfg)?;
    info!(
        "training {task} on {} patches ({} validation), batch {}",
        train_src.len(),
        val_src.as_ref().map_or(0, |v| v.len()),
        cfg.effective_batch_size()
    );
    let outcome: TrainOutcome = train(
        &cfg,
        &TrainData {
            train: &train_src,
            val: val_src.as_ref().map(|v| v as &dyn PatchSource),
            val_range: ranges[0],
        },
        init,
        Some(&out),
    )?;
    write_record(&out, &format!("train-{task}"), cfg.seed, args.deterministic, &cfg)?;
    let m = &outcome.manifest.metrics;
    println!(
        "steps={}  final_loss={}  final_val_f1={}  best_val_f1={}  threshold={:.4}",
        outcome.history.len(),
        fmt_opt(m.final_loss),
        fmt_opt(m.final_val_f1),
        fmt_opt(m.best_val_f1),
        m.tracked_threshold
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn train_detect(root: &Path, args: &TrainArgs, ranges: Option<Vec<u32>>) -> Result<()> {
    let data = args.data.clone().unwrap_or_else(|| root.join("derived"));
    let ranges = match ranges {
        Some(r) => r,
        None => derived_ranges(&data)?,
    };
    if ranges.is_empty() {
        bail!("no derived buckets in {}", data.display());
    }
    run_training(root, args, Task::Detect, &ranges, "scratch")
}

pub fn train_forecast(root: &Path, args: &TrainArgs, range: u32, init: &str) -> Result<()> {
    if !FORECAST_RANGES.contains(&range) {
        log::warn!("range {range} is not one of the standard ranges {FORECAST_RANGES:?}");
    }
    run_training(root, args, Task::Forecast { range }, &[range], init)
}

pub fn train_timerange(root: &Path, args: &TrainArgs, init: &str) -> Result<()> {
    run_training(root, args, Task::Timerange, &[TIME_RANGE_HORIZON], init)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub split: String,
    pub ranges: Option<Vec<u32>>,
    pub out: Option<PathBuf>,
    pub oracle_threshold: bool,
    pub max_patches: Option<usize>,
    pub pr_points: usize,
    pub label: Option<String>,
    pub seed: u64,
}

pub fn eval(root: &Path, args: EvalArgs) -> Result<()> {
    let bundle = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let data = args.data.unwrap_or_else(|| root.join("derived"));
    let split = parse_split(&args.split)?;
    let ranges = match (args.ranges, bundle.task) {
        (Some(r), _) => r,
        (None, Task::Detect) => derived_ranges(&data)?,
        (None, Task::Forecast { range }) => vec![range],
        (None, Task::Timerange) => vec![TIME_RANGE_HORIZON],
    };
    let mut sources = Vec::new();
    for &r in &ranges {
        let src = open_split(&data, &[r], split)?
            .ok_or_else(|| anyhow!("no {} patches for the {r}-month range", split.as_str()))?;
        sources.push((r, src));
    }
    let sets: Vec<EvalSet<'_>> = sources
        .iter()
        .map(|(r, s)| EvalSet {
            range_months: *r,
            source: s,
        })
        .collect();
    let opts = EvalOptions {
        oracle_threshold: args.oracle_threshold,
        pr_points: args.pr_points,
        max_patches: args.max_patches,
        seed: args.seed,
        ..EvalOptions::default()
    };
    let label = args.label.unwrap_or_else(|| {
        args.checkpoint
            .file_stem()
            .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
    });
    let report = evaluate(&bundle, &sets, &opts, &label)?;
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval")
    });
    fs::create_dir_all(&out)?;
    report.write_json(&out.join("eval_report.json"))?;
    emit_plots(std::slice::from_ref(&report), &out)?;
    write_record(&out, "eval", args.seed, true, &opts)?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("{:>6} {:>8} {:>9} {:>9} {:>9} {:>9}", "range", "patches", "threshold", "f1", "precision", "recall");
    for r in &report.ranges {
        println!(
            "{:>6} {:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.range_months, r.n_patches, r.threshold_used, r.metrics.f1, r.metrics.precision, r.metrics.recall
        );
        if let Some(o) = &r.oracle {
            println!(
                "       oracle threshold {:.4}: f1 {:.4} (tracked threshold on the same pixels: {:.4})",
                o.threshold, o.f1, o.tracked_f1
            );
        }
    }
    if let Some(t) = &report.timerange {
        println!(
            "time range: accuracy {:.4}  early f1 {:.4}  late f1 {:.4}  average f1 {:.4}",
            t.accuracy, t.f1[0], t.f1[1], t.af1
        );
    }
}

pub fn plot(dir: &Path, reports: &[PathBuf], reference: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if !reports.is_empty() {
        let loaded = reports
            .iter()
            .map(|p| -> Result<EvalReport> {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        written.extend(emit_plots(&loaded, dir)?);
    }
    if reference {
        let (csv, svg) = write_reference(dir)?;
        written.push(csv);
        written.push(svg);
    }
    if reports.is_empty() && !reference {
        written = render_dir(dir)?;
    }
    if written.is_empty() {
        bail!("nothing to plot in {}", dir.display());
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
