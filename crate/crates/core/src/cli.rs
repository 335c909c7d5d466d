//! Command-line front end: `synth`, `train`, `infer`, `eval`, `stats`, `sweep`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalstats::{
    ablation_sweep, evaluate, standard_grid, Evaluation, FlopReport, LevelHistogram, RecallReport, SweepRow,
};
use crate::generator::{export_proposals, GenTrace};
use crate::predictor::PredictorBank;
use crate::synthdata::{read_dataset, synthesize, write_dataset, Dataset};
use crate::training::{train_from, LossRow, TrainOptions, TrainState};

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  invalid configuration or arguments (unknown key, bad value, model mismatch)
  3  data or I/O failure (missing file, bad checksum, version or shape mismatch)
  4  numeric failure (non-finite loss or cost, degenerate box, undefined correlation)";

#[derive(Debug, Parser)]
#[command(name = "asag", version, about = "Adaptive sparse anchor generation", after_help = EXIT_CODES)]
pub struct Cli {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set gen.eta_l=0.2`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=JSON", global = true)]
    pub overrides: Vec<String>,

    /// Worker threads for per-scene work. Results do not depend on it.
    #[arg(long, default_value_t = 1, global = true)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a predictor bank on a dataset.
    Train(TrainArgs),
    /// Run the generator and dump anchors, the full pool and traces.
    Infer(InferArgs),
    /// Average recall of the generated anchors.
    Eval(EvalArgs),
    /// Count correlation, level histogram and FLOP tallies.
    Stats(EvalArgs),
    /// Threshold and toggle ablations with one set of weights.
    Sweep(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for weights, loss history and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Deepest level to probe: 3 (full), 4, or 5 (fixed part only).
    #[arg(long)]
    pub lowest_level: Option<u8>,
    /// Also write RoI-aligned P5 features of the output anchors.
    #[arg(long)]
    pub roi_features: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lowest_level: Option<u8>,
    /// Proposal budget per image.
    #[arg(long)]
    pub budget: Option<usize>,
}

/// File config plus overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::from_json(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn snapshot(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&out.join(RESOLVED_CONFIG), cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let cfg = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Infer(a) => cmd_infer(cfg, a, cli.jobs),
        Command::Eval(a) => cmd_eval(cfg, a, cli.jobs),
        Command::Stats(a) => cmd_stats(cfg, a, cli.jobs),
        Command::Sweep(a) => cmd_sweep(cfg, a, cli.jobs),
    }
}

pub fn cmd_synth(mut cfg: RunConfig, a: &SynthArgs) -> Result<()> {
    if let Some(n) = a.scenes {
        cfg.synth.scenes = n;
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let ds = synthesize(&cfg.synth)?;
    create_dir(&a.out)?;
    let manifest = write_dataset(&ds, &a.out)?;
    snapshot(&a.out, &cfg)?;
    let gts: usize = ds.scenes.iter().map(|s| s.spec.boxes.len()).sum();
    let failed = ds.scenes.iter().filter(|s| s.spec.placement_failed).count();
    println!(
        "wrote {} scenes to {} ({} feature bytes, crc32 {:08x}); mean GT count {:.3}; placement failures {}",
        ds.scenes.len(),
        a.out.display(),
        manifest.blob_bytes,
        manifest.crc32,
        gts as f64 / ds.scenes.len() as f64,
        failed
    );
    Ok(())
}

pub fn cmd_train(mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let ds = read_dataset(&a.data)?;
    cfg.synth = ds.config.clone();
    cfg.validate()?;
    let state = match &a.resume {
        Some(p) => {
            let st = TrainState::load(p)?;
            if st.bank.model != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    p.display()
                )));
            }
            st
        }
        None => TrainState::fresh(&cfg),
    };
    create_dir(&a.out)?;
    snapshot(&a.out, &cfg)?;
    let opts = TrainOptions {
        checkpoint_dir: (cfg.train.checkpoint_every > 0).then(|| a.out.join("checkpoints")),
        stop_after_epoch: a.stop_after_epoch,
    };
    if let Some(d) = &opts.checkpoint_dir {
        create_dir(d)?;
    }
    let state = train_from(&ds, &cfg, state, &opts)?;
    state.bank.save(&a.out.join("weights.bin"))?;
    state.save(&a.out.join("last.ckpt"))?;
    write_lines(
        &a.out.join("loss.csv"),
        std::iter::once(LossRow::CSV_HEADER.to_string()).chain(state.history.iter().map(LossRow::csv)),
    )?;
    let last = state.history.last();
    println!(
        "trained {} epochs ({} steps); final loss {}; weights at {}",
        state.epoch,
        state.history.len(),
        last.map_or("n/a".into(), |r| format!("{:.4}", r.total)),
        a.out.join("weights.bin").display()
    );
    Ok(())
}

/// Weights, dataset and the run config adjusted to them.
fn load_inputs(mut cfg: RunConfig, weights: &Path, data: &Path, lowest: Option<u8>) -> Result<(RunConfig, PredictorBank, Dataset)> {
    let bank = PredictorBank::load(weights)?;
    let ds = read_dataset(data)?;
    if ds.config.raw_channels != bank.model.raw_channels {
        return Err(Error::Shape(format!(
            "dataset has {} raw channels, weights expect {}",
            ds.config.raw_channels, bank.model.raw_channels
        )));
    }
    cfg.model = bank.model.clone();
    cfg.synth = ds.config.clone();
    if let Some(l) = lowest {
        cfg.gen.lowest_level = l;
    }
    cfg.gen.validate()?;
    cfg.gen.check_model(&cfg.model)?;
    Ok((cfg, bank, ds))
}

#[derive(Serialize)]
struct AnchorLine {
    scene: usize,
    rank: usize,
    pool_index: usize,
    level: u8,
    patch: usize,
    cx: f32,
    cy: f32,
    w: f32,
    h: f32,
    score: f32,
}

/// One pool entry; carries no "in output" flag so ineligible lines compare
/// byte-for-byte across probing depths.
#[derive(Serialize)]
struct PoolLine {
    scene: usize,
    index: usize,
    level: u8,
    patch: usize,
    cx: f32,
    cy: f32,
    w: f32,
    h: f32,
    score: f32,
    eligible: bool,
    selected: bool,
    replaced: bool,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    scene: usize,
    trace: &'a GenTrace,
}

fn line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

pub fn cmd_infer(cfg: RunConfig, a: &InferArgs, jobs: usize) -> Result<()> {
    let (cfg, bank, ds) = load_inputs(cfg, &a.weights, &a.data, a.lowest_level)?;
    let ev = evaluate(&ds.scenes, &bank, &cfg.gen, cfg.eval.budget, jobs)?;
    create_dir(&a.out)?;
    snapshot(&a.out, &cfg)?;
    let mut anchors = Vec::new();
    let mut pool = Vec::new();
    let mut traces = Vec::new();
    for (o, s) in ev.outputs.iter().zip(&ds.scenes) {
        let scene = s.spec.id;
        for (rank, (x, &pi)) in o.valid().iter().zip(&o.output_index).enumerate() {
            anchors.push(line(&AnchorLine {
                scene,
                rank,
                pool_index: pi,
                level: x.origin_level,
                patch: x.origin_patch,
                cx: x.bbox.cx,
                cy: x.bbox.cy,
                w: x.bbox.w,
                h: x.bbox.h,
                score: x.score,
            }));
        }
        for (index, x) in o.pool.iter().enumerate() {
            pool.push(line(&PoolLine {
                scene,
                index,
                level: x.origin_level,
                patch: x.origin_patch,
                cx: x.bbox.cx,
                cy: x.bbox.cy,
                w: x.bbox.w,
                h: x.bbox.h,
                score: x.score,
                eligible: x.probe_eligible(&cfg.gen),
                selected: x.selected_for_probe,
                replaced: x.replaced,
            }));
        }
        traces.push(line(&TraceLine { scene, trace: &o.trace }));
    }
    write_lines(&a.out.join("anchors.jsonl"), anchors)?;
    write_lines(&a.out.join("pool.jsonl"), pool)?;
    write_lines(&a.out.join("traces.jsonl"), traces)?;
    if a.roi_features {
        write_roi_features(&a.out, &cfg, &bank, &ds, &ev)?;
    }
    println!(
        "{} scenes: mean {:.1} anchors, P5-only/P4/P3 {:.2}/{:.2}/{:.2}; dumps in {}",
        ds.scenes.len(),
        ev.mean_anchors,
        ev.histogram.p5_only,
        ev.histogram.p4,
        ev.histogram.p3,
        a.out.display()
    );
    Ok(())
}

/// `roi_features.bin`: per scene `count_max x C x roi_out x roi_out` little-endian
/// f32 values, zero rows for padding; layout in `roi_features.json`.
fn write_roi_features(out: &Path, cfg: &RunConfig, bank: &PredictorBank, ds: &Dataset, ev: &Evaluation) -> Result<()> {
    let path = out.join("roi_features.bin");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for (o, s) in ev.outputs.iter().zip(&ds.scenes) {
        for row in export_proposals(&s.pyramid, bank, &o.anchors, &o.mask, &cfg.eval)? {
            for v in row {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let r = cfg.eval.roi_out;
    write_json(
        &out.join("roi_features.json"),
        &serde_json::json!({
            "scenes": ds.scenes.len(),
            "shape": [cfg.gen.count_max, bank.model.channels, r, r],
            "dtype": "f32le",
        }),
    )
}

#[derive(Serialize)]
struct EvalReport<'a> {
    lowest_level: u8,
    recall: &'a RecallReport,
}

pub fn cmd_eval(cfg: RunConfig, a: &EvalArgs, jobs: usize) -> Result<()> {
    let (mut cfg, bank, ds) = load_inputs(cfg, &a.weights, &a.data, a.lowest_level)?;
    if let Some(b) = a.budget {
        cfg.eval.budget = b;
    }
    let ev = evaluate(&ds.scenes, &bank, &cfg.gen, cfg.eval.budget, jobs)?;
    create_dir(&a.out)?;
    snapshot(&a.out, &cfg)?;
    let r = &ev.recall;
    write_json(
        &a.out.join("recall.json"),
        &EvalReport {
            lowest_level: cfg.gen.lowest_level,
            recall: r,
        },
    )?;
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
    println!(
        "AR {:.4}  AR@0.5 {:.4}  small {}  medium {}  large {}  (budget {}, {} GTs over {} scenes)",
        r.ar,
        r.ar50,
        fmt(r.ar_small),
        fmt(r.ar_medium),
        fmt(r.ar_large),
        r.budget,
        r.gts,
        r.images
    );
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    scenes: usize,
    correlation: Option<f64>,
    correlation_note: Option<String>,
    histogram: LevelHistogram,
    flops: FlopReport,
    mean_sparse_flops: f64,
    mean_predictor_flops: f64,
    sparse_to_dense: f64,
    mean_anchors: f64,
    mean_patches_p4: f64,
    mean_patches_p3: f64,
}

pub fn cmd_stats(cfg: RunConfig, a: &EvalArgs, jobs: usize) -> Result<()> {
    let (mut cfg, bank, ds) = load_inputs(cfg, &a.weights, &a.data, a.lowest_level)?;
    if let Some(b) = a.budget {
        cfg.eval.budget = b;
    }
    let ev = evaluate(&ds.scenes, &bank, &cfg.gen, cfg.eval.budget, jobs)?;
    create_dir(&a.out)?;
    snapshot(&a.out, &cfg)?;
    let traces: Vec<GenTrace> = ev.outputs.iter().map(|o| o.trace.clone()).collect();
    let counts: Vec<usize> = ds.scenes.iter().map(|s| s.spec.boxes.len()).collect();
    let (correlation, note) = match crate::evalstats::count_correlation(&traces, &counts) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = StatsReport {
        scenes: ds.scenes.len(),
        correlation,
        correlation_note: note.clone(),
        histogram: ev.histogram,
        flops: ev.flops,
        mean_sparse_flops: ev.flops.mean_sparse(),
        mean_predictor_flops: ev.flops.mean_sparse_predictor(),
        sparse_to_dense: ev.flops.ratio(),
        mean_anchors: ev.mean_anchors,
        mean_patches_p4: ev.mean_patches[0],
        mean_patches_p3: ev.mean_patches[1],
    };
    write_json(&a.out.join("stats.json"), &report)?;
    write_lines(
        &a.out.join("counts.csv"),
        std::iter::once("scene,gt_count,anchor_count,deepest_level".to_string()).chain(
            ds.scenes
                .iter()
                .zip(&traces)
                .map(|(s, t)| format!("{},{},{},{}", s.spec.id, s.spec.boxes.len(), t.valid, t.deepest_level())),
        ),
    )?;
    if let Some(n) = note {
        eprintln!("warning: {n}");
    }
    println!(
        "spearman {}; P5-only/P4/P3 {:.2}/{:.2}/{:.2}; {:.3e} FLOPs per image ({:.4} of dense)",
        correlation.map_or("undefined".into(), |r| format!("{r:.4}")),
        report.histogram.p5_only,
        report.histogram.p4,
        report.histogram.p3,
        report.mean_sparse_flops,
        report.sparse_to_dense
    );
    Ok(())
}

pub fn cmd_sweep(cfg: RunConfig, a: &EvalArgs, jobs: usize) -> Result<()> {
    let (mut cfg, bank, ds) = load_inputs(cfg, &a.weights, &a.data, a.lowest_level)?;
    if let Some(b) = a.budget {
        cfg.eval.budget = b;
    }
    let mut grid = standard_grid(&cfg.gen);
    let mut topk = cfg.gen.clone();
    topk.topk_mode = true;
    grid.push(("topk".into(), topk));
    let mut keep = cfg.gen.clone();
    keep.replace_selected = false;
    grid.push(("keep_selected".into(), keep));
    let rows = ablation_sweep(&ds.scenes, &bank, &grid, cfg.eval.budget, jobs)?;
    create_dir(&a.out)?;
    snapshot(&a.out, &cfg)?;
    write_lines(
        &a.out.join("sweep.csv"),
        std::iter::once(SweepRow::CSV_HEADER.to_string()).chain(rows.iter().map(SweepRow::csv)),
    )?;
    write_json(&a.out.join("sweep.json"), &rows)?;
    for r in &rows {
        println!(
            "{:<16} AR {:.4}  AR@0.5 {:.4}  anchors {:.1}  patches P4 {:.2} P3 {:.2}",
            r.label, r.ar, r.ar50, r.mean_anchors, r.mean_patches_p4, r.mean_patches_p3
        );
    }
    Ok(())
}
