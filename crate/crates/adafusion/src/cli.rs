//! The `adafusion` command line.

use std::fs;
use std::path::{Path, PathBuf};

use adafusion_core::bench::format_table;
use adafusion_core::embedding::pool_table;
use adafusion_core::gradcheck::{grad_check, tiny_instance, TinyShape};
use adafusion_core::interp::{compute_contribution_map, render_heatmap, HeatmapMode};
use adafusion_core::model::Head;
use adafusion_core::synth::{generate_synthetic, SynthConfig};
use adafusion_core::train::{evaluate, train};
use adafusion_core::{Split, TaskKind, TrainConfig, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::export::{write_contribution_csv, write_loss_curve, write_metrics, write_ppm};
use crate::manifest::{
    load_dataset, load_manifest, load_tables, manifest_dir, write_dataset, write_json,
};
use crate::pft::write_feature_table;
use crate::throughput::{bag_sizes, throughput_bench, ThroughputConfig};

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "adafusion",
    version,
    about = "Prompt-guided fusion of multi-source tile embeddings"
)]
pub struct Cli {
    /// Worker threads for pooling and contribution export.
    /// Training and evaluation are always serial.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Mean-pool every source of a manifest to a common dimension.
    Pool(PoolArgs),
    /// Train a fusion model and its task head.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Export per-tile source contributions as CSV and heatmaps.
    Contrib(ContribArgs),
    /// Generate a synthetic dataset with planted source specialisation.
    Synth(SynthArgs),
    /// Measure bag inference throughput.
    BenchFps(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PoolArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_variant, default_value = "fine")]
    pub variant: Variant,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Bags (classification) or tiles (regression) per step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ContribArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restrict to one split; all slides otherwise.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixels per tile in the heatmaps.
    #[arg(long, default_value_t = 8)]
    pub cell: usize,
    /// Also write one grey-level heatmap per source.
    #[arg(long)]
    pub per_source: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Full generator settings as JSON; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bags_per_class: Option<usize>,
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    #[arg(long, default_value_t = 6)]
    pub sources: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2000)]
    pub min_tiles: usize,
    #[arg(long, default_value_t = 40000)]
    pub max_tiles: usize,
    #[arg(long, default_value_t = 2000)]
    pub step: usize,
    #[arg(long, value_parser = parse_variant, value_delimiter = ',', default_value = "fine,self-attn")]
    pub methods: Vec<Variant>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop starting new measurements after this many seconds.
    #[arg(long)]
    pub budget_secs: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_variant, default_value = "fine")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: adafusion_core::Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: adafusion_core::Error| e.to_string())
}

/// Written as `config.json` in the output directory of every run.
#[derive(Debug, Serialize)]
struct ConfigEcho<'a, T: Serialize> {
    version: &'static str,
    argv: Vec<String>,
    cli: &'a Cli,
    effective: T,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo<T: Serialize>(cli: &Cli, out: &Path, effective: T) -> Result<()> {
    create_dir(out)?;
    let e = ConfigEcho {
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        cli,
        effective,
    };
    write_json(&e, &out.join("config.json"))
}

/// Parses arguments and runs; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Invalid("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Pool(a) => cmd_pool(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Contrib(a) => cmd_contrib(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
        Command::BenchFps(a) => cmd_bench_fps(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
    })
}

pub fn cmd_pool(cli: &Cli, a: &PoolArgs) -> Result<()> {
    let mut manifest = load_manifest(&a.manifest)?;
    let tables = load_tables(&manifest, &a.manifest)?;
    echo(cli, &a.out, serde_json::json!({ "d": a.d }))?;
    let pooled = tables
        .par_iter()
        .map(|t| pool_table(t, a.d).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    for (s, t) in manifest.sources.iter_mut().zip(&pooled) {
        s.native_dim = a.d;
        s.path = format!("{}.pft", s.source_id);
        write_feature_table(t, a.out.join(&s.path))?;
    }
    crate::manifest::save_manifest(&manifest, a.out.join("manifest.json"))?;
    println!(
        "pooled {} sources to d={} in {}",
        pooled.len(),
        a.d,
        a.out.display()
    );
    Ok(())
}

pub fn train_config(task: TaskKind, a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::for_task(task, a.variant.clone());
    if let Some(d) = a.d {
        cfg.d = d;
    }
    if let Some(r) = a.rho {
        cfg.rho = r;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(wd) = a.wd {
        cfg.weight_decay = wd;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let cfg = train_config(manifest.task_kind, a);
    cfg.validate()?;
    echo(cli, &a.out, &cfg)?;
    let data = load_dataset(&a.manifest, cfg.d)?;
    let outcome = train(&data, &cfg)?;
    save_checkpoint(
        &Checkpoint {
            model: outcome.model,
            adam: Some(outcome.adam),
            config: Some(cfg.clone()),
            epoch: outcome.epochs,
        },
        a.out.join("checkpoint.adfc"),
    )?;
    write_loss_curve(&outcome.curve, a.out.join("loss.csv"))?;
    if let Some(last) = outcome.curve.iter().rev().find(|r| r.split == Split::Train) {
        println!(
            "{} trained {} epochs ({} steps); final train loss {:.6}",
            cfg.variant, outcome.epochs, outcome.steps, last.loss
        );
    }
    Ok(())
}

fn head_task(head: &Head) -> TaskKind {
    match head {
        Head::Abmil(_) => TaskKind::Classification,
        Head::Regressor(_) => TaskKind::Regression,
    }
}

fn load_for_checkpoint(
    ckpt: &Checkpoint,
    manifest_path: &Path,
) -> Result<adafusion_core::train::FusedDataset> {
    let manifest = load_manifest(manifest_path)?;
    let task = head_task(&ckpt.model.head);
    if task != manifest.task_kind {
        return Err(adafusion_core::Error::VariantTaskMismatch {
            expected: task.as_str(),
            actual: manifest.task_kind.as_str(),
        }
        .into());
    }
    let data = load_dataset(manifest_path, ckpt.model.spec.dim)?;
    if data.source_ids != ckpt.model.spec.source_ids {
        return Err(Error::Invalid(format!(
            "checkpoint sources {:?} differ from manifest sources {:?}",
            ckpt.model.spec.source_ids, data.source_ids
        )));
    }
    Ok(data)
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_for_checkpoint(&ckpt, &a.manifest)?;
    echo(cli, &a.out, &ckpt.model.spec)?;
    let report = evaluate(&ckpt.model, &data, a.split)?;
    write_metrics(&[(a.split, report.clone())], a.out.join("metrics.csv"))?;
    print!("{}", format_table(&[report]));
    Ok(())
}

pub fn cmd_contrib(cli: &Cli, a: &ContribArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if ckpt.model.tuner().is_none() {
        return Err(
            adafusion_core::Error::VariantHasNoTuner(ckpt.model.spec.variant.to_string()).into(),
        );
    }
    let data = load_for_checkpoint(&ckpt, &a.manifest)?;
    echo(cli, &a.out, &ckpt.model.spec)?;
    let bags: Vec<_> = data
        .bags
        .iter()
        .filter(|b| a.split.is_none_or(|s| b.split == s))
        .collect();
    let maps = bags
        .par_iter()
        .map(|b| compute_contribution_map(&ckpt.model, b).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    write_contribution_csv(&maps, a.out.join("contributions.csv"))?;
    let dir = a.out.join("heatmaps");
    create_dir(&dir)?;
    maps.par_iter().try_for_each(|m| -> Result<()> {
        write_ppm(
            &render_heatmap(m, HeatmapMode::Argmax, a.cell)?,
            dir.join(format!("{}_argmax.ppm", m.slide_id)),
        )?;
        if a.per_source {
            for (i, id) in m.source_ids.iter().enumerate() {
                let r = render_heatmap(m, HeatmapMode::Source(i), a.cell)?;
                write_ppm(&r, dir.join(format!("{}_s_{id}.ppm", m.slide_id)))?;
            }
        }
        Ok(())
    })?;
    println!(
        "wrote contributions for {} slides to {}",
        maps.len(),
        a.out.display()
    );
    Ok(())
}

pub fn synth_config(a: &SynthArgs) -> Result<SynthConfig> {
    let mut cfg = match &a.config {
        Some(p) => crate::manifest::read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(t) = a.task {
        cfg.task = match t {
            Task::Classification => TaskKind::Classification,
            Task::Regression => TaskKind::Regression,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.bags_per_class {
        cfg.bags_per_class = b;
    }
    if let Some(s) = a.signal {
        cfg.signal = s;
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = synth_config(a)?;
    echo(cli, &a.out, &cfg)?;
    let ds = generate_synthetic(&cfg)?;
    let manifest_path = write_dataset(&a.out, &ds.manifest, &ds.tables)?;
    let mut w = csv::Writer::from_path(a.out.join("truth.csv"))?;
    w.write_record(["tile_id", "phenotype", "source", "class"])?;
    for (id, t) in &ds.truth {
        w.write_record([
            id.to_string(),
            t.phenotype.to_string(),
            SynthConfig::source_id(t.source),
            t.class.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(a.out.join("truth.csv"), e))?;
    if !ds.readout.is_empty() {
        write_json(&ds.readout, &a.out.join("readout.json"))?;
    }
    println!(
        "wrote {} slides, {} tiles to {}",
        ds.manifest.slides.len(),
        ds.truth.len(),
        manifest_dir(&manifest_path).display()
    );
    Ok(())
}

pub fn cmd_bench_fps(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = ThroughputConfig {
        sources: a.sources,
        d: a.d,
        bag_sizes: bag_sizes(a.min_tiles, a.max_tiles, a.step),
        repeats: a.repeats,
        methods: a.methods.clone(),
        seed: a.seed,
        budget_secs: a.budget_secs,
    };
    echo(cli, &a.out, &cfg)?;
    let run = throughput_bench(&cfg)?;
    let mut w = csv::Writer::from_path(a.out.join("fps.csv"))?;
    w.write_record(["method", "bag_size", "fps", "repeats"])?;
    for r in &run.reports {
        for ((m, f), n) in r.bag_sizes.iter().zip(&r.fps).zip(&r.repeats) {
            w.write_record([
                r.method.clone(),
                m.to_string(),
                f.to_string(),
                n.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(a.out.join("fps.csv"), e))?;
    let mut w = csv::Writer::from_path(a.out.join("samples.csv"))?;
    w.write_record(["method", "bag_size", "repeat", "seconds"])?;
    for s in &run.samples {
        w.write_record([
            s.method.clone(),
            s.bag_size.to_string(),
            s.repeat.to_string(),
            s.seconds.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(a.out.join("samples.csv"), e))?;
    for r in &run.reports {
        println!(
            "{:<10} d={} sizes={} mean_fps={:.4}",
            r.method,
            r.d,
            r.bag_sizes.len(),
            r.mean_fps
        );
    }
    println!(
        "elapsed {:.1}s{}",
        run.elapsed_secs,
        if run.complete {
            ""
        } else {
            " (stopped by time budget)"
        }
    );
    Ok(())
}

pub fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    if let Some(out) = &a.out {
        echo(
            cli,
            out,
            serde_json::json!({ "shape": format!("{:?}", TinyShape::default()) }),
        )?;
    }
    let mut worst = 0.0f64;
    for seed in a.seed..a.seed + a.seeds.max(1) {
        let (model, sample) = tiny_instance(a.variant.clone(), TinyShape::default(), seed)?;
        let report = grad_check(&model, &sample, a.eps)?;
        if let Some(b) = report.worst() {
            println!(
                "seed {seed}: max relative error {:.3e} in {}[{}] (analytic {:.6e}, numeric {:.6e})",
                b.max_rel_error, b.name, b.worst_index, b.analytic, b.numeric
            );
        }
        worst = worst.max(report.max_rel_error());
    }
    println!(
        "{}: max relative error {worst:.3e} (tolerance {:.0e})",
        a.variant, a.tolerance
    );
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Error::GradCheckFailed {
            max: worst,
            tolerance: a.tolerance,
        })
    }
}
