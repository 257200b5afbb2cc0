use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use m2r2_core::crl::{write_h_csv, HTableRows};
use m2r2_core::dataio::{apply_mask, generate_mask, generate_synthetic, load_dataset, save_dataset, Dataset};
use m2r2_core::harness::{
    default_seeds, load_model, mean_variance, parse_grid, run_grad_suite, run_once, save_model, sweep,
    write_embeddings, write_json, write_summary_csv, write_sweep_csv, ExperimentConfig, MetricsReport, RunDir,
};
use m2r2_core::m2r2::{self, Mode};

#[derive(Parser)]
#[command(name = "m2r2", version, about = "Missing-modality emotion recognition experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Clone)]
struct Common {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sweeps and ablations.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSON lines).
    GenData {
        #[arg(long)]
        n: Option<usize>,
        /// Feature noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        /// Probability that a turn responds to the previous speaker.
        #[arg(long)]
        coupling: Option<f64>,
    },
    /// Drop modality slots to reach a missing rate.
    Mask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eta: f64,
    },
    /// Split, train and evaluate on the held-out part.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Evaluate a trained model on every conversation of a dataset.
    Test {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train and test over a grid of missing rates and seeds.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `start:end:step` or a comma-separated list.
        #[arg(long, default_value = "0.0:0.6:0.1")]
        eta: String,
        /// Number of seeds, counted up from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Pipeline variant; the classifier alone by default.
        #[arg(long, value_parser = parse_mode, default_value = "no_m2r2")]
        mode: Mode,
    },
    /// Compare the three pipeline variants at one missing rate.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Fit representations for a dataset and write them as CSV.
    ExportEmbeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// The dataset from `--data`, or one generated from the configuration.
fn dataset(path: Option<&Path>, cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(match path {
        Some(p) => load_dataset(p).with_context(|| format!("reading dataset {}", p.display()))?,
        None => generate_synthetic(&cfg.data, cfg.num_conversations)?,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = cli.common;
    if common.jobs == 0 {
        bail!("--jobs must be >= 1");
    }
    let mut cfg = load_config(&common)?;
    match cli.command {
        Command::GenData { n, noise, coupling } => {
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            if let Some(n) = n {
                cfg.num_conversations = n;
            }
            if let Some(x) = noise {
                cfg.data.noise_std = x;
            }
            if let Some(x) = coupling {
                cfg.data.context_coupling = x;
            }
            cfg.validate()?;
            let d = generate_synthetic(&cfg.data, cfg.num_conversations)?;
            let out = out_path(&common, "data.jsonl");
            save_dataset(&d, &out)?;
            println!("wrote {} conversations ({} turns) to {}", d.conversations.len(), d.total_turns(), out.display());
        }
        Command::Mask { data, eta } => {
            let d = load_dataset(&data)?;
            let masks = generate_mask(&d, eta, common.seed.unwrap_or(0))?;
            let masked = apply_mask(&d, &masks)?;
            let out = out_path(&common, "masked.jsonl");
            save_dataset(&masked, &out)?;
            println!("missing rate {:.4}, wrote {}", masked.missing_rate(), out.display());
        }
        Command::Train { data, eta, mode } => {
            if let Some(s) = common.seed {
                cfg.model.seed = s;
            }
            if eta.is_some() {
                cfg.eta = eta;
            }
            if let Some(m) = mode {
                cfg.model.mode = m;
            }
            cfg.validate()?;
            let d = dataset(data.as_deref(), &cfg)?;
            train_command(&d, &cfg, &out_path(&common, "run"))?;
        }
        Command::Test { data, model } => {
            let d = load_dataset(&data)?;
            let mut model = load_model(&model)?;
            if let Some(s) = common.seed {
                model.config.seed = s;
            }
            let outcome = m2r2::test(&d, &model)?;
            let out = out_path(&common, "test");
            fs::create_dir_all(&out)?;
            write_json(&out.join("metrics.json"), &outcome.metrics)?;
            write_json(&out.join("predictions.json"), &outcome.predictions)?;
            println!("weighted accuracy {:.4}, weighted F1 {:.4}", outcome.metrics.weighted_accuracy, outcome.metrics.weighted_f1);
        }
        Command::Sweep { data, eta, seeds, mode } => {
            cfg.validate()?;
            let grid = parse_grid(&eta)?;
            let base = common.seed.unwrap_or(cfg.model.seed);
            let seed_list: Vec<u64> = (0..seeds).map(|i| base + i).collect();
            let d = dataset(data.as_deref(), &cfg)?;
            let out = out_path(&common, "sweep");
            let rd = Mutex::new(RunDir::create(&out)?);
            write_json(&out.join("config.json"), &cfg)?;
            let result = sweep(&d, &grid, &seed_list, mode, &cfg, common.jobs, &|eta, seed, r| {
                let line = match r {
                    Ok(m) => format!("eta {eta} seed {seed}: weighted accuracy {:.4}", m.weighted_accuracy),
                    Err(e) => format!("eta {eta} seed {seed}: failed: {e}"),
                };
                let _ = rd.lock().expect("log lock").log(&line);
            })?;
            write_sweep_csv(fs::File::create(out.join("sweep.csv"))?, &result)?;
            write_summary_csv(fs::File::create(out.join("summary.csv"))?, &result)?;
            write_json(&out.join("sweep.json"), &result)?;
            for s in &result.summary {
                println!("eta {:.2}: mean accuracy {:.4} (variance {:.6}, {} runs)", s.eta, s.mean_accuracy, s.variance, s.runs);
            }
            if !result.failures.is_empty() {
                for f in &result.failures {
                    eprintln!("run eta {} seed {} failed: {}", f.eta, f.seed, f.error);
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablate { data, eta, seeds } => {
            cfg.validate()?;
            let base = common.seed.unwrap_or(cfg.model.seed);
            let d = dataset(data.as_deref(), &cfg)?;
            ablate_command(&d, &cfg, eta, (0..seeds).map(|i| base + i).collect(), common.jobs, &out_path(&common, "ablate"))?;
        }
        Command::ExportEmbeddings { data, model } => {
            let d = load_dataset(&data)?;
            let model = load_model(&model)?;
            let seed = common.seed.unwrap_or(model.config.seed);
            let out = out_path(&common, "embeddings.csv");
            write_embeddings(&model, &d, seed, fs::File::create(&out)?)?;
            println!("wrote {}", out.display());
        }
        Command::GradCheck { seeds, inject_fault } => {
            let report = run_grad_suite(&default_seeds(common.seed.unwrap_or(0), seeds), inject_fault)?;
            for c in report.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAIL {} seed {}: relative error {:.3e} (tolerance {:.0e})", c.name, c.seed, c.max_rel_err, c.tol);
            }
            println!(
                "{} checks, max op error {:.3e}, max composite error {:.3e}: {}",
                report.checks.len(),
                report.max_op_err,
                report.max_composite_err,
                if report.passed { "pass" } else { "FAIL" }
            );
            if let Some(out) = &common.out {
                write_json(out, &report)?;
            }
            if !report.passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train_command(d: &Dataset, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut rd = RunDir::create(out)?;
    write_json(&rd.path("config.json"), cfg)?;
    let seed = cfg.model.seed;
    let r = run_once(d, cfg, cfg.eta, seed, cfg.model.mode)?;
    for rec in &r.history {
        rd.log(&format!(
            "iteration {}: val accuracy {:.4}, PANet loss {:.4}, best {}",
            rec.iteration, rec.val_accuracy, rec.panet_loss, rec.best_iteration
        ))?;
    }
    rd.write_history(&r.history)?;
    save_model(&r.model, &rd.path("model"))?;
    write_json(&rd.path("metrics.json"), &r.outcome.metrics)?;
    if let Some(h) = &r.outcome.representations {
        let test = m2r2_core::harness::prepare(d, cfg, cfg.eta, seed)?.test;
        let labels: Vec<Vec<usize>> = test.conversations.iter().map(|c| c.labels()).collect();
        let rows: Vec<HTableRows<'_>> = test
            .conversations
            .iter()
            .zip(h)
            .zip(&labels)
            .map(|((c, h), labels)| HTableRows { id: &c.id, labels, h })
            .collect();
        write_h_csv(fs::File::create(rd.path("embeddings.csv"))?, &rows)?;
    }
    let m = &r.outcome.metrics;
    rd.log(&format!("test weighted accuracy {:.4}, weighted F1 {:.4}", m.weighted_accuracy, m.weighted_f1))?;
    println!(
        "{} iterations (best {}), test weighted accuracy {:.4}, weighted F1 {:.4}",
        r.history.len(),
        r.model.best_iteration,
        m.weighted_accuracy,
        m.weighted_f1
    );
    Ok(())
}

#[derive(Serialize)]
struct ModeSummary {
    mode: Mode,
    mean_accuracy: f64,
    variance: f64,
    mean_f1: f64,
}

fn ablate_command(d: &Dataset, cfg: &ExperimentConfig, eta: f64, seeds: Vec<u64>, jobs: usize, out: &Path) -> Result<()> {
    let modes = [Mode::NoPartyAttention, Mode::NoM2r2, Mode::Full];
    let mut rd = RunDir::create(out)?;
    write_json(&rd.path("config.json"), cfg)?;
    let pairs: Vec<(Mode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let work = |&(mode, seed): &(Mode, u64)| run_once(d, cfg, Some(eta), seed, mode).map(|r| r.outcome.metrics);
    let results: Vec<m2r2_core::Result<MetricsReport>> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
        pool.install(|| pairs.par_iter().map(work).collect())
    } else {
        pairs.iter().map(work).collect()
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(fs::File::create(rd.path("ablation.csv"))?);
    w.write_record(["mode", "seed", "weighted_acc", "weighted_f1"])?;
    let mut per_mode: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); modes.len()];
    for ((mode, seed), r) in pairs.iter().zip(results) {
        let m = r.with_context(|| format!("{} seed {seed}", mode.name()))?;
        rd.log(&format!("{} seed {seed}: weighted accuracy {:.4}", mode.name(), m.weighted_accuracy))?;
        w.write_record([
            mode.name().to_string(),
            seed.to_string(),
            m2r2_core::harness::fmt_sig6(m.weighted_accuracy),
            m2r2_core::harness::fmt_sig6(m.weighted_f1),
        ])?;
        let k = modes.iter().position(|x| x == mode).expect("known mode");
        per_mode[k].0.push(m.weighted_accuracy);
        per_mode[k].1.push(m.weighted_f1);
    }
    w.flush()?;
    let summary: Vec<ModeSummary> = modes
        .iter()
        .zip(&per_mode)
        .map(|(&mode, (acc, f1))| {
            let (mean_accuracy, variance) = mean_variance(acc);
            ModeSummary {
                mode,
                mean_accuracy,
                variance,
                mean_f1: mean_variance(f1).0,
            }
        })
        .collect();
    write_json(&rd.path("metrics.json"), &summary)?;
    for s in &summary {
        println!("{:<20} mean accuracy {:.4} (variance {:.6})", s.mode.name(), s.mean_accuracy, s.variance);
    }
    Ok(())
}
