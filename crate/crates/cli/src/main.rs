//! `acr`: simulate corridors, train lane models, reconstruct arrival curves
//! and run matching-rate sweeps.

mod svg;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use acr_core::bacl::{BaclModel, Mode};
use acr_core::config::KeyValues;
use acr_core::curve::LaneId;
use acr_core::experiment::{lane_samples, run_cell, train_lane, ExperimentConfig, ModelKind, Observed};
use acr_core::features::FeatureMode;
use acr_core::io;
use acr_core::metrics::{summarize, EvalReport};
use acr_core::reconstruct::{historical_acr, replay_realtime, vehicle_counts, ReconOptions, ReconstructedCurve};
use acr_core::seed::sub_seed;
use acr_core::simulator::{degrade_to_matching_rate, simulate, GroundTruth, SimConfig};

#[derive(Parser)]
#[command(name = "acr", version, about = "Lane-based arrival curve reconstruction from LPR data")]
struct Cli {
    /// key=value configuration file; `ACR_*` environment variables override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed of every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a corridor and write LPR records and ground truth.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Matching rate after degradation, in (0, 1].
        #[arg(long)]
        rate: Option<f64>,
        /// Seconds of traffic.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Train one model per downstream lane from LPR records.
    Train {
        /// Directory holding upstream.csv and downstream.csv.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the deterministic baseline instead of the Bayesian model.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, value_enum, default_value_t = Features::Lanes)]
        features: Features,
        /// Also dump the training samples of each lane.
        #[arg(long)]
        dump_samples: bool,
    },
    /// Reconstruct lane arrival curves from records and trained models.
    Reconstruct {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ReconModeArg::Historical)]
        mode: ReconModeArg,
        /// Band plot of mean and 90% interval.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Vehicle-count CSV.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Sweep matching rates and seeds and write an aggregated report.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        rates: Vec<f64>,
        /// Seeds per matching rate.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_values_t = ["bacl".to_owned(), "lcnn".to_owned(), "bacl-no-link".to_owned(), "linear".to_owned()])]
        models: Vec<String>,
        /// Per-cell scores.
        #[arg(long)]
        cells: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Lanes,
    Aggregated,
    NoLink,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ReconModeArg {
    Historical,
    Realtime,
}

/// Exit code 2: bad usage, configuration or paths.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut kv = match &cli.config {
        Some(p) => KeyValues::load(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?,
        None => KeyValues::default(),
    };
    for key in kv.apply_env(std::env::vars()) {
        log::info!("{key} overridden from the environment");
    }
    let mut cfg = kv
        .experiment_config(ExperimentConfig::new(SimConfig::pm_peak(cli.seed)))
        .map_err(|e| usage(e.to_string()))?;
    if kv.get("seed").is_none() {
        cfg.corridor.seed = cli.seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let seed = cfg.corridor.seed;
    match cli.command {
        Command::Simulate { out, rate, duration } => cmd_simulate(cfg, &out, rate, duration),
        Command::Train { records, out, deterministic, features, dump_samples } => {
            let mode = if deterministic { Mode::Deterministic } else { Mode::Bayesian };
            let features = match features {
                Features::Lanes => FeatureMode::LaneVector,
                Features::Aggregated => FeatureMode::Aggregated,
                Features::NoLink => FeatureMode::NoLinkArrivals,
            };
            cmd_train(&cfg, seed, &records, &out, mode, features, dump_samples)
        }
        Command::Reconstruct { records, models, out, mode, svg, counts } => {
            cmd_reconstruct(&cfg, seed, &records, &models, &out, mode, svg.as_deref(), counts.as_deref())
        }
        Command::Evaluate { out, rates, seeds, models, cells } => {
            cmd_evaluate(&cfg, seed, cli.jobs, &out, &rates, seeds, &models, cells.as_deref())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    let f = File::create(path).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))
}

fn lane_file(lane: &LaneId, prefix: &str, ext: &str) -> String {
    let name: String = lane.as_str().chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("{prefix}_{name}.{ext}")
}

fn cmd_simulate(cfg: ExperimentConfig, out: &Path, rate: Option<f64>, duration: Option<f64>) -> Result<ExitCode> {
    let mut sim_cfg = cfg.corridor;
    let seed = sim_cfg.seed;
    if let Some(r) = rate {
        if !(r > 0.0 && r <= 1.0) {
            return Err(usage(format!("matching rate {r} outside (0, 1]")));
        }
        sim_cfg.target_matching_rate = r;
    }
    if let Some(d) = duration {
        sim_cfg.duration = d;
    }
    sim_cfg.seed = sub_seed(seed, "simulate");
    sim_cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_dir(out)?;
    let sim = simulate(&sim_cfg)?;
    let deg = degrade_to_matching_rate(&sim.upstream, &sim.downstream, sim_cfg.target_matching_rate, sub_seed(seed, "degrade"))?;
    io::write_lpr(create(&out.join("upstream.csv"))?, &deg.upstream)?;
    io::write_lpr(create(&out.join("downstream.csv"))?, &deg.downstream)?;
    io::write_truth(create(&out.join("truth.csv"))?, &sim.truth)?;
    println!("vehicles {}", sim.truth.vehicles.len());
    println!("merges {}", sim.truth.merges());
    println!("upstream records {}", deg.upstream.len());
    println!("downstream records {}", deg.downstream.len());
    println!("matchable {}", deg.matchable);
    println!("kept {}", deg.kept);
    Ok(ExitCode::SUCCESS)
}

fn read_records(cfg: &ExperimentConfig, dir: &Path) -> Result<Observed> {
    let read = |name: &str| {
        let p = dir.join(name);
        io::read_lpr_file(&p).map_err(|e| usage(format!("{}: {e}", p.display())))
    };
    let up = read("upstream.csv")?;
    let down = read("downstream.csv")?;
    Ok(Observed::from_records(&cfg.corridor.layout, &up, &down, GroundTruth { vehicles: Vec::new() })?)
}

fn cmd_train(
    cfg: &ExperimentConfig,
    seed: u64,
    records: &Path,
    out: &Path,
    mode: Mode,
    features: FeatureMode,
    dump_samples: bool,
) -> Result<ExitCode> {
    let obs = read_records(cfg, records)?;
    create_dir(out)?;
    for lane in cfg.lanes() {
        let samples = lane_samples(&obs, &lane, &cfg.corridor, &cfg.samples)?;
        if dump_samples {
            io::write_samples(create(&out.join(lane_file(&lane, "samples", "csv")))?, &obs.upstream.lanes().to_vec(), &samples)?;
        }
        let Some((model, report)) = train_lane(&samples, &cfg.samples, features, mode, &cfg.hyper, sub_seed(seed, &format!("train/{lane}")))?
        else {
            log::warn!("lane {lane}: fewer than 2 matched vehicles, skipped");
            eprintln!("warning: lane {lane} skipped, not enough matched vehicles");
            continue;
        };
        model.save(&out.join(lane_file(&lane, "model", "json")))?;
        let mut w = csv::Writer::from_writer(create(&out.join(lane_file(&lane, "loss", "csv")))?);
        w.write_record(["epoch", "train_loss", "val_nll"])?;
        for e in &report.epochs {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_nll.to_string()])?;
        }
        w.flush()?;
        println!(
            "{lane}: {} samples, {} epochs, best epoch {}",
            report.n_train + report.n_val,
            report.epochs.len(),
            report.best_epoch
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_reconstruct(
    cfg: &ExperimentConfig,
    seed: u64,
    records: &Path,
    models: &Path,
    out: &Path,
    mode: ReconModeArg,
    svg_path: Option<&Path>,
    counts_path: Option<&Path>,
) -> Result<ExitCode> {
    let obs = read_records(cfg, records)?;
    let signal = &cfg.corridor.upstream_signal;
    let opts = ReconOptions { seed: sub_seed(seed, "predict"), ..cfg.recon.clone() };
    let mut curves: Vec<ReconstructedCurve> = Vec::new();
    for lane in cfg.lanes() {
        let path = models.join(lane_file(&lane, "model", "json"));
        if !path.exists() {
            return Err(usage(format!("missing model artifact {}", path.display())));
        }
        let model = BaclModel::load(&path, None).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let anchors = obs.lane_pairs(&lane);
        let curve = match mode {
            ReconModeArg::Historical => {
                if anchors.len() < 2 {
                    eprintln!("warning: lane {lane} skipped, fewer than 2 matched vehicles");
                    continue;
                }
                historical_acr(&lane, &anchors, &obs.upstream, &model, signal, &opts)?
            }
            ReconModeArg::Realtime => {
                let end = anchors.iter().map(|p| p.t_down).fold(0.0, f64::max).max(cfg.corridor.duration);
                let n = (end / opts.step).floor() as usize;
                let queries: Vec<f64> = (1..=n).map(|k| k as f64 * opts.step).collect();
                replay_realtime(&lane, &anchors, &obs.upstream, &model, signal, &queries, &opts)?.0
            }
        };
        curves.push(curve);
    }
    io::write_reconstruction(create(out)?, &curves)?;
    if let Some(p) = counts_path {
        let rows: Vec<_> = curves
            .iter()
            .filter_map(|c| obs.departures.get(&c.lane).map(|d| (c.lane.clone(), c.mode.as_str(), vehicle_counts(c, d))))
            .collect();
        io::write_counts(create(p)?, &rows)?;
    }
    if let Some(p) = svg_path {
        use std::io::Write;
        create(p)?.write_all(svg::band_plot(&curves).as_bytes())?;
    }
    for c in &curves {
        println!("{}: {} points, {} anchors, {} fallbacks", c.lane, c.points.len(), c.anchors.len(), c.fallbacks);
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cfg: &ExperimentConfig,
    seed: u64,
    jobs: usize,
    out: &Path,
    rates: &[f64],
    seeds: u64,
    models: &[String],
    cells_path: Option<&Path>,
) -> Result<ExitCode> {
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(usage(format!("matching rate {r} outside (0, 1]")));
    }
    if seeds == 0 {
        return Err(usage("need at least one seed"));
    }
    let kinds = models
        .iter()
        .map(|m| ModelKind::parse(m).ok_or_else(|| usage(format!("unknown model {m}; expected bacl, lcnn, bacl-no-link or linear"))))
        .collect::<Result<Vec<_>>>()?;
    let cell_seeds: Vec<u64> = (0..seeds).map(|i| sub_seed(seed, &format!("cell/{i}"))).collect();
    let cells: Vec<(f64, u64)> = rates.iter().flat_map(|&r| cell_seeds.iter().map(move |&s| (r, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<_> = pool.install(|| cells.par_iter().map(|&(r, s)| ((r, s), run_cell(cfg, &kinds, r, s))).collect());

    let mut reports: Vec<EvalReport> = Vec::new();
    let mut failed = 0;
    for ((r, s), res) in results {
        match res {
            Ok(v) => reports.extend(v),
            Err(e) => {
                failed += 1;
                eprintln!("cell rate {r} seed {s} failed: {e}");
            }
        }
    }
    let order = |m: &str| kinds.iter().position(|k| k.label() == m).unwrap_or(usize::MAX);
    reports.sort_by(|a, b| {
        order(&a.model)
            .cmp(&order(&b.model))
            .then(a.matching_rate.total_cmp(&b.matching_rate))
            .then(a.seed.cmp(&b.seed))
            .then(a.lane.cmp(&b.lane))
    });
    let summary = summarize(&reports);
    io::write_summary(create(out)?, &summary)?;
    if let Some(p) = cells_path {
        io::write_cells(create(p)?, &reports)?;
    }
    for row in &summary {
        println!(
            "{:<13} rate {:.2}  rmse {:.3} ± {:.3}  crps {:.3} ± {:.3}  coverage {:.3}",
            row.model, row.matching_rate, row.rmse_mean, row.rmse_std, row.crps_mean, row.crps_std, row.coverage
        );
    }
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", cells.len());
        if reports.is_empty() {
            bail!("every cell failed");
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
