//! Command implementations behind the `relpot` binary.

pub mod config;
pub mod error;
pub mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use log::info;
use relpot::analysis::{evaluate_forecast, forecast_batch, node_energy_scores_batch, ood_report, recombine, renormalize, steer};
use relpot::horizons::{build_horizons_dataset, EphemerisClient, FixtureTransport, HttpTransport, Transport, CACHE_ENV};
use relpot::sim::{derive_seed, make_dataset};
use relpot::train::train;
use relpot::{
    load_checkpoint, load_dataset, positions_from_velocities, save_checkpoint, save_dataset, Checkpoint, LabelKind,
    NormStats, SplitSpec, Trajectory, TrajectoryDataset,
};
use serde_json::json;

pub use config::RunConfig;
pub use error::CliError;
use plot::{plot_trajectories, PlotOptions, Series};

#[derive(Debug, Parser)]
#[command(name = "relpot", version, about = "Relational potential models for interacting particle systems")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=1e-3`. Applied after
    /// the file, in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a particle dataset from the `[sim]` and `[data]` sections.
    GenData,
    /// Download (or read cached) ephemerides and build the 6-D dataset.
    FetchHorizons {
        /// Response cache; defaults to $RELPOT_HORIZONS_CACHE, then the run directory.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Serve responses from `<target>@<origin>.txt` files instead of the network.
        #[arg(long)]
        offline: Option<PathBuf>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Forecast the test split and compare against the static baseline.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score nodes of a mixed-law dataset and detect the foreign ones.
    Ood {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample with potentials of two models on complementary edge sets.
    Recombine {
        #[arg(long)]
        base_checkpoint: PathBuf,
        #[arg(long)]
        other_checkpoint: PathBuf,
        #[arg(long)]
        base_data: PathBuf,
        #[arg(long)]
        other_data: PathBuf,
    },
    /// Forecast with extra test-time potentials.
    Steer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw dataset trajectories, with forecasts when a checkpoint is given.
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::FetchHorizons { .. } => "fetch-horizons",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ood { .. } => "ood",
            Command::Recombine { .. } => "recombine",
            Command::Steer { .. } => "steer",
            Command::Plot { .. } => "plot",
        }
    }
}

/// Output directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `<parent>/<command>-<config hash>-<unix seconds>`, suffixed if taken.
    pub fn create(parent: &Path, command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let base = format!("{command}-{}-{ts}", cfg.hash());
        let mut path = parent.join(&base);
        let mut k = 1;
        while path.exists() {
            k += 1;
            path = parent.join(format!("{base}-{k}"));
        }
        fs::create_dir_all(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let dir = RunDir { path };
        dir.write_text("config.toml", &cfg.to_toml())?;
        Ok(dir)
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.join(name);
        fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }

    /// Writes `metrics.json` with the schema version and command name.
    pub fn write_metrics(&self, command: &str, body: serde_json::Value) -> Result<(), CliError> {
        let doc = json!({ "schema_version": config::SCHEMA_VERSION, "command": command, "metrics": body });
        self.write_text("metrics.json", &(serde_json::to_string_pretty(&doc)? + "\n"))
    }
}

/// Runs one command; returns its run directory.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let name = cli.command.name();
    let dir = RunDir::create(&cli.runs_dir, name, &cfg)?;
    info!("{name}: writing to {}", dir.path.display());
    let metrics = match &cli.command {
        Command::GenData => gen_data(&cfg, &dir)?,
        Command::FetchHorizons { cache, offline } => fetch_horizons(&cfg, &dir, cache.clone(), offline.as_deref())?,
        Command::Train { data } => train_cmd(&cfg, &dir, data)?,
        Command::Eval { data, checkpoint } => eval_cmd(&cfg, &dir, data, checkpoint)?,
        Command::Ood { data, checkpoint } => ood_cmd(&cfg, &dir, data, checkpoint)?,
        Command::Recombine { base_checkpoint, other_checkpoint, base_data, other_data } => {
            recombine_cmd(&cfg, &dir, base_checkpoint, other_checkpoint, base_data, other_data)?
        }
        Command::Steer { data, checkpoint } => steer_cmd(&cfg, &dir, data, checkpoint)?,
        Command::Plot { data, checkpoint } => plot_cmd(&cfg, &dir, data, checkpoint.as_deref())?,
    };
    dir.write_metrics(name, metrics)?;
    Ok(dir.path)
}

fn dataset_summary(ds: &TrajectoryDataset) -> serde_json::Value {
    let (t, n, d) = ds.shape();
    json!({
        "count": ds.len(),
        "T": t, "N": n, "D": d,
        "kind": ds.meta.kind,
        "dt_unit": ds.meta.dt_unit,
        "splits": { "train": ds.splits.train.len(), "val": ds.splits.val.len(), "test": ds.splits.test.len() },
    })
}

fn gen_data(cfg: &RunConfig, dir: &RunDir) -> Result<serde_json::Value, CliError> {
    let ds = make_dataset(&cfg.sim, cfg.data.counts(), cfg.data.t_obs)?;
    save_dataset(&ds, dir.join("dataset"))?;
    Ok(dataset_summary(&ds))
}

fn fetch_horizons(
    cfg: &RunConfig,
    dir: &RunDir,
    cache: Option<PathBuf>,
    offline: Option<&Path>,
) -> Result<serde_json::Value, CliError> {
    let cache = cache
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| dir.join("cache"));
    fn build<T: Transport>(cfg: &RunConfig, t: T, cache: PathBuf) -> Result<TrajectoryDataset, CliError> {
        Ok(build_horizons_dataset(&cfg.horizons, &EphemerisClient::new(t, Some(cache)))?)
    }
    let ds = match offline {
        Some(d) => build(cfg, FixtureTransport::new(d), cache.clone())?,
        None => build(cfg, HttpTransport::default(), cache.clone())?,
    };
    save_dataset(&ds, dir.join("dataset"))?;
    let mut summary = dataset_summary(&ds);
    summary["cache"] = json!(cache.display().to_string());
    Ok(summary)
}

fn train_cmd(cfg: &RunConfig, dir: &RunDir, data: &Path) -> Result<serde_json::Value, CliError> {
    let ds = load_dataset(data)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let mut io_err = None;
    let ckpt = train(&ds, &cfg.model, &cfg.train, &mut |rec, val| {
        let line = json!({ "train": rec, "validation": val });
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
        if rec.iteration % 50 == 0 || val.is_some() {
            info!(
                "iter {} loss {:.5} mse {:.5} steps {}{}",
                rec.iteration,
                rec.metrics.loss,
                rec.metrics.mse,
                rec.metrics.steps,
                val.map(|v| format!(" val {:.5}", v.mse_mean)).unwrap_or_default()
            );
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::Io(format!("{}: {e}", log_path.display())));
    }
    save_checkpoint(&ckpt, dir.join("checkpoint"))?;
    Ok(json!({
        "iterations": ckpt.iteration,
        "best_validation_mse": ckpt.best_val,
        "final": ckpt.history.last(),
        "validation": ckpt.validation,
    }))
}

/// Dataset trajectories expressed in the checkpoint's normalization.
fn aligned(ds: &TrajectoryDataset, ckpt: &Checkpoint, idx: &[usize]) -> Result<Vec<Trajectory>, CliError> {
    let (_, _, d) = ds.shape();
    if d != ckpt.model.cfg.state_dim {
        return Err(CliError::Config(format!("dataset has D={d}, checkpoint expects {}", ckpt.model.cfg.state_dim)));
    }
    idx.iter()
        .map(|&i| {
            let t = ds.trajectories.get(i).ok_or_else(|| CliError::Config(format!("trajectory index {i} out of range")))?;
            Ok(if ds.stats == ckpt.stats { t.clone() } else { renormalize(t, &ds.stats, &ckpt.stats)? })
        })
        .collect()
}

fn limited(idx: &[usize], limit: Option<usize>) -> Vec<usize> {
    idx.iter().copied().take(limit.unwrap_or(usize::MAX)).collect()
}

/// Raw positions `[T, N, D/2]` accumulated from velocities, starting at the
/// raw position of the first state.
fn accumulated(traj: &Trajectory, stats: &NormStats, dt_unit: f64) -> Result<Vec<f64>, CliError> {
    let h = traj.dim() / 2;
    let p0: Vec<f64> = (0..traj.nodes())
        .flat_map(|i| (0..h).map(move |k| (i, k)))
        .map(|(i, k)| traj.at(0, i, k) as f64 * stats.std[k] + stats.mean[k])
        .collect();
    Ok(positions_from_velocities(traj, &p0, stats, dt_unit)?)
}

fn plot_path(cfg: &RunConfig, dir: &RunDir, stem: &str) -> PathBuf {
    dir.join(&format!("{stem}.{}", cfg.plot.format))
}

/// Truth over `[0, t_total)` and, when given, the predicted continuation
/// joined to the last clamped state.
fn forecast_series(
    cfg: &RunConfig,
    truth: &Trajectory,
    pred: Option<&Trajectory>,
    window: &SplitSpec,
    stats: &NormStats,
    dt_unit: f64,
) -> Result<Vec<Series>, CliError> {
    let full = truth.slice_time(0, window.t_total)?;
    let gt = accumulated(&full, stats, dt_unit)?;
    let (n, h) = (truth.nodes(), truth.dim() / 2);
    let mut out = vec![Series::from_positions("ground truth", &gt, window.t_total, n, cfg.plot.coords)?];
    if let Some(p) = pred {
        let anchor = window.predicted().start - 1;
        let p0 = gt[anchor * n * h..(anchor + 1) * n * h].to_vec();
        let mut joined = truth.slice_time(anchor, anchor + 1)?.states().to_vec();
        joined.extend_from_slice(p.states());
        let path = Trajectory::new(p.timesteps() + 1, n, truth.dim(), joined, false)?;
        let pos = positions_from_velocities(&path, &p0, stats, dt_unit)?;
        let mut s = Series::from_positions("prediction", &pos, p.timesteps() + 1, n, cfg.plot.coords)?;
        s.markers = true;
        out.push(s);
    }
    Ok(out)
}

fn eval_cmd(cfg: &RunConfig, dir: &RunDir, data: &Path, checkpoint: &Path) -> Result<serde_json::Value, CliError> {
    let ds = load_dataset(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let window = cfg.eval.window.unwrap_or(ckpt.train_cfg.window);
    let idx = limited(&ds.splits.test, cfg.eval.limit);
    let trajs = aligned(&ds, &ckpt, &idx)?;
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let horizons: Vec<usize> = cfg.eval.horizons.iter().copied().filter(|&h| h <= window.horizon()).collect();
    let seed = derive_seed(cfg.train.seed, 0xE7A1);
    let report = evaluate_forecast(&ckpt.model, &refs, &window, &cfg.sampler, &horizons, cfg.eval.batch_size, seed)?;
    for (k, t) in refs.iter().take(cfg.eval.plots).enumerate() {
        let pred = forecast_batch(&ckpt.model, &[t], &window, &cfg.sampler, &[derive_seed(seed, k as u64)])?.remove(0);
        let series = forecast_series(cfg, t, Some(&pred), &window, &ckpt.stats, ckpt.dt_unit)?;
        let opts = PlotOptions { title: format!("test trajectory {}", idx[k]), ..PlotOptions::default() };
        plot_trajectories(&series, &opts, &plot_path(cfg, dir, &format!("forecast_{}", idx[k])))?;
    }
    let ratio: serde_json::Map<String, serde_json::Value> = report
        .mse_at
        .iter()
        .map(|(h, m)| (h.to_string(), json!(m / report.baseline_mse_at[h])))
        .collect();
    Ok(json!({ "window": window, "report": report, "ratio_to_static": ratio }))
}

fn ood_cmd(cfg: &RunConfig, dir: &RunDir, data: &Path, checkpoint: &Path) -> Result<serde_json::Value, CliError> {
    let ds = load_dataset(data)?;
    if ds.label_kind() != LabelKind::MixedForceType {
        return Err(CliError::Config(format!("ood needs a mixed dataset, got labels {:?}", ds.label_kind())));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let window = ckpt.train_cfg.window;
    let idx = limited(&(0..ds.len()).collect::<Vec<_>>(), cfg.ood.limit);
    let trajs = aligned(&ds, &ckpt, &idx)?;
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let labels: Vec<Vec<bool>> = idx.iter().map(|&i| ds.labels[i].values.iter().map(|&v| v > 0.5).collect()).collect();
    let calibration = ((idx.len() as f64 * cfg.ood.calibration_fraction).round() as usize).clamp(1, idx.len().saturating_sub(1));
    let report = ood_report(&ckpt.model, &refs, &labels, &window, calibration, cfg.ood.batch_size)?;
    for k in 0..cfg.ood.plots.min(refs.len()) {
        let energy = node_energy_scores_batch(&ckpt.model, &refs[k..k + 1], &window)?.remove(0);
        let series = forecast_series(cfg, refs[k], None, &window, &ckpt.stats, ckpt.dt_unit)?;
        let opts = PlotOptions {
            title: format!("node energy, trajectory {}", idx[k]),
            node_groups: Some(labels[k].iter().map(|&l| l as usize).collect()),
            node_energy: Some(energy),
        };
        plot_trajectories(&series, &opts, &plot_path(cfg, dir, &format!("ood_{}", idx[k])))?;
    }
    Ok(json!({ "window": window, "calibration_trajectories": calibration, "report": report }))
}

fn recombine_cmd(
    cfg: &RunConfig,
    dir: &RunDir,
    base_checkpoint: &Path,
    other_checkpoint: &Path,
    base_data: &Path,
    other_data: &Path,
) -> Result<serde_json::Value, CliError> {
    let base = load_checkpoint(base_checkpoint)?;
    let other = load_checkpoint(other_checkpoint)?;
    let base_ds = load_dataset(base_data)?;
    let other_ds = load_dataset(other_data)?;
    // both models act on states in the base normalization
    let bt = aligned(&base_ds, &base, &[cfg.recombine.base_index])?.remove(0);
    let ot = aligned(&other_ds, &base, &[cfg.recombine.other_index])?.remove(0);
    let t = bt.timesteps().min(ot.timesteps());
    let window = cfg.recombine.window.unwrap_or(SplitSpec { t_obs: t, t_init: 1, t_total: t, start: Some(0) });
    let seed = derive_seed(cfg.train.seed, 0x2EC0);
    let r = recombine(&base.model, &other.model, &bt, &ot, &cfg.recombine.swap_nodes, &window, &cfg.sampler, seed)?;
    let energy = |traj: &Trajectory| -> Result<(f64, f64), CliError> {
        let eb = base.model.energy.evaluate(&base.model.params, traj, &r.base_latents, &r.base_mask)?.total;
        let eo = other.model.energy.evaluate(&other.model.params, traj, &r.swap_latents, &r.swap_mask)?.total;
        Ok((eb, eo))
    };
    let (b0, o0) = energy(&r.initial)?;
    let (b1, o1) = energy(&r.sample)?;
    let pos = accumulated(&r.sample, &base.stats, base.dt_unit)?;
    let mut groups = vec![0usize; bt.nodes()];
    for &i in &cfg.recombine.swap_nodes {
        groups[i] = 1;
    }
    let series = [Series::from_positions("recombined", &pos, r.sample.timesteps(), bt.nodes(), cfg.plot.coords)?];
    let opts = PlotOptions { title: "recombination".into(), node_groups: Some(groups), node_energy: None };
    plot_trajectories(&series, &opts, &plot_path(cfg, dir, "recombination"))?;
    dir.write_text("sample.json", &serde_json::to_string(&json!({ "T": r.sample.timesteps(), "N": r.sample.nodes(), "D": r.sample.dim(), "states": r.sample.states() }))?)?;
    Ok(json!({
        "window": window,
        "swap_nodes": cfg.recombine.swap_nodes,
        "swapped_potentials": r.swap_mask.count(),
        "base_energy": { "initial": b0, "final": b1 },
        "swapped_energy": { "initial": o0, "final": o1 },
    }))
}

fn steer_cmd(cfg: &RunConfig, dir: &RunDir, data: &Path, checkpoint: &Path) -> Result<serde_json::Value, CliError> {
    let ds = load_dataset(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let window = ckpt.train_cfg.window;
    let idx = limited(&ds.splits.test, cfg.steer.limit);
    let trajs = aligned(&ds, &ckpt, &idx)?;
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let seed = derive_seed(cfg.train.seed, 0x57EE);
    let out = steer(
        &ckpt.model,
        &refs,
        &window,
        &cfg.steer.potentials,
        &cfg.sampler,
        &ckpt.stats,
        ckpt.dt_unit,
        &cfg.steer.geometry,
        cfg.steer.batch_size,
        seed,
    )?;
    let plain = steer(&ckpt.model, &refs, &window, &[], &cfg.sampler, &ckpt.stats, ckpt.dt_unit, &cfg.steer.geometry, cfg.steer.batch_size, seed)?;
    for (k, s) in out.samples.iter().take(cfg.steer.plots).enumerate() {
        let pred = s.slice_time(window.t_init, s.timesteps())?;
        let series = forecast_series(cfg, refs[k], Some(&pred), &window, &ckpt.stats, ckpt.dt_unit)?;
        let opts = PlotOptions { title: format!("steered forecast {}", idx[k]), ..PlotOptions::default() };
        plot_trajectories(&series, &opts, &plot_path(cfg, dir, &format!("steer_{}", idx[k])))?;
    }
    Ok(json!({ "potentials": cfg.steer.potentials, "steered": out.metrics, "unsteered": plain.metrics }))
}

fn plot_cmd(cfg: &RunConfig, dir: &RunDir, data: &Path, checkpoint: Option<&Path>) -> Result<serde_json::Value, CliError> {
    let ds = load_dataset(data)?;
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    let mut files = Vec::new();
    for &i in &cfg.plot.indices {
        let truth = ds.trajectories.get(i).ok_or_else(|| CliError::Config(format!("trajectory index {i} out of range")))?;
        let series = match &ckpt {
            Some(c) => {
                let t = aligned(&ds, c, &[i])?.remove(0);
                let w = c.train_cfg.window;
                let pred = forecast_batch(&c.model, &[&t], &w, &cfg.sampler, &[derive_seed(cfg.train.seed, i as u64)])?.remove(0);
                forecast_series(cfg, &t, Some(&pred), &w, &c.stats, c.dt_unit)?
            }
            None => {
                let t = truth.timesteps();
                let w = SplitSpec { t_obs: t, t_init: 1, t_total: t, start: Some(0) };
                forecast_series(cfg, truth, None, &w, &ds.stats, ds.meta.dt_unit)?
            }
        };
        let groups = match ds.label_kind() {
            LabelKind::MixedForceType | LabelKind::Charges => {
                Some(ds.labels[i].values.iter().map(|&v| (v > 0.0) as usize).collect())
            }
            _ => None,
        };
        let path = plot_path(cfg, dir, &format!("trajectory_{i}"));
        let opts = PlotOptions { title: format!("trajectory {i}"), node_groups: groups, node_energy: None };
        plot_trajectories(&series, &opts, &path)?;
        files.push(path.display().to_string());
    }
    Ok(json!({ "files": files }))
}
