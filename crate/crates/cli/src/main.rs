mod io;
mod svg;

use anyhow::{Context, Result};
use causal_flow::checkpoint::{Checkpoint, CheckpointError};
use causal_flow::config::{ConfigError, ExperimentConfig};
use causal_flow::data::{ContextStats, DataError, SeriesBatch};
use causal_flow::experiment::{a3_experiment, a3_ratio, evaluate, EvalReport, ExperimentError, Regime, RegimeReport};
use causal_flow::forecaster::{
    bands, counterfactual, forecast, score_trajectory, write_rollouts_csv, write_scores_csv, ForecastError,
    Rollout,
};
use causal_flow::graph::InterventionSchedule;
use causal_flow::metrics::{mean_std, realization_rmse, trajectory_mmd, MetricError, MmdConfig};
use causal_flow::model::FlowModel;
use causal_flow::rng::{mix, tag};
use causal_flow::scm::{make_dataset, ScmError, ScmSpec};
use causal_flow::trainer::{train, LossRecord, TrainError, TrainState};
use clap::{Args, Parser, Subcommand};
use io::{CliError, Split};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cflow", version, about = "Causal flow forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Comma-separated window indices.
    #[arg(long)]
    windows: Option<String>,
    /// Use only the first N windows.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Clone)]
struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Intervention schedule CSV `node,t,value` with 1-based t.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Realizations per window.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Generate with the ground-truth simulator instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    /// Number of windows to plot.
    #[arg(long, default_value_t = 1)]
    plots: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the configured SCM and write train/test windows.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the model; writes per-epoch checkpoints and the loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Observational sampling.
    Forecast(RolloutArgs),
    /// Sampling under an intervention schedule.
    Intervene(RolloutArgs),
    /// Counterfactual of each window under a schedule.
    Counterfactual(RolloutArgs),
    /// Trajectory log-density of each window's forecast values.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// RMSE/MMD report, from exported files or by the simulator protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of model trajectories.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Directory of ground-truth trajectories.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Independence check of encoded latents against their states.
    A3test {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replace latents by a state coordinate (dependent control).
        #[arg(long)]
        inject: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn load_data(d: &DataArgs) -> Result<SeriesBatch> {
    let mut idx = d.windows.as_deref().map(io::parse_windows).transpose()?;
    if let Some(n) = d.limit {
        idx = Some(match idx {
            Some(v) => v.into_iter().take(n).collect(),
            None => (0..n).collect(),
        });
    }
    io::load_split(&d.data, d.split, idx.as_deref())
}

fn load_model(path: &Path) -> Result<FlowModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.model()?)
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = cfg.scm_spec()?;
    let ds = make_dataset(
        &spec,
        cfg.data.series_len,
        cfg.window.context_len,
        cfg.window.total_len,
        cfg.data.train_fraction,
        cfg.seed,
    )?;
    io::write_dataset(out_dir(common)?, &ds, &cfg)?;
    println!("train windows {}, test windows {}", ds.train.batch(), ds.test.batch());
    Ok(())
}

fn write_loss(path: PathBuf, curve: &[LossRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,epoch,loss")?;
    for r in curve {
        writeln!(w, "{},{},{:.10e}", r.step, r.epoch, r.loss)?;
    }
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?.to_path_buf();
    let dag = cfg.dag()?;
    let batch = io::load_split(data, Split::Train, None)?;
    if batch.context_len() != cfg.window.context_len || batch.total_len() != cfg.window.total_len {
        anyhow::bail!(CliError::InvalidConfig("dataset window does not match the config".into()));
    }
    let (mut model, mut state) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            (ck.model()?, ck.train_state())
        }
        None => {
            let m = FlowModel::new(dag, cfg.model.clone(), cfg.flow, cfg.seed);
            let s = TrainState::fresh(&m);
            (m, s)
        }
    };
    let echo = serde_json::to_value(&cfg)?;
    let curve = train(&mut model, &batch, &cfg.train, &mut state, &mut |m, s| {
        Checkpoint::new(m, Some(s), Some(echo.clone()))
            .save(&out.join(format!("epoch_{:03}.ckpt", s.epoch)))
            .map_err(|e| TrainError::Callback(e.to_string()))?;
        eprintln!("epoch {} step {}", s.epoch, s.step);
        Ok(())
    })?;
    Checkpoint::new(&model, Some(&state), Some(echo)).save(&out.join("final.ckpt"))?;
    write_loss(out.join("loss.csv"), &curve)?;
    Ok(())
}

fn regime_file(regime: Regime) -> String {
    format!("{regime}.csv")
}

fn oracle_rollouts(
    spec: &ScmSpec,
    data: &SeriesBatch,
    schedules: &[InterventionSchedule],
    samples: usize,
    seed: u64,
) -> Result<Vec<Rollout>> {
    let tau = data.context_len();
    let mut out = Vec::with_capacity(samples * data.batch());
    for n in 0..samples {
        let sim = spec.simulate_interventional(data, schedules, mix(&[tag::SCM_NOISE, seed, n as u64]))?;
        for b in 0..data.batch() {
            out.push(Rollout {
                window: b,
                sample: n,
                values: (0..data.nodes())
                    .map(|i| (tau..data.total_len()).map(|t| sim.get(b, i, t)).collect())
                    .collect(),
                latents: vec![vec![None; data.horizon()]; data.nodes()],
            });
        }
    }
    Ok(out)
}

fn cmd_rollout(args: &RolloutArgs, regime: Regime) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = out_dir(&args.common)?.to_path_buf();
    let data = load_data(&args.data)?;
    let schedule = match (&args.schedule, regime) {
        (Some(_), Regime::Observational) => {
            anyhow::bail!(CliError::MissingArgument("forecast takes no schedule; use intervene".into()))
        }
        (Some(p), _) => io::read_schedule(p, data.context_len(), data.total_len(), data.nodes())?,
        (None, _) => InterventionSchedule::new(data.context_len(), data.total_len()),
    };
    let schedules = [schedule];
    let rollouts = if args.oracle {
        let spec = cfg.scm_spec()?;
        match regime {
            Regime::Counterfactual => {
                let sim = spec.simulate_counterfactual(&data, &schedules)?;
                let tau = data.context_len();
                io::rollouts_from_values(
                    (0..data.batch())
                        .map(|b| {
                            let v = (0..data.nodes())
                                .map(|i| (tau..data.total_len()).map(|t| sim.get(b, i, t)).collect())
                                .collect();
                            (b, v)
                        })
                        .collect(),
                )
            }
            _ => oracle_rollouts(&spec, &data, &schedules, args.samples, cfg.seed)?,
        }
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::MissingArgument("--checkpoint is required without --oracle".into()))?;
        let model = load_model(path)?;
        match regime {
            Regime::Counterfactual => io::rollouts_from_values(
                counterfactual(&model, &data, &data, &schedules)?
                    .into_iter()
                    .map(|c| (c.window, c.values))
                    .collect(),
            ),
            _ => forecast(&model, &data, &schedules, args.samples, mix(&[tag::LATENT, cfg.seed]))?,
        }
    };
    write_rollouts_csv(&rollouts, data.context_len(), create(out.join(regime_file(regime)))?)?;
    for b in 0..args.plots.min(data.batch()) {
        let bd = bands(&rollouts, b);
        let chart = svg::fan_chart(&data, b, &bd, true, &format!("{regime}, window {b}"));
        std::fs::write(out.join(format!("{regime}_w{b}.svg")), chart)?;
    }
    Ok(())
}

fn cmd_score(common: &Common, data: &DataArgs, checkpoint: &Path) -> Result<()> {
    let _cfg = load_config(common)?;
    let out = out_dir(common)?.to_path_buf();
    let batch = load_data(data)?;
    let model = load_model(checkpoint)?;
    let scores = score_trajectory(&model, &batch)?;
    write_scores_csv(&scores, batch.context_len(), create(out.join("scores.csv"))?)?;
    Ok(())
}

/// RMSE and MMD of exported trajectories against exported ground truth,
/// standardized by the context of the matching data windows.
fn compare_files(pred_dir: &Path, oracle_dir: &Path, data: &SeriesBatch) -> Result<EvalReport> {
    let mut regimes = Vec::new();
    for regime in [Regime::Observational, Regime::Interventional, Regime::Counterfactual] {
        let (pp, op) = (pred_dir.join(regime_file(regime)), oracle_dir.join(regime_file(regime)));
        match (pp.exists(), op.exists()) {
            (false, false) => continue,
            (true, true) => {}
            _ => anyhow::bail!(CliError::AlignmentError(format!("{regime} present on one side only"))),
        }
        let p = io::read_trajectories(&pp)?;
        let o = io::read_trajectories(&op)?;
        if p.times != o.times || p.map.keys().ne(o.map.keys()) {
            anyhow::bail!(CliError::AlignmentError(format!("{regime}: sample/window/time sets differ")));
        }
        let k = data.nodes();
        let mut rmses = Vec::new();
        let samples: std::collections::BTreeSet<usize> = p.map.keys().map(|k| k.0).collect();
        let (mut pset, mut oset) = (Vec::new(), Vec::new());
        for &s in &samples {
            let mut pv = vec![Vec::new(); k];
            let mut ov = vec![Vec::new(); k];
            let mut st: Vec<Vec<ContextStats>> = vec![Vec::new(); k];
            for (&(_, w), traj) in p.map.range((s, 0)..(s + 1, 0)) {
                if w >= data.batch() || traj.len() != k {
                    anyhow::bail!(CliError::AlignmentError(format!("window {w} does not match the data")));
                }
                let truth = &o.map[&(s, w)];
                let stats: Vec<ContextStats> = (0..k).map(|i| data.context_stats(w, i)).collect();
                for i in 0..k {
                    pv[i].extend_from_slice(&traj[i]);
                    ov[i].extend_from_slice(&truth[i]);
                    st[i].extend(std::iter::repeat(stats[i]).take(traj[i].len()));
                }
                let stats = &stats;
                let flat = |v: &Vec<Vec<f64>>| -> Vec<f64> {
                    v.iter()
                        .enumerate()
                        .flat_map(|(i, r)| r.iter().map(move |x| (x - stats[i].mean) / stats[i].scale()))
                        .collect()
                };
                pset.push(flat(traj));
                oset.push(flat(truth));
            }
            let nodes: Vec<usize> = (0..k).collect();
            rmses.push(realization_rmse(&pv, &ov, &st, &nodes)?);
        }
        let rmse = mean_std(&rmses).0;
        let mmd = if regime == Regime::Counterfactual {
            Vec::new()
        } else {
            vec![trajectory_mmd(&pset, &oset, &MmdConfig::trajectory())?]
        };
        regimes.push(RegimeReport {
            regime,
            rmse: vec![rmse],
            mmd,
        });
    }
    Ok(EvalReport { regimes })
}

fn names(cfg: &ExperimentConfig) -> (String, String) {
    let fam = cfg
        .scm
        .family
        .map(|f| serde_json::to_value(f).unwrap().as_str().unwrap().to_string())
        .unwrap_or_else(|| "custom".into());
    let mech = serde_json::to_value(cfg.scm.mechanism).unwrap().as_str().unwrap().to_string();
    (fam, mech)
}

fn cmd_eval(
    common: &Common,
    data: &DataArgs,
    checkpoint: Option<&Path>,
    pred: Option<&Path>,
    oracle: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?.to_path_buf();
    let batch = load_data(data)?;
    let report = match (pred, oracle, checkpoint) {
        (Some(p), Some(o), _) => compare_files(p, o, &batch)?,
        (None, None, Some(c)) => evaluate(&load_model(c)?, &cfg.scm_spec()?, &batch, &cfg.eval, cfg.seed)?,
        _ => anyhow::bail!(CliError::MissingArgument(
            "give --pred and --oracle, or --checkpoint".into()
        )),
    };
    let (fam, mech) = names(&cfg);
    let csv = report.to_csv(&fam, &mech);
    std::fs::write(out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_a3(common: &Common, data: &DataArgs, checkpoint: &Path, inject: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?.to_path_buf();
    let batch = load_data(data)?;
    let model = load_model(checkpoint)?;
    let res = a3_experiment(&model, &batch, cfg.eval.a3_points, cfg.seed, inject)?;
    let mut w = create(out.join("a3.csv"))?;
    writeln!(w, "node,mmd2_model,mmd2_baseline,mmd_model,mmd_baseline")?;
    for (i, r) in res.iter().enumerate() {
        let (m, b) = r.magnitudes();
        writeln!(w, "{i},{:.6e},{:.6e},{m:.6e},{b:.6e}", r.mmd_model, r.mmd_baseline)?;
    }
    let (m, b, ratio) = a3_ratio(&res);
    writeln!(w, "mean,,,{m:.6e},{b:.6e}")?;
    println!("mean model {m:.4e}, mean baseline {b:.4e}, ratio {ratio:.3}");
    Ok(())
}

/// Name of the innermost known error variant, for the machine-readable
/// error line.
fn error_kind(err: &anyhow::Error) -> String {
    fn variant<T: std::fmt::Debug>(e: &T) -> String {
        let d = format!("{e:?}");
        d.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect()
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return variant(e);
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return "InvalidConfig".into();
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return variant(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return variant(e);
        }
        if let Some(e) = cause.downcast_ref::<ForecastError>() {
            return variant(e);
        }
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return variant(e);
        }
        if let Some(e) = cause.downcast_ref::<ScmError>() {
            return variant(e);
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return variant(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricError>() {
            return variant(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "IoError".into();
        }
    }
    "Error".into()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth { common } => cmd_synth(common),
        Cmd::Train {
            common,
            data,
            checkpoint,
        } => cmd_train(common, data, checkpoint.as_deref()),
        Cmd::Forecast(a) => cmd_rollout(a, Regime::Observational),
        Cmd::Intervene(a) => cmd_rollout(a, Regime::Interventional),
        Cmd::Counterfactual(a) => cmd_rollout(a, Regime::Counterfactual),
        Cmd::Score {
            common,
            data,
            checkpoint,
        } => cmd_score(common, data, checkpoint),
        Cmd::Eval {
            common,
            data,
            checkpoint,
            pred,
            oracle,
        } => cmd_eval(common, data, checkpoint.as_deref(), pred.as_deref(), oracle.as_deref()),
        Cmd::A3test {
            common,
            data,
            checkpoint,
            inject,
        } => cmd_a3(common, data, checkpoint, *inject),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
