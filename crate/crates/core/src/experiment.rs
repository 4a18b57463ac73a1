//! Evaluation protocols against the simulator: RMSE and trajectory MMD per
//! regime, the latent independence check and a level-shift anomaly benchmark.

use crate::data::{ContextStats, SeriesBatch};
use crate::forecaster::{
    counterfactual, encode_windows, forecast, score_trajectory, CausalModel, Encoded, ForecastError, Rollout,
};
use crate::graph::InterventionSchedule;
use crate::metrics::{a3_independence_mmd, mean_std, realization_rmse, trajectory_mmd, A3Result, MetricError, MmdConfig};
use crate::model::FlowModel;
use crate::rng::{mix, substream, tag};
use crate::scm::{shift_schedules, ScmError, ScmSpec};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid protocol: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Windows per run.
    pub batch: usize,
    /// Realizations per window.
    pub samples: usize,
    pub runs: usize,
    /// Integration steps used for sampling; 0 keeps the model's setting.
    pub flow_steps: usize,
    /// Clamped roots take their own values this many steps earlier.
    pub intervention_offset: usize,
    /// Intervened nodes; the DAG roots when absent.
    pub roots: Option<Vec<usize>>,
    /// `(z, h)` pairs per node in the independence check.
    pub a3_points: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            batch: 32,
            samples: 20,
            runs: 10,
            flow_steps: 16,
            intervention_offset: 30,
            roots: None,
            a3_points: 1000,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self, context_len: usize, total_len: usize) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Invalid(m));
        if self.batch == 0 || self.runs == 0 || self.samples < 1 {
            return bad("batch, samples and runs must be positive".into());
        }
        if self.batch * self.samples < 2 {
            return bad("need at least two trajectories per run".into());
        }
        let horizon = total_len.saturating_sub(context_len);
        if self.intervention_offset < horizon || self.intervention_offset > context_len {
            return bad(format!(
                "intervention_offset {} must lie in [{horizon}, {context_len}]",
                self.intervention_offset
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Observational,
    Interventional,
    Counterfactual,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Observational => "observational",
            Regime::Interventional => "interventional",
            Regime::Counterfactual => "counterfactual",
        })
    }
}

/// Per-run values of one regime; MMD is absent for counterfactuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub rmse: Vec<f64>,
    pub mmd: Vec<f64>,
}

impl RegimeReport {
    pub fn rmse_stats(&self) -> (f64, f64) {
        mean_std(&self.rmse)
    }

    pub fn mmd_stats(&self) -> Option<(f64, f64)> {
        (!self.mmd.is_empty()).then(|| mean_std(&self.mmd))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regimes: Vec<RegimeReport>,
}

impl EvalReport {
    pub fn get(&self, regime: Regime) -> Option<&RegimeReport> {
        self.regimes.iter().find(|r| r.regime == regime)
    }

    /// Rows of `metric,family,mechanism,regime,mean,std,runs`.
    pub fn to_csv(&self, family: &str, mechanism: &str) -> String {
        let mut out = String::from("metric,family,mechanism,regime,mean,std,runs\n");
        for r in &self.regimes {
            let (m, s) = r.rmse_stats();
            out += &format!("rmse,{family},{mechanism},{},{m:.6},{s:.6},{}\n", r.regime, r.rmse.len());
            if let Some((m, s)) = r.mmd_stats() {
                out += &format!("mmd,{family},{mechanism},{},{m:.6},{s:.6},{}\n", r.regime, r.mmd.len());
            }
        }
        out
    }
}

/// Standardized, flattened `node`-major trajectory of one window.
fn flatten_std(values: impl Fn(usize, usize) -> f64, stats: &[ContextStats], horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(stats.len() * horizon);
    for (i, s) in stats.iter().enumerate() {
        for h in 0..horizon {
            out.push((values(i, h) - s.mean) / s.scale());
        }
    }
    out
}

struct RunData<'a> {
    context: &'a SeriesBatch,
    stats: Vec<Vec<ContextStats>>,
}

impl<'a> RunData<'a> {
    fn new(context: &'a SeriesBatch) -> Self {
        let stats = (0..context.batch())
            .map(|b| (0..context.nodes()).map(|k| context.context_stats(b, k)).collect())
            .collect();
        Self { context, stats }
    }

    /// Node-major value and stats tables over all `(window, step)` pairs.
    fn tables(&self, value: impl Fn(usize, usize, usize) -> f64) -> (Vec<Vec<f64>>, Vec<Vec<ContextStats>>) {
        let (nb, k, horizon) = (self.context.batch(), self.context.nodes(), self.context.horizon());
        let mut vals = vec![Vec::with_capacity(nb * horizon); k];
        let mut stats = vec![Vec::with_capacity(nb * horizon); k];
        for b in 0..nb {
            for i in 0..k {
                for h in 0..horizon {
                    vals[i].push(value(b, i, h));
                    stats[i].push(self.stats[b][i]);
                }
            }
        }
        (vals, stats)
    }
}

fn sampled_regime<M: CausalModel>(
    model: &M,
    spec: &ScmSpec,
    run: &RunData,
    schedules: &[InterventionSchedule],
    proto: &EvalProtocol,
    seed: u64,
) -> Result<(f64, f64), ExperimentError> {
    let ctx = run.context;
    let (nb, tau, horizon) = (ctx.batch(), ctx.context_len(), ctx.horizon());
    let nodes: Vec<usize> = (0..ctx.nodes()).collect();
    let rollouts: Vec<Rollout> = forecast(model, ctx, schedules, proto.samples, mix(&[tag::LATENT, seed]))?;
    let mut rmses = Vec::with_capacity(proto.samples);
    let mut pred_set = Vec::with_capacity(nb * proto.samples);
    let mut true_set = Vec::with_capacity(nb * proto.samples);
    for n in 0..proto.samples {
        let truth = spec.simulate_interventional(ctx, schedules, mix(&[tag::SCM_NOISE, seed, n as u64]))?;
        let pr = &rollouts[n * nb..(n + 1) * nb];
        let (p, stats) = run.tables(|b, i, h| pr[b].values[i][h]);
        let (t, _) = run.tables(|b, i, h| truth.get(b, i, tau + h));
        rmses.push(realization_rmse(&p, &t, &stats, &nodes)?);
        for b in 0..nb {
            pred_set.push(flatten_std(|i, h| pr[b].values[i][h], &run.stats[b], horizon));
            true_set.push(flatten_std(|i, h| truth.get(b, i, tau + h), &run.stats[b], horizon));
        }
    }
    let rmse = rmses.iter().sum::<f64>() / rmses.len() as f64;
    let mmd = trajectory_mmd(&pred_set, &true_set, &MmdConfig::trajectory())?;
    Ok((rmse, mmd))
}

/// Runs the observational, interventional and counterfactual protocol on
/// windows drawn from `test`, with the simulator as ground truth. Each run
/// draws `batch` distinct windows; realizations of both the model and the
/// simulator share the window's context. Sampling uses `proto.flow_steps`
/// integration steps when nonzero.
pub fn evaluate(
    model: &FlowModel,
    spec: &ScmSpec,
    test: &SeriesBatch,
    proto: &EvalProtocol,
    seed: u64,
) -> Result<EvalReport, ExperimentError> {
    let mut m = model.clone();
    if proto.flow_steps > 0 {
        m.flow.steps = proto.flow_steps;
    }
    evaluate_model(&m, spec, test, proto, seed)
}

/// [`evaluate`] for any [`CausalModel`], e.g. the simulator itself as a
/// reference floor.
pub fn evaluate_model<M: CausalModel>(
    m: &M,
    spec: &ScmSpec,
    test: &SeriesBatch,
    proto: &EvalProtocol,
    seed: u64,
) -> Result<EvalReport, ExperimentError> {
    proto.validate(test.context_len(), test.total_len())?;
    if proto.batch > test.batch() {
        return Err(ExperimentError::Invalid(format!(
            "batch {} exceeds the {} available windows",
            proto.batch,
            test.batch()
        )));
    }
    let roots = proto.roots.clone().unwrap_or_else(|| spec.dag().roots());
    let empty = [InterventionSchedule::new(test.context_len(), test.total_len())];
    let mut obs = RegimeReport {
        regime: Regime::Observational,
        rmse: Vec::new(),
        mmd: Vec::new(),
    };
    let mut int = RegimeReport {
        regime: Regime::Interventional,
        ..obs.clone()
    };
    let mut cf = RegimeReport {
        regime: Regime::Counterfactual,
        ..obs.clone()
    };
    let all: Vec<usize> = (0..test.nodes()).collect();
    for r in 0..proto.runs as u64 {
        let mut rng = substream(&[tag::EVAL, seed, r]);
        let idx = index::sample(&mut rng, test.batch(), proto.batch).into_vec();
        let context = test.select(&idx);
        let run = RunData::new(&context);

        let (rm, mm) = sampled_regime(m, spec, &run, &empty, proto, mix(&[seed, r, 0]))?;
        obs.rmse.push(rm);
        obs.mmd.push(mm);

        let schedules = shift_schedules(&context, &roots, proto.intervention_offset)?;
        let (rm, mm) = sampled_regime(m, spec, &run, &schedules, proto, mix(&[seed, r, 1]))?;
        int.rmse.push(rm);
        int.mmd.push(mm);

        let tau = context.context_len();
        let pred = counterfactual(m, &context, &context, &schedules)?;
        let truth = spec.simulate_counterfactual(&context, &schedules)?;
        let (p, stats) = run.tables(|b, i, h| pred[b].values[i][h]);
        let (t, _) = run.tables(|b, i, h| truth.get(b, i, tau + h));
        cf.rmse.push(realization_rmse(&p, &t, &stats, &all)?);
    }
    Ok(EvalReport {
        regimes: vec![obs, int, cf],
    })
}

/// Independence statistics per node on teacher-forced encodings of `data`.
/// With `inject` the latent is replaced by the first coordinate of its
/// conditioning vector, a fully dependent control.
pub fn a3_experiment(
    model: &FlowModel,
    data: &SeriesBatch,
    points: usize,
    seed: u64,
    inject: bool,
) -> Result<Vec<A3Result>, ExperimentError> {
    let enc = encode_windows(model, data)?;
    a3_statistics(&enc, points, seed, inject)
}

/// [`a3_experiment`] on existing encodings.
pub fn a3_statistics(enc: &Encoded, points: usize, seed: u64, inject: bool) -> Result<Vec<A3Result>, ExperimentError> {
    let nodes = enc.latents.len();
    let horizon = enc.latents.first().map_or(0, Vec::len);
    let nb = enc.latents.first().and_then(|n| n.first()).map_or(0, Vec::len);
    let total = nb * horizon;
    let n = points.min(total);
    let mut out = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let mut rng = substream(&[tag::EVAL, seed, 1000 + node as u64]);
        let picks = index::sample(&mut rng, total, n).into_vec();
        let mut z = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        for p in picks {
            let (step, b) = (p / nb, p % nb);
            let cond = enc.conditioning[node][step].row(b);
            z.push(if inject { cond[0] } else { enc.latents[node][step][b] });
            h.push(cond);
        }
        out.push(a3_independence_mmd(&z, &h, mix(&[seed, node as u64]))?);
    }
    Ok(out)
}

/// Per-node means of the model and baseline MMD magnitudes, and their ratio.
pub fn a3_ratio(results: &[A3Result]) -> (f64, f64, f64) {
    let n = results.len() as f64;
    let m = results.iter().map(|r| r.magnitudes().0).sum::<f64>() / n;
    let b = results.iter().map(|r| r.magnitudes().1).sum::<f64>() / n;
    (m, b, m / b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub threshold: f64,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub normal: usize,
    pub anomalous: usize,
}

/// Adds `shift` context standard deviations to one node of window `b` from
/// forecast step `start` to the end of the window.
pub fn inject_level_shift(data: &mut SeriesBatch, b: usize, node: usize, start: usize, shift: f64) {
    let s = data.context_stats(b, node).scale();
    for t in data.context_len() + start..data.total_len() {
        let v = data.get(b, node, t);
        data.set(b, node, t, v + shift * s);
    }
}

/// Thresholds total trajectory scores at the `percentile` quantile of the
/// scores of `calibration`, then flags windows of `eval`. The second half of
/// `eval` receives a level shift of `shift` standard deviations on a random
/// node starting at a random step that leaves at least `min_len` shifted
/// steps.
pub fn anomaly_benchmark(
    model: &FlowModel,
    calibration: &SeriesBatch,
    eval: &SeriesBatch,
    shift: f64,
    percentile: f64,
    min_len: usize,
    seed: u64,
) -> Result<AnomalyReport, ExperimentError> {
    let horizon = eval.horizon();
    if min_len == 0 || min_len > horizon || eval.batch() < 2 {
        return Err(ExperimentError::Invalid("bad anomaly benchmark shape".into()));
    }
    let mut cal: Vec<f64> = score_trajectory(model, calibration)?.into_iter().map(|s| s.total).collect();
    cal.sort_by(f64::total_cmp);
    let threshold = crate::forecaster::empirical_quantile(&cal, percentile);
    let half = eval.batch() / 2;
    let mut data = eval.clone();
    let mut rng = substream(&[tag::EVAL, seed, 77]);
    for b in half..eval.batch() {
        let node = rng.gen_range(0..eval.nodes());
        let start = rng.gen_range(0..=horizon - min_len);
        inject_level_shift(&mut data, b, node, start, shift);
    }
    let scores = score_trajectory(model, &data)?;
    let flagged = |r: std::ops::Range<usize>| r.clone().filter(|&b| scores[b].total < threshold).count() as f64 / r.len() as f64;
    Ok(AnomalyReport {
        threshold,
        detection_rate: flagged(half..eval.batch()),
        false_positive_rate: flagged(0..half),
        normal: half,
        anomalous: eval.batch() - half,
    })
}
