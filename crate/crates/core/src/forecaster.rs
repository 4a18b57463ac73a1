//! Observational and interventional rollouts, counterfactual generation and
//! trajectory scoring on top of any per-node invertible mechanism.

use crate::data::{ContextStats, SeriesBatch};
use crate::encoder::{EncoderError, NodeStates};
use crate::flow::{decode, encode, log_density, FlowError, VelocityField};
use crate::graph::{CausalDag, InterventionSchedule, ScheduleError};
use crate::model::FlowModel;
use crate::rng::{keyed_normal, tag};
use crate::scm::{ScmError, ScmSpec};
use crate::tensor::Tensor2;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    ScheduleOutOfWindow(#[from] ScheduleError),
    #[error("expected 1 or {expected} schedules, got {got}")]
    ScheduleCount { expected: usize, got: usize },
    #[error("data has {got} nodes, model has {expected}")]
    ModelDagMismatch { got: usize, expected: usize },
    #[error("factual batch shape {got:?} does not match context {expected:?}")]
    FactualLengthMismatch {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("window has no forecast steps")]
    EmptyHorizon,
    #[error("latent table has the wrong shape")]
    LatentShape,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A model that maps between a node's value and its latent given the state
/// reached after the previous time step. Rows are independent trajectories.
pub trait CausalModel {
    type State: Clone;

    fn dag(&self) -> &CausalDag;

    /// State after the context of windows `rows` (repeats allowed).
    fn init_state(&self, context: &SeriesBatch, rows: &[usize]) -> Result<Self::State, ForecastError>;

    /// Latents of `x` for node `node` at window step `t`, one per listed row.
    fn encode(
        &self,
        state: &Self::State,
        node: usize,
        t: usize,
        rows: &[usize],
        x: &[f64],
    ) -> Result<Vec<f64>, ForecastError>;

    fn decode(
        &self,
        state: &Self::State,
        node: usize,
        t: usize,
        rows: &[usize],
        z: &[f64],
    ) -> Result<Vec<f64>, ForecastError>;

    /// Consumes the step-`t` values of every node, `values[node][row]`.
    fn advance(&self, state: &Self::State, t: usize, values: &[Vec<f64>]) -> Result<Self::State, ForecastError>;
}

/// Recurrent states plus the standardization of each row's window.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub states: NodeStates,
    /// `[node][row]`
    pub stats: Vec<Vec<ContextStats>>,
}

fn select_rows(t: &Tensor2, rows: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(rows.len(), t.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(t.row(r));
    }
    out
}

impl FlowModel {
    fn prepared(&self, state: &FlowState, node: usize, rows: &[usize]) -> Result<Tensor2, FlowError> {
        let cond = state.states.conditioning(self.dag(), node);
        self.nets[node].prepare(&select_rows(&cond, rows))
    }
}

impl CausalModel for FlowModel {
    type State = FlowState;

    fn dag(&self) -> &CausalDag {
        FlowModel::dag(self)
    }

    fn init_state(&self, context: &SeriesBatch, rows: &[usize]) -> Result<FlowState, ForecastError> {
        let states = self.rnn.init_from_context(context, rows)?;
        let stats = (0..context.nodes())
            .map(|k| rows.iter().map(|&b| context.context_stats(b, k)).collect())
            .collect();
        Ok(FlowState { states, stats })
    }

    fn encode(
        &self,
        state: &FlowState,
        node: usize,
        _t: usize,
        rows: &[usize],
        x: &[f64],
    ) -> Result<Vec<f64>, ForecastError> {
        let prep = self.prepared(state, node, rows)?;
        let xs: Vec<f64> = rows
            .iter()
            .zip(x)
            .map(|(&r, &v)| state.stats[node][r].standardize(v))
            .collect();
        Ok(encode(&self.nets[node], &self.flow, &prep, &xs)?)
    }

    fn decode(
        &self,
        state: &FlowState,
        node: usize,
        _t: usize,
        rows: &[usize],
        z: &[f64],
    ) -> Result<Vec<f64>, ForecastError> {
        let prep = self.prepared(state, node, rows)?;
        let xs = decode(&self.nets[node], &self.flow, &prep, z)?;
        Ok(rows
            .iter()
            .zip(xs)
            .map(|(&r, v)| state.stats[node][r].destandardize(v))
            .collect())
    }

    fn advance(&self, state: &FlowState, _t: usize, values: &[Vec<f64>]) -> Result<FlowState, ForecastError> {
        let std: Vec<Vec<f64>> = values
            .iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .zip(&state.stats[k])
                    .map(|(&v, s)| s.standardize(v))
                    .collect()
            })
            .collect();
        Ok(FlowState {
            states: self.rnn.advance_all(&state.states, &std)?,
            stats: state.stats.clone(),
        })
    }
}

/// Exact mechanisms of a known SCM used in place of learned flows: the
/// latent is the abducted exogenous noise in units of the raw draw.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub spec: ScmSpec,
}

#[derive(Clone, Debug)]
pub struct OracleState {
    /// `[row][node]` values at the previous step.
    prev: Vec<Vec<f64>>,
    origin: Vec<usize>,
}

impl CausalModel for OracleModel {
    type State = OracleState;

    fn dag(&self) -> &CausalDag {
        self.spec.dag()
    }

    fn init_state(&self, context: &SeriesBatch, rows: &[usize]) -> Result<OracleState, ForecastError> {
        let tau = context.context_len();
        if tau == 0 {
            return Err(EncoderError::EmptyContext.into());
        }
        Ok(OracleState {
            prev: rows
                .iter()
                .map(|&b| (0..context.nodes()).map(|k| context.get(b, k, tau - 1)).collect())
                .collect(),
            origin: rows.iter().map(|&b| context.time_origin(b)).collect(),
        })
    }

    fn encode(
        &self,
        state: &OracleState,
        node: usize,
        t: usize,
        rows: &[usize],
        x: &[f64],
    ) -> Result<Vec<f64>, ForecastError> {
        rows.iter()
            .zip(x)
            .map(|(&r, &v)| {
                let e = self.spec.abduct(node, &state.prev[r], state.origin[r] + t, v)?;
                Ok(e / self.spec.noise_scale)
            })
            .collect()
    }

    fn decode(
        &self,
        state: &OracleState,
        node: usize,
        t: usize,
        rows: &[usize],
        z: &[f64],
    ) -> Result<Vec<f64>, ForecastError> {
        Ok(rows
            .iter()
            .zip(z)
            .map(|(&r, &z)| {
                let e = self.spec.noise_scale * z;
                self.spec.mechanism_value(node, &state.prev[r], state.origin[r] + t, e)
            })
            .collect())
    }

    fn advance(&self, state: &OracleState, _t: usize, values: &[Vec<f64>]) -> Result<OracleState, ForecastError> {
        let mut next = state.clone();
        for (r, prev) in next.prev.iter_mut().enumerate() {
            for (k, v) in prev.iter_mut().enumerate() {
                *v = values[k][r];
            }
        }
        Ok(next)
    }
}

/// One sampled trajectory over the forecast window.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub window: usize,
    pub sample: usize,
    /// `[node][step]`, original units.
    pub values: Vec<Vec<f64>>,
    /// Latent consumed at each `(node, step)`; `None` where clamped.
    pub latents: Vec<Vec<Option<f64>>>,
}

/// Counterfactual trajectory of one factual window.
#[derive(Clone, Debug, PartialEq)]
pub struct CfRollout {
    pub window: usize,
    pub values: Vec<Vec<f64>>,
    /// Latents abducted from the factual values; `None` where clamped.
    pub latents: Vec<Vec<Option<f64>>>,
}

fn check_inputs<M: CausalModel>(
    model: &M,
    context: &SeriesBatch,
    schedules: &[InterventionSchedule],
) -> Result<(), ForecastError> {
    let k = model.dag().node_count();
    if context.nodes() != k {
        return Err(ForecastError::ModelDagMismatch {
            got: context.nodes(),
            expected: k,
        });
    }
    if context.horizon() == 0 {
        return Err(ForecastError::EmptyHorizon);
    }
    if schedules.len() != 1 && schedules.len() != context.batch() {
        return Err(ForecastError::ScheduleCount {
            expected: context.batch(),
            got: schedules.len(),
        });
    }
    for s in schedules {
        s.validate(k, context.context_len(), context.total_len())?;
    }
    Ok(())
}

fn schedule_for(schedules: &[InterventionSchedule], b: usize) -> &InterventionSchedule {
    if schedules.len() == 1 {
        &schedules[0]
    } else {
        &schedules[b]
    }
}

/// Standard-normal latent of one `(window, sample, node, step)`, drawn from
/// its own keyed stream.
pub fn sample_latent(seed: u64, window: usize, sample: usize, node: usize, t: usize) -> f64 {
    keyed_normal(&[
        tag::LATENT,
        seed,
        window as u64,
        sample as u64,
        node as u64,
        t as u64,
    ])
}

fn rollout<M: CausalModel>(
    model: &M,
    context: &SeriesBatch,
    schedules: &[InterventionSchedule],
    n_samples: usize,
    latent: &dyn Fn(usize, usize, usize, usize) -> f64,
) -> Result<Vec<Rollout>, ForecastError> {
    check_inputs(model, context, schedules)?;
    let (nb, tau, total) = (context.batch(), context.context_len(), context.total_len());
    let k = model.dag().node_count();
    let horizon = total - tau;
    let n_rows = n_samples * nb;
    let windows: Vec<usize> = (0..n_rows).map(|r| r % nb).collect();
    let mut state = model.init_state(context, &windows)?;
    let mut out: Vec<Rollout> = (0..n_rows)
        .map(|r| Rollout {
            window: r % nb,
            sample: r / nb,
            values: vec![vec![0.0; horizon]; k],
            latents: vec![vec![None; horizon]; k],
        })
        .collect();
    let mut step = vec![vec![0.0; n_rows]; k];
    for t in tau..total {
        let h = t - tau;
        for &node in model.dag().topo_order() {
            let mut free = Vec::with_capacity(n_rows);
            for r in 0..n_rows {
                match schedule_for(schedules, windows[r]).get(node, t) {
                    Some(g) => step[node][r] = g,
                    None => free.push(r),
                }
            }
            if free.is_empty() {
                continue;
            }
            let z: Vec<f64> = free
                .iter()
                .map(|&r| latent(windows[r], r / nb, node, h))
                .collect();
            let x = model.decode(&state, node, t, &free, &z)?;
            for ((&r, v), z) in free.iter().zip(x).zip(z) {
                step[node][r] = v;
                out[r].latents[node][h] = Some(z);
            }
        }
        for (r, ro) in out.iter_mut().enumerate() {
            for node in 0..k {
                ro.values[node][h] = step[node][r];
            }
        }
        state = model.advance(&state, t, &step)?;
    }
    Ok(out)
}

/// Ancestral sampling in topological order. `schedules` holds one schedule
/// shared by every window or one per window; an empty schedule gives the
/// observational forecast. Output is ordered by sample, then window.
pub fn forecast<M: CausalModel>(
    model: &M,
    context: &SeriesBatch,
    schedules: &[InterventionSchedule],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Rollout>, ForecastError> {
    rollout(model, context, schedules, n_samples, &|b, s, i, h| sample_latent(seed, b, s, i, h))
}

/// Same as [`forecast`] with latents given as `latents[row][node][step]`,
/// rows ordered like the output. Clamped entries ignore their latent.
pub fn forecast_with_latents<M: CausalModel>(
    model: &M,
    context: &SeriesBatch,
    schedules: &[InterventionSchedule],
    latents: &[Vec<Vec<f64>>],
) -> Result<Vec<Rollout>, ForecastError> {
    let nb = context.batch();
    if nb == 0 || latents.len() % nb != 0 {
        return Err(ForecastError::LatentShape);
    }
    let k = model.dag().node_count();
    let horizon = context.horizon();
    if latents.iter().any(|l| l.len() != k || l.iter().any(|s| s.len() != horizon)) {
        return Err(ForecastError::LatentShape);
    }
    rollout(model, context, schedules, latents.len() / nb, &|b, s, i, h| latents[s * nb + b][i][h])
}

/// Abduction under the factual states, action, prediction under the
/// counterfactual states. `factual` carries the observed window including its
/// context; `context` seeds the counterfactual states.
pub fn counterfactual<M: CausalModel>(
    model: &M,
    context: &SeriesBatch,
    factual: &SeriesBatch,
    schedules: &[InterventionSchedule],
) -> Result<Vec<CfRollout>, ForecastError> {
    check_inputs(model, context, schedules)?;
    let shape = |b: &SeriesBatch| (b.batch(), b.context_len(), b.total_len());
    if shape(factual) != shape(context) || factual.nodes() != context.nodes() {
        return Err(ForecastError::FactualLengthMismatch {
            got: shape(factual),
            expected: shape(context),
        });
    }
    let (nb, tau, total) = (context.batch(), context.context_len(), context.total_len());
    let k = model.dag().node_count();
    let horizon = total - tau;
    let rows: Vec<usize> = (0..nb).collect();
    let mut hf = model.init_state(factual, &rows)?;
    let mut hcf = model.init_state(context, &rows)?;
    let mut out: Vec<CfRollout> = (0..nb)
        .map(|b| CfRollout {
            window: b,
            values: vec![vec![0.0; horizon]; k],
            latents: vec![vec![None; horizon]; k],
        })
        .collect();
    let mut step = vec![vec![0.0; nb]; k];
    let mut fstep = vec![vec![0.0; nb]; k];
    for t in tau..total {
        let h = t - tau;
        for &node in model.dag().topo_order() {
            let mut free = Vec::with_capacity(nb);
            for b in 0..nb {
                fstep[node][b] = factual.get(b, node, t);
                match schedule_for(schedules, b).get(node, t) {
                    Some(g) => step[node][b] = g,
                    None => free.push(b),
                }
            }
            if free.is_empty() {
                continue;
            }
            let xf: Vec<f64> = free.iter().map(|&b| fstep[node][b]).collect();
            let z = model.encode(&hf, node, t, &free, &xf)?;
            let x = model.decode(&hcf, node, t, &free, &z)?;
            for ((&b, v), z) in free.iter().zip(x).zip(z) {
                step[node][b] = v;
                out[b].latents[node][h] = Some(z);
            }
        }
        for (b, ro) in out.iter_mut().enumerate() {
            for node in 0..k {
                ro.values[node][h] = step[node][b];
            }
        }
        hf = model.advance(&hf, t, &fstep)?;
        hcf = model.advance(&hcf, t, &step)?;
    }
    Ok(out)
}

/// Log-density of each window's forecast values, in context-standardized
/// units, with states advanced along those same values.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryScore {
    /// `[node][step]`
    pub per_step: Vec<Vec<f64>>,
    pub per_node: Vec<f64>,
    pub total: f64,
}

/// Teacher-forced pass over each window's forecast values: latents,
/// log-densities and the conditioning vectors that produced them.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[node][step][window]`
    pub latents: Vec<Vec<Vec<f64>>>,
    pub logp: Vec<Vec<Vec<f64>>>,
    /// `[node][step]`, one conditioning row per window.
    pub conditioning: Vec<Vec<Tensor2>>,
}

pub fn encode_windows(model: &FlowModel, data: &SeriesBatch) -> Result<Encoded, ForecastError> {
    check_inputs(model, data, &[InterventionSchedule::new(data.context_len(), data.total_len())])?;
    let (nb, tau, total) = (data.batch(), data.context_len(), data.total_len());
    let k = data.nodes();
    let rows: Vec<usize> = (0..nb).collect();
    let mut state = model.init_state(data, &rows)?;
    let mut enc = Encoded {
        latents: vec![Vec::new(); k],
        logp: vec![Vec::new(); k],
        conditioning: vec![Vec::new(); k],
    };
    let mut step = vec![vec![0.0; nb]; k];
    for t in tau..total {
        for node in 0..k {
            let cond = state.states.conditioning(model.dag(), node);
            let prep = model.nets[node].prepare(&cond)?;
            for b in 0..nb {
                step[node][b] = data.get(b, node, t);
            }
            let xs: Vec<f64> = (0..nb)
                .map(|b| state.stats[node][b].standardize(step[node][b]))
                .collect();
            let (lp, z) = log_density(&model.nets[node], &model.flow, &prep, &xs)?;
            if lp.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFiniteTrajectory.into());
            }
            enc.latents[node].push(z);
            enc.logp[node].push(lp);
            enc.conditioning[node].push(cond);
        }
        state = model.advance(&state, t, &step)?;
    }
    Ok(enc)
}

pub fn score_trajectory(model: &FlowModel, data: &SeriesBatch) -> Result<Vec<TrajectoryScore>, ForecastError> {
    let enc = encode_windows(model, data)?;
    let k = data.nodes();
    Ok((0..data.batch())
        .map(|b| {
            let per_step: Vec<Vec<f64>> = (0..k)
                .map(|i| enc.logp[i].iter().map(|row| row[b]).collect())
                .collect();
            let per_node: Vec<f64> = per_step.iter().map(|s| s.iter().sum()).collect();
            let total = per_node.iter().sum();
            TrajectoryScore {
                per_step,
                per_node,
                total,
            }
        })
        .collect())
}

/// Linear interpolation between order statistics.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and the central 50% and 90% intervals at one `(node, step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

/// Per-node, per-step empirical bands over the rollouts of one window.
pub fn bands(rollouts: &[Rollout], window: usize) -> Vec<Vec<Band>> {
    let mine: Vec<&Rollout> = rollouts.iter().filter(|r| r.window == window).collect();
    let Some(first) = mine.first() else {
        return Vec::new();
    };
    let (k, horizon) = (first.values.len(), first.values[0].len());
    (0..k)
        .map(|i| {
            (0..horizon)
                .map(|h| {
                    let mut v: Vec<f64> = mine.iter().map(|r| r.values[i][h]).collect();
                    v.sort_by(f64::total_cmp);
                    Band {
                        q05: empirical_quantile(&v, 0.05),
                        q25: empirical_quantile(&v, 0.25),
                        q50: empirical_quantile(&v, 0.5),
                        q75: empirical_quantile(&v, 0.75),
                        q95: empirical_quantile(&v, 0.95),
                    }
                })
                .collect()
        })
        .collect()
}

/// Writes `sample,window,node,t,value` rows with 1-based `t` counted from
/// the window start.
pub fn write_rollouts_csv<W: Write>(rollouts: &[Rollout], context_len: usize, mut w: W) -> Result<(), ForecastError> {
    writeln!(w, "sample,window,node,t,value")?;
    for r in rollouts {
        for (i, row) in r.values.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                writeln!(w, "{},{},{},{},{:.16e}", r.sample, r.window, i, context_len + h + 1, v)?;
            }
        }
    }
    Ok(())
}

/// Writes `window,node,t,logp` rows followed by per-window totals with
/// `node` and `t` set to `total`.
pub fn write_scores_csv<W: Write>(scores: &[TrajectoryScore], context_len: usize, mut w: W) -> Result<(), ForecastError> {
    writeln!(w, "window,node,t,logp")?;
    for (b, s) in scores.iter().enumerate() {
        for (i, row) in s.per_step.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                writeln!(w, "{b},{i},{},{:.16e}", context_len + h + 1, v)?;
            }
        }
    }
    for (b, s) in scores.iter().enumerate() {
        writeln!(w, "{b},total,total,{:.16e}", s.total)?;
    }
    Ok(())
}

/// Builds a batch with the context of `context` followed by each rollout's
/// values. `rollouts` must be ordered like the output of [`forecast`].
pub fn rollouts_to_batch(context: &SeriesBatch, rollouts: &[Rollout]) -> SeriesBatch {
    let tau = context.context_len();
    let rows: Vec<usize> = rollouts.iter().map(|r| r.window).collect();
    let mut out = context.select(&rows);
    for (r, ro) in rollouts.iter().enumerate() {
        for (i, row) in ro.values.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                out.set(r, i, tau + h, v);
            }
        }
    }
    out
}
