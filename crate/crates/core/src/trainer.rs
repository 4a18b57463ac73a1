//! Conditional flow matching with teacher-forced recurrent states.
//!
//! For every forecast step `t` and node `i` the recurrent state after the
//! observed value at `t - 1` conditions the velocity network, which regresses
//! onto the time derivative of a straight path between the standardized
//! observation and a standard-normal draw.

use crate::autodiff::{AutodiffError, Axis, Tape, Var};
use crate::data::SeriesBatch;
use crate::encoder::EncoderError;
use crate::flow::time_features;
use crate::model::{flatten, unflatten, FlowModel};
use crate::nn::{GruCell, Mlp, Parameterized};
use crate::rng::{substream, tag};
use crate::tensor::Tensor2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("flow time {0} outside [0, 1]")]
    SOutOfRange(f64),
    #[error("batch has no forecast steps")]
    EmptyForecastWindow,
    #[error("loss diverged at step {step}: running mean {ema} vs minimum {min}")]
    DivergingLoss { step: u64, ema: f64, min: f64 },
    #[error("data has {got} nodes, model has {expected}")]
    ModelDagMismatch { got: usize, expected: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{0}")]
    Callback(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sigma_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip)]
    pub seed: u64,
    pub s_samples_per_point: usize,
    /// Span of the running loss mean used for divergence detection.
    pub ema_span: usize,
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.0,
            batch_size: 128,
            epochs: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            s_samples_per_point: 1,
            ema_span: 50,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return bad("sigma_min must lie in [0, 1)");
        }
        if self.s_samples_per_point == 0 {
            return bad("s_samples_per_point must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Point on the interpolation path and its derivative in `s`.
pub fn reference_path(x: f64, z: f64, s: f64, sigma_min: f64) -> Result<(f64, f64), TrainError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(TrainError::SOutOfRange(s));
    }
    let phi = (1.0 - s) * x + (s + sigma_min * (1.0 - s)) * z;
    let dphi = (1.0 - sigma_min) * z - x;
    Ok((phi, dphi))
}

/// Flow times and base draws for one loss evaluation, indexed by
/// `(sample, node, forecast step, window)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub samples: usize,
    pub nodes: usize,
    pub horizon: usize,
    pub batch: usize,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

impl Draws {
    pub fn sample<R: Rng + ?Sized>(
        samples: usize,
        nodes: usize,
        horizon: usize,
        batch: usize,
        rng: &mut R,
    ) -> Self {
        let n = samples * nodes * horizon * batch;
        let mut s = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            s.push(rng.gen_range(0.0..1.0));
            z.push(StandardNormal.sample(rng));
        }
        Self {
            samples,
            nodes,
            horizon,
            batch,
            s,
            z,
        }
    }

    /// Same `(s, z)` everywhere.
    pub fn constant(samples: usize, nodes: usize, horizon: usize, batch: usize, s: f64, z: f64) -> Self {
        let n = samples * nodes * horizon * batch;
        Self {
            samples,
            nodes,
            horizon,
            batch,
            s: vec![s; n],
            z: vec![z; n],
        }
    }

    #[inline]
    fn index(&self, j: usize, k: usize, h: usize, b: usize) -> usize {
        ((j * self.nodes + k) * self.horizon + h) * self.batch + b
    }
}

/// Recorded loss with the parameter leaves in the model's visiting order.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub params: Vec<Var>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).get(0, 0)
    }

    /// Gradient flattened in the same order as [`flatten`].
    pub fn gradient(&self) -> Result<Vec<f64>, TrainError> {
        let grads = self.tape.backward(self.loss)?;
        let mut out = Vec::new();
        for &p in &self.params {
            out.extend(grads.get_or_zeros(p, self.tape.value(p).shape()).into_vec());
        }
        Ok(out)
    }
}

/// Builds the flow-matching loss for `batch` on a fresh tape.
pub fn cfm_loss(
    model: &FlowModel,
    batch: &SeriesBatch,
    draws: &Draws,
    sigma_min: f64,
) -> Result<LossGraph, TrainError> {
    let dag = model.dag();
    let k = dag.node_count();
    if batch.nodes() != k {
        return Err(TrainError::ModelDagMismatch {
            got: batch.nodes(),
            expected: k,
        });
    }
    let (nb, tau, total) = (batch.batch(), batch.context_len(), batch.total_len());
    let horizon = total - tau;
    if horizon == 0 || nb == 0 {
        return Err(TrainError::EmptyForecastWindow);
    }
    if draws.nodes != k || draws.horizon != horizon || draws.batch != nb {
        return Err(TrainError::InvalidConfig("draws do not match the batch shape".into()));
    }
    let hd = model.rnn.hidden_dim();

    // Standardized values, [node][t][window].
    let mut xs = vec![vec![vec![0.0; nb]; total]; k];
    for b in 0..nb {
        for (node, per_t) in xs.iter_mut().enumerate() {
            let st = batch.context_stats(b, node);
            for (t, row) in per_t.iter_mut().enumerate() {
                row[b] = st.standardize(batch.get(b, node, t));
            }
        }
    }

    let mut tape = Tape::new();
    let mut params = Vec::new();
    let cell_vars: Vec<_> = model
        .rnn
        .cells()
        .iter()
        .map(|c| c.bind(&mut tape, &mut params))
        .collect::<Result<_, _>>()?;
    let net_vars: Vec<_> = model
        .nets
        .iter()
        .map(|n| n.bind(&mut tape, &mut params))
        .collect::<Result<_, _>>()?;

    // states[h][node]: own state conditioning forecast step tau + h.
    let mut states: Vec<Vec<Var>> = Vec::with_capacity(horizon);
    if model.rnn.per_node() {
        let mut hs: Vec<Var> = (0..k)
            .map(|_| tape.leaf(Tensor2::zeros(nb, hd)))
            .collect::<Result<_, _>>()?;
        for t in 0..total - 1 {
            for node in 0..k {
                let x = tape.leaf(Tensor2::column(&xs[node][t]))?;
                hs[node] = GruCell::step_tape(cell_vars[node], hd, &mut tape, x, hs[node])?;
            }
            if t + 1 >= tau {
                states.push(hs.clone());
            }
        }
    } else {
        // Shared cell: all nodes stacked as row blocks of one state.
        let mut h = tape.leaf(Tensor2::zeros(k * nb, hd))?;
        let mut col = vec![0.0; k * nb];
        for t in 0..total - 1 {
            for node in 0..k {
                col[node * nb..(node + 1) * nb].copy_from_slice(&xs[node][t]);
            }
            let x = tape.leaf(Tensor2::column(&col))?;
            h = GruCell::step_tape(cell_vars[0], hd, &mut tape, x, h)?;
            if t + 1 >= tau {
                let per = (0..k)
                    .map(|node| tape.slice(h, Axis::Rows, node * nb, nb))
                    .collect::<Result<_, _>>()?;
                states.push(per);
            }
        }
    }

    let zero_pool = tape.leaf(Tensor2::zeros(nb, hd))?;
    let feat_cols = 1 + time_features(0.0).len();
    let samples = draws.samples;
    let mut total_loss: Option<Var> = None;
    for node in 0..k {
        let parents = dag.parents(node);
        let mut blocks = Vec::with_capacity(horizon * samples);
        let mut target = Vec::with_capacity(horizon * samples * nb);
        for (h, st) in states.iter().enumerate() {
            let pool = if parents.is_empty() {
                zero_pool
            } else {
                let mut acc = st[parents[0]];
                for &p in &parents[1..] {
                    acc = tape.add(acc, st[p])?;
                }
                tape.scale(acc, 1.0 / parents.len() as f64)?
            };
            let x = &xs[node][tau + h];
            for j in 0..samples {
                let mut feats = Tensor2::zeros(nb, feat_cols);
                for b in 0..nb {
                    let i = draws.index(j, node, h, b);
                    let (s, z) = (draws.s[i], draws.z[i]);
                    let (phi, dphi) = reference_path(x[b], z, s, sigma_min)?;
                    let row = feats.row_mut(b);
                    row[0] = phi;
                    row[1..].copy_from_slice(&time_features(s));
                    target.push(dphi);
                }
                let fv = tape.leaf(feats)?;
                blocks.push(tape.concat(&[fv, st[node], pool], Axis::Cols)?);
            }
        }
        let input = tape.concat(&blocks, Axis::Rows)?;
        let v = Mlp::forward_tape(&net_vars[node], &mut tape, input)?;
        let tv = tape.leaf(Tensor2::column(&target))?;
        let diff = tape.sub(v, tv)?;
        let sq = tape.sum_squares(diff)?;
        total_loss = Some(match total_loss {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let n = (k * horizon * samples * nb) as f64;
    let loss = tape.scale(total_loss.expect("at least one node"), 1.0 / n)?;
    Ok(LossGraph { tape, loss, params })
}

/// Adaptive moment estimation over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub adam: Adam,
    pub ema: Option<f64>,
    pub ema_min: f64,
}

impl TrainState {
    pub fn fresh(model: &FlowModel) -> Self {
        Self {
            epoch: 0,
            step: 0,
            adam: Adam::new(model.param_count()),
            ema: None,
            ema_min: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Runs epochs `state.epoch .. cfg.epochs`. Each epoch's shuffle and draws
/// come from a stream keyed by `(seed, epoch)`, so stopping after any epoch
/// and resuming from the saved state reproduces the uninterrupted run.
/// `on_epoch` sees the model and state after every completed epoch.
pub fn train(
    model: &mut FlowModel,
    data: &SeriesBatch,
    cfg: &TrainConfig,
    state: &mut TrainState,
    on_epoch: &mut dyn FnMut(&FlowModel, &TrainState) -> Result<(), TrainError>,
) -> Result<Vec<LossRecord>, TrainError> {
    cfg.validate()?;
    if data.nodes() != model.dag().node_count() {
        return Err(TrainError::ModelDagMismatch {
            got: data.nodes(),
            expected: model.dag().node_count(),
        });
    }
    if data.horizon() == 0 || data.batch() == 0 {
        return Err(TrainError::EmptyForecastWindow);
    }
    let alpha = 2.0 / (cfg.ema_span as f64 + 1.0);
    let mut curve = Vec::new();
    let mut flat = flatten(model);
    while state.epoch < cfg.epochs {
        let mut rng = substream(&[tag::TRAIN, cfg.seed, state.epoch as u64]);
        let mut order: Vec<usize> = (0..data.batch()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mb = data.select(chunk);
            let draws = Draws::sample(
                cfg.s_samples_per_point,
                mb.nodes(),
                mb.horizon(),
                mb.batch(),
                &mut rng,
            );
            let graph = cfm_loss(model, &mb, &draws, cfg.sigma_min)?;
            let loss = graph.value();
            let grad = graph.gradient()?;
            drop(graph);
            state.adam.step(&mut flat, &grad, cfg);
            unflatten(model, &flat).expect("parameter count is fixed");
            state.step += 1;
            curve.push(LossRecord {
                step: state.step,
                epoch: state.epoch,
                loss,
            });
            let ema = match state.ema {
                None => loss,
                Some(e) => e + alpha * (loss - e),
            };
            state.ema = Some(ema);
            state.ema_min = state.ema_min.min(ema);
            if ema > cfg.divergence_factor * state.ema_min {
                return Err(TrainError::DivergingLoss {
                    step: state.step,
                    ema,
                    min: state.ema_min,
                });
            }
        }
        state.epoch += 1;
        on_epoch(model, state)?;
    }
    Ok(curve)
}
