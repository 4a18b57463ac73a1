//! Synthetic structural causal models used as data source and ground truth.
//!
//! Four graph families (tree, diamond, fully connected layers, chain with skip
//! edges) each come with an additive and a nonlinear non-additive mechanism.
//! Every root follows a sinusoidal AR(1) process. Noise is keyed by
//! `(seed, batch item, node, absolute t)` so any continuation of a simulation
//! reproduces exactly the draws the uninterrupted run would have made.

use crate::data::{DataError, SeriesBatch};
use crate::graph::{CausalDag, GraphError, InterventionSchedule, ScheduleError};
use crate::rng::{keyed_normal, substream, tag};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("value exceeded the overflow guard at node {node}, t {t}")]
    NumericOverflow { node: usize, t: usize },
    #[error("no stable coefficient draw found after {0} attempts")]
    Unstable(usize),
    #[error("noise abduction has no solution at node {node}, t {t}")]
    AbductionUnsolvable { node: usize, t: usize },
    #[error("source offset {offset} is smaller than the horizon {horizon}")]
    OffsetTooSmall { offset: usize, horizon: usize },
    #[error("source offset {offset} reaches before the window start (context {context_len})")]
    OffsetTooLarge { offset: usize, context_len: usize },
    #[error("schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("expected {expected} schedules or one, got {got}")]
    ScheduleCount { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Tree,
    Diamond,
    FcLayer,
    Chain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Additive,
    Nlna,
}

impl Family {
    pub fn edges(self) -> (usize, Vec<(usize, usize)>) {
        match self {
            Family::Tree => (8, vec![(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6), (3, 7)]),
            Family::Diamond => (
                10,
                vec![
                    (0, 1),
                    (0, 2),
                    (1, 3),
                    (2, 3),
                    (3, 4),
                    (3, 5),
                    (4, 6),
                    (5, 6),
                    (6, 7),
                    (6, 8),
                    (7, 9),
                    (8, 9),
                ],
            ),
            Family::FcLayer => {
                let layers: [&[usize]; 3] = [&[0, 1, 2], &[3, 4, 5, 6], &[7, 8, 9]];
                let mut e = Vec::new();
                for w in layers.windows(2) {
                    for &p in w[0] {
                        for &c in w[1] {
                            e.push((p, c));
                        }
                    }
                }
                (10, e)
            }
            Family::Chain => {
                let n = 50;
                let mut e: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
                e.extend((0..n - 2).map(|i| (i, i + 2)));
                (n, e)
            }
        }
    }

    pub fn dag(self) -> CausalDag {
        let (n, e) = self.edges();
        CausalDag::new(n, &e).expect("built-in family graphs are acyclic")
    }

    /// Scale on the exogenous term of non-root additive mechanisms.
    fn additive_noise_scale(self) -> f64 {
        match self {
            Family::Tree => 0.25,
            _ => 1.0,
        }
    }
}

/// Sinusoidal AR(1) law shared by all roots; each root has its own phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootProcess {
    pub amplitude: f64,
    pub period: f64,
}

pub const SELF_COEFF_SET: [f64; 3] = [0.3, 0.5, 0.7];
pub const PARENT_COEFF_SET: [f64; 4] = [-0.4, -0.2, 0.2, 0.4];

#[derive(Clone, Debug, PartialEq)]
pub struct ScmSpec {
    dag: CausalDag,
    family: Option<Family>,
    mechanism: Mechanism,
    self_coeffs: Vec<f64>,
    /// Aligned with `dag.parents(i)`.
    parent_coeffs: Vec<Vec<f64>>,
    root: RootProcess,
    phases: Vec<f64>,
    /// Multiplies every exogenous draw; 0 gives a deterministic system.
    pub noise_scale: f64,
    pub burn_in: usize,
    pub overflow_guard: f64,
}

pub const DEFAULT_BURN_IN: usize = 200;
pub const DEFAULT_GUARD: f64 = 1e6;

impl ScmSpec {
    /// Explicit construction. `family` selects the mechanism shape for non-root
    /// nodes; `None` means the generic additive/sqrt form of the chain family.
    pub fn new(
        dag: CausalDag,
        family: Option<Family>,
        mechanism: Mechanism,
        self_coeffs: Vec<f64>,
        parent_coeffs: Vec<Vec<f64>>,
        root: RootProcess,
        phases: Vec<f64>,
    ) -> Result<Self, ScmError> {
        let k = dag.node_count();
        if self_coeffs.len() != k || parent_coeffs.len() != k || phases.len() != k {
            return Err(ScmError::Invalid(format!(
                "coefficient vectors must have one entry per node ({k})"
            )));
        }
        for (i, pc) in parent_coeffs.iter().enumerate() {
            if pc.len() != dag.parents(i).len() {
                return Err(ScmError::Invalid(format!(
                    "node {i} has {} parents but {} coefficients",
                    dag.parents(i).len(),
                    pc.len()
                )));
            }
        }
        let finite = self_coeffs
            .iter()
            .chain(parent_coeffs.iter().flatten())
            .chain(phases.iter())
            .chain([root.amplitude, root.period].iter())
            .all(|v| v.is_finite());
        if !finite || root.period == 0.0 {
            return Err(ScmError::Invalid("coefficients must be finite".into()));
        }
        Ok(Self {
            dag,
            family,
            mechanism,
            self_coeffs,
            parent_coeffs,
            root,
            phases,
            noise_scale: 1.0,
            burn_in: DEFAULT_BURN_IN,
            overflow_guard: DEFAULT_GUARD,
        })
    }

    /// Draws coefficients uniformly from the fixed sets, rejecting draws whose
    /// simulated series cross the overflow guard within `check_len` steps.
    pub fn sample(
        family: Family,
        mechanism: Mechanism,
        root: RootProcess,
        seed: u64,
        check_len: usize,
    ) -> Result<Self, ScmError> {
        Self::sample_on(family.dag(), Some(family), mechanism, root, seed, check_len)
    }

    /// Coefficient draw for an arbitrary DAG; `family` selects the
    /// non-additive form and the additive noise scale.
    pub fn sample_on(
        dag: CausalDag,
        family: Option<Family>,
        mechanism: Mechanism,
        root: RootProcess,
        seed: u64,
        check_len: usize,
    ) -> Result<Self, ScmError> {
        const ATTEMPTS: u64 = 100;
        let k = dag.node_count();
        for attempt in 0..ATTEMPTS {
            let mut rng = substream(&[tag::COEFFS, seed, attempt]);
            let self_coeffs: Vec<f64> = (0..k)
                .map(|_| *SELF_COEFF_SET.choose(&mut rng).unwrap())
                .collect();
            let parent_coeffs: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    dag.parents(i)
                        .iter()
                        .map(|_| *PARENT_COEFF_SET.choose(&mut rng).unwrap())
                        .collect()
                })
                .collect();
            let phases: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let spec = Self::new(
                dag.clone(),
                family,
                mechanism,
                self_coeffs,
                parent_coeffs,
                root.clone(),
                phases,
            )?;
            match spec.simulate_series(check_len.max(2), seed) {
                Ok(_) => return Ok(spec),
                Err(ScmError::NumericOverflow { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(ScmError::Unstable(ATTEMPTS as usize))
    }

    pub fn dag(&self) -> &CausalDag {
        &self.dag
    }

    pub fn family(&self) -> Option<Family> {
        self.family
    }

    pub fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    pub fn self_coeffs(&self) -> &[f64] {
        &self.self_coeffs
    }

    pub fn parent_coeffs(&self, node: usize) -> &[f64] {
        &self.parent_coeffs[node]
    }

    pub fn root_process(&self) -> &RootProcess {
        &self.root
    }

    pub fn phase(&self, node: usize) -> f64 {
        self.phases[node]
    }

    /// Draw of the raw standard-normal exogenous variable.
    pub fn noise(seed: u64, item: usize, node: usize, t_abs: usize) -> f64 {
        keyed_normal(&[tag::SCM_NOISE, seed, item as u64, node as u64, t_abs as u64])
    }

    fn parent_sum(&self, node: usize, prev: &[f64]) -> f64 {
        self.dag
            .parents(node)
            .iter()
            .zip(&self.parent_coeffs[node])
            .map(|(&p, &c)| c * prev[p])
            .sum()
    }

    fn is_root(&self, node: usize) -> bool {
        self.dag.parents(node).is_empty()
    }

    fn root_drive(&self, node: usize, t_abs: usize) -> f64 {
        self.root.amplitude * (2.0 * PI * t_abs as f64 / self.root.period + self.phases[node]).sin()
    }

    /// Part of an additive mechanism that does not involve noise, and the
    /// factor in front of the effective noise. `None` for non-additive nodes.
    pub fn additive_parts(&self, node: usize, prev: &[f64], t_abs: usize) -> Option<(f64, f64)> {
        let own = self.self_coeffs[node] * prev[node];
        if self.is_root(node) {
            return Some((own + self.root_drive(node, t_abs), 1.0));
        }
        match self.mechanism {
            Mechanism::Additive => {
                let c = self.family.map_or(1.0, Family::additive_noise_scale);
                Some((own + self.parent_sum(node, prev), c))
            }
            Mechanism::Nlna => None,
        }
    }

    /// Mechanism of `node` given all values at `t - 1` and the effective
    /// noise `e` (the raw draw times `noise_scale`).
    pub fn mechanism_value(&self, node: usize, prev: &[f64], t_abs: usize, e: f64) -> f64 {
        if let Some((base, c)) = self.additive_parts(node, prev, t_abs) {
            return base + c * e;
        }
        let beta = self.self_coeffs[node];
        let own = prev[node];
        let par = self.parent_sum(node, prev);
        match self.family {
            Some(Family::Tree) => beta * own * (e.abs() + 0.5) + par,
            Some(Family::Diamond) => (beta * own).exp() / (2.0 + e.abs()) + par,
            _ => (0.5 * par.abs() + e.abs()).sqrt() + beta * own,
        }
    }

    /// Recovers the effective noise that makes `mechanism_value` reproduce `x`.
    /// Non-additive forms only depend on `|e|`, so the magnitude is returned.
    pub fn abduct(&self, node: usize, prev: &[f64], t_abs: usize, x: f64) -> Result<f64, ScmError> {
        let fail = || ScmError::AbductionUnsolvable { node, t: t_abs };
        if let Some((base, c)) = self.additive_parts(node, prev, t_abs) {
            return Ok((x - base) / c);
        }
        let beta = self.self_coeffs[node];
        let own = prev[node];
        let par = self.parent_sum(node, prev);
        let m = match self.family {
            Some(Family::Tree) => {
                let d = beta * own;
                if d == 0.0 {
                    return Err(fail());
                }
                (x - par) / d - 0.5
            }
            Some(Family::Diamond) => {
                let r = x - par;
                if r <= 0.0 {
                    return Err(fail());
                }
                (beta * own).exp() / r - 2.0
            }
            _ => {
                let r = x - beta * own;
                if r < 0.0 {
                    return Err(fail());
                }
                r * r - 0.5 * par.abs()
            }
        };
        // Round-off can push an exact zero slightly negative.
        if m < -1e-9 * (1.0 + x.abs()) || !m.is_finite() {
            return Err(fail());
        }
        Ok(m.max(0.0))
    }

    fn check(&self, node: usize, t: usize, v: f64) -> Result<f64, ScmError> {
        if v.is_finite() && v.abs() <= self.overflow_guard {
            Ok(v)
        } else {
            Err(ScmError::NumericOverflow { node, t })
        }
    }

    /// One long series of `len` steps after burn-in, stored `node x time`,
    /// with absolute time origin `burn_in`.
    pub fn simulate_series(&self, len: usize, seed: u64) -> Result<Vec<Vec<f64>>, ScmError> {
        self.generate(0, len, seed)
    }

    fn generate(&self, item: usize, len: usize, seed: u64) -> Result<Vec<Vec<f64>>, ScmError> {
        let k = self.dag.node_count();
        let mut out = vec![Vec::with_capacity(len); k];
        let mut prev = vec![0.0; k];
        let mut cur = vec![0.0; k];
        for t_abs in 0..self.burn_in + len {
            for i in 0..k {
                let e = self.noise_scale * Self::noise(seed, item, i, t_abs);
                cur[i] = self.check(i, t_abs, self.mechanism_value(i, &prev, t_abs, e))?;
            }
            if t_abs >= self.burn_in {
                for i in 0..k {
                    out[i].push(cur[i]);
                }
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        Ok(out)
    }

    /// `batch` independent windows, each started from zero and burned in.
    pub fn simulate(
        &self,
        batch: usize,
        context_len: usize,
        total_len: usize,
        seed: u64,
    ) -> Result<SeriesBatch, ScmError> {
        if total_len < 2 {
            return Err(ScmError::Invalid("total_len must be at least 2".into()));
        }
        let mut values = Vec::with_capacity(batch * self.dag.node_count() * total_len);
        for b in 0..batch {
            for s in self.generate(b, total_len, seed)? {
                values.extend(s);
            }
        }
        Ok(SeriesBatch::new(
            batch,
            self.dag.node_count(),
            context_len,
            total_len,
            values,
            vec![self.burn_in; batch],
        )?)
    }

    fn check_batch(&self, data: &SeriesBatch) -> Result<(), ScmError> {
        if data.nodes() != self.dag.node_count() {
            return Err(ScmError::Shape(format!(
                "batch has {} nodes, model has {}",
                data.nodes(),
                self.dag.node_count()
            )));
        }
        Ok(())
    }

    fn prev_values(data: &SeriesBatch, b: usize, t: usize) -> Vec<f64> {
        (0..data.nodes()).map(|k| data.get(b, k, t)).collect()
    }

    /// Forward simulation of the forecast window of every item in `context`
    /// under the schedule, with fresh noise keyed by `noise_seed`. Values
    /// after the context in the input are ignored.
    pub fn simulate_interventional(
        &self,
        context: &SeriesBatch,
        schedules: &[InterventionSchedule],
        noise_seed: u64,
    ) -> Result<SeriesBatch, ScmError> {
        self.check_batch(context)?;
        let (k, tau, total) = (context.nodes(), context.context_len(), context.total_len());
        let mut out = context.clone();
        for b in 0..context.batch() {
            let sched = pick_schedule(schedules, context.batch(), b)?;
            sched.validate(k, tau, total)?;
            let origin = context.time_origin(b);
            let mut prev = Self::prev_values(context, b, tau - 1);
            let mut cur = vec![0.0; k];
            for t in tau..total {
                let t_abs = origin + t;
                for i in 0..k {
                    cur[i] = match sched.get(i, t) {
                        Some(g) => g,
                        None => {
                            let e = self.noise_scale * Self::noise(noise_seed, b, i, t_abs);
                            self.check(i, t_abs, self.mechanism_value(i, &prev, t_abs, e))?
                        }
                    };
                    out.set(b, i, t, cur[i]);
                }
                std::mem::swap(&mut prev, &mut cur);
            }
        }
        Ok(out)
    }

    /// Effective noise of every node over the forecast window of `factual`,
    /// laid out `[node][t - context_len]`.
    pub fn abduct_window(&self, factual: &SeriesBatch, b: usize) -> Result<Vec<Vec<f64>>, ScmError> {
        self.check_batch(factual)?;
        let (k, tau, total) = (factual.nodes(), factual.context_len(), factual.total_len());
        let origin = factual.time_origin(b);
        let mut out = vec![Vec::with_capacity(total - tau); k];
        for t in tau..total {
            let prev = Self::prev_values(factual, b, t - 1);
            for (i, row) in out.iter_mut().enumerate() {
                row.push(self.abduct(i, &prev, origin + t, factual.get(b, i, t))?);
            }
        }
        Ok(out)
    }

    /// Ground-truth counterfactual: noises abducted from the factual forecast
    /// window, schedule applied, mechanisms rerun from the shared context.
    ///
    /// For non-additive forms the abducted quantity is `|e|`, which is all
    /// those mechanisms consume, so the result is exact there as well.
    pub fn simulate_counterfactual(
        &self,
        factual: &SeriesBatch,
        schedules: &[InterventionSchedule],
    ) -> Result<SeriesBatch, ScmError> {
        self.check_batch(factual)?;
        let (k, tau, total) = (factual.nodes(), factual.context_len(), factual.total_len());
        let mut out = factual.clone();
        for b in 0..factual.batch() {
            let sched = pick_schedule(schedules, factual.batch(), b)?;
            sched.validate(k, tau, total)?;
            let origin = factual.time_origin(b);
            let mut prev = Self::prev_values(factual, b, tau - 1);
            let mut cur = vec![0.0; k];
            for t in tau..total {
                let t_abs = origin + t;
                let fprev = Self::prev_values(factual, b, t - 1);
                for i in 0..k {
                    cur[i] = match sched.get(i, t) {
                        Some(g) => g,
                        None => {
                            let e = self.abduct(i, &fprev, t_abs, factual.get(b, i, t))?;
                            self.check(i, t_abs, self.mechanism_value(i, &prev, t_abs, e))?
                        }
                    };
                    out.set(b, i, t, cur[i]);
                }
                std::mem::swap(&mut prev, &mut cur);
            }
        }
        Ok(out)
    }
}

pub(crate) fn pick_schedule<'a>(
    schedules: &'a [InterventionSchedule],
    batch: usize,
    b: usize,
) -> Result<&'a InterventionSchedule, ScmError> {
    match schedules.len() {
        1 => Ok(&schedules[0]),
        n if n == batch => Ok(&schedules[b]),
        n => Err(ScmError::ScheduleCount {
            expected: batch,
            got: n,
        }),
    }
}

/// Clamps the listed roots of window `b` over the forecast window to their
/// own values `source_offset` steps earlier, which must lie in the context.
pub fn build_intervention_by_shift(
    context: &SeriesBatch,
    b: usize,
    roots: &[usize],
    source_offset: usize,
) -> Result<InterventionSchedule, ScmError> {
    let (tau, total) = (context.context_len(), context.total_len());
    let horizon = total - tau;
    if source_offset < horizon {
        return Err(ScmError::OffsetTooSmall {
            offset: source_offset,
            horizon,
        });
    }
    if source_offset > tau {
        return Err(ScmError::OffsetTooLarge {
            offset: source_offset,
            context_len: tau,
        });
    }
    let mut s = InterventionSchedule::new(tau, total);
    for &r in roots {
        if r >= context.nodes() {
            return Err(ScheduleError::NodeOutOfRange {
                node: r,
                node_count: context.nodes(),
            }
            .into());
        }
        for t in tau..total {
            s.insert(r, t, context.get(b, r, t - source_offset))?;
        }
    }
    Ok(s)
}

/// Shift schedules for every window of a batch.
pub fn shift_schedules(
    context: &SeriesBatch,
    roots: &[usize],
    source_offset: usize,
) -> Result<Vec<InterventionSchedule>, ScmError> {
    (0..context.batch())
        .map(|b| build_intervention_by_shift(context, b, roots, source_offset))
        .collect()
}

/// Train and test windows cut from one long simulated series.
pub struct Dataset {
    pub train: SeriesBatch,
    pub test: SeriesBatch,
}

/// Splits a `series_len` series at `train_fraction` and slides stride-1
/// windows over each part, so no window straddles the split.
pub fn make_dataset(
    spec: &ScmSpec,
    series_len: usize,
    context_len: usize,
    total_len: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset, ScmError> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(ScmError::Invalid("train fraction must lie in (0, 1)".into()));
    }
    let series = spec.simulate_series(series_len, seed)?;
    let cut = (series_len as f64 * train_fraction).round() as usize;
    let (train, test): (Vec<Vec<f64>>, Vec<Vec<f64>>) = series
        .into_iter()
        .map(|mut s| {
            let tail = s.split_off(cut);
            (s, tail)
        })
        .unzip();
    Ok(Dataset {
        train: SeriesBatch::windows(&train, spec.burn_in, context_len, total_len, 1)?,
        test: SeriesBatch::windows(&test, spec.burn_in + cut, context_len, total_len, 1)?,
    })
}
