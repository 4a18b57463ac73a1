//! One-dimensional conditional continuous normalizing flows.
//!
//! A velocity field `v(x, s; c)` transports data at flow time `s = 0` to the
//! standard-normal base at `s = 1`. Encoding integrates forward, decoding
//! integrates the same ODE backward, and the log-density follows from the
//! instantaneous change of variables, which in one dimension only needs the
//! scalar derivative `dv/dx`.

use crate::autodiff::AutodiffError;
use crate::encoder::HiddenState;
use crate::nn::Mlp;
use crate::tensor::Tensor2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("flow trajectory left the finite range")]
    NonFiniteTrajectory,
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} rows, got {got}")]
    RowMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Forward-mode derivative through the network.
    ExactAutodiff,
    /// `(v(x + h) - v(x - h)) / 2h`.
    CentralDifference(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub integrator: Integrator,
    pub steps: usize,
    pub divergence: DivergenceMode,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            integrator: Integrator::Rk4,
            steps: 64,
            divergence: DivergenceMode::ExactAutodiff,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::InvalidConfig("steps must be at least 1".into()));
        }
        if let DivergenceMode::CentralDifference(h) = self.divergence {
            if !(h > 0.0 && h.is_finite()) {
                return Err(FlowError::InvalidConfig(
                    "finite-difference step must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Velocity of a batch of rows that share one flow time.
pub trait VelocityField {
    /// Everything that depends on the conditioning alone, computed once per
    /// integration.
    type Prepared;

    fn prepare(&self, cond: &Tensor2) -> Result<Self::Prepared, FlowError>;

    /// Writes `v(x[r], s)` into `v[r]` and, when requested, `dv/dx` into
    /// `dv[r]`.
    fn eval(
        &self,
        prep: &Self::Prepared,
        x: &[f64],
        s: f64,
        v: &mut [f64],
        dv: Option<&mut [f64]>,
    ) -> Result<(), FlowError>;
}

/// `v = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

/// `v = c`.
#[derive(Clone, Copy, Debug)]
pub struct ConstField(pub f64);

/// `v = a x`.
#[derive(Clone, Copy, Debug)]
pub struct LinearField(pub f64);

macro_rules! analytic_field {
    ($ty:ty, |$me:ident, $x:ident| $val:expr, $der:expr) => {
        impl VelocityField for $ty {
            type Prepared = ();

            fn prepare(&self, _cond: &Tensor2) -> Result<(), FlowError> {
                Ok(())
            }

            fn eval(
                &self,
                _prep: &(),
                xs: &[f64],
                _s: f64,
                v: &mut [f64],
                dv: Option<&mut [f64]>,
            ) -> Result<(), FlowError> {
                let $me = self;
                for (o, &$x) in v.iter_mut().zip(xs) {
                    *o = $val;
                }
                if let Some(dv) = dv {
                    dv.iter_mut().for_each(|d| *d = $der);
                }
                Ok(())
            }
        }
    };
}

analytic_field!(ZeroField, |_me, _x| 0.0, 0.0);
analytic_field!(ConstField, |me, _x| me.0, 0.0);
analytic_field!(LinearField, |me, x| me.0 * x, me.0);

/// Number of flow-time features placed after `x` in the network input.
pub const TIME_FEATURES: usize = 2;

/// Network input layout: `[x, s, sin(2 pi s), conditioning..]`.
pub fn time_features(s: f64) -> [f64; TIME_FEATURES] {
    [s, (2.0 * PI * s).sin()]
}

impl VelocityField for Mlp {
    /// First-layer pre-activation contributed by conditioning and bias.
    type Prepared = Tensor2;

    fn prepare(&self, cond: &Tensor2) -> Result<Tensor2, FlowError> {
        let first = &self.layers[0];
        let lead = 1 + TIME_FEATURES;
        if cond.cols() + lead != first.w.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "velocity conditioning",
                left: cond.shape(),
                right: first.w.shape(),
            }
            .into());
        }
        let w_cond = first.w.slice_rows(lead, cond.cols());
        let mut pre = cond.matmul(&w_cond)?;
        pre.add_row_assign(first.b.data());
        Ok(pre)
    }

    fn eval(
        &self,
        prep: &Tensor2,
        x: &[f64],
        s: f64,
        v: &mut [f64],
        dv: Option<&mut [f64]>,
    ) -> Result<(), FlowError> {
        let rows = prep.rows();
        if x.len() != rows {
            return Err(FlowError::RowMismatch {
                expected: rows,
                got: x.len(),
            });
        }
        let first = &self.layers[0];
        let width = first.w.cols();
        let wx = first.w.row(0);
        let [ts, tsin] = time_features(s);
        let mut bias = first.w.row(1).to_vec();
        for (b, w) in bias.iter_mut().zip(first.w.row(2)) {
            *b = *b * ts + w * tsin;
        }
        let mut a = prep.clone();
        for r in 0..rows {
            let xr = x[r];
            for ((o, &w), &b) in a.row_mut(r).iter_mut().zip(wx).zip(&bias) {
                *o += xr * w + b;
            }
        }
        let want_dv = dv.is_some();
        // Tangent of the pre-activation along x; the first layer's is the
        // same row for every input.
        let mut da = if want_dv {
            Some(Tensor2::from_fn(rows, width, |_, j| wx[j]))
        } else {
            None
        };
        for layer in &self.layers[1..] {
            let mut h = a;
            let mut dh = da.take();
            for (i, hv) in h.data_mut().iter_mut().enumerate() {
                let t = hv.tanh();
                *hv = t;
                if let Some(d) = dh.as_mut() {
                    d.data_mut()[i] *= 1.0 - t * t;
                }
            }
            a = h.matmul(&layer.w)?;
            a.add_row_assign(layer.b.data());
            da = dh.map(|d| d.matmul(&layer.w)).transpose()?;
        }
        for r in 0..rows {
            v[r] = a.get(r, 0);
        }
        if let (Some(dv), Some(da)) = (dv, da) {
            for r in 0..rows {
                dv[r] = da.get(r, 0);
            }
        }
        if v[..rows].iter().any(|q| !q.is_finite()) {
            return Err(FlowError::NonFiniteTrajectory);
        }
        Ok(())
    }
}

/// Velocity and divergence under the configured divergence mode.
fn eval_with_div<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    prep: &F::Prepared,
    x: &[f64],
    s: f64,
    v: &mut [f64],
    dv: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), FlowError> {
    match cfg.divergence {
        DivergenceMode::ExactAutodiff => field.eval(prep, x, s, v, Some(dv)),
        DivergenceMode::CentralDifference(h) => {
            field.eval(prep, x, s, v, None)?;
            for (o, &xi) in scratch.iter_mut().zip(x) {
                *o = xi + h;
            }
            field.eval(prep, &scratch.to_vec(), s, dv, None)?;
            let plus = dv.to_vec();
            for (o, &xi) in scratch.iter_mut().zip(x) {
                *o = xi - h;
            }
            field.eval(prep, &scratch.to_vec(), s, dv, None)?;
            for (d, p) in dv.iter_mut().zip(plus) {
                *d = (p - *d) / (2.0 * h);
            }
            Ok(())
        }
    }
}

/// Fixed-step solve of `dx/ds = v` from `s0` to `s1`. With `div`, also
/// integrates `dv/dx` along the path into it.
fn integrate<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    prep: &F::Prepared,
    x0: &[f64],
    s0: f64,
    s1: f64,
    mut div: Option<&mut [f64]>,
) -> Result<Vec<f64>, FlowError> {
    cfg.validate()?;
    let n = x0.len();
    let h = (s1 - s0) / cfg.steps as f64;
    let mut x = x0.to_vec();
    let mut tmp = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut ks = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut ds = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let with_div = div.is_some();
    let mut stage = |x: &[f64], s: f64, k: &mut [f64], d: &mut [f64]| {
        if with_div {
            eval_with_div(field, cfg, prep, x, s, k, d, &mut scratch)
        } else {
            field.eval(prep, x, s, k, None)
        }
    };
    for step in 0..cfg.steps {
        let s = s0 + h * step as f64;
        match cfg.integrator {
            Integrator::Euler => {
                let [k1, ..] = &mut ks;
                let [d1, ..] = &mut ds;
                stage(&x, s, k1, d1)?;
                for i in 0..n {
                    x[i] += h * k1[i];
                }
                if let Some(acc) = div.as_deref_mut() {
                    for i in 0..n {
                        acc[i] += h * d1[i];
                    }
                }
            }
            Integrator::Rk4 => {
                let [k1, k2, k3, k4] = &mut ks;
                let [d1, d2, d3, d4] = &mut ds;
                stage(&x, s, k1, d1)?;
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * h * k1[i];
                }
                stage(&tmp, s + 0.5 * h, k2, d2)?;
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * h * k2[i];
                }
                stage(&tmp, s + 0.5 * h, k3, d3)?;
                for i in 0..n {
                    tmp[i] = x[i] + h * k3[i];
                }
                stage(&tmp, s + h, k4, d4)?;
                for i in 0..n {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                if let Some(acc) = div.as_deref_mut() {
                    for i in 0..n {
                        acc[i] += h / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
                    }
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteTrajectory);
        }
    }
    Ok(x)
}

/// Data to latent: integrate from `s = 0` to `s = 1`.
pub fn encode<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    prep: &F::Prepared,
    x: &[f64],
) -> Result<Vec<f64>, FlowError> {
    integrate(field, cfg, prep, x, 0.0, 1.0, None)
}

/// Latent to data: the same ODE solved backward from `s = 1` to `s = 0`.
pub fn decode<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    prep: &F::Prepared,
    z: &[f64],
) -> Result<Vec<f64>, FlowError> {
    integrate(field, cfg, prep, z, 1.0, 0.0, None)
}

pub fn std_normal_logpdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * PI).ln()
}

/// Per-row `(log p(x), z)`: base log-density of the encoding plus the
/// integrated divergence along the forward path.
pub fn log_density<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    prep: &F::Prepared,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
    let mut div = vec![0.0; x.len()];
    let z = integrate(field, cfg, prep, x, 0.0, 1.0, Some(&mut div))?;
    let logp = z
        .iter()
        .zip(&div)
        .map(|(&z, &d)| std_normal_logpdf(z) + d)
        .collect();
    Ok((logp, z))
}

fn single_cond(h: &HiddenState) -> Tensor2 {
    let c = h.conditioning();
    let n = c.len();
    Tensor2::from_vec(1, n, c).expect("length matches")
}

/// Single-point conveniences taking an explicit conditioning tuple.
pub fn encode_one<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    x: f64,
    h: &HiddenState,
) -> Result<f64, FlowError> {
    let prep = field.prepare(&single_cond(h))?;
    Ok(encode(field, cfg, &prep, &[x])?[0])
}

pub fn decode_one<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    z: f64,
    h: &HiddenState,
) -> Result<f64, FlowError> {
    let prep = field.prepare(&single_cond(h))?;
    Ok(decode(field, cfg, &prep, &[z])?[0])
}

pub fn log_density_one<F: VelocityField>(
    field: &F,
    cfg: &FlowConfig,
    x: f64,
    h: &HiddenState,
) -> Result<(f64, f64), FlowError> {
    let prep = field.prepare(&single_cond(h))?;
    let (l, z) = log_density(field, cfg, &prep, &[x])?;
    Ok((l[0], z[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Axis, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rk4() -> FlowConfig {
        FlowConfig::default()
    }

    fn euler() -> FlowConfig {
        FlowConfig {
            integrator: Integrator::Euler,
            ..FlowConfig::default()
        }
    }

    fn empty() -> Tensor2 {
        Tensor2::zeros(3, 0)
    }

    #[test]
    fn analytic_fields() {
        let xs = [-1.0, 0.0, 2.5];
        for cfg in [rk4(), euler()] {
            assert_eq!(encode(&ZeroField, &cfg, &(), &xs).unwrap(), xs);
            assert_eq!(decode(&ZeroField, &cfg, &(), &xs).unwrap(), xs);
            let z = encode(&ConstField(1.0), &cfg, &(), &xs).unwrap();
            for (a, b) in z.iter().zip(xs) {
                assert!((a - (b + 1.0)).abs() < 1e-13);
            }
        }
        let z = encode(&LinearField(1.0), &rk4(), &(), &xs).unwrap();
        for (a, b) in z.iter().zip(xs) {
            assert!((a - b * std::f64::consts::E).abs() < 1e-6);
        }
        let back = decode(&LinearField(1.0), &rk4(), &(), &z).unwrap();
        for (a, b) in back.iter().zip(xs) {
            assert!((a - b).abs() < 1e-6);
        }
        let _ = empty();
    }

    #[test]
    fn affine_log_density() {
        let a = 0.7;
        let xs = [-1.3, 0.2, 1.9];
        let (lp, z) = log_density(&LinearField(a), &rk4(), &(), &xs).unwrap();
        for i in 0..3 {
            let want = std_normal_logpdf(xs[i] * a.exp()) + a;
            assert!((lp[i] - want).abs() < 1e-5);
            assert!((z[i] - xs[i] * a.exp()).abs() < 1e-6);
        }
        let (lp, _) = log_density(&ZeroField, &rk4(), &(), &xs).unwrap();
        for i in 0..3 {
            assert_eq!(lp[i], std_normal_logpdf(xs[i]));
        }
    }

    fn random_net(seed: u64, cond: usize) -> (Mlp, Tensor2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[3 + cond, 16, 16, 1], &mut rng);
        let c = Tensor2::from_fn(4, cond, |_, _| rng.gen_range(-1.0..1.0));
        (net, c)
    }

    #[test]
    fn mlp_field_matches_plain_forward_and_tape_derivative() {
        let (net, cond) = random_net(1, 6);
        let prep = net.prepare(&cond).unwrap();
        let xs = [0.3, -1.2, 2.0, 0.0];
        let s = 0.37;
        let mut v = [0.0; 4];
        let mut dv = [0.0; 4];
        net.eval(&prep, &xs, s, &mut v, Some(&mut dv)).unwrap();
        for r in 0..4 {
            let [a, b] = time_features(s);
            let mut row = vec![xs[r], a, b];
            row.extend_from_slice(cond.row(r));
            let input = Tensor2::from_vec(1, row.len(), row).unwrap();
            assert!((net.forward(&input).unwrap().get(0, 0) - v[r]).abs() < 1e-12);

            let mut tape = Tape::new();
            let mut all = Vec::new();
            let vars = net.bind(&mut tape, &mut all).unwrap();
            let xv = tape.leaf(input.slice_cols(0, 1)).unwrap();
            let rest = tape.leaf(input.slice_cols(1, input.cols() - 1)).unwrap();
            let inp = tape.concat(&[xv, rest], Axis::Cols).unwrap();
            let out = Mlp::forward_tape(&vars, &mut tape, inp).unwrap();
            let g = tape.backward(out).unwrap();
            assert!((g.get(xv).unwrap().get(0, 0) - dv[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_modes_agree() {
        for seed in 0..5 {
            let (net, cond) = random_net(10 + seed, 4);
            let prep = net.prepare(&cond).unwrap();
            let xs = [0.5, -0.5, 1.5, -2.0];
            let exact = log_density(&net, &rk4(), &prep, &xs).unwrap().0;
            let cfg = FlowConfig {
                divergence: DivergenceMode::CentralDifference(1e-4),
                ..rk4()
            };
            let fd = log_density(&net, &cfg, &prep, &xs).unwrap().0;
            for (a, b) in exact.iter().zip(fd) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn random_net_round_trip_and_order() {
        let (net, cond) = random_net(3, 6);
        let prep = net.prepare(&cond).unwrap();
        let xs = [0.1, -2.0, 1.0, 3.0];
        let err = |steps| {
            let cfg = rk4().with_steps(steps);
            let z = encode(&net, &cfg, &prep, &xs).unwrap();
            let back = decode(&net, &cfg, &prep, &z).unwrap();
            back.iter().zip(xs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let e16 = err(16);
        let e32 = err(32);
        assert!(err(64) < 1e-4);
        assert!(e16 / e32 > 10.0, "{e16} {e32}");
    }

    #[test]
    fn density_integrates_to_one() {
        let (net, cond) = random_net(4, 6);
        let row = cond.slice_rows(0, 1);
        let prep = net.prepare(&row).unwrap();
        let (lo, hi, n) = (-12.0, 12.0, 4001);
        let dx = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = lo + dx * i as f64;
            let (lp, _) = log_density(&net, &rk4(), &prep, &[x]).unwrap();
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * lp[0].exp() * dx;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn parent_pool_is_order_free() {
        let (net, _) = random_net(5, 4);
        let own = vec![0.1, -0.3];
        let a = HiddenState {
            own: own.clone(),
            parents: BTreeMap::from([(2, vec![0.5, 0.2]), (7, vec![-0.1, 0.9])]),
        };
        let mut parents = BTreeMap::new();
        parents.insert(7, vec![-0.1, 0.9]);
        parents.insert(2, vec![0.5, 0.2]);
        let b = HiddenState { own, parents };
        let cfg = rk4();
        assert_eq!(
            encode_one(&net, &cfg, 0.8, &a).unwrap(),
            encode_one(&net, &cfg, 0.8, &b).unwrap()
        );
    }

    #[test]
    fn bad_config() {
        assert!(rk4().with_steps(0).validate().is_err());
        let cfg = FlowConfig {
            divergence: DivergenceMode::CentralDifference(0.0),
            ..rk4()
        };
        assert!(cfg.validate().is_err());
    }
}
