//! Small feed-forward and gated-recurrent building blocks.
//!
//! Each block can run eagerly on [`Tensor2`] values or record itself on a
//! [`Tape`] for training. Both paths perform the same arithmetic in the same
//! order, so their outputs agree bitwise.

use crate::autodiff::{sigmoid, AutodiffError, Axis, Tape, Var};
use crate::tensor::Tensor2;
use rand::Rng;

/// Visits every parameter tensor in a fixed order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor2));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.data().len());
        n
    }
}

/// Affine layer `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor2,
    pub b: Tensor2,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor2::zeros(input, output),
            b: Tensor2::zeros(1, output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            w: Tensor2::from_fn(input, output, |_, _| rng.gen_range(-limit..limit)),
            b: Tensor2::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2, AutodiffError> {
        let mut y = x.matmul(&self.w)?;
        y.add_row_assign(self.b.data());
        Ok(y)
    }

    pub fn bind(&self, tape: &mut Tape, all: &mut Vec<Var>) -> Result<DenseVars, AutodiffError> {
        let w = tape.leaf(self.w.clone())?;
        let b = tape.leaf(self.b.clone())?;
        all.push(w);
        all.push(b);
        Ok(DenseVars { w, b })
    }

    pub fn forward_tape(
        vars: DenseVars,
        tape: &mut Tape,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let y = tape.matmul(x, vars.w)?;
        tape.add(y, vars.b)
    }
}

impl Parameterized for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        f(format!("{prefix}w"), &self.w);
        f(format!("{prefix}b"), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor2)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Multi-layer perceptron with `tanh` between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<DenseVars>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Dense::glorot(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.cols()).unwrap_or(0)
    }

    /// Eager forward pass.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2, AutodiffError> {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.map(f64::tanh);
            }
        }
        if !h.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op: "mlp" });
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape, all: &mut Vec<Var>) -> Result<MlpVars, AutodiffError> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.bind(tape, all))
            .collect::<Result<_, _>>()?;
        Ok(MlpVars { layers })
    }

    pub fn forward_tape(
        vars: &MlpVars,
        tape: &mut Tape,
        input: Var,
    ) -> Result<Var, AutodiffError> {
        let last = vars.layers.len() - 1;
        let mut h = input;
        for (i, lv) in vars.layers.iter().enumerate() {
            h = Dense::forward_tape(*lv, tape, h)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}."), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor2)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

/// Gated recurrent cell.
///
/// Gate layout along the `3 * hidden` axis is `[reset | update | candidate]`:
///
/// ```text
/// r  = sigmoid(x W_r + b_r + h U_r + c_r)
/// u  = sigmoid(x W_u + b_u + h U_u + c_u)
/// n  = tanh(x W_n + b_n + r * (h U_n + c_n))
/// h' = h + u * (n - h)
/// ```
///
/// so an update gate saturated at one replaces the state by the candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_in: Tensor2,
    pub w_hid: Tensor2,
    pub b_in: Tensor2,
    pub b_hid: Tensor2,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_in: Var,
    pub w_hid: Var,
    pub b_in: Var,
    pub b_hid: Var,
}

impl GruCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_in: Tensor2::zeros(input, 3 * hidden),
            w_hid: Tensor2::zeros(hidden, 3 * hidden),
            b_in: Tensor2::zeros(1, 3 * hidden),
            b_hid: Tensor2::zeros(1, 3 * hidden),
        }
    }

    /// Uniform in `±1/sqrt(hidden)`, the usual recurrent-cell initialization.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut draw = |r, c| Tensor2::from_fn(r, c, |_, _| rng.gen_range(-k..k));
        Self {
            w_in: draw(input, 3 * hidden),
            w_hid: draw(hidden, 3 * hidden),
            b_in: draw(1, 3 * hidden),
            b_hid: draw(1, 3 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hid.rows()
    }

    /// One eager step for a block of rows. `x: rows x input`, `h: rows x hidden`.
    pub fn step(&self, x: &Tensor2, h: &Tensor2) -> Result<Tensor2, AutodiffError> {
        let hd = self.hidden_dim();
        let mut gi = x.matmul(&self.w_in)?;
        gi.add_row_assign(self.b_in.data());
        let mut gh = h.matmul(&self.w_hid)?;
        gh.add_row_assign(self.b_hid.data());
        let mut out = Tensor2::zeros(h.rows(), hd);
        for r in 0..h.rows() {
            let (gi, gh, hr) = (gi.row(r), gh.row(r), h.row(r));
            let o = out.row_mut(r);
            for j in 0..hd {
                let reset = sigmoid(gi[j] + gh[j]);
                let update = sigmoid(gi[hd + j] + gh[hd + j]);
                let cand = (gi[2 * hd + j] + reset * gh[2 * hd + j]).tanh();
                o[j] = hr[j] + update * (cand + -hr[j]);
            }
        }
        if !out.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op: "gru" });
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape, all: &mut Vec<Var>) -> Result<GruVars, AutodiffError> {
        let w_in = tape.leaf(self.w_in.clone())?;
        let w_hid = tape.leaf(self.w_hid.clone())?;
        let b_in = tape.leaf(self.b_in.clone())?;
        let b_hid = tape.leaf(self.b_hid.clone())?;
        all.extend([w_in, w_hid, b_in, b_hid]);
        Ok(GruVars {
            w_in,
            w_hid,
            b_in,
            b_hid,
        })
    }

    /// Records one step on the tape; composes only the closed primitive set.
    pub fn step_tape(
        vars: GruVars,
        hidden: usize,
        tape: &mut Tape,
        x: Var,
        h: Var,
    ) -> Result<Var, AutodiffError> {
        let gi = tape.matmul(x, vars.w_in)?;
        let gi = tape.add(gi, vars.b_in)?;
        let gh = tape.matmul(h, vars.w_hid)?;
        let gh = tape.add(gh, vars.b_hid)?;
        let gi_ru = tape.slice(gi, Axis::Cols, 0, 2 * hidden)?;
        let gh_ru = tape.slice(gh, Axis::Cols, 0, 2 * hidden)?;
        let ru = tape.add(gi_ru, gh_ru)?;
        let ru = tape.sigmoid(ru)?;
        let reset = tape.slice(ru, Axis::Cols, 0, hidden)?;
        let update = tape.slice(ru, Axis::Cols, hidden, hidden)?;
        let gi_n = tape.slice(gi, Axis::Cols, 2 * hidden, hidden)?;
        let gh_n = tape.slice(gh, Axis::Cols, 2 * hidden, hidden)?;
        let gated = tape.mul(reset, gh_n)?;
        let cand = tape.add(gi_n, gated)?;
        let cand = tape.tanh(cand)?;
        let diff = tape.sub(cand, h)?;
        let delta = tape.mul(update, diff)?;
        tape.add(h, delta)
    }
}

impl Parameterized for GruCell {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        f(format!("{prefix}w_in"), &self.w_in);
        f(format!("{prefix}w_hid"), &self.w_hid);
        f(format!("{prefix}b_in"), &self.b_in);
        f(format!("{prefix}b_hid"), &self.b_hid);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor2)) {
        f(&mut self.w_in);
        f(&mut self.w_hid);
        f(&mut self.b_in);
        f(&mut self.b_hid);
    }
}
