//! Per-node recurrent summaries of the past and the conditioning tuple built
//! from them.
//!
//! States are kept batched: for every node one `rows x hidden` matrix, where
//! each row is an independent trajectory (a window, or a sample drawn from a
//! window). Values enter the cell standardized by their window's context
//! statistics.

use crate::autodiff::AutodiffError;
use crate::data::SeriesBatch;
use crate::graph::CausalDag;
use crate::nn::{GruCell, Parameterized};
use crate::tensor::Tensor2;
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("context window is empty")]
    EmptyContext,
    #[error("missing value for node {0}")]
    MissingNodeValue(usize),
    #[error("batch has {got} nodes, encoder expects {expected}")]
    NodeCount { got: usize, expected: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Recurrent parameters: one shared cell, or one cell per node.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnBank {
    cells: Vec<GruCell>,
    node_count: usize,
    per_node: bool,
}

impl RnnBank {
    pub fn new<R: Rng + ?Sized>(
        node_count: usize,
        input_dim: usize,
        hidden: usize,
        per_node: bool,
        rng: &mut R,
    ) -> Self {
        let n = if per_node { node_count } else { 1 };
        Self {
            cells: (0..n).map(|_| GruCell::new(input_dim, hidden, rng)).collect(),
            node_count,
            per_node,
        }
    }

    pub fn zeros(node_count: usize, input_dim: usize, hidden: usize, per_node: bool) -> Self {
        let n = if per_node { node_count } else { 1 };
        Self {
            cells: (0..n).map(|_| GruCell::zeros(input_dim, hidden)).collect(),
            node_count,
            per_node,
        }
    }

    pub fn per_node(&self) -> bool {
        self.per_node
    }

    pub fn cells(&self) -> &[GruCell] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [GruCell] {
        &mut self.cells
    }

    pub fn cell_index(&self, node: usize) -> usize {
        if self.per_node {
            node
        } else {
            0
        }
    }

    pub fn cell(&self, node: usize) -> &GruCell {
        &self.cells[self.cell_index(node)]
    }

    pub fn hidden_dim(&self) -> usize {
        self.cells[0].hidden_dim()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// One recurrent update of `node`'s state for every row, with the
    /// standardized value `x[row]` as input.
    pub fn step(&self, node: usize, own: &Tensor2, x: &[f64]) -> Result<Tensor2, EncoderError> {
        Ok(self.cell(node).step(&Tensor2::column(x), own)?)
    }

    /// Rolls every node's cell over its standardized context values. Row `r`
    /// of the result follows window `rows[r]` of `context`.
    pub fn init_from_context(
        &self,
        context: &SeriesBatch,
        rows: &[usize],
    ) -> Result<NodeStates, EncoderError> {
        if context.context_len() == 0 {
            return Err(EncoderError::EmptyContext);
        }
        if context.nodes() != self.node_count {
            return Err(EncoderError::NodeCount {
                got: context.nodes(),
                expected: self.node_count,
            });
        }
        let hd = self.hidden_dim();
        let mut own = Vec::with_capacity(self.node_count);
        let mut x = vec![0.0; rows.len()];
        for k in 0..self.node_count {
            let stats: Vec<_> = rows.iter().map(|&b| context.context_stats(b, k)).collect();
            let mut h = Tensor2::zeros(rows.len(), hd);
            for t in 0..context.context_len() {
                for (r, &b) in rows.iter().enumerate() {
                    x[r] = stats[r].standardize(context.get(b, k, t));
                }
                h = self.step(k, &h, &x)?;
            }
            own.push(h);
        }
        Ok(NodeStates { own })
    }

    /// Steps every node once with its standardized value per row.
    pub fn advance_all(
        &self,
        states: &NodeStates,
        values: &[Vec<f64>],
    ) -> Result<NodeStates, EncoderError> {
        if values.len() != self.node_count {
            return Err(EncoderError::MissingNodeValue(values.len().min(self.node_count)));
        }
        let own = (0..self.node_count)
            .map(|k| self.step(k, &states.own[k], &values[k]))
            .collect::<Result<_, _>>()?;
        Ok(NodeStates { own })
    }
}

impl Parameterized for RnnBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        for (i, c) in self.cells.iter().enumerate() {
            c.visit(&format!("{prefix}rnn{i}."), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor2)) {
        for c in &mut self.cells {
            c.visit_mut(f);
        }
    }
}

/// Own recurrent state of one node plus the states of its parents.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub own: Vec<f64>,
    pub parents: BTreeMap<usize, Vec<f64>>,
}

impl HiddenState {
    /// Flow input: own state followed by the mean of the parent states (zeros
    /// for a root).
    pub fn conditioning(&self) -> Vec<f64> {
        let d = self.own.len();
        let mut mean = vec![0.0; d];
        for p in self.parents.values() {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        if !self.parents.is_empty() {
            let inv = 1.0 / self.parents.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        let mut out = self.own.clone();
        out.extend(mean);
        out
    }
}

/// Batched own-states of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStates {
    own: Vec<Tensor2>,
}

impl NodeStates {
    pub fn from_own(own: Vec<Tensor2>) -> Self {
        Self { own }
    }

    pub fn own(&self, node: usize) -> &Tensor2 {
        &self.own[node]
    }

    pub fn rows(&self) -> usize {
        self.own.first().map_or(0, Tensor2::rows)
    }

    /// `H_{i}` for one row, keyed by the node's parents.
    pub fn hidden_state(&self, dag: &CausalDag, node: usize, row: usize) -> HiddenState {
        HiddenState {
            own: self.own[node].row(row).to_vec(),
            parents: dag
                .parents(node)
                .iter()
                .map(|&p| (p, self.own[p].row(row).to_vec()))
                .collect(),
        }
    }

    /// Conditioning matrix `rows x 2 * hidden` for `node`: own state and
    /// parent mean. Same arithmetic as [`HiddenState::conditioning`].
    pub fn conditioning(&self, dag: &CausalDag, node: usize) -> Tensor2 {
        let own = &self.own[node];
        let (rows, d) = own.shape();
        let parents = dag.parents(node);
        let mut out = Tensor2::zeros(rows, 2 * d);
        let inv = if parents.is_empty() {
            1.0
        } else {
            1.0 / parents.len() as f64
        };
        for r in 0..rows {
            let o = out.row_mut(r);
            o[..d].copy_from_slice(own.row(r));
            for &p in parents {
                for (m, v) in o[d..].iter_mut().zip(self.own[p].row(r)) {
                    *m += v;
                }
            }
            o[d..].iter_mut().for_each(|m| *m *= inv);
        }
        out
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            own: self
                .own
                .iter()
                .map(|t| {
                    let mut out = Tensor2::zeros(rows.len(), t.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        out.row_mut(i).copy_from_slice(t.row(r));
                    }
                    out
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree() -> CausalDag {
        CausalDag::new(3, &[(0, 1), (0, 2)]).unwrap()
    }

    fn batch(values: Vec<f64>, nodes: usize, tau: usize, total: usize) -> SeriesBatch {
        SeriesBatch::new(1, nodes, tau, total, values, vec![0]).unwrap()
    }

    #[test]
    fn zero_cell_gives_zero_state() {
        let bank = RnnBank::zeros(3, 1, 4, false);
        let ctx = batch((0..15).map(|v| v as f64).collect(), 3, 3, 5);
        let st = bank.init_from_context(&ctx, &[0]).unwrap();
        for k in 0..3 {
            assert!(st.own(k).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_context_step_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = RnnBank::new(1, 1, 3, false, &mut rng);
        let ctx = batch(vec![1.7, 2.0], 1, 1, 2);
        let st = bank.init_from_context(&ctx, &[0]).unwrap();
        // One value: mean is the value itself, so the standardized input is 0.
        let c = bank.cell(0);
        for j in 0..3 {
            let gi = |k: usize| c.b_in.get(0, k);
            let gh = |k: usize| c.b_hid.get(0, k);
            let u = sigmoid(gi(3 + j) + gh(3 + j));
            let r = sigmoid(gi(j) + gh(j));
            let n = (gi(6 + j) + r * gh(6 + j)).tanh();
            assert!((st.own(0).get(0, j) - u * n).abs() < 1e-15);
        }
    }

    #[test]
    fn parents_assembly_and_pool_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dag = CausalDag::new(4, &[(0, 3), (1, 3), (2, 3)]).unwrap();
        let bank = RnnBank::new(4, 1, 5, false, &mut rng);
        let ctx = SeriesBatch::new(
            2,
            4,
            6,
            8,
            (0..64).map(|i| (i as f64 * 0.37).sin()).collect(),
            vec![0, 0],
        )
        .unwrap();
        let st = bank.init_from_context(&ctx, &[0, 1]).unwrap();
        let hs = st.hidden_state(&dag, 3, 1);
        assert_eq!(hs.parents.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(hs.conditioning(), st.conditioning(&dag, 3).row(1).to_vec());

        let t = tree();
        let root = st.select_rows(&[0]);
        let root = NodeStates::from_own(root.own[..3].to_vec());
        assert!(root.hidden_state(&t, 0, 0).parents.is_empty());
        assert_eq!(
            root.hidden_state(&t, 1, 0).parents.keys().copied().collect::<Vec<_>>(),
            vec![0]
        );
    }

    #[test]
    fn advance_is_pure_and_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dag = CausalDag::new(3, &[(0, 1), (1, 2)]).unwrap();
        let bank = RnnBank::new(3, 1, 4, false, &mut rng);
        let ctx = batch((0..18).map(|i| (i as f64).cos()).collect(), 3, 4, 6);
        let st = bank.init_from_context(&ctx, &[0]).unwrap();
        let vals = vec![vec![0.3], vec![-1.0], vec![2.0]];
        let a = bank.advance_all(&st, &vals).unwrap();
        let b = bank.advance_all(&st, &vals).unwrap();
        assert_eq!(a, b);
        let hs = a.hidden_state(&dag, 2, 0);
        assert_eq!(hs.parents[&1], a.own(1).row(0).to_vec());
        assert!(matches!(
            bank.advance_all(&st, &vals[..2]),
            Err(EncoderError::MissingNodeValue(_))
        ));
    }

    #[test]
    fn streams_diverge_only_after_first_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = RnnBank::new(2, 1, 4, true, &mut rng);
        let ctx = batch((0..12).map(|i| i as f64 * 0.1).collect(), 2, 3, 6);
        let mut fa = bank.init_from_context(&ctx, &[0]).unwrap();
        let mut fb = fa.clone();
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [0.1, 0.2, 0.9, 0.4];
        for t in 0..4 {
            fa = bank.advance_all(&fa, &[vec![a[t]], vec![a[t]]]).unwrap();
            fb = bank.advance_all(&fb, &[vec![b[t]], vec![b[t]]]).unwrap();
            assert_eq!(fa == fb, t < 2, "step {t}");
        }
    }

    #[test]
    fn no_lookahead_in_context_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = RnnBank::new(1, 1, 4, false, &mut rng);
        let mut v: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let a = bank.init_from_context(&batch(v.clone(), 1, 6, 10), &[0]).unwrap();
        v[8] = 100.0;
        let b = bank.init_from_context(&batch(v, 1, 6, 10), &[0]).unwrap();
        assert_eq!(a, b);
    }
}
