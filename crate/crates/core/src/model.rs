//! The learned model: one recurrent bank plus one velocity network per node.

use crate::encoder::RnnBank;
use crate::flow::{FlowConfig, TIME_FEATURES};
use crate::graph::CausalDag;
use crate::nn::{Mlp, Parameterized};
use crate::rng::{substream, tag};
use crate::tensor::Tensor2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub width: usize,
    /// Number of affine layers in each velocity network.
    pub layers: usize,
    pub per_node_rnn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            width: 64,
            layers: 3,
            per_node_rnn: false,
        }
    }
}

impl ModelConfig {
    pub fn net_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![1 + TIME_FEATURES + 2 * self.hidden_dim];
        sizes.extend(std::iter::repeat(self.width).take(self.layers.saturating_sub(1)));
        sizes.push(1);
        sizes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dag: CausalDag,
    config: ModelConfig,
    pub flow: FlowConfig,
    pub rnn: RnnBank,
    pub nets: Vec<Mlp>,
}

impl FlowModel {
    pub fn new(dag: CausalDag, config: ModelConfig, flow: FlowConfig, seed: u64) -> Self {
        let mut rng = substream(&[tag::INIT, seed]);
        let k = dag.node_count();
        let rnn = RnnBank::new(k, 1, config.hidden_dim, config.per_node_rnn, &mut rng);
        let sizes = config.net_sizes();
        let nets = (0..k).map(|_| Mlp::new(&sizes, &mut rng)).collect();
        Self {
            dag,
            config,
            flow,
            rnn,
            nets,
        }
    }

    /// All parameters zero: velocity is identically zero.
    pub fn zeros(dag: CausalDag, config: ModelConfig, flow: FlowConfig) -> Self {
        let k = dag.node_count();
        let rnn = RnnBank::zeros(k, 1, config.hidden_dim, config.per_node_rnn);
        let nets = (0..k).map(|_| Mlp::zeros(&config.net_sizes())).collect();
        Self {
            dag,
            config,
            flow,
            rnn,
            nets,
        }
    }

    pub fn dag(&self) -> &CausalDag {
        &self.dag
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl Parameterized for FlowModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2)) {
        self.rnn.visit(prefix, f);
        for (i, n) in self.nets.iter().enumerate() {
            n.visit(&format!("{prefix}flow{i}."), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor2)) {
        self.rnn.visit_mut(f);
        for n in &mut self.nets {
            n.visit_mut(f);
        }
    }
}

/// Parameter names and shapes in visiting order.
pub fn manifest(p: &dyn Parameterized) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name, t.shape())));
    out
}

/// Concatenation of all parameters in visiting order.
pub fn flatten(p: &dyn Parameterized) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Inverse of [`flatten`]; `flat` must have exactly `param_count` entries.
pub fn unflatten(p: &mut dyn Parameterized, flat: &[f64]) -> Result<(), usize> {
    let expected = p.param_count();
    if flat.len() != expected {
        return Err(expected);
    }
    let mut off = 0;
    p.visit_mut(&mut |t| {
        let n = t.data().len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip_and_layout() {
        let dag = CausalDag::new(3, &[(0, 1), (1, 2)]).unwrap();
        let cfg = ModelConfig {
            hidden_dim: 4,
            width: 8,
            ..ModelConfig::default()
        };
        let m = FlowModel::new(dag.clone(), cfg.clone(), FlowConfig::default(), 1);
        assert_eq!(cfg.net_sizes(), vec![11, 8, 8, 1]);
        let flat = flatten(&m);
        assert_eq!(flat.len(), m.param_count());
        let mut z = FlowModel::zeros(dag, cfg, FlowConfig::default());
        unflatten(&mut z, &flat).unwrap();
        assert_eq!(z, m);
        let names: Vec<String> = manifest(&m).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "rnn0.w_in");
        assert!(names.contains(&"flow2.layer2.b".to_string()));
        assert!(unflatten(&mut z, &flat[1..]).is_err());
    }
}
