//! Time-invariant causal DAG and intervention schedules.
//!
//! An edge `p -> c` means the value of `p` at `t - 1` enters the mechanism
//! of `c` at `t`. Only lag-1 edges are represented.

use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge set contains a cycle through node {0}")]
    CycleDetected(usize),
    #[error("node index {index} out of range for {node_count} nodes")]
    IndexOutOfRange { index: usize, node_count: usize },
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("a DAG needs at least one node")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("time index {t} outside forecast window [{start}, {end})")]
    OutOfWindow { t: usize, start: usize, end: usize },
    #[error("node {node} out of range for {node_count} nodes")]
    NodeOutOfRange { node: usize, node_count: usize },
    #[error("non-finite intervention value at node {node}, t {t}")]
    NonFinite { node: usize, t: usize },
}

/// Validated DAG with canonical topological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalDag {
    node_count: usize,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
}

impl CausalDag {
    /// Builds and validates a DAG. Topological ties are broken by ascending
    /// node index (Kahn's algorithm with a min-index frontier).
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut parents = vec![Vec::new(); node_count];
        let mut children = vec![Vec::new(); node_count];
        let mut seen = BTreeSet::new();
        for &(p, c) in edges {
            for index in [p, c] {
                if index >= node_count {
                    return Err(GraphError::IndexOutOfRange { index, node_count });
                }
            }
            if p == c {
                return Err(GraphError::SelfLoop(p));
            }
            if !seen.insert((p, c)) {
                return Err(GraphError::DuplicateEdge(p, c));
            }
            parents[c].push(p);
            children[p].push(c);
        }
        for list in parents.iter_mut().chain(children.iter_mut()) {
            list.sort_unstable();
        }

        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut frontier: BTreeSet<usize> =
            (0..node_count).filter(|&i| indegree[i] == 0).collect();
        let mut topo_order = Vec::with_capacity(node_count);
        while let Some(n) = frontier.pop_first() {
            topo_order.push(n);
            for &c in &children[n] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    frontier.insert(c);
                }
            }
        }
        if topo_order.len() != node_count {
            let stuck = (0..node_count).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(GraphError::CycleDetected(stuck));
        }
        Ok(Self {
            node_count,
            parents,
            children,
            topo_order,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn parents_of(&self, node: usize) -> Result<&[usize], GraphError> {
        self.parents
            .get(node)
            .map(Vec::as_slice)
            .ok_or(GraphError::IndexOutOfRange {
                index: node,
                node_count: self.node_count,
            })
    }

    /// Unchecked variant for hot loops over known-valid indices.
    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.node_count)
            .filter(|&i| self.parents[i].is_empty())
            .collect()
    }

    /// Edges as `(parent, child)` pairs, sorted by child then parent.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                out.push((p, c));
            }
        }
        out
    }

    /// Every node reachable from `node` along child edges, excluding itself.
    pub fn descendants(&self, node: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            for &c in &self.children[n] {
                if out.insert(c) {
                    stack.push(c);
                }
            }
        }
        out
    }
}

/// Sparse `(node, t) -> value` clamps inside the forecast window.
///
/// Time indices are zero-based positions within a window of length
/// `total_len`; valid entries satisfy `context_len <= t < total_len`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InterventionSchedule {
    context_len: usize,
    total_len: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl InterventionSchedule {
    pub fn new(context_len: usize, total_len: usize) -> Self {
        Self {
            context_len,
            total_len,
            entries: BTreeMap::new(),
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn insert(&mut self, node: usize, t: usize, value: f64) -> Result<(), ScheduleError> {
        if t < self.context_len || t >= self.total_len {
            return Err(ScheduleError::OutOfWindow {
                t,
                start: self.context_len,
                end: self.total_len,
            });
        }
        if !value.is_finite() {
            return Err(ScheduleError::NonFinite { node, t });
        }
        self.entries.insert((node, t), value);
        Ok(())
    }

    /// `None` means "not intervened", distinct from any clamped value.
    pub fn get(&self, node: usize, t: usize) -> Option<f64> {
        self.entries.get(&(node, t)).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Checks that every node index fits the given DAG and the window matches.
    pub fn validate(&self, node_count: usize, context_len: usize, total_len: usize) -> Result<(), ScheduleError> {
        for (&(node, t), _) in &self.entries {
            if node >= node_count {
                return Err(ScheduleError::NodeOutOfRange { node, node_count });
            }
            if t < context_len || t >= total_len {
                return Err(ScheduleError::OutOfWindow {
                    t,
                    start: context_len,
                    end: total_len,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_node() {
        let dag = CausalDag::new(1, &[]).unwrap();
        assert_eq!(dag.topo_order(), &[0]);
        assert!(dag.parents_of(0).unwrap().is_empty());
    }

    #[test]
    fn chain_is_sorted() {
        let dag = CausalDag::new(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(dag.topo_order(), &[0, 1, 2]);
        assert_eq!(dag.parents_of(2).unwrap(), &[1]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            CausalDag::new(3, &[(0, 1), (1, 2), (2, 0)]),
            Err(GraphError::CycleDetected(0))
        );
        assert!(matches!(
            CausalDag::new(2, &[(0, 5)]),
            Err(GraphError::IndexOutOfRange { index: 5, .. })
        ));
        assert_eq!(
            CausalDag::new(2, &[(0, 1), (0, 1)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert_eq!(CausalDag::new(2, &[(1, 1)]), Err(GraphError::SelfLoop(1)));
        let dag = CausalDag::new(2, &[(0, 1)]).unwrap();
        assert!(dag.parents_of(2).is_err());
    }

    #[test]
    fn ties_broken_by_index() {
        let dag = CausalDag::new(4, &[(3, 0), (2, 1)]).unwrap();
        assert_eq!(dag.topo_order(), &[2, 1, 3, 0]);
    }

    #[test]
    fn schedule_window() {
        let mut s = InterventionSchedule::new(90, 120);
        assert!(s.insert(0, 89, 1.0).is_err());
        assert!(s.insert(0, 120, 1.0).is_err());
        s.insert(0, 90, 0.0).unwrap();
        assert_eq!(s.get(0, 90), Some(0.0));
        assert_eq!(s.get(0, 91), None);
        assert!(s.validate(1, 90, 120).is_ok());
        assert!(s.validate(0, 90, 120).is_err());
    }

    fn arb_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..9).prop_flat_map(|n| {
            // Only forward edges under a random relabeling, so always acyclic.
            (
                Just(n),
                proptest::collection::vec((0..n, 0..n), 0..20),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
                .prop_map(|(n, raw, perm)| {
                    let mut edges: Vec<(usize, usize)> = raw
                        .into_iter()
                        .filter(|(a, b)| a < b)
                        .map(|(a, b)| (perm[a], perm[b]))
                        .collect();
                    edges.sort_unstable();
                    edges.dedup();
                    (n, edges)
                })
        })
    }

    proptest! {
        #[test]
        fn topo_order_respects_edges((n, edges) in arb_dag()) {
            let dag = CausalDag::new(n, &edges).unwrap();
            let mut pos = vec![0; n];
            for (i, &v) in dag.topo_order().iter().enumerate() {
                pos[v] = i;
            }
            for &(p, c) in &edges {
                prop_assert!(pos[p] < pos[c]);
            }
            let again = CausalDag::new(n, &edges).unwrap();
            prop_assert_eq!(again.topo_order(), dag.topo_order());
            let rebuilt = CausalDag::new(n, &dag.edges()).unwrap();
            prop_assert_eq!(rebuilt, dag);
        }
    }
}
