//! Message-passing index plumbing for batches of fully connected graphs.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::trajectory::EdgeIndex;

/// Gather/scatter indices for `batch` graphs of the same size.
#[derive(Clone, Debug)]
pub(crate) struct GraphBatch {
    pub batch: usize,
    pub nodes: usize,
    pub edges: usize,
    send: Arc<Vec<usize>>,
    recv: Arc<Vec<usize>>,
}

impl GraphBatch {
    pub fn new(batch: usize, index: &EdgeIndex) -> Self {
        let (n, e) = (index.nodes(), index.len());
        let mut send = Vec::with_capacity(batch * e);
        let mut recv = Vec::with_capacity(batch * e);
        for b in 0..batch {
            for &(i, j) in index.pairs() {
                send.push(b * n + i);
                recv.push(b * n + j);
            }
        }
        GraphBatch { batch, nodes: n, edges: e, send: Arc::new(send), recv: Arc::new(recv) }
    }

    /// `[B*N, ..., F]` node rows to `[B*E, ..., 2F]` edge rows
    /// (sender features first).
    pub fn node_to_edge(&self, h: &Var) -> Var {
        let axis = h.shape().len() - 1;
        let s = h.gather_rows(self.send.clone());
        let r = h.gather_rows(self.recv.clone());
        Var::concat(&[s, r], axis)
    }

    /// Sums `[B*E*slots, ...]` edge rows into `[B*N*slots, ...]` node rows at
    /// each edge's receiver, keeping slots separate.
    pub fn edge_to_node(&self, h: &Var, slots: usize) -> Var {
        let idx: Vec<usize> = self
            .recv
            .iter()
            .flat_map(|&node| (0..slots).map(move |l| node * slots + l))
            .collect();
        h.scatter_add_rows(Arc::new(idx), self.batch * self.nodes * slots)
    }
}
