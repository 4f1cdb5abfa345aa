//! Relational exploration: one (or more) graph-convolution updates
//! `F' = relu(Â F W)`, node reservation, and assembly of the decoder memory.
//!
//! The memory row of node `i` is `[(1 + a_i) F_i || g F'_i]` where `a_i` is
//! the node's local attention and `g` the global interaction gate. With
//! `a = 0` the first block is exactly `F`; with `g = 0` the second block is
//! exactly zero whatever the topology or weights.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::glorot;
use crate::scenegraph::NormalizedAdjacency;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
}

#[derive(Clone, Debug)]
pub struct RelationalModule {
    pub layers: Vec<GcnLayer>,
    pub width: usize,
}

/// Values of one relational pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationalOutput {
    pub reserved: Matrix,
    pub updated: Matrix,
    pub memory: Matrix,
}

/// Tape handles of one relational pass.
#[derive(Clone, Copy, Debug)]
pub struct RelationalVars {
    pub reserved: Var,
    pub updated: Var,
    pub memory: Var,
}

/// `relu(adj * f * W)`.
pub fn gcn_forward(tape: &mut Tape, f: Var, adj: Var, layer: &GcnLayer) -> Var {
    let w = tape.param(layer.weight);
    let prop = tape.matmul(adj, f);
    let mixed = tape.matmul(prop, w);
    tape.relu(mixed)
}

impl RelationalModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, width: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| GcnLayer {
                weight: store.add(format!("relational.gcn{i}.weight"), glorot(rng, width, width)),
            })
            .collect();
        Self { layers, width }
    }

    /// Stacked graph convolution over `f`.
    pub fn propagate(&self, tape: &mut Tape, f: Var, adj: &Matrix) -> Var {
        let adj = tape.constant(adj.clone());
        let mut h = f;
        for layer in &self.layers {
            h = gcn_forward(tape, h, adj, layer);
        }
        h
    }

    /// Records one relational pass. `gate` is `1 x 1`, `local` is `N x 1`.
    /// With `explore = false` the graph update is skipped and its block is zero.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        f: Var,
        adj: &Matrix,
        gate: Var,
        local: Var,
        explore: bool,
    ) -> Result<RelationalVars> {
        let (n, c) = tape.shape(f);
        if c != self.width {
            return Err(Error::shape("relational_forward", format!("feature width {c}, expected {}", self.width)));
        }
        if adj.shape() != (n, n) {
            return Err(Error::shape("relational_forward", format!("adjacency {:?} for {n} nodes", adj.shape())));
        }
        if tape.shape(local) != (n, 1) {
            return Err(Error::shape(
                "relational_forward",
                format!("local attention {:?} for {n} nodes", tape.shape(local)),
            ));
        }
        let scale = tape.add_const(local, 1.0);
        let reserved = tape.mul_col(f, scale);
        let updated = if explore {
            let h = self.propagate(tape, f, adj);
            tape.mul_scalar(h, gate)
        } else {
            tape.constant(Matrix::zeros(n, c))
        };
        let memory = tape.concat_cols(&[reserved, updated]);
        Ok(RelationalVars {
            reserved,
            updated,
            memory,
        })
    }

    /// Plain-matrix relational pass.
    pub fn forward(
        &self,
        params: &ParamStore,
        f: &Matrix,
        adj: &NormalizedAdjacency,
        a_global: f64,
        a_local: &[f64],
    ) -> Result<RelationalOutput> {
        if a_local.len() != f.rows() {
            return Err(Error::shape(
                "relational_forward",
                format!("{} local weights for {} nodes", a_local.len(), f.rows()),
            ));
        }
        let mut tape = Tape::new(params);
        let fv = tape.constant(f.clone());
        let gate = tape.constant(Matrix::scalar(a_global));
        let local = tape.constant(Matrix::from_vec(a_local.len(), 1, a_local.to_vec())?);
        let vars = self.forward_on_tape(&mut tape, fv, &adj.normalized, gate, local, true)?;
        Ok(RelationalOutput {
            reserved: tape.value(vars.reserved).clone(),
            updated: tape.value(vars.updated).clone(),
            memory: tape.value(vars.memory).clone(),
        })
    }
}

/// `relu(adj * f * weight)` on plain matrices.
pub fn gcn_forward_matrix(f: &Matrix, adj: &Matrix, weight: &Matrix) -> Result<Matrix> {
    if adj.cols() != f.rows() || adj.rows() != adj.cols() || f.cols() != weight.rows() {
        return Err(Error::shape(
            "gcn_forward",
            format!("adj {:?}, features {:?}, weight {:?}", adj.shape(), f.shape(), weight.shape()),
        ));
    }
    let mut store = ParamStore::new();
    let w = store.add("w", weight.clone());
    let mut tape = Tape::new(&store);
    let fv = tape.constant(f.clone());
    let av = tape.constant(adj.clone());
    let out = gcn_forward(&mut tape, fv, av, &GcnLayer { weight: w });
    Ok(tape.value(out).clone())
}
