//! Interaction perception heads over the window vector: a global head that
//! decides whether the frame contains any interaction and a local head that
//! scores each class slot.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{bce_value, ParamStore, Tape, Var};
use crate::corpus::{AnnotatedFrame, ObjectClass};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Matrix;
use crate::tracking::SceneNode;

/// Three affine layers with rectifiers in between.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, widths: [usize; 4]) -> Self {
        Self {
            layers: [
                Linear::new(store, rng, &format!("{name}.fc0"), widths[0], widths[1]),
                Linear::new(store, rng, &format!("{name}.fc1"), widths[1], widths[2]),
                Linear::new(store, rng, &format!("{name}.fc2"), widths[2], widths[3]),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.layers[0].forward(tape, x);
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, h);
        let h = tape.relu(h);
        self.layers[2].forward(tape, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Sigmoid probability.
    Train,
    /// Probability thresholded at 0.5 (inclusive) to {0, 1}.
    Inference,
}

#[derive(Clone, Debug)]
pub struct AttentionHeads {
    pub global: Mlp3,
    pub local: Mlp3,
    pub input_width: usize,
    pub slots: usize,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 64];

impl AttentionHeads {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, input_width: usize, slots: usize, hidden: [usize; 2]) -> Self {
        Self {
            global: Mlp3::new(store, rng, "ip.global", [input_width, hidden[0], hidden[1], 1]),
            local: Mlp3::new(store, rng, "ip.local", [input_width, hidden[0], hidden[1], slots]),
            input_width,
            slots,
        }
    }

    fn check_width(&self, tape: &Tape, window: Var) -> Result<()> {
        let shape = tape.shape(window);
        if shape != (1, self.input_width) {
            return Err(Error::shape("attention", format!("window {shape:?}, expected (1, {})", self.input_width)));
        }
        Ok(())
    }

    /// `1 x 1` interaction probability.
    pub fn global_prob(&self, tape: &mut Tape, window: Var) -> Result<Var> {
        self.check_width(tape, window)?;
        let logit = self.global.forward(tape, window);
        Ok(tape.sigmoid(logit))
    }

    /// `N x 1` per-node probabilities, read from each node's class slot.
    pub fn local_probs(&self, tape: &mut Tape, window: Var, classes: &[ObjectClass]) -> Result<Var> {
        self.check_width(tape, window)?;
        let idx = self.slot_indices(classes)?;
        let logits = self.local.forward(tape, window);
        let picked = tape.gather_cols(logits, &idx);
        let picked = tape.reshape(picked, idx.len(), 1);
        Ok(tape.sigmoid(picked))
    }

    fn slot_indices(&self, classes: &[ObjectClass]) -> Result<Vec<usize>> {
        if classes.is_empty() {
            return Err(Error::Invalid("local attention over an empty node set".into()));
        }
        classes
            .iter()
            .map(|c| {
                if c.id() < self.slots {
                    Ok(c.id())
                } else {
                    Err(Error::Invalid(format!("class `{c}` has no slot among {}", self.slots)))
                }
            })
            .collect()
    }

    pub fn global_attention(&self, params: &ParamStore, window: &Matrix, mode: AttentionMode) -> Result<f64> {
        let mut tape = Tape::new(params);
        let w = tape.constant(window.clone());
        let p = self.global_prob(&mut tape, w)?;
        let p = tape.value(p).item();
        Ok(match mode {
            AttentionMode::Train => p,
            AttentionMode::Inference => binarize(p),
        })
    }

    pub fn local_attention(&self, params: &ParamStore, window: &Matrix, classes: &[ObjectClass]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let w = tape.constant(window.clone());
        let p = self.local_probs(&mut tape, w, classes)?;
        Ok(tape.value(p).as_slice().to_vec())
    }
}

pub fn binarize(p: f64) -> f64 {
    if p >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Supervision for the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLabels {
    pub global: f64,
    pub local: Vec<f64>,
}

/// Global label is 1 iff the frame has an interaction; a node's local label
/// is 1 iff its class takes part in one.
pub fn interaction_labels(frame: &AnnotatedFrame, nodes: &[SceneNode]) -> InteractionLabels {
    let global = if frame.interactions.is_empty() { 0.0 } else { 1.0 };
    let local = nodes
        .iter()
        .map(|n| {
            if frame.interactions.iter().any(|i| i.involves(n.class)) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    InteractionLabels { global, local }
}

/// Clamped binary cross-entropy of both heads; the local term is averaged
/// over the frame's nodes.
pub fn ip_losses(global_prob: f64, local_probs: &[f64], labels: &InteractionLabels) -> Result<(f64, f64)> {
    if local_probs.len() != labels.local.len() {
        return Err(Error::shape(
            "ip_losses",
            format!("{} probabilities for {} labels", local_probs.len(), labels.local.len()),
        ));
    }
    let global = bce_value(&[global_prob], &[labels.global]);
    let local = if labels.local.is_empty() {
        0.0
    } else {
        bce_value(local_probs, &labels.local)
    };
    Ok((global, local))
}
