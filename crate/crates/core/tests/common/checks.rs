//! Finite-difference checks shared by the gradient tests and the acceptance suite.

use super::*;
use graphreport::autograd::{Grads, ParamStore, Tape, Var};
use graphreport::corpus::{ObjectClass, BOS, EOS};
use graphreport::decoder::CaptionModel;
use graphreport::features::{window_width, EmbeddingProvider};
use graphreport::gradcheck::{central_difference, relative_error};
use graphreport::perception::AttentionHeads;
use graphreport::relational::{gcn_forward, GcnLayer};
use graphreport::scenegraph::{build_scene_graph, normalized_adjacency, GraphNode, Provenance, Topology};
use rand::{Rng, SeedableRng};

const EPS: f64 = 1e-6;

/// Relative error between backprop and central differences over every
/// parameter of `store`, taken as one concatenated vector.
pub fn gradient_error<F>(store: &ParamStore, loss: F) -> f64
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(store);
    let l = loss(&mut tape);
    let mut grads = Grads::new(store);
    tape.backward(l, &mut grads);

    let mut probe = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        analytic.extend_from_slice(grads.dense(store, id).as_slice());
        let n = central_difference(&mut probe, id, EPS, |s| {
            let mut t = Tape::new(s);
            let v = loss(&mut t);
            t.value(v).item()
        });
        numeric.extend_from_slice(n.as_slice());
    }
    relative_error(&analytic, &numeric)
}

/// Fixed random weighting so every output entry matters.
fn weighted_sum(tape: &mut Tape<'_>, x: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w);
    tape.sum(p)
}

fn random_graph_adjacency(rng: &mut ChaCha8Rng, classes: &[ObjectClass]) -> Matrix {
    let nodes: Vec<GraphNode> = classes
        .iter()
        .enumerate()
        .map(|(id, &class)| GraphNode {
            id,
            class,
            provenance: Provenance::Detected,
        })
        .collect();
    let topology = if rng.gen_bool(0.5) { Topology::Star } else { Topology::Complete };
    let g = build_scene_graph(&nodes, topology, None).unwrap();
    normalized_adjacency(&g).unwrap().normalized
}

/// One GCN layer, gradient through both the weight and the input features.
pub fn gcn_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = random_classes(&mut rng, 0.8);
    let (n, c) = (classes.len(), 5);
    let adj = random_graph_adjacency(&mut rng, &classes);
    let mut store = ParamStore::new();
    let f = store.add("input", random_matrix(&mut rng, n, c, 1.0));
    let layer = GcnLayer {
        weight: store.add("weight", random_matrix(&mut rng, c, c, 1.0)),
    };
    let r = random_matrix(&mut rng, n, c, 1.0);
    gradient_error(&store, |t| {
        let fv = t.param(f);
        let a = t.constant(adj.clone());
        let out = gcn_forward(t, fv, a, &layer);
        weighted_sum(t, out, &r)
    })
}

fn heads_setup(rng: &mut ChaCha8Rng) -> (ParamStore, AttentionHeads, graphreport::autograd::ParamId, Vec<ObjectClass>) {
    let c = 2;
    let mut store = ParamStore::new();
    let width = window_width(ObjectClass::COUNT, c);
    let heads = AttentionHeads::new(&mut store, rng, width, ObjectClass::COUNT, [6, 5]);
    let window = store.add("window", random_matrix(rng, 1, width, 1.0));
    let classes = random_classes(rng, 0.8);
    (store, heads, window, classes)
}

/// Global head with its BCE loss.
pub fn global_head_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, heads, window, _) = heads_setup(&mut rng);
    let label = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    gradient_error(&store, |t| {
        let w = t.param(window);
        let p = heads.global_prob(t, w).unwrap();
        t.bce(p, &[label])
    })
}

/// Local head gathered at the node classes, with its BCE loss.
pub fn local_head_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, heads, window, classes) = heads_setup(&mut rng);
    let labels: Vec<f64> = classes.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    gradient_error(&store, |t| {
        let w = t.param(window);
        let p = heads.local_probs(t, w, &classes).unwrap();
        t.bce(p, &labels)
    })
}

/// Embedding feature provider: class table, box projection and bias.
pub fn feature_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = random_classes(&mut rng, 0.8);
    let nodes = scene_nodes(&mut rng, &classes);
    let mut store = ParamStore::new();
    let provider = EmbeddingProvider::new(&mut store, &mut rng, 5);
    let r = random_matrix(&mut rng, nodes.len(), 5, 1.0);
    gradient_error(&store, |t| {
        let f = provider.forward(t, &nodes);
        weighted_sum(t, f, &r)
    })
}

/// Tiny decoder (d = 8, V = 7, one layer each side) under teacher-forced cross-entropy.
pub fn decoder_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 7;
    let mut store = ParamStore::new();
    let model = CaptionModel::new(&mut store, &mut rng, &tiny_decoder(), 6, vocab).unwrap();
    let n = rng.gen_range(1..=4usize);
    let memory = store.add("memory", random_matrix(&mut rng, n, 6, 1.0));
    let len = rng.gen_range(1..=5usize);
    let mut target = vec![BOS];
    target.extend((0..len).map(|_| rng.gen_range(3..vocab as u32)));
    target.push(EOS);
    gradient_error(&store, |t| {
        let m = t.param(memory);
        model.caption_loss(t, m, &target).unwrap()
    })
}
