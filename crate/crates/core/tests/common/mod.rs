#![allow(dead_code)]
pub mod checks;
pub mod oracles;

use graphreport::corpus::{BBox, Detection, ObjectClass};
use graphreport::decoder::DecoderConfig;
use graphreport::model::ModelConfig;
use graphreport::scenegraph::Provenance;
use graphreport::tensor::Matrix;
use graphreport::tracking::{NodeSource, SceneNode};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_decoder() -> DecoderConfig {
    DecoderConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_width: 8,
        max_len: 12,
    }
}

/// Small enough to train in seconds, same structure as the default.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        feature_width: 6,
        ip_hidden: [8, 6],
        decoder: tiny_decoder(),
        ..ModelConfig::default()
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.05..0.4);
    let h = rng.gen_range(0.05..0.4);
    BBox::new(rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h), w, h).unwrap()
}

/// Distinct classes, kidney included with probability `p_kidney`, at least one node.
pub fn random_classes(rng: &mut ChaCha8Rng, p_kidney: f64) -> Vec<ObjectClass> {
    let mut pool: Vec<ObjectClass> = ObjectClass::instruments().collect();
    pool.shuffle(rng);
    let n = rng.gen_range(1..=4usize);
    let mut classes: Vec<ObjectClass> = pool.into_iter().take(n).collect();
    if rng.gen_bool(p_kidney) {
        let at = rng.gen_range(0..=classes.len());
        classes.insert(at, ObjectClass::Kidney);
    }
    classes
}

pub fn scene_nodes(rng: &mut ChaCha8Rng, classes: &[ObjectClass]) -> Vec<SceneNode> {
    classes
        .iter()
        .enumerate()
        .map(|(slot, &class)| SceneNode {
            class,
            bbox: random_box(rng),
            provenance: Provenance::Detected,
            source: NodeSource { frame: 0, slot },
        })
        .collect()
}

pub fn detections(rng: &mut ChaCha8Rng, frame: u32, classes: &[ObjectClass]) -> Vec<Detection> {
    classes
        .iter()
        .map(|&class| Detection {
            frame_index: frame,
            class,
            bbox: random_box(rng),
            confidence: rng.gen_range(0.5..1.0),
        })
        .collect()
}

pub fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_rows(&perm.iter().map(|&p| m.row(p).to_vec()).collect::<Vec<_>>())
}

/// `P m P^T` where row i of the result is row `perm[i]` of `m`.
pub fn conjugate(m: &Matrix, perm: &[usize]) -> Matrix {
    let n = perm.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, m.get(perm[i], perm[j]));
        }
    }
    out
}

pub fn small_corpus(seed: u64) -> graphreport::corpus::Dataset {
    graphreport::corpus::generate_synthetic(&graphreport::corpus::SyntheticConfig {
        num_videos: 10,
        frames_per_video: 12,
        seed,
        node_dropout_rate: 0.2,
    })
    .unwrap()
}

pub fn small_training(epochs: usize, learning_rate: f64) -> graphreport::trainkit::TrainConfig {
    graphreport::trainkit::TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate,
        model: small_model(),
        ..Default::default()
    }
}
