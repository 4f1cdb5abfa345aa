//! Node features for a frame (`N x C`) and the fixed-layout window vector
//! consumed by the interaction heads.
//!
//! Two providers exist. The embedding provider learns a vector per object
//! class plus an affine map of the box, summed. The external provider reads
//! precomputed per-node rows from a container file keyed
//! `video/frame/node_id`, with a JSON sidecar (`<file>.json`) that lists
//! every key's shape and class id and the SHA-256 of the container.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::container::{self, F32Array};
use crate::corpus::{write_atomic, ObjectClass};
use crate::error::{Error, Result};
use crate::nn::{glorot, uniform};
use crate::tensor::Matrix;
use crate::tracking::SceneNode;

/// Default class slots per frame in the window vector.
pub const N_MAX: usize = ObjectClass::COUNT;

/// Frames per window (t-2, t-1, t).
pub const WINDOW_FRAMES: usize = 3;

pub fn window_width(slots: usize, feature_width: usize) -> usize {
    WINDOW_FRAMES * slots * feature_width
}

#[derive(Clone, Debug)]
pub struct EmbeddingProvider {
    pub class_table: ParamId,
    pub box_weight: ParamId,
    pub box_bias: ParamId,
    pub width: usize,
}

impl EmbeddingProvider {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, width: usize) -> Self {
        Self {
            class_table: store.add("features.class_table", uniform(rng, N_MAX, width, 1.0)),
            box_weight: store.add("features.box_weight", glorot(rng, 4, width)),
            box_bias: store.add("features.box_bias", Matrix::zeros(1, width)),
            width,
        }
    }

    pub fn forward(&self, tape: &mut Tape, nodes: &[SceneNode]) -> Var {
        let classes: Vec<usize> = nodes.iter().map(|n| n.class.id()).collect();
        let boxes = Matrix::from_rows(&nodes.iter().map(|n| n.bbox.to_array()).collect::<Vec<_>>());
        let table = tape.param(self.class_table);
        let emb = tape.gather_rows(table, &classes);
        let boxes = tape.constant(boxes);
        let w = tape.param(self.box_weight);
        let b = tape.param(self.box_bias);
        let proj = tape.matmul(boxes, w);
        let proj = tape.add_row(proj, b);
        tape.add(emb, proj)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    key: String,
    shape: Vec<usize>,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    sha256: String,
    entries: Vec<SidecarEntry>,
}

/// Precomputed per-node feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalFeatures {
    width: usize,
    rows: HashMap<(u32, u32, usize), (ObjectClass, Vec<f64>)>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn parse_key(key: &str) -> Option<(u32, u32, usize)> {
    let mut it = key.split('/');
    let k = (it.next()?.parse().ok()?, it.next()?.parse().ok()?, it.next()?.parse().ok()?);
    it.next().is_none().then_some(k)
}

impl ExternalFeatures {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: HashMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn insert(&mut self, video: u32, frame: u32, node: usize, class: ObjectClass, row: Vec<f64>) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::shape("ExternalFeatures::insert", format!("row of {} for width {}", row.len(), self.width)));
        }
        self.rows.insert((video, frame, node), (class, row));
        Ok(())
    }

    pub fn row(&self, video: u32, node: &SceneNode) -> Result<&[f64]> {
        let key = (video, node.source.frame, node.source.slot);
        let (class, row) = self.rows.get(&key).ok_or_else(|| Error::Unknown {
            kind: "feature key",
            name: format!("{}/{}/{}", key.0, key.1, key.2),
        })?;
        if *class != node.class {
            return Err(Error::data(format!(
                "feature {}/{}/{} is class `{}`, node is `{}`",
                key.0, key.1, key.2, class, node.class
            )));
        }
        Ok(row)
    }

    /// Writes the container and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = BTreeMap::new();
        let mut keys: Vec<_> = self.rows.keys().copied().collect();
        keys.sort();
        let mut entries = Vec::with_capacity(keys.len());
        for k in keys {
            let (class, row) = &self.rows[&k];
            let name = format!("{}/{}/{}", k.0, k.1, k.2);
            arrays.insert(
                name.clone(),
                F32Array {
                    shape: vec![self.width],
                    values: row.iter().map(|&v| v as f32).collect(),
                },
            );
            entries.push(SidecarEntry {
                key: name,
                shape: vec![self.width],
                class: class.id(),
            });
        }
        let bytes = container::encode(&arrays, &BTreeMap::new())?;
        let sidecar = Sidecar {
            width: self.width,
            sha256: hex_digest(&bytes),
            entries,
        };
        write_atomic(path, &bytes)?;
        let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Invalid(e.to_string()))?;
        write_atomic(&sidecar_path(path), &json)
    }

    /// Loads a container, verifying its checksum and every sidecar entry.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let side_path = sidecar_path(path);
        let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::Data {
            path: Some(side_path.clone()),
            line: None,
            message: e.to_string(),
        })?;
        let digest = hex_digest(&bytes);
        if digest != sidecar.sha256 {
            return Err(Error::Data {
                path: Some(path.to_path_buf()),
                line: None,
                message: format!("checksum mismatch: file {digest}, sidecar {}", sidecar.sha256),
            });
        }
        let (arrays, _) = container::decode(&bytes)?;
        let mut out = ExternalFeatures::new(sidecar.width);
        for e in sidecar.entries {
            let key = parse_key(&e.key).ok_or_else(|| Error::data(format!("bad feature key `{}`", e.key)))?;
            let class = ObjectClass::from_id(e.class).ok_or_else(|| Error::Unknown {
                kind: "class id",
                name: e.class.to_string(),
            })?;
            let arr = arrays
                .get(&e.key)
                .ok_or_else(|| Error::data(format!("sidecar key `{}` missing from container", e.key)))?;
            if arr.shape != e.shape || e.shape != [sidecar.width] {
                return Err(Error::data(format!("feature `{}` has shape {:?}", e.key, arr.shape)));
            }
            out.insert(key.0, key.1, key.2, class, arr.values.iter().map(|&v| v as f64).collect())?;
        }
        Ok(out)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub enum FeatureProvider {
    Embedding(EmbeddingProvider),
    External(ExternalFeatures),
}

impl FeatureProvider {
    pub fn width(&self) -> usize {
        match self {
            FeatureProvider::Embedding(e) => e.width,
            FeatureProvider::External(x) => x.width,
        }
    }

    /// `N x C` features of a completed node set, recorded on `tape`.
    pub fn extract(&self, tape: &mut Tape, video: u32, nodes: &[SceneNode]) -> Result<Var> {
        if nodes.is_empty() {
            return Err(Error::Invalid("feature extraction needs at least one node".into()));
        }
        match self {
            FeatureProvider::Embedding(e) => Ok(e.forward(tape, nodes)),
            FeatureProvider::External(x) => {
                let rows = nodes.iter().map(|n| x.row(video, n)).collect::<Result<Vec<_>>>()?;
                Ok(tape.constant(Matrix::from_rows(&rows)))
            }
        }
    }
}

/// Feature matrix of a completed node set, outside of any training tape.
pub fn extract_features(
    provider: &FeatureProvider,
    params: &ParamStore,
    video: u32,
    nodes: &[SceneNode],
) -> Result<Matrix> {
    let mut tape = Tape::new(params);
    let v = provider.extract(&mut tape, video, nodes)?;
    Ok(tape.value(v).clone())
}

/// One frame of a window: its feature rows (absent for an empty frame) and the node classes.
pub struct WindowFrame<'a> {
    pub features: Option<Var>,
    pub classes: &'a [ObjectClass],
}

/// Lays frames t-2, t-1, t into a `1 x (3 * slots * C)` row. Each frame owns
/// `slots` slots of width `C` in class-id order; empty slots are zero and
/// nodes sharing a class are summed into one slot.
pub fn window_on_tape(tape: &mut Tape, frames: &[WindowFrame; WINDOW_FRAMES], slots: usize, width: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(WINDOW_FRAMES);
    for frame in frames {
        let part = match frame.features {
            None => tape.constant(Matrix::zeros(1, slots * width)),
            Some(f) => {
                let (rows, cols) = tape.shape(f);
                if cols != width {
                    return Err(Error::shape("concat_window_features", format!("width {cols}, expected {width}")));
                }
                if rows != frame.classes.len() {
                    return Err(Error::shape(
                        "concat_window_features",
                        format!("{rows} rows for {} classes", frame.classes.len()),
                    ));
                }
                let mut select = Matrix::zeros(slots, rows);
                for (i, c) in frame.classes.iter().enumerate() {
                    if c.id() >= slots {
                        return Err(Error::Invalid(format!("class `{c}` has no slot among {slots}")));
                    }
                    select.set(c.id(), i, 1.0);
                }
                let select = tape.constant(select);
                let slotted = tape.matmul(select, f);
                tape.reshape(slotted, 1, slots * width)
            }
        };
        parts.push(part);
    }
    Ok(tape.concat_cols(&parts))
}

/// Plain-matrix form of [`window_on_tape`]; `None` marks an empty frame.
pub fn concat_window_features(
    frames: [(Option<&Matrix>, &[ObjectClass]); WINDOW_FRAMES],
    slots: usize,
    width: usize,
) -> Result<Matrix> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let mut built = Vec::with_capacity(WINDOW_FRAMES);
    for (m, classes) in frames {
        let features = m.map(|m| tape.constant(m.clone()));
        built.push(WindowFrame { features, classes });
    }
    let arr: [WindowFrame; WINDOW_FRAMES] = built.try_into().map_err(|_| Error::Invalid("window".into()))?;
    let v = window_on_tape(&mut tape, &arr, slots, width)?;
    Ok(tape.value(v).clone())
}
