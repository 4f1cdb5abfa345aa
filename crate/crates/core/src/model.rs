//! The full report model and its per-frame forward pass.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::corpus::{normalize_text, AnnotatedFrame, Dataset, ObjectClass, Vocabulary};
use crate::decoder::{CaptionModel, DecoderConfig, Strategy};
use crate::error::{Error, Result};
use crate::features::{window_on_tape, window_width, EmbeddingProvider, ExternalFeatures, FeatureProvider, WindowFrame, N_MAX, WINDOW_FRAMES};
use crate::perception::{binarize, interaction_labels, AttentionHeads, InteractionLabels, DEFAULT_HIDDEN};
use crate::relational::RelationalModule;
use crate::scenegraph::{build_scene_graph, normalized_adjacency, Topology};
use crate::tensor::Matrix;
use crate::tracking::{graph_nodes, track_video, SceneNode, TrackerConfig};

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_re: bool,
    /// Master switch for tracking and both attention heads.
    pub use_ip: bool,
    pub use_tracking: bool,
    pub use_global: bool,
    pub use_local: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_re: true,
            use_ip: true,
            use_tracking: true,
            use_global: true,
            use_local: true,
        }
    }
}

impl Ablation {
    pub fn tracking(&self) -> bool {
        self.use_ip && self.use_tracking
    }

    pub fn global(&self) -> bool {
        self.use_ip && self.use_global
    }

    pub fn local(&self) -> bool {
        self.use_ip && self.use_local
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_width: usize,
    pub slots: usize,
    pub ip_hidden: [usize; 2],
    pub gcn_depth: usize,
    pub topology: Topology,
    pub tracking_window: usize,
    pub trackable: Vec<ObjectClass>,
    /// Precomputed node features; the learned embedding provider when absent.
    pub external_features: Option<PathBuf>,
    pub decoder: DecoderConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_width: 64,
            slots: N_MAX,
            ip_hidden: DEFAULT_HIDDEN,
            gcn_depth: 1,
            topology: Topology::Star,
            tracking_window: 3,
            trackable: vec![ObjectClass::Kidney],
            external_features: None,
            decoder: DecoderConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 || self.slots == 0 || self.ip_hidden.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.slots < ObjectClass::COUNT {
            return Err(Error::Config(format!("slots must cover all {} classes", ObjectClass::COUNT)));
        }
        if self.tracking_window == 0 {
            return Err(Error::Config("tracking_window must be positive".into()));
        }
        self.decoder.validate()
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            window: self.tracking_window,
            trackable: self.trackable.clone(),
        }
    }
}

/// Everything the model needs about one frame, precomputed once.
#[derive(Clone, Debug)]
pub struct FramePlan {
    pub video: u32,
    pub frame: u32,
    /// Completed node sets of frames t-2, t-1, t; `None` before the video starts.
    pub window: [Option<Vec<SceneNode>>; WINDOW_FRAMES],
    pub labels: InteractionLabels,
    pub target: Vec<u32>,
    pub reference: Vec<String>,
}

impl FramePlan {
    pub fn nodes(&self) -> &[SceneNode] {
        self.window[WINDOW_FRAMES - 1].as_deref().unwrap_or(&[])
    }
}

/// Builds a plan per frame, in dataset order.
pub fn plan_frames(dataset: &Dataset, vocab: &Vocabulary, config: &ModelConfig) -> Result<Vec<FramePlan>> {
    let tracker = config.tracker();
    let tracker = config.ablation.tracking().then_some(&tracker);
    let mut plans = Vec::with_capacity(dataset.num_frames());
    for video in &dataset.videos {
        let completed = track_video(video, tracker)?;
        for (i, frame) in video.frames.iter().enumerate() {
            let window = std::array::from_fn(|k| {
                let back = WINDOW_FRAMES - 1 - k;
                (i >= back).then(|| completed[i - back].clone())
            });
            plans.push(plan_one(frame, window, vocab));
        }
    }
    Ok(plans)
}

fn plan_one(frame: &AnnotatedFrame, window: [Option<Vec<SceneNode>>; WINDOW_FRAMES], vocab: &Vocabulary) -> FramePlan {
    let reference = normalize_text(&frame.report);
    let labels = interaction_labels(frame, window[WINDOW_FRAMES - 1].as_deref().unwrap_or(&[]));
    FramePlan {
        video: frame.video,
        frame: frame.frame_index,
        window,
        labels,
        target: vocab.encode(&reference),
        reference,
    }
}

/// How attention values enter the memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Soft global gate, gradients everywhere.
    Train,
    /// Hard global gate.
    Inference,
}

/// Values recorded for one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub features: Option<Var>,
    pub memory: Var,
    pub reserved: Option<Var>,
    pub updated: Option<Var>,
    /// `1 x 1` probability when the global head is active.
    pub global_prob: Option<Var>,
    /// `N x 1` probabilities when the local head is active.
    pub local_probs: Option<Var>,
}

/// Explicit attention values, bypassing the heads.
#[derive(Clone, Debug)]
pub struct AttentionOverride {
    pub global: f64,
    pub local: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReportModel {
    pub config: ModelConfig,
    pub provider: FeatureProvider,
    pub relational: RelationalModule,
    pub heads: AttentionHeads,
    pub decoder: CaptionModel,
}

impl ReportModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let provider = match &config.external_features {
            None => FeatureProvider::Embedding(EmbeddingProvider::new(&mut store, &mut rng, config.feature_width)),
            Some(path) => {
                let ext = ExternalFeatures::load(path)?;
                if ext.width() != config.feature_width {
                    return Err(Error::Config(format!(
                        "external features have width {}, config says {}",
                        ext.width(),
                        config.feature_width
                    )));
                }
                FeatureProvider::External(ext)
            }
        };
        let c = config.feature_width;
        let relational = RelationalModule::new(&mut store, &mut rng, c, config.gcn_depth);
        let heads = AttentionHeads::new(&mut store, &mut rng, window_width(config.slots, c), config.slots, config.ip_hidden);
        let decoder = CaptionModel::new(&mut store, &mut rng, &config.decoder, 2 * c, vocab_size)?;
        Ok((
            Self {
                config: config.clone(),
                provider,
                relational,
                heads,
                decoder,
            },
            store,
        ))
    }

    /// Records the node memory of one frame.
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        plan: &FramePlan,
        mode: Mode,
        attention: Option<&AttentionOverride>,
    ) -> Result<FrameVars> {
        let c = self.config.feature_width;
        let ab = self.config.ablation;
        let nodes = plan.nodes();
        if nodes.is_empty() {
            // No nodes: the decoder reads a single all-zero row.
            let memory = tape.constant(Matrix::zeros(1, 2 * c));
            return Ok(FrameVars {
                features: None,
                memory,
                reserved: None,
                updated: None,
                global_prob: None,
                local_probs: None,
            });
        }
        let features = self.provider.extract(tape, plan.video, nodes)?;

        let needs_window = attention.is_none() && (ab.global() || ab.local());
        let window = if needs_window {
            let mut feats = Vec::with_capacity(WINDOW_FRAMES);
            let mut classes = Vec::with_capacity(WINDOW_FRAMES);
            for (k, frame) in plan.window.iter().enumerate() {
                let ns = frame.as_deref().unwrap_or(&[]);
                classes.push(ns.iter().map(|n| n.class).collect::<Vec<_>>());
                feats.push(match ns.is_empty() {
                    true => None,
                    false if k == WINDOW_FRAMES - 1 => Some(features),
                    false => Some(self.provider.extract(tape, plan.video, ns)?),
                });
            }
            let frames: [WindowFrame; WINDOW_FRAMES] = std::array::from_fn(|k| WindowFrame {
                features: feats[k],
                classes: &classes[k],
            });
            Some(window_on_tape(tape, &frames, self.config.slots, c)?)
        } else {
            None
        };

        let mut global_prob = None;
        let gate = match (attention, window) {
            (Some(a), _) => tape.constant(Matrix::scalar(a.global)),
            (None, Some(w)) if ab.global() => {
                let p = self.heads.global_prob(tape, w)?;
                global_prob = Some(p);
                match mode {
                    Mode::Train => p,
                    Mode::Inference => {
                        let hard = binarize(tape.value(p).item());
                        tape.constant(Matrix::scalar(hard))
                    }
                }
            }
            _ => tape.constant(Matrix::scalar(1.0)),
        };

        let mut local_probs = None;
        let local = match (attention, window) {
            (Some(a), _) => tape.constant(Matrix::from_vec(a.local.len(), 1, a.local.clone())?),
            (None, Some(w)) if ab.local() => {
                let classes: Vec<ObjectClass> = nodes.iter().map(|n| n.class).collect();
                let p = self.heads.local_probs(tape, w, &classes)?;
                local_probs = Some(p);
                p
            }
            _ => tape.constant(Matrix::zeros(nodes.len(), 1)),
        };

        let graph = build_scene_graph(&graph_nodes(nodes), self.config.topology, None)?;
        let adj = normalized_adjacency(&graph)?;
        let out = self
            .relational
            .forward_on_tape(tape, features, &adj.normalized, gate, local, ab.use_re)?;
        Ok(FrameVars {
            features: Some(features),
            memory: out.memory,
            reserved: Some(out.reserved),
            updated: Some(out.updated),
            global_prob,
            local_probs,
        })
    }

    /// Node memory of a frame at inference.
    pub fn memory(&self, params: &ParamStore, plan: &FramePlan) -> Result<Matrix> {
        let mut tape = Tape::new(params);
        let vars = self.forward_frame(&mut tape, plan, Mode::Inference, None)?;
        Ok(tape.value(vars.memory).clone())
    }

    pub fn generate(
        &self,
        params: &ParamStore,
        plan: &FramePlan,
        strategy: Strategy,
        vocab: &Vocabulary,
    ) -> Result<crate::decoder::DecodeResult> {
        let memory = self.memory(params, plan)?;
        self.decoder
            .generate(params, &memory, strategy, self.config.decoder.max_len, Some(vocab))
    }
}
