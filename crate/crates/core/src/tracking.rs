//! Class-level node tracking across a short window of frames.
//!
//! A trackable class (the kidney by default) that was detected in any of
//! the previous `window - 1` frames but is missing from the current frame is
//! re-inserted with provenance [`Provenance::Tracked`]. The re-inserted node
//! points at its most recent detected occurrence so feature extraction can
//! reuse that row. Instruments are never re-inserted.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, Detection, ObjectClass, Video};
use crate::error::{Error, Result};
use crate::scenegraph::{GraphNode, Provenance};

/// Where a node's features come from: `slot` indexes the completed node
/// list of frame `frame`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSource {
    pub frame: u32,
    pub slot: usize,
}

/// One node of a completed frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneNode {
    pub class: ObjectClass,
    pub bbox: BBox,
    pub provenance: Provenance,
    pub source: NodeSource,
}

impl SceneNode {
    pub fn graph_node(&self, id: usize) -> GraphNode {
        GraphNode {
            id,
            class: self.class,
            provenance: self.provenance,
        }
    }
}

pub fn graph_nodes(nodes: &[SceneNode]) -> Vec<GraphNode> {
    nodes.iter().enumerate().map(|(i, n)| n.graph_node(i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Tracking length in frames, counting the current one.
    pub window: usize,
    pub trackable: Vec<ObjectClass>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window: 3,
            trackable: vec![ObjectClass::Kidney],
        }
    }
}

#[derive(Clone, Debug)]
struct WindowEntry {
    frame: u32,
    /// Detected (not tracked) nodes: class, box, slot.
    detected: Vec<(ObjectClass, BBox, usize)>,
}

/// Per-video tracking state.
#[derive(Clone, Debug)]
pub struct TrackWindow {
    config: TrackerConfig,
    history: VecDeque<WindowEntry>,
    last_frame: Option<u32>,
}

impl TrackWindow {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        if config.window == 0 {
            return Err(Error::Config("tracking window must be at least 1".into()));
        }
        Ok(Self {
            config,
            history: VecDeque::new(),
            last_frame: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Number of frames currently held (never more than the window length).
    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.last_frame
    }

    fn check_order(&self, frame: u32) -> Result<()> {
        match self.last_frame {
            Some(prev) if frame <= prev => Err(Error::Invalid(format!(
                "frame {frame} presented after frame {prev}"
            ))),
            _ => Ok(()),
        }
    }

    /// Completed node set for `frame` without advancing the window.
    pub fn complete(&self, frame: u32, current: &[Detection]) -> Result<Vec<SceneNode>> {
        self.check_order(frame)?;
        let mut nodes: Vec<SceneNode> = current
            .iter()
            .enumerate()
            .map(|(slot, d)| SceneNode {
                class: d.class,
                bbox: d.bbox,
                provenance: Provenance::Detected,
                source: NodeSource { frame, slot },
            })
            .collect();
        let horizon = frame.saturating_sub(self.config.window.saturating_sub(1) as u32);
        for &class in &self.config.trackable {
            if current.iter().any(|d| d.class == class) {
                continue;
            }
            let recent = self
                .history
                .iter()
                .rev()
                .filter(|e| e.frame >= horizon)
                .find_map(|e| {
                    e.detected
                        .iter()
                        .find(|(c, _, _)| *c == class)
                        .map(|&(_, bbox, slot)| (e.frame, bbox, slot))
                });
            if let Some((src_frame, bbox, slot)) = recent {
                nodes.push(SceneNode {
                    class,
                    bbox,
                    provenance: Provenance::Tracked,
                    source: NodeSource {
                        frame: src_frame,
                        slot,
                    },
                });
            }
        }
        Ok(nodes)
    }

    /// Records `frame` in the window. Empty frames still advance it.
    pub fn advance(&mut self, frame: u32, current: &[Detection]) -> Result<()> {
        self.check_order(frame)?;
        self.history.push_back(WindowEntry {
            frame,
            detected: current
                .iter()
                .enumerate()
                .map(|(slot, d)| (d.class, d.bbox, slot))
                .collect(),
        });
        while self.history.len() > self.config.window {
            self.history.pop_front();
        }
        self.last_frame = Some(frame);
        Ok(())
    }

    /// Completes `frame` and advances the window past it.
    pub fn track_update(&mut self, frame: u32, current: &[Detection]) -> Result<Vec<SceneNode>> {
        let nodes = self.complete(frame, current)?;
        self.advance(frame, current)?;
        Ok(nodes)
    }
}

/// Nodes of one frame with tracking disabled: detections only.
pub fn detected_nodes(frame: u32, detections: &[Detection]) -> Vec<SceneNode> {
    detections
        .iter()
        .enumerate()
        .map(|(slot, d)| SceneNode {
            class: d.class,
            bbox: d.bbox,
            provenance: Provenance::Detected,
            source: NodeSource { frame, slot },
        })
        .collect()
}

/// Completed node sets for every frame of a video, in frame order.
pub fn track_video(video: &Video, config: Option<&TrackerConfig>) -> Result<Vec<Vec<SceneNode>>> {
    match config {
        None => Ok(video
            .frames
            .iter()
            .map(|f| detected_nodes(f.frame_index, &f.detections))
            .collect()),
        Some(cfg) => {
            let mut window = TrackWindow::new(cfg.clone())?;
            video
                .frames
                .iter()
                .map(|f| window.track_update(f.frame_index, &f.detections))
                .collect()
        }
    }
}

#[derive(Serialize)]
pub(crate) struct TrackedNodeRecord {
    pub id: usize,
    pub class: ObjectClass,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub provenance: Provenance,
    pub source_frame: u32,
}

#[derive(Serialize)]
pub(crate) struct TrackRecord {
    pub video: u32,
    pub frame: u32,
    pub nodes: Vec<TrackedNodeRecord>,
}

/// JSONL lines with the completed node set of every frame.
pub fn track_dataset_jsonl(dataset: &crate::corpus::Dataset, config: &TrackerConfig) -> Result<String> {
    let mut out = Vec::new();
    for video in &dataset.videos {
        let completed = track_video(video, Some(config))?;
        for (frame, nodes) in video.frames.iter().zip(completed) {
            let record = TrackRecord {
                video: video.id,
                frame: frame.frame_index,
                nodes: nodes
                    .iter()
                    .enumerate()
                    .map(|(id, n)| TrackedNodeRecord {
                        id,
                        class: n.class,
                        bbox: n.bbox.to_array(),
                        provenance: n.provenance,
                        source_frame: n.source.frame,
                    })
                    .collect(),
            };
            crate::corpus::write_record(&mut out, &record)?;
            out.push(b'\n');
        }
    }
    Ok(String::from_utf8(out).expect("json is utf-8"))
}
