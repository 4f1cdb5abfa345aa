//! Frame annotations, report text handling, and the synthetic scene grammar.
//!
//! The interchange format is JSONL, one annotated frame per line:
//!
//! ```text
//! {"video": 0, "frame": 3, "detections": [{"class": "kidney", "box": [x, y, w, h], "conf": 0.9}],
//!  "interactions": [["prograsp forceps", "grasping", "kidney"]], "missing": [],
//!  "report": "Prograsp forceps is grasping kidney."}
//! ```
//!
//! `missing` lists classes known to be present but not detected (for
//! example a dropped kidney); it may be omitted when empty.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn id(self) -> usize {
                self as usize
            }

            pub fn from_id(id: usize) -> Option<Self> {
                Self::ALL.get(id).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|c| c.name() == s)
                    .ok_or_else(|| Error::Unknown { kind: stringify!($name), name: s.to_string() })
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

named_enum!(
    /// Detectable objects: one tissue and eight instruments.
    ObjectClass {
        Kidney => "kidney",
        MonopolarCurvedScissors => "monopolar curved scissors",
        BipolarForceps => "bipolar forceps",
        PrograspForceps => "prograsp forceps",
        ClipApplier => "clip applier",
        Suction => "suction",
        UltrasoundProbe => "ultrasound probe",
        Stapler => "stapler",
        LargeNeedleDriver => "large needle driver",
    }
);

impl ObjectClass {
    pub const COUNT: usize = 9;

    pub fn is_tissue(self) -> bool {
        self == ObjectClass::Kidney
    }

    pub fn instruments() -> impl Iterator<Item = ObjectClass> {
        Self::ALL.iter().copied().filter(|c| !c.is_tissue())
    }
}

named_enum!(
    /// Instrument-tissue relations. `Idle` only appears in report text.
    RelationClass {
        Manipulating => "manipulating",
        Grasping => "grasping",
        Retracting => "retracting",
        Cutting => "cutting",
        Cauterizing => "cauterizing",
        Looping => "looping",
        Suctioning => "suctioning",
        Clipping => "clipping",
        UltrasoundSensing => "ultrasound sensing",
        Stapling => "stapling",
        Suturing => "suturing",
        Idle => "idle",
    }
);

impl RelationClass {
    pub fn is_interactive(self) -> bool {
        self != RelationClass::Idle
    }
}

/// Axis-aligned box `(x, y, w, h)` in normalized image coordinates, `(x, y)` top-left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

const BOX_TOLERANCE: f64 = 1e-9;

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x, self.y, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite box {:?}", vals)));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::data(format!("box {:?} has non-positive size", vals)));
        }
        if self.x < 0.0
            || self.y < 0.0
            || self.x + self.w > 1.0 + BOX_TOLERANCE
            || self.y + self.h > 1.0 + BOX_TOLERANCE
        {
            return Err(Error::data(format!("box {:?} leaves the unit square", vals)));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub frame_index: u32,
    pub class: ObjectClass,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub subject: ObjectClass,
    pub relation: RelationClass,
    pub object: ObjectClass,
}

impl Interaction {
    pub fn involves(&self, class: ObjectClass) -> bool {
        self.subject == class || self.object == class
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub video: u32,
    pub frame_index: u32,
    pub detections: Vec<Detection>,
    pub interactions: Vec<Interaction>,
    /// Classes present in the scene but absent from `detections`.
    pub missing: Vec<ObjectClass>,
    pub report: String,
}

impl AnnotatedFrame {
    pub fn validate(&self) -> Result<()> {
        if self.report.trim().is_empty() {
            return Err(Error::data("empty report"));
        }
        for d in &self.detections {
            d.bbox.validate()?;
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::data(format!("confidence {} outside [0, 1]", d.confidence)));
            }
            if d.frame_index != self.frame_index {
                return Err(Error::data(format!(
                    "detection frame {} in frame {}",
                    d.frame_index, self.frame_index
                )));
            }
        }
        for i in &self.interactions {
            if !i.relation.is_interactive() {
                return Err(Error::data("`idle` is not an interaction relation"));
            }
            for end in [i.subject, i.object] {
                let seen = self.detections.iter().any(|d| d.class == end) || self.missing.contains(&end);
                if !seen {
                    return Err(Error::data(format!(
                        "interaction endpoint `{end}` neither detected nor flagged missing"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_interaction(&self) -> bool {
        !self.interactions.is_empty()
    }

    pub fn tokens(&self) -> Vec<String> {
        normalize_text(&self.report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: u32,
    pub frames: Vec<AnnotatedFrame>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Unknown {
                kind: "split",
                name: other.to_string(),
            }),
        }
    }
}

/// Frames grouped by video, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub split: Split,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &AnnotatedFrame> {
        self.videos.iter().flat_map(|v| v.frames.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.num_frames() == 0
    }

    /// Builds a dataset from frames, grouping by video in order of first
    /// appearance and validating every invariant.
    pub fn from_frames(frames: Vec<AnnotatedFrame>) -> Result<Self> {
        let mut order: Vec<u32> = Vec::new();
        let mut groups: HashMap<u32, Vec<AnnotatedFrame>> = HashMap::new();
        for f in frames {
            f.validate()?;
            let g = groups.entry(f.video).or_insert_with(|| {
                order.push(f.video);
                Vec::new()
            });
            if let Some(prev) = g.last() {
                if f.frame_index <= prev.frame_index {
                    return Err(Error::data(format!(
                        "video {}: frame {} follows frame {}",
                        f.video, f.frame_index, prev.frame_index
                    )));
                }
            }
            g.push(f);
        }
        let videos = order
            .into_iter()
            .map(|id| Video {
                id,
                frames: groups.remove(&id).unwrap_or_default(),
            })
            .collect();
        Ok(Self {
            videos,
            split: Split::All,
        })
    }

    /// Splits by whole videos: the listed ids become `val`, the rest `train`.
    pub fn partition(&self, val_videos: &[u32]) -> (Dataset, Dataset) {
        let (val, train): (Vec<Video>, Vec<Video>) = self
            .videos
            .iter()
            .cloned()
            .partition(|v| val_videos.contains(&v.id));
        (
            Dataset {
                videos: train,
                split: Split::Train,
            },
            Dataset {
                videos: val,
                split: Split::Val,
            },
        )
    }

    /// Default held-out videos: the last `floor(n / 10)` (at least one when
    /// the dataset has two or more videos).
    pub fn default_val_videos(&self) -> Vec<u32> {
        let n = self.videos.len();
        if n < 2 {
            return Vec::new();
        }
        let k = (n / 10).max(1);
        self.videos[n - k..].iter().map(|v| v.id).collect()
    }

    pub fn select(&self, split: Split, val_videos: &[u32]) -> Dataset {
        match split {
            Split::All => self.clone(),
            Split::Train => self.partition(val_videos).0,
            Split::Val => self.partition(val_videos).1,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        for f in self.frames() {
            write_record(&mut out, &FrameRecord::from(f)).expect("in-memory write");
            out.push(b'\n');
        }
        String::from_utf8(out).expect("json is utf-8")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Characters removed by [`normalize_text`].
pub const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Lowercases, strips ASCII punctuation and splits on whitespace.
pub fn normalize_text(report: &str) -> Vec<String> {
    let cleaned: String = report
        .chars()
        .filter(|c| !PUNCTUATION.contains(*c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its full token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::data("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `BOS tokens... EOS`.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(BOS);
        out.extend(tokens.iter().map(|t| self.id(t)));
        out.push(EOS);
        out
    }

    /// Content tokens of `ids`, stopping at the first EOS and dropping PAD/BOS.
    pub fn decode_tokens(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        self.decode_tokens(ids).join(" ")
    }
}

/// Vocabulary over every normalized report of `dataset`, ordered by first occurrence.
pub fn build_vocab(dataset: &Dataset) -> Result<Vocabulary> {
    if dataset.is_empty() {
        return Err(Error::data("cannot build a vocabulary from an empty dataset"));
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    for f in dataset.frames() {
        for t in f.tokens() {
            if seen.insert(t.clone(), ()).is_none() {
                tokens.push(t);
            }
        }
    }
    Vocabulary::from_tokens(tokens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    /// Directory tree `<root>/seq_<video>/frame<index>.json`, one file per
    /// frame holding `{"detections": [...], "interactions": [...], "caption": str}`.
    MiccaiAnnotations,
}

impl FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DataFormat::Jsonl),
            "miccai-annotations" => Ok(DataFormat::MiccaiAnnotations),
            other => Err(Error::Unknown {
                kind: "format",
                name: other.to_string(),
            }),
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Jsonl => load_jsonl(path),
        DataFormat::MiccaiAnnotations => load_annotation_tree(path),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    conf: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    video: u32,
    frame: u32,
    detections: Vec<DetectionRecord>,
    interactions: Vec<[String; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    missing: Vec<String>,
    report: String,
}

impl From<&AnnotatedFrame> for FrameRecord {
    fn from(f: &AnnotatedFrame) -> Self {
        Self {
            video: f.video,
            frame: f.frame_index,
            detections: f
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    class: d.class.name().to_string(),
                    bbox: d.bbox.to_array(),
                    conf: d.confidence,
                })
                .collect(),
            interactions: f
                .interactions
                .iter()
                .map(|i| {
                    [
                        i.subject.name().to_string(),
                        i.relation.name().to_string(),
                        i.object.name().to_string(),
                    ]
                })
                .collect(),
            missing: f.missing.iter().map(|c| c.name().to_string()).collect(),
            report: f.report.clone(),
        }
    }
}

fn parse_detections(records: Vec<DetectionRecord>, frame: u32) -> Result<Vec<Detection>> {
    records
        .into_iter()
        .map(|d| {
            let [x, y, w, h] = d.bbox;
            Ok(Detection {
                frame_index: frame,
                class: d.class.parse()?,
                bbox: BBox::new(x, y, w, h)?,
                confidence: d.conf,
            })
        })
        .collect()
}

fn parse_interactions(records: Vec<[String; 3]>) -> Result<Vec<Interaction>> {
    records
        .into_iter()
        .map(|[s, r, o]| {
            Ok(Interaction {
                subject: s.parse()?,
                relation: r.parse()?,
                object: o.parse()?,
            })
        })
        .collect()
}

impl TryFrom<FrameRecord> for AnnotatedFrame {
    type Error = Error;
    fn try_from(r: FrameRecord) -> Result<Self> {
        let f = AnnotatedFrame {
            video: r.video,
            frame_index: r.frame,
            detections: parse_detections(r.detections, r.frame)?,
            interactions: parse_interactions(r.interactions)?,
            missing: r.missing.iter().map(|m| m.parse()).collect::<Result<_>>()?,
            report: r.report,
        };
        f.validate()?;
        Ok(f)
    }
}

fn at_line(path: &Path, line: usize, e: Error) -> Error {
    let message = match e {
        Error::Data { message, .. } => message,
        other => other.to_string(),
    };
    Error::Data {
        path: Some(path.to_path_buf()),
        line: Some(line),
        message,
    }
}

fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    let mut lines_of: Vec<usize> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| at_line(path, i + 1, Error::data(e.to_string())))?;
        frames.push(AnnotatedFrame::try_from(record).map_err(|e| at_line(path, i + 1, e))?);
        lines_of.push(i + 1);
    }
    // Re-run grouping with per-line attribution of ordering errors.
    let mut last: HashMap<u32, u32> = HashMap::new();
    for (f, &line) in frames.iter().zip(&lines_of) {
        if let Some(&prev) = last.get(&f.video) {
            if f.frame_index <= prev {
                return Err(at_line(
                    path,
                    line,
                    Error::data(format!(
                        "video {}: frame {} follows frame {} (frames must strictly increase)",
                        f.video, f.frame_index, prev
                    )),
                ));
            }
        }
        last.insert(f.video, f.frame_index);
    }
    Dataset::from_frames(frames)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    detections: Vec<AnnotationDetection>,
    #[serde(default)]
    interactions: Vec<[String; 3]>,
    #[serde(default)]
    missing: Vec<String>,
    caption: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationDetection {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default = "one")]
    conf: f64,
}

fn one() -> f64 {
    1.0
}

fn trailing_number(s: &str) -> Option<u32> {
    let digits: String = s
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn load_annotation_tree(root: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut seqs: BTreeMap<u32, PathBuf> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("seq_").and_then(trailing_number) {
            seqs.insert(id, path);
        }
    }
    if seqs.is_empty() {
        return Err(Error::Data {
            path: Some(root.to_path_buf()),
            line: None,
            message: "no seq_<n> directories found".into(),
        });
    }
    let mut frames = Vec::new();
    for (video, dir) in seqs {
        let mut files: BTreeMap<u32, PathBuf> = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(n) = trailing_number(&stem) {
                files.insert(n, path);
            }
        }
        for (frame, path) in files {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let wrap = |e: Error| Error::Data {
                path: Some(path.clone()),
                line: None,
                message: match e {
                    Error::Data { message, .. } => message,
                    other => other.to_string(),
                },
            };
            let ann: AnnotationFile =
                serde_json::from_str(&text).map_err(|e| wrap(Error::data(e.to_string())))?;
            let record = FrameRecord {
                video,
                frame,
                detections: ann
                    .detections
                    .into_iter()
                    .map(|d| DetectionRecord {
                        class: d.class,
                        bbox: d.bbox,
                        conf: d.conf,
                    })
                    .collect(),
                interactions: ann.interactions,
                missing: ann.missing,
                report: ann.caption,
            };
            frames.push(AnnotatedFrame::try_from(record).map_err(wrap)?);
        }
    }
    Dataset::from_frames(frames)
}

/// JSON formatter that writes every float in exponent form with 17
/// significant digits, so values round-trip exactly.
pub(crate) struct PreciseFloats;

impl serde_json::ser::Formatter for PreciseFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{:.16e}", value)
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{:.16e}", value as f64)
    }
}

pub(crate) fn write_record<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(w, PreciseFloats);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Invalid(format!("serialization failed: {e}")))
}

/// Relation each instrument performs in the synthetic grammar.
pub fn synthetic_relation(instrument: ObjectClass) -> RelationClass {
    use ObjectClass::*;
    match instrument {
        MonopolarCurvedScissors => RelationClass::Cutting,
        BipolarForceps => RelationClass::Cauterizing,
        PrograspForceps => RelationClass::Grasping,
        ClipApplier => RelationClass::Clipping,
        Suction => RelationClass::Suctioning,
        UltrasoundProbe => RelationClass::UltrasoundSensing,
        Stapler => RelationClass::Stapling,
        LargeNeedleDriver => RelationClass::Suturing,
        Kidney => RelationClass::Idle,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_videos: u32,
    pub frames_per_video: u32,
    pub seed: u64,
    pub node_dropout_rate: f64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(Error::Config("num_videos must be at least 1".into()));
        }
        if self.frames_per_video < 3 {
            return Err(Error::Config("frames_per_video must be at least 3".into()));
        }
        if !(0.0..=0.5).contains(&self.node_dropout_rate) {
            return Err(Error::Config(format!(
                "node_dropout_rate {} outside [0, 0.5]",
                self.node_dropout_rate
            )));
        }
        Ok(())
    }
}

/// Report text for a set of instruments, given which of them interact with the kidney.
///
/// Interacting clauses come first, then idle ones, each group in class-id
/// order, joined with "and".
pub fn synthetic_report(instruments: &[(ObjectClass, bool)]) -> String {
    let mut sorted = instruments.to_vec();
    sorted.sort_by_key(|&(c, active)| (!active, c.id()));
    if sorted.is_empty() {
        return "No instrument present.".to_string();
    }
    let clauses: Vec<String> = sorted
        .iter()
        .map(|&(c, active)| {
            if active {
                format!("{} is {} kidney", c.name(), synthetic_relation(c).name())
            } else {
                format!("{} is idle", c.name())
            }
        })
        .collect();
    let mut text = clauses.join(" and ");
    if let Some(first) = text.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    text.push('.');
    text
}

struct SceneState {
    kidney_center: (f64, f64),
    kidney_size: (f64, f64),
    instruments: Vec<(ObjectClass, bool)>,
}

fn place_box(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let x = (cx - w / 2.0).clamp(0.0, 1.0 - w);
    let y = (cy - h / 2.0).clamp(0.0, 1.0 - h);
    BBox { x, y, w, h }
}

fn sample_instruments(rng: &mut ChaCha8Rng) -> Vec<(ObjectClass, bool)> {
    let pool: Vec<ObjectClass> = ObjectClass::instruments().collect();
    let n = rng.gen_range(1..=3usize);
    let mut chosen: Vec<ObjectClass> = pool.choose_multiple(rng, n).copied().collect();
    chosen.sort();
    let active = rng.gen_range(0..=n.min(2));
    let mut flags = vec![false; n];
    for idx in rand::seq::index::sample(rng, n, active).into_iter() {
        flags[idx] = true;
    }
    chosen.into_iter().zip(flags).collect()
}

/// Generates a deterministic synthetic corpus.
///
/// Each video has a kidney whose position drifts slowly. Every frame holds
/// one to three distinct instruments; an instrument interacting with the
/// kidney sits on top of it, an idle one sits well away on the side with
/// more room. Whether an instrument interacts is therefore only decidable
/// relative to the kidney. The kidney detection is dropped independently
/// per frame with probability `node_dropout_rate` and recorded in `missing`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut frames = Vec::with_capacity((config.num_videos * config.frames_per_video) as usize);
    for video in 0..config.num_videos {
        let mut state = SceneState {
            kidney_center: (rng.gen_range(0.3..0.7), rng.gen_range(0.35..0.65)),
            kidney_size: (rng.gen_range(0.25..0.35), rng.gen_range(0.25..0.35)),
            instruments: sample_instruments(&mut rng),
        };
        for frame in 0..config.frames_per_video {
            if frame > 0 {
                let (kx, ky) = state.kidney_center;
                state.kidney_center = (
                    (kx + rng.gen_range(-0.01..0.01)).clamp(0.3, 0.7),
                    (ky + rng.gen_range(-0.01..0.01)).clamp(0.35, 0.65),
                );
                if rng.gen_bool(0.3) {
                    state.instruments = sample_instruments(&mut rng);
                }
            }
            frames.push(synthesize_frame(&mut rng, &state, video, frame, config.node_dropout_rate));
        }
    }
    Dataset::from_frames(frames)
}

fn synthesize_frame(
    rng: &mut ChaCha8Rng,
    state: &SceneState,
    video: u32,
    frame: u32,
    dropout: f64,
) -> AnnotatedFrame {
    let (kx, ky) = state.kidney_center;
    let (kw, kh) = state.kidney_size;
    let mut detections = Vec::with_capacity(4);
    let mut missing = Vec::new();
    let kidney_box = place_box(kx, ky, kw, kh);
    let kidney_conf = rng.gen_range(0.5..1.0);
    if rng.gen_bool(dropout) {
        missing.push(ObjectClass::Kidney);
    } else {
        detections.push(Detection {
            frame_index: frame,
            class: ObjectClass::Kidney,
            bbox: kidney_box,
            confidence: kidney_conf,
        });
    }
    let mut interactions = Vec::new();
    for &(class, active) in &state.instruments {
        let w = rng.gen_range(0.08..0.15);
        let h = rng.gen_range(0.08..0.15);
        let (cx, cy) = if active {
            (kx + rng.gen_range(-0.1..0.1), ky + rng.gen_range(-0.1..0.1))
        } else {
            let side = if kx < 0.5 { 1.0 } else { -1.0 };
            (kx + side * rng.gen_range(0.3..0.4), ky + rng.gen_range(-0.3..0.3))
        };
        detections.push(Detection {
            frame_index: frame,
            class,
            bbox: place_box(cx, cy, w, h),
            confidence: rng.gen_range(0.5..1.0),
        });
        if active {
            interactions.push(Interaction {
                subject: class,
                relation: synthetic_relation(class),
                object: ObjectClass::Kidney,
            });
        }
    }
    AnnotatedFrame {
        video,
        frame_index: frame,
        detections,
        interactions,
        missing,
        report: synthetic_report(&state.instruments),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_text("Bipolar Forceps is Grasping kidney."),
            toks(&["bipolar", "forceps", "is", "grasping", "kidney"])
        );
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("suction,  suction!"), toks(&["suction", "suction"]));
        assert_eq!(normalize_text("a-b c_d ~e~"), toks(&["ab", "cd", "e"]));
    }

    fn frame(video: u32, idx: u32, report: &str) -> AnnotatedFrame {
        AnnotatedFrame {
            video,
            frame_index: idx,
            detections: vec![],
            interactions: vec![],
            missing: vec![],
            report: report.to_string(),
        }
    }

    #[test]
    fn vocab_sizes() {
        let ds = Dataset::from_frames(vec![frame(0, 0, "a b"), frame(0, 1, "b c")]).unwrap();
        let v = build_vocab(&ds).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[4..], &toks(&["a", "b", "c"])[..]);

        let ds = Dataset::from_frames(vec![frame(0, 0, "x x x")]).unwrap();
        assert_eq!(build_vocab(&ds).unwrap().len(), 5);

        let empty = Dataset::from_frames(vec![]).unwrap();
        assert!(build_vocab(&empty).is_err());
    }

    #[test]
    fn vocab_encode_decode() {
        let ds = Dataset::from_frames(vec![frame(0, 0, "Suction is idle.")]).unwrap();
        let v = build_vocab(&ds).unwrap();
        let ids = v.encode(&toks(&["suction", "is", "zebra"]));
        assert_eq!(ids, vec![BOS, 4, 5, UNK, EOS]);
        assert_eq!(v.decode(&[BOS, 4, 5, 6, EOS, 4]), "suction is idle");
        assert!(Vocabulary::from_tokens(toks(&["a"])).is_err());
    }

    #[test]
    fn ordering_invariant() {
        assert!(Dataset::from_frames(vec![frame(0, 5, "a"), frame(0, 3, "b")]).is_err());
        assert!(Dataset::from_frames(vec![frame(0, 5, "a"), frame(1, 3, "b")]).is_ok());
    }

    #[test]
    fn report_grammar() {
        use ObjectClass::*;
        assert_eq!(
            synthetic_report(&[(Suction, false), (PrograspForceps, true)]),
            "Prograsp forceps is grasping kidney and suction is idle."
        );
        assert_eq!(synthetic_report(&[]), "No instrument present.");
        assert_eq!(
            normalize_text(&synthetic_report(&[(PrograspForceps, true)])).join(" "),
            "prograsp forceps is grasping kidney"
        );
    }

    #[test]
    fn synthetic_config_ranges() {
        let ok = SyntheticConfig {
            num_videos: 1,
            frames_per_video: 3,
            seed: 7,
            node_dropout_rate: 0.0,
        };
        assert!(ok.validate().is_ok());
        assert!(SyntheticConfig { frames_per_video: 2, ..ok }.validate().is_err());
        assert!(SyntheticConfig { node_dropout_rate: 0.6, ..ok }.validate().is_err());
        assert!(SyntheticConfig { node_dropout_rate: -0.1, ..ok }.validate().is_err());
    }

    #[test]
    fn synthetic_frames_are_consistent() {
        let ds = generate_synthetic(&SyntheticConfig {
            num_videos: 3,
            frames_per_video: 20,
            seed: 3,
            node_dropout_rate: 0.3,
        })
        .unwrap();
        for f in ds.frames() {
            f.validate().unwrap();
            let instruments = f.detections.iter().filter(|d| !d.class.is_tissue()).count();
            assert!((1..=3).contains(&instruments));
            assert!(f.interactions.len() <= 2);
            let kidney = f.detections.iter().any(|d| d.class == ObjectClass::Kidney);
            assert_ne!(kidney, f.missing.contains(&ObjectClass::Kidney));
        }
    }

    #[test]
    fn float_formatting_keeps_precision() {
        let mut out = Vec::new();
        write_record(&mut out, &vec![0.5f64, 0.1]).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "[5.0000000000000000e-1,1.0000000000000001e-1]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![0.5, 0.1]);
    }
}
