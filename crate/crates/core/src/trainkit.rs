//! Training, evaluation and ablation runs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore, Tape};
use crate::checkpoint::{save_checkpoint, Checkpoint, CHECKPOINT_FILE};
use crate::corpus::{build_vocab, write_atomic, write_record, Dataset, Split, Vocabulary};
use crate::decoder::Strategy;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_all, EvaluationReport};
use crate::model::{plan_frames, Ablation, FramePlan, Mode, ModelConfig, ReportModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub caption_weight: f64,
    pub global_weight: f64,
    pub local_weight: f64,
    pub adam: AdamConfig,
    /// Samples per gradient work unit. Units run in parallel and are summed
    /// in a fixed order, so results do not depend on the thread count.
    pub chunk_size: usize,
    /// Held-out video ids; the last tenth of the videos when absent.
    pub val_videos: Option<Vec<u32>>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 80,
            batch_size: 50,
            learning_rate: 6e-5,
            lr_decay: 0.8,
            decay_every: 10,
            caption_weight: 1.0,
            global_weight: 0.5,
            local_weight: 0.5,
            adam: AdamConfig::default(),
            chunk_size: 5,
            val_videos: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.caption_weight];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning_rate and caption_weight must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if [self.global_weight, self.local_weight].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("attention loss weights must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 || self.chunk_size == 0 {
            return Err(Error::Config("epochs, batch_size, decay_every and chunk_size must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        self.model.validate()
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted total over the epoch's samples.
    pub loss: f64,
    pub caption: f64,
    pub global: f64,
    pub local: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub vocab_size: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub val_videos: Vec<u32>,
    pub epochs: Vec<EpochRecord>,
    pub evaluation: Option<EvaluationReport>,
    pub wall_clock_secs: f64,
}

/// Adam with bias correction.
pub struct Adam {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, m)| vec![0.0; m.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            // Parameters outside this step's graph are left untouched.
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// Loss components of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub caption: f64,
    pub global: f64,
    pub local: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.caption += o.caption;
        self.global += o.global;
        self.local += o.local;
    }
}

/// Records the weighted loss of one frame, backpropagates it into `grads`
/// scaled by `weight`, and returns its components.
pub fn sample_loss(
    model: &ReportModel,
    params: &ParamStore,
    config: &TrainConfig,
    plan: &FramePlan,
    grads: Option<&mut Grads>,
    weight: f64,
) -> Result<LossParts> {
    let mut tape = Tape::new(params);
    let vars = model.forward_frame(&mut tape, plan, Mode::Train, None)?;
    let ce = model.decoder.caption_loss(&mut tape, vars.memory, &plan.target)?;
    let mut parts = LossParts {
        caption: tape.value(ce).item(),
        ..LossParts::default()
    };
    let mut total = tape.scale(ce, config.caption_weight);
    if let Some(p) = vars.global_prob {
        let g = tape.bce(p, &[plan.labels.global]);
        parts.global = tape.value(g).item();
        let g = tape.scale(g, config.global_weight);
        total = tape.add(total, g);
    }
    if let Some(p) = vars.local_probs {
        let l = tape.bce(p, &plan.labels.local);
        parts.local = tape.value(l).item();
        let l = tape.scale(l, config.local_weight);
        total = tape.add(total, l);
    }
    parts.total = tape.value(total).item();
    if let Some(grads) = grads {
        let total = tape.scale(total, weight);
        tape.backward(total, grads);
    }
    Ok(parts)
}

/// Mean gradient and summed loss parts of a batch.
pub fn batch_gradient(
    model: &ReportModel,
    params: &ParamStore,
    config: &TrainConfig,
    batch: &[&FramePlan],
) -> Result<(Grads, LossParts)> {
    let weight = 1.0 / batch.len() as f64;
    let units: Vec<Result<(Grads, LossParts)>> = batch
        .par_chunks(config.chunk_size)
        .map(|chunk| {
            let mut grads = Grads::new(params);
            let mut sum = LossParts::default();
            for plan in chunk {
                let parts = sample_loss(model, params, config, plan, Some(&mut grads), weight)?;
                sum.add(&parts);
            }
            Ok((grads, sum))
        })
        .collect();
    let mut grads = Grads::new(params);
    let mut sum = LossParts::default();
    for unit in units {
        let (g, s) = unit?;
        grads.merge(&g);
        sum.add(&s);
    }
    Ok((grads, sum))
}

/// The held-out videos a config selects for `dataset`.
pub fn val_videos_for(config: &TrainConfig, dataset: &Dataset) -> Vec<u32> {
    config.val_videos.clone().unwrap_or_else(|| dataset.default_val_videos())
}

/// Result of [`train`].
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
}

/// Trains on the training videos of `dataset`. The final parameters are
/// rounded to checkpoint precision, so a saved and reloaded model behaves
/// identically. `on_epoch` sees each finished epoch.
pub fn train(config: &TrainConfig, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Trained> {
    config.validate()?;
    let start = Instant::now();
    let val_videos = val_videos_for(config, dataset);
    let (train_set, val_set) = dataset.partition(&val_videos);
    if train_set.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let vocab = build_vocab(&train_set)?;
    let plans = plan_frames(&train_set, &vocab, &config.model)?;
    let (model, mut params) = ReportModel::new(&config.model, vocab.len(), config.seed)?;
    let mut adam = Adam::new(config.adam.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..plans.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&FramePlan> = idx.iter().map(|&i| &plans[i]).collect();
            let (grads, parts) = batch_gradient(&model, &params, config, &batch)?;
            if !parts.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam.update(&mut params, &grads, lr);
            sum.add(&parts);
        }
        let n = plans.len() as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            loss: sum.total / n,
            caption: sum.caption / n,
            global: sum.global / n,
            local: sum.local / n,
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} loss {:.5} ce {:.5} global {:.5} local {:.5}",
            rec.loss,
            rec.caption,
            rec.global,
            rec.local
        );
        on_epoch(&rec);
        epochs.push(rec);
    }
    params.quantize_f32();

    let record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        vocab_size: vocab.len(),
        train_frames: train_set.num_frames(),
        val_frames: val_set.num_frames(),
        val_videos: val_videos.clone(),
        epochs,
        evaluation: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(Trained {
        checkpoint: Checkpoint {
            config: config.model.clone(),
            vocab,
            seed: config.seed,
            val_videos,
            model,
            params,
        },
        record,
    })
}

/// One generated report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub video: u32,
    pub frame: u32,
    pub report: String,
}

pub struct Evaluation {
    pub report: EvaluationReport,
    pub candidates: Vec<Candidate>,
}

/// Greedy-decodes every frame of `split` and scores it against the references.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> Result<Evaluation> {
    evaluate_with(checkpoint, dataset, split, Strategy::Greedy)
}

pub fn evaluate_with(checkpoint: &Checkpoint, dataset: &Dataset, split: Split, strategy: Strategy) -> Result<Evaluation> {
    let subset = dataset.select(split, &checkpoint.val_videos);
    if subset.is_empty() {
        return Err(Error::data(format!("split `{split:?}` has no frames")));
    }
    let plans = plan_frames(&subset, &checkpoint.vocab, &checkpoint.config)?;
    let decoded: Vec<Result<Vec<String>>> = plans
        .par_iter()
        .map(|p| {
            let out = checkpoint
                .model
                .generate(&checkpoint.params, p, strategy, &checkpoint.vocab)?;
            Ok(checkpoint.vocab.decode_tokens(&out.tokens))
        })
        .collect();
    let candidates_tokens = decoded.into_iter().collect::<Result<Vec<_>>>()?;
    let references: Vec<Vec<String>> = plans.iter().map(|p| p.reference.clone()).collect();
    let report = evaluate_all(&candidates_tokens, &references)?;
    let candidates = plans
        .iter()
        .zip(&candidates_tokens)
        .map(|(p, c)| Candidate {
            video: p.video,
            frame: p.frame,
            report: c.join(" "),
        })
        .collect();
    Ok(Evaluation { report, candidates })
}

pub fn candidates_jsonl(candidates: &[Candidate]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for c in candidates {
        write_record(&mut out, c)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes the checkpoint, `run.json` and the held-out candidates into `dir`.
pub fn write_run(dir: &Path, trained: &Trained, evaluation: Option<&Evaluation>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck = &trained.checkpoint;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &ck.config, &ck.vocab, ck.seed, &ck.val_videos, &ck.params)?;
    let mut record = trained.record.clone();
    if let Some(ev) = evaluation {
        record.evaluation = Some(ev.report.clone());
        write_atomic(&dir.join("candidates.jsonl"), &candidates_jsonl(&ev.candidates)?)?;
    }
    write_atomic(&dir.join("run.json"), &to_json_bytes(&record)?)
}

pub fn to_json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::Invalid(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Which comparison grid an ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Basic, +RE, +IP, full.
    Table2,
    /// Relational exploration always on; tracking and attention toggled.
    Table3,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Grid::Table2),
            "table3" => Ok(Grid::Table3),
            other => Err(Error::Unknown {
                kind: "grid",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub ablation: Ablation,
}

fn row(name: &str, use_re: bool, use_ip: bool, nt: bool, ga: bool, la: bool) -> GridRow {
    GridRow {
        name: name.to_string(),
        ablation: Ablation {
            use_re,
            use_ip,
            use_tracking: nt,
            use_global: ga,
            use_local: la,
        },
    }
}

impl Grid {
    pub fn rows(self) -> Vec<GridRow> {
        match self {
            Grid::Table2 => vec![
                row("Basic", false, false, false, false, false),
                row("Basic+RE", true, false, false, false, false),
                row("Basic+IP", false, true, true, true, true),
                row("Basic+RE+IP", true, true, true, true, true),
            ],
            Grid::Table3 => vec![
                row("M1", true, true, false, false, false),
                row("M2 (NT)", true, true, true, false, false),
                row("M3 (GA)", true, true, false, true, false),
                row("M4 (LA)", true, true, false, false, true),
                row("M5 (NT+GA)", true, true, true, true, false),
                row("Full (NT+GA+LA)", true, true, true, true, true),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub scores: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub name: String,
    pub ablation: Ablation,
    pub runs: Vec<SeedScores>,
    pub mean: Vec<(String, f64)>,
    /// Sample standard deviation (zero for a single seed).
    pub std: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<RowSummary>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text rendering, `mean ± std` per metric.
    pub fn to_text(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let metrics: Vec<&str> = first.mean.iter().map(|(k, _)| k.as_str()).collect();
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!("{:<name_w$}", "model");
        for m in &metrics {
            let _ = write!(out, "  {m:>17}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<name_w$}", r.name);
            for ((_, mean), (_, sd)) in r.mean.iter().zip(&r.std) {
                let _ = write!(out, "  {:>17}", format!("{mean:.4} ± {sd:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

fn summarize(name: &str, ablation: Ablation, runs: Vec<SeedScores>) -> RowSummary {
    let keys: Vec<String> = runs[0].scores.iter().map(|(k, _)| k.clone()).collect();
    let n = runs.len() as f64;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        let vals: Vec<f64> = runs.iter().map(|r| r.scores[i].1).collect();
        let m = vals.iter().sum::<f64>() / n;
        let var = if runs.len() > 1 {
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.push((k.clone(), m));
        std.push((k.clone(), var.sqrt()));
    }
    RowSummary {
        name: name.to_string(),
        ablation,
        runs,
        mean,
        std,
    }
}

/// Trains and evaluates every row for seeds `base.seed .. base.seed + seeds`.
/// `on_run` sees each finished (row, seed, held-out report).
pub fn ablate_rows(
    base: &TrainConfig,
    dataset: &Dataset,
    rows: &[GridRow],
    seeds: usize,
    mut on_run: impl FnMut(&GridRow, u64, &EvaluationReport),
) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let mut runs = Vec::with_capacity(seeds);
        for s in 0..seeds as u64 {
            let mut cfg = base.clone();
            cfg.seed = base.seed + s;
            cfg.model.ablation = r.ablation;
            let trained = train(&cfg, dataset, |_| {})?;
            let ev = evaluate(&trained.checkpoint, dataset, Split::Val)?;
            on_run(r, cfg.seed, &ev.report);
            runs.push(SeedScores {
                seed: cfg.seed,
                scores: ev.report.headline().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            });
        }
        out.push(summarize(&r.name, r.ablation, runs));
    }
    Ok(AblationTable { rows: out })
}

pub fn ablate(
    base: &TrainConfig,
    dataset: &Dataset,
    grid: Grid,
    seeds: usize,
    on_run: impl FnMut(&GridRow, u64, &EvaluationReport),
) -> Result<AblationTable> {
    ablate_rows(base, dataset, &grid.rows(), seeds, on_run)
}

/// Vocabulary a checkpoint would be trained with, for inspection.
pub fn training_vocab(config: &TrainConfig, dataset: &Dataset) -> Result<Vocabulary> {
    let (train_set, _) = dataset.partition(&val_videos_for(config, dataset));
    build_vocab(&train_set)
}
