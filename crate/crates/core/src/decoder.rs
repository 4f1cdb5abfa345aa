//! Encoder-decoder transformer that turns the node memory of a frame into a
//! report. Memory rows carry no positional signal, so the encoder is
//! permutation-equivariant over nodes and the decoder output is invariant to
//! node order. Target positions use sinusoidal encodings; the token
//! embedding doubles as the output projection.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, ParamStore, Tape, Var};
use crate::corpus::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{uniform, LayerNorm, Linear};
use crate::tensor::Matrix;

const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_width: usize,
    /// Longest output in tokens, BOS and EOS included.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_width: 256,
            max_len: 30,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ff_width == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `ctx`; `mask` is added to the scores.
    fn forward(&self, tape: &mut Tape, x: Var, ctx: Var, mask: Option<Var>) -> Var {
        let d = tape.shape(x).1;
        let dh = d / self.heads;
        let q = self.q.forward(tape, x);
        let k = self.k.forward(tape, ctx);
        let v = self.v.forward(tape, ctx);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, false, kh, true);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m);
            }
            let weights = tape.softmax(scores);
            outs.push(tape.matmul(weights, vh));
        }
        let joined = tape.concat_cols(&outs);
        self.o.forward(tape, joined)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, ff: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, ff),
            down: Linear::new(store, rng, &format!("{name}.down"), ff, d),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.relu(h);
        self.down.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
}

/// A generated report.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// BOS first; EOS last unless `truncated`.
    pub tokens: Vec<u32>,
    pub text: String,
    /// Log-probability of each generated token.
    pub log_probs: Vec<f64>,
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub memory_width: usize,
    embed: crate::autograd::ParamId,
    memory_proj: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
}

/// Sinusoidal encodings for positions `0..len`.
pub fn positional_encoding(len: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

fn causal_mask(t: usize) -> Matrix {
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m.set(i, j, MASKED);
        }
    }
    m
}

impl CaptionModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &DecoderConfig,
        memory_width: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = store.add("decoder.embed", uniform(rng, vocab_size, d, (3.0 / d as f64).sqrt()));
        let memory_proj = Linear::new(store, rng, "decoder.memory_proj", memory_width, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("decoder.enc{i}");
                EncoderLayer {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    attn: Attention::new(store, rng, &format!("{n}.attn"), d, config.heads),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                    ff: FeedForward::new(store, rng, &format!("{n}.ff"), d, config.ff_width),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::new(store, "decoder.enc_norm", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("decoder.dec{i}");
                DecoderLayer {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    self_attn: Attention::new(store, rng, &format!("{n}.self_attn"), d, config.heads),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                    cross_attn: Attention::new(store, rng, &format!("{n}.cross_attn"), d, config.heads),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d),
                    ff: FeedForward::new(store, rng, &format!("{n}.ff"), d, config.ff_width),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::new(store, "decoder.dec_norm", d);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            memory_width,
            embed,
            memory_proj,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        })
    }

    pub fn embedding(&self) -> crate::autograd::ParamId {
        self.embed
    }

    pub fn output_norm(&self) -> &LayerNorm {
        &self.decoder_norm
    }

    /// Encodes `N x memory_width` node memory into `N x d_model`.
    pub fn encode(&self, tape: &mut Tape, memory: Var) -> Result<Var> {
        let (n, w) = tape.shape(memory);
        if n == 0 || w != self.memory_width {
            return Err(Error::shape("encode", format!("memory ({n}, {w}), expected (N>0, {})", self.memory_width)));
        }
        let mut x = self.memory_proj.forward(tape, memory);
        for layer in &self.encoder {
            let h = layer.norm1.forward(tape, x);
            let h = layer.attn.forward(tape, h, h, None);
            x = tape.add(x, h);
            let h = layer.norm2.forward(tape, x);
            let h = layer.ff.forward(tape, h);
            x = tape.add(x, h);
        }
        Ok(self.encoder_norm.forward(tape, x))
    }

    /// `T x V` logits for input tokens `tokens` (row t predicts token t+1).
    pub fn decode_logits(&self, tape: &mut Tape, encoded: Var, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Invalid("decoder input is empty".into()));
        }
        let idx = tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t < self.vocab_size {
                    Ok(t)
                } else {
                    Err(Error::Invalid(format!("token id {t} outside vocabulary of {}", self.vocab_size)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let d = self.config.d_model;
        let t = idx.len();
        let table = tape.param(self.embed);
        let emb = tape.gather_rows(table, &idx);
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pe = tape.constant(positional_encoding(t, d));
        let mut x = tape.add(emb, pe);
        let mask = tape.constant(causal_mask(t));
        for layer in &self.decoder {
            let h = layer.norm1.forward(tape, x);
            let h = layer.self_attn.forward(tape, h, h, Some(mask));
            x = tape.add(x, h);
            let h = layer.norm2.forward(tape, x);
            let h = layer.cross_attn.forward(tape, h, encoded, None);
            x = tape.add(x, h);
            let h = layer.norm3.forward(tape, x);
            let h = layer.ff.forward(tape, h);
            x = tape.add(x, h);
        }
        let h = self.decoder_norm.forward(tape, x);
        Ok(tape.matmul_t(h, false, table, true))
    }

    /// Teacher-forced logits for a target that starts with BOS.
    pub fn teacher_forced_logits(&self, tape: &mut Tape, memory: Var, target: &[u32]) -> Result<Var> {
        if target.first() != Some(&BOS) {
            return Err(Error::Invalid("target must start with BOS".into()));
        }
        let enc = self.encode(tape, memory)?;
        self.decode_logits(tape, enc, target)
    }

    /// Mean cross-entropy of predicting `target[1..]` from `target[..len-1]`,
    /// skipping PAD positions.
    pub fn caption_loss(&self, tape: &mut Tape, memory: Var, target: &[u32]) -> Result<Var> {
        if target.len() < 2 {
            return Err(Error::Invalid("target needs at least two tokens".into()));
        }
        let logits = self.teacher_forced_logits(tape, memory, &target[..target.len() - 1])?;
        let labels = shifted_labels(target)?;
        Ok(tape.cross_entropy(logits, &labels))
    }

    /// Decodes from plain-matrix memory.
    pub fn generate(
        &self,
        params: &ParamStore,
        memory: &Matrix,
        strategy: Strategy,
        max_len: usize,
        vocab: Option<&Vocabulary>,
    ) -> Result<DecodeResult> {
        if max_len < 2 {
            return Err(Error::Invalid("max_len must be at least 2".into()));
        }
        let mut tape = Tape::new(params);
        let m = tape.constant(memory.clone());
        let enc = self.encode(&mut tape, m)?;
        let encoded = tape.value(enc).clone();
        let step = |prefix: &[u32]| -> Result<Vec<f64>> {
            let mut tape = Tape::new(params);
            let enc = tape.constant(encoded.clone());
            let logits = self.decode_logits(&mut tape, enc, prefix)?;
            let row = tape.value(logits).row(prefix.len() - 1).to_vec();
            let lse = log_sum_exp(&row);
            Ok(row.into_iter().map(|v| v - lse).collect())
        };
        let (tokens, log_probs) = match strategy {
            Strategy::Greedy => greedy(step, max_len)?,
            Strategy::Beam(k) => beam(step, max_len, k.max(1))?,
        };
        let truncated = tokens.last() != Some(&EOS);
        let text = vocab.map(|v| v.decode(&tokens)).unwrap_or_default();
        Ok(DecodeResult {
            tokens,
            text,
            log_probs,
            truncated,
        })
    }
}

/// Labels for `target[1..]` with PAD positions excluded.
pub fn shifted_labels(target: &[u32]) -> Result<Vec<Option<usize>>> {
    let labels: Vec<Option<usize>> = target[1..]
        .iter()
        .map(|&t| (t != PAD).then_some(t as usize))
        .collect();
    if labels.iter().all(Option::is_none) {
        return Err(Error::Invalid("target has no non-PAD positions".into()));
    }
    Ok(labels)
}

/// Mean cross-entropy of `logits` (row t scored against `target[t + 1]`).
pub fn caption_loss(logits: &Matrix, target: &[u32]) -> Result<f64> {
    if target.len() < 2 || logits.rows() != target.len() - 1 {
        return Err(Error::shape(
            "caption_loss",
            format!("{} logit rows for a target of {}", logits.rows(), target.len()),
        ));
    }
    let labels = shifted_labels(target)?;
    let mut total = 0.0;
    let mut count = 0;
    for (r, l) in labels.iter().enumerate() {
        if let Some(t) = *l {
            if t >= logits.cols() {
                return Err(Error::Invalid(format!("token id {t} outside vocabulary of {}", logits.cols())));
            }
            total += log_sum_exp(logits.row(r)) - logits.get(r, t);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn greedy(mut step: impl FnMut(&[u32]) -> Result<Vec<f64>>, max_len: usize) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut tokens = vec![BOS];
    let mut lps = Vec::new();
    while tokens.len() < max_len {
        let row = step(&tokens)?;
        let next = argmax(&row);
        tokens.push(next as u32);
        lps.push(row[next]);
        if next as u32 == EOS {
            break;
        }
    }
    Ok((tokens, lps))
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_probs: Vec<f64>,
    score: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.score / self.log_probs.len().max(1) as f64
    }
}

/// Beam search ranked by cumulative log-probability; the returned
/// hypothesis maximizes the per-token mean log-probability.
fn beam(
    mut step: impl FnMut(&[u32]) -> Result<Vec<f64>>,
    max_len: usize,
    k: usize,
) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut alive = vec![Hypothesis {
        tokens: vec![BOS],
        log_probs: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() && finished.len() < k {
        let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let row = step(&hyp.tokens)?;
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(k) {
                candidates.push((hyp.score + row[tok], h, tok, row[tok]));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (score, h, tok, lp) in candidates.into_iter().take(k) {
            let mut hyp = alive[h].clone();
            hyp.tokens.push(tok as u32);
            hyp.log_probs.push(lp);
            hyp.score = score;
            if tok as u32 == EOS || hyp.tokens.len() >= max_len {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
    }
    let pool = if finished.is_empty() { alive } else { finished };
    let best = pool
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.normalized().total_cmp(&b.normalized()).then(ib.cmp(ia)))
        .map(|(_, h)| h)
        .expect("beam keeps at least one hypothesis");
    Ok((best.tokens, best.log_probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(vocab: usize) -> (ParamStore, CaptionModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = DecoderConfig {
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_width: 16,
            max_len: 10,
        };
        let m = CaptionModel::new(&mut store, &mut rng, &cfg, 6, vocab).unwrap();
        (store, m)
    }

    fn memory(n: usize) -> Matrix {
        Matrix::from_vec(n, 6, (0..n * 6).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap()
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let (store, m) = tiny(7);
        let run = |tokens: &[u32]| {
            let mut tape = Tape::new(&store);
            let mem = tape.constant(memory(3));
            let l = m.teacher_forced_logits(&mut tape, mem, tokens).unwrap();
            tape.value(l).clone()
        };
        let a = run(&[1, 4, 5, 6, 3]);
        let b = run(&[1, 4, 5, 2, 6]);
        for r in 0..3 {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn single_token_shape() {
        let (store, m) = tiny(7);
        let mut tape = Tape::new(&store);
        let mem = tape.constant(memory(2));
        let l = m.teacher_forced_logits(&mut tape, mem, &[BOS]).unwrap();
        assert_eq!(tape.shape(l), (1, 7));
    }

    #[test]
    fn zero_embedding_gives_uniform_loss() {
        let (mut store, m) = tiny(7);
        store.get_mut(m.embedding()).as_mut_slice().fill(0.0);
        let mut tape = Tape::new(&store);
        let mem = tape.constant(memory(2));
        let loss = m.caption_loss(&mut tape, mem, &[1, 4, 5, 2]).unwrap();
        assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn input_validation() {
        let (store, m) = tiny(7);
        let mut tape = Tape::new(&store);
        let mem = tape.constant(memory(2));
        assert!(m.teacher_forced_logits(&mut tape, mem, &[1, 9]).is_err());
        assert!(m.teacher_forced_logits(&mut tape, mem, &[4, 1]).is_err());
        assert!(m.caption_loss(&mut tape, mem, &[1, 0, 0]).is_err());
        let bad = tape.constant(Matrix::zeros(2, 5));
        assert!(m.encode(&mut tape, bad).is_err());
    }

    #[test]
    fn loss_examples() {
        let three = 3f64.ln();
        let logits = Matrix::from_rows(&[[0.0, three], [0.0, three]]);
        let got = caption_loss(&logits, &[1, 1, 1]).unwrap();
        assert!((got - -(0.75f64.ln())).abs() < 1e-12);

        let logits = Matrix::from_rows(&[[0.0, three, 0.0], [0.0, three, 0.0]]);
        let got = caption_loss(&logits, &[1, 2, 1]).unwrap();
        let p1: f64 = 1.0 / 5.0;
        let p2: f64 = 3.0 / 5.0;
        assert!((got - -0.5 * (p1.ln() + p2.ln())).abs() < 1e-12);

        let mut onehot = Matrix::filled(2, 40, -1e4);
        onehot.set(0, 5, 0.0);
        onehot.set(1, 2, 0.0);
        assert!(caption_loss(&onehot, &[1, 5, 2]).unwrap() < 1e-12);
        assert!((caption_loss(&Matrix::zeros(2, 40), &[1, 5, 2]).unwrap() - 40f64.ln()).abs() < 1e-12);
        assert!(caption_loss(&Matrix::zeros(2, 40), &[1, 0, 0]).is_err());
    }

    #[test]
    fn eos_first_model_stops_immediately() {
        let (mut store, m) = tiny(7);
        store.get_mut(m.output_norm().gain).as_mut_slice().fill(0.0);
        let bias = store.get_mut(m.output_norm().bias);
        bias.as_mut_slice().fill(0.0);
        bias.set(0, 0, 1.0);
        let e = store.get_mut(m.embedding());
        e.as_mut_slice().fill(0.0);
        e.set(EOS as usize, 0, 10.0);
        for s in [Strategy::Greedy, Strategy::Beam(3)] {
            let out = m.generate(&store, &memory(2), s, 10, None).unwrap();
            assert_eq!(out.tokens, vec![BOS, EOS]);
            assert!(!out.truncated);
        }
    }

    #[test]
    fn max_len_truncates() {
        let (store, m) = tiny(7);
        let out = m.generate(&store, &memory(2), Strategy::Greedy, 2, None).unwrap();
        assert_eq!(out.tokens.len(), 2);
        assert_eq!(out.log_probs.len(), 1);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 3) - (0.01f64).cos()).abs() < 1e-15);
    }
}
