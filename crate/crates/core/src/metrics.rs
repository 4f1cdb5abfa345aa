//! Captioning metrics over pre-tokenized sentences, one reference per sample.
//!
//! * BLEU-1..4: corpus level (pooled clipped counts), brevity penalty, no smoothing.
//! * ROUGE-L: LCS F-measure with beta = 1.2, averaged over samples.
//! * METEOR-exact: exact unigram alignment only (no stemming or synonyms),
//!   `F = 10PR / (R + 9P)`, penalty `0.5 (chunks / matches)^3`.
//! * CIDEr: plain TF-IDF n-gram cosine, n = 1..4, scaled by 10, no length penalty.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Sentence = [String];

const ROUGE_BETA: f64 = 1.2;
const CIDER_MAX_N: usize = 4;
/// Search nodes allowed per sentence pair before METEOR settles for the best
/// alignment found so far.
const METEOR_SEARCH_BUDGET: usize = 200_000;

fn check(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts(tokens: &Sentence, n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, candidate n-grams) for one pair.
fn clipped(c: &Sentence, r: &Sentence, n: usize) -> (usize, usize) {
    let cc = ngram_counts(c, n);
    let rc = ngram_counts(r, n);
    let hits = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    (hits, c.len().saturating_sub(n - 1))
}

fn bleu_from_counts(hits: &[usize], totals: &[usize], c_len: usize, r_len: usize) -> f64 {
    if c_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (&h, &t) in hits.iter().zip(totals) {
        if h == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (h as f64 / t as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * (log_sum / hits.len() as f64).exp()
}

/// Corpus BLEU with orders `1..=n`.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check(candidates, references)?;
    if n == 0 {
        return Err(Error::Invalid("BLEU order must be at least 1".into()));
    }
    let mut hits = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        for k in 1..=n {
            let (h, t) = clipped(c, r, k);
            hits[k - 1] += h;
            totals[k - 1] += t;
        }
        c_len += c.len();
        r_len += r.len();
    }
    Ok(bleu_from_counts(&hits, &totals, c_len, r_len))
}

/// Sentence-level BLEU of one pair, unsmoothed.
pub fn sentence_bleu(candidate: &Sentence, reference: &Sentence, n: usize) -> f64 {
    let (hits, totals): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| clipped(candidate, reference, k)).unzip();
    bleu_from_counts(&hits, &totals, candidate.len(), reference.len())
}

pub fn lcs_len(a: &Sentence, b: &Sentence) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_pair(candidate: &Sentence, reference: &Sentence) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    Ok(mean(candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c, r))))
}

/// Maximum exact-match count and the fewest chunks any maximum alignment needs.
pub fn meteor_alignment(candidate: &Sentence, reference: &Sentence) -> (usize, usize) {
    let mut cc: HashMap<&str, usize> = HashMap::new();
    let mut rc: HashMap<&str, usize> = HashMap::new();
    for t in candidate {
        *cc.entry(t).or_default() += 1;
    }
    for t in reference {
        *rc.entry(t).or_default() += 1;
    }
    // How many occurrences of each word may still be matched.
    let quota: HashMap<&str, usize> = cc
        .iter()
        .map(|(w, &k)| (*w, k.min(rc.get(w).copied().unwrap_or(0))))
        .collect();
    let matches: usize = quota.values().sum();
    if matches == 0 {
        return (0, 0);
    }
    let mut search = AlignSearch {
        candidate,
        reference,
        used: vec![false; reference.len()],
        quota,
        remaining_cand: cc,
        best: usize::MAX,
        nodes: 0,
    };
    search.run(0, None, 0, matches);
    (matches, search.best)
}

struct AlignSearch<'a> {
    candidate: &'a Sentence,
    reference: &'a Sentence,
    used: Vec<bool>,
    /// Matches still owed per word.
    quota: HashMap<&'a str, usize>,
    /// Candidate occurrences of each word not yet visited.
    remaining_cand: HashMap<&'a str, usize>,
    best: usize,
    nodes: usize,
}

impl<'a> AlignSearch<'a> {
    fn run(&mut self, i: usize, prev: Option<(usize, usize)>, chunks: usize, left: usize) {
        self.nodes += 1;
        if chunks >= self.best {
            return;
        }
        if left == 0 {
            self.best = chunks;
            return;
        }
        if i == self.candidate.len() || (self.nodes > METEOR_SEARCH_BUDGET && self.best != usize::MAX) {
            return;
        }
        let word = self.candidate[i].as_str();
        let owed = self.quota.get(word).copied().unwrap_or(0);
        let rem = self.remaining_cand.get(word).copied().unwrap_or(0);
        *self.remaining_cand.get_mut(word).expect("word counted") -= 1;
        if owed > 0 {
            // Prefer extending the current chunk, then other positions in order.
            let mut order: Vec<usize> = (0..self.reference.len())
                .filter(|&j| !self.used[j] && self.reference[j] == word)
                .collect();
            if let Some((pi, pj)) = prev {
                if pi + 1 == i {
                    if let Some(k) = order.iter().position(|&j| j == pj + 1) {
                        order[..=k].rotate_right(1);
                    }
                }
            }
            for j in order {
                let extends = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
                self.used[j] = true;
                *self.quota.get_mut(word).expect("quota") -= 1;
                self.run(i + 1, Some((i, j)), chunks + usize::from(!extends), left - 1);
                *self.quota.get_mut(word).expect("quota") += 1;
                self.used[j] = false;
            }
        }
        // Leaving this occurrence unmatched is only possible if the later
        // occurrences can still cover the quota.
        if rem > owed {
            self.run(i + 1, prev, chunks, left);
        }
        *self.remaining_cand.get_mut(word).expect("word counted") += 1;
    }
}

pub fn meteor_pair(candidate: &Sentence, reference: &Sentence) -> f64 {
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    Ok(mean(candidates.iter().zip(references).map(|(c, r)| meteor_pair(c, r))))
}

/// Per-sample CIDEr scores; IDF comes from the reference corpus.
pub fn cider_scores(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<Vec<f64>> {
    check(candidates, references)?;
    let n_docs = references.len() as f64;
    let distinct: HashSet<&Vec<String>> = references.iter().collect();
    let degenerate = distinct.len() < 2;
    if degenerate {
        log::warn!("fewer than two distinct references; CIDEr uses idf = ln(corpus size)");
    }
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for g in ngram_counts(r, n).into_keys() {
                *df.entry(g).or_default() += 1;
            }
        }
        let idf = |g: &[String]| {
            if degenerate {
                n_docs.ln()
            } else {
                (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln()
            }
        };
        for (k, (c, r)) in candidates.iter().zip(references).enumerate() {
            // ordered maps keep the float sums independent of hashing
            let vc: BTreeMap<&[String], f64> = ngram_counts(c, n).into_iter().map(|(g, t)| (g, t as f64 * idf(g))).collect();
            let vr: BTreeMap<&[String], f64> = ngram_counts(r, n).into_iter().map(|(g, t)| (g, t as f64 * idf(g))).collect();
            let dot: f64 = vc.iter().map(|(g, a)| a * vr.get(g).copied().unwrap_or(0.0)).sum();
            let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                scores[k] += 10.0 * (dot / (nc * nr)).max(0.0) / CIDER_MAX_N as f64;
            }
        }
    }
    Ok(scores)
}

pub fn cider(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    Ok(mean(cider_scores(candidates, references)?.into_iter()))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub samples: usize,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    /// Exact-match METEOR variant.
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub exact_match: f64,
    pub per_sample: Vec<SampleScores>,
}

impl EvaluationReport {
    /// Corpus scores by name, in reporting order.
    pub fn headline(&self) -> [(&'static str, f64); 8] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("meteor", self.meteor),
            ("rouge_l", self.rouge_l),
            ("cider", self.cider),
            ("exact_match", self.exact_match),
        ]
    }
}

pub fn evaluate_all(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<EvaluationReport> {
    check(candidates, references)?;
    let cider = cider_scores(candidates, references)?;
    let per_sample: Vec<SampleScores> = candidates
        .iter()
        .zip(references)
        .zip(&cider)
        .map(|((c, r), &ci)| SampleScores {
            bleu4: sentence_bleu(c, r, 4),
            meteor: meteor_pair(c, r),
            rouge_l: rouge_l_pair(c, r),
            cider: ci,
            exact: c == r,
        })
        .collect();
    Ok(EvaluationReport {
        samples: candidates.len(),
        candidate_tokens: candidates.iter().map(Vec::len).sum(),
        reference_tokens: references.iter().map(Vec::len).sum(),
        bleu1: bleu(candidates, references, 1)?,
        bleu2: bleu(candidates, references, 2)?,
        bleu3: bleu(candidates, references, 3)?,
        bleu4: bleu(candidates, references, 4)?,
        meteor: mean(per_sample.iter().map(|s| s.meteor)),
        rouge_l: mean(per_sample.iter().map(|s| s.rouge_l)),
        cider: mean(cider.iter().copied()),
        exact_match: mean(per_sample.iter().map(|s| if s.exact { 1.0 } else { 0.0 })),
        per_sample,
    })
}
