//! Deliberately naive reimplementations of the captioning metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Gram = Vec<String>;

fn grams(s: &[String], n: usize) -> Vec<Gram> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Gram], g: &Gram) -> usize {
    list.iter().filter(|x| *x == g).count()
}

pub fn bleu(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let mut product = 1.0;
    for k in 1..=n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, k);
            let rg = grams(r, k);
            let mut seen: Vec<&Gram> = Vec::new();
            for g in &cg {
                if !seen.contains(&g) {
                    seen.push(g);
                    hit += count(&cg, g).min(count(&rg, g));
                }
            }
            total += cg.len();
        }
        if total == 0 {
            return 0.0;
        }
        product *= hit as f64 / total as f64;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / n as f64)
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// Longest common subsequence by trying every subset of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let total: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| {
            let l = lcs(c, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            (1.0 + beta2) * p * rec / (rec + beta2 * p)
        })
        .sum();
    total / cands.len() as f64
}

fn enumerate(c: &[String], r: &[String], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
    if i == c.len() {
        let m = pairs.len();
        let chunks = if m == 0 {
            0
        } else {
            1 + pairs.windows(2).filter(|w| w[1] != (w[0].0 + 1, w[0].1 + 1)).count()
        };
        if m > best.0 || (m == best.0 && chunks < best.1) {
            *best = (m, chunks);
        }
        return;
    }
    enumerate(c, r, i + 1, used, pairs, best);
    for j in 0..r.len() {
        if !used[j] && r[j] == c[i] {
            used[j] = true;
            pairs.push((i, j));
            enumerate(c, r, i + 1, used, pairs, best);
            pairs.pop();
            used[j] = false;
        }
    }
}

/// (matches, chunks) over every one-to-one exact alignment.
pub fn meteor_alignment(c: &[String], r: &[String]) -> (usize, usize) {
    let mut best = (0, usize::MAX);
    enumerate(c, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

pub fn meteor(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let total: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| {
            let (m, ch) = meteor_alignment(c, r);
            if m == 0 {
                return 0.0;
            }
            let (p, rec) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
            let f = 10.0 * p * rec / (rec + 9.0 * p);
            f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
        })
        .sum();
    total / cands.len() as f64
}

/// Dense TF-IDF vectors over the full n-gram dictionary of the corpus.
pub fn cider(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let docs = refs.len() as f64;
    let mut distinct = refs.to_vec();
    distinct.sort();
    distinct.dedup();
    let degenerate = distinct.len() < 2;
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let mut score = 0.0;
        for n in 1..=4 {
            let mut dict: BTreeMap<Gram, usize> = BTreeMap::new();
            for s in cands.iter().chain(refs) {
                for g in grams(s, n) {
                    let next = dict.len();
                    dict.entry(g).or_insert(next);
                }
            }
            let idf = |g: &Gram| {
                if degenerate {
                    return docs.ln();
                }
                let df = refs.iter().filter(|x| grams(x, n).contains(g)).count();
                (docs / df.max(1) as f64).ln()
            };
            let vector = |s: &[String]| {
                let mut v = vec![0.0; dict.len()];
                let gs = grams(s, n);
                for (g, &k) in &dict {
                    v[k] = count(&gs, g) as f64 * idf(g);
                }
                v
            };
            let (a, b) = (vector(c), vector(r));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na > 0.0 && nb > 0.0 {
                score += 10.0 * dot / (na * nb) / 4.0;
            }
        }
        total += score;
    }
    total / cands.len() as f64
}

/// Small corpus over a tiny vocabulary, so repeats and partial overlaps are common.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let words = ["the", "cat", "sat", "mat", "on"];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(1..=7usize);
        (0..n).map(|_| words.choose(rng).unwrap().to_string()).collect()
    };
    let m = rng.gen_range(1..=6usize);
    let refs: Vec<Vec<String>> = (0..m).map(|_| sentence(rng)).collect();
    let cands = refs
        .iter()
        .map(|r| {
            // half the candidates are edits of their reference
            if rng.gen_bool(0.5) {
                let mut c = r.clone();
                if rng.gen_bool(0.5) && c.len() > 1 {
                    let k = rng.gen_range(0..c.len());
                    c.remove(k);
                }
                c.shuffle(rng);
                c
            } else {
                sentence(rng)
            }
        })
        .collect();
    (cands, refs)
}

/// Largest deviation between the library metrics and the oracles on one corpus.
pub fn max_deviation(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    use graphreport::metrics as m;
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        worst = worst.max((m::bleu(cands, refs, n).unwrap() - bleu(cands, refs, n)).abs());
    }
    worst = worst.max((m::rouge_l(cands, refs).unwrap() - rouge_l(cands, refs)).abs());
    worst = worst.max((m::meteor(cands, refs).unwrap() - meteor(cands, refs)).abs());
    worst = worst.max((m::cider(cands, refs).unwrap() - cider(cands, refs)).abs());
    worst
}
