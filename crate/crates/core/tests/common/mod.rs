#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use oabtg::btg::{BoundingBox, FrameDetections, ObjectRegion};
use oabtg::decoder::{BOS, EOS, PAD};
use oabtg::inference::StepScorer;
use oabtg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prefix-dependent random distributions over a small vocabulary.
pub struct ToyScorer {
    pub seed: u64,
    pub vocab: usize,
}

impl ToyScorer {
    pub fn distribution(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let raw: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }
}

impl StepScorer for ToyScorer {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn step(&self, state: &Vec<usize>) -> Result<(Vec<f64>, Vec<usize>)> {
        Ok((self.distribution(state), state.clone()))
    }

    fn feed(&self, state: &Vec<usize>, token: usize) -> Vec<usize> {
        let mut s = state.clone();
        s.push(token);
        s
    }
}

fn emittable(t: usize) -> bool {
    t != PAD && t != BOS
}

/// Every complete sequence of at most `max_len` tokens (EOS-terminated, or
/// length-capped without EOS) with its summed log probability.
pub fn enumerate<S: StepScorer>(scorer: &S, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    fn go<S: StepScorer>(
        scorer: &S,
        state: S::State,
        prefix: Vec<usize>,
        score: f64,
        max_len: usize,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if prefix.len() == max_len {
            out.push((prefix, score));
            return;
        }
        let (probs, post) = scorer.step(&state).unwrap();
        for (tok, &p) in probs.iter().enumerate() {
            if !emittable(tok) {
                continue;
            }
            let mut next = prefix.clone();
            next.push(tok);
            let s = score + p.ln();
            if tok == EOS {
                out.push((next, s));
            } else {
                go(scorer, scorer.feed(&post, tok), next, s, max_len, out);
            }
        }
    }
    let mut out = Vec::new();
    go(scorer, scorer.initial(), Vec::new(), 0.0, max_len, &mut out);
    out
}

/// Highest-scoring sequence, ties to the lexicographically smaller one.
pub fn exhaustive_best<S: StepScorer>(scorer: &S, max_len: usize) -> (Vec<usize>, f64) {
    enumerate(scorer, max_len)
        .into_iter()
        .min_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)))
        .unwrap()
}

/// Argmax over emittable tokens at each step, lowest index on ties.
pub fn naive_greedy<S: StepScorer>(scorer: &S, max_len: usize) -> (Vec<usize>, f64) {
    let mut state = scorer.initial();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    while tokens.len() < max_len {
        let (probs, post) = scorer.step(&state).unwrap();
        let mut best = usize::MAX;
        for (tok, &p) in probs.iter().enumerate() {
            if emittable(tok) && (best == usize::MAX || p > probs[best]) {
                best = tok;
            }
        }
        score += probs[best].ln();
        tokens.push(best);
        if best == EOS {
            break;
        }
        state = scorer.feed(&post, best);
    }
    (tokens, score)
}

/// Similarity written out from the closed-form definitions.
pub fn oracle_similarity(a: &ObjectRegion, b: &ObjectRegion, max_dist: f64) -> f64 {
    let d: f64 = a
        .appearance
        .iter()
        .zip(&b.appearance)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let app = if max_dist == 0.0 { 1.0 } else { (-d / max_dist).exp() };
    let (p, q) = (&a.bbox, &b.bbox);
    let iw = (p.x_max.min(q.x_max) - p.x_min.max(q.x_min)).max(0.0);
    let ih = (p.y_max.min(q.y_max) - p.y_min.max(q.y_min)).max(0.0);
    let area_p = (p.x_max - p.x_min) * (p.y_max - p.y_min);
    let area_q = (q.x_max - q.x_min) * (q.y_max - q.y_min);
    let inter = iw * ih;
    let iou = inter / (area_p + area_q - inter);
    let area = (-(area_p.min(area_q) / area_p.max(area_q) - 1.0).abs()).exp();
    (app + iou + area) / 3.0
}

/// Per-anchor argmax over all N x N scores between two frames.
pub fn oracle_alignment(anchor: &FrameDetections, other: &FrameDetections) -> Vec<usize> {
    let mut max_dist: f64 = 0.0;
    for a in &anchor.regions {
        for b in &other.regions {
            let d: f64 = a
                .appearance
                .iter()
                .zip(&b.appearance)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            max_dist = max_dist.max(d);
        }
    }
    anchor
        .regions
        .iter()
        .map(|a| {
            let scores: Vec<f64> = other.regions.iter().map(|b| oracle_similarity(a, b, max_dist)).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.iter().position(|&s| s == best).unwrap()
        })
        .collect()
}

/// `vl[k,d] = sum over (h,w) of a(h,w,k) (x(h,w,d) - c(k,d))`, looped explicitly.
pub fn oracle_vlad(h: usize, w: usize, d: usize, k: usize, x: &[f64], a: &[f64], c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k * d];
    for hh in 0..h {
        for ww in 0..w {
            for kk in 0..k {
                let weight = a[(hh * w + ww) * k + kk];
                for dd in 0..d {
                    out[kk * d + dd] += weight * (x[(hh * w + ww) * d + dd] - c[kk * d + dd]);
                }
            }
        }
    }
    out
}

pub fn unit_box() -> BoundingBox {
    BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()
}
