//! Corpus-level BLEU@4.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramStats {
    /// Clipped matches for n = 1..=4.
    pub matches: [usize; MAX_ORDER],
    /// Candidate n-gram totals for n = 1..=4.
    pub totals: [usize; MAX_ORDER],
    pub candidate_len: usize,
    /// Length of the reference closest to the candidate (shorter on ties).
    pub reference_len: usize,
}

impl NgramStats {
    fn add(&mut self, other: &NgramStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                p[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        p
    }

    /// BLEU from these counts; any zero precision gives 0.
    pub fn bleu(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let p = self.precisions();
        if p.contains(&0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|v| v.ln()).sum::<f64>() / MAX_ORDER as f64;
        let c = self.candidate_len as f64;
        let r = self.reference_len as f64;
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * log_mean.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub n_videos: usize,
    pub corpus: NgramStats,
    pub per_video: BTreeMap<String, NgramStats>,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

pub fn sentence_stats(candidate: &[String], references: &[Vec<String>]) -> NgramStats {
    let mut stats = NgramStats {
        candidate_len: candidate.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for reference in references {
            for (gram, count) in ngram_counts(reference, n) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(count);
            }
        }
        stats.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        stats.matches[n - 1] = cand
            .iter()
            .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
    }
    stats.reference_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(candidate.len()), len))
        .unwrap_or(0);
    stats
}

/// Corpus BLEU@4 with closest-reference brevity penalty and no smoothing.
pub fn bleu4(
    candidates: &BTreeMap<String, Vec<String>>,
    references: &BTreeMap<String, Vec<Vec<String>>>,
) -> Result<EvalReport> {
    let mut corpus = NgramStats::default();
    let mut per_video = BTreeMap::new();
    for (video, cand) in candidates {
        let refs = references
            .get(video)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::invalid(format!("no references for video {video}")))?;
        let stats = sentence_stats(cand, refs);
        corpus.add(&stats);
        per_video.insert(video.clone(), stats);
    }
    Ok(EvalReport {
        bleu4: corpus.bleu(),
        n_videos: candidates.len(),
        corpus,
        per_video,
    })
}
