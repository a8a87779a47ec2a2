//! Fusion of directional word distributions and beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::btg::{build_bidirectional_trajectories, VideoSample};
use crate::decoder::{advance, DecoderParameters, DecoderState, VisualContext, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::softmax;
use crate::training::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Arithmetic mean of the two distributions.
    #[default]
    Mean,
    /// Normalized geometric mean.
    Geometric,
}

/// Combines forward and backward word distributions into one.
pub fn fuse_word_scores(forward: &[f64], backward: &[f64], mode: FusionMode) -> Result<Vec<f64>> {
    if forward.len() != backward.len() {
        return Err(Error::invalid(format!(
            "distributions have different sizes {} and {}",
            forward.len(),
            backward.len()
        )));
    }
    match mode {
        FusionMode::Mean => Ok(forward.iter().zip(backward).map(|(a, b)| 0.5 * (a + b)).collect()),
        FusionMode::Geometric => {
            let raw: Vec<f64> = forward.iter().zip(backward).map(|(a, b)| (a * b).sqrt()).collect();
            let z: f64 = raw.iter().sum();
            if !(z > 0.0) {
                return Err(Error::Numeric("geometric fusion of disjoint distributions".into()));
            }
            // Rescale to the inputs' mass rather than exactly 1, so fusing a
            // distribution with itself returns it unchanged.
            let mass = 0.5 * (forward.iter().sum::<f64>() + backward.iter().sum::<f64>());
            let scale = mass / z;
            Ok(raw.into_iter().map(|v| v * scale).collect())
        }
    }
}

/// A left-to-right next-token model.
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Self::State;
    fn vocab_size(&self) -> usize;
    /// Distribution over the next token given everything fed so far, and the
    /// state to extend with the chosen token.
    fn step(&self, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;
    fn feed(&self, state: &Self::State, token: usize) -> Self::State;
}

/// Tokens beam search may emit.
pub fn emittable(token: usize) -> bool {
    token != PAD && token != BOS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    /// Emitted tokens, ending in EOS unless the length cap was hit.
    pub tokens: Vec<usize>,
    /// Sum of log probabilities of `tokens`.
    pub score: f64,
    pub step_log_probs: Vec<f64>,
    pub finished: bool,
}

struct Hyp<S> {
    tokens: Vec<usize>,
    score: f64,
    step_log_probs: Vec<f64>,
    state: S,
}

/// Higher score first, then the lexicographically smaller sequence.
pub fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search emitting at most `max_len` tokens. At each step the best
/// `beam` extensions of the live hypotheses are kept; those ending in EOS
/// leave the beam. Width 1 is greedy decoding.
pub fn beam_search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize) -> Result<BeamResult> {
    if beam == 0 {
        return Err(Error::config("beam", "must be positive"));
    }
    if max_len == 0 {
        return Err(Error::config("max_len", "must be positive"));
    }
    let vocab = scorer.vocab_size();
    if EOS >= vocab {
        return Err(Error::invalid("vocabulary lacks the end token"));
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        step_log_probs: Vec::new(),
        state: scorer.initial(),
    }];
    let mut finished: Vec<BeamResult> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let best_done = finished.iter().map(|f| f.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_done > best_live {
            break;
        }
        let mut candidates: Vec<(f64, Vec<usize>, usize, f64)> = Vec::new();
        let mut posts = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let (probs, post) = scorer.step(&hyp.state)?;
            if probs.len() != vocab {
                return Err(Error::Contract(format!(
                    "scorer returned {} probabilities for vocabulary {vocab}",
                    probs.len()
                )));
            }
            if probs.iter().any(|p| !p.is_finite()) {
                return Err(Error::Numeric("non-finite word probability".into()));
            }
            for (tok, &p) in probs.iter().enumerate() {
                if !emittable(tok) || p <= 0.0 {
                    continue;
                }
                let lp = p.ln();
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push((hyp.score + lp, tokens, hi, lp));
            }
            posts.push(post);
        }
        candidates.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
        candidates.truncate(beam);
        let mut next = Vec::with_capacity(candidates.len());
        for (score, tokens, hi, lp) in candidates {
            let mut step_log_probs = live[hi].step_log_probs.clone();
            step_log_probs.push(lp);
            let tok = *tokens.last().expect("candidate has a token");
            if tok == EOS {
                finished.push(BeamResult {
                    tokens,
                    score,
                    step_log_probs,
                    finished: true,
                });
            } else {
                next.push(Hyp {
                    state: scorer.feed(&posts[hi], tok),
                    tokens,
                    score,
                    step_log_probs,
                });
            }
        }
        live = next;
    }
    finished.extend(live.into_iter().map(|h| BeamResult {
        tokens: h.tokens,
        score: h.score,
        step_log_probs: h.step_log_probs,
        finished: false,
    }));
    finished
        .into_iter()
        .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
        .ok_or_else(|| Error::Numeric("no hypothesis has positive probability".into()))
}

/// Beam search with width 1.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<BeamResult> {
    beam_search(scorer, 1, max_len)
}

/// Sum of log probabilities the scorer assigns to `tokens`.
pub fn sequence_log_prob<S: StepScorer>(scorer: &S, tokens: &[usize]) -> Result<f64> {
    let mut state = scorer.initial();
    let mut total = 0.0;
    for &tok in tokens {
        let (probs, post) = scorer.step(&state)?;
        let p = *probs
            .get(tok)
            .ok_or_else(|| Error::invalid(format!("token {tok} outside vocabulary")))?;
        total += p.ln();
        state = scorer.feed(&post, tok);
    }
    Ok(total)
}

/// One directional decoder over its encoded video.
pub struct DirectionScorer<'a> {
    pub params: &'a DecoderParameters,
    pub context: VisualContext,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionState {
    pub decoder: DecoderState,
    pub word_in: usize,
}

impl StepScorer for DirectionScorer<'_> {
    type State = DirectionState;

    fn initial(&self) -> DirectionState {
        DirectionState {
            decoder: DecoderState::initial(self.params.hidden_size()),
            word_in: BOS,
        }
    }

    fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    fn step(&self, state: &DirectionState) -> Result<(Vec<f64>, DirectionState)> {
        let (decoder, logits) = advance(self.params, &self.context, &state.decoder, state.word_in)?;
        Ok((
            softmax(&logits),
            DirectionState {
                decoder,
                word_in: state.word_in,
            },
        ))
    }

    fn feed(&self, state: &DirectionState, token: usize) -> DirectionState {
        DirectionState {
            decoder: state.decoder.clone(),
            word_in: token,
        }
    }
}

/// Two scorers run in lockstep with fused distributions.
pub struct Fused<A, B> {
    pub first: A,
    pub second: B,
    pub mode: FusionMode,
}

impl<A: StepScorer, B: StepScorer> StepScorer for Fused<A, B> {
    type State = (A::State, B::State);

    fn initial(&self) -> Self::State {
        (self.first.initial(), self.second.initial())
    }

    fn vocab_size(&self) -> usize {
        self.first.vocab_size()
    }

    fn step(&self, state: &Self::State) -> Result<(Vec<f64>, Self::State)> {
        let (pa, sa) = self.first.step(&state.0)?;
        let (pb, sb) = self.second.step(&state.1)?;
        Ok((fuse_word_scores(&pa, &pb, self.mode)?, (sa, sb)))
    }

    fn feed(&self, state: &Self::State, token: usize) -> Self::State {
        (self.first.feed(&state.0, token), self.second.feed(&state.1, token))
    }
}

/// Encodes a video with every active direction of the model.
pub fn direction_scorers<'m>(model: &'m Model, video: &VideoSample) -> Result<Vec<DirectionScorer<'m>>> {
    video.validate()?;
    let trajectories = build_bidirectional_trajectories(video)?;
    (0..model.directions.len())
        .map(|slot| {
            let encoded = model.encode_direction(slot, video, &trajectories)?;
            Ok(DirectionScorer {
                params: &model.decoders[slot],
                context: encoded.context,
            })
        })
        .collect()
}

/// Runs `f` on the model's scorer: a single direction, or the fusion of both.
fn with_scorer<T>(
    model: &Model,
    video: &VideoSample,
    fusion: FusionMode,
    f: impl FnOnce(&dyn DynScorer) -> Result<T>,
) -> Result<T> {
    let mut scorers = direction_scorers(model, video)?;
    match scorers.len() {
        1 => f(&scorers.remove(0)),
        2 => {
            let second = scorers.remove(1);
            let first = scorers.remove(0);
            f(&Fused {
                first,
                second,
                mode: fusion,
            })
        }
        n => Err(Error::Contract(format!("model has {n} directions"))),
    }
}

/// Object-safe view of the searches a scorer supports.
trait DynScorer {
    fn beam(&self, beam: usize, max_len: usize) -> Result<BeamResult>;
    fn log_prob(&self, tokens: &[usize]) -> Result<f64>;
}

impl<S: StepScorer> DynScorer for S {
    fn beam(&self, beam: usize, max_len: usize) -> Result<BeamResult> {
        beam_search(self, beam, max_len)
    }

    fn log_prob(&self, tokens: &[usize]) -> Result<f64> {
        sequence_log_prob(self, tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub video_id: String,
    pub caption: String,
    pub score: f64,
    /// Emitted vocabulary indices including the final EOS, when reached.
    pub tokens: Vec<usize>,
}

/// Words of a decoded sequence without reserved tokens.
pub fn detokenize(vocab: &Vocabulary, tokens: &[usize]) -> String {
    tokens
        .iter()
        .filter(|&&t| !Vocabulary::is_reserved(t))
        .filter_map(|&t| vocab.decode(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trajectories, aggregation, decoding and detokenization for one video.
pub fn caption_video(ckpt: &Checkpoint, video: &VideoSample, beam: usize, fusion: FusionMode) -> Result<Caption> {
    ckpt.check_features(video)?;
    let max_len = ckpt.config.max_decode_steps();
    let result = with_scorer(&ckpt.model, video, fusion, |s| s.beam(beam, max_len))?;
    Ok(Caption {
        video_id: video.video_id.clone(),
        caption: detokenize(&ckpt.vocab, &result.tokens),
        score: result.score,
        tokens: result.tokens,
    })
}

/// Model log probability of a caption (words then EOS) for a video.
pub fn caption_log_prob(ckpt: &Checkpoint, video: &VideoSample, words: &[String], fusion: FusionMode) -> Result<f64> {
    ckpt.check_features(video)?;
    let mut tokens: Vec<usize> = words.iter().map(|w| ckpt.vocab.encode(w)).collect();
    tokens.push(EOS);
    with_scorer(&ckpt.model, video, fusion, |s| s.log_prob(&tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed distribution per prefix length.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        type State = usize;
        fn initial(&self) -> usize {
            0
        }
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn step(&self, state: &usize) -> Result<(Vec<f64>, usize)> {
            Ok((self.0[(*state).min(self.0.len() - 1)].clone(), *state))
        }
        fn feed(&self, state: &usize, _token: usize) -> usize {
            state + 1
        }
    }

    #[test]
    fn mean_fusion_example() {
        let f = fuse_word_scores(&[0.6, 0.4], &[0.2, 0.8], FusionMode::Mean).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-15 && (f[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn geometric_fusion_normalizes() {
        let f = fuse_word_scores(&[0.6, 0.4], &[0.2, 0.8], FusionMode::Geometric).unwrap();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let a = (0.12f64).sqrt();
        let b = (0.32f64).sqrt();
        assert!((f[0] - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn fusion_of_identical_is_identity() {
        let p = [0.1, 0.2, 0.3, 0.4];
        for mode in [FusionMode::Mean, FusionMode::Geometric] {
            let f = fuse_word_scores(&p, &p, mode).unwrap();
            for (a, b) in f.iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(fuse_word_scores(&p, &p[..3], FusionMode::Mean).is_err());
    }

    #[test]
    fn greedy_stops_at_end_token() {
        // <pad> <bos> <eos> w
        let t = Table(vec![vec![0.0, 0.0, 0.1, 0.9], vec![0.0, 0.0, 0.7, 0.3]]);
        let r = greedy_decode(&t, 5).unwrap();
        assert_eq!(r.tokens, vec![3, EOS]);
        assert!((r.score - (0.9f64.ln() + 0.7f64.ln())).abs() < 1e-12);
        assert!(r.finished);
    }

    #[test]
    fn reserved_tokens_are_never_emitted() {
        let t = Table(vec![vec![0.5, 0.4, 0.05, 0.05]]);
        let r = beam_search(&t, 3, 3).unwrap();
        assert!(r.tokens.iter().all(|&tok| emittable(tok)));
    }

    #[test]
    fn length_cap_returns_unfinished() {
        let t = Table(vec![vec![0.0, 0.0, 0.01, 0.99]]);
        let r = beam_search(&t, 2, 3).unwrap();
        assert_eq!(r.tokens, vec![3, 3, 3]);
        assert!(!r.finished);
    }

    #[test]
    fn ties_prefer_smaller_sequence() {
        let t = Table(vec![vec![0.0, 0.0, 0.0, 0.5, 0.5], vec![0.0, 0.0, 1.0, 0.0, 0.0]]);
        for beam in [1, 2, 5] {
            assert_eq!(beam_search(&t, beam, 4).unwrap().tokens, vec![3, EOS]);
        }
    }

    #[test]
    fn wider_beam_finds_better_sequence() {
        // Greedy takes w3 (0.6) then is stuck with 0.5; w4 (0.4) leads to certain EOS.
        let t = FirstDependent;
        let greedy = beam_search(&t, 1, 2).unwrap();
        let wide = beam_search(&t, 2, 2).unwrap();
        assert_eq!(greedy.tokens, vec![3, EOS]);
        assert_eq!(wide.tokens, vec![4, EOS]);
        assert!(wide.score > greedy.score);
    }

    struct FirstDependent;

    impl StepScorer for FirstDependent {
        type State = Vec<usize>;
        fn initial(&self) -> Vec<usize> {
            Vec::new()
        }
        fn vocab_size(&self) -> usize {
            5
        }
        fn step(&self, s: &Vec<usize>) -> Result<(Vec<f64>, Vec<usize>)> {
            let p = match s.first() {
                None => vec![0.0, 0.0, 0.0, 0.6, 0.4],
                Some(3) => vec![0.0, 0.0, 0.5, 0.25, 0.25],
                Some(_) => vec![0.0, 0.0, 1.0, 0.0, 0.0],
            };
            Ok((p, s.clone()))
        }
        fn feed(&self, s: &Vec<usize>, token: usize) -> Vec<usize> {
            let mut s = s.clone();
            s.push(token);
            s
        }
    }

    #[test]
    fn sequence_log_prob_matches_beam_score() {
        let r = beam_search(&FirstDependent, 3, 3).unwrap();
        let lp = sequence_log_prob(&FirstDependent, &r.tokens).unwrap();
        assert!((lp - r.score).abs() < 1e-12);
    }

    #[test]
    fn detokenize_drops_reserved() {
        let v = Vocabulary::new(["a", "cat"]);
        let toks = vec![v.encode("a"), v.encode("cat"), EOS];
        assert_eq!(detokenize(&v, &toks), "a cat");
    }
}
