//! Hierarchically attentive GRU caption decoder.
//!
//! At each step the previous hidden state drives three attention blocks:
//! temporal attention over each object's VLAD sequence, object attention
//! over the resulting per-object summaries, and temporal attention over the
//! global frame sequence. The two attended features and the embedded input
//! word update the GRU, whose output is projected onto the vocabulary.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, sigmoid, softmax, softmax_backward, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in the given order. Duplicates and
    /// reserved spellings among `words` are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(Into::into)) {
            if !vocab.index.contains_key(&w) {
                vocab.index.insert(w.clone(), vocab.tokens.len());
                vocab.tokens.push(w);
            }
        }
        vocab
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

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or the UNK index for unseen words.
    pub fn encode(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn is_reserved(index: usize) -> bool {
        index < RESERVED.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParameters {
    pub w: Tensor,
    pub w_h: Tensor,
    pub u_f: Tensor,
    pub b: Tensor,
}

impl AttentionParameters {
    pub fn random<R: Rng>(attention: usize, hidden: usize, feature: usize, rng: &mut R) -> Self {
        AttentionParameters {
            w: Tensor::uniform(&[attention], 1.0 / (attention as f64).sqrt(), rng),
            w_h: Tensor::uniform(&[attention, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            u_f: Tensor::uniform(&[attention, feature], 1.0 / (feature as f64).sqrt(), rng),
            b: Tensor::zeros(&[attention]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParameters {
            w: self.w.zeros_like(),
            w_h: self.w_h.zeros_like(),
            u_f: self.u_f.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w", &self.w), ("w_h", &self.w_h), ("u_f", &self.u_f), ("b", &self.b)]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w, &mut self.w_h, &mut self.u_f, &mut self.b]
    }

    /// `U·f`, which does not depend on the decoder state.
    pub fn project(&self, feat: &[f64]) -> Vec<f64> {
        self.u_f.matvec(feat)
    }
}

/// Per-call record of an attention block.
#[derive(Debug, Clone)]
struct AttnTape {
    activations: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn attend(
    params: &AttentionParameters,
    h_prev: &[f64],
    feats: &[&[f64]],
    projected: &[Vec<f64>],
) -> (Vec<f64>, AttnTape) {
    let mut base = params.w_h.matvec(h_prev);
    for (v, b) in base.iter_mut().zip(&params.b.data) {
        *v += b;
    }
    let activations: Vec<Vec<f64>> = projected
        .iter()
        .map(|p| base.iter().zip(p).map(|(a, b)| (a + b).tanh()).collect())
        .collect();
    let scores: Vec<f64> = activations.iter().map(|u| dot(&params.w.data, u)).collect();
    let weights = softmax(&scores);
    let mut out = vec![0.0; feats[0].len()];
    for (f, &beta) in feats.iter().zip(&weights) {
        axpy(beta, f, &mut out);
    }
    (out, AttnTape { activations, weights })
}

#[allow(clippy::too_many_arguments)]
fn attend_backward(
    params: &AttentionParameters,
    h_prev: &[f64],
    feats: &[&[f64]],
    tape: &AttnTape,
    grad_out: &[f64],
    grads: &mut AttentionParameters,
    grad_h: &mut [f64],
    grad_feats: &mut [&mut [f64]],
) {
    let grad_beta: Vec<f64> = feats.iter().map(|f| dot(grad_out, f)).collect();
    let grad_scores = softmax_backward(&tape.weights, &grad_beta);
    let mut grad_pre_sum = vec![0.0; params.w.len()];
    for (m, f) in feats.iter().enumerate() {
        axpy(tape.weights[m], grad_out, grad_feats[m]);
        let ge = grad_scores[m];
        if ge == 0.0 {
            continue;
        }
        let u = &tape.activations[m];
        axpy(ge, u, &mut grads.w.data);
        let grad_pre: Vec<f64> = params
            .w
            .data
            .iter()
            .zip(u)
            .map(|(w, u)| ge * w * (1.0 - u * u))
            .collect();
        grads.u_f.outer_acc(&grad_pre, f);
        params.u_f.matvec_t_acc(&grad_pre, grad_feats[m]);
        axpy(1.0, &grad_pre, &mut grad_pre_sum);
    }
    axpy(1.0, &grad_pre_sum, &mut grads.b.data);
    grads.w_h.outer_acc(&grad_pre_sum, h_prev);
    params.w_h.matvec_t_acc(&grad_pre_sum, grad_h);
}

/// Softmax-normalized relevance of each feature to the decoder state.
pub fn attention_weights(params: &AttentionParameters, h_prev: &[f64], feats: &[&[f64]]) -> Result<Vec<f64>> {
    check_attention_inputs(params, h_prev, feats)?;
    let projected: Vec<Vec<f64>> = feats.iter().map(|f| params.project(f)).collect();
    Ok(attend(params, h_prev, feats, &projected).1.weights)
}

/// Attention-weighted sum over a temporal sequence of descriptors.
pub fn temporal_attend(params: &AttentionParameters, h_prev: &[f64], vlads: &[&[f64]]) -> Result<Vec<f64>> {
    check_attention_inputs(params, h_prev, vlads)?;
    let projected: Vec<Vec<f64>> = vlads.iter().map(|f| params.project(f)).collect();
    Ok(attend(params, h_prev, vlads, &projected).0)
}

/// Attention-weighted sum over per-object summaries. Same mechanism as
/// [`temporal_attend`], normalized over objects.
pub fn object_attend(params: &AttentionParameters, h_prev: &[f64], phis: &[&[f64]]) -> Result<Vec<f64>> {
    temporal_attend(params, h_prev, phis)
}

fn check_attention_inputs(params: &AttentionParameters, h_prev: &[f64], feats: &[&[f64]]) -> Result<()> {
    if feats.is_empty() {
        return Err(Error::invalid("attention over an empty set"));
    }
    if h_prev.len() != params.w_h.cols() {
        return Err(Error::invalid("attention hidden size mismatch"));
    }
    if feats.iter().any(|f| f.len() != params.u_f.cols()) {
        return Err(Error::invalid("attention feature size mismatch"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub frame_feature: usize,
    pub object_feature: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParameters {
    pub embedding: Tensor,
    pub w_vz: Tensor,
    pub w_oz: Tensor,
    pub w_dz: Tensor,
    pub u_dz: Tensor,
    pub w_vr: Tensor,
    pub w_or: Tensor,
    pub w_dr: Tensor,
    pub u_dr: Tensor,
    pub w_vh: Tensor,
    pub w_oh: Tensor,
    pub u_dh: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub att_frame: AttentionParameters,
    pub att_object_temporal: AttentionParameters,
    pub att_object: AttentionParameters,
}

impl DecoderParameters {
    pub fn random<R: Rng>(dims: DecoderDims, rng: &mut R) -> Self {
        let DecoderDims {
            vocab,
            embed,
            hidden,
            attention,
            frame_feature,
            object_feature,
        } = dims;
        let mat = |rows: usize, cols: usize, rng: &mut R| Tensor::uniform(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng);
        DecoderParameters {
            embedding: Tensor::uniform(&[vocab, embed], 1.0 / (embed as f64).sqrt(), rng),
            w_vz: mat(hidden, frame_feature, rng),
            w_oz: mat(hidden, object_feature, rng),
            w_dz: mat(hidden, embed, rng),
            u_dz: mat(hidden, hidden, rng),
            w_vr: mat(hidden, frame_feature, rng),
            w_or: mat(hidden, object_feature, rng),
            w_dr: mat(hidden, embed, rng),
            u_dr: mat(hidden, hidden, rng),
            w_vh: mat(hidden, frame_feature, rng),
            w_oh: mat(hidden, object_feature, rng),
            u_dh: mat(hidden, hidden, rng),
            out_w: mat(vocab, hidden, rng),
            out_b: Tensor::zeros(&[vocab]),
            att_frame: AttentionParameters::random(attention, hidden, frame_feature, rng),
            att_object_temporal: AttentionParameters::random(attention, hidden, object_feature, rng),
            att_object: AttentionParameters::random(attention, hidden, object_feature, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.embedding.rows(),
            embed: self.embedding.cols(),
            hidden: self.u_dz.rows(),
            attention: self.att_frame.w.len(),
            frame_feature: self.w_vz.cols(),
            object_feature: self.w_oz.cols(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.u_dz.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("gru.w_vz".into(), &self.w_vz),
            ("gru.w_oz".into(), &self.w_oz),
            ("gru.w_dz".into(), &self.w_dz),
            ("gru.u_dz".into(), &self.u_dz),
            ("gru.w_vr".into(), &self.w_vr),
            ("gru.w_or".into(), &self.w_or),
            ("gru.w_dr".into(), &self.w_dr),
            ("gru.u_dr".into(), &self.u_dr),
            ("gru.w_vh".into(), &self.w_vh),
            ("gru.w_oh".into(), &self.w_oh),
            ("gru.u_dh".into(), &self.u_dh),
            ("output.w".into(), &self.out_w),
            ("output.b".into(), &self.out_b),
        ];
        for (prefix, att) in [
            ("att_frame", &self.att_frame),
            ("att_object_temporal", &self.att_object_temporal),
            ("att_object", &self.att_object),
        ] {
            for (name, t) in att.tensors() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.embedding,
            &mut self.w_vz,
            &mut self.w_oz,
            &mut self.w_dz,
            &mut self.u_dz,
            &mut self.w_vr,
            &mut self.w_or,
            &mut self.w_dr,
            &mut self.u_dr,
            &mut self.w_vh,
            &mut self.w_oh,
            &mut self.u_dh,
            &mut self.out_w,
            &mut self.out_b,
        ];
        out.extend(self.att_frame.tensors_mut());
        out.extend(self.att_object_temporal.tensors_mut());
        out.extend(self.att_object.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub step: usize,
}

impl DecoderState {
    pub fn initial(hidden: usize) -> Self {
        DecoderState {
            h: vec![0.0; hidden],
            step: 0,
        }
    }
}

struct GruTape {
    token: usize,
    z: Vec<f64>,
    r: Vec<f64>,
    gated: Vec<f64>,
    candidate: Vec<f64>,
}

fn gru_forward(
    params: &DecoderParameters,
    h_prev: &[f64],
    phi_f: &[f64],
    phi_o: &[f64],
    token: usize,
) -> (Vec<f64>, GruTape) {
    let x = params.embedding.row(token);
    let mut pre_z = params.u_dz.matvec(h_prev);
    params.w_vz.matvec_acc(phi_f, &mut pre_z);
    params.w_oz.matvec_acc(phi_o, &mut pre_z);
    params.w_dz.matvec_acc(x, &mut pre_z);
    let mut pre_r = params.u_dr.matvec(h_prev);
    params.w_vr.matvec_acc(phi_f, &mut pre_r);
    params.w_or.matvec_acc(phi_o, &mut pre_r);
    params.w_dr.matvec_acc(x, &mut pre_r);
    let z: Vec<f64> = pre_z.into_iter().map(sigmoid).collect();
    let r: Vec<f64> = pre_r.into_iter().map(sigmoid).collect();
    let gated: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    let mut pre_h = params.u_dh.matvec(&gated);
    params.w_vh.matvec_acc(phi_f, &mut pre_h);
    params.w_oh.matvec_acc(phi_o, &mut pre_h);
    let candidate: Vec<f64> = pre_h.into_iter().map(f64::tanh).collect();
    let h: Vec<f64> = (0..h_prev.len())
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * candidate[i])
        .collect();
    (
        h,
        GruTape {
            token,
            z,
            r,
            gated,
            candidate,
        },
    )
}

fn check_step_inputs(params: &DecoderParameters, state: &DecoderState, phi_f: &[f64], phi_o: &[f64], token: usize) -> Result<()> {
    let dims = params.dims();
    if token >= dims.vocab {
        return Err(Error::invalid(format!("token {token} outside vocabulary of {}", dims.vocab)));
    }
    if state.h.len() != dims.hidden || phi_f.len() != dims.frame_feature || phi_o.len() != dims.object_feature {
        return Err(Error::invalid("decoder step input sizes do not match parameters"));
    }
    Ok(())
}

fn project_logits(params: &DecoderParameters, h: &[f64]) -> Vec<f64> {
    let mut logits = params.out_b.data.clone();
    params.out_w.matvec_acc(h, &mut logits);
    logits
}

/// One GRU update from the attended features and input word, returning the
/// new state and the vocabulary logits (no dropout).
pub fn decoder_step(
    params: &DecoderParameters,
    state: &DecoderState,
    phi_f: &[f64],
    phi_o: &[f64],
    word_in: usize,
) -> Result<(DecoderState, Vec<f64>)> {
    check_step_inputs(params, state, phi_f, phi_o, word_in)?;
    let (h, _) = gru_forward(params, &state.h, phi_f, phi_o, word_in);
    let logits = project_logits(params, &h);
    Ok((
        DecoderState {
            h,
            step: state.step + 1,
        },
        logits,
    ))
}

pub fn word_distribution(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// VLAD descriptors for one direction of one video, plus the
/// state-independent attention projections.
#[derive(Debug, Clone)]
pub struct VisualContext {
    /// `[N][T]` object descriptors.
    pub objects: Vec<Vec<Vec<f64>>>,
    /// `[T]` frame descriptors.
    pub frames: Vec<Vec<f64>>,
    object_proj: Vec<Vec<Vec<f64>>>,
    frame_proj: Vec<Vec<f64>>,
}

/// Gradient with respect to the descriptors in a [`VisualContext`].
#[derive(Debug, Clone)]
pub struct VisualContextGrad {
    pub objects: Vec<Vec<Vec<f64>>>,
    pub frames: Vec<Vec<f64>>,
}

impl VisualContext {
    pub fn new(params: &DecoderParameters, objects: Vec<Vec<Vec<f64>>>, frames: Vec<Vec<f64>>) -> Result<Self> {
        let dims = params.dims();
        if objects.is_empty() || frames.is_empty() || objects.iter().any(|o| o.is_empty()) {
            return Err(Error::invalid("visual context needs at least one object and one frame step"));
        }
        if objects.iter().flatten().any(|v| v.len() != dims.object_feature)
            || frames.iter().any(|v| v.len() != dims.frame_feature)
        {
            return Err(Error::invalid("descriptor length does not match decoder"));
        }
        let object_proj = objects
            .iter()
            .map(|seq| seq.iter().map(|v| params.att_object_temporal.project(v)).collect())
            .collect();
        let frame_proj = frames.iter().map(|v| params.att_frame.project(v)).collect();
        Ok(VisualContext {
            objects,
            frames,
            object_proj,
            frame_proj,
        })
    }

    pub fn zero_grad(&self) -> VisualContextGrad {
        VisualContextGrad {
            objects: self
                .objects
                .iter()
                .map(|seq| seq.iter().map(|v| vec![0.0; v.len()]).collect())
                .collect(),
            frames: self.frames.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }
}

struct ContextTape {
    frame_attn: AttnTape,
    object_temporal: Vec<AttnTape>,
    object_summaries: Vec<Vec<f64>>,
    object_attn: AttnTape,
}

/// The attended `(φ_f, φ_o)` pair, with per-block attention weights.
pub struct AttendedFeatures {
    pub frame: Vec<f64>,
    pub object: Vec<f64>,
    pub frame_weights: Vec<f64>,
    pub object_weights: Vec<f64>,
    pub temporal_weights: Vec<Vec<f64>>,
}

fn attend_context(params: &DecoderParameters, ctx: &VisualContext, h_prev: &[f64]) -> (Vec<f64>, Vec<f64>, ContextTape) {
    let frames: Vec<&[f64]> = ctx.frames.iter().map(Vec::as_slice).collect();
    let (phi_f, frame_attn) = attend(&params.att_frame, h_prev, &frames, &ctx.frame_proj);
    let mut object_temporal = Vec::with_capacity(ctx.objects.len());
    let mut object_summaries = Vec::with_capacity(ctx.objects.len());
    for (seq, proj) in ctx.objects.iter().zip(&ctx.object_proj) {
        let feats: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
        let (phi, tape) = attend(&params.att_object_temporal, h_prev, &feats, proj);
        object_temporal.push(tape);
        object_summaries.push(phi);
    }
    let summaries: Vec<&[f64]> = object_summaries.iter().map(Vec::as_slice).collect();
    let summary_proj: Vec<Vec<f64>> = summaries.iter().map(|s| params.att_object.project(s)).collect();
    let (phi_o, object_attn) = attend(&params.att_object, h_prev, &summaries, &summary_proj);
    (
        phi_f,
        phi_o,
        ContextTape {
            frame_attn,
            object_temporal,
            object_summaries,
            object_attn,
        },
    )
}

/// Hierarchical attention for a given decoder state.
pub fn attend_features(params: &DecoderParameters, ctx: &VisualContext, h_prev: &[f64]) -> AttendedFeatures {
    let (frame, object, tape) = attend_context(params, ctx, h_prev);
    AttendedFeatures {
        frame,
        object,
        frame_weights: tape.frame_attn.weights,
        object_weights: tape.object_attn.weights,
        temporal_weights: tape.object_temporal.into_iter().map(|t| t.weights).collect(),
    }
}

/// Attention followed by one decoder step: the inference-time transition.
pub fn advance(
    params: &DecoderParameters,
    ctx: &VisualContext,
    state: &DecoderState,
    word_in: usize,
) -> Result<(DecoderState, Vec<f64>)> {
    let (phi_f, phi_o, _) = attend_context(params, ctx, &state.h);
    decoder_step(params, state, &phi_f, &phi_o, word_in)
}

struct StepTape {
    h_prev: Vec<f64>,
    phi_f: Vec<f64>,
    phi_o: Vec<f64>,
    context: ContextTape,
    gru: GruTape,
    h: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Everything recorded by [`forward_sequence`] for backprop.
pub struct SequenceTape {
    steps: Vec<StepTape>,
}

/// Inverted-dropout configuration for the GRU output.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Teacher-forced decoding of `inputs` (BOS followed by gold words), one
/// logits row per input token. Dropout, when given, masks `h_l` before the
/// output projection.
pub fn forward_sequence<R: Rng>(
    params: &DecoderParameters,
    ctx: &VisualContext,
    inputs: &[usize],
    max_steps: usize,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<(Vec<Vec<f64>>, SequenceTape)> {
    if inputs.first() != Some(&BOS) {
        return Err(Error::invalid("gold sequence must start with BOS"));
    }
    if inputs.len() > max_steps {
        return Err(Error::invalid(format!(
            "sequence of {} steps exceeds decoder limit {max_steps}",
            inputs.len()
        )));
    }
    let vocab = params.vocab_size();
    if let Some(&bad) = inputs.iter().find(|&&t| t >= vocab) {
        return Err(Error::invalid(format!("token {bad} outside vocabulary of {vocab}")));
    }
    let mut h = vec![0.0; params.hidden_size()];
    let mut logits_out = Vec::with_capacity(inputs.len());
    let mut steps = Vec::with_capacity(inputs.len());
    for &token in inputs {
        let (phi_f, phi_o, context) = attend_context(params, ctx, &h);
        let (h_next, gru) = gru_forward(params, &h, &phi_f, &phi_o, token);
        let mask = dropout.as_mut().filter(|d| d.rate > 0.0).map(|d| {
            let keep = 1.0 - d.rate;
            (0..h_next.len())
                .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect::<Vec<f64>>()
        });
        let logits = match &mask {
            Some(m) => {
                let dropped: Vec<f64> = h_next.iter().zip(m).map(|(a, b)| a * b).collect();
                project_logits(params, &dropped)
            }
            None => project_logits(params, &h_next),
        };
        logits_out.push(logits);
        steps.push(StepTape {
            h_prev: std::mem::replace(&mut h, h_next.clone()),
            phi_f,
            phi_o,
            context,
            gru,
            h: h_next,
            mask,
        });
    }
    Ok((logits_out, SequenceTape { steps }))
}

/// Deterministic teacher-forced logits.
pub fn decode_train_sequence(
    params: &DecoderParameters,
    ctx: &VisualContext,
    gold: &[usize],
    max_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    forward_sequence::<rand_chacha::ChaCha8Rng>(params, ctx, gold, max_steps, None).map(|(l, _)| l)
}

/// Backprop through [`forward_sequence`] given loss gradients on the logits.
pub fn backward_sequence(
    params: &DecoderParameters,
    ctx: &VisualContext,
    tape: &SequenceTape,
    grad_logits: &[Vec<f64>],
    grads: &mut DecoderParameters,
    grad_ctx: &mut VisualContextGrad,
) {
    let hidden = params.hidden_size();
    let mut grad_h_next = vec![0.0; hidden];
    for (step, gl) in tape.steps.iter().zip(grad_logits).rev() {
        // Output projection.
        let dropped: Vec<f64> = match &step.mask {
            Some(m) => step.h.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => step.h.clone(),
        };
        grads.out_w.outer_acc(gl, &dropped);
        axpy(1.0, gl, &mut grads.out_b.data);
        let mut grad_dropped = vec![0.0; hidden];
        params.out_w.matvec_t_acc(gl, &mut grad_dropped);
        let mut grad_h = grad_h_next;
        match &step.mask {
            Some(m) => grad_h.iter_mut().zip(&grad_dropped).zip(m).for_each(|((g, d), m)| *g += d * m),
            None => axpy(1.0, &grad_dropped, &mut grad_h),
        }

        // GRU.
        let gru = &step.gru;
        let mut grad_prev = vec![0.0; hidden];
        let mut grad_pre_z = vec![0.0; hidden];
        let mut grad_pre_h = vec![0.0; hidden];
        for i in 0..hidden {
            let z = gru.z[i];
            let c = gru.candidate[i];
            grad_prev[i] = grad_h[i] * (1.0 - z);
            grad_pre_z[i] = grad_h[i] * (c - step.h_prev[i]) * z * (1.0 - z);
            grad_pre_h[i] = grad_h[i] * z * (1.0 - c * c);
        }
        let mut grad_phi_f = vec![0.0; step.phi_f.len()];
        let mut grad_phi_o = vec![0.0; step.phi_o.len()];
        let x = params.embedding.row(gru.token).to_vec();
        let mut grad_x = vec![0.0; x.len()];

        grads.w_vh.outer_acc(&grad_pre_h, &step.phi_f);
        params.w_vh.matvec_t_acc(&grad_pre_h, &mut grad_phi_f);
        grads.w_oh.outer_acc(&grad_pre_h, &step.phi_o);
        params.w_oh.matvec_t_acc(&grad_pre_h, &mut grad_phi_o);
        grads.u_dh.outer_acc(&grad_pre_h, &gru.gated);
        let mut grad_gated = vec![0.0; hidden];
        params.u_dh.matvec_t_acc(&grad_pre_h, &mut grad_gated);

        let mut grad_pre_r = vec![0.0; hidden];
        for i in 0..hidden {
            let r = gru.r[i];
            grad_prev[i] += grad_gated[i] * r;
            grad_pre_r[i] = grad_gated[i] * step.h_prev[i] * r * (1.0 - r);
        }

        for (gpre, w_v, w_o, w_d, u_d, gw_v, gw_o, gw_d, gu_d) in [
            (
                &grad_pre_r,
                &params.w_vr,
                &params.w_or,
                &params.w_dr,
                &params.u_dr,
                &mut grads.w_vr,
                &mut grads.w_or,
                &mut grads.w_dr,
                &mut grads.u_dr,
            ),
            (
                &grad_pre_z,
                &params.w_vz,
                &params.w_oz,
                &params.w_dz,
                &params.u_dz,
                &mut grads.w_vz,
                &mut grads.w_oz,
                &mut grads.w_dz,
                &mut grads.u_dz,
            ),
        ] {
            gw_v.outer_acc(gpre, &step.phi_f);
            w_v.matvec_t_acc(gpre, &mut grad_phi_f);
            gw_o.outer_acc(gpre, &step.phi_o);
            w_o.matvec_t_acc(gpre, &mut grad_phi_o);
            gw_d.outer_acc(gpre, &x);
            w_d.matvec_t_acc(gpre, &mut grad_x);
            gu_d.outer_acc(gpre, &step.h_prev);
            u_d.matvec_t_acc(gpre, &mut grad_prev);
        }
        axpy(1.0, &grad_x, grads.embedding.row_mut(gru.token));

        // Attention blocks.
        let tape = &step.context;
        let frames: Vec<&[f64]> = ctx.frames.iter().map(Vec::as_slice).collect();
        {
            let mut gf: Vec<&mut [f64]> = grad_ctx.frames.iter_mut().map(Vec::as_mut_slice).collect();
            attend_backward(
                &params.att_frame,
                &step.h_prev,
                &frames,
                &tape.frame_attn,
                &grad_phi_f,
                &mut grads.att_frame,
                &mut grad_prev,
                &mut gf,
            );
        }
        let summaries: Vec<&[f64]> = tape.object_summaries.iter().map(Vec::as_slice).collect();
        let mut grad_summaries: Vec<Vec<f64>> = summaries.iter().map(|s| vec![0.0; s.len()]).collect();
        {
            let mut gs: Vec<&mut [f64]> = grad_summaries.iter_mut().map(Vec::as_mut_slice).collect();
            attend_backward(
                &params.att_object,
                &step.h_prev,
                &summaries,
                &tape.object_attn,
                &grad_phi_o,
                &mut grads.att_object,
                &mut grad_prev,
                &mut gs,
            );
        }
        for (i, seq) in ctx.objects.iter().enumerate() {
            let feats: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
            let mut gf: Vec<&mut [f64]> = grad_ctx.objects[i].iter_mut().map(Vec::as_mut_slice).collect();
            attend_backward(
                &params.att_object_temporal,
                &step.h_prev,
                &feats,
                &tape.object_temporal[i],
                &grad_summaries[i],
                &mut grads.att_object_temporal,
                &mut grad_prev,
                &mut gf,
            );
        }
        grad_h_next = grad_prev;
    }
}
