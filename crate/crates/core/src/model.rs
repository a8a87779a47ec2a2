//! The assembled captioning model: per-direction VLAD aggregation feeding
//! per-direction decoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AssignmentMode, FeatureMap, VladModel, VladTape};
use crate::btg::{Direction, TrajectorySet, VideoSample};
use crate::decoder::{
    backward_sequence, forward_sequence, DecoderDims, DecoderParameters, Dropout, VisualContext,
};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax, Tensor};

/// Which directional pipelines are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMode {
    Forward,
    Backward,
    #[default]
    Both,
}

impl DirectionMode {
    pub fn directions(self) -> Vec<Direction> {
        match self {
            DirectionMode::Forward => vec![Direction::Forward],
            DirectionMode::Backward => vec![Direction::Backward],
            DirectionMode::Both => vec![Direction::Forward, Direction::Backward],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub appearance: usize,
}

impl FeatureShape {
    /// Shape of a video's features, from its first frame.
    pub fn of(video: &VideoSample) -> Result<Self> {
        let frame = video
            .frames
            .first()
            .ok_or_else(|| Error::invalid(format!("video {} has no frames", video.video_id)))?;
        let (height, width, channels) = frame.global_feature_map.shape();
        Ok(FeatureShape {
            height,
            width,
            channels,
            appearance: frame.regions.first().map_or(0, |r| r.appearance.len()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub clusters: usize,
    pub kernel_size: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    pub vocab: usize,
    pub channels: usize,
    pub assignment: AssignmentMode,
    pub directions: DirectionMode,
    pub share_aggregation: bool,
}

/// Object and frame VLAD models used by one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub object: VladModel,
    pub frame: VladModel,
}

impl Aggregation {
    fn zeros_like(&self) -> Self {
        Aggregation {
            object: self.object.zeros_like(),
            frame: self.frame.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub shape: ModelShape,
    pub directions: Vec<Direction>,
    /// One set per direction, or a single set shared by both.
    pub aggregation: Vec<Aggregation>,
    pub decoders: Vec<DecoderParameters>,
}

/// A `(video, sentence)` training pair with its precomputed trajectories.
pub struct Example<'a> {
    pub video: &'a VideoSample,
    pub trajectories: &'a TrajectorySet,
    /// BOS, words, EOS, then PAD.
    pub tokens: &'a [usize],
    /// `mask[l]` is true when the prediction of `tokens[l + 1]` counts.
    pub mask: &'a [bool],
}

/// Encoded inputs of one direction plus everything needed to backprop
/// through the VLAD models.
pub struct EncodedDirection<'v> {
    pub context: VisualContext,
    object_inputs: Vec<Vec<&'v FeatureMap>>,
    object_tapes: Vec<VladTape>,
    frame_inputs: Vec<&'v FeatureMap>,
    frame_tape: VladTape,
}

impl Model {
    pub fn new<R: Rng>(shape: ModelShape, rng: &mut R) -> Self {
        let directions = shape.directions.directions();
        let n_agg = if shape.share_aggregation { 1 } else { directions.len() };
        let aggregation = (0..n_agg)
            .map(|_| Aggregation {
                object: VladModel::random(shape.channels, shape.clusters, shape.kernel_size, shape.assignment, rng),
                frame: VladModel::random(shape.channels, shape.clusters, shape.kernel_size, shape.assignment, rng),
            })
            .collect();
        let descriptor = shape.clusters * shape.channels;
        let dims = DecoderDims {
            vocab: shape.vocab,
            embed: shape.embed,
            hidden: shape.hidden,
            attention: shape.attention,
            frame_feature: descriptor,
            object_feature: descriptor,
        };
        let decoders = directions.iter().map(|_| DecoderParameters::random(dims, rng)).collect();
        Model {
            shape,
            directions,
            aggregation,
            decoders,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            shape: self.shape,
            directions: self.directions.clone(),
            aggregation: self.aggregation.iter().map(Aggregation::zeros_like).collect(),
            decoders: self.decoders.iter().map(DecoderParameters::zeros_like).collect(),
        }
    }

    pub fn aggregation_for(&self, slot: usize) -> &Aggregation {
        &self.aggregation[if self.shape.share_aggregation { 0 } else { slot }]
    }

    fn aggregation_slot(&self, slot: usize) -> usize {
        if self.shape.share_aggregation {
            0
        } else {
            slot
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, agg) in self.aggregation.iter().enumerate() {
            let prefix = if self.shape.share_aggregation {
                "shared".to_string()
            } else {
                direction_name(self.directions[i]).to_string()
            };
            for (part, model) in [("object_vlad", &agg.object), ("frame_vlad", &agg.frame)] {
                for (name, t) in model.tensors() {
                    out.push((format!("{prefix}.{part}.{name}"), t));
                }
            }
        }
        for (dir, dec) in self.directions.iter().zip(&self.decoders) {
            for (name, t) in dec.tensors() {
                out.push((format!("{}.decoder.{name}", direction_name(*dir)), t));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for agg in &mut self.aggregation {
            out.extend(agg.object.tensors_mut());
            out.extend(agg.frame.tensors_mut());
        }
        for dec in &mut self.decoders {
            out.extend(dec.tensors_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Runs both VLAD models of direction `slot` over a video.
    pub fn encode_direction<'v>(
        &self,
        slot: usize,
        video: &'v VideoSample,
        trajectories: &TrajectorySet,
    ) -> Result<EncodedDirection<'v>> {
        let direction = self.directions[slot];
        let agg = self.aggregation_for(slot);
        let channels = self.shape.channels;
        if let Some(frame) = video.frames.first() {
            if frame.global_feature_map.channels != channels {
                return Err(Error::invalid(format!(
                    "video {} has {}-channel features, model expects {channels}",
                    video.video_id, frame.global_feature_map.channels
                )));
            }
        }
        let mut objects = Vec::new();
        let mut object_inputs = Vec::new();
        let mut object_tapes = Vec::new();
        for traj in trajectories.objects(direction) {
            let xs: Vec<&FeatureMap> = traj
                .steps
                .iter()
                .map(|s| &video.frames[s.frame].regions[s.region].feature_map)
                .collect();
            let (descriptors, tape) = agg.object.encode_with_tape(&xs)?;
            objects.push(descriptors);
            object_inputs.push(xs);
            object_tapes.push(tape);
        }
        let frame_inputs: Vec<&FeatureMap> = trajectories
            .frames(direction)
            .iter()
            .map(|&t| &video.frames[t].global_feature_map)
            .collect();
        let (frames, frame_tape) = agg.frame.encode_with_tape(&frame_inputs)?;
        let context = VisualContext::new(&self.decoders[slot], objects, frames)?;
        Ok(EncodedDirection {
            context,
            object_inputs,
            object_tapes,
            frame_inputs,
            frame_tape,
        })
    }

    /// Masked cross-entropy of one batch, summed over active directions, and
    /// its gradient. Each direction contributes the mean over all unmasked
    /// positions of the batch.
    pub fn loss_and_grad<R: Rng>(
        &self,
        batch: &[Example<'_>],
        max_steps: usize,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<(f64, Model)> {
        let mut grads = self.zeros_like();
        let loss = self.accumulate(batch, max_steps, dropout, Some(&mut grads))?;
        Ok((loss, grads))
    }

    /// Deterministic loss without gradients.
    pub fn loss(&self, batch: &[Example<'_>], max_steps: usize) -> Result<f64> {
        self.accumulate::<rand_chacha::ChaCha8Rng>(batch, max_steps, None, None)
    }

    fn accumulate<R: Rng>(
        &self,
        batch: &[Example<'_>],
        max_steps: usize,
        mut dropout: Option<(f64, &mut R)>,
        mut grads: Option<&mut Model>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let count: usize = batch.iter().map(|e| e.mask.iter().filter(|&&m| m).count()).sum();
        if count == 0 {
            return Err(Error::invalid("every position in the batch is masked"));
        }
        let scale = 1.0 / count as f64;
        let mut total = 0.0;
        for slot in 0..self.directions.len() {
            let decoder = &self.decoders[slot];
            let mut dir_loss = 0.0;
            for ex in batch {
                let last = match ex.mask.iter().rposition(|&m| m) {
                    Some(p) => p,
                    None => continue,
                };
                if ex.tokens.len() < last + 2 {
                    return Err(Error::invalid("mask extends past the token sequence"));
                }
                let inputs = &ex.tokens[..=last];
                let encoded = self.encode_direction(slot, ex.video, ex.trajectories)?;
                let drop = dropout.as_mut().map(|(rate, rng)| Dropout {
                    rate: *rate,
                    rng: &mut **rng,
                });
                let (logits, tape) = forward_sequence(decoder, &encoded.context, inputs, max_steps, drop)?;
                let mut grad_logits = Vec::with_capacity(logits.len());
                for (l, row) in logits.iter().enumerate() {
                    if !ex.mask[l] {
                        grad_logits.push(vec![0.0; row.len()]);
                        continue;
                    }
                    let gold = ex.tokens[l + 1];
                    let lp = log_softmax(row);
                    dir_loss -= lp[gold];
                    let mut g = softmax(row);
                    g[gold] -= 1.0;
                    g.iter_mut().for_each(|v| *v *= scale);
                    grad_logits.push(g);
                }
                if let Some(grads) = grads.as_deref_mut() {
                    self.backward_example(slot, &encoded, &tape, &grad_logits, grads);
                }
            }
            total += dir_loss * scale;
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total}")));
        }
        Ok(total)
    }

    fn backward_example(
        &self,
        slot: usize,
        encoded: &EncodedDirection<'_>,
        tape: &crate::decoder::SequenceTape,
        grad_logits: &[Vec<f64>],
        grads: &mut Model,
    ) {
        let decoder = &self.decoders[slot];
        let mut grad_ctx = encoded.context.zero_grad();
        backward_sequence(decoder, &encoded.context, tape, grad_logits, &mut grads.decoders[slot], &mut grad_ctx);
        let agg = self.aggregation_for(slot);
        let agg_slot = self.aggregation_slot(slot);
        let grad_agg = &mut grads.aggregation[agg_slot];
        for ((xs, tape), g) in encoded
            .object_inputs
            .iter()
            .zip(&encoded.object_tapes)
            .zip(&grad_ctx.objects)
        {
            agg.object.backward(xs, tape, g, &mut grad_agg.object, None);
        }
        agg.frame
            .backward(&encoded.frame_inputs, &encoded.frame_tape, &grad_ctx.frames, &mut grad_agg.frame, None);
    }
}

pub fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    }
}
