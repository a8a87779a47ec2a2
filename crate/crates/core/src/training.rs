//! Optimization, checkpoints and gradient verification.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AssignmentMode;
use crate::btg::{build_bidirectional_trajectories, TrajectorySet, VideoSample};
use crate::dataio::{prepare_training_sentences, random_video, CaptionRecord, Dataset, EncodedSentence, VideoDims};
use crate::decoder::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::inference::FusionMode;
use crate::model::{DirectionMode, Example, FeatureShape, Model, ModelShape};
use crate::tensor::{log_softmax, Tensor};

/// Training and model hyperparameters. Defaults follow the published
/// experimental setup; the remaining fields select ablation variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub grad_clip: f64,
    pub max_sentence_len: usize,
    /// Sampled frames per video.
    pub frames: usize,
    /// Object regions per frame.
    pub regions: usize,
    /// VLAD cluster centers.
    pub clusters: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    pub beam: usize,
    pub seed: u64,
    pub kernel_size: usize,
    pub assignment: AssignmentMode,
    pub fusion: FusionMode,
    pub direction: DirectionMode,
    pub share_aggregation: bool,
    pub min_count: usize,
    pub max_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            dropout: 0.5,
            grad_clip: 10.0,
            max_sentence_len: 16,
            frames: 40,
            regions: 5,
            clusters: 64,
            hidden: 512,
            embed: 512,
            attention: 100,
            beam: 5,
            seed: 42,
            kernel_size: 3,
            assignment: AssignmentMode::Raw,
            fusion: FusionMode::Mean,
            direction: DirectionMode::Both,
            share_aggregation: false,
            min_count: 1,
            max_steps: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_sentence_len", self.max_sentence_len),
            ("frames", self.frames),
            ("regions", self.regions),
            ("clusters", self.clusters),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("attention", self.attention),
            ("beam", self.beam),
            ("kernel_size", self.kernel_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("kernel_size", "must be odd for same padding"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        Ok(())
    }

    /// Decoder steps: every word plus EOS.
    pub fn max_decode_steps(&self) -> usize {
        self.max_sentence_len + 1
    }

    pub fn model_shape(&self, vocab: usize, channels: usize) -> ModelShape {
        ModelShape {
            clusters: self.clusters,
            kernel_size: self.kernel_size,
            hidden: self.hidden,
            embed: self.embed,
            attention: self.attention,
            vocab,
            channels,
            assignment: self.assignment,
            directions: self.direction,
            share_aggregation: self.share_aggregation,
        }
    }
}

/// Mean `-log p(gold)` over unmasked positions. `logits[s][l]` predicts
/// `gold[s][l]`.
pub fn masked_cross_entropy(logits: &[Vec<Vec<f64>>], gold: &[Vec<usize>], mask: &[Vec<bool>]) -> Result<f64> {
    if logits.len() != gold.len() || gold.len() != mask.len() {
        return Err(Error::invalid("batch sizes of logits, gold tokens and mask differ"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((rows, g), m) in logits.iter().zip(gold).zip(mask) {
        if rows.len() != g.len() || g.len() != m.len() {
            return Err(Error::invalid("sequence lengths of logits, gold tokens and mask differ"));
        }
        for ((row, &tok), &keep) in rows.iter().zip(g).zip(m) {
            if !keep {
                continue;
            }
            if tok >= row.len() {
                return Err(Error::invalid(format!("gold token {tok} outside vocabulary")));
            }
            total -= log_softmax(row)[tok];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("every position is masked"));
    }
    Ok(total / count as f64)
}

/// Elementwise clamp to `[-limit, limit]`.
pub fn clip_gradients(grads: &mut [f64], limit: f64) {
    for g in grads {
        *g = g.clamp(-limit, limit);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &Model, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = model.tensors().iter().map(|(_, t)| t.zeros_like()).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &Model) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grads = grads.tensors();
        for (((param, (_, grad)), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..param.data.len() {
                let g = grad.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                param.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                // Keep state on the f32 grid so checkpoints resume exactly.
                param.data[i] = f32_round(param.data[i]);
                m.data[i] = f32_round(m.data[i]);
                v.data[i] = f32_round(v.data[i]);
            }
        }
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// In-memory training set: videos with their trajectories and the encoded
/// sentences that reference them.
pub struct Corpus {
    pub videos: Vec<VideoSample>,
    pub trajectories: Vec<TrajectorySet>,
    pub sentences: Vec<EncodedSentence>,
    sentence_video: Vec<usize>,
}

impl Corpus {
    pub fn new(videos: Vec<VideoSample>, sentences: Vec<EncodedSentence>) -> Result<Self> {
        let trajectories = videos
            .iter()
            .map(build_bidirectional_trajectories)
            .collect::<Result<Vec<_>>>()?;
        let mut sentence_video = Vec::with_capacity(sentences.len());
        for s in &sentences {
            let idx = videos
                .iter()
                .position(|v| v.video_id == s.video_id)
                .ok_or_else(|| Error::invalid(format!("sentence references unknown video {}", s.video_id)))?;
            sentence_video.push(idx);
        }
        Ok(Corpus {
            videos,
            trajectories,
            sentences,
            sentence_video,
        })
    }

    /// Loads the listed videos from a dataset and encodes their captions.
    pub fn from_dataset(
        dataset: &Dataset,
        ids: &[String],
        records: &[CaptionRecord],
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        let videos = ids.iter().map(|id| dataset.load_by_id(id)).collect::<Result<Vec<_>>>()?;
        let selected: Vec<CaptionRecord> = records
            .iter()
            .filter(|r| wanted.contains(r.video_id.as_str()))
            .cloned()
            .collect();
        Corpus::new(videos, prepare_training_sentences(&selected, vocab, max_len))
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        let v = self.sentence_video[i];
        Example {
            video: &self.videos[v],
            trajectories: &self.trajectories[v],
            tokens: &self.sentences[i].tokens,
            mask: &self.sentences[i].mask,
        }
    }

    pub fn examples(&self, indices: &[usize]) -> Vec<Example<'_>> {
        indices.iter().map(|&i| self.example(i)).collect()
    }

    pub fn all_examples(&self) -> Vec<Example<'_>> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }

    pub fn feature_shape(&self) -> Result<FeatureShape> {
        FeatureShape::of(self.videos.first().ok_or_else(|| Error::invalid("corpus has no videos"))?)
    }

    /// Sentence indices for optimizer step `step`: each epoch is a seeded
    /// shuffle cut into consecutive batches.
    pub fn batch_indices(&self, step: u64, batch_size: usize, seed: u64) -> Vec<usize> {
        let n = self.len();
        let per_epoch = n.div_ceil(batch_size) as u64;
        let epoch = step / per_epoch;
        let b = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        order[b * batch_size..((b + 1) * batch_size).min(n)].to_vec()
    }
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// One optimizer update on `batch`: loss and gradients with dropout, clip,
/// Adam. Returns the pre-update loss.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    batch: &[Example<'_>],
    config: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let mut rng = dropout_rng(config.seed, step);
    let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut rng));
    let (loss, mut grads) = model.loss_and_grad(batch, config.max_decode_steps(), dropout)?;
    for t in grads.tensors_mut() {
        clip_gradients(&mut t.data, config.grad_clip);
    }
    optimizer.learning_rate = config.learning_rate;
    optimizer.update(model, &grads);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wallclock: f64,
}

/// Model, vocabulary, optimizer state and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub feature_shape: FeatureShape,
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    step: u64,
    adam_t: u64,
    config: TrainConfig,
    vocab: Vec<String>,
    feature_shape: FeatureShape,
    model: ModelShape,
    arrays: Vec<ArraySpec>,
}

const MAGIC: &[u8; 8] = b"OABTGCKP";
const FORMAT: &str = "oabtg-checkpoint";
const VERSION: u32 = 1;

impl Checkpoint {
    /// Fresh model initialized from `config.seed`.
    pub fn initialize(config: TrainConfig, vocab: Vocabulary, feature_shape: FeatureShape) -> Result<Self> {
        config.validate()?;
        let shape = config.model_shape(vocab.len(), feature_shape.channels);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model::new(shape, &mut rng);
        for t in model.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = f32_round(*v));
        }
        let optimizer = Adam::new(&model, config.learning_rate);
        Ok(Checkpoint {
            config,
            vocab,
            feature_shape,
            model,
            optimizer,
            step: 0,
        })
    }

    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let params = self.model.tensors();
        let mut out: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (n.clone(), *t)).collect();
        for ((name, _), m) in params.iter().zip(&self.optimizer.m) {
            out.push((format!("adam.m.{name}"), m));
        }
        for ((name, _), v) in params.iter().zip(&self.optimizer.v) {
            out.push((format!("adam.v.{name}"), v));
        }
        out
    }

    /// Header JSON followed by every array as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self.arrays();
        let header = CheckpointHeader {
            format: FORMAT.to_string(),
            version: VERSION,
            step: self.step,
            adam_t: self.optimizer.t,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            feature_shape: self.feature_shape,
            model: self.model.shape,
            arrays: arrays
                .iter()
                .map(|(name, t)| ArraySpec {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let payload: usize = arrays.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in arrays {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::data(origin, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not an oabtg checkpoint".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::json(origin, e))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!("unsupported checkpoint {} v{}", header.format, header.version)));
        }
        let vocab = Vocabulary::new(header.vocab.iter().cloned());
        if vocab.tokens() != header.vocab.as_slice() {
            return Err(bad("vocabulary is missing reserved tokens or has duplicates".into()));
        }
        let mut model = Model::new(header.model, &mut ChaCha8Rng::seed_from_u64(0));
        let mut optimizer = Adam::new(&model, header.config.learning_rate);
        optimizer.t = header.adam_t;

        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let count = names.len();
        if header.arrays.len() != 3 * count {
            return Err(bad(format!("expected {} arrays, header lists {}", 3 * count, header.arrays.len())));
        }
        let mut offset = header_end;
        let mut read = |spec: &ArraySpec, expected_name: &str, target: &mut Tensor| -> Result<()> {
            if spec.name != expected_name || spec.shape != target.shape {
                return Err(bad(format!(
                    "array {} {:?} does not match model tensor {expected_name} {:?}",
                    spec.name, spec.shape, target.shape
                )));
            }
            let n = target.len();
            let end = offset + n * 4;
            if end > bytes.len() {
                return Err(bad(format!("truncated payload in array {}", spec.name)));
            }
            for (v, c) in target.data.iter_mut().zip(bytes[offset..end].chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            }
            offset = end;
            Ok(())
        };
        for ((spec, name), t) in header.arrays[..count].iter().zip(&names).zip(model.tensors_mut()) {
            read(spec, name, t)?;
        }
        for ((spec, name), t) in header.arrays[count..2 * count].iter().zip(&names).zip(&mut optimizer.m) {
            read(spec, &format!("adam.m.{name}"), t)?;
        }
        for ((spec, name), t) in header.arrays[2 * count..].iter().zip(&names).zip(&mut optimizer.v) {
            read(spec, &format!("adam.v.{name}"), t)?;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes after payload", bytes.len() - offset)));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab,
            feature_shape: header.feature_shape,
            model,
            optimizer,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn check_features(&self, video: &VideoSample) -> Result<()> {
        let found = FeatureShape::of(video)?;
        if found != self.feature_shape {
            return Err(Error::invalid(format!(
                "video {} features {:?} do not match checkpoint {:?}",
                video.video_id, found, self.feature_shape
            )));
        }
        Ok(())
    }

    pub fn train_step(&mut self, batch: &[Example<'_>]) -> Result<f64> {
        let loss = train_step(&mut self.model, &mut self.optimizer, batch, &self.config, self.step)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Options for [`fit`] beyond the model configuration.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Total optimizer steps to reach (counted from step 0, so resumed runs
    /// continue to the same target).
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    /// Stop after this many evaluations without validation improvement.
    pub patience: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub steps: u64,
    pub last_loss: f64,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Runs optimizer steps until `max_steps`, writing one JSON log line per
/// step. `on_checkpoint` is called every `checkpoint_every` steps.
pub fn fit(
    ckpt: &mut Checkpoint,
    train: &Corpus,
    val: Option<&Corpus>,
    options: &FitOptions,
    log: &mut dyn Write,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::invalid("training corpus has no usable sentences"));
    }
    let started = Instant::now();
    let mut last_loss = f64::NAN;
    let mut best_val: Option<f64> = None;
    let mut stale = 0u64;
    let mut stopped_early = false;
    while ckpt.step < options.max_steps {
        let idx = train.batch_indices(ckpt.step, ckpt.config.batch_size, ckpt.config.seed);
        let batch = train.examples(&idx);
        last_loss = ckpt.train_step(&batch)?;
        let line = LogLine {
            step: ckpt.step,
            loss: last_loss,
            lr: ckpt.config.learning_rate,
            wallclock: started.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut *log, &line).map_err(|e| Error::json("<log>", e))?;
        writeln!(log).map_err(|e| Error::io("<log>", e))?;
        if options.checkpoint_every > 0 && ckpt.step.is_multiple_of(options.checkpoint_every) {
            on_checkpoint(ckpt)?;
        }
        if let Some(val) = val.filter(|v| !v.is_empty() && options.eval_every > 0) {
            if ckpt.step.is_multiple_of(options.eval_every) {
                let loss = ckpt.model.loss(&val.all_examples(), ckpt.config.max_decode_steps())?;
                if best_val.is_none_or(|b| loss < b) {
                    best_val = Some(loss);
                    stale = 0;
                } else {
                    stale += 1;
                    if options.patience.is_some_and(|p| stale >= p) {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    Ok(FitSummary {
        steps: ckpt.step,
        last_loss,
        best_val_loss: best_val,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub count: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn offending(&self) -> Vec<&GroupError> {
        self.groups.iter().filter(|g| !(g.max_rel_error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.offending().is_empty()
    }
}

/// Relative error with an absolute floor so that vanishing gradients are not
/// judged on round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Something with an ordered list of named parameter tensors.
pub trait Parameterized: Clone {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Parameterized for Model {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        Model::tensors_mut(self)
    }
}

/// Central differences of `loss` against `analytic`, element by element,
/// reported per named tensor.
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &P,
    mut loss: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    P: Parameterized,
    F: FnMut(&P) -> Result<f64>,
{
    let mut probe = params.clone();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor> = analytic.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut groups = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for i in 0..len {
            let original = probe.tensors_mut()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = original + epsilon;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].data[i] = original - epsilon;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].data[i] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[ti].data[i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        groups.push(GroupError {
            name: name.clone(),
            count: len,
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        groups,
    })
}

/// Gradient check of the full pipeline (both directions, dropout off) on a
/// batch.
pub fn check_model_gradients(
    model: &Model,
    batch: &[Example<'_>],
    max_steps: usize,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grad::<ChaCha8Rng>(batch, max_steps, None)?;
    finite_difference_check(model, &grads, |m| m.loss(batch, max_steps), epsilon, tolerance)
}

/// Parameter category of a tensor name, for summarizing checks.
pub fn parameter_group(name: &str) -> &'static str {
    if name.contains("codebook") {
        "codebook"
    } else if name.contains("_vlad.") {
        "cgru_kernels"
    } else if name.contains("att_object_temporal.") {
        "attention_object_temporal"
    } else if name.contains("att_object.") {
        "attention_object"
    } else if name.contains("att_frame.") {
        "attention_frame"
    } else if name.contains("embedding") {
        "embedding"
    } else if name.contains("output.") {
        "output_projection"
    } else {
        "decoder_gru"
    }
}

/// Small end-to-end instance for gradient checks: 2 frames of 2x2x3
/// features, 2 regions, 2 clusters, hidden 3, attention 2, five words.
pub struct GradCheckFixture {
    pub model: Model,
    pub video: VideoSample,
    pub trajectories: TrajectorySet,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

impl GradCheckFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = VideoDims {
            frames: 2,
            regions: 2,
            height: 2,
            width: 2,
            channels: 3,
            appearance: 3,
        };
        let video = random_video("gradcheck", dims, &mut rng);
        let trajectories = build_bidirectional_trajectories(&video)?;
        let shape = ModelShape {
            clusters: 2,
            kernel_size: 3,
            hidden: 3,
            embed: 3,
            attention: 2,
            vocab: 5,
            channels: 3,
            assignment: AssignmentMode::Raw,
            directions: DirectionMode::Both,
            share_aggregation: false,
        };
        let mut model = Model::new(shape, &mut rng);
        // Non-zero attention biases so their gradients are exercised.
        for t in model.tensors_mut() {
            if t.shape.len() == 1 && t.data.iter().all(|&v| v == 0.0) {
                for v in &mut t.data {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        Ok(GradCheckFixture {
            model,
            video,
            trajectories,
            tokens: vec![BOS, 4, 3, EOS, PAD],
            mask: vec![true, true, true, false],
        })
    }

    pub fn example(&self) -> Example<'_> {
        Example {
            video: &self.video,
            trajectories: &self.trajectories,
            tokens: &self.tokens,
            mask: &self.mask,
        }
    }

    pub fn run(&self, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
        check_model_gradients(&self.model, &[self.example()], 4, epsilon, tolerance)
    }
}
