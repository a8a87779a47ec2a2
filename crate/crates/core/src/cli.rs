//! Command line front end.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::aggregation::AssignmentMode;
use crate::btg::{build_bidirectional_trajectories, TrajectorySetJson};
use crate::dataio::{
    build_vocabulary, load_manifest, read_captions, read_split, synthesize_dataset, tokenize, CaptionRecord,
    Dataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::inference::{caption_video, FusionMode};
use crate::metrics::bleu4;
use crate::model::{DirectionMode, FeatureShape};
use crate::training::{fit, Checkpoint, Corpus, FitOptions, GradCheckFixture, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "oabtg", version, about = "Object-aware video captioning over bidirectional temporal graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a captioning model and write a checkpoint.
    Train(TrainArgs),
    /// Caption videos with a trained checkpoint (JSON lines).
    Caption(CaptionArgs),
    /// Caption a split and report corpus BLEU@4.
    Eval(EvalArgs),
    /// Print the forward and backward object trajectories of videos.
    TraceGraph(TraceArgs),
    /// Compare analytic gradients with finite differences on a small model.
    Gradcheck(GradcheckArgs),
    /// Write a small synthetic corpus with planted trajectories.
    Synth(SynthArgs),
}

/// Hyperparameters. Precedence: flags (and OABTG_SEED) over `--config`
/// file over defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// JSON file with any subset of the hyperparameters below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Sentences per batch [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dropout on the decoder state before the output layer [default: 0.5]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Elementwise gradient clip [default: 10]
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Longest training caption in words; also caps decoding [default: 16]
    #[arg(long)]
    pub max_sentence_len: Option<usize>,
    /// Frames per video; must match the manifest [default: 40]
    #[arg(long)]
    pub frames: Option<usize>,
    /// Regions per frame; must match the manifest [default: 5]
    #[arg(long)]
    pub regions: Option<usize>,
    /// VLAD cluster centers [default: 64]
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Decoder hidden size [default: 512]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Word embedding size [default: 512]
    #[arg(long)]
    pub embed: Option<usize>,
    /// Attention size [default: 100]
    #[arg(long)]
    pub attention: Option<usize>,
    /// Beam width [default: 5]
    #[arg(long)]
    pub beam: Option<usize>,
    /// Random seed [default: 42]
    #[arg(long, env = "OABTG_SEED")]
    pub seed: Option<u64>,
    /// Convolution kernel size of the assignment network [default: 3]
    #[arg(long)]
    pub kernel_size: Option<usize>,
    /// VLAD assignment activation [default: raw]
    #[arg(long, value_enum)]
    pub assignment: Option<AssignmentMode>,
    /// Fusion of the two directional distributions [default: mean]
    #[arg(long, value_enum)]
    pub fusion: Option<FusionMode>,
    /// Directional pipelines to train [default: both]
    #[arg(long, value_enum)]
    pub direction: Option<DirectionMode>,
    /// Share aggregation parameters between directions [default: false]
    #[arg(long)]
    pub share_aggregation: Option<bool>,
    /// Minimum word frequency for the vocabulary [default: 1]
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Total optimizer steps [default: 1000]
    #[arg(long)]
    pub max_steps: Option<u64>,
}

impl HyperArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            learning_rate, batch_size, dropout, grad_clip, max_sentence_len, frames, regions, clusters, hidden,
            embed, attention, beam, seed, kernel_size, assignment, fusion, direction, share_aggregation,
            min_count, max_steps
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Caption records, one JSON object per line.
    #[arg(long)]
    pub captions: PathBuf,
    /// Video ids to train on; every manifest video when omitted.
    #[arg(long)]
    pub train_split: Option<PathBuf>,
    /// Video ids for validation loss and early stopping.
    #[arg(long)]
    pub val_split: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint (its configuration is kept except
    /// `--max-steps`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Training log (JSON lines); stderr when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write the checkpoint every this many steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Validation interval in steps (0 = never).
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    /// Stop after this many evaluations without improvement.
    #[arg(long)]
    pub patience: Option<u64>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Video ids to caption; every manifest video when omitted.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Beam width; the checkpoint's when omitted.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Fusion mode; the checkpoint's when omitted.
    #[arg(long, value_enum)]
    pub fusion: Option<FusionMode>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reference captions, one JSON object per line.
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionMode>,
    /// Also write the generated captions (JSON lines) here.
    #[arg(long)]
    pub captions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only this video; every manifest video when omitted.
    #[arg(long)]
    pub video_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "OABTG_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "OABTG_SEED", default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub videos: usize,
    #[arg(long, default_value_t = 6)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub regions: usize,
    #[arg(long, default_value_t = 2)]
    pub height: usize,
    #[arg(long, default_value_t = 2)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub appearance: usize,
    #[arg(long, default_value_t = 6)]
    pub identities: usize,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
        }
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_json_line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Error::json("<output>", e))?;
    writeln!(out).map_err(|e| Error::io("<output>", e))
}

fn video_ids(dataset: &Dataset, split: Option<&Path>) -> Result<Vec<String>> {
    match split {
        Some(p) => {
            let ids = read_split(p)?;
            if let Some(missing) = ids.iter().find(|id| dataset.index_of(id).is_none()) {
                return Err(Error::data(p, format!("video {missing} is not in the manifest")));
            }
            Ok(ids)
        }
        None => Ok(dataset.entries().iter().map(|e| e.video_id.clone()).collect()),
    }
}

fn check_manifest_dims(dataset: &Dataset, ids: &[String], cfg: &TrainConfig, manifest: &Path) -> Result<()> {
    for id in ids {
        let e = &dataset.entries()[dataset.index_of(id).expect("checked id")];
        if e.frames != cfg.frames || e.regions != cfg.regions {
            return Err(Error::data(
                manifest,
                format!(
                    "video {id} has T={} N={}, configuration expects frames={} regions={}",
                    e.frames, e.regions, cfg.frames, cfg.regions
                ),
            ));
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Caption(args) => caption(args),
        Command::Eval(args) => eval(args),
        Command::TraceGraph(args) => trace_graph(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Synth(args) => synth(args),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let records = read_captions(&args.captions)?;
    let train_ids = video_ids(&dataset, args.train_split.as_deref())?;
    let mut ckpt = match &args.resume {
        Some(path) => {
            let mut c = Checkpoint::load(path)?;
            if let Some(steps) = args.hyper.max_steps {
                c.config.max_steps = steps;
            }
            c
        }
        None => {
            let cfg = args.hyper.resolve()?;
            let wanted: std::collections::HashSet<&str> = train_ids.iter().map(String::as_str).collect();
            let train_records: Vec<CaptionRecord> =
                records.iter().filter(|r| wanted.contains(r.video_id.as_str())).cloned().collect();
            let vocab = build_vocabulary(&train_records, cfg.min_count)?;
            let first = train_ids
                .first()
                .ok_or_else(|| Error::data(&args.manifest, "no training videos"))?;
            let shape = FeatureShape::of(&dataset.load_by_id(first)?)?;
            Checkpoint::initialize(cfg, vocab, shape)?
        }
    };
    check_manifest_dims(&dataset, &train_ids, &ckpt.config, &args.manifest)?;
    let max_len = ckpt.config.max_sentence_len;
    let train = Corpus::from_dataset(&dataset, &train_ids, &records, &ckpt.vocab, max_len)?;
    if let Some(v) = train.videos.first() {
        ckpt.check_features(v)?;
    }
    let val = match &args.val_split {
        Some(p) => {
            let ids = video_ids(&dataset, Some(p))?;
            Some(Corpus::from_dataset(&dataset, &ids, &records, &ckpt.vocab, max_len)?)
        }
        None => None,
    };
    let mut log: Box<dyn Write> = match &args.log {
        Some(p) => output(Some(p))?,
        None => Box::new(io::stderr()),
    };
    let options = FitOptions {
        max_steps: ckpt.config.max_steps,
        checkpoint_every: args.checkpoint_every,
        eval_every: args.eval_every,
        patience: args.patience,
    };
    let out = args.out.clone();
    let summary = fit(&mut ckpt, &train, val.as_ref(), &options, &mut *log, &mut |c| c.save(&out))?;
    log.flush().map_err(|e| Error::io("<log>", e))?;
    ckpt.save(&args.out)?;
    let mut stdout = output(None)?;
    write_json_line(
        &mut *stdout,
        &serde_json::json!({
            "steps": summary.steps,
            "loss": summary.last_loss,
            "best_val_loss": summary.best_val_loss,
            "stopped_early": summary.stopped_early,
            "parameters": ckpt.model.num_parameters(),
            "vocab": ckpt.vocab.len(),
            "checkpoint": args.out,
        }),
    )?;
    stdout.flush().map_err(|e| Error::io("<stdout>", e))
}

fn caption(args: CaptionArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_manifest(&args.manifest)?;
    let ids = video_ids(&dataset, args.split.as_deref())?;
    let beam = args.beam.unwrap_or(ckpt.config.beam);
    let fusion = args.fusion.unwrap_or(ckpt.config.fusion);
    let mut out = output(args.out.as_deref())?;
    for id in &ids {
        let video = dataset.load_by_id(id)?;
        write_json_line(&mut *out, &caption_video(&ckpt, &video, beam, fusion)?)?;
    }
    out.flush().map_err(|e| Error::io("<output>", e))
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_manifest(&args.manifest)?;
    let records = read_captions(&args.captions)?;
    let ids = video_ids(&dataset, args.split.as_deref())?;
    let beam = args.beam.unwrap_or(ckpt.config.beam);
    let fusion = args.fusion.unwrap_or(ckpt.config.fusion);
    let mut references: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for r in &records {
        references
            .entry(r.video_id.clone())
            .or_default()
            .extend(r.sentences.iter().map(|s| tokenize(s)));
    }
    let mut captions_out = args.captions_out.as_deref().map(|p| output(Some(p))).transpose()?;
    let mut candidates = BTreeMap::new();
    for id in &ids {
        let video = dataset.load_by_id(id)?;
        let cap = caption_video(&ckpt, &video, beam, fusion)?;
        if let Some(out) = captions_out.as_mut() {
            write_json_line(&mut **out, &cap)?;
        }
        candidates.insert(id.clone(), tokenize(&cap.caption));
    }
    if let Some(mut out) = captions_out {
        out.flush().map_err(|e| Error::io("<output>", e))?;
    }
    let report = bleu4(&candidates, &references)?;
    let mut stdout = output(None)?;
    write_json_line(
        &mut *stdout,
        &serde_json::json!({ "bleu4": report.bleu4, "n_videos": report.n_videos }),
    )?;
    stdout.flush().map_err(|e| Error::io("<stdout>", e))
}

fn trace_graph(args: TraceArgs) -> Result<()> {
    let dataset = load_manifest(&args.manifest)?;
    let ids = match args.video_id {
        Some(id) => vec![id],
        None => video_ids(&dataset, None)?,
    };
    let mut out = output(args.out.as_deref())?;
    for id in &ids {
        let video = dataset.load_by_id(id)?;
        let set = build_bidirectional_trajectories(&video)?;
        write_json_line(&mut *out, &TrajectorySetJson::new(id, &set))?;
    }
    out.flush().map_err(|e| Error::io("<output>", e))
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    if !(args.epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let report = GradCheckFixture::new(args.seed)?.run(args.epsilon, args.tolerance)?;
    let mut stdout = output(None)?;
    write_json_line(&mut *stdout, &report)?;
    stdout.flush().map_err(|e| Error::io("<stdout>", e))?;
    let bad = report.offending();
    if bad.is_empty() {
        Ok(())
    } else {
        let names: Vec<String> = bad.iter().map(|g| format!("{} ({:.3e})", g.name, g.max_rel_error)).collect();
        Err(Error::Numeric(format!(
            "gradient check above tolerance {}: {}",
            args.tolerance,
            names.join(", ")
        )))
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: args.seed,
        num_videos: args.videos,
        frames: args.frames,
        regions: args.regions,
        height: args.height,
        width: args.width,
        channels: args.channels,
        appearance: args.appearance,
        identities: args.identities,
        sentences_per_video: 1,
    };
    let corpus = synthesize_dataset(&args.out, &spec)?;
    let config = TrainConfig {
        frames: spec.frames,
        regions: spec.regions,
        clusters: 8,
        hidden: 64,
        embed: 32,
        attention: 32,
        batch_size: spec.num_videos.min(16),
        learning_rate: 1e-3,
        dropout: 0.0,
        max_steps: 300,
        ..TrainConfig::default()
    };
    let config_path = args.out.join("config.json");
    let text = serde_json::to_string_pretty(&config).map_err(|e| Error::json(&config_path, e))?;
    fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;
    let mut stdout = output(None)?;
    write_json_line(
        &mut *stdout,
        &serde_json::json!({
            "manifest": corpus.manifest_path,
            "captions": corpus.captions_path,
            "config": config_path,
            "videos": corpus.records.len(),
        }),
    )?;
    stdout.flush().map_err(|e| Error::io("<stdout>", e))
}
