//! On-disk datasets, caption preprocessing and the synthetic corpus.
//!
//! A dataset is a `manifest.json` listing one entry per video. Each entry
//! points at three files relative to the dataset root:
//!
//! * frame features: `T×H×W×D` little-endian `f32`, row-major;
//! * region features: one `H×W×D` block per detection, frames in order and
//!   detections in metadata order;
//! * region metadata: JSON with the frame size and, per frame, the list of
//!   detections (`box`, `confidence`, `appearance`).
//!
//! Frames with fewer than `N` detections are padded on load by repeating the
//! most confident detection; a frame with none gets a whole-frame box that
//! reuses the global feature map and its spatial mean as appearance.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::FeatureMap;
use crate::btg::{BoundingBox, FrameDetections, ObjectRegion, VideoSample};
use crate::decoder::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub sentences: Vec<String>,
}

/// Reserved tokens, then every word seen at least `min_count` times ordered
/// by descending frequency and then lexicographically.
pub fn build_vocabulary(records: &[CaptionRecord], min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for record in records {
        for sentence in &record.sentences {
            for tok in tokenize(sentence) {
                any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::new(words.into_iter().map(|(w, _)| w)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub video_id: String,
    /// `max_len + 2` tokens: BOS, words, EOS, PAD...
    pub tokens: Vec<usize>,
    /// `max_len + 1` flags, one per predicted position.
    pub mask: Vec<bool>,
}

pub fn encode_sentence(vocab: &Vocabulary, words: &[String], max_len: usize) -> Option<Vec<usize>> {
    if words.len() > max_len {
        return None;
    }
    let mut tokens = Vec::with_capacity(max_len + 2);
    tokens.push(BOS);
    tokens.extend(words.iter().map(|w| vocab.encode(w)));
    tokens.push(EOS);
    Some(tokens)
}

/// Drops sentences longer than `max_len` words, wraps the rest in BOS/EOS
/// and pads to a common length.
pub fn prepare_training_sentences(
    records: &[CaptionRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<EncodedSentence> {
    let mut out = Vec::new();
    for record in records {
        for sentence in &record.sentences {
            let words = tokenize(sentence);
            let Some(mut tokens) = encode_sentence(vocab, &words, max_len) else {
                continue;
            };
            let predicted = tokens.len() - 1;
            tokens.resize(max_len + 2, PAD);
            let mask = (0..max_len + 1).map(|l| l < predicted).collect();
            out.push(EncodedSentence {
                video_id: record.video_id.clone(),
                tokens,
                mask,
            });
        }
    }
    out
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// One video id per non-empty line.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_split(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    if !ids.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "D")]
    pub channels: usize,
    #[serde(rename = "G")]
    pub appearance: usize,
    #[serde(rename = "N")]
    pub regions: usize,
    pub frame_features: String,
    pub region_features: String,
    pub region_metadata: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    /// Dataset root, relative to the manifest's directory when not absolute.
    #[serde(default = "default_root")]
    pub root: String,
    pub videos: Vec<ManifestEntry>,
}

fn default_root() -> String {
    ".".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetadata {
    /// `[width, height]` in pixels.
    pub frame_size: [f64; 2],
    pub frames: Vec<FrameMetadata>,
}

/// A validated manifest; videos are read from disk on request.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: FeatureManifest,
    metadata: Vec<RegionMetadata>,
    by_id: HashMap<String, usize>,
}

fn read_f32_file(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::data(
            path,
            format!("expected {} bytes ({expected} f32 values), found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect()
}

/// Opens and validates a manifest: shapes, file sizes and metadata.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: FeatureManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let root = base.join(&manifest.root);
    let mut metadata = Vec::with_capacity(manifest.videos.len());
    let mut by_id = HashMap::new();
    for (i, entry) in manifest.videos.iter().enumerate() {
        if by_id.insert(entry.video_id.clone(), i).is_some() {
            return Err(Error::data(path, format!("duplicate video id {}", entry.video_id)));
        }
        let dims = [entry.frames, entry.height, entry.width, entry.channels, entry.appearance, entry.regions];
        if dims.contains(&0) {
            return Err(Error::data(path, format!("video {} declares a zero dimension", entry.video_id)));
        }
        let meta_path = root.join(&entry.region_metadata);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: RegionMetadata = serde_json::from_str(&meta_text).map_err(|e| Error::json(&meta_path, e))?;
        if meta.frames.len() != entry.frames {
            return Err(Error::data(
                &meta_path,
                format!("{} frames listed, manifest declares {}", meta.frames.len(), entry.frames),
            ));
        }
        for (t, frame) in meta.frames.iter().enumerate() {
            for det in &frame.detections {
                if det.appearance.len() != entry.appearance {
                    return Err(Error::data(
                        &meta_path,
                        format!("frame {}: appearance has {} values, expected {}", t + 1, det.appearance.len(), entry.appearance),
                    ));
                }
                let [x0, y0, x1, y1] = det.bbox;
                BoundingBox::new(x0, y0, x1, y1).map_err(|e| Error::data(&meta_path, format!("frame {}: {e}", t + 1)))?;
            }
            if frame.detections.is_empty() && entry.appearance != entry.channels {
                return Err(Error::data(
                    &meta_path,
                    format!("frame {} has no detections and G != D, cannot derive a fallback appearance", t + 1),
                ));
            }
        }
        let map = entry.height * entry.width * entry.channels;
        for (file, expected) in [
            (&entry.frame_features, entry.frames * map),
            (
                &entry.region_features,
                meta.frames.iter().map(|f| f.detections.len()).sum::<usize>() * map,
            ),
        ] {
            let p = root.join(file);
            let len = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
            if len != (expected * 4) as u64 {
                return Err(Error::data(
                    &p,
                    format!("expected {} bytes ({expected} f32 values), found {len}", expected * 4),
                ));
            }
        }
        metadata.push(meta);
    }
    Ok(Dataset {
        root,
        manifest,
        metadata,
        by_id,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.videos.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.videos
    }

    pub fn index_of(&self, video_id: &str) -> Option<usize> {
        self.by_id.get(video_id).copied()
    }

    pub fn load_by_id(&self, video_id: &str) -> Result<VideoSample> {
        let idx = self
            .index_of(video_id)
            .ok_or_else(|| Error::invalid(format!("video {video_id} not in manifest")))?;
        self.load_video(idx)
    }

    /// Reads one video and pads every frame to exactly `N` regions.
    pub fn load_video(&self, idx: usize) -> Result<VideoSample> {
        let entry = &self.manifest.videos[idx];
        let meta = &self.metadata[idx];
        let (h, w, d) = (entry.height, entry.width, entry.channels);
        let map = h * w * d;
        let frame_path = self.root.join(&entry.frame_features);
        let frame_values = read_f32_file(&frame_path, entry.frames * map)?;
        let total: usize = meta.frames.iter().map(|f| f.detections.len()).sum();
        let region_path = self.root.join(&entry.region_features);
        let region_values = read_f32_file(&region_path, total * map)?;

        let to_map = |chunk: &[f64], path: &Path| {
            FeatureMap::new(h, w, d, chunk.to_vec()).map_err(|e| Error::data(path, e.to_string()))
        };
        let mut frames = Vec::with_capacity(entry.frames);
        let mut offset = 0;
        for (t, fm) in meta.frames.iter().enumerate() {
            let global = to_map(&frame_values[t * map..(t + 1) * map], &frame_path)?;
            let mut regions = Vec::with_capacity(fm.detections.len());
            for det in &fm.detections {
                let [x0, y0, x1, y1] = det.bbox;
                regions.push((
                    det.confidence,
                    ObjectRegion {
                        bbox: BoundingBox::new(x0, y0, x1, y1)?,
                        appearance: det.appearance.clone(),
                        feature_map: to_map(&region_values[offset * map..(offset + 1) * map], &region_path)?,
                    },
                ));
                offset += 1;
            }
            let regions = pad_regions(regions, entry.regions, &global, meta.frame_size)?;
            frames.push(FrameDetections {
                frame_index: t + 1,
                regions,
                global_feature_map: global,
            });
        }
        let video = VideoSample {
            video_id: entry.video_id.clone(),
            frames,
        };
        video.validate()?;
        Ok(video)
    }
}

/// Brings a frame's detections to exactly `n`: the `n` most confident are
/// kept in their original order, shortfalls repeat the most confident one.
fn pad_regions(
    mut detections: Vec<(f64, ObjectRegion)>,
    n: usize,
    global: &FeatureMap,
    frame_size: [f64; 2],
) -> Result<Vec<ObjectRegion>> {
    if detections.is_empty() {
        let whole = ObjectRegion {
            bbox: BoundingBox::new(0.0, 0.0, frame_size[0], frame_size[1])?,
            appearance: global.spatial_mean(),
            feature_map: global.clone(),
        };
        return Ok(vec![whole; n]);
    }
    if detections.len() > n {
        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| detections[b].0.total_cmp(&detections[a].0).then(a.cmp(&b)));
        let mut keep: Vec<usize> = order[..n].to_vec();
        keep.sort_unstable();
        let mut kept = Vec::with_capacity(n);
        for (i, d) in detections.drain(..).enumerate() {
            if keep.binary_search(&i).is_ok() {
                kept.push(d);
            }
        }
        detections = kept;
    }
    let mut best = 0;
    for (i, d) in detections.iter().enumerate() {
        if d.0 > detections[best].0 {
            best = i;
        }
    }
    let top = detections[best].1.clone();
    let mut regions: Vec<ObjectRegion> = detections.into_iter().map(|(_, r)| r).collect();
    regions.resize(n, top);
    Ok(regions)
}

/// Raw per-video inputs for [`write_video`].
pub struct RawVideo {
    pub video_id: String,
    pub frame_size: [f64; 2],
    pub frame_features: Vec<FeatureMap>,
    /// Per frame: detections with their feature maps.
    pub detections: Vec<Vec<(Detection, FeatureMap)>>,
}

/// Writes one video's files under `root/features/` and returns its entry.
pub fn write_video(root: &Path, video: &RawVideo, regions: usize) -> Result<ManifestEntry> {
    let first = video
        .frame_features
        .first()
        .ok_or_else(|| Error::invalid("video without frames"))?;
    let (h, w, d) = first.shape();
    let g = video
        .detections
        .iter()
        .flatten()
        .map(|(det, _)| det.appearance.len())
        .next()
        .unwrap_or(d);
    let dir = root.join("features");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let entry = ManifestEntry {
        video_id: video.video_id.clone(),
        frames: video.frame_features.len(),
        height: h,
        width: w,
        channels: d,
        appearance: g,
        regions,
        frame_features: format!("features/{}.frames.f32", video.video_id),
        region_features: format!("features/{}.regions.f32", video.video_id),
        region_metadata: format!("features/{}.regions.json", video.video_id),
    };
    let frame_bytes = f32_bytes(video.frame_features.iter().flat_map(|m| m.values.iter().copied()));
    let region_bytes = f32_bytes(
        video
            .detections
            .iter()
            .flatten()
            .flat_map(|(_, m)| m.values.iter().copied()),
    );
    let meta = RegionMetadata {
        frame_size: video.frame_size,
        frames: video
            .detections
            .iter()
            .map(|dets| FrameMetadata {
                detections: dets.iter().map(|(det, _)| det.clone()).collect(),
            })
            .collect(),
    };
    let write = |rel: &str, bytes: &[u8]| {
        let p = root.join(rel);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(&entry.frame_features, &frame_bytes)?;
    write(&entry.region_features, &region_bytes)?;
    let meta_bytes = serde_json::to_vec(&meta).map_err(|e| Error::json(root, e))?;
    write(&entry.region_metadata, &meta_bytes)?;
    Ok(entry)
}

pub fn write_manifest(path: &Path, manifest: &FeatureManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Dimensions of a randomly generated video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoDims {
    pub frames: usize,
    pub regions: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub appearance: usize,
}

/// Video with uniformly random boxes in a 100x100 frame and standard-range
/// features.
pub fn random_video<R: Rng>(video_id: &str, dims: VideoDims, rng: &mut R) -> VideoSample {
    let map = dims.height * dims.width * dims.channels;
    let features = |rng: &mut R| {
        let values = (0..map).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(dims.height, dims.width, dims.channels, values).expect("sized feature map")
    };
    let frames = (0..dims.frames)
        .map(|t| {
            let regions = (0..dims.regions)
                .map(|_| {
                    let x0 = rng.gen_range(0.0..90.0);
                    let y0 = rng.gen_range(0.0..90.0);
                    let bw = rng.gen_range(1.0..(100.0 - x0));
                    let bh = rng.gen_range(1.0..(100.0 - y0));
                    ObjectRegion {
                        bbox: BoundingBox::new(x0, y0, x0 + bw, y0 + bh).expect("positive box"),
                        appearance: (0..dims.appearance).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        feature_map: features(rng),
                    }
                })
                .collect();
            FrameDetections {
                frame_index: t + 1,
                regions,
                global_feature_map: features(rng),
            }
        })
        .collect();
    VideoSample {
        video_id: video_id.to_string(),
        frames,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub frames: usize,
    pub regions: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub appearance: usize,
    /// Size of the pool of planted object identities.
    pub identities: usize,
    pub sentences_per_video: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            num_videos: 5,
            frames: 6,
            regions: 2,
            height: 2,
            width: 2,
            channels: 8,
            appearance: 8,
            identities: 6,
            sentences_per_video: 1,
        }
    }
}

/// Planted truth for one synthetic video, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedVideo {
    pub video_id: String,
    /// `identity[t][j]`: object identity of detection `j` in frame `t`.
    pub identity: Vec<Vec<usize>>,
    /// `forward[i][t]`: region of frame `t` holding the object of anchor `i` (frame 0).
    pub forward: Vec<Vec<usize>>,
    /// `backward[i][t]`: same for anchors in the last frame, `t` in temporal order.
    pub backward: Vec<Vec<usize>>,
    pub subject: usize,
    pub moves_left: bool,
}

pub struct SynthCorpus {
    pub manifest_path: PathBuf,
    pub captions_path: PathBuf,
    pub records: Vec<CaptionRecord>,
    pub planted: Vec<PlantedVideo>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Writes a deterministic corpus to `dir`: manifest, features, captions,
/// train/val/test splits (every video in each) and `ground_truth.json`.
///
/// Each video holds `regions` distinct identities, each in its own
/// horizontal lane so boxes never overlap, drifting slowly left or right.
/// Appearance vectors and region feature maps are fixed per identity plus
/// small noise; detection order is shuffled per frame. The caption names the
/// largest object and the drift direction.
pub fn synthesize_dataset(dir: &Path, spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.regions == 0 || spec.frames == 0 || spec.num_videos == 0 {
        return Err(Error::invalid("synthetic corpus needs videos, frames and regions"));
    }
    if spec.identities < spec.regions {
        return Err(Error::invalid("identity pool smaller than regions per frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, d, g) = (spec.height, spec.width, spec.channels, spec.appearance);
    let map = h * w * d;
    let centers: Vec<Vec<f64>> = (0..spec.identities)
        .map(|_| (0..g).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let patterns: Vec<Vec<f64>> = (0..spec.identities)
        .map(|_| (0..map).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let motion: Vec<f64> = (0..map).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sizes: Vec<f64> = (0..spec.identities).map(|i| 0.5 + 0.4 * (i + 1) as f64 / spec.identities as f64).collect();
    let frame_size = [320.0, 240.0];
    let lane_h = frame_size[1] / spec.regions as f64;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut records = Vec::new();
    let mut planted = Vec::new();
    for v in 0..spec.num_videos {
        let video_id = format!("synth{v:04}");
        let mut pool: Vec<usize> = (0..spec.identities).collect();
        pool.shuffle(&mut rng);
        let objects: Vec<usize> = pool[..spec.regions].to_vec();
        let moves_left = rng.gen_bool(0.5);
        let sign = if moves_left { -1.0 } else { 1.0 };
        let subject = *objects
            .iter()
            .max_by(|&&a, &&b| sizes[a].total_cmp(&sizes[b]))
            .expect("regions > 0");

        // Lane geometry per object slot.
        let geometry: Vec<(f64, f64, f64)> = objects
            .iter()
            .enumerate()
            .map(|(slot, &id)| {
                let bh = lane_h * sizes[id];
                let bw = bh * 1.2;
                let x0 = rng.gen_range(0.2..0.5) * frame_size[0];
                let y0 = slot as f64 * lane_h + (lane_h - bh) / 2.0;
                (x0, y0, bw.min(frame_size[0] * 0.3).max(bh * 0.5))
            })
            .collect();
        let speed = 0.2 / spec.frames.max(2) as f64;

        let mut frame_features = Vec::with_capacity(spec.frames);
        let mut detections = Vec::with_capacity(spec.frames);
        let mut identity = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            let phase = if spec.frames > 1 { t as f64 / (spec.frames - 1) as f64 - 0.5 } else { 0.0 };
            let mut global = vec![0.0; map];
            for &id in &objects {
                for (gv, p) in global.iter_mut().zip(&patterns[id]) {
                    *gv += p / spec.regions as f64;
                }
            }
            for (gv, m) in global.iter_mut().zip(&motion) {
                *gv = f32_round(*gv + sign * phase * m + rng.gen_range(-0.02..0.02));
            }
            frame_features.push(FeatureMap::new(h, w, d, global)?);

            let mut order: Vec<usize> = (0..spec.regions).collect();
            order.shuffle(&mut rng);
            let mut frame_dets = Vec::with_capacity(spec.regions);
            let mut frame_ids = Vec::with_capacity(spec.regions);
            for &slot in &order {
                let id = objects[slot];
                let (x0, y0, bw) = geometry[slot];
                let bh = lane_h * sizes[id];
                let dx = sign * speed * t as f64 * bw;
                let bbox = [
                    f32_round(x0 + dx),
                    f32_round(y0),
                    f32_round(x0 + dx + bw),
                    f32_round(y0 + bh),
                ];
                let appearance = centers[id].iter().map(|c| f32_round(c + rng.gen_range(-0.02..0.02))).collect();
                let fmap = patterns[id].iter().map(|p| f32_round(p + rng.gen_range(-0.05..0.05))).collect();
                frame_dets.push((
                    Detection {
                        bbox,
                        confidence: f32_round(rng.gen_range(0.5..1.0)),
                        appearance,
                    },
                    FeatureMap::new(h, w, d, fmap)?,
                ));
                frame_ids.push(id);
            }
            detections.push(frame_dets);
            identity.push(frame_ids);
        }

        let locate = |t: usize, id: usize| identity[t].iter().position(|&x| x == id).expect("planted id");
        let forward = identity[0]
            .iter()
            .map(|&id| (0..spec.frames).map(|t| locate(t, id)).collect())
            .collect();
        let backward = identity[spec.frames - 1]
            .iter()
            .map(|&id| (0..spec.frames).map(|t| locate(t, id)).collect())
            .collect();

        let raw = RawVideo {
            video_id: video_id.clone(),
            frame_size,
            frame_features,
            detections,
        };
        entries.push(write_video(dir, &raw, spec.regions)?);
        let direction = if moves_left { "left" } else { "right" };
        let mut sentences = vec![format!("the obj{subject} is moving {direction}")];
        let extra = [format!("The obj{subject} moves to the {direction}."), format!("obj{subject} goes {direction}")];
        sentences.extend(extra.into_iter().take(spec.sentences_per_video.saturating_sub(1)));
        records.push(CaptionRecord {
            video_id: video_id.clone(),
            sentences,
        });
        planted.push(PlantedVideo {
            video_id,
            identity,
            forward,
            backward,
            subject,
            moves_left,
        });
    }

    let manifest_path = dir.join("manifest.json");
    write_manifest(
        &manifest_path,
        &FeatureManifest {
            root: default_root(),
            videos: entries,
        },
    )?;
    let captions_path = dir.join("captions.jsonl");
    write_captions(&captions_path, &records)?;
    let splits = dir.join("splits");
    fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    let ids: Vec<String> = records.iter().map(|r| r.video_id.clone()).collect();
    for split in ["train", "val", "test"] {
        write_split(&splits.join(format!("{split}.txt")), &ids)?;
    }
    let gt_path = dir.join("ground_truth.json");
    let gt = serde_json::to_vec_pretty(&planted).map_err(|e| Error::json(&gt_path, e))?;
    fs::write(&gt_path, gt).map_err(|e| Error::io(&gt_path, e))?;
    Ok(SynthCorpus {
        manifest_path,
        captions_path,
        records,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("A man, runs."), vec!["a", "man", "runs"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("HELLO"), vec!["hello"]);
        assert_eq!(tokenize("  it's   a\tdog!! "), vec!["its", "a", "dog"]);
    }

    fn corpus() -> Vec<CaptionRecord> {
        vec![CaptionRecord {
            video_id: "v".into(),
            sentences: vec!["a b".into(), "a".into()],
        }]
    }

    #[test]
    fn vocabulary_from_tiny_corpus() {
        let v = build_vocabulary(&corpus(), 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.tokens()[4..], ["a".to_string(), "b".to_string()]);
        let v2 = build_vocabulary(&corpus(), 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.encode("b"), crate::decoder::UNK);
        assert_eq!(v, build_vocabulary(&corpus(), 1).unwrap());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(build_vocabulary(&[], 1).is_err());
        let blank = [CaptionRecord {
            video_id: "v".into(),
            sentences: vec!["...".into()],
        }];
        assert!(build_vocabulary(&blank, 1).is_err());
    }

    #[test]
    fn sentence_layout_and_filtering() {
        let vocab = Vocabulary::new(["a", "man", "runs"]);
        let long = (0..17).map(|_| "a").collect::<Vec<_>>().join(" ");
        let records = [CaptionRecord {
            video_id: "v".into(),
            sentences: vec!["A man runs".into(), long, "a zebra".into()],
        }];
        let enc = prepare_training_sentences(&records, &vocab, 16);
        assert_eq!(enc.len(), 2);
        let first = &enc[0];
        assert_eq!(first.tokens.len(), 18);
        assert_eq!(&first.tokens[..5], &[BOS, 4, 5, 6, EOS]);
        assert!(first.tokens[5..].iter().all(|&t| t == PAD));
        assert_eq!(first.mask.len(), 17);
        assert_eq!(first.mask.iter().filter(|&&m| m).count(), 4);
        assert!(first.mask[..4].iter().all(|&m| m));
        assert_eq!(enc[1].tokens[2], crate::decoder::UNK);
    }

    #[test]
    fn sixteen_words_are_kept() {
        let vocab = Vocabulary::new(["a"]);
        let s = (0..16).map(|_| "a").collect::<Vec<_>>().join(" ");
        let records = [CaptionRecord {
            video_id: "v".into(),
            sentences: vec![s],
        }];
        let enc = prepare_training_sentences(&records, &vocab, 16);
        assert_eq!(enc.len(), 1);
        assert!(enc[0].mask.iter().all(|&m| m));
        assert_eq!(enc[0].tokens[17], EOS);
    }

    fn det(x0: f64, conf: f64) -> (f64, ObjectRegion) {
        (
            conf,
            ObjectRegion {
                bbox: BoundingBox::new(x0, 0.0, x0 + 1.0, 1.0).unwrap(),
                appearance: vec![x0],
                feature_map: FeatureMap::zeros(1, 1, 1),
            },
        )
    }

    #[test]
    fn padding_repeats_most_confident_detection() {
        let global = FeatureMap::zeros(1, 1, 1);
        let out = pad_regions(vec![det(0.0, 0.3), det(5.0, 0.9)], 4, &global, [10.0, 10.0]).unwrap();
        let xs: Vec<f64> = out.iter().map(|r| r.bbox.x_min).collect();
        assert_eq!(xs, vec![0.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn surplus_detections_keep_most_confident_in_order() {
        let global = FeatureMap::zeros(1, 1, 1);
        let out = pad_regions(vec![det(0.0, 0.3), det(1.0, 0.9), det(2.0, 0.5)], 2, &global, [10.0, 10.0]).unwrap();
        let xs: Vec<f64> = out.iter().map(|r| r.bbox.x_min).collect();
        assert_eq!(xs, vec![1.0, 2.0]);
    }

    #[test]
    fn empty_frame_becomes_whole_frame_regions() {
        let global = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let out = pad_regions(vec![], 2, &global, [32.0, 24.0]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].bbox, BoundingBox::new(0.0, 0.0, 32.0, 24.0).unwrap());
        assert_eq!(out[0].appearance, vec![2.0, 4.0]);
        assert_eq!(out[0].feature_map, global);
    }
}
