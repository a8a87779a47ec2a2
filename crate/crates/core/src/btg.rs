//! Bidirectional temporal graph over detected object regions.
//!
//! Regions in an anchor frame (the first frame for the forward graph, the
//! last frame for the backward graph) define object identities. Every other
//! frame is aligned to those anchors by nearest-neighbour search on a
//! closed-form similarity that mixes appearance distance, box overlap and
//! box area ratio.
//!
//! Indices are 0-based throughout the library; the JSON trace format is
//! 1-based.

use serde::{Deserialize, Serialize};

use crate::aggregation::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_max <= x_min || y_max <= y_min {
            return Err(Error::invalid(format!(
                "degenerate bounding box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRegion {
    pub bbox: BoundingBox,
    /// Pooled descriptor used for the appearance term.
    pub appearance: Vec<f64>,
    /// Local convolutional features consumed by the VLAD encoder.
    pub feature_map: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    /// 1-based position of the frame in the sampled sequence.
    pub frame_index: usize,
    pub regions: Vec<ObjectRegion>,
    pub global_feature_map: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub frames: Vec<FrameDetections>,
}

impl VideoSample {
    /// Checks frame ordering and that region counts and feature shapes agree
    /// across the whole video.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::invalid(format!("video {} has no frames", self.video_id)))?;
        let n = first.regions.len();
        if n == 0 {
            return Err(Error::invalid(format!(
                "video {} has frames without regions",
                self.video_id
            )));
        }
        let g = first.regions[0].appearance.len();
        let shape = first.global_feature_map.shape();
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.frame_index != t + 1 {
                return Err(Error::invalid(format!(
                    "video {}: frame at position {} has index {}",
                    self.video_id,
                    t + 1,
                    frame.frame_index
                )));
            }
            if frame.regions.len() != n {
                return Err(Error::invalid(format!(
                    "video {}: frame {} has {} regions, expected {n}",
                    self.video_id,
                    frame.frame_index,
                    frame.regions.len()
                )));
            }
            if frame.global_feature_map.shape() != shape {
                return Err(Error::invalid(format!(
                    "video {}: frame {} feature map shape differs",
                    self.video_id, frame.frame_index
                )));
            }
            for region in &frame.regions {
                if region.appearance.len() != g || region.feature_map.shape() != shape {
                    return Err(Error::invalid(format!(
                        "video {}: inconsistent region feature shapes in frame {}",
                        self.video_id, frame.frame_index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_regions(&self) -> usize {
        self.frames.first().map_or(0, |f| f.regions.len())
    }

    /// The same video with frame order reversed and frames renumbered.
    pub fn reversed(&self) -> VideoSample {
        let frames = self
            .frames
            .iter()
            .rev()
            .enumerate()
            .map(|(t, f)| FrameDetections {
                frame_index: t + 1,
                ..f.clone()
            })
            .collect();
        VideoSample {
            video_id: self.video_id.clone(),
            frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Step {
    /// 0-based frame position.
    pub frame: usize,
    /// 0-based region index within that frame.
    pub region: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub anchor: usize,
    pub direction: Direction,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectorySet {
    pub forward: Vec<Trajectory>,
    pub backward: Vec<Trajectory>,
    pub frame_forward: Vec<usize>,
    pub frame_backward: Vec<usize>,
}

impl TrajectorySet {
    pub fn objects(&self, direction: Direction) -> &[Trajectory] {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    pub fn frames(&self, direction: Direction) -> &[usize] {
        match direction {
            Direction::Forward => &self.frame_forward,
            Direction::Backward => &self.frame_backward,
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `exp(-L2(g_i, g_j) / max_pair_distance)`, or 1 when the normalizer is 0.
pub fn appearance_similarity(g_i: &[f64], g_j: &[f64], max_pair_distance: f64) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(Error::invalid(format!(
            "appearance dimension mismatch: {} vs {}",
            g_i.len(),
            g_j.len()
        )));
    }
    if max_pair_distance <= 0.0 {
        return Ok(1.0);
    }
    Ok((-euclidean(g_i, g_j) / max_pair_distance).exp())
}

pub fn iou_similarity(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter / union
}

pub fn area_similarity(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    (-(aa.min(ab) / aa.max(ab) - 1.0).abs()).exp()
}

/// Mean of the appearance, overlap and area terms.
pub fn region_similarity(
    r_i: &ObjectRegion,
    r_j: &ObjectRegion,
    max_pair_distance: f64,
) -> Result<f64> {
    let app = appearance_similarity(&r_i.appearance, &r_j.appearance, max_pair_distance)?;
    let iou = iou_similarity(&r_i.bbox, &r_j.bbox);
    let area = area_similarity(&r_i.bbox, &r_j.bbox);
    Ok((app + iou + area) / 3.0)
}

/// Largest appearance distance over all region pairs drawn from two frames.
pub fn max_pair_distance(a: &FrameDetections, b: &FrameDetections) -> f64 {
    let mut max = 0.0f64;
    for ra in &a.regions {
        for rb in &b.regions {
            max = max.max(euclidean(&ra.appearance, &rb.appearance));
        }
    }
    max
}

/// Nearest-neighbour alignment: for each anchor region, the index of the most
/// similar region in `other`. Ties resolve to the lowest index and several
/// anchors may share a region.
pub fn align_to_anchors(anchor: &FrameDetections, other: &FrameDetections) -> Result<Vec<usize>> {
    let norm = max_pair_distance(anchor, other);
    anchor
        .regions
        .iter()
        .map(|a| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (j, candidate) in other.regions.iter().enumerate() {
                let s = region_similarity(a, candidate, norm)?;
                if s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            Ok(best)
        })
        .collect()
}

fn anchored_trajectories(
    video: &VideoSample,
    anchor_pos: usize,
    direction: Direction,
) -> Result<Vec<Trajectory>> {
    let anchor = &video.frames[anchor_pos];
    let n = anchor.regions.len();
    let t_len = video.frames.len();
    let mut per_frame: Vec<Vec<usize>> = Vec::with_capacity(t_len);
    for (t, frame) in video.frames.iter().enumerate() {
        if t == anchor_pos {
            per_frame.push((0..n).collect());
        } else {
            per_frame.push(align_to_anchors(anchor, frame)?);
        }
    }
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..t_len).collect(),
        Direction::Backward => (0..t_len).rev().collect(),
    };
    Ok((0..n)
        .map(|i| Trajectory {
            anchor: i,
            direction,
            steps: order
                .iter()
                .map(|&t| Step {
                    frame: t,
                    region: per_frame[t][i],
                })
                .collect(),
        })
        .collect())
}

/// Forward trajectories anchor on the first frame, backward ones on the last.
pub fn build_bidirectional_trajectories(video: &VideoSample) -> Result<TrajectorySet> {
    video.validate()?;
    let t_len = video.frames.len();
    Ok(TrajectorySet {
        forward: anchored_trajectories(video, 0, Direction::Forward)?,
        backward: anchored_trajectories(video, t_len - 1, Direction::Backward)?,
        frame_forward: (0..t_len).collect(),
        frame_backward: (0..t_len).rev().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryJson {
    pub anchor: usize,
    pub steps: Vec<[usize; 2]>,
}

/// Wire form of a trajectory set; all indices 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySetJson {
    pub video_id: String,
    pub forward: Vec<TrajectoryJson>,
    pub backward: Vec<TrajectoryJson>,
}

impl TrajectorySetJson {
    pub fn new(video_id: &str, set: &TrajectorySet) -> Self {
        let convert = |ts: &[Trajectory]| {
            ts.iter()
                .map(|t| TrajectoryJson {
                    anchor: t.anchor + 1,
                    steps: t.steps.iter().map(|s| [s.frame + 1, s.region + 1]).collect(),
                })
                .collect()
        };
        TrajectorySetJson {
            video_id: video_id.to_string(),
            forward: convert(&set.forward),
            backward: convert(&set.backward),
        }
    }
}
