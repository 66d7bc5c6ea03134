//! Frame-level average precision and time-to-accident metrics.
//!
//! A frame is predicted positive when its score is `>=` the threshold.
//! Every frame of a video carries the video's label when pooled for AP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A per-frame risk trace with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredVideo {
    pub probs: Vec<f64>,
    pub label: u8,
    /// Onset frame, positives only.
    pub tau: Option<usize>,
    pub fps: f64,
}

impl ScoredVideo {
    pub fn new(probs: Vec<f64>, label: u8, tau: Option<usize>, fps: f64) -> Result<Self> {
        let v = Self { probs, label, tau, fps };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() {
            return Err(Error::input("empty risk trace"));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::input(format!("probability {p} outside [0, 1]")));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::input(format!("fps must be positive, got {}", self.fps)));
        }
        match (self.label, self.tau) {
            (0, None) => Ok(()),
            (1, Some(t)) if t < self.probs.len() => Ok(()),
            (l, t) => Err(Error::input(format!(
                "inconsistent label {l} / onset {t:?} for a trace of {} frames",
                self.probs.len()
            ))),
        }
    }

    pub fn duration(&self) -> f64 {
        self.probs.len() as f64 / self.fps
    }
}

fn check_pairs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::input(format!("labels must be 0 or 1, got {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("NaN score"));
    }
    Ok(())
}

/// Precision and recall at `threshold`. Precision is 1 with no positive
/// predictions; recall is 0 with no positive labels.
pub fn precision_recall(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    check_pairs(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    Ok((p, r))
}

/// Step-integrated area under the precision-recall curve. Equal scores form
/// a single threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::input("average precision is undefined without positives"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Seconds between the earliest frame `t <= tau` with `probs[t] >= threshold`
/// and the onset. Zero if no frame crosses.
pub fn tta(video: &ScoredVideo, threshold: f64) -> Result<f64> {
    let tau = match (video.label, video.tau) {
        (1, Some(t)) => t,
        _ => return Err(Error::input("time-to-accident needs a positive video")),
    };
    if tau >= video.probs.len() {
        return Err(Error::input(format!(
            "onset {tau} outside trace of {} frames",
            video.probs.len()
        )));
    }
    Ok(video.probs[..=tau]
        .iter()
        .position(|&p| p >= threshold)
        .map_or(0.0, |t| (tau - t) as f64 / video.fps))
}

/// Thresholds 0.01, 0.02, ..., 0.99.
pub fn default_grid() -> Vec<f64> {
    (1..100).map(|k| k as f64 / 100.0).collect()
}

/// Mean TTA over `videos` at each grid threshold.
pub fn tta_curve(videos: &[ScoredVideo], grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::input("empty threshold grid"));
    }
    if videos.is_empty() {
        return Err(Error::input("mTTA needs at least one positive video"));
    }
    grid.iter()
        .map(|&thr| {
            let sum = videos.iter().map(|v| tta(v, thr)).sum::<Result<f64>>()?;
            Ok(sum / videos.len() as f64)
        })
        .collect()
}

/// Mean over the grid of the per-threshold mean TTA.
pub fn mtta(videos: &[ScoredVideo], grid: &[f64]) -> Result<f64> {
    let curve = tta_curve(videos, grid)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub videos: usize,
    pub positive_videos: usize,
    pub negative_videos: usize,
    pub frames: usize,
    pub positive_frames: usize,
}

/// Summary of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    /// Seconds.
    pub mtta: f64,
    pub thresholds: Vec<f64>,
    /// Mean TTA over positive videos, one per threshold.
    pub per_threshold_tta: Vec<f64>,
    /// `[positive video][threshold]` TTA in seconds.
    pub per_video_tta: Vec<Vec<f64>>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// AP over all pooled frames and mTTA over the positive videos.
pub fn evaluate(videos: &[ScoredVideo], grid: &[f64]) -> Result<EvalReport> {
    for v in videos {
        v.validate()?;
    }
    let positives: Vec<ScoredVideo> = videos.iter().filter(|v| v.label == 1).cloned().collect();
    if positives.is_empty() || positives.len() == videos.len() {
        return Err(Error::input(
            "evaluation needs at least one positive and one negative video",
        ));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for v in videos {
        scores.extend_from_slice(&v.probs);
        labels.extend(std::iter::repeat_n(v.label, v.probs.len()));
    }
    let ap = average_precision(&scores, &labels)?;
    let per_threshold_tta = tta_curve(&positives, grid)?;
    let mtta = per_threshold_tta.iter().sum::<f64>() / per_threshold_tta.len() as f64;
    let per_video_tta = positives
        .iter()
        .map(|v| grid.iter().map(|&thr| tta(v, thr)).collect())
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        ap,
        mtta,
        thresholds: grid.to_vec(),
        per_threshold_tta,
        per_video_tta,
        counts: EvalCounts {
            videos: videos.len(),
            positive_videos: positives.len(),
            negative_videos: videos.len() - positives.len(),
            frames: scores.len(),
            positive_frames: labels.iter().filter(|&&l| l == 1).count(),
        },
    })
}
