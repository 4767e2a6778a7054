//! Tolerance average precision, mAP per tolerance and range-averaged mAP.
//!
//! Matching is greedy in score order (ties by video id, then frame): a
//! prediction claims the nearest unmatched truth of the same video within
//! `δ` frames, preferring the earlier truth on distance ties. AP is the area
//! under the interpolated precision envelope, `Σ (r_k - r_{k-1}) · max_{j≥k} p_j`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spotting::EventPrediction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Individually reported tolerances, in frames.
    pub deltas: Vec<usize>,
    /// Frame rate used to turn the second-based ranges into frames.
    pub range_fps: f64,
    pub tight_seconds: [f64; 2],
    pub loose_seconds: [f64; 2],
    /// Tolerance used for model selection and headline numbers.
    pub primary_delta: usize,
    pub nms_window: usize,
    pub score_threshold: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            deltas: vec![0, 1, 2, 4],
            range_fps: 2.0,
            tight_seconds: [1.0, 4.0],
            loose_seconds: [5.0, 60.0],
            primary_delta: 1,
            nms_window: crate::spotting::DEFAULT_NMS_WINDOW,
            score_threshold: crate::spotting::DEFAULT_SCORE_THRESHOLD,
        }
    }
}

fn frame_range(seconds: [f64; 2], fps: f64) -> Vec<usize> {
    let lo = (seconds[0] * fps).ceil() as usize;
    let hi = (seconds[1] * fps).floor() as usize;
    (lo..=hi).collect()
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_fps > 0.0 && self.range_fps.is_finite()) {
            return Err(Error::config("eval.range_fps", "must be > 0"));
        }
        for (name, r) in [
            ("eval.tight_seconds", self.tight_seconds),
            ("eval.loose_seconds", self.loose_seconds),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) || frame_range(r, self.range_fps).is_empty() {
                return Err(Error::config(
                    name,
                    "must be an increasing range covering at least one frame",
                ));
            }
        }
        if self.nms_window == 0 {
            return Err(Error::config("eval.nms_window", "must be >= 1"));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return Err(Error::config("eval.score_threshold", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn tight_deltas(&self) -> Vec<usize> {
        frame_range(self.tight_seconds, self.range_fps)
    }

    pub fn loose_deltas(&self) -> Vec<usize> {
        frame_range(self.loose_seconds, self.range_fps)
    }

    /// Sorted union of every tolerance the report needs.
    pub fn all_deltas(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .deltas
            .iter()
            .copied()
            .chain([self.primary_delta])
            .chain(self.tight_deltas())
            .chain(self.loose_deltas())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// A scored detection of one class: `(video index, frame, score)`.
pub type Detection = (usize, usize, f64);

fn ranked(detections: &[Detection]) -> Vec<Detection> {
    let mut d = detections.to_vec();
    d.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    d
}

/// True-positive flags in ranking order. `truths[v]` lists the event frames
/// of video `v`.
pub fn match_detections(detections: &[Detection], truths: &[Vec<usize>], delta: usize) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    ranked(detections)
        .iter()
        .map(|&(v, frame, _)| {
            let Some(ts) = truths.get(v) else { return false };
            let mut best: Option<(usize, usize)> = None;
            for (i, &t) in ts.iter().enumerate() {
                let d = t.abs_diff(frame);
                if used[v][i] || d > delta {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bi, bd)) => d < bd || (d == bd && t < ts[bi]),
                };
                if better {
                    best = Some((i, d));
                }
            }
            match best {
                Some((i, _)) => {
                    used[v][i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the interpolated precision-recall curve of ranked flags.
pub fn ap_from_flags(flags: &[bool], num_truths: usize) -> f64 {
    if num_truths == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += usize::from(hit);
            (tp as f64 / num_truths as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    let mut envelope = 0.0f64;
    let mut precision: Vec<f64> = points
        .iter()
        .rev()
        .map(|&(_, p)| {
            envelope = envelope.max(p);
            envelope
        })
        .collect();
    precision.reverse();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for ((r, _), p) in points.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// AP over possibly several videos.
pub fn average_precision_multi(detections: &[Detection], truths: &[Vec<usize>], delta: usize) -> f64 {
    let n: usize = truths.iter().map(Vec::len).sum();
    ap_from_flags(&match_detections(detections, truths, delta), n)
}

/// AP of `(frame, score)` predictions against the truth frames of one video.
pub fn average_precision(predictions: &[(usize, f64)], truths: &[usize], delta: usize) -> f64 {
    let d: Vec<Detection> = predictions.iter().map(|&(f, s)| (0, f, s)).collect();
    average_precision_multi(&d, &[truths.to_vec()], delta)
}

pub fn mean_ap(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Eval("no class has ground-truth events".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Mean of the per-tolerance mAPs over `deltas`.
pub fn range_map(per_delta: &BTreeMap<usize, f64>, deltas: &[usize]) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::Eval("empty tolerance range".into()));
    }
    let mut total = 0.0;
    for d in deltas {
        total += per_delta
            .get(d)
            .ok_or_else(|| Error::Eval(format!("mAP at δ={d} was not computed")))?;
    }
    Ok(total / deltas.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_name: String,
    pub num_truths: usize,
    pub num_predictions: usize,
    /// Classes without truths are reported but left out of every mAP.
    pub included: bool,
    /// AP at each entry of `MetricsReport::deltas`.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eval: EvalSpec,
    pub deltas: Vec<usize>,
    pub classes: Vec<ClassReport>,
    pub map: Vec<f64>,
    pub primary_map: f64,
    pub tight_map: f64,
    pub loose_map: f64,
    pub num_videos: usize,
    pub num_truths: usize,
    pub num_predictions: usize,
}

impl MetricsReport {
    pub fn map_at(&self, delta: usize) -> Option<f64> {
        self.deltas.iter().position(|&d| d == delta).map(|i| self.map[i])
    }

    pub fn class_ap_at(&self, class_id: usize, delta: usize) -> Option<f64> {
        let i = self.deltas.iter().position(|&d| d == delta)?;
        Some(self.classes.get(class_id)?.ap[i])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Score `predictions` against `truths`, a list of `(video_id, events as
/// (frame, class_id))`. Predictions for videos outside `truths` are rejected.
pub fn evaluate(
    predictions: &[EventPrediction],
    truths: &[(String, Vec<(usize, usize)>)],
    class_names: &[String],
    spec: &EvalSpec,
) -> Result<MetricsReport> {
    spec.validate()?;
    let k = class_names.len();
    let index: BTreeMap<&str, usize> = truths.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
    let mut per_class_truths = vec![vec![Vec::new(); truths.len()]; k];
    for (v, (_, events)) in truths.iter().enumerate() {
        for &(frame, c) in events {
            if c >= k {
                return Err(Error::Eval(format!("truth class {c} outside {k} classes")));
            }
            per_class_truths[c][v].push(frame);
        }
    }
    let mut per_class_dets: Vec<Vec<Detection>> = vec![Vec::new(); k];
    for p in predictions {
        let v = *index
            .get(p.video_id.as_str())
            .ok_or_else(|| Error::Eval(format!("prediction for unknown video `{}`", p.video_id)))?;
        if p.class_id >= k {
            return Err(Error::Eval(format!(
                "prediction class {} outside {k} classes",
                p.class_id
            )));
        }
        per_class_dets[p.class_id].push((v, p.frame, p.score));
    }
    let deltas = spec.all_deltas();
    let classes: Vec<ClassReport> = (0..k)
        .map(|c| {
            let n: usize = per_class_truths[c].iter().map(Vec::len).sum();
            ClassReport {
                class_name: class_names[c].clone(),
                num_truths: n,
                num_predictions: per_class_dets[c].len(),
                included: n > 0,
                ap: deltas
                    .iter()
                    .map(|&d| average_precision_multi(&per_class_dets[c], &per_class_truths[c], d))
                    .collect(),
            }
        })
        .collect();
    let map: Vec<f64> = (0..deltas.len())
        .map(|i| {
            let aps: Vec<f64> = classes.iter().filter(|c| c.included).map(|c| c.ap[i]).collect();
            mean_ap(&aps)
        })
        .collect::<Result<_>>()?;
    let per_delta: BTreeMap<usize, f64> = deltas.iter().copied().zip(map.iter().copied()).collect();
    Ok(MetricsReport {
        eval: spec.clone(),
        primary_map: per_delta[&spec.primary_delta],
        tight_map: range_map(&per_delta, &spec.tight_deltas())?,
        loose_map: range_map(&per_delta, &spec.loose_deltas())?,
        deltas,
        classes,
        map,
        num_videos: truths.len(),
        num_truths: truths.iter().map(|(_, e)| e.len()).sum(),
        num_predictions: predictions.len(),
    })
}
