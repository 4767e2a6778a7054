//! Sliding-window score aggregation, Soft-NMS peak extraction and the
//! prediction file.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NMS_WINDOW: usize = 20;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.01;

/// Scores of one evaluation window. Rows with `mask[t] == false` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowScores {
    pub start: usize,
    /// `[T_s, K]`
    pub scores: Array2<f64>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScoreTrack {
    pub video_id: String,
    /// `[N, K]`
    pub scores: Array2<f64>,
    pub coverage: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventPrediction {
    pub video_id: String,
    pub frame: usize,
    pub class_id: usize,
    pub score: f64,
}

/// Mean of every unpadded window score covering each frame.
pub fn aggregate_windows(video_id: &str, num_frames: usize, windows: &[WindowScores]) -> Result<FrameScoreTrack> {
    let k = windows.first().map_or(0, |w| w.scores.ncols());
    let mut sums = Array2::<f64>::zeros((num_frames, k));
    let mut coverage = vec![0usize; num_frames];
    for w in windows {
        if w.scores.ncols() != k || w.mask.len() != w.scores.nrows() {
            return Err(Error::Shape(format!("window at {} has inconsistent shape", w.start)));
        }
        for (t, row) in w.scores.rows().into_iter().enumerate() {
            if !w.mask[t] {
                continue;
            }
            let f = w.start + t;
            if f >= num_frames {
                return Err(Error::Eval(format!("window frame {f} past the end of {video_id}")));
            }
            sums.row_mut(f).zip_mut_with(&row, |s, &v| *s += v);
            coverage[f] += 1;
        }
    }
    if let Some(f) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::Eval(format!(
            "frame {f} of {video_id} is not covered by any window"
        )));
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&coverage) {
        row.mapv_inplace(|s| s / c as f64);
    }
    Ok(FrameScoreTrack {
        video_id: video_id.to_string(),
        scores: sums,
        coverage,
    })
}

/// Soft-NMS over one score column. Returns `(frame, score)` in selection
/// order.
pub fn soft_nms_column(scores: &[f64], window: usize, threshold: f64) -> Vec<(usize, f64)> {
    assert!(window >= 1, "Soft-NMS window must be >= 1");
    let radius = window as f64 / 2.0;
    let mut s = scores.to_vec();
    let mut taken = vec![false; s.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for t in 0..s.len() {
            if !taken[t] && best.map_or(true, |b| s[t] > s[b]) {
                best = Some(t);
            }
        }
        let Some(b) = best else { break };
        let peak = s[b];
        if !(peak >= threshold) || peak <= 0.0 {
            break;
        }
        out.push((b, peak));
        taken[b] = true;
        for (t, v) in s.iter_mut().enumerate() {
            let d = t.abs_diff(b) as f64;
            if d < radius {
                *v *= d / radius;
            }
        }
    }
    out
}

/// Per-class Soft-NMS, predictions sorted by score descending (ties by
/// class, then frame).
pub fn soft_nms(track: &FrameScoreTrack, window: usize, threshold: f64) -> Vec<EventPrediction> {
    let mut out = Vec::new();
    for (c, column) in track.scores.columns().into_iter().enumerate() {
        for (frame, score) in soft_nms_column(&column.to_vec(), window, threshold) {
            out.push(EventPrediction {
                video_id: track.video_id.clone(),
                frame,
                class_id: c,
                score,
            });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.frame.cmp(&b.frame))
    });
    out
}

fn file_order(a: &EventPrediction, b: &EventPrediction) -> Ordering {
    a.video_id
        .cmp(&b.video_id)
        .then(a.class_id.cmp(&b.class_id))
        .then(b.score.total_cmp(&a.score))
        .then(a.frame.cmp(&b.frame))
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    video_id: String,
    frame: usize,
    class_name: String,
    score: f64,
}

/// Write `video_id,frame,class_name,score` rows ordered by video, class and
/// descending score.
pub fn write_predictions(path: &Path, predictions: &[EventPrediction], class_names: &[String]) -> Result<()> {
    let mut sorted: Vec<&EventPrediction> = predictions.iter().collect();
    sorted.sort_by(|a, b| file_order(a, b));
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for p in sorted {
        w.serialize(PredictionRecord {
            video_id: p.video_id.clone(),
            frame: p.frame,
            class_name: class_names[p.class_id].clone(),
            score: p.score,
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path, class_names: &[String]) -> Result<Vec<EventPrediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.deserialize::<PredictionRecord>() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let class_id = class_names
            .iter()
            .position(|n| *n == rec.class_name)
            .ok_or_else(|| Error::format(path, format!("unknown class `{}`", rec.class_name)))?;
        out.push(EventPrediction {
            video_id: rec.video_id,
            frame: rec.frame,
            class_id,
            score: rec.score,
        });
    }
    Ok(out)
}
