use ndarray::{s, Array2, IxDyn};
use rand::Rng;

use super::VideoRecord;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// A chunk of `T_s` frames with per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub video_id: String,
    pub start_frame: usize,
    /// `[3, T_s, H, W]`
    pub frames: Tensor,
    /// `[T_s, K]`, weights in `[0, 1]`.
    pub labels: Array2<f64>,
    /// Frames `[valid_len, T_s)` are zero padding.
    pub valid_len: usize,
}

impl VideoClip {
    pub fn clip_len(&self) -> usize {
        self.labels.nrows()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.clip_len()).map(|t| t < self.valid_len).collect()
    }
}

fn cut(record: &VideoRecord, start: usize, clip_len: usize, dilation: usize) -> VideoClip {
    let n = record.num_frames();
    let end = (start + clip_len).min(n);
    let valid_len = end - start;
    let (h, w) = (record.frames.shape()[2], record.frames.shape()[3]);
    let mut frames = Tensor::zeros(IxDyn(&[3, clip_len, h, w]));
    frames
        .slice_mut(s![.., 0..valid_len, .., ..])
        .assign(&record.frames.slice(s![.., start..end, .., ..]).mapv(f64::from));
    let mut labels = Array2::zeros((clip_len, record.num_classes));
    for e in &record.events {
        let lo = e.frame.saturating_sub(dilation).max(start);
        let hi = (e.frame + dilation + 1).min(end);
        for t in lo..hi {
            labels[[t - start, e.class_id]] = 1.0;
        }
    }
    VideoClip {
        video_id: record.video_id.clone(),
        start_frame: start,
        frames,
        labels,
        valid_len,
    }
}

/// Clips with start frames drawn uniformly from `[0, N - T_s]`. Videos
/// shorter than `T_s` give clips starting at 0 with zero padding.
pub fn sample_training_clips<R: Rng + ?Sized>(
    record: &VideoRecord,
    clips_per_video: usize,
    clip_len: usize,
    dilation: usize,
    rng: &mut R,
) -> Result<Vec<VideoClip>> {
    if clip_len == 0 {
        return Err(Error::config("clip_len", "must be >= 1"));
    }
    let max_start = record.num_frames().saturating_sub(clip_len);
    Ok((0..clips_per_video)
        .map(|_| {
            let start = rng.random_range(0..=max_start);
            cut(record, start, clip_len, dilation)
        })
        .collect())
}

/// Half-overlapping windows starting at `0, T_s/2, T_s, ...` until the video
/// is covered; the last window is zero padded when it runs past the end.
pub fn evaluation_windows(record: &VideoRecord, clip_len: usize) -> Result<Vec<VideoClip>> {
    if clip_len == 0 || clip_len % 2 != 0 {
        return Err(Error::config(
            "clip_len",
            format!("evaluation needs an even clip length, got {clip_len}"),
        ));
    }
    let n = record.num_frames();
    let hop = clip_len / 2;
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        windows.push(cut(record, start, clip_len, 0));
        if start + clip_len >= n {
            break;
        }
        start += hop;
    }
    Ok(windows)
}
