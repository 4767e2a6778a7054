//! Synthetic event videos with exact frame annotations.
//!
//! Every class has a fixed visual signature: a small pattern in one colour
//! channel that travels across the frame and is brightest exactly on the
//! event frame. For class `c`:
//!
//! | property  | rule          | values                                   |
//! |-----------|---------------|------------------------------------------|
//! | channel   | `c % 3`       | R, G, B                                  |
//! | shape     | `(c / 3) % 4` | filled 3x3 square, plus, X, 1x3 bar       |
//! | motion    | `(c / 12) % 2`| left to right, top to bottom             |
//!
//! At offset `d` frames from the event the pattern is drawn with amplitude
//! `1 - |d| / 4` for `|d| <= 3`, shifted by `d` pixels along its motion axis.
//! Backgrounds are a slowly drifting sinusoidal texture plus Gaussian noise,
//! and all intensities are clamped to `[0, 1]`.

mod clips;
mod store;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use clips::{evaluation_windows, sample_training_clips, VideoClip};
pub use store::{load_dataset, save_dataset, Dataset, Manifest, ManifestVideo, Split, VideoAnnotations};

use crate::error::{Error, Result};

/// Frames on either side of an event that carry its signature.
pub const SIGNATURE_RADIUS: usize = 3;

/// Signature amplitude at the event frame. Background stays below 0.45, so
/// the peak frame is never clipped at 1.
pub const SIGNATURE_PEAK: f64 = 0.5;

/// Nominal frame rate written to annotation files.
pub const NOMINAL_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 40,
            val: 10,
            test: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Expected number of events per video for each class.
    pub class_rates: Vec<f64>,
    pub min_event_gap: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub class_names: Option<Vec<String>>,
    pub splits: SplitCounts,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_videos: 60,
            frames_per_video: 256,
            height: 8,
            width: 8,
            num_classes: 3,
            class_rates: vec![10.0, 3.0, 1.0],
            min_event_gap: 12,
            noise_std: 0.05,
            seed: 7,
            class_names: None,
            splits: SplitCounts::default(),
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("dataset.{f}");
        if self.num_videos == 0 {
            return Err(Error::config(field("num_videos"), "must be >= 1"));
        }
        if self.frames_per_video == 0 {
            return Err(Error::config(field("frames_per_video"), "must be >= 1"));
        }
        if self.height == 0 {
            return Err(Error::config(field("height"), "must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::config(field("width"), "must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config(field("num_classes"), "must be >= 1"));
        }
        if self.class_rates.len() != self.num_classes {
            return Err(Error::config(
                field("class_rates"),
                format!("{} rates for {} classes", self.class_rates.len(), self.num_classes),
            ));
        }
        if self.class_rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config(field("class_rates"), "rates must be finite and >= 0"));
        }
        if !self.class_rates.iter().any(|&r| r > 0.0) {
            return Err(Error::config(field("class_rates"), "at least one rate must be > 0"));
        }
        if self.min_event_gap == 0 {
            return Err(Error::config(field("min_event_gap"), "must be >= 1"));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::config(field("noise_std"), "must be finite and >= 0"));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::config(
                    field("class_names"),
                    format!("{} names for {} classes", names.len(), self.num_classes),
                ));
            }
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != names.len() || names.iter().any(|n| n.is_empty() || n.contains(',')) {
                return Err(Error::config(
                    field("class_names"),
                    "names must be unique, non-empty, without commas",
                ));
            }
        }
        let s = &self.splits;
        if s.train + s.val + s.test != self.num_videos {
            return Err(Error::config(
                field("splits"),
                format!(
                    "train {} + val {} + test {} does not equal num_videos {}",
                    s.train, s.val, s.test, self.num_videos
                ),
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.num_classes).map(|c| format!("class_{c}")).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Event {
    pub frame: usize,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub num_classes: usize,
    /// `[3, N, H, W]`, values in `[0, 1]`.
    pub frames: Array4<f32>,
    /// Sorted by frame.
    pub events: Vec<Event>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Vec<VideoRecord>> {
    spec.validate()?;
    Ok((0..spec.num_videos).map(|i| generate_video(spec, i)).collect())
}

/// One video, seeded from `(spec.seed, index)` only.
pub fn generate_video(spec: &SyntheticDatasetSpec, index: usize) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let events = place_events(spec, &mut rng);
    let frames = render(spec, &events, &mut rng);
    VideoRecord {
        video_id: video_id(index),
        num_classes: spec.num_classes,
        frames,
        events,
    }
}

fn place_events(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Event> {
    let mut wanted = Vec::new();
    for (c, &rate) in spec.class_rates.iter().enumerate() {
        if rate > 0.0 {
            let n = rate.floor() as usize + usize::from(rng.random_bool(rate.fract()));
            wanted.extend(std::iter::repeat(c).take(n));
        }
    }
    wanted.shuffle(rng);
    let n = spec.frames_per_video;
    let mut events: Vec<Event> = Vec::with_capacity(wanted.len());
    for class_id in wanted {
        // Events that cannot be placed after many tries are dropped.
        for _ in 0..1000 {
            let frame = rng.random_range(0..n);
            if events.iter().all(|e| e.frame.abs_diff(frame) >= spec.min_event_gap) {
                events.push(Event { frame, class_id });
                break;
            }
        }
    }
    events.sort();
    events
}

fn shape_mask(shape: usize, dy: isize, dx: isize) -> bool {
    match shape {
        0 => true,
        1 => dy == 0 || dx == 0,
        2 => dy == dx || dy == -dx,
        _ => dy == 0,
    }
}

fn render(spec: &SyntheticDatasetSpec, events: &[Event], rng: &mut ChaCha8Rng) -> Array4<f32> {
    let (n, h, w) = (spec.frames_per_video, spec.height, spec.width);
    let tau = std::f64::consts::TAU;
    let fy = rng.random_range(0.5..1.5);
    let fx = rng.random_range(0.5..1.5);
    let speed = rng.random_range(0.01..0.05);
    let phases: [f64; 3] = [
        rng.random_range(0.0..tau),
        rng.random_range(0.0..tau),
        rng.random_range(0.0..tau),
    ];
    let levels: [f64; 3] = [
        rng.random_range(0.15..0.35),
        rng.random_range(0.15..0.35),
        rng.random_range(0.15..0.35),
    ];
    let mut frames = vec![0.0f64; 3 * n * h * w];
    for ch in 0..3 {
        for t in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let arg = tau * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                        + speed * tau * t as f64
                        + phases[ch];
                    frames[((ch * n + t) * h + y) * w + x] = levels[ch] + 0.1 * arg.sin();
                }
            }
        }
    }
    let r = SIGNATURE_RADIUS as isize;
    for e in events {
        let ch = e.class_id % 3;
        let shape = (e.class_id / 3) % 4;
        let vertical = (e.class_id / 12) % 2 == 1;
        let cy = rng.random_range(0..h) as isize;
        let cx = rng.random_range(0..w) as isize;
        for d in -r..=r {
            let t = e.frame as isize + d;
            if t < 0 || t >= n as isize {
                continue;
            }
            let amp = SIGNATURE_PEAK * (1.0 - d.abs() as f64 / 4.0);
            let (py, px) = if vertical { (cy + d, cx) } else { (cy, cx + d) };
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (y, x) = (py + dy, px + dx);
                    if !shape_mask(shape, dy, dx) || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    frames[((ch * n + t as usize) * h + y as usize) * w + x as usize] += amp;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).unwrap();
        for v in frames.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    let frames: Vec<f32> = frames.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Array4::from_shape_vec((3, n, h, w), frames).unwrap()
}

/// 64-bit FNV-1a, used for stable split assignment.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Assign splits by sorting video ids on a seeded hash: the first
/// `splits.train` go to training, the next `splits.val` to validation.
pub fn assign_splits(ids: &[String], seed: u64, splits: &SplitCounts) -> Vec<Split> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (fnv1a(format!("{seed}:{}", ids[i]).as_bytes()), i));
    let mut out = vec![Split::Test; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < splits.train {
            Split::Train
        } else if rank < splits.train + splits.val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_names_fields() {
        let bad = [
            (
                SyntheticDatasetSpec {
                    num_classes: 0,
                    ..Default::default()
                },
                "dataset.num_classes",
            ),
            (
                SyntheticDatasetSpec {
                    class_rates: vec![1.0, -1.0, 0.0],
                    ..Default::default()
                },
                "dataset.class_rates",
            ),
            (
                SyntheticDatasetSpec {
                    class_rates: vec![0.0; 3],
                    ..Default::default()
                },
                "dataset.class_rates",
            ),
            (
                SyntheticDatasetSpec {
                    class_rates: vec![1.0],
                    ..Default::default()
                },
                "dataset.class_rates",
            ),
            (
                SyntheticDatasetSpec {
                    min_event_gap: 0,
                    ..Default::default()
                },
                "dataset.min_event_gap",
            ),
            (
                SyntheticDatasetSpec {
                    num_videos: 59,
                    ..Default::default()
                },
                "dataset.splits",
            ),
        ];
        for (spec, expected) in bad {
            match spec.validate() {
                Err(Error::Config { field, .. }) => assert_eq!(field, expected),
                other => panic!("expected config error on {expected}, got {other:?}"),
            }
        }
        SyntheticDatasetSpec::default().validate().unwrap();
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticDatasetSpec {
            num_videos: 3,
            splits: SplitCounts {
                train: 1,
                val: 1,
                test: 1,
            },
            frames_per_video: 64,
            ..Default::default()
        };
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
        let other = SyntheticDatasetSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(generate_dataset(&spec).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn events_respect_bounds_and_gap() {
        let spec = SyntheticDatasetSpec::default();
        for v in generate_dataset(&spec).unwrap() {
            assert!(v.frames.iter().all(|&x| (0.0..=1.0).contains(&x)));
            for pair in v.events.windows(2) {
                assert!(pair[1].frame - pair[0].frame >= spec.min_event_gap);
            }
            assert!(v.events.iter().all(|e| e.frame < v.num_frames() && e.class_id < 3));
        }
    }

    #[test]
    fn signature_peaks_on_event_frame() {
        let spec = SyntheticDatasetSpec {
            noise_std: 0.0,
            num_videos: 1,
            splits: SplitCounts {
                train: 1,
                val: 0,
                test: 0,
            },
            ..Default::default()
        };
        let v = generate_video(&spec, 0);
        let e = v
            .events
            .iter()
            .find(|e| e.frame >= 4 && e.frame + 4 < v.num_frames())
            .unwrap();
        let ch = e.class_id % 3;
        let energy = |t: usize| {
            v.frames
                .index_axis(ndarray::Axis(0), ch)
                .index_axis(ndarray::Axis(0), t)
                .sum()
        };
        let base = energy(e.frame - 4).max(energy(e.frame + 4));
        assert!(energy(e.frame) > base);
    }

    #[test]
    fn splits_have_exact_counts() {
        let ids: Vec<String> = (0..60).map(video_id).collect();
        let splits = assign_splits(&ids, 7, &SplitCounts::default());
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (40, 10, 10)
        );
    }
}
