//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<video_id>/frames.bin         raw little-endian f32, shape [3, N, H, W]
//! <root>/<video_id>/annotations.json
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{assign_splits, Event, SyntheticDatasetSpec, VideoRecord, NOMINAL_FPS};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.bin";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub video_id: String,
    pub split: Split,
    pub num_frames: usize,
    pub num_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SyntheticDatasetSpec,
    pub fps: f64,
    pub class_names: Vec<String>,
    pub videos: Vec<ManifestVideo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotations {
    pub video_id: String,
    pub fps: f64,
    pub num_frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.videos
            .iter()
            .zip(&self.manifest.videos)
            .filter(|(_, m)| m.split == split)
            .map(|(v, _)| v)
            .collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Write `videos` under `root`, creating it if needed.
pub fn save_dataset(root: &Path, spec: &SyntheticDatasetSpec, videos: &[VideoRecord]) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let class_names = spec.class_names();
    let ids: Vec<String> = videos.iter().map(|v| v.video_id.clone()).collect();
    let splits = assign_splits(&ids, spec.seed, &spec.splits);
    let mut entries = Vec::with_capacity(videos.len());
    for (v, split) in videos.iter().zip(splits) {
        let dir = root.join(&v.video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut bytes = Vec::with_capacity(v.frames.len() * 4);
        for &x in v.frames.as_standard_layout().iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let frames_path = dir.join(FRAMES_FILE);
        fs::write(&frames_path, bytes).map_err(|e| Error::io(&frames_path, e))?;
        let shape = v.frames.shape();
        let ann = VideoAnnotations {
            video_id: v.video_id.clone(),
            fps: NOMINAL_FPS,
            num_frames: shape[1],
            channels: shape[0],
            height: shape[2],
            width: shape[3],
            num_classes: v.num_classes,
            class_names: class_names.clone(),
            events: v.events.clone(),
        };
        write_json(&dir.join(ANNOTATIONS_FILE), &ann)?;
        entries.push(ManifestVideo {
            video_id: v.video_id.clone(),
            split,
            num_frames: shape[1],
            num_events: v.events.len(),
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        fps: NOMINAL_FPS,
        class_names,
        videos: entries,
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
    let k = manifest.class_names.len();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let dir = root.join(&entry.video_id);
        let ann_path = dir.join(ANNOTATIONS_FILE);
        let ann: VideoAnnotations = read_json(&ann_path)?;
        if ann.num_classes != k || ann.channels != 3 || ann.num_frames != entry.num_frames {
            return Err(Error::format(&ann_path, "annotations disagree with the manifest"));
        }
        if let Some(e) = ann.events.iter().find(|e| e.frame >= ann.num_frames || e.class_id >= k) {
            return Err(Error::format(&ann_path, format!("event {e:?} out of range")));
        }
        let frames_path = dir.join(FRAMES_FILE);
        let bytes = fs::read(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
        let expected = 3 * ann.num_frames * ann.height * ann.width;
        if bytes.len() != expected * 4 {
            return Err(Error::format(
                &frames_path,
                format!("expected {} bytes, found {}", expected * 4, bytes.len()),
            ));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let frames = Array4::from_shape_vec((3, ann.num_frames, ann.height, ann.width), values).unwrap();
        let mut events = ann.events;
        events.sort();
        videos.push(VideoRecord {
            video_id: ann.video_id,
            num_classes: k,
            frames,
            events,
        });
    }
    Ok(Dataset { manifest, videos })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_dataset, SplitCounts};

    #[test]
    fn round_trip() {
        let spec = SyntheticDatasetSpec {
            num_videos: 3,
            frames_per_video: 40,
            splits: SplitCounts {
                train: 1,
                val: 1,
                test: 1,
            },
            ..Default::default()
        };
        let videos = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &spec, &videos).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.videos, videos);
        assert_eq!(loaded.split(Split::Val).len(), 1);
    }
}
