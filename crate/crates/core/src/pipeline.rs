//! Training and evaluation loops.
//!
//! Each epoch samples clips from every training video, shuffles them into
//! batches, optionally mixes each clip with a partner from the same batch,
//! and takes one sharpness-aware step per batch on `L_BCE + λ L_SIC`. The
//! memory bank is filled from the unperturbed forward pass of every step.
//! All randomness of epoch `e` comes from a generator derived from
//! `(seed, e)`, so a run resumed from a checkpoint replays exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::checkpoint::{Checkpoint, RunState};
use crate::config::TrainConfig;
use crate::data_synth::{evaluation_windows, sample_training_clips, Dataset, Split, VideoClip, VideoRecord};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, contrastive_queries, mixup, sample_lambda, update_bank, ContrastiveKind, MemoryBank,
};
use crate::metrics::{evaluate, EvalSpec, MetricsReport};
use crate::network::{stack_clips, Model, Network, TemporalRegistry};
use crate::nn::{apply_bn_updates, Mode, Session};
use crate::optim::{lr_at, Evaluation, Optimizer};
use crate::spotting::{aggregate_windows, soft_nms, EventPrediction, FrameScoreTrack, WindowScores};

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RUN_SUMMARY: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub sic: f64,
    pub skipped_steps: u64,
    pub val_map: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub num_parameters: usize,
    pub class_names: Vec<String>,
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_val_map: Option<f64>,
    pub skipped_steps: u64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Batch tensors: frames `[3, B, T, H, W]`, labels `[B, T, K]`, mask `[B, T]`.
fn batch_tensors(clips: &[VideoClip]) -> (Tensor, Tensor, Tensor) {
    let frames = stack_clips(&clips.iter().map(|c| &c.frames).collect::<Vec<_>>());
    let views: Vec<_> = clips.iter().map(|c| c.labels.view().insert_axis(Axis(0))).collect();
    let labels = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
    let t = clips[0].clip_len();
    let mask = Tensor::from_shape_fn(IxDyn(&[clips.len(), t]), |ix| {
        f64::from(u8::from(ix[1] < clips[ix[0]].valid_len))
    });
    (frames, labels, mask)
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub net: Network,
    pub optimizer: Optimizer,
    pub bank: MemoryBank,
    pub state: RunState,
    pub log: Vec<EpochLog>,
    dataset: &'a Dataset,
    out_dir: PathBuf,
}

#[derive(Default)]
struct StepTotals {
    loss: f64,
    bce: f64,
    sic: f64,
    steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, dataset: &'a Dataset, out_dir: &Path) -> Result<Self> {
        Self::with_registry(cfg, dataset, out_dir, &TemporalRegistry::default())
    }

    pub fn with_registry(
        cfg: &TrainConfig,
        dataset: &'a Dataset,
        out_dir: &Path,
        registry: &TemporalRegistry,
    ) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.validate()?;
        let k = dataset.num_classes();
        cfg.loss.validate(k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let net = Model::build(&cfg.model, k, cfg.train.clip_len, registry, &mut rng)?;
        let optimizer = Optimizer::new(&net.params, cfg.optim.clone());
        let bank = MemoryBank::new(k, cfg.loss.bank_size, cfg.model.projection_dim);
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            cfg,
            net,
            optimizer,
            bank,
            state: RunState::default(),
            log: Vec::new(),
            dataset,
            out_dir: out_dir.to_path_buf(),
        })
    }

    /// Continue the run stored in `out_dir`.
    pub fn resume(dataset: &'a Dataset, out_dir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(&out_dir.join(LAST_CHECKPOINT))?;
        if ckpt.class_names != dataset.manifest.class_names {
            return Err(Error::config("dataset", "checkpoint classes differ from the dataset"));
        }
        let mut t = Self::new(&ckpt.config, dataset, out_dir)?;
        t.net = ckpt.network(&TemporalRegistry::default())?;
        t.optimizer = Optimizer::new(&t.net.params, t.cfg.optim.clone());
        ckpt.restore_optimizer(&t.net, &mut t.optimizer)?;
        ckpt.restore_bank(&mut t.bank)?;
        t.state = ckpt.state;
        t.log = read_train_log(&out_dir.join(TRAIN_LOG))?
            .into_iter()
            .filter(|r| r.epoch < t.state.epochs_completed)
            .collect();
        Ok(t)
    }

    fn class_names(&self) -> &[String] {
        &self.dataset.manifest.class_names
    }

    fn sample_epoch(&self, rng: &mut ChaCha8Rng) -> Result<Vec<VideoClip>> {
        let t = &self.cfg.train;
        let mut clips = Vec::new();
        for video in self.dataset.split(Split::Train) {
            clips.extend(sample_training_clips(
                video,
                t.clips_per_video,
                t.clip_len,
                t.label_dilation,
                rng,
            )?);
        }
        if clips.is_empty() {
            return Err(Error::config("dataset.splits", "training split is empty"));
        }
        clips.shuffle(rng);
        Ok(clips)
    }

    fn mix(&self, batch: Vec<VideoClip>, rng: &mut ChaCha8Rng) -> Result<Vec<VideoClip>> {
        if !self.cfg.loss.mixup {
            return Ok(batch);
        }
        let mut partner: Vec<usize> = (0..batch.len()).collect();
        partner.shuffle(rng);
        partner
            .iter()
            .enumerate()
            .map(|(i, &j)| mixup(&batch[i], &batch[j], sample_lambda(self.cfg.loss.mixup_alpha, rng)))
            .collect()
    }

    fn step(&mut self, batch: &[VideoClip], lr: f64, contrastive_on: bool, id: &str) -> Result<(f64, f64, f64)> {
        let (frames, labels, mask) = batch_tensors(batch);
        let (b, t, k) = (labels.shape()[0], labels.shape()[1], labels.shape()[2]);
        let flat_labels: Array2<f64> = labels.to_shape((b * t, k)).unwrap().to_owned();
        let flat_mask: Vec<bool> = mask.iter().map(|&m| m > 0.0).collect();
        let kind = self.cfg.loss.contrastive;
        let queries = if kind == ContrastiveKind::None {
            Vec::new()
        } else {
            contrastive_queries(
                &flat_labels,
                &flat_mask,
                kind == ContrastiveKind::Softic,
                self.cfg.loss.min_query_weight,
            )
        };
        let active: &[(usize, usize, f64)] = if contrastive_on { &queries } else { &[] };
        let Network { model, params, buffers } = &mut self.net;
        let bank = &self.bank;
        let loss_cfg = &self.cfg.loss;
        let mut first = None;
        let report = self.optimizer.step(params, lr, |p, pass| {
            let mut s = Session::new(p, buffers, Mode::Train, true);
            let x = s.graph.constant(frames.clone());
            let out = model.forward(&mut s, x);
            let terms = combined_loss(
                &mut s.graph,
                out.logits,
                out.embeddings,
                &labels,
                &mask,
                active,
                bank,
                loss_cfg,
            );
            let loss = s.graph.value(terms.total).sum();
            let grads = s.graph.backward(terms.total);
            let grads = s.param_grads(&grads);
            if pass == 0 {
                let emb = s
                    .graph
                    .value(out.embeddings)
                    .to_shape((b * t, model.spec.projection_dim))
                    .unwrap()
                    .to_owned();
                first = Some((s.take_bn_updates(), emb, terms.bce, terms.sic));
            }
            Ok(Evaluation { loss, grads })
        })?;
        if !report.loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {} on batch {id}", report.loss)));
        }
        let (bn, emb, bce, sic) = first.expect("first pass ran");
        if !report.skipped {
            apply_bn_updates(buffers, &bn);
            if kind != ContrastiveKind::None {
                update_bank(&mut self.bank, &emb, &queries)?;
            }
        }
        Ok((report.loss, bce, sic))
    }

    /// Train one epoch, validate if due and write checkpoints and the log.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let started = Instant::now();
        let epoch = self.state.epochs_completed;
        let epochs = self.cfg.train.epochs;
        let mut rng = epoch_rng(self.cfg.train.seed, epoch);
        let clips = self.sample_epoch(&mut rng)?;
        let batches: Vec<Vec<VideoClip>> = clips.chunks(self.cfg.train.batch_size).map(<[_]>::to_vec).collect();
        let contrastive_on = epoch >= self.cfg.loss.contrastive_warmup_epochs;
        let mut totals = StepTotals::default();
        let mut lr = 0.0;
        let n = batches.len();
        for (i, batch) in batches.into_iter().enumerate() {
            let ids: Vec<&str> = batch.iter().map(|c| c.video_id.as_str()).collect();
            let id = format!("epoch {epoch} batch {i} ({})", ids.join(" "));
            let batch = self.mix(batch, &mut rng)?;
            lr = lr_at((epoch as f64 + i as f64 / n as f64) / epochs as f64, &self.cfg.optim);
            let (loss, bce, sic) = self.step(&batch, lr, contrastive_on, &id)?;
            totals.loss += loss;
            totals.bce += bce;
            totals.sic += sic;
            totals.steps += 1;
        }
        self.state.epochs_completed = epoch + 1;
        self.state.optimizer_step = self.optimizer.step;
        self.state.skipped_steps = self.optimizer.skipped;
        let due = (epoch + 1) % self.cfg.train.eval_every == 0 || epoch + 1 == epochs;
        let val = self.dataset.split(Split::Val);
        let val_map = if due && !val.is_empty() {
            Some(
                evaluate_videos(&self.net, &val, self.class_names(), &self.cfg.eval)?
                    .report
                    .primary_map,
            )
        } else {
            None
        };
        let improved = match (val_map, self.state.best_score) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            (None, _) => val.is_empty(),
        };
        if improved {
            self.state.best_epoch = Some(epoch);
            self.state.best_score = val_map;
        }
        let steps = totals.steps.max(1) as f64;
        let row = EpochLog {
            epoch,
            lr,
            loss: totals.loss / steps,
            bce: totals.bce / steps,
            sic: totals.sic / steps,
            skipped_steps: self.optimizer.skipped,
            val_map,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} bce {:.5} sic {:.5} lr {:.2e} val {:?}",
            row.loss,
            row.bce,
            row.sic,
            row.lr,
            row.val_map
        );
        self.log.push(row.clone());
        let ckpt = Checkpoint::capture(
            &self.cfg,
            self.class_names(),
            self.state.clone(),
            &self.net,
            Some(&self.optimizer),
            Some(&self.bank),
        );
        ckpt.save(&self.out_dir.join(LAST_CHECKPOINT))?;
        if improved {
            ckpt.save(&self.out_dir.join(BEST_CHECKPOINT))?;
        }
        self.write_artifacts()?;
        Ok(row)
    }

    /// Train until `until` epochs are complete (default: the configured
    /// count).
    pub fn run(&mut self, until: Option<usize>) -> Result<()> {
        let target = until.unwrap_or(self.cfg.train.epochs).min(self.cfg.train.epochs);
        while self.state.epochs_completed < target {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn write_artifacts(&self) -> Result<()> {
        let path = self.out_dir.join(TRAIN_LOG);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        for row in &self.log {
            w.serialize(row).map_err(|e| Error::format(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let cfg_path = self.out_dir.join(CONFIG_SNAPSHOT);
        std::fs::write(&cfg_path, self.cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
        let summary = RunSummary {
            num_parameters: self.net.num_parameters(),
            class_names: self.class_names().to_vec(),
            epochs_completed: self.state.epochs_completed,
            best_epoch: self.state.best_epoch,
            best_val_map: self.state.best_score,
            skipped_steps: self.state.skipped_steps,
        };
        write_json(&self.out_dir.join(RUN_SUMMARY), &summary)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Aggregated frame scores of one video from half-overlapping windows.
pub fn predict_track(net: &Network, record: &VideoRecord) -> Result<FrameScoreTrack> {
    let windows = evaluation_windows(record, net.model.clip_len)?;
    let frames = stack_clips(&windows.iter().map(|w| &w.frames).collect::<Vec<_>>());
    let scores = net.predict(&frames)?;
    let outputs: Vec<WindowScores> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| WindowScores {
            start: w.start_frame,
            scores: scores.index_axis(Axis(0), i).into_dimensionality().unwrap().to_owned(),
            mask: w.mask(),
        })
        .collect();
    aggregate_windows(&record.video_id, record.num_frames(), &outputs)
}

pub struct EvalOutput {
    pub report: MetricsReport,
    pub predictions: Vec<EventPrediction>,
    pub tracks: Vec<FrameScoreTrack>,
}

pub fn evaluate_videos(
    net: &Network,
    videos: &[&VideoRecord],
    class_names: &[String],
    spec: &EvalSpec,
) -> Result<EvalOutput> {
    if class_names.len() != net.model.num_classes {
        return Err(Error::config(
            "dataset",
            format!(
                "model predicts {} classes, dataset has {}",
                net.model.num_classes,
                class_names.len()
            ),
        ));
    }
    let mut predictions = Vec::new();
    let mut tracks = Vec::new();
    for v in videos {
        let track = predict_track(net, v)?;
        predictions.extend(soft_nms(&track, spec.nms_window, spec.score_threshold));
        tracks.push(track);
    }
    let truths: Vec<(String, Vec<(usize, usize)>)> = videos
        .iter()
        .map(|v| {
            (
                v.video_id.clone(),
                v.events.iter().map(|e| (e.frame, e.class_id)).collect(),
            )
        })
        .collect();
    let report = evaluate(&predictions, &truths, class_names, spec)?;
    Ok(EvalOutput {
        report,
        predictions,
        tracks,
    })
}

/// Load the checkpoint at `path` and evaluate it on one split.
pub fn evaluate_checkpoint(
    path: &Path,
    dataset: &Dataset,
    split: Split,
    spec: Option<&EvalSpec>,
) -> Result<EvalOutput> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.class_names.len() != dataset.num_classes() {
        return Err(Error::config(
            "dataset",
            format!(
                "checkpoint has {} classes, dataset has {}",
                ckpt.class_names.len(),
                dataset.num_classes()
            ),
        ));
    }
    let net = ckpt.network(&TemporalRegistry::default())?;
    let spec = spec.unwrap_or(&ckpt.config.eval);
    evaluate_videos(&net, &dataset.split(split), &dataset.manifest.class_names, spec)
}
