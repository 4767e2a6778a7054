//! Checkpoints as safetensors files. Tensors are little-endian f64 under
//! `param/`, `buffer/`, `adam_m/`, `adam_v/` and `bank/<class>/{z,w}`; the
//! header metadata carries the run configuration and progress.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::MemoryBank;
use crate::network::{Model, Network, TemporalRegistry};
use crate::optim::Optimizer;
use crate::params::TensorStore;

const FORMAT: &str = "eventspot-checkpoint-1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub optimizer_step: u64,
    pub skipped_steps: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub state: RunState,
    pub tensors: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 8);
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn add_store(tensors: &mut BTreeMap<String, Tensor>, prefix: &str, store: &TensorStore) {
    for (name, value) in store.iter() {
        tensors.insert(format!("{prefix}/{name}"), value.clone());
    }
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        class_names: &[String],
        state: RunState,
        net: &Network,
        optimizer: Option<&Optimizer>,
        bank: Option<&MemoryBank>,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        add_store(&mut tensors, "param", &net.params);
        add_store(&mut tensors, "buffer", &net.buffers);
        if let Some(opt) = optimizer {
            for ((name, m), v) in net.params.names().iter().zip(&opt.m).zip(&opt.v) {
                tensors.insert(format!("adam_m/{name}"), m.clone());
                tensors.insert(format!("adam_v/{name}"), v.clone());
            }
        }
        if let Some(bank) = bank {
            for c in 0..bank.num_classes() {
                let q = bank.queue(c);
                if q.is_empty() {
                    continue;
                }
                let z: Vec<f64> = q.iter().flat_map(|e| e.z.iter().copied()).collect();
                let w: Vec<f64> = q.iter().map(|e| e.weight).collect();
                tensors.insert(
                    format!("bank/{c}/z"),
                    Tensor::from_shape_vec(IxDyn(&[q.len(), bank.dim]), z).unwrap(),
                );
                tensors.insert(
                    format!("bank/{c}/w"),
                    Tensor::from_shape_vec(IxDyn(&[q.len()]), w).unwrap(),
                );
            }
        }
        Self {
            config: config.clone(),
            class_names: class_names.to_vec(),
            state,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), to_bytes(t), t.shape().to_vec()))
            .collect();
        let views: Vec<(String, TensorView<'_>)> = bytes
            .iter()
            .map(|(n, b, s)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F64, s.clone(), b).expect("consistent view"),
                )
            })
            .collect();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("config".to_string(), self.config.to_toml_string());
        meta.insert(
            "class_names".to_string(),
            serde_json::to_string(&self.class_names).unwrap(),
        );
        meta.insert("state".to_string(), serde_json::to_string(&self.state).unwrap());
        let data = safetensors::serialize(views, Some(meta)).map_err(|e| Error::format(path, e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::format(path, m);
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("not an eventspot checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing metadata `{k}`")));
        let mut config: TrainConfig = toml::from_str(field("config")?).map_err(|e| bad(e.to_string()))?;
        config.validate()?;
        let class_names: Vec<String> = serde_json::from_str(field("class_names")?).map_err(|e| bad(e.to_string()))?;
        let state: RunState = serde_json::from_str(field("state")?).map_err(|e| bad(e.to_string()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F64 {
                return Err(bad(format!("tensor `{name}` is not f64")));
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| bad(e.to_string()))?;
            tensors.insert(name.to_string(), t);
        }
        Ok(Self {
            config,
            class_names,
            state,
            tensors,
        })
    }

    fn fill(&self, prefix: &str, store: &mut TensorStore) -> Result<()> {
        let mut src = TensorStore::new();
        for name in store.names() {
            let key = format!("{prefix}/{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks `{key}`")))?;
            src.add(name.clone(), t.clone());
        }
        store.load_from(&src)
    }

    /// Rebuild the network described by the stored config and load its state.
    pub fn network(&self, registry: &TemporalRegistry) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Model::build(
            &self.config.model,
            self.class_names.len(),
            self.config.train.clip_len,
            registry,
            &mut rng,
        )?;
        self.fill("param", &mut net.params)?;
        self.fill("buffer", &mut net.buffers)?;
        Ok(net)
    }

    /// Restore AdamW moments and step counters.
    pub fn restore_optimizer(&self, net: &Network, opt: &mut Optimizer) -> Result<()> {
        let mut m = net.params.clone();
        let mut v = net.params.clone();
        self.fill("adam_m", &mut m)?;
        self.fill("adam_v", &mut v)?;
        opt.m = m.values().to_vec();
        opt.v = v.values().to_vec();
        opt.step = self.state.optimizer_step;
        opt.skipped = self.state.skipped_steps;
        Ok(())
    }

    pub fn restore_bank(&self, bank: &mut MemoryBank) -> Result<()> {
        bank.clear();
        for c in 0..bank.num_classes() {
            let (Some(z), Some(w)) = (
                self.tensors.get(&format!("bank/{c}/z")),
                self.tensors.get(&format!("bank/{c}/w")),
            ) else {
                continue;
            };
            if z.ndim() != 2 || z.shape()[1] != bank.dim || w.len() != z.shape()[0] {
                return Err(Error::Shape(format!("bank queue {c} has shape {:?}", z.shape())));
            }
            for (row, &weight) in z.outer_iter().zip(w.iter()) {
                bank.push(&row.iter().copied().collect::<Vec<_>>(), c, weight)?;
            }
        }
        Ok(())
    }
}
