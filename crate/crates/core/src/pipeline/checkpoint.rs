//! Binary checkpoints: magic, header length, JSON header, f64 payload.
//!
//! The payload holds every parameter in store order, then the first and
//! second moments of every trainable parameter in the same order, all
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use crate::enhancer::{ForeignWeights, LayerWeights, LAYER_TENSORS};
use crate::error::{Error, Result};
use crate::evalkit::{LayerSpan, MetricsReport, ReportRow};
use crate::numerics::{AdamWConfig, Array, OptimizerState, ParamStore};
use crate::scenario::io::{from_json_slice, to_json_bytes};

pub const MAGIC: &[u8; 8] = b"SSCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_total: f64,
    pub train_regression: f64,
    pub train_classification: f64,
    /// Stopped early by the step limit.
    #[serde(default)]
    pub partial: bool,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub min_fde6: f64,
}

/// Geometry of the frozen layers, enough to rebuild the enhancer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignRecord {
    pub source: String,
    pub total_layers: usize,
    pub first: usize,
    pub count: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    /// Completed epochs; training resumes at this epoch.
    epoch: usize,
    best: Option<BestRecord>,
    log: Vec<EpochLog>,
    foreign: Option<ForeignRecord>,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    tensors: Vec<TensorRecord>,
}

/// Everything needed to evaluate or continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub best: Option<BestRecord>,
    pub log: Vec<EpochLog>,
    pub foreign: Option<ForeignRecord>,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &RunConfig, optimizer: &OptimizerState, epoch: usize, best: Option<BestRecord>, log: &[EpochLog]) -> Self {
        let foreign = model.enhancer.as_ref().map(|e| ForeignRecord {
            source: e.source.clone(),
            total_layers: e.total_layers,
            first: e.layers[0].index,
            count: e.layers.len(),
            hidden: e.hidden,
            heads: e.layers[0].heads,
            ffn: e.ffn,
        });
        Checkpoint {
            config: config.clone(),
            epoch,
            best,
            log: log.to_vec(),
            foreign,
            params: model.store.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self
            .params
            .iter()
            .map(|(_, p)| TensorRecord {
                name: p.name.clone(),
                shape: p.array.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            best: self.best,
            log: self.log.clone(),
            foreign: self.foreign.clone(),
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let json = to_json_bytes(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.scalar_count(false) * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, p) in self.params.iter() {
            put(p.array.data());
        }
        for (id, p) in self.params.iter() {
            if p.trainable {
                put(&self.optimizer.first[id.index()]);
                put(&self.optimizer.second[id.index()]);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(corrupt(path, "header length exceeds file size"));
        }
        let header: Header = from_json_slice(&body[..hlen], path)?;
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(corrupt(path, "payload is not a whole number of f64 values"));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize, what: &str| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if v.len() != n {
                return Err(corrupt(path, format!("payload truncated in `{what}`")));
            }
            Ok(v)
        };
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let n = t.shape.iter().product();
            let a = Array::new(t.shape.clone(), take(n, &t.name)?)?;
            params.insert(t.name.clone(), a, t.trainable)?;
        }
        let mut opt = OptimizerState::new(header.optimizer, &params);
        opt.step = header.optimizer_step;
        for (i, t) in header.tensors.iter().enumerate() {
            if t.trainable {
                let n = opt.first[i].len();
                opt.first[i] = take(n, &t.name)?;
                opt.second[i] = take(n, &t.name)?;
            }
        }
        if take(1, "end").is_ok() {
            return Err(corrupt(path, "trailing data after payload"));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            best: header.best,
            log: header.log,
            foreign: header.foreign,
            params,
            optimizer: opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    fn foreign_weights(&self) -> Result<Option<ForeignWeights>> {
        let Some(f) = &self.foreign else { return Ok(None) };
        let get = |l: usize, suffix: &str| -> Result<Array> {
            let name = format!("enhancer.frozen.{l}.{suffix}");
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Load(format!("checkpoint lacks frozen tensor `{name}`")))?;
            Ok(self.params.get(id).array.clone())
        };
        let layers = (f.first..f.first + f.count)
            .map(|l| {
                Ok(LayerWeights {
                    index: l,
                    attn_norm: get(l, LAYER_TENSORS[0])?,
                    wq: get(l, LAYER_TENSORS[1])?,
                    wk: get(l, LAYER_TENSORS[2])?,
                    wv: get(l, LAYER_TENSORS[3])?,
                    wo: get(l, LAYER_TENSORS[4])?,
                    ffn_norm: get(l, LAYER_TENSORS[5])?,
                    w_gate: get(l, LAYER_TENSORS[6])?,
                    w_up: get(l, LAYER_TENSORS[7])?,
                    w_down: get(l, LAYER_TENSORS[8])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Some(ForeignWeights {
            source: f.source.clone(),
            total_layers: f.total_layers,
            hidden: f.hidden,
            heads: f.heads,
            ffn: f.ffn,
            first: f.first,
            layers,
        }))
    }

    /// Rebuilds the model without touching the weight manifest, then
    /// restores every tensor by name.
    /// Report row of this run: variant name, flags and foreign span.
    pub fn report_row(&self, metrics: MetricsReport) -> ReportRow {
        let flags = self.config.model.flags;
        ReportRow {
            label: flags.variant_name().to_string(),
            flags: Some(flags.as_array()),
            layers: self.foreign.as_ref().map(|f| LayerSpan {
                first: f.first,
                count: f.count,
                total: f.total_layers,
            }),
            metrics,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::with_foreign(&self.config.model, self.foreign_weights()?)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, configured model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (id, p) in self.params.iter() {
            let dst = model
                .store
                .id(&p.name)
                .filter(|&d| d == id)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor `{}` not in the model", p.name)))?;
            let q = model.store.get_mut(dst);
            if q.array.shape() != p.array.shape() || q.trainable != p.trainable {
                return Err(Error::Config(format!("checkpoint tensor `{}` has a different shape or role", p.name)));
            }
            q.array = p.array.clone();
        }
        Ok(model)
    }
}
