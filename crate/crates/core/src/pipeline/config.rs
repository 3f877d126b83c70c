//! Model and training configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::enhancer::{check_range, read_manifest, AdapterMode};
use crate::error::{Error, Result};
use crate::evalkit::{stream_row_id, STREAM_ROWS};
use crate::numerics::AdamWConfig;
use crate::scenario::io::read_json;
use crate::scenario::{Limits, ReorgConfig, DEFAULT_T_F, DEFAULT_T_H};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    #[serde(default)]
    pub sc_stream: bool,
    #[serde(default)]
    pub at_stream: bool,
    #[serde(default)]
    pub enhancer: bool,
}

impl Flags {
    pub const NONE: Flags = Flags::new(false, false, false);
    pub const ENHANCER_ONLY: Flags = Flags::new(false, false, true);
    pub const STREAMS: Flags = Flags::new(true, true, false);
    pub const ALL: Flags = Flags::new(true, true, true);
    pub const FLAGSHIP: Flags = Flags::new(true, false, true);

    pub const fn new(sc_stream: bool, at_stream: bool, enhancer: bool) -> Self {
        Flags {
            sc_stream,
            at_stream,
            enhancer,
        }
    }

    /// The five rows of the stream ablation, in ID order.
    pub fn ablation_rows() -> [Flags; 5] {
        STREAM_ROWS.map(|[s, a, e]| Flags::new(s, a, e))
    }

    /// Row ID in the stream ablation, if the combination is one of its rows.
    pub fn ablation_id(self) -> Option<usize> {
        stream_row_id(self.as_array())
    }

    pub fn uses_memory(self) -> bool {
        self.sc_stream || self.at_stream
    }

    pub fn as_array(self) -> [bool; 3] {
        [self.sc_stream, self.at_stream, self.enhancer]
    }

    /// Short variant name used as a report label.
    pub fn variant_name(self) -> &'static str {
        match self.as_array() {
            [false, false, false] => "baseline-I",
            [true, true, false] => "baseline",
            [false, false, true] => "enhanced-I",
            [true, false, true] => "enhanced",
            [true, true, true] => "enhanced+AT",
            [true, false, false] => "baseline-SC",
            [false, true, false] => "baseline-AT",
            [false, true, true] => "enhanced-AT",
        }
    }
}

/// Which foreign layers the enhancer loads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForeignConfig {
    pub manifest: PathBuf,
    /// First layer; defaults to the block ending at the last layer.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default = "one")]
    pub count: usize,
    /// Expected foreign width; checked against the manifest when given.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub adapters: AdapterMode,
}

fn one() -> usize {
    1
}

impl ForeignConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        ForeignConfig {
            manifest: manifest.into(),
            layer: None,
            count: 1,
            hidden: None,
            adapters: AdapterMode::Shared,
        }
    }

    pub fn first_layer(&self, total: usize) -> Result<usize> {
        let first = match self.layer {
            Some(l) => l,
            None => total
                .checked_sub(self.count)
                .ok_or_else(|| Error::Range(format!("{} layers requested from a {total}-layer manifest", self.count)))?,
        };
        check_range(total, first, self.count)?;
        Ok(first)
    }

    /// Reads the manifest header and checks range and width.
    pub fn check(&self) -> Result<(usize, usize)> {
        let m = read_manifest(&self.manifest)?;
        let first = self.first_layer(m.layers)?;
        if let Some(h) = self.hidden.filter(|&h| h != m.hidden) {
            return Err(Error::Config(format!(
                "config expects foreign width {h}, manifest {} has {}",
                self.manifest.display(),
                m.hidden
            )));
        }
        Ok((first, m.layers))
    }
}

fn default_dim() -> usize {
    128
}
fn default_heads() -> usize {
    8
}
fn default_blocks() -> usize {
    4
}
fn default_ff() -> usize {
    512
}
fn default_modes() -> usize {
    6
}
fn default_t_h() -> usize {
    DEFAULT_T_H
}
fn default_t_f() -> usize {
    DEFAULT_T_F
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_blocks")]
    pub enc_blocks: usize,
    #[serde(default = "default_ff")]
    pub ff_width: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_t_h")]
    pub t_h: usize,
    #[serde(default = "default_t_f")]
    pub t_f: usize,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub foreign: Option<ForeignConfig>,
    #[serde(default)]
    pub reorg: ReorgConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: default_dim(),
            heads: default_heads(),
            enc_blocks: default_blocks(),
            ff_width: default_ff(),
            dropout: 0.0,
            modes: default_modes(),
            t_h: DEFAULT_T_H,
            t_f: DEFAULT_T_F,
            flags: Flags::default(),
            foreign: None,
            reorg: ReorgConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            blocks: self.enc_blocks,
            ff_width: self.ff_width,
            dropout: self.dropout,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            modes: self.modes,
            horizon: self.t_f,
        }
    }

    /// Reorganization actually applied: memoryless variants see one segment.
    pub fn effective_reorg(&self) -> ReorgConfig {
        if self.flags.uses_memory() {
            self.reorg
        } else {
            ReorgConfig {
                segments: 1,
                stride: self.reorg.stride,
            }
        }
    }

    /// Checks everything that does not need the weight blob.
    pub fn validate(&self) -> Result<()> {
        if self.flags.enhancer && self.foreign.is_none() {
            return Err(Error::Config("enhancer enabled without a foreign weight manifest".into()));
        }
        self.validate_structure()
    }

    /// [`ModelConfig::validate`] without requiring a manifest, for models
    /// built over in-memory foreign weights.
    pub(crate) fn validate_structure(&self) -> Result<()> {
        self.encoder().validate()?;
        if self.enc_blocks == 0 {
            return Err(Error::Config("at least one encoder block required".into()));
        }
        if self.modes == 0 || self.t_f == 0 {
            return Err(Error::Config("modes and horizon must be positive".into()));
        }
        self.reorg.cutoffs(self.t_h)?;
        match (&self.foreign, self.flags.enhancer) {
            (Some(f), true) => {
                if f.count == 0 {
                    return Err(Error::Config("foreign layer count must be at least 1".into()));
                }
                if f.hidden.is_some_and(|h| h < self.dim) {
                    return Err(Error::Config("foreign width must be at least the feature width".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Dataset geometry must match the configured horizons.
    pub fn check_geometry(&self, limits: &Limits) -> Result<()> {
        if limits.t_h != self.t_h || limits.t_f != self.t_f {
            return Err(Error::Config(format!(
                "data has {}/{} history/future frames, model expects {}/{}",
                limits.t_h, limits.t_f, self.t_h, self.t_f
            )));
        }
        Ok(())
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    20
}
fn default_decay() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stops after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            weight_decay: default_decay(),
            seed: 0,
            max_steps: None,
            data: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Reads a config; a relative manifest path is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path).map_err(config_error)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(f) = self.model.foreign.as_mut() {
            if f.manifest.is_relative() {
                f.manifest = base.join(&f.manifest);
            }
        }
    }
}

/// Malformed configuration files are configuration errors.
pub(crate) fn config_error(e: Error) -> Error {
    match e {
        Error::Parse { path, msg } => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    }
}
