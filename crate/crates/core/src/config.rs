//! Run configuration files.
//!
//! A TOML document with one `key = value` per line. `version = 1` is
//! required; `base = "default" | "toy" | "tiny"` picks the preset that
//! unspecified keys fall back to.
//!
//! ```toml
//! version = 1
//! base = "toy"
//! variant = "C"
//! up_ratios = [1, 4, 4]
//! lr = 0.001
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};

pub const FORMAT_VERSION: u32 = 1;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// The learning rate is multiplied by `lr_decay` every this many epochs.
    pub lr_decay_epochs: usize,
    pub lr_decay: f64,
    /// Number of manifest entries (taken from the end) held out for
    /// validation.
    pub holdout: usize,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            lr_decay_epochs: 100,
            lr_decay: 0.1,
            holdout: 8,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::contract(format!(
                "config: lr = {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract(
                "config: beta1 and beta2 must lie in [0, 1)",
            ));
        }
        if !(self.eps > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::contract("config: eps and lr_decay must be positive"));
        }
        if self.batch_size == 0 || self.lr_decay_epochs == 0 {
            return Err(Error::contract(
                "config: batch_size and lr_decay_epochs must be positive",
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch / self.lr_decay_epochs;
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    Toy,
    Tiny,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// On-disk form: every setting optional except `version`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<Preset>,
    input_points: Option<usize>,
    dim: Option<usize>,
    shape_dim: Option<usize>,
    sa_points: Option<[usize; 3]>,
    sa_dims: Option<[usize; 3]>,
    sa_k: Option<usize>,
    encoder_m: Option<usize>,
    encoder_k: Option<usize>,
    seed_points: Option<usize>,
    seed_k: Option<usize>,
    start_points: Option<usize>,
    up_ratios: Option<[usize; 3]>,
    crt_k: Option<usize>,
    crt_ratio: Option<f64>,
    m_inter: Option<usize>,
    m_intra: Option<usize>,
    variant: Option<String>,
    child_code_dim: Option<usize>,
    offset_scale: Option<f64>,
    init_gain: Option<f64>,
    attention_residual: Option<bool>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    batch_size: Option<usize>,
    lr_decay_epochs: Option<usize>,
    lr_decay: Option<f64>,
    holdout: Option<usize>,
    max_steps: Option<usize>,
}

fn set<V>(slot: &mut V, value: Option<V>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// 1-based line of byte `offset` in `text`.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let model = match p {
            Preset::Default => ModelConfig::default(),
            Preset::Toy => ModelConfig::toy(),
            Preset::Tiny => ModelConfig::tiny(),
        };
        Self {
            model,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let file: FileConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            err(line, e.message().to_string())
        })?;
        if file.version != FORMAT_VERSION {
            let line = text
                .lines()
                .position(|l| l.trim_start().starts_with("version"))
                .map_or(0, |i| i + 1);
            return Err(err(
                line,
                format!(
                    "unsupported version {} (expected {FORMAT_VERSION})",
                    file.version
                ),
            ));
        }
        let mut cfg = Self::preset(file.base.unwrap_or(Preset::Default));
        let m = &mut cfg.model;
        set(&mut m.input_points, file.input_points);
        set(&mut m.dim, file.dim);
        set(&mut m.shape_dim, file.shape_dim);
        set(&mut m.sa_points, file.sa_points);
        set(&mut m.sa_dims, file.sa_dims);
        set(&mut m.sa_k, file.sa_k);
        set(&mut m.encoder_m, file.encoder_m);
        set(&mut m.encoder_k, file.encoder_k);
        set(&mut m.seed_points, file.seed_points);
        set(&mut m.seed_k, file.seed_k);
        set(&mut m.start_points, file.start_points);
        set(&mut m.up_ratios, file.up_ratios);
        set(&mut m.crt_k, file.crt_k);
        set(&mut m.crt_ratio, file.crt_ratio);
        set(&mut m.m_inter, file.m_inter);
        set(&mut m.m_intra, file.m_intra);
        set(&mut m.child_code_dim, file.child_code_dim);
        set(&mut m.offset_scale, file.offset_scale);
        set(&mut m.init_gain, file.init_gain);
        set(&mut m.attention_residual, file.attention_residual);
        if let Some(v) = &file.variant {
            let mut chars = v.chars();
            m.variant = match (chars.next(), chars.next()) {
                (Some(c), None) => Variant::from_letter(c),
                _ => None,
            }
            .ok_or_else(|| {
                let line = text
                    .lines()
                    .position(|l| l.trim_start().starts_with("variant"))
                    .map_or(0, |i| i + 1);
                err(line, format!("unknown variant `{v}` (expected one of A-G)"))
            })?;
        }
        let t = &mut cfg.train;
        set(&mut t.lr, file.lr);
        set(&mut t.beta1, file.beta1);
        set(&mut t.beta2, file.beta2);
        set(&mut t.eps, file.eps);
        set(&mut t.batch_size, file.batch_size);
        set(&mut t.lr_decay_epochs, file.lr_decay_epochs);
        set(&mut t.lr_decay, file.lr_decay);
        set(&mut t.holdout, file.holdout);
        set(&mut t.max_steps, file.max_steps);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key written out; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let file = FileConfig {
            version: FORMAT_VERSION,
            base: None,
            input_points: Some(m.input_points),
            dim: Some(m.dim),
            shape_dim: Some(m.shape_dim),
            sa_points: Some(m.sa_points),
            sa_dims: Some(m.sa_dims),
            sa_k: Some(m.sa_k),
            encoder_m: Some(m.encoder_m),
            encoder_k: Some(m.encoder_k),
            seed_points: Some(m.seed_points),
            seed_k: Some(m.seed_k),
            start_points: Some(m.start_points),
            up_ratios: Some(m.up_ratios),
            crt_k: Some(m.crt_k),
            crt_ratio: Some(m.crt_ratio),
            m_inter: Some(m.m_inter),
            m_intra: Some(m.m_intra),
            variant: Some(m.variant.letter().to_string()),
            child_code_dim: Some(m.child_code_dim),
            offset_scale: Some(m.offset_scale),
            init_gain: Some(m.init_gain),
            attention_residual: Some(m.attention_residual),
            lr: Some(t.lr),
            beta1: Some(t.beta1),
            beta2: Some(t.beta2),
            eps: Some(t.eps),
            batch_size: Some(t.batch_size),
            lr_decay_epochs: Some(t.lr_decay_epochs),
            lr_decay: Some(t.lr_decay),
            holdout: Some(t.holdout),
            max_steps: Some(t.max_steps),
        };
        toml::to_string(&file).expect("plain values serialize")
    }

    /// A config file that only names a preset.
    pub fn preset_text(p: Preset) -> String {
        let file = FileConfig {
            version: FORMAT_VERSION,
            base: Some(p),
            ..FileConfig::default()
        };
        toml::to_string(&file).expect("plain values serialize")
    }
}
