//! Run configuration: a sectioned key=value file (`[search]`, `[derived]`).

use serde::{Deserialize, Serialize};

use crate::catalog::{parse_scope, Component, OpKind, CNN_OPS, SEQ_OPS};
use crate::error::{Error, Result};

/// How the SeqNN output sequence is collapsed before the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimePool {
    #[default]
    Mean,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Number of CNN cells (C).
    pub cnn_cells: usize,
    /// Number of SeqNN cells (N).
    pub seq_cells: usize,
    pub cnn_nodes: usize,
    pub seq_nodes: usize,
    pub channels: usize,
    pub hidden: usize,
    pub scope_cnn: Vec<String>,
    pub scope_seqnn: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
    pub alpha_init_std: f64,
    /// Gradient max-norm for the weight step; off unless set.
    pub grad_clip: Option<f64>,
    pub time_pool: TimePool,
    pub retain_all_edges: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            cnn_cells: 4,
            seq_cells: 2,
            cnn_nodes: 4,
            seq_nodes: 4,
            channels: 16,
            hidden: 64,
            scope_cnn: CNN_OPS.iter().map(|s| s.to_string()).collect(),
            scope_seqnn: SEQ_OPS.iter().map(|s| s.to_string()).collect(),
            epochs: 300,
            batch_size: 16,
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_beta1: 0.9,
            alpha_beta2: 0.999,
            alpha_weight_decay: 1e-3,
            alpha_init_std: 1e-3,
            grad_clip: None,
            time_pool: TimePool::Mean,
            retain_all_edges: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        positive("search.cnn_cells", self.cnn_cells)?;
        positive("search.seq_cells", self.seq_cells)?;
        positive("search.cnn_nodes", self.cnn_nodes)?;
        positive("search.seq_nodes", self.seq_nodes)?;
        positive("search.channels", self.channels)?;
        positive("search.hidden", self.hidden)?;
        positive("search.batch_size", self.batch_size)?;
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config(format!(
                "need lr_max > lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.alpha_init_std < 0.0 || self.alpha_lr <= 0.0 {
            return Err(Error::Config("alpha_lr must be positive and alpha_init_std non-negative".into()));
        }
        self.cnn_scope()?;
        self.seq_scope()?;
        Ok(())
    }

    pub fn cnn_scope(&self) -> Result<Vec<OpKind>> {
        parse_scope(&self.scope_cnn, Component::Cnn)
    }

    pub fn seq_scope(&self) -> Result<Vec<OpKind>> {
        parse_scope(&self.scope_seqnn, Component::Seq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerivedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Learnable scale/shift in normalization layers.
    pub affine: bool,
    pub stem: bool,
    pub grad_clip: Option<f64>,
    pub time_pool: TimePool,
}

impl Default for DerivedConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            dropout: 0.3,
            affine: true,
            stem: true,
            grad_clip: None,
            time_pool: TimePool::Mean,
        }
    }
}

impl DerivedConfig {
    pub fn validate(&self) -> Result<()> {
        positive("derived.batch_size", self.batch_size)?;
        if !(self.lr_max >= self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config("need lr_max >= lr_min > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Layer sizes of the hand-designed comparison models. Optimizer settings
/// come from `[derived]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub filters: usize,
    pub dense: usize,
    /// Units per direction of the bidirectional LSTM.
    pub lstm_units: usize,
    pub dropout: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            filters: 16,
            dense: 64,
            lstm_units: 128,
            dropout: 0.3,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        positive("baseline.filters", self.filters)?;
        positive("baseline.dense", self.dense)?;
        positive("baseline.lstm_units", self.lstm_units)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub derived: DerivedConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.search.validate()?;
        cfg.derived.validate()?;
        cfg.baseline.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{field} must be at least 1")))
    } else {
        Ok(())
    }
}
