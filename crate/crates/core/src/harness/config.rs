use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ccm::GateSource;
use crate::featbank::Source;
use crate::synth::DatasetConfig;
use crate::wrec::{NegPool, PretrainConfig};
use crate::wres::OracleConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// Everything a run depends on. Parsing is strict: unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    /// Unified feature width.
    pub d: usize,
    /// Text embedding width.
    pub d_t: usize,
    /// Width of the anchor/text matching space.
    pub contrastive_dim: usize,
    pub top_k: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lambda_atc: f64,
    pub lambda_inc: f64,
    pub lambda_scl: f64,
    pub lambda_res: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub use_dvfe: bool,
    pub use_isl: bool,
    pub bank: Vec<Source>,
    pub dvfe_residual: bool,
    pub atc_literal: bool,
    pub cosine_sim: bool,
    pub gate_source: GateSource,
    pub neg_pool: NegPool,
    /// Channels per dilated branch of the mask decoder.
    pub aspp_width: usize,
    /// Stop refreshing pseudo masks after this many epochs.
    pub freeze_pseudo_after: Option<usize>,
    pub oracle: OracleConfig,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            d: 64,
            d_t: 64,
            contrastive_dim: 64,
            top_k: 2,
            tau: 0.1,
            alpha: 0.3,
            lambda_atc: 1.0,
            lambda_inc: 50.0,
            lambda_scl: 1.0,
            lambda_res: 0.0,
            lr: 1e-3,
            batch_size: 16,
            epochs: 15,
            schedule: Schedule::Cosine,
            use_dvfe: true,
            use_isl: true,
            bank: Source::ALL.to_vec(),
            dvfe_residual: false,
            atc_literal: false,
            cosine_sim: false,
            gate_source: GateSource::PredictedMask,
            neg_pool: NegPool::Topk,
            aspp_width: 8,
            freeze_pseudo_after: None,
            oracle: OracleConfig::default(),
            pretrain: PretrainConfig::default(),
            seed: 1,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.oracle.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_atc", self.lambda_atc),
            ("lambda_inc", self.lambda_inc),
            ("lambda_scl", self.lambda_scl),
            ("lambda_res", self.lambda_res),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be ≥ 2: contrastive loss requires negatives".into());
        }
        if [self.d, self.d_t, self.contrastive_dim, self.aspp_width].contains(&0) {
            return bad("feature widths must be positive".into());
        }
        if self.dataset.image_size % 32 != 0 {
            return bad(format!(
                "image_size {} requires divisibility by 32",
                self.dataset.image_size
            ));
        }
        let cells = (self.dataset.image_size / 32).pow(2);
        if self.top_k == 0 || self.top_k > cells {
            return bad(format!("top_k must lie in 1..={cells}, got {}", self.top_k));
        }
        if self.bank.is_empty() {
            return bad("bank must name at least one source".into());
        }
        let mut seen = self.bank.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.bank.len() {
            return bad("bank lists a source twice".into());
        }
        Ok(())
    }

    /// Strict parse followed by validation.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the JSON
    /// form (`oracle.p_clean`); values parse as JSON, falling back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        let c: Config = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
