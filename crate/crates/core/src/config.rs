//! Run configuration: model dimensions, stage-two selection, optimizer
//! schedule and synthetic-data shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Discriminative,
    Generative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dialogs: usize,
    pub turns: usize,
    /// Candidate answers per turn (C).
    pub candidates: usize,
    /// Objects per scene (n).
    pub objects: usize,
    /// Width of each object feature vector.
    pub feature_dim: usize,
    /// Half-width of the uniform noise added to object features.
    pub feature_noise: f64,
    /// Fraction of follow-up questions that refer back with a pronoun.
    pub pronoun_fraction: f64,
    /// Fraction of turns whose ground truth is the descriptive answer form
    /// rather than the short one.
    pub descriptive_fraction: f64,
    /// Relevance given to the other answer form of the ground truth.
    pub synonym_relevance: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dialogs: 64,
            turns: 5,
            candidates: 30,
            objects: 4,
            feature_dim: 32,
            feature_noise: 0.05,
            pronoun_fraction: 0.3,
            descriptive_fraction: 0.5,
            synonym_relevance: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// LSTM and object hidden size (d).
    pub hidden: usize,
    pub emb_dim: usize,
    /// MFB factor count (k).
    pub mfb_factors: usize,
    /// MFB output size (l).
    pub mfb_hidden: usize,
    /// N-pair temperature.
    pub tau: f64,
    /// Candidates re-scored in stage two (N).
    pub select_n: usize,
    /// Stage-one pool sampled from while training stage two (M).
    pub select_m: usize,
    pub beam_width: usize,
    pub beam_max_len: usize,
    pub min_count: usize,
    pub init_scale: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub primary_epochs: usize,
    pub joint_epochs: usize,
    /// Turns whose gradients are summed before each optimizer step.
    pub accumulate: usize,
    pub seed: u64,
    pub data: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Discriminative,
            hidden: 32,
            emb_dim: 16,
            mfb_factors: 2,
            mfb_hidden: 64,
            tau: 0.25,
            select_n: 10,
            select_m: 30,
            beam_width: 15,
            beam_max_len: 20,
            min_count: 4,
            init_scale: 0.08,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            lr_decay: 0.25,
            decay_every: 7,
            primary_epochs: 7,
            joint_epochs: 15,
            accumulate: 1,
            seed: 0,
            data: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        // N and M are clamped to each turn's candidate count when used.
        if !(self.select_n >= 1 && self.select_n <= self.select_m) {
            return fail(format!("need 1 <= N <= M, got N={} M={}", self.select_n, self.select_m));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must be in (0, 1], got {}", self.tau));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("emb_dim", self.emb_dim),
            ("mfb_factors", self.mfb_factors),
            ("mfb_hidden", self.mfb_hidden),
            ("beam_width", self.beam_width),
            ("beam_max_len", self.beam_max_len),
            ("decay_every", self.decay_every),
            ("accumulate", self.accumulate),
            ("data.dialogs", d.dialogs),
            ("data.turns", d.turns),
            ("data.objects", d.objects),
            ("data.feature_dim", d.feature_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if d.candidates < 2 {
            return fail("data.candidates must be at least 2".into());
        }
        for (name, v) in [
            ("data.pronoun_fraction", d.pronoun_fraction),
            ("data.descriptive_fraction", d.descriptive_fraction),
            ("data.synonym_relevance", d.synonym_relevance),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.adam_eps > 0.0) {
            return fail("lr, lr_decay and adam_eps must be positive".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam betas must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based): decays by
    /// `lr_decay` after every `decay_every` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn total_epochs(&self) -> usize {
        self.primary_epochs + self.joint_epochs
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; dotted keys reach nested fields
    /// (`data.candidates=8`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = parsed;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
