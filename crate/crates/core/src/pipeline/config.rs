//! Pipeline configuration: `key = value` files with `#` comments, CLI
//! overrides, and a canonical fingerprint for run reports.

use super::data::EvidenceSources;
use super::reader::HeadKind;
use super::{PipelineError, Result};
use crate::capsule::MarginLossParams;
use crate::encoder::EncoderConfig;
use crate::numerics::{OptimizerConfig, OptimizerMethod};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Flat string map the config file and flag overrides collapse into.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigMap(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Later maps win.
    pub fn merged_with(mut self, overrides: &ConfigMap) -> Self {
        for (k, v) in &overrides.0 {
            self.0.insert(k.clone(), v.clone());
        }
        self
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| {
                PipelineError::Config(format!("key `{key}`: cannot parse `{v}`"))
            }),
        }
    }
}

/// Everything a reader training / evaluation run needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub capsule_dim: usize,
    pub routing_iters: usize,
    pub margins: MarginLossParams,
    pub head: HeadKind,
    pub per_pair_attention: bool,
    pub routing_per_option: bool,
    pub num_options: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_proportion: f64,
    pub optimizer_method: OptimizerMethod,
    pub epochs: usize,
    pub patience: usize,
    pub evidence: EvidenceSources,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            encoder: EncoderConfig::default(),
            capsule_dim: 16,
            routing_iters: 3,
            margins: MarginLossParams::default(),
            head: HeadKind::Capsule,
            per_pair_attention: false,
            // scoped routing binds capsules to their option's columns;
            // position-shared votes over all columns cannot
            routing_per_option: true,
            num_options: 4,
            batch_size: 24,
            learning_rate: 1e-3,
            warmup_proportion: 0.1,
            optimizer_method: OptimizerMethod::Adam,
            epochs: 5,
            patience: 3,
            evidence: EvidenceSources::Both,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let base = PipelineConfig::default();
        let encoder = EncoderConfig {
            d: map.parse_as("d", base.encoder.d)?,
            layers: map.parse_as("layers", base.encoder.layers)?,
            heads: map.parse_as("heads", base.encoder.heads)?,
            max_seq_len: map.parse_as("max_seq_len", base.encoder.max_seq_len)?,
            vocab_size: map.parse_as("vocab_cap", base.encoder.vocab_size)?,
            seed: map.parse_as("seed", base.encoder.seed)?,
        };
        encoder.validate().map_err(PipelineError::Config)?;
        let head = match map.get("head").unwrap_or("capsule") {
            "capsule" => HeadKind::Capsule,
            "maxpool" => HeadKind::Maxpool,
            other => {
                return Err(PipelineError::Config(format!(
                    "head must be capsule|maxpool, got `{other}`"
                )))
            }
        };
        let optimizer_method = match map.get("optimizer").unwrap_or("adam") {
            "adam" => OptimizerMethod::Adam,
            "sgd" => OptimizerMethod::Sgd,
            other => {
                return Err(PipelineError::Config(format!(
                    "optimizer must be adam|sgd, got `{other}`"
                )))
            }
        };
        let evidence = match map.get("evidence") {
            None => base.evidence,
            Some(v) => EvidenceSources::parse(v)?,
        };
        let cfg = PipelineConfig {
            encoder,
            capsule_dim: map.parse_as("capsule_dim", base.capsule_dim)?,
            routing_iters: map.parse_as("routing_iters", base.routing_iters)?,
            margins: MarginLossParams {
                m_plus: map.parse_as("m_plus", base.margins.m_plus)?,
                m_minus: map.parse_as("m_minus", base.margins.m_minus)?,
                lambda: map.parse_as("lambda_margin", base.margins.lambda)?,
            },
            head,
            per_pair_attention: map.parse_as("per_pair_attention", base.per_pair_attention)?,
            routing_per_option: map.parse_as("routing_per_option", base.routing_per_option)?,
            num_options: map.parse_as("num_options", base.num_options)?,
            batch_size: map.parse_as("batch_size", base.batch_size)?,
            learning_rate: map.parse_as("learning_rate", base.learning_rate)?,
            warmup_proportion: map.parse_as("warmup_proportion", base.warmup_proportion)?,
            optimizer_method,
            epochs: map.parse_as("epochs", base.epochs)?,
            patience: map.parse_as("patience", base.patience)?,
            evidence,
            seed: map.parse_as("seed", base.seed)?,
        };
        if cfg.routing_iters < 1 {
            return Err(PipelineError::Config("routing_iters must be ≥ 1".into()));
        }
        if cfg.num_options < 2 {
            return Err(PipelineError::Config("num_options must be ≥ 2".into()));
        }
        let m = &cfg.margins;
        if !(0.0 < m.m_minus && m.m_minus < m.m_plus && m.m_plus < 1.0) || m.lambda <= 0.0 {
            return Err(PipelineError::Config(format!(
                "margins need 0 < m_minus < m_plus < 1 and lambda_margin > 0, got \
                 m_plus={}, m_minus={}, lambda_margin={}",
                m.m_plus, m.m_minus, m.lambda
            )));
        }
        Ok(cfg)
    }

    pub fn optimizer(&self, total_steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            method: self.optimizer_method,
            learning_rate: self.learning_rate,
            warmup_proportion: self.warmup_proportion,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Canonical `key = value` dump; the fingerprint hashes this.
    pub fn canonical(&self) -> String {
        let head = match self.head {
            HeadKind::Capsule => "capsule",
            HeadKind::Maxpool => "maxpool",
        };
        let optimizer = match self.optimizer_method {
            OptimizerMethod::Adam => "adam",
            OptimizerMethod::Sgd => "sgd",
        };
        format!(
            "batch_size = {}\ncapsule_dim = {}\nd = {}\nepochs = {}\nevidence = {}\n\
             head = {}\nheads = {}\nlambda_margin = {}\nlayers = {}\nlearning_rate = {}\n\
             m_minus = {}\nm_plus = {}\nmax_seq_len = {}\nnum_options = {}\noptimizer = {}\n\
             patience = {}\nper_pair_attention = {}\nrouting_iters = {}\n\
             routing_per_option = {}\nseed = {}\nvocab_cap = {}\nwarmup_proportion = {}\n",
            self.batch_size,
            self.capsule_dim,
            self.encoder.d,
            self.epochs,
            self.evidence.as_str(),
            head,
            self.encoder.heads,
            self.margins.lambda,
            self.encoder.layers,
            self.learning_rate,
            self.margins.m_minus,
            self.margins.m_plus,
            self.encoder.max_seq_len,
            self.num_options,
            optimizer,
            self.patience,
            self.per_pair_attention,
            self.routing_iters,
            self.routing_per_option,
            self.seed,
            self.encoder.vocab_size,
            self.warmup_proportion,
        )
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
