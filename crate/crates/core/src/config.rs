//! Run configuration: one JSON document with a section per concern.

use std::fs;
use std::path::Path;

use coss_numerics::AdamWConfig;
use serde::{Deserialize, Serialize};

use crate::baselines::Paradigm;
use crate::error::{io_err, Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::rehearsal::KMeansConfig;
use crate::tokenizers::TokenizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = AdamWConfig::default();
        OptimizerConfig { beta1: d.beta1, beta2: d.beta2, eps: d.eps, weight_decay: d.weight_decay }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fixed number of updates per stage, overriding `epochs`; used to give
    /// every paradigm the same budget.
    pub steps_per_stage: Option<usize>,
    /// Master seed for every random stream of a run.
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { epochs: 30, warmup_epochs: 4, batch_size: 32, peak_lr: 1.5e-4, steps_per_stage: None, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    KMeans,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayLoss {
    /// Feature distillation against the previous-stage teacher.
    Distill,
    /// The replayed modality's own masked-modeling task.
    Pretext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RehearsalConfig {
    /// Fraction of each finished stage kept in the buffer.
    pub ratio: f64,
    pub per_cluster: usize,
    pub kmeans: KMeansConfig,
    pub sampling: SamplingStrategy,
    pub replay: ReplayLoss,
    pub mixup: bool,
    pub fd_shared_mask: bool,
    pub embed_batch_size: usize,
}

impl Default for RehearsalConfig {
    fn default() -> Self {
        RehearsalConfig {
            ratio: 0.05,
            per_cluster: 5,
            kmeans: KMeansConfig::default(),
            sampling: SamplingStrategy::KMeans,
            replay: ReplayLoss::Distill,
            mixup: true,
            fd_shared_mask: true,
            embed_batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Corpus directory written by `gen-data`.
    pub corpus: Option<String>,
    /// Samples per stream when generating a corpus.
    pub count: usize,
    /// Held-out samples per stream used for retention evaluation.
    pub eval_count: usize,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { corpus: None, count: 200, eval_count: 32, vocab_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Stream names in training order.
    pub stages: Vec<String>,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub rehearsal: RehearsalConfig,
    pub data: DataConfig,
    pub paradigm: Paradigm,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stages: ["text", "image2d", "volume3d-a", "volume3d-b", "image2d-b"].map(String::from).to_vec(),
            model: ModelConfig::default(),
            tokenizer: TokenizerConfig::default(),
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            rehearsal: RehearsalConfig::default(),
            data: DataConfig::default(),
            paradigm: Paradigm::Medcoss,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].contains(s) {
                return bad(format!("stage `{s}` listed twice"));
            }
        }
        let s = &self.scheduler;
        if s.batch_size == 0 {
            return bad("scheduler.batch_size must be ≥ 1".into());
        }
        if s.steps_per_stage.is_none() && s.epochs == 0 {
            return bad("scheduler.epochs must be ≥ 1".into());
        }
        if s.warmup_epochs > s.epochs.max(1) {
            return bad("scheduler.warmup_epochs exceeds epochs".into());
        }
        if !(s.peak_lr.is_finite() && s.peak_lr >= 0.0) {
            return bad("scheduler.peak_lr must be finite and non-negative".into());
        }
        let r = &self.rehearsal;
        if !(0.0..=1.0).contains(&r.ratio) || r.per_cluster == 0 || r.embed_batch_size == 0 {
            return bad("rehearsal.ratio must lie in [0, 1] and per_cluster/embed_batch_size be ≥ 1".into());
        }
        if self.data.vocab_size < 5 {
            return bad("data.vocab_size must be ≥ 5".into());
        }
        self.tokenizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Model config with sequence geometry taken from the tokenizer.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        self.model.clone().with_geometry(&self.tokenizer, vocab_size)
    }
}
