//! Comparison paradigms: joint training with shared or per-stream decoders,
//! sequential training without retention, and experience replay with random
//! sampling.

use std::path::Path;

use coss_numerics::Element;
use serde::{Deserialize, Serialize};

use crate::config::{ReplayLoss, RunConfig, SamplingStrategy};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::DecoderKey;
use crate::rehearsal::RehearsalBuffer;
use crate::scheduler::{eval_streams, order_datasets, run_sequential, Feed, Retention, RunOutput, Source, StepObserver, Trainer};
use crate::tokenizers::{Modality, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Sequential stages with a k-means buffer, mixup and distillation
    /// (each piece switchable through the rehearsal section).
    Medcoss,
    /// Sequential stages with no buffer.
    SequentialPlain,
    /// Sequential stages replaying a random buffer with the pretext task.
    ErRandom,
    /// One phase over all streams, one decoder per input dimensionality.
    JointShared,
    /// One phase over all streams, one decoder per stream.
    JointModal,
}

impl Paradigm {
    pub fn is_joint(self) -> bool {
        matches!(self, Paradigm::JointShared | Paradigm::JointModal)
    }
}

/// Decoder slot of a stream under joint training.
pub fn joint_decoder_key(paradigm: Paradigm, slot: usize, modality: Modality) -> DecoderKey {
    match paradigm {
        Paradigm::JointShared => match modality {
            Modality::Text => 0,
            Modality::Image2d => 1,
            Modality::Volume3d => 2,
        },
        _ => slot as DecoderKey,
    }
}

/// Runs the configured paradigm. `eval` holds held-out streams for the
/// retention log; `out` receives checkpoints and logs.
pub fn run_pipeline<F: Element>(
    cfg: &RunConfig,
    tokenizer: &Tokenizer,
    train: &[Dataset],
    eval: &[Dataset],
    out: Option<&Path>,
) -> Result<RunOutput<F>> {
    run_pipeline_observed(cfg, tokenizer, train, eval, out, None)
}

/// [`run_pipeline`] with a callback after every update.
pub fn run_pipeline_observed<'o, F: Element>(
    cfg: &RunConfig,
    tokenizer: &Tokenizer,
    train: &[Dataset],
    eval: &[Dataset],
    out: Option<&Path>,
    observer: Option<&'o mut StepObserver<'o, F>>,
) -> Result<RunOutput<F>> {
    match cfg.paradigm {
        Paradigm::Medcoss => {
            let r = Retention { ratio: cfg.rehearsal.ratio, sampling: cfg.rehearsal.sampling };
            run_sequential(cfg, tokenizer, train, eval, Some(r), out, observer)
        }
        Paradigm::SequentialPlain => run_sequential(cfg, tokenizer, train, eval, None, out, observer),
        Paradigm::ErRandom => {
            let mut er = cfg.clone();
            er.rehearsal.sampling = SamplingStrategy::Random;
            er.rehearsal.replay = ReplayLoss::Pretext;
            er.rehearsal.mixup = false;
            let r = Retention { ratio: er.rehearsal.ratio, sampling: SamplingStrategy::Random };
            run_sequential(&er, tokenizer, train, eval, Some(r), out, observer)
        }
        Paradigm::JointShared | Paradigm::JointModal => run_joint(cfg, tokenizer, train, eval, out, observer),
    }
}

/// Single phase over the union of every stage stream; each batch holds one
/// stream. The step budget equals the sum of the sequential stage budgets.
pub fn run_joint<'o, F: Element>(
    cfg: &RunConfig,
    tokenizer: &Tokenizer,
    train: &[Dataset],
    eval: &[Dataset],
    out: Option<&Path>,
    observer: Option<&'o mut StepObserver<'o, F>>,
) -> Result<RunOutput<F>> {
    let ordered = order_datasets(cfg, train)?;
    let mut trainer = Trainer::<F>::new(cfg, tokenizer, out, observer)?;
    let key = |j: usize| joint_decoder_key(cfg.paradigm, j, ordered[j].modality);
    let mut feeds = Vec::new();
    for (j, ds) in ordered.iter().enumerate() {
        if trainer.model.decoder(key(j)).is_none() {
            trainer.model.add_decoder(key(j), ds.modality, cfg.scheduler.seed)?;
        }
        feeds.push(Feed {
            source: Source::Current(j),
            name: ds.name.clone(),
            modality: ds.modality,
            samples: ds.samples.iter().collect(),
            decoder: key(j),
            replay: false,
        });
    }
    let budget = cfg.scheduler.steps_per_stage.map(|s| s * ordered.len());
    trainer.train_phase(1, &feeds, budget, None)?;
    let evals = eval_streams(&ordered, eval, key);
    trainer.evaluate(1, &evals)?;
    trainer.save_checkpoint(1)?;
    trainer.write_logs(None)?;
    Ok(RunOutput {
        model: trainer.model,
        buffer: RehearsalBuffer::new(),
        metrics: trainer.metrics,
        retention: trainer.retention,
        teacher_checks: Vec::new(),
    })
}
