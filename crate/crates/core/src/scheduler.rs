//! Sequential pre-training: per-stage training on the current stream plus
//! the rehearsal buffer, teacher snapshots, buffer updates and the
//! warmup + cosine learning-rate schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use coss_numerics::{AdamW, Element, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ReplayLoss, RunConfig, SamplingStrategy};
use crate::data::{Dataset, Sample};
use crate::error::{invalid, io_err, Error, Result};
use crate::model::{DecoderKey, FrozenTeacher, Model};
use crate::pretext::pretext_loss;
use crate::rehearsal::{
    extract_embeddings, fd_loss, kmeans, prepare_fd_inputs, random_selection, select_buffer_samples, RehearsalBuffer,
    SamplingConfig,
};
use crate::rng::{stable_hash, stream_rng, Stream};
use crate::tokenizers::{Modality, Tokenizer, Vocabulary};

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Where a batch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// A stream trained in the current phase (its slot index).
    Current(usize),
    /// Buffer samples retained from a finished stage (1-based stage number).
    Buffer(usize),
}

/// Indices into one source, all of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedBatch {
    pub source: Source,
    pub indices: Vec<usize>,
}

/// One epoch over the union of `sources` (each `(tag, size)`): the union is
/// shuffled, then consecutive draws are queued per source and a batch is
/// emitted whenever a queue fills. Partial queues are flushed at the end in
/// source order.
pub fn plan_epoch(sources: &[(Source, usize)], batch_size: usize, rng: &mut crate::rng::Rng) -> Vec<PlannedBatch> {
    let mut union: Vec<(usize, usize)> = sources.iter().enumerate().flat_map(|(s, &(_, n))| (0..n).map(move |i| (s, i))).collect();
    union.shuffle(rng);
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
    let mut out = Vec::new();
    for (s, i) in union {
        queues[s].push(i);
        if queues[s].len() == batch_size {
            out.push(PlannedBatch { source: sources[s].0, indices: std::mem::take(&mut queues[s]) });
        }
    }
    for (s, q) in queues.into_iter().enumerate() {
        if !q.is_empty() {
            out.push(PlannedBatch { source: sources[s].0, indices: q });
        }
    }
    out
}

/// Batches for a whole phase plus the warmup length. With a fixed step
/// budget epochs are planned until the budget is filled, then truncated.
pub fn plan_phase(
    sources: &[(Source, usize)],
    cfg: &crate::config::SchedulerConfig,
    budget: Option<usize>,
    rng: &mut crate::rng::Rng,
) -> (Vec<PlannedBatch>, usize) {
    let mut batches = Vec::new();
    match budget {
        Some(steps) => {
            while batches.len() < steps {
                let epoch = plan_epoch(sources, cfg.batch_size, rng);
                if epoch.is_empty() {
                    break;
                }
                batches.extend(epoch);
            }
            batches.truncate(steps);
        }
        None => {
            for _ in 0..cfg.epochs {
                batches.extend(plan_epoch(sources, cfg.batch_size, rng));
            }
        }
    }
    let epochs = cfg.epochs.max(1) as f64;
    let warmup = (batches.len() as f64 * cfg.warmup_epochs as f64 / epochs).round() as usize;
    let warmup = warmup.min(batches.len());
    (batches, warmup)
}

/// One optimizer update, as written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub source: String,
    pub loss: f64,
    pub lr: f64,
}

/// Held-out pretext loss of one stream, measured after a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionRecord {
    pub after_stage: usize,
    pub dataset: String,
    pub modality: Modality,
    pub loss: f64,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput<F> {
    pub model: Model<F>,
    pub buffer: RehearsalBuffer,
    pub metrics: Vec<StepRecord>,
    pub retention: Vec<RetentionRecord>,
    /// Teacher checksums at the start and end of each stage that used one.
    pub teacher_checks: Vec<(usize, String, String)>,
}

impl<F> RunOutput<F> {
    /// Loss of `dataset` recorded after stage `after`.
    pub fn retention_loss(&self, dataset: &str, after: usize) -> Option<f64> {
        self.retention.iter().find(|r| r.dataset == dataset && r.after_stage == after).map(|r| r.loss)
    }

    /// Mean held-out loss of every stream except the last one trained,
    /// measured after the final stage.
    pub fn retention_score(&self) -> f64 {
        let last = self.retention.iter().map(|r| r.after_stage).max().unwrap_or(0);
        let finals: Vec<&RetentionRecord> = self.retention.iter().filter(|r| r.after_stage == last).collect();
        let past = &finals[..finals.len().saturating_sub(1)];
        if past.is_empty() {
            return f64::NAN;
        }
        past.iter().map(|r| r.loss).sum::<f64>() / past.len() as f64
    }

    /// Mean held-out loss over every stream after the final stage.
    pub fn combined_score(&self) -> f64 {
        let last = self.retention.iter().map(|r| r.after_stage).max().unwrap_or(0);
        let finals: Vec<f64> = self.retention.iter().filter(|r| r.after_stage == last).map(|r| r.loss).collect();
        finals.iter().sum::<f64>() / finals.len().max(1) as f64
    }
}

/// Builds the word vocabulary from every text stream in `datasets`.
pub fn build_tokenizer(cfg: &RunConfig, datasets: &[Dataset]) -> Result<Tokenizer> {
    let texts: Vec<&str> = datasets.iter().filter(|d| d.modality == Modality::Text).flat_map(|d| d.texts()).collect();
    let vocab = if texts.is_empty() {
        Vocabulary::build(&[""], cfg.data.vocab_size)?
    } else {
        Vocabulary::build(&texts, cfg.data.vocab_size)?
    };
    Tokenizer::new(cfg.tokenizer.clone(), vocab)
}

/// Samples fed to the trainer under one source tag.
pub(crate) struct Feed<'a> {
    pub source: Source,
    pub name: String,
    pub modality: Modality,
    pub samples: Vec<&'a Sample>,
    pub decoder: DecoderKey,
    pub replay: bool,
}

/// Callback run after every optimizer update with the step record and the
/// updated model.
pub type StepObserver<'o, F> = dyn FnMut(&StepRecord, &Model<F>) + 'o;

/// Mutable training context shared by the sequential and joint loops.
pub(crate) struct Trainer<'a, 'o, F> {
    pub cfg: &'a RunConfig,
    pub tokenizer: &'a Tokenizer,
    pub model: Model<F>,
    pub global_step: usize,
    pub metrics: Vec<StepRecord>,
    pub retention: Vec<RetentionRecord>,
    pub out: Option<PathBuf>,
    pub observer: Option<&'o mut StepObserver<'o, F>>,
}

impl<'a, 'o, F: Element> Trainer<'a, 'o, F> {
    pub fn new(cfg: &'a RunConfig, tokenizer: &'a Tokenizer, out: Option<&Path>, observer: Option<&'o mut StepObserver<'o, F>>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(tokenizer.vocab.len()), cfg.scheduler.seed)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(Trainer { cfg, tokenizer, model, global_step: 0, metrics: Vec::new(), retention: Vec::new(), out: out.map(Path::to_path_buf), observer })
    }

    /// Runs the planned batches of one phase.
    pub fn train_phase(&mut self, stage: usize, feeds: &[Feed<'_>], budget: Option<usize>, teacher: Option<&FrozenTeacher<F>>) -> Result<()> {
        let sched = &self.cfg.scheduler;
        let seed = sched.seed;
        let sources: Vec<(Source, usize)> = feeds.iter().map(|f| (f.source, f.samples.len())).collect();
        let (plan, warmup) = plan_phase(&sources, sched, budget, &mut stream_rng(seed, Stream::Data, stage as u64));
        let total = plan.len();
        let mut opt = AdamW::new(self.cfg.optimizer.adamw());
        let rcfg = &self.cfg.rehearsal;
        for (i, batch) in plan.iter().enumerate() {
            let feed = feeds.iter().find(|f| f.source == batch.source).expect("planned source exists");
            let lr = lr_schedule(i, warmup, total, sched.peak_lr);
            let samples: Vec<&Sample> = batch.indices.iter().map(|&k| feed.samples[k]).collect();
            let tokens = self.tokenizer.batch::<F>(feed.modality, &samples)?;
            let step = self.global_step as u64;
            let mut mask_rng = stream_rng(seed, Stream::Mask, step);
            let mut g = Graph::new();
            let loss = match (feed.replay, teacher, rcfg.replay) {
                (true, Some(teacher), ReplayLoss::Distill) => {
                    let mut mixup_rng = stream_rng(seed, Stream::Mixup, step);
                    let inputs = prepare_fd_inputs(&tokens, rcfg.mixup, rcfg.fd_shared_mask, &mut mixup_rng, &mut mask_rng)?;
                    fd_loss(&mut g, &self.model, teacher, &inputs)?
                }
                (true, None, ReplayLoss::Distill) => return invalid("distillation replay without a teacher"),
                (true, _, ReplayLoss::Pretext) if rcfg.mixup => {
                    let mixed = crate::rehearsal::mix_batch(&tokens, &mut stream_rng(seed, Stream::Mixup, step));
                    pretext_loss(&mut g, &self.model, feed.decoder, &mixed, &mut mask_rng)?
                }
                _ => pretext_loss(&mut g, &self.model, feed.decoder, &tokens, &mut mask_rng)?,
            };
            let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            let tag = format!("{}:{}", if feed.replay { "buffer" } else { "current" }, feed.name);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { stage, step: self.global_step, source_tag: tag });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut self.model.params, &grads, lr)?;
            let record = StepRecord { step: self.global_step, stage, source: tag, loss: value, lr };
            if let Some(observe) = self.observer.as_mut() {
                observe(&record, &self.model);
            }
            self.metrics.push(record);
            self.global_step += 1;
        }
        Ok(())
    }

    /// Held-out pretext loss of each stream with its decoder; masks depend
    /// only on the run seed and the stream name, so values are comparable
    /// across stages.
    pub fn evaluate(&mut self, stage: usize, evals: &[(&Dataset, DecoderKey)]) -> Result<()> {
        for &(ds, key) in evals {
            let loss = evaluate_pretext(&self.model, self.tokenizer, ds, key, self.cfg.scheduler.seed, self.cfg.scheduler.batch_size)?;
            self.retention.push(RetentionRecord { after_stage: stage, dataset: ds.name.clone(), modality: ds.modality, loss });
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, stage: usize) -> Result<()> {
        if let Some(dir) = &self.out {
            let meta = serde_json::json!({ "stage": stage, "paradigm": self.cfg.paradigm, "seed": self.cfg.scheduler.seed });
            self.model.save(&dir.join(format!("stage_{stage}.ckpt")), meta)?;
            self.tokenizer.vocab.save(&dir.join("vocab.tsv"))?;
        }
        Ok(())
    }

    pub fn write_logs(&self, buffer: Option<&RehearsalBuffer>) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let mut text = String::new();
        for r in &self.metrics {
            writeln!(text, "{}", serde_json::to_string(r).expect("record serializes")).unwrap();
        }
        let path = dir.join("metrics.jsonl");
        fs::write(&path, text).map_err(io_err(&path))?;
        let mut text = String::new();
        for r in &self.retention {
            writeln!(text, "{}", serde_json::to_string(r).expect("record serializes")).unwrap();
        }
        let path = dir.join("retention.jsonl");
        fs::write(&path, text).map_err(io_err(&path))?;
        if let Some(buffer) = buffer {
            buffer.write_manifest(&dir.join("buffer.tsv"))?;
        }
        Ok(())
    }
}

/// Mean masked-modeling loss over a held-out stream.
pub fn evaluate_pretext<F: Element>(
    model: &Model<F>,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    key: DecoderKey,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return invalid(format!("evaluation stream {} is empty", dataset.name));
    }
    let mut total = 0.0;
    for (b, chunk) in dataset.samples.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = tokenizer.batch::<F>(dataset.modality, &refs)?;
        let mut rng = stream_rng(seed ^ stable_hash(&dataset.name), Stream::Eval, b as u64);
        let mut g = Graph::new();
        let loss = pretext_loss(&mut g, model, key, &batch, &mut rng)?;
        total += g.value(loss).item().to_f64().unwrap() * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Retention settings in effect for a sequential run, if any.
#[derive(Clone, Debug)]
pub(crate) struct Retention {
    pub ratio: f64,
    pub sampling: SamplingStrategy,
}

/// Sequential training over `train` in config stage order. `eval` supplies
/// held-out streams (matched by name) for the retention log.
pub(crate) fn run_sequential<'o, F: Element>(
    cfg: &RunConfig,
    tokenizer: &Tokenizer,
    train: &[Dataset],
    eval: &[Dataset],
    retention: Option<Retention>,
    out: Option<&Path>,
    observer: Option<&'o mut StepObserver<'o, F>>,
) -> Result<RunOutput<F>> {
    let ordered = order_datasets(cfg, train)?;
    let mut trainer = Trainer::<F>::new(cfg, tokenizer, out, observer)?;
    let mut buffer = RehearsalBuffer::new();
    let mut teacher_checks = Vec::new();
    let seed = cfg.scheduler.seed;
    for (i, ds) in ordered.iter().enumerate() {
        let stage = i + 1;
        if ds.is_empty() {
            return invalid(format!("stage {stage} stream {} is empty", ds.name));
        }
        let distill = retention.is_some() && cfg.rehearsal.replay == ReplayLoss::Distill && !buffer.is_empty();
        let teacher = distill.then(|| FrozenTeacher::snapshot(&trainer.model));
        trainer.model.add_decoder(stage as DecoderKey, ds.modality, seed)?;

        let mut feeds = vec![Feed {
            source: Source::Current(0),
            name: ds.name.clone(),
            modality: ds.modality,
            samples: ds.samples.iter().collect(),
            decoder: stage as DecoderKey,
            replay: false,
        }];
        for (past, group) in buffer_by_stage(&buffer) {
            let first = group[0];
            feeds.push(Feed {
                source: Source::Buffer(past),
                name: first.dataset.clone(),
                modality: first.modality,
                samples: group.iter().map(|e| &e.sample).collect(),
                decoder: past as DecoderKey,
                replay: true,
            });
        }
        trainer.train_phase(stage, &feeds, cfg.scheduler.steps_per_stage, teacher.as_ref())?;
        if let Some(t) = &teacher {
            teacher_checks.push((stage, t.checksum().to_string(), t.recomputed_checksum()));
        }

        if let Some(r) = &retention {
            let selection = match r.sampling {
                SamplingStrategy::Random => random_selection(ds.len(), r.ratio, &mut stream_rng(seed, Stream::Sampling, stage as u64)),
                SamplingStrategy::KMeans => {
                    if r.ratio == 0.0 {
                        Vec::new()
                    } else {
                        let scfg = SamplingConfig {
                            kmeans: cfg.rehearsal.kmeans.clone(),
                            ..SamplingConfig::for_ratio(r.ratio, cfg.rehearsal.per_cluster)
                        };
                        let emb = extract_embeddings(&trainer.model, tokenizer, ds, cfg.rehearsal.embed_batch_size)?;
                        let clusters = kmeans(&emb, scfg.clusters(ds.len()), &scfg.kmeans, &mut stream_rng(seed, Stream::KMeans, stage as u64))?;
                        select_buffer_samples(&emb, &clusters, scfg.per_cluster)
                    }
                }
            };
            buffer.extend_from(stage, ds, &selection);
        }

        let evals = eval_streams(&ordered[..=i], eval, |j| (j + 1) as DecoderKey);
        trainer.evaluate(stage, &evals)?;
        trainer.save_checkpoint(stage)?;
        trainer.write_logs(retention.as_ref().map(|_| &buffer))?;
        log::info!("stage {stage} ({}) done, buffer holds {}", ds.name, buffer.len());
    }
    Ok(RunOutput { model: trainer.model, buffer, metrics: trainer.metrics, retention: trainer.retention, teacher_checks })
}

fn buffer_by_stage(buffer: &RehearsalBuffer) -> Vec<(usize, Vec<&crate::rehearsal::BufferEntry>)> {
    let mut groups: Vec<(usize, Vec<&crate::rehearsal::BufferEntry>)> = Vec::new();
    for e in buffer.entries() {
        match groups.iter_mut().find(|(s, _)| *s == e.stage) {
            Some(g) => g.1.push(e),
            None => groups.push((e.stage, vec![e])),
        }
    }
    groups
}

/// Training streams in config stage order.
pub(crate) fn order_datasets<'d>(cfg: &RunConfig, train: &'d [Dataset]) -> Result<Vec<&'d Dataset>> {
    cfg.stages
        .iter()
        .map(|name| train.iter().find(|d| &d.name == name).ok_or_else(|| Error::Config(format!("no data for stage `{name}`"))))
        .collect()
}

/// Held-out streams for `trained`, paired with their decoder keys; streams
/// without held-out data are skipped.
pub(crate) fn eval_streams<'d>(
    trained: &[&Dataset],
    eval: &'d [Dataset],
    key: impl Fn(usize) -> DecoderKey,
) -> Vec<(&'d Dataset, DecoderKey)> {
    trained
        .iter()
        .enumerate()
        .filter_map(|(j, ds)| eval.iter().find(|e| e.name == ds.name && !e.is_empty()).map(|e| (e, key(j))))
        .collect()
}
