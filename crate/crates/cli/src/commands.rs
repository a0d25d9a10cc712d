use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use coss_core::baselines::{joint_decoder_key, run_pipeline};
use coss_core::config::{RunConfig, SamplingStrategy};
use coss_core::data::{generate_corpus, generate_stream, load_corpus, Dataset, Split, SyntheticSpec};
use coss_core::finetune::{build_task, finetune_task, TaskModel};
use coss_core::model::{read_checkpoint_info, DecoderKey, Model};
use coss_core::rehearsal::{extract_embeddings, kmeans, random_selection, select_buffer_samples, RehearsalBuffer, SamplingConfig};
use coss_core::rng::{stream_rng, Stream};
use coss_core::scheduler::{build_tokenizer, evaluate_pretext};
use coss_core::tokenizers::{Tokenizer, Vocabulary};
use serde_json::json;

use crate::{overrides, Cli, Failure, Verb};

type Outcome = Result<(), Failure>;

pub fn dispatch(cli: &Cli) -> Outcome {
    if cli.verb == Verb::InspectCkpt {
        let path = cli.path.as_ref().or(cli.ckpt.as_ref()).ok_or_else(|| Failure::Usage("inspect-ckpt needs a checkpoint path".into()))?;
        return inspect(path);
    }
    if cli.path.is_some() {
        return Err(Failure::Usage(format!("{:?} takes no positional argument", cli.verb)));
    }
    let cfg = resolve_config(cli)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let resolved = cli.out.join("config.json");
    fs::write(&resolved, cfg.to_json()).with_context(|| format!("writing {}", resolved.display()))?;
    log::info!("resolved config written to {} (seed {})", resolved.display(), cfg.scheduler.seed);
    match cli.verb {
        Verb::GenData => gen_data(&cfg, &cli.out),
        Verb::Pretrain => pretrain(&cfg, &cli.out),
        Verb::Finetune => finetune(&cfg, cli.ckpt.as_deref(), &cli.out),
        Verb::Evaluate => {
            let ckpt = cli.ckpt.as_deref().ok_or_else(|| Failure::Usage("evaluate needs --ckpt".into()))?;
            evaluate(&cfg, ckpt, &cli.out)
        }
        Verb::SampleBuffer => {
            let stream = cli.stream.as_deref().ok_or_else(|| Failure::Usage("sample-buffer needs --stream".into()))?;
            sample_buffer(&cfg, cli.ckpt.as_deref(), stream, &cli.out)
        }
        Verb::InspectCkpt => unreachable!(),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut doc = serde_json::to_value(&base).expect("config serializes");
    for o in &cli.overrides {
        overrides::apply(&mut doc, o).map_err(Failure::Config)?;
    }
    if let Some(seed) = cli.seed {
        doc["scheduler"]["seed"] = json!(seed);
        doc["finetune"]["seed"] = json!(seed);
    }
    Ok(RunConfig::from_json(&doc.to_string())?)
}

fn corpus_spec(cfg: &RunConfig) -> Result<SyntheticSpec, Failure> {
    let mut spec = SyntheticSpec::five_modalities(cfg.tokenizer.clone(), cfg.data.count, cfg.data.eval_count);
    for name in &cfg.stages {
        if spec.stream(name).is_none() {
            return Err(Failure::Config(format!("stage `{name}` is not a synthetic stream")));
        }
    }
    spec.streams.retain(|s| cfg.stages.contains(&s.name));
    Ok(spec)
}

struct Data {
    spec: SyntheticSpec,
    train: Vec<Dataset>,
    eval: Vec<Dataset>,
}

/// Training streams from `data.corpus`, or generated in memory; held-out
/// streams are always regenerated from the corpus spec and seed.
fn load_data(cfg: &RunConfig) -> Result<Data, Failure> {
    let (spec, seed, train) = match &cfg.data.corpus {
        Some(dir) => {
            let corpus = load_corpus(Path::new(dir))?;
            if corpus.spec.tokenizer != cfg.tokenizer {
                return Err(Failure::Config(format!("corpus {dir} was generated with a different tokenizer geometry")));
            }
            (corpus.spec, corpus.seed, corpus.datasets)
        }
        None => {
            let spec = corpus_spec(cfg)?;
            let train = spec
                .streams
                .iter()
                .map(|s| generate_stream(s, &spec.tokenizer, cfg.scheduler.seed, Split::Train))
                .collect::<Result<Vec<_>, _>>()?;
            (spec, cfg.scheduler.seed, train)
        }
    };
    let eval = spec.streams.iter().map(|s| generate_stream(s, &spec.tokenizer, seed, Split::Eval)).collect::<Result<Vec<_>, _>>()?;
    Ok(Data { spec, train, eval })
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Outcome {
    let spec = corpus_spec(cfg)?;
    let rows = generate_corpus(&spec, cfg.scheduler.seed, out)?;
    println!("wrote {} samples in {} streams to {}", rows.len(), spec.streams.len(), out.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Outcome {
    let data = load_data(cfg)?;
    let tokenizer = build_tokenizer(cfg, &data.train)?;
    let run = run_pipeline::<f32>(cfg, &tokenizer, &data.train, &data.eval, Some(out))?;
    let last = run.retention.iter().map(|r| r.after_stage).max().unwrap_or(0);
    for r in run.retention.iter().filter(|r| r.after_stage == last) {
        println!("{}\t{}\t{:.6}", r.dataset, r.modality, r.loss);
    }
    println!("steps {}  buffer {}  checksum {}", run.metrics.len(), run.buffer.len(), run.model.checksum());
    Ok(())
}

fn checkpoint_tokenizer(cfg: &RunConfig, ckpt: Option<&Path>, train: &[Dataset]) -> Result<Tokenizer, Failure> {
    let vocab_path = ckpt.and_then(Path::parent).map(|d| d.join("vocab.tsv"));
    match vocab_path.filter(|p| p.exists()) {
        Some(p) => Ok(Tokenizer::new(cfg.tokenizer.clone(), Vocabulary::load(&p)?)?),
        None => Ok(build_tokenizer(cfg, train)?),
    }
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model<f32>, Failure> {
    let (model, _) = Model::<f32>::load(path)?;
    let expected = cfg.model_config(model.config.vocab_size);
    if model.config.text_len != expected.text_len
        || model.config.image_tokens != expected.image_tokens
        || model.config.volume_tokens != expected.volume_tokens
        || model.config.patch_dim_2d != expected.patch_dim_2d
        || model.config.patch_dim_3d != expected.patch_dim_3d
    {
        return Err(Failure::Config(format!("{} was trained with a different tokenizer geometry", path.display())));
    }
    Ok(model)
}

fn write_report(out: &Path, report: &serde_json::Value) -> Outcome {
    let path = out.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    println!("{text}");
    Ok(())
}

fn finetune(cfg: &RunConfig, ckpt: Option<&Path>, out: &Path) -> Outcome {
    let ft = &cfg.finetune;
    let spec = SyntheticSpec::five_modalities(cfg.tokenizer.clone(), cfg.data.count, cfg.data.eval_count);
    let splits = build_task(&ft.task, &spec, ft.sizes, ft.seed)?;
    // Downstream tasks are visual, so the word vocabulary is never consulted.
    let tokenizer = Tokenizer::new(cfg.tokenizer.clone(), Vocabulary::build(&[""], cfg.data.vocab_size)?)?;
    let source = match ckpt {
        Some(path) => load_model(cfg, path)?,
        None => Model::new(cfg.model_config(tokenizer.vocab.len()), ft.seed)?,
    };
    let mut task = TaskModel::attach(&source, &cfg.tokenizer, splits.modality, ft.head, splits.n_classes, ft.seg_channels, ft.seed)?;
    let outcome = finetune_task(&mut task, &tokenizer, &splits, ft)?;
    write_report(
        out,
        &json!({
            "task": ft.task,
            "head": ft.head,
            "pretrained": ckpt.map(|p| p.display().to_string()),
            "test": outcome.test,
            "best_val": outcome.best_val,
            "best_epoch": outcome.best_epoch,
            "epoch_losses": outcome.epoch_losses,
        }),
    )
}

/// Decoder key of each configured stage under the configured paradigm.
fn stage_keys(cfg: &RunConfig, data: &Data) -> Vec<(String, DecoderKey)> {
    cfg.stages
        .iter()
        .enumerate()
        .filter_map(|(j, name)| {
            let modality = data.spec.stream(name)?.modality;
            let key = if cfg.paradigm.is_joint() { joint_decoder_key(cfg.paradigm, j, modality) } else { (j + 1) as DecoderKey };
            Some((name.clone(), key))
        })
        .collect()
}

fn evaluate(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Outcome {
    let data = load_data(cfg)?;
    let model = load_model(cfg, ckpt)?;
    let tokenizer = checkpoint_tokenizer(cfg, Some(ckpt), &data.train)?;
    let mut streams = Vec::new();
    for (name, key) in stage_keys(cfg, &data) {
        let Some(ds) = data.eval.iter().find(|d| d.name == name && !d.is_empty()) else { continue };
        if model.decoder(key).map(|d| d.modality()) != Some(ds.modality) {
            continue;
        }
        let loss = evaluate_pretext(&model, &tokenizer, ds, key, cfg.scheduler.seed, cfg.scheduler.batch_size)?;
        streams.push(json!({ "dataset": name, "modality": ds.modality, "decoder": key, "loss": loss }));
    }
    if streams.is_empty() {
        return Err(Failure::Config("no configured stage has both held-out data and a decoder in the checkpoint".into()));
    }
    let mean = streams.iter().map(|s| s["loss"].as_f64().unwrap()).sum::<f64>() / streams.len() as f64;
    write_report(out, &json!({ "checkpoint": ckpt.display().to_string(), "checksum": model.checksum(), "streams": streams, "mean_loss": mean }))
}

fn sample_buffer(cfg: &RunConfig, ckpt: Option<&Path>, stream: &str, out: &Path) -> Outcome {
    let data = load_data(cfg)?;
    let ds = data.train.iter().find(|d| d.name == stream).ok_or_else(|| Failure::Config(format!("no stream `{stream}`")))?;
    let model = match ckpt {
        Some(p) => load_model(cfg, p)?,
        None => Model::new(cfg.model_config(build_tokenizer(cfg, &data.train)?.vocab.len()), cfg.scheduler.seed)?,
    };
    let tokenizer = checkpoint_tokenizer(cfg, ckpt, &data.train)?;
    let r = &cfg.rehearsal;
    let seed = cfg.scheduler.seed;
    let selection = match r.sampling {
        SamplingStrategy::Random => random_selection(ds.len(), r.ratio, &mut stream_rng(seed, Stream::Sampling, 0)),
        SamplingStrategy::KMeans => {
            let scfg = SamplingConfig { kmeans: r.kmeans.clone(), ..SamplingConfig::for_ratio(r.ratio, r.per_cluster) };
            let emb = extract_embeddings(&model, &tokenizer, ds, r.embed_batch_size)?;
            let clusters = kmeans(&emb, scfg.clusters(ds.len()), &scfg.kmeans, &mut stream_rng(seed, Stream::KMeans, 0))?;
            select_buffer_samples(&emb, &clusters, scfg.per_cluster)
        }
    };
    let mut buffer = RehearsalBuffer::new();
    buffer.extend_from(0, ds, &selection);
    let path = out.join("buffer.tsv");
    buffer.write_manifest(&path)?;
    println!("selected {} of {} samples from {stream}; manifest at {}", buffer.len(), ds.len(), path.display());
    Ok(())
}

fn inspect(path: &PathBuf) -> Outcome {
    let info = read_checkpoint_info(path)?;
    let checksum = match info.tensors.first().map(|t| t.2) {
        Some("f64") => Model::<f64>::load(path)?.0.checksum(),
        _ => Model::<f32>::load(path)?.0.checksum(),
    };
    println!("checkpoint {} (format v{})", path.display(), info.version);
    println!("meta {}", info.meta);
    for (key, modality) in &info.decoders {
        println!("decoder {key}\t{modality}");
    }
    for (name, shape, dtype) in &info.tensors {
        println!("{name}\t{shape:?}\t{dtype}");
    }
    println!("parameters {}", info.param_count);
    println!("checksum {checksum}");
    Ok(())
}
