#![allow(dead_code)]

use coss_core::config::RunConfig;
use coss_core::data::{generate_stream, Dataset, Split, SyntheticSpec};
use coss_core::scheduler::build_tokenizer;
use coss_core::tokenizers::{Tokenizer, TokenizerConfig};

/// Small geometry: 24-token text, 16×16 images and 8³ volumes in 4-wide patches.
pub fn toy_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        text_len: 24,
        image_size: [16, 16],
        volume_size: [8, 8, 8],
        patch2d: [4, 4],
        patch3d: [4, 4, 4],
        channels: 1,
    }
}

pub fn toy_config(stages: &[&str]) -> RunConfig {
    let mut cfg = RunConfig { stages: stages.iter().map(|s| s.to_string()).collect(), tokenizer: toy_tokenizer(), ..RunConfig::default() };
    cfg.model.embed_dim = 32;
    cfg.model.depth = 2;
    cfg.model.heads = 2;
    cfg.model.decoder_dim = 32;
    cfg.model.decoder_depth = 1;
    cfg.model.decoder_heads = 2;
    cfg.scheduler.batch_size = 8;
    cfg.scheduler.epochs = 2;
    cfg.scheduler.warmup_epochs = 1;
    cfg.scheduler.peak_lr = 1e-3;
    cfg.data.vocab_size = 64;
    cfg
}

pub struct ToyData {
    pub train: Vec<Dataset>,
    pub eval: Vec<Dataset>,
    pub tokenizer: Tokenizer,
}

pub fn toy_data(cfg: &RunConfig, count: usize, eval_count: usize, seed: u64) -> ToyData {
    let spec = SyntheticSpec::five_modalities(cfg.tokenizer.clone(), count, eval_count);
    let gen = |split| -> Vec<Dataset> {
        spec.streams.iter().map(|s| generate_stream(s, &spec.tokenizer, seed, split).unwrap()).collect()
    };
    let train = gen(Split::Train);
    let eval = gen(Split::Eval);
    let tokenizer = build_tokenizer(cfg, &train).unwrap();
    ToyData { train, eval, tokenizer }
}
