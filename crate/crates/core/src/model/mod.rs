//! Universal encoder shared by all modalities, per-stage decoders and the
//! frozen teacher snapshot.

mod checkpoint;
mod layers;

pub use checkpoint::{read_checkpoint_info, CheckpointInfo, CHECKPOINT_MAGIC};
pub use layers::{Block, Frozen, Init, Linear, Norm, Weights, INIT_STD};

use coss_numerics::{lit, Element, Graph, ParamId, ParamStore, Tensor, Var, NO_INDEX};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tokenizers::{Modality, TokenBatch, Tokens, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub image_tokens: usize,
    pub volume_tokens: usize,
    pub patch_dim_2d: usize,
    pub patch_dim_3d: usize,
    /// Prepend a learned CLS token to visual sequences (text always has one).
    pub visual_cls: bool,
    /// Use one positional table for both 2D and 3D sequences.
    pub share_visual_pos: bool,
    /// Backbone init seed; falls back to the run seed when unset.
    pub seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        ModelConfig {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            vocab_size: 1000,
            text_len: t.text_len,
            image_tokens: t.seq_len(Modality::Image2d),
            volume_tokens: t.seq_len(Modality::Volume3d),
            patch_dim_2d: t.patch_dim(Modality::Image2d),
            patch_dim_3d: t.patch_dim(Modality::Volume3d),
            visual_cls: true,
            share_visual_pos: false,
            seed: None,
        }
    }
}

impl ModelConfig {
    /// Copies sequence geometry from the tokenizer.
    pub fn with_geometry(mut self, t: &TokenizerConfig, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self.text_len = t.text_len;
        self.image_tokens = t.seq_len(Modality::Image2d);
        self.volume_tokens = t.seq_len(Modality::Volume3d);
        self.patch_dim_2d = t.patch_dim(Modality::Image2d);
        self.patch_dim_3d = t.patch_dim(Modality::Volume3d);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads)));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if self.depth == 0 || self.vocab_size < 5 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, mlp_ratio must be ≥ 1 and vocab_size ≥ 5".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text_len,
            Modality::Image2d => self.image_tokens,
            Modality::Volume3d => self.volume_tokens,
        }
    }

    pub fn patch_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => 0,
            Modality::Image2d => self.patch_dim_2d,
            Modality::Volume3d => self.patch_dim_3d,
        }
    }

    pub fn has_cls(&self, modality: Modality) -> bool {
        modality == Modality::Text || self.visual_cls
    }
}

/// Which positions of each sequence reach the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Keep {
    n: usize,
    len: usize,
    visible: Vec<bool>,
}

impl Keep {
    pub fn all(n: usize, len: usize) -> Self {
        Keep { n, len, visible: vec![true; n * len] }
    }

    pub fn from_visible(n: usize, len: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != n * len {
            return invalid(format!("keep grid of {} for {n}×{len}", visible.len()));
        }
        Ok(Keep { n, len, visible })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_visible(&self, sample: usize, pos: usize) -> bool {
        self.visible[sample * self.len + pos]
    }

    pub fn grid(&self) -> &[bool] {
        &self.visible
    }

    /// Visible positions of one sample in ascending order.
    pub fn positions(&self, sample: usize) -> Vec<usize> {
        (0..self.len).filter(|&p| self.is_visible(sample, p)).collect()
    }

    /// Shared visible count; errors when a sample keeps nothing or counts differ.
    pub fn visible_count(&self) -> Result<usize> {
        let mut count = None;
        for i in 0..self.n {
            let c = self.visible[i * self.len..(i + 1) * self.len].iter().filter(|&&v| v).count();
            if c == 0 {
                return invalid(format!("sample {i} keeps no tokens"));
            }
            match count {
                None => count = Some(c),
                Some(prev) if prev != c => return invalid("samples keep different numbers of tokens"),
                _ => {}
            }
        }
        count.ok_or_else(|| Error::Invalid("empty keep grid".into()))
    }
}

/// Tokenizer front-ends plus the shared encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub dim: usize,
    pub visual_cls: bool,
    pub token_embed: ParamId,
    pub patch_embed_2d: Linear,
    pub patch_embed_3d: Linear,
    pub pos_text: ParamId,
    pub pos_2d: ParamId,
    pub pos_3d: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

impl Backbone {
    fn new<F: Element>(init: &mut Init<'_, F>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let token_embed = init.normal("tokenizer.text.embed", &[cfg.vocab_size, d])?;
        let patch_embed_2d = Linear::new(init, "tokenizer.image2d.proj", cfg.patch_dim_2d, d)?;
        let patch_embed_3d = Linear::new(init, "tokenizer.volume3d.proj", cfg.patch_dim_3d, d)?;
        let pos_text = init.normal("tokenizer.text.pos", &[cfg.text_len, d])?;
        let (pos_2d, pos_3d) = if cfg.share_visual_pos {
            let shared = init.normal("tokenizer.visual.pos", &[cfg.image_tokens.max(cfg.volume_tokens), d])?;
            (shared, shared)
        } else {
            (init.normal("tokenizer.image2d.pos", &[cfg.image_tokens, d])?, init.normal("tokenizer.volume3d.pos", &[cfg.volume_tokens, d])?)
        };
        let cls = init.normal("encoder.cls", &[d])?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(init, &format!("encoder.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let norm = Norm::new(init, "encoder.norm", d)?;
        Ok(Backbone {
            dim: d,
            visual_cls: cfg.visual_cls,
            token_embed,
            patch_embed_2d,
            patch_embed_3d,
            pos_text,
            pos_2d,
            pos_3d,
            cls,
            blocks,
            norm,
        })
    }

    pub fn has_cls(&self, modality: Modality) -> bool {
        modality == Modality::Text || self.visual_cls
    }

    /// Embeds the visible tokens, adds positional embeddings by original
    /// position, prepends CLS and runs the encoder.
    pub fn encode<F: Element>(
        &self,
        g: &mut Graph<F>,
        w: &impl Weights<F>,
        batch: &TokenBatch<F>,
        keep: &Keep,
    ) -> Result<Encoded> {
        let (n, len, d) = (batch.n, batch.len, self.dim);
        if keep.n() != n || keep.len() != len {
            return invalid(format!("keep grid {}×{} for batch {n}×{len}", keep.n(), keep.len()));
        }
        let lv = keep.visible_count()?;
        let positions: Vec<Vec<usize>> = (0..n).map(|i| keep.positions(i)).collect();
        let tokens = match &batch.tokens {
            Tokens::Text { ids, .. } => {
                let table = w.var(g, self.token_embed);
                let vocab = g.shape(table)[0];
                let mut index = Vec::with_capacity(n * lv * d);
                for (i, pos) in positions.iter().enumerate() {
                    for &p in pos {
                        let id = ids[i * len + p] as usize;
                        if id >= vocab {
                            return invalid(format!("token id {id} outside vocabulary of {vocab}"));
                        }
                        index.extend((0..d).map(|j| id * d + j));
                    }
                }
                g.gather(table, index, &[n, lv, d])?
            }
            Tokens::Visual { patches, .. } => {
                let pd = patches.shape()[2];
                let input = g.constant(patches.clone());
                let input = if lv == len {
                    input
                } else {
                    let mut index = Vec::with_capacity(n * lv * pd);
                    for (i, pos) in positions.iter().enumerate() {
                        for &p in pos {
                            index.extend((0..pd).map(|j| (i * len + p) * pd + j));
                        }
                    }
                    g.gather(input, index, &[n, lv, pd])?
                };
                let proj = match batch.modality {
                    Modality::Image2d => &self.patch_embed_2d,
                    _ => &self.patch_embed_3d,
                };
                if proj.fan_in != pd {
                    return invalid(format!("patch dim {pd} but projection expects {}", proj.fan_in));
                }
                proj.forward(g, w, input)?
            }
        };
        let pos_table = w.var(g, self.pos_table(batch.modality));
        if g.shape(pos_table)[0] < len {
            return invalid(format!("{} sequence of {len} exceeds positional table", batch.modality));
        }
        let mut index = Vec::with_capacity(n * lv * d);
        for pos in &positions {
            for &p in pos {
                index.extend((0..d).map(|j| p * d + j));
            }
        }
        let pos = g.gather(pos_table, index, &[n, lv, d])?;
        let mut x = g.add(tokens, pos)?;
        let cls = self.has_cls(batch.modality);
        if cls {
            let c = w.var(g, self.cls);
            let c = g.gather(c, (0..n).flat_map(|_| 0..d).collect(), &[n, 1, d])?;
            x = g.concat(&[c, x], 1)?;
        }
        let seq = g.shape(x)[1];
        let key_bias = match &batch.tokens {
            Tokens::Text { valid, .. } => {
                let key_valid: Vec<Vec<bool>> = positions
                    .iter()
                    .enumerate()
                    .map(|(i, pos)| {
                        std::iter::once(true).take(cls as usize).chain(pos.iter().map(|&p| valid[i * len + p])).collect()
                    })
                    .collect();
                let heads = self.blocks.first().map_or(1, |b| b.heads);
                Some(key_padding_bias::<F>(&key_valid, heads, seq))
            }
            Tokens::Visual { .. } => None,
        };
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(g, w, x, key_bias.as_ref())?;
            layers.push(x);
        }
        let hidden = self.norm.forward(g, w, x)?;
        Ok(Encoded { hidden, layers, cls, positions, len })
    }

    fn pos_table(&self, modality: Modality) -> ParamId {
        match modality {
            Modality::Text => self.pos_text,
            Modality::Image2d => self.pos_2d,
            Modality::Volume3d => self.pos_3d,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embed];
        ids.extend(self.patch_embed_2d.params());
        ids.extend(self.patch_embed_3d.params());
        ids.extend([self.pos_text, self.pos_2d]);
        if self.pos_3d != self.pos_2d {
            ids.push(self.pos_3d);
        }
        ids.push(self.cls);
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids.extend(self.norm.params());
        ids.sort();
        ids
    }
}

/// `[N·heads, S, S]` additive bias, −1e9 on padded keys.
fn key_padding_bias<F: Element>(key_valid: &[Vec<bool>], heads: usize, seq: usize) -> Tensor<F> {
    let n = key_valid.len();
    let neg = lit::<F>(-1e9);
    let mut data = vec![F::zero(); n * heads * seq * seq];
    for (i, valid) in key_valid.iter().enumerate() {
        for h in 0..heads {
            for q in 0..seq {
                let row = ((i * heads + h) * seq + q) * seq;
                for (k, &v) in valid.iter().enumerate() {
                    if !v {
                        data[row + k] = neg;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * heads, seq, seq], data).unwrap()
}

/// Encoder output: `hidden` is `[N, (1)+L_vis, d]`; `layers` are the
/// per-block outputs before the final norm.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub layers: Vec<Var>,
    pub cls: bool,
    pub positions: Vec<Vec<usize>>,
    pub len: usize,
}

impl Encoded {
    pub fn visible_count(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    /// Drops the CLS row from `[N, S, c]` when present.
    pub fn tokens_only<F: Element>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        if !self.cls {
            return Ok(x);
        }
        let s = g.shape(x)[1];
        Ok(g.index_select(x, 1, &(1..s).collect::<Vec<_>>())?)
    }
}

/// MAE-style reconstruction decoder for one visual modality.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualDecoder {
    pub modality: Modality,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

/// Masked-token prediction head for text.
#[derive(Clone, Debug, PartialEq)]
pub struct TextHead {
    pub proj: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Text(TextHead),
    Visual(VisualDecoder),
}

impl Decoder {
    pub fn modality(&self) -> Modality {
        match self {
            Decoder::Text(_) => Modality::Text,
            Decoder::Visual(v) => v.modality,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Decoder::Text(t) => t.proj.params(),
            Decoder::Visual(v) => {
                let mut ids = v.embed.params();
                ids.extend([v.mask_token, v.pos]);
                for b in &v.blocks {
                    ids.extend(b.params());
                }
                ids.extend(v.norm.params());
                ids.extend(v.head.params());
                ids
            }
        }
    }
}

/// Identifier of a decoder slot: the stage index for sequential training, or
/// a dimension/modality group for joint training.
pub type DecoderKey = u64;

/// The learnable system: shared backbone plus keyed decoders.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub backbone: Backbone,
    decoders: Vec<(DecoderKey, Decoder)>,
}

impl<F: Element> Model<F> {
    /// Truncated-normal(σ = 0.02) weights, zero biases, unit norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream_rng(config.seed.unwrap_or(seed), Stream::Init, 0);
        let backbone = Backbone::new(&mut Init { store: &mut params, rng: &mut rng }, &config)?;
        Ok(Model { config, params, backbone, decoders: Vec::new() })
    }

    /// Adds a freshly initialized decoder; its weights depend only on
    /// `(seed, key)`.
    pub fn add_decoder(&mut self, key: DecoderKey, modality: Modality, seed: u64) -> Result<()> {
        if self.decoder(key).is_some() {
            return invalid(format!("decoder {key} already exists"));
        }
        let cfg = &self.config;
        let mut rng = stream_rng(seed, Stream::Decoder, key);
        let mut init = Init { store: &mut self.params, rng: &mut rng };
        let name = format!("decoder.{key}");
        let decoder = match modality {
            Modality::Text => Decoder::Text(TextHead {
                proj: Linear::new(&mut init, &format!("{name}.mlm"), cfg.embed_dim, cfg.vocab_size)?,
            }),
            _ => {
                let dd = cfg.decoder_dim;
                Decoder::Visual(VisualDecoder {
                    modality,
                    embed: Linear::new(&mut init, &format!("{name}.embed"), cfg.embed_dim, dd)?,
                    mask_token: init.normal(&format!("{name}.mask_token"), &[dd])?,
                    pos: init.normal(&format!("{name}.pos"), &[cfg.seq_len(modality), dd])?,
                    blocks: (0..cfg.decoder_depth)
                        .map(|i| Block::new(&mut init, &format!("{name}.blocks.{i}"), dd, cfg.decoder_heads, cfg.mlp_ratio))
                        .collect::<Result<_>>()?,
                    norm: Norm::new(&mut init, &format!("{name}.norm"), dd)?,
                    head: Linear::new(&mut init, &format!("{name}.head"), dd, cfg.patch_dim(modality))?,
                })
            }
        };
        self.decoders.push((key, decoder));
        Ok(())
    }

    pub fn decoder(&self, key: DecoderKey) -> Option<&Decoder> {
        self.decoders.iter().find(|(k, _)| *k == key).map(|(_, d)| d)
    }

    /// Decoders in creation order.
    pub fn decoders(&self) -> &[(DecoderKey, Decoder)] {
        &self.decoders
    }

    pub fn decoder_params(&self, key: DecoderKey) -> Vec<ParamId> {
        self.decoder(key).map(Decoder::params).unwrap_or_default()
    }

    pub fn encode(&self, g: &mut Graph<F>, batch: &TokenBatch<F>, keep: &Keep) -> Result<Encoded> {
        self.backbone.encode(g, &self.params, batch, keep)
    }

    /// Scatters visible encodings and mask tokens back to full length, runs
    /// decoder `key` and projects every position to patch space: `[N, L, P]`.
    pub fn decode_visual(&self, g: &mut Graph<F>, key: DecoderKey, enc: &Encoded) -> Result<Var> {
        let Some(Decoder::Visual(dec)) = self.decoder(key) else {
            return invalid(format!("no visual decoder {key}"));
        };
        let w = &self.params;
        let shape = g.shape(enc.hidden).to_vec();
        let (n, s) = (shape[0], shape[1]);
        let len = enc.len;
        let dd = self.config.decoder_dim;
        let x = dec.embed.forward(g, w, enc.hidden)?;
        let x = g.reshape(x, &[n * s, dd])?;
        let mask = w.var(g, dec.mask_token);
        let mask = g.reshape(mask, &[1, dd])?;
        let rows = g.concat(&[x, mask], 0)?;
        let off = enc.cls as usize;
        let full = len + off;
        let mut index = Vec::with_capacity(n * full * dd);
        let mut pos_index = Vec::with_capacity(n * full * dd);
        for (i, pos) in enc.positions.iter().enumerate() {
            if enc.cls {
                index.extend((0..dd).map(|j| (i * s) * dd + j));
                pos_index.extend(std::iter::repeat(NO_INDEX).take(dd));
            }
            let mut rank = 0;
            for p in 0..len {
                let row = if rank < pos.len() && pos[rank] == p {
                    rank += 1;
                    i * s + off + rank - 1
                } else {
                    n * s
                };
                index.extend((0..dd).map(|j| row * dd + j));
                pos_index.extend((0..dd).map(|j| p * dd + j));
            }
        }
        let x = g.gather(rows, index, &[n, full, dd])?;
        let pos_table = w.var(g, dec.pos);
        let pos = g.gather(pos_table, pos_index, &[n, full, dd])?;
        let mut x = g.add(x, pos)?;
        for block in &dec.blocks {
            x = block.forward(g, w, x, None)?;
        }
        let x = dec.norm.forward(g, w, x)?;
        let x = enc.tokens_only(g, x)?;
        dec.head.forward(g, w, x)
    }

    /// Vocabulary logits `[N, L, V]` from text head `key`.
    pub fn predict_tokens(&self, g: &mut Graph<F>, key: DecoderKey, enc: &Encoded) -> Result<Var> {
        let Some(Decoder::Text(head)) = self.decoder(key) else {
            return invalid(format!("no text head {key}"));
        };
        let x = enc.tokens_only(g, enc.hidden)?;
        head.proj.forward(g, &self.params, x)
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn checksum(&self) -> String {
        checksum(self.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
    }

    pub fn save(&self, path: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::save_model(self, path, meta)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, serde_json::Value)> {
        checkpoint::load_model(path)
    }
}

/// SHA-256 over parameter names, shapes and little-endian values (hex, 16 chars).
pub fn checksum<'a, F: Element>(params: impl Iterator<Item = (&'a str, &'a Tensor<F>)>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        buf.clear();
        for &x in t.data() {
            x.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Immutable copy of the backbone of `M^{t-1}`; evaluates without gradients.
#[derive(Clone, Debug)]
pub struct FrozenTeacher<F> {
    backbone: Backbone,
    names: Vec<String>,
    values: Vec<Option<Tensor<F>>>,
    checksum: String,
}

impl<F: Element> FrozenTeacher<F> {
    pub fn snapshot(model: &Model<F>) -> Self {
        let ids = model.backbone_params();
        let mut values = vec![None; model.params.len()];
        let mut names = vec![String::new(); model.params.len()];
        for &id in &ids {
            values[id.0] = Some(model.params.value(id).clone());
            names[id.0] = model.params.get(id).name.clone();
        }
        let mut teacher = FrozenTeacher { backbone: model.backbone.clone(), names, values, checksum: String::new() };
        teacher.checksum = teacher.recomputed_checksum();
        teacher
    }

    /// Checksum of the values held now.
    pub fn recomputed_checksum(&self) -> String {
        checksum(
            self.values
                .iter()
                .zip(&self.names)
                .filter_map(|(v, n)| v.as_ref().map(|v| (n.as_str(), v))),
        )
    }

    /// Checksum recorded at snapshot time.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the checksum from the held values.
    pub fn verify(&self) -> bool {
        self.recomputed_checksum() == self.checksum
    }

    pub fn encode(&self, g: &mut Graph<F>, batch: &TokenBatch<F>, keep: &Keep) -> Result<Encoded> {
        self.backbone.encode(g, self, batch, keep)
    }
}

impl<F: Element> Weights<F> for FrozenTeacher<F> {
    fn var(&self, g: &mut Graph<F>, id: ParamId) -> Var {
        let value = self.values[id.0].as_ref().expect("teacher holds backbone parameters only");
        g.frozen(id, value)
    }
}

/// Convenience used by callers that only hold a model.
pub fn snapshot_teacher<F: Element>(model: &Model<F>) -> FrozenTeacher<F> {
    FrozenTeacher::snapshot(model)
}
