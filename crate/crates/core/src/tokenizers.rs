//! Dimension-specific tokenizers: a word-level text vocabulary and
//! non-overlapping 2D/3D patch extraction.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use coss_numerics::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{invalid, io_err, Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[MASK]", "[CLS]", "[UNK]"];

/// Input dimensionality, which selects the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image2d,
    Volume3d,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image2d => "image2d",
            Modality::Volume3d => "volume3d",
        }
    }

    pub fn is_visual(self) -> bool {
        self != Modality::Text
    }

    pub fn spatial_rank(self) -> usize {
        match self {
            Modality::Text => 1,
            Modality::Image2d => 2,
            Modality::Volume3d => 3,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub text_len: usize,
    pub image_size: [usize; 2],
    pub volume_size: [usize; 3],
    pub patch2d: [usize; 2],
    pub patch3d: [usize; 3],
    pub channels: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            text_len: 112,
            image_size: [224, 224],
            volume_size: [16, 192, 192],
            patch2d: [16, 16],
            patch3d: [16, 16, 16],
            channels: 1,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_len < 2 || self.channels == 0 {
            return Err(Error::Config("text_len must be ≥ 2 and channels ≥ 1".into()));
        }
        grid_shape(&self.image_size, &self.patch2d).map_err(|e| Error::Config(e.to_string()))?;
        grid_shape(&self.volume_size, &self.patch3d).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn input_shape(&self, modality: Modality) -> Vec<usize> {
        let mut shape = vec![self.channels];
        match modality {
            Modality::Text => return vec![self.text_len],
            Modality::Image2d => shape.extend(self.image_size),
            Modality::Volume3d => shape.extend(self.volume_size),
        }
        shape
    }

    pub fn patch(&self, modality: Modality) -> &[usize] {
        match modality {
            Modality::Text => &[],
            Modality::Image2d => &self.patch2d,
            Modality::Volume3d => &self.patch3d,
        }
    }

    /// Sequence length for the modality.
    pub fn seq_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.text_len,
            Modality::Image2d => self.image_size.iter().zip(self.patch2d).map(|(s, p)| s / p).product(),
            Modality::Volume3d => self.volume_size.iter().zip(self.patch3d).map(|(s, p)| s / p).product(),
        }
    }

    pub fn grid(&self, modality: Modality) -> Vec<usize> {
        match modality {
            Modality::Text => vec![self.text_len],
            Modality::Image2d => self.image_size.iter().zip(self.patch2d).map(|(s, p)| s / p).collect(),
            Modality::Volume3d => self.volume_size.iter().zip(self.patch3d).map(|(s, p)| s / p).collect(),
        }
    }

    /// Length of one flattened patch vector (`P²·C` or `P³·C`).
    pub fn patch_dim(&self, modality: Modality) -> usize {
        self.patch(modality).iter().product::<usize>() * self.channels
    }
}

fn grid_shape(extent: &[usize], patch: &[usize]) -> Result<Vec<usize>> {
    const AXES: [&str; 3] = ["first", "second", "third"];
    if extent.len() != patch.len() {
        return invalid(format!("rank mismatch: extents {extent:?} vs patch {patch:?}"));
    }
    extent
        .iter()
        .zip(patch)
        .enumerate()
        .map(|(axis, (&e, &p))| {
            if p == 0 || e % p != 0 || e == 0 {
                invalid(format!("{} spatial axis: extent {e} not divisible by patch {p}", AXES[axis]))
            } else {
                Ok(e / p)
            }
        })
        .collect()
}

/// Word-level vocabulary with reserved special ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Whitespace-split words ranked by descending frequency, then
    /// lexicographically, truncated to `max_size - 4` and placed after the
    /// four special tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return invalid("cannot build a vocabulary from an empty corpus");
        }
        if max_size < SPECIALS.len() {
            return invalid(format!("max_size {max_size} leaves no room for special tokens"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for word in text.as_ref().split_whitespace() {
                if !SPECIALS.contains(&word) {
                    *counts.entry(word).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        if SPECIALS.contains(&word) {
            return UNK;
        }
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `token<TAB>id` lines, specials first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Invalid(format!("vocabulary line {}: missing tab", line_no + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Invalid(format!("vocabulary line {}: bad id `{id}`", line_no + 1)))?;
            if id != tokens.len() {
                return invalid(format!("vocabulary line {}: ids must be dense", line_no + 1));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return invalid("vocabulary must start with the four special tokens");
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// `[CLS]` followed by word ids, truncated or padded to `text_len`, and the
/// validity mask marking non-PAD positions.
pub fn tokenize_text(text: &str, vocab: &Vocabulary, cfg: &TokenizerConfig) -> (Vec<u32>, Vec<bool>) {
    let len = cfg.text_len;
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend(text.split_whitespace().take(len - 1).map(|w| vocab.id(w)));
    ids.resize(len, PAD);
    let valid = ids.iter().map(|&i| i != PAD).collect();
    (ids, valid)
}

/// Splits `[C, *spatial]` into non-overlapping patches, returning
/// `[L, prod(patch)·C]` and the patch grid. Patches are ordered row-major over
/// the grid; within a patch values are ordered by spatial offset, then channel.
pub fn patchify(x: &Tensor<f32>, patch: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() != patch.len() + 1 {
        return invalid(format!("input rank {} does not match patch rank {}", shape.len(), patch.len()));
    }
    let channels = shape[0];
    let spatial = &shape[1..];
    let grid = grid_shape(spatial, patch)?;
    let tokens: usize = grid.iter().product();
    let pvol: usize = patch.iter().product();
    let dim = pvol * channels;
    let plane: usize = spatial.iter().product();
    let mut out = vec![0f32; tokens * dim];
    for_each_patch_element(spatial, patch, &grid, |token, offset, flat| {
        for c in 0..channels {
            out[token * dim + offset * channels + c] = x.data()[c * plane + flat];
        }
    });
    Ok((Tensor::new(vec![tokens, dim], out)?, grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor<f32>, grid: &[usize], patch: &[usize], channels: usize) -> Result<Tensor<f32>> {
    let spatial: Vec<usize> = grid.iter().zip(patch).map(|(g, p)| g * p).collect();
    let tokens: usize = grid.iter().product();
    let dim = patch.iter().product::<usize>() * channels;
    if patches.shape() != [tokens, dim] {
        return invalid(format!("patch tensor {:?} does not match grid {grid:?}", patches.shape()));
    }
    let plane: usize = spatial.iter().product();
    let mut out = vec![0f32; plane * channels];
    for_each_patch_element(&spatial, patch, grid, |token, offset, flat| {
        for c in 0..channels {
            out[c * plane + flat] = patches.data()[token * dim + offset * channels + c];
        }
    });
    let mut shape = vec![channels];
    shape.extend(spatial);
    Ok(Tensor::new(shape, out)?)
}

/// Calls `f(token, offset_in_patch, flat_spatial_index)` for every voxel.
fn for_each_patch_element(spatial: &[usize], patch: &[usize], grid: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = spatial.len();
    let total: usize = spatial.iter().product();
    let mut coord = vec![0usize; rank];
    for flat in 0..total {
        let mut token = 0;
        let mut offset = 0;
        for ax in 0..rank {
            token = token * grid[ax] + coord[ax] / patch[ax];
            offset = offset * patch[ax] + coord[ax] % patch[ax];
        }
        f(token, offset, flat);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            if coord[ax] < spatial[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
}

/// Token payload of a batch; exactly one representation per modality.
#[derive(Clone, Debug, PartialEq)]
pub enum Tokens<F> {
    Text { ids: Vec<u32>, valid: Vec<bool> },
    Visual { patches: Tensor<F>, grid: Vec<usize> },
}

/// A homogeneous single-modality batch of `n` sequences of length `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<F> {
    pub modality: Modality,
    pub n: usize,
    pub len: usize,
    pub tokens: Tokens<F>,
}

impl<F: Element> TokenBatch<F> {
    pub fn from_ids(ids: Vec<u32>, n: usize, len: usize) -> Result<Self> {
        if ids.len() != n * len {
            return invalid(format!("{} ids for a {n}×{len} batch", ids.len()));
        }
        let valid = ids.iter().map(|&i| i != PAD).collect();
        Ok(TokenBatch { modality: Modality::Text, n, len, tokens: Tokens::Text { ids, valid } })
    }

    pub fn from_patches(modality: Modality, patches: Tensor<F>, grid: Vec<usize>) -> Result<Self> {
        let s = patches.shape().to_vec();
        if !modality.is_visual() || s.len() != 3 || s[1] != grid.iter().product::<usize>() {
            return invalid(format!("patch batch {s:?} inconsistent with {modality} grid {grid:?}"));
        }
        Ok(TokenBatch { modality, n: s[0], len: s[1], tokens: Tokens::Visual { patches, grid } })
    }

    pub fn ids(&self) -> Option<&[u32]> {
        match &self.tokens {
            Tokens::Text { ids, .. } => Some(ids),
            Tokens::Visual { .. } => None,
        }
    }

    pub fn valid(&self) -> Option<&[bool]> {
        match &self.tokens {
            Tokens::Text { valid, .. } => Some(valid),
            Tokens::Visual { .. } => None,
        }
    }

    pub fn patches(&self) -> Option<&Tensor<F>> {
        match &self.tokens {
            Tokens::Visual { patches, .. } => Some(patches),
            Tokens::Text { .. } => None,
        }
    }

    pub fn grid(&self) -> Option<&[usize]> {
        match &self.tokens {
            Tokens::Visual { grid, .. } => Some(grid),
            Tokens::Text { .. } => None,
        }
    }
}

/// Text vocabulary plus tokenizer geometry.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        Ok(Tokenizer { config, vocab })
    }

    /// Tokenizes raw samples of one modality into a batch.
    pub fn batch<F: Element>(&self, modality: Modality, samples: &[&Sample]) -> Result<TokenBatch<F>> {
        if samples.is_empty() {
            return invalid("empty batch");
        }
        match modality {
            Modality::Text => {
                let len = self.config.text_len;
                let mut ids = Vec::with_capacity(samples.len() * len);
                for s in samples {
                    let Sample::Text(text) = s else {
                        return invalid("visual sample in a text batch");
                    };
                    ids.extend(tokenize_text(text, &self.vocab, &self.config).0);
                }
                TokenBatch::from_ids(ids, samples.len(), len)
            }
            _ => {
                let expected = self.config.input_shape(modality);
                let patch = self.config.patch(modality);
                let mut data = Vec::new();
                let mut grid = Vec::new();
                for s in samples {
                    let Sample::Visual(x) = s else {
                        return invalid("text sample in a visual batch");
                    };
                    if x.shape() != expected.as_slice() {
                        return invalid(format!("{modality} sample {:?}, expected {expected:?}", x.shape()));
                    }
                    let (p, g) = patchify(x, patch)?;
                    data.extend(p.data().iter().map(|&v| F::from_f32(v).unwrap()));
                    grid = g;
                }
                let len = self.config.seq_len(modality);
                let dim = self.config.patch_dim(modality);
                let patches = Tensor::new(vec![samples.len(), len, dim], data)?;
                TokenBatch::from_patches(modality, patches, grid)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_orders_by_frequency_then_lexicographically() {
        let v = Vocabulary::build(&["a b", "a"], 10).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        let v = Vocabulary::build(&["z y", "y z"], 10).unwrap();
        assert_eq!(v.id("y"), 4);
        assert_eq!(v.id("z"), 5);
    }

    #[test]
    fn single_word_takes_first_free_slot() {
        let v = Vocabulary::build(&["x"], 10).unwrap();
        assert_eq!(v.id("x"), 4);
        assert_eq!(v.id("never-seen"), UNK);
        assert_eq!(v.id("[PAD]"), UNK);
    }

    #[test]
    fn vocabulary_truncates_and_rejects_empty_corpus() {
        let v = Vocabulary::build(&["a a a b b c"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("c"), UNK);
        assert!(Vocabulary::build::<&str>(&[], 10).is_err());
    }

    #[test]
    fn vocabulary_tsv_round_trip() {
        let v = Vocabulary::build(&["a b c", "c"], 10).unwrap();
        let tsv = v.to_tsv();
        assert!(tsv.starts_with("[PAD]\t0\n[MASK]\t1\n[CLS]\t2\n[UNK]\t3\n"));
        assert_eq!(Vocabulary::from_tsv(&tsv).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t0\n").is_err());
    }

    #[test]
    fn text_rows_are_fixed_length() {
        let v = Vocabulary::build(&["a b"], 10).unwrap();
        let cfg = TokenizerConfig::default();
        let (ids, valid) = tokenize_text("a b", &v, &cfg);
        assert_eq!(ids.len(), 112);
        assert_eq!(&ids[..3], &[2, 4, 5]);
        assert!(ids[3..].iter().all(|&i| i == PAD));
        assert_eq!(valid.iter().filter(|&&b| b).count(), 3);

        let long = vec!["a"; 200].join(" ");
        let (ids, _) = tokenize_text(&long, &v, &cfg);
        assert_eq!(ids.len(), 112);
        assert!(ids[1..].iter().all(|&i| i == 4));

        let (ids, valid) = tokenize_text("", &v, &cfg);
        assert_eq!(ids[0], CLS);
        assert!(ids[1..].iter().all(|&i| i == PAD));
        assert_eq!(valid.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn patch_counts_follow_extents() {
        let img = Tensor::<f32>::zeros(&[1, 224, 224]);
        let (p, grid) = patchify(&img, &[16, 16]).unwrap();
        assert_eq!(p.shape(), &[196, 256]);
        assert_eq!(grid, vec![14, 14]);
        let vol = Tensor::<f32>::zeros(&[1, 16, 192, 192]);
        let (p, grid) = patchify(&vol, &[16, 16, 16]).unwrap();
        assert_eq!(p.shape(), &[144, 4096]);
        assert_eq!(grid, vec![1, 12, 12]);
    }

    #[test]
    fn non_divisible_extent_names_axis() {
        let img = Tensor::<f32>::zeros(&[1, 32, 30]);
        let err = patchify(&img, &[16, 16]).unwrap_err().to_string();
        assert!(err.contains("second"), "{err}");
    }

    #[test]
    fn patch_layout_is_row_major() {
        // 1 channel 4×4 image, 2×2 patches: token 1 is the top-right block
        let img = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32);
        let (p, _) = patchify(&img, &[2, 2]).unwrap();
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }
}
