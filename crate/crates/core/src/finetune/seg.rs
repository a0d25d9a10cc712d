//! Convolutional segmentation decoder over intermediate encoder features.
//! Feature maps are channel-last: `[N, *spatial, C]`.

use coss_numerics::{Element, Graph, Var, NO_INDEX};

use crate::error::{invalid, Result};
use crate::model::{Encoded, Init, Linear, Norm, Weights};

/// Tap layers for an encoder of `depth` blocks: the reference taps
/// {4, 7, 10, 12} of a 12-block encoder, with their distance from the top
/// scaled by `depth / 12` and rounded up.
pub fn tap_layers(depth: usize) -> [usize; 4] {
    [4usize, 7, 10, 12].map(|o| {
        let from_top = ((12 - o) as f64 * depth as f64 / 12.0).ceil() as usize;
        depth.saturating_sub(from_top).max(1)
    })
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

fn unravel(mut flat: usize, dims: &[usize], out: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        out[a] = flat % dims[a];
        flat /= dims[a];
    }
}

/// Transposed convolution with kernel = stride = 2 on every spatial axis:
/// a linear map to `2^r · out` channels followed by a pixel shuffle.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv {
    pub proj: Linear,
    pub out: usize,
}

impl Deconv {
    fn new<F: Element>(init: &mut Init<'_, F>, name: &str, rank: usize, cin: usize, cout: usize) -> Result<Self> {
        Ok(Deconv { proj: Linear::new(init, name, cin, cout << rank)?, out: cout })
    }

    fn forward<F: Element>(&self, g: &mut Graph<F>, w: &impl Weights<F>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, spatial) = (shape[0], &shape[1..shape.len() - 1]);
        let r = spatial.len();
        let y = self.proj.forward(g, w, x)?;
        let up: Vec<usize> = spatial.iter().map(|&e| 2 * e).collect();
        let cells: usize = spatial.iter().product();
        let out_cells: usize = up.iter().product();
        let c = self.out;
        let mut index = Vec::with_capacity(n * out_cells * c);
        let mut pos = vec![0; r];
        for b in 0..n {
            for flat in 0..out_cells {
                unravel(flat, &up, &mut pos);
                let (mut cell, mut off) = (0, 0);
                for a in 0..r {
                    cell = cell * spatial[a] + pos[a] / 2;
                    off = off * 2 + pos[a] % 2;
                }
                let base = ((b * cells + cell) << r | off) * c;
                index.extend(base..base + c);
            }
        }
        let mut out_shape = vec![n];
        out_shape.extend(&up);
        out_shape.push(c);
        Ok(g.gather(y, index, &out_shape)?)
    }

    fn params(&self) -> Vec<coss_numerics::ParamId> {
        self.proj.params()
    }
}

/// Same-size convolution with a 3-wide kernel per axis and zero padding,
/// computed as an im2col gather followed by a matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub proj: Linear,
}

impl Conv {
    fn new<F: Element>(init: &mut Init<'_, F>, name: &str, rank: usize, cin: usize, cout: usize) -> Result<Self> {
        Ok(Conv { proj: Linear::new(init, name, 3usize.pow(rank as u32) * cin, cout)? })
    }

    fn forward<F: Element>(&self, g: &mut Graph<F>, w: &impl Weights<F>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, spatial, cin) = (shape[0], shape[1..shape.len() - 1].to_vec(), shape[shape.len() - 1]);
        let r = spatial.len();
        let taps = 3usize.pow(r as u32);
        let cells: usize = spatial.iter().product();
        let st = strides(&spatial);
        let mut index = Vec::with_capacity(n * cells * taps * cin);
        let mut pos = vec![0; r];
        let mut off = vec![0; r];
        for b in 0..n {
            for flat in 0..cells {
                unravel(flat, &spatial, &mut pos);
                for t in 0..taps {
                    unravel(t, &vec![3; r], &mut off);
                    let mut src = Some(0usize);
                    for a in 0..r {
                        let p = pos[a] as isize + off[a] as isize - 1;
                        if p < 0 || p >= spatial[a] as isize {
                            src = None;
                            break;
                        }
                        src = src.map(|s| s + p as usize * st[a]);
                    }
                    match src {
                        Some(s) => index.extend((b * cells + s) * cin..(b * cells + s + 1) * cin),
                        None => index.extend(std::iter::repeat(NO_INDEX).take(cin)),
                    }
                }
            }
        }
        let mut col_shape = vec![n];
        col_shape.extend(&spatial);
        col_shape.push(taps * cin);
        let cols = g.gather(x, index, &col_shape)?;
        self.proj.forward(g, w, cols)
    }

    fn params(&self) -> Vec<coss_numerics::ParamId> {
        self.proj.params()
    }
}

/// `GELU(norm(conv(GELU(norm(conv(x))))) + skip(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub skip: Option<Linear>,
}

impl ResBlock {
    fn new<F: Element>(init: &mut Init<'_, F>, name: &str, rank: usize, cin: usize, cout: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv::new(init, &format!("{name}.conv1"), rank, cin, cout)?,
            norm1: Norm::new(init, &format!("{name}.norm1"), cout)?,
            conv2: Conv::new(init, &format!("{name}.conv2"), rank, cout, cout)?,
            norm2: Norm::new(init, &format!("{name}.norm2"), cout)?,
            skip: if cin == cout { None } else { Some(Linear::new(init, &format!("{name}.skip"), cin, cout)?) },
        })
    }

    fn forward<F: Element>(&self, g: &mut Graph<F>, w: &impl Weights<F>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, w, x)?;
        let h = self.norm1.forward(g, w, h)?;
        let h = g.gelu(h);
        let h = self.conv2.forward(g, w, h)?;
        let h = self.norm2.forward(g, w, h)?;
        let s = match &self.skip {
            Some(l) => l.forward(g, w, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.gelu(y))
    }

    fn params(&self) -> Vec<coss_numerics::ParamId> {
        let mut ids = [self.conv1.params(), self.norm1.params(), self.conv2.params(), self.norm2.params()].concat();
        if let Some(l) = &self.skip {
            ids.extend(l.params());
        }
        ids
    }
}

/// Progressive upsampling decoder: the deepest tap is upsampled level by
/// level and fused with shallower taps (each brought to the same resolution
/// by its own chain of transposed convolutions); the full-resolution level
/// also fuses features of the raw input. A 1×1 projection gives class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegDecoder {
    pub rank: usize,
    pub levels: usize,
    pub taps: [usize; 4],
    pub input_block: ResBlock,
    pub up: Vec<Deconv>,
    /// One chain per shallower tap, deepest first.
    pub skip_chains: Vec<Vec<Deconv>>,
    pub fuse: Vec<ResBlock>,
    pub head: Linear,
}

impl SegDecoder {
    /// `patch` must be the same power of two on every axis.
    pub fn new<F: Element>(
        init: &mut Init<'_, F>,
        depth: usize,
        dim: usize,
        patch: &[usize],
        in_channels: usize,
        channels: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let p = patch[0];
        if p < 2 || !p.is_power_of_two() || patch.iter().any(|&q| q != p) {
            return invalid(format!("segmentation needs an equal power-of-two patch per axis, got {patch:?}"));
        }
        let rank = patch.len();
        let levels = p.trailing_zeros() as usize;
        let taps = tap_layers(depth);
        let input_block = ResBlock::new(init, "head.input", rank, in_channels, channels)?;
        let up = (0..levels)
            .map(|j| Deconv::new(init, &format!("head.up.{j}"), rank, if j == 0 { dim } else { channels }, channels))
            .collect::<Result<Vec<_>>>()?;
        let mut skip_chains = Vec::new();
        let mut fuse = Vec::new();
        for j in 0..levels {
            let skips = Self::skips_at(levels, j);
            let mut fused_in = channels;
            for s in skips {
                let chain = (0..=j)
                    .map(|i| Deconv::new(init, &format!("head.skip.{s}.{i}"), rank, if i == 0 { dim } else { channels }, channels))
                    .collect::<Result<Vec<_>>>()?;
                skip_chains.push(chain);
                fused_in += channels;
            }
            if j + 1 == levels {
                fused_in += channels;
            }
            fuse.push(ResBlock::new(init, &format!("head.fuse.{j}"), rank, fused_in, channels)?);
        }
        let head = Linear::new(init, "head.out", channels, n_classes)?;
        Ok(SegDecoder { rank, levels, taps, input_block, up, skip_chains, fuse, head })
    }

    /// Indices into the shallower taps (0 = next below the deepest) fused at level `j`.
    fn skips_at(levels: usize, j: usize) -> std::ops::Range<usize> {
        if j + 1 < levels {
            j..(j + 1).min(3)
        } else {
            j.min(3)..3
        }
    }

    /// `image` is the channel-last raw input `[N, *spatial, C]`; returns
    /// channel-last logits `[N, *spatial, n_classes]`.
    pub fn forward<F: Element>(&self, g: &mut Graph<F>, w: &impl Weights<F>, enc: &Encoded, grid: &[usize], image: Var) -> Result<Var> {
        let n = enc.positions.len();
        let tap = |g: &mut Graph<F>, layer: usize| -> Result<Var> {
            let x = enc.tokens_only(g, enc.layers[layer - 1])?;
            let d = *g.shape(x).last().unwrap();
            let mut shape = vec![n];
            shape.extend(grid);
            shape.push(d);
            Ok(g.reshape(x, &shape)?)
        };
        let mut x = tap(g, self.taps[3])?;
        let mut chain = 0;
        for j in 0..self.levels {
            x = self.up[j].forward(g, w, x)?;
            let mut parts = vec![x];
            for s in Self::skips_at(self.levels, j) {
                let mut f = tap(g, self.taps[2 - s])?;
                for d in &self.skip_chains[chain] {
                    f = d.forward(g, w, f)?;
                }
                chain += 1;
                parts.push(f);
            }
            if j + 1 == self.levels {
                parts.push(self.input_block.forward(g, w, image)?);
            }
            let axis = self.rank + 1;
            let cat = g.concat(&parts, axis)?;
            x = self.fuse[j].forward(g, w, cat)?;
        }
        self.head.forward(g, w, x)
    }

    pub fn params(&self) -> Vec<coss_numerics::ParamId> {
        let mut ids = self.input_block.params();
        for d in &self.up {
            ids.extend(d.params());
        }
        for c in &self.skip_chains {
            for d in c {
                ids.extend(d.params());
            }
        }
        for f in &self.fuse {
            ids.extend(f.params());
        }
        ids.extend(self.head.params());
        ids
    }
}
