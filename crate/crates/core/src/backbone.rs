//! Shifted-window transformer backbone and the fused feature pyramid.
//!
//! Parameter names follow the common Swin checkpoint layout
//! (`patch_embed.proj.weight`, `layers.{i}.blocks.{j}.attn.qkv.weight`,
//! `layers.{i}.downsample.reduction.weight`, `norm.weight`, ...), with
//! linear weights stored `[out, in]` and convolutions `[out, in, kh, kw]`.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Graph, Var, PAD};
use crate::error::{Error, Result};
use crate::image::FeatureMap;
use crate::params::{trunc_normal, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window_size: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
}

impl BackboneConfig {
    /// The Swin-T recipe: C = 96, depths 2-2-6-2, window 7, patch 4.
    pub fn swin_t() -> Self {
        BackboneConfig {
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            window_size: 7,
            patch_size: 4,
            mlp_ratio: 4,
            pretrained_weights: None,
        }
    }

    /// A small configuration for tests and desk-scale training.
    pub fn tiny_test() -> Self {
        BackboneConfig {
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            window_size: 4,
            patch_size: 4,
            mlp_ratio: 4,
            pretrained_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window_size == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!("zero-sized backbone dimension in {self:?}")));
        }
        for (i, (&h, &d)) in self.heads.iter().zip(&self.depths).enumerate() {
            let dim = self.stage_dim(i);
            if h == 0 || !dim.is_multiple_of(h) {
                return Err(Error::Config(format!(
                    "stage {i} width {dim} not divisible by {h} heads"
                )));
            }
            if d == 0 {
                return Err(Error::Config(format!("stage {i} has depth 0")));
            }
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Input sides must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.patch_size * 8
    }

    /// Channel count of the fused pyramid: 2C + 4C + 8C + 8C.
    pub fn fused_channels(&self) -> usize {
        22 * self.embed_dim
    }
}

struct Block {
    norm1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    rel_bias: ParamId,
    proj: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

struct Merge {
    norm: (ParamId, ParamId),
    reduction: ParamId,
}

struct Stage {
    dim: usize,
    heads: usize,
    blocks: Vec<Block>,
    downsample: Option<Merge>,
}

/// Spatial shape of a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Stage features living on a graph, each `[H·W, C]` row-major.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub features: [Var; 4],
    pub shapes: [GridShape; 4],
}

/// The four stage features as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub f1: FeatureMap,
    pub f2: FeatureMap,
    pub f3: FeatureMap,
    pub f4: FeatureMap,
}

impl StageFeatures {
    pub fn maps(&self) -> [&FeatureMap; 4] {
        [&self.f1, &self.f2, &self.f3, &self.f4]
    }
}

/// Concatenated pyramid `[f1, Up(f2), Up(f3), Up(f4)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature(pub FeatureMap);

pub struct SwinBackbone {
    config: BackboneConfig,
    prefix: String,
    patch_proj: (ParamId, ParamId),
    patch_norm: (ParamId, ParamId),
    stages: Vec<Stage>,
    norm: (ParamId, ParamId),
}

fn ln_params(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        store.insert(format!("{name}.weight"), &[dim], vec![1.0; dim]),
        store.insert(format!("{name}.bias"), &[dim], vec![0.0; dim]),
    )
}

fn linear_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    out: usize,
    inp: usize,
) -> (ParamId, ParamId) {
    (
        store.insert(format!("{name}.weight"), &[out, inp], trunc_normal(rng, out * inp, 0.02)),
        store.insert(format!("{name}.bias"), &[out], vec![0.0; out]),
    )
}

impl SwinBackbone {
    /// Registers freshly initialized parameters under `prefix` in `store`.
    pub fn register(config: &BackboneConfig, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let p = config.patch_size;
        let patch_proj = (
            store.insert(
                format!("{prefix}patch_embed.proj.weight"),
                &[c, 3, p, p],
                trunc_normal(rng, c * 3 * p * p, 0.02),
            ),
            store.insert(format!("{prefix}patch_embed.proj.bias"), &[c], vec![0.0; c]),
        );
        let patch_norm = ln_params(store, &format!("{prefix}patch_embed.norm"), c);
        let table = (2 * config.window_size - 1).pow(2);
        let hidden_ratio = config.mlp_ratio;
        let mut stages = Vec::new();
        for i in 0..4 {
            let dim = config.stage_dim(i);
            let heads = config.heads[i];
            let blocks = (0..config.depths[i])
                .map(|j| {
                    let b = format!("{prefix}layers.{i}.blocks.{j}");
                    Block {
                        norm1: ln_params(store, &format!("{b}.norm1"), dim),
                        qkv: linear_params(store, rng, &format!("{b}.attn.qkv"), 3 * dim, dim),
                        rel_bias: store.insert(
                            format!("{b}.attn.relative_position_bias_table"),
                            &[table, heads],
                            trunc_normal(rng, table * heads, 0.02),
                        ),
                        proj: linear_params(store, rng, &format!("{b}.attn.proj"), dim, dim),
                        norm2: ln_params(store, &format!("{b}.norm2"), dim),
                        fc1: linear_params(store, rng, &format!("{b}.mlp.fc1"), hidden_ratio * dim, dim),
                        fc2: linear_params(store, rng, &format!("{b}.mlp.fc2"), dim, hidden_ratio * dim),
                    }
                })
                .collect();
            let downsample = (i < 3).then(|| {
                let d = format!("{prefix}layers.{i}.downsample");
                Merge {
                    norm: ln_params(store, &format!("{d}.norm"), 4 * dim),
                    reduction: store.insert(
                        format!("{d}.reduction.weight"),
                        &[2 * dim, 4 * dim],
                        trunc_normal(rng, 8 * dim * dim, 0.02),
                    ),
                }
            });
            stages.push(Stage {
                dim,
                heads,
                blocks,
                downsample,
            });
        }
        let norm = ln_params(store, &format!("{prefix}norm"), config.stage_dim(3));
        Ok(SwinBackbone {
            config: config.clone(),
            prefix: prefix.to_string(),
            patch_proj,
            patch_norm,
            stages,
            norm,
        })
    }

    /// Builds a standalone backbone: seeded random initialization, then the
    /// pretrained archive if the configuration names one.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::register(config, &mut store, "", &mut rng)?;
        if let Some(path) = &config.pretrained_weights {
            net.load_pretrained(&mut store, &Archive::load(path)?, "")?;
        }
        Ok((net, store))
    }

    /// Copies backbone parameters from an archive whose names carry
    /// `archive_prefix` in place of this backbone's prefix.
    pub fn load_pretrained(&self, store: &mut ParamStore, archive: &Archive, archive_prefix: &str) -> Result<usize> {
        store.load_from(archive, &self.prefix, archive_prefix)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Runs the backbone on a normalized `H × W × 3` input held in `x`
    /// (`[H·W, 3]`). Both sides must be multiples of 32.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, height: usize, width: usize) -> Result<StageVars> {
        let m = self.config.input_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "backbone input {height}x{width} must be a positive multiple of {m} on both sides"
            )));
        }
        if g.shape(x) != [height * width, 3] && g.shape(x) != [height, width, 3] {
            return Err(Error::Shape(format!("input tensor {:?} is not {height}x{width}x3", g.shape(x))));
        }
        let p = self.config.patch_size;
        let c = self.config.embed_dim;
        let (h, w) = (height / p, width / p);

        // Patch embedding as im2col over non-overlapping p×p patches, columns
        // ordered (channel, ky, kx) to match the convolution weight layout.
        let idx: Vec<u32> = (0..h * w)
            .flat_map(|t| {
                let (py, px) = (t / w, t % w);
                (0..3).flat_map(move |ch| {
                    (0..p).flat_map(move |ky| {
                        (0..p).map(move |kx| (((py * p + ky) * width + px * p + kx) * 3 + ch) as u32)
                    })
                })
            })
            .collect();
        let cols = g.gather(x, Arc::new(idx), &[h * w, 3 * p * p]);
        let wv = g.param(store, self.patch_proj.0);
        let wv = g.reshape(wv, &[c, 3 * p * p]);
        let bv = g.param(store, self.patch_proj.1);
        let mut t = g.linear(cols, wv, Some(bv));
        t = layer_norm(g, store, t, self.patch_norm);

        let mut shape = GridShape {
            height: h,
            width: w,
            channels: c,
        };
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for (j, blk) in stage.blocks.iter().enumerate() {
                t = self.block_forward(g, store, blk, t, shape, stage.heads, j % 2 == 1);
            }
            outs.push((t, shape));
            if let Some(merge) = &stage.downsample {
                t = patch_merge(g, store, merge, t, shape);
                shape = GridShape {
                    height: shape.height.div_ceil(2),
                    width: shape.width.div_ceil(2),
                    channels: 2 * stage.dim,
                };
            }
        }
        let last = outs[3];
        let normed = layer_norm(g, store, last.0, self.norm);
        Ok(StageVars {
            features: [outs[1].0, outs[2].0, outs[3].0, normed],
            shapes: [outs[1].1, outs[2].1, outs[3].1, last.1],
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        blk: &Block,
        x: Var,
        shape: GridShape,
        heads: usize,
        odd: bool,
    ) -> Var {
        let GridShape {
            height: h,
            width: w,
            channels: c,
        } = shape;
        let (ws, shift) = if h.min(w) <= self.config.window_size {
            (h.min(w), 0)
        } else {
            (self.config.window_size, if odd { self.config.window_size / 2 } else { 0 })
        };
        let geo = WindowGeometry::new(h, w, ws, shift);
        let n = ws * ws;
        let nw = geo.num_windows();
        let hd = c / heads;

        let y = layer_norm(g, store, x, blk.norm1);
        let win = g.gather(y, geo.partition_index(c), &[nw * n, c]);
        let qkv_w = g.param(store, blk.qkv.0);
        let qkv_b = g.param(store, blk.qkv.1);
        let qkv = g.linear(win, qkv_w, Some(qkv_b));
        let split = |g: &mut Graph, s: usize| {
            let idx: Vec<u32> = (0..nw * heads * n * hd)
                .map(|o| {
                    let d = o % hd;
                    let tok = (o / hd) % n;
                    let a = (o / (hd * n)) % heads;
                    let wi = o / (hd * n * heads);
                    ((wi * n + tok) * 3 * c + s * c + a * hd + d) as u32
                })
                .collect();
            g.gather(qkv, Arc::new(idx), &[nw * heads, n, hd])
        };
        let q = split(g, 0);
        let q = g.scale(q, (hd as f64).powf(-0.5));
        let k = split(g, 1);
        let v = split(g, 2);
        let logits = g.bmm_nt(q, k);
        let logits = g.reshape(logits, &[nw, heads, n, n]);
        let table = g.param(store, blk.rel_bias);
        let bias = g.gather(
            table,
            relative_bias_index(ws, self.config.window_size, heads),
            &[heads, n, n],
        );
        let mut logits = g.add_suffix(logits, bias);
        if shift > 0 {
            let mask = g.constant(geo.shift_mask(heads), &[nw, heads, n, n]);
            logits = g.add(logits, mask);
        }
        let logits = g.reshape(logits, &[nw * heads, n, n]);
        let attn = g.softmax(logits);
        let out = g.bmm(attn, v);
        let idx: Vec<u32> = (0..nw * n * c)
            .map(|o| {
                let ch = o % c;
                let (a, d) = (ch / hd, ch % hd);
                let tok = (o / c) % n;
                let wi = o / (c * n);
                (((wi * heads + a) * n + tok) * hd + d) as u32
            })
            .collect();
        let merged = g.gather(out, Arc::new(idx), &[nw * n, c]);
        let pw = g.param(store, blk.proj.0);
        let pb = g.param(store, blk.proj.1);
        let proj = g.linear(merged, pw, Some(pb));
        let back = g.gather(proj, geo.reverse_index(c), &[h * w, c]);
        let x = g.add(x, back);

        let y = layer_norm(g, store, x, blk.norm2);
        let (w1, b1) = (g.param(store, blk.fc1.0), g.param(store, blk.fc1.1));
        let y = g.linear(y, w1, Some(b1));
        let y = g.gelu(y);
        let (w2, b2) = (g.param(store, blk.fc2.0), g.param(store, blk.fc2.1));
        let y = g.linear(y, w2, Some(b2));
        g.add(x, y)
    }
}

fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Var {
    let (w, b) = (g.param(store, w), g.param(store, b));
    g.layer_norm(x, w, b, LN_EPS)
}

/// 2×2 neighbourhood concatenation (order (0,0), (1,0), (0,1), (1,1)),
/// layer norm, then a bias-free linear reduction 4C → 2C.
fn patch_merge(g: &mut Graph, store: &ParamStore, merge: &Merge, x: Var, shape: GridShape) -> Var {
    let GridShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let idx: Vec<u32> = (0..oh * ow * 4 * c)
        .map(|o| {
            let ch = o % c;
            let s = (o / c) % 4;
            let t = o / (4 * c);
            let (y, x) = (2 * (t / ow) + OFFSETS[s].0, 2 * (t % ow) + OFFSETS[s].1);
            if y < h && x < w {
                ((y * w + x) * c + ch) as u32
            } else {
                PAD
            }
        })
        .collect();
    let cat = g.gather(x, Arc::new(idx), &[oh * ow, 4 * c]);
    let y = layer_norm(g, store, cat, merge.norm);
    let r = g.param(store, merge.reduction);
    g.linear(y, r, None)
}

/// Token layout of (shifted, padded) windows over an `h × w` grid.
struct WindowGeometry {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    ws: usize,
    shift: usize,
}

impl WindowGeometry {
    fn new(h: usize, w: usize, ws: usize, shift: usize) -> Self {
        WindowGeometry {
            h,
            w,
            hp: h.div_ceil(ws) * ws,
            wp: w.div_ceil(ws) * ws,
            ws,
            shift,
        }
    }

    fn num_windows(&self) -> usize {
        (self.hp / self.ws) * (self.wp / self.ws)
    }

    /// Window-major position `(window, token)` -> padded-grid coordinate
    /// before the cyclic shift.
    fn source(&self, wi: usize, tok: usize) -> (usize, usize) {
        let per_row = self.wp / self.ws;
        let rs = (wi / per_row) * self.ws + tok / self.ws;
        let cs = (wi % per_row) * self.ws + tok % self.ws;
        ((rs + self.shift) % self.hp, (cs + self.shift) % self.wp)
    }

    fn partition_index(&self, c: usize) -> Arc<Vec<u32>> {
        let n = self.ws * self.ws;
        let idx = (0..self.num_windows() * n * c)
            .map(|o| {
                let ch = o % c;
                let tok = (o / c) % n;
                let wi = o / (c * n);
                let (r, col) = self.source(wi, tok);
                if r < self.h && col < self.w {
                    ((r * self.w + col) * c + ch) as u32
                } else {
                    PAD
                }
            })
            .collect();
        Arc::new(idx)
    }

    fn reverse_index(&self, c: usize) -> Arc<Vec<u32>> {
        let per_row = self.wp / self.ws;
        let n = self.ws * self.ws;
        let idx = (0..self.h * self.w * c)
            .map(|o| {
                let ch = o % c;
                let (r, col) = ((o / c) / self.w, (o / c) % self.w);
                let rs = (r + self.hp - self.shift) % self.hp;
                let cs = (col + self.wp - self.shift) % self.wp;
                let wi = (rs / self.ws) * per_row + cs / self.ws;
                let tok = (rs % self.ws) * self.ws + cs % self.ws;
                ((wi * n + tok) * c + ch) as u32
            })
            .collect();
        Arc::new(idx)
    }

    /// Additive attention mask keeping shifted windows from mixing regions
    /// that are not adjacent in the unshifted image.
    fn shift_mask(&self, heads: usize) -> Vec<f64> {
        let region = |v: usize, len: usize| {
            if v < len - self.ws {
                0
            } else if v < len - self.shift {
                1
            } else {
                2
            }
        };
        let n = self.ws * self.ws;
        let per_row = self.wp / self.ws;
        let mut out = Vec::with_capacity(self.num_windows() * heads * n * n);
        for wi in 0..self.num_windows() {
            let labels: Vec<usize> = (0..n)
                .map(|tok| {
                    let rs = (wi / per_row) * self.ws + tok / self.ws;
                    let cs = (wi % per_row) * self.ws + tok % self.ws;
                    region(rs, self.hp) * 3 + region(cs, self.wp)
                })
                .collect();
            for _ in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        out.push(if labels[i] == labels[j] { 0.0 } else { MASK_FILL });
                    }
                }
            }
        }
        out
    }
}

/// Gather index from the `[(2W-1)², heads]` bias table into `[heads, n, n]`
/// for an effective window `ws ≤ W`.
fn relative_bias_index(ws: usize, table_window: usize, heads: usize) -> Arc<Vec<u32>> {
    let n = ws * ws;
    let side = 2 * table_window - 1;
    let idx = (0..heads * n * n)
        .map(|o| {
            let j = o % n;
            let i = (o / n) % n;
            let a = o / (n * n);
            let dy = (i / ws) as isize - (j / ws) as isize + table_window as isize - 1;
            let dx = (i % ws) as isize - (j % ws) as isize + table_window as isize - 1;
            ((dy as usize * side + dx as usize) * heads + a) as u32
        })
        .collect();
    Arc::new(idx)
}

/// Bilinear resampling of a `[h·w, c]` grid to `out_h × out_w`
/// (half-pixel centres, no corner alignment). Written as two separable
/// `a + t·(b − a)` interpolations so constant inputs stay exactly constant.
pub fn bilinear_resize(g: &mut Graph, x: Var, shape: GridShape, out_h: usize, out_w: usize) -> Var {
    let GridShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    if (h, w) == (out_h, out_w) {
        return x;
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let lerp = |g: &mut Graph, x: Var, i0: Vec<u32>, i1: Vec<u32>, t: Vec<f64>, shape: &[usize]| {
        let a = g.gather(x, Arc::new(i0), shape);
        let b = g.gather(x, Arc::new(i1), shape);
        let t = g.constant(t, shape);
        let d = g.sub(b, a);
        let d = g.mul(t, d);
        g.add(a, d)
    };
    // columns: [h, out_w, c]
    let tx = taps(w, out_w);
    let mut i0 = Vec::with_capacity(h * out_w * c);
    let mut i1 = Vec::with_capacity(h * out_w * c);
    let mut t = Vec::with_capacity(h * out_w * c);
    for y in 0..h {
        for &(a, b, l) in &tx {
            for ch in 0..c {
                i0.push(((y * w + a) * c + ch) as u32);
                i1.push(((y * w + b) * c + ch) as u32);
                t.push(l);
            }
        }
    }
    let xs = lerp(g, x, i0, i1, t, &[h * out_w, c]);
    // rows: [out_h, out_w, c]
    let ty = taps(h, out_h);
    let mut i0 = Vec::with_capacity(out_h * out_w * c);
    let mut i1 = Vec::with_capacity(out_h * out_w * c);
    let mut t = Vec::with_capacity(out_h * out_w * c);
    for &(a, b, l) in &ty {
        for xo in 0..out_w {
            for ch in 0..c {
                i0.push(((a * out_w + xo) * c + ch) as u32);
                i1.push(((b * out_w + xo) * c + ch) as u32);
                t.push(l);
            }
        }
    }
    lerp(g, xs, i0, i1, t, &[out_h * out_w, c])
}

/// `[f1, Up(f2), Up(f3), Up(f4)]` on a graph; returns `[H/8·W/8, 22C]`.
pub fn fuse_on(g: &mut Graph, sv: &StageVars) -> Result<(Var, GridShape)> {
    let base = sv.shapes[0];
    let c = base.channels / 2;
    let expect = [2 * c, 4 * c, 8 * c, 8 * c];
    for (i, (s, &ch)) in sv.shapes.iter().zip(&expect).enumerate() {
        if s.channels != ch || s.height == 0 || s.width == 0 {
            return Err(Error::Shape(format!(
                "stage feature f{} has {} channels, expected {ch}",
                i + 1,
                s.channels
            )));
        }
    }
    if sv.shapes[2].height != sv.shapes[3].height || sv.shapes[2].width != sv.shapes[3].width {
        return Err(Error::Shape("f3 and f4 must share a resolution".into()));
    }
    let mut parts = vec![sv.features[0]];
    for i in 1..4 {
        parts.push(bilinear_resize(g, sv.features[i], sv.shapes[i], base.height, base.width));
    }
    let fused = g.concat_last(&parts);
    Ok((
        fused,
        GridShape {
            height: base.height,
            width: base.width,
            channels: 22 * c,
        },
    ))
}

fn to_map(g: &Graph, v: Var, s: GridShape) -> FeatureMap {
    FeatureMap {
        height: s.height,
        width: s.width,
        channels: s.channels,
        data: g.value(v).to_vec(),
    }
}

/// Stage features of a normalized image whose sides are multiples of 32.
pub fn extract_stage_features(net: &SwinBackbone, store: &ParamStore, img: &FeatureMap) -> Result<StageFeatures> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {}", img.channels)));
    }
    let mut g = Graph::inference();
    let x = g.constant(img.data.clone(), &[img.height * img.width, 3]);
    let sv = net.forward(&mut g, store, x, img.height, img.width)?;
    let f = sv.features;
    let s = sv.shapes;
    Ok(StageFeatures {
        f1: to_map(&g, f[0], s[0]),
        f2: to_map(&g, f[1], s[1]),
        f3: to_map(&g, f[2], s[2]),
        f4: to_map(&g, f[3], s[3]),
    })
}

/// Upsamples and concatenates plain stage features.
pub fn fuse_pyramid(sf: &StageFeatures) -> Result<FusedFeature> {
    let mut g = Graph::inference();
    let maps = sf.maps();
    let mut features = Vec::with_capacity(4);
    let mut shapes = Vec::with_capacity(4);
    for (i, m) in maps.iter().enumerate() {
        if m.data.len() != m.height * m.width * m.channels {
            return Err(Error::Shape(format!("f{} data length mismatch", i + 1)));
        }
        features.push(g.constant(m.data.clone(), &[m.height * m.width, m.channels]));
        shapes.push(GridShape {
            height: m.height,
            width: m.width,
            channels: m.channels,
        });
    }
    let features: [Var; 4] = features.try_into().expect("four stages");
    let shapes: [GridShape; 4] = shapes.try_into().expect("four stages");
    let (f1, f2) = (maps[0], maps[1]);
    if f2.height * 2 != f1.height || f2.width * 2 != f1.width {
        return Err(Error::Shape(format!(
            "f2 {}x{} is not half of f1 {}x{}",
            f2.height, f2.width, f1.height, f1.width
        )));
    }
    let (fused, s) = fuse_on(&mut g, &StageVars { features, shapes })?;
    Ok(FusedFeature(to_map(&g, fused, s)))
}
