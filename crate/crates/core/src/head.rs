//! Cross-attention distance mapping and the regression head.
//!
//! The fused reference and distorted features are flattened into token
//! sequences, projected to a working width `D`, and mapped into a distance
//! space under one of four [`MappingMode`]s. A small MLP regresses the
//! mean-pooled result to a score in `(0, 1)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::similarity::texture_structure_on;

const LN_EPS: f64 = 1e-5;

/// How a feature pair is turned into the mapped feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingMode {
    /// Mode 1: reference queries attend over the distorted features.
    CrossAttn,
    /// Mode 2: as mode 1 on the feature difference.
    DiffCrossAttn,
    /// Mode 3: projected feature difference, no attention.
    Diff,
    /// Mode 4: per-channel texture/structure similarity.
    DistsSim,
}

impl MappingMode {
    pub const ALL: [MappingMode; 4] = [
        MappingMode::CrossAttn,
        MappingMode::DiffCrossAttn,
        MappingMode::Diff,
        MappingMode::DistsSim,
    ];

    pub fn number(self) -> u8 {
        match self {
            MappingMode::CrossAttn => 1,
            MappingMode::DiffCrossAttn => 2,
            MappingMode::Diff => 3,
            MappingMode::DistsSim => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(MappingMode::CrossAttn),
            2 => Ok(MappingMode::DiffCrossAttn),
            3 => Ok(MappingMode::Diff),
            4 => Ok(MappingMode::DistsSim),
            _ => Err(Error::Config(format!("mapping mode must be 1-4, got {n}"))),
        }
    }

    fn uses_attention(self) -> bool {
        matches!(self, MappingMode::CrossAttn | MappingMode::DiffCrossAttn)
    }
}

impl fmt::Display for MappingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MappingMode::CrossAttn => "cross-attn",
            MappingMode::DiffCrossAttn => "diff-cross-attn",
            MappingMode::Diff => "diff",
            MappingMode::DistsSim => "dists-sim",
        };
        write!(f, "mode {} ({name})", self.number())
    }
}

impl FromStr for MappingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cross-attn" => Ok(MappingMode::CrossAttn),
            "diff-cross-attn" => Ok(MappingMode::DiffCrossAttn),
            "diff" => Ok(MappingMode::Diff),
            "dists-sim" => Ok(MappingMode::DistsSim),
            other => other
                .parse::<u8>()
                .map_err(|_| Error::Config(format!("unknown mapping mode `{other}`")))
                .and_then(MappingMode::from_number),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channels of the fused feature (22C).
    pub in_channels: usize,
    /// Working width `D`.
    pub dim: usize,
    pub heads: usize,
    pub mode: MappingMode,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.in_channels == 0 || self.dim < 2 {
            return Err(Error::Config("head dimensions too small".into()));
        }
        Ok(())
    }

    /// Width of the vector entering the regression MLP.
    pub fn regression_width(&self) -> usize {
        match self.mode {
            MappingMode::DistsSim => self.in_channels,
            _ => self.dim,
        }
    }
}

struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    q2: ParamId,
    k2: ParamId,
    v2: ParamId,
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ln3: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

pub struct DistanceHead {
    config: HeadConfig,
    proj: Option<ParamId>,
    attn: Option<Attention>,
    reg1: (ParamId, ParamId),
    reg2: (ParamId, ParamId),
}

fn square_weight(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, d: usize) -> ParamId {
    store.insert(name, &[d, d], trunc_normal(rng, d * d, (1.0 / d as f64).sqrt()))
}

fn linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) -> (ParamId, ParamId) {
    (
        store.insert(
            format!("{name}.weight"),
            &[out, inp],
            trunc_normal(rng, out * inp, (1.0 / inp as f64).sqrt()),
        ),
        store.insert(format!("{name}.bias"), &[out], vec![0.0; out]),
    )
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.insert(format!("{name}.weight"), &[d], vec![1.0; d]),
        store.insert(format!("{name}.bias"), &[d], vec![0.0; d]),
    )
}

impl DistanceHead {
    /// Registers the parameters the configured mode uses under `prefix`.
    pub fn register(config: &HeadConfig, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let proj = (config.mode != MappingMode::DistsSim).then(|| {
            let c = config.in_channels;
            store.insert(format!("{prefix}proj.weight"), &[d, c], trunc_normal(rng, d * c, (1.0 / c as f64).sqrt()))
        });
        let attn = config.mode.uses_attention().then(|| Attention {
            q: square_weight(store, rng, format!("{prefix}attn.q.weight"), d),
            k: square_weight(store, rng, format!("{prefix}attn.k.weight"), d),
            v: square_weight(store, rng, format!("{prefix}attn.v.weight"), d),
            q2: square_weight(store, rng, format!("{prefix}cross.q.weight"), d),
            k2: square_weight(store, rng, format!("{prefix}cross.k.weight"), d),
            v2: square_weight(store, rng, format!("{prefix}cross.v.weight"), d),
            ln1: norm(store, &format!("{prefix}norm1"), d),
            ln2: norm(store, &format!("{prefix}norm2"), d),
            ln3: norm(store, &format!("{prefix}norm3"), d),
            fc1: linear(store, rng, &format!("{prefix}mlp.fc1"), 4 * d, d),
            fc2: linear(store, rng, &format!("{prefix}mlp.fc2"), d, 4 * d),
        });
        let r = config.regression_width();
        let reg1 = linear(store, rng, &format!("{prefix}reg.fc1"), r / 2, r);
        let reg2 = linear(store, rng, &format!("{prefix}reg.fc2"), 1, r / 2);
        Ok(DistanceHead {
            config: config.clone(),
            proj,
            attn,
            reg1,
            reg2,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Weight and bias of the final regression layer.
    pub fn final_layer(&self) -> (ParamId, ParamId) {
        self.reg2
    }

    fn check_feature(&self, g: &Graph, f: Var) -> Result<usize> {
        match g.shape(f) {
            [n, c] if *c == self.config.in_channels && *n > 0 => Ok(*n),
            s => Err(Error::Shape(format!(
                "head expects [tokens, {}] features, got {s:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Projects a row-major `[H·W, 22C]` feature to `[H·W, D]` tokens.
    pub fn tokens_from_feature(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        self.check_feature(g, f)?;
        let p = self
            .proj
            .ok_or_else(|| Error::Config("this mapping mode has no token projection".into()))?;
        let w = g.param(store, p);
        Ok(g.linear(f, w, None))
    }

    /// The two attention stages and feed-forward block on token sequences.
    pub fn cross_attention(&self, g: &mut Graph, store: &ParamStore, ref_tokens: Var, dist_tokens: Var) -> Result<Var> {
        self.cross_attention_traced(g, store, ref_tokens, dist_tokens).map(|(out, _)| out)
    }

    /// As [`Self::cross_attention`], also returning the self- and
    /// cross-attention probability tensors `[h, n, n]`.
    pub fn cross_attention_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ref_tokens: Var,
        dist_tokens: Var,
    ) -> Result<(Var, [Var; 2])> {
        let a = self
            .attn
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no attention block", self.config.mode)))?;
        let d = self.config.dim;
        let (rs, ds) = (g.shape(ref_tokens).to_vec(), g.shape(dist_tokens).to_vec());
        if rs != ds || rs.len() != 2 || rs[1] != d {
            return Err(Error::Shape(format!("token sequences {rs:?} and {ds:?} must both be [n, {d}]")));
        }
        let heads = self.config.heads;
        let w = |g: &mut Graph, id| g.param(store, id);

        let (wq, wk, wv) = (w(g, a.q), w(g, a.k), w(g, a.v));
        let q = g.linear(dist_tokens, wq, None);
        let k = g.linear(dist_tokens, wk, None);
        let v = g.linear(dist_tokens, wv, None);
        let (z, attn1) = mhsa(g, q, k, v, heads, "self-attention")?;
        let (g1, b1) = (w(g, a.ln1.0), w(g, a.ln1.1));
        let z1 = g.layer_norm(z, g1, b1, LN_EPS);

        let (wq2, wk2, wv2) = (w(g, a.q2), w(g, a.k2), w(g, a.v2));
        let q2 = g.linear(ref_tokens, wq2, None);
        let k2 = g.linear(z1, wk2, None);
        let v2 = g.linear(z1, wv2, None);
        let (z, attn2) = mhsa(g, q2, k2, v2, heads, "cross-attention")?;
        let z = g.add(z, z1);
        let (g2, b2) = (w(g, a.ln2.0), w(g, a.ln2.1));
        let z2 = g.layer_norm(z, g2, b2, LN_EPS);

        let (f1w, f1b) = (w(g, a.fc1.0), w(g, a.fc1.1));
        let y = g.linear(z2, f1w, Some(f1b));
        let y = g.gelu(y);
        let (f2w, f2b) = (w(g, a.fc2.0), w(g, a.fc2.1));
        let y = g.linear(y, f2w, Some(f2b));
        let y = g.add(y, z2);
        let (g3, b3) = (w(g, a.ln3.0), w(g, a.ln3.1));
        Ok((g.layer_norm(y, g3, b3, LN_EPS), [attn1, attn2]))
    }

    /// Maps a `[H·W, 22C]` feature pair under the configured mode. Returns
    /// `[n, D]` tokens for modes 1-3 and a `[1, 22C]` similarity row for
    /// mode 4.
    pub fn map_distance(&self, g: &mut Graph, store: &ParamStore, f_ref: Var, f_dist: Var) -> Result<Var> {
        let n = self.check_feature(g, f_ref)?;
        if g.shape(f_dist) != g.shape(f_ref) {
            return Err(Error::Shape(format!(
                "reference {:?} and distorted {:?} features differ",
                g.shape(f_ref),
                g.shape(f_dist)
            )));
        }
        debug_assert!(n > 0);
        match self.config.mode {
            MappingMode::CrossAttn => {
                let r = self.tokens_from_feature(g, store, f_ref)?;
                let t = self.tokens_from_feature(g, store, f_dist)?;
                self.cross_attention(g, store, r, t)
            }
            MappingMode::DiffCrossAttn => {
                let diff = g.sub(f_dist, f_ref);
                let r = self.tokens_from_feature(g, store, f_ref)?;
                let t = self.tokens_from_feature(g, store, diff)?;
                self.cross_attention(g, store, r, t)
            }
            MappingMode::Diff => {
                let diff = g.sub(f_dist, f_ref);
                self.tokens_from_feature(g, store, diff)
            }
            MappingMode::DistsSim => {
                let (l, s) = texture_structure_on(g, f_ref, f_dist)?;
                let sum = g.add(l, s);
                let avg = g.scale(sum, 0.5);
                let c = self.config.in_channels;
                Ok(g.reshape(avg, &[1, c]))
            }
        }
    }

    /// Mean-pools over tokens and regresses to a `[1]` score in `(0, 1)`.
    pub fn regress_score(&self, g: &mut Graph, store: &ParamStore, mapped: Var) -> Result<Var> {
        let r = self.config.regression_width();
        if g.shape(mapped).last() != Some(&r) {
            return Err(Error::Shape(format!(
                "regression expects width {r}, got {:?}",
                g.shape(mapped)
            )));
        }
        let pooled = g.mean_rows(mapped);
        let pooled = g.reshape(pooled, &[1, r]);
        let (w1, b1) = (g.param(store, self.reg1.0), g.param(store, self.reg1.1));
        let y = g.linear(pooled, w1, Some(b1));
        let y = g.relu(y);
        let (w2, b2) = (g.param(store, self.reg2.0), g.param(store, self.reg2.1));
        let y = g.linear(y, w2, Some(b2));
        let y = g.sigmoid(y);
        let y = g.reshape(y, &[1]);
        if !g.value(y)[0].is_finite() {
            return Err(Error::Numeric {
                block: "regression head".into(),
            });
        }
        Ok(y)
    }

    /// `map_distance` followed by `regress_score`.
    pub fn distance(&self, g: &mut Graph, store: &ParamStore, f_ref: Var, f_dist: Var) -> Result<Var> {
        let mapped = self.map_distance(g, store, f_ref, f_dist)?;
        self.regress_score(g, store, mapped)
    }
}

/// Multi-head scaled dot-product attention without output projection.
/// Returns the merged `[n, D]` output and the `[h, n, n]` probabilities.
fn mhsa(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, block: &str) -> Result<(Var, Var)> {
    let (n, d) = (g.shape(q)[0], g.shape(q)[1]);
    let hd = d / heads;
    let split: Arc<Vec<u32>> = Arc::new(
        (0..heads * n * hd)
            .map(|o| {
                let (a, t, j) = (o / (n * hd), (o / hd) % n, o % hd);
                (t * d + a * hd + j) as u32
            })
            .collect(),
    );
    let qh = g.gather(q, split.clone(), &[heads, n, hd]);
    let kh = g.gather(k, split.clone(), &[heads, n, hd]);
    let vh = g.gather(v, split, &[heads, n, hd]);
    let logits = g.bmm_nt(qh, kh);
    let logits = g.scale(logits, (hd as f64).powf(-0.5));
    if g.value(logits).iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric { block: block.into() });
    }
    let attn = g.softmax(logits);
    let out = g.bmm(attn, vh);
    let merge: Vec<u32> = (0..n * d)
        .map(|o| {
            let (t, c) = (o / d, o % d);
            let (a, j) = (c / hd, c % hd);
            ((a * n + t) * hd + j) as u32
        })
        .collect();
    Ok((g.gather(out, Arc::new(merge), &[n, d]), attn))
}
