//! The DPIS metric.
//!
//! Distance `D1` weights per-channel texture and structure similarity of six
//! VGG-16 stages (the input plus the last activation of each block), on the
//! image and on its gradient map; a 2→1 affine layer fuses the two. Distance
//! `D2` sums channel-scaled squared differences of unit-normalized AlexNet
//! activations over five stages, again for both inputs and fused the same
//! way. The result is `γ·D1 + (1 − γ)·D2`.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{gradient_map, normalize, ChannelStats, ImageTensor};
use crate::metric::{archive_kind, check_pair, FrozenFilter, LearnedMetric};
use crate::nn::{conv2d, max_pool};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::similarity::texture_structure_on;

pub const KIND: &str = "dpis";

/// Added to feature norms before unit normalization.
pub const NORM_EPS: f64 = 1e-10;
/// Smallest side fed to the feature networks; smaller inputs are
/// reflect-padded.
pub const MIN_SIDE: usize = 32;
const VGG_CONVS: [usize; 5] = [2, 2, 3, 3, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpisConfig {
    /// Output channels of the five VGG-16 blocks.
    pub vgg_widths: [usize; 5],
    /// Output channels of the five AlexNet convolutions.
    pub alexnet_widths: [usize; 5],
    pub stats: ChannelStats,
    pub seed: u64,
    /// Archive holding `vgg.features.*` and `alexnet.features.*` weights.
    pub pretrained_weights: Option<PathBuf>,
}

impl DpisConfig {
    pub fn standard() -> Self {
        DpisConfig {
            vgg_widths: [64, 128, 256, 512, 512],
            alexnet_widths: [64, 192, 384, 256, 256],
            stats: ChannelStats::IMAGENET,
            seed: 0,
            pretrained_weights: None,
        }
    }

    /// Narrow random networks with the standard topology.
    pub fn tiny_test() -> Self {
        DpisConfig {
            vgg_widths: [4, 8, 8, 16, 16],
            alexnet_widths: [4, 8, 12, 8, 8],
            ..Self::standard()
        }
    }

    /// Channels of the six similarity stages.
    pub fn vgg_stage_channels(&self) -> [usize; 6] {
        let w = self.vgg_widths;
        [3, w[0], w[1], w[2], w[3], w[4]]
    }

    fn validate(&self) -> Result<()> {
        if self.vgg_widths.contains(&0) || self.alexnet_widths.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

type Conv = (ParamId, ParamId);

/// One VGG block: its convolutions, each followed by ReLU.
struct VggBlock {
    convs: Vec<Conv>,
}

/// Feature maps `[H·W, C]` with their spatial sizes.
#[derive(Clone, Debug)]
pub struct Stages {
    pub vars: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
}

pub struct Dpis {
    config: DpisConfig,
    store: ParamStore,
    vgg: Vec<VggBlock>,
    alexnet: Vec<Conv>,
    alpha: Vec<ParamId>,
    beta: Vec<ParamId>,
    psi: Vec<ParamId>,
    fc_sim: (ParamId, ParamId),
    fc_l2: (ParamId, ParamId),
    gamma: ParamId,
}

fn conv_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, k: usize) -> Conv {
    (
        store.insert(format!("{name}.weight"), &[out, inp, k, k], kaiming_uniform(rng, out * inp * k * k, inp * k * k)),
        store.insert(format!("{name}.bias"), &[out], vec![0.0; out]),
    )
}

impl Dpis {
    pub fn new(config: DpisConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut vgg = Vec::new();
        let mut index = 0;
        let mut cin = 3;
        for (b, &width) in config.vgg_widths.iter().enumerate() {
            let mut convs = Vec::new();
            for _ in 0..VGG_CONVS[b] {
                convs.push(conv_params(&mut store, &mut rng, &format!("vgg.features.{index}"), width, cin, 3));
                cin = width;
                index += 2;
            }
            index += 1; // pooling layer
            vgg.push(VggBlock { convs });
        }

        let aw = config.alexnet_widths;
        let alex_layout = [(0, 11), (3, 5), (6, 3), (8, 3), (10, 3)];
        let mut cin = 3;
        let mut alexnet = Vec::new();
        for (&(idx, k), &width) in alex_layout.iter().zip(&aw) {
            alexnet.push(conv_params(&mut store, &mut rng, &format!("alexnet.features.{idx}"), width, cin, k));
            cin = width;
        }

        let chans = config.vgg_stage_channels();
        let total: usize = chans.iter().sum();
        let w0 = 1.0 / (2 * total) as f64;
        let alpha = (0..6)
            .map(|i| store.insert(format!("dpis.alpha.{i}"), &[chans[i]], vec![w0; chans[i]]))
            .collect();
        let beta = (0..6)
            .map(|i| store.insert(format!("dpis.beta.{i}"), &[chans[i]], vec![w0; chans[i]]))
            .collect();
        let psi = (0..5)
            .map(|k| store.insert(format!("dpis.psi.{k}"), &[aw[k]], vec![1.0; aw[k]]))
            .collect();
        let fc = |store: &mut ParamStore, name: &str| {
            (
                store.insert(format!("dpis.{name}.weight"), &[1, 2], vec![0.5, 0.5]),
                store.insert(format!("dpis.{name}.bias"), &[1], vec![0.0]),
            )
        };
        let fc_sim = fc(&mut store, "fc_sim");
        let fc_l2 = fc(&mut store, "fc_l2");
        let gamma = store.insert("dpis.gamma", &[1], vec![0.5]);

        if let Some(path) = &config.pretrained_weights {
            let archive = Archive::load(path)?;
            store.load_from(&archive, "vgg.", "vgg.")?;
            store.load_from(&archive, "alexnet.", "alexnet.")?;
        }
        Ok(Dpis {
            config,
            store,
            vgg,
            alexnet,
            alpha,
            beta,
            psi,
            fc_sim,
            fc_l2,
            gamma,
        })
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let kind = archive_kind(archive)?;
        if kind != KIND {
            return Err(Error::Archive(format!("checkpoint holds a `{kind}` model, not `{KIND}`")));
        }
        let mut config: DpisConfig = serde_json::from_value(archive.meta["config"].clone())
            .map_err(|e| Error::Archive(format!("model configuration: {e}")))?;
        config.pretrained_weights = None;
        let mut model = Self::new(config)?;
        for prefix in ["vgg.", "alexnet.", "dpis."] {
            model.store.load_from(archive, prefix, prefix)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &DpisConfig {
        &self.config
    }

    pub fn alpha(&self) -> &[ParamId] {
        &self.alpha
    }

    pub fn beta(&self) -> &[ParamId] {
        &self.beta
    }

    pub fn psi(&self) -> &[ParamId] {
        &self.psi
    }

    pub fn fc_sim(&self) -> (ParamId, ParamId) {
        self.fc_sim
    }

    pub fn fc_l2(&self) -> (ParamId, ParamId) {
        self.fc_l2
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    /// Normalized, padded network input.
    fn prepare(&self, g: &mut Graph, img: &ImageTensor) -> Result<(Var, usize, usize)> {
        let padded = img.reflect_pad_to(MIN_SIDE, MIN_SIDE);
        let x = normalize(&padded, &self.config.stats)?;
        let (h, w) = (padded.height(), padded.width());
        Ok((g.constant(x.data, &[h * w, 3]), h, w))
    }

    /// The six similarity stages: the input, then the last ReLU of each
    /// VGG block.
    pub fn vgg_stages(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Stages {
        let mut out = Stages {
            vars: vec![x],
            sizes: vec![(h, w)],
        };
        let (mut t, mut h, mut w, mut c) = (x, h, w, 3);
        for (b, block) in self.vgg.iter().enumerate() {
            if b > 0 {
                let (p, ph, pw) = max_pool(g, t, (h, w, c), 2, 2);
                (t, h, w) = (p, ph, pw);
            }
            for &conv in &block.convs {
                let (y, oh, ow) = conv2d(g, store, t, (h, w, c), conv, 3, 1, 1);
                t = g.relu(y);
                (h, w, c) = (oh, ow, store.get(conv.0).shape[0]);
            }
            out.vars.push(t);
            out.sizes.push((h, w));
        }
        out
    }

    /// ReLU outputs of the five AlexNet convolutions.
    pub fn alexnet_stages(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Stages {
        const GEOMETRY: [(usize, usize, usize); 5] = [(11, 4, 2), (5, 1, 2), (3, 1, 1), (3, 1, 1), (3, 1, 1)];
        let mut out = Stages {
            vars: Vec::new(),
            sizes: Vec::new(),
        };
        let (mut t, mut h, mut w, mut c) = (x, h, w, 3);
        for (i, (&conv, &(k, s, p))) in self.alexnet.iter().zip(&GEOMETRY).enumerate() {
            if i == 1 || i == 2 {
                let (q, ph, pw) = max_pool(g, t, (h, w, c), 3, 2);
                (t, h, w) = (q, ph, pw);
            }
            let (y, oh, ow) = conv2d(g, store, t, (h, w, c), conv, k, s, p);
            t = g.relu(y);
            (h, w, c) = (oh, ow, store.get(conv.0).shape[0]);
            out.vars.push(t);
            out.sizes.push((h, w));
        }
        out
    }

    /// `Σ α·(1 − l) + β·(1 − s)` over the six stages, which equals
    /// `1 − Σ (α·l + β·s)` for normalized weights and is exactly zero for
    /// identical features even with single-precision weights.
    pub fn similarity_distance_on(&self, g: &mut Graph, store: &ParamStore, fx: &Stages, fy: &Stages) -> Result<Var> {
        let mut total = None;
        for i in 0..6 {
            let (l, s) = texture_structure_on(g, fx.vars[i], fy.vars[i])?;
            let dl = g.neg(l);
            let dl = g.add_scalar(dl, 1.0);
            let ds = g.neg(s);
            let ds = g.add_scalar(ds, 1.0);
            let a = g.param(store, self.alpha[i]);
            let b = g.param(store, self.beta[i]);
            let al = g.mul(a, dl);
            let bs = g.mul(b, ds);
            let term = g.add(al, bs);
            let term = g.sum_all(term);
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term),
            });
        }
        Ok(total.expect("six stages"))
    }

    /// Channel-scaled squared distance of unit-normalized activations,
    /// averaged spatially and summed over channels and stages.
    pub fn l2_distance_on(&self, g: &mut Graph, store: &ParamStore, fx: &Stages, fy: &Stages) -> Result<Var> {
        let psi: Vec<Var> = self.psi.iter().map(|&p| g.param(store, p)).collect();
        l2_distance_with(g, &fx.vars, &fy.vars, &psi)
    }

    fn fuse(g: &mut Graph, store: &ParamStore, (w, b): (ParamId, ParamId), a: Var, c: Var) -> Var {
        let pair = g.concat_last(&[a, c]);
        let pair = g.reshape(pair, &[1, 2]);
        let (w, b) = (g.param(store, w), g.param(store, b));
        let y = g.linear(pair, w, Some(b));
        g.reshape(y, &[1])
    }

    fn features(&self, g: &mut Graph, store: &ParamStore, img: &ImageTensor) -> Result<Features> {
        let grad = gradient_map(img);
        let (x, h, w) = self.prepare(g, img)?;
        let (xg, _, _) = self.prepare(g, &grad)?;
        Ok(Features {
            vgg: self.vgg_stages(g, store, x, h, w),
            vgg_grad: self.vgg_stages(g, store, xg, h, w),
            alex: self.alexnet_stages(g, store, x, h, w),
            alex_grad: self.alexnet_stages(g, store, xg, h, w),
        })
    }

    fn branches(&self, g: &mut Graph, store: &ParamStore, fr: &Features, fd: &Features) -> Result<Branches> {
        Ok(Branches {
            sim_img: self.similarity_distance_on(g, store, &fr.vgg, &fd.vgg)?,
            sim_grad: self.similarity_distance_on(g, store, &fr.vgg_grad, &fd.vgg_grad)?,
            l2_img: self.l2_distance_on(g, store, &fr.alex, &fd.alex)?,
            l2_grad: self.l2_distance_on(g, store, &fr.alex_grad, &fd.alex_grad)?,
        })
    }

    fn combine(&self, g: &mut Graph, store: &ParamStore, b: &Branches) -> (Var, Var, Var) {
        let d1 = Self::fuse(g, store, self.fc_sim, b.sim_img, b.sim_grad);
        let d2 = Self::fuse(g, store, self.fc_l2, b.l2_img, b.l2_grad);
        let gamma = g.param(store, self.gamma);
        let one_minus = g.neg(gamma);
        let one_minus = g.add_scalar(one_minus, 1.0);
        let a = g.mul(gamma, d1);
        let c = g.mul(one_minus, d2);
        (g.add(a, c), d1, d2)
    }

    /// Distances with an external parameter store of the same layout.
    pub fn distances_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        reference: &ImageTensor,
        dists: &[&ImageTensor],
    ) -> Result<Vec<Var>> {
        let fr = self.features(g, store, reference)?;
        dists
            .iter()
            .map(|d| {
                check_pair(reference, d)?;
                let fd = self.features(g, store, d)?;
                let b = self.branches(g, store, &fr, &fd)?;
                Ok(self.combine(g, store, &b).0)
            })
            .collect()
    }

    /// Every intermediate distance of one pair.
    pub fn breakdown(&self, x: &ImageTensor, y: &ImageTensor) -> Result<Breakdown> {
        check_pair(x, y)?;
        let mut g = Graph::inference();
        let fx = self.features(&mut g, &self.store, x)?;
        let fy = self.features(&mut g, &self.store, y)?;
        let b = self.branches(&mut g, &self.store, &fx, &fy)?;
        let (d, d1, d2) = self.combine(&mut g, &self.store, &b);
        Ok(Breakdown {
            similarity_image: g.scalar(b.sim_img),
            similarity_gradient: g.scalar(b.sim_grad),
            l2_image: g.scalar(b.l2_img),
            l2_gradient: g.scalar(b.l2_grad),
            d1: g.scalar(d1),
            d2: g.scalar(d2),
            distance: g.scalar(d),
        })
    }

    /// Image-branch similarity distance; the weights must be normalized.
    pub fn similarity_distance(&self, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
        self.check_weights()?;
        Ok(self.breakdown(x, y)?.similarity_image)
    }

    fn check_weights(&self) -> Result<()> {
        let mut sum = 0.0;
        for &id in self.alpha.iter().chain(&self.beta) {
            let v = self.store.values(id);
            if v.iter().any(|&w| w < 0.0) {
                return Err(Error::Parameter(format!("negative weight in {}", self.store.get(id).name)));
            }
            sum += v.iter().sum::<f64>();
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!("texture/structure weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Sum of all texture and structure weights.
    pub fn weight_sum(&self) -> f64 {
        self.alpha
            .iter()
            .chain(&self.beta)
            .map(|&id| self.store.values(id).iter().sum::<f64>())
            .sum()
    }
}

struct Features {
    vgg: Stages,
    vgg_grad: Stages,
    alex: Stages,
    alex_grad: Stages,
}

struct Branches {
    sim_img: Var,
    sim_grad: Var,
    l2_img: Var,
    l2_grad: Var,
}

/// Intermediate values of one DPIS evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Breakdown {
    pub similarity_image: f64,
    pub similarity_gradient: f64,
    pub l2_image: f64,
    pub l2_gradient: f64,
    pub d1: f64,
    pub d2: f64,
    pub distance: f64,
}

/// Unit-normalized ℓ2 distance over stage features `[N_k, C_k]` with
/// per-channel scales `psi[k]`.
pub fn l2_distance_with(g: &mut Graph, fx: &[Var], fy: &[Var], psi: &[Var]) -> Result<Var> {
    if fx.len() != fy.len() || fx.len() != psi.len() || fx.is_empty() {
        return Err(Error::Shape("stage counts differ".into()));
    }
    let mut total = None;
    for k in 0..fx.len() {
        if g.shape(fx[k]) != g.shape(fy[k]) {
            return Err(Error::Shape(format!(
                "stage {k}: {:?} vs {:?}",
                g.shape(fx[k]),
                g.shape(fy[k])
            )));
        }
        let xn = unit_normalize(g, fx[k]);
        let yn = unit_normalize(g, fy[k]);
        let d = g.sub(xn, yn);
        let sq = g.square(d);
        let scaled = g.mul_suffix(sq, psi[k]);
        let per_channel = g.mean_rows(scaled);
        let term = g.sum_all(per_channel);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    Ok(total.expect("non-empty"))
}

fn unit_normalize(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    let ss = g.sum_last(sq);
    let norm = g.sqrt(ss);
    let norm = g.add_scalar(norm, NORM_EPS);
    let n = g.value(norm).len();
    let ones = g.constant(vec![1.0; n], &[n]);
    let inv = g.div(ones, norm);
    g.mul_rows(x, inv)
}

impl LearnedMetric for Dpis {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn frozen(&self) -> FrozenFilter {
        Arc::new(|n: &str| n.starts_with("vgg.") || n.starts_with("alexnet."))
    }

    fn distances_on(&self, g: &mut Graph, reference: &ImageTensor, dists: &[&ImageTensor]) -> Result<Vec<Var>> {
        self.distances_with(g, &self.store, reference, dists)
    }

    /// Clips α, β, ψ at zero, rescales α and β to sum to one and clamps γ
    /// into `[0, 1]`.
    fn project(&mut self) {
        for &id in self.alpha.iter().chain(&self.beta).chain(&self.psi) {
            self.store.values_mut(id).iter_mut().for_each(|w| *w = w.max(0.0));
        }
        let sum = self.weight_sum();
        let ids: Vec<ParamId> = self.alpha.iter().chain(&self.beta).copied().collect();
        let count: usize = ids.iter().map(|&id| self.store.values(id).len()).sum();
        for id in ids {
            self.store.values_mut(id).iter_mut().for_each(|w| {
                *w = if sum > 0.0 { *w / sum } else { 1.0 / count as f64 };
            });
        }
        let g = self.store.values_mut(self.gamma);
        g[0] = g[0].clamp(0.0, 1.0);
        self.store.round_to_f32();
    }

    fn to_archive(&self) -> Archive {
        let mut a = Archive {
            meta: serde_json::json!({ "metric": KIND, "config": self.config }),
            ..Archive::default()
        };
        self.store.export_into(&mut a, "");
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, sample_param_entries, GradCheck};
    use crate::image::FeatureMap;
    use crate::similarity::texture_structure_similarity;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn tiny() -> Dpis {
        Dpis::new(DpisConfig::tiny_test()).unwrap()
    }

    fn textured(size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c): (f64, f64, f64) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random());
        ImageTensor::from_fn(size, size, |y, x, ch| {
            0.5 + 0.3 * ((y as f64 * a + x as f64 * b + ch as f64) + c * 6.0).sin() * ((x as f64 * 0.7).cos())
        })
    }

    fn noisy(img: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        ImageTensor::from_fn(img.height(), img.width(), |y, x, c| img.get(y, x, c) + n.sample(&mut rng))
    }

    #[test]
    fn stage_zero_is_the_input_and_vgg_stride_is_sixteen() {
        let m = tiny();
        let img = textured(64, 1);
        let mut g = Graph::inference();
        let (x, h, w) = m.prepare(&mut g, &img).unwrap();
        let st = m.vgg_stages(&mut g, m.store(), x, h, w);
        assert_eq!(st.vars[0], x);
        assert_eq!(st.sizes, vec![(64, 64), (64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]);
        assert!(st.vars.iter().all(|&v| g.value(v).iter().all(|a| a.is_finite())));
        let st = m.alexnet_stages(&mut g, m.store(), x, h, w);
        assert_eq!(st.sizes, vec![(15, 15), (7, 7), (3, 3), (3, 3), (3, 3)]);
    }

    #[test]
    fn identity_gives_zero() {
        let m = tiny();
        for seed in 0..3 {
            let img = textured(48, seed);
            let b = m.breakdown(&img, &img).unwrap();
            assert_eq!(b.similarity_image, 0.0);
            assert_eq!(b.l2_image, 0.0);
            assert!(b.distance.abs() <= 1e-9, "{b:?}");
        }
    }

    #[test]
    fn noise_gives_positive_similarity_distance() {
        let m = tiny();
        let img = textured(32, 4);
        assert!(m.similarity_distance(&img, &noisy(&img, 0.3, 5)).unwrap() > 0.0);
    }

    #[test]
    fn similarity_distance_matches_stagewise_oracle() {
        let m = tiny();
        let (x, y) = (textured(32, 6), noisy(&textured(32, 6), 0.1, 7));
        let mut g = Graph::inference();
        let (xv, h, w) = m.prepare(&mut g, &x).unwrap();
        let (yv, _, _) = m.prepare(&mut g, &y).unwrap();
        let sx = m.vgg_stages(&mut g, m.store(), xv, h, w);
        let sy = m.vgg_stages(&mut g, m.store(), yv, h, w);
        let mut sim = 0.0;
        for i in 0..6 {
            let (hh, ww) = sx.sizes[i];
            let c = g.value(sx.vars[i]).len() / (hh * ww);
            let fx = FeatureMap::new(hh, ww, c, g.value(sx.vars[i]).to_vec()).unwrap();
            let fy = FeatureMap::new(hh, ww, c, g.value(sy.vars[i]).to_vec()).unwrap();
            let a = m.store().values(m.alpha[i]);
            let b = m.store().values(m.beta[i]);
            for (j, (l, s)) in texture_structure_similarity(&fx, &fy).unwrap().into_iter().enumerate() {
                sim += a[j] * l + b[j] * s;
            }
        }
        let got = m.similarity_distance(&x, &y).unwrap();
        assert!((got - (1.0 - sim)).abs() < 1e-6, "{got} vs {}", 1.0 - sim);
    }

    #[test]
    fn unnormalized_weights_are_rejected() {
        let mut m = tiny();
        let id = m.alpha[2];
        m.store.values_mut(id)[0] += 0.5;
        let img = textured(32, 1);
        assert!(matches!(m.similarity_distance(&img, &img), Err(Error::Parameter(_))));
    }

    #[test]
    fn fusion_and_gamma_compose() {
        let mut m = tiny();
        let (x, y) = (textured(32, 8), noisy(&textured(32, 8), 0.1, 9));
        let b = m.breakdown(&x, &y).unwrap();
        assert!((b.d1 - 0.5 * (b.similarity_image + b.similarity_gradient)).abs() < 1e-12);
        assert!((b.d2 - 0.5 * (b.l2_image + b.l2_gradient)).abs() < 1e-12);
        assert!((b.distance - 0.5 * (b.d1 + b.d2)).abs() < 1e-12);

        let (w, _) = m.fc_sim;
        m.store.set(w, vec![1.0, 0.0]);
        let gamma = m.gamma;
        m.store.set(gamma, vec![1.0]);
        let b = m.breakdown(&x, &y).unwrap();
        assert_eq!(b.d1, b.similarity_image);
        assert_eq!(b.distance, b.d1);
        m.store.set(gamma, vec![0.0]);
        let b = m.breakdown(&x, &y).unwrap();
        assert_eq!(b.distance, b.d2);
    }

    #[test]
    fn zero_psi_annihilates_l2() {
        let mut m = tiny();
        for id in m.psi.clone() {
            let n = m.store.values(id).len();
            m.store.set(id, vec![0.0; n]);
        }
        let (x, y) = (textured(32, 10), textured(32, 11));
        let b = m.breakdown(&x, &y).unwrap();
        assert_eq!((b.l2_image, b.l2_gradient), (0.0, 0.0));
    }

    #[test]
    fn unit_normalization_is_scale_free() {
        let mut g = Graph::inference();
        let a = g.constant(vec![3.0, 4.0], &[1, 2]);
        let b = g.constant(vec![6.0, 8.0], &[1, 2]);
        let psi = g.constant(vec![1.0, 1.0], &[2]);
        let d = l2_distance_with(&mut g, &[a], &[b], &[psi]).unwrap();
        assert!(g.scalar(d).abs() < 1e-15);
    }

    #[test]
    fn stage_scaling_leaves_l2_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..2.0)).collect();
            let y: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..2.0)).collect();
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let k = 2f64.powi(rng.random_range(-4..5));
            let run = |s: f64| {
                let mut g = Graph::inference();
                let a = g.constant(x.iter().map(|v| v * s).collect(), &[6, 4]);
                let b = g.constant(y.iter().map(|v| v * s).collect(), &[6, 4]);
                let psi = g.constant(p.clone(), &[4]);
                let d = l2_distance_with(&mut g, &[a], &[b], &[psi]).unwrap();
                g.scalar(d)
            };
            let (a, b) = (run(1.0), run(k));
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn projection_restores_constraints() {
        let mut m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &id in m.alpha.clone().iter().chain(&m.beta.clone()).chain(&m.psi.clone()) {
            for w in m.store.values_mut(id).iter_mut() {
                *w += rng.random_range(-0.05..0.05);
            }
        }
        let gamma = m.gamma;
        m.store.set(gamma, vec![1.7]);
        m.project();
        for &id in m.alpha.iter().chain(&m.beta).chain(&m.psi) {
            assert!(m.store.values(id).iter().all(|&w| w >= 0.0));
        }
        assert!((m.weight_sum() - 1.0).abs() < 1e-6);
        assert_eq!(m.store.values(m.gamma), &[1.0]);
    }

    #[test]
    fn similarity_path_gradients() {
        let m = tiny();
        let (x, y) = (textured(32, 14), noisy(&textured(32, 14), 0.1, 15));
        let mut store = m.store().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let samples = sample_param_entries(&store, 60, &mut rng, |n| n.starts_with("dpis."));
        let report = check_params(&GradCheck::default(), &mut store, &samples, |g, s| {
            m.distances_with(g, s, &x, &[&y]).unwrap()[0]
        });
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = tiny();
        let back = Dpis::from_archive(&Archive::from_bytes(&m.to_archive().to_bytes()).unwrap()).unwrap();
        let (x, y) = (textured(32, 17), textured(32, 18));
        assert_eq!(m.score(&x, &y).unwrap(), back.score(&x, &y).unwrap());
    }
}
