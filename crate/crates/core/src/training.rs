//! MOS pretraining and joint 2AFC + regression training.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Graph, Var};
use crate::data::{ImageSet, MosSample, TripletSample};
use crate::error::{Error, Result};
use crate::image::{crop_offset, ImageTensor};
use crate::metric::{FrozenFilter, LearnedMetric};
use crate::parallel::map_indexed;
use crate::params::{kaiming_uniform, xavier_uniform, ParamId, ParamStore};

/// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub joint_lr: f64,
    pub judge_lr: f64,
    pub joint_epochs: usize,
    pub joint_batch: usize,
    pub crop: usize,
    pub seed: u64,
    /// Guard added to denominators of the judgment features.
    pub eps_div: f64,
    pub workers: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_reg: 5.0,
            pretrain_lr: 1e-4,
            pretrain_epochs: 50,
            pretrain_batch: 48,
            joint_lr: 5e-5,
            judge_lr: 5e-5,
            joint_epochs: 10,
            joint_batch: 16,
            crop: 224,
            seed: 0,
            eps_div: 1e-6,
            workers: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.pretrain_lr, self.joint_lr, self.judge_lr];
        if lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("learning rates must be positive, got {lrs:?}")));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("lambda_reg must be ≥ 0, got {}", self.lambda_reg)));
        }
        if self.pretrain_batch == 0 || self.joint_batch == 0 || self.crop == 0 {
            return Err(Error::Config("batch sizes and crop must be ≥ 1".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps_div >= 0.0) {
            return Err(Error::Config("eps_div must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Squared error between a predicted distance and its target.
pub fn reg_loss(d: f64, s: f64) -> f64 {
    (d - s) * (d - s)
}

/// `[d1, d2, d1 − d2, d1/(d2 + ε), d2/(d1 + ε)]`.
pub fn judgment_features(d1: f64, d2: f64, eps: f64) -> [f64; 5] {
    [d1, d2, d1 - d2, d1 / (d2 + eps), d2 / (d1 + eps)]
}

/// Binary cross-entropy with the prediction clamped away from 0 and 1.
pub fn bce_loss(h_hat: f64, h: f64) -> f64 {
    let p = h_hat.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -h * p.ln() - (1.0 - h) * (1.0 - p).ln()
}

pub fn total_loss(bce: f64, reg: f64, lambda_reg: f64) -> f64 {
    bce + lambda_reg * reg
}

/// Judgment features on a graph: `[1, 5]` from two `[1]` distances.
pub fn judgment_features_on(g: &mut Graph, d1: Var, d2: Var, eps: f64) -> Var {
    let diff = g.sub(d1, d2);
    let d2e = g.add_scalar(d2, eps);
    let d1e = g.add_scalar(d1, eps);
    let r12 = g.div(d1, d2e);
    let r21 = g.div(d2, d1e);
    let f = g.concat_last(&[d1, d2, diff, r12, r21]);
    g.reshape(f, &[1, 5])
}

/// `−h·ln p − (1 − h)·ln(1 − p)` on a graph with `p` clamped.
pub fn bce_on(g: &mut Graph, h_hat: Var, h: f64) -> Var {
    let p = g.clamp(h_hat, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let lp = g.ln(p);
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let lq = g.ln(q);
    let a = g.scale(lp, -h);
    let b = g.scale(lq, -(1.0 - h));
    g.add(a, b)
}

/// The 5 → 32 → 32 → 1 network turning a distance pair into the
/// probability that the second distorted image is closer.
#[derive(Clone, Debug)]
pub struct JudgmentNet {
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub fc3: (ParamId, ParamId),
}

pub const JUDGE_PREFIX: &str = "judge.";

impl JudgmentNet {
    /// Reuses `judge.*` parameters already in `store`, or registers fresh
    /// ones.
    pub fn attach(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let layer = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, last: bool| {
            let wn = format!("{JUDGE_PREFIX}{name}.weight");
            let bn = format!("{JUDGE_PREFIX}{name}.bias");
            if let (Some(w), Some(b)) = (store.id(&wn), store.id(&bn)) {
                return (w, b);
            }
            let w = if last {
                xavier_uniform(rng, out, inp)
            } else {
                kaiming_uniform(rng, out * inp, inp)
            };
            (store.insert(wn, &[out, inp], w), store.insert(bn, &[out], vec![0.0; out]))
        };
        JudgmentNet {
            fc1: layer(store, rng, "fc1", 32, 5, false),
            fc2: layer(store, rng, "fc2", 32, 32, false),
            fc3: layer(store, rng, "fc3", 1, 32, true),
        }
    }

    /// `sigmoid(FC3(ReLU(FC2(ReLU(FC1(x))))))` for `x` of shape `[1, 5]`.
    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut y = x;
        for (i, &(w, b)) in [self.fc1, self.fc2, self.fc3].iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            y = g.linear(y, w, Some(b));
            y = if i < 2 { g.relu(y) } else { g.sigmoid(y) };
        }
        g.reshape(y, &[1])
    }

    pub fn forward_on(&self, g: &mut Graph, store: &ParamStore, d1: Var, d2: Var, eps: f64) -> Var {
        let f = judgment_features_on(g, d1, d2, eps);
        self.forward_features(g, store, f)
    }

    pub fn forward(&self, store: &ParamStore, features: [f64; 5]) -> f64 {
        let mut g = Graph::inference();
        let x = g.constant(features.to_vec(), &[1, 5]);
        let y = self.forward_features(&mut g, store, x);
        g.scalar(y)
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    t: i32,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

pub type GradMap = BTreeMap<ParamId, Vec<f64>>;

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update; `lr` gives the step size per parameter name.
    /// Values are rounded to single precision afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr: impl Fn(&str) -> f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (&id, g) in grads {
            let rate = lr(&store.get(id).name);
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let p = store.values_mut(id);
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p[j] = (p[j] - update) as f32 as f64;
            }
        }
    }
}

fn accumulate(into: &mut GradMap, grads: Vec<(ParamId, Vec<f64>)>) {
    for (id, g) in grads {
        match into.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                into.insert(id, g);
            }
        }
    }
}

fn param_grads(g: &Graph, loss: Var) -> Vec<(ParamId, Vec<f64>)> {
    g.backward(loss)
        .params()
        .into_iter()
        .map(|(id, v)| (id, v.to_vec()))
        .collect()
}

/// Training stage of a log entry or step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub bce: Option<f64>,
    pub reg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_bce: Option<f64>,
    pub mean_reg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{}", serde_json::to_string(e).expect("log serializes")).unwrap();
        }
        s
    }
}

/// Hooks into the training loop, for logging and instrumentation.
pub trait TrainObserver {
    /// Crop offsets of reference, A and B for a triplet.
    fn on_triplet_crop(&mut self, _index: usize, _offsets: [(usize, usize); 3]) {}
    fn on_mos_crop(&mut self, _index: usize, _offsets: [(usize, usize); 2]) {}
    fn on_step(&mut self, _stage: Stage, _step: usize, _loss: &StepLoss) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Reflect-pads to at least `size` and crops a `size × size` window.
pub fn crop_at(img: &ImageTensor, (y, x): (usize, usize), size: usize) -> ImageTensor {
    img.reflect_pad_to(size, size).crop(y, x, size, size)
}

fn padded_dims(img: &ImageTensor, size: usize) -> (usize, usize) {
    (img.height().max(size), img.width().max(size))
}

/// Central crop offset of an image padded to at least `size`.
pub fn center_offset(img: &ImageTensor, size: usize) -> (usize, usize) {
    let (h, w) = padded_dims(img, size);
    ((h - size) / 2, (w - size) / 2)
}

fn same_dims(imgs: &[&ImageTensor], record: &str) -> Result<()> {
    let d = (imgs[0].height(), imgs[0].width());
    if imgs.iter().any(|i| (i.height(), i.width()) != d) {
        return Err(Error::Data {
            record: record.into(),
            reason: "images of one sample differ in size".into(),
        });
    }
    Ok(())
}

struct MosJob<'a> {
    reference: &'a ImageTensor,
    dist: &'a ImageTensor,
    offset: (usize, usize),
    s: f64,
}

struct TripletJob<'a> {
    reference: &'a ImageTensor,
    a: &'a ImageTensor,
    b: &'a ImageTensor,
    offset: (usize, usize),
    h: f64,
}

/// Per-sample gradients in parameter order.
type ParamGrads = Vec<(ParamId, Vec<f64>)>;

fn mos_grad(
    model: &dyn LearnedMetric,
    frozen: &FrozenFilter,
    job: &MosJob,
    crop: usize,
    weight: f64,
) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new().with_frozen(frozen.clone());
    let r = crop_at(job.reference, job.offset, crop);
    let d = crop_at(job.dist, job.offset, crop);
    let dv = model.distances_on(&mut g, &r, &[&d])?[0];
    let diff = g.add_scalar(dv, -job.s);
    let sq = g.square(diff);
    let loss = g.scale(sq, weight);
    Ok((g.scalar(sq), param_grads(&g, loss)))
}

#[allow(clippy::too_many_arguments)]
fn triplet_grad(
    model: &dyn LearnedMetric,
    judge: &JudgmentNet,
    frozen: &FrozenFilter,
    job: &TripletJob,
    crop: usize,
    eps: f64,
    weight: f64,
) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new().with_frozen(frozen.clone());
    let r = crop_at(job.reference, job.offset, crop);
    let a = crop_at(job.a, job.offset, crop);
    let b = crop_at(job.b, job.offset, crop);
    let d = model.distances_on(&mut g, &r, &[&a, &b])?;
    let h_hat = judge.forward_on(&mut g, model.store(), d[0], d[1], eps);
    let bce = bce_on(&mut g, h_hat, job.h);
    if !g.scalar(bce).is_finite() {
        return Err(Error::Numeric {
            block: "judgment loss".into(),
        });
    }
    let loss = g.scale(bce, weight);
    Ok((g.scalar(bce), param_grads(&g, loss)))
}

fn mos_jobs<'a>(
    samples: &[&'a MosSample],
    images: &'a ImageSet,
    crop: usize,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn TrainObserver,
    indices: &[usize],
) -> Result<Vec<MosJob<'a>>> {
    samples
        .iter()
        .zip(indices)
        .map(|(s, &i)| {
            let reference = images.get(&s.ref_path)?.as_ref();
            let dist = images.get(&s.dist_path)?.as_ref();
            same_dims(&[reference, dist], &s.dist_path.display().to_string())?;
            let (h, w) = padded_dims(reference, crop);
            let offset = crop_offset(rng, h, w, crop);
            observer.on_mos_crop(i, [offset; 2]);
            Ok(MosJob {
                reference,
                dist,
                offset,
                s: s.s,
            })
        })
        .collect()
}

/// Minimizes the mean squared error between distances and `s = 1 − mos/5`.
pub fn pretrain(
    model: &mut dyn LearnedMetric,
    samples: &[MosSample],
    images: &ImageSet,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("MOS dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam);
    let frozen = model.frozen();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=config.pretrain_epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for batch in order.chunks(config.pretrain_batch) {
            let chosen: Vec<&MosSample> = batch.iter().map(|&i| &samples[i]).collect();
            let jobs = mos_jobs(&chosen, images, config.crop, &mut rng, observer, batch)?;
            let weight = 1.0 / jobs.len() as f64;
            let m: &dyn LearnedMetric = &*model;
            let results = map_indexed(jobs.len(), config.workers, |i| mos_grad(m, &frozen, &jobs[i], config.crop, weight))?;
            let mut grads = GradMap::new();
            let mut reg = 0.0;
            for (loss, g) in results {
                reg += loss;
                accumulate(&mut grads, g);
            }
            adam.step(model.store_mut(), &grads, |_| config.pretrain_lr);
            model.project();
            sum += reg;
            steps += 1;
            step += 1;
            let reg = reg * weight;
            observer.on_step(
                Stage::Pretrain,
                step,
                &StepLoss {
                    total: reg,
                    bce: None,
                    reg: Some(reg),
                },
            );
        }
        let mean = sum / samples.len() as f64;
        log::info!("pretrain epoch {epoch}: mean regression loss {mean:.6}");
        log.epochs.push(EpochLog {
            stage: Stage::Pretrain,
            epoch,
            steps,
            mean_loss: mean,
            mean_bce: None,
            mean_reg: Some(mean),
        });
    }
    Ok(log)
}

/// Jointly minimizes `BCE + λ·MSE`, interleaving one triplet batch with one
/// MOS batch per step. With an empty MOS set or `λ = 0` the step loss is the
/// BCE alone. Registers (or reuses) the judgment network inside the model's
/// parameter store.
pub fn train_joint(
    model: &mut dyn LearnedMetric,
    triplets: &[TripletSample],
    mos: &[MosSample],
    images: &ImageSet,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::Config("triplet dataset is empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x006a_7564_6765);
    let judge = JudgmentNet::attach(model.store_mut(), &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam);
    let frozen = model.frozen();
    let use_mos = !mos.is_empty() && config.lambda_reg > 0.0;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=config.joint_epochs {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.shuffle(&mut rng);
        let mut mos_order: Vec<usize> = (0..mos.len()).collect();
        mos_order.shuffle(&mut rng);
        let mut mos_cursor = 0;
        let (mut bce_sum, mut reg_sum, mut total_sum, mut steps) = (0.0, 0.0, 0.0, 0);
        for batch in order.chunks(config.joint_batch) {
            let mut jobs = Vec::with_capacity(batch.len());
            for &i in batch {
                let t = &triplets[i];
                let reference = images.get(&t.ref_path)?.as_ref();
                let a = images.get(&t.dist_a)?.as_ref();
                let b = images.get(&t.dist_b)?.as_ref();
                same_dims(&[reference, a, b], &t.ref_path.display().to_string())?;
                let (h, w) = padded_dims(reference, config.crop);
                let offset = crop_offset(&mut rng, h, w, config.crop);
                observer.on_triplet_crop(i, [offset; 3]);
                jobs.push(TripletJob {
                    reference,
                    a,
                    b,
                    offset,
                    h: t.h,
                });
            }
            let mos_batch: Vec<usize> = if use_mos {
                (0..config.joint_batch)
                    .map(|k| mos_order[(mos_cursor + k) % mos.len()])
                    .collect()
            } else {
                Vec::new()
            };
            mos_cursor += mos_batch.len();
            let chosen: Vec<&MosSample> = mos_batch.iter().map(|&i| &mos[i]).collect();
            let mjobs = mos_jobs(&chosen, images, config.crop, &mut rng, observer, &mos_batch)?;

            let m: &dyn LearnedMetric = &*model;
            let tw = 1.0 / jobs.len() as f64;
            let tres = map_indexed(jobs.len(), config.workers, |i| {
                triplet_grad(m, &judge, &frozen, &jobs[i], config.crop, config.eps_div, tw)
            })?;
            let mw = if mjobs.is_empty() {
                0.0
            } else {
                config.lambda_reg / mjobs.len() as f64
            };
            let mres = map_indexed(mjobs.len(), config.workers, |i| mos_grad(m, &frozen, &mjobs[i], config.crop, mw))?;

            let mut grads = GradMap::new();
            let mut bce = 0.0;
            for (l, g) in tres {
                bce += l;
                accumulate(&mut grads, g);
            }
            let mut reg = 0.0;
            for (l, g) in mres {
                reg += l;
                accumulate(&mut grads, g);
            }
            let bce = bce * tw;
            let reg = if mjobs.is_empty() { None } else { Some(reg / mjobs.len() as f64) };
            let total = match reg {
                Some(r) => total_loss(bce, r, config.lambda_reg),
                None => bce,
            };
            adam.step(model.store_mut(), &grads, |name| {
                if name.starts_with(JUDGE_PREFIX) {
                    config.judge_lr
                } else {
                    config.joint_lr
                }
            });
            model.project();
            step += 1;
            steps += 1;
            bce_sum += bce;
            reg_sum += reg.unwrap_or(0.0);
            total_sum += total;
            observer.on_step(Stage::Joint, step, &StepLoss { total, bce: Some(bce), reg });
        }
        let n = steps as f64;
        log::info!("joint epoch {epoch}: mean loss {:.6}", total_sum / n);
        log.epochs.push(EpochLog {
            stage: Stage::Joint,
            epoch,
            steps,
            mean_loss: total_sum / n,
            mean_bce: Some(bce_sum / n),
            mean_reg: use_mos.then_some(reg_sum / n),
        });
    }
    Ok(log)
}

/// Mean squared regression error over centre crops.
pub fn mean_reg_loss(model: &dyn LearnedMetric, samples: &[MosSample], images: &ImageSet, crop: usize, workers: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("MOS dataset is empty".into()));
    }
    let losses = map_indexed(samples.len(), workers, |i| {
        let s = &samples[i];
        let r = images.get(&s.ref_path)?;
        let d = images.get(&s.dist_path)?;
        let off = center_offset(r, crop);
        let score = model.score(&crop_at(r, off, crop), &crop_at(d, off, crop))?;
        Ok::<_, Error>(reg_loss(score, s.s))
    })?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Model checkpoint with the training configuration echoed in its metadata.
pub fn checkpoint(model: &dyn LearnedMetric, config: &TrainConfig) -> Archive {
    let mut a = model.to_archive();
    if let serde_json::Value::Object(m) = &mut a.meta {
        m.insert("train".into(), serde_json::to_value(config).expect("config serializes"));
    }
    a
}

/// Restores `judge.*` parameters from a checkpoint into a model's store.
pub fn load_judge(model: &mut dyn LearnedMetric, archive: &Archive, seed: u64) -> Result<Option<JudgmentNet>> {
    if !archive.tensors.contains_key("judge.fc1.weight") {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let judge = JudgmentNet::attach(model.store_mut(), &mut rng);
    model.store_mut().load_from(archive, JUDGE_PREFIX, JUDGE_PREFIX)?;
    Ok(Some(judge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, GradCheck};
    use proptest::prelude::*;

    #[test]
    fn loss_closed_forms() {
        assert_eq!(reg_loss(0.4, 0.4), 0.0);
        assert!((reg_loss(0.8, 0.3) - 0.25).abs() < 1e-15);
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-12, 1.0) < 1e-6);
        assert!(bce_loss(0.0, 1.0).is_finite());
        assert_eq!(total_loss(0.7, 0.04, 0.0), 0.7);
        assert!((total_loss(0.7, 0.04, 5.0) - 0.9).abs() < 1e-12);
        assert_eq!(TrainConfig::default().lambda_reg, 5.0);
    }

    #[test]
    fn judgment_feature_cases() {
        assert_eq!(judgment_features(2.0, 1.0, 0.0), [2.0, 1.0, 1.0, 2.0, 0.5]);
        let f = judgment_features(0.3, 0.3, 1e-6);
        assert_eq!(f[2], 0.0);
        assert!((f[3] - 1.0).abs() < 1e-5 && (f[4] - 1.0).abs() < 1e-5);
        let f = judgment_features(0.5, 0.0, 1e-6);
        assert!((f[3] - 0.5 / 1e-6).abs() < 1e-6 && f[3].is_finite());
    }

    #[test]
    fn graph_features_match_plain() {
        let mut g = Graph::inference();
        let a = g.constant(vec![0.7], &[1]);
        let b = g.constant(vec![0.2], &[1]);
        let f = judgment_features_on(&mut g, a, b, 1e-6);
        assert_eq!(g.value(f), judgment_features(0.7, 0.2, 1e-6));
    }

    fn judge() -> (JudgmentNet, ParamStore) {
        let mut store = ParamStore::new();
        let net = JudgmentNet::attach(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (net, store)
    }

    #[test]
    fn judgment_zero_final_layer_is_one_half() {
        let (net, mut store) = judge();
        store.set(net.fc3.0, vec![0.0; 32]);
        store.set(net.fc3.1, vec![0.0]);
        assert_eq!(net.forward(&store, judgment_features(0.4, 0.1, 1e-6)), 0.5);
        assert_eq!(store.num_scalars(JUDGE_PREFIX), 32 * 5 + 32 + 32 * 32 + 32 + 32 + 1);
        let again = JudgmentNet::attach(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(again.fc1, net.fc1);
    }

    #[test]
    fn judgment_gradients_on_every_parameter() {
        let (net, mut store) = judge();
        let all: Vec<(ParamId, usize)> = store
            .iter()
            .flat_map(|(id, p)| (0..p.value.len()).map(move |j| (id, j)))
            .collect();
        let check = GradCheck {
            rel_tol: 1e-4,
            ..GradCheck::default()
        };
        let report = check_params(&check, &mut store, &all, |g, s| {
            let x = g.constant(judgment_features(0.6, 0.35, 1e-6).to_vec(), &[1, 5]);
            let p = net.forward_features(g, s, x);
            bce_on(g, p, 0.8)
        });
        assert_eq!(report.len(), 1281);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", &[2], vec![1.0, -1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let grads: GradMap = [(id, vec![0.5, -2.0])].into_iter().collect();
        adam.step(&mut store, &grads, |_| 0.01);
        let v = store.values(id);
        assert!((v[0] - 0.99).abs() < 1e-6 && (v[1] + 0.99).abs() < 1e-6);
        assert!(v.iter().all(|&x| x == x as f32 as f64));
    }

    proptest! {
        #[test]
        fn total_loss_is_linear(bce in 0.0f64..10.0, reg in 0.0f64..1.0, lambda in 0.0f64..20.0) {
            prop_assert_eq!(total_loss(bce, reg, lambda), bce + lambda * reg);
        }

        #[test]
        fn bce_is_minimized_at_the_label(h_hat in 0.0f64..=1.0, label in prop::bool::ANY) {
            let h = if label { 1.0 } else { 0.0 };
            prop_assert!(bce_loss(h_hat, h) >= bce_loss(h, h));
        }

        #[test]
        fn graph_bce_matches_plain(h_hat in 0.0f64..=1.0, h in 0.0f64..=1.0) {
            let mut g = Graph::inference();
            let p = g.constant(vec![h_hat], &[1]);
            let l = bce_on(&mut g, p, h);
            prop_assert!((g.scalar(l) - bce_loss(h_hat, h)).abs() <= 1e-12 * bce_loss(h_hat, h).max(1.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            joint_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda_reg: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
