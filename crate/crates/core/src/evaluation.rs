//! 2AFC prediction and accuracy, rank and linear correlation, and
//! patch-averaged comparison reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{ms_ssim, psnr, ChannelMode};
use crate::data::{ImageSet, MosSample, TripletSample};
use crate::dpis::Dpis;
use crate::error::{Error, Result};
use crate::head::MappingMode;
use crate::image::{patch_grid, ImageTensor, PatchSpec};
use crate::metric::LearnedMetric;
use crate::parallel::map_indexed;
use crate::swiniqa::SwinIqa;

/// `0` when the first distorted image is at least as close as the second,
/// `1` otherwise.
pub fn predict_judgment(d1: f64, d2: f64) -> Result<u8> {
    if d1.is_nan() || d2.is_nan() {
        return Err(Error::Numeric {
            block: "judgment prediction".into(),
        });
    }
    Ok(if d1 <= d2 { 0 } else { 1 })
}

/// Binarizes a vote fraction; an even split has no label.
pub fn binarize(h: f64) -> Option<u8> {
    if h > 0.5 {
        Some(1)
    } else if h < 0.5 {
        Some(0)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    /// Records entering the denominator.
    pub counted: usize,
    /// Records dropped because `h = 0.5`.
    pub excluded: usize,
}

pub fn accuracy(predictions: &[u8], labels: &[f64]) -> Result<Accuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut hits, mut counted) = (0usize, 0usize);
    for (&p, &h) in predictions.iter().zip(labels) {
        if let Some(label) = binarize(h) {
            counted += 1;
            hits += usize::from(p == label);
        }
    }
    if counted == 0 {
        return Err(Error::Evaluation("no records left after excluding h = 0.5".into()));
    }
    Ok(Accuracy {
        accuracy: hits as f64 / counted as f64,
        counted,
        excluded: labels.len() - counted,
    })
}

/// 1-based ranks, ties sharing the mean of the positions they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_series(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Evaluation(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Evaluation(format!("need at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite value in series".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Evaluation("correlation undefined for a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation with average ranks for ties.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

/// Anything that maps a reference/distorted pair to a distance, lower
/// meaning closer.
pub trait DistanceMetric: Send + Sync {
    fn name(&self) -> String;

    fn distance(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64>;
}

/// Negated PSNR on a unit peak, so identical images give `−∞`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PsnrDistance;

impl DistanceMetric for PsnrDistance {
    fn name(&self) -> String {
        "psnr".into()
    }

    fn distance(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64> {
        Ok(-psnr(reference, dist, 1.0)?)
    }
}

/// `1 − MS-SSIM`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MsSsimDistance {
    pub mode: ChannelMode,
}

impl DistanceMetric for MsSsimDistance {
    fn name(&self) -> String {
        "msssim".into()
    }

    fn distance(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64> {
        Ok(1.0 - ms_ssim(reference, dist, self.mode)?)
    }
}

impl DistanceMetric for SwinIqa {
    fn name(&self) -> String {
        self.kind().into()
    }

    fn distance(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64> {
        self.score(reference, dist)
    }
}

impl DistanceMetric for Dpis {
    fn name(&self) -> String {
        self.kind().into()
    }

    fn distance(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64> {
        self.score(reference, dist)
    }
}

impl DistanceMetric for Box<dyn LearnedMetric> {
    fn name(&self) -> String {
        self.kind().into()
    }

    fn distance(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64> {
        self.score(reference, dist)
    }
}

/// A metric under a caller-chosen report label.
pub struct Named<M> {
    pub name: String,
    pub metric: M,
}

impl<M: DistanceMetric> DistanceMetric for Named<M> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn distance(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64> {
        self.metric.distance(reference, dist)
    }
}

/// Mean distance over aligned grid patches of `reference` and `dist`.
pub fn patch_average_score(
    metric: &dyn DistanceMetric,
    reference: &ImageTensor,
    dist: &ImageTensor,
    spec: &PatchSpec,
) -> Result<f64> {
    if (reference.height(), reference.width()) != (dist.height(), dist.width()) {
        return Err(Error::Shape(format!(
            "reference is {}x{} but distorted image is {}x{}",
            reference.height(),
            reference.width(),
            dist.height(),
            dist.width()
        )));
    }
    let rp = patch_grid(reference, spec)?;
    let dp = patch_grid(dist, spec)?;
    let mut sum = 0.0;
    for (r, d) in rp.iter().zip(&dp) {
        sum += metric.distance(r, d)?;
    }
    Ok(sum / rp.len() as f64)
}

/// Whole-image distance when `patch` is `None`, otherwise patch-averaged.
pub fn score_pair(metric: &dyn DistanceMetric, reference: &ImageTensor, dist: &ImageTensor, patch: Option<&PatchSpec>) -> Result<f64> {
    match patch {
        Some(spec) => patch_average_score(metric, reference, dist, spec),
        None => metric.distance(reference, dist),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub patch: Option<PatchSpec>,
    pub workers: usize,
    /// Drop records whose images are missing instead of failing.
    pub skip_missing: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            patch: None,
            workers: 1,
            skip_missing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub accuracy: Option<f64>,
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    /// Records scored.
    pub samples: usize,
    /// Records in the accuracy denominator.
    pub counted: usize,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub patch: Option<PatchSpec>,
    pub records: usize,
    pub skipped: usize,
    pub excluded_ties: usize,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletResult {
    pub metric: String,
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    pub dist_a: PathBuf,
    pub dist_b: PathBuf,
    pub d1: f64,
    pub d2: f64,
    pub prediction: u8,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub report: EvalReport,
    pub triplets: Vec<TripletResult>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            writeln!(s, "{}", serde_json::to_string(r).expect("rows serialize")).unwrap();
        }
        s
    }

    /// Aligned text table with one row per metric, followed by notes.
    pub fn to_table(&self) -> String {
        let header = ["metric", "2afc_acc", "srocc", "plcc", "n"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.metric.clone(),
                    fmt_opt(r.accuracy),
                    fmt_opt(r.srocc),
                    fmt_opt(r.plcc),
                    r.samples.to_string(),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &body {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(width)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(s, "{}", parts.join("  ").trim_end()).unwrap();
        };
        line(&mut s, &header.map(String::from));
        for row in &body {
            line(&mut s, row);
        }
        for n in self.notes.iter().chain(self.rows.iter().flat_map(|r| r.notes.iter())) {
            writeln!(s, "note: {n}").unwrap();
        }
        s
    }
}

fn present<'a, T>(items: &'a [T], paths: impl Fn(&'a T) -> Vec<&'a Path>, skip_missing: bool) -> Result<Vec<&'a T>> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match paths(item).into_iter().find(|p| !p.exists()) {
            None => out.push(item),
            Some(p) if skip_missing => log::warn!("skipping record: {} is missing", p.display()),
            Some(p) => {
                return Err(Error::Data {
                    record: p.display().to_string(),
                    reason: "image file not found".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Scores every triplet with every metric and tabulates 2AFC accuracy.
/// Rows follow the order of `metrics`; triplet results follow manifest
/// order.
pub fn run_comparison(metrics: &[&dyn DistanceMetric], triplets: &[TripletSample], options: &CompareOptions) -> Result<Comparison> {
    if let Some(p) = &options.patch {
        p.validate()?;
    }
    let kept = present(triplets, |t| t.paths().to_vec(), options.skip_missing)?;
    let images = ImageSet::load(kept.iter().flat_map(|t| t.paths()), options.workers)?;
    compare_loaded(metrics, &kept, &images, options, triplets.len() - kept.len())
}

/// [`run_comparison`] over images already in memory.
pub fn compare_loaded(
    metrics: &[&dyn DistanceMetric],
    triplets: &[&TripletSample],
    images: &ImageSet,
    options: &CompareOptions,
    skipped: usize,
) -> Result<Comparison> {
    let labels: Vec<f64> = triplets.iter().map(|t| t.h).collect();
    let ties = labels.iter().filter(|&&h| binarize(h).is_none()).count();
    let mut rows = Vec::with_capacity(metrics.len());
    let mut results = Vec::new();
    for metric in metrics {
        let name = metric.name();
        let dists = map_indexed(triplets.len(), options.workers, |i| {
            let t = triplets[i];
            let r = images.get(&t.ref_path)?;
            let d1 = score_pair(*metric, r, images.get(&t.dist_a)?, options.patch.as_ref())?;
            let d2 = score_pair(*metric, r, images.get(&t.dist_b)?, options.patch.as_ref())?;
            Ok::<_, Error>((d1, d2, predict_judgment(d1, d2)?))
        })?;
        let preds: Vec<u8> = dists.iter().map(|d| d.2).collect();
        let acc = accuracy(&preds, &labels)?;
        rows.push(ReportRow {
            metric: name.clone(),
            accuracy: Some(acc.accuracy),
            srocc: None,
            plcc: None,
            samples: triplets.len(),
            counted: acc.counted,
            notes: Vec::new(),
        });
        for (t, (d1, d2, p)) in triplets.iter().zip(dists) {
            results.push(TripletResult {
                metric: name.clone(),
                reference: t.ref_path.clone(),
                dist_a: t.dist_a.clone(),
                dist_b: t.dist_b.clone(),
                d1,
                d2,
                prediction: p,
                h: t.h,
            });
        }
    }
    let mut notes = Vec::new();
    if ties > 0 {
        notes.push(format!("{ties} triplets with h = 0.5 excluded from accuracy"));
    }
    if skipped > 0 {
        notes.push(format!("{skipped} triplets skipped for missing images"));
    }
    Ok(Comparison {
        report: EvalReport {
            rows,
            patch: options.patch,
            records: triplets.len(),
            skipped,
            excluded_ties: ties,
            notes,
        },
        triplets: results,
    })
}

fn correlation_row(name: String, scores: &[f64], targets: &[f64]) -> ReportRow {
    let mut notes = Vec::new();
    let mut flag = |what: &str, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{name}: {what} undefined ({e})"));
            None
        }
    };
    let srocc = flag("srocc", srocc(scores, targets));
    let plcc = flag("plcc", plcc(scores, targets));
    ReportRow {
        metric: name,
        accuracy: None,
        srocc,
        plcc,
        samples: scores.len(),
        counted: scores.len(),
        notes,
    }
}

/// SROCC and PLCC between each metric's distances and the targets
/// `s = 1 − mos/5`; both grow with degradation, so a good metric
/// correlates positively.
pub fn eval_mos(metrics: &[&dyn DistanceMetric], samples: &[MosSample], options: &CompareOptions) -> Result<EvalReport> {
    if let Some(p) = &options.patch {
        p.validate()?;
    }
    let kept = present(samples, |m| m.paths().to_vec(), options.skip_missing)?;
    let images = ImageSet::load(kept.iter().flat_map(|m| m.paths()), options.workers)?;
    eval_mos_loaded(metrics, &kept, &images, options, samples.len() - kept.len())
}

/// [`eval_mos`] over images already in memory.
pub fn eval_mos_loaded(
    metrics: &[&dyn DistanceMetric],
    samples: &[&MosSample],
    images: &ImageSet,
    options: &CompareOptions,
    skipped: usize,
) -> Result<EvalReport> {
    let targets: Vec<f64> = samples.iter().map(|m| m.s).collect();
    let mut rows = Vec::new();
    for metric in metrics {
        let scores = map_indexed(samples.len(), options.workers, |i| {
            let m = samples[i];
            score_pair(*metric, images.get(&m.ref_path)?, images.get(&m.dist_path)?, options.patch.as_ref())
        })?;
        rows.push(correlation_row(metric.name(), &scores, &targets));
    }
    Ok(EvalReport {
        rows,
        patch: options.patch,
        records: samples.len(),
        skipped,
        excluded_ties: 0,
        notes: if skipped > 0 {
            vec![format!("{skipped} samples skipped for missing images")]
        } else {
            Vec::new()
        },
    })
}

/// One row per mapping mode with SROCC and PLCC columns.
pub fn format_mode_grid(rows: &[(MappingMode, Option<f64>, Option<f64>)]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<28}  {:>7}  {:>7}", "mapping", "srocc", "plcc").unwrap();
    for (mode, sr, pl) in rows {
        writeln!(s, "{:<28}  {:>7}  {:>7}", mode.to_string(), fmt_opt(*sr), fmt_opt(*pl)).unwrap();
    }
    s
}
