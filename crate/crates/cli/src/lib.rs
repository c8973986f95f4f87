//! Command-line front end: training, scoring, comparison reports and the
//! synthetic fixture generator.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use iqa_core::archive::Archive;
use iqa_core::backbone::BackboneConfig;
use iqa_core::baselines::{ms_ssim, psnr, ChannelMode};
use iqa_core::data::{load_mos_manifest, load_triplet_manifest, ImageSet, MosSample, TripletSample};
use iqa_core::dpis::{Dpis, DpisConfig};
use iqa_core::evaluation::{
    eval_mos, run_comparison, score_pair, CompareOptions, DistanceMetric, EvalReport, MsSsimDistance, PsnrDistance,
};
use iqa_core::fixture::{generate, FixtureConfig, MOS_MANIFEST, TRIPLET_MANIFEST};
use iqa_core::head::MappingMode;
use iqa_core::image::{load_image, PatchSpec};
use iqa_core::metric::{load_learned, LearnedMetric};
use iqa_core::swiniqa::{SwinIqa, SwinIqaConfig};
use iqa_core::training::{checkpoint, load_judge, pretrain, train_joint, Silent, TrainConfig, TrainLog};

pub mod config;

/// Directory searched for pretrained archives given by bare file name.
pub const CACHE_ENV: &str = "IQA_CACHE_DIR";
pub const CHECKPOINT_FILE: &str = "checkpoint.iqaw";

#[derive(Parser, Debug)]
#[command(name = "iqa", version, about = "Train and evaluate full-reference image quality metrics")]
pub struct Cli {
    /// More log output; repeat for debug detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Regress distances onto mean opinion scores.
    Pretrain(PretrainArgs),
    /// Joint 2AFC and MOS training through the judgment network.
    Train(TrainArgs),
    /// Print the distance between two images.
    Score(ScoreArgs),
    /// 2AFC accuracy of several metrics on a triplet manifest.
    Compare(CompareArgs),
    /// SROCC and PLCC of several metrics against a MOS manifest.
    EvalMos(EvalMosArgs),
    /// Write the synthetic graded-distortion dataset.
    MakeFixture(FixtureArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LearnedKind {
    Swiniqa,
    Dpis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricKind {
    Psnr,
    Msssim,
    Swiniqa,
    Dpis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneChoice {
    SwinT,
    TinyTest,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Key/value file whose entries act as flags; explicit flags win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Metric built when no --init checkpoint is given.
    #[arg(long, value_enum, default_value = "swiniqa")]
    pub metric: LearnedKind,
    #[arg(long, value_enum, default_value = "swin-t")]
    pub backbone: BackboneChoice,
    /// Distance mapping mode, by number (1-4) or name.
    #[arg(long, default_value = "1")]
    pub mode: MappingMode,
    /// Archive of pretrained backbone weights; bare names are looked up in
    /// $IQA_CACHE_DIR.
    #[arg(long, value_name = "ARCHIVE")]
    pub pretrained: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long, value_name = "CHECKPOINT")]
    pub init: Option<PathBuf>,
    /// Keep SwinIQA backbone weights fixed.
    #[arg(long)]
    pub freeze_backbone: bool,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Threads for per-sample work; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Side of the square training crop.
    #[arg(long, default_value_t = 224)]
    pub crop: usize,
    /// Directory that relative manifest paths resolve against (default:
    /// the manifest's directory).
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct PretrainArgs {
    /// MOS manifest (one {"ref", "dist", "mos"} object per line).
    #[arg(long)]
    pub mos: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 48)]
    pub batch: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Triplet manifest (one {"ref", "dist_a", "dist_b", "h"} object per line).
    #[arg(long)]
    pub triplets: PathBuf,
    /// MOS manifest for the regression term; without it the loss is the
    /// judgment BCE alone.
    #[arg(long)]
    pub mos: Option<PathBuf>,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub judge_lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_reg: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_div: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Clone)]
pub struct PatchArgs {
    #[arg(long, default_value_t = 224)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 128)]
    pub patch_stride: usize,
    /// Score whole images instead of averaging over patches.
    #[arg(long)]
    pub whole: bool,
}

impl PatchArgs {
    fn spec(&self) -> Result<Option<PatchSpec>> {
        if self.whole {
            return Ok(None);
        }
        Ok(Some(PatchSpec::new(self.patch_size, self.patch_stride)?))
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ScoreArgs {
    /// Pristine reference image.
    pub reference: PathBuf,
    /// Distorted image of the same size.
    pub distorted: PathBuf,
    #[arg(long, value_enum, default_value = "swiniqa")]
    pub metric: MetricKind,
    /// Trained checkpoint; learned metrics without one use a seeded fresh
    /// initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "swin-t")]
    pub backbone: BackboneChoice,
    #[arg(long, default_value = "1")]
    pub mode: MappingMode,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// MS-SSIM on the mean of per-channel values instead of luminance.
    #[arg(long)]
    pub rgb_average: bool,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// `psnr`, `msssim`, or `swiniqa=CKPT` / `dpis=CKPT`; repeat for
    /// several rows, in order.
    #[arg(long = "metric", required = true, value_name = "NAME[=CHECKPOINT]")]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Drop records whose images are missing instead of failing.
    #[arg(long)]
    pub skip_missing: bool,
    #[arg(long)]
    pub rgb_average: bool,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct CompareArgs {
    #[arg(long)]
    pub triplets: PathBuf,
    /// Also write per-triplet distances and predictions as CSV.
    #[arg(long)]
    pub per_triplet: bool,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalMosArgs {
    #[arg(long)]
    pub mos: PathBuf,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub references: usize,
    #[arg(long, default_value_t = 500)]
    pub triplets: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub config: ConfigArg,
}

/// Parses `args` (program name first) after expanding any `--config` file.
pub fn parse_args(args: Vec<String>) -> Result<Cli> {
    let args = config::expand(args)?;
    Ok(Cli::try_parse_from(args)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::EvalMos(a) => cmd_eval_mos(&a),
        Command::MakeFixture(a) => cmd_make_fixture(&a),
    }
}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{flag}: file not found: {}", path.display());
    }
    Ok(())
}

/// Resolves a pretrained archive, falling back to `$IQA_CACHE_DIR/<path>`.
pub fn resolve_pretrained(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            let candidate = Path::new(&dir).join(path);
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    bail!("--pretrained: {} not found (also searched ${CACHE_ENV})", path.display())
}

fn swin_config(backbone: BackboneChoice, mode: MappingMode, seed: u64, pretrained: Option<PathBuf>) -> SwinIqaConfig {
    let mut c = match backbone {
        BackboneChoice::SwinT => SwinIqaConfig::swin_t(mode),
        BackboneChoice::TinyTest => SwinIqaConfig::tiny_test(mode),
    };
    c.seed = seed;
    c.backbone = BackboneConfig {
        pretrained_weights: pretrained,
        ..c.backbone
    };
    c
}

fn dpis_config(backbone: BackboneChoice, seed: u64, pretrained: Option<PathBuf>) -> DpisConfig {
    let mut c = match backbone {
        BackboneChoice::SwinT => DpisConfig::standard(),
        BackboneChoice::TinyTest => DpisConfig::tiny_test(),
    };
    c.seed = seed;
    c.pretrained_weights = pretrained;
    c
}

fn fresh_model(kind: LearnedKind, backbone: BackboneChoice, mode: MappingMode, seed: u64, pretrained: Option<&Path>) -> Result<Box<dyn LearnedMetric>> {
    let pretrained = pretrained.map(resolve_pretrained).transpose()?;
    Ok(match kind {
        LearnedKind::Swiniqa => Box::new(SwinIqa::new(swin_config(backbone, mode, seed, pretrained))?),
        LearnedKind::Dpis => Box::new(Dpis::new(dpis_config(backbone, seed, pretrained))?),
    })
}

fn load_checkpoint(path: &Path) -> Result<(Box<dyn LearnedMetric>, Archive)> {
    let archive = Archive::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = load_learned(&archive).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok((model, archive))
}

/// Fresh or checkpoint-initialized model for training, with any stored
/// judgment network restored.
fn training_model(m: &ModelArgs, seed: u64) -> Result<Box<dyn LearnedMetric>> {
    let mut model = match &m.init {
        Some(path) => {
            require_file("--init", path)?;
            let (mut model, archive) = load_checkpoint(path)?;
            load_judge(model.as_mut(), &archive, seed)?;
            model
        }
        None => fresh_model(m.metric, m.backbone, m.mode, seed, m.pretrained.as_deref())?,
    };
    if m.freeze_backbone {
        if model.kind() != iqa_core::swiniqa::KIND {
            bail!("--freeze-backbone applies to swiniqa only");
        }
        let archive = model.to_archive();
        let mut swin = SwinIqa::from_archive(&archive)?;
        swin.set_freeze_backbone(true);
        let mut boxed: Box<dyn LearnedMetric> = Box::new(swin);
        load_judge(boxed.as_mut(), &archive, seed)?;
        model = boxed;
    }
    Ok(model)
}

fn images_for<'a>(paths: impl IntoIterator<Item = &'a Path>, workers: usize) -> Result<ImageSet> {
    Ok(ImageSet::load(paths, workers)?)
}

/// Writes via a temporary sibling so a failed run leaves no partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_run(out: &Path, model: &dyn LearnedMetric, config: &TrainConfig, log: &TrainLog, log_name: &str) -> Result<()> {
    create_dir(out)?;
    write_atomic(&out.join(log_name), log.to_jsonl().as_bytes())?;
    write_atomic(&out.join(CHECKPOINT_FILE), &checkpoint(model, config).to_bytes())?;
    Ok(())
}

fn load_mos(path: &Path, root: Option<&Path>) -> Result<Vec<MosSample>> {
    require_file("--mos", path)?;
    Ok(load_mos_manifest(path, root)?)
}

fn load_triplets(path: &Path, root: Option<&Path>) -> Result<Vec<TripletSample>> {
    require_file("--triplets", path)?;
    Ok(load_triplet_manifest(path, root)?)
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mos = load_mos(&a.mos, a.run.root.as_deref())?;
    let config = TrainConfig {
        pretrain_lr: a.lr,
        pretrain_epochs: a.epochs,
        pretrain_batch: a.batch,
        crop: a.run.crop,
        seed: a.run.seed,
        workers: a.run.workers,
        ..TrainConfig::default()
    };
    config.validate()?;
    let images = images_for(mos.iter().flat_map(|m| m.paths()), a.run.workers)?;
    let mut model = training_model(&a.model, a.run.seed)?;
    let log = pretrain(model.as_mut(), &mos, &images, &config, &mut Silent)?;
    save_run(&a.run.out, model.as_ref(), &config, &log, "pretrain_log.jsonl")?;
    if let Some(last) = log.epochs.last() {
        println!("pretrain: {} epochs, final mean loss {:.6}", log.epochs.len(), last.mean_loss);
    }
    println!("wrote {}", a.run.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let root = a.run.root.as_deref();
    let triplets = load_triplets(&a.triplets, root)?;
    let mos = a.mos.as_deref().map(|p| load_mos(p, root)).transpose()?.unwrap_or_default();
    let config = TrainConfig {
        joint_lr: a.lr,
        judge_lr: a.judge_lr,
        joint_epochs: a.epochs,
        joint_batch: a.batch,
        lambda_reg: a.lambda_reg,
        eps_div: a.eps_div,
        crop: a.run.crop,
        seed: a.run.seed,
        workers: a.run.workers,
        ..TrainConfig::default()
    };
    config.validate()?;
    let paths = triplets.iter().flat_map(|t| t.paths()).chain(mos.iter().flat_map(|m| m.paths()));
    let images = images_for(paths, a.run.workers)?;
    let mut model = training_model(&a.model, a.run.seed)?;
    if mos.is_empty() {
        log::info!("no MOS manifest: training on the judgment loss alone");
    }
    let log = train_joint(model.as_mut(), &triplets, &mos, &images, &config, &mut Silent)?;
    save_run(&a.run.out, model.as_ref(), &config, &log, "train_log.jsonl")?;
    if let Some(last) = log.epochs.last() {
        println!("train: {} epochs, final mean loss {:.6}", log.epochs.len(), last.mean_loss);
    }
    println!("wrote {}", a.run.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Native score of a baseline: PSNR in dB or the MS-SSIM index.
struct Native {
    kind: MetricKind,
    mode: ChannelMode,
}

impl DistanceMetric for Native {
    fn name(&self) -> String {
        format!("{:?}", self.kind).to_lowercase()
    }

    fn distance(&self, r: &iqa_core::image::ImageTensor, d: &iqa_core::image::ImageTensor) -> iqa_core::Result<f64> {
        match self.kind {
            MetricKind::Psnr => psnr(r, d, 1.0),
            _ => ms_ssim(r, d, self.mode),
        }
    }
}

fn channel_mode(rgb_average: bool) -> ChannelMode {
    if rgb_average {
        ChannelMode::RgbAverage
    } else {
        ChannelMode::Luminance
    }
}

/// Prints `<metric>: <value>` with six decimals. Baselines report their
/// native value (PSNR in dB, MS-SSIM index); learned metrics their
/// distance.
pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    require_file("reference", &a.reference)?;
    require_file("distorted", &a.distorted)?;
    let spec = a.patch.spec()?;
    let metric: Box<dyn DistanceMetric> = match a.metric {
        MetricKind::Psnr | MetricKind::Msssim => Box::new(Native {
            kind: a.metric,
            mode: channel_mode(a.rgb_average),
        }),
        learned => {
            let model = match &a.checkpoint {
                Some(path) => {
                    require_file("--checkpoint", path)?;
                    let (model, _) = load_checkpoint(path)?;
                    let want = if learned == MetricKind::Swiniqa {
                        iqa_core::swiniqa::KIND
                    } else {
                        iqa_core::dpis::KIND
                    };
                    if model.kind() != want {
                        bail!("--checkpoint holds a `{}` model but --metric is `{want}`", model.kind());
                    }
                    model
                }
                None => {
                    let kind = if learned == MetricKind::Swiniqa {
                        LearnedKind::Swiniqa
                    } else {
                        LearnedKind::Dpis
                    };
                    fresh_model(kind, a.backbone, a.mode, a.seed, a.pretrained.as_deref())?
                }
            };
            Box::new(model)
        }
    };
    let r = load_image(&a.reference)?;
    let d = load_image(&a.distorted)?;
    let v = score_pair(metric.as_ref(), &r, &d, spec.as_ref())?;
    println!("{}: {v:.6}", metric.name());
    Ok(())
}

/// One `--metric` entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub checkpoint: Option<PathBuf>,
}

impl std::str::FromStr for MetricSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, ckpt) = match s.split_once('=') {
            Some((n, c)) => (n, Some(PathBuf::from(c))),
            None => (s, None),
        };
        let kind = MetricKind::from_str(name.trim(), true).map_err(|_| anyhow!("unknown metric `{name}`"))?;
        match (kind, &ckpt) {
            (MetricKind::Psnr | MetricKind::Msssim, Some(_)) => bail!("`{name}` takes no checkpoint"),
            (MetricKind::Swiniqa | MetricKind::Dpis, None) => bail!("`{name}` needs a checkpoint: --metric {name}=PATH"),
            _ => Ok(MetricSpec { kind, checkpoint: ckpt }),
        }
    }
}

/// Loads every metric, reporting all failures together.
pub fn load_metrics(entries: &[String], rgb_average: bool) -> Result<Vec<Box<dyn DistanceMetric>>> {
    let mut metrics: Vec<Box<dyn DistanceMetric>> = Vec::new();
    let mut errors = Vec::new();
    for e in entries {
        let spec = match e.parse::<MetricSpec>() {
            Ok(s) => s,
            Err(err) => {
                errors.push(format!("{e}: {err}"));
                continue;
            }
        };
        match spec.kind {
            MetricKind::Psnr => metrics.push(Box::new(PsnrDistance)),
            MetricKind::Msssim => metrics.push(Box::new(MsSsimDistance {
                mode: channel_mode(rgb_average),
            })),
            learned => {
                let path = spec.checkpoint.expect("checked by parser");
                match load_checkpoint(&path) {
                    Ok((m, _)) if m.kind() != format!("{learned:?}").to_lowercase() => {
                        errors.push(format!("{e}: checkpoint holds a `{}` model", m.kind()))
                    }
                    Ok((m, _)) => metrics.push(Box::new(m)),
                    Err(err) => errors.push(format!("{e}: {err:#}")),
                }
            }
        }
    }
    if !errors.is_empty() {
        bail!("could not load {} metric(s):\n  {}", errors.len(), errors.join("\n  "));
    }
    Ok(metrics)
}

fn write_report(out: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    create_dir(out)?;
    write_atomic(&out.join(format!("{stem}.jsonl")), report.to_jsonl().as_bytes())?;
    write_atomic(&out.join(format!("{stem}.txt")), report.to_table().as_bytes())?;
    Ok(())
}

fn compare_options(e: &EvalArgs) -> Result<CompareOptions> {
    Ok(CompareOptions {
        patch: e.patch.spec()?,
        workers: e.workers,
        skip_missing: e.skip_missing,
    })
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let triplets = load_triplets(&a.triplets, a.eval.root.as_deref())?;
    let options = compare_options(&a.eval)?;
    let metrics = load_metrics(&a.eval.metrics, a.eval.rgb_average)?;
    let refs: Vec<&dyn DistanceMetric> = metrics.iter().map(|m| m.as_ref()).collect();
    let cmp = run_comparison(&refs, &triplets, &options)?;
    let mut csv_bytes = None;
    if a.per_triplet {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &cmp.triplets {
            w.serialize(t)?;
        }
        csv_bytes = Some(w.into_inner().map_err(|e| anyhow!("csv: {e}"))?);
    }
    write_report(&a.eval.out, "compare", &cmp.report)?;
    if let Some(bytes) = csv_bytes {
        write_atomic(&a.eval.out.join("triplets.csv"), &bytes)?;
    }
    print!("{}", cmp.report.to_table());
    Ok(())
}

pub fn cmd_eval_mos(a: &EvalMosArgs) -> Result<()> {
    let mos = load_mos(&a.mos, a.eval.root.as_deref())?;
    let options = compare_options(&a.eval)?;
    let metrics = load_metrics(&a.eval.metrics, a.eval.rgb_average)?;
    let refs: Vec<&dyn DistanceMetric> = metrics.iter().map(|m| m.as_ref()).collect();
    let report = eval_mos(&refs, &mos, &options)?;
    write_report(&a.eval.out, "eval_mos", &report)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_make_fixture(a: &FixtureArgs) -> Result<()> {
    let config = FixtureConfig {
        references: a.references,
        triplets: a.triplets,
        size: a.size,
        seed: a.seed,
    };
    let fx = generate(&config, &a.out)?;
    fx.write()?;
    println!(
        "wrote {} triplets to {} and {} MOS records to {}",
        fx.triplets.len(),
        a.out.join(TRIPLET_MANIFEST).display(),
        fx.mos.len(),
        a.out.join(MOS_MANIFEST).display()
    );
    Ok(())
}
