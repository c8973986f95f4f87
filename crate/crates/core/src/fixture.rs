//! Synthetic quality dataset with graded distortions and oracle labels.
//!
//! References are procedural 8-bit images. Each is distorted by additive
//! noise, Gaussian blur, block averaging and a brightness shift at levels
//! 1–5. The oracle severity of a distortion is its level, except the
//! brightness shift which counts `0.4·level`: a uniform offset costs a lot
//! of PSNR but little visible structure, so PSNR mis-ranks it.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{mos_to_s, write_jsonl, ImageSet, MosRecord, MosSample, TripletRecord, TripletSample};
use crate::error::{Error, Result};
use crate::image::{reflect_index, save_image, ImageTensor};

pub const LEVELS: u8 = 5;
pub const MAX_SEVERITY: f64 = 5.0;
/// Triplets whose severities differ by less than this are redrawn.
pub const MIN_SEVERITY_GAP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distortion {
    Noise,
    Blur,
    Block,
    Shift,
}

impl Distortion {
    pub const ALL: [Distortion; 4] = [Distortion::Noise, Distortion::Blur, Distortion::Block, Distortion::Shift];

    pub fn name(self) -> &'static str {
        match self {
            Distortion::Noise => "noise",
            Distortion::Blur => "blur",
            Distortion::Block => "block",
            Distortion::Shift => "shift",
        }
    }

    /// Oracle severity of this distortion at `level` (1–5).
    pub fn severity(self, level: u8) -> f64 {
        match self {
            Distortion::Shift => 0.4 * level as f64,
            _ => level as f64,
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion `{s}`")))
    }
}

/// Mean opinion score implied by an oracle severity: 5 for none, 1 for the
/// worst.
pub fn severity_to_mos(severity: f64) -> f64 {
    5.0 - 4.0 * severity / MAX_SEVERITY
}

fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let (h, w) = (img.height(), img.width());
    let horiz = ImageTensor::from_fn(h, w, |y, x, c| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * img.get(y, reflect_index(x as isize + k as isize - r, w), c))
            .sum::<f64>()
            / norm
    });
    ImageTensor::from_fn(h, w, |y, x, c| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * horiz.get(reflect_index(y as isize + k as isize - r, h), x, c))
            .sum::<f64>()
            / norm
    })
}

fn block_average(img: &ImageTensor, b: usize) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut means = vec![0.0; h * w * 3];
    for by in (0..h).step_by(b) {
        for bx in (0..w).step_by(b) {
            let (ey, ex) = ((by + b).min(h), (bx + b).min(w));
            let n = ((ey - by) * (ex - bx)) as f64;
            for c in 0..3 {
                let mut sum = 0.0;
                for y in by..ey {
                    for x in bx..ex {
                        sum += img.get(y, x, c);
                    }
                }
                for y in by..ey {
                    for x in bx..ex {
                        means[(y * w + x) * 3 + c] = sum / n;
                    }
                }
            }
        }
    }
    ImageTensor::new(h, w, means).expect("same shape")
}

/// Applies a distortion at `level` (1–5); the result is clamped to
/// `[0, 1]` and quantized to 8 bits.
pub fn distort(img: &ImageTensor, kind: Distortion, level: u8, rng: &mut impl Rng) -> Result<ImageTensor> {
    if !(1..=LEVELS).contains(&level) {
        return Err(Error::Config(format!("distortion level {level} outside 1..={LEVELS}")));
    }
    let l = level as f64;
    let out = match kind {
        Distortion::Noise => {
            let normal = Normal::new(0.0, 0.03 * l).expect("positive sigma");
            ImageTensor::from_fn(img.height(), img.width(), |y, x, c| img.get(y, x, c) + normal.sample(rng))
        }
        Distortion::Blur => gaussian_blur(img, 0.5 * l),
        Distortion::Block => block_average(img, [2, 3, 4, 6, 8][level as usize - 1]),
        Distortion::Shift => ImageTensor::from_fn(img.height(), img.width(), |y, x, c| img.get(y, x, c) + 0.05 * l),
    };
    Ok(out.quantize_u8())
}

/// A procedural reference: smooth colour gradient, a few flat shapes and
/// an oriented sinusoidal texture.
pub fn reference_image(size: usize, rng: &mut impl Rng) -> ImageTensor {
    let base: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.2..0.8)));
    let shapes: Vec<(f64, f64, f64, f64, [f64; 3], bool)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
                std::array::from_fn(|_| rng.random_range(0.05..0.95)),
                rng.random(),
            )
        })
        .collect();
    let freq = rng.random_range(3.0..12.0);
    let theta = rng.random_range(0.0..PI);
    let amp = rng.random_range(0.05..0.15);
    let s = size as f64;
    ImageTensor::from_fn(size, size, |y, x, c| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let mut p = base[0][c] * (1.0 - u) * (1.0 - v) + base[1][c] * u + base[2][c] * v * (1.0 - u);
        for &(cx, cy, rx, ry, col, ellipse) in &shapes {
            let (dx, dy) = ((u - cx) / rx, (v - cy) / ry);
            let inside = if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            };
            if inside {
                p = col[c];
            }
        }
        p + amp * (2.0 * PI * freq * (u * theta.cos() + v * theta.sin())).sin()
    })
    .quantize_u8()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub references: usize,
    pub size: usize,
    pub triplets: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            references: 25,
            size: 64,
            triplets: 500,
            seed: 0,
        }
    }
}

/// A generated dataset held in memory, with paths under `root`.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub root: PathBuf,
    pub triplets: Vec<TripletSample>,
    pub mos: Vec<MosSample>,
    pub images: ImageSet,
    /// Relative path and pixels of every image, references first.
    files: Vec<(String, ImageTensor)>,
    triplet_records: Vec<TripletRecord>,
    mos_records: Vec<MosRecord>,
}

fn ref_name(r: usize) -> String {
    format!("refs/r{r:03}.png")
}

fn dist_name(r: usize, kind: Distortion, level: u8) -> String {
    format!("dist/r{r:03}_{kind}_{level}.png")
}

pub fn generate(config: &FixtureConfig, root: impl AsRef<Path>) -> Result<Fixture> {
    if config.references == 0 || config.size < 16 {
        return Err(Error::Config("fixture needs at least one reference of side ≥ 16".into()));
    }
    let root = root.as_ref().to_path_buf();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut files = Vec::new();
    let mut mos_records = Vec::new();
    let mut variants: Vec<(Distortion, u8)> = Vec::new();
    for kind in Distortion::ALL {
        for level in 1..=LEVELS {
            variants.push((kind, level));
        }
    }
    for r in 0..config.references {
        let reference = reference_image(config.size, &mut rng);
        for &(kind, level) in &variants {
            let d = distort(&reference, kind, level, &mut rng)?;
            mos_records.push(MosRecord {
                reference: ref_name(r),
                dist: dist_name(r, kind, level),
                mos: severity_to_mos(kind.severity(level)),
            });
            files.push((dist_name(r, kind, level), d));
        }
        files.push((ref_name(r), reference));
    }
    let mut triplet_records = Vec::with_capacity(config.triplets);
    for _ in 0..config.triplets {
        let r = rng.random_range(0..config.references);
        let (a, b) = loop {
            let a = variants[rng.random_range(0..variants.len())];
            let b = variants[rng.random_range(0..variants.len())];
            if (a.0.severity(a.1) - b.0.severity(b.1)).abs() >= MIN_SEVERITY_GAP {
                break (a, b);
            }
        };
        let h = if a.0.severity(a.1) > b.0.severity(b.1) { 1.0 } else { 0.0 };
        triplet_records.push(TripletRecord {
            reference: ref_name(r),
            dist_a: dist_name(r, a.0, a.1),
            dist_b: dist_name(r, b.0, b.1),
            h,
        });
    }
    let mut images = ImageSet::default();
    for (name, img) in &files {
        images.insert(root.join(name), img.clone());
    }
    let mos = mos_records
        .iter()
        .map(|m| {
            Ok(MosSample {
                ref_path: root.join(&m.reference),
                dist_path: root.join(&m.dist),
                mos: m.mos,
                s: mos_to_s(m.mos, &m.dist)?,
            })
        })
        .collect::<Result<_>>()?;
    let triplets = triplet_records
        .iter()
        .map(|t| TripletSample {
            ref_path: root.join(&t.reference),
            dist_a: root.join(&t.dist_a),
            dist_b: root.join(&t.dist_b),
            h: t.h,
        })
        .collect();
    Ok(Fixture {
        root,
        triplets,
        mos,
        images,
        files,
        triplet_records,
        mos_records,
    })
}

pub const TRIPLET_MANIFEST: &str = "triplets.jsonl";
pub const MOS_MANIFEST: &str = "mos.jsonl";

impl Fixture {
    /// Writes PNGs under `refs/` and `dist/` plus both manifests.
    pub fn write(&self) -> Result<()> {
        for sub in ["refs", "dist"] {
            let d = self.root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (name, img) in &self.files {
            save_image(img, self.root.join(name))?;
        }
        write_jsonl(self.root.join(TRIPLET_MANIFEST), &self.triplet_records)?;
        write_jsonl(self.root.join(MOS_MANIFEST), &self.mos_records)
    }
}

/// Parses `r007_blur_3.png`-style names back into their distortion.
pub fn parse_dist_name(path: &Path) -> Option<(usize, Distortion, u8)> {
    let stem = path.file_stem()?.to_str()?;
    let mut parts = stem.split('_');
    let r = parts.next()?.strip_prefix('r')?.parse().ok()?;
    let kind = parts.next()?.parse().ok()?;
    let level = parts.next()?.parse().ok()?;
    Some((r, kind, level))
}
