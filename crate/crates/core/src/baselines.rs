//! PSNR and MS-SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_shapes(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr(x: &ImageTensor, y: &ImageTensor, peak: f64) -> Result<f64> {
    check_shapes(x, y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Which planes MS-SSIM is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    /// Rec.601 luminance.
    #[default]
    Luminance,
    /// Mean of the per-channel scores.
    RgbAverage,
}

/// Number of dyadic scales an image with shortest side `side` supports.
pub fn ms_ssim_scales(side: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&m| side > (SSIM_WINDOW - 1) << (m - 1))
        .unwrap_or(0)
}

/// Multi-scale SSIM with data range 1. Images too small for five scales use
/// fewer, with the remaining exponents rescaled to sum to the same total.
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor, mode: ChannelMode) -> Result<f64> {
    check_shapes(x, y)?;
    let (h, w) = (x.height(), x.width());
    let scales = ms_ssim_scales(h.min(w));
    if scales == 0 {
        return Err(Error::Shape(format!("MS-SSIM needs at least {SSIM_WINDOW} px per side, got {h}x{w}")));
    }
    if scales < MS_SSIM_WEIGHTS.len() {
        log::warn!("{h}x{w} image supports {scales} of 5 MS-SSIM scales; weights renormalized");
    }
    let planes = |img: &ImageTensor| -> Vec<Vec<f64>> {
        match mode {
            ChannelMode::Luminance => vec![img.luminance()],
            ChannelMode::RgbAverage => (0..3).map(|c| img.data().iter().skip(c).step_by(3).copied().collect()).collect(),
        }
    };
    let (px, py) = (planes(x), planes(y));
    let n = px.len() as f64;
    Ok(px.iter().zip(&py).map(|(a, b)| ms_ssim_plane(a, b, h, w, scales)).sum::<f64>() / n)
}

fn ms_ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, scales: usize) -> f64 {
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let full: f64 = MS_SSIM_WEIGHTS.iter().sum();
    let window = gaussian_window();
    let (mut x, mut y, mut h, mut w) = (x.to_vec(), y.to_vec(), h, w);
    let mut result = 1.0;
    for j in 0..scales {
        let weight = MS_SSIM_WEIGHTS[j] * full / total;
        let (ssim, cs) = ssim_stats(&x, &y, h, w, &window);
        let term = if j + 1 == scales { ssim } else { cs };
        result *= term.max(0.0).powf(weight);
        if j + 1 < scales {
            (x, _, _) = downsample(&x, h, w);
            (y, h, w) = downsample(&y, h, w);
        }
    }
    result
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering.
fn filter(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn ssim_stats(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let (mx, _, _) = filter(x, h, w, k);
    let (my, _, _) = filter(y, h, w, k);
    let (exx, _, _) = filter(&prod(x, x), h, w, k);
    let (eyy, _, _) = filter(&prod(y, y), h, w, k);
    let (exy, _, _) = filter(&prod(x, y), h, w, k);
    let n = mx.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (vx, vy, cov) = (exx[i] - mx[i] * mx[i], eyy[i] - my[i] * my[i], exy[i] - mx[i] * my[i]);
        let csv = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        cs += csv;
        ssim += l * csv;
    }
    (ssim / n, cs / n)
}

/// 2×2 average pooling; a trailing odd row or column is dropped.
fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let s = p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1];
            out.push(s / 4.0);
        }
    }
    (out, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, |_, _, _| rng.random())
    }

    /// Direct 2-D window sums per output pixel, then the MS-SSIM product.
    fn oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let c = 5.0;
        let mut k2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5))).exp();
                s += *v;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut xs = x.to_vec();
        let mut ys = y.to_vec();
        let (mut hh, mut ww) = (h, w);
        let mut out = 1.0;
        for (scale, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (mut ssim_sum, mut cs_sum, mut count) = (0.0, 0.0, 0.0);
            for oy in 0..=hh - 11 {
                for ox in 0..=ww - 11 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = k2[i][j] / s;
                            let (a, b) = (xs[(oy + i) * ww + ox + j], ys[(oy + i) * ww + ox + j]);
                            mx += k * a;
                            my += k * b;
                            xx += k * a * a;
                            yy += k * b * b;
                            xy += k * a * b;
                        }
                    }
                    let cs = (2.0 * (xy - mx * my) + c2) / ((xx - mx * mx) + (yy - my * my) + c2);
                    cs_sum += cs;
                    ssim_sum += cs * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    count += 1.0;
                }
            }
            if scale == 4 {
                out *= (ssim_sum / count).max(0.0).powf(wt);
            } else {
                out *= (cs_sum / count).max(0.0).powf(wt);
                let half = |p: &[f64]| -> Vec<f64> {
                    let mut o = Vec::new();
                    for yy in 0..hh / 2 {
                        for xx in 0..ww / 2 {
                            o.push(
                                (p[2 * yy * ww + 2 * xx]
                                    + p[2 * yy * ww + 2 * xx + 1]
                                    + p[(2 * yy + 1) * ww + 2 * xx]
                                    + p[(2 * yy + 1) * ww + 2 * xx + 1])
                                    / 4.0,
                            );
                        }
                    }
                    o
                };
                xs = half(&xs);
                ys = half(&ys);
                hh /= 2;
                ww /= 2;
            }
        }
        out
    }

    #[test]
    fn psnr_closed_forms() {
        let x = ImageTensor::constant(8, 8, 0.25);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let y = ImageTensor::constant(8, 8, 0.25 + 16.0 / 255.0);
        assert!((psnr(&x, &y, 1.0).unwrap() - 24.048).abs() < 1e-3);
        assert!((psnr(&x, &y, 1.0).unwrap() - 10.0 * (255.0f64 * 255.0 / 256.0).log10()).abs() < 1e-9);
        let y = ImageTensor::constant(8, 8, 0.25 + 1.0 / 255.0);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_amplitude() {
        let x = ImageTensor::constant(4, 4, 0.2);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let y = ImageTensor::constant(4, 4, 0.2 + k as f64 * 0.01);
            let p = psnr(&x, &y, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ms_ssim_identity_is_exactly_one() {
        let x = random_image(64, 80, 1);
        assert_eq!(ms_ssim(&x, &x, ChannelMode::Luminance).unwrap(), 1.0);
        assert_eq!(ms_ssim(&x, &x, ChannelMode::RgbAverage).unwrap(), 1.0);
    }

    #[test]
    fn ms_ssim_inverted_pattern_is_low() {
        let x = ImageTensor::from_fn(176, 176, |y, x, _| if (y / 4 + x / 4) % 2 == 0 { 0.9 } else { 0.1 });
        let y = ImageTensor::from_fn(176, 176, |yy, xx, c| 1.0 - x.get(yy, xx, c));
        assert!(ms_ssim(&x, &y, ChannelMode::Luminance).unwrap() < 0.5);
    }

    #[test]
    fn ms_ssim_matches_scalar_oracle() {
        let x = random_image(256, 256, 2);
        let y = ImageTensor::from_fn(256, 256, |r, c, ch| 0.7 * x.get(r, c, ch) + 0.3 * ((r + c) as f64 / 512.0));
        let got = ms_ssim(&x, &y, ChannelMode::Luminance).unwrap();
        let want = oracle(&x.luminance(), &y.luminance(), 256, 256);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn scale_count_follows_size() {
        assert_eq!(ms_ssim_scales(161), 5);
        assert_eq!(ms_ssim_scales(160), 4);
        assert_eq!(ms_ssim_scales(64), 3);
        assert_eq!(ms_ssim_scales(11), 1);
        assert_eq!(ms_ssim_scales(10), 0);
        assert!(ms_ssim(&ImageTensor::constant(8, 8, 0.1), &ImageTensor::constant(8, 8, 0.1), ChannelMode::Luminance).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ImageTensor::constant(16, 16, 0.1);
        let b = ImageTensor::constant(16, 17, 0.1);
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Shape(_))));
        assert!(matches!(ms_ssim(&a, &b, ChannelMode::Luminance), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn symmetric(seed in any::<u64>()) {
            let x = random_image(24, 24, seed);
            let y = random_image(24, 24, seed ^ 0x5555);
            prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
            let (a, b) = (ms_ssim(&x, &y, ChannelMode::Luminance).unwrap(), ms_ssim(&y, &x, ChannelMode::Luminance).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn shared_shift_changes_little(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = ImageTensor::from_fn(32, 32, |_, _, _| rng.random_range(0.1..0.8));
            let y = ImageTensor::from_fn(32, 32, |r, c, ch| x.get(r, c, ch) + rng.random_range(-0.1..0.1));
            let shift = |img: &ImageTensor| ImageTensor::from_fn(32, 32, |r, c, ch| img.get(r, c, ch) + 0.1);
            let a = ms_ssim(&x, &y, ChannelMode::Luminance).unwrap();
            let b = ms_ssim(&shift(&x), &shift(&y), ChannelMode::Luminance).unwrap();
            prop_assert!((a - b).abs() < 0.05);
        }
    }
}
