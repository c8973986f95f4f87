//! Decoded images, patch extraction and gradient maps.

use std::path::Path;

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rec.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB image with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { height, width, data })
    }

    /// Builds an image from a per-sample function, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let v = f(y, x, c);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        ImageTensor { height, width, data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Rec.601 luminance plane.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    }

    /// The `size × size` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size_h: usize, size_w: usize) -> ImageTensor {
        assert!(y + size_h <= self.height && x + size_w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(size_h * size_w * 3);
        for row in y..y + size_h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + size_w * 3]);
        }
        ImageTensor {
            height: size_h,
            width: size_w,
            data,
        }
    }

    /// Reflect-pads on the bottom and right up to at least `h × w`.
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> ImageTensor {
        if self.height >= h && self.width >= w {
            return self.clone();
        }
        let (nh, nw) = (self.height.max(h), self.width.max(w));
        let data = reflect_pad_hwc(&self.data, self.height, self.width, 3, nh, nw);
        ImageTensor {
            height: nh,
            width: nw,
            data,
        }
    }

    /// Quantizes to 8 bits per sample, as a lossless 8-bit file would.
    pub fn quantize_u8(&self) -> ImageTensor {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Index into `0..n` under reflection without edge repetition
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub(crate) fn reflect_pad_hwc(data: &[f64], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nh * nw * c);
    for y in 0..nh {
        let sy = reflect_index(y as isize, h);
        for x in 0..nw {
            let sx = reflect_index(x as isize, w);
            let s = (sy * w + sx) * c;
            out.extend_from_slice(&data[s..s + c]);
        }
    }
    out
}

/// A real-valued `H × W × C` array without range constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Reflect-pads bottom/right so both sides are multiples of `m`.
    /// Returns the padded map and the `(rows, cols)` added.
    pub fn pad_to_multiple(&self, m: usize) -> (FeatureMap, (usize, usize)) {
        let nh = self.height.div_ceil(m) * m;
        let nw = self.width.div_ceil(m) * m;
        if nh == self.height && nw == self.width {
            return (self.clone(), (0, 0));
        }
        let data = reflect_pad_hwc(&self.data, self.height, self.width, self.channels, nh, nw);
        (
            FeatureMap {
                height: nh,
                width: nw,
                channels: self.channels,
                data,
            },
            (nh - self.height, nw - self.width),
        )
    }
}

/// Per-channel normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Statistics of the ImageNet training set, used by the pretrained
    /// backbones.
    pub const IMAGENET: ChannelStats = ChannelStats {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Decodes an 8- or 16-bit grayscale or RGB raster into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageRgb8(_) => {
            img.into_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageRgb16(_) => img
            .into_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: {} channels of {:?} samples (expected 1 or 3 channels, 8 or 16 bit)",
                path.display(),
                other.color().channel_count(),
                other.color()
            )))
        }
    };
    ImageTensor::new(h, w, data)
}

/// Writes an 8-bit RGB file; the format follows the extension.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size matches");
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// `(img - mean) / std` per channel.
pub fn normalize(img: &ImageTensor, stats: &ChannelStats) -> Result<FeatureMap> {
    if stats.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Parameter(format!("std must be positive, got {:?}", stats.std)));
    }
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| (p[c] - stats.mean[c]) / stats.std[c]))
        .collect();
    FeatureMap::new(img.height, img.width, 3, data)
}

/// Inverse of [`normalize`]; the result is not clamped.
pub fn denormalize(fm: &FeatureMap, stats: &ChannelStats) -> Result<FeatureMap> {
    if fm.channels != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", fm.channels)));
    }
    if stats.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Parameter(format!("std must be positive, got {:?}", stats.std)));
    }
    let data = fm
        .data
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| p[c] * stats.std[c] + stats.mean[c]))
        .collect();
    FeatureMap::new(fm.height, fm.width, 3, data)
}

/// Crop geometry for training and patch-averaged testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size: 224,
            stride: 128,
            seed: 0,
        }
    }
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        let spec = PatchSpec { size, stride, seed: 0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::Parameter(format!(
                "patch size and stride must be ≥ 1 (size {}, stride {})",
                self.size, self.stride
            )));
        }
        Ok(())
    }
}

/// Uniform top-left offset for a `size × size` crop of an `h × w` image
/// (assumed already padded to at least `size`).
pub fn crop_offset<R: Rng>(rng: &mut R, h: usize, w: usize, size: usize) -> (usize, usize) {
    (rng.random_range(0..=h - size), rng.random_range(0..=w - size))
}

/// Seeded random crop; small images are reflect-padded up to the crop size.
pub fn random_crop(img: &ImageTensor, spec: &PatchSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let padded = img.reflect_pad_to(spec.size, spec.size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (y, x) = crop_offset(&mut rng, padded.height, padded.width, spec.size);
    Ok(padded.crop(y, x, spec.size, spec.size))
}

/// Offsets along one axis: multiples of `stride`, with the last one moved
/// inward so the patch ends at the border.
pub fn patch_offsets(n: usize, size: usize, stride: usize) -> Vec<usize> {
    assert!(size >= 1 && size <= n && stride >= 1);
    // a stride wider than the patch would leave uncovered gaps
    let stride = stride.min(size);
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + size < n).collect();
    out.push(n - size);
    out.dedup();
    out
}

/// Row-major `(y, x)` offsets of the patch grid of an `h × w` image.
pub fn patch_grid_offsets(h: usize, w: usize, spec: &PatchSpec) -> Vec<(usize, usize)> {
    let ys = patch_offsets(h, spec.size, spec.stride);
    let xs = patch_offsets(w, spec.size, spec.stride);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect()
}

/// Grid of `size × size` patches covering the (padded) image.
pub fn patch_grid(img: &ImageTensor, spec: &PatchSpec) -> Result<Vec<ImageTensor>> {
    spec.validate()?;
    let padded = img.reflect_pad_to(spec.size, spec.size);
    Ok(patch_grid_offsets(padded.height, padded.width, spec)
        .into_iter()
        .map(|(y, x)| padded.crop(y, x, spec.size, spec.size))
        .collect())
}

/// Sobel gradient magnitude of a single plane with reflect padding.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    let at = |y: isize, x: isize| plane[reflect_index(y, h) * w + reflect_index(x, w)];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Max-normalized Sobel magnitude of the luminance, replicated to RGB.
pub fn gradient_map(img: &ImageTensor) -> ImageTensor {
    let mag = sobel_magnitude(&img.luminance(), img.height, img.width);
    let max = mag.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let data = mag.iter().flat_map(|&m| [m * scale; 3]).collect();
    ImageTensor {
        height: img.height,
        width: img.width,
        data,
    }
}
