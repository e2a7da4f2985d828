//! Image transforms and the augmented-dataset builders.
//!
//! All transforms preserve dimensions and the `[0, 1]` range. Samples that
//! fall outside the frame read as 0 (background); nothing wraps.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Image};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const MAX_ROTATION_DEGREES: f64 = 45.0;

/// Default parameter ranges for the named builders.
pub const DEFAULT_ROTATION_DEGREES: f64 = 12.0;
pub const DEFAULT_MAX_SHIFT: i64 = 2;
pub const DEFAULT_SMOOTH_SIGMA: (f64, f64) = (0.5, 1.0);
pub const DEFAULT_ELASTIC_SIGMA: f64 = 4.0;
pub const DEFAULT_ELASTIC_ALPHA: f64 = 34.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub sigma: f64,
    pub alpha: f64,
    pub seed: u64,
}

/// Bilinear sample at fractional `(x, y)` = (column, row).
fn bilinear(src: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let px = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            src[r as usize * w + c as usize]
        }
    };
    let (r, c) = (y0 as i64, x0 as i64);
    let top = px(r, c) * (1.0 - fx) + if fx > 0.0 { px(r, c + 1) * fx } else { 0.0 };
    if fy > 0.0 {
        let bottom = px(r + 1, c) * (1.0 - fx) + if fx > 0.0 { px(r + 1, c + 1) * fx } else { 0.0 };
        top * (1.0 - fy) + bottom * fy
    } else {
        top
    }
}

fn as_f64(image: &Image) -> Vec<f64> {
    image.pixels().iter().map(|&p| f64::from(p)).collect()
}

/// Rotate counter-clockwise (as displayed, rows growing downward) about the
/// image center.
pub fn rotate(image: &Image, angle_degrees: f64) -> Result<Image> {
    if !(angle_degrees.abs() <= MAX_ROTATION_DEGREES) {
        return Err(Error::AngleOutOfRange(angle_degrees));
    }
    let (h, w) = (image.height(), image.width());
    let src = as_f64(image);
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let out = (0..h * w).map(|i| {
        let dy = (i / w) as f64 - cy;
        let dx = (i % w) as f64 - cx;
        let sx = cx + cos * dx - sin * dy;
        let sy = cy + sin * dx + cos * dy;
        bilinear(&src, h, w, sx, sy)
    });
    Ok(Image::from_clamped(h, w, out))
}

/// Integer shift: positive `dx` moves content right, positive `dy` down.
/// Shifts up to a quarter of the side (rounded up) are allowed.
pub fn translate(image: &Image, dx: i64, dy: i64) -> Result<Image> {
    let (h, w) = (image.height() as i64, image.width() as i64);
    if dx.abs() > (w + 3) / 4 || dy.abs() > (h + 3) / 4 {
        return Err(Error::ShiftOutOfRange { dx, dy });
    }
    let src = image.pixels();
    let out = (0..h * w).map(|i| {
        let (r, c) = (i / w - dy, i % w - dx);
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            f64::from(src[(r * w + c) as usize])
        }
    });
    Ok(Image::from_clamped(h as usize, w as usize, out))
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::NonpositiveSigma(sigma));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Separable Gaussian blur of a raw grid, clamping at the edges.
pub fn smooth_grid(src: &[f64], h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    let k = gaussian_kernel(sigma)?;
    let radius = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] =
                k.iter().enumerate().map(|(j, kv)| kv * src[r * w + clamp(c as i64 + j as i64 - radius, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] =
                k.iter().enumerate().map(|(j, kv)| kv * tmp[clamp(r as i64 + j as i64 - radius, h) * w + c]).sum();
        }
    }
    Ok(out)
}

pub fn gaussian_smooth(image: &Image, sigma: f64) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let out = smooth_grid(&as_f64(image), h, w, sigma)?;
    Ok(Image::from_clamped(h, w, out))
}

/// Displacement field `(dx, dy)` per pixel: `alpha` times a Gaussian-smoothed
/// field of uniform noise in `[-1, 1]`. Noise is drawn row-major for `dx`
/// first, then for `dy`.
pub fn displacement_field(h: usize, w: usize, params: &ElasticParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(params.alpha >= 0.0) {
        return Err(Error::InvalidAugment(format!("alpha must be >= 0, got {}", params.alpha)));
    }
    let mut rng = seed::rng(params.seed);
    let noise = |rng: &mut Rng| -> Vec<f64> { (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect() };
    let nx = noise(&mut rng);
    let ny = noise(&mut rng);
    let fx = smooth_grid(&nx, h, w, params.sigma)?;
    let fy = smooth_grid(&ny, h, w, params.sigma)?;
    Ok((fx.into_iter().map(|v| v * params.alpha).collect(), fy.into_iter().map(|v| v * params.alpha).collect()))
}

pub fn elastic_deform(image: &Image, params: &ElasticParams) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let (fx, fy) = displacement_field(h, w, params)?;
    if params.alpha == 0.0 {
        return Ok(image.clone());
    }
    let src = as_f64(image);
    let out = (0..h * w).map(|i| {
        let (r, c) = ((i / w) as f64, (i % w) as f64);
        bilinear(&src, h, w, c + fx[i], r + fy[i])
    });
    Ok(Image::from_clamped(h, w, out))
}

/// Keep a `size`x`size` window with top-left corner `(top, left)`; everything
/// else becomes background.
pub fn crop(image: &Image, size: usize, top: usize, left: usize) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::InvalidAugment(format!("crop window {size} at ({top}, {left}) exceeds {h}x{w}")));
    }
    let src = image.pixels();
    let out = (0..h * w).map(|i| {
        let (r, c) = (i / w, i % w);
        if (top..top + size).contains(&r) && (left..left + size).contains(&c) {
            f64::from(src[i])
        } else {
            0.0
        }
    });
    Ok(Image::from_clamped(h, w, out))
}

pub fn hflip(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let src = image.pixels();
    Image::from_clamped(h, w, (0..h * w).map(|i| f64::from(src[(i / w) * w + (w - 1 - i % w)])))
}

/// One randomized transform with its parameter range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    /// Angle drawn uniformly from `[-max_degrees, max_degrees]`.
    Rotate {
        max_degrees: f64,
    },
    /// Per-axis integer shift drawn uniformly from `[-max_shift, max_shift]`.
    Translate {
        max_shift: i64,
    },
    /// Elastic deformation; the field seed is drawn from the image stream.
    Elastic {
        sigma: f64,
        alpha: f64,
    },
    /// Sigma drawn uniformly from `[sigma_min, sigma_max]`.
    GaussianSmooth {
        sigma_min: f64,
        sigma_max: f64,
    },
    /// Random `size`x`size` window.
    Crop {
        size: usize,
    },
    Hflip,
}

impl Transform {
    pub fn apply(&self, image: &Image, rng: &mut Rng) -> Result<Image> {
        match *self {
            Transform::Rotate { max_degrees } => {
                let a = if max_degrees > 0.0 { rng.random_range(-max_degrees..=max_degrees) } else { 0.0 };
                rotate(image, a)
            }
            Transform::Translate { max_shift } => {
                let dx = rng.random_range(-max_shift..=max_shift);
                let dy = rng.random_range(-max_shift..=max_shift);
                translate(image, dx, dy)
            }
            Transform::Elastic { sigma, alpha } => {
                let seed = rng.random();
                elastic_deform(image, &ElasticParams { sigma, alpha, seed })
            }
            Transform::GaussianSmooth { sigma_min, sigma_max } => {
                if sigma_max < sigma_min {
                    return Err(Error::InvalidAugment(format!("sigma range [{sigma_min}, {sigma_max}] is empty")));
                }
                let s = if sigma_max > sigma_min { rng.random_range(sigma_min..=sigma_max) } else { sigma_min };
                gaussian_smooth(image, s)
            }
            Transform::Crop { size } => {
                let (h, w) = (image.height(), image.width());
                if size == 0 || size > h || size > w {
                    return Err(Error::InvalidAugment(format!("crop size {size} does not fit {h}x{w}")));
                }
                let top = rng.random_range(0..=h - size);
                let left = rng.random_range(0..=w - size);
                crop(image, size, top, left)
            }
            Transform::Hflip => Ok(hflip(image)),
        }
    }
}

/// A set of variant pipelines; each source image yields itself plus one
/// output per variant, so the replication factor is `variants + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub variants: Vec<Vec<Transform>>,
}

impl AugmentPlan {
    pub fn replication(&self) -> usize {
        self.variants.len() + 1
    }

    /// Original + 4 rotations + 4 (elastic, then rotation) variants: 9x.
    pub fn dataset1() -> Self {
        let rot = Transform::Rotate { max_degrees: DEFAULT_ROTATION_DEGREES };
        let elastic = Transform::Elastic { sigma: DEFAULT_ELASTIC_SIGMA, alpha: DEFAULT_ELASTIC_ALPHA };
        let mut variants = vec![vec![rot.clone()]; 4];
        variants.extend(std::iter::repeat_n(vec![elastic, rot], 4));
        Self { variants }
    }

    /// Original + 3 (translation, smoothing) variants: 4x.
    pub fn dataset2() -> Self {
        let pipeline = vec![
            Transform::Translate { max_shift: DEFAULT_MAX_SHIFT },
            Transform::GaussianSmooth { sigma_min: DEFAULT_SMOOTH_SIGMA.0, sigma_max: DEFAULT_SMOOTH_SIGMA.1 },
        ];
        Self { variants: vec![pipeline; 3] }
    }

    /// Apply to every image. Image `i` uses the stream `derive(seed, i)`, so
    /// the result does not depend on scheduling.
    pub fn apply(&self, source: &Dataset, seed: u64) -> Result<Dataset> {
        let per_image: Vec<Vec<Image>> = source
            .images()
            .par_iter()
            .enumerate()
            .map(|(i, image)| {
                let mut rng = seed::rng(seed::derive(seed, i as u64));
                let mut out = Vec::with_capacity(self.replication());
                out.push(image.clone());
                for pipeline in &self.variants {
                    let mut current = image.clone();
                    for t in pipeline {
                        current = t.apply(&current, &mut rng)?;
                    }
                    out.push(current);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let reps = self.replication();
        let labels = source.labels().iter().flat_map(|&l| std::iter::repeat_n(l, reps)).collect();
        Dataset::new(
            per_image.into_iter().flatten().collect(),
            labels,
            source.n_classes(),
            format!("{}-aug{reps}x", source.split_name()),
        )
    }
}

pub fn build_dataset1(source: &Dataset, seed: u64) -> Result<Dataset> {
    AugmentPlan::dataset1().apply(source, seed)
}

pub fn build_dataset2(source: &Dataset, seed: u64) -> Result<Dataset> {
    AugmentPlan::dataset2().apply(source, seed)
}
