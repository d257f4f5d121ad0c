//! Synthetic (auxiliary) and native-like low-resolution image construction.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_unit_range, clip_unit, Image};
use crate::resample::{resize, resize_clipped};
use crate::scalar::Scalar;

/// Largest side length still considered low resolution.
pub const LR_MAX_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub lr_height: usize,
    pub lr_width: usize,
    /// Gaussian blur std, in high-resolution pixels, applied before shrinking.
    pub blur_sigma: f64,
    /// Additive Gaussian noise std in `[0, 1]` intensity units, applied after shrinking.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    /// Mean native face size (20×16) with mild blur and noise.
    fn default() -> Self {
        DegradationConfig {
            lr_height: 20,
            lr_width: 16,
            blur_sigma: 1.0,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_height == 0 || self.lr_width == 0 {
            return Err(Error::InvalidInput("lr size must be positive".into()));
        }
        if self.lr_height > LR_MAX_SIDE || self.lr_width > LR_MAX_SIDE {
            return Err(Error::InvalidInput(format!(
                "lr size {}x{} exceeds the {LR_MAX_SIDE}x{LR_MAX_SIDE} low-resolution bound",
                self.lr_height, self.lr_width
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DegradationConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Paired auxiliary sample: the pre-upsampled network input and its HR target.
#[derive(Debug, Clone, PartialEq)]
pub struct LrHrPair<F> {
    pub input_lr: Image<F>,
    pub target_hr: Image<F>,
    pub identity: u32,
}

fn check_hr<F: Scalar>(hr: &Image<F>, cfg: &DegradationConfig) -> Result<()> {
    cfg.validate()?;
    check_unit_range(hr, "hr image")?;
    let (_, h, w) = hr.dim();
    if cfg.lr_height > h || cfg.lr_width > w {
        return Err(Error::Shape(format!(
            "lr size {}x{} is larger than hr size {h}x{w}",
            cfg.lr_height, cfg.lr_width
        )));
    }
    Ok(())
}

/// Bicubic shrink to the configured LR size, clipped into `[0, 1]`.
pub fn downsample_clean<F: Scalar>(hr: &Image<F>, cfg: &DegradationConfig) -> Result<Image<F>> {
    check_hr(hr, cfg)?;
    resize_clipped(hr, cfg.lr_height, cfg.lr_width)
}

/// Builds `(I_alr, I_ahr)`: shrink, then grow back to the HR size.
pub fn make_lr_hr_pair<F: Scalar>(
    hr: &Image<F>,
    cfg: &DegradationConfig,
    identity: u32,
) -> Result<LrHrPair<F>> {
    let (_, h, w) = hr.dim();
    let lr = downsample_clean(hr, cfg)?;
    Ok(LrHrPair {
        input_lr: resize_clipped(&lr, h, w)?,
        target_hr: hr.clone(),
        identity,
    })
}

/// Upsamples an LR face to the recognition input size.
pub fn pre_upsample<F: Scalar>(lr: &Image<F>, height: usize, width: usize) -> Result<Image<F>> {
    resize_clipped(lr, height, width)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur<F: Scalar>(img: &Image<F>, sigma: f64) -> Image<F> {
    if sigma == 0.0 {
        return img.clone();
    }
    let k: Vec<F> = gaussian_kernel(sigma)
        .into_iter()
        .map(F::from_f64_lossy)
        .collect();
    let r = (k.len() / 2) as i64;
    let (c, h, w) = img.dim();
    let mut tmp = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for (t, &kv) in k.iter().enumerate() {
                    let xx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc = acc + kv * img[[ch, y, xx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for (t, &kv) in k.iter().enumerate() {
                    let yy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc = acc + kv * tmp[[ch, yy, x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Native-like LR face: blur, shrink, add seeded Gaussian noise, clip.
///
/// Only the LR result is returned; native samples carry no HR target.
pub fn degrade_native<F: Scalar>(hr: &Image<F>, cfg: &DegradationConfig) -> Result<Image<F>> {
    check_hr(hr, cfg)?;
    let blurred = gaussian_blur(hr, cfg.blur_sigma);
    let mut lr = resize(&blurred, cfg.lr_height, cfg.lr_width)?;
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        lr.iter_mut()
            .for_each(|v| *v = *v + F::from_f64_lossy(normal.sample(&mut rng)));
    }
    Ok(clip_unit(&lr))
}
