//! Residual convolutional super-resolution on pre-upsampled input.

use ndarray::{Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clip_unit, Image};
use crate::nn::{nested, nested_mut, relu, relu_backward, Conv2d, ConvCache, Params};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    /// Image channels in and out.
    pub image_channels: usize,
    /// Number of convolution layers.
    pub depth: usize,
    /// Feature width of the hidden layers.
    pub channels: usize,
    pub kernel: usize,
    /// Output is `input + f(input)` when set.
    pub residual: bool,
    /// Weight std of the last layer; small so training starts near identity.
    pub output_init_std: f64,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            image_channels: 1,
            depth: 6,
            channels: 32,
            kernel: 3,
            residual: true,
            output_init_std: 1e-3,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("sr depth, channels and image_channels must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("sr kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }
}

/// The super-resolved face `I_asr`. Values are not clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SrOutput<F> {
    pub sr_image: Image<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrNet<F> {
    pub layers: Vec<Conv2d<F>>,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub struct SrCache<F> {
    convs: Vec<ConvCache<F>>,
    /// Post-ReLU activations of every hidden layer.
    hidden: Vec<Array3<F>>,
}

impl<F: Scalar> SrNet<F> {
    pub fn new<R: Rng>(cfg: &SrConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, w, k) = (cfg.image_channels, cfg.channels, cfg.kernel);
        let mut layers = Vec::with_capacity(cfg.depth);
        if cfg.depth == 1 {
            layers.push(Conv2d::with_std(c, c, k, cfg.output_init_std, rng));
        } else {
            layers.push(Conv2d::he(c, w, k, rng));
            for _ in 0..cfg.depth - 2 {
                layers.push(Conv2d::he(w, w, k, rng));
            }
            layers.push(Conv2d::with_std(w, c, k, cfg.output_init_std, rng));
        }
        Ok(SrNet {
            layers,
            residual: cfg.residual,
        })
    }

    pub fn zeros_like(&self) -> Self {
        SrNet {
            layers: self
                .layers
                .iter()
                .map(|l| Conv2d::zeros(l.in_channels, l.out_channels(), l.kernel))
                .collect(),
            residual: self.residual,
        }
    }

    pub fn image_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn forward(&self, input: &Image<F>) -> Result<(SrOutput<F>, SrCache<F>)> {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut y, cache) = layer.forward(&x)?;
            convs.push(cache);
            if i < last {
                relu(&mut y);
                hidden.push(y.clone());
            }
            x = y;
        }
        if self.residual {
            x += input;
        }
        Ok((SrOutput { sr_image: x }, SrCache { convs, hidden }))
    }

    /// Backpropagates `d_out` (gradient w.r.t. `sr_image`).
    pub fn backward(&self, cache: &SrCache<F>, d_out: &Image<F>, grad: &mut Self, need_dx: bool) -> Option<Image<F>> {
        let mut d = d_out.clone();
        let mut dx_input = None;
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                relu_backward(&cache.hidden[i], &mut d);
            }
            let want = i > 0 || need_dx;
            match self.layers[i].backward(&cache.convs[i], &d, &mut grad.layers[i], want) {
                Some(next) if i > 0 => d = next,
                other => dx_input = other,
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = dx_input.expect("requested");
        if self.residual {
            dx += d_out;
        }
        Some(dx)
    }
}

impl<F: Scalar> Params<F> for SrNet<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        nested("conv", &self.layers)
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        nested_mut("conv", &mut self.layers)
    }
}

/// Runs the network on an input whose shape must be `expected = (c, h, w)`.
pub fn sr_forward<F: Scalar>(input: &Image<F>, net: &SrNet<F>, expected: (usize, usize, usize)) -> Result<SrOutput<F>> {
    if input.dim() != expected {
        return Err(Error::Shape(format!(
            "sr input {:?} does not match configured {:?}",
            input.dim(),
            expected
        )));
    }
    Ok(net.forward(input)?.0)
}

fn same_shape<F>(a: &Image<F>, b: &Image<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Pixel fidelity loss: mean of squared element differences.
pub fn sr_loss<F: Scalar>(sr: &SrOutput<F>, hr: &Image<F>) -> Result<F> {
    mse(&sr.sr_image, hr)
}

pub fn mse<F: Scalar>(a: &Image<F>, b: &Image<F>) -> Result<F> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Ok(F::zero());
    }
    let n = F::from_usize(a.len()).expect("length");
    let s = a.iter().zip(b.iter()).fold(F::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    });
    Ok(s / n)
}

/// Gradient of [`mse`] with respect to its first argument, scaled by `scale`.
pub fn mse_grad<F: Scalar>(a: &Image<F>, b: &Image<F>, scale: F) -> Image<F> {
    let k = scale * F::from_f64_lossy(2.0) / F::from_usize(a.len()).expect("length");
    (a - b).mapv(|d| d * k)
}

/// PSNR in dB with unit peak, computed on clipped images. Identical inputs
/// give `f64::INFINITY`.
pub fn psnr<F: Scalar>(a: &Image<F>, b: &Image<F>) -> Result<f64> {
    same_shape(a, b)?;
    let a = clip_unit(a);
    let b = clip_unit(b);
    let n = a.len() as f64;
    let err: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(err))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Image<f64> {
        Array3::from_shape_simple_fn(dim, || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SrConfig {
            depth: 3,
            channels: 4,
            output_init_std: 0.0,
            ..Default::default()
        };
        let net = SrNet::<f32>::new(&cfg, &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((1, 9, 7), || rng.gen_range(0.0..1.0f32));
        let out = sr_forward(&x, &net, (1, 9, 7)).unwrap();
        assert_eq!(out.sr_image, x);
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SrNet::<f64>::new(&SrConfig { depth: 2, channels: 3, image_channels: 3, ..Default::default() }, &mut rng).unwrap();
        let x = rand_img(&mut rng, (3, 5, 11));
        assert_eq!(sr_forward(&x, &net, (3, 5, 11)).unwrap().sr_image.dim(), (3, 5, 11));
        assert!(sr_forward(&x, &net, (3, 5, 12)).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let sr = SrOutput { sr_image: a.clone() };
        assert_eq!(sr_loss(&sr, &a).unwrap(), 0.0);
        assert_eq!(sr_loss(&sr, &b).unwrap(), 0.25);
        assert!(sr_loss(&sr, &Array3::zeros((1, 2, 3))).is_err());
    }

    #[test]
    fn loss_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = rand_img(&mut rng, (2, 6, 5));
            let b = rand_img(&mut rng, (2, 6, 5));
            let mut acc = 0.0;
            for c in 0..2 {
                for y in 0..6 {
                    for x in 0..5 {
                        acc += (a[[c, y, x]] - b[[c, y, x]]).powi(2);
                    }
                }
            }
            let want = acc / 60.0;
            let got = sr_loss(&SrOutput { sr_image: a.clone() }, &b).unwrap();
            assert!(((got - want) / want).abs() < 1e-12);
            assert_eq!(got, mse(&b, &a).unwrap());
        }
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_img(&mut rng, (1, 8, 8));
        let b = rand_img(&mut rng, (1, 8, 8));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        // a constant 0.1 offset is an mse of 0.01
        let shifted = a.mapv(|v| (v * 0.5) + 0.1);
        let base = a.mapv(|v| v * 0.5);
        assert!((psnr(&shifted, &base).unwrap() - 20.0).abs() < 1e-9);
    }
}
