//! Minimal layers with explicit forward/backward passes.
//!
//! Every layer processes one sample at a time. Backward passes accumulate
//! parameter gradients into a value of the same type as the layer, so a
//! whole network's gradient is simply a zeroed copy of the network.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named views over every parameter tensor of a module, in a fixed order.
pub trait Params<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn prefixed<'a, F>(prefix: &str, v: Vec<(String, ArrayViewD<'a, F>)>) -> Vec<(String, ArrayViewD<'a, F>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

fn prefixed_mut<'a, F>(
    prefix: &str,
    v: Vec<(String, ArrayViewMutD<'a, F>)>,
) -> Vec<(String, ArrayViewMutD<'a, F>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn nested<'a, F, P: Params<F>>(prefix: &str, items: &'a [P]) -> Vec<(String, ArrayViewD<'a, F>)> {
    items
        .iter()
        .enumerate()
        .flat_map(|(i, p)| prefixed(&format!("{prefix}{i}"), p.tensors()))
        .collect()
}

pub(crate) fn nested_mut<'a, F, P: Params<F>>(
    prefix: &str,
    items: &'a mut [P],
) -> Vec<(String, ArrayViewMutD<'a, F>)> {
    items
        .iter_mut()
        .enumerate()
        .flat_map(|(i, p)| prefixed_mut(&format!("{prefix}{i}"), p.tensors_mut()))
        .collect()
}

pub(crate) fn normal_array2<F: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<F> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || F::from_f64_lossy(dist.sample(rng)))
}

/// Square-kernel convolution, stride 1, zero "same" padding.
///
/// `weight` is stored as `out × (in · k · k)` so the forward pass is a single
/// matrix product against the unfolded input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub in_channels: usize,
    pub kernel: usize,
}

/// Unfolded input retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    height: usize,
    width: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
        }
    }

    /// Normal init with the given weight std; biases start at zero.
    pub fn with_std<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, std: f64, rng: &mut R) -> Self {
        Conv2d {
            weight: normal_array2(out_channels, in_channels * kernel * kernel, std, rng),
            ..Self::zeros(in_channels, out_channels, kernel)
        }
    }

    /// He-normal init for layers followed by a ReLU.
    pub fn he<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self::with_std(in_channels, out_channels, kernel, (2.0 / fan_in).sqrt(), rng)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array3<F>) -> Result<(Array3<F>, ConvCache<F>)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let cols = im2col(x, self.kernel);
        let mut y = self.bias.view().insert_axis(Axis(1)).broadcast((self.out_channels(), h * w)).unwrap().to_owned();
        general_mat_mul(F::one(), &self.weight, &cols, F::one(), &mut y);
        let y = y.into_shape_with_order((self.out_channels(), h, w)).expect("contiguous");
        Ok((y, ConvCache { cols, height: h, width: w }))
    }

    /// Accumulates into `grad`; returns the input gradient when requested.
    pub fn backward(&self, cache: &ConvCache<F>, dy: &Array3<F>, grad: &mut Self, need_dx: bool) -> Option<Array3<F>> {
        let hw = cache.height * cache.width;
        let dy2: ArrayView2<F> = dy.view().into_shape_with_order((self.out_channels(), hw)).expect("contiguous");
        general_mat_mul(F::one(), &dy2, &cache.cols.t(), F::one(), &mut grad.weight);
        grad.bias += &dy2.sum_axis(Axis(1));
        need_dx.then(|| {
            let dcols = self.weight.t().dot(&dy2);
            col2im(&dcols, self.in_channels, cache.height, cache.width, self.kernel)
        })
    }
}

impl<F: Scalar> Params<F> for Conv2d<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// Unfolds `c × h × w` into `(c·k·k) × (h·w)` with zero padding `k / 2`.
pub fn im2col<F: Scalar>(x: &Array3<F>, k: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<F>::zeros((c * k * k, h * w));
    let dst = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out = &mut dst[row * h * w..(row + 1) * h * w];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let base = (ch * h + sy as usize) * w;
                    let s0 = (x_lo as isize + dx) as usize;
                    out[y * w + x_lo..y * w + x_hi].copy_from_slice(&src[base + s0..base + s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<F: Scalar>(cols: &Array2<F>, c: usize, h: usize, w: usize, k: usize) -> Array3<F> {
    let pad = (k / 2) as isize;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array3::<F>::zeros((c, h, w));
    let dst = x.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col = &src[row * h * w..(row + 1) * h * w];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let base = (ch * h + sy as usize) * w;
                    let s0 = (x_lo as isize + dx) as usize;
                    for (d, s) in dst[base + s0..base + s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&col[y * w + x_lo..y * w + x_hi])
                    {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
    x
}

/// Fully connected layer, `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn with_std<R: Rng>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: normal_array2(outputs, inputs, std, rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array1<F>) -> Result<Array1<F>> {
        if x.len() != self.inputs() {
            return Err(Error::Shape(format!(
                "linear expects {} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        Ok(self.weight.dot(x) + &self.bias)
    }

    pub fn backward(&self, x: &Array1<F>, dy: &Array1<F>, grad: &mut Self) -> Array1<F> {
        let dy_col = dy.view().insert_axis(Axis(1));
        let x_row = x.view().insert_axis(Axis(0));
        general_mat_mul(F::one(), &dy_col, &x_row, F::one(), &mut grad.weight);
        grad.bias += dy;
        self.weight.t().dot(dy)
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

pub fn relu<F: Scalar>(x: &mut Array3<F>) {
    x.mapv_inplace(|v| v.max(F::zero()));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<F: Scalar>(y: &Array3<F>, dy: &mut Array3<F>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
}

/// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
pub fn max_pool2<F: Scalar>(x: &Array3<F>) -> (Array3<F>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y, 2 * xx);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * y + dy, 2 * xx + dx);
                    if x[[ch, cand.0, cand.1]] > x[[ch, best.0, best.1]] {
                        best = cand;
                    }
                }
                out[[ch, y, xx]] = x[[ch, best.0, best.1]];
                arg.push((ch * h + best.0) * w + best.1);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<F: Scalar>(argmax: &[usize], dy: &Array3<F>, input_dim: (usize, usize, usize)) -> Array3<F> {
    let mut dx = Array3::<F>::zeros(input_dim);
    let flat = dx.as_slice_mut().expect("standard layout");
    for (&i, &g) in argmax.iter().zip(dy.iter()) {
        flat[i] = flat[i] + g;
    }
    dx
}

/// Flattens a feature map into a vector (row-major).
pub fn flatten<F: Scalar>(x: &Array3<F>) -> Array1<F> {
    x.as_standard_layout().to_owned().into_shape_with_order(x.len()).expect("contiguous")
}

pub fn unflatten<F: Scalar>(v: Array1<F>, dim: (usize, usize, usize)) -> Array3<F> {
    v.into_shape_with_order(dim).expect("length matches")
}

/// Copies every tensor of `src` into the matching tensor of `dst`.
pub fn copy_params<F: Scalar, P: Params<F>>(dst: &mut P, src: &P) {
    for ((_, mut d), (_, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        d.assign(&s);
    }
}
