//! Separable bicubic resampling.
//!
//! One kernel is used for both directions: Keys' cubic convolution with
//! `a = -0.5`. When shrinking, the kernel is stretched by the scale factor so
//! it also acts as the anti-aliasing prefilter. Edge pixels are replicated.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Free parameter of the cubic convolution kernel.
pub const BICUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps for one output sample: `(source index, weight)`, dominant tap first.
type Taps<F> = Vec<(usize, F)>;

fn axis_taps<F: Scalar>(in_len: usize, out_len: usize) -> Vec<Taps<F>> {
    let scale = in_len as f64 / out_len as f64;
    let support = if scale > 1.0 { 2.0 * scale } else { 2.0 };
    let stretch = scale.max(1.0);
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut dense = vec![0.0f64; in_len];
            for j in lo..=hi {
                let w = cubic((center - j as f64) / stretch);
                if w != 0.0 {
                    dense[j.clamp(0, in_len as i64 - 1) as usize] += w;
                }
            }
            let total: f64 = dense.iter().sum();
            let mut taps: Taps<F> = dense
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| (j, F::from_f64_lossy(w / total)))
                .collect();
            anchor_dominant(&mut taps);
            taps
        })
        .collect()
}

/// Moves the dominant tap to the front; it becomes the anchor of [`apply`].
fn anchor_dominant<F: Scalar>(taps: &mut Taps<F>) {
    if let Some(big) = (0..taps.len()).max_by(|&a, &b| {
        taps[a]
            .1
            .abs()
            .partial_cmp(&taps[b].1.abs())
            .expect("finite weights")
    }) {
        taps.swap(0, big);
    }
}

/// Weighted sum written relative to the anchor sample, so a constant
/// neighbourhood reproduces its value bit-for-bit.
fn apply<F: Scalar>(taps: &Taps<F>, sample: impl Fn(usize) -> F) -> F {
    let base = sample(taps[0].0);
    taps[1..]
        .iter()
        .fold(base, |acc, &(j, w)| acc + w * (sample(j) - base))
}

/// Resizes every channel to `out_h × out_w`. No clipping is applied.
pub fn resize<F: Scalar>(img: &Image<F>, out_h: usize, out_w: usize) -> Result<Image<F>> {
    let (c, h, w) = img.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let xt = axis_taps::<F>(w, out_w);
    let yt = axis_taps::<F>(h, out_h);

    let mut horiz = Array3::<F>::zeros((c, h, out_w));
    for ch in 0..c {
        for y in 0..h {
            let row = img.slice(ndarray::s![ch, y, ..]);
            for (x, taps) in xt.iter().enumerate() {
                horiz[[ch, y, x]] = apply(taps, |j| row[j]);
            }
        }
    }
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (y, taps) in yt.iter().enumerate() {
            for x in 0..out_w {
                out[[ch, y, x]] = apply(taps, |j| horiz[[ch, j, x]]);
            }
        }
    }
    Ok(out)
}

/// [`resize`] followed by clipping into `[0, 1]`; bicubic can overshoot at edges.
pub fn resize_clipped<F: Scalar>(img: &Image<F>, out_h: usize, out_w: usize) -> Result<Image<F>> {
    Ok(crate::image::clip_unit(&resize(img, out_h, out_w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_interpolates() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        // partition of unity at half offsets
        let s: f64 = [-1.5, -0.5, 0.5, 1.5].iter().map(|&x| cubic(x)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_survive_both_directions() {
        for &(h, w, oh, ow) in &[(64, 64, 16, 16), (64, 64, 20, 16), (20, 16, 64, 64), (7, 9, 3, 31)] {
            let img = Array3::from_elem((2, h, w), 0.5f32);
            let out = resize(&img, oh, ow).unwrap();
            assert_eq!(out.dim(), (2, oh, ow));
            assert!(out.iter().all(|&v| v == 0.5), "{h}x{w}->{oh}x{ow}");
        }
    }

    #[test]
    fn upsampling_reproduces_source_grid_on_integer_factor_linear_ramps() {
        // Cubic convolution reproduces linear functions away from the borders.
        let img = Array3::from_shape_fn((1, 8, 8), |(_, _, x)| x as f64 / 8.0);
        let up = resize(&img, 8, 32).unwrap();
        for x in 8..24 {
            let src = (x as f64 + 0.5) / 4.0 - 0.5;
            assert!((up[[0, 3, x]] - src / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_empty_target() {
        let img = Array3::<f32>::zeros((1, 4, 4));
        assert!(resize(&img, 0, 4).is_err());
    }
}
