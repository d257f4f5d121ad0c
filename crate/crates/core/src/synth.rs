//! Procedural grayscale face generator used as a stand-in labeled corpus.
//!
//! Each identity is a fixed set of facial geometry and tone parameters; each
//! image of it adds pose, illumination and expression nuisance. Rendering is
//! analytic with soft edges and 2×2 supersampling.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, Image};

/// Per-identity appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub face_rx: f64,
    pub face_ry: f64,
    pub jaw: f64,
    pub skin: f64,
    pub hair: f64,
    pub hairline: f64,
    pub hair_part: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub iris: f64,
    pub brow_dy: f64,
    pub brow_tilt: f64,
    pub brow_w: f64,
    pub nose_len: f64,
    pub nose_w: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub lip: f64,
    pub mole: Option<(f64, f64)>,
    pub glasses: bool,
    pub beard: f64,
}

/// Per-image variation.
#[derive(Debug, Clone, PartialEq)]
pub struct Nuisance {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub angle: f64,
    pub light_dir: f64,
    pub light: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub smile: f64,
    pub eye_open: f64,
    pub noise: f64,
    pub background: f64,
}

fn u<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

pub fn identity_params(seed: u64, identity: u64) -> FaceParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ identity.wrapping_add(1));
    let rng = &mut rng;
    FaceParams {
        face_rx: u(rng, 0.50, 0.68),
        face_ry: u(rng, 0.68, 0.86),
        jaw: u(rng, 0.0, 0.35),
        skin: u(rng, 0.45, 0.80),
        hair: u(rng, 0.05, 0.45),
        hairline: u(rng, -0.75, -0.40),
        hair_part: u(rng, -0.4, 0.4),
        eye_dx: u(rng, 0.20, 0.32),
        eye_y: u(rng, -0.22, -0.05),
        eye_r: u(rng, 0.06, 0.11),
        iris: u(rng, 0.05, 0.35),
        brow_dy: u(rng, 0.10, 0.20),
        brow_tilt: u(rng, -0.25, 0.25),
        brow_w: u(rng, 0.02, 0.05),
        nose_len: u(rng, 0.15, 0.32),
        nose_w: u(rng, 0.05, 0.12),
        mouth_y: u(rng, 0.32, 0.50),
        mouth_w: u(rng, 0.14, 0.28),
        lip: u(rng, 0.15, 0.45),
        mole: rng.gen_bool(0.35).then(|| (u(rng, -0.4, 0.4), u(rng, -0.1, 0.45))),
        glasses: rng.gen_bool(0.25),
        beard: if rng.gen_bool(0.3) { u(rng, 0.1, 0.35) } else { 0.0 },
    }
}

pub fn sample_nuisance<R: Rng>(rng: &mut R) -> Nuisance {
    Nuisance {
        dx: u(rng, -0.08, 0.08),
        dy: u(rng, -0.08, 0.08),
        scale: u(rng, 0.90, 1.10),
        angle: u(rng, -0.15, 0.15),
        light_dir: u(rng, 0.0, 2.0 * PI),
        light: u(rng, 0.0, 0.25),
        brightness: u(rng, -0.08, 0.08),
        contrast: u(rng, 0.8, 1.15),
        smile: u(rng, -0.5, 1.0),
        eye_open: u(rng, 0.5, 1.0),
        noise: 0.01,
        background: u(rng, 0.2, 0.8),
    }
}

/// Smooth 1 → 0 transition as `d` crosses zero over width `w`.
fn inside(d: f64, w: f64) -> f64 {
    let t = (0.5 - d / w).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt() - 1.0
}

fn mix(base: f64, tone: f64, alpha: f64) -> f64 {
    base * (1.0 - alpha) + tone * alpha
}

/// Intensity at face coordinates `(x, y)`: roughly `[-1, 1]²`, y down.
fn shade(p: &FaceParams, n: &Nuisance, x: f64, y: f64, edge: f64) -> f64 {
    let mut v = n.background;

    // jaw narrows the lower half
    let rx = p.face_rx * (1.0 - p.jaw * (y.max(0.0) / p.face_ry).powi(2));
    let face = inside(ellipse(x, y, 0.0, 0.05, rx.max(0.05), p.face_ry), edge / p.face_ry);
    let hair_mask = inside(ellipse(x, y, 0.0, 0.0, p.face_rx + 0.08, p.face_ry + 0.08), edge)
        * inside(y - p.hairline - 0.15 * (x - p.hair_part).abs().powi(2), edge);
    v = mix(v, p.hair, hair_mask);
    v = mix(v, p.skin, face * (1.0 - inside(y - p.hairline, edge)));
    // shading toward the cheeks
    v -= face * 0.12 * (x / p.face_rx).powi(2);

    if p.beard > 0.0 {
        let b = face * inside(p.mouth_y - 0.05 - y, edge) * inside((x / (rx + 0.01)).abs() - 0.95, edge);
        v = mix(v, p.skin - p.beard, b * 0.8);
    }

    for s in [-1.0, 1.0] {
        let ex = s * p.eye_dx;
        let ry = p.eye_r * 0.6 * n.eye_open;
        let eye = inside(ellipse(x, y, ex, p.eye_y, p.eye_r, ry.max(0.01)), edge / p.eye_r);
        v = mix(v, 0.92, eye);
        let iris = inside(ellipse(x, y, ex, p.eye_y, p.eye_r * 0.5, ry.max(0.01)), edge / p.eye_r);
        v = mix(v, p.iris, iris);

        let by = p.eye_y - p.brow_dy + s * p.brow_tilt * (x - ex);
        let brow = inside((y - by).abs() - p.brow_w, edge) * inside((x - ex).abs() - p.eye_r * 1.4, edge);
        v = mix(v, p.hair * 0.8, brow);

        if p.glasses {
            let d = ellipse(x, y, ex, p.eye_y, p.eye_r * 1.9, p.eye_r * 1.5).abs() * p.eye_r * 1.5;
            v = mix(v, 0.1, inside(d - 0.015, edge));
        }
    }
    if p.glasses {
        let bridge = inside((y - p.eye_y).abs() - 0.012, edge) * inside(x.abs() - (p.eye_dx - p.eye_r * 1.9), edge);
        v = mix(v, 0.1, bridge);
    }

    // nose: a shaded ridge and nostril shadow
    let ny0 = p.eye_y + 0.05;
    let ny1 = ny0 + p.nose_len;
    let along = ((y - ny0) / (ny1 - ny0)).clamp(0.0, 1.0);
    let ridge = inside(x.abs() - p.nose_w * along, edge) * inside(y - ny1, edge) * inside(ny0 - y, edge);
    v -= ridge * 0.10 * (x + p.nose_w).max(0.0) / (2.0 * p.nose_w);
    let nostril = inside(ellipse(x, y, 0.0, ny1, p.nose_w * 1.2, 0.03), edge / 0.03);
    v = mix(v, p.skin * 0.55, nostril);

    // mouth bends with the smile
    let curve = n.smile * 0.12 * (x / p.mouth_w).powi(2);
    let my = p.mouth_y - curve;
    let mouth = inside((y - my).abs() - 0.025, edge) * inside(x.abs() - p.mouth_w, edge);
    v = mix(v, p.lip, mouth * face);

    if let Some((mx, my)) = p.mole {
        v = mix(v, 0.1, inside(ellipse(x, y, mx, my, 0.035, 0.035), edge / 0.035) * face);
    }
    v
}

/// Renders one face at `height × width`.
pub fn render_face(p: &FaceParams, n: &Nuisance, height: usize, width: usize, noise_seed: u64) -> Image<f32> {
    let (ca, sa) = (n.angle.cos(), n.angle.sin());
    let edge = 2.5 / height.min(width) as f64;
    let (lx, ly) = (n.light_dir.cos(), n.light_dir.sin());
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, n.noise).expect("valid std");
    Array3::from_shape_fn((1, height, width), |(_, r, c)| {
        let mut acc = 0.0;
        for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            // image coords in [-1, 1], then inverse pose
            let u = 2.0 * (c as f64 + ox) / width as f64 - 1.0 - n.dx;
            let v = 2.0 * (r as f64 + oy) / height as f64 - 1.0 - n.dy;
            let x = (ca * u + sa * v) / n.scale;
            let y = (-sa * u + ca * v) / n.scale;
            let light = 1.0 + n.light * (lx * u + ly * v);
            acc += shade(p, n, x, y, edge) * light;
        }
        let v = (acc / 4.0 - 0.5) * n.contrast + 0.5 + n.brightness;
        (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
    })
}

/// `count` images of one identity, deterministic in `(seed, identity)`.
pub fn render_identity(seed: u64, identity: u64, count: usize, height: usize, width: usize) -> Vec<Image<f32>> {
    let params = identity_params(seed, identity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ identity.wrapping_mul(0xd1b5_4a32_d192_ed03) ^ 0x5eed);
    (0..count)
        .map(|_| {
            let n = sample_nuisance(&mut rng);
            render_face(&params, &n, height, width, rng.gen())
        })
        .collect()
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub auxiliary_identities: usize,
    pub auxiliary_images: usize,
    pub native_identities: usize,
    /// Each native identity gets between 2 and this many images.
    pub native_images_max: usize,
    pub distractors: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            auxiliary_identities: 40,
            auxiliary_images: 10,
            native_identities: 41,
            native_images_max: 6,
            distractors: 100,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

/// Identity numbering keeps the three populations disjoint.
pub const NATIVE_ID_OFFSET: u64 = 100_000;
const DISTRACTOR_ID_OFFSET: u64 = 200_000;

/// An in-memory corpus: `(identity, image)` lists per population.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub auxiliary: Vec<(u32, Image<f32>)>,
    pub native: Vec<(u32, Image<f32>)>,
    pub distractors: Vec<Image<f32>>,
}

pub fn native_image_count(seed: u64, identity: u64, max: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ identity.wrapping_mul(0x2545_f491_4f6c_dd1d));
    rng.gen_range(2..=max.max(2))
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("corpus image size must be positive".into()));
    }
    let mut auxiliary = Vec::new();
    for id in 0..spec.auxiliary_identities as u64 {
        for img in render_identity(spec.seed, id, spec.auxiliary_images, spec.height, spec.width) {
            auxiliary.push((id as u32, img));
        }
    }
    let mut native = Vec::new();
    for k in 0..spec.native_identities as u64 {
        let id = NATIVE_ID_OFFSET + k;
        let n = native_image_count(spec.seed, id, spec.native_images_max);
        for img in render_identity(spec.seed, id, n, spec.height, spec.width) {
            native.push((id as u32, img));
        }
    }
    let distractors = (0..spec.distractors as u64)
        .flat_map(|k| render_identity(spec.seed, DISTRACTOR_ID_OFFSET + k, 1, spec.height, spec.width))
        .collect();
    Ok(Corpus {
        auxiliary,
        native,
        distractors,
    })
}

/// Writes `auxiliary/<id>/<k>.png`, `native/<id>/<k>.png` and
/// `distractors/<k>.png` under `root`.
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    let mut counter = std::collections::BTreeMap::<(&str, u32), usize>::new();
    for (domain, items) in [("auxiliary", &corpus.auxiliary), ("native", &corpus.native)] {
        for (id, img) in items {
            let k = counter.entry((domain, *id)).or_default();
            save_image(img, &root.join(domain).join(id.to_string()).join(format!("{k:03}.png")))?;
            *k += 1;
        }
    }
    for (k, img) in corpus.distractors.iter().enumerate() {
        save_image(img, &root.join("distractors").join(format!("{k:05}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let a = render_identity(3, 7, 3, 32, 32);
        let b = render_identity(3, 7, 3, 32, 32);
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn identities_differ_more_than_their_images() {
        // central crop, away from the background
        let dist = |x: &Image<f32>, y: &Image<f32>| {
            let c = ndarray::s![.., 10..22, 10..22];
            (&x.slice(c) - &y.slice(c)).mapv(|v| v * v).sum()
        };
        let (mut within, mut between) = (0.0, 0.0);
        for id in 0..20u64 {
            let a = render_identity(0, id, 2, 32, 32);
            let b = render_identity(0, id + 50, 1, 32, 32);
            within += dist(&a[0], &a[1]);
            between += dist(&a[0], &b[0]);
        }
        assert!(between > within);
    }

    #[test]
    fn corpus_counts() {
        let spec = CorpusSpec {
            auxiliary_identities: 3,
            auxiliary_images: 2,
            native_identities: 4,
            native_images_max: 3,
            distractors: 5,
            height: 16,
            width: 16,
            seed: 1,
        };
        let c = generate(&spec).unwrap();
        assert_eq!(c.auxiliary.len(), 6);
        assert_eq!(c.distractors.len(), 5);
        assert!((8..=12).contains(&c.native.len()));
        assert!(c.native.iter().all(|(id, _)| *id as u64 >= NATIVE_ID_OFFSET));
    }
}
