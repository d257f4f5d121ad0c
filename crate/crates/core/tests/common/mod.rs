#![allow(dead_code)]

use csri::fr::{Branch, FrConfig};
use csri::image::Image;
use csri::model::{CsriModel, ModelConfig, Trainable};
use csri::sr::{mse, SrConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAMBDA: f64 = 0.003;

/// 8×8 input, 2-layer SR, one conv block + fully connected trunk, 3-class heads.
pub fn toy_model(seed: u64) -> CsriModel<f64> {
    let cfg = ModelConfig {
        sr: Some(SrConfig {
            depth: 2,
            channels: 3,
            output_init_std: 0.3,
            ..Default::default()
        }),
        fr: FrConfig {
            input_height: 8,
            input_width: 8,
            trunk_channels: vec![3],
            embedding_dim: 5,
            synthetic_classes: 3,
            native_classes: 3,
            ..Default::default()
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = CsriModel::new(cfg, &mut rng).unwrap();
    // non-zero biases so every parameter carries a generic gradient
    for (_, ts) in m.blocks_mut() {
        for (name, mut t) in ts {
            if name.ends_with("bias") {
                t.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
            }
        }
    }
    m
}

pub fn toy_image(rng: &mut ChaCha8Rng) -> Image<f64> {
    Array3::from_shape_simple_fn((1, 8, 8), || rng.gen_range(0.0..1.0))
}

/// One auxiliary pair and one native face.
pub struct ToyBatch {
    pub aux_lr: Image<f64>,
    pub aux_hr: Image<f64>,
    pub aux_class: usize,
    pub native: Image<f64>,
    pub native_class: usize,
}

pub fn toy_batch(seed: u64) -> ToyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ToyBatch {
        aux_lr: toy_image(&mut rng),
        aux_hr: toy_image(&mut rng),
        aux_class: 1,
        native: toy_image(&mut rng),
        native_class: 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Sr,
    FrSyn,
    FrNat,
    Csrl,
}

/// Forward-only value of a loss term.
pub fn loss(m: &CsriModel<f64>, b: &ToyBatch, term: Term) -> f64 {
    let sr = || mse(&m.super_resolve(&b.aux_lr).unwrap(), &b.aux_hr).unwrap();
    let syn = || m.sample_loss(&b.aux_lr, b.aux_class, Branch::Synthetic, None).unwrap().ce;
    let nat = || m.sample_loss(&b.native, b.native_class, Branch::Native, None).unwrap().ce;
    match term {
        Term::Sr => sr(),
        Term::FrSyn => syn(),
        Term::FrNat => nat(),
        Term::Csrl => (syn() + nat()) + LAMBDA * sr(),
    }
}

/// Gradient of a loss term through the training code path.
pub fn analytic(m: &CsriModel<f64>, b: &ToyBatch, term: Term) -> CsriModel<f64> {
    let mut g = m.zeros_like();
    let all = Trainable::ALL;
    match term {
        Term::Sr => {
            let pair = csri::degrade::LrHrPair {
                input_lr: b.aux_lr.clone(),
                target_hr: b.aux_hr.clone(),
                identity: 0,
            };
            m.accumulate_sr_only(&pair, 1.0, &mut g).unwrap();
        }
        Term::FrSyn => {
            m.accumulate(&b.aux_lr, b.aux_class, Branch::Synthetic, 1.0, None, None, all, &mut g).unwrap();
        }
        Term::FrNat => {
            m.accumulate(&b.native, b.native_class, Branch::Native, 1.0, None, None, all, &mut g).unwrap();
        }
        Term::Csrl => {
            m.accumulate(&b.aux_lr, b.aux_class, Branch::Synthetic, 1.0, Some((&b.aux_hr, LAMBDA)), None, all, &mut g)
                .unwrap();
            m.accumulate(&b.native, b.native_class, Branch::Native, 1.0, None, None, all, &mut g).unwrap();
        }
    }
    g
}

/// Flat `(block.tensor[index], value)` list of every parameter.
pub fn flat(m: &CsriModel<f64>) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (block, ts) in m.blocks() {
        for (name, t) in ts {
            for (i, v) in t.iter().enumerate() {
                out.push((format!("{block}.{name}[{i}]"), *v));
            }
        }
    }
    out
}

fn nudge(m: &mut CsriModel<f64>, index: usize, delta: f64) {
    let mut k = 0;
    for (_, ts) in m.blocks_mut() {
        for (_, mut t) in ts {
            for v in t.iter_mut() {
                if k == index {
                    *v += delta;
                    return;
                }
                k += 1;
            }
        }
    }
    panic!("parameter {index} out of range");
}

/// Central differences for every parameter.
pub fn numeric(m: &CsriModel<f64>, b: &ToyBatch, term: Term, h: f64) -> Vec<f64> {
    let n = flat(m).len();
    (0..n)
        .map(|i| {
            let mut p = m.clone();
            nudge(&mut p, i, h);
            let up = loss(&p, b, term);
            nudge(&mut p, i, -2.0 * h);
            let down = loss(&p, b, term);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|)`, with absolute error used where
/// both are below `floor`.
pub fn compare(analytic: &CsriModel<f64>, numeric: &[f64], floor: f64) -> GradCheck {
    let a = flat(analytic);
    assert_eq!(a.len(), numeric.len());
    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: a.len(),
    };
    for ((name, x), &y) in a.iter().zip(numeric) {
        let scale = x.abs().max(y.abs());
        let err = if scale < floor { (x - y).abs() } else { (x - y).abs() / scale };
        if err > out.max_rel {
            out.max_rel = err;
            out.worst = name.clone();
        }
    }
    out
}

/// Largest absolute gradient entry within a block.
pub fn block_max(g: &CsriModel<f64>, block: &str) -> f64 {
    g.blocks()
        .into_iter()
        .filter(|(n, _)| *n == block)
        .flat_map(|(_, ts)| ts.into_iter())
        .flat_map(|(_, t)| t.iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}
