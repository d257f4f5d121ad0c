use csri::degrade::{make_lr_hr_pair, DegradationConfig};
use csri::error::Error;
use csri::fr::{Branch, FrConfig};
use csri::image::Image;
use csri::model::{ModelConfig, Trainable};
use csri::sr::SrConfig;
use csri::synth::render_identity;
use csri::trainer::*;

const HW: usize = 16;

fn faces(ids: u64, per: usize, offset: u64) -> Vec<(u32, Image<f64>)> {
    (0..ids)
        .flat_map(|id| {
            render_identity(3, offset + id, per, HW, HW)
                .into_iter()
                .map(move |im| (id as u32, im.mapv(f64::from)))
        })
        .collect()
}

fn aux() -> AuxData<f64> {
    let deg = DegradationConfig {
        lr_height: 8,
        lr_width: 8,
        blur_sigma: 0.0,
        noise_sigma: 0.0,
        seed: 0,
    };
    AuxData::new(
        faces(3, 4, 0)
            .iter()
            .map(|(id, hr)| make_lr_hr_pair(hr, &deg, *id).unwrap())
            .collect(),
    )
}

fn native() -> NativeData<f64> {
    let f = faces(2, 3, 500);
    let lr: Vec<Image<f64>> = f
        .iter()
        .map(|(_, im)| csri::resample::resize_clipped(im, 8, 8).unwrap())
        .collect();
    let labels: Vec<u32> = f.iter().map(|(l, _)| *l).collect();
    NativeData::from_lr(&lr, &labels, HW, HW).unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        sr: Some(SrConfig {
            depth: 2,
            channels: 4,
            ..Default::default()
        }),
        fr: FrConfig {
            input_height: HW,
            input_width: HW,
            trunk_channels: vec![4, 8],
            embedding_dim: 8,
            synthetic_classes: 3,
            native_classes: 2,
            ..Default::default()
        },
    }
}

fn train_config(steps: usize) -> TrainConfig {
    let stage = StageConfig {
        steps,
        lr: 0.05,
        ..Default::default()
    };
    TrainConfig {
        lambda_sr: 1.0,
        batch_aux: 4,
        batch_native: 3,
        stage1: stage.clone(),
        stage2: stage,
        ..Default::default()
    }
}

fn fresh(seed: u64) -> TrainState<f64> {
    TrainState::new(model_config(), seed, false).unwrap()
}

fn sr_params(s: &TrainState<f64>) -> Vec<f64> {
    s.model
        .blocks()
        .into_iter()
        .filter(|(n, _)| *n == "sr")
        .flat_map(|(_, ts)| ts.into_iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()))
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn stage1_reduces_the_joint_objective() {
    let (a, cfg) = (aux(), train_config(60));
    let mut s = fresh(0);
    let mut log = Vec::new();
    train_stage1(&mut s, &a, &cfg, &mut log).unwrap();
    assert_eq!(log.len(), 60);
    let early = mean(log[..10].iter().map(|b| b.l_sr_fr));
    let late = mean(log[50..].iter().map(|b| b.l_sr_fr));
    assert!(late < early, "{early} -> {late}");
    assert!(log.iter().all(|b| b.l_fr_nat == 0.0 && b.l_csrl == b.l_sr_fr));
}

#[test]
fn training_is_deterministic() {
    let (a, n, cfg) = (aux(), native(), train_config(8));
    let run = || {
        let mut s = fresh(4);
        let mut log = Vec::new();
        train_stage1(&mut s, &a, &cfg, &mut log).unwrap();
        train_stage2(&mut s, &a, &n, &cfg, Stage2Options::default(), &mut log).unwrap();
        (s, log)
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(s1, s2);
    assert_eq!(l1, l2);
    assert_ne!(fresh(4), fresh(5));
}

#[test]
fn identity_loss_alone_still_moves_the_sr_network() {
    let a = aux();
    let mut cfg = train_config(5);
    cfg.lambda_sr = 0.0;
    let mut s = fresh(1);
    let before = sr_params(&s);
    train_stage1(&mut s, &a, &cfg, &mut Vec::new()).unwrap();
    assert_ne!(before, sr_params(&s));
}

#[test]
fn stage2_without_native_term_continues_stage1() {
    let (a, n) = (aux(), native());
    let mut long = fresh(2);
    train_stage1(&mut long, &a, &train_config(12), &mut Vec::new()).unwrap();

    let mut split = fresh(2);
    let mut log = Vec::new();
    train_stage1(&mut split, &a, &train_config(7), &mut log).unwrap();
    let cfg = TrainConfig {
        stage2: StageConfig {
            steps: 5,
            ..train_config(0).stage2
        },
        ..train_config(7)
    };
    let off = Stage2Options { native_term: false };
    train_stage2(&mut split, &a, &n, &cfg, off, &mut log).unwrap();
    assert_eq!(long, split);
    // the full objective collapses to the joint one
    assert!(log.iter().all(|b| b.l_fr_nat == 0.0 && b.l_csrl == b.l_sr_fr));
}

/// Plain momentum SGD on the synthetic-branch cross-entropy.
fn reference_ce_trainer(state: &mut TrainState<f64>, a: &AuxData<f64>, cfg: &TrainConfig, steps: usize) {
    let trainable = Trainable {
        head_native: false,
        ..Trainable::ALL
    };
    let mut sampler = BatchSampler::new(a.len(), cfg.batch_aux, state.seed, 1);
    for _ in 0..steps {
        let idx = sampler.batch(state.step);
        let b = idx.len() as f64;
        let mut g = state.model.zeros_like();
        for &k in &idx {
            state
                .model
                .accumulate(&a.pairs[k].input_lr, a.classes[k], Branch::Synthetic, 1.0 / b, None, None, trainable, &mut g)
                .unwrap();
        }
        let (lr, mu, wd) = (cfg.stage2.lr, cfg.optim.momentum, cfg.optim.weight_decay);
        let grads = g.blocks();
        let vel = state.velocity.blocks_mut();
        let params = state.model.blocks_mut();
        for (((name, ps), (_, vs)), (_, gs)) in params.into_iter().zip(vel).zip(grads) {
            if name == "head.native" {
                continue;
            }
            for (((_, mut p), (_, mut v)), (_, g)) in ps.into_iter().zip(vs).zip(gs) {
                ndarray::Zip::from(&mut p).and(&mut v).and(&g).for_each(|w, m, &d| {
                    *m = mu * *m + d + wd * *w;
                    *w -= lr * *m;
                });
            }
        }
        state.step += 1;
    }
}

#[test]
fn stage2_reduces_to_cross_entropy_training() {
    let (a, n) = (aux(), native());
    let mut cfg = train_config(6);
    cfg.lambda_sr = 0.0;
    let mut s = fresh(3);
    let mut log = Vec::new();
    train_stage2(&mut s, &a, &n, &cfg, Stage2Options { native_term: false }, &mut log).unwrap();
    let mut r = fresh(3);
    reference_ce_trainer(&mut r, &a, &cfg, 6);
    for ((na, ta), (_, tb)) in s.model.blocks().into_iter().zip(r.model.blocks()) {
        for ((_, p), (_, q)) in ta.into_iter().zip(tb) {
            let diff = (&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "{na}: {diff}");
        }
    }
}

#[test]
fn stage2_trains_sr_from_native_faces() {
    let (a, n) = (aux(), native());
    let mut cfg = train_config(3);
    cfg.lambda_sr = 0.0;
    let start = fresh(6);
    let run = |opts| {
        let mut s = start.clone();
        train_stage2(&mut s, &a, &n, &cfg, opts, &mut Vec::new()).unwrap();
        s
    };
    let with = run(Stage2Options::default());
    let without = run(Stage2Options { native_term: false });
    assert_ne!(sr_params(&with), sr_params(&without));
}

#[test]
fn two_step_baselines_keep_sr_frozen_after_their_first_step() {
    let (a, n) = (aux(), native());
    let cfg = train_config(4);
    let base = model_config();
    for v in [Variant::IndependentSrFr, Variant::JointSrFr] {
        let run = train_baseline(v, &base, &a, &n, &cfg).unwrap();
        assert_eq!(sr_params(&run.stage1), sr_params(&run.last), "{v}");
        assert_ne!(run.stage1.model.fr.trunk, run.last.model.fr.trunk, "{v}");
        assert_eq!(run.log.len(), if v == Variant::IndependentSrFr { 12 } else { 8 });
    }
    let ind = train_baseline(Variant::IndependentSrFr, &base, &a, &n, &cfg).unwrap();
    // the SR step optimizes pixels only
    assert!(ind.log[..4].iter().all(|b| b.l_fr_syn == 0.0 && b.l_sr > 0.0));
    assert!(matches!(
        train_baseline(Variant::Csri, &base, &a, &n, &cfg),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn recognition_only_baseline_has_no_sr() {
    let run = train_variant(Variant::FrOnly, &model_config(), &aux(), &native(), &train_config(3)).unwrap();
    assert!(run.last.model.sr.is_none());
    assert!(run.log.iter().all(|b| b.l_sr == 0.0));
}

#[test]
fn joint_and_full_schedules_share_stage1() {
    let (a, n, cfg, base) = (aux(), native(), train_config(4), model_config());
    let j = train_variant(Variant::JointSrFr, &base, &a, &n, &cfg).unwrap();
    let c = train_variant(Variant::Csri, &base, &a, &n, &cfg).unwrap();
    assert_eq!(j.stage1, c.stage1);
    assert_ne!(sr_params(&c.stage1), sr_params(&c.last));
}

#[test]
fn bad_labels_and_values_are_rejected() {
    let (a, cfg) = (aux(), train_config(2));
    let mut n = native();
    n.classes[0] = 9;
    let mut s = fresh(0);
    let err = train_stage2(&mut s, &a, &n, &cfg, Stage2Options::default(), &mut Vec::new()).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)), "{err}");

    let mut a = aux();
    a.pairs[0].input_lr.fill(f64::NAN);
    let mut cfg = train_config(3);
    cfg.batch_aux = a.len();
    let err = train_stage1(&mut fresh(0), &a, &cfg, &mut Vec::new()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");

    let mut cfg = train_config(2);
    cfg.lambda_sr = -1.0;
    assert!(matches!(train_stage1(&mut fresh(0), &aux(), &cfg, &mut Vec::new()), Err(Error::Config(_))));
}

#[test]
fn loss_log_round_trips_through_csv() {
    let mut log = Vec::new();
    train_stage1(&mut fresh(0), &aux(), &train_config(5), &mut log).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("losses.csv");
    write_loss_csv(&log, &path).unwrap();
    let back = read_loss_csv(&path).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in log.iter().zip(&back) {
        assert_eq!(a.step, b.step);
        let (e3, e4) = b.composition_error();
        assert!(e3 < 1e-12 && e4 < 1e-12);
    }
}
