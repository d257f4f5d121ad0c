//! Objectives, SGD, the two-stage schedule and the ablation variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{pre_upsample, LrHrPair};
use crate::error::{Error, Result};
use crate::fr::{update_centers, Branch};
use crate::image::Image;
use crate::model::{CenterTerm, CsriModel, ModelConfig, Trainable};
use crate::scalar::Scalar;

/// Weight of the pixel loss inside the joint objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sr: f64,
}

impl LossWeights {
    pub const DEFAULT_LAMBDA_SR: f64 = 0.003;

    pub fn new(lambda_sr: f64) -> Result<Self> {
        if !(lambda_sr >= 0.0) || !lambda_sr.is_finite() {
            return Err(Error::Config(format!("lambda_sr must be finite and >= 0, got {lambda_sr}")));
        }
        Ok(LossWeights { lambda_sr })
    }

    /// Rescales a weight tuned for a summed pixel loss to the mean convention
    /// used by [`crate::sr::sr_loss`] on images of `elements` values.
    pub fn from_sum_convention(lambda_sum: f64, elements: usize) -> Result<Self> {
        Self::new(lambda_sum * elements as f64)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sr: Self::DEFAULT_LAMBDA_SR,
        }
    }
}

/// SR-FR joint objective: `l_fr_syn + lambda_sr * l_sr`.
pub fn joint_loss(l_fr_syn: f64, l_sr: f64, weights: &LossWeights) -> f64 {
    l_fr_syn + weights.lambda_sr * l_sr
}

/// Full objective: `(l_fr_syn + l_fr_nat) + lambda_sr * l_sr`.
pub fn csri_loss(l_fr_syn: f64, l_fr_nat: f64, l_sr: f64, weights: &LossWeights) -> f64 {
    (l_fr_syn + l_fr_nat) + weights.lambda_sr * l_sr
}

/// All loss components of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_sr: f64,
    pub l_fr_syn: f64,
    pub l_fr_nat: f64,
    pub l_sr_fr: f64,
    pub l_csrl: f64,
    pub lr: f64,
    pub lambda_sr: f64,
}

impl LossBreakdown {
    pub fn compose(step: u64, l_sr: f64, l_fr_syn: f64, l_fr_nat: f64, weights: &LossWeights, lr: f64) -> Self {
        LossBreakdown {
            step,
            l_sr,
            l_fr_syn,
            l_fr_nat,
            l_sr_fr: joint_loss(l_fr_syn, l_sr, weights),
            l_csrl: csri_loss(l_fr_syn, l_fr_nat, l_sr, weights),
            lr,
            lambda_sr: weights.lambda_sr,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_sr, self.l_fr_syn, self.l_fr_nat, self.l_sr_fr, self.l_csrl]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Relative deviation of the two composition identities; both must be ~0.
    pub fn composition_error(&self) -> (f64, f64) {
        let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        (
            rel(self.l_sr_fr, self.l_fr_syn + self.lambda_sr * self.l_sr),
            rel(self.l_csrl, (self.l_fr_syn + self.l_fr_nat) + self.lambda_sr * self.l_sr),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Recognition directly on upsampled LR faces.
    FrOnly,
    /// SR trained on pixels alone, then FR on its frozen outputs.
    IndependentSrFr,
    /// SR and FR trained together, then FR fine-tuned on native faces.
    JointSrFr,
    /// Joint training followed by joint synthetic + native training.
    Csri,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FrOnly, Variant::IndependentSrFr, Variant::JointSrFr, Variant::Csri];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FrOnly => "fr_only",
            Variant::IndependentSrFr => "independent_sr_fr",
            Variant::JointSrFr => "joint_sr_fr",
            Variant::Csri => "csri",
        }
    }

    pub fn has_sr(self) -> bool {
        self != Variant::FrOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip over the trainable blocks.
    pub clip_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub lr: f64,
    /// Multiply the learning rate by `lr_decay` every this many steps (0 = never).
    pub lr_decay_every: usize,
    pub lr_decay: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 200,
            lr: 0.01,
            lr_decay_every: 0,
            lr_decay: 0.1,
        }
    }
}

impl StageConfig {
    pub fn lr_at(&self, i: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay.powi((i / self.lr_decay_every) as i32)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterLossConfig {
    pub weight: f64,
    /// Center learning rate of the running-mean update.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub lambda_sr: f64,
    pub batch_aux: usize,
    pub batch_native: usize,
    pub optim: OptimConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Off unless configured.
    pub center_loss: Option<CenterLossConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Csri,
            seed: 0,
            lambda_sr: LossWeights::DEFAULT_LAMBDA_SR,
            batch_aux: 16,
            batch_native: 16,
            optim: OptimConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            center_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.lambda_sr)?;
        if self.batch_aux == 0 || self.batch_native == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.stage1.steps == 0 || self.stage2.steps == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sr: self.lambda_sr,
        }
    }
}

/// Labeled auxiliary pairs, labels already mapped to head classes.
#[derive(Debug, Clone)]
pub struct AuxData<F> {
    pub pairs: Vec<LrHrPair<F>>,
    pub classes: Vec<usize>,
}

/// Labeled native faces, pre-upsampled to the network input size.
#[derive(Debug, Clone)]
pub struct NativeData<F> {
    pub images: Vec<Image<F>>,
    pub classes: Vec<usize>,
}

/// Maps sparse identity labels to dense head classes (ascending label order).
pub fn class_map(labels: impl IntoIterator<Item = u32>) -> std::collections::BTreeMap<u32, usize> {
    let set: std::collections::BTreeSet<u32> = labels.into_iter().collect();
    set.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

impl<F: Scalar> AuxData<F> {
    pub fn new(pairs: Vec<LrHrPair<F>>) -> Self {
        let map = class_map(pairs.iter().map(|p| p.identity));
        let classes = pairs.iter().map(|p| map[&p.identity]).collect();
        AuxData { pairs, classes }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.iter().max().map_or(0, |m| m + 1)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl<F: Scalar> NativeData<F> {
    /// Pre-upsamples LR faces to `height × width`; labels become dense classes.
    pub fn from_lr(images: &[Image<F>], labels: &[u32], height: usize, width: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidInput("one label per native image required".into()));
        }
        let map = class_map(labels.iter().copied());
        Ok(NativeData {
            images: images
                .iter()
                .map(|im| pre_upsample(im, height, width))
                .collect::<Result<_>>()?,
            classes: labels.iter().map(|l| map[l]).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.iter().max().map_or(0, |m| m + 1)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centers<F> {
    pub synthetic: Array2<F>,
    pub native: Array2<F>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub model: CsriModel<F>,
    /// Momentum buffers, one per parameter.
    pub velocity: CsriModel<F>,
    pub centers: Option<Centers<F>>,
    /// Global optimization step, continued across stages.
    pub step: u64,
    pub seed: u64,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(config: ModelConfig, seed: u64, with_centers: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CsriModel::new(config, &mut rng)?;
        let velocity = model.zeros_like();
        let centers = with_centers.then(|| {
            let d = model.config.fr.embedding_dim;
            Centers {
                synthetic: Array2::zeros((model.config.fr.synthetic_classes, d)),
                native: Array2::zeros((model.config.fr.native_classes, d)),
            }
        });
        Ok(TrainState {
            model,
            velocity,
            centers,
            step: 0,
            seed,
        })
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e9b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) const STREAM_AUX: u64 = 1;
pub(crate) const STREAM_NATIVE: u64 = 2;

/// Epoch-shuffled batches whose content is a pure function of
/// `(seed, stream, step)`, so a run split across stages or checkpoints draws
/// exactly the batches an uninterrupted run would.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    seed: u64,
    stream: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64, stream: u64) -> Self {
        BatchSampler {
            len,
            batch,
            seed,
            stream,
            epoch: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed ^ mix(self.stream)) ^ epoch));
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    pub fn batch(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch as u64;
        let len = self.len as u64;
        (0..self.batch as u64)
            .map(|k| {
                let pos = start + k;
                self.permutation(pos / len)[(pos % len) as usize]
            })
            .collect()
    }
}

/// Which terms a training phase optimizes.
#[derive(Debug, Clone, Copy)]
struct Phase<'s> {
    stage: &'s StageConfig,
    aux_ce: bool,
    /// Weight on the pixel loss; `None` when the pixel loss is not optimized.
    aux_pixel: Option<f64>,
    native: bool,
    trainable: Trainable,
}

fn global_norm<F: Scalar>(grad: &CsriModel<F>, trainable: Trainable) -> f64 {
    grad.blocks()
        .into_iter()
        .filter(|(name, _)| trainable.block(name))
        .flat_map(|(_, ts)| ts.into_iter())
        .map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Momentum SGD with L2 weight decay on every trainable tensor.
fn sgd_step<F: Scalar>(state: &mut TrainState<F>, grad: &CsriModel<F>, lr: f64, optim: &OptimConfig, trainable: Trainable) {
    let clip = match optim.clip_grad_norm {
        Some(max) => {
            let norm = global_norm(grad, trainable);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let (lr, mu, wd, clip) = (F::from_f64_lossy(lr), F::from_f64_lossy(optim.momentum), F::from_f64_lossy(optim.weight_decay), F::from_f64_lossy(clip));
    let params = state.model.blocks_mut();
    let vel = state.velocity.blocks_mut();
    let grads = grad.blocks();
    for (((name, ps), (_, vs)), (_, gs)) in params.into_iter().zip(vel).zip(grads) {
        if !trainable.block(name) {
            continue;
        }
        for (((_, mut p), (_, mut v)), (_, g)) in ps.into_iter().zip(vs).zip(gs) {
            ndarray::Zip::from(&mut p).and(&mut v).and(&g).for_each(|w, m, &d| {
                let d = d * clip + wd * *w;
                *m = mu * *m + d;
                *w = *w - lr * *m;
            });
        }
    }
}

fn run_phase<F: Scalar>(
    state: &mut TrainState<F>,
    aux: Option<&AuxData<F>>,
    native: Option<&NativeData<F>>,
    cfg: &TrainConfig,
    phase: Phase<'_>,
    log: &mut Vec<LossBreakdown>,
) -> Result<()> {
    let weights = cfg.weights();
    let mut aux_sampler = aux.map(|a| BatchSampler::new(a.len(), cfg.batch_aux, state.seed, STREAM_AUX));
    let mut nat_sampler = native
        .filter(|_| phase.native)
        .map(|n| BatchSampler::new(n.len(), cfg.batch_native, state.seed, STREAM_NATIVE));
    let center_cfg = cfg.center_loss.as_ref();

    for i in 0..phase.stage.steps {
        let lr = phase.stage.lr_at(i);
        let step = state.step;
        let mut grad = state.model.zeros_like();
        let (mut l_sr, mut l_fr_syn, mut l_fr_nat) = (0.0, 0.0, 0.0);
        let mut center_updates: Vec<(Branch, Vec<Array1<F>>, Vec<usize>)> = Vec::new();

        if let (Some(data), Some(sampler)) = (aux, aux_sampler.as_mut()) {
            let idx = sampler.batch(step);
            let b = idx.len() as f64;
            if !phase.aux_ce {
                for &k in &idx {
                    let scale = F::from_f64_lossy(phase.aux_pixel.unwrap_or(1.0) / b);
                    l_sr += state.model.accumulate_sr_only(&data.pairs[k], scale, &mut grad)? / b;
                }
            } else {
                let ce_scale = F::from_f64_lossy(1.0 / b);
                let pixel = phase.aux_pixel.filter(|_| state.model.sr.is_some());
                let term = match (center_cfg, &state.centers) {
                    (Some(c), Some(centers)) => Some(CenterTerm {
                        centers: &centers.synthetic,
                        scale: F::from_f64_lossy(c.weight / b),
                    }),
                    _ => None,
                };
                let (mut embs, mut labels) = (Vec::new(), Vec::new());
                for &k in &idx {
                    let pair = &data.pairs[k];
                    let class = data.classes[k];
                    let hr = pixel.map(|w| (&pair.target_hr, F::from_f64_lossy(w / b)));
                    let (loss, emb) = state.model.accumulate(&pair.input_lr, class, Branch::Synthetic, ce_scale, hr, term.as_ref(), phase.trainable, &mut grad)?;
                    l_fr_syn += loss.ce / b;
                    l_sr += loss.sr_mse / b;
                    if let Some(c) = center_cfg.filter(|_| term.is_some()) {
                        l_fr_syn += c.weight * loss.center / b;
                        embs.push(emb);
                        labels.push(class);
                    }
                }
                if term.is_some() {
                    center_updates.push((Branch::Synthetic, embs, labels));
                }
            }
        }

        if let (Some(data), Some(sampler)) = (native, nat_sampler.as_mut()) {
            let idx = sampler.batch(step);
            let b = idx.len() as f64;
            let ce_scale = F::from_f64_lossy(1.0 / b);
            let term = match (center_cfg, &state.centers) {
                (Some(c), Some(centers)) => Some(CenterTerm {
                    centers: &centers.native,
                    scale: F::from_f64_lossy(c.weight / b),
                }),
                _ => None,
            };
            let (mut embs, mut labels) = (Vec::new(), Vec::new());
            for &k in &idx {
                let class = data.classes[k];
                let (loss, emb) = state.model.accumulate(&data.images[k], class, Branch::Native, ce_scale, None, term.as_ref(), phase.trainable, &mut grad)?;
                l_fr_nat += loss.ce / b;
                if let Some(c) = center_cfg.filter(|_| term.is_some()) {
                    l_fr_nat += c.weight * loss.center / b;
                    embs.push(emb);
                    labels.push(class);
                }
            }
            if term.is_some() {
                center_updates.push((Branch::Native, embs, labels));
            }
        }

        let breakdown = LossBreakdown::compose(step, l_sr, l_fr_syn, l_fr_nat, &weights, lr);
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                step,
                losses: format!(
                    "l_sr={} l_fr_syn={} l_fr_nat={} l_sr_fr={} l_csrl={}",
                    breakdown.l_sr, breakdown.l_fr_syn, breakdown.l_fr_nat, breakdown.l_sr_fr, breakdown.l_csrl
                ),
            });
        }
        sgd_step(state, &grad, lr, &cfg.optim, phase.trainable);
        if let (Some(c), Some(centers)) = (center_cfg, state.centers.as_mut()) {
            let alpha = F::from_f64_lossy(c.alpha);
            for (branch, embs, labels) in center_updates {
                let target = match branch {
                    Branch::Synthetic => &mut centers.synthetic,
                    Branch::Native => &mut centers.native,
                };
                update_centers(target, &embs, &labels, alpha)?;
            }
        }
        state.step += 1;
        log.push(breakdown);
    }
    Ok(())
}

fn check_aux<F: Scalar>(state: &TrainState<F>, aux: &AuxData<F>) -> Result<()> {
    if aux.is_empty() {
        return Err(Error::InvalidInput("auxiliary set is empty".into()));
    }
    let n = state.model.config.fr.synthetic_classes;
    if aux.num_classes() > n {
        return Err(Error::InvalidInput(format!(
            "auxiliary labels span {} classes but the synthetic head has {n}",
            aux.num_classes()
        )));
    }
    Ok(())
}

fn check_native<F: Scalar>(state: &TrainState<F>, native: &NativeData<F>) -> Result<()> {
    if native.is_empty() {
        return Err(Error::InvalidInput("native set is empty".into()));
    }
    let n = state.model.config.fr.native_classes;
    if let Some(c) = native.classes.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidInput(format!(
            "native label {c} out of range for the {n}-class native head"
        )));
    }
    Ok(())
}

/// Pre-trains the synthetic branch on auxiliary pairs (joint objective).
pub fn train_stage1<F: Scalar>(state: &mut TrainState<F>, aux: &AuxData<F>, cfg: &TrainConfig, log: &mut Vec<LossBreakdown>) -> Result<()> {
    cfg.validate()?;
    check_aux(state, aux)?;
    let phase = Phase {
        stage: &cfg.stage1,
        aux_ce: true,
        aux_pixel: Some(cfg.lambda_sr),
        native: false,
        trainable: Trainable {
            head_native: false,
            ..Trainable::ALL
        },
    };
    run_phase(state, Some(aux), None, cfg, phase, log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage2Options {
    /// Include the native identity term; without it the native head is frozen
    /// and no native batches are drawn.
    pub native_term: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options { native_term: true }
    }
}

/// Trains the whole network on mixed auxiliary + native batches (full objective).
pub fn train_stage2<F: Scalar>(
    state: &mut TrainState<F>,
    aux: &AuxData<F>,
    native: &NativeData<F>,
    cfg: &TrainConfig,
    opts: Stage2Options,
    log: &mut Vec<LossBreakdown>,
) -> Result<()> {
    cfg.validate()?;
    check_aux(state, aux)?;
    if opts.native_term {
        check_native(state, native)?;
    }
    let phase = Phase {
        stage: &cfg.stage2,
        aux_ce: true,
        aux_pixel: Some(cfg.lambda_sr),
        native: opts.native_term,
        trainable: Trainable {
            head_native: opts.native_term,
            ..Trainable::ALL
        },
    };
    run_phase(state, Some(aux), Some(native), cfg, phase, log)
}

/// Runs `f` on a model whose SR has been replaced by its precomputed outputs.
///
/// The SR block is detached from both the model and the momentum buffers for
/// the duration, so it cannot change.
fn with_frozen_sr<F: Scalar, T>(
    state: &mut TrainState<F>,
    aux: Option<&AuxData<F>>,
    native: Option<&NativeData<F>>,
    f: impl FnOnce(&mut TrainState<F>, Option<&AuxData<F>>, Option<&NativeData<F>>) -> Result<T>,
) -> Result<T> {
    let map_aux = |a: &AuxData<F>| -> Result<AuxData<F>> {
        Ok(AuxData {
            pairs: a
                .pairs
                .iter()
                .map(|p| {
                    Ok(LrHrPair {
                        input_lr: state.model.super_resolve(&p.input_lr)?,
                        target_hr: p.target_hr.clone(),
                        identity: p.identity,
                    })
                })
                .collect::<Result<_>>()?,
            classes: a.classes.clone(),
        })
    };
    let aux_sr = aux.map(map_aux).transpose()?;
    let native_sr = native
        .map(|n| -> Result<NativeData<F>> {
            Ok(NativeData {
                images: n.images.iter().map(|x| state.model.super_resolve(x)).collect::<Result<_>>()?,
                classes: n.classes.clone(),
            })
        })
        .transpose()?;
    let sr = state.model.sr.take();
    let vel = state.velocity.sr.take();
    let sr_cfg = state.model.config.sr.take();
    let vel_cfg = state.velocity.config.sr.take();
    let out = f(state, aux_sr.as_ref(), native_sr.as_ref());
    state.model.sr = sr;
    state.velocity.sr = vel;
    state.model.config.sr = sr_cfg;
    state.velocity.config.sr = vel_cfg;
    out
}

fn fr_phase<F: Scalar>(
    state: &mut TrainState<F>,
    data: FrData<'_, F>,
    stage: &StageConfig,
    cfg: &TrainConfig,
    log: &mut Vec<LossBreakdown>,
) -> Result<()> {
    match data {
        FrData::Aux(aux) => {
            check_aux(state, aux)?;
            let phase = Phase {
                stage,
                aux_ce: true,
                aux_pixel: None,
                native: false,
                trainable: Trainable {
                    sr: false,
                    trunk: true,
                    head_synthetic: true,
                    head_native: false,
                },
            };
            run_phase(state, Some(aux), None, cfg, phase, log)
        }
        FrData::Native(native) => {
            check_native(state, native)?;
            let phase = Phase {
                stage,
                aux_ce: false,
                aux_pixel: None,
                native: true,
                trainable: Trainable {
                    sr: false,
                    trunk: true,
                    head_synthetic: false,
                    head_native: true,
                },
            };
            run_phase(state, None, Some(native), cfg, phase, log)
        }
    }
}

#[derive(Clone, Copy)]
enum FrData<'a, F> {
    Aux(&'a AuxData<F>),
    Native(&'a NativeData<F>),
}

/// Stage-1 snapshot and final state of one variant's training schedule.
#[derive(Debug, Clone)]
pub struct VariantRun<F> {
    pub variant: Variant,
    pub stage1: TrainState<F>,
    pub last: TrainState<F>,
    pub log: Vec<LossBreakdown>,
}

/// Model configuration for a variant: the recognition-only baseline drops SR.
pub fn variant_model_config(variant: Variant, base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        sr: if variant.has_sr() { base.sr.clone() } else { None },
        fr: base.fr.clone(),
    }
}

/// Initial state for a variant under `cfg.seed`.
pub fn initial_state<F: Scalar>(variant: Variant, base: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState<F>> {
    let mc = variant_model_config(variant, base);
    if variant.has_sr() && mc.sr.is_none() {
        return Err(Error::Config(format!("variant {variant} needs an SR component")));
    }
    TrainState::new(mc, cfg.seed, cfg.center_loss.is_some())
}

/// The second half of a schedule, starting from its stage-1 state.
pub fn finish_variant<F: Scalar>(
    variant: Variant,
    stage1: &TrainState<F>,
    aux: &AuxData<F>,
    native: &NativeData<F>,
    cfg: &TrainConfig,
    log: &mut Vec<LossBreakdown>,
) -> Result<TrainState<F>> {
    let mut state = stage1.clone();
    match variant {
        Variant::Csri => train_stage2(&mut state, aux, native, cfg, Stage2Options::default(), log)?,
        Variant::FrOnly => fr_phase(&mut state, FrData::Native(native), &cfg.stage2, cfg, log)?,
        Variant::JointSrFr | Variant::IndependentSrFr => with_frozen_sr(&mut state, None, Some(native), |s, _, n| {
            fr_phase(s, FrData::Native(n.expect("mapped")), &cfg.stage2, cfg, log)
        })?,
    }
    Ok(state)
}

/// The first half of a schedule.
///
/// * `fr_only`: FR on upsampled auxiliary LR faces.
/// * `independent_sr_fr`: SR on pixels alone, then FR on its frozen outputs.
/// * `joint_sr_fr`, `csri`: the joint objective (identical for both).
pub fn start_variant<F: Scalar>(
    variant: Variant,
    base: &ModelConfig,
    aux: &AuxData<F>,
    cfg: &TrainConfig,
    log: &mut Vec<LossBreakdown>,
) -> Result<TrainState<F>> {
    cfg.validate()?;
    let mut state = initial_state(variant, base, cfg)?;
    match variant {
        Variant::JointSrFr | Variant::Csri => train_stage1(&mut state, aux, cfg, log)?,
        Variant::FrOnly => fr_phase(&mut state, FrData::Aux(aux), &cfg.stage1, cfg, log)?,
        Variant::IndependentSrFr => {
            check_aux(&state, aux)?;
            let phase = Phase {
                stage: &cfg.stage1,
                aux_ce: false,
                aux_pixel: Some(cfg.lambda_sr),
                native: false,
                trainable: Trainable {
                    sr: true,
                    trunk: false,
                    head_synthetic: false,
                    head_native: false,
                },
            };
            run_phase(&mut state, Some(aux), None, cfg, phase, log)?;
            with_frozen_sr(&mut state, Some(aux), None, |s, a, _| {
                fr_phase(s, FrData::Aux(a.expect("mapped")), &cfg.stage1, cfg, log)
            })?;
        }
    }
    Ok(state)
}

/// Full training schedule of one variant.
pub fn train_variant<F: Scalar>(
    variant: Variant,
    base: &ModelConfig,
    aux: &AuxData<F>,
    native: &NativeData<F>,
    cfg: &TrainConfig,
) -> Result<VariantRun<F>> {
    let mut log = Vec::new();
    let stage1 = start_variant(variant, base, aux, cfg, &mut log)?;
    let last = finish_variant(variant, &stage1, aux, native, cfg, &mut log)?;
    Ok(VariantRun {
        variant,
        stage1,
        last,
        log,
    })
}

/// Baseline schedules; `csri` is not a baseline.
pub fn train_baseline<F: Scalar>(
    variant: Variant,
    base: &ModelConfig,
    aux: &AuxData<F>,
    native: &NativeData<F>,
    cfg: &TrainConfig,
) -> Result<VariantRun<F>> {
    if variant == Variant::Csri {
        return Err(Error::InvalidInput("csri is not a baseline variant".into()));
    }
    train_variant(variant, base, aux, native, cfg)
}

/// Deployment features through the native path: pre-upsample, SR, trunk.
pub fn extract_features<F: Scalar>(images: &[Image<F>], model: &CsriModel<F>) -> Result<Vec<Array1<F>>> {
    let (c, h, w) = model.input_dim();
    images
        .iter()
        .map(|im| {
            if im.dim().0 != c {
                return Err(Error::Shape(format!(
                    "image has {} channels, network expects {c}",
                    im.dim().0
                )));
            }
            let x = pre_upsample(im, h, w)?;
            model.embed(&x)
        })
        .collect()
}

pub fn write_loss_csv(log: &[LossBreakdown], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
