//! The two-branch network: one SR component and one FR trunk shared by the
//! synthetic and native branches, each branch ending in its own head.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::LrHrPair;
use crate::error::{Error, Result};
use crate::fr::{ce_loss_grad, Branch, FrConfig, FrNet};
use crate::image::Image;
use crate::nn::Params;
use crate::scalar::Scalar;
use crate::sr::{mse, mse_grad, SrConfig, SrNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Absent for the recognition-only baseline.
    pub sr: Option<SrConfig>,
    pub fr: FrConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fr.validate()?;
        if let Some(sr) = &self.sr {
            sr.validate()?;
            if sr.image_channels != self.fr.input_channels {
                return Err(Error::Config(format!(
                    "sr produces {} channels but fr expects {}",
                    sr.image_channels, self.fr.input_channels
                )));
            }
        }
        Ok(())
    }
}

/// Parameter groups; used to freeze parts of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub sr: bool,
    pub trunk: bool,
    pub head_synthetic: bool,
    pub head_native: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        sr: true,
        trunk: true,
        head_synthetic: true,
        head_native: true,
    };

    pub fn block(&self, name: &str) -> bool {
        match name {
            BLOCK_SR => self.sr,
            BLOCK_TRUNK => self.trunk,
            BLOCK_HEAD_SYNTHETIC => self.head_synthetic,
            BLOCK_HEAD_NATIVE => self.head_native,
            _ => false,
        }
    }
}

pub const BLOCK_SR: &str = "sr";
pub const BLOCK_TRUNK: &str = "trunk";
pub const BLOCK_HEAD_SYNTHETIC: &str = "head.synthetic";
pub const BLOCK_HEAD_NATIVE: &str = "head.native";

#[derive(Debug, Clone, PartialEq)]
pub struct CsriModel<F> {
    pub config: ModelConfig,
    pub sr: Option<SrNet<F>>,
    pub fr: FrNet<F>,
}

pub type Block<'a, T> = (&'static str, Vec<(String, T)>);

/// Per-sample loss values produced while accumulating gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub ce: f64,
    pub sr_mse: f64,
    pub center: f64,
}

/// Optional center-loss term applied to a branch's embeddings.
pub struct CenterTerm<'a, F> {
    pub centers: &'a Array2<F>,
    /// Already divided by the batch size.
    pub scale: F,
}

impl<F: Scalar> CsriModel<F> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        // FR first so every variant sharing a seed starts from the same trunk.
        let fr = FrNet::new(&config.fr, rng)?;
        let sr = config.sr.as_ref().map(|c| SrNet::new(c, rng)).transpose()?;
        Ok(CsriModel { config, sr, fr })
    }

    pub fn zeros_like(&self) -> Self {
        CsriModel {
            config: self.config.clone(),
            sr: self.sr.as_ref().map(SrNet::zeros_like),
            fr: self.fr.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> (usize, usize, usize) {
        self.config.fr.input_dim()
    }

    fn check_input(&self, x: &Image<F>) -> Result<()> {
        if x.dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input {:?} does not match network input {:?}",
                x.dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Parameter blocks in serialization order. SR is absent without an SR
    /// component.
    pub fn blocks(&self) -> Vec<Block<'_, ArrayViewD<'_, F>>> {
        let mut out = Vec::with_capacity(4);
        if let Some(sr) = &self.sr {
            out.push((BLOCK_SR, sr.tensors()));
        }
        out.push((BLOCK_TRUNK, self.fr.trunk.tensors()));
        out.push((BLOCK_HEAD_SYNTHETIC, self.fr.head_synthetic.tensors()));
        out.push((BLOCK_HEAD_NATIVE, self.fr.head_native.tensors()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<Block<'_, ArrayViewMutD<'_, F>>> {
        let mut out = Vec::with_capacity(4);
        if let Some(sr) = &mut self.sr {
            out.push((BLOCK_SR, sr.tensors_mut()));
        }
        out.push((BLOCK_TRUNK, self.fr.trunk.tensors_mut()));
        out.push((BLOCK_HEAD_SYNTHETIC, self.fr.head_synthetic.tensors_mut()));
        out.push((BLOCK_HEAD_NATIVE, self.fr.head_native.tensors_mut()));
        out
    }

    /// Super-resolves a pre-upsampled input (identity without SR).
    pub fn super_resolve(&self, x: &Image<F>) -> Result<Image<F>> {
        self.check_input(x)?;
        match &self.sr {
            Some(sr) => Ok(sr.forward(x)?.0.sr_image),
            None => Ok(x.clone()),
        }
    }

    /// Deployment feature: SR then trunk, no head.
    pub fn embed(&self, x: &Image<F>) -> Result<Array1<F>> {
        let s = self.super_resolve(x)?;
        Ok(self.fr.trunk.forward(&s)?.0)
    }

    /// Embedding and head logits for one pre-upsampled input.
    pub fn forward(&self, x: &Image<F>, branch: Branch) -> Result<(Array1<F>, Array1<F>)> {
        let emb = self.embed(x)?;
        let logits = self.fr.head(branch).forward(&emb)?;
        Ok((emb, logits))
    }

    /// Forward-only losses for one sample: CE on `branch` and, when `hr` is
    /// given, the pixel MSE of the SR output against it.
    pub fn sample_loss(&self, x: &Image<F>, class: usize, branch: Branch, hr: Option<&Image<F>>) -> Result<SampleLoss> {
        let s = self.super_resolve(x)?;
        let emb = self.fr.trunk.forward(&s)?.0;
        let logits = self.fr.head(branch).forward(&emb)?;
        let ce = crate::fr::ce_loss(&logits, class)?.as_f64();
        let sr_mse = match hr {
            Some(hr) => mse(&s, hr)?.as_f64(),
            None => 0.0,
        };
        Ok(SampleLoss { ce, sr_mse, center: 0.0 })
    }

    /// Forward and backward for one sample, accumulating into `grad`.
    ///
    /// The objective contributed is `ce_scale * CE + mse_scale * MSE(sr, hr)`
    /// (+ the optional center term). Frozen blocks receive no gradient and,
    /// for a frozen SR, no backward pass is run through it.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate(
        &self,
        x: &Image<F>,
        class: usize,
        branch: Branch,
        ce_scale: F,
        hr: Option<(&Image<F>, F)>,
        center: Option<&CenterTerm<'_, F>>,
        trainable: Trainable,
        grad: &mut Self,
    ) -> Result<(SampleLoss, Array1<F>)> {
        self.check_input(x)?;
        let sr_pass = match &self.sr {
            Some(sr) => {
                let (out, cache) = sr.forward(x)?;
                Some((out.sr_image, cache))
            }
            None => None,
        };
        let fr_in = sr_pass.as_ref().map_or(x, |(s, _)| s);
        let (emb, tcache) = self.fr.trunk.forward(fr_in)?;
        let head = self.fr.head(branch);
        let logits = head.forward(&emb)?;
        let (ce, d_logits) = ce_loss_grad(&logits, class)?;
        let d_logits = d_logits.mapv(|v| v * ce_scale);

        let head_trainable = match branch {
            Branch::Synthetic => trainable.head_synthetic,
            Branch::Native => trainable.head_native,
        };
        let mut scratch;
        let head_grad = if head_trainable {
            grad.fr.head_mut(branch)
        } else {
            scratch = head.clone();
            &mut scratch
        };
        let mut d_emb = head.backward(&emb, &d_logits, head_grad);

        let mut loss = SampleLoss {
            ce: ce.as_f64(),
            ..Default::default()
        };
        if let Some(term) = center {
            if class >= term.centers.nrows() {
                return Err(Error::InvalidInput(format!("no center for class {class}")));
            }
            let diff = &emb - &term.centers.row(class);
            loss.center = 0.5 * diff.dot(&diff).as_f64();
            d_emb = d_emb + diff.mapv(|v| v * term.scale);
        }

        let sr_needs_grad = trainable.sr && self.sr.is_some();
        let mut d_img = if trainable.trunk || sr_needs_grad {
            let mut scratch_trunk;
            let trunk_grad = if trainable.trunk {
                &mut grad.fr.trunk
            } else {
                scratch_trunk = self.fr.trunk.zeros_like();
                &mut scratch_trunk
            };
            self.fr.trunk.backward(&tcache, &d_emb, trunk_grad, sr_needs_grad)
        } else {
            None
        };

        if let (Some(sr), Some((s, cache))) = (&self.sr, &sr_pass) {
            if let Some((hr, mse_scale)) = hr {
                loss.sr_mse = mse(s, hr)?.as_f64();
                if sr_needs_grad {
                    let g = mse_grad(s, hr, mse_scale);
                    d_img = Some(match d_img {
                        Some(d) => d + g,
                        None => g,
                    });
                }
            }
            if let (true, Some(d)) = (sr_needs_grad, d_img) {
                let sr_grad = grad.sr.as_mut().expect("grad mirrors model");
                sr.backward(cache, &d, sr_grad, false);
            }
        }
        Ok((loss, emb))
    }

    /// Pixel loss only, for training the SR component on its own.
    pub fn accumulate_sr_only(&self, pair: &LrHrPair<F>, mse_scale: F, grad: &mut Self) -> Result<f64> {
        self.check_input(&pair.input_lr)?;
        let sr = self
            .sr
            .as_ref()
            .ok_or_else(|| Error::Config("model has no SR component".into()))?;
        let (out, cache) = sr.forward(&pair.input_lr)?;
        let loss = mse(&out.sr_image, &pair.target_hr)?;
        let g = mse_grad(&out.sr_image, &pair.target_hr, mse_scale);
        sr.backward(&cache, &g, grad.sr.as_mut().expect("grad mirrors model"), false);
        Ok(loss.as_f64())
    }
}
