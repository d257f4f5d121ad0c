//! Face identity network: a convolutional trunk producing an embedding,
//! one linear classifier head per label space, and the identity losses.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    flatten, max_pool2, max_pool2_backward, nested, nested_mut, relu, relu_backward, unflatten, Conv2d,
    ConvCache, Linear, Params,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each conv block (conv, ReLU, 2×2 max pool).
    pub trunk_channels: Vec<usize>,
    pub kernel: usize,
    pub embedding_dim: usize,
    /// Classes of the auxiliary (synthetic branch) label space.
    pub synthetic_classes: usize,
    /// Classes of the native label space.
    pub native_classes: usize,
}

impl Default for FrConfig {
    fn default() -> Self {
        FrConfig {
            input_channels: 1,
            input_height: 64,
            input_width: 64,
            trunk_channels: vec![32, 64, 128],
            kernel: 3,
            embedding_dim: 64,
            synthetic_classes: 2,
            native_classes: 2,
        }
    }
}

impl FrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.synthetic_classes == 0 || self.native_classes == 0 {
            return Err(Error::Config("both classifier heads need at least one class".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("fr kernel must be odd, got {}", self.kernel)));
        }
        let (_, h, w) = self.feature_dim();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {}x{} is too small for {} pooling blocks",
                self.input_height,
                self.input_width,
                self.trunk_channels.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> (usize, usize, usize) {
        (self.input_channels, self.input_height, self.input_width)
    }

    /// Shape of the last feature map before the fully connected layer.
    pub fn feature_dim(&self) -> (usize, usize, usize) {
        let blocks = self.trunk_channels.len();
        let c = self.trunk_channels.last().copied().unwrap_or(self.input_channels);
        (c, self.input_height >> blocks, self.input_width >> blocks)
    }
}

/// Which classifier head (label space) a forward pass ends in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Synthetic,
    Native,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Synthetic => "synthetic",
            Branch::Native => "native",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Branch::Synthetic),
            "native" => Ok(Branch::Native),
            other => Err(Error::InvalidInput(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrTrunk<F> {
    pub convs: Vec<Conv2d<F>>,
    pub fc: Linear<F>,
    input_dim: (usize, usize, usize),
    feature_dim: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct TrunkCache<F> {
    convs: Vec<ConvCache<F>>,
    activations: Vec<Array3<F>>,
    pools: Vec<Vec<usize>>,
    flat: Array1<F>,
}

impl<F: Scalar> FrTrunk<F> {
    pub fn new<R: Rng>(cfg: &FrConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.trunk_channels.len());
        let mut c = cfg.input_channels;
        for &out in &cfg.trunk_channels {
            convs.push(Conv2d::he(c, out, cfg.kernel, rng));
            c = out;
        }
        let (fc_c, fc_h, fc_w) = cfg.feature_dim();
        let fan_in = fc_c * fc_h * fc_w;
        Ok(FrTrunk {
            convs,
            fc: Linear::with_std(fan_in, cfg.embedding_dim, (1.0 / fan_in as f64).sqrt(), rng),
            input_dim: cfg.input_dim(),
            feature_dim: cfg.feature_dim(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        FrTrunk {
            convs: self
                .convs
                .iter()
                .map(|l| Conv2d::zeros(l.in_channels, l.out_channels(), l.kernel))
                .collect(),
            fc: Linear::zeros(self.fc.inputs(), self.fc.outputs()),
            input_dim: self.input_dim,
            feature_dim: self.feature_dim,
        }
    }

    pub fn input_dim(&self) -> (usize, usize, usize) {
        self.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc.outputs()
    }

    pub fn forward(&self, image: &Image<F>) -> Result<(Array1<F>, TrunkCache<F>)> {
        if image.dim() != self.input_dim {
            return Err(Error::Shape(format!(
                "fr input {:?} does not match configured {:?}",
                image.dim(),
                self.input_dim
            )));
        }
        let n = self.convs.len();
        let mut cache = TrunkCache {
            convs: Vec::with_capacity(n),
            activations: Vec::with_capacity(n),
            pools: Vec::with_capacity(n),
            flat: Array1::zeros(0),
        };
        let mut x = image.clone();
        for conv in &self.convs {
            let (mut y, cc) = conv.forward(&x)?;
            relu(&mut y);
            let (pooled, arg) = max_pool2(&y);
            cache.convs.push(cc);
            cache.activations.push(y);
            cache.pools.push(arg);
            x = pooled;
        }
        cache.flat = flatten(&x);
        let emb = self.fc.forward(&cache.flat)?;
        Ok((emb, cache))
    }

    pub fn backward(&self, cache: &TrunkCache<F>, d_emb: &Array1<F>, grad: &mut Self, need_dx: bool) -> Option<Image<F>> {
        let d_flat = self.fc.backward(&cache.flat, d_emb, &mut grad.fc);
        let mut d = unflatten(d_flat, self.feature_dim);
        for i in (0..self.convs.len()).rev() {
            let act = &cache.activations[i];
            let mut d_act = max_pool2_backward(&cache.pools[i], &d, act.dim());
            relu_backward(act, &mut d_act);
            let want = i > 0 || need_dx;
            match self.convs[i].backward(&cache.convs[i], &d_act, &mut grad.convs[i], want) {
                Some(next) => d = next,
                None => return None,
            }
        }
        need_dx.then_some(d)
    }
}

impl<F: Scalar> Params<F> for FrTrunk<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut v = nested("conv", &self.convs);
        v.extend(self.fc.tensors().into_iter().map(|(n, t)| (format!("fc.{n}"), t)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut v = nested_mut("conv", &mut self.convs);
        v.extend(self.fc.tensors_mut().into_iter().map(|(n, t)| (format!("fc.{n}"), t)));
        v
    }
}

/// Shared trunk plus the two classifier heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FrNet<F> {
    pub trunk: FrTrunk<F>,
    pub head_synthetic: Linear<F>,
    pub head_native: Linear<F>,
}

impl<F: Scalar> FrNet<F> {
    pub fn new<R: Rng>(cfg: &FrConfig, rng: &mut R) -> Result<Self> {
        let trunk = FrTrunk::new(cfg, rng)?;
        let std = (1.0 / cfg.embedding_dim as f64).sqrt();
        Ok(FrNet {
            trunk,
            head_synthetic: Linear::with_std(cfg.embedding_dim, cfg.synthetic_classes, std, rng),
            head_native: Linear::with_std(cfg.embedding_dim, cfg.native_classes, std, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        FrNet {
            trunk: self.trunk.zeros_like(),
            head_synthetic: Linear::zeros(self.head_synthetic.inputs(), self.head_synthetic.outputs()),
            head_native: Linear::zeros(self.head_native.inputs(), self.head_native.outputs()),
        }
    }

    pub fn head(&self, branch: Branch) -> &Linear<F> {
        match branch {
            Branch::Synthetic => &self.head_synthetic,
            Branch::Native => &self.head_native,
        }
    }

    pub fn head_mut(&mut self, branch: Branch) -> &mut Linear<F> {
        match branch {
            Branch::Synthetic => &mut self.head_synthetic,
            Branch::Native => &mut self.head_native,
        }
    }
}

/// Embedding from the shared trunk and logits from the selected head.
pub fn fr_forward<F: Scalar>(image: &Image<F>, net: &FrNet<F>, head: Branch) -> Result<(Array1<F>, Array1<F>)> {
    let (emb, _) = net.trunk.forward(image)?;
    let logits = net.head(head).forward(&emb)?;
    Ok((emb, logits))
}

fn log_sum_exp<F: Scalar>(logits: &Array1<F>) -> F {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let s = logits.iter().fold(F::zero(), |acc, &v| acc + (v - m).exp());
    m + s.ln()
}

pub fn softmax<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

fn check_label<F>(logits: &Array1<F>, y: usize) -> Result<()> {
    if y >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

/// Softmax cross-entropy `-log p_y` via log-sum-exp.
pub fn ce_loss<F: Scalar>(logits: &Array1<F>, y: usize) -> Result<F> {
    check_label(logits, y)?;
    Ok(log_sum_exp(logits) - logits[y])
}

/// Loss and its gradient w.r.t. the logits (`softmax - onehot`).
pub fn ce_loss_grad<F: Scalar>(logits: &Array1<F>, y: usize) -> Result<(F, Array1<F>)> {
    let loss = ce_loss(logits, y)?;
    let mut g = softmax(logits);
    g[y] = g[y] - F::one();
    Ok((loss, g))
}

fn check_centers<F>(labels: &[usize], centers: &Array2<F>, dim: usize) -> Result<()> {
    if centers.ncols() != dim {
        return Err(Error::Shape(format!(
            "centers have dimension {}, embeddings {dim}",
            centers.ncols()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= centers.nrows()) {
        return Err(Error::InvalidInput(format!("no center for class {y}")));
    }
    Ok(())
}

/// Half the summed squared distance of each embedding to its class center.
pub fn center_loss<F: Scalar>(embeddings: &[Array1<F>], labels: &[usize], centers: &Array2<F>) -> Result<F> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape("one label per embedding required".into()));
    }
    let dim = embeddings.first().map_or(centers.ncols(), |e| e.len());
    check_centers(labels, centers, dim)?;
    let half = F::from_f64_lossy(0.5);
    let mut total = F::zero();
    for (e, &y) in embeddings.iter().zip(labels) {
        if e.len() != dim {
            return Err(Error::Shape("ragged embeddings".into()));
        }
        let d = e - &centers.row(y);
        total = total + half * d.dot(&d);
    }
    Ok(total)
}

/// Running-mean center update: `c_j -= alpha * sum(c_j - x_i) / (1 + n_j)`.
pub fn update_centers<F: Scalar>(centers: &mut Array2<F>, embeddings: &[Array1<F>], labels: &[usize], alpha: F) -> Result<()> {
    let dim = centers.ncols();
    check_centers(labels, centers, dim)?;
    let mut delta = Array2::<F>::zeros(centers.dim());
    let mut count = vec![0usize; centers.nrows()];
    for (e, &y) in embeddings.iter().zip(labels) {
        let mut row = delta.row_mut(y);
        row += &(&centers.row(y) - e);
        count[y] += 1;
    }
    for (j, &n) in count.iter().enumerate() {
        if n > 0 {
            let scale = alpha / F::from_usize(1 + n).expect("count");
            let d = delta.row(j).mapv(|v| v * scale);
            let mut c = centers.row_mut(j);
            c -= &d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> FrConfig {
        FrConfig {
            input_height: 8,
            input_width: 8,
            trunk_channels: vec![2],
            embedding_dim: 5,
            synthetic_classes: 3,
            native_classes: 4,
            ..Default::default()
        }
    }

    #[test]
    fn heads_share_the_trunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = FrNet::<f64>::new(&toy_cfg(), &mut rng).unwrap();
        let x = Array3::from_shape_simple_fn((1, 8, 8), || rng.gen_range(0.0..1.0));
        let (e1, l1) = fr_forward(&x, &net, Branch::Synthetic).unwrap();
        let (e2, l2) = fr_forward(&x, &net, Branch::Native).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 5);
        assert_eq!((l1.len(), l2.len()), (3, 4));
    }

    #[test]
    fn unknown_head_and_bad_shapes_are_rejected() {
        assert!("sideways".parse::<Branch>().is_err());
        assert_eq!("native".parse::<Branch>().unwrap(), Branch::Native);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = FrNet::<f32>::new(&toy_cfg(), &mut rng).unwrap();
        assert!(fr_forward(&Array3::zeros((1, 8, 9)), &net, Branch::Native).is_err());
    }

    #[test]
    fn default_trunk_shape() {
        let cfg = FrConfig::default();
        assert_eq!(cfg.feature_dim(), (128, 8, 8));
        let too_small = FrConfig { input_height: 4, ..cfg };
        assert!(too_small.validate().is_err());
    }

    #[test]
    fn ce_examples() {
        let uniform = Array1::from_elem(10, 0.3f64);
        assert!((ce_loss(&uniform, 4).unwrap() - 10f64.ln()).abs() < 1e-12);
        let confident = Array1::from(vec![50.0f64, 0.0]);
        assert!(ce_loss(&confident, 0).unwrap().abs() < 1e-12);
        let two = Array1::from(vec![2.0f64, 0.0]);
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((ce_loss(&two, 0).unwrap() - want).abs() < 1e-15);
        assert!((ce_loss(&two, 0).unwrap() - 0.126928).abs() < 5e-7);
        assert!(ce_loss(&two, 2).is_err());
    }

    #[test]
    fn ce_grad_sums_to_zero() {
        let logits = Array1::from(vec![0.3f64, -1.2, 2.0]);
        let (_, g) = ce_loss_grad(&logits, 1).unwrap();
        assert!(g.sum().abs() < 1e-15);
        assert!(g[1] < 0.0);
    }

    #[test]
    fn center_loss_examples() {
        let centers = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let at = vec![Array1::from(vec![0.0, 0.0]), Array1::from(vec![1.0, 1.0])];
        assert_eq!(center_loss(&at, &[0, 1], &centers).unwrap(), 0.0);
        let off = vec![Array1::from(vec![3.0, 4.0])];
        assert_eq!(center_loss(&off, &[0], &centers).unwrap(), 12.5);
        assert!(center_loss(&off, &[2], &centers).is_err());
    }

    #[test]
    fn center_update_moves_toward_members() {
        let mut centers = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        let e = vec![Array1::from(vec![2.0]), Array1::from(vec![4.0])];
        update_centers(&mut centers, &e, &[0, 0], 0.5).unwrap();
        // delta = (0-2)+(0-4) = -6, / (1+2) = -2, c -= 0.5 * -2
        assert_eq!(centers[[0, 0]], 1.0);
    }

    proptest::proptest! {
        #[test]
        fn softmax_normalizes_and_ce_is_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 1..20),
            shift in -1e3f64..1e3,
            pick in 0usize..100,
        ) {
            let logits = Array1::from(v);
            let p = softmax(&logits);
            proptest::prop_assert!((p.sum() - 1.0).abs() < 1e-6);
            proptest::prop_assert!(p.iter().all(|&x| x >= 0.0));
            let y = pick % logits.len();
            let shifted = logits.mapv(|x| x + shift);
            let a = ce_loss(&logits, y).unwrap();
            let b = ce_loss(&shifted, y).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
