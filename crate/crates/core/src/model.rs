//! Softmax classifier (linear head, optionally over one ReLU hidden layer).
//!
//! Besides probabilities the model exposes penultimate features and the
//! last-layer cross-entropy gradient embeddings used by the selectors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoolState};
use crate::error::{Error, Result};
use crate::rng;

pub const MODEL_MAGIC: &[u8; 4] = b"TALM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

/// Dense affine layer, `weights` is out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn uniform(out: usize, inp: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Layer {
            weights: DMatrix::from_fn(out, inp, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::from_fn(out, |_, _| rng.random_range(-bound..bound)),
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Layer {
            weights: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
        }
    }

    /// `x * W^T + b` for a batch of row vectors.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.weights.transpose();
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    fn axpy(&mut self, alpha: f64, other: &Layer) {
        self.weights += &other.weights * alpha;
        self.bias += &other.bias * alpha;
    }

    fn scale(&mut self, alpha: f64) {
        self.weights *= alpha;
        self.bias *= alpha;
    }

    fn sq_norm(&self) -> f64 {
        self.weights.norm_squared() + self.bias.norm_squared()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: Option<Layer>,
    pub head: Layer,
    pub trained_epochs: usize,
}

/// Gradient of the training objective, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Option<Layer>,
    pub head: Layer,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(h) = &self.hidden {
            out.extend(h.weights.iter());
            out.extend(h.bias.iter());
        }
        out.extend(self.head.weights.iter());
        out.extend(self.head.bias.iter());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub stop_train_acc: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Linear,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            t_max: 100,
            stop_train_acc: 0.99,
            batch_size: 32,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.t_max == 0 || self.batch_size == 0 {
            return Err(Error::invalid("t_max and batch_size must be >= 1"));
        }
        if !(self.stop_train_acc <= 1.0) {
            return Err(Error::invalid("stop_train_acc must be <= 1"));
        }
        if let Arch::Mlp { hidden: 0 } = self.arch {
            return Err(Error::invalid("mlp hidden width must be >= 1"));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for epoch `t` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5 * (1.0 + (PI * epoch as f64 / self.t_max as f64).cos())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn softmax_rows(mut logits: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

impl ModelParams {
    pub fn init(arch: Arch, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let (hidden, width) = match arch {
            Arch::Linear => (None, input_dim),
            Arch::Mlp { hidden } => (Some(Layer::uniform(hidden, input_dim, &mut rng)), hidden),
        };
        ModelParams {
            arch,
            input_dim,
            num_classes,
            hidden,
            head: Layer::uniform(num_classes, width, &mut rng),
            trained_epochs: 0,
        }
    }

    pub fn zeros(arch: Arch, input_dim: usize, num_classes: usize) -> Self {
        let (hidden, width) = match arch {
            Arch::Linear => (None, input_dim),
            Arch::Mlp { hidden } => (Some(Layer::zeros(hidden, input_dim)), hidden),
        };
        ModelParams {
            arch,
            input_dim,
            num_classes,
            hidden,
            head: Layer::zeros(num_classes, width),
            trained_epochs: 0,
        }
    }

    /// Width of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        self.head.weights.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.num_classes * self.feature_dim()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::invalid(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(match &self.hidden {
            None => x.clone(),
            Some(layer) => layer.apply(x).map(|v| v.max(0.0)),
        })
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.head.apply(&self.features(x)?))
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(softmax_rows(self.logits(x)?))
    }

    /// Last-layer cross-entropy gradient for one point, flattened class-major
    /// (`c * h + j`). Without a label the model's own argmax is used.
    pub fn grad_embedding(&self, x: &[f64], label: Option<usize>) -> Result<Vec<f64>> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        let labels = label.map(|y| vec![y]);
        let emb = self.grad_embeddings(&xm, labels.as_deref())?;
        Ok(emb.row(0).iter().copied().collect())
    }

    /// Row-wise gradient embeddings, one `C*h` row per input row.
    pub fn grad_embeddings(&self, x: &DMatrix<f64>, labels: Option<&[usize]>) -> Result<DMatrix<f64>> {
        if let Some(labels) = labels {
            if labels.len() != x.nrows() {
                return Err(Error::invalid("one label per row required"));
            }
            if let Some(&y) = labels.iter().find(|&&y| y >= self.num_classes) {
                return Err(Error::invalid(format!("label {y} >= num_classes {}", self.num_classes)));
            }
        }
        let feats = self.features(x)?;
        let probs = softmax_rows(self.head.apply(&feats));
        let h = feats.ncols();
        let c = self.num_classes;
        let mut out = DMatrix::zeros(x.nrows(), c * h);
        for r in 0..x.nrows() {
            let y = match labels {
                Some(l) => l[r],
                None => argmax(probs.row(r).iter().copied()),
            };
            for k in 0..c {
                let coef = probs[(r, k)] - if k == y { 1.0 } else { 0.0 };
                for j in 0..h {
                    out[(r, k * h + j)] = coef * feats[(r, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    pub fn accuracy(&self, ds: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::invalid("accuracy over an empty index list"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::invalid(format!("index {i} out of range (n={})", ds.len())));
        }
        let pred = self.predict(&ds.rows_f64(indices))?;
        let correct = indices.iter().zip(&pred).filter(|(&i, &p)| ds.label(i) == p).count();
        Ok(correct as f64 / indices.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.head.is_finite() && self.hidden.as_ref().is_none_or(Layer::is_finite)
    }

    fn sq_norm(&self) -> f64 {
        self.head.sq_norm() + self.hidden.as_ref().map_or(0.0, Layer::sq_norm)
    }

    /// Mean cross-entropy over `(x, y)` plus `weight_decay / 2 * ||theta||^2`,
    /// together with its analytic gradient.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &[usize], weight_decay: f64) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        if y.len() != x.nrows() || y.is_empty() {
            return Err(Error::invalid("need one label per row and at least one row"));
        }
        let n = x.nrows() as f64;
        let pre = self.hidden.as_ref().map(|l| l.apply(x));
        let feats = match &pre {
            None => x.clone(),
            Some(p) => p.map(|v| v.max(0.0)),
        };
        let logits = self.head.apply(&feats);

        let mut loss = 0.0;
        let mut dz = DMatrix::zeros(logits.nrows(), logits.ncols());
        for (r, row) in logits.row_iter().enumerate() {
            let max = row.max();
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y[r]];
            for k in 0..row.len() {
                dz[(r, k)] = ((row[k] - lse).exp() - if k == y[r] { 1.0 } else { 0.0 }) / n;
            }
        }
        loss /= n;
        loss += 0.5 * weight_decay * self.sq_norm();

        let mut head = Layer {
            weights: dz.transpose() * &feats,
            bias: dz.row_sum().transpose(),
        };
        head.axpy(weight_decay, &self.head);

        let hidden = match (&self.hidden, &pre) {
            (Some(layer), Some(pre)) => {
                let mut dh = &dz * &self.head.weights;
                dh.zip_apply(pre, |g, p| {
                    if p <= 0.0 {
                        *g = 0.0
                    }
                });
                let mut g = Layer {
                    weights: dh.transpose() * x,
                    bias: dh.row_sum().transpose(),
                };
                g.axpy(weight_decay, layer);
                Some(g)
            }
            _ => None,
        };
        Ok((loss, Gradients { hidden, head }))
    }

    /// Parameters flattened in the same order as [`Gradients::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        Gradients {
            hidden: self.hidden.clone(),
            head: self.head.clone(),
        }
        .flatten()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        if let Some(h) = &mut self.hidden {
            h.weights.iter_mut().for_each(|v| *v = it.next().unwrap());
            h.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.head.weights.iter_mut().for_each(|v| *v = it.next().unwrap());
        self.head.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (arch, h) = match self.arch {
            Arch::Linear => (0u32, self.input_dim),
            Arch::Mlp { hidden } => (1u32, hidden),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        for v in [
            MODEL_VERSION,
            arch,
            self.input_dim as u32,
            h as u32,
            self.num_classes as u32,
            self.trained_epochs as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        // row-major weights, then biases
        let mut put = |layer: &Layer| {
            for r in 0..layer.weights.nrows() {
                for c in 0..layer.weights.ncols() {
                    out.extend_from_slice(&layer.weights[(r, c)].to_le_bytes());
                }
            }
            for b in layer.bias.iter() {
                out.extend_from_slice(&b.to_le_bytes());
            }
        };
        if let Some(hl) = &self.hidden {
            put(hl);
        }
        put(&self.head);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.into(),
        };
        if bytes.len() < 28 {
            return Err(fmt(bytes.len(), "truncated model header"));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(fmt(0, "bad model magic"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if u(0) != MODEL_VERSION as usize {
            return Err(fmt(4, "unsupported model version"));
        }
        let (d, h, c, epochs) = (u(2), u(3), u(4), u(5));
        let arch = match u(1) {
            0 => Arch::Linear,
            1 => Arch::Mlp { hidden: h },
            _ => return Err(fmt(8, "unknown architecture tag")),
        };
        let mut model = ModelParams::zeros(arch, d, c);
        model.trained_epochs = epochs;
        let mut pos = 28;
        let mut take = |layer: &mut Layer| -> Result<()> {
            let need = 8 * (layer.weights.len() + layer.bias.len());
            if bytes.len() < pos + need {
                return Err(fmt(bytes.len(), "truncated model body"));
            }
            let mut next = || {
                let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
                pos += 8;
                v
            };
            for r in 0..layer.weights.nrows() {
                for col in 0..layer.weights.ncols() {
                    layer.weights[(r, col)] = next();
                }
            }
            for b in layer.bias.iter_mut() {
                *b = next();
            }
            Ok(())
        };
        if let Some(hl) = &mut model.hidden {
            take(hl)?;
        }
        take(&mut model.head)?;
        if pos != bytes.len() {
            return Err(fmt(pos, "trailing bytes after model body"));
        }
        Ok(model)
    }
}

fn labeled_xy(pool: &PoolState, ds: &Dataset) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if pool.labeled().is_empty() {
        return Err(Error::DegeneratePool("labeled pool is empty".into()));
    }
    let idx: Vec<usize> = pool.labeled().keys().copied().collect();
    let y: Vec<usize> = pool.labeled().values().copied().collect();
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Err(Error::DegeneratePool(format!(
            "labeled pool contains only class {first}"
        )));
    }
    Ok((ds.rows_f64(&idx), y))
}

/// Trains a freshly initialized model on the labeled pool.
pub fn train(pool: &PoolState, ds: &Dataset, cfg: &TrainConfig) -> Result<ModelParams> {
    train_with_history(pool, ds, cfg, None).map(|(m, _)| m)
}

/// Like [`train`], optionally keeping `frozen_hidden` fixed and fitting only a
/// freshly initialized head. Also returns the full-pool loss after each epoch.
pub fn train_with_history(
    pool: &PoolState,
    ds: &Dataset,
    cfg: &TrainConfig,
    frozen_hidden: Option<&Layer>,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let (x, y) = labeled_xy(pool, ds)?;
    let mut model = ModelParams::init(cfg.arch, ds.dim(), ds.num_classes(), cfg.rng_seed);
    if let Some(frozen) = frozen_hidden {
        if model.hidden.as_ref().map(|h| h.weights.shape()) != Some(frozen.weights.shape()) {
            return Err(Error::invalid("frozen hidden layer does not match the architecture"));
        }
        model.hidden = Some(frozen.clone());
    }
    let mut velocity = Gradients {
        hidden: model
            .hidden
            .as_ref()
            .map(|h| Layer::zeros(h.weights.nrows(), h.weights.ncols())),
        head: Layer::zeros(model.head.weights.nrows(), model.head.weights.ncols()),
    };
    let mut rng = rng::seeded(rng::derive_seed(cfg.rng_seed, &[0x5eed]));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut history = Vec::with_capacity(cfg.t_max);

    for epoch in 0..cfg.t_max {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (_, grad) = model.loss_and_grad(&xb, &yb, cfg.weight_decay)?;
            velocity.head.scale(cfg.momentum);
            velocity.head.axpy(1.0, &grad.head);
            model.head.axpy(-lr, &velocity.head);
            if frozen_hidden.is_none() {
                if let (Some(v), Some(g), Some(p)) = (&mut velocity.hidden, &grad.hidden, &mut model.hidden) {
                    v.scale(cfg.momentum);
                    v.axpy(1.0, g);
                    p.axpy(-lr, v);
                }
            }
        }
        model.trained_epochs = epoch + 1;
        let (loss, _) = model.loss_and_grad(&x, &y, cfg.weight_decay)?;
        history.push(loss);
        if !model.is_finite() {
            return Err(Error::NumericalDomain {
                pivot: 0,
                message: format!("training diverged at epoch {epoch}"),
            });
        }
        let pred = model.predict(&x)?;
        let acc = pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64;
        if acc >= cfg.stop_train_acc {
            break;
        }
    }
    Ok((model, history))
}
