//! Differentiable numerical substrate. Every backward pass here is written by
//! hand; [`grad_check`] is what establishes that they are right.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LtrbTargets;
use crate::seed;

pub type Matrix = Array2<f64>;

/// Lower clamp for probabilities fed to logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.raw_dim());
        ParamTensor {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros((rows, cols)))
    }

    /// Uniform Glorot initialisation.
    pub fn glorot(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self::new(name, Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit)))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Anything that owns learnable tensors.
pub trait ParamSet {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Affine {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Affine {
            weight: ParamTensor::glorot(format!("{name}.weight"), input, output, rng),
            bias: ParamTensor::zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("{} input", self.weight.name), x.shape(), self.weight.value.shape()));
        }
        Ok(x.dot(&self.weight.value) + &self.bias.value)
    }

    /// Accumulate parameter gradients and return `dL/dx`.
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Matrix {
        self.accumulate(x, grad_out);
        grad_out.dot(&self.weight.value.t())
    }

    /// Parameter gradients only, for layers fed by constants.
    pub fn accumulate(&mut self, x: &Matrix, grad_out: &Matrix) {
        self.weight.grad += &x.t().dot(grad_out);
        self.bias.grad += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&ParamTensor; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn tanh(x: &Matrix) -> Matrix {
    x.mapv(f64::tanh)
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward(y: &Matrix, grad: &Matrix) -> Matrix {
    let mut g = grad.clone();
    g.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y);
    g
}

pub fn relu(x: &Matrix) -> Matrix {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Matrix, grad: &Matrix) -> Matrix {
    let mut g = grad.clone();
    g.zip_mut_with(x, |g, &x| {
        if x <= 0.0 {
            *g = 0.0
        }
    });
    g
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_lane(lane: ArrayView1<f64>) -> Vec<f64> {
    let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = lane.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over each row (category axis).
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.raw_dim());
    for (mut dst, src) in out.rows_mut().into_iter().zip(m.rows()) {
        for (d, v) in dst.iter_mut().zip(softmax_lane(src)) {
            *d = v;
        }
    }
    out
}

/// Softmax over each column (proposal axis).
pub fn softmax_cols(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.raw_dim());
    for (mut dst, src) in out.columns_mut().into_iter().zip(m.columns()) {
        for (d, v) in dst.iter_mut().zip(softmax_lane(src)) {
            *d = v;
        }
    }
    out
}

/// `dL/dz` for `y = softmax(z)` along `axis` (1 = rows, 0 = columns).
fn softmax_backward(y: &Matrix, grad: &Matrix, axis: Axis) -> Matrix {
    let dot = (y * grad).sum_axis(axis).insert_axis(axis);
    y * &(grad - &dot)
}

pub fn softmax_rows_backward(y: &Matrix, grad: &Matrix) -> Matrix {
    softmax_backward(y, grad, Axis(1))
}

pub fn softmax_cols_backward(y: &Matrix, grad: &Matrix) -> Matrix {
    softmax_backward(y, grad, Axis(0))
}

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `d bce / d p`; zero where the clamp is active.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

/// Summed smooth L1 with unit transition point.
pub fn smooth_l1(x: &[f64], target: &[f64]) -> f64 {
    assert_eq!(x.len(), target.len(), "smooth_l1: length mismatch");
    x.iter()
        .zip(target)
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum()
}

pub fn smooth_l1_grad(x: &[f64], target: &[f64]) -> Vec<f64> {
    x.iter().zip(target).map(|(a, b)| (a - b).clamp(-1.0, 1.0)).collect()
}

/// `1 - IoU` between the boxes that `pred` and `target` describe around a
/// shared location, with its gradient with respect to `pred`.
pub fn iou_loss(pred: &LtrbTargets, target: &LtrbTargets) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let g = target.to_array();
    // index order l, t, r, b
    let pred_area = (p[0] + p[2]) * (p[1] + p[3]);
    let target_area = (g[0] + g[2]) * (g[1] + g[3]);
    let iw = p[0].min(g[0]) + p[2].min(g[2]);
    let ih = p[1].min(g[1]) + p[3].min(g[3]);
    let inter = iw * ih;
    let union = pred_area + target_area - inter;
    if union <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let iou = inter / union;

    // d iou = dI (1/U + I/U^2) - dA_pred I/U^2
    let d_inter = 1.0 / union + inter / (union * union);
    let d_area = -inter / (union * union);
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let (other_inter, other_area) = if k % 2 == 0 { (ih, p[1] + p[3]) } else { (iw, p[0] + p[2]) };
        let inter_k = if p[k] <= g[k] { other_inter } else { 0.0 };
        grad[k] = -(d_inter * inter_k + d_area * other_area);
    }
    (1.0 - iou, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to `lr` from `decay_step` onwards.
    pub lr_decay: f64,
    pub decay_step: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            decay_step: u64::MAX,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.decay_step {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// Momentum SGD. Velocity buffers are keyed by tensor name.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Matrix>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v <- m v + g + wd w; w <- w - lr v`, then clear the gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut ParamTensor>, cfg: &SgdConfig, lr: f64) {
        for p in params {
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Matrix::zeros(p.value.raw_dim()));
            let momentum = cfg.momentum;
            let wd = cfg.weight_decay;
            ndarray::Zip::from(&mut *v)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|v, &g, &w| *v = momentum * *v + g + wd * w);
            p.value.scaled_add(-lr, v);
            p.zero_grad();
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Matrix> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, value: Matrix) {
        self.velocity.insert(name.into(), value);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
    /// Test hook: add `delta` to the analytic gradient of `(tensor, coord)`.
    pub corrupt: Option<(String, usize, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 64,
            abs_floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare analytic gradients against central differences
/// `(f(w+eps) - f(w-eps)) / 2 eps` on a random subsample of coordinates.
///
/// `loss` evaluates the loss at the current parameters; when its flag is
/// true it must also accumulate gradients into the parameters.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: ParamSet + ?Sized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    let check_finite = |v: f64, what: &str| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                image_id: 0,
                value: v,
                detail: format!("grad_check {what}"),
            })
        }
    };

    model.zero_grad();
    check_finite(loss(model, true)?, "base loss")?;
    let mut analytic: Vec<Matrix> = model.params().iter().map(|p| p.grad.clone()).collect();
    if let Some((name, coord, delta)) = &opts.corrupt {
        if let Some(i) = model.params().iter().position(|p| &p.name == name) {
            if let Some(g) = analytic[i].iter_mut().nth(*coord) {
                *g += delta;
            }
        }
    }
    model.zero_grad();

    let mut rng = seed::rng(opts.seed);
    let n_tensors = analytic.len();
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        tensors: Vec::with_capacity(n_tensors),
    };
    for ti in 0..n_tensors {
        let (name, numel) = {
            let p = &model.params()[ti];
            (p.name.clone(), p.len())
        };
        let coords: Vec<usize> = if numel <= opts.coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut entry = TensorCheck {
            name,
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for coord in coords {
            let original = model.params()[ti].value.as_slice().expect("contiguous")[coord];
            let set = |m: &mut M, v: f64| {
                m.params_mut()[ti].value.as_slice_mut().expect("contiguous")[coord] = v;
            };
            set(model, original + opts.eps);
            let plus = check_finite(loss(model, false)?, "perturbed loss")?;
            set(model, original - opts.eps);
            let minus = check_finite(loss(model, false)?, "perturbed loss")?;
            set(model, original);
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ti].as_slice().expect("contiguous")[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            if rel >= entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_coord = coord;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.tensors.push(entry);
    }
    model.zero_grad();
    Ok(report)
}

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter tensors plus the optimizer step counter and the model
/// description needed to rebuild the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u64,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub model: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn capture<M: ParamSet + ?Sized>(model: &M, step: u64, description: serde_json::Value) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|p| {
                (
                    p.name.clone(),
                    TensorRecord {
                        shape: p.shape(),
                        values: p.value.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            model: description,
            tensors,
        }
    }

    /// Copy tensors into `model`, validating every shape.
    pub fn restore<M: ParamSet + ?Sized>(&self, model: &mut M) -> Result<()> {
        for p in model.params_mut() {
            let rec = self.tensors.get(&p.name).ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if rec.shape != p.shape() || rec.values.len() != p.len() {
                return Err(Error::TensorShape {
                    name: p.name.clone(),
                    expected: p.shape(),
                    found: rec.shape.clone(),
                });
            }
            for (dst, src) in p.value.iter_mut().zip(&rec.values) {
                *dst = *src;
            }
            p.zero_grad();
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }
}
