//! Visual feature path: patch-embedding extractor, RoI pooling, the
//! two-layer proposal MLP, and the data-aware feature extractor whose output
//! is added to every proposal feature.

use ndarray::{Array1, Axis};
use rand::Rng;

use crate::diffcore::{relu, relu_backward, tanh, tanh_backward, Affine, Matrix, ParamTensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthdata::Image;

/// `rows x cols` grid of `channels`-wide cells, stored one cell per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub values: Matrix,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * self.cols + j
    }

    /// Pixel-space centre of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }

    pub fn image_size(&self) -> (f64, f64) {
        ((self.cols * self.stride) as f64, (self.rows * self.stride) as f64)
    }
}

/// Flattens each `stride x stride x 3` patch and maps it through
/// `tanh(affine(.))`. The optional context stage mixes each cell with its
/// 3x3 neighbourhood (edge cells repeat the border) through a second
/// `tanh(affine(.))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub stride: usize,
    pub layer: Affine,
    pub context: Option<Affine>,
}

#[derive(Debug, Clone)]
pub struct ExtractCache {
    patches: Matrix,
    embed: Option<(Matrix, Matrix)>,
}

/// `3x3` neighbourhoods with border replication, one cell per row.
fn neighbourhoods(values: &Matrix, rows: usize, cols: usize) -> Matrix {
    let d = values.ncols();
    let mut out = Matrix::zeros((rows * cols, 9 * d));
    for i in 0..rows {
        for j in 0..cols {
            let mut row = out.row_mut(i * cols + j);
            for k in 0..9 {
                let ni = (i + k / 3).saturating_sub(1).min(rows - 1);
                let nj = (j + k % 3).saturating_sub(1).min(cols - 1);
                row.slice_mut(ndarray::s![k * d..(k + 1) * d]).assign(&values.row(ni * cols + nj));
            }
        }
    }
    out
}

fn neighbourhoods_backward(grad: &Matrix, rows: usize, cols: usize, d: usize) -> Matrix {
    let mut out = Matrix::zeros((rows * cols, d));
    for i in 0..rows {
        for j in 0..cols {
            let g = grad.row(i * cols + j);
            for k in 0..9 {
                let ni = (i + k / 3).saturating_sub(1).min(rows - 1);
                let nj = (j + k % 3).saturating_sub(1).min(cols - 1);
                let mut target = out.row_mut(ni * cols + nj);
                target += &g.slice(ndarray::s![k * d..(k + 1) * d]);
            }
        }
    }
    out
}

impl Extractor {
    pub fn new(stride: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Extractor {
            stride,
            layer: Affine::new("extractor", stride * stride * 3, channels, rng),
            context: None,
        }
    }

    pub fn with_context(stride: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let mut ex = Extractor::new(stride, channels, rng);
        ex.context = Some(Affine::new("extractor.context", 9 * channels, channels, rng));
        ex
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v: Vec<&ParamTensor> = self.layer.params().into_iter().collect();
        if let Some(c) = &self.context {
            v.extend(c.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> = self.layer.params_mut().into_iter().collect();
        if let Some(c) = &mut self.context {
            v.extend(c.params_mut());
        }
        v
    }

    pub fn patches(&self, image: &Image) -> Result<Matrix> {
        let s = self.stride;
        if s == 0 || image.height % s != 0 || image.width % s != 0 {
            return Err(Error::shape(
                format!("image size must be a multiple of stride {s}"),
                &[image.height, image.width],
                &[s, s],
            ));
        }
        let (rows, cols) = (image.height / s, image.width / s);
        let mut patches = Matrix::zeros((rows * cols, s * s * 3));
        for i in 0..rows {
            for j in 0..cols {
                let mut row = patches.row_mut(i * cols + j);
                let mut k = 0;
                for dy in 0..s {
                    for dx in 0..s {
                        for c in 0..3 {
                            row[k] = f64::from(image.get(i * s + dy, j * s + dx, c));
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(patches)
    }

    pub fn forward(&self, image: &Image) -> Result<(FeatureMap, ExtractCache)> {
        let patches = self.patches(image)?;
        let (rows, cols) = (image.height / self.stride, image.width / self.stride);
        let first = tanh(&self.layer.forward(&patches)?);
        let (values, embed) = match &self.context {
            Some(ctx) => {
                let columns = neighbourhoods(&first, rows, cols);
                (tanh(&ctx.forward(&columns)?), Some((first, columns)))
            }
            None => (first, None),
        };
        let fmap = FeatureMap {
            rows,
            cols,
            stride: self.stride,
            values,
        };
        Ok((fmap, ExtractCache { patches, embed }))
    }

    pub fn backward(&mut self, cache: &ExtractCache, fmap: &FeatureMap, grad: &Matrix) {
        let g = tanh_backward(&fmap.values, grad);
        match (&mut self.context, &cache.embed) {
            (Some(ctx), Some((first, columns))) => {
                let g_cols = ctx.backward(columns, &g);
                let g_first = neighbourhoods_backward(&g_cols, fmap.rows, fmap.cols, first.ncols());
                let g1 = tanh_backward(first, &g_first);
                self.layer.accumulate(&cache.patches, &g1);
            }
            _ => self.layer.accumulate(&cache.patches, &g),
        }
    }
}

/// Cells averaged by each of the `G x G` bins of one RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPlan {
    pub bins: Vec<Vec<usize>>,
}

fn covered(lo: f64, hi: f64, n: usize) -> Vec<usize> {
    let hit: Vec<usize> = (0..n)
        .filter(|&k| {
            let c = k as f64 + 0.5;
            c >= lo && c < hi
        })
        .collect();
    if hit.is_empty() {
        let mid = (0.5 * (lo + hi)).floor().clamp(0.0, (n - 1) as f64);
        vec![mid as usize]
    } else {
        hit
    }
}

pub fn roi_plan(fmap: &FeatureMap, bbox: &BBox, bins: usize) -> RoiPlan {
    let (w, h) = fmap.image_size();
    let b = bbox.clip(w, h);
    if b.area() <= 0.0 {
        return RoiPlan {
            bins: vec![Vec::new(); bins * bins],
        };
    }
    let s = fmap.stride as f64;
    let (gx0, gy0) = (b.x0 / s, b.y0 / s);
    let (gw, gh) = (b.width() / s, b.height() / s);
    let mut out = Vec::with_capacity(bins * bins);
    for by in 0..bins {
        let rows = covered(gy0 + by as f64 * gh / bins as f64, gy0 + (by + 1) as f64 * gh / bins as f64, fmap.rows);
        for bx in 0..bins {
            let cols = covered(gx0 + bx as f64 * gw / bins as f64, gx0 + (bx + 1) as f64 * gw / bins as f64, fmap.cols);
            out.push(rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| fmap.cell_index(i, j)).collect());
        }
    }
    RoiPlan { bins: out }
}

/// Average-pool the box into `bins x bins` cells and concatenate bin-major.
pub fn roi_pool(fmap: &FeatureMap, bbox: &BBox, bins: usize) -> Array1<f64> {
    pool_with_plan(fmap, &roi_plan(fmap, bbox, bins))
}

fn pool_with_plan(fmap: &FeatureMap, plan: &RoiPlan) -> Array1<f64> {
    let d = fmap.channels();
    let mut out = Array1::zeros(plan.bins.len() * d);
    for (b, cells) in plan.bins.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let mut slot = out.slice_mut(ndarray::s![b * d..(b + 1) * d]);
        for &cell in cells {
            slot += &fmap.values.row(cell);
        }
        slot /= cells.len() as f64;
    }
    out
}

pub fn roi_pool_batch(fmap: &FeatureMap, boxes: &[BBox], bins: usize) -> (Matrix, Vec<RoiPlan>) {
    let width = bins * bins * fmap.channels();
    let mut pooled = Matrix::zeros((boxes.len(), width));
    let mut plans = Vec::with_capacity(boxes.len());
    for (r, b) in boxes.iter().enumerate() {
        let plan = roi_plan(fmap, b, bins);
        pooled.row_mut(r).assign(&pool_with_plan(fmap, &plan));
        plans.push(plan);
    }
    (pooled, plans)
}

/// Scatter pooled-feature gradients back onto the map's cells.
pub fn roi_pool_backward(plans: &[RoiPlan], grad: &Matrix, grad_fmap: &mut Matrix) {
    let d = grad_fmap.ncols();
    for (r, plan) in plans.iter().enumerate() {
        for (b, cells) in plan.bins.iter().enumerate() {
            if cells.is_empty() {
                continue;
            }
            let share = grad.slice(ndarray::s![r, b * d..(b + 1) * d]).to_owned() / cells.len() as f64;
            for &cell in cells {
                let mut row = grad_fmap.row_mut(cell);
                row += &share;
            }
        }
    }
}

/// `tanh(fc2(dropout(tanh(fc1(x)))))`, applied row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalMlp {
    pub fc1: Affine,
    pub fc2: Affine,
    /// Drop probability; 0 disables the mask.
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Matrix,
    hidden: Matrix,
    mask: Option<Matrix>,
    dropped: Matrix,
    output: Matrix,
}

impl ProposalMlp {
    pub fn new(input: usize, width: usize, rng: &mut impl Rng) -> Self {
        ProposalMlp {
            fc1: Affine::new("mlp.fc1", input, width, rng),
            fc2: Affine::new("mlp.fc2", width, width, rng),
            dropout: 0.0,
        }
    }

    /// Dropout is applied only when `rng` is given and the rate is positive.
    pub fn forward(&self, pooled: &Matrix, rng: Option<&mut dyn rand::RngCore>) -> Result<(Matrix, MlpCache)> {
        let hidden = tanh(&self.fc1.forward(pooled)?);
        let mask = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                Some(Matrix::from_shape_fn(hidden.raw_dim(), |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            }
            _ => None,
        };
        let dropped = match &mask {
            Some(m) => &hidden * m,
            None => hidden.clone(),
        };
        let output = tanh(&self.fc2.forward(&dropped)?);
        Ok((
            output.clone(),
            MlpCache {
                input: pooled.clone(),
                hidden,
                mask,
                dropped,
                output,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, grad: &Matrix) -> Matrix {
        let g2 = tanh_backward(&cache.output, grad);
        let mut gd = self.fc2.backward(&cache.dropped, &g2);
        if let Some(m) = &cache.mask {
            gd *= m;
        }
        let g1 = tanh_backward(&cache.hidden, &gd);
        self.fc1.backward(&cache.input, &g1)
    }
}

/// Data-aware feature extractor: global average pool, two affine layers
/// (relu between, tanh after) producing coefficients over learnable
/// prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dafe {
    pub fc1: Affine,
    pub fc2: Affine,
    /// `M x D` prototype matrix.
    pub prototypes: ParamTensor,
}

#[derive(Debug, Clone)]
pub struct DafeCache {
    pooled: Matrix,
    pre_hidden: Matrix,
    hidden: Matrix,
    pub coefficients: Matrix,
    cells: usize,
}

impl Dafe {
    pub fn new(channels: usize, hidden: usize, prototypes: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut p = ParamTensor::glorot("dafe.prototypes", prototypes, width, rng);
        p.value *= 0.1;
        Dafe {
            fc1: Affine::new("dafe.fc1", channels, hidden, rng),
            fc2: Affine::new("dafe.fc2", hidden, prototypes, rng),
            prototypes: p,
        }
    }

    /// Returns `X^daf` as a `1 x D` row.
    pub fn forward(&self, fmap: &FeatureMap) -> Result<(Matrix, DafeCache)> {
        let pooled = fmap.values.mean_axis(Axis(0)).expect("non-empty map").insert_axis(Axis(0));
        let pre_hidden = self.fc1.forward(&pooled)?;
        let hidden = relu(&pre_hidden);
        let coefficients = tanh(&self.fc2.forward(&hidden)?);
        let out = coefficients.dot(&self.prototypes.value);
        Ok((
            out,
            DafeCache {
                pooled,
                pre_hidden,
                hidden,
                coefficients,
                cells: fmap.cells(),
            },
        ))
    }

    /// Accumulates parameter gradients and adds the map gradient to `grad_fmap`.
    pub fn backward(&mut self, cache: &DafeCache, grad: &Matrix, grad_fmap: &mut Matrix) {
        self.prototypes.grad += &cache.coefficients.t().dot(grad);
        let g_alpha = grad.dot(&self.prototypes.value.t());
        let g2 = tanh_backward(&cache.coefficients, &g_alpha);
        let g_hidden = self.fc2.backward(&cache.hidden, &g2);
        let g1 = relu_backward(&cache.pre_hidden, &g_hidden);
        let g_pooled = self.fc1.backward(&cache.pooled, &g1);
        let share = g_pooled / cache.cells as f64;
        *grad_fmap += &share;
    }
}

/// `X^fuse = X^prop + X^daf` with `X^daf` broadcast over rows.
pub fn fuse(x_prop: &Matrix, x_daf: &Matrix) -> Matrix {
    x_prop + x_daf
}

/// Gradient of the broadcast addend.
pub fn fuse_backward(grad: &Matrix) -> Matrix {
    grad.sum_axis(Axis(0)).insert_axis(Axis(0))
}
