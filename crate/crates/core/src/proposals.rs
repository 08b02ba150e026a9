//! Region proposals: the location-oriented weakly supervised RPN, the
//! ground-truth oracle segmenter standing in for a promptable segmentation
//! model, and proposal merging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{bce, bce_grad, iou_loss, sigmoid, tanh, tanh_backward, Affine, Matrix};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{centerness_target, iou, ltrb_decode, ltrb_encode, BBox, LtrbTargets};
use crate::seed;
use crate::synthdata::Scene;

/// Shape logits are clamped to this range before `exp`.
pub const SHAPE_LOGIT_CLAMP: f64 = 8.0;

/// Which generator a proposal came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Learned,
    Segmenter,
}

/// Proposal set selection for training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalSource {
    LearnedOnly,
    SegmenterOnly,
    Merged,
}

impl ProposalSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "learned" | "learned-only" => Some(ProposalSource::LearnedOnly),
            "segmenter" | "segmenter-only" => Some(ProposalSource::SegmenterOnly),
            "merged" => Some(ProposalSource::Merged),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProposalSource::LearnedOnly => "learned-only",
            ProposalSource::SegmenterOnly => "segmenter-only",
            ProposalSource::Merged => "merged",
        }
    }

    pub fn uses_learned(self) -> bool {
        self != ProposalSource::SegmenterOnly
    }

    pub fn uses_segmenter(self) -> bool {
        self != ProposalSource::LearnedOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub origin: Origin,
}

/// Per-cell RPN outputs, row-major over the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationPredictions {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub p: Vec<f64>,
    pub c: Vec<f64>,
    pub t: Vec<LtrbTargets>,
}

impl LocationPredictions {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        let s = self.stride as f64;
        let (i, j) = (cell / self.cols, cell % self.cols);
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }

    pub fn score(&self, cell: usize) -> f64 {
        (self.c[cell] * self.p[cell]).sqrt()
    }
}

/// Gradients of a loss with respect to `p`, `c` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationGrads {
    pub p: Vec<f64>,
    pub c: Vec<f64>,
    pub t: Vec<[f64; 4]>,
}

/// Shared 3x3 convolution (tanh) followed by three 1x1 heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Lowsrpn {
    pub conv: Affine,
    pub p_head: Affine,
    pub c_head: Affine,
    pub t_head: Affine,
}

#[derive(Debug, Clone)]
pub struct RpnCache {
    columns: Matrix,
    hidden: Matrix,
    t_logits: Matrix,
}

fn im2col(fmap: &FeatureMap) -> Matrix {
    let d = fmap.channels();
    let mut out = Matrix::zeros((fmap.cells(), 9 * d));
    for i in 0..fmap.rows {
        for j in 0..fmap.cols {
            let mut row = out.row_mut(fmap.cell_index(i, j));
            for k in 0..9 {
                let (ni, nj) = ((i + k / 3) as isize - 1, (j + k % 3) as isize - 1);
                if ni < 0 || nj < 0 || ni as usize >= fmap.rows || nj as usize >= fmap.cols {
                    continue;
                }
                row.slice_mut(ndarray::s![k * d..(k + 1) * d])
                    .assign(&fmap.values.row(fmap.cell_index(ni as usize, nj as usize)));
            }
        }
    }
    out
}

fn col2im(grad: &Matrix, rows: usize, cols: usize, out: &mut Matrix) {
    let d = out.ncols();
    for i in 0..rows {
        for j in 0..cols {
            let g = grad.row(i * cols + j);
            for k in 0..9 {
                let (ni, nj) = ((i + k / 3) as isize - 1, (j + k % 3) as isize - 1);
                if ni < 0 || nj < 0 || ni as usize >= rows || nj as usize >= cols {
                    continue;
                }
                let mut target = out.row_mut(ni as usize * cols + nj as usize);
                target += &g.slice(ndarray::s![k * d..(k + 1) * d]);
            }
        }
    }
}

impl Lowsrpn {
    pub fn new(channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut t_head = Affine::new("rpn.t_head", width, 4, rng);
        // start near 8 px per side, roughly a small object
        t_head.bias.value.fill(8f64.ln());
        Lowsrpn {
            conv: Affine::new("rpn.conv", 9 * channels, width, rng),
            p_head: Affine::new("rpn.p_head", width, 1, rng),
            c_head: Affine::new("rpn.c_head", width, 1, rng),
            t_head,
        }
    }

    pub fn forward(&self, fmap: &FeatureMap) -> Result<(LocationPredictions, RpnCache)> {
        let columns = im2col(fmap);
        let hidden = tanh(&self.conv.forward(&columns)?);
        let zp = self.p_head.forward(&hidden)?;
        let zc = self.c_head.forward(&hidden)?;
        let t_logits = self.t_head.forward(&hidden)?;
        let preds = LocationPredictions {
            rows: fmap.rows,
            cols: fmap.cols,
            stride: fmap.stride,
            p: zp.column(0).iter().map(|&z| sigmoid(z)).collect(),
            c: zc.column(0).iter().map(|&z| sigmoid(z)).collect(),
            t: t_logits
                .rows()
                .into_iter()
                .map(|z| {
                    let e = |k: usize| z[k].clamp(-SHAPE_LOGIT_CLAMP, SHAPE_LOGIT_CLAMP).exp();
                    LtrbTargets::new(e(0), e(1), e(2), e(3))
                })
                .collect(),
        };
        Ok((
            preds,
            RpnCache {
                columns,
                hidden,
                t_logits,
            },
        ))
    }

    /// Back-propagates output gradients; adds the feature-map gradient into `grad_fmap`.
    pub fn backward(&mut self, cache: &RpnCache, preds: &LocationPredictions, grads: &LocationGrads, grad_fmap: &mut Matrix) {
        let n = preds.cells();
        let gzp = Matrix::from_shape_fn((n, 1), |(r, _)| grads.p[r] * preds.p[r] * (1.0 - preds.p[r]));
        let gzc = Matrix::from_shape_fn((n, 1), |(r, _)| grads.c[r] * preds.c[r] * (1.0 - preds.c[r]));
        let gzt = Matrix::from_shape_fn((n, 4), |(r, k)| {
            if cache.t_logits[[r, k]].abs() > SHAPE_LOGIT_CLAMP {
                0.0
            } else {
                grads.t[r][k] * preds.t[r].to_array()[k]
            }
        });
        let mut g_hidden = self.p_head.backward(&cache.hidden, &gzp);
        g_hidden += &self.c_head.backward(&cache.hidden, &gzc);
        g_hidden += &self.t_head.backward(&cache.hidden, &gzt);
        let g_conv = tanh_backward(&cache.hidden, &g_hidden);
        let g_columns = self.conv.backward(&cache.columns, &g_conv);
        col2im(&g_columns, preds.rows, preds.cols, grad_fmap);
    }
}

/// Top `top_n` cells by `sqrt(c p)`, boxes decoded around cell centres and
/// clipped to the image. Ties keep the lower cell index first.
pub fn decode_proposals(preds: &LocationPredictions, top_n: usize) -> Vec<Proposal> {
    let (w, h) = ((preds.cols * preds.stride) as f64, (preds.rows * preds.stride) as f64);
    let mut order: Vec<usize> = (0..preds.cells()).collect();
    let scores: Vec<f64> = order.iter().map(|&k| preds.score(k)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(top_n)
        .map(|k| Proposal {
            bbox: ltrb_decode(preds.center(k), &preds.t[k]).clip(w, h),
            score: scores[k],
            origin: Origin::Learned,
        })
        .collect()
}

/// Per-cell supervision for the RPN.
#[derive(Debug, Clone, PartialEq)]
pub struct PgTargets {
    /// Index of the assigned PGT box for positive cells.
    pub assigned: Vec<Option<usize>>,
    pub centerness: Vec<f64>,
    pub ltrb: Vec<LtrbTargets>,
}

impl PgTargets {
    pub fn positives(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }
}

/// A cell is positive when its centre lies in a PGT box; overlapping boxes
/// resolve to the smallest area, then the lowest index.
pub fn assign_pg_targets(pgt: &[BBox], rows: usize, cols: usize, stride: usize) -> PgTargets {
    let cells = rows * cols;
    let mut targets = PgTargets {
        assigned: vec![None; cells],
        centerness: vec![0.0; cells],
        ltrb: vec![LtrbTargets::new(0.0, 0.0, 0.0, 0.0); cells],
    };
    let s = stride as f64;
    for cell in 0..cells {
        let center = (((cell % cols) as f64 + 0.5) * s, ((cell / cols) as f64 + 0.5) * s);
        let mut best: Option<usize> = None;
        for (k, b) in pgt.iter().enumerate() {
            if b.contains(center.0, center.1) && best.map_or(true, |m| b.area() < pgt[m].area()) {
                best = Some(k);
            }
        }
        if let Some(k) = best {
            let t = ltrb_encode(center, &pgt[k]);
            targets.assigned[cell] = Some(k);
            targets.centerness[cell] = centerness_target(&t);
            targets.ltrb[cell] = t;
        }
    }
    targets
}

/// Mean BCE over all cells plus, averaged over positives, the centerness L1
/// and the IoU loss. Returns the loss and its gradient with respect to the
/// predictions.
pub fn loss_pg(preds: &LocationPredictions, targets: &PgTargets) -> Result<(f64, LocationGrads)> {
    let n = preds.cells();
    if targets.assigned.len() != n {
        return Err(Error::shape("loss_pg targets", &[targets.assigned.len()], &[n]));
    }
    let mut grads = LocationGrads {
        p: vec![0.0; n],
        c: vec![0.0; n],
        t: vec![[0.0; 4]; n],
    };
    let mut loss = 0.0;
    for k in 0..n {
        let y = if targets.assigned[k].is_some() { 1.0 } else { 0.0 };
        loss += bce(preds.p[k], y) / n as f64;
        grads.p[k] = bce_grad(preds.p[k], y) / n as f64;
    }
    let positives = targets.positives();
    if positives > 0 {
        let scale = 1.0 / positives as f64;
        for k in (0..n).filter(|&k| targets.assigned[k].is_some()) {
            let dc = preds.c[k] - targets.centerness[k];
            let (l_iou, g_iou) = iou_loss(&preds.t[k], &targets.ltrb[k]);
            loss += scale * (dc.abs() + l_iou);
            grads.c[k] = scale * dc.signum() * if dc == 0.0 { 0.0 } else { 1.0 };
            for (g, gi) in grads.t[k].iter_mut().zip(g_iou) {
                *g = scale * gi;
            }
        }
    }
    Ok((loss, grads))
}

/// Ground-truth oracle that emits an object's jittered box for every grid
/// prompt point falling inside the object.
pub fn oracle_grid_proposals(scene: &Scene, grid: usize, sigma: f64, rng_seed: u64) -> Vec<Proposal> {
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut rng = seed::rng(seed::derive_str(rng_seed, "segmenter"));
    let mut boxes: Vec<BBox> = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let (x, y) = ((gx as f64 + 0.5) * w / grid as f64, (gy as f64 + 0.5) * h / grid as f64);
            let hit = scene
                .objects
                .iter()
                .filter(|o| o.bbox.contains(x, y))
                .min_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()));
            let Some(obj) = hit else { continue };
            let b = jitter_box(&obj.bbox, sigma, &mut rng).clip(w, h);
            if b.area() > 0.0 && boxes.iter().all(|k| iou(k, &b) <= 0.95) {
                boxes.push(b);
            }
        }
    }
    boxes
        .into_iter()
        .map(|bbox| Proposal {
            bbox,
            score: 1.0,
            origin: Origin::Segmenter,
        })
        .collect()
}

fn jitter_box(b: &BBox, sigma: f64, rng: &mut impl Rng) -> BBox {
    if sigma <= 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.gen_range(-sigma..sigma);
    let out = BBox::new(b.x0 + d() * w, b.y0 + d() * h, b.x1 + d() * w, b.y1 + d() * h);
    if out.is_valid() && out.area() > 0.0 {
        out
    } else {
        *b
    }
}

/// Snap `query` to the ground-truth box it overlaps most, if that overlap
/// reaches `iou_floor`; otherwise return it unchanged.
pub fn oracle_box_refine(scene: &Scene, query: &BBox, iou_floor: f64, sigma: f64, rng: &mut impl Rng) -> BBox {
    let best = scene
        .objects
        .iter()
        .map(|o| (iou(&o.bbox, query), o.bbox))
        .fold(None::<(f64, BBox)>, |acc, cur| match acc {
            Some(a) if a.0 >= cur.0 => Some(a),
            _ => Some(cur),
        });
    match best {
        Some((v, b)) if v >= iou_floor => jitter_box(&b, sigma, rng).clip(scene.width as f64, scene.height as f64),
        _ => *query,
    }
}

/// Segmenter proposals first, then learned ones by descending score, dropping
/// learned boxes that duplicate a segmenter box (IoU > 0.95); at most `cap`.
pub fn merge_proposals(learned: &[Proposal], segmenter: &[Proposal], cap: usize) -> Vec<Proposal> {
    let mut sorted: Vec<&Proposal> = learned.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<Proposal> = segmenter.iter().take(cap).copied().collect();
    for p in sorted {
        if out.len() >= cap {
            break;
        }
        if segmenter.iter().any(|s| iou(&s.bbox, &p.bbox) > 0.95) {
            continue;
        }
        out.push(*p);
    }
    out
}
