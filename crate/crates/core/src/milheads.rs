//! Multiple-instance heads: text-embedding classifiers, the two-stream object
//! mining module, instance refinement branches with box regression, pseudo
//! ground-truth propagation between branches, and inference scoring.

use ndarray::{Array1, Axis};
use rand::Rng;

use crate::diffcore::{bce, bce_grad, smooth_l1, smooth_l1_grad, softmax_cols, softmax_cols_backward, softmax_rows, softmax_rows_backward, Affine, Matrix};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BBox};
use crate::seed;
use crate::synthdata::Vocabulary;

/// Default cosine temperature.
pub const TAU: f64 = 0.07;

/// Unit-norm class embeddings, one column per category.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingTable {
    pub names: Vec<String>,
    pub novel: Vec<bool>,
    /// `D x C`.
    pub t: Matrix,
}

impl TextEmbeddingTable {
    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn categories(&self) -> usize {
        self.t.ncols()
    }

    /// Refinement classifier `[T | 0]`.
    pub fn with_background(&self) -> Matrix {
        ndarray::concatenate![Axis(1), self.t, Matrix::zeros((self.dim(), 1))]
    }

    pub fn select(&self, cats: &[usize]) -> TextEmbeddingTable {
        TextEmbeddingTable {
            names: cats.iter().map(|&c| self.names[c].clone()).collect(),
            novel: cats.iter().map(|&c| self.novel[c]).collect(),
            t: self.t.select(Axis(1), cats),
        }
    }
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Unit-normalised weighted sum of the given columns.
pub fn mixture_embedding(t: &Matrix, mixture: &[(usize, f64)]) -> Array1<f64> {
    let mut v = Array1::zeros(t.nrows());
    for &(k, w) in mixture {
        v.scaled_add(w, &t.column(k));
    }
    normalized(v)
}

/// Deterministic unit vector for a category name.
pub fn name_embedding(name: &str, dim: usize, seed_value: u64) -> Array1<f64> {
    let mut rng = seed::rng(seed::derive_str(seed_value, name));
    normalized(Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0)))
}

/// Base categories get a pseudo-random unit vector keyed by `(seed, name)`;
/// mixture categories get the normalised mixture of their components.
pub fn build_embeddings(vocab: &Vocabulary, dim: usize, seed_value: u64) -> Result<TextEmbeddingTable> {
    vocab.validate()?;
    let mut t = Matrix::zeros((dim, vocab.len()));
    for (c, cat) in vocab.categories.iter().enumerate() {
        if cat.mixture.is_none() {
            t.column_mut(c).assign(&name_embedding(&cat.name, dim, seed_value));
        }
    }
    for (c, cat) in vocab.categories.iter().enumerate() {
        if let Some(mix) = &cat.mixture {
            let v = mixture_embedding(&t, mix);
            t.column_mut(c).assign(&v);
        }
    }
    Ok(TextEmbeddingTable {
        names: vocab.names(),
        novel: vocab.categories.iter().map(|c| c.is_novel).collect(),
        t,
    })
}

/// `cos(x_r, w_c) / tau` for unit-norm columns `w`; zero rows and zero
/// columns give cosine 0.
#[derive(Debug, Clone)]
pub struct CosineLogits {
    pub logits: Matrix,
    unit: Matrix,
    norms: Vec<f64>,
    tau: f64,
}

pub fn cosine_logits(x: &Matrix, w: &Matrix, tau: f64) -> Result<CosineLogits> {
    if x.ncols() != w.nrows() {
        return Err(Error::shape("cosine classifier", &[x.nrows(), x.ncols()], &[w.nrows(), w.ncols()]));
    }
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut unit = x.clone();
    for (mut row, &n) in unit.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        }
    }
    let logits = unit.dot(w) / tau;
    Ok(CosineLogits { logits, unit, norms, tau })
}

impl CosineLogits {
    pub fn backward(&self, w: &Matrix, grad: &Matrix) -> Matrix {
        let g_unit = grad.dot(&w.t()) / self.tau;
        let mut gx = Matrix::zeros(self.unit.raw_dim());
        for r in 0..gx.nrows() {
            let n = self.norms[r];
            if n == 0.0 {
                continue;
            }
            let u = self.unit.row(r);
            let gu = g_unit.row(r);
            let proj = u.dot(&gu);
            gx.row_mut(r).assign(&((&gu - &(&u * proj)) / n));
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub struct ScoreMatrices {
    pub classification: CosineLogits,
    pub detection: Matrix,
    pub row_soft: Matrix,
    pub col_soft: Matrix,
    /// `R x C`.
    pub s: Matrix,
    pub phi: Vec<f64>,
}

/// Two-stream mining: a fixed cosine classification stream and a learnable
/// detection stream, combined by row/column softmax product.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningHead {
    pub detection: Affine,
    pub tau: f64,
}

impl MiningHead {
    pub fn new(dim: usize, categories: usize, tau: f64, rng: &mut impl Rng) -> Self {
        MiningHead {
            detection: Affine::new("mining.detection", dim, categories, rng),
            tau,
        }
    }

    pub fn forward(&self, x: &Matrix, t: &Matrix) -> Result<ScoreMatrices> {
        if x.nrows() == 0 {
            return Err(Error::shape("mining needs at least one proposal", &[0, x.ncols()], &[1, x.ncols()]));
        }
        if t.ncols() != self.detection.output_dim() {
            return Err(Error::shape("mining categories", &[t.nrows(), t.ncols()], &[self.detection.input_dim(), self.detection.output_dim()]));
        }
        let classification = cosine_logits(x, t, self.tau)?;
        let detection = self.detection.forward(x)?;
        let row_soft = softmax_rows(&classification.logits);
        let col_soft = softmax_cols(&detection);
        let s = &row_soft * &col_soft;
        let phi = s.sum_axis(Axis(0)).to_vec();
        Ok(ScoreMatrices {
            classification,
            detection,
            row_soft,
            col_soft,
            s,
            phi,
        })
    }

    /// Accumulates `W^d` gradients and returns the gradient for `x`.
    pub fn backward(&mut self, x: &Matrix, t: &Matrix, scores: &ScoreMatrices, grad_phi: &[f64]) -> Matrix {
        let g_s = Matrix::from_shape_fn(scores.s.raw_dim(), |(_, c)| grad_phi[c]);
        let g_rows = softmax_rows_backward(&scores.row_soft, &(&g_s * &scores.col_soft));
        let g_cols = softmax_cols_backward(&scores.col_soft, &(&g_s * &scores.row_soft));
        let mut gx = self.detection.backward(x, &g_cols);
        gx += &scores.classification.backward(t, &g_rows);
        gx
    }
}

/// `sum_c bce(phi_c, y_c)` and its gradient.
pub fn loss_om(phi: &[f64], y: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(phi.len(), y.len(), "loss_om: label length");
    let loss = phi.iter().zip(y).map(|(&p, &t)| bce(p, f64::from(t))).sum();
    let grad = phi.iter().zip(y).map(|(&p, &t)| bce_grad(p, f64::from(t))).collect();
    (loss, grad)
}

/// Per-proposal refinement targets; `labels[r] == categories` means background.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSupervision {
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub targets: Vec<Option<BBox>>,
    /// `(category, proposal index, weight)` per present category.
    pub seeds: Vec<(usize, usize, f64)>,
}

impl RefinementSupervision {
    pub fn foreground(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Propagate pseudo ground truth from `prev` (`R x C` category scores) onto
/// the proposals. `refine(index, box)` adjusts each seed box before matching.
pub fn pgt_assign(
    prev: &Matrix,
    proposals: &[BBox],
    y: &[u8],
    mut refine: Option<&mut dyn FnMut(usize, &BBox) -> BBox>,
    iou_fg: f64,
) -> RefinementSupervision {
    let categories = prev.ncols();
    let mut seeds: Vec<(usize, BBox, f64)> = Vec::new();
    let mut seed_index = Vec::new();
    for c in (0..categories).filter(|&c| y[c] > 0) {
        let column = prev.column(c);
        if column.is_empty() {
            continue;
        }
        let mut best = 0;
        for r in 1..column.len() {
            if column[r] > column[best] {
                best = r;
            }
        }
        let mut b = proposals[best];
        if let Some(f) = refine.as_mut() {
            b = f(best, &b);
        }
        seeds.push((c, b, column[best]));
        seed_index.push((c, best, column[best]));
    }

    let mut sup = RefinementSupervision {
        labels: vec![categories; proposals.len()],
        weights: vec![0.0; proposals.len()],
        targets: vec![None; proposals.len()],
        seeds: seed_index,
    };
    let mut matched_max: Option<f64> = None;
    for (r, p) in proposals.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, (_, b, _)) in seeds.iter().enumerate() {
            let v = iou(p, b);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        if let Some((k, v)) = best {
            if v >= iou_fg {
                let (c, b, w) = seeds[k];
                sup.labels[r] = c;
                sup.weights[r] = w;
                sup.targets[r] = Some(b);
                matched_max = Some(matched_max.map_or(w, |m: f64| m.max(w)));
            }
        }
    }
    let bg = matched_max.unwrap_or(1.0);
    for r in 0..proposals.len() {
        if sup.targets[r].is_none() {
            sup.weights[r] = bg;
        }
    }
    sup
}

/// Centre/size deltas of `target` relative to `anchor`; anchor sides are
/// floored at 1 px.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width().max(1.0), anchor.height().max(1.0));
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width().max(1e-3) / aw).ln(),
        (target.height().max(1e-3) / ah).ln(),
    ]
}

pub fn decode_deltas(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (aw, ah) = (anchor.width().max(1.0), anchor.height().max(1.0));
    let (ax, ay) = anchor.center();
    let (cx, cy) = (ax + d[0] * aw, ay + d[1] * ah);
    let (w, h) = (aw * d[2].clamp(-4.0, 4.0).exp(), ah * d[3].clamp(-4.0, 4.0).exp());
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// `K` refinement branches. Classification is the fixed background-augmented
/// cosine classifier; each branch owns a class-agnostic box regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineHead {
    pub regressors: Vec<Affine>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub cosine: CosineLogits,
    /// `R x (C+1)` row-softmax probabilities, identical for every branch.
    pub probs: Matrix,
    /// One `R x 4` delta matrix per branch.
    pub deltas: Vec<Matrix>,
}

/// Gradients of `loss_ir` with respect to the refinement outputs.
#[derive(Debug, Clone)]
pub struct RefineGrads {
    pub logits: Matrix,
    pub deltas: Vec<Matrix>,
}

/// Background-augmented cosine probabilities.
pub fn refine_scores(x: &Matrix, t: &Matrix, tau: f64) -> Result<Matrix> {
    let w = ndarray::concatenate![Axis(1), *t, Matrix::zeros((t.nrows(), 1))];
    Ok(softmax_rows(&cosine_logits(x, &w, tau)?.logits))
}

impl RefineHead {
    pub fn new(dim: usize, branches: usize, tau: f64, rng: &mut impl Rng) -> Self {
        let regressors = (0..branches)
            .map(|k| {
                let mut a = Affine::new(&format!("refine.{k}.regressor"), dim, 4, rng);
                a.weight.value *= 0.1;
                a
            })
            .collect();
        RefineHead { regressors, tau }
    }

    pub fn branches(&self) -> usize {
        self.regressors.len()
    }

    /// `wr` is the `D x (C+1)` classifier from [`TextEmbeddingTable::with_background`].
    pub fn forward(&self, x: &Matrix, wr: &Matrix) -> Result<RefineOutput> {
        let cosine = cosine_logits(x, wr, self.tau)?;
        let probs = softmax_rows(&cosine.logits);
        let deltas = self.regressors.iter().map(|a| a.forward(x)).collect::<Result<Vec<_>>>()?;
        Ok(RefineOutput { cosine, probs, deltas })
    }

    pub fn backward(&mut self, x: &Matrix, wr: &Matrix, out: &RefineOutput, grads: &RefineGrads) -> Matrix {
        let mut gx = out.cosine.backward(wr, &grads.logits);
        for (a, g) in self.regressors.iter_mut().zip(&grads.deltas) {
            gx += &a.backward(x, g);
        }
        gx
    }
}

/// Weighted cross-entropy over proposals plus smooth-L1 delta regression on
/// foreground proposals, summed over branches.
pub fn loss_ir(out: &RefineOutput, proposals: &[BBox], sups: &[RefinementSupervision]) -> Result<(f64, RefineGrads)> {
    let (r_count, width) = out.probs.dim();
    if sups.len() != out.deltas.len() {
        return Err(Error::shape("refinement supervision per branch", &[sups.len()], &[out.deltas.len()]));
    }
    let mut grads = RefineGrads {
        logits: Matrix::zeros((r_count, width)),
        deltas: out.deltas.iter().map(|d| Matrix::zeros(d.raw_dim())).collect(),
    };
    let mut loss = 0.0;
    let log_probs = log_softmax_rows(&out.cosine.logits);
    for (k, sup) in sups.iter().enumerate() {
        if sup.labels.len() != r_count {
            return Err(Error::shape("refinement supervision rows", &[sup.labels.len()], &[r_count]));
        }
        for r in 0..r_count {
            let w = sup.weights[r] / r_count as f64;
            if w == 0.0 {
                continue;
            }
            let label = sup.labels[r];
            loss -= w * log_probs[[r, label]];
            for c in 0..width {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grads.logits[[r, c]] += w * (out.probs[[r, c]] - onehot);
            }
        }
        let scale = 1.0 / sup.foreground().max(1) as f64;
        for r in 0..r_count {
            if let Some(target) = &sup.targets[r] {
                let want = encode_deltas(&proposals[r], target);
                let have: Vec<f64> = out.deltas[k].row(r).to_vec();
                loss += scale * smooth_l1(&have, &want);
                for (j, g) in smooth_l1_grad(&have, &want).into_iter().enumerate() {
                    grads.deltas[k][[r, j]] = scale * g;
                }
            }
        }
    }
    Ok((loss, grads))
}

fn log_softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Branch-averaged category scores with the last branch's boxes, then
/// per-category NMS and a score floor.
pub fn inference(out: &RefineOutput, proposals: &[BBox], image_size: (f64, f64), nms_thr: f64, floor: f64) -> Vec<ScoredBox> {
    let (r_count, width) = out.probs.dim();
    let categories = width - 1;
    if r_count == 0 {
        return Vec::new();
    }
    // branches share the classifier, so the branch mean is the common matrix
    let probs = &out.probs;
    let last = out.deltas.last().expect("at least one branch");
    let boxes: Vec<BBox> = (0..r_count)
        .map(|r| {
            let d = [last[[r, 0]], last[[r, 1]], last[[r, 2]], last[[r, 3]]];
            decode_deltas(&proposals[r], &d).clip(image_size.0, image_size.1)
        })
        .collect();
    let mut dets = Vec::new();
    for c in 0..categories {
        let idx: Vec<usize> = (0..r_count).filter(|&r| probs[[r, c]] >= floor && boxes[r].area() > 0.0).collect();
        let cand: Vec<BBox> = idx.iter().map(|&r| boxes[r]).collect();
        let scores: Vec<f64> = idx.iter().map(|&r| probs[[r, c]]).collect();
        for k in nms(&cand, &scores, nms_thr) {
            dets.push(ScoredBox {
                bbox: cand[k],
                category: c,
                score: scores[k],
            });
        }
    }
    dets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions, ParamSet, ParamTensor};

    fn random(rows: usize, cols: usize, s: u64) -> Matrix {
        let mut rng = seed::rng(s);
        Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn unit_columns(dim: usize, cols: usize, s: u64) -> Matrix {
        let mut t = random(dim, cols, s);
        for mut c in t.columns_mut() {
            let n = c.dot(&c).sqrt();
            c /= n;
        }
        t
    }

    #[test]
    fn embedding_examples() {
        let vocab = Vocabulary::builtin(4, 2).unwrap();
        let a = build_embeddings(&vocab, 16, 3).unwrap();
        assert_eq!(a, build_embeddings(&vocab, 16, 3).unwrap());
        assert_ne!(a.t, build_embeddings(&vocab, 16, 4).unwrap().t);
        for c in a.t.columns() {
            assert!((c.dot(&c) - 1.0).abs() < 1e-12);
        }
        let wr = a.with_background();
        assert!(wr.column(6).iter().all(|&v| v == 0.0));

        let mut v = vocab.clone();
        v.categories[4].mixture = Some(vec![(1, 1.0)]);
        let b = build_embeddings(&v, 16, 3).unwrap();
        for i in 0..16 {
            assert!((b.t[[i, 4]] - b.t[[i, 1]]).abs() < 1e-15);
        }
        let mut dup = vocab.clone();
        dup.categories[1].name = dup.categories[0].name.clone();
        assert!(build_embeddings(&dup, 16, 3).is_err());
    }

    #[test]
    fn mixture_orders_cosines() {
        let mut rng = seed::rng(11);
        let basis = Matrix::eye(6);
        for _ in 0..200 {
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            let mix: Vec<(usize, f64)> = w.iter().enumerate().map(|(i, &v)| (i * 2, v)).collect();
            let e = mixture_embedding(&basis, &mix);
            for i in 0..3 {
                for j in 0..3 {
                    if w[i] > w[j] {
                        assert!(e.dot(&basis.column(i * 2)) > e.dot(&basis.column(j * 2)));
                    }
                }
            }
        }
    }

    #[test]
    fn mining_examples() {
        let mut rng = seed::rng(1);
        let t = unit_columns(5, 3, 2);
        let head = MiningHead::new(5, 3, TAU, &mut rng);
        let x = random(1, 5, 3);
        let s = head.forward(&x, &t).unwrap();
        assert!(s.col_soft.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        for c in 0..3 {
            assert!((s.phi[c] - s.row_soft[[0, c]]).abs() < 1e-15);
        }

        // both streams zero
        let mut head = MiningHead::new(4, 2, TAU, &mut rng);
        head.detection.weight.value.fill(0.0);
        head.detection.bias.value.fill(0.0);
        let s = head.forward(&Matrix::zeros((2, 4)), &unit_columns(4, 2, 5)).unwrap();
        assert!(s.s.iter().all(|&v| v == 0.25));
        assert_eq!(s.phi, vec![0.5, 0.5]);
        assert!(head.forward(&Matrix::zeros((0, 4)), &unit_columns(4, 2, 5)).is_err());
    }

    /// Direct evaluation with explicit loops and exponentials.
    fn phi_oracle(x: &Matrix, t: &Matrix, w: &Matrix, b: &Matrix, tau: f64) -> Vec<f64> {
        let (r_count, d) = x.dim();
        let c_count = t.ncols();
        let mut sc = vec![vec![0.0; c_count]; r_count];
        let mut sd = vec![vec![0.0; c_count]; r_count];
        for r in 0..r_count {
            let n: f64 = (0..d).map(|k| x[[r, k]] * x[[r, k]]).sum::<f64>().sqrt();
            for c in 0..c_count {
                let dot: f64 = (0..d).map(|k| x[[r, k]] * t[[k, c]]).sum();
                sc[r][c] = if n > 0.0 { dot / n / tau } else { 0.0 };
                sd[r][c] = b[[0, c]] + (0..d).map(|k| x[[r, k]] * w[[k, c]]).sum::<f64>();
            }
        }
        (0..c_count)
            .map(|c| {
                (0..r_count)
                    .map(|r| {
                        let row: f64 = (0..c_count).map(|j| sc[r][j].exp()).sum();
                        let col: f64 = (0..r_count).map(|i| sd[i][c].exp()).sum();
                        sc[r][c].exp() / row * sd[r][c].exp() / col
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn mining_matches_direct_oracle() {
        let mut rng = seed::rng(4);
        let t = unit_columns(6, 4, 8);
        let head = MiningHead::new(6, 4, TAU, &mut rng);
        let x = random(3, 6, 9);
        let s = head.forward(&x, &t).unwrap();
        let oracle = phi_oracle(&x, &t, &head.detection.weight.value, &head.detection.bias.value, TAU);
        for c in 0..4 {
            assert!((s.phi[c] - oracle[c]).abs() < 1e-12);
            assert!(s.phi[c] > 0.0 && s.phi[c] < 1.0);
        }
    }

    #[test]
    fn mining_invariances() {
        let mut rng = seed::rng(5);
        let t = unit_columns(6, 3, 1);
        let head = MiningHead::new(6, 3, TAU, &mut rng);
        let x = random(5, 6, 2);
        let a = head.forward(&x, &t).unwrap();
        let b = cosine_logits(&(&x * 3.7), &t, TAU).unwrap();
        for (u, v) in a.classification.logits.iter().zip(b.logits.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select(Axis(0), &perm);
        let p = head.forward(&xp, &t).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((p.s[[r, c]] - a.s[[src, c]]).abs() < 1e-12);
            }
        }
        for c in 0..3 {
            assert!((p.phi[c] - a.phi[c]).abs() < 1e-12);
        }

        let mut z = x.clone();
        z.row_mut(2).fill(0.0);
        let zc = cosine_logits(&z, &t, TAU).unwrap();
        assert!(zc.logits.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_om_examples() {
        let (l, _) = loss_om(&[0.999, 0.001, 0.998], &[1, 0, 1]);
        assert!(l < 0.01);
        let (l, _) = loss_om(&[0.5; 4], &[1, 0, 0, 1]);
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    struct Probe {
        input: Affine,
        mining: MiningHead,
        refine: RefineHead,
    }

    impl ParamSet for Probe {
        fn params(&self) -> Vec<&ParamTensor> {
            let mut v: Vec<&ParamTensor> = self.input.params().into_iter().collect();
            v.extend(self.mining.detection.params());
            for a in &self.refine.regressors {
                v.extend(a.params());
            }
            v
        }
        fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
            let mut v: Vec<&mut ParamTensor> = self.input.params_mut().into_iter().collect();
            v.extend(self.mining.detection.params_mut());
            for a in &mut self.refine.regressors {
                v.extend(a.params_mut());
            }
            v
        }
    }

    fn probe(seed_value: u64) -> Probe {
        let mut rng = seed::rng(seed_value);
        Probe {
            input: Affine::new("input", 7, 6, &mut rng),
            mining: MiningHead::new(6, 3, TAU, &mut rng),
            refine: RefineHead::new(6, 3, TAU, &mut rng),
        }
    }

    #[test]
    fn loss_om_gradient() {
        let mut m = probe(6);
        let t = unit_columns(6, 3, 7);
        let input = random(5, 7, 8);
        let y = [1u8, 0, 1];
        let report = grad_check(
            &mut m,
            |m, grad| {
                let x = m.input.forward(&input)?;
                let s = m.mining.forward(&x, &t)?;
                let (loss, g) = loss_om(&s.phi, &y);
                if grad {
                    let gx = m.mining.backward(&x, &t, &s, &g);
                    m.input.accumulate(&input, &gx);
                }
                Ok(loss)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn loss_ir_gradient() {
        let mut m = probe(9);
        let t = unit_columns(6, 3, 10);
        let wr = ndarray::concatenate![Axis(1), t, Matrix::zeros((6, 1))];
        let input = random(5, 7, 11);
        let boxes: Vec<BBox> = (0..5).map(|k| BBox::new(k as f64 * 3.0, 2.0, k as f64 * 3.0 + 10.0, 14.0 + k as f64)).collect();
        let x0 = m.input.forward(&input).unwrap();
        let out0 = m.refine.forward(&x0, &wr).unwrap();
        let y = [1u8, 0, 1];
        let mut sups = vec![pgt_assign(&out0.probs.slice(ndarray::s![.., 0..3]).to_owned(), &boxes, &y, None, 0.5)];
        sups.push(pgt_assign(&random(5, 3, 12).mapv(f64::abs), &boxes, &y, None, 0.3));
        sups.push(pgt_assign(&random(5, 3, 13).mapv(f64::abs), &boxes, &[0, 1, 0], None, 0.5));
        for s in &mut sups {
            for (k, tgt) in s.targets.iter_mut().enumerate() {
                if let Some(b) = tgt {
                    // keep regression residuals inside the quadratic zone
                    *b = BBox::new(b.x0 + 0.3 * k as f64, b.y0 - 0.2, b.x1 + 0.5, b.y1 + 0.1 * k as f64);
                }
            }
        }
        let report = grad_check(
            &mut m,
            |m, grad| {
                let x = m.input.forward(&input)?;
                let out = m.refine.forward(&x, &wr)?;
                let (loss, g) = loss_ir(&out, &boxes, &sups)?;
                if grad {
                    let gx = m.refine.backward(&x, &wr, &out, &g);
                    m.input.accumulate(&input, &gx);
                }
                Ok(loss)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn refine_score_examples() {
        let t = unit_columns(5, 3, 1);
        let p = refine_scores(&random(4, 5, 2), &t, TAU).unwrap();
        assert_eq!(p.ncols(), 4);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let x = t.column(1).to_owned().insert_axis(Axis(0));
        let sharp = refine_scores(&x, &t, 0.001).unwrap();
        assert!(sharp[[0, 1]] > 0.999);
    }

    #[test]
    fn loss_ir_examples() {
        let mut rng = seed::rng(2);
        let head = RefineHead::new(4, 2, TAU, &mut rng);
        let t = unit_columns(4, 2, 3);
        let wr = ndarray::concatenate![Axis(1), t, Matrix::zeros((4, 1))];
        let boxes = [BBox::new(0., 0., 10., 10.), BBox::new(20., 20., 30., 40.)];
        let out = head.forward(&random(2, 4, 4), &wr).unwrap();
        let zero = RefinementSupervision {
            labels: vec![0, 2],
            weights: vec![0.0, 0.0],
            targets: vec![None, None],
            seeds: Vec::new(),
        };
        let (l, g) = loss_ir(&out, &boxes, &[zero.clone(), zero.clone()]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.logits.iter().all(|&v| v == 0.0));

        // one-hot scores from a near-zero temperature and exact deltas
        let x = ndarray::stack![Axis(0), t.column(0), t.column(1)];
        let mut sharp = head.clone();
        sharp.tau = 1e-4;
        for a in &mut sharp.regressors {
            a.weight.value.fill(0.0);
            a.bias.value.fill(0.0);
        }
        let out = sharp.forward(&x, &wr).unwrap();
        let sup = RefinementSupervision {
            labels: vec![0, 1],
            weights: vec![1.0, 1.0],
            targets: vec![Some(boxes[0]), Some(boxes[1])],
            seeds: Vec::new(),
        };
        let (l, _) = loss_ir(&out, &boxes, &[sup.clone(), sup]).unwrap();
        assert!(l < 1e-5, "{l}");
    }

    #[test]
    fn pgt_examples() {
        let one = [BBox::new(0., 0., 10., 10.)];
        let sup = pgt_assign(&Matrix::from_elem((1, 2), 0.3), &one, &[0, 1], None, 0.5);
        assert_eq!(sup.labels, vec![1]);
        assert_eq!(sup.weights, vec![0.3]);
        assert_eq!(sup.targets, vec![Some(one[0])]);

        // second proposal has IoU 0.4 with the seed
        let two = [BBox::new(0., 0., 10., 10.), BBox::new(0., 0., 10., 4.)];
        assert!((iou(&two[0], &two[1]) - 0.4).abs() < 1e-12);
        let prev = Matrix::from_shape_vec((2, 1), vec![0.9, 0.1]).unwrap();
        let sup = pgt_assign(&prev, &two, &[1], None, 0.5);
        assert_eq!(sup.labels, vec![0, 1]);
        assert_eq!(sup.weights, vec![0.9, 0.9]);
        assert_eq!(sup.targets[1], None);

        let sup = pgt_assign(&prev, &two, &[0], None, 0.5);
        assert_eq!(sup.labels, vec![1, 1]);
        assert_eq!(sup.weights, vec![1.0, 1.0]);

        let mut shift = |_: usize, b: &BBox| BBox::new(b.x0, b.y0, b.x1, b.y1 - 6.0);
        let sup = pgt_assign(&prev, &two, &[1], Some(&mut shift), 0.5);
        assert_eq!(sup.labels, vec![1, 0]);
        assert_eq!(sup.targets[1], Some(two[1]));
    }

    /// Independent formulation: for each proposal, enumerate every seed and
    /// pick the best-overlapping one by explicit comparison.
    fn pgt_oracle(prev: &Matrix, boxes: &[BBox], y: &[u8], thr: f64) -> (Vec<usize>, Vec<f64>) {
        let c_count = prev.ncols();
        let seeds: Vec<(usize, usize)> = (0..c_count)
            .filter(|&c| y[c] == 1)
            .map(|c| {
                let m = prev.column(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (c, (0..boxes.len()).find(|&r| prev[[r, c]] == m).unwrap())
            })
            .collect();
        let mut labels = vec![c_count; boxes.len()];
        let mut weights = vec![0.0; boxes.len()];
        for (r, b) in boxes.iter().enumerate() {
            let overlaps: Vec<f64> = seeds.iter().map(|&(_, s)| iou(b, &boxes[s])).collect();
            let Some(top) = overlaps.iter().cloned().reduce(f64::max) else { continue };
            let k = overlaps.iter().position(|&v| v == top).unwrap();
            if top >= thr {
                labels[r] = seeds[k].0;
                weights[r] = prev[[seeds[k].1, seeds[k].0]];
            }
        }
        let fg: Vec<f64> = (0..boxes.len()).filter(|&r| labels[r] < c_count).map(|r| weights[r]).collect();
        let bg = if fg.is_empty() { 1.0 } else { fg.iter().cloned().fold(0.0, f64::max) };
        for r in 0..boxes.len() {
            if labels[r] == c_count {
                weights[r] = bg;
            }
        }
        (labels, weights)
    }

    #[test]
    fn pgt_matches_exhaustive_oracle() {
        let boxes = [
            BBox::new(0., 0., 10., 10.),
            BBox::new(1., 1., 11., 11.),
            BBox::new(20., 20., 30., 30.),
            BBox::new(21., 19., 30., 31.),
            BBox::new(5., 5., 25., 25.),
        ];
        let prev = Matrix::from_shape_vec((5, 2), vec![0.7, 0.1, 0.2, 0.1, 0.05, 0.6, 0.04, 0.3, 0.01, 0.2]).unwrap();
        let sup = pgt_assign(&prev, &boxes, &[1, 1], None, 0.5);
        let (labels, weights) = pgt_oracle(&prev, &boxes, &[1, 1], 0.5);
        assert_eq!(sup.labels, labels);
        assert_eq!(sup.weights, weights);
        assert_eq!(labels, vec![0, 0, 1, 1, 2]);

        let mut rng = seed::rng(12);
        for _ in 0..300 {
            let boxes: Vec<BBox> = (0..5)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
                    BBox::new(x, y, x + rng.gen_range(2.0..15.0), y + rng.gen_range(2.0..15.0))
                })
                .collect();
            let prev = random(5, 2, rng.gen()).mapv(f64::abs);
            let y = [rng.gen_range(0..2u8), rng.gen_range(0..2u8)];
            let sup = pgt_assign(&prev, &boxes, &y, None, 0.5);
            let (labels, weights) = pgt_oracle(&prev, &boxes, &y, 0.5);
            assert_eq!(sup.labels, labels);
            assert_eq!(sup.weights, weights);
            for c in (0..2).filter(|&c| y[c] == 1) {
                let m = prev.column(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let &(_, r, w) = sup.seeds.iter().find(|s| s.0 == c).unwrap();
                assert_eq!(prev[[r, c]], m);
                assert_eq!(w, m);
            }
        }
    }

    #[test]
    fn delta_round_trip() {
        let a = BBox::new(3., 4., 20., 30.);
        let b = BBox::new(5., 1., 18., 40.);
        let d = encode_deltas(&a, &b);
        let back = decode_deltas(&a, &d);
        for (u, v) in [(back.x0, b.x0), (back.y0, b.y0), (back.x1, b.x1), (back.y1, b.y1)] {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn inference_examples() {
        let mut rng = seed::rng(3);
        let t = unit_columns(4, 2, 6);
        let wr = ndarray::concatenate![Axis(1), t, Matrix::zeros((4, 1))];
        let head = RefineHead::new(4, 1, TAU, &mut rng);
        let b = BBox::new(5., 5., 25., 25.);
        let x = ndarray::stack![Axis(0), t.column(0), t.column(0)];
        let out = head.forward(&x, &wr).unwrap();
        let dets = inference(&out, &[b, b], (64.0, 64.0), 0.3, 0.01);
        assert_eq!(dets.iter().filter(|d| d.category == 0).count(), 1);

        let head = RefineHead::new(4, 3, TAU, &mut rng);
        let x = random(6, 4, 9);
        let boxes: Vec<BBox> = (0..6).map(|k| BBox::new(k as f64 * 7.0, 3.0, k as f64 * 7.0 + 12.0, 20.0)).collect();
        let out = head.forward(&x, &wr).unwrap();
        let mut a = inference(&out, &boxes, (64.0, 64.0), 0.3, 0.01);
        let perm = [5, 2, 0, 4, 1, 3];
        let xp = x.select(Axis(0), &perm);
        let bp: Vec<BBox> = perm.iter().map(|&k| boxes[k]).collect();
        let mut b2 = inference(&head.forward(&xp, &wr).unwrap(), &bp, (64.0, 64.0), 0.3, 0.01);
        let key = |d: &ScoredBox| (d.category, d.bbox.x0.to_bits(), d.score.to_bits());
        a.sort_by_key(key);
        b2.sort_by_key(key);
        assert_eq!(a.len(), b2.len());
        for (u, v) in a.iter().zip(&b2) {
            assert_eq!(u.category, v.category);
            assert!((u.score - v.score).abs() < 1e-12);
            assert!((u.bbox.x0 - v.bbox.x0).abs() < 1e-9);
        }
        assert!(!a.is_empty());
    }
}
