//! The assembled detector: feature path, proposal head, multiple-instance
//! heads, the per-image training objective and inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Checkpoint, Matrix, ParamSet, ParamTensor};
use crate::error::{Error, Result};
use crate::features::{fuse, fuse_backward, roi_pool_backward, roi_pool_batch, Dafe, Extractor, FeatureMap, ProposalMlp};
use crate::geometry::BBox;
use crate::milheads::{inference, loss_ir, loss_om, name_embedding, pgt_assign, MiningHead, RefineHead, RefinementSupervision, ScoredBox};
use crate::proposals::{assign_pg_targets, decode_proposals, loss_pg, merge_proposals, oracle_box_refine, Lowsrpn, PgTargets, Proposal, ProposalSource};
use crate::seed;
use crate::synthdata::{ImageRecord, Image, ObjectInstance, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stride: usize,
    pub feat_dim: usize,
    /// Second extractor stage over each cell's 3x3 neighbourhood.
    pub context: bool,
    pub bins: usize,
    pub embed_dim: usize,
    pub rpn_width: usize,
    pub dafe_hidden: usize,
    pub prototypes: usize,
    pub branches: usize,
    pub tau: f64,
    pub dafe: bool,
    pub dropout: f64,
    /// Training categories, in label order.
    pub categories: Vec<String>,
    pub embed_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stride: 4,
            feat_dim: 32,
            context: true,
            bins: 4,
            embed_dim: 64,
            rpn_width: 32,
            dafe_hidden: 32,
            prototypes: 8,
            branches: 3,
            tau: 0.07,
            dafe: true,
            dropout: 0.0,
            categories: Vec::new(),
            embed_seed: 7,
            init_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub rpn: Lowsrpn,
    pub mlp: ProposalMlp,
    pub dafe: Option<Dafe>,
    pub mining: MiningHead,
    pub refine: RefineHead,
    /// `D x C` training-category embeddings.
    pub t: Matrix,
    /// Replace `X^daf` with zeros while keeping the DAFE tensors.
    pub zero_daf: bool,
}

/// Loss terms of one image or batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub pg: f64,
    pub om: f64,
    pub ir: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.pg + self.om + self.ir
    }

    pub fn add(&mut self, other: &LossParts) {
        self.pg += other.pg;
        self.om += other.om;
        self.ir += other.ir;
    }
}

/// Which loss terms contribute gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub pg: bool,
    pub om: bool,
    pub ir: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { pg: true, om: true, ir: true };

    pub fn total(&self, parts: &LossParts) -> f64 {
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        pick(self.pg, parts.pg) + pick(self.om, parts.om) + pick(self.ir, parts.ir)
    }
}

/// Detached supervision for one image: the proposal set, per-branch
/// refinement targets and RPN targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub boxes: Vec<BBox>,
    pub branches: Vec<RefinementSupervision>,
    pub pg: Option<PgTargets>,
    pub rpn_active: bool,
}

/// Inputs for deriving a [`Plan`] from the current predictions.
#[derive(Debug, Clone, Copy)]
pub struct PlanInputs<'a> {
    pub source: ProposalSource,
    pub max_proposals: usize,
    pub segmenter: &'a [Proposal],
    pub scene: &'a Scene,
    pub warmup: bool,
    pub refine_seed: u64,
    pub pg_gate: f64,
    /// Score a non-top detection needs to become an RPN target.
    pub pg_score: f64,
    pub iou_fg: f64,
}

pub enum Supervision<'a> {
    Derive(PlanInputs<'a>),
    Fixed(&'a Plan),
}

/// Scene view of a record's ground truth, for the oracle segmenter.
pub fn oracle_scene(record: &ImageRecord) -> Scene {
    Scene {
        height: record.image.height,
        width: record.image.width,
        objects: record
            .gt
            .iter()
            .map(|g| ObjectInstance {
                bbox: g.bbox,
                category: g.category,
                jitter: [0.0; 3],
            })
            .collect(),
        dataset_id: record.dataset_id,
        brightness: 0.0,
        clutter: 0.0,
        render_seed: 0,
    }
}

fn argmax_column(m: &Matrix, c: usize) -> usize {
    let col = m.column(c);
    let mut best = 0;
    for r in 1..col.len() {
        if col[r] > col[best] {
            best = r;
        }
    }
    best
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        if config.categories.is_empty() {
            return Err(Error::NoLabels);
        }
        let s = config.init_seed;
        let module_rng = |name: &str| seed::rng(seed::derive_str(s, name));
        let extractor = if config.context {
            Extractor::with_context(config.stride, config.feat_dim, &mut module_rng("extractor"))
        } else {
            Extractor::new(config.stride, config.feat_dim, &mut module_rng("extractor"))
        };
        let rpn = Lowsrpn::new(config.feat_dim, config.rpn_width, &mut module_rng("rpn"));
        let mut mlp = ProposalMlp::new(config.bins * config.bins * config.feat_dim, config.embed_dim, &mut module_rng("mlp"));
        mlp.dropout = config.dropout;
        let dafe = config
            .dafe
            .then(|| Dafe::new(config.feat_dim, config.dafe_hidden, config.prototypes, config.embed_dim, &mut module_rng("dafe")));
        let mining = MiningHead::new(config.embed_dim, config.categories.len(), config.tau, &mut module_rng("mining"));
        let refine = RefineHead::new(config.embed_dim, config.branches, config.tau, &mut module_rng("refine"));
        let mut t = Matrix::zeros((config.embed_dim, config.categories.len()));
        for (c, name) in config.categories.iter().enumerate() {
            t.column_mut(c).assign(&name_embedding(name, config.embed_dim, config.embed_seed));
        }
        Ok(Model {
            config,
            extractor,
            rpn,
            mlp,
            dafe,
            mining,
            refine,
            t,
            zero_daf: false,
        })
    }

    pub fn categories(&self) -> usize {
        self.t.ncols()
    }

    /// Per-module parameter groups, in checkpoint order.
    pub fn modules(&self) -> Vec<(&'static str, Vec<&ParamTensor>)> {
        let mut out: Vec<(&'static str, Vec<&ParamTensor>)> = vec![("extractor", self.extractor.params())];
        let r = &self.rpn;
        out.push(("rpn", [&r.conv, &r.p_head, &r.c_head, &r.t_head].into_iter().flat_map(|a| a.params()).collect()));
        out.push(("mlp", [&self.mlp.fc1, &self.mlp.fc2].into_iter().flat_map(|a| a.params()).collect()));
        if let Some(d) = &self.dafe {
            let mut v: Vec<&ParamTensor> = [&d.fc1, &d.fc2].into_iter().flat_map(|a| a.params()).collect();
            v.push(&d.prototypes);
            out.push(("dafe", v));
        }
        out.push(("mining", self.mining.detection.params().into()));
        out.push(("refine", self.refine.regressors.iter().flat_map(|a| a.params()).collect()));
        out
    }

    /// L2 norm of the accumulated gradient per module.
    pub fn grad_norms(&self) -> Vec<(&'static str, f64)> {
        self.modules()
            .into_iter()
            .map(|(name, ps)| (name, ps.iter().map(|p| p.grad.iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()))
            .collect()
    }

    pub fn features(&self, image: &Image) -> Result<FeatureMap> {
        Ok(self.extractor.forward(image)?.0)
    }

    /// Learned proposals ranked by localisation quality.
    pub fn propose(&self, fmap: &FeatureMap, top_n: usize) -> Result<Vec<Proposal>> {
        let (preds, _) = self.rpn.forward(fmap)?;
        Ok(decode_proposals(&preds, top_n))
    }

    fn daf(&self, fmap: &FeatureMap) -> Result<(Matrix, Option<crate::features::DafeCache>)> {
        match &self.dafe {
            Some(d) => {
                let (x, cache) = d.forward(fmap)?;
                if self.zero_daf {
                    Ok((Matrix::zeros(x.raw_dim()), None))
                } else {
                    Ok((x, Some(cache)))
                }
            }
            None => Ok((Matrix::zeros((1, self.config.embed_dim)), None)),
        }
    }

    /// Detections for `boxes` scored against the `D x (C+1)` classifier `wr`.
    pub fn detect(&self, fmap: &FeatureMap, wr: &Matrix, boxes: &[BBox]) -> Result<Vec<ScoredBox>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let (pooled, _) = roi_pool_batch(fmap, boxes, self.config.bins);
        let (xp, _) = self.mlp.forward(&pooled, None)?;
        let (xd, _) = self.daf(fmap)?;
        let xf = fuse(&xp, &xd);
        let out = self.refine.forward(&xf, wr)?;
        Ok(inference(&out, boxes, fmap.image_size(), 0.3, 0.01))
    }

    /// One image's loss terms. With `grad`, parameter gradients are
    /// accumulated. Supervision is either derived from this forward pass or
    /// taken from a fixed plan; it is never differentiated.
    pub fn objective(
        &mut self,
        image: &Image,
        y: &[u8],
        supervision: Supervision<'_>,
        dropout_rng: Option<&mut dyn rand::RngCore>,
        grad: bool,
    ) -> Result<(LossParts, Plan)> {
        self.objective_terms(image, y, supervision, dropout_rng, if grad { Some(Terms::ALL) } else { None })
    }

    /// [`Model::objective`] with gradients restricted to `grad` terms.
    pub fn objective_terms(
        &mut self,
        image: &Image,
        y: &[u8],
        supervision: Supervision<'_>,
        dropout_rng: Option<&mut dyn rand::RngCore>,
        grad: Option<Terms>,
    ) -> Result<(LossParts, Plan)> {
        if y.len() != self.categories() {
            return Err(Error::shape("label vector", &[y.len()], &[self.categories()]));
        }
        let (fmap, ecache) = self.extractor.forward(image)?;
        let rpn_active = match &supervision {
            Supervision::Derive(p) => p.source.uses_learned(),
            Supervision::Fixed(plan) => plan.rpn_active,
        };
        let rpn_out = if rpn_active { Some(self.rpn.forward(&fmap)?) } else { None };

        let boxes: Vec<BBox> = match &supervision {
            Supervision::Fixed(plan) => plan.boxes.clone(),
            Supervision::Derive(p) => {
                let learned = match &rpn_out {
                    Some((preds, _)) => decode_proposals(preds, p.max_proposals),
                    None => Vec::new(),
                };
                let seg: &[Proposal] = if p.source.uses_segmenter() { p.segmenter } else { &[] };
                let mut b: Vec<BBox> = merge_proposals(&learned, seg, p.max_proposals).iter().map(|q| q.bbox).collect();
                if b.is_empty() {
                    let (w, h) = fmap.image_size();
                    b.push(BBox::new(0.0, 0.0, w, h));
                }
                b
            }
        };

        let (pooled, plans) = roi_pool_batch(&fmap, &boxes, self.config.bins);
        let (xp, mcache) = self.mlp.forward(&pooled, dropout_rng)?;
        let (xd, dcache) = self.daf(&fmap)?;
        let xf = fuse(&xp, &xd);
        let scores = self.mining.forward(&xf, &self.t)?;
        let (l_om, g_phi) = loss_om(&scores.phi, y);
        let wr = ndarray::concatenate![ndarray::Axis(1), self.t, Matrix::zeros((self.config.embed_dim, 1))];
        let out = self.refine.forward(&xf, &wr)?;
        let c_count = self.categories();
        let (w, h) = fmap.image_size();

        let plan = match &supervision {
            Supervision::Fixed(plan) => (*plan).clone(),
            Supervision::Derive(p) => {
                let mut rng = seed::rng(p.refine_seed);
                let mut snap = |_: usize, b: &BBox| oracle_box_refine(p.scene, b, 0.3, 0.02, &mut rng);
                let mut branches = vec![pgt_assign(&scores.s, &boxes, y, Some(&mut snap), p.iou_fg)];
                let class_probs = out.probs.slice(ndarray::s![.., 0..c_count]).to_owned();
                for _ in 1..self.refine.branches() {
                    branches.push(pgt_assign(&class_probs, &boxes, y, None, p.iou_fg));
                }
                let pg = rpn_out.as_ref().and_then(|(preds, _)| {
                    let qualifies = |c: usize| y[c] > 0 && scores.phi[c] >= p.pg_gate;
                    let mut pgt: Vec<BBox> = Vec::new();
                    if p.warmup {
                        pgt.extend((0..c_count).filter(|&c| qualifies(c)).map(|c| boxes[argmax_column(&scores.s, c)]));
                    } else {
                        // final detections; the top box of each category always counts
                        let dets = inference(&out, &boxes, (w, h), 0.3, 0.0);
                        for c in (0..c_count).filter(|&c| qualifies(c)) {
                            let mut mine = dets.iter().filter(|d| d.category == c);
                            if let Some(top) = mine.next() {
                                pgt.push(top.bbox);
                                pgt.extend(mine.filter(|d| d.score >= p.pg_score).map(|d| d.bbox));
                            }
                        }
                    }
                    pgt.retain(|b| b.area() > 0.0);
                    (!pgt.is_empty()).then(|| assign_pg_targets(&pgt, preds.rows, preds.cols, preds.stride))
                });
                Plan {
                    boxes: boxes.clone(),
                    branches,
                    pg,
                    rpn_active,
                }
            }
        };

        let (l_ir, g_ir) = loss_ir(&out, &boxes, &plan.branches)?;
        let pg_eval = match (&rpn_out, &plan.pg) {
            (Some((preds, _)), Some(targets)) => Some(loss_pg(preds, targets)?),
            _ => None,
        };
        let parts = LossParts {
            pg: pg_eval.as_ref().map_or(0.0, |(l, _)| *l),
            om: l_om,
            ir: l_ir,
        };

        if let Some(terms) = grad {
            let mut g_xf = Matrix::zeros(xf.raw_dim());
            if terms.om {
                g_xf += &self.mining.backward(&xf, &self.t, &scores, &g_phi);
            }
            if terms.ir {
                g_xf += &self.refine.backward(&xf, &wr, &out, &g_ir);
            }
            let g_pooled = self.mlp.backward(&mcache, &g_xf);
            let mut g_fmap = Matrix::zeros(fmap.values.raw_dim());
            roi_pool_backward(&plans, &g_pooled, &mut g_fmap);
            if let (Some(d), Some(cache)) = (self.dafe.as_mut(), dcache.as_ref()) {
                d.backward(cache, &fuse_backward(&g_xf), &mut g_fmap);
            }
            if let (true, Some((preds, rcache)), Some((_, g_pg))) = (terms.pg, &rpn_out, &pg_eval) {
                self.rpn.backward(rcache, preds, g_pg, &mut g_fmap);
            }
            self.extractor.backward(&ecache, &fmap, &g_fmap);
        }
        Ok((parts, plan))
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint::capture(self, step, serde_json::to_value(&self.config).expect("config serializes"))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let config: ModelConfig = serde_json::from_value(ckpt.model.clone()).map_err(|e| Error::Config(format!("checkpoint model description: {e}")))?;
        let mut model = Model::new(config)?;
        ckpt.restore(&mut model)?;
        Ok(model)
    }

    /// Randomise every parameter slightly; used to move off the symmetric
    /// initial point in tests and gradient checks.
    pub fn perturb(&mut self, scale: f64, rng: &mut impl Rng) {
        for p in self.params_mut() {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
}

impl ParamSet for Model {
    fn params(&self) -> Vec<&ParamTensor> {
        self.modules().into_iter().flat_map(|(_, v)| v).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> = self.extractor.params_mut();
        let r = &mut self.rpn;
        for a in [&mut r.conv, &mut r.p_head, &mut r.c_head, &mut r.t_head] {
            v.extend(a.params_mut());
        }
        v.extend(self.mlp.fc1.params_mut());
        v.extend(self.mlp.fc2.params_mut());
        if let Some(d) = &mut self.dafe {
            v.extend(d.fc1.params_mut());
            v.extend(d.fc2.params_mut());
            v.push(&mut d.prototypes);
        }
        v.extend(self.mining.detection.params_mut());
        for a in &mut self.refine.regressors {
            v.extend(a.params_mut());
        }
        v
    }
}
