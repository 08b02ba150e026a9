use wsovod::diffcore::{grad_check, GradCheckOptions, ParamSet, Sgd, SgdConfig};
use wsovod::evalmetrics::Split;
use wsovod::model::{oracle_scene, LossParts, Model, ModelConfig, Plan, PlanInputs, Supervision, Terms};
use wsovod::proposals::{merge_proposals, oracle_grid_proposals, Origin, PgTargets, Proposal, ProposalSource};
use wsovod::synthdata::{generate, BiasProfile, GenSpec, ImageRecord, LabelPolicy, Scene, Vocabulary};
use wsovod::train::{evaluate, run_training, EvalOptions, TrainConfig, TrainData, TrainOutputs};

fn vocab() -> Vocabulary {
    Vocabulary::builtin(8, 0).unwrap()
}

fn records(n: usize, seed: u64) -> Vec<ImageRecord> {
    generate(&GenSpec {
        profile: BiasProfile::scene_centric(),
        vocab: vocab(),
        images: n,
        policy: LabelPolicy::Full,
        seed,
        dataset_id: 0,
    })
}

fn small(dafe: bool, init_seed: u64) -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        embed_dim: 16,
        rpn_width: 8,
        dafe_hidden: 8,
        prototypes: 4,
        dafe,
        categories: vocab().names(),
        init_seed,
        ..ModelConfig::default()
    }
}

struct Oracle {
    scene: Scene,
    segmenter: Vec<Proposal>,
}

impl Oracle {
    fn new(rec: &ImageRecord, seed: u64) -> Self {
        let scene = oracle_scene(rec);
        let segmenter = oracle_grid_proposals(&scene, 8, 0.1, seed);
        Oracle { scene, segmenter }
    }

    fn inputs(&self, source: ProposalSource, warmup: bool) -> PlanInputs<'_> {
        PlanInputs {
            source,
            max_proposals: 32,
            segmenter: &self.segmenter,
            scene: &self.scene,
            warmup,
            refine_seed: 11,
            pg_gate: 0.1,
            pg_score: 0.5,
            iou_fg: 0.5,
        }
    }
}

fn bits(p: &LossParts) -> [u64; 3] {
    [p.pg.to_bits(), p.om.to_bits(), p.ir.to_bits()]
}

#[test]
fn dafe_off_is_bitwise_zeroed_daf() {
    let recs = records(4, 3);
    let mut zeroed = Model::new(small(true, 5)).unwrap();
    zeroed.zero_daf = true;
    let mut off = Model::new(small(false, 5)).unwrap();
    let sgd_cfg = SgdConfig::default();
    let (mut sgd_a, mut sgd_b) = (Sgd::new(), Sgd::new());
    for step in 0..3 {
        for (i, rec) in recs.iter().enumerate() {
            let oracle = Oracle::new(rec, i as u64);
            let sup = || Supervision::Derive(oracle.inputs(ProposalSource::Merged, step == 0));
            let (a, plan_a) = zeroed.objective(&rec.image, &rec.labels, sup(), None, true).unwrap();
            let (b, plan_b) = off.objective(&rec.image, &rec.labels, sup(), None, true).unwrap();
            assert_eq!(bits(&a), bits(&b), "step {step} image {i}");
            assert_eq!(plan_a, plan_b);
        }
        for p in off.params() {
            let q = zeroed.params().into_iter().find(|q| q.name == p.name).unwrap();
            assert!(p.grad.iter().zip(q.grad.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", p.name);
            assert!(p.value.iter().zip(q.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", p.name);
        }
        sgd_a.step(zeroed.params_mut(), &sgd_cfg, sgd_cfg.lr);
        sgd_b.step(off.params_mut(), &sgd_cfg, sgd_cfg.lr);
    }
    let opts = EvalOptions {
        source: ProposalSource::Merged,
        max_proposals: 32,
        split: Split::All,
        segmenter_grid: 8,
        segmenter_jitter: 0.1,
        seed: 1,
    };
    let ea = evaluate(&zeroed, &recs, &vocab(), &opts).unwrap();
    let eb = evaluate(&off, &recs, &vocab(), &opts).unwrap();
    assert_eq!(ea.detections, eb.detections);
    assert_eq!(ea.report.to_json(), eb.report.to_json());
}

#[test]
fn proposal_source_changes_only_the_proposal_set() {
    let om_ir = Terms { pg: false, om: true, ir: true };
    for (i, rec) in records(3, 8).iter().enumerate() {
        let base = Model::new(small(true, 2)).unwrap();
        let fmap = base.features(&rec.image).unwrap();
        // segmenter output chosen to coincide with the learned top-R
        let learned = base.propose(&fmap, 32).unwrap();
        let mut oracle = Oracle::new(rec, i as u64);
        oracle.segmenter = merge_proposals(&learned, &[], 32)
            .into_iter()
            .map(|p| Proposal { origin: Origin::Segmenter, ..p })
            .collect();

        let mut results: Vec<(LossParts, Plan, Model)> = Vec::new();
        for source in [ProposalSource::LearnedOnly, ProposalSource::SegmenterOnly, ProposalSource::Merged] {
            let mut m = base.clone();
            let (parts, plan) = m.objective_terms(&rec.image, &rec.labels, Supervision::Derive(oracle.inputs(source, false)), None, Some(om_ir)).unwrap();
            results.push((parts, plan, m));
        }
        let (ref p0, ref plan0, ref m0) = results[0];
        for (parts, plan, m) in &results[1..] {
            assert_eq!(plan.boxes, plan0.boxes);
            assert_eq!(plan.branches, plan0.branches);
            assert_eq!(parts.om.to_bits(), p0.om.to_bits());
            assert_eq!(parts.ir.to_bits(), p0.ir.to_bits());
            for (a, b) in m.params().iter().zip(m0.params()) {
                assert!(a.grad.iter().zip(b.grad.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
            }
        }
        // the learned proposal head is consulted only when its boxes are used
        assert!(results[1].1.pg.is_none() && !results[1].1.rpn_active);
        assert_eq!(results[0].0.pg.to_bits(), results[2].0.pg.to_bits());
        assert_eq!(results[0].1.pg, results[2].1.pg);
    }
}

#[test]
fn proposal_set_follows_the_source() {
    let rec = &records(1, 21)[0];
    let model = Model::new(small(true, 4)).unwrap();
    let fmap = model.features(&rec.image).unwrap();
    let learned = model.propose(&fmap, 32).unwrap();
    let oracle = Oracle::new(rec, 9);
    for (source, want) in [
        (ProposalSource::LearnedOnly, merge_proposals(&learned, &[], 32)),
        (ProposalSource::SegmenterOnly, merge_proposals(&[], &oracle.segmenter, 32)),
        (ProposalSource::Merged, merge_proposals(&learned, &oracle.segmenter, 32)),
    ] {
        let mut m = model.clone();
        let (_, plan) = m.objective(&rec.image, &rec.labels, Supervision::Derive(oracle.inputs(source, false)), None, false).unwrap();
        let want: Vec<_> = want.iter().map(|p| p.bbox).collect();
        assert_eq!(plan.boxes, want, "{source:?}");
    }
}

#[test]
fn composed_objective_gradients_match_finite_differences() {
    let recs = records(2, 17);
    for seed in 0..2u64 {
        let rec = &recs[seed as usize];
        let mut model = Model::new(ModelConfig {
            bins: 2,
            feat_dim: 4,
            embed_dim: 8,
            rpn_width: 4,
            dafe_hidden: 4,
            prototypes: 3,
            ..small(true, seed)
        })
        .unwrap();
        model.perturb(0.1, &mut wsovod::seed::rng(seed));
        let oracle = Oracle::new(rec, seed);
        let (_, plan) = model.objective(&rec.image, &rec.labels, Supervision::Derive(oracle.inputs(ProposalSource::Merged, false)), None, false).unwrap();
        let opts = GradCheckOptions {
            coords_per_tensor: 16,
            seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &mut model,
            |m: &mut Model, grad: bool| Ok(m.objective(&rec.image, &rec.labels, Supervision::Fixed(&plan), None, grad)?.0.total()),
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.worst());
    }
}

fn bce(y: f64, p: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[test]
fn mining_loss_with_flat_category_scores_matches_uniform_oracle() {
    // a flat category softmax gives phi_c = 1/C exactly, so L_OM = sum_c bce(y_c, 1/C)
    let recs = records(32, 5);
    let mut model = Model::new(ModelConfig {
        categories: vocab().names(),
        tau: 100.0,
        ..ModelConfig::default()
    })
    .unwrap();
    let c = model.categories() as f64;
    let (mut got, mut want) = (0.0, 0.0);
    for (i, rec) in recs.iter().enumerate() {
        let oracle = Oracle::new(rec, i as u64);
        let (parts, _) = model.objective(&rec.image, &rec.labels, Supervision::Derive(oracle.inputs(ProposalSource::Merged, true)), None, false).unwrap();
        got += parts.om;
        want += rec.labels.iter().map(|&y| bce(f64::from(y), 1.0 / c)).sum::<f64>();
    }
    let rel = (got - want).abs() / want;
    assert!(rel < 0.05, "L_OM {got} vs oracle {want} (rel {rel})");
}

/// Objectness at p = 1/2, centerness at 1/2 and 8 px per side at every
/// positive cell: the initial prior of the proposal head.
fn cold_start_pg(targets: &PgTargets) -> f64 {
    let pos: Vec<[f64; 4]> = targets
        .assigned
        .iter()
        .zip(&targets.ltrb)
        .filter(|(a, _)| a.is_some())
        .map(|(_, t)| [t.l, t.t, t.r, t.b])
        .collect();
    let per_positive: f64 = pos
        .iter()
        .map(|g| {
            let ratio = |a: f64, b: f64| a.min(b) / a.max(b);
            let centerness = (ratio(g[0], g[2]) * ratio(g[1], g[3])).sqrt();
            let inter = (g[0].min(8.0) + g[2].min(8.0)) * (g[1].min(8.0) + g[3].min(8.0));
            let union = 256.0 + (g[0] + g[2]) * (g[1] + g[3]) - inter;
            (0.5 - centerness).abs() + 1.0 - inter / union
        })
        .sum();
    std::f64::consts::LN_2 + per_positive / pos.len() as f64
}

#[test]
fn cold_start_proposal_loss_matches_the_head_prior() {
    let recs = records(16, 6);
    let mut model = Model::new(ModelConfig { categories: vocab().names(), ..ModelConfig::default() }).unwrap();
    let (mut got, mut want) = (0.0, 0.0);
    for (i, rec) in recs.iter().enumerate() {
        let oracle = Oracle::new(rec, i as u64);
        let (parts, plan) = model.objective(&rec.image, &rec.labels, Supervision::Derive(oracle.inputs(ProposalSource::Merged, true)), None, false).unwrap();
        let Some(targets) = plan.pg else { continue };
        got += parts.pg;
        want += cold_start_pg(&targets);
    }
    assert!(want > 0.0);
    let rel = (got - want).abs() / want;
    assert!(rel < 0.05, "L_PG {got} vs oracle {want} (rel {rel})");
}

#[test]
fn one_step_decreases_the_objective_for_a_small_rate() {
    let recs = records(4, 12);
    let model = Model::new(small(true, 3)).unwrap();
    let oracles: Vec<Oracle> = recs.iter().enumerate().map(|(i, r)| Oracle::new(r, i as u64)).collect();
    let mut m = model.clone();
    let mut plans = Vec::new();
    let mut before = 0.0;
    for (rec, o) in recs.iter().zip(&oracles) {
        let (parts, plan) = m.objective(&rec.image, &rec.labels, Supervision::Derive(o.inputs(ProposalSource::Merged, false)), None, true).unwrap();
        before += parts.total();
        plans.push(plan);
    }
    let grads: Vec<_> = m.params().iter().map(|p| p.grad.clone()).collect();
    let mut decreased = Vec::new();
    for lr in [1e-2, 1e-3, 1e-4] {
        let mut stepped = model.clone();
        for (p, g) in stepped.params_mut().into_iter().zip(&grads) {
            p.value.scaled_add(-lr, g);
        }
        let after: f64 = recs
            .iter()
            .zip(&plans)
            .map(|(rec, plan)| stepped.objective(&rec.image, &rec.labels, Supervision::Fixed(plan), None, false).unwrap().0.total())
            .sum();
        decreased.push((lr, after < before, after));
    }
    assert!(decreased.iter().any(|d| d.1), "before {before}: {decreased:?}");
    assert!(decreased.last().unwrap().1, "smallest rate must descend: {decreased:?}");
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let data = TrainData::new(vec![records(12, 30)], vocab()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        feat_dim: 8,
        embed_dim: 16,
        rpn_width: 8,
        dafe_hidden: 8,
        ..TrainConfig::default()
    };
    let a = run_training(&cfg, &data, &TrainOutputs::default(), None, |_| {}).unwrap();
    let b = run_training(&cfg, &data, &TrainOutputs::default(), None, |_| {}).unwrap();
    assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
    assert_eq!(format!("{:?}", a.log), format!("{:?}", b.log));
}
