use super::*;
use crate::autodiff::ParamStore;
use crate::data::Label;
use crate::geometry::OrientedBox;
use crate::gridmap::{GridMap, GridSpec};
use crate::model::{predict, PredictConfig};

fn scalar_store(w: f32) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::scalar(w)).unwrap();
    s
}

fn set_grad(s: &mut ParamStore<f32>, g: f32) {
    s.iter_mut().for_each(|p| p.grad.iter_mut().for_each(|x| *x = g));
}

#[test]
fn sgd_zero_grad_zero_decay_is_identity() {
    let mut s = scalar_store(0.7);
    let mut st = OptimizerState::default();
    sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(s.value("w").unwrap().item(), 0.7);
    assert_eq!(st.step, 1);
}

#[test]
fn sgd_single_step() {
    let mut s = scalar_store(1.0);
    set_grad(&mut s, 1.0);
    sgd_step(&mut s, &mut OptimizerState::default(), 0.1, 0.0, 0.0).unwrap();
    assert!((s.value("w").unwrap().item() - 0.9).abs() < 1e-7);
}

#[test]
fn sgd_momentum_recursion() {
    // v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19.
    let mut s = ParamStore::<f64>::new();
    s.insert("w", Tensor::scalar(0.0)).unwrap();
    let mut st = OptimizerState::default();
    for _ in 0..2 {
        s.iter_mut().for_each(|p| p.grad[0] = 1.0);
        sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
    }
    assert!((s.value("w").unwrap().item() + 0.29).abs() < 1e-12);
    assert_eq!(st.momentum["w"], vec![1.9]);
}

#[test]
fn weight_decay_alone_shrinks_magnitude() {
    let mut s = ParamStore::<f64>::new();
    s.insert("a", Tensor::new(vec![3], vec![2.0, -1.5, 0.25]).unwrap()).unwrap();
    let mut st = OptimizerState::default();
    let mut prev: Vec<f64> = s.value("a").unwrap().data().iter().map(|v| v.abs()).collect();
    for _ in 0..50 {
        sgd_step(&mut s, &mut st, 0.1, 0.9, 0.01).unwrap();
        let cur: Vec<f64> = s.value("a").unwrap().data().iter().map(|v| v.abs()).collect();
        for (c, p) in cur.iter().zip(&prev) {
            assert!(c < p);
        }
        prev = cur;
    }
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut s = scalar_store(1.0);
    s.insert("bad", Tensor::scalar(1.0)).unwrap();
    let id = s.id("bad").unwrap();
    s.get_mut(id).grad[0] = f32::NAN;
    match sgd_step(&mut s, &mut OptimizerState::default(), 0.1, 0.0, 0.0) {
        Err(TrainError::NonFiniteGrad(n)) => assert_eq!(n, "bad"),
        other => panic!("{other:?}"),
    }
    assert_eq!(s.value("w").unwrap().item(), 1.0);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut s = ParamStore::<f64>::new();
    s.insert("a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
    s.iter_mut().for_each(|p| p.grad.copy_from_slice(&[3.0, 4.0]));
    assert_eq!(clip_grad_norm(&mut s, 10.0), 5.0);
    assert_eq!(s.iter().next().unwrap().grad, vec![3.0, 4.0]);
    clip_grad_norm(&mut s, 1.0);
    let g = &s.iter().next().unwrap().grad;
    assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
}

#[test]
fn learning_rate_schedule() {
    let full_scale = TrainConfig {
        pretrain_steps: 60_000,
        adapt_steps: 20_000,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &full_scale), 1e-4);
    assert_eq!(lr_at(59_999, &full_scale), 1e-4);
    assert_eq!(lr_at(60_000, &full_scale), 1e-5);
    assert_eq!(lr_at(79_999, &full_scale), 1e-5);
    let desk = TrainConfig::default();
    assert_eq!(lr_at(2_999, &desk), 1e-4);
    assert_eq!(lr_at(3_000, &desk), 1e-5);
}

#[test]
fn batch_of_two_pools_of_two_is_their_union() {
    let b = make_batch(3, 17, (2, 2), (2, 2), false).unwrap();
    let mut s: Vec<_> = b.source.iter().map(|d| d.index).collect();
    let mut t: Vec<_> = b.target.iter().map(|d| d.index).collect();
    s.sort();
    t.sort();
    assert_eq!((s, t), (vec![0, 1], vec![0, 1]));
}

#[test]
fn batches_are_reproducible_and_vary_by_step() {
    let a: Vec<_> = (0..20).map(|i| make_batch(9, i, (50, 40), (2, 2), true).unwrap()).collect();
    let b: Vec<_> = (0..20).map(|i| make_batch(9, i, (50, 40), (2, 2), true).unwrap()).collect();
    assert_eq!(a, b);
    assert!(a.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn source_draws_ignore_the_target_pool() {
    for step in 0..10 {
        let a = make_batch(1, step, (30, 5), (2, 2), true).unwrap();
        let b = make_batch(1, step, (30, 0), (2, 0), true).unwrap();
        assert_eq!(a.source, b.source);
    }
}

#[test]
fn empty_or_small_pools_are_rejected() {
    assert!(matches!(
        make_batch(0, 0, (5, 0), (2, 2), false),
        Err(TrainError::EmptyPool("target"))
    ));
    assert!(matches!(
        make_batch(0, 0, (1, 3), (2, 2), false),
        Err(TrainError::PoolTooSmall { pool: "source", .. })
    ));
}

#[test]
fn draws_are_uniform_over_the_pool() {
    // Each of n samples appears in a 2-of-n draw with probability 2/n.
    let n = 10;
    let trials = 10_000;
    let mut counts = vec![0usize; n];
    for step in 0..trials {
        let b = make_batch(42, step, (n, n), (2, 2), false).unwrap();
        assert_ne!(b.source[0].index, b.source[1].index);
        for d in &b.source {
            counts[d.index] += 1;
        }
    }
    let p = 2.0 / n as f64;
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "{c} vs {mean} ± {sd}");
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        widths: [8, 8, 8, 8],
        blocks: [1, 1, 1, 1],
        fpn_width: 8,
        head_convs: 1,
        ..ModelConfig::default()
    }
}

fn blob_sample(seed: u64, domain: DomainTag) -> Sample {
    let spec = GridSpec::new(0.5, 16.0).unwrap();
    let mut m = GridMap::zeros(spec).unwrap();
    let x = -3.0 + seed as f64;
    let b = OrientedBox::new(x, 2.0, 4.0, 1.8, 0.3 * seed as f64).unwrap();
    for r in 0..m.height {
        for c in 0..m.width {
            let (cx, cy) = (spec.cell_center(c), spec.cell_center(r));
            let inside = b.contains(cx, cy);
            for ch in 0..5 {
                let v = if inside { 1.0 + ch as f32 } else { 0.1 * (domain.label() as f32 + 1.0) };
                m.data[(ch * m.height + r) * m.width + c] = v;
            }
        }
    }
    let labels = vec![Label {
        class: ObjectClass::Car,
        bbox: b,
        difficulty: None,
    }];
    Sample::new(m, labels, domain)
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        pretrain_steps: 3,
        adapt_steps: 3,
        lr1: 1e-3,
        lr2: 1e-4,
        pretrain_batch: 2,
        da_width: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn pools() -> (Vec<Sample>, Vec<Sample>) {
    (
        (0..3).map(|i| blob_sample(i, DomainTag::Source)).collect(),
        (0..3).map(|i| blob_sample(i + 1, DomainTag::Target)).collect(),
    )
}

fn trainer(cfg: TrainConfig, loss: LossConfig) -> Trainer {
    Trainer::new(init_model(&tiny_model(), 1).unwrap(), cfg, loss).unwrap()
}

#[test]
fn pretraining_is_finite_and_leaves_out_domain_classifiers() {
    let (src, _) = pools();
    let mut t = trainer(quick_cfg(), LossConfig::default());
    t.pretrain(&src).unwrap();
    assert_eq!(t.history.len(), 3);
    assert!(t.history.iter().all(|(_, r)| r.is_finite() && r.da == 0.0));
    let ck = t.checkpoint();
    assert!(ck.entries.iter().all(|(n, _)| !n.starts_with("da/")));
    assert!(ck.get("opt/step").is_some());
}

#[test]
fn resume_reproduces_the_next_step() {
    let (src, tgt) = pools();
    let mut a = trainer(quick_cfg(), LossConfig::default());
    a.pretrain(&src).unwrap();
    a.adapt_domains(&src, &tgt, 1).unwrap();
    let ck = a.checkpoint();
    a.adapt_domains(&src, &tgt, 1).unwrap();

    let bytes = crate::model::encode_checkpoint(&ck);
    let ck2 = crate::model::decode_checkpoint(&bytes, Path::new("mem")).unwrap();
    let mut b = Trainer::from_checkpoint(&tiny_model(), &ck2, quick_cfg(), LossConfig::default()).unwrap();
    assert_eq!(b.step(), 4);
    b.adapt_domains(&src, &tgt, 1).unwrap();
    assert_eq!(a.history.last(), b.history.last());
    assert_eq!(a.checkpoint(), b.checkpoint());
}

#[test]
fn zero_lambda_adaptation_matches_source_continuation() {
    let (src, tgt) = pools();
    let loss = LossConfig {
        lambda1: 0.0,
        ..LossConfig::default()
    };
    let mut base = trainer(quick_cfg(), loss.clone());
    base.pretrain(&src).unwrap();
    let mut cont = Trainer::from_checkpoint(&tiny_model(), &base.checkpoint(), quick_cfg(), loss.clone()).unwrap();
    base.adapt_domains(&src, &tgt, 3).unwrap();
    cont.train_source(&src, 3, 2).unwrap();
    for p in cont.model.params.iter() {
        assert_eq!(base.model.params.value(&p.name).unwrap(), &p.value, "{}", p.name);
    }
    let dets: Vec<_> = base.history[3..].iter().map(|(s, r)| (*s, r.det)).collect();
    let dets2: Vec<_> = cont.history.iter().map(|(s, r)| (*s, r.det)).collect();
    assert_eq!(dets, dets2);
}

#[test]
fn adaptation_never_reads_target_labels() {
    let (src, tgt) = pools();
    let mut t = trainer(quick_cfg(), LossConfig::default());
    t.adapt_domains(&src, &tgt, 2).unwrap();
    assert!(tgt.iter().all(|s| s.target_label_reads() == 0));
    let r = &t.history.last().unwrap().1;
    assert_eq!((r.img.len(), r.ins.len(), r.cons.len()), (4, 4, 4));
    assert!(r.da > 0.0);
}

#[test]
fn target_samples_in_the_source_pool_are_rejected() {
    let (_, tgt) = pools();
    let mut t = trainer(quick_cfg(), LossConfig::default());
    assert!(matches!(t.pretrain(&tgt), Err(TrainError::BadSample { .. })));
}

#[test]
fn adapted_checkpoint_predicts_with_domain_entries_ignored() {
    let (src, tgt) = pools();
    let mut t = trainer(quick_cfg(), LossConfig::default());
    t.adapt_domains(&src, &tgt, 1).unwrap();
    let ck = t.checkpoint();
    assert!(ck.get("da/ins/out/w").is_some());
    let mut m = init_model(&tiny_model(), 0).unwrap();
    let unused = ck.load_into(&mut m.params).unwrap();
    assert!(unused.iter().all(|n| n.starts_with("da/") || n.starts_with("opt/")));
    let out = predict(&m, &[&tgt[0].gridmap], &PredictConfig::default()).unwrap();
    assert_eq!(out.len(), 1);
}

#[test]
fn identical_runs_give_identical_logs() {
    let run = || {
        let (src, tgt) = pools();
        let mut t = trainer(quick_cfg(), LossConfig::default());
        t.pretrain(&src).unwrap();
        t.adapt_domains(&src, &tgt, 2).unwrap();
        t.metrics_log()
    };
    let a = run();
    assert_eq!(a.lines().count(), 6);
    assert_eq!(a, run());
}
