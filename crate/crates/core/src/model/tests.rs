use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::geometry::{encode_box, rotated_iou, OrientedBox, PyramidConfig};
use crate::gridmap::{GridMap, GridSpec};

fn tiny() -> ModelConfig {
    ModelConfig {
        widths: [8, 8, 16, 16],
        blocks: [1, 1, 1, 1],
        fpn_width: 8,
        head_convs: 1,
        ..ModelConfig::default()
    }
}

fn random_input(n: usize, h: usize, seed: u64) -> Tensor<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 5, h, h], |_| rng.random_range(0.0..3.0))
}

#[test]
fn same_seed_same_weights() {
    let a = init_model(&tiny(), 7).unwrap();
    let b = init_model(&tiny(), 7).unwrap();
    let c = init_model(&tiny(), 8).unwrap();
    assert_eq!(encode_checkpoint(&Checkpoint::from_store(&a.params)), encode_checkpoint(&Checkpoint::from_store(&b.params)));
    assert_ne!(encode_checkpoint(&Checkpoint::from_store(&a.params)), encode_checkpoint(&Checkpoint::from_store(&c.params)));
}

#[test]
fn default_parameter_count_is_stable() {
    let m = init_model(&ModelConfig::default(), 0).unwrap();
    assert_eq!(m.param_count(), 1_043_272);
    assert_eq!(init_model(&ModelConfig::default(), 99).unwrap().param_count(), m.param_count());
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = tiny();
    cfg.widths[2] = 0;
    assert!(matches!(init_model(&cfg, 0), Err(ModelError::Config(_))));
    let mut cfg = tiny();
    cfg.input_scale.pop();
    assert!(init_model(&cfg, 0).is_err());
}

#[test]
fn output_channels_follow_anchors_and_classes() {
    let m = init_model(&ModelConfig::default(), 0).unwrap();
    assert_eq!(m.params.value("head/cls_out/w").unwrap().shape(), &[18, 64, 3, 3]);
    assert_eq!(m.params.value("head/reg_out/w").unwrap().shape(), &[36, 64, 3, 3]);
}

#[test]
fn stem_starts_with_depthwise_filter() {
    let m = init_model(&ModelConfig::default(), 0).unwrap();
    let first = m.params.iter().next().unwrap();
    assert_eq!(first.name, "stem/dw/w");
    assert_eq!(first.value.shape(), &[5, 1, 3, 3]);
}

#[test]
fn pyramid_and_head_shapes_default_config() {
    let m = init_model(&ModelConfig::default(), 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random_input(2, 128, 1)).unwrap();
    let out = forward(&mut g, &m.params, &m.config, x, Mode::Eval).unwrap();
    let expect = [64, 32, 16, 8];
    for (l, &p) in out.pyramid.levels.iter().enumerate() {
        assert_eq!(g.shape(p), &[2, 64, expect[l], expect[l]]);
        assert_eq!(g.shape(out.head.cls_feat[l]), &[2, 64, expect[l], expect[l]]);
    }
    assert_eq!(g.shape(out.head.cls_logits[2]), &[2, 18, 16, 16]);
    assert_eq!(g.shape(out.head.box_reg[2]), &[2, 36, 16, 16]);
}

#[test]
fn wrong_input_rejected() {
    let m = init_model(&tiny(), 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f32>::zeros(&[1, 4, 32, 32])).unwrap();
    assert!(matches!(
        forward(&mut g, &m.params, &m.config, x, Mode::Eval),
        Err(ModelError::InputChannels { expected: 5, got: 4 })
    ));
    let x = g.constant(Tensor::<f32>::zeros(&[1, 5, 24, 24])).unwrap();
    assert!(matches!(
        forward(&mut g, &m.params, &m.config, x, Mode::Eval),
        Err(ModelError::InputSize { .. })
    ));
}

#[test]
fn batch_permutation_permutes_outputs() {
    let m = init_model(&tiny(), 3).unwrap();
    let a = random_input(1, 32, 10);
    let b = random_input(1, 32, 11);
    let run = |first: &Tensor<f32>, second: &Tensor<f32>| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::concat_batch(&[first, second]).unwrap()).unwrap();
        let out = forward(&mut g, &m.params, &m.config, x, Mode::Eval).unwrap();
        out.head
            .cls_logits
            .iter()
            .map(|&v| g.value(v).clone())
            .collect::<Vec<_>>()
    };
    let ab = run(&a, &b);
    let ba = run(&b, &a);
    for (x, y) in ab.iter().zip(&ba) {
        let half = x.numel() / 2;
        assert_eq!(&x.data()[..half], &y.data()[half..]);
        assert_eq!(&x.data()[half..], &y.data()[..half]);
    }
}

#[test]
fn shared_head_gives_identical_outputs_at_every_level() {
    let m = init_model(&tiny(), 4).unwrap();
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_fn(&[1, 8, 4, 4], |i| (i as f32 * 0.37).sin())).unwrap();
    let q = g.constant(Tensor::from_fn(&[1, 8, 4, 4], |i| (i as f32 * 0.37).sin())).unwrap();
    let (c1, r1, _, _) = head_forward(&mut g, &m.params, &m.config, p).unwrap();
    let (c2, r2, _, _) = head_forward(&mut g, &m.params, &m.config, q).unwrap();
    assert_eq!(g.value(c1), g.value(c2));
    assert_eq!(g.value(r1), g.value(r2));
    let ck = Checkpoint::from_store(&m.params);
    let heads = ck.entries.iter().filter(|(n, _)| n == "head/cls_out/w").count();
    assert_eq!(heads, 1);
}

#[test]
fn untrained_model_predicts_nothing() {
    let m = init_model(&tiny(), 5).unwrap();
    let spec = GridSpec::new(0.25, 8.0).unwrap();
    let mut map = GridMap::zeros(spec).unwrap();
    map.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f32 * 0.1);
    let dets = predict(&m, &[&map], &PredictConfig::default()).unwrap();
    assert!(dets[0].is_empty());
    let cfg = PredictConfig {
        score_thr: 1.0,
        ..PredictConfig::default()
    };
    assert!(predict(&m, &[&map], &cfg).unwrap()[0].is_empty());
}

#[test]
fn forced_logit_returns_its_box() {
    let pyramid = PyramidConfig::standard(0.25, 32, 32);
    let gt = OrientedBox::new(0.4, -0.3, 4.2, 1.8, 0.3).unwrap();
    let level = 2;
    let anchors = pyramid.level_anchors(level).unwrap();
    let (ai, anchor) = anchors
        .iter()
        .enumerate()
        .max_by(|a, b| rotated_iou(&a.1.as_box(), &gt).total_cmp(&rotated_iou(&b.1.as_box(), &gt)))
        .unwrap();
    let t = encode_box(&gt, anchor).unwrap();
    let (k, a_n) = (3, 6);
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    for l in 1..=4 {
        let (h, w) = pyramid.level_dims(l).unwrap();
        let mut c = Tensor::full(&[1, a_n * k, h, w], -10.0f32);
        let mut r = Tensor::zeros(&[1, a_n * 6, h, w]);
        if l == level {
            let (cell, slot) = (ai / a_n, ai % a_n);
            c.data_mut()[slot * k * h * w + cell] = 10.0; // class 0
            for j in 0..6 {
                r.data_mut()[(slot * 6 + j) * h * w + cell] = t.0[j] as f32;
            }
        }
        cls.push(c);
        reg.push(r);
    }
    let cr: Vec<_> = cls.iter().collect();
    let rr: Vec<_> = reg.iter().collect();
    let dets = decode_detections(&cr, &rr, &pyramid, k, 0, &PredictConfig::default()).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].class_id, 0);
    assert!(rotated_iou(&dets[0].bbox, &gt) > 0.99);
}

#[test]
fn batch_norm_train_and_eval() {
    let cfg = ModelConfig {
        norm: NormKind::Batch,
        ..tiny()
    };
    let m = init_model(&cfg, 1).unwrap();
    assert!(m.params.contains("stem/norm/running_mean"));
    let mut g = Graph::new();
    let x = g.constant(random_input(2, 32, 2)).unwrap();
    let out = forward(&mut g, &m.params, &cfg, x, Mode::Train).unwrap();
    assert!(!out.norm_stats.is_empty());
    let mut g = Graph::new();
    let x = g.constant(random_input(2, 32, 2)).unwrap();
    let out = forward(&mut g, &m.params, &cfg, x, Mode::Eval).unwrap();
    assert!(out.norm_stats.is_empty());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = init_model(&tiny(), 9).unwrap();
    let mut ck = Checkpoint::from_store(&m.params);
    ck.push("opt/step", Tensor::scalar(12.0));
    ck.push("odd", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1e-40]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gdck");
    write_checkpoint(&path, &ck).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(encode_checkpoint(&back), encode_checkpoint(&ck));
    let bits = |c: &Checkpoint| -> Vec<u32> { c.entries.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&back), bits(&ck));
    let bytes = encode_checkpoint(&ck);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1], &path).is_err());
    assert!(decode_checkpoint(b"GDCX\0\0\0\0", &path).is_err());
}

#[test]
fn checkpoint_layout() {
    let mut ck = Checkpoint::default();
    ck.push("ab", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = encode_checkpoint(&ck);
    let mut expect = b"GDCK".to_vec();
    expect.extend(1u32.to_le_bytes());
    expect.extend(2u16.to_le_bytes());
    expect.extend(b"ab");
    expect.extend([0u8, 1]);
    expect.extend(2u32.to_le_bytes());
    expect.extend(1f32.to_le_bytes());
    expect.extend(2f32.to_le_bytes());
    assert_eq!(b, expect);
}

#[test]
fn load_into_reports_unknown_entries() {
    let m = init_model(&tiny(), 1).unwrap();
    let mut other = init_model(&tiny(), 2).unwrap();
    let mut ck = Checkpoint::from_store(&m.params);
    ck.push("da/ins/conv1/w", Tensor::zeros(&[1]));
    let unused = ck.load_into(&mut other.params).unwrap();
    assert_eq!(unused, vec!["da/ins/conv1/w".to_string()]);
    assert_eq!(
        encode_checkpoint(&Checkpoint::from_store(&other.params)),
        encode_checkpoint(&Checkpoint::from_store(&m.params))
    );
}
