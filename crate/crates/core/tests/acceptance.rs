//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to
//! stderr (bypassing the test harness capture) and fails on any hard
//! criterion. The two experiment-level criteria on the synthetic domain pair
//! (6 and 7) are reported but not asserted; see the README.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use gridda::data::{synth_sample, Difficulty, DomainSpec, ObjectClass, Sample, ScenePrior, SynthConfig};
use gridda::eval::{ap40, kitti_sweep, EvalFrame};
use gridda::geometry::{angle_diff_mod_pi, decode_box, encode_box, rotated_iou, Anchor};
use gridda::gradsuite::{
    end_to_end_check, grl_contract, primitive_suite, EndToEndConfig, END_TO_END_TOLERANCE, PRIMITIVE_TOLERANCE,
};
use gridda::gridmap::{compose_gridmap, decode_gridmap, encode_gridmap, read_gridmap, write_gridmap, GridSpec, CH_COUNT};
use gridda::losses::{DomainTag, LossConfig};
use gridda::model::{
    decode_checkpoint, encode_checkpoint, init_model, predict, read_checkpoint, write_checkpoint, Checkpoint,
    DetectorModel, ModelConfig, PredictConfig,
};
use gridda::train::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn say(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

struct Outcome {
    id: u32,
    pass: bool,
    hard: bool,
    detail: String,
}

fn report(id: u32, pass: bool, hard: bool, detail: String, t: Instant) -> Outcome {
    say(&format!(
        "criterion {id}: {} ({detail}; {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    ));
    Outcome { id, pass, hard, detail }
}

// ---------- 1, 2 ----------

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let prims = primitive_suite(0).expect("primitive suite runs");
    let worst = prims.iter().map(|p| p.1).fold(0.0, f64::max);
    let e2e = end_to_end_check(&EndToEndConfig::default()).expect("end-to-end check runs");
    let fast = t.elapsed() < Duration::from_secs(120);
    let pass = worst < PRIMITIVE_TOLERANCE && e2e.max_rel_err < END_TO_END_TOLERANCE && fast;
    let detail = format!(
        "{} primitives, worst {worst:.2e}; detector loss {:.2e} over {} coordinates",
        prims.len(),
        e2e.max_rel_err,
        e2e.probed
    );
    report(1, pass, true, detail, t)
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let c = grl_contract(0, 1.0).expect("contract check runs");
    let pass = c.backbone <= 1e-6 && c.classifier == 0.0 && c.backbone_scale > 0.0;
    let detail = format!(
        "backbone |g_rev + g_plain| {:.1e} at scale {:.3}, classifier diff {:.1e}",
        c.backbone, c.backbone_scale, c.classifier
    );
    report(2, pass, true, detail, t)
}

// ---------- 3 ----------

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut iou_err = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = common::random_pair(&mut rng);
        iou_err = iou_err.max((rotated_iou(&a, &b) - common::raster_iou(&a, &b, 2048)).abs());
    }
    let mut rt_err = 0.0f64;
    for _ in 0..1000 {
        let b = common::random_box(&mut rng);
        let a = Anchor {
            x: rng.random_range(-4.0..4.0),
            y: rng.random_range(-4.0..4.0),
            w: rng.random_range(0.5..8.0),
            h: rng.random_range(0.5..8.0),
            level: 1,
            cell: (0, 0),
        };
        let d = decode_box(&encode_box(&b, &a).expect("valid box"), &a);
        for e in [d.x - b.x, d.y - b.y, d.w - b.w, d.h - b.h, angle_diff_mod_pi(d.theta, b.theta)] {
            rt_err = rt_err.max(e.abs());
        }
    }
    let mut ap_mismatch = 0;
    for _ in 0..1000 {
        let (tp, n) = common::random_sequence(&mut rng);
        if ap40(&tp, n) != common::ap40_oracle(&tp, n) {
            ap_mismatch += 1;
        }
    }
    let fast = t.elapsed() < Duration::from_secs(180);
    let pass = iou_err < 2e-3 && rt_err < 1e-5 && ap_mismatch == 0 && fast;
    let detail = format!("IoU vs raster {iou_err:.1e}, round trip {rt_err:.1e}, ap40 mismatches {ap_mismatch}");
    report(3, pass, true, detail, t)
}

// ---------- 4 ----------

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = GridSpec::new(0.5, 32.0).unwrap();
    let mut count_bad = 0;
    for _ in 0..50 {
        let n = rng.random_range(0..2000);
        let (pc, inside) = common::random_cloud(&mut rng, spec, n);
        let map = compose_gridmap(&pc, spec).expect("grid map");
        let total: f64 = map.plane(CH_COUNT).iter().map(|&v| v as f64).sum();
        if total != inside as f64 {
            count_bad += 1;
        }
    }
    let ray_bad: Vec<String> = common::ray_fixtures().iter().flat_map(common::ray_mismatches).collect();
    for b in &ray_bad {
        say(&format!("  {b}"));
    }
    let pass = count_bad == 0 && ray_bad.is_empty();
    let detail = format!("count sums off in {count_bad}/50 clouds, {} ray cells off", ray_bad.len());
    report(4, pass, true, detail, t)
}

// ---------- 5 ----------

fn desk_model() -> ModelConfig {
    ModelConfig {
        widths: [8, 16, 16, 16],
        blocks: [1, 1, 1, 1],
        fpn_width: 16,
        head_convs: 1,
        input_scale: vec![0.05, 1.0, 1.0, 0.002, 1.0],
        ..ModelConfig::default()
    }
}

fn synth(sensor: DomainSpec, domain: DomainTag, n: usize, seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig {
        n,
        seed,
        grid: GridSpec::new(0.5, 32.0).unwrap(),
        prior: ScenePrior::default(),
        sensor,
        domain,
        split: "acceptance".into(),
    };
    (0..n).map(|i| synth_sample(&cfg, i).expect("synthetic sample").0).collect()
}

fn criterion_5() -> (Outcome, DetectorModel) {
    let t = Instant::now();
    let pool = synth(DomainSpec::source(), DomainTag::Source, 1, 7);
    let mc = desk_model();
    let tc = TrainConfig {
        lr1: 1e-2,
        lr_boundary: Some(usize::MAX),
        flip: false,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(init_model(&mc, 0).unwrap(), tc, LossConfig::default()).unwrap();
    tr.train_source(&pool, 500, 1).expect("overfit training");
    let det: Vec<f64> = tr.history.iter().map(|r| r.1.det).collect();
    let ratio = det[499] / det[9];
    let dets = predict(&tr.model, &[&pool[0].gridmap], &PredictConfig::default()).unwrap().remove(0);
    let gts: Vec<_> = pool[0].labels().iter().filter(|l| l.class != ObjectClass::DontCare).copied().collect();
    let found = gts
        .iter()
        .filter(|l| {
            dets.iter()
                .filter(|d| Some(d.class_id) == l.class.id())
                .any(|d| rotated_iou(&d.bbox, &l.bbox) >= 0.7)
        })
        .count();
    let pass = ratio < 0.1 && found == gts.len() && !gts.is_empty();
    let detail = format!("L_det step 500 / step 10 = {ratio:.3}, recovered {found}/{} boxes", gts.len());
    (report(5, pass, true, detail, t), tr.model)
}

// ---------- 6, 7, 9 ----------

const TRAIN_N: usize = 500;
const VAL_N: usize = 100;
const PRETRAIN: usize = 500;
const ADAPT: usize = 300;
const SEEDS: u64 = 5;

struct Pools {
    src: Vec<Sample>,
    tgt: Vec<Sample>,
    tgt_labeled: Vec<Sample>,
    val: Vec<Sample>,
}

fn pools() -> Pools {
    let src = synth(DomainSpec::source(), DomainTag::Source, TRAIN_N, 101);
    let tgt = synth(DomainSpec::target(), DomainTag::Target, TRAIN_N, 202);
    // the upper bound trains on the same target scans with their labels
    let tgt_labeled = tgt
        .iter()
        .map(|s| Sample::new(s.gridmap.clone(), s.labels().to_vec(), DomainTag::Source))
        .collect();
    let val = synth(DomainSpec::target(), DomainTag::Target, VAL_N, 303);
    Pools { src, tgt, tgt_labeled, val }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain_steps: PRETRAIN,
        adapt_steps: ADAPT,
        lr1: 1e-2,
        lr2: 1e-3,
        lr_boundary: Some(PRETRAIN),
        da_width: 16,
        da_lr_mult: 100.0,
        seed,
        ..TrainConfig::default()
    }
}

/// Target car AP at IoU 0.5 (Moderate) and recall at the PR knee.
fn target_car(model: &DetectorModel, val: &[Sample]) -> (f64, f64) {
    let pc = PredictConfig::default();
    let frames: Vec<EvalFrame> = val
        .iter()
        .map(|s| EvalFrame {
            dets: predict(model, &[&s.gridmap], &pc).expect("predict").remove(0),
            labels: s.labels().to_vec(),
        })
        .collect();
    let sw = kitti_sweep(&frames, 0, Difficulty::Moderate, 0.5);
    (sw.ap.unwrap_or(0.0), sw.curve.knee_recall())
}

#[derive(Debug, Default)]
struct SeedResult {
    source_only: (f64, f64),
    adapted: (f64, f64),
    img_only: f64,
    ins_only: f64,
    target_trained: f64,
    adapted_log: String,
}

fn adapt_variant(mc: &ModelConfig, ck: &Checkpoint, seed: u64, loss: LossConfig, p: &Pools) -> Trainer {
    let mut tr = Trainer::from_checkpoint(mc, ck, train_config(seed), loss).expect("restore");
    tr.adapt_domains(&p.src, &p.tgt, ADAPT).expect("adaptation");
    tr
}

fn run_seed(seed: u64, p: &Pools) -> SeedResult {
    let mc = desk_model();
    let cfg = train_config(seed);
    let mut base = Trainer::new(init_model(&mc, seed).unwrap(), cfg.clone(), LossConfig::default()).unwrap();
    base.pretrain(&p.src).expect("pretraining");
    let ck = base.checkpoint();

    // same extra budget on source labels only
    let mut so = Trainer::from_checkpoint(&mc, &ck, cfg.clone(), LossConfig::default()).unwrap();
    so.train_source(&p.src, ADAPT, cfg.adapt_source).expect("source-only");
    let full = adapt_variant(&mc, &ck, seed, LossConfig::default(), p);
    let only = |img: bool, ins: bool| LossConfig {
        use_img: img,
        use_ins: ins,
        use_cons: false,
        ..LossConfig::default()
    };
    let img = adapt_variant(&mc, &ck, seed, only(true, false), p);
    let ins = adapt_variant(&mc, &ck, seed, only(false, true), p);
    let mut ub = Trainer::new(init_model(&mc, seed).unwrap(), cfg.clone(), LossConfig::default()).unwrap();
    ub.pretrain(&p.tgt_labeled).expect("target pretraining");
    ub.train_source(&p.tgt_labeled, ADAPT, cfg.adapt_source).expect("target training");

    SeedResult {
        source_only: target_car(&so.model, &p.val),
        adapted: target_car(&full.model, &p.val),
        img_only: target_car(&img.model, &p.val).0,
        ins_only: target_car(&ins.model, &p.val).0,
        target_trained: target_car(&ub.model, &p.val).0,
        adapted_log: format!("{}{}", base.metrics_log(), full.metrics_log()),
    }
}

fn experiment() -> (Vec<Outcome>, Vec<SeedResult>, Pools) {
    let t = Instant::now();
    let p = pools();
    say(&format!("  synthetic pools ready in {:.0}s", t.elapsed().as_secs_f64()));
    let mut results = Vec::new();
    for seed in 0..SEEDS {
        let ts = Instant::now();
        let r = run_seed(seed, &p);
        say(&format!(
            "  seed {seed}: target car AP source-only {:.2}, adapted {:.2}, img-only {:.2}, ins-only {:.2}, target-trained {:.2}; knee recall {:.3} -> {:.3} ({:.0}s)",
            r.source_only.0,
            r.adapted.0,
            r.img_only,
            r.ins_only,
            r.target_trained,
            r.source_only.1,
            r.adapted.1,
            ts.elapsed().as_secs_f64()
        ));
        results.push(r);
    }
    let ok6 = results
        .iter()
        .filter(|r| r.adapted.0 >= r.source_only.0 + 5.0 && r.target_trained >= r.adapted.0)
        .count();
    let mean = |f: &dyn Fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
    let o6 = report(
        6,
        ok6 >= 4,
        false,
        format!(
            "ordering held in {ok6}/{SEEDS} seeds; mean target AP source-only {:.2}, adapted {:.2}, target-trained {:.2}",
            mean(&|r| r.source_only.0),
            mean(&|r| r.adapted.0),
            mean(&|r| r.target_trained)
        ),
        t,
    );
    let ok7 = results
        .iter()
        .filter(|r| r.adapted.0 >= r.img_only && r.adapted.0 >= r.ins_only)
        .count();
    let knee_up = mean(&|r| r.adapted.1) > mean(&|r| r.source_only.1);
    let o7 = report(
        7,
        2 * ok7 > SEEDS as usize && knee_up,
        false,
        format!(
            "full >= single components in {ok7}/{SEEDS} seeds; mean knee recall {:.3} -> {:.3}",
            mean(&|r| r.source_only.1),
            mean(&|r| r.adapted.1)
        ),
        t,
    );
    (vec![o6, o7], results, p)
}

fn criterion_9(first: &SeedResult) -> Outcome {
    let t = Instant::now();
    // rebuild the pools from scratch so data generation is covered too
    let p = pools();
    let mc = desk_model();
    let mut base = Trainer::new(init_model(&mc, 0).unwrap(), train_config(0), LossConfig::default()).unwrap();
    base.pretrain(&p.src).expect("pretraining");
    let full = adapt_variant(&mc, &base.checkpoint(), 0, LossConfig::default(), &p);
    let log = format!("{}{}", base.metrics_log(), full.metrics_log());
    let pass = log == first.adapted_log && !log.is_empty();
    let detail = format!("seed 0 rerun, {} log lines, identical: {pass}", log.lines().count());
    report(9, pass, true, detail, t)
}

// ---------- 8 ----------

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let shifted = common::nuscenes_fixture(|b| gridda::geometry::OrientedBox {
        x: b.x + 0.7 * 0.6,
        y: b.y + 0.7 * 0.8,
        ..b
    });
    let scaled = common::nuscenes_fixture(|b| gridda::geometry::OrientedBox {
        w: 2.0 * b.w,
        h: 2.0 * b.h,
        ..b
    });
    let (m, ate, ase) = (shifted.map.unwrap_or(f64::NAN), shifted.ate.unwrap_or(f64::NAN), scaled.ase.unwrap_or(f64::NAN));
    let pass = (m - 75.0).abs() <= 0.1 && (ate - 0.7).abs() <= 1e-6 && (ase - 0.75).abs() <= 1e-6;
    report(8, pass, true, format!("shifted mAP {m:.3}, ATE {ate:.7}; scaled ASE {ase:.7}"), t)
}

// ---------- 10 ----------

fn bits(ck: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    ck.entries
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn criterion_10(model: &DetectorModel) -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::from_store(&model.params);
    let mem = decode_checkpoint(&encode_checkpoint(&ck), "mem".as_ref()).expect("decode checkpoint");
    let path = dir.path().join("m.ck");
    write_checkpoint(&path, &ck).unwrap();
    let disk = read_checkpoint(&path).expect("read checkpoint");
    let ck_ok = bits(&mem) == bits(&ck) && bits(&disk) == bits(&ck);

    let s = &synth(DomainSpec::target(), DomainTag::Target, 1, 10)[0];
    let gm = dir.path().join("m.gmap");
    write_gridmap(&gm, &s.gridmap).unwrap();
    let back = read_gridmap(&gm).expect("read grid map");
    let mem = decode_gridmap(&encode_gridmap(&s.gridmap), "mem".as_ref()).expect("decode grid map");
    let key = |m: &gridda::gridmap::GridMap| (m.spec, m.width, m.height, m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let gm_ok = key(&back) == key(&s.gridmap) && key(&mem) == key(&s.gridmap);

    let [velo, label, calib] = common::write_kitti_fixture(&dir.path().join("kitti"));
    let out = dir.path().join("ingested");
    let (manifest, _) = gridda::data::ingest_kitti(&velo, &label, &calib, GridSpec::new(0.5, 64.0).unwrap(), &out, DomainTag::Source)
        .expect("ingest");
    let labels = gridda::data::read_labels(&manifest.resolve(&manifest.entries[0].labels)).expect("labels");
    let objects = common::kitti_objects();
    let mut kitti_err = if labels.len() == objects.len() { 0.0f64 } else { f64::INFINITY };
    for (l, o) in labels.iter().zip(&objects) {
        let (x, y, w, h, th) = o.expected();
        for e in [l.bbox.x - x, l.bbox.y - y, l.bbox.w - w, l.bbox.h - h, common::angle_gap_mod_pi(l.bbox.theta, th)] {
            kitti_err = kitti_err.max(e.abs());
        }
    }
    let pass = ck_ok && gm_ok && kitti_err <= 1e-4;
    let detail = format!(
        "checkpoint bit-exact {ck_ok} ({} tensors), grid map bit-exact {gm_ok}, KITTI max error {kitti_err:.1e}",
        ck.entries.len()
    );
    report(10, pass, true, detail, t)
}

#[test]
fn acceptance() {
    let total = Instant::now();
    let mut out = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let (o5, model) = criterion_5();
    out.push(o5);
    let (o67, results, _pools) = experiment();
    out.extend(o67);
    out.push(criterion_8());
    out.push(criterion_9(&results[0]));
    out.push(criterion_10(&model));
    out.sort_by_key(|o| o.id);

    say(&format!("acceptance summary ({:.0}s):", total.elapsed().as_secs_f64()));
    for o in &out {
        let tag = match (o.pass, o.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported)",
        };
        say(&format!("  {:>2} {tag}: {}", o.id, o.detail));
    }
    let failed: Vec<u32> = out.iter().filter(|o| o.hard && !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "hard criteria failed: {failed:?}");
}
