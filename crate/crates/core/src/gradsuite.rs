//! Finite-difference checks of every autodiff primitive and of the full
//! training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, AutodiffError, Coords, Graph, ParamStore, Tensor, Var};
use crate::domainadapt::init_domain_classifiers;
use crate::geometry::{Anchor, OrientedBox, PyramidConfig};
use crate::losses::{dense_targets, detection_loss, sample_targets, DomainTag, LossConfig, SampleTargets};
use crate::model::{forward, init_model, Mode, ModelConfig, NormKind};
use crate::train::{domain_loss_terms, TrainError};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-3;
// Through the whole network a 1e-3 step crosses ReLU kinks often enough to
// dominate the error, so the end-to-end probe uses a much smaller one.
const E2E_EPS: f64 = 1e-6;

type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>;

/// Uniform values in `[lo, hi)`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1.1)` and a random sign, so nothing sits
/// on the kink of relu or abs.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.1);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * w)` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn case(
    name: &'static str,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError> + 'static,
    point: Vec<Tensor<f64>>,
) -> (&'static str, LossFn, Vec<Tensor<f64>>) {
    (name, Box::new(f), point)
}

/// Maximum relative gradient error of each primitive on random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s = seed;
    let x4 = |r: &mut ChaCha8Rng| uniform(r, &[2, 3, 5, 4], -1.0, 1.0);

    // Strictly increasing rows with random gaps keep the argmax unique.
    let mut gaps = uniform(r, &[3, 4, 2], 0.05, 1.0);
    {
        let d = gaps.data_mut();
        for i in 0..3 {
            for k in 0..2 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += d[(i * 4 + j) * 2 + k];
                    d[(i * 4 + j) * 2 + k] = acc;
                }
            }
        }
    }
    // Shuffle along the reduced axis so the max is not always last.
    let maxin = {
        let d = gaps.data().to_vec();
        let perm = [2usize, 0, 3, 1];
        Tensor::from_fn(&[3, 4, 2], |idx| {
            let (i, j, k) = (idx / 8, (idx / 2) % 4, idx % 2);
            d[(i * 4 + perm[j]) * 2 + k]
        })
    };

    let cases = vec![
        case(
            "conv2d",
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted(g, y, s)
            },
            vec![x4(r), uniform(r, &[4, 3, 3, 3], -0.5, 0.5), uniform(r, &[4], -0.5, 0.5)],
        ),
        case(
            "conv2d_stride2",
            move |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, 1)?;
                weighted(g, y, s + 1)
            },
            vec![x4(r), uniform(r, &[2, 3, 3, 3], -0.5, 0.5)],
        ),
        case(
            "depthwise_conv2d",
            move |g, v| {
                let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted(g, y, s + 2)
            },
            vec![x4(r), uniform(r, &[3, 1, 3, 3], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)],
        ),
        case(
            "add",
            move |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y, s + 3)
            },
            vec![x4(r), x4(r)],
        ),
        case(
            "sub",
            move |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y, s + 4)
            },
            vec![x4(r), x4(r)],
        ),
        case(
            "mul",
            move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, s + 5)
            },
            vec![x4(r), x4(r)],
        ),
        case(
            "affine",
            move |g, v| {
                let y = g.affine(v[0], -1.7, 0.3)?;
                weighted(g, y, s + 6)
            },
            vec![x4(r)],
        ),
        case(
            "relu",
            move |g, v| {
                let y = g.relu(v[0])?;
                weighted(g, y, s + 7)
            },
            vec![off_zero(r, &[2, 3, 5, 4])],
        ),
        case(
            "sigmoid",
            move |g, v| {
                let y = g.sigmoid(v[0])?;
                weighted(g, y, s + 8)
            },
            vec![uniform(r, &[2, 3, 5, 4], -4.0, 4.0)],
        ),
        case(
            "log",
            move |g, v| {
                let y = g.log(v[0])?;
                weighted(g, y, s + 9)
            },
            vec![uniform(r, &[2, 3, 5, 4], 0.2, 3.0)],
        ),
        case(
            "exp",
            move |g, v| {
                let y = g.exp(v[0])?;
                weighted(g, y, s + 10)
            },
            vec![x4(r)],
        ),
        case(
            "abs",
            move |g, v| {
                let y = g.abs(v[0])?;
                weighted(g, y, s + 11)
            },
            vec![off_zero(r, &[2, 3, 5, 4])],
        ),
        case(
            "square",
            move |g, v| {
                let y = g.square(v[0])?;
                weighted(g, y, s + 12)
            },
            vec![x4(r)],
        ),
        case(
            "pow",
            move |g, v| {
                let y = g.pow(v[0], 1.7)?;
                weighted(g, y, s + 13)
            },
            vec![uniform(r, &[2, 3, 5, 4], 0.2, 2.0)],
        ),
        case(
            "clamp",
            move |g, v| {
                let y = g.clamp(v[0], -0.5, 0.5)?;
                weighted(g, y, s + 14)
            },
            // 0.1 off each bound
            vec![Tensor::from_fn(&[2, 3, 5, 4], {
                let vals: Vec<f64> = (0..120)
                    .map(|_| match r.random_range(0..3) {
                        0 => r.random_range(-1.5..-0.6),
                        1 => r.random_range(-0.4..0.4),
                        _ => r.random_range(0.6..1.5),
                    })
                    .collect();
                move |i| vals[i]
            })],
        ),
        case(
            "upsample2x",
            move |g, v| {
                let y = g.upsample2x(v[0])?;
                weighted(g, y, s + 15)
            },
            vec![x4(r)],
        ),
        case(
            "concat",
            move |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                weighted(g, y, s + 16)
            },
            vec![x4(r), uniform(r, &[2, 2, 5, 4], -1.0, 1.0)],
        ),
        case(
            "narrow_batch",
            move |g, v| {
                let y = g.narrow_batch(v[0], 1, 1)?;
                weighted(g, y, s + 17)
            },
            vec![x4(r)],
        ),
        case(
            "group_norm",
            move |g, v| {
                let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
                weighted(g, y, s + 18)
            },
            vec![
                uniform(r, &[2, 4, 3, 3], -1.0, 1.0),
                uniform(r, &[4], 0.5, 1.5),
                uniform(r, &[4], -0.5, 0.5),
            ],
        ),
        case(
            "batch_norm",
            move |g, v| {
                let (y, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
                weighted(g, y, s + 19)
            },
            vec![x4(r), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5)],
        ),
        case(
            "channel_affine",
            move |g, v| {
                let y = g.channel_affine(v[0], vec![0.5, -2.0, 1.3], vec![0.1, 0.0, -0.4])?;
                weighted(g, y, s + 20)
            },
            vec![x4(r)],
        ),
        case(
            "sum",
            move |g, v| {
                let y = g.sum(v[0])?;
                g.square(y)
            },
            vec![x4(r)],
        ),
        case(
            "mean",
            move |g, v| {
                let y = g.mean(v[0])?;
                g.square(y)
            },
            vec![x4(r)],
        ),
        case(
            "max_over_axis",
            move |g, v| {
                let y = g.max_over_axis(v[0], 1)?;
                weighted(g, y, s + 21)
            },
            vec![maxin],
        ),
    ];

    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, f, point) in cases {
        out.push((name, finite_diff_check(f, &point, EPS, Coords::All)?));
    }
    out.push(("grad_reverse", grad_reverse_error(seed)?));
    Ok(out)
}

/// The reversal layer is the identity going forward, so its gradient is
/// checked against `-lambda` times the finite difference.
fn grad_reverse_error(seed: u64) -> Result<f64, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e1);
    let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let lambda = 0.7;
    let build = |g: &mut Graph<f64>, v: Var| -> Result<Var, AutodiffError> {
        let r = g.grad_reverse(v, lambda)?;
        let y = g.sigmoid(r)?;
        weighted(g, y, seed + 22)
    };
    let mut g = Graph::new();
    let v = g.input(x.clone())?;
    let loss = build(&mut g, v)?;
    let grads = g.backward(loss)?;
    let analytic = grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor<f64>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let v = g.input(t)?;
        let l = build(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += EPS;
        let up = eval(p.clone())?;
        p.data_mut()[i] -= 2.0 * EPS;
        let down = eval(p)?;
        let numeric = -lambda * (up - down) / (2.0 * EPS);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}

/// Settings of the end-to-end check.
#[derive(Clone, Debug)]
pub struct EndToEndConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub grl_lambda: f64,
    /// Number of randomly chosen parameter coordinates to probe.
    pub coords: usize,
    pub seed: u64,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                widths: [4, 4, 4, 4],
                blocks: [1, 1, 1, 1],
                fpn_width: 4,
                head_convs: 1,
                groups: 2,
                norm: NormKind::Group,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            grl_lambda: 1.0,
            coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EndToEndReport {
    pub max_rel_err: f64,
    pub probed: usize,
    pub total_loss: f64,
}

const GRID: usize = 32;
const CELL: f64 = 0.5;

struct Fixture {
    xs: Tensor<f64>,
    xt: Tensor<f64>,
    targets: Vec<SampleTargets>,
    pyramid: PyramidConfig,
}

fn fixture(cfg: &EndToEndConfig) -> Result<Fixture, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe2e);
    let c = cfg.model.in_channels;
    let xs = uniform(&mut rng, &[2, c, GRID, GRID], 0.0, 2.0);
    let xt = uniform(&mut rng, &[2, c, GRID, GRID], 0.0, 1.0);
    let pyramid = PyramidConfig::standard(CELL, GRID, GRID);
    let anchors: Vec<Anchor> = pyramid.all_anchors().concat();
    let gts = [
        vec![(OrientedBox::new(2.0, 1.0, 4.0, 1.8, 0.2)?, 0)],
        vec![(OrientedBox::new(-4.0, -3.0, 4.2, 1.9, -0.4)?, 0), (OrientedBox::new(3.0, 4.0, 0.8, 0.7, 0.0)?, 1)],
    ];
    let targets = gts
        .iter()
        .map(|g| sample_targets(&anchors, g, &[], 0.5, 0.4, DomainTag::Source))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Fixture {
        xs,
        xt,
        targets,
        pyramid,
    })
}

/// Small model with domain classifiers in f64. The classifiers' zero-initialised
/// output layers are randomised so gradients reach the features.
fn checked_model(cfg: &EndToEndConfig) -> Result<ParamStore<f64>, TrainError> {
    let mut model = init_model(&cfg.model, cfg.seed)?;
    init_domain_classifiers(&mut model, 4, 4, cfg.seed ^ 0xDA)?;
    let mut store: ParamStore<f64> = model.params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x07);
    for p in store.iter_mut().filter(|p| p.name.starts_with("da/") && p.name.contains("/out/")) {
        p.value = uniform(&mut rng, &p.value.shape().to_vec(), -0.5, 0.5);
    }
    Ok(store)
}

/// Detection plus consistency part and adversarial (image and instance)
/// part of the total loss, as graph nodes.
struct Parts {
    plain: Var,
    adversarial: Option<Var>,
    total: Var,
}

fn build(g: &mut Graph<f64>, store: &ParamStore<f64>, cfg: &EndToEndConfig, fx: &Fixture) -> Result<Parts, TrainError> {
    let xs = g.constant(fx.xs.clone())?;
    let xt = g.constant(fx.xt.clone())?;
    let out_s = forward(g, store, &cfg.model, xs, Mode::Train)?;
    let out_t = forward(g, store, &cfg.model, xt, Mode::Train)?;
    let refs: Vec<&SampleTargets> = fx.targets.iter().collect();
    let dense = dense_targets::<f64>(&refs, &fx.pyramid, cfg.model.num_classes, cfg.loss.alpha)?;
    let det = detection_loss(g, &out_s.head.cls_logits, &out_s.head.box_reg, &dense, &cfg.loss)?;
    let t = domain_loss_terms(g, store, &cfg.loss, Some(cfg.grl_lambda), &out_s, &out_t)?;

    let levels = out_s.pyramid.levels.len();
    let w = cfg.loss.lambda1 / levels as f64;
    let sum = |g: &mut Graph<f64>, vs: &[Var]| -> Result<Option<Var>, AutodiffError> {
        let mut acc: Option<Var> = None;
        for &v in vs {
            acc = Some(match acc {
                None => v,
                Some(a) => g.add(a, v)?,
            });
        }
        acc.map(|a| g.affine(a, w, 0.0)).transpose()
    };
    let adv: Vec<Var> = t.img.iter().chain(&t.ins).copied().collect();
    let adversarial = sum(g, &adv)?;
    let mut plain = det.det;
    if let Some(c) = sum(g, &t.cons)? {
        plain = g.add(plain, c)?;
    }
    let total = match adversarial {
        Some(a) => g.add(plain, a)?,
        None => plain,
    };
    Ok(Parts {
        plain,
        adversarial,
        total,
    })
}

/// Checks the gradient the trainer applies for `L_det + lambda1 L_DA` on a
/// small model with domain classifiers, in f64. Parameters of the domain
/// classifiers must receive the plain gradient of the whole objective; every
/// other parameter sees the image and instance terms through the reversal
/// layer, so their share is expected with the factor `-grl_lambda`.
pub fn end_to_end_check(cfg: &EndToEndConfig) -> Result<EndToEndReport, TrainError> {
    cfg.model.validate()?;
    let store = checked_model(cfg)?;
    let fx = fixture(cfg)?;

    let mut g = Graph::new();
    let parts = build(&mut g, &store, cfg, &fx)?;
    let total_loss = g.value(parts.total).item();
    let grads = g.backward(parts.total)?;
    let mut analytic = store.clone();
    analytic.load_grads(&grads);

    let eval = |s: &ParamStore<f64>| -> Result<(f64, f64), TrainError> {
        let mut g = Graph::new();
        let p = build(&mut g, s, cfg, &fx)?;
        Ok((g.value(p.plain).item(), p.adversarial.map_or(0.0, |a| g.value(a).item())))
    };

    let names: Vec<(String, usize)> = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.numel()))
        .collect();
    let total: usize = names.iter().map(|n| n.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc00d);
    let count = cfg.coords.min(total);
    let mut picks = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();

    let mut worst = 0.0f64;
    for flat in picks {
        let (mut k, mut i) = (0, flat);
        while i >= names[k].1 {
            i -= names[k].1;
            k += 1;
        }
        let name = &names[k].0;
        let id = store.id(name)?;
        let mut probe = store.clone();
        let base = store.get(id).value.data()[i];
        probe.get_mut(id).value.data_mut()[i] = base + E2E_EPS;
        let up = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = base - E2E_EPS;
        let down = eval(&probe)?;
        let d_plain = (up.0 - down.0) / (2.0 * E2E_EPS);
        let d_adv = (up.1 - down.1) / (2.0 * E2E_EPS);
        let adv_factor = if name.starts_with("da/") { 1.0 } else { -cfg.grl_lambda };
        let numeric = d_plain + adv_factor * d_adv;
        let a = analytic.get(id).grad[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(EndToEndReport {
        max_rel_err: worst,
        probed: count,
        total_loss,
    })
}

/// Largest absolute gradient differences between the domain loss with the
/// reversal layer and without it.
#[derive(Clone, Copy, Debug)]
pub struct GrlContract {
    /// `max |g_rev + lambda g_plain|` over detector parameters.
    pub backbone: f64,
    /// `max |g_rev - g_plain|` over domain-classifier parameters.
    pub classifier: f64,
    /// Largest detector-side gradient magnitude, to show the check is not vacuous.
    pub backbone_scale: f64,
}

/// Compares gradients of `L_DA` (every term routed through the reversal
/// layer) with and without reversal at strength `lambda`.
pub fn grl_contract(seed: u64, lambda: f64) -> Result<GrlContract, TrainError> {
    let cfg = EndToEndConfig {
        seed,
        loss: LossConfig {
            literal_grouping: true,
            ..LossConfig::default()
        },
        ..EndToEndConfig::default()
    };
    let store = checked_model(&cfg)?;
    let fx = fixture(&cfg)?;
    let grads = |reversal: Option<f64>| -> Result<ParamStore<f64>, TrainError> {
        let mut g = Graph::new();
        let xs = g.constant(fx.xs.clone())?;
        let xt = g.constant(fx.xt.clone())?;
        let out_s = forward(&mut g, &store, &cfg.model, xs, Mode::Train)?;
        let out_t = forward(&mut g, &store, &cfg.model, xt, Mode::Train)?;
        let t = domain_loss_terms(&mut g, &store, &cfg.loss, reversal, &out_s, &out_t)?;
        let da = t.da.expect("all terms enabled");
        let grads = g.backward(da)?;
        let mut s = store.clone();
        s.load_grads(&grads);
        Ok(s)
    };
    let rev = grads(Some(lambda))?;
    let plain = grads(None)?;
    let mut out = GrlContract {
        backbone: 0.0,
        classifier: 0.0,
        backbone_scale: 0.0,
    };
    for (a, b) in rev.iter().zip(plain.iter()).filter(|(a, _)| a.trainable) {
        for (&x, &y) in a.grad.iter().zip(&b.grad) {
            if a.name.starts_with("da/") {
                out.classifier = out.classifier.max((x - y).abs());
            } else {
                out.backbone = out.backbone.max((x + lambda * y).abs());
                out.backbone_scale = out.backbone_scale.max(y.abs());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let rows = primitive_suite(3).unwrap();
        assert_eq!(rows.len(), 25);
        for (name, err) in rows {
            assert!(err < PRIMITIVE_TOLERANCE, "{name}: {err:e}");
        }
    }

    #[test]
    fn end_to_end_gradient_matches() {
        let cfg = EndToEndConfig {
            coords: 60,
            ..EndToEndConfig::default()
        };
        let r = end_to_end_check(&cfg).unwrap();
        assert!(r.total_loss.is_finite());
        assert!(r.max_rel_err < END_TO_END_TOLERANCE, "{:e}", r.max_rel_err);
    }

    #[test]
    fn zero_reversal_blocks_the_adversarial_share() {
        let cfg = EndToEndConfig {
            coords: 60,
            grl_lambda: 0.0,
            ..EndToEndConfig::default()
        };
        let ok = end_to_end_check(&cfg).unwrap();
        assert!(ok.max_rel_err < END_TO_END_TOLERANCE);
    }

    #[test]
    fn reversal_negates_detector_side_only() {
        let c = grl_contract(1, 1.0).unwrap();
        assert!(c.backbone <= 1e-6, "{c:?}");
        assert!(c.classifier <= 1e-6, "{c:?}");
        assert!(c.backbone_scale > 1e-4, "{c:?}");
    }
}
