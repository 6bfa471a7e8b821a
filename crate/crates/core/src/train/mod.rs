//! Two-phase optimization: source-only pretraining followed by adversarial
//! fine-tuning on mixed source/target batches.

mod optim;

pub use optim::{clip_grad_norm, sgd_step, sgd_step_scaled, OptimizerState};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Scalar, Tensor, Var};
use crate::data::{ObjectClass, Sample};
use crate::domainadapt::{
    image_domain_forward, init_domain_classifiers, instance_domain_forward, DomainError, INS_PREFIX,
};
use crate::geometry::{Anchor, GeometryError, PyramidConfig};
use crate::losses::{
    consistency_loss, da_loss, dense_targets, detection_loss, domain_bce, sample_targets, total_loss, DomainTag,
    LossConfig, LossError, LossReport, SampleTargets,
};
use crate::model::{forward, init_model, Checkpoint, DetectorModel, ForwardOutput, Mode, ModelConfig, ModelError};

const MOMENTUM_PREFIX: &str = "opt/momentum/";
const STEP_ENTRY: &str = "opt/step";
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("cannot draw {want} distinct samples from a {pool} pool of {have}")]
    PoolTooSmall { pool: &'static str, want: usize, have: usize },
    #[error("sample {index} of the {pool} pool: {detail}")]
    BadSample { pool: &'static str, index: usize, detail: String },
    #[error("target labels were read {0} times during adaptation")]
    TargetLabelsRead(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_steps: usize,
    pub adapt_steps: usize,
    pub lr1: f64,
    pub lr2: f64,
    /// Global step at which `lr2` takes over. Defaults to the end of
    /// pretraining.
    pub lr_boundary: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; 0 disables.
    pub clip_norm: f64,
    pub pretrain_batch: usize,
    pub adapt_source: usize,
    pub adapt_target: usize,
    pub seed: u64,
    /// Random horizontal mirroring of training maps.
    pub flip: bool,
    pub fg_thr: f64,
    pub bg_thr: f64,
    /// Channel width of the domain classifiers.
    pub da_width: usize,
    /// Gradient reversal strength.
    pub grl_lambda: f64,
    /// Learning-rate multiplier of the domain classifiers.
    pub da_lr_mult: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 3000,
            adapt_steps: 2000,
            lr1: 1e-4,
            lr2: 1e-5,
            lr_boundary: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            pretrain_batch: 4,
            adapt_source: 2,
            adapt_target: 2,
            seed: 0,
            flip: true,
            fg_thr: 0.5,
            bg_thr: 0.4,
            da_width: 64,
            grl_lambda: 1.0,
            da_lr_mult: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr1 >= 0.0 && self.lr2 >= 0.0 && self.lr1.is_finite() && self.lr2.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return bad("weight decay and clip norm must be non-negative");
        }
        if self.pretrain_batch == 0 || self.adapt_source == 0 || self.adapt_target == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.fg_thr >= self.bg_thr && self.bg_thr >= 0.0 && self.fg_thr <= 1.0) {
            return bad("need 0 <= bg_thr <= fg_thr <= 1");
        }
        if self.da_width == 0 {
            return bad("da_width must be positive");
        }
        if !(self.grl_lambda >= 0.0 && self.grl_lambda.is_finite()) {
            return bad("grl_lambda must be finite and non-negative");
        }
        if !(self.da_lr_mult >= 0.0 && self.da_lr_mult.is_finite()) {
            return bad("da_lr_mult must be finite and non-negative");
        }
        Ok(())
    }

    pub fn boundary(&self) -> usize {
        self.lr_boundary.unwrap_or(self.pretrain_steps)
    }
}

/// Piecewise-constant schedule: `lr1` before the boundary, `lr2` from it on.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.boundary() {
        cfg.lr1
    } else {
        cfg.lr2
    }
}

/// One drawn example: pool index and whether it is mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    pub flip: bool,
}

/// Sources first, then targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<Draw>,
    pub target: Vec<Draw>,
}

/// Random stream of one step. Source and target draws use separate streams,
/// so the source half of a batch does not depend on the target pool.
pub fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 2) | stream);
    rng
}

/// `k` distinct uniform draws from a pool of `len`.
pub fn draw<R: Rng>(rng: &mut R, pool: &'static str, len: usize, k: usize, flip: bool) -> Result<Vec<Draw>, TrainError> {
    if len == 0 {
        return Err(TrainError::EmptyPool(pool));
    }
    if k > len {
        return Err(TrainError::PoolTooSmall { pool, want: k, have: len });
    }
    let picks = index::sample(rng, len, k).into_vec();
    Ok(picks
        .into_iter()
        .map(|index| Draw {
            index,
            flip: flip && rng.random_bool(0.5),
        })
        .collect())
}

/// Batch of step `step`: `k_source` draws from the source pool and
/// `k_target` from the target pool. A zero count skips that pool.
pub fn make_batch(
    seed: u64,
    step: usize,
    pools: (usize, usize),
    counts: (usize, usize),
    flip: bool,
) -> Result<Batch, TrainError> {
    let source = if counts.0 > 0 {
        draw(&mut step_rng(seed, step, 0), "source", pools.0, counts.0, flip)?
    } else {
        Vec::new()
    };
    let target = if counts.1 > 0 {
        draw(&mut step_rng(seed, step, 1), "target", pools.1, counts.1, flip)?
    } else {
        Vec::new()
    };
    Ok(Batch { source, target })
}

/// Stacks the grid maps of `draws` into `N x C x H x W`.
fn batch_tensor(pool: &[Sample], draws: &[Draw]) -> Result<Tensor<f32>, TrainError> {
    let first = &pool[draws[0].index].gridmap;
    let (h, w) = (first.height, first.width);
    let c = first.data.len() / (h * w);
    let mut data = Vec::with_capacity(draws.len() * first.data.len());
    for d in draws {
        let m = &pool[d.index].gridmap;
        if d.flip {
            for row in m.data.chunks_exact(w) {
                data.extend(row.iter().rev());
            }
        } else {
            data.extend_from_slice(&m.data);
        }
    }
    Ok(Tensor::new(vec![draws.len(), c, h, w], data)?)
}

/// Anchor targets of every source example, plain and mirrored.
struct TargetCache {
    plain: Vec<SampleTargets>,
    mirrored: Vec<SampleTargets>,
}

impl TargetCache {
    fn get(&self, d: &Draw) -> &SampleTargets {
        if d.flip {
            &self.mirrored[d.index]
        } else {
            &self.plain[d.index]
        }
    }
}

fn check_pool(pool: &[Sample], name: &'static str, domain: DomainTag, dims: (usize, usize)) -> Result<(), TrainError> {
    for (i, s) in pool.iter().enumerate() {
        let bad = |detail: String| TrainError::BadSample { pool: name, index: i, detail };
        if s.domain != domain {
            return Err(bad(format!("domain {:?}", s.domain)));
        }
        if (s.gridmap.height, s.gridmap.width) != dims {
            return Err(bad(format!(
                "{}x{} grid, expected {}x{}",
                s.gridmap.height, s.gridmap.width, dims.0, dims.1
            )));
        }
    }
    Ok(())
}

fn build_targets(
    pool: &[Sample],
    anchors: &[Anchor],
    cfg: &TrainConfig,
) -> Result<TargetCache, TrainError> {
    let one = |s: &Sample, mirror: bool| -> Result<SampleTargets, TrainError> {
        let mut gts = Vec::new();
        let mut dont_care = Vec::new();
        for l in s.labels() {
            let b = if mirror { l.bbox.mirror_x() } else { l.bbox };
            match l.class {
                ObjectClass::DontCare => dont_care.push(b),
                c => gts.push((b, c.id().expect("detected class"))),
            }
        }
        Ok(sample_targets(anchors, &gts, &dont_care, cfg.fg_thr, cfg.bg_thr, DomainTag::Source)?)
    };
    let plain = pool.par_iter().map(|s| one(s, false)).collect::<Result<Vec<_>, _>>()?;
    let mirrored = if cfg.flip {
        pool.par_iter().map(|s| one(s, true)).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(TargetCache { plain, mirrored })
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Domain-adaptation loss nodes of one step, one entry per level for each
/// enabled term.
#[derive(Clone, Debug, Default)]
pub struct DomainTerms {
    pub img: Vec<Var>,
    pub ins: Vec<Var>,
    pub cons: Vec<Var>,
    /// `L_DA`, or `None` when every term is disabled.
    pub da: Option<Var>,
}

/// Image, instance and consistency terms for one source and one target
/// forward pass. `reversal` is the strength of the reversal layer in front
/// of the image and instance classifiers; `None` leaves gradients as they are.
pub fn domain_loss_terms<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    lc: &LossConfig,
    reversal: Option<f64>,
    out_s: &ForwardOutput<S>,
    out_t: &ForwardOutput<S>,
) -> Result<DomainTerms, TrainError> {
    let levels = out_s.pyramid.levels.len();
    let ns = g.shape(out_s.pyramid.levels[0])[0];
    let nt = g.shape(out_t.pyramid.levels[0])[0];
    let (ws, wt) = (ns as f64 / (ns + nt) as f64, nt as f64 / (ns + nt) as f64);
    let (ds, dt) = (vec![DomainTag::Source.label(); ns], vec![DomainTag::Target.label(); nt]);
    let rev = reversal;

    // Example-weighted mean over the joint batch of two per-half means.
    let pooled = |g: &mut Graph<S>, a: Var, b: Var| -> Result<Var, TrainError> {
        let a = g.affine(a, S::of(ws), S::zero())?;
        let b = g.affine(b, S::of(wt), S::zero())?;
        Ok(g.add(a, b)?)
    };
    let bce = |g: &mut Graph<S>, ps: &[Var], pt: &[Var]| -> Result<Vec<Var>, TrainError> {
        (0..levels)
            .map(|l| {
                let a = domain_bce(g, ps[l], &ds, lc.literal_domain_loss)?;
                let b = domain_bce(g, pt[l], &dt, lc.literal_domain_loss)?;
                pooled(g, a, b)
            })
            .collect()
    };
    let img_fwd = |g: &mut Graph<S>, o: &ForwardOutput<S>, r| image_domain_forward(g, store, &o.pyramid.levels, r);
    let ins_fwd = |g: &mut Graph<S>, o: &ForwardOutput<S>, r| {
        instance_domain_forward(g, store, &o.head.cls_feat, &o.head.reg_feat, r)
    };

    let mut t = DomainTerms::default();
    let mut rev_img = None;
    let mut rev_ins = None;
    if lc.use_img {
        let (ps, pt) = (img_fwd(g, out_s, rev)?, img_fwd(g, out_t, rev)?);
        t.img = bce(g, &ps, &pt)?;
        rev_img = Some((ps, pt));
    }
    if lc.use_ins {
        let (ps, pt) = (ins_fwd(g, out_s, rev)?, ins_fwd(g, out_t, rev)?);
        t.ins = bce(g, &ps, &pt)?;
        rev_ins = Some((ps, pt));
    }
    if lc.use_cons && lc.use_img && lc.use_ins {
        // By default the consistency term gets its own pass without the
        // reversal, so the features are pulled toward agreement rather
        // than pushed away from it.
        let (is, it, ns_, nt_) = if lc.literal_grouping {
            let (is, it) = rev_img.expect("image term computed");
            let (ns_, nt_) = rev_ins.expect("instance term computed");
            (is, it, ns_, nt_)
        } else {
            (
                img_fwd(g, out_s, None)?,
                img_fwd(g, out_t, None)?,
                ins_fwd(g, out_s, None)?,
                ins_fwd(g, out_t, None)?,
            )
        };
        for l in 0..levels {
            let a = consistency_loss(g, is[l], ns_[l])?;
            let b = consistency_loss(g, it[l], nt_[l])?;
            t.cons.push(pooled(g, a, b)?);
        }
    }
    t.da = da_loss(g, levels, &t.img, &t.ins, &t.cons)?;
    Ok(t)
}

/// Model, optimizer state and loss history of one training run.
pub struct Trainer {
    pub model: DetectorModel,
    pub opt: OptimizerState<f32>,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub history: Vec<(usize, LossReport)>,
    /// Global gradient norm of each step, before clipping.
    pub grad_norms: Vec<f64>,
}

impl Trainer {
    pub fn new(model: DetectorModel, cfg: TrainConfig, loss: LossConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        loss.validate()?;
        model.config.validate()?;
        Ok(Self {
            model,
            opt: OptimizerState::default(),
            cfg,
            loss,
            history: Vec::new(),
            grad_norms: Vec::new(),
        })
    }

    /// Global step count so far.
    pub fn step(&self) -> usize {
        self.opt.step
    }

    fn levels(&self) -> usize {
        self.model.config.widths.len()
    }

    fn pyramid_for(&self, pool: &[Sample]) -> Result<PyramidConfig, TrainError> {
        let m = &pool.first().ok_or(TrainError::EmptyPool("source"))?.gridmap;
        Ok(PyramidConfig::standard(m.spec.cell_size, m.height, m.width))
    }

    /// Optimizes `L_det` on `steps` batches of `batch` source examples.
    pub fn train_source(&mut self, source: &[Sample], steps: usize, batch: usize) -> Result<(), TrainError> {
        let pyramid = self.pyramid_for(source)?;
        check_pool(source, "source", DomainTag::Source, (pyramid.grid_h, pyramid.grid_w))?;
        let anchors: Vec<Anchor> = pyramid.all_anchors().concat();
        let cache = build_targets(source, &anchors, &self.cfg)?;
        for _ in 0..steps {
            self.step_once(source, &cache, &pyramid, None, (batch, 0))?;
        }
        Ok(())
    }

    /// Source-only pretraining with the configured batch size and length.
    pub fn pretrain(&mut self, source: &[Sample]) -> Result<(), TrainError> {
        self.train_source(source, self.cfg.pretrain_steps, self.cfg.pretrain_batch)
    }

    /// Adds the domain classifiers if the model has none yet.
    pub fn ensure_domain_classifiers(&mut self) -> Result<(), TrainError> {
        if !self.model.params.contains(&format!("{INS_PREFIX}/out/w")) {
            let levels = self.levels();
            init_domain_classifiers(&mut self.model, self.cfg.da_width, levels, self.cfg.seed ^ 0xDA)?;
        }
        Ok(())
    }

    /// Fine-tunes with `L_det` on the source half and `lambda1 L_DA` on both
    /// halves. Only the grid maps of `target` are used.
    pub fn adapt_domains(&mut self, source: &[Sample], target: &[Sample], steps: usize) -> Result<(), TrainError> {
        let pyramid = self.pyramid_for(source)?;
        let dims = (pyramid.grid_h, pyramid.grid_w);
        check_pool(source, "source", DomainTag::Source, dims)?;
        if target.is_empty() {
            return Err(TrainError::EmptyPool("target"));
        }
        check_pool(target, "target", DomainTag::Target, dims)?;
        self.ensure_domain_classifiers()?;
        let reads_before: usize = target.iter().map(Sample::target_label_reads).sum();
        let anchors: Vec<Anchor> = pyramid.all_anchors().concat();
        let cache = build_targets(source, &anchors, &self.cfg)?;
        let counts = (self.cfg.adapt_source, self.cfg.adapt_target);
        for _ in 0..steps {
            self.step_once(source, &cache, &pyramid, Some(target), counts)?;
        }
        let reads: usize = target.iter().map(Sample::target_label_reads).sum::<usize>() - reads_before;
        if reads > 0 {
            return Err(TrainError::TargetLabelsRead(reads));
        }
        Ok(())
    }

    fn step_once(
        &mut self,
        source: &[Sample],
        cache: &TargetCache,
        pyramid: &PyramidConfig,
        target: Option<&[Sample]>,
        counts: (usize, usize),
    ) -> Result<LossReport, TrainError> {
        let step = self.opt.step;
        let pools = (source.len(), target.map_or(0, <[Sample]>::len));
        let batch = make_batch(self.cfg.seed, step, pools, counts, self.cfg.flip)?;
        let mcfg = &self.model.config;
        let mut g = Graph::new();

        let xs = g.constant(batch_tensor(source, &batch.source)?)?;
        let out_s = forward(&mut g, &self.model.params, mcfg, xs, Mode::Train)?;
        let samples: Vec<&SampleTargets> = batch.source.iter().map(|d| cache.get(d)).collect();
        let targets = dense_targets::<f32>(&samples, pyramid, mcfg.num_classes, self.loss.alpha)?;
        let det = detection_loss(&mut g, &out_s.head.cls_logits, &out_s.head.box_reg, &targets, &self.loss)?;

        let mut report = LossReport::default();
        let mut stats = out_s.norm_stats.clone();
        let da = match target {
            Some(tp) => {
                let xt = g.constant(batch_tensor(tp, &batch.target)?)?;
                let out_t = forward(&mut g, &self.model.params, mcfg, xt, Mode::Train)?;
                stats.extend(out_t.norm_stats.iter().cloned());
                let t = domain_loss_terms(&mut g, &self.model.params, &self.loss, Some(self.cfg.grl_lambda), &out_s, &out_t)?;
                report.img = t.img.iter().map(|&v| scalar(&g, v)).collect();
                report.ins = t.ins.iter().map(|&v| scalar(&g, v)).collect();
                report.cons = t.cons.iter().map(|&v| scalar(&g, v)).collect();
                t.da
            }
            None => None,
        };
        let total = total_loss(&mut g, det.det, da, self.loss.lambda1)?;

        report.total = scalar(&g, total);
        report.det = scalar(&g, det.det);
        report.cls = scalar(&g, det.cls);
        report.boxes = scalar(&g, det.boxes);
        report.da = da.map_or(0.0, |v| scalar(&g, v));
        if !report.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }

        let grads = g.backward(total)?;
        let params = &mut self.model.params;
        params.load_grads(&grads);
        let norm = clip_grad_norm(params, self.cfg.clip_norm);
        self.grad_norms.push(norm);
        let da_mult = self.cfg.da_lr_mult;
        sgd_step_scaled(
            params,
            &mut self.opt,
            lr_at(step, &self.cfg),
            self.cfg.momentum,
            self.cfg.weight_decay,
            |name| if name.starts_with("da/") { da_mult } else { 1.0 },
        )?;
        for s in stats {
            for (suffix, batch_vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let id = params.id(&format!("{}/{suffix}", s.layer))?;
                let run = params.get_mut(id).value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch_vals.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        self.history.push((step, report.clone()));
        Ok(report)
    }

    /// Model parameters, momentum buffers and the step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.model.params);
        for (name, v) in &self.opt.momentum {
            let shape = self
                .model
                .params
                .value(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|_| vec![v.len()]);
            let t = Tensor::new(shape, v.clone()).expect("momentum matches parameter size");
            ck.push(format!("{MOMENTUM_PREFIX}{name}"), t);
        }
        ck.push(STEP_ENTRY, Tensor::scalar(self.opt.step as f32));
        ck
    }

    /// Restores a run from [`Trainer::checkpoint`] output or from a bare
    /// parameter checkpoint.
    pub fn from_checkpoint(
        model_cfg: &ModelConfig,
        ck: &Checkpoint,
        cfg: TrainConfig,
        loss: LossConfig,
    ) -> Result<Self, TrainError> {
        let mut model = init_model(model_cfg, cfg.seed)?;
        if let Some(w) = ck.get(&format!("{INS_PREFIX}/conv1/w")) {
            let width = w.shape()[0];
            let levels = model_cfg.widths.len();
            init_domain_classifiers(&mut model, width, levels, 0)?;
        }
        let mut missing: Vec<&str> = model
            .params
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| ck.get(n).is_none())
            .collect();
        if let Some(n) = missing.pop() {
            return Err(TrainError::Checkpoint(format!("missing parameter {n}")));
        }
        let unused = ck.load_into(&mut model.params)?;
        let mut opt = OptimizerState::default();
        for name in unused {
            if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
                let t = ck.get(&name).expect("listed by load_into");
                let expected = model
                    .params
                    .value(p)
                    .map_err(|_| TrainError::Checkpoint(format!("momentum for unknown parameter {p}")))?;
                if expected.shape() != t.shape() {
                    return Err(TrainError::Checkpoint(format!("momentum shape mismatch for {p}")));
                }
                opt.momentum.insert(p.to_string(), t.data().to_vec());
            } else if name == STEP_ENTRY {
                let v = ck.get(&name).expect("listed by load_into").item();
                if !(v >= 0.0 && v.fract() == 0.0) {
                    return Err(TrainError::Checkpoint(format!("bad step counter {v}")));
                }
                opt.step = v as usize;
            } else {
                return Err(TrainError::Checkpoint(format!("unknown entry {name}")));
            }
        }
        let mut t = Self::new(model, cfg, loss)?;
        t.opt = opt;
        Ok(t)
    }

    /// Writes the loss history as a tab-separated metrics log.
    pub fn write_metrics(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(self.metrics_log().as_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn metrics_log(&self) -> String {
        let levels = self.levels();
        let mut out = LossReport::header(levels);
        out.push('\n');
        for (step, r) in &self.history {
            out.push_str(&r.line(*step, levels));
            out.push('\n');
        }
        out
    }
}

/// Fraction of image-level domain classifier patches, over all levels and
/// both pools, that are on the correct side of 0.5.
pub fn domain_patch_accuracy(model: &DetectorModel, source: &[&Sample], target: &[&Sample]) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (pool, d) in [(source, DomainTag::Source), (target, DomainTag::Target)] {
        for s in pool {
            let draws = [Draw { index: 0, flip: false }];
            let x = batch_tensor(std::slice::from_ref(*s), &draws)?;
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let out = forward(&mut g, &model.params, &model.config, xv, Mode::Eval)?;
            let p = image_domain_forward(&mut g, &model.params, &out.pyramid.levels, None)?;
            for v in p {
                for &q in g.value(v).data() {
                    total += 1;
                    let says_target = q >= 0.5;
                    if says_target == (d == DomainTag::Target) {
                        correct += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Err(TrainError::EmptyPool("evaluation"));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests;
