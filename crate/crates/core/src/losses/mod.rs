//! Detection and domain-adaptation loss terms and their combination into the
//! training objective.

mod targets;

pub use targets::{
    dense_targets, sample_targets, DetTargets, DomainTag, LevelTargets, SampleTargets, BACKGROUND, IGNORE,
};

use crate::autodiff::{AutodiffError, Graph, Scalar, Tensor, Var};
use crate::geometry::GeometryError;

/// Probabilities are clamped into `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("focal loss over an empty anchor set")]
    NoAnchors,
    #[error("detection loss got a target-domain example")]
    TargetInDetection,
    #[error("domain loss needs at least one example")]
    EmptyBatch,
    #[error("{got} domain labels for a batch of {expected}")]
    Labels { expected: usize, got: usize },
    #[error("expected {expected} pyramid levels, got {got}")]
    Levels { expected: usize, got: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("targets: {0}")]
    Targets(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    /// Focal weight of positives; negatives get `1 - alpha`.
    pub alpha: Option<f64>,
    pub delta: f64,
    /// Use `(1 - d) (1 - log p)` for the target term of the domain loss,
    /// exactly as printed, instead of `(1 - d) log(1 - p)`.
    pub literal_domain_loss: bool,
    /// Let the consistency term pass through the gradient reversal together
    /// with the domain terms instead of being minimised by every parameter.
    pub literal_grouping: bool,
    pub use_img: bool,
    pub use_ins: bool,
    pub use_cons: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1.0,
            gamma: 2.0,
            alpha: Some(0.25),
            delta: 1.0,
            literal_domain_loss: false,
            literal_grouping: false,
            use_img: true,
            use_ins: true,
            use_cons: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.gamma >= 0.0) {
            return Err(LossError::Config("lambda1, lambda2 and gamma must be >= 0".into()));
        }
        if !(self.delta > 0.0) {
            return Err(LossError::Config(format!("smooth-L1 delta must be positive, got {}", self.delta)));
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(LossError::Config(format!("focal alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Sum over non-ignored anchors and classes of `-alpha_t (1 - p_t)^gamma log p_t`.
pub fn focal_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: &[Var],
    targets: &DetTargets<S>,
    gamma: f64,
) -> Result<Var, LossError> {
    if logits.len() != targets.levels.len() {
        return Err(LossError::Levels {
            expected: targets.levels.len(),
            got: logits.len(),
        });
    }
    if logits.iter().all(|&z| g.value(z).numel() == 0) {
        return Err(LossError::NoAnchors);
    }
    let mut total = None;
    for (&z, t) in logits.iter().zip(&targets.levels) {
        // p_t = sigmoid(z) for the target class, sigmoid(-z) otherwise
        let sign = g.constant(t.cls_target.map(|v| v + v - S::one()))?;
        let s = g.mul(z, sign)?;
        let pt = g.sigmoid(s)?;
        let pt = g.clamp(pt, S::of(P_EPS), S::of(1.0 - P_EPS))?;
        let logp = g.log(pt)?;
        let term = if gamma == 0.0 {
            logp
        } else {
            let q = g.affine(pt, -S::one(), S::one())?;
            let m = g.pow(q, S::of(gamma))?;
            g.mul(m, logp)?
        };
        let w = g.constant(t.cls_weight.map(|v| -v))?;
        let weighted = g.mul(term, w)?;
        let level = g.sum(weighted)?;
        total = Some(match total {
            None => level,
            Some(acc) => g.add(acc, level)?,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Sum over positive anchors and the six box coordinates of the smooth-L1
/// (Huber) penalty with transition point `delta`.
pub fn smooth_l1<S: Scalar>(
    g: &mut Graph<S>,
    box_reg: &[Var],
    targets: &DetTargets<S>,
    delta: f64,
) -> Result<Var, LossError> {
    if box_reg.len() != targets.levels.len() {
        return Err(LossError::Levels {
            expected: targets.levels.len(),
            got: box_reg.len(),
        });
    }
    let d = S::of(delta);
    let mut total = None;
    for (&r, t) in box_reg.iter().zip(&targets.levels) {
        let target = g.constant(t.box_target.clone())?;
        let diff = g.sub(r, target)?;
        let a = g.abs(diff)?;
        // 0.5 min(|x|, d)^2 / d + (|x| - min(|x|, d))
        let c = g.clamp(a, S::zero(), d)?;
        let sq = g.square(c)?;
        let quad = g.affine(sq, S::of(0.5 / delta), S::zero())?;
        let lin = g.sub(a, c)?;
        let hub = g.add(quad, lin)?;
        let mask = g.constant(t.box_mask.clone())?;
        let masked = g.mul(hub, mask)?;
        let level = g.sum(masked)?;
        total = Some(match total {
            None => level,
            Some(acc) => g.add(acc, level)?,
        });
    }
    total.ok_or(LossError::Levels { expected: 1, got: 0 })
}

/// Detection loss terms of a source-only batch.
#[derive(Clone, Copy, Debug)]
pub struct DetLoss {
    pub det: Var,
    pub cls: Var,
    pub boxes: Var,
}

/// `(L_cls + lambda2 L_box) / max(N_pos, 1)`.
pub fn detection_loss<S: Scalar>(
    g: &mut Graph<S>,
    cls_logits: &[Var],
    box_reg: &[Var],
    targets: &DetTargets<S>,
    cfg: &LossConfig,
) -> Result<DetLoss, LossError> {
    if targets.domains.contains(&DomainTag::Target) {
        return Err(LossError::TargetInDetection);
    }
    let cls = focal_loss(g, cls_logits, targets, cfg.gamma)?;
    let boxes = smooth_l1(g, box_reg, targets, cfg.delta)?;
    let norm = 1.0 / targets.num_pos.max(1) as f64;
    let weighted = g.affine(boxes, S::of(cfg.lambda2), S::zero())?;
    let sum = g.add(cls, weighted)?;
    let det = g.affine(sum, S::of(norm), S::zero())?;
    Ok(DetLoss { det, cls, boxes })
}

/// Patchwise binary cross-entropy of domain probabilities `p`
/// (`N x 1 x H x W`) against per-example labels `d`, averaged over
/// examples and patches.
pub fn domain_bce<S: Scalar>(g: &mut Graph<S>, p: Var, d: &[f64], literal: bool) -> Result<Var, LossError> {
    let shape = g.shape(p).to_vec();
    let n = *shape.first().ok_or(LossError::EmptyBatch)?;
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if d.len() != n {
        return Err(LossError::Labels { expected: n, got: d.len() });
    }
    let per = g.value(p).numel() / n;
    let dl = Tensor::from_fn(&shape, |i| S::of(d[i / per]));
    let pc = g.clamp(p, S::of(P_EPS), S::of(1.0 - P_EPS))?;
    let logp = g.log(pc)?;
    let neg = if literal {
        g.affine(logp, -S::one(), S::one())?
    } else {
        let q = g.affine(pc, -S::one(), S::one())?;
        g.log(q)?
    };
    let dv = g.constant(dl.clone())?;
    let inv = g.constant(dl.map(|v| S::one() - v))?;
    let a = g.mul(dv, logp)?;
    let b = g.mul(inv, neg)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    Ok(g.affine(m, -S::one(), S::zero())?)
}

/// Mean squared difference between image- and instance-level probabilities.
pub fn consistency_loss<S: Scalar>(g: &mut Graph<S>, p_img: Var, p_ins: Var) -> Result<Var, LossError> {
    let diff = g.sub(p_img, p_ins)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// `L_DA = (1/L) sum_l (L_img + L_ins + L_cons)` over the enabled terms.
/// Each slice holds one entry per level or is empty when the term is off.
pub fn da_loss<S: Scalar>(
    g: &mut Graph<S>,
    levels: usize,
    img: &[Var],
    ins: &[Var],
    cons: &[Var],
) -> Result<Option<Var>, LossError> {
    let mut acc: Option<Var> = None;
    for terms in [img, ins, cons] {
        if terms.is_empty() {
            continue;
        }
        if terms.len() != levels {
            return Err(LossError::Levels {
                expected: levels,
                got: terms.len(),
            });
        }
        for &t in terms {
            acc = Some(match acc {
                None => t,
                Some(a) => g.add(a, t)?,
            });
        }
    }
    acc.map(|a| g.affine(a, S::of(1.0 / levels as f64), S::zero()))
        .transpose()
        .map_err(Into::into)
}

/// `L_det + lambda1 L_DA`.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, det: Var, da: Option<Var>, lambda1: f64) -> Result<Var, LossError> {
    match da {
        None => Ok(det),
        Some(da) => {
            let w = g.affine(da, S::of(lambda1), S::zero())?;
            Ok(g.add(det, w)?)
        }
    }
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub det: f64,
    pub cls: f64,
    pub boxes: f64,
    pub img: Vec<f64>,
    pub ins: Vec<f64>,
    pub cons: Vec<f64>,
    pub da: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.det, self.cls, self.boxes, self.da]
            .iter()
            .chain(&self.img)
            .chain(&self.ins)
            .chain(&self.cons)
            .all(|v| v.is_finite())
    }

    pub fn header(levels: usize) -> String {
        let mut cols = vec!["step", "total", "L_det", "L_cls", "L_box", "L_DA"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        for kind in ["img", "ins", "cons"] {
            for l in 1..=levels {
                cols.push(format!("L_{kind}_{l}"));
            }
        }
        cols.join("\t")
    }

    /// One tab-separated metrics line. Missing per-level terms print as 0.
    pub fn line(&self, step: usize, levels: usize) -> String {
        let mut cols = vec![
            step.to_string(),
            fmt(self.total),
            fmt(self.det),
            fmt(self.cls),
            fmt(self.boxes),
            fmt(self.da),
        ];
        for terms in [&self.img, &self.ins, &self.cons] {
            for l in 0..levels {
                cols.push(fmt(terms.get(l).copied().unwrap_or(0.0)));
            }
        }
        cols.join("\t")
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}
