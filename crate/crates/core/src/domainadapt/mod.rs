//! Adversarial domain classifiers: one per pyramid level on the FPN features
//! and a single shared one on the concatenated head features.

use crate::autodiff::{AutodiffError, Graph, ParamStore, Scalar, Var};
use crate::model::{DetectorModel, ModelError};

pub const IMG_PREFIX: &str = "da/img";
pub const INS_PREFIX: &str = "da/ins";

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{expected} image-level classifiers for {got} pyramid levels")]
    Levels { expected: usize, got: usize },
    #[error("level {level}: classification features {cls:?} and regression features {reg:?} differ in size")]
    FeatureMismatch {
        level: usize,
        cls: Vec<usize>,
        reg: Vec<usize>,
    },
}

/// Patchwise domain probabilities per pyramid level.
#[derive(Clone, Debug)]
pub struct DomainMaps {
    pub p_img: Vec<Var>,
    pub p_ins: Vec<Var>,
}

/// Adds fresh image-level classifiers for `levels` pyramid levels and the
/// instance-level classifier. The last 1x1 layer starts at zero so every
/// classifier initially outputs 0.5.
pub fn init_domain_classifiers(
    model: &mut DetectorModel,
    width: usize,
    levels: usize,
    seed: u64,
) -> Result<(), DomainError> {
    use rand::SeedableRng;
    let c = model.config.fpn_width;
    let mut init = crate::model::init::Init {
        store: &mut model.params,
        rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
    };
    let mut classifier = |prefix: &str, c_in: usize| -> Result<(), ModelError> {
        init.conv(&format!("{prefix}/conv1"), width, c_in, 3)?;
        init.conv(&format!("{prefix}/conv2"), width, width, 3)?;
        init.conv_std(&format!("{prefix}/out"), 1, width, 1, 0.0, 0.0)
    };
    for l in 1..=levels {
        classifier(&format!("{IMG_PREFIX}/{l}"), c)?;
    }
    classifier(INS_PREFIX, 2 * c)?;
    Ok(())
}

/// Drops every domain-classifier parameter from the store.
pub fn strip_domain_classifiers<S: Scalar>(store: &mut ParamStore<S>) {
    store.remove_prefix("da/");
}

fn conv<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, name: &str, x: Var) -> Result<Var, DomainError> {
    let w = g.param(store, &format!("{name}/w"))?;
    let b = g.param(store, &format!("{name}/b"))?;
    let k = g.shape(w)[2];
    Ok(g.conv2d(x, w, Some(b), 1, k / 2)?)
}

/// Classifier stack `3x3 conv, relu, 3x3 conv, relu, 1x1 conv, sigmoid`
/// applied to `x`, with an optional gradient reversal in front.
pub fn classify<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: Var,
    reversal: Option<f64>,
) -> Result<Var, DomainError> {
    let x = match reversal {
        Some(lambda) => g.grad_reverse(x, lambda)?,
        None => x,
    };
    let y = conv(g, store, &format!("{prefix}/conv1"), x)?;
    let y = g.relu(y)?;
    let y = conv(g, store, &format!("{prefix}/conv2"), y)?;
    let y = g.relu(y)?;
    let y = conv(g, store, &format!("{prefix}/out"), y)?;
    Ok(g.sigmoid(y)?)
}

fn image_levels<S: Scalar>(store: &ParamStore<S>) -> usize {
    (1..).take_while(|l| store.contains(&format!("{IMG_PREFIX}/{l}/out/w"))).count()
}

/// `p_img[l] = D_l(GRL(P_l))`, one unshared classifier per level.
pub fn image_domain_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    pyramid: &[Var],
    reversal: Option<f64>,
) -> Result<Vec<Var>, DomainError> {
    let expected = image_levels(store);
    if expected != pyramid.len() {
        return Err(DomainError::Levels {
            expected,
            got: pyramid.len(),
        });
    }
    pyramid
        .iter()
        .enumerate()
        .map(|(l, &p)| classify(g, store, &format!("{IMG_PREFIX}/{}", l + 1), p, reversal))
        .collect()
}

/// `p_ins[l] = D_ins(GRL(concat(cls_feat[l], reg_feat[l])))` with one
/// classifier shared across levels.
pub fn instance_domain_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cls_feat: &[Var],
    reg_feat: &[Var],
    reversal: Option<f64>,
) -> Result<Vec<Var>, DomainError> {
    if cls_feat.len() != reg_feat.len() {
        return Err(DomainError::Levels {
            expected: cls_feat.len(),
            got: reg_feat.len(),
        });
    }
    let mut out = Vec::with_capacity(cls_feat.len());
    for (l, (&c, &r)) in cls_feat.iter().zip(reg_feat).enumerate() {
        let (cs, rs) = (g.shape(c).to_vec(), g.shape(r).to_vec());
        if cs.len() != 4 || rs.len() != 4 || cs[0] != rs[0] || cs[2..] != rs[2..] {
            return Err(DomainError::FeatureMismatch {
                level: l + 1,
                cls: cs,
                reg: rs,
            });
        }
        let x = g.concat(&[c, r])?;
        out.push(classify(g, store, INS_PREFIX, x, reversal)?);
    }
    Ok(out)
}
