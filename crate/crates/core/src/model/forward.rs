use super::init::stage_stride;
use super::{ModelConfig, ModelError, NormKind};
use crate::autodiff::{Graph, ParamStore, Scalar, Var};

const NORM_EPS: f64 = 1e-5;

/// Normalization layers behave differently in training (batch statistics)
/// and inference (running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct NormStats<S> {
    pub layer: String,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// P1..P4 at strides 2, 4, 8, 16.
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub cls_logits: Vec<Var>,
    pub box_reg: Vec<Var>,
    pub cls_feat: Vec<Var>,
    pub reg_feat: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    pub pyramid: FeaturePyramid,
    pub head: HeadOutputs,
    pub norm_stats: Vec<NormStats<S>>,
}

struct Ctx<'a, S: Scalar> {
    g: &'a mut Graph<S>,
    store: &'a ParamStore<S>,
    cfg: &'a ModelConfig,
    mode: Mode,
    stats: Vec<NormStats<S>>,
}

impl<S: Scalar> Ctx<'_, S> {
    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var, ModelError> {
        let w = self.g.param(self.store, &format!("{name}/w"))?;
        let b = self.g.param(self.store, &format!("{name}/b"))?;
        let k = self.g.shape(w)[2];
        Ok(self.g.conv2d(x, w, Some(b), stride, k / 2)?)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var, ModelError> {
        let c = self.g.shape(x)[1];
        match self.cfg.norm {
            NormKind::None => Ok(x),
            NormKind::Group => {
                let gamma = self.g.param(self.store, &format!("{name}/gamma"))?;
                let beta = self.g.param(self.store, &format!("{name}/beta"))?;
                Ok(self.g.group_norm(x, gamma, beta, self.cfg.norm_groups(c), NORM_EPS)?)
            }
            NormKind::Batch => {
                let gamma = self.g.param(self.store, &format!("{name}/gamma"))?;
                let beta = self.g.param(self.store, &format!("{name}/beta"))?;
                match self.mode {
                    Mode::Train => {
                        let (y, mean, var) = self.g.batch_norm(x, gamma, beta, NORM_EPS)?;
                        self.stats.push(NormStats {
                            layer: name.to_string(),
                            mean,
                            var,
                        });
                        Ok(y)
                    }
                    Mode::Eval => {
                        let mean = self.store.value(&format!("{name}/running_mean"))?.data();
                        let var = self.store.value(&format!("{name}/running_var"))?.data();
                        let gm = self.store.value(&format!("{name}/gamma"))?.data();
                        let bt = self.store.value(&format!("{name}/beta"))?.data();
                        let eps = S::of(NORM_EPS);
                        let scale: Vec<S> = (0..c).map(|i| gm[i] / (var[i] + eps).sqrt()).collect();
                        let shift = (0..c).map(|i| bt[i] - mean[i] * scale[i]).collect();
                        Ok(self.g.channel_affine(x, scale, shift)?)
                    }
                }
            }
        }
    }

    fn conv_norm_relu(&mut self, name: &str, norm: &str, x: Var, stride: usize) -> Result<Var, ModelError> {
        let y = self.conv(name, x, stride)?;
        let y = self.norm(norm, y)?;
        Ok(self.g.relu(y)?)
    }

    fn block(&mut self, p: &str, x: Var, stride: usize) -> Result<Var, ModelError> {
        let y = self.conv_norm_relu(&format!("{p}/conv1"), &format!("{p}/norm1"), x, stride)?;
        let y = self.conv(&format!("{p}/conv2"), y, 1)?;
        let y = self.norm(&format!("{p}/norm2"), y)?;
        let short = if self.store.contains(&format!("{p}/down/w")) {
            let s = self.conv(&format!("{p}/down"), x, stride)?;
            self.norm(&format!("{p}/down_norm"), s)?
        } else {
            x
        };
        let y = self.g.add(y, short)?;
        Ok(self.g.relu(y)?)
    }
}

/// Runs the detector on a batch `x` of raw grid maps (`N x C x H x W`).
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    x: Var,
    mode: Mode,
) -> Result<ForwardOutput<S>, ModelError> {
    let [_, c, h, w] = g.value(x).dims4("forward")?;
    if c != cfg.in_channels {
        return Err(ModelError::InputChannels {
            expected: cfg.in_channels,
            got: c,
        });
    }
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(ModelError::InputSize { h, w });
    }
    let mut cx = Ctx {
        g,
        store,
        cfg,
        mode,
        stats: Vec::new(),
    };
    let scale = cfg.input_scale.iter().map(|&s| S::of(s)).collect();
    let x = cx.g.channel_affine(x, scale, vec![S::zero(); c])?;

    // per-channel spatial filtering before any mixing of grid features
    let dw = cx.g.param(store, "stem/dw/w")?;
    let db = cx.g.param(store, "stem/dw/b")?;
    let x = cx.g.depthwise_conv2d(x, dw, Some(db), 2, 1)?;
    let mut x = cx.conv_norm_relu("stem/pw", "stem/norm", x, 1)?;

    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        for b in 0..cfg.blocks[s] {
            let stride = if b == 0 { stage_stride(s) } else { 1 };
            x = cx.block(&format!("backbone/s{s}/b{b}"), x, stride)?;
        }
        stages.push(x);
    }

    let mut laterals = Vec::with_capacity(4);
    for (l, &c) in stages.iter().enumerate() {
        laterals.push(cx.conv(&format!("fpn/lat{}", l + 1), c, 1)?);
    }
    let mut top = laterals[3];
    let mut merged = vec![top];
    for l in (0..3).rev() {
        let up = cx.g.upsample2x(top)?;
        top = cx.g.add(laterals[l], up)?;
        merged.push(top);
    }
    merged.reverse();
    let mut levels = Vec::with_capacity(4);
    for (l, &m) in merged.iter().enumerate() {
        levels.push(cx.conv(&format!("fpn/smooth{}", l + 1), m, 1)?);
    }

    let mut head = HeadOutputs {
        cls_logits: Vec::new(),
        box_reg: Vec::new(),
        cls_feat: Vec::new(),
        reg_feat: Vec::new(),
    };
    for &p in &levels {
        let (cl, br, cf, rf) = head_forward(cx.g, store, cfg, p)?;
        head.cls_logits.push(cl);
        head.box_reg.push(br);
        head.cls_feat.push(cf);
        head.reg_feat.push(rf);
    }
    let norm_stats = cx.stats;
    Ok(ForwardOutput {
        pyramid: FeaturePyramid { levels },
        head,
        norm_stats,
    })
}

/// Applies the shared head to one feature map, returning
/// `(cls_logits, box_reg, cls_feat, reg_feat)`.
pub fn head_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    p: Var,
) -> Result<(Var, Var, Var, Var), ModelError> {
    let mut cx = Ctx {
        g,
        store,
        cfg,
        mode: Mode::Eval,
        stats: Vec::new(),
    };
    let mut feats = [p, p];
    for (f, branch) in feats.iter_mut().zip(["cls", "reg"]) {
        for i in 0..cfg.head_convs {
            let y = cx.conv(&format!("head/{branch}/{i}"), *f, 1)?;
            *f = cx.g.relu(y)?;
        }
    }
    let cls = cx.conv("head/cls_out", feats[0], 1)?;
    let reg = cx.conv("head/reg_out", feats[1], 1)?;
    Ok((cls, reg, feats[0], feats[1]))
}
