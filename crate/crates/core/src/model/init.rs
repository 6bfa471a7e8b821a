use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, NormKind};
use crate::autodiff::{ParamStore, Tensor};

/// Detector weights (stem, backbone, FPN and shared head) plus any domain
/// classifiers added for adaptation, all in one named store.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl DetectorModel {
    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// He-normal conv kernel `o x c x k x k` and a zero bias.
    pub fn conv(&mut self, name: &str, o: usize, c: usize, k: usize) -> Result<(), ModelError> {
        let std = (2.0 / (c * k * k) as f64).sqrt();
        self.conv_std(name, o, c, k, std, 0.0)
    }

    pub fn conv_std(&mut self, name: &str, o: usize, c: usize, k: usize, std: f64, bias: f64) -> Result<(), ModelError> {
        let w = if std == 0.0 {
            Tensor::zeros(&[o, c, k, k])
        } else {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(&[o, c, k, k], |_| dist.sample(&mut self.rng) as f32)
        };
        self.store.insert(format!("{name}/w"), w)?;
        self.store.insert(format!("{name}/b"), Tensor::full(&[o], bias as f32))?;
        Ok(())
    }

    pub fn depthwise(&mut self, name: &str, c: usize, k: usize) -> Result<(), ModelError> {
        let dist = Normal::new(0.0, (2.0 / (k * k) as f64).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[c, 1, k, k], |_| dist.sample(&mut self.rng) as f32);
        self.store.insert(format!("{name}/w"), w)?;
        self.store.insert(format!("{name}/b"), Tensor::zeros(&[c]))?;
        Ok(())
    }

    pub fn norm(&mut self, name: &str, kind: NormKind, c: usize) -> Result<(), ModelError> {
        if kind == NormKind::None {
            return Ok(());
        }
        self.store.insert(format!("{name}/gamma"), Tensor::full(&[c], 1.0))?;
        self.store.insert(format!("{name}/beta"), Tensor::zeros(&[c]))?;
        if kind == NormKind::Batch {
            self.store.insert_buffer(format!("{name}/running_mean"), Tensor::zeros(&[c]))?;
            self.store.insert_buffer(format!("{name}/running_var"), Tensor::full(&[c], 1.0))?;
        }
        Ok(())
    }
}

pub(crate) fn stage_stride(stage: usize) -> usize {
    if stage == 0 {
        1
    } else {
        2
    }
}

/// Builds a detector with deterministic weights for `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<DetectorModel, ModelError> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let cfg = config;
    let nk = cfg.norm;

    init.depthwise("stem/dw", cfg.in_channels, 3)?;
    init.conv("stem/pw", cfg.widths[0], cfg.in_channels, 1)?;
    init.norm("stem/norm", nk, cfg.widths[0])?;

    let mut c_in = cfg.widths[0];
    for (s, (&width, &blocks)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        for b in 0..blocks {
            let p = format!("backbone/s{s}/b{b}");
            let stride = if b == 0 { stage_stride(s) } else { 1 };
            init.conv(&format!("{p}/conv1"), width, c_in, 3)?;
            init.norm(&format!("{p}/norm1"), nk, width)?;
            init.conv(&format!("{p}/conv2"), width, width, 3)?;
            init.norm(&format!("{p}/norm2"), nk, width)?;
            if stride != 1 || c_in != width {
                init.conv(&format!("{p}/down"), width, c_in, 1)?;
                init.norm(&format!("{p}/down_norm"), nk, width)?;
            }
            c_in = width;
        }
    }

    for (l, &w) in cfg.widths.iter().enumerate() {
        init.conv(&format!("fpn/lat{}", l + 1), cfg.fpn_width, w, 1)?;
        init.conv(&format!("fpn/smooth{}", l + 1), cfg.fpn_width, cfg.fpn_width, 3)?;
    }

    let (a, k, c) = (cfg.anchors_per_cell, cfg.num_classes, cfg.fpn_width);
    for branch in ["cls", "reg"] {
        for i in 0..cfg.head_convs {
            init.conv(&format!("head/{branch}/{i}"), c, c, 3)?;
        }
    }
    let prior_bias = -((1.0 - cfg.prior) / cfg.prior).ln();
    init.conv_std("head/cls_out", a * k, c, 3, 0.01, prior_bias)?;
    init.conv_std("head/reg_out", a * 6, c, 3, 0.01, 0.0)?;

    Ok(DetectorModel {
        config: config.clone(),
        params: store,
    })
}
