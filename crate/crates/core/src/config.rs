//! Flat `key = value` run settings with namespaced keys.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{domain_name, parse_domain, DomainSpec, ScenePrior, SynthConfig};
use crate::eval::EvalConfig;
use crate::gridmap::GridSpec;
use crate::losses::{DomainTag, LossConfig};
use crate::model::{ModelConfig, NormKind, PredictConfig};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: expected `key = value`, got `{text}`")]
    Syntax { origin: String, line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {detail}")]
    BadValue { key: String, value: String, detail: String },
    #[error("invalid settings: {0}")]
    Invalid(String),
}

/// Which simulated sensor generates synthetic data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensorChoice {
    /// The sensor of `data.domain`.
    Auto,
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub n: usize,
    pub seed: u64,
    pub split: String,
    pub domain: DomainTag,
    pub sensor: SensorChoice,
    pub prior: ScenePrior,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            n: 500,
            seed: 0,
            split: "train".into(),
            domain: DomainTag::Source,
            sensor: SensorChoice::Auto,
            prior: ScenePrior::default(),
        }
    }
}

/// Everything a command may need. Defaults are the desk-scale setup.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub data: DataSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            grid: GridSpec::new(0.5, 32.0).expect("valid desk grid"),
            model: ModelConfig {
                // counts and transmission run far larger than the other channels
                input_scale: vec![0.05, 1.0, 1.0, 0.002, 1.0],
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
            data: DataSettings::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "grid.cell_size",
    "grid.extent",
    "model.widths",
    "model.blocks",
    "model.fpn_width",
    "model.head_convs",
    "model.norm",
    "model.groups",
    "model.input_scale",
    "model.prior",
    "loss.lambda1",
    "loss.lambda2",
    "loss.gamma",
    "loss.alpha",
    "loss.delta",
    "loss.literal_domain_loss",
    "loss.literal_grouping",
    "loss.use_img",
    "loss.use_ins",
    "loss.use_cons",
    "train.pretrain_steps",
    "train.adapt_steps",
    "train.lr1",
    "train.lr2",
    "train.lr_boundary",
    "train.momentum",
    "train.weight_decay",
    "train.clip_norm",
    "train.pretrain_batch",
    "train.adapt_source",
    "train.adapt_target",
    "train.seed",
    "train.flip",
    "train.fg_thr",
    "train.bg_thr",
    "train.da_width",
    "train.grl_lambda",
    "train.da_lr_mult",
    "predict.score_thr",
    "predict.nms_thr",
    "predict.max_dets",
    "predict.pre_nms",
    "eval.iou_car",
    "eval.iou_pedestrian",
    "eval.iou_cyclist",
    "eval.distance_thresholds",
    "eval.tp_distance",
    "data.n",
    "data.seed",
    "data.split",
    "data.domain",
    "data.sensor",
    "data.mean_counts",
    "data.clutter",
    "data.aligned",
];

fn bad(key: &str, value: &str, detail: impl Display) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        detail: detail.to_string(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.parse().map_err(|e| bad(key, v, e))
}

fn flag(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn fixed<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N], ConfigError>
where
    T::Err: Display,
{
    let items = list::<T>(key, v)?;
    items
        .try_into()
        .map_err(|items: Vec<T>| bad(key, v, format!("expected {N} values, got {}", items.len())))
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn show_opt<T: Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".into(), ToString::to_string)
}

impl Settings {
    /// Current value of `key` in the syntax `set` accepts.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let (m, l, t, p, e, d) = (&self.model, &self.loss, &self.train, &self.predict, &self.eval, &self.data);
        let iou = |c: usize| join(e.iou_thresholds.get(c).map_or(&[][..], Vec::as_slice));
        Ok(match key {
            "grid.cell_size" => self.grid.cell_size.to_string(),
            "grid.extent" => self.grid.extent.to_string(),
            "model.widths" => join(&m.widths),
            "model.blocks" => join(&m.blocks),
            "model.fpn_width" => m.fpn_width.to_string(),
            "model.head_convs" => m.head_convs.to_string(),
            "model.norm" => m.norm.to_string(),
            "model.groups" => m.groups.to_string(),
            "model.input_scale" => join(&m.input_scale),
            "model.prior" => m.prior.to_string(),
            "loss.lambda1" => l.lambda1.to_string(),
            "loss.lambda2" => l.lambda2.to_string(),
            "loss.gamma" => l.gamma.to_string(),
            "loss.alpha" => show_opt(&l.alpha),
            "loss.delta" => l.delta.to_string(),
            "loss.literal_domain_loss" => l.literal_domain_loss.to_string(),
            "loss.literal_grouping" => l.literal_grouping.to_string(),
            "loss.use_img" => l.use_img.to_string(),
            "loss.use_ins" => l.use_ins.to_string(),
            "loss.use_cons" => l.use_cons.to_string(),
            "train.pretrain_steps" => t.pretrain_steps.to_string(),
            "train.adapt_steps" => t.adapt_steps.to_string(),
            "train.lr1" => t.lr1.to_string(),
            "train.lr2" => t.lr2.to_string(),
            "train.lr_boundary" => show_opt(&t.lr_boundary),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.pretrain_batch" => t.pretrain_batch.to_string(),
            "train.adapt_source" => t.adapt_source.to_string(),
            "train.adapt_target" => t.adapt_target.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.flip" => t.flip.to_string(),
            "train.fg_thr" => t.fg_thr.to_string(),
            "train.bg_thr" => t.bg_thr.to_string(),
            "train.da_width" => t.da_width.to_string(),
            "train.grl_lambda" => t.grl_lambda.to_string(),
            "train.da_lr_mult" => t.da_lr_mult.to_string(),
            "predict.score_thr" => p.score_thr.to_string(),
            "predict.nms_thr" => p.nms_thr.to_string(),
            "predict.max_dets" => p.max_dets.to_string(),
            "predict.pre_nms" => p.pre_nms.to_string(),
            "eval.iou_car" => iou(0),
            "eval.iou_pedestrian" => iou(1),
            "eval.iou_cyclist" => iou(2),
            "eval.distance_thresholds" => join(&e.distance_thresholds),
            "eval.tp_distance" => e.tp_distance.to_string(),
            "data.n" => d.n.to_string(),
            "data.seed" => d.seed.to_string(),
            "data.split" => d.split.clone(),
            "data.domain" => domain_name(d.domain).into(),
            "data.sensor" => match d.sensor {
                SensorChoice::Auto => "auto",
                SensorChoice::Source => "source",
                SensorChoice::Target => "target",
            }
            .into(),
            "data.mean_counts" => join(&d.prior.mean_counts),
            "data.clutter" => d.prior.clutter.to_string(),
            "data.aligned" => d.prior.aligned.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        let (m, l, t, p, e, d) = (
            &mut self.model,
            &mut self.loss,
            &mut self.train,
            &mut self.predict,
            &mut self.eval,
            &mut self.data,
        );
        let mut iou = |c: usize| -> Result<(), ConfigError> {
            e.iou_thresholds.resize(3, Vec::new());
            e.iou_thresholds[c] = list(k, v)?;
            Ok(())
        };
        match key {
            "grid.cell_size" => self.grid = GridSpec::new(num(k, v)?, self.grid.extent).map_err(|x| bad(k, v, x))?,
            "grid.extent" => self.grid = GridSpec::new(self.grid.cell_size, num(k, v)?).map_err(|x| bad(k, v, x))?,
            "model.widths" => m.widths = fixed(k, v)?,
            "model.blocks" => m.blocks = fixed(k, v)?,
            "model.fpn_width" => m.fpn_width = num(k, v)?,
            "model.head_convs" => m.head_convs = num(k, v)?,
            "model.norm" => {
                m.norm = match v {
                    "group" => NormKind::Group,
                    "batch" => NormKind::Batch,
                    "none" => NormKind::None,
                    _ => return Err(bad(k, v, "expected group, batch or none")),
                }
            }
            "model.groups" => m.groups = num(k, v)?,
            "model.input_scale" => m.input_scale = list(k, v)?,
            "model.prior" => m.prior = num(k, v)?,
            "loss.lambda1" => l.lambda1 = num(k, v)?,
            "loss.lambda2" => l.lambda2 = num(k, v)?,
            "loss.gamma" => l.gamma = num(k, v)?,
            "loss.alpha" => l.alpha = optional(k, v)?,
            "loss.delta" => l.delta = num(k, v)?,
            "loss.literal_domain_loss" => l.literal_domain_loss = flag(k, v)?,
            "loss.literal_grouping" => l.literal_grouping = flag(k, v)?,
            "loss.use_img" => l.use_img = flag(k, v)?,
            "loss.use_ins" => l.use_ins = flag(k, v)?,
            "loss.use_cons" => l.use_cons = flag(k, v)?,
            "train.pretrain_steps" => t.pretrain_steps = num(k, v)?,
            "train.adapt_steps" => t.adapt_steps = num(k, v)?,
            "train.lr1" => t.lr1 = num(k, v)?,
            "train.lr2" => t.lr2 = num(k, v)?,
            "train.lr_boundary" => t.lr_boundary = optional(k, v)?,
            "train.momentum" => t.momentum = num(k, v)?,
            "train.weight_decay" => t.weight_decay = num(k, v)?,
            "train.clip_norm" => t.clip_norm = num(k, v)?,
            "train.pretrain_batch" => t.pretrain_batch = num(k, v)?,
            "train.adapt_source" => t.adapt_source = num(k, v)?,
            "train.adapt_target" => t.adapt_target = num(k, v)?,
            "train.seed" => t.seed = num(k, v)?,
            "train.flip" => t.flip = flag(k, v)?,
            "train.fg_thr" => t.fg_thr = num(k, v)?,
            "train.bg_thr" => t.bg_thr = num(k, v)?,
            "train.da_width" => t.da_width = num(k, v)?,
            "train.grl_lambda" => t.grl_lambda = num(k, v)?,
            "train.da_lr_mult" => t.da_lr_mult = num(k, v)?,
            "predict.score_thr" => p.score_thr = num(k, v)?,
            "predict.nms_thr" => p.nms_thr = num(k, v)?,
            "predict.max_dets" => p.max_dets = num(k, v)?,
            "predict.pre_nms" => p.pre_nms = num(k, v)?,
            "eval.iou_car" => iou(0)?,
            "eval.iou_pedestrian" => iou(1)?,
            "eval.iou_cyclist" => iou(2)?,
            "eval.distance_thresholds" => e.distance_thresholds = list(k, v)?,
            "eval.tp_distance" => e.tp_distance = num(k, v)?,
            "data.n" => d.n = num(k, v)?,
            "data.seed" => d.seed = num(k, v)?,
            "data.split" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(bad(k, v, "split names are single path components"));
                }
                d.split = v.into()
            }
            "data.domain" => d.domain = parse_domain(v).ok_or_else(|| bad(k, v, "expected source or target"))?,
            "data.sensor" => {
                d.sensor = match v {
                    "auto" => SensorChoice::Auto,
                    "source" => SensorChoice::Source,
                    "target" => SensorChoice::Target,
                    _ => return Err(bad(k, v, "expected auto, source or target")),
                }
            }
            "data.mean_counts" => d.prior.mean_counts = fixed(k, v)?,
            "data.clutter" => d.prior.clutter = num(k, v)?,
            "data.aligned" => d.prior.aligned = num(k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. `origin` names the
    /// source in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = parse_assignment(line).ok_or_else(|| ConfigError::Syntax {
                origin: origin.into(),
                line: i + 1,
                text: raw.trim().into(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, arg: &str) -> Result<(), ConfigError> {
        let (k, v) = parse_assignment(arg).ok_or_else(|| ConfigError::Syntax {
            origin: "--set".into(),
            line: 1,
            text: arg.into(),
        })?;
        self.set(k, v)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.loss.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        self.eval.validate().map_err(|e| inv(&e))?;
        self.grid.cells().map_err(|e| inv(&e))?;
        if self.model.input_scale.len() != self.model.in_channels {
            return Err(ConfigError::Invalid(format!(
                "model.input_scale needs {} values",
                self.model.in_channels
            )));
        }
        let p = &self.predict;
        if !((0.0..=1.0).contains(&p.score_thr) && (0.0..=1.0).contains(&p.nms_thr)) {
            return Err(ConfigError::Invalid("predict thresholds must lie in [0, 1]".into()));
        }
        self.sensor().validate().map_err(ConfigError::Invalid)
    }

    pub fn sensor(&self) -> DomainSpec {
        let target = match self.data.sensor {
            SensorChoice::Auto => self.data.domain == DomainTag::Target,
            SensorChoice::Source => false,
            SensorChoice::Target => true,
        };
        if target {
            DomainSpec::target()
        } else {
            DomainSpec::source()
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n: self.data.n,
            seed: self.data.seed,
            grid: self.grid,
            prior: self.data.prior.clone(),
            sensor: self.sensor(),
            domain: self.data.domain,
            split: self.data.split.clone(),
        }
    }

    /// Seeds both data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }
}

fn parse_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then_some((k, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let s = Settings::default();
        let mut r = Settings {
            model: ModelConfig {
                fpn_width: 1,
                ..ModelConfig::default()
            },
            ..Settings::default()
        };
        r.apply_text(&s.to_text(), "dump").unwrap();
        assert_eq!(r, s);
        assert_eq!(s.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut s = Settings::default();
        s.apply_text("# desk run\n\ntrain.lr1 = 0.01   # faster\nloss.alpha=none\n", "f").unwrap();
        s.apply_override("train.lr1=0.02").unwrap();
        assert_eq!(s.train.lr1, 0.02);
        assert_eq!(s.loss.alpha, None);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let mut s = Settings::default();
        assert!(matches!(s.apply_text("train.lr3 = 1", "f"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(s.apply_text("train.lr1", "f"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(s.set("model.widths", "1,2,3"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(s.set("train.flip", "maybe"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(s.set("data.domain", "other"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn validation_catches_inconsistent_settings() {
        assert!(Settings::default().validate().is_ok());
        let mut s = Settings::default();
        s.set("model.input_scale", "1,1").unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn sensor_follows_domain_unless_pinned() {
        let mut s = Settings::default();
        s.set("data.domain", "target").unwrap();
        assert_eq!(s.sensor().beams, 32);
        s.set("data.sensor", "source").unwrap();
        assert_eq!(s.sensor().beams, 64);
    }
}
