use super::{forward, DetectorModel, Mode, ModelError};
use crate::autodiff::{Graph, Tensor};
use crate::geometry::{decode_box, nms, BoxEncoding, Detection, PyramidConfig};
use crate::gridmap::GridMap;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub score_thr: f64,
    pub nms_thr: f64,
    pub max_dets: usize,
    /// Highest-scoring candidates kept before suppression.
    pub pre_nms: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.05,
            nms_thr: 0.3,
            max_dets: 100,
            pre_nms: 1000,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns per-level head outputs of one batch entry into scored boxes.
/// `cls[l]` is `N x (A K) x H_l x W_l` and `reg[l]` is `N x (A 6) x H_l x W_l`.
pub fn decode_detections(
    cls: &[&Tensor<f32>],
    reg: &[&Tensor<f32>],
    pyramid: &PyramidConfig,
    num_classes: usize,
    batch_index: usize,
    cfg: &PredictConfig,
) -> Result<Vec<Detection>, ModelError> {
    let a_n = pyramid.anchors_per_cell();
    let mut cands: Vec<(f64, usize, usize, usize, usize)> = Vec::new(); // score, level, cell, slot, class
    for (l, (c, r)) in cls.iter().zip(reg).enumerate() {
        let [n, ch, h, w] = c.dims4("decode")?;
        let (rows, cols) = pyramid.level_dims(l + 1)?;
        if (h, w) != (rows, cols) || ch != a_n * num_classes || batch_index >= n || r.shape()[1] != a_n * 6 {
            return Err(ModelError::Config(format!(
                "head output {:?} does not fit the anchor layout at P{}",
                c.shape(),
                l + 1
            )));
        }
        let plane = &c.data()[batch_index * ch * h * w..(batch_index + 1) * ch * h * w];
        for (idx, &logit) in plane.iter().enumerate() {
            let s = sigmoid(logit as f64);
            if s >= cfg.score_thr {
                let (chan, cell) = (idx / (h * w), idx % (h * w));
                cands.push((s, l, cell, chan / num_classes, chan % num_classes));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3, a.4).cmp(&(b.1, b.2, b.3, b.4))));
    cands.truncate(cfg.pre_nms);

    let mut level_anchors = vec![None; cls.len()];
    let mut dets = Vec::with_capacity(cands.len());
    for (score, l, cell, slot, class) in cands {
        let anchors = level_anchors[l].get_or_insert_with(|| pyramid.level_anchors(l + 1).expect("checked level"));
        let anchor = anchors[cell * a_n + slot];
        let r = reg[l];
        let hw = r.shape()[2] * r.shape()[3];
        let base = batch_index * a_n * 6 * hw;
        let mut t = [0.0; 6];
        for (j, v) in t.iter_mut().enumerate() {
            *v = r.data()[base + (slot * 6 + j) * hw + cell] as f64;
        }
        dets.push(Detection {
            bbox: decode_box(&BoxEncoding(t), &anchor),
            class_id: class,
            score,
        });
    }
    let mut kept = nms(&dets, cfg.nms_thr)?;
    kept.truncate(cfg.max_dets);
    Ok(kept)
}

/// Detections for each map of a batch, from a read-only model.
pub fn predict(
    model: &DetectorModel,
    maps: &[&GridMap],
    cfg: &PredictConfig,
) -> Result<Vec<Vec<Detection>>, ModelError> {
    let Some(first) = maps.first() else {
        return Ok(Vec::new());
    };
    let pyramid = PyramidConfig::standard(first.spec.cell_size, first.height, first.width);
    let mut data = Vec::with_capacity(maps.len() * first.data.len());
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(ModelError::Config("maps in a batch must share one size".into()));
        }
        data.extend_from_slice(&m.data);
    }
    let c = first.data.len() / (first.height * first.width);
    let x = Tensor::new(vec![maps.len(), c, first.height, first.width], data)?;
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let out = forward(&mut g, &model.params, &model.config, xv, Mode::Eval)?;
    let cls: Vec<&Tensor<f32>> = out.head.cls_logits.iter().map(|&v| g.value(v)).collect();
    let reg: Vec<&Tensor<f32>> = out.head.box_reg.iter().map(|&v| g.value(v)).collect();
    (0..maps.len())
        .map(|i| decode_detections(&cls, &reg, &pyramid, model.config.num_classes, i, cfg))
        .collect()
}
