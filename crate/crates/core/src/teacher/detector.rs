use serde::{Deserialize, Serialize};

use crate::align::head::{Linear, Mlp};
use crate::align::queries::QueryBatch;
use crate::error::{Error, Result};
use crate::numerics::{streams, BBox, FeatureMap, Rng, RoiAlignConfig, RoiWeights};

/// Per-cell linear backbone followed by a linear classifier over ROI-pooled
/// backbone features. Output class `num_classes` is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub backbone: Linear,
    pub classifier: Linear,
    pub relu: bool,
    pub bins: usize,
}

/// Student/teacher parameters: detector plus the alignment heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub detector: ToyDetector,
    /// Maps reference prototypes (VFM space) into query space.
    pub head: Mlp,
    /// One `d' -> d` map per pyramid level, into VFM space.
    pub convs: Vec<Linear>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_channels: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub vfm_channels: usize,
    pub num_classes: usize,
    pub relu: bool,
    pub bins: usize,
}

pub const LEVELS: usize = 2;

impl Model {
    /// Dimensions recovered from the parameter shapes.
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_channels: self.detector.backbone.input,
            feature_dim: self.detector.backbone.output,
            hidden_dim: self.head.layers[0].output,
            vfm_channels: self.head.input_dim(),
            num_classes: self.detector.classifier.output - 1,
            relu: self.detector.relu,
            bins: self.detector.bins,
        }
    }

    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = Rng::new(seed, streams::INIT);
        let detector = ToyDetector {
            backbone: Linear::init(dims.input_channels, dims.feature_dim, &mut rng),
            classifier: Linear::init(dims.feature_dim, dims.num_classes + 1, &mut rng),
            relu: dims.relu,
            bins: dims.bins,
        };
        let head = Mlp::init(
            dims.vfm_channels,
            dims.hidden_dim,
            dims.feature_dim,
            &mut rng,
        );
        let convs = (0..LEVELS)
            .map(|_| Linear::init(dims.feature_dim, dims.vfm_channels, &mut rng))
            .collect();
        Self {
            detector,
            head,
            convs,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.input, l.output);
        Self {
            detector: ToyDetector {
                backbone: z(&self.detector.backbone),
                classifier: z(&self.detector.classifier),
                relu: self.detector.relu,
                bins: self.detector.bins,
            },
            head: self.head.zeros_like(),
            convs: self.convs.iter().map(z).collect(),
        }
    }

    /// Parameter buffers in a fixed order.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.detector.backbone.weight,
            &self.detector.backbone.bias,
            &self.detector.classifier.weight,
            &self.detector.classifier.bias,
        ];
        for l in self.head.layers.iter().chain(&self.convs) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.detector.backbone.weight,
            &mut self.detector.backbone.bias,
            &mut self.detector.classifier.weight,
            &mut self.detector.classifier.bias,
        ];
        for l in self.head.layers.iter_mut().chain(self.convs.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.buffers().concat()
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Model) -> bool {
        let (a, b) = (self.buffers(), other.buffers());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &Model, lr: f64) {
        for (p, g) in self.buffers_mut().into_iter().zip(grad.buffers()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }
}

/// Outputs of one detector pass over an image.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Backbone maps: native resolution, then 2×2 average-pooled.
    pub levels: [FeatureMap<f64>; LEVELS],
    pre_activation: Option<Vec<f64>>,
    rois: Vec<RoiWeights<f64>>,
    /// Indices of proposals that produced an output, in order.
    pub kept: Vec<usize>,
    /// Degenerate or off-map proposals.
    pub skipped: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    /// `C + 1` logits per kept proposal.
    pub logits: Vec<Vec<f64>>,
}

impl Forward {
    /// Query batch over the foreground logits of the given rows of `kept`.
    pub fn query_batch(&self, rows: &[usize], num_classes: usize) -> Result<QueryBatch> {
        QueryBatch::new(
            rows.iter().map(|&r| self.features[r].clone()).collect(),
            rows.iter()
                .map(|&r| self.logits[r][..num_classes].to_vec())
                .collect(),
        )
    }
}

/// Upstream gradients for [`backward`]; missing entries are zero.
#[derive(Clone, Debug, Default)]
pub struct ForwardGrads {
    pub logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub levels: Vec<Vec<f64>>,
}

/// 2×2 average pooling; odd edges average the cells available.
pub fn avg_pool2(map: &FeatureMap<f64>) -> FeatureMap<f64> {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut data = vec![0.0; ho * wo * c];
    for y in 0..ho {
        for x in 0..wo {
            let dst = &mut data[(y * wo + x) * c..(y * wo + x + 1) * c];
            let (ys, xs) = (2 * y..(2 * y + 2).min(h), 2 * x..(2 * x + 2).min(w));
            let n = (ys.len() * xs.len()) as f64;
            for sy in ys {
                for sx in xs.clone() {
                    for (d, v) in dst.iter_mut().zip(map.cell(sy, sx)) {
                        *d += v / n;
                    }
                }
            }
        }
    }
    FeatureMap::new(ho, wo, c, map.stride() * 2.0, data).expect("pooled map is valid")
}

fn avg_pool2_backward(h: usize, w: usize, c: usize, grad_pooled: &[f64], out: &mut [f64]) {
    let wo = w.div_ceil(2);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y / 2, x / 2);
            let ny = if 2 * py + 1 < h { 2 } else { 1 };
            let nx = if 2 * px + 1 < w { 2 } else { 1 };
            let n = (ny * nx) as f64;
            let src = &grad_pooled[(py * wo + px) * c..(py * wo + px + 1) * c];
            for (o, g) in out[(y * w + x) * c..(y * w + x + 1) * c]
                .iter_mut()
                .zip(src)
            {
                *o += g / n;
            }
        }
    }
}

pub fn forward(
    det: &ToyDetector,
    map: &FeatureMap<f64>,
    proposals: &[BBox<f64>],
) -> Result<Forward> {
    if map.channels() != det.backbone.input {
        return Err(Error::Domain(format!(
            "detector expects {} input channels, map has {}",
            det.backbone.input,
            map.channels()
        )));
    }
    let dp = det.backbone.output;
    let mut pre = Vec::with_capacity(map.num_cells() * dp);
    for cell in map.cells() {
        pre.extend(det.backbone.forward(cell));
    }
    let (data, pre_activation) = if det.relu {
        (pre.iter().map(|v| v.max(0.0)).collect(), Some(pre))
    } else {
        (pre, None)
    };
    let level0 = FeatureMap::new(map.height(), map.width(), dp, map.stride(), data)?;
    let level1 = avg_pool2(&level0);
    let cfg = RoiAlignConfig::with_bins(det.bins);
    let mut out = Forward {
        levels: [level0, level1],
        pre_activation,
        rois: Vec::new(),
        kept: Vec::new(),
        skipped: Vec::new(),
        features: Vec::new(),
        logits: Vec::new(),
    };
    for (i, b) in proposals.iter().enumerate() {
        match RoiWeights::for_map(&out.levels[0], b, cfg) {
            Ok(w) => {
                let q = w.pool(&out.levels[0]);
                out.logits.push(det.classifier.forward(&q));
                out.features.push(q);
                out.rois.push(w);
                out.kept.push(i);
            }
            Err(Error::DegenerateBox(_)) | Err(Error::Domain(_)) => out.skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Accumulates detector parameter gradients into `grad`.
pub fn backward(
    det: &ToyDetector,
    map: &FeatureMap<f64>,
    fwd: &Forward,
    up: &ForwardGrads,
    grad: &mut ToyDetector,
) {
    let dp = det.backbone.output;
    let (h, w) = (map.height(), map.width());
    let mut g_level0 = vec![0.0; h * w * dp];
    if let Some(g) = up.levels.first() {
        g_level0.copy_from_slice(g);
    }
    if let Some(g) = up.levels.get(1) {
        avg_pool2_backward(h, w, dp, g, &mut g_level0);
    }
    for (r, roi) in fwd.rois.iter().enumerate() {
        let mut g_q = up.features.get(r).cloned().unwrap_or_else(|| vec![0.0; dp]);
        if let Some(gl) = up.logits.get(r) {
            let back = det
                .classifier
                .backward(&fwd.features[r], gl, &mut grad.classifier);
            for (a, b) in g_q.iter_mut().zip(back) {
                *a += b;
            }
        }
        roi.scatter(&g_q, &mut g_level0, dp);
    }
    if let Some(pre) = &fwd.pre_activation {
        for (g, z) in g_level0.iter_mut().zip(pre) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
    }
    for (cell, g) in map.cells().zip(g_level0.chunks_exact(dp)) {
        det.backbone.backward(cell, g, &mut grad.backbone);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            input_channels: 4,
            feature_dim: 3,
            hidden_dim: 3,
            vfm_channels: 5,
            num_classes: 2,
            relu: false,
            bins: 7,
        }
    }

    #[test]
    fn dims_roundtrip() {
        assert_eq!(Model::init(&dims(), 3).dims(), dims());
    }

    #[test]
    fn zero_backbone_gives_classifier_bias() {
        let mut m = Model::init(&dims(), 1);
        m.detector.backbone = Linear::zeros(4, 3);
        let map = FeatureMap::from_fn(6, 6, 4, 2.0, |y, x, c| (y + x * c) as f64).unwrap();
        let props = [
            BBox::new(0.0, 0.0, 5.0, 6.0).unwrap(),
            BBox::new(3.0, 2.0, 12.0, 9.0).unwrap(),
        ];
        let f = forward(&m.detector, &map, &props).unwrap();
        for l in &f.logits {
            assert_eq!(l, &m.detector.classifier.bias);
        }
    }

    #[test]
    fn constant_map_gives_identical_queries() {
        let m = Model::init(&dims(), 2);
        let map = FeatureMap::new(5, 5, 4, 1.0, vec![0.25; 100]).unwrap();
        let props = [
            BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
            BBox::new(1.0, 1.5, 4.5, 5.0).unwrap(),
        ];
        let f = forward(&m.detector, &map, &props).unwrap();
        for (a, b) in f.features[0].iter().zip(&f.features[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_proposals_are_skipped() {
        let m = Model::init(&dims(), 3);
        let map = FeatureMap::new(4, 4, 4, 1.0, vec![1.0; 64]).unwrap();
        let props = [
            BBox::new(0.0, 0.0, 1e-5, 1e-5).unwrap(),
            BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
        ];
        let f = forward(&m.detector, &map, &props).unwrap();
        assert_eq!(f.kept, vec![1]);
        assert_eq!(f.skipped, vec![0]);
    }

    #[test]
    fn pooling_halves_grid() {
        let map = FeatureMap::from_fn(5, 4, 1, 1.0, |y, x, _| (y * 4 + x) as f64).unwrap();
        let p = avg_pool2(&map);
        assert_eq!((p.height(), p.width(), p.stride()), (3, 2, 2.0));
        assert_eq!(p.cell(0, 0), &[2.5]);
        assert_eq!(p.cell(2, 1), &[18.5]);
    }

    #[test]
    fn buffers_roundtrip() {
        let m = Model::init(&dims(), 4);
        let mut z = m.zeros_like();
        assert!(z.same_shape(&m));
        assert_eq!(z.num_params(), m.num_params());
        z.sgd_step(&m, -1.0);
        assert_eq!(z.flat(), m.flat());
    }
}
