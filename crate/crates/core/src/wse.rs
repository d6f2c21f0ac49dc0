//! Shared BEV backbone and weather-specific experts.
//!
//! Each modality's pillar grid passes through the shared stack. An expert then
//! refines each modality separately, fuses them by channel concatenation, and
//! predicts a dense per-cell head map with [`HEAD_CHANNELS`] channels:
//! objectness logit, `dx`, `dy`, `dz` offset, `log l`, `log w`, `log h`,
//! `sin 2yaw`, `cos 2yaw`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::geometry::{iou_3d, Box3D};
use crate::nn::{binary_focal, join, sigmoid, smooth_l1_loss, Conv2d, Param, Parameterized, Relu, Rng, Tensor};
use crate::pointcloud::{pillarize, GridSpec, PILLAR_CHANNELS};
use crate::weathersim::{Frame, GROUND_Z};
use crate::{Error, Result};

pub const FEATURE_CHANNELS: usize = 32;
pub const FUSED_CHANNELS: usize = 2 * FEATURE_CHANNELS;
pub const HEAD_CHANNELS: usize = 9;

/// Objectness prior used to initialise the head bias.
const PRIOR: f64 = 0.01;

/// `3x3` convolutions, stride 1, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub convs: Vec<Conv2d>,
    relus: Vec<Relu>,
}

impl ConvStack {
    /// Layer `i` maps `widths[i] -> widths[i + 1]`.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let convs = widths
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 1, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_convs(convs))
    }

    pub fn from_convs(convs: Vec<Conv2d>) -> Self {
        let relus = vec![Relu::default(); convs.len()];
        Self { convs, relus }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let convs = widths
            .windows(2)
            .map(|w| {
                Conv2d::from_tensors(Tensor::zeros(&[w[1], w[0], 3, 3]), Tensor::zeros(&[w[1]]), 1, 1)
                    .expect("valid shapes")
            })
            .collect();
        Self::from_convs(convs)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for c in &self.convs {
            y = crate::nn::relu(&c.forward(&y)?);
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for (c, r) in self.convs.iter_mut().zip(&mut self.relus) {
            y = r.forward_train(&c.forward_train(&y)?);
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor, want_input_grad: bool) -> Result<Option<Tensor>> {
        let mut g = grad.clone();
        let n = self.convs.len();
        for i in (0..n).rev() {
            g = self.relus[i].backward(&g)?;
            match self.convs[i].backward(&g, i > 0 || want_input_grad)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

impl Parameterized for ConvStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Pillar grids for both modalities of a frame.
pub fn frame_inputs(frame: &Frame, grid: &GridSpec) -> (Tensor, Tensor) {
    (
        pillarize(&frame.lidar.points, grid).features,
        pillarize(&frame.radar.points, grid).features,
    )
}

/// One conv stack per modality, `4 -> 32 -> 32`.
#[derive(Clone, Debug)]
pub struct SharedBackbone {
    pub lidar: ConvStack,
    pub radar: ConvStack,
}

const SHARED_WIDTHS: [usize; 3] = [PILLAR_CHANNELS, FEATURE_CHANNELS, FEATURE_CHANNELS];

impl SharedBackbone {
    pub fn new(rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            lidar: ConvStack::new(&SHARED_WIDTHS, rng)?,
            radar: ConvStack::new(&SHARED_WIDTHS, rng)?,
        })
    }

    pub fn zeros() -> Self {
        Self {
            lidar: ConvStack::zeros(&SHARED_WIDTHS),
            radar: ConvStack::zeros(&SHARED_WIDTHS),
        }
    }

    fn check(lidar: &Tensor, radar: &Tensor) -> Result<()> {
        if lidar.shape().len() != 3 || lidar.shape() != radar.shape() {
            return Err(Error::shape(
                "SharedBackbone",
                format!("radar grid matching lidar {}", lidar.shape_string()),
                radar.shape_string(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, lidar: &Tensor, radar: &Tensor) -> Result<(Tensor, Tensor)> {
        Self::check(lidar, radar)?;
        Ok((self.lidar.forward(lidar)?, self.radar.forward(radar)?))
    }

    pub fn forward_train(&mut self, lidar: &Tensor, radar: &Tensor) -> Result<(Tensor, Tensor)> {
        Self::check(lidar, radar)?;
        Ok((self.lidar.forward_train(lidar)?, self.radar.forward_train(radar)?))
    }

    /// Parameter gradients only; pillar grids are not differentiated.
    pub fn backward(&mut self, grad_lidar: &Tensor, grad_radar: &Tensor) -> Result<()> {
        self.lidar.backward(grad_lidar, false)?;
        self.radar.backward(grad_radar, false)?;
        Ok(())
    }

    /// Input gradients as well, for gradient checks.
    pub fn backward_with_inputs(&mut self, grad_lidar: &Tensor, grad_radar: &Tensor) -> Result<(Tensor, Tensor)> {
        let gl = self.lidar.backward(grad_lidar, true)?.expect("requested");
        let gr = self.radar.backward(grad_radar, true)?.expect("requested");
        Ok((gl, gr))
    }
}

impl Parameterized for SharedBackbone {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.lidar.visit_params(&join(prefix, "lidar"), f);
        self.radar.visit_params(&join(prefix, "radar"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.lidar.visit_params_mut(&join(prefix, "lidar"), f);
        self.radar.visit_params_mut(&join(prefix, "radar"), f);
    }
}

/// Weather-specific expert: per-modality refinement, fusion, dense head.
#[derive(Clone, Debug)]
pub struct Expert {
    pub lidar: ConvStack,
    pub radar: ConvStack,
    pub fusion: ConvStack,
    pub head: Conv2d,
}

const BRANCH_WIDTHS: [usize; 3] = [FEATURE_CHANNELS; 3];
const FUSION_WIDTHS: [usize; 3] = [FUSED_CHANNELS; 3];

impl Expert {
    pub fn new(rng: &mut Rng) -> Result<Self> {
        let lidar = ConvStack::new(&BRANCH_WIDTHS, rng)?;
        let radar = ConvStack::new(&BRANCH_WIDTHS, rng)?;
        let fusion = ConvStack::new(&FUSION_WIDTHS, rng)?;
        let mut head = Conv2d::new(FUSED_CHANNELS, HEAD_CHANNELS, 1, 1, 0, rng)?;
        for w in head.weight.value.data_mut() {
            *w *= 0.1;
        }
        let b = head.bias.value.data_mut();
        b[0] = -((1.0 - PRIOR) / PRIOR).ln() as f32;
        // typical car extents
        b[4] = 4.3f32.ln();
        b[5] = 1.8f32.ln();
        b[6] = 1.6f32.ln();
        Ok(Self {
            lidar,
            radar,
            fusion,
            head,
        })
    }

    pub fn zeros() -> Self {
        Self {
            lidar: ConvStack::zeros(&BRANCH_WIDTHS),
            radar: ConvStack::zeros(&BRANCH_WIDTHS),
            fusion: ConvStack::zeros(&FUSION_WIDTHS),
            head: Conv2d::from_tensors(
                Tensor::zeros(&[HEAD_CHANNELS, FUSED_CHANNELS, 1, 1]),
                Tensor::zeros(&[HEAD_CHANNELS]),
                1,
                0,
            )
            .expect("valid shapes"),
        }
    }

    /// `H(F(E(f_l, f_r)))`.
    pub fn forward(&self, f_lidar: &Tensor, f_radar: &Tensor) -> Result<Tensor> {
        let l = self.lidar.forward(f_lidar)?;
        let r = self.radar.forward(f_radar)?;
        let fused = self.fusion.forward(&Tensor::concat_channels(&[&l, &r])?)?;
        self.head.forward(&fused)
    }

    pub fn forward_train(&mut self, f_lidar: &Tensor, f_radar: &Tensor) -> Result<Tensor> {
        let l = self.lidar.forward_train(f_lidar)?;
        let r = self.radar.forward_train(f_radar)?;
        let fused = self.fusion.forward_train(&Tensor::concat_channels(&[&l, &r])?)?;
        self.head.forward_train(&fused)
    }

    /// Accumulates parameter gradients; returns feature gradients when asked.
    pub fn backward(&mut self, grad_map: &Tensor, want_input_grad: bool) -> Result<Option<(Tensor, Tensor)>> {
        let g = self.head.backward(grad_map, true)?.expect("requested");
        let g = self.fusion.backward(&g, true)?.expect("requested");
        let parts = g.split_channels(&[FEATURE_CHANNELS, FEATURE_CHANNELS])?;
        let gl = self.lidar.backward(&parts[0], want_input_grad)?;
        let gr = self.radar.backward(&parts[1], want_input_grad)?;
        Ok(gl.zip(gr))
    }
}

impl Parameterized for Expert {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.lidar.visit_params(&join(prefix, "lidar"), f);
        self.radar.visit_params(&join(prefix, "radar"), f);
        self.fusion.visit_params(&join(prefix, "fusion"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.lidar.visit_params_mut(&join(prefix, "lidar"), f);
        self.radar.visit_params_mut(&join(prefix, "radar"), f);
        self.fusion.visit_params_mut(&join(prefix, "fusion"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

/// A scored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Boxes from one expert (or from fusion), with the routing weight behind them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub expert: Option<usize>,
    pub weight: f64,
}

/// Yaw folded into `(-pi/2, pi/2]`; the box is the same geometric object.
pub fn canonical_yaw(yaw: f64) -> f64 {
    let mut y = yaw % PI;
    if y > FRAC_PI_2 {
        y -= PI;
    } else if y <= -FRAC_PI_2 {
        y += PI;
    }
    y
}

/// The 8 regression targets of `b` relative to the center of cell `(row, col)`.
pub fn encode_box(b: &Box3D, grid: &GridSpec, row: usize, col: usize) -> [f32; 8] {
    let (cx, cy) = grid.cell_center(row, col);
    let yaw = canonical_yaw(b.yaw);
    [
        (b.x - cx) as f32,
        (b.y - cy) as f32,
        (b.z - GROUND_Z) as f32,
        b.dx.ln() as f32,
        b.dy.ln() as f32,
        b.dz.ln() as f32,
        (2.0 * yaw).sin() as f32,
        (2.0 * yaw).cos() as f32,
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_cell(reg: &[f32; 8], grid: &GridSpec, row: usize, col: usize) -> Box3D {
    let (cx, cy) = grid.cell_center(row, col);
    let size = |v: f32| (v as f64).clamp(-4.0, 4.0).exp();
    let (s, c) = (reg[6] as f64, reg[7] as f64);
    let yaw = if s == 0.0 && c == 0.0 { 0.0 } else { 0.5 * s.atan2(c) };
    Box3D::new(
        [cx + reg[0] as f64, cy + reg[1] as f64, GROUND_Z + reg[2] as f64],
        [size(reg[3]), size(reg[4]), size(reg[5])],
        yaw,
    )
    .expect("finite positive box")
}

/// Cells whose objectness score reaches `threshold`, as boxes.
pub fn decode(map: &Tensor, threshold: f64, grid: &GridSpec) -> Result<Vec<Detection>> {
    let (c, h, w) = map.chw()?;
    if c != HEAD_CHANNELS || h != grid.height() || w != grid.width() {
        return Err(Error::shape(
            "decode",
            format!("[{HEAD_CHANNELS}x{}x{}]", grid.height(), grid.width()),
            map.shape_string(),
        ));
    }
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let score = sigmoid(map.get3(0, row, col)) as f64;
            if score < threshold {
                continue;
            }
            let mut reg = [0.0f32; 8];
            for (k, r) in reg.iter_mut().enumerate() {
                *r = map.get3(k + 1, row, col);
            }
            if reg.iter().any(|v| !v.is_finite()) {
                continue;
            }
            out.push(Detection {
                bbox: decode_cell(&reg, grid, row, col),
                score,
            });
        }
    }
    Ok(out)
}

/// Dense training target: objectness mask plus regression targets at positive cells.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTarget {
    pub positive: Vec<bool>,
    pub regression: Vec<[f32; 8]>,
}

impl HeadTarget {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// One positive cell per box center inside the grid; the first box claims a shared cell.
pub fn encode_targets(gt: &[Box3D], grid: &GridSpec) -> HeadTarget {
    let n = grid.height() * grid.width();
    let mut positive = vec![false; n];
    let mut regression = vec![[0.0f32; 8]; n];
    for b in gt {
        if let Some((row, col)) = grid.cell_of(b.x, b.y) {
            let i = row * grid.width() + col;
            if !positive[i] {
                positive[i] = true;
                regression[i] = encode_box(b, grid, row, col);
            }
        }
    }
    HeadTarget { positive, regression }
}

/// Focal / smooth-L1 settings of the detection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub smooth_l1_beta: f64,
    pub regression_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            smooth_l1_beta: 0.1,
            regression_weight: 1.0,
        }
    }
}

/// Focal objectness over all cells plus smooth-L1 regression at positive
/// cells, divided by `max(1, #positives)`. Returns the loss and `dL/dmap`.
pub fn detection_loss(map: &Tensor, gt: &[Box3D], grid: &GridSpec, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    let (c, h, w) = map.chw()?;
    if c != HEAD_CHANNELS || h != grid.height() || w != grid.width() {
        return Err(Error::shape(
            "detection_loss",
            format!("[{HEAD_CHANNELS}x{}x{}]", grid.height(), grid.width()),
            map.shape_string(),
        ));
    }
    let target = encode_targets(gt, grid);
    let norm = target.num_positive().max(1) as f64;
    let plane = h * w;
    let data = map.data();
    let mut grad = vec![0.0f32; map.len()];
    let mut total = 0.0;
    for i in 0..plane {
        let (l, g) = binary_focal(data[i], target.positive[i], cfg.alpha, cfg.gamma);
        total += l;
        grad[i] = (g / norm) as f32;
        if target.positive[i] {
            let pred: Vec<f32> = (0..8).map(|k| data[(k + 1) * plane + i]).collect();
            let (rl, rg) = smooth_l1_loss(&pred, &target.regression[i], cfg.smooth_l1_beta);
            total += cfg.regression_weight * rl;
            for (k, g) in rg.iter().enumerate() {
                grad[(k + 1) * plane + i] = (cfg.regression_weight * *g as f64 / norm) as f32;
            }
        }
    }
    Ok((total / norm, Tensor::from_vec(map.shape(), grad)?))
}

/// Greedy non-maximum suppression by descending score (ties keep input order);
/// drops any box whose 3D IoU with a kept box exceeds `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou_3d(&k.bbox, &dets[i].bbox) <= threshold) {
            kept.push(dets[i]);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{architecture_signature, Checkpoint};
    use crate::pointcloud::BevExtent;

    fn grid() -> GridSpec {
        GridSpec::new(BevExtent::new(0.0, 32.0, -16.0, 16.0).unwrap(), 2.0).unwrap()
    }

    fn features(seed: u64) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        (
            Tensor::uniform(&[32, 6, 6], 0.0, 1.0, &mut rng),
            Tensor::uniform(&[32, 6, 6], 0.0, 1.0, &mut rng),
        )
    }

    #[test]
    fn zero_shared_gives_zero_features() {
        let s = SharedBackbone::zeros();
        let (l, r) = s.forward(&Tensor::zeros(&[4, 16, 16]), &Tensor::zeros(&[4, 16, 16])).unwrap();
        assert!(l.data().iter().chain(r.data()).all(|&v| v == 0.0));
        assert!(s.forward(&Tensor::zeros(&[4, 16, 16]), &Tensor::zeros(&[4, 8, 16])).is_err());
    }

    #[test]
    fn shared_positively_homogeneous_without_bias() {
        let mut rng = Rng::new(3);
        let s = SharedBackbone::new(&mut rng).unwrap();
        let l = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
        let r = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
        let (a, b) = s.forward(&l, &r).unwrap();
        let (a2, b2) = s.forward(&l.scaled(2.5), &r.scaled(2.5)).unwrap();
        assert!(a.scaled(2.5).max_abs_diff(&a2) < 1e-5);
        assert!(b.scaled(2.5).max_abs_diff(&b2) < 1e-5);
    }

    #[test]
    fn zero_expert_scores_half() {
        let e = Expert::zeros();
        let (l, r) = features(1);
        let map = e.forward(&l, &r).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert!((sigmoid(map.get3(0, 2, 2)) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn copied_experts_agree_and_modalities_differ() {
        let mut rng = Rng::new(4);
        let a = Expert::new(&mut rng).unwrap();
        let b = a.clone();
        let (l, r) = features(2);
        assert_eq!(a.forward(&l, &r).unwrap(), b.forward(&l, &r).unwrap());
        assert!(a.forward(&l, &r).unwrap().max_abs_diff(&a.forward(&r, &l).unwrap()) > 1e-4);
        let c = Expert::new(&mut rng).unwrap();
        assert_eq!(architecture_signature(&a), architecture_signature(&c));
    }

    #[test]
    fn train_forward_matches_inference() {
        let mut rng = Rng::new(5);
        let mut e = Expert::new(&mut rng).unwrap();
        let (l, r) = features(3);
        assert_eq!(e.forward(&l, &r).unwrap(), e.forward_train(&l, &r).unwrap());
    }

    #[test]
    fn decode_single_cell() {
        let g = grid();
        let mut map = Tensor::full(&[9, 16, 16], 0.0);
        for i in 0..256 {
            map.data_mut()[i] = -30.0;
        }
        let reg = [0.5f32, -0.25, 0.1, 4.0f32.ln(), 2.0f32.ln(), 1.5f32.ln(), 0.0, 1.0];
        map.set3(0, 3, 5, 10.0);
        for (k, v) in reg.iter().enumerate() {
            map.set3(k + 1, 3, 5, *v);
        }
        let dets = decode(&map, 0.5, &g).unwrap();
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert!((b.x - 11.5).abs() < 1e-6 && (b.y - (-9.25)).abs() < 1e-6);
        assert!((b.z - (GROUND_Z + 0.1)).abs() < 1e-6);
        assert!((b.dx - 4.0).abs() < 1e-5 && (b.dy - 2.0).abs() < 1e-5 && (b.dz - 1.5).abs() < 1e-5);
        assert!(b.yaw.abs() < 1e-9);
        map.set3(0, 3, 5, -30.0);
        assert!(decode(&map, 0.5, &g).unwrap().is_empty());
    }

    #[test]
    fn codec_round_trip() {
        let g = grid();
        let mut rng = Rng::new(6);
        for _ in 0..500 {
            let b = Box3D::new(
                [rng.uniform(0.0, 32.0), rng.uniform(-16.0, 16.0), rng.uniform(0.5, 1.2)],
                [rng.uniform(3.0, 5.0), rng.uniform(1.5, 2.2), rng.uniform(1.3, 1.9)],
                rng.uniform(-FRAC_PI_2 + 1e-3, FRAC_PI_2),
            )
            .unwrap();
            let (row, col) = g.cell_of(b.x, b.y).unwrap();
            let d = decode_cell(&encode_box(&b, &g, row, col), &g, row, col);
            for (x, y) in b.to_array().iter().zip(d.to_array()) {
                assert!((x - y).abs() < 1e-5, "{b:?} vs {d:?}");
            }
        }
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let g = grid();
        let gt = vec![
            Box3D::new([5.1, 3.3, 0.8], [4.2, 1.8, 1.6], 0.3).unwrap(),
            Box3D::new([20.7, -9.0, 0.9], [4.6, 1.9, 1.5], -1.0).unwrap(),
        ];
        let t = encode_targets(&gt, &g);
        let mut map = Tensor::zeros(&[9, 16, 16]);
        for i in 0..256 {
            map.data_mut()[i] = if t.positive[i] { 30.0 } else { -30.0 };
            for k in 0..8 {
                map.data_mut()[(k + 1) * 256 + i] = t.regression[i][k];
            }
        }
        let (loss, _) = detection_loss(&map, &gt, &g, &LossConfig::default()).unwrap();
        assert!(loss < 1e-3, "{loss}");
        let (neg, _) = detection_loss(&Tensor::zeros(&[9, 16, 16]), &[], &g, &LossConfig::default()).unwrap();
        assert!(neg > 0.0);
    }

    #[test]
    fn nms_keeps_best_of_overlaps() {
        let b = Box3D::new([5.0, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap();
        let shifted = Box3D::new([5.3, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap();
        let far = Box3D::new([20.0, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap();
        let dets = [
            Detection { bbox: b, score: 0.6 },
            Detection { bbox: shifted, score: 0.9 },
            Detection { bbox: far, score: 0.3 },
        ];
        let kept = nms(&dets, 0.1);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(nms(&kept, 0.1), kept);
    }

    #[test]
    fn expert_checkpoint_round_trip() {
        let mut rng = Rng::new(7);
        let e = Expert::new(&mut rng).unwrap();
        let mut ck = Checkpoint::new();
        ck.insert_module("expert_0", &e);
        let mut back = Expert::zeros();
        ck.load_module("expert_0", &mut back).unwrap();
        let (l, r) = features(8);
        assert_eq!(e.forward(&l, &r).unwrap(), back.forward(&l, &r).unwrap());
    }
}
