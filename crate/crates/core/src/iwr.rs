//! Image-guided weather routing.
//!
//! A small depthwise-separable CNN classifies the camera image into one of the
//! seven weather classes; [`route`] turns its logits into a probability vector
//! and the top-K expert set. [`PfrGate`] is the point-cloud-feature baseline
//! router that sees only pooled BEV features.

use crate::nn::{
    cross_entropy_loss, global_average_pool, global_average_pool_backward, join, relu, scale_grads, sgd_step,
    softmax, zero_grads, Conv2d, DepthwiseSeparableBlock, InstanceNorm, Linear, Param, Parameterized, Relu, Rng,
    Tensor,
};
use crate::weathersim::{Frame, NUM_WEATHERS};
use crate::{Error, Result};

/// Default classifier input, `3 x 64 x 96`.
pub const IMAGE_SHAPE: [usize; 3] = [3, 64, 96];

const STEM_WIDTH: usize = 16;
const BLOCK_WIDTHS: [usize; 5] = [16, 24, 32, 48, 64];

/// Stem conv, four stride-2 depthwise-separable blocks, global average pool,
/// linear head over the weather classes.
#[derive(Clone)]
pub struct WeatherClassifier {
    pub stem: Conv2d,
    pub stem_norm: InstanceNorm,
    pub blocks: Vec<DepthwiseSeparableBlock>,
    pub head: Linear,
    pub input_shape: [usize; 3],
    stem_relu: Relu,
    pooled_hw: Option<(usize, usize)>,
}

impl WeatherClassifier {
    /// Random trunk, zero head.
    pub fn new(input_shape: [usize; 3], rng: &mut Rng) -> Result<Self> {
        let stem = Conv2d::new(input_shape[0], STEM_WIDTH, 3, 2, 1, rng)?;
        let blocks = BLOCK_WIDTHS
            .windows(2)
            .map(|w| DepthwiseSeparableBlock::new(w[0], w[1], 2, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            stem_norm: InstanceNorm::new(STEM_WIDTH),
            blocks,
            head: Linear::zeros(BLOCK_WIDTHS[4], NUM_WEATHERS),
            input_shape,
            stem_relu: Relu::default(),
            pooled_hw: None,
        })
    }

    fn check(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(Error::shape(
                "WeatherClassifier",
                format!("{:?}", self.input_shape),
                image.shape_string(),
            ));
        }
        Ok(())
    }

    /// Stem plus the first `blocks` blocks; the camera branch reuses this trunk.
    pub fn trunk(&self, image: &Tensor, blocks: usize) -> Result<Tensor> {
        self.check(image)?;
        let mut y = relu(&self.stem_norm.forward(&self.stem.forward(image)?)?);
        for b in &self.blocks[..blocks.min(self.blocks.len())] {
            y = b.forward(&y)?;
        }
        Ok(y)
    }

    /// Weather logits. Pure: no internal state changes.
    pub fn classify(&self, image: &Tensor) -> Result<Tensor> {
        let y = self.trunk(image, self.blocks.len())?;
        self.head.forward(&global_average_pool(&y)?)
    }

    pub fn forward_train(&mut self, image: &Tensor) -> Result<Tensor> {
        self.check(image)?;
        let y = self.stem.forward_train(image)?;
        let y = self.stem_norm.forward_train(&y)?;
        let mut y = self.stem_relu.forward_train(&y);
        for b in &mut self.blocks {
            y = b.forward_train(&y)?;
        }
        let (_, h, w) = y.chw()?;
        self.pooled_hw = Some((h, w));
        self.head.forward_train(&global_average_pool(&y)?)
    }

    /// Parameter gradients for the last `forward_train`; returns the image gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let (h, w) = self.pooled_hw.take().ok_or(Error::MissingCache("WeatherClassifier"))?;
        let g = self.head.backward(grad_logits)?;
        let mut g = global_average_pool_backward(&g, h, w);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g, true)?.expect("requested");
        }
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem_norm.backward(&g)?;
        Ok(self.stem.backward(&g, true)?.expect("requested"))
    }
}

impl Parameterized for WeatherClassifier {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        self.stem_norm.visit_params(&join(prefix, "stem_norm"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        self.stem_norm.visit_params_mut(&join(prefix, "stem_norm"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

/// Routing probabilities and the selected experts, most probable first.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
}

impl RoutingDecision {
    /// Argmax class.
    pub fn top(&self) -> usize {
        self.selected[0]
    }

    /// Routing weight of expert `w` (zero if not selected).
    pub fn weight(&self, w: usize) -> f64 {
        if self.selected.contains(&w) {
            self.probs[w]
        } else {
            0.0
        }
    }

    /// Everything on class `w` with probability one.
    pub fn forced(w: usize) -> Result<Self> {
        if w >= NUM_WEATHERS {
            return Err(Error::InvalidArgument(format!("forced class {w} out of range")));
        }
        let mut probs = vec![0.0; NUM_WEATHERS];
        probs[w] = 1.0;
        Ok(Self { probs, selected: vec![w] })
    }
}

/// Indices of the `k` largest probabilities; ties go to the lower index.
pub fn select_top_k(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(Error::InvalidArgument(format!("K must be in [1, {}], got {k}", probs.len())));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Softmax over the logits, then top-K.
pub fn route(logits: &Tensor, k: usize) -> Result<RoutingDecision> {
    if logits.len() != NUM_WEATHERS {
        return Err(Error::shape("route", format!("[{NUM_WEATHERS}]"), logits.shape_string()));
    }
    let probs: Vec<f64> = crate::nn::softmax_f64(logits.data());
    let selected = select_top_k(&probs, k)?;
    Ok(RoutingDecision { probs, selected })
}

/// SGD settings shared by the small classifiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

/// Mean loss per epoch.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

fn batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Cross-entropy training on the frames' images and weather tags.
pub fn train_classifier(
    frames: &[Frame],
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<(WeatherClassifier, TrainLog)> {
    let first = frames.first().ok_or_else(|| Error::Empty("classifier training set".into()))?;
    let shape: [usize; 3] = first
        .image
        .shape()
        .try_into()
        .map_err(|_| Error::shape("train_classifier", "CxHxW image", first.image.shape_string()))?;
    let mut model = WeatherClassifier::new(shape, rng)?;
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in batches(frames.len(), cfg.batch_size, rng) {
            zero_grads(&mut model);
            for &i in &batch {
                let logits = model.forward_train(&frames[i].image)?;
                let (loss, grad) = cross_entropy_loss(&logits, frames[i].weather.index())?;
                total += loss;
                model.backward(&grad)?;
            }
            scale_grads(&mut model, 1.0 / batch.len() as f32);
            sgd_step(&mut model, cfg.lr, cfg.momentum);
        }
        log.epoch_loss.push(total / frames.len() as f64);
    }
    Ok((model, log))
}

/// Fraction of frames whose argmax class matches the weather tag.
pub fn classifier_accuracy(model: &WeatherClassifier, frames: &[Frame]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("accuracy over zero frames".into()));
    }
    let mut correct = 0;
    for f in frames {
        if route(&model.classify(&f.image)?, 1)?.top() == f.weather.index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / frames.len() as f64)
}

/// Point-cloud-feature router: pooled shared BEV features through one linear layer.
#[derive(Clone)]
pub struct PfrGate {
    pub linear: Linear,
}

impl PfrGate {
    pub fn zeros(features: usize) -> Self {
        Self {
            linear: Linear::zeros(features, NUM_WEATHERS),
        }
    }

    /// Concatenated channel means of the LiDAR and radar feature maps.
    pub fn pool(f_lidar: &Tensor, f_radar: &Tensor) -> Result<Tensor> {
        let a = global_average_pool(f_lidar)?;
        let b = global_average_pool(f_radar)?;
        let mut v = a.into_data();
        v.extend_from_slice(b.data());
        let n = v.len();
        Tensor::from_vec(&[n], v)
    }

    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        self.linear.forward(pooled)
    }

    pub fn route(&self, f_lidar: &Tensor, f_radar: &Tensor, k: usize) -> Result<RoutingDecision> {
        route(&self.logits(&Self::pool(f_lidar, f_radar)?)?, k)
    }
}

impl Parameterized for PfrGate {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.linear.visit_params(&join(prefix, "linear"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.linear.visit_params_mut(&join(prefix, "linear"), f);
    }
}

/// Free-function form of [`PfrGate::route`].
pub fn pfr_route(gate: &PfrGate, f_lidar: &Tensor, f_radar: &Tensor, k: usize) -> Result<RoutingDecision> {
    gate.route(f_lidar, f_radar, k)
}

/// Trains a zero-initialised gate on pooled feature vectors with weather labels.
pub fn train_pfr(
    pooled: &[(Tensor, usize)],
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<(PfrGate, TrainLog)> {
    let first = pooled.first().ok_or_else(|| Error::Empty("gate training set".into()))?;
    let mut gate = PfrGate::zeros(first.0.len());
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in batches(pooled.len(), cfg.batch_size, rng) {
            zero_grads(&mut gate);
            for &i in &batch {
                let (x, label) = &pooled[i];
                let logits = gate.linear.forward_train(x)?;
                let (loss, grad) = cross_entropy_loss(&logits, *label)?;
                total += loss;
                gate.linear.backward(&grad)?;
            }
            scale_grads(&mut gate, 1.0 / batch.len() as f32);
            sgd_step(&mut gate, cfg.lr, cfg.momentum);
        }
        log.epoch_loss.push(total / pooled.len() as f64);
    }
    Ok((gate, log))
}

/// Softmax probabilities of a logit vector (for reports).
pub fn probabilities(logits: &Tensor) -> Vec<f32> {
    softmax(logits).into_data()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{param_count, param_hash};
    use crate::weathersim::{generate_dataset, DatasetConfig, DatasetMode, WeatherClass};
    use proptest::prelude::*;

    fn classifier(seed: u64) -> WeatherClassifier {
        WeatherClassifier::new(IMAGE_SHAPE, &mut crate::nn::Rng::new(seed)).unwrap()
    }

    #[test]
    fn fresh_head_gives_zero_logits() {
        let c = classifier(1);
        let img = Tensor::uniform(&IMAGE_SHAPE, 0.0, 1.0, &mut crate::nn::Rng::new(2));
        let z = c.classify(&img).unwrap();
        assert_eq!(z.len(), 7);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.classify(&img).unwrap(), z);
        assert!(param_count(&c) < 100_000);
        assert!(c.classify(&Tensor::zeros(&[3, 32, 32])).is_err());
    }

    #[test]
    fn route_examples() {
        let z = Tensor::from_vec(&[7], vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let d = route(&z, 1).unwrap();
        assert_eq!(d.selected, vec![0]);
        assert!((d.probs[0] - 0.9611).abs() < 1e-3);
        let z = Tensor::from_vec(&[7], vec![0.1, 0.7, -0.2, 0.3, 0.9, 0.0, -1.0]).unwrap();
        assert_eq!(route(&z, 7).unwrap().selected, vec![4, 1, 3, 0, 5, 2, 6]);
        let u = Tensor::zeros(&[7]);
        assert_eq!(route(&u, 2).unwrap().selected, vec![0, 1]);
        assert!(route(&u, 0).is_err());
        assert!(route(&u, 8).is_err());
    }

    #[test]
    fn zero_gate_is_uniform() {
        let g = PfrGate::zeros(64);
        let d = g.route(&Tensor::zeros(&[32, 4, 4]), &Tensor::zeros(&[32, 4, 4]), 3).unwrap();
        assert!(d.probs.iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-12));
        assert_eq!(d.selected, vec![0, 1, 2]);
    }

    #[test]
    fn single_class_training_fits() {
        let cfg = DatasetConfig {
            mode: DatasetMode::Balanced { per_class: 4 },
            ..DatasetConfig::default()
        };
        let (_, frames) = generate_dataset(&cfg, 3).unwrap();
        let fog: Vec<Frame> = frames.into_iter().filter(|f| f.weather == WeatherClass::Fog).collect();
        let train = ClassifierConfig {
            epochs: 3,
            ..ClassifierConfig::default()
        };
        let (m, log) = train_classifier(&fog, &train, &mut crate::nn::Rng::new(1)).unwrap();
        assert_eq!(classifier_accuracy(&m, &fog).unwrap(), 1.0);
        assert!(log.epoch_loss.last().unwrap() <= &log.epoch_loss[0]);
        let (m2, _) = train_classifier(&fog, &train, &mut crate::nn::Rng::new(1)).unwrap();
        assert_eq!(param_hash(&m), param_hash(&m2));
        assert!(matches!(
            train_classifier(&[], &train, &mut crate::nn::Rng::new(1)),
            Err(Error::Empty(_))
        ));
    }

    proptest! {
        #[test]
        fn route_shift_invariant(z in proptest::collection::vec(-4i32..4, 7), shift in -20i32..20, k in 1usize..=7) {
            // integer logits keep the shifted values exact in f32
            let a = Tensor::from_vec(&[7], z.iter().map(|&v| v as f32).collect()).unwrap();
            let b = Tensor::from_vec(&[7], z.iter().map(|&v| (v + shift) as f32).collect()).unwrap();
            let ra = route(&a, k).unwrap();
            prop_assert_eq!(&ra.selected, &route(&b, k).unwrap().selected);
            prop_assert_eq!(ra.selected.len(), k);
            prop_assert!((ra.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let squashed: Vec<f64> = ra.probs.iter().map(|p| p.powi(3) + 2.0 * p).collect();
            prop_assert_eq!(select_top_k(&squashed, k).unwrap(), ra.selected);
        }
    }
}
