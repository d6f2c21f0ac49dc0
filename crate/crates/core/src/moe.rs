//! Mixture-of-experts orchestration and the staged training schedule.
//!
//! Stage 1 trains the shared backbone with one designated expert on all
//! weather, stage 2 trains the image weather classifier
//! ([`crate::iwr::train_classifier`]), stage 3 copies the designated expert
//! into every slot ([`init_moe`]), and stage 4 freezes the shared backbone and
//! trains only the experts each frame is routed to ([`train_stage4`]).

use std::collections::BTreeSet;

use crate::geometry::{iou_3d, weighted_box_mean};
use crate::iwr::{route, PfrGate, RoutingDecision, WeatherClassifier, IMAGE_SHAPE};
use crate::nn::{join, param_hash, scale_grads, sgd_step, zero_grads, Checkpoint, Param, Parameterized, Rng};
use crate::pointcloud::GridSpec;
use crate::udma::{apply_sync, wsgts_sample, AugmentationSpec, GtDatabase};
use crate::weathersim::{Frame, NUM_WEATHERS};
use crate::wse::{decode, detection_loss, frame_inputs, nms, Detection, DetectionSet, Expert, LossConfig, SharedBackbone};
use crate::{Error, Result};

/// How a model picks experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Image weather classifier.
    Iwr,
    /// Linear gate on pooled shared features.
    Pfr,
    /// Always class `w` with probability one.
    Forced(usize),
}

/// Shared backbone, seven experts and the router.
#[derive(Clone)]
pub struct MoEModel {
    pub shared: SharedBackbone,
    pub experts: Vec<Expert>,
    pub classifier: Option<WeatherClassifier>,
    pub gate: Option<PfrGate>,
    pub k: usize,
    pub mode: RoutingMode,
}

impl std::fmt::Debug for MoEModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MoEModel")
            .field("k", &self.k)
            .field("mode", &self.mode)
            .field("has_classifier", &self.classifier.is_some())
            .field("has_gate", &self.gate.is_some())
            .finish()
    }
}

impl MoEModel {
    /// Fresh model with independently initialised experts, forced to `designated`.
    pub fn new(designated: usize, rng: &mut Rng) -> Result<Self> {
        check_class(designated)?;
        let shared = SharedBackbone::new(rng)?;
        let experts = (0..NUM_WEATHERS).map(|_| Expert::new(rng)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shared,
            experts,
            classifier: None,
            gate: None,
            k: 1,
            mode: RoutingMode::Forced(designated),
        })
    }

    pub fn with_routing(mut self, mode: RoutingMode, k: usize) -> Result<Self> {
        if k == 0 || k > NUM_WEATHERS {
            return Err(Error::InvalidArgument(format!("K must be in [1, {NUM_WEATHERS}], got {k}")));
        }
        if let RoutingMode::Forced(w) = mode {
            check_class(w)?;
        }
        self.mode = mode;
        self.k = k;
        Ok(self)
    }

    /// Routing decision for one frame given its shared features.
    pub fn route(&self, frame: &Frame, f_lidar: &crate::nn::Tensor, f_radar: &crate::nn::Tensor) -> Result<RoutingDecision> {
        match self.mode {
            RoutingMode::Forced(w) => RoutingDecision::forced(w),
            RoutingMode::Iwr => {
                let c = self
                    .classifier
                    .as_ref()
                    .ok_or_else(|| Error::MissingComponent("classifier".into()))?;
                route(&c.classify(&frame.image)?, self.k)
            }
            RoutingMode::Pfr => {
                let g = self.gate.as_ref().ok_or_else(|| Error::MissingComponent("gate".into()))?;
                g.route(f_lidar, f_radar, self.k)
            }
        }
    }

    /// Serializes every present component.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_module("shared", &self.shared);
        for (w, e) in self.experts.iter().enumerate() {
            ck.insert_module(&format!("expert{w}"), e);
        }
        if let Some(c) = &self.classifier {
            ck.insert_module("classifier", c);
        }
        if let Some(g) = &self.gate {
            ck.insert_module("gate", g);
        }
        ck.meta.insert("k".into(), self.k.to_string());
        ck.meta.insert(
            "routing".into(),
            match self.mode {
                RoutingMode::Iwr => "iwr".into(),
                RoutingMode::Pfr => "pfr".into(),
                RoutingMode::Forced(w) => format!("forced:{w}"),
            },
        );
        ck
    }

    /// Rebuilds a model; components the routing mode needs must be present.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let require = |p: &str| {
            if ck.has_prefix(p) {
                Ok(())
            } else {
                Err(Error::MissingComponent(p.to_string()))
            }
        };
        require("shared")?;
        let mut shared = SharedBackbone::zeros();
        ck.load_module("shared", &mut shared)?;
        let mut experts = Vec::with_capacity(NUM_WEATHERS);
        for w in 0..NUM_WEATHERS {
            let name = format!("expert{w}");
            require(&name)?;
            let mut e = Expert::zeros();
            ck.load_module(&name, &mut e)?;
            experts.push(e);
        }
        let meta = |key: &str| {
            ck.meta
                .get(key)
                .ok_or_else(|| Error::MissingComponent(format!("meta.{key}")))
        };
        let k: usize = meta("k")?
            .parse()
            .map_err(|_| Error::Format("checkpoint meta k is not an integer".into()))?;
        let mode = match meta("routing")?.as_str() {
            "iwr" => RoutingMode::Iwr,
            "pfr" => RoutingMode::Pfr,
            other => match other.strip_prefix("forced:").and_then(|w| w.parse().ok()) {
                Some(w) => RoutingMode::Forced(w),
                None => return Err(Error::Format(format!("unknown routing mode {other:?}"))),
            },
        };
        let classifier = if ck.has_prefix("classifier") {
            let mut c = WeatherClassifier::new(IMAGE_SHAPE, &mut Rng::new(0))?;
            ck.load_module("classifier", &mut c)?;
            Some(c)
        } else if mode == RoutingMode::Iwr {
            return Err(Error::MissingComponent("classifier".into()));
        } else {
            None
        };
        let gate = if ck.has_prefix("gate") {
            let mut g = PfrGate::zeros(2 * crate::wse::FEATURE_CHANNELS);
            ck.load_module("gate", &mut g)?;
            Some(g)
        } else if mode == RoutingMode::Pfr {
            return Err(Error::MissingComponent("gate".into()));
        } else {
            None
        };
        Self {
            shared,
            experts,
            classifier,
            gate,
            k: 1,
            mode: RoutingMode::Forced(0),
        }
        .with_routing(mode, k)
    }

    /// Per-expert parameter hashes.
    pub fn expert_hashes(&self) -> Vec<String> {
        self.experts.iter().map(|e| param_hash(e)).collect()
    }
}

impl Parameterized for MoEModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.shared.visit_params(&join(prefix, "shared"), f);
        for (w, e) in self.experts.iter().enumerate() {
            e.visit_params(&join(prefix, &format!("expert{w}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.shared.visit_params_mut(&join(prefix, "shared"), f);
        for (w, e) in self.experts.iter_mut().enumerate() {
            e.visit_params_mut(&join(prefix, &format!("expert{w}")), f);
        }
    }
}

fn check_class(w: usize) -> Result<()> {
    if w >= NUM_WEATHERS {
        return Err(Error::InvalidArgument(format!("expert index {w} out of range")));
    }
    Ok(())
}

/// `sum over w in S of P_w * L_w`.
pub fn cw_loss(losses: &[(usize, f64)], decision: &RoutingDecision) -> Result<f64> {
    let mut total = 0.0;
    for &w in &decision.selected {
        let l = losses
            .iter()
            .find(|(e, _)| *e == w)
            .ok_or_else(|| Error::InvalidArgument(format!("no loss for selected expert {w}")))?
            .1;
        total += decision.probs[w] * l;
    }
    Ok(total)
}

/// Greedy score-ordered clustering at 3D IoU `tau`, weighted box fusion per
/// cluster, then NMS at `tau_nms`.
///
/// Singleton clusters pass through untouched, so one expert's NMS output (with
/// `tau_nms <= tau`) comes back bit-identical.
pub fn cw_postprocess(sets: &[DetectionSet], tau: f64, tau_nms: f64) -> Result<DetectionSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("match threshold must be in (0, 1), got {tau}")));
    }
    let mut pool: Vec<(Detection, f64)> = sets
        .iter()
        .flat_map(|s| s.detections.iter().map(move |d| (*d, s.weight)))
        .collect();
    pool.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
    let mut used = vec![false; pool.len()];
    let mut fused = Vec::new();
    for i in 0..pool.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let mut members = vec![i];
        for j in i + 1..pool.len() {
            if !used[j] && iou_3d(&pool[i].0.bbox, &pool[j].0.bbox) >= tau {
                used[j] = true;
                members.push(j);
            }
        }
        if members.len() == 1 {
            fused.push(pool[i].0);
            continue;
        }
        let weighted: Vec<_> = members.iter().map(|&m| (pool[m].0.bbox, pool[m].1)).collect();
        let bbox = weighted_box_mean(&weighted)?;
        let wsum: f64 = members.iter().map(|&m| pool[m].1).sum();
        let score = members.iter().map(|&m| pool[m].1 * pool[m].0.score).sum::<f64>() / wsum;
        fused.push(Detection { bbox, score });
    }
    fused.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(DetectionSet {
        detections: nms(&fused, tau_nms),
        expert: if sets.len() == 1 { sets[0].expert } else { None },
        weight: 1.0,
    })
}

/// Inference thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub k: usize,
    pub tau: f64,
    pub tau_nms: f64,
    pub score_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: 1,
            tau: 0.3,
            tau_nms: 0.1,
            score_threshold: 0.05,
        }
    }
}

/// One expert's decoded, NMS-filtered detections for a frame.
pub fn expert_detections(
    expert: &Expert,
    f_lidar: &crate::nn::Tensor,
    f_radar: &crate::nn::Tensor,
    grid: &GridSpec,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let map = expert.forward(f_lidar, f_radar)?;
    Ok(nms(&decode(&map, cfg.score_threshold, grid)?, cfg.tau_nms))
}

/// Route, run the selected experts, fuse.
pub fn infer(model: &MoEModel, frame: &Frame, grid: &GridSpec, cfg: &InferenceConfig) -> Result<(DetectionSet, RoutingDecision)> {
    let (l, r) = frame_inputs(frame, grid);
    let (fl, fr) = model.shared.forward(&l, &r)?;
    let decision = model.route(frame, &fl, &fr)?;
    let mut sets = Vec::with_capacity(decision.selected.len());
    for &w in &decision.selected {
        sets.push(DetectionSet {
            detections: expert_detections(&model.experts[w], &fl, &fr, grid, cfg)?,
            expert: Some(w),
            weight: decision.probs[w],
        });
    }
    Ok((cw_postprocess(&sets, cfg.tau, cfg.tau_nms)?, decision))
}

/// Settings of one detector training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Cosine-anneal the learning rate to zero over the stage.
    pub cosine: bool,
    /// Sync augmentation plus same-weather ground-truth sampling.
    pub augment: bool,
    pub max_insert: usize,
    /// Hash audit every this many optimizer steps (stage 4 only); 0 disables.
    pub audit_every: usize,
    pub loss: LossConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            cosine: false,
            augment: true,
            max_insert: 3,
            audit_every: 10,
            loss: LossConfig::default(),
        }
    }
}

impl StageConfig {
    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let t = step as f64 / total as f64;
        (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }
}

/// Per-epoch mean loss plus audit counters.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct StageLog {
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub audits: usize,
    pub audit_failures: Vec<String>,
}

fn training_view(frame: &Frame, db: &GtDatabase, cfg: &StageConfig, rng: &mut Rng) -> Frame {
    if !cfg.augment {
        return frame.clone();
    }
    let (pasted, _) = wsgts_sample(frame, db, cfg.max_insert, rng);
    apply_sync(&pasted, &AugmentationSpec::sample(rng))
}

/// Stage 1: shared backbone plus the designated expert on all weather.
pub fn train_stage1(
    frames: &[Frame],
    db: &GtDatabase,
    designated: usize,
    grid: &GridSpec,
    cfg: &StageConfig,
    rng: &mut Rng,
) -> Result<(MoEModel, StageLog)> {
    if frames.is_empty() {
        return Err(Error::Empty("stage-1 training set".into()));
    }
    let mut model = MoEModel::new(designated, rng)?;
    let mut log = StageLog::default();
    let total_steps = cfg.epochs * frames.len().div_ceil(cfg.batch_size.max(1));
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            zero_grads(&mut model.shared);
            zero_grads(&mut model.experts[designated]);
            for &i in batch {
                let view = training_view(&frames[i], db, cfg, rng);
                let (l, r) = frame_inputs(&view, grid);
                let (fl, fr) = model.shared.forward_train(&l, &r)?;
                let map = model.experts[designated].forward_train(&fl, &fr)?;
                let (loss, grad) = detection_loss(&map, &view.gt_boxes, grid, &cfg.loss)?;
                total += loss;
                let (gl, gr) = model.experts[designated].backward(&grad, true)?.expect("requested");
                model.shared.backward(&gl, &gr)?;
            }
            let s = 1.0 / batch.len() as f32;
            scale_grads(&mut model.shared, s);
            scale_grads(&mut model.experts[designated], s);
            let lr = cfg.lr_at(log.steps, total_steps);
            sgd_step(&mut model.shared, lr, cfg.momentum);
            sgd_step(&mut model.experts[designated], lr, cfg.momentum);
            log.steps += 1;
        }
        log.epoch_loss.push(total / frames.len() as f64);
    }
    Ok((model, log))
}

/// Stage 3: copy the designated expert into all seven slots.
pub fn init_moe(stage1: &MoEModel) -> Result<MoEModel> {
    let RoutingMode::Forced(d) = stage1.mode else {
        return Err(Error::InvalidArgument("stage-1 model must be forced to its designated expert".into()));
    };
    let mut model = stage1.clone();
    let mut ck = Checkpoint::new();
    ck.insert_module("e", &stage1.experts[d]);
    for e in &mut model.experts {
        // reload from values so optimizer state starts clean
        ck.load_module("e", e)?;
    }
    ck = Checkpoint::new();
    ck.insert_module("s", &stage1.shared);
    ck.load_module("s", &mut model.shared)?;
    Ok(model)
}

/// Stage 4: frozen shared backbone; each frame updates only its routed experts.
///
/// Frames are routed once up front (the router is frozen too) and batched per
/// top-1 expert, so every optimizer step averages over `batch_size` frames of
/// one routing group. Losses follow [`cw_loss`]: expert `w`'s head gradient is
/// scaled by `P_w`.
pub fn train_stage4(
    model: &mut MoEModel,
    frames: &[Frame],
    db: &GtDatabase,
    grid: &GridSpec,
    cfg: &StageConfig,
    rng: &mut Rng,
) -> Result<StageLog> {
    if frames.is_empty() {
        return Err(Error::Empty("stage-4 training set".into()));
    }
    if model.k == 0 || model.k > NUM_WEATHERS {
        return Err(Error::InvalidArgument(format!("K must be in [1, {NUM_WEATHERS}], got {}", model.k)));
    }
    let mut decisions = Vec::with_capacity(frames.len());
    for f in frames {
        let (l, r) = frame_inputs(f, grid);
        let (fl, fr) = model.shared.forward(&l, &r)?;
        decisions.push(model.route(f, &fl, &fr)?);
    }
    let shared_hash = param_hash(&model.shared);
    let mut log = StageLog::default();
    let batch_size = cfg.batch_size.max(1);
    let mut per_group = [0usize; NUM_WEATHERS];
    for d in &decisions {
        per_group[d.top()] += 1;
    }
    let total_steps = cfg.epochs * per_group.iter().map(|n| n.div_ceil(batch_size)).sum::<usize>();
    for _ in 0..cfg.epochs {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); NUM_WEATHERS];
        for (i, d) in decisions.iter().enumerate() {
            groups[d.top()].push(i);
        }
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for g in &mut groups {
            rng.shuffle(g);
            batches.extend(g.chunks(batch_size).map(|c| c.to_vec()));
        }
        rng.shuffle(&mut batches);
        let mut total = 0.0;
        for batch in batches.iter() {
            let audit = cfg.audit_every > 0 && log.steps % cfg.audit_every == 0;
            let before = if audit { model.expert_hashes() } else { Vec::new() };
            let mut touched = BTreeSet::new();
            for e in &mut model.experts {
                zero_grads(e);
            }
            for &i in batch {
                let view = training_view(&frames[i], db, cfg, rng);
                let decision = &decisions[i];
                total += routed_frame_loss(model, &view, decision, grid, &cfg.loss)?;
                touched.extend(decision.selected.iter().copied());
            }
            let lr = cfg.lr_at(log.steps, total_steps);
            for &w in &touched {
                scale_grads(&mut model.experts[w], 1.0 / batch.len() as f32);
                sgd_step(&mut model.experts[w], lr, cfg.momentum);
            }
            if audit {
                log.audits += 1;
                let after = model.expert_hashes();
                for w in 0..NUM_WEATHERS {
                    if !touched.contains(&w) && before[w] != after[w] {
                        log.audit_failures
                            .push(format!("step {}: expert {w} changed without being routed", log.steps));
                    }
                }
                if param_hash(&model.shared) != shared_hash {
                    log.audit_failures.push(format!("step {}: shared backbone changed", log.steps));
                }
            }
            log.steps += 1;
        }
        log.epoch_loss.push(total / frames.len() as f64);
    }
    if param_hash(&model.shared) != shared_hash {
        log.audit_failures.push("shared backbone changed during stage 4".into());
    }
    Ok(log)
}

/// Stage-4 loss of one frame: each selected expert's detection loss weighted by
/// its routing probability. Accumulates expert gradients; the shared backbone is
/// only run forward.
pub fn routed_frame_loss(
    model: &mut MoEModel,
    frame: &Frame,
    decision: &RoutingDecision,
    grid: &GridSpec,
    loss: &LossConfig,
) -> Result<f64> {
    let (l, r) = frame_inputs(frame, grid);
    let (fl, fr) = model.shared.forward(&l, &r)?;
    let mut losses = Vec::with_capacity(decision.selected.len());
    for &w in &decision.selected {
        check_class(w)?;
        let map = model.experts[w].forward_train(&fl, &fr)?;
        let (value, grad) = detection_loss(&map, &frame.gt_boxes, grid, loss)?;
        model.experts[w].backward(&grad.scaled(decision.probs[w] as f32), false)?;
        losses.push((w, value));
    }
    cw_loss(&losses, decision)
}

/// Pooled frozen shared features with weather labels, for training the point-feature gate.
pub fn pooled_features(model: &MoEModel, frames: &[Frame], grid: &GridSpec) -> Result<Vec<(crate::nn::Tensor, usize)>> {
    frames
        .iter()
        .map(|f| {
            let (l, r) = frame_inputs(f, grid);
            let (fl, fr) = model.shared.forward(&l, &r)?;
            Ok((PfrGate::pool(&fl, &fr)?, f.weather.index()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use crate::weathersim::{generate_scene, SceneConfig};

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            bbox: Box3D::new([x, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0).unwrap(),
            score,
        }
    }

    fn set(dets: Vec<Detection>, w: usize, weight: f64) -> DetectionSet {
        DetectionSet {
            detections: dets,
            expert: Some(w),
            weight,
        }
    }

    #[test]
    fn cw_loss_examples() {
        let d = RoutingDecision {
            probs: vec![0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 0.0],
            selected: vec![2],
        };
        assert!((cw_loss(&[(2, 2.0)], &d).unwrap() - 1.8).abs() < 1e-12);
        assert!(cw_loss(&[(3, 2.0)], &d).is_err());
        let uni = RoutingDecision {
            probs: vec![1.0 / 7.0; 7],
            selected: (0..7).collect(),
        };
        let losses: Vec<_> = (0..7).map(|w| (w, w as f64)).collect();
        assert!((cw_loss(&losses, &uni).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn postprocess_examples() {
        let a = vec![det(0.0, 0.9), det(10.0, 0.6)];
        let one = cw_postprocess(&[set(a.clone(), 0, 1.0)], 0.3, 0.1).unwrap();
        assert_eq!(one.detections, nms(&a, 0.1));
        let two = cw_postprocess(&[set(a.clone(), 0, 0.5), set(a.clone(), 1, 0.5)], 0.3, 0.1).unwrap();
        assert_eq!(two.detections.len(), 2);
        for (x, y) in two.detections.iter().zip(&a) {
            assert!((x.bbox.x - y.bbox.x).abs() < 1e-12 && (x.score - y.score).abs() < 1e-12);
        }
        let f = cw_postprocess(&[set(vec![det(0.0, 0.9)], 0, 0.8), set(vec![det(1.0, 0.5)], 1, 0.2)], 0.3, 0.1).unwrap();
        assert_eq!(f.detections.len(), 1);
        assert!((f.detections[0].bbox.x - 0.2).abs() < 1e-12);
        assert!((f.detections[0].score - 0.82).abs() < 1e-12);
        let again = cw_postprocess(&[set(f.detections.clone(), 0, 1.0)], 0.3, 0.1).unwrap();
        assert_eq!(again.detections, f.detections);
        assert!(cw_postprocess(&[], 1.0, 0.1).is_err());
    }

    #[test]
    fn init_copies_designated_expert() {
        let m = MoEModel::new(0, &mut Rng::new(3)).unwrap();
        let h = m.expert_hashes();
        assert_ne!(h[0], h[1]);
        let moe = init_moe(&m).unwrap();
        assert!(moe.expert_hashes().iter().all(|x| *x == h[0]));
        assert_eq!(param_hash(&moe.shared), param_hash(&m.shared));
    }

    fn distinct_experts(seed: u64) -> MoEModel {
        let mut m = init_moe(&MoEModel::new(0, &mut Rng::new(seed)).unwrap()).unwrap();
        for (w, e) in m.experts.iter_mut().enumerate() {
            *e = Expert::new(&mut Rng::derive(seed, w as u64)).unwrap();
        }
        m
    }

    fn expert_grads(e: &Expert) -> Vec<f32> {
        let mut g = Vec::new();
        e.visit_params("", &mut |_, p| g.extend_from_slice(p.grad.data()));
        g
    }

    #[test]
    fn routed_gradient_is_probability_scaled() {
        let cfg = SceneConfig::default();
        let loss = LossConfig::default();
        let f = generate_scene(4, &cfg, &mut Rng::new(4)).unwrap();
        let d = RoutingDecision {
            probs: vec![0.05, 0.6, 0.05, 0.05, 0.05, 0.15, 0.05],
            selected: vec![1, 5],
        };
        let mut routed = distinct_experts(6);
        let mut alone = routed.clone();
        for e in routed.experts.iter_mut().chain(alone.experts.iter_mut()) {
            zero_grads(e);
        }
        let total = routed_frame_loss(&mut routed, &f, &d, &cfg.grid, &loss).unwrap();
        let (l, r) = frame_inputs(&f, &cfg.grid);
        let (fl, fr) = alone.shared.forward(&l, &r).unwrap();
        let mut expected = 0.0;
        for &w in &d.selected {
            let map = alone.experts[w].forward_train(&fl, &fr).unwrap();
            let (value, grad) = detection_loss(&map, &f.gt_boxes, &cfg.grid, &loss).unwrap();
            alone.experts[w].backward(&grad, false).unwrap();
            expected += d.probs[w] * value;
            let (a, b) = (expert_grads(&routed.experts[w]), expert_grads(&alone.experts[w]));
            let scale = b.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - d.probs[w] as f32 * y).abs() <= 1e-5 * scale);
            }
        }
        assert!((total - expected).abs() < 1e-9);
        for w in [0, 2, 3, 4, 6] {
            assert!(expert_grads(&routed.experts[w]).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn fusion_never_adds_boxes() {
        let cfg = SceneConfig::default();
        let mut rng = Rng::new(12);
        let mut m = distinct_experts(12);
        m.classifier = Some(WeatherClassifier::new(IMAGE_SHAPE, &mut rng).unwrap());
        let m = m.with_routing(RoutingMode::Iwr, 2).unwrap();
        let ic = InferenceConfig {
            score_threshold: 0.0,
            ..Default::default()
        };
        for seed in 0..4 {
            let f = generate_scene(seed, &cfg, &mut Rng::new(seed)).unwrap();
            let (out, d) = infer(&m, &f, &cfg.grid, &ic).unwrap();
            assert_eq!(d.selected.len(), 2);
            let (l, r) = frame_inputs(&f, &cfg.grid);
            let (fl, fr) = m.shared.forward(&l, &r).unwrap();
            let sum: usize = d
                .selected
                .iter()
                .map(|&w| expert_detections(&m.experts[w], &fl, &fr, &cfg.grid, &ic).unwrap().len())
                .sum();
            assert!(out.detections.len() <= sum);
            assert_eq!(infer(&m, &f, &cfg.grid, &ic).unwrap().0, out);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_missing_component() {
        let m = MoEModel::new(0, &mut Rng::new(4)).unwrap();
        let ck = m.to_checkpoint();
        let back = MoEModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.to_checkpoint(), ck);
        let iwr = m.clone().with_routing(RoutingMode::Iwr, 1).unwrap();
        match MoEModel::from_checkpoint(&iwr.to_checkpoint()) {
            Err(Error::MissingComponent(c)) => assert_eq!(c, "classifier"),
            other => panic!("expected missing classifier, got {other:?}"),
        }
        let mut partial = ck.clone();
        partial.tensors.retain(|k, _| !k.starts_with("expert3."));
        assert!(matches!(MoEModel::from_checkpoint(&partial), Err(Error::MissingComponent(c)) if c == "expert3"));
        assert!(m.with_routing(RoutingMode::Forced(0), 8).is_err());
    }

    #[test]
    fn forced_inference_matches_standalone_expert() {
        let cfg = SceneConfig::default();
        let m = MoEModel::new(2, &mut Rng::new(5)).unwrap();
        let ic = InferenceConfig {
            score_threshold: 0.0,
            ..Default::default()
        };
        for seed in 0..3 {
            let f = generate_scene(seed, &cfg, &mut Rng::new(seed)).unwrap();
            let (out, d) = infer(&m, &f, &cfg.grid, &ic).unwrap();
            assert_eq!(d.selected, vec![2]);
            let (l, r) = frame_inputs(&f, &cfg.grid);
            let (fl, fr) = m.shared.forward(&l, &r).unwrap();
            let alone = expert_detections(&m.experts[2], &fl, &fr, &cfg.grid, &ic).unwrap();
            assert_eq!(out.detections, alone);
            assert_eq!(infer(&m, &f, &cfg.grid, &ic).unwrap().0, out);
        }
    }
}
