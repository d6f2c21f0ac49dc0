//! Oracle and invariant checks shared by the `selftest` verb and the
//! acceptance target. Each check returns a [`CheckOutcome`] instead of
//! panicking so callers can print one line per check.

use std::time::{Duration, Instant};

use nalgebra::Matrix4;

use crate::eval::average_precision;
use crate::geometry::{bev_iou, iou_3d, project_to_pixel, transform_pixel_to_ego, CameraIntrinsics, Projection, RigidTransform};
use crate::iwr::{RoutingDecision, WeatherClassifier, IMAGE_SHAPE};
use crate::lrc::lift;
use crate::moe::{
    expert_detections, infer, init_moe, routed_frame_loss, train_stage4, InferenceConfig, MoEModel, RoutingMode, StageConfig,
};
use crate::nn::{zero_grads, Parameterized, Rng, Tensor};
use crate::udma::{apply_sync, build_gt_database, wsgts_sample, AugmentationSpec};
use crate::verify::{
    ap_micro_case, exhaustive_ap, monte_carlo_iou, pixel_to_ego_oracle, random_box_pair, random_calibration, run_gradient_suite,
};
use crate::weathersim::{apply_weather, generate_scene, Frame, SceneConfig, WeatherClass, NUM_WEATHERS};
use crate::wse::{detection_loss, frame_inputs, LossConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckOutcome {
    /// `PASS name (1.2s): detail`
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Runs `f`, timing it; an error becomes a failed outcome.
pub fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn weather_frame(seed: u64, w: WeatherClass) -> Result<Frame> {
    let mut rng = Rng::derive(seed, 0x7e57);
    let clear = generate_scene(seed, &SceneConfig::default(), &mut rng)?;
    apply_weather(&clear, w, &mut rng)
}

/// Finite-difference check of every differentiable op on `instances` seeds.
pub fn gradient_soundness(instances: u64, tol: f64) -> Result<(bool, String)> {
    let reports = run_gradient_suite(instances, 8, tol)?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one op");
    // Kink skips must stay a minority, or the check says little.
    let ok = reports.iter().all(|r| r.max_rel_error < tol && r.checked > r.kinks);
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    let kinks: usize = reports.iter().map(|r| r.kinks).sum();
    Ok((
        ok,
        format!(
            "{} ops x {instances} instances, {checked} entries checked, {kinks} skipped at kinks, worst {} ({}) rel err {:.2e}",
            reports.len(),
            worst.op,
            worst.worst_var,
            worst.max_rel_error
        ),
    ))
}

/// Polygon-clipping IoU against Monte-Carlo estimates.
pub fn geometry_oracle(pairs: usize, samples: usize, tol: f64) -> Result<(bool, String)> {
    let mut rng = Rng::new(0x10);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let (a, b) = random_box_pair(&mut rng);
        let (mb, m3) = monte_carlo_iou(&a, &b, samples, &mut rng);
        worst = worst.max((mb - bev_iou(&a, &b)).abs()).max((m3 - iou_3d(&a, &b)).abs());
    }
    Ok((worst <= tol, format!("{pairs} pairs, {samples} samples, max |exact - mc| {worst:.4}")))
}

fn random_simplex(d: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::uniform(&[d, h, w], 0.0, 1.0, rng);
    for i in 0..h * w {
        let s: f32 = (0..d).map(|k| t.data()[k * h * w + i]).sum();
        for k in 0..d {
            t.data_mut()[k * h * w + i] /= s;
        }
    }
    t
}

/// Summing the lifted frustum over depth returns the context features.
pub fn lift_identity(cases: usize, tol: f64) -> Result<(bool, String)> {
    let mut rng = Rng::new(0x11);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (d, c, h, w) = (rng.range_usize(2, 12), rng.range_usize(1, 6), rng.range_usize(1, 5), rng.range_usize(1, 5));
        let prob = random_simplex(d, h, w, &mut rng);
        let ctx = Tensor::uniform(&[c, h, w], -2.0, 2.0, &mut rng);
        let out = lift(&prob, &ctx)?;
        let slice = c * h * w;
        for (i, &v) in ctx.data().iter().enumerate() {
            let s: f64 = (0..d).map(|k| out.data()[k * slice + i] as f64).sum();
            worst = worst.max((s - v as f64).abs());
        }
    }
    let (d, c, h, w) = (5, 3, 2, 4);
    let hot = 2;
    let mut prob = Tensor::zeros(&[d, h, w]);
    for i in 0..h * w {
        prob.data_mut()[hot * h * w + i] = 1.0;
    }
    let ctx = Tensor::uniform(&[c, h, w], -2.0, 2.0, &mut rng);
    let out = lift(&prob, &ctx)?;
    let slice = c * h * w;
    let exact = (0..d).all(|k| {
        let s = &out.data()[k * slice..(k + 1) * slice];
        if k == hot {
            s == ctx.data()
        } else {
            s.iter().all(|&v| v == 0.0)
        }
    });
    Ok((
        worst <= tol && exact,
        format!("{cases} simplex cases, max |sum - context| {worst:.2e}; one-hot slice exact: {exact}"),
    ))
}

/// Pixel-to-ego chain: identity case, projection round trip, and a
/// matrix-free oracle.
pub fn pixel_chain(calibrations: usize, round_trip_tol: f64, oracle_tol: f64) -> Result<(bool, String)> {
    let id = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 10, 10)?;
    let eye = Matrix4::identity();
    let mut identity_exact = true;
    for (u, v, d) in [(0.0, 0.0, 1.0), (3.0, -2.0, 5.5), (0.25, 7.0, 0.5)] {
        let p = transform_pixel_to_ego(u, v, d, &id, &RigidTransform::identity(), &eye, &eye)?;
        identity_exact &= p == [u * d, v * d, d];
    }
    let mut rng = Rng::new(0x12);
    let (mut trip, mut oracle): (f64, f64) = (0.0, 0.0);
    let mut tested = 0;
    while tested < calibrations {
        let c = random_calibration(&mut rng);
        let (u, v, d) = (
            rng.uniform(0.0, c.intrinsics.width as f64),
            rng.uniform(0.0, c.intrinsics.height as f64),
            rng.uniform(1.0, 60.0),
        );
        let a = transform_pixel_to_ego(u, v, d, &c.intrinsics, &c.extrinsic, &c.image_aug, &c.lidar_aug)?;
        let Some(b) = pixel_to_ego_oracle(u, v, d, &c) else {
            continue;
        };
        oracle = oracle.max((0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max));
        let p = transform_pixel_to_ego(u, v, d, &c.intrinsics, &c.extrinsic, &eye, &eye)?;
        match project_to_pixel(p, &c.intrinsics, &c.extrinsic) {
            Projection::InFrame { u: pu, v: pv, depth } | Projection::OutOfFrame { u: pu, v: pv, depth } => {
                trip = trip.max((pu - u).abs()).max((pv - v).abs()).max((depth - d).abs());
            }
            Projection::BehindCamera => trip = f64::INFINITY,
        }
        tested += 1;
    }
    Ok((
        identity_exact && trip <= round_trip_tol && oracle <= oracle_tol,
        format!("identity exact: {identity_exact}; {calibrations} calibrations, round trip {trip:.2e}, oracle {oracle:.2e}"),
    ))
}

/// Forced routing with K = 1 reduces to the standalone expert, bit for bit,
/// in both the training loss (with its gradients) and inference.
pub fn forced_equivalence(frames: usize) -> Result<(bool, String)> {
    let cfg = SceneConfig::default();
    let grid = cfg.grid;
    let loss_cfg = LossConfig::default();
    let model = MoEModel::new(0, &mut Rng::new(0x13))?;
    // distinct experts so a wrong index would show
    let mut model = init_moe(&model)?;
    for (w, e) in model.experts.iter_mut().enumerate() {
        *e = crate::wse::Expert::new(&mut Rng::derive(0x13, w as u64))?;
    }
    let ic = InferenceConfig {
        score_threshold: 0.0,
        ..InferenceConfig::default()
    };
    let (mut loss_ok, mut infer_ok) = (true, true);
    for i in 0..frames {
        let w = i % NUM_WEATHERS;
        let f = weather_frame(i as u64, WeatherClass::ALL[w])?;
        let forced = model.clone().with_routing(RoutingMode::Forced(w), 1)?;

        let mut routed = forced.clone();
        let decision = RoutingDecision::forced(w)?;
        let routed_loss = routed_frame_loss(&mut routed, &f, &decision, &grid, &loss_cfg)?;

        let mut alone = forced.clone();
        zero_grads(&mut alone.experts[w]);
        let (l, r) = frame_inputs(&f, &grid);
        let (fl, fr) = alone.shared.forward(&l, &r)?;
        let map = alone.experts[w].forward_train(&fl, &fr)?;
        let (alone_loss, grad) = detection_loss(&map, &f.gt_boxes, &grid, &loss_cfg)?;
        alone.experts[w].backward(&grad, false)?;
        let grads = |m: &MoEModel| {
            let mut g = Vec::new();
            m.experts[w].visit_params("", &mut |_, p| g.extend_from_slice(p.grad.data()));
            g
        };
        loss_ok &= routed_loss.to_bits() == alone_loss.to_bits() && grads(&routed) == grads(&alone);

        let (out, _) = infer(&forced, &f, &grid, &ic)?;
        infer_ok &= out.detections == expert_detections(&forced.experts[w], &fl, &fr, &grid, &ic)?;
    }
    Ok((
        loss_ok && infer_ok,
        format!("{frames} frames over 7 forced classes; loss+grad bit-equal: {loss_ok}; inference bit-equal: {infer_ok}"),
    ))
}

/// Stage-3 copies are identical; stage 4 never moves the shared backbone or
/// experts that were not routed.
pub fn stage_audits(random_inputs: usize) -> Result<(bool, String)> {
    let grid = SceneConfig::default().grid;
    let mut rng = Rng::new(0x14);
    let stage1 = MoEModel::new(3, &mut rng)?;
    let mut moe = init_moe(&stage1)?;
    let hashes = moe.expert_hashes();
    let hashes_equal = hashes.iter().all(|h| *h == hashes[0]);
    let mut outputs_equal = true;
    for i in 0..random_inputs {
        let f = weather_frame(1000 + i as u64, WeatherClass::ALL[i % NUM_WEATHERS])?;
        let (l, r) = frame_inputs(&f, &grid);
        let (fl, fr) = moe.shared.forward(&l, &r)?;
        let first = moe.experts[0].forward(&fl, &fr)?;
        for e in &moe.experts[1..] {
            outputs_equal &= e.forward(&fl, &fr)? == first;
        }
    }

    let frames: Vec<Frame> = (0..28)
        .map(|i| weather_frame(2000 + i, WeatherClass::ALL[i as usize % NUM_WEATHERS]))
        .collect::<Result<_>>()?;
    let db = build_gt_database(&frames);
    moe.classifier = Some(WeatherClassifier::new(IMAGE_SHAPE, &mut rng)?);
    let mut moe = moe.with_routing(RoutingMode::Iwr, 2)?;
    let cfg = StageConfig {
        epochs: 4,
        batch_size: 2,
        audit_every: 10,
        ..StageConfig::default()
    };
    let log = train_stage4(&mut moe, &frames, &db, &grid, &cfg, &mut rng)?;
    let ok = hashes_equal && outputs_equal && log.audits > 0 && log.audit_failures.is_empty();
    Ok((
        ok,
        format!(
            "stage 3: hashes equal {hashes_equal}, {random_inputs} outputs equal {outputs_equal}; stage 4: {} audits over {} steps, {} failures",
            log.audits,
            log.steps,
            log.audit_failures.len()
        ),
    ))
}

/// Synchronized augmentation keeps object points inside their boxes; weather-
/// specific sampling inserts only same-weather objects without overlap.
pub fn udma_sync(frames: usize) -> Result<(bool, String)> {
    let mut rng = Rng::new(0x15);
    let mut interior_checked = 0usize;
    let mut interior_lost = 0usize;
    let pool: Vec<Frame> = (0..42)
        .map(|i| weather_frame(3000 + i, WeatherClass::ALL[i as usize % NUM_WEATHERS]))
        .collect::<Result<_>>()?;
    let db = build_gt_database(&pool);
    let (mut inserted, mut foreign, mut overlaps) = (0usize, 0usize, 0usize);
    for i in 0..frames {
        let f = weather_frame(4000 + i as u64, WeatherClass::ALL[i % NUM_WEATHERS])?;
        let spec = AugmentationSpec::sample(&mut rng);
        let g = apply_sync(&f, &spec);
        for (p, q) in f.lidar.points.iter().zip(&g.lidar.points) {
            let before = [p.x as f64, p.y as f64, p.z as f64];
            let after = [q.x as f64, q.y as f64, q.z as f64];
            for (b, moved) in f.gt_boxes.iter().zip(&g.gt_boxes) {
                if b.contains(before) {
                    interior_checked += 1;
                    interior_lost += usize::from(!moved.contains(after));
                }
            }
        }
        let (s, n) = wsgts_sample(&g, &db, 3, &mut rng);
        inserted += n;
        foreign += s.inserted.iter().filter(|p| p.source_weather != f.weather).count();
        for (a, b1) in s.gt_boxes.iter().enumerate() {
            overlaps += s.gt_boxes[a + 1..].iter().filter(|b2| bev_iou(b1, b2) != 0.0).count();
        }
    }
    let ok = interior_lost == 0 && interior_checked > 0 && foreign == 0 && inserted > 0 && overlaps == 0;
    Ok((
        ok,
        format!(
            "{frames} frames: {interior_lost}/{interior_checked} interior points lost; {inserted} insertions, {foreign} cross-weather, {overlaps} overlapping pairs"
        ),
    ))
}

/// Greedy AP against exhaustive enumeration, plus the trivial detectors.
pub fn eval_oracle(cases: usize, tol: f64) -> Result<(bool, String)> {
    let mut rng = Rng::new(0x16);
    let mut worst: f64 = 0.0;
    let mut mismatched_presence = 0;
    for i in 0..cases {
        let (d, g) = ap_micro_case(&mut rng);
        let thr = if i % 2 == 0 { 0.5 } else { 0.3 };
        match (average_precision(&d, &g, iou_3d, thr), exhaustive_ap(&d, &g, iou_3d, thr)?) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => mismatched_presence += 1,
        }
    }
    let frames: Vec<Frame> = (0..10)
        .map(|i| weather_frame(5000 + i, WeatherClass::ALL[i as usize % NUM_WEATHERS]))
        .collect::<Result<_>>()?;
    let gts: Vec<_> = frames.iter().map(|f| f.gt_boxes.clone()).collect();
    let oracle: Vec<Vec<_>> = gts
        .iter()
        .map(|g| g.iter().map(|b| crate::wse::Detection { bbox: *b, score: 1.0 }).collect())
        .collect();
    let null: Vec<Vec<crate::wse::Detection>> = vec![Vec::new(); frames.len()];
    let mut trivial = true;
    for thr in [0.3, 0.5] {
        for iou in [bev_iou, iou_3d] {
            trivial &= average_precision(&oracle, &gts, iou, thr) == Some(1.0);
            trivial &= average_precision(&null, &gts, iou, thr) == Some(0.0);
        }
    }
    Ok((
        worst <= tol && mismatched_presence == 0 && trivial,
        format!("{cases} micro-cases, max |greedy - exhaustive| {worst:.1e}; oracle=1 and null=0: {trivial}"),
    ))
}

/// The property suites at their full acceptance sizes, in order.
pub fn run_property_suite() -> Vec<CheckOutcome> {
    vec![
        timed("gradient soundness", || gradient_soundness(10, 1e-3)),
        timed("geometry oracle", || geometry_oracle(100, 1_000_000, 0.005)),
        timed("lift identity", || lift_identity(50, 1e-5)),
        timed("pixel-to-ego chain", || pixel_chain(100, 1e-4, 1e-6)),
        timed("forced-routing equivalence", || forced_equivalence(14)),
        timed("stage audits", || stage_audits(20)),
        timed("augmentation synchronization", || udma_sync(100)),
        timed("eval oracle", || eval_oracle(200, 1e-9)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_checks_pass() {
        for (name, r) in [
            ("lift", lift_identity(10, 1e-5)),
            ("chain", pixel_chain(20, 1e-4, 1e-6)),
            ("forced", forced_equivalence(3)),
            ("udma", udma_sync(8)),
            ("eval", eval_oracle(30, 1e-9)),
            ("geometry", geometry_oracle(3, 100_000, 0.01)),
        ] {
            let (ok, detail) = r.unwrap();
            assert!(ok, "{name}: {detail}");
        }
    }

    #[test]
    fn failures_become_outcomes() {
        let o = timed("x", || Err(crate::Error::Empty("nothing".into())));
        assert!(!o.passed);
        assert!(o.line().starts_with("FAIL x"));
    }
}
