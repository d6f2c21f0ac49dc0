//! Oracles and checkers used by the self-test and the acceptance suite.
//!
//! * central finite-difference gradient checks for every differentiable op,
//! * Monte-Carlo IoU estimates,
//! * an exhaustive AP oracle for tiny instances,
//! * a step-by-step pixel-to-ego oracle with random calibrations.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::geometry::{Box3D, CameraIntrinsics, RigidTransform};
use crate::lrc::{
    depth_softmax, depth_softmax_backward, lift, lift_backward, splat, splat_backward, DepthBins, DepthNet,
    SplatGeometry, TrimodalFusion, VoxelGrid,
};
use crate::nn::{
    binary_focal, cross_entropy_loss, global_average_pool, global_average_pool_backward, relu, smooth_l1_loss,
    zero_grads, Conv2d, DepthwiseConv2d, DepthwiseSeparableBlock, InstanceNorm, Linear, Parameterized, Relu, Rng,
    Tensor,
};
use crate::pointcloud::{BevExtent, GridSpec};
use crate::udma::AugmentationSpec;
use crate::wse::{detection_loss, ConvStack, Expert, LossConfig, SharedBackbone};
use crate::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Output shape and values; values stay in `f64` so scalar losses keep full precision.
pub type Output = (Vec<usize>, Vec<f64>);
type EvalFn = Box<dyn Fn(&[Tensor]) -> Result<Output>>;
type GradFn = Box<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>>;

/// A differentiable function of a list of tensors (inputs and parameters).
pub struct GradCase {
    pub vars: Vec<Tensor>,
    pub names: Vec<String>,
    eval: EvalFn,
    grad: GradFn,
}

impl GradCase {
    pub fn new(vars: Vec<(String, Tensor)>, eval: EvalFn, grad: GradFn) -> Self {
        let (names, vars) = vars.into_iter().unzip();
        Self { vars, names, eval, grad }
    }
}

/// Worst relative error of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub worst_var: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within one step of them.
    pub kinks: usize,
}

impl GradReport {
    fn empty() -> Self {
        Self {
            op: String::new(),
            worst_var: String::new(),
            max_rel_error: 0.0,
            checked: 0,
            kinks: 0,
        }
    }
}

fn objective(y: &Output, r: &Tensor) -> f64 {
    y.1.iter().zip(r.data()).map(|(&a, &b)| a * b as f64).sum()
}

fn out(t: Tensor) -> Output {
    (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
}

/// Central differences of `sum(r * f(vars))` at up to `coords` sampled entries
/// per variable. The error is `max |a - n|` over all sampled entries divided by
/// the largest `|a|` or `|n|` among them, so gradients that vanish identically
/// (a shift followed by a normalization) are compared against the scale of the
/// op rather than against their own rounding noise. A kink within one step
/// moves the central difference by up to half the gap between the one-sided
/// slopes, so entries whose gap could use up more than half the tolerance at
/// the variable's gradient scale are counted as kinks and replaced by others.
pub fn check_gradients(case: &GradCase, coords: usize, tol: f64, rng: &mut Rng) -> Result<GradReport> {
    let y = (case.eval)(&case.vars)?;
    let r = Tensor::uniform(&y.0, -1.0, 1.0, rng);
    let analytic = (case.grad)(&case.vars, &r)?;
    if analytic.len() != case.vars.len() {
        return Err(Error::InvalidArgument("gradient count differs from variable count".into()));
    }
    let f0 = objective(&y, &r);
    let mut report = GradReport::empty();
    let (mut worst_diff, mut scale) = (0.0f64, 0.0f64);
    let mut vars = case.vars.clone();
    for (v, name) in case.names.iter().enumerate() {
        if analytic[v].shape() != vars[v].shape() {
            return Err(Error::shape("check_gradients", vars[v].shape_string(), analytic[v].shape_string()));
        }
        let var_scale = analytic[v].data().iter().fold(0.0f64, |m, &g| m.max((g as f64).abs()));
        let n = vars[v].len();
        let mut candidates: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut candidates);
        let mut taken = 0;
        for &i in &candidates {
            if taken == coords {
                break;
            }
            let x = vars[v].data()[i];
            let xp = (x as f64 + FD_STEP) as f32;
            let xm = (x as f64 - FD_STEP) as f32;
            vars[v].data_mut()[i] = xp;
            let fp = objective(&(case.eval)(&vars)?, &r);
            vars[v].data_mut()[i] = xm;
            let fm = objective(&(case.eval)(&vars)?, &r);
            vars[v].data_mut()[i] = x;
            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let right = (fp - f0) / (xp as f64 - x as f64);
            let left = (f0 - fm) / (x as f64 - xm as f64);
            let a = analytic[v].data()[i] as f64;
            let local = a.abs().max(numeric.abs()).max(var_scale).max(1e-3);
            if (right - left).abs() > tol * local {
                report.kinks += 1;
                continue;
            }
            if (a - numeric).abs() > worst_diff {
                worst_diff = (a - numeric).abs();
                report.worst_var = name.clone();
            }
            scale = scale.max(a.abs()).max(numeric.abs());
            taken += 1;
        }
        report.checked += taken;
    }
    report.max_rel_error = if scale < 1e-9 { worst_diff } else { worst_diff / scale };
    Ok(report)
}

/// Current parameter values in visit order.
pub fn param_values(m: &dyn Parameterized) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
    out
}

/// Overwrites parameters, in visit order, from `values`.
pub fn set_param_values(m: &mut dyn Parameterized, values: &[Tensor]) {
    let mut it = values.iter();
    m.visit_params_mut("", &mut |_, p| {
        p.value = it.next().expect("one value per parameter").clone();
    });
}

fn param_grads(m: &dyn Parameterized) -> Vec<Tensor> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, p| out.push(p.grad.clone()));
    out
}

/// Wraps a module with a fixed number of leading input tensors.
fn module_case<M: Parameterized + Clone + 'static>(
    template: M,
    inputs: Vec<(String, Tensor)>,
    forward: fn(&M, &[Tensor]) -> Result<Tensor>,
    backward: fn(&mut M, &[Tensor], &Tensor) -> Result<Vec<Tensor>>,
) -> GradCase {
    let k = inputs.len();
    let mut vars = inputs;
    vars.extend(param_values(&template).into_iter().map(|(n, t)| (format!("param {n}"), t)));
    let t1 = template.clone();
    let eval: EvalFn = Box::new(move |v| {
        let mut m = t1.clone();
        set_param_values(&mut m, &v[k..]);
        forward(&m, &v[..k]).map(out)
    });
    let grad: GradFn = Box::new(move |v, r| {
        let mut m = template.clone();
        set_param_values(&mut m, &v[k..]);
        zero_grads(&mut m);
        let mut g = backward(&mut m, &v[..k], r)?;
        g.extend(param_grads(&m));
        Ok(g)
    });
    GradCase::new(vars, eval, grad)
}

fn stateless_case(inputs: Vec<(String, Tensor)>, eval: EvalFn, grad: GradFn) -> GradCase {
    GradCase::new(inputs, eval, grad)
}

fn named(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

fn scalar(v: f64) -> Output {
    (vec![1], vec![v])
}

fn small_grid() -> GridSpec {
    GridSpec::new(BevExtent::new(0.0, 8.0, -4.0, 4.0).expect("valid"), 2.0).expect("valid")
}

/// Builder of one random instance of an op.
pub type CaseBuilder = fn(u64) -> Result<GradCase>;

fn conv_case(seed: u64, stride: usize) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 11);
    let conv = Conv2d::new(3, 4, 3, stride, 1, &mut rng)?;
    let x = Tensor::uniform(&[3, 5, 6], -1.0, 1.0, &mut rng);
    Ok(module_case(
        conv,
        vec![named("input", x)],
        |m, x| m.forward(&x[0]),
        |m, x, r| {
            m.forward_train(&x[0])?;
            Ok(vec![m.backward(r, true)?.expect("requested")])
        },
    ))
}

fn depthwise_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 12);
    let conv = DepthwiseConv2d::new(3, 3, 2, 1, &mut rng)?;
    let x = Tensor::uniform(&[3, 6, 5], -1.0, 1.0, &mut rng);
    Ok(module_case(
        conv,
        vec![named("input", x)],
        |m, x| m.forward(&x[0]),
        |m, x, r| {
            m.forward_train(&x[0])?;
            Ok(vec![m.backward(r, true)?.expect("requested")])
        },
    ))
}

fn linear_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 13);
    let lin = Linear::new(6, 4, &mut rng);
    let x = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
    Ok(module_case(
        lin,
        vec![named("input", x)],
        |m, x| m.forward(&x[0]),
        |m, x, r| {
            m.forward_train(&x[0])?;
            Ok(vec![m.backward(r)?])
        },
    ))
}

fn norm_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 14);
    let mut norm = InstanceNorm::new(3);
    norm.scale.value = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
    norm.shift.value = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
    let x = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
    Ok(module_case(
        norm,
        vec![named("input", x)],
        |m, x| m.forward(&x[0]),
        |m, x, r| {
            m.forward_train(&x[0])?;
            Ok(vec![m.backward(r)?])
        },
    ))
}

fn block_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 15);
    let block = DepthwiseSeparableBlock::new(3, 4, 2, &mut rng)?;
    let x = Tensor::uniform(&[3, 6, 6], -1.0, 1.0, &mut rng);
    Ok(module_case(
        block,
        vec![named("input", x)],
        |m, x| m.forward(&x[0]),
        |m, x, r| {
            m.forward_train(&x[0])?;
            Ok(vec![m.backward(r, true)?.expect("requested")])
        },
    ))
}

fn relu_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 16);
    let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
    Ok(stateless_case(
        vec![named("input", x)],
        Box::new(|v| Ok(out(relu(&v[0])))),
        Box::new(|v, r| {
            let mut act = Relu::default();
            act.forward_train(&v[0]);
            Ok(vec![act.backward(r)?])
        }),
    ))
}

fn pool_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 17);
    let x = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
    Ok(stateless_case(
        vec![named("input", x)],
        Box::new(|v| global_average_pool(&v[0]).map(out)),
        Box::new(|_, r| Ok(vec![global_average_pool_backward(r, 4, 5)])),
    ))
}

fn cross_entropy_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 18);
    let z = Tensor::uniform(&[7], -2.0, 2.0, &mut rng);
    let target = rng.below(7) as usize;
    Ok(stateless_case(
        vec![named("logits", z)],
        Box::new(move |v| Ok(scalar(cross_entropy_loss(&v[0], target)?.0))),
        Box::new(move |v, r| Ok(vec![cross_entropy_loss(&v[0], target)?.1.scaled(r.data()[0])])),
    ))
}

fn smooth_l1_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 19);
    let p = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
    let t = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
    let t2 = t.clone();
    Ok(stateless_case(
        vec![named("pred", p)],
        Box::new(move |v| Ok(scalar(smooth_l1_loss(v[0].data(), t.data(), 0.1).0))),
        Box::new(move |v, r| {
            let (_, g) = smooth_l1_loss(v[0].data(), t2.data(), 0.1);
            Ok(vec![Tensor::from_vec(&[8], g)?.scaled(r.data()[0])])
        }),
    ))
}

fn focal_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 20);
    let z = Tensor::uniform(&[6], -3.0, 3.0, &mut rng);
    let labels: Vec<bool> = (0..6).map(|_| rng.bernoulli(0.5)).collect();
    let l2 = labels.clone();
    Ok(stateless_case(
        vec![named("logits", z)],
        Box::new(move |v| {
            let loss = v[0]
                .data()
                .iter()
                .zip(&labels)
                .map(|(&z, &pos)| binary_focal(z, pos, 0.25, 2.0).0)
                .sum();
            Ok(scalar(loss))
        }),
        Box::new(move |v, r| {
            let g: Vec<f32> = v[0]
                .data()
                .iter()
                .zip(&l2)
                .map(|(&z, &pos)| (binary_focal(z, pos, 0.25, 2.0).1 * r.data()[0] as f64) as f32)
                .collect();
            Ok(vec![Tensor::from_vec(&[6], g)?])
        }),
    ))
}

fn conv_stack_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 21);
    let stack = ConvStack::new(&[3, 4, 4], &mut rng)?;
    let x = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
    Ok(module_case(
        stack,
        vec![named("input", x)],
        |m, x| m.forward(&x[0]),
        |m, x, r| {
            m.forward_train(&x[0])?;
            Ok(vec![m.backward(r, true)?.expect("requested")])
        },
    ))
}

fn shared_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 22);
    let shared = SharedBackbone::new(&mut rng)?;
    let l = Tensor::uniform(&[4, 4, 4], 0.0, 1.0, &mut rng);
    let rr = Tensor::uniform(&[4, 4, 4], 0.0, 1.0, &mut rng);
    Ok(module_case(
        shared,
        vec![named("lidar", l), named("radar", rr)],
        |m, x| {
            let (a, b) = m.forward(&x[0], &x[1])?;
            Tensor::concat_channels(&[&a, &b])
        },
        |m, x, r| {
            let (a, _) = m.forward_train(&x[0], &x[1])?;
            let parts = r.split_channels(&[a.shape()[0], a.shape()[0]])?;
            let (gl, gr) = m.backward_with_inputs(&parts[0], &parts[1])?;
            Ok(vec![gl, gr])
        },
    ))
}

fn expert_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 23);
    let mut expert = Expert::new(&mut rng)?;
    // A plain random head: the detection prior only offsets the outputs.
    expert.head = Conv2d::new(crate::wse::FUSED_CHANNELS, crate::wse::HEAD_CHANNELS, 1, 1, 0, &mut rng)?;
    let c = crate::wse::FEATURE_CHANNELS;
    let l = Tensor::uniform(&[c, 3, 3], 0.0, 1.0, &mut rng);
    let rr = Tensor::uniform(&[c, 3, 3], 0.0, 1.0, &mut rng);
    Ok(module_case(
        expert,
        vec![named("f_lidar", l), named("f_radar", rr)],
        |m, x| m.forward(&x[0], &x[1]),
        |m, x, r| {
            m.forward_train(&x[0], &x[1])?;
            let (a, b) = m.backward(r, true)?.expect("requested");
            Ok(vec![a, b])
        },
    ))
}

fn detection_loss_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 24);
    let grid = small_grid();
    let map = Tensor::uniform(&[crate::wse::HEAD_CHANNELS, 4, 4], -1.5, 1.5, &mut rng);
    let b = Box3D::new(
        [rng.uniform(1.0, 7.0), rng.uniform(-3.0, 3.0), 1.5],
        [4.0, 1.8, 1.5],
        rng.uniform(-1.5, 1.5),
    )?;
    let cfg = LossConfig::default();
    Ok(stateless_case(
        vec![named("map", map)],
        Box::new(move |v| Ok(scalar(detection_loss(&v[0], &[b], &grid, &cfg)?.0))),
        Box::new(move |v, r| Ok(vec![detection_loss(&v[0], &[b], &grid, &cfg)?.1.scaled(r.data()[0])])),
    ))
}

fn depthnet_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 25);
    let net = DepthNet::new(4, 5, 6, 3, &mut rng)?;
    let f = Tensor::uniform(&[4, 3, 4], -1.0, 1.0, &mut rng);
    let s = Tensor::uniform(&[5, 3, 4], 0.0, 1.0, &mut rng);
    Ok(module_case(
        net,
        vec![named("f_img", f), named("sparse_depth", s)],
        |m, x| {
            let (c, d) = m.forward(&x[0], &x[1])?;
            Tensor::concat_channels(&[&c, &d])
        },
        |m, x, r| {
            m.forward_train(&x[0], &x[1])?;
            let parts = r.split_channels(&[3, 6])?;
            let (g, gs) = m.backward_with_depth(&parts[0], &parts[1])?;
            Ok(vec![g, gs])
        },
    ))
}

fn depth_softmax_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 26);
    let z = Tensor::uniform(&[5, 3, 3], -2.0, 2.0, &mut rng);
    Ok(stateless_case(
        vec![named("logits", z)],
        Box::new(|v| depth_softmax(&v[0]).map(out)),
        Box::new(|v, r| Ok(vec![depth_softmax_backward(&depth_softmax(&v[0])?, r)?])),
    ))
}

fn lift_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 27);
    let p = Tensor::uniform(&[4, 3, 3], 0.0, 1.0, &mut rng);
    let c = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
    Ok(stateless_case(
        vec![named("depth_prob", p), named("context", c)],
        Box::new(|v| lift(&v[0], &v[1]).map(out)),
        Box::new(|v, r| {
            let (a, b) = lift_backward(&v[0], &v[1], r)?;
            Ok(vec![a, b])
        }),
    ))
}

fn splat_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 28);
    let calib = random_calibration(&mut rng);
    let intr = CameraIntrinsics::new(3.0, 3.0, 3.0, 2.0, 6, 4)?;
    let bins = DepthBins::new(1.0, 17.0, 4)?;
    let voxels = VoxelGrid {
        bev: GridSpec::new(BevExtent::new(-20.0, 20.0, -20.0, 20.0)?, 4.0)?,
        z_min: -10.0,
        z_max: 10.0,
        nz: 2,
    };
    let geo = SplatGeometry::new(&bins, &intr, &calib.extrinsic, &Matrix4::identity(), &calib.lidar_aug, voxels)?;
    let fr = Tensor::uniform(&[4, 2, 4, 6], -1.0, 1.0, &mut rng);
    let g2 = geo.clone();
    Ok(stateless_case(
        vec![named("frustum", fr)],
        Box::new(move |v| splat(&v[0], &geo).map(out)),
        Box::new(move |_, r| Ok(vec![splat_backward(r, &g2, 2)?])),
    ))
}

fn fusion_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::derive(seed, 29);
    let fusion = TrimodalFusion::new(2, 3, 3, 4, &mut rng)?;
    let fc = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
    let fl = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
    let fr = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
    Ok(module_case(
        fusion,
        vec![named("f_camera", fc), named("f_lidar", fl), named("f_radar", fr)],
        |m, x| m.forward(&x[0], &x[1], &x[2]),
        |m, x, r| {
            m.forward_train(&x[0], &x[1], &x[2])?;
            let (a, b, c) = m.backward(r)?;
            Ok(vec![a, b, c])
        },
    ))
}

/// Every checked op, grouped by module.
pub fn gradient_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("nn::conv2d", |s| conv_case(s, 1)),
        ("nn::conv2d_stride2", |s| conv_case(s, 2)),
        ("nn::depthwise_conv2d", depthwise_case),
        ("nn::linear", linear_case),
        ("nn::instance_norm", norm_case),
        ("nn::relu", relu_case),
        ("nn::global_average_pool", pool_case),
        ("nn::depthwise_separable_block", block_case),
        ("nn::cross_entropy", cross_entropy_case),
        ("nn::smooth_l1", smooth_l1_case),
        ("nn::binary_focal", focal_case),
        ("wse::conv_stack", conv_stack_case),
        ("wse::shared_backbone", shared_case),
        ("wse::expert", expert_case),
        ("wse::detection_loss", detection_loss_case),
        ("lrc::depthnet", depthnet_case),
        ("lrc::depth_softmax", depth_softmax_case),
        ("lrc::lift", lift_case),
        ("lrc::splat", splat_case),
        ("lrc::trimodal_fusion", fusion_case),
    ]
}

/// Runs every case on `instances` seeds; reports the worst instance per op.
pub fn run_gradient_suite(instances: u64, coords: usize, tol: f64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (name, build) in gradient_cases() {
        let mut worst: Option<GradReport> = None;
        for seed in 0..instances {
            let case = build(seed)?;
            let mut rep = check_gradients(&case, coords, tol, &mut Rng::derive(seed, 99))?;
            rep.op = name.to_string();
            if let Some(w) = &mut worst {
                w.checked += rep.checked;
                w.kinks += rep.kinks;
                if rep.max_rel_error > w.max_rel_error {
                    w.max_rel_error = rep.max_rel_error;
                    w.worst_var = rep.worst_var;
                }
            } else {
                worst = Some(rep);
            }
        }
        out.extend(worst);
    }
    Ok(out)
}

/// Monte-Carlo `(bev_iou, iou_3d)` from `samples` uniform draws in the joint bounding box.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut Rng) -> (f64, f64) {
    let (ra, rb) = (a.bev_radius(), b.bev_radius());
    let x0 = (a.x - ra).min(b.x - rb);
    let x1 = (a.x + ra).max(b.x + rb);
    let y0 = (a.y - ra).min(b.y - rb);
    let y1 = (a.y + ra).max(b.y + rb);
    let z0 = a.z_min().min(b.z_min());
    let z1 = a.z_max().max(b.z_max());
    let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
    let (mut in_a2, mut in_b2, mut both2) = (0u64, 0u64, 0u64);
    for _ in 0..samples {
        let x = rng.uniform(x0, x1);
        let y = rng.uniform(y0, y1);
        let z = rng.uniform(z0, z1);
        let (pa, pb) = (a.contains_bev(x, y), b.contains_bev(x, y));
        in_a2 += pa as u64;
        in_b2 += pb as u64;
        both2 += (pa && pb) as u64;
        let (qa, qb) = (pa && z >= a.z_min() && z <= a.z_max(), pb && z >= b.z_min() && z <= b.z_max());
        in_a += qa as u64;
        in_b += qb as u64;
        both += (qa && qb) as u64;
    }
    let ratio = |i: u64, a: u64, b: u64| {
        let u = a + b - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    };
    (ratio(both2, in_a2, in_b2), ratio(both, in_a, in_b))
}

/// A pair of overlapping rotated boxes.
pub fn random_box_pair(rng: &mut Rng) -> (Box3D, Box3D) {
    fn make(rng: &mut Rng, c: [f64; 3]) -> Box3D {
        Box3D::new(
            c,
            [rng.uniform(1.0, 5.0), rng.uniform(0.8, 3.0), rng.uniform(0.8, 2.5)],
            rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
        )
        .expect("positive sizes")
    }
    let a = make(rng, [0.0; 3]);
    let offset = [rng.uniform(-2.0, 2.0), rng.uniform(-1.5, 1.5), rng.uniform(-0.8, 0.8)];
    let b = make(rng, offset);
    (a, b)
}

/// Exhaustive AP reference for tiny instances.
///
/// Every injective assignment of detections to GT boxes is enumerated; the
/// valid ones are those a greedy matcher could produce (in score order each
/// detection takes the best still-free GT at `IoU >= threshold`, if any). For
/// each valid assignment the precision envelope is evaluated at the 40 recall
/// points from scratch; the result is the value shared by all valid
/// assignments (an error if they disagree).
pub fn exhaustive_ap(
    dets: &[Vec<crate::wse::Detection>],
    gts: &[Vec<Box3D>],
    iou: impl Fn(&Box3D, &Box3D) -> f64,
    threshold: f64,
) -> Result<Option<f64>> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return Ok(None);
    }
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (f, d) in dets.iter().enumerate() {
        for j in 0..d.len() {
            flat.push((f, j));
        }
    }
    flat.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));
    let gt_flat: Vec<(usize, usize)> = gts
        .iter()
        .enumerate()
        .flat_map(|(f, g)| (0..g.len()).map(move |j| (f, j)))
        .collect();
    let mut results: Vec<f64> = Vec::new();
    let mut assign: Vec<Option<usize>> = vec![None; flat.len()];
    fn rec(
        i: usize,
        assign: &mut Vec<Option<usize>>,
        flat: &[(usize, usize)],
        gt_flat: &[(usize, usize)],
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == flat.len() {
            out.push(assign.clone());
            return;
        }
        assign[i] = None;
        rec(i + 1, assign, flat, gt_flat, out);
        for g in 0..gt_flat.len() {
            if gt_flat[g].0 == flat[i].0 && !assign[..i].contains(&Some(g)) {
                assign[i] = Some(g);
                rec(i + 1, assign, flat, gt_flat, out);
            }
        }
        assign[i] = None;
    }
    let mut all = Vec::new();
    rec(0, &mut assign, &flat, &gt_flat, &mut all);
    for a in all {
        let valid = (0..flat.len()).all(|i| {
            let (f, j) = flat[i];
            let free: Vec<(usize, f64)> = (0..gt_flat.len())
                .filter(|&g| gt_flat[g].0 == f && !a[..i].contains(&Some(g)))
                .map(|g| (g, iou(&dets[f][j].bbox, &gts[f][gt_flat[g].1])))
                .filter(|&(_, v)| v >= threshold)
                .collect();
            match a[i] {
                None => free.is_empty(),
                Some(g) => {
                    let best = free.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
                    free.iter().any(|&(h, v)| h == g && v == best)
                }
            }
        });
        if !valid {
            continue;
        }
        let mut sum = 0.0;
        for k in 1..=crate::eval::RECALL_POINTS {
            let r = k as f64 / crate::eval::RECALL_POINTS as f64;
            let mut best: f64 = 0.0;
            for cut in 1..=flat.len() {
                let tp = a[..cut].iter().filter(|x| x.is_some()).count();
                if tp as f64 / num_gt as f64 >= r - 1e-12 {
                    best = best.max(tp as f64 / cut as f64);
                }
            }
            sum += best;
        }
        results.push(sum / crate::eval::RECALL_POINTS as f64);
    }
    let first = *results
        .first()
        .ok_or_else(|| Error::InvalidArgument("no greedy-valid assignment".into()))?;
    if results.iter().any(|&v| (v - first).abs() > 1e-12) {
        return Err(Error::InvalidArgument("greedy-valid assignments disagree".into()));
    }
    Ok(Some(first))
}

/// A random instance with at most 3 GT boxes and 4 detections over 1-2 frames.
pub fn ap_micro_case(rng: &mut Rng) -> (Vec<Vec<crate::wse::Detection>>, Vec<Vec<Box3D>>) {
    let frames = rng.range_usize(1, 2);
    let n_gt = rng.range_usize(0, 3);
    let n_det = rng.range_usize(0, 4);
    let mut gts = vec![Vec::new(); frames];
    let mut dets = vec![Vec::new(); frames];
    let mut scores: Vec<f64> = (0..n_det).map(|i| (i as f64 + 1.0) / (n_det as f64 + 1.0)).collect();
    rng.shuffle(&mut scores);
    for g in 0..n_gt {
        let f = rng.below(frames as u64) as usize;
        gts[f].push(Box3D::new([8.0 * g as f64, 0.0, 1.0], [4.0, 2.0, 1.5], 0.0).expect("valid"));
    }
    for s in scores {
        let f = rng.below(frames as u64) as usize;
        let anchor = rng.below(3) as f64 * 8.0;
        let bbox = Box3D::new(
            [anchor + rng.uniform(-2.0, 2.0), rng.uniform(-1.0, 1.0), 1.0],
            [4.0, 2.0, 1.5],
            rng.uniform(-0.3, 0.3),
        )
        .expect("valid");
        dets[f].push(crate::wse::Detection { bbox, score: s });
    }
    (dets, gts)
}

/// Random camera and augmentation chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomCalibration {
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: RigidTransform,
    pub image_aug: Matrix4<f64>,
    pub lidar_aug: Matrix4<f64>,
}

pub fn random_calibration(rng: &mut Rng) -> RandomCalibration {
    let w = rng.range_usize(40, 200);
    let h = rng.range_usize(30, 150);
    let intrinsics = CameraIntrinsics::new(
        rng.uniform(20.0, 200.0),
        rng.uniform(20.0, 200.0),
        rng.uniform(0.3, 0.7) * w as f64,
        rng.uniform(0.3, 0.7) * h as f64,
        w,
        h,
    )
    .expect("valid intrinsics");
    let rot = Rotation3::from_euler_angles(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-3.0, 3.0));
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let extrinsic = RigidTransform::from_rotation_translation(
        rot.matrix() * base,
        Vector3::new(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0.5, 2.5)),
    )
    .expect("proper rotation");
    // resize and crop in homogeneous pixel coordinates
    let s = rng.uniform(0.7, 1.3);
    let mut image_aug = Matrix4::identity();
    image_aug[(0, 0)] = s;
    image_aug[(1, 1)] = s;
    image_aug[(0, 2)] = rng.uniform(-10.0, 10.0);
    image_aug[(1, 2)] = rng.uniform(-10.0, 10.0);
    let lidar_aug = AugmentationSpec {
        flip_x: rng.bernoulli(0.5),
        yaw: rng.uniform(-0.8, 0.8),
        scale: rng.uniform(0.9, 1.1),
    }
    .matrix();
    RandomCalibration {
        intrinsics,
        extrinsic,
        image_aug,
        lidar_aug,
    }
}

/// Pixel-to-ego without any matrix inverse: undo the image augmentation with a
/// linear solve, invert the intrinsics in closed form, then apply the rigid
/// extrinsic and the LiDAR augmentation as separate steps.
pub fn pixel_to_ego_oracle(u: f64, v: f64, d: f64, c: &RandomCalibration) -> Option<[f64; 3]> {
    let m3 = c.image_aug.fixed_view::<3, 3>(0, 0).into_owned();
    let q = m3.lu().solve(&(Vector3::new(u * d, v * d, d) - c.image_aug.fixed_view::<3, 1>(0, 3)))?;
    let k = c.intrinsics.matrix();
    let (fx, s, cx, fy, cy) = (k[(0, 0)], k[(0, 1)], k[(0, 2)], k[(1, 1)], k[(1, 2)]);
    let z = q[2];
    let y = (q[1] - cy * z) / fy;
    let x = (q[0] - s * y - cx * z) / fx;
    let ego = c.extrinsic.apply([x, y, z]);
    let p = c.lidar_aug * nalgebra::Vector4::new(ego[0], ego[1], ego[2], 1.0);
    Some([p[0], p[1], p[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bev_iou, iou_3d, transform_pixel_to_ego};

    #[test]
    fn suite_passes_on_two_instances() {
        for r in run_gradient_suite(2, 6, 1e-3).unwrap() {
            assert!(r.max_rel_error < 1e-3, "{r:?}");
            assert!(r.checked > 0, "{r:?}");
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        let mut rng = Rng::new(1);
        let x = Tensor::uniform(&[5], -1.0, 1.0, &mut rng);
        let case = GradCase::new(
            vec![("x".into(), x)],
            Box::new(|v| Ok(out(v[0].map(|a| a * a)))),
            // off by a factor of two
            Box::new(|v, r| {
                let d: Vec<f32> = v[0].data().iter().zip(r.data()).map(|(a, g)| a * g).collect();
                Ok(vec![Tensor::from_vec(&[5], d)?])
            }),
        );
        let rep = check_gradients(&case, 5, 1e-3, &mut rng).unwrap();
        assert!(rep.max_rel_error > 0.3);
    }

    #[test]
    fn half_percent_error_in_a_deep_module_is_caught() {
        let case = expert_case(7).unwrap();
        let grad = case.grad;
        let off = GradCase {
            grad: Box::new(move |v, r| Ok(grad(v, r)?.into_iter().map(|g| g.scaled(1.005)).collect())),
            ..case
        };
        let rep = check_gradients(&off, 8, 1e-3, &mut Rng::derive(7, 99)).unwrap();
        assert!(rep.max_rel_error > 2e-3, "{rep:?}");
        assert!(rep.checked > rep.kinks, "{rep:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::from_vec(&[4], vec![0.0, 0.5, -0.5, 1e-4]).unwrap();
        let case = GradCase::new(
            vec![("x".into(), x)],
            Box::new(|v| Ok(out(relu(&v[0])))),
            Box::new(|v, r| Ok(vec![Tensor::from_vec(&[4], v[0].data().iter().zip(r.data()).map(|(&a, &g)| if a > 0.0 { g } else { 0.0 }).collect())?])),
        );
        let rep = check_gradients(&case, 4, 1e-3, &mut Rng::new(2)).unwrap();
        assert_eq!((rep.checked, rep.kinks), (2, 2));
        assert!(rep.max_rel_error < 1e-6);
    }

    #[test]
    fn monte_carlo_agrees_on_a_few_pairs() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let (a, b) = random_box_pair(&mut rng);
            let (mb, m3) = monte_carlo_iou(&a, &b, 200_000, &mut rng);
            assert!((mb - bev_iou(&a, &b)).abs() < 0.01);
            assert!((m3 - iou_3d(&a, &b)).abs() < 0.01);
        }
    }

    #[test]
    fn exhaustive_matches_greedy_on_micro_cases() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let (d, g) = ap_micro_case(&mut rng);
            let fast = crate::eval::average_precision(&d, &g, iou_3d, 0.5);
            let slow = exhaustive_ap(&d, &g, iou_3d, 0.5).unwrap();
            match (fast, slow) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn chain_oracle_agrees() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let c = random_calibration(&mut rng);
            let (u, v, d) = (rng.uniform(0.0, 100.0), rng.uniform(0.0, 80.0), rng.uniform(1.0, 50.0));
            let a = transform_pixel_to_ego(u, v, d, &c.intrinsics, &c.extrinsic, &c.image_aug, &c.lidar_aug).unwrap();
            let b = pixel_to_ego_oracle(u, v, d, &c).unwrap();
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }
    }
}
