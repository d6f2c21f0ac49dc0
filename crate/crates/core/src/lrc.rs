//! LiDAR-guided camera branch.
//!
//! LiDAR hits are projected into a one-hot sparse depth map, a small DepthNet
//! predicts per-pixel context features and a depth distribution from image
//! features plus that map, [`lift`] forms their outer product, [`splat`]
//! sum-pools the frustum into BEV voxels through the calibration and
//! augmentation chain, and [`TrimodalFusion`] concatenates camera, LiDAR and
//! radar BEV features.

use nalgebra::Matrix4;

use crate::geometry::{project_to_pixel, transform_pixel_to_ego, CameraIntrinsics, Projection, RigidTransform};
use crate::nn::{join, softmax_f64, Conv2d, Param, Parameterized, Relu, Rng, Tensor};
use crate::pointcloud::{GridSpec, LidarPoint};
use crate::wse::ConvStack;
use crate::{Error, Result};

/// Uniform depth bins over `[d_min, d_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 49.0,
            count: 24,
        }
    }
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min && count > 0) {
            return Err(Error::InvalidArgument(format!(
                "depth bins need 0 < d_min < d_max and count > 0, got [{d_min}, {d_max}) x {count}"
            )));
        }
        Ok(Self { d_min, d_max, count })
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth < self.d_max) {
            return None;
        }
        Some((((depth - self.d_min) / self.width()) as usize).min(self.count - 1))
    }

    pub fn center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * self.width()
    }
}

/// One-hot `D1 x H x W` depth map of the nearest LiDAR hit per pixel of the
/// (feature-resolution) camera described by `intrinsics`.
pub fn lidar_to_sparse_depth(
    points: &[LidarPoint],
    intrinsics: &CameraIntrinsics,
    t_ext: &RigidTransform,
    bins: &DepthBins,
) -> Tensor {
    let (h, w) = (intrinsics.height, intrinsics.width);
    let mut nearest = vec![f64::INFINITY; h * w];
    for p in points {
        if let Projection::InFrame { u, v, depth } =
            project_to_pixel([p.x as f64, p.y as f64, p.z as f64], intrinsics, t_ext)
        {
            let i = (v as usize) * w + u as usize;
            if depth < nearest[i] {
                nearest[i] = depth;
            }
        }
    }
    let mut out = Tensor::zeros(&[bins.count, h, w]);
    for (i, &d) in nearest.iter().enumerate() {
        if let Some(k) = bins.bin_of(d) {
            out.data_mut()[k * h * w + i] = 1.0;
        }
    }
    out
}

/// Sparse-depth encoder, shared trunk, and context / depth heads.
#[derive(Clone, Debug)]
pub struct DepthNet {
    pub depth_encoder: Conv2d,
    pub trunk: Conv2d,
    pub context_head: Conv2d,
    pub depth_head: Conv2d,
    depth_relu: Relu,
    trunk_relu: Relu,
    image_channels: usize,
    encoded_channels: usize,
}

impl DepthNet {
    pub fn new(image_channels: usize, d1: usize, d2: usize, context: usize, rng: &mut Rng) -> Result<Self> {
        let enc = 16;
        let hidden = 32;
        Ok(Self {
            depth_encoder: Conv2d::new(d1, enc, 3, 1, 1, rng)?,
            trunk: Conv2d::new(image_channels + enc, hidden, 3, 1, 1, rng)?,
            context_head: Conv2d::new(hidden, context, 1, 1, 0, rng)?,
            depth_head: Conv2d::new(hidden, d2, 1, 1, 0, rng)?,
            depth_relu: Relu::default(),
            trunk_relu: Relu::default(),
            image_channels,
            encoded_channels: enc,
        })
    }

    /// All weights and biases zero.
    pub fn zeroed(mut self) -> Self {
        self.visit_params_mut("", &mut |_, p| p.value.fill(0.0));
        self
    }

    fn check(&self, f_img: &Tensor, sparse: &Tensor) -> Result<()> {
        let (ci, h, w) = f_img.chw()?;
        let (cd, hd, wd) = sparse.chw()?;
        if ci != self.image_channels || cd != self.depth_encoder.in_channels() || (h, w) != (hd, wd) {
            return Err(Error::shape(
                "depthnet",
                format!(
                    "image [{}xHxW] with depth [{}xHxW]",
                    self.image_channels,
                    self.depth_encoder.in_channels()
                ),
                format!("{} / {}", f_img.shape_string(), sparse.shape_string()),
            ));
        }
        Ok(())
    }

    /// `(context C2 x H x W, depth logits D2 x H x W)`.
    pub fn forward(&self, f_img: &Tensor, sparse: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(f_img, sparse)?;
        let e = crate::nn::relu(&self.depth_encoder.forward(sparse)?);
        let t = crate::nn::relu(&self.trunk.forward(&Tensor::concat_channels(&[f_img, &e])?)?);
        Ok((self.context_head.forward(&t)?, self.depth_head.forward(&t)?))
    }

    pub fn forward_train(&mut self, f_img: &Tensor, sparse: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(f_img, sparse)?;
        let e = self.depth_relu.forward_train(&self.depth_encoder.forward_train(sparse)?);
        let t = self
            .trunk_relu
            .forward_train(&self.trunk.forward_train(&Tensor::concat_channels(&[f_img, &e])?)?);
        let ctx = self.context_head.forward_train(&t)?;
        let depth = self.depth_head.forward_train(&t)?;
        Ok((ctx, depth))
    }

    /// Returns the gradient with respect to `f_img`.
    pub fn backward(&mut self, grad_context: &Tensor, grad_depth: &Tensor) -> Result<Tensor> {
        Ok(self.backward_inner(grad_context, grad_depth, false)?.0)
    }

    /// Gradients with respect to `f_img` and the sparse depth map.
    pub fn backward_with_depth(&mut self, grad_context: &Tensor, grad_depth: &Tensor) -> Result<(Tensor, Tensor)> {
        let (g, gs) = self.backward_inner(grad_context, grad_depth, true)?;
        Ok((g, gs.expect("requested")))
    }

    fn backward_inner(&mut self, grad_context: &Tensor, grad_depth: &Tensor, want_depth: bool) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = self.context_head.backward(grad_context, true)?.expect("requested");
        g.add_assign(&self.depth_head.backward(grad_depth, true)?.expect("requested"))?;
        let g = self.trunk_relu.backward(&g)?;
        let g = self.trunk.backward(&g, true)?.expect("requested");
        let parts = g.split_channels(&[self.image_channels, self.encoded_channels])?;
        let ge = self.depth_relu.backward(&parts[1])?;
        let gs = self.depth_encoder.backward(&ge, want_depth)?;
        Ok((parts[0].clone(), gs))
    }
}

impl Parameterized for DepthNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.depth_encoder.visit_params(&join(prefix, "depth_encoder"), f);
        self.trunk.visit_params(&join(prefix, "trunk"), f);
        self.context_head.visit_params(&join(prefix, "context_head"), f);
        self.depth_head.visit_params(&join(prefix, "depth_head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.depth_encoder.visit_params_mut(&join(prefix, "depth_encoder"), f);
        self.trunk.visit_params_mut(&join(prefix, "trunk"), f);
        self.context_head.visit_params_mut(&join(prefix, "context_head"), f);
        self.depth_head.visit_params_mut(&join(prefix, "depth_head"), f);
    }
}

/// Per-pixel softmax over the depth channel.
pub fn depth_softmax(logits: &Tensor) -> Result<Tensor> {
    let (d, h, w) = logits.chw()?;
    let n = h * w;
    let mut out = Tensor::zeros(&[d, h, w]);
    let mut col = vec![0.0f32; d];
    for i in 0..n {
        for (k, c) in col.iter_mut().enumerate() {
            *c = logits.data()[k * n + i];
        }
        for (k, p) in softmax_f64(&col).into_iter().enumerate() {
            out.data_mut()[k * n + i] = p as f32;
        }
    }
    Ok(out)
}

/// Backward of [`depth_softmax`] given its output `probs`.
pub fn depth_softmax_backward(probs: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if probs.shape() != grad.shape() {
        return Err(Error::shape("depth_softmax_backward", probs.shape_string(), grad.shape_string()));
    }
    let (d, h, w) = probs.chw()?;
    let n = h * w;
    let (p, g) = (probs.data(), grad.data());
    let mut out = vec![0.0f32; d * n];
    for i in 0..n {
        let dot: f64 = (0..d).map(|k| p[k * n + i] as f64 * g[k * n + i] as f64).sum();
        for k in 0..d {
            out[k * n + i] = (p[k * n + i] as f64 * (g[k * n + i] as f64 - dot)) as f32;
        }
    }
    Tensor::from_vec(probs.shape(), out)
}

/// Outer product per pixel: `out[d, c, v, u] = prob[d, v, u] * context[c, v, u]`.
pub fn lift(prob: &Tensor, context: &Tensor) -> Result<Tensor> {
    let (d, h, w) = prob.chw()?;
    let (c, hc, wc) = context.chw()?;
    if (h, w) != (hc, wc) {
        return Err(Error::shape("lift", format!("context [Cx{h}x{w}]"), context.shape_string()));
    }
    let n = h * w;
    let mut out = vec![0.0f32; d * c * n];
    for k in 0..d {
        let pk = &prob.data()[k * n..(k + 1) * n];
        for ch in 0..c {
            let ctx = &context.data()[ch * n..(ch + 1) * n];
            let dst = &mut out[(k * c + ch) * n..(k * c + ch + 1) * n];
            for i in 0..n {
                dst[i] = pk[i] * ctx[i];
            }
        }
    }
    Tensor::from_vec(&[d, c, h, w], out)
}

/// Gradients of [`lift`] with respect to `(prob, context)`.
pub fn lift_backward(prob: &Tensor, context: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (d, h, w) = prob.chw()?;
    let (c, _, _) = context.chw()?;
    if grad.shape() != [d, c, h, w] {
        return Err(Error::shape("lift_backward", format!("[{d}x{c}x{h}x{w}]"), grad.shape_string()));
    }
    let n = h * w;
    let (p, x, g) = (prob.data(), context.data(), grad.data());
    let mut gp = vec![0.0f64; d * n];
    let mut gx = vec![0.0f64; c * n];
    for k in 0..d {
        for ch in 0..c {
            let base = (k * c + ch) * n;
            for i in 0..n {
                let gi = g[base + i] as f64;
                gp[k * n + i] += gi * x[ch * n + i] as f64;
                gx[ch * n + i] += gi * p[k * n + i] as f64;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[d, h, w], gp.into_iter().map(|v| v as f32).collect())?,
        Tensor::from_vec(&[c, h, w], gx.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// BEV grid with `nz` height slabs over `[z_min, z_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub bev: GridSpec,
    pub z_min: f64,
    pub z_max: f64,
    pub nz: usize,
}

impl VoxelGrid {
    /// `(z slab, row, col)` of an ego point.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        if !(p[2] >= self.z_min && p[2] < self.z_max) {
            return None;
        }
        let z = (((p[2] - self.z_min) / (self.z_max - self.z_min) * self.nz as f64) as usize).min(self.nz - 1);
        let (row, col) = self.bev.cell_of(p[0], p[1])?;
        Some((z, row, col))
    }
}

/// Precomputed frustum-to-voxel assignment for one calibration and augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGeometry {
    pub voxels: VoxelGrid,
    pub depth_bins: usize,
    pub height: usize,
    pub width: usize,
    /// Per `(d, v, u)`, the target `(z, row, col)` if it lands in the grid.
    pub targets: Vec<Option<(usize, usize, usize)>>,
}

impl SplatGeometry {
    /// Maps every `(d, v, u)` through
    /// `T_lidar_aug * T_ext * A^-1 * T_img_aug^-1 * (u d, v d, d, 1)`.
    pub fn new(
        bins: &DepthBins,
        intrinsics: &CameraIntrinsics,
        t_ext: &RigidTransform,
        t_img_aug: &Matrix4<f64>,
        t_lidar_aug: &Matrix4<f64>,
        voxels: VoxelGrid,
    ) -> Result<Self> {
        let (h, w) = (intrinsics.height, intrinsics.width);
        let mut targets = Vec::with_capacity(bins.count * h * w);
        for k in 0..bins.count {
            let d = bins.center(k);
            for v in 0..h {
                for u in 0..w {
                    let p = transform_pixel_to_ego(u as f64, v as f64, d, intrinsics, t_ext, t_img_aug, t_lidar_aug)?;
                    targets.push(voxels.voxel_of(p));
                }
            }
        }
        Ok(Self {
            voxels,
            depth_bins: bins.count,
            height: h,
            width: w,
            targets,
        })
    }

    fn out_shape(&self, c: usize) -> [usize; 3] {
        [self.voxels.nz * c, self.voxels.bev.height(), self.voxels.bev.width()]
    }
}

/// Sum-pools a `D x C x H x W` frustum into `(nz * C) x H_bev x W_bev`; channel
/// `z * C + c` holds feature `c` of height slab `z`.
pub fn splat(frustum: &Tensor, geo: &SplatGeometry) -> Result<Tensor> {
    let s = frustum.shape();
    if s.len() != 4 || s[0] != geo.depth_bins || s[2] != geo.height || s[3] != geo.width {
        return Err(Error::shape(
            "splat",
            format!("[{}xCx{}x{}]", geo.depth_bins, geo.height, geo.width),
            frustum.shape_string(),
        ));
    }
    let c = s[1];
    let n = geo.height * geo.width;
    let [oc, oh, ow] = geo.out_shape(c);
    let mut acc = vec![0.0f64; oc * oh * ow];
    let f = frustum.data();
    for k in 0..geo.depth_bins {
        for i in 0..n {
            if let Some((z, row, col)) = geo.targets[k * n + i] {
                for ch in 0..c {
                    acc[((z * c + ch) * oh + row) * ow + col] += f[(k * c + ch) * n + i] as f64;
                }
            }
        }
    }
    Tensor::from_vec(&[oc, oh, ow], acc.into_iter().map(|v| v as f32).collect())
}

/// Gradient of [`splat`] with respect to the frustum (a gather).
pub fn splat_backward(grad: &Tensor, geo: &SplatGeometry, channels: usize) -> Result<Tensor> {
    let shape = geo.out_shape(channels);
    if grad.shape() != shape {
        return Err(Error::shape("splat_backward", format!("{shape:?}"), grad.shape_string()));
    }
    let n = geo.height * geo.width;
    let (oh, ow) = (shape[1], shape[2]);
    let mut out = vec![0.0f32; geo.depth_bins * channels * n];
    for k in 0..geo.depth_bins {
        for i in 0..n {
            if let Some((z, row, col)) = geo.targets[k * n + i] {
                for ch in 0..channels {
                    out[(k * channels + ch) * n + i] = grad.data()[((z * channels + ch) * oh + row) * ow + col];
                }
            }
        }
    }
    Tensor::from_vec(&[geo.depth_bins, channels, geo.height, geo.width], out)
}

/// `[f_c, f_l, f_r]` channel concatenation followed by two conv + ReLU layers.
#[derive(Clone, Debug)]
pub struct TrimodalFusion {
    pub convs: ConvStack,
    widths: [usize; 3],
}

impl TrimodalFusion {
    pub fn new(camera: usize, lidar: usize, radar: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            convs: ConvStack::new(&[camera + lidar + radar, out, out], rng)?,
            widths: [camera, lidar, radar],
        })
    }

    pub fn from_stack(convs: ConvStack, widths: [usize; 3]) -> Self {
        Self { convs, widths }
    }

    fn concat(&self, fc: &Tensor, fl: &Tensor, fr: &Tensor) -> Result<Tensor> {
        let grids = [fc.chw()?, fl.chw()?, fr.chw()?];
        let same = grids.iter().all(|g| (g.1, g.2) == (grids[0].1, grids[0].2));
        let widths_ok = grids.iter().zip(&self.widths).all(|(g, w)| g.0 == *w);
        if !same || !widths_ok {
            return Err(Error::shape(
                "fuse_trimodal",
                format!("channels {:?} on one grid", self.widths),
                format!("{} / {} / {}", fc.shape_string(), fl.shape_string(), fr.shape_string()),
            ));
        }
        Tensor::concat_channels(&[fc, fl, fr])
    }

    pub fn forward(&self, fc: &Tensor, fl: &Tensor, fr: &Tensor) -> Result<Tensor> {
        self.convs.forward(&self.concat(fc, fl, fr)?)
    }

    pub fn forward_train(&mut self, fc: &Tensor, fl: &Tensor, fr: &Tensor) -> Result<Tensor> {
        let x = self.concat(fc, fl, fr)?;
        self.convs.forward_train(&x)
    }

    /// Gradients for `(f_c, f_l, f_r)`.
    pub fn backward(&mut self, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let g = self.convs.backward(grad, true)?.expect("requested");
        let mut parts = g.split_channels(&self.widths)?.into_iter();
        Ok((parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap()))
    }
}

impl Parameterized for TrimodalFusion {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.convs.visit_params(prefix, f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.convs.visit_params_mut(prefix, f);
    }
}

/// Free-function form of [`TrimodalFusion::forward`].
pub fn fuse_trimodal(fusion: &TrimodalFusion, fc: &Tensor, fl: &Tensor, fr: &Tensor) -> Result<Tensor> {
    fusion.forward(fc, fl, fr)
}

/// Camera branch settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrcConfig {
    pub bins: DepthBins,
    pub context_channels: usize,
    pub camera_channels: usize,
    /// Image-to-feature-map stride of the image backbone.
    pub feature_stride: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub nz: usize,
}

impl Default for LrcConfig {
    fn default() -> Self {
        Self {
            bins: DepthBins::default(),
            context_channels: 16,
            camera_channels: 32,
            feature_stride: 8,
            z_min: -1.0,
            z_max: 3.0,
            nz: 2,
        }
    }
}

/// The camera path from image features to the fused tri-modal BEV map.
#[derive(Clone, Debug)]
pub struct LrcBranch {
    pub config: LrcConfig,
    pub depthnet: DepthNet,
    pub downsample: Conv2d,
    pub fusion: TrimodalFusion,
}

/// Intermediate tensors of one camera-branch forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LrcOutput {
    pub sparse_depth: Tensor,
    pub context: Tensor,
    pub depth_prob: Tensor,
    pub frustum: Tensor,
    pub pooled: Tensor,
    pub camera_bev: Tensor,
    pub fused: Tensor,
}

impl LrcBranch {
    pub fn new(config: LrcConfig, image_channels: usize, bev_channels: usize, rng: &mut Rng) -> Result<Self> {
        let d = config.bins.count;
        let depthnet = DepthNet::new(image_channels, d, d, config.context_channels, rng)?;
        let downsample = Conv2d::new(config.nz * config.context_channels, config.camera_channels, 3, 2, 1, rng)?;
        let fusion = TrimodalFusion::new(
            config.camera_channels,
            bev_channels,
            bev_channels,
            2 * bev_channels,
            rng,
        )?;
        Ok(Self {
            config,
            depthnet,
            downsample,
            fusion,
        })
    }

    /// Voxel grid at twice the BEV resolution; the downsample conv brings it back.
    pub fn voxel_grid(&self, bev: &GridSpec) -> Result<VoxelGrid> {
        Ok(VoxelGrid {
            bev: GridSpec::new(bev.extent, bev.cell / 2.0)?,
            z_min: self.config.z_min,
            z_max: self.config.z_max,
            nz: self.config.nz,
        })
    }

    /// Runs the branch for one frame given image features and shared BEV features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        f_img: &Tensor,
        lidar: &[LidarPoint],
        intrinsics: &CameraIntrinsics,
        t_ext: &RigidTransform,
        t_lidar_aug: &Matrix4<f64>,
        bev: &GridSpec,
        f_lidar: &Tensor,
        f_radar: &Tensor,
    ) -> Result<LrcOutput> {
        let feat_intr = intrinsics.downscaled(self.config.feature_stride);
        // clouds arrive augmented; undo that to project into the camera
        let inv = t_lidar_aug
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("singular LiDAR augmentation".into()))?;
        let raw: Vec<LidarPoint> = lidar
            .iter()
            .map(|p| {
                let q = inv * nalgebra::Vector4::new(p.x as f64, p.y as f64, p.z as f64, 1.0);
                LidarPoint {
                    x: q[0] as f32,
                    y: q[1] as f32,
                    z: q[2] as f32,
                    intensity: p.intensity,
                }
            })
            .collect();
        let sparse_depth = lidar_to_sparse_depth(&raw, &feat_intr, t_ext, &self.config.bins);
        let (context, logits) = self.depthnet.forward(f_img, &sparse_depth)?;
        let depth_prob = depth_softmax(&logits)?;
        let frustum = lift(&depth_prob, &context)?;
        let geo = SplatGeometry::new(
            &self.config.bins,
            &feat_intr,
            t_ext,
            &Matrix4::identity(),
            t_lidar_aug,
            self.voxel_grid(bev)?,
        )?;
        let pooled = splat(&frustum, &geo)?;
        let camera_bev = crate::nn::relu(&self.downsample.forward(&pooled)?);
        let fused = self.fusion.forward(&camera_bev, f_lidar, f_radar)?;
        Ok(LrcOutput {
            sparse_depth,
            context,
            depth_prob,
            frustum,
            pooled,
            camera_bev,
            fused,
        })
    }
}

impl Parameterized for LrcBranch {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.depthnet.visit_params(&join(prefix, "depthnet"), f);
        self.downsample.visit_params(&join(prefix, "downsample"), f);
        self.fusion.visit_params(&join(prefix, "fusion"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.depthnet.visit_params_mut(&join(prefix, "depthnet"), f);
        self.downsample.visit_params_mut(&join(prefix, "downsample"), f);
        self.fusion.visit_params_mut(&join(prefix, "fusion"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::BevExtent;
    use std::collections::HashMap;

    fn identity_intrinsics(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, w, h).unwrap()
    }

    #[test]
    fn sparse_depth_examples() {
        let bins = DepthBins::default();
        let intr = CameraIntrinsics::new(6.0, 6.0, 6.0, 4.0, 12, 8).unwrap();
        let calib = crate::weathersim::Calibration::forward_camera(96, 64, 1.6);
        let empty = lidar_to_sparse_depth(&[], &intr, &calib.extrinsic, &bins);
        assert!(empty.data().iter().all(|&v| v == 0.0));
        let mid3 = bins.center(3);
        let p = |x: f64| LidarPoint {
            x: x as f32,
            y: 0.0,
            z: 1.5,
            intensity: 0.5,
        };
        let one = lidar_to_sparse_depth(&[p(mid3)], &intr, &calib.extrinsic, &bins);
        assert_eq!(one.sum(), 1.0);
        assert_eq!(one.get3(3, 4, 6), 1.0);
        let two = lidar_to_sparse_depth(&[p(30.0), p(mid3)], &intr, &calib.extrinsic, &bins);
        assert_eq!(two.sum(), 1.0);
        assert_eq!(two.get3(3, 4, 6), 1.0);
    }

    #[test]
    fn zero_depthnet_uniform_distribution() {
        let net = DepthNet::new(8, 24, 24, 16, &mut Rng::new(1)).unwrap().zeroed();
        let (ctx, logits) = net.forward(&Tensor::zeros(&[8, 4, 5]), &Tensor::zeros(&[24, 4, 5])).unwrap();
        assert!(ctx.data().iter().all(|&v| v == 0.0));
        let p = depth_softmax(&logits).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 24.0).abs() < 1e-7));
        assert!(net.forward(&Tensor::zeros(&[8, 4, 5]), &Tensor::zeros(&[24, 4, 6])).is_err());
    }

    #[test]
    fn lift_one_hot_and_uniform() {
        let mut rng = Rng::new(2);
        let ctx = Tensor::uniform(&[5, 3, 4], -1.0, 1.0, &mut rng);
        let mut onehot = Tensor::zeros(&[6, 3, 4]);
        for i in 0..12 {
            onehot.data_mut()[2 * 12 + i] = 1.0;
        }
        let f = lift(&onehot, &ctx).unwrap();
        for k in 0..6 {
            let slice = &f.data()[k * 60..(k + 1) * 60];
            if k == 2 {
                assert_eq!(slice, ctx.data());
            } else {
                assert!(slice.iter().all(|&v| v == 0.0));
            }
        }
        let uni = Tensor::full(&[4, 3, 4], 0.25);
        let f = lift(&uni, &ctx).unwrap();
        for k in 0..4 {
            for (a, b) in f.data()[k * 60..(k + 1) * 60].iter().zip(ctx.data()) {
                assert_eq!(*a, b * 0.25);
            }
        }
    }

    #[test]
    fn splat_identity_calibration_impulse() {
        let bins = DepthBins::new(1.0, 9.0, 4).unwrap();
        let intr = identity_intrinsics(4, 3);
        let cam_is_ego = RigidTransform::identity();
        let voxels = VoxelGrid {
            bev: GridSpec::new(BevExtent::new(0.0, 40.0, 0.0, 40.0).unwrap(), 1.0).unwrap(),
            z_min: 0.0,
            z_max: 10.0,
            nz: 5,
        };
        let eye = Matrix4::identity();
        let geo = SplatGeometry::new(&bins, &intr, &cam_is_ego, &eye, &eye, voxels).unwrap();
        let mut fr = Tensor::zeros(&[4, 2, 3, 4]);
        // bin 2 (center 6), v = 1, u = 3, channel 1
        fr.data_mut()[(2 * 2 + 1) * 12 + 4 + 3] = 2.5;
        let out = splat(&fr, &geo).unwrap();
        let nonzero: Vec<usize> = (0..out.len()).filter(|&i| out.data()[i] != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        // ego point (u d, v d, d) = (18, 6, 6): z slab 3, row 6, col 18
        let (z, row, col) = voxels.voxel_of([18.0, 6.0, 6.0]).unwrap();
        assert_eq!((z, row, col), (3, 6, 18));
        assert_eq!(out.get3(z * 2 + 1, row, col), 2.5);
    }

    #[test]
    fn splat_sums_collisions_and_matches_hash_oracle() {
        let calib = crate::weathersim::Calibration::forward_camera(96, 64, 1.6);
        let intr = calib.intrinsics.downscaled(8);
        let bins = DepthBins::default();
        let bev = GridSpec::new(BevExtent::new(0.0, 32.0, -16.0, 16.0).unwrap(), 1.0).unwrap();
        let voxels = VoxelGrid {
            bev,
            z_min: -1.0,
            z_max: 3.0,
            nz: 2,
        };
        let aug = crate::udma::AugmentationSpec {
            flip_x: true,
            yaw: 0.2,
            scale: 1.03,
        };
        let geo = SplatGeometry::new(&bins, &intr, &calib.extrinsic, &Matrix4::identity(), &aug.matrix(), voxels).unwrap();
        let fr = Tensor::uniform(&[24, 3, 8, 12], -1.0, 1.0, &mut Rng::new(4));
        let out = splat(&fr, &geo).unwrap();
        let mut oracle: HashMap<(usize, usize, usize, usize), f64> = HashMap::new();
        for k in 0..24 {
            for v in 0..8 {
                for u in 0..12 {
                    let p = transform_pixel_to_ego(
                        u as f64,
                        v as f64,
                        bins.center(k),
                        &intr,
                        &calib.extrinsic,
                        &Matrix4::identity(),
                        &aug.matrix(),
                    )
                    .unwrap();
                    if let Some((z, row, col)) = voxels.voxel_of(p) {
                        for c in 0..3 {
                            *oracle.entry((z, c, row, col)).or_default() += fr.data()[((k * 3 + c) * 8 + v) * 12 + u] as f64;
                        }
                    }
                }
            }
        }
        let mut checked = 0;
        for z in 0..2 {
            for c in 0..3 {
                for row in 0..32 {
                    for col in 0..32 {
                        let want = oracle.get(&(z, c, row, col)).copied().unwrap_or(0.0);
                        assert!((out.get3(z * 3 + c, row, col) as f64 - want).abs() < 1e-5);
                        checked += (want != 0.0) as usize;
                    }
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn fusion_order_is_camera_lidar_radar() {
        // first conv passes channel i of the concat to output i, second is identity
        let widths = [2usize, 3, 4];
        let total = 9;
        let mut w1 = Tensor::zeros(&[total, total, 3, 3]);
        let mut w2 = Tensor::zeros(&[total, total, 3, 3]);
        for i in 0..total {
            w1.data_mut()[(i * total + i) * 9 + 4] = 1.0;
            w2.data_mut()[(i * total + i) * 9 + 4] = 1.0;
        }
        let convs = ConvStack::from_convs(vec![
            Conv2d::from_tensors(w1, Tensor::zeros(&[total]), 1, 1).unwrap(),
            Conv2d::from_tensors(w2, Tensor::zeros(&[total]), 1, 1).unwrap(),
        ]);
        let fusion = TrimodalFusion::from_stack(convs, widths);
        let fc = Tensor::full(&[2, 3, 3], 1.0);
        let fl = Tensor::full(&[3, 3, 3], 2.0);
        let fr = Tensor::full(&[4, 3, 3], 3.0);
        let out = fuse_trimodal(&fusion, &fc, &fl, &fr).unwrap();
        let tags: Vec<f32> = (0..total).map(|c| out.get3(c, 1, 1)).collect();
        assert_eq!(tags, vec![1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        let zero_cam = fuse_trimodal(&fusion, &Tensor::zeros(&[2, 3, 3]), &fl, &fr).unwrap();
        assert_eq!(zero_cam.get3(0, 1, 1), 0.0);
        assert_eq!(zero_cam.get3(2, 1, 1), 2.0);
        assert!(fuse_trimodal(&fusion, &fc, &fl, &Tensor::zeros(&[4, 2, 3])).is_err());
    }

    #[test]
    fn branch_runs_end_to_end() {
        let cfg = crate::weathersim::SceneConfig::default();
        let f = crate::weathersim::generate_scene(1, &cfg, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let clf = crate::iwr::WeatherClassifier::new(crate::iwr::IMAGE_SHAPE, &mut rng).unwrap();
        let f_img = clf.trunk(&f.image, 2).unwrap();
        assert_eq!(f_img.shape(), &[32, 8, 12]);
        let branch = LrcBranch::new(LrcConfig::default(), 32, 32, &mut rng).unwrap();
        let fl = Tensor::uniform(&[32, 16, 16], 0.0, 1.0, &mut rng);
        let fr = Tensor::uniform(&[32, 16, 16], 0.0, 1.0, &mut rng);
        let out = branch
            .forward(&f_img, &f.lidar.points, &f.calib.intrinsics, &f.calib.extrinsic, &Matrix4::identity(), &cfg.grid, &fl, &fr)
            .unwrap();
        assert_eq!(out.fused.shape(), &[64, 16, 16]);
        assert_eq!(out.camera_bev.shape(), &[32, 16, 16]);
        assert!(out.sparse_depth.sum() > 0.0);
        let marg: f32 = out.frustum.data().iter().sum::<f32>();
        assert!((marg - out.context.data().iter().sum::<f32>()).abs() < 1e-2);
    }
}
