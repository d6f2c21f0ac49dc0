use super::param::{join, Param, Parameterized};
use super::{Rng, Tensor};
use crate::{Error, Result};

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// `c = a * b + beta * c` for row-major `c` (m x n), arbitrary strides on `a`/`b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above bounds every index matrixmultiply touches
    // for the (m, k, n) problem with the dense strides used by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn im2col(&self, x: &[f32]) -> Vec<f64> {
        let p = self.oh * self.ow;
        let mut cols = vec![0.0f64; self.c * self.k * self.k * p];
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = x[src_row + ix as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.oh * self.ow;
        let mut x = vec![0.0f64; self.c * self.h * self.w];
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[dst_row + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn conv_geometry(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    let (c, h, w) = input.chw()?;
    let (cout, cin, k) = match weight.shape()[..] {
        [o, i, kh, kw] if kh == kw => (o, i, kh),
        _ => return Err(Error::shape("conv2d", "weight [out, in, k, k]", weight.shape_string())),
    };
    if cin != c {
        return Err(Error::shape(
            "conv2d",
            format!("input with {cin} channels for weight {}", weight.shape_string()),
            input.shape_string(),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape("conv2d", format!("bias [{cout}]"), bias.shape_string()));
    }
    if k % 2 == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d needs an odd kernel and stride >= 1 (k={k}, stride={stride})"
        )));
    }
    let (oh, ow) = match (out_extent(h, k, stride, pad), out_extent(w, k, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("spatial extent >= {k} after padding {pad}"),
                input.shape_string(),
            ))
        }
    };
    Ok(Geometry {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    })
}

fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Geometry, Vec<f64>)> {
    let g = conv_geometry(input, weight, bias, stride, pad)?;
    let cout = weight.shape()[0];
    let kk = g.c * g.k * g.k;
    let p = g.oh * g.ow;
    let cols = g.im2col(input.data());
    let w64: Vec<f64> = weight.data().iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f64; cout * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[o] as f64);
    }
    gemm(cout, kk, p, &w64, (kk as isize, 1), &cols, (p as isize, 1), 1.0, &mut out);
    let out = Tensor::from_vec(&[cout, g.oh, g.ow], out.into_iter().map(|v| v as f32).collect())?;
    Ok((out, g, cols))
}

/// 2-D convolution of a `CxHxW` input with a `[out, in, k, k]` kernel.
///
/// Output extent is `floor((H + 2*pad - k) / stride) + 1` per axis.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv_forward(input, weight, bias, stride, pad).map(|(out, _, _)| out)
}

struct ConvCache {
    geometry: Geometry,
    cols: Vec<f64>,
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache>,
}

impl Clone for Conv2d {
    fn clone(&self) -> Self {
        Self {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            stride: self.stride,
            pad: self.pad,
            cache: None,
        }
    }
}

impl std::fmt::Debug for Conv2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Conv2d{:?}/s{}p{}", self.weight.value.shape(), self.stride, self.pad)
    }
}

impl Conv2d {
    /// He-uniform initialised convolution with zero bias.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt() as f32;
        let weight = Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng);
        Self::from_tensors(weight, Tensor::zeros(&[cout]), stride, pad)
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        match weight.shape()[..] {
            [o, _, kh, kw] if kh == kw && kh % 2 == 1 && bias.shape() == [o] => {}
            _ => {
                return Err(Error::shape(
                    "Conv2d",
                    "odd square kernel [out, in, k, k] and bias [out]",
                    format!("{} / {}", weight.shape_string(), bias.shape_string()),
                ))
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            pad,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight.value, &self.bias.value, self.stride, self.pad)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, geometry, cols) = conv_forward(input, &self.weight.value, &self.bias.value, self.stride, self.pad)?;
        self.cache = Some(ConvCache { geometry, cols });
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, grad_out: &Tensor, want_input_grad: bool) -> Result<Option<Tensor>> {
        let cache = self.cache.take().ok_or(Error::MissingCache("Conv2d"))?;
        let g = &cache.geometry;
        let cout = self.out_channels();
        let kk = g.c * g.k * g.k;
        let p = g.oh * g.ow;
        if grad_out.shape() != [cout, g.oh, g.ow] {
            return Err(Error::shape(
                "Conv2d::backward",
                format!("[{cout}x{}x{}]", g.oh, g.ow),
                grad_out.shape_string(),
            ));
        }
        let go: Vec<f64> = grad_out.data().iter().map(|&v| v as f64).collect();

        let mut gw = vec![0.0f64; cout * kk];
        gemm(cout, p, kk, &go, (p as isize, 1), &cache.cols, (1, p as isize), 0.0, &mut gw);
        for (dst, v) in self.weight.grad.data_mut().iter_mut().zip(&gw) {
            *dst += *v as f32;
        }
        for (o, dst) in self.bias.grad.data_mut().iter_mut().enumerate() {
            *dst += go[o * p..(o + 1) * p].iter().sum::<f64>() as f32;
        }

        if !want_input_grad {
            return Ok(None);
        }
        let w64: Vec<f64> = self.weight.value.data().iter().map(|&v| v as f64).collect();
        let mut gcols = vec![0.0f64; kk * p];
        gemm(kk, cout, p, &w64, (1, kk as isize), &go, (p as isize, 1), 0.0, &mut gcols);
        let gx = g.col2im(&gcols);
        Tensor::from_vec(&[g.c, g.h, g.w], gx.into_iter().map(|v| v as f32).collect()).map(Some)
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel convolution with a `[C, 1, k, k]` kernel.
#[derive(Clone)]
pub struct DepthwiseConv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(channels: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (6.0 / (k * k) as f64).sqrt() as f32;
        let weight = Tensor::uniform(&[channels, 1, k, k], -bound, bound, rng);
        Self::from_tensors(weight, Tensor::zeros(&[channels]), stride, pad)
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        match weight.shape()[..] {
            [c, 1, kh, kw] if kh == kw && kh % 2 == 1 && bias.shape() == [c] => {}
            _ => {
                return Err(Error::shape(
                    "DepthwiseConv2d",
                    "odd square kernel [C, 1, k, k] and bias [C]",
                    format!("{} / {}", weight.shape_string(), bias.shape_string()),
                ))
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("depthwise stride must be >= 1".into()));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            pad,
            cache: None,
        })
    }

    fn dims(&self, input: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (c, h, w) = input.chw()?;
        let wc = self.weight.value.shape()[0];
        let k = self.weight.value.shape()[2];
        if c != wc {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input with {wc} channels for weight {}", self.weight.value.shape_string()),
                input.shape_string(),
            ));
        }
        let oh = out_extent(h, k, self.stride, self.pad);
        let ow = out_extent(w, k, self.stride, self.pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((c, h, w, k, oh, ow)),
            _ => Err(Error::shape("depthwise_conv2d", format!("spatial extent >= {k}"), input.shape_string())),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w, k, oh, ow) = self.dims(input)?;
        let x = input.data();
        let wt = self.weight.value.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let b = self.bias.value.data()[ch] as f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ki in 0..k {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[(ch * k + ki) * k + kj] as f64
                                * x[(ch * h + iy as usize) * w + ix as usize] as f64;
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
        Tensor::from_vec(&[c, oh, ow], out)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor, want_input_grad: bool) -> Result<Option<Tensor>> {
        let input = self.cache.take().ok_or(Error::MissingCache("DepthwiseConv2d"))?;
        let (c, h, w, k, oh, ow) = self.dims(&input)?;
        if grad_out.shape() != [c, oh, ow] {
            return Err(Error::shape("DepthwiseConv2d::backward", format!("[{c}x{oh}x{ow}]"), grad_out.shape_string()));
        }
        let x = input.data();
        let go = grad_out.data();
        let wt = self.weight.value.data().to_vec();
        let mut gw = vec![0.0f64; c * k * k];
        let mut gb = vec![0.0f64; c];
        let mut gx = vec![0.0f64; c * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[(ch * oh + oy) * ow + ox] as f64;
                    gb[ch] += g;
                    for ki in 0..k {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ch * h + iy as usize) * w + ix as usize;
                            let wi = (ch * k + ki) * k + kj;
                            gw[wi] += g * x[xi] as f64;
                            gx[xi] += g * wt[wi] as f64;
                        }
                    }
                }
            }
        }
        for (d, v) in self.weight.grad.data_mut().iter_mut().zip(&gw) {
            *d += *v as f32;
        }
        for (d, v) in self.bias.grad.data_mut().iter_mut().zip(&gb) {
            *d += *v as f32;
        }
        if !want_input_grad {
            return Ok(None);
        }
        Tensor::from_vec(&[c, h, w], gx.into_iter().map(|v| v as f32).collect()).map(Some)
    }
}

impl Parameterized for DepthwiseConv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.chw().unwrap();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((oc * c + ic) * k + ki) * k + kj] as f64
                                        * x.get3(ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    out.set3(oc, oy, ox, acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(5);
        let x = Tensor::uniform(&[1, 3, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = Rng::new(6);
        let w = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d(&Tensor::zeros(&[2, 6, 6]), &w, &Tensor::zeros(&[4]), 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = Rng::new(7);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
            let fast = conv2d(&x, &w, &b, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-6);
        }
    }

    #[test]
    fn output_extent_formula() {
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        for (h, stride, pad) in [(7, 2, 1), (8, 2, 1), (5, 1, 0), (9, 3, 2)] {
            let y = conv2d(&Tensor::zeros(&[1, h, h]), &w, &Tensor::zeros(&[1]), stride, pad).unwrap();
            assert_eq!(y.shape()[1], (h + 2 * pad - 3) / stride + 1);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&Tensor::zeros(&[2, 4, 4]), &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1x3x3x3]") && msg.contains("[2x4x4]"), "{msg}");
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Conv2d::from_tensors(Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn linear_without_bias() {
        let mut rng = Rng::new(8);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::zeros(&[3]);
        let x = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let (a, c) = (0.7f32, -1.3f32);
        let mix = Tensor::from_vec(
            &[2, 6, 6],
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + c * q).collect(),
        )
        .unwrap();
        let lhs = conv2d(&mix, &w, &b, 1, 1).unwrap();
        let fx = conv2d(&x, &w, &b, 1, 1).unwrap();
        let fy = conv2d(&y, &w, &b, 1, 1).unwrap();
        let rhs = Tensor::from_vec(
            fx.shape(),
            fx.data().iter().zip(fy.data()).map(|(p, q)| a * p + c * q).collect(),
        )
        .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn backward_requires_forward() {
        let mut rng = Rng::new(9);
        let mut conv = Conv2d::new(1, 1, 3, 1, 1, &mut rng).unwrap();
        assert!(matches!(
            conv.backward(&Tensor::zeros(&[1, 3, 3]), true),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        let mut rng = Rng::new(10);
        let dw = DepthwiseConv2d::new(3, 3, 2, 1, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 7, 6], -1.0, 1.0, &mut rng);
        let y = dw.forward(&x).unwrap();
        for c in 0..3 {
            let xc = Tensor::from_vec(&[1, 7, 6], x.data()[c * 42..(c + 1) * 42].to_vec()).unwrap();
            let wc = Tensor::from_vec(&[1, 1, 3, 3], dw.weight.value.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let yc = naive_conv(&xc, &wc, &Tensor::zeros(&[1]), 2, 1);
            let got = &y.data()[c * yc.len()..(c + 1) * yc.len()];
            for (a, b) in got.iter().zip(yc.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
