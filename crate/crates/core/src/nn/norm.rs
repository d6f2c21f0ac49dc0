use super::param::{join, Param, Parameterized};
use super::Tensor;
use crate::{Error, Result};

/// Variance floor added before the square root.
pub const NORM_EPS: f64 = 1e-5;

fn check(input: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = input.chw()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "normalize",
            format!("scale/shift [{c}] for input {}", input.shape_string()),
            format!("{} / {}", scale.shape_string(), shift.shape_string()),
        ));
    }
    Ok((c, h * w))
}

fn standardize(input: &Tensor, c: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let x = input.data();
    let mut xhat = vec![0.0f64; c * n];
    let mut inv_std = vec![0.0f64; c];
    for ch in 0..c {
        let xs = &x[ch * n..(ch + 1) * n];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = is;
        for (dst, &v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
            *dst = (v as f64 - mean) * is;
        }
    }
    (xhat, inv_std)
}

fn affine(xhat: &[f64], scale: &Tensor, shift: &Tensor, shape: &[usize], n: usize) -> Result<Tensor> {
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / n;
            (v * scale.data()[ch] as f64 + shift.data()[ch] as f64) as f32
        })
        .collect();
    Tensor::from_vec(shape, out)
}

/// Per-channel instance normalisation over spatial positions followed by an affine map.
pub fn normalize(input: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (c, n) = check(input, scale, shift)?;
    let (xhat, _) = standardize(input, c, n);
    affine(&xhat, scale, shift, input.shape(), n)
}

#[derive(Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Clone)]
pub struct InstanceNorm {
    pub scale: Param,
    pub shift: Param,
    cache: Option<NormCache>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Param::new(Tensor::full(&[channels], 1.0)),
            shift: Param::new(Tensor::zeros(&[channels])),
            cache: None,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        normalize(input, &self.scale.value, &self.shift.value)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let (c, n) = check(input, &self.scale.value, &self.shift.value)?;
        let (xhat, inv_std) = standardize(input, c, n);
        let out = affine(&xhat, &self.scale.value, &self.shift.value, input.shape(), n)?;
        self.cache = Some(NormCache {
            xhat,
            inv_std,
            shape: input.shape().to_vec(),
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::MissingCache("InstanceNorm"))?;
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::shape(
                "InstanceNorm::backward",
                super::tensor::shape_str(&cache.shape),
                grad_out.shape_string(),
            ));
        }
        let c = cache.shape[0];
        let n = cache.shape[1] * cache.shape[2];
        let go = grad_out.data();
        let mut gx = vec![0.0f32; c * n];
        for ch in 0..c {
            let gamma = self.scale.value.data()[ch] as f64;
            let xh = &cache.xhat[ch * n..(ch + 1) * n];
            let g = &go[ch * n..(ch + 1) * n];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&gi, &xi) in g.iter().zip(xh) {
                sum_g += gi as f64;
                sum_gx += gi as f64 * xi;
            }
            self.shift.grad.data_mut()[ch] += sum_g as f32;
            self.scale.grad.data_mut()[ch] += sum_gx as f32;
            // dxhat = gamma * g; dx = inv_std / n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
            let k = gamma * cache.inv_std[ch] / n as f64;
            for i in 0..n {
                gx[ch * n + i] = (k * (n as f64 * g[i] as f64 - sum_g - xh[i] * sum_gx)) as f32;
            }
        }
        Tensor::from_vec(&cache.shape, gx)
    }
}

impl Parameterized for InstanceNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}
