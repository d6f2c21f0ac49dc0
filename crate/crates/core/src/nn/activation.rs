use super::Tensor;
use crate::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// ReLU that remembers its activation mask for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        relu(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or(Error::MissingCache("Relu"))?;
        if mask.len() != grad_out.len() {
            return Err(Error::shape("Relu::backward", format!("{} elements", mask.len()), grad_out.shape_string()));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::from_vec(grad_out.shape(), data)
    }
}

/// Mean over spatial positions: `CxHxW -> [C]`.
pub fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let n = h * w;
    let out = x
        .data()
        .chunks(n)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect();
    Tensor::from_vec(&[c], out)
}

pub fn global_average_pool_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut data = Vec::with_capacity(grad.len() * n);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g / n as f32, n));
    }
    Tensor::from_vec(&[grad.len(), h, w], data).expect("consistent shape")
}

/// Numerically stable softmax over a flat vector.
pub fn softmax(z: &Tensor) -> Tensor {
    Tensor::from_vec(z.shape(), softmax_f64(z.data()).into_iter().map(|v| v as f32).collect())
        .expect("same shape")
}

pub(crate) fn softmax_f64(z: &[f32]) -> Vec<f64> {
    let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&Tensor::full(&[7], 0.3));
        for &v in p.data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_analytic_pair() {
        let p = softmax(&Tensor::from_vec(&[2], vec![0.0, 3f32.ln()]).unwrap());
        assert!((p.data()[0] - 0.25).abs() < 1e-6);
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let p = softmax(&Tensor::from_vec(&[3], vec![1000.0, 999.0, -1000.0]).unwrap());
        assert!(p.is_finite());
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relu_mask_backward() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 2.0, 0.0, 3.0]).unwrap();
        let mut r = Relu::default();
        let y = r.forward_train(&x);
        assert_eq!(y.data(), &[0.0, 2.0, 0.0, 3.0]);
        let g = r.backward(&Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(r.backward(&Tensor::full(&[4], 1.0)).is_err());
    }

    #[test]
    fn gap_averages() {
        let x = Tensor::from_vec(&[2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]).unwrap();
        assert_eq!(global_average_pool(&x).unwrap().data(), &[2.0, 0.0]);
    }
}
