use super::activation::Relu;
use super::conv::{Conv2d, DepthwiseConv2d};
use super::norm::InstanceNorm;
use super::param::{join, Param, Parameterized};
use super::{Rng, Tensor};
use crate::Result;

/// Depthwise conv -> norm -> pointwise conv -> norm -> ReLU.
#[derive(Clone)]
pub struct DepthwiseSeparableBlock {
    pub depthwise: DepthwiseConv2d,
    pub norm1: InstanceNorm,
    pub pointwise: Conv2d,
    pub norm2: InstanceNorm,
    relu: Relu,
}

impl DepthwiseSeparableBlock {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            depthwise: DepthwiseConv2d::new(cin, 3, stride, 1, rng)?,
            norm1: InstanceNorm::new(cin),
            pointwise: Conv2d::new(cin, cout, 1, 1, 0, rng)?,
            norm2: InstanceNorm::new(cout),
            relu: Relu::default(),
        })
    }

    pub fn from_parts(depthwise: DepthwiseConv2d, norm1: InstanceNorm, pointwise: Conv2d, norm2: InstanceNorm) -> Self {
        Self {
            depthwise,
            norm1,
            pointwise,
            norm2,
            relu: Relu::default(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.depthwise.forward(x)?;
        let y = self.norm1.forward(&y)?;
        let y = self.pointwise.forward(&y)?;
        let y = self.norm2.forward(&y)?;
        Ok(super::relu(&y))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.depthwise.forward_train(x)?;
        let y = self.norm1.forward_train(&y)?;
        let y = self.pointwise.forward_train(&y)?;
        let y = self.norm2.forward_train(&y)?;
        Ok(self.relu.forward_train(&y))
    }

    pub fn backward(&mut self, grad: &Tensor, want_input_grad: bool) -> Result<Option<Tensor>> {
        let g = self.relu.backward(grad)?;
        let g = self.norm2.backward(&g)?;
        let g = self.pointwise.backward(&g, true)?.expect("requested");
        let g = self.norm1.backward(&g)?;
        self.depthwise.backward(&g, want_input_grad)
    }
}

impl Parameterized for DepthwiseSeparableBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.depthwise.visit_params(&join(prefix, "dw"), f);
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.pointwise.visit_params(&join(prefix, "pw"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.depthwise.visit_params_mut(&join(prefix, "dw"), f);
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.pointwise.visit_params_mut(&join(prefix, "pw"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv2d, normalize, relu};

    fn identity_block(c: usize) -> DepthwiseSeparableBlock {
        let mut dw = vec![0.0f32; c * 9];
        for ch in 0..c {
            dw[ch * 9 + 4] = 1.0;
        }
        let mut pw = vec![0.0f32; c * c];
        for ch in 0..c {
            pw[ch * c + ch] = 1.0;
        }
        DepthwiseSeparableBlock::from_parts(
            DepthwiseConv2d::from_tensors(Tensor::from_vec(&[c, 1, 3, 3], dw).unwrap(), Tensor::zeros(&[c]), 1, 1)
                .unwrap(),
            InstanceNorm::new(c),
            Conv2d::from_tensors(Tensor::from_vec(&[c, c, 1, 1], pw).unwrap(), Tensor::zeros(&[c]), 1, 0).unwrap(),
            InstanceNorm::new(c),
        )
    }

    #[test]
    fn identity_parts_give_relu_of_standardized_input() {
        let mut rng = Rng::new(4);
        let raw = Tensor::uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
        let x = normalize(&raw, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        let y = identity_block(3).forward(&x).unwrap();
        assert!(y.max_abs_diff(&relu(&x)) < 1e-4);
    }

    #[test]
    fn negative_input_through_relu_is_zero() {
        let mut rng = Rng::new(5);
        let mut b = DepthwiseSeparableBlock::new(2, 2, 1, &mut rng).unwrap();
        // Force the final normalisation to emit negatives only.
        b.norm2.scale.value.fill(0.0);
        b.norm2.shift.value.fill(-1.0);
        let y = b.forward(&Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composition_matches_two_stage_oracle() {
        let mut rng = Rng::new(6);
        let b = DepthwiseSeparableBlock::new(3, 5, 2, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 8, 7], -1.0, 1.0, &mut rng);
        // depthwise as grouped dense conv with a block-diagonal kernel
        let mut dense = vec![0.0f32; 3 * 3 * 9];
        for ch in 0..3 {
            for t in 0..9 {
                dense[(ch * 3 + ch) * 9 + t] = b.depthwise.weight.value.data()[ch * 9 + t];
            }
        }
        let dense = Tensor::from_vec(&[3, 3, 3, 3], dense).unwrap();
        let s1 = conv2d(&x, &dense, &b.depthwise.bias.value, 2, 1).unwrap();
        let s1 = normalize(&s1, &b.norm1.scale.value, &b.norm1.shift.value).unwrap();
        let s2 = conv2d(&s1, &b.pointwise.weight.value, &b.pointwise.bias.value, 1, 0).unwrap();
        let s2 = relu(&normalize(&s2, &b.norm2.scale.value, &b.norm2.shift.value).unwrap());
        assert!(b.forward(&x).unwrap().max_abs_diff(&s2) < 1e-5);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = Rng::new(7);
        let b = DepthwiseSeparableBlock::new(4, 4, 1, &mut rng).unwrap();
        assert!(b.forward(&Tensor::zeros(&[3, 4, 4])).is_err());
    }
}
