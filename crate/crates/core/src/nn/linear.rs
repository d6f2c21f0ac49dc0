use super::param::{join, Param, Parameterized};
use super::{Rng, Tensor};
use crate::{Error, Result};

/// Fully connected layer on a flat vector: `y = W x + b`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / inputs as f64).sqrt() as f32;
        Self::from_tensors(
            Tensor::uniform(&[outputs, inputs], -bound, bound, rng),
            Tensor::zeros(&[outputs]),
        )
        .expect("consistent shapes")
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self::from_tensors(Tensor::zeros(&[outputs, inputs]), Tensor::zeros(&[outputs])).expect("consistent shapes")
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        match weight.shape()[..] {
            [o, _] if bias.shape() == [o] => Ok(Self {
                weight: Param::new(weight),
                bias: Param::new(bias),
                cache: None,
            }),
            _ => Err(Error::shape(
                "Linear",
                "weight [out, in] with bias [out]",
                format!("{} / {}", weight.shape_string(), bias.shape_string()),
            )),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (o, i) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        if input.len() != i {
            return Err(Error::shape("linear", format!("{i} inputs"), input.shape_string()));
        }
        let w = self.weight.value.data();
        let x = input.data();
        let out = (0..o)
            .map(|r| {
                let acc: f64 = w[r * i..(r + 1) * i]
                    .iter()
                    .zip(x)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (acc + self.bias.value.data()[r] as f64) as f32
            })
            .collect();
        Tensor::from_vec(&[o], out)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or(Error::MissingCache("Linear"))?;
        let (o, i) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        if grad_out.len() != o {
            return Err(Error::shape("Linear::backward", format!("[{o}]"), grad_out.shape_string()));
        }
        let x = input.data();
        let g = grad_out.data();
        let gw = self.weight.grad.data_mut();
        for r in 0..o {
            for c in 0..i {
                gw[r * i + c] += g[r] * x[c];
            }
        }
        for (d, &v) in self.bias.grad.data_mut().iter_mut().zip(g) {
            *d += v;
        }
        let w = self.weight.value.data();
        let gx = (0..i)
            .map(|c| (0..o).map(|r| w[r * i + c] as f64 * g[r] as f64).sum::<f64>() as f32)
            .collect();
        Tensor::from_vec(input.shape(), gx)
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
