use sha2::{Digest, Sha256};

use super::Tensor;

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn has_grad(&self) -> bool {
        self.grad.data().iter().any(|&g| g != 0.0)
    }
}

/// Anything owning named parameters.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads(m: &mut dyn Parameterized) {
    m.visit_params_mut("", &mut |_, p| p.zero_grad());
}

/// Momentum SGD: `v <- momentum * v + g`, `w <- w - lr * v`.
pub fn sgd_step(m: &mut dyn Parameterized, lr: f32, momentum: f32) {
    m.visit_params_mut("", &mut |_, p| sgd_update(p, lr, momentum));
}

pub fn sgd_update(p: &mut Param, lr: f32, momentum: f32) {
    let Param {
        value,
        grad,
        velocity,
    } = p;
    for ((w, g), v) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

pub fn param_count(m: &dyn Parameterized) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, p| n += p.value.len());
    n
}

/// SHA-256 over parameter names, shapes and values.
pub fn param_hash(m: &dyn Parameterized) -> String {
    let mut h = Sha256::new();
    m.visit_params("", &mut |name, p| {
        h.update(name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(p.value.to_le_bytes());
    });
    hex(&h.finalize())
}

/// Hash of names and shapes only: identical for structurally identical modules.
pub fn architecture_signature(m: &dyn Parameterized) -> String {
    let mut s = String::new();
    m.visit_params("", &mut |name, p| {
        s.push_str(name);
        s.push_str(&p.value.shape_string());
        s.push('\n');
    });
    s
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Multiply every gradient by `s`.
pub fn scale_grads(m: &mut dyn Parameterized, s: f32) {
    m.visit_params_mut("", &mut |_, p| {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
    });
}

pub fn has_any_grad(m: &dyn Parameterized) -> bool {
    let mut any = false;
    m.visit_params("", &mut |_, p| any |= p.has_grad());
    any
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Param);
    impl Parameterized for One {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
            f(&join(prefix, "w"), &self.0);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "w"), &mut self.0);
        }
    }

    fn scalar(w: f32, g: f32) -> One {
        let mut p = Param::new(Tensor::full(&[1], w));
        p.grad.fill(g);
        One(p)
    }

    #[test]
    fn plain_step() {
        let mut m = scalar(1.0, 1.0);
        sgd_step(&mut m, 0.1, 0.0);
        assert!((m.0.value.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        let mut m = scalar(0.0, 1.0);
        sgd_step(&mut m, 1.0, 0.9);
        sgd_step(&mut m, 1.0, 0.9);
        assert!((m.0.value.data()[0] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut m = scalar(0.37, 0.0);
        sgd_step(&mut m, 0.5, 0.9);
        assert_eq!(m.0.value.data()[0], 0.37);
    }

    #[test]
    fn zero_grad_idempotent() {
        let mut m = scalar(1.0, 3.0);
        zero_grads(&mut m);
        let once = m.0.clone();
        zero_grads(&mut m);
        assert_eq!(m.0, once);
        assert_eq!(m.0.grad.shape(), m.0.value.shape());
    }
}
