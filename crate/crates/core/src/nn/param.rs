use crate::tensor::Matrix;

/// A trainable tensor together with its gradient and AdamW moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns named parameters.
///
/// `visit_mut` reaches every parameter (checkpoint loading, grad checks).
/// `visit_trainable_mut` reaches only those an optimizer may touch; frozen
/// sub-models override it to visit nothing.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn visit_trainable_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.visit_mut(prefix, f);
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for Param {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self);
    }
}

pub fn zero_grads(model: &mut dyn Parameterized) {
    model.visit_mut("", &mut |_, p| p.zero_grad());
}

pub fn param_count(model: &dyn Parameterized) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, p| n += p.value.data().len());
    n
}

/// CRC32 over the names and bit patterns of every parameter value.
pub fn value_checksum(model: &dyn Parameterized) -> u32 {
    let mut h = crc32fast::Hasher::new();
    model.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(&v.to_bits().to_le_bytes());
        }
    });
    h.finalize()
}

/// Scales all trainable gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(model: &mut dyn Parameterized, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_trainable_mut("", &mut |_, p| {
        sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        model.visit_trainable_mut("", &mut |_, p| p.grad.scale(s));
    }
    norm
}
