//! Small layer helpers shared by the Stage-1 and Stage-2 models.

use rand::Rng;

use crate::autodiff::{AutodiffError, Bound, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = glorot(in_dim, out_dim, rng);
        Self::with_tensors(store, name, w, Tensor::zeros(vec![out_dim]))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_tensors(
            store,
            name,
            Tensor::zeros(vec![in_dim, out_dim]),
            Tensor::zeros(vec![out_dim]),
        )
    }

    fn with_tensors(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Self {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.matmul(p[self.weight])?.add_row(p[self.bias])
    }
}

pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Vector parameter drawn like a `1 × n` Glorot matrix.
pub fn glorot_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (1 + n) as f64).sqrt();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(vec![n], data).expect("vector shape")
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLayer {
    pub first: Linear,
    pub second: Linear,
}

impl TwoLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
            second: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, dims: (usize, usize, usize)) -> Self {
        Self {
            first: Linear::zeros(store, &format!("{name}.0"), dims.0, dims.1),
            second: Linear::zeros(store, &format!("{name}.1"), dims.1, dims.2),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let h = self.first.forward(p, x)?.relu();
        self.second.forward(p, h)
    }
}
