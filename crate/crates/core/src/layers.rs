//! Parameter handles for the building blocks shared by both encoder paths.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Weight std for transformer projections.
pub const TRANSFORMER_INIT_STD: f64 = 0.02;

/// `(K, N)` weight plus optional `(N)` bias, applied on the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            init.trunc_normal(&[fan_in, fan_out], TRANSFORMER_INIT_STD),
        );
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Affine normalization parameters (`gamma`, `beta`).
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn layer<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }

    pub fn instance<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.instance_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Same-padded cubic convolution, weight `(Co, Ci, k, k, k)`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        Self {
            weight: store.insert(
                format!("{name}.weight"),
                init.fan_in_uniform(&[cout, cin, kernel, kernel, kernel], fan_in),
            ),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Kernel-2 stride-2 transposed convolution, weight `(Ci, Co, 2, 2, 2)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: store.insert(
                format!("{name}.weight"),
                init.fan_in_uniform(&[cin, cout, 2, 2, 2], cout * 8),
            ),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose3d(x, p.var(self.weight), p.var(self.bias))
    }
}
