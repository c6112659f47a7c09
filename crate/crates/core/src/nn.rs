//! Parameter layouts and initializers for the layers the model is built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::grad::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Std of the truncated normal used for linear weights and bias tables.
pub const LINEAR_INIT_STD: f64 = 0.02;

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) resampled until it lands within two standard deviations.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
    }

    /// Uniform(-b, b) with `b = sqrt(6 / fan_in)` (ReLU gain).
    pub fn kaiming_uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in_uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }
}

/// How a linear layer's weight is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearInit {
    TruncNormal(f64),
    FanInUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scheme: LinearInit,
    ) -> Self {
        let w = match scheme {
            LinearInit::TruncNormal(std) => init.trunc_normal(&[fan_in, fan_out], std),
            LinearInit::FanInUniform => init.fan_in_uniform(&[fan_in, fan_out], fan_in),
        };
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.require(&format!("{name}.w"))?,
            b: store.require(&format!("{name}.b"))?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Dense or depth-wise convolution parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
    pub depthwise: bool,
}

impl ConvIds {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = init.kaiming_uniform(&[cout, cin, k, k], cin * k * k);
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            depthwise: false,
        }
    }

    pub fn add_depthwise<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c: usize,
        k: usize,
    ) -> Self {
        let w = init.kaiming_uniform(&[c, k, k], k * k);
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c])),
            depthwise: true,
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str, depthwise: bool) -> Result<Self> {
        Ok(Self {
            w: store.require(&format!("{name}.w"))?,
            b: store.require(&format!("{name}.b"))?,
            depthwise,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        if self.depthwise {
            g.depthwise_conv2d(x, w, b)
        } else {
            g.conv2d(x, w, b)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl NormIds {
    pub fn add<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.require(&format!("{name}.gamma"))?,
            beta: store.require(&format!("{name}.beta"))?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
    }
}

/// Stack of linear layers with ReLU between consecutive layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<LinearIds>,
}

impl Mlp {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        widths: &[usize],
        scheme: LinearInit,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearIds::add(store, init, &format!("{name}{i}"), w[0], w[1], scheme))
            .collect();
        Self { layers }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| LinearIds::resolve(store, &format!("{name}{i}")))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(g, store, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}
