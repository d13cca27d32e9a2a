//! Parameterized layers on top of the tape and their seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Deterministic parameter factory: every tensor is drawn from one seeded
/// stream in creation order and registered under a dotted name.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Run `f` with `name` appended to the parameter prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)));
        let full = self.full_name(name);
        self.store.add(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, Tensor::full(shape, T::from_f64_lossy(value)))
    }

    /// Overwrite every entry of an already registered tensor.
    pub fn fill(&mut self, id: ParamId, value: f64) {
        self.store.get_mut(id).data_mut().fill(T::from_f64_lossy(value));
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<Linear> {
        self.scope(name, |init| {
            let bound = 1.0 / (cin as f64).sqrt();
            Ok(Linear {
                w: init.uniform("weight", &[cin, cout], bound)?,
                b: Some(init.constant("bias", &[cout], 0.0)?),
            })
        })
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<Conv> {
        self.scope(name, |init| {
            let bound = 1.0 / ((k * k * cin) as f64).sqrt();
            Ok(Conv {
                k: init.uniform("weight", &[k, k, cin, cout], bound)?,
                b: init.constant("bias", &[cout], 0.0)?,
            })
        })
    }

    /// Kernel layout `[k, k, cout, cin]` for a transposed convolution.
    pub fn deconv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<Conv> {
        self.scope(name, |init| {
            // stride == kernel: each output pixel sees one tap per input channel
            let bound = 1.0 / (cin as f64).sqrt();
            Ok(Conv {
                k: init.uniform("weight", &[k, k, cout, cin], bound)?,
                b: init.constant("bias", &[cout], 0.0)?,
            })
        })
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Result<LayerNorm> {
        self.scope(name, |init| {
            Ok(LayerNorm {
                gamma: init.constant("weight", &[c], 1.0)?,
                beta: init.constant("bias", &[c], 0.0)?,
            })
        })
    }
}

/// `y = x @ w + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.w.into(), self.b.map(Var::from))
    }
}

/// Dense convolution (or transposed convolution) parameters.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv2d(x, self.k.into(), Some(self.b.into()), stride, pad)
    }

    pub fn forward_transposed<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv_transpose2d(x, self.k.into(), Some(self.b.into()), stride, pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, Some(self.gamma.into()), Some(self.beta.into()), LN_EPS)
    }
}
