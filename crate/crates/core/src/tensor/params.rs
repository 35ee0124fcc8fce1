use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`. With `tracked == false` the
    /// parameters are constants, which is what inference wants.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if tracked {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    /// Binds every parameter as a constant except `name`, which is mapped
    /// to the caller's `var`. Used to probe one tensor's gradient.
    pub fn bind_with(&self, tape: &mut Tape, name: &str, var: Var) -> Result<ParamVars> {
        self.get(name)?;
        let mut vars = self.bind(tape, false);
        vars.vars.insert(name.to_string(), var);
        Ok(vars)
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    /// Gradients for each bound parameter, zero-filled where the parameter
    /// did not contribute to the root.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Weights of a two-layer perceptron, as bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: vars.get(&format!("{prefix}.w1"))?,
            b1: vars.get(&format!("{prefix}.b1"))?,
            w2: vars.get(&format!("{prefix}.w2"))?,
            b2: vars.get(&format!("{prefix}.b2"))?,
        })
    }
}

/// Registers `prefix.{w1,b1,w2,b2}` for a `d_in → d_hidden → d_out` perceptron.
pub fn init_mlp<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    rng: &mut R,
) {
    store.insert_normal(
        &format!("{prefix}.w1"),
        &[d_in, d_hidden],
        (1.0 / d_in as f64).sqrt(),
        rng,
    );
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]));
    store.insert_normal(
        &format!("{prefix}.w2"),
        &[d_hidden, d_out],
        (1.0 / d_hidden as f64).sqrt(),
        rng,
    );
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d_out]));
}

/// `gelu(x·W₁ + b₁)·W₂ + b₂`.
pub fn mlp_forward(tape: &mut Tape, x: Var, w: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, w.w2)?;
    tape.add_row(o, w.b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_on(tape: &mut Tape, w1: Tensor, w2: Tensor, d_hidden: usize, d_out: usize) -> MlpVars {
        MlpVars {
            w1: tape.constant(w1),
            b1: tape.constant(Tensor::zeros(&[d_hidden])),
            w2: tape.constant(w2),
            b2: tape.constant(Tensor::zeros(&[d_out])),
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0));
        let w = mlp_on(
            &mut tape,
            Tensor::zeros(&[4, 6]),
            Tensor::zeros(&[6, 2]),
            6,
            2,
        );
        let y = mlp_forward(&mut tape, x, &w).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
    }

    #[test]
    fn identity_weights_pass_large_positive_inputs() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64);
        let x = tape.constant(xv.clone());
        let w = mlp_on(&mut tape, Tensor::eye(3), Tensor::eye(3), 3, 3);
        let y = mlp_forward(&mut tape, x, &w).unwrap();
        assert!(tape.value(y).max_abs_diff(&xv) < 1e-12);
    }

    #[test]
    fn chained_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = mlp_on(
            &mut tape,
            Tensor::zeros(&[4, 6]),
            Tensor::zeros(&[6, 2]),
            6,
            2,
        );
        assert!(mlp_forward(&mut tape, x, &w).is_err());
    }
}
