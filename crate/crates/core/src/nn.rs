//! Parameter containers generic over their leaf type.
//!
//! The same struct holds concrete weights (`Mat`), graph handles (`Var`) or
//! gradients, so binding parameters to a [`Graph`] and reading gradients back
//! are both a `map`.

use rand::Rng;
use rand_distr::StandardNormal;

use std::path::Path;

use crate::autodiff::{Graph, Grads, Mat, Var};
use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;

/// Callback over named leaves.
pub type MapFn<'a, T, U> = dyn FnMut(&str, &T) -> U + 'a;
pub type VisitMutFn<'a, T> = dyn FnMut(&str, &mut T) + 'a;

/// A tree of named parameter leaves, visited in a fixed order.
pub trait ParamTree<T> {
    type Mapped<U>;
    fn map<U>(&self, prefix: &str, f: &mut MapFn<'_, T, U>) -> Self::Mapped<U>;
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>);

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.map(prefix, &mut |n, t| f(n, t));
    }
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Dense layer `x w + b`, `w` is `in x out`, `b` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> ParamTree<T> for Linear<T> {
    type Mapped<U> = Linear<U>;
    fn map<U>(&self, prefix: &str, f: &mut MapFn<'_, T, U>) -> Linear<U> {
        Linear {
            w: f(&join_name(prefix, "w"), &self.w),
            b: f(&join_name(prefix, "b"), &self.b),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        f(&join_name(prefix, "w"), &mut self.w);
        f(&join_name(prefix, "b"), &mut self.b);
    }
}

impl Linear<Mat> {
    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Linear {
            w: randn(rng, fan_in, fan_out, std),
            b: Mat::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Mat::zeros((fan_in, fan_out)),
            b: Mat::zeros((1, fan_out)),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.matmul(x, self.w);
        g.add_row(h, self.b)
    }
}

/// Layer normalization with a learnable per-channel scale and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> ParamTree<T> for Norm<T> {
    type Mapped<U> = Norm<U>;
    fn map<U>(&self, prefix: &str, f: &mut MapFn<'_, T, U>) -> Norm<U> {
        Norm {
            gamma: f(&join_name(prefix, "gamma"), &self.gamma),
            beta: f(&join_name(prefix, "beta"), &self.beta),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
    }
}

impl Norm<Mat> {
    pub fn identity(dim: usize) -> Self {
        Norm {
            gamma: Mat::ones((1, dim)),
            beta: Mat::zeros((1, dim)),
        }
    }
}

impl Norm<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.layer_norm(x);
        let h = g.mul_row(h, self.gamma);
        g.add_row(h, self.beta)
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;
    fn map<U>(&self, prefix: &str, f: &mut MapFn<'_, T, U>) -> Self::Mapped<U> {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.map(&join_name(prefix, &i.to_string()), f))
            .collect()
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join_name(prefix, &i.to_string()), f);
        }
    }
}

pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Binds every leaf of a weight tree as a graph leaf.
pub fn bind<P: ParamTree<Mat>>(g: &mut Graph, params: &P) -> P::Mapped<Var> {
    params.map("", &mut |_, m| g.leaf(m.clone()))
}

/// Gradients for every bound leaf, zeros where the output did not depend on it.
pub fn collect_grads<P: ParamTree<Var>>(g: &Graph, grads: &Grads, vars: &P) -> P::Mapped<Mat> {
    vars.map("", &mut |_, &v| grads.get_or_zeros(v, g.shape(v)))
}

/// Named leaves in visiting order.
pub fn named_leaves<P: ParamTree<Mat>>(params: &P) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    params.visit("", &mut |n, m| out.push((n.to_string(), m.clone())));
    out
}

pub fn all_finite<P: ParamTree<Mat>>(params: &P) -> bool {
    let mut ok = true;
    params.visit("", &mut |_, m| ok &= m.iter().all(|x| x.is_finite()));
    ok
}

/// Stores every leaf as a 2-D tensor named `prefix.leaf`.
pub fn put_tree<P: ParamTree<Mat>>(tf: &mut TensorFile, prefix: &str, params: &P) {
    params.visit(prefix, &mut |name, m| {
        tf.insert(name, vec![m.nrows(), m.ncols()], m.iter().copied().collect());
    });
}

/// Fills `params` (already shaped) from tensors written by [`put_tree`], removing them from `tf`.
pub fn take_tree<P: ParamTree<Mat>>(
    tf: &mut TensorFile,
    prefix: &str,
    params: &mut P,
    path: &Path,
) -> Result<()> {
    let mut err = None;
    params.visit_mut(prefix, &mut |name, m| {
        if err.is_some() {
            return;
        }
        match tf.take(name, path) {
            Ok((shape, data)) if shape == [m.nrows(), m.ncols()] => {
                *m = Mat::from_shape_vec((shape[0], shape[1]), data).expect("shape checked");
            }
            Ok((shape, _)) => {
                err = Some(Error::format(
                    path,
                    format!("tensor `{name}` has shape {shape:?}, expected {:?}", m.dim()),
                ))
            }
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}
