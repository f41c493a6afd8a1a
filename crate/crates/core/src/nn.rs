//! Named parameter storage and the glue that binds parameters onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Mat, Tape, Var};

/// Rounds to the nearest `f32`. Parameters are always kept `f32`-exact so
/// checkpoints round-trip bitwise.
#[inline]
pub fn to_f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Ordered, name-addressable collection of weight matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`. Values are rounded to `f32` precision.
    pub fn insert(&mut self, name: impl Into<String>, mut value: Mat) {
        let name = name.into();
        for x in value.data.iter_mut() {
            *x = to_f32_exact(*x);
        }
        match self.index.get(&name) {
            Some(&i) => self.params[i].value = value,
            None => {
                self.index.insert(name.clone(), self.params.len());
                self.params.push(Param { name, value });
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total scalar count of parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|p| pred(&p.name)).map(|p| p.value.data.len()).sum()
    }

    /// SHA-256 over names, shapes and raw bits of the selected parameters.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            h.update(p.name.as_bytes());
            h.update((p.value.rows as u64).to_le_bytes());
            h.update((p.value.cols as u64).to_le_bytes());
            for x in &p.value.data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every parameter of `other` whose name starts with `prefix`.
    /// Returns the number of arrays copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for p in other.iter().filter(|p| p.name.starts_with(prefix)) {
            self.insert(p.name.clone(), p.value.clone());
            n += 1;
        }
        n
    }
}

/// Which parameters receive gradients in a given run.
#[derive(Clone, Debug)]
pub struct TrainMask {
    flags: Vec<bool>,
}

impl TrainMask {
    pub fn new(store: &ParamStore, pred: impl Fn(&str) -> bool) -> Self {
        Self { flags: store.iter().map(|p| pred(&p.name)).collect() }
    }

    pub fn none(store: &ParamStore) -> Self {
        Self { flags: vec![false; store.len()] }
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.flags.get(idx).copied().unwrap_or(false)
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        store.iter().zip(&self.flags).filter(|(_, &f)| f).map(|(p, _)| p.value.data.len()).sum()
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
/// Non-trainable slots stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub grads: Vec<Option<Mat>>,
}

impl GradBuffer {
    pub fn empty(len: usize) -> Self {
        Self { grads: vec![None; len] }
    }

    /// Accumulates `other` into `self` in slot order.
    pub fn accumulate(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn get<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Mat> {
        store.index_of(name).and_then(|i| self.grads[i].as_ref())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::is_finite)
    }
}

/// A tape plus lazily-bound parameter leaves.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    mask: &'a TrainMask,
    bound: HashMap<usize, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mask: &'a TrainMask) -> Self {
        Self { tape: Tape::new(), store, mask, bound: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for parameter `name`, created on first use.
    ///
    /// Panics if the parameter does not exist; model construction and
    /// checkpoint loading guarantee the names.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        if let Some(&v) = self.bound.get(&idx) {
            return v;
        }
        let value = self.store.params[idx].value.clone();
        let v = if self.mask.is_trainable(idx) { self.tape.variable(value) } else { self.tape.constant(value) };
        self.bound.insert(idx, v);
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.tape.value(v)
    }

    /// Backpropagates from `loss` and gathers parameter gradients.
    pub fn param_grads(&self, loss: Var) -> GradBuffer {
        let mut grads: Grads = self.tape.backward(loss);
        let mut out = GradBuffer::empty(self.store.len());
        for (&idx, &v) in &self.bound {
            if self.mask.is_trainable(idx) {
                let shape = self.store.params[idx].value.shape();
                out.grads[idx] = Some(grads.take(v).unwrap_or_else(|| Mat::zeros(shape.0, shape.1)));
            }
        }
        out
    }

    /// `x W + b` with `W` stored as `{prefix}.weight` (in×out) and `b` as `{prefix}.bias` (1×out).
    pub fn linear(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    /// Row-wise layer norm with affine `{prefix}.gamma` / `{prefix}.beta`.
    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Var {
        let g = self.param(&format!("{prefix}.gamma"));
        let b = self.param(&format!("{prefix}.beta"));
        let n = self.tape.layer_norm_rows(x, 1e-5);
        let s = self.tape.mul_row(n, g);
        self.tape.add_row(s, b)
    }
}

/// Gaussian init with standard deviation `std`.
pub fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect(),
    )
}

/// Registers `{prefix}.weight` / `{prefix}.bias` with scaled-normal weights and zero bias.
pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    let std = (1.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), normal_mat(rng, fan_in, fan_out, std));
    store.insert(format!("{prefix}.bias"), Mat::zeros(1, fan_out));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gamma"), Mat::filled(1, width, 1.0));
    store.insert(format!("{prefix}.beta"), Mat::zeros(1, width));
}
