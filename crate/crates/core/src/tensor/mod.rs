//! Minimal `f64` tensor machinery: an autodiff tape, a named parameter
//! store, and an Adam optimizer.

pub mod graph;
pub mod kernels;

pub use graph::{Arr, Graph, Id};

use ndarray::IxDyn;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors. Registration order is
/// stable, which the optimizer and checkpoint format rely on.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arr)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Standard normal sample via Box-Muller on a seeded stream.
pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Arr {
    use rand::Rng;
    Arr::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Adam over a fixed subset of a [`ParamStore`].
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Timestep, incremented once per `step` call.
    pub t: u64,
    params: Vec<ParamId>,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, beta1: f64, beta2: f64) -> Self {
        let m = params
            .iter()
            .map(|&p| Arr::zeros(IxDyn(store.get(p).shape())))
            .collect();
        let v = params
            .iter()
            .map(|&p| Arr::zeros(IxDyn(store.get(p).shape())))
            .collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            params,
            m,
            v,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Apply one update. `grads[i]` pairs with `self.params()[i]`; `None`
    /// entries (parameters untouched this step) are treated as zero grads.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, grads: &[Option<Arr>]) {
        assert_eq!(grads.len(), self.params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, &pid) in self.params.iter().enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Arr::zeros(IxDyn(store.get(pid).shape()));
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = store.get_mut(pid);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Arr, &Arr)> {
        self.params
            .iter()
            .copied()
            .zip(self.m.iter().zip(self.v.iter()))
            .map(|(p, (m, v))| (p, m, v))
    }

    /// Restore optimizer state from a checkpoint.
    pub fn restore(&mut self, t: u64, m: Vec<Arr>, v: Vec<Arr>) {
        assert_eq!(m.len(), self.params.len());
        assert_eq!(v.len(), self.params.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
