use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::array::NdArray;
use crate::numerics::graph::{Grads, Graph, Var};

/// One named weight tensor. Frozen parameters never receive gradients and
/// are skipped by the optimizer.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: NdArray,
    pub frozen: bool,
}

/// All model weights keyed by dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: NdArray) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&NdArray> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: NdArray) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if !e.value.same_shape(&value) {
            return Err(Error::ShapeMismatch(format!("set_value for {name}")));
        }
        e.value = value;
        Ok(())
    }

    /// Freeze every parameter whose name satisfies the predicate.
    pub fn freeze_matching(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, e) in self.entries.iter_mut() {
            if pred(name) {
                e.frozen = true;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Total scalar count of unfrozen parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Binds store parameters into a graph as leaves, once per name, so a
/// forward pass can be run and its gradients read back by name.
pub struct Session<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a named parameter; `requires_grad` tracks the freeze flag.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let entry = self.store.get(name)?;
        let var = self.g.leaf(entry.value.clone(), !entry.frozen);
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    /// Named gradients for all bound, unfrozen parameters. Missing slots
    /// (parameters not on the path to the loss) come back as zeros.
    pub fn collect_grads(&self, grads: &Grads) -> BTreeMap<String, NdArray> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if self.store.get(name).map(|e| e.frozen).unwrap_or(true) {
                continue;
            }
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| NdArray::zeros(self.g.value(*var).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Truncated normal initialization (resample beyond 2 sigma).
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> NdArray {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    NdArray::from_vec(shape, data).expect("trunc_normal shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        store.insert("a", NdArray::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        store.insert("b", NdArray::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        store.freeze_matching(|n| n == "b");

        let mut sess = Session::new(&store);
        let a = sess.param("a").unwrap();
        let b = sess.param("b").unwrap();
        let s = sess.g.add(a, b).unwrap();
        let loss = sess.g.sum_all(s);
        let grads = sess.g.backward(loss).unwrap();
        let named = sess.collect_grads(&grads);
        assert!(named.contains_key("a"));
        assert!(!named.contains_key("b"));
        assert_eq!(store.trainable_scalars(), 2);
    }

    #[test]
    fn trunc_normal_is_bounded_and_seed_stable() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = trunc_normal(&mut r1, &[64], 0.02);
        let b = trunc_normal(&mut r2, &[64], 0.02);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }
}
