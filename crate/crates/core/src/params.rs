use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};

/// Named matrices, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.get(name).ok_or_else(|| Error::Contract(format!("missing tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    /// Subset containing only the given names.
    pub fn select<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for n in names {
            out.insert(n, self.require(n)?.clone());
        }
        Ok(out)
    }

    /// Overwrites (or adds) every tensor of `other`.
    pub fn update_from(&mut self, other: &ParamSet) {
        for (n, v) in other.iter() {
            self.tensors.insert(n.clone(), v.clone());
        }
    }

    /// Errors unless both sets have the same names and shapes.
    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Contract(format!("parameter sets differ in size: {} vs {}", self.len(), other.len())));
        }
        for ((a, x), (b, y)) in self.iter().zip(other.iter()) {
            if a != b || x.dim() != y.dim() {
                return Err(Error::Contract(format!("parameter mismatch: `{a}` {:?} vs `{b}` {:?}", x.dim(), y.dim())));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

impl FromIterator<(String, Array2<f64>)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Array2<f64>)>>(iter: I) -> Self {
        ParamSet { tensors: iter.into_iter().collect() }
    }
}

/// Graph variables bound to parameter names for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Binds every tensor of `set`: names accepted by `trainable` become
    /// gradient leaves, the rest constants. Returns the leaves in name order.
    pub fn bind(set: &ParamSet, trainable: impl Fn(&str) -> bool) -> (Bound, Vec<(String, Var)>) {
        let mut b = Bound::default();
        let mut leaves = Vec::new();
        for (n, v) in set.iter() {
            let var = if trainable(n) { Var::param(v.clone()) } else { Var::constant(v.clone()) };
            if var.requires_grad() {
                leaves.push((n.clone(), var.clone()));
            }
            b.vars.insert(n.clone(), var);
        }
        (b, leaves)
    }

    pub fn constants(set: &ParamSet) -> Bound {
        Self::bind(set, |_| false).0
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::Contract(format!("tensor `{name}` is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..=scale))
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, scale)
}
