//! Named parameter blocks shared by the model, the optimizer, the
//! checkpoint format and the gradient checker.

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;

#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    arrays: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter block `{name}`"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.arrays.push(value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        &self.arrays[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        &mut self.arrays[self.index[name]]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[ArrayD<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.arrays
    }

    pub fn num_blocks(&self) -> usize {
        self.names.len()
    }

    pub fn num_elements(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Put every block on a tape as a leaf, in store order.
    pub fn bind(&self, tape: &Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.arrays.iter().map(|a| tape.leaf(a.clone())).collect(),
        }
    }

    /// Convert every block elementwise through `f64` (used to move between
    /// the f32 training representation and the f64 checking one).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| a.mapv(|v| U::from_f64(v.as_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape leaves for one forward pass, parallel to the store's block order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, store: &ParamStore<impl Scalar>, name: &str) -> Var {
        self.vars[store.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Truncated normal init: resample anything outside two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        loop {
            let z: f64 = f64::standard_normal(rng);
            if z.abs() <= 2.0 {
                return T::from_f64(z * std);
            }
        }
    })
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}
