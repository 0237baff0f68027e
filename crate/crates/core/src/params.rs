//! Flat, named parameter storage shared by the model, optimizer and
//! checkpoint code.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{finite_difference_check, seeded_sample, Distribution, GradCheck, Rng, Scalar, Tape, Tensor, Var};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Fixed parameters (random features, hash rotations) never get updated.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init, trainable: true }
    }

    pub fn fixed(mut self) -> Self {
        self.trainable = false;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    trainable: Vec<bool>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new(), index: Arc::default() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates every spec in order, drawing from `rng`.
    pub fn init(specs: &[ParamSpec], rng: &mut Rng) -> Result<Self> {
        let mut store = Self::new();
        for s in specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
                Init::Normal(std) => seeded_sample(rng, Distribution::Normal { std }, &s.shape)?,
            };
            store.insert(&s.name, t, s.trainable)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        Arc::make_mut(&mut self.index).insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t));
        self.trainable.push(trainable);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| self.tensors[i].as_ref())
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    /// Replaces a tensor in place; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let i = self.position(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(crate::error::shape_err("set", format!("{name}: {:?} vs {:?}", self.tensors[i].shape(), t.shape())));
        }
        self.tensors[i] = Arc::new(t);
        Ok(())
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names.iter().zip(&self.tensors).zip(&self.trainable).map(|((n, t), &tr)| (n.as_str(), t.as_ref(), tr))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Registers every tensor on `tape`; trainable ones as parameters.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| if tr { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars, index: self.index.clone() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

/// A [`ParamStore`] registered on one tape.
pub struct Bound<'t, T: Scalar = f32> {
    vars: Vec<Var<'t, T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Var<'t, T> {
        self.try_get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Substitutes the variable at store position `i`.
    pub fn replace(&mut self, i: usize, v: Var<'t, T>) {
        self.vars[i] = v;
    }
}

/// Finite-difference check of `f` with respect to every trainable tensor of
/// `store`, one tensor at a time. Returns `(name, check)` pairs.
pub fn check_param_gradients<T: Scalar>(
    store: &ParamStore<T>,
    f: impl for<'t> Fn(&Bound<'t, T>) -> Var<'t, T>,
    eps: f64,
) -> Result<Vec<(String, GradCheck)>> {
    let mut out = Vec::new();
    for i in (0..store.len()).filter(|&i| store.is_trainable(i)) {
        let check = finite_difference_check(
            |x| {
                let mut b = store.bind(x.tape());
                b.replace(i, x);
                f(&b)
            },
            store.tensor(i),
            eps,
        )?;
        out.push((store.names[i].clone(), check));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_and_bind() {
        let specs = vec![
            ParamSpec::new("w", &[2, 3], Init::Normal(0.02)),
            ParamSpec::new("b", &[3], Init::Zeros),
            ParamSpec::new("r", &[4], Init::Normal(1.0)).fixed(),
        ];
        let store = ParamStore::<f64>::init(&specs, &mut Rng::new(0)).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.get("b").unwrap().data(), &[0.0; 3]);
        assert!(!store.is_trainable(2));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = bound.get("w").sum().add(bound.get("r").sum());
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(bound.get("w")).data(), &[1.0; 6]);
        assert!(g.get(bound.get("r")).is_none());
    }

    #[test]
    fn rejects_duplicates_and_reshapes() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2]), true).is_err());
        assert!(s.set("a", Tensor::zeros(&[3])).is_err());
        assert!(s.set("a", Tensor::ones(&[2])).is_ok());
    }
}
