//! Named trainable parameters.
//!
//! Model construction registers every parameter through a [`ParamSink`]. The
//! real store allocates and initializes values from a seeded stream; the
//! [`ShapeCounter`] only records names and extents, which is how parameter
//! counts stay a pure function of the configuration.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

pub trait ParamSink {
    /// Registers a parameter. `decay` marks it for weight decay.
    fn register(&mut self, name: String, shape: &[usize], init: Init, decay: bool) -> ParamId;
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    entries: Vec<Param<F>>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Result<&Param<F>> {
        self.entries.get(id.0).ok_or(Error::UnknownParam { index: id.0 })
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let entry = self.entries.get_mut(id.0).ok_or(Error::UnknownParam { index: id.0 })?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                left: entry.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.entries.iter_mut()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Tensor<F> {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, F::one()),
            Init::TruncNormal(std) => {
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                while data.len() < numel {
                    let z: f64 = self.rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        data.push(F::of(z * std));
                    }
                }
                Tensor::new(shape.to_vec(), data).expect("finite init")
            }
        }
    }
}

impl<F: Scalar> ParamSink for ParamStore<F> {
    fn register(&mut self, name: String, shape: &[usize], init: Init, decay: bool) -> ParamId {
        let value = self.sample(shape, init);
        self.entries.push(Param { name, value, decay });
        ParamId(self.entries.len() - 1)
    }
}

/// Records parameter names and extents without allocating values.
#[derive(Debug, Clone, Default)]
pub struct ShapeCounter {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeCounter {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl ParamSink for ShapeCounter {
    fn register(&mut self, name: String, shape: &[usize], _init: Init, _decay: bool) -> ParamId {
        self.entries.push((name, shape.to_vec()));
        ParamId(self.entries.len() - 1)
    }
}

/// One optional gradient per parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn empty(len: usize) -> Self {
        let mut grads = Vec::with_capacity(len);
        grads.resize_with(len, || None);
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor<F>) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Elementwise `self += other`, in parameter order.
    pub fn add_assign(&mut self, other: &Self) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<F>>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}
