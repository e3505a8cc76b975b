use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::Real;

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitSpec {
    /// `U(−√(3/fan_in), √(3/fan_in))`, fan-in = product of all but the last extent.
    UniformFanIn,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Arc<ArrayD<T>>,
    pub init: InitSpec,
}

/// Named, ordered parameter collection owned by a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Allocates and initializes a parameter. Panics on a duplicate name.
    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: InitSpec, rng: &mut R) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            InitSpec::Zeros => ArrayD::zeros(IxDyn(shape)),
            InitSpec::Ones => ArrayD::ones(IxDyn(shape)),
            InitSpec::UniformFanIn => {
                let fan_in: usize = if shape.len() > 1 {
                    shape[..shape.len() - 1].iter().product()
                } else {
                    1
                };
                let limit = (3.0 / fan_in.max(1) as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| T::of(rng.random_range(-limit..limit)))
            }
        };
        self.insert(name, value, init)
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, init: InitSpec) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Arc::new(value),
            init,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Mutable access; copies the array only if a tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<T>) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Little-endian bytes of every parameter in order; used for equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * T::BYTES);
        for p in &self.params {
            for &v in p.value.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }
}
