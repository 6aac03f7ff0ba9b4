use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Which training stage first unfreezes a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageTag {
    /// FPN, RPN and the detection heads; trained from the first stage.
    Head,
    /// The deepest backbone stage; unfrozen in the second stage.
    Upper,
    /// Shallow backbone stages; only trained end to end.
    Lower,
}

impl StageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::Head => "head",
            StageTag::Upper => "upper",
            StageTag::Lower => "lower",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum_buf: Tensor<T>,
    pub stage_tag: StageTag,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, stage_tag: StageTag) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum_buf = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            momentum_buf,
            stage_tag,
            trainable: true,
        }
    }
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, stage_tag: StageTag) -> ParamId {
        self.params.push(Parameter::new(name, value, stage_tag));
        ParamId(self.params.len() - 1)
    }

    /// He-uniform initialised weight: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn add_he_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        stage_tag: StageTag,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches"), stage_tag)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize], stage_tag: StageTag) -> ParamId {
        self.add(name, Tensor::zeros(shape), stage_tag)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Marks exactly the parameters whose tag is in `stages` as trainable.
    pub fn set_trainable_stages(&mut self, stages: &[StageTag]) {
        for p in &mut self.params {
            p.trainable = stages.contains(&p.stage_tag);
        }
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Converts every value to another precision. Gradients and momentum are reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| {
                    let mut q = Parameter::new(p.name.clone(), p.value.cast(), p.stage_tag);
                    q.trainable = p.trainable;
                    q
                })
                .collect(),
        }
    }
}
