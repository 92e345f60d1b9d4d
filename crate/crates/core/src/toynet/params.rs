use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<usize> {
        let name = name.into();
        if self.index(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!("parameter `{name}` shape {shape:?} vs {} values", value.len())));
        }
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value,
        });
        Ok(self.params.len() - 1)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Values of a parameter that must exist.
    pub fn get(&self, name: &str) -> &[f64] {
        let i = self.index(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        &self.params[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let i = self.index(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        &mut self.params[i].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.index(name).map(|i| self.params.remove(i))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            values: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, name: &str) -> &[f64] {
        let i = self.position(name);
        &self.values[i]
    }

    /// Adds `g` into the gradient of `name`.
    pub fn accumulate(&mut self, name: &str, g: &[f64]) {
        let i = self.position(name);
        for (a, b) in self.values[i].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// First parameter with a non-finite gradient entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.values)
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    fn position(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no gradient slot `{name}`"))
    }
}
