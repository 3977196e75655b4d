use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights of one convolution: `out x in x k x k` kernel plus one bias per output.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub dilation: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros([out_channels, in_channels, kernel, kernel]),
            bias: vec![T::zero(); out_channels],
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        ConvLayer::zeros(self.out_channels(), self.in_channels(), self.kernel(), self.dilation)
    }

    pub fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self
                .bias
                .iter()
                .map(|b| U::from_f64(b.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            dilation: self.dilation,
        }
    }

    pub fn set_zero(&mut self) {
        self.weight.data_mut().fill(T::zero());
        self.bias.fill(T::zero());
    }

    /// Iterates weights then biases as one flat parameter vector.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.weight.data().iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weight.data_mut().iter_mut().chain(self.bias.iter_mut())
    }
}

/// One row of the layer inventory.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub params: usize,
}

/// All learnable weights of a network, keyed by layer name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    layers: BTreeMap<String, ConvLayer<T>>,
}

impl<T> Default for ParameterStore<T> {
    fn default() -> Self {
        ParameterStore {
            layers: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, layer: ConvLayer<T>) -> Result<()> {
        let name = name.into();
        if self.layers.contains_key(&name) {
            return Err(Error::config(name, "layer registered twice"));
        }
        self.layers.insert(name, layer);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ConvLayer<T>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::shape(format!("no layer named `{name}` in parameter store")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ConvLayer<T>> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("no layer named `{name}` in parameter store")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ConvLayer<T>)> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ConvLayer<T>)> {
        self.layers.iter_mut()
    }

    /// Exact number of weight and bias elements.
    pub fn count_params(&self) -> usize {
        self.layers.values().map(ConvLayer::param_count).sum()
    }

    /// Parameters of every layer whose name starts with `prefix`.
    pub fn count_params_with_prefix(&self, prefix: &str) -> usize {
        self.layers
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, l)| l.param_count())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterStore {
            layers: self
                .layers
                .iter()
                .map(|(n, l)| (n.clone(), l.zeros_like()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            layers: self
                .layers
                .iter()
                .map(|(n, l)| (n.clone(), l.cast()))
                .collect(),
        }
    }

    pub fn inventory(&self) -> Vec<LayerSummary> {
        self.layers
            .iter()
            .map(|(name, l)| LayerSummary {
                name: name.clone(),
                out_channels: l.out_channels(),
                in_channels: l.in_channels(),
                kernel: l.kernel(),
                dilation: l.dilation,
                params: l.param_count(),
            })
            .collect()
    }

    /// Adds `other` into `self` element-wise; both stores must share a layout.
    pub fn accumulate(&mut self, other: &ParameterStore<T>) -> Result<()> {
        for (name, layer) in &other.layers {
            let dst = self.get_mut(name)?;
            for (d, s) in dst.values_mut().zip(layer.values()) {
                *d += *s;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.values().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// True when both stores name the same layers with the same shapes.
    pub fn same_layout<U: Real>(&self, other: &ParameterStore<U>) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(other.layers.iter()).all(|((a, la), (b, lb))| {
                a == b && la.weight.shape() == lb.weight.shape() && la.dilation == lb.dilation
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_has_no_parameters() {
        assert_eq!(ParameterStore::<f32>::new().count_params(), 0);
    }

    #[test]
    fn single_conv_count() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("head", ConvLayer::zeros(64, 3, 3, 1)).unwrap();
        assert_eq!(store.count_params(), 1792);
        assert!(store.insert("head", ConvLayer::zeros(1, 1, 1, 1)).is_err());
    }
}
