//! A convolution (or transposed convolution) with bias and optional PReLU,
//! the building block shared by both networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, prelu, prelu_backward, ConvSpec, Scalar,
    Tensor,
};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    name: String,
    spec: ConvSpec,
    transposed: bool,
    pub weight: Tensor<T>,
    /// Shape (1, out, 1, 1).
    pub bias: Tensor<T>,
    /// Per-channel PReLU slopes, shape (1, out, 1, 1).
    pub slope: Option<Tensor<T>>,
}

/// Activations a layer keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    pub input: Tensor<T>,
    /// Pre-activation, kept only when the layer has a PReLU.
    pub preact: Option<Tensor<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    /// He-normal weights (std √(2 / fan-in)), zero bias, slopes 0.25.
    pub fn new(
        name: impl Into<String>,
        spec: ConvSpec,
        transposed: bool,
        activation: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = if transposed {
            [spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w]
        } else {
            [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w]
        };
        let fan_in = if transposed {
            // Inputs contributing to one output pixel.
            spec.in_channels
                * spec.kernel_h.div_ceil(spec.stride_h)
                * spec.kernel_w.div_ceil(spec.stride_w)
        } else {
            spec.in_channels * spec.kernel_h * spec.kernel_w
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weight = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        let out = [1, spec.out_channels, 1, 1];
        ConvLayer {
            name: name.into(),
            spec,
            transposed,
            weight,
            bias: Tensor::zeros(out),
            slope: activation.then(|| Tensor::full(out, T::lit(PRELU_INIT))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    pub fn has_activation(&self) -> bool {
        self.slope.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.slope.as_ref().map_or(0, Tensor::len)
    }

    fn linear(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.transposed {
            deconv2d(x, &self.weight, Some(self.bias.data()), &self.spec)
        } else {
            conv2d(x, &self.weight, Some(self.bias.data()), &self.spec)
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.linear(x)?;
        match &self.slope {
            Some(a) => prelu(&z, a.data()),
            None => Ok(z),
        }
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        let z = self.linear(x)?;
        let (y, preact) = match &self.slope {
            Some(a) => (prelu(&z, a.data())?, Some(z)),
            None => (z, None),
        };
        Ok((
            y,
            LayerCache {
                input: x.clone(),
                preact,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &mut self,
        cache: &LayerCache<T>,
        grad_out: &Tensor<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let grad_z = match (&self.slope, &cache.preact) {
            (Some(a), Some(z)) => {
                let g = prelu_backward(z, a.data(), grad_out)?;
                let slopes = g.slopes;
                self.slope.as_mut().expect("checked").accumulate_grad(&slopes);
                g.input
            }
            (None, None) => grad_out.clone(),
            _ => {
                return Err(Error::Invalid(format!(
                    "cache of layer `{}` does not match its activation",
                    self.name
                )))
            }
        };
        let g = if self.transposed {
            deconv2d_backward(&cache.input, &self.weight, &self.spec, &grad_z, need_input, true)?
        } else {
            conv2d_backward(&cache.input, &self.weight, &self.spec, &grad_z, need_input, true)?
        };
        self.weight.accumulate_grad(&g.weights);
        self.bias.accumulate_grad(&g.bias);
        Ok(g.input)
    }

    /// Trainable tensors with their checkpoint names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = vec![
            (format!("{}/weight", self.name), &mut self.weight),
            (format!("{}/bias", self.name), &mut self.bias),
        ];
        if let Some(s) = self.slope.as_mut() {
            v.push((format!("{}/slope", self.name), s));
        }
        v
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![
            (format!("{}/weight", self.name), &self.weight),
            (format!("{}/bias", self.name), &self.bias),
        ];
        if let Some(s) = self.slope.as_ref() {
            v.push((format!("{}/slope", self.name), s));
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            name: self.name.clone(),
            spec: self.spec,
            transposed: self.transposed,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            slope: self.slope.as_ref().map(Tensor::cast),
        }
    }
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shared plumbing for models made of [`ConvLayer`]s.
pub trait LayerStack<T: Scalar> {
    fn layers(&self) -> Vec<&ConvLayer<T>>;
    fn layers_mut(&mut self) -> Vec<&mut ConvLayer<T>>;

    /// Number of trainable scalars.
    fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers().into_iter().flat_map(|l| l.params()).collect()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn scale_grad(&mut self, factor: T) {
        for (_, p) in self.params_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<T> = g.iter().map(|&v| v * factor).collect();
                p.grad_mut().copy_from_slice(&scaled);
            }
        }
    }

    /// Order-sensitive hash of all parameter bits.
    fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in self.params() {
            name.hash(&mut h);
            for v in p.data() {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_scale() {
        let mut rng = seeded_rng(1, 0);
        let l: ConvLayer<f64> = ConvLayer::new("t", ConvSpec::new(64, 64, 3, 1, 1), false, true, &mut rng);
        let n = l.weight.len() as f64;
        let var = l.weight.data().iter().map(|v| v * v).sum::<f64>() / n;
        let want = 2.0 / (64.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
        assert!(l.slope.as_ref().unwrap().data().iter().all(|&a| a == 0.25));
        assert_eq!(l.param_count(), 64 * 64 * 9 + 64 + 64);
    }

    #[test]
    fn param_names() {
        let mut rng = seeded_rng(1, 0);
        let mut l: ConvLayer<f32> = ConvLayer::new("vdsr/conv01", ConvSpec::new(1, 4, 3, 1, 1), false, true, &mut rng);
        let names: Vec<String> = l.params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["vdsr/conv01/weight", "vdsr/conv01/bias", "vdsr/conv01/slope"]);
    }
}
