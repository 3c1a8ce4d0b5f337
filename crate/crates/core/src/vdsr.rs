//! VDSR residual enhancer: a plain stack of 3×3 convolutions predicting a
//! correction that is added to the LFCR estimate.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::layer::{seeded_rng, ConvLayer, LayerCache, LayerStack};
use crate::tensor::gradcheck::SignatureHasher;
use crate::tensor::{ConvSpec, Scalar, Tensor};

pub const VDSR_DEPTH: usize = 20;
pub const VDSR_WIDTH: usize = 64;

const INIT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct VdsrModel<T = f32> {
    layers: Vec<ConvLayer<T>>,
}

#[derive(Clone, Debug)]
pub struct VdsrCache<T> {
    layers: Vec<LayerCache<T>>,
}

pub fn conv_layer_name(i: usize) -> String {
    format!("vdsr/conv{:02}", i + 1)
}

fn layer_spec(i: usize, depth: usize) -> ConvSpec {
    let cin = if i == 0 { 1 } else { VDSR_WIDTH };
    let cout = if i + 1 == depth { 1 } else { VDSR_WIDTH };
    ConvSpec::new(cin, cout, 3, 1, 1)
}

impl<T: Scalar> VdsrModel<T> {
    pub fn build(seed: u64) -> Self {
        Self::with_depth(VDSR_DEPTH, seed).expect("default depth is valid")
    }

    pub fn with_depth(depth: usize, seed: u64) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Invalid(format!("VDSR depth must be at least 2, got {depth}")));
        }
        let mut rng = seeded_rng(seed, INIT_STREAM);
        let layers = (0..depth)
            .map(|i| {
                ConvLayer::new(conv_layer_name(i), layer_spec(i, depth), false, i + 1 < depth, &mut rng)
            })
            .collect();
        Ok(VdsrModel { layers })
    }

    pub fn from_layers(layers: Vec<ConvLayer<T>>) -> Result<Self> {
        let depth = layers.len();
        if depth < 2 {
            return Err(Error::Incompatible(format!("VDSR needs at least 2 layers, got {depth}")));
        }
        for (i, l) in layers.iter().enumerate() {
            let want = layer_spec(i, depth);
            if *l.spec() != want
                || l.is_transposed()
                || l.has_activation() != (i + 1 < depth)
                || l.name() != conv_layer_name(i)
                || l.weight.shape() != [want.out_channels, want.in_channels, 3, 3]
            {
                return Err(Error::Incompatible(format!(
                    "layer `{}` does not match the VDSR layout",
                    l.name()
                )));
            }
        }
        Ok(VdsrModel { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Side length of the input window one output pixel depends on.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.depth()
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut ConvLayer<T> {
        &mut self.layers[i]
    }

    /// Predicted residual for an (N, 1, H, W) batch.
    pub fn residual(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn residual_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, VdsrCache<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.depth());
        let mut h = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward_cached(&h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, VdsrCache { layers: caches }))
    }

    /// Returns `(r, f̂ + r)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let r = self.residual(x)?;
        let mut out = x.clone();
        for (o, v) in out.data_mut().iter_mut().zip(r.data()) {
            *o += *v;
        }
        Ok((r, out))
    }

    /// Backward through the residual branch only; the identity path adds
    /// `grad_r` to the returned input gradient when the caller needs it.
    pub fn backward(
        &mut self,
        cache: &VdsrCache<T>,
        grad_r: &Tensor<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut g = grad_r.clone();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            match l.backward(&cache.layers[i], &g, i > 0 || need_input)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    pub fn branch_signature(cache: &VdsrCache<T>) -> u64 {
        let mut h = SignatureHasher::default();
        for c in &cache.layers {
            if let Some(z) = &c.preact {
                let v: Vec<f64> = z.data().iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
                h.signs(&v);
            }
        }
        h.finish()
    }

    pub fn cast<U: Scalar>(&self) -> VdsrModel<U> {
        VdsrModel {
            layers: self.layers.iter().map(ConvLayer::cast).collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::shape(
                "vdsr_forward",
                format!("expected one channel, got {}", x.channels()),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> LayerStack<T> for VdsrModel<T> {
    fn layers(&self) -> Vec<&ConvLayer<T>> {
        self.layers.iter().collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        self.layers.iter_mut().collect()
    }
}

/// `f̂ + (1 - b)·r`: keeps measured pixels at their LFCR value.
pub fn masked_residual_combine(fhat: &Image, r: &Image, b: &Image) -> Result<Image> {
    if fhat.dims() != r.dims() || fhat.dims() != b.dims() {
        return Err(Error::shape(
            "masked_residual_combine",
            format!("dims {:?}, {:?}, {:?} differ", fhat.dims(), r.dims(), b.dims()),
        ));
    }
    if let Some(v) = b.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("mask must be binary, found {v}")));
    }
    let data = fhat
        .data()
        .iter()
        .zip(r.data())
        .zip(b.data())
        .map(|((f, r), b)| f + (1.0 - b) * r)
        .collect();
    Image::new(fhat.width(), fhat.height(), data)
}
