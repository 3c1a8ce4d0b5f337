//! Locally fully connected reconstruction network.
//!
//! The fixed vectorizing convolution turns every 16×16 support block into a
//! 64-vector of measurements. Ten 1×1 convolutions with PReLU act as fully
//! connected layers shared by all blocks. The 16 measurements of the target
//! block are appended to the last hidden layer, and a stride-8 transposed
//! convolution paints each block's 8×8 pixel estimate.

use crate::error::{Error, Result};
use crate::layer::{seeded_rng, ConvLayer, LayerCache, LayerStack};
use crate::sensor::{
    build_vectorizing_kernel, central_channel_indices, Sensor, VectorizingKernel,
    CENTRAL_CHANNELS, TARGET, VECTOR_DEPTH,
};
use crate::tensor::gradcheck::SignatureHasher;
use crate::tensor::{
    concat_channels, select_channels, select_channels_backward, split_channels, ConvSpec, Scalar,
    Tensor,
};

/// Pixels of a target block a quarter sampling sensor does not measure.
pub const MISSING_PER_BLOCK: usize = 3 * TARGET * TARGET / 4;
/// Hidden width: four neurons per missing pixel.
pub const HIDDEN_WIDTH: usize = 4 * MISSING_PER_BLOCK;
pub const FC_LAYERS: usize = 10;
pub const DECONV_INPUTS: usize = HIDDEN_WIDTH + CENTRAL_CHANNELS;

const INIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LfcrModel<T = f32> {
    sensor: Sensor,
    kernel: VectorizingKernel,
    fc: Vec<ConvLayer<T>>,
    deconv: ConvLayer<T>,
}

#[derive(Clone, Debug)]
pub struct LfcrCache<T> {
    vectorized_shape: [usize; 4],
    fc: Vec<LayerCache<T>>,
    deconv: LayerCache<T>,
}

impl<T> LfcrCache<T> {
    pub fn fc_caches(&self) -> &[LayerCache<T>] {
        &self.fc
    }
}

pub fn fc_layer_name(i: usize) -> String {
    format!("lfcr/fc{i:02}")
}

pub const VEC_LAYER_NAME: &str = "lfcr/vec";
pub const DECONV_LAYER_NAME: &str = "lfcr/deconv";

impl<T: Scalar> LfcrModel<T> {
    pub fn build(sensor: Sensor, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, INIT_STREAM);
        let kernel = build_vectorizing_kernel(&sensor);
        let fc = (0..FC_LAYERS)
            .map(|i| {
                let cin = if i == 0 { VECTOR_DEPTH } else { HIDDEN_WIDTH };
                ConvLayer::new(
                    fc_layer_name(i),
                    ConvSpec::new(cin, HIDDEN_WIDTH, 1, 1, 0),
                    false,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let deconv = ConvLayer::new(
            DECONV_LAYER_NAME,
            ConvSpec::new(DECONV_INPUTS, 1, TARGET, TARGET, 0),
            true,
            false,
            &mut rng,
        );
        LfcrModel {
            sensor,
            kernel,
            fc,
            deconv,
        }
    }

    /// Reassembles a model from trained layers, validating their geometry.
    pub fn from_layers(sensor: Sensor, fc: Vec<ConvLayer<T>>, deconv: ConvLayer<T>) -> Result<Self> {
        let fresh = LfcrModel::<T>::build(sensor.clone(), 0);
        if fc.len() != FC_LAYERS {
            return Err(Error::Incompatible(format!(
                "expected {FC_LAYERS} fully connected layers, got {}",
                fc.len()
            )));
        }
        for (got, want) in fc.iter().chain([&deconv]).zip(fresh.layers()) {
            if got.spec() != want.spec()
                || got.weight.shape() != want.weight.shape()
                || got.has_activation() != want.has_activation()
                || got.name() != want.name()
            {
                return Err(Error::Incompatible(format!(
                    "layer `{}` does not match the LFCR layout",
                    got.name()
                )));
            }
        }
        Ok(LfcrModel {
            kernel: build_vectorizing_kernel(&sensor),
            sensor,
            fc,
            deconv,
        })
    }

    pub fn sensor(&self) -> &Sensor {
        &self.sensor
    }

    pub fn kernel(&self) -> &VectorizingKernel {
        &self.kernel
    }

    pub fn fc_layers(&self) -> &[ConvLayer<T>] {
        &self.fc
    }

    pub fn deconv(&self) -> &ConvLayer<T> {
        &self.deconv
    }

    pub fn deconv_mut(&mut self) -> &mut ConvLayer<T> {
        &mut self.deconv
    }

    pub fn hidden_width(&self) -> usize {
        self.fc[0].spec().out_channels
    }

    /// Simulated sensor read-out of an (N, 1, H, W) reference batch.
    pub fn vectorize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != 1 {
            return Err(Error::shape(
                "lfcr_forward",
                format!("expected one image channel, got {}", x.channels()),
            ));
        }
        self.kernel.apply(x)
    }

    /// Reconstruction of an (N, 1, H, W) batch; H and W multiples of 8.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_vectorized(&self.vectorize(x)?)
    }

    pub fn forward_vectorized(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_vectorized(v)?;
        let mut h = v.clone();
        for layer in &self.fc {
            h = layer.forward(&h)?;
        }
        let c = concat_channels(&h, &select_channels(v, &central_channel_indices())?)?;
        self.deconv.forward(&c)
    }

    pub fn forward_cached(&self, v: &Tensor<T>) -> Result<(Tensor<T>, LfcrCache<T>)> {
        self.check_vectorized(v)?;
        let mut caches = Vec::with_capacity(FC_LAYERS);
        let mut h = v.clone();
        for layer in &self.fc {
            let (y, cache) = layer.forward_cached(&h)?;
            caches.push(cache);
            h = y;
        }
        let c = concat_channels(&h, &select_channels(v, &central_channel_indices())?)?;
        let (out, deconv) = self.deconv.forward_cached(&c)?;
        Ok((
            out,
            LfcrCache {
                vectorized_shape: v.shape(),
                fc: caches,
                deconv,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient with respect to
    /// the vectorized measurements when `need_input` is set.
    pub fn backward(
        &mut self,
        cache: &LfcrCache<T>,
        grad_out: &Tensor<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let gc = self
            .deconv
            .backward(&cache.deconv, grad_out, true)?
            .expect("requested");
        let (mut g, g_central) = split_channels(&gc, HIDDEN_WIDTH)?;
        for (i, layer) in self.fc.iter_mut().enumerate().rev() {
            match layer.backward(&cache.fc[i], &g, i > 0 || need_input)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        let scattered =
            select_channels_backward(&g_central, &central_channel_indices(), cache.vectorized_shape[1])?;
        for (a, b) in g.data_mut().iter_mut().zip(scattered.data()) {
            *a += *b;
        }
        Ok(Some(g))
    }

    /// Hash of the PReLU branch taken at every unit.
    pub fn branch_signature(cache: &LfcrCache<T>) -> u64 {
        let mut h = SignatureHasher::default();
        for c in &cache.fc {
            if let Some(z) = &c.preact {
                let v: Vec<f64> = z.data().iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
                h.signs(&v);
            }
        }
        h.finish()
    }

    pub fn cast<U: Scalar>(&self) -> LfcrModel<U> {
        LfcrModel {
            sensor: self.sensor.clone(),
            kernel: self.kernel.clone(),
            fc: self.fc.iter().map(ConvLayer::cast).collect(),
            deconv: self.deconv.cast(),
        }
    }

    fn check_vectorized(&self, v: &Tensor<T>) -> Result<()> {
        if v.channels() != VECTOR_DEPTH {
            return Err(Error::shape(
                "lfcr_forward",
                format!("expected {VECTOR_DEPTH} measurement channels, got {}", v.channels()),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> LayerStack<T> for LfcrModel<T> {
    fn layers(&self) -> Vec<&ConvLayer<T>> {
        self.fc.iter().chain(std::iter::once(&self.deconv)).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        self.fc
            .iter_mut()
            .chain(std::iter::once(&mut self.deconv))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::sensor::{MaskKind, SamplingMask};
    use crate::tensor::testutil::random_tensor;

    fn quarter(seed: u64) -> Sensor {
        Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, seed))
    }

    #[test]
    fn geometry() {
        let m: LfcrModel = LfcrModel::build(quarter(1), 1);
        assert_eq!(HIDDEN_WIDTH, 192);
        assert_eq!(m.hidden_width(), 192);
        assert_eq!(m.fc_layers().len(), 10);
        assert_eq!(m.fc_layers()[0].spec().in_channels, 64);
        assert_eq!(m.deconv().spec().in_channels, 208);
        assert_eq!(m.deconv().weight.shape(), [208, 1, 8, 8]);
        assert!(m.fc_layers().iter().all(|l| l.has_activation()));
        assert!(!m.deconv().has_activation());
    }

    #[test]
    fn param_count_by_summation() {
        let m: LfcrModel = LfcrModel::build(quarter(1), 1);
        let first = 64 * 192 + 192 + 192;
        let hidden = 9 * (192 * 192 + 192 + 192);
        let deconv = 208 * 64 + 1;
        assert_eq!(m.param_count(), first + hidden + deconv);
        assert_eq!(m.param_count(), 361_217);
    }

    #[test]
    fn shape_preserved() {
        let m: LfcrModel = LfcrModel::build(quarter(2), 2);
        let x = Tensor::full([2, 1, 48, 48], 90.0f32);
        assert_eq!(m.forward(&x).unwrap().shape(), [2, 1, 48, 48]);
        assert!(m.forward(&Tensor::full([1, 1, 44, 48], 0.0)).is_err());
    }

    #[test]
    fn zeroed_deconv_gives_bias() {
        let mut m: LfcrModel = LfcrModel::build(quarter(3), 3);
        let d = m.deconv_mut();
        d.weight.data_mut().fill(0.0);
        d.bias.data_mut().fill(128.0);
        let img = Image::from_fn(32, 24, |y, x| ((y * 7 + x * 3) % 255) as f32);
        let x = Image::batch_to_tensor::<f32>(&[img]).unwrap();
        let y = m.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 128.0));
    }

    #[test]
    fn central_measurements_reach_deconv_unchanged() {
        let m: LfcrModel = LfcrModel::build(quarter(4), 4);
        let x: Tensor<f32> = random_tensor::<f32>([1, 1, 32, 32], 5).map(|v: f32| (v * 100.0).round());
        let v = m.vectorize(&x).unwrap();
        let (_, cache) = m.forward_cached(&v).unwrap();
        let concat_in = &cache.deconv.input;
        let (_, central) = split_channels(concat_in, HIDDEN_WIDTH).unwrap();
        assert_eq!(central, select_channels(&v, &central_channel_indices()).unwrap());
    }

    #[test]
    fn period_eight_shift_equivariance() {
        let m: LfcrModel<f64> = LfcrModel::build(quarter(6), 6);
        let img = Image::from_fn(32, 32, |y, x| ((y * 13 + x * 29) % 97) as f32);
        let shifted = img.roll(8, 8);
        let y0 = m.forward(&Image::batch_to_tensor(&[img]).unwrap()).unwrap();
        let y1 = m.forward(&Image::batch_to_tensor(&[shifted]).unwrap()).unwrap();
        let a = Image::batch_from_tensor(&y0).unwrap().remove(0).roll(8, 8);
        let b = Image::batch_from_tensor(&y1).unwrap().remove(0);
        // Blocks whose support touches the zero border differ; compare the
        // interior target blocks only.
        for y in 16..24 {
            for x in 16..24 {
                assert!((a.get(y, x) - b.get(y, x)).abs() <= 1e-4);
            }
        }
    }
}
