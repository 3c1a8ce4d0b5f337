use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-channel parametric ReLU: `x` where `x >= 0`, else `slope[c] * x`.
pub fn prelu<T: Scalar>(input: &Tensor<T>, slopes: &[T]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if slopes.len() != c {
        return Err(Error::shape(
            "prelu",
            format!("{} slopes for {c} channels", slopes.len()),
        ));
    }
    let plane = h * w;
    let mut out = input.clone();
    out.clear_grad();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let a = slopes[i % c];
        for v in chunk.iter_mut() {
            if *v < T::zero() {
                *v = a * *v;
            }
        }
    }
    debug_assert_eq!(out.len(), n * c * plane);
    Ok(out)
}

pub struct PreluGrads<T> {
    pub input: Tensor<T>,
    pub slopes: Vec<T>,
}

/// Backward pass of [`prelu`]; `input` is the pre-activation.
pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    slopes: &[T],
    grad_out: &Tensor<T>,
) -> Result<PreluGrads<T>> {
    let [_, c, h, w] = input.shape();
    if grad_out.shape() != input.shape() || slopes.len() != c {
        return Err(Error::shape(
            "prelu_backward",
            format!(
                "input {:?}, gradient {:?}, {} slopes",
                input.shape(),
                grad_out.shape(),
                slopes.len()
            ),
        ));
    }
    let plane = h * w;
    let mut gx = grad_out.clone();
    gx.clear_grad();
    let mut gs = vec![T::zero(); c];
    for (i, (gchunk, xchunk)) in gx
        .data_mut()
        .chunks_mut(plane)
        .zip(input.data().chunks(plane))
        .enumerate()
    {
        let ch = i % c;
        let a = slopes[ch];
        let mut acc = T::zero();
        for (g, &x) in gchunk.iter_mut().zip(xchunk) {
            if x < T::zero() {
                acc += *g * x;
                *g = *g * a;
            }
        }
        gs[ch] += acc;
    }
    Ok(PreluGrads {
        input: gx,
        slopes: gs,
    })
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} and {:?} differ outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::new([n, ca + cb, h, w], data)
}

/// Inverse routing of [`concat_channels`]: splits after `first` channels.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = t.shape();
    if first > c {
        return Err(Error::shape(
            "split_channels",
            format!("cannot take {first} of {c} channels"),
        ));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for i in 0..n {
        let s = t.sample(i);
        a.extend_from_slice(&s[..first * plane]);
        b.extend_from_slice(&s[first * plane..]);
    }
    Ok((
        Tensor::new([n, first, h, w], a)?,
        Tensor::new([n, c - first, h, w], b)?,
    ))
}

/// Gathers the listed channels, in list order.
pub fn select_channels<T: Scalar>(t: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.shape();
    if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
        return Err(Error::shape(
            "select_channels",
            format!("channel {bad} out of range for {c} channels"),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * indices.len() * plane);
    for s in 0..n {
        let sample = t.sample(s);
        for &i in indices {
            data.extend_from_slice(&sample[i * plane..(i + 1) * plane]);
        }
    }
    Tensor::new([n, indices.len(), h, w], data)
}

/// Scatters a gradient of [`select_channels`] back to `channels` channels.
pub fn select_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    indices: &[usize],
    channels: usize,
) -> Result<Tensor<T>> {
    let [n, k, h, w] = grad_out.shape();
    if k != indices.len() || indices.iter().any(|&i| i >= channels) {
        return Err(Error::shape(
            "select_channels_backward",
            format!("{k} gradient channels for {} indices", indices.len()),
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, channels, h, w]);
    let len = channels * plane;
    for s in 0..n {
        let g = grad_out.sample(s);
        let dst = &mut out.data_mut()[s * len..(s + 1) * len];
        for (j, &i) in indices.iter().enumerate() {
            for (d, &v) in dst[i * plane..(i + 1) * plane]
                .iter_mut()
                .zip(&g[j * plane..(j + 1) * plane])
            {
                *d += v;
            }
        }
    }
    Ok(out)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let count = T::from_usize(pred.len()).expect("count fits");
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d * d;
        *g = two * d / count;
    }
    Ok((sum / count, grad))
}
