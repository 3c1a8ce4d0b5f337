//! Strided 2-D convolution and its transpose, lowered to GEMM via im2col.
//!
//! Batch items are processed in parallel. Per-item parameter gradients are
//! summed afterwards in batch order, so results do not depend on the number
//! of worker threads.

use rayon::prelude::*;

use super::{matmul, matmul_nt, matmul_tn, ConvSpec, Scalar, Tensor};
use crate::error::{Error, Result};

/// Window geometry over one (channels, height, width) image.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the image already is its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.positions();
    let pad = g.pad as isize;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.sh + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - pad;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps into `x`.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let p = g.positions();
    let pad = g.pad as isize;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by a convolution backward pass. Buffers that were not
/// requested are left empty.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

fn check_bias<T>(op: &'static str, bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias has {} entries, expected {channels}", b.len()),
        )),
        _ => Ok(()),
    }
}

fn conv_geom<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Geom> {
    spec.validate()?;
    let [_, c, h, w] = input.shape();
    if c != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    let expect = [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w];
    if weights.shape() != expect {
        return Err(Error::shape(
            op,
            format!(
                "weights shape {:?}, expected (out, in, kh, kw) = {expect:?}",
                weights.shape()
            ),
        ));
    }
    let oh = ConvSpec::conv_out(h, spec.kernel_h, spec.stride_h, spec.pad);
    let ow = ConvSpec::conv_out(w, spec.kernel_w, spec.stride_w, spec.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Geom {
            c,
            h,
            w,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            sh: spec.stride_h,
            sw: spec.stride_w,
            pad: spec.pad,
            oh,
            ow,
        }),
        _ => Err(Error::shape(
            op,
            format!(
                "{h}x{w} input with pad {} is smaller than the {}x{} kernel",
                spec.pad, spec.kernel_h, spec.kernel_w
            ),
        )),
    }
}

/// Cross-correlation of `input` (N, Cin, H, W) with `weights`
/// (Cout, Cin, kh, kw), zero padded.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv_geom("conv2d", input, weights, spec)?;
    check_bias("conv2d", bias, spec.out_channels)?;
    let cout = spec.out_channels;
    let (k, p) = (g.rows(), g.positions());
    let mut out = Tensor::zeros([input.batch(), cout, g.oh, g.ow]);
    out.data_mut()
        .par_chunks_mut(cout * p)
        .enumerate()
        .for_each(|(n, dst)| {
            let x = input.sample(n);
            let owned;
            let cols = if g.is_pointwise() {
                x
            } else {
                let mut buf = vec![T::zero(); k * p];
                im2col(x, &g, &mut buf);
                owned = buf;
                &owned[..]
            };
            matmul(cout, k, p, weights.data(), cols, dst, false);
            if let Some(b) = bias {
                for (row, &bv) in dst.chunks_mut(p).zip(b) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(out)
}

/// Backward pass of [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom("conv2d_backward", input, weights, spec)?;
    let cout = spec.out_channels;
    let n = input.batch();
    if grad_out.shape() != [n, cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "output gradient {:?}, expected {:?}",
                grad_out.shape(),
                [n, cout, g.oh, g.ow]
            ),
        ));
    }
    let (k, p) = (g.rows(), g.positions());
    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = input.sample(i);
            let gy = grad_out.sample(i);
            let mut gx = Vec::new();
            let mut gw = Vec::new();
            let mut gb = Vec::new();
            if need_params {
                let owned;
                let cols = if g.is_pointwise() {
                    x
                } else {
                    let mut buf = vec![T::zero(); k * p];
                    im2col(x, &g, &mut buf);
                    owned = buf;
                    &owned[..]
                };
                gw = vec![T::zero(); cout * k];
                matmul_nt(cout, p, k, gy, cols, &mut gw, false);
                gb = gy.chunks(p).map(|row| row.iter().copied().sum()).collect();
            }
            if need_input {
                gx = vec![T::zero(); g.c * g.h * g.w];
                if g.is_pointwise() {
                    matmul_tn(k, cout, p, weights.data(), gy, &mut gx, false);
                } else {
                    let mut gcols = vec![T::zero(); k * p];
                    matmul_tn(k, cout, p, weights.data(), gy, &mut gcols, false);
                    col2im(&gcols, &g, &mut gx);
                }
            }
            (gx, gw, gb)
        })
        .collect();
    assemble(input.shape(), per_item, need_input, need_params, cout * k, cout)
}

fn assemble<T: Scalar>(
    input_shape: [usize; 4],
    per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)>,
    need_input: bool,
    need_params: bool,
    wlen: usize,
    blen: usize,
) -> Result<ConvGrads<T>> {
    let mut weights = if need_params { vec![T::zero(); wlen] } else { Vec::new() };
    let mut bias = if need_params { vec![T::zero(); blen] } else { Vec::new() };
    let mut gx = Vec::with_capacity(if need_input { input_shape.iter().product() } else { 0 });
    for (x, w, b) in per_item {
        if need_params {
            weights.iter_mut().zip(&w).for_each(|(a, &v)| *a += v);
            bias.iter_mut().zip(&b).for_each(|(a, &v)| *a += v);
        }
        gx.extend_from_slice(&x);
    }
    let input = if need_input {
        Some(Tensor::new(input_shape, gx)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weights,
        bias,
    })
}

fn deconv_geom<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Geom> {
    spec.validate()?;
    let [_, c, h, w] = input.shape();
    if c != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    let expect = [spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w];
    if weights.shape() != expect {
        return Err(Error::shape(
            op,
            format!(
                "weights shape {:?}, expected (in, out, kh, kw) = {expect:?}",
                weights.shape()
            ),
        ));
    }
    let oh = ((h - 1) * spec.stride_h + spec.kernel_h).checked_sub(2 * spec.pad);
    let ow = ((w - 1) * spec.stride_w + spec.kernel_w).checked_sub(2 * spec.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Geom {
            c: spec.out_channels,
            h: oh,
            w: ow,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            sh: spec.stride_h,
            sw: spec.stride_w,
            pad: spec.pad,
            oh: h,
            ow: w,
        }),
        _ => Err(Error::Unsupported(format!(
            "transposed convolution with pad {} produces an empty output for {h}x{w} input",
            spec.pad
        ))),
    }
}

/// Transposed convolution: `input` (N, Cin, h, w), `weights`
/// (Cin, Cout, kh, kw), output ((h-1)·stride + k - 2·pad) per axis.
///
/// With stride equal to the kernel size and no padding every input
/// position paints its own disjoint kh×kw output block.
pub fn deconv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = deconv_geom("deconv2d", input, weights, spec)?;
    check_bias("deconv2d", bias, spec.out_channels)?;
    let cin = spec.in_channels;
    let (k, p) = (g.rows(), g.positions());
    let out_len = g.c * g.h * g.w;
    let mut out = Tensor::zeros([input.batch(), g.c, g.h, g.w]);
    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, dst)| {
            let mut cols = vec![T::zero(); k * p];
            matmul_tn(k, cin, p, weights.data(), input.sample(n), &mut cols, false);
            col2im(&cols, &g, dst);
            if let Some(b) = bias {
                for (plane, &bv) in dst.chunks_mut(g.h * g.w).zip(b) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(out)
}

/// Backward pass of [`deconv2d`].
pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let g = deconv_geom("deconv2d_backward", input, weights, spec)?;
    let n = input.batch();
    if grad_out.shape() != [n, g.c, g.h, g.w] {
        return Err(Error::shape(
            "deconv2d_backward",
            format!(
                "output gradient {:?}, expected {:?}",
                grad_out.shape(),
                [n, g.c, g.h, g.w]
            ),
        ));
    }
    let cin = spec.in_channels;
    let (k, p) = (g.rows(), g.positions());
    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gy = grad_out.sample(i);
            let mut gcols = vec![T::zero(); k * p];
            im2col(gy, &g, &mut gcols);
            let mut gx = Vec::new();
            let mut gw = Vec::new();
            let mut gb = Vec::new();
            if need_input {
                gx = vec![T::zero(); cin * p];
                matmul(cin, k, p, weights.data(), &gcols, &mut gx, false);
            }
            if need_params {
                gw = vec![T::zero(); cin * k];
                matmul_nt(cin, p, k, input.sample(i), &gcols, &mut gw, false);
                gb = gy
                    .chunks(g.h * g.w)
                    .map(|plane| plane.iter().copied().sum())
                    .collect();
            }
            (gx, gw, gb)
        })
        .collect();
    assemble(input.shape(), per_item, need_input, need_params, cin * k, g.c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_| {
            i += 1.0;
            i
        })
    }

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, kh, kw] = w.shape();
        let oh = (h + 2 * pad - kh) / s + 1;
        let ow = (wd + 2 * pad - kw) / s + 1;
        Tensor::from_fn([n, cout, oh, ow], |[b, o, y, xx]| {
            let mut acc = 0.0;
            for c in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (y * s + ky) as isize - pad as isize;
                        let ix = (xx * s + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at([b, c, iy as usize, ix as usize]) * w.at([o, c, ky, kx]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = ramp([1, 1, 3, 3]);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn centered_identity_3x3_is_bit_exact() {
        let x = Tensor::from_fn([2, 1, 5, 7], |[n, _, y, x]| (n * 31 + y * 7 + x) as f32 * 0.37);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.set([0, 0, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn sum_of_ones() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let w = Tensor::full([1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 2, 2, 0)).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn matches_naive_loops() {
        for &(s, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (8, 4, 16), (3, 2, 2)] {
            let x = Tensor::from_fn([2, 3, 17, 19], |[n, c, y, x]| {
                ((n * 13 + c * 7 + y * 3 + x) % 11) as f64 - 5.0
            });
            let w = Tensor::from_fn([4, 3, k, k], |[o, c, y, x]| {
                ((o * 5 + c * 3 + y * 2 + x) % 7) as f64 - 3.0
            });
            let spec = ConvSpec::new(3, 4, k, s, pad);
            let got = conv2d(&x, &w, None, &spec).unwrap();
            assert_eq!(got, naive_conv(&x, &w, s, pad), "s={s} pad={pad} k={k}");
        }
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::<f32>::zeros([1, 1, 16, 16]);
        let w = Tensor::zeros([64, 1, 16, 16]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 64, 16, 8, 4)).unwrap();
        assert_eq!(y.shape(), [1, 64, 2, 2]);
    }

    #[test]
    fn rejects_mismatched_weights() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([3, 1, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvSpec::new(2, 3, 3, 1, 1)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(err.to_string().contains("(out, in, kh, kw)"));
        let w = Tensor::zeros([3, 2, 3, 3]);
        let err = conv2d(&x, &w, Some(&[0.0; 2]), &ConvSpec::new(2, 3, 3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("bias"));
    }

    #[test]
    fn deconv_broadcasts_single_value() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 3.5);
        let w = Tensor::full([1, 1, 8, 8], 1.0);
        let y = deconv2d(&x, &w, None, &ConvSpec::new(1, 1, 8, 8, 0)).unwrap();
        assert_eq!(y.shape(), [1, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn deconv_blocks_are_disjoint() {
        let x = Tensor::<f32>::from_fn([1, 1, 2, 2], |[_, _, y, x]| (1 + y * 2 + x) as f32);
        let w = Tensor::full([1, 1, 8, 8], 1.0);
        let y = deconv2d(&x, &w, None, &ConvSpec::new(1, 1, 8, 8, 0)).unwrap();
        assert_eq!(y.shape(), [1, 1, 16, 16]);
        for yy in 0..16 {
            for xx in 0..16 {
                let expect = (1 + (yy / 8) * 2 + xx / 8) as f32;
                assert_eq!(y.at([0, 0, yy, xx]), expect);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> for the same weights.
        for &(s, pad, k, h) in &[(8, 0, 8, 16), (2, 1, 3, 11), (1, 1, 3, 10)] {
            let x = Tensor::from_fn([1, 2, h, h], |[_, c, y, x]| (c + y * x % 5) as f64 * 0.5);
            let w = Tensor::from_fn([3, 2, k, k], |[o, c, y, x]| (o + 2 * c + y + x) as f64 - 4.0);
            let spec = ConvSpec::new(2, 3, k, s, pad);
            let cx = conv2d(&x, &w, None, &spec).unwrap();
            let yv = Tensor::from_fn(cx.shape(), |[_, o, y, x]| (o * 3 + y + 2 * x) as f64 - 6.0);
            let dspec = ConvSpec::new(3, 2, k, s, pad);
            let dy = deconv2d(&yv, &w, None, &dspec).unwrap();
            assert_eq!(dy.shape(), x.shape(), "s={s} pad={pad} k={k}");
            let lhs: f64 = cx.data().iter().zip(yv.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn backward_bias_is_output_sum() {
        let x = ramp([2, 1, 4, 4]);
        let w = Tensor::full([2, 1, 3, 3], 0.5);
        let spec = ConvSpec::new(1, 2, 3, 1, 1);
        let gy = Tensor::full([2, 2, 4, 4], 1.0);
        let g = conv2d_backward(&x, &w, &spec, &gy, false, true).unwrap();
        assert_eq!(g.bias, vec![32.0, 32.0]);
        assert!(g.input.is_none());
    }
}
