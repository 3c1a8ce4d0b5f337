//! Finite-difference checks of every differentiable operation and of both
//! networks, run in 64-bit precision.
//!
//! Each check contracts the output with a fixed random tensor `R`, so the
//! scalar objective `L = Σ R ⊙ op(x)` exercises every output element with
//! distinct weights.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{seeded_rng, LayerStack};
use crate::lfcr::LfcrModel;
use crate::sensor::{MaskKind, SamplingMask, Sensor};
use crate::tensor::gradcheck::{check, Evaluation, GradCheckReport, STEP};
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, deconv2d, deconv2d_backward, mse_loss, prelu,
    prelu_backward, split_channels, ConvSpec, Tensor,
};
use crate::vdsr::VdsrModel;

/// Acceptance tolerance on the relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Parameter coordinates probed per parameter tensor in network checks.
const PROBES_PER_TENSOR: usize = 6;

const RNG_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Linear,
    Conv2d,
    Deconv2d,
    Prelu,
    MseLoss,
    Concat,
    Lfcr,
    Vdsr,
}

impl Target {
    pub const ALL: [Target; 8] = [
        Target::Linear,
        Target::Conv2d,
        Target::Deconv2d,
        Target::Prelu,
        Target::MseLoss,
        Target::Concat,
        Target::Lfcr,
        Target::Vdsr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Linear => "linear",
            Target::Conv2d => "conv2d",
            Target::Deconv2d => "deconv2d",
            Target::Prelu => "prelu",
            Target::MseLoss => "mse_loss",
            Target::Concat => "concat_channels",
            Target::Lfcr => "lfcr",
            Target::Vdsr => "vdsr",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s || (s == "mse" && *t == Target::MseLoss) || (s == "concat" && *t == Target::Concat))
            .ok_or_else(|| {
                let names: Vec<_> = Target::ALL.iter().map(|t| t.as_str()).collect();
                Error::Invalid(format!("unknown check `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

/// Runs one check; shapes and hyper-parameters vary with `seed`.
pub fn run(target: Target, seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, RNG_STREAM);
    match target {
        Target::Linear => check_linear(&mut rng),
        Target::Conv2d => check_conv(&mut rng),
        Target::Deconv2d => check_deconv(&mut rng),
        Target::Prelu => check_prelu(&mut rng),
        Target::MseLoss => check_mse(&mut rng),
        Target::Concat => check_concat(&mut rng),
        Target::Lfcr => check_lfcr(seed, &mut rng),
        Target::Vdsr => check_vdsr(seed, &mut rng),
    }
}

fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape(), data.to_vec()).expect("same length")
}

/// Checks the input, weight and bias gradients of one (de)convolution.
fn check_conv_like(
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Vec<f64>,
    spec: ConvSpec,
    transposed: bool,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| {
        if transposed {
            deconv2d(x, w, Some(b), &spec)
        } else {
            conv2d(x, w, Some(b), &spec)
        }
    };
    let y = fwd(&x, &w, &b)?;
    let r = uniform(y.shape(), rng);
    let g = if transposed {
        deconv2d_backward(&x, &w, &spec, &r, true, true)?
    } else {
        conv2d_backward(&x, &w, &spec, &r, true, true)?
    };
    let gx = g.input.expect("requested");
    let by_x = check(
        |v| Evaluation::smooth(dot(&fwd(&with_data(&x, v), &w, &b).expect("valid"), &r)),
        x.data(),
        gx.data(),
        &all(x.len()),
        STEP,
    );
    let by_w = check(
        |v| Evaluation::smooth(dot(&fwd(&x, &with_data(&w, v), &b).expect("valid"), &r)),
        w.data(),
        &g.weights,
        &all(w.len()),
        STEP,
    );
    let by_b = check(
        |v| Evaluation::smooth(dot(&fwd(&x, &w, v).expect("valid"), &r)),
        &b,
        &g.bias,
        &all(b.len()),
        STEP,
    );
    Ok(by_x.merge(by_w).merge(by_b))
}

/// Fully connected layer as a 1×1 convolution on 1×1 maps.
fn check_linear(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, cin, cout) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let x = uniform([n, cin, 1, 1], rng);
    let w = uniform([cout, cin, 1, 1], rng);
    let b = uniform([1, cout, 1, 1], rng).into_data();
    check_conv_like(x, w, b, ConvSpec::new(cin, cout, 1, 1, 0), false, rng)
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let k: usize = [1, 2, 3][rng.random_range(0..3)];
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..=k / 2 + 1);
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let size = rng.random_range(k.max(3)..7);
    let x = uniform([rng.random_range(1..3), cin, size, size + 1], rng);
    let w = uniform([cout, cin, k, k], rng);
    let b = uniform([1, cout, 1, 1], rng).into_data();
    check_conv_like(x, w, b, ConvSpec::new(cin, cout, k, stride, pad), false, rng)
}

fn check_deconv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let k: usize = rng.random_range(1..5);
    let stride = rng.random_range(1..=k);
    let pad = rng.random_range(0..k.div_ceil(2));
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let size = rng.random_range(2..5);
    let x = uniform([rng.random_range(1..3), cin, size, size + 1], rng);
    let w = uniform([cin, cout, k, k], rng);
    let b = uniform([1, cout, 1, 1], rng).into_data();
    check_conv_like(x, w, b, ConvSpec::new(cin, cout, k, stride, pad), true, rng)
}

fn check_prelu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let c = rng.random_range(1..5);
    // Keep inputs clear of the kink so every probe stays on one branch.
    let x = Tensor::from_fn([2, c, 3, 3], |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let a: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.5)).collect();
    let r = uniform(x.shape(), rng);
    let g = prelu_backward(&x, &a, &r)?;
    let by_x = check(
        |v| Evaluation::smooth(dot(&prelu(&with_data(&x, v), &a).expect("valid"), &r)),
        x.data(),
        g.input.data(),
        &all(x.len()),
        STEP,
    );
    let by_a = check(
        |v| Evaluation::smooth(dot(&prelu(&x, v).expect("valid"), &r)),
        &a,
        &g.slopes,
        &all(c),
        STEP,
    );
    Ok(by_x.merge(by_a))
}

fn check_mse(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = [rng.random_range(1..3), rng.random_range(1..3), 3, 4];
    let p = uniform(shape, rng);
    let t = uniform(shape, rng);
    let (_, g) = mse_loss(&p, &t)?;
    Ok(check(
        |v| Evaluation::smooth(mse_loss(&with_data(&p, v), &t).expect("valid").0),
        p.data(),
        g.data(),
        &all(p.len()),
        STEP,
    ))
}

fn check_concat(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, h, w) = (rng.random_range(1..3), 3, 2);
    let ca = rng.random_range(1..4);
    let a = uniform([n, ca, h, w], rng);
    let b = uniform([n, rng.random_range(1..4), h, w], rng);
    let r = uniform([n, a.channels() + b.channels(), h, w], rng);
    let (ga, gb) = split_channels(&r, ca)?;
    let by_a = check(
        |v| Evaluation::smooth(dot(&concat_channels(&with_data(&a, v), &b).expect("valid"), &r)),
        a.data(),
        ga.data(),
        &all(a.len()),
        STEP,
    );
    let by_b = check(
        |v| Evaluation::smooth(dot(&concat_channels(&a, &with_data(&b, v)).expect("valid"), &r)),
        b.data(),
        gb.data(),
        &all(b.len()),
        STEP,
    );
    Ok(by_a.merge(by_b))
}

fn flatten(params: Vec<(String, &Tensor<f64>)>) -> (Vec<f64>, Vec<(usize, usize)>) {
    let mut flat = Vec::new();
    let mut spans = Vec::new();
    for (_, p) in params {
        spans.push((flat.len(), p.len()));
        flat.extend_from_slice(p.data());
    }
    (flat, spans)
}

fn flat_grads(params: Vec<(String, &Tensor<f64>)>) -> Vec<f64> {
    params
        .into_iter()
        .flat_map(|(_, p)| match p.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.len()],
        })
        .collect()
}

fn assign<M: LayerStack<f64>>(model: &mut M, flat: &[f64]) {
    let mut at = 0;
    for (_, p) in model.params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

fn probe_coords(spans: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<usize> {
    spans
        .iter()
        .flat_map(|&(start, len)| {
            sample(rng, len, PROBES_PER_TENSOR.min(len))
                .into_iter()
                .map(move |i| start + i)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Full LFCR on one 16×16 block: image and parameter gradients.
fn check_lfcr(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let kind = [MaskKind::Quarter, MaskKind::ThreeQuarter][rng.random_range(0..2)];
    let sensor = if rng.random_bool(0.2) {
        Sensor::LowResolution
    } else {
        Sensor::Masked(SamplingMask::generate(kind, seed))
    };
    let mut model: LfcrModel<f64> = LfcrModel::build(sensor, seed);
    let x = Tensor::from_fn([1, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let (y, cache) = model.forward_cached(&model.vectorize(&x)?)?;
    let r = uniform(y.shape(), rng);
    model.zero_grad();
    let gv = model.backward(&cache, &r, true)?.expect("requested");
    let gx = model.kernel().backward(&x, &gv)?;

    let eval = |m: &LfcrModel<f64>, x: &Tensor<f64>| {
        let (y, c) = m.forward_cached(&m.vectorize(x).expect("valid")).expect("valid");
        Evaluation {
            value: dot(&y, &r),
            signature: LfcrModel::branch_signature(&c),
        }
    };
    let by_x = check(|v| eval(&model, &with_data(&x, v)), x.data(), gx.data(), &all(x.len()), STEP);

    let (flat, spans) = flatten(model.params());
    let analytic = flat_grads(model.params());
    let coords = probe_coords(&spans, rng);
    let mut probe = model.clone();
    let by_p = check(
        |v| {
            assign(&mut probe, v);
            eval(&probe, &x)
        },
        &flat,
        &analytic,
        &coords,
        STEP,
    );
    Ok(by_x.merge(by_p))
}

/// Depth-4 VDSR on a 12×12 image: image and parameter gradients of
/// `Σ R ⊙ f̃`, including the identity path.
fn check_vdsr(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut model: VdsrModel<f64> = VdsrModel::with_depth(4, seed)?;
    let x = Tensor::from_fn([1, 1, 12, 12], |_| rng.random_range(0.0..1.0));
    let (res, cache) = model.residual_cached(&x)?;
    let r = uniform(res.shape(), rng);
    model.zero_grad();
    let mut gx = model.backward(&cache, &r, true)?.expect("requested");
    for (g, rv) in gx.data_mut().iter_mut().zip(r.data()) {
        *g += *rv;
    }

    let eval = |m: &VdsrModel<f64>, x: &Tensor<f64>| {
        let (res, c) = m.residual_cached(x).expect("valid");
        let out: f64 = res.data().iter().zip(x.data()).zip(r.data()).map(|((a, b), w)| (a + b) * w).sum();
        Evaluation {
            value: out,
            signature: VdsrModel::branch_signature(&c),
        }
    };
    let by_x = check(|v| eval(&model, &with_data(&x, v)), x.data(), gx.data(), &all(x.len()), STEP);

    let (flat, spans) = flatten(model.params());
    let analytic = flat_grads(model.params());
    let coords = probe_coords(&spans, rng);
    let mut probe = model.clone();
    let by_p = check(
        |v| {
            assign(&mut probe, v);
            eval(&probe, &x)
        },
        &flat,
        &analytic,
        &coords,
        STEP,
    );
    Ok(by_x.merge(by_p))
}
