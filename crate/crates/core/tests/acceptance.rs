//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! gating criterion fails. Criterion 8 is informational and never gates.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nrsr_core::eval::{evaluate, Method, Reconstructor};
use nrsr_core::gradsuite::{self, Target, TOLERANCE};
use nrsr_core::image::Image;
use nrsr_core::layer::LayerStack;
use nrsr_core::lfcr::{LfcrModel, DECONV_INPUTS, HIDDEN_WIDTH};
use nrsr_core::metrics::{psnr, ssim, PEAK, SSIM_K1};
use nrsr_core::sensor::{
    build_vectorizing_kernel, central_channel_indices, vectorize, MaskKind, SamplingMask, Sensor,
    VECTOR_DEPTH,
};
use nrsr_core::synth::synthetic_corpus;
use nrsr_core::tensor::Tensor;
use nrsr_core::train::{extract_patches, patch_psnr, train_lfcr, StepLog, TrainConfig, TrainOptions};
use nrsr_core::vdsr::VdsrModel;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, 0));
    let lfcr = LfcrModel::<f32>::build(sensor, 0).param_count();
    let vdsr = VdsrModel::<f32>::build(0).param_count();
    let el = t.elapsed();
    let ok = (342_000..=378_000).contains(&lfcr) && (627_000..=693_000).contains(&vdsr) && within(el, 1.0);
    outcome(ok, format!("LFCR {lfcr}, VDSR {vdsr}, total {}, {el:.2?}", lfcr + vdsr))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::ThreeQuarter, 1));
    let m = LfcrModel::<f32>::build(sensor, 1);
    let first = m.fc_layers()[0].spec();
    let widths_ok = m.fc_layers().iter().all(|l| l.spec().out_channels == HIDDEN_WIDTH);
    let depth = m.kernel().spec().out_channels;
    let deconv_in = m.deconv().spec().in_channels;
    let concat = deconv_in - m.fc_layers().last().unwrap().spec().out_channels;
    let v = m.vectorize(&Tensor::zeros([1, 1, 16, 16])).unwrap();
    let ok = HIDDEN_WIDTH == 192
        && widths_ok
        && depth == 64
        && VECTOR_DEPTH == 64
        && first.in_channels == 64
        && v.channels() == 64
        && concat == 16
        && central_channel_indices().len() == 16
        && deconv_in == DECONV_INPUTS
        && within(t.elapsed(), 1.0);
    outcome(
        ok,
        format!("hidden {HIDDEN_WIDTH}, vectorizing depth {depth}, concat adds {concat}, {:.2?}", t.elapsed()),
    )
}

/// Brute-force read-out of support cell (r, c) of block (by, bx) straight
/// from the binary mask b_ij.
fn oracle_vector(f: &Image, sensor: &Sensor) -> Vec<f32> {
    let (h, w) = f.dims();
    let b = sensor.mask().map(|m| m.expand(h, w).unwrap());
    let (bh, bw) = (h / 8, w / 8);
    let mut out = vec![0.0f32; 64 * bh * bw];
    for ch in 0..64 {
        let (r, c) = (ch / 8, ch % 8);
        for by in 0..bh {
            for bx in 0..bw {
                let gy = (by * 4 + r) as isize - 2;
                let gx = (bx * 4 + c) as isize - 2;
                if gy < 0 || gx < 0 || 2 * gy as usize >= h || 2 * gx as usize >= w {
                    continue;
                }
                let (y0, x0) = (2 * gy as usize, 2 * gx as usize);
                let mut sum = 0.0f64;
                let mut open = 0.0f64;
                for (y, x) in [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)] {
                    let bit = b.as_ref().map_or(1.0, |m| m.get(y, x) as f64);
                    sum += bit * f.get(y, x) as f64;
                    open += bit;
                }
                out[(ch * bh + by) * bw + bx] = (sum / open) as f32;
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0usize;
    let mut mismatches = 0usize;
    for i in 0..100 {
        let h = 8 * rng.random_range(2..7);
        let w = 8 * rng.random_range(2..7);
        let f = Image::from_fn(w, h, |_, _| rng.random_range(0..=255) as f32);
        let mut sensors = vec![Sensor::LowResolution];
        for k in 0..10 {
            let seed = 1000 * i + k;
            sensors.push(Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, seed)));
            sensors.push(Sensor::Masked(SamplingMask::generate(MaskKind::ThreeQuarter, seed)));
        }
        for s in &sensors {
            let got = vectorize(&f, &build_vectorizing_kernel(s)).unwrap();
            let want = oracle_vector(&f, s);
            compared += 1;
            if got.data() != want.as_slice() {
                mismatches += 1;
            }
        }
    }
    let el = t.elapsed();
    outcome(
        mismatches == 0 && within(el, 30.0),
        format!("{compared} image/sensor pairs, {mismatches} mismatches, {el:.2?}"),
    )
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let targets = [
        Target::Conv2d,
        Target::Deconv2d,
        Target::Prelu,
        Target::MseLoss,
        Target::Concat,
        Target::Lfcr,
        Target::Vdsr,
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for target in targets {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let r = gradsuite::run(target, seed).unwrap();
            ok &= r.passes(TOLERANCE);
            worst = worst.max(r.max_rel_error);
        }
        parts.push(format!("{} {worst:.1e}", target.as_str()));
    }
    let el = t.elapsed();
    ok &= within(el, 120.0);
    outcome(ok, format!("20 seeds, worst rel. error: {}, {el:.2?}", parts.join(", ")))
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f32;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20u64 {
        let sensor = match i % 3 {
            0 => Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, i)),
            1 => Sensor::Masked(SamplingMask::generate(MaskKind::ThreeQuarter, i)),
            _ => Sensor::LowResolution,
        };
        let m = LfcrModel::<f32>::build(sensor, 100 + i);
        let f = Image::from_fn(48, 48, |_, _| rng.random_range(0.0..1.0));
        let run = |img: &Image| {
            let y = m.forward(&Image::batch_to_tensor(std::slice::from_ref(img)).unwrap()).unwrap();
            Image::batch_from_tensor(&y).unwrap().remove(0)
        };
        let a = run(&f).roll(8, 8);
        let b = run(&f.roll(8, 8));
        // Output blocks 2..=4 of the shifted image: neither they nor their
        // unshifted sources have supports reaching the border or the wrap.
        for y in 16..40 {
            for x in 16..40 {
                worst = worst.max((a.get(y, x) - b.get(y, x)).abs());
            }
        }
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-4 && within(el, 60.0),
        format!("20 models, max abs deviation {worst:.1e}, {el:.2?}"),
    )
}

const OVERFIT_STEPS: usize = 2000;

fn overfit_config() -> TrainConfig {
    TrainConfig {
        patch_size: 48,
        patch_stride: 40,
        shift_set: vec![(0, 0)],
        flips_rotations: false,
        epochs: OVERFIT_STEPS,
        initial_lr: 1e-4,
        lr_decay_every: OVERFIT_STEPS + 1,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    }
}

/// One single-threaded micro-overfit run: step log and final patch PSNR.
fn overfit_run() -> (Vec<StepLog>, f64, Duration) {
    let t = Instant::now();
    let config = overfit_config();
    let images = synthetic_corpus(2, 96, 96, 100);
    let patches = extract_patches(&images, &config);
    assert_eq!(patches.len(), 8);
    let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, 1));
    let mut model = LfcrModel::build(sensor, config.seed);
    let report = train_lfcr(&mut model, &patches, &config, &TrainOptions::in_memory()).unwrap();
    let psnr = patch_psnr(&model, None, &patches).unwrap();
    (report.log, psnr, t.elapsed())
}

fn first_overfit() -> &'static (Vec<StepLog>, f64, Duration) {
    static RUN: OnceLock<(Vec<StepLog>, f64, Duration)> = OnceLock::new();
    RUN.get_or_init(overfit_run)
}

fn criterion_6() -> Outcome {
    let (log, psnr, el) = first_overfit();
    let initial = log[0].loss;
    let last = log[log.len() - 1].loss;
    let ratio = last / initial;
    let ok = log.len() == OVERFIT_STEPS && ratio < 0.01 && *psnr > 35.0 && within(*el, 900.0);
    outcome(
        ok,
        format!(
            "{} steps, MSE {initial:.3e} -> {last:.3e} ({:.3}% of initial, needs < 1%), PSNR {psnr:.2} dB (needs > 35), {el:.2?}",
            log.len(),
            100.0 * ratio
        ),
    )
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let a = Image::filled(32, 32, 100.0);
    let p16 = psnr(&a, &Image::filled(32, 32, 116.0)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = Image::from_fn(32, 32, |_, _| rng.random_range(16..=235) as f32);
    // Errors 255·k/256 and 219·k/256 are both exact in f32.
    let k: Vec<f32> = (0..32 * 32).map(|_| rng.random_range(-12..=12) as f32).collect();
    let full = Image::from_fn(32, 32, |y, x| f.get(y, x) + 255.0 * k[y * 32 + x] / 256.0);
    let narrow = Image::from_fn(32, 32, |y, x| f.get(y, x) + 219.0 * k[y * 32 + x] / 256.0);
    let gain = psnr(&f, &narrow).unwrap() - psnr(&f, &full).unwrap();
    let expect_gain = 20.0 * (255.0f64 / 219.0).log10();

    let self_ssim = ssim(&full, &full).unwrap();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let closed = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
    let const_ssim = ssim(&a, &Image::filled(32, 32, 110.0)).unwrap();
    let el = t.elapsed();
    let ok = (p16 - 24.05).abs() <= 0.01
        && (gain - expect_gain).abs() < 1e-9
        && format!("{gain:.2}") == "1.32"
        && (self_ssim - 1.0).abs() < 1e-9
        && (const_ssim - closed).abs() < 1e-9
        && within(el, 10.0);
    outcome(
        ok,
        format!(
            "PSNR(diff 16) {p16:.4} dB, 219/255 gain {gain:.6} dB (expect {expect_gain:.6}), ssim(x,x)-1 {:.1e}, constant SSIM error {:.1e}, {el:.2?}",
            self_ssim - 1.0,
            (const_ssim - closed).abs()
        ),
    )
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let corpus = synthetic_corpus(40, 96, 96, 800);
    let (train, holdout) = corpus.split_at(30);
    let holdout: Vec<(String, Image)> = holdout
        .iter()
        .enumerate()
        .map(|(i, img)| (format!("holdout{i:02}"), img.clone()))
        .collect();
    let config = TrainConfig {
        epochs: 5,
        seed: 8,
        ..TrainConfig::default()
    };
    let patches = extract_patches(train, &config).augmented(&config);
    let score = |kind: MaskKind| {
        let sensor = Sensor::Masked(SamplingMask::generate(kind, 8));
        let mut model = LfcrModel::build(sensor.clone(), config.seed);
        let opts = TrainOptions {
            parallel: true,
            ..TrainOptions::in_memory()
        };
        train_lfcr(&mut model, &patches, &config, &opts).unwrap();
        let rec = Reconstructor::new(model, None);
        evaluate(Method::Lfcr, &holdout, &sensor, Some(&rec)).unwrap().mean_psnr()
    };
    let tqs = score(MaskKind::ThreeQuarter);
    let qs = score(MaskKind::Quarter);
    outcome(
        tqs >= qs,
        format!(
            "30 training images, {} samples/epoch, 5 epochs: TQS {tqs:.2} dB vs QS {qs:.2} dB on 10 holdout images, {:.2?}",
            patches.len(),
            t.elapsed()
        ),
    )
}

fn criterion_9() -> Outcome {
    let (first, _, el1) = first_overfit();
    let (second, _, el2) = overfit_run();
    let same_len = first.len() == second.len();
    let identical = same_len
        && first
            .iter()
            .zip(&second)
            .all(|(a, b)| a.step == b.step && a.lr.to_bits() == b.lr.to_bits() && a.loss.to_bits() == b.loss.to_bits());
    let total = *el1 + el2;
    outcome(
        identical && within(total, 1800.0),
        format!("{} log entries, bit-identical: {identical}, {total:.2?} for both runs", second.len()),
    )
}

fn main() -> ExitCode {
    type Criterion = (u32, &'static str, bool, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        (1, "parameter counts", true, criterion_1),
        (2, "channel geometry", true, criterion_2),
        (3, "measurement operator vs oracle", true, criterion_3),
        (4, "gradient validation", true, criterion_4),
        (5, "period-8 equivariance", true, criterion_5),
        (6, "micro-overfit training", true, criterion_6),
        (7, "metric correctness", true, criterion_7),
        (8, "TQS vs QS direction of effect", false, criterion_8),
        (9, "determinism", true, criterion_9),
    ];
    let filter: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, gating, run) in criteria {
        if filter.as_ref().is_some_and(|f| !f.contains(&id)) {
            continue;
        }
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if gating { "" } else { " [informational]" };
        println!("criterion {id} {verdict}{note}: {name}: {}", o.detail);
        if gating && !o.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
