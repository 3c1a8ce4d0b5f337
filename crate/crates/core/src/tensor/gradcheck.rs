//! Central-difference gradient checking.
//!
//! The objective reports, next to its value, a signature of every
//! activation branch it took (the sign pattern of PReLU inputs). When a
//! ±h probe changes that signature the probe straddles a kink where the
//! function is not differentiable; such coordinates are counted as
//! skipped instead of compared.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

/// Perturbation used by every check.
pub const STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub signature: u64,
}

impl Evaluation {
    /// For objectives without branches.
    pub fn smooth(value: f64) -> Self {
        Evaluation {
            value,
            signature: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_coordinate = other.worst_coordinate;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Incrementally hashes activation sign patterns.
#[derive(Default)]
pub struct SignatureHasher(DefaultHasher);

impl SignatureHasher {
    pub fn signs(&mut self, values: &[f64]) {
        let mut word = 0u64;
        for (i, v) in values.iter().enumerate() {
            if *v < 0.0 {
                word |= 1 << (i % 64);
            }
            if i % 64 == 63 {
                self.0.write_u64(word);
                word = 0;
            }
        }
        self.0.write_u64(word);
        self.0.write_usize(values.len());
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

/// Compares `analytic` against central differences of `f` around `x` on
/// the given coordinates.
pub fn check<F>(mut f: F, x: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> Evaluation,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let base = f(x).signature;
    let mut probe = x.to_vec();
    let mut report = GradCheckReport::default();
    for &i in coords {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if plus.signature != base || minus.signature != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_coordinate = Some(i);
        }
    }
    report
}
