//! End-to-end reconstruction and dataset-level evaluation.
//!
//! Images whose sides are not multiples of 16 are reflection-padded at the
//! bottom and right before sensing and cropped back afterwards, so every
//! pixel is scored.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{read_dataset, Image};
use crate::lfcr::LfcrModel;
use crate::metrics::{bicubic_upscale, psnr, ssim};
use crate::sensor::{vectorize_grid, MeasurementGrid, Sensor, SensorKind};
use crate::train::{Stage, PIXEL_SCALE};
use crate::vdsr::VdsrModel;

/// Side multiple images are padded to before reconstruction.
pub const PAD_MULTIPLE: usize = 16;

/// A trained LFCR, optionally followed by a VDSR.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub lfcr: LfcrModel,
    pub vdsr: Option<VdsrModel>,
}

impl Reconstructor {
    pub fn new(lfcr: LfcrModel, vdsr: Option<VdsrModel>) -> Self {
        Reconstructor { lfcr, vdsr }
    }

    /// Restores the models, checking the sensor against `expected`.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&Sensor>) -> Result<Self> {
        if let Some(s) = expected {
            ckpt.check_sensor(s)?;
        }
        Ok(Reconstructor {
            lfcr: ckpt.restore_lfcr()?,
            vdsr: ckpt.restore_vdsr()?,
        })
    }

    pub fn load(path: &Path, expected: Option<&Sensor>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }

    pub fn sensor(&self) -> &Sensor {
        self.lfcr.sensor()
    }

    /// `f̂` for `Stage::Lfcr`, `f̃` for `Stage::Vdsr`. Values are clamped
    /// to 0..255.
    pub fn reconstruct_grid(&self, grid: &MeasurementGrid, stage: Stage) -> Result<Image> {
        if grid.kind != self.sensor().kind()
            || grid.mask.as_ref().map(|m| m.pattern()) != self.sensor().mask().map(|m| m.pattern())
        {
            return Err(Error::Incompatible(format!(
                "measurements come from a {} sensor that does not match the model's {} sensor",
                grid.kind,
                self.sensor().kind()
            )));
        }
        let (h, w) = grid.hr_dims();
        // Border cells only; interior blocks keep their mask phase.
        let padded = MeasurementGrid {
            values: grid.values.pad_reflect_to_multiple(PAD_MULTIPLE / 2),
            ..grid.clone()
        };
        let v = vectorize_grid(&padded)?.map(|x| x / PIXEL_SCALE);
        let mut y = self.lfcr.forward_vectorized(&v)?;
        if stage == Stage::Vdsr {
            let vdsr = self.vdsr.as_ref().ok_or_else(|| {
                Error::Invalid("checkpoint has no VDSR stage; use the LFCR stage".into())
            })?;
            y = vdsr.forward(&y)?.1;
        }
        let out = Image::batch_from_tensor(&y)?.remove(0);
        Ok(out.crop(0, 0, h, w)?.map(|v| (v * PIXEL_SCALE).clamp(0.0, 255.0)))
    }

    /// Simulates the sensor on a reference image and reconstructs it.
    pub fn reconstruct(&self, f: &Image, stage: Stage) -> Result<Image> {
        let padded = f.pad_reflect_to_multiple(PAD_MULTIPLE);
        let grid = self.sensor().measure(&padded)?;
        let out = self.reconstruct_grid(&grid, stage)?;
        out.crop(0, 0, f.height(), f.width())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// The reference itself; sanity baseline.
    Reference,
    Bicubic,
    Lfcr,
    LfcrVdsr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Reference, Method::Bicubic, Method::Lfcr, Method::LfcrVdsr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Reference => "reference",
            Method::Bicubic => "bicubic",
            Method::Lfcr => "lfcr",
            Method::LfcrVdsr => "lfcr+vdsr",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Method::Lfcr | Method::LfcrVdsr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown method `{s}`, expected reference, bicubic, lfcr or lfcr+vdsr"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub sensor: SensorKind,
    pub rows: Vec<ImageScore>,
    pub runtime_s: f64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `image,method,sensor,psnr_db,ssim`; identical images score `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,method,sensor,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.image,
                self.method,
                self.sensor,
                fmt_db(r.psnr_db),
                r.ssim
            ));
        }
        s
    }

    pub fn summary_json(&self) -> Value {
        let psnr = self.mean_psnr();
        json!({
            "method": self.method.as_str(),
            "sensor": self.sensor.as_str(),
            "images": self.rows.len(),
            "mean_psnr_db": if psnr.is_finite() { json!(psnr) } else { json!(fmt_db(psnr)) },
            "mean_ssim": self.mean_ssim(),
            "runtime_s": self.runtime_s,
        })
    }

    /// Aligned plain-text table with a mean row.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.image.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:width$}  {:>10}  {:>8}\n", "image", "PSNR [dB]", "SSIM");
        for r in &self.rows {
            s.push_str(&format!("{:width$}  {:>10}  {:>8.4}\n", r.image, fmt_db(r.psnr_db), r.ssim));
        }
        s.push_str(&format!(
            "{:width$}  {:>10}  {:>8.4}\n",
            "mean",
            fmt_db(self.mean_psnr()),
            self.mean_ssim()
        ));
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// The estimate `method` produces for reference `f`.
pub fn estimate(method: Method, f: &Image, sensor: &Sensor, model: Option<&Reconstructor>) -> Result<Image> {
    let need_model = || {
        model.ok_or_else(|| Error::Invalid(format!("method {method} needs a trained checkpoint")))
    };
    match method {
        Method::Reference => Ok(f.clone()),
        Method::Bicubic => {
            let padded = f.pad_reflect_to_multiple(2);
            let up = bicubic_upscale(&sensor.measure(&padded)?, 2)?;
            up.crop(0, 0, f.height(), f.width())
        }
        Method::Lfcr => need_model()?.reconstruct(f, Stage::Lfcr),
        Method::LfcrVdsr => need_model()?.reconstruct(f, Stage::Vdsr),
    }
}

/// Scores `method` on every image, keeping dataset order.
pub fn evaluate(
    method: Method,
    images: &[(String, Image)],
    sensor: &Sensor,
    model: Option<&Reconstructor>,
) -> Result<EvalReport> {
    if let Some(m) = model {
        if m.sensor().kind() != sensor.kind()
            || m.sensor().mask().map(|k| k.pattern()) != sensor.mask().map(|k| k.pattern())
        {
            return Err(Error::Incompatible(
                "checkpoint sensor does not match the evaluation sensor".into(),
            ));
        }
    }
    let start = Instant::now();
    let rows = images
        .par_iter()
        .map(|(name, f)| {
            let est = estimate(method, f, sensor, model)?;
            Ok(ImageScore {
                image: name.clone(),
                psnr_db: psnr(f, &est)?,
                ssim: ssim(f, &est)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        method,
        sensor: sensor.kind(),
        rows,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Loads the dataset and, if the method needs one, the checkpoint.
pub fn evaluate_dir(
    method: Method,
    dir: &Path,
    sensor: &Sensor,
    checkpoint: Option<&Path>,
) -> Result<EvalReport> {
    let images = read_dataset(dir)?;
    let model = match (method.needs_checkpoint(), checkpoint) {
        (true, Some(p)) => Some(Reconstructor::load(p, Some(sensor))?),
        (true, None) => {
            return Err(Error::Invalid(format!("method {method} needs --checkpoint")))
        }
        (false, _) => None,
    };
    evaluate(method, &images, sensor, model.as_ref())
}

/// One row of the shift-augmentation study.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub factor: usize,
    /// Mean PSNR, or `None` when the checkpoint is absent.
    pub psnr_db: Option<f64>,
    /// Gain over factor 1.
    pub gain_db: Option<f64>,
}

/// Mean LFCR PSNR per shift-augmentation factor and its gain over the
/// unaugmented factor 1.
pub fn shift_curve(
    images: &[(String, Image)],
    sensor: &Sensor,
    models: &[(usize, Option<Reconstructor>)],
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::with_capacity(models.len());
    for (factor, model) in models {
        let psnr_db = match model {
            Some(m) => Some(evaluate(Method::Lfcr, images, sensor, Some(m))?.mean_psnr()),
            None => None,
        };
        rows.push(CurveRow {
            factor: *factor,
            psnr_db,
            gain_db: None,
        });
    }
    let base = rows.iter().find(|r| r.factor == 1).and_then(|r| r.psnr_db);
    for r in &mut rows {
        r.gain_db = match (r.psnr_db, base) {
            (Some(p), Some(b)) => Some(p - b),
            _ => None,
        };
    }
    Ok(rows)
}

/// `shift_da,psnr_db,gain_db` with `absent` for missing checkpoints.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), fmt_db);
    let mut s = String::from("shift_da,psnr_db,gain_db\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.factor, cell(r.psnr_db), cell(r.gain_db)));
    }
    s
}

/// Checkpoint file name the curve command looks for.
pub fn curve_checkpoint_name(sensor: SensorKind, factor: usize) -> String {
    format!("{sensor}_sd{factor}.nrsr")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{MaskKind, SamplingMask};
    use crate::synth::synthetic_image;

    fn dataset() -> Vec<(String, Image)> {
        vec![
            ("a".into(), synthetic_image(24, 20, 1)),
            ("b".into(), synthetic_image(17, 13, 2)),
        ]
    }

    #[test]
    fn reference_scores_perfectly() {
        let r = evaluate(Method::Reference, &dataset(), &Sensor::LowResolution, None).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|x| x.psnr_db.is_infinite() && x.ssim == 1.0));
        assert!(r.to_csv().contains("a,reference,low-resolution,inf,1.000000\n"));
        assert_eq!(r.summary_json()["mean_psnr_db"], "inf");
    }

    #[test]
    fn bicubic_needs_no_model_and_is_deterministic() {
        let a = evaluate(Method::Bicubic, &dataset(), &Sensor::LowResolution, None).unwrap();
        let b = evaluate(Method::Bicubic, &dataset(), &Sensor::LowResolution, None).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.rows.iter().all(|x| x.psnr_db.is_finite() && x.psnr_db > 10.0));
        assert!(evaluate(Method::Lfcr, &dataset(), &Sensor::LowResolution, None).is_err());
    }

    #[test]
    fn reconstruct_keeps_dims_and_stage_matters() {
        let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, 3));
        let rec = Reconstructor::new(LfcrModel::build(sensor, 1), Some(VdsrModel::with_depth(3, 1).unwrap()));
        let f = synthetic_image(21, 30, 5);
        let a = rec.reconstruct(&f, Stage::Lfcr).unwrap();
        let b = rec.reconstruct(&f, Stage::Vdsr).unwrap();
        assert_eq!(a.dims(), f.dims());
        assert_ne!(a, b);
        let bad = rec.reconstruct_grid(&Sensor::LowResolution.measure(&f.pad_reflect_to_multiple(2)).unwrap(), Stage::Lfcr);
        assert!(matches!(bad, Err(Error::Incompatible(_))));
    }

    #[test]
    fn curve_rows() {
        let sensor = Sensor::LowResolution;
        let rec = Reconstructor::new(LfcrModel::build(sensor.clone(), 1), None);
        let rows = shift_curve(&dataset(), &sensor, &[(1, Some(rec.clone())), (4, None), (16, Some(rec))]).unwrap();
        assert_eq!(rows[0].gain_db, Some(0.0));
        assert_eq!(rows[1].psnr_db, None);
        assert_eq!(rows[2].gain_db, Some(0.0));
        let csv = curve_csv(&rows);
        assert!(csv.contains("\n4,absent,absent\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("fsr".parse::<Method>().is_err());
    }
}
