//! Sensor models and the fixed vectorizing convolution.
//!
//! Every sensor pixel covers one 2×2 cell of the high-resolution grid. A
//! quarter sampling pixel sees one quadrant of its cell, a three-quarter
//! sampling pixel averages the three quadrants that are not covered, and a
//! low-resolution pixel averages all four. Which quadrant is selected is
//! given by a [`SamplingMask`] that repeats every [`MASK_PERIOD`] pixels.
//!
//! Quadrants are numbered `2 * dy + dx` inside a cell: 0 top-left,
//! 1 top-right, 2 bottom-left, 3 bottom-right.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_raw_f32, write_file, write_raw_f32, Image};
use crate::tensor::{conv2d, conv2d_backward, ConvSpec, Scalar, Tensor};

/// Mask period on the high-resolution grid.
pub const MASK_PERIOD: usize = 8;
/// Sensor cells per mask period along one axis.
pub const MASK_CELLS: usize = MASK_PERIOD / 2;
/// Side of the square support block feeding one target block.
pub const SUPPORT: usize = 16;
/// Side of the target block reconstructed per output position.
pub const TARGET: usize = 8;
/// Support border around each target block.
pub const BORDER: usize = (SUPPORT - TARGET) / 2;
/// Measurements per support block (one per 2×2 cell).
pub const VECTOR_DEPTH: usize = SUPPORT * SUPPORT / 4;
/// Measurements lying inside the target block.
pub const CENTRAL_CHANNELS: usize = TARGET * TARGET / 4;

const SUPPORT_CELLS: usize = SUPPORT / 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorKind {
    Quarter,
    ThreeQuarter,
    LowResolution,
}

impl SensorKind {
    pub const ALL: [SensorKind; 3] = [
        SensorKind::Quarter,
        SensorKind::ThreeQuarter,
        SensorKind::LowResolution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SensorKind::Quarter => "quarter",
            SensorKind::ThreeQuarter => "three-quarter",
            SensorKind::LowResolution => "low-resolution",
        }
    }

    pub fn needs_mask(self) -> bool {
        self != SensorKind::LowResolution
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quarter" | "qs" => Ok(SensorKind::Quarter),
            "three-quarter" | "three_quarter" | "tqs" => Ok(SensorKind::ThreeQuarter),
            "low-resolution" | "low_resolution" | "lr" => Ok(SensorKind::LowResolution),
            other => Err(Error::Invalid(format!("unknown sensor kind `{other}`"))),
        }
    }
}

/// The two masked sensor layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Selected quadrant is the measured one.
    Quarter,
    /// Selected quadrant is the covered one.
    ThreeQuarter,
}

impl MaskKind {
    pub fn sensor_kind(self) -> SensorKind {
        match self {
            MaskKind::Quarter => SensorKind::Quarter,
            MaskKind::ThreeQuarter => SensorKind::ThreeQuarter,
        }
    }
}

impl TryFrom<SensorKind> for MaskKind {
    type Error = Error;

    fn try_from(k: SensorKind) -> Result<Self> {
        match k {
            SensorKind::Quarter => Ok(MaskKind::Quarter),
            SensorKind::ThreeQuarter => Ok(MaskKind::ThreeQuarter),
            SensorKind::LowResolution => Err(Error::Invalid(
                "the low-resolution sensor has no sampling mask".into(),
            )),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.sensor_kind().fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Seed(u64),
    External,
}

/// One selected quadrant per sensor cell over a `MASK_CELLS`² tile; the
/// tile repeats to cover any image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    kind: MaskKind,
    pattern: [[u8; MASK_CELLS]; MASK_CELLS],
    source: MaskSource,
}

const MASK_MAGIC: &str = "NRSMASK";

impl SamplingMask {
    /// Uniform random quadrant per cell, deterministic in `seed`.
    pub fn generate(kind: MaskKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pattern = [[0u8; MASK_CELLS]; MASK_CELLS];
        for row in pattern.iter_mut() {
            for q in row.iter_mut() {
                *q = rng.random_range(0..4u8);
            }
        }
        SamplingMask {
            kind,
            pattern,
            source: MaskSource::Seed(seed),
        }
    }

    pub fn from_pattern(
        kind: MaskKind,
        pattern: [[u8; MASK_CELLS]; MASK_CELLS],
        source: MaskSource,
    ) -> Result<Self> {
        if pattern.iter().flatten().any(|&q| q > 3) {
            return Err(Error::Invalid(format!(
                "quadrant indices must be 0..=3, got {pattern:?}"
            )));
        }
        Ok(SamplingMask {
            kind,
            pattern,
            source,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn pattern(&self) -> &[[u8; MASK_CELLS]; MASK_CELLS] {
        &self.pattern
    }

    /// Same pattern read as the other sensor layout.
    pub fn with_kind(&self, kind: MaskKind) -> Self {
        SamplingMask {
            kind,
            ..self.clone()
        }
    }

    /// Selected quadrant of the sensor cell at absolute cell coordinates.
    #[inline]
    pub fn quadrant(&self, cell_y: usize, cell_x: usize) -> u8 {
        self.pattern[cell_y % MASK_CELLS][cell_x % MASK_CELLS]
    }

    /// Occurrences of each quadrant index in the tile.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &q in self.pattern.iter().flatten() {
            h[q as usize] += 1;
        }
        h
    }

    /// Compact identity used to match checkpoints to masks.
    pub fn pattern_digits(&self) -> String {
        self.pattern
            .iter()
            .flatten()
            .map(|q| char::from(b'0' + q))
            .collect()
    }

    pub fn from_pattern_digits(kind: MaskKind, digits: &str) -> Result<Self> {
        let d: Vec<u8> = digits.bytes().map(|b| b.wrapping_sub(b'0')).collect();
        if d.len() != MASK_CELLS * MASK_CELLS {
            return Err(Error::format("mask pattern", format!("expected 16 digits, got `{digits}`")));
        }
        let mut pattern = [[0u8; MASK_CELLS]; MASK_CELLS];
        for (i, q) in d.into_iter().enumerate() {
            pattern[i / MASK_CELLS][i % MASK_CELLS] = q;
        }
        SamplingMask::from_pattern(kind, pattern, MaskSource::External)
    }

    /// Binary mask b over an H×W grid: 1 where the sensor integrates light.
    pub fn expand(&self, height: usize, width: usize) -> Result<Image> {
        check_even("expand_mask", height, width)?;
        Ok(Image::from_fn(width, height, |y, x| {
            let selected = self.quadrant(y / 2, x / 2) as usize == 2 * (y % 2) + (x % 2);
            let open = match self.kind {
                MaskKind::Quarter => selected,
                MaskKind::ThreeQuarter => !selected,
            };
            if open {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Text form: `NRSMASK <kind> <seed|external>` followed by the binary
    /// mask over one period, 8 lines of 8 digits.
    pub fn to_file_string(&self) -> String {
        let seed = match self.source {
            MaskSource::Seed(s) => s.to_string(),
            MaskSource::External => "external".to_string(),
        };
        let mut s = format!("{MASK_MAGIC} {} {seed}\n", self.kind);
        let b = self.expand(MASK_PERIOD, MASK_PERIOD).expect("even period");
        for y in 0..MASK_PERIOD {
            for x in 0..MASK_PERIOD {
                s.push(if b.get(y, x) > 0.5 { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ctx = "mask file";
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::format(ctx, "empty file"))?
            .split_whitespace()
            .collect();
        if header.len() != 3 || header[0] != MASK_MAGIC {
            return Err(Error::format(ctx, format!("expected `{MASK_MAGIC} <kind> <seed>` header")));
        }
        let kind = MaskKind::try_from(header[1].parse::<SensorKind>()?)?;
        let source = match header[2] {
            "external" => MaskSource::External,
            s => MaskSource::Seed(
                s.parse()
                    .map_err(|_| Error::format(ctx, format!("bad seed `{s}`")))?,
            ),
        };
        let mut bits = [[0u8; MASK_PERIOD]; MASK_PERIOD];
        for (y, row) in bits.iter_mut().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(ctx, format!("missing mask row {}", y + 1)))?;
            if line.len() != MASK_PERIOD || !line.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(Error::format(ctx, format!("row {} must be 8 binary digits: `{line}`", y + 1)));
            }
            for (x, b) in line.bytes().enumerate() {
                row[x] = b - b'0';
            }
        }
        if lines.next().is_some() {
            return Err(Error::format(ctx, "trailing content after 8 mask rows"));
        }
        let want = match kind {
            MaskKind::Quarter => 1,
            MaskKind::ThreeQuarter => 3,
        };
        let mut pattern = [[0u8; MASK_CELLS]; MASK_CELLS];
        for cy in 0..MASK_CELLS {
            for cx in 0..MASK_CELLS {
                let quads = [
                    bits[2 * cy][2 * cx],
                    bits[2 * cy][2 * cx + 1],
                    bits[2 * cy + 1][2 * cx],
                    bits[2 * cy + 1][2 * cx + 1],
                ];
                let open: u8 = quads.iter().sum();
                if open != want {
                    return Err(Error::format(
                        ctx,
                        format!("cell ({cy},{cx}) has {open} open pixels, a {kind} mask needs {want}"),
                    ));
                }
                let sel = want_quadrant(&quads, kind);
                pattern[cy][cx] = sel;
            }
        }
        SamplingMask::from_pattern(kind, pattern, source)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn want_quadrant(quads: &[u8; 4], kind: MaskKind) -> u8 {
    let target = match kind {
        MaskKind::Quarter => 1,
        MaskKind::ThreeQuarter => 0,
    };
    quads.iter().position(|&b| b == target).expect("validated cell") as u8
}

fn check_even(op: &'static str, height: usize, width: usize) -> Result<()> {
    if height % 2 != 0 || width % 2 != 0 || height == 0 || width == 0 {
        return Err(Error::shape(
            op,
            format!("{height}x{width} is not a whole number of 2x2 sensor cells"),
        ));
    }
    Ok(())
}

/// A sensor layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sensor {
    LowResolution,
    Masked(SamplingMask),
}

impl Sensor {
    /// Builds a sensor of `kind`, requiring a mask exactly when the kind
    /// has one. The mask is re-read as `kind` if its own kind differs.
    pub fn new(kind: SensorKind, mask: Option<SamplingMask>) -> Result<Self> {
        match (kind, mask) {
            (SensorKind::LowResolution, _) => Ok(Sensor::LowResolution),
            (k, Some(m)) => Ok(Sensor::Masked(m.with_kind(MaskKind::try_from(k)?))),
            (k, None) => Err(Error::Invalid(format!("the {k} sensor needs a sampling mask"))),
        }
    }

    pub fn kind(&self) -> SensorKind {
        match self {
            Sensor::LowResolution => SensorKind::LowResolution,
            Sensor::Masked(m) => m.kind.sensor_kind(),
        }
    }

    pub fn mask(&self) -> Option<&SamplingMask> {
        match self {
            Sensor::LowResolution => None,
            Sensor::Masked(m) => Some(m),
        }
    }

    /// Integration weights over the four quadrants of a cell.
    pub fn quadrant_weights(&self, cell_y: usize, cell_x: usize) -> [f64; 4] {
        match self {
            Sensor::LowResolution => [0.25; 4],
            Sensor::Masked(m) => {
                let q = m.quadrant(cell_y, cell_x) as usize;
                match m.kind {
                    MaskKind::Quarter => {
                        let mut w = [0.0; 4];
                        w[q] = 1.0;
                        w
                    }
                    MaskKind::ThreeQuarter => {
                        let mut w = [1.0 / 3.0; 4];
                        w[q] = 0.0;
                        w
                    }
                }
            }
        }
    }

    /// One measurement per sensor pixel.
    pub fn measure(&self, f: &Image) -> Result<MeasurementGrid> {
        match self {
            Sensor::LowResolution => sample_low_resolution(f),
            Sensor::Masked(m) => match m.kind {
                MaskKind::ThreeQuarter => sample_three_quarter(f, m),
                MaskKind::Quarter => {
                    check_even("sample_quarter", f.height(), f.width())?;
                    let values = Image::from_fn(f.width() / 2, f.height() / 2, |cy, cx| {
                        let q = m.quadrant(cy, cx) as usize;
                        f.get(2 * cy + q / 2, 2 * cx + q % 2)
                    });
                    Ok(MeasurementGrid {
                        values,
                        kind: SensorKind::Quarter,
                        mask: Some(m.clone()),
                    })
                }
            },
        }
    }
}

/// Sensor read-out: one value per low-resolution pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementGrid {
    pub values: Image,
    pub kind: SensorKind,
    pub mask: Option<SamplingMask>,
}

impl MeasurementGrid {
    /// Dimensions of the high-resolution grid the sensor covers.
    pub fn hr_dims(&self) -> (usize, usize) {
        (2 * self.values.height(), 2 * self.values.width())
    }

    pub fn sensor(&self) -> Result<Sensor> {
        Sensor::new(self.kind, self.mask.clone())
    }

    /// Writes `<prefix>.f32` (raw little-endian values) and `<prefix>.json`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let raw = prefix.with_extension("f32");
        write_raw_f32(self.values.data(), &raw)?;
        let meta = MeasurementMeta {
            width: self.values.width(),
            height: self.values.height(),
            hr_width: 2 * self.values.width(),
            hr_height: 2 * self.values.height(),
            sensor: self.kind,
            mask: self.mask.as_ref().map(|m| m.pattern_digits()),
            raw: raw
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let json = prefix.with_extension("json");
        write_file(&json, serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    /// Loads a grid from its JSON sidecar path (the raw file is resolved
    /// next to it).
    pub fn load(json_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let meta: MeasurementMeta = serde_json::from_str(&text)?;
        let raw = json_path.with_file_name(&meta.raw);
        let values = Image::new(meta.width, meta.height, read_raw_f32(&raw)?)?;
        let mask = match (&meta.mask, meta.sensor) {
            (Some(d), k) if k.needs_mask() => Some(SamplingMask::from_pattern_digits(
                MaskKind::try_from(k)?,
                d,
            )?),
            _ => None,
        };
        Ok(MeasurementGrid {
            values,
            kind: meta.sensor,
            mask,
        })
    }
}

/// JSON sidecar of a stored measurement grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub width: usize,
    pub height: usize,
    pub hr_width: usize,
    pub hr_height: usize,
    pub sensor: SensorKind,
    /// Pattern digits of the mask, row-major over the 4×4 cell tile.
    pub mask: Option<String>,
    pub raw: String,
}

/// Quarter sampling on the HR grid: `f · b`, zero where nothing is measured.
pub fn sample_quarter(f: &Image, mask: &SamplingMask) -> Result<Image> {
    check_even("sample_quarter", f.height(), f.width())?;
    let b = mask.with_kind(MaskKind::Quarter).expand(f.height(), f.width())?;
    Ok(Image::from_fn(f.width(), f.height(), |y, x| {
        f.get(y, x) * b.get(y, x)
    }))
}

/// Each measurement is the mean of the three uncovered pixels of its cell.
pub fn sample_three_quarter(f: &Image, mask: &SamplingMask) -> Result<MeasurementGrid> {
    check_even("sample_three_quarter", f.height(), f.width())?;
    let values = Image::from_fn(f.width() / 2, f.height() / 2, |cy, cx| {
        let covered = mask.quadrant(cy, cx) as usize;
        let mut sum = 0.0f64;
        for q in (0..4).filter(|&q| q != covered) {
            sum += f.get(2 * cy + q / 2, 2 * cx + q % 2) as f64;
        }
        (sum / 3.0) as f32
    });
    Ok(MeasurementGrid {
        values,
        kind: SensorKind::ThreeQuarter,
        mask: Some(mask.with_kind(MaskKind::ThreeQuarter)),
    })
}

/// Each measurement is the mean of its 2×2 cell.
pub fn sample_low_resolution(f: &Image) -> Result<MeasurementGrid> {
    check_even("sample_low_resolution", f.height(), f.width())?;
    let values = Image::from_fn(f.width() / 2, f.height() / 2, |cy, cx| {
        let sum = f.get(2 * cy, 2 * cx) as f64
            + f.get(2 * cy, 2 * cx + 1) as f64
            + f.get(2 * cy + 1, 2 * cx) as f64
            + f.get(2 * cy + 1, 2 * cx + 1) as f64;
        (sum / 4.0) as f32
    });
    Ok(MeasurementGrid {
        values,
        kind: SensorKind::LowResolution,
        mask: None,
    })
}

/// Channel indices of the measurements inside the target block, ascending.
pub fn central_channel_indices() -> [usize; CENTRAL_CHANNELS] {
    let lo = BORDER / 2;
    let hi = lo + TARGET / 2;
    let mut out = [0; CENTRAL_CHANNELS];
    let mut i = 0;
    for r in lo..hi {
        for c in lo..hi {
            out[i] = r * SUPPORT_CELLS + c;
            i += 1;
        }
    }
    out
}

/// The non-trainable convolution that gathers the measurements of every
/// 16×16 support block into 64 channels (kernel 16, stride 8, pad 4).
///
/// Channel `r * 8 + c` holds the measurement of support cell (r, c).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorizingKernel {
    weights: Tensor<f64>,
    spec: ConvSpec,
    kind: SensorKind,
}

pub fn build_vectorizing_kernel(sensor: &Sensor) -> VectorizingKernel {
    let mut weights = Tensor::zeros([VECTOR_DEPTH, 1, SUPPORT, SUPPORT]);
    // Support blocks start at 8·k - 4, i.e. half a mask period into the
    // tile, so cell r of a block sits at tile row (r + 2) mod 4.
    let phase = MASK_CELLS - BORDER / 2;
    for r in 0..SUPPORT_CELLS {
        for c in 0..SUPPORT_CELLS {
            let w = sensor.quadrant_weights(r + phase, c + phase);
            for (q, &wq) in w.iter().enumerate() {
                weights.set([r * SUPPORT_CELLS + c, 0, 2 * r + q / 2, 2 * c + q % 2], wq);
            }
        }
    }
    VectorizingKernel {
        weights,
        spec: ConvSpec::new(1, VECTOR_DEPTH, SUPPORT, TARGET, BORDER).frozen(),
        kind: sensor.kind(),
    }
}

fn check_block_aligned(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h % TARGET != 0 || w % TARGET != 0 {
        return Err(Error::shape(
            op,
            format!("{h}x{w} is not a multiple of the {TARGET}-pixel block size"),
        ));
    }
    Ok(())
}

impl VectorizingKernel {
    pub fn weights(&self) -> &Tensor<f64> {
        &self.weights
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn kind(&self) -> SensorKind {
        self.kind
    }

    /// Applies the kernel to an (N, 1, H, W) batch. Accumulation runs in
    /// f64 so integer-valued images give correctly rounded means.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_block_aligned("vectorize", x.height(), x.width())?;
        let out = conv2d(&x.cast::<f64>(), &self.weights, None, &self.spec)?;
        Ok(out.cast())
    }

    /// Input gradient of [`VectorizingKernel::apply`].
    pub fn backward<T: Scalar>(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv2d_backward(
            &x.cast::<f64>(),
            &self.weights,
            &self.spec,
            &grad_out.cast::<f64>(),
            true,
            false,
        )?;
        Ok(g.input.expect("requested").cast())
    }
}

/// Vectorized measurements of one image: (1, 64, H/8, W/8).
pub fn vectorize(f: &Image, kernel: &VectorizingKernel) -> Result<Tensor<f32>> {
    kernel.apply(&Image::batch_to_tensor::<f32>(std::slice::from_ref(f))?)
}

/// Same layout as [`vectorize`], gathered from stored sensor read-outs.
pub fn vectorize_grid(grid: &MeasurementGrid) -> Result<Tensor<f32>> {
    let (h, w) = grid.hr_dims();
    check_block_aligned("vectorize_grid", h, w)?;
    let (bh, bw) = (h / TARGET, w / TARGET);
    let cells_per_block = TARGET / 2;
    let shift = (BORDER / 2) as isize;
    let (gh, gw) = (grid.values.height() as isize, grid.values.width() as isize);
    let mut out = Tensor::zeros([1, VECTOR_DEPTH, bh, bw]);
    for by in 0..bh {
        for bx in 0..bw {
            for r in 0..SUPPORT_CELLS {
                for c in 0..SUPPORT_CELLS {
                    let gy = (by * cells_per_block + r) as isize - shift;
                    let gx = (bx * cells_per_block + c) as isize - shift;
                    if gy >= 0 && gx >= 0 && gy < gh && gx < gw {
                        let v = grid.values.get(gy as usize, gx as usize);
                        out.set([0, r * SUPPORT_CELLS + c, by, bx], v);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn test_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random_range(0..256u32) as f32)
    }

    fn qmask(seed: u64) -> SamplingMask {
        SamplingMask::generate(MaskKind::Quarter, seed)
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(qmask(7), qmask(7));
        assert_ne!(qmask(7).pattern(), qmask(8).pattern());
    }

    #[test]
    fn expanded_counts() {
        let q = qmask(3);
        let b = q.expand(16, 16).unwrap();
        assert_eq!(b.data().iter().filter(|&&v| v == 1.0).count(), 64);
        let t = q.with_kind(MaskKind::ThreeQuarter).expand(16, 16).unwrap();
        assert_eq!(t.data().iter().filter(|&&v| v == 1.0).count(), 192);
        assert!(b.data().iter().chain(t.data()).all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn expand_rejects_odd_dims() {
        assert!(qmask(1).expand(15, 16).is_err());
    }

    #[test]
    fn quadrant_frequencies_are_uniform() {
        let mut h = [0usize; 4];
        for seed in 0..1000 {
            for (a, b) in h.iter_mut().zip(qmask(seed).histogram()) {
                *a += b;
            }
        }
        let total: usize = h.iter().sum();
        for count in h {
            let frac = count as f64 / total as f64;
            assert!((frac - 0.25).abs() < 0.05, "{h:?}");
        }
    }

    #[test]
    fn mask_file_round_trip() {
        for kind in [MaskKind::Quarter, MaskKind::ThreeQuarter] {
            let m = SamplingMask::generate(kind, 99);
            let text = m.to_file_string();
            assert!(text.starts_with(&format!("NRSMASK {kind} 99\n")));
            assert_eq!(text.lines().count(), 9);
            assert_eq!(SamplingMask::parse(&text).unwrap(), m);
        }
    }

    #[test]
    fn mask_file_validation() {
        let good = qmask(5).to_file_string();
        let two_open = good.replacen("10", "11", 1).replacen("01", "11", 1);
        assert!(SamplingMask::parse(&two_open).is_err());
        assert!(SamplingMask::parse("NRSMASK sideways 1\n").is_err());
        let truncated: String = good.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(SamplingMask::parse(&truncated).is_err());
        let external = good.replacen(" 5\n", " external\n", 1);
        assert_eq!(SamplingMask::parse(&external).unwrap().source(), MaskSource::External);
    }

    #[test]
    fn quarter_sampling_examples() {
        let m = qmask(11);
        let f = Image::filled(16, 16, 100.0);
        let s = sample_quarter(&f, &m).unwrap();
        let b = m.expand(16, 16).unwrap();
        assert_eq!(s, b.map(|v| v * 100.0));
        let g = test_image(24, 16, 2).map(|v| v + 1.0);
        let s = sample_quarter(&g, &m).unwrap();
        assert_eq!(s.data().iter().filter(|&&v| v != 0.0).count(), 24 * 16 / 4);
        for y in 0..16 {
            for x in 0..24 {
                if m.expand(16, 24).unwrap().get(y, x) == 1.0 {
                    assert_eq!(s.get(y, x), g.get(y, x));
                }
            }
        }
        assert!(sample_quarter(&Image::filled(5, 4, 0.0), &m).is_err());
    }

    #[test]
    fn three_quarter_cell_mean() {
        // Covered quadrant 0 (top-left) everywhere.
        let m = SamplingMask::from_pattern(MaskKind::ThreeQuarter, [[0; 4]; 4], MaskSource::External)
            .unwrap();
        let f = Image::new(2, 2, vec![3.0, 6.0, 9.0, 12.0]).unwrap();
        assert_eq!(sample_three_quarter(&f, &m).unwrap().values.data(), &[9.0]);
        let c = sample_three_quarter(&Image::filled(8, 8, 100.0), &m).unwrap();
        assert!(c.values.data().iter().all(|&v| v == 100.0));
    }

    #[test]
    fn low_resolution_examples() {
        let f = Image::new(2, 2, vec![0.0, 4.0, 8.0, 12.0]).unwrap();
        assert_eq!(sample_low_resolution(&f).unwrap().values.data(), &[6.0]);
        let ramp = Image::from_fn(8, 4, |_, x| x as f32);
        let g = sample_low_resolution(&ramp).unwrap();
        for v in 0..4 {
            assert_eq!(g.values.get(1, v), 2.0 * v as f32 + 0.5);
        }
    }

    #[test]
    fn low_resolution_preserves_constants_through_nearest_upsample() {
        let f = Image::filled(12, 10, 37.25);
        let g = sample_low_resolution(&f).unwrap();
        let up = Image::from_fn(12, 10, |y, x| g.values.get(y / 2, x / 2));
        assert_eq!(up, f);
    }

    #[test]
    fn kernel_structure() {
        let m = qmask(4);
        let kq = build_vectorizing_kernel(&Sensor::Masked(m.clone()));
        assert_eq!(kq.weights().shape(), [64, 1, 16, 16]);
        assert!(!kq.spec().trainable);
        for ch in 0..64 {
            let plane = &kq.weights().sample(ch)[..];
            let nz: Vec<_> = plane.iter().filter(|&&v| v != 0.0).collect();
            assert_eq!(nz, vec![&1.0]);
        }
        let kt = build_vectorizing_kernel(&Sensor::Masked(m.with_kind(MaskKind::ThreeQuarter)));
        let kl = build_vectorizing_kernel(&Sensor::LowResolution);
        for ch in 0..64 {
            let st: f64 = kt.weights().sample(ch).iter().sum();
            let sl: f64 = kl.weights().sample(ch).iter().sum();
            assert!((st - 1.0).abs() < 1e-12 && (sl - 1.0).abs() < 1e-12);
            assert_eq!(kt.weights().sample(ch).iter().filter(|&&v| v != 0.0).count(), 3);
        }
    }

    #[test]
    fn vectorize_sizes_and_constants() {
        let m = qmask(9).with_kind(MaskKind::ThreeQuarter);
        let k = build_vectorizing_kernel(&Sensor::Masked(m));
        let v = vectorize(&Image::filled(16, 16, 100.0), &k).unwrap();
        assert_eq!(v.shape(), [1, 64, 2, 2]);
        // With a 4-pixel zero border only the cells inside the image see
        // the constant; on a 32×32 image the centre block is fully interior.
        let v = vectorize(&Image::filled(32, 32, 100.0), &k).unwrap();
        for ch in 0..64 {
            assert_eq!(v.at([0, ch, 1, 1]), 100.0);
        }
        assert!(vectorize(&Image::filled(12, 16, 0.0), &k).is_err());
    }

    #[test]
    fn central_indices() {
        let c = central_channel_indices();
        assert_eq!(c.len(), 16);
        assert_eq!(c[0], 18);
        assert_eq!(c[15], 45);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let f = test_image(16, 16, 1);
        let g = sample_three_quarter(&f, &qmask(2)).unwrap();
        let prefix = dir.path().join("meas");
        g.save(&prefix).unwrap();
        let back = MeasurementGrid::load(&prefix.with_extension("json")).unwrap();
        assert_eq!(back.values, g.values);
        assert_eq!(back.kind, g.kind);
        assert_eq!(back.mask.unwrap().pattern(), g.mask.unwrap().pattern());
    }

    proptest! {
        #[test]
        fn mask_is_eight_periodic(seed in any::<u64>(), tqs in any::<bool>()) {
            let kind = if tqs { MaskKind::ThreeQuarter } else { MaskKind::Quarter };
            let b = SamplingMask::generate(kind, seed).expand(32, 32).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    prop_assert_eq!(b.get(y, x), b.get(y + 8, x));
                    prop_assert_eq!(b.get(y, x), b.get(y, x + 8));
                }
            }
        }

        #[test]
        fn quarter_and_three_quarter_are_dual(seed in any::<u64>()) {
            let q = SamplingMask::generate(MaskKind::Quarter, seed);
            let bq = q.expand(16, 16).unwrap();
            let bt = q.with_kind(MaskKind::ThreeQuarter).expand(16, 16).unwrap();
            for (a, b) in bq.data().iter().zip(bt.data()) {
                prop_assert_eq!(a + b, 1.0);
            }
        }

        #[test]
        fn three_quarter_equals_masked_cell_sum_over_three(seed in any::<u64>()) {
            let m = SamplingMask::generate(MaskKind::ThreeQuarter, seed);
            let f = test_image(16, 24, seed ^ 0xabc);
            let g = sample_three_quarter(&f, &m).unwrap();
            let b = m.expand(24, 16).unwrap();
            for cy in 0..12 {
                for cx in 0..8 {
                    let mut s = 0.0f64;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += (f.get(2 * cy + dy, 2 * cx + dx) * b.get(2 * cy + dy, 2 * cx + dx)) as f64;
                        }
                    }
                    prop_assert_eq!(g.values.get(cy, cx), (s / 3.0) as f32);
                }
            }
        }

        #[test]
        fn grid_vectorization_matches_image_vectorization(seed in any::<u64>(), which in 0usize..3) {
            let kind = SensorKind::ALL[which];
            let sensor = Sensor::new(kind, Some(qmask(seed))).unwrap();
            let f = test_image(24, 16, seed);
            let k = build_vectorizing_kernel(&sensor);
            let grid = sensor.measure(&f).unwrap();
            prop_assert_eq!(vectorize_grid(&grid).unwrap(), vectorize(&f, &k).unwrap());
        }
    }
}
