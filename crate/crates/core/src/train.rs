//! Patch extraction, augmentation and the two sequential training phases:
//! LFCR alone, then VDSR on top of the frozen LFCR.
//!
//! Pixel values are divided by 255 on the way into the networks, so logged
//! losses are mean squared errors on the 0..1 scale.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{reflect, Image};
use crate::layer::{seeded_rng, LayerStack};
use crate::lfcr::LfcrModel;
use crate::sensor::{Sensor, MASK_PERIOD};
use crate::tensor::{mse_loss, Adam, AdamConfig, Tensor};
use crate::vdsr::{VdsrModel, VDSR_DEPTH};

/// Samples per forward/backward chunk. Gradients are summed over chunks in
/// order, so results do not depend on the thread count.
pub const CHUNK: usize = 4;

/// Scale between stored pixel values and network values.
pub const PIXEL_SCALE: f32 = 255.0;

const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub patch_stride: usize,
    pub shift_set: Vec<(usize, usize)>,
    pub flips_rotations: bool,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs of the VDSR phase; defaults to `epochs`.
    pub vdsr_epochs: Option<usize>,
    pub vdsr_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 48,
            patch_stride: 40,
            shift_set: shift_set_for_factor(16).expect("valid factor"),
            flips_rotations: true,
            epochs: 100,
            initial_lr: 1e-4,
            lr_decay_every: 10,
            lr_decay_factor: 10.0,
            lr_floor: 1e-8,
            batch_size: 64,
            seed: 0,
            vdsr_epochs: None,
            vdsr_depth: VDSR_DEPTH,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Invalid(format!("bad boolean `{value}` for `{key}`"))),
    }
}

/// Parses `dy:dx` pairs separated by commas or whitespace.
fn parse_shift_set(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Invalid(format!("shift `{pair}` is not of the form dy:dx")))?;
            Ok((parse_value("shift_set", a)?, parse_value("shift_set", b)?))
        })
        .collect()
}

/// Shift sets by augmentation factor; 16 is the full {0,2,4,6}² set.
pub fn shift_set_for_factor(factor: usize) -> Result<Vec<(usize, usize)>> {
    let (ys, xs): (&[usize], &[usize]) = match factor {
        1 => (&[0], &[0]),
        2 => (&[0], &[0, 4]),
        4 => (&[0, 4], &[0, 4]),
        8 => (&[0, 2, 4, 6], &[0, 4]),
        16 => (&[0, 2, 4, 6], &[0, 2, 4, 6]),
        _ => {
            return Err(Error::Invalid(format!(
                "shift augmentation factor must be 1, 2, 4, 8 or 16, got {factor}"
            )))
        }
    };
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect())
}

impl TrainConfig {
    /// Reads `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("config line {}: expected key=value", n + 1)))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "patch_stride" => self.patch_stride = parse_value(key, value)?,
            "shift_set" => self.shift_set = parse_shift_set(value)?,
            "shift_da" => self.shift_set = shift_set_for_factor(parse_value(key, value)?)?,
            "flips_rotations" => self.flips_rotations = parse_bool(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "initial_lr" => self.initial_lr = parse_value(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_value(key, value)?,
            "lr_floor" => self.lr_floor = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "vdsr_epochs" => self.vdsr_epochs = Some(parse_value(key, value)?),
            "vdsr_depth" => self.vdsr_depth = parse_value(key, value)?,
            _ => return Err(Error::Invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.patch_size == 0 || self.patch_size % MASK_PERIOD != 0 {
            return bad(format!("patch_size {} must be a positive multiple of 8", self.patch_size));
        }
        if self.patch_stride == 0 || self.patch_stride % MASK_PERIOD != 0 {
            return bad(format!("patch_stride {} must be a positive multiple of 8", self.patch_stride));
        }
        if self.shift_set.is_empty() {
            return bad("shift_set is empty".into());
        }
        if let Some(s) = self.shift_set.iter().find(|(y, x)| y % 2 != 0 || x % 2 != 0) {
            return bad(format!("shift {s:?} is not even"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch_size and lr_decay_every must be at least 1".into());
        }
        if !(self.initial_lr > 0.0 && self.lr_floor >= 0.0 && self.lr_decay_factor >= 1.0) {
            return bad("learning rates must be positive and lr_decay_factor at least 1".into());
        }
        if self.vdsr_depth < 2 {
            return bad(format!("vdsr_depth {} must be at least 2", self.vdsr_depth));
        }
        Ok(())
    }

    /// Settings of the VDSR phase: a tenth of the initial learning rate.
    pub fn vdsr_phase(&self) -> TrainConfig {
        TrainConfig {
            initial_lr: self.initial_lr / 10.0,
            epochs: self.vdsr_epochs.unwrap_or(self.epochs),
            ..self.clone()
        }
    }

    /// Augmented samples per source patch.
    pub fn augmentation_factor(&self) -> usize {
        self.shift_set.len() * if self.flips_rotations { 8 } else { 1 }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shifts: Vec<String> = self.shift_set.iter().map(|(y, x)| format!("{y}:{x}")).collect();
        writeln!(f, "patch_size={}", self.patch_size)?;
        writeln!(f, "patch_stride={}", self.patch_stride)?;
        writeln!(f, "shift_set={}", shifts.join(","))?;
        writeln!(f, "flips_rotations={}", self.flips_rotations)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "initial_lr={:e}", self.initial_lr)?;
        writeln!(f, "lr_decay_every={}", self.lr_decay_every)?;
        writeln!(f, "lr_decay_factor={}", self.lr_decay_factor)?;
        writeln!(f, "lr_floor={:e}", self.lr_floor)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "seed={}", self.seed)?;
        if let Some(e) = self.vdsr_epochs {
            writeln!(f, "vdsr_epochs={e}")?;
        }
        writeln!(f, "vdsr_depth={}", self.vdsr_depth)
    }
}

/// Step size for a 1-based epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let decays = (epoch.max(1) - 1) / config.lr_decay_every;
    let lr = config.initial_lr * config.lr_decay_factor.powi(-(decays.min(i32::MAX as usize) as i32));
    lr.max(config.lr_floor)
}

/// One of the eight symmetries of the square: `t % 4` quarter turns
/// counter-clockwise, then a horizontal flip when `t >= 4`.
pub fn dihedral(patch: &Image, t: u8) -> Image {
    let n = patch.width();
    debug_assert_eq!(n, patch.height());
    Image::from_fn(n, n, |y, x| {
        let x = if t >= 4 { n - 1 - x } else { x };
        let (sy, sx) = match t % 4 {
            0 => (y, x),
            1 => (x, n - 1 - y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (n - 1 - x, y),
        };
        patch.get(sy, sx)
    })
}

pub fn augment_flip_rotate(patch: &Image) -> Result<Vec<Image>> {
    if patch.width() != patch.height() {
        return Err(Error::Invalid(format!(
            "flip/rotate needs a square patch, got {}×{}",
            patch.height(),
            patch.width()
        )));
    }
    Ok((0..8).map(|t| dihedral(patch, t)).collect())
}

fn trimmed(n: usize) -> usize {
    n / MASK_PERIOD * MASK_PERIOD
}

/// Content of `image` moved up-left by `shift`, on the image's own grid
/// trimmed to multiples of 8. Pixels pulled in past the bottom or right
/// edge are mirrored, so every shift yields the same dimensions.
pub fn shift_crop(image: &Image, (dy, dx): (usize, usize)) -> Result<Image> {
    let (h, w) = image.dims();
    let (th, tw) = (trimmed(h), trimmed(w));
    if dy >= h || dx >= w || th == 0 || tw == 0 {
        return Err(Error::Invalid(format!(
            "shift ({dy},{dx}) does not fit a {h}×{w} image"
        )));
    }
    if dy % 2 != 0 || dx % 2 != 0 {
        return Err(Error::Invalid(format!("shift ({dy},{dx}) is not even")));
    }
    Ok(Image::from_fn(tw, th, |y, x| {
        image.get(reflect(y + dy, h), reflect(x + dx, w))
    }))
}

pub fn augment_shift(image: &Image, shifts: &[(usize, usize)]) -> Result<Vec<Image>> {
    shifts.iter().map(|&s| shift_crop(image, s)).collect()
}

/// Where a training sample comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    pub image: usize,
    /// Top-left corner on the shifted grid; both multiples of 8.
    pub offset: (usize, usize),
    pub shift: (usize, usize),
    /// Index into the dihedral group, see [`dihedral`].
    pub transform: u8,
}

/// Training samples described lazily; pixels are produced on demand.
#[derive(Clone, Debug)]
pub struct PatchSet {
    images: Vec<Image>,
    refs: Vec<PatchRef>,
    size: usize,
}

/// Top-left corners of the `size` windows at multiples of `stride`.
fn offsets(n: usize, size: usize, stride: usize) -> Vec<usize> {
    if n < size {
        return Vec::new();
    }
    (0..=(n - size) / stride).map(|i| i * stride).collect()
}

/// Patches of every image at offsets that are multiples of the stride,
/// without augmentation. Images smaller than a patch are skipped.
pub fn extract_patches(images: &[Image], config: &TrainConfig) -> PatchSet {
    let mut refs = Vec::new();
    let mut kept = Vec::new();
    for img in images {
        let (h, w) = (trimmed(img.height()), trimmed(img.width()));
        if h < config.patch_size || w < config.patch_size {
            log::warn!(
                "skipping {}×{} image smaller than a {} pixel patch",
                img.height(),
                img.width(),
                config.patch_size
            );
            continue;
        }
        let id = kept.len();
        for oy in offsets(h, config.patch_size, config.patch_stride) {
            for ox in offsets(w, config.patch_size, config.patch_stride) {
                refs.push(PatchRef {
                    image: id,
                    offset: (oy, ox),
                    shift: (0, 0),
                    transform: 0,
                });
            }
        }
        kept.push(img.clone());
    }
    PatchSet {
        images: kept,
        refs,
        size: config.patch_size,
    }
}

impl PatchSet {
    /// Every patch under every shift and, if enabled, every flip/rotation.
    pub fn augmented(&self, config: &TrainConfig) -> PatchSet {
        let transforms: &[u8] = if config.flips_rotations {
            &[0, 1, 2, 3, 4, 5, 6, 7]
        } else {
            &[0]
        };
        let mut refs = Vec::with_capacity(self.refs.len() * config.augmentation_factor());
        for r in &self.refs {
            for &shift in &config.shift_set {
                for &transform in transforms {
                    refs.push(PatchRef {
                        shift,
                        transform,
                        ..*r
                    });
                }
            }
        }
        PatchSet {
            images: self.images.clone(),
            refs,
            size: self.size,
        }
    }

    /// Keeps the first `n` samples.
    pub fn truncated(mut self, n: usize) -> PatchSet {
        self.refs.truncate(n);
        self
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn refs(&self) -> &[PatchRef] {
        &self.refs
    }

    pub fn patch_size(&self) -> usize {
        self.size
    }

    pub fn patch(&self, i: usize) -> Image {
        let r = self.refs[i];
        let img = &self.images[r.image];
        let (h, w) = img.dims();
        let (oy, ox) = (r.offset.0 + r.shift.0, r.offset.1 + r.shift.1);
        let p = Image::from_fn(self.size, self.size, |y, x| {
            img.get(reflect(oy + y, h), reflect(ox + x, w))
        });
        if r.transform == 0 {
            p
        } else {
            dihedral(&p, r.transform)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Lfcr,
    Vdsr,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Lfcr => "lfcr",
            Stage::Vdsr => "vdsr",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lfcr" => Ok(Stage::Lfcr),
            "vdsr" | "lfcr+vdsr" => Ok(Stage::Vdsr),
            _ => Err(Error::Invalid(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Progress to continue from.
#[derive(Clone, Debug)]
pub struct Resume {
    pub epochs_done: usize,
    pub step: u64,
    pub adam: Adam,
}

impl Resume {
    /// Reads progress of `stage` from a checkpoint written by this module.
    pub fn from_checkpoint(ckpt: &Checkpoint, stage: Stage) -> Result<Option<Resume>> {
        let stored: Stage = ckpt.meta_parse("stage")?;
        if stored != stage {
            return Ok(None);
        }
        let adam = ckpt
            .restore_adam(AdamConfig::default())?
            .unwrap_or_else(|| Adam::new(AdamConfig::default()));
        Ok(Some(Resume {
            epochs_done: ckpt.meta_parse("epoch")?,
            step: ckpt.meta_parse("step")?,
            adam,
        }))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for per-epoch checkpoints and the CSV log; none disables
    /// all file output.
    pub out_dir: Option<PathBuf>,
    /// Per-epoch checkpoints kept per phase.
    pub keep_checkpoints: usize,
    pub resume: Option<Resume>,
    /// Global step counter value before the first step of this phase.
    pub first_step: u64,
    /// Accumulate gradients in this many chunks concurrently.
    pub parallel: bool,
}

impl TrainOptions {
    pub fn in_memory() -> Self {
        TrainOptions {
            keep_checkpoints: 2,
            ..Default::default()
        }
    }

    pub fn writing_to(dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            out_dir: Some(dir.into()),
            keep_checkpoints: 2,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    /// Sample-weighted mean loss of each epoch run in this call.
    pub epoch_losses: Vec<f64>,
    pub samples_per_epoch: usize,
    pub last_checkpoint: Option<PathBuf>,
    pub final_step: u64,
    pub adam: Adam,
}

pub fn checkpoint_name(stage: Stage, epoch: usize) -> String {
    format!("{stage}_epoch{epoch:04}.nrsr")
}

pub fn log_name(stage: Stage) -> String {
    format!("{stage}_log.csv")
}

/// Network being optimized in one phase.
trait Phase: Sync {
    const STAGE: Stage;

    /// Loss of one chunk and its parameter gradients scaled by `weight`.
    fn chunk_grads(&self, chunk: &[Image], weight: f32) -> Result<(f64, Vec<Vec<f32>>)>;
    fn trainable(&mut self) -> Vec<(String, &mut Tensor)>;
    fn snapshot(&self) -> Checkpoint;
}

struct LfcrPhase<'a>(&'a mut LfcrModel);

struct VdsrPhase<'a> {
    lfcr: &'a LfcrModel,
    vdsr: &'a mut VdsrModel,
}

fn scaled_batch(chunk: &[Image]) -> Result<Tensor> {
    Ok(Image::batch_to_tensor::<f32>(chunk)?.map(|v| v / PIXEL_SCALE))
}

fn take_grads<M: LayerStack<f32>>(model: &M) -> Vec<Vec<f32>> {
    model
        .params()
        .into_iter()
        .map(|(_, p)| p.grad().map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec))
        .collect()
}

impl Phase for LfcrPhase<'_> {
    const STAGE: Stage = Stage::Lfcr;

    fn chunk_grads(&self, chunk: &[Image], weight: f32) -> Result<(f64, Vec<Vec<f32>>)> {
        let mut m = self.0.clone();
        m.zero_grad();
        let x = scaled_batch(chunk)?;
        let (y, cache) = m.forward_cached(&m.vectorize(&x)?)?;
        let (loss, g) = mse_loss(&y, &x)?;
        m.backward(&cache, &g.map(|v| v * weight), false)?;
        Ok((loss as f64 * weight as f64, take_grads(&m)))
    }

    fn trainable(&mut self) -> Vec<(String, &mut Tensor)> {
        self.0.params_mut()
    }

    fn snapshot(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_lfcr(self.0);
        c
    }
}

impl Phase for VdsrPhase<'_> {
    const STAGE: Stage = Stage::Vdsr;

    fn chunk_grads(&self, chunk: &[Image], weight: f32) -> Result<(f64, Vec<Vec<f32>>)> {
        let mut m = self.vdsr.clone();
        m.zero_grad();
        let x = scaled_batch(chunk)?;
        let fhat = self.lfcr.forward(&x)?;
        let (r, cache) = m.residual_cached(&fhat)?;
        let mut out = fhat;
        for (o, v) in out.data_mut().iter_mut().zip(r.data()) {
            *o += *v;
        }
        let (loss, g) = mse_loss(&out, &x)?;
        m.backward(&cache, &g.map(|v| v * weight), false)?;
        Ok((loss as f64 * weight as f64, take_grads(&m)))
    }

    fn trainable(&mut self) -> Vec<(String, &mut Tensor)> {
        self.vdsr.params_mut()
    }

    fn snapshot(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_lfcr(self.lfcr);
        c.push_vdsr(self.vdsr);
        c
    }
}

/// Sets the parameter gradients to the batch-mean loss gradient and
/// returns the batch loss.
fn batch_step<P: Phase>(phase: &mut P, batch: &[Image], parallel: bool) -> Result<f64> {
    let n = batch.len() as f32;
    let chunks: Vec<&[Image]> = batch.chunks(CHUNK).collect();
    let run = |c: &&[Image]| phase.chunk_grads(c, c.len() as f32 / n);
    let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = if parallel {
        chunks.par_iter().map(run).collect()
    } else {
        chunks.iter().map(run).collect()
    };
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f32>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => {
                for (a, b) in t.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let total = total.unwrap_or_default();
    for ((_, p), g) in phase.trainable().into_iter().zip(total) {
        p.grad_mut().copy_from_slice(&g);
    }
    Ok(loss)
}

fn open_log(dir: &Path, stage: Stage, append: bool) -> Result<File> {
    let path = dir.join(log_name(stage));
    if append && path.exists() {
        return OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e));
    }
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "epoch,step,lr,loss").map_err(|e| Error::io(&path, e))?;
    Ok(f)
}

fn prune_checkpoints(dir: &Path, stage: Stage, newest: usize, keep: usize) {
    if keep == 0 {
        return;
    }
    for epoch in 1..=newest.saturating_sub(keep) {
        let p = dir.join(checkpoint_name(stage, epoch));
        if p.exists() {
            if let Err(e) = fs::remove_file(&p) {
                log::warn!("could not remove old checkpoint {}: {e}", p.display());
            }
        }
    }
}

fn run_phase<P: Phase>(
    phase: &mut P,
    patches: &PatchSet,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::Invalid("no training patches".into()));
    }
    let stage = P::STAGE;
    let (first_epoch, mut step, mut adam) = match &opts.resume {
        Some(r) => (r.epochs_done + 1, r.step, r.adam.clone()),
        None => (1, opts.first_step, Adam::new(AdamConfig::default())),
    };
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_log(dir, stage, opts.resume.is_some())?)
        }
        None => None,
    };
    let stream_base = SHUFFLE_STREAM * if stage == Stage::Lfcr { 1 } else { 2 };
    let mut report = TrainReport {
        log: Vec::new(),
        epoch_losses: Vec::new(),
        samples_per_epoch: patches.len(),
        last_checkpoint: None,
        final_step: step,
        adam: adam.clone(),
    };
    log::info!("{stage}: {} samples per epoch", patches.len());
    for epoch in first_epoch..=config.epochs {
        let lr = lr_schedule(epoch, config);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut seeded_rng(config.seed, stream_base + epoch as u64));
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Image> = idx.iter().map(|&i| patches.patch(i)).collect();
            let loss = batch_step(phase, &batch, opts.parallel)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    last_checkpoint: report.last_checkpoint.clone(),
                });
            }
            adam.step(&mut phase.trainable(), lr as f32)?;
            epoch_loss += loss * batch.len() as f64;
            let entry = StepLog { epoch, step, lr, loss };
            if let (Some(f), Some(dir)) = (log_file.as_mut(), &opts.out_dir) {
                writeln!(f, "{},{},{:e},{}", entry.epoch, entry.step, entry.lr, entry.loss)
                    .map_err(|e| Error::io(dir.join(log_name(stage)), e))?;
            }
            report.log.push(entry);
        }
        let mean = epoch_loss / patches.len() as f64;
        report.epoch_losses.push(mean);
        log::info!("{stage} epoch {epoch}: lr {lr:e}, mean loss {mean:.6e}");
        if let Some(dir) = &opts.out_dir {
            let mut ckpt = phase.snapshot();
            ckpt.set_meta("stage", stage);
            ckpt.set_meta("epoch", epoch);
            ckpt.set_meta("step", step);
            ckpt.set_meta("samples_per_epoch", patches.len());
            ckpt.push_adam(&adam);
            let path = dir.join(checkpoint_name(stage, epoch));
            ckpt.save(&path)?;
            report.last_checkpoint = Some(path);
            prune_checkpoints(dir, stage, epoch, opts.keep_checkpoints);
        }
    }
    report.final_step = step;
    report.adam = adam;
    Ok(report)
}

/// Minimizes the LFCR reconstruction error over all LFCR parameters.
pub fn train_lfcr(
    model: &mut LfcrModel,
    patches: &PatchSet,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    run_phase(&mut LfcrPhase(model), patches, config, opts)
}

/// Minimizes the error of `f̂ + r` over the VDSR parameters with the LFCR
/// held fixed. `config` is the overall configuration; the phase runs with
/// [`TrainConfig::vdsr_phase`].
pub fn train_vdsr(
    lfcr: &LfcrModel,
    vdsr: &mut VdsrModel,
    patches: &PatchSet,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    run_phase(&mut VdsrPhase { lfcr, vdsr }, patches, &config.vdsr_phase(), opts)
}

/// File the pipeline writes its final models to.
pub const MODEL_FILE: &str = "model.nrsr";

/// Models and per-phase reports of [`train_pipeline`]. A phase that was
/// already complete in the resumed checkpoint has no report.
#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub lfcr: LfcrModel,
    pub vdsr: Option<VdsrModel>,
    pub lfcr_report: Option<TrainReport>,
    pub vdsr_report: Option<TrainReport>,
    pub samples_per_epoch: usize,
    pub model_path: Option<PathBuf>,
}

impl PipelineReport {
    /// Both phases' step logs in order.
    pub fn log(&self) -> Vec<StepLog> {
        let mut log: Vec<StepLog> = Vec::new();
        for r in [&self.lfcr_report, &self.vdsr_report].into_iter().flatten() {
            log.extend_from_slice(&r.log);
        }
        log
    }

    /// Checkpoint holding the sensor and every trained model.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_lfcr(&self.lfcr);
        if let Some(v) = &self.vdsr {
            c.push_vdsr(v);
        }
        c.set_meta("stage", if self.vdsr.is_some() { Stage::Vdsr } else { Stage::Lfcr });
        c.set_meta("samples_per_epoch", self.samples_per_epoch);
        c
    }
}

/// Trains the LFCR and, when `last` is [`Stage::Vdsr`], the VDSR on top of
/// it. With `resume`, continues from a per-epoch checkpoint of either
/// phase. With `out_dir`, writes per-epoch checkpoints, CSV logs and the
/// final [`MODEL_FILE`].
pub fn train_pipeline(
    images: &[Image],
    sensor: Sensor,
    config: &TrainConfig,
    last: Stage,
    resume: Option<&Checkpoint>,
    out_dir: Option<&Path>,
    parallel: bool,
) -> Result<PipelineReport> {
    config.validate()?;
    let patches = extract_patches(images, config).augmented(config);
    if patches.is_empty() {
        return Err(Error::Invalid(format!(
            "no image is at least {0}×{0} pixels",
            config.patch_size
        )));
    }
    let opts = |resume: Option<Resume>, first_step: u64| TrainOptions {
        out_dir: out_dir.map(Path::to_path_buf),
        keep_checkpoints: 2,
        resume,
        first_step,
        parallel,
    };
    let resumed_stage = match resume {
        Some(c) => {
            c.check_sensor(&sensor)?;
            Some(c.meta_parse::<Stage>("stage")?)
        }
        None => None,
    };
    let mut lfcr = match resume {
        Some(c) => c.restore_lfcr()?,
        None => LfcrModel::build(sensor, config.seed),
    };
    let mut step = 0;
    let lfcr_report = match (resume, resumed_stage) {
        (_, Some(Stage::Vdsr)) => None,
        (Some(c), Some(Stage::Lfcr)) => {
            let r = Resume::from_checkpoint(c, Stage::Lfcr)?;
            Some(train_lfcr(&mut lfcr, &patches, config, &opts(r, 0))?)
        }
        _ => Some(train_lfcr(&mut lfcr, &patches, config, &opts(None, 0))?),
    };
    if let Some(r) = &lfcr_report {
        step = r.final_step;
    }
    let (vdsr, vdsr_report) = if last == Stage::Vdsr {
        let (mut vdsr, r) = match (resume, resumed_stage) {
            (Some(c), Some(Stage::Vdsr)) => (
                c.restore_vdsr()?
                    .ok_or_else(|| Error::format("checkpoint", "VDSR stage without VDSR records"))?,
                Resume::from_checkpoint(c, Stage::Vdsr)?,
            ),
            _ => (VdsrModel::with_depth(config.vdsr_depth, config.seed)?, None),
        };
        let report = train_vdsr(&lfcr, &mut vdsr, &patches, config, &opts(r, step))?;
        (Some(vdsr), Some(report))
    } else {
        (None, None)
    };
    let mut out = PipelineReport {
        lfcr,
        vdsr,
        lfcr_report,
        vdsr_report,
        samples_per_epoch: patches.len(),
        model_path: None,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(MODEL_FILE);
        out.checkpoint().save(&path)?;
        out.model_path = Some(path);
    }
    Ok(out)
}

/// Mean training-set PSNR (dB) of the LFCR, or of LFCR+VDSR when given.
pub fn patch_psnr(lfcr: &LfcrModel, vdsr: Option<&VdsrModel>, patches: &PatchSet) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..patches.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch: Vec<Image> = chunk.iter().map(|&i| patches.patch(i)).collect();
        let x = scaled_batch(&batch)?;
        let mut y = lfcr.forward(&x)?;
        if let Some(v) = vdsr {
            y = v.forward(&y)?.1;
        }
        for (a, b) in y.data().iter().zip(x.data()) {
            let d = (*a as f64 - *b as f64) * PIXEL_SCALE as f64;
            sse += d * d;
        }
        count += x.len();
    }
    let mse = sse / count as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{MaskKind, SamplingMask, Sensor};
    use crate::synth::synthetic_image;

    #[test]
    fn config_defaults_and_parse() {
        let c = TrainConfig::default();
        assert_eq!((c.patch_size, c.patch_stride, c.batch_size, c.epochs), (48, 40, 64, 100));
        assert_eq!(c.shift_set.len(), 16);
        let p = TrainConfig::parse("# comment\nepochs = 3\nshift_da=4\nflips_rotations=off\nvdsr_depth=6\n")
            .unwrap();
        assert_eq!(p.epochs, 3);
        assert_eq!(p.shift_set, vec![(0, 0), (0, 4), (4, 0), (4, 4)]);
        assert!(!p.flips_rotations);
        assert_eq!(p.vdsr_depth, 6);
        assert_eq!(TrainConfig::parse(&p.to_string()).unwrap(), p);
        assert!(TrainConfig::parse("patch_size=44").is_err());
        assert!(TrainConfig::parse("shift_set=1:0").is_err());
        assert!(TrainConfig::parse("bogus=1").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(1, &c), 1e-4);
        assert!((lr_schedule(10, &c) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(11, &c) - 1e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(100, &c), 1e-8);
        assert!((lr_schedule(1, &c.vdsr_phase()) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn shift_factor_sets() {
        for f in [1, 2, 4, 8, 16] {
            let s = shift_set_for_factor(f).unwrap();
            assert_eq!(s.len(), f);
            assert!(s.contains(&(0, 0)));
        }
        assert!(shift_set_for_factor(3).is_err());
    }

    #[test]
    fn patch_offsets() {
        let c = TrainConfig::default();
        let p = extract_patches(&[Image::filled(96, 96, 1.0)], &c);
        let offs: Vec<_> = p.refs().iter().map(|r| r.offset).collect();
        assert_eq!(offs, vec![(0, 0), (0, 40), (40, 0), (40, 40)]);
        assert_eq!(extract_patches(&[Image::filled(48, 48, 1.0)], &c).len(), 1);
        assert_eq!(extract_patches(&[Image::filled(47, 60, 1.0)], &c).len(), 0);
        let p = extract_patches(&[Image::filled(200, 131, 1.0)], &c);
        assert!(p.refs().iter().all(|r| r.offset.0 % 8 == 0 && r.offset.1 % 8 == 0));
    }

    #[test]
    fn dihedral_group() {
        let p = Image::from_fn(4, 4, |y, x| (y * 4 + x) as f32);
        let set = augment_flip_rotate(&p).unwrap();
        assert_eq!(set.len(), 8);
        for (i, a) in set.iter().enumerate() {
            for b in &set[i + 1..] {
                assert_ne!(a, b);
            }
        }
        // The set is closed: transforming any member stays inside the set.
        for a in &set {
            for t in 0..8 {
                assert!(set.contains(&dihedral(a, t)));
            }
        }
        let c = Image::filled(8, 8, 3.0);
        assert!(augment_flip_rotate(&c).unwrap().iter().all(|x| *x == c));
        assert!(augment_flip_rotate(&Image::filled(4, 2, 0.0)).is_err());
    }

    #[test]
    fn shifts() {
        let img = Image::from_fn(16, 16, |y, x| (y * 16 + x) as f32);
        assert_eq!(shift_crop(&img, (0, 0)).unwrap(), img);
        let s = shift_crop(&img, (2, 4)).unwrap();
        assert_eq!(s.get(0, 0), img.get(2, 4));
        assert_eq!(s.dims(), (16, 16));
        assert!(shift_crop(&img, (1, 0)).is_err());
        assert!(shift_crop(&img, (16, 0)).is_err());
        assert_eq!(augment_shift(&img, &shift_set_for_factor(16).unwrap()).unwrap().len(), 16);
    }

    #[test]
    fn shifted_sampling_differs_only_for_structured_content() {
        let mask = SamplingMask::generate(MaskKind::Quarter, 2);
        let shifts = shift_set_for_factor(16).unwrap();
        let generic = synthetic_image(32, 32, 1);
        let sampled: Vec<Image> = augment_shift(&generic, &shifts)
            .unwrap()
            .iter()
            .map(|s| crate::sensor::sample_quarter(s, &mask).unwrap())
            .collect();
        assert_ne!(sampled[0], sampled[5]);
        let flat = Image::filled(32, 32, 7.0);
        let sampled: Vec<Image> = augment_shift(&flat, &shifts)
            .unwrap()
            .iter()
            .map(|s| crate::sensor::sample_quarter(s, &mask).unwrap())
            .collect();
        assert!(sampled.iter().all(|s| *s == sampled[0]));
    }

    #[test]
    fn augmentation_count_is_exact() {
        let c = TrainConfig::default();
        let images = [Image::filled(96, 96, 1.0), Image::filled(50, 130, 1.0)];
        let base = extract_patches(&images, &c);
        assert_eq!(base.augmented(&c).len(), base.len() * 8 * 16);
        let aug = base.augmented(&c);
        assert!(aug.refs().iter().all(|r| r.offset.0 % 8 == 0 && r.offset.1 % 8 == 0));
        assert_eq!(aug.patch(aug.len() - 1).dims(), (48, 48));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            patch_size: 16,
            patch_stride: 16,
            shift_set: vec![(0, 0)],
            flips_rotations: false,
            epochs: 2,
            batch_size: 3,
            initial_lr: 1e-3,
            vdsr_depth: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_patches(c: &TrainConfig) -> PatchSet {
        extract_patches(&[synthetic_image(32, 32, 4), synthetic_image(16, 32, 5)], c)
    }

    #[test]
    fn batching_matches_full_batch_gradient() {
        let c = tiny_config();
        let patches = tiny_patches(&c);
        let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, 1));
        let batch: Vec<Image> = (0..patches.len()).map(|i| patches.patch(i)).collect();
        assert_eq!(batch.len(), 6);
        let mut chunked: LfcrModel = LfcrModel::build(sensor.clone(), 3);
        let loss = batch_step(&mut LfcrPhase(&mut chunked), &batch, false).unwrap();

        let mut whole: LfcrModel = LfcrModel::build(sensor, 3);
        let x = scaled_batch(&batch).unwrap();
        let (y, cache) = whole.forward_cached(&whole.vectorize(&x).unwrap()).unwrap();
        let (l, g) = mse_loss(&y, &x).unwrap();
        whole.zero_grad();
        whole.backward(&cache, &g, false).unwrap();
        assert!((loss - l as f64).abs() <= 1e-6 * l as f64);
        for ((_, a), (_, b)) in chunked.params().into_iter().zip(whole.params()) {
            for (u, v) in a.grad().unwrap().iter().zip(b.grad().unwrap()) {
                assert!((u - v).abs() <= 1e-5 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn phases_train_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config();
        c.epochs = 3;
        let patches = tiny_patches(&c);
        let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::ThreeQuarter, 1));
        let mut lfcr: LfcrModel = LfcrModel::build(sensor, 3);
        let opts = TrainOptions::writing_to(dir.path());
        let r1 = train_lfcr(&mut lfcr, &patches, &c, &opts).unwrap();
        assert_eq!(r1.log.len(), 3 * 2);
        assert_eq!(r1.final_step, 6);
        assert!(r1.log.iter().all(|s| s.loss.is_finite()));
        assert!(!dir.path().join(checkpoint_name(Stage::Lfcr, 1)).exists());
        assert!(dir.path().join(checkpoint_name(Stage::Lfcr, 3)).exists());
        let log = fs::read_to_string(dir.path().join("lfcr_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 7);
        assert!(log.starts_with("epoch,step,lr,loss\n1,1,1e-3,"));

        let checksum = lfcr.checksum();
        let mut vdsr: VdsrModel = VdsrModel::with_depth(c.vdsr_depth, 3).unwrap();
        let v_opts = TrainOptions {
            first_step: r1.final_step,
            ..TrainOptions::writing_to(dir.path())
        };
        let r2 = train_vdsr(&lfcr, &mut vdsr, &patches, &c, &v_opts).unwrap();
        assert_eq!(lfcr.checksum(), checksum);
        assert_eq!(r2.log[0].step, 7);
        assert!((r2.log[0].lr - 1e-4).abs() < 1e-12);
        let ck = Checkpoint::load(r2.last_checkpoint.as_ref().unwrap()).unwrap();
        // Parameters only; gradient buffers are not stored.
        assert_eq!(ck.restore_lfcr().unwrap().checksum(), lfcr.checksum());
        assert_eq!(ck.restore_vdsr().unwrap().unwrap().checksum(), vdsr.checksum());
    }

    #[test]
    fn pipeline_resumes_inside_second_phase() {
        let mut c = tiny_config();
        c.vdsr_epochs = Some(2);
        let images = [synthetic_image(32, 32, 4), synthetic_image(16, 32, 5)];
        let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::ThreeQuarter, 2));
        let full = train_pipeline(&images, sensor.clone(), &c, Stage::Vdsr, None, None, false).unwrap();
        assert_eq!(full.samples_per_epoch, 6);
        let steps: Vec<u64> = full.log().iter().map(|s| s.step).collect();
        assert_eq!(steps, (1..=8).collect::<Vec<u64>>());

        let dir = tempfile::tempdir().unwrap();
        let mut first = c.clone();
        first.vdsr_epochs = Some(1);
        let part = train_pipeline(&images, sensor.clone(), &first, Stage::Vdsr, None, Some(dir.path()), false).unwrap();
        assert!(dir.path().join(MODEL_FILE).exists());
        let ck = Checkpoint::load(&dir.path().join(checkpoint_name(Stage::Vdsr, 1))).unwrap();
        let rest = train_pipeline(&images, sensor, &c, Stage::Vdsr, Some(&ck), Some(dir.path()), false).unwrap();
        assert!(rest.lfcr_report.is_none());
        let joined: Vec<StepLog> = part.log().into_iter().chain(rest.log()).collect();
        assert_eq!(joined, full.log());
        assert_eq!(rest.vdsr.unwrap().checksum(), full.vdsr.unwrap().checksum());
    }

    #[test]
    fn pipeline_rejects_other_sensor_checkpoint() {
        let c = tiny_config();
        let images = [synthetic_image(32, 32, 4)];
        let a = Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, 1));
        let b = Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, 2));
        let run = train_pipeline(&images, a, &c, Stage::Lfcr, None, None, false).unwrap();
        assert!(run.vdsr.is_none());
        let err = train_pipeline(&images, b, &c, Stage::Lfcr, Some(&run.checkpoint()), None, false);
        assert!(matches!(err, Err(Error::Incompatible(_))));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = tiny_config();
        let patches = tiny_patches(&c);
        let sensor = Sensor::Masked(SamplingMask::generate(MaskKind::Quarter, 8));
        let mut straight: LfcrModel = LfcrModel::build(sensor.clone(), 1);
        let full = train_lfcr(&mut straight, &patches, &c, &TrainOptions::in_memory()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = c.clone();
        first.epochs = 1;
        let mut resumed: LfcrModel = LfcrModel::build(sensor, 1);
        let r = train_lfcr(&mut resumed, &patches, &first, &TrainOptions::writing_to(dir.path())).unwrap();
        let ck = Checkpoint::load(r.last_checkpoint.as_ref().unwrap()).unwrap();
        let mut restored = ck.restore_lfcr().unwrap();
        let opts = TrainOptions {
            resume: Resume::from_checkpoint(&ck, Stage::Lfcr).unwrap(),
            ..TrainOptions::writing_to(dir.path())
        };
        let rest = train_lfcr(&mut restored, &patches, &c, &opts).unwrap();
        assert_eq!(rest.log[0].step, r.final_step + 1);
        assert_eq!(restored, straight);
        let losses: Vec<f64> = r.log.iter().chain(&rest.log).map(|s| s.loss).collect();
        let expect: Vec<f64> = full.log.iter().map(|s| s.loss).collect();
        assert_eq!(losses, expect);
        let log = fs::read_to_string(dir.path().join("lfcr_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + full.log.len());
    }

    #[test]
    fn parallel_chunks_are_deterministic() {
        let mut c = tiny_config();
        c.batch_size = 6;
        c.epochs = 1;
        let patches = tiny_patches(&c);
        let sensor = Sensor::LowResolution;
        let mut a: LfcrModel = LfcrModel::build(sensor.clone(), 2);
        let mut b: LfcrModel = LfcrModel::build(sensor, 2);
        let ra = train_lfcr(&mut a, &patches, &c, &TrainOptions::in_memory()).unwrap();
        let opts = TrainOptions {
            parallel: true,
            ..TrainOptions::in_memory()
        };
        let rb = train_lfcr(&mut b, &patches, &c, &opts).unwrap();
        assert_eq!(ra.log, rb.log);
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let c = tiny_config();
        let patches = tiny_patches(&c);
        let mut m: LfcrModel = LfcrModel::build(Sensor::LowResolution, 2);
        m.deconv_mut().bias.data_mut()[0] = f32::INFINITY;
        let err = train_lfcr(&mut m, &patches, &c, &TrainOptions::in_memory()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, step: 1, last_checkpoint: None }));
        assert!(err.is_numerical());
    }
}
