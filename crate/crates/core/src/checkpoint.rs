//! `NRSR1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      5 bytes  "NRSR1"
//! meta_len   u32      length of the metadata block
//! meta       UTF-8    `key=value` lines
//! count      u32      number of records
//! record*    name_len u16, name bytes, rank u8 (= 4), dims 4×u32,
//!            values prod(dims)×f32
//! ```
//!
//! Parameter records are named `<layer>/weight|bias|slope`; the fixed
//! vectorizing kernel is stored as `lfcr/vec/weight` for inspection.
//! Optimizer moments use the prefixes `optim.m/` and `optim.v/` and are
//! stored flat as (1, 1, 1, n).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{ConvLayer, LayerStack};
use crate::lfcr::{fc_layer_name, LfcrModel, DECONV_LAYER_NAME, FC_LAYERS, VEC_LAYER_NAME};
use crate::sensor::{MaskKind, MaskSource, SamplingMask, Sensor, SensorKind};
use crate::tensor::{Adam, AdamConfig, AdamSlot, Tensor};
use crate::vdsr::{conv_layer_name, VdsrModel};

pub const MAGIC: &[u8; 5] = b"NRSR1";
const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Parses a metadata value, failing if it is missing or malformed.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::format("checkpoint", format!("missing metadata key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value `{raw}` for `{key}`")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.records.push(Record {
            name: name.into(),
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.tensor)
    }

    fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Incompatible(format!("record `{name}` missing")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(4);
            for d in r.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in r.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic, not an NRSR1 file"));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::format("checkpoint", "metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("checkpoint", format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("checkpoint", "record name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0];
            if rank != 4 {
                return Err(Error::format("checkpoint", format!("record `{name}` has rank {rank}")));
            }
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                *d = r.u32()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                Error::format("checkpoint", format!("record `{name}` is too large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::format("checkpoint", format!("record `{name}`: {e}")))?;
            records.push(Record { name, tensor });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes after last record"));
        }
        Ok(Checkpoint { meta, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("nrsr.tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
            other => other,
        })
    }

    /// Records the sensor identity the LFCR was built for.
    pub fn set_sensor(&mut self, sensor: &Sensor) {
        self.set_meta("sensor", sensor.kind());
        if let Some(m) = sensor.mask() {
            self.set_meta("mask", m.pattern_digits());
            if let MaskSource::Seed(s) = m.source() {
                self.set_meta("mask_seed", s);
            }
        }
    }

    pub fn sensor(&self) -> Result<Sensor> {
        let kind: SensorKind = self.meta_parse("sensor")?;
        let mask = match kind {
            SensorKind::LowResolution => None,
            k => {
                let digits = self
                    .meta("mask")
                    .ok_or_else(|| Error::format("checkpoint", "masked sensor without `mask` key"))?;
                let m = SamplingMask::from_pattern_digits(MaskKind::try_from(k)?, digits)?;
                let source = match self.meta("mask_seed") {
                    Some(_) => MaskSource::Seed(self.meta_parse("mask_seed")?),
                    None => MaskSource::External,
                };
                Some(SamplingMask::from_pattern(m.kind(), *m.pattern(), source)?)
            }
        };
        Sensor::new(kind, mask)
    }

    /// Fails unless `sensor` matches the stored sensor kind and pattern.
    pub fn check_sensor(&self, sensor: &Sensor) -> Result<()> {
        let stored = self.sensor()?;
        let same = stored.kind() == sensor.kind()
            && stored.mask().map(SamplingMask::pattern) == sensor.mask().map(SamplingMask::pattern);
        if same {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "checkpoint was trained for {} sensor{}, not {} sensor{}",
                stored.kind(),
                mask_note(&stored),
                sensor.kind(),
                mask_note(sensor)
            )))
        }
    }

    pub fn push_lfcr(&mut self, model: &LfcrModel) {
        self.set_sensor(model.sensor());
        self.push(format!("{VEC_LAYER_NAME}/weight"), model.kernel().weights().cast());
        push_params(self, model);
    }

    pub fn push_vdsr(&mut self, model: &VdsrModel) {
        self.set_meta("vdsr_depth", model.depth());
        push_params(self, model);
    }

    pub fn has_vdsr(&self) -> bool {
        self.meta("vdsr_depth").is_some()
    }

    pub fn restore_lfcr(&self) -> Result<LfcrModel> {
        let sensor = self.sensor()?;
        let template = LfcrModel::<f32>::build(sensor.clone(), 0);
        let mut fc = Vec::with_capacity(FC_LAYERS);
        for (i, layer) in template.fc_layers().iter().enumerate() {
            debug_assert_eq!(layer.name(), fc_layer_name(i));
            fc.push(self.fill_layer(layer)?);
        }
        let deconv = self.fill_layer(template.deconv())?;
        debug_assert_eq!(deconv.name(), DECONV_LAYER_NAME);
        LfcrModel::from_layers(sensor, fc, deconv)
    }

    pub fn restore_vdsr(&self) -> Result<Option<VdsrModel>> {
        if !self.has_vdsr() {
            return Ok(None);
        }
        let depth: usize = self.meta_parse("vdsr_depth")?;
        let template = VdsrModel::<f32>::with_depth(depth, 0)?;
        let layers = template
            .layers()
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                debug_assert_eq!(l.name(), conv_layer_name(i));
                self.fill_layer(l)
            })
            .collect::<Result<Vec<_>>>()?;
        VdsrModel::from_layers(layers).map(Some)
    }

    fn fill_layer(&self, template: &ConvLayer) -> Result<ConvLayer> {
        let mut layer = template.clone();
        for (name, p) in layer.params_mut() {
            let stored = self.require(&name)?;
            if stored.shape() != p.shape() {
                return Err(Error::Incompatible(format!(
                    "record `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(stored.data());
        }
        Ok(layer)
    }

    pub fn push_adam(&mut self, adam: &Adam) {
        self.set_meta("optim_step", adam.step_count());
        for (name, slot) in adam.slots() {
            let flat = |v: &Vec<f32>| Tensor::new([1, 1, 1, v.len()], v.clone()).expect("non-empty");
            self.push(format!("{M_PREFIX}{name}"), flat(&slot.m));
            self.push(format!("{V_PREFIX}{name}"), flat(&slot.v));
        }
    }

    pub fn restore_adam(&self, config: AdamConfig) -> Result<Option<Adam>> {
        if self.meta("optim_step").is_none() {
            return Ok(None);
        }
        let step: u64 = self.meta_parse("optim_step")?;
        let mut slots = BTreeMap::new();
        for r in &self.records {
            if let Some(name) = r.name.strip_prefix(M_PREFIX) {
                let v = self.require(&format!("{V_PREFIX}{name}"))?;
                slots.insert(
                    name.to_string(),
                    AdamSlot {
                        m: r.tensor.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
        }
        Ok(Some(Adam::from_parts(config, step, slots)))
    }
}

fn mask_note(s: &Sensor) -> String {
    s.mask()
        .map(|m| format!(" with mask {}", m.pattern_digits()))
        .unwrap_or_default()
}

fn push_params<M: LayerStack<f32>>(ckpt: &mut Checkpoint, model: &M) {
    for (name, p) in model.params() {
        ckpt.push(name, Tensor::new(p.shape(), p.data().to_vec()).expect("same shape"));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
