//! Grayscale rasters on the 0..255 scale and Netpbm (PGM/PPM) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A single-channel raster stored row-major as `f32` on the 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::shape(
                "Image::new",
                format!("{width}x{height} image needs {} values, got {}", width * height, data.len()),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image::new(width, height, vec![value; width * height]).expect("non-empty")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image::new(width, height, data).expect("non-empty")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "crop {height}x{width} at ({top},{left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(width, height, |y, x| self.get(top + y, left + x)))
    }

    /// Toroidal shift: output(y, x) = input(y - dy, x - dx) modulo size.
    pub fn roll(&self, dy: isize, dx: isize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        Image::from_fn(self.width, self.height, |y, x| {
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            self.get(sy, sx)
        })
    }

    /// Mirror-pads (edge sample not repeated) on the bottom and right so
    /// both dimensions become multiples of `m`.
    pub fn pad_reflect_to_multiple(&self, m: usize) -> Image {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        Image::from_fn(w, h, |y, x| {
            self.get(reflect(y, self.height), reflect(x, self.width))
        })
    }

    /// Rounds and clamps to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Packs images of equal size into an (N, 1, H, W) tensor.
    pub fn batch_to_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if im.dims() != first.dims() {
                return Err(Error::shape(
                    "batch_to_tensor",
                    format!("{:?} vs {:?}", im.dims(), first.dims()),
                ));
            }
            data.extend(im.data.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new([images.len(), 1, first.height, first.width], data)
    }

    /// Splits an (N, 1, H, W) tensor into images.
    pub fn batch_from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
        let [n, c, h, w] = t.shape();
        if c != 1 {
            return Err(Error::shape(
                "batch_from_tensor",
                format!("expected one channel, got {c}"),
            ));
        }
        (0..n)
            .map(|i| {
                Image::new(
                    w,
                    h,
                    t.sample(i)
                        .iter()
                        .map(|v| v.to_f32().unwrap_or(f32::NAN))
                        .collect(),
                )
            })
            .collect()
    }
}

/// Mirror index into `0..n` (numpy "reflect" convention, repeated as needed).
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

/// BT.601 luma, kept as a float (no re-quantization).
pub fn to_grayscale(rgb: &RgbImage) -> Image {
    let data = rgb
        .data
        .iter()
        .map(|&[r, g, b]| (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) as f32)
        .collect();
    Image::new(rgb.width, rgb.height, data).expect("consistent rgb image")
}

/// A decoded Netpbm file.
#[derive(Clone, Debug, PartialEq)]
pub enum Pnm {
    Gray(Image),
    Rgb(RgbImage),
}

impl Pnm {
    /// Grayscale view; colour images go through [`to_grayscale`].
    pub fn into_gray(self) -> Image {
        match self {
            Pnm::Gray(g) => g,
            Pnm::Rgb(c) => to_grayscale(&c),
        }
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("pnm header", format!("missing or invalid {what}")))
    }
}

/// Decodes P2/P3 (ASCII) and P5/P6 (binary) images with maxval up to 65535.
/// Samples are rescaled to 0..255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format("pnm header", "missing P magic"));
    }
    let kind = bytes[1];
    let (channels, binary) = match kind {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        other => {
            return Err(Error::format(
                "pnm header",
                format!("unsupported variant P{}", other as char),
            ))
        }
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(
            "pnm header",
            format!("bad geometry {width}x{height} maxval {maxval}"),
        ));
    }
    let count = width * height * channels;
    let mut samples = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = hdr.pos + 1;
        let bpp = if maxval > 255 { 2 } else { 1 };
        let raster = bytes
            .get(start..start + count * bpp)
            .ok_or_else(|| Error::format("pnm raster", "truncated pixel data"))?;
        if bpp == 1 {
            samples.extend(raster.iter().map(|&b| b as u32));
        } else {
            samples.extend(raster.chunks(2).map(|p| u16::from_be_bytes([p[0], p[1]]) as u32));
        }
    } else {
        for _ in 0..count {
            samples.push(hdr.number("sample")? as u32);
        }
    }
    let scale = |v: u32| -> f32 {
        if maxval == 255 {
            v as f32
        } else {
            (v as f64 * 255.0 / maxval as f64) as f32
        }
    };
    if channels == 1 {
        Ok(Pnm::Gray(Image::new(
            width,
            height,
            samples.into_iter().map(scale).collect(),
        )?))
    } else {
        let to8 = |v: u32| scale(v).round().clamp(0.0, 255.0) as u8;
        let data = samples
            .chunks(3)
            .map(|p| [to8(p[0]), to8(p[1]), to8(p[2])])
            .collect();
        Ok(Pnm::Rgb(RgbImage {
            width,
            height,
            data,
        }))
    }
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { context, detail } => Error::Format {
            context: format!("{} ({context})", path.display()),
            detail,
        },
        other => other,
    })
}

/// Reads a PGM or PPM file as a grayscale image.
pub fn read_gray(path: &Path) -> Result<Image> {
    read_pnm(path).map(Pnm::into_gray)
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_u8());
    out
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for px in &image.data {
        out.extend_from_slice(px);
    }
    out
}

/// Writes an 8-bit binary PGM (values rounded and clamped).
pub fn write_pgm(image: &Image, path: &Path) -> Result<()> {
    write_file(path, &encode_pgm(image))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Row-major little-endian `f32` dump.
pub fn write_raw_f32(values: &[f32], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_raw_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path.display().to_string(),
            "length is not a multiple of 4 bytes",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

/// Reads every Netpbm image in `dir` as grayscale, sorted by file name.
/// Unreadable files are skipped with a warning.
pub fn read_dataset(dir: &Path) -> Result<Vec<(String, Image)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        match read_gray(&p) {
            Ok(img) => {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                out.push((name, img));
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}
