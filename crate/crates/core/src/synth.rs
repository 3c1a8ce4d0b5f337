//! Procedural 8-bit grayscale scenes: shaded backgrounds, overlapping
//! ellipses and rectangles with anti-aliased edges, and patches of
//! sinusoidal texture. Used for demos and tests when no photo corpus is at
//! hand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::layer::seeded_rng;

const STREAM: u64 = 11;

enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    Rect {
        cy: f64,
        cx: f64,
        hy: f64,
        hx: f64,
        cos: f64,
        sin: f64,
    },
}

struct Layer {
    shape: Shape,
    value: f64,
    /// Amplitude, wave vector and phase of an optional texture.
    texture: Option<(f64, f64, f64, f64)>,
}

impl Shape {
    /// Signed distance-like coverage in [0, 1] with a one pixel ramp.
    fn coverage(&self, y: f64, x: f64) -> f64 {
        let d = match *self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (u, v) = rotate(y - cy, x - cx, cos, sin);
                let r = ((u / ry).powi(2) + (v / rx).powi(2)).sqrt();
                (r - 1.0) * ry.min(rx)
            }
            Shape::Rect { cy, cx, hy, hx, cos, sin } => {
                let (u, v) = rotate(y - cy, x - cx, cos, sin);
                (u.abs() - hy).max(v.abs() - hx)
            }
        };
        (0.5 - d).clamp(0.0, 1.0)
    }
}

fn rotate(u: f64, v: f64, cos: f64, sin: f64) -> (f64, f64) {
    (cos * u - sin * v, sin * u + cos * v)
}

fn random_layer(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Layer {
    let size = h.min(w);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (cos, sin) = (angle.cos(), angle.sin());
    let cy = rng.random_range(-0.1..1.1) * h;
    let cx = rng.random_range(-0.1..1.1) * w;
    let shape = if rng.random_bool(0.5) {
        Shape::Ellipse {
            cy,
            cx,
            ry: rng.random_range(0.04..0.4) * size,
            rx: rng.random_range(0.04..0.4) * size,
            cos,
            sin,
        }
    } else {
        Shape::Rect {
            cy,
            cx,
            hy: rng.random_range(0.03..0.35) * size,
            hx: rng.random_range(0.03..0.35) * size,
            cos,
            sin,
        }
    };
    let texture = rng.random_bool(0.3).then(|| {
        let period: f64 = rng.random_range(2.5..12.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let k = std::f64::consts::TAU / period;
        (
            rng.random_range(10.0..50.0),
            k * theta.cos(),
            k * theta.sin(),
            rng.random_range(0.0..std::f64::consts::TAU),
        )
    });
    Layer {
        shape,
        value: rng.random_range(10.0..245.0),
        texture,
    }
}

/// Deterministic scene of the given size.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = seeded_rng(seed, STREAM);
    let (h, w) = (height as f64, width as f64);
    let base: f64 = rng.random_range(40.0..200.0);
    let gy: f64 = rng.random_range(-80.0..80.0) / h.max(1.0);
    let gx: f64 = rng.random_range(-80.0..80.0) / w.max(1.0);
    let count = rng.random_range(6..14);
    let layers: Vec<Layer> = (0..count).map(|_| random_layer(&mut rng, h, w)).collect();
    Image::from_fn(width, height, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = base + gy * (fy - h / 2.0) + gx * (fx - w / 2.0);
        for l in &layers {
            let a = l.shape.coverage(fy, fx);
            if a > 0.0 {
                let mut inner = l.value;
                if let Some((amp, ky, kx, phase)) = l.texture {
                    inner += amp * (ky * fy + kx * fx + phase).sin();
                }
                v = (1.0 - a) * v + a * inner;
            }
        }
        v.round().clamp(0.0, 255.0) as f32
    })
}

/// `count` scenes with consecutive seeds starting at `seed`.
pub fn synthetic_corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<Image> {
    (0..count as u64)
        .map(|i| synthetic_image(width, height, seed.wrapping_add(i)))
        .collect()
}
