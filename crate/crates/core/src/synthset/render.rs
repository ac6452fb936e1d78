//! Procedural foreground shapes and background textures.

use rand::Rng;
use std::f64::consts::PI;

use super::types::{BinaryMask, Image};
use crate::error::{Error, Result};

/// Number of distinct shape variants available as classes.
pub const MAX_SHAPE_VARIANTS: usize = 16;

const PALETTES: [([f32; 3], [f32; 3]); 8] = [
    ([0.05, 0.10, 0.35], [0.30, 0.45, 0.75]),
    ([0.05, 0.30, 0.10], [0.35, 0.55, 0.25]),
    ([0.30, 0.10, 0.40], [0.55, 0.40, 0.70]),
    ([0.20, 0.20, 0.22], [0.55, 0.55, 0.58]),
    ([0.00, 0.35, 0.38], [0.25, 0.65, 0.65]),
    ([0.35, 0.05, 0.12], [0.60, 0.30, 0.45]),
    ([0.30, 0.30, 0.05], [0.50, 0.52, 0.32]),
    ([0.25, 0.15, 0.08], [0.50, 0.38, 0.28]),
];

const PATTERNS: usize = 4;

/// Number of distinct background families (palette x pattern combinations).
pub const MAX_BG_FAMILIES: usize = PALETTES.len() * PATTERNS;

/// Geometry of one shape class: a polygon family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeVariant {
    pub vertices: usize,
    pub aspect: f64,
    pub notch: bool,
}

impl ShapeVariant {
    pub fn for_class(class: usize) -> Result<Self> {
        if class >= MAX_SHAPE_VARIANTS {
            return Err(Error::Config(format!(
                "class {class} exceeds the {MAX_SHAPE_VARIANTS} available shape variants"
            )));
        }
        Ok(Self {
            vertices: 3 + class % 4,
            aspect: if (class / 4) % 2 == 1 { 1.6 } else { 1.0 },
            notch: (class / 8) % 2 == 1,
        })
    }

    /// Unit-scale outline, centred on the origin, before rotation.
    fn outline(&self) -> Vec<(f64, f64)> {
        let n = self.vertices;
        let mut pts = Vec::with_capacity(n + 1);
        for i in 0..n {
            let t = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
            pts.push((t.cos() * self.aspect, t.sin()));
            if self.notch && i == 0 {
                let t2 = -PI / 2.0 + 2.0 * PI / n as f64;
                let mid = ((t.cos() + t2.cos()) / 2.0 * self.aspect, (t.sin() + t2.sin()) / 2.0);
                pts.push((mid.0 * 0.55, mid.1 * 0.55));
            }
        }
        pts
    }
}

fn polygon_area(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

fn inside(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Rasterizes a randomly placed, scaled and rotated instance of `variant`.
///
/// The target area fraction is drawn from `area_band`; draws whose raster
/// falls outside `accept_band` are rejected and redrawn.
pub fn render_shape_mask<R: Rng>(
    variant: ShapeVariant,
    height: usize,
    width: usize,
    area_band: (f64, f64),
    accept_band: (f64, f64),
    rng: &mut R,
) -> Result<BinaryMask> {
    let base = variant.outline();
    let unit_area = polygon_area(&base);
    for _ in 0..256 {
        let frac = rng.random_range(area_band.0..=area_band.1);
        let scale = (frac * (height * width) as f64 / unit_area).sqrt();
        let angle = rng.random_range(-15f64..=15.0).to_radians();
        let (s, c) = angle.sin_cos();
        let pts: Vec<(f64, f64)> = base
            .iter()
            .map(|(x, y)| (scale * (x * c - y * s), scale * (x * s + y * c)))
            .collect();
        let (min_x, max_x) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (min_y, max_y) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        let (span_x, span_y) = (max_x - min_x, max_y - min_y);
        if span_x > width as f64 - 2.0 || span_y > height as f64 - 2.0 {
            continue;
        }
        let cx = rng.random_range((1.0 - min_x)..=(width as f64 - 1.0 - max_x));
        let cy = rng.random_range((1.0 - min_y)..=(height as f64 - 1.0 - max_y));
        let placed: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x + cx, y + cy)).collect();
        let mask = BinaryMask::from_fn(height, width, |y, x| inside(&placed, x as f64 + 0.5, y as f64 + 0.5))?;
        let got = mask.foreground_fraction();
        if got >= accept_band.0 && got <= accept_band.1 {
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "could not place a shape with area fraction in {accept_band:?} on a {height}x{width} canvas"
    )))
}

/// Full-frame foreground layer: a warm colour with a mild linear shading.
pub fn render_shape_layer<R: Rng>(height: usize, width: usize, rng: &mut R) -> Result<Image> {
    let base = [
        rng.random_range(0.85..=1.0),
        rng.random_range(0.55..=0.85),
        rng.random_range(0.0..=0.2),
    ];
    let angle = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (angle.cos(), angle.sin());
    let strength = rng.random_range(0.0..=0.08);
    Image::from_fn(height, width, |y, x| {
        let u = (x as f64 / width as f64 - 0.5) * gx + (y as f64 / height as f64 - 0.5) * gy;
        let shade = 1.0 - strength + strength * 2.0 * (u + 0.5).clamp(0.0, 1.0);
        [
            quantize(base[0] * shade),
            quantize(base[1] * shade),
            quantize(base[2] * shade),
        ]
    })
}

fn mix(a: [f32; 3], b: [f32; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] as f64 * (1.0 - t) + b[c] as f64 * t)
}

/// Procedural texture for background family `family`.
pub fn render_background<R: Rng>(family: usize, height: usize, width: usize, rng: &mut R) -> Result<Image> {
    if family >= MAX_BG_FAMILIES {
        return Err(Error::Config(format!(
            "background family {family} exceeds the {MAX_BG_FAMILIES} available"
        )));
    }
    let (a, b) = PALETTES[family % PALETTES.len()];
    let pattern = (family + family / PALETTES.len()) % PATTERNS;
    let jitter = rng.random_range(-0.05..=0.05);
    let (h, w) = (height as f64, width as f64);
    let field: Box<dyn Fn(f64, f64) -> f64> = match pattern {
        0 => {
            let theta = rng.random_range(0.0..PI);
            let period = rng.random_range(6.0..=12.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            Box::new(move |x, y| {
                let s = (2.0 * PI * (x * theta.cos() + y * theta.sin()) / period + phase).sin();
                if s > 0.0 { 1.0 } else { 0.0 }
            })
        }
        1 => {
            let cell = rng.random_range(4.0..=10.0);
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            Box::new(move |x, y| {
                let parity = (((x + ox) / cell).floor() + ((y + oy) / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 { 1.0 } else { 0.0 }
            })
        }
        2 => {
            let n = rng.random_range(4..=7);
            let blobs: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.0..w),
                        rng.random_range(0.0..h),
                        rng.random_range(5.0..=14.0),
                    )
                })
                .collect();
            Box::new(move |x, y| {
                let hit = blobs.iter().any(|(bx, by, r)| (x - bx).powi(2) + (y - by).powi(2) <= r * r);
                if hit { 1.0 } else { 0.0 }
            })
        }
        _ => {
            const G: usize = 5;
            let grid: Vec<f64> = (0..G * G).map(|_| rng.random_range(0.0..=1.0)).collect();
            Box::new(move |x, y| {
                let gx = x / w * (G - 1) as f64;
                let gy = y / h * (G - 1) as f64;
                let (x0, y0) = ((gx.floor() as usize).min(G - 2), (gy.floor() as usize).min(G - 2));
                let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
                let v = |i: usize, j: usize| grid[j * G + i];
                let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
                let bot = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
                top * (1.0 - ty) + bot * ty
            })
        }
    };
    let noise: Vec<f64> = (0..height * width).map(|_| rng.random_range(-0.03..=0.03)).collect();
    Image::from_fn(height, width, |y, x| {
        let t = field(x as f64 + 0.5, y as f64 + 0.5);
        let n = noise[y * width + x] + jitter;
        mix(a, b, t).map(|v| quantize(v + n))
    })
}
