//! Scene geometry and appearance for the synthetic two-domain benchmark.
//!
//! Geometry and appearance draw from separate random streams: two domains
//! rendered with the same seed and id share shapes and labels exactly and
//! differ only in pixel statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::LabelMap;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "circle", "square", "triangle", "stripe-bar"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Bar];

    pub fn class(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
            ShapeKind::Bar => 4,
        }
    }
}

/// One placed shape; `radius` bounds its extent from the center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub angle: f32,
}

impl Shape {
    /// Whether the point `(x, y)` in pixel coordinates lies inside.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Circle => u * u + v * v <= self.radius * self.radius,
            ShapeKind::Square => {
                let half = self.radius * std::f32::consts::FRAC_1_SQRT_2;
                u.abs() <= half && v.abs() <= half
            }
            ShapeKind::Triangle => {
                // equilateral, circumradius `radius`, apex along +v
                let r = self.radius;
                let verts = [(0.0, r), (-0.866_025_4 * r, -0.5 * r), (0.866_025_4 * r, -0.5 * r)];
                let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| (bx - ax) * (v - ay) - (by - ay) * (u - ax);
                let d0 = edge(verts[0], verts[1]);
                let d1 = edge(verts[1], verts[2]);
                let d2 = edge(verts[2], verts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            ShapeKind::Bar => u.abs() <= self.radius && v.abs() <= BAR_HALF_WIDTH,
        }
    }
}

const BAR_HALF_WIDTH: f32 = 1.6;

/// Samples 1-3 non-overlapping shapes for a `size x size` scene.
pub fn sample_geometry<R: Rng>(rng: &mut R, size: usize) -> Vec<Shape> {
    let count = rng.random_range(1..=3);
    let s = size as f32;
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..64 {
            let kind = ShapeKind::ALL[rng.random_range(0..4)];
            let radius = match kind {
                ShapeKind::Bar => rng.random_range(0.22..0.34) * s,
                _ => rng.random_range(0.11..0.2) * s,
            };
            let margin = radius.min(s / 2.0 - 1.0);
            let cx = rng.random_range(margin..s - margin);
            let cy = rng.random_range(margin..s - margin);
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            let shape = Shape { kind, cx, cy, radius, angle };
            let clear = shapes.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d > o.radius + radius + 2.0
            });
            if clear {
                shapes.push(shape);
                break;
            }
        }
    }
    shapes
}

/// Rasterizes shapes at pixel centers; later shapes win (they never overlap).
pub fn rasterize(shapes: &[Shape], size: usize) -> LabelMap {
    let mut label = LabelMap::filled(size, size, 0);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            if let Some(shape) = shapes.iter().rev().find(|s| s.contains(px, py)) {
                label.set(y, x, shape.kind.class());
            }
        }
    }
    label
}

/// Appearance parameters of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Base hue in degrees for circle, square, triangle, stripe-bar.
    pub class_hues: [f32; 4],
    /// Per-shape uniform hue jitter in degrees.
    pub hue_jitter: f32,
    pub saturation: (f32, f32),
    pub value: (f32, f32),
    pub background_hue: f32,
    pub background_saturation: f32,
    pub background_value: f32,
    /// Stripe texture cycles per image width.
    pub texture_frequency: f32,
    pub texture_amplitude: f32,
    pub brightness_offset: f32,
    pub noise_sigma: f32,
}

impl DomainSpec {
    /// Bright, clean, consistently colored rendering.
    pub fn source() -> Self {
        DomainSpec {
            name: "source".into(),
            class_hues: [0.0, 120.0, 240.0, 60.0],
            hue_jitter: 12.0,
            saturation: (0.75, 0.95),
            value: (0.8, 1.0),
            background_hue: 210.0,
            background_saturation: 0.08,
            background_value: 0.55,
            texture_frequency: 2.0,
            texture_amplitude: 0.05,
            brightness_offset: 0.0,
            noise_sigma: 0.02,
        }
    }

    /// Darker, noisier, washed-out rendering with shifted class colors and a
    /// fine stripe texture.
    pub fn target() -> Self {
        DomainSpec {
            name: "target".into(),
            class_hues: [300.0, 30.0, 170.0, 90.0],
            hue_jitter: 20.0,
            saturation: (0.3, 0.7),
            value: (0.55, 0.9),
            background_hue: 200.0,
            background_saturation: 0.3,
            background_value: 0.45,
            texture_frequency: 7.0,
            texture_amplitude: 0.12,
            brightness_offset: -0.08,
            noise_sigma: 0.12,
        }
    }

    /// `key = value` lines describing the spec, prefixed by `prefix.`.
    pub fn manifest_lines(&self, prefix: &str) -> Vec<String> {
        let h = self.class_hues;
        vec![
            format!("{prefix}.name = {}", self.name),
            format!("{prefix}.class_hues = {},{},{},{}", h[0], h[1], h[2], h[3]),
            format!("{prefix}.hue_jitter = {}", self.hue_jitter),
            format!("{prefix}.saturation = {},{}", self.saturation.0, self.saturation.1),
            format!("{prefix}.value = {},{}", self.value.0, self.value.1),
            format!("{prefix}.background_hue = {}", self.background_hue),
            format!("{prefix}.background_saturation = {}", self.background_saturation),
            format!("{prefix}.background_value = {}", self.background_value),
            format!("{prefix}.texture_frequency = {}", self.texture_frequency),
            format!("{prefix}.texture_amplitude = {}", self.texture_amplitude),
            format!("{prefix}.brightness_offset = {}", self.brightness_offset),
            format!("{prefix}.noise_sigma = {}", self.noise_sigma),
        ]
    }
}

pub(crate) fn hsv_to_rgb(hue: f32, s: f32, v: f32) -> [f32; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders `[3, size, size]` planar RGB in `[0, 1]` for the given geometry.
pub fn render_image<R: Rng>(spec: &DomainSpec, shapes: &[Shape], label: &LabelMap, size: usize, rng: &mut R) -> Vec<f32> {
    let hw = size * size;
    let mut img = vec![0.0f32; 3 * hw];

    let bg = hsv_to_rgb(
        spec.background_hue + rng.random_range(-20.0..20.0),
        spec.background_saturation,
        spec.background_value + rng.random_range(-0.05..0.05),
    );
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let freq = spec.texture_frequency * std::f32::consts::TAU / size as f32;
    let (st, ct) = theta.sin_cos();

    let colors: Vec<[f32; 3]> = shapes
        .iter()
        .map(|s| {
            let base = spec.class_hues[s.kind.class() as usize - 1];
            hsv_to_rgb(
                base + rng.random_range(-spec.hue_jitter..=spec.hue_jitter),
                rng.random_range(spec.saturation.0..=spec.saturation.1),
                rng.random_range(spec.value.0..=spec.value.1),
            )
        })
        .collect();

    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).expect("finite sigma");
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let texture = spec.texture_amplitude * (freq * (ct * px + st * py) + phase).sin();
            let owner = shapes.iter().rposition(|s| s.contains(px, py));
            debug_assert_eq!(owner.map_or(0, |i| shapes[i].kind.class()), label.get(y, x));
            let rgb = match owner {
                Some(i) => colors[i],
                None => [bg[0] + texture, bg[1] + texture, bg[2] + texture],
            };
            for c in 0..3 {
                let v = rgb[c] + spec.brightness_offset + noise.sample(rng);
                img[c * hw + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}
