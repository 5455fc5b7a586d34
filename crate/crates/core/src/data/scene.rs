use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng;

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const NUM_POSITIONS: usize = 4;
pub const NUM_CLASSES: usize = Shape::ALL.len() * Color::ALL.len();

pub(crate) const POSITION_WORDS: [&str; NUM_POSITIONS] =
    ["top-left", "top-right", "bottom-left", "bottom-right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex at (0, -r), base at y = 0.8 r spanning ±r
                let t = (dy + r) / (1.8 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.95, 0.45, 0.4],
            Color::Green => [0.45, 0.9, 0.45],
            Color::Blue => [0.45, 0.55, 1.0],
            Color::Yellow => [0.95, 0.9, 0.4],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Shape radius in pixels for a 32-pixel image.
    fn radius32(self) -> f64 {
        match self {
            Size::Small => 4.5,
            Size::Large => 7.0,
        }
    }
}

/// What a rendered image shows. The class depends on shape and colour only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// 2×2 grid cell, row-major.
    pub position: u8,
}

impl SceneSpec {
    pub fn label(&self) -> usize {
        self.shape as usize * Color::ALL.len() + self.color as usize
    }

    pub fn from_label(label: usize, size: Size, position: u8) -> Self {
        assert!(label < NUM_CLASSES && (position as usize) < NUM_POSITIONS);
        SceneSpec {
            shape: Shape::ALL[label / Color::ALL.len()],
            color: Color::ALL[label % Color::ALL.len()],
            size,
            position,
        }
    }

    pub fn position_word(&self) -> &'static str {
        POSITION_WORDS[self.position as usize]
    }

    /// Attribute words in canonical order: color, shape, size, position.
    pub fn words(&self) -> [&'static str; 4] {
        [self.color.word(), self.shape.word(), self.size.word(), self.position_word()]
    }

    pub fn to_bytes(&self) -> [u8; 4] {
        [self.shape as u8, self.color as u8, self.size as u8, self.position]
    }

    pub fn from_bytes(b: [u8; 4]) -> Option<Self> {
        Some(SceneSpec {
            shape: *Shape::ALL.get(b[0] as usize)?,
            color: *Color::ALL.get(b[1] as usize)?,
            size: *Size::ALL.get(b[2] as usize)?,
            position: (b[3] < NUM_POSITIONS as u8).then_some(b[3])?,
        })
    }
}

pub fn class_name(label: usize) -> String {
    let spec = SceneSpec::from_label(label, Size::Small, 0);
    format!("{} {}", spec.color.word(), spec.shape.word())
}

/// An `H×W×3` image (row-major, channels last) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub label: usize,
    pub spec: SceneSpec,
}

impl ImageSample {
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

/// Placement of the shape in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Geometry {
    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of everything the shape can cover.
    pub fn bbox(&self, size: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64| (c - self.radius - 0.5).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + self.radius + 0.5).ceil() as usize).min(size - 1);
        (lo(self.cx), lo(self.cy), hi(self.cx), hi(self.cy))
    }
}

const SUPERSAMPLE: usize = 4;

pub fn scene_geometry(spec: &SceneSpec, seed: u64, size: usize) -> Geometry {
    // separate stream from the background noise
    let mut g = rng(crate::rng::derive(seed, 0x6765_6f6d));
    let scale = size as f64 / DEFAULT_IMAGE_SIZE as f64;
    let cell = size as f64 / 2.0;
    let (col, row) = ((spec.position % 2) as f64, (spec.position / 2) as f64);
    let jitter = 1.5 * scale;
    Geometry {
        cx: (col + 0.5) * cell + g.random_range(-jitter..jitter),
        cy: (row + 0.5) * cell + g.random_range(-jitter..jitter),
        radius: spec.size.radius32() * scale,
    }
}

pub fn render_scene(spec: &SceneSpec, seed: u64) -> ImageSample {
    render_scene_sized(spec, seed, DEFAULT_IMAGE_SIZE)
}

/// Rasterises `spec` over a smooth noisy grey background drawn from `seed`.
pub fn render_scene_sized(spec: &SceneSpec, seed: u64, size: usize) -> ImageSample {
    let mut r = rng(seed);
    let base: f64 = r.random_range(0.05..0.15);
    let tint: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.03..0.03));
    const GRID: usize = 5;
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| r.random_range(-0.08..0.08)).collect();
    let fine: Vec<f64> = (0..size * size).map(|_| r.random_range(-0.03..0.03)).collect();

    let geo = scene_geometry(spec, seed, size);
    let color = spec.color.rgb();
    let step = (GRID - 1) as f64 / (size - 1).max(1) as f64;
    let mut pixels = vec![0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            // bilinear value noise
            let (gx, gy) = (x as f64 * step, y as f64 * step);
            let (x0, y0) = ((gx as usize).min(GRID - 2), (gy as usize).min(GRID - 2));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let at = |i: usize, j: usize| coarse[j * GRID + i];
            let smooth = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1) * fx * fy;
            let bg = base + smooth + fine[y * size + x];

            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    if spec.shape.contains(px - geo.cx, py - geo.cy, geo.radius) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                let v = (bg + tint[c]) * (1.0 - cover) + color[c] * cover;
                pixels[(y * size + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageSample {
        height: size,
        width: size,
        pixels,
        label: spec.label(),
        spec: *spec,
    }
}
