use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether the offset `(dx, dy)` from the center lies inside a shape of radius `r`.
    /// `dy` grows downwards.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.2, 0.9],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::Center,
        Position::TopLeft,
        Position::TopRight,
        Position::BottomLeft,
        Position::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Position::Center => "center",
            Position::TopLeft => "top left",
            Position::TopRight => "top right",
            Position::BottomLeft => "bottom left",
            Position::BottomRight => "bottom right",
        }
    }

    /// Center of the placement as fractions of the image side.
    fn anchor(self) -> (f64, f64) {
        match self {
            Position::Center => (0.5, 0.5),
            Position::TopLeft => (0.28, 0.28),
            Position::TopRight => (0.72, 0.28),
            Position::BottomLeft => (0.28, 0.72),
            Position::BottomRight => (0.72, 0.72),
        }
    }
}

/// Everything needed to render one image-caption pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSpec {
    pub pair_id: u64,
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub scale_seed: u64,
    pub noise_seed: u64,
    pub template: usize,
}

pub const BACKGROUND: f32 = 0.5;
pub const NOISE_STD: f64 = 0.03;

impl PairSpec {
    /// Class label in `0..16`: `shape * 4 + color`.
    pub fn label(&self) -> usize {
        shape_index(self.shape) * 4 + color_index(self.color)
    }

    /// Shape radius in `[0.12, 0.20)` of the image side.
    pub fn scale_fraction(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.scale_seed);
        0.12 + 0.08 * rng.random::<f64>()
    }

    pub fn size_word(&self) -> &'static str {
        if self.scale_fraction() < 0.16 {
            super::text::SIZE_WORDS[0]
        } else {
            super::text::SIZE_WORDS[1]
        }
    }

    /// Which pixels the shape covers, row-major `size × size`.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        let s = size as f64;
        let (ax, ay) = self.position.anchor();
        let (cx, cy) = (ax * s, ay * s);
        let r = self.scale_fraction() * s;
        let mut out = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                out[y * size + x] = self.shape.covers(dx, dy, r);
            }
        }
        out
    }

    /// `[3, size, size]` channel-major pixels: gray background, colored shape,
    /// seeded gaussian pixel noise.
    pub fn render(&self, size: usize) -> Vec<f32> {
        let mask = self.mask(size);
        let rgb = self.color.rgb();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let plane = size * size;
        let mut out = vec![0f32; 3 * plane];
        for c in 0..3 {
            for i in 0..plane {
                let base = if mask[i] { rgb[c] } else { BACKGROUND };
                let n: f64 = rng.sample(StandardNormal);
                out[c * plane + i] = base + (NOISE_STD * n) as f32;
            }
        }
        out
    }
}

pub fn shape_index(s: Shape) -> usize {
    Shape::ALL.iter().position(|&x| x == s).unwrap()
}

pub fn color_index(c: Color) -> usize {
    Color::ALL.iter().position(|&x| x == c).unwrap()
}
