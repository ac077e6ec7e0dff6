//! Procedural multi-element scenes with exact z-order ground truth.
//!
//! A scene is a flat background plus 1 to 4 filled shapes drawn with the
//! painter's algorithm. Every element can be re-rendered alone, which gives
//! exact per-element conditions and exact occlusion labels.

mod dataset;
mod generate;
mod raster;
mod scenefile;

pub use dataset::{read_dataset, write_dataset, Dataset, DatasetOptions, Manifest, Sample, Split};
pub use generate::{generate_eval_scene, generate_scene};
pub use raster::{decompose_elements, edge_map, extract_conditions, render_scene, silhouette, ConditionSet, Decomposition, ElementConditions};
pub use scenefile::{parse_scene_file, SceneFile, SceneFileElement};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const CANVAS: usize = 32;
pub const MAX_ELEMENTS: usize = 4;
pub const MIN_SCALE: f64 = 8.0;
pub const MAX_SCALE: f64 = 16.0;

pub type Rgb = [u8; 3];

/// Fill colours for foreground elements.
pub const ELEMENT_PALETTE: [(&str, Rgb); 6] = [
    ("red", [230, 40, 40]),
    ("green", [40, 190, 60]),
    ("blue", [50, 90, 235]),
    ("yellow", [240, 220, 40]),
    ("magenta", [210, 60, 220]),
    ("cyan", [40, 210, 220]),
];

/// Background colour per scene class.
pub const BACKGROUND_PALETTE: [(&str, Rgb); 4] = [("charcoal", [24, 24, 28]), ("slate", [95, 95, 100]), ("umber", [70, 45, 25]), ("pine", [20, 55, 45])];

/// Canvas colour behind solo renders and content conditions.
pub const NEUTRAL: Rgb = [0, 0, 0];

pub fn num_classes() -> usize {
    BACKGROUND_PALETTE.len()
}

pub fn element_color_index(name: &str) -> Result<usize> {
    ELEMENT_PALETTE.iter().position(|(n, _)| *n == name).ok_or_else(|| Error::Lookup(format!("unknown element colour {name:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    /// Radius of the smallest centred disc containing the shape at `scale`.
    pub fn bounding_radius(self, scale: f64) -> f64 {
        match self {
            ShapeKind::Circle => scale / 2.0,
            ShapeKind::Square => scale / std::f64::consts::SQRT_2,
            ShapeKind::Triangle => scale / 3f64.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub class_id: usize,
}

impl Background {
    pub fn color(&self) -> Rgb {
        BACKGROUND_PALETTE[self.class_id].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSpec {
    pub shape: ShapeKind,
    /// Index into [`ELEMENT_PALETTE`].
    pub color: usize,
    pub cx: f64,
    pub cy: f64,
    /// Diameter for circles, side length otherwise.
    pub scale: f64,
    pub rotation: f64,
    pub z: u32,
}

impl ElementSpec {
    pub fn rgb(&self) -> Rgb {
        ELEMENT_PALETTE[self.color].1
    }

    fn inside_canvas(&self) -> bool {
        let r = self.shape.bounding_radius(self.scale);
        let lim = CANVAS as f64;
        self.cx - r >= 0.0 && self.cy - r >= 0.0 && self.cx + r <= lim && self.cy + r <= lim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    pub elements: Vec<ElementSpec>,
    pub seed: u64,
}

impl SceneSpec {
    /// Checks the scene invariants: 1 to 4 elements, distinct z, palette
    /// indices in range, scales in range and shapes fully on the canvas.
    pub fn validate(&self) -> Result<()> {
        let n = self.elements.len();
        if !(1..=MAX_ELEMENTS).contains(&n) {
            return Err(Error::Invariant(format!("scene has {n} elements, expected 1..={MAX_ELEMENTS}")));
        }
        if self.background.class_id >= BACKGROUND_PALETTE.len() {
            return Err(Error::Invariant(format!("background class {} out of range", self.background.class_id)));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if e.color >= ELEMENT_PALETTE.len() {
                return Err(Error::Invariant(format!("element {i} colour {} out of range", e.color)));
            }
            if !(MIN_SCALE..=MAX_SCALE).contains(&e.scale) {
                return Err(Error::Invariant(format!("element {i} scale {} outside [{MIN_SCALE}, {MAX_SCALE}]", e.scale)));
            }
            if !e.inside_canvas() {
                return Err(Error::Invariant(format!("element {i} leaves the canvas")));
            }
            if self.elements[..i].iter().any(|o| o.z == e.z) {
                return Err(Error::Invariant(format!("duplicate z-order {}", e.z)));
            }
        }
        Ok(())
    }

    /// Element indices sorted bottom to top.
    pub fn z_sorted(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.elements.len()).collect();
        idx.sort_by_key(|&i| self.elements[i].z);
        idx
    }

    /// Layer rank (0 = bottom) of every element, in element order.
    pub fn order_ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.elements.len()];
        for (rank, i) in self.z_sorted().into_iter().enumerate() {
            ranks[i] = rank;
        }
        ranks
    }

    /// Same scene with the z-orders of elements `i` and `j` exchanged.
    pub fn swap_order(&self, i: usize, j: usize) -> Result<SceneSpec> {
        let n = self.elements.len();
        if i >= n || j >= n {
            return Err(Error::Lookup(format!("swap of elements {i},{j} in a scene with {n}")));
        }
        let mut out = self.clone();
        let zi = out.elements[i].z;
        out.elements[i].z = out.elements[j].z;
        out.elements[j].z = zi;
        Ok(out)
    }
}

/// 8-bit raster, row-major `[h, w, c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, rgb: Rgb) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, channels: 3, data }
    }

    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Self {
        Self { height, width, channels: 1, data: mask.iter().map(|&b| b as u8).collect() }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, v: &[u8]) {
        let o = (y * self.width + x) * self.channels;
        self.data[o..o + self.channels].copy_from_slice(v);
    }

    /// Nonzero pixels of a single-channel map.
    pub fn mask(&self) -> Vec<bool> {
        self.data.chunks(self.channels).map(|p| p.iter().any(|&v| v != 0)).collect()
    }

    /// Integer translation; uncovered pixels become zero.
    pub fn shifted(&self, dy: i32, dx: i32) -> Image {
        let mut out = Image::new(self.height, self.width, self.channels);
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width {
                    out.set_pixel(y as usize, x as usize, self.pixel(sy as usize, sx as usize));
                }
            }
        }
        out
    }

    /// `[h, w, c]` tensor with values `v / 255` mapped linearly onto `[lo, hi]`.
    /// Single-channel maps holding 0/1 use `scale = 1`.
    pub fn to_tensor<T: Scalar>(&self, binary: bool, lo: f64, hi: f64) -> Result<Tensor<T>> {
        let denom = if binary { 1.0 } else { 255.0 };
        let v: Vec<f64> = self.data.iter().map(|&b| lo + (hi - lo) * b as f64 / denom).collect();
        Tensor::from_f64(&self.shape(), &v)
    }

    /// Inverse of `to_tensor(false, -1, 1)` with clamping and rounding.
    pub fn from_signed(height: usize, width: usize, values: &[f64]) -> Result<Image> {
        if values.len() != height * width * 3 {
            return Err(Error::Dimension(format!("{} values for a {height}x{width} RGB image", values.len())));
        }
        let data = values.iter().map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8).collect();
        Ok(Image { height, width, channels: 3, data })
    }
}

/// Index of the nearest colour in `palette` (squared RGB distance, ties to
/// the lower index).
pub fn nearest_palette(px: &[u8], palette: &[Rgb]) -> usize {
    let d = |c: &Rgb| (0..3).map(|k| (px[k] as i32 - c[k] as i32).pow(2)).sum::<i32>();
    (0..palette.len()).min_by_key(|&i| d(&palette[i])).unwrap_or(0)
}

/// Element colours followed by background colours.
pub fn full_palette() -> Vec<Rgb> {
    ELEMENT_PALETTE.iter().chain(BACKGROUND_PALETTE.iter()).map(|(_, c)| *c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palettes_are_distinct() {
        let all = full_palette();
        for (i, c) in all.iter().enumerate() {
            assert_eq!(nearest_palette(c, &all), i);
            assert_ne!(*c, NEUTRAL);
        }
    }

    #[test]
    fn shift_roundtrip_inside() {
        let mut img = Image::new(8, 8, 1);
        img.set_pixel(3, 4, &[1]);
        let back = img.shifted(2, -3).shifted(-2, 3);
        assert_eq!(back, img);
    }

    #[test]
    fn swap_order_exchanges_z() {
        let e = |z| ElementSpec { shape: ShapeKind::Circle, color: 0, cx: 16.0, cy: 16.0, scale: 10.0, rotation: 0.0, z };
        let s = SceneSpec { background: Background { class_id: 0 }, elements: vec![e(0), e(5)], seed: 0 };
        assert_eq!(s.order_ranks(), vec![0, 1]);
        assert_eq!(s.swap_order(0, 1).unwrap().order_ranks(), vec![1, 0]);
        assert!(s.swap_order(0, 2).is_err());
    }
}
