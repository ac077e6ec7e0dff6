//! Hard-edged rasterisation, element decomposition and condition extraction.

use std::f64::consts::PI;

use super::{ElementSpec, Image, SceneSpec, ShapeKind, CANVAS, NEUTRAL};
use crate::embeddings::ConditionKind;
use crate::error::{Error, Result};

/// Pixel-centre coverage of one element on the canvas.
pub fn silhouette(e: &ElementSpec) -> Vec<bool> {
    let mut out = vec![false; CANVAS * CANVAS];
    let (c, s) = (e.rotation.cos(), e.rotation.sin());
    let tri: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let a = e.rotation - PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
            let r = e.scale / 3f64.sqrt();
            (e.cx + r * a.cos(), e.cy + r * a.sin())
        })
        .collect();
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - e.cx, py - e.cy);
            let inside = match e.shape {
                ShapeKind::Circle => dx * dx + dy * dy <= (e.scale / 2.0).powi(2),
                ShapeKind::Square => {
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    u.abs() <= e.scale / 2.0 && v.abs() <= e.scale / 2.0
                }
                ShapeKind::Triangle => {
                    let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                    let d = [cross(tri[0], tri[1]), cross(tri[1], tri[2]), cross(tri[2], tri[0])];
                    d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
                }
            };
            out[y * CANVAS + x] = inside;
        }
    }
    out
}

fn paint(img: &mut Image, mask: &[bool], rgb: &[u8]) {
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        img.set_pixel(i / img.width, i % img.width, rgb);
    }
}

/// Painter's algorithm: background, then elements in ascending z.
pub fn render_scene(spec: &SceneSpec) -> Image {
    let mut img = Image::filled(CANVAS, CANVAS, spec.background.color());
    for i in spec.z_sorted() {
        let e = &spec.elements[i];
        paint(&mut img, &silhouette(e), &e.rgb());
    }
    img
}

/// Unoccluded per-element renders on the neutral canvas plus the empty
/// background.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub solos: Vec<Image>,
    pub background: Image,
}

pub fn decompose_elements(spec: &SceneSpec) -> Decomposition {
    let solos = spec
        .elements
        .iter()
        .map(|e| {
            let mut img = Image::filled(CANVAS, CANVAS, NEUTRAL);
            paint(&mut img, &silhouette(e), &e.rgb());
            img
        })
        .collect();
    Decomposition { solos, background: Image::filled(CANVAS, CANVAS, spec.background.color()) }
}

/// Conditions of one element. Content maps live on the canonical canvas
/// (the element translated so its centre sits at the canvas centre); layout
/// maps live at the target pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementConditions {
    /// Layer rank, 0 = bottom.
    pub order: usize,
    /// `(dy, dx)` translation from target pose to canonical pose.
    pub offset: (i32, i32),
    pub solo: Image,
    pub edge: Image,
    pub color: Image,
    pub mask: Image,
    pub boxmap: Image,
    pub dot: Image,
}

impl ElementConditions {
    pub fn content(&self, kind: ConditionKind) -> Result<&Image> {
        match kind {
            ConditionKind::Edge => Ok(&self.edge),
            ConditionKind::Color => Ok(&self.color),
            k => Err(Error::Lookup(format!("{k} is not a content condition"))),
        }
    }

    /// Content map moved back to the target pose.
    pub fn content_at_target(&self, kind: ConditionKind) -> Result<Image> {
        Ok(self.content(kind)?.shifted(-self.offset.0, -self.offset.1))
    }

    pub fn layout(&self, kind: ConditionKind) -> Result<&Image> {
        match kind {
            ConditionKind::Dot => Ok(&self.dot),
            ConditionKind::Box => Ok(&self.boxmap),
            ConditionKind::Mask => Ok(&self.mask),
            k => Err(Error::Lookup(format!("{k} is not a layout condition"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub target: Image,
    pub background: Image,
    pub elements: Vec<ElementConditions>,
}

/// Binary edge map: L1 Sobel magnitude summed over channels (values in
/// `[0, 1]`) above 0.5. Off-canvas pixels read as zero.
pub fn edge_map(img: &Image) -> Image {
    let (h, w) = (img.height as i32, img.width as i32);
    let at = |y: i32, x: i32, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            img.pixel(y as usize, x as usize)[c] as f64 / 255.0
        }
    };
    let mut out = Image::new(img.height, img.width, 1);
    for y in 0..h {
        for x in 0..w {
            let mut mag = 0.0;
            for c in 0..img.channels {
                let gx = at(y - 1, x + 1, c) + 2.0 * at(y, x + 1, c) + at(y + 1, x + 1, c) - at(y - 1, x - 1, c) - 2.0 * at(y, x - 1, c) - at(y + 1, x - 1, c);
                let gy = at(y + 1, x - 1, c) + 2.0 * at(y + 1, x, c) + at(y + 1, x + 1, c) - at(y - 1, x - 1, c) - 2.0 * at(y - 1, x, c) - at(y - 1, x + 1, c);
                mag += gx.abs() + gy.abs();
            }
            if mag > 0.5 {
                out.set_pixel(y as usize, x as usize, &[1]);
            }
        }
    }
    out
}

/// Rounded centroid `(y, x)` of a nonempty pixel set.
pub(crate) fn centroid(mask: &[bool], width: usize) -> Option<(usize, usize)> {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sy += (i / width) as f64;
        sx += (i % width) as f64;
        n += 1;
    }
    (n > 0).then(|| ((sy / n as f64).round() as usize, (sx / n as f64).round() as usize))
}

/// Inclusive bounding rectangle `(y0, x0, y1, x1)`.
pub(crate) fn bounding_box(mask: &[bool], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / width, i % width);
        bb = Some(match bb {
            None => (y, x, y, x),
            Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
        });
    }
    bb
}

pub(crate) fn box_image(bb: (usize, usize, usize, usize)) -> Image {
    let mut img = Image::new(CANVAS, CANVAS, 1);
    for y in bb.0..=bb.2.min(CANVAS - 1) {
        for x in bb.1..=bb.3.min(CANVAS - 1) {
            img.set_pixel(y, x, &[1]);
        }
    }
    img
}

pub(crate) fn dot_image(p: (usize, usize)) -> Image {
    let mut img = Image::new(CANVAS, CANVAS, 1);
    img.set_pixel(p.0.min(CANVAS - 1), p.1.min(CANVAS - 1), &[1]);
    img
}

pub(crate) fn canonical_offset(e: &ElementSpec) -> (i32, i32) {
    let c = CANVAS as f64 / 2.0;
    ((c - e.cy).round() as i32, (c - e.cx).round() as i32)
}

pub fn extract_conditions(spec: &SceneSpec) -> ConditionSet {
    let dec = decompose_elements(spec);
    let ranks = spec.order_ranks();
    let elements = spec
        .elements
        .iter()
        .zip(dec.solos)
        .zip(ranks)
        .map(|((e, solo), order)| {
            let sil = silhouette(e);
            let offset = canonical_offset(e);
            let canon = solo.shifted(offset.0, offset.1);
            let bb = bounding_box(&sil, CANVAS).expect("elements are never empty");
            let dot = centroid(&sil, CANVAS).expect("elements are never empty");
            ElementConditions {
                order,
                offset,
                edge: edge_map(&canon),
                color: canon,
                mask: Image::from_mask(CANVAS, CANVAS, &sil),
                boxmap: box_image(bb),
                dot: dot_image(dot),
                solo,
            }
        })
        .collect();
    ConditionSet { target: render_scene(spec), background: dec.background, elements }
}

#[cfg(test)]
mod tests {
    use super::super::Background;
    use super::*;

    fn el(shape: ShapeKind, cx: f64, cy: f64, z: u32, color: usize) -> ElementSpec {
        ElementSpec { shape, color, cx, cy, scale: 10.0, rotation: 0.3, z }
    }

    #[test]
    fn background_only_without_elements() {
        let s = SceneSpec { background: Background { class_id: 2 }, elements: vec![], seed: 0 };
        assert_eq!(render_scene(&s), Image::filled(CANVAS, CANVAS, s.background.color()));
    }

    #[test]
    fn overlap_takes_higher_z() {
        let a = el(ShapeKind::Square, 14.0, 14.0, 3, 0);
        let b = el(ShapeKind::Circle, 17.0, 17.0, 1, 2);
        let s = SceneSpec { background: Background { class_id: 0 }, elements: vec![a.clone(), b.clone()], seed: 0 };
        let img = render_scene(&s);
        let (sa, sb) = (silhouette(&a), silhouette(&b));
        let mut overlap = 0;
        for i in 0..CANVAS * CANVAS {
            if sa[i] && sb[i] {
                overlap += 1;
                assert_eq!(img.pixel(i / CANVAS, i % CANVAS), &a.rgb());
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn circle_dot_at_centroid_and_box_covers_mask() {
        let e = el(ShapeKind::Circle, 10.0, 20.0, 0, 1);
        let s = SceneSpec { background: Background { class_id: 0 }, elements: vec![e], seed: 0 };
        let c = &extract_conditions(&s).elements[0];
        let m = c.mask.mask();
        let (cy, cx) = centroid(&m, CANVAS).unwrap();
        assert_eq!(c.dot.mask().iter().filter(|&&v| v).count(), 1);
        assert_eq!(c.dot.pixel(cy, cx), &[1]);
        let bm = c.boxmap.mask();
        assert!(m.iter().zip(&bm).all(|(&a, &b)| !a || b));
        assert!(bm.iter().filter(|&&v| v).count() >= m.iter().filter(|&&v| v).count());
    }

    #[test]
    fn canonical_content_is_a_translation() {
        let e = el(ShapeKind::Triangle, 9.4, 22.6, 0, 4);
        let s = SceneSpec { background: Background { class_id: 1 }, elements: vec![e], seed: 0 };
        let c = &extract_conditions(&s).elements[0];
        assert_eq!(c.content_at_target(ConditionKind::Color).unwrap(), c.solo);
        assert_eq!(c.color.mask(), c.mask.shifted(c.offset.0, c.offset.1).mask());
    }
}
