//! Human-written scene descriptions for the sampler.
//!
//! ```toml
//! background = "slate"      # class name or id
//!
//! [[element]]
//! shape = "circle"          # procedural content ...
//! color = "red"
//! center = [12.0, 14.0]
//! scale = 12.0
//! order = 0
//! layout = "mask"
//!
//! [[element]]
//! edge_file = "cup_edge.pgm"   # ... or condition rasters on the canonical canvas
//! color_file = "cup_color.ppm"
//! layout = "box"
//! box = [4, 4, 20, 18]         # x0, y0, x1, y1 inclusive
//! order = 1
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::raster::{bounding_box, box_image, canonical_offset, centroid, dot_image, edge_map, extract_conditions, silhouette};
use super::{element_color_index, Background, ElementConditions, ElementSpec, Image, SceneSpec, ShapeKind, BACKGROUND_PALETTE, CANVAS};
use crate::embeddings::ConditionKind;
use crate::error::{Error, Result};
use crate::ppm;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ClassRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    background: toml::Spanned<ClassRef>,
    #[serde(default)]
    element: Vec<toml::Spanned<RawElement>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    shape: Option<String>,
    color: Option<String>,
    center: Option<[f64; 2]>,
    scale: Option<f64>,
    #[serde(default)]
    rotation: f64,
    edge_file: Option<PathBuf>,
    color_file: Option<PathBuf>,
    mask_file: Option<PathBuf>,
    #[serde(rename = "box")]
    bbox: Option<[usize; 4]>,
    dot: Option<[usize; 2]>,
    #[serde(default = "default_layout")]
    layout: String,
    order: u32,
}

fn default_layout() -> String {
    "mask".into()
}

#[derive(Debug, Clone)]
pub struct SceneFileElement {
    pub layout: ConditionKind,
    pub conditions: ElementConditions,
    /// Present for procedurally described elements.
    pub spec: Option<ElementSpec>,
    pub z: u32,
}

#[derive(Debug, Clone)]
pub struct SceneFile {
    pub background: Background,
    pub elements: Vec<SceneFileElement>,
}

impl SceneFile {
    /// The equivalent [`SceneSpec`] when every element is procedural.
    pub fn scene_spec(&self) -> Option<SceneSpec> {
        let elements = self.elements.iter().map(|e| e.spec.clone()).collect::<Option<Vec<_>>>()?;
        Some(SceneSpec { background: self.background, elements, seed: 0 })
    }

    /// Exchanges the z-orders of elements `i` and `j` and re-ranks.
    pub fn swap_order(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.elements.len();
        if i >= n || j >= n {
            return Err(Error::Config(format!("--swap-order {i} {j} on a scene with {n} elements")));
        }
        let zi = self.elements[i].z;
        self.elements[i].z = self.elements[j].z;
        self.elements[j].z = zi;
        for k in [i, j] {
            let el = &mut self.elements[k];
            if let Some(s) = el.spec.as_mut() {
                s.z = el.z;
            }
        }
        self.rerank();
        Ok(())
    }

    fn rerank(&mut self) {
        let mut idx: Vec<usize> = (0..self.elements.len()).collect();
        idx.sort_by_key(|&i| self.elements[i].z);
        for (rank, i) in idx.into_iter().enumerate() {
            self.elements[i].conditions.order = rank;
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn binarize(img: Image) -> Image {
    Image { channels: 1, data: img.data.chunks(img.channels).map(|p| (p.iter().any(|&v| v > 127)) as u8).collect(), ..img }
}

fn load_raster(base: &Path, rel: &Path, channels: usize, line: usize) -> Result<Image> {
    let path = base.join(rel);
    if !path.exists() {
        return Err(Error::State(format!("condition file {} (line {line}) does not exist", path.display())));
    }
    let img = ppm::read(&path)?;
    if img.height != CANVAS || img.width != CANVAS {
        return Err(Error::Parse { line, msg: format!("{} is {}x{}, expected {CANVAS}x{CANVAS}", path.display(), img.width, img.height) });
    }
    match (channels, img.channels) {
        (1, _) => Ok(binarize(img)),
        (3, 3) => Ok(img),
        (3, 1) => Ok(Image { channels: 3, data: img.data.iter().flat_map(|&v| [v, v, v]).collect(), ..img }),
        _ => Err(Error::Parse { line, msg: format!("{} has {} channels", path.display(), img.channels) }),
    }
}

fn resolve_element(raw: &RawElement, base: &Path, line: usize) -> Result<SceneFileElement> {
    let perr = |msg: String| Error::Parse { line, msg };
    let layout: ConditionKind = raw.layout.parse().map_err(|_| perr(format!("unknown layout kind {:?}", raw.layout)))?;
    if !layout.is_layout() {
        return Err(perr(format!("{layout} is not a layout kind")));
    }
    let procedural = match (&raw.shape, &raw.color, raw.center, raw.scale) {
        (Some(shape), Some(color), Some(center), Some(scale)) => {
            let shape: ShapeKind = serde_json::from_value(serde_json::Value::String(shape.clone())).map_err(|_| perr(format!("unknown shape {shape:?}")))?;
            let color = element_color_index(color).map_err(|e| perr(e.to_string()))?;
            Some(ElementSpec { shape, color, cx: center[0], cy: center[1], scale, rotation: raw.rotation, z: raw.order })
        }
        (None, None, None, None) => None,
        _ => return Err(perr("procedural elements need shape, color, center and scale".into())),
    };
    let mut cond = match &procedural {
        Some(spec) => {
            let one = SceneSpec { background: Background { class_id: 0 }, elements: vec![spec.clone()], seed: 0 };
            one.validate().map_err(|e| perr(e.to_string()))?;
            extract_conditions(&one).elements.remove(0)
        }
        None => {
            let (Some(edge), Some(color)) = (&raw.edge_file, &raw.color_file) else {
                return Err(perr("element needs either a procedural shape or edge_file and color_file".into()));
            };
            let color = load_raster(base, color, 3, line)?;
            let mut edge = load_raster(base, edge, 1, line)?;
            if edge.data.iter().all(|&v| v == 0) {
                edge = edge_map(&color);
            }
            let sil = color.mask();
            let mask = Image::from_mask(CANVAS, CANVAS, &sil);
            let boxmap = bounding_box(&sil, CANVAS).map(box_image).unwrap_or_else(|| Image::new(CANVAS, CANVAS, 1));
            let dot = centroid(&sil, CANVAS).map(dot_image).unwrap_or_else(|| Image::new(CANVAS, CANVAS, 1));
            ElementConditions { order: 0, offset: (0, 0), solo: color.clone(), edge, color, mask, boxmap, dot }
        }
    };
    if let Some(path) = &raw.mask_file {
        cond.mask = load_raster(base, path, 1, line)?;
    }
    if let Some([x0, y0, x1, y1]) = raw.bbox {
        if x0 > x1 || y0 > y1 || x1 >= CANVAS || y1 >= CANVAS {
            return Err(perr(format!("box {:?} is not inside the {CANVAS}x{CANVAS} canvas", [x0, y0, x1, y1])));
        }
        cond.boxmap = box_image((y0, x0, y1, x1));
    }
    if let Some([x, y]) = raw.dot {
        if x >= CANVAS || y >= CANVAS {
            return Err(perr(format!("dot ({x}, {y}) outside the canvas")));
        }
        cond.dot = dot_image((y, x));
    }
    if procedural.is_none() && raw.mask_file.is_none() && raw.bbox.is_none() && raw.dot.is_none() {
        return Err(perr("condition-file elements need mask_file, box or dot geometry".into()));
    }
    if let Some(spec) = &procedural {
        cond.offset = canonical_offset(spec);
        debug_assert_eq!(cond.mask.mask(), silhouette(spec));
    }
    Ok(SceneFileElement { layout, conditions: cond, spec: procedural, z: raw.order })
}

/// Parses a scene file. Relative condition paths resolve against `base`.
pub fn parse_scene_file(text: &str, base: &Path) -> Result<SceneFile> {
    let raw: RawScene =
        toml::from_str(text).map_err(|e| Error::Parse { line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0), msg: e.message().to_string() })?;
    let bg_line = line_of(text, raw.background.span().start);
    let class_id = match raw.background.get_ref() {
        ClassRef::Id(i) => *i,
        ClassRef::Name(n) => {
            BACKGROUND_PALETTE.iter().position(|(name, _)| name == n).ok_or_else(|| Error::Parse { line: bg_line, msg: format!("unknown background {n:?}") })?
        }
    };
    if class_id >= BACKGROUND_PALETTE.len() {
        return Err(Error::Parse { line: bg_line, msg: format!("background class {class_id} out of range") });
    }
    if raw.element.is_empty() {
        return Err(Error::Parse { line: line_of(text, text.len()), msg: "scene has no [[element]] sections".into() });
    }
    let mut elements = Vec::new();
    for el in &raw.element {
        let line = line_of(text, el.span().start);
        let resolved = resolve_element(el.get_ref(), base, line)?;
        if elements.iter().any(|o: &SceneFileElement| o.z == resolved.z) {
            return Err(Error::Parse { line, msg: format!("duplicate order {}", resolved.z) });
        }
        elements.push(resolved);
    }
    let mut scene = SceneFile { background: Background { class_id }, elements };
    scene.rerank();
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"background = "slate"

[[element]]
shape = "circle"
color = "red"
center = [12.0, 14.0]
scale = 12.0
order = 3

[[element]]
shape = "square"
color = "blue"
center = [18.0, 16.0]
scale = 10.0
layout = "box"
order = 1
"#;

    #[test]
    fn procedural_scene_matches_generator_conditions() {
        let sf = parse_scene_file(TWO, Path::new(".")).unwrap();
        assert_eq!(sf.background.class_id, 1);
        let spec = sf.scene_spec().unwrap();
        let direct = extract_conditions(&spec);
        assert_eq!(sf.elements[0].conditions, direct.elements[0]);
        assert_eq!(sf.elements[0].conditions.order, 1);
        assert_eq!(sf.elements[1].layout, ConditionKind::Box);
    }

    #[test]
    fn swap_changes_ranks() {
        let mut sf = parse_scene_file(TWO, Path::new(".")).unwrap();
        sf.swap_order(0, 1).unwrap();
        assert_eq!(sf.elements[0].conditions.order, 0);
        assert_eq!(sf.elements[1].conditions.order, 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = TWO.replace("shape = \"square\"", "shape = \"hexagon\"");
        match parse_scene_file(&bad, Path::new(".")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("{other:?}"),
        }
        let syntax = "background = 1\n[[element]]\norder = \n";
        assert!(matches!(parse_scene_file(syntax, Path::new(".")), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn missing_condition_file_is_named() {
        let text = "background = 0\n[[element]]\nedge_file = \"nope_edge.pgm\"\ncolor_file = \"nope.ppm\"\nbox = [1, 1, 5, 5]\norder = 0\n";
        let err = parse_scene_file(text, Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("nope.ppm"), "{err}");
    }
}
