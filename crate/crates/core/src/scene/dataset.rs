//! On-disk dataset: a `manifest` text file plus `data.bin` holding every
//! sample's rasters as tensor records.
//!
//! Manifest lines are `key=value`; each sample line reads
//! `sample index=I split=train|test offset=O len=N spec=<json>` where `offset`
//! and `len` locate the sample's block inside `data.bin`.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use super::generate::{generate_eval_scene, generate_scene};
use super::raster::{extract_conditions, ConditionSet, ElementConditions};
use super::{Image, SceneSpec, CANVAS};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::records::{read_u32, TensorRecord};

pub const DATASET_VERSION: u32 = 1;
const DATA_MAGIC: &[u8; 8] = b"DCNDATA\0";
pub const MANIFEST_FILE: &str = "manifest";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Total sample count, test split included.
    pub n: usize,
    pub test_fraction: f64,
    pub seed: u64,
    /// Minimum overlap and exclusive area of the two test-scene elements.
    pub eval_min_pixels: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { n: 2000, test_fraction: 0.1, seed: 0, eval_min_pixels: 8 }
    }
}

impl DatasetOptions {
    pub fn test_count(&self) -> usize {
        ((self.n as f64 * self.test_fraction).round() as usize).min(self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub split: Split,
    pub spec: SceneSpec,
    pub conditions: ConditionSet,
}

impl Sample {
    /// Deterministic sample `index` of a dataset seeded with `opts.seed`.
    pub fn generate(opts: &DatasetOptions, index: usize) -> Sample {
        let mut rng = Rng::new(opts.seed).fork(index as u64);
        let split = if index >= opts.n - opts.test_count() { Split::Test } else { Split::Train };
        let spec = match split {
            Split::Train => generate_scene(&mut rng),
            Split::Test => generate_eval_scene(&mut rng, opts.eval_min_pixels),
        };
        let conditions = extract_conditions(&spec);
        Sample { index, split, spec, conditions }
    }

    fn records(&self) -> Vec<TensorRecord> {
        let img = |name: String, im: &Image| TensorRecord::from_u8(&name, &im.shape(), im.data.clone());
        let c = &self.conditions;
        let mut out = vec![img("target".into(), &c.target), img("background".into(), &c.background)];
        for (k, e) in c.elements.iter().enumerate() {
            out.push(TensorRecord::from_f32(&format!("el{k}.meta"), &[3], vec![e.order as f32, e.offset.0 as f32, e.offset.1 as f32]));
            for (name, im) in [("solo", &e.solo), ("edge", &e.edge), ("color", &e.color), ("mask", &e.mask), ("box", &e.boxmap), ("dot", &e.dot)] {
                out.push(img(format!("el{k}.{name}"), im));
            }
        }
        out
    }

    fn from_records(index: usize, split: Split, spec: SceneSpec, recs: Vec<TensorRecord>) -> Result<Sample> {
        let find = |name: &str| -> Result<&TensorRecord> {
            recs.iter().find(|r| r.name == name).ok_or_else(|| Error::Format(format!("sample {index} lacks record {name}")))
        };
        let image = |name: &str| -> Result<Image> {
            let r = find(name)?;
            if r.shape.len() != 3 {
                return Err(Error::Format(format!("sample {index} record {name} has shape {:?}", r.shape)));
            }
            Ok(Image { height: r.shape[0], width: r.shape[1], channels: r.shape[2], data: r.as_u8()?.to_vec() })
        };
        let mut elements = Vec::new();
        for k in 0..spec.elements.len() {
            let meta = find(&format!("el{k}.meta"))?.values_f64();
            if meta.len() != 3 {
                return Err(Error::Format(format!("sample {index} element {k} meta malformed")));
            }
            elements.push(ElementConditions {
                order: meta[0] as usize,
                offset: (meta[1] as i32, meta[2] as i32),
                solo: image(&format!("el{k}.solo"))?,
                edge: image(&format!("el{k}.edge"))?,
                color: image(&format!("el{k}.color"))?,
                mask: image(&format!("el{k}.mask"))?,
                boxmap: image(&format!("el{k}.box"))?,
                dot: image(&format!("el{k}.dot"))?,
            });
        }
        let conditions = ConditionSet { target: image("target")?, background: image("background")?, elements };
        Ok(Sample { index, split, spec, conditions })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub offset: u64,
    pub len: u64,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub canvas: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    fn render(&self) -> Result<String> {
        let mut s = format!(
            "format=dcnet-dataset\nversion={}\ncount={}\ntrain_count={}\ntest_count={}\nseed={}\ncanvas={}\n",
            self.version,
            self.count(),
            self.split_count(Split::Train),
            self.split_count(Split::Test),
            self.seed,
            self.canvas
        );
        for e in &self.entries {
            let json = serde_json::to_string(&e.spec).map_err(|err| Error::Format(err.to_string()))?;
            s.push_str(&format!("sample index={} split={} offset={} len={} spec={}\n", e.index, e.split.name(), e.offset, e.len, json));
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut version = None;
        let mut seed = None;
        let mut canvas = None;
        let mut count = None;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line_no = ln + 1;
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("sample ") {
                let (head, json) = rest.split_once(" spec=").ok_or_else(|| perr("sample line without spec".into()))?;
                let mut index = None;
                let mut split = None;
                let mut offset = None;
                let mut len = None;
                for kv in head.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| perr(format!("malformed field {kv:?}")))?;
                    let num = || v.parse::<u64>().map_err(|_| perr(format!("bad number {v:?} for {k}")));
                    match k {
                        "index" => index = Some(num()? as usize),
                        "offset" => offset = Some(num()?),
                        "len" => len = Some(num()?),
                        "split" => {
                            split = Some(match v {
                                "train" => Split::Train,
                                "test" => Split::Test,
                                _ => return Err(perr(format!("unknown split {v:?}"))),
                            })
                        }
                        _ => return Err(perr(format!("unknown sample field {k:?}"))),
                    }
                }
                let spec: SceneSpec = serde_json::from_str(json).map_err(|e| perr(format!("scene spec: {e}")))?;
                let missing = |f: &str| perr(format!("sample line lacks {f}"));
                entries.push(ManifestEntry {
                    index: index.ok_or_else(|| missing("index"))?,
                    split: split.ok_or_else(|| missing("split"))?,
                    offset: offset.ok_or_else(|| missing("offset"))?,
                    len: len.ok_or_else(|| missing("len"))?,
                    spec,
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| perr(format!("expected key=value, got {line:?}")))?;
            let num = || v.parse::<u64>().map_err(|_| perr(format!("bad number {v:?} for {k}")));
            match k {
                "format" if v == "dcnet-dataset" => {}
                "format" => return Err(perr(format!("not a dataset manifest: {v}"))),
                "version" => version = Some(num()? as u32),
                "seed" => seed = Some(num()?),
                "canvas" => canvas = Some(num()? as usize),
                "count" => count = Some(num()? as usize),
                "train_count" | "test_count" => {
                    num()?;
                }
                _ => return Err(perr(format!("unknown key {k:?}"))),
            }
        }
        let version = version.ok_or_else(|| Error::Format("manifest lacks version".into()))?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("dataset version {version} unsupported (expected {DATASET_VERSION})")));
        }
        if count != Some(entries.len()) {
            return Err(Error::Format(format!("manifest count {:?} disagrees with {} sample lines", count, entries.len())));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(Error::Format(format!("sample line {i} carries index {}", e.index)));
            }
        }
        Ok(Manifest {
            version,
            seed: seed.ok_or_else(|| Error::Format("manifest lacks seed".into()))?,
            canvas: canvas.ok_or_else(|| Error::Format("manifest lacks canvas".into()))?,
            entries,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Generates `opts.n` samples into `dir` (created if needed).
pub fn write_dataset(opts: &DatasetOptions, dir: &Path) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&opts.test_fraction) {
        return Err(Error::Config(format!("test fraction {} outside [0, 1]", opts.test_fraction)));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_path = dir.join(DATA_FILE);
    let file = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(DATA_MAGIC).and_then(|_| w.write_all(&DATASET_VERSION.to_le_bytes())).map_err(|e| Error::io(&data_path, e))?;
    let mut offset = (DATA_MAGIC.len() + 4) as u64;
    let mut entries = Vec::with_capacity(opts.n);
    for index in 0..opts.n {
        let sample = Sample::generate(opts, index);
        let recs = sample.records();
        let mut block = Vec::new();
        block.extend_from_slice(&(recs.len() as u32).to_le_bytes());
        for r in &recs {
            r.write_to(&mut block).expect("writing to memory");
        }
        w.write_all(&block).map_err(|e| Error::io(sample_path(&data_path, index), e))?;
        entries.push(ManifestEntry { index, split: sample.split, offset, len: block.len() as u64, spec: sample.spec });
        offset += block.len() as u64;
    }
    w.flush().map_err(|e| Error::io(&data_path, e))?;
    let manifest = Manifest { version: DATASET_VERSION, seed: opts.seed, canvas: CANVAS, entries };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.render()?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

fn sample_path(data: &Path, index: usize) -> PathBuf {
    PathBuf::from(format!("{} (sample {index})", data.display()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::State(format!("no dataset manifest at {}", mpath.display())));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::parse(&text)?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() < 12 || &bytes[..8] != DATA_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset blob", data_path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset blob version {version} unsupported")));
    }
    let mut samples = Vec::with_capacity(manifest.count());
    for e in &manifest.entries {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > bytes.len() || start > end {
            return Err(Error::Format(format!("sample {} block lies outside data.bin", e.index)));
        }
        let mut cur = Cursor::new(&bytes[start..end]);
        let n = read_u32(&mut cur)? as usize;
        let recs = (0..n).map(|_| TensorRecord::read_from(&mut cur)).collect::<Result<Vec<_>>>()?;
        samples.push(Sample::from_records(e.index, e.split, e.spec.clone(), recs)?);
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions { n: 6, seed: 3, ..Default::default() };
        let m = write_dataset(&opts, dir.path()).unwrap();
        assert_eq!(m.count(), 6);
        assert_eq!(m.split_count(Split::Test), 1);
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(s, &Sample::generate(&opts, i));
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions { n: 0, ..Default::default() };
        write_dataset(&opts, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap().samples.len(), 0);
    }

    #[test]
    fn bad_manifest_line_reports_line_number() {
        let err = Manifest::parse("format=dcnet-dataset\nversion=1\nbogus line\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
