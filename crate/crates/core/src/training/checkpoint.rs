//! Checkpoint container.
//!
//! `magic "DCNCKPT\0" | u32 version | u8 stage id | 32-byte config sha256 |
//! u64 step | u32 record count | tensor records`. Records are `param/<name>`
//! for every model parameter, `adam.m/<name>` and `adam.v/<name>` for the
//! optimizer moments, and `meta.*` entries for the model configuration, the
//! inter-controller switches, optimizer scalars and the data RNG.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{InterOptions, ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::model::DcNet;
use crate::numerics::{Rng, Scalar};
use crate::records::{read_u32, read_u64, RecordData, TensorRecord};
use crate::training::optim::AdamW;

const MAGIC: &[u8; 8] = b"DCNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub model: ModelConfig,
    pub inter: InterOptions,
    pub records: Vec<TensorRecord>,
}

fn json_record<S: serde::Serialize>(name: &str, v: &S) -> TensorRecord {
    let bytes = serde_json::to_vec(v).expect("serialisable");
    TensorRecord::from_u8(name, &[bytes.len()], bytes)
}

impl Checkpoint {
    /// Snapshot of `net`, plus optimizer and RNG state when training.
    pub fn capture<T: Scalar>(net: &DcNet<T>, stage: Stage, step: u64, opt: Option<&AdamW<T>>, rng: Option<&Rng>) -> Checkpoint {
        let mut records: Vec<TensorRecord> = net.store.named().iter().map(|(n, t)| TensorRecord::from_tensor(&format!("param/{n}"), t)).collect();
        if let Some(opt) = opt {
            for (n, (m, v)) in &opt.moments {
                let f = |x: &Vec<T>| x.iter().map(|a| a.to_f64c()).collect::<Vec<_>>();
                let (m, v) = (f(m), f(v));
                let rec = |name: String, x: Vec<f64>| match T::DTYPE {
                    crate::numerics::DType::F64 => TensorRecord { name, shape: vec![x.len()], data: RecordData::F64(x) },
                    _ => TensorRecord::from_f32(&name, &[x.len()], x.into_iter().map(|a| a as f32).collect()),
                };
                records.push(rec(format!("adam.m/{n}"), m));
                records.push(rec(format!("adam.v/{n}"), v));
            }
            let scalars = vec![opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay, opt.steps as f64];
            records.push(TensorRecord { name: "meta.adam".into(), shape: vec![6], data: RecordData::F64(scalars) });
        }
        if let Some(rng) = rng {
            let (seed, stream, pos) = rng.state();
            let mut b = Vec::with_capacity(32);
            b.extend_from_slice(&seed.to_le_bytes());
            b.extend_from_slice(&stream.to_le_bytes());
            b.extend_from_slice(&pos.to_le_bytes());
            records.push(TensorRecord::from_u8("meta.rng", &[32], b));
        }
        records.push(json_record("meta.model", &net.cfg));
        records.push(json_record("meta.inter", &net.inter.options()));
        Checkpoint { stage, step, model: net.cfg.clone(), inter: net.inter.options(), records }
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Copies every stored parameter into `net`. All parameters must be
    /// present and the model configuration must match.
    pub fn load_into<T: Scalar>(&self, net: &DcNet<T>) -> Result<()> {
        if self.model.hash() != net.cfg.hash() {
            return Err(Error::State("checkpoint was written for a different model configuration".into()));
        }
        let recs: BTreeMap<&str, &TensorRecord> = self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        for (name, t) in net.store.named() {
            let r = recs.get(format!("param/{name}").as_str()).ok_or_else(|| Error::State(format!("checkpoint lacks parameter {name}")))?;
            if r.shape != t.shape() {
                return Err(Error::State(format!("parameter {name}: checkpoint shape {:?}, model {:?}", r.shape, t.shape())));
            }
            t.set_data(r.values_f64().into_iter().map(T::from_f64c).collect())?;
        }
        Ok(())
    }

    /// A fresh model holding the stored parameters.
    pub fn build<T: Scalar>(&self) -> Result<DcNet<T>> {
        let net = DcNet::new(&self.model, self.inter, 0)?;
        self.load_into(&net)?;
        Ok(net)
    }

    pub fn optimizer<T: Scalar>(&self) -> Result<Option<AdamW<T>>> {
        let Some(meta) = self.record("meta.adam") else { return Ok(None) };
        let s = meta.values_f64();
        if s.len() != 6 {
            return Err(Error::Format("meta.adam needs 6 values".into()));
        }
        let mut opt = AdamW::new(s[0], s[4]);
        (opt.beta1, opt.beta2, opt.eps, opt.steps) = (s[1], s[2], s[3], s[5] as u64);
        for r in &self.records {
            if let Some(name) = r.name.strip_prefix("adam.m/") {
                let v = self.record(&format!("adam.v/{name}")).ok_or_else(|| Error::Format(format!("adam.v/{name} missing")))?;
                let conv = |x: Vec<f64>| x.into_iter().map(T::from_f64c).collect::<Vec<T>>();
                opt.moments.insert(name.to_string(), (conv(r.values_f64()), conv(v.values_f64())));
            }
        }
        Ok(Some(opt))
    }

    pub fn rng(&self) -> Result<Option<Rng>> {
        let Some(r) = self.record("meta.rng") else { return Ok(None) };
        let b = r.as_u8()?;
        if b.len() != 32 {
            return Err(Error::Format("meta.rng needs 32 bytes".into()));
        }
        let seed = u64::from_le_bytes(b[0..8].try_into().unwrap());
        let stream = u64::from_le_bytes(b[8..16].try_into().unwrap());
        let pos = u128::from_le_bytes(b[16..32].try_into().unwrap());
        Ok(Some(Rng::from_state(seed, stream, pos)))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[self.stage.id()])?;
        w.write_all(&self.model.hash())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        self.records.iter().try_for_each(|r| r.write_to(w))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let mut head = [0u8; 33];
        r.read_exact(&mut head).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let stage = Stage::from_id(head[0])?;
        let step = read_u64(r)?;
        let n = read_u32(r)?;
        let records = (0..n).map(|_| TensorRecord::read_from(r)).collect::<Result<Vec<_>>>()?;
        let parse = |name: &str| -> Result<&[u8]> { records.iter().find(|x| x.name == name).ok_or_else(|| Error::Format(format!("{name} missing")))?.as_u8() };
        let model: ModelConfig = serde_json::from_slice(parse("meta.model")?).map_err(|e| Error::Format(format!("meta.model: {e}")))?;
        let inter: InterOptions = serde_json::from_slice(parse("meta.inter")?).map_err(|e| Error::Format(format!("meta.inter: {e}")))?;
        if model.hash()[..] != head[1..] {
            return Err(Error::Format("config hash in header does not match the stored configuration".into()));
        }
        Ok(Checkpoint { stage, step, model, inter, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::State(format!("checkpoint {} does not exist", path.display())));
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { widths: [8, 8, 8], emb_dim: 8, time_freq_dim: 8, encoder_width: 4, diffusion_steps: 4, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = DcNet::<f32>::new(&tiny(), InterOptions::default(), 3).unwrap();
        let mut opt = AdamW::<f32>::new(1e-3, 0.01);
        opt.steps = 7;
        opt.moments.insert("x".into(), (vec![0.5, -1.25], vec![1e-9, 3.0]));
        let mut rng = Rng::new(11);
        rng.normal();
        let ck = Checkpoint::capture(&net, Stage::Intra, 42, Some(&opt), Some(&rng));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.optimizer::<f32>().unwrap().unwrap(), opt);
        assert_eq!(back.rng().unwrap().unwrap().next_u64(), rng.next_u64());
        let rebuilt = back.build::<f32>().unwrap();
        for ((a, x), (b, y)) in net.store.named().iter().zip(rebuilt.store.named().iter()) {
            assert_eq!(a, b);
            assert_eq!(x.to_vec(), y.to_vec());
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(Checkpoint::read_from(&mut &b"NOTACKPT...."[..]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/x.ckpt")), Err(Error::State(_))));
        let net = DcNet::<f32>::new(&tiny(), InterOptions::default(), 3).unwrap();
        let other = DcNet::<f32>::new(&ModelConfig { emb_dim: 16, ..tiny() }, InterOptions::default(), 3).unwrap();
        let ck = Checkpoint::capture(&net, Stage::Base, 0, None, None);
        assert!(matches!(ck.load_into(&other), Err(Error::State(_))));
    }
}
