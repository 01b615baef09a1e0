//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "AVSAMCK\0"
//! version      u32      currently 1
//! config_hash  u64      ModelConfig::hash of the stored config
//! step         u64      optimizer updates applied
//! config       u32 length + UTF-8 canonical model config
//! n_arrays     u32
//! n_arrays ×   u32 name length + UTF-8 name
//!              u32 rank, rank × u64 dims
//!              f64 × product(dims)
//! ```
//!
//! Array names are `param/<name>`, `adam_m/<name>`, `adam_v/<name>`, each
//! group in parameter-store order. Trailing bytes are an error.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::Adam;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::AvSam;
use crate::nn::{Gradients, ModuleGroup, ParamStore};
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"AVSAMCK\0";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f64>,
    pub adam_m: Gradients<f64>,
    pub adam_v: Gradients<f64>,
    pub step: u64,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &AvSam<T>, adam: &Adam<T>) -> Self {
        Self {
            model: model.config.clone(),
            params: model.params.cast(),
            adam_m: adam.m.cast(),
            adam_v: adam.v.cast(),
            step: adam.t,
        }
    }

    /// Model and optimizer state in precision `T`. Hyperparameters of the
    /// optimizer come from `train`, moments and step from the checkpoint.
    pub fn restore<T: Scalar>(&self, train: &TrainConfig) -> Result<(AvSam<T>, Adam<T>)> {
        let model = AvSam::with_params(&self.model, self.params.cast())?;
        let mut adam = Adam::new(&model.params, train);
        adam.m = self.adam_m.cast();
        adam.v = self.adam_v.cast();
        adam.t = self.step;
        Ok((model, adam))
    }

    pub fn model<T: Scalar>(&self) -> Result<AvSam<T>> {
        AvSam::with_params(&self.model, self.params.cast())
    }

    /// Refuses a checkpoint whose model layout differs from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let (got, want) = (self.model.hash(), expected.hash());
        if got != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {got:016x} does not match the requested config {want:016x}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.model.hash().to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.model.canonical());
        let n = self.params.len();
        out.extend_from_slice(&(3 * n as u32).to_le_bytes());
        let sources: [Vec<&ArrayD<f64>>; 3] = [
            self.params.iter().map(|(_, _, _, v)| v).collect(),
            self.params.ids().map(|id| self.adam_m.get(id)).collect(),
            self.params.ids().map(|id| self.adam_v.get(id)).collect(),
        ];
        for (section, arrays) in SECTIONS.iter().zip(sources) {
            for ((_, name, _, _), a) in self.params.iter().zip(arrays) {
                put_str(&mut out, &format!("{section}/{name}"));
                out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
                for &d in a.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, this build reads version {VERSION}"
            )));
        }
        let hash = r.u64()?;
        let step = r.u64()?;
        let text = r.string()?;
        let model = ModelConfig::from_canonical(&text)?;
        if model.hash() != hash {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        let count = r.u32()? as usize;
        if count % 3 != 0 {
            return Err(Error::Checkpoint(format!("array count {count} is not a multiple of 3")));
        }
        let n = count / 3;
        let mut params = ParamStore::new();
        let mut moments: [Vec<ArrayD<f64>>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for (si, section) in SECTIONS.iter().enumerate() {
            for i in 0..n {
                let name = r.string()?;
                let rest = name
                    .strip_prefix(section)
                    .and_then(|s| s.strip_prefix('/'))
                    .ok_or_else(|| Error::Checkpoint(format!("expected a {section}/ array, found {name:?}")))?;
                let array = r.array()?;
                if si == 0 {
                    let (group, path) = rest
                        .split_once('.')
                        .and_then(|(g, p)| Some((ModuleGroup::from_name(g)?, p)))
                        .ok_or_else(|| Error::Checkpoint(format!("bad parameter name {rest:?}")))?;
                    if params.find(rest).is_some() {
                        return Err(Error::Checkpoint(format!("duplicate parameter {rest:?}")));
                    }
                    params.insert(group, path, array);
                } else {
                    let id = params.ids().nth(i).expect("params read first");
                    if params.name(id) != rest {
                        return Err(Error::Checkpoint(format!(
                            "{section} entry {rest:?} out of order (expected {:?})",
                            params.name(id)
                        )));
                    }
                    moments[si - 1].push(array);
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let [m, v] = moments;
        let shape_err = || Error::Checkpoint("optimizer moment shapes differ from parameters".into());
        let adam_m = Gradients::from_arrays(&params, m).ok_or_else(shape_err)?;
        let adam_v = Gradients::from_arrays(&params, v).ok_or_else(shape_err)?;
        Ok(Self {
            model,
            params,
            adam_m,
            adam_v,
            step,
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn array(&mut self) -> Result<ArrayD<f64>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible array rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("truncated: array of shape {dims:?}")))?;
        let data = self.take(numel * 8)?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&dims), values).expect("numel matches"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = AvSam::<f32>::new(&ModelConfig::tiny()).unwrap();
        let mut adam = Adam::new(&model.params, &TrainConfig::default());
        for id in model.params.ids() {
            adam.m.get_mut(id).fill(0.25);
            adam.v.get_mut(id).fill(1.5e-7);
        }
        adam.t = 42;
        Checkpoint::capture(&model, &adam)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let (m, adam) = back.restore::<f32>(&TrainConfig::default()).unwrap();
        let orig = AvSam::<f32>::new(&ModelConfig::tiny()).unwrap();
        assert!(ModuleGroup::ALL.iter().all(|&g| m.params.group_bit_identical(&orig.params, g)));
        assert_eq!(adam.t, 42);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..8], b"AVSAMCK\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 42);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().encode();
        for cut in (0..bytes.len()).step_by(997).chain([bytes.len() - 1]) {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Checkpoint(_) | Error::Config(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_and_hash_guards() {
        let mut bytes = sample().encode();
        bytes[8] = 2;
        match Checkpoint::decode(&bytes) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        let c = sample();
        assert!(c.check_config(&ModelConfig::tiny()).is_ok());
        let mut seeded = ModelConfig::tiny();
        seeded.backbone.seed = 9;
        assert!(c.check_config(&seeded).is_ok());
        assert!(matches!(c.check_config(&ModelConfig::default()), Err(Error::Checkpoint(_))));
        let mut bad_hash = c.encode();
        bad_hash[12] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad_hash), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }
}
