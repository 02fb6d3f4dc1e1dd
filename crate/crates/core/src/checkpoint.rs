//! Versioned little-endian checkpoint container.
//!
//! Layout: magic `DHANCKPT`, `u32` version, config text, `u64` epoch,
//! per-epoch records, then every parameter (name, trainable flag, shape,
//! `f64` data). Strings and lists carry a `u32` length prefix.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::MetricsTable;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DHANCKPT";
pub const VERSION: u32 = 1;

/// Mean selection scores of the chosen negatives and of a uniform draw
/// from the same pools, over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hardness {
    pub selected: f64,
    pub uniform: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: MetricsTable,
    pub hardness: Option<Hardness>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub store: ParamStore,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("value does not fit in usize".into()))
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text());
        w.u64(self.epoch as u64);
        w.len(self.history.len());
        for r in &self.history {
            w.u64(r.epoch as u64);
            w.f64(r.train_loss);
            for x in r.test.hr.iter().chain(&r.test.ndcg) {
                w.f64(*x);
            }
            w.u64(r.test.instances as u64);
            match r.hardness {
                Some(h) => {
                    w.u8(1);
                    w.f64(h.selected);
                    w.f64(h.uniform);
                }
                None => w.u8(0),
            }
        }
        w.len(self.store.len());
        for e in self.store.entries() {
            w.str(&e.name);
            w.u8(e.trainable as u8);
            w.len(e.tensor.shape().len());
            for &s in e.tensor.shape() {
                w.u64(s as u64);
            }
            for &x in e.tensor.data() {
                w.f64(x);
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let config = RunConfig::parse(&r.str()?)?;
        let epoch = r.usize()?;
        let n = r.len()?;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let epoch = r.usize()?;
            let train_loss = r.f64()?;
            let mut test = MetricsTable::default();
            for x in test.hr.iter_mut().chain(test.ndcg.iter_mut()) {
                *x = r.f64()?;
            }
            test.instances = r.usize()?;
            let hardness = match r.u8()? {
                0 => None,
                1 => Some(Hardness {
                    selected: r.f64()?,
                    uniform: r.f64()?,
                }),
                t => return Err(Error::Checkpoint(format!("bad hardness tag {t}"))),
            };
            history.push(EpochRecord {
                epoch,
                train_loss,
                test,
                hardness,
            });
        }
        let n = r.len()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                t => return Err(Error::Checkpoint(format!("bad trainable flag {t} for `{name}`"))),
            };
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
            let count = count
                .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= buf.len()))
                .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for `{name}`")))?;
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            store.insert(name, t, trainable)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            epoch,
            history,
            store,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = tmp_path(path);
        fs::write(&tmp, self.to_bytes())?;
        if let Err(e) = fs::rename(&tmp, path) {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store
            .insert("a", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(), true)
            .unwrap();
        store.insert("b", Tensor::vector(vec![0.1, 0.2, 0.3]), false).unwrap();
        Checkpoint {
            config: RunConfig {
                d: 16,
                epochs: 3,
                ..Default::default()
            },
            epoch: 2,
            history: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 0.7,
                    test: MetricsTable::from_ranks(&[1, 4, 30]),
                    hardness: Some(Hardness {
                        selected: 0.9,
                        uniform: 0.1,
                    }),
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 0.5,
                    test: MetricsTable::from_ranks(&[2]),
                    hardness: None,
                },
            ],
            store,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.store.by_name("a").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("model.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
