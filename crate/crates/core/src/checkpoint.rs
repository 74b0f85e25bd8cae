//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `STMP`, `u32` version, length-prefixed UTF-8
//! config text, `u64` epoch, RNG stream table, parameter table (name, decay
//! flag, rows, cols, `f32` values), then the optimizer step count and its two
//! moment tables in parameter order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamStore};
use crate::rng::{StreamName, StreamState, Streams};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"STMP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: Vec<(StreamName, StreamState)>,
    pub store: ParamStore,
    pub opt: AdamW,
}

impl Checkpoint {
    pub fn new(config: RunConfig, epoch: u64, streams: &Streams, store: ParamStore, opt: AdamW) -> Self {
        let rng = StreamName::ALL
            .into_iter()
            .map(|n| (n, StreamState::capture(streams.get(n))))
            .collect();
        Checkpoint { config, epoch, rng, store, opt }
    }

    pub fn streams(&self) -> Result<Streams> {
        let mut s = Streams::new(0);
        for name in StreamName::ALL {
            let state = self
                .rng
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing rng stream {}", name.as_str())))?;
            *s.get_mut(name) = state.1.restore();
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut w, &self.config.emit());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&(self.rng.len() as u32).to_le_bytes());
        for (name, st) in &self.rng {
            put_str(&mut w, name.as_str());
            w.extend_from_slice(&st.seed);
            w.extend_from_slice(&st.stream.to_le_bytes());
            w.extend_from_slice(&st.word_pos.to_le_bytes());
        }
        w.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for b in self.store.blocks() {
            put_str(&mut w, &b.name);
            w.push(b.decay as u8);
            put_mat(&mut w, &b.value);
        }
        w.extend_from_slice(&self.opt.step.to_le_bytes());
        for m in self.opt.m.iter().chain(&self.opt.v) {
            put_mat(&mut w, m);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let text = r.string()?;
        let config = RunConfig::parse(&text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let epoch = r.u64()?;
        let n_rng = r.u32()? as usize;
        let mut rng = Vec::with_capacity(n_rng);
        for _ in 0..n_rng {
            let name = r.string()?;
            let name = StreamName::parse(&name).ok_or_else(|| Error::Checkpoint(format!("unknown rng stream {name:?}")))?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            rng.push((name, StreamState { seed, stream, word_pos }));
        }
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let decay = match r.take(1)?[0] {
                0 => false,
                1 => true,
                x => return Err(Error::Checkpoint(format!("bad decay flag {x} for {name}"))),
            };
            let value = r.mat()?;
            if store.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            store.add(name, value, decay);
        }
        let mut opt = AdamW::new(&store, config.train.lr, config.train.weight_decay);
        opt.step = r.u64()?;
        for i in 0..2 * n {
            let m = r.mat()?;
            let id = crate::nn::ParamId(i % n);
            if m.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!("optimizer moment shape mismatch for {}", store.name(id))));
            }
            if i < n {
                opt.m[i] = m;
            } else {
                opt.v[i - n] = m;
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { config, epoch, rng, store, opt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_mat(w: &mut Vec<u8>, m: &Mat) {
    w.extend_from_slice(&(m.rows as u32).to_le_bytes());
    w.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for &v in &m.data {
        w.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
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

    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(4) <= self.b.len() - self.at)
            .ok_or_else(|| Error::Checkpoint(format!("matrix {rows}x{cols} exceeds file size")))?;
        let data = self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Mat::from_vec(rows, cols, data))
    }
}
