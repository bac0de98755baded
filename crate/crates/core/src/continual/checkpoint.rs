//! Binary checkpoint of a model, its training configuration and buffer.
//!
//! Layout (little-endian): `COSC`, u32 version, u64 header length, JSON
//! header, u32 parameter count, parameters, u64 buffer capacity, u64 seen,
//! u32 entry count, entries. A tensor is u32 rows, u32 cols, then f64 data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::buffer::{BufferEntry, RehearsalBuffer};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Cosformer, ModelConfig, Vocabulary};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"COSC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    words: Vec<String>,
    woi: BTreeMap<usize, BTreeSet<usize>>,
    labels: BTreeMap<usize, Vec<Vec<usize>>>,
    meta: serde_json::Value,
}

pub struct Checkpoint {
    pub model: Cosformer,
    pub train: TrainConfig,
    pub buffer: RehearsalBuffer,
    pub meta: serde_json::Value,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, path: &Path, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::format(path, "value exceeds u32"))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, path: &Path, t: &Tensor) -> Result<()> {
        self.u32(path, t.rows())?;
        self.u32(path, t.cols())?;
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let (r, c) = (self.u32()?, self.u32()?);
        let n = r
            .checked_mul(c)
            .filter(|n| n.saturating_mul(8) <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::format(self.path, format!("tensor {r}x{c} exceeds the file")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(r, c, data)
    }
}

pub fn save(
    path: &Path,
    model: &Cosformer,
    train: &TrainConfig,
    buffer: &RehearsalBuffer,
    meta: serde_json::Value,
) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        train: train.clone(),
        words: model.vocab.words().to_vec(),
        woi: model.vocab.woi_sets().clone(),
        labels: model.vocab.labels().clone(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u64(json.len() as u64);
    w.0.extend_from_slice(&json);
    w.u32(path, model.store.len())?;
    for (_, p) in model.store.iter() {
        w.u32(path, p.name.len())?;
        w.0.extend_from_slice(p.name.as_bytes());
        w.0.push(u8::from(p.frozen));
        w.tensor(path, &p.value)?;
    }
    w.u64(buffer.capacity as u64);
    w.u64(buffer.seen);
    w.u32(path, buffer.entries.len())?;
    for e in &buffer.entries {
        w.u64(e.bag_id as u64);
        w.u32(path, e.task)?;
        w.u32(path, e.class)?;
        w.0.extend_from_slice(&e.score.to_le_bytes());
        w.tensor(path, &e.patches)?;
        w.tensor(path, &e.snapshot)?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, w.0).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "bad magic, expected COSC"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::format(path, "header too large"))?;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("header: {e}")))?;

    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_owned();
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::format(path, format!("bad frozen flag {b}"))),
        };
        let value = r.tensor()?;
        if store.id(&name).is_some() {
            return Err(Error::format(path, format!("duplicate parameter {name}")));
        }
        let id = store.add(name, value);
        store.set_frozen(id, frozen);
    }

    let capacity = r.u64()? as usize;
    let seen = r.u64()?;
    let mut buffer = RehearsalBuffer::new(capacity);
    buffer.seen = seen;
    for _ in 0..r.u32()? {
        let bag_id = r.u64()? as usize;
        let (task, class) = (r.u32()?, r.u32()?);
        let score = r.f64()?;
        let patches = r.tensor()?;
        let snapshot = r.tensor()?;
        buffer.entries.push(BufferEntry {
            bag_id,
            task,
            class,
            score,
            patches,
            snapshot,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after buffer"));
    }

    let vocab = Vocabulary::from_parts(header.words, header.woi, header.labels)?;
    let model = Cosformer::from_parts(header.model, store, vocab)?;
    Ok(Checkpoint {
        model,
        train: header.train,
        buffer,
        meta: header.meta,
    })
}
