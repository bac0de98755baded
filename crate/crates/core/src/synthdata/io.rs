use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BagRecord, Split, Stream, StreamConfig, TaskInfo};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.json";
const BAG_MAGIC: &[u8; 4] = b"COSB";
const BAG_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: StreamConfig,
    tasks: Vec<TaskInfo>,
    bags: Vec<BagEntry>,
}

#[derive(Serialize, Deserialize)]
struct BagEntry {
    id: usize,
    task: usize,
    class: usize,
    split: Split,
    path: String,
    n: usize,
    d_f: usize,
}

/// Writes one bag file: magic, version, `N`, `d_f`, then `N * d_f` f64 values,
/// all little-endian.
pub fn write_bag_file(path: &Path, patches: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * patches.len());
    buf.extend_from_slice(BAG_MAGIC);
    buf.extend_from_slice(&BAG_VERSION.to_le_bytes());
    for dim in [patches.rows(), patches.cols()] {
        let dim = u32::try_from(dim).map_err(|_| Error::format(path, "bag dimension exceeds u32"))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in patches.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_bag_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated bag header"));
    }
    if &bytes[..4] != BAG_MAGIC {
        return Err(Error::format(path, "bad magic, expected COSB"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != BAG_VERSION {
        return Err(Error::format(path, format!("unsupported bag version {version}")));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * d * 8 {
        return Err(Error::format(
            path,
            format!(
                "header declares {n}x{d} values ({} bytes) but payload has {} bytes",
                n * d * 8,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(n, d, data)
}

fn bag_path(id: usize) -> String {
    format!("bags/{id:06}.cosb")
}

/// Writes the manifest and one file per bag under `dir`.
pub fn write_bags(stream: &Stream, dir: &Path) -> Result<()> {
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::with_capacity(stream.bags.len());
    for bag in &stream.bags {
        let rel = bag_path(bag.id);
        write_bag_file(&dir.join(&rel), &bag.patches)?;
        entries.push(BagEntry {
            id: bag.id,
            task: bag.task,
            class: bag.class,
            split: bag.split,
            path: rel,
            n: bag.patches.rows(),
            d_f: bag.patches.cols(),
        });
    }
    let manifest = Manifest {
        config: stream.config.clone(),
        tasks: stream.tasks.clone(),
        bags: entries,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a stream written by [`write_bags`].
pub fn read_bags(dir: &Path) -> Result<Stream> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for (i, entry) in manifest.bags.into_iter().enumerate() {
        if entry.id != i {
            return Err(Error::format(&path, format!("bag ids not dense at position {i}")));
        }
        let valid = manifest
            .tasks
            .get(entry.task)
            .is_some_and(|t| entry.class < t.classes.len());
        if !valid {
            return Err(Error::format(&path, format!("bag {i} names an unknown class")));
        }
        let bag_file = dir.join(&entry.path);
        let patches = read_bag_file(&bag_file)?;
        if patches.shape() != [entry.n, entry.d_f] {
            return Err(Error::format(
                &bag_file,
                format!(
                    "manifest says {}x{}, file holds {}x{}",
                    entry.n,
                    entry.d_f,
                    patches.rows(),
                    patches.cols()
                ),
            ));
        }
        bags.push(BagRecord {
            id: entry.id,
            task: entry.task,
            class: entry.class,
            split: entry.split,
            patches,
        });
    }
    Ok(Stream {
        config: manifest.config,
        tasks: manifest.tasks,
        bags,
    })
}
