//! Self-describing binary checkpoint container: named parameter arrays with
//! shapes, a kind tag, string metadata (config echo, hyperparameters), and
//! the training seed. Write/read round-trips are bit-exact.

use crate::diffcore::Array;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family tag, e.g. "matcher" or "captioner".
    pub kind: String,
    pub seed: u64,
    /// Ordered key/value metadata (config echo, hyperparameters).
    pub meta: Vec<(String, String)>,
    /// Ordered named parameter arrays.
    pub arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let raw = self.meta_value(key).ok_or_else(|| Error::Checkpoint {
            reason: format!("missing metadata key {key}"),
        })?;
        raw.parse().map_err(|_| Error::Checkpoint {
            reason: format!("metadata key {key} is not a number: {raw:?}"),
        })
    }

    pub fn arrays_by_name(self) -> HashMap<String, Array> {
        self.arrays.into_iter().collect()
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        reason: reason.into(),
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_u32::<LittleEndian>(bytes.len() as u32)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated string length"))?;
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|_| bad("truncated string"))?;
    String::from_utf8(buf).map_err(|_| bad("invalid utf-8 in checkpoint"))
}

pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io_at(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    write_string(&mut w, &checkpoint.kind)?;
    w.write_u64::<LittleEndian>(checkpoint.seed)?;
    w.write_u32::<LittleEndian>(checkpoint.meta.len() as u32)?;
    for (key, value) in &checkpoint.meta {
        write_string(&mut w, key)?;
        write_string(&mut w, value)?;
    }
    w.write_u32::<LittleEndian>(checkpoint.arrays.len() as u32)?;
    for (name, array) in &checkpoint.arrays {
        write_string(&mut w, name)?;
        w.write_u8(array.ndim() as u8)?;
        for &dim in array.shape() {
            w.write_u32::<LittleEndian>(dim as u32)?;
        }
        for &value in array.data() {
            w.write_f64::<LittleEndian>(value)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(Error::io_at(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = read_string(&mut r)?;
    let seed = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated seed"))?;
    let meta_count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated meta count"))?;
    let mut meta = Vec::with_capacity(meta_count as usize);
    for _ in 0..meta_count {
        let key = read_string(&mut r)?;
        let value = read_string(&mut r)?;
        meta.push((key, value));
    }
    let array_count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated array count"))?;
    let mut arrays = Vec::with_capacity(array_count as usize);
    for _ in 0..array_count {
        let name = read_string(&mut r)?;
        let ndim = r.read_u8().map_err(|_| bad("truncated ndim"))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("truncated dims"))? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(
                r.read_f64::<LittleEndian>()
                    .map_err(|_| bad(format!("truncated data for {name}")))?,
            );
        }
        arrays.push((name, Array::from_vec(shape, data)?));
    }
    Ok(Checkpoint {
        kind,
        seed,
        meta,
        arrays,
    })
}
