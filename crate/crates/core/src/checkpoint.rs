//! Versioned binary checkpoint holding every parameter, the memory bank and
//! the run configuration.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "ISSFCKPT"
//! version      u16      1
//! config hash  32 bytes SHA-256 of the config TOML
//! config       u32 length + UTF-8 TOML
//! dim          u32
//! classes      u32 count, then per class u16 length + UTF-8 name
//! parameters   u32 count, then per parameter (sorted by name):
//!              u16 name length + name, u8 rank, u32 extents, f64 values
//! memory       u8 flag, then the memory section when the flag is 1
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::discrim_enhance::MemoryBank;
use crate::model::{Model, ModelError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"ISSFCKPT";
pub const VERSION: u16 = 1;

fn corrupt(detail: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: String::new(),
        detail: detail.into(),
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let toml = model.config.to_toml();
    let hash = hex::decode(model.config.hash()).expect("hex hash");
    out.extend_from_slice(&hash);
    out.extend_from_slice(&(toml.len() as u32).to_le_bytes());
    out.extend_from_slice(toml.as_bytes());
    out.extend_from_slice(&(model.dim as u32).to_le_bytes());
    out.extend_from_slice(&(model.class_names.len() as u32).to_le_bytes());
    for name in &model.class_names {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &model.memory {
        Some(bank) => {
            out.push(1);
            bank.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(corrupt("truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let stored_hash = hex::encode(r.take(32)?);
    let toml_len = r.u32()?;
    let toml = r.string(toml_len)?;
    let config = RunConfig::from_toml(&toml)?;
    if config.hash() != stored_hash {
        return Err(corrupt("config hash does not match the stored config"));
    }
    let dim = r.u32()?;
    let classes = r.u32()?;
    let mut class_names = Vec::with_capacity(classes.min(1 << 16));
    for _ in 0..classes {
        let n = r.u16()? as usize;
        class_names.push(r.string(n)?);
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.string(n)?;
        let rank = r.u8()? as usize;
        if !(1..=3).contains(&rank) {
            return Err(corrupt(format!("parameter `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("parameter `{name}`: {e}")))?;
        params.insert(name, t);
    }
    let memory = match r.u8()? {
        0 => None,
        1 => Some(MemoryBank::read_from(&mut r.bytes)?),
        f => return Err(corrupt(format!("bad memory flag {f}"))),
    };
    if !r.bytes.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let model = Model {
        config,
        class_names,
        dim,
        params,
        memory,
    };
    check_layout(&model)?;
    Ok(model)
}

/// The stored parameter names and shapes must be those a fresh model of the
/// same config would have.
fn check_layout(model: &Model) -> Result<()> {
    let fresh = Model::init(&model.config, &model.class_names, model.dim)?;
    let expect: Vec<(&String, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let got: Vec<(&String, &[usize])> = model.params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expect != got {
        return Err(corrupt("parameter layout does not match the stored config"));
    }
    if let (Some(a), Some(b)) = (&fresh.memory, &model.memory) {
        if (a.classes(), a.slots(), a.dim()) != (b.classes(), b.slots(), b.dim()) {
            return Err(corrupt("memory shape does not match the stored config"));
        }
    } else if fresh.memory.is_some() != model.memory.is_some() {
        return Err(corrupt("memory presence does not match the stored config"));
    }
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    f.write_all(&to_bytes(model)).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<Model> {
    let with_path = |detail: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        detail,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| with_path(e.to_string()))?;
    from_bytes(&bytes).map_err(|e| match e {
        ModelError::Checkpoint { detail, .. } => with_path(detail),
        other => with_path(other.to_string()),
    })
}
