//! Checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic        8 bytes  "KRSVQGCK"
//! version      u32      1
//! config_len   u32      byte length of the config text
//! config       UTF-8    ModelConfig as `key=value` lines
//! param_count  u32
//! per parameter, in lexicographic name order:
//!   name_len   u32
//!   name       UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows * cols little-endian f32, row-major
//! ```
//!
//! Parameters are held as `f64` in memory and rounded to `f32` on save, so a
//! loaded checkpoint saves back to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::{Component, Model};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"KRSVQGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn io_err(e: std::io::Error) -> Error {
    Error::format("checkpoint", e.to_string())
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(io_err)?;
    String::from_utf8(buf).map_err(|e| Error::format("checkpoint", e.to_string()))
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(self.config, self.params)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION as usize)?;
        let config = self.config.to_kv();
        write_u32(w, config.len())?;
        w.write_all(config.as_bytes())?;
        write_u32(w, self.params.len())?;
        let mut buf = Vec::new();
        for (name, value) in self.params.iter() {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, value.nrows())?;
            write_u32(w, value.ncols())?;
            buf.clear();
            buf.reserve(value.len() * 4);
            for v in value.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION as usize {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let config_len = read_u32(r)?;
        let config = ModelConfig::from_kv(&read_string(r, config_len)?)?;
        let count = read_u32(r)?;
        let mut params = ParamStore::default();
        let mut buf = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r)?;
            let name = read_string(r, name_len)?;
            if Component::of(&name).is_none() {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter `{name}` has no component prefix"),
                ));
            }
            let rows = read_u32(r)?;
            let cols = read_u32(r)?;
            buf.resize(rows * cols * 4, 0);
            r.read_exact(&mut buf).map_err(io_err)?;
            let values: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let block = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
            if params.get(&name).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate parameter `{name}`")));
            }
            params.insert(name, block);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io_err)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}
