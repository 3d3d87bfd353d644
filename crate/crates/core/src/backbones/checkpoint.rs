//! `FOCM` model checkpoints, little-endian.
//!
//! Header: magic, u32 version, u32 archetype tag, u32 d, h, C, layers,
//! heads, k_pool, u8 frozen. Then a parameter block: u32 count and per
//! tensor u32 rows, u32 cols, f64 values. An optional `FSEL` tag followed
//! by a second parameter block carries a selector head.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Archetype, Backbone, BackboneConfig};
use crate::engine::Tensor;
use crate::optim::Param;

pub const MODEL_MAGIC: &[u8; 4] = b"FOCM";
pub const SELECTOR_TAG: &[u8; 4] = b"FSEL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected FOCM")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown archetype tag {0}")]
    Archetype(u32),
    #[error("unknown section tag {0:?}")]
    Section([u8; 4]),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("parameter layout does not match the header: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn put(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })?;
    Ok(b)
}

fn get_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(get::<4>(r, what)?))
}

pub(crate) fn write_params(w: &mut impl Write, params: &[Param]) -> std::io::Result<()> {
    put(w, params.len() as u32)?;
    for p in params {
        put(w, p.value.rows() as u32)?;
        put(w, p.value.cols() as u32)?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a parameter block into the names, shapes and decay flags of
/// `template`.
pub(crate) fn read_params(r: &mut impl Read, template: &[Param]) -> Result<Vec<Param>, CheckpointError> {
    let count = get_u32(r, "parameter count")? as usize;
    if count != template.len() {
        return Err(CheckpointError::Layout(format!("{count} tensors, expected {}", template.len())));
    }
    let mut out = Vec::with_capacity(count);
    for t in template {
        let rows = get_u32(r, "rows")? as usize;
        let cols = get_u32(r, "cols")? as usize;
        if [rows, cols] != t.value.shape() {
            return Err(CheckpointError::Layout(format!(
                "{} has shape {:?}, expected {:?}",
                t.name,
                [rows, cols],
                t.value.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(get::<8>(r, "values")?));
        }
        out.push(Param {
            name: t.name.clone(),
            value: Tensor::new(rows, cols, data).expect("shape read above"),
            decay: t.decay,
        });
    }
    Ok(out)
}

/// Writes the model and, when given, a selector section.
pub fn write_checkpoint(w: &mut impl Write, model: &Backbone, selector: Option<&[Param]>) -> Result<(), CheckpointError> {
    let c = &model.config;
    w.write_all(MODEL_MAGIC)?;
    put(w, CHECKPOINT_VERSION)?;
    put(w, c.archetype.tag())?;
    for v in [c.d, c.h, c.num_classes, c.layers, c.heads, c.k_pool] {
        put(w, v as u32)?;
    }
    w.write_all(&[model.is_frozen() as u8])?;
    write_params(w, model.params())?;
    if let Some(sel) = selector {
        w.write_all(SELECTOR_TAG)?;
        write_params(w, sel)?;
    }
    Ok(())
}

/// Reads a model and the raw selector section if present. Selector
/// parameters come back with the shapes they were written with.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Backbone, Option<Vec<Param>>), CheckpointError> {
    if &get::<4>(r, "magic")? != MODEL_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let tag = get_u32(r, "archetype")?;
    let archetype = Archetype::from_tag(tag).ok_or(CheckpointError::Archetype(tag))?;
    let mut dims = [0usize; 6];
    for v in dims.iter_mut() {
        *v = get_u32(r, "dimensions")? as usize;
    }
    let config = BackboneConfig {
        archetype,
        d: dims[0],
        h: dims[1],
        num_classes: dims[2],
        layers: dims[3],
        heads: dims[4],
        k_pool: dims[5],
    };
    if config.heads == 0 || !config.h.is_multiple_of(config.heads) {
        return Err(CheckpointError::Layout("h must be divisible by heads".into()));
    }
    let frozen = get::<1>(r, "frozen flag")?[0] != 0;
    let template = Backbone::init(config, 0);
    let params = read_params(r, template.params())?;
    let model = Backbone::from_parts(config, params, frozen);

    let mut tag = [0u8; 4];
    let selector = match r.read_exact(&mut tag) {
        Ok(()) if &tag == SELECTOR_TAG => Some(read_free_params(r)?),
        Ok(()) => return Err(CheckpointError::Section(tag)),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => None,
        Err(e) => return Err(e.into()),
    };
    Ok((model, selector))
}

fn read_free_params(r: &mut impl Read) -> Result<Vec<Param>, CheckpointError> {
    let count = get_u32(r, "parameter count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let rows = get_u32(r, "rows")? as usize;
        let cols = get_u32(r, "cols")? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(get::<8>(r, "values")?));
        }
        let value = Tensor::new(rows, cols, data).expect("shape read above");
        out.push(Param {
            name: format!("p{i}"),
            value,
            decay: rows > 1,
        });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Backbone, selector: Option<&[Param]>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, selector)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Backbone, Option<Vec<Param>>), CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
