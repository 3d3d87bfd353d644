//! `FOCB` feature files and the JSON side files that travel with them.
//!
//! Layout, little-endian: magic `FOCB`, u32 version, u32 C, u32 d, then one
//! record per bag until end of file: u32 id length, UTF-8 id, u32 n_real,
//! u32 label, `n_real × d` f32 features row-major, `n_real × 2` f32 coords.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Bag, BagError, Dataset, EvidenceTruth, Splits};
use crate::engine::Tensor;

pub const MAGIC: &[u8; 4] = b"FOCB";
pub const FORMAT_VERSION: u32 = 1;

pub const BAGS_FILE: &str = "bags.focb";
pub const SPLITS_FILE: &str = "splits.json";
pub const EVIDENCE_FILE: &str = "evidence.json";

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), BagError> {
    let v = u32::try_from(v).map_err(|_| BagError::InvalidConfig(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, values: &[f64]) -> Result<(), BagError> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Writes every bag of `dataset`; each bag must share the dataset's `d`.
pub fn write_bags(w: &mut impl Write, dataset: &Dataset) -> Result<(), BagError> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION as usize)?;
    put_u32(w, dataset.num_classes)?;
    put_u32(w, dataset.feature_dim)?;
    for bag in &dataset.bags {
        if bag.dim() != dataset.feature_dim {
            return Err(BagError::DimMismatch {
                id: bag.id.clone(),
                found: bag.dim(),
                expected: dataset.feature_dim,
            });
        }
        put_u32(w, bag.id.len())?;
        w.write_all(bag.id.as_bytes())?;
        put_u32(w, bag.n_real())?;
        put_u32(w, bag.label)?;
        put_f32s(w, bag.features.data())?;
        put_f32s(w, bag.coords.data())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), BagError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => BagError::Truncated { what },
        _ => BagError::Io(e),
    })
}

fn get_u32(r: &mut impl Read, what: &'static str) -> Result<u32, BagError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, count: usize, what: &'static str) -> Result<Vec<f64>, BagError> {
    let mut raw = vec![0u8; count * 4];
    read_exact(r, &mut raw, what)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads a whole `FOCB` stream into `(bags, C, d)`.
pub fn read_bags(r: &mut impl Read) -> Result<(Vec<Bag>, usize, usize), BagError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(BagError::BadMagic);
    }
    let version = get_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(BagError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let num_classes = get_u32(r, "class count")? as usize;
    let d = get_u32(r, "feature dimension")? as usize;

    let mut bags = Vec::new();
    loop {
        // a clean end of file is only allowed between records
        let mut len = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            match r.read(&mut len[filled..])? {
                0 => break,
                n => filled += n,
            }
        }
        if filled == 0 {
            break;
        }
        if filled < 4 {
            return Err(BagError::Truncated { what: "id length" });
        }
        let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact(r, &mut id, "id")?;
        let id = String::from_utf8(id).map_err(|_| BagError::InvalidBag {
            id: "<non-utf8>".into(),
            reason: "id is not valid UTF-8".into(),
        })?;
        let n_real = get_u32(r, "tile count")? as usize;
        let label = get_u32(r, "label")? as usize;
        let features = get_f32s(r, n_real * d, "features")?;
        let coords = get_f32s(r, n_real * 2, "coords")?;
        let features = Tensor::new(n_real, d, features).expect("length checked by reader");
        let coords = Tensor::new(n_real, 2, coords).expect("length checked by reader");
        bags.push(Bag::new(id, features, coords, label)?);
    }
    Ok((bags, num_classes, d))
}

/// Writes `bags.focb`, `splits.json` and `evidence.json` into `dir`.
pub fn save_bags(dir: &Path, dataset: &Dataset, truth: &EvidenceTruth) -> Result<(), BagError> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(BAGS_FILE))?);
    write_bags(&mut w, dataset)?;
    w.flush()?;
    save_splits(&dir.join(SPLITS_FILE), &dataset.splits)?;
    std::fs::write(dir.join(EVIDENCE_FILE), serde_json::to_string_pretty(truth)?)?;
    Ok(())
}

/// Loads a directory written by [`save_bags`]. A missing evidence file
/// yields an empty [`EvidenceTruth`].
pub fn load_bags(dir: &Path) -> Result<(Dataset, EvidenceTruth), BagError> {
    let mut r = BufReader::new(File::open(dir.join(BAGS_FILE))?);
    let (bags, num_classes, d) = read_bags(&mut r)?;
    let splits = load_splits(&dir.join(SPLITS_FILE))?;
    let dataset = Dataset::new(bags, num_classes, d, splits)?;
    let evidence_path = dir.join(EVIDENCE_FILE);
    let truth = if evidence_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(evidence_path)?)?
    } else {
        EvidenceTruth::default()
    };
    Ok((dataset, truth))
}

pub fn save_splits(path: &Path, splits: &Splits) -> Result<(), BagError> {
    std::fs::write(path, serde_json::to_string_pretty(splits)?)?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<Splits, BagError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
