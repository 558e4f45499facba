//! Versioned checkpoint container.
//!
//! Layout: magic, format version, length-prefixed canonical-JSON header
//! (architecture, candidate widths with probabilities, kept-count table),
//! little-endian f64 parameter blocks in architecture order, per-width
//! normalization blocks keyed by ascending width, and a trailing FNV-1a
//! 64-bit checksum over every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::error::{Error, Result};
use crate::model::{BnStats, LayerParams, Model, WidthKey};
use crate::od::DropoutDistribution;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ODWCHKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: Architecture,
    widths: Vec<f64>,
    probabilities: Vec<f64>,
    /// Kept output counts per weight layer, one row per width.
    kept_table: Vec<Vec<usize>>,
}

/// FNV-1a over a byte stream; stable and dependency-free.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        architecture: model.arch().clone(),
        widths: model.dist().values().to_vec(),
        probabilities: model.dist().probabilities().to_vec(),
        kept_table: model
            .dist()
            .values()
            .iter()
            .map(|&p| model.kept_counts(p).map(|c| c.to_vec()))
            .collect::<Result<_>>()?,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);

    for layer in model.layers() {
        match layer {
            LayerParams::Dense { w, b } | LayerParams::Conv2d { w, b } => {
                write_f64s(&mut out, w.data());
                if let Some(b) = b {
                    write_f64s(&mut out, b);
                }
            }
            LayerParams::Batchnorm { gamma, beta, .. } => {
                write_f64s(&mut out, gamma);
                write_f64s(&mut out, beta);
            }
            LayerParams::Stateless => {}
        }
    }

    for &p in model.dist().values() {
        for layer in model.layers() {
            if let LayerParams::Batchnorm { stats, .. } = layer {
                let entry = stats
                    .get(&WidthKey(p))
                    .ok_or(Error::WidthNotInDistribution(p))?;
                out.extend_from_slice(&entry.count.to_le_bytes());
                write_f64s(&mut out, &entry.mean);
                write_f64s(&mut out, &entry.var);
            }
        }
    }

    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    // Checksum covers everything but its own trailing 8 bytes.
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }

    let header_len = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(cursor.take(header_len)?)?;
    let arch = header.architecture;
    let dist = DropoutDistribution::new(header.widths.clone(), header.probabilities)?;

    let full_plan = arch.plan_with_kept(&arch.full_kept_counts())?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (idx, spec) in arch.layers.iter().enumerate() {
        use crate::arch::LayerKind;
        let lp = match spec.kind {
            LayerKind::Dense { width, bias } => {
                let n_in = full_plan.shapes[idx].count();
                let w = cursor.take_f64s(width * n_in)?;
                let b = if bias {
                    Some(cursor.take_f64s(width)?)
                } else {
                    None
                };
                LayerParams::Dense {
                    w: Tensor::from_vec(&[width, n_in], w)?,
                    b,
                }
            }
            LayerKind::Conv2d {
                filters,
                kernel,
                bias,
            } => {
                let in_ch = match full_plan.shapes[idx] {
                    crate::arch::FeatureShape::Image { c, .. } => c,
                    _ => return Err(Error::Checkpoint("conv without image input".into())),
                };
                let w = cursor.take_f64s(filters * in_ch * kernel * kernel)?;
                let b = if bias {
                    Some(cursor.take_f64s(filters)?)
                } else {
                    None
                };
                LayerParams::Conv2d {
                    w: Tensor::from_vec(&[filters, in_ch, kernel, kernel], w)?,
                    b,
                }
            }
            LayerKind::Batchnorm => {
                let ch = full_plan.shapes[idx].count_channels();
                let gamma = cursor.take_f64s(ch)?;
                let beta = cursor.take_f64s(ch)?;
                LayerParams::Batchnorm {
                    gamma,
                    beta,
                    stats: BTreeMap::new(),
                }
            }
            _ => LayerParams::Stateless,
        };
        layers.push(lp);
    }

    // Normalization blocks, keyed by ascending width.
    for (wi, &p) in header.widths.iter().enumerate() {
        let kept = header
            .kept_table
            .get(wi)
            .ok_or_else(|| Error::Checkpoint("missing kept-table row".into()))?;
        let plan_p = arch.plan_with_kept(kept)?;
        for (idx, spec) in arch.layers.iter().enumerate() {
            if let crate::arch::LayerKind::Batchnorm = spec.kind {
                let ch = plan_p.shapes[idx].count_channels();
                let count = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap());
                let mean = cursor.take_f64s(ch)?;
                let var = cursor.take_f64s(ch)?;
                if let LayerParams::Batchnorm { stats, .. } = &mut layers[idx] {
                    stats.insert(WidthKey(p), BnStats { mean, var, count });
                }
            }
        }
    }

    if cursor.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "trailing bytes: read {} of {}",
            cursor.pos,
            body.len()
        )));
    }

    let mut kept_table = BTreeMap::new();
    for (wi, &p) in header.widths.iter().enumerate() {
        kept_table.insert(WidthKey(p), header.kept_table[wi].clone());
    }
    Ok(Model::from_parts(arch, dist, layers, kept_table))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl crate::arch::FeatureShape {
    fn count_channels(&self) -> usize {
        match *self {
            crate::arch::FeatureShape::Vector { n } => n,
            crate::arch::FeatureShape::Image { c, .. } => c,
        }
    }
}
