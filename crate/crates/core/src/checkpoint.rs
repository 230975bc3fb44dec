//! Binary model checkpoints.
//!
//! Layout: magic `GLN1`, one kind byte, a length-prefixed TOML config block,
//! then a `u32` matrix count and every matrix as `u32 rows, u32 cols` followed
//! by little-endian `f64` values. Compatibility models append the embedding
//! matrix and one seen/unseen byte per location. Integers are little-endian.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{GlnError, Result};
use crate::floorplan::Split;
use crate::gln::{Gln, GlnConfig};
use crate::map2vec::EmbeddingTable;
use crate::numerics::Matrix;
use crate::zeroshot::CompatibilityModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Standard,
    ZeroShot,
    BaselineCoord,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Standard => 0,
            ModelKind::ZeroShot => 1,
            ModelKind::BaselineCoord => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Standard),
            1 => Some(ModelKind::ZeroShot),
            2 => Some(ModelKind::BaselineCoord),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Standard => "standard",
            ModelKind::ZeroShot => "zeroshot",
            ModelKind::BaselineCoord => "baseline-coord",
        })
    }
}

impl FromStr for ModelKind {
    type Err = GlnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ModelKind::Standard),
            "zeroshot" => Ok(ModelKind::ZeroShot),
            "baseline-coord" => Ok(ModelKind::BaselineCoord),
            other => Err(GlnError::Config(format!(
                "unknown mode `{other}` (expected standard, zeroshot or baseline-coord)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Standard(Gln),
    ZeroShot(CompatibilityModel),
    BaselineCoord(CompatibilityModel),
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        match self {
            Checkpoint::Standard(_) => ModelKind::Standard,
            Checkpoint::ZeroShot(_) => ModelKind::ZeroShot,
            Checkpoint::BaselineCoord(_) => ModelKind::BaselineCoord,
        }
    }

    pub fn gln(&self) -> &Gln {
        match self {
            Checkpoint::Standard(g) => g,
            Checkpoint::ZeroShot(m) | Checkpoint::BaselineCoord(m) => &m.gln,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let gln = self.gln();
        let config = toml::to_string(&gln.config)
            .map_err(|e| GlnError::Config(format!("cannot serialize model config: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(self.kind().tag());
        put_u32(&mut out, config.len())?;
        out.extend_from_slice(config.as_bytes());
        let mats = gln.params.all_matrices();
        put_u32(&mut out, mats.len())?;
        for m in mats {
            put_matrix(&mut out, m)?;
        }
        if let Checkpoint::ZeroShot(m) | Checkpoint::BaselineCoord(m) = self {
            put_matrix(&mut out, m.embeddings.matrix())?;
            put_u32(&mut out, m.split.location_count())?;
            out.extend(m.split.flags().iter().map(|&s| u8::from(s)));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic, expected GLN1"));
        }
        let tag = r.take(1)?[0];
        let kind = ModelKind::from_tag(tag).ok_or_else(|| r.err(&format!("unknown model kind {tag}")))?;
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("config block is not UTF-8"))?;
        let config: GlnConfig = toml::from_str(text).map_err(|e| r.err(&format!("bad config block: {e}")))?;
        let mut gln = Gln::new(config, 0)?;
        let count = r.u32()?;
        let mut slots = gln.params.all_matrices_mut();
        if count != slots.len() {
            return Err(r.err(&format!("{count} matrices stored, config implies {}", slots.len())));
        }
        for (i, slot) in slots.iter_mut().enumerate() {
            let m = r.matrix()?;
            if m.shape() != slot.shape() {
                return Err(r.err(&format!(
                    "matrix {i} has shape {:?}, expected {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            **slot = m;
        }
        let ckpt = if kind == ModelKind::Standard {
            Checkpoint::Standard(gln)
        } else {
            let embeddings = EmbeddingTable::new(r.matrix()?)?;
            let k = r.u32()?;
            let flags = r
                .take(k)?
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(r.err("bad split flag")),
                })
                .collect::<Result<Vec<_>>>()?;
            let model = CompatibilityModel::new(gln, embeddings, Split::from_flags(flags))?;
            if kind == ModelKind::ZeroShot {
                Checkpoint::ZeroShot(model)
            } else {
                Checkpoint::BaselineCoord(model)
            }
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after checkpoint"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| GlnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GlnError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| GlnError::Data(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) -> Result<()> {
    put_u32(out, m.rows())?;
    put_u32(out, m.cols())?;
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> GlnError {
        GlnError::Data(format!("{}: checkpoint offset {}: {msg}", self.source, self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| self.err("matrix size overflow"))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}
