//! Bit-exact tensor checkpoints.
//!
//! Layout: the 6-byte magic `CLORA1`, a little-endian `u32` header length,
//! a UTF-8 header with one `name\trows\tcols\toffset` line per tensor, then
//! the tensors as consecutive little-endian `f64` blobs. Offsets count
//! `f64` elements from the start of the blob section.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lrm::AdapterBank;
use crate::vit::{Adapters, AttachMode, Placement, VitWeights};

pub const MAGIC: &[u8; 6] = b"CLORA1";

pub type NamedTensors = Vec<(String, Matrix)>;

pub fn to_bytes(tensors: &[(String, Matrix)]) -> Result<Vec<u8>> {
    let mut header = String::new();
    let mut offset = 0usize;
    for (name, m) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "tensor name {name:?} is empty or has whitespace"
            )));
        }
        header.push_str(&format!("{name}\t{}\t{}\t{offset}\n", m.rows(), m.cols()));
        offset += m.len();
    }
    let header_len =
        u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, m) in tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NamedTensors> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing CLORA1 magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    len_bytes.copy_from_slice(&bytes[6..10]);
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let blob_start = 10 + header_len;
    if bytes.len() < blob_start {
        return Err(bad("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..blob_start])
        .map_err(|e| bad(format!("header is not UTF-8: {e}")))?;
    let blob = &bytes[blob_start..];
    if !blob.len().is_multiple_of(8) {
        return Err(bad(format!(
            "blob section of {} bytes is not a whole number of f64",
            blob.len()
        )));
    }
    let total = blob.len() / 8;

    let mut out = Vec::new();
    for (lineno, line) in header.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| bad(format!("header line {}: bad number {s:?}", lineno + 1)))
        };
        let [name, rows, cols, offset] = fields[..] else {
            return Err(bad(format!(
                "header line {} has {} fields",
                lineno + 1,
                fields.len()
            )));
        };
        let (rows, cols, offset) = (parse(rows)?, parse(cols)?, parse(offset)?);
        let end = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_add(offset))
            .filter(|&e| e <= total)
            .ok_or_else(|| bad(format!("tensor `{name}` runs past the end of the blob")))?;
        let data = blob[offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name.to_string(), Matrix::new(rows, cols, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Matrix)]) -> Result<()> {
    fs::write(path, to_bytes(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    from_bytes(&fs::read(path)?)
}

/// A trained model: frozen backbone, head and (unless merged) adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub weights: VitWeights,
    pub adapters: Option<Adapters>,
}

fn mode_code(mode: AttachMode) -> f64 {
    match mode {
        AttachMode::None => 0.0,
        AttachMode::PreBlock => 1.0,
        AttachMode::QvUpdate => 2.0,
    }
}

impl ModelCheckpoint {
    pub fn to_tensors(&self) -> NamedTensors {
        let mut out = self.weights.named_tensors("vit/");
        if let Some(a) = &self.adapters {
            let meta = [
                mode_code(a.mode),
                a.placement.mha as u8 as f64,
                a.placement.ffn as u8 as f64,
            ];
            out.push(("adapter/attach".to_string(), Matrix::row_vector(&meta)));
            out.extend(a.bank.named_tensors("adapter/"));
        }
        out
    }

    pub fn from_tensors(tensors: &[(String, Matrix)]) -> Result<Self> {
        let weights = VitWeights::from_named_tensors("vit/", tensors)?;
        let adapters = match tensors.iter().find(|(n, _)| n == "adapter/attach") {
            None => None,
            Some((_, meta)) => {
                if meta.shape() != (1, 3) {
                    return Err(Error::Checkpoint("bad adapter/attach tensor".into()));
                }
                let mode = match meta.get(0, 0) as u8 {
                    1 => AttachMode::PreBlock,
                    2 => AttachMode::QvUpdate,
                    other => return Err(Error::Checkpoint(format!("unknown attach mode {other}"))),
                };
                let placement = Placement {
                    mha: meta.get(0, 1) != 0.0,
                    ffn: meta.get(0, 2) != 0.0,
                };
                let bank = AdapterBank::from_named_tensors("adapter/", tensors)?;
                Some(Adapters::new(bank, mode, placement, &weights.config)?)
            }
        };
        Ok(Self { weights, adapters })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let odd = Matrix::row_vector(&[f64::MIN_POSITIVE, -0.0, 1e300, f64::EPSILON, -3.25]);
        let tensors = vec![
            (
                "a".to_string(),
                Matrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 0.3)),
            ),
            ("b/c".to_string(), odd),
            ("empty".to_string(), Matrix::zeros(0, 4)),
        ];
        let back = from_bytes(&to_bytes(&tensors).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, m1), (n2, m2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(m1.shape(), m2.shape());
            let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(m1), bits(m2));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"nope").is_err());
        let mut bytes = to_bytes(&[("x".to_string(), Matrix::identity(2))]).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(to_bytes(&[("has space".to_string(), Matrix::identity(1))]).is_err());
    }
}
