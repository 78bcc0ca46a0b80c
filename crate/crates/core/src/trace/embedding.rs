//! Token embedding tables used for OOV extrapolation.
//!
//! Two on-disk encodings are accepted:
//! - CSV: first line `vocab,dim`, then one line of `dim` floats per token.
//! - binary: magic `CSEM`, `u32` vocab, `u32` dim (little endian), then
//!   `vocab * dim` little-endian `f32` values, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CSEM";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        if !vectors.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} values is not a multiple of dim {dim}",
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| v.is_nan()) {
            return Err(Error::InvalidConfig(format!(
                "NaN in embedding row {} column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self { dim, vectors })
    }

    pub fn vocab(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn vector(&self, token: usize) -> &[f32] {
        &self.vectors[token * self.dim..(token + 1) * self.dim]
    }

    pub fn norm(&self, token: usize) -> f64 {
        self.vector(token).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    /// Zero-norm rows are excluded from nearest-neighbour search.
    pub fn is_zero(&self, token: usize) -> bool {
        self.vector(token).iter().all(|&x| x == 0.0)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::decode_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Format("embedding file is neither binary nor UTF-8 CSV".into()))?;
            Self::parse_csv(&text)
        }
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("missing vocab,dim header".into()))?;
        let (v, d) = header
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("bad header '{header}'")))?;
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|e| Error::Format(format!("header: {e}")))
        };
        let (vocab, dim) = (parse(v)?, parse(d)?);
        let mut vectors = Vec::with_capacity(vocab * dim);
        for (row, line) in lines.enumerate() {
            let before = vectors.len();
            for cell in line.split(',') {
                let x = cell
                    .trim()
                    .parse::<f32>()
                    .map_err(|e| Error::Format(format!("row {row}: {e}")))?;
                vectors.push(x);
            }
            if vectors.len() - before != dim {
                return Err(Error::Format(format!("row {row}: expected {dim} values")));
            }
        }
        if vectors.len() != vocab * dim {
            return Err(Error::Format(format!(
                "expected {vocab} rows, found {}",
                vectors.len() / dim.max(1)
            )));
        }
        Self::new(dim, vectors)
    }

    pub fn decode_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad embedding header".into()));
        }
        let vocab = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12..];
        if payload.len() != vocab * dim * 4 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                vocab * dim * 4
            )));
        }
        let vectors = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, vectors)
    }

    pub fn encode_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.vocab() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{},{}", self.vocab(), self.dim)?;
        for row in self.vectors.chunks_exact(self.dim) {
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_binary_agree() {
        let t = EmbeddingTable::new(2, vec![1.0, 0.5, 0.0, 0.0, -2.25, 3.0]).unwrap();
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let from_csv = EmbeddingTable::parse_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
        let from_bin = EmbeddingTable::decode_binary(&t.encode_binary()).unwrap();
        assert_eq!(from_csv, t);
        assert_eq!(from_bin, t);
        assert!(t.is_zero(1));
        assert!(!t.is_zero(0));
    }

    #[test]
    fn rejects_nan_and_ragged_rows() {
        assert!(EmbeddingTable::new(2, vec![1.0, f32::NAN]).is_err());
        assert!(EmbeddingTable::parse_csv("2,2\n1,2\n3\n").is_err());
        assert!(EmbeddingTable::parse_csv("3,1\n1\n2\n").is_err());
    }
}
