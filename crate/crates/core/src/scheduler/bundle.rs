//! Lookup tables shipped to the serving side.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! header (24 bytes)
//!   magic   [u8; 4] = "CSLB"
//!   version u16     = 1
//!   reserved u16    = 0
//!   vocab   u32
//!   E       u16     clusters
//!   n       u16     n-gram depth (0 = no n-gram section)
//!   L       u32     layers
//!   N       u32     experts
//! token labels       i16 [L][vocab]
//! token confidences  f32 [L][vocab]
//! n-gram probs       f32 [E^n][E]   (absent when n = 0)
//! n-gram labels      i16 [E^n]      (absent when n = 0)
//! expert labels      i16 [L][N]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::predictor::{DeviceNGramTable, TokenDeviceTable};
use crate::{ClusterId, Error, Result};

const MAGIC: &[u8; 4] = b"CSLB";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

/// Serialized n-gram table: transition probabilities and the row argmax.
/// The confidence of a row is the probability of its label, so unobserved
/// (all-zero) rows have confidence 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLookup {
    pub n: usize,
    pub n_clusters: usize,
    pub probs: Vec<f32>,
    pub labels: Vec<ClusterId>,
}

impl NGramLookup {
    pub fn from_table(table: &DeviceNGramTable) -> Self {
        Self {
            n: table.n,
            n_clusters: table.n_clusters,
            probs: table.probs.iter().map(|&p| p as f32).collect(),
            labels: table.best.clone(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row_index(&self, history: &[ClusterId]) -> usize {
        history.iter().fold(0usize, |acc, &d| acc * self.n_clusters + d as usize)
    }

    pub fn confidence(&self, row: usize) -> f32 {
        self.probs[row * self.n_clusters + self.labels[row] as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupBundle {
    pub vocab: usize,
    pub n_clusters: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    /// `[layer][vocab]`.
    pub token_labels: Vec<ClusterId>,
    pub token_confidence: Vec<f32>,
    pub ngram: Option<NGramLookup>,
    /// `[layer][expert]`.
    pub expert_labels: Vec<ClusterId>,
}

impl LookupBundle {
    /// One token table and one expert layout per layer.
    pub fn from_layers(
        tables: &[TokenDeviceTable],
        experts: &[Vec<ClusterId>],
        ngram: Option<&DeviceNGramTable>,
    ) -> Result<Self> {
        if tables.is_empty() || tables.len() != experts.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} token tables for {} expert layouts",
                tables.len(),
                experts.len()
            )));
        }
        let bundle = Self {
            vocab: tables[0].vocab(),
            n_clusters: tables[0].n_clusters,
            n_layers: tables.len(),
            n_experts: experts[0].len(),
            token_labels: tables.iter().flat_map(|t| t.labels.iter().copied()).collect(),
            token_confidence: tables.iter().flat_map(|t| t.confidence.iter().copied()).collect(),
            ngram: ngram.map(NGramLookup::from_table),
            expert_labels: experts.concat(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn ngram_n(&self) -> usize {
        self.ngram.as_ref().map_or(0, |g| g.n)
    }

    pub fn token_labels(&self, layer: usize) -> &[ClusterId] {
        &self.token_labels[layer * self.vocab..(layer + 1) * self.vocab]
    }

    pub fn token_confidence(&self, layer: usize) -> &[f32] {
        &self.token_confidence[layer * self.vocab..(layer + 1) * self.vocab]
    }

    pub fn expert_labels(&self, layer: usize) -> &[ClusterId] {
        &self.expert_labels[layer * self.n_experts..(layer + 1) * self.n_experts]
    }

    pub fn shape(&self) -> BundleShape {
        BundleShape {
            vocab: self.vocab,
            layers: self.n_layers,
            clusters: self.n_clusters,
            ngram_n: self.ngram_n(),
            experts: self.n_experts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.n_clusters;
        if e == 0 || e > 1 << 15 {
            return Err(Error::InvalidConfig(format!("E = {e} not representable")));
        }
        if self.token_labels.len() != self.vocab * self.n_layers
            || self.token_confidence.len() != self.token_labels.len()
            || self.expert_labels.len() != self.n_experts * self.n_layers
        {
            return Err(Error::DimensionMismatch("bundle sections do not match the header".into()));
        }
        if self.token_labels.iter().chain(&self.expert_labels).any(|&l| l as usize >= e) {
            return Err(Error::InvalidConfig(format!("label outside [0, {e})")));
        }
        if self.token_confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidConfig("token confidence outside [0, 1]".into()));
        }
        if let Some(g) = &self.ngram {
            let rows = e.checked_pow(g.n as u32).unwrap_or(usize::MAX);
            if g.n == 0 || g.n_clusters != e || g.labels.len() != rows || g.probs.len() != rows * e {
                return Err(Error::DimensionMismatch("n-gram section does not match E^n".into()));
            }
            if g.labels.iter().any(|&l| l as usize >= e) || g.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidConfig("n-gram entries out of range".into()));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + bundle_memory_bytes(&self.shape()).total as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.vocab as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_clusters as u16).to_le_bytes());
        out.extend_from_slice(&(self.ngram_n() as u16).to_le_bytes());
        out.extend_from_slice(&(self.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_experts as u32).to_le_bytes());
        self.token_labels.iter().for_each(|&l| out.extend_from_slice(&(l as i16).to_le_bytes()));
        self.token_confidence.iter().for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
        if let Some(g) = &self.ngram {
            g.probs.iter().for_each(|p| out.extend_from_slice(&p.to_le_bytes()));
            g.labels.iter().for_each(|&l| out.extend_from_slice(&(l as i16).to_le_bytes()));
        }
        self.expert_labels.iter().for_each(|&l| out.extend_from_slice(&(l as i16).to_le_bytes()));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("lookup bundle: {m}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u16_at(4) != VERSION {
            return Err(bad(&format!("unsupported version {}", u16_at(4))));
        }
        let vocab = u32_at(8) as usize;
        let e = u16_at(12) as usize;
        let n = u16_at(14) as usize;
        let layers = u32_at(16) as usize;
        let experts = u32_at(20) as usize;
        if e == 0 {
            return Err(bad("zero clusters"));
        }
        let shape = BundleShape { vocab, layers, clusters: e, ngram_n: n, experts };
        let expected = bundle_memory_bytes(&shape).total;
        if (bytes.len() - HEADER_LEN) as u128 != expected as u128 {
            return Err(bad(&format!("payload is {} bytes, header implies {expected}", bytes.len() - HEADER_LEN)));
        }
        let mut cur = Cursor { bytes, pos: HEADER_LEN };
        let token_labels = cur.labels(vocab * layers)?;
        let token_confidence = cur.f32s(vocab * layers);
        let ngram = if n > 0 {
            let rows = e.pow(n as u32);
            let probs = cur.f32s(rows * e);
            let labels = cur.labels(rows)?;
            Some(NGramLookup { n, n_clusters: e, probs, labels })
        } else {
            None
        };
        let expert_labels = cur.labels(experts * layers)?;
        let bundle = Self {
            vocab,
            n_clusters: e,
            n_layers: layers,
            n_experts: experts,
            token_labels,
            token_confidence,
            ngram,
            expert_labels,
        };
        bundle.validate().map_err(|err| bad(&err.to_string()))?;
        Ok(bundle)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn labels(&mut self, count: usize) -> Result<Vec<ClusterId>> {
        let out = self.bytes[self.pos..self.pos + 2 * count]
            .chunks_exact(2)
            .map(|c| {
                let v = i16::from_le_bytes([c[0], c[1]]);
                ClusterId::try_from(v).map_err(|_| Error::Format(format!("negative label {v}")))
            })
            .collect();
        self.pos += 2 * count;
        out
    }

    fn f32s(&mut self, count: usize) -> Vec<f32> {
        let out = self.bytes[self.pos..self.pos + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 4 * count;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BundleShape {
    pub vocab: usize,
    pub layers: usize,
    pub clusters: usize,
    /// n-gram depth, 0 when the bundle has no n-gram table.
    pub ngram_n: usize,
    pub experts: usize,
}

/// Payload bytes per section (header excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub token_labels: u64,
    pub token_confidence: u64,
    pub ngram: u64,
    pub experts: u64,
    pub total: u64,
}

pub fn bundle_memory_bytes(shape: &BundleShape) -> MemoryReport {
    let tokens = shape.vocab as u64 * shape.layers as u64;
    let e = shape.clusters as u64;
    let ngram = if shape.ngram_n == 0 {
        0
    } else {
        let rows = e.saturating_pow(shape.ngram_n as u32);
        rows.saturating_mul(4 * e + 2)
    };
    let token_labels = tokens * 2;
    let token_confidence = tokens * 4;
    let experts = shape.experts as u64 * shape.layers as u64 * 2;
    MemoryReport {
        token_labels,
        token_confidence,
        ngram,
        experts,
        total: token_labels + token_confidence + ngram + experts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LookupBundle {
        let mut t0 = TokenDeviceTable::fallback(5, 2);
        t0.labels[3] = 0;
        t0.confidence[3] = 0.75;
        let t1 = TokenDeviceTable::fallback(5, 2);
        let mut g = DeviceNGramTable::empty(2, 1).unwrap();
        g.probs = vec![0.25, 0.75, 0.0, 0.0];
        g.best = vec![1, 0];
        LookupBundle::from_layers(&[t0, t1], &[vec![0, 1, 0, 1], vec![1, 1, 0, 0]], Some(&g)).unwrap()
    }

    #[test]
    fn round_trip() {
        let b = sample();
        let bytes = b.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 5 * 2 * 6 + 2 * (4 * 2 + 2) + 4 * 2 * 2);
        assert_eq!(LookupBundle::decode(&bytes).unwrap(), b);
        assert_eq!(b.ngram.as_ref().unwrap().confidence(1), 0.0);
    }

    #[test]
    fn header_is_bit_exact() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"CSLB");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &5u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &[2, 0, 1, 0]);
        assert_eq!(&bytes[16..24], &[2, 0, 0, 0, 4, 0, 0, 0]);
        // first token label of layer 0
        assert_eq!(&bytes[24..26], &[0, 0]);
    }

    #[test]
    fn truncated_or_corrupt_input_is_rejected() {
        let bytes = sample().encode();
        assert!(LookupBundle::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(LookupBundle::decode(&bad).is_err());
        let mut neg = bytes;
        neg[24..26].copy_from_slice(&(-1i16).to_le_bytes());
        assert!(LookupBundle::decode(&neg).is_err());
    }

    #[test]
    fn memory_items() {
        let m = bundle_memory_bytes(&BundleShape { vocab: 0, layers: 60, clusters: 4, ngram_n: 2, experts: 8 });
        assert_eq!(m.token_labels, 0);
        assert_eq!(m.ngram, 16 * (4 * 4 + 2));
        assert_eq!(m.experts, 8 * 60 * 2);
    }
}
