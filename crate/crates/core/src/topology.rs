//! Deployment shape: devices, expert clusters, experts per layer and batch
//! geometry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    /// Device count.
    #[serde(rename = "G")]
    pub devices: usize,
    /// EP degree, i.e. number of expert clusters.
    #[serde(rename = "E")]
    pub clusters: usize,
    /// Experts per MoE layer.
    #[serde(rename = "N")]
    pub experts: usize,
    /// Experts routed per token.
    #[serde(rename = "k")]
    pub top_k: usize,
    /// Number of MoE layers.
    #[serde(rename = "L")]
    pub layers: usize,
    /// Global batch size (requests per simulated batch).
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "S_seq")]
    pub seq_len: usize,
    pub vocab: usize,
}

impl Topology {
    /// A topology with `E = G` and unit batch geometry.
    pub fn new(devices: usize, experts: usize, top_k: usize, layers: usize, vocab: usize) -> Self {
        Self {
            devices,
            clusters: devices,
            experts,
            top_k,
            layers,
            batch_size: 1,
            seq_len: 1,
            vocab,
        }
    }

    pub fn with_clusters(mut self, clusters: usize) -> Self {
        self.clusters = clusters;
        self
    }

    pub fn with_batch(mut self, batch_size: usize, seq_len: usize) -> Self {
        self.batch_size = batch_size;
        self.seq_len = seq_len;
        self
    }

    /// Experts hosted per cluster, `N / E`.
    pub fn experts_per_cluster(&self) -> usize {
        self.experts / self.clusters
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("G", self.devices),
            ("E", self.clusters),
            ("N", self.experts),
            ("k", self.top_k),
            ("L", self.layers),
            ("B", self.batch_size),
            ("S_seq", self.seq_len),
            ("vocab", self.vocab),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidTopology(format!("{name} must be at least 1")));
            }
        }
        if !self.experts.is_multiple_of(self.clusters) {
            return Err(Error::InvalidTopology(format!(
                "E = {} does not divide N = {}",
                self.clusters, self.experts
            )));
        }
        if self.top_k > self.experts {
            return Err(Error::InvalidTopology(format!(
                "k = {} exceeds N = {}",
                self.top_k, self.experts
            )));
        }
        if self.clusters > u16::MAX as usize + 1 || self.experts > u16::MAX as usize + 1 {
            return Err(Error::InvalidTopology(
                "E and N must fit 16-bit labels".into(),
            ));
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::InvalidTopology("vocab must fit 32-bit token ids".into()));
        }
        Ok(())
    }
}

/// Parses `key = value` lines (`#` starts a comment). Unknown keys are an
/// error; `E` defaults to `G`, `B` and `S_seq` default to 1.
impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut vals: [Option<usize>; 8] = [None; 8];
        const KEYS: [&str; 8] = ["G", "E", "N", "k", "L", "B", "S_seq", "vocab"];
        for (lineno, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidTopology(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let slot = KEYS.iter().position(|k| *k == key).ok_or_else(|| {
                Error::InvalidTopology(format!("line {}: unknown key '{key}'", lineno + 1))
            })?;
            let parsed = value.trim().parse::<usize>().map_err(|e| {
                Error::InvalidTopology(format!("line {}: {key}: {e}", lineno + 1))
            })?;
            vals[slot] = Some(parsed);
        }
        let need = |i: usize| {
            vals[i].ok_or_else(|| Error::InvalidTopology(format!("missing key '{}'", KEYS[i])))
        };
        let devices = need(0)?;
        let topo = Topology {
            devices,
            clusters: vals[1].unwrap_or(devices),
            experts: need(2)?,
            top_k: need(3)?,
            layers: need(4)?,
            batch_size: vals[5].unwrap_or(1),
            seq_len: vals[6].unwrap_or(1),
            vocab: need(7)?,
        };
        topo.validate()?;
        Ok(topo)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "G={}", self.devices)?;
        writeln!(f, "E={}", self.clusters)?;
        writeln!(f, "N={}", self.experts)?;
        writeln!(f, "k={}", self.top_k)?;
        writeln!(f, "L={}", self.layers)?;
        writeln!(f, "B={}", self.batch_size)?;
        writeln!(f, "S_seq={}", self.seq_len)?;
        writeln!(f, "vocab={}", self.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_key_value_file() {
        let t: Topology = "G=4\nN = 16 # experts\nk=2\nL=3\nvocab=1000\n".parse().unwrap();
        assert_eq!(t.clusters, 4);
        assert_eq!(t.experts_per_cluster(), 4);
        let again: Topology = t.to_string().parse().unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn rejects_indivisible_experts() {
        let err = Topology::new(3, 16, 2, 1, 10).validate().unwrap_err();
        assert!(err.to_string().contains("does not divide"));
    }

    #[test]
    fn rejects_k_above_n_and_zero_fields() {
        assert!(Topology::new(2, 4, 5, 1, 10).validate().is_err());
        assert!(Topology::new(2, 4, 1, 0, 10).validate().is_err());
        assert!("G=2\nN=4\nk=1\nL=1\nvocab=3\nfoo=1".parse::<Topology>().is_err());
    }
}
