//! JSONL trace ingestion and emission.
//!
//! One record per line:
//! `{"req": int, "pos": int, "token": int, "layer": int, "experts": [int; k]}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MatrixBuilder, Request, RequestTrace, TokenExpertMatrix};
use crate::{Error, Result, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub req: u64,
    pub pos: u64,
    pub token: u64,
    pub layer: u64,
    pub experts: Vec<u64>,
}

/// Ingested profile. `trace.requests` is populated for every (req, pos)
/// seen; routing is attached only to requests whose every position has
/// exactly one record per layer.
#[derive(Debug, Clone)]
pub struct Profile {
    pub matrices: Vec<TokenExpertMatrix>,
    pub trace: RequestTrace,
}

pub fn ingest_profile(path: impl AsRef<Path>, topology: &Topology) -> Result<Profile> {
    let file = File::open(path)?;
    ingest_reader(BufReader::new(file), topology)
}

struct Slot {
    token: u32,
    layers: Vec<Option<Vec<u16>>>,
    duplicated: bool,
}

pub fn ingest_reader(reader: impl BufRead, topology: &Topology) -> Result<Profile> {
    topology.validate()?;
    let n = topology.experts;
    let n_layers = topology.layers;
    let k = topology.top_k;
    let mut builders: Vec<MatrixBuilder> = (0..n_layers).map(|l| MatrixBuilder::new(l, n)).collect();
    let mut slots: BTreeMap<u64, BTreeMap<u64, Slot>> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        let layer = rec.layer as usize;
        if layer >= n_layers {
            return Err(Error::LayerOutOfRange { line: lineno, layer, n_layers });
        }
        if rec.token >= topology.vocab as u64 {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: format!("token {} outside vocabulary {}", rec.token, topology.vocab),
            });
        }
        if rec.experts.len() != k {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: format!("expected {k} experts, got {}", rec.experts.len()),
            });
        }
        let mut set = Vec::with_capacity(k);
        for &e in &rec.experts {
            if e >= n as u64 {
                return Err(Error::ExpertOutOfRange { line: lineno, expert: e as usize, n_experts: n });
            }
            if set.contains(&(e as u16)) {
                return Err(Error::MalformedRecord {
                    line: lineno,
                    reason: format!("expert {e} repeated in routed set"),
                });
            }
            set.push(e as u16);
        }
        let token = rec.token as u32;
        for &e in &set {
            builders[layer].add(token, e as usize)?;
        }

        let slot = slots.entry(rec.req).or_default().entry(rec.pos).or_insert_with(|| Slot {
            token,
            layers: vec![None; n_layers],
            duplicated: false,
        });
        if slot.token != token {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: format!(
                    "request {} position {} carries token {} but earlier records say {}",
                    rec.req, rec.pos, token, slot.token
                ),
            });
        }
        if slot.layers[layer].is_some() {
            slot.duplicated = true;
        } else {
            slot.layers[layer] = Some(set);
        }
    }

    let mut trace = RequestTrace::new(n_layers, n, k, topology.vocab);
    for (id, positions) in slots {
        let complete = positions
            .values()
            .all(|s| !s.duplicated && s.layers.iter().all(Option::is_some));
        let tokens: Vec<u32> = positions.values().map(|s| s.token).collect();
        let routes = if complete {
            positions
                .values()
                .flat_map(|s| s.layers.iter().flat_map(|l| l.as_ref().unwrap().iter().copied()))
                .collect()
        } else {
            Vec::new()
        };
        trace.requests.push(Request { id, tokens, routes });
    }

    Ok(Profile {
        matrices: builders.into_iter().map(MatrixBuilder::finish).collect(),
        trace,
    })
}

/// Writes a routed trace as JSONL, ordered by request, position, layer.
pub fn write_trace(trace: &RequestTrace, mut out: impl Write) -> Result<()> {
    if !trace.is_routed() {
        return Err(Error::MissingRouting);
    }
    for req in &trace.requests {
        for (pos, &token) in req.tokens.iter().enumerate() {
            for layer in 0..trace.n_layers {
                let rec = TraceRecord {
                    req: req.id,
                    pos: pos as u64,
                    token: token as u64,
                    layer: layer as u64,
                    experts: trace.experts(req, pos, layer).iter().map(|&e| e as u64).collect(),
                };
                serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(k: usize, layers: usize) -> Topology {
        Topology::new(2, 4, k, layers, 16)
    }

    #[test]
    fn empty_file_gives_empty_matrices() {
        let p = ingest_reader("".as_bytes(), &topo(2, 2)).unwrap();
        assert_eq!(p.matrices.len(), 2);
        for m in &p.matrices {
            assert_eq!(m.n_tokens(), 0);
            assert_eq!(m.total, 0);
        }
        assert!(p.trace.requests.is_empty());
    }

    #[test]
    fn single_record() {
        let line = r#"{"req":0,"pos":0,"token":5,"layer":0,"experts":[1,3]}"#;
        let p = ingest_reader(line.as_bytes(), &topo(2, 1)).unwrap();
        let m = &p.matrices[0];
        let j = m.row_of(5).unwrap();
        assert_eq!(m.get(j, 1), 1);
        assert_eq!(m.get(j, 3), 1);
        assert_eq!(m.freq[j], 2);
        assert_eq!(m.total, 2);
        assert!(p.trace.is_routed());
    }

    #[test]
    fn duplicate_token_records_aggregate() {
        let data = "{\"req\":0,\"pos\":0,\"token\":5,\"layer\":0,\"experts\":[1,3]}\n\
                    {\"req\":1,\"pos\":0,\"token\":5,\"layer\":0,\"experts\":[1,2]}\n";
        let p = ingest_reader(data.as_bytes(), &topo(2, 1)).unwrap();
        let m = &p.matrices[0];
        assert_eq!(m.n_tokens(), 1);
        assert_eq!(m.row(0), &[0, 2, 1, 1]);
        assert_eq!(m.total, 4);
    }

    #[test]
    fn repeated_record_counts_but_unroutes_request() {
        let line = "{\"req\":0,\"pos\":0,\"token\":5,\"layer\":0,\"experts\":[1,3]}\n";
        let data = line.repeat(2);
        let p = ingest_reader(data.as_bytes(), &topo(2, 1)).unwrap();
        assert_eq!(p.matrices[0].total, 4);
        assert_eq!(p.matrices[0].n_tokens(), 1);
        assert!(!p.trace.is_routed());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "{\"req\":0,\"pos\":0,\"token\":5,\"layer\":0,\"experts\":[1,3]}\nnot json\n";
        match ingest_reader(bad.as_bytes(), &topo(2, 1)) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_expert = r#"{"req":0,"pos":0,"token":5,"layer":0,"experts":[1,4]}"#;
        assert!(matches!(
            ingest_reader(bad_expert.as_bytes(), &topo(2, 1)),
            Err(Error::ExpertOutOfRange { line: 1, expert: 4, .. })
        ));
        let bad_layer = r#"{"req":0,"pos":0,"token":5,"layer":3,"experts":[1,2]}"#;
        assert!(matches!(
            ingest_reader(bad_layer.as_bytes(), &topo(2, 2)),
            Err(Error::LayerOutOfRange { line: 1, layer: 3, .. })
        ));
    }

    #[test]
    fn missing_layer_leaves_request_unrouted() {
        let line = r#"{"req":0,"pos":0,"token":5,"layer":0,"experts":[1,3]}"#;
        let p = ingest_reader(line.as_bytes(), &topo(2, 2)).unwrap();
        assert!(!p.trace.is_routed());
        assert_eq!(p.trace.requests[0].tokens, vec![5]);
    }
}
