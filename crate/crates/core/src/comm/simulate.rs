//! Event-counting replay of routed traces under a device layout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{pipeline_volume, volume_collective, Collective, PipelineSpec};
use crate::scheduler::{lookup_device, rebatch_tokens, LookupBundle};
use crate::solver::vanilla_expert_layout;
use crate::trace::RequestTrace;
use crate::{ClusterId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Positional token shards, contiguous expert blocks.
    DsMoe,
    /// Lookup-driven token re-batching, contiguous expert blocks.
    STs,
    /// Lookup-driven re-batching and the solved expert layout.
    STsEg,
}

impl SimMode {
    pub const ALL: [SimMode; 3] = [SimMode::DsMoe, SimMode::STs, SimMode::STsEg];

    pub fn name(self) -> &'static str {
        match self {
            SimMode::DsMoe => "ds_moe",
            SimMode::STs => "s_ts",
            SimMode::STsEg => "s_ts_eg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Devices `G`; cluster `c` lives on device `c mod G`.
    pub devices: usize,
    /// Requests per batch.
    pub batch_size: usize,
    /// Feed the n-gram with the devices of the true top-1 experts instead
    /// of the predicted devices.
    pub oracle_history: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSim {
    pub mode: SimMode,
    pub layer: usize,
    /// Token occurrences replayed.
    pub tokens: u64,
    pub local_events: u64,
    /// Routed (token, expert) events whose expert is off the token's device.
    pub remote_tokens: u64,
    pub measured_alpha: f64,
    pub padding_slots: u64,
    /// Per-device all-to-all volume from the event count, `remote / G`.
    pub a2a_event_volume: f64,
    /// The same stage from the analytic model at `measured_alpha`.
    pub a2a_analytic_volume: f64,
    /// Pipeline total at `measured_alpha` (DS-MoE stages for `ds_moe`,
    /// s-MoE stages otherwise).
    pub volume_total: f64,
    /// Relative saving against the `ds_moe` row of the same layer.
    pub saving: f64,
}

/// Replays `trace` with the solved bundle (`s_ts_eg`) and a bundle whose
/// token tables target the contiguous expert layout (`s_ts`).
pub struct Simulator<'a> {
    trace: &'a RequestTrace,
    solved: &'a LookupBundle,
    vanilla: &'a LookupBundle,
    config: SimConfig,
    vanilla_experts: Vec<ClusterId>,
}

struct Counts {
    local: u64,
    remote: u64,
    padding: u64,
    tokens: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(
        trace: &'a RequestTrace,
        solved: &'a LookupBundle,
        vanilla: &'a LookupBundle,
        config: SimConfig,
    ) -> Result<Self> {
        if !trace.is_routed() || trace.requests.is_empty() {
            return Err(Error::MissingRouting);
        }
        if config.devices == 0 || config.batch_size == 0 {
            return Err(Error::InvalidConfig("devices and batch size must be positive".into()));
        }
        for b in [solved, vanilla] {
            if b.n_layers != trace.n_layers || b.n_experts != trace.n_experts {
                return Err(Error::DimensionMismatch(format!(
                    "bundle covers {} layers x {} experts, trace {} x {}",
                    b.n_layers, b.n_experts, trace.n_layers, trace.n_experts
                )));
            }
        }
        if solved.n_clusters != vanilla.n_clusters || !trace.n_experts.is_multiple_of(solved.n_clusters) {
            return Err(Error::DimensionMismatch("bundles disagree on the cluster count".into()));
        }
        Ok(Self {
            trace,
            solved,
            vanilla,
            config,
            vanilla_experts: vanilla_expert_layout(trace.n_experts, solved.n_clusters),
        })
    }

    fn bundle(&self, mode: SimMode) -> &LookupBundle {
        match mode {
            SimMode::STsEg => self.solved,
            _ => self.vanilla,
        }
    }

    fn expert_layout(&self, mode: SimMode, layer: usize) -> &[ClusterId] {
        match mode {
            SimMode::STsEg => self.solved.expert_labels(layer),
            _ => &self.vanilla_experts,
        }
    }

    fn count(&self, mode: SimMode) -> Result<Vec<Counts>> {
        let trace = self.trace;
        let g = self.config.devices;
        let layers = trace.n_layers;
        let bundle = self.bundle(mode);
        let n = bundle.ngram.as_ref().map_or(0, |x| x.n);
        let mut out: Vec<Counts> =
            (0..layers).map(|_| Counts { local: 0, remote: 0, padding: 0, tokens: 0 }).collect();

        for batch in trace.requests.chunks(self.config.batch_size) {
            // (request, position) of every token in batch order
            let slots: Vec<(usize, usize)> = batch
                .iter()
                .enumerate()
                .flat_map(|(r, req)| (0..req.tokens.len()).map(move |p| (r, p)))
                .collect();
            let tokens: Vec<u32> = slots.iter().map(|&(r, p)| batch[r].tokens[p]).collect();
            let len = tokens.len();
            if len == 0 {
                continue;
            }
            let shard = len.div_ceil(g);
            // clusters visited per layer, [token][layer]
            let mut visited = vec![0 as ClusterId; len * layers];
            let mut hist = Vec::with_capacity(len * n);
            for layer in 0..layers {
                let experts = self.expert_layout(mode, layer);
                let devices: Vec<usize> = match mode {
                    SimMode::DsMoe => (0..len).map(|i| i / shard).collect(),
                    _ => {
                        let history = if n > 0 && layer >= n {
                            hist.clear();
                            for i in 0..len {
                                hist.extend_from_slice(&visited[i * layers + layer - n..i * layers + layer]);
                            }
                            Some(hist.as_slice())
                        } else {
                            None
                        };
                        let clusters = lookup_device(&tokens, history, bundle, layer);
                        let (_, idx) = rebatch_tokens(&tokens, &clusters, g)?;
                        out[layer].padding += idx.padding() as u64;
                        let mut dev = vec![0usize; len];
                        for (slot, &src) in idx.perm.iter().enumerate() {
                            if !idx.pad_mask[slot] {
                                dev[src as usize] = slot / idx.group_size;
                            }
                        }
                        for (i, &c) in clusters.iter().enumerate() {
                            visited[i * layers + layer] = c;
                        }
                        dev
                    }
                };
                let c = &mut out[layer];
                c.tokens += len as u64;
                for (i, &(r, p)) in slots.iter().enumerate() {
                    let routed = trace.experts(&batch[r], p, layer);
                    if self.config.oracle_history {
                        visited[i * layers + layer] = experts[routed[0] as usize];
                    }
                    for &x in routed {
                        if experts[x as usize] as usize % g == devices[i] {
                            c.local += 1;
                        } else {
                            c.remote += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn rows(&self, mode: SimMode, counts: &[Counts], reference: &[f64]) -> Result<Vec<LayerSim>> {
        let g = self.config.devices;
        let k = self.trace.top_k;
        counts
            .iter()
            .enumerate()
            .map(|(layer, c)| {
                let events = c.local + c.remote;
                let alpha = if events == 0 { 1.0 } else { c.local as f64 / events as f64 };
                let t = c.tokens as f64;
                let spec = match mode {
                    SimMode::DsMoe => PipelineSpec::ds_moe_at(g, t, 1.0, k, alpha),
                    _ => PipelineSpec::s_moe(g, t, 1.0, k, alpha),
                };
                let total = pipeline_volume(&spec)?.total;
                Ok(LayerSim {
                    mode,
                    layer,
                    tokens: c.tokens,
                    local_events: c.local,
                    remote_tokens: c.remote,
                    measured_alpha: alpha,
                    padding_slots: c.padding,
                    a2a_event_volume: c.remote as f64 / g as f64,
                    a2a_analytic_volume: volume_collective(Collective::All2All, g, t, 1.0, k, alpha)?,
                    volume_total: total,
                    saving: if reference[layer] > 0.0 { (reference[layer] - total) / reference[layer] } else { 0.0 },
                })
            })
            .collect()
    }

    fn reference(&self) -> Result<(Vec<Counts>, Vec<f64>)> {
        let ds = self.count(SimMode::DsMoe)?;
        let totals = self
            .rows(SimMode::DsMoe, &ds, &vec![0.0; ds.len()])?
            .iter()
            .map(|r| r.volume_total)
            .collect();
        Ok((ds, totals))
    }

    /// One row per layer for `mode`.
    pub fn run(&self, mode: SimMode) -> Result<Vec<LayerSim>> {
        let (ds, reference) = self.reference()?;
        let counts = if mode == SimMode::DsMoe { ds } else { self.count(mode)? };
        self.rows(mode, &counts, &reference)
    }

    /// Rows for every layer, three modes per layer in `SimMode::ALL` order.
    pub fn run_all(&self) -> Result<Vec<LayerSim>> {
        let (ds, reference) = self.reference()?;
        let per_mode = [
            self.rows(SimMode::DsMoe, &ds, &reference)?,
            self.rows(SimMode::STs, &self.count(SimMode::STs)?, &reference)?,
            self.rows(SimMode::STsEg, &self.count(SimMode::STsEg)?, &reference)?,
        ];
        let layers = self.trace.n_layers;
        Ok((0..layers).flat_map(|l| per_mode.iter().map(move |rows| rows[l].clone())).collect())
    }
}

/// Replays one layer in one mode.
pub fn simulate_layer(sim: &Simulator<'_>, mode: SimMode, layer: usize) -> Result<LayerSim> {
    if layer >= sim.trace.n_layers {
        return Err(Error::DimensionMismatch(format!("layer {layer} outside the trace")));
    }
    Ok(sim.run(mode)?.swap_remove(layer))
}

/// Header then `mode,layer,alpha,remote_tokens,volume_total,saving` rows.
pub fn write_sim_csv(rows: &[LayerSim], mut out: impl Write) -> Result<()> {
    writeln!(out, "mode,layer,alpha,remote_tokens,volume_total,saving")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.mode.name(),
            r.layer,
            r.measured_alpha,
            r.remote_tokens,
            r.volume_total,
            r.saving
        )?;
    }
    Ok(())
}
