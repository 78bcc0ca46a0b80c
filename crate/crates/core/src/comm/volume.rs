use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Collective {
    AllReduce,
    AllGather,
    ReduceScatter,
    All2All,
}

/// Per-device volume of one collective over a `B x S` token batch.
///
/// Ring reductions move `(G-1)/G` of the buffer per phase; all-to-all moves
/// the `(1 - alpha)` share of the `k` routed copies that leave the device.
pub fn volume_collective(kind: Collective, g: usize, b: f64, s: f64, k: usize, alpha: f64) -> Result<f64> {
    if g == 0 {
        return Err(Error::InvalidTopology("G must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let g = g as f64;
    let bs = b * s;
    Ok(match kind {
        Collective::AllReduce => 2.0 * (g - 1.0) * bs / g,
        Collective::AllGather | Collective::ReduceScatter => (g - 1.0) * bs / g,
        Collective::All2All => (1.0 - alpha) * k as f64 * bs / g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage {
    pub kind: Collective,
    /// Local activation rate; only meaningful for all-to-all stages.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSpec {
    pub g: usize,
    pub b: f64,
    pub s: f64,
    pub k: usize,
    pub stages: Vec<Stage>,
}

impl PipelineSpec {
    /// AR -> A2A -> A2A -> AG with the layout-agnostic rate `alpha = 1/G`.
    pub fn ds_moe(g: usize, b: f64, s: f64, k: usize) -> Self {
        Self::ds_moe_at(g, b, s, k, 1.0 / g.max(1) as f64)
    }

    /// The DS-MoE stage sequence with a measured local activation rate.
    pub fn ds_moe_at(g: usize, b: f64, s: f64, k: usize, alpha: f64) -> Self {
        let a2a = Stage { kind: Collective::All2All, alpha };
        Self {
            g,
            b,
            s,
            k,
            stages: vec![
                Stage { kind: Collective::AllReduce, alpha: 0.0 },
                a2a,
                a2a,
                Stage { kind: Collective::AllGather, alpha: 0.0 },
            ],
        }
    }

    /// RS -> A2A -> A2A.
    pub fn s_moe(g: usize, b: f64, s: f64, k: usize, alpha: f64) -> Self {
        let a2a = Stage { kind: Collective::All2All, alpha };
        Self { g, b, s, k, stages: vec![Stage { kind: Collective::ReduceScatter, alpha: 0.0 }, a2a, a2a] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageVolume {
    pub kind: Collective,
    pub alpha: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeReport {
    pub stages: Vec<StageVolume>,
    pub total: f64,
    pub g: usize,
    pub b: f64,
    pub s: f64,
    pub k: usize,
}

impl VolumeReport {
    pub fn bytes(&self, hidden: usize) -> f64 {
        self.total * hidden as f64 * 2.0
    }
}

pub fn pipeline_volume(spec: &PipelineSpec) -> Result<VolumeReport> {
    if spec.stages.is_empty() {
        return Err(Error::InvalidConfig("empty pipeline".into()));
    }
    let stages = spec
        .stages
        .iter()
        .map(|st| {
            Ok(StageVolume {
                kind: st.kind,
                alpha: st.alpha,
                volume: volume_collective(st.kind, spec.g, spec.b, spec.s, spec.k, st.alpha)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VolumeReport {
        total: stages.iter().map(|s| s.volume).sum(),
        stages,
        g: spec.g,
        b: spec.b,
        s: spec.s,
        k: spec.k,
    })
}

/// `(reference - candidate) / reference`.
pub fn saving_ratio(reference: &VolumeReport, candidate: &VolumeReport) -> Result<f64> {
    if reference.b * reference.s != candidate.b * candidate.s {
        return Err(Error::InvalidConfig("reports cover different token batches".into()));
    }
    if reference.total == 0.0 {
        return Err(Error::InvalidConfig("reference volume is zero".into()));
    }
    Ok((reference.total - candidate.total) / reference.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub ds_volume: f64,
    pub smoe_volume: f64,
    /// Absolute saving `ds - smoe`.
    pub saving: f64,
    pub saving_ratio: f64,
}

/// Both pipelines at `B = S = 1` on `steps` evenly spaced `alpha` in [0, 1].
pub fn sweep_alpha(g: usize, k: usize, steps: usize) -> Result<Vec<SweepPoint>> {
    if steps < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least 2 steps".into()));
    }
    let ds = pipeline_volume(&PipelineSpec::ds_moe(g, 1.0, 1.0, k))?;
    let mut out: Vec<SweepPoint> = Vec::with_capacity(steps);
    for i in 0..steps {
        let alpha = i as f64 / (steps - 1) as f64;
        let smoe = pipeline_volume(&PipelineSpec::s_moe(g, 1.0, 1.0, k, alpha))?;
        if let Some(prev) = out.last() {
            if g > 1 && smoe.total >= prev.smoe_volume {
                return Err(Error::InvalidConfig(format!("s-MoE volume not decreasing at alpha = {alpha}")));
            }
        }
        out.push(SweepPoint {
            alpha,
            ds_volume: ds.total,
            smoe_volume: smoe.total,
            saving: ds.total - smoe.total,
            saving_ratio: saving_ratio(&ds, &smoe)?,
        });
    }
    Ok(out)
}
