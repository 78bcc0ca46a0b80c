//! Communication volume of the MoE collective pipelines, analytically and
//! by replaying routed traces.
//!
//! Volumes are in token slots (multiples of one hidden vector); multiply by
//! `hidden * 2` for fp16 bytes.

mod simulate;
mod volume;

pub use simulate::{simulate_layer, write_sim_csv, LayerSim, SimConfig, SimMode, Simulator};
pub use volume::{
    pipeline_volume, saving_ratio, sweep_alpha, volume_collective, Collective, PipelineSpec, Stage,
    StageVolume, SweepPoint, VolumeReport,
};
