//! Scenario data model, codec, synthetic generation and reorganization.

mod frame;
pub mod io;
mod reorg;
pub mod synth;
mod types;

pub use frame::{from_reference_frame, pose_delta, to_reference_frame, wrap_angle, Pose2D, PoseDelta};
pub use io::{read_dataset, read_scenario, write_dataset, write_scenario, Dataset, Split};
pub use reorg::{reorganize, AgentView, PolylineView, ReorgConfig, SubScene, SubSceneSequence, MIN_HISTORY};
pub use synth::{generate_synthetic, synthetic_dataset, SynthConfig, Template};
pub use types::{
    AgentCategory, AgentTrack, LaneCategory, Limits, MapPolyline, Scenario, DEFAULT_T_F, DEFAULT_T_H, SAMPLE_RATE_HZ,
};
