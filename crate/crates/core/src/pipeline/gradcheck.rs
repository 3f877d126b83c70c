//! End-to-end gradient check of the flagship composition on a small scene.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Flags, ModelConfig};
use super::model::Model;
use crate::enhancer::synthetic_foreign;
use crate::error::Result;
use crate::numerics::{grad_check_floored, GradCheckReport};
use crate::scenario::{generate_synthetic, Scenario, SynthConfig};

pub const PIPELINE_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_STEP: f64 = 1e-5;
/// Gradients below this are compared absolutely. The objective is about 20
/// and its central differences carry `~5e-10` of rounding noise at this
/// step; larger steps cross max-pool and ReLU kinks.
pub const PIPELINE_FLOOR: f64 = 1e-5;

/// A seeded scene with exactly `agents` agents and `polylines` polylines.
pub fn small_scene(seed: u64, agents: usize, polylines: usize) -> Scenario {
    let cfg = SynthConfig {
        min_neighbors: agents - 1,
        max_neighbors: agents - 1,
        ..SynthConfig::default()
    };
    let mut s = generate_synthetic(seed, 1, &cfg).remove(0);
    s.agents.truncate(agents);
    s.polylines.truncate(polylines);
    s
}

/// Narrow flagship model (scene stream and enhancer on) over synthetic
/// foreign layers. Every trainable tensor is jittered so that zero-initialized
/// adapters do not hide gradient paths.
pub fn small_flagship(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        enc_blocks: 1,
        ff_width: 32,
        flags: Flags::FLAGSHIP,
        seed,
        ..ModelConfig::default()
    };
    let foreign = synthetic_foreign(seed, 2, 24, 2, 1, 1)?;
    let mut model = Model::with_foreign(&cfg, Some(foreign))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for id in model.store.trainable_ids() {
        for v in model.store.get_mut(id).array.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    Ok(model)
}

/// Checks every `stride`-th coordinate of every trainable tensor of the
/// small flagship model against central differences of the sequence loss on
/// a 4-agent, 6-polyline scene.
pub fn pipeline_grad_check(stride: usize) -> Result<GradCheckReport> {
    let mut model = small_flagship(7)?;
    let scene = small_scene(11, 4, 6);
    let seq = model.sequence(&scene)?;
    let ids = model.store.trainable_ids();
    let mut store = std::mem::take(&mut model.store);
    let report = grad_check_floored(&mut store, &ids, PIPELINE_STEP, stride, PIPELINE_FLOOR, |tape| {
        Ok(model.sequence_loss::<dyn RngCore>(tape, &seq, None)?.0)
    })?;
    model.store = store;
    Ok(report)
}
