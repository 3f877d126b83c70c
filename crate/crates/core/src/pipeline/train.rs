//! Training loop, evaluation and the constant-velocity baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{BestRecord, Checkpoint, EpochLog};
use super::config::{ModelConfig, RunConfig};
use super::model::Model;
use crate::decoder::PredictionSet;
use crate::error::{Error, Result};
use crate::evalkit::{EvalCase, MetricsReport};
use crate::numerics::{Grads, OptimizerState, Tape};
use crate::scenario::io::write_json;
use crate::scenario::{reorganize, Dataset, ReorgConfig, Scenario, SubScene};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.json";

/// Stream offsets keeping shuffling and dropout draws apart.
const SHUFFLE_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1 << 32;

pub struct TrainOutcome {
    pub model: Model,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn non_finite(stage: &str, epoch: usize, batch: usize, scenario: &str) -> Error {
    Error::Numeric(format!("{stage} at epoch {epoch}, batch {batch}, scenario {scenario}"))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains from scratch or from `resume`; writes checkpoints and the log to
/// `out` after every epoch when given.
pub fn train(cfg: &RunConfig, data: &Dataset, resume: Option<(Checkpoint, Option<Checkpoint>)>, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.model.check_geometry(&data.limits)?;
    if data.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let (mut model, mut opt, start, mut best, mut log, mut best_ckpt) = match resume {
        Some((ck, best_ck)) => {
            if ck.config.model != cfg.model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            let model = ck.model()?;
            // The kept best checkpoint echoes this run's config, as it would
            // had the run never stopped.
            let best_ck = best_ck.map(|mut b| {
                b.config = cfg.clone();
                b
            });
            (model, ck.optimizer.clone(), ck.epoch, ck.best, ck.log.clone(), best_ck)
        }
        None => {
            let model = Model::new(&cfg.model)?;
            let opt = OptimizerState::new(cfg.train.adamw(), &model.store);
            (model, opt, 0, None, Vec::new(), None)
        }
    };
    opt.config = cfg.train.adamw();
    let seqs = data
        .train
        .iter()
        .map(|s| model.sequence(s))
        .collect::<Result<Vec<_>>>()?;
    let tc = &cfg.train;
    let trainable = model.store.trainable_ids();
    let mut last_ckpt = None;
    for epoch in start..tc.epochs {
        let order = epoch_order(tc.seed, epoch, seqs.len());
        let (mut tot, mut reg, mut cls) = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        let mut partial = false;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            if tc.max_steps.is_some_and(|m| opt.step >= m) {
                partial = true;
                break;
            }
            let mut grads = Grads::new(model.store.len());
            let scale = 1.0 / batch.len() as f64;
            for (i, &idx) in batch.iter().enumerate() {
                let seq = &seqs[idx];
                let mut drng = ChaCha8Rng::seed_from_u64(tc.seed);
                drng.set_stream(DROPOUT_STREAM + (epoch * seqs.len() + b * tc.batch_size + i) as u64);
                let tape_grads = {
                    let mut tape = Tape::new(&model.store);
                    let (l, br) = model.sequence_loss(&mut tape, seq, Some(&mut drng))?;
                    if !br.total.is_finite() {
                        return Err(non_finite("loss", epoch + 1, b, &seq.scenario_id));
                    }
                    tot += br.total;
                    reg += br.regression;
                    cls += br.classification;
                    let l = tape.scale(l, scale);
                    tape.backward(l)?
                };
                for &id in &trainable {
                    if tape_grads.get(id).is_some_and(|g| !g.iter().all(|x| x.is_finite())) {
                        return Err(non_finite(
                            &format!("gradient of `{}`", model.store.get(id).name),
                            epoch + 1,
                            b,
                            &seq.scenario_id,
                        ));
                    }
                }
                grads.accumulate(&tape_grads);
                seen += 1;
            }
            for &id in &trainable {
                if grads.get(id).is_none() {
                    grads.set(id, vec![0.0; model.store.get(id).array.len()]);
                }
            }
            opt.step(&mut model.store, &grads)?;
            if let Some(&id) = trainable
                .iter()
                .find(|&&id| !model.store.get(id).array.data().iter().all(|x| x.is_finite()))
            {
                return Err(non_finite(
                    &format!("update of `{}`", model.store.get(id).name),
                    epoch + 1,
                    b,
                    "(batch)",
                ));
            }
        }
        let n = seen.max(1) as f64;
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &data.val)?.0)
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            steps: opt.step,
            train_total: tot / n,
            train_regression: reg / n,
            train_classification: cls / n,
            partial,
            val,
        });
        let fde = val.map_or(tot / n, |v| v.min_fde6);
        let improved = best.is_none_or(|b: BestRecord| fde < b.min_fde6);
        if improved {
            best = Some(BestRecord {
                epoch: epoch + 1,
                min_fde6: fde,
            });
        }
        let ck = Checkpoint::capture(&model, cfg, &opt, epoch + 1, best, &log);
        if improved {
            best_ckpt = Some(ck.clone());
        }
        if let Some(dir) = out {
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            write_json(&log, &dir.join(LOG_FILE))?;
        }
        last_ckpt = Some(ck);
        if partial {
            break;
        }
    }
    let last = match last_ckpt {
        Some(c) => c,
        None => Checkpoint::capture(&model, cfg, &opt, start, best, &log),
    };
    let best = best_ckpt.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { model, last, best, log })
}

/// Final-sub-scene scoring of every scenario.
pub fn evaluate(model: &Model, scenarios: &[Scenario]) -> Result<(MetricsReport, Vec<EvalCase>)> {
    let cases = scenarios
        .iter()
        .map(|s| {
            let (scene, pred) = model.predict(s)?;
            Ok(EvalCase {
                scenario_id: s.id.clone(),
                pred,
                target: scene.target,
                valid: scene.target_valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::from_cases(&cases)?, cases))
}

pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset) -> Result<(MetricsReport, Vec<EvalCase>)> {
    ck.config.model.check_geometry(&data.limits)?;
    let model = ck.model()?;
    evaluate(&model, &data.val)
}

/// `K` copies of the last observed velocity extrapolated over the horizon.
pub fn constant_velocity_baseline(scene: &SubScene, modes: usize, horizon: usize) -> Result<PredictionSet> {
    let focal = scene.focal();
    let valid: Vec<usize> = (0..focal.valid.len()).filter(|&t| focal.valid[t]).collect();
    if valid.len() < 2 {
        return Err(Error::Input(format!(
            "scenario {}: constant velocity needs two valid focal frames",
            scene.scenario_id
        )));
    }
    let last = *valid.last().expect("checked");
    let p = focal.positions[last];
    let v = focal.velocities[last];
    let rate = scene.sample_rate_hz;
    let one: Vec<[f64; 2]> = (0..horizon)
        .map(|j| {
            let dt = (scene.t_obs + j - last) as f64 / rate;
            [p[0] + v[0] * dt, p[1] + v[1] * dt]
        })
        .collect();
    PredictionSet::uniform(modes, horizon, one.repeat(modes))
}

/// The baseline scored like [`evaluate`] on the full-history sub-scene.
pub fn evaluate_baseline(cfg: &ModelConfig, scenarios: &[Scenario]) -> Result<(MetricsReport, Vec<EvalCase>)> {
    let reorg = ReorgConfig {
        segments: 1,
        stride: cfg.reorg.stride,
    };
    let cases = scenarios
        .iter()
        .map(|s| {
            let seq = reorganize(s, &reorg)?;
            let scene = seq.last();
            Ok(EvalCase {
                scenario_id: s.id.clone(),
                pred: constant_velocity_baseline(scene, cfg.modes, scene.target.len())?,
                target: scene.target.clone(),
                valid: scene.target_valid.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::from_cases(&cases)?, cases))
}
