//! The composed network: encoder, optional streams, blocks, enhancer, decoder.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::context_stream::{update_memory, SceneInteraction, SceneMemory, TrajectoryStream};
use crate::decoder::{loss, Decoder, DecoderOutput, LossBreakdown, PredictionSet};
use crate::encoder::{BaseEncoder, EncoderBlocks, TokenSet};
use crate::enhancer::{load_foreign, ForeignBlock, ForeignWeights};
use crate::error::{Error, Result};
use crate::numerics::{ParamInit, ParamStore, Tape, Var};
use crate::scenario::{reorganize, Scenario, SubScene, SubSceneSequence};

/// RNG stream of each module's initializer, so shared modules start equal
/// whatever else is enabled.
mod stream {
    pub const ENCODER: u64 = 0;
    pub const BLOCKS: u64 = 1;
    pub const INTERACTION: u64 = 2;
    pub const TRAJECTORY: u64 = 3;
    pub const ENHANCER: u64 = 4;
    pub const DECODER: u64 = 5;
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: BaseEncoder,
    pub interaction: Option<SceneInteraction>,
    pub blocks: EncoderBlocks,
    pub enhancer: Option<ForeignBlock>,
    pub trajectory: Option<TrajectoryStream>,
    pub decoder: Decoder,
}

/// Declared parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub trainable: usize,
    pub frozen: usize,
}

/// Intermediates of [`Model::stages`].
#[derive(Debug, Clone)]
pub struct Stages {
    /// Base encoder tokens.
    pub tokens: TokenSet,
    /// After the scene context stream.
    pub fused: Option<TokenSet>,
    /// `F_s`: after the encoder blocks.
    pub blocks: TokenSet,
    /// After the foreign block.
    pub enhanced: Option<TokenSet>,
    pub output: DecoderOutput,
}

/// One sub-scene's decoder output and loss.
#[derive(Debug, Clone)]
pub struct SceneStep {
    pub output: DecoderOutput,
    pub loss: Option<(Var, LossBreakdown)>,
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Model {
    /// Builds the model, reading foreign layers from the configured manifest.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let foreign = match (&cfg.foreign, cfg.flags.enhancer) {
            (Some(f), true) => {
                let (first, _) = f.check()?;
                Some(load_foreign(&f.manifest, first, f.count)?)
            }
            _ => None,
        };
        Model::with_foreign(cfg, foreign)
    }

    pub fn with_foreign(cfg: &ModelConfig, foreign: Option<ForeignWeights>) -> Result<Self> {
        cfg.validate_structure()?;
        let enc = cfg.encoder();
        let mut store = ParamStore::new();
        let module = |stream: u64| init_rng(cfg.seed, stream);

        let mut r = module(stream::ENCODER);
        let encoder = BaseEncoder::new(&mut ParamInit::new(&mut store, &mut r), "encoder", &enc)?;
        let mut r = module(stream::INTERACTION);
        let interaction = cfg
            .flags
            .sc_stream
            .then(|| SceneInteraction::new(&mut ParamInit::new(&mut store, &mut r), "interaction", cfg.dim, cfg.heads))
            .transpose()?;
        let mut r = module(stream::BLOCKS);
        let blocks = EncoderBlocks::new(&mut ParamInit::new(&mut store, &mut r), "encoder.blocks", &enc)?;
        let mut r = module(stream::ENHANCER);
        let enhancer = match (cfg.flags.enhancer, foreign) {
            (true, Some(w)) => {
                let mode = cfg.foreign.as_ref().map(|f| f.adapters).unwrap_or_default();
                Some(ForeignBlock::new(&mut ParamInit::new(&mut store, &mut r), "enhancer", cfg.dim, &w, mode)?)
            }
            (true, None) => return Err(Error::Config("enhancer enabled but no foreign weights supplied".into())),
            (false, _) => None,
        };
        let mut r = module(stream::TRAJECTORY);
        let trajectory = cfg
            .flags
            .at_stream
            .then(|| TrajectoryStream::new(&mut ParamInit::new(&mut store, &mut r), "trajectory", cfg.dim, cfg.heads, cfg.t_f))
            .transpose()?;
        let mut r = module(stream::DECODER);
        let decoder = Decoder::new(&mut ParamInit::new(&mut store, &mut r), "decoder", cfg.dim, cfg.decoder())?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoder,
            interaction,
            blocks,
            enhancer,
            trajectory,
            decoder,
        })
    }

    /// Sum of the module budgets for this configuration.
    pub fn budget(&self) -> Budget {
        let c = &self.cfg;
        let mut trainable =
            BaseEncoder::budget(c.dim) + EncoderBlocks::budget(&c.encoder()) + Decoder::budget(c.dim, &c.decoder());
        let mut frozen = 0;
        if c.flags.sc_stream {
            trainable += SceneInteraction::budget(c.dim);
        }
        if c.flags.at_stream {
            trainable += TrajectoryStream::budget(c.dim, c.t_f);
        }
        if let Some(e) = &self.enhancer {
            trainable += ForeignBlock::adapter_budget(c.dim, e.hidden, e.adapters.len());
            frozen += ForeignBlock::frozen_budget(e.hidden, e.ffn, e.layers.len());
        }
        Budget { trainable, frozen }
    }

    /// The sub-scenes this model runs for `s`: all segments when a memory
    /// stream is on, the full history alone otherwise.
    pub fn sequence(&self, s: &Scenario) -> Result<SubSceneSequence> {
        if s.t_h() != self.cfg.t_h || s.t_f() != self.cfg.t_f {
            return Err(Error::Config(format!(
                "scenario {} has {}/{} history/future frames, model expects {}/{}",
                s.id,
                s.t_h(),
                s.t_f(),
                self.cfg.t_h,
                self.cfg.t_f
            )));
        }
        reorganize(s, &self.cfg.effective_reorg())
    }

    /// Encoder features `F_s` after the blocks, before enhancement.
    pub fn encode<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape,
        scene: &SubScene,
        memory: &SceneMemory,
        rng: Option<&mut R>,
    ) -> Result<TokenSet> {
        let tokens = self.encoder.encode(tape, scene)?;
        let tokens = match &self.interaction {
            Some(si) => si.forward(tape, &tokens, memory)?,
            None => tokens,
        };
        self.blocks.forward(tape, &tokens, rng)
    }

    /// Every intermediate of one sub-scene, in composition order.
    pub fn stages<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape,
        scene: &SubScene,
        memory: &SceneMemory,
        rng: Option<&mut R>,
    ) -> Result<Stages> {
        let tokens = self.encoder.encode(tape, scene)?;
        let fused = match &self.interaction {
            Some(si) => Some(si.forward(tape, &tokens, memory)?),
            None => None,
        };
        let blocks = self.blocks.forward(tape, fused.as_ref().unwrap_or(&tokens), rng)?;
        let enhanced = match &self.enhancer {
            Some(e) => Some(e.enhance(tape, &blocks)?),
            None => None,
        };
        let f_e = enhanced.as_ref().unwrap_or(&blocks);
        let q = self.decoder.mode_queries(tape, f_e, scene.focal_index)?;
        let q = match &self.trajectory {
            Some(ts) => ts.forward(tape, q, memory, &f_e.reference)?,
            None => q,
        };
        let output = self.decoder.heads(tape, q)?;
        Ok(Stages {
            tokens,
            fused,
            blocks,
            enhanced,
            output,
        })
    }

    /// One sub-scene through every stage; returns the output and the memory
    /// for the next sub-scene.
    pub fn forward<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape,
        scene: &SubScene,
        memory: SceneMemory,
        rng: Option<&mut R>,
    ) -> Result<(DecoderOutput, SceneMemory)> {
        let st = self.stages(tape, scene, &memory, rng)?;
        let memory = if self.cfg.flags.uses_memory() {
            update_memory(memory, &st.blocks, Some(&st.output.set))
        } else {
            memory
        };
        Ok((st.output, memory))
    }

    /// Runs a sequence from empty memory; with `with_loss`, each step carries
    /// its loss against the sub-scene target.
    pub fn run_sequence<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape,
        seq: &SubSceneSequence,
        with_loss: bool,
        mut rng: Option<&mut R>,
    ) -> Result<Vec<SceneStep>> {
        let mut memory = SceneMemory::empty();
        let mut steps = Vec::with_capacity(seq.scenes.len());
        for scene in &seq.scenes {
            let (output, next) = self.forward(tape, scene, memory, rng.as_deref_mut())?;
            memory = next;
            let loss = if with_loss {
                let (v, b) = loss(tape, &output, &scene.target, &scene.target_valid)?;
                Some((v.total, b))
            } else {
                None
            };
            steps.push(SceneStep { output, loss });
        }
        Ok(steps)
    }

    /// Mean loss over a sequence's sub-scenes and the averaged breakdown.
    pub fn sequence_loss<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape,
        seq: &SubSceneSequence,
        rng: Option<&mut R>,
    ) -> Result<(Var, LossBreakdown)> {
        let steps = self.run_sequence(tape, seq, true, rng)?;
        let n = steps.len() as f64;
        let mut total: Option<Var> = None;
        let mut b = LossBreakdown {
            total: 0.0,
            regression: 0.0,
            classification: 0.0,
            winner: 0,
        };
        for s in &steps {
            let (v, l) = s.loss.expect("requested");
            total = Some(match total {
                None => v,
                Some(t) => tape.add(t, v)?,
            });
            b.total += l.total / n;
            b.regression += l.regression / n;
            b.classification += l.classification / n;
            b.winner = l.winner;
        }
        let total = tape.scale(total.expect("sequence is never empty"), 1.0 / n);
        Ok((total, b))
    }

    /// Final sub-scene prediction of `s`, in its reference frame.
    pub fn predict(&self, s: &Scenario) -> Result<(SubScene, PredictionSet)> {
        let seq = self.sequence(s)?;
        let mut tape = Tape::new(&self.store);
        let steps = self.run_sequence::<dyn RngCore>(&mut tape, &seq, false, None)?;
        let pred = steps.last().expect("sequence is never empty").output.set.clone();
        Ok((seq.last().clone(), pred))
    }
}
