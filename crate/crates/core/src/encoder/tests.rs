use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::nn::LN_EPS;
use crate::numerics::{grad_check_strided, Array, ParamInit, ParamStore, Tape};
use crate::scenario::{generate_synthetic, reorganize, ReorgConfig, SubScene, SynthConfig};

const NO_RNG: Option<&mut ChaCha8Rng> = None;

fn scene(seed: u64) -> SubScene {
    let s = generate_synthetic(seed, 1, &SynthConfig::default()).remove(0);
    reorganize(&s, &ReorgConfig::default()).unwrap().scenes.remove(1)
}

fn small() -> EncoderConfig {
    EncoderConfig {
        dim: 16,
        heads: 4,
        blocks: 2,
        ff_width: 32,
        dropout: 0.0,
    }
}

fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, BaseEncoder, EncoderBlocks) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit::new(&mut store, &mut rng);
    let base = BaseEncoder::new(&mut init, "encoder", cfg).unwrap();
    let blocks = EncoderBlocks::new(&mut init, "encoder.blocks", cfg).unwrap();
    (store, base, blocks)
}

fn map_one(points: &[[f64; 6]], valid: &[bool]) -> MapTensor {
    MapTensor {
        polylines: 1,
        points: points.len(),
        data: points.iter().flatten().copied().collect(),
        valid: valid.to_vec(),
        anchors: vec![Some([0.0, 0.0])],
    }
}

#[test]
fn map_token_of_a_single_point_is_its_perceptron_output() {
    let (store, base, _) = build(&small(), 1);
    let mut t = Tape::new(&store);
    let pt = [0.3, -0.2, 1.0, 0.0, 0.0, 1.0];
    let m = map_one(&[pt, [5.0; 6], [7.0; 6]], &[true, false, false]);
    let enc = base.encode_map(&mut t, &m).unwrap();
    let x = t.constant(1, 6, pt.to_vec()).unwrap();
    let y = base.map.mlp.forward(&mut t, x).unwrap();
    assert_eq!(t.value(enc.compact), t.value(y));
}

#[test]
fn map_token_ignores_point_order_and_duplicates() {
    let (store, base, _) = build(&small(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<[f64; 6]> = (0..5)
        .map(|_| {
            let mut p = [0.0; 6];
            p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            p
        })
        .collect();
    let mut t = Tape::new(&store);
    let a = base.encode_map(&mut t, &map_one(&pts, &[true; 5])).unwrap();
    let mut perm = pts.clone();
    perm.reverse();
    perm.swap(0, 2);
    let b = base.encode_map(&mut t, &map_one(&perm, &[true; 5])).unwrap();
    let mut dup = pts.clone();
    dup.push(pts[3]);
    let c = base.encode_map(&mut t, &map_one(&dup, &[true; 6])).unwrap();
    assert_eq!(t.value(a.compact), t.value(b.compact));
    assert_eq!(t.value(a.compact), t.value(c.compact));

    let none = base.encode_map(&mut t, &map_one(&pts, &[false; 5])).unwrap();
    assert_eq!(none.valid, vec![false]);
    assert_eq!(none.compact.rows(), 0);
}

#[test]
fn agent_token_of_a_single_frame_is_its_attention_output() {
    let cfg = small();
    let (store, base, _) = build(&cfg, 4);
    let frame = [0.0, 0.0, 0.1, 0.8, 0.05, 1.0];
    let mut data = vec![9.0; 3 * 6];
    data[12..].copy_from_slice(&frame);
    let a = AgentTensor {
        agents: 1,
        frames: 3,
        data,
        valid: vec![false, false, true],
        anchors: vec![Some([0.0, 0.0])],
    };
    let mut t = Tape::new(&store);
    let tok = base.encode_agents(&mut t, &a).unwrap();
    let got = t.value(tok.compact).to_vec();

    // Oracle: E = x·We + be, V = E·Wv + bv, h = E + V·Wo + bo, LN(h).
    let p = |id| store.get(id).array.clone();
    let mm = |x: &[f64], w: &Array, b: &Array| -> Vec<f64> {
        let (k, n) = (w.rows(), w.cols());
        (0..n).map(|j| b.data()[j] + (0..k).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
    };
    let ag = &base.agent;
    let e = mm(&frame, &p(ag.embed.w), &p(ag.embed.b.unwrap()));
    let v = mm(&e, &p(ag.attn.v.w), &p(ag.attn.v.b.unwrap()));
    let o = mm(&v, &p(ag.attn.out.w), &p(ag.attn.out.b.unwrap()));
    let h: Vec<f64> = e.iter().zip(&o).map(|(a, b)| a + b).collect();
    let mu = h.iter().sum::<f64>() / h.len() as f64;
    let var = h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / h.len() as f64;
    let want: Vec<f64> = h.iter().map(|x| (x - mu) / (var + LN_EPS).sqrt()).collect();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn agent_tokens_ignore_invalid_frames_and_repeat_for_equal_histories() {
    let (store, base, _) = build(&small(), 5);
    let sc = scene(7);
    let a = AgentTensor::from_scene(&sc);
    let mut noisy = a.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, v) in noisy.valid.iter().enumerate() {
        if !v {
            for c in 0..C_A {
                noisy.data[i * C_A + c] += rng.random_range(-1e3..1e3);
            }
        }
    }
    let mut t = Tape::new(&store);
    let x = base.encode_agents(&mut t, &a).unwrap();
    let y = base.encode_agents(&mut t, &noisy).unwrap();
    assert_eq!(t.value(x.compact), t.value(y.compact));

    let mut twin = a.clone();
    let t_len = a.frames * C_A;
    twin.data.extend_from_slice(&a.data[..t_len]);
    twin.valid.extend_from_slice(&a.valid[..a.frames]);
    twin.anchors.push(a.anchors[0]);
    twin.agents += 1;
    let z = base.encode_agents(&mut t, &twin).unwrap();
    let zv = t.value(z.compact);
    let d = small().dim;
    let last = z.compact.rows() - 1;
    assert_eq!(&zv[..d], &zv[last * d..]);
}

#[test]
fn assembly_adds_identical_encodings_for_equal_anchors_and_kinds() {
    let cfg = small();
    let (store, base, _) = build(&cfg, 6);
    let mut t = Tape::new(&store);
    let agents = Encoded {
        compact: t.zeros(3, cfg.dim),
        valid: vec![true, false, true, true],
    };
    let maps = Encoded {
        compact: t.zeros(0, cfg.dim),
        valid: vec![false, false],
    };
    let ts = base
        .assemble(&mut t, &agents, &[Some([0.0, 0.0]); 4], &maps, &[None, None], crate::scenario::Pose2D::identity())
        .unwrap();
    assert_eq!(ts.len(), 6);
    assert_eq!(ts.valid, vec![true, false, true, true, false, false]);
    let v = t.value(ts.compact);
    assert_eq!(&v[..cfg.dim], &v[cfg.dim..2 * cfg.dim]);
    assert_eq!(&v[..cfg.dim], &v[2 * cfg.dim..]);
    let dense = ts.dense(&mut t).unwrap();
    assert!(t.value(dense)[cfg.dim..2 * cfg.dim].iter().all(|&x| x == 0.0));
}

#[test]
fn blocks_output_shape_and_mask_invariance() {
    let cfg = EncoderConfig::default();
    let (store, base, blocks) = build(&cfg, 8);
    let sc = scene(9);
    let mut t = Tape::new(&store);
    let tokens = base.encode(&mut t, &sc).unwrap();
    let out = blocks.forward(&mut t, &tokens, NO_RNG).unwrap();
    let dense = out.dense(&mut t).unwrap();
    assert_eq!(dense.shape(), [sc.agents.len() + sc.polylines.len(), 128]);

    // Dense input with loud invalid rows, plus one extra invalid token.
    let d = tokens.dense(&mut t).unwrap();
    let mut data = t.value(d).to_vec();
    let mut valid = tokens.valid.clone();
    valid[0] = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = valid.len();
    for r in 0..n {
        if !tokens.valid[r] || r == n - 1 {
            for c in 0..128 {
                data[r * 128 + c] = rng.random_range(-1e3..1e3);
            }
        }
    }
    valid[n - 1] = false;
    let mut base_valid = tokens.valid.clone();
    base_valid[n - 1] = false;
    let clean = {
        let x = t.constant(n, 128, t.value(d).to_vec()).unwrap();
        let ts = TokenSet::from_dense(&mut t, x, base_valid.clone(), tokens.kinds.clone(), tokens.anchors.clone(), tokens.reference).unwrap();
        blocks.forward(&mut t, &ts, NO_RNG).unwrap()
    };
    let noisy = {
        let x = t.constant(n, 128, data).unwrap();
        let ts = TokenSet::from_dense(&mut t, x, base_valid, tokens.kinds.clone(), tokens.anchors.clone(), tokens.reference).unwrap();
        blocks.forward(&mut t, &ts, NO_RNG).unwrap()
    };
    assert_eq!(t.value(clean.compact), t.value(noisy.compact));
    let _ = valid;

    let again = blocks.forward(&mut t, &tokens, NO_RNG).unwrap();
    assert_eq!(t.value(out.compact), t.value(again.compact));
}

#[test]
fn blocks_reject_empty_scenes() {
    let (store, _, blocks) = build(&small(), 1);
    let mut t = Tape::new(&store);
    let x = t.zeros(0, 16);
    let ts = TokenSet::new(x, vec![false; 3], vec![TokenKind::Agent; 3], vec![[0.0; 2]; 3], crate::scenario::Pose2D::identity()).unwrap();
    assert!(matches!(blocks.forward(&mut t, &ts, NO_RNG), Err(crate::Error::Mask(_))));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = small();
    let (mut store, base, blocks) = build(&cfg, 10);
    let mut sc = scene(11);
    sc.agents.truncate(4);
    sc.focal_index = sc.focal_index.min(3);
    sc.polylines.truncate(6);
    let ids = store.trainable_ids();
    let mut wrng = ChaCha8Rng::seed_from_u64(12);
    let w: Vec<f64> = (0..10 * cfg.dim).map(|_| wrng.random_range(-1.0..1.0)).collect();
    let report = grad_check_strided(&mut store, &ids, 1e-6, 1, |t| {
        let tokens = base.encode(t, &sc)?;
        let out = blocks.forward(t, &tokens, NO_RNG)?;
        let d = out.dense(t)?;
        let wv = t.constant(d.rows(), d.cols(), w[..d.len()].to_vec())?;
        let p = t.mul(d, wv)?;
        Ok(t.sum(p))
    })
    .unwrap();
    println!("encoder grad check: {report:?}");
    assert!(report.passes(1e-4), "{report:?}");
}
