use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::TokenKind;
use crate::numerics::nn::LN_EPS;
use crate::numerics::{grad_check, Tape};
use crate::scenario::io::write_json;
use crate::scenario::Pose2D;

fn weights(dir: &Path, layers: usize, hidden: usize, heads: usize) -> std::path::PathBuf {
    let prefix = dir.join("w");
    make_synthetic_weights(9, layers, hidden, heads, &prefix).unwrap();
    manifest_path(&prefix)
}

fn block(manifest: &Path, dim: usize, first: usize, count: usize, mode: AdapterMode, seed: u64) -> (ParamStore, ForeignBlock) {
    let fw = load_foreign(manifest, first, count).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit::new(&mut store, &mut rng);
    let b = ForeignBlock::new(&mut init, "enhancer", dim, &fw, mode).unwrap();
    (store, b)
}

fn randomize_after(store: &mut ParamStore, b: &ForeignBlock, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in &b.adapters {
        for v in store.get_mut(a.after).array.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tokens(t: &mut Tape, rows: &[Vec<f64>], valid: &[bool]) -> TokenSet {
    let d = rows[0].len();
    let data: Vec<f64> = rows.iter().zip(valid).filter(|(_, &v)| v).flat_map(|(r, _)| r.clone()).collect();
    let n_valid = valid.iter().filter(|&&v| v).count();
    let c = t.constant(n_valid, d, data).unwrap();
    let n = valid.len();
    let kinds = (0..n).map(|i| if i < n / 2 { TokenKind::Agent } else { TokenKind::Map }).collect();
    TokenSet::new(c, valid.to_vec(), kinds, vec![[0.0; 2]; n], Pose2D::identity()).unwrap()
}

#[test]
fn blob_round_trips_and_synthesis_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let vals = [0.0f32, -1.5, 3.25e-7, f32::MAX, 1.0];
    assert_eq!(decode_f32(&encode_f32(&vals)), vals);

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    make_synthetic_weights(4, 3, 16, 4, &a).unwrap();
    make_synthetic_weights(4, 3, 16, 4, &b).unwrap();
    assert_eq!(fs::read(blob_path(&a)).unwrap(), fs::read(blob_path(&b)).unwrap());
    let fw = load_foreign(&manifest_path(&a), 0, 3).unwrap();
    assert_eq!(fw.layers.len(), 3);
    assert_eq!(fw.ffn, 32);
    assert_ne!(fw.layers[0].wq, fw.layers[1].wq);
    // Orthogonal rows.
    let w = &fw.layers[2].wv;
    for i in 0..16 {
        for j in 0..16 {
            let d: f64 = (0..16).map(|k| w.get(i, k) * w.get(j, k)).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-5);
        }
    }
}

#[test]
fn geometry_of_a_large_manifest() {
    let m = WeightManifest::synthetic_layout("x", "x.bin", 26, 1536, 12);
    m.validate(Some(m.blob_len())).unwrap();
    assert_eq!(m.tensors.len(), 26 * 9);
    assert_eq!(m.ffn_width().unwrap(), 3072);
    let per_layer = 2 * 1536 + 4 * 1536 * 1536 + 3 * 1536 * 3072;
    assert_eq!(m.blob_len(), 4 * 26 * per_layer as u64);
    assert_eq!(ForeignBlock::frozen_budget(1536, 3072, 1), per_layer);
}

#[test]
fn out_of_range_and_corrupt_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mp = weights(dir.path(), 26, 16, 4);
    assert!(matches!(load_foreign(&mp, 26, 1), Err(Error::Range(_))));
    assert!(matches!(load_foreign(&mp, 20, 7), Err(Error::Range(_))));
    assert!(load_foreign(&mp, 25, 1).is_ok());

    let mut m = read_manifest(&mp).unwrap();
    m.tensors.retain(|e| e.name != "layers.3.ffn.w_up");
    write_json(&m, &mp).unwrap();
    match load_foreign(&mp, 0, 4) {
        Err(Error::Load(msg)) => assert!(msg.contains("layers.3.ffn.w_up"), "{msg}"),
        other => panic!("{other:?}"),
    }

    let mp = weights(dir.path(), 2, 16, 4);
    let mut m = read_manifest(&mp).unwrap();
    m.tensors[4].shape = vec![16, 8];
    write_json(&m, &mp).unwrap();
    match load_foreign(&mp, 0, 1) {
        Err(Error::Load(msg)) => assert!(msg.contains("layers.0.attn.wo"), "{msg}"),
        other => panic!("{other:?}"),
    }

    let mp = weights(dir.path(), 2, 16, 4);
    let blob = blob_path(&dir.path().join("w"));
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_foreign(&mp, 0, 1), Err(Error::Load(_))));

    fs::write(&mp, b"{ not json").unwrap();
    assert!(matches!(load_foreign(&mp, 0, 1), Err(Error::Load(_))));
}

#[test]
fn narrow_foreign_width_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mp = weights(dir.path(), 1, 8, 2);
    let fw = load_foreign(&mp, 0, 1).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = ParamInit::new(&mut store, &mut rng);
    assert!(matches!(
        ForeignBlock::new(&mut init, "e", 16, &fw, AdapterMode::Shared),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_output_projection_yields_the_norm_bias() {
    let dir = tempfile::tempdir().unwrap();
    let mp = weights(dir.path(), 2, 16, 4);
    let (mut store, b) = block(&mp, 8, 0, 2, AdapterMode::Shared, 1);
    let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    store.get_mut(b.adapters[0].norm.bias).array.data_mut().copy_from_slice(&bias);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = rows(&mut rng, 5, 8);
    let mut t = Tape::new(&store);
    let ts = tokens(&mut t, &r, &[true, true, false, true, true]);
    let out = b.enhance(&mut t, &ts).unwrap();
    for row in t.value(out.compact).chunks(8) {
        assert_eq!(row, &bias[..]);
    }
}

#[test]
fn block_matches_an_independent_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mp = weights(dir.path(), 1, 8, 2);
    let (mut store, b) = block(&mp, 4, 0, 1, AdapterMode::Shared, 3);
    randomize_after(&mut store, &b, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = rows(&mut rng, 3, 4);
    let mut t = Tape::new(&store);
    let ts = tokens(&mut t, &r, &[true; 3]);
    let out = b.enhance(&mut t, &ts).unwrap();
    let got = t.value(out.compact).to_vec();

    let p = |id: ParamId| store.get(id).array.clone();
    let mm = |x: &[Vec<f64>], w: &crate::numerics::Array| -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| (0..w.cols()).map(|j| (0..w.rows()).map(|i| r[i] * w.get(i, j)).sum()).collect())
            .collect()
    };
    let rms = |x: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let s = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64 + RMS_EPS).sqrt();
                r.iter().map(|v| v / s).collect()
            })
            .collect()
    };
    let add = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    };
    let l = &b.layers[0];
    let h0 = mm(&r, &p(b.adapters[0].before));
    let n = rms(&h0);
    let (q, k, v) = (mm(&n, &p(l.wq)), mm(&n, &p(l.wk)), mm(&n, &p(l.wv)));
    let hd = 4;
    let mut att = vec![vec![0.0; 8]; 3];
    for h in 0..2 {
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                att[i][h * hd + c] = (0..3).map(|j| e[j] / z * v[j][h * hd + c]).sum();
            }
        }
    }
    let h1 = add(&h0, &mm(&att, &p(l.wo)));
    let n2 = rms(&h1);
    let g = mm(&n2, &p(l.w_gate));
    let u = mm(&n2, &p(l.w_up));
    let f: Vec<Vec<f64>> = g
        .iter()
        .zip(&u)
        .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
        .collect();
    let h2 = add(&h1, &mm(&f, &p(l.w_down)));
    let y = mm(&h2, &p(b.adapters[0].after));
    for (i, row) in y.iter().enumerate() {
        let mu = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 4.0;
        for (c, x) in row.iter().enumerate() {
            let want = (x - mu) / (var + LN_EPS).sqrt();
            assert!((got[i * 4 + c] - want).abs() < 1e-10, "{} vs {want}", got[i * 4 + c]);
        }
    }
}

#[test]
fn enhancement_is_permutation_equivariant_and_mask_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let mp = weights(dir.path(), 2, 16, 4);
    let (mut store, b) = block(&mp, 8, 0, 2, AdapterMode::PerLayer, 6);
    randomize_after(&mut store, &b, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = rows(&mut rng, 7, 8);
    let mut t = Tape::new(&store);
    let ts = tokens(&mut t, &r, &[true; 7]);
    let y = b.enhance(&mut t, &ts).unwrap().compact;
    let base = t.value(y).to_vec();
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let pr: Vec<Vec<f64>> = perm.iter().map(|&i| r[i].clone()).collect();
        let mut t = Tape::new(&store);
        let ts = tokens(&mut t, &pr, &[true; 7]);
        let y = b.enhance(&mut t, &ts).unwrap().compact;
        let out = t.value(y).to_vec();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(out[j * 8..(j + 1) * 8], base[i * 8..(i + 1) * 8]);
        }
    }

    let valid = [true, false, true, true, false, true, true];
    let mut noisy = r.clone();
    noisy[1].iter_mut().for_each(|x| *x = 1e6);
    noisy[4].iter_mut().for_each(|x| *x = -7e3);
    let mut t = Tape::new(&store);
    let a = tokens(&mut t, &r, &valid);
    let c = tokens(&mut t, &noisy, &valid);
    let ya = b.enhance(&mut t, &a).unwrap();
    let yc = b.enhance(&mut t, &c).unwrap();
    assert_eq!(ya.valid, valid);
    assert_eq!(t.value(ya.compact), t.value(yc.compact));

    let none = tokens(&mut t, &r, &[false; 7]);
    assert!(matches!(b.enhance(&mut t, &none), Err(Error::Mask(_))));
}

#[test]
fn gradients_match_finite_differences_and_skip_frozen_layers() {
    let dir = tempfile::tempdir().unwrap();
    let mp = weights(dir.path(), 2, 8, 2);
    let (mut store, b) = block(&mp, 4, 0, 2, AdapterMode::Shared, 10);
    randomize_after(&mut store, &b, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let r = rows(&mut rng, 4, 4);
    let w: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..1.5)).collect();
    let f = |t: &mut Tape| {
        let ts = tokens(t, &r, &[true; 4]);
        let out = b.enhance(t, &ts)?;
        let wv = t.constant(4, 4, w.clone())?;
        let p = t.mul(out.compact, wv)?;
        Ok(t.sum(p))
    };
    {
        let mut t = Tape::new(&store);
        let loss = f(&mut t).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(b.frozen_ids().iter().all(|&id| g.get(id).is_none()));
    }
    let ids = b.adapter_ids();
    let rep = grad_check(&mut store, &ids, 1e-6, f).unwrap();
    println!("enhancer grad check: {rep:?}");
    assert!(rep.passes(1e-6), "{rep:?}");
}

#[test]
fn freeze_report_flags_changes() {
    let dir = tempfile::tempdir().unwrap();
    let mp = weights(dir.path(), 2, 8, 2);
    let (before, b) = block(&mp, 4, 0, 2, AdapterMode::PerLayer, 13);
    assert_eq!(b.adapters.len(), 2);
    assert_eq!(
        before.scalar_count(true),
        ForeignBlock::adapter_budget(4, 8, 2)
    );
    assert_eq!(before.scalar_count(false) - before.scalar_count(true), ForeignBlock::frozen_budget(8, 16, 2));

    let mut after = before.clone();
    let rep = verify_frozen(&b, &before, &after);
    assert!(rep.frozen_ok() && !rep.passed());
    assert!(rep.diagnostic().starts_with("frozen ok, adapters stale"), "{}", rep.diagnostic());
    for a in &b.adapters {
        after.get_mut(a.before).array.data_mut()[0] += 1e-3;
        after.get_mut(a.after).array.data_mut()[0] += 1e-3;
    }
    assert!(verify_frozen(&b, &before, &after).passed());
    after.get_mut(b.layers[1].w_up).array.data_mut()[3] += 1e-12;
    let rep = verify_frozen(&b, &before, &after);
    assert!(!rep.passed());
    assert_eq!(rep.changed_frozen, vec!["enhancer.frozen.1.ffn.w_up".to_string()]);
}
