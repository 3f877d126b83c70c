use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn set(modes: Vec<Vec<[f64; 2]>>, logits: Vec<f64>) -> PredictionSet {
    let h = modes[0].len();
    PredictionSet::new(modes.len(), h, modes.concat(), logits).unwrap()
}

fn line(n: usize, dx: f64, dy: f64) -> Vec<[f64; 2]> {
    (0..n).map(|t| [t as f64 + dx, dy]).collect()
}

/// A random case; logits are quantized so probability ties occur.
fn random_case(rng: &mut ChaCha8Rng, id: usize) -> EvalCase {
    let k = rng.random_range(1..=6);
    let h = rng.random_range(1..=12);
    let spread = [0.1, 1.0, 5.0][rng.random_range(0..3)];
    let target: Vec<[f64; 2]> = (0..h)
        .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)])
        .collect();
    let traj: Vec<[f64; 2]> = (0..k * h)
        .map(|i| {
            let t = target[i % h];
            [t[0] + rng.random_range(-spread..spread), t[1] + rng.random_range(-spread..spread)]
        })
        .collect();
    let logits = (0..k).map(|_| rng.random_range(0..4) as f64 * 0.5).collect();
    let mut valid: Vec<bool> = (0..h).map(|_| rng.random_bool(0.7)).collect();
    let j = rng.random_range(0..h);
    valid[j] = true;
    EvalCase {
        scenario_id: format!("c{id:04}"),
        pred: PredictionSet::new(k, h, traj, logits).unwrap(),
        target,
        valid,
    }
}

// Brute-force oracle: straight loops, subset enumeration for top-k.

fn oracle_top_k(p: &[f64], k: usize) -> Vec<usize> {
    let n = p.len();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let mut ok = true;
        for i in 0..n {
            for j in 0..n {
                let (ins, outs) = (mask >> i & 1 == 1, mask >> j & 1 == 1);
                if ins && !outs && !(p[i] > p[j] || (p[i] == p[j] && i < j)) {
                    ok = false;
                }
            }
        }
        if ok {
            return (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        }
    }
    unreachable!()
}

fn oracle_errors(c: &EvalCase, m: usize) -> (f64, f64) {
    let h = c.pred.horizon;
    let mut sum = 0.0;
    let mut count = 0.0;
    let mut last = 0.0;
    for t in 0..h {
        if c.valid[t] {
            let p = c.pred.trajectories[m * h + t];
            let dx = p[0] - c.target[t][0];
            let dy = p[1] - c.target[t][1];
            let d = (dx * dx + dy * dy).sqrt();
            sum += d;
            count += 1.0;
            last = d;
        }
    }
    (sum / count, last)
}

fn oracle_min(c: &EvalCase, k: usize) -> (f64, f64) {
    let modes = oracle_top_k(&c.pred.probabilities, k);
    let mut a = f64::INFINITY;
    let mut f = f64::INFINITY;
    for m in modes {
        let (x, y) = oracle_errors(c, m);
        a = a.min(x);
        f = f.min(y);
    }
    (a, f)
}

fn oracle_brier(c: &EvalCase) -> f64 {
    let mut best = 0;
    let mut bf = f64::INFINITY;
    for m in 0..c.pred.modes {
        let f = oracle_errors(c, m).1;
        if f < bf {
            bf = f;
            best = m;
        }
    }
    bf + (1.0 - c.pred.probabilities[best]) * (1.0 - c.pred.probabilities[best])
}

#[test]
fn closed_form_examples() {
    let target = line(5, 0.0, 0.0);
    let valid = vec![true; 5];
    let p = set(vec![line(5, 1.0, 0.0)], vec![0.0]);
    assert!((min_ade_k(&p, &target, &valid, 1).unwrap() - 1.0).abs() < 1e-15);

    let mut end = line(5, 0.0, 0.0);
    end[4] = [4.0 + 3.0, 4.0];
    let p = set(vec![end, line(5, 0.0, 0.0)], vec![1.0, 0.0]);
    assert!((min_fde_k(&p, &target, &valid, 1).unwrap() - 5.0).abs() < 1e-12);
    assert_eq!(min_fde_k(&p, &target, &valid, 2).unwrap(), 0.0);
    assert_eq!(min_ade_k(&p, &target, &valid, 2).unwrap(), 0.0);

    let mut modes = vec![line(5, 0.0, 1.0)];
    modes.extend((0..5).map(|i| line(5, 0.0, 3.0 + i as f64)));
    let p = set(modes, vec![0.0; 6]);
    let b = brier_min_fde(&p, &target, &valid).unwrap();
    assert!((b - (1.0 + 25.0 / 36.0)).abs() < 1e-12);
    assert!((b - 1.6944).abs() < 1e-4);

    let p = set(vec![line(5, 0.0, 2.0), line(5, 0.0, 7.0)], vec![200.0, 0.0]);
    assert_eq!(p.probabilities[0], 1.0);
    assert_eq!(brier_min_fde(&p, &target, &valid).unwrap(), min_fde_k(&p, &target, &valid, 2).unwrap());
}

#[test]
fn top_k_breaks_ties_by_lower_index() {
    let p = set(vec![line(1, 0.0, 0.0); 4], vec![0.0, 1.0, 0.0, 1.0]);
    assert_eq!(top_k(&p, 2).unwrap(), vec![1, 3]);
    assert_eq!(top_k(&p, 3).unwrap(), vec![1, 3, 0]);
    assert!(matches!(top_k(&p, 0), Err(Error::Input(_))));
    assert!(matches!(top_k(&p, 5), Err(Error::Input(_))));
}

#[test]
fn target_errors() {
    let p = set(vec![line(3, 0.0, 0.0)], vec![0.0]);
    let t = line(3, 0.0, 0.0);
    assert!(matches!(min_ade_k(&p, &t, &[false; 3], 1), Err(Error::Target(_))));
    assert!(matches!(min_fde_k(&p, &t[..2], &[true; 2], 1), Err(Error::Dimension { .. })));
    assert!(matches!(miss_rate_k(&[], 6, MISS_THRESHOLD), Err(Error::Input(_))));
}

#[test]
fn only_valid_frames_count() {
    let target = line(4, 0.0, 0.0);
    let mut m = line(4, 0.0, 0.0);
    m[1] = [100.0, 100.0];
    m[3] = [50.0, 0.0];
    let p = set(vec![m], vec![0.0]);
    let valid = [true, false, true, false];
    assert_eq!(min_ade_k(&p, &target, &valid, 1).unwrap(), 0.0);
    assert_eq!(min_fde_k(&p, &target, &valid, 1).unwrap(), 0.0);
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let c = random_case(&mut rng, i);
        let k_max = c.pred.modes;
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 1..=k_max {
            let a = min_ade_k(&c.pred, &c.target, &c.valid, k).unwrap();
            let f = min_fde_k(&c.pred, &c.target, &c.valid, k).unwrap();
            let (oa, of) = oracle_min(&c, k);
            assert!((a - oa).abs() < 1e-9 && (f - of).abs() < 1e-9, "case {i} k {k}");
            assert!(a <= prev.0 && f <= prev.1, "monotonicity, case {i} k {k}");
            prev = (a, f);
        }
        let b = brier_min_fde(&c.pred, &c.target, &c.valid).unwrap();
        assert!((b - oracle_brier(&c)).abs() < 1e-9);
        assert!(b >= min_fde_k(&c.pred, &c.target, &c.valid, k_max).unwrap());
    }
}

#[test]
fn miss_rate_matches_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..100 {
        let n = rng.random_range(1..20);
        let cases: Vec<EvalCase> = (0..n).map(|i| random_case(&mut rng, i)).collect();
        let k = cases.iter().map(|c| c.pred.modes).min().unwrap();
        let got = miss_rate_k(&cases, k, MISS_THRESHOLD).unwrap();
        let mut misses = 0;
        for c in &cases {
            if oracle_min(c, k).1 > 2.0 {
                misses += 1;
            }
        }
        assert!((got - misses as f64 / n as f64).abs() < 1e-12, "trial {trial}");
        assert!((0.0..=1.0).contains(&got));
    }
    let target = line(3, 0.0, 0.0);
    let perfect = EvalCase {
        scenario_id: "a".into(),
        pred: set(vec![target.clone()], vec![0.0]),
        target: target.clone(),
        valid: vec![true; 3],
    };
    let off = EvalCase {
        pred: set(vec![line(3, 10.0, 0.0)], vec![0.0]),
        ..perfect.clone()
    };
    assert_eq!(miss_rate_k(&[perfect.clone(), perfect], 1, MISS_THRESHOLD).unwrap(), 0.0);
    assert_eq!(miss_rate_k(&[off.clone(), off], 1, MISS_THRESHOLD).unwrap(), 1.0);
}

#[test]
fn metrics_are_rigid_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..200 {
        let c = random_case(&mut rng, i);
        let th: f64 = rng.random_range(-3.0..3.0);
        let (s, co) = th.sin_cos();
        let (tx, ty) = (rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
        let f = |p: [f64; 2]| [co * p[0] - s * p[1] + tx, s * p[0] + co * p[1] + ty];
        let moved = EvalCase {
            pred: c.pred.map_points(f),
            target: c.target.iter().map(|&p| f(p)).collect(),
            ..c.clone()
        };
        let a = MetricsReport::of_case(&c).unwrap();
        let b = MetricsReport::of_case(&moved).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn report_invariants_and_aggregation_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut cases: Vec<EvalCase> = Vec::new();
    while cases.len() < 50 {
        let c = random_case(&mut rng, cases.len());
        if c.pred.modes == 6 {
            cases.push(c);
        }
    }
    let r = MetricsReport::from_cases(&cases).unwrap();
    assert!(r.min_ade6 <= r.min_ade1 && r.min_fde6 <= r.min_fde1);
    assert!(r.brier_min_fde6 >= r.min_fde6);
    assert!((0.0..=1.0).contains(&r.miss_rate6));
    assert_eq!(r.miss_rate6, miss_rate_k(&cases, 6, MISS_THRESHOLD).unwrap());
    cases.reverse();
    assert_eq!(MetricsReport::from_cases(&cases).unwrap(), r);
}

#[test]
fn table_arithmetic() {
    assert!((relative_improvement(1.646, 1.620).unwrap() - 1.58).abs() < 0.01);
    assert!((relative_improvement(4.100, 4.047).unwrap() - 1.29).abs() < 0.01);
    assert_eq!(relative_improvement(2.0, 2.0).unwrap(), 0.0);
    assert!(matches!(relative_improvement(0.0, 1.0), Err(Error::Input(_))));
}

fn sample_table(kind: TableKind) -> ReportTable {
    let m = MetricsReport {
        min_ade1: 1.0 / 3.0,
        min_fde1: 4.047,
        min_ade6: 0.672,
        min_fde6: 1.314,
        brier_min_fde6: 1.958,
        miss_rate6: 0.125,
        scenarios: 128,
    };
    let mut t = ReportTable::new(kind);
    for (i, f) in [[false, false, false], [true, false, true]].into_iter().enumerate() {
        t.rows.push(ReportRow {
            label: format!("{}", i + 1),
            flags: (kind == TableKind::StreamFlags).then_some(f),
            layers: None,
            metrics: m,
        });
    }
    t
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [TableKind::Models, TableKind::LayerCount, TableKind::InsertionPosition, TableKind::StreamFlags] {
        let t = sample_table(kind);
        for ext in ["json", "csv"] {
            let p = dir.path().join(format!("r{}.{ext}", kind.number()));
            write_report(&t, &p).unwrap();
            assert_eq!(read_report(&p).unwrap(), t);
        }
    }
    assert!(matches!(write_report(&sample_table(TableKind::Models), &dir.path().join("r.txt")), Err(Error::Config(_))));
}

#[test]
fn table_layouts() {
    let csv = sample_table(TableKind::StreamFlags).to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "ID,SC Strm,AT Strm,Enhancer,minADE1,minFDE1,minADE6,minFDE6,b-minFDE6,MR6,scenarios"
    );
    assert!(lines.nth(1).unwrap().starts_with("2,x,,x,"));
    let text = sample_table(TableKind::Models).render().unwrap();
    let head: Vec<&str> = text.lines().nth(1).unwrap().split('|').map(str::trim).collect();
    assert_eq!(head, ["Model", "minADE1", "minFDE1", "minADE6", "minFDE6", "b-minFDE6", "MR6"]);
    assert!(text.contains("0.333"));
    assert!(matches!(TableKind::from_number(2), Err(Error::Config(_))));
}

#[test]
fn layer_span_labels() {
    let s = |first, count| LayerSpan { first, count, total: 26 };
    assert_eq!(s(25, 1).count_label(), "Last layer (layer 25)");
    assert_eq!(s(23, 3).count_label(), "Last three layers (layers 23-25)");
    assert_eq!(s(20, 6).count_label(), "Last six layers (layers 20-25)");
    assert_eq!(s(0, 1).position_label(), "Layer 0");
    assert_eq!(s(8, 1).position_label(), "Layer 8");
    assert_eq!(s(25, 1).position_label(), "Layer 25 (last)");
    assert_eq!(stream_row_id([true, false, true]), Some(5));
    assert_eq!(stream_row_id([false, true, false]), None);
}
