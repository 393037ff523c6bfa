use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use samslr_core::ensemble::{
    fuse, fuse_streams, fuse_tables, predict, tune_weights, EnsembleWeights, ScoreTable, ScoreVector, RGB_MODALITIES,
    RGB_WEIGHTS,
};

fn vectors(id: &str, modalities: &[&str], rows: &[Vec<f64>]) -> Vec<ScoreVector> {
    modalities
        .iter()
        .zip(rows)
        .map(|(m, r)| ScoreVector::new(id, *m, r.clone()).unwrap())
        .collect()
}

fn weights(modalities: &[&str], w: &[f64]) -> EnsembleWeights {
    EnsembleWeights::new(modalities.iter().copied().zip(w.iter().copied())).unwrap()
}

fn score_rows(m: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, k), m)
}

#[test]
fn rgb_track_fusion_matches_hand_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in 0..50 {
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let fused = fuse(&vectors(&format!("s{s}"), &RGB_MODALITIES, &rows), &EnsembleWeights::rgb_track()).unwrap();
        for c in 0..6 {
            let mut want = 0.0;
            want += 1.0 * rows[0][c];
            want += 0.9 * rows[1][c];
            want += 0.4 * rows[2][c];
            want += 0.4 * rows[3][c];
            assert_eq!(fused.values[c].to_bits(), want.to_bits());
        }
    }
    assert_eq!(RGB_WEIGHTS, [1.0, 0.9, 0.4, 0.4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fusion_is_linear_in_scores_and_weights(
        a in score_rows(3, 5),
        b in score_rows(3, 5),
        w in proptest::collection::vec(0.1f64..2.0, 3),
        v in proptest::collection::vec(0.1f64..2.0, 3),
        alpha in 0.1f64..3.0,
    ) {
        let mods = ["m0", "m1", "m2"];
        let summed: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| alpha * p + q).collect()).collect();
        let lhs = fuse(&vectors("s", &mods, &summed), &weights(&mods, &w)).unwrap();
        let fa = fuse(&vectors("s", &mods, &a), &weights(&mods, &w)).unwrap();
        let fb = fuse(&vectors("s", &mods, &b), &weights(&mods, &w)).unwrap();
        for c in 0..5 {
            prop_assert!((lhs.values[c] - (alpha * fa.values[c] + fb.values[c])).abs() <= 1e-9);
        }
        let wv: Vec<f64> = w.iter().zip(&v).map(|(x, y)| x + y).collect();
        let lhs = fuse(&vectors("s", &mods, &a), &weights(&mods, &wv)).unwrap();
        let fv = fuse(&vectors("s", &mods, &a), &weights(&mods, &v)).unwrap();
        for c in 0..5 {
            prop_assert!((lhs.values[c] - (fa.values[c] + fv.values[c])).abs() <= 1e-9);
        }
    }

    #[test]
    fn prediction_ignores_uniform_weight_scaling(rows in score_rows(4, 10), factor in prop_oneof![Just(7.3), 0.01f64..100.0]) {
        let base = EnsembleWeights::rgb_track();
        let scaled = base.scaled(factor).unwrap();
        let s = vectors("s", &RGB_MODALITIES, &rows);
        prop_assert_eq!(predict(&fuse(&s, &base).unwrap().values), predict(&fuse(&s, &scaled).unwrap().values));
    }
}

#[test]
fn prediction_invariant_to_scaling_by_seven_point_three() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = EnsembleWeights::rgb_track();
    let scaled = base.scaled(7.3).unwrap();
    for s in 0..2000 {
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..20).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let v = vectors(&format!("s{s}"), &RGB_MODALITIES, &rows);
        assert_eq!(predict(&fuse(&v, &base).unwrap().values), predict(&fuse(&v, &scaled).unwrap().values));
    }
}

#[test]
fn stream_fusion_selectors_and_agreement() {
    let names = ["joint", "bone", "joint_motion", "bone_motion"];
    let rows = vec![vec![0.1, 2.0, 0.3], vec![3.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.5, 0.4, 0.3]];
    let s = vectors("x", &names, &rows);
    assert_eq!(fuse_streams(&s, &[1.0, 0.0, 0.0, 0.0]).unwrap().values, rows[0]);
    let same = vectors("x", &names, &vec![rows[0].clone(); 4]);
    assert_eq!(predict(&fuse_streams(&same, &[1.0; 4]).unwrap().values), predict(&rows[0]));
}

/// Random scores where each modality is right on its own subset of samples.
fn complementary_tables(seed: u64, m: usize, n: usize, k: usize) -> (Vec<ScoreTable>, HashMap<String, usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n).map(|i| format!("v{i:03}")).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let tables = (0..m)
        .map(|mi| {
            let mut s = Array2::from_shape_fn((n, k), |_| rng.random_range(0.0..1.0));
            for (i, &l) in labels.iter().enumerate() {
                if rng.random_bool(0.5 + 0.1 * mi as f64) {
                    s[[i, l]] += rng.random_range(0.2..1.5);
                }
            }
            ScoreTable::new(format!("m{mi}"), ids.clone(), s).unwrap()
        })
        .collect();
    (tables, ids.into_iter().zip(labels).collect())
}

fn accuracy(tables: &[ScoreTable], labels: &HashMap<String, usize>, w: &[f64]) -> f64 {
    let n = tables[0].sample_ids.len();
    let mut correct = 0;
    for i in 0..n {
        let k = tables[0].num_classes();
        let fused: Vec<f64> = (0..k).map(|c| tables.iter().zip(w).map(|(t, wm)| wm * t.scores[[i, c]]).sum()).collect();
        if predict(&fused) == labels[&tables[0].sample_ids[i]] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[test]
fn tuned_weights_match_exhaustive_oracle_and_beat_single_modalities() {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for seed in 0..5 {
        let (tables, labels) = complementary_tables(seed, 3, 120, 6);
        let tuned = tune_weights(&tables, &labels, &grid).unwrap();
        let mut best = (f64::NEG_INFINITY, vec![]);
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    if a + b + c == 0.0 {
                        continue;
                    }
                    let acc = accuracy(&tables, &labels, &[a, b, c]);
                    if acc > best.0 + 1e-12 {
                        best = (acc, vec![a, b, c]);
                    }
                }
            }
        }
        assert!((tuned.accuracy - best.0).abs() <= 1e-12, "seed {seed}");
        assert_eq!(tuned.weights.values(), best.1, "seed {seed}");
        assert_eq!(tuned.evaluated, grid.len().pow(3) - 1);
        for mi in 0..3 {
            let mut sel = [0.0; 3];
            sel[mi] = 1.0;
            assert!(tuned.accuracy >= accuracy(&tables, &labels, &sel));
        }
    }
}

#[test]
fn fused_tables_agree_with_per_sample_fusion() {
    let (tables, _) = complementary_tables(9, 3, 20, 4);
    let w = weights(&["m0", "m1", "m2"], &[0.3, 1.0, 0.6]);
    let fused = fuse_tables(&tables, &w).unwrap();
    for (i, id) in tables[0].sample_ids.iter().enumerate() {
        let rows: Vec<ScoreVector> = tables.iter().map(|t| t.row(id).unwrap()).collect();
        let one = fuse(&rows, &w).unwrap();
        assert_eq!(fused.scores.row(i).to_vec(), one.values);
    }
}

#[test]
fn score_files_round_trip() {
    let (tables, _) = complementary_tables(2, 1, 15, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("joint.csv");
    tables[0].write_csv(&path).unwrap();
    let back = ScoreTable::read_csv(&path, "m0").unwrap();
    assert_eq!(back, tables[0]);
}
