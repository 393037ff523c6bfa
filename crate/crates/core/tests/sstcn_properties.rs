mod common;

use ndarray::{s, Array4, Axis};
use proptest::prelude::*;

use common::{random4, rng};
use samslr_core::nn::{channel_shuffle, shuffle_permutation, Conv2d, Mode};
use samslr_core::sstcn::{pool_features, stack_clips, KeypointFeatureClip, Sstcn, SstcnConfig};
use samslr_core::Error;

fn small_config(dropout: f64) -> SstcnConfig {
    SstcnConfig {
        frames: 4,
        keypoints: 3,
        feature_size: 12,
        dropout_rate: dropout,
        temporal_hidden: 5,
        classifier_hidden: 8,
        ..SstcnConfig::standard(4)
    }
}

fn naive_max_pool(x: &Array4<f64>, target: usize) -> Array4<f64> {
    let (f, k, h, _) = x.dim();
    let win = h / target;
    let mut out = Array4::from_elem((f, k, target, target), f64::NEG_INFINITY);
    for a in 0..f {
        for b in 0..k {
            for i in 0..h {
                for j in 0..h {
                    let o = &mut out[[a, b, i / win, j / win]];
                    *o = o.max(x[[a, b, i, j]]);
                }
            }
        }
    }
    out
}

#[test]
fn max_pool_matches_loop_oracle() {
    let x = random4((3, 2, 48, 48), 1);
    assert_eq!(pool_features(&x, 24).unwrap(), naive_max_pool(&x, 24));
    assert_eq!(pool_features(&x, 12).unwrap(), naive_max_pool(&x, 12));
    let c = Array4::from_elem((2, 2, 48, 48), 0.25);
    assert!(pool_features(&c, 24).unwrap().iter().all(|v| *v == 0.25));
    assert!(matches!(pool_features(&x, 20), Err(Error::Shape(_))));
    assert!(matches!(pool_features(&x, 96), Err(Error::Shape(_))));
}

#[test]
fn shuffle_permutation_examples() {
    assert_eq!(shuffle_permutation(6, 2).unwrap(), vec![0, 3, 1, 4, 2, 5]);
    assert_eq!(shuffle_permutation(5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
    assert!(shuffle_permutation(7, 2).is_err());
    let x = random4((2, 6, 3, 3), 0);
    assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_is_a_norm_preserving_permutation(groups in 1usize..8, per in 1usize..8, seed in any::<u64>()) {
        let c = groups * per;
        let perm = shuffle_permutation(c, groups).unwrap();
        let mut seen = vec![false; c];
        for &p in &perm {
            prop_assert!(!seen[p]);
            seen[p] = true;
        }
        let x = random4((2, c, 2, 2), seed);
        let y = channel_shuffle(&x, groups).unwrap();
        let sorted = |a: &Array4<f64>| {
            let mut v: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(sorted(&x), sorted(&y));
        // Summed in a fixed order, the norms agree bit for bit.
        let norm = |a: &Array4<f64>| sorted(a).into_iter().map(|b| f64::from_bits(b).powi(2)).sum::<f64>();
        prop_assert_eq!(norm(&x).to_bits(), norm(&y).to_bits());
        let back = channel_shuffle(&y, per).unwrap();
        prop_assert_eq!(back, x);
    }
}

#[test]
fn grouped_parameter_counts_divide_by_group_count() {
    let cfg = SstcnConfig::standard(226);
    let model = Sstcn::new(&cfg, &mut rng(0)).unwrap();
    let c = cfg.frames * cfg.keypoints;
    for conv in model.grouped_convs() {
        assert_eq!(conv.groups, 60);
        assert_eq!(conv.weight_count(), c * c * 9 / 60);
    }
    for conv in model.spatial_convs() {
        assert_eq!(conv.groups, 33);
        assert_eq!(conv.weight_count(), 33 * 33 * 9 / 33);
    }
    let dense = Conv2d::new(c, c, (3, 3), (1, 1), (1, 1), 1, false, &mut rng(0)).unwrap();
    assert_eq!(dense.weight_count(), 60 * model.grouped_convs()[0].weight_count());
}

#[test]
fn stage_three_never_mixes_frames() {
    let cfg = small_config(0.0);
    let mut model = Sstcn::new(&cfg, &mut rng(1)).unwrap();
    let (f, k) = (cfg.frames, cfg.keypoints);
    let x = random4((2, f * k, 12, 12), 2);
    let base = model.spatial_stage(x.clone(), Mode::Eval, &mut rng(0)).unwrap();
    for frame in 0..f {
        let mut p = x.clone();
        p.slice_mut(s![.., frame * k..(frame + 1) * k, .., ..]).mapv_inplace(|v| v + 1.5);
        let out = model.spatial_stage(p, Mode::Eval, &mut rng(0)).unwrap();
        for other in 0..f {
            let same = base.slice(s![.., other * k..(other + 1) * k, .., ..])
                == out.slice(s![.., other * k..(other + 1) * k, .., ..]);
            assert_eq!(same, other != frame, "perturbed frame {frame}, frame {other}");
        }
    }
}

#[test]
fn eval_forward_is_deterministic_without_dropout() {
    let mut model = Sstcn::new(&small_config(0.0), &mut rng(3)).unwrap();
    let one = random4((1, 12, 12, 12), 4);
    let x = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
    let y = model.forward(&x, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(y.row(0), y.row(1));
    let again = model.forward(&x, Mode::Eval, &mut rng(99)).unwrap();
    assert_eq!(y, again);

    let mut dropping = Sstcn::new(&small_config(0.5), &mut rng(3)).unwrap();
    let a = dropping.forward(&x, Mode::Eval, &mut rng(1)).unwrap();
    let b = dropping.forward(&x, Mode::Eval, &mut rng(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rejects_wrong_clip_shape() {
    let mut model = Sstcn::new(&small_config(0.0), &mut rng(0)).unwrap();
    let err = model.forward(&random4((1, 15, 12, 12), 0), Mode::Eval, &mut rng(0));
    assert!(matches!(err, Err(Error::Shape(_))));
    assert!(Sstcn::new(&SstcnConfig { feature_size: 10, ..small_config(0.0) }, &mut rng(0)).is_err());
}

#[test]
fn full_size_clip_gives_one_score_per_class() {
    let cfg = SstcnConfig::standard(226);
    let mut model = Sstcn::new(&cfg, &mut rng(0)).unwrap();
    let data = random4((60, 33, 24, 24), 7);
    let clip = KeypointFeatureClip::new("c0", data, None).unwrap();
    let x = stack_clips(&[&clip]).unwrap();
    assert_eq!(x.dim(), (1, 1980, 24, 24));
    let y = model.forward(&x, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(y.dim(), (1, 226));
    assert!(y.iter().all(|v| v.is_finite()));
}
