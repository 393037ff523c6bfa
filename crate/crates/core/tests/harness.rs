mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{build_dataset, tiny_slgcn_config, tiny_spec, write_file};
use samslr_core::checkpoint::Checkpoint;
use samslr_core::ensemble::ScoreTable;
use samslr_core::eval::EvalReport;
use samslr_core::formats::{Manifest, Split};
use samslr_core::streams::StreamKind;
use samslr_core::synth::{generate, write_dataset, SyntheticSpec};
use samslr_core::train::{evaluate, finetune, train, NetKind, RunConfig, FINETUNE_EPOCH_CAP};
use samslr_core::Error;

fn samslr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_samslr"))
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn slgcn_run(dir: &Path, out: &str, extra: &str) -> RunConfig {
    let (manifest, _) = build_dataset(dir, &tiny_spec());
    let path = write_file(&dir.join(format!("{out}.cfg")), &tiny_slgcn_config(&manifest, out, extra));
    RunConfig::from_file(path, NetKind::Slgcn, StreamKind::Joint).unwrap()
}

#[test]
fn synthesis_is_byte_identical_under_a_seed() {
    let spec = tiny_spec();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&spec, a.path()).unwrap();
    write_dataset(&spec, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    write_dataset(&SyntheticSpec { seed: 1, ..spec }, c.path()).unwrap();
    assert_ne!(ta, read_tree(c.path()));
}

#[test]
fn manifest_counts_and_label_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        frames: 8,
        ..SyntheticSpec::default()
    };
    let d = write_dataset(&spec, dir.path()).unwrap();
    let m = Manifest::read(&d.manifest_path).unwrap();
    assert_eq!(m.entries.len(), 200);
    let mut hist = [0usize; 4];
    for e in &m.entries {
        hist[e.label.unwrap()] += 1;
    }
    assert_eq!(hist, [50; 4]);
    assert_eq!(m.split(Split::Val).count(), 40);
}

#[test]
fn overlapping_class_sectors_are_rejected() {
    let spec = SyntheticSpec {
        sector_margin_deg: 50.0,
        ..SyntheticSpec::default()
    };
    assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))));
}

#[test]
fn noiseless_classes_are_nearest_centroid_separable() {
    let spec = SyntheticSpec {
        num_classes: 2,
        noise: 0.0,
        frames: 12,
        ..SyntheticSpec::default()
    };
    let samples = generate(&spec).unwrap();
    let flat = |a: &ndarray::Array3<f64>| a.iter().copied().collect::<Vec<f64>>();
    let dim = samples[0].keypoints.len();
    let mut centroids = vec![vec![0.0; dim]; 2];
    let mut counts = [0usize; 2];
    for s in samples.iter().filter(|s| s.split == Split::Train) {
        for (c, v) in centroids[s.label].iter_mut().zip(flat(&s.keypoints)) {
            *c += v;
        }
        counts[s.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    for s in &samples {
        let x = flat(&s.keypoints);
        let d: Vec<f64> = centroids
            .iter()
            .map(|c| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let pred = usize::from(d[1] < d[0]);
        assert_eq!(pred, s.label, "{}", s.sample_id);
    }
}

#[test]
fn zero_epoch_run_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = slgcn_run(dir.path(), "zero", "epochs = 0\n");
    let o = train(&cfg).unwrap();
    assert!(o.curve.is_empty());
    let curve = std::fs::read_to_string(dir.path().join("zero/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1);
    let mut fresh = cfg.build_network().unwrap();
    let ck = Checkpoint::load(&o.checkpoint).unwrap();
    assert_eq!(ck.step, 0);
    // Stored at single precision.
    let initial: Vec<_> = samslr_core::nn::export_tensors(&mut fresh)
        .into_iter()
        .map(|(n, t)| (n, t.mapv(|v| v as f32 as f64)))
        .collect();
    assert_eq!(ck.tensors, initial);
}

#[test]
fn training_log_follows_default_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = slgcn_run(dir.path(), "sched", "epochs = 101\n");
    let o = train(&cfg).unwrap();
    assert_eq!(o.curve.len(), 101);
    let log = std::fs::read_to_string(&o.log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(lines[49].starts_with("epoch=49 lr=1e-3 weight_decay=1e-4 "));
    assert!(lines[50].starts_with("epoch=50 lr=1e-4 weight_decay=0e0 "));
    assert!(lines[99].starts_with("epoch=99 lr=1e-4 "));
    assert!(lines[100].starts_with("epoch=100 lr=1e-5 "));
    let changes: Vec<usize> = o.curve.windows(2).filter(|w| w[0].lr != w[1].lr).map(|w| w[1].epoch).collect();
    assert_eq!(changes, vec![50, 100]);

    // The kept checkpoint is never worse on validation than any logged epoch.
    let best = o.curve.iter().filter_map(|r| r.val_top1).fold(0.0, f64::max);
    let e = evaluate(&o.checkpoint, Split::Val, dir.path().join("v.csv")).unwrap();
    assert_eq!(e.report.unwrap().top1, best);
    assert_eq!(o.best_val_top1, Some(best));
    let first_best = o.curve.iter().find(|r| r.val_top1 == Some(best)).unwrap().epoch;
    assert_eq!(o.best_epoch, Some(first_best));
}

#[test]
fn seeded_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = slgcn_run(dir.path(), "rep", "epochs = 3\nlr = 0.05\nmilestones =\n");
    let snapshot = |o: &samslr_core::train::TrainOutcome| {
        [&o.log, &o.checkpoint, o.val_scores.as_ref().unwrap()].map(|p| std::fs::read(p).unwrap())
    };
    let first = snapshot(&train(&cfg).unwrap());
    let second = snapshot(&train(&cfg).unwrap());
    assert_eq!(first, second);
}

#[test]
fn finetune_stopping_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&slgcn_run(dir.path(), "ft", "epochs = 2\nlr = 0.05\nmilestones =\n")).unwrap();
    let ck = Checkpoint::load(&o.checkpoint).unwrap();
    assert!(ck.train_loss.is_some());

    let inf = finetune(&o.checkpoint, Some(f64::INFINITY), FINETUNE_EPOCH_CAP, dir.path().join("ft")).unwrap();
    assert_eq!(inf.epochs, 1);
    assert!(inf.stopped_by_threshold);

    let zero = finetune(&o.checkpoint, Some(0.0), 4, dir.path().join("ft")).unwrap();
    assert_eq!(zero.epochs, 4);
    assert!(!zero.stopped_by_threshold);

    let mid = finetune(&o.checkpoint, Some(1e9), 3, dir.path().join("ft")).unwrap();
    assert!(mid.stopped_by_threshold && *mid.losses.last().unwrap() <= 1e9 + 1e-6);

    assert!(matches!(
        finetune(&o.checkpoint, None, 3, dir.path().join("ft")),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        finetune(&o.checkpoint, Some(f64::NAN), 3, dir.path().join("ft")),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn finetune_runs_to_the_default_cap_when_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&slgcn_run(dir.path(), "cap", "epochs = 1\nlr = 0.05\nmilestones =\n")).unwrap();
    let f = finetune(&o.checkpoint, Some(0.0), FINETUNE_EPOCH_CAP, dir.path().join("cap")).unwrap();
    assert_eq!(f.epochs, FINETUNE_EPOCH_CAP);
    assert_eq!(Checkpoint::load(&f.checkpoint).unwrap().step, (1 + FINETUNE_EPOCH_CAP) as u64);
}

#[test]
fn random_scores_hit_chance_rates() {
    let (n, k) = (20_000usize, 226usize);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let scores = Array2::from_shape_simple_fn((n, k), || rng.random::<f64>());
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let r = EvalReport::from_scores(&scores, &labels).unwrap();
    for (got, p) in [(r.top1, 1.0 / k as f64), (r.top5, 5.0 / k as f64)] {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((got - p).abs() <= 3.0 * sigma, "{got} vs {p}");
    }
    assert!(r.top1 <= r.top5);

    let perfect = Array2::from_shape_fn((50, 7), |(i, c)| if c == i % 7 { 1.0 } else { 0.0 });
    let labels: Vec<usize> = (0..50).map(|i| i % 7).collect();
    let r = EvalReport::from_scores(&perfect, &labels).unwrap();
    assert_eq!((r.top1, r.top5), (1.0, 1.0));
}

#[test]
fn cli_eval_fuse_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = build_dataset(dir.path(), &tiny_spec());
    let cfg = write_file(&dir.path().join("j.cfg"), &tiny_slgcn_config(&manifest, "run", "epochs = 2\nlr = 0.05\nmilestones =\n"));
    let st = samslr()
        .args(["train", "--net", "slgcn", "--stream", "joint", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));

    let scores = dir.path().join("joint.csv");
    let st = samslr()
        .args(["eval", "--split", "val", "--ckpt"])
        .arg(dir.path().join("run/best.ckpt"))
        .arg("--scores-out")
        .arg(&scores)
        .output()
        .unwrap();
    assert!(st.status.success());

    let fusion = write_file(
        &dir.path().join("fusion.cfg"),
        &format!("root = {}\nscore.joint = joint.csv\nweight.joint = 1\n", dir.path().display()),
    );
    let pred = dir.path().join("pred.csv");
    let st = samslr().args(["fuse", "--config"]).arg(&fusion).arg("--out").arg(&pred).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));

    let table = ScoreTable::read_csv(&scores, "joint").unwrap();
    let want: Vec<String> = table
        .sample_ids
        .iter()
        .zip(table.predictions())
        .map(|(id, p)| format!("{id},{p}"))
        .collect();
    let got = std::fs::read_to_string(&pred).unwrap();
    assert_eq!(got.lines().skip(1).collect::<Vec<_>>(), want);
}

fn assert_tagged_failure(out: &std::process::Output, tag: &str, code: i32) {
    assert_eq!(out.status.code(), Some(code));
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: {tag}: ")), "{err}");
}

#[test]
fn cli_failures_carry_single_line_tags() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = samslr()
        .args(["train", "--net", "slgcn", "--stream", "joint", "--config"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_tagged_failure(&out, "io_error", 1);

    let bad = write_file(&dir.path().join("bad.cfg"), "num_classes = 2\nbogus = 1\n");
    let out = samslr()
        .args(["train", "--net", "slgcn", "--stream", "joint", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_tagged_failure(&out, "invalid_argument", 1);

    let out = samslr().args(["train", "--net", "resnet"]).output().unwrap();
    assert_tagged_failure(&out, "usage", 2);

    let out = samslr().arg("frobnicate").output().unwrap();
    assert_tagged_failure(&out, "usage", 2);

    let garbage = write_file(&dir.path().join("x.ckpt"), "not a checkpoint");
    let out = samslr()
        .args(["eval", "--split", "val", "--ckpt"])
        .arg(&garbage)
        .arg("--scores-out")
        .arg(dir.path().join("s.csv"))
        .output()
        .unwrap();
    assert_tagged_failure(&out, "bad_format", 1);

    assert!(samslr().arg("--help").output().unwrap().status.success());
}

#[test]
fn missing_sample_files_abort_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = build_dataset(dir.path(), &tiny_spec());
    let cfg = write_file(&dir.path().join("m.cfg"), &tiny_slgcn_config(&manifest, "m", "epochs = 0\n"));
    let o = train(&RunConfig::from_file(cfg, NetKind::Slgcn, StreamKind::Joint).unwrap()).unwrap();
    std::fs::remove_file(dir.path().join("prep/skeletons/c01_0005.skel")).unwrap();
    let err = evaluate(&o.checkpoint, Split::Val, dir.path().join("s.csv")).unwrap_err();
    assert!(matches!(err, Error::MissingSample { ref sample_id, .. } if sample_id == "c01_0005"), "{err}");
}

#[test]
fn divergence_aborts_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = slgcn_run(dir.path(), "div", "epochs = 3\nlr = 1e200\nmilestones =\n");
    let err = train(&cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(dir.path().join("div/best.ckpt").exists());
    let log = std::fs::read_to_string(dir.path().join("div/train.log")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("abort epoch="));
}

#[test]
fn config_must_agree_with_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = build_dataset(dir.path(), &tiny_spec());
    let text = tiny_slgcn_config(&manifest, "c", "net = sstcn\n");
    let cfg = write_file(&dir.path().join("c.cfg"), &text);
    assert!(RunConfig::from_file(&cfg, NetKind::Slgcn, StreamKind::Joint).is_err());
}
