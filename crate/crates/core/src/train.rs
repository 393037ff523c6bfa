//! Training orchestration: step schedule, SGD, early stopping on validation
//! Top-1, evaluation with score export, and fine-tuning on train + val.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::checkpoint::Checkpoint;
use crate::config::KeyValueConfig;
use crate::dataset::{load_feature_clips, load_skeletons};
use crate::ensemble::ScoreTable;
use crate::error::{ensure, Error, Result};
use crate::eval::EvalReport;
use crate::formats::{Manifest, Split};
use crate::graph::{PartitionStrategy, SkeletonGraph};
use crate::losses::DEFAULT_EPSILON;
use crate::nn::{ActKind, Mode, Module, NamedBuffers, NamedParams, NetRng};
use crate::slgcn::{stack_streams, DropGraphConfig, Slgcn, SlgcnConfig};
use crate::sstcn::{stack_clips, KeypointFeatureClip, Sstcn, SstcnConfig};
use crate::streams::{
    augment_epoch, make_stream, sample_frames, sample_rng, AugmentationParams, KeypointSequence, SampleMode,
    StreamKind, DEFAULT_SAMPLE_LEN,
};

pub const FINETUNE_EPOCH_CAP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Slgcn,
    Sstcn,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::Slgcn => "slgcn",
            NetKind::Sstcn => "sstcn",
        }
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slgcn" => Ok(NetKind::Slgcn),
            "sstcn" => Ok(NetKind::Sstcn),
            _ => Err(Error::InvalidArgument(format!("unknown network `{s}`"))),
        }
    }
}

/// Piecewise-constant learning rate and weight decay. Phase `i` starts at
/// epoch `milestones[i - 1]` (epochs count from 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub milestones: Vec<usize>,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    /// lr 1e-3 with weight decay 1e-4, then lr 1e-4 without decay from
    /// epoch 50, then lr 1e-5 from epoch 100; 200 epochs.
    fn default() -> Self {
        TrainSchedule {
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            weight_decays: vec![1e-4, 0.0, 0.0],
            milestones: vec![50, 100],
            total_epochs: 200,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let phases = self.milestones.len() + 1;
        ensure!(
            self.learning_rates.len() == phases && self.weight_decays.len() == phases,
            Error::InvalidArgument(format!(
                "{} milestones need {phases} learning rates and weight decays",
                self.milestones.len()
            ))
        );
        ensure!(
            self.milestones.windows(2).all(|w| w[0] < w[1]) && self.milestones.first().is_none_or(|&m| m > 0),
            Error::InvalidArgument("milestones must be positive and strictly increasing".into())
        );
        ensure!(
            self.total_epochs == 0 || self.milestones.last().is_none_or(|&m| self.total_epochs >= m),
            Error::InvalidArgument("total epochs end before the last milestone".into())
        );
        ensure!(
            self.learning_rates.iter().all(|&l| l.is_finite() && l > 0.0),
            Error::InvalidArgument("learning rates must be positive".into())
        );
        ensure!(
            self.weight_decays.iter().all(|&w| w.is_finite() && w >= 0.0),
            Error::InvalidArgument("weight decays must be non-negative".into())
        );
        ensure!(self.batch_size > 0, Error::InvalidArgument("batch size must be positive".into()));
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Error::InvalidArgument("momentum must lie in [0, 1)".into())
        );
        Ok(())
    }

    fn phase(&self, epoch: usize) -> usize {
        self.milestones.iter().filter(|&&m| epoch >= m).count()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rates[self.phase(epoch)]
    }

    pub fn weight_decay_at(&self, epoch: usize) -> f64 {
        self.weight_decays[self.phase(epoch)]
    }
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v = m v + (g + wd w)`, `w -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Sgd {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64, weight_decay: f64) {
        let mut params = model.params();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let m = self.momentum;
            ndarray::Zip::from(&mut *v)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|v, &g, &w| *v = m * *v + g + weight_decay * w);
            p.value.scaled_add(-lr, v);
        }
    }
}

pub enum Network {
    Slgcn(Slgcn),
    Sstcn(Sstcn),
}

impl Network {
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut NetRng) -> Result<Array2<f64>> {
        match self {
            Network::Slgcn(m) => m.forward(x, mode, rng),
            Network::Sstcn(m) => m.forward(x, mode, rng),
        }
    }

    pub fn loss_and_grad(&mut self, x: &Array4<f64>, labels: &[usize], eps: f64, rng: &mut NetRng) -> Result<(f64, Array2<f64>)> {
        match self {
            Network::Slgcn(m) => m.loss_and_grad(x, labels, eps, rng),
            Network::Sstcn(m) => m.loss_and_grad(x, labels, eps, rng),
        }
    }
}

impl Module for Network {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        match self {
            Network::Slgcn(m) => m.collect_params(prefix, out),
            Network::Sstcn(m) => m.collect_params(prefix, out),
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut NamedBuffers<'a>) {
        match self {
            Network::Slgcn(m) => m.collect_buffers(prefix, out),
            Network::Sstcn(m) => m.collect_buffers(prefix, out),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "net",
    "stream",
    "root",
    "manifest",
    "out",
    "num_classes",
    "seed",
    "epochs",
    "batch_size",
    "momentum",
    "lr",
    "weight_decay",
    "milestones",
    "label_smoothing",
    "graph",
    "channels",
    "stride2_blocks",
    "groups",
    "temporal_kernel",
    "attention",
    "dropgraph",
    "keep_prob",
    "drop_hops",
    "drop_first_block",
    "partition",
    "activation",
    "clip_len",
    "augment",
    "sampling",
    "mirror_prob",
    "rotation_deg",
    "scale_min",
    "scale_max",
    "jitter",
    "shift",
    "frames",
    "keypoints",
    "feature_size",
    "dropout",
    "temporal_hidden",
    "classifier_hidden",
];

/// Everything a training or evaluation run needs, parsed from a
/// `key = value` file. [`RunConfig::text`] is the canonical form embedded
/// in checkpoints, with `root` made absolute.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub net: NetKind,
    pub stream: StreamKind,
    pub manifest: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub num_classes: usize,
    pub schedule: TrainSchedule,
    pub label_smoothing: f64,
    pub graph: SkeletonGraph,
    pub slgcn: SlgcnConfig,
    pub augmentation: AugmentationParams,
    pub augment: bool,
    pub sstcn: SstcnConfig,
    pub text: String,
}

impl RunConfig {
    /// Builds the run from a config file plus the network and stream chosen
    /// on the command line.
    pub fn from_file(path: impl AsRef<Path>, net: NetKind, stream: StreamKind) -> Result<RunConfig> {
        let kv = KeyValueConfig::from_file(path)?;
        for (key, want) in [("net", net.name()), ("stream", stream.name())] {
            if let Some(v) = kv.get(key) {
                ensure!(
                    v == want,
                    Error::InvalidArgument(format!("config sets {key} = {v} but {want} was requested"))
                );
            }
        }
        let root = std::path::absolute(kv.root()).map_err(|e| Error::io(kv.root(), e))?;
        let mut text = format!("net = {}\nstream = {}\nroot = {}\n", net.name(), stream.name(), root.display());
        for key in kv.keys().filter(|k| !matches!(*k, "net" | "stream" | "root")) {
            let _ = writeln!(text, "{key} = {}", kv.get(key).unwrap_or_default());
        }
        RunConfig::from_text(&text)
    }

    /// Parses a canonical (checkpoint-embedded) configuration.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let kv = KeyValueConfig::parse(text, "<run config>", Path::new("/"))?;
        if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::InvalidArgument(format!("unknown config key `{k}`")));
        }
        let net: NetKind = kv.get_parsed("net")?;
        let stream: StreamKind = kv.get_or("stream", StreamKind::Joint)?;
        let num_classes: usize = kv.get_parsed("num_classes")?;
        let d = TrainSchedule::default();
        let milestones: Vec<usize> = kv.get_list("milestones")?.unwrap_or(d.milestones);
        let schedule = TrainSchedule {
            learning_rates: kv.get_list("lr")?.unwrap_or(d.learning_rates),
            weight_decays: match kv.get_list("weight_decay")? {
                Some(w) => w,
                // Decay only in the first phase, whatever the phase count.
                None => std::iter::once(d.weight_decays[0]).chain(std::iter::repeat_n(0.0, milestones.len())).collect(),
            },
            milestones,
            total_epochs: kv.get_or("epochs", d.total_epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        schedule.validate()?;

        let graph = match kv.get("graph").unwrap_or("slr27") {
            "slr27" => SkeletonGraph::slr27(),
            "wholebody" => SkeletonGraph::wholebody(),
            _ => SkeletonGraph::from_file(kv.path("graph")?)?,
        };
        let mut slgcn = SlgcnConfig::standard(num_classes);
        if let Some(ch) = kv.get_list::<usize>("channels")? {
            let strides = kv.get_list::<usize>("stride2_blocks")?.unwrap_or_else(|| vec![4, 7]);
            slgcn.blocks = SlgcnConfig::plan(slgcn.in_channels, &ch, &strides);
        }
        slgcn.groups = kv.get_or("groups", slgcn.groups)?;
        slgcn.temporal_kernel = kv.get_or("temporal_kernel", slgcn.temporal_kernel)?;
        slgcn.attention = kv.get_bool("attention", slgcn.attention)?;
        slgcn.partition = kv.get_or::<PartitionStrategy>("partition", slgcn.partition)?;
        slgcn.activation = kv.get_or::<ActKind>("activation", slgcn.activation)?;
        let dd = DropGraphConfig::default();
        slgcn.dropgraph = kv
            .get_bool("dropgraph", true)?
            .then(|| -> Result<DropGraphConfig> {
                Ok(DropGraphConfig {
                    keep_prob: kv.get_or("keep_prob", dd.keep_prob)?,
                    block_hops: kv.get_or("drop_hops", dd.block_hops)?,
                    first_block: kv.get_or("drop_first_block", dd.first_block)?,
                })
            })
            .transpose()?;
        if net == NetKind::Slgcn {
            slgcn.validate()?;
        }

        let da = AugmentationParams::default();
        let augmentation = AugmentationParams {
            mirror_prob: kv.get_or("mirror_prob", da.mirror_prob)?,
            rotation_range: kv.get_or("rotation_deg", da.rotation_range.to_degrees())?.to_radians(),
            scale_range: (kv.get_or("scale_min", da.scale_range.0)?, kv.get_or("scale_max", da.scale_range.1)?),
            jitter_std: kv.get_or("jitter", da.jitter_std)?,
            shift_range: kv.get_or("shift", da.shift_range)?,
            temporal_sampling: kv.get_or::<SampleMode>("sampling", da.temporal_sampling)?,
            target_len: kv.get_or("clip_len", DEFAULT_SAMPLE_LEN)?,
            rng_seed: schedule.seed,
        };
        augmentation.validate()?;

        let ds = SstcnConfig::standard(num_classes);
        let frames = kv.get_or("frames", ds.frames)?;
        let sstcn = SstcnConfig {
            num_classes,
            frames,
            keypoints: kv.get_or("keypoints", ds.keypoints)?,
            feature_size: kv.get_or("feature_size", ds.feature_size)?,
            dropout_rate: kv.get_or("dropout", ds.dropout_rate)?,
            temporal_hidden: kv.get_or("temporal_hidden", frames)?,
            classifier_hidden: kv.get_or("classifier_hidden", ds.classifier_hidden)?,
        };
        if net == NetKind::Sstcn {
            sstcn.validate()?;
        }

        Ok(RunConfig {
            net,
            stream,
            manifest: kv.path("manifest")?,
            out_dir: kv.get("out").map(|o| kv.root().join(o)),
            num_classes,
            schedule,
            label_smoothing: kv.get_or("label_smoothing", DEFAULT_EPSILON)?,
            graph,
            slgcn,
            augment: kv.get_bool("augment", true)?,
            augmentation,
            sstcn,
            text: text.to_string(),
        })
    }

    pub fn build_network(&self) -> Result<Network> {
        let mut rng = NetRng::seed_from_u64(self.schedule.seed);
        Ok(match self.net {
            NetKind::Slgcn => Network::Slgcn(Slgcn::new(&self.slgcn, &self.graph, &mut rng)?),
            NetKind::Sstcn => Network::Sstcn(Sstcn::new(&self.sstcn, &mut rng)?),
        })
    }

    /// Modality tag used for exported scores.
    pub fn modality(&self) -> String {
        match self.net {
            NetKind::Slgcn => self.stream.name().to_string(),
            NetKind::Sstcn => "feature".to_string(),
        }
    }
}

/// Samples of one split held in memory.
pub enum Samples {
    Skeleton(Vec<KeypointSequence>),
    Features(Vec<KeypointFeatureClip>),
}

pub struct DataSet {
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    samples: Samples,
}

impl DataSet {
    pub fn load(cfg: &RunConfig, manifest: &Manifest, splits: &[Split]) -> Result<DataSet> {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let samples = match cfg.net {
            NetKind::Slgcn => {
                let mut all = Vec::new();
                for &s in splits {
                    all.extend(load_skeletons(manifest, s)?);
                }
                for seq in &all {
                    ensure!(
                        seq.num_nodes() == cfg.graph.num_nodes(),
                        Error::Shape(format!(
                            "sample {} has {} nodes, graph has {}",
                            seq.sample_id,
                            seq.num_nodes(),
                            cfg.graph.num_nodes()
                        ))
                    );
                    ids.push(seq.sample_id.clone());
                    labels.push(seq.label);
                }
                Samples::Skeleton(all)
            }
            NetKind::Sstcn => {
                let mut all = Vec::new();
                for &s in splits {
                    all.extend(load_feature_clips(manifest, s)?);
                }
                for c in &all {
                    ids.push(c.sample_id.clone());
                    labels.push(c.label);
                }
                Samples::Features(all)
            }
        };
        for l in labels.iter().flatten() {
            ensure!(
                *l < cfg.num_classes,
                Error::InvalidArgument(format!("label {l} outside 0..{}", cfg.num_classes))
            );
        }
        Ok(DataSet { ids, labels, samples })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn labels_of(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.labels[i].ok_or_else(|| Error::InvalidArgument(format!("sample {} has no label", self.ids[i])))
            })
            .collect()
    }

    /// Network input for the samples at `idx`. Training batches are
    /// augmented with the per-sample, per-epoch RNG.
    fn batch(&self, cfg: &RunConfig, idx: &[usize], train: Option<u64>) -> Result<Array4<f64>> {
        match &self.samples {
            Samples::Skeleton(seqs) => {
                let pairs = cfg.graph.mirror_pairs();
                let streams = idx
                    .iter()
                    .map(|&i| {
                        let seq = match train {
                            Some(epoch) if cfg.augment => augment_epoch(&seqs[i], &cfg.augmentation, &pairs, epoch)?,
                            Some(epoch) => {
                                let mut rng = sample_rng(cfg.schedule.seed, &seqs[i].sample_id, epoch);
                                sample_frames(
                                    &seqs[i],
                                    cfg.augmentation.target_len,
                                    cfg.augmentation.temporal_sampling,
                                    &mut rng,
                                )?
                            }
                            None => {
                                let mut rng = sample_rng(0, "", 0);
                                sample_frames(&seqs[i], cfg.augmentation.target_len, SampleMode::Uniform, &mut rng)?
                            }
                        };
                        make_stream(&seq, cfg.stream, &cfg.graph)
                    })
                    .collect::<Result<Vec<_>>>()?;
                stack_streams(&streams.iter().collect::<Vec<_>>())
            }
            Samples::Features(clips) => stack_clips(&idx.iter().map(|&i| &clips[i]).collect::<Vec<_>>()),
        }
    }
}

/// Eval-mode scores for every sample, in dataset order.
pub fn predict_scores(net: &mut Network, cfg: &RunConfig, data: &DataSet) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.len(), cfg.num_classes));
    let mut rng = NetRng::seed_from_u64(0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(cfg.schedule.batch_size) {
        let x = data.batch(cfg, chunk, None)?;
        let s = net.forward(&x, Mode::Eval, &mut rng)?;
        out.slice_mut(ndarray::s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(&s);
    }
    Ok(out)
}

fn top1(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = scores
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &l)| crate::ensemble::predict(&row.to_vec()) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Sample-weighted mean of the epoch's batch losses.
    pub train_loss: f64,
    /// Top-1 of the training-mode forward passes.
    pub train_top1: f64,
    pub val_top1: Option<f64>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let val = self.val_top1.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"));
        format!(
            "epoch={} lr={:e} weight_decay={:e} train_loss={:.6} train_top1={:.6} val_top1={val}",
            self.epoch, self.lr, self.weight_decay, self.train_loss, self.train_top1
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_top1: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub val_scores: Option<PathBuf>,
}

/// Runs one training epoch and returns `(mean loss, train top-1)`.
fn run_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    cfg: &RunConfig,
    data: &DataSet,
    epoch: usize,
    lr: f64,
    wd: f64,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut sample_rng(cfg.schedule.seed, "shuffle", epoch as u64));
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    for (b, chunk) in order.chunks(cfg.schedule.batch_size).enumerate() {
        let labels = data.labels_of(chunk)?;
        let x = data.batch(cfg, chunk, Some(epoch as u64))?;
        let mut rng = sample_rng(cfg.schedule.seed, &format!("batch{b}"), epoch as u64);
        let (loss, scores) = net.loss_and_grad(&x, &labels, cfg.label_smoothing, &mut rng)?;
        opt.step(net, lr, wd);
        loss_sum += loss * chunk.len() as f64;
        hits += scores
            .axis_iter(Axis(0))
            .zip(&labels)
            .filter(|(row, &l)| crate::ensemble::predict(&row.to_vec()) == l)
            .count();
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, hits as f64 / n))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains with the configured schedule, keeping the checkpoint with the
/// best validation Top-1 (the latest epoch when there is no validation
/// split). Writes `best.ckpt`, `train.log`, `curve.csv` and, with a
/// validation split, `val_scores.csv` from the kept checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::InvalidArgument("config has no `out` directory".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let train_set = DataSet::load(cfg, &manifest, &[Split::Train])?;
    let val_set = DataSet::load(cfg, &manifest, &[Split::Val])?;
    let val_labels: Option<Vec<usize>> = (!val_set.is_empty())
        .then(|| val_set.labels_of(&(0..val_set.len()).collect::<Vec<_>>()))
        .transpose()?;
    ensure!(
        cfg.schedule.total_epochs == 0 || !train_set.is_empty(),
        Error::InvalidArgument("no training samples".into())
    );

    let mut net = cfg.build_network()?;
    let mut opt = Sgd::new(cfg.schedule.momentum);
    let ckpt_path = out.join("best.ckpt");
    let log_path = out.join("train.log");
    let mut log = String::new();
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_ckpt = Checkpoint::capture(&mut net, &cfg.text, 0, None);

    for epoch in 0..cfg.schedule.total_epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let wd = cfg.schedule.weight_decay_at(epoch);
        let (train_loss, train_top1) = match run_epoch(&mut net, &mut opt, cfg, &train_set, epoch, lr, wd) {
            Ok(v) => v,
            Err(e) => {
                let _ = writeln!(log, "abort epoch={epoch} error={e}");
                write_text(&log_path, &log)?;
                if net.params().iter().all(|(_, p)| p.value.iter().all(|v| v.is_finite())) {
                    Checkpoint::capture(&mut net, &cfg.text, epoch as u64, None).save(out.join("last_finite.ckpt"))?;
                }
                best_ckpt.save(&ckpt_path)?;
                return Err(e);
            }
        };
        let val_top1 = match &val_labels {
            Some(l) => Some(top1(&predict_scores(&mut net, cfg, &val_set)?, l)),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            weight_decay: wd,
            train_loss,
            train_top1,
            val_top1,
        };
        log::info!("{}", rec.log_line());
        let _ = writeln!(log, "{}", rec.log_line());
        let improved = match (val_top1, best) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(v), Some((_, b))) => v > b,
        };
        if improved {
            best = Some((epoch, val_top1.unwrap_or(f64::NAN)));
            best_ckpt = Checkpoint::capture(&mut net, &cfg.text, epoch as u64 + 1, Some(train_loss));
        }
        curve.push(rec);
    }
    write_text(&log_path, &log)?;
    let mut csv = String::from("epoch,lr,weight_decay,train_loss,train_top1,val_top1\n");
    for r in &curve {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{},{},{}",
            r.epoch,
            r.lr,
            r.weight_decay,
            r.train_loss,
            r.train_top1,
            r.val_top1.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    write_text(&out.join("curve.csv"), &csv)?;
    best_ckpt.save(&ckpt_path)?;

    let val_scores = if val_set.is_empty() {
        None
    } else {
        best_ckpt.restore(&mut net)?;
        let scores = predict_scores(&mut net, cfg, &val_set)?;
        let path = out.join("val_scores.csv");
        ScoreTable::new(cfg.modality(), val_set.ids.clone(), scores)?.write_csv(&path)?;
        Some(path)
    };

    Ok(TrainOutcome {
        curve,
        best_epoch: best.map(|b| b.0),
        best_val_top1: best.and_then(|b| (!b.1.is_nan()).then_some(b.1)),
        checkpoint: ckpt_path,
        log: log_path,
        val_scores,
    })
}

/// Loads a checkpoint together with the network it describes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RunConfig, Network, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_text(&ckpt.config_text)?;
    let mut net = cfg.build_network()?;
    ckpt.restore(&mut net)?;
    Ok((cfg, net, ckpt))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scores: ScoreTable,
    /// `None` when the split has no labelled samples.
    pub report: Option<EvalReport>,
}

/// Eval-mode inference over one split of the checkpoint's manifest with
/// uniform frame sampling; writes the scores as CSV.
pub fn evaluate(ckpt: impl AsRef<Path>, split: Split, scores_out: impl AsRef<Path>) -> Result<Evaluation> {
    let (cfg, mut net, _) = load_checkpoint(ckpt)?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let data = DataSet::load(&cfg, &manifest, &[split])?;
    ensure!(!data.is_empty(), Error::InvalidArgument(format!("split {split} is empty")));
    let scores = predict_scores(&mut net, &cfg, &data)?;
    let table = ScoreTable::new(cfg.modality(), data.ids.clone(), scores)?;
    table.write_csv(scores_out)?;
    let labelled: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i].is_some()).collect();
    let report = if labelled.is_empty() {
        None
    } else {
        let rows = table.scores.select(Axis(0), &labelled);
        Some(EvalReport::from_scores(&rows, &data.labels_of(&labelled)?)?)
    };
    Ok(Evaluation { scores: table, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub epochs: usize,
    pub losses: Vec<f64>,
    pub stopped_by_threshold: bool,
    pub checkpoint: PathBuf,
}

/// Continues training on train + val until the running-average loss
/// reaches `stop_loss` or `max_epochs` have run. The learning rate is the
/// schedule's value at the checkpoint's epoch.
pub fn finetune(
    ckpt: impl AsRef<Path>,
    stop_loss: Option<f64>,
    max_epochs: usize,
    out: impl AsRef<Path>,
) -> Result<FinetuneOutcome> {
    let stop_loss = stop_loss.ok_or_else(|| Error::InvalidArgument("finetuning needs a stop loss".into()))?;
    ensure!(!stop_loss.is_nan(), Error::InvalidArgument("stop loss is NaN".into()));
    ensure!(max_epochs > 0, Error::InvalidArgument("epoch cap must be positive".into()));
    let (cfg, mut net, ck) = load_checkpoint(ckpt)?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let data = DataSet::load(&cfg, &manifest, &[Split::Train, Split::Val])?;
    ensure!(!data.is_empty(), Error::InvalidArgument("no samples to finetune on".into()));
    let start = ck.step as usize;
    let mut opt = Sgd::new(cfg.schedule.momentum);
    let mut losses = Vec::new();
    let mut stopped = false;
    for e in 0..max_epochs {
        let epoch = start + e;
        let lr = cfg.schedule.lr_at(epoch);
        let wd = cfg.schedule.weight_decay_at(epoch);
        let (loss, _) = run_epoch(&mut net, &mut opt, &cfg, &data, epoch, lr, wd)?;
        log::info!("finetune epoch={epoch} lr={lr:e} train_loss={loss:.6}");
        losses.push(loss);
        if loss <= stop_loss {
            stopped = true;
            break;
        }
    }
    let out = out.as_ref();
    let path = out.join("finetuned.ckpt");
    Checkpoint::capture(&mut net, &cfg.text, (start + losses.len()) as u64, losses.last().copied()).save(&path)?;
    Ok(FinetuneOutcome {
        epochs: losses.len(),
        losses,
        stopped_by_threshold: stopped,
        checkpoint: path,
    })
}
