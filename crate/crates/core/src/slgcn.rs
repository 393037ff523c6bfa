//! SL-GCN: stacked blocks of decoupled spatial graph convolution, cascaded
//! spatial/temporal/channel attention, temporal convolution and DropGraph,
//! followed by global pooling and a linear classifier.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, Axis, Ix2, Ix4};
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::graph::{normalize_adjacency, NormalizedAdjacency, PartitionStrategy, SkeletonGraph};
use crate::nn::{
    batch_loss, global_avg_pool, global_avg_pool_backward, join, sigmoid_array, ActKind, Activation, BatchNorm,
    Conv2d, Linear, Mode, Module, NamedBuffers, NamedParams, NetRng, Param,
};
use crate::streams::{StreamTensor, CHANNELS};

/// Spatial graph convolution whose output channels are split into groups,
/// each group owning its own trainable copy of every adjacency partition.
///
/// `y[c, w] = sum_p sum_v (W_p x)[c, v] * A[p, group(c), v, w]`; there is no
/// bias term.
#[derive(Debug, Clone)]
pub struct DecoupledGcn {
    /// Pointwise transform producing `partitions * out_channels` channels.
    pub conv: Conv2d,
    /// `(partitions, groups, N, N)`.
    pub adjacency: Param,
    pub out_channels: usize,
    pub groups: usize,
    z: Option<Array4<f64>>,
}

impl DecoupledGcn {
    pub fn new(in_channels: usize, out_channels: usize, groups: usize, adjacency: &NormalizedAdjacency, rng: &mut NetRng) -> Result<Self> {
        let conv = Conv2d::pointwise(in_channels, out_channels * adjacency.num_partitions(), false, rng)?;
        DecoupledGcn::from_parts(conv, out_channels, groups, adjacency)
    }

    /// Builds the layer around an explicit pointwise transform; the adjacency
    /// partitions are replicated once per group.
    pub fn from_parts(conv: Conv2d, out_channels: usize, groups: usize, adjacency: &NormalizedAdjacency) -> Result<Self> {
        ensure!(
            groups > 0 && out_channels % groups == 0,
            Error::Shape(format!("{out_channels} channels cannot be split into {groups} groups"))
        );
        let parts = adjacency.num_partitions();
        ensure!(
            conv.out_channels == parts * out_channels,
            Error::Shape(format!(
                "pointwise transform yields {} channels, expected {}",
                conv.out_channels,
                parts * out_channels
            ))
        );
        let n = adjacency.num_nodes();
        let a = Array4::from_shape_fn((parts, groups, n, n), |(p, _, v, w)| adjacency.partitions[p][[v, w]]);
        Ok(DecoupledGcn {
            conv,
            adjacency: Param::new(a),
            out_channels,
            groups,
            z: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.value.shape()[2]
    }

    pub fn num_partitions(&self) -> usize {
        self.adjacency.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let n = self.num_nodes();
        ensure!(
            x.dim().3 == n,
            Error::Shape(format!("graph convolution expects {n} nodes, got {}", x.dim().3))
        );
        let z = self.conv.forward(x)?;
        let (bsz, _, t, _) = z.dim();
        let cg = self.out_channels / self.groups;
        let a = self.adjacency.value.view().into_dimensionality::<Ix4>().expect("4-d adjacency");
        let mut y = Array4::zeros((bsz, self.out_channels, t, n));
        for b in 0..bsz {
            for p in 0..self.num_partitions() {
                for g in 0..self.groups {
                    let lo = p * self.out_channels + g * cg;
                    let zb = z.slice(s![b, lo..lo + cg, .., ..]);
                    let zb = zb.to_shape((cg * t, n)).expect("reshape");
                    let mut yb = y
                        .slice_mut(s![b, g * cg..(g + 1) * cg, .., ..])
                        .into_shape_with_order((cg * t, n))
                        .expect("contiguous output");
                    general_mat_mul(1.0, &zb, &a.slice(s![p, g, .., ..]), 1.0, &mut yb);
                }
            }
        }
        self.z = Some(z);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let z = self.z.take().expect("forward before backward");
        let (bsz, _, t, n) = dy.dim();
        let cg = self.out_channels / self.groups;
        let mut dz = Array4::zeros(z.raw_dim());
        let parts = self.num_partitions();
        {
            let a = self.adjacency.value.view().into_dimensionality::<Ix4>().expect("4-d adjacency");
            let mut da = self
                .adjacency
                .grad
                .view_mut()
                .into_dimensionality::<Ix4>()
                .expect("4-d adjacency");
            for b in 0..bsz {
                for p in 0..parts {
                    for g in 0..self.groups {
                        let lo = p * self.out_channels + g * cg;
                        let dyb = dy.slice(s![b, g * cg..(g + 1) * cg, .., ..]);
                        let dyb = dyb.to_shape((cg * t, n)).expect("reshape");
                        let zb = z.slice(s![b, lo..lo + cg, .., ..]);
                        let zb = zb.to_shape((cg * t, n)).expect("reshape");
                        let mut dab = da.slice_mut(s![p, g, .., ..]);
                        general_mat_mul(1.0, &zb.t(), &dyb, 1.0, &mut dab);
                        let mut dzb = dz
                            .slice_mut(s![b, lo..lo + cg, .., ..])
                            .into_shape_with_order((cg * t, n))
                            .expect("contiguous grad");
                        general_mat_mul(1.0, &dyb, &a.slice(s![p, g, .., ..]).t(), 0.0, &mut dzb);
                    }
                }
            }
        }
        self.conv.backward(&dz)
    }
}

impl Module for DecoupledGcn {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        self.conv.collect_params(&join(prefix, "conv"), out);
        out.push((join(prefix, "adjacency"), &mut self.adjacency));
    }
}

/// Scalar-output 1-d convolution over the last axis of `(B, C, L)` features.
fn gate_conv(m: &Array3<f64>, weight: &Param, bias: &Param) -> Array2<f64> {
    let (bsz, c, len) = m.dim();
    let w = weight.value.view().into_dimensionality::<Ix2>().expect("2-d gate weight");
    let k = w.ncols();
    let pad = (k - 1) / 2;
    let b0 = bias.value[0];
    Array2::from_shape_fn((bsz, len), |(b, l)| {
        let mut acc = b0;
        for ci in 0..c {
            for ki in 0..k {
                let src = l as isize + ki as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    acc += w[[ci, ki]] * m[[b, ci, src as usize]];
                }
            }
        }
        acc
    })
}

fn gate_conv_backward(m: &Array3<f64>, weight: &mut Param, bias: &mut Param, dlogit: &Array2<f64>) -> Array3<f64> {
    let (bsz, c, len) = m.dim();
    let k = weight.value.shape()[1];
    let pad = (k - 1) / 2;
    let mut dm = Array3::zeros(m.raw_dim());
    bias.grad[0] += dlogit.sum();
    for b in 0..bsz {
        for l in 0..len {
            let d = dlogit[[b, l]];
            for ki in 0..k {
                let src = l as isize + ki as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let src = src as usize;
                for ci in 0..c {
                    weight.grad[[ci, ki]] += d * m[[b, ci, src]];
                    dm[[b, ci, src]] += d * weight.value[[ci, ki]];
                }
            }
        }
    }
    dm
}

#[derive(Debug, Clone)]
struct AttentionCache {
    x: Array4<f64>,
    x1: Array4<f64>,
    x2: Array4<f64>,
    ms: Array3<f64>,
    gs: Array2<f64>,
    mt: Array3<f64>,
    gt: Array2<f64>,
    gc: Array2<f64>,
}

/// Cascaded spatial, temporal and channel gating. Each gate is a sigmoid in
/// `(0, 1)` that multiplies the activations.
#[derive(Debug, Clone)]
pub struct StcAttention {
    pub spatial_weight: Param,
    pub spatial_bias: Param,
    pub temporal_weight: Param,
    pub temporal_bias: Param,
    pub channel_fc1: Linear,
    pub channel_fc2: Linear,
    hidden_act: Activation,
    cache: Option<AttentionCache>,
}

impl StcAttention {
    pub const TEMPORAL_KERNEL: usize = 9;

    pub fn new(channels: usize, num_nodes: usize, act: ActKind, rng: &mut NetRng) -> StcAttention {
        let spatial_kernel = if num_nodes % 2 == 1 { num_nodes } else { num_nodes - 1 }.max(1);
        let hidden = (channels / 2).max(1);
        let std_s = (1.0 / (channels * spatial_kernel) as f64).sqrt();
        let std_t = (1.0 / (channels * Self::TEMPORAL_KERNEL) as f64).sqrt();
        StcAttention {
            spatial_weight: Param::normal(&[channels, spatial_kernel], std_s, rng),
            spatial_bias: Param::zeros(&[1]),
            temporal_weight: Param::normal(&[channels, Self::TEMPORAL_KERNEL], std_t, rng),
            temporal_bias: Param::zeros(&[1]),
            channel_fc1: Linear::new(channels, hidden, rng),
            channel_fc2: Linear::new(hidden, channels, rng),
            hidden_act: Activation::new(act),
            cache: None,
        }
    }

    /// Zeroes every gate weight and sets every gate bias to `logit`, so each
    /// gate outputs `sigmoid(logit)` regardless of the input.
    pub fn set_constant_gates(&mut self, logit: f64) {
        self.spatial_weight.value.fill(0.0);
        self.temporal_weight.value.fill(0.0);
        self.channel_fc2.weight.value.fill(0.0);
        self.spatial_bias.value.fill(logit);
        self.temporal_bias.value.fill(logit);
        self.channel_fc2.bias.value.fill(logit);
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let c = self.spatial_weight.value.shape()[0];
        ensure!(
            x.dim().1 == c,
            Error::Shape(format!("attention expects {c} channels, got {}", x.dim().1))
        );
        let ms = x.mean_axis(Axis(2)).expect("non-empty time axis");
        let gs = sigmoid_array(&gate_conv(&ms, &self.spatial_weight, &self.spatial_bias));
        let mut x1 = x.clone();
        for ((b, _, _, n), v) in x1.indexed_iter_mut() {
            *v *= gs[[b, n]];
        }

        let mt = x1.mean_axis(Axis(3)).expect("non-empty node axis");
        let gt = sigmoid_array(&gate_conv(&mt, &self.temporal_weight, &self.temporal_bias));
        let mut x2 = x1.clone();
        for ((b, _, t, _), v) in x2.indexed_iter_mut() {
            *v *= gt[[b, t]];
        }

        let mc = x2.mean_axis(Axis(3)).and_then(|m| m.mean_axis(Axis(2))).expect("non-empty");
        let h = self.channel_fc1.forward(&mc)?;
        let h = self.hidden_act.forward(&h);
        let gc = sigmoid_array(&self.channel_fc2.forward(&h)?);
        let mut x3 = x2.clone();
        for ((b, ch, _, _), v) in x3.indexed_iter_mut() {
            *v *= gc[[b, ch]];
        }

        self.cache = Some(AttentionCache {
            x: x.clone(),
            x1,
            x2,
            ms,
            gs,
            mt,
            gt,
            gc,
        });
        Ok(x3)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let AttentionCache {
            x,
            x1,
            x2,
            ms,
            gs,
            mt,
            gt,
            gc,
        } = self.cache.take().expect("forward before backward");
        let (bsz, c, t, n) = dy.dim();

        // channel gate
        let mut dgc = Array2::zeros((bsz, c));
        let mut dx2 = dy.clone();
        for ((b, ch, ti, ni), d) in dx2.indexed_iter_mut() {
            dgc[[b, ch]] += *d * x2[[b, ch, ti, ni]];
            *d *= gc[[b, ch]];
        }
        let dlc = &dgc * &gc.mapv(|g| g * (1.0 - g));
        let dh = self.channel_fc2.backward(&dlc);
        let dh = self.hidden_act.backward(&dh);
        let dmc = self.channel_fc1.backward(&dh) / (t * n) as f64;
        for ((b, ch, _, _), d) in dx2.indexed_iter_mut() {
            *d += dmc[[b, ch]];
        }

        // temporal gate
        let mut dgt = Array2::zeros((bsz, t));
        let mut dx1 = dx2;
        for ((b, ch, ti, ni), d) in dx1.indexed_iter_mut() {
            dgt[[b, ti]] += *d * x1[[b, ch, ti, ni]];
            *d *= gt[[b, ti]];
        }
        let dlt = &dgt * &gt.mapv(|g| g * (1.0 - g));
        let dmt = gate_conv_backward(&mt, &mut self.temporal_weight, &mut self.temporal_bias, &dlt) / n as f64;
        for ((b, ch, ti, _), d) in dx1.indexed_iter_mut() {
            *d += dmt[[b, ch, ti]];
        }

        // spatial gate
        let mut dgs = Array2::zeros((bsz, n));
        let mut dx = dx1;
        for ((b, ch, ti, ni), d) in dx.indexed_iter_mut() {
            dgs[[b, ni]] += *d * x[[b, ch, ti, ni]];
            *d *= gs[[b, ni]];
        }
        let dls = &dgs * &gs.mapv(|g| g * (1.0 - g));
        let dms = gate_conv_backward(&ms, &mut self.spatial_weight, &mut self.spatial_bias, &dls) / t as f64;
        for ((b, ch, _, ni), d) in dx.indexed_iter_mut() {
            *d += dms[[b, ch, ni]];
        }
        dx
    }
}

impl Module for StcAttention {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((join(prefix, "spatial_weight"), &mut self.spatial_weight));
        out.push((join(prefix, "spatial_bias"), &mut self.spatial_bias));
        out.push((join(prefix, "temporal_weight"), &mut self.temporal_weight));
        out.push((join(prefix, "temporal_bias"), &mut self.temporal_bias));
        self.channel_fc1.collect_params(&join(prefix, "channel_fc1"), out);
        self.channel_fc2.collect_params(&join(prefix, "channel_fc2"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropGraphConfig {
    /// Probability that a node survives, in `(0, 1]`.
    pub keep_prob: f64,
    /// Radius of the neighborhood dropped together with a seed node.
    pub block_hops: usize,
    /// Index of the first block (0-based) that applies DropGraph.
    pub first_block: usize,
}

impl Default for DropGraphConfig {
    fn default() -> Self {
        DropGraphConfig {
            keep_prob: 0.95,
            block_hops: 1,
            first_block: 5,
        }
    }
}

impl DropGraphConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.keep_prob > 0.0 && self.keep_prob <= 1.0,
            Error::InvalidArgument(format!("keep_prob {} outside (0, 1]", self.keep_prob))
        );
        Ok(())
    }
}

/// Zeroes random seed nodes together with their `block_hops` neighborhoods.
/// Survivors are rescaled by `N / kept` per sample.
#[derive(Debug, Clone)]
pub struct DropGraph {
    pub keep_prob: f64,
    neighborhoods: Vec<Vec<usize>>,
    gamma: f64,
    mask: Option<Array2<f64>>,
}

impl DropGraph {
    pub fn new(graph: &SkeletonGraph, keep_prob: f64, block_hops: usize) -> Result<DropGraph> {
        DropGraphConfig {
            keep_prob,
            block_hops,
            first_block: 0,
        }
        .validate()?;
        let neighborhoods: Vec<Vec<usize>> = (0..graph.num_nodes())
            .map(|i| {
                graph
                    .hops_from(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.is_some_and(|d| d <= block_hops))
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let mean_block = neighborhoods.iter().map(Vec::len).sum::<usize>() as f64 / neighborhoods.len() as f64;
        Ok(DropGraph {
            keep_prob,
            gamma: (1.0 - keep_prob) / mean_block,
            neighborhoods,
            mask: None,
        })
    }

    /// Per-node seed probability.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn neighborhood(&self, node: usize) -> &[usize] {
        &self.neighborhoods[node]
    }

    /// Draws a `(batch, N)` multiplicative mask: `0` on dropped nodes and the
    /// rescale factor elsewhere.
    pub fn sample_mask(&self, batch: usize, rng: &mut NetRng) -> Array2<f64> {
        let n = self.neighborhoods.len();
        let mut mask = Array2::ones((batch, n));
        for mut row in mask.rows_mut() {
            for i in 0..n {
                if rng.random_bool(self.gamma) {
                    for &j in &self.neighborhoods[i] {
                        row[j] = 0.0;
                    }
                }
            }
            let kept = row.sum();
            let scale = if kept > 0.0 { n as f64 / kept } else { 0.0 };
            row.mapv_inplace(|m| m * scale);
        }
        mask
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut NetRng) -> Array4<f64> {
        if mode == Mode::Eval || self.keep_prob >= 1.0 {
            self.mask = None;
            return x.clone();
        }
        let mask = self.sample_mask(x.dim().0, rng);
        let mut y = x.clone();
        for ((b, _, _, n), v) in y.indexed_iter_mut() {
            *v *= mask[[b, n]];
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        match self.mask.take() {
            None => dy.clone(),
            Some(mask) => {
                let mut dx = dy.clone();
                for ((b, _, _, n), v) in dx.indexed_iter_mut() {
                    *v *= mask[[b, n]];
                }
                dx
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlgcnConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Decoupling groups `G`.
    pub groups: usize,
    pub temporal_kernel: usize,
    pub attention: bool,
    /// `None` disables DropGraph entirely.
    pub dropgraph: Option<DropGraphConfig>,
    pub partition: PartitionStrategy,
    pub activation: ActKind,
}

impl SlgcnConfig {
    /// Ten blocks of 64/64/64/64/128/128/128/256/256/256 channels with
    /// temporal stride 2 entering the 128 and 256 stages.
    pub fn standard(num_classes: usize) -> SlgcnConfig {
        SlgcnConfig {
            num_classes,
            in_channels: CHANNELS,
            blocks: Self::plan(CHANNELS, &[64, 64, 64, 64, 128, 128, 128, 256, 256, 256], &[4, 7]),
            groups: 8,
            temporal_kernel: 9,
            attention: true,
            dropgraph: Some(DropGraphConfig::default()),
            partition: PartitionStrategy::Spatial,
            activation: ActKind::Swish,
        }
    }

    /// Chains `widths` from `in_channels`, using stride 2 at the listed
    /// block indices.
    pub fn plan(in_channels: usize, widths: &[usize], stride2_at: &[usize]) -> Vec<BlockSpec> {
        let mut prev = in_channels;
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let spec = BlockSpec {
                    in_channels: prev,
                    out_channels: w,
                    stride: if stride2_at.contains(&i) { 2 } else { 1 },
                };
                prev = w;
                spec
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.blocks.is_empty(), Error::InvalidArgument("model has no blocks".into()));
        ensure!(
            self.num_classes >= 2,
            Error::InvalidArgument("need at least two classes".into())
        );
        ensure!(
            self.blocks[0].in_channels == self.in_channels,
            Error::InvalidArgument("first block must consume the input channels".into())
        );
        for pair in self.blocks.windows(2) {
            ensure!(
                pair[0].out_channels == pair[1].in_channels,
                Error::InvalidArgument("block channels do not chain".into())
            );
        }
        for b in &self.blocks {
            ensure!(
                b.out_channels % self.groups == 0,
                Error::InvalidArgument(format!(
                    "{} channels cannot be split into {} groups",
                    b.out_channels, self.groups
                ))
            );
            ensure!(
                b.stride == 1 || b.stride == 2,
                Error::InvalidArgument("temporal stride must be 1 or 2".into())
            );
        }
        ensure!(
            self.temporal_kernel % 2 == 1,
            Error::InvalidArgument("temporal kernel must be odd".into())
        );
        if let Some(d) = &self.dropgraph {
            d.validate()?;
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }
}

#[derive(Debug, Clone)]
struct Projection {
    conv: Conv2d,
    bn: BatchNorm,
}

impl Projection {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut NetRng) -> Result<Self> {
        Ok(Projection {
            conv: Conv2d::new(cin, cout, (1, 1), (stride, 1), (0, 0), 1, false, rng)?,
            bn: BatchNorm::new(cout),
        })
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let y = self.conv.forward(x)?;
        self.bn.forward(&y, mode)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.bn.backward(dy);
        self.conv.backward(&d)
    }
}

impl Module for Projection {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        self.conv.collect_params(&join(prefix, "conv"), out);
        self.bn.collect_params(&join(prefix, "bn"), out);
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut NamedBuffers<'a>) {
        self.bn.collect_buffers(&join(prefix, "bn"), out);
    }
}

/// One SL-GCN block: `act(BN(GCN(x)) + res)`, attention, `BN(TCN(.))`, block
/// residual, activation, DropGraph.
#[derive(Debug, Clone)]
pub struct SlgcnBlock {
    pub gcn: DecoupledGcn,
    gcn_bn: BatchNorm,
    gcn_down: Option<Projection>,
    gcn_act: Activation,
    pub attention: StcAttention,
    attention_enabled: bool,
    tcn: Conv2d,
    tcn_bn: BatchNorm,
    residual: Option<Projection>,
    out_act: Activation,
    drop: Option<DropGraph>,
}

impl SlgcnBlock {
    pub fn new(
        spec: BlockSpec,
        config: &SlgcnConfig,
        adjacency: &NormalizedAdjacency,
        drop: Option<DropGraph>,
        rng: &mut NetRng,
    ) -> Result<SlgcnBlock> {
        let BlockSpec {
            in_channels: cin,
            out_channels: cout,
            stride,
        } = spec;
        Ok(SlgcnBlock {
            gcn: DecoupledGcn::new(cin, cout, config.groups, adjacency, rng)?,
            gcn_bn: BatchNorm::new(cout),
            gcn_down: (cin != cout)
                .then(|| Projection::new(cin, cout, 1, rng))
                .transpose()?,
            gcn_act: Activation::new(config.activation),
            attention: StcAttention::new(cout, adjacency.num_nodes(), config.activation, rng),
            attention_enabled: config.attention,
            tcn: Conv2d::temporal(cout, cout, config.temporal_kernel, stride, false, rng)?,
            tcn_bn: BatchNorm::new(cout),
            residual: (cin != cout || stride != 1)
                .then(|| Projection::new(cin, cout, stride, rng))
                .transpose()?,
            out_act: Activation::new(config.activation),
            drop,
        })
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut NetRng) -> Result<Array4<f64>> {
        let g = self.gcn.forward(x)?;
        let mut g = self.gcn_bn.forward(&g, mode)?;
        match &mut self.gcn_down {
            Some(p) => g += &p.forward(x, mode)?,
            None => g += x,
        }
        let h = self.gcn_act.forward(&g);
        let a = if self.attention_enabled {
            self.attention.forward(&h)?
        } else {
            h
        };
        let t = self.tcn.forward(&a)?;
        let mut t = self.tcn_bn.forward(&t, mode)?;
        match &mut self.residual {
            Some(p) => t += &p.forward(x, mode)?,
            None => t += x,
        }
        let o = self.out_act.forward(&t);
        Ok(match &mut self.drop {
            Some(d) => d.forward(&o, mode, rng),
            None => o,
        })
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = match &mut self.drop {
            Some(drop) => drop.backward(dy),
            None => dy.clone(),
        };
        let dsum = self.out_act.backward(&d);
        let mut dx = match &mut self.residual {
            Some(p) => p.backward(&dsum),
            None => dsum.clone(),
        };
        let da = self.tcn.backward(&self.tcn_bn.backward(&dsum));
        let dh = if self.attention_enabled {
            self.attention.backward(&da)
        } else {
            da
        };
        let dg = self.gcn_act.backward(&dh);
        match &mut self.gcn_down {
            Some(p) => dx += &p.backward(&dg),
            None => dx += &dg,
        }
        dx += &self.gcn.backward(&self.gcn_bn.backward(&dg));
        dx
    }
}

impl Module for SlgcnBlock {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        self.gcn.collect_params(&join(prefix, "gcn"), out);
        self.gcn_bn.collect_params(&join(prefix, "gcn_bn"), out);
        if let Some(p) = &mut self.gcn_down {
            p.collect_params(&join(prefix, "gcn_down"), out);
        }
        self.attention.collect_params(&join(prefix, "attention"), out);
        self.tcn.collect_params(&join(prefix, "tcn"), out);
        self.tcn_bn.collect_params(&join(prefix, "tcn_bn"), out);
        if let Some(p) = &mut self.residual {
            p.collect_params(&join(prefix, "residual"), out);
        }
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut NamedBuffers<'a>) {
        self.gcn_bn.collect_buffers(&join(prefix, "gcn_bn"), out);
        if let Some(p) = &mut self.gcn_down {
            p.collect_buffers(&join(prefix, "gcn_down"), out);
        }
        self.tcn_bn.collect_buffers(&join(prefix, "tcn_bn"), out);
        if let Some(p) = &mut self.residual {
            p.collect_buffers(&join(prefix, "residual"), out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Slgcn {
    pub config: SlgcnConfig,
    pub blocks: Vec<SlgcnBlock>,
    pub classifier: Linear,
    num_nodes: usize,
    pooled: Option<(usize, usize)>,
}

impl Slgcn {
    pub fn new(config: &SlgcnConfig, graph: &SkeletonGraph, rng: &mut NetRng) -> Result<Slgcn> {
        config.validate()?;
        let adjacency = normalize_adjacency(graph, config.partition);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, spec) in config.blocks.iter().enumerate() {
            let drop = match &config.dropgraph {
                Some(d) if i >= d.first_block => Some(DropGraph::new(graph, d.keep_prob, d.block_hops)?),
                _ => None,
            };
            blocks.push(SlgcnBlock::new(*spec, config, &adjacency, drop, rng)?);
        }
        Ok(Slgcn {
            classifier: Linear::new(config.final_channels(), config.num_classes, rng),
            config: config.clone(),
            blocks,
            num_nodes: graph.num_nodes(),
            pooled: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// `(B, 3, T, N)` input to `(B, num_classes)` pre-softmax scores.
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut NetRng) -> Result<Array2<f64>> {
        let (_, c, _, n) = x.dim();
        ensure!(
            n == self.num_nodes,
            Error::Shape(format!("model graph has {} nodes, input has {n}", self.num_nodes))
        );
        ensure!(
            c == self.config.in_channels,
            Error::Shape(format!("model expects {} input channels, got {c}", self.config.in_channels))
        );
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.forward(&h, mode, rng)?;
        }
        let (_, _, t, n) = h.dim();
        self.pooled = Some((t, n));
        self.classifier.forward(&global_avg_pool(&h))
    }

    pub fn backward(&mut self, dscores: &Array2<f64>) {
        let (t, n) = self.pooled.take().expect("forward before backward");
        let dpool = self.classifier.backward(dscores);
        let mut d = global_avg_pool_backward(&dpool, t, n);
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d);
        }
    }

    /// Clears gradients, runs a training-mode forward pass with the masks
    /// drawn from `rng`, and back-propagates the smoothed cross-entropy.
    pub fn loss_and_grad(&mut self, x: &Array4<f64>, labels: &[usize], epsilon: f64, rng: &mut NetRng) -> Result<(f64, Array2<f64>)> {
        self.zero_grad();
        let scores = self.forward(x, Mode::Train, rng)?;
        check_finite_scores(self, &scores)?;
        let (loss, dscores) = batch_loss(&scores, labels, epsilon)?;
        self.backward(&dscores);
        check_finite_grads(self, loss)?;
        Ok((loss, scores))
    }
}

impl Module for Slgcn {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params(&join(prefix, &format!("block{i}")), out);
        }
        self.classifier.collect_params(&join(prefix, "classifier"), out);
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut NamedBuffers<'a>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_buffers(&join(prefix, &format!("block{i}")), out);
        }
    }
}

pub(crate) fn check_finite_scores<M: Module>(model: &mut M, scores: &Array2<f64>) -> Result<()> {
    if scores.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let culprit = model
        .params()
        .into_iter()
        .find(|(_, p)| !p.value.iter().all(|v| v.is_finite()))
        .map_or_else(|| "scores".to_string(), |(name, _)| name);
    Err(Error::NonFinite(culprit))
}

pub(crate) fn check_finite_grads<M: Module>(model: &mut M, loss: f64) -> Result<()> {
    let bad = model
        .params()
        .into_iter()
        .find(|(_, p)| !p.grad.iter().all(|v| v.is_finite()))
        .map(|(name, _)| name);
    match bad {
        Some(name) => Err(Error::NonFinite(format!("gradient of {name}"))),
        None if !loss.is_finite() => Err(Error::NonFinite("loss".into())),
        None => Ok(()),
    }
}

/// Stacks `T x N x 3` streams into a channels-first `(B, 3, T, N)` batch.
pub fn stack_streams(streams: &[&StreamTensor]) -> Result<Array4<f64>> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (t, n, c) = first.data.dim();
    let mut out = Array4::zeros((streams.len(), c, t, n));
    for (b, s) in streams.iter().enumerate() {
        ensure!(
            s.data.dim() == (t, n, c),
            Error::Shape("streams in one batch must share a shape".into())
        );
        out.slice_mut(s![b, .., .., ..])
            .assign(&s.data.view().permuted_axes([2, 0, 1]));
    }
    Ok(out)
}
