//! Layers with explicit forward and backward passes.
//!
//! Activations are `(batch, channels, height, width)` arrays. For skeleton
//! data `height` is time and `width` is the node axis. Each layer caches what
//! its backward pass needs during `forward`, and `backward` accumulates
//! parameter gradients into [`Param::grad`].

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Dimension, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::losses::{sigmoid, swish, swish_grad};

pub type NetRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new<D: Dimension>(value: Array<f64, D>) -> Param {
        let value = value.into_dyn();
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Param {
        Param::new(ArrayD::zeros(shape))
    }

    /// Normal initialization with standard deviation `std`.
    pub fn normal(shape: &[usize], std: f64, rng: &mut NetRng) -> Param {
        let dist = Normal::new(0.0, std).expect("finite std");
        Param::new(ArrayD::from_shape_simple_fn(shape, || dist.sample(rng)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    fn view2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }
}

pub type NamedParams<'a> = Vec<(String, &'a mut Param)>;
pub type NamedBuffers<'a> = Vec<(String, &'a mut ArrayD<f64>)>;

/// Anything that owns trainable parameters and non-trainable buffers.
pub trait Module {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>);

    fn collect_buffers<'a>(&'a mut self, _prefix: &str, _out: &mut NamedBuffers<'a>) {}

    fn params(&mut self) -> NamedParams<'_> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn buffers(&mut self) -> NamedBuffers<'_> {
        let mut out = Vec::new();
        self.collect_buffers("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    fn num_params(&mut self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// 2-d convolution with grouping, computed as im2col + GEMM per sample and
/// group.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out, in / groups, kh, kw)`.
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    input: Option<Array4<f64>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        bias: bool,
        rng: &mut NetRng,
    ) -> Result<Conv2d> {
        ensure!(
            groups > 0 && in_channels % groups == 0 && out_channels % groups == 0,
            Error::Shape(format!(
                "{in_channels} -> {out_channels} channels cannot be split into {groups} groups"
            ))
        );
        ensure!(
            kernel.0 > 0 && kernel.1 > 0 && stride.0 > 0 && stride.1 > 0,
            Error::InvalidArgument("kernel and stride must be positive".into())
        );
        let fan_in = in_channels / groups * kernel.0 * kernel.1;
        let weight = Param::normal(
            &[out_channels, in_channels / groups, kernel.0, kernel.1],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        Ok(Conv2d {
            weight,
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            input: None,
        })
    }

    /// `(k, 1)` convolution along the time axis, padded to keep `T` at stride 1.
    pub fn temporal(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool, rng: &mut NetRng) -> Result<Conv2d> {
        ensure!(
            kernel % 2 == 1,
            Error::InvalidArgument(format!("temporal kernel must be odd, got {kernel}"))
        );
        Conv2d::new(in_channels, out_channels, (kernel, 1), (stride, 1), ((kernel - 1) / 2, 0), 1, bias, rng)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, bias: bool, rng: &mut NetRng) -> Result<Conv2d> {
        Conv2d::new(in_channels, out_channels, (1, 1), (1, 1), (0, 0), 1, bias, rng)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
    }

    /// Weight entries only: `in * out * kh * kw / groups`.
    pub fn weight_count(&self) -> usize {
        self.weight.len()
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Direct loop for one-channel groups, where im2col would build many
    /// tiny matrices. With `dy` given, accumulates weight and input
    /// gradients instead of the output.
    fn depthwise(&self, x: &Array4<f64>, y_or_dy: &mut Array4<f64>, grads: Option<(&mut Array4<f64>, &mut [f64])>) {
        let (bsz, c, h, w) = x.dim();
        let (_, _, ho, wo) = y_or_dy.dim();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = (self.padding.0 as isize, self.padding.1 as isize);
        let xs = x.as_slice().expect("standard layout");
        let weights = self.weight.value.as_slice().expect("standard layout");
        let taps = |o: usize, k: usize, s: usize, p: isize, n: usize| {
            let i = (o * s + k) as isize - p;
            (i >= 0 && (i as usize) < n).then_some(i as usize)
        };
        match grads {
            None => {
                let ys = y_or_dy.as_slice_mut().expect("standard layout");
                for bc in 0..bsz * c {
                    let ch = bc % c;
                    let xp = &xs[bc * h * w..(bc + 1) * h * w];
                    let yp = &mut ys[bc * ho * wo..(bc + 1) * ho * wo];
                    let wk = &weights[ch * kh * kw..(ch + 1) * kh * kw];
                    for oh in 0..ho {
                        for ki in 0..kh {
                            let Some(ih) = taps(oh, ki, sh, ph, h) else { continue };
                            let xr = &xp[ih * w..(ih + 1) * w];
                            let yr = &mut yp[oh * wo..(oh + 1) * wo];
                            for kj in 0..kw {
                                let wv = wk[ki * kw + kj];
                                for (ow, yv) in yr.iter_mut().enumerate() {
                                    if let Some(iw) = taps(ow, kj, sw, pw, w) {
                                        *yv += wv * xr[iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Some((dx, dw)) => {
                let dys = y_or_dy.as_slice().expect("standard layout");
                let dxs = dx.as_slice_mut().expect("standard layout");
                for bc in 0..bsz * c {
                    let ch = bc % c;
                    let xp = &xs[bc * h * w..(bc + 1) * h * w];
                    let dxp = &mut dxs[bc * h * w..(bc + 1) * h * w];
                    let dyp = &dys[bc * ho * wo..(bc + 1) * ho * wo];
                    let wk = &weights[ch * kh * kw..(ch + 1) * kh * kw];
                    let dwk = &mut dw[ch * kh * kw..(ch + 1) * kh * kw];
                    for oh in 0..ho {
                        for ki in 0..kh {
                            let Some(ih) = taps(oh, ki, sh, ph, h) else { continue };
                            let dyr = &dyp[oh * wo..(oh + 1) * wo];
                            for kj in 0..kw {
                                let wv = wk[ki * kw + kj];
                                let mut acc = 0.0;
                                for (ow, &g) in dyr.iter().enumerate() {
                                    if let Some(iw) = taps(ow, kj, sw, pw, w) {
                                        acc += g * xp[ih * w + iw];
                                        dxp[ih * w + iw] += g * wv;
                                    }
                                }
                                dwk[ki * kw + kj] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col_rows(&self) -> usize {
        self.in_channels / self.groups * self.kernel.0 * self.kernel.1
    }

    fn im2col(&self, x: &Array4<f64>, b: usize, g: usize, ho: usize, wo: usize) -> Array2<f64> {
        let cin_g = self.in_channels / self.groups;
        let (_, _, h, w) = x.dim();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let mut cols = Array2::zeros((self.col_rows(), ho * wo));
        for ci in 0..cin_g {
            let plane = x.slice(s![b, g * cin_g + ci, .., ..]);
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut row = cols.row_mut((ci * kh + ki) * kw + kj);
                    let row = row.as_slice_mut().expect("contiguous row");
                    for oh in 0..ho {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * sw + kj) as isize - pw as isize;
                            if iw >= 0 && (iw as usize) < w {
                                row[oh * wo + ow] = plane[[ih as usize, iw as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, dx: &mut Array4<f64>, b: usize, g: usize, ho: usize, wo: usize) {
        let cin_g = self.in_channels / self.groups;
        let (_, _, h, w) = dx.dim();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        for ci in 0..cin_g {
            let mut plane = dx.slice_mut(s![b, g * cin_g + ci, .., ..]);
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = cols.row((ci * kh + ki) * kw + kj);
                    for oh in 0..ho {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * sw + kj) as isize - pw as isize;
                            if iw >= 0 && (iw as usize) < w {
                                plane[[ih as usize, iw as usize]] += row[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (bsz, c, h, w) = x.dim();
        ensure!(
            c == self.in_channels,
            Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels))
        );
        ensure!(
            h + 2 * self.padding.0 >= self.kernel.0 && w + 2 * self.padding.1 >= self.kernel.1,
            Error::Shape(format!("input {h}x{w} smaller than kernel {:?}", self.kernel))
        );
        let (ho, wo) = self.output_size(h, w);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.col_rows()))
            .expect("contiguous weight");
        let mut y = Array4::zeros((bsz, self.out_channels, ho, wo));
        let owned;
        let x = if x.is_standard_layout() {
            x
        } else {
            owned = x.as_standard_layout().into_owned();
            &owned
        };
        if self.is_depthwise() {
            self.depthwise(x, &mut y, None);
        }
        for b in 0..if self.is_depthwise() { 0 } else { bsz } {
            for g in 0..self.groups {
                let wg = w2.slice(s![g * cout_g..(g + 1) * cout_g, ..]);
                let mut yg = y
                    .slice_mut(s![b, g * cout_g..(g + 1) * cout_g, .., ..])
                    .into_shape_with_order((cout_g, ho * wo))
                    .expect("contiguous output");
                if self.is_plain_pointwise() {
                    let xg = x.slice(s![b, g * cin_g..(g + 1) * cin_g, .., ..]);
                    let xg = xg.to_shape((cin_g, h * w)).expect("reshape input");
                    general_mat_mul(1.0, &wg, &xg, 0.0, &mut yg);
                } else {
                    let cols = self.im2col(x, b, g, ho, wo);
                    general_mat_mul(1.0, &wg, &cols, 0.0, &mut yg);
                }
            }
        }
        if let Some(bias) = &self.bias {
            for (o, &bo) in bias.value.iter().enumerate() {
                y.slice_mut(s![.., o, .., ..]).mapv_inplace(|v| v + bo);
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self.input.take().expect("forward before backward");
        let (bsz, _, h, w) = x.dim();
        let (_, _, ho, wo) = dy.dim();
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let rows = self.col_rows();
        let mut dx = Array4::zeros(x.raw_dim());
        let mut grad = std::mem::take(&mut self.weight.grad);
        if self.is_depthwise() {
            let mut dy = dy.as_standard_layout().into_owned();
            self.depthwise(&x, &mut dy, Some((&mut dx, grad.as_slice_mut().expect("standard layout"))));
        } else {
            let w2 = self
                .weight
                .value
                .view()
                .into_shape_with_order((self.out_channels, rows))
                .expect("contiguous weight");
            let mut dw2 = grad
                .view_mut()
                .into_shape_with_order((self.out_channels, rows))
                .expect("contiguous grad");
            for b in 0..bsz {
                for g in 0..self.groups {
                    let wg = w2.slice(s![g * cout_g..(g + 1) * cout_g, ..]);
                    let dyg = dy.slice(s![b, g * cout_g..(g + 1) * cout_g, .., ..]);
                    let dyg = dyg.to_shape((cout_g, ho * wo)).expect("reshape grad");
                    let mut dwg = dw2.slice_mut(s![g * cout_g..(g + 1) * cout_g, ..]);
                    if self.is_plain_pointwise() {
                        let xg = x.slice(s![b, g * cin_g..(g + 1) * cin_g, .., ..]);
                        let xg = xg.to_shape((cin_g, h * w)).expect("reshape input");
                        general_mat_mul(1.0, &dyg, &xg.t(), 1.0, &mut dwg);
                        let mut dxg = dx
                            .slice_mut(s![b, g * cin_g..(g + 1) * cin_g, .., ..])
                            .into_shape_with_order((cin_g, h * w))
                            .expect("contiguous grad");
                        general_mat_mul(1.0, &wg.t(), &dyg, 0.0, &mut dxg);
                    } else {
                        let cols = self.im2col(&x, b, g, ho, wo);
                        general_mat_mul(1.0, &dyg, &cols.t(), 1.0, &mut dwg);
                        let dcols = wg.t().dot(&dyg);
                        self.col2im(&dcols, &mut dx, b, g, ho, wo);
                    }
                }
            }
        }
        self.weight.grad = grad;
        if let Some(bias) = &mut self.bias {
            let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            bias.grad += &db.into_dyn();
        }
        dx
    }
}

impl Module for Conv2d {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Per-channel batch normalization over all axes except axis 1.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array4<f64>, Vec<f64>)>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
            batch_stats: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        let c = x.dim().1;
        ensure!(
            c == self.channels(),
            Error::Shape(format!("batch norm expects {} channels, got {c}", self.channels()))
        );
        let count = x.len() / c;
        let mut x_hat = Array4::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = x.slice(s![.., ch, .., ..]);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = plane.sum() / count as f64;
                    let var = plane.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / count as f64;
                    let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                    let m = self.momentum;
                    self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean;
                    self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std.push(istd);
            x_hat
                .slice_mut(s![.., ch, .., ..])
                .zip_mut_with(&plane, |o, &v| *o = (v - mean) * istd);
        }
        let mut y = x_hat.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| g * v + b);
        }
        self.cache = Some((x_hat, inv_std));
        self.batch_stats = mode == Mode::Train;
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (x_hat, inv_std) = self.cache.take().expect("forward before backward");
        let c = dy.dim().1;
        let count = (dy.len() / c) as f64;
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let dyc = dy.slice(s![.., ch, .., ..]);
            let xh = x_hat.slice(s![.., ch, .., ..]);
            let sum_dy = dyc.sum();
            let sum_dy_xh = (&dyc * &xh).sum();
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let istd = inv_std[ch];
            let mut dxc = dx.slice_mut(s![.., ch, .., ..]);
            if self.batch_stats {
                let k = g * istd / count;
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .and(&xh)
                    .for_each(|o, &d, &h| *o = k * (count * d - sum_dy - h * sum_dy_xh));
            } else {
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .for_each(|o, &d| *o = g * istd * d);
            }
        }
        dx
    }
}

impl Module for BatchNorm {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut NamedBuffers<'a>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActKind {
    Relu,
    #[default]
    Swish,
}

impl ActKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => x.max(0.0),
            ActKind::Swish => swish(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Swish => swish_grad(x),
        }
    }
}

impl std::str::FromStr for ActKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActKind::Relu),
            "swish" => Ok(ActKind::Swish),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for ActKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActKind::Relu => "relu",
            ActKind::Swish => "swish",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActKind,
    input: Option<ArrayD<f64>>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Activation {
        Activation { kind, input: None }
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<f64, D>) -> Array<f64, D> {
        self.input = Some(x.clone().into_dyn());
        let kind = self.kind;
        x.mapv(|v| kind.apply(v))
    }

    pub fn backward<D: Dimension>(&mut self, dy: &Array<f64, D>) -> Array<f64, D> {
        let x = self
            .input
            .take()
            .expect("forward before backward")
            .into_dimensionality::<D>()
            .expect("same rank");
        let kind = self.kind;
        let mut dx = dy.clone();
        dx.zip_mut_with(&x, |d, &v| *d *= kind.derivative(v));
        dx
    }
}

/// Inverted dropout; identity in eval mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<ArrayD<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Dropout> {
        ensure!(
            (0.0..1.0).contains(&rate),
            Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)"))
        );
        Ok(Dropout { rate, mask: None })
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<f64, D>, mode: Mode, rng: &mut NetRng) -> Array<f64, D> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mask = x.map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
        let y = x * &mask;
        self.mask = Some(mask.into_dyn());
        y
    }

    pub fn backward<D: Dimension>(&mut self, dy: &Array<f64, D>) -> Array<f64, D> {
        match self.mask.take() {
            None => dy.clone(),
            Some(mask) => dy * &mask.into_dimensionality::<D>().expect("same rank"),
        }
    }
}

/// `y = x W^T + b` on `(batch, features)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut NetRng) -> Linear {
        Linear {
            weight: Param::normal(&[out_features, in_features], (1.0 / in_features as f64).sqrt(), rng),
            bias: Param::zeros(&[out_features]),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        ensure!(
            x.ncols() == self.in_features(),
            Error::Shape(format!(
                "linear layer expects {} features, got {}",
                self.in_features(),
                x.ncols()
            ))
        );
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        let y = x.dot(&self.weight.view2().t()) + &bias;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.input.take().expect("forward before backward");
        let dw = dy.t().dot(&x);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        dy.dot(&self.weight.view2())
    }
}

impl Module for Linear {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Mean over the last two axes: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((b, c, h, w), |(i, j, _, _)| dy[[i, j]] * scale)
}

/// Average pooling with non-overlapping windows down to `(oh, ow)`.
pub fn avg_pool_to(x: &Array4<f64>, oh: usize, ow: usize) -> Result<Array4<f64>> {
    let (b, c, h, w) = x.dim();
    ensure!(
        oh > 0 && ow > 0 && h % oh == 0 && w % ow == 0,
        Error::Shape(format!("cannot average-pool {h}x{w} to {oh}x{ow}"))
    );
    let (kh, kw) = (h / oh, w / ow);
    let scale = 1.0 / (kh * kw) as f64;
    Ok(Array4::from_shape_fn((b, c, oh, ow), |(i, j, p, q)| {
        x.slice(s![i, j, p * kh..(p + 1) * kh, q * kw..(q + 1) * kw]).sum() * scale
    }))
}

pub fn avg_pool_to_backward(dy: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c, oh, ow) = dy.dim();
    let (kh, kw) = (h / oh, w / ow);
    let scale = 1.0 / (kh * kw) as f64;
    Array4::from_shape_fn((b, c, h, w), |(i, j, y, x)| dy[[i, j, y / kh, x / kw]] * scale)
}

/// Channel permutation of a grouped shuffle: output channel `j` reads input
/// channel `perm[j]`, the transpose of a `(groups, channels / groups)` grid.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    ensure!(
        groups > 0 && channels % groups == 0,
        Error::Shape(format!("{channels} channels cannot be split into {groups} groups"))
    );
    let per = channels / groups;
    Ok((0..channels).map(|j| (j % groups) * per + j / groups).collect())
}

pub fn channel_shuffle(x: &Array4<f64>, groups: usize) -> Result<Array4<f64>> {
    let perm = shuffle_permutation(x.dim().1, groups)?;
    Ok(x.select(Axis(1), &perm))
}

/// Gradient of [`channel_shuffle`]: the inverse shuffle.
pub fn channel_shuffle_backward(dy: &Array4<f64>, groups: usize) -> Result<Array4<f64>> {
    let c = dy.dim().1;
    channel_shuffle(dy, c / groups)
}

pub(crate) fn batch_rows(scores: &Array2<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    scores.rows().into_iter().map(|r| r.to_vec())
}

/// Mean smoothed cross-entropy over a batch and the gradient w.r.t. the
/// scores.
pub fn batch_loss(scores: &Array2<f64>, labels: &[usize], epsilon: f64) -> Result<(f64, Array2<f64>)> {
    ensure!(
        scores.nrows() == labels.len(),
        Error::Shape(format!("{} score rows for {} labels", scores.nrows(), labels.len()))
    );
    let b = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(scores.raw_dim());
    for (i, (row, &label)) in batch_rows(scores).zip(labels).enumerate() {
        let (loss, g) = crate::losses::smoothed_cross_entropy_with_grad(&row, label, epsilon)?;
        total += loss;
        for (k, gk) in g.into_iter().enumerate() {
            grad[[i, k]] = gk / b;
        }
    }
    Ok((total / b, grad))
}

/// Sigmoid applied element-wise.
pub(crate) fn sigmoid_array<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(sigmoid)
}

/// Reshapes in row-major order, copying first if `a` is not contiguous.
pub(crate) fn reshape4(a: Array4<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(shape).expect("element count preserved")
}

/// Parameters followed by buffers, as owned `(name, tensor)` pairs.
pub fn export_tensors<M: Module + ?Sized>(model: &mut M) -> Vec<(String, ArrayD<f64>)> {
    let mut out: Vec<(String, ArrayD<f64>)> = model.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
    out.extend(model.buffers().into_iter().map(|(n, b)| (n, b.clone())));
    out
}

/// Copies tensors laid out as by [`export_tensors`] into `model`, requiring
/// identical names and shapes.
pub fn import_tensors<M: Module + ?Sized>(model: &mut M, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
    let params = model.params().len();
    let buffers = model.buffers().len();
    ensure!(
        params + buffers == tensors.len(),
        Error::CheckpointMismatch(format!(
            "model has {} tensors, checkpoint has {}",
            params + buffers,
            tensors.len()
        ))
    );
    let (ptensors, btensors) = tensors.split_at(params);
    let slots = model.params().into_iter().map(|(n, p)| (n, &mut p.value));
    copy_into(slots, ptensors)?;
    copy_into(model.buffers().into_iter(), btensors)
}

fn copy_into<'a>(
    slots: impl Iterator<Item = (String, &'a mut ArrayD<f64>)>,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<()> {
    for ((name, slot), (tname, value)) in slots.zip(tensors) {
        ensure!(
            &name == tname,
            Error::CheckpointMismatch(format!("expected tensor {name}, found {tname}"))
        );
        ensure!(
            slot.shape() == value.shape(),
            Error::CheckpointMismatch(format!(
                "tensor {name} has shape {:?}, checkpoint has {:?}",
                slot.shape(),
                value.shape()
            ))
        );
        slot.assign(value);
    }
    Ok(())
}
