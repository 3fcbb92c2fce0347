//! Multi-channel attention feature fusion network and its single-representation baselines.
//!
//! Four branch convolutions turn the IQ, CFO, FFT and STFT representations
//! into feature maps of a common `C x 1 x W` size. One spatial attention stack,
//! shared by every branch, reweights each map before the maps are concatenated
//! along channels and passed through a ResNeXt block and a dense head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rfp_nn::module::Module;
use rfp_nn::{
    channel_pool, channel_pool_backward, global_avg_pool, global_avg_pool_backward, scoped, softmax_cross_entropy,
    Activation, BatchNorm, BnCache, Checkpoint, Conv2d, ConvCache, Dense, DenseCache, Mode, Padding, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::dsp::RepresentationBundle;
use crate::error::{Result, RfpError};
use crate::radio::{stream_rng, Stream};

/// Branch kernel width along time.
const KERNEL_W: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Iq,
    Cfo,
    Fft,
    Stft,
}

impl Representation {
    pub const ALL: [Representation; 4] = [Self::Iq, Self::Cfo, Self::Fft, Self::Stft];

    pub fn name(self) -> &'static str {
        match self {
            Self::Iq => "iq",
            Self::Cfo => "cfo",
            Self::Fft => "fft",
            Self::Stft => "stft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mcaff,
    McaffNoattn,
    Miq,
    Mcfo,
    Mfft,
    Mstft,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        Self::Mcaff,
        Self::McaffNoattn,
        Self::Miq,
        Self::Mcfo,
        Self::Mfft,
        Self::Mstft,
    ];

    pub fn branches(self) -> &'static [Representation] {
        use Representation::*;
        match self {
            Self::Mcaff | Self::McaffNoattn => &[Iq, Cfo, Fft, Stft],
            Self::Miq => &[Iq],
            Self::Mcfo => &[Cfo],
            Self::Mfft => &[Fft],
            Self::Mstft => &[Stft],
        }
    }

    pub fn uses_attention(self) -> bool {
        self != Self::McaffNoattn
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mcaff => "mcaff",
            Self::McaffNoattn => "mcaff_noattn",
            Self::Miq => "miq",
            Self::Mcfo => "mcfo",
            Self::Mfft => "mfft",
            Self::Mstft => "mstft",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = RfpError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RfpError::Usage(format!("unknown model '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPooling {
    GlobalAverage,
    Flatten,
}

/// Architecture hyperparameters. Serialised into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_classes: usize,
    pub branch_channels: usize,
    /// Hidden widths of the three-layer attention stack (`2 -> a -> b -> 1`).
    pub attention_widths: [usize; 2],
    pub bottleneck: usize,
    pub groups: usize,
    pub block_out: usize,
    pub dense_width: usize,
    pub head_pooling: HeadPooling,
    pub n_samples: usize,
    pub stft_frames: usize,
    pub stft_bins: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size network.
    pub fn full(kind: ModelKind, n_classes: usize) -> Self {
        Self {
            kind,
            n_classes,
            branch_channels: 128,
            attention_widths: [16, 16],
            bottleneck: 128,
            groups: 32,
            block_out: 256,
            dense_width: 512,
            head_pooling: HeadPooling::GlobalAverage,
            n_samples: 160,
            stft_frames: 9,
            stft_bins: 120,
            seed: 0,
        }
    }

    /// Reduced widths that train on one CPU core in minutes.
    pub fn desk(kind: ModelKind, n_classes: usize) -> Self {
        Self {
            branch_channels: 16,
            attention_widths: [8, 8],
            bottleneck: 32,
            block_out: 64,
            dense_width: 128,
            ..Self::full(kind, n_classes)
        }
    }

    /// Very small network on short inputs, for finite-difference checks.
    pub fn tiny(kind: ModelKind, n_classes: usize) -> Self {
        Self {
            kind,
            n_classes,
            branch_channels: 4,
            attention_widths: [3, 3],
            bottleneck: 4,
            groups: 2,
            block_out: 6,
            dense_width: 5,
            head_pooling: HeadPooling::GlobalAverage,
            n_samples: 16,
            stft_frames: 9,
            stft_bins: 10,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Common branch output width.
    pub fn feature_width(&self) -> usize {
        self.n_samples + 1 - KERNEL_W
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(RfpError::Usage(m));
        if self.n_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_samples < KERNEL_W || self.stft_bins < KERNEL_W || self.stft_frames < 8 {
            return err("inputs are smaller than the branch kernels".into());
        }
        if self.groups == 0 || !self.bottleneck.is_multiple_of(self.groups) {
            return err(format!("bottleneck {} not divisible into {} groups", self.bottleneck, self.groups));
        }
        let widths = [self.branch_channels, self.bottleneck, self.block_out, self.dense_width];
        if widths.contains(&0) || self.attention_widths.contains(&0) {
            return err("zero layer width".into());
        }
        Ok(())
    }

    /// Input tensor shape `[C, H, W]` of one frame for a representation.
    pub fn input_shape(&self, repr: Representation) -> [usize; 3] {
        match repr {
            Representation::Iq => [1, 2, self.n_samples],
            Representation::Cfo => [1, 1, self.n_samples],
            Representation::Fft => [2, 1, self.n_samples],
            Representation::Stft => [2, self.stft_frames, self.stft_bins],
        }
    }
}

/// A batch of model inputs, one `[B, C, H, W]` tensor per representation.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    pub batch: usize,
    pub iq: Option<Tensor>,
    pub cfo: Option<Tensor>,
    pub fft: Option<Tensor>,
    pub stft: Option<Tensor>,
}

impl InputBatch {
    pub fn empty(batch: usize) -> Self {
        Self {
            batch,
            iq: None,
            cfo: None,
            fft: None,
            stft: None,
        }
    }

    pub fn get(&self, repr: Representation) -> Option<&Tensor> {
        match repr {
            Representation::Iq => self.iq.as_ref(),
            Representation::Cfo => self.cfo.as_ref(),
            Representation::Fft => self.fft.as_ref(),
            Representation::Stft => self.stft.as_ref(),
        }
    }

    pub fn slot(&mut self, repr: Representation) -> &mut Option<Tensor> {
        match repr {
            Representation::Iq => &mut self.iq,
            Representation::Cfo => &mut self.cfo,
            Representation::Fft => &mut self.fft,
            Representation::Stft => &mut self.stft,
        }
    }

    /// Stacks the requested representations of `bundles`. The IQ matrix is
    /// transposed so that I and Q become the two rows of a single-channel image.
    pub fn from_bundles(bundles: &[&RepresentationBundle], reprs: &[Representation]) -> Result<Self> {
        let b = bundles.len();
        let mut out = Self::empty(b);
        let Some(first) = bundles.first() else {
            return Ok(out);
        };
        let n = first.n_samples;
        for &repr in reprs {
            let (shape, per): (Vec<usize>, usize) = match repr {
                Representation::Iq => (vec![b, 1, 2, n], 2 * n),
                Representation::Cfo => (vec![b, 1, 1, n], n),
                Representation::Fft => (vec![b, 2, 1, n], 2 * n),
                Representation::Stft => (
                    vec![b, 2, first.stft_frames, first.stft_bins],
                    2 * first.stft_frames * first.stft_bins,
                ),
            };
            let mut data = Vec::with_capacity(b * per);
            for bundle in bundles {
                if bundle.n_samples != n
                    || bundle.stft_frames != first.stft_frames
                    || bundle.stft_bins != first.stft_bins
                {
                    return Err(RfpError::Shape("bundles in a batch differ in size".into()));
                }
                match repr {
                    Representation::Iq => {
                        data.extend(bundle.r_iq.iter().step_by(2));
                        data.extend(bundle.r_iq.iter().skip(1).step_by(2));
                    }
                    Representation::Cfo => data.extend_from_slice(&bundle.r_cfo),
                    Representation::Fft => data.extend_from_slice(&bundle.r_fft),
                    Representation::Stft => data.extend_from_slice(&bundle.r_stft),
                }
            }
            *out.slot(repr) = Some(Tensor::new(&shape, data)?);
        }
        Ok(out)
    }

    /// Rows `idx` of every present tensor.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |t: &Option<Tensor>| t.as_ref().map(|t| t.select_rows(idx));
        Self {
            batch: idx.len(),
            iq: pick(&self.iq),
            cfo: pick(&self.cfo),
            fft: pick(&self.fft),
            stft: pick(&self.stft),
        }
    }
}

fn pair<T>(v: Vec<T>) -> [T; 2] {
    v.try_into().unwrap_or_else(|_| unreachable!("two head layers"))
}

fn relu_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    Ok(Activation::Relu.backward(y, dy)?)
}

fn bn_forward(bn: &mut BatchNorm, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
    Ok(bn.forward(x, mode)?)
}

/// Convolution, batch norm and an optional relu.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

#[derive(Debug, Clone)]
struct ConvBnCache {
    conv: ConvCache,
    bn: BnCache,
    out: Tensor,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ci: usize,
        co: usize,
        kernel: (usize, usize),
        padding: Padding,
        groups: usize,
        relu: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ci, co, kernel, (1, 1), padding, groups, rng)?,
            bn: BatchNorm::new(co),
            relu,
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ConvBnCache)> {
        let (z, conv) = self.conv.forward(x)?;
        let (mut y, bn) = bn_forward(&mut self.bn, &z, mode)?;
        if self.relu {
            y = Activation::Relu.forward(&y);
        }
        Ok((y.clone(), ConvBnCache { conv, bn, out: y }))
    }

    fn backward(&mut self, cache: &ConvBnCache, dy: &Tensor) -> Result<Tensor> {
        let dz = if self.relu {
            self.bn.backward(&cache.bn, &relu_backward(&cache.out, dy)?)?
        } else {
            self.bn.backward(&cache.bn, dy)?
        };
        Ok(self.conv.backward(&cache.conv, &dz)?)
    }

    fn named(&mut self, conv: &str, bn: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = scoped(conv, self.conv.named_params());
        v.extend(scoped(bn, self.bn.named_params()));
        v
    }

    fn buffers(&mut self, bn: &str) -> Vec<(String, &mut Tensor)> {
        scoped(bn, self.bn.named_buffers())
    }
}

/// Area-weighted resampling of `[B, C, H, W_in]` to `[B, C, 1, W_out]`:
/// rows are averaged and each output column averages the stretch of input
/// columns it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaResample {
    h_in: usize,
    w_in: usize,
    w_out: usize,
    /// Per output column, `(input column, weight)` pairs summing to one.
    taps: Vec<Vec<(usize, f64)>>,
}

impl AreaResample {
    pub fn new(h_in: usize, w_in: usize, w_out: usize) -> Self {
        let scale = w_in as f64 / w_out as f64;
        let taps = (0..w_out)
            .map(|j| {
                let (lo, hi) = (j as f64 * scale, (j + 1) as f64 * scale);
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(w_in);
                (first..last)
                    .filter_map(|i| {
                        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        (overlap > 0.0).then_some((i, overlap / scale))
                    })
                    .collect()
            })
            .collect();
        Self { h_in, w_in, w_out, taps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = x.dims4("resample input")?;
        if (h, w) != (self.h_in, self.w_in) {
            return Err(RfpError::Shape(format!(
                "resampler expects {}x{}, got {h}x{w}",
                self.h_in, self.w_in
            )));
        }
        let xd = x.data();
        let mut out = vec![0.0; b * c * self.w_out];
        let norm = 1.0 / h as f64;
        for (plane, o) in out.chunks_mut(self.w_out).enumerate() {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for (oj, taps) in o.iter_mut().zip(&self.taps) {
                let mut acc = 0.0;
                for row in src.chunks(w) {
                    acc += taps.iter().map(|&(i, wt)| wt * row[i]).sum::<f64>();
                }
                *oj = acc * norm;
            }
        }
        Ok(Tensor::new(&[b, c, 1, self.w_out], out)?)
    }

    pub fn backward(&self, dy: &Tensor) -> Result<Tensor> {
        let [b, c, _, wo] = dy.dims4("resample gradient")?;
        if wo != self.w_out {
            return Err(RfpError::Shape(format!("resampler gradient width {wo}")));
        }
        let (h, w) = (self.h_in, self.w_in);
        let norm = 1.0 / h as f64;
        let mut dx = vec![0.0; b * c * h * w];
        for (plane, g) in dy.data().chunks(wo).enumerate() {
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for row in dst.chunks_mut(w) {
                for (gj, taps) in g.iter().zip(&self.taps) {
                    for &(i, wt) in taps {
                        row[i] += gj * wt * norm;
                    }
                }
            }
        }
        Ok(Tensor::new(&[b, c, h, w], dx)?)
    }
}

#[derive(Debug, Clone)]
struct Branch {
    repr: Representation,
    layer: ConvBn,
    resample: Option<AreaResample>,
}

#[derive(Debug, Clone)]
struct BranchCache {
    layer: ConvBnCache,
}

impl Branch {
    fn new(repr: Representation, cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let [ci, h, w] = cfg.input_shape(repr);
        let kh = match repr {
            Representation::Iq => 2,
            Representation::Cfo | Representation::Fft => 1,
            Representation::Stft => 8,
        };
        let (ho, wo) = (h + 1 - kh, w + 1 - KERNEL_W);
        let resample = ((ho, wo) != (1, cfg.feature_width())).then(|| AreaResample::new(ho, wo, cfg.feature_width()));
        Ok(Self {
            repr,
            layer: ConvBn::new(ci, cfg.branch_channels, (kh, KERNEL_W), Padding::Valid, 1, true, rng)?,
            resample,
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BranchCache)> {
        let (y, layer) = self.layer.forward(x, mode)?;
        let y = match &self.resample {
            Some(r) => r.forward(&y)?,
            None => y,
        };
        Ok((y, BranchCache { layer }))
    }

    fn backward(&mut self, cache: &BranchCache, dy: &Tensor) -> Result<Tensor> {
        let dy = match &self.resample {
            Some(r) => r.backward(dy)?,
            None => dy.clone(),
        };
        self.layer.backward(&cache.layer, &dy)
    }
}

/// Spatial attention: channel-wise average and max maps pass through three
/// same-padded 3x3 convolutions and a sigmoid, giving a mask `M` that scales
/// every channel of the input.
#[derive(Debug, Clone)]
pub struct Attention {
    pub convs: [Conv2d; 3],
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Tensor,
    pool: rfp_nn::pool::ChannelPoolCache,
    convs: [ConvCache; 3],
    hidden: [Tensor; 2],
    /// The mask `M`, shape `[B, 1, H, W]`.
    pub mask: Tensor,
}

impl Attention {
    pub fn new(widths: [usize; 2], rng: &mut impl rand::Rng) -> Result<Self> {
        let conv = |ci, co, rng: &mut _| Conv2d::new(ci, co, (3, 3), (1, 1), Padding::Same, 1, rng);
        Ok(Self {
            convs: [conv(2, widths[0], rng)?, conv(widths[0], widths[1], rng)?, conv(widths[1], 1, rng)?],
        })
    }

    /// Returns `M ⊗ F` and the cache holding `M`.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let (avg, max, pool) = channel_pool(f)?;
        let pooled = Tensor::concat_channels(&[&avg, &max])?;
        let (z0, c0) = self.convs[0].forward(&pooled)?;
        let h0 = Activation::Relu.forward(&z0);
        let (z1, c1) = self.convs[1].forward(&h0)?;
        let h1 = Activation::Relu.forward(&z1);
        let (z2, c2) = self.convs[2].forward(&h1)?;
        let mask = Activation::Sigmoid.forward(&z2);
        let [b, c, h, w] = f.dims4("attention input")?;
        let plane = h * w;
        let md = mask.data();
        let mut out = f.data().to_vec();
        for bi in 0..b {
            let m = &md[bi * plane..(bi + 1) * plane];
            for ch in out[bi * c * plane..(bi + 1) * c * plane].chunks_mut(plane) {
                ch.iter_mut().zip(m).for_each(|(v, &mv)| *v *= mv);
            }
        }
        let refined = Tensor::new(f.shape(), out)?;
        Ok((
            refined,
            AttentionCache {
                input: f.clone(),
                pool,
                convs: [c0, c1, c2],
                hidden: [h0, h1],
                mask,
            },
        ))
    }

    /// Accumulates conv gradients and returns the gradient w.r.t. `F`.
    pub fn backward(&mut self, cache: &AttentionCache, dr: &Tensor) -> Result<Tensor> {
        let f = &cache.input;
        let [b, c, h, w] = f.dims4("attention input")?;
        let plane = h * w;
        let (fd, dd, md) = (f.data(), dr.data(), cache.mask.data());
        let mut df = vec![0.0; f.numel()];
        let mut dm = vec![0.0; b * plane];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * plane;
                for p in 0..plane {
                    df[o + p] = dd[o + p] * md[bi * plane + p];
                    dm[bi * plane + p] += dd[o + p] * fd[o + p];
                }
            }
        }
        let dm = Tensor::new(cache.mask.shape(), dm)?;
        let dz2 = Activation::Sigmoid.backward(&cache.mask, &dm)?;
        let dh1 = self.convs[2].backward(&cache.convs[2], &dz2)?;
        let dz1 = relu_backward(&cache.hidden[1], &dh1)?;
        let dh0 = self.convs[1].backward(&cache.convs[1], &dz1)?;
        let dz0 = relu_backward(&cache.hidden[0], &dh0)?;
        let dpooled = self.convs[0].backward(&cache.convs[0], &dz0)?;
        let parts = dpooled.split_channels(&[1, 1])?;
        let dpool = channel_pool_backward(&cache.pool, &parts[0], &parts[1])?;
        df.iter_mut().zip(dpool.data()).for_each(|(a, b)| *a += b);
        Ok(Tensor::new(f.shape(), df)?)
    }
}

impl Module for Attention {
    fn named_params(&mut self) -> Vec<(String, &mut Tensor)> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| scoped(&format!("conv{i}"), c.named_params()))
            .collect()
    }
}

/// Concatenates refined branch maps along channels, in branch order.
pub fn fuse(maps: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::concat_channels(maps)?)
}

/// Bottleneck residual block whose 3x3 stage is a grouped convolution.
#[derive(Debug, Clone)]
struct ResNeXt {
    reduce: ConvBn,
    grouped: ConvBn,
    expand: ConvBn,
    shortcut: ConvBn,
}

#[derive(Debug, Clone)]
struct ResNeXtCache {
    reduce: ConvBnCache,
    grouped: ConvBnCache,
    expand: ConvBnCache,
    shortcut: ConvBnCache,
    out: Tensor,
}

impl ResNeXt {
    fn new(ci: usize, cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let (m, o) = (cfg.bottleneck, cfg.block_out);
        Ok(Self {
            reduce: ConvBn::new(ci, m, (1, 1), Padding::Valid, 1, true, rng)?,
            grouped: ConvBn::new(m, m, (3, 3), Padding::Same, cfg.groups, true, rng)?,
            expand: ConvBn::new(m, o, (1, 1), Padding::Valid, 1, false, rng)?,
            shortcut: ConvBn::new(ci, o, (1, 1), Padding::Valid, 1, false, rng)?,
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ResNeXtCache)> {
        let (a, reduce) = self.reduce.forward(x, mode)?;
        let (g, grouped) = self.grouped.forward(&a, mode)?;
        let (e, expand) = self.expand.forward(&g, mode)?;
        let (s, shortcut) = self.shortcut.forward(x, mode)?;
        let out = Activation::Relu.forward(&e.add(&s)?);
        Ok((
            out.clone(),
            ResNeXtCache {
                reduce,
                grouped,
                expand,
                shortcut,
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &ResNeXtCache, dy: &Tensor) -> Result<Tensor> {
        let dsum = relu_backward(&cache.out, dy)?;
        let dx_short = self.shortcut.backward(&cache.shortcut, &dsum)?;
        let dg = self.expand.backward(&cache.expand, &dsum)?;
        let da = self.grouped.backward(&cache.grouped, &dg)?;
        let dx = self.reduce.backward(&cache.reduce, &da)?;
        Ok(dx.add(&dx_short)?)
    }

    fn named_params(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.reduce.named("reduce", "reduce_bn");
        v.extend(self.grouped.named("grouped", "grouped_bn"));
        v.extend(self.expand.named("expand", "expand_bn"));
        v.extend(self.shortcut.named("shortcut", "shortcut_bn"));
        v
    }

    fn named_buffers(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.reduce.buffers("reduce_bn");
        v.extend(self.grouped.buffers("grouped_bn"));
        v.extend(self.expand.buffers("expand_bn"));
        v.extend(self.shortcut.buffers("shortcut_bn"));
        v
    }
}

/// The output layer starts at this fraction of the He-uniform scale.
const OUTPUT_INIT_SCALE: f64 = 0.2;

#[derive(Debug, Clone)]
struct Head {
    pooling: HeadPooling,
    fc: [Dense; 2],
    bn: [BatchNorm; 2],
    out: Dense,
}

#[derive(Debug, Clone)]
struct HeadCache {
    spatial: [usize; 3],
    fc: [DenseCache; 2],
    bn: [BnCache; 2],
    hidden: [Tensor; 2],
    out: DenseCache,
}

impl Head {
    fn new(cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let inputs = match cfg.head_pooling {
            HeadPooling::GlobalAverage => cfg.block_out,
            HeadPooling::Flatten => cfg.block_out * cfg.feature_width(),
        };
        let d = cfg.dense_width;
        Self {
            pooling: cfg.head_pooling,
            fc: [Dense::new(inputs, d, rng), Dense::new(d, d, rng)],
            bn: [BatchNorm::new(d), BatchNorm::new(d)],
            out: {
                let mut out = Dense::new(d, cfg.n_classes, rng);
                out.weight.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
                out
            },
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, HeadCache)> {
        let [b, c, h, w] = x.dims4("head input")?;
        let mut v = match self.pooling {
            HeadPooling::GlobalAverage => global_avg_pool(x)?,
            HeadPooling::Flatten => x.clone().reshape(&[b, c * h * w])?,
        };
        let mut fc = Vec::with_capacity(2);
        let mut bn = Vec::with_capacity(2);
        let mut hidden = Vec::with_capacity(2);
        for i in 0..2 {
            let (z, fcache) = self.fc[i].forward(&v)?;
            let (n, bcache) = bn_forward(&mut self.bn[i], &z, mode)?;
            v = Activation::Relu.forward(&n);
            fc.push(fcache);
            bn.push(bcache);
            hidden.push(v.clone());
        }
        let (logits, out) = self.out.forward(&v)?;
        Ok((
            logits,
            HeadCache {
                spatial: [c, h, w],
                fc: pair(fc),
                bn: pair(bn),
                hidden: pair(hidden),
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &HeadCache, dlogits: &Tensor) -> Result<Tensor> {
        let mut d = self.out.backward(&cache.out, dlogits)?;
        for i in (0..2).rev() {
            let dn = relu_backward(&cache.hidden[i], &d)?;
            let dz = self.bn[i].backward(&cache.bn[i], &dn)?;
            d = self.fc[i].backward(&cache.fc[i], &dz)?;
        }
        let [c, h, w] = cache.spatial;
        Ok(match self.pooling {
            HeadPooling::GlobalAverage => global_avg_pool_backward(&d, h, w)?,
            HeadPooling::Flatten => {
                let b = d.shape()[0];
                d.reshape(&[b, c, h, w])?
            }
        })
    }

    fn named_params(&mut self) -> Vec<(String, &mut Tensor)> {
        let [fc0, fc1] = &mut self.fc;
        let [bn0, bn1] = &mut self.bn;
        let mut v = scoped("fc0", fc0.named_params());
        v.extend(scoped("fc0_bn", bn0.named_params()));
        v.extend(scoped("fc1", fc1.named_params()));
        v.extend(scoped("fc1_bn", bn1.named_params()));
        v.extend(scoped("out", self.out.named_params()));
        v
    }

    fn named_buffers(&mut self) -> Vec<(String, &mut Tensor)> {
        let [bn0, bn1] = &mut self.bn;
        let mut v = scoped("fc0_bn", bn0.named_buffers());
        v.extend(scoped("fc1_bn", bn1.named_buffers()));
        v
    }
}

/// Intermediate results of a forward pass needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ModelCache {
    branches: Vec<BranchCache>,
    /// Per-branch attention caches (empty without attention).
    pub attention: Vec<AttentionCache>,
    /// Per-branch maps after attention, before fusion.
    pub refined: Vec<Tensor>,
    block: ResNeXtCache,
    head: HeadCache,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    branches: Vec<Branch>,
    pub attention: Option<Attention>,
    block: ResNeXt,
    head: Head,
}

impl Model {
    /// Initialises every weight from the `Init` stream of `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init, 0);
        let branches = config
            .kind
            .branches()
            .iter()
            .map(|&r| Branch::new(r, &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let attention = if config.kind.uses_attention() {
            Some(Attention::new(config.attention_widths, &mut rng)?)
        } else {
            None
        };
        let block = ResNeXt::new(branches.len() * config.branch_channels, &config, &mut rng)?;
        let head = Head::new(&config, &mut rng);
        Ok(Self {
            config,
            branches,
            attention,
            block,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    fn check_input(&self, x: &InputBatch) -> Result<()> {
        for br in &self.branches {
            let t = x.get(br.repr).ok_or_else(|| {
                RfpError::Usage(format!("{} needs the {} representation", self.config.kind, br.repr.name()))
            })?;
            let [c, h, w] = self.config.input_shape(br.repr);
            if t.shape() != [x.batch, c, h, w] {
                return Err(RfpError::Shape(format!(
                    "{} input {:?}, expected {:?}",
                    br.repr.name(),
                    t.shape(),
                    [x.batch, c, h, w]
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &InputBatch, mode: Mode) -> Result<(Tensor, ModelCache)> {
        self.check_input(x)?;
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        let mut att_caches = Vec::new();
        let mut refined = Vec::with_capacity(self.branches.len());
        for br in &mut self.branches {
            let input = x.get(br.repr).expect("checked above");
            let (f, bc) = br.forward(input, mode)?;
            branch_caches.push(bc);
            match &self.attention {
                Some(att) => {
                    let (r, ac) = att.forward(&f)?;
                    att_caches.push(ac);
                    refined.push(r);
                }
                None => refined.push(f),
            }
        }
        let fused = fuse(&refined.iter().collect::<Vec<_>>())?;
        let (fb, block) = self.block.forward(&fused, mode)?;
        let (logits, head) = self.head.forward(&fb, mode)?;
        Ok((
            logits,
            ModelCache {
                branches: branch_caches,
                attention: att_caches,
                refined,
                block,
                head,
            },
        ))
    }

    /// Logits in inference mode.
    pub fn predict(&mut self, x: &InputBatch) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Infer)?.0)
    }

    /// Accumulates parameter gradients for upstream logit gradient `dlogits`.
    /// Returns the gradient with respect to each branch input.
    pub fn backward(&mut self, cache: &ModelCache, dlogits: &Tensor) -> Result<Vec<Tensor>> {
        let dfb = self.head.backward(&cache.head, dlogits)?;
        let dfused = self.block.backward(&cache.block, &dfb)?;
        let sizes = vec![self.config.branch_channels; self.branches.len()];
        let drefined = dfused.split_channels(&sizes)?;
        let mut dinputs = Vec::with_capacity(self.branches.len());
        for (i, br) in self.branches.iter_mut().enumerate() {
            let df = match &mut self.attention {
                Some(att) => att.backward(&cache.attention[i], &drefined[i])?,
                None => drefined[i].clone(),
            };
            dinputs.push(br.backward(&cache.branches[i], &df)?);
        }
        Ok(dinputs)
    }

    /// Train-mode forward, mean cross-entropy and backward. Gradients are accumulated.
    pub fn loss_and_backward(&mut self, x: &InputBatch, labels: &[usize]) -> Result<f64> {
        let (logits, cache) = self.forward(x, Mode::Train)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        self.backward(&cache, &dlogits)?;
        Ok(loss)
    }

    pub fn header(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.config)?)
    }

    pub fn to_checkpoint(&mut self) -> Result<Checkpoint> {
        let header = self.header()?;
        Ok(Checkpoint::from_module(header, self))
    }

    /// Rebuilds a model from a checkpoint, taking the architecture from its header.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ckpt.header)?;
        let mut model = Self::new(config)?;
        ckpt.load_into(&mut model)?;
        Ok(model)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for Model {
    fn named_params(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for br in &mut self.branches {
            let prefix = format!("branch.{}", br.repr.name());
            v.extend(scoped(&prefix, br.layer.named("conv", "bn")));
        }
        if let Some(att) = &mut self.attention {
            v.extend(scoped("attention", att.named_params()));
        }
        v.extend(scoped("block", self.block.named_params()));
        v.extend(scoped("head", self.head.named_params()));
        v
    }

    fn named_buffers(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for br in &mut self.branches {
            let prefix = format!("branch.{}", br.repr.name());
            v.extend(scoped(&prefix, br.layer.buffers("bn")));
        }
        v.extend(scoped("block", self.block.named_buffers()));
        v.extend(scoped("head", self.head.named_buffers()));
        v
    }
}

/// Scalar graph over a whole model: train-mode cross-entropy of a fixed batch.
/// Checks every parameter and every branch input. Biases are drawn away from
/// zero.
pub struct ModelProbe {
    pub model: Model,
    pub input: InputBatch,
    pub labels: Vec<usize>,
}

impl ModelProbe {
    pub fn new(config: ModelConfig, batch: usize) -> Result<Self> {
        use rand::Rng;
        let mut rng = stream_rng(config.seed, Stream::Init, 1);
        let mut input = InputBatch::empty(batch);
        for &r in config.kind.branches() {
            let [c, h, w] = config.input_shape(r);
            *input.slot(r) = Some(Tensor::from_fn(&[batch, c, h, w], |_| rng.gen_range(-1.0..1.0)));
        }
        let labels = (0..batch).map(|i| i % config.n_classes).collect();
        let mut model = Model::new(config)?;
        // zero biases behind a dead relu channel would sit exactly on the kink
        for (name, p) in model.named_params() {
            if name.ends_with(".bias") {
                for v in p.data_mut() {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    *v = sign * rng.gen_range(0.05..0.5);
                }
            }
        }
        Ok(Self { model, input, labels })
    }
}

impl rfp_nn::ScalarGraph for ModelProbe {
    fn run(&mut self, backward: bool) -> rfp_nn::Result<Tensor> {
        let wrap = |e: RfpError| rfp_nn::NnError::Usage(e.to_string());
        let (logits, cache) = self.model.forward(&self.input, Mode::Train).map_err(wrap)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &self.labels)?;
        if backward {
            let dinputs = self.model.backward(&cache, &dlogits).map_err(wrap)?;
            for (&r, d) in self.model.config.kind.branches().iter().zip(dinputs) {
                let t = self.input.slot(r).as_mut().expect("probe input present");
                t.grad_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
            }
        }
        Ok(Tensor::scalar(loss))
    }

    fn tensors(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.model.params();
        let InputBatch { iq, cfo, fft, stft, .. } = &mut self.input;
        v.extend([iq, cfo, fft, stft].into_iter().filter_map(Option::as_mut));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> InputBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = InputBatch::empty(batch);
        for r in Representation::ALL {
            let [c, h, w] = cfg.input_shape(r);
            *x.slot(r) = Some(Tensor::from_fn(&[batch, c, h, w], |_| rng.gen_range(-1.0..1.0)));
        }
        x
    }

    #[test]
    fn full_branch_outputs_are_canonical() {
        let cfg = ModelConfig::full(ModelKind::Mcaff, 4);
        let mut model = Model::new(cfg.clone()).unwrap();
        let x = random_input(&cfg, 2, 1);
        let (logits, cache) = model.forward(&x, Mode::Train).unwrap();
        assert_eq!(logits.shape(), [2, 4]);
        assert_eq!(cache.refined.len(), 4);
        for r in &cache.refined {
            assert_eq!(r.shape(), [2, 128, 1, 154]);
        }
        assert_eq!(cache.block.out.shape(), [2, 256, 1, 154]);
    }

    #[test]
    fn zero_attention_weights_halve_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut att = Attention::new([16, 16], &mut rng).unwrap();
        for p in att.params() {
            p.data_mut().fill(0.0);
        }
        let f = Tensor::from_fn(&[2, 5, 1, 9], |_| rng.gen_range(-3.0..3.0));
        let (r, cache) = att.forward(&f).unwrap();
        assert!(cache.mask.data().iter().all(|&m| m == 0.5));
        let half = Tensor::from_fn(f.shape(), |i| 0.5 * f.data()[i]);
        assert!(r.max_abs_diff(&half) < 1e-15);
    }

    #[test]
    fn refined_never_exceeds_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = Attention::new([4, 4], &mut rng).unwrap();
        let f = Tensor::from_fn(&[3, 6, 2, 7], |_| rng.gen_range(-10.0..10.0));
        let (r, cache) = att.forward(&f).unwrap();
        assert!(cache.mask.data().iter().all(|&m| m > 0.0 && m < 1.0));
        assert!(r.data().iter().zip(f.data()).all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn single_attention_stack() {
        let mut model = Model::new(ModelConfig::desk(ModelKind::Mcaff, 3)).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let att: Vec<_> = names.iter().filter(|n| n.starts_with("attention.")).collect();
        assert_eq!(att.len(), 6);
        let branch_convs = names
            .iter()
            .filter(|n| n.starts_with("branch.") && n.ends_with(".conv.weight"))
            .count();
        assert_eq!(branch_convs, 4);
        let noattn = Model::new(ModelConfig::desk(ModelKind::McaffNoattn, 3)).unwrap();
        assert!(noattn.attention.is_none());
    }

    #[test]
    fn fusion_order_and_mismatch() {
        let a = Tensor::full(&[1, 2, 1, 3], 1.0);
        let b = Tensor::full(&[1, 2, 1, 3], 2.0);
        let fused = fuse(&[&a, &b]).unwrap();
        assert_eq!(fused.shape(), [1, 4, 1, 3]);
        assert_eq!(&fused.data()[..6], a.data());
        let c = Tensor::full(&[1, 2, 1, 4], 2.0);
        assert!(matches!(fuse(&[&a, &c]), Err(RfpError::Nn(rfp_nn::NnError::Shape(_)))));
    }

    #[test]
    fn baselines_are_smaller() {
        let mut full = Model::new(ModelConfig::full(ModelKind::Mcaff, 8)).unwrap();
        let n = full.param_count();
        for kind in [ModelKind::Miq, ModelKind::Mcfo, ModelKind::Mfft, ModelKind::Mstft] {
            let mut m = Model::new(ModelConfig::full(kind, 8)).unwrap();
            assert!(m.param_count() < n, "{kind}");
            assert_eq!(m.block.shortcut.conv.in_channels(), 128);
        }
        assert_eq!(full.block.shortcut.conv.in_channels(), 512);
    }

    #[test]
    fn missing_representation_is_usage_error() {
        let cfg = ModelConfig::tiny(ModelKind::Mfft, 3);
        let mut model = Model::new(cfg.clone()).unwrap();
        let mut x = random_input(&cfg, 2, 4);
        x.fft = None;
        assert!(matches!(model.predict(&x), Err(RfpError::Usage(_))));
    }

    #[test]
    fn permutation_equivariance_in_inference() {
        let cfg = ModelConfig::tiny(ModelKind::Mcaff, 3);
        let mut model = Model::new(cfg.clone()).unwrap();
        let x = random_input(&cfg, 5, 5);
        let perm = [3, 0, 4, 1, 2];
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x.select(&perm)).unwrap();
        assert!(a.select_rows(&perm).max_abs_diff(&b) < 1e-12);
        assert_eq!(model.predict(&x).unwrap(), a);
    }

    #[test]
    fn resampler_properties() {
        let r = AreaResample::new(2, 114, 154);
        for taps in &r.taps {
            assert!((taps.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let x = Tensor::full(&[1, 3, 2, 114], 0.7);
        let y = r.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 3, 1, 154]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        // identity when sizes already match
        let id = AreaResample::new(1, 5, 5);
        let x = Tensor::from_fn(&[1, 1, 1, 5], |i| i as f64);
        assert_eq!(id.forward(&x).unwrap(), x);
        // downsampling by two averages neighbouring pairs
        let half = AreaResample::new(1, 4, 2);
        let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        assert_eq!(half.forward(&x).unwrap().data(), [2.0, 7.0]);
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let cfg = ModelConfig::tiny(ModelKind::Mcaff, 3).with_seed(9);
        let mut model = Model::new(cfg.clone()).unwrap();
        let x = random_input(&cfg, 4, 6);
        model.forward(&x, Mode::Train).unwrap();
        let ckpt = model.to_checkpoint().unwrap();
        let mut restored = Model::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
        assert_eq!(restored.predict(&x).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = ModelConfig {
            groups: 3,
            ..ModelConfig::desk(ModelKind::Mcaff, 4)
        };
        assert!(matches!(Model::new(cfg), Err(RfpError::Usage(_))));
        assert!("resnet".parse::<ModelKind>().is_err());
        assert_eq!("mcaff_noattn".parse::<ModelKind>().unwrap(), ModelKind::McaffNoattn);
    }

    #[test]
    fn resnext_with_silent_main_path_is_projected_shortcut() {
        let cfg = ModelConfig::tiny(ModelKind::Mcaff, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ci = 4 * cfg.branch_channels;
        let mut block = ResNeXt::new(ci, &cfg, &mut rng).unwrap();
        for stage in [&mut block.reduce, &mut block.grouped, &mut block.expand] {
            stage.conv.weight.data_mut().fill(0.0);
        }
        // each output channel sums the input channels
        block.shortcut.conv.weight.data_mut().fill(1.0);
        let x = Tensor::from_fn(&[3, ci, 1, 5], |_| rng.gen_range(-1.0..1.0));
        let (out, _) = block.forward(&x, Mode::Train).unwrap();

        let proj = block.shortcut.conv.clone();
        let mut bn = BatchNorm::new(cfg.block_out);
        let p = proj.forward(&x).unwrap().0;
        let expected = Activation::Relu.forward(&bn.forward(&p, Mode::Train).unwrap().0);
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn grouped_stage_is_sum_over_groups() {
        let cfg = ModelConfig::desk(ModelKind::Mcaff, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let block = ResNeXt::new(4 * cfg.branch_channels, &cfg, &mut rng).unwrap();
        let conv = &block.grouped.conv;
        let m = cfg.bottleneck;
        let per = m / cfg.groups;
        let x = Tensor::from_fn(&[2, m, 1, 6], |_| rng.gen_range(-1.0..1.0));
        let fast = conv.forward(&x).unwrap().0;
        // transformation i sees only its own input slice and writes only its own output slice
        let mut slow = Tensor::zeros(fast.shape());
        for g in 0..cfg.groups {
            let mut w = Tensor::zeros(&[m, m, 3, 3]);
            for o in g * per..(g + 1) * per {
                for i in 0..per {
                    for k in 0..9 {
                        w.data_mut()[((o * m) + g * per + i) * 9 + k] = conv.weight.data()[(o * per + i) * 9 + k];
                    }
                }
            }
            let dense = Conv2d::from_weights(w, Tensor::zeros(&[m]), (1, 1), Padding::Same, 1).unwrap();
            slow = slow.add(&dense.forward(&x).unwrap().0).unwrap();
        }
        let bias = Tensor::from_fn(fast.shape(), |i| conv.bias.data()[(i / 6) % m]);
        slow = slow.add(&bias).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }
}
