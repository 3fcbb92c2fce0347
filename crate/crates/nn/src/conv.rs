//! 2-D (grouped) convolution as cross-correlation, lowered to im2col + GEMM.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, Layout};
use crate::module::{he_uniform, Module};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output extent `ceil(in / stride)`, extra padding goes after.
    Same,
}

/// Convolution layer. `weight` is `[out, in / groups, kh, kw]`, `bias` is `[out]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: Padding,
    pub groups: usize,
}

/// Saved input for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    input: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    pl: usize,
    ho: usize,
    wo: usize,
    groups: usize,
}

impl Geometry {
    fn cig(&self) -> usize {
        self.ci / self.groups
    }
    fn cog(&self) -> usize {
        self.co / self.groups
    }
    fn k(&self) -> usize {
        self.cig() * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pt == 0 && self.pl == 0
    }
}

fn same_pad(len: usize, k: usize, s: usize) -> usize {
    let out = len.div_ceil(s);
    ((out - 1) * s + k).saturating_sub(len)
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return shape_err(format!(
                "channels {in_channels}->{out_channels} not divisible by {groups} groups"
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(NnError::Usage("stride must be >= 1".into()));
        }
        let cig = in_channels / groups;
        let fan_in = cig * kernel.0 * kernel.1;
        Ok(Self {
            weight: he_uniform(&[out_channels, cig, kernel.0, kernel.1], fan_in, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
            groups,
        })
    }

    /// Builds a layer from explicit weights, validating shapes.
    pub fn from_weights(
        weight: Tensor,
        bias: Tensor,
        stride: (usize, usize),
        padding: Padding,
        groups: usize,
    ) -> Result<Self> {
        let [co, _, _, _] = weight.dims4("conv weight")?;
        if bias.shape() != [co] {
            return shape_err(format!("bias {:?} for {co} output channels", bias.shape()));
        }
        if groups == 0 || co % groups != 0 {
            return shape_err(format!("{co} output channels not divisible by {groups} groups"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(NnError::Usage("stride must be >= 1".into()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Output extents `(h', w')` for an `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let [_, _, kh, kw] = self.weight.dims4("conv weight")?;
        let (sh, sw) = self.stride;
        let (ph, pw) = match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => (same_pad(h, kh, sh), same_pad(w, kw, sw)),
        };
        if h + ph < kh || w + pw < kw {
            return shape_err(format!("kernel {kh}x{kw} does not fit input {h}x{w}"));
        }
        Ok(((h + ph - kh) / sh + 1, (w + pw - kw) / sw + 1))
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let [b, ci, h, w] = x.dims4("conv input")?;
        let [co, cig, kh, kw] = self.weight.dims4("conv weight")?;
        if cig * self.groups != ci {
            return shape_err(format!(
                "conv expects {} input channels, got {ci}",
                cig * self.groups
            ));
        }
        let (sh, sw) = self.stride;
        let (pt, pl) = match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => (same_pad(h, kh, sh) / 2, same_pad(w, kw, sw) / 2),
        };
        let (ho, wo) = self.output_extent(h, w)?;
        Ok(Geometry {
            b,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            sh,
            sw,
            pt,
            pl,
            ho,
            wo,
            groups: self.groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let g = self.geometry(x)?;
        let (k, how, cog) = (g.k(), g.hw_out(), g.cog());
        let mut out = vec![0.0; g.b * g.co * how];
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { k * how }];
        let wd = self.weight.data();
        for bi in 0..g.b {
            for gi in 0..g.groups {
                let xin = &x.data()[(bi * g.ci + gi * g.cig()) * g.h * g.w..];
                let cols: &[f64] = if g.is_pointwise() {
                    &xin[..k * how]
                } else {
                    im2col(xin, &g, &mut col);
                    &col
                };
                let o = &mut out[(bi * g.co + gi * cog) * how..(bi * g.co + (gi + 1) * cog) * how];
                gemm(cog, k, how, &wd[gi * cog * k..], Layout::N, cols, Layout::N, 0.0, o);
            }
            let bias = self.bias.data();
            for (c, chunk) in out[bi * g.co * how..(bi + 1) * g.co * how]
                .chunks_mut(how)
                .enumerate()
            {
                chunk.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
        let y = Tensor::new(&[g.b, g.co, g.ho, g.wo], out)?;
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor) -> Result<Tensor> {
        let x = &cache.input;
        let g = self.geometry(x)?;
        if dy.shape() != [g.b, g.co, g.ho, g.wo] {
            return shape_err(format!("conv backward: dy {:?}", dy.shape()));
        }
        let (k, how, cog) = (g.k(), g.hw_out(), g.cog());
        let mut dx = vec![0.0; x.numel()];
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { k * how }];
        let mut dcol = vec![0.0; k * how];
        let wd = self.weight.data().to_vec();
        let dyd = dy.data();
        {
            let db = self.bias.grad_mut();
            for bi in 0..g.b {
                for (c, chunk) in dyd[bi * g.co * how..(bi + 1) * g.co * how]
                    .chunks(how)
                    .enumerate()
                {
                    db[c] += chunk.iter().sum::<f64>();
                }
            }
        }
        let dw = self.weight.grad_mut();
        for bi in 0..g.b {
            for gi in 0..g.groups {
                let xoff = (bi * g.ci + gi * g.cig()) * g.h * g.w;
                let xin = &x.data()[xoff..];
                let cols: &[f64] = if g.is_pointwise() {
                    &xin[..k * how]
                } else {
                    im2col(xin, &g, &mut col);
                    &col
                };
                let dyg = &dyd[(bi * g.co + gi * cog) * how..];
                gemm(cog, how, k, dyg, Layout::N, cols, Layout::T, 1.0, &mut dw[gi * cog * k..]);
                if g.is_pointwise() {
                    let dxs = &mut dx[xoff..xoff + k * how];
                    gemm(k, cog, how, &wd[gi * cog * k..], Layout::T, dyg, Layout::N, 1.0, dxs);
                } else {
                    gemm(k, cog, how, &wd[gi * cog * k..], Layout::T, dyg, Layout::N, 0.0, &mut dcol);
                    col2im(&dcol, &g, &mut dx[xoff..]);
                }
            }
        }
        Tensor::new(x.shape(), dx)
    }
}

impl Module for Conv2d {
    fn named_params(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".to_string(), &mut self.weight),
            ("bias".to_string(), &mut self.bias),
        ]
    }
}

/// Fills `col` (`k x ho*wo`) for the channel slice starting at `x[0]`.
fn im2col(x: &[f64], g: &Geometry, col: &mut [f64]) {
    let how = g.hw_out();
    let mut row = 0;
    for c in 0..g.cig() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut col[row * how..(row + 1) * how];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + i) as isize - g.pt as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.sw + j) as isize - g.pl as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `col` back into the channel slice starting at `dx[0]`.
fn col2im(col: &[f64], g: &Geometry, dx: &mut [f64]) {
    let how = g.hw_out();
    let mut row = 0;
    for c in 0..g.cig() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &col[row * how..(row + 1) * how];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + i) as isize - g.pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + j) as isize - g.pl as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
