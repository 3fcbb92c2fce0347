//! Pooling across channels and over the spatial extent.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Argmax channel per `(batch, pixel)`, saved for the max-pool backward pass.
#[derive(Debug, Clone)]
pub struct ChannelPoolCache {
    argmax: Vec<usize>,
    channels: usize,
}

/// Mean and max over the channel axis of `[B, C, H, W]`, each `[B, 1, H, W]`.
///
/// Max ties resolve to the lowest channel index.
pub fn channel_pool(x: &Tensor) -> Result<(Tensor, Tensor, ChannelPoolCache)> {
    let [b, c, h, w] = x.dims4("channel pool")?;
    let hw = h * w;
    let xd = x.data();
    let mut avg = vec![0.0; b * hw];
    let mut max = vec![f64::NEG_INFINITY; b * hw];
    let mut argmax = vec![0usize; b * hw];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                let o = bi * hw + p;
                avg[o] += v;
                if v > max[o] {
                    max[o] = v;
                    argmax[o] = ci;
                }
            }
        }
    }
    avg.iter_mut().for_each(|v| *v /= c as f64);
    Ok((
        Tensor::new(&[b, 1, h, w], avg)?,
        Tensor::new(&[b, 1, h, w], max)?,
        ChannelPoolCache { argmax, channels: c },
    ))
}

/// Input gradient of [`channel_pool`] from the gradients of both outputs.
pub fn channel_pool_backward(
    cache: &ChannelPoolCache,
    d_avg: &Tensor,
    d_max: &Tensor,
) -> Result<Tensor> {
    let [b, one, h, w] = d_avg.dims4("channel pool backward")?;
    if one != 1 || d_max.shape() != d_avg.shape() {
        return shape_err("channel pool backward: gradient shapes disagree");
    }
    let c = cache.channels;
    let hw = h * w;
    let mut dx = vec![0.0; b * c * hw];
    let inv = 1.0 / c as f64;
    for bi in 0..b {
        for p in 0..hw {
            let o = bi * hw + p;
            let ga = d_avg.data()[o] * inv;
            for ci in 0..c {
                dx[(bi * c + ci) * hw + p] += ga;
            }
            dx[(bi * c + cache.argmax[o]) * hw + p] += d_max.data()[o];
        }
    }
    Tensor::new(&[b, c, h, w], dx)
}

/// Global average over `H x W`: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4("global pool")?;
    let hw = h * w;
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[b, c], data)
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [b, c] = dy.dims2("global pool backward")?;
    let hw = h * w;
    let mut dx = Vec::with_capacity(b * c * hw);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::new(&[b, c, h, w], dx)
}
