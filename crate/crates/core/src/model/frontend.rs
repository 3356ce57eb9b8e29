use super::config::{FRONTEND_KERNEL, FRONTEND_STRIDES};
use super::ModelError;
use crate::autodiff::{Graph, Var};
use crate::conditioning::linear;

pub struct FrontendParams {
    pub conv: [(Var, Var); 2],
    pub proj: (Var, Var),
}

/// `true` at padded positions of a `[B, T, w]` tensor.
pub fn padding_fill(lengths: &[usize], t: usize, w: usize) -> Vec<bool> {
    let mut fill = Vec::with_capacity(lengths.len() * t * w);
    for &n in lengths {
        for ti in 0..t {
            fill.extend(std::iter::repeat_n(ti >= n, w));
        }
    }
    fill
}

/// Kernel-3 convolution with stride `stride` and one frame of zero padding
/// on each side, written as an unfold followed by a matrix product. Output
/// frame `i` sees input frames `stride·i − 1 ..= stride·i + 1`.
fn conv_block(
    g: &mut Graph,
    x: Var,
    lengths: &[usize],
    stride: usize,
    w: Var,
    b: Var,
) -> Result<(Var, Vec<usize>), ModelError> {
    let s = g.shape(x).to_vec();
    let (batch, t, f) = (s[0], s[1], s[2]);
    let t_out = t.div_ceil(stride);
    let mut index = Vec::with_capacity(batch * t_out * FRONTEND_KERNEL * f);
    for bi in 0..batch {
        for i in 0..t_out {
            for k in 0..FRONTEND_KERNEL {
                let src = (stride * i + k).checked_sub(1).filter(|&src| src < t);
                index.extend((0..f).map(|j| src.map(|src| (bi * t + src) * f + j)));
            }
        }
    }
    let unfolded = g.gather(x, &index, &[batch, t_out, FRONTEND_KERNEL * f])?;
    let y = linear(g, unfolded, w, b)?;
    let y = g.relu(y);
    let out_lengths: Vec<usize> = lengths.iter().map(|n| n.div_ceil(stride)).collect();
    let c = g.shape(y)[2];
    let y = g.masked_fill(y, &padding_fill(&out_lengths, t_out, c), 0.0)?;
    Ok((y, out_lengths))
}

/// Two strided convolutions (strides 2 and 3) with ReLU, then a linear map
/// to `d_model`. Padded frames are zeroed before every convolution so they
/// never reach real outputs. Returns the `[B, ⌈T/6⌉, d]` output and the
/// subsampled lengths.
pub fn conv_frontend(
    g: &mut Graph,
    features: Var,
    lengths: &[usize],
    p: &FrontendParams,
) -> Result<(Var, Vec<usize>), ModelError> {
    let s = g.shape(features).to_vec();
    if s.len() != 3 || s[0] != lengths.len() {
        return Err(ModelError::Config(format!(
            "front-end input must be [B, T, F] with B = {}, got {s:?}",
            lengths.len()
        )));
    }
    let min: usize = FRONTEND_STRIDES.iter().product();
    for (i, &n) in lengths.iter().enumerate() {
        if n < min || n > s[1] {
            return Err(ModelError::TooShort {
                index: i,
                frames: n,
                min,
            });
        }
    }
    let mut x = g.masked_fill(features, &padding_fill(lengths, s[1], s[2]), 0.0)?;
    let mut lens = lengths.to_vec();
    for (stride, (w, b)) in FRONTEND_STRIDES.iter().zip(p.conv) {
        (x, lens) = conv_block(g, x, &lens, *stride, w, b)?;
    }
    let y = linear(g, x, p.proj.0, p.proj.1)?;
    let ys = g.shape(y).to_vec();
    let y = g.masked_fill(y, &padding_fill(&lens, ys[1], ys[2]), 0.0)?;
    Ok((y, lens))
}
