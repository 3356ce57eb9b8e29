use super::ModelError;
use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::conditioning::{linear, residual_adapter, AdapterParams};

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal table: `pe[t][2i] = sin(t / 10000^(2i/d))`,
/// `pe[t][2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for j in 0..d {
            let angle = pos as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64);
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("non-empty table")
}

pub struct LayerParams {
    pub ln1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub ln2: (Var, Var),
    pub ffn1: (Var, Var),
    pub ffn2: (Var, Var),
    pub adapter: Option<AdapterParams>,
}

/// Key/value prompts prepended to one layer's attention.
pub struct PrefixKv {
    /// `[B, P, d]` each.
    pub keys: Var,
    pub values: Var,
    /// Give the prompt keys zero attention weight.
    pub mask_keys: bool,
}

/// `[B, S, H·dh]` → `[B·H, S, dh]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let (b, len, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let mut index = Vec::with_capacity(b * len * d);
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..len {
                let base = (bi * len + t) * d + h * dh;
                index.extend((base..base + dh).map(Some));
            }
        }
    }
    g.gather(x, &index, &[b * heads, len, dh])
}

/// `[B·H, S, dh]` → `[B, S, H·dh]`.
fn merge_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let (bh, len, dh) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let mut index = Vec::with_capacity(bh * len * dh);
    for bi in 0..b {
        for t in 0..len {
            for h in 0..heads {
                let base = ((bi * heads + h) * len + t) * dh;
                index.extend((base..base + dh).map(Some));
            }
        }
    }
    g.gather(x, &index, &[b, len, heads * dh])
}

/// Multi-head scaled dot-product self-attention over `x` (`[B, S, d]`).
/// `valid[b·S + s]` marks real key positions; invalid keys are filled with
/// `−∞` before the softmax. Prefix prompts, when given, are extra keys and
/// values in front of the sequence; queries stay the sequence positions.
pub fn self_attention(
    g: &mut Graph,
    x: Var,
    valid: &[bool],
    p: &LayerParams,
    heads: usize,
    prefix: Option<&PrefixKv>,
) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let (b, len, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let q = linear(g, x, p.q.0, p.q.1)?;
    let mut k = linear(g, x, p.k.0, p.k.1)?;
    let mut v = linear(g, x, p.v.0, p.v.1)?;
    let mut n_prefix = 0;
    if let Some(pre) = prefix {
        n_prefix = g.shape(pre.keys)[1];
        k = g.concat(&[pre.keys, k], 1)?;
        v = g.concat(&[pre.values, v], 1)?;
    }
    let kv_len = n_prefix + len;
    let mask_prefix = prefix.is_some_and(|p| p.mask_keys);
    let mut fill = Vec::with_capacity(b * heads * len * kv_len);
    for bi in 0..b {
        let row: Vec<bool> = (0..kv_len)
            .map(|j| {
                if j < n_prefix {
                    mask_prefix
                } else {
                    !valid[bi * len + j - n_prefix]
                }
            })
            .collect();
        for _ in 0..heads * len {
            fill.extend_from_slice(&row);
        }
    }
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let kt = g.transpose(kh)?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = g.masked_fill(scores, &fill, f64::NEG_INFINITY)?;
    let weights = g.softmax(scores)?;
    let ctx = g.bmm(weights, vh)?;
    let ctx = merge_heads(g, ctx, heads)?;
    linear(g, ctx, p.o.0, p.o.1)
}

/// Pre-LN layer: `x + attn(ln1(x))`, then `x + adapter(ffn(ln2(x)))`, the
/// adapter being the identity when absent.
pub fn encoder_layer(
    g: &mut Graph,
    x: Var,
    valid: &[bool],
    p: &LayerParams,
    heads: usize,
    prefix: Option<&PrefixKv>,
) -> Result<Var, ModelError> {
    let h = g.layer_norm(x, p.ln1.0, p.ln1.1, LN_EPS)?;
    let a = self_attention(g, h, valid, p, heads, prefix)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, p.ln2.0, p.ln2.1, LN_EPS)?;
    let h = linear(g, h, p.ffn1.0, p.ffn1.1)?;
    let h = g.relu(h);
    let mut f = linear(g, h, p.ffn2.0, p.ffn2.1)?;
    if let Some(ad) = &p.adapter {
        f = residual_adapter(g, f, ad)?;
    }
    Ok(g.add(x, f)?)
}
