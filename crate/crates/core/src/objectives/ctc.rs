//! CTC negative log-likelihood via the log-space forward recursion over the
//! blank-interleaved label sequence.
//!
//! The gradient is the exact reverse-mode adjoint of that recursion: the
//! backward sweep replays the forward lattice, sending each state's
//! adjoint to its predecessors in proportion to their share of the
//! log-sum-exp.

use crate::autodiff::{Function, Graph, Tensor, Var};

use super::ObjectiveError;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Labels interleaved with blanks: `␣ l1 ␣ l2 … lL ␣`.
pub fn extend_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Fewest frames that can emit `labels`: one per label plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward lattice `alpha[t * S + s]` (log domain) for `log_probs` laid out
/// as `T×C`.
pub fn forward_lattice(log_probs: &[f64], classes: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let frames = log_probs.len() / classes;
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = log_probs[ext[0]];
    if s_len > 1 {
        alpha[1] = log_probs[ext[1]];
    }
    for t in 1..frames {
        let lp = &log_probs[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp[ext[s]]
            };
        }
    }
    alpha
}

/// Backward lattice `beta[t * S + s]`: log-probability of emitting the rest
/// of the extended sequence from state `s` at frame `t`, including frame
/// `t`'s own emission.
pub fn backward_lattice(log_probs: &[f64], classes: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let frames = log_probs.len() / classes;
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    let last = (frames - 1) * s_len;
    let lp_last = &log_probs[(frames - 1) * classes..];
    beta[last + s_len - 1] = lp_last[ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp_last[ext[s_len - 2]];
    }
    for t in (0..frames - 1).rev() {
        let lp = &log_probs[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp[ext[s]]
            };
        }
    }
    beta
}

/// Total log-likelihood read off the last frame of a forward lattice.
pub fn lattice_total(alpha: &[f64], s_len: usize) -> f64 {
    let last = &alpha[alpha.len() - s_len..];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

struct CtcFunction {
    ext: Vec<usize>,
    alpha: Vec<f64>,
    classes: usize,
    blank: usize,
}

impl Function for CtcFunction {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let lp = inputs[0].data();
        let c = self.classes;
        let s_len = self.ext.len();
        let frames = lp.len() / c;
        let alpha = &self.alpha;
        let mut d_lp = vec![0.0; lp.len()];
        // loss = -log_total, so d(loss)/d(log_total) = -1
        let total = -output.item();
        let mut adj = vec![0.0; s_len];
        let last = &alpha[(frames - 1) * s_len..];
        for s in s_len.saturating_sub(2)..s_len {
            if last[s] != f64::NEG_INFINITY {
                adj[s] = -grad_out[0] * (last[s] - total).exp();
            }
        }
        for t in (0..frames).rev() {
            let mut prev_adj = vec![0.0; s_len];
            for s in 0..s_len {
                let a = alpha[t * s_len + s];
                if adj[s] == 0.0 || a == f64::NEG_INFINITY {
                    continue;
                }
                d_lp[t * c + self.ext[s]] += adj[s];
                if t == 0 {
                    continue;
                }
                // alpha[t][s] - lp = log-sum-exp of the contributing predecessors
                let pre = a - lp[t * c + self.ext[s]];
                let prev = &alpha[(t - 1) * s_len..t * s_len];
                let mut send = |p: usize| {
                    if prev[p] != f64::NEG_INFINITY {
                        prev_adj[p] += adj[s] * (prev[p] - pre).exp();
                    }
                };
                send(s);
                if s >= 1 {
                    send(s - 1);
                }
                if can_skip(&self.ext, s, self.blank) {
                    send(s - 2);
                }
            }
            adj = prev_adj;
        }
        vec![Some(d_lp)]
    }
}

/// CTC loss `-log p(labels | log_probs)` for one utterance.
///
/// `log_probs` must be `[T, C]` log-probabilities; `blank < C` is the blank
/// class and may not appear in `labels`.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var, ObjectiveError> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(ObjectiveError::Shape(format!("ctc expects [T, C] log-probs, got {shape:?}")));
    }
    let (frames, classes) = (shape[0], shape[1]);
    if blank >= classes {
        return Err(ObjectiveError::Shape(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes || l == blank) {
        return Err(ObjectiveError::InvalidLabel { label: l, classes, blank });
    }
    let needed = min_frames(labels);
    if frames < needed {
        return Err(ObjectiveError::InfeasibleAlignment {
            frames,
            labels: labels.len(),
            needed,
        });
    }
    let ext = extend_labels(labels, blank);
    let lp = g.value(log_probs).data();
    let alpha = forward_lattice(lp, classes, &ext, blank);
    let total = lattice_total(&alpha, ext.len());
    if !total.is_finite() {
        return Err(ObjectiveError::InfeasibleAlignment {
            frames,
            labels: labels.len(),
            needed,
        });
    }
    let f = CtcFunction {
        ext,
        alpha,
        classes,
        blank,
    };
    Ok(g.custom(&[log_probs], Tensor::scalar(-total), Box::new(f)))
}
