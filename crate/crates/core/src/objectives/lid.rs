//! Frame-level language-identification targets and the cross-entropy loss.

use crate::autodiff::{Graph, Var};

use super::ObjectiveError;

/// How utterance-level language ids become a frame-level LID target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LidLoss {
    /// One target per acoustic frame, trained with cross-entropy.
    CrossEntropy,
    /// One target per text label, trained with CTC (blank = `K`).
    Ctc,
}

impl LidLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            LidLoss::CrossEntropy => "ce",
            LidLoss::Ctc => "ctc",
        }
    }
}

/// CE: `[lang; num_frames]`; CTC: `[lang; text_label_len]`.
pub fn expand_lid_labels(
    lang: usize,
    mode: LidLoss,
    num_frames: usize,
    text_label_len: usize,
) -> Result<Vec<usize>, ObjectiveError> {
    match mode {
        LidLoss::CrossEntropy => {
            if num_frames == 0 {
                return Err(ObjectiveError::EmptyTarget("CE expansion needs at least one frame"));
            }
            Ok(vec![lang; num_frames])
        }
        LidLoss::Ctc => {
            if text_label_len == 0 {
                return Err(ObjectiveError::EmptyTarget(
                    "CTC expansion needs a non-empty text label sequence",
                ));
            }
            Ok(vec![lang; text_label_len])
        }
    }
}

/// Mean over unmasked frames of `-log softmax(logits)[target]`.
///
/// `logits` is `[T, K+1]`; `mask[t]` is true on real frames.
pub fn frame_ce_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var, ObjectiveError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || mask.len() != targets.len() {
        return Err(ObjectiveError::Shape(format!(
            "frame CE: logits {shape:?}, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let classes = shape[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(ObjectiveError::InvalidLabel {
            label: t,
            classes,
            blank: classes,
        });
    }
    let picks: Vec<Option<usize>> = targets
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(t, (&target, _))| Some(t * classes + target))
        .collect();
    if picks.is_empty() {
        return Err(ObjectiveError::EmptyTarget("frame CE over a fully masked sequence"));
    }
    let n = picks.len();
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, &picks, &[n])?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}
