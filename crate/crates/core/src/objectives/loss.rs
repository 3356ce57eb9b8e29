use crate::autodiff::{Graph, Var};

use super::ObjectiveError;

/// Loss components of one evaluation of `total = ctc + alpha · lid`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub total: f64,
    pub ctc: f64,
    pub lid: Option<f64>,
    pub alpha: f64,
}

/// Adds the weighted LID term to the CTC loss; returns the graph node of
/// the total together with the scalar values.
pub fn combined_loss(
    g: &mut Graph,
    ctc: Var,
    lid: Option<Var>,
    alpha: f64,
) -> Result<(Var, LossBundle), ObjectiveError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(ObjectiveError::InvalidAlpha(alpha));
    }
    let ctc_value = g.value(ctc).item();
    let Some(lid) = lid else {
        return Ok((
            ctc,
            LossBundle {
                total: ctc_value,
                ctc: ctc_value,
                lid: None,
                alpha,
            },
        ));
    };
    let weighted = g.scale(lid, alpha);
    let total = g.add(ctc, weighted)?;
    Ok((
        total,
        LossBundle {
            total: g.value(total).item(),
            ctc: ctc_value,
            lid: Some(g.value(lid).item()),
            alpha,
        },
    ))
}
