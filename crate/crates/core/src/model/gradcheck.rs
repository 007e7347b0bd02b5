use super::{LkhgtModel, ModelError};
use crate::khg::EntityId;
use crate::query::QueryNode;

/// Worst disagreement between the tape gradient and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compares every scalar's analytic gradient with `(L(θ+h) − L(θ−h)) / 2h`.
/// Relative error uses `max(|analytic|, |numeric|, floor)` as denominator.
pub fn gradient_check(
    model: &LkhgtModel,
    items: &[(&QueryNode, EntityId)],
    h: f64,
    floor: f64,
) -> Result<GradCheck, ModelError> {
    let (_, grads) = model.loss_and_grads(items, None)?;
    let mut probe = model.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).len();
        for i in 0..n {
            let orig = model.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = orig + h;
            let up = probe.loss(items)?;
            probe.params.get_mut(id).data_mut()[i] = orig - h;
            let down = probe.loss(items)?;
            probe.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst_param = model.params.name(id).to_string();
                out.worst_index = i;
            }
        }
    }
    Ok(out)
}
