//! Central finite-difference checks against analytic gradients.
//!
//! The relative error is `|fd - analytic| / max(|fd|, |analytic|, 1e-4)`; the
//! floor keeps round-off in vanishing gradients from dominating the ratio.

use crate::tape::{Grads, ParamId, ParamKind, ParamStore};

pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_at: String,
    /// Sparse-table scalars whose analytic gradient must be exactly zero.
    pub untouched_checked: usize,
    pub untouched_nonzero: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.worst_rel_err <= tol && self.untouched_nonzero == 0
    }
}

pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR)
}

/// Checks every trainable scalar of the selected params (all non-frozen ones
/// when `only` is `None`), visiting at most `max_per_param` scalars of each
/// dense tensor on a fixed stride. Sparse tables are checked on every touched
/// row plus up to `max_per_param` untouched scalars, which must be exactly zero
/// both analytically and numerically.
pub fn check(
    store: &mut ParamStore,
    grads: &Grads,
    only: Option<&[ParamId]>,
    max_per_param: usize,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };
    let mut report = GradCheckReport::default();
    for id in ids {
        let p = store.get(id);
        if p.kind == ParamKind::Frozen {
            continue;
        }
        let n = p.data.len();
        let indices: Vec<usize> = match p.kind {
            ParamKind::Sparse => {
                let cols = p.cols;
                let mut idx: Vec<usize> = grads.sparse_rows(id).flat_map(|(r, _)| (r * cols)..(r + 1) * cols).collect();
                let touched: std::collections::HashSet<usize> = grads.sparse_rows(id).map(|(r, _)| r).collect();
                let stride = (n / max_per_param.max(1)).max(1);
                let mut extra = 0;
                for i in (0..n).step_by(stride) {
                    if extra >= max_per_param {
                        break;
                    }
                    if !touched.contains(&(i / cols)) {
                        idx.push(i);
                        extra += 1;
                    }
                }
                idx
            }
            _ => {
                let stride = (n / max_per_param.max(1)).max(1);
                (0..n).step_by(stride).take(max_per_param).collect()
            }
        };
        for i in indices {
            let an = grads.scalar(store, id, i);
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + STEP;
            let up = loss(store);
            store.get_mut(id).data[i] = orig - STEP;
            let down = loss(store);
            store.get_mut(id).data[i] = orig;
            let fd = (up - down) / (2.0 * STEP);

            let p = store.get(id);
            if p.kind == ParamKind::Sparse && grads.sparse_row(id, i / p.cols).is_none() {
                report.untouched_checked += 1;
                if an != 0.0 || fd != 0.0 {
                    report.untouched_nonzero += 1;
                }
                continue;
            }
            let e = rel_err(fd, an);
            report.checked += 1;
            if e > report.worst_rel_err || report.worst_at.is_empty() {
                report.worst_rel_err = report.worst_rel_err.max(e);
                if e >= report.worst_rel_err {
                    report.worst_at = format!("{}[{i}]: fd={fd:e} analytic={an:e}", p.name);
                }
            }
        }
    }
    report
}
