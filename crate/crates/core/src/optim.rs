//! AdamW with decoupled weight decay.
//!
//! For a gradient `g` at step `t` (1-based):
//!
//! ```text
//! m = b1*m + (1-b1)*g
//! v = b2*v + (1-b2)*g^2
//! w -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps) + lr * wd * w
//! ```
//!
//! Sparse tables are updated lazily: only rows that received gradient this
//! step have their moments advanced and their weights decayed. Frozen
//! tensors are never touched.

use std::collections::HashMap;

use crate::tape::{Grads, ParamId, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: Some(5.0) }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    dense: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    sparse: HashMap<(ParamId, usize), (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, ..Default::default() }
    }

    fn grad_norm(grads: &Grads) -> f64 {
        let dense: f64 = grads.dense_iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum();
        let sparse: f64 = grads.sparse_iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum();
        (dense + sparse).sqrt()
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = Self::grad_norm(grads);
                if n > max && n.is_finite() {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let apply = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        };

        for (id, g) in grads.dense_iter() {
            let p = store.get_mut(id);
            if p.kind == ParamKind::Frozen {
                continue;
            }
            let n = p.data.len();
            let (m, v) = self.dense.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            apply(&mut p.data, g, m, v);
        }
        for ((id, row), g) in grads.sparse_iter() {
            let p = store.get_mut(id);
            if p.kind == ParamKind::Frozen {
                continue;
            }
            let cols = p.cols;
            let (m, v) = self.sparse.entry((id, row)).or_insert_with(|| (vec![0.0; cols], vec![0.0; cols]));
            apply(&mut p.data[row * cols..(row + 1) * cols], g, m, v);
        }
    }

    /// Moment state in a stable order, for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mut dense: Vec<_> = self.dense.iter().collect();
        dense.sort_by_key(|(id, _)| **id);
        for (id, (m, v)) in dense {
            out.push((format!("adam.d.{}.m", id.0), m.clone()));
            out.push((format!("adam.d.{}.v", id.0), v.clone()));
        }
        let mut sparse: Vec<_> = self.sparse.iter().collect();
        sparse.sort_by_key(|(k, _)| **k);
        for ((id, row), (m, v)) in sparse {
            out.push((format!("adam.s.{}.{}.m", id.0, row), m.clone()));
            out.push((format!("adam.s.{}.{}.v", id.0, row), v.clone()));
        }
        out
    }

    pub fn import_state(&mut self, step: u64, entries: &[(String, Vec<f64>)]) -> Result<(), String> {
        self.step = step;
        self.dense.clear();
        self.sparse.clear();
        for (name, data) in entries {
            let parts: Vec<&str> = name.split('.').collect();
            let bad = || format!("bad optimizer entry `{name}`");
            match parts.as_slice() {
                ["adam", "d", id, which] => {
                    let id = ParamId(id.parse().map_err(|_| bad())?);
                    let e = self.dense.entry(id).or_insert_with(|| (vec![0.0; data.len()], vec![0.0; data.len()]));
                    match *which {
                        "m" => e.0 = data.clone(),
                        "v" => e.1 = data.clone(),
                        _ => return Err(bad()),
                    }
                }
                ["adam", "s", id, row, which] => {
                    let id = ParamId(id.parse().map_err(|_| bad())?);
                    let row: usize = row.parse().map_err(|_| bad())?;
                    let e = self.sparse.entry((id, row)).or_insert_with(|| (vec![0.0; data.len()], vec![0.0; data.len()]));
                    match *which {
                        "m" => e.0 = data.clone(),
                        "v" => e.1 = data.clone(),
                        _ => return Err(bad()),
                    }
                }
                _ => return Err(bad()),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let d = s.add("d", 1, 2, ParamKind::Dense, vec![1.0, -1.0]);
        let t = s.add("t", 3, 2, ParamKind::Sparse, vec![1.0; 6]);
        let f = s.add("f", 1, 2, ParamKind::Frozen, vec![2.0, 2.0]);
        (s, d, t, f)
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let (mut s, d, _, _) = store();
        let mut g = Grads::new();
        g.add_dense(d, &[0.5, -3.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, clip_norm: None, ..Default::default() });
        opt.update(&mut s, &g);
        let w = &s.get(d).data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn lazy_rows_and_frozen_untouched() {
        let (mut s, d, t, f) = store();
        let mut g = Grads::new();
        g.add_sparse(t, 1, &[1.0, 1.0]);
        g.add_dense(f, &[1.0, 1.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.update(&mut s, &g);
        assert_eq!(s.get(t).row(0), &[1.0, 1.0]);
        assert_eq!(s.get(t).row(2), &[1.0, 1.0]);
        assert!(s.get(t).row(1)[0] < 1.0);
        assert_eq!(s.get(f).data, vec![2.0, 2.0]);
        assert_eq!(s.get(d).data, vec![1.0, -1.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut s, d, t, _) = store();
        let before = s.clone();
        let mut g = Grads::new();
        g.add_dense(d, &[3.0, 1.0]);
        g.add_sparse(t, 0, &[1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() });
        for _ in 0..5 {
            opt.update(&mut s, &g);
        }
        assert_eq!(s, before);
    }

    #[test]
    fn state_round_trips() {
        let (mut s, d, t, _) = store();
        let mut g = Grads::new();
        g.add_dense(d, &[3.0, 1.0]);
        g.add_sparse(t, 2, &[1.0, 2.0]);
        let mut a = AdamW::new(AdamWConfig::default());
        a.update(&mut s, &g);
        let mut b = AdamW::new(AdamWConfig::default());
        b.import_state(a.step, &a.export_state()).unwrap();
        assert_eq!(a, b);
    }
}
