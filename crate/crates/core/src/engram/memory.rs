use std::collections::HashMap;

use rand::Rng;

use super::{suffix_key, Allocation};
use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamKind, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReadOptions {
    /// Replaces every order gate with this constant.
    pub force_gate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GatedRead {
    pub out: Var,
    /// `(order, gate)` for each active order, gate as a 1x1 tensor.
    pub gates: Vec<(usize, Var)>,
}

/// Trainable tensors of one memory instance, registered in a shared store.
#[derive(Clone, Debug)]
pub struct EngramMemory {
    pub alloc: Allocation,
    pub hidden: usize,
    tables: Vec<ParamId>,
    query: HashMap<usize, ParamId>,
    key: HashMap<(usize, usize), ParamId>,
    value: HashMap<(usize, usize), ParamId>,
    norm: HashMap<usize, (ParamId, ParamId)>,
}

impl EngramMemory {
    pub fn build<R: Rng>(alloc: Allocation, hidden: usize, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let spec = &alloc.spec;
        let hd = spec.head_dim();
        let dm = spec.addr_dim;
        let bound = 1.0 / (hd as f64).sqrt();
        let tables = alloc
            .tables
            .iter()
            .map(|t| {
                let name = format!("{prefix}.tbl.l{}.o{}.k{}", t.level, t.order, t.head);
                store.uniform_bound(name, t.buckets as usize, hd, bound, ParamKind::Sparse, rng)
            })
            .collect();
        let mut query = HashMap::new();
        let mut key = HashMap::new();
        let mut value = HashMap::new();
        let mut norm = HashMap::new();
        for l in spec.active_levels() {
            query.insert(l, store.uniform(format!("{prefix}.wq.l{l}"), hidden, hidden, rng));
            for &o in spec.orders_at(l) {
                key.insert((l, o), store.uniform(format!("{prefix}.wk.l{l}.o{o}"), hidden, dm, rng));
                value.insert((l, o), store.uniform(format!("{prefix}.wv.l{l}.o{o}"), dm, dm, rng));
            }
            let g = store.ones(format!("{prefix}.ln.g.l{l}"), 1, dm);
            let b = store.zeros(format!("{prefix}.ln.b.l{l}"), 1, dm);
            norm.insert(l, (g, b));
        }
        Self { alloc, hidden, tables, query, key, value, norm }
    }

    pub fn out_dim(&self) -> usize {
        self.alloc.spec.addr_dim
    }

    pub fn table_param(&self, level: usize, order: usize, head: usize) -> Option<ParamId> {
        self.alloc
            .tables
            .iter()
            .position(|t| t.level == level && t.order == order && t.head == head)
            .map(|i| self.tables[i])
    }

    pub fn table_params(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn value_param(&self, level: usize, order: usize) -> Option<ParamId> {
        self.value.get(&(level, order)).copied()
    }

    pub fn query_param(&self, level: usize) -> Option<ParamId> {
        self.query.get(&level).copied()
    }

    pub fn norm_params(&self, level: usize) -> Option<(ParamId, ParamId)> {
        self.norm.get(&level).copied()
    }

    /// `(order, [(table, row) per head])` touched by reading `pattern`.
    pub fn addresses(&self, level: usize, pattern: &[u64]) -> Result<Vec<(usize, Vec<(ParamId, usize)>)>> {
        let spec = &self.alloc.spec;
        if !spec.is_active(level) {
            return Err(Error::InactiveOrder { level, order: 0 });
        }
        spec.orders_at(level)
            .iter()
            .map(|&o| {
                let key = suffix_key(pattern, o)?;
                let rows = self
                    .alloc
                    .tables
                    .iter()
                    .zip(&self.tables)
                    .filter(|(t, _)| t.level == level && t.order == o)
                    .map(|(t, &id)| (id, super::hash_key(&key, &t.multipliers, t.buckets) as usize))
                    .collect();
                Ok((o, rows))
            })
            .collect()
    }

    /// Projects a context vector once so many reads can share it.
    pub fn project_query(&self, tape: &mut Tape, level: usize, q: Var) -> Result<Var> {
        let wq = *self.query.get(&level).ok_or(Error::InactiveOrder { level, order: 0 })?;
        let (_, cols) = tape.shape(q);
        if cols != self.hidden {
            return Err(Error::DimensionMismatch { expected: self.hidden, got: cols });
        }
        let w = tape.param(wq);
        Ok(tape.linear(q, w, None))
    }

    pub fn read(&self, tape: &mut Tape, level: usize, q: Var, pattern: &[u64], opts: ReadOptions) -> Result<GatedRead> {
        let qp = self.project_query(tape, level, q)?;
        self.read_projected(tape, level, qp, pattern, opts)
    }

    pub fn read_projected(
        &self,
        tape: &mut Tape,
        level: usize,
        q_proj: Var,
        pattern: &[u64],
        opts: ReadOptions,
    ) -> Result<GatedRead> {
        if pattern.is_empty() {
            return Err(Error::EmptySequence);
        }
        let inv_sqrt_d = 1.0 / (self.hidden as f64).sqrt();
        let mut terms = Vec::new();
        let mut gates = Vec::new();
        for (o, rows) in self.addresses(level, pattern)? {
            let heads: Vec<Var> = rows.iter().map(|&(id, r)| tape.gather(id, r)).collect();
            let addr = tape.concat_cols(&heads);
            let gate = match opts.force_gate {
                Some(g) => tape.constant(1, 1, vec![g]),
                None => {
                    let wk = tape.param(self.key[&(level, o)]);
                    let k = tape.linear(addr, wk, None);
                    let logit = tape.dot(q_proj, k);
                    let logit = tape.scale(logit, inv_sqrt_d);
                    tape.sigmoid(logit)
                }
            };
            let wv = tape.param(self.value[&(level, o)]);
            let v = tape.linear(addr, wv, None);
            terms.push(tape.scale_by(v, gate));
            gates.push((o, gate));
        }
        let sum = tape.add_n(&terms);
        let (g, b) = self.norm[&level];
        let g = tape.param(g);
        let b = tape.param(b);
        let out = tape.layer_norm(sum, g, b);
        Ok(GatedRead { out, gates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engram::{allocate, EngramSpec, MemoryKind};
    use crate::gradcheck;
    use crate::tape::Grads;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: MemoryKind) -> (ParamStore, EngramMemory) {
        let spec = EngramSpec::new(kind, 3, 4, 1.0).with_addr_dim(8).with_h_max(97);
        let alloc = allocate(&spec).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mem = EngramMemory::build(alloc, 6, &mut store, "m", &mut rng);
        (store, mem)
    }

    fn query(t: &mut Tape) -> Var {
        t.row_const(&[0.3, -0.2, 0.9, 0.1, -1.1, 0.4])
    }

    #[test]
    fn zero_query_projection_gives_half_gates() {
        let (mut store, mem) = small(MemoryKind::Inter);
        store.get_mut(mem.query_param(1).unwrap()).data.iter_mut().for_each(|x| *x = 0.0);
        let mut t = Tape::new(&store);
        let q = query(&mut t);
        let r = mem.read(&mut t, 1, q, &[3, 1, 2], ReadOptions::default()).unwrap();
        assert_eq!(r.gates.len(), 3);
        for (_, g) in r.gates {
            assert_eq!(t.scalar(g), 0.5);
        }
    }

    #[test]
    fn zero_buckets_read_the_norm_bias() {
        let (mut store, mem) = small(MemoryKind::Intra);
        for &id in mem.table_params() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let bias = mem.norm_params(2).unwrap().1;
        store.get_mut(bias).data = (0..8).map(|i| i as f64 * 0.1).collect();
        let mut t = Tape::new(&store);
        let q = query(&mut t);
        let r = mem.read(&mut t, 2, q, &[1, 3], ReadOptions::default()).unwrap();
        assert_eq!(t.value(r.out), store.get(bias).data.as_slice());
    }

    #[test]
    fn forced_unit_gate_with_identity_value_is_normalized_address() {
        let spec = EngramSpec::new(MemoryKind::Inter, 1, 4, 1.0).with_addr_dim(8);
        let alloc = allocate(&spec).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mem = EngramMemory::build(alloc, 6, &mut store, "m", &mut rng);
        // Keep only order 1.
        mem.alloc.spec.orders = vec![vec![1]];
        let wv = mem.value_param(1, 1).unwrap();
        let p = store.get_mut(wv);
        p.data.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..8 {
            p.data[i * 8 + i] = 1.0;
        }
        let mut t = Tape::new(&store);
        let q = query(&mut t);
        let r = mem.read(&mut t, 1, q, &[2], ReadOptions { force_gate: Some(1.0) }).unwrap();
        let addr: Vec<f64> = mem.addresses(1, &[2]).unwrap()[0]
            .1
            .iter()
            .flat_map(|&(id, row)| store.get(id).row(row).to_vec())
            .collect();
        let mean = addr.iter().sum::<f64>() / 8.0;
        let var = addr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        for (o, a) in t.value(r.out).iter().zip(&addr) {
            assert!((o - (a - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let (store, mem) = small(MemoryKind::Intra);
        let mut t = Tape::new(&store);
        let q = query(&mut t);
        assert!(matches!(mem.read(&mut t, 2, q, &[], ReadOptions::default()), Err(Error::EmptySequence)));
        assert!(matches!(mem.read(&mut t, 1, q, &[1], ReadOptions::default()), Err(Error::InactiveOrder { .. })));
        let short = t.row_const(&[1.0]);
        assert!(matches!(mem.read(&mut t, 2, short, &[1], ReadOptions::default()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn read_gradients_match_finite_differences() {
        let (mut store, mem) = small(MemoryKind::Inter);
        let loss = |store: &ParamStore| -> (f64, Grads) {
            let mut t = Tape::new(store);
            let q = query(&mut t);
            let a = mem.read(&mut t, 1, q, &[3, 0, 2], ReadOptions::default()).unwrap();
            let b = mem.read(&mut t, 2, q, &[7, 12], ReadOptions::default()).unwrap();
            let w = t.row_const(&[0.5, -1.0, 0.2, 0.3, 0.9, -0.4, 0.1, 0.7]);
            let x = t.add(a.out, b.out);
            let y = t.mul(x, w);
            let l = t.sum(y);
            (t.scalar(l), t.backward(l).unwrap())
        };
        let (_, grads) = loss(&store);
        let report = gradcheck::check(&mut store, &grads, None, 40, |s| loss(s).0);
        assert!(report.passes(1e-4), "{report:?}");
        assert!(report.untouched_checked > 0);
    }

    proptest! {
        #[test]
        fn gates_open_and_output_normalized(
            q in prop::collection::vec(-20.0f64..20.0, 6),
            pat in prop::collection::vec(0u64..64, 1..5),
        ) {
            let (store, mem) = small(MemoryKind::Inter);
            let mut t = Tape::new(&store);
            let qv = t.row_const(&q);
            let r = mem.read(&mut t, 1, qv, &pat, ReadOptions::default()).unwrap();
            for (_, g) in &r.gates {
                let g = t.scalar(*g);
                prop_assert!(g > 0.0 && g < 1.0);
            }
            let out = t.value(r.out);
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
