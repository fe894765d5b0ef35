//! Item-level inputs: feature-guided code scoring, dual memory evidence and
//! the level-wise gated merge, plus the two baseline input builders.

use rand::Rng;

use crate::catalog::Catalog;
use crate::config::ModelConfig;
use crate::engram::{allocate, encode_unit, EngramMemory, EngramSpec, MemoryKind, ReadOptions};
use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamKind, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct ItemContext {
    pub s0: Var,
    /// Code weights, 1 x L.
    pub alpha: Var,
}

#[derive(Clone, Debug)]
pub struct MergeOut {
    pub r: Var,
    pub gates: Vec<Var>,
}

/// Everything later stages need from one user history.
#[derive(Clone, Debug)]
pub struct ItemInputs {
    /// N x d encoder input (N*L x d for the token-level baseline).
    pub r: Var,
    /// Per-item feature-guided contexts s0.
    pub contexts: Vec<Var>,
    /// `units[l-1][a]`: encoded level-l prefix of history item a.
    pub units: Vec<Vec<u64>>,
}

#[derive(Clone, Debug)]
struct Merge {
    wq: ParamId,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    b: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Representation {
    pub cfg: ModelConfig,
    pub code_table: ParamId,
    pub token_table: ParamId,
    pub token_proj: ParamId,
    pub feature_proj: ParamId,
    pub intra: EngramMemory,
    pub inter: EngramMemory,
    adapters: Vec<(ParamId, ParamId)>,
    pool: Vec<(ParamId, ParamId)>,
    merge: Merge,
    norm: (ParamId, ParamId),
    linear_merge: Option<(ParamId, ParamId)>,
    naive: Option<(ParamId, ParamId)>,
}

/// softmax over a window of contexts, scored against a probe: returns the pooled row.
pub fn window_pool(tape: &mut Tape, wq: ParamId, wk: ParamId, probe: Var, window: &[Var]) -> Var {
    let d = tape.shape(probe).1;
    let wq = tape.param(wq);
    let wk = tape.param(wk);
    let s = tape.stack_rows(window);
    let q = tape.linear(probe, wq, None);
    let k = tape.linear(s, wk, None);
    let logits = tape.matmul_t(q, k);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let pi = tape.softmax(logits);
    tape.matmul(pi, s)
}

/// `s + sigma((Wq s).(Wk u) + b) * Wv u`; `force_gate` replaces the sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn gated_residual(
    tape: &mut Tape,
    s: Var,
    u: Var,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    b: ParamId,
    force_gate: Option<f64>,
) -> (Var, Var) {
    let gate = match force_gate {
        Some(g) => tape.constant(1, 1, vec![g]),
        None => {
            let wq = tape.param(wq);
            let wk = tape.param(wk);
            let b = tape.param(b);
            let q = tape.linear(s, wq, None);
            let k = tape.linear(u, wk, None);
            let logit = tape.dot(q, k);
            let logit = tape.add(logit, b);
            tape.sigmoid(logit)
        }
    };
    let wv = tape.param(wv);
    let v = tape.linear(u, wv, None);
    let v = tape.scale_by(v, gate);
    (tape.add(s, v), gate)
}

pub fn memory_spec(cfg: &ModelConfig, kind: MemoryKind) -> EngramSpec {
    let (scale, heads, seed_mix) = match kind {
        MemoryKind::Intra => (cfg.intra_scale, cfg.intra_heads, 0x1),
        MemoryKind::Inter => (cfg.inter_scale, cfg.inter_heads, 0x2),
    };
    let mut spec = EngramSpec::new(kind, cfg.levels, cfg.codebook_size, scale)
        .with_addr_dim(cfg.addr_dim)
        .with_heads(heads)
        .with_h_max(cfg.h_max)
        .with_seed(cfg.seed ^ seed_mix);
    spec.d_max = cfg.d_max;
    spec
}

impl Representation {
    /// `code_vectors[l][c]` is the frozen vector of code `c` at layer `l`.
    pub fn build<R: Rng>(cfg: &ModelConfig, code_vectors: &[Vec<Vec<f64>>], store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (l, c, d, dm) = (cfg.levels, cfg.codebook_size, cfg.hidden, cfg.addr_dim);
        if code_vectors.len() != l {
            return Err(Error::DimensionMismatch { expected: l, got: code_vectors.len() });
        }
        let mut eb = vec![0.0; l * c * cfg.code_dim];
        for (lvl, book) in code_vectors.iter().enumerate() {
            if book.len() > c {
                return Err(Error::InvalidArgument(format!("layer {lvl} has {} codes, more than {c}", book.len())));
            }
            for (code, v) in book.iter().enumerate() {
                if v.len() != cfg.code_dim {
                    return Err(Error::DimensionMismatch { expected: cfg.code_dim, got: v.len() });
                }
                let at = (lvl * c + code) * cfg.code_dim;
                eb[at..at + cfg.code_dim].copy_from_slice(v);
            }
        }
        let code_table = store.add("repr.code", l * c, cfg.code_dim, ParamKind::Frozen, eb);
        let token_table = store.normal("repr.token", l * c, cfg.token_dim, 0.02, rng);
        let token_proj = store.uniform("repr.token_proj", d, cfg.code_dim + cfg.token_dim, rng);
        let feature_proj = store.uniform("repr.feature_proj", d, cfg.feature_dim, rng);

        let intra_alloc = allocate(&memory_spec(cfg, MemoryKind::Intra))?;
        let inter_alloc = allocate(&memory_spec(cfg, MemoryKind::Inter))?;
        let intra = EngramMemory::build(intra_alloc, d, store, "intra", rng);
        let inter = EngramMemory::build(inter_alloc, d, store, "inter", rng);

        let adapters = (2..=l)
            .map(|lvl| {
                let w = store.uniform(format!("repr.adapter.w.l{lvl}"), dm, (lvl - 1) * dm, rng);
                let b = store.zeros(format!("repr.adapter.b.l{lvl}"), 1, dm);
                (w, b)
            })
            .collect();
        let pool = (1..=l)
            .map(|lvl| {
                (
                    store.uniform(format!("repr.pool.wq.l{lvl}"), d, d, rng),
                    store.uniform(format!("repr.pool.wk.l{lvl}"), d, d, rng),
                )
            })
            .collect();
        let merge = Merge {
            wq: store.uniform("repr.merge.wq", d, d, rng),
            wk: (1..=l).map(|lvl| store.uniform(format!("repr.merge.wk.l{lvl}"), d, 2 * dm, rng)).collect(),
            wv: (1..=l).map(|lvl| store.uniform(format!("repr.merge.wv.l{lvl}"), d, 2 * dm, rng)).collect(),
            b: (1..=l).map(|lvl| store.zeros(format!("repr.merge.b.l{lvl}"), 1, 1)).collect(),
        };
        let norm = (store.ones("repr.ln.g", 1, d), store.zeros("repr.ln.b", 1, d));
        let linear_merge = cfg.ablations.linear_merge.then(|| {
            (store.uniform("repr.linmerge.w", d, d + 2 * dm * l, rng), store.zeros("repr.linmerge.b", 1, d))
        });
        let naive = cfg
            .ablations
            .naive_token_merge
            .then(|| (store.uniform("repr.naive.w", d, l * d, rng), store.zeros("repr.naive.b", 1, d)));
        Ok(Self {
            cfg: cfg.clone(),
            code_table,
            token_table,
            token_proj,
            feature_proj,
            intra,
            inter,
            adapters,
            pool,
            merge,
            norm,
            linear_merge,
            naive,
        })
    }

    /// Composed embedding of `code` at 1-based `level`.
    pub fn token(&self, tape: &mut Tape, level: usize, code: u32) -> Var {
        let row = (level - 1) * self.cfg.codebook_size + code as usize;
        let b = tape.gather(self.code_table, row);
        let t = tape.gather(self.token_table, row);
        let x = tape.concat_cols(&[b, t]);
        let w = tape.param(self.token_proj);
        tape.linear(x, w, None)
    }

    pub fn score_tokens(&self, tape: &mut Tape, features: &[f64], sid: &[u32]) -> Result<ItemContext> {
        let l = sid.len();
        if l == 0 {
            return Err(Error::EmptySequence);
        }
        if features.len() != self.cfg.feature_dim {
            return Err(Error::DimensionMismatch { expected: self.cfg.feature_dim, got: features.len() });
        }
        let tokens: Vec<Var> = sid.iter().enumerate().map(|(i, &c)| self.token(tape, i + 1, c)).collect();
        let e = tape.stack_rows(&tokens);
        let alpha = if self.cfg.ablations.no_mm_scoring {
            tape.constant(1, l, vec![1.0 / l as f64; l])
        } else {
            let m = tape.row_const(features);
            let w = tape.param(self.feature_proj);
            let q = tape.linear(m, w, None);
            let logits = tape.matmul_t(q, e);
            let logits = tape.scale(logits, 1.0 / (self.cfg.hidden as f64).sqrt());
            tape.softmax(logits)
        };
        let s0 = tape.matmul(alpha, e);
        Ok(ItemContext { s0, alpha })
    }

    /// Compressed intra evidence for levels 2..=L (index 0 is level 2).
    pub fn intra_evidence(&self, tape: &mut Tape, s0: Var, sid: &[u32]) -> Result<Vec<Var>> {
        let dm = self.cfg.addr_dim;
        if self.cfg.ablations.no_enc_intra {
            return Ok((2..=sid.len()).map(|_| tape.zeros(1, dm)).collect());
        }
        let mut reads = Vec::new();
        let mut out = Vec::new();
        for lvl in 2..=sid.len() {
            let pattern: Vec<u64> = sid[..lvl].iter().map(|&c| c as u64).collect();
            reads.push(self.intra.read(tape, lvl, s0, &pattern, ReadOptions::default())?.out);
            let x = tape.concat_cols(&reads);
            let (w, b) = self.adapters[lvl - 2];
            let w = tape.param(w);
            let b = tape.param(b);
            out.push(tape.linear(x, w, Some(b)));
        }
        Ok(out)
    }

    pub fn pool_params(&self, level: usize) -> (ParamId, ParamId) {
        self.pool[level - 1]
    }

    pub fn unit(&self, sid: &[u32], level: usize) -> u64 {
        encode_unit(&sid[..level], self.cfg.codebook_size, self.cfg.d_max)
    }

    /// Transition evidence for the last item of `contexts`, levels 1..=L.
    pub fn inter_evidence(&self, tape: &mut Tape, contexts: &[Var], units: &[Vec<u64>]) -> Result<Vec<Var>> {
        let n = contexts.len();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        let dm = self.cfg.addr_dim;
        let spec = &self.inter.alloc.spec;
        let mut out = Vec::with_capacity(self.cfg.levels);
        for lvl in 1..=self.cfg.levels {
            if self.cfg.ablations.no_enc_inter || !spec.is_active(lvl) {
                out.push(tape.zeros(1, dm));
                continue;
            }
            let tau = spec.max_order(lvl);
            let seq = &units[lvl - 1][..n];
            let pattern = &seq[n.saturating_sub(tau)..];
            let window = &contexts[n.saturating_sub(self.cfg.window)..];
            let (wq, wk) = self.pool[lvl - 1];
            let q = window_pool(tape, wq, wk, contexts[n - 1], window);
            out.push(self.inter.read(tape, lvl, q, pattern, ReadOptions::default())?.out);
        }
        Ok(out)
    }

    pub fn merge(&self, tape: &mut Tape, s0: Var, intra: &[Var], inter: &[Var], force_gate: Option<f64>) -> Result<MergeOut> {
        let l = self.cfg.levels;
        let dm = self.cfg.addr_dim;
        if inter.len() != l || intra.len() + 1 != l {
            return Err(Error::DimensionMismatch { expected: l, got: inter.len() });
        }
        let zero = tape.zeros(1, dm);
        let units: Vec<Var> = (0..l)
            .map(|i| {
                let s = if i == 0 { zero } else { intra[i - 1] };
                tape.concat_cols(&[s, inter[i]])
            })
            .collect();
        let (g, b) = self.norm;
        let g = tape.param(g);
        let b = tape.param(b);
        if let Some((w, bias)) = self.linear_merge {
            let mut parts = vec![s0];
            parts.extend(&units);
            let x = tape.concat_cols(&parts);
            let w = tape.param(w);
            let bias = tape.param(bias);
            let y = tape.linear(x, w, Some(bias));
            return Ok(MergeOut { r: tape.layer_norm(y, g, b), gates: vec![] });
        }
        let mut s = s0;
        let mut gates = Vec::with_capacity(l);
        for (i, &u) in units.iter().enumerate() {
            let m = &self.merge;
            let (next, gate) = gated_residual(tape, s, u, m.wq, m.wk[i], m.wv[i], m.b[i], force_gate);
            s = next;
            gates.push(gate);
        }
        Ok(MergeOut { r: tape.layer_norm(s, g, b), gates })
    }

    /// Builds the encoder input for a history of catalog indices.
    pub fn build_inputs(&self, tape: &mut Tape, catalog: &Catalog, history: &[usize]) -> Result<ItemInputs> {
        if history.is_empty() {
            return Err(Error::EmptySequence);
        }
        let l = self.cfg.levels;
        let units: Vec<Vec<u64>> =
            (1..=l).map(|lvl| history.iter().map(|&i| self.unit(catalog.sid(i).codes(), lvl)).collect()).collect();
        let ab = self.cfg.ablations;

        if ab.flatten_baseline {
            let mut rows = Vec::with_capacity(history.len() * l);
            let mut contexts = Vec::with_capacity(history.len());
            for &i in history {
                let sid = catalog.sid(i).codes();
                let toks: Vec<Var> = sid.iter().enumerate().map(|(k, &c)| self.token(tape, k + 1, c)).collect();
                rows.extend(&toks);
                let stacked = tape.stack_rows(&toks);
                let mean = tape.constant(1, l, vec![1.0 / l as f64; l]);
                contexts.push(tape.matmul(mean, stacked));
            }
            return Ok(ItemInputs { r: tape.stack_rows(&rows), contexts, units });
        }
        if let Some((w, b)) = self.naive {
            let mut rows = Vec::with_capacity(history.len());
            let mut contexts = Vec::with_capacity(history.len());
            for &i in history {
                let sid = catalog.sid(i).codes();
                let toks: Vec<Var> = sid.iter().enumerate().map(|(k, &c)| self.token(tape, k + 1, c)).collect();
                let x = tape.concat_cols(&toks);
                let wv = tape.param(w);
                let bv = tape.param(b);
                let r = tape.linear(x, wv, Some(bv));
                contexts.push(r);
                rows.push(r);
            }
            return Ok(ItemInputs { r: tape.stack_rows(&rows), contexts, units });
        }

        let mut contexts = Vec::with_capacity(history.len());
        let mut rows = Vec::with_capacity(history.len());
        for (n, &i) in history.iter().enumerate() {
            let item = &catalog.items[i];
            let ctx = self.score_tokens(tape, &item.features, item.sid.codes())?;
            contexts.push(ctx.s0);
            let intra = self.intra_evidence(tape, ctx.s0, item.sid.codes())?;
            let prefix_units: Vec<Vec<u64>> = units.iter().map(|u| u[..=n].to_vec()).collect();
            let inter = self.inter_evidence(tape, &contexts, &prefix_units)?;
            rows.push(self.merge(tape, ctx.s0, &intra, &inter, None)?.r);
        }
        Ok(ItemInputs { r: tape.stack_rows(&rows), contexts, units })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::catalog::CatalogItem;
    use crate::gradcheck;
    use crate::quantizer::Sid;
    use crate::tape::sigmoid;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            codebook_size: 4,
            code_dim: 3,
            feature_dim: 5,
            hidden: 8,
            token_dim: 4,
            addr_dim: 8,
            h_max: 97,
            window: 3,
            enc_layers: 1,
            enc_heads: 2,
            ffn: 16,
            max_len: 16,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_catalog(cfg: &ModelConfig) -> Catalog {
        let sids = [[0, 1, 2], [0, 1, 3], [1, 0, 0], [2, 3, 1], [3, 3, 3], [1, 2, 0]];
        let items = sids
            .iter()
            .enumerate()
            .map(|(i, s)| CatalogItem {
                id: format!("i{i}"),
                features: (0..cfg.feature_dim).map(|k| ((i * 7 + k * 3) as f64 * 0.37).sin()).collect(),
                sid: Sid(s.to_vec()),
            })
            .collect();
        Catalog::new(3, cfg.codebook_size, items).unwrap()
    }

    pub(crate) fn code_vectors(cfg: &ModelConfig) -> Vec<Vec<Vec<f64>>> {
        (0..cfg.levels)
            .map(|l| {
                (0..cfg.codebook_size)
                    .map(|c| (0..cfg.code_dim).map(|k| ((l * 5 + c * 3 + k) as f64 * 0.91).cos()).collect())
                    .collect()
            })
            .collect()
    }

    fn build(cfg: &ModelConfig) -> (ParamStore, Representation) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = Representation::build(cfg, &code_vectors(cfg), &mut store, &mut rng).unwrap();
        (store, r)
    }

    #[test]
    fn logits_one_zero_zero_give_hand_softmax() {
        let mut t_store = ParamStore::new();
        let e = t_store.add("e", 3, 2, ParamKind::Dense, vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let mut t = Tape::new(&t_store);
        let q = t.row_const(&[2.0f64.sqrt(), 0.0]);
        let ev = t.param(e);
        let logits = t.matmul_t(q, ev);
        let logits = t.scale(logits, 1.0 / 2.0f64.sqrt());
        let a = t.softmax(logits);
        let v = t.value(a);
        assert!((v[0] - 0.5761).abs() < 1e-4 && (v[1] - 0.2119).abs() < 1e-4 && (v[2] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let cfg = tiny_cfg();
        let (mut store, r) = build(&cfg);
        let tt = store.get_mut(r.token_table);
        let first = tt.row(0).to_vec();
        for row in 0..tt.rows {
            tt.data[row * tt.cols..(row + 1) * tt.cols].copy_from_slice(&first);
        }
        let ct = store.get_mut(r.code_table);
        let first = ct.row(0).to_vec();
        for row in 0..ct.rows {
            ct.data[row * ct.cols..(row + 1) * ct.cols].copy_from_slice(&first);
        }
        let mut t = Tape::new(&store);
        let ctx = r.score_tokens(&mut t, &[1.0, 2.0, 3.0, 4.0, 5.0], &[0, 2, 3]).unwrap();
        for a in t.value(ctx.alpha) {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        let e0 = r.token(&mut t, 1, 0);
        for (x, y) in t.value(ctx.s0).iter().zip(t.value(e0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pooling_ablation_is_uniform() {
        let mut cfg = tiny_cfg();
        cfg.ablations.no_mm_scoring = true;
        let (store, r) = build(&cfg);
        let mut t = Tape::new(&store);
        let ctx = r.score_tokens(&mut t, &[1.0, -2.0, 3.0, 0.5, 5.0], &[1, 2, 3]).unwrap();
        assert_eq!(t.value(ctx.alpha), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn zero_memory_gives_zero_intra_evidence() {
        let cfg = tiny_cfg();
        let (mut store, r) = build(&cfg);
        for &id in r.intra.table_params() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut t = Tape::new(&store);
        let s0 = t.row_const(&[0.1; 8]);
        let ev = r.intra_evidence(&mut t, s0, &[1, 2, 3]).unwrap();
        assert_eq!(ev.len(), 2);
        for e in ev {
            assert!(t.value(e).iter().all(|&x| x == 0.0));
        }
        assert_eq!(store.get(r.adapters[1].0).cols, 2 * cfg.addr_dim);
    }

    #[test]
    fn single_level_has_no_intra_evidence() {
        let mut cfg = tiny_cfg();
        cfg.levels = 1;
        let cv = vec![code_vectors(&tiny_cfg())[0].clone()];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Representation::build(&cfg, &cv, &mut store, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let s0 = t.row_const(&[0.0; 8]);
        assert!(r.intra_evidence(&mut t, s0, &[1]).unwrap().is_empty());
    }

    #[test]
    fn one_dimensional_gated_residual() {
        let mut store = ParamStore::new();
        let wq = store.add("wq", 1, 1, ParamKind::Dense, vec![1.0]);
        let wk = store.add("wk", 1, 1, ParamKind::Dense, vec![1.0]);
        let wv = store.add("wv", 1, 1, ParamKind::Dense, vec![1.0]);
        let b = store.zeros("b", 1, 1);
        let mut t = Tape::new(&store);
        let s = t.row_const(&[1.0]);
        let u = t.row_const(&[1.0]);
        let (next, gate) = gated_residual(&mut t, s, u, wq, wk, wv, b, None);
        assert!((t.scalar(gate) - sigmoid(1.0)).abs() < 1e-12);
        assert!((t.scalar(next) - 1.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn closed_gates_and_zero_memory_pass_s0_through() {
        let cfg = tiny_cfg();
        let (store, r) = build(&cfg);
        let mut t = Tape::new(&store);
        let s0 = t.row_const(&[0.5, -1.0, 2.0, 0.0, 1.0, 3.0, -2.0, 0.25]);
        let zeros: Vec<Var> = (0..3).map(|_| t.zeros(1, 8)).collect();
        let closed = r.merge(&mut t, s0, &zeros[..2], &zeros, Some(0.0)).unwrap();
        let open = r.merge(&mut t, s0, &zeros[..2], &zeros, None).unwrap();
        let (g, b) = (t.param(r.norm.0), t.param(r.norm.1));
        let ln = t.layer_norm(s0, g, b);
        assert_eq!(t.value(closed.r), t.value(ln));
        assert_eq!(t.value(open.r), t.value(ln));
        for g in open.gates {
            assert_eq!(t.scalar(g), 0.5);
        }
    }

    #[test]
    fn window_of_one_returns_the_context() {
        let cfg = tiny_cfg();
        let (store, r) = build(&cfg);
        let mut t = Tape::new(&store);
        let s = t.row_const(&[0.3, 0.1, -0.2, 0.9, 1.0, 0.0, -0.5, 0.2]);
        let (wq, wk) = r.pool_params(1);
        let q = window_pool(&mut t, wq, wk, s, &[s]);
        assert_eq!(t.value(q), t.value(s));
    }

    #[test]
    fn output_length_matches_history_for_each_builder() {
        let base = tiny_cfg();
        let catalog = tiny_catalog(&base);
        let history = [0, 3, 2, 5];
        for (flags, rows) in [("", 4), ("flatten-baseline", 12), ("naive-token-merge", 4)] {
            let cfg = ModelConfig { ablations: crate::config::Ablations::parse(flags).unwrap(), ..base.clone() };
            let (store, r) = build(&cfg);
            let mut t = Tape::new(&store);
            let inp = r.build_inputs(&mut t, &catalog, &history).unwrap();
            assert_eq!(t.shape(inp.r), (rows, cfg.hidden));
        }
    }

    #[test]
    fn transition_pattern_uses_level_one_prefixes() {
        let cfg = ModelConfig { codebook_size: 4, ..tiny_cfg() };
        let (_, r) = build(&cfg);
        let sids = [[1u32, 0, 0], [2, 3, 1], [1, 2, 2]];
        let units: Vec<u64> = sids.iter().map(|s| r.unit(s, 1)).collect();
        assert_eq!(units, vec![1, 2, 1]);
        assert_eq!(r.inter.alloc.spec.max_order(1), 3);
    }

    #[test]
    fn inter_evidence_is_causal() {
        let cfg = tiny_cfg();
        let catalog = tiny_catalog(&cfg);
        let (store, r) = build(&cfg);
        let mut t = Tape::new(&store);
        let a = r.build_inputs(&mut t, &catalog, &[0, 1, 2, 3]).unwrap();
        let b = r.build_inputs(&mut t, &catalog, &[0, 1, 5, 4]).unwrap();
        let (ra, rb) = (t.value(a.r).to_vec(), t.value(b.r).to_vec());
        assert_eq!(&ra[..16], &rb[..16]);
        assert_ne!(&ra[16..24], &rb[16..24]);
    }

    #[test]
    fn items_beyond_window_and_pattern_do_not_matter() {
        let cfg = ModelConfig { window: 2, ..tiny_cfg() };
        let catalog = tiny_catalog(&cfg);
        let (store, r) = build(&cfg);
        let mut t = Tape::new(&store);
        // The pattern reaches back 3 items and the window 2, so item 0 of 5 is outside both.
        let a = r.build_inputs(&mut t, &catalog, &[0, 1, 2, 3, 4]).unwrap();
        let b = r.build_inputs(&mut t, &catalog, &[5, 1, 2, 3, 4]).unwrap();
        let (ra, rb) = (t.value(a.r).to_vec(), t.value(b.r).to_vec());
        assert_eq!(&ra[32..40], &rb[32..40]);
    }

    #[test]
    fn representation_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let catalog = tiny_catalog(&cfg);
        let (mut store, r) = build(&cfg);
        let history = [0, 3, 1];
        let f = |store: &ParamStore| {
            let mut t = Tape::new(store);
            let inp = r.build_inputs(&mut t, &catalog, &history).unwrap();
            let w = t.constant(3, 8, (0..24).map(|i| ((i * 13) as f64 * 0.29).sin()).collect());
            let y = t.mul(inp.r, w);
            let l = t.sum(y);
            (t.scalar(l), t.backward(l).unwrap())
        };
        let (_, grads) = f(&store);
        let report = gradcheck::check(&mut store, &grads, None, 24, |s| f(s).0);
        assert!(report.passes(1e-4), "{report:?}");
        assert!(report.untouched_checked > 0);
        assert!(grads.dense(r.code_table).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn alpha_is_a_probability_vector(feat in prop::collection::vec(-30.0f64..30.0, 5), codes in prop::collection::vec(0u32..4, 3)) {
            let cfg = tiny_cfg();
            let (store, r) = build(&cfg);
            let mut t = Tape::new(&store);
            let ctx = r.score_tokens(&mut t, &feat, &codes).unwrap();
            let a = t.value(ctx.alpha);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
