//! Memory-restoring prediction head, catalog-constrained beam search and
//! ranking metrics.

use std::cmp::Ordering;

use rand::Rng;

use crate::catalog::Catalog;
use crate::config::ModelConfig;
use crate::engram::ReadOptions;
use crate::error::{Error, Result};
use crate::representation::{window_pool, ItemInputs, Representation};
use crate::tape::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
struct LevelHead {
    state: ParamId,
    code: ParamId,
    intra: Option<ParamId>,
    inter: ParamId,
    out: ParamId,
    norm: (ParamId, ParamId),
    pool: (ParamId, ParamId),
}

#[derive(Clone, Copy, Debug)]
pub struct LevelScores {
    /// Raw logits, `1 x |V|`.
    pub logits: Var,
    /// Log-probabilities normalised over the candidate set only.
    pub log_probs: Var,
}

#[derive(Clone, Debug)]
pub struct Head {
    cfg: ModelConfig,
    levels: Vec<LevelHead>,
}

/// Historical level-`l` prefix units with the candidate's unit appended.
pub fn appended_sequence(history_units: &[u64], candidate_unit: u64) -> Vec<u64> {
    let mut seq = Vec::with_capacity(history_units.len() + 1);
    seq.extend_from_slice(history_units);
    seq.push(candidate_unit);
    seq
}

impl Head {
    pub fn build<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (d, dm) = (cfg.hidden, cfg.addr_dim);
        let levels = (1..=cfg.levels)
            .map(|l| {
                let p = |s: &str| format!("head.l{l}.{s}");
                LevelHead {
                    state: store.uniform(p("state"), d, d, rng),
                    code: store.uniform(p("code"), d, d, rng),
                    intra: (l >= 2).then(|| store.uniform(p("intra"), d, dm, rng)),
                    inter: store.uniform(p("inter"), d, dm, rng),
                    out: store.uniform(p("out"), 1, d, rng),
                    norm: (store.ones(p("ln.g"), 1, d), store.zeros(p("ln.b"), 1, d)),
                    pool: (store.uniform(p("pool.wq"), d, d, rng), store.uniform(p("pool.wk"), d, d, rng)),
                }
            })
            .collect();
        Self { cfg: cfg.clone(), levels }
    }

    /// Decode-time transition query: the last `window` history contexts pooled
    /// with `probe` as the query.
    pub fn decode_query(&self, tape: &mut Tape, level: usize, probe: Var, contexts: &[Var]) -> Result<Var> {
        if contexts.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (wq, wk) = self.levels[level - 1].pool;
        let window = &contexts[contexts.len().saturating_sub(self.cfg.window)..];
        Ok(window_pool(tape, wq, wk, probe, window))
    }

    fn uses_inter(&self, repr: &Representation, level: usize) -> bool {
        let ab = self.cfg.ablations;
        !ab.is_baseline() && !ab.no_dec_inter && repr.inter.alloc.spec.is_active(level)
    }

    fn uses_intra(&self, repr: &Representation, level: usize) -> bool {
        let ab = self.cfg.ablations;
        level >= 2 && !ab.is_baseline() && !ab.no_dec_intra && repr.intra.alloc.spec.is_active(level)
    }

    /// Memory term for every candidate, one row each; `None` when the head
    /// runs without memory at this level.
    #[allow(clippy::too_many_arguments)]
    pub fn memory_rows(
        &self,
        tape: &mut Tape,
        repr: &Representation,
        level: usize,
        zeta: Var,
        prefix: &[u32],
        candidates: &[u32],
        history: &ItemInputs,
    ) -> Result<Option<Var>> {
        let lh = &self.levels[level - 1];
        let mut terms = Vec::new();
        if self.uses_inter(repr, level) {
            let q = self.decode_query(tape, level, zeta, &history.contexts)?;
            let qp = repr.inter.project_query(tape, level, q)?;
            let units = &history.units[level - 1];
            let mut full = prefix.to_vec();
            full.push(0);
            let mut reads = Vec::with_capacity(candidates.len());
            for &x in candidates {
                *full.last_mut().unwrap() = x;
                let seq = appended_sequence(units, repr.unit(&full, level));
                reads.push(repr.inter.read_projected(tape, level, qp, &seq, ReadOptions::default())?.out);
            }
            let r = tape.stack_rows(&reads);
            let w = tape.param(lh.inter);
            terms.push(tape.linear(r, w, None));
        }
        if self.uses_intra(repr, level) {
            let qp = repr.intra.project_query(tape, level, zeta)?;
            let mut pattern: Vec<u64> = prefix.iter().map(|&c| c as u64).collect();
            pattern.push(0);
            let mut reads = Vec::with_capacity(candidates.len());
            for &x in candidates {
                *pattern.last_mut().unwrap() = x as u64;
                reads.push(repr.intra.read_projected(tape, level, qp, &pattern, ReadOptions::default())?.out);
            }
            let r = tape.stack_rows(&reads);
            let w = tape.param(lh.intra.expect("intra projection exists from level 2"));
            terms.push(tape.linear(r, w, None));
        }
        Ok(match terms.len() {
            0 => None,
            1 => Some(terms[0]),
            _ => Some(tape.add_n(&terms)),
        })
    }

    /// Scores every candidate code at `level` for a hypothesis with decoding
    /// state `zeta` and generated `prefix`.
    #[allow(clippy::too_many_arguments)]
    pub fn level_scores(
        &self,
        tape: &mut Tape,
        repr: &Representation,
        level: usize,
        zeta: Var,
        prefix: &[u32],
        candidates: &[u32],
        history: &ItemInputs,
    ) -> Result<LevelScores> {
        if candidates.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        if prefix.len() + 1 != level || level > self.cfg.levels {
            return Err(Error::InvalidArgument(format!("prefix of length {} cannot be scored at level {level}", prefix.len())));
        }
        let lh = &self.levels[level - 1];
        let ws = tape.param(lh.state);
        let base = tape.linear(zeta, ws, None);
        let toks: Vec<Var> = candidates.iter().map(|&x| repr.token(tape, level, x)).collect();
        let e = tape.stack_rows(&toks);
        let wc = tape.param(lh.code);
        let mut pre = tape.linear(e, wc, Some(base));
        if let Some(mu) = self.memory_rows(tape, repr, level, zeta, prefix, candidates, history)? {
            pre = tape.add(pre, mu);
        }
        let (g, b) = (tape.param(lh.norm.0), tape.param(lh.norm.1));
        let d = tape.layer_norm(pre, g, b);
        let w = tape.param(lh.out);
        let logits = tape.matmul_t(w, d);
        let log_probs = tape.log_softmax(logits);
        Ok(LevelScores { logits, log_probs })
    }
}

/// Hooks a beam search needs from a model; states are per hypothesis.
pub trait Scorer {
    type State: Clone;
    fn root(&mut self) -> Result<Self::State>;
    /// Log-probabilities of `codes` (the valid children of `prefix`).
    fn log_probs(&mut self, level: usize, state: &Self::State, prefix: &[u32], codes: &[u32]) -> Result<Vec<f64>>;
    /// State for `level + 1` once `prefix` (now of length `level`) is fixed.
    fn advance(&mut self, level: usize, state: &Self::State, prefix: &[u32]) -> Result<Self::State>;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub prefix: Vec<u32>,
    pub score: f64,
    pub state: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedItem {
    pub item: usize,
    pub sid: Vec<u32>,
    pub score: f64,
}

fn by_score_then_prefix(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Turns scored Sids into an item ranking: colliding items share their Sid's
/// score and are ordered by id.
fn expand(catalog: &Catalog, mut sids: Vec<(f64, Vec<u32>)>) -> Vec<RankedItem> {
    sids.sort_by(|a, b| by_score_then_prefix((a.0, &a.1), (b.0, &b.1)));
    let mut out = Vec::new();
    for (score, sid) in sids {
        let mut items = catalog.tree.items(&sid).to_vec();
        items.sort_by(|&x, &y| catalog.items[x].id.cmp(&catalog.items[y].id));
        out.extend(items.into_iter().map(|item| RankedItem { item, sid: sid.clone(), score }));
    }
    out
}

/// Layer-wise beam search restricted to the catalog trie.
pub fn beam_search<S: Scorer>(scorer: &mut S, catalog: &Catalog, beam: usize) -> Result<Vec<RankedItem>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let levels = catalog.levels;
    let mut beams = vec![Hypothesis { prefix: Vec::new(), score: 0.0, state: scorer.root()? }];
    for level in 1..=levels {
        let mut next: Vec<(usize, u32, f64)> = Vec::new();
        for (h, hyp) in beams.iter().enumerate() {
            let codes = catalog.tree.valid_codes(&hyp.prefix)?;
            let lp = scorer.log_probs(level, &hyp.state, &hyp.prefix, &codes)?;
            next.extend(codes.iter().zip(lp).map(|(&c, p)| (h, c, hyp.score + p)));
        }
        let key = |&(h, c, _): &(usize, u32, f64)| {
            let mut p = beams[h].prefix.clone();
            p.push(c);
            p
        };
        let mut keyed: Vec<(Vec<u32>, usize, f64)> = next.iter().map(|e| (key(e), e.0, e.2)).collect();
        keyed.sort_by(|a, b| by_score_then_prefix((a.2, &a.0), (b.2, &b.0)));
        keyed.truncate(beam);
        let mut fresh = Vec::with_capacity(keyed.len());
        for (prefix, h, score) in keyed {
            let state = if level < levels { scorer.advance(level, &beams[h].state, &prefix)? } else { beams[h].state.clone() };
            fresh.push(Hypothesis { prefix, score, state });
        }
        beams = fresh;
    }
    Ok(expand(catalog, beams.into_iter().map(|h| (h.score, h.prefix)).collect()))
}

/// Teacher-forced score of one complete Sid.
pub fn sid_score<S: Scorer>(scorer: &mut S, catalog: &Catalog, root: &S::State, sid: &[u32]) -> Result<f64> {
    let mut state = root.clone();
    let mut score = 0.0;
    for level in 1..=sid.len() {
        let prefix = &sid[..level - 1];
        let codes = catalog.tree.valid_codes(prefix)?;
        let idx = codes.binary_search(&sid[level - 1]).map_err(|_| Error::PrefixNotInTree(sid[..level].to_vec()))?;
        let lp = scorer.log_probs(level, &state, prefix, &codes)?;
        score += lp[idx];
        if level < sid.len() {
            state = scorer.advance(level, &state, &sid[..level])?;
        }
    }
    Ok(score)
}

/// Scores every catalog Sid independently; the oracle full-width beam search must match.
pub fn exhaustive<S: Scorer>(scorer: &mut S, catalog: &Catalog) -> Result<Vec<RankedItem>> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let root = scorer.root()?;
    let scored = catalog
        .tree
        .sids()
        .into_iter()
        .map(|sid| Ok((sid_score(scorer, catalog, &root, &sid)?, sid)))
        .collect::<Result<Vec<_>>>()?;
    Ok(expand(catalog, scored))
}

/// 1-based position of `target` in a ranking.
pub fn rank_of(ranked: &[RankedItem], target: usize) -> Option<usize> {
    ranked.iter().position(|r| r.item == target).map(|p| p + 1)
}

pub fn hit_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub hit5: f64,
    pub hit10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub users: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[Option<usize>]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let n = ranks.len() as f64;
        let mean = |f: &dyn Fn(Option<usize>) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
        Ok(Self {
            hit5: mean(&|r| hit_at(r, 5)),
            hit10: mean(&|r| hit_at(r, 10)),
            ndcg5: mean(&|r| ndcg_at(r, 5)),
            ndcg10: mean(&|r| ndcg_at(r, 10)),
            users: ranks.len(),
        })
    }
}
