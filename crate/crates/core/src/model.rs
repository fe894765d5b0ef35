//! The full recommender: item representation, encoder and prediction head
//! over one parameter store, with teacher-forced loss and beam decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::Catalog;
use crate::config::{ModelConfig, Variant};
use crate::decoder::{self, Head, LevelScores, RankedItem, Scorer};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::representation::{ItemInputs, Representation};
use crate::tape::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub repr: Representation,
    pub encoder: Encoder,
    pub head: Head,
}

/// Encoded history shared by every hypothesis of one user.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: ItemInputs,
    pub enc: EncoderOutput,
    pub history: Vec<usize>,
}

/// Per-hypothesis decoding state.
#[derive(Clone, Copy, Debug)]
pub struct DecodeState {
    /// State the head reads at the current level.
    pub zeta: Var,
    /// Recurrent user state (NEZHA only).
    pub recurrent: Option<Var>,
}

/// Per-level pieces of one teacher-forced example.
#[derive(Clone, Debug)]
pub struct ExampleLoss {
    pub total: Var,
    /// `-log P(true code)` at each level.
    pub per_level: Vec<Var>,
}

impl Model {
    /// `code_vectors[l][c]` are the frozen per-code vectors from the quantizer.
    pub fn new(cfg: &ModelConfig, code_vectors: &[Vec<Vec<f64>>]) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let repr = Representation::build(cfg, code_vectors, &mut store, &mut rng)?;
        let encoder = Encoder::build(cfg, &mut store, &mut rng);
        let head = Head::build(cfg, &mut store, &mut rng);
        Ok(Self { cfg: cfg.clone(), store, repr, encoder, head })
    }

    fn is_flat(&self) -> bool {
        self.cfg.ablations.flatten_baseline
    }

    /// Keeps the most recent items that fit the encoder.
    pub fn truncate<'h>(&self, history: &'h [usize]) -> &'h [usize] {
        &history[history.len().saturating_sub(self.cfg.max_history())..]
    }

    pub fn prepare(&self, tape: &mut Tape, catalog: &Catalog, history: &[usize]) -> Result<Prepared> {
        if catalog.levels != self.cfg.levels {
            return Err(Error::DimensionMismatch { expected: self.cfg.levels, got: catalog.levels });
        }
        let history = self.truncate(history);
        let inputs = self.repr.build_inputs(tape, catalog, history)?;
        let enc = self.encoder.encode(tape, inputs.r)?;
        Ok(Prepared { inputs, enc, history: history.to_vec() })
    }

    pub fn root_state(&self, tape: &mut Tape, prep: &Prepared) -> Result<DecodeState> {
        match self.cfg.variant {
            Variant::Normal => Ok(DecodeState { zeta: prep.enc.h_u, recurrent: None }),
            Variant::Nezha => {
                let zeta = prep.enc.layer_state(tape, 1, prep.enc.h_u)?;
                Ok(DecodeState { zeta, recurrent: Some(prep.enc.h_u) })
            }
        }
    }

    pub fn level_scores(
        &self,
        tape: &mut Tape,
        prep: &Prepared,
        level: usize,
        state: &DecodeState,
        prefix: &[u32],
        codes: &[u32],
    ) -> Result<LevelScores> {
        self.head.level_scores(tape, &self.repr, level, state.zeta, prefix, codes, &prep.inputs)
    }

    /// Re-encodes the flattened history followed by the generated tokens.
    fn flat_state(&self, tape: &mut Tape, prep: &Prepared, prefix: &[u32]) -> Result<Var> {
        let mut rows = vec![prep.inputs.r];
        rows.extend(prefix.iter().enumerate().map(|(i, &c)| self.repr.token(tape, i + 1, c)));
        let x = tape.stack_rows(&rows);
        Ok(self.encoder.encode(tape, x)?.h_u)
    }

    /// State for `level + 1` after the code at `level` (the last of `prefix`) is fixed.
    pub fn advance(&self, tape: &mut Tape, prep: &Prepared, level: usize, state: &DecodeState, prefix: &[u32]) -> Result<DecodeState> {
        if self.is_flat() {
            return Ok(DecodeState { zeta: self.flat_state(tape, prep, prefix)?, recurrent: None });
        }
        let Some(h) = state.recurrent else {
            return Ok(*state);
        };
        let code = *prefix.last().ok_or(Error::EmptySequence)?;
        let q = self.head.decode_query(tape, level + 1, state.zeta, &prep.inputs.contexts)?;
        let e = self.repr.token(tape, level, code);
        let cell = &self.encoder.gru[level - 1];
        let x = cell.input(tape, e, q);
        let h = cell.step(tape, x, h);
        let zeta = prep.enc.layer_state(tape, level + 1, h)?;
        Ok(DecodeState { zeta, recurrent: Some(h) })
    }

    /// `-sum_l log P(c_l | history, c_<l)` with the true prefix fed to the head.
    pub fn example_loss(&self, tape: &mut Tape, catalog: &Catalog, history: &[usize], target: usize) -> Result<ExampleLoss> {
        let sid = catalog.sid(target).codes().to_vec();
        let prep = self.prepare(tape, catalog, history)?;
        let l = self.cfg.levels;
        // The token-level baseline gets every level's state from one causal pass.
        let flat_rows = if self.is_flat() {
            let mut rows = vec![prep.inputs.r];
            rows.extend(sid[..l - 1].iter().enumerate().map(|(i, &c)| self.repr.token(tape, i + 1, c)));
            let x = tape.stack_rows(&rows);
            let enc = self.encoder.encode(tape, x)?;
            Some((enc.hidden, prep.enc.input_len))
        } else {
            None
        };
        let mut state = self.root_state(tape, &prep)?;
        let mut per_level = Vec::with_capacity(l);
        for level in 1..=l {
            if let Some((hidden, n)) = flat_rows {
                state.zeta = tape.row(hidden, n + level - 2);
            }
            let prefix = &sid[..level - 1];
            let codes = catalog.tree.valid_codes(prefix)?;
            let idx = codes.binary_search(&sid[level - 1]).map_err(|_| Error::PrefixNotInTree(sid[..level].to_vec()))?;
            let scores = self.level_scores(tape, &prep, level, &state, prefix, &codes)?;
            let lp = tape.pick(scores.log_probs, idx);
            per_level.push(tape.scale(lp, -1.0));
            if level < l && flat_rows.is_none() {
                state = self.advance(tape, &prep, level, &state, &sid[..level])?;
            }
        }
        let total = tape.add_n(&per_level);
        Ok(ExampleLoss { total, per_level })
    }

    pub fn scorer<'m, 'p>(&'m self, tape: Tape<'p>, catalog: &Catalog, history: &[usize]) -> Result<ModelScorer<'m, 'p>> {
        let mut tape = tape;
        let prep = self.prepare(&mut tape, catalog, history)?;
        Ok(ModelScorer { model: self, tape, prep })
    }

    pub fn recommend(&self, catalog: &Catalog, history: &[usize], beam: usize) -> Result<Vec<RankedItem>> {
        let mut s = self.scorer(Tape::new(&self.store), catalog, history)?;
        decoder::beam_search(&mut s, catalog, beam)
    }

    /// Every catalog Sid scored independently, ranked like the beam output.
    pub fn exhaustive(&self, catalog: &Catalog, history: &[usize]) -> Result<Vec<RankedItem>> {
        let mut s = self.scorer(Tape::new(&self.store), catalog, history)?;
        decoder::exhaustive(&mut s, catalog)
    }

    /// Encoder positions consumed for one history (placeholders included).
    pub fn encoder_tokens(&self, history_len: usize) -> usize {
        let n = history_len.min(self.cfg.max_history());
        let rows = if self.is_flat() { n * self.cfg.levels } else { n };
        self.encoder.sequence_len(rows)
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }
}

/// Beam-search adapter evaluating the model on a private tape.
pub struct ModelScorer<'m, 'p> {
    model: &'m Model,
    tape: Tape<'p>,
    prep: Prepared,
}

impl Scorer for ModelScorer<'_, '_> {
    type State = DecodeState;

    fn root(&mut self) -> Result<DecodeState> {
        self.model.root_state(&mut self.tape, &self.prep)
    }

    fn log_probs(&mut self, level: usize, state: &DecodeState, prefix: &[u32], codes: &[u32]) -> Result<Vec<f64>> {
        let s = self.model.level_scores(&mut self.tape, &self.prep, level, state, prefix, codes)?;
        Ok(self.tape.value(s.log_probs).to_vec())
    }

    fn advance(&mut self, level: usize, state: &DecodeState, prefix: &[u32]) -> Result<DecodeState> {
        self.model.advance(&mut self.tape, &self.prep, level, state, prefix)
    }
}
