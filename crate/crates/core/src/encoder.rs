//! Small causal transformer standing in for the language-model backbone, plus
//! the placeholder tokens and GRU transition used by the NEZHA variant.

use rand::Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// One GRU transition between consecutive Sid layers.
#[derive(Clone, Debug)]
pub struct GruCell {
    /// Input projections for the update, reset and candidate gates.
    pub w: [ParamId; 3],
    /// State projections, same order.
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    /// Maps `[code embedding ; next-level query]` to the cell input.
    pub delta: ParamId,
}

impl GruCell {
    fn build<R: Rng>(store: &mut ParamStore, d: usize, level: usize, rng: &mut R) -> Self {
        let gate = ["z", "r", "n"];
        Self {
            w: gate.map(|g| store.uniform(format!("enc.gru.l{level}.w{g}"), d, d, rng)),
            u: gate.map(|g| store.uniform(format!("enc.gru.l{level}.u{g}"), d, d, rng)),
            b: gate.map(|g| store.zeros(format!("enc.gru.l{level}.b{g}"), 1, d)),
            delta: store.uniform(format!("enc.gru.l{level}.delta"), d, 2 * d, rng),
        }
    }

    pub fn input(&self, tape: &mut Tape, code_emb: Var, query: Var) -> Var {
        let x = tape.concat_cols(&[code_emb, query]);
        let w = tape.param(self.delta);
        tape.linear(x, w, None)
    }

    /// `h' = (1 - z) * h + z * n`, so a closed update gate keeps the state.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let pre = |tape: &mut Tape, k: usize, state: Option<Var>| {
            let w = tape.param(self.w[k]);
            let b = tape.param(self.b[k]);
            let a = tape.linear(x, w, Some(b));
            match state {
                Some(s) => {
                    let u = tape.param(self.u[k]);
                    let hs = tape.linear(s, u, None);
                    tape.add(a, hs)
                }
                None => a,
            }
        };
        let z = pre(tape, 0, Some(h));
        let z = tape.sigmoid(z);
        let r = pre(tape, 1, Some(h));
        let r = tape.sigmoid(r);
        let u = tape.param(self.u[2]);
        let uh = tape.linear(h, u, None);
        let gated = tape.mul(r, uh);
        let xn = pre(tape, 2, None);
        let n = tape.add(xn, gated);
        let n = tape.tanh(n);
        let diff = tape.sub(n, h);
        let step = tape.mul(z, diff);
        tape.add(h, step)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// One row per input position (placeholders included).
    pub hidden: Var,
    /// State at the last history position.
    pub h_u: Var,
    /// Hidden states of the appended placeholders (NEZHA only).
    pub placeholders: Vec<Var>,
    pub input_len: usize,
}

impl EncoderOutput {
    /// Layer-specific decoding state `state + h_level`.
    pub fn layer_state(&self, tape: &mut Tape, level: usize, state: Var) -> Result<Var> {
        if self.placeholders.is_empty() {
            return Err(Error::WrongVariant("layer states exist only for the nezha variant"));
        }
        let p = *self
            .placeholders
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("no placeholder for level {level}")))?;
        Ok(tape.add(state, p))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub positions: ParamId,
    blocks: Vec<Block>,
    final_norm: (ParamId, ParamId),
    pub placeholders: Option<ParamId>,
    /// `gru[l-1]` moves the state from layer `l` to `l + 1`.
    pub gru: Vec<GruCell>,
}

impl Encoder {
    pub fn build<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let positions = store.normal("enc.pos", cfg.max_len, d, 0.02, rng);
        let blocks = (0..cfg.enc_layers)
            .map(|i| {
                let p = |s: &str| format!("enc.b{i}.{s}");
                Block {
                    ln1: (store.ones(p("ln1.g"), 1, d), store.zeros(p("ln1.b"), 1, d)),
                    qkv: (store.uniform(p("qkv.w"), 3 * d, d, rng), store.zeros(p("qkv.b"), 1, 3 * d)),
                    out: (store.uniform(p("out.w"), d, d, rng), store.zeros(p("out.b"), 1, d)),
                    ln2: (store.ones(p("ln2.g"), 1, d), store.zeros(p("ln2.b"), 1, d)),
                    ff1: (store.uniform(p("ff1.w"), cfg.ffn, d, rng), store.zeros(p("ff1.b"), 1, cfg.ffn)),
                    ff2: (store.uniform(p("ff2.w"), d, cfg.ffn, rng), store.zeros(p("ff2.b"), 1, d)),
                }
            })
            .collect();
        let final_norm = (store.ones("enc.ln.g", 1, d), store.zeros("enc.ln.b", 1, d));
        let (placeholders, gru) = if cfg.variant == Variant::Nezha {
            let ph = store.normal("enc.placeholders", cfg.levels, d, 0.02, rng);
            let gru = (1..cfg.levels).map(|l| GruCell::build(store, d, l, rng)).collect();
            (Some(ph), gru)
        } else {
            (None, Vec::new())
        };
        Self {
            hidden: d,
            heads: cfg.enc_heads,
            max_len: cfg.max_len,
            variant: cfg.variant,
            positions,
            blocks,
            final_norm,
            placeholders,
            gru,
        }
    }

    /// Number of positions the stack sees for `n` input rows.
    pub fn sequence_len(&self, n: usize) -> usize {
        n + self.placeholders.map_or(0, |_| self.gru.len() + 1)
    }

    fn attention(&self, tape: &mut Tape, x: Var, block: &Block) -> Var {
        let d = self.hidden;
        let dh = d / self.heads;
        let (w, b) = (tape.param(block.qkv.0), tape.param(block.qkv.1));
        let qkv = tape.linear(x, w, Some(b));
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let q = tape.slice_cols(qkv, h * dh, dh);
                let k = tape.slice_cols(qkv, d + h * dh, dh);
                let v = tape.slice_cols(qkv, 2 * d + h * dh, dh);
                let s = tape.matmul_t(q, k);
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
                let a = tape.causal_softmax(s);
                tape.matmul(a, v)
            })
            .collect();
        let cat = tape.concat_cols(&heads);
        let (w, b) = (tape.param(block.out.0), tape.param(block.out.1));
        tape.linear(cat, w, Some(b))
    }

    pub fn encode(&self, tape: &mut Tape, inputs: Var) -> Result<EncoderOutput> {
        let (n, cols) = tape.shape(inputs);
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if cols != self.hidden {
            return Err(Error::DimensionMismatch { expected: self.hidden, got: cols });
        }
        let len = self.sequence_len(n);
        if len > self.max_len {
            return Err(Error::SequenceTooLong { len, max: self.max_len });
        }
        let mut x = match self.placeholders {
            Some(ph) => {
                let ph = tape.param(ph);
                tape.stack_rows(&[inputs, ph])
            }
            None => inputs,
        };
        let pos = tape.param(self.positions);
        let pos = tape.slice_rows(pos, 0, len);
        x = tape.add(x, pos);
        for block in &self.blocks {
            let (g, b) = (tape.param(block.ln1.0), tape.param(block.ln1.1));
            let h = tape.layer_norm(x, g, b);
            let a = self.attention(tape, h, block);
            x = tape.add(x, a);
            let (g, b) = (tape.param(block.ln2.0), tape.param(block.ln2.1));
            let h = tape.layer_norm(x, g, b);
            let (w, bias) = (tape.param(block.ff1.0), tape.param(block.ff1.1));
            let h = tape.linear(h, w, Some(bias));
            let h = tape.gelu(h);
            let (w, bias) = (tape.param(block.ff2.0), tape.param(block.ff2.1));
            let h = tape.linear(h, w, Some(bias));
            x = tape.add(x, h);
        }
        let (g, b) = (tape.param(self.final_norm.0), tape.param(self.final_norm.1));
        let hidden = tape.layer_norm(x, g, b);
        let h_u = tape.row(hidden, n - 1);
        let placeholders = (n..len).map(|i| tape.row(hidden, i)).collect();
        Ok(EncoderOutput { hidden, h_u, placeholders, input_len: len })
    }
}
