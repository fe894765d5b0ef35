//! Model configuration, architecture variant and ablation switches.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    /// One user state for every Sid layer.
    #[default]
    Normal,
    /// Placeholder tokens plus a recurrent state threaded across Sid layers.
    Nezha,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Variant::Normal),
            "nezha" => Ok(Variant::Nezha),
            _ => Err(Error::InvalidArgument(format!("unknown variant `{s}` (expected normal or nezha)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Normal => "normal",
            Variant::Nezha => "nezha",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_mm_scoring: bool,
    pub no_enc_intra: bool,
    pub no_enc_inter: bool,
    pub no_dec_intra: bool,
    pub no_dec_inter: bool,
    pub linear_merge: bool,
    /// Token-level baseline: every Sid code is its own encoder input.
    pub flatten_baseline: bool,
    /// Item-level baseline: a linear layer over concatenated code embeddings.
    pub naive_token_merge: bool,
}

pub const ABLATION_FLAGS: [&str; 8] = [
    "no-mm-scoring",
    "no-enc-intra",
    "no-enc-inter",
    "no-dec-intra",
    "no-dec-inter",
    "linear-merge",
    "flatten-baseline",
    "naive-token-merge",
];

impl Ablations {
    /// Parses a comma-separated flag list; an empty string means none.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for flag in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let slot = match flag {
                "no-mm-scoring" => &mut a.no_mm_scoring,
                "no-enc-intra" => &mut a.no_enc_intra,
                "no-enc-inter" => &mut a.no_enc_inter,
                "no-dec-intra" => &mut a.no_dec_intra,
                "no-dec-inter" => &mut a.no_dec_inter,
                "linear-merge" => &mut a.linear_merge,
                "flatten-baseline" => &mut a.flatten_baseline,
                "naive-token-merge" => &mut a.naive_token_merge,
                other => return Err(Error::InvalidArgument(format!("unknown ablation flag `{other}`"))),
            };
            *slot = true;
        }
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.flatten_baseline && self.naive_token_merge {
            return Err(Error::ContradictoryFlags("flatten-baseline and naive-token-merge are both baselines".into()));
        }
        let memory_flags = self.no_mm_scoring
            || self.no_enc_intra
            || self.no_enc_inter
            || self.no_dec_intra
            || self.no_dec_inter
            || self.linear_merge;
        if self.is_baseline() && memory_flags {
            return Err(Error::ContradictoryFlags("baselines have no memory components to ablate".into()));
        }
        Ok(())
    }

    pub fn is_baseline(&self) -> bool {
        self.flatten_baseline || self.naive_token_merge
    }

    pub fn names(&self) -> Vec<&'static str> {
        let on = [
            self.no_mm_scoring,
            self.no_enc_intra,
            self.no_enc_inter,
            self.no_dec_intra,
            self.no_dec_inter,
            self.linear_merge,
            self.flatten_baseline,
            self.naive_token_merge,
        ];
        ABLATION_FLAGS.iter().zip(on).filter(|(_, b)| *b).map(|(n, _)| *n).collect()
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub codebook_size: usize,
    /// Width of the frozen per-code vectors (the quantizer latent width).
    pub code_dim: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    /// Width of the learnable per-code vectors.
    pub token_dim: usize,
    pub addr_dim: usize,
    pub intra_heads: usize,
    pub inter_heads: usize,
    pub intra_scale: f64,
    pub inter_scale: f64,
    pub h_max: u64,
    pub d_max: u64,
    pub window: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 32,
            code_dim: 16,
            feature_dim: 16,
            hidden: 64,
            token_dim: 32,
            addr_dim: 32,
            intra_heads: 2,
            inter_heads: 4,
            intra_scale: 1.0,
            inter_scale: 2.0,
            h_max: 65_536,
            d_max: 2_097_152,
            window: 8,
            enc_layers: 2,
            enc_heads: 4,
            ffn: 256,
            max_len: 64,
            variant: Variant::Normal,
            ablations: Ablations::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.levels == 0 || self.codebook_size == 0 {
            return bad("levels and codebook size must be positive");
        }
        if self.hidden == 0 || self.enc_heads == 0 || self.hidden % self.enc_heads != 0 {
            return bad("hidden width must be a positive multiple of the attention heads");
        }
        if self.addr_dim % self.intra_heads != 0 || self.addr_dim % self.inter_heads != 0 {
            return bad("address width must be divisible by both head counts");
        }
        if self.window == 0 || self.max_len <= self.levels {
            return bad("window must be positive and max_len must exceed the Sid length");
        }
        if self.variant == Variant::Nezha && self.ablations.is_baseline() {
            return Err(Error::ContradictoryFlags("baselines use the normal variant".into()));
        }
        self.ablations.validate()
    }

    /// Longest history the encoder accepts for this configuration.
    pub fn max_history(&self) -> usize {
        if self.ablations.flatten_baseline {
            (self.max_len - (self.levels - 1)) / self.levels
        } else if self.variant == Variant::Nezha {
            self.max_len - self.levels
        } else {
            self.max_len
        }
    }

    /// Line-oriented `key=value` echo, also used inside checkpoints.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("levels", self.levels.to_string());
        put("codebook_size", self.codebook_size.to_string());
        put("code_dim", self.code_dim.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("hidden", self.hidden.to_string());
        put("token_dim", self.token_dim.to_string());
        put("addr_dim", self.addr_dim.to_string());
        put("intra_heads", self.intra_heads.to_string());
        put("inter_heads", self.inter_heads.to_string());
        put("intra_scale", self.intra_scale.to_string());
        put("inter_scale", self.inter_scale.to_string());
        put("h_max", self.h_max.to_string());
        put("d_max", self.d_max.to_string());
        put("window", self.window.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("enc_heads", self.enc_heads.to_string());
        put("ffn", self.ffn.to_string());
        put("max_len", self.max_len.to_string());
        put("variant", self.variant.to_string());
        put("ablate", self.ablations.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// Applies one `key=value` setting; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "levels" => self.levels = p(key, value)?,
            "codebook_size" => self.codebook_size = p(key, value)?,
            "code_dim" => self.code_dim = p(key, value)?,
            "feature_dim" => self.feature_dim = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "token_dim" => self.token_dim = p(key, value)?,
            "addr_dim" => self.addr_dim = p(key, value)?,
            "intra_heads" => self.intra_heads = p(key, value)?,
            "inter_heads" => self.inter_heads = p(key, value)?,
            "intra_scale" => self.intra_scale = p(key, value)?,
            "inter_scale" => self.inter_scale = p(key, value)?,
            "h_max" => self.h_max = p(key, value)?,
            "d_max" => self.d_max = p(key, value)?,
            "window" => self.window = p(key, value)?,
            "enc_layers" => self.enc_layers = p(key, value)?,
            "enc_heads" => self.enc_heads = p(key, value)?,
            "ffn" => self.ffn = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "variant" => self.variant = value.parse()?,
            "ablate" => self.ablations = Ablations::parse(value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse { line: i + 1, msg: "expected key=value".into() })?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Parse { line: i + 1, msg: format!("unknown key `{}`", k.trim()) });
            }
        }
        Ok(cfg)
    }
}

/// Optimisation and evaluation settings for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Micro-batches accumulated into one update.
    pub accum: usize,
    pub steps: u64,
    pub eval_every: u64,
    /// Cap on users scored at each evaluation (0 means all).
    pub eval_users: usize,
    pub beam: usize,
    pub clip_norm: f64,
    /// Number of recent step losses averaged into the smoothed loss.
    pub smooth_window: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch: 16,
            accum: 1,
            steps: 2000,
            eval_every: 100,
            eval_users: 256,
            beam: 20,
            clip_norm: 5.0,
            smooth_window: 50,
            seeds: vec![42],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("lr and weight decay must be non-negative, clip positive".into()));
        }
        if self.batch == 0 || self.accum == 0 || self.beam == 0 || self.smooth_window == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("batch, accum, beam, eval_every and smooth_window must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "lr={}\nweight_decay={}\nbatch={}\naccum={}\nsteps={}\neval_every={}\neval_users={}\nbeam={}\nclip_norm={}\nsmooth_window={}\nseeds={}\n",
            self.lr,
            self.weight_decay,
            self.batch,
            self.accum,
            self.steps,
            self.eval_every,
            self.eval_users,
            self.beam,
            self.clip_norm,
            self.smooth_window,
            seeds.join(",")
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "lr" => self.lr = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "accum" => self.accum = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "eval_users" => self.eval_users = p(key, value)?,
            "beam" => self.beam = p(key, value)?,
            "clip_norm" => self.clip_norm = p(key, value)?,
            "smooth_window" => self.smooth_window = p(key, value)?,
            "seeds" => {
                self.seeds = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| p(key, s)).collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Reads a `key=value` file holding model and training settings together.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::Parse { line: i + 1, msg: "expected key=value".into() })?;
        let (k, v) = (k.trim(), v.trim());
        if !model.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Parse { line: i + 1, msg: format!("unknown key `{k}`") });
        }
    }
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_and_conflict() {
        let a = Ablations::parse("no-mm-scoring, linear-merge").unwrap();
        assert!(a.no_mm_scoring && a.linear_merge && !a.no_enc_inter);
        assert_eq!(Ablations::parse("").unwrap(), Ablations::default());
        assert!(matches!(
            Ablations::parse("flatten-baseline,naive-token-merge"),
            Err(Error::ContradictoryFlags(_))
        ));
        assert!(matches!(Ablations::parse("flatten-baseline,no-enc-inter"), Err(Error::ContradictoryFlags(_))));
        assert!(Ablations::parse("bogus").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig { variant: Variant::Nezha, inter_scale: 1.5, ..Default::default() };
        c.ablations.no_dec_intra = true;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(ModelConfig::from_kv("nope=1").is_err());
    }

    #[test]
    fn combined_file_round_trip() {
        let m = ModelConfig { hidden: 32, ..Default::default() };
        let t = TrainConfig { seeds: vec![42, 43, 44], lr: 5e-4, ..Default::default() };
        let (m2, t2) = parse_config(&format!("# run\n{}{}", m.to_kv(), t.to_kv())).unwrap();
        assert_eq!((m2, t2), (m, t));
        assert!(matches!(parse_config("beam=2\nwhat=1"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_config("beam").is_err());
    }

    #[test]
    fn variant_strings() {
        assert_eq!("nezha".parse::<Variant>().unwrap(), Variant::Nezha);
        assert!("big".parse::<Variant>().is_err());
    }
}
