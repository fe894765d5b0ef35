//! End-to-end plumbing: synthetic data, quantization, datasets, training runs,
//! scaling sweeps and latency measurements.

pub mod io;
pub mod latency;
pub mod scaling;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use crate::catalog::Catalog;
use crate::config::{ModelConfig, TrainConfig};
use crate::decoder::Metrics;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::quantizer::fit_rq_kmeans;
use crate::quantizer::{train_rqvae, RqVaeConfig};
use crate::quantizer::{CodebookStack, ItemFeatures, QuantizedCatalog, Quantizer, Sid};
use crate::trainer::{evaluate, split_examples, Example, LogRow, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantizerKind {
    #[default]
    RqKMeans,
    RqVae,
}

impl FromStr for QuantizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rq-kmeans" => Ok(Self::RqKMeans),
            "rq-vae" => Ok(Self::RqVae),
            _ => Err(Error::InvalidArgument(format!("unknown quantizer `{s}` (expected rq-kmeans or rq-vae)"))),
        }
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RqKMeans => "rq-kmeans",
            Self::RqVae => "rq-vae",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeOptions {
    pub kind: QuantizerKind,
    pub levels: usize,
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    /// Latent width and schedule for the autoencoder flavour.
    pub vae: RqVaeConfig,
    pub seed: u64,
}

impl QuantizeOptions {
    pub fn new(kind: QuantizerKind, levels: usize, codebook_size: usize, seed: u64) -> Self {
        let vae = RqVaeConfig { levels, codebook_size, seed, ..Default::default() };
        Self { kind, levels, codebook_size, kmeans_iters: 25, vae, seed }
    }
}

/// Fits the chosen quantizer and assigns every item a Sid. The returned
/// codebooks live in the space the Sids were assigned in.
pub fn quantize(items: &[ItemFeatures], opts: &QuantizeOptions) -> Result<(CodebookStack, QuantizedCatalog)> {
    let q = match opts.kind {
        QuantizerKind::RqKMeans => {
            Quantizer::KMeans(fit_rq_kmeans(items, opts.levels, opts.codebook_size, opts.kmeans_iters, opts.seed)?)
        }
        QuantizerKind::RqVae => Quantizer::Vae(train_rqvae(items, &opts.vae)?),
    };
    let cat = q.quantize(items)?;
    Ok((q.books(), cat))
}

/// Everything a command-line run can configure, read from one `key=value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: synth::SynthSpec,
    pub quantizer: QuantizerKind,
    pub kmeans_iters: usize,
    pub vae_latent_dim: usize,
    pub vae_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vae = RqVaeConfig::default();
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: synth::SynthSpec::default(),
            quantizer: QuantizerKind::default(),
            kmeans_iters: 25,
            vae_latent_dim: vae.latent_dim,
            vae_steps: vae.steps,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse { line: i + 1, msg: "expected key=value".into() })?;
            let (k, v) = (k.trim(), v.trim());
            if !cfg.set(k, v)? {
                return Err(Error::Parse { line: i + 1, msg: format!("unknown key `{k}`") });
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| v.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")));
        match key {
            "seed" => self.set_seed(value.parse().map_err(|_| Error::InvalidArgument(format!("bad seed `{value}`")))?),
            "quantizer" => self.quantizer = value.parse()?,
            "kmeans_iters" => self.kmeans_iters = num(value)?,
            "vae_latent_dim" => self.vae_latent_dim = num(value)?,
            "vae_steps" => self.vae_steps = num(value)?,
            _ => return Ok(self.model.set(key, value)? || self.train.set(key, value)? || self.synth.set(key, value)?),
        }
        Ok(true)
    }

    /// One seed drives data generation, quantization, initialization and batching.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.synth.seed = seed;
        self.train.seeds = vec![seed];
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn quantize_options(&self) -> QuantizeOptions {
        let mut q = QuantizeOptions::new(self.quantizer, self.model.levels, self.model.codebook_size, self.seed());
        q.kmeans_iters = self.kmeans_iters;
        q.vae.latent_dim = self.vae_latent_dim;
        q.vae.steps = self.vae_steps;
        q.vae.kmeans_iters = self.kmeans_iters;
        q
    }
}

/// Catalog, chronological user histories and frozen code vectors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: Catalog,
    pub users: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    pub code_vectors: Vec<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn from_parts(
        items: &[ItemFeatures],
        users: &[(String, Vec<String>)],
        sids: &[(String, Sid)],
        books: &CodebookStack,
        codebook_size: usize,
    ) -> Result<Self> {
        let catalog = io::build_catalog(items, sids, codebook_size)?;
        if books.levels() != catalog.levels {
            return Err(Error::DimensionMismatch { expected: catalog.levels, got: books.levels() });
        }
        let sequences = io::index_sequences(&catalog, users)?;
        Ok(Self { catalog, users: users.iter().map(|(u, _)| u.clone()).collect(), sequences, code_vectors: books.layers.clone() })
    }

    pub fn from_synth(spec: &synth::SynthSpec, opts: &QuantizeOptions) -> Result<Self> {
        let data = spec.generate()?;
        let (books, q) = quantize(&data.items, opts)?;
        let users: Vec<(String, Vec<String>)> = data
            .users
            .iter()
            .map(|(u, seq)| (u.clone(), seq.iter().map(|&i| data.items[i].item_id.clone()).collect()))
            .collect();
        Self::from_parts(&data.items, &users, &q.sids, &books, opts.codebook_size)
    }

    /// Copies the data-dependent widths into a model configuration.
    pub fn configure(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            levels: self.catalog.levels,
            codebook_size: self.catalog.codebook_size,
            code_dim: self.code_vectors[0][0].len(),
            feature_dim: self.catalog.feature_dim(),
            ..base.clone()
        }
    }

    pub fn examples(&self, max_history: usize) -> (Vec<Example>, Vec<Example>) {
        split_examples(&self.sequences, max_history)
    }

    /// Histories without their held-out last item.
    pub fn train_sequences(&self) -> Vec<Vec<usize>> {
        self.sequences.iter().map(|s| s[..s.len().saturating_sub(1)].to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub trainer: Trainer,
    pub log: Vec<LogRow>,
    /// Metrics on the held-out targets after the last step.
    pub metrics: Metrics,
}

/// Trains one model from scratch and evaluates it on the held-out targets.
pub fn run_training(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    on_log: impl FnMut(&LogRow),
) -> Result<RunResult> {
    let cfg = ModelConfig { seed, ..ds.configure(model_cfg) };
    let model = Model::new(&cfg, &ds.code_vectors)?;
    let (train, test) = ds.examples(cfg.max_history());
    let mut trainer = Trainer::new(model, train_cfg.clone(), seed)?;
    let log = trainer.run(&ds.catalog, &train, &test, on_log)?;
    let metrics = match log.last() {
        Some(row) if row.step == train_cfg.steps => row.metrics,
        _ => {
            let limit = eval_limit(train_cfg, test.len());
            evaluate(&trainer.model, &ds.catalog, &test[..limit], train_cfg.beam)?.0
        }
    };
    Ok(RunResult { trainer, log, metrics })
}

pub fn eval_limit(cfg: &TrainConfig, available: usize) -> usize {
    if cfg.eval_users == 0 {
        available
    } else {
        cfg.eval_users.min(available)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_dataset() -> Dataset {
        let spec = synth::SynthSpec { items: 48, users: 30, clusters: 3, sub_clusters: 2, feature_dim: 6, min_len: 3, max_len: 6, ..Default::default() };
        Dataset::from_synth(&spec, &QuantizeOptions::new(QuantizerKind::RqKMeans, 3, 4, 1)).unwrap()
    }

    #[test]
    fn run_config_dispatches_keys() {
        let c = RunConfig::parse("# desk\nhidden=32\nsteps=10\nusers=50\nquantizer=rq-vae\nvae_steps=7\nseed=9\n").unwrap();
        assert_eq!((c.model.hidden, c.train.steps, c.synth.users, c.quantizer), (32, 10, 50, QuantizerKind::RqVae));
        assert_eq!((c.model.seed, c.synth.seed, c.train.seeds.clone()), (9, 9, vec![9]));
        let q = c.quantize_options();
        assert_eq!((q.vae.steps, q.seed, q.levels), (7, 9, 3));
        assert!(matches!(RunConfig::parse("bogus=1"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("hidden").is_err());
    }

    #[test]
    fn quantizer_names() {
        assert_eq!("rq-vae".parse::<QuantizerKind>().unwrap(), QuantizerKind::RqVae);
        assert_eq!(QuantizerKind::RqKMeans.to_string(), "rq-kmeans");
        assert!("pq".parse::<QuantizerKind>().is_err());
    }

    #[test]
    fn synthetic_dataset_feeds_a_short_run() {
        let ds = tiny_dataset();
        assert_eq!(ds.sequences.len(), 30);
        let base = ModelConfig {
            hidden: 8,
            token_dim: 4,
            addr_dim: 8,
            h_max: 97,
            enc_layers: 1,
            enc_heads: 2,
            ffn: 16,
            max_len: 16,
            ..Default::default()
        };
        let tc = TrainConfig { steps: 3, batch: 4, eval_every: 3, eval_users: 5, beam: 5, ..Default::default() };
        let r = run_training(&ds, &base, &tc, 42, |_| {}).unwrap();
        assert_eq!(r.log.len(), 1);
        assert_eq!(r.metrics.users, 5);
        assert_eq!(r.trainer.model.cfg.code_dim, 6);
    }

    #[test]
    fn vae_quantizer_yields_latent_codebooks() {
        let data = synth::SynthSpec { items: 40, users: 2, feature_dim: 6, clusters: 2, sub_clusters: 2, ..Default::default() }
            .generate()
            .unwrap();
        let mut opts = QuantizeOptions::new(QuantizerKind::RqVae, 2, 4, 3);
        opts.vae.latent_dim = 3;
        opts.vae.steps = 5;
        let (books, q) = quantize(&data.items, &opts).unwrap();
        assert_eq!(books.dim(), 3);
        assert_eq!(q.sids.len(), 40);
    }
}
