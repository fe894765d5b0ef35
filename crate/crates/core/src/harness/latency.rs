//! Encoder token counts and wall-clock decoding time, item-level encoding
//! against the flattened Sid-token baseline.

use std::fmt::Write as _;
use std::time::Instant;

use crate::catalog::Catalog;
use crate::config::{Ablations, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;

pub const HEADER: &str = "model,levels,batch,beam,batches,tokens_per_batch,ms_per_batch";

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub model: &'static str,
    pub levels: usize,
    pub batch: usize,
    pub beam: usize,
    pub batches: usize,
    pub tokens_per_batch: usize,
    pub ms_per_batch: f64,
}

impl LatencyRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.model, self.levels, self.batch, self.beam, self.batches, self.tokens_per_batch, self.ms_per_batch
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub item_level: LatencyRow,
    pub flattened: LatencyRow,
}

impl LatencyReport {
    pub fn token_ratio(&self) -> f64 {
        self.flattened.tokens_per_batch as f64 / self.item_level.tokens_per_batch as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.flattened.ms_per_batch / self.item_level.ms_per_batch
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        let _ = writeln!(s, "{}", self.item_level.csv());
        let _ = writeln!(s, "{}", self.flattened.csv());
        let _ = writeln!(s, "ratio,{},,,,{:.3},{:.3}", self.item_level.levels, self.token_ratio(), self.time_ratio());
        s
    }
}

/// Encoder input length summed over a batch of histories.
pub fn batch_tokens(model: &Model, histories: &[&[usize]]) -> usize {
    histories.iter().map(|h| model.encoder_tokens(model.truncate(h).len())).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyOptions {
    pub batch: usize,
    pub beam: usize,
    pub batches: usize,
    pub warmup: usize,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        Self { batch: 32, beam: 20, batches: 20, warmup: 2 }
    }
}

/// Same widths for both models; histories are cut to the length the
/// flattened encoder can hold so both see identical inputs.
pub fn measure(
    catalog: &Catalog,
    code_vectors: &[Vec<Vec<f64>>],
    base: &ModelConfig,
    histories: &[Vec<usize>],
    opts: &LatencyOptions,
) -> Result<LatencyReport> {
    if opts.batch == 0 || opts.batches == 0 || histories.is_empty() {
        return Err(Error::InvalidArgument("latency needs a non-empty batch and at least one history".into()));
    }
    let item_cfg = ModelConfig { ablations: Ablations::default(), ..base.clone() };
    let flat_cfg = ModelConfig {
        ablations: Ablations { flatten_baseline: true, ..Ablations::default() },
        variant: crate::config::Variant::Normal,
        ..base.clone()
    };
    let keep = flat_cfg.max_history();
    if keep == 0 {
        return Err(Error::InvalidArgument("max_len too small for the flattened encoder".into()));
    }
    let cut: Vec<&[usize]> = histories
        .iter()
        .filter(|h| !h.is_empty())
        .map(|h| &h[h.len().saturating_sub(keep)..])
        .collect();
    if cut.is_empty() {
        return Err(Error::EmptySequence);
    }
    let item = Model::new(&item_cfg, code_vectors)?;
    let flat = Model::new(&flat_cfg, code_vectors)?;
    Ok(LatencyReport {
        item_level: time_model("item-level", &item, catalog, &cut, opts)?,
        flattened: time_model("flattened", &flat, catalog, &cut, opts)?,
    })
}

fn time_model(name: &'static str, model: &Model, catalog: &Catalog, hist: &[&[usize]], opts: &LatencyOptions) -> Result<LatencyRow> {
    let batch_at = |b: usize| -> Vec<&[usize]> { (0..opts.batch).map(|i| hist[(b * opts.batch + i) % hist.len()]).collect() };
    let run = |batch: &[&[usize]]| -> Result<()> {
        for h in batch {
            model.recommend(catalog, h, opts.beam)?;
        }
        Ok(())
    };
    for b in 0..opts.warmup {
        run(&batch_at(b))?;
    }
    let mut tokens = 0;
    let start = Instant::now();
    for b in 0..opts.batches {
        let batch = batch_at(b);
        tokens += batch_tokens(model, &batch);
        run(&batch)?;
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    Ok(LatencyRow {
        model: name,
        levels: model.cfg.levels,
        batch: opts.batch,
        beam: opts.beam,
        batches: opts.batches,
        tokens_per_batch: tokens / opts.batches,
        ms_per_batch: elapsed / opts.batches as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::tests::{code_vectors, tiny_catalog, tiny_cfg};

    #[test]
    fn token_ratio_equals_sid_length() {
        let cfg = ModelConfig { max_len: 24, ..tiny_cfg() };
        let catalog = tiny_catalog(&cfg);
        let hist = vec![vec![0, 1, 2, 3], vec![5, 4], vec![1, 2, 3, 4, 5, 0]];
        let opts = LatencyOptions { batch: 3, beam: 4, batches: 2, warmup: 0 };
        let r = measure(&catalog, &code_vectors(&cfg), &cfg, &hist, &opts).unwrap();
        assert_eq!(r.item_level.tokens_per_batch, 12);
        assert_eq!(r.token_ratio(), cfg.levels as f64);
        assert!(r.item_level.ms_per_batch > 0.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(3).unwrap().starts_with("ratio,3,"));
    }

    #[test]
    fn empty_batches_are_rejected() {
        let cfg = tiny_cfg();
        let catalog = tiny_catalog(&cfg);
        let opts = LatencyOptions { batch: 0, ..Default::default() };
        assert!(measure(&catalog, &code_vectors(&cfg), &cfg, &[vec![1]], &opts).is_err());
        assert!(measure(&catalog, &code_vectors(&cfg), &cfg, &[], &LatencyOptions::default()).is_err());
    }
}
