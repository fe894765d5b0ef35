//! Teacher-forced training loop and evaluation.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::Catalog;
use crate::config::TrainConfig;
use crate::decoder::{rank_of, Metrics};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::{Grads, Tape};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Training examples from every proper prefix, and one test example per user
/// whose target is the last interaction. Users with fewer than two items are skipped.
pub fn split_examples(sequences: &[Vec<usize>], max_history: usize) -> (Vec<Example>, Vec<Example>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let clip = |h: &[usize]| h[h.len().saturating_sub(max_history)..].to_vec();
    for (user, seq) in sequences.iter().enumerate() {
        if seq.len() < 2 {
            continue;
        }
        for t in 1..seq.len() - 1 {
            train.push(Example { user, history: clip(&seq[..t]), target: seq[t] });
        }
        let last = seq.len() - 1;
        test.push(Example { user, history: clip(&seq[..last]), target: seq[last] });
    }
    (train, test)
}

/// Batch `micro` of update `step`, derived from the seed alone so that a
/// restored run draws the same examples.
pub fn batch_indices(seed: u64, step: u64, micro: usize, batch: usize, n: usize) -> Vec<usize> {
    let mix = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (micro as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub metrics: Metrics,
    pub seed: u64,
}

pub const LOG_HEADER: &str = "step,loss,H@5,H@10,N@5,N@10,seed";

impl LogRow {
    pub fn csv(&self) -> String {
        let m = &self.metrics;
        format!("{},{:.6},{:.6},{:.6},{:.6},{:.6},{}", self.step, self.loss, m.hit5, m.hit10, m.ndcg5, m.ndcg10, self.seed)
    }
}

/// Mean loss and summed gradients of a set of examples, scaled by `1 / denom`.
pub fn batch_gradients(model: &Model, catalog: &Catalog, examples: &[&Example], denom: f64) -> Result<(f64, Grads)> {
    let mut grads = Grads::new();
    let mut loss = 0.0;
    for ex in examples {
        let mut tape = Tape::new(&model.store);
        let l = model.example_loss(&mut tape, catalog, &ex.history, ex.target)?.total;
        let g = tape.backward(l)?;
        loss += tape.scalar(l);
        grads.merge(&g);
    }
    grads.scale(1.0 / denom);
    Ok((loss / denom, grads))
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Seed of this run; drives batch sampling.
    pub seed: u64,
    pub recent: VecDeque<f64>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            clip_norm: Some(cfg.clip_norm),
            ..Default::default()
        });
        Ok(Self { model, opt, cfg, seed, recent: VecDeque::new() })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Mean of the most recent step losses.
    pub fn smoothed_loss(&self) -> f64 {
        if self.recent.is_empty() {
            return f64::NAN;
        }
        self.recent.iter().sum::<f64>() / self.recent.len() as f64
    }

    /// One optimizer update over explicit micro-batches; the gradient is the
    /// mean over all their examples.
    pub fn update_on(&mut self, catalog: &Catalog, micro_batches: &[Vec<&Example>]) -> Result<f64> {
        let total: usize = micro_batches.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::EmptySequence);
        }
        let mut grads = Grads::new();
        let mut loss = 0.0;
        for mb in micro_batches {
            let (l, g) = batch_gradients(&self.model, catalog, mb, total as f64)?;
            loss += l;
            grads.merge(&g);
        }
        let step = self.opt.step + 1;
        if !loss.is_finite() || !grads.max_abs().is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        self.opt.update(&mut self.model.store, &grads);
        self.recent.push_back(loss);
        while self.recent.len() > self.cfg.smooth_window {
            self.recent.pop_front();
        }
        Ok(loss)
    }

    /// Next update on batches drawn from `train`.
    pub fn train_step(&mut self, catalog: &Catalog, train: &[Example]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptySequence);
        }
        let step = self.opt.step + 1;
        let micro: Vec<Vec<&Example>> = (0..self.cfg.accum)
            .map(|k| batch_indices(self.seed, step, k, self.cfg.batch, train.len()).into_iter().map(|i| &train[i]).collect())
            .collect();
        self.update_on(catalog, &micro)
    }

    /// Trains to `cfg.steps`, evaluating every `eval_every` steps on `test`.
    pub fn run(
        &mut self,
        catalog: &Catalog,
        train: &[Example],
        test: &[Example],
        mut on_log: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.step() < self.cfg.steps {
            self.train_step(catalog, train)?;
            let s = self.step();
            if s % self.cfg.eval_every == 0 || s == self.cfg.steps {
                let limit = if self.cfg.eval_users == 0 { test.len() } else { self.cfg.eval_users.min(test.len()) };
                let metrics = evaluate(&self.model, catalog, &test[..limit], self.cfg.beam)?.0;
                let row = LogRow { step: s, loss: self.smoothed_loss(), metrics, seed: self.seed };
                on_log(&row);
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

/// Beam-decodes each example and returns the metrics plus each target's rank.
/// Users are split into contiguous chunks, one per available core.
pub fn evaluate(model: &Model, catalog: &Catalog, examples: &[Example], beam: usize) -> Result<(Metrics, Vec<Option<usize>>)> {
    let rank = |ex: &Example| Ok(rank_of(&model.recommend(catalog, &ex.history, beam)?, ex.target));
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(examples.len().max(1));
    let ranks = if workers <= 1 {
        examples.iter().map(rank).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = examples.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = examples
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(rank).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<_>>>()
        })?
        .concat()
    };
    Ok((Metrics::from_ranks(&ranks)?, ranks))
}

/// Items ordered by training frequency, ties by id.
pub fn popularity_ranking(catalog: &Catalog, train_sequences: &[Vec<usize>]) -> Vec<usize> {
    let mut counts = vec![0usize; catalog.len()];
    for &i in train_sequences.iter().flatten() {
        counts[i] += 1;
    }
    let mut order: Vec<usize> = (0..catalog.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then_with(|| catalog.items[a].id.cmp(&catalog.items[b].id)));
    order
}

/// Metrics of the popularity ranking on held-out targets; every user gets the same list.
pub fn popularity_metrics(catalog: &Catalog, train_sequences: &[Vec<usize>], test: &[Example]) -> Result<Metrics> {
    let order = popularity_ranking(catalog, train_sequences);
    let ranks: Vec<Option<usize>> = test.iter().map(|ex| order.iter().position(|&i| i == ex.target).map(|p| p + 1)).collect();
    Metrics::from_ranks(&ranks)
}

pub fn average_metrics(all: &[Metrics]) -> Result<Metrics> {
    if all.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = all.len() as f64;
    Ok(Metrics {
        hit5: all.iter().map(|m| m.hit5).sum::<f64>() / n,
        hit10: all.iter().map(|m| m.hit10).sum::<f64>() / n,
        ndcg5: all.iter().map(|m| m.ndcg5).sum::<f64>() / n,
        ndcg10: all.iter().map(|m| m.ndcg10).sum::<f64>() / n,
        users: all.iter().map(|m| m.users).sum(),
    })
}
