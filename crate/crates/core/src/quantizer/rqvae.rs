use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{assign_residual, fit_rq_kmeans, validate_features, CodebookStack, ItemFeatures};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::{dot, Grads, ParamId, ParamStore, Tape, Var};

/// Linear encoder/decoder around a stack of trainable residual codebooks.
#[derive(Clone, Debug)]
pub struct RqVae {
    pub store: ParamStore,
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    pub books: Vec<ParamId>,
    /// Commitment weight on the encoder-side term.
    pub beta: f64,
}

/// Values that the loss treats as constants; captured once so a numerical
/// gradient check can hold them fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct StopGradValues {
    pub codes: Vec<u32>,
    pub residuals: Vec<Vec<f64>>,
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqVaeConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub kmeans_iters: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self { levels: 3, codebook_size: 128, latent_dim: 32, steps: 300, batch: 32, lr: 1e-3, kmeans_iters: 25, beta: 1.0, seed: 42 }
    }
}

fn linear_apply(store: &ParamStore, w: ParamId, b: ParamId, x: &[f64]) -> Vec<f64> {
    let w = store.get(w);
    let b = &store.get(b).data;
    (0..w.rows).map(|i| dot(w.row(i), x) + b[i]).collect()
}

fn sq_norm(t: &mut Tape, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let sq = t.mul(d, d);
    t.sum(sq)
}

impl RqVae {
    pub fn new(input_dim: usize, latent_dim: usize, levels: usize, codebook_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc_w = store.uniform("rqvae.enc.w", latent_dim, input_dim, &mut rng);
        let enc_b = store.zeros("rqvae.enc.b", 1, latent_dim);
        let dec_w = store.uniform("rqvae.dec.w", input_dim, latent_dim, &mut rng);
        let dec_b = store.zeros("rqvae.dec.b", 1, input_dim);
        let books = (0..levels)
            .map(|l| store.uniform(format!("rqvae.book.{l}"), codebook_size, latent_dim, &mut rng))
            .collect();
        Self { store, enc_w, enc_b, dec_w, dec_b, books, beta: 1.0 }
    }

    pub fn input_dim(&self) -> usize {
        self.store.get(self.enc_w).cols
    }

    pub fn encode(&self, m: &[f64]) -> Vec<f64> {
        linear_apply(&self.store, self.enc_w, self.enc_b, m)
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        linear_apply(&self.store, self.dec_w, self.dec_b, z)
    }

    pub fn codebooks(&self) -> CodebookStack {
        let layers = self
            .books
            .iter()
            .map(|&id| {
                let p = self.store.get(id);
                (0..p.rows).map(|r| p.row(r).to_vec()).collect()
            })
            .collect();
        CodebookStack { layers }
    }

    fn set_codebooks(&mut self, books: &CodebookStack) {
        for (&id, layer) in self.books.iter().zip(&books.layers) {
            let p = self.store.get_mut(id);
            for (r, c) in layer.iter().enumerate() {
                p.data[r * p.cols..(r + 1) * p.cols].copy_from_slice(c);
            }
        }
    }
}

/// Records the quantizer loss for one item on `tape`, which must borrow
/// `vae.store`. With `frozen` set, its codes and stop-gradient values are
/// used instead of the ones implied by the current parameters.
pub fn rqvae_loss_on_tape(
    tape: &mut Tape,
    vae: &RqVae,
    m: &[f64],
    frozen: Option<&StopGradValues>,
) -> Result<(Var, StopGradValues)> {
    if m.len() != vae.input_dim() {
        return Err(Error::DimensionMismatch { expected: vae.input_dim(), got: m.len() });
    }
    let x = tape.row_const(m);
    let ew = tape.param(vae.enc_w);
    let eb = tape.param(vae.enc_b);
    let z = tape.linear(x, ew, Some(eb));

    let codes = match frozen {
        Some(f) => f.codes.clone(),
        None => assign_residual(tape.value(z), &vae.codebooks())?.sid.0,
    };
    let mut captured = StopGradValues { codes: codes.clone(), residuals: Vec::new(), centroids: Vec::new() };
    let mut terms = Vec::new();
    let mut residual = z;
    let mut chosen = Vec::new();
    for (l, (&book, &c)) in vae.books.iter().zip(&codes).enumerate() {
        let b = tape.gather(book, c as usize);
        let (r_sg, b_sg) = match frozen {
            Some(f) => (tape.row_const(&f.residuals[l]), tape.row_const(&f.centroids[l])),
            None => (tape.detach(residual), tape.detach(b)),
        };
        captured.residuals.push(tape.value(r_sg).to_vec());
        captured.centroids.push(tape.value(b_sg).to_vec());
        let codebook_term = sq_norm(tape, r_sg, b);
        let commit = sq_norm(tape, residual, b_sg);
        terms.push(codebook_term);
        terms.push(tape.scale(commit, vae.beta));
        residual = tape.sub(residual, b);
        chosen.push(b);
    }
    let z_hat = tape.add_n(&chosen);
    let dw = tape.param(vae.dec_w);
    let db = tape.param(vae.dec_b);
    let recon = tape.linear(z_hat, dw, Some(db));
    terms.push(sq_norm(tape, x, recon));
    Ok((tape.add_n(&terms), captured))
}

pub fn rqvae_loss(vae: &RqVae, m: &[f64]) -> Result<f64> {
    let mut tape = Tape::new(&vae.store);
    let (loss, _) = rqvae_loss_on_tape(&mut tape, vae, m, None)?;
    Ok(tape.scalar(loss))
}

/// Codebooks start from residual KMeans over the initial latents; then all
/// parameters are trained jointly on mini-batches.
pub fn train_rqvae(features: &[ItemFeatures], cfg: &RqVaeConfig) -> Result<RqVae> {
    let dim = validate_features(features)?;
    if cfg.levels == 0 || cfg.codebook_size == 0 || cfg.latent_dim == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument("rq-vae sizes must be positive".into()));
    }
    let mut vae = RqVae::new(dim, cfg.latent_dim, cfg.levels, cfg.codebook_size, cfg.seed);
    vae.beta = cfg.beta;
    let latents: Vec<ItemFeatures> =
        features.iter().map(|f| ItemFeatures::new(f.item_id.clone(), vae.encode(&f.vector))).collect();
    let books = fit_rq_kmeans(&latents, cfg.levels, cfg.codebook_size, cfg.kmeans_iters, cfg.seed)?;
    vae.set_codebooks(&books);

    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut grads = Grads::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch.min(features.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let f = &features[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new(&vae.store);
            let (loss, _) = rqvae_loss_on_tape(&mut tape, &vae, &f.vector, None)?;
            total += tape.scalar(loss);
            grads.merge(&tape.backward(loss)?);
        }
        if !total.is_finite() {
            return Err(Error::Diverged { step: step as u64, loss: total });
        }
        grads.scale(1.0 / cfg.batch.min(features.len()) as f64);
        opt.update(&mut vae.store, &grads);
    }
    Ok(vae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;

    fn identity_vae(dim: usize, centroid: Vec<f64>) -> RqVae {
        let mut v = RqVae::new(dim, dim, 1, 1, 0);
        for id in [v.enc_w, v.dec_w] {
            let p = v.store.get_mut(id);
            p.data.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..dim {
                p.data[i * dim + i] = 1.0;
            }
        }
        v.store.get_mut(v.books[0]).data = centroid;
        v
    }

    #[test]
    fn one_dimensional_hand_value() {
        let v = identity_vae(1, vec![1.0]);
        assert!((rqvae_loss(&v, &[2.0]).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_reconstruction_gives_zero() {
        let v = identity_vae(2, vec![0.5, -1.0]);
        assert_eq!(rqvae_loss(&v, &[0.5, -1.0]).unwrap(), 0.0);
        assert!(rqvae_loss(&v, &[0.5, -1.1]).unwrap() > 0.0);
    }

    #[test]
    fn dimension_is_checked() {
        let v = identity_vae(2, vec![0.0, 0.0]);
        assert!(matches!(rqvae_loss(&v, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_stop_grads() {
        let mut v = RqVae::new(4, 3, 2, 3, 9);
        let m = [0.3, -1.2, 0.8, 2.0];
        let (grads, frozen) = {
            let mut tape = Tape::new(&v.store);
            let (loss, frozen) = rqvae_loss_on_tape(&mut tape, &v, &m, None).unwrap();
            (tape.backward(loss).unwrap(), frozen)
        };
        let probe = v.clone();
        let report = gradcheck::check(&mut v.store, &grads, None, 64, |store| {
            let mut vv = probe.clone();
            vv.store = store.clone();
            let mut tape = Tape::new(&vv.store);
            let (loss, _) = rqvae_loss_on_tape(&mut tape, &vv, &m, Some(&frozen)).unwrap();
            tape.scalar(loss)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn training_reduces_loss() {
        let feats: Vec<_> = (0..24)
            .map(|i| {
                let c = (i % 3) as f64;
                ItemFeatures::new(format!("i{i}"), vec![c * 3.0, -c, (i as f64 * 0.7).sin() * 0.1, 1.0])
            })
            .collect();
        let cfg = RqVaeConfig { levels: 2, codebook_size: 3, latent_dim: 3, steps: 0, batch: 8, lr: 1e-2, ..Default::default() };
        let mean = |v: &RqVae| feats.iter().map(|f| rqvae_loss(v, &f.vector).unwrap()).sum::<f64>() / 24.0;
        let before = mean(&train_rqvae(&feats, &cfg).unwrap());
        let after = mean(&train_rqvae(&feats, &RqVaeConfig { steps: 200, ..cfg }).unwrap());
        assert!(after < before, "{after} !< {before}");
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(m in prop::collection::vec(-5.0f64..5.0, 3), seed in 0u64..50) {
            let v = RqVae::new(3, 2, 2, 4, seed);
            prop_assert!(rqvae_loss(&v, &m).unwrap() >= 0.0);
        }
    }
}
