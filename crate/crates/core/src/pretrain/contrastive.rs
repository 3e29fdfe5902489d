//! User-pin contrastive pretraining with InfoNCE.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, InteractionRecord, Matrix, SparseGrad, TrainConfig};
use crate::error::{Error, Result};
use crate::tables::{row_for, EmbeddingTable};

/// Loss value and exact gradients of one InfoNCE term.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// `-log(exp(a.p/t) / (exp(a.p/t) + sum_k exp(a.n_k/t)))`, evaluated with
/// max subtraction so finite inputs always give a finite loss.
pub fn infonce_loss<N: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[N],
    temperature: f64,
) -> Result<InfoNce> {
    let dim = anchor.len();
    if positive.len() != dim || negatives.iter().any(|n| n.as_ref().len() != dim) {
        return Err(Error::invalid("infonce inputs differ in dimension"));
    }
    if negatives.is_empty() {
        return Err(Error::invalid("infonce needs at least one negative"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }

    // logits[0] is the positive
    let logits: Vec<f64> = std::iter::once(dot(anchor, positive) / temperature)
        .chain(negatives.iter().map(|n| dot(anchor, n.as_ref()) / temperature))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let loss = (max + total.ln() - logits[0]).max(0.0);
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let inv_t = 1.0 / temperature;
    let c0 = (probs[0] - 1.0) * inv_t;
    let mut grad_anchor: Vec<f64> = positive.iter().map(|p| c0 * p).collect();
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for (n, q) in negatives.iter().zip(&probs[1..]) {
        let ck = q * inv_t;
        for (g, x) in grad_anchor.iter_mut().zip(n.as_ref()) {
            *g += ck * x;
        }
        grad_negatives.push(anchor.iter().map(|a| ck * a).collect());
    }
    let grad_positive = anchor.iter().map(|a| c0 * a).collect();

    Ok(InfoNce {
        loss,
        grad_anchor,
        grad_positive,
        grad_negatives,
    })
}

/// Trains user and pin tables on engagement pairs.
///
/// For each positive in a batch the negatives are the other pins of the
/// batch (skipping rows equal to the positive's row) plus
/// `num_out_batch_negatives` pin rows drawn uniformly once per batch.
/// Touched rows are L2-normalized after every update.
pub fn contrastive_pretrain(
    interactions: &[InteractionRecord],
    config: &TrainConfig,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let (users, pins, _) = train(interactions, config)?;
    Ok((
        users.to_table("user", &config.version_id)?,
        pins.to_table("pin", &config.version_id)?,
    ))
}

/// Per-epoch mean loss is returned alongside the tables for diagnostics.
pub(crate) fn train(
    interactions: &[InteractionRecord],
    config: &TrainConfig,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if interactions.is_empty() {
        return Err(Error::invalid("no interactions to train on"));
    }
    config.validate()?;
    if config.batch_size < 2 && config.num_out_batch_negatives == 0 {
        return Err(Error::invalid("no negatives: batch_size 1 without out-of-batch sampling"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, dim) = (config.num_rows, config.dim);
    let mut users = Matrix::uniform(n, dim, &mut rng);
    let mut pins = Matrix::uniform(n, dim, &mut rng);

    let pairs: Vec<(usize, usize)> = interactions
        .iter()
        .map(|r| (row_for(r.user_id, n), row_for(r.pin_id, n)))
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        for batch in order.chunks(config.batch_size) {
            let out_batch: Vec<usize> = (0..config.num_out_batch_negatives)
                .map(|_| rng.random_range(0..n))
                .collect();
            let mut user_grad = SparseGrad::default();
            let mut pin_grad = SparseGrad::default();
            let scale = 1.0 / batch.len() as f64;

            for &i in batch {
                let (u, p) = pairs[i];
                let neg_rows: Vec<usize> = batch
                    .iter()
                    .map(|&j| pairs[j].1)
                    .filter(|&r| r != p)
                    .chain(out_batch.iter().copied().filter(|&r| r != p))
                    .collect();
                if neg_rows.is_empty() {
                    continue;
                }
                let negs: Vec<&[f64]> = neg_rows.iter().map(|&r| pins.row(r)).collect();
                let term = infonce_loss(users.row(u), pins.row(p), &negs, config.temperature)?;
                loss_sum += term.loss;
                terms += 1;
                user_grad.add(u, scale, &term.grad_anchor);
                pin_grad.add(p, scale, &term.grad_positive);
                for (&r, g) in neg_rows.iter().zip(&term.grad_negatives) {
                    pin_grad.add(r, scale, g);
                }
            }
            for r in user_grad.apply(&mut users, config.learning_rate) {
                users.normalize_row(r);
            }
            for r in pin_grad.apply(&mut pins, config.learning_rate) {
                pins.normalize_row(r);
            }
        }
        epoch_losses.push(loss_sum / terms.max(1) as f64);
    }
    Ok((users, pins, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::InteractionKind;
    use crate::tables::EntityId;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[i] += h;
                lo[i] -= h;
                (f(&hi) - f(&lo)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn symmetric_single_negative_is_ln2() {
        let a = [1.0, 0.0];
        let out = infonce_loss(&a, &[0.5, 1.0], &[[0.5, -3.0]], 1.0).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation_goes_to_zero() {
        let a = [1.0, 0.0];
        let out = infonce_loss(&a, &[1e3, 0.0], &[[-1e3, 0.0], [0.0, 5.0]], 0.1).unwrap();
        assert!(out.loss < 1e-12);
        assert!(out.loss.is_finite());
        // huge logits of both signs stay finite
        let out = infonce_loss(&a, &[-1e6, 0.0], &[[1e6, 0.0]], 0.01).unwrap();
        assert!(out.loss.is_finite() && out.loss > 1e8);
    }

    #[test]
    fn argument_errors() {
        assert!(infonce_loss(&[1.0], &[1.0, 2.0], &[[1.0]], 1.0).is_err());
        assert!(infonce_loss::<[f64; 1]>(&[1.0], &[1.0], &[], 1.0).is_err());
        assert!(infonce_loss(&[1.0], &[1.0], &[[1.0]], 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let mut v = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, p, n1, n2) = (v(), v(), v(), v());
        let tau = 0.1;
        let out = infonce_loss(&a, &p, &[n1.clone(), n2.clone()], tau).unwrap();
        let fa = fd_grad(|x| infonce_loss(x, &p, &[n1.clone(), n2.clone()], tau).unwrap().loss, &a);
        let fp = fd_grad(|x| infonce_loss(&a, x, &[n1.clone(), n2.clone()], tau).unwrap().loss, &p);
        let fn2 = fd_grad(|x| infonce_loss(&a, &p, &[n1.clone(), x.to_vec()], tau).unwrap().loss, &n2);
        for (g, f) in [(&out.grad_anchor, &fa), (&out.grad_positive, &fp), (&out.grad_negatives[1], &fn2)] {
            for (x, y) in g.iter().zip(f.iter()) {
                assert!((x - y).abs() <= 1e-4 * y.abs().max(1e-3), "{x} vs {y}");
            }
        }
    }

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        let d: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        d / (na * nb)
    }

    fn toy() -> Vec<InteractionRecord> {
        (0..64)
            .map(|i| InteractionRecord {
                user_id: EntityId(10 + i % 2),
                pin_id: EntityId(20 + i % 2),
                kind: InteractionKind::Click,
                timestamp: i,
            })
            .collect()
    }

    #[test]
    fn separable_toy_problem_separates() {
        let cfg = TrainConfig {
            dim: 8,
            num_rows: 64,
            batch_size: 4,
            epochs: 200,
            num_out_batch_negatives: 2,
            seed: 5,
            ..Default::default()
        };
        let (users, pins) = contrastive_pretrain(&toy(), &cfg).unwrap();
        for i in 0..2u64 {
            let u = users.row(users.row_of(EntityId(10 + i))).unwrap();
            let same = pins.row(pins.row_of(EntityId(20 + i))).unwrap();
            let other = pins.row(pins.row_of(EntityId(21 - i))).unwrap();
            assert!(cosine(&u, &same) > cosine(&u, &other));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            dim: 4,
            num_rows: 32,
            batch_size: 8,
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let a = contrastive_pretrain(&toy(), &cfg).unwrap();
        let b = contrastive_pretrain(&toy(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = contrastive_pretrain(&toy(), &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_and_degenerate_inputs() {
        assert!(contrastive_pretrain(&[], &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            batch_size: 1,
            num_out_batch_negatives: 0,
            ..Default::default()
        };
        assert!(contrastive_pretrain(&toy(), &cfg).is_err());
    }
}
