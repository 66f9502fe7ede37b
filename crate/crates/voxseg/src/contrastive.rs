//! Trainable proxy memory bank and the voxel-wise supervised contrastive
//! loss.
//!
//! The bank holds `M` proxies per class (`C x M x D`); a query voxel's
//! positives are the proxies of its own class, every other proxy is a
//! negative. The default `exp` variant is the InfoNCE reading (temperature-
//! scaled exponentials); the `literal` variant keeps the raw similarity
//! ratio and fails when a log argument is non-positive.

use crate::error::{Error, Result};
use crate::tensor::{ContrastiveVariant, Tape, Tensor, ValueId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Trainable `C x M x D` array of proxy embeddings.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Shape `[C, M, D]`, marked trainable.
    pub proxies: Tensor,
}

/// Standard-normal init, each proxy L2-normalized. Deterministic given the
/// seed; proxies are optimized by backpropagation afterwards.
pub fn init_memory_bank(classes: usize, per_class: usize, dim: usize, seed: u64) -> MemoryBank {
    assert!(classes >= 1 && per_class >= 1 && dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::rand_normal(vec![classes, per_class, dim], &mut rng);
    for row in t.data_mut().chunks_mut(dim) {
        loop {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
                break;
            }
            // essentially unreachable; redraw a degenerate proxy
            use rand::Rng;
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    t.set_requires_grad(true);
    MemoryBank {
        classes,
        per_class,
        dim,
        proxies: t,
    }
}

impl MemoryBank {
    /// Proxy row indices (into the flattened `[C*M, D]` view) split into
    /// positives for `label` and all remaining negatives. Sizes are `M` and
    /// `M*(C-1)`.
    pub fn select_proxies(&self, label: u8) -> Result<(Vec<usize>, Vec<usize>)> {
        let label = label as usize;
        if label >= self.classes {
            return Err(Error::domain(
                "select_proxies",
                format!("label {label} out of range for {} classes", self.classes),
            ));
        }
        let positives: Vec<usize> =
            (label * self.per_class..(label + 1) * self.per_class).collect();
        let negatives: Vec<usize> = (0..self.classes * self.per_class)
            .filter(|k| k / self.per_class != label)
            .collect();
        Ok((positives, negatives))
    }

    /// One proxy's embedding.
    pub fn proxy(&self, row: usize) -> &[f64] {
        &self.proxies.data()[row * self.dim..(row + 1) * self.dim]
    }
}

/// Voxel queries paired with their class labels.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// Shape `[Q, D]`.
    pub queries: Tensor,
    pub labels: Vec<u8>,
}

impl QuerySet {
    pub fn new(queries: Tensor, labels: Vec<u8>) -> Result<Self> {
        if queries.shape().len() != 2 || queries.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "QuerySet::new",
                "[Q, D] with Q == labels.len() >= 1",
                (queries.shape().to_vec(), labels.len()),
            ));
        }
        Ok(QuerySet { queries, labels })
    }
}

/// Contrastive loss of query vectors (tape value `[Q, D]`) against the bank
/// (tape value `[C, M, D]`), differentiable w.r.t. both. Returns a scalar:
/// the mean over queries of the per-query loss.
pub fn contrastive_loss_on_tape(
    tape: &mut Tape,
    queries: ValueId,
    labels: &[u8],
    bank_value: ValueId,
    classes: usize,
    per_class: usize,
    tau: f64,
    variant: ContrastiveVariant,
) -> Result<ValueId> {
    if tau <= 0.0 {
        return Err(Error::domain("contrastive_loss", "tau must be > 0"));
    }
    let bshape = tape.shape_of(bank_value).to_vec();
    let dim = *bshape.last().ok_or_else(|| {
        Error::shape("contrastive_loss bank", "[C, M, D]", &bshape)
    })?;
    if bshape.iter().product::<usize>() != classes * per_class * dim {
        return Err(Error::shape(
            "contrastive_loss bank",
            classes * per_class * dim,
            &bshape,
        ));
    }
    // [C, M, D] is row-major, so the bank doubles as the [C*M, D] key matrix.
    let keys = tape.reshape_rows(bank_value, classes * per_class, dim)?;
    let sims = tape.cosine_sim(queries, keys)?;
    tape.proxy_infonce(sims, labels.to_vec(), classes, per_class, tau, variant)
}

/// Convenience wrapper: evaluates the loss for a [`QuerySet`] against a
/// [`MemoryBank`] on a fresh tape and returns the scalar.
pub fn contrastive_loss(
    qs: &QuerySet,
    bank: &MemoryBank,
    tau: f64,
    variant: ContrastiveVariant,
) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.leaf(&qs.queries);
    let b = tape.leaf(&bank.proxies);
    let loss = contrastive_loss_on_tape(
        &mut tape,
        q,
        &qs.labels,
        b,
        bank.classes,
        bank.per_class,
        tau,
        variant,
    )?;
    Ok(tape.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn init_unit_norms_and_determinism() {
        let bank = init_memory_bank(4, 10, 16, 77);
        for row in bank.proxies.data().chunks(16) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let bank2 = init_memory_bank(4, 10, 16, 77);
        assert_eq!(bank.proxies.data(), bank2.proxies.data());
        assert_eq!(bank.proxies.numel(), 640); // C=4, M=10, D=16
        assert!(bank.proxies.requires_grad());
    }

    #[test]
    fn select_proxies_counts() {
        let bank = init_memory_bank(2, 3, 4, 1);
        let (pos, neg) = bank.select_proxies(0).unwrap();
        assert_eq!(pos.len(), 3);
        assert_eq!(neg.len(), 3);

        let bank = init_memory_bank(4, 10, 8, 1);
        let (pos, neg) = bank.select_proxies(2).unwrap();
        assert_eq!(pos.len(), 10); // M
        assert_eq!(neg.len(), 30); // M*(C-1)

        // union is the whole bank, disjoint
        let mut all: Vec<usize> = pos.iter().chain(neg.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());

        assert!(bank.select_proxies(4).is_err());
    }

    fn toy_bank(rows: &[&[f64]], classes: usize, per_class: usize) -> MemoryBank {
        let dim = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let mut proxies = Tensor::new(vec![classes, per_class, dim], data).unwrap();
        proxies.set_requires_grad(true);
        MemoryBank {
            classes,
            per_class,
            dim,
            proxies,
        }
    }

    #[test]
    fn eq1_toy_case_closed_form() {
        // C=2, M=1, D=2, q=(1,0), k+=(1,0), k-=(0,1), tau=0.1
        // exp variant: log(1 + e^{-10})
        let bank = toy_bank(&[&[1.0, 0.0], &[0.0, 1.0]], 2, 1);
        let qs = QuerySet::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), vec![0]).unwrap();
        let loss = contrastive_loss(&qs, &bank, 0.1, ContrastiveVariant::Exp).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
        assert!((loss - 4.5398e-5).abs() < 1e-8);
    }

    #[test]
    fn equidistant_queries_closed_form() {
        // same cosine similarity to every proxy -> loss = log(1 + M(C-1))
        let bank = toy_bank(
            &[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]],
            3,
            2,
        );
        let qs = QuerySet::new(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(), vec![1]).unwrap();
        for tau in [0.1, 0.5, 1.0] {
            let loss = contrastive_loss(&qs, &bank, tau, ContrastiveVariant::Exp).unwrap();
            let expected = (1.0 + (2 * (3 - 1)) as f64).ln();
            assert!((loss - expected).abs() < 1e-10, "tau {tau}: {loss} vs {expected}");
        }
    }

    #[test]
    fn literal_variant_rejects_negative_ratio() {
        // s+ negative while the negatives sum positive makes the log
        // argument non-positive
        let bank = toy_bank(&[&[1.0, 0.0], &[0.0, 1.0]], 2, 1);
        let qs =
            QuerySet::new(Tensor::new(vec![1, 2], vec![-0.6, 0.8]).unwrap(), vec![0]).unwrap();
        let err = contrastive_loss(&qs, &bank, 0.1, ContrastiveVariant::Literal).unwrap_err();
        assert!(err.to_string().contains("query 0"), "{err}");
    }

    #[test]
    fn literal_variant_computes_printed_formula() {
        // all similarities positive: -(1/M) sum_j log((s+/tau)/((s+/tau)+sum(s-/tau)))
        let bank = toy_bank(&[&[1.0, 0.0], &[0.6, 0.8]], 2, 1);
        let qs = QuerySet::new(Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap(), vec![0]).unwrap();
        let tau = 0.2;
        let q = [1.0, 0.5];
        let sp = crate::tensor::cosine_similarity(&q, &[1.0, 0.0]).unwrap() / tau;
        let sn = crate::tensor::cosine_similarity(&q, &[0.6, 0.8]).unwrap() / tau;
        let expected = -(sp / (sp + sn)).ln();
        let loss = contrastive_loss(&qs, &bank, tau, ContrastiveVariant::Literal).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn query_scale_invariance() {
        let bank = init_memory_bank(3, 2, 4, 9);
        let qdata = vec![0.3, -0.7, 0.2, 0.9, -0.1, 0.4, 0.5, -0.8];
        let qs = QuerySet::new(Tensor::new(vec![2, 4], qdata.clone()).unwrap(), vec![0, 2]).unwrap();
        let scaled: Vec<f64> = qdata.iter().map(|v| v * 3.7).collect();
        let qs2 = QuerySet::new(Tensor::new(vec![2, 4], scaled).unwrap(), vec![0, 2]).unwrap();
        let l1 = contrastive_loss(&qs, &bank, 0.1, ContrastiveVariant::Exp).unwrap();
        let l2 = contrastive_loss(&qs2, &bank, 0.1, ContrastiveVariant::Exp).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn loss_monotone_in_positive_similarity() {
        // raising s+ with negatives fixed strictly lowers the loss
        let mk = |pos_y: f64| {
            let bank = toy_bank(&[&[1.0, 0.0], &[0.0, 1.0]], 2, 1);
            let q = Tensor::new(vec![1, 2], vec![1.0, pos_y]).unwrap();
            let qs = QuerySet::new(q, vec![0]).unwrap();
            contrastive_loss(&qs, &bank, 0.1, ContrastiveVariant::Exp).unwrap()
        };
        // moving the query toward k+ raises s+ but also changes s-; instead
        // rotate the positive proxy toward the query
        let q = [0.8, 0.6];
        let mut prev = f64::INFINITY;
        for align in [0.0, 0.3, 0.6, 0.9] {
            let kp = [
                (1.0 - align) * 1.0 + align * q[0],
                (1.0 - align) * 0.0 + align * q[1],
            ];
            let bank = toy_bank(&[&kp, &[-0.6, 0.8]], 2, 1);
            let qs = QuerySet::new(Tensor::new(vec![1, 2], q.to_vec()).unwrap(), vec![0]).unwrap();
            let loss = contrastive_loss(&qs, &bank, 0.1, ContrastiveVariant::Exp).unwrap();
            assert!(loss < prev, "loss should fall as s+ rises: {loss} !< {prev}");
            prev = loss;
        }
        let _ = mk;
    }

    #[test]
    fn full_loss_gradcheck_on_toy_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bank = Tensor::rand_normal(vec![3, 2, 4], &mut rng);
        let queries = Tensor::rand_normal(vec![5, 4], &mut rng);
        let labels = vec![0u8, 1, 2, 1, 0];
        for variant in [ContrastiveVariant::Exp] {
            let labels = labels.clone();
            let err = grad_check(
                move |t, ids| {
                    contrastive_loss_on_tape(t, ids[0], &labels, ids[1], 3, 2, 0.1, variant)
                },
                &[queries.clone(), bank.clone()],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "variant {variant:?}: max rel err {err}");
        }
    }

    #[test]
    fn gradient_step_pulls_positives_raises_own_similarity() {
        // after one small gradient step on a single query, positive
        // similarity does not decrease and at least one negative's does not
        // increase
        let bank = init_memory_bank(3, 2, 4, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let query = Tensor::rand_normal(vec![1, 4], &mut rng);
        let label = 1u8;

        let sim_to = |proxies: &Tensor, row: usize| {
            let d = 4;
            crate::tensor::cosine_similarity(
                query.data(),
                &proxies.data()[row * d..(row + 1) * d],
            )
            .unwrap()
        };

        let mut tape = Tape::new();
        let q = tape.leaf(&query);
        let b = tape.leaf(&bank.proxies);
        let loss =
            contrastive_loss_on_tape(&mut tape, q, &[label], b, 3, 2, 0.1, ContrastiveVariant::Exp)
                .unwrap();
        let grads = tape.backward(loss).unwrap();
        let gb = grads.get(b).unwrap();

        let lr = 1e-3;
        let mut updated = bank.proxies.clone();
        for (p, g) in updated.data_mut().iter_mut().zip(gb) {
            *p -= lr * g;
        }

        let (pos, neg) = bank.select_proxies(label).unwrap();
        for &row in &pos {
            assert!(
                sim_to(&updated, row) >= sim_to(&bank.proxies, row) - 1e-12,
                "positive proxy {row} similarity decreased"
            );
        }
        assert!(
            neg.iter()
                .any(|&row| sim_to(&updated, row) <= sim_to(&bank.proxies, row) + 1e-12),
            "no negative proxy similarity held or dropped"
        );
    }
}
