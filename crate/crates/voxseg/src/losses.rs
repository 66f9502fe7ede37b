//! Cross-entropy, the joint objective, and per-class balanced voxel
//! selection. One selection is drawn per step and shared by the CE and
//! contrastive terms.

use crate::error::{Error, Result};
use crate::tensor::{Tape, ValueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Voxels chosen for loss computation: flat indices into the batch's
/// `N*X*Y*Z` voxel space, with exactly `N_min` picks per class present.
#[derive(Debug, Clone)]
pub struct VoxelSelection {
    pub indices: Vec<usize>,
    pub per_class_counts: BTreeMap<u8, usize>,
}

impl VoxelSelection {
    /// Every voxel with uniform weight; the unbalanced control condition.
    pub fn all(labels_in_batch: &[u8]) -> Self {
        let mut per_class_counts = BTreeMap::new();
        for &l in labels_in_batch {
            *per_class_counts.entry(l).or_insert(0) += 1;
        }
        VoxelSelection {
            indices: (0..labels_in_batch.len()).collect(),
            per_class_counts,
        }
    }
}

/// `N_min` balanced selection: count voxels per class present in the batch,
/// take the minimum, and sample exactly that many voxels of each present
/// class uniformly without replacement. Deterministic given the seed.
pub fn balanced_select(labels_in_batch: &[u8], seed: u64) -> Result<VoxelSelection> {
    if labels_in_batch.is_empty() {
        return Err(Error::domain("balanced_select", "empty batch"));
    }
    let mut per_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels_in_batch.iter().enumerate() {
        per_class.entry(l).or_default().push(i);
    }
    let n_min = per_class.values().map(|v| v.len()).min().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(n_min * per_class.len());
    let mut per_class_counts = BTreeMap::new();
    for (&class, voxels) in per_class.iter_mut() {
        // partial Fisher-Yates: the first n_min entries are a uniform
        // without-replacement sample
        let len = voxels.len();
        for i in 0..n_min {
            let j = rng.gen_range(i..len);
            voxels.swap(i, j);
        }
        indices.extend_from_slice(&voxels[..n_min]);
        per_class_counts.insert(class, n_min);
    }
    Ok(VoxelSelection {
        indices,
        per_class_counts,
    })
}

/// Mean categorical cross-entropy over the selected voxels, on the tape.
/// `probs` is `[N,C,X,Y,Z]`; the true class comes from `labels_in_batch`
/// at each selected index. Probabilities are clamped at 1e-12 before log.
pub fn cross_entropy(
    tape: &mut Tape,
    probs: ValueId,
    labels_in_batch: &[u8],
    selection: &VoxelSelection,
) -> Result<ValueId> {
    if selection.indices.is_empty() {
        return Err(Error::domain("cross_entropy", "empty selection"));
    }
    let picks: Vec<(usize, u8)> = selection
        .indices
        .iter()
        .map(|&i| (i, labels_in_batch[i]))
        .collect();
    tape.nll_selected(probs, picks)
}

/// Joint objective: `ce + lambda_ctr * ctr`. Both terms must be computed
/// over the same [`VoxelSelection`].
pub fn total_loss(tape: &mut Tape, ce: ValueId, ctr: ValueId, lambda_ctr: f64) -> Result<ValueId> {
    if lambda_ctr < 0.0 {
        return Err(Error::domain("total_loss", "lambda_ctr must be >= 0"));
    }
    let scaled = tape.scale(ctr, lambda_ctr);
    tape.add(ce, scaled)
}
