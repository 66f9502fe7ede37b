//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, ValueId};
use crate::error::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const REL_FLOOR: f64 = 1e-8;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = points.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &ids)?;
    Ok(tape.scalar_value(loss))
}

fn check_coords<F>(
    f: &F,
    points: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = points
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.set_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    for &(pi, ci) in coords {
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + step;
        let lp = eval_scalar(f, &work)?;
        work[pi].data_mut()[ci] = orig - step;
        let lm = eval_scalar(f, &work)?;
        work[pi].data_mut()[ci] = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = grads.get(ids[pi]).map_or(0.0, |g| g[ci]);
        max_err = max_err.max(rel_err(analytic, numeric));
    }
    Ok(max_err)
}

/// Compare the tape gradient of scalar-valued `f` against central finite
/// differences at every coordinate of every point. Returns the max relative
/// error, with `max(|analytic|, |numeric|, 1e-8)` in the denominator.
pub fn grad_check<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ci| (pi, ci)))
        .collect();
    check_coords(&f, points, step, &coords)
}

/// Like [`grad_check`] but probes at most `per_tensor` randomly chosen
/// coordinates of each point; used for composites with many parameters.
pub fn grad_check_sampled<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    grad_check_sampled_excluding(f, points, step, per_tensor, seed, &[])
}

/// Sampled check that skips the points listed in `excluded` (indices into
/// `points`). Used for parameters whose true gradient is identically zero,
/// where finite differences only measure round-off.
pub fn grad_check_sampled_excluding<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    per_tensor: usize,
    seed: u64,
    excluded: &[usize],
) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        let mut all: Vec<usize> = (0..p.numel()).collect();
        all.shuffle(&mut rng);
        if excluded.contains(&pi) {
            continue;
        }
        for &ci in all.iter().take(per_tensor) {
            coords.push((pi, ci));
        }
    }
    check_coords(&f, points, step, &coords)
}
