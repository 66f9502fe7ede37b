//! Synthetic lifespan phantoms: three nested ellipsoidal tissue shells with
//! an age-dependent contrast schedule, multiplicative bias field, additive
//! noise, and boundary-flip label corruption.

use super::{flat_index, LabelMap, Volume};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;

/// Per-channel, per-class mean intensity as a piecewise-linear function of
/// lifespan position `t` in [0,1]. Channel 0 is T1-like, channel 1 T2-like;
/// their WM/GM contrast has opposite sign throughout and both cross zero at
/// t = 0.1 (the isointense regime).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContrastSchedule {
    /// `[channel][class]` knot lists `(t, mean)`, sorted by `t`.
    /// Class order: background, CSF, GM, WM.
    pub knots: Vec<[Vec<(f64, f64)>; 4]>,
}

impl Default for ContrastSchedule {
    fn default() -> Self {
        let constant = |v: f64| vec![(0.0, v), (1.0, v)];
        ContrastSchedule {
            knots: vec![
                // channel 0: T1-like. WM crosses GM exactly at t = 0.1.
                [
                    constant(0.05),
                    constant(0.15),
                    constant(0.55),
                    vec![(0.0, 0.45), (0.1, 0.55), (0.4, 0.75), (1.0, 0.72)],
                ],
                // channel 1: T2-like, opposite WM/GM ordering.
                [
                    constant(0.05),
                    constant(0.90),
                    constant(0.60),
                    vec![(0.0, 0.75), (0.1, 0.60), (0.4, 0.45), (1.0, 0.42)],
                ],
            ],
        }
    }
}

impl ContrastSchedule {
    pub fn channels(&self) -> usize {
        self.knots.len()
    }

    /// Piecewise-linear mean for `class` on `channel` at lifespan position `t`.
    pub fn mean(&self, channel: usize, class: u8, t: f64) -> f64 {
        let knots = &self.knots[channel][class as usize];
        if t <= knots[0].0 {
            return knots[0].1;
        }
        for w in knots.windows(2) {
            let (t0, v0) = w[0];
            let (t1, v1) = w[1];
            if t <= t1 {
                if t == t0 {
                    return v0;
                }
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        knots.last().unwrap().1
    }
}

fn default_shell_radii() -> (f64, f64, f64) {
    (0.62, 0.86, 0.94)
}

fn default_schedule() -> ContrastSchedule {
    ContrastSchedule::default()
}

/// Everything that determines one phantom. Generation is a pure function of
/// this struct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Lifespan position in [0,1]; 0.1 is the isointense point.
    pub age_t: f64,
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub noise_sigma: f64,
    /// Peak multiplicative deviation of the trilinear bias field.
    pub bias_amplitude: f64,
    /// Relative amplitude of the sinusoidal WM/GM interface perturbation.
    pub gyrification_amplitude: f64,
    pub seed: u64,
    /// Normalized radii of the WM core, GM shell, and CSF shell.
    #[serde(default = "default_shell_radii")]
    pub shell_radii: (f64, f64, f64),
    #[serde(default = "default_schedule")]
    pub schedule: ContrastSchedule,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.age_t) {
            return Err(Error::domain("PhantomSpec", "age_t must lie in [0,1]"));
        }
        let (x, y, z) = self.dims;
        if x < 16 || y < 16 || z < 16 {
            return Err(Error::domain(
                "PhantomSpec",
                format!("dims must each be >= 16, got {:?}", self.dims),
            ));
        }
        if self.noise_sigma < 0.0 || self.bias_amplitude < 0.0 || self.gyrification_amplitude < 0.0
        {
            return Err(Error::domain("PhantomSpec", "amplitudes must be >= 0"));
        }
        let (a, b, c) = self.shell_radii;
        if !(a > 0.0 && a < b && b < c && c <= 1.0) {
            return Err(Error::domain(
                "PhantomSpec",
                "shell radii must satisfy 0 < wm < gm < csf <= 1",
            ));
        }
        Ok(())
    }
}

/// Brain scale grows through infancy then stays flat.
fn age_scale(t: f64) -> f64 {
    0.92 + 0.08 * (t / 0.25).clamp(0.0, 1.0)
}

/// The WM core takes a slightly larger share of the brain with age.
fn wm_share(t: f64) -> f64 {
    0.94 + 0.10 * (t / 0.4).clamp(0.0, 1.0)
}

const GYR_FREQ_THETA: f64 = 5.0;
const GYR_FREQ_PHI: f64 = 6.0;

/// Deterministic phantom generation. The label map is the noiseless
/// geometry; intensities get the bias field and Gaussian noise on top.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let (xd, yd, zd) = spec.dims;
    let nvox = xd * yd * zd;
    let channels = spec.schedule.channels();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Draw order is fixed: gyrification phases, bias corners per channel, noise.
    let phase_theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut bias_corners = Vec::with_capacity(channels);
    for _ in 0..channels {
        let mut corners = [0.0f64; 8];
        for c in corners.iter_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }
        let peak = corners.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if peak > 0.0 {
            for c in corners.iter_mut() {
                *c /= peak;
            }
        }
        bias_corners.push(corners);
    }

    // Geometry.
    let center = (
        (xd as f64 - 1.0) / 2.0,
        (yd as f64 - 1.0) / 2.0,
        (zd as f64 - 1.0) / 2.0,
    );
    let scale = age_scale(spec.age_t);
    let semi = (
        center.0 * 0.95 * scale,
        center.1 * 0.85 * scale,
        center.2 * 0.90 * scale,
    );
    let (rho_wm_base, rho_gm, rho_csf) = spec.shell_radii;
    let rho_wm = rho_wm_base * wm_share(spec.age_t);
    let gyr = spec.gyrification_amplitude;

    let mut labels = vec![BACKGROUND; nvox];
    for x in 0..xd {
        let ux = (x as f64 - center.0) / semi.0;
        for y in 0..yd {
            let uy = (y as f64 - center.1) / semi.1;
            for z in 0..zd {
                let uz = (z as f64 - center.2) / semi.2;
                let r = (ux * ux + uy * uy + uz * uz).sqrt();
                let label = if r < 1e-9 {
                    WM
                } else {
                    let theta = (uz / r).clamp(-1.0, 1.0).acos();
                    let phi = uy.atan2(ux);
                    let ripple = (GYR_FREQ_THETA * theta + phase_theta).sin()
                        * (GYR_FREQ_PHI * phi + phase_phi).sin();
                    let wm_edge = rho_wm * (1.0 + gyr * ripple);
                    if r < wm_edge {
                        WM
                    } else if r < rho_gm {
                        GM
                    } else if r < rho_csf {
                        CSF
                    } else {
                        BACKGROUND
                    }
                };
                labels[flat_index(spec.dims, x, y, z)] = label;
            }
        }
    }

    // Intensities: class mean, times bias, plus noise. Computed in f64 and
    // stored as f32.
    let mut voxels = vec![0.0f32; channels * nvox];
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("sigma checked nonnegative"))
    } else {
        None
    };
    for ch in 0..channels {
        let means: Vec<f64> = (0..4u8)
            .map(|c| spec.schedule.mean(ch, c, spec.age_t))
            .collect();
        let corners = &bias_corners[ch];
        let out = &mut voxels[ch * nvox..(ch + 1) * nvox];
        for x in 0..xd {
            let fx = x as f64 / (xd as f64 - 1.0);
            for y in 0..yd {
                let fy = y as f64 / (yd as f64 - 1.0);
                for z in 0..zd {
                    let fz = z as f64 / (zd as f64 - 1.0);
                    let idx = flat_index(spec.dims, x, y, z);
                    let bias = 1.0 + spec.bias_amplitude * trilinear(corners, fx, fy, fz);
                    let mut v = means[labels[idx] as usize] * bias;
                    if let Some(n) = &noise {
                        v += n.sample(&mut rng);
                    }
                    out[idx] = v as f32;
                }
            }
        }
    }

    let volume = Volume::new(spec.dims, channels, spec.spacing_mm, voxels)?;
    let label_map = LabelMap::new(spec.dims, labels)?;
    Ok((volume, label_map))
}

fn trilinear(corners: &[f64; 8], x: f64, y: f64, z: f64) -> f64 {
    let mut acc = 0.0;
    for (i, c) in corners.iter().enumerate() {
        let wx = if i & 4 != 0 { x } else { 1.0 - x };
        let wy = if i & 2 != 0 { y } else { 1.0 - y };
        let wz = if i & 1 != 0 { z } else { 1.0 - z };
        acc += c * wx * wy * wz;
    }
    acc
}

/// Re-labels boundary-adjacent voxels (a 6-neighbor with a different class)
/// to a class drawn uniformly from the distinct classes of their in-volume
/// neighbors, each independently with probability `flip_rate`. Decisions are
/// made against the input map, so flips do not cascade.
pub fn corrupt_labels(labels: &LabelMap, flip_rate: f64, seed: u64) -> Result<LabelMap> {
    if !(0.0..0.5).contains(&flip_rate) {
        return Err(Error::domain(
            "corrupt_labels",
            format!("flip_rate must lie in [0, 0.5), got {flip_rate}"),
        ));
    }
    let (xd, yd, zd) = labels.dims;
    let mut out = labels.labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in 0..xd {
        for y in 0..yd {
            for z in 0..zd {
                let idx = flat_index(labels.dims, x, y, z);
                let own = labels.labels[idx];
                let neighbors = neighbor_classes(labels, x, y, z);
                if !neighbors.iter().any(|&c| c != own) {
                    continue; // interior voxel
                }
                if rng.gen_range(0.0..1.0) < flip_rate {
                    let pick = rng.gen_range(0..neighbors.len());
                    out[idx] = neighbors[pick];
                }
            }
        }
    }
    LabelMap::new(labels.dims, out)
}

/// Distinct classes among the in-volume 6-neighbors, ascending.
pub fn neighbor_classes(labels: &LabelMap, x: usize, y: usize, z: usize) -> Vec<u8> {
    let (xd, yd, zd) = labels.dims;
    let mut found = [false; 256];
    let mut push = |xi: usize, yi: usize, zi: usize| {
        found[labels.labels[flat_index(labels.dims, xi, yi, zi)] as usize] = true;
    };
    if x > 0 {
        push(x - 1, y, z);
    }
    if x + 1 < xd {
        push(x + 1, y, z);
    }
    if y > 0 {
        push(x, y - 1, z);
    }
    if y + 1 < yd {
        push(x, y + 1, z);
    }
    if z > 0 {
        push(x, y, z - 1);
    }
    if z + 1 < zd {
        push(x, y, z + 1);
    }
    (0..256usize)
        .filter(|&c| found[c])
        .map(|c| c as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(age_t: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            age_t,
            dims: (20, 20, 20),
            spacing_mm: (1.0, 1.0, 1.0),
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            gyrification_amplitude: 0.05,
            seed,
            shell_radii: default_shell_radii(),
            schedule: ContrastSchedule::default(),
        }
    }

    fn class_mean(vol: &Volume, labels: &LabelMap, ch: usize, class: u8) -> f64 {
        let data = vol.channel(ch);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, l) in data.iter().zip(&labels.labels) {
            if *l == class {
                sum += *v as f64;
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn noiseless_regions_are_constant_and_ordered() {
        let (vol, labels) = generate_phantom(&spec(0.5, 42)).unwrap();
        // exactly constant per class per channel
        for ch in 0..2 {
            let data = vol.channel(ch);
            for class in [BACKGROUND, CSF, GM, WM] {
                let mut vals = data
                    .iter()
                    .zip(&labels.labels)
                    .filter(|(_, l)| **l == class)
                    .map(|(v, _)| *v);
                let first = vals.next().unwrap();
                assert!(vals.all(|v| v == first), "class {class} ch {ch} not constant");
            }
        }
        // channel-0 ordering WM > GM > CSF at adult contrast
        let wm = class_mean(&vol, &labels, 0, WM);
        let gm = class_mean(&vol, &labels, 0, GM);
        let csf = class_mean(&vol, &labels, 0, CSF);
        assert!(wm > gm && gm > csf, "got WM={wm} GM={gm} CSF={csf}");
    }

    #[test]
    fn isointense_at_one_tenth() {
        let s = spec(0.1, 7);
        let sched = &s.schedule;
        assert_eq!(sched.mean(0, WM, 0.1), sched.mean(0, GM, 0.1));
        let (vol, labels) = generate_phantom(&s).unwrap();
        let wm = class_mean(&vol, &labels, 0, WM);
        let gm = class_mean(&vol, &labels, 0, GM);
        assert_eq!(wm, gm);
    }

    #[test]
    fn opposite_contrast_ordering_across_channels() {
        let sched = ContrastSchedule::default();
        for &t in &[0.0, 0.05, 0.2, 0.5, 1.0] {
            let c0 = sched.mean(0, WM, t) - sched.mean(0, GM, t);
            let c1 = sched.mean(1, WM, t) - sched.mean(1, GM, t);
            assert!(
                c0 * c1 < 0.0,
                "contrasts should have opposite sign at t={t}: {c0} vs {c1}"
            );
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut s = spec(0.3, 99);
        s.noise_sigma = 0.05;
        s.bias_amplitude = 0.2;
        let (v1, l1) = generate_phantom(&s).unwrap();
        let (v2, l2) = generate_phantom(&s).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn rejects_small_dims() {
        let mut s = spec(0.5, 1);
        s.dims = (15, 20, 20);
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn wm_count_monotone_in_wm_radius() {
        let mut counts = Vec::new();
        for &rho in &[0.45, 0.55, 0.65] {
            let mut s = spec(0.5, 5);
            s.shell_radii = (rho, 0.86, 0.94);
            let (_, labels) = generate_phantom(&s).unwrap();
            counts.push(labels.count_class(WM));
        }
        assert!(counts[0] <= counts[1] && counts[1] <= counts[2], "{counts:?}");
    }

    #[test]
    fn corrupt_zero_rate_is_identity() {
        let (_, labels) = generate_phantom(&spec(0.5, 3)).unwrap();
        let out = corrupt_labels(&labels, 0.0, 17).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn corrupt_uniform_map_unchanged() {
        let labels = LabelMap::new((4, 4, 4), vec![BACKGROUND; 64]).unwrap();
        let out = corrupt_labels(&labels, 0.4, 5).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn corrupt_rate_rejected_outside_range() {
        let labels = LabelMap::new((4, 4, 4), vec![0; 64]).unwrap();
        assert!(corrupt_labels(&labels, 0.5, 1).is_err());
        assert!(corrupt_labels(&labels, -0.1, 1).is_err());
    }

    #[test]
    fn corrupt_changes_match_expected_count() {
        // expected changed fraction, recounted directly from the neighbor
        // class sets, within 3 sigma of the sum of per-voxel Bernoullis
        let (_, labels) = generate_phantom(&spec(0.5, 21)).unwrap();
        let rate = 0.2;
        let out = corrupt_labels(&labels, rate, 123).unwrap();

        let (xd, yd, zd) = labels.dims;
        let mut expected = 0.0;
        let mut variance = 0.0;
        let mut boundary = 0usize;
        for x in 0..xd {
            for y in 0..yd {
                for z in 0..zd {
                    let idx = flat_index(labels.dims, x, y, z);
                    let own = labels.labels[idx];
                    let classes = neighbor_classes(&labels, x, y, z);
                    if !classes.iter().any(|&c| c != own) {
                        continue;
                    }
                    boundary += 1;
                    let others = classes.iter().filter(|&&c| c != own).count();
                    let p = rate * others as f64 / classes.len() as f64;
                    expected += p;
                    variance += p * (1.0 - p);
                }
            }
        }
        let changed = labels
            .labels
            .iter()
            .zip(&out.labels)
            .filter(|(a, b)| a != b)
            .count() as f64;
        assert!(boundary > 100, "phantom should have a real boundary set");
        let sigma = variance.sqrt();
        assert!(
            (changed - expected).abs() <= 3.0 * sigma,
            "changed {changed}, expected {expected} +- {}",
            3.0 * sigma
        );
    }
}
