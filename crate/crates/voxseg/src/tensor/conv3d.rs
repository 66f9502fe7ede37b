//! Direct 3D cross-correlation kernels (forward and the three backward
//! passes). Layout is `[N, C, X, Y, Z]` with Z fastest. Every output element
//! is accumulated by exactly one task in a fixed sequential order (channel,
//! then kernel tap, then position), so multi-threaded runs are bit-identical
//! to single-threaded ones.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ox: usize,
    pub oy: usize,
    pub oz: usize,
}

/// Output extent of one axis: `floor((x + 2*pad - k)/stride) + 1`.
pub fn conv3d_out_extent(x: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = x + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvDims {
    pub fn new(
        n: usize,
        cin: usize,
        cout: usize,
        spatial: [usize; 3],
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let [x, y, z] = spatial;
        Some(ConvDims {
            n,
            cin,
            cout,
            x,
            y,
            z,
            k,
            stride,
            pad,
            ox: conv3d_out_extent(x, k, stride, pad)?,
            oy: conv3d_out_extent(y, k, stride, pad)?,
            oz: conv3d_out_extent(z, k, stride, pad)?,
        })
    }

    fn in_volume(&self) -> usize {
        self.x * self.y * self.z
    }

    fn out_volume(&self) -> usize {
        self.ox * self.oy * self.oz
    }

    /// Multiply-accumulate count; used to decide whether threading pays off.
    fn work(&self) -> usize {
        self.n * self.cout * self.cin * self.out_volume() * self.k * self.k * self.k
    }
}

/// Output positions `o` for which `o*stride - pad + tap` lands inside
/// `[0, in_extent)`. Returns `lo..hi` (half-open).
fn tap_range(in_extent: usize, out_extent: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap + stride - 1) / stride
    } else {
        0
    };
    let max_i = in_extent as isize - 1 + pad as isize - tap as isize;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i as usize) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

const PAR_WORK_THRESHOLD: usize = 1 << 19;

fn for_each_chunk<F>(buf: &mut [f64], chunk: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if parallel {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in buf.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Forward cross-correlation. `out` must hold `n*cout*ox*oy*oz` elements.
pub fn forward(input: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let (ivol, ovol) = (d.in_volume(), d.out_volume());
    let parallel = d.work() >= PAR_WORK_THRESHOLD;
    for_each_chunk(out, ovol, parallel, |slab, out_chunk| {
        let n = slab / d.cout;
        let co = slab % d.cout;
        out_chunk.fill(bias[co]);
        for ci in 0..d.cin {
            let in_slab = &input[(n * d.cin + ci) * ivol..][..ivol];
            accumulate_taps(in_slab, kernel, d, co, ci, out_chunk);
        }
    });
}

fn accumulate_taps(in_slab: &[f64], kernel: &[f64], d: &ConvDims, co: usize, ci: usize, out_chunk: &mut [f64]) {
    let k = d.k;
    for kx in 0..k {
        let (ox_lo, ox_hi) = tap_range(d.x, d.ox, kx, d.stride, d.pad);
        for ky in 0..k {
            let (oy_lo, oy_hi) = tap_range(d.y, d.oy, ky, d.stride, d.pad);
            for kz in 0..k {
                let (oz_lo, oz_hi) = tap_range(d.z, d.oz, kz, d.stride, d.pad);
                if oz_lo >= oz_hi {
                    continue;
                }
                let w = kernel[(((co * d.cin + ci) * k + kx) * k + ky) * k + kz];
                let len = oz_hi - oz_lo;
                for oxi in ox_lo..ox_hi {
                    let ix = oxi * d.stride + kx - d.pad;
                    for oyi in oy_lo..oy_hi {
                        let iy = oyi * d.stride + ky - d.pad;
                        let iz0 = oz_lo * d.stride + kz - d.pad;
                        let orow = &mut out_chunk[(oxi * d.oy + oyi) * d.oz + oz_lo..][..len];
                        let ibase = (ix * d.y + iy) * d.z + iz0;
                        if d.stride == 1 {
                            let irow = &in_slab[ibase..][..len];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += w * i;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += w * in_slab[ibase + j * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the input. `gin` must be zero-initialized.
pub fn grad_input(kernel: &[f64], gout: &[f64], d: &ConvDims, gin: &mut [f64]) {
    let (ivol, ovol) = (d.in_volume(), d.out_volume());
    let parallel = d.work() >= PAR_WORK_THRESHOLD;
    let k = d.k;
    for_each_chunk(gin, ivol, parallel, |slab, gin_chunk| {
        let n = slab / d.cin;
        let ci = slab % d.cin;
        for co in 0..d.cout {
            let gout_slab = &gout[(n * d.cout + co) * ovol..][..ovol];
            for kx in 0..k {
                let (ox_lo, ox_hi) = tap_range(d.x, d.ox, kx, d.stride, d.pad);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = tap_range(d.y, d.oy, ky, d.stride, d.pad);
                    for kz in 0..k {
                        let (oz_lo, oz_hi) = tap_range(d.z, d.oz, kz, d.stride, d.pad);
                        if oz_lo >= oz_hi {
                            continue;
                        }
                        let w = kernel[(((co * d.cin + ci) * k + kx) * k + ky) * k + kz];
                        let len = oz_hi - oz_lo;
                        for oxi in ox_lo..ox_hi {
                            let ix = oxi * d.stride + kx - d.pad;
                            for oyi in oy_lo..oy_hi {
                                let iy = oyi * d.stride + ky - d.pad;
                                let iz0 = oz_lo * d.stride + kz - d.pad;
                                let grow = &gout_slab[(oxi * d.oy + oyi) * d.oz + oz_lo..][..len];
                                let ibase = (ix * d.y + iy) * d.z + iz0;
                                if d.stride == 1 {
                                    let irow = &mut gin_chunk[ibase..][..len];
                                    for (i, g) in irow.iter_mut().zip(grow) {
                                        *i += w * g;
                                    }
                                } else {
                                    for (j, g) in grow.iter().enumerate() {
                                        gin_chunk[ibase + j * d.stride] += w * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the kernel. `gk` must hold `cout*cin*k^3` elements.
pub fn grad_kernel(input: &[f64], gout: &[f64], d: &ConvDims, gk: &mut [f64]) {
    let (ivol, ovol) = (d.in_volume(), d.out_volume());
    let parallel = d.work() >= PAR_WORK_THRESHOLD;
    let k = d.k;
    let per_co = d.cin * k * k * k;
    for_each_chunk(gk, per_co, parallel, |co, gk_chunk| {
        for ci in 0..d.cin {
            for kx in 0..k {
                let (ox_lo, ox_hi) = tap_range(d.x, d.ox, kx, d.stride, d.pad);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = tap_range(d.y, d.oy, ky, d.stride, d.pad);
                    for kz in 0..k {
                        let (oz_lo, oz_hi) = tap_range(d.z, d.oz, kz, d.stride, d.pad);
                        let mut acc = 0.0;
                        if oz_lo < oz_hi {
                            let len = oz_hi - oz_lo;
                            for n in 0..d.n {
                                let in_slab = &input[(n * d.cin + ci) * ivol..][..ivol];
                                let gout_slab = &gout[(n * d.cout + co) * ovol..][..ovol];
                                for oxi in ox_lo..ox_hi {
                                    let ix = oxi * d.stride + kx - d.pad;
                                    for oyi in oy_lo..oy_hi {
                                        let iy = oyi * d.stride + ky - d.pad;
                                        let iz0 = oz_lo * d.stride + kz - d.pad;
                                        let grow =
                                            &gout_slab[(oxi * d.oy + oyi) * d.oz + oz_lo..][..len];
                                        let ibase = (ix * d.y + iy) * d.z + iz0;
                                        if d.stride == 1 {
                                            let irow = &in_slab[ibase..][..len];
                                            for (i, g) in irow.iter().zip(grow) {
                                                acc += i * g;
                                            }
                                        } else {
                                            for (j, g) in grow.iter().enumerate() {
                                                acc += in_slab[ibase + j * d.stride] * g;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        gk_chunk[((ci * k + kx) * k + ky) * k + kz] = acc;
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the bias: sum of `gout` over batch and spatial positions.
pub fn grad_bias(gout: &[f64], d: &ConvDims, gb: &mut [f64]) {
    let ovol = d.out_volume();
    for (co, b) in gb.iter_mut().enumerate() {
        let mut acc = 0.0;
        for n in 0..d.n {
            let slab = &gout[(n * d.cout + co) * ovol..][..ovol];
            for g in slab {
                acc += g;
            }
        }
        *b = acc;
    }
}
