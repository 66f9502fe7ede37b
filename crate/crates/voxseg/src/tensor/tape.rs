//! Operation tape: values are recorded during the forward pass and gradients
//! are accumulated by replaying the tape in reverse.

use super::conv3d::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Which reading of the proxy contrastive loss to compute.
///
/// `Exp` is the InfoNCE form (temperature-scaled exponentials); `Literal`
/// uses the raw similarity ratios and fails on non-positive log arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveVariant {
    Exp,
    Literal,
}

const NORM_CLAMP: f64 = 1e-12;
const PROB_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    Conv3d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        dims: ConvDims,
    },
    InstanceNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        // (mean, inv_std) per (n, c) slice, saved by the forward pass
        stats: Vec<(f64, f64)>,
    },
    Relu {
        input: ValueId,
    },
    Softmax {
        input: ValueId,
        axis: usize,
    },
    Log {
        input: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        input: ValueId,
        factor: f64,
    },
    Sum {
        input: ValueId,
    },
    Mean {
        input: ValueId,
    },
    Reshape {
        input: ValueId,
    },
    Upsample2 {
        input: ValueId,
    },
    ConcatChannels {
        a: ValueId,
        b: ValueId,
    },
    GatherVectors {
        field: ValueId,
        indices: Vec<usize>,
    },
    CosineSim {
        queries: ValueId,
        keys: ValueId,
    },
    SelectedNll {
        probs: ValueId,
        picks: Vec<(usize, u8)>,
    },
    ProxyInfoNce {
        sims: ValueId,
        labels: Vec<u8>,
        per_class: usize,
        tau: f64,
        variant: ContrastiveVariant,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Leaves that require gradients
/// but do not influence the loss hold zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        id
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape_of(&self, id: ValueId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.node(id).data[0]
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// 3D cross-correlation of `input [N,Cin,X,Y,Z]` with
    /// `kernel [Cout,Cin,k,k,k]` plus per-channel `bias [Cout]`.
    pub fn conv3d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let ishape = self.shape_of(input).to_vec();
        let kshape = self.shape_of(kernel).to_vec();
        let bshape = self.shape_of(bias).to_vec();
        if ishape.len() != 5 || kshape.len() != 5 {
            return Err(Error::shape("conv3d", "rank-5 input and kernel", (ishape, kshape)));
        }
        let k = kshape[2];
        if kshape[3] != k || kshape[4] != k || !matches!(k, 1 | 3) {
            return Err(Error::domain(
                "conv3d",
                format!("kernel size must be cubic with k in {{1,3}}, got {kshape:?}"),
            ));
        }
        if !matches!(stride, 1 | 2) || pad > 1 {
            return Err(Error::domain(
                "conv3d",
                format!("stride must be 1 or 2 and padding 0 or 1, got stride={stride} pad={pad}"),
            ));
        }
        if ishape[1] != kshape[1] {
            return Err(Error::shape(
                "conv3d input channels vs kernel Cin",
                kshape[1],
                ishape[1],
            ));
        }
        if bshape != [kshape[0]] {
            return Err(Error::shape("conv3d bias", [kshape[0]], bshape));
        }
        let dims = ConvDims::new(
            ishape[0],
            ishape[1],
            kshape[0],
            [ishape[2], ishape[3], ishape[4]],
            k,
            stride,
            pad,
        )
        .ok_or_else(|| {
            Error::shape("conv3d output extents", "positive extents", &ishape)
        })?;
        let mut out = vec![0.0; dims.n * dims.cout * dims.ox * dims.oy * dims.oz];
        conv3d::forward(self.value(input), self.value(kernel), self.value(bias), &dims, &mut out);
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            vec![dims.n, dims.cout, dims.ox, dims.oy, dims.oz],
            out,
            Op::Conv3d {
                input,
                kernel,
                bias,
                dims,
            },
            needs,
        ))
    }

    /// Per-(sample, channel) normalization over the spatial axes with
    /// population variance, then scale/shift by `gamma`/`beta`.
    pub fn instance_norm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let ishape = self.shape_of(input).to_vec();
        if ishape.len() != 5 {
            return Err(Error::shape("instance_norm", "rank-5 input", &ishape));
        }
        let (n, c) = (ishape[0], ishape[1]);
        let vol: usize = ishape[2] * ishape[3] * ishape[4];
        if vol < 2 {
            return Err(Error::domain(
                "instance_norm",
                format!("spatial volume must be >= 2, got {vol}"),
            ));
        }
        if self.shape_of(gamma) != [c] || self.shape_of(beta) != [c] {
            return Err(Error::shape(
                "instance_norm gamma/beta",
                [c],
                (self.shape_of(gamma).to_vec(), self.shape_of(beta).to_vec()),
            ));
        }
        let x = self.value(input);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; x.len()];
        let mut stats = Vec::with_capacity(n * c);
        for slab in 0..n * c {
            let ch = slab % c;
            let xs = &x[slab * vol..][..vol];
            let mean = xs.iter().sum::<f64>() / vol as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            let os = &mut out[slab * vol..][..vol];
            let (gc, bc) = (g[ch], b[ch]);
            for (o, v) in os.iter_mut().zip(xs) {
                *o = (v - mean) * inv_std * gc + bc;
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            ishape,
            out,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let data = self.value(input).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape_of(input).to_vec();
        let needs = self.needs(input);
        self.push(shape, data, Op::Relu { input }, needs)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, input: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.shape_of(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax axis", shape.len(), axis));
        }
        let x = self.value(input);
        let mut out = vec![0.0; x.len()];
        softmax_forward(x, &shape, axis, &mut out);
        let needs = self.needs(input);
        Ok(self.push(shape, out, Op::Softmax { input, axis }, needs))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, input: ValueId) -> Result<ValueId> {
        let x = self.value(input);
        if let Some(v) = x.iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {v}")));
        }
        let data = x.iter().map(|v| v.ln()).collect();
        let shape = self.shape_of(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(shape, data, Op::Log { input }, needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                "add",
                self.shape_of(a).to_vec(),
                self.shape_of(b).to_vec(),
            ));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                "mul",
                self.shape_of(a).to_vec(),
                self.shape_of(b).to_vec(),
            ));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, input: ValueId, factor: f64) -> ValueId {
        let data = self.value(input).iter().map(|v| v * factor).collect();
        let shape = self.shape_of(input).to_vec();
        let needs = self.needs(input);
        self.push(shape, data, Op::Scale { input, factor }, needs)
    }

    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let s: f64 = self.value(input).iter().sum();
        let needs = self.needs(input);
        self.push(vec![1], vec![s], Op::Sum { input }, needs)
    }

    pub fn mean(&mut self, input: ValueId) -> ValueId {
        let x = self.value(input);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let needs = self.needs(input);
        self.push(vec![1], vec![m], Op::Mean { input }, needs)
    }

    /// Reinterpret a contiguous value as a `[rows, cols]` matrix.
    pub fn reshape_rows(&mut self, input: ValueId, rows: usize, cols: usize) -> Result<ValueId> {
        let numel = self.node(input).data.len();
        if rows * cols != numel {
            return Err(Error::shape("reshape_rows", numel, rows * cols));
        }
        let data = self.value(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(vec![rows, cols], data, Op::Reshape { input }, needs))
    }

    /// Nearest-neighbor upsampling by a factor of 2 along each spatial axis.
    pub fn upsample_nearest2(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("upsample_nearest2", "rank-5 input", &s));
        }
        let (n, c, x, y, z) = (s[0], s[1], s[2], s[3], s[4]);
        let (ox, oy, oz) = (2 * x, 2 * y, 2 * z);
        let src = self.value(input);
        let mut out = vec![0.0; n * c * ox * oy * oz];
        for slab in 0..n * c {
            let sv = &src[slab * x * y * z..][..x * y * z];
            let ov = &mut out[slab * ox * oy * oz..][..ox * oy * oz];
            for oxi in 0..ox {
                for oyi in 0..oy {
                    let srow = &sv[((oxi / 2) * y + oyi / 2) * z..][..z];
                    let orow = &mut ov[(oxi * oy + oyi) * oz..][..oz];
                    for (ozi, o) in orow.iter_mut().enumerate() {
                        *o = srow[ozi / 2];
                    }
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![n, c, ox, oy, oz], out, Op::Upsample2 { input }, needs))
    }

    /// Concatenate along the channel axis: `[N,Ca,S] ++ [N,Cb,S] -> [N,Ca+Cb,S]`.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() != 5 || sb.len() != 5 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let vol: usize = sa[2..].iter().product();
        let (da, db) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * (ca + cb) * vol];
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * vol..][..(ca + cb) * vol];
            dst[..ca * vol].copy_from_slice(&da[ni * ca * vol..][..ca * vol]);
            dst[ca * vol..].copy_from_slice(&db[ni * cb * vol..][..cb * vol]);
        }
        let shape = vec![n, ca + cb, sa[2], sa[3], sa[4]];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::ConcatChannels { a, b }, needs))
    }

    /// Gather per-voxel vectors from a field `[N,D,X,Y,Z]`. Each index is a
    /// flat `n*X*Y*Z + v` position; the result is `[Q,D]`.
    pub fn gather_vectors(&mut self, field: ValueId, indices: Vec<usize>) -> Result<ValueId> {
        let s = self.shape_of(field).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("gather_vectors", "rank-5 field", &s));
        }
        let (n, d) = (s[0], s[1]);
        let vol: usize = s[2..].iter().product();
        if indices.is_empty() {
            return Err(Error::domain("gather_vectors", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n * vol) {
            return Err(Error::domain(
                "gather_vectors",
                format!("index {bad} out of range for {} voxels", n * vol),
            ));
        }
        let src = self.value(field);
        let q = indices.len();
        let mut out = vec![0.0; q * d];
        for (qi, &flat) in indices.iter().enumerate() {
            let (ni, v) = (flat / vol, flat % vol);
            for di in 0..d {
                out[qi * d + di] = src[(ni * d + di) * vol + v];
            }
        }
        let needs = self.needs(field);
        Ok(self.push(vec![q, d], out, Op::GatherVectors { field, indices }, needs))
    }

    /// Cosine similarity of every query row against every key row:
    /// `[Q,D] x [K,D] -> [Q,K]`. Norms below 1e-12 are clamped to 1e-12.
    pub fn cosine_sim(&mut self, queries: ValueId, keys: ValueId) -> Result<ValueId> {
        let sq = self.shape_of(queries).to_vec();
        let sk = self.shape_of(keys).to_vec();
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::shape("cosine_sim", &sq, &sk));
        }
        let (q, k, d) = (sq[0], sk[0], sq[1]);
        let (qd, kd) = (self.value(queries), self.value(keys));
        let qn: Vec<f64> = (0..q).map(|i| clamped_norm(&qd[i * d..][..d])).collect();
        let kn: Vec<f64> = (0..k).map(|j| clamped_norm(&kd[j * d..][..d])).collect();
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            let qrow = &qd[i * d..][..d];
            for j in 0..k {
                let krow = &kd[j * d..][..d];
                let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                out[i * k + j] = dot / (qn[i] * kn[j]);
            }
        }
        let needs = self.needs(queries) || self.needs(keys);
        Ok(self.push(vec![q, k], out, Op::CosineSim { queries, keys }, needs))
    }

    /// Mean negative log-probability of the true class over the selected
    /// voxels. `picks` holds `(n*X*Y*Z + v, class)` pairs into
    /// `probs [N,C,X,Y,Z]`; probabilities are clamped below 1e-12.
    pub fn nll_selected(&mut self, probs: ValueId, picks: Vec<(usize, u8)>) -> Result<ValueId> {
        let s = self.shape_of(probs).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("nll_selected", "rank-5 probs", &s));
        }
        if picks.is_empty() {
            return Err(Error::domain("nll_selected", "empty selection"));
        }
        let (n, c) = (s[0], s[1]);
        let vol: usize = s[2..].iter().product();
        let p = self.value(probs);
        let mut acc = 0.0;
        for &(flat, cls) in &picks {
            if flat >= n * vol || (cls as usize) >= c {
                return Err(Error::domain(
                    "nll_selected",
                    format!("selection ({flat}, {cls}) out of range"),
                ));
            }
            let (ni, v) = (flat / vol, flat % vol);
            let prob = p[(ni * c + cls as usize) * vol + v];
            acc -= prob.max(PROB_CLAMP).ln();
        }
        let loss = acc / picks.len() as f64;
        let needs = self.needs(probs);
        Ok(self.push(vec![1], vec![loss], Op::SelectedNll { probs, picks }, needs))
    }

    /// Proxy contrastive loss over a similarity matrix `[Q, C*M]` (key
    /// index = class*M + proxy). Returns the mean per-query loss.
    pub fn proxy_infonce(
        &mut self,
        sims: ValueId,
        labels: Vec<u8>,
        classes: usize,
        per_class: usize,
        tau: f64,
        variant: ContrastiveVariant,
    ) -> Result<ValueId> {
        let s = self.shape_of(sims).to_vec();
        if s.len() != 2 || s[1] != classes * per_class {
            return Err(Error::shape("proxy_infonce", classes * per_class, &s));
        }
        if s[0] != labels.len() {
            return Err(Error::shape("proxy_infonce labels", s[0], labels.len()));
        }
        if tau <= 0.0 {
            return Err(Error::domain("proxy_infonce", format!("tau must be > 0, got {tau}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= classes) {
            return Err(Error::domain(
                "proxy_infonce",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let data = self.value(sims);
        let total = infonce_forward(data, &labels, classes, per_class, tau, variant)?;
        let needs = self.needs(sims);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::ProxyInfoNce {
                sims,
                labels,
                per_class,
                tau,
                variant,
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss. Leaves with
    /// `requires_grad` that do not reach the loss receive zero gradients.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                self.shape_of(loss).to_vec(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let g = hi[0].as_deref().unwrap();
            self.backward_node(i, g, lo);
        }

        // Untouched trainable leaves get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                dims,
            } => {
                if self.needs(*input) {
                    let gi = acc_buf(&mut grads[input.0], self.node(*input).data.len());
                    let mut tmp = vec![0.0; gi.len()];
                    conv3d::grad_input(&self.node(*kernel).data, g, dims, &mut tmp);
                    add_into(gi, &tmp);
                }
                if self.needs(*kernel) {
                    let gk = acc_buf(&mut grads[kernel.0], self.node(*kernel).data.len());
                    let mut tmp = vec![0.0; gk.len()];
                    conv3d::grad_kernel(&self.node(*input).data, g, dims, &mut tmp);
                    add_into(gk, &tmp);
                }
                if self.needs(*bias) {
                    let gb = acc_buf(&mut grads[bias.0], self.node(*bias).data.len());
                    let mut tmp = vec![0.0; gb.len()];
                    conv3d::grad_bias(g, dims, &mut tmp);
                    add_into(gb, &tmp);
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            } => {
                let ishape = &self.node(*input).shape;
                let (n, c) = (ishape[0], ishape[1]);
                let vol: usize = ishape[2..].iter().product();
                let x = &self.node(*input).data;
                let gam = &self.node(*gamma).data;
                let need_x = self.needs(*input);
                let need_g = self.needs(*gamma);
                let need_b = self.needs(*beta);
                let mut dx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut dgam = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for slab in 0..n * c {
                    let ch = slab % c;
                    let (mean, inv_std) = stats[slab];
                    let xs = &x[slab * vol..][..vol];
                    let gs = &g[slab * vol..][..vol];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (gi, xi) in gs.iter().zip(xs) {
                        let xh = (xi - mean) * inv_std;
                        sum_g += gi;
                        sum_gx += gi * xh;
                    }
                    dgam[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    if need_x {
                        let mg = sum_g / vol as f64;
                        let mgx = sum_gx / vol as f64;
                        let coef = gam[ch] * inv_std;
                        let ds = &mut dx[slab * vol..][..vol];
                        for ((d, gi), xi) in ds.iter_mut().zip(gs).zip(xs) {
                            let xh = (xi - mean) * inv_std;
                            *d = coef * (gi - mg - xh * mgx);
                        }
                    }
                }
                if need_x {
                    add_into(acc_buf(&mut grads[input.0], x.len()), &dx);
                }
                if need_g {
                    add_into(acc_buf(&mut grads[gamma.0], c), &dgam);
                }
                if need_b {
                    add_into(acc_buf(&mut grads[beta.0], c), &dbeta);
                }
            }
            Op::Relu { input } => {
                let x = &self.node(*input).data;
                let gi = acc_buf(&mut grads[input.0], x.len());
                for ((d, gv), xv) in gi.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let shape = &node.shape;
                let out = &node.data;
                let axis_size = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let gi = acc_buf(&mut grads[input.0], out.len());
                for o in 0..outer {
                    for iv in 0..inner {
                        let base = o * axis_size * inner + iv;
                        let mut dot = 0.0;
                        for a in 0..axis_size {
                            let f = base + a * inner;
                            dot += g[f] * out[f];
                        }
                        for a in 0..axis_size {
                            let f = base + a * inner;
                            gi[f] += out[f] * (g[f] - dot);
                        }
                    }
                }
            }
            Op::Log { input } => {
                let x = &self.node(*input).data;
                let gi = acc_buf(&mut grads[input.0], x.len());
                for ((d, gv), xv) in gi.iter_mut().zip(g).zip(x) {
                    *d += gv / xv;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(acc_buf(&mut grads[a.0], g.len()), g);
                }
                if self.needs(*b) {
                    add_into(acc_buf(&mut grads[b.0], g.len()), g);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = &self.node(*b).data;
                    let ga = acc_buf(&mut grads[a.0], g.len());
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = &self.node(*a).data;
                    let gb = acc_buf(&mut grads[b.0], g.len());
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { input, factor } => {
                let gi = acc_buf(&mut grads[input.0], g.len());
                for (d, gv) in gi.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
            Op::Sum { input } => {
                let len = self.node(*input).data.len();
                let gi = acc_buf(&mut grads[input.0], len);
                for d in gi.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean { input } => {
                let len = self.node(*input).data.len();
                let gi = acc_buf(&mut grads[input.0], len);
                let gv = g[0] / len as f64;
                for d in gi.iter_mut() {
                    *d += gv;
                }
            }
            Op::Reshape { input } => {
                add_into(acc_buf(&mut grads[input.0], g.len()), g);
            }
            Op::Upsample2 { input } => {
                let s = &self.node(*input).shape;
                let (n, c, x, y, z) = (s[0], s[1], s[2], s[3], s[4]);
                let (oy, oz) = (2 * y, 2 * z);
                let gi = acc_buf(&mut grads[input.0], n * c * x * y * z);
                for slab in 0..n * c {
                    let gsl = &g[slab * 8 * x * y * z..][..8 * x * y * z];
                    let isl = &mut gi[slab * x * y * z..][..x * y * z];
                    for ix in 0..x {
                        for iy in 0..y {
                            let irow = &mut isl[(ix * y + iy) * z..][..z];
                            for (iz, d) in irow.iter_mut().enumerate() {
                                // fixed order over the 8 children
                                for dx in 0..2 {
                                    for dy in 0..2 {
                                        for dz in 0..2 {
                                            let f = ((2 * ix + dx) * oy + 2 * iy + dy) * oz
                                                + 2 * iz
                                                + dz;
                                            *d += gsl[f];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let sa = &self.node(*a).shape;
                let sb = &self.node(*b).shape;
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let vol: usize = sa[2..].iter().product();
                if self.needs(*a) {
                    let ga = acc_buf(&mut grads[a.0], n * ca * vol);
                    for ni in 0..n {
                        let src = &g[ni * (ca + cb) * vol..][..ca * vol];
                        add_into(&mut ga[ni * ca * vol..][..ca * vol], src);
                    }
                }
                if self.needs(*b) {
                    let gb = acc_buf(&mut grads[b.0], n * cb * vol);
                    for ni in 0..n {
                        let src = &g[ni * (ca + cb) * vol + ca * vol..][..cb * vol];
                        add_into(&mut gb[ni * cb * vol..][..cb * vol], src);
                    }
                }
            }
            Op::GatherVectors { field, indices } => {
                let s = &self.node(*field).shape;
                let d = s[1];
                let vol: usize = s[2..].iter().product();
                let gf = acc_buf(&mut grads[field.0], self.node(*field).data.len());
                for (qi, &flat) in indices.iter().enumerate() {
                    let (ni, v) = (flat / vol, flat % vol);
                    for di in 0..d {
                        gf[(ni * d + di) * vol + v] += g[qi * d + di];
                    }
                }
            }
            Op::CosineSim { queries, keys } => {
                let (qd, kd) = (&self.node(*queries).data, &self.node(*keys).data);
                let d = self.node(*queries).shape[1];
                let q = self.node(*queries).shape[0];
                let k = self.node(*keys).shape[0];
                let out = &node.data;
                let qn: Vec<f64> = (0..q).map(|i| clamped_norm(&qd[i * d..][..d])).collect();
                let kn: Vec<f64> = (0..k).map(|j| clamped_norm(&kd[j * d..][..d])).collect();
                let need_q = self.needs(*queries);
                let need_k = self.needs(*keys);
                let mut gq = if need_q { vec![0.0; q * d] } else { Vec::new() };
                let mut gk = if need_k { vec![0.0; k * d] } else { Vec::new() };
                for i in 0..q {
                    let qrow = &qd[i * d..][..d];
                    let q_clamped = raw_norm(qrow) < NORM_CLAMP;
                    for j in 0..k {
                        let gv = g[i * k + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let krow = &kd[j * d..][..d];
                        let s = out[i * k + j];
                        let k_clamped = raw_norm(krow) < NORM_CLAMP;
                        if need_q {
                            let dst = &mut gq[i * d..][..d];
                            let c1 = gv / (qn[i] * kn[j]);
                            let c2 = if q_clamped { 0.0 } else { gv * s / (qn[i] * qn[i]) };
                            for ((t, kv), qv) in dst.iter_mut().zip(krow).zip(qrow) {
                                *t += c1 * kv - c2 * qv;
                            }
                        }
                        if need_k {
                            let dst = &mut gk[j * d..][..d];
                            let c1 = gv / (qn[i] * kn[j]);
                            let c2 = if k_clamped { 0.0 } else { gv * s / (kn[j] * kn[j]) };
                            for ((t, qv), kv) in dst.iter_mut().zip(qrow).zip(krow) {
                                *t += c1 * qv - c2 * kv;
                            }
                        }
                    }
                }
                if need_q {
                    add_into(acc_buf(&mut grads[queries.0], q * d), &gq);
                }
                if need_k {
                    add_into(acc_buf(&mut grads[keys.0], k * d), &gk);
                }
            }
            Op::SelectedNll { probs, picks } => {
                let s = &self.node(*probs).shape;
                let c = s[1];
                let vol: usize = s[2..].iter().product();
                let p = &self.node(*probs).data;
                let gp = acc_buf(&mut grads[probs.0], p.len());
                let scale = g[0] / picks.len() as f64;
                for &(flat, cls) in picks {
                    let (ni, v) = (flat / vol, flat % vol);
                    let idx = (ni * c + cls as usize) * vol + v;
                    let prob = p[idx];
                    if prob > PROB_CLAMP {
                        gp[idx] -= scale / prob;
                    }
                }
            }
            Op::ProxyInfoNce {
                sims,
                labels,
                per_class,
                tau,
                variant,
            } => {
                let sd = &self.node(*sims).data;
                let keys = self.node(*sims).shape[1];
                let gs = acc_buf(&mut grads[sims.0], sd.len());
                infonce_backward(sd, labels, keys / per_class, *per_class, *tau, *variant, g[0], gs);
            }
        }
    }
}

fn raw_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn clamped_norm(v: &[f64]) -> f64 {
    raw_norm(v).max(NORM_CLAMP)
}

fn acc_buf(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for iv in 0..inner {
            let base = o * axis_size * inner + iv;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..axis_size {
                mx = mx.max(x[base + a * inner]);
            }
            let mut s = 0.0;
            for a in 0..axis_size {
                let e = (x[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                s += e;
            }
            for a in 0..axis_size {
                out[base + a * inner] /= s;
            }
        }
    }
}

/// Key indices of the positive proxy group for `label`.
fn split_keys(label: u8, per_class: usize) -> std::ops::Range<usize> {
    let start = label as usize * per_class;
    start..start + per_class
}

fn infonce_forward(
    sims: &[f64],
    labels: &[u8],
    classes: usize,
    per_class: usize,
    tau: f64,
    variant: ContrastiveVariant,
) -> Result<f64> {
    let keys = classes * per_class;
    let q = labels.len();
    let mut total = 0.0;
    for (qi, &label) in labels.iter().enumerate() {
        let row = &sims[qi * keys..][..keys];
        let pos = split_keys(label, per_class);
        match variant {
            ContrastiveVariant::Exp => {
                let mut mx = f64::NEG_INFINITY;
                for s in row {
                    mx = mx.max(s / tau);
                }
                let neg_sum: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !pos.contains(j))
                    .map(|(_, s)| ((s / tau) - mx).exp())
                    .sum();
                let mut lq = 0.0;
                for j in pos.clone() {
                    let a = row[j] / tau - mx;
                    lq += (a.exp() + neg_sum).ln() + mx - row[j] / tau;
                }
                total += lq / per_class as f64;
            }
            ContrastiveVariant::Literal => {
                let t: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !pos.contains(j))
                    .map(|(_, s)| s / tau)
                    .sum();
                let mut lq = 0.0;
                for j in pos.clone() {
                    let a = row[j] / tau;
                    let denom = a + t;
                    let frac = a / denom;
                    if !(frac > 0.0) || denom == 0.0 {
                        return Err(Error::domain(
                            "contrastive_loss (literal variant)",
                            format!(
                                "non-positive log argument {frac} for query {qi} (s+/tau={a}, denominator={denom})"
                            ),
                        ));
                    }
                    lq -= frac.ln();
                }
                total += lq / per_class as f64;
            }
        }
    }
    Ok(total / q as f64)
}

#[allow(clippy::too_many_arguments)]
fn infonce_backward(
    sims: &[f64],
    labels: &[u8],
    classes: usize,
    per_class: usize,
    tau: f64,
    variant: ContrastiveVariant,
    gout: f64,
    gsims: &mut [f64],
) {
    let keys = classes * per_class;
    let q = labels.len();
    let coeff = gout / (per_class as f64 * q as f64 * tau);
    for (qi, &label) in labels.iter().enumerate() {
        let row = &sims[qi * keys..][..keys];
        let grow = &mut gsims[qi * keys..][..keys];
        let pos = split_keys(label, per_class);
        match variant {
            ContrastiveVariant::Exp => {
                let mut mx = f64::NEG_INFINITY;
                for s in row {
                    mx = mx.max(s / tau);
                }
                let neg_sum: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !pos.contains(j))
                    .map(|(_, s)| ((s / tau) - mx).exp())
                    .sum();
                let mut inv_denom_sum = 0.0;
                for j in pos.clone() {
                    let ea = (row[j] / tau - mx).exp();
                    let denom = ea + neg_sum;
                    grow[j] += coeff * (ea / denom - 1.0);
                    inv_denom_sum += 1.0 / denom;
                }
                for (j, s) in row.iter().enumerate() {
                    if !pos.contains(&j) {
                        grow[j] += coeff * ((s / tau) - mx).exp() * inv_denom_sum;
                    }
                }
            }
            ContrastiveVariant::Literal => {
                let t: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !pos.contains(j))
                    .map(|(_, s)| s / tau)
                    .sum();
                let mut inv_denom_sum = 0.0;
                for j in pos.clone() {
                    let a = row[j] / tau;
                    grow[j] += -coeff * (1.0 / a - 1.0 / (a + t));
                    inv_denom_sum += 1.0 / (a + t);
                }
                for j in 0..keys {
                    if !pos.contains(&j) {
                        grow[j] += coeff * inv_denom_sum;
                    }
                }
            }
        }
    }
}
