//! Encoder-decoder feature extractor (V-Net family: kernel-3 convolutions,
//! instance norm + ReLU, stride-2 downsampling, nearest-neighbor upsampling,
//! skip connections) and the voxel-local MLP classification head of three
//! 1x1x1 convolutions. Also the checkpoint file format.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// How decoder stages merge the encoder skip: channel concatenation
/// (default) or addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Concat,
    Add,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// Embedding width D of the extractor's last layer; the classifier
    /// consumes exactly this many channels.
    pub feature_dim: usize,
    pub classes: usize,
    /// Fixed at 3 for every spatial convolution.
    pub kernel_size: usize,
    #[serde(default = "default_skip_mode")]
    pub skip_mode: SkipMode,
}

fn default_skip_mode() -> SkipMode {
    SkipMode::Concat
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 2,
            levels: 3,
            base_channels: 8,
            feature_dim: 16,
            classes: 4,
            kernel_size: 3,
            skip_mode: SkipMode::Concat,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("levels must be >= 2".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be >= 4".into()));
        }
        if self.feature_dim < 2 || self.classes < 2 || self.in_channels < 1 {
            return Err(Error::Config(
                "feature_dim >= 2, classes >= 2, in_channels >= 1 required".into(),
            ));
        }
        if self.kernel_size != 3 {
            return Err(Error::Config("kernel_size is fixed at 3".into()));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this for the down/up path.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named parameter tensors in a fixed declaration order; the checkpoint
/// payload is written in exactly this order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push((name, tensor));
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    w: usize,
    b: usize,
    norm: Option<(usize, usize)>, // gamma, beta
    relu: bool,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    enc_level0: [ConvBlock; 2],
    /// One (down, conv) pair per level >= 1.
    enc_deeper: Vec<(ConvBlock, ConvBlock)>,
    /// One (up, merge) pair per decoder stage, deepest first.
    dec: Vec<(ConvBlock, ConvBlock)>,
    final_conv: ConvBlock,
    head: [ConvBlock; 3],
}

/// The feature extractor plus classifier parameter set.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub params: ParamSet,
    plan: Plan,
}

const INSTANCE_NORM_EPS: f64 = 1e-5;

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
    k: usize,
}

impl Builder {
    /// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero,
    /// instance-norm gamma 1 and beta 0.
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: bool,
        relu: bool,
    ) -> ConvBlock {
        let fan_in = (cin * k * k * k) as f64;
        let fan_out = (cout * k * k * k) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let w = Tensor::rand_uniform(vec![cout, cin, k, k, k], -limit, limit, &mut self.rng)
            .with_grad();
        let b = Tensor::zeros(vec![cout]).with_grad();
        let wi = self.params.add(format!("{name}.weight"), w);
        let bi = self.params.add(format!("{name}.bias"), b);
        let norm = if norm {
            let gi = self
                .params
                .add(format!("{name}.gamma"), Tensor::full(vec![cout], 1.0).with_grad());
            let be = self
                .params
                .add(format!("{name}.beta"), Tensor::zeros(vec![cout]).with_grad());
            Some((gi, be))
        } else {
            None
        };
        ConvBlock {
            w: wi,
            b: bi,
            norm,
            relu,
            stride,
            pad: if k == 3 { 1 } else { 0 },
        }
    }
}

/// Deterministic construction from config and seed.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let k = cfg.kernel_size;
    let mut b = Builder {
        params: ParamSet::default(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        k,
    };
    let c0 = cfg.level_channels(0);
    let enc_level0 = [
        b.conv("enc0.block0", cfg.in_channels, c0, k, 1, true, true),
        b.conv("enc0.block1", c0, c0, k, 1, true, true),
    ];
    let mut enc_deeper = Vec::new();
    for level in 1..cfg.levels {
        let cin = cfg.level_channels(level - 1);
        let cout = cfg.level_channels(level);
        let down = b.conv(&format!("enc{level}.down"), cin, cout, k, 2, true, true);
        let conv = b.conv(&format!("enc{level}.block"), cout, cout, k, 1, true, true);
        enc_deeper.push((down, conv));
    }
    let mut dec = Vec::new();
    for level in (0..cfg.levels - 1).rev() {
        let c_hi = cfg.level_channels(level + 1);
        let c_lo = cfg.level_channels(level);
        let up = b.conv(&format!("dec{level}.up"), c_hi, c_lo, k, 1, true, true);
        let merge_in = match cfg.skip_mode {
            SkipMode::Concat => 2 * c_lo,
            SkipMode::Add => c_lo,
        };
        let merge = b.conv(&format!("dec{level}.merge"), merge_in, c_lo, k, 1, true, true);
        dec.push((up, merge));
    }
    // final feature layer: D channels, no normalization or activation
    let final_conv = b.conv("features", c0, cfg.feature_dim, k, 1, false, false);
    let d = cfg.feature_dim;
    let head = [
        b.conv("head0", d, d, 1, 1, false, true),
        b.conv("head1", d, d, 1, 1, false, true),
        b.conv("head2", d, cfg.classes, 1, 1, false, false),
    ];
    let _ = b.k;
    Ok(Network {
        cfg: cfg.clone(),
        params: b.params,
        plan: Plan {
            enc_level0,
            enc_deeper,
            dec,
            final_conv,
            head,
        },
    })
}

impl Network {
    /// Insert every parameter as a tape leaf, in declaration order.
    pub fn insert_params(&self, tape: &mut Tape) -> Vec<ValueId> {
        self.params.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Parameter indices whose true gradient is identically zero: a
    /// convolution bias followed by instance normalization adds a constant
    /// per (n, c) slice that the mean subtraction removes exactly. Finite
    /// differences on these measure only round-off, so gradient checks
    /// assert exact zeros instead of probing them.
    pub fn dead_bias_indices(&self) -> Vec<usize> {
        let mut dead = Vec::new();
        let mut visit = |blk: &ConvBlock| {
            if blk.norm.is_some() {
                dead.push(blk.b);
            }
        };
        for blk in &self.plan.enc_level0 {
            visit(blk);
        }
        for (down, conv) in &self.plan.enc_deeper {
            visit(down);
            visit(conv);
        }
        for (up, merge) in &self.plan.dec {
            visit(up);
            visit(merge);
        }
        visit(&self.plan.final_conv);
        for blk in &self.plan.head {
            visit(blk);
        }
        dead
    }

    fn apply_block(
        &self,
        tape: &mut Tape,
        ids: &[ValueId],
        block: &ConvBlock,
        input: ValueId,
    ) -> Result<ValueId> {
        let mut v = tape.conv3d(input, ids[block.w], ids[block.b], block.stride, block.pad)?;
        if let Some((g, be)) = block.norm {
            v = tape.instance_norm(v, ids[g], ids[be], INSTANCE_NORM_EPS)?;
        }
        if block.relu {
            v = tape.relu(v);
        }
        Ok(v)
    }

    /// Full-resolution voxel-wise embedding `[N, D, X, Y, Z]`.
    pub fn extract_features(
        &self,
        tape: &mut Tape,
        ids: &[ValueId],
        input: ValueId,
    ) -> Result<ValueId> {
        let shape = tape.shape_of(input).to_vec();
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(Error::shape(
                "extract_features input",
                format!("[N, {}, X, Y, Z]", self.cfg.in_channels),
                &shape,
            ));
        }
        let div = self.cfg.divisor();
        if shape[2..].iter().any(|&e| e % div != 0) {
            return Err(Error::shape(
                "extract_features patch extents",
                format!("divisible by {div}"),
                &shape[2..],
            ));
        }

        let mut v = input;
        for blk in &self.plan.enc_level0 {
            v = self.apply_block(tape, ids, blk, v)?;
        }
        let mut skips = vec![v];
        for (down, conv) in &self.plan.enc_deeper {
            v = self.apply_block(tape, ids, down, v)?;
            v = self.apply_block(tape, ids, conv, v)?;
            skips.push(v);
        }
        // deepest skip is the current value itself; drop it
        skips.pop();
        for (up, merge) in &self.plan.dec {
            let skip = skips.pop().expect("one skip per decoder stage");
            v = tape.upsample_nearest2(v)?;
            v = self.apply_block(tape, ids, up, v)?;
            v = match self.cfg.skip_mode {
                SkipMode::Concat => tape.concat_channels(skip, v)?,
                SkipMode::Add => tape.add(skip, v)?,
            };
            v = self.apply_block(tape, ids, merge, v)?;
        }
        self.apply_block(tape, ids, &self.plan.final_conv, v)
    }

    /// Voxel-wise class probabilities `[N, C, X, Y, Z]` from a feature
    /// field; the head is 1x1x1 so it is strictly voxel-local.
    pub fn classify(
        &self,
        tape: &mut Tape,
        ids: &[ValueId],
        features: ValueId,
    ) -> Result<ValueId> {
        let shape = tape.shape_of(features).to_vec();
        if shape.len() != 5 || shape[1] != self.cfg.feature_dim {
            return Err(Error::shape(
                "classify features",
                format!("[N, {}, X, Y, Z]", self.cfg.feature_dim),
                &shape,
            ));
        }
        let mut v = features;
        for blk in &self.plan.head {
            v = self.apply_block(tape, ids, blk, v)?;
        }
        tape.softmax(v, 1)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &[ValueId],
        input: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        let features = self.extract_features(tape, ids, input)?;
        let probs = self.classify(tape, ids, features)?;
        Ok((features, probs))
    }
}

// ── Checkpoint format ─────────────────────────────────────────────────────
//
// One JSON header line (config, seeds, step, parameter table), then the
// concatenated little-endian f64 payloads in table order.

const CHECKPOINT_MAGIC: &str = "voxseg-ckpt";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    version: u32,
    config: serde_json::Value,
    seed_init: u64,
    seed_sampling: u64,
    step: u64,
    params: Vec<ParamDescriptor>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamDescriptor {
    name: String,
    shape: Vec<usize>,
}

/// Loaded checkpoint: the embedded config plus named tensors in payload
/// order.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub seed_init: u64,
    pub seed_sampling: u64,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<C: Serialize>(
    path: impl AsRef<Path>,
    config: &C,
    seed_init: u64,
    seed_sampling: u64,
    step: u64,
    entries: &[(&str, &Tensor)],
) -> Result<()> {
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        config: serde_json::to_value(config)?,
        seed_init,
        seed_sampling,
        step,
        params: entries
            .iter()
            .map(|(n, t)| ParamDescriptor {
                name: (*n).into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        dtype: "f64le".into(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for (_, t) in entries {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let bytes = std::fs::read(path)?;
    let pos = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader {
            path: pstr.clone(),
            message: "no newline-terminated header".into(),
        })?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..pos]).map_err(|e| Error::MalformedHeader {
            path: pstr.clone(),
            message: e.to_string(),
        })?;
    if header.magic != CHECKPOINT_MAGIC || header.version != CHECKPOINT_VERSION {
        return Err(Error::MalformedHeader {
            path: pstr.clone(),
            message: format!("bad magic/version {}/{}", header.magic, header.version),
        });
    }
    if header.dtype != "f64le" {
        return Err(Error::DtypeMismatch {
            path: pstr.clone(),
            expected: "f64le".into(),
            found: header.dtype,
        });
    }
    let payload = &bytes[pos + 1..];
    let total: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * 8 {
        return Err(Error::TruncatedPayload {
            path: pstr,
            expected: total * 8,
            found: payload.len(),
        });
    }
    let mut params = Vec::with_capacity(header.params.len());
    let mut offset = 0usize;
    for desc in &header.params {
        let n: usize = desc.shape.iter().product();
        let data: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n * 8;
        params.push((desc.name.clone(), Tensor::new(desc.shape.clone(), data)?));
    }
    Ok(Checkpoint {
        config: header.config,
        seed_init: header.seed_init,
        seed_sampling: header.seed_sampling,
        step: header.step,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            levels: 2,
            base_channels: 4,
            feature_dim: 8,
            classes: 4,
            kernel_size: 3,
            skip_mode: SkipMode::Concat,
        }
    }

    #[test]
    fn feature_field_shape_contract() {
        let net = build_network(&small_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let ids = net.insert_params(&mut tape);
        let input = tape.leaf(&Tensor::zeros(vec![1, 1, 16, 16, 16]));
        let f = net.extract_features(&mut tape, &ids, input).unwrap();
        assert_eq!(tape.shape_of(f), &[1, 8, 16, 16, 16]);
    }

    #[test]
    fn classifier_probabilities_sum_to_one() {
        let net = build_network(&small_cfg(), 2).unwrap();
        let mut tape = Tape::new();
        let ids = net.insert_params(&mut tape);
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = tape.leaf(&Tensor::rand_normal(vec![1, 1, 8, 8, 8], &mut rng));
        let (_, probs) = net.forward(&mut tape, &ids, input).unwrap();
        let p = tape.value(probs);
        let vol = 8 * 8 * 8;
        for v in 0..vol {
            let s: f64 = (0..4).map(|c| p[c * vol + v]).sum();
            assert!((s - 1.0).abs() < 1e-6, "voxel {v}: sum {s}");
            for c in 0..4 {
                let pv = p[c * vol + v];
                assert!((0.0..=1.0).contains(&pv));
            }
        }
    }

    #[test]
    fn same_seed_identical_parameters() {
        let a = build_network(&small_cfg(), 42).unwrap();
        let b = build_network(&small_cfg(), 42).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = build_network(&small_cfg(), 43).unwrap();
        assert_ne!(
            a.params.by_name("enc0.block0.weight").unwrap().data(),
            c.params.by_name("enc0.block0.weight").unwrap().data()
        );
    }

    #[test]
    fn biases_init_zero() {
        let net = build_network(&small_cfg(), 7).unwrap();
        for (name, t) in net.params.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn indivisible_extents_rejected_at_forward() {
        let cfg = NetworkConfig {
            levels: 3,
            ..small_cfg()
        };
        let net = build_network(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let ids = net.insert_params(&mut tape);
        let input = tape.leaf(&Tensor::zeros(vec![1, 1, 10, 10, 10])); // 10 % 4 != 0
        assert!(net.extract_features(&mut tape, &ids, input).is_err());
    }

    #[test]
    fn classify_rejects_channel_mismatch() {
        let net = build_network(&small_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let ids = net.insert_params(&mut tape);
        let bad = tape.leaf(&Tensor::zeros(vec![1, 5, 4, 4, 4]));
        assert!(net.classify(&mut tape, &ids, bad).is_err());
    }

    #[test]
    fn zero_input_finite_output() {
        let net = build_network(&small_cfg(), 11).unwrap();
        let mut tape = Tape::new();
        let ids = net.insert_params(&mut tape);
        let input = tape.leaf(&Tensor::zeros(vec![1, 1, 8, 8, 8]));
        let (f, p) = net.forward(&mut tape, &ids, input).unwrap();
        assert!(tape.value(f).iter().all(|v| v.is_finite()));
        assert!(tape.value(p).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn head_is_voxel_local() {
        // permuting spatial positions of the features permutes the
        // probabilities identically
        let net = build_network(&small_cfg(), 5).unwrap();
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features = Tensor::rand_normal(vec![1, 8, 2, 2, 2], &mut rng);

        let classify = |feat: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let ids = net.insert_params(&mut tape);
            let f = tape.leaf(feat);
            let p = net.classify(&mut tape, &ids, f).unwrap();
            tape.value(p).to_vec()
        };

        let base = classify(&features);
        // swap voxels 0 and 7 in every channel
        let vol = 8;
        let mut swapped = features.clone();
        for ch in 0..8 {
            swapped.data_mut().swap(ch * vol, ch * vol + 7);
        }
        let out = classify(&swapped);
        for c in 0..4 {
            assert_eq!(base[c * vol], out[c * vol + 7]);
            assert_eq!(base[c * vol + 7], out[c * vol]);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = build_network(&small_cfg(), 9).unwrap();
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::rand_normal(vec![1, 1, 8, 8, 8], &mut rng);
        let b = Tensor::rand_normal(vec![1, 1, 8, 8, 8], &mut rng);
        let mut stacked_data = a.data().to_vec();
        stacked_data.extend_from_slice(b.data());
        let stacked = Tensor::new(vec![2, 1, 8, 8, 8], stacked_data).unwrap();

        let run = |input: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let ids = net.insert_params(&mut tape);
            let x = tape.leaf(input);
            let f = net.extract_features(&mut tape, &ids, x).unwrap();
            tape.value(f).to_vec()
        };
        let fa = run(&a);
        let fb = run(&b);
        let fs = run(&stacked);
        let half = fs.len() / 2;
        for (i, (s, single)) in fs[..half].iter().zip(&fa).enumerate() {
            assert!((s - single).abs() < 1e-12, "row 0 voxel {i}");
        }
        for (i, (s, single)) in fs[half..].iter().zip(&fb).enumerate() {
            assert!((s - single).abs() < 1e-12, "row 1 voxel {i}");
        }
    }

    #[test]
    fn feature_gradients_pass_sampled_gradcheck() {
        use crate::tensor::grad_check_sampled_excluding;
        let cfg = small_cfg();
        let net = build_network(&cfg, 31).unwrap();
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let input = Tensor::rand_normal(vec![1, 1, 8, 8, 8], &mut rng);
        let mut points: Vec<Tensor> = vec![input];
        for (_, t) in net.params.iter() {
            points.push(t.clone());
        }
        // biases absorbed by instance norm have identically zero gradients;
        // assert that exactly and probe the rest
        let dead: Vec<usize> = net.dead_bias_indices().iter().map(|&i| i + 1).collect();
        let net2 = net.clone();
        let err = grad_check_sampled_excluding(
            move |tape, ids| {
                let input = ids[0];
                let param_ids = &ids[1..];
                let f = net2.extract_features(tape, param_ids, input)?;
                Ok(tape.sum(f))
            },
            &points,
            1e-5,
            2,
            99,
            &dead,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");

        let mut tape = Tape::new();
        let ids: Vec<_> = points
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(true);
                tape.leaf(&t)
            })
            .collect();
        let f = net.extract_features(&mut tape, &ids[1..], ids[0]).unwrap();
        let loss = tape.sum(f);
        let grads = tape.backward(loss).unwrap();
        for &pi in &dead {
            let g = grads.get(ids[pi]).unwrap();
            let worst = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(
                worst < 1e-9,
                "bias under instance norm should only carry round-off, got {worst}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = build_network(&small_cfg(), 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let entries: Vec<(&str, &Tensor)> = net.params.iter().collect();
        write_checkpoint(&p, &net.cfg, 77, 5, 123, &entries).unwrap();
        let ck = read_checkpoint(&p).unwrap();
        assert_eq!(ck.step, 123);
        assert_eq!(ck.seed_init, 77);
        assert_eq!(ck.params.len(), net.params.len());
        for ((name, tensor), (n2, t2)) in net.params.iter().zip(&ck.params) {
            assert_eq!(name, n2);
            assert_eq!(tensor.data(), t2.data());
            assert_eq!(tensor.shape(), t2.shape());
        }
        let cfg: NetworkConfig = serde_json::from_value(ck.config).unwrap();
        assert_eq!(cfg, net.cfg);
        // byte-identical on rewrite
        let bytes1 = std::fs::read(&p).unwrap();
        let entries2: Vec<(&str, &Tensor)> =
            ck.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_checkpoint(&p, &cfg, 77, 5, 123, &entries2).unwrap();
        assert_eq!(bytes1, std::fs::read(&p).unwrap());
    }
}
