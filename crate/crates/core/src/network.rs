//! The hashing network: residual block and max-pool, spatial attention,
//! residual block and average-pool, a single-channel dense map, and two heads
//! (a `tanh` hash head with `k` units and a `c`-way classifier).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{AttentionConfig, SpatialAttention};
use crate::autodiff::{Mode, RunningStats, Tape, Var};
use crate::hash_index::HashCode;
use crate::kernels::Padding;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture and training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AthConfig {
    /// Square input extent in pixels; must be divisible by 16.
    pub input_size: usize,
    pub in_channels: usize,
    /// Hash length in bits.
    pub k: usize,
    /// Class count.
    pub classes: usize,
    /// Margin weight; the hinge margin is `r * k`.
    pub r: f64,
    pub base_channels: usize,
    /// Side of the dense map, `input_size / 16`.
    pub dense_side: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    /// When false the attention map is fixed to ones.
    pub attention: bool,
}

impl Default for AthConfig {
    fn default() -> Self {
        AthConfig {
            input_size: 64,
            in_channels: 1,
            k: 36,
            classes: 4,
            r: 0.5,
            base_channels: 16,
            dense_side: 4,
            seed: 0,
            lr: 0.001,
            momentum: 0.9,
            batch: 10,
            epochs: 50,
            attention: true,
        }
    }
}

impl AthConfig {
    /// Config for a given input extent with `dense_side` derived from it.
    pub fn for_input(input_size: usize, k: usize, classes: usize) -> Self {
        AthConfig {
            input_size,
            k,
            classes,
            dense_side: input_size / 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return bad(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if self.dense_side != self.input_size / 16 {
            return bad(format!("dense_side {} must equal input_size / 16 = {}", self.dense_side, self.input_size / 16));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.k > u16::MAX as usize {
            return bad(format!("k {} does not fit the index format", self.k));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return bad(format!("r {} must lie in [0, 1]", self.r));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.batch < 2 {
            return bad(format!("batch {} must be at least 2 for batchnorm", self.batch));
        }
        Ok(())
    }

    /// `(stage, channels, height, width)` after each stage for one image,
    /// computed without building the model.
    pub fn shape_trace(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let (s, c) = (self.input_size, self.base_channels);
        vec![
            ("input", self.in_channels, s, s),
            ("net1.block", c, s / 2, s / 2),
            ("net1.pool", c, s / 4, s / 4),
            ("attention", c, s / 4, s / 4),
            ("net2.block", c, s / 8, s / 8),
            ("net2.pool", c, s / 16, s / 16),
            ("dense", 1, self.dense_side, self.dense_side),
            ("hash", self.k, 1, 1),
            ("logits", self.classes, 1, 1),
        ]
    }

    /// Hinge margin `r * k`.
    pub fn margin(&self) -> f64 {
        self.r * self.k as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = store.uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, cout * k * k, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var, stride: usize) -> Result<Var, TensorError> {
        tape.conv2d(x, bound[self.w], bound[self.b], stride, Padding::Same)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, stats: &mut Vec<RunningStats>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        stats.push(RunningStats::new(channels));
        BatchNorm {
            gamma,
            beta,
            stats: stats.len() - 1,
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, stats: &mut [RunningStats], x: Var, mode: Mode) -> Result<Var, TensorError> {
        tape.batchnorm(x, bound[self.gamma], bound[self.beta], &mut stats[self.stats], mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize) -> Self {
        let w = store.uniform(format!("{name}.w"), &[fout, fin], fin, fout, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fout]));
        Linear { w, b }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.dense(x, bound[self.w], bound[self.b])
    }
}

/// conv(s=2)-BN-ReLU-conv(s=1)-BN plus a 1x1 stride-2 projection, then ReLU.
#[derive(Clone, Copy, Debug, PartialEq)]
struct ResidualBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    proj: Conv,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, stats: &mut Vec<RunningStats>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        ResidualBlock {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3),
            bn1: BatchNorm::new(store, stats, &format!("{name}.bn1"), cout),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3),
            bn2: BatchNorm::new(store, stats, &format!("{name}.bn2"), cout),
            proj: Conv::new(store, rng, &format!("{name}.proj"), cin, cout, 1),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, stats: &mut [RunningStats], x: Var, mode: Mode) -> Result<Var, TensorError> {
        let y = self.conv1.apply(tape, bound, x, 2)?;
        let y = self.bn1.apply(tape, bound, stats, y, mode)?;
        let y = tape.relu(y)?;
        let y = self.conv2.apply(tape, bound, y, 1)?;
        let y = self.bn2.apply(tape, bound, stats, y, mode)?;
        let skip = self.proj.apply(tape, bound, x, 2)?;
        let y = tape.add(y, skip)?;
        tape.relu(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    net1: ResidualBlock,
    attention: SpatialAttention,
    net2: ResidualBlock,
    dense: Conv,
    hash_head: Linear,
    class_head: Linear,
}

/// Recorded outputs of one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `(N, 1, side, side)`.
    pub dense_map: Var,
    /// `(N, k)`, values in `(-1, 1)`.
    pub hash: Var,
    /// `(N, c)`.
    pub logits: Var,
}

/// Plain outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub dense_map: Vec<f64>,
    pub hash_vec: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Parameters, batchnorm state and layer layout of the hashing network.
/// One instance serves all three branches of a triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct AthModel {
    config: AthConfig,
    params: ParamStore,
    bn: Vec<RunningStats>,
    layout: Layout,
}

impl AthModel {
    pub fn new(config: AthConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut bn = Vec::new();
        let c = config.base_channels;
        let side = config.dense_side;
        let net1 = ResidualBlock::new(&mut store, &mut bn, &mut rng, "net1", config.in_channels, c);
        let attention = SpatialAttention::new(
            AttentionConfig {
                feature_channels: c,
                spatial_h: config.input_size / 4,
                spatial_w: config.input_size / 4,
                mlp_hidden: side * side,
            },
            &mut store,
            &mut rng,
        )?;
        let net2 = ResidualBlock::new(&mut store, &mut bn, &mut rng, "net2", c, c);
        let dense = Conv::new(&mut store, &mut rng, "dense", c, 1, 1);
        let hash_head = Linear::new(&mut store, &mut rng, "hash_head", side * side, config.k);
        let class_head = Linear::new(&mut store, &mut rng, "class_head", side * side, config.classes);
        Ok(AthModel {
            config,
            params: store,
            bn,
            layout: Layout {
                net1,
                attention,
                net2,
                dense,
                hash_head,
                class_head,
            },
        })
    }

    pub fn config(&self) -> &AthConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[RunningStats] {
        &self.bn
    }

    pub(crate) fn bn_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.bn
    }

    pub fn attention(&self) -> &SpatialAttention {
        &self.layout.attention
    }

    /// Records the forward pass of a batch `(N, C, S, S)`. In train mode the
    /// batchnorm running statistics are updated from this batch alone.
    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, images: Var, mode: Mode) -> Result<ForwardVars, ModelError> {
        Self::run(&self.config, &self.layout, &mut self.bn, tape, bound, images, mode)
    }

    /// Three forwards through the same parameters; each branch is its own
    /// batchnorm batch.
    pub fn forward_triplet(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        query: Var,
        positive: Var,
        negative: Var,
        mode: Mode,
    ) -> Result<[ForwardVars; 3], ModelError> {
        Ok([
            self.forward(tape, bound, query, mode)?,
            self.forward(tape, bound, positive, mode)?,
            self.forward(tape, bound, negative, mode)?,
        ])
    }

    /// Eval-mode outputs, one per image of the batch.
    pub fn infer(&self, images: &Tensor) -> Result<Vec<ForwardOutput>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.leaf(images.clone());
        let mut stats = self.bn.clone();
        let out = Self::run(&self.config, &self.layout, &mut stats, &mut tape, &bound, x, Mode::Eval)?;
        let n = images.shape()[0];
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let d = tape.value(v).data();
            let w = d.len() / n;
            d.chunks(w).map(<[f64]>::to_vec).collect()
        };
        let (maps, hashes, logits) = (rows(out.dense_map), rows(out.hash), rows(out.logits));
        Ok(maps
            .into_iter()
            .zip(hashes)
            .zip(logits)
            .map(|((dense_map, hash_vec), logits)| ForwardOutput {
                dense_map,
                hash_vec,
                logits,
            })
            .collect())
    }

    fn run(
        config: &AthConfig,
        layout: &Layout,
        stats: &mut [RunningStats],
        tape: &mut Tape,
        bound: &Bound,
        images: Var,
        mode: Mode,
    ) -> Result<ForwardVars, ModelError> {
        let shape = tape.value(images).shape().to_vec();
        check_input(config, &shape)?;
        let n = shape[0];
        let side = config.dense_side;

        let x = layout.net1.apply(tape, bound, stats, images, mode)?;
        let f = tape.maxpool2d(x, 3, 2, Padding::Same)?;
        let f = if config.attention {
            layout.attention.forward(tape, bound, f)?
        } else {
            f
        };
        let x = layout.net2.apply(tape, bound, stats, f, mode)?;
        let x = tape.avgpool2d(x, 3, 2, Padding::Same)?;
        let dense_map = layout.dense.apply(tape, bound, x, 1)?;
        let flat = tape.reshape(dense_map, &[n, side * side])?;
        let hash = layout.hash_head.apply(tape, bound, flat)?;
        let hash = tape.tanh(hash)?;
        let logits = layout.class_head.apply(tape, bound, flat)?;
        Ok(ForwardVars { dense_map, hash, logits })
    }
}

fn check_input(config: &AthConfig, shape: &[usize]) -> Result<(), TensorError> {
    if shape.len() != 4 {
        return Err(TensorError::Rank {
            op: "forward",
            expected: 4,
            found: shape.len(),
        });
    }
    for (axis, e, f) in [
        ("channel", config.in_channels, shape[1]),
        ("height", config.input_size, shape[2]),
        ("width", config.input_size, shape[3]),
    ] {
        if e != f {
            return Err(TensorError::Dimension {
                op: "forward",
                axis,
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}

/// Sign binarization: bit `i` is set when `hash_vec[i] >= 0`.
pub fn binarize(hash_vec: &[f64]) -> HashCode {
    let bits: Vec<bool> = hash_vec.iter().map(|&v| v >= 0.0).collect();
    HashCode::from_bits(&bits)
}

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Min-max normalizes a `side x side` dense map to `[0, 255]` and upsamples
/// it by nearest neighbour to `size x size`. A constant map is all zeros.
pub fn cam_heatmap(dense_map: &[f64], side: usize, size: usize) -> GrayImage {
    assert_eq!(dense_map.len(), side * side, "dense map must be side x side");
    let lo = dense_map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = dense_map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let level = |v: f64| -> u8 {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    };
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = y * side / size;
        for x in 0..size {
            let sx = x * side / size;
            pixels.push(level(dense_map[sy * side + sx]));
        }
    }
    GrayImage {
        width: size,
        height: size,
        pixels,
    }
}
