//! Spatial attention over a feature map.
//!
//! Three single-channel descriptors are computed along the channel axis
//! (channel maximum, channel mean, and a local 3x3 max-pool followed by a
//! channel maximum). Each goes through one shared MLP over the flattened map;
//! the three results are stacked, convolved to a single channel and squashed
//! with `tanh`. The resulting map multiplies every channel of the input.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::kernels::Padding;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub feature_channels: usize,
    pub spatial_h: usize,
    pub spatial_w: usize,
    pub mlp_hidden: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.spatial_h == 0 || self.spatial_w == 0 || self.mlp_hidden == 0 {
            return Err(TensorError::Invalid(format!("attention config has a zero extent: {self:?}")));
        }
        Ok(())
    }

    fn plane(&self) -> usize {
        self.spatial_h * self.spatial_w
    }
}

/// Parameter handles of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention {
    pub config: AttentionConfig,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

impl SpatialAttention {
    pub fn new<R: Rng>(config: AttentionConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (hw, hid) = (config.plane(), config.mlp_hidden);
        let mlp_w1 = store.uniform("attention.mlp.w1", &[hid, hw], hw, hid, rng);
        let mlp_b1 = store.add("attention.mlp.b1", crate::Tensor::zeros(&[hid]));
        let mlp_w2 = store.uniform("attention.mlp.w2", &[hw, hid], hid, hw, rng);
        let mlp_b2 = store.add("attention.mlp.b2", crate::Tensor::zeros(&[hw]));
        let conv_w = store.uniform("attention.conv.w", &[1, 3, 3, 3], 27, 9, rng);
        let conv_b = store.add("attention.conv.b", crate::Tensor::zeros(&[1]));
        Ok(SpatialAttention {
            config,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            conv_w,
            conv_b,
        })
    }

    /// `tanh(conv([mlp(mean); mlp(max); mlp(local max)]))`, shape `(N, 1, H, W)`.
    pub fn attention_map(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        check_features(&self.config, &shape)?;
        let avg = channel_mean_map(tape, features)?;
        let max = channel_max_map(tape, features)?;
        let maxp = local_max_map(tape, features)?;
        let a = self.shared_mlp(tape, bound, avg)?;
        let m = self.shared_mlp(tape, bound, max)?;
        let p = self.shared_mlp(tape, bound, maxp)?;
        let stacked = tape.concat_channels(&[a, m, p])?;
        let conv = tape.conv2d(stacked, bound[self.conv_w], bound[self.conv_b], 1, Padding::Same)?;
        tape.tanh(conv)
    }

    /// Flatten, hidden ReLU layer, linear back to `H*W`, reshape.
    pub fn shared_mlp(&self, tape: &mut Tape, bound: &Bound, descriptor: Var) -> Result<Var> {
        let shape = tape.value(descriptor).shape().to_vec();
        let flat = tape.reshape(descriptor, &[shape[0], self.config.plane()])?;
        let hidden = tape.dense(flat, bound[self.mlp_w1], bound[self.mlp_b1])?;
        let hidden = tape.relu(hidden)?;
        let out = tape.dense(hidden, bound[self.mlp_w2], bound[self.mlp_b2])?;
        tape.reshape(out, &shape)
    }

    /// `F * M(F)`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let map = self.attention_map(tape, bound, features)?;
        apply_attention(tape, features, map)
    }
}

fn check_features(cfg: &AttentionConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(TensorError::Rank {
            op: "attention",
            expected: 4,
            found: shape.len(),
        });
    }
    for (axis, e, f) in [
        ("channel", cfg.feature_channels, shape[1]),
        ("height", cfg.spatial_h, shape[2]),
        ("width", cfg.spatial_w, shape[3]),
    ] {
        if e != f {
            return Err(TensorError::Dimension {
                op: "attention",
                axis,
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}

/// Per-pixel maximum over channels.
pub fn channel_max_map(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.channel_max(features)
}

/// Per-pixel mean over channels.
pub fn channel_mean_map(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.channel_mean(features)
}

/// 3x3 stride-1 same-padded max-pool, then a channel maximum.
pub fn local_max_map(tape: &mut Tape, features: Var) -> Result<Var> {
    let pooled = tape.maxpool2d(features, 3, 1, Padding::Same)?;
    tape.channel_max(pooled)
}

/// Broadcast product of `(N, C, H, W)` features with an `(N, 1, H, W)` map.
pub fn apply_attention(tape: &mut Tape, features: Var, map: Var) -> Result<Var> {
    let fs = tape.value(features).shape();
    let ms = tape.value(map).shape();
    if fs.len() == 4 && ms.len() == 4 && ms[1] != 1 {
        return Err(TensorError::Dimension {
            op: "apply_attention",
            axis: "channel",
            expected: 1,
            found: ms[1],
        });
    }
    tape.mul_broadcast(features, map)
}
