//! Triplet hinge, triplet cross-entropy, and their batch combination.

use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::network::ForwardVars;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss config: {0}")]
    Config(String),
}

/// Which terms feed the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// Hinge plus cross-entropy.
    Combined,
    /// Hinge only.
    TripletOnly,
    /// Cross-entropy only.
    CeOnly,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Combined => "combined",
            LossMode::TripletOnly => "triplet_only",
            LossMode::CeOnly => "ce_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "combined" => Some(LossMode::Combined),
            "triplet_only" | "triplet" => Some(LossMode::TripletOnly),
            "ce_only" | "ce" => Some(LossMode::CeOnly),
            _ => None,
        }
    }

    fn uses_hinge(self) -> bool {
        self != LossMode::CeOnly
    }

    fn uses_ce(self) -> bool {
        self != LossMode::TripletOnly
    }
}

/// Distance between hash outputs inside the hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Distance {
    /// `||a - b||^2`.
    #[default]
    SquaredEuclidean,
    /// `||a - b||`.
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub r: f64,
    pub k: usize,
    pub mode: LossMode,
    pub distance: Distance,
}

impl LossConfig {
    pub fn new(r: f64, k: usize, mode: LossMode) -> Self {
        LossConfig {
            r,
            k,
            mode,
            distance: Distance::SquaredEuclidean,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(LossError::Config(format!("r {} must lie in [0, 1]", self.r)));
        }
        if self.k == 0 {
            return Err(LossError::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn margin(&self) -> f64 {
        self.r * self.k as f64
    }
}

pub fn distance(a: &[f64], b: &[f64], kind: Distance) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match kind {
        Distance::SquaredEuclidean => sq,
        Distance::Euclidean => sq.sqrt(),
    }
}

/// d distance(a, b) / d a.
fn distance_grad(a: &[f64], b: &[f64], kind: Distance) -> Vec<f64> {
    match kind {
        Distance::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect(),
        Distance::Euclidean => {
            let d = distance(a, b, kind);
            if d == 0.0 {
                vec![0.0; a.len()]
            } else {
                a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
            }
        }
    }
}

/// Hinge value and its gradients with respect to `(hq, hp, hn)`.
pub fn triplet_hinge_grad(hq: &[f64], hp: &[f64], hn: &[f64], margin: f64, kind: Distance) -> Result<(f64, [Vec<f64>; 3]), LossError> {
    if hq.len() != hp.len() {
        return Err(LossError::LengthMismatch(hq.len(), hp.len()));
    }
    if hq.len() != hn.len() {
        return Err(LossError::LengthMismatch(hq.len(), hn.len()));
    }
    let raw = margin - distance(hq, hn, kind) + distance(hq, hp, kind);
    let k = hq.len();
    if raw <= 0.0 {
        return Ok((0.0, [vec![0.0; k], vec![0.0; k], vec![0.0; k]]));
    }
    let dqp = distance_grad(hq, hp, kind);
    let dqn = distance_grad(hq, hn, kind);
    let gq = dqp.iter().zip(&dqn).map(|(a, b)| a - b).collect();
    let gp = dqp.iter().map(|v| -v).collect();
    Ok((raw, [gq, gp, dqn]))
}

/// `max(r*k - D(q, n) + D(q, p), 0)` with squared Euclidean `D`.
pub fn triplet_hinge(hq: &[f64], hp: &[f64], hn: &[f64], r: f64, k: usize) -> Result<f64, LossError> {
    if hq.len() != k {
        return Err(LossError::LengthMismatch(k, hq.len()));
    }
    Ok(triplet_hinge_grad(hq, hp, hn, r * k as f64, Distance::SquaredEuclidean)?.0)
}

/// Negative log softmax probability of `label` and its gradient.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), LossError> {
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `CE(q) + CE(p) + CE(n)`.
pub fn triplet_cross_entropy(lq: &[f64], lp: &[f64], ln: &[f64], yq: usize, yp: usize, yn: usize) -> Result<f64, LossError> {
    Ok(cross_entropy_grad(lq, yq)?.0 + cross_entropy_grad(lp, yp)?.0 + cross_entropy_grad(ln, yn)?.0)
}

/// Batch means of both terms; `total` sums the ones the mode selects.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub hinge: f64,
    pub ce: f64,
}

/// Per-branch outputs of a triplet batch: `[query, positive, negative]`,
/// each a row-major `(B, width)` buffer.
#[derive(Clone, Copy, Debug)]
pub struct TripletBatch<'a> {
    pub hash: [&'a [f64]; 3],
    pub logits: [&'a [f64]; 3],
    /// Per triplet, the labels `(y_q, y_p, y_n)`.
    pub labels: &'a [[usize; 3]],
}

/// Gradients of [`LossParts::total`] with respect to each buffer of a
/// [`TripletBatch`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    pub hash: [Vec<f64>; 3],
    pub logits: [Vec<f64>; 3],
}

/// Mean over the batch of the selected terms.
pub fn batch_loss(batch: &TripletBatch<'_>, cfg: &LossConfig) -> Result<(LossParts, BatchGrads), LossError> {
    cfg.validate()?;
    let b = batch.labels.len();
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    let k = cfg.k;
    for h in batch.hash {
        if h.len() != b * k {
            return Err(LossError::LengthMismatch(b * k, h.len()));
        }
    }
    let c = batch.logits[0].len() / b;
    for l in batch.logits {
        if l.len() != b * c || c == 0 {
            return Err(LossError::LengthMismatch(b * c, l.len()));
        }
    }
    let scale = 1.0 / b as f64;
    let mut grads = BatchGrads {
        hash: std::array::from_fn(|_| vec![0.0; b * k]),
        logits: std::array::from_fn(|_| vec![0.0; b * c]),
    };
    let mut parts = LossParts::default();
    for (t, labels) in batch.labels.iter().enumerate() {
        let row = |buf: &[f64], w: usize| buf[t * w..(t + 1) * w].to_vec();
        let (hq, hp, hn) = (row(batch.hash[0], k), row(batch.hash[1], k), row(batch.hash[2], k));
        let (h, hg) = triplet_hinge_grad(&hq, &hp, &hn, cfg.margin(), cfg.distance)?;
        parts.hinge += h * scale;
        if cfg.mode.uses_hinge() {
            for (branch, g) in hg.iter().enumerate() {
                for (dst, v) in grads.hash[branch][t * k..(t + 1) * k].iter_mut().zip(g) {
                    *dst += v * scale;
                }
            }
        }
        for branch in 0..3 {
            let (ce, g) = cross_entropy_grad(&row(batch.logits[branch], c), labels[branch])?;
            parts.ce += ce * scale;
            if cfg.mode.uses_ce() {
                for (dst, v) in grads.logits[branch][t * c..(t + 1) * c].iter_mut().zip(&g) {
                    *dst += v * scale;
                }
            }
        }
    }
    parts.total = match cfg.mode {
        LossMode::Combined => parts.hinge + parts.ce,
        LossMode::TripletOnly => parts.hinge,
        LossMode::CeOnly => parts.ce,
    };
    Ok((parts, grads))
}

/// Records the batch loss on the tape as a scalar ready for backward.
pub fn combined_loss(tape: &mut Tape, outputs: &[ForwardVars; 3], labels: &[[usize; 3]], cfg: &LossConfig) -> Result<(Var, LossParts), LossError> {
    let hash: [Vec<f64>; 3] = std::array::from_fn(|i| tape.value(outputs[i].hash).data().to_vec());
    let logits: [Vec<f64>; 3] = std::array::from_fn(|i| tape.value(outputs[i].logits).data().to_vec());
    let batch = TripletBatch {
        hash: [&hash[0], &hash[1], &hash[2]],
        logits: [&logits[0], &logits[1], &logits[2]],
        labels,
    };
    let (parts, grads) = batch_loss(&batch, cfg)?;
    let BatchGrads { hash: gh, logits: gl } = grads;
    let [gh0, gh1, gh2] = gh;
    let [gl0, gl1, gl2] = gl;
    let inputs = [
        outputs[0].hash,
        outputs[1].hash,
        outputs[2].hash,
        outputs[0].logits,
        outputs[1].logits,
        outputs[2].logits,
    ];
    let var = tape
        .custom_scalar(&inputs, parts.total, vec![gh0, gh1, gh2, gl0, gl1, gl2])
        .map_err(|e| LossError::Config(e.to_string()))?;
    Ok((var, parts))
}
