//! Hypersphere geometry, the contrastive loss terms, and pair construction.
//!
//! Deep features are projected onto the unit sphere and compared by geodesic
//! distance `arccos<z_i, z_j>`. Similar pairs are pulled together by the
//! squared angle, dissimilar pairs pushed past an angular margin by a hinged
//! squared term. Pairing is doubly stochastic: each shuffled mini-batch is
//! split in two halves that are compared element-wise, so the per-iteration
//! cost stays linear in the batch.

use crate::error::{Error, Result};
use crate::tape::ARCCOS_CLAMP_EPS;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Loss family for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Plain cross-entropy.
    Ce,
    /// Cross-entropy + Euclidean contrastive auxiliary term.
    Eucd,
    /// Cross-entropy + angular-margin contrastive auxiliary term.
    Amc,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossMode::Ce => write!(f, "ce"),
            LossMode::Eucd => write!(f, "eucd"),
            LossMode::Amc => write!(f, "amc"),
        }
    }
}

/// Auxiliary-loss settings: balance weight and margins.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Balance between cross-entropy and the contrastive term.
    pub lambda: f64,
    /// Angular margin in radians, (0, pi].
    pub margin_g: f64,
    /// Euclidean margin, >= 0.
    pub margin_e: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mode: LossMode::Amc, lambda: 0.1, margin_g: 0.5, margin_e: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.margin_g > 0.0 && self.margin_g <= std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "angular margin must be in (0, pi], got {}",
                self.margin_g
            )));
        }
        if self.margin_e < 0.0 {
            return Err(Error::Config(format!("euclidean margin must be >= 0, got {}", self.margin_e)));
        }
        Ok(())
    }
}

/// Unit-norm embedding, the point on the hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeature(Vec<f64>);

impl UnitFeature {
    /// Wrap an already-unit vector; errors if the norm is off by more than 1e-4.
    pub fn from_unit(z: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&z);
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!("expected unit vector, got norm {norm}")));
        }
        Ok(UnitFeature(z))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// z = x / ||x||. Near-zero vectors are degenerate and rejected.
pub fn normalize(x: &[f64]) -> Result<UnitFeature> {
    let norm = l2_norm(x);
    if norm <= 1e-12 {
        return Err(Error::Contract(format!("cannot normalize vector with norm {norm:e}")));
    }
    Ok(UnitFeature(x.iter().map(|v| v / norm).collect()))
}

/// Geodesic distance on the unit sphere: arccos of the clamped inner product.
/// Always lands in [0, pi].
pub fn geodesic(a: &UnitFeature, b: &UnitFeature) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("geodesic dims {} vs {}", a.dim(), b.dim())));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0 + ARCCOS_CLAMP_EPS, 1.0 - ARCCOS_CLAMP_EPS).acos())
}

/// Mean negative log-likelihood of the true classes, via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(crate::kernels::cross_entropy_forward(logits, labels)?.0)
}

/// Euclidean contrastive term for one pair:
/// similar -> squared distance, dissimilar -> hinged squared margin gap.
pub fn eucd_contrastive(x_i: &[f64], x_j: &[f64], similar: bool, margin_e: f64) -> Result<f64> {
    if x_i.len() != x_j.len() {
        return Err(Error::Shape(format!("pair dims {} vs {}", x_i.len(), x_j.len())));
    }
    let d = l2_norm(&x_i.iter().zip(x_j).map(|(a, b)| a - b).collect::<Vec<_>>());
    Ok(if similar { d * d } else { (margin_e - d).max(0.0).powi(2) })
}

/// Angular contrastive term for one pair of unit features:
/// similar -> theta^2, dissimilar -> max(0, margin - theta)^2.
pub fn amc_loss(z_i: &UnitFeature, z_j: &UnitFeature, similar: bool, margin_g: f64) -> Result<f64> {
    let theta = geodesic(z_i, z_j)?;
    Ok(if similar { theta * theta } else { (margin_g - theta).max(0.0).powi(2) })
}

/// Index pairs plus their neighbor flags for one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    /// (index into first half, index into second half, predicted-same flag).
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Shuffle batch indices and split into element-wise paired halves. Odd
/// batches drop the last shuffled element; batches under 2 yield no pairs.
pub fn split_pairs<R: Rng>(batch_size: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    if batch_size < 2 {
        return (Vec::new(), Vec::new());
    }
    let mut order: Vec<usize> = (0..batch_size).collect();
    order.shuffle(rng);
    let half = batch_size / 2;
    let second = order[half..2 * half].to_vec();
    order.truncate(half);
    (order, second)
}

/// Predicted label of each row: argmax with ties broken toward the lowest
/// class index.
pub fn predicted_labels(outputs: &Tensor) -> Result<Vec<usize>> {
    let (n, c) = outputs.dims2()?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = outputs.row(i);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        labels.push(best);
    }
    Ok(labels)
}

/// Neighbor flags from the network outputs: a pair is similar when both rows
/// predict the same class.
pub fn similarity_from_predictions(
    outputs: &Tensor,
    pairs: &[(usize, usize)],
) -> Result<PairBatch> {
    let labels = predicted_labels(outputs)?;
    let n = labels.len();
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return Err(Error::Shape(format!("pair ({i}, {j}) out of range [0, {n})")));
        }
        out.push((i, j, labels[i] == labels[j]));
    }
    Ok(PairBatch { pairs: out })
}

/// Joint objective: `L_C + w_t * lambda * (1/|B|) * sum(pair_losses)`, where
/// `|B|` is the full mini-batch size, not the pair count. `ce` mode returns
/// the classification loss unchanged.
pub fn combined_loss(
    l_c: f64,
    pair_losses: &[f64],
    w_t: f64,
    lambda: f64,
    batch_size: usize,
    mode: LossMode,
) -> f64 {
    if mode == LossMode::Ce || lambda == 0.0 {
        return l_c;
    }
    l_c + w_t * lambda * pair_losses.iter().sum::<f64>() / batch_size as f64
}
