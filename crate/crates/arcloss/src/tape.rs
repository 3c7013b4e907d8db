//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! Ops are appended in execution order, so node inputs always precede the
//! node; backward walks the records in exact reverse order. One tape holds
//! one forward pass; parameters enter as `Param` leaves tagged with the slot
//! they came from so gradients can be scattered back after backward.

use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::tensor::{gaussian, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const ARCCOS_CLAMP_EPS: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Trainable tensor with an accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(&value.shape);
        Parameter { value, grad, trainable: true }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.fill(0.0);
    }
}

/// Per-layer batch-norm running statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

enum Op {
    Leaf,
    Param { slot: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, padding: Padding },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Gap { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    LeakyRelu { x: NodeId, alpha: f64 },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    Dropout { x: NodeId, factors: Vec<f64> },
    GaussianNoise { x: NodeId },
    Softmax { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    RowNormalize { x: NodeId, norms: Vec<f64> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    PairAngle { a: NodeId, b: NodeId, cos_clamped: Vec<f64> },
    PairContrast { theta: NodeId, similar: Vec<bool>, margin: f64 },
    PairEuclid { a: NodeId, b: NodeId, similar: Vec<bool>, margin: f64, dist: Vec<f64> },
    Sum { x: NodeId },
    WeightedSum { x: NodeId, weights: Vec<f64> },
    AddScaled { a: NodeId, b: NodeId, coeff: f64 },
    Pick { x: NodeId, index: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass. Single-threaded per tape; kernels may parallelize
/// internally with order-deterministic reductions.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: false }
    }

    /// Verify every recorded value is finite (slower; for debugging runs).
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if self.check_finite {
            value.check_finite(&format!("tape node {}", self.nodes.len()))?;
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, slot: usize, value: &Tensor) -> Result<NodeId> {
        self.push(value.clone(), Op::Param { slot })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: Padding) -> Result<NodeId> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), padding)?;
        self.push(y, Op::Conv2d { x, w, b, padding })
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, argmax) = kernels::maxpool2x2_forward(self.value(x))?;
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::global_avg_pool_forward(self.value(x))?;
        self.push(y, Op::Gap { x })
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::dense_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Dense { x, w, b })
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("leaky relu alpha must be in (0,1), got {alpha}")));
        }
        let y = kernels::leaky_relu_forward(self.value(x), alpha);
        self.push(y, Op::LeakyRelu { x, alpha })
    }

    /// Train mode normalizes by batch statistics and folds them into
    /// `state` (momentum 0.9); eval mode reads `state`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<NodeId> {
        match mode {
            Mode::Train => {
                let f = kernels::batchnorm_forward_train(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    BN_EPS,
                )?;
                for (r, &m) in state.running_mean.iter_mut().zip(&f.batch_mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, &v) in state.running_var.iter_mut().zip(&f.batch_var_unbiased) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
                self.push(
                    f.y,
                    Op::BatchNorm { x, gamma, beta, xhat: f.xhat, inv_std: f.inv_std, train: true },
                )
            }
            Mode::Eval => {
                let (y, xhat, inv_std) = kernels::batchnorm_forward_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &state.running_mean,
                    &state.running_var,
                    BN_EPS,
                )?;
                self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false })
            }
        }
    }

    /// Inverted dropout: survivors are scaled by 1/(1-rate) at train time,
    /// eval mode is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let factors: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() >= rate { keep_scale } else { 0.0 })
            .collect();
        let data = self.value(x).data.iter().zip(&factors).map(|(v, f)| v * f).collect();
        let y = Tensor { shape: self.value(x).shape.clone(), data };
        self.push(y, Op::Dropout { x, factors })
    }

    /// Additive N(0, sigma^2) noise at train time; identity gradient.
    pub fn gaussian_noise<R: Rng>(
        &mut self,
        x: NodeId,
        sigma: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if sigma < 0.0 {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
        }
        if mode == Mode::Eval || sigma == 0.0 {
            return Ok(x);
        }
        let data = self.value(x).data.iter().map(|v| v + sigma * gaussian(rng)).collect();
        let y = Tensor { shape: self.value(x).shape.clone(), data };
        self.push(y, Op::GaussianNoise { x })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let p = kernels::softmax_rows(self.value(x))?;
        self.push(p, Op::Softmax { x })
    }

    /// Mean negative log-likelihood over the batch, through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Project each row of a 2-d tensor onto the unit sphere; gradient flows
    /// through the normalization.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, p) = self.value(x).dims2()?;
        let mut norms = vec![0.0f64; n];
        let mut out = vec![0.0f64; n * p];
        for i in 0..n {
            let row = self.value(x).row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::Contract(format!("degenerate feature: row {i} has norm {norm:e}")));
            }
            norms[i] = norm;
            for (o, &v) in out[i * p..(i + 1) * p].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let y = Tensor::from_vec(&[n, p], out)?;
        self.push(y, Op::RowNormalize { x, norms })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, p) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of range [0, {n})")));
        }
        let mut out = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            out.extend_from_slice(self.value(x).row(i));
        }
        let y = Tensor::from_vec(&[idx.len(), p], out)?;
        self.push(y, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Geodesic angle between paired rows of two unit-row matrices:
    /// theta_k = arccos(clamp(<a_k, b_k>)).
    pub fn pair_angle(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, p) = self.value(a).dims2()?;
        let (nb, pb) = self.value(b).dims2()?;
        if (n, p) != (nb, pb) {
            return Err(Error::Shape(format!("pair_angle shapes {:?} vs {:?}", (n, p), (nb, pb))));
        }
        let mut cos_clamped = vec![0.0f64; n];
        let mut theta = vec![0.0f64; n];
        for k in 0..n {
            let (ra, rb) = (self.value(a).row(k), self.value(b).row(k));
            for (row, side) in [(ra, "left"), (rb, "right")] {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(Error::Contract(format!(
                        "pair_angle {side} row {k} is not unit norm ({norm})"
                    )));
                }
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let u = dot.clamp(-1.0 + ARCCOS_CLAMP_EPS, 1.0 - ARCCOS_CLAMP_EPS);
            cos_clamped[k] = u;
            theta[k] = u.acos();
        }
        let y = Tensor::from_vec(&[n], theta)?;
        self.push(y, Op::PairAngle { a, b, cos_clamped })
    }

    /// Squared-angle / hinged-angle contrastive term per pair:
    /// similar -> theta^2, dissimilar -> max(0, margin - theta)^2.
    pub fn pair_contrast(&mut self, theta: NodeId, similar: &[bool], margin: f64) -> Result<NodeId> {
        let n = self.value(theta).numel();
        if similar.len() != n {
            return Err(Error::Shape(format!("{} flags for {n} angles", similar.len())));
        }
        if !(margin > 0.0 && margin <= std::f64::consts::PI) {
            return Err(Error::Config(format!("angular margin must be in (0, pi], got {margin}")));
        }
        let data: Vec<f64> = self
            .value(theta)
            .data
            .iter()
            .zip(similar)
            .map(|(&t, &s)| if s { t * t } else { (margin - t).max(0.0).powi(2) })
            .collect();
        let y = Tensor::from_vec(&[n], data)?;
        self.push(y, Op::PairContrast { theta, similar: similar.to_vec(), margin })
    }

    /// Euclidean contrastive term per pair:
    /// similar -> ||a-b||^2, dissimilar -> max(0, margin - ||a-b||)^2.
    pub fn pair_euclid(
        &mut self,
        a: NodeId,
        b: NodeId,
        similar: &[bool],
        margin: f64,
    ) -> Result<NodeId> {
        let (n, p) = self.value(a).dims2()?;
        if self.value(b).shape != self.value(a).shape {
            return Err(Error::Shape("pair_euclid operands differ in shape".into()));
        }
        if similar.len() != n {
            return Err(Error::Shape(format!("{} flags for {n} pairs", similar.len())));
        }
        if margin < 0.0 {
            return Err(Error::Config(format!("euclidean margin must be >= 0, got {margin}")));
        }
        let mut dist = vec![0.0f64; n];
        let mut out = vec![0.0f64; n];
        for k in 0..n {
            let (ra, rb) = (self.value(a).row(k), self.value(b).row(k));
            let dsq: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            let d = dsq.sqrt();
            dist[k] = d;
            out[k] = if similar[k] { dsq } else { (margin - d).max(0.0).powi(2) };
            let _ = p;
        }
        let y = Tensor::from_vec(&[n], out)?;
        self.push(y, Op::PairEuclid { a, b, similar: similar.to_vec(), margin, dist })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Scalar dot with a constant weight vector.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "{} weights for {} elements",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let s = self.value(x).data.iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() })
    }

    /// Elementwise a + coeff * b (equal shapes).
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, coeff: f64) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape("add_scaled operands differ in shape".into()));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + coeff * y)
            .collect();
        let y = Tensor { shape: self.value(a).shape.clone(), data };
        self.push(y, Op::AddScaled { a, b, coeff })
    }

    /// Scalar view of one element (used to seed backward from a single logit).
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        if index >= self.value(x).numel() {
            return Err(Error::Shape(format!("pick index {index} out of range")));
        }
        let v = self.value(x).data[index];
        self.push(Tensor::scalar(v), Op::Pick { x, index })
    }

    /// Reverse pass from a scalar loss node. Returns one gradient tensor per
    /// node; nodes not on a path to the loss keep zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Tensor> =
            self.nodes.iter().map(|n| Tensor::zeros(&n.value.shape)).collect();
        let mut touched = vec![false; self.nodes.len()];
        grads[loss.0].data[0] = 1.0;
        touched[loss.0] = true;

        for id in (0..=loss.0).rev() {
            if !touched[id] {
                continue;
            }
            // lift the node's grad out so we can mutate input grads freely
            let g = std::mem::replace(&mut grads[id], Tensor::zeros(&[0]));
            let add = |grads: &mut Vec<Tensor>, touched: &mut Vec<bool>, to: NodeId, t: Tensor| {
                for (a, b) in grads[to.0].data.iter_mut().zip(&t.data) {
                    *a += b;
                }
                touched[to.0] = true;
            };
            match &self.nodes[id].op {
                Op::Leaf | Op::Param { .. } => {}
                Op::Conv2d { x, w, b, padding } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *padding,
                    )?;
                    add(&mut grads, &mut touched, *x, dx);
                    add(&mut grads, &mut touched, *w, dw);
                    add(&mut grads, &mut touched, *b, db);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::maxpool2x2_backward(&g, argmax, &self.nodes[x.0].value.shape);
                    add(&mut grads, &mut touched, *x, dx);
                }
                Op::Gap { x } => {
                    let dx = kernels::global_avg_pool_backward(&g, &self.nodes[x.0].value.shape);
                    add(&mut grads, &mut touched, *x, dx);
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::dense_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, &g)?;
                    add(&mut grads, &mut touched, *x, dx);
                    add(&mut grads, &mut touched, *w, dw);
                    add(&mut grads, &mut touched, *b, db);
                }
                Op::LeakyRelu { x, alpha } => {
                    let dx = kernels::leaky_relu_backward(&self.nodes[x.0].value, &g, *alpha);
                    add(&mut grads, &mut touched, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let (dx, dgamma, dbeta) = if *train {
                        kernels::batchnorm_backward_train(&g, xhat, inv_std, &self.nodes[gamma.0].value)?
                    } else {
                        kernels::batchnorm_backward_eval(&g, xhat, inv_std, &self.nodes[gamma.0].value)?
                    };
                    add(&mut grads, &mut touched, *x, dx);
                    add(&mut grads, &mut touched, *gamma, dgamma);
                    add(&mut grads, &mut touched, *beta, dbeta);
                }
                Op::Dropout { x, factors } => {
                    let data = g.data.iter().zip(factors).map(|(gv, f)| gv * f).collect();
                    add(
                        &mut grads,
                        &mut touched,
                        *x,
                        Tensor { shape: g.shape.clone(), data },
                    );
                }
                Op::GaussianNoise { x } => {
                    add(&mut grads, &mut touched, *x, g.clone());
                }
                Op::Softmax { x } => {
                    let dx = kernels::softmax_backward(&self.nodes[id].value, &g);
                    add(&mut grads, &mut touched, *x, dx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let dx = kernels::cross_entropy_backward(probs, labels, g.data[0]);
                    add(&mut grads, &mut touched, *logits, dx);
                }
                Op::RowNormalize { x, norms } => {
                    let z = &self.nodes[id].value;
                    let (n, p) = (z.shape[0], z.shape[1]);
                    let mut dx = vec![0.0f64; n * p];
                    for i in 0..n {
                        let zrow = z.row(i);
                        let grow = &g.data[i * p..(i + 1) * p];
                        let dot: f64 = zrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..p {
                            dx[i * p + j] = (grow[j] - zrow[j] * dot) / norms[i];
                        }
                    }
                    add(
                        &mut grads,
                        &mut touched,
                        *x,
                        Tensor { shape: z.shape.clone(), data: dx },
                    );
                }
                Op::GatherRows { x, idx } => {
                    let p = self.nodes[x.0].value.shape[1];
                    let mut dx = Tensor::zeros(&self.nodes[x.0].value.shape);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..p {
                            dx.data[i * p + j] += g.data[k * p + j];
                        }
                    }
                    add(&mut grads, &mut touched, *x, dx);
                }
                Op::PairAngle { a, b, cos_clamped } => {
                    // d arccos(u)/du at the clamped u; the clamp bounds the
                    // magnitude near |u| = 1
                    let (n, p) = self.nodes[a.0].value.dims2()?;
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let mut da = vec![0.0f64; n * p];
                    let mut db = vec![0.0f64; n * p];
                    for k in 0..n {
                        let u = cos_clamped[k];
                        let dtheta_du = -1.0 / (1.0 - u * u).sqrt();
                        let coeff = g.data[k] * dtheta_du;
                        for j in 0..p {
                            da[k * p + j] = coeff * vb.data[k * p + j];
                            db[k * p + j] = coeff * va.data[k * p + j];
                        }
                    }
                    add(&mut grads, &mut touched, *a, Tensor::from_vec(&[n, p], da)?);
                    add(&mut grads, &mut touched, *b, Tensor::from_vec(&[n, p], db)?);
                }
                Op::PairContrast { theta, similar, margin } => {
                    let t = &self.nodes[theta.0].value;
                    let data: Vec<f64> = t
                        .data
                        .iter()
                        .zip(similar)
                        .zip(&g.data)
                        .map(|((&th, &s), &gv)| {
                            if s {
                                2.0 * th * gv
                            } else {
                                let h = margin - th;
                                if h > 0.0 {
                                    -2.0 * h * gv
                                } else {
                                    0.0
                                }
                            }
                        })
                        .collect();
                    add(
                        &mut grads,
                        &mut touched,
                        *theta,
                        Tensor { shape: t.shape.clone(), data },
                    );
                }
                Op::PairEuclid { a, b, similar, margin, dist } => {
                    let (n, p) = self.nodes[a.0].value.dims2()?;
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let mut da = vec![0.0f64; n * p];
                    let mut db = vec![0.0f64; n * p];
                    for k in 0..n {
                        let gv = g.data[k];
                        // coefficient on (a - b); zero direction at d == 0
                        let coeff = if similar[k] {
                            2.0 * gv
                        } else {
                            let h = margin - dist[k];
                            if h > 0.0 && dist[k] > 0.0 {
                                -2.0 * h / dist[k] * gv
                            } else {
                                0.0
                            }
                        };
                        for j in 0..p {
                            let diff = va.data[k * p + j] - vb.data[k * p + j];
                            da[k * p + j] = coeff * diff;
                            db[k * p + j] = -coeff * diff;
                        }
                    }
                    add(&mut grads, &mut touched, *a, Tensor::from_vec(&[n, p], da)?);
                    add(&mut grads, &mut touched, *b, Tensor::from_vec(&[n, p], db)?);
                }
                Op::Sum { x } => {
                    let dx = Tensor::filled(&self.nodes[x.0].value.shape, g.data[0]);
                    add(&mut grads, &mut touched, *x, dx);
                }
                Op::WeightedSum { x, weights } => {
                    let data = weights.iter().map(|w| w * g.data[0]).collect();
                    add(
                        &mut grads,
                        &mut touched,
                        *x,
                        Tensor { shape: self.nodes[x.0].value.shape.clone(), data },
                    );
                }
                Op::AddScaled { a, b, coeff } => {
                    add(&mut grads, &mut touched, *a, g.clone());
                    let data = g.data.iter().map(|v| coeff * v).collect();
                    add(
                        &mut grads,
                        &mut touched,
                        *b,
                        Tensor { shape: g.shape.clone(), data },
                    );
                }
                Op::Pick { x, index } => {
                    let mut dx = Tensor::zeros(&self.nodes[x.0].value.shape);
                    dx.data[*index] = g.data[0];
                    add(&mut grads, &mut touched, *x, dx);
                }
            }
            grads[id] = g;
        }
        Ok(Gradients { grads })
    }

    /// (slot, node) for every parameter leaf on the tape.
    pub fn param_nodes(&self) -> Vec<(usize, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { slot } => Some((slot, NodeId(i))),
                _ => None,
            })
            .collect()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Scatter parameter-leaf gradients back into `params` (accumulating).
    pub fn accumulate_into(&self, tape: &Tape, params: &mut [Parameter]) {
        for (slot, node) in tape.param_nodes() {
            if params[slot].trainable {
                let g = self.get(node);
                for (a, b) in params[slot].grad.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
        }
    }
}
