//! Mini-batch training loop: forward, predicted-label pairing, contrastive
//! term on the (normalized) features, scheduled joint loss, backward, Adam.
//!
//! Every random draw comes from a stream derived from (seed, purpose, epoch,
//! batch), so replaying a seed reproduces the parameter trajectory exactly
//! and switching loss modes cannot shift the draws of unrelated streams.

use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{similarity_from_predictions, split_pairs, LossConfig, LossMode};
use crate::metrics;
use crate::model::Model;
use crate::optim::AdamState;
use crate::schedule::{schedule_values, ScheduleConfig};
use crate::tape::{Mode, Tape};
use crate::util::{stream_rng, Stream};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

pub const CODE_VERSION: &str = concat!("arcloss ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean combined loss over the epoch's batches.
    pub loss: f64,
    pub w: f64,
    pub lr: f64,
    pub beta1: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub accuracy: f64,
    /// Clustering quality with predicted labels as cluster assignments.
    pub homogeneity: f64,
    pub completeness: f64,
    /// Clustering quality with seeded k-means on the embeddings (k = classes).
    pub homogeneity_kmeans: f64,
    pub completeness_kmeans: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Resolved configuration snapshot (extended by the CLI with its full config).
    pub config: serde_json::Value,
    pub code_version: String,
    pub per_epoch: Vec<EpochStats>,
    pub final_metrics: FinalStats,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(reader)?)
    }

    /// Per-epoch metrics as `epoch,loss,w,lr,beta1,test_acc`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,loss,w,lr,beta1,test_acc")?;
        for e in &self.per_epoch {
            writeln!(out, "{},{},{},{},{},{}", e.epoch, e.loss, e.w, e.lr, e.beta1, e.test_acc)?;
        }
        Ok(())
    }

    pub fn final_accuracy(&self) -> f64 {
        self.final_metrics.accuracy
    }
}

/// Predictions and features over a whole split, eval mode.
pub struct EvalResult {
    pub predictions: Vec<usize>,
    /// Penultimate features, row-major N x embed_dim.
    pub features: Vec<f64>,
    pub accuracy: f64,
}

pub fn evaluate(model: &mut Model, dataset: &Dataset) -> Result<EvalResult> {
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut features = Vec::with_capacity(dataset.len() * model.spec.embed_dim);
    let mut rng = stream_rng(0, Stream::Noise, u64::MAX, 0); // unused in eval mode
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for block in indices.chunks(256) {
        let (images, _) = dataset.batch(block);
        let mut tape = Tape::new();
        let fp = model.forward_on(&mut tape, &images, Mode::Eval, &mut rng)?;
        predictions.extend(crate::geometry::predicted_labels(tape.value(fp.logits))?);
        features.extend_from_slice(&tape.value(fp.features).data);
    }
    let accuracy = metrics::accuracy(&predictions, &dataset.labels)?;
    Ok(EvalResult { predictions, features, accuracy })
}

fn validate_setup(model: &Model, train: &Dataset, test: &Dataset, opts: &TrainOptions) -> Result<()> {
    opts.loss.validate()?;
    opts.schedule.validate()?;
    if opts.batch_size < 2 {
        return Err(Error::Config("batch size must be >= 2".into()));
    }
    if train.len() < opts.batch_size {
        return Err(Error::Config(format!(
            "training split ({} examples) smaller than one batch ({})",
            train.len(),
            opts.batch_size
        )));
    }
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    if train.num_classes != model.spec.num_classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model expects {}",
            train.num_classes, model.spec.num_classes
        )));
    }
    Ok(())
}

/// Train `model` in place and report per-epoch metrics plus final clustering
/// quality on the test split.
pub fn fit(model: &mut Model, train: &Dataset, test: &Dataset, opts: &TrainOptions) -> Result<RunReport> {
    validate_setup(model, train, test, opts)?;
    let started = Instant::now();
    let plan = BatchPlan { seed: opts.seed, batch_size: opts.batch_size };
    let mut adam = AdamState::new(&model.params);
    let mut per_epoch = Vec::with_capacity(opts.schedule.total_epochs);

    for epoch in 0..opts.schedule.total_epochs {
        let sv = schedule_values(epoch, &opts.schedule);
        let mut loss_sum = 0.0;
        let batches = plan.batches(train.len(), epoch);
        let n_batches = batches.len();
        for (b_idx, batch_indices) in batches.into_iter().enumerate() {
            let (images, labels) = train.batch(&batch_indices);
            let mut noise_rng = stream_rng(opts.seed, Stream::Noise, epoch as u64, b_idx as u64);
            let mut tape = Tape::new();
            let fp = model.forward_on(&mut tape, &images, Mode::Train, &mut noise_rng)?;
            let ce = tape.cross_entropy(fp.logits, &labels)?;

            let coeff = sv.w * opts.loss.lambda / opts.batch_size as f64;
            let loss_node = if opts.loss.mode == LossMode::Ce || coeff == 0.0 {
                ce
            } else {
                // fresh pairing every iteration, from its own stream
                let mut pair_rng = stream_rng(opts.seed, Stream::Pairs, epoch as u64, b_idx as u64);
                let (first, second) = split_pairs(opts.batch_size, &mut pair_rng);
                if first.is_empty() {
                    ce
                } else {
                    let index_pairs: Vec<(usize, usize)> =
                        first.iter().copied().zip(second.iter().copied()).collect();
                    let pair_batch =
                        similarity_from_predictions(tape.value(fp.logits), &index_pairs)?;
                    let similar: Vec<bool> = pair_batch.pairs.iter().map(|p| p.2).collect();
                    let per_pair = match opts.loss.mode {
                        LossMode::Amc => {
                            let z = tape.row_normalize(fp.features)?;
                            let z1 = tape.gather_rows(z, &first)?;
                            let z2 = tape.gather_rows(z, &second)?;
                            let theta = tape.pair_angle(z1, z2)?;
                            tape.pair_contrast(theta, &similar, opts.loss.margin_g)?
                        }
                        LossMode::Eucd => {
                            let x1 = tape.gather_rows(fp.features, &first)?;
                            let x2 = tape.gather_rows(fp.features, &second)?;
                            tape.pair_euclid(x1, x2, &similar, opts.loss.margin_e)?
                        }
                        LossMode::Ce => unreachable!("handled above"),
                    };
                    let pair_sum = tape.sum(per_pair)?;
                    tape.add_scaled(ce, pair_sum, coeff)?
                }
            };

            let loss_val = tape.value(loss_node).item()?;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b_idx}"
                )));
            }
            let grads = tape.backward(loss_node)?;
            model.zero_grads();
            grads.accumulate_into(&tape, &mut model.params);
            adam.step(&mut model.params, sv.lr, sv.beta1)?;
            loss_sum += loss_val;
        }
        let test_acc = evaluate(model, test)?.accuracy;
        per_epoch.push(EpochStats {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            w: sv.w,
            lr: sv.lr,
            beta1: sv.beta1,
            test_acc,
        });
    }

    let eval = evaluate(model, test)?;
    let (h, c) = metrics::homogeneity_completeness(&test.labels, &eval.predictions)?;
    let km = metrics::kmeans(
        &eval.features,
        test.len(),
        model.spec.embed_dim,
        model.spec.num_classes,
        opts.seed,
    )?;
    let (hk, ck) = metrics::homogeneity_completeness(&test.labels, &km)?;
    Ok(RunReport {
        seed: opts.seed,
        config: serde_json::to_value(opts)?,
        code_version: CODE_VERSION.to_string(),
        per_epoch,
        final_metrics: FinalStats {
            accuracy: eval.accuracy,
            homogeneity: h,
            completeness: c,
            homogeneity_kmeans: hk,
            completeness_kmeans: ck,
        },
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
