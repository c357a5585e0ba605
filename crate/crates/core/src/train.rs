//! The training loop: supervised cross-entropy on labeled batches plus a
//! weighted unlabeled term, optimized with Adam.
//!
//! Each step draws a labeled batch and (when the method uses unlabeled
//! data) an unlabeled batch with a weak and a strong view. The view that
//! supplies pseudo-targets runs without gradient; the other view is scored
//! against those targets on the tape. The step loss is
//! `L = mean(L_s) + λ · mean(L_u)`.
//!
//! Labeled and unlabeled sampling draw from separate random streams, so
//! switching the unlabeled term off leaves the labeled trajectory untouched.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{stream_rng, LossScores, Method, PartitionSource, RngStream, RunConfig, UnsupLoss};
use crate::data::{augment_rows, AugmentConfig, SslSplit, Strength};
use crate::error::{LeafError, Result};
use crate::metrics::Metrics;
use crate::model::{LeafModel, ModelSpec};
use crate::nn::{cross_entropy, weighted_cross_entropy, AdamState, ParamStore};
use crate::partition::{ambiguous_consistency_loss, partition_rows, Partition};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub total_loss: f64,
    /// Share of unlabeled rows that got a single positive class (leaf) or a
    /// pseudo-label above threshold (fixed_threshold).
    pub confident_fraction: f64,
    /// Mean positive-set size; absent for methods without partitions.
    pub mean_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_sup_loss: f64,
    pub mean_unsup_loss: f64,
    pub overall_acc: f64,
    pub balanced_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LeafModel,
    pub params: ParamStore,
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochSummary>,
    pub final_metrics: Metrics,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HistoryLine<'a> {
    Step(&'a StepReport),
    Epoch(&'a EpochSummary),
}

impl TrainOutput {
    /// Metric history as JSON lines: each epoch's step reports followed by
    /// that epoch's summary.
    pub fn history_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        for summary in &self.epochs {
            while let Some(step) = steps.next_if(|s| s.epoch == summary.epoch) {
                out.push_str(&serde_json::to_string(&HistoryLine::Step(step))?);
                out.push('\n');
            }
            out.push_str(&serde_json::to_string(&HistoryLine::Epoch(summary))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Endless shuffled index stream over `0..n`, reshuffled after each pass.
#[derive(Debug)]
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Number of optimizer steps per epoch: enough to pass over the larger of
/// the labeled and unlabeled sets once.
pub fn steps_per_epoch(config: &RunConfig, split: &SslSplit) -> usize {
    let lab = split.num_labeled().div_ceil(config.batch_labeled);
    let unl = split.num_unlabeled().div_ceil(config.batch_unlabeled);
    lab.max(unl).max(1)
}

fn probs_of(logits: &Tensor) -> Tensor {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        softmax_in_place(p.row_mut(r));
    }
    p
}

/// Share of rows whose top class probability reaches `tau`. `tau >= 1`
/// accepts nothing, since saturated probabilities can round to exactly 1.
pub fn threshold_acceptance(probs: &Tensor, tau: f64) -> Vec<Option<usize>> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let (best, &p) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
            (tau < 1.0 && p >= tau).then_some(best)
        })
        .collect()
}

/// Fraction of unlabeled rows the fixed-threshold baseline would label.
pub fn acceptance_fraction(model: &LeafModel, params: &ParamStore, x: &Tensor, tau: f64) -> Result<f64> {
    let probs = probs_of(&model.predict_logits(params, x)?);
    let accepted = threshold_acceptance(&probs, tau);
    Ok(accepted.iter().filter(|a| a.is_some()).count() as f64 / accepted.len().max(1) as f64)
}

pub fn evaluate(model: &LeafModel, params: &ParamStore, x: &Tensor, y: &[usize]) -> Result<Metrics> {
    if y.is_empty() {
        return Err(LeafError::param("cannot evaluate an empty test set"));
    }
    let predicted = model.predict(params, x)?;
    Metrics::from_predictions(&predicted, y, model.num_classes())
}

struct UnlabeledTerm {
    loss: Var,
    confident_fraction: f64,
    mean_m: Option<f64>,
}

struct Trainer<'a> {
    config: &'a RunConfig,
    split: &'a SslSplit,
    model: LeafModel,
    params: ParamStore,
    adam: AdamState,
    augment: AugmentConfig,
    labeled: BatchCycler,
    labeled_aug: ChaCha8Rng,
    unlabeled: Option<(BatchCycler, ChaCha8Rng)>,
    tape: Tape,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a RunConfig, split: &'a SslSplit) -> Result<Self> {
        config.validate()?;
        if split.num_labeled() == 0 {
            return Err(LeafError::param("training needs at least one labeled sample"));
        }
        if split.dim() != config.input_dim {
            return Err(LeafError::param(format!(
                "split has {} features but input_dim = {}",
                split.dim(),
                config.input_dim
            )));
        }
        if split.num_classes != config.num_classes {
            return Err(LeafError::param("split class count differs from num_classes"));
        }

        let mut params = ParamStore::new();
        let mut init_rng = stream_rng(config.seed, RngStream::Init);
        let model = LeafModel::new(&ModelSpec::from_config(config), &mut params, &mut init_rng)?;
        let adam = AdamState::new(&params, config.lr);

        let unlabeled = (config.uses_unlabeled() && split.num_unlabeled() > 0).then(|| {
            (
                BatchCycler::new(
                    split.num_unlabeled(),
                    stream_rng(config.seed, RngStream::UnlabeledBatches),
                ),
                stream_rng(config.seed, RngStream::UnlabeledAugment),
            )
        });

        Ok(Self {
            config,
            split,
            model,
            params,
            adam,
            augment: config.augment_config(),
            labeled: BatchCycler::new(
                split.num_labeled(),
                stream_rng(config.seed, RngStream::LabeledBatches),
            ),
            labeled_aug: stream_rng(config.seed, RngStream::LabeledAugment),
            unlabeled,
            tape: Tape::new(),
        })
    }

    fn step(&mut self, epoch: usize, step: usize) -> Result<StepReport> {
        self.tape.reset();
        let bound = self.params.bind(&mut self.tape);

        let idx = self.labeled.next_batch(self.config.batch_labeled);
        let mut x_l = self.split.labeled_x.select_rows(&idx);
        if self.config.augment_labeled {
            x_l = augment_rows(&x_l, Strength::Weak, &self.augment, &mut self.labeled_aug);
        }
        let y_l: Vec<usize> = idx.iter().map(|&i| self.split.labeled_y[i]).collect();
        let x_l = self.tape.constant(x_l);
        let out_l = self.model.forward(&mut self.tape, &bound, x_l)?;
        let sup = cross_entropy(&mut self.tape, out_l.fused_logits, &y_l)?;

        let unsup = self.unlabeled_term(&bound)?;
        let (total, unsup_loss, confident_fraction, mean_m) = match &unsup {
            Some(term) => {
                let scaled = self.tape.scalar_mul(term.loss, self.config.lambda)?;
                let total = self.tape.add(sup, scaled)?;
                (
                    total,
                    self.tape.value(term.loss).item()?,
                    term.confident_fraction,
                    term.mean_m,
                )
            }
            None => (sup, 0.0, 0.0, None),
        };

        let report = StepReport {
            epoch,
            step,
            sup_loss: self.tape.value(sup).item()?,
            unsup_loss,
            total_loss: self.tape.value(total).item()?,
            confident_fraction,
            mean_m,
        };
        if !report.total_loss.is_finite() || report.total_loss < 0.0 {
            return Err(numeric_abort(&report, "loss is not finite"));
        }

        let grads = self.tape.backward(total)?;
        let grads = self.params.collect_grads(&bound, &grads);
        self.adam
            .step(&mut self.params, &grads)
            .map_err(|e| numeric_abort(&report, &e.to_string()))?;
        Ok(report)
    }

    fn unlabeled_term(&mut self, bound: &crate::nn::BoundParams) -> Result<Option<UnlabeledTerm>> {
        let Some((cycler, aug_rng)) = self.unlabeled.as_mut() else {
            return Ok(None);
        };
        let idx = cycler.next_batch(self.config.batch_unlabeled);
        let x = self.split.unlabeled_x.select_rows(&idx);
        let weak = augment_rows(&x, Strength::Weak, &self.augment, aug_rng);
        let strong = augment_rows(&x, Strength::Strong, &self.augment, aug_rng);

        let (target_view, loss_view) = match (self.config.method, self.config.partition_source) {
            (Method::FixedThreshold, _) => (weak, strong),
            (_, PartitionSource::Strong) => (strong, weak),
            (_, PartitionSource::Weak) => (weak, strong),
        };
        let target_probs = probs_of(&self.model.predict_logits(&self.params, &target_view)?);
        let loss_input = self.tape.constant(loss_view);
        let out = self.model.forward(&mut self.tape, bound, loss_input)?;

        let term = match (self.config.method, self.config.unsup_loss) {
            (Method::FixedThreshold, _) => {
                let accepted = threshold_acceptance(&target_probs, self.config.fixed_tau);
                let labels: Vec<usize> = accepted.iter().map(|a| a.unwrap_or(0)).collect();
                let weights: Vec<f64> = accepted.iter().map(|a| if a.is_some() { 1.0 } else { 0.0 }).collect();
                let n = accepted.len() as f64;
                let loss = weighted_cross_entropy(&mut self.tape, out.fused_logits, &labels, &weights, n)?;
                UnlabeledTerm {
                    loss,
                    confident_fraction: weights.iter().sum::<f64>() / n,
                    mean_m: None,
                }
            }
            (Method::Leaf, UnsupLoss::Ambiguous) => {
                let parts = partition_rows(&target_probs, self.config.threshold_t)?;
                let scores = match self.config.loss_scores {
                    LossScores::Probs => self.tape.softmax_rows(out.fused_logits)?,
                    LossScores::Logits => out.fused_logits,
                };
                let loss = ambiguous_consistency_loss(&mut self.tape, scores, &parts, self.config.margin_eps)?;
                let (confident, mean_m) = partition_stats(&parts);
                UnlabeledTerm {
                    loss,
                    confident_fraction: confident,
                    mean_m: Some(mean_m),
                }
            }
            (Method::Leaf, UnsupLoss::CrossEntropy) => {
                let labels = target_probs.argmax_rows();
                let loss = cross_entropy(&mut self.tape, out.fused_logits, &labels)?;
                UnlabeledTerm {
                    loss,
                    confident_fraction: 1.0,
                    mean_m: Some(1.0),
                }
            }
            (Method::Leaf, UnsupLoss::None) | (Method::SupervisedOnly, _) => {
                unreachable!("unlabeled stream exists only when the method uses it")
            }
        };
        Ok(Some(term))
    }
}

fn partition_stats(parts: &[Partition]) -> (f64, f64) {
    let n = parts.len().max(1) as f64;
    let confident = parts.iter().filter(|p| p.m() == 1).count() as f64 / n;
    let mean_m = parts.iter().map(|p| p.m() as f64).sum::<f64>() / n;
    (confident, mean_m)
}

fn numeric_abort(report: &StepReport, detail: &str) -> LeafError {
    LeafError::NumericAbort {
        epoch: report.epoch,
        step: report.step,
        detail: format!(
            "{detail} (sup={}, unsup={}, total={})",
            report.sup_loss, report.unsup_loss, report.total_loss
        ),
    }
}

/// Non-finite values raised before a loss exists (say, an overflowing
/// forward pass) still abort the run with the step that caused them.
fn tag_non_finite(e: LeafError, epoch: usize, step: usize) -> LeafError {
    match e {
        LeafError::NonFinite { .. } | LeafError::NonFiniteGradient(_) => LeafError::NumericAbort {
            epoch,
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Trains with the method named in `config` and evaluates on the test split
/// after every epoch.
pub fn train(config: &RunConfig, split: &SslSplit) -> Result<TrainOutput> {
    if split.test_y.is_empty() {
        return Err(LeafError::param("training needs a non-empty test split"));
    }
    let mut trainer = Trainer::new(config, split)?;
    let per_epoch = steps_per_epoch(config, split);
    let mut steps = Vec::with_capacity(per_epoch * config.epochs);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut global = 0;
    let mut last_metrics = None;

    for epoch in 0..config.epochs {
        let mut sup_sum = 0.0;
        let mut unsup_sum = 0.0;
        for _ in 0..per_epoch {
            let report = trainer
                .step(epoch, global)
                .map_err(|e| tag_non_finite(e, epoch, global))?;
            sup_sum += report.sup_loss;
            unsup_sum += report.unsup_loss;
            steps.push(report);
            global += 1;
        }
        let metrics = evaluate(&trainer.model, &trainer.params, &split.test_x, &split.test_y)
            .map_err(|e| tag_non_finite(e, epoch, global))?;
        log::debug!(
            "epoch {epoch}: balanced acc {:.4}, overall acc {:.4}",
            metrics.balanced_accuracy,
            metrics.overall_accuracy
        );
        epochs.push(EpochSummary {
            epoch,
            mean_sup_loss: sup_sum / per_epoch as f64,
            mean_unsup_loss: unsup_sum / per_epoch as f64,
            overall_acc: metrics.overall_accuracy,
            balanced_acc: metrics.balanced_accuracy,
        });
        last_metrics = Some(metrics);
    }

    let final_metrics = match last_metrics {
        Some(m) => m,
        None => evaluate(&trainer.model, &trainer.params, &split.test_x, &split.test_y)?,
    };
    Ok(TrainOutput {
        model: trainer.model,
        params: trainer.params,
        steps,
        epochs,
        final_metrics,
    })
}

/// The fixed-threshold pseudo-label baseline: weak-view predictions with top
/// probability at least `fixed_tau` become hard labels for the strong view.
pub fn train_fixed_threshold(config: &RunConfig, split: &SslSplit) -> Result<TrainOutput> {
    let config = RunConfig {
        method: Method::FixedThreshold,
        ..config.clone()
    };
    train(&config, split)
}
