//! Training loop: contrastive warm-up, then bi-granularity training with
//! clusters and class temperatures refreshed every `update_interval` epochs.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_dataset, cluster_stats, ClusterConfig, ClusterModel, ClusterStats};
use crate::csv::{format_float, format_opt};
use crate::dataset::LongTailDataset;
use crate::encoder::{augment, Architecture, AugmentationConfig, Encoder, OptimizerConfig, SgdMomentum};
use crate::losses::{kcl_loss, sbcl_loss, scl_loss, Batch, LossConfig, LossReport, TemperatureTable};
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupLoss {
    Scl,
    Kcl,
}

impl std::str::FromStr for WarmupLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scl" => Ok(Self::Scl),
            "kcl" => Ok(Self::Kcl),
            other => Err(format!("unknown warm-up loss {other:?} (expected scl or kcl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Epochs between cluster/temperature refreshes, counted from the end of warm-up.
    pub update_interval: usize,
    pub batch_size: usize,
    pub warmup_loss: WarmupLoss,
    pub loss: LossConfig,
    pub cluster: ClusterConfig,
    pub alpha: f64,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    pub arch: Architecture,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            total_epochs: 60,
            update_interval: 10,
            batch_size: 128,
            warmup_loss: WarmupLoss::Scl,
            loss: LossConfig::default(),
            cluster: ClusterConfig::default(),
            alpha: 10.0,
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationConfig::default(),
            arch: Architecture::Mlp1 { hidden: 32 },
            embed_dim: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.warmup_epochs > self.total_epochs {
            return bad("warm-up epochs exceed total epochs");
        }
        if self.update_interval < 1 {
            return bad("update interval must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch size must be >= 2");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.embed_dim < 1 {
            return bad("embedding dimension must be >= 1");
        }
        self.loss.validate()?;
        self.cluster.validate()?;
        Ok(())
    }

    /// Whether clusters and temperatures are refreshed at the start of `epoch`.
    pub fn is_update_epoch(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs
            && epoch < self.total_epochs
            && (epoch - self.warmup_epochs) % self.update_interval == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Sbcl,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over batches of the per-anchor loss.
    pub loss: f64,
    pub term_subclass: Option<f64>,
    pub term_class: Option<f64>,
    pub cluster_stats: Option<ClusterStats>,
    pub mean_tau2: Option<f64>,
    pub learning_rate: f64,
}

pub const LOG_HEADER: &str = "epoch,phase,loss,term_subclass,term_class,cluster_max,cluster_min,cluster_mean,cluster_std,cluster_ratio,mean_tau2,lr";

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        let stats = self.cluster_stats;
        let phase = match self.phase {
            Phase::Warmup => "warmup",
            Phase::Sbcl => "sbcl",
        };
        [
            self.epoch.to_string(),
            phase.to_string(),
            format_float(self.loss),
            format_opt(self.term_subclass),
            format_opt(self.term_class),
            stats.map(|s| s.max_size.to_string()).unwrap_or_default(),
            stats.map(|s| s.min_size.to_string()).unwrap_or_default(),
            format_opt(stats.map(|s| s.mean_size)),
            format_opt(stats.map(|s| s.std_size)),
            format_opt(stats.map(|s| s.size_imbalance_ratio)),
            format_opt(self.mean_tau2),
            format_float(self.learning_rate),
        ]
        .join(",")
    }
}

pub fn write_log_csv(records: &[TrainLogRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// What was computed at one refresh epoch.
#[derive(Debug, Clone)]
pub struct UpdateSummary {
    pub epoch: usize,
    pub temperatures: TemperatureTable,
    pub stats: Option<ClusterStats>,
    pub num_subclasses: usize,
}

/// Notifications emitted while training.
pub enum TrainEvent<'a> {
    /// Clusters and temperatures were refreshed at the start of `epoch`.
    Update {
        epoch: usize,
        encoder: &'a Encoder,
        clusters: &'a ClusterModel,
        temperatures: &'a TemperatureTable,
    },
    /// An epoch finished.
    EpochEnd {
        record: &'a TrainLogRecord,
        encoder: &'a Encoder,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub log: Vec<TrainLogRecord>,
    pub updates: Vec<UpdateSummary>,
    /// Cluster model in force at the end of training, if any.
    pub clusters: Option<ClusterModel>,
    pub temperatures: Option<TemperatureTable>,
}

/// Embeds every sample without augmentation.
pub fn extract_features(encoder: &Encoder, ds: &LongTailDataset) -> Result<Array2<f64>> {
    Ok(encoder.embed(ds.inputs())?)
}

/// Shuffles `0..n` and cuts it into batches of `batch_size`. A final batch
/// with a single sample is merged into the previous one.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

pub fn train(ds: &LongTailDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(ds, config, |_| {})
}

pub fn train_with_observer(
    ds: &LongTailDataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&TrainEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut encoder = Encoder::new(config.arch, ds.input_dim(), config.embed_dim, config.seed)?;
    let mut optimizer = SgdMomentum::new(config.optimizer, &encoder);
    let mut batch_rng = seeded_rng(config.seed, 1);
    let mut augment_rng = seeded_rng(config.seed, 2);
    let mut kcl_rng = seeded_rng(config.seed, 3);

    let mut log = Vec::with_capacity(config.total_epochs);
    let mut updates = Vec::new();
    let mut state: Option<(ClusterModel, TemperatureTable, Option<ClusterStats>)> = None;

    for epoch in 0..config.total_epochs {
        let phase = if epoch < config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Sbcl
        };
        if config.is_update_epoch(epoch) {
            let features = extract_features(&encoder, ds)?;
            let clusters = cluster_dataset(features.view(), ds, &config.cluster)?;
            let temperatures = TemperatureTable::compute(features.view(), ds, config.alpha, config.loss.tau1)?;
            let stats = cluster_stats(&clusters, false);
            observer(&TrainEvent::Update {
                epoch,
                encoder: &encoder,
                clusters: &clusters,
                temperatures: &temperatures,
            });
            updates.push(UpdateSummary {
                epoch,
                temperatures: temperatures.clone(),
                stats,
                num_subclasses: clusters.num_subclasses(),
            });
            state = Some((clusters, temperatures, stats));
        }

        let lr = optimizer.learning_rate(epoch, config.total_epochs);
        let batches = make_batches(ds.len(), config.batch_size, &mut batch_rng);
        let mut loss_sum = 0.0;
        let mut term_sums = (0.0, 0.0);
        for rows in &batches {
            let inputs = ds.inputs().select(Axis(0), rows);
            let augmented = augment(inputs.view(), &config.augmentation, &mut augment_rng);
            let labels: Vec<usize> = rows.iter().map(|&r| ds.labels()[r]).collect();
            let (z, cache) = encoder.forward(inputs.view())?;
            let (z_aug, cache_aug) = encoder.forward(augmented.view())?;

            let report: LossReport = match (phase, &state) {
                (Phase::Warmup, _) | (Phase::Sbcl, None) => {
                    let batch = Batch::new(z.view(), z_aug.view(), &labels, None)?;
                    match config.warmup_loss {
                        WarmupLoss::Scl => scl_loss(&batch, config.loss.tau1)?,
                        WarmupLoss::Kcl => kcl_loss(&batch, config.loss.tau1, config.loss.k_positives, &mut kcl_rng)?,
                    }
                }
                (Phase::Sbcl, Some((clusters, temperatures, _))) => {
                    let subclasses: Vec<usize> = rows.iter().map(|&r| clusters.assignments[r]).collect();
                    let batch = Batch::new(z.view(), z_aug.view(), &labels, Some(&subclasses))?;
                    sbcl_loss(&batch, &config.loss, temperatures)?
                }
            };

            let n = rows.len() as f64;
            loss_sum += report.value / n;
            if let Some(terms) = report.terms {
                term_sums.0 += terms.subclass / n;
                term_sums.1 += terms.class / n;
            }
            let mut grads = encoder.backward(&cache, report.grad_anchors.view())?;
            grads.accumulate(&encoder.backward(&cache_aug, report.grad_augmented.view())?);
            grads.scale(1.0 / n);
            optimizer.step(&mut encoder, &grads.layers, epoch, config.total_epochs)?;
        }

        let batch_count = batches.len() as f64;
        let sbcl_active = phase == Phase::Sbcl && state.is_some();
        let record = TrainLogRecord {
            epoch,
            phase,
            loss: loss_sum / batch_count,
            term_subclass: sbcl_active.then(|| term_sums.0 / batch_count),
            term_class: sbcl_active.then(|| term_sums.1 / batch_count),
            cluster_stats: if sbcl_active { state.as_ref().and_then(|s| s.2) } else { None },
            mean_tau2: if sbcl_active {
                state.as_ref().map(|s| s.1.mean_tau2())
            } else {
                None
            },
            learning_rate: lr,
        };
        observer(&TrainEvent::EpochEnd {
            record: &record,
            encoder: &encoder,
        });
        log.push(record);
    }

    let (clusters, temperatures) = match state {
        Some((c, t, _)) => (Some(c), Some(t)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        encoder,
        log,
        updates,
        clusters,
        temperatures,
    })
}
