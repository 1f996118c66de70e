//! Contrastive objectives with analytic gradients.
//!
//! For anchor `i` in a batch of `N` unit-norm embeddings `z`, with its
//! augmented view `z~_i`:
//!
//! - `V_i` is every other anchor `z_j`, `j != i`; `V~_i` adds `z~_i`.
//! - `P_i` is the subset of `V_i` sharing the anchor's class.
//! - `M_i` is the subset of `P_i` sharing the anchor's subclass.
//!
//! Every loss is a sum over anchors of terms of the form
//! `-(1/|P|) sum_{p in P} log softmax_{A}(z_i . c / tau)[p]` with the
//! positive set `P` contained in the denominator set `A`. Losses are summed
//! over anchors, not averaged.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LongTailDataset;

/// Tolerance on `| ||z|| - 1 |` for batch embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Mean concentration below which every class gets `tau1 * e`.
pub const DEGENERATE_PHI: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("k must be >= 1, got {0}")]
    InvalidK(usize),
    #[error("beta must be finite and >= 0, got {0}")]
    InvalidBeta(f64),
    #[error("no class-level temperature for class {class}")]
    MissingTemperature { class: usize },
    #[error("batch has no subclass ids")]
    MissingSubclasses,
    #[error("batch shape mismatch: {0}")]
    Shape(String),
    #[error("{view} embedding {row} is not unit-norm (norm {norm})")]
    NotUnitNorm {
        view: &'static str,
        row: usize,
        norm: f64,
    },
}

/// A batch of paired views with their labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    anchors: ArrayView2<'a, f64>,
    augmented: ArrayView2<'a, f64>,
    labels: &'a [usize],
    subclasses: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn new(
        anchors: ArrayView2<'a, f64>,
        augmented: ArrayView2<'a, f64>,
        labels: &'a [usize],
        subclasses: Option<&'a [usize]>,
    ) -> Result<Self, LossError> {
        if anchors.dim() != augmented.dim() {
            return Err(LossError::Shape(format!(
                "anchors {:?} vs augmented {:?}",
                anchors.dim(),
                augmented.dim()
            )));
        }
        if labels.len() != anchors.nrows() {
            return Err(LossError::Shape(format!(
                "{} labels for {} anchors",
                labels.len(),
                anchors.nrows()
            )));
        }
        if let Some(sub) = subclasses {
            if sub.len() != anchors.nrows() {
                return Err(LossError::Shape(format!(
                    "{} subclass ids for {} anchors",
                    sub.len(),
                    anchors.nrows()
                )));
            }
        }
        for (view, m) in [("anchor", anchors), ("augmented", augmented)] {
            for (row, z) in m.rows().into_iter().enumerate() {
                let norm = z.dot(&z).sqrt();
                if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                    return Err(LossError::NotUnitNorm { view, row, norm });
                }
            }
        }
        Ok(Self {
            anchors,
            augmented,
            labels,
            subclasses,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn anchors(&self) -> ArrayView2<'a, f64> {
        self.anchors
    }

    pub fn augmented(&self) -> ArrayView2<'a, f64> {
        self.augmented
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn subclasses(&self) -> Option<&'a [usize]> {
        self.subclasses
    }

    /// Indices `j != i` with the same class as anchor `i`.
    pub fn same_class(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| j != i && self.labels[j] == self.labels[i])
            .collect()
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Base temperature, used for subclass-level and warm-up terms.
    pub tau1: f64,
    /// Weight of the class-level term.
    pub beta: f64,
    /// Positives per anchor for KCL.
    pub k_positives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 0.1,
            beta: 0.2,
            k_positives: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        check_tau(self.tau1)?;
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(LossError::InvalidBeta(self.beta));
        }
        if self.k_positives < 1 {
            return Err(LossError::InvalidK(self.k_positives));
        }
        Ok(())
    }
}

/// The two parts of the bi-granularity loss, each summed over anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbclTerms {
    /// Subclass-level term at `tau1`.
    pub subclass: f64,
    /// Class-level term at `tau2(c)`, before weighting by beta.
    pub class: f64,
}

/// Loss value and gradients with respect to both views.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    pub grad_anchors: Array2<f64>,
    pub grad_augmented: Array2<f64>,
    pub terms: Option<SbclTerms>,
}

impl LossReport {
    fn zeros(batch: &Batch<'_>) -> Self {
        Self {
            value: 0.0,
            grad_anchors: Array2::zeros(batch.anchors.raw_dim()),
            grad_augmented: Array2::zeros(batch.augmented.raw_dim()),
            terms: None,
        }
    }

    /// Loss divided by the batch size.
    pub fn batch_mean(&self) -> f64 {
        let n = self.grad_anchors.nrows();
        if n == 0 {
            0.0
        } else {
            self.value / n as f64
        }
    }
}

/// A contrast candidate for anchor `i`: another anchor or the anchor's own
/// augmented view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Candidate {
    Anchor(usize),
    Augmented,
}

/// Adds `weight * (-(1/|P|) sum_P log softmax_A)` for anchor `i` to `report`
/// and returns the unweighted term. `denominator` lists the set `A` with a
/// flag marking members of `P`.
fn accumulate_term(
    batch: &Batch<'_>,
    i: usize,
    denominator: &[(Candidate, bool)],
    tau: f64,
    weight: f64,
    report: &mut LossReport,
) -> f64 {
    let zi = batch.anchors.row(i);
    let vector = |c: Candidate| -> ArrayView1<'_, f64> {
        match c {
            Candidate::Anchor(j) => batch.anchors.row(j),
            Candidate::Augmented => batch.augmented.row(i),
        }
    };
    let logits: Vec<f64> = denominator.iter().map(|&(c, _)| zi.dot(&vector(c)) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_sum_exp = max + sum_exp.ln();
    let positives = denominator.iter().filter(|&&(_, p)| p).count() as f64;
    let positive_logits: f64 = logits
        .iter()
        .zip(denominator)
        .filter(|(_, &(_, p))| p)
        .map(|(&l, _)| l)
        .sum();
    let term = log_sum_exp - positive_logits / positives;
    if weight == 0.0 {
        return term;
    }

    let dim = zi.len();
    let mut grad_zi = vec![0.0; dim];
    for (&(c, is_positive), &l) in denominator.iter().zip(&logits) {
        let softmax = (l - log_sum_exp).exp();
        let target = if is_positive { 1.0 / positives } else { 0.0 };
        // d term / d logit, chained through logit = z_i . c / tau.
        let g = weight * (softmax - target) / tau;
        let other = vector(c);
        for (acc, &v) in grad_zi.iter_mut().zip(other.iter()) {
            *acc += g * v;
        }
        let mut target_row = match c {
            Candidate::Anchor(j) => report.grad_anchors.row_mut(j),
            Candidate::Augmented => report.grad_augmented.row_mut(i),
        };
        target_row.scaled_add(g, &zi);
    }
    for (dst, g) in report.grad_anchors.row_mut(i).iter_mut().zip(grad_zi) {
        *dst += g;
    }
    term
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(LossError::NonPositiveTemperature(tau));
    }
    Ok(())
}

/// Denominator `V~_i` with positives marked by `is_positive(j)` for other
/// anchors; the augmented view is always a positive.
fn full_denominator(n: usize, i: usize, is_positive: impl Fn(usize) -> bool) -> Vec<(Candidate, bool)> {
    let mut set: Vec<(Candidate, bool)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| (Candidate::Anchor(j), is_positive(j)))
        .collect();
    set.push((Candidate::Augmented, true));
    set
}

/// Supervised contrastive loss: positives `P~_i`, denominator `V~_i`.
pub fn scl_loss(batch: &Batch<'_>, tau: f64) -> Result<LossReport, LossError> {
    check_tau(tau)?;
    let mut report = LossReport::zeros(batch);
    let labels = batch.labels;
    for i in 0..batch.len() {
        let denominator = full_denominator(batch.len(), i, |j| labels[j] == labels[i]);
        report.value += accumulate_term(batch, i, &denominator, tau, 1.0, &mut report);
    }
    Ok(report)
}

/// Draws up to `k` same-class positives per anchor without replacement.
/// Anchors with fewer than `k` same-class partners keep all of them.
/// Returned subsets are sorted.
pub fn sample_k_positives(batch: &Batch<'_>, k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..batch.len())
        .map(|i| {
            let same = batch.same_class(i);
            if same.len() <= k {
                same
            } else {
                let mut picked: Vec<usize> = rand::seq::index::sample(rng, same.len(), k)
                    .into_iter()
                    .map(|idx| same[idx])
                    .collect();
                picked.sort_unstable();
                picked
            }
        })
        .collect()
}

/// k-positive contrastive loss with positives drawn from `rng`.
pub fn kcl_loss(batch: &Batch<'_>, tau: f64, k: usize, rng: &mut impl Rng) -> Result<LossReport, LossError> {
    check_tau(tau)?;
    if k < 1 {
        return Err(LossError::InvalidK(k));
    }
    let subsets = sample_k_positives(batch, k, rng);
    kcl_loss_with_positives(batch, tau, &subsets)
}

/// k-positive contrastive loss for an explicit choice of positives per
/// anchor (each a subset of the anchor's same-class partners). The
/// augmented view is always added, and the denominator stays `V~_i`.
pub fn kcl_loss_with_positives(batch: &Batch<'_>, tau: f64, positives: &[Vec<usize>]) -> Result<LossReport, LossError> {
    check_tau(tau)?;
    if positives.len() != batch.len() {
        return Err(LossError::Shape(format!(
            "{} positive subsets for {} anchors",
            positives.len(),
            batch.len()
        )));
    }
    let mut report = LossReport::zeros(batch);
    for (i, chosen) in positives.iter().enumerate() {
        if let Some(&bad) = chosen
            .iter()
            .find(|&&j| j == i || j >= batch.len() || batch.labels[j] != batch.labels[i])
        {
            return Err(LossError::Shape(format!("index {bad} is not a positive of anchor {i}")));
        }
        let denominator = full_denominator(batch.len(), i, |j| chosen.contains(&j));
        report.value += accumulate_term(batch, i, &denominator, tau, 1.0, &mut report);
    }
    Ok(report)
}

/// Per-class concentration and temperatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureTable {
    pub phi: Vec<f64>,
    pub tau2: Vec<f64>,
    /// Per-class mean feature, row `c` for class `c`.
    pub centroids: Vec<Vec<f64>>,
    pub alpha: f64,
    pub tau1: f64,
}

impl TemperatureTable {
    /// Computes concentration over the full feature matrix and derives the
    /// class-level temperatures from it.
    pub fn compute(features: ArrayView2<'_, f64>, ds: &LongTailDataset, alpha: f64, tau1: f64) -> Result<Self, LossError> {
        check_tau(tau1)?;
        let (phi, centroids) = concentration(features, ds, alpha)?;
        let tau2 = dynamic_temperature(&phi, tau1)?;
        Ok(Self {
            phi,
            tau2,
            centroids: centroids.rows().into_iter().map(|r| r.to_vec()).collect(),
            alpha,
            tau1,
        })
    }

    /// A table with the same class-level temperature for every class.
    pub fn uniform(num_classes: usize, tau1: f64, tau2: f64) -> Self {
        Self {
            phi: vec![0.0; num_classes],
            tau2: vec![tau2; num_classes],
            centroids: Vec::new(),
            alpha: 0.0,
            tau1,
        }
    }

    pub fn mean_tau2(&self) -> f64 {
        if self.tau2.is_empty() {
            return f64::NAN;
        }
        self.tau2.iter().sum::<f64>() / self.tau2.len() as f64
    }
}

/// `phi(c) = sum_{i in c} ||z_i - t_c|| / (n_c * ln(n_c + alpha))` with
/// `t_c` the raw (not renormalized) class mean. Returns `phi` and the
/// centroids.
pub fn concentration(
    features: ArrayView2<'_, f64>,
    ds: &LongTailDataset,
    alpha: f64,
) -> Result<(Vec<f64>, Array2<f64>), LossError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(LossError::Shape(format!("alpha must be positive, got {alpha}")));
    }
    if features.nrows() != ds.len() {
        return Err(LossError::Shape(format!(
            "{} feature rows for {} samples",
            features.nrows(),
            ds.len()
        )));
    }
    let members = ds.class_members();
    let mut centroids = Array2::zeros((members.len(), features.ncols()));
    let mut phi = Vec::with_capacity(members.len());
    for (class, rows) in members.iter().enumerate() {
        let n = rows.len() as f64;
        let mut centroid = centroids.row_mut(class);
        for &r in rows {
            centroid += &features.row(r);
        }
        centroid /= n;
        let spread: f64 = rows
            .iter()
            .map(|&r| {
                features
                    .row(r)
                    .iter()
                    .zip(centroid.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        phi.push(spread / (n * (n + alpha).ln()));
    }
    Ok((phi, centroids))
}

/// `tau2(c) = tau1 * exp(phi(c) / mean(phi))`.
///
/// The mean is taken as `min + mean(phi - min)` so equal inputs give a ratio
/// of exactly one. If the mean is below [`DEGENERATE_PHI`], every class gets
/// `tau1 * e`. The ratio is floored at `DEGENERATE_PHI / mean`, and a result
/// that still rounds to `tau1` is bumped to the next float, so
/// `tau2(c) > tau1` always holds.
pub fn dynamic_temperature(phi: &[f64], tau1: f64) -> Result<Vec<f64>, LossError> {
    check_tau(tau1)?;
    if phi.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&bad) = phi.iter().find(|&&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(LossError::Shape(format!("concentration must be finite and >= 0, got {bad}")));
    }
    let min = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = min + phi.iter().map(|&p| p - min).sum::<f64>() / phi.len() as f64;
    if mean < DEGENERATE_PHI {
        return Ok(vec![tau1 * 1f64.exp(); phi.len()]);
    }
    let floor = DEGENERATE_PHI / mean;
    Ok(phi
        .iter()
        .map(|&p| {
            let tau2 = tau1 * (p / mean).max(floor).exp();
            if tau2 > tau1 {
                tau2
            } else {
                tau1.next_up()
            }
        })
        .collect())
}

/// Bi-granularity loss:
///
/// - subclass term: positives `M~_i`, denominator `V~_i`, temperature `tau1`;
/// - class term: positives `P~_i \ M_i`, denominator `V~_i \ M_i`,
///   temperature `tau2(y_i)`;
///
/// total = subclass + beta * class, each summed over anchors.
pub fn sbcl_loss(batch: &Batch<'_>, config: &LossConfig, temps: &TemperatureTable) -> Result<LossReport, LossError> {
    config.validate()?;
    let subclasses = batch.subclasses.ok_or(LossError::MissingSubclasses)?;
    let labels = batch.labels;
    let mut report = LossReport::zeros(batch);
    let mut terms = SbclTerms {
        subclass: 0.0,
        class: 0.0,
    };
    for i in 0..batch.len() {
        let class = labels[i];
        let tau2 = *temps
            .tau2
            .get(class)
            .ok_or(LossError::MissingTemperature { class })?;
        check_tau(tau2)?;
        let same_subclass = |j: usize| labels[j] == class && subclasses[j] == subclasses[i];

        let first = full_denominator(batch.len(), i, same_subclass);
        terms.subclass += accumulate_term(batch, i, &first, config.tau1, 1.0, &mut report);

        let mut second: Vec<(Candidate, bool)> = (0..batch.len())
            .filter(|&j| j != i && !same_subclass(j))
            .map(|j| (Candidate::Anchor(j), labels[j] == class))
            .collect();
        second.push((Candidate::Augmented, true));
        terms.class += accumulate_term(batch, i, &second, tau2, config.beta, &mut report);
    }
    report.value = terms.subclass + config.beta * terms.class;
    report.terms = Some(terms);
    Ok(report)
}
