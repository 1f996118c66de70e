//! Feature-distance diagnostics, subclass recovery and the linear probe.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::csv::{format_float, format_opt};
use crate::dataset::{split_labels, LongTailDataset, Split, SplitThresholds};
use crate::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("reference set is empty")]
    EmptySet,
    #[error("dataset has no ground-truth subclusters")]
    MissingGroundTruth,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean Euclidean distance from `z` to the rows of `set`.
pub fn set_distance(z: ArrayView1<'_, f64>, set: ArrayView2<'_, f64>) -> Result<f64, MetricsError> {
    if set.nrows() == 0 {
        return Err(MetricsError::EmptySet);
    }
    if set.ncols() != z.len() {
        return Err(MetricsError::Shape(format!("{} columns vs vector of {}", set.ncols(), z.len())));
    }
    let total: f64 = set.rows().into_iter().map(|row| euclidean(z, row)).sum();
    Ok(total / set.nrows() as f64)
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    IntraSubclass,
    InterSubclass,
    IntraClass,
    InterClass,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 4] = [
        DistanceKind::IntraSubclass,
        DistanceKind::InterSubclass,
        DistanceKind::IntraClass,
        DistanceKind::InterClass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::IntraSubclass => "intra_subclass",
            DistanceKind::InterSubclass => "inter_subclass",
            DistanceKind::IntraClass => "intra_class",
            DistanceKind::InterClass => "inter_class",
        }
    }
}

/// Split rows Many, Medium, Few, All; columns follow [`DistanceKind::ALL`].
/// `None` when no sample in the split had a nonempty reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub values: [[Option<f64>; 4]; 4],
}

pub const SPLIT_ROWS: [&str; 4] = ["many", "medium", "few", "all"];

impl DistanceReport {
    pub fn get(&self, split: Option<Split>, kind: DistanceKind) -> Option<f64> {
        let row = split_row(split);
        let col = DistanceKind::ALL.iter().position(|&k| k == kind).unwrap();
        self.values[row][col]
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "split,statistic,value")?;
        for (row, split) in SPLIT_ROWS.iter().enumerate() {
            for (col, kind) in DistanceKind::ALL.iter().enumerate() {
                writeln!(out, "{split},{},{}", kind.name(), format_opt(self.values[row][col]))?;
            }
        }
        Ok(())
    }
}

fn split_row(split: Option<Split>) -> usize {
    match split {
        Some(Split::Many) => 0,
        Some(Split::Medium) => 1,
        Some(Split::Few) => 2,
        None => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub thresholds: SplitThresholds,
    /// When set, Many and Medium anchors are subsampled (with this seed) down
    /// to the number of Few anchors. Reference sets are never subsampled.
    pub subsample_seed: Option<u64>,
}

/// Per-anchor distance sums: (same subclass, same class other subclass, other class).
fn anchor_distances(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    subclasses: &[usize],
    i: usize,
) -> [Option<f64>; 4] {
    let zi = features.row(i);
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (j, zj) in features.rows().into_iter().enumerate() {
        if j == i {
            continue;
        }
        let slot = if labels[j] != labels[i] {
            2
        } else if subclasses[j] == subclasses[i] {
            0
        } else {
            1
        };
        sums[slot] += euclidean(zi, zj);
        counts[slot] += 1;
    }
    let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
    [
        mean(sums[0], counts[0]),
        mean(sums[1], counts[1]),
        mean(sums[0] + sums[1], counts[0] + counts[1]),
        mean(sums[2], counts[2]),
    ]
}

/// Table-style distance summary. Each sample's reference sets exclude the
/// sample itself; samples with an empty reference set are skipped for that
/// statistic.
pub fn distance_report(
    features: ArrayView2<'_, f64>,
    ds: &LongTailDataset,
    clusters: &ClusterModel,
    options: &DistanceOptions,
) -> Result<DistanceReport, MetricsError> {
    if features.nrows() != ds.len() || clusters.assignments.len() != ds.len() {
        return Err(MetricsError::Shape(format!(
            "{} feature rows, {} assignments, {} samples",
            features.nrows(),
            clusters.assignments.len(),
            ds.len()
        )));
    }
    let class_split = split_labels(ds.class_counts(), options.thresholds);
    let anchors = select_anchors(ds, &class_split, options.subsample_seed);

    let per_anchor = map_ordered(&anchors, |&i| {
        anchor_distances(features, ds.labels(), &clusters.assignments, i)
    });

    let mut sums = [[0.0f64; 4]; 4];
    let mut counts = [[0usize; 4]; 4];
    for (&i, dists) in anchors.iter().zip(&per_anchor) {
        let split = split_row(Some(class_split[ds.labels()[i]]));
        for (k, d) in dists.iter().enumerate() {
            if let Some(d) = d {
                for row in [split, 3] {
                    sums[row][k] += d;
                    counts[row][k] += 1;
                }
            }
        }
    }
    let mut values = [[None; 4]; 4];
    for row in 0..4 {
        for k in 0..4 {
            if counts[row][k] > 0 {
                values[row][k] = Some(sums[row][k] / counts[row][k] as f64);
            }
        }
    }
    Ok(DistanceReport { values })
}

fn select_anchors(ds: &LongTailDataset, class_split: &[Split], seed: Option<u64>) -> Vec<usize> {
    let Some(seed) = seed else {
        return (0..ds.len()).collect();
    };
    let mut by_split: [Vec<usize>; 3] = Default::default();
    for (i, &y) in ds.labels().iter().enumerate() {
        by_split[split_row(Some(class_split[y]))].push(i);
    }
    let target = by_split[2].len();
    let mut rng = seeded_rng(seed, 0);
    let mut anchors = Vec::new();
    for (row, members) in by_split.iter().enumerate() {
        if row == 2 || members.len() <= target {
            anchors.extend_from_slice(members);
        } else {
            let mut picked: Vec<usize> = sample(&mut rng, members.len(), target).into_iter().map(|p| members[p]).collect();
            picked.sort_unstable();
            anchors.extend(picked);
        }
    }
    anchors.sort_unstable();
    anchors
}

#[cfg(feature = "parallel")]
fn map_ordered<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Adjusted Rand index between two labelings of the same items.
/// Degenerate cases where both partitions are trivial score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len();
    let compact = |labels: &[usize]| {
        let mut ids = std::collections::BTreeMap::new();
        labels
            .iter()
            .map(|&l| {
                let next = ids.len();
                *ids.entry(l).or_insert(next)
            })
            .collect::<Vec<usize>>()
    };
    let (ca, cb) = (compact(a), compact(b));
    let ka = ca.iter().max().map_or(0, |m| m + 1);
    let kb = cb.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in ca.iter().zip(&cb) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let pairs = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&m| pairs(m)).sum();
    let sum_a: f64 = rows.iter().map(|&m| pairs(m)).sum();
    let sum_b: f64 = cols.iter().map(|&m| pairs(m)).sum();
    let total = pairs(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRecovery {
    pub class: usize,
    pub ari: f64,
}

/// ARI between recovered subclasses and generator components, for every
/// class that was split into more than one subclass.
pub fn subclass_recovery(clusters: &ClusterModel, ds: &LongTailDataset) -> Result<Vec<ClassRecovery>, MetricsError> {
    let truth = ds.true_subclusters().ok_or(MetricsError::MissingGroundTruth)?;
    if clusters.assignments.len() != ds.len() {
        return Err(MetricsError::Shape(format!(
            "{} assignments for {} samples",
            clusters.assignments.len(),
            ds.len()
        )));
    }
    let mut out = Vec::new();
    for (class, members) in ds.class_members().iter().enumerate() {
        if !clusters.is_clustered(class) {
            continue;
        }
        let found: Vec<usize> = members.iter().map(|&i| clusters.assignments[i]).collect();
        let expected: Vec<usize> = members.iter().map(|&i| truth[i]).collect();
        out.push(ClassRecovery {
            class,
            ari: adjusted_rand_index(&found, &expected)?,
        });
    }
    Ok(out)
}

pub fn mean_recovery(scores: &[ClassRecovery]) -> Option<f64> {
    (!scores.is_empty()).then(|| scores.iter().map(|s| s.ari).sum::<f64>() / scores.len() as f64)
}

pub fn write_recovery_csv(scores: &[ClassRecovery], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "class,ari")?;
    for s in scores {
        writeln!(out, "{},{}", s.class, format_float(s.ari))?;
    }
    Ok(())
}

/// Softmax classifier over frozen features: logits = W z + b, W is C x d.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearProbe {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logits(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&z) + &self.bias
    }

    /// Argmax of the logits, lowest class on ties.
    pub fn predict(&self, z: ArrayView1<'_, f64>) -> usize {
        let logits = self.logits(z);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.5,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Mean cross-entropy over `rows` and its gradient (weight, bias).
pub fn cross_entropy_grad(
    probe: &LinearProbe,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    rows: &[usize],
) -> (f64, Array2<f64>, Array1<f64>) {
    let mut grad_w = Array2::zeros(probe.weight.raw_dim());
    let mut grad_b = Array1::zeros(probe.bias.len());
    let mut loss = 0.0;
    for &r in rows {
        let z = features.row(r);
        let logits = probe.logits(z);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let y = labels[r];
        loss += total.ln() + max - logits[y];
        for (c, e) in exp.iter().enumerate() {
            let g = e / total - if c == y { 1.0 } else { 0.0 };
            grad_b[c] += g;
            grad_w.row_mut(c).scaled_add(g, &z);
        }
    }
    let scale = 1.0 / rows.len().max(1) as f64;
    (loss * scale, grad_w * scale, grad_b * scale)
}

/// Trains a zero-initialized probe by minibatch SGD. Every draw picks a class
/// uniformly, then a sample of that class uniformly. One epoch makes as many
/// draws as there are samples.
pub fn train_probe(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe, MetricsError> {
    if features.nrows() != labels.len() {
        return Err(MetricsError::Shape(format!("{} rows vs {} labels", features.nrows(), labels.len())));
    }
    if config.batch_size == 0 || !(config.lr >= 0.0) {
        return Err(MetricsError::InvalidConfig("batch size must be positive and lr non-negative".into()));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(MetricsError::Shape(format!("label {y} with {num_classes} classes")));
        }
        members[y].push(i);
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| !members[c].is_empty()).collect();
    let mut probe = LinearProbe::zeros(num_classes, features.ncols());
    if present.is_empty() {
        return Ok(probe);
    }
    let mut rng = seeded_rng(config.seed, 0);
    let n = labels.len();
    for _ in 0..config.epochs {
        let mut drawn = 0;
        while drawn < n {
            let size = config.batch_size.min(n - drawn);
            let rows: Vec<usize> = (0..size)
                .map(|_| {
                    let class = &members[present[rng.random_range(0..present.len())]];
                    class[rng.random_range(0..class.len())]
                })
                .collect();
            let (_, gw, gb) = cross_entropy_grad(&probe, features, labels, &rows);
            probe.weight.scaled_add(-config.lr, &gw);
            probe.bias.scaled_add(-config.lr, &gb);
            drawn += size;
        }
    }
    Ok(probe)
}

/// Top-1 accuracy per split; `None` for splits with no evaluated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub all: Option<f64>,
}

impl SplitAccuracy {
    pub fn get(&self, split: Option<Split>) -> Option<f64> {
        match split {
            Some(Split::Many) => self.many,
            Some(Split::Medium) => self.medium,
            Some(Split::Few) => self.few,
            None => self.all,
        }
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "split,statistic,value")?;
        for (name, value) in SPLIT_ROWS.iter().zip([self.many, self.medium, self.few, self.all]) {
            writeln!(out, "{name},top1,{}", format_opt(value))?;
        }
        Ok(())
    }
}

/// Evaluates on arbitrary samples; `class_split` gives each class's split,
/// normally derived from the training set's counts.
pub fn evaluate_probe_with_splits(
    probe: &LinearProbe,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    class_split: &[Split],
) -> Result<SplitAccuracy, MetricsError> {
    if features.nrows() != labels.len() {
        return Err(MetricsError::Shape(format!("{} rows vs {} labels", features.nrows(), labels.len())));
    }
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    for (z, &y) in features.rows().into_iter().zip(labels) {
        let split = *class_split
            .get(y)
            .ok_or_else(|| MetricsError::Shape(format!("label {y} has no split")))?;
        let correct = usize::from(probe.predict(z) == y);
        for row in [split_row(Some(split)), 3] {
            hits[row] += correct;
            totals[row] += 1;
        }
    }
    let acc = |k: usize| (totals[k] > 0).then(|| hits[k] as f64 / totals[k] as f64);
    Ok(SplitAccuracy {
        many: acc(0),
        medium: acc(1),
        few: acc(2),
        all: acc(3),
    })
}

/// Evaluates on `ds` itself, splitting classes by its own counts.
pub fn evaluate_probe(
    probe: &LinearProbe,
    features: ArrayView2<'_, f64>,
    ds: &LongTailDataset,
    thresholds: SplitThresholds,
) -> Result<SplitAccuracy, MetricsError> {
    let class_split = split_labels(ds.class_counts(), thresholds);
    evaluate_probe_with_splits(probe, features, ds.labels(), &class_split)
}
