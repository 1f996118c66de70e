//! Subclass-balancing adaptive clustering.
//!
//! Head classes are split into `m_c = ceil(n_c / M)` subclasses of at most
//! `M = max(n_C, delta)` samples each. Centers start from a farthest-point
//! selection; each round assigns samples greedily, always taking the most
//! cosine-similar (sample, open center) pair left and closing a center once
//! it holds `M` samples. Later rounds move every center to the renormalized
//! mean of its members before reassigning.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::csv::format_float;
use crate::dataset::LongTailDataset;
use crate::seeded_rng;

/// Tolerance on `| ||x|| - 1 |` for inputs that must be unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("class of {size} samples does not exceed the capacity {capacity}; it is not clustered")]
    TooSmall { size: usize, capacity: usize },
    #[error("feature matrix has {rows} rows but the dataset has {expected} samples")]
    RowMismatch { rows: usize, expected: usize },
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("k = {k} is invalid for {n} samples")]
    InvalidK { k: usize, n: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Lower bound on the capacity threshold `M`.
    pub delta: usize,
    /// Assignment rounds; the first uses farthest-point centers, the rest
    /// use updated centers.
    pub iterations: usize,
    /// Seeds the tie-break order of the farthest-point selection.
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            delta: 10,
            iterations: 10,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.delta < 1 {
            return Err(ClusterError::InvalidConfig("delta must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(ClusterError::InvalidConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// `M = max(n_C, delta)`.
pub fn capacity_threshold(tail_count: usize, delta: usize) -> usize {
    tail_count.max(delta)
}

/// Number of subclasses for a class of `size` samples under capacity `capacity`.
pub fn cluster_count(size: usize, capacity: usize) -> usize {
    if size <= capacity {
        1
    } else {
        size.div_ceil(capacity)
    }
}

/// Result of clustering one class: local cluster ids and unit-norm centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassClusters {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
}

pub(crate) fn check_unit_rows(features: ArrayView2<'_, f64>) -> Result<(), ClusterError> {
    for (row, x) in features.rows().into_iter().enumerate() {
        let norm = x.dot(&x).sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(ClusterError::NotUnitNorm { row, norm });
        }
    }
    Ok(())
}

/// Clusters the unit-norm rows of one class into `ceil(n / capacity)`
/// clusters of at most `capacity` samples each.
pub fn cluster_class(
    features: ArrayView2<'_, f64>,
    capacity: usize,
    config: &ClusterConfig,
) -> Result<ClassClusters, ClusterError> {
    cluster_class_with_stream(features, capacity, config, 0)
}

fn cluster_class_with_stream(
    features: ArrayView2<'_, f64>,
    capacity: usize,
    config: &ClusterConfig,
    stream: u64,
) -> Result<ClassClusters, ClusterError> {
    config.validate()?;
    check_unit_rows(features)?;
    let n = features.nrows();
    if n <= capacity {
        return Err(ClusterError::TooSmall { size: n, capacity });
    }
    let k = cluster_count(n, capacity);

    let seeds = farthest_point_init(features, k, config.seed, stream);
    let mut centers = features.select(Axis(0), &seeds);
    let mut assignments = capacity_assign(features, centers.view(), capacity);
    for _ in 1..config.iterations {
        update_centers(features, &assignments, &mut centers);
        assignments = capacity_assign(features, centers.view(), capacity);
    }
    update_centers(features, &assignments, &mut centers);
    Ok(ClassClusters {
        assignments,
        centers,
    })
}

/// Farthest-point selection of `k` sample indices. The first pick is the
/// sample farthest from the mean (lowest index on ties); every later pick
/// maximizes the distance to the nearest already-chosen center, scanning
/// candidates in a seeded order so exact ties are broken reproducibly.
pub fn farthest_point_init(features: ArrayView2<'_, f64>, k: usize, seed: u64, stream: u64) -> Vec<usize> {
    let n = features.nrows();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, x) in features.rows().into_iter().enumerate() {
        let d = squared_distance(x, mean.view());
        if d > best {
            best = d;
            first = i;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, stream));

    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut nearest: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|x| squared_distance(x, features.row(first)))
        .collect();
    while chosen.len() < k.min(n) {
        let mut pick = None;
        let mut best = f64::NEG_INFINITY;
        for &i in &order {
            if !taken[i] && nearest[i] > best {
                best = nearest[i];
                pick = Some(i);
            }
        }
        let pick = pick.expect("fewer picks than samples");
        taken[pick] = true;
        chosen.push(pick);
        let center = features.row(pick);
        for (i, x) in features.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(squared_distance(x, center));
        }
    }
    chosen
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One greedy assignment round. All (sample, center) similarities are fixed
/// for the round, so visiting pairs in descending similarity order and
/// skipping assigned samples and full centers reproduces the repeated
/// global arg-max exactly. Ties go to the lower sample, then lower center.
pub fn capacity_assign(features: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>, capacity: usize) -> Vec<usize> {
    let n = features.nrows();
    let k = centers.nrows();
    debug_assert!(k * capacity >= n, "infeasible capacity");
    let similarity = features.dot(&centers.t());
    let mut pairs: Vec<(f64, u32, u32)> = Vec::with_capacity(n * k);
    for ((i, j), &s) in similarity.indexed_iter() {
        pairs.push((s, i as u32, j as u32));
    }
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut assignments = vec![usize::MAX; n];
    let mut sizes = vec![0usize; k];
    let mut remaining = n;
    for (_, i, j) in pairs {
        let (i, j) = (i as usize, j as usize);
        if assignments[i] != usize::MAX || sizes[j] >= capacity {
            continue;
        }
        assignments[i] = j;
        sizes[j] += 1;
        remaining -= 1;
        if remaining == 0 {
            break;
        }
    }
    assignments
}

/// Moves each center to the renormalized mean of its members. A cluster
/// whose mean vanishes (or that is empty) is re-seeded with the sample least
/// similar to its own center.
fn update_centers(features: ArrayView2<'_, f64>, assignments: &[usize], centers: &mut Array2<f64>) {
    let k = centers.nrows();
    let mut sums = Array2::<f64>::zeros(centers.raw_dim());
    for (x, &a) in features.rows().into_iter().zip(assignments) {
        let mut row = sums.row_mut(a);
        row += &x;
    }
    let fit: Vec<f64> = features
        .rows()
        .into_iter()
        .zip(assignments)
        .map(|(x, &a)| x.dot(&centers.row(a)))
        .collect();
    let mut reseeded = vec![false; features.nrows()];
    for j in 0..k {
        let norm = sums.row(j).dot(&sums.row(j)).sqrt();
        if norm > 1e-12 {
            let mean = &sums.row(j) / norm;
            centers.row_mut(j).assign(&mean);
        } else {
            let worst = (0..features.nrows())
                .filter(|&i| !reseeded[i])
                .min_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
            if let Some(i) = worst {
                reseeded[i] = true;
                centers.row_mut(j).assign(&features.row(i));
            }
        }
    }
}

/// Subclass structure over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Global subclass id of every sample.
    pub assignments: Vec<usize>,
    /// Owning class of every subclass.
    pub subclass_of_class: Vec<usize>,
    /// Unit-norm center of every subclass.
    pub centers: Array2<f64>,
    /// The capacity threshold `M`.
    pub capacity: usize,
    /// `m_c` for every class.
    pub per_class_cluster_count: Vec<usize>,
}

impl ClusterModel {
    pub fn num_subclasses(&self) -> usize {
        self.subclass_of_class.len()
    }

    pub fn subclass_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_subclasses()];
        for &s in &self.assignments {
            sizes[s] += 1;
        }
        sizes
    }

    /// Whether class `c` was split (as opposed to passed through whole).
    pub fn is_clustered(&self, class: usize) -> bool {
        self.per_class_cluster_count[class] > 1
    }

    /// Writes `sample_index,class,subclass` rows followed by a `# centers`
    /// section of `subclass,class,c_1,...,c_d` rows.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<(), ClusterError> {
        writeln!(out, "sample_index,class,subclass")?;
        for (i, &s) in self.assignments.iter().enumerate() {
            writeln!(out, "{i},{},{s}", self.subclass_of_class[s])?;
        }
        writeln!(out, "# centers")?;
        let dims: Vec<String> = (1..=self.centers.ncols()).map(|j| format!("c_{j}")).collect();
        writeln!(out, "subclass,class,{}", dims.join(","))?;
        for (s, center) in self.centers.rows().into_iter().enumerate() {
            let values: Vec<String> = center.iter().map(|&v| format_float(v)).collect();
            writeln!(out, "{s},{},{}", self.subclass_of_class[s], values.join(","))?;
        }
        Ok(())
    }
}

/// Splits every class larger than `M = max(n_C, delta)` with
/// [`cluster_class`]; smaller classes become a single subclass. Subclass
/// ids are contiguous and ordered by class.
pub fn cluster_dataset(
    features: ArrayView2<'_, f64>,
    ds: &LongTailDataset,
    config: &ClusterConfig,
) -> Result<ClusterModel, ClusterError> {
    config.validate()?;
    if features.nrows() != ds.len() {
        return Err(ClusterError::RowMismatch {
            rows: features.nrows(),
            expected: ds.len(),
        });
    }
    check_unit_rows(features)?;
    let capacity = capacity_threshold(ds.tail_count(), config.delta);
    let members = ds.class_members();

    let run = |(class, rows): (usize, &Vec<usize>)| -> Result<ClassClusters, ClusterError> {
        let class_features = features.select(Axis(0), rows);
        if rows.len() <= capacity {
            let mean = class_features.sum_axis(Axis(0));
            let norm = mean.dot(&mean).sqrt();
            let center = if norm > 1e-12 {
                mean / norm
            } else {
                class_features.row(0).to_owned()
            };
            let centers = center.insert_axis(Axis(0));
            Ok(ClassClusters {
                assignments: vec![0; rows.len()],
                centers,
            })
        } else {
            cluster_class_with_stream(class_features.view(), capacity, config, class as u64)
        }
    };

    #[cfg(feature = "parallel")]
    let per_class: Vec<Result<ClassClusters, ClusterError>> = {
        use rayon::prelude::*;
        members.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_class: Vec<Result<ClassClusters, ClusterError>> = members.iter().enumerate().map(run).collect();

    let dim = features.ncols();
    let mut assignments = vec![0usize; ds.len()];
    let mut subclass_of_class = Vec::new();
    let mut per_class_cluster_count = Vec::with_capacity(members.len());
    let mut center_rows = Vec::new();
    for (class, (rows, result)) in members.iter().zip(per_class).enumerate() {
        let clusters = result?;
        let offset = subclass_of_class.len();
        let m = clusters.centers.nrows();
        for (&row, &local) in rows.iter().zip(&clusters.assignments) {
            assignments[row] = offset + local;
        }
        subclass_of_class.extend(std::iter::repeat_n(class, m));
        per_class_cluster_count.push(m);
        center_rows.extend(clusters.centers.iter().copied());
    }
    let centers = Array2::from_shape_vec((subclass_of_class.len(), dim), center_rows).expect("center shape");
    Ok(ClusterModel {
        assignments,
        subclass_of_class,
        centers,
        capacity,
        per_class_cluster_count,
    })
}

/// Size distribution of subclasses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub max_size: usize,
    pub min_size: usize,
    pub mean_size: f64,
    /// Population standard deviation.
    pub std_size: f64,
    /// `max_size / min_size`.
    pub size_imbalance_ratio: f64,
    pub count: usize,
}

/// Statistics over the given cluster sizes; zero-size clusters are ignored.
/// Returns `None` when no non-empty cluster remains.
pub fn size_stats(sizes: &[usize]) -> Option<ClusterStats> {
    let sizes: Vec<usize> = sizes.iter().copied().filter(|&s| s > 0).collect();
    if sizes.is_empty() {
        return None;
    }
    let max_size = *sizes.iter().max()?;
    let min_size = *sizes.iter().min()?;
    let count = sizes.len();
    let mean_size = sizes.iter().sum::<usize>() as f64 / count as f64;
    let var = sizes.iter().map(|&s| (s as f64 - mean_size).powi(2)).sum::<f64>() / count as f64;
    Some(ClusterStats {
        max_size,
        min_size,
        mean_size,
        std_size: var.sqrt(),
        size_imbalance_ratio: max_size as f64 / min_size as f64,
        count,
    })
}

/// Subclass size statistics. By default only subclasses of clustered
/// classes count; `include_singletons` also counts pass-through classes.
pub fn cluster_stats(model: &ClusterModel, include_singletons: bool) -> Option<ClusterStats> {
    let sizes: Vec<usize> = model
        .subclass_sizes()
        .into_iter()
        .zip(&model.subclass_of_class)
        .filter(|&(_, &class)| include_singletons || model.is_clustered(class))
        .map(|(size, _)| size)
        .collect();
    size_stats(&sizes)
}

/// Plain Lloyd's k-means (Euclidean distance, raw-mean updates, no
/// capacity) with the same farthest-point initialization. Empty clusters
/// keep their previous center.
pub fn baseline_kmeans(
    features: ArrayView2<'_, f64>,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<Vec<usize>, ClusterError> {
    let n = features.nrows();
    if k < 1 || k > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    let seeds = farthest_point_init(features, k, seed, 0);
    let mut centers = features.select(Axis(0), &seeds);
    let mut assignments = vec![0usize; n];
    for round in 0..iterations.max(1) {
        if round > 0 {
            let mut sums = Array2::<f64>::zeros(centers.raw_dim());
            let mut counts = vec![0usize; k];
            for (x, &a) in features.rows().into_iter().zip(&assignments) {
                let mut row = sums.row_mut(a);
                row += &x;
                counts[a] += 1;
            }
            for (j, &count) in counts.iter().enumerate() {
                if count > 0 {
                    let mean = &sums.row(j) / count as f64;
                    centers.row_mut(j).assign(&mean);
                }
            }
        }
        for (i, x) in features.rows().into_iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, c) in centers.rows().into_iter().enumerate() {
                let d = squared_distance(x, c);
                if d < best {
                    best = d;
                    assignments[i] = j;
                }
            }
        }
    }
    Ok(assignments)
}

/// Runs [`baseline_kmeans`] on every clustered class of `model` with the
/// same per-class cluster count `m_c`, and returns the resulting cluster
/// sizes (including any empty clusters as zero).
pub fn baseline_sizes(
    features: ArrayView2<'_, f64>,
    ds: &LongTailDataset,
    model: &ClusterModel,
    config: &ClusterConfig,
) -> Result<Vec<usize>, ClusterError> {
    let mut sizes = Vec::new();
    for (class, rows) in ds.class_members().iter().enumerate() {
        let k = model.per_class_cluster_count[class];
        if k <= 1 {
            continue;
        }
        let class_features = features.select(Axis(0), rows);
        let assignments = baseline_kmeans(class_features.view(), k, config.iterations, config.seed)?;
        let mut local = vec![0usize; k];
        for a in assignments {
            local[a] += 1;
        }
        sizes.extend(local);
    }
    Ok(sizes)
}
