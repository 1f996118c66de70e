//! Browser bindings for the demo page in `www/`.
//!
//! Every export has a plain Rust twin (`build`, `compute`, `run`) so the
//! logic is testable without a JS host; the `#[wasm_bindgen]` wrappers only
//! turn errors into `JsError`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use subtail::clustering::{baseline_kmeans, cluster_dataset};
use subtail::dataset::{generate_with_test, split_labels};
use subtail::metrics::{evaluate_probe_with_splits, train_probe, ProbeConfig, SplitAccuracy};
use subtail::trainer::{extract_features, train};
use subtail::{
    seeded_rng, Architecture, ClusterConfig, GeneratorConfig, LongTailDataset, LossConfig, SplitThresholds,
    TemperatureTable, TrainConfig,
};

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn bad(msg: impl Into<String>) -> subtail::Error {
    subtail::Error::Config(msg.into())
}

/// A head class on the unit circle, drawn as uneven clumps, plus a small
/// tail class that fixes the capacity. Both clusterings see the same points.
#[wasm_bindgen]
pub struct ClusterDemo {
    xs: Vec<f64>,
    ys: Vec<f64>,
    head: usize,
    capacity: usize,
    ours: Vec<u32>,
    kmeans: Vec<u32>,
}

#[wasm_bindgen]
impl ClusterDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, head: usize, clumps: usize, tail: usize, delta: usize) -> Result<ClusterDemo, JsError> {
        Self::build(seed, head, clumps, tail, delta).map_err(js)
    }

    /// Point coordinates, head class first.
    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.ys.clone()
    }

    /// Samples in the head class; the remaining points are the tail class.
    pub fn head(&self) -> usize {
        self.head
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Capacity-constrained subclass of each head sample.
    pub fn ours(&self) -> Vec<u32> {
        self.ours.clone()
    }

    /// Unconstrained k-means cluster of each head sample, same cluster count.
    pub fn kmeans(&self) -> Vec<u32> {
        self.kmeans.clone()
    }

    pub fn our_sizes(&self) -> Vec<u32> {
        sizes(&self.ours)
    }

    pub fn kmeans_sizes(&self) -> Vec<u32> {
        sizes(&self.kmeans)
    }
}

fn sizes(assignments: &[u32]) -> Vec<u32> {
    let k = assignments.iter().map(|&a| a as usize + 1).max().unwrap_or(0);
    let mut out = vec![0; k];
    for &a in assignments {
        out[a as usize] += 1;
    }
    out
}

impl ClusterDemo {
    pub fn build(seed: u64, head: usize, clumps: usize, tail: usize, delta: usize) -> Result<Self, subtail::Error> {
        if clumps == 0 || tail == 0 || head <= tail {
            return Err(bad("need clumps >= 1 and head > tail >= 1"));
        }
        let mut rng = seeded_rng(seed, 0);
        let noise = Normal::new(0.0, 0.12).unwrap();
        // Clump j gets weight 2^j, so one clump holds about half the class.
        let total: f64 = (0..clumps).map(|j| 2f64.powi(j as i32)).sum();
        let centers: Vec<f64> = (0..clumps).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let mut angles = Vec::with_capacity(head + tail);
        for i in 0..head {
            let mut acc = 0.0;
            let pick = (i as f64 + 0.5) / head as f64 * total;
            let j = (0..clumps)
                .find(|&j| {
                    acc += 2f64.powi(j as i32);
                    pick < acc
                })
                .unwrap_or(clumps - 1);
            angles.push(centers[j] + noise.sample(&mut rng));
        }
        let tail_center = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..tail {
            angles.push(tail_center + 0.3 * noise.sample(&mut rng));
        }

        let features = Array2::from_shape_fn((angles.len(), 2), |(i, k)| if k == 0 { angles[i].cos() } else { angles[i].sin() });
        let labels: Vec<usize> = (0..head + tail).map(|i| usize::from(i >= head)).collect();
        let ds = LongTailDataset::new(features.clone(), labels, 2, None)?;
        let config = ClusterConfig {
            delta,
            iterations: 10,
            seed,
        };
        let model = cluster_dataset(features.view(), &ds, &config)?;
        let k = model.per_class_cluster_count[0];
        let head_rows = features.slice(ndarray::s![..head, ..]);
        let kmeans = baseline_kmeans(head_rows, k, config.iterations, seed)?;

        // Head subclasses come first in the global numbering.
        let ours = model.assignments[..head].iter().map(|&s| s as u32).collect();
        Ok(Self {
            xs: features.column(0).to_vec(),
            ys: features.column(1).to_vec(),
            head,
            capacity: model.capacity,
            ours,
            kmeans: kmeans.into_iter().map(|a| a as u32).collect(),
        })
    }
}

/// Concentration and class-level temperature for classes of unit vectors
/// in 3-D, each class scattered around its own direction.
#[wasm_bindgen]
pub struct Temperatures {
    phi: Vec<f64>,
    tau2: Vec<f64>,
}

#[wasm_bindgen]
impl Temperatures {
    /// `counts` must be non-increasing; `spreads` is the per-class
    /// Gaussian scatter before projecting back to the sphere.
    #[wasm_bindgen(constructor)]
    pub fn new(counts: Vec<u32>, spreads: Vec<f64>, alpha: f64, tau1: f64, seed: u64) -> Result<Temperatures, JsError> {
        Self::compute(&counts, &spreads, alpha, tau1, seed).map_err(js)
    }

    pub fn phi(&self) -> Vec<f64> {
        self.phi.clone()
    }

    pub fn tau2(&self) -> Vec<f64> {
        self.tau2.clone()
    }
}

impl Temperatures {
    pub fn compute(counts: &[u32], spreads: &[f64], alpha: f64, tau1: f64, seed: u64) -> Result<Self, subtail::Error> {
        if counts.len() != spreads.len() || counts.is_empty() {
            return Err(bad("need one spread per class"));
        }
        if spreads.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(bad("spreads must be finite and >= 0"));
        }
        let mut rng = seeded_rng(seed, 0);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let n: usize = counts.iter().map(|&c| c as usize).sum();
        let mut features = Array2::<f64>::zeros((n, 3));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (class, (&count, &spread)) in counts.iter().zip(spreads).enumerate() {
            let center = random_unit(&mut rng, &unit);
            for _ in 0..count {
                let mut v: Vec<f64> = center.iter().map(|c| c + spread * unit.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    v = center.clone();
                } else {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                for (k, x) in v.into_iter().enumerate() {
                    features[[row, k]] = x;
                }
                labels.push(class);
                row += 1;
            }
        }
        let ds = LongTailDataset::new(features.clone(), labels, counts.len(), None)?;
        let table = TemperatureTable::compute(features.view(), &ds, alpha, tau1)?;
        Ok(Self {
            phi: table.phi,
            tau2: table.tau2,
        })
    }
}

fn random_unit(rng: &mut impl Rng, unit: &Normal<f64>) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..3).map(|_| unit.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// SCL and SBCL trained on the same small long-tailed set with the same
/// budget, then compared with a linear probe on a balanced held-out set.
#[wasm_bindgen]
pub struct Comparison {
    scl_loss: Vec<f64>,
    sbcl_loss: Vec<f64>,
    scl_accuracy: SplitAccuracy,
    sbcl_accuracy: SplitAccuracy,
    class_counts: Vec<u32>,
}

/// Split thresholds for the demo data (head class of 120).
const DEMO_MANY: usize = 60;
const DEMO_FEW: usize = 15;

#[wasm_bindgen]
impl Comparison {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, epochs: usize, beta: f64) -> Result<Comparison, JsError> {
        Self::run(seed, epochs, beta).map_err(js)
    }

    /// Mean per-anchor loss per epoch.
    pub fn scl_loss(&self) -> Vec<f64> {
        self.scl_loss.clone()
    }

    pub fn sbcl_loss(&self) -> Vec<f64> {
        self.sbcl_loss.clone()
    }

    /// Top-1 accuracy for Many, Medium, Few, All; NaN for an empty split.
    pub fn scl_accuracy(&self) -> Vec<f64> {
        accuracy_row(&self.scl_accuracy)
    }

    pub fn sbcl_accuracy(&self) -> Vec<f64> {
        accuracy_row(&self.sbcl_accuracy)
    }

    pub fn class_counts(&self) -> Vec<u32> {
        self.class_counts.clone()
    }

    pub fn many_threshold() -> usize {
        DEMO_MANY
    }

    pub fn few_threshold() -> usize {
        DEMO_FEW
    }
}

fn accuracy_row(a: &SplitAccuracy) -> Vec<f64> {
    [a.many, a.medium, a.few, a.all].iter().map(|v| v.unwrap_or(f64::NAN)).collect()
}

impl Comparison {
    pub fn run(seed: u64, epochs: usize, beta: f64) -> Result<Self, subtail::Error> {
        if epochs < 2 {
            return Err(bad("need at least 2 epochs"));
        }
        let generator = GeneratorConfig {
            num_classes: 8,
            head_count: 120,
            imbalance_ratio: 20.0,
            input_dim: 8,
            seed,
            ..Default::default()
        };
        let (train_ds, test_ds) = generate_with_test(&generator, 30)?;
        let warmup = (epochs / 5).max(1);
        let sbcl_config = TrainConfig {
            total_epochs: epochs,
            warmup_epochs: warmup,
            update_interval: ((epochs - warmup) / 4).max(1),
            batch_size: 64,
            loss: LossConfig {
                beta,
                ..Default::default()
            },
            arch: Architecture::Mlp1 { hidden: 16 },
            embed_dim: 8,
            seed,
            ..Default::default()
        };
        let scl_config = TrainConfig {
            warmup_epochs: epochs,
            ..sbcl_config.clone()
        };
        let thresholds = SplitThresholds::new(DEMO_MANY, DEMO_FEW)?;
        let class_split = split_labels(train_ds.class_counts(), thresholds);
        let probe_config = ProbeConfig {
            epochs: 40,
            seed,
            ..Default::default()
        };

        let mut curves = Vec::new();
        let mut accuracies = Vec::new();
        for config in [&scl_config, &sbcl_config] {
            let outcome = train(&train_ds, config)?;
            let features = extract_features(&outcome.encoder, &train_ds)?;
            let probe = train_probe(features.view(), train_ds.labels(), train_ds.num_classes(), &probe_config)?;
            let test_features = extract_features(&outcome.encoder, &test_ds)?;
            accuracies.push(evaluate_probe_with_splits(&probe, test_features.view(), test_ds.labels(), &class_split)?);
            curves.push(outcome.log.iter().map(|r| r.loss).collect::<Vec<_>>());
        }
        let sbcl_loss = curves.pop().unwrap();
        let scl_loss = curves.pop().unwrap();
        Ok(Self {
            scl_loss,
            sbcl_loss,
            scl_accuracy: accuracies[0],
            sbcl_accuracy: accuracies[1],
            class_counts: train_ds.class_counts().iter().map(|&c| c as u32).collect(),
        })
    }
}
