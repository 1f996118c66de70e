//! Subcommand flags. The same structs are stored in run manifests, so every
//! field is a resolved value once [`Command::resolve`] has run.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use subtail::SplitThresholds;

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic long-tailed dataset.
    Gen(GenArgs),
    /// Train an encoder: warm-up, then subclass-balancing training.
    Train(TrainArgs),
    /// Cluster a dataset's features into capacity-limited subclasses.
    Cluster(ClusterArgs),
    /// Distance diagnostics, subclass recovery and linear-probe accuracy.
    Eval(EvalArgs),
}

impl Command {
    /// Fills in defaults that depend on other flags.
    pub fn resolve(&mut self) {
        match self {
            Command::Gen(a) => {
                a.manifest_out.get_or_insert_with(|| sibling(&a.output, ".manifest.json"));
            }
            Command::Train(a) => {
                a.warmup_epochs.get_or_insert(a.epochs / 6);
                a.log.get_or_insert_with(|| a.output.with_file_name("train.csv"));
                a.manifest_out.get_or_insert_with(|| sibling(&a.output, ".manifest.json"));
            }
            Command::Cluster(a) => {
                a.stats.get_or_insert_with(|| a.output.with_file_name("cluster_stats.csv"));
                a.manifest_out.get_or_insert_with(|| sibling(&a.output, ".manifest.json"));
            }
            Command::Eval(a) => {
                a.manifest_out.get_or_insert_with(|| a.out_dir.join("manifest.json"));
            }
        }
    }

    /// Files the command reads.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Gen(_) => Vec::new(),
            Command::Train(a) => vec![&a.data],
            Command::Cluster(a) => vec![&a.data, &a.checkpoint],
            Command::Eval(a) => {
                let mut v = vec![a.data.as_path(), a.checkpoint.as_path()];
                v.extend(a.test.as_deref());
                v
            }
        }
    }

    /// Files the command writes, apart from training snapshots.
    pub fn outputs(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.manifest_path().map(Path::to_path_buf).into_iter().collect();
        match self {
            Command::Gen(a) => {
                v.push(a.output.clone());
                v.extend(a.test_output.clone());
            }
            Command::Train(a) => {
                v.push(a.output.clone());
                v.extend(a.log.clone());
            }
            Command::Cluster(a) => {
                v.push(a.output.clone());
                v.extend(a.stats.clone());
            }
            Command::Eval(a) => {
                for name in ["distances.csv", "accuracy.csv", "recovery.csv"] {
                    v.push(a.out_dir.join(name));
                }
            }
        }
        v
    }

    pub fn manifest_path(&self) -> Option<&Path> {
        match self {
            Command::Gen(a) => a.manifest_out.as_deref(),
            Command::Train(a) => a.manifest_out.as_deref(),
            Command::Cluster(a) => a.manifest_out.as_deref(),
            Command::Eval(a) => a.manifest_out.as_deref(),
        }
    }
}

/// `dir/name.ext` -> `dir/name.ext<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenArgs {
    /// Number of classes C.
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    /// Samples in the largest class.
    #[arg(long, default_value_t = 500)]
    pub head: usize,
    /// Imbalance ratio n_1 / n_C.
    #[arg(long, default_value_t = 50.0)]
    pub ir: f64,
    /// Mixture components per class above `--single-max` samples.
    #[arg(long, default_value_t = 3)]
    pub subclusters: usize,
    /// Classes with at most this many samples get a single component.
    #[arg(long, default_value_t = 10)]
    pub single_max: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4.0)]
    pub class_radius: f64,
    #[arg(long, default_value_t = 2.0)]
    pub subcluster_radius: f64,
    #[arg(long, default_value_t = 0.6)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset path; `.bin` selects the binary format.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write a balanced held-out set drawn from the same mixture.
    #[arg(long)]
    pub test_output: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    /// Manifest path [default: <output>.manifest.json]
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupLossArg {
    Scl,
    Kcl,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchArg {
    Linear,
    Mlp1,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub data: PathBuf,
    /// Final checkpoint.
    #[arg(short, long, default_value = "model.enc")]
    pub output: PathBuf,
    /// Per-epoch log [default: train.csv next to the checkpoint]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Warm-up epochs T0 [default: epochs / 6]
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Total epochs T.
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Epochs between re-clustering, counted from the end of warm-up.
    #[arg(long, default_value_t = 10)]
    pub interval: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = WarmupLossArg::Scl)]
    pub warmup_loss: WarmupLossArg,
    #[arg(long, default_value_t = 0.1)]
    pub tau1: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    /// Positives per anchor for the KCL warm-up.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub delta: usize,
    #[arg(long, default_value_t = 10)]
    pub cluster_iters: usize,
    #[arg(long, default_value_t = 10.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = ArchArg::Mlp1)]
    pub arch: ArchArg,
    /// Hidden width for `mlp1`.
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Standard deviation of the Gaussian input jitter used as augmentation.
    #[arg(long, default_value_t = 0.3)]
    pub aug_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the extra checkpoints written at every update epoch.
    #[arg(long)]
    pub no_snapshots: bool,
    /// Manifest path [default: <output>.manifest.json]
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineArg {
    Kmeans,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArgs {
    #[arg(short, long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub checkpoint: PathBuf,
    /// Assignment and center CSV.
    #[arg(short, long, default_value = "clusters.csv")]
    pub output: PathBuf,
    /// Size statistics [default: cluster_stats.csv next to the output]
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub delta: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add a comparison row from an unconstrained baseline.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Manifest path [default: <output>.manifest.json]
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Training dataset (defines the splits and trains the probe).
    #[arg(short, long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub checkpoint: PathBuf,
    /// Held-out dataset for probe accuracy; the training set is used if absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Directory for distances.csv, accuracy.csv and recovery.csv.
    #[arg(short, long, default_value = "eval")]
    pub out_dir: PathBuf,
    /// Split thresholds `many,few`: Many is > many samples, Few is < few.
    #[arg(long, default_value = "100,20", value_parser = parse_thresholds)]
    pub thresholds: String,
    #[arg(long, default_value_t = 10)]
    pub delta: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 100)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = 64)]
    pub probe_batch: usize,
    /// Subsample Many/Medium anchors to the Few count in the distance report.
    #[arg(long)]
    pub subsample_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest path [default: <out-dir>/manifest.json]
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
}

fn parse_thresholds(s: &str) -> Result<String, String> {
    thresholds_from(s).map(|_| s.to_string())
}

pub fn thresholds_from(s: &str) -> Result<SplitThresholds, String> {
    let (many, few) = s.split_once(',').ok_or("expected `many,few`, e.g. 100,20")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    SplitThresholds::new(parse(many)?, parse(few)?).map_err(|e| e.to_string())
}
