use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use subtail::clustering::{baseline_sizes, cluster_dataset, cluster_stats, size_stats, ClusterStats};
use subtail::dataset::{generate, generate_with_test, split_labels};
use subtail::encoder::{AugmentationConfig, OptimizerConfig};
use subtail::metrics::{
    distance_report, evaluate_probe_with_splits, subclass_recovery, train_probe, write_recovery_csv, DistanceOptions,
    ProbeConfig,
};
use subtail::trainer::{extract_features, train_with_observer, write_log_csv, TrainEvent, WarmupLoss};
use subtail::{
    format_float, Architecture, ClusterConfig, Encoder, GeneratorConfig, LongTailDataset, LossConfig, TrainConfig,
};

use crate::args::{thresholds_from, ArchArg, ClusterArgs, Command, EvalArgs, GenArgs, TrainArgs, WarmupLossArg};
use crate::outputs::{Outputs, RunManifest};

/// Runs one resolved command, writing its manifest first.
pub fn run(command: &Command) -> Result<()> {
    check_paths(command)?;
    let mut outputs = Outputs::default();
    if let Some(path) = command.manifest_path() {
        let manifest = RunManifest::single(command.clone());
        outputs.write_with(path, |out| out.write_all(manifest.to_json().as_bytes()))?;
    }
    match command {
        Command::Gen(a) => gen(a, &mut outputs)?,
        Command::Train(a) => train(a, &mut outputs)?,
        Command::Cluster(a) => cluster(a, &mut outputs)?,
        Command::Eval(a) => eval(a, &mut outputs)?,
    }
    outputs.commit();
    Ok(())
}

/// Refuses to run when two outputs collide or an output would overwrite an input.
fn check_paths(command: &Command) -> Result<()> {
    let outputs = command.outputs();
    for (i, out) in outputs.iter().enumerate() {
        if outputs[..i].contains(out) {
            bail!("output path {} is used twice", out.display());
        }
        if command.inputs().iter().any(|input| same_file(input, out)) {
            bail!("output {} would overwrite an input", out.display());
        }
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn load_dataset(path: &Path) -> Result<LongTailDataset> {
    LongTailDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    Encoder::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen(a: &GenArgs, outputs: &mut Outputs) -> Result<()> {
    let config = GeneratorConfig {
        num_classes: a.classes,
        head_count: a.head,
        imbalance_ratio: a.ir,
        subclusters_per_class: a.subclusters,
        single_component_max: a.single_max,
        input_dim: a.dim,
        class_radius: a.class_radius,
        subcluster_radius: a.subcluster_radius,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let train = match &a.test_output {
        Some(test_path) => {
            let (train, test) = generate_with_test(&config, a.test_per_class)?;
            test.save(outputs.claim(test_path)?)
                .with_context(|| format!("writing {}", test_path.display()))?;
            train
        }
        None => generate(&config)?,
    };
    train
        .save(outputs.claim(&a.output)?)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "{}: n={} classes={} head={} tail={} imbalance={}",
        a.output.display(),
        train.len(),
        train.num_classes(),
        train.class_counts()[0],
        train.tail_count(),
        train.imbalance_ratio()
    );
    Ok(())
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        warmup_epochs: a.warmup_epochs.unwrap_or(a.epochs / 6),
        total_epochs: a.epochs,
        update_interval: a.interval,
        batch_size: a.batch,
        warmup_loss: match a.warmup_loss {
            WarmupLossArg::Scl => WarmupLoss::Scl,
            WarmupLossArg::Kcl => WarmupLoss::Kcl,
        },
        loss: LossConfig {
            tau1: a.tau1,
            beta: a.beta,
            k_positives: a.k,
        },
        cluster: ClusterConfig {
            delta: a.delta,
            iterations: a.cluster_iters,
            seed: a.seed,
        },
        alpha: a.alpha,
        optimizer: OptimizerConfig {
            base_lr: a.lr,
            momentum: a.momentum,
        },
        augmentation: AugmentationConfig { sigma: a.aug_sigma },
        arch: match a.arch {
            ArchArg::Linear => Architecture::Linear,
            ArchArg::Mlp1 => Architecture::Mlp1 { hidden: a.hidden },
        },
        embed_dim: a.embed_dim,
        seed: a.seed,
    }
}

/// `dir/model.enc` -> `dir/model.epoch0010.enc`
fn snapshot_path(output: &Path, epoch: usize) -> std::path::PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match output.extension() {
        Some(ext) => format!("{stem}.epoch{epoch:04}.{}", ext.to_string_lossy()),
        None => format!("{stem}.epoch{epoch:04}"),
    };
    output.with_file_name(name)
}

fn train(a: &TrainArgs, outputs: &mut Outputs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let config = train_config(a);
    let mut snapshot_error = None;
    let outcome = train_with_observer(&ds, &config, |event| {
        if let TrainEvent::Update { epoch, encoder, .. } = event {
            if a.no_snapshots || snapshot_error.is_some() {
                return;
            }
            let path = snapshot_path(&a.output, *epoch);
            let written = outputs
                .claim(&path)
                .and_then(|p| encoder.save(&p).with_context(|| format!("writing {}", p.display())));
            if let Err(e) = written {
                snapshot_error = Some(e);
            }
        }
    })
    .context("training failed")?;
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    outcome
        .encoder
        .save(outputs.claim(&a.output)?)
        .with_context(|| format!("writing {}", a.output.display()))?;
    let log_path = a.log.clone().unwrap_or_else(|| a.output.with_file_name("train.csv"));
    outputs.write_with(&log_path, |out| write_log_csv(&outcome.log, out))?;
    match outcome.log.last() {
        Some(last) => println!(
            "{}: {} epochs, final loss {:.6}, {} cluster updates",
            a.output.display(),
            outcome.log.len(),
            last.loss,
            outcome.updates.len()
        ),
        None => println!("{}: no epochs run, wrote the initial encoder", a.output.display()),
    }
    Ok(())
}

const STATS_HEADER: &str = "method,max_size,min_size,mean_size,std_size,size_imbalance_ratio,subclasses";

fn stats_row(method: &str, s: &ClusterStats) -> String {
    format!(
        "{method},{},{},{},{},{},{}",
        s.max_size,
        s.min_size,
        format_float(s.mean_size),
        format_float(s.std_size),
        format_float(s.size_imbalance_ratio),
        s.count
    )
}

fn cluster(a: &ClusterArgs, outputs: &mut Outputs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let encoder = load_encoder(&a.checkpoint)?;
    let features = extract_features(&encoder, &ds)?;
    let config = ClusterConfig {
        delta: a.delta,
        iterations: a.iters,
        seed: a.seed,
    };
    let model = cluster_dataset(features.view(), &ds, &config)?;
    let ours = cluster_stats(&model, false);
    let baseline = match (a.baseline, &ours) {
        (Some(_), Some(_)) => size_stats(&baseline_sizes(features.view(), &ds, &model, &config)?),
        _ => None,
    };

    outputs.write_with(&a.output, |out| model.write_csv(out).map_err(std::io::Error::other))?;
    let stats_path = a.stats.clone().unwrap_or_else(|| a.output.with_file_name("cluster_stats.csv"));
    outputs.write_with(&stats_path, |out| {
        writeln!(out, "{STATS_HEADER}")?;
        if let Some(s) = &ours {
            writeln!(out, "{}", stats_row("capacity", s))?;
        }
        if let Some(s) = &baseline {
            writeln!(out, "{}", stats_row("kmeans", s))?;
        }
        Ok(())
    })?;

    println!("{}: {} subclasses, capacity {}", a.output.display(), model.num_subclasses(), model.capacity);
    match ours {
        Some(s) => println!(
            "  capacity: max {} min {} mean {:.2} std {:.2} ratio {:.2}",
            s.max_size, s.min_size, s.mean_size, s.std_size, s.size_imbalance_ratio
        ),
        None => eprintln!("note: no class exceeds the capacity of {}; the stats section is empty", model.capacity),
    }
    if let Some(s) = baseline {
        println!(
            "  kmeans:   max {} min {} mean {:.2} std {:.2} ratio {:.2}",
            s.max_size, s.min_size, s.mean_size, s.std_size, s.size_imbalance_ratio
        );
    }
    Ok(())
}

fn eval(a: &EvalArgs, outputs: &mut Outputs) -> Result<()> {
    let thresholds = thresholds_from(&a.thresholds).map_err(anyhow::Error::msg)?;
    let ds = load_dataset(&a.data)?;
    let encoder = load_encoder(&a.checkpoint)?;
    let features = extract_features(&encoder, &ds)?;
    let config = ClusterConfig {
        delta: a.delta,
        iterations: a.iters,
        seed: a.seed,
    };
    let model = cluster_dataset(features.view(), &ds, &config)?;
    let options = DistanceOptions {
        thresholds,
        subsample_seed: a.subsample_seed,
    };
    let distances = distance_report(features.view(), &ds, &model, &options)?;

    let probe_config = ProbeConfig {
        epochs: a.probe_epochs,
        lr: a.probe_lr,
        batch_size: a.probe_batch,
        seed: a.seed,
    };
    let probe = train_probe(features.view(), ds.labels(), ds.num_classes(), &probe_config)?;
    let class_split = split_labels(ds.class_counts(), thresholds);
    let accuracy = match &a.test {
        Some(path) => {
            let test = load_dataset(path)?;
            if test.num_classes() != ds.num_classes() {
                bail!(
                    "test set has {} classes, training set has {}",
                    test.num_classes(),
                    ds.num_classes()
                );
            }
            let test_features = extract_features(&encoder, &test)?;
            evaluate_probe_with_splits(&probe, test_features.view(), test.labels(), &class_split)?
        }
        None => evaluate_probe_with_splits(&probe, features.view(), ds.labels(), &class_split)?,
    };

    outputs.write_with(&a.out_dir.join("distances.csv"), |out| distances.write_csv(out))?;
    outputs.write_with(&a.out_dir.join("accuracy.csv"), |out| accuracy.write_csv(out))?;
    if ds.true_subclusters().is_some() {
        let recovery = subclass_recovery(&model, &ds)?;
        outputs.write_with(&a.out_dir.join("recovery.csv"), |out| write_recovery_csv(&recovery, out))?;
    }

    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: top-1 many {} medium {} few {} all {}",
        a.out_dir.display(),
        show(accuracy.many),
        show(accuracy.medium),
        show(accuracy.few),
        show(accuracy.all)
    );
    Ok(())
}
