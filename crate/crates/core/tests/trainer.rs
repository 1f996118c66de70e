use ndarray::{Array1, Array2};
use subtail::dataset::{generate, GeneratorConfig};
use subtail::encoder::Dense;
use subtail::trainer::*;
use subtail::{Architecture, ClusterConfig, Encoder, LongTailDataset};

fn small_ds() -> LongTailDataset {
    generate(&GeneratorConfig {
        num_classes: 4,
        head_count: 60,
        imbalance_ratio: 6.0,
        input_dim: 5,
        seed: 2,
        ..Default::default()
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        warmup_epochs: 2,
        total_epochs: 7,
        update_interval: 2,
        batch_size: 24,
        cluster: ClusterConfig {
            delta: 10,
            iterations: 3,
            seed: 0,
        },
        arch: Architecture::Mlp1 { hidden: 8 },
        embed_dim: 4,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn identity_encoder_passes_normalized_inputs_through() {
    let mut inputs = Array2::from_shape_fn((6, 3), |(i, k)| (i * 3 + k) as f64 - 7.5);
    for mut row in inputs.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let ds = LongTailDataset::new(inputs.clone(), vec![0, 0, 0, 1, 1, 2], 3, None).unwrap();
    let identity = Dense {
        weight: Array2::eye(3),
        bias: Array1::zeros(3),
    };
    let enc = Encoder::from_layers(Architecture::Linear, vec![identity]).unwrap();
    let features = extract_features(&enc, &ds).unwrap();
    assert_eq!(features.nrows(), ds.len());
    for (a, b) in features.iter().zip(inputs.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(features, extract_features(&enc, &ds).unwrap());
}

#[test]
fn extraction_rejects_wrong_dimension() {
    let ds = small_ds();
    let enc = Encoder::new(Architecture::Linear, 3, 2, 0).unwrap();
    assert!(extract_features(&enc, &ds).is_err());
}

#[test]
fn updates_use_the_latest_clusters() {
    let ds = small_ds();
    let cfg = small_cfg();
    let mut events = Vec::new();
    let out = train_with_observer(&ds, &cfg, |e| match e {
        TrainEvent::Update { epoch, encoder, clusters, .. } => {
            // The clusters handed out are computed from the encoder as it stands.
            let f = extract_features(encoder, &ds).unwrap();
            let fresh = subtail::clustering::cluster_dataset(f.view(), &ds, &cfg.cluster).unwrap();
            assert_eq!(&fresh, *clusters);
            events.push(format!("update {epoch}"));
        }
        TrainEvent::EpochEnd { record, .. } => events.push(format!("end {}", record.epoch)),
    })
    .unwrap();
    assert_eq!(
        events,
        ["end 0", "end 1", "update 2", "end 2", "end 3", "update 4", "end 4", "end 5", "update 6", "end 6"]
    );
    assert_eq!(out.updates.last().unwrap().epoch, 6);
    for u in &out.updates {
        assert!(u.temperatures.tau2.iter().all(|&t| t > cfg.loss.tau1));
    }
}

#[test]
fn warmup_ignores_cluster_settings() {
    let ds = small_ds();
    let a = TrainConfig {
        warmup_epochs: 4,
        total_epochs: 4,
        ..small_cfg()
    };
    let b = TrainConfig {
        cluster: ClusterConfig {
            delta: 3,
            iterations: 7,
            seed: 42,
        },
        loss: subtail::LossConfig {
            beta: 0.9,
            ..a.loss
        },
        ..a.clone()
    };
    assert_eq!(train(&ds, &a).unwrap().encoder, train(&ds, &b).unwrap().encoder);
}

#[test]
fn checkpoints_are_bit_identical_across_runs() {
    let ds = small_ds();
    let cfg = small_cfg();
    let mut first = Vec::new();
    train(&ds, &cfg).unwrap().encoder.write_checkpoint(&mut first).unwrap();
    let mut second = Vec::new();
    train(&ds, &cfg).unwrap().encoder.write_checkpoint(&mut second).unwrap();
    assert_eq!(first, second);
}
