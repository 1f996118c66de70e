mod support;

use ndarray::{array, Array2};
use proptest::prelude::*;
use subtail::losses::*;
use subtail::seeded_rng;
use support::*;

fn fixed_batch() -> (Array2<f64>, Array2<f64>) {
    let angles = [0.0f64, 0.4, 2.0, 2.5, 3.5];
    let z = Array2::from_shape_fn((5, 2), |(i, k)| if k == 0 { angles[i].cos() } else { angles[i].sin() });
    let za = Array2::from_shape_fn((5, 2), |(i, k)| {
        let a = angles[i] + 0.15;
        if k == 0 {
            a.cos()
        } else {
            a.sin()
        }
    });
    (z, za)
}

// Reference values computed with numpy from the same five points.
#[test]
fn scl_matches_frozen_reference() {
    let (z, za) = fixed_batch();
    let labels = [0, 0, 1, 1, 1];
    let batch = Batch::new(z.view(), za.view(), &labels, None).unwrap();
    for (tau, expected) in [(0.1, 11.938725493731503), (0.5, 5.586716885004843)] {
        let got = scl_loss(&batch, tau).unwrap().value;
        assert!(rel_err(got, expected, 1e-300) < 1e-12, "{got} vs {expected}");
    }
}

#[test]
fn sbcl_matches_frozen_reference() {
    let (z, za) = fixed_batch();
    let labels = [0, 0, 1, 1, 1];
    let subclasses = [0, 1, 2, 2, 3];
    let batch = Batch::new(z.view(), za.view(), &labels, Some(&subclasses)).unwrap();
    let temps = {
        let mut t = TemperatureTable::uniform(2, 0.1, 1.0);
        t.tau2 = vec![0.25, 0.3];
        t
    };
    let cfg = LossConfig {
        tau1: 0.1,
        beta: 0.2,
        k_positives: 4,
    };
    let report = sbcl_loss(&batch, &cfg, &temps).unwrap();
    let terms = report.terms.unwrap();
    assert!(rel_err(report.value, 3.6727617929105785, 1e-300) < 1e-12);
    assert!(rel_err(terms.subclass, 2.522235385643884, 1e-300) < 1e-12);
    assert!(rel_err(terms.class, 5.75263203633347, 1e-300) < 1e-12);
}

#[test]
fn temperatures_match_frozen_reference() {
    let (z, _) = fixed_batch();
    // Class ids follow decreasing size: the three-point class is class 0.
    let ds = subtail::LongTailDataset::new(z.clone(), vec![1, 1, 0, 0, 0], 2, None).unwrap();
    let table = TemperatureTable::compute(z.view(), &ds, 10.0, 0.1).unwrap();
    assert!(rel_err(table.phi[1], 0.07995042019466231, 1e-300) < 1e-12);
    assert!(rel_err(table.phi[0], 0.20806902329639307, 1e-300) < 1e-12);
    assert!(rel_err(table.tau2[1], 0.17422437088444673, 1e-300) < 1e-12);
    assert!(rel_err(table.tau2[0], 0.4241115098548067, 1e-300) < 1e-12);
}

#[test]
fn antipodal_pair_concentration() {
    let z = array![[1.0, 0.0], [-1.0, 0.0]];
    let ds = subtail::LongTailDataset::new(z.clone(), vec![0, 0], 1, None).unwrap();
    let (phi, centroids) = concentration(z.view(), &ds, 10.0).unwrap();
    assert!(rel_err(phi[0], 0.40242960438184466, 1e-300) < 1e-14);
    assert_eq!(centroids.row(0).to_vec(), vec![0.0, 0.0]);
}

#[test]
fn equal_concentration_gives_tau1_times_e() {
    for phi in [vec![0.3; 5], vec![1e-20; 3], vec![0.0; 2]] {
        let tau2 = dynamic_temperature(&phi, 0.1).unwrap();
        assert!(tau2.iter().all(|&t| t == 0.1 * std::f64::consts::E));
    }
}

#[test]
fn losses_match_loop_oracle_on_random_batches() {
    let mut rng = seeded_rng(11, 0);
    for _ in 0..200 {
        use rand::Rng;
        let n = rng.random_range(2..=10);
        let d = rng.random_range(2..=6);
        let z = unit_rows(&mut rng, n, d);
        let za = unit_rows(&mut rng, n, d);
        let classes = rng.random_range(1..=4);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let s: Vec<usize> = y.iter().map(|&c| c * 3 + rng.random_range(0..3)).collect();
        let tau1 = rng.random_range(0.05..1.0);
        let batch = Batch::new(z.view(), za.view(), &y, Some(&s)).unwrap();

        let got = scl_loss(&batch, tau1).unwrap().value;
        assert!(rel_err(got, scl(z.view(), za.view(), &y, tau1), 1e-300) < 1e-10);

        let k = rng.random_range(1..=4);
        let chosen = sample_k_positives(&batch, k, &mut rng);
        let got = kcl_loss_with_positives(&batch, tau1, &chosen).unwrap().value;
        assert!(rel_err(got, kcl(z.view(), za.view(), &chosen, tau1), 1e-300) < 1e-10);

        let tau2: Vec<f64> = (0..classes).map(|_| tau1 * rng.random_range(1.0..3.0)).collect();
        let mut temps = TemperatureTable::uniform(classes, tau1, 1.0);
        temps.tau2 = tau2.clone();
        let beta = rng.random_range(0.0..1.0);
        let cfg = LossConfig { tau1, beta, k_positives: k };
        let report = sbcl_loss(&batch, &cfg, &temps).unwrap();
        let (total, t1, t2) = sbcl(z.view(), za.view(), &y, &s, tau1, &tau2, beta);
        assert!(rel_err(report.value, total, 1e-300) < 1e-10);
        let terms = report.terms.unwrap();
        assert!(rel_err(terms.subclass, t1, 1e-300) < 1e-10);
        assert!(rel_err(terms.class, t2, 1e-300) < 1e-10);
    }
}

#[test]
fn kcl_uses_all_positives_when_fewer_than_k() {
    let mut rng = seeded_rng(2, 0);
    let z = unit_rows(&mut rng, 6, 3);
    let za = unit_rows(&mut rng, 6, 3);
    let y = [0, 0, 1, 1, 1, 2];
    let batch = Batch::new(z.view(), za.view(), &y, None).unwrap();
    let chosen = sample_k_positives(&batch, 5, &mut rng);
    assert_eq!(chosen, vec![vec![1], vec![0], vec![3, 4], vec![2, 4], vec![2, 3], vec![]]);
    // With every positive kept, KCL coincides with SCL.
    let k = kcl_loss(&batch, 0.2, 5, &mut rng).unwrap().value;
    let s = scl_loss(&batch, 0.2).unwrap().value;
    assert!(rel_err(k, s, 1e-300) < 1e-14);
}

#[test]
fn kcl_sampling_is_seeded() {
    let mut rng = seeded_rng(4, 0);
    let z = unit_rows(&mut rng, 10, 3);
    let y = [0; 10];
    let batch = Batch::new(z.view(), z.view(), &y, None).unwrap();
    let a = sample_k_positives(&batch, 3, &mut seeded_rng(9, 1));
    let b = sample_k_positives(&batch, 3, &mut seeded_rng(9, 1));
    assert_eq!(a, b);
    assert!(a.iter().enumerate().all(|(i, p)| p.len() == 3 && !p.contains(&i)));
}

#[test]
fn encoder_composed_gradients_match_finite_differences() {
    let mut rng = seeded_rng(21, 0);
    for kind in 0..3 {
        for _ in 0..15 {
            let case = random_grad_case(&mut rng, kind);
            let err = case.max_fd_error(1e-5, FD_FLOOR);
            assert!(err < 1e-5, "loss kind {kind}: relative error {err}");
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let z = array![[1.0, 0.0], [0.0, 1.0]];
    let y = [0, 1];
    assert!(matches!(
        Batch::new(z.view(), (&z * 2.0).view(), &y, None),
        Err(LossError::NotUnitNorm { view: "augmented", row: 0, .. })
    ));
    assert!(Batch::new(z.view(), z.view(), &[0], None).is_err());
    let batch = Batch::new(z.view(), z.view(), &y, None).unwrap();
    assert!(matches!(scl_loss(&batch, 0.0), Err(LossError::NonPositiveTemperature(_))));
    let cfg = LossConfig::default();
    assert!(matches!(
        sbcl_loss(&batch, &cfg, &TemperatureTable::uniform(2, 0.1, 0.2)),
        Err(LossError::MissingSubclasses)
    ));
    let sub = [0, 1];
    let batch = Batch::new(z.view(), z.view(), &y, Some(&sub)).unwrap();
    assert!(matches!(
        sbcl_loss(&batch, &cfg, &TemperatureTable::uniform(1, 0.1, 0.2)),
        Err(LossError::MissingTemperature { class: 1 })
    ));
}

type RawBatch = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<usize>, f64);

fn batch_strategy() -> impl Strategy<Value = RawBatch> {
    (2usize..9, 2usize..5).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(0usize..3, n),
            prop::collection::vec(0usize..2, n),
            0.05f64..1.0,
        )
    })
}

fn normalized(rows: &[Vec<f64>]) -> Option<Array2<f64>> {
    let d = rows[0].len();
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-3 {
            return None;
        }
        for k in 0..d {
            m[[i, k]] = r[k] / norm;
        }
    }
    Some(m)
}

proptest! {
    #[test]
    fn losses_are_non_negative_and_finite((a, b, y, s, tau) in batch_strategy()) {
        let (Some(z), Some(za)) = (normalized(&a), normalized(&b)) else { return Ok(()); };
        let s: Vec<usize> = y.iter().zip(&s).map(|(c, k)| c * 2 + k).collect();
        let batch = Batch::new(z.view(), za.view(), &y, Some(&s)).unwrap();
        let scl = scl_loss(&batch, tau).unwrap();
        prop_assert!(scl.value >= 0.0 && scl.value.is_finite());
        let temps = TemperatureTable::uniform(3, tau, tau * 2.0);
        let cfg = LossConfig { tau1: tau, beta: 0.2, k_positives: 4 };
        let sb = sbcl_loss(&batch, &cfg, &temps).unwrap();
        prop_assert!(sb.value >= 0.0 && sb.value.is_finite());
        prop_assert!(sb.grad_anchors.iter().chain(sb.grad_augmented.iter()).all(|g| g.is_finite()));
    }

    #[test]
    fn scl_is_invariant_to_batch_order((a, b, y, _s, tau) in batch_strategy(), shift in 1usize..8) {
        let (Some(z), Some(za)) = (normalized(&a), normalized(&b)) else { return Ok(()); };
        let n = y.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let zp = z.select(ndarray::Axis(0), &perm);
        let zap = za.select(ndarray::Axis(0), &perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let l1 = scl_loss(&Batch::new(z.view(), za.view(), &y, None).unwrap(), tau).unwrap();
        let l2 = scl_loss(&Batch::new(zp.view(), zap.view(), &yp, None).unwrap(), tau).unwrap();
        prop_assert!(rel_err(l1.value, l2.value, 1e-12) < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..z.ncols() {
                prop_assert!((l1.grad_anchors[[i, c]] - l2.grad_anchors[[k, c]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sbcl_with_zero_beta_is_the_subclass_term((a, b, y, s, tau) in batch_strategy()) {
        let (Some(z), Some(za)) = (normalized(&a), normalized(&b)) else { return Ok(()); };
        let s: Vec<usize> = y.iter().zip(&s).map(|(c, k)| c * 2 + k).collect();
        let batch = Batch::new(z.view(), za.view(), &y, Some(&s)).unwrap();
        let cfg = LossConfig { tau1: tau, beta: 0.0, k_positives: 4 };
        let report = sbcl_loss(&batch, &cfg, &TemperatureTable::uniform(3, tau, 3.0 * tau)).unwrap();
        prop_assert_eq!(report.value, report.terms.unwrap().subclass);
    }

    #[test]
    fn dynamic_temperature_exceeds_tau1(phi in prop::collection::vec(0.0f64..5.0, 1..30), tau1 in 1e-3f64..2.0) {
        let tau2 = dynamic_temperature(&phi, tau1).unwrap();
        prop_assert!(tau2.iter().all(|&t| t > tau1 && t.is_finite()));
        // Larger concentration never gives a smaller temperature.
        for i in 0..phi.len() {
            for j in 0..phi.len() {
                if phi[i] < phi[j] {
                    prop_assert!(tau2[i] <= tau2[j]);
                }
            }
        }
    }
}
