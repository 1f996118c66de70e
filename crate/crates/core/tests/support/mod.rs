//! Straight-line reference implementations used by the integration and
//! acceptance tests. Nothing here shares code with the library: each formula
//! is a literal loop over the sets it sums over.

#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

/// A contrast candidate for anchor `i`: another anchor `j` or the anchor's
/// own augmented view.
#[derive(Clone, Copy, PartialEq)]
pub enum Cand {
    A(usize),
    Aug,
}

fn vector<'a>(z: &'a ArrayView2<'_, f64>, za: &'a ArrayView2<'_, f64>, i: usize, c: Cand) -> Vec<f64> {
    match c {
        Cand::A(j) => z.row(j).to_vec(),
        Cand::Aug => za.row(i).to_vec(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-(1/|P|) sum_{p in P} log( exp(z_i.p/tau) / sum_{a in V} exp(z_i.a/tau) )`
pub fn term(z: &ArrayView2<'_, f64>, za: &ArrayView2<'_, f64>, i: usize, pos: &[Cand], all: &[Cand], tau: f64) -> f64 {
    let zi = z.row(i).to_vec();
    let mut denom = 0.0;
    for &a in all {
        denom += (dot(&zi, &vector(z, za, i, a)) / tau).exp();
    }
    let mut total = 0.0;
    for &p in pos {
        let num = (dot(&zi, &vector(z, za, i, p)) / tau).exp();
        total += (num / denom).ln();
    }
    -total / pos.len() as f64
}

fn others(n: usize, i: usize) -> Vec<Cand> {
    let mut v: Vec<Cand> = (0..n).filter(|&j| j != i).map(Cand::A).collect();
    v.push(Cand::Aug);
    v
}

pub fn scl(z: ArrayView2<'_, f64>, za: ArrayView2<'_, f64>, y: &[usize], tau: f64) -> f64 {
    let n = y.len();
    let mut loss = 0.0;
    for i in 0..n {
        let mut pos: Vec<Cand> = (0..n).filter(|&j| j != i && y[j] == y[i]).map(Cand::A).collect();
        pos.push(Cand::Aug);
        loss += term(&z, &za, i, &pos, &others(n, i), tau);
    }
    loss
}

pub fn kcl(z: ArrayView2<'_, f64>, za: ArrayView2<'_, f64>, chosen: &[Vec<usize>], tau: f64) -> f64 {
    let n = chosen.len();
    let mut loss = 0.0;
    for i in 0..n {
        let mut pos: Vec<Cand> = chosen[i].iter().map(|&j| Cand::A(j)).collect();
        pos.push(Cand::Aug);
        loss += term(&z, &za, i, &pos, &others(n, i), tau);
    }
    loss
}

/// Returns (total, subclass term, class term).
pub fn sbcl(
    z: ArrayView2<'_, f64>,
    za: ArrayView2<'_, f64>,
    y: &[usize],
    s: &[usize],
    tau1: f64,
    tau2: &[f64],
    beta: f64,
) -> (f64, f64, f64) {
    let n = y.len();
    let (mut t1, mut t2) = (0.0, 0.0);
    for i in 0..n {
        let same_sub = |j: usize| y[j] == y[i] && s[j] == s[i];
        let mut m: Vec<Cand> = (0..n).filter(|&j| j != i && same_sub(j)).map(Cand::A).collect();
        m.push(Cand::Aug);
        t1 += term(&z, &za, i, &m, &others(n, i), tau1);

        let mut p: Vec<Cand> = (0..n)
            .filter(|&j| j != i && y[j] == y[i] && !same_sub(j))
            .map(Cand::A)
            .collect();
        p.push(Cand::Aug);
        let mut v: Vec<Cand> = (0..n).filter(|&j| j != i && !same_sub(j)).map(Cand::A).collect();
        v.push(Cand::Aug);
        t2 += term(&z, &za, i, &p, &v, tau2[y[i]]);
    }
    (t1 + beta * t2, t1, t2)
}

/// Concentration of one class given its member rows.
pub fn phi(rows: &[Vec<f64>], alpha: f64) -> f64 {
    let n = rows.len();
    let d = rows[0].len();
    let mut t = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            t[k] += r[k] / n as f64;
        }
    }
    let mut total = 0.0;
    for r in rows {
        let mut sq = 0.0;
        for k in 0..d {
            sq += (r[k] - t[k]) * (r[k] - t[k]);
        }
        total += sq.sqrt();
    }
    total / (n as f64 * (n as f64 + alpha).ln())
}

/// Adjusted Rand index by explicit pair counting.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            total += 1.0;
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / total;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Random unit rows.
pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, d));
    for mut row in m.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-3 {
                row /= norm;
                break;
            }
        }
    }
    m
}

/// Dataset with random class sizes (sorted decreasing) and unit-row features.
pub fn random_dataset(rng: &mut impl Rng, classes: usize, max_count: usize, d: usize) -> (subtail::LongTailDataset, Array2<f64>) {
    let mut counts: Vec<usize> = (0..classes).map(|_| rng.random_range(1..=max_count)).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let x = unit_rows(rng, labels.len(), d);
    let ds = subtail::LongTailDataset::new(x.clone(), labels, classes, None).unwrap();
    (ds, x)
}

pub fn random_matrix(rng: &mut impl Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut impl Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-scale..scale))
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Loss variants checked against finite differences.
pub enum GradLoss {
    Scl { tau: f64 },
    Kcl { tau: f64, positives: Vec<Vec<usize>> },
    Sbcl {
        subclasses: Vec<usize>,
        config: subtail::LossConfig,
        temps: subtail::TemperatureTable,
    },
}

/// One randomized gradient-check problem.
pub struct GradCase {
    pub encoder: subtail::Encoder,
    pub inputs: Array2<f64>,
    pub augmented: Array2<f64>,
    pub labels: Vec<usize>,
    pub loss: GradLoss,
}

impl GradCase {
    /// Loss and gradient w.r.t. the flattened encoder parameters.
    pub fn loss_and_grad(&self, encoder: &subtail::Encoder) -> (f64, Vec<f64>) {
        use subtail::losses::{kcl_loss_with_positives, sbcl_loss, scl_loss};
        let (z, cache) = encoder.forward(self.inputs.view()).unwrap();
        let (za, cache_a) = encoder.forward(self.augmented.view()).unwrap();
        let subclasses = match &self.loss {
            GradLoss::Sbcl { subclasses, .. } => Some(subclasses.as_slice()),
            _ => None,
        };
        let batch = subtail::Batch::new(z.view(), za.view(), &self.labels, subclasses).unwrap();
        let report = match &self.loss {
            GradLoss::Scl { tau } => scl_loss(&batch, *tau).unwrap(),
            GradLoss::Kcl { tau, positives } => kcl_loss_with_positives(&batch, *tau, positives).unwrap(),
            GradLoss::Sbcl { config, temps, .. } => sbcl_loss(&batch, config, temps).unwrap(),
        };
        let mut grads = encoder.backward(&cache, report.grad_anchors.view()).unwrap();
        grads.accumulate(&encoder.backward(&cache_a, report.grad_augmented.view()).unwrap());
        (report.value, grads.flatten())
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over all parameters.
    pub fn max_fd_error(&self, h: f64, floor: f64) -> f64 {
        let (_, analytic) = self.loss_and_grad(&self.encoder);
        let base = self.encoder.parameters();
        let mut probe = self.encoder.clone();
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + h;
            probe.set_parameters(&p).unwrap();
            let plus = self.loss_and_grad(&probe).0;
            p[k] = base[k] - h;
            probe.set_parameters(&p).unwrap();
            let minus = self.loss_and_grad(&probe).0;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], numeric, floor));
        }
        worst
    }
}

/// Builds a random gradient-check case. `kind` is 0 (SCL), 1 (KCL) or 2 (SBCL).
/// Draws are repeated until every pre-normalization norm is at least
/// `MIN_GRAD_CASE_NORM`; near that singularity the loss curves so sharply
/// that central differences at `h = 1e-5` stop being accurate.
pub fn random_grad_case(rng: &mut impl Rng, kind: usize) -> GradCase {
    loop {
        let case = draw_grad_case(rng, kind);
        let conditioned = [&case.inputs, &case.augmented].iter().all(|x| {
            let (_, cache) = case.encoder.forward(x.view()).unwrap();
            cache.norms().iter().all(|&n| n >= MIN_GRAD_CASE_NORM)
        });
        if conditioned {
            return case;
        }
    }
}

pub const MIN_GRAD_CASE_NORM: f64 = 0.2;

/// Relative-error floor for gradient checks. Central differences at
/// `h = 1e-5` carry about 1e-9 absolute roundoff, since the loss subtracts
/// logits of size `1/tau`.
pub const FD_FLOOR: f64 = 1e-3;

fn draw_grad_case(rng: &mut impl Rng, kind: usize) -> GradCase {
    use subtail::Architecture;
    let n = rng.random_range(2..=8);
    let d_in = rng.random_range(2..=5);
    let d_emb = rng.random_range(2..=4);
    let arch = if rng.random_bool(0.5) {
        Architecture::Linear
    } else {
        Architecture::Mlp1 {
            hidden: rng.random_range(2..=5),
        }
    };
    let encoder = subtail::Encoder::new(arch, d_in, d_emb, rng.random()).unwrap();
    let inputs = random_matrix(rng, n, d_in, 1.0);
    let augmented = &inputs + &random_matrix(rng, n, d_in, 0.3);
    let classes = rng.random_range(1..=3);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let tau = rng.random_range(0.1..0.6);
    let loss = match kind {
        0 => GradLoss::Scl { tau },
        1 => {
            let k = rng.random_range(1..=3);
            let positives = (0..n)
                .map(|i| {
                    let mut same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
                    while same.len() > k {
                        same.remove(rng.random_range(0..same.len()));
                    }
                    same
                })
                .collect();
            GradLoss::Kcl { tau, positives }
        }
        _ => {
            let subclasses: Vec<usize> = labels.iter().map(|&y| y * 10 + rng.random_range(0..2)).collect();
            let tau2: Vec<f64> = (0..classes).map(|_| tau * rng.random_range(1.01..2.7)).collect();
            let mut temps = subtail::TemperatureTable::uniform(classes, tau, 1.0);
            temps.tau2 = tau2;
            GradLoss::Sbcl {
                subclasses,
                config: subtail::LossConfig {
                    tau1: tau,
                    beta: rng.random_range(0.0..1.0),
                    k_positives: 4,
                },
                temps,
            }
        }
    };
    GradCase {
        encoder,
        inputs,
        augmented,
        labels,
        loss,
    }
}
