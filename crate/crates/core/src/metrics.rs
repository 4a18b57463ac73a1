//! Standardized RMSE, trajectory MMD and the latent independence test.

use crate::data::ContextStats;
use crate::rng::{substream, tag};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("context standard deviation is zero")]
    ZeroContextStd,
    #[error("all pooled points coincide; median bandwidth is zero")]
    DegenerateSample,
    #[error("need at least {min} points, got {got}")]
    SampleTooSmall { min: usize, got: usize },
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
}

/// Root mean square of `pred - truth` for one node after both are
/// standardized by the node's context statistics.
pub fn rmse(pred: &[f64], truth: &[f64], stats: &[ContextStats]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricError::ShapeMismatch(format!(
            "pred {} vs truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if stats.len() != 1 && stats.len() != pred.len() {
        return Err(MetricError::ShapeMismatch(format!(
            "{} stats for {} values",
            stats.len(),
            pred.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        let s = stats[if stats.len() == 1 { 0 } else { i }];
        if s.std == 0.0 {
            return Err(MetricError::ZeroContextStd);
        }
        let d = (p - s.mean) / s.std - (t - s.mean) / s.std;
        acc += d * d;
    }
    Ok((acc / pred.len() as f64).sqrt())
}

/// Node-averaged RMSE of one realization. `pred[node]` and `truth[node]` hold
/// every `(window, step)` value of that node, `stats[node]` one entry per
/// value (or one shared entry). Only nodes listed in `nodes` count.
pub fn realization_rmse(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    stats: &[Vec<ContextStats>],
    nodes: &[usize],
) -> Result<f64, MetricError> {
    if pred.len() != truth.len() || pred.len() != stats.len() {
        return Err(MetricError::ShapeMismatch("node counts differ".into()));
    }
    if nodes.is_empty() {
        return Err(MetricError::ShapeMismatch("no nodes selected".into()));
    }
    let mut sum = 0.0;
    for &i in nodes {
        if i >= pred.len() {
            return Err(MetricError::ShapeMismatch(format!("node {i} out of range")));
        }
        sum += rmse(&pred[i], &truth[i], &stats[i])?;
    }
    Ok(sum / nodes.len() as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    PooledMedian,
    HalfPooledMedian,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// U-statistic self terms, cross term over all pairs with `2 / (n m)`.
    CrossMean,
    /// All three terms over `i != j` with `1 / (n (n - 1))`; equal sizes.
    OffDiagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl MmdConfig {
    pub fn trajectory() -> Self {
        Self {
            bandwidth: Bandwidth::PooledMedian,
            estimator: Estimator::CrossMean,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Squared distances of all unordered pairs of `points`, row-major upper
/// triangle.
fn pair_sq_dists(points: &[&[f64]]) -> Vec<f64> {
    let n = points.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(sq_dist(points[i], points[j]));
        }
    }
    out
}

/// Median of the Euclidean distances between distinct pooled points.
pub fn pooled_median(points: &[&[f64]]) -> Result<f64, MetricError> {
    if points.len() < 2 {
        return Err(MetricError::SampleTooSmall {
            min: 2,
            got: points.len(),
        });
    }
    let mut d: Vec<f64> = pair_sq_dists(points).into_iter().map(f64::sqrt).collect();
    let m = median_in_place(&mut d);
    if m == 0.0 {
        return Err(MetricError::DegenerateSample);
    }
    Ok(m)
}

fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize, MetricError> {
    let d = a.first().map_or(0, Vec::len);
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(MetricError::ShapeMismatch("trajectory dimensions differ".into()));
    }
    Ok(d)
}

/// Squared MMD between two samples of flattened trajectories with a
/// Gaussian kernel `exp(-|x - y|^2 / (2 sigma^2))`.
pub fn trajectory_mmd(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &MmdConfig) -> Result<f64, MetricError> {
    let (n, m) = (a.len(), b.len());
    if n < 2 || m < 2 {
        return Err(MetricError::SampleTooSmall { min: 2, got: n.min(m) });
    }
    if cfg.estimator == Estimator::OffDiagonal && n != m {
        return Err(MetricError::ShapeMismatch("unequal sample sizes".into()));
    }
    check_dims(a, b)?;
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let sq = pair_sq_dists(&pooled);
    let sigma = match cfg.bandwidth {
        Bandwidth::Fixed(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(MetricError::BadBandwidth(s));
            }
            s
        }
        rule => {
            let mut d: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
            let med = median_in_place(&mut d);
            if med == 0.0 {
                return Err(MetricError::DegenerateSample);
            }
            if rule == Bandwidth::HalfPooledMedian {
                0.5 * med
            } else {
                med
            }
        }
    };
    let g = -1.0 / (2.0 * sigma * sigma);
    let total = n + m;
    // Index of pair (i, j), i < j, in the upper triangle.
    let idx = |i: usize, j: usize| i * (2 * total - i - 1) / 2 + (j - i - 1);
    let (mut kaa, mut kbb, mut kab_all, mut kab_diag) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..total {
        for j in i + 1..total {
            let k = (g * sq[idx(i, j)]).exp();
            match (i < n, j < n) {
                (true, true) => kaa += 2.0 * k,
                (false, false) => kbb += 2.0 * k,
                _ => {
                    kab_all += k;
                    if j - n == i {
                        kab_diag += k;
                    }
                }
            }
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    Ok(match cfg.estimator {
        Estimator::CrossMean => kaa / (nf * (nf - 1.0)) + kbb / (mf * (mf - 1.0)) - 2.0 * kab_all / (nf * mf),
        Estimator::OffDiagonal => {
            let c = 1.0 / (nf * (nf - 1.0));
            c * kaa + c * kbb - 2.0 * c * (kab_all - kab_diag)
        }
    })
}

/// Plain double-loop transcription of [`trajectory_mmd`], kept as a
/// reference implementation.
pub fn trajectory_mmd_reference(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &MmdConfig) -> Result<f64, MetricError> {
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let sigma = match cfg.bandwidth {
        Bandwidth::Fixed(s) => s,
        rule => {
            let mut d = Vec::new();
            for i in 0..pooled.len() {
                for j in i + 1..pooled.len() {
                    let s: f64 = pooled[i].iter().zip(pooled[j]).map(|(x, y)| (x - y) * (x - y)).sum();
                    d.push(s.sqrt());
                }
            }
            d.sort_by(f64::total_cmp);
            let l = d.len();
            let med = if l % 2 == 1 { d[l / 2] } else { 0.5 * (d[l / 2 - 1] + d[l / 2]) };
            if rule == Bandwidth::HalfPooledMedian {
                0.5 * med
            } else {
                med
            }
        }
    };
    let k = |x: &Vec<f64>, y: &Vec<f64>| {
        let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        (-s / (2.0 * sigma * sigma)).exp()
    };
    let (nf, mf) = (n as f64, m as f64);
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += k(&a[i], &a[j]);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += k(&b[i], &b[j]);
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            if cfg.estimator == Estimator::CrossMean || i != j {
                xy += k(&a[i], &b[j]);
            }
        }
    }
    Ok(match cfg.estimator {
        Estimator::CrossMean => xx / (nf * (nf - 1.0)) + yy / (mf * (mf - 1.0)) - 2.0 * xy / (nf * mf),
        Estimator::OffDiagonal => (xx + yy - 2.0 * xy) / (nf * (nf - 1.0)),
    })
}

/// Joint squared MMD of `{(z_i, h_i)}` against `{(z'_i, h_i)}` and of the
/// reference pair `{(z'_i, h_i)}`, `{(z''_i, h_i)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct A3Result {
    pub mmd_model: f64,
    pub mmd_baseline: f64,
}

impl A3Result {
    /// `(model, baseline)` on the MMD scale, `sqrt(|MMD^2|)`. The unbiased
    /// estimate is centred on zero under independence and may be negative.
    pub fn magnitudes(&self) -> (f64, f64) {
        (self.mmd_model.abs().sqrt(), self.mmd_baseline.abs().sqrt())
    }
}

const A3_MIN: usize = 10;

/// Product-kernel MMD between the paired samples `(z1, h)` and `(z2, h)`
/// with `i != j` sums in all three terms. Bandwidths are half the median
/// pairwise distance of the pooled `z` values and of the `h` rows.
pub fn product_kernel_mmd(z1: &[f64], z2: &[f64], h: &[&[f64]]) -> Result<f64, MetricError> {
    let n = z1.len();
    if n < A3_MIN {
        return Err(MetricError::SampleTooSmall { min: A3_MIN, got: n });
    }
    if z2.len() != n || h.len() != n {
        return Err(MetricError::ShapeMismatch("paired samples differ in length".into()));
    }
    let zs: Vec<[f64; 1]> = z1.iter().chain(z2).map(|&z| [z]).collect();
    let zp: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
    let sz = 0.5 * pooled_median(&zp)?;
    let sh = 0.5 * pooled_median(h)?;
    let (gz, gh) = (-1.0 / (2.0 * sz * sz), -1.0 / (2.0 * sh * sh));
    let kz = |a: f64, b: f64| (gz * (a - b) * (a - b)).exp();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let khh = (gh * sq_dist(h[i], h[j])).exp();
            acc += khh * (kz(z1[i], z1[j]) + kz(z2[i], z2[j]) - 2.0 * kz(z1[i], z2[j]));
        }
    }
    Ok(acc / (n as f64 * (n as f64 - 1.0)))
}

fn normals(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = substream(&[tag::EVAL, seed, stream]);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Independence check of latents `z` against the states `h` they were
/// encoded under. Reference draws come from streams keyed by `seed`.
pub fn a3_independence_mmd(z: &[f64], h: &[&[f64]], seed: u64) -> Result<A3Result, MetricError> {
    let n = z.len();
    if n < A3_MIN {
        return Err(MetricError::SampleTooSmall { min: A3_MIN, got: n });
    }
    let z1 = normals(seed, 1, n);
    let z2 = normals(seed, 2, n);
    Ok(A3Result {
        mmd_model: product_kernel_mmd(z, &z1, h)?,
        mmd_baseline: product_kernel_mmd(&z1, &z2, h)?,
    })
}

/// Spread of the model statistic when `z` is shuffled against `h`, which
/// keeps its marginal and removes any dependence.
pub fn a3_permutation_std(z: &[f64], h: &[&[f64]], seed: u64, rounds: usize) -> Result<f64, MetricError> {
    let mut rng = substream(&[tag::EVAL, seed, 3]);
    let mut zp = z.to_vec();
    let mut vals = Vec::with_capacity(rounds);
    for r in 0..rounds {
        zp.shuffle(&mut rng);
        let zr = normals(seed, 100 + r as u64, z.len());
        vals.push(product_kernel_mmd(&zp, &zr, h)?);
    }
    Ok(mean_std(&vals).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn st(mean: f64, std: f64) -> ContextStats {
        ContextStats { mean, std }
    }

    #[test]
    fn rmse_examples() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&t, &t, &[st(0.5, 2.0)]).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        assert!((rmse(&p, &t, &[st(0.5, 2.0)]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rmse(&t, &t, &[st(0.0, 0.0)]), Err(MetricError::ZeroContextStd));
        assert!(matches!(rmse(&t, &t[..2], &[st(0.0, 1.0)]), Err(MetricError::ShapeMismatch(_))));
    }

    #[test]
    fn rmse_matches_transcription() {
        // Two windows x three steps with per-window statistics; expected value
        // from a direct numpy transcription of the formula.
        let pred = [0.3, -1.2, 2.5, 4.0, 3.1, 5.5];
        let truth = [0.1, -0.7, 1.9, 4.4, 2.2, 6.0];
        let stats = [st(0.2, 1.5), st(0.2, 1.5), st(0.2, 1.5), st(4.0, 0.8), st(4.0, 0.8), st(4.0, 0.8)];
        let got = rmse(&pred, &truth, &stats).unwrap();
        assert!((got - 0.6048607124631931).abs() < 1e-12, "{got}");
    }

    #[test]
    fn rmse_affine_invariance() {
        let pred = [0.3, -1.2, 2.5];
        let truth = [0.1, -0.7, 1.9];
        let a = rmse(&pred, &truth, &[st(0.2, 1.5)]).unwrap();
        let f = |v: f64| 3.0 * v - 7.0;
        let p2: Vec<f64> = pred.iter().map(|&v| f(v)).collect();
        let t2: Vec<f64> = truth.iter().map(|&v| f(v)).collect();
        let b = rmse(&p2, &t2, &[st(f(0.2), 3.0 * 1.5)]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn two_identical_points_give_zero() {
        let a = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let cfg = MmdConfig {
            bandwidth: Bandwidth::Fixed(1.0),
            estimator: Estimator::CrossMean,
        };
        assert_eq!(trajectory_mmd(&a, &a, &cfg).unwrap(), 0.0);
        assert_eq!(
            trajectory_mmd(&a, &a, &MmdConfig::trajectory()),
            Err(MetricError::DegenerateSample)
        );
    }

    #[test]
    fn hand_case_two_by_two() {
        // Points 0, 1 vs 0, 2 in one dimension, sigma = 1:
        // self terms k(0,1) and k(0,2); cross mean of k over all four pairs.
        let a = vec![vec![0.0], vec![1.0]];
        let b = vec![vec![0.0], vec![2.0]];
        let cfg = MmdConfig {
            bandwidth: Bandwidth::Fixed(1.0),
            estimator: Estimator::CrossMean,
        };
        let k = |d: f64| (-d * d / 2.0).exp();
        let want = k(1.0) + k(2.0) - 2.0 * (k(0.0) + k(2.0) + k(1.0) + k(1.0)) / 4.0;
        assert!((trajectory_mmd(&a, &b, &cfg).unwrap() - want).abs() < 1e-15);
    }

    fn random_sample(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| { let v: f64 = StandardNormal.sample(rng); v + shift }).collect::<Vec<f64>>())
            .collect()
    }

    #[test]
    fn production_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..50 {
            let n = rng.gen_range(2..9);
            let m = if case % 2 == 0 { n } else { rng.gen_range(2..9) };
            let d = rng.gen_range(1..5);
            let a = random_sample(&mut rng, n, d, 0.0);
            let b = random_sample(&mut rng, m, d, 0.5);
            for bw in [Bandwidth::PooledMedian, Bandwidth::HalfPooledMedian, Bandwidth::Fixed(0.7)] {
                let mut ests = vec![Estimator::CrossMean];
                if n == m {
                    ests.push(Estimator::OffDiagonal);
                }
                for est in ests {
                    let cfg = MmdConfig {
                        bandwidth: bw,
                        estimator: est,
                    };
                    let p = trajectory_mmd(&a, &b, &cfg).unwrap();
                    let r = trajectory_mmd_reference(&a, &b, &cfg).unwrap();
                    assert!((p - r).abs() <= 1e-12, "case {case}: {p} vs {r}");
                }
            }
        }
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_sample(&mut rng, 7, 3, 0.0);
        let b = random_sample(&mut rng, 7, 3, 1.0);
        for est in [Estimator::CrossMean, Estimator::OffDiagonal] {
            let cfg = MmdConfig {
                bandwidth: Bandwidth::PooledMedian,
                estimator: est,
            };
            let x = trajectory_mmd(&a, &b, &cfg).unwrap();
            let y = trajectory_mmd(&b, &a, &cfg).unwrap();
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn shift_separates() {
        let cfg = MmdConfig::trajectory();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let a = random_sample(&mut rng, 500, 1, 0.0);
            let same = random_sample(&mut rng, 500, 1, 0.0);
            let shifted = random_sample(&mut rng, 500, 1, 2.0);
            let s = trajectory_mmd(&a, &same, &cfg).unwrap();
            let d = trajectory_mmd(&a, &shifted, &cfg).unwrap();
            assert!(d > 0.0 && d > s, "seed {seed}");
        }
    }

    fn states(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        random_sample(rng, n, 4, 0.0)
    }

    #[test]
    fn a3_null_and_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let h = states(&mut rng, n);
        let hr: Vec<&[f64]> = h.iter().map(Vec::as_slice).collect();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = a3_independence_mmd(&z, &hr, 1).unwrap();
        let sd = a3_permutation_std(&z, &hr, 1, 20).unwrap();
        assert!((r.mmd_model - r.mmd_baseline).abs() <= 3.0 * sd * std::f64::consts::SQRT_2);

        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let h = states(&mut rng, n);
            let hr: Vec<&[f64]> = h.iter().map(Vec::as_slice).collect();
            let z: Vec<f64> = h.iter().map(|v| v[0]).collect();
            let r = a3_independence_mmd(&z, &hr, seed).unwrap();
            assert!(r.mmd_model > 5.0 * r.mmd_baseline.abs(), "seed {seed}: {r:?}");
        }
        assert!(matches!(
            a3_independence_mmd(&z[..5], &hr[..5], 0),
            Err(MetricError::SampleTooSmall { .. })
        ));
    }

    #[test]
    fn product_kernel_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 12;
        let z1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let h: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let hr: Vec<&[f64]> = h.iter().map(Vec::as_slice).collect();
        let got = product_kernel_mmd(&z1, &z2, &hr).unwrap();
        // Reference: explicit product kernel with the same bandwidth rules.
        let zs: Vec<Vec<f64>> = z1.iter().chain(&z2).map(|&v| vec![v]).collect();
        let zp: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let sz = 0.5 * pooled_median(&zp).unwrap();
        let sh = 0.5 * pooled_median(&hr).unwrap();
        let k = |za: f64, zb: f64, ha: f64, hb: f64| {
            (-(za - zb).powi(2) / (2.0 * sz * sz)).exp() * (-(ha - hb).powi(2) / (2.0 * sh * sh)).exp()
        };
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (hi, hj) = (i as f64, j as f64);
                    want += k(z1[i], z1[j], hi, hj) + k(z2[i], z2[j], hi, hj) - 2.0 * k(z1[i], z2[j], hi, hj);
                }
            }
        }
        want /= (n * (n - 1)) as f64;
        assert!((got - want).abs() < 1e-13);
    }
}
