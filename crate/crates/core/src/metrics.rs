//! Distributional and task metrics with seed-level aggregation.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

fn rows_of(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        [n] => Ok((*n, 1)),
        s => Err(CoreError::ShapeMismatch(format!(
            "sample set must be [n, d] or [n], got {s:?}"
        ))),
    }
}

fn mean_pairwise_distance(a: &Tensor, b: &Tensor, d: usize) -> f64 {
    let (an, bn) = (a.numel() / d, b.numel() / d);
    let av = a.data();
    let bv = b.data();
    let mut total = 0.0;
    for i in 0..an {
        let x = &av[i * d..(i + 1) * d];
        for j in 0..bn {
            let y = &bv[j * d..(j + 1) * d];
            let sq: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            total += sq.sqrt();
        }
    }
    total / (an * bn) as f64
}

/// Energy statistic `2 E|a-b| - E|a-a'| - E|b-b'|` over all pairs
/// (V-statistic, diagonals included). Zero iff the empirical distributions
/// coincide; symmetric and non-negative.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (an, ad) = rows_of(a)?;
    let (bn, bd) = rows_of(b)?;
    if ad != bd {
        return Err(CoreError::ShapeMismatch(format!(
            "sample dims differ: {ad} vs {bd}"
        )));
    }
    if an == 0 || bn == 0 {
        return Err(CoreError::Contract("empty sample set".into()));
    }
    let cross = mean_pairwise_distance(a, b, ad);
    let within_a = mean_pairwise_distance(a, a, ad);
    let within_b = mean_pairwise_distance(b, b, ad);
    Ok(2.0 * cross - within_a - within_b)
}

/// Per-dimension mean and population standard deviation.
pub fn moment_report(a: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = rows_of(a)?;
    if n == 0 {
        return Err(CoreError::Contract("empty sample set".into()));
    }
    let mut mean = vec![0.0; d];
    for row in a.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in a.data().chunks(d) {
        for j in 0..d {
            let diff = row[j] - mean[j];
            var[j] += diff * diff;
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok((mean, std))
}

/// Kolmogorov–Smirnov statistic of 1-D samples against a reference CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::Contract("empty sample set".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        ks = ks.max((f - i as f64 / n).abs());
        ks = ks.max((f - (i + 1) as f64 / n).abs());
    }
    Ok(ks)
}

/// Fraction of samples assigned to each center by nearest-distance.
pub fn mode_frequencies(samples: &Tensor, centers: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (n, d) = rows_of(samples)?;
    if centers.is_empty() || centers.iter().any(|c| c.len() != d) {
        return Err(CoreError::ShapeMismatch(
            "centers must match the sample dimension".into(),
        ));
    }
    let mut counts = vec![0usize; centers.len()];
    for row in samples.data().chunks(d) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in centers.iter().enumerate() {
            let sq: f64 = row.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum();
            if sq < best_d {
                best_d = sq;
                best = k;
            }
        }
        counts[best] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// Two-means clustering separation: distance between the two fitted centers
/// divided by the pooled within-cluster standard deviation. Values well
/// above 2 indicate two clearly separated modes.
pub fn two_means_separation(samples: &Tensor) -> Result<f64> {
    let (n, d) = rows_of(samples)?;
    if n < 4 {
        return Err(CoreError::Contract("need at least 4 samples".into()));
    }
    let rows: Vec<&[f64]> = samples.data().chunks(d).collect();
    // deterministic init: extreme points along the first principal spread
    let mut lo = 0;
    let mut hi = 0;
    for (i, r) in rows.iter().enumerate() {
        if r[0] < rows[lo][0] {
            lo = i;
        }
        if r[0] > rows[hi][0] {
            hi = i;
        }
    }
    let mut centers = [rows[lo].to_vec(), rows[hi].to_vec()];
    let mut assignment = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let d0: f64 = r.iter().zip(&centers[0]).map(|(a, b)| (a - b) * (a - b)).sum();
            let d1: f64 = r.iter().zip(&centers[1]).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = usize::from(d1 < d0);
            if assignment[i] != k {
                assignment[i] = k;
                changed = true;
            }
        }
        for k in 0..2 {
            let members: Vec<&&[f64]> = rows
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == k)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut c = vec![0.0; d];
            for m in &members {
                for (cv, v) in c.iter_mut().zip(m.iter()) {
                    *cv += v;
                }
            }
            for cv in &mut c {
                *cv /= members.len() as f64;
            }
            centers[k] = c;
        }
        if !changed {
            break;
        }
    }
    let center_dist: f64 = centers[0]
        .iter()
        .zip(&centers[1])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut within = 0.0;
    for (r, &a) in rows.iter().zip(&assignment) {
        within += r
            .iter()
            .zip(&centers[a])
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
    }
    let within_std = (within / n as f64).sqrt().max(1e-12);
    Ok(center_dist / within_std)
}

/// Mean and population std over per-seed values.
pub fn aggregate_seeds(per_seed: &[f64]) -> Result<(f64, f64)> {
    if per_seed.is_empty() {
        return Err(CoreError::Contract("no seeds to aggregate".into()));
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `"m (± s)"` with three decimals, the table convention. The std is the
/// population std over seeds.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} (± {std:.3})")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn energy_distance_of_identical_sets_is_zero() {
        let a = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn energy_distance_is_permutation_invariant_and_symmetric() {
        let a = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let a_perm = Tensor::new(vec![3, 1], vec![2.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![0.5, 1.5, -1.0]).unwrap();
        let d1 = energy_distance(&a, &b).unwrap();
        let d2 = energy_distance(&a_perm, &b).unwrap();
        let d3 = energy_distance(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
        assert!((d1 - d3).abs() < 1e-12);
        assert!(energy_distance(&a, &a_perm).unwrap().abs() < 1e-12);
    }

    #[test]
    fn energy_distance_separated_gaussians() {
        // For N(0,1) vs N(3,1): E|a-b| with a-b ~ N(3,2), within terms 2/sqrt(pi).
        // Closed form: 2*3.017249 - 2*1.128379 = 3.777740.
        let mut rng = RngStream::from_seed(0);
        let n = 10_000;
        let a = Tensor::new(vec![n, 1], (0..n).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![n, 1], (0..n).map(|_| 3.0 + rng.normal()).collect()).unwrap();
        let d = energy_distance(&a, &b).unwrap();
        assert!((d - 3.7777).abs() < 0.377, "energy distance {d}");
    }

    #[test]
    fn energy_distance_nonnegative_on_random_pairs() {
        let mut rng = RngStream::from_seed(1);
        for _ in 0..20 {
            let n = 30 + rng.index(50);
            let m = 30 + rng.index(50);
            let a = Tensor::new(vec![n, 2], rng.normal_vec(n * 2)).unwrap();
            let b = Tensor::new(
                vec![m, 2],
                rng.normal_vec(m * 2).iter().map(|v| v * 2.0 + 0.3).collect(),
            )
            .unwrap();
            assert!(energy_distance(&a, &b).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(energy_distance(&a, &b).is_err());
    }

    #[test]
    fn constant_samples_have_zero_std() {
        let a = Tensor::full(&[10, 2], 1.5);
        let (mean, std) = moment_report(&a).unwrap();
        assert_eq!(mean, vec![1.5, 1.5]);
        assert_eq!(std, vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_samples_pass_ks_against_uniform_cdf() {
        let mut rng = RngStream::from_seed(2);
        let samples: Vec<f64> = (0..100_000).map(|_| rng.uniform()).collect();
        let ks = ks_statistic(&samples, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn mode_frequencies_recover_generator_weights() {
        let mut rng = RngStream::from_seed(3);
        let n = 20_000;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.uniform() < 0.7 {
                data.push(-1.0 + 0.1 * rng.normal());
            } else {
                data.push(1.0 + 0.1 * rng.normal());
            }
        }
        let t = Tensor::new(vec![n, 1], data).unwrap();
        let freqs = mode_frequencies(&t, &[vec![-1.0], vec![1.0]]).unwrap();
        assert!((freqs[0] - 0.7).abs() < 0.03);
        assert!((freqs[1] - 0.3).abs() < 0.03);
    }

    #[test]
    fn aggregate_hand_case_and_format() {
        let (m, s) = aggregate_seeds(&[1.0, 2.0, 3.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - 0.816_496_580_927_726).abs() < 1e-12);
        assert_eq!(format_mean_std(m, s), "2.000 (± 0.816)");
        let (m1, s1) = aggregate_seeds(&[5.0]).unwrap();
        assert_eq!((m1, s1), (5.0, 0.0));
        let (m2, s2) = aggregate_seeds(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((m2, s2), (m, s));
    }
}
