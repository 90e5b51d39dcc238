//! Noise-level grids for inference, the training-noise distributions, and
//! the ancestral split used by stochastic samplers.
//!
//! A schedule holds the positive levels `sigma_0 > .. > sigma_{N-1}`; the
//! terminal level `sigma_N = 0` is implicit and handled by the samplers. The
//! continuous noise map is the identity `sigma(t) = t`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::stats::{normal_cdf, normal_quantile};

/// Grid families. `Ve` and `Exponential` share the geometric formula; both
/// names are accepted because ablation grids list them as separate rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    Exponential,
    Linear,
    Karras,
    Ve,
    Vp,
    Iddpm,
}

impl ScheduleFamily {
    pub const ALL: [ScheduleFamily; 6] = [
        ScheduleFamily::Exponential,
        ScheduleFamily::Linear,
        ScheduleFamily::Iddpm,
        ScheduleFamily::Karras,
        ScheduleFamily::Ve,
        ScheduleFamily::Vp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleFamily::Exponential => "exponential",
            ScheduleFamily::Linear => "linear",
            ScheduleFamily::Karras => "karras",
            ScheduleFamily::Ve => "ve",
            ScheduleFamily::Vp => "vp",
            ScheduleFamily::Iddpm => "iddpm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(ScheduleFamily::Exponential),
            "linear" => Ok(ScheduleFamily::Linear),
            "karras" => Ok(ScheduleFamily::Karras),
            "ve" => Ok(ScheduleFamily::Ve),
            "vp" => Ok(ScheduleFamily::Vp),
            "iddpm" => Ok(ScheduleFamily::Iddpm),
            other => Err(CoreError::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Strictly decreasing positive noise levels with exact endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    levels: Vec<f64>,
}

impl NoiseSchedule {
    /// Build an `n`-level grid over `[sigma_min, sigma_max]`. `rho` only
    /// affects the Karras family. `n == 1` yields the single level
    /// `sigma_max`.
    pub fn build(
        family: ScheduleFamily,
        n: usize,
        sigma_min: f64,
        sigma_max: f64,
        rho: f64,
    ) -> Result<Self> {
        if n < 1 {
            return Err(CoreError::Config("schedule needs at least one level".into()));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(CoreError::Config(format!(
                "noise range must satisfy 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        if n == 1 {
            return Ok(Self {
                family,
                levels: vec![sigma_max],
            });
        }
        let mut levels = match family {
            ScheduleFamily::Exponential | ScheduleFamily::Ve => {
                geometric_grid(n, sigma_min, sigma_max)
            }
            ScheduleFamily::Linear => (0..n)
                .map(|i| {
                    let f = i as f64 / (n - 1) as f64;
                    sigma_max + f * (sigma_min - sigma_max)
                })
                .collect(),
            ScheduleFamily::Karras => {
                if rho <= 0.0 {
                    return Err(CoreError::Config(format!("karras rho must be > 0: {rho}")));
                }
                let inv = 1.0 / rho;
                let hi = sigma_max.powf(inv);
                let lo = sigma_min.powf(inv);
                (0..n)
                    .map(|i| {
                        let f = i as f64 / (n - 1) as f64;
                        (hi + f * (lo - hi)).powf(rho)
                    })
                    .collect()
            }
            ScheduleFamily::Vp => vp_grid(n, sigma_min, sigma_max),
            ScheduleFamily::Iddpm => iddpm_grid(n, sigma_min, sigma_max)?,
        };
        // Pin the endpoints exactly; the formulas reach them only up to
        // rounding.
        levels[0] = sigma_max;
        levels[n - 1] = sigma_min;
        let schedule = Self { family, levels };
        schedule.validate()?;
        Ok(schedule)
    }

    fn validate(&self) -> Result<()> {
        for w in self.levels.windows(2) {
            if !(w[0] > w[1]) {
                return Err(CoreError::Config(format!(
                    "schedule not strictly decreasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if self.levels.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CoreError::Config("schedule has non-positive level".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// Positive levels, highest first. The terminal `sigma = 0` is implicit.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sigma_max(&self) -> f64 {
        self.levels[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.levels.last().unwrap()
    }
}

fn geometric_grid(n: usize, sigma_min: f64, sigma_max: f64) -> Vec<f64> {
    let ratio = sigma_min / sigma_max;
    (0..n)
        .map(|i| sigma_max * ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Variance-preserving grid. `sigma(t) = sqrt(exp(beta_d t^2 / 2 + beta_min t) - 1)`
/// on a linear `t` grid from 1 down to `EPS_S`, with `beta_d`, `beta_min`
/// solved so the endpoints land exactly on the requested range.
fn vp_grid(n: usize, sigma_min: f64, sigma_max: f64) -> Vec<f64> {
    const EPS_S: f64 = 1e-3;
    let a = (1.0 + sigma_max * sigma_max).ln();
    let b = (1.0 + sigma_min * sigma_min).ln();
    // Solve  beta_d/2 + beta_min             = a   (at t = 1)
    //        beta_d/2 * EPS^2 + beta_min*EPS = b   (at t = EPS)
    let beta_d = 2.0 * (a * EPS_S - b) / (EPS_S - EPS_S * EPS_S);
    let beta_min = (b - 0.5 * beta_d * EPS_S * EPS_S) / EPS_S;
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            let t = 1.0 + f * (EPS_S - 1.0);
            ((0.5 * beta_d * t * t + beta_min * t).exp() - 1.0).max(0.0).sqrt()
        })
        .collect()
}

/// Discrete cosine-alpha-bar levels subsampled uniformly to `n`, framed by
/// the exact endpoints.
fn iddpm_grid(n: usize, sigma_min: f64, sigma_max: f64) -> Result<Vec<f64>> {
    const M: usize = 1000;
    const S: f64 = 0.008;
    let alpha_bar = |j: f64| {
        let theta = (j / M as f64 + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2;
        theta.cos().powi(2)
    };
    let a0 = alpha_bar(0.0);
    let mut ascending = vec![sigma_min];
    for j in 1..=M {
        let ab = alpha_bar(j as f64) / a0;
        if ab <= 0.0 {
            break;
        }
        let sigma = ((1.0 - ab) / ab).sqrt();
        if sigma > sigma_min && sigma < sigma_max {
            ascending.push(sigma);
        }
    }
    ascending.push(sigma_max);
    if n > ascending.len() {
        return Err(CoreError::Config(format!(
            "iddpm grid has only {} distinct levels in range, requested {n}",
            ascending.len()
        )));
    }
    let last = ascending.len() - 1;
    let mut grid: Vec<f64> = (0..n)
        .map(|i| {
            let idx = ((i as f64 / (n - 1) as f64) * last as f64).round() as usize;
            ascending[idx]
        })
        .collect();
    grid.reverse();
    Ok(grid)
}

/// The continuous noise map `sigma(t) = t` and its derivative.
#[derive(Debug, Clone, Copy, Default)]
pub struct SigmaMap;

impl SigmaMap {
    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    pub fn sigma_dot(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Split one noise decrement into a deterministic part and fresh noise so
/// that `sigma_down^2 + sigma_up^2 = sigma_to^2`. `eta` in `[0, 1]` scales
/// the stochastic share; `eta = 0` recovers the deterministic step.
pub fn ancestral_split(sigma_from: f64, sigma_to: f64, eta: f64) -> Result<(f64, f64)> {
    if !(sigma_from > sigma_to && sigma_to >= 0.0) {
        return Err(CoreError::Contract(format!(
            "ancestral split requires sigma_from > sigma_to >= 0, got {sigma_from} -> {sigma_to}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(CoreError::Contract(format!("eta must be in [0,1]: {eta}")));
    }
    if sigma_to == 0.0 {
        return Ok((0.0, 0.0));
    }
    if eta == 0.0 {
        // Exactly the deterministic step; sqrt(sigma_to^2) could round.
        return Ok((sigma_to, 0.0));
    }
    let var_ratio =
        sigma_to * sigma_to * (sigma_from * sigma_from - sigma_to * sigma_to)
            / (sigma_from * sigma_from);
    let sigma_up = eta * sigma_to.min(var_ratio.sqrt());
    let sigma_down = (sigma_to * sigma_to - sigma_up * sigma_up).sqrt();
    Ok((sigma_down, sigma_up))
}

/// Families of the training-noise distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum NoiseDistFamily {
    /// `F(x) = 1 / (1 + (x/alpha)^-beta)`.
    LogLogistic { alpha: f64, beta: f64 },
    /// `ln x ~ Normal(mean, std^2)`.
    LogNormal { mean: f64, std: f64 },
}

/// Training-noise law truncated to `[sigma_min, sigma_max]`; samples come
/// from the inverse CDF restricted to the truncated quantile range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainNoiseDist {
    #[serde(flatten)]
    pub family: NoiseDistFamily,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl TrainNoiseDist {
    pub fn log_logistic(alpha: f64, beta: f64, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(NoiseDistFamily::LogLogistic { alpha, beta }, sigma_min, sigma_max)
    }

    pub fn log_normal(mean: f64, std: f64, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(NoiseDistFamily::LogNormal { mean, std }, sigma_min, sigma_max)
    }

    pub fn new(family: NoiseDistFamily, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max) {
            return Err(CoreError::Config(format!(
                "degenerate truncation bounds [{sigma_min}, {sigma_max}]"
            )));
        }
        match family {
            NoiseDistFamily::LogLogistic { alpha, beta } if alpha <= 0.0 || beta <= 0.0 => {
                return Err(CoreError::Config(
                    "log-logistic parameters must be positive".into(),
                ))
            }
            NoiseDistFamily::LogNormal { std, .. } if std <= 0.0 => {
                return Err(CoreError::Config("log-normal std must be positive".into()))
            }
            _ => {}
        }
        Ok(Self {
            family,
            sigma_min,
            sigma_max,
        })
    }

    fn base_cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self.family {
            NoiseDistFamily::LogLogistic { alpha, beta } => {
                1.0 / (1.0 + (x / alpha).powf(-beta))
            }
            NoiseDistFamily::LogNormal { mean, std } => normal_cdf((x.ln() - mean) / std),
        }
    }

    fn base_quantile(&self, u: f64) -> f64 {
        match self.family {
            NoiseDistFamily::LogLogistic { alpha, beta } => {
                alpha * (u / (1.0 - u)).powf(1.0 / beta)
            }
            NoiseDistFamily::LogNormal { mean, std } => (mean + std * normal_quantile(u)).exp(),
        }
    }

    /// CDF of the truncated law.
    pub fn cdf(&self, x: f64) -> f64 {
        let lo = self.base_cdf(self.sigma_min);
        let hi = self.base_cdf(self.sigma_max);
        if x <= self.sigma_min {
            0.0
        } else if x >= self.sigma_max {
            1.0
        } else {
            (self.base_cdf(x) - lo) / (hi - lo)
        }
    }

    /// Draw one noise level; always inside the truncation bounds.
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let lo = self.base_cdf(self.sigma_min);
        let hi = self.base_cdf(self.sigma_max);
        let u = lo + (hi - lo) * rng.uniform();
        self.base_quantile(u)
            .clamp(self.sigma_min, self.sigma_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exponential_three_levels() {
        let s = NoiseSchedule::build(ScheduleFamily::Exponential, 3, 0.005, 1.0, 7.0).unwrap();
        let want = [1.0, 0.070_710_678_118_654_76, 0.005];
        for (a, b) in s.levels().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn karras_two_levels_are_endpoints() {
        let s = NoiseSchedule::build(ScheduleFamily::Karras, 2, 0.005, 1.0, 7.0).unwrap();
        assert_eq!(s.levels(), &[1.0, 0.005]);
    }

    #[test]
    fn linear_three_levels() {
        let s = NoiseSchedule::build(ScheduleFamily::Linear, 3, 0.1, 1.0, 7.0).unwrap();
        let want = [1.0, 0.55, 0.1];
        for (a, b) in s.levels().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_range_rejected() {
        assert!(NoiseSchedule::build(ScheduleFamily::Linear, 3, 1.0, 1.0, 7.0).is_err());
        assert!(NoiseSchedule::build(ScheduleFamily::Linear, 3, 2.0, 1.0, 7.0).is_err());
        assert!(ScheduleFamily::parse("cosine").is_err());
    }

    #[test]
    fn single_level_is_sigma_max() {
        for family in ScheduleFamily::ALL {
            let s = NoiseSchedule::build(family, 1, 0.005, 1.0, 7.0).unwrap();
            assert_eq!(s.levels(), &[1.0]);
        }
    }

    proptest! {
        #[test]
        fn all_families_decreasing_and_endpoint_exact(
            n in 2usize..40,
            lo in 0.001f64..0.1,
            span in 0.5f64..100.0,
            family_idx in 0usize..6,
        ) {
            let hi = lo + span;
            let family = ScheduleFamily::ALL[family_idx];
            let s = NoiseSchedule::build(family, n, lo, hi, 7.0).unwrap();
            prop_assert_eq!(s.levels().len(), n);
            prop_assert_eq!(s.sigma_max(), hi);
            prop_assert_eq!(s.sigma_min(), lo);
            for w in s.levels().windows(2) {
                prop_assert!(w[0] > w[1]);
                prop_assert!(w[1] > 0.0);
            }
        }

        #[test]
        fn ve_equals_exponential(n in 2usize..30, lo in 0.001f64..0.1, span in 0.5f64..50.0) {
            let hi = lo + span;
            let a = NoiseSchedule::build(ScheduleFamily::Ve, n, lo, hi, 7.0).unwrap();
            let b = NoiseSchedule::build(ScheduleFamily::Exponential, n, lo, hi, 7.0).unwrap();
            for (x, y) in a.levels().iter().zip(b.levels()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn ancestral_split_preserves_variance(
            from in 0.01f64..10.0,
            frac in 0.01f64..0.99,
            eta in 0.0f64..1.0,
        ) {
            let to = from * frac;
            let (down, up) = ancestral_split(from, to, eta).unwrap();
            prop_assert!((down * down + up * up - to * to).abs() < 1e-12);
        }
    }

    #[test]
    fn ancestral_split_hand_case() {
        let (down, up) = ancestral_split(1.0, 0.5, 1.0).unwrap();
        assert!((up - 0.433_012_701_892_219_3).abs() < 1e-12);
        assert!((down - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ancestral_split_edges() {
        assert_eq!(ancestral_split(1.0, 0.0, 1.0).unwrap(), (0.0, 0.0));
        let (down, up) = ancestral_split(1.0, 0.5, 0.0).unwrap();
        assert_eq!((down, up), (0.5, 0.0));
        assert!(ancestral_split(0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn log_logistic_median() {
        let d = TrainNoiseDist::log_logistic(0.5, 0.5, 1e-9, 1e9).unwrap();
        // Quantile at u = 0.5 is alpha.
        assert!((d.base_quantile(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn samples_respect_truncation() {
        let d = TrainNoiseDist::log_logistic(0.5, 0.5, 0.005, 1.0).unwrap();
        let mut rng = RngStream::from_seed(0);
        for _ in 0..2000 {
            let s = d.sample(&mut rng);
            assert!((0.005..=1.0).contains(&s));
        }
    }

    #[test]
    fn truncated_cdf_matches_empirical() {
        let d = TrainNoiseDist::log_logistic(0.5, 0.5, 0.005, 1.0).unwrap();
        let mut rng = RngStream::from_seed(1);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let f = d.cdf(x);
            ks = ks.max((f - i as f64 / n as f64).abs());
            ks = ks.max((f - (i + 1) as f64 / n as f64).abs());
        }
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn log_normal_truncated_cdf_matches_empirical() {
        let d = TrainNoiseDist::log_normal(-1.2, 1.0, 0.005, 2.0).unwrap();
        let mut rng = RngStream::from_seed(2);
        let n = 50_000;
        let mut draws: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let f = d.cdf(x);
            ks = ks.max((f - i as f64 / n as f64).abs());
            ks = ks.max((f - (i + 1) as f64 / n as f64).abs());
        }
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn degenerate_bounds_rejected() {
        assert!(TrainNoiseDist::log_logistic(0.5, 0.5, 1.0, 1.0).is_err());
        assert!(TrainNoiseDist::log_logistic(0.5, 0.5, 0.0, 1.0).is_err());
    }
}
