//! Diagonal additive-noise operator and Wiener increment sampling.
//!
//! The operator b acts mode-wise: b·e_n = b_n·e_n with b_n ≥ 0, and the first
//! N_* modes must be genuinely forced (b_n > 0 for n ≤ N_*).  Modes above N_*
//! may be degenerate.  The complex cylindrical Wiener process is realized as
//! independent real and imaginary Brownian components of variance dt/2 per
//! unit b_n, so E|Δ_n|² = b_n²·dt and B₀ is the trace of the increment
//! covariance per unit time.
//!
//! Randomness comes from ChaCha streams (a block-counter generator): each
//! trajectory owns the stream keyed by its index under the experiment seed,
//! and normals are produced by fixed-consumption Box–Muller (two words per
//! normal pair), so results do not depend on thread scheduling.

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::spectral::eigenvalue;
use crate::{Error, Result};

/// Diagonal noise coefficients b_n, n = 1..M, plus the forced-mode count N_*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOperator {
    b: Vec<f64>,
    n_star: usize,
}

/// One sampled increment of b·dW over a step of length `dt`.
#[derive(Debug, Clone)]
pub struct WienerIncrement {
    pub delta: Vec<Complex64>,
    pub dt: f64,
}

/// Outcome of [`NoiseOperator::validate`].
#[derive(Debug, Clone, Serialize)]
pub struct NoiseReport {
    /// b_n > 0 for every n ≤ N_* (Assumption on the forced modes).
    pub positivity_ok: bool,
    /// Forced modes with b_n = 0, if any.
    pub positivity_failures: Vec<usize>,
    /// Hilbert–Schmidt norms B_0..B_3.
    pub hs_norms: [f64; 4],
    /// Log-log regression slope of b_n over the positive entries.
    pub decay_exponent: Option<f64>,
    /// Decay at least like n^{-4}, the rate that keeps B₃ finite as M → ∞.
    pub decay_ok: bool,
}

impl NoiseOperator {
    /// Builds the operator; coefficients must be nonnegative and finite, and
    /// 1 ≤ N_* ≤ M.  Positivity on the forced modes is checked by
    /// [`validate`](Self::validate), which reports rather than fails.
    pub fn new(b: Vec<f64>, n_star: usize) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::Parameter("noise operator needs at least one mode".into()));
        }
        if n_star == 0 || n_star > b.len() {
            return Err(Error::Parameter(format!(
                "N_* = {n_star} outside 1..={}",
                b.len()
            )));
        }
        if let Some(i) = b.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise coefficient b_{} = {} is not a finite nonnegative number",
                i + 1,
                b[i]
            )));
        }
        Ok(Self { b, n_star })
    }

    /// Power-law coefficients b_n = amplitude·n^{-exponent} for n ≤ cutoff.
    pub fn power_law(m: usize, amplitude: f64, exponent: f64, cutoff: usize, n_star: usize) -> Result<Self> {
        let b = (1..=m)
            .map(|n| {
                if n <= cutoff {
                    amplitude * (n as f64).powf(-exponent)
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(b, n_star)
    }

    pub fn modes(&self) -> usize {
        self.b.len()
    }

    pub fn n_star(&self) -> usize {
        self.n_star
    }

    pub fn coeff(&self, n: usize) -> f64 {
        self.b[n - 1]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.b
    }

    /// Hilbert–Schmidt norm B_s = Σ μ_n^s b_n² for s ∈ [0,3].
    pub fn hs_norm(&self, s: f64) -> Result<f64> {
        if !(0.0..=3.0).contains(&s) {
            return Err(Error::Parameter(format!("hs_norm exponent s = {s} outside [0,3]")));
        }
        Ok(self
            .b
            .iter()
            .enumerate()
            .map(|(i, &bn)| eigenvalue(i + 1).powf(s) * bn * bn)
            .sum())
    }

    /// Positivity, Hilbert–Schmidt norms and the empirical decay rate.
    pub fn validate(&self) -> NoiseReport {
        let positivity_failures: Vec<usize> = (1..=self.n_star)
            .filter(|&n| self.b[n - 1] <= 0.0)
            .collect();
        let hs_norms = [
            self.hs_norm(0.0).unwrap(),
            self.hs_norm(1.0).unwrap(),
            self.hs_norm(2.0).unwrap(),
            self.hs_norm(3.0).unwrap(),
        ];
        let decay_exponent = self.decay_exponent();
        // Trailing zeros decay faster than any power; only a measured slope
        // can violate the n^{-4} requirement.
        let decay_ok = decay_exponent.map_or(true, |s| s <= -3.9);
        NoiseReport {
            positivity_ok: positivity_failures.is_empty(),
            positivity_failures,
            hs_norms,
            decay_exponent,
            decay_ok,
        }
    }

    /// Least-squares slope of ln b_n against ln n over positive entries.
    fn decay_exponent(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .b
            .iter()
            .enumerate()
            .filter(|(_, &bn)| bn > 0.0)
            .map(|(i, &bn)| ((i as f64 + 1.0).ln(), bn.ln()))
            .collect();
        if pts.len() < 3 {
            return None;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        if denom.abs() < 1e-12 {
            return None;
        }
        Some((n * sxy - sx * sy) / denom)
    }
}

/// One standard normal pair by Box–Muller from two generator words.
/// Fixed consumption keeps stream positions reproducible.
pub fn standard_normal_pair<R: RngCore>(rng: &mut R) -> (f64, f64) {
    const SCALE: f64 = 1.0 / 9007199254740992.0; // 2^-53
    let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) * SCALE; // (0, 1]
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE; // [0, 1)
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * PI * u2).sin_cos();
    (r * c, r * s)
}

/// ChaCha stream for one trajectory: the experiment seed keys the cipher and
/// the stream id separates trajectories, so ensembles are reproducible
/// independently of scheduling.
pub fn trajectory_rng(experiment_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(experiment_seed);
    rng.set_stream(stream);
    rng
}

/// Samples one increment of b·dW: mode n gets b_n·(ξ + iζ)·√(dt/2) with ξ, ζ
/// independent standard normals; unforced modes are exactly zero.
pub fn sample_increment<R: RngCore>(noise: &NoiseOperator, dt: f64, rng: &mut R) -> Result<WienerIncrement> {
    if dt <= 0.0 {
        return Err(Error::Parameter(format!("increment step dt = {dt} must be positive")));
    }
    let half = (dt / 2.0).sqrt();
    let delta = noise
        .b
        .iter()
        .map(|&bn| {
            if bn > 0.0 {
                let (x, y) = standard_normal_pair(rng);
                Complex64::new(bn * half * x, bn * half * y)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(WienerIncrement { delta, dt })
}

impl WienerIncrement {
    pub fn zeros(m: usize, dt: f64) -> Self {
        Self {
            delta: vec![Complex64::new(0.0, 0.0); m],
            dt,
        }
    }

    /// Low-mode part (modes ≤ n_star) of the increment.
    pub fn low_part(&self, n_star: usize) -> Vec<Complex64> {
        self.delta[..n_star].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_passes_on_positive_forced_modes() {
        let op = NoiseOperator::new(vec![1.0, 0.5], 2).unwrap();
        let report = op.validate();
        assert!(report.positivity_ok);
        assert!(report.positivity_failures.is_empty());
    }

    #[test]
    fn validate_flags_degenerate_forced_mode() {
        let op = NoiseOperator::new(vec![1.0, 0.0], 2).unwrap();
        let report = op.validate();
        assert!(!report.positivity_ok);
        assert_eq!(report.positivity_failures, vec![2]);
    }

    #[test]
    fn validate_recovers_power_law_decay() {
        let op = NoiseOperator::power_law(64, 1.0, 4.0, 64, 4).unwrap();
        let report = op.validate();
        assert!(report.positivity_ok);
        let slope = report.decay_exponent.unwrap();
        assert!((slope + 4.0).abs() < 1e-9, "slope {slope}");
        assert!(report.decay_ok);
        // Slower decay is flagged.
        let slow = NoiseOperator::power_law(64, 1.0, 2.0, 64, 4).unwrap();
        assert!(!slow.validate().decay_ok);
    }

    #[test]
    fn hs_norm_closed_forms() {
        let op = NoiseOperator::new(vec![1.0, 0.5], 2).unwrap();
        assert!((op.hs_norm(0.0).unwrap() - 1.25).abs() < 1e-14);
        let expected = 2.0 * PI * PI; // π²·1 + 4π²·0.25
        assert!((op.hs_norm(1.0).unwrap() - expected).abs() < 1e-12);
        assert!(op.hs_norm(3.5).is_err());
        let zero = NoiseOperator::new(vec![0.0, 0.0], 1).unwrap();
        assert_eq!(zero.hs_norm(2.0).unwrap(), 0.0);
    }

    #[test]
    fn increment_variance_matches_gaussian_formula() {
        // Var(Re Δ₁) = b₁²·dt/2 = 0.005 for b₁ = 1, dt = 0.01.
        let op = NoiseOperator::new(vec![1.0], 1).unwrap();
        let mut rng = trajectory_rng(2024, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let inc = sample_increment(&op, 0.01, &mut rng).unwrap();
            let x = inc.delta[0].re;
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expected = 0.005;
        // Var of the sample variance of a Gaussian is 2σ⁴/n.
        let se = expected * (2.0 / n as f64).sqrt();
        assert!(
            (var - expected).abs() < 3.0 * se,
            "variance {var} vs {expected} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn unforced_modes_are_exactly_zero() {
        let op = NoiseOperator::new(vec![1.0, 0.0, 0.5], 1).unwrap();
        let mut rng = trajectory_rng(7, 0);
        for _ in 0..100 {
            let inc = sample_increment(&op, 0.1, &mut rng).unwrap();
            assert_eq!(inc.delta[1], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn same_seed_reproduces_increments() {
        let op = NoiseOperator::new(vec![1.0, 0.3, 0.1], 3).unwrap();
        let mut a = trajectory_rng(99, 5);
        let mut b = trajectory_rng(99, 5);
        for _ in 0..10 {
            let ia = sample_increment(&op, 0.01, &mut a).unwrap();
            let ib = sample_increment(&op, 0.01, &mut b).unwrap();
            assert_eq!(ia.delta, ib.delta);
        }
        // Different streams diverge.
        let mut c = trajectory_rng(99, 6);
        let ic = sample_increment(&op, 0.01, &mut c).unwrap();
        let ia = sample_increment(&op, 0.01, &mut trajectory_rng(99, 5)).unwrap();
        assert_ne!(ia.delta, ic.delta);
    }

    #[test]
    fn summed_increments_scale_with_step_count() {
        // Per-mode variance of a k-step sum is k·b_n²·dt (checked at 3σ).
        let op = NoiseOperator::new(vec![0.8], 1).unwrap();
        let dt = 0.02;
        let k = 8;
        let n = 20_000;
        let mut rng = trajectory_rng(11, 0);
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for _ in 0..k {
                acc += sample_increment(&op, dt, &mut rng).unwrap().delta[0];
            }
            sumsq += acc.norm_sqr();
        }
        let var = sumsq / n as f64;
        let expected = k as f64 * 0.8 * 0.8 * dt;
        let se = expected * (2.0 / n as f64).sqrt();
        assert!(
            (var - expected).abs() < 3.0 * se,
            "summed variance {var} vs {expected}"
        );
    }

    #[test]
    fn real_and_imaginary_parts_are_uncorrelated() {
        let op = NoiseOperator::new(vec![1.0], 1).unwrap();
        let mut rng = trajectory_rng(13, 0);
        let n = 50_000;
        let mut sxy = 0.0;
        for _ in 0..n {
            let inc = sample_increment(&op, 1.0, &mut rng).unwrap();
            sxy += inc.delta[0].re * inc.delta[0].im;
        }
        let corr = sxy / n as f64 / 0.5; // per-component variance is 1/2
        assert!(
            corr.abs() < 3.0 / (n as f64).sqrt(),
            "corr {corr} exceeds 3σ bound"
        );
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(NoiseOperator::new(vec![], 1).is_err());
        assert!(NoiseOperator::new(vec![1.0], 2).is_err());
        assert!(NoiseOperator::new(vec![-1.0], 1).is_err());
        let op = NoiseOperator::new(vec![1.0], 1).unwrap();
        assert!(sample_increment(&op, 0.0, &mut trajectory_rng(1, 0)).is_err());
    }
}
