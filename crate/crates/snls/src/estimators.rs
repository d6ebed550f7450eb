//! Monte Carlo estimators for the quantitative behavior of the chain:
//! conditional Itô drifts, moment decay and plateaus, Lyapunov-sup tails,
//! small-ball entry frequencies, high-mode contraction under equal low modes,
//! mixing curves over a bounded-Lipschitz dictionary, and the coupling
//! condition statistics harvested from cycle logs.
//!
//! Every estimator is a deterministic function of (seed, config): trajectory
//! i draws from the ChaCha stream keyed by i, so results are reproducible
//! bitwise regardless of how work is scheduled.

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::coupling::{CouplingConfig, CouplingState, CycleRecord, PairRunner, PairView};
use crate::energy::{
    ell, energy, h_pow, j_form, EnergyParams, EnergyWorkspace, JfpTracker, LyapunovAccumulator,
};
use crate::integrator::{SimConfig, Stepper};
use crate::noise::{sample_increment, trajectory_rng};
use crate::spectral::SpectralField;
use crate::{Error, Result};

/// A time-indexed estimate with per-point Monte Carlo standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub n: usize,
}

impl Curve {
    fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut values = Vec::with_capacity(times.len());
        let mut stderrs = Vec::with_capacity(times.len());
        for j in 0..times.len() {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = rows
                .iter()
                .map(|r| (r[j] - mean).powi(2))
                .sum::<f64>()
                / (n as f64 - 1.0).max(1.0);
            values.push(mean);
            stderrs.push((var / n as f64).sqrt());
        }
        Self {
            times,
            values,
            stderrs,
            n,
        }
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "time,estimate,stderr,n")?;
        for i in 0..self.times.len() {
            writeln!(
                f,
                "{},{},{},{}",
                self.times[i], self.values[i], self.stderrs[i], self.n
            )?;
        }
        Ok(())
    }
}

/// Per-trajectory H and E_{u,k} series on a common sample grid.
#[derive(Debug, Clone)]
pub struct ScalarEnsemble {
    pub times: Vec<f64>,
    /// H(u_i(t_j)).
    pub h: Vec<Vec<f64>>,
    /// E_{u_i,k}(t_j) for the accumulator exponent `acc_k`.
    pub e_acc: Vec<Vec<f64>>,
    pub acc_k: f64,
    /// H(u₀) (common initial condition).
    pub h0: f64,
    pub seed: u64,
}

/// Simulates `n` independent trajectories from `u0`, tracking H every step
/// (for the E-accumulator) and recording every `sample_every` steps.
pub fn h_ensemble(
    cfg: &SimConfig,
    u0: &SpectralField,
    n: usize,
    seed: u64,
    sample_every: usize,
    acc_k: f64,
) -> Result<ScalarEnsemble> {
    let n_steps = cfg.n_steps();
    let sample_idx: Vec<usize> = (0..=n_steps).step_by(sample_every).collect();
    let times: Vec<f64> = sample_idx.iter().map(|&k| k as f64 * cfg.dt).collect();
    let h0 = energy(u0, &cfg.params)?;
    let rows: Result<Vec<(Vec<f64>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let mut ws = EnergyWorkspace::new(cfg.modes, cfg.params.sigma);
            let mut acc = LyapunovAccumulator::new(h_pow(h0, acc_k), 0.0, acc_k);
            let mut h_row = Vec::with_capacity(times.len());
            let mut e_row = Vec::with_capacity(times.len());
            let params = cfg.params.clone();
            let mut err = None;
            crate::integrator::evolve_observed(u0, cfg, &mut rng, |step, u| {
                if err.is_some() {
                    return;
                }
                match ws.h(u, &params) {
                    Ok(h) => {
                        if step > 0 {
                            acc.advance(h_pow(h, acc_k), cfg.dt, params.alpha);
                        }
                        if step % sample_every == 0 {
                            h_row.push(h);
                            e_row.push(acc.value());
                        }
                    }
                    Err(e) => err = Some(e),
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            Ok((h_row, e_row))
        })
        .collect();
    let rows = rows?;
    Ok(ScalarEnsemble {
        times,
        h: rows.iter().map(|(h, _)| h.clone()).collect(),
        e_acc: rows.into_iter().map(|(_, e)| e).collect(),
        acc_k,
        h0,
        seed,
    })
}

/// One bin of the conditional-drift estimate.
#[derive(Debug, Clone, Serialize)]
pub struct DriftBin {
    pub h_lo: f64,
    pub h_hi: f64,
    pub count: usize,
    /// Ê[H^k(t+δ) - H^k(t) + (αk/2)H^k(t)δ | bin] / δ.
    pub drift_rate: f64,
    pub stderr_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ItoDriftReport {
    pub k: f64,
    pub delta: f64,
    pub bins: Vec<DriftBin>,
    /// Smallest constant making the drift inequality hold across bins with
    /// 3σ slack.
    pub c_k_hat: f64,
    /// Bins whose lower 3σ confidence bound exceeds Ĉ_k (0 by construction
    /// unless the estimate is degenerate).
    pub violations: usize,
    /// Bins with fewer samples than requested.
    pub coverage_warning: bool,
}

/// Conditional drift of H^k against the supermartingale envelope:
/// bins samples of H^k(t+δ) - H^k(t) + (αk/2)H^k(t)·δ by H(t) (equal-count
/// bins) and reports the smallest admissible constant Ĉ_k.
pub fn check_ito_drift(
    ens: &ScalarEnsemble,
    k: f64,
    p: &EnergyParams,
    n_bins: usize,
    min_per_bin: usize,
) -> Result<ItoDriftReport> {
    if ens.times.len() < 2 {
        return Err(Error::Parameter("ensemble too short for drift estimation".into()));
    }
    let delta = ens.times[1] - ens.times[0];
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for row in &ens.h {
        for j in 0..row.len() - 1 {
            let hk_now = h_pow(row[j], k);
            let hk_next = h_pow(row[j + 1], k);
            samples.push((row[j], hk_next - hk_now + 0.5 * p.alpha * k * hk_now * delta));
        }
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_bins = n_bins.max(1).min(samples.len());
    let per = samples.len() / n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut coverage_warning = per < min_per_bin;
    for b in 0..n_bins {
        let lo = b * per;
        let hi = if b + 1 == n_bins { samples.len() } else { (b + 1) * per };
        let chunk = &samples[lo..hi];
        if chunk.is_empty() {
            coverage_warning = true;
            continue;
        }
        let mean = chunk.iter().map(|s| s.1).sum::<f64>() / chunk.len() as f64;
        let var = chunk
            .iter()
            .map(|s| (s.1 - mean).powi(2))
            .sum::<f64>()
            / (chunk.len() as f64 - 1.0).max(1.0);
        let se = (var / chunk.len() as f64).sqrt();
        bins.push(DriftBin {
            h_lo: chunk.first().unwrap().0,
            h_hi: chunk.last().unwrap().0,
            count: chunk.len(),
            drift_rate: mean / delta,
            stderr_rate: se / delta,
        });
    }
    let c_k_hat = bins
        .iter()
        .map(|b| b.drift_rate + 3.0 * b.stderr_rate)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let violations = bins
        .iter()
        .filter(|b| b.drift_rate - 3.0 * b.stderr_rate > c_k_hat)
        .count();
    Ok(ItoDriftReport {
        k,
        delta,
        bins,
        c_k_hat,
        violations,
        coverage_warning,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentDecayReport {
    pub k: f64,
    pub curve: Curve,
    /// Ĉ'_k = 2·(plateau mean over the tail window).
    pub c_k_hat: f64,
    /// Envelope rate used for the verdict (αk/2 from the general decay
    /// lemma, or α for the k = 1 Lyapunov-structure form).
    pub envelope_rate: f64,
    pub pass: bool,
    /// Worst margin (curve - envelope - 3σ), ≤ 0 iff pass.
    pub worst_margin: f64,
}

/// Empirical Ê H^k(u(t)) against exp(-rate·t)·H^k(u₀) + Ĉ'_k/2 + 3σ.
pub fn estimate_moment_decay(ens: &ScalarEnsemble, k: f64, envelope_rate: f64) -> MomentDecayReport {
    let rows: Vec<Vec<f64>> = ens
        .h
        .iter()
        .map(|row| row.iter().map(|&h| h_pow(h, k)).collect())
        .collect();
    let curve = Curve::from_rows(ens.times.clone(), &rows);
    let tail_start = ens.times.len() * 3 / 4;
    let plateau = curve.values[tail_start..].iter().sum::<f64>()
        / (curve.values.len() - tail_start).max(1) as f64;
    let c_k_hat = 2.0 * plateau;
    let hk0 = h_pow(ens.h0, k);
    let (pass, worst_margin) = decay_verdict(&curve, hk0, envelope_rate, c_k_hat);
    MomentDecayReport {
        k,
        curve,
        c_k_hat,
        envelope_rate,
        pass,
        worst_margin,
    }
}

/// Envelope check used by [`estimate_moment_decay`]; monotone in `c_k_hat`.
pub fn decay_verdict(curve: &Curve, hk0: f64, rate: f64, c_k_hat: f64) -> (bool, f64) {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..curve.times.len() {
        let envelope = (-rate * curve.times[i]).exp() * hk0 + 0.5 * c_k_hat + 3.0 * curve.stderrs[i];
        worst = worst.max(curve.values[i] - envelope);
    }
    (worst <= 0.0, worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct TailPoint {
    pub rho: f64,
    pub probability: f64,
    pub stderr: f64,
    pub exceedances: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub k: f64,
    pub c_k_hat: f64,
    pub points: Vec<TailPoint>,
    /// Log-log slope of the tail over the usable points.
    pub slope: Option<f64>,
    pub inconclusive: bool,
    /// Tail is non-increasing in ρ within 3σ error bars.
    pub monotone: bool,
}

/// Tail of sup_t (E_{u,k}(t) - Ĉ'_k·t) ≥ H^k(u₀) + ρ(H^{2k}(u₀) + T) as a
/// function of ρ.
pub fn tail_probability(ens: &ScalarEnsemble, c_k_hat: f64, rhos: &[f64]) -> TailReport {
    let k = ens.acc_k;
    let horizon = *ens.times.last().expect("nonempty grid");
    let hk0 = h_pow(ens.h0, k);
    let h2k0 = h_pow(ens.h0, 2.0 * k);
    let sups: Vec<f64> = ens
        .e_acc
        .iter()
        .map(|row| {
            row.iter()
                .zip(&ens.times)
                .map(|(&e, &t)| e - c_k_hat * t)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let n = sups.len() as f64;
    let mut points = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let threshold = hk0 + rho * (h2k0 + horizon);
        let count = sups.iter().filter(|&&s| s >= threshold).count();
        let p = count as f64 / n;
        points.push(TailPoint {
            rho,
            probability: p,
            stderr: (p * (1.0 - p) / n).sqrt(),
            exceedances: count,
        });
    }
    let usable: Vec<&TailPoint> = points
        .iter()
        .filter(|pt| pt.exceedances >= 10 && pt.probability < 1.0)
        .collect();
    let inconclusive = points.last().is_some_and(|pt| pt.exceedances < 10);
    let slope = if usable.len() >= 2 {
        let xs: Vec<f64> = usable.iter().map(|pt| pt.rho.ln()).collect();
        let ys: Vec<f64> = usable.iter().map(|pt| pt.probability.ln()).collect();
        Some(least_squares_slope(&xs, &ys).0)
    } else {
        None
    };
    let mut monotone = true;
    for w in points.windows(2) {
        if w[1].probability > w[0].probability + 3.0 * (w[0].stderr + w[1].stderr) {
            monotone = false;
        }
    }
    TailReport {
        k,
        c_k_hat,
        points,
        slope,
        inconclusive,
        monotone,
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx.max(1e-300);
    let intercept = ybar - slope * xbar;
    // Standard error of the slope.
    let dof = (n - 2.0).max(1.0);
    let s2: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / dof;
    (slope, (s2 / sxx.max(1e-300)).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct SmallBallReport {
    /// P(H(u₁(t)) + H(u₂(t)) ≤ R₁) over independent pairs (U-statistic).
    pub entry: Curve,
    /// P(H(u₁(t)) + H(u₂(t)) ≥ 4Ĉ'₁).
    pub exceed: Curve,
    pub r1: f64,
    pub four_c1: f64,
    pub theta1: f64,
    /// P(exceed) ≤ ½ + 3σ for all grid times ≥ θ̂₁.
    pub dissipation_pass: bool,
    /// Entry frequency at the last grid time is positive with 3σ margin.
    pub entry_positive: bool,
}

/// Small-ball entry and dissipation-time frequencies from a singles ensemble:
/// all unordered pairs (i,j) form the U-statistic, whose standard error comes
/// from the Hájek projection.
pub fn smallball_frequency(ens: &ScalarEnsemble, r1: f64, c1_hat: f64, theta1: f64) -> SmallBallReport {
    let n = ens.h.len();
    let four_c1 = 4.0 * c1_hat;
    let mut entry = u_statistic_curve(ens, |a, b| (a + b <= r1) as u8);
    let mut exceed = u_statistic_curve(ens, |a, b| (a + b >= four_c1) as u8);
    entry.n = n;
    exceed.n = n;
    let mut dissipation_pass = true;
    for i in 0..exceed.times.len() {
        if exceed.times[i] >= theta1 && exceed.values[i] > 0.5 + 3.0 * exceed.stderrs[i] {
            dissipation_pass = false;
        }
    }
    let last = entry.times.len() - 1;
    let entry_positive = entry.values[last] - 3.0 * entry.stderrs[last] > 0.0;
    SmallBallReport {
        entry,
        exceed,
        r1,
        four_c1,
        theta1,
        dissipation_pass,
        entry_positive,
    }
}

/// U-statistic of order 2 over trajectories at each grid time, with the
/// projection-based standard error 2·sd(g_i)/√n.
fn u_statistic_curve(ens: &ScalarEnsemble, kernel: impl Fn(f64, f64) -> u8) -> Curve {
    let n = ens.h.len();
    let t_len = ens.times.len();
    let mut values = Vec::with_capacity(t_len);
    let mut stderrs = Vec::with_capacity(t_len);
    for j in 0..t_len {
        let col: Vec<f64> = ens.h.iter().map(|row| row[j]).collect();
        let mut total = 0u64;
        let mut g = vec![0u64; n];
        for a in 0..n {
            for b in (a + 1)..n {
                let k = kernel(col[a], col[b]) as u64;
                total += k;
                g[a] += k;
                g[b] += k;
            }
        }
        let pairs = (n * (n - 1) / 2) as f64;
        let u = total as f64 / pairs;
        let gbar: Vec<f64> = g.iter().map(|&gi| gi as f64 / (n - 1) as f64).collect();
        let gmean = gbar.iter().sum::<f64>() / n as f64;
        let gvar = gbar.iter().map(|gi| (gi - gmean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        values.push(u);
        stderrs.push(2.0 * (gvar / n as f64).sqrt());
    }
    Curve {
        times: ens.times.clone(),
        values,
        stderrs,
        n,
    }
}

/// Contraction data for pairs with identical low modes and shared η.
#[derive(Debug, Clone)]
pub struct ContractionData {
    pub times: Vec<f64>,
    /// ‖r(t)‖₁ per pair.
    pub r_h1: Vec<Vec<f64>>,
    /// J_FP^{N*}(t) per pair.
    pub jfp: Vec<Vec<f64>>,
    /// J(u₁(0), u₂(0), r(0)) per pair.
    pub j0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub times: Vec<f64>,
    pub median_r: Vec<f64>,
    /// Least-squares slope of log median ‖r‖₁ against t, with its standard
    /// error estimated by bootstrap over pairs.
    pub log_median_slope: f64,
    pub slope_stderr: f64,
    /// Median is non-increasing within jitter tolerance.
    pub median_monotone: bool,
    /// Max over the grid of (mean J_FP - J̄(0))/ (3·se): ≤ 1 iff the
    /// supermartingale check passes.
    pub jfp_excess: f64,
    pub jfp_pass: bool,
}

/// Runs `n` equal-low-mode pairs (the V_b regime of the chain) and records
/// ‖r(t)‖₁ and J_FP^{N*}(t).
pub fn contraction_ensemble(
    sim: &SimConfig,
    pairs: &[(SpectralField, SpectralField)],
    horizon: f64,
    seed: u64,
    sample_every: usize,
) -> Result<ContractionData> {
    let n_steps = ((horizon / sim.dt) - 1e-9).ceil() as usize;
    let sample_idx: Vec<usize> = (0..=n_steps).step_by(sample_every).collect();
    let times: Vec<f64> = sample_idx.iter().map(|&k| k as f64 * sim.dt).collect();
    let n_star = sim.noise.n_star();
    let rows: Result<Vec<(Vec<f64>, Vec<f64>, f64)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (u1_0, u2_0))| {
            let mut rng = trajectory_rng(seed, i as u64);
            let mut stepper = Stepper::new(sim);
            let mut ws = EnergyWorkspace::new(sim.modes, sim.params.sigma);
            let params = sim.params.clone();
            let mut u1 = u1_0.clone();
            let mut u2 = u2_0.clone();
            for nmode in 1..=n_star {
                if u1.coeff(nmode) != u2.coeff(nmode) {
                    return Err(Error::Contract(format!(
                        "pair {i}: low mode {nmode} differs at t = 0"
                    )));
                }
            }
            let r0 = u1.sub(&u2);
            let j0 = j_form(&u1, &u2, &r0, &params)?;
            let mut tracker = JfpTracker::new(params.alpha, params.fp_rate, n_star, sim.dt);
            tracker.push_l(ell(&u1, &u2, &params)?);
            let mut r_row = vec![r0.sobolev_norm(1.0)];
            let mut jfp_row = vec![tracker.weighted(j0)];
            for step in 1..=n_steps {
                let dw = sample_increment(&sim.noise, sim.dt, &mut rng)?;
                stepper.deterministic_step(&mut u1);
                stepper.deterministic_step(&mut u2);
                for (c, d) in u1.coeffs_mut().iter_mut().zip(&dw.delta) {
                    *c += d;
                }
                for (c, d) in u2.coeffs_mut().iter_mut().zip(&dw.delta) {
                    *c += d;
                }
                for nmode in 1..=n_star {
                    u1.set_coeff(nmode, u2.coeff(nmode));
                }
                if !u1.is_finite() || !u2.is_finite() {
                    return Err(Error::BlowUp {
                        step,
                        detail: format!("contraction pair {i} went non-finite"),
                    });
                }
                let h1 = ws.h(&u1, &params)?;
                let h2 = ws.h(&u2, &params)?;
                let k_exp = 3.0 * params.sigma + 1.0;
                tracker.push_l(1.0 + h_pow(h1, k_exp) + h_pow(h2, k_exp));
                if step % sample_every == 0 {
                    let r = u1.sub(&u2);
                    r_row.push(r.sobolev_norm(1.0));
                    jfp_row.push(tracker.weighted(j_form(&u1, &u2, &r, &params)?));
                }
            }
            Ok((r_row, jfp_row, j0))
        })
        .collect();
    let rows = rows?;
    Ok(ContractionData {
        times,
        r_h1: rows.iter().map(|(r, _, _)| r.clone()).collect(),
        jfp: rows.iter().map(|(_, j, _)| j.clone()).collect(),
        j0: rows.into_iter().map(|(_, _, j)| j).collect(),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Quantile/slope/supermartingale summary of a contraction ensemble.
pub fn contraction_tail(data: &ContractionData) -> ContractionReport {
    let t_len = data.times.len();
    let n = data.r_h1.len();
    let mut median_r = Vec::with_capacity(t_len);
    for j in 0..t_len {
        let mut col: Vec<f64> = data.r_h1.iter().map(|row| row[j]).collect();
        median_r.push(median(&mut col));
    }
    // Log-median slope on strictly positive medians.
    let pts: Vec<(f64, f64)> = data
        .times
        .iter()
        .zip(&median_r)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&t, &m)| (t, m.ln()))
        .collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, _) = least_squares_slope(&xs, &ys);
    // Bootstrap the slope over pairs.
    let mut boot = trajectory_rng(0xb007, 0);
    let n_boot = 200;
    let mut slopes = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let idx: Vec<usize> = (0..n)
            .map(|_| (crate::noise::standard_normal_pair(&mut boot).0.abs() * 1e6) as usize % n)
            .collect();
        let mut med = Vec::with_capacity(t_len);
        for j in 0..t_len {
            let mut col: Vec<f64> = idx.iter().map(|&i| data.r_h1[i][j]).collect();
            med.push(median(&mut col));
        }
        let pts: Vec<(f64, f64)> = data
            .times
            .iter()
            .zip(&med)
            .filter(|(_, &m)| m > 0.0)
            .map(|(&t, &m)| (t, m.ln()))
            .collect();
        if pts.len() >= 2 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            slopes.push(least_squares_slope(&xs, &ys).0);
        }
    }
    let smean = slopes.iter().sum::<f64>() / slopes.len().max(1) as f64;
    let slope_stderr = (slopes
        .iter()
        .map(|s| (s - smean).powi(2))
        .sum::<f64>()
        / (slopes.len() as f64 - 1.0).max(1.0))
    .sqrt();
    // Monotone within a small tolerance of the local scale.
    let mut median_monotone = true;
    for w in median_r.windows(2) {
        if w[1] > w[0] * 1.05 + 1e-12 {
            median_monotone = false;
        }
    }
    // Supermartingale: mean J_FP(t) ≤ mean J(0)·(1 + 3·relative se).
    let j0_mean = data.j0.iter().sum::<f64>() / n as f64;
    let mut jfp_excess = f64::NEG_INFINITY;
    for j in 0..t_len {
        let col: Vec<f64> = data.jfp.iter().map(|row| row[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let se = (var / n as f64).sqrt();
        let excess = (mean - j0_mean) / (3.0 * se).max(1e-300);
        jfp_excess = jfp_excess.max(excess);
    }
    ContractionReport {
        times: data.times.clone(),
        median_r,
        log_median_slope: slope,
        slope_stderr,
        median_monotone,
        jfp_excess,
        jfp_pass: jfp_excess <= 1.0,
    }
}

/// Bounded-Lipschitz test functionals with ‖φ‖_L ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TestFunctional {
    /// ½·tanh(Re u_n).
    ReMode(usize),
    /// ½·tanh(Im u_n).
    ImMode(usize),
    /// ½·tanh(H(u)/4).
    EnergyClip,
    /// ½·tanh(|u|₂²).
    MassClip,
    /// ½·sin(arg u₁) (0 at u₁ = 0).
    PhaseSin,
    /// ½·cos(arg u₁) (0 at u₁ = 0).
    PhaseCos,
}

impl TestFunctional {
    pub fn eval(&self, u: &SpectralField, h: f64) -> f64 {
        match self {
            TestFunctional::ReMode(n) => 0.5 * u.coeff(*n).re.tanh(),
            TestFunctional::ImMode(n) => 0.5 * u.coeff(*n).im.tanh(),
            TestFunctional::EnergyClip => 0.5 * (h / 4.0).tanh(),
            TestFunctional::MassClip => 0.5 * u.l2_norm().powi(2).tanh(),
            TestFunctional::PhaseSin => {
                let z = u.coeff(1);
                if z.norm_sqr() == 0.0 {
                    0.0
                } else {
                    0.5 * (z.im / z.norm())
                }
            }
            TestFunctional::PhaseCos => {
                let z = u.coeff(1);
                if z.norm_sqr() == 0.0 {
                    0.0
                } else {
                    0.5 * (z.re / z.norm())
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            TestFunctional::ReMode(n) => format!("re_mode_{n}"),
            TestFunctional::ImMode(n) => format!("im_mode_{n}"),
            TestFunctional::EnergyClip => "energy_clip".into(),
            TestFunctional::MassClip => "mass_clip".into(),
            TestFunctional::PhaseSin => "phase_sin".into(),
            TestFunctional::PhaseCos => "phase_cos".into(),
        }
    }
}

/// The default 10-functional dictionary.
pub fn dictionary() -> Vec<TestFunctional> {
    vec![
        TestFunctional::ReMode(1),
        TestFunctional::ImMode(1),
        TestFunctional::ReMode(2),
        TestFunctional::ImMode(2),
        TestFunctional::ReMode(3),
        TestFunctional::ImMode(3),
        TestFunctional::EnergyClip,
        TestFunctional::MassClip,
        TestFunctional::PhaseSin,
        TestFunctional::PhaseCos,
    ]
}

/// Per-functional gap curves |Êφ(u₁(t)) - Êφ(u₂(t))| plus their maximum, from
/// coupled pairs (the coupling is variance reduction; marginals stay exact).
#[derive(Debug, Clone, Serialize)]
pub struct MixingCurve {
    pub times: Vec<f64>,
    pub per_functional: Vec<(String, Curve)>,
    /// max over the dictionary of |gap|, with the argmax functional's stderr.
    pub aggregate: Curve,
}

/// Everything a mixing run produces: the curve, the cycle logs of every pair
/// and the per-pair functional samples of both marginals (for marginal
/// cross-checks).
pub struct MixingRun {
    pub curve: MixingCurve,
    pub records: Vec<Vec<CycleRecord>>,
    /// [pair][functional][time] for each marginal.
    pub phi1: Vec<Vec<Vec<f64>>>,
    pub phi2: Vec<Vec<Vec<f64>>>,
}

/// Runs `n_pairs` coupling chains for `n_cycles` cycles, sampling the
/// dictionary every `sample_every` steps.
pub fn mixing_run(
    sim: &SimConfig,
    ccfg: &CouplingConfig,
    u0_1: &SpectralField,
    u0_2: &SpectralField,
    n_pairs: usize,
    n_cycles: usize,
    sample_every: usize,
    seed: u64,
) -> Result<MixingRun> {
    let dict = dictionary();
    let results: Result<Vec<_>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut runner = PairRunner::new(sim.clone(), ccfg.clone())?;
            let mut rng = trajectory_rng(seed, i as u64);
            let mut ws = EnergyWorkspace::new(sim.modes, sim.params.sigma);
            let params = sim.params.clone();
            let mut state = CouplingState::new(u0_1.clone(), u0_2.clone());
            let mut phi1: Vec<Vec<f64>> = vec![Vec::new(); dict.len()];
            let mut phi2: Vec<Vec<f64>> = vec![Vec::new(); dict.len()];
            let mut records = Vec::with_capacity(n_cycles);
            let mut err: Option<Error> = None;
            {
                let h1 = ws.h(&state.u1, &params)?;
                let h2 = ws.h(&state.u2, &params)?;
                for (f, phi) in dict.iter().enumerate() {
                    phi1[f].push(phi.eval(&state.u1, h1));
                    phi2[f].push(phi.eval(&state.u2, h2));
                }
            }
            for _ in 0..n_cycles {
                let (next, rec) = runner.cycle_observed(state, &mut rng, sample_every, &mut |view: PairView| {
                    if err.is_some() {
                        return;
                    }
                    let h1 = match ws.h(view.u1, &params) {
                        Ok(h) => h,
                        Err(e) => {
                            err = Some(e);
                            return;
                        }
                    };
                    let h2 = match ws.h(view.u2, &params) {
                        Ok(h) => h,
                        Err(e) => {
                            err = Some(e);
                            return;
                        }
                    };
                    for (f, phi) in dict.iter().enumerate() {
                        phi1[f].push(phi.eval(view.u1, h1));
                        phi2[f].push(phi.eval(view.u2, h2));
                    }
                })?;
                state = next;
                records.push(rec);
            }
            if let Some(e) = err {
                return Err(e);
            }
            Ok((phi1, phi2, records))
        })
        .collect();
    let results = results?;
    let steps_per_cycle = ((ccfg.cycle_t / sim.dt) - 1e-9).ceil() as usize;
    let total_steps = steps_per_cycle * n_cycles;
    let times: Vec<f64> = std::iter::once(0.0)
        .chain((1..=total_steps).filter(|s| s % sample_every == 0).map(|s| s as f64 * sim.dt))
        .collect();
    let t_len = times.len();
    let n = results.len();
    let mut per_functional = Vec::with_capacity(dict.len());
    let mut agg_values = vec![0.0f64; t_len];
    let mut agg_errs = vec![0.0f64; t_len];
    for (f, phi) in dict.iter().enumerate() {
        let mut values = Vec::with_capacity(t_len);
        let mut stderrs = Vec::with_capacity(t_len);
        for j in 0..t_len {
            let diffs: Vec<f64> = results
                .iter()
                .map(|(p1, p2, _)| p1[f][j] - p2[f][j])
                .collect();
            let mean = diffs.iter().sum::<f64>() / n as f64;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
            let se = (var / n as f64).sqrt();
            let gap = mean.abs().min(1.0); // 2·|φ|_∞ = 1 is the trivial bound
            values.push(gap);
            stderrs.push(se);
            if gap > agg_values[j] {
                agg_values[j] = gap;
                agg_errs[j] = se;
            }
        }
        per_functional.push((
            phi.name(),
            Curve {
                times: times.clone(),
                values,
                stderrs,
                n,
            },
        ));
    }
    let curve = MixingCurve {
        times: times.clone(),
        per_functional,
        aggregate: Curve {
            times,
            values: agg_values,
            stderrs: agg_errs,
            n,
        },
    };
    Ok(MixingRun {
        curve,
        records: results.iter().map(|(_, _, r)| r.clone()).collect(),
        phi1: results.iter().map(|(p, _, _)| p.clone()).collect(),
        phi2: results.into_iter().map(|(_, p, _)| p).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub q_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points_used: usize,
    pub inconclusive: bool,
    /// Windowed exponents grow along the curve: decay looks faster than any
    /// fixed power on this window.
    pub superpolynomial: bool,
}

/// Least-squares fit of log(gap) against log(1+t) over points ≥ 3σ above the
/// noise floor; reports q̂ with a 95% interval, no pass/fail.
pub fn fit_rate(curve: &Curve) -> RateFit {
    let pts: Vec<(f64, f64)> = curve
        .times
        .iter()
        .zip(curve.values.iter().zip(&curve.stderrs))
        .filter(|(_, (v, se))| **v > 3.0 * **se && **v > 0.0)
        .map(|(&t, (&v, _))| ((1.0 + t).ln(), v.ln()))
        .collect();
    if pts.len() < 8 {
        return RateFit {
            q_hat: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            points_used: pts.len(),
            inconclusive: true,
            superpolynomial: false,
        };
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, se) = least_squares_slope(&xs, &ys);
    let q_hat = -slope;
    // Windowed comparison: second-half exponent much larger than first-half
    // flags super-polynomial decay.
    let half = pts.len() / 2;
    let (s1, e1) = least_squares_slope(&xs[..half], &ys[..half]);
    let (s2, e2) = least_squares_slope(&xs[half..], &ys[half..]);
    let superpolynomial = (-s2) - (-s1) > 3.0 * (e1 + e2) && -s2 > 1.5 * (-s1).max(0.1);
    RateFit {
        q_hat,
        ci_low: q_hat - 1.96 * se,
        ci_high: q_hat + 1.96 * se,
        points_used: pts.len(),
        inconclusive: false,
        superpolynomial,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StratumStat {
    pub duration: usize,
    pub cycles: usize,
    pub decoupled: usize,
    pub frequency: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionsReport {
    /// (H2): empirical envelope constant C₀ = max over coupled records of
    /// dist·(t - lT)^q, with a bootstrap standard deviation.
    pub h2_c0: f64,
    pub h2_c0_bootstrap_sd: f64,
    pub h2_samples: usize,
    /// (H3): decoupling frequency per coupled-duration stratum.
    pub h3_strata: Vec<StratumStat>,
    /// Frequencies non-increasing within 3σ error bars.
    pub h3_monotone: bool,
    /// (H4): binding successes / attempts from the R₀-ball.
    pub h4_attempts: usize,
    pub h4_successes: usize,
    pub h4_p_hat: f64,
    pub h4_stderr: f64,
    /// p̂₋₁ > 0 with 3σ margin.
    pub h4_positive: bool,
    pub coverage_warning: bool,
}

/// Harvests the (H2)-(H4) statistics from cycle logs.  `h1_distances` are the
/// end-of-cycle ‖u₁-u₂‖₁ samples paired with each record.
pub fn coupling_condition_stats(
    records: &[Vec<CycleRecord>],
    h1_distances: &[Vec<f64>],
    cycle_t: f64,
    q_exponent: f64,
) -> ConditionsReport {
    use crate::coupling::Branch;
    // (H2): coupled records with time since the coupling epoch.
    let mut h2: Vec<f64> = Vec::new();
    for (chain, dists) in records.iter().zip(h1_distances) {
        for (rec, &d) in chain.iter().zip(dists) {
            if let (Branch::Vb, Some(l)) = (rec.branch, rec.l0_after) {
                let elapsed = ((rec.k + 1) as f64 - l as f64) * cycle_t;
                if elapsed > 0.0 {
                    h2.push(d * elapsed.powf(q_exponent));
                }
            }
        }
    }
    let h2_c0 = h2.iter().copied().fold(0.0, f64::max);
    // Bootstrap over samples.
    let mut boot = trajectory_rng(0xc0de5, 1);
    let mut maxima = Vec::new();
    if !h2.is_empty() {
        for _ in 0..200 {
            let mut m: f64 = 0.0;
            for _ in 0..h2.len() {
                let idx = (boot.next_u64() as usize) % h2.len();
                m = m.max(h2[idx]);
            }
            maxima.push(m);
        }
    }
    let bmean = maxima.iter().sum::<f64>() / maxima.len().max(1) as f64;
    let h2_c0_bootstrap_sd = (maxima
        .iter()
        .map(|m| (m - bmean).powi(2))
        .sum::<f64>()
        / (maxima.len() as f64 - 1.0).max(1.0))
    .sqrt();
    // (H3): stratify V_b cycles by completed coupled duration k - l.
    let mut strata: std::collections::BTreeMap<usize, (usize, usize)> = std::collections::BTreeMap::new();
    for chain in records {
        for rec in chain {
            if rec.branch == Branch::Vb {
                if let Some(l) = rec.l0_before {
                    let duration = rec.k - l;
                    let e = strata.entry(duration).or_insert((0, 0));
                    e.0 += 1;
                    if rec.l0_after.is_none() {
                        e.1 += 1;
                    }
                }
            }
        }
    }
    let h3_strata: Vec<StratumStat> = strata
        .into_iter()
        .map(|(duration, (cycles, decoupled))| {
            let f = decoupled as f64 / cycles as f64;
            StratumStat {
                duration,
                cycles,
                decoupled,
                frequency: f,
                stderr: (f * (1.0 - f) / cycles as f64).sqrt(),
            }
        })
        .collect();
    let mut h3_monotone = true;
    for w in h3_strata.windows(2) {
        if w[1].frequency > w[0].frequency + 3.0 * (w[0].stderr + w[1].stderr) {
            h3_monotone = false;
        }
    }
    // (H4): binding attempts.
    let mut attempts = 0;
    let mut successes = 0;
    for chain in records {
        for rec in chain {
            if rec.bind_attempted {
                attempts += 1;
                if rec.bind_success {
                    successes += 1;
                }
            }
        }
    }
    let p = if attempts > 0 {
        successes as f64 / attempts as f64
    } else {
        0.0
    };
    let se = if attempts > 0 {
        (p * (1.0 - p) / attempts as f64).sqrt()
    } else {
        f64::INFINITY
    };
    ConditionsReport {
        h2_c0,
        h2_c0_bootstrap_sd,
        h2_samples: h2.len(),
        h3_strata,
        h3_monotone,
        h4_attempts: attempts,
        h4_successes: successes,
        h4_p_hat: p,
        h4_stderr: se,
        h4_positive: successes > 0 && p - 3.0 * se > 0.0,
        coverage_warning: attempts == 0 || h2.is_empty(),
    }
}

/// z-scores of coupled-chain marginal means against an independent reference
/// ensemble, per functional: |mean_c - mean_ref| / √(se_c² + se_ref²).
pub struct MarginalComparison {
    pub max_z: f64,
    pub per_functional: Vec<(String, f64)>,
}

pub fn compare_marginals(
    phi_samples: &[Vec<Vec<f64>>],
    reference: &[Vec<Vec<f64>>],
    time_index_map: &[(usize, usize)],
) -> MarginalComparison {
    let dict = dictionary();
    let mut per_functional = Vec::with_capacity(dict.len());
    let mut max_z: f64 = 0.0;
    for f in 0..dict.len() {
        let mut worst: f64 = 0.0;
        for &(jc, jr) in time_index_map {
            let a: Vec<f64> = phi_samples.iter().map(|p| p[f][jc]).collect();
            let b: Vec<f64> = reference.iter().map(|p| p[f][jr]).collect();
            let (ma, sa) = mean_se(&a);
            let (mb, sb) = mean_se(&b);
            let z = (ma - mb).abs() / (sa * sa + sb * sb).sqrt().max(1e-300);
            worst = worst.max(z);
        }
        max_z = max_z.max(worst);
        per_functional.push((dict[f].name(), worst));
    }
    MarginalComparison {
        max_z,
        per_functional,
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Calibrates the Foias–Prodi rate Λ: along equal-low-mode pairs, measures
/// the growth rate of ln J against the weight l/N^{1/4} over sliding windows
/// and returns a high quantile times the safety factor.
pub fn calibrate_fp_rate(
    sim: &SimConfig,
    pairs: &[(SpectralField, SpectralField)],
    horizon: f64,
    seed: u64,
    safety: f64,
) -> Result<f64> {
    let window = 50; // steps per differencing window
    let data = contraction_ensemble(sim, pairs, horizon, seed, window)?;
    let n_star = sim.noise.n_star() as f64;
    let mut required: Vec<f64> = Vec::new();
    // J_FP with Λ = 0 reduces to e^{2αt}J; its log-increase rate over a
    // window, divided by the mean l/N^{1/4}, is the Λ that window needs.
    // Recover l-means from the stored weighted values: run with fp_rate as
    // configured, so instead use the raw identity on jfp rows generated with
    // Λ from `sim`; to stay independent of that choice the calibration uses
    // the r-rows: d/dt ln(e^{2αt}·J) ≈ d/dt (2αt + 2 ln‖r‖₁ + const).
    let dt_w = data.times[1] - data.times[0];
    for row in &data.r_h1 {
        for w in row.windows(2) {
            if w[0] > 1e-12 && w[1] > 1e-12 {
                let rate = (w[1].ln() - w[0].ln()) * 2.0 / dt_w + 2.0 * sim.params.alpha;
                if rate > 0.0 {
                    // l ≥ 1, so Λ = rate·N^{1/4}/l ≤ rate·N^{1/4}; the
                    // conservative choice uses l's lower bound.
                    required.push(rate * n_star.powf(0.25));
                }
            }
        }
    }
    if required.is_empty() {
        return Ok(1.0);
    }
    required.sort_by(f64::total_cmp);
    let q99 = required[((required.len() as f64 * 0.99) as usize).min(required.len() - 1)];
    Ok(safety * q99)
}
