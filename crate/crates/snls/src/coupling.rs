//! Coupling machinery: maximal couplings, Girsanov path densities, the
//! binding control and the inductive per-cycle coupling chain.
//!
//! A chain advances a pair (u₁,u₂) in cycles of length T.  At the start of
//! cycle k, with H_k = H(u₁(kT)) + H(u₂(kT)):
//!
//! - **V⁰** (uncoupled, H_k > R₀): both trajectories evolve under one shared
//!   Wiener path — a trivial coupling while dissipation brings the pair back
//!   into the R₀-ball.
//! - **Vᵃ** (uncoupled, H_k ≤ R₀): a binding attempt.  Trajectory 1 draws
//!   fresh noise z₁.  The shifted candidate law is the image of Wiener
//!   measure under the binding drift h that steers the low modes of
//!   trajectory 1 onto those of trajectory 2 by the end of the cycle, with
//!   the gap following the damped free flow scaled by a ramp that vanishes
//!   at T.  A maximal coupling of (free law, shifted law) of the discretized
//!   low-mode noise decides whether the pair binds; the density ratio is the
//!   Girsanov log-density along a triangular inversion of the shift map.
//!   Both marginals stay exact: trajectory 1 always follows z₁, and
//!   trajectory 2's reconstructed noise is Wiener whether or not the draw
//!   coupled.
//! - **Vᵇ** (coupled): the pair shares one Wiener path and the low modes of
//!   trajectory 1 are assigned from trajectory 2 each step, which realizes
//!   the low-mode binding drift exactly (its Girsanov cost is recorded per
//!   cycle).  The coupling clauses — equality of X and η, H_l ≤ d₀ at the
//!   coupling epoch, and the Lyapunov growth cap on E_{u,3σ+1}(·, lT) — are
//!   checked along the cycle, and any violation decouples (l₀ ← ∞).

use num_complex::Complex64;
use rand::RngCore;
use serde::Serialize;

use crate::energy::{h_pow, EnergyWorkspace, LyapunovAccumulator};
use crate::integrator::{SimConfig, Stepper};
use crate::noise::{sample_increment, standard_normal_pair, NoiseOperator, WienerIncrement};
use crate::spectral::SpectralField;
use crate::{Error, Result};

/// Uniform draw in (0,1] (safe for logarithms).
fn uniform_unit<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0)
}

/// Outcome of one maximal-coupling draw.
#[derive(Debug, Clone)]
pub struct CouplingDraw<T> {
    pub z1: T,
    pub z2: T,
    pub equal: bool,
    /// Residual-sampler rejections before z₂ was produced (0 on the diagonal).
    pub residual_attempts: usize,
}

/// γ-coupling of (μ₁, μ₂) given samplers for both and the log density ratio
/// log(dμ₂/dμ₁): draw z₁ ~ μ₁ and accept z₂ = z₁ with probability
/// min(1, dμ₂/dμ₁(z₁)); otherwise draw z₂ from the normalized residual by
/// rejection.  P(z₁ ≠ z₂) equals the total variation distance and the
/// diagonal law is μ₁ ∧ μ₂.
pub fn maximal_coupling<T: Clone, R: RngCore>(
    mut sample1: impl FnMut(&mut R) -> T,
    mut sample2: impl FnMut(&mut R) -> T,
    log_ratio: impl Fn(&T) -> f64,
    attempt_cap: usize,
    rng: &mut R,
) -> Result<CouplingDraw<T>> {
    let z1 = sample1(rng);
    let lr = log_ratio(&z1);
    if uniform_unit(rng).ln() < lr {
        let z2 = z1.clone();
        return Ok(CouplingDraw {
            z1,
            z2,
            equal: true,
            residual_attempts: 0,
        });
    }
    // Residual (μ₂ - μ₁∧μ₂)/‖μ₁-μ₂‖ by rejection from μ₂.
    for attempt in 1..=attempt_cap {
        let z = sample2(rng);
        let lr = log_ratio(&z);
        // Accept with probability 1 - min(1, dμ₁/dμ₂(z)) = 1 - e^{-lr} for lr > 0.
        if lr > 0.0 && uniform_unit(rng) < -(-lr).exp_m1() {
            return Ok(CouplingDraw {
                z1,
                z2: z,
                equal: false,
                residual_attempts: attempt,
            });
        }
    }
    Err(Error::ResidualSampling {
        attempts: attempt_cap,
    })
}

/// Cauchy–Schwarz total-variation bound ½·√(E_{μ₂}[(dμ₁/dμ₂)²] - 1) from
/// samples of log(dμ₁/dμ₂) under μ₂, clamped to [0,1].  Returns the bound
/// and a Monte Carlo standard error.
pub fn tv_upper_bound(log_ratio_samples: &[f64]) -> Result<(f64, f64)> {
    if log_ratio_samples.is_empty() {
        return Err(Error::Parameter("tv_upper_bound needs at least one sample".into()));
    }
    let n = log_ratio_samples.len() as f64;
    let mean: f64 = log_ratio_samples.iter().map(|l| (2.0 * l).exp()).sum::<f64>() / n;
    let var: f64 = log_ratio_samples
        .iter()
        .map(|l| ((2.0 * l).exp() - mean).powi(2))
        .sum::<f64>()
        / n.max(2.0).mul_add(1.0, -1.0);
    let se_mean = (var / n).sqrt();
    let bound_at = |m: f64| (0.5 * (m - 1.0).max(0.0).sqrt()).min(1.0);
    let bound = bound_at(mean);
    let se = 0.5 * (bound_at(mean + se_mean) - bound_at((mean - se_mean).max(1.0)));
    Ok((bound, se.max(0.0)))
}

/// Discrete Girsanov log Radon–Nikodym derivative of low-mode noise shifted
/// by the drift h, evaluated at the increments `beta_path` (field units, the
/// recorded b·Δβ):
///
///   Σ_k Σ_{n≤N*} [2·Re(h_n·conj(Δw_n)) - |h_n|²·dt] / b_n².
///
/// The factor 2 reflects the complex normalization E|Δw_n|² = b_n²·dt with
/// independent real and imaginary components of variance b_n²·dt/2; under it
/// E[exp(L)] = 1 for the free law.
pub fn girsanov_logdensity(
    h_path: &[Vec<Complex64>],
    beta_path: &[Vec<Complex64>],
    noise: &NoiseOperator,
    dt: f64,
) -> Result<f64> {
    if h_path.len() != beta_path.len() {
        return Err(Error::Dimension(format!(
            "h path has {} steps, β path {}",
            h_path.len(),
            beta_path.len()
        )));
    }
    let n_star = noise.n_star();
    for n in 1..=n_star {
        if noise.coeff(n) <= 0.0 {
            return Err(Error::Parameter(format!(
                "σ_l not invertible: b_{n} = 0 within the forced block"
            )));
        }
    }
    let mut total = 0.0;
    for (h, dw) in h_path.iter().zip(beta_path) {
        if h.len() < n_star || dw.len() < n_star {
            return Err(Error::Dimension("low-mode record shorter than N_*".into()));
        }
        for n in 1..=n_star {
            let b2 = noise.coeff(n) * noise.coeff(n);
            let hn = h[n - 1];
            let wn = dw[n - 1];
            total += (2.0 * (hn * wn.conj()).re - hn.norm_sqr() * dt) / b2;
        }
    }
    Ok(total)
}

/// Chain parameters for the cycle construction.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingConfig {
    /// Cycle length T.
    pub cycle_t: f64,
    /// Smallness threshold d₀ for H_l at the coupling epoch.
    pub d0: f64,
    /// Return-ball radius R₀ gating binding attempts.
    pub r0: f64,
    /// Slack constant κ in the Lyapunov growth cap.
    pub kappa: f64,
    /// Linear growth rate B in the Lyapunov growth cap.
    pub growth_b: f64,
    /// Extra exponential steepening of the binding ramp (0 = pure
    /// damping-matched ramp).
    pub bind_gain: f64,
    /// k₀ in the control-size bound ‖h‖₁² ≤ k₀·l(u₁,u₂)^{(2σ+1)/(3σ+1)}.
    pub bind_k0: f64,
    /// Residual-sampler attempt cap.
    pub attempt_cap: usize,
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 0.0) || self.r0 < self.d0 {
            return Err(Error::Parameter(format!(
                "need R₀ ≥ d₀ > 0, got d₀ = {}, R₀ = {}",
                self.d0, self.r0
            )));
        }
        if !(self.cycle_t > 0.0) {
            return Err(Error::Parameter("cycle length T must be positive".into()));
        }
        if self.attempt_cap == 0 {
            return Err(Error::Parameter("attempt cap must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Lyapunov cap κ + 1 + d₀^{3σ+1} + d₀^{6σ+2} + B·(t - lT).
    fn lyapunov_cap(&self, sigma: f64, elapsed: f64) -> f64 {
        self.kappa
            + 1.0
            + self.d0.powf(3.0 * sigma + 1.0)
            + self.d0.powf(6.0 * sigma + 2.0)
            + self.growth_b * elapsed
    }
}

/// Pair state at a cycle boundary.
#[derive(Debug, Clone)]
pub struct CouplingState {
    /// Completed cycles (current time is k·T).
    pub k: usize,
    /// Earliest coupling epoch still in force; `None` is l₀ = ∞.
    pub l0: Option<usize>,
    pub u1: SpectralField,
    pub u2: SpectralField,
    /// H_l recorded when the pair coupled.
    pub h_l: f64,
    /// E_{u_i,3σ+1}(·, l₀T) accumulators while coupled.
    pub lyap1: Option<LyapunovAccumulator>,
    pub lyap2: Option<LyapunovAccumulator>,
}

impl CouplingState {
    pub fn new(u1: SpectralField, u2: SpectralField) -> Self {
        Self {
            k: 0,
            l0: None,
            u1,
            u2,
            h_l: f64::NAN,
            lyap1: None,
            lyap2: None,
        }
    }

    pub fn coupled(&self) -> bool {
        self.l0.is_some()
    }
}

/// Which branch a cycle took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    V0,
    Va,
    Vb,
}

/// One line of the cycle log (serialized as JSON-lines by the runner).
#[derive(Debug, Clone, Serialize)]
pub struct CycleRecord {
    pub k: usize,
    pub branch: Branch,
    pub l0_before: Option<usize>,
    pub l0_after: Option<usize>,
    /// H_k at the cycle start.
    pub h_start: f64,
    /// H_{k+1} at the cycle end.
    pub h_end: f64,
    pub bind_attempted: bool,
    /// Maximal-coupling draw landed on the diagonal.
    pub bind_accepted: bool,
    /// Accepted, control bound held and H_{k+1} ≤ d₀: the pair coupled.
    pub bind_success: bool,
    /// Girsanov log-density of the shift along this cycle (binding attempt or
    /// the implicit V_b keep-equal drift).
    pub girsanov_logdensity: Option<f64>,
    /// ‖h‖₁² ≤ k₀·l^{(2σ+1)/(3σ+1)} held at every step.
    pub control_bound_ok: Option<bool>,
    /// Largest ‖h‖₁²/(k₀·l^{(2σ+1)/(3σ+1)}) seen.
    pub control_bound_ratio: Option<f64>,
    /// First (P_{l,k}) clause violated during a V_b cycle, if any.
    pub clause_failed: Option<String>,
    pub residual_attempts: usize,
    /// Residual sampling hit the attempt cap (trajectory 2 fell back to the
    /// last proposal; recorded, not fatal).
    pub residual_failed: bool,
}

/// Per-cycle diagnostics consumed by [`l0_update`].
#[derive(Debug, Clone)]
pub struct CycleDiagnostics {
    pub branch: Branch,
    pub bind_success: bool,
    pub clause_failed: Option<String>,
    pub h_end: f64,
}

/// Maintains l₀(k) = min{l : (P_{l,k}) holds} incrementally:
/// a fresh successful binding at the end of cycle k sets l₀ = k+1; any clause
/// violation resets to ∞; otherwise l₀ persists.
pub fn l0_update(state: &mut CouplingState, diag: &CycleDiagnostics) {
    let before = state.l0;
    match diag.branch {
        Branch::V0 => {
            debug_assert!(before.is_none());
        }
        Branch::Va => {
            debug_assert!(before.is_none());
            if diag.bind_success {
                state.l0 = Some(state.k + 1);
                state.h_l = diag.h_end;
            }
        }
        Branch::Vb => {
            debug_assert!(before.is_some());
            if diag.clause_failed.is_some() {
                state.l0 = None;
                state.h_l = f64::NAN;
                state.lyap1 = None;
                state.lyap2 = None;
            }
        }
    }
    // (H1): l₀(k+1) = l ≤ k implies l₀(k) = l; l₀(k+1) = k+1 only from a
    // fresh binding; the index never exceeds k+1.
    if let Some(l) = state.l0 {
        assert!(l <= state.k + 1, "l₀ = {l} beyond cycle {}", state.k + 1);
        if l <= state.k {
            assert_eq!(Some(l), before, "(H1) persistence violated");
        }
    }
}

/// Runs coupling cycles for one pair; owns the steppers, workspaces and all
/// scratch.  The observer hook sees both states every `observe_every` steps.
pub struct PairRunner {
    pub sim: SimConfig,
    pub cfg: CouplingConfig,
    stepper: Stepper,
    energy_ws: EnergyWorkspace,
    steps_per_cycle: usize,
}

/// Per-step view passed to cycle observers: global step index and the pair.
pub struct PairView<'a> {
    pub step: usize,
    pub u1: &'a SpectralField,
    pub u2: &'a SpectralField,
}

impl PairRunner {
    pub fn new(sim: SimConfig, cfg: CouplingConfig) -> Result<Self> {
        cfg.validate()?;
        let steps_per_cycle = (cfg.cycle_t / sim.dt - 1e-9).ceil().max(1.0) as usize;
        let stepper = Stepper::new(&sim);
        let energy_ws = EnergyWorkspace::new(sim.modes, sim.params.sigma);
        Ok(Self {
            sim,
            cfg,
            stepper,
            energy_ws,
            steps_per_cycle,
        })
    }

    pub fn steps_per_cycle(&self) -> usize {
        self.steps_per_cycle
    }

    fn h(&mut self, u: &SpectralField) -> Result<f64> {
        let params = self.sim.params.clone();
        self.energy_ws.h(u, &params)
    }

    /// Advances one full cycle [kT, (k+1)T].
    pub fn cycle<R: RngCore>(&mut self, state: CouplingState, rng: &mut R) -> Result<(CouplingState, CycleRecord)> {
        self.cycle_observed(state, rng, usize::MAX, &mut |_: PairView| {})
    }

    /// As [`cycle`], calling the observer every `observe_every` steps
    /// (step 0 of the chain is observed by the caller).
    pub fn cycle_observed<R: RngCore>(
        &mut self,
        mut state: CouplingState,
        rng: &mut R,
        observe_every: usize,
        observe: &mut dyn FnMut(PairView),
    ) -> Result<(CouplingState, CycleRecord)> {
        let h_start = self.h(&state.u1)? + self.h(&state.u2)?;
        let branch = if state.coupled() {
            Branch::Vb
        } else if h_start <= self.cfg.r0 {
            Branch::Va
        } else {
            Branch::V0
        };
        let l0_before = state.l0;
        let mut record = CycleRecord {
            k: state.k,
            branch,
            l0_before,
            l0_after: None,
            h_start,
            h_end: f64::NAN,
            bind_attempted: false,
            bind_accepted: false,
            bind_success: false,
            girsanov_logdensity: None,
            control_bound_ok: None,
            control_bound_ratio: None,
            clause_failed: None,
            residual_attempts: 0,
            residual_failed: false,
        };
        match branch {
            Branch::V0 => self.run_shared_noise(&mut state, rng, false, &mut record, observe_every, observe)?,
            Branch::Vb => self.run_shared_noise(&mut state, rng, true, &mut record, observe_every, observe)?,
            Branch::Va => self.run_binding(&mut state, rng, &mut record, observe_every, observe)?,
        }
        let h_end = self.h(&state.u1)? + self.h(&state.u2)?;
        record.h_end = h_end;
        if branch == Branch::Va {
            record.bind_success =
                record.bind_accepted && record.control_bound_ok.unwrap_or(true) && h_end <= self.cfg.d0;
        }
        let diag = CycleDiagnostics {
            branch,
            bind_success: record.bind_success,
            clause_failed: record.clause_failed.clone(),
            h_end,
        };
        l0_update(&mut state, &diag);
        if record.bind_success {
            let k_exp = 3.0 * self.sim.params.sigma + 1.0;
            let t_l = (state.k + 1) as f64 * self.cfg.cycle_t;
            let h1 = self.h(&state.u1)?;
            let h2 = self.h(&state.u2)?;
            state.lyap1 = Some(LyapunovAccumulator::new(h_pow(h1, k_exp), t_l, k_exp));
            state.lyap2 = Some(LyapunovAccumulator::new(h_pow(h2, k_exp), t_l, k_exp));
        }
        state.k += 1;
        record.l0_after = state.l0;
        Ok((state, record))
    }

    /// V⁰ and Vᵇ dynamics: one shared Wiener path for the pair; in the
    /// coupled regime the low modes of trajectory 1 are assigned from
    /// trajectory 2 each step and the clauses are checked.
    fn run_shared_noise<R: RngCore>(
        &mut self,
        state: &mut CouplingState,
        rng: &mut R,
        keep_equal: bool,
        record: &mut CycleRecord,
        observe_every: usize,
        observe: &mut dyn FnMut(PairView),
    ) -> Result<()> {
        let dt = self.sim.dt;
        let n_star = self.sim.noise.n_star();
        let sigma = self.sim.params.sigma;
        let k_exp = 3.0 * sigma + 1.0;
        let base_step = state.k * self.steps_per_cycle;
        let mut girsanov = 0.0;
        if keep_equal {
            // Machine-exact equality clause at the cycle start.
            for n in 1..=n_star {
                if state.u1.coeff(n) != state.u2.coeff(n) {
                    record.clause_failed = Some("low-mode equality".into());
                }
            }
        }
        for step in 0..self.steps_per_cycle {
            let dw = sample_increment(&self.sim.noise, dt, rng)?;
            if keep_equal {
                // Deterministic parts diverge through the high modes; the
                // difference of their low parts is the implicit binding drift.
                self.stepper.deterministic_step(&mut state.u1);
                self.stepper.deterministic_step(&mut state.u2);
                for n in 1..=n_star {
                    let h_n = (state.u2.coeff(n) - state.u1.coeff(n)) / dt;
                    let b2 = self.sim.noise.coeff(n).powi(2);
                    let wn = dw.delta[n - 1];
                    girsanov += (2.0 * (h_n * wn.conj()).re - h_n.norm_sqr() * dt) / b2;
                }
                add_increment(&mut state.u1, &dw);
                add_increment(&mut state.u2, &dw);
                for n in 1..=n_star {
                    state.u1.set_coeff(n, state.u2.coeff(n));
                }
            } else {
                self.stepper.deterministic_step(&mut state.u1);
                self.stepper.deterministic_step(&mut state.u2);
                add_increment(&mut state.u1, &dw);
                add_increment(&mut state.u2, &dw);
            }
            if !state.u1.is_finite() || !state.u2.is_finite() {
                return Err(Error::BlowUp {
                    step: base_step + step,
                    detail: "pair state went non-finite".into(),
                });
            }
            if keep_equal {
                let params = self.sim.params.clone();
                let h1 = self.energy_ws.h(&state.u1, &params)?;
                let h2 = self.energy_ws.h(&state.u2, &params)?;
                let elapsed_from_l = ((state.k * self.steps_per_cycle + step + 1) as f64) * dt
                    - state.l0.expect("coupled") as f64 * self.cfg.cycle_t;
                let cap = self.cfg.lyapunov_cap(sigma, elapsed_from_l);
                if let (Some(a1), Some(a2)) = (state.lyap1.as_mut(), state.lyap2.as_mut()) {
                    a1.advance(h_pow(h1, k_exp), dt, params.alpha);
                    a2.advance(h_pow(h2, k_exp), dt, params.alpha);
                    if record.clause_failed.is_none() {
                        if a1.value() > cap {
                            record.clause_failed = Some("lyapunov cap (u1)".into());
                        } else if a2.value() > cap {
                            record.clause_failed = Some("lyapunov cap (u2)".into());
                        }
                    }
                }
            }
            if (base_step + step + 1) % observe_every == 0 {
                observe(PairView {
                    step: base_step + step + 1,
                    u1: &state.u1,
                    u2: &state.u2,
                });
            }
        }
        if keep_equal {
            record.girsanov_logdensity = Some(girsanov);
            if !(state.h_l <= self.cfg.d0) && record.clause_failed.is_none() {
                record.clause_failed = Some("H_l ≤ d₀".into());
            }
        }
        Ok(())
    }

    /// Vᵃ: the binding attempt (see the module docs for the construction).
    fn run_binding<R: RngCore>(
        &mut self,
        state: &mut CouplingState,
        rng: &mut R,
        record: &mut CycleRecord,
        observe_every: usize,
        observe: &mut dyn FnMut(PairView),
    ) -> Result<()> {
        record.bind_attempted = true;
        let steps = self.steps_per_cycle;
        let n_star = self.sim.noise.n_star();
        let dt = self.sim.dt;
        let base_step = state.k * self.steps_per_cycle;

        // Shared high-mode increments for the cycle (kept for residual
        // re-simulation of trajectory 2).
        let mut eta: Vec<WienerIncrement> = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut inc = sample_increment(&self.sim.noise, dt, rng)?;
            for n in 1..=n_star {
                inc.delta[n - 1] = Complex64::new(0.0, 0.0);
            }
            eta.push(inc);
        }
        // Trajectory 1's noise: fresh low-mode increments under the shared η.
        let z1: Vec<Vec<Complex64>> = (0..steps)
            .map(|_| self.draw_low_increment(rng))
            .collect();

        // Triangular inversion along z₁: candidate trajectory 1 runs free on
        // (z₁, η); the partner's low path is the candidate's minus the ramped
        // free-flow gap, its high part reconstructed with the shared η.  The
        // accumulated Girsanov density prices the implied shift at z₁.
        let inv = self.binding_pass_observed(state.u1.clone(), state.u2.clone(), &z1, &eta)?;
        record.girsanov_logdensity = Some(inv.log_density);
        record.control_bound_ok = Some(inv.bound_ok);
        record.control_bound_ratio = Some(inv.max_bound_ratio);

        let accept = uniform_unit(rng).ln() < inv.log_density;
        record.bind_accepted = accept;

        let (u2_final, residual_attempts, residual_failed) = if accept {
            (inv.partner_final, 0, false)
        } else {
            // Residual sampling: forward-simulate the shifted pair from fresh
            // partner noise until the residual rejection accepts.
            let mut outcome = None;
            let mut attempts = 0;
            let mut accepted_residual = false;
            for attempt in 1..=self.cfg.attempt_cap {
                attempts = attempt;
                let fwd =
                    self.binding_pass_fresh(state.u1.clone(), state.u2.clone(), &eta, rng)?;
                let lr = fwd.log_density;
                outcome = Some(fwd.partner_final);
                if lr > 0.0 && uniform_unit(rng) < -(-lr).exp_m1() {
                    accepted_residual = true;
                    break;
                }
            }
            (
                outcome.expect("at least one attempt"),
                attempts,
                !accepted_residual,
            )
        };
        record.residual_attempts = residual_attempts;
        record.residual_failed = residual_failed;

        // Trajectory 1 always follows its free draw z₁.
        let mut u1 = state.u1.clone();
        for (step, z) in z1.iter().enumerate() {
            self.stepper.deterministic_step(&mut u1);
            for n in 1..=n_star {
                u1.set_coeff(n, u1.coeff(n) + z[n - 1]);
            }
            for n in (n_star + 1)..=self.sim.modes {
                u1.set_coeff(n, u1.coeff(n) + eta[step].delta[n - 1]);
            }
            if !u1.is_finite() {
                return Err(Error::BlowUp {
                    step: base_step + step,
                    detail: "trajectory 1 went non-finite during binding".into(),
                });
            }
            if (base_step + step + 1) % observe_every == 0 {
                observe(PairView {
                    step: base_step + step + 1,
                    u1: &u1,
                    u2: &state.u2, // end-of-cycle state is what matters downstream
                });
            }
        }
        state.u1 = u1;
        state.u2 = u2_final;
        if accept {
            // The construction ends with equal low modes; enforce bitwise.
            for n in 1..=n_star {
                state.u2.set_coeff(n, state.u1.coeff(n));
            }
        }
        Ok(())
    }

    fn draw_low_increment<R: RngCore>(&self, rng: &mut R) -> Vec<Complex64> {
        let n_star = self.sim.noise.n_star();
        let half = (self.sim.dt / 2.0).sqrt();
        (1..=n_star)
            .map(|n| {
                let (x, y) = standard_normal_pair(rng);
                let b = self.sim.noise.coeff(n);
                Complex64::new(b * half * x, b * half * y)
            })
            .collect()
    }

    /// Damping-matched ramp: 1 at t = 0, exactly 0 at t = T, with the mass of
    /// the push concentrated late where the Girsanov discount is smallest.
    fn ramp(&self, t: f64) -> f64 {
        let a = self.sim.params.alpha;
        let t_end = self.steps_per_cycle as f64 * self.sim.dt;
        let gain = (-self.cfg.bind_gain * t).exp();
        if 2.0 * a * t_end < 1e-9 {
            return gain * (1.0 - t / t_end);
        }
        let e_t = (2.0 * a * t).exp();
        let e_end = (2.0 * a * t_end).exp();
        gain * (e_end - e_t) / (e_end - 1.0)
    }

    /// Triangular inversion of the shift map at observed trajectory-1
    /// increments z₁: the candidate runs free on (z₁, η); the partner's low
    /// path is the candidate's minus the scheduled gap, its high part
    /// reconstructed with the shared η; the implied per-step shift h and its
    /// Girsanov log-density are read off along the way.
    fn binding_pass_observed(
        &mut self,
        u1_start: SpectralField,
        u2_start: SpectralField,
        z1: &[Vec<Complex64>],
        eta: &[WienerIncrement],
    ) -> Result<BindingOutcome> {
        self.binding_pass(u1_start, u2_start, eta, |ctx, step, n| {
            let z_n = z1[step][n - 1];
            let cand_next = ctx.candidate_coeff + z_n;
            let x2_next = cand_next - ctx.gap_next;
            (cand_next, x2_next, z_n)
        })
    }

    /// Forward construction for residual sampling: the partner is driven by
    /// fresh noise, the candidate is shifted onto it, and the density is
    /// evaluated at the shifted increments.
    fn binding_pass_fresh<R: RngCore>(
        &mut self,
        u1_start: SpectralField,
        u2_start: SpectralField,
        eta: &[WienerIncrement],
        rng: &mut R,
    ) -> Result<BindingOutcome> {
        let dw2: Vec<Vec<Complex64>> = (0..eta.len()).map(|_| self.draw_low_increment(rng)).collect();
        self.binding_pass(u1_start, u2_start, eta, |ctx, step, n| {
            let x2_next = ctx.det_partner_coeff + dw2[step][n - 1];
            let cand_next = x2_next + ctx.gap_next;
            let z_n = cand_next - ctx.candidate_coeff;
            (cand_next, x2_next, z_n)
        })
    }

    /// Shared skeleton of the two binding passes.
    ///
    /// The scheduled low-mode gap follows its natural shared-noise evolution
    /// scaled down by the ramp:  D_{k+1} = (ρ_{k+1}/ρ_k)·P[det(ũ₁) - det(u₂')]
    /// with D_0 = X₁(kT) - X₂(kT) and ρ(T) = 0 exactly.  The shift h only
    /// pays for the ramp kill of an already-contracting gap, so its Girsanov
    /// cost carries the e^{-2αT} discount; forcing the gap onto the bare
    /// linear flow instead would price the nonlinear mismatch through
    /// σ_l⁻¹ at every step and reject essentially always.
    ///
    /// `advance_low` returns, per low mode, the next candidate coefficient,
    /// the next partner coefficient and the candidate-side increment z_n at
    /// which the density is evaluated.
    fn binding_pass(
        &mut self,
        u1_start: SpectralField,
        u2_start: SpectralField,
        eta: &[WienerIncrement],
        mut advance_low: impl FnMut(&LowStepContext, usize, usize) -> (Complex64, Complex64, Complex64),
    ) -> Result<BindingOutcome> {
        let dt = self.sim.dt;
        let n_star = self.sim.noise.n_star();
        let m = self.sim.modes;
        let sigma = self.sim.params.sigma;
        let params = self.sim.params.clone();
        let bound_exp = (2.0 * sigma + 1.0) / (3.0 * sigma + 1.0);
        let mut candidate = u1_start; // carries the shifted trajectory-1 law
        let mut partner = u2_start; // carries the free trajectory-2 law
        let mut log_density = 0.0;
        let mut max_ratio: f64 = 0.0;
        for (step, eta_inc) in eta.iter().enumerate() {
            let t_now = step as f64 * dt;
            let t_next = (step + 1) as f64 * dt;
            // l(u₁,u₂) at the step start for the control-size bound.
            let l_now = {
                let h1 = self.energy_ws.h(&candidate, &params)?;
                let h2 = self.energy_ws.h(&partner, &params)?;
                1.0 + h_pow(h1, 3.0 * sigma + 1.0) + h_pow(h2, 3.0 * sigma + 1.0)
            };
            let det_partner = {
                let mut p = partner.clone();
                self.stepper.deterministic_step(&mut p);
                p
            };
            self.stepper.deterministic_step(&mut candidate);
            let ramp_ratio = {
                let r_now = self.ramp(t_now);
                if r_now == 0.0 {
                    0.0
                } else {
                    self.ramp(t_next) / r_now
                }
            };
            let mut h_sq_h1 = 0.0;
            for n in 1..=n_star {
                // Natural evolution of the gap under shared noise, then the
                // ramp scaling; the difference is the control.
                let gap_free = candidate.coeff(n) - det_partner.coeff(n);
                let ctx = LowStepContext {
                    candidate_coeff: candidate.coeff(n),
                    det_partner_coeff: det_partner.coeff(n),
                    gap_next: ramp_ratio * gap_free,
                };
                let (cand_next, x2_next, z_n) = advance_low(&ctx, step, n);
                let dw2_n = x2_next - det_partner.coeff(n);
                let h_n = (z_n - dw2_n) / dt;
                let b2 = self.sim.noise.coeff(n).powi(2);
                log_density += (2.0 * (h_n * z_n.conj()).re - h_n.norm_sqr() * dt) / b2;
                h_sq_h1 += crate::spectral::eigenvalue(n) * h_n.norm_sqr();
                candidate.set_coeff(n, cand_next);
                partner.set_coeff(n, x2_next);
            }
            for n in (n_star + 1)..=m {
                let d = eta_inc.delta[n - 1];
                candidate.set_coeff(n, candidate.coeff(n) + d);
                partner.set_coeff(n, det_partner.coeff(n) + d);
            }
            if !candidate.is_finite() || !partner.is_finite() {
                return Err(Error::BlowUp {
                    step,
                    detail: "binding pass went non-finite".into(),
                });
            }
            let cap = self.cfg.bind_k0 * l_now.powf(bound_exp);
            max_ratio = max_ratio.max(h_sq_h1 / cap.max(1e-300));
        }
        Ok(BindingOutcome {
            log_density,
            bound_ok: max_ratio <= 1.0,
            max_bound_ratio: max_ratio,
            partner_final: partner,
        })
    }
}

/// Per-mode quantities visible to a binding pass when advancing a low mode.
struct LowStepContext {
    candidate_coeff: Complex64,
    det_partner_coeff: Complex64,
    /// Scheduled gap X̃₁ - X₂ after this step.
    gap_next: Complex64,
}

struct BindingOutcome {
    log_density: f64,
    bound_ok: bool,
    max_bound_ratio: f64,
    /// Partner terminal state under the construction.
    partner_final: SpectralField,
}

fn add_increment(u: &mut SpectralField, dw: &WienerIncrement) {
    for (c, d) in u.coeffs_mut().iter_mut().zip(&dw.delta) {
        *c += d;
    }
}

/// The planned binding control for a given partner low-mode record: the
/// controlled solution from `x1_start`, driven by the partner's own noise
/// increments, tracks X₂ + ramp(t)·(damped free flow of the initial gap) and
/// meets x₂(T) exactly at the cycle end.
pub struct ControlOutcome {
    /// Low-mode control at each step (field units, length N_*).
    pub h_path: Vec<Vec<Complex64>>,
    /// The realized controlled low path (length steps+1).
    pub x1_path: Vec<SpectralField>,
    /// ‖h‖₁² ≤ k₀·l^{(2σ+1)/(3σ+1)} held at every step.
    pub bound_ok: bool,
    pub max_bound_ratio: f64,
    /// |X₁(T) - X₂(T)|₂ (0 up to rounding by construction).
    pub terminal_gap: f64,
}

/// Builds the binding control for the low-mode system alone (high modes
/// zero): used for closed-form verification; the chain uses the full-field
/// passes above with the same gap schedule.
pub fn build_control(
    x1_start: &SpectralField,
    x2_states: &[SpectralField],
    x2_increments: &[Vec<Complex64>],
    sim: &SimConfig,
    cfg: &CouplingConfig,
) -> Result<ControlOutcome> {
    let n_star = sim.noise.n_star();
    if x2_states.len() != x2_increments.len() + 1 {
        return Err(Error::Contract(format!(
            "partner path has {} states and {} increments",
            x2_states.len(),
            x2_increments.len()
        )));
    }
    for (k, x) in x2_states.iter().enumerate() {
        for n in (n_star + 1)..=x.modes() {
            if x.coeff(n).norm_sqr() > 0.0 {
                return Err(Error::Contract(format!(
                    "partner state {k} supported on mode {n} > N_*"
                )));
            }
        }
    }
    for n in (n_star + 1)..=x1_start.modes() {
        if x1_start.coeff(n).norm_sqr() > 0.0 {
            return Err(Error::Contract(format!("start supported on mode {n} > N_*")));
        }
    }
    let steps = x2_increments.len();
    let dt = sim.dt;
    let sigma = sim.params.sigma;
    let bound_exp = (2.0 * sigma + 1.0) / (3.0 * sigma + 1.0);
    let params = sim.params.clone();
    let mut stepper = Stepper::new(sim);
    let mut ws = EnergyWorkspace::new(sim.modes, sigma);
    let ramp = |t: f64| -> f64 {
        let a = params.alpha;
        let t_end = steps as f64 * dt;
        let gain = (-cfg.bind_gain * t).exp();
        if 2.0 * a * t_end < 1e-9 {
            gain * (1.0 - t / t_end)
        } else {
            let e_t = (2.0 * a * t).exp();
            let e_end = (2.0 * a * t_end).exp();
            gain * (e_end - e_t) / (e_end - 1.0)
        }
    };
    let mut x1 = x1_start.clone();
    let mut x1_path = vec![x1.clone()];
    let mut h_path = Vec::with_capacity(steps);
    let mut max_ratio: f64 = 0.0;
    for step in 0..steps {
        let t_now = step as f64 * dt;
        let t_next = (step + 1) as f64 * dt;
        let l_now = {
            let h1 = ws.h(&x1, &params)?;
            let h2 = ws.h(&x2_states[step], &params)?;
            1.0 + h_pow(h1, 3.0 * sigma + 1.0) + h_pow(h2, 3.0 * sigma + 1.0)
        };
        let mut det = x1.clone();
        stepper.deterministic_step(&mut det);
        let mut det2 = x2_states[step].clone();
        stepper.deterministic_step(&mut det2);
        let ramp_ratio = {
            let r_now = ramp(t_now);
            if r_now == 0.0 {
                0.0
            } else {
                ramp(t_next) / r_now
            }
        };
        let mut h_step = Vec::with_capacity(n_star);
        let mut h_sq_h1 = 0.0;
        for n in 1..=n_star {
            // Gap follows its natural evolution scaled by the vanishing ramp.
            let gap_free = det.coeff(n) - det2.coeff(n);
            let target = x2_states[step + 1].coeff(n) + ramp_ratio * gap_free;
            let h_n = (target - det.coeff(n) - x2_increments[step][n - 1]) / dt;
            h_step.push(h_n);
            h_sq_h1 += crate::spectral::eigenvalue(n) * h_n.norm_sqr();
            x1.set_coeff(n, target);
        }
        for n in (n_star + 1)..=sim.modes {
            x1.set_coeff(n, Complex64::new(0.0, 0.0));
        }
        let cap = cfg.bind_k0 * l_now.powf(bound_exp);
        max_ratio = max_ratio.max(h_sq_h1 / cap.max(1e-300));
        h_path.push(h_step);
        x1_path.push(x1.clone());
    }
    let terminal_gap = x1.sub(x2_states.last().expect("nonempty")).l2_norm();
    Ok(ControlOutcome {
        h_path,
        x1_path,
        bound_ok: max_ratio <= 1.0,
        max_bound_ratio: max_ratio,
        terminal_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{EnergyParams, Sign};
    use crate::noise::trajectory_rng;

    fn gaussian_sampler(mean: f64) -> impl FnMut(&mut rand_chacha::ChaCha8Rng) -> f64 {
        move |rng| {
            let (z, _) = standard_normal_pair(rng);
            z + mean
        }
    }

    /// TV of two unit-variance Gaussians by direct quadrature of ½∫|φ₁-φ₂|.
    fn gaussian_tv(delta: f64) -> f64 {
        let n = 20_000;
        let lo = -10.0;
        let hi = 10.0 + delta;
        let w = (hi - lo) / n as f64;
        let phi = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * w;
                (phi(x, 0.0) - phi(x, delta)).abs() * w
            })
            .sum::<f64>()
            / 2.0
    }

    #[test]
    fn maximal_coupling_matches_gaussian_tv() {
        let mut rng = trajectory_rng(1234, 0);
        for (delta, n) in [(1.0, 100_000usize), (0.5, 100_000)] {
            let expected = gaussian_tv(delta);
            let mut unequal = 0usize;
            for _ in 0..n {
                let draw = maximal_coupling(
                    gaussian_sampler(0.0),
                    gaussian_sampler(delta),
                    |z| delta * z - delta * delta / 2.0,
                    10_000,
                    &mut rng,
                )
                .unwrap();
                if !draw.equal {
                    unequal += 1;
                }
            }
            let p = unequal as f64 / n as f64;
            let se = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!(
                (p - expected).abs() < 3.0 * se,
                "δ={delta}: P(Z₁≠Z₂) = {p} vs TV = {expected} (3se = {})",
                3.0 * se
            );
        }
    }

    #[test]
    fn maximal_coupling_identical_measures_always_equal() {
        let mut rng = trajectory_rng(7, 0);
        for _ in 0..1000 {
            let draw = maximal_coupling(
                gaussian_sampler(0.0),
                gaussian_sampler(0.0),
                |_| 0.0,
                10,
                &mut rng,
            )
            .unwrap();
            assert!(draw.equal);
            assert_eq!(draw.z1, draw.z2);
        }
    }

    #[test]
    fn maximal_coupling_disjoint_supports_never_equal() {
        // Uniform on [0,1] vs uniform on [2,3]: the ratio is -∞/+∞ off/on
        // the second support.
        let mut rng = trajectory_rng(8, 0);
        for _ in 0..500 {
            let draw = maximal_coupling(
                |r: &mut rand_chacha::ChaCha8Rng| uniform_unit(r),
                |r: &mut rand_chacha::ChaCha8Rng| 2.0 + uniform_unit(r),
                |z| if *z >= 2.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                10,
                &mut rng,
            )
            .unwrap();
            assert!(!draw.equal);
            assert!(draw.z1 < 2.0 && draw.z2 >= 2.0);
        }
    }

    #[test]
    fn maximal_coupling_marginals_are_exact() {
        // The second marginal must be μ₂ = N(δ,1) despite the coupling.
        let mut rng = trajectory_rng(99, 0);
        let delta = 0.7;
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let draw = maximal_coupling(
                gaussian_sampler(0.0),
                gaussian_sampler(delta),
                |z| delta * z - delta * delta / 2.0,
                10_000,
                &mut rng,
            )
            .unwrap();
            sum += draw.z2;
            sumsq += draw.z2 * draw.z2;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (1.0 / n as f64).sqrt();
        assert!((mean - delta).abs() < 4.0 * se, "mean {mean} vs {delta}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn tv_upper_bound_examples() {
        // Identical measures: all log-ratios zero.
        let (b, _) = tv_upper_bound(&[0.0; 100]).unwrap();
        assert_eq!(b, 0.0);
        assert!(tv_upper_bound(&[]).is_err());
        // Gaussian shift δ: ∫(dμ₁/dμ₂)²dμ₂ = e^{δ²}.
        let delta = 0.5_f64;
        let mut rng = trajectory_rng(55, 0);
        let samples: Vec<f64> = (0..400_000)
            .map(|_| {
                let (z, _) = standard_normal_pair(&mut rng);
                // log dμ₁/dμ₂ at a draw from μ₂ = N(0,1), μ₁ = N(δ,1).
                delta * z - delta * delta / 2.0
            })
            .collect();
        let (bound, se) = tv_upper_bound(&samples).unwrap();
        let expected = 0.5 * ((delta * delta).exp() - 1.0_f64).sqrt();
        assert!(
            (bound - expected).abs() < 4.0 * se.max(1e-4),
            "bound {bound} vs {expected} (se {se})"
        );
        // And the bound dominates the true TV.
        assert!(bound > gaussian_tv(delta));
    }

    fn small_sim(m: usize, n_star: usize, dt: f64) -> SimConfig {
        let params = EnergyParams::new(1.0, Sign::Defocusing, 1.0).unwrap();
        let noise = NoiseOperator::power_law(m, 1.0, 2.0, m, n_star).unwrap();
        SimConfig::new(m, dt, 1.0, params, noise).unwrap()
    }

    fn small_coupling() -> CouplingConfig {
        CouplingConfig {
            cycle_t: 0.25,
            d0: 2.0,
            r0: 20.0,
            kappa: 40.0,
            growth_b: 80.0,
            bind_gain: 0.0,
            bind_k0: 200.0,
            attempt_cap: 200,
        }
    }

    #[test]
    fn girsanov_cameron_martin_closed_form() {
        // Constant shift over [0,T]: L = Σ[2Re(h·conj(w(T))) - |h|²T]/b².
        let noise = NoiseOperator::new(vec![0.7, 0.3], 2).unwrap();
        let dt = 0.01;
        let steps = 100;
        let t = dt * steps as f64;
        let h = vec![Complex64::new(0.2, -0.1), Complex64::new(-0.05, 0.15)];
        let mut rng = trajectory_rng(3, 1);
        let mut beta = Vec::new();
        let mut w_total = [Complex64::new(0.0, 0.0); 2];
        for _ in 0..steps {
            let inc = sample_increment(&noise, dt, &mut rng).unwrap();
            w_total[0] += inc.delta[0];
            w_total[1] += inc.delta[1];
            beta.push(inc.delta.clone());
        }
        let h_path = vec![h.clone(); steps];
        let ld = girsanov_logdensity(&h_path, &beta, &noise, dt).unwrap();
        let mut expected = 0.0;
        for n in 0..2 {
            let b2 = noise.coeff(n + 1).powi(2);
            expected += (2.0 * (h[n] * w_total[n].conj()).re - h[n].norm_sqr() * t) / b2;
        }
        assert!((ld - expected).abs() < 1e-12, "{ld} vs {expected}");
        // Additivity over sub-paths.
        let ld1 = girsanov_logdensity(&h_path[..40], &beta[..40], &noise, dt).unwrap();
        let ld2 = girsanov_logdensity(&h_path[40..], &beta[40..], &noise, dt).unwrap();
        assert!((ld1 + ld2 - ld).abs() < 1e-12);
        // h ≡ 0 → 0.
        let zeros = vec![vec![Complex64::new(0.0, 0.0); 2]; steps];
        assert_eq!(girsanov_logdensity(&zeros, &beta, &noise, dt).unwrap(), 0.0);
    }

    #[test]
    fn girsanov_density_normalizes_to_one() {
        // E[e^L] = 1 under the free law fixes the factor-2 convention.
        let noise = NoiseOperator::new(vec![0.5], 1).unwrap();
        let dt = 0.05;
        let steps = 20;
        let h = vec![Complex64::new(0.3, 0.2)];
        let h_path = vec![h; steps];
        let mut rng = trajectory_rng(17, 0);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let beta: Vec<Vec<Complex64>> = (0..steps)
                .map(|_| sample_increment(&noise, dt, &mut rng).unwrap().delta)
                .collect();
            let l = girsanov_logdensity(&h_path, &beta, &noise, dt).unwrap();
            let e = l.exp();
            sum += e;
            sumsq += e * e;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - 1.0).abs() < 4.0 * se,
            "E[e^L] = {mean} (se {se}); factor-2 convention broken"
        );
    }

    #[test]
    fn girsanov_rejects_degenerate_low_block() {
        let noise = NoiseOperator::new(vec![1.0, 0.0], 2).unwrap();
        let err = girsanov_logdensity(&[], &[], &noise, 0.1);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn build_control_zero_gap_same_noise_gives_zero_control() {
        let m = 8;
        let n_star = 3;
        let sim = small_sim(m, n_star, 0.01);
        let ccfg = small_coupling();
        // Partner low path driven by its own noise.
        let mut rng = trajectory_rng(5, 0);
        let steps = 25;
        let mut x2 = SpectralField::basis_mode(m, 1).scale(Complex64::new(0.3, 0.0));
        let mut stepper = Stepper::new(&sim);
        let mut states = vec![x2.clone()];
        let mut incs = Vec::new();
        for _ in 0..steps {
            let mut det = x2.clone();
            stepper.deterministic_step(&mut det);
            let inc: Vec<Complex64> = (1..=n_star)
                .map(|n| {
                    let (a, b) = standard_normal_pair(&mut rng);
                    let s = sim.noise.coeff(n) * (sim.dt / 2.0).sqrt();
                    Complex64::new(s * a, s * b)
                })
                .collect();
            for n in 1..=n_star {
                x2.set_coeff(n, det.coeff(n) + inc[n - 1]);
            }
            for n in (n_star + 1)..=m {
                x2.set_coeff(n, Complex64::new(0.0, 0.0));
            }
            states.push(x2.clone());
            incs.push(inc);
        }
        let out = build_control(&states[0], &states, &incs, &sim, &ccfg).unwrap();
        let h_max: f64 = out
            .h_path
            .iter()
            .flat_map(|h| h.iter().map(|c| c.norm()))
            .fold(0.0, f64::max);
        assert!(h_max < 1e-10, "control should vanish, max |h| = {h_max}");
        assert!(out.terminal_gap < 1e-12);
    }

    #[test]
    fn build_control_reaches_target_and_reintegrates() {
        let m = 8;
        let n_star = 3;
        let sim = small_sim(m, n_star, 0.005);
        let ccfg = small_coupling();
        let mut rng = trajectory_rng(6, 0);
        let steps = 50;
        let mut x2 = SpectralField::basis_mode(m, 2).scale(Complex64::new(0.4, 0.1));
        let mut stepper = Stepper::new(&sim);
        let mut states = vec![x2.clone()];
        let mut incs = Vec::new();
        for _ in 0..steps {
            let mut det = x2.clone();
            stepper.deterministic_step(&mut det);
            let inc: Vec<Complex64> = (1..=n_star)
                .map(|n| {
                    let (a, b) = standard_normal_pair(&mut rng);
                    let s = sim.noise.coeff(n) * (sim.dt / 2.0).sqrt();
                    Complex64::new(s * a, s * b)
                })
                .collect();
            for n in 1..=n_star {
                x2.set_coeff(n, det.coeff(n) + inc[n - 1]);
            }
            for n in (n_star + 1)..=m {
                x2.set_coeff(n, Complex64::new(0.0, 0.0));
            }
            states.push(x2.clone());
            incs.push(inc);
        }
        let x1_start = SpectralField::basis_mode(m, 1).scale(Complex64::new(0.2, -0.3));
        let out = build_control(&x1_start, &states, &incs, &sim, &ccfg).unwrap();
        assert!(out.terminal_gap < 1e-10, "terminal gap {}", out.terminal_gap);
        // Independent re-integration: X_{k+1} = P det(X_k) + ΔW + h·dt must
        // land on the partner's endpoint.
        let mut x = x1_start.clone();
        for k in 0..steps {
            let mut det = x.clone();
            stepper.deterministic_step(&mut det);
            for n in 1..=n_star {
                x.set_coeff(
                    n,
                    det.coeff(n) + incs[k][n - 1] + out.h_path[k][n - 1] * sim.dt,
                );
            }
            for n in (n_star + 1)..=m {
                x.set_coeff(n, Complex64::new(0.0, 0.0));
            }
        }
        let gap = x.sub(states.last().unwrap()).l2_norm();
        assert!(gap < 1e-8, "re-integrated terminal gap {gap}");
        assert!(out.bound_ok, "bound ratio {}", out.max_bound_ratio);
    }

    #[test]
    fn build_control_sigma_zero_matches_linear_closed_form() {
        // σ = 0: the low system is diagonal and the controlled gap is
        // ramp(t)·e^{-(iμ+α)t}·g₀ exactly, so h has the closed form
        // h = (gap_{k+1} - e^{-(iμ+α)dt}·(gap_k e^{iλdt})) / dt ... verified
        // indirectly: the realized gap follows the schedule.
        let m = 4;
        let n_star = 2;
        let params = EnergyParams::new(0.0, Sign::Defocusing, 1.0).unwrap();
        let noise = NoiseOperator::power_law(m, 1.0, 2.0, m, n_star).unwrap();
        let sim = SimConfig::new(m, 0.01, 1.0, params, noise).unwrap();
        let ccfg = small_coupling();
        let steps = 30;
        // Zero-noise partner for a clean closed form.
        let incs = vec![vec![Complex64::new(0.0, 0.0); n_star]; steps];
        let mut states = Vec::with_capacity(steps + 1);
        let mut x2 = SpectralField::basis_mode(m, 1).scale(Complex64::new(0.5, 0.0));
        let mut stepper = Stepper::new(&sim);
        states.push(x2.clone());
        for _ in 0..steps {
            stepper.deterministic_step(&mut x2);
            for n in (n_star + 1)..=m {
                x2.set_coeff(n, Complex64::new(0.0, 0.0));
            }
            states.push(x2.clone());
        }
        let x1_start = states[0].scale(Complex64::new(1.4, 0.0));
        let g0 = x1_start.sub(&states[0]);
        let out = build_control(&x1_start, &states, &incs, &sim, &ccfg).unwrap();
        let t_end = steps as f64 * sim.dt;
        for (k, x1) in out.x1_path.iter().enumerate() {
            let t = k as f64 * sim.dt;
            let e_t = (2.0 * t).exp();
            let e_end = (2.0 * t_end).exp();
            let ramp = (e_end - e_t) / (e_end - 1.0);
            // σ = 0, λ = -1: the per-mode gap flow is e^{(iλ - iμ_n - α)t},
            // damping-matched linear flow times the global nonlinear phase.
            let phase = Complex64::new(0.0, -t).exp();
            let expected_gap =
                crate::spectral::linear_flow(&g0, t, 1.0).scale(phase * ramp);
            let got_gap = x1.sub(&states[k]);
            assert!(
                got_gap.sub(&expected_gap).l2_norm() < 1e-10,
                "step {k}: gap off schedule by {}",
                got_gap.sub(&expected_gap).l2_norm()
            );
        }
        assert!(out.terminal_gap < 1e-12);
    }

    #[test]
    fn cycle_branches_follow_l0_and_energy() {
        let m = 8;
        let sim = small_sim(m, 3, 0.01);
        let ccfg = small_coupling();
        let mut runner = PairRunner::new(sim, ccfg).unwrap();
        let mut rng = trajectory_rng(11, 0);
        // Large states: V⁰.
        let big = SpectralField::basis_mode(m, 1).scale(Complex64::new(3.0, 0.0));
        let state = CouplingState::new(big.clone(), big.scale(Complex64::new(-1.0, 0.0)));
        let (state, rec) = runner.cycle(state, &mut rng).unwrap();
        assert_eq!(rec.branch, Branch::V0);
        assert!(rec.l0_after.is_none());
        // Small states: Vᵃ.
        let small = SpectralField::basis_mode(m, 1).scale(Complex64::new(0.1, 0.0));
        let state2 = CouplingState::new(small.clone(), small.clone());
        let (_, rec2) = runner.cycle(state2, &mut rng).unwrap();
        assert_eq!(rec2.branch, Branch::Va);
        assert!(rec2.bind_attempted);
        let _ = state;
    }

    #[test]
    fn binding_from_equal_states_couples_quickly() {
        // Equal starts inside the d₀-ball: the shift is tiny, so the draw
        // should accept nearly always, and H_end ≤ d₀ often.
        let m = 8;
        let sim = small_sim(m, 3, 0.01);
        let ccfg = small_coupling();
        let mut runner = PairRunner::new(sim, ccfg).unwrap();
        let rng = trajectory_rng(21, 0);
        let u0 = SpectralField::basis_mode(m, 1).scale(Complex64::new(0.05, 0.05));
        let mut accepted = 0;
        let mut success = 0;
        let n = 60;
        for i in 0..n {
            let mut rng_i = trajectory_rng(21, i as u64 + 1);
            let state = CouplingState::new(u0.clone(), u0.clone());
            let (state, rec) = runner.cycle(state, &mut rng_i).unwrap();
            assert_eq!(rec.branch, Branch::Va);
            if rec.bind_accepted {
                accepted += 1;
            }
            if rec.bind_success {
                success += 1;
                assert_eq!(state.l0, Some(1));
                // Low modes bitwise equal after binding.
                for n_mode in 1..=3 {
                    assert_eq!(state.u1.coeff(n_mode), state.u2.coeff(n_mode));
                }
            }
        }
        let _ = rng;
        assert!(
            accepted >= n * 8 / 10,
            "only {accepted}/{n} accepts from equal starts"
        );
        assert!(success > 0, "no successful bindings from the d₀ ball");
    }

    #[test]
    fn coupled_cycle_keeps_low_modes_equal_and_persists() {
        let m = 8;
        let n_star = 3;
        let sim = small_sim(m, n_star, 0.01);
        let ccfg = small_coupling();
        let mut runner = PairRunner::new(sim, ccfg).unwrap();
        let mut rng = trajectory_rng(31, 0);
        // Manufacture a coupled state.
        let u0 = SpectralField::basis_mode(m, 1).scale(Complex64::new(0.2, 0.0));
        let mut u2 = u0.clone();
        u2.set_coeff(4, Complex64::new(0.05, -0.02)); // high-mode difference only
        let mut state = CouplingState::new(u0, u2);
        state.l0 = Some(0);
        state.h_l = 0.5;
        let k_exp = 4.0;
        state.lyap1 = Some(LyapunovAccumulator::new(0.1, 0.0, k_exp));
        state.lyap2 = Some(LyapunovAccumulator::new(0.1, 0.0, k_exp));
        let (state, rec) = runner.cycle(state, &mut rng).unwrap();
        assert_eq!(rec.branch, Branch::Vb);
        assert!(rec.clause_failed.is_none(), "{:?}", rec.clause_failed);
        assert_eq!(state.l0, Some(0), "coupling should persist");
        for n in 1..=n_star {
            assert_eq!(state.u1.coeff(n), state.u2.coeff(n), "low mode {n} diverged");
        }
        assert!(rec.girsanov_logdensity.is_some());
    }

    #[test]
    fn lyapunov_cap_violation_decouples() {
        let m = 8;
        let sim = small_sim(m, 3, 0.01);
        let mut ccfg = small_coupling();
        ccfg.kappa = 0.0;
        ccfg.growth_b = 0.0;
        ccfg.d0 = 1e-6; // cap ≈ 1: guaranteed violation for an O(1) state
        let mut runner = PairRunner::new(sim, ccfg).unwrap();
        let mut rng = trajectory_rng(41, 0);
        let u0 = SpectralField::basis_mode(m, 1).scale(Complex64::new(1.2, 0.0));
        let mut state = CouplingState::new(u0.clone(), u0);
        state.l0 = Some(0);
        state.h_l = 1e-7;
        state.lyap1 = Some(LyapunovAccumulator::new(50.0, 0.0, 4.0));
        state.lyap2 = Some(LyapunovAccumulator::new(50.0, 0.0, 4.0));
        let (state, rec) = runner.cycle(state, &mut rng).unwrap();
        assert_eq!(rec.branch, Branch::Vb);
        assert!(rec.clause_failed.is_some());
        assert!(state.l0.is_none(), "cap violation must decouple");
    }

    #[test]
    fn chain_is_deterministic_given_seed() {
        let m = 8;
        let sim = small_sim(m, 3, 0.01);
        let ccfg = small_coupling();
        let run = |seed: u64| {
            let mut runner = PairRunner::new(sim.clone(), ccfg.clone()).unwrap();
            let mut rng = trajectory_rng(seed, 0);
            let mut state = CouplingState::new(
                SpectralField::basis_mode(m, 1).scale(Complex64::new(0.4, 0.0)),
                SpectralField::basis_mode(m, 2).scale(Complex64::new(0.3, 0.0)),
            );
            let mut records = Vec::new();
            for _ in 0..6 {
                let (s, r) = runner.cycle(state, &mut rng).unwrap();
                state = s;
                records.push(r.branch);
            }
            (state.u1, state.u2, records)
        };
        let (a1, a2, ra) = run(77);
        let (b1, b2, rb) = run(77);
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        assert_eq!(ra, rb);
    }
}
