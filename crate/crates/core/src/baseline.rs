//! Reference solvers the learners are measured against: the stochastic
//! bandwidth iteration, the symmetric closed-form power allocation, the
//! jointly optimal symmetric policy, the equal-power policy and classic
//! water-filling.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::{derive_seed, FadingSampler, SystemConfig};
use crate::error::{Error, Result};
use crate::nn::LrSchedule;
use crate::qos::{QosTarget, RateModel};

/// How transmit power relates to the bandwidth being solved for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PowerMode {
    /// Power `P_0·W` at a fixed spectral density `P_0` (W/Hz).
    SpectralDensity(f64),
    /// Fixed total power (W) regardless of bandwidth.
    Total(f64),
}

/// Knobs of the stochastic bandwidth iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaOptions {
    pub max_iters: u64,
    /// Iterations always run before the first convergence check.
    pub min_iters: u64,
    /// Length of the window over which the mean relative step is tracked.
    pub window: u64,
    /// Threshold on the window-mean of `|ΔW| / W`.
    pub window_tol: f64,
    pub validation_draws: usize,
    /// Accepted `|qos_gap|` on the validation batch.
    pub gap_tol: f64,
    /// Learning rate; planned from the initial guess when `None`.
    pub schedule: Option<LrSchedule>,
}

impl Default for SaOptions {
    fn default() -> Self {
        Self {
            max_iters: 5_000_000,
            min_iters: 20_000,
            window: 1000,
            window_tol: 1e-4,
            validation_draws: 100_000,
            gap_tol: 1e-3,
            schedule: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSolution {
    pub w: f64,
    /// `qos_gap` at `w` on the fresh validation batch.
    pub gap: f64,
    pub iterations: u64,
    pub schedule: LrSchedule,
}

/// Shannon-rate guess `u·B^E·ln2 / (τ·ln(1+SNR_mean))`, iterated to a fixed
/// point when the SNR itself depends on `W`.
pub fn initial_bandwidth_guess(alpha: f64, mode: PowerMode, cfg: &SystemConfig, target: &QosTarget) -> f64 {
    let need = cfg.packet_bits * target.eb * LN_2 / cfg.tx_duration_s;
    let gbar = cfg.mean_fading_gain();
    match mode {
        PowerMode::SpectralDensity(p0) => need / (alpha * gbar * p0 / cfg.n0_w_per_hz).ln_1p(),
        PowerMode::Total(p) => {
            let mut w = need;
            for _ in 0..50 {
                let snr = alpha * gbar * p / (cfg.n0_w_per_hz * w);
                w = need / snr.ln_1p();
            }
            w
        }
    }
}

/// `c / (1 + d·t)` with `c` limiting the first step to 10% of `w0` and
/// `c/d` set to twice the inverse of the local gap slope.
pub fn plan_schedule(w0: f64, target: &QosTarget) -> Result<LrSchedule> {
    let te = target.target_exp();
    let max_gap = te.max(1.0 - te);
    let base = 0.1 * w0 / max_gap;
    let slope = target.theta * target.eb * te / w0;
    LrSchedule::inverse_time(base, 0.5 * base * slope)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")))
    }
}

/// Projected stochastic iteration `W ← [W + φ(t)·gap_t]^+` with the
/// window/validation stopping rule.
fn stochastic_iterate(
    w0: f64,
    schedule: LrSchedule,
    opts: &SaOptions,
    mut sample_gap: impl FnMut(f64) -> f64,
    mut validate: impl FnMut(f64, u64) -> f64,
) -> Result<BandwidthSolution> {
    let mut w = w0;
    let mut window_sum = 0.0;
    let mut next_check = opts.min_iters.max(opts.window);
    let mut attempt = 0u64;
    let mut last_gap = f64::NAN;
    for t in 0..opts.max_iters {
        let gap = sample_gap(w);
        let next = (w + schedule.rate(t) * gap).max(0.0);
        if !next.is_finite() {
            return Err(Error::Diverged(t));
        }
        window_sum += (next - w).abs() / next.max(w).max(f64::MIN_POSITIVE);
        w = next;
        let done = t + 1;
        if done % opts.window == 0 {
            let quiet = window_sum / (opts.window as f64) < opts.window_tol;
            window_sum = 0.0;
            if quiet && done >= next_check {
                last_gap = validate(w, attempt);
                attempt += 1;
                if last_gap.abs() <= opts.gap_tol {
                    return Ok(BandwidthSolution {
                        w,
                        gap: last_gap,
                        iterations: done,
                        schedule,
                    });
                }
                next_check = done + done / 2;
            }
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iters,
        last: w,
        gap: last_gap,
    })
}

fn rate_for(model: &RateModel, w: f64, mode: PowerMode, alpha: f64, g: f64) -> f64 {
    match mode {
        PowerMode::SpectralDensity(p0) => model.rate_density(w, p0, alpha, g),
        PowerMode::Total(p) => model.rate(w, p, alpha, g),
    }
}

/// Minimal bandwidth meeting `E_g{e^{-ϑs}} ≤ e^{-ϑB^E}` for one user with
/// large-scale gain `alpha`, one fading draw per iteration.
pub fn stochastic_bandwidth_solve(
    alpha: f64,
    mode: PowerMode,
    cfg: &SystemConfig,
    target: &QosTarget,
    opts: &SaOptions,
    seed: u64,
) -> Result<BandwidthSolution> {
    check_alpha(alpha)?;
    let model = RateModel::new(cfg)?;
    let w0 = initial_bandwidth_guess(alpha, mode, cfg, target);
    let schedule = match opts.schedule {
        Some(s) => s,
        None => plan_schedule(w0, target)?,
    };
    let te = target.target_exp();
    let theta = target.theta;
    let mut sampler = FadingSampler::new(cfg, derive_seed(seed, 0, 0));
    let sample_gap = |w: f64| (-theta * rate_for(&model, w, mode, alpha, sampler.draw())).exp() - te;
    let validate = |w: f64, attempt: u64| {
        let mut fresh = FadingSampler::new(cfg, derive_seed(seed, 1, attempt));
        let n = opts.validation_draws.max(1);
        let sum: f64 = (0..n)
            .map(|_| (-theta * rate_for(&model, w, mode, alpha, fresh.draw())).exp())
            .sum();
        sum / n as f64 - te
    };
    stochastic_iterate(w0, schedule, opts, sample_gap, validate)
}

/// Outcome of the symmetric closed-form allocation for one fading draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricAllocResult {
    pub powers: Vec<f64>,
    pub active_set: Vec<usize>,
    pub g_threshold: f64,
    pub residual: f64,
}

/// `η = 1 / (1 + ϑτW/(u ln2))`.
pub fn eta(theta: f64, w: f64, cfg: &SystemConfig) -> f64 {
    1.0 / (1.0 + theta * cfg.tx_duration_s * w / (cfg.packet_bits * LN_2))
}

/// Threshold-structured power split of `P_max` among users sharing `α`,
/// `ϑ` and `W`: `P_k = (N₀W/(αg_k))·((g_k/g^th)^η − 1)^+`, with users of
/// non-positive power removed from the active set until it is stable.
pub fn symmetric_power_alloc(
    gains: &[f64],
    w: f64,
    alpha: f64,
    theta: f64,
    cfg: &SystemConfig,
) -> Result<SymmetricAllocResult> {
    let mut powers = vec![0.0; gains.len()];
    let (active_set, g_threshold) = symmetric_power_alloc_into(gains, w, alpha, theta, cfg, &mut powers)?;
    let total: f64 = powers.iter().sum();
    Ok(SymmetricAllocResult {
        powers,
        active_set,
        g_threshold,
        residual: (total - cfg.p_max_w).abs(),
    })
}

/// Allocation-free core of [`symmetric_power_alloc`]; writes into `powers`.
pub fn symmetric_power_alloc_into(
    gains: &[f64],
    w: f64,
    alpha: f64,
    theta: f64,
    cfg: &SystemConfig,
    powers: &mut [f64],
) -> Result<(Vec<usize>, f64)> {
    if gains.is_empty() {
        return Err(Error::InvalidArgument("no users to allocate power to".into()));
    }
    crate::error::check_dim("symmetric_power_alloc powers", gains.len(), powers.len())?;
    if let Some(g) = gains.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(Error::InvalidArgument(format!("gains must be positive, got {g}")));
    }
    check_alpha(alpha)?;
    if !(w > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {w}")));
    }
    let eta = eta(theta, w, cfg);
    let noise = cfg.n0_w_per_hz * w / alpha;
    let budget = cfg.p_max_w / noise;
    let gpow: Vec<f64> = gains.iter().map(|g| g.powf(eta)).collect();
    let mut active: Vec<usize> = (0..gains.len()).collect();
    let mut excess = vec![0.0; gains.len()];
    loop {
        // (g_k/g_th)^η − 1 = excess_k / den, with the numerator summed
        // pairwise so that no two large terms cancel.
        let den: f64 = active.iter().map(|&j| gpow[j] / gains[j]).sum();
        for &k in &active {
            excess[k] = gpow[k] * budget + active.iter().map(|&j| (gpow[k] - gpow[j]) / gains[j]).sum::<f64>();
        }
        let before = active.len();
        active.retain(|&k| excess[k] > 0.0);
        if active.len() == before {
            let num = budget + active.iter().map(|&j| 1.0 / gains[j]).sum::<f64>();
            let g_th = (den / num).powf(1.0 / eta);
            powers.iter_mut().for_each(|p| *p = 0.0);
            for &k in &active {
                powers[k] = noise * excess[k] / (den * gains[k]);
            }
            return Ok((active, g_th));
        }
        assert!(!active.is_empty(), "the strongest user always stays active");
    }
}

/// Jointly optimal shared bandwidth for `K` symmetric users with the
/// closed-form power policy applied per fading draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointOptimalSolution {
    pub k: usize,
    pub alpha: f64,
    pub theta: f64,
    /// Bandwidth of each user (identical by symmetry).
    pub w: f64,
    pub sum_w: f64,
    /// User-averaged validation gap.
    pub gap: f64,
    pub per_user_gap: Vec<f64>,
    pub iterations: u64,
    pub schedule: LrSchedule,
}

impl JointOptimalSolution {
    /// The power policy `g ↦ P(g)` at the converged bandwidth.
    pub fn power(&self, gains: &[f64], cfg: &SystemConfig) -> Result<Vec<f64>> {
        crate::error::check_dim("joint policy gains", self.k, gains.len())?;
        Ok(symmetric_power_alloc(gains, self.w, self.alpha, self.theta, cfg)?.powers)
    }
}

fn symmetric_draw_factors(
    model: &RateModel,
    gains: &[f64],
    powers: &mut [f64],
    w: f64,
    alpha: f64,
    theta: f64,
    cfg: &SystemConfig,
    out: &mut [f64],
) -> Result<()> {
    symmetric_power_alloc_into(gains, w, alpha, theta, cfg, powers)?;
    for ((o, &g), &p) in out.iter_mut().zip(gains).zip(powers.iter()) {
        *o = (-theta * model.rate(w, p, alpha, g)).exp();
    }
    Ok(())
}

pub fn joint_optimal_solve(
    cfg: &SystemConfig,
    k: usize,
    alpha: f64,
    opts: &SaOptions,
    seed: u64,
) -> Result<JointOptimalSolution> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one user".into()));
    }
    check_alpha(alpha)?;
    let model = RateModel::new(cfg)?;
    let target = QosTarget::for_user(cfg, 0)?;
    let theta = target.theta;
    let te = target.target_exp();
    let w0 = initial_bandwidth_guess(alpha, PowerMode::Total(cfg.p_max_w / k as f64), cfg, &target);
    let schedule = match opts.schedule {
        Some(s) => s,
        None => plan_schedule(w0, &target)?,
    };
    let mut sampler = FadingSampler::new(cfg, derive_seed(seed, 0, 0));
    let mut gains = vec![0.0; k];
    let mut powers = vec![0.0; k];
    let mut factors = vec![0.0; k];
    let mut failure = None;
    let sample_gap = |w: f64| {
        if w <= 0.0 {
            return 1.0 - te;
        }
        sampler.fill(&mut gains);
        if let Err(e) = symmetric_draw_factors(&model, &gains, &mut powers, w, alpha, theta, cfg, &mut factors) {
            failure.get_or_insert(e);
            return 0.0;
        }
        factors.iter().sum::<f64>() / k as f64 - te
    };
    let mut per_user_gap = vec![0.0; k];
    let validate = |w: f64, attempt: u64| {
        per_user_gap = validation_gaps(&model, cfg, k, w, alpha, &target, opts.validation_draws, derive_seed(seed, 1, attempt));
        per_user_gap.iter().sum::<f64>() / k as f64
    };
    let sol = stochastic_iterate(w0, schedule, opts, sample_gap, validate);
    if let Some(e) = failure {
        return Err(e);
    }
    let sol = sol?;
    Ok(JointOptimalSolution {
        k,
        alpha,
        theta,
        w: sol.w,
        sum_w: sol.w * k as f64,
        gap: sol.gap,
        per_user_gap,
        iterations: sol.iterations,
        schedule: sol.schedule,
    })
}

#[allow(clippy::too_many_arguments)]
fn validation_gaps(
    model: &RateModel,
    cfg: &SystemConfig,
    k: usize,
    w: f64,
    alpha: f64,
    target: &QosTarget,
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    let te = target.target_exp();
    if w <= 0.0 {
        return vec![1.0 - te; k];
    }
    let mut sampler = FadingSampler::new(cfg, seed);
    let mut gains = vec![0.0; k];
    let mut powers = vec![0.0; k];
    let mut factors = vec![0.0; k];
    let mut sums = vec![0.0; k];
    let n = draws.max(1);
    for _ in 0..n {
        sampler.fill(&mut gains);
        symmetric_draw_factors(model, &gains, &mut powers, w, alpha, target.theta, cfg, &mut factors)
            .expect("validated inputs");
        sums.iter_mut().zip(&factors).for_each(|(s, f)| *s += f);
    }
    sums.iter().map(|s| s / n as f64 - te).collect()
}

/// Per-user bandwidths when every user transmits at `P_0 = P_max/W_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualPowerResult {
    pub per_user: Vec<BandwidthSolution>,
    pub sum_w: f64,
    pub feasible: bool,
}

impl EqualPowerResult {
    pub fn widths(&self) -> Vec<f64> {
        self.per_user.iter().map(|s| s.w).collect()
    }

    /// `Err(Infeasible)` when the total exceeds `W_max`.
    pub fn check_feasible(&self, cfg: &SystemConfig) -> Result<()> {
        if self.feasible {
            Ok(())
        } else {
            Err(Error::Infeasible {
                required: self.sum_w,
                w_max: cfg.w_max_hz,
            })
        }
    }
}

/// User `k` runs its own iteration on stream `derive_seed(seed, 2, k)`.
pub fn equal_power_baseline(
    cfg: &SystemConfig,
    alphas: &[f64],
    opts: &SaOptions,
    seed: u64,
) -> Result<EqualPowerResult> {
    let mode = PowerMode::SpectralDensity(cfg.power_density());
    let per_user = alphas
        .iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let target = QosTarget::for_user(cfg, k)?;
            stochastic_bandwidth_solve(alpha, mode, cfg, &target, opts, derive_seed(seed, 2, k as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let sum_w = per_user.iter().map(|s| s.w).sum::<f64>();
    Ok(EqualPowerResult {
        per_user,
        sum_w,
        feasible: sum_w <= cfg.w_max_hz,
    })
}

/// Water-filling policy `P(g) = (μ − N₀W/(αg))^+` over a discrete fading
/// law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterFillingSolution {
    pub level: f64,
    pub alpha: f64,
    pub w: f64,
    pub n0: f64,
    /// `E{W log2(1 + αgP(g)/(N₀W))}` in bit/s.
    pub capacity: f64,
    /// `E{P(g)}` achieved by `level`.
    pub mean_power: f64,
}

impl WaterFillingSolution {
    pub fn power(&self, g: f64) -> f64 {
        (self.level - self.n0 * self.w / (self.alpha * g)).max(0.0)
    }

    pub fn rate(&self, g: f64) -> f64 {
        self.w * (self.alpha * g * self.power(g) / (self.n0 * self.w)).ln_1p() / LN_2
    }
}

/// Ergodic capacity of `policy` in bit/s over the weighted support.
pub fn ergodic_capacity(
    alpha: f64,
    w: f64,
    n0: f64,
    support: &[(f64, f64)],
    policy: impl Fn(f64) -> f64,
) -> f64 {
    let total: f64 = support.iter().map(|(_, p)| p).sum();
    support
        .iter()
        .map(|&(g, p)| p * w * (alpha * g * policy(g) / (n0 * w)).ln_1p() / LN_2)
        .sum::<f64>()
        / total
}

/// Water level by bisection so that `E{P(g)} = p_ave`. `support` lists
/// `(g, weight)` pairs; weights need not be normalized.
pub fn water_filling_solve(
    alpha: f64,
    w: f64,
    p_ave: f64,
    support: &[(f64, f64)],
    n0: f64,
) -> Result<WaterFillingSolution> {
    check_alpha(alpha)?;
    if !(p_ave > 0.0 && w > 0.0 && n0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "water-filling needs positive P_ave, W and N0, got {p_ave}, {w}, {n0}"
        )));
    }
    if support.is_empty() || support.iter().any(|&(g, p)| !(g > 0.0) || !(p >= 0.0)) {
        return Err(Error::InvalidArgument(
            "fading support must be non-empty with positive gains and non-negative weights".into(),
        ));
    }
    let total: f64 = support.iter().map(|(_, p)| p).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("fading weights sum to zero".into()));
    }
    let floor = |g: f64| n0 * w / (alpha * g);
    let mean_power = |mu: f64| {
        support
            .iter()
            .map(|&(g, p)| p * (mu - floor(g)).max(0.0))
            .sum::<f64>()
            / total
    };
    let (mut lo, mut hi) = (0.0, p_ave + support.iter().map(|&(g, _)| floor(g)).fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_power(mid) < p_ave {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let level = 0.5 * (lo + hi);
    let policy = |g: f64| (level - floor(g)).max(0.0);
    Ok(WaterFillingSolution {
        level,
        alpha,
        w,
        n0,
        capacity: ergodic_capacity(alpha, w, n0, support, policy),
        mean_power: mean_power(level),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{pathloss_gain, sample_fading};
    use proptest::prelude::*;

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    fn edge_alpha() -> f64 {
        pathloss_gain(250.0, &cfg()).unwrap()
    }

    /// Root of the common-random-numbers gap estimate by bisection.
    fn bisect_bandwidth(c: &SystemConfig, alpha: f64, mode: PowerMode, target: &QosTarget, n: usize, seed: u64) -> f64 {
        let model = RateModel::new(c).unwrap();
        let gains = sample_fading(1, n, c, seed);
        let gap = |w: f64| {
            gains
                .iter()
                .map(|&g| (-target.theta * rate_for(&model, w, mode, alpha, g)).exp())
                .sum::<f64>()
                / n as f64
                - target.target_exp()
        };
        let (mut lo, mut hi) = (1.0f64, 1e9f64);
        for _ in 0..100 {
            let mid = (lo * hi).sqrt();
            if gap(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }

    #[test]
    fn stochastic_solver_matches_bisection_root() {
        let c = cfg();
        let target = QosTarget::for_user(&c, 0).unwrap();
        let mode = PowerMode::SpectralDensity(c.power_density());
        for (i, alpha) in [edge_alpha(), 4.0 * edge_alpha()].into_iter().enumerate() {
            let sol = stochastic_bandwidth_solve(alpha, mode, &c, &target, &SaOptions::default(), 7 + i as u64).unwrap();
            let root = bisect_bandwidth(&c, alpha, mode, &target, 1_000_000, 99);
            assert!((sol.w / root - 1.0).abs() < 0.02, "{} vs {}", sol.w, root);
            assert!(sol.gap.abs() <= 1e-3);
        }
    }

    #[test]
    fn stochastic_solver_is_monotone_in_alpha() {
        let c = cfg();
        let target = QosTarget::for_user(&c, 0).unwrap();
        let mode = PowerMode::SpectralDensity(c.power_density());
        let opts = SaOptions::default();
        let w1 = stochastic_bandwidth_solve(edge_alpha(), mode, &c, &target, &opts, 3).unwrap().w;
        let w2 = stochastic_bandwidth_solve(2.0 * edge_alpha(), mode, &c, &target, &opts, 3).unwrap().w;
        assert!(w2 < w1, "{w2} !< {w1}");
    }

    #[test]
    fn stochastic_solver_reports_non_convergence() {
        let c = cfg();
        let target = QosTarget::for_user(&c, 0).unwrap();
        let opts = SaOptions {
            max_iters: 500,
            ..SaOptions::default()
        };
        let err = stochastic_bandwidth_solve(edge_alpha(), PowerMode::SpectralDensity(c.power_density()), &c, &target, &opts, 1)
            .unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 500, .. }), "{err}");
        assert!(stochastic_bandwidth_solve(0.0, PowerMode::Total(1.0), &c, &target, &opts, 1).is_err());
    }

    #[test]
    fn vanishing_exponent_reduces_to_mean_rate() {
        // ε/2 → 1 sends ϑ → 0 and B^E → a; the constraint becomes E{s} ≥ a.
        let c = SystemConfig {
            eps_max: 2.0 * (1.0 - 1e-7),
            ..cfg()
        };
        let target = QosTarget::for_user(&c, 0).unwrap();
        let mode = PowerMode::SpectralDensity(c.power_density());
        let model = RateModel::new(&c).unwrap();
        let alpha = edge_alpha();
        let gains = sample_fading(1, 200_000, &c, 5);
        let mean_rate = |w: f64| gains.iter().map(|&g| rate_for(&model, w, mode, alpha, g)).sum::<f64>() / gains.len() as f64;
        let (mut lo, mut hi) = (1.0f64, 1e9f64);
        for _ in 0..100 {
            let mid = (lo * hi).sqrt();
            if mean_rate(mid) < target.eb {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let jensen_free = (lo * hi).sqrt();
        let root = bisect_bandwidth(&c, alpha, mode, &target, 200_000, 5);
        assert!((root / jensen_free - 1.0).abs() < 1e-4, "{root} vs {jensen_free}");
    }

    #[test]
    fn iterate_stays_nonnegative() {
        let opts = SaOptions {
            max_iters: 2000,
            ..SaOptions::default()
        };
        let sched = LrSchedule::inverse_time(10.0, 0.0).unwrap();
        let mut toggle = false;
        let mut seen = Vec::new();
        let _ = stochastic_iterate(
            1.0,
            sched,
            &opts,
            |w| {
                seen.push(w);
                toggle = !toggle;
                if toggle { -1.0 } else { 0.05 }
            },
            |_, _| 1.0,
        );
        assert!(seen.iter().all(|&w| w >= 0.0));
        assert!(seen.iter().any(|&w| w == 0.0));
    }

    // -- symmetric allocation ---------------------------------------------

    fn representative() -> (f64, f64, f64) {
        let c = cfg();
        let target = QosTarget::for_user(&c, 0).unwrap();
        (3e5, edge_alpha(), target.theta)
    }

    fn kkt_level(g: f64, p: f64, w: f64, alpha: f64, theta: f64) -> f64 {
        let c = cfg();
        let gamma = alpha * g * p / (c.n0_w_per_hz * w);
        g * (1.0 + gamma).powf(-1.0 / eta(theta, w, &c))
    }

    #[test]
    fn single_user_takes_full_budget() {
        let (w, alpha, theta) = representative();
        let r = symmetric_power_alloc(&[3.7], w, alpha, theta, &cfg()).unwrap();
        assert!((r.powers[0] - cfg().p_max_w).abs() <= 1e-12 * cfg().p_max_w);
        assert_eq!(r.active_set, vec![0]);
    }

    #[test]
    fn equal_gains_split_evenly() {
        let (w, alpha, theta) = representative();
        let r = symmetric_power_alloc(&[2.5; 6], w, alpha, theta, &cfg()).unwrap();
        for p in &r.powers {
            assert!((p - cfg().p_max_w / 6.0).abs() <= 1e-12 * cfg().p_max_w);
        }
    }

    #[test]
    fn four_user_example_satisfies_kkt() {
        let (w, alpha, theta) = representative();
        let g = [0.1, 0.5, 1.0, 2.0];
        let r = symmetric_power_alloc(&g, w, alpha, theta, &cfg()).unwrap();
        assert!(r.residual <= 1e-9 * cfg().p_max_w);
        for (k, &gk) in g.iter().enumerate() {
            if r.active_set.contains(&k) {
                assert!(gk > r.g_threshold);
                let lvl = kkt_level(gk, r.powers[k], w, alpha, theta);
                assert!((lvl / r.g_threshold - 1.0).abs() < 1e-9);
            } else {
                assert!(gk <= r.g_threshold);
                assert_eq!(r.powers[k], 0.0);
            }
        }
    }

    #[test]
    fn weak_users_drop_out() {
        // Tiny budget relative to noise: only the strongest user transmits.
        let c = SystemConfig {
            p_max_w: 1e-9,
            ..cfg()
        };
        let (w, alpha, theta) = representative();
        let r = symmetric_power_alloc(&[0.2, 9.0, 0.3, 1.0], w, alpha, theta, &c).unwrap();
        assert_eq!(r.active_set, vec![1]);
        assert!((r.powers[1] - c.p_max_w).abs() <= 1e-12 * c.p_max_w);
        assert!(symmetric_power_alloc(&[], w, alpha, theta, &c).is_err());
        assert!(symmetric_power_alloc(&[1.0, -1.0], w, alpha, theta, &c).is_err());
    }

    proptest! {
        #[test]
        fn allocation_is_permutation_equivariant(g in proptest::collection::vec(0.05f64..20.0, 1..9),
                                                  shift in 0usize..8) {
            let (w, alpha, theta) = representative();
            let c = cfg();
            let r = symmetric_power_alloc(&g, w, alpha, theta, &c).unwrap();
            let n = g.len();
            let rotated: Vec<f64> = (0..n).map(|i| g[(i + shift) % n]).collect();
            let rr = symmetric_power_alloc(&rotated, w, alpha, theta, &c).unwrap();
            for i in 0..n {
                let a = rr.powers[i];
                let b = r.powers[(i + shift) % n];
                prop_assert!((a - b).abs() <= 1e-12 * c.p_max_w);
            }
            prop_assert!(r.residual <= 1e-9 * c.p_max_w);
            prop_assert!(r.powers.iter().all(|&p| p >= 0.0));
        }
    }

    // -- joint optimum and equal power -------------------------------------

    #[test]
    fn joint_single_user_matches_total_power_solve() {
        let c = cfg();
        let alpha = edge_alpha();
        let target = QosTarget::for_user(&c, 0).unwrap();
        let opts = SaOptions::default();
        let joint = joint_optimal_solve(&c, 1, alpha, &opts, 11).unwrap();
        let single = stochastic_bandwidth_solve(alpha, PowerMode::Total(c.p_max_w), &c, &target, &opts, 12).unwrap();
        assert!((joint.w / single.w - 1.0).abs() < 0.01, "{} vs {}", joint.w, single.w);
    }

    #[test]
    fn joint_beats_equal_power_and_validates() {
        let c = cfg();
        let alpha = edge_alpha();
        let opts = SaOptions::default();
        let joint = joint_optimal_solve(&c, 4, alpha, &opts, 5).unwrap();
        assert!(joint.per_user_gap.iter().all(|g| g.abs() <= 2e-3), "{:?}", joint.per_user_gap);
        let eq = equal_power_baseline(&c, &[alpha; 4], &opts, 5).unwrap();
        assert!(joint.w <= eq.per_user[0].w);
        assert!(eq.feasible);
        let p = joint.power(&[8.0, 7.0, 9.0, 6.0], &c).unwrap();
        assert!((p.iter().sum::<f64>() - c.p_max_w).abs() <= 1e-9 * c.p_max_w);
    }

    #[test]
    fn equal_power_is_symmetric_and_grows_with_users() {
        let c = cfg();
        let alpha = edge_alpha();
        let opts = SaOptions::default();
        let two = equal_power_baseline(&c, &[alpha; 2], &opts, 1).unwrap();
        let three = equal_power_baseline(&c, &[alpha; 3], &opts, 1).unwrap();
        assert_eq!(two.per_user[0].w, three.per_user[0].w);
        assert!(three.sum_w > two.sum_w);
        let w = three.widths();
        assert!((w[0] / w[1] - 1.0).abs() < 0.02 && (w[0] / w[2] - 1.0).abs() < 0.02);
        let tight = SystemConfig {
            w_max_hz: 1e3,
            ..c.clone()
        };
        let infeasible = equal_power_baseline(&tight, &[alpha], &opts, 1).unwrap();
        assert!(!infeasible.feasible);
        assert!(matches!(infeasible.check_feasible(&tight), Err(Error::Infeasible { .. })));
    }

    // -- water-filling -------------------------------------------------------

    // Frozen from scripts/oracle_values.py.
    const WF_TWO_POINT_LEVEL: f64 = 2.526_315_789_473_684;
    const WF_TWO_POINT_BITS: f64 = 1.131_517_202_916_897;

    #[test]
    fn point_mass_gets_average_power() {
        let sol = water_filling_solve(2.0, 3.0, 1.5, &[(0.7, 1.0)], 0.5).unwrap();
        assert!((sol.power(0.7) - 1.5).abs() < 1e-12);
        let expect = 3.0 * (1.0f64 + 2.0 * 0.7 * 1.5 / (0.5 * 3.0)).log2();
        assert!((sol.capacity - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn two_point_law_matches_closed_form() {
        let support = [(0.1, 0.5), (1.9, 0.5)];
        let sol = water_filling_solve(1.0, 1.0, 1.0, &support, 1.0).unwrap();
        // weak user inactive: 0.5·(μ − 1/1.9) = 1
        let mu = 2.0 + 1.0 / 1.9;
        assert!((sol.level - mu).abs() < 1e-12);
        assert!((sol.level - WF_TWO_POINT_LEVEL).abs() < 1e-6);
        assert!((sol.capacity - WF_TWO_POINT_BITS).abs() < 1e-6);
        assert_eq!(sol.power(0.1), 0.0);
        assert!((sol.mean_power - 1.0).abs() < 1e-6);
    }

    #[test]
    fn water_filling_beats_constant_power() {
        let c = SystemConfig {
            fading_kind: crate::channel::FadingKind::Exponential,
            ..cfg()
        };
        let support: Vec<(f64, f64)> = sample_fading(1, 20_000, &c, 3).into_iter().map(|g| (g, 1.0)).collect();
        let sol = water_filling_solve(1.0, 1.0, 1.0, &support, 1.0).unwrap();
        let flat = ergodic_capacity(1.0, 1.0, 1.0, &support, |_| 1.0);
        assert!(sol.capacity >= flat);
        assert!((sol.mean_power - 1.0).abs() < 1e-6);
        let grid: Vec<f64> = (1..100).map(|i| 0.05 * i as f64).collect();
        assert!(grid.windows(2).all(|p| sol.power(p[0]) <= sol.power(p[1])));
        // complementary slackness at the cutoff g = N0W/(αμ)
        let cutoff = 1.0 / sol.level;
        assert_eq!(sol.power(cutoff * 0.999), 0.0);
        assert!(sol.power(cutoff * 1.001) > 0.0);
        assert!(water_filling_solve(1.0, 1.0, 0.0, &support, 1.0).is_err());
    }
}
