//! Closed-form URLLC QoS quantities: inverse Q-function, finite-blocklength
//! rate (with unit channel dispersion), effective bandwidth, QoS exponent
//! and effective capacity.
//!
//! Units: rates in packets/slot, bandwidth in Hz, power in W.

use std::f64::consts::{LN_2, SQRT_2};

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::channel::SystemConfig;
use crate::error::{Error, Result};

/// Gaussian tail `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// `Q^{-1}(p)` for `0 < p < 1`.
pub fn inv_gaussian_q(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inverse Q-function needs 0 < p < 1, got {p}"
        )));
    }
    let mut x = SQRT_2 * erfc_inv(2.0 * p);
    // Two Newton steps on Q(x) - p polish the rational approximation.
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf <= 0.0 {
            break;
        }
        x += (q_function(x) - p) / pdf;
    }
    Ok(x)
}

fn check_qos_inputs(a: f64, dq_max: f64, eps_max: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) || !(dq_max > 0.0 && dq_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "arrival rate and queueing delay bound must be positive, got a={a}, D={dq_max}"
        )));
    }
    if !(eps_max > 0.0 && eps_max < 2.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_max/2 must lie in (0, 1), got eps_max={eps_max}"
        )));
    }
    Ok(())
}

/// `ϑ = ln(1 + |ln(ε_max/2)| / (a·D^q_max))`.
pub fn qos_exponent(a: f64, dq_max: f64, eps_max: f64) -> Result<f64> {
    check_qos_inputs(a, dq_max, eps_max)?;
    Ok(((eps_max / 2.0).ln().abs() / (a * dq_max)).ln_1p())
}

/// `B^E = |ln(ε_max/2)| / (D^q_max·ϑ)`, Poisson arrivals.
pub fn effective_bandwidth(a: f64, dq_max: f64, eps_max: f64) -> Result<f64> {
    let theta = qos_exponent(a, dq_max, eps_max)?;
    let num = (eps_max / 2.0).ln().abs();
    if theta == 0.0 {
        // |ln(ε/2)| underflowed relative to a·D: no reliability requirement.
        return Ok(a);
    }
    Ok(num / (dq_max * theta))
}

/// Per-user QoS requirement derived from `(a, D^q_max, ε_max)` with the
/// error budget split evenly between decoding and queueing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QosTarget {
    pub arrival_rate: f64,
    pub dq_max: f64,
    pub theta: f64,
    pub eb: f64,
    pub eps_c: f64,
    pub eps_q: f64,
}

impl QosTarget {
    pub fn new(a: f64, dq_max: f64, eps_max: f64) -> Result<Self> {
        Ok(Self {
            arrival_rate: a,
            dq_max,
            theta: qos_exponent(a, dq_max, eps_max)?,
            eb: effective_bandwidth(a, dq_max, eps_max)?,
            eps_c: eps_max / 2.0,
            eps_q: eps_max / 2.0,
        })
    }

    pub fn for_user(cfg: &SystemConfig, user: usize) -> Result<Self> {
        Self::new(cfg.arrival_rate_of(user), cfg.queueing_delay_bound(), cfg.eps_max)
    }

    /// `e^{-ϑ B^E}`, the right-hand side of the QoS constraint.
    pub fn target_exp(&self) -> f64 {
        (-self.theta * self.eb).exp()
    }
}

/// Finite-blocklength rate model with `V ≈ 1` and decoding error `ε_max/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateModel {
    tau: f64,
    packet_bits: f64,
    n0: f64,
    q_inv: f64,
}

impl RateModel {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        Ok(Self {
            tau: cfg.tx_duration_s,
            packet_bits: cfg.packet_bits,
            n0: cfg.n0_w_per_hz,
            q_inv: inv_gaussian_q(cfg.eps_max / 2.0)?,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn packet_bits(&self) -> f64 {
        self.packet_bits
    }

    pub fn n0(&self) -> f64 {
        self.n0
    }

    /// `Q^{-1}(ε_max/2)`.
    pub fn q_inv(&self) -> f64 {
        self.q_inv
    }

    /// `τ / (u ln 2)`: packets per slot per (Hz · nat).
    fn unit(&self) -> f64 {
        self.tau / (self.packet_bits * LN_2)
    }

    pub fn snr(&self, w: f64, p: f64, alpha: f64, g: f64) -> f64 {
        alpha * g * p / (self.n0 * w)
    }

    /// The rate before clamping; negative for very small `τW`.
    pub fn rate_unclamped(&self, w: f64, p: f64, alpha: f64, g: f64) -> f64 {
        if w <= 0.0 {
            return 0.0;
        }
        let gamma = self.snr(w, p, alpha, g);
        self.unit() * w * (gamma.ln_1p() - self.q_inv / (self.tau * w).sqrt())
    }

    /// `s = max(0, (τW/(u ln2))·[ln(1+αgP/(N₀W)) − Q⁻¹(ε/2)/√(τW)])`.
    pub fn rate(&self, w: f64, p: f64, alpha: f64, g: f64) -> f64 {
        self.rate_unclamped(w, p, alpha, g).max(0.0)
    }

    /// Rate when power scales with bandwidth at spectral density `p0`.
    pub fn rate_density(&self, w: f64, p0: f64, alpha: f64, g: f64) -> f64 {
        if w <= 0.0 {
            return 0.0;
        }
        let snr = alpha * g * p0 / self.n0;
        (self.unit() * w * (snr.ln_1p() - self.q_inv / (self.tau * w).sqrt())).max(0.0)
    }

    /// `∂s/∂W` at fixed total power `p` (unclamped expression).
    pub fn rate_dw(&self, w: f64, p: f64, alpha: f64, g: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rate derivative needs W > 0, got {w}"
            )));
        }
        let gamma = self.snr(w, p, alpha, g);
        Ok(self.unit()
            * (gamma.ln_1p() - gamma / (1.0 + gamma) - 0.5 * self.q_inv / (self.tau * w).sqrt()))
    }

    /// `ds/dW` when power scales as `p0·W`:
    /// `(1/(u ln2))·[τ ln(1+αgP₀/N₀) − (Q⁻¹/2)·√(τ/W)]`.
    pub fn rate_dw_density(&self, w: f64, p0: f64, alpha: f64, g: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rate derivative needs W > 0, got {w}"
            )));
        }
        let snr = alpha * g * p0 / self.n0;
        Ok((self.tau * snr.ln_1p() - 0.5 * self.q_inv * (self.tau / w).sqrt())
            / (self.packet_bits * LN_2))
    }

    /// `∂s/∂P = (τW/(u ln2))·(αg/(N₀W))/(1+γ)`.
    pub fn rate_dp(&self, w: f64, p: f64, alpha: f64, g: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rate derivative needs W > 0, got {w}"
            )));
        }
        let gamma = self.snr(w, p, alpha, g);
        Ok(self.unit() * alpha * g / (self.n0 * (1.0 + gamma)))
    }
}

fn nonempty(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        Err(Error::InvalidArgument("empty rate sample".into()))
    } else {
        Ok(())
    }
}

/// `mean(e^{-ϑ s}) − e^{-ϑ B^E}`; `≤ 0` means the constraint is met.
pub fn qos_gap(samples: &[f64], target: &QosTarget) -> Result<f64> {
    nonempty(samples)?;
    let mean = samples.iter().map(|s| (-target.theta * s).exp()).sum::<f64>() / samples.len() as f64;
    Ok(mean - target.target_exp())
}

/// `ν = (mean(e^{ϑ(B^E − s)}) − 1)^+`.
pub fn qos_violation(samples: &[f64], target: &QosTarget) -> Result<f64> {
    nonempty(samples)?;
    let mean = samples
        .iter()
        .map(|s| (target.theta * (target.eb - s)).exp())
        .sum::<f64>()
        / samples.len() as f64;
    Ok((mean - 1.0).max(0.0))
}

/// `C^E = −(1/ϑ)·ln mean(e^{−ϑ s})`, evaluated as a shifted log-mean-exp.
pub fn effective_capacity(samples: &[f64], theta: f64) -> Result<f64> {
    nonempty(samples)?;
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "QoS exponent must be positive, got {theta}"
        )));
    }
    let shift = samples
        .iter()
        .map(|s| -theta * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mean = samples
        .iter()
        .map(|s| (-theta * s - shift).exp())
        .sum::<f64>()
        / samples.len() as f64;
    Ok(-(shift + mean.ln()) / theta)
}
