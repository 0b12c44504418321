//! Algebraic steady state of the reduced network: two voltage sources feeding
//! one resistive node through inductive lines.
//!
//! Amplitudes are peak phase values, so three-phase powers carry a 3/2 factor:
//! `P + jQ = 3/2 · V · conj(I)`. These routines serve as the independent check
//! on the time-domain simulation.

use num_complex::Complex64;
use serde::Serialize;

use crate::control::DroopGains;
use crate::error::PowerflowError;
use crate::plant::{AcFilterParams, LineParams};

const FIXED_POINT_DAMPING: f64 = 0.5;
const RESIDUAL_TOLERANCE: f64 = 1e-9;
const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhasorBus {
    /// Peak amplitude.
    pub v: f64,
    pub theta: f64,
}

impl PhasorBus {
    fn from_complex(z: Complex64) -> Self {
        PhasorBus { v: z.norm(), theta: z.arg() }
    }
}

/// Steady-state active power over an inductive line: `(Vk V0 / X) sin(dθ)`.
///
/// This is the single-phase-equivalent form. The three-phase power of peak
/// amplitudes `Vk`, `V0` is 3/2 of it, which is what [`ReducedTwoSource::evaluate`]
/// returns.
pub fn line_power(vk: f64, v0: f64, xk0: f64, dtheta: f64) -> f64 {
    vk * v0 / xk0 * dtheta.sin()
}

/// Angle to give converter I so that it carries `P*` alone:
/// `θ0 + arcsin(P* X10 / (V0 V1))`.
pub fn interconnection_angle(p_star: f64, x10: f64, v0: f64, v1: f64, theta0: f64) -> Result<f64, PowerflowError> {
    let ratio = p_star * x10 / (v0 * v1);
    if !(ratio.abs() <= 1.0) {
        return Err(PowerflowError::InfeasibleTransfer { ratio });
    }
    Ok(theta0 + ratio.asin())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReactivePower {
    /// `(Vk/X)(Vk − Vj cos dθ)`
    pub exact: f64,
    /// `(Vk/X)(Vk − Vj)`
    pub small_signal: f64,
}

pub fn reactive_power_kron(vk: f64, vj: f64, xkj: f64, dtheta: f64) -> ReactivePower {
    ReactivePower {
        exact: vk / xkj * (vk - vj * dtheta.cos()),
        small_signal: vk / xkj * (vk - vj),
    }
}

/// Induced steady-state angle `θ*₀ + (P* − P_s)/γ`.
pub fn droop_steady_angle(g: &DroopGains, p_s: f64) -> f64 {
    g.theta_star_0 + (g.p_star - p_s) / g.gamma
}

/// Upper reference `Vk V0 / Xk0` for the power-to-angle gain. Good sharing
/// needs γ well below it.
pub fn gamma_bound(vk: f64, v0: f64, xk0: f64) -> f64 {
    vk * v0 / xk0
}

/// Ratio of γ to its bound; at most 1e-2 is the recommended margin.
pub fn gamma_margin(gamma: f64, vk: f64, v0: f64, xk0: f64) -> f64 {
    gamma / gamma_bound(vk, v0, xk0)
}

/// Prescribed active-power ratio `r = P*_1/P*_2 = γ_1/γ_2`.
pub fn sharing_ratio(gains: &[DroopGains; 2]) -> Result<f64, PowerflowError> {
    let [g1, g2] = gains;
    let gain_ratio = g1.gamma / g2.gamma;
    let setpoint_ratio = g1.p_star / g2.p_star;
    let lhs = g1.p_star * g2.gamma;
    let rhs = g2.p_star * g1.gamma;
    let scale = lhs.abs().max(rhs.abs());
    if g2.p_star == 0.0 || (lhs - rhs).abs() > 1e-9 * scale {
        return Err(PowerflowError::InconsistentSharing { setpoint_ratio, gain_ratio });
    }
    Ok(gain_ratio)
}

/// Source behind an internal impedance, seen from its measuring terminal.
/// The open-circuit terminal voltage is `gain · V · e^{jθ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceModel {
    pub gain: Complex64,
    pub impedance: Complex64,
}

impl Default for SourceModel {
    fn default() -> Self {
        SourceModel { gain: Complex64::new(1.0, 0.0), impedance: Complex64::new(0.0, 0.0) }
    }
}

impl SourceModel {
    /// Thevenin equivalent of a bridge behind an LC filter, at the capacitor node.
    pub fn behind_filter(filter: &AcFilterParams, omega: f64) -> Self {
        let z_f = Complex64::new(filter.r, omega * filter.l);
        let y_c = Complex64::new(filter.g, omega * filter.c);
        let den = Complex64::new(1.0, 0.0) + z_f * y_c;
        SourceModel { gain: den.inv(), impedance: z_f / den }
    }
}

/// Two sources supplying one resistive node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedTwoSource {
    /// Source amplitudes `V1`, `V2`.
    pub v: [f64; 2],
    /// Nominal common-node amplitude used by the small-signal form.
    pub v0: f64,
    /// Line reactances `X10`, `X20`.
    pub x: [f64; 2],
    /// Line resistances.
    pub r_line: [f64; 2],
    pub r_load: f64,
    pub sources: [SourceModel; 2],
}

impl ReducedTwoSource {
    /// Ideal sources behind purely inductive lines.
    pub fn lossless(v1: f64, v2: f64, v0: f64, x10: f64, x20: f64, r_load: f64) -> Self {
        ReducedTwoSource {
            v: [v1, v2],
            v0,
            x: [x10, x20],
            r_line: [0.0, 0.0],
            r_load,
            sources: [SourceModel::default(); 2],
        }
    }

    /// Bridges with LC output filters and RL lines, as simulated.
    pub fn from_converters(
        bridge_amplitude: [f64; 2],
        filters: [AcFilterParams; 2],
        lines: [LineParams; 2],
        r_load: f64,
        omega: f64,
    ) -> Self {
        ReducedTwoSource {
            v: bridge_amplitude,
            v0: bridge_amplitude[0],
            x: [lines[0].reactance(omega), lines[1].reactance(omega)],
            r_line: [lines[0].r_l, lines[1].r_l],
            r_load,
            sources: [SourceModel::behind_filter(&filters[0], omega), SourceModel::behind_filter(&filters[1], omega)],
        }
    }

    fn validate(&self) -> Result<(), PowerflowError> {
        if !(self.x.iter().all(|x| *x > 0.0) && self.r_load > 0.0 && self.v.iter().all(|v| *v > 0.0)) {
            return Err(PowerflowError::Invalid("reduced network needs X > 0, R_load > 0, V > 0".into()));
        }
        Ok(())
    }

    /// Phasor circuit solution for given source angles.
    pub fn evaluate(&self, theta: [f64; 2]) -> CircuitPoint {
        let e: Vec<Complex64> =
            (0..2).map(|k| self.sources[k].gain * Complex64::from_polar(self.v[k], theta[k])).collect();
        let z: Vec<Complex64> = (0..2)
            .map(|k| self.sources[k].impedance + Complex64::new(self.r_line[k], self.x[k]))
            .collect();
        let num = e[0] / z[0] + e[1] / z[1];
        let den = z[0].inv() + z[1].inv() + Complex64::new(1.0 / self.r_load, 0.0);
        let v0 = num / den;
        let mut out = CircuitPoint {
            terminal: [Complex64::default(); 2],
            current: [Complex64::default(); 2],
            common: v0,
            p: [0.0; 2],
            q: [0.0; 2],
        };
        for k in 0..2 {
            let i = (e[k] - v0) / z[k];
            let vt = e[k] - self.sources[k].impedance * i;
            let s = vt * i.conj() * 1.5;
            out.terminal[k] = vt;
            out.current[k] = i;
            out.p[k] = s.re;
            out.q[k] = s.im;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitPoint {
    pub terminal: [Complex64; 2],
    pub current: [Complex64; 2],
    pub common: Complex64,
    /// Active power leaving each terminal.
    pub p: [f64; 2],
    pub q: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallSignalSolution {
    pub theta: [f64; 2],
    pub theta0: f64,
    pub p: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoSourceSteadyState {
    /// Source (modulation) angles.
    pub theta: [f64; 2],
    /// Terminal buses of the two sources followed by the common node.
    pub buses: [PhasorBus; 3],
    pub p: [f64; 2],
    pub q: [f64; 2],
    pub load_power: f64,
    pub line_losses: f64,
    /// `P*_1 + P*_2 − P_1 − P_2`.
    pub power_mismatch: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Every line angle difference lies in (−π/2, π/2).
    pub angles_secure: bool,
    pub small_signal: SmallSignalSolution,
}

fn droop_residual(net: &ReducedTwoSource, gains: &[DroopGains; 2], theta_star: [f64; 2], theta: [f64; 2]) -> [f64; 2] {
    let pt = net.evaluate(theta);
    [0, 1].map(|k| gains[k].gamma * (theta[k] - theta_star[k]) + pt.p[k] - gains[k].p_star)
}

/// Solves the droop steady state `θ_k = θ*_k + (P*_k − P_k)/γ_k` jointly with
/// the network. `theta_star` are the nominal angle offsets of the two
/// controllers in a common rotating frame.
///
/// Iteration is a Newton step scaled by 0.5 while the residual is above 1 W;
/// plain fixed-point substitution diverges once `V²/X` exceeds about 3γ.
pub fn solve_two_source_steady_state(
    net: &ReducedTwoSource,
    gains: &[DroopGains; 2],
    theta_star: [f64; 2],
) -> Result<TwoSourceSteadyState, PowerflowError> {
    net.validate()?;
    let mut theta = theta_star;
    let mut residual = droop_residual(net, gains, theta_star, theta);
    let mut iterations = 0;
    let norm = |r: &[f64; 2]| r[0].abs().max(r[1].abs());
    while norm(&residual) > RESIDUAL_TOLERANCE {
        if iterations >= MAX_ITERATIONS || !norm(&residual).is_finite() {
            return Err(PowerflowError::NonConvergence { iterations, residual: norm(&residual) });
        }
        iterations += 1;
        let h = 1e-7;
        let mut jac = [[0.0; 2]; 2];
        for c in 0..2 {
            let mut tp = theta;
            let mut tm = theta;
            tp[c] += h;
            tm[c] -= h;
            let (rp, rm) = (droop_residual(net, gains, theta_star, tp), droop_residual(net, gains, theta_star, tm));
            for r in 0..2 {
                jac[r][c] = (rp[r] - rm[r]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(PowerflowError::NonConvergence { iterations, residual: norm(&residual) });
        }
        let dx0 = (jac[1][1] * residual[0] - jac[0][1] * residual[1]) / det;
        let dx1 = (jac[0][0] * residual[1] - jac[1][0] * residual[0]) / det;
        let damping = if norm(&residual) > 1.0 { FIXED_POINT_DAMPING } else { 1.0 };
        theta[0] -= damping * dx0;
        theta[1] -= damping * dx1;
        residual = droop_residual(net, gains, theta_star, theta);
    }

    let pt = net.evaluate(theta);
    let load_power = 1.5 * pt.common.norm_sqr() / net.r_load;
    let line_losses: f64 = (0..2).map(|k| 1.5 * net.r_line[k] * pt.current[k].norm_sqr()).sum();
    let common = PhasorBus::from_complex(pt.common);
    let angles_secure = (0..2).all(|k| {
        let d = (pt.terminal[k] / pt.common).arg();
        d.abs() < std::f64::consts::FRAC_PI_2
    });
    let small_signal = small_signal_solution(net, gains, theta_star, pt.p[0] + pt.p[1]);
    Ok(TwoSourceSteadyState {
        theta,
        buses: [PhasorBus::from_complex(pt.terminal[0]), PhasorBus::from_complex(pt.terminal[1]), common],
        p: pt.p,
        q: pt.q,
        load_power,
        line_losses,
        power_mismatch: gains[0].p_star + gains[1].p_star - pt.p[0] - pt.p[1],
        residual: norm(&residual),
        iterations,
        angles_secure,
        small_signal,
    })
}

/// Linearized solution with the droop law and `P_1 + P_2 = total_power`.
/// The transfer law is `θ_k − θ_0 = X_k0 P_k / (3/2 · V_k V_0)`; the 3/2 makes
/// it agree with the circuit power for peak amplitudes, unlike [`line_power`].
pub fn small_signal_solution(
    net: &ReducedTwoSource,
    gains: &[DroopGains; 2],
    theta_star: [f64; 2],
    total_power: f64,
) -> SmallSignalSolution {
    let a = [0, 1].map(|k| net.x[k] / (1.5 * net.v[k] * net.v0));
    let b = [0, 1].map(|k| a[k] + 1.0 / gains[k].gamma);
    let c = [0, 1].map(|k| theta_star[k] + gains[k].p_star / gains[k].gamma);
    let theta0 = (c[0] / b[0] + c[1] / b[1] - total_power) / (1.0 / b[0] + 1.0 / b[1]);
    let p = [0, 1].map(|k| (c[k] - theta0) / b[k]);
    let theta = [0, 1].map(|k| theta0 + a[k] * p[k]);
    SmallSignalSolution { theta, theta0, p }
}

/// Load resistance at which the solved network delivers `target` watts in total.
pub fn load_resistance_for_power(
    net: &ReducedTwoSource,
    gains: &[DroopGains; 2],
    theta_star: [f64; 2],
    target: f64,
) -> Result<f64, PowerflowError> {
    let total = |r: f64| -> Result<f64, PowerflowError> {
        let n = ReducedTwoSource { r_load: r, ..*net };
        let s = solve_two_source_steady_state(&n, gains, theta_star)?;
        Ok(s.p[0] + s.p[1])
    };
    let mut r0 = 1.5 * net.v0 * net.v0 / target;
    let mut f0 = total(r0)? - target;
    let mut r1 = r0 * (1.0 + f0 / target);
    for _ in 0..50 {
        let f1 = total(r1)? - target;
        if f1.abs() < 1e-9 {
            return Ok(r1);
        }
        let r2 = r1 - f1 * (r1 - r0) / (f1 - f0);
        r0 = r1;
        f0 = f1;
        r1 = r2;
    }
    Err(PowerflowError::NonConvergence { iterations: 50, residual: f0 })
}

/// Load resistance at which a single source behind `line` delivers `target`
/// watts at its terminal (load plus line losses). Takes the high-resistance root.
pub fn single_source_load_resistance(
    source: &SourceModel,
    bridge_amplitude: f64,
    line: &LineParams,
    omega: f64,
    target: f64,
) -> Result<f64, PowerflowError> {
    if !(target > 0.0 && bridge_amplitude > 0.0) {
        return Err(PowerflowError::Invalid("target power and amplitude must be positive".into()));
    }
    let e2 = (source.gain * bridge_amplitude).norm_sqr();
    let a = source.impedance.re;
    let xt = source.impedance.im + line.reactance(omega);
    let k = target / 1.5;
    // k s^2 + (2 k a - |E|^2) s + k (a^2 + xt^2) = 0 with s = R_line + R_load
    let b = 2.0 * k * a - e2;
    let disc = b * b - 4.0 * k * k * (a * a + xt * xt);
    if disc < 0.0 {
        let p_max = 0.75 * e2 / (a + a.hypot(xt));
        return Err(PowerflowError::InfeasibleTransfer { ratio: target / p_max });
    }
    let r = (-b + disc.sqrt()) / (2.0 * k) - line.r_l;
    if r <= 0.0 {
        return Err(PowerflowError::Invalid(format!("no positive load resistance delivers {target} W")));
    }
    Ok(r)
}
