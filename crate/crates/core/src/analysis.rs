//! Trace post-processing: power, steady-state detection, frequency estimation,
//! the node-angle PLL and the droop-law and cost checks.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::control::DroopGains;
use crate::error::AnalysisError;
use crate::frames::{park, wrap_unchecked, ThreePhase};

/// Active and reactive power at a converter terminal. `theta` is the
/// converter's own angle, used for the two-axis reactive computation
/// `Q = 3/2 (v_q i_d − v_d i_q)`.
pub fn instantaneous_power(v: ThreePhase, i_o: ThreePhase, theta: f64) -> (f64, f64) {
    let p = v.dot(&i_o);
    let vd = park(theta, v);
    let id = park(theta, i_o);
    (p, 1.5 * (vd.q * id.d - vd.d * id.q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadyStateWindow {
    pub window: f64,
    /// Relative band around the trailing mean.
    pub tolerance: f64,
    /// Absolute lower bound on the band, for channels settling near zero.
    pub abs_floor: f64,
}

impl Default for SteadyStateWindow {
    fn default() -> Self {
        SteadyStateWindow { window: 0.2, tolerance: 5e-3, abs_floor: 0.0 }
    }
}

impl SteadyStateWindow {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.window > 0.0 && self.tolerance > 0.0 && self.abs_floor >= 0.0) {
            return Err(AnalysisError::Invalid("steady-state window needs window > 0 and tolerance > 0".into()));
        }
        Ok(())
    }

    fn band(&self, mean: f64) -> f64 {
        (self.tolerance * mean.abs()).max(self.abs_floor)
    }
}

/// Mean of `x` over samples with `t >= t_end − window`.
pub fn trailing_mean(t: &[f64], x: &[f64], window: f64) -> Option<f64> {
    let end = *t.last()?;
    let start = t.partition_point(|&s| s < end - window);
    let tail = &x[start..];
    if tail.is_empty() {
        return None;
    }
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Earliest time after which the channel stays inside the band around its
/// final-window mean to the end of the trace. The settled stretch must itself
/// span at least one window.
pub fn detect_steady_state(t: &[f64], x: &[f64], w: &SteadyStateWindow) -> Option<f64> {
    if t.len() != x.len() || t.len() < 2 || w.validate().is_err() {
        return None;
    }
    let end = *t.last()?;
    if end - t[0] < w.window {
        return None;
    }
    let mean = trailing_mean(t, x, w.window)?;
    settle_time(t, x, mean, w.band(mean)).filter(|&ts| end - ts >= w.window)
}

/// Earliest time after which `|x − center| <= band` holds to the end.
pub fn settle_time(t: &[f64], x: &[f64], center: f64, band: f64) -> Option<f64> {
    let mut first = None;
    for i in (0..x.len()).rev() {
        if (x[i] - center).abs() <= band && x[i].is_finite() {
            first = Some(i);
        } else {
            break;
        }
    }
    first.map(|i| t[i])
}

/// Remove 2π jumps.
pub fn unwrap_angles(theta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    let mut offset = 0.0;
    for (k, &th) in theta.iter().enumerate() {
        if k > 0 {
            let d = th - theta[k - 1];
            if d > PI {
                offset -= TAU;
            } else if d < -PI {
                offset += TAU;
            }
        }
        out.push(th + offset);
    }
    out
}

/// Frequency and its rate of change from a uniformly sampled angle trace.
/// Central differences inside, second-order one-sided stencils at the ends.
pub fn frequency_and_rocof(theta: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let th = unwrap_angles(theta);
    let n = th.len();
    if n < 3 {
        return (vec![0.0; n], vec![0.0; n]);
    }
    let mut omega = vec![0.0; n];
    let mut rocof = vec![0.0; n];
    for i in 1..n - 1 {
        omega[i] = (th[i + 1] - th[i - 1]) / (2.0 * dt);
        rocof[i] = (th[i + 1] - 2.0 * th[i] + th[i - 1]) / (dt * dt);
    }
    omega[0] = (-3.0 * th[0] + 4.0 * th[1] - th[2]) / (2.0 * dt);
    omega[n - 1] = (3.0 * th[n - 1] - 4.0 * th[n - 2] + th[n - 3]) / (2.0 * dt);
    rocof[0] = (th[2] - 2.0 * th[1] + th[0]) / (dt * dt);
    rocof[n - 1] = (th[n - 1] - 2.0 * th[n - 2] + th[n - 3]) / (dt * dt);
    (omega, rocof)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PllGains {
    pub kp: f64,
    pub ki: f64,
    pub omega_nominal: f64,
    pub v_nominal: f64,
}

impl Default for PllGains {
    fn default() -> Self {
        PllGains { kp: 100.0, ki: 2000.0, omega_nominal: 100.0 * PI, v_nominal: 230.0 * 2f64.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PllState {
    pub theta_hat: f64,
    pub omega_hat: f64,
    pub integrator: f64,
    /// Normalized phase error of the last update.
    pub error: f64,
    pub lost_lock: bool,
    window_elapsed: f64,
    window_start_error: f64,
}

impl PllState {
    pub fn new(theta_hat: f64, omega_hat: f64) -> Self {
        PllState { theta_hat, omega_hat, window_start_error: f64::INFINITY, ..Default::default() }
    }

    pub fn locked(&self) -> bool {
        !self.lost_lock
    }
}

const LOCK_CHECK_PERIOD: f64 = 0.2;
const LOCK_ERROR_FLOOR: f64 = 1e-3;

/// One update of a synchronous-reference-frame PLL. The phase error is the
/// q-component of `v` at the estimated angle over the amplitude, which equals
/// `sin(θ − θ̂)` for a balanced input.
pub fn pll_step(s: &PllState, v: ThreePhase, ts: f64, g: &PllGains) -> PllState {
    let dq = park(s.theta_hat, v);
    let amp = dq.magnitude();
    let mut next = *s;
    if amp < 0.01 * g.v_nominal {
        next.theta_hat = wrap_unchecked(s.theta_hat + ts * s.omega_hat);
        next.lost_lock = true;
        next.window_elapsed = 0.0;
        next.window_start_error = f64::INFINITY;
        return next;
    }
    let e = dq.q / amp;
    next.error = e;
    next.integrator = s.integrator + ts * g.ki * e;
    next.omega_hat = g.omega_nominal + g.kp * e + s.integrator;
    next.theta_hat = wrap_unchecked(s.theta_hat + ts * next.omega_hat);

    next.window_elapsed = s.window_elapsed + ts;
    if s.window_start_error.is_infinite() {
        next.window_start_error = e.abs();
    }
    if next.window_elapsed >= LOCK_CHECK_PERIOD {
        next.lost_lock = e.abs() > LOCK_ERROR_FLOOR && e.abs() >= next.window_start_error;
        next.window_elapsed = 0.0;
        next.window_start_error = e.abs();
    }
    if !(0.5 * g.omega_nominal..=1.5 * g.omega_nominal).contains(&next.omega_hat) {
        next.lost_lock = true;
    }
    next
}

/// `γ(θ_s − θ*) + P_s − P*`; zero at a droop steady state.
pub fn droop_law_residual(g: &DroopGains, theta_s: f64, theta_star: f64, p_s: f64) -> f64 {
    g.gamma * (theta_s - theta_star) + p_s - g.p_star
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunningCost {
    pub total: f64,
    /// `α ∫u²`
    pub control_term: f64,
    /// `1/(4α) ∫(γθ̃ + P − P*)²`
    pub balance_term: f64,
    pub integrand: Vec<f64>,
}

fn trapezoid(t: &[f64], y: &[f64]) -> f64 {
    t.windows(2).zip(y.windows(2)).map(|(tt, yy)| 0.5 * (tt[1] - tt[0]) * (yy[0] + yy[1])).sum()
}

/// Trapezoidal evaluation of the droop cost
/// `∫ α u² + (γθ̃ + P − P*)²/(4α) dt`.
pub fn running_cost(
    t: &[f64],
    delta_theta: &[f64],
    p: &[f64],
    u: &[f64],
    g: &DroopGains,
) -> Result<RunningCost, AnalysisError> {
    let n = t.len();
    if delta_theta.len() != n || p.len() != n || u.len() != n {
        return Err(AnalysisError::Invalid("running cost needs aligned traces".into()));
    }
    let control: Vec<f64> = u.iter().map(|u| g.alpha * u * u).collect();
    let balance: Vec<f64> = delta_theta
        .iter()
        .zip(p)
        .map(|(th, p)| {
            let m = g.gamma * th + p - g.p_star;
            m * m / (4.0 * g.alpha)
        })
        .collect();
    let integrand: Vec<f64> = control.iter().zip(&balance).map(|(a, b)| a + b).collect();
    let control_term = trapezoid(t, &control);
    let balance_term = trapezoid(t, &balance);
    Ok(RunningCost { total: control_term + balance_term, control_term, balance_term, integrand })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SharingMetrics {
    pub p1_mean: f64,
    pub p2_mean: f64,
    pub ratio: f64,
    pub relative_error: f64,
}

pub fn sharing_metrics(
    t: &[f64],
    p1: &[f64],
    p2: &[f64],
    r_expected: f64,
    w: &SteadyStateWindow,
) -> Result<SharingMetrics, AnalysisError> {
    let floor = SteadyStateWindow { abs_floor: w.abs_floor.max(1.0), ..*w };
    detect_steady_state(t, p1, &floor).ok_or_else(|| AnalysisError::NoSteadyState("P_1".into()))?;
    detect_steady_state(t, p2, &floor).ok_or_else(|| AnalysisError::NoSteadyState("P_2".into()))?;
    let p1_mean = trailing_mean(t, p1, w.window).unwrap_or(f64::NAN);
    let p2_mean = trailing_mean(t, p2, w.window).unwrap_or(f64::NAN);
    if !(p2_mean.abs() >= 1.0) {
        return Err(AnalysisError::UndefinedRatio { p2: p2_mean });
    }
    let ratio = p1_mean / p2_mean;
    Ok(SharingMetrics { p1_mean, p2_mean, ratio, relative_error: (ratio - r_expected).abs() / r_expected })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Nadir {
    pub time: f64,
    pub value: f64,
    /// Largest `|ω − ω_ref|` after the start time.
    pub depth: f64,
}

pub fn nadir(t: &[f64], omega: &[f64], omega_ref: f64, t_from: f64) -> Option<Nadir> {
    let start = t.partition_point(|&s| s < t_from);
    (start..t.len())
        .max_by(|&a, &b| (omega[a] - omega_ref).abs().total_cmp(&(omega[b] - omega_ref).abs()))
        .map(|i| Nadir { time: t[i], value: omega[i], depth: (omega[i] - omega_ref).abs() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralPeak {
    pub frequency: f64,
    /// Single-sided amplitude of the detrended, Hann-windowed signal.
    pub amplitude: f64,
    /// Standard deviation of the detrended signal.
    pub rms: f64,
}

/// Dominant oscillation in `[f_min, f_max]` by a direct DFT scan with
/// resolution `df`. The mean is removed first.
pub fn spectral_peak(x: &[f64], dt: f64, f_min: f64, f_max: f64, df: f64) -> Option<SpectralPeak> {
    let n = x.len();
    if n < 4 || !(df > 0.0) || f_max < f_min {
        return None;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let win: Vec<f64> =
        (0..n).map(|k| 0.5 - 0.5 * (TAU * k as f64 / (n - 1) as f64).cos()).collect();
    let wsum: f64 = win.iter().sum();
    let y: Vec<f64> = x.iter().zip(&win).map(|(x, w)| (x - mean) * w).collect();
    let rms = (x.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let steps = ((f_max - f_min) / df).round() as usize;
    let mut best = SpectralPeak { frequency: f_min, amplitude: -1.0, rms };
    for j in 0..=steps {
        let f = f_min + j as f64 * df;
        // Goertzel recursion
        let w = TAU * f * dt;
        let coeff = 2.0 * w.cos();
        let (mut s1, mut s2) = (0.0, 0.0);
        for &v in &y {
            let s0 = v + coeff * s1 - s2;
            s2 = s1;
            s1 = s0;
        }
        let re = s1 - s2 * w.cos();
        let im = s2 * w.sin();
        let amp = 2.0 * re.hypot(im) / wsum;
        if amp > best.amplitude {
            best = SpectralPeak { frequency: f, amplitude: amp, rms };
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::synth_three_phase;
    use proptest::prelude::*;

    #[test]
    fn power_examples() {
        let v = synth_three_phase(325.0, 0.3);
        assert_eq!(instantaneous_power(v, ThreePhase::ZERO, 0.3), (0.0, 0.0));
        let (p, q) = instantaneous_power(v, synth_three_phase(10.0, 0.3), 0.3);
        assert!((p - 1.5 * 3250.0).abs() < 1e-9 && q.abs() < 1e-9);
        let (p, q) = instantaneous_power(v, synth_three_phase(10.0, 0.3 - PI / 2.0), 0.3);
        assert!(p.abs() < 1e-9 && (q - 1.5 * 3250.0).abs() < 1e-9);
    }

    fn grid(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn steady_state_examples() {
        let t = grid(1001, 1e-3);
        let w = SteadyStateWindow::default();
        assert_eq!(detect_steady_state(&t, &vec![3.0; 1001], &w), Some(0.0));

        let diverging: Vec<f64> = t.iter().map(|t| (5.0 * t).exp()).collect();
        assert_eq!(detect_steady_state(&t, &diverging, &w), None);

        let short = grid(50, 1e-3);
        assert_eq!(detect_steady_state(&short, &vec![1.0; 50], &w), None);
    }

    #[test]
    fn steady_state_exponential_decay() {
        let (level, step, tau, tol) = (100.0, 50.0, 0.1, 0.01);
        let t = grid(20_001, 1e-4);
        let x: Vec<f64> = t.iter().map(|t| level + step * (-t / tau).exp()).collect();
        let w = SteadyStateWindow { window: 0.2, tolerance: tol, abs_floor: 0.0 };
        let found = detect_steady_state(&t, &x, &w).unwrap();
        let closed_form = tau * (step / (tol * level)).ln();
        assert!((found - closed_form).abs() < 2e-3, "{found} vs {closed_form}");
    }

    #[test]
    fn frequency_examples() {
        let dt = 1e-4;
        let w0 = 100.0 * PI;
        let lin: Vec<f64> = (0..500).map(|k| wrap_unchecked(w0 * k as f64 * dt)).collect();
        let (om, rc) = frequency_and_rocof(&lin, dt);
        assert!(om.iter().all(|o| (o - w0).abs() < 1e-6));
        assert!(rc.iter().all(|r| r.abs() < 1e-1));

        let a = 3.0;
        let quad: Vec<f64> =
            (0..500).map(|k| {
                let t = k as f64 * dt;
                w0 * t + 0.5 * a * t * t
            }).collect();
        let (om, rc) = frequency_and_rocof(&quad, dt);
        assert!(rc.iter().all(|r| (r - a).abs() < 1e-4), "{:?}", &rc[..3]);
        assert!((om[250] - (w0 + a * 250.0 * dt)).abs() < 1e-8);
    }

    #[test]
    fn pll_locked_input_is_fixed_point() {
        let g = PllGains::default();
        let s = PllState::new(0.4, g.omega_nominal);
        let n = pll_step(&s, synth_three_phase(325.0, 0.4), 1e-4, &g);
        assert!(n.error.abs() < 1e-12 && n.integrator.abs() < 1e-12);
        assert!((n.theta_hat - (0.4 + 1e-4 * g.omega_nominal)).abs() < 1e-12);
        assert!(n.locked());
    }

    fn run_pll(phase: f64, omega: f64, secs: f64) -> (PllState, Vec<f64>) {
        let g = PllGains::default();
        let ts = 1e-4;
        let mut s = PllState::new(0.0, g.omega_nominal);
        let mut errs = Vec::new();
        for k in 0..(secs / ts) as usize {
            let th = phase + omega * k as f64 * ts;
            s = pll_step(&s, synth_three_phase(325.27, th), ts, &g);
            errs.push(s.error);
        }
        (s, errs)
    }

    #[test]
    fn pll_phase_offset_converges() {
        // poles of s² + 100 s + 2000 sit at −27.6 and −72.4
        let (s, errs) = run_pll(0.1, 100.0 * PI, 0.5);
        assert!(errs[999].abs() < 2e-2);
        assert!(errs[3499..].iter().all(|e| e.abs() < 1e-4), "{}", errs[3499]);
        assert!(s.locked());
    }

    #[test]
    fn pll_tracks_frequency_offset() {
        let w = 2.0 * PI * 50.5;
        let (s, _) = run_pll(0.0, w, 0.6);
        assert!((s.omega_hat - w).abs() < 1e-3 * w);
        assert!(s.locked());
    }

    #[test]
    fn pll_flags_dead_input() {
        let g = PllGains::default();
        let s = pll_step(&PllState::new(0.0, g.omega_nominal), ThreePhase::ZERO, 1e-4, &g);
        assert!(s.lost_lock);
    }

    #[test]
    fn droop_residual_examples() {
        let g = DroopGains::default();
        assert_eq!(droop_law_residual(&g, 0.0, 0.0, g.p_star), 0.0);
        let dth = (g.p_star - 3800.0) / g.gamma;
        assert!(droop_law_residual(&g, dth, 0.0, 3800.0).abs() < 1e-9);
        let wrong = DroopGains { gamma: 6e4, ..g };
        let r = droop_law_residual(&wrong, dth, 0.0, 3800.0);
        assert!((r - (6e4 - g.gamma) * dth).abs() < 1e-9);
    }

    #[test]
    fn running_cost_examples() {
        let g = DroopGains::default();
        let t = grid(100, 1e-3);
        let z = vec![0.0; 100];
        let ps = vec![g.p_star; 100];
        assert_eq!(running_cost(&t, &z, &ps, &z, &g).unwrap().total, 0.0);

        let u: Vec<f64> = t.iter().map(|t| (10.0 * t).sin()).collect();
        let c1 = running_cost(&t, &z, &ps, &u, &g).unwrap();
        let c2 = running_cost(&t, &z, &ps, &u, &DroopGains { alpha: 2.0 * g.alpha, ..g }).unwrap();
        assert_eq!(c2.control_term, 2.0 * c1.control_term);
        assert!(running_cost(&t, &z[..5], &ps, &u, &g).is_err());
    }

    #[test]
    fn sharing_metrics_examples() {
        let t = grid(1000, 1e-3);
        let w = SteadyStateWindow::default();
        let m = sharing_metrics(&t, &vec![1440.0; 1000], &vec![1440.0; 1000], 1.0, &w).unwrap();
        assert_eq!(m.ratio, 1.0);
        let e = sharing_metrics(&t, &vec![1440.0; 1000], &vec![0.1; 1000], 1.0, &w).unwrap_err();
        assert!(matches!(e, AnalysisError::UndefinedRatio { .. }));
    }

    #[test]
    fn nadir_finds_deepest_dip() {
        let t = grid(100, 0.01);
        let om: Vec<f64> = t.iter().map(|t| 314.0 - (-(t - 0.4) * (t - 0.4) * 50.0).exp()).collect();
        let n = nadir(&t, &om, 314.0, 0.1).unwrap();
        assert!((n.time - 0.4).abs() < 1e-9 && (n.depth - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_peak_finds_tone() {
        let dt = 1e-3;
        let x: Vec<f64> = (0..10_000).map(|k| 5.0 + 2.0 * (TAU * 0.5 * k as f64 * dt).sin()).collect();
        let pk = spectral_peak(&x, dt, 0.05, 5.0, 0.01).unwrap();
        assert!((pk.frequency - 0.5).abs() < 0.02);
        assert!((pk.amplitude - 2.0).abs() < 0.05, "{}", pk.amplitude);
        let flat = spectral_peak(&vec![5.0; 10_000], dt, 0.05, 5.0, 0.01).unwrap();
        assert!(flat.amplitude < 1e-12 && flat.rms < 1e-12);
    }

    proptest! {
        #[test]
        fn unwrap_restores_ramps(w in -2000.0f64..2000.0, th0 in 0.0f64..6.0) {
            let dt = 1e-4;
            let raw: Vec<f64> = (0..300).map(|k| th0 + w * k as f64 * dt).collect();
            let wrapped: Vec<f64> = raw.iter().map(|x| wrap_unchecked(*x)).collect();
            let un = unwrap_angles(&wrapped);
            let shift = un[0] - raw[0];
            for (a, b) in un.iter().zip(&raw) {
                prop_assert!((a - b - shift).abs() < 1e-9);
            }
        }
    }
}
