//! Reference-frame mathematics for balanced three-phase quantities.
//!
//! The Park transform here is amplitude invariant with a sine-aligned d-axis:
//! a balanced signal `V sin(θ)` (phase a) transformed at the same angle θ maps
//! to `d = V, q = 0`. Because of the amplitude scaling, instantaneous power in
//! the rotating frame carries an explicit 3/2 factor: `p = 3/2 (v_d i_d + v_q i_q)`.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::InvalidArgument;

const SHIFT: f64 = 2.0 * PI / 3.0;

/// Instantaneous three-phase quantity (volts or amperes).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThreePhase {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Rotating-frame quantity produced by [`park`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DqPair {
    pub d: f64,
    pub q: f64,
}

/// Angle in radians, always stored wrapped to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct Angle(f64);

impl Angle {
    pub fn new(theta: f64) -> Result<Self, InvalidArgument> {
        wrap_angle(theta).map(Angle)
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    /// Advance by `delta` radians, re-wrapping.
    pub fn advance(self, delta: f64) -> Self {
        Angle(wrap_unchecked(self.0 + delta))
    }
}

/// Wrap an angle to `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> Result<f64, InvalidArgument> {
    if !theta.is_finite() {
        return Err(InvalidArgument::NonFinite { name: "theta", value: theta });
    }
    Ok(wrap_unchecked(theta))
}

/// Wrap a finite angle to `[0, 2π)`. Non-finite input propagates as NaN.
pub(crate) fn wrap_unchecked(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Wrap an angle difference to `(-π, π]`.
pub fn wrap_pi(theta: f64) -> f64 {
    let w = wrap_unchecked(theta + PI) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

impl ThreePhase {
    pub const ZERO: ThreePhase = ThreePhase { a: 0.0, b: 0.0, c: 0.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        ThreePhase { a, b, c }
    }

    pub fn dot(&self, other: &ThreePhase) -> f64 {
        self.a * other.a + self.b * other.b + self.c * other.c
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Zero-sequence sum `a + b + c`.
    pub fn sum(&self) -> f64 {
        self.a + self.b + self.c
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        ThreePhase { a: f(self.a), b: f(self.b), c: f(self.c) }
    }

    pub fn zip(self, other: ThreePhase, f: impl Fn(f64, f64) -> f64) -> Self {
        ThreePhase { a: f(self.a, other.a), b: f(self.b, other.b), c: f(self.c, other.c) }
    }

    pub fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        ThreePhase { a: s[0], b: s[1], c: s[2] }
    }
}

impl Add for ThreePhase {
    type Output = ThreePhase;
    fn add(self, o: ThreePhase) -> ThreePhase {
        self.zip(o, |x, y| x + y)
    }
}

impl Sub for ThreePhase {
    type Output = ThreePhase;
    fn sub(self, o: ThreePhase) -> ThreePhase {
        self.zip(o, |x, y| x - y)
    }
}

impl Neg for ThreePhase {
    type Output = ThreePhase;
    fn neg(self) -> ThreePhase {
        self.map(|x| -x)
    }
}

impl Mul<f64> for ThreePhase {
    type Output = ThreePhase;
    fn mul(self, k: f64) -> ThreePhase {
        self.map(|x| x * k)
    }
}

impl DqPair {
    pub const ZERO: DqPair = DqPair { d: 0.0, q: 0.0 };

    pub fn new(d: f64, q: f64) -> Self {
        DqPair { d, q }
    }

    pub fn magnitude(&self) -> f64 {
        self.d.hypot(self.q)
    }

    /// Multiply by the rotation generator `J = [[0, -1], [1, 0]]`.
    pub fn rotate_j(self) -> Self {
        DqPair { d: -self.q, q: self.d }
    }
}

impl Add for DqPair {
    type Output = DqPair;
    fn add(self, o: DqPair) -> DqPair {
        DqPair { d: self.d + o.d, q: self.q + o.q }
    }
}

impl Sub for DqPair {
    type Output = DqPair;
    fn sub(self, o: DqPair) -> DqPair {
        DqPair { d: self.d - o.d, q: self.q - o.q }
    }
}

impl Mul<f64> for DqPair {
    type Output = DqPair;
    fn mul(self, k: f64) -> DqPair {
        DqPair { d: self.d * k, q: self.q * k }
    }
}

fn sines(theta: f64) -> ThreePhase {
    ThreePhase { a: theta.sin(), b: (theta - SHIFT).sin(), c: (theta + SHIFT).sin() }
}

fn cosines(theta: f64) -> ThreePhase {
    ThreePhase { a: theta.cos(), b: (theta - SHIFT).cos(), c: (theta + SHIFT).cos() }
}

/// Balanced sine set `A·(sin θ, sin(θ−2π/3), sin(θ+2π/3))`.
pub fn synth_three_phase(amplitude: f64, theta: f64) -> ThreePhase {
    sines(theta) * amplitude
}

/// Amplitude-invariant Park transform at angle `theta`. Zero sequence is discarded.
pub fn park(theta: f64, x: ThreePhase) -> DqPair {
    let s = sines(theta);
    let c = cosines(theta);
    DqPair { d: 2.0 / 3.0 * s.dot(&x), q: 2.0 / 3.0 * c.dot(&x) }
}

/// Inverse of [`park`] for balanced signals.
pub fn inverse_park(theta: f64, x: DqPair) -> ThreePhase {
    sines(theta) * x.d + cosines(theta) * x.q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!((wrap_angle(TAU + 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!((wrap_angle(-0.1).unwrap() - 6.183_185_307_179_586).abs() < 1e-12);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
        // a tiny negative must not round to 2π
        let w = wrap_angle(-1e-300).unwrap();
        assert!((0.0..TAU).contains(&w));
    }

    #[test]
    fn synth_examples() {
        let v = 10.0;
        let x = synth_three_phase(v, 0.0);
        let h = v * 3f64.sqrt() / 2.0;
        assert!(x.a.abs() < 1e-15);
        assert!((x.b + h).abs() < 1e-12 && (x.c - h).abs() < 1e-12);
        assert_eq!(synth_three_phase(0.0, 1.3), ThreePhase::ZERO);
        let y = synth_three_phase(325.27, PI / 2.0);
        assert!((y.a - 325.27).abs() < 1e-9);
        assert!((y.b + 162.635).abs() < 1e-9 && (y.c + 162.635).abs() < 1e-9);
    }

    #[test]
    fn park_examples() {
        let dq = park(0.7, synth_three_phase(100.0, 0.7));
        assert!((dq.d - 100.0).abs() < 1e-9 && dq.q.abs() < 1e-9);
        assert_eq!(park(0.0, ThreePhase::ZERO), DqPair::ZERO);
        let (theta, phi, v) = (0.7, 0.2, 100.0);
        let dq = park(theta + phi, synth_three_phase(v, theta));
        assert!((dq.d - v * phi.cos()).abs() < 1e-9);
        assert!((dq.q + v * phi.sin()).abs() < 1e-9);
    }

    #[test]
    fn inverse_park_examples() {
        let x = synth_three_phase(325.27, 1.1);
        let back = inverse_park(1.1, park(1.1, x));
        assert!((back - x).max_abs() < 1e-9);
        assert_eq!(inverse_park(0.4, DqPair::ZERO), ThreePhase::ZERO);
        let y = inverse_park(0.0, DqPair::new(50.0, 0.0));
        assert!((y - synth_three_phase(50.0, 0.0)).max_abs() < 1e-12);
    }

    #[test]
    fn zero_sequence_is_discarded() {
        let x = synth_three_phase(10.0, 0.3) + ThreePhase::new(2.0, 2.0, 2.0);
        let back = inverse_park(0.3, park(0.3, x));
        assert!((back - synth_three_phase(10.0, 0.3)).max_abs() < 1e-12);
    }

    #[test]
    fn wrap_pi_range() {
        assert!((wrap_pi(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_pi(-0.1) + 0.1).abs() < 1e-15);
        assert!(wrap_pi(PI) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn park_round_trip(v in 0.0f64..1000.0, theta in -50.0f64..50.0, t in -10.0f64..10.0) {
            let x = synth_three_phase(v, theta);
            prop_assert!(x.sum().abs() <= 1e-12 * v.max(1.0));
            let back = inverse_park(t, park(t, x));
            prop_assert!((back - x).max_abs() <= 1e-9 * v.max(1.0));
        }

        #[test]
        fn power_equivalence(v in 1.0f64..500.0, i in 0.1f64..50.0, tv in -7.0f64..7.0,
                              ti in -7.0f64..7.0, t in -7.0f64..7.0) {
            let vv = synth_three_phase(v, tv);
            let ii = synth_three_phase(i, ti);
            let p_abc = vv.dot(&ii);
            let (vd, id) = (park(t, vv), park(t, ii));
            let p_dq = 1.5 * (vd.d * id.d + vd.q * id.q);
            prop_assert!((p_abc - p_dq).abs() <= 1e-9 * v * i);
        }

        #[test]
        fn wrap_idempotent_and_periodic(x in -1.0e6f64..1.0e6, k in -100i32..100) {
            let w = wrap_angle(x).unwrap();
            prop_assert!((0.0..TAU).contains(&w));
            prop_assert_eq!(wrap_angle(w).unwrap(), w);
            let shifted = wrap_angle(x + f64::from(k) * TAU).unwrap();
            let diff = wrap_pi(shifted - w).abs();
            prop_assert!(diff < 1e-8);
        }
    }
}
