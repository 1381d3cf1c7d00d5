//! Steady-state phasor arithmetic for the series-injection path.
//!
//! Everything in here works on per-phase RMS line-to-neutral quantities. The
//! series module inserts a controllable voltage between two feeders; these
//! functions answer the static questions about that arrangement: what line
//! current a given injection produces, what power lands in the receiving
//! feeder, and whether a pair of feeder voltages is bridgeable at all for a
//! given module dc-link voltage.

use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

/// Errors from the steady-state power-flow operations.
#[derive(Debug, Error, PartialEq)]
pub enum PhasorError {
    #[error("total line impedance is zero; the circuit is singular")]
    SingularCircuit,
    #[error("over-modulation: r = {r:.6} exceeds r_max = {r_max:.6} (dc-link {v_dc:.1} V, feeder {v1:.1} V)")]
    OverModulation { r: f64, r_max: f64, v_dc: f64, v1: f64 },
    #[error("line reactance must be positive, got {0}")]
    InvalidReactance(f64),
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Complex RMS electrical quantity: magnitude (volts or amperes) and angle.
///
/// Magnitude is kept non-negative and the angle normalized to (-pi, pi], so
/// equality comparisons on boundary cases are deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phasor {
    magnitude: f64,
    angle: f64,
}

impl Phasor {
    /// Build a phasor; a negative magnitude is folded into the angle.
    pub fn new(magnitude: f64, angle: f64) -> Self {
        if magnitude < 0.0 {
            Self {
                magnitude: -magnitude,
                angle: normalize_angle(angle + PI),
            }
        } else {
            Self {
                magnitude,
                angle: normalize_angle(angle),
            }
        }
    }

    pub fn from_complex(c: Complex64) -> Self {
        Self::new(c.norm(), c.arg())
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle)
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// Instantaneous value at grid angle `theta` (amplitude `sqrt(2) * magnitude`).
    pub fn instantaneous(&self, theta: f64) -> f64 {
        std::f64::consts::SQRT_2 * self.magnitude * (theta + self.angle).cos()
    }
}

/// Line impedance, either total ohms or ohms-per-km with a cable length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineImpedance {
    pub resistance: f64,
    pub reactance: f64,
    pub per_km: bool,
    pub length_km: f64,
}

impl LineImpedance {
    /// Total impedance in ohms.
    pub fn total(r: f64, x: f64) -> Self {
        Self { resistance: r, reactance: x, per_km: false, length_km: 1.0 }
    }

    /// Per-unit-length impedance; totals scale with `length_km`.
    pub fn per_km(r: f64, x: f64, length_km: f64) -> Self {
        Self { resistance: r, reactance: x, per_km: true, length_km }
    }

    pub fn as_complex(&self) -> Complex64 {
        let scale = if self.per_km { self.length_km } else { 1.0 };
        Complex64::new(self.resistance * scale, self.reactance * scale)
    }

    /// Series combination of two line sections.
    pub fn plus(&self, other: &LineImpedance) -> Complex64 {
        self.as_complex() + other.as_complex()
    }
}

/// Polar series-voltage command: `V_s = r * V_1` at angle `theta_1 + gamma`.
///
/// `r` is a dimensionless modulation ratio in `[0, r_max]` where
/// `r_max = V_dc / (sqrt(2) * V_1)`; `gamma` is kept in `[0, 2*pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesVoltageCommand {
    pub r: f64,
    pub gamma: f64,
}

impl SeriesVoltageCommand {
    pub fn new(r: f64, gamma: f64) -> Self {
        Self { r, gamma: gamma.rem_euclid(2.0 * PI) }
    }
}

/// Maximum modulation ratio for a dc-link voltage and feeder-1 RMS magnitude.
pub fn r_max(v_dc: f64, v1: f64) -> f64 {
    v_dc / (std::f64::consts::SQRT_2 * v1)
}

/// Feasible feeder-difference region for a given series dc-link voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingEnvelope {
    /// Largest bridgeable feeder angle difference, radians.
    pub max_angle_diff: f64,
    /// Largest bridgeable feeder magnitude difference, volts RMS.
    pub max_voltage_diff: f64,
}

/// Series-module operating mode chosen from the envelope verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatingMode {
    Active,
    Bypass,
}

// Boundary comparisons carry a small relative slack so that configurations
// constructed exactly at the envelope limits (a - (a - x) style arithmetic)
// do not flip on the last ulp.
const ENVELOPE_REL_TOL: f64 = 1e-9;

/// Line current for the series-injection loop: `(V1 + Vs - V2) / Z_total`.
pub fn line_current(
    v1: Phasor,
    v2: Phasor,
    vs: Phasor,
    z_total: &LineImpedance,
) -> Result<Phasor, PhasorError> {
    let z = z_total.as_complex();
    if z.norm() == 0.0 {
        return Err(PhasorError::SingularCircuit);
    }
    let i = (v1.to_complex() + vs.to_complex() - v2.to_complex()) / z;
    Ok(Phasor::from_complex(i))
}

/// Series-module output phasor for a polar command, bounded by the dc link.
///
/// Returns `r * V1` at angle `theta_1 + gamma`; commands beyond
/// `r_max = V_dc / (sqrt(2) * V1)` are rejected as over-modulation.
pub fn series_voltage(
    cmd: SeriesVoltageCommand,
    v1: Phasor,
    v_dc: f64,
) -> Result<Phasor, PhasorError> {
    let r_max = r_max(v_dc, v1.magnitude());
    if cmd.r > r_max * (1.0 + ENVELOPE_REL_TOL) {
        return Err(PhasorError::OverModulation {
            r: cmd.r,
            r_max,
            v_dc,
            v1: v1.magnitude(),
        });
    }
    Ok(Phasor::new(cmd.r * v1.magnitude(), v1.angle() + cmd.gamma))
}

/// Active and reactive power injected into feeder 2 through a purely reactive
/// line of reactance `xg`, for feeder phasors `v1`, `v2` and a series command.
///
/// Both terms of the two-branch closed form are evaluated directly:
/// the natural exchange driven by the feeder difference plus the
/// controllable exchange driven by the series voltage.
pub fn injected_power(
    v1: Phasor,
    v2: Phasor,
    cmd: SeriesVoltageCommand,
    xg: f64,
) -> Result<(f64, f64), PhasorError> {
    if xg <= 0.0 {
        return Err(PhasorError::InvalidReactance(xg));
    }
    let (v1m, v2m) = (v1.magnitude(), v2.magnitude());
    let dth = v1.angle() - v2.angle();
    let p = v1m * v2m / xg * dth.sin() + cmd.r * v1m * v2m / xg * (dth + cmd.gamma).sin();
    let q = v1m * v2m / xg * dth.cos() + cmd.r * v1m * v2m / xg * (dth + cmd.gamma).cos()
        - v2m * v2m / xg;
    Ok((p, q))
}

/// Check whether the feeder pair lies inside the bridgeable envelope and
/// return the envelope limits themselves.
///
/// The angle limit saturates at pi/2 once the dc link can synthesize the full
/// feeder voltage (ratio above one); that case is a wide-open envelope, not
/// an error.
pub fn operating_area(v1: Phasor, v2: Phasor, v_dc: f64) -> (bool, OperatingEnvelope) {
    let ratio = v_dc / (std::f64::consts::SQRT_2 * v1.magnitude());
    let max_angle_diff = if ratio >= 1.0 { PI / 2.0 } else { ratio.asin() };
    let max_voltage_diff = v_dc / std::f64::consts::SQRT_2;

    let dth = normalize_angle(v1.angle() - v2.angle()).abs();
    let dv = (v1.magnitude() - v2.magnitude()).abs();
    let slack_v = ENVELOPE_REL_TOL * v1.magnitude().max(1.0);
    let slack_a = ENVELOPE_REL_TOL;
    let inside = dth <= max_angle_diff + slack_a && dv <= max_voltage_diff + slack_v;
    (inside, OperatingEnvelope { max_angle_diff, max_voltage_diff })
}

/// Bypass the series modules whenever the feeder pair leaves the envelope.
pub fn bypass_decision(v1: Phasor, v2: Phasor, v_dc: f64) -> OperatingMode {
    let (inside, _) = operating_area(v1, v2, v_dc);
    if inside {
        OperatingMode::Active
    } else {
        OperatingMode::Bypass
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn table1_line() -> LineImpedance {
        LineImpedance::total(0.328, 0.16)
    }

    #[test]
    fn identical_feeders_no_injection_zero_current() {
        let v = Phasor::new(230.0, 0.0);
        let i = line_current(v, v, Phasor::new(0.0, 0.0), &table1_line()).unwrap();
        assert_eq!(i.magnitude(), 0.0);
    }

    #[test]
    fn line_current_matches_complex_division() {
        let v = Phasor::new(230.0, 0.0);
        let vs = Phasor::new(35.36, 0.0);
        let i = line_current(v, v, vs, &table1_line()).unwrap();
        // Independent oracle: direct complex arithmetic.
        let oracle = Complex64::new(35.36, 0.0) / Complex64::new(0.328, 0.16);
        assert_relative_eq!(i.magnitude(), oracle.norm(), max_relative = 1e-12);
        assert_relative_eq!(i.angle(), oracle.arg(), max_relative = 1e-12);
        assert_abs_diff_eq!(i.magnitude(), 96.89, epsilon = 0.01);
        assert_abs_diff_eq!(i.angle().to_degrees(), -26.0, epsilon = 0.01);
    }

    #[test]
    fn nominal_scenario_current_capability_is_about_95_a() {
        // With the module's own series inductance in the loop, full modulation
        // of a 50 V link drives just over 95 A between identical feeders.
        let w = 2.0 * PI * 50.0;
        let z = LineImpedance::total(0.328, 0.16 + w * 50e-6);
        let v = Phasor::new(400.0 / 3f64.sqrt(), 0.0);
        let vs = Phasor::new(50.0 / 2f64.sqrt(), 0.0);
        let i = line_current(v, v, vs, &z).unwrap();
        assert_abs_diff_eq!(i.magnitude(), 95.0, epsilon = 1.0);
    }

    #[test]
    fn zero_impedance_is_singular() {
        let v = Phasor::new(230.0, 0.0);
        let z = LineImpedance::total(0.0, 0.0);
        assert_eq!(
            line_current(v, v, Phasor::new(1.0, 0.0), &z),
            Err(PhasorError::SingularCircuit)
        );
    }

    #[test]
    fn per_km_impedance_scales_with_length() {
        let z1 = LineImpedance::per_km(0.164, 0.080, 1.0);
        let z2 = LineImpedance::per_km(0.164, 0.080, 1.0);
        let total = z1.plus(&z2);
        assert_relative_eq!(total.re, 0.328, max_relative = 1e-12);
        assert_relative_eq!(total.im, 0.16, max_relative = 1e-12);
    }

    #[test]
    fn series_voltage_zero_command() {
        let vs = series_voltage(SeriesVoltageCommand::new(0.0, 1.234), Phasor::new(230.0, 0.0), 50.0)
            .unwrap();
        assert_eq!(vs.magnitude(), 0.0);
    }

    #[test]
    fn series_voltage_direct_evaluation() {
        let vs = series_voltage(
            SeriesVoltageCommand::new(0.1, PI / 2.0),
            Phasor::new(230.0, 0.0),
            50.0,
        )
        .unwrap();
        assert_relative_eq!(vs.magnitude(), 23.0, max_relative = 1e-12);
        assert_relative_eq!(vs.angle(), PI / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn series_voltage_at_r_max_hits_dc_limit() {
        let v1 = Phasor::new(230.0, 0.0);
        let cmd = SeriesVoltageCommand::new(r_max(50.0, 230.0), 0.0);
        let vs = series_voltage(cmd, v1, 50.0).unwrap();
        assert_relative_eq!(vs.magnitude(), 50.0 / 2f64.sqrt(), max_relative = 1e-12);
        assert_abs_diff_eq!(vs.magnitude(), 35.36, epsilon = 0.01);
    }

    #[test]
    fn series_voltage_over_modulation_is_rejected() {
        let v1 = Phasor::new(230.0, 0.0);
        let cmd = SeriesVoltageCommand::new(0.2, 0.0);
        let err = series_voltage(cmd, v1, 50.0).unwrap_err();
        match err {
            PhasorError::OverModulation { r, r_max, .. } => {
                assert_eq!(r, 0.2);
                assert!(r > r_max);
            }
            other => panic!("expected over-modulation, got {other:?}"),
        }
    }

    #[test]
    fn injected_power_cancels_for_identical_feeders_no_command() {
        let v = Phasor::new(230.0, 0.0);
        let (p, q) = injected_power(v, v, SeriesVoltageCommand::new(0.0, 0.0), 0.16).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn injected_power_quadrature_command() {
        let v = Phasor::new(230.0, 0.0);
        let (p, q) =
            injected_power(v, v, SeriesVoltageCommand::new(0.1, PI / 2.0), 0.16).unwrap();
        assert_relative_eq!(p, 33_062.5, max_relative = 1e-9);
        assert_abs_diff_eq!(q, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn injected_power_voltage_difference_only() {
        let v1 = Phasor::new(230.0, 0.0);
        let v2 = Phasor::new(225.0, 0.0);
        let (p, q) = injected_power(v1, v2, SeriesVoltageCommand::new(0.0, 0.0), 0.16).unwrap();
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-9);
        assert_relative_eq!(q, 7031.25, max_relative = 1e-9);
    }

    #[test]
    fn injected_power_rejects_nonpositive_reactance() {
        let v = Phasor::new(230.0, 0.0);
        assert!(matches!(
            injected_power(v, v, SeriesVoltageCommand::new(0.0, 0.0), 0.0),
            Err(PhasorError::InvalidReactance(_))
        ));
    }

    #[test]
    fn operating_area_zero_differences_inside() {
        let v = Phasor::new(230.0, 0.0);
        let (inside, _) = operating_area(v, v, 50.0);
        assert!(inside);
    }

    #[test]
    fn operating_area_limits_for_50v_link() {
        let v = Phasor::new(230.0, 0.0);
        let (_, env) = operating_area(v, v, 50.0);
        assert_abs_diff_eq!(env.max_angle_diff, 0.154331, epsilon = 1e-5);
        assert_abs_diff_eq!(env.max_angle_diff.to_degrees(), 8.8425, epsilon = 1e-3);
        assert_abs_diff_eq!(env.max_voltage_diff, 35.3553, epsilon = 1e-4);
    }

    #[test]
    fn operating_area_voltage_branch_violation() {
        let v1 = Phasor::new(230.0, 0.0);
        let v2 = Phasor::new(190.0, 0.0);
        let (inside, _) = operating_area(v1, v2, 50.0);
        assert!(!inside);
    }

    #[test]
    fn angle_limit_saturates_for_large_dc_link() {
        let v1 = Phasor::new(100.0, 0.0);
        let (_, env) = operating_area(v1, v1, 200.0);
        assert_eq!(env.max_angle_diff, PI / 2.0);
    }

    #[test]
    fn bypass_decision_cases() {
        let v1 = Phasor::new(230.0, 0.0);
        assert_eq!(bypass_decision(v1, v1, 50.0), OperatingMode::Active);
        let v2 = Phasor::new(190.0, 0.0);
        assert_eq!(bypass_decision(v1, v2, 50.0), OperatingMode::Bypass);
        let v2_angle = Phasor::new(230.0, 10f64.to_radians());
        assert_eq!(bypass_decision(v1, v2_angle, 50.0), OperatingMode::Bypass);
    }

    #[test]
    fn bypass_flips_exactly_at_the_boundaries() {
        let v1 = Phasor::new(230.0, 0.0);
        let dv = 50.0 / 2f64.sqrt();
        let just_in = Phasor::new(230.0 - dv + 1e-3, 0.0);
        let just_out = Phasor::new(230.0 - dv - 1e-3, 0.0);
        assert_eq!(bypass_decision(v1, just_in, 50.0), OperatingMode::Active);
        assert_eq!(bypass_decision(v1, just_out, 50.0), OperatingMode::Bypass);

        let dth = r_max(50.0, 230.0).asin();
        let just_in = Phasor::new(230.0, dth - 1e-6);
        let just_out = Phasor::new(230.0, dth + 1e-6);
        assert_eq!(bypass_decision(v1, just_in, 50.0), OperatingMode::Active);
        assert_eq!(bypass_decision(v1, just_out, 50.0), OperatingMode::Bypass);
    }

    proptest! {
        /// Power closed form against the complex-power oracle S = V2 * conj(I)
        /// with I from `line_current` over a purely reactive line.
        #[test]
        fn power_matches_complex_power_oracle(
            v1m in 180.0..260.0f64,
            v2m in 180.0..260.0f64,
            th1 in -0.3..0.3f64,
            th2 in -0.3..0.3f64,
            r in 0.0..0.15f64,
            gamma in 0.0..(2.0 * PI),
            xg in 0.05..0.5f64,
        ) {
            let v1 = Phasor::new(v1m, th1);
            let v2 = Phasor::new(v2m, th2);
            let cmd = SeriesVoltageCommand::new(r, gamma);
            let (p, q) = injected_power(v1, v2, cmd, xg).unwrap();

            let vs = Phasor::new(r * v1m, th1 + gamma);
            let z = LineImpedance::total(0.0, xg);
            let i = line_current(v1, v2, vs, &z).unwrap();
            let s = v2.to_complex() * i.to_complex().conj();

            let scale = v1m * v2m / xg;
            prop_assert!((p - s.re).abs() <= 1e-9 * scale);
            prop_assert!((q - s.im).abs() <= 1e-9 * scale);
        }

        /// Negating both feeder angles leaves the envelope verdict unchanged.
        #[test]
        fn envelope_symmetry(
            v1m in 180.0..260.0f64,
            v2m in 180.0..260.0f64,
            th1 in -0.5..0.5f64,
            th2 in -0.5..0.5f64,
            vdc in 10.0..120.0f64,
        ) {
            let (a, _) = operating_area(Phasor::new(v1m, th1), Phasor::new(v2m, th2), vdc);
            let (b, _) = operating_area(Phasor::new(v1m, -th1), Phasor::new(v2m, -th2), vdc);
            prop_assert_eq!(a, b);
        }

        /// A larger dc link never shrinks the envelope.
        #[test]
        fn envelope_monotone_in_vdc(
            v1m in 180.0..260.0f64,
            vdc in 10.0..120.0f64,
            extra in 0.0..100.0f64,
        ) {
            let v = Phasor::new(v1m, 0.0);
            let (_, small) = operating_area(v, v, vdc);
            let (_, large) = operating_area(v, v, vdc + extra);
            prop_assert!(large.max_angle_diff >= small.max_angle_diff);
            prop_assert!(large.max_voltage_diff >= small.max_voltage_diff);
        }

        /// At r = r_max the series voltage magnitude is exactly V_dc / sqrt(2).
        #[test]
        fn r_max_boundary_magnitude(v1m in 100.0..260.0f64, vdc in 10.0..120.0f64) {
            let v1 = Phasor::new(v1m, 0.0);
            let vs = series_voltage(SeriesVoltageCommand::new(r_max(vdc, v1m), 0.0), v1, vdc).unwrap();
            prop_assert!((vs.magnitude() - vdc / 2f64.sqrt()).abs() < 1e-9);
        }
    }
}
