//! PI gain synthesis from phase-margin specifications, and verification of
//! the resulting margins against the delay-aware open-loop transfer
//! functions.
//!
//! All four converter loops reduce to the same pattern: a first-order R-L or
//! capacitor plant, a computation-plus-modulation delay of `T_d = 1.5 * T_s`,
//! and a PI whose integral time cancels the plant pole. The crossover then
//! sits where the delay has eaten the requested phase margin,
//! `omega_c = (pi/2 - phi_m) / T_d`, and the proportional gain normalizes
//! the open-loop magnitude to one at that frequency.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TuningError {
    #[error("stability criterion violated: a = {a:.3} must exceed 2 (phase margin too small)")]
    StabilityCriterion { a: f64 },
    #[error("phase margin {phi_m:.4} rad is outside (0, pi/2)")]
    PhaseMarginRange { phi_m: f64 },
    #[error("integral time undefined for zero path resistance; use a pure-P loop instead")]
    UndefinedIntegralTime,
    #[error("no unity-gain crossover inside the sweep [{lo:.3}, {hi:.3}] rad/s")]
    NoCrossover { lo: f64, hi: f64 },
    #[error("sweep must hold at least 200 log-spaced points, got {0}")]
    SweepTooCoarse(usize),
    #[error("inner current loop is unstable for these gains (encirclement detected on the sweep grid)")]
    InnerLoopUnstable,
}

/// Proportional gain, integral time constant and output limit of one loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiGains {
    pub kp: f64,
    pub tau_i: f64,
    pub output_limit: Option<f64>,
}

impl PiGains {
    pub fn new(kp: f64, tau_i: f64) -> Self {
        Self { kp, tau_i, output_limit: None }
    }

    pub fn with_limit(mut self, limit: f64) -> Self {
        self.output_limit = Some(limit);
        self
    }

    /// Integral gain `K_i = K_p / tau_i`.
    pub fn ki(&self) -> f64 {
        self.kp / self.tau_i
    }

    /// PI frequency response `K_p * (1 + 1/(tau_i * j*omega))`.
    pub fn response(&self, omega: f64) -> Complex64 {
        Complex64::new(self.kp, 0.0)
            * (Complex64::new(1.0, 0.0) + 1.0 / Complex64::new(0.0, self.tau_i * omega))
    }
}

/// Phase-margin specification of one loop together with the discrete timing
/// it will run under. `digital_delay` defaults to `1.5 * sample_time`
/// (one-sample computation pipeline plus the half-sample hold average).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSpec {
    pub phase_margin: f64,
    pub sample_time: f64,
    pub digital_delay: f64,
}

impl LoopSpec {
    pub fn new(phase_margin: f64, sample_time: f64) -> Self {
        Self { phase_margin, sample_time, digital_delay: 1.5 * sample_time }
    }

    pub fn with_delay(mut self, digital_delay: f64) -> Self {
        self.digital_delay = digital_delay;
        self
    }

    fn validate(&self) -> Result<(), TuningError> {
        if self.phase_margin <= 0.0 || self.phase_margin >= std::f64::consts::FRAC_PI_2 {
            return Err(TuningError::PhaseMarginRange { phi_m: self.phase_margin });
        }
        Ok(())
    }

    /// Crossover frequency placed by the delay: `(pi/2 - phi_m) / T_d`.
    pub fn crossover(&self) -> f64 {
        (std::f64::consts::FRAC_PI_2 - self.phase_margin) / self.digital_delay
    }
}

/// Power-stage parameters consumed by the tuning formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardwareParams {
    /// Shunt-converter filter inductance, H.
    pub l_f: f64,
    /// Shunt-converter filter inductor resistance, ohm.
    pub r_f: f64,
    /// Common-mode choke inductance, H.
    pub l_cm: f64,
    /// Differential-mode choke inductance (per leg), H.
    pub l_dm: f64,
    /// H-bridge path resistance (per leg), ohm.
    pub r: f64,
    /// Series-module dc-link capacitance, F.
    pub c: f64,
    /// dc-link capacitor ESR, ohm.
    pub r_s: f64,
    /// Shunt dc-bus voltage, V.
    pub v_dc_bus: f64,
}

/// H-bridge path resistance is not a published value; this default makes the
/// bundled table1 gain preset (kp_cm = 10, ki_cm = 261) self-consistent with
/// the tuning formulas.
pub const DEFAULT_HBRIDGE_PATH_RESISTANCE: f64 = 0.1;

/// Filter inductor resistance default, same back-derivation spirit: gives a
/// 10 ms integral time with the bundled 1 mH filter inductor.
pub const DEFAULT_AFE_INDUCTOR_RESISTANCE: f64 = 0.1;

impl HardwareParams {
    /// Table1 parameter set with the named resistance defaults.
    pub fn table1() -> Self {
        Self {
            l_f: 1.0e-3,
            r_f: DEFAULT_AFE_INDUCTOR_RESISTANCE,
            l_cm: 2.0e-3,
            l_dm: 100e-6,
            r: DEFAULT_HBRIDGE_PATH_RESISTANCE,
            c: 2.2e-3,
            r_s: 0.0,
            v_dc_bus: 800.0,
        }
    }

    /// Effective common-mode inductance `L_cm + L_dm / 2`.
    pub fn l_cm_eff(&self) -> f64 {
        self.l_cm + self.l_dm / 2.0
    }
}

/// Shunt-converter current loop: `K_p = L_f / (1.5 * a * T_s)` with
/// `a = 1 / (pi/2 - phi_m)`, `tau_i = L_f / R_f`. Requires `a > 2`.
pub fn tune_afe(hw: &HardwareParams, spec: &LoopSpec) -> Result<PiGains, TuningError> {
    spec.validate()?;
    let a = 1.0 / (std::f64::consts::FRAC_PI_2 - spec.phase_margin);
    if !(a > 2.0) || !a.is_finite() {
        return Err(TuningError::StabilityCriterion { a });
    }
    if hw.r_f <= 0.0 {
        return Err(TuningError::UndefinedIntegralTime);
    }
    Ok(PiGains::new(hw.l_f / (1.5 * a * spec.sample_time), hw.l_f / hw.r_f))
}

/// Common-mode current loop of the interconnecting H-bridge:
/// `K_p = omega_c * (L_cm + L_dm/2)`, `tau_i = (L_cm + L_dm/2) / (R/2)`.
pub fn tune_cm(hw: &HardwareParams, spec: &LoopSpec) -> Result<PiGains, TuningError> {
    spec.validate()?;
    if hw.r <= 0.0 {
        return Err(TuningError::UndefinedIntegralTime);
    }
    let omega_c = spec.crossover();
    let l = hw.l_cm_eff();
    Ok(PiGains::new(omega_c * l, l / (hw.r / 2.0)))
}

/// Differential-mode current loop: `K_p = omega_c * 2 * L_dm`,
/// `tau_i = 2*L_dm / (2*R) = L_dm / R`.
pub fn tune_dm(hw: &HardwareParams, spec: &LoopSpec) -> Result<PiGains, TuningError> {
    spec.validate()?;
    if hw.r <= 0.0 {
        return Err(TuningError::UndefinedIntegralTime);
    }
    let omega_c = spec.crossover();
    Ok(PiGains::new(omega_c * 2.0 * hw.l_dm, hw.l_dm / hw.r))
}

/// Series-module current loop: same first-order procedure against the total
/// line resistance and inductance seen by the module.
pub fn tune_series(
    r_line: f64,
    l_line: f64,
    spec: &LoopSpec,
) -> Result<PiGains, TuningError> {
    spec.validate()?;
    if r_line <= 0.0 {
        return Err(TuningError::UndefinedIntegralTime);
    }
    let omega_c = spec.crossover();
    Ok(PiGains::new(omega_c * l_line, l_line / r_line))
}

/// Placement of the outer dc-link voltage loop crossover relative to the
/// inner differential current loop.
///
/// The two variants are both shipped deliberately: the decade-below rule is
/// the conservative cascade design, while the at-crossover rule reproduces
/// the gain set the bundled table1 scenarios were published with and gives
/// the voltage loop enough bandwidth to carry the double-line-frequency
/// power ripple of a single-phase module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoltageLoopVariant {
    /// `omega_c_v = 0.1 * omega_c_dm`.
    DecadeBelow,
    /// `omega_c_v = omega_c_dm`; matches the bundled preset gains.
    #[default]
    AtCurrentCrossover,
}

/// Outer dc-link voltage loop: `K_p_v = omega_c_v * C` with the crossover
/// placed per `variant`; `tau_i_v = 10 / omega_c_v` puts the PI zero a decade
/// below the crossover.
pub fn tune_voltage(
    hw: &HardwareParams,
    inner: &PiGains,
    _spec: &LoopSpec,
    variant: VoltageLoopVariant,
) -> PiGains {
    // Inner crossover recovered from the dm proportional gain.
    let omega_c_dm = inner.kp / (2.0 * hw.l_dm);
    let omega_c_v = match variant {
        VoltageLoopVariant::DecadeBelow => 0.1 * omega_c_dm,
        VoltageLoopVariant::AtCurrentCrossover => omega_c_dm,
    };
    PiGains::new(omega_c_v * hw.c, 10.0 / omega_c_v)
}

/// Open-loop response of the common-mode current loop:
/// PI * delay * 1 / (R/2 + j*omega*(L_cm + L_dm/2)).
pub fn eval_ol_cm(g: &PiGains, hw: &HardwareParams, spec: &LoopSpec, omega: f64) -> Complex64 {
    let delay = Complex64::from_polar(1.0, -omega * spec.digital_delay);
    let plant = 1.0 / Complex64::new(hw.r / 2.0, omega * hw.l_cm_eff());
    g.response(omega) * delay * plant
}

/// Open-loop response of the differential-mode current loop:
/// PI * delay * 1 / (2R + j*omega*2*L_dm).
pub fn eval_ol_dm(g: &PiGains, hw: &HardwareParams, spec: &LoopSpec, omega: f64) -> Complex64 {
    let delay = Complex64::from_polar(1.0, -omega * spec.digital_delay);
    let plant = 1.0 / Complex64::new(2.0 * hw.r, omega * 2.0 * hw.l_dm);
    g.response(omega) * delay * plant
}

/// Open-loop response of the dc-link voltage loop: outer PI cascaded with the
/// closed inner current loop and the capacitor impedance `(1 + j*w*Rs*C) /
/// (j*w*C)`.
pub fn eval_ol_voltage(
    gv: &PiGains,
    gdm: &PiGains,
    hw: &HardwareParams,
    spec: &LoopSpec,
    omega: f64,
) -> Complex64 {
    let inner_ol = eval_ol_dm(gdm, hw, spec, omega);
    let inner_cl = inner_ol / (Complex64::new(1.0, 0.0) + inner_ol);
    let cap = Complex64::new(1.0, omega * hw.r_s * hw.c) / Complex64::new(0.0, omega * hw.c);
    gv.response(omega) * inner_cl * cap
}

/// Logarithmic frequency sweep parameters for margin measurement.
#[derive(Debug, Clone, Copy)]
pub struct Sweep {
    pub omega_min: f64,
    pub omega_max: f64,
    pub points: usize,
}

impl Sweep {
    pub fn new(omega_min: f64, omega_max: f64, points: usize) -> Self {
        Self { omega_min, omega_max, points }
    }

    pub fn omegas(&self) -> impl Iterator<Item = f64> + '_ {
        let log_lo = self.omega_min.ln();
        let log_hi = self.omega_max.ln();
        let n = self.points;
        (0..n).map(move |i| (log_lo + (log_hi - log_lo) * i as f64 / (n - 1) as f64).exp())
    }
}

/// Swept open-loop response with the measured crossover and phase margin.
#[derive(Debug, Clone)]
pub struct FrequencyResponse {
    pub omega: Vec<f64>,
    pub magnitude: Vec<f64>,
    /// Unwrapped phase, radians.
    pub phase: Vec<f64>,
    /// Lowest unity-gain frequency, log-interpolated.
    pub crossover: f64,
    /// `pi + angle(G(j*omega_c))`, radians.
    pub phase_margin_measured: f64,
}

/// Sweep an open-loop response, locate the lowest unity-gain crossover by
/// log-log interpolation, and read the phase margin there from the unwrapped
/// phase.
pub fn measure_margins<F>(eval: F, sweep: Sweep) -> Result<FrequencyResponse, TuningError>
where
    F: Fn(f64) -> Complex64,
{
    if sweep.points < 200 {
        return Err(TuningError::SweepTooCoarse(sweep.points));
    }
    let omega: Vec<f64> = sweep.omegas().collect();
    let mut magnitude = Vec::with_capacity(omega.len());
    let mut phase = Vec::with_capacity(omega.len());
    let mut prev_phase: Option<f64> = None;
    for &w in &omega {
        let g = eval(w);
        magnitude.push(g.norm());
        // Unwrap against the previous point so the delay term is continuous.
        let mut ph = g.arg();
        if let Some(prev) = prev_phase {
            while ph - prev > std::f64::consts::PI {
                ph -= 2.0 * std::f64::consts::PI;
            }
            while prev - ph > std::f64::consts::PI {
                ph += 2.0 * std::f64::consts::PI;
            }
        }
        prev_phase = Some(ph);
        phase.push(ph);
    }

    // Lowest |G| = 1 crossing, interpolated on log|G| vs log(omega).
    let mut crossover = None;
    for i in 1..omega.len() {
        let (m0, m1) = (magnitude[i - 1], magnitude[i]);
        if (m0 >= 1.0 && m1 < 1.0) || (m0 <= 1.0 && m1 > 1.0) || m0 == 1.0 {
            let l0 = m0.ln();
            let l1 = m1.ln();
            let frac = if (l1 - l0).abs() > 0.0 { -l0 / (l1 - l0) } else { 0.0 };
            let lw = omega[i - 1].ln() + frac * (omega[i].ln() - omega[i - 1].ln());
            let wc = lw.exp();
            let ph = phase[i - 1] + frac * (phase[i] - phase[i - 1]);
            crossover = Some((wc, ph));
            break;
        }
    }
    let (crossover, phase_at_wc) = crossover.ok_or(TuningError::NoCrossover {
        lo: sweep.omega_min,
        hi: sweep.omega_max,
    })?;
    Ok(FrequencyResponse {
        omega,
        magnitude,
        phase,
        crossover,
        phase_margin_measured: std::f64::consts::PI + phase_at_wc,
    })
}

/// Detect closed-loop instability of the inner current loop by counting the
/// winding of `1 + G_ol` around the origin along the sweep grid. A stable
/// loop returns with no net turn; an encirclement of -1 flags right
/// half-plane closed-loop poles.
pub fn check_inner_stability<F>(eval: F, sweep: Sweep) -> Result<(), TuningError>
where
    F: Fn(f64) -> Complex64,
{
    let mut winding = 0.0;
    let mut prev: Option<f64> = None;
    for w in sweep.omegas() {
        let z = Complex64::new(1.0, 0.0) + eval(w);
        let arg = z.arg();
        if let Some(p) = prev {
            let mut d = arg - p;
            while d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            }
            while d < -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            winding += d;
        }
        prev = Some(arg);
    }
    // The PI integrator parks the low-frequency phase near -pi/2; anything
    // beyond three quarter turns of net clockwise rotation means the locus
    // looped around -1.
    if winding.abs() > 1.5 * std::f64::consts::PI {
        return Err(TuningError::InnerLoopUnstable);
    }
    Ok(())
}

/// Margin measurement for the voltage loop, guarded by the inner-loop
/// stability check on the same grid.
pub fn measure_voltage_margins(
    gv: &PiGains,
    gdm: &PiGains,
    hw: &HardwareParams,
    spec: &LoopSpec,
    sweep: Sweep,
) -> Result<FrequencyResponse, TuningError> {
    check_inner_stability(|w| eval_ol_dm(gdm, hw, spec, w), sweep)?;
    measure_margins(|w| eval_ol_voltage(gv, gdm, hw, spec, w), sweep)
}
