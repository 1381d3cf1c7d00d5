//! Ripple-based sizing of the interconnecting H-bridge filter elements:
//! differential-mode choke, X-capacitor and common-mode choke.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("switching frequency must be positive, got {0}")]
    NonPositiveFrequency(f64),
    #[error("ripple specification must be positive, got {0}")]
    NonPositiveRipple(f64),
    #[error("inductance must be positive, got {0}")]
    NonPositiveInductance(f64),
}

/// Ripple and attenuation targets for one H-bridge filter design.
///
/// `attenuation_decades` is a signed decade exponent applied to the switching
/// frequency: the filter corner lands at `10^A * f_sw`, so a negative `A`
/// places the corner below the switching frequency and actually attenuates.
/// The common-mode ripple target is normally far below the differential one;
/// that expectation is documented, not enforced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub v_dc_bus: f64,
    pub f_sw: f64,
    /// Differential-mode peak-to-peak current ripple target, A.
    pub i_ripple_dm: f64,
    /// Common-mode peak-to-peak current ripple target, A.
    pub i_ripple_cm: f64,
    /// Signed decade exponent for the X-capacitor corner frequency.
    pub attenuation_decades: f64,
}

impl FilterSpec {
    /// Ripple targets that reproduce the bundled table1 chokes
    /// (100 uH differential, 2 mH common-mode at 800 V / 100 kHz). The
    /// targets are back-derived from those element values, not design
    /// guidance.
    pub fn table1() -> Self {
        Self {
            v_dc_bus: 800.0,
            f_sw: 100e3,
            i_ripple_dm: 20.0,
            i_ripple_cm: 1.0,
            attenuation_decades: -1.0,
        }
    }

    fn validate(&self) -> Result<(), FilterError> {
        if self.f_sw <= 0.0 {
            return Err(FilterError::NonPositiveFrequency(self.f_sw));
        }
        if self.i_ripple_dm <= 0.0 {
            return Err(FilterError::NonPositiveRipple(self.i_ripple_dm));
        }
        if self.i_ripple_cm <= 0.0 {
            return Err(FilterError::NonPositiveRipple(self.i_ripple_cm));
        }
        Ok(())
    }
}

/// Differential-mode choke: `L_dm = V_dc_bus / (4 * f_sw * I_ripple_dm)`.
pub fn size_dm_choke(spec: &FilterSpec) -> Result<f64, FilterError> {
    spec.validate()?;
    Ok(spec.v_dc_bus / (4.0 * spec.f_sw * spec.i_ripple_dm))
}

/// Common-mode choke, same law against the common-mode ripple target.
pub fn size_cm_choke(spec: &FilterSpec) -> Result<f64, FilterError> {
    spec.validate()?;
    Ok(spec.v_dc_bus / (4.0 * spec.f_sw * spec.i_ripple_cm))
}

/// X-capacitor sizing result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CxSizing {
    pub c_x: f64,
    /// Resulting filter corner frequency, Hz.
    pub f_c: f64,
    /// Set when the corner lands at or above the switching frequency
    /// (non-negative attenuation exponent): the filter then provides no
    /// attenuation at `f_sw`.
    pub corner_at_or_above_switching: bool,
}

/// X-capacitor from the corner-frequency placement `f_c = 10^A * f_sw`,
/// inverting `f_c = 1 / (2*pi*sqrt(2*L_dm*C_x))`.
pub fn size_cx(spec: &FilterSpec, l_dm: f64) -> Result<CxSizing, FilterError> {
    spec.validate()?;
    if l_dm <= 0.0 {
        return Err(FilterError::NonPositiveInductance(l_dm));
    }
    let f_c = 10f64.powf(spec.attenuation_decades) * spec.f_sw;
    let w_c = 2.0 * std::f64::consts::PI * f_c;
    Ok(CxSizing {
        c_x: 1.0 / (w_c * w_c * 2.0 * l_dm),
        f_c,
        corner_at_or_above_switching: spec.attenuation_decades >= 0.0,
    })
}
