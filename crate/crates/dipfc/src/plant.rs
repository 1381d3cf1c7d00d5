//! Continuous-time averaged models of the three power stages.
//!
//! Switch cells are replaced by their commanded average voltages, so the
//! fastest dynamics left are the filter time constants; switching frequencies
//! only matter for filter sizing. Every derivative function here is pure
//! (state, inputs) -> derivative, which keeps the integrator trivially
//! deterministic and the stages composable.

/// Parameters of one per-phase series-injection path: the two feeder line
/// sections plus the module's own series inductance, and the floating
/// dc-link capacitor.
#[derive(Debug, Clone, Copy)]
pub struct SeriesStageParams {
    pub r_line1: f64,
    pub l_line1: f64,
    pub r_line2: f64,
    pub l_line2: f64,
    /// Total series inductance contributed by the module itself, H.
    pub l_module: f64,
    /// Floating dc-link capacitance, F.
    pub c_dclink: f64,
}

impl SeriesStageParams {
    pub fn r_total(&self) -> f64 {
        self.r_line1 + self.r_line2
    }

    pub fn l_total(&self) -> f64 {
        self.l_line1 + self.l_line2 + self.l_module
    }
}

/// Continuous state of one series-injection phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeriesStageState {
    /// Line current, A (stationary frame).
    pub i_line: f64,
    /// Floating dc-link voltage, V; clamped non-negative by the integrator.
    pub v_dclink: f64,
}

/// Voltage floor used to keep the dc-link power balance well defined while
/// the link is discharged.
pub const DCLINK_EPS: f64 = 1e-3;

/// Series-path derivatives: line KVL plus the dc-link power balance.
///
/// `v_series` must already be the applied (clamped) module voltage and
/// `p_hbridge_in` the instantaneous power the interconnecting H-bridge feeds
/// into the dc link.
pub fn series_stage_deriv(
    state: &SeriesStageState,
    v1: f64,
    v2: f64,
    v_series: f64,
    p_hbridge_in: f64,
    params: &SeriesStageParams,
) -> SeriesStageState {
    let di_line = (v1 + v_series - v2 - params.r_total() * state.i_line) / params.l_total();
    let p_out = v_series * state.i_line;
    let dv = (p_hbridge_in - p_out) / (params.c_dclink * state.v_dclink.max(DCLINK_EPS));
    SeriesStageState { i_line: di_line, v_dclink: dv }
}

/// Parameters of the shunt converter: per-phase LC filter, grid coupling and
/// the shared dc bus.
#[derive(Debug, Clone, Copy)]
pub struct AfeParams {
    pub l_f: f64,
    pub r_f: f64,
    pub c_f: f64,
    /// Resistive tie between the filter-capacitor node and the feeder; keeps
    /// the capacitor voltage an honest state instead of pinning it to the
    /// source.
    pub r_grid: f64,
    /// Total dc-bus capacitance (stiff midpoint), F.
    pub c_bus: f64,
}

/// Continuous state of the shunt converter (three phases plus the bus).
#[derive(Debug, Clone, Copy, Default)]
pub struct AfeState {
    /// Inductor current per phase, A, positive flowing from the grid node
    /// into the converter.
    pub i_conv: [f64; 3],
    /// Filter-capacitor voltage per phase, V.
    pub v_cap: [f64; 3],
    /// Total split-bus voltage, V.
    pub v_bus: f64,
}

/// Result of one shunt-converter derivative evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct AfeDeriv {
    pub d_i_conv: [f64; 3],
    pub d_v_cap: [f64; 3],
    pub d_v_bus: f64,
    /// Set per phase when the voltage command exceeded the modulation limit
    /// and was clamped.
    pub saturated: [bool; 3],
}

/// Shunt-converter derivatives.
///
/// Voltage commands are clamped to the split-bus modulation limit
/// `|u| <= v_bus / 2`. `load_power` is the total power the interconnecting
/// H-bridges draw from the bus.
pub fn afe_deriv(
    state: &AfeState,
    v_grid: [f64; 3],
    duty_cmd: [f64; 3],
    load_power: f64,
    params: &AfeParams,
) -> AfeDeriv {
    let mut out = AfeDeriv::default();
    let limit = state.v_bus.max(0.0) / 2.0;
    let mut p_ac_in = 0.0;
    for ph in 0..3 {
        let u = duty_cmd[ph].clamp(-limit, limit);
        out.saturated[ph] = u != duty_cmd[ph];
        out.d_i_conv[ph] =
            (state.v_cap[ph] - u - params.r_f * state.i_conv[ph]) / params.l_f;
        let i_grid_side = (v_grid[ph] - state.v_cap[ph]) / params.r_grid;
        out.d_v_cap[ph] = (i_grid_side - state.i_conv[ph]) / params.c_f;
        p_ac_in += u * state.i_conv[ph];
    }
    out.d_v_bus = (p_ac_in - load_power) / (params.c_bus * state.v_bus.max(1e-3));
    out
}

/// Filter parameters of one interconnecting H-bridge.
#[derive(Debug, Clone, Copy)]
pub struct HBridgeParams {
    /// Per-leg path resistance, ohm.
    pub r: f64,
    /// Common-mode choke inductance (per winding, fully coupled), H.
    pub l_cm: f64,
    /// Differential-mode choke inductance (per leg), H.
    pub l_dm: f64,
}

impl HBridgeParams {
    pub fn l_cm_eff(&self) -> f64 {
        self.l_cm + self.l_dm / 2.0
    }
}

/// Common/differential-mode state of one interconnecting H-bridge.
///
/// The decomposition convention is `i_cm = i_1 + i_2` (total common-mode
/// current) and `i_dm = (i_1 - i_2) / 2`, so the physical leg currents are
/// recovered as `i_1 = i_cm/2 + i_dm`, `i_2 = i_cm/2 - i_dm`. This is the
/// convention under which the mode equations are an exact reduction of the
/// two-leg mesh circuit.
#[derive(Debug, Clone, Copy, Default)]
pub struct HBridgeState {
    pub i_cm: f64,
    pub i_dm: f64,
}

impl HBridgeState {
    pub fn leg_currents(&self) -> (f64, f64) {
        (self.i_cm / 2.0 + self.i_dm, self.i_cm / 2.0 - self.i_dm)
    }
}

/// H-bridge mode derivatives from the leg-terminal potentials `v_p`, `v_n`:
///   (L_cm + L_dm/2) * di_cm/dt = u_cm - (R/2)*i_cm - (v_p + v_n)/2
///   2*L_dm * di_dm/dt = u_dm - 2R*i_dm - (v_p - v_n)
pub fn hbridge_deriv(
    state: &HBridgeState,
    u_cm: f64,
    u_dm: f64,
    v_p: f64,
    v_n: f64,
    params: &HBridgeParams,
) -> HBridgeState {
    let v_cm = (v_p + v_n) / 2.0;
    let v_dm = v_p - v_n;
    HBridgeState {
        i_cm: (u_cm - params.r / 2.0 * state.i_cm - v_cm) / params.l_cm_eff(),
        i_dm: (u_dm - 2.0 * params.r * state.i_dm - v_dm) / (2.0 * params.l_dm),
    }
}
