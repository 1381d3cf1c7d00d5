//! Deterministic fixed-step simulation of the composed plant with
//! zero-order-hold sampled controllers, a one-sample command pipeline and an
//! event schedule.
//!
//! RK4 at a fixed plant step: the averaged models have no stiff modes (the
//! fastest surviving time constant is the grid-coupling RC at a few
//! microseconds), and fixed stepping keeps every run bit-reproducible, which
//! the regression suite leans on. Controllers execute every `1/f_s`, their
//! outputs applied `delay_samples` ticks later; together with the hold that
//! realizes the usual 1.5-sample digital latency.

use crate::control::{
    AfeController, AfeMeasurements, HBridgeController, HBridgeLegCommands,
    HBridgeMeasurements, PiController, SeriesController,
};
use crate::frames::{abc_to_dq, DqVector, SinglePhaseSync, SrfPll};
use crate::phasor::{LineImpedance, Phasor};
use crate::plant::{
    afe_deriv, hbridge_deriv, series_stage_deriv, AfeParams, AfeState, HBridgeParams,
    HBridgeState, SeriesStageParams, SeriesStageState, DCLINK_EPS,
};
use crate::tuning::PiGains;
use std::collections::VecDeque;
use std::f64::consts::{PI, SQRT_2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("state diverged (non-finite value); last valid time {t:.6} s")]
    Divergence { t: f64 },
    #[error("plant step {dt_plant} does not divide the controller period {t_s}")]
    StepMismatch { dt_plant: f64, t_s: f64 },
    #[error("event times must be non-decreasing")]
    UnorderedEvents,
    #[error("loop did not settle within {0:.4} s")]
    NonSettling(f64),
}

/// Fixed-step integration and sampling configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    /// Simulated duration, s.
    pub t_end: f64,
    /// Plant integration step, s.
    pub dt_plant: f64,
    /// Controller execution rate, Hz.
    pub f_s: f64,
    /// Commands computed at tick n apply at tick n + delay_samples.
    pub delay_samples: usize,
    /// Record every n-th plant step.
    pub record_decimation: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { t_end: 0.6, dt_plant: 1e-6, f_s: 10e3, delay_samples: 1, record_decimation: 10 }
    }
}

impl SimConfig {
    /// Plant steps per controller tick; errors unless exact.
    pub fn substeps(&self) -> Result<usize, SimError> {
        let ratio = 1.0 / (self.f_s * self.dt_plant);
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 || n < 1.0 {
            return Err(SimError::StepMismatch { dt_plant: self.dt_plant, t_s: 1.0 / self.f_s });
        }
        Ok(n as usize)
    }

    /// Total command latency modeled by the pipeline plus hold, s.
    pub fn command_latency(&self) -> f64 {
        (self.delay_samples as f64 + 0.5) / self.f_s
    }
}

/// Scheduled scenario action, applied at the first controller tick at or
/// after its time.
#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    /// Leave bypass: run the interconnecting H-bridges and series modules.
    EnableModules,
    /// Replace the series current reference (peak dq, module sync frame).
    SetCurrentReference(DqVector),
    /// Negate the series current reference.
    ReversePower,
    /// Engage (true) or release (false) the series-module bypass.
    Bypass(bool),
    /// Simulated module fault: discharge the floating dc links and bypass.
    Fault,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub action: EventAction,
}

/// Ideal balanced three-phase feeder pair. Magnitudes are RMS
/// line-to-neutral of phase a; phases b and c follow at -120/+120 degrees.
#[derive(Debug, Clone, Copy)]
pub struct GridModel {
    pub omega: f64,
    pub v1_mag: f64,
    pub v1_angle: f64,
    pub v2_mag: f64,
    pub v2_angle: f64,
}

impl GridModel {
    const PHASE_SHIFT: [f64; 3] = [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0];

    pub fn v1_inst(&self, t: f64, phase: usize) -> f64 {
        SQRT_2 * self.v1_mag * (self.omega * t + self.v1_angle + Self::PHASE_SHIFT[phase]).cos()
    }

    pub fn v2_inst(&self, t: f64, phase: usize) -> f64 {
        SQRT_2 * self.v2_mag * (self.omega * t + self.v2_angle + Self::PHASE_SHIFT[phase]).cos()
    }

    /// Quadrature companion of the feeder-2 voltage (same amplitude, 90
    /// degrees behind), used for reactive-power bookkeeping.
    pub fn v2_quad(&self, t: f64, phase: usize) -> f64 {
        SQRT_2 * self.v2_mag * (self.omega * t + self.v2_angle + Self::PHASE_SHIFT[phase]).sin()
    }

    pub fn v1_phasor(&self) -> Phasor {
        Phasor::new(self.v1_mag, self.v1_angle)
    }

    pub fn v2_phasor(&self) -> Phasor {
        Phasor::new(self.v2_mag, self.v2_angle)
    }

    /// Angle of the module synchronization frame: the PLL tracks the
    /// midpoint of the two terminal voltages, which for symmetric lines is
    /// the average of the feeder sources.
    pub fn sync_angle(&self) -> f64 {
        let sum = self.v1_phasor().to_complex() + self.v2_phasor().to_complex();
        sum.arg()
    }
}

/// Gains for every loop of one run.
#[derive(Debug, Clone)]
pub struct ControlGains {
    pub afe_current: PiGains,
    pub afe_bus: PiGains,
    pub cm: PiGains,
    pub dm: PiGains,
    pub dclink_voltage: PiGains,
    pub series: PiGains,
}

/// Setpoints of one run.
#[derive(Debug, Clone, Copy)]
pub struct ControlRefs {
    pub v_bus_ref: f64,
    pub v_dclink_ref: f64,
    pub q_ref_afe: f64,
    /// Initial series current reference (peak dq, module sync frame).
    pub i_series_ref: DqVector,
    /// Feedforward of (feeder2 - feeder1) voltage (peak dq, sync frame).
    pub series_feedforward: DqVector,
}

/// Everything the engine needs for one run.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub grid: GridModel,
    pub series: SeriesStageParams,
    pub afe: AfeParams,
    pub hbridge: HBridgeParams,
    pub gains: ControlGains,
    pub refs: ControlRefs,
    pub schedule: Vec<Event>,
    pub sim: SimConfig,
}

/// Uniformly sampled named channels recorded by a run.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub names: Vec<String>,
    /// Column-major: `columns[ch][row]`.
    pub columns: Vec<Vec<f64>>,
}

impl TimeSeries {
    fn new(names: Vec<String>) -> Self {
        let columns = names.iter().map(|_| Vec::new()).collect();
        Self { names, columns }
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.columns.len());
        for (col, &v) in self.columns.iter_mut().zip(row) {
            col.push(v);
        }
    }
}

/// Steady-state figures over the closing window of one inter-event segment.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SegmentSummary {
    pub t_start: f64,
    pub t_end: f64,
    /// Per-phase RMS line current, pooled over the three phases, A.
    pub i_rms: f64,
    /// Three-phase active power into feeder 2, W.
    pub p: f64,
    /// Three-phase reactive power into feeder 2, var.
    pub q: f64,
    pub v_bus_mean: f64,
    pub v_dclink_mean: f64,
    pub i_cm_rms: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SummaryReport {
    pub segments: Vec<SegmentSummary>,
    /// Set when the run aborted on a non-finite state; carries the last
    /// valid time.
    pub diverged_at: Option<f64>,
    /// (time, description) pairs of recorded fault conditions.
    pub events_logged: Vec<(f64, String)>,
}

const CHANNELS: &[&str] = &[
    "time",
    "i_line_a", "i_line_b", "i_line_c",
    "v_dclink_a", "v_dclink_b", "v_dclink_c",
    "i_cm_a", "i_cm_b", "i_cm_c",
    "i_dm_a", "i_dm_b", "i_dm_c",
    "i_conv_a", "i_conv_b", "i_conv_c",
    "v_cap_a", "v_cap_b", "v_cap_c",
    "v_bus", "i_bus",
    "i_line_d", "i_line_q",
    "p_inj", "q_inj",
    "v_series_a",
    "dbg_p_afe", "dbg_p_hb", "dbg_u_cm_a", "dbg_u_dm_a",
];

/// Channel names recorded by [`run`], in column order.
pub fn channel_names() -> Vec<String> {
    CHANNELS.iter().map(|s| s.to_string()).collect()
}

// State vector layout for the composed plant.
const N_STATE: usize = 19;
const I_LINE: usize = 0; // 3
const V_DCLINK: usize = 3; // 3
const I_CM: usize = 6; // 3
const I_DM: usize = 9; // 3
const I_CONV: usize = 12; // 3
const V_CAP: usize = 15; // 3
const V_BUS: usize = 18;

/// One generic RK4 step of a fixed-size state vector.
pub fn rk4_step<const N: usize, F>(x: &[f64; N], t: f64, dt: f64, f: F) -> [f64; N]
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let k1 = f(t, x);
    let mut x2 = *x;
    for i in 0..N {
        x2[i] = x[i] + 0.5 * dt * k1[i];
    }
    let k2 = f(t + 0.5 * dt, &x2);
    for i in 0..N {
        x2[i] = x[i] + 0.5 * dt * k2[i];
    }
    let k3 = f(t + 0.5 * dt, &x2);
    for i in 0..N {
        x2[i] = x[i] + dt * k3[i];
    }
    let k4 = f(t + dt, &x2);
    let mut out = *x;
    for i in 0..N {
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Commands held between controller ticks.
#[derive(Debug, Clone, Copy, Default)]
struct Commands {
    v_series: [f64; 3],
    u_cm: [f64; 3],
    u_dm: [f64; 3],
    u_afe: [f64; 3],
}

struct PhaseModule {
    sync: SinglePhaseSync,
    series: SeriesController,
    hb: HBridgeController,
}

struct Plant<'a> {
    setup: &'a RunSetup,
    modules_on: bool,
}

impl Plant<'_> {
    /// Common-mode potential at the module terminals of one phase:
    /// the midpoint between the two line-side terminal voltages.
    fn v_cm_terminal(&self, t: f64, x: &[f64; N_STATE], cmd: &Commands, phase: usize) -> f64 {
        let p = &self.setup.series;
        let v1 = self.setup.grid.v1_inst(t, phase);
        let v2 = self.setup.grid.v2_inst(t, phase);
        let i = x[I_LINE + phase];
        let vs = self.applied_series_voltage(x, cmd, phase);
        let di = (v1 + vs - v2 - p.r_total() * i) / p.l_total();
        let v_a = v1 - p.r_line1 * i - p.l_line1 * di;
        let v_b = v2 + p.r_line2 * i + p.l_line2 * di;
        (v_a + v_b) / 2.0
    }

    /// Series voltage actually applied: zero in bypass, clamped to the
    /// instantaneous dc-link voltage otherwise.
    fn applied_series_voltage(&self, x: &[f64; N_STATE], cmd: &Commands, phase: usize) -> f64 {
        if !self.modules_on {
            return 0.0;
        }
        let limit = x[V_DCLINK + phase].max(0.0);
        cmd.v_series[phase].clamp(-limit, limit)
    }

    fn deriv(&self, t: f64, x: &[f64; N_STATE], cmd: &Commands) -> [f64; N_STATE] {
        let mut dx = [0.0; N_STATE];
        let grid = &self.setup.grid;
        let mut hbridge_power = 0.0;

        for ph in 0..3 {
            let v1 = grid.v1_inst(t, ph);
            let v2 = grid.v2_inst(t, ph);
            let vs = self.applied_series_voltage(x, cmd, ph);

            let mut hb_power_in = 0.0;
            if self.modules_on {
                // Leg commands limited by the physical rails, cm first.
                let leg_limit = x[V_BUS].max(0.0) / 2.0;
                let u_cm = cmd.u_cm[ph].clamp(-leg_limit, leg_limit);
                let headroom = 2.0 * (leg_limit - u_cm.abs()).max(0.0);
                let u_dm = cmd.u_dm[ph].clamp(-headroom, headroom);

                let v_cm = self.v_cm_terminal(t, x, cmd, ph);
                let v_link = x[V_DCLINK + ph].max(0.0);
                let hb_state = HBridgeState { i_cm: x[I_CM + ph], i_dm: x[I_DM + ph] };
                let d = hbridge_deriv(
                    &hb_state,
                    u_cm,
                    u_dm,
                    v_cm + v_link / 2.0,
                    v_cm - v_link / 2.0,
                    &self.setup.hbridge,
                );
                dx[I_CM + ph] = d.i_cm;
                dx[I_DM + ph] = d.i_dm;
                hbridge_power += u_cm * x[I_CM + ph] + u_dm * x[I_DM + ph];
                hb_power_in = v_link * x[I_DM + ph];
            }

            let series_state =
                SeriesStageState { i_line: x[I_LINE + ph], v_dclink: x[V_DCLINK + ph] };
            let d = series_stage_deriv(&series_state, v1, v2, vs, hb_power_in, &self.setup.series);
            dx[I_LINE + ph] = d.i_line;
            // The H-bridge port is galvanic (v_dm = v_dclink), so its
            // contribution is charge balance i_dm / C — exact even at zero
            // link voltage, where the power-over-voltage form stalls. The
            // series module's drain stays in power form, bounded by its own
            // modulation clamp.
            let c = self.setup.series.c_dclink;
            let drain = vs * x[I_LINE + ph] / (c * x[V_DCLINK + ph].max(DCLINK_EPS));
            dx[V_DCLINK + ph] = if self.modules_on {
                x[I_DM + ph] / c - drain
            } else {
                0.0
            };
        }

        let afe_state = AfeState {
            i_conv: [x[I_CONV], x[I_CONV + 1], x[I_CONV + 2]],
            v_cap: [x[V_CAP], x[V_CAP + 1], x[V_CAP + 2]],
            v_bus: x[V_BUS],
        };
        let v_grid = [grid.v1_inst(t, 0), grid.v1_inst(t, 1), grid.v1_inst(t, 2)];
        let d = afe_deriv(&afe_state, v_grid, cmd.u_afe, hbridge_power, &self.setup.afe);
        for ph in 0..3 {
            dx[I_CONV + ph] = d.d_i_conv[ph];
            dx[V_CAP + ph] = d.d_v_cap[ph];
        }
        dx[V_BUS] = d.d_v_bus;
        dx
    }
}

/// Run one scenario. Returns the recorded time series and the per-segment
/// summary; a diverging run returns everything recorded up to the failure
/// with the divergence marked in the summary.
pub fn run(setup: &RunSetup) -> Result<(TimeSeries, SummaryReport), SimError> {
    let substeps = setup.sim.substeps()?;
    if setup.schedule.windows(2).any(|w| w[0].time > w[1].time) {
        return Err(SimError::UnorderedEvents);
    }
    let dt = setup.sim.dt_plant;
    let t_s = 1.0 / setup.sim.f_s;
    let n_steps = (setup.sim.t_end / dt).round() as usize;
    let grid = setup.grid;

    // Initial state: bypass steady state for the lines, precharged bus,
    // capacitors riding the grid.
    let mut x = [0.0; N_STATE];
    let z_total = LineImpedance::total(
        setup.series.r_total(),
        grid.omega * setup.series.l_total(),
    );
    let i0 = crate::phasor::line_current(
        grid.v1_phasor(),
        grid.v2_phasor(),
        Phasor::new(0.0, 0.0),
        &z_total,
    )
    .map_err(|_| SimError::Divergence { t: 0.0 })?;
    for ph in 0..3 {
        x[I_LINE + ph] = SQRT_2
            * i0.magnitude()
            * (i0.angle() + GridModel::PHASE_SHIFT[ph]).cos();
        x[V_CAP + ph] = grid.v1_inst(0.0, ph);
    }
    x[V_BUS] = setup.refs.v_bus_ref;

    // Controllers, pre-locked to their references.
    let advance = setup.sim.command_latency();
    let mut afe = AfeController::new(
        SrfPll::with_default_bandwidth(grid.omega).preset(grid.v1_angle),
        setup.gains.afe_bus.clone(),
        setup.gains.afe_current.clone(),
        setup.afe.l_f,
        setup.refs.v_bus_ref,
        advance,
    );
    afe.q_ref = setup.refs.q_ref_afe;
    let sync_angle = grid.sync_angle();
    let mut modules: Vec<PhaseModule> = (0..3)
        .map(|ph| {
            let mut series = SeriesController::new(
                setup.gains.series.clone(),
                setup.series.l_total(),
                advance,
            );
            series.i_ref = setup.refs.i_series_ref;
            series.feedforward = setup.refs.series_feedforward;
            PhaseModule {
                sync: SinglePhaseSync::new(grid.omega)
                    .preset(sync_angle + GridModel::PHASE_SHIFT[ph]),
                series,
                hb: HBridgeController::new(
                    setup.gains.cm.clone(),
                    setup.gains.dm.clone(),
                    setup.gains.dclink_voltage.clone(),
                    setup.hbridge.l_cm_eff(),
                    setup.refs.v_dclink_ref,
                    advance,
                ),
            }
        })
        .collect();

    let mut modules_on = false;
    // Seed the pipeline as if the shunt converter had been running in steady
    // state before t = 0: each slot holds the feedforward it would have
    // computed for its application window. A zero seed would slam the full
    // capacitor voltage across the filter inductor for the first ticks.
    let mut pipeline: VecDeque<Commands> = VecDeque::new();
    for k in 0..setup.sim.delay_samples {
        let t_mid = (k as f64 + 0.5) * t_s;
        let mut cmd = Commands::default();
        for ph in 0..3 {
            cmd.u_afe[ph] = grid.v1_inst(t_mid, ph);
        }
        pipeline.push_back(cmd);
    }
    let mut active_cmd = Commands::default();
    let mut pending_events: VecDeque<&Event> = setup.schedule.iter().collect();

    let mut ts = TimeSeries::new(channel_names());
    let mut events_logged: Vec<(f64, String)> = Vec::new();
    let mut undervoltage_flagged = [false; 3];
    let mut link_charged = [false; 3];
    let mut diverged_at = None;

    let record = |ts: &mut TimeSeries, t: f64, x: &[f64; N_STATE], plant: &Plant,
                  cmd: &Commands| {
        let mut row = [0.0; 30];
        row[0] = t;
        for ph in 0..3 {
            row[1 + ph] = x[I_LINE + ph];
            row[4 + ph] = x[V_DCLINK + ph];
            row[7 + ph] = x[I_CM + ph];
            row[10 + ph] = x[I_DM + ph];
            row[13 + ph] = x[I_CONV + ph];
            row[16 + ph] = x[V_CAP + ph];
        }
        row[19] = x[V_BUS];
        // Bus current drawn by the three interconnecting H-bridges.
        let mut hb_power = 0.0;
        let mut p_inj = 0.0;
        let mut q_inj = 0.0;
        for ph in 0..3 {
            if plant.modules_on {
                hb_power += cmd.u_cm[ph] * x[I_CM + ph] + cmd.u_dm[ph] * x[I_DM + ph];
            }
            p_inj += plant.setup.grid.v2_inst(t, ph) * x[I_LINE + ph];
            q_inj += plant.setup.grid.v2_quad(t, ph) * x[I_LINE + ph];
        }
        row[20] = hb_power / x[V_BUS].max(1.0);
        let theta2 = plant.setup.grid.omega * t + plant.setup.grid.v2_angle;
        let i_dq = abc_to_dq(x[I_LINE], x[I_LINE + 1], x[I_LINE + 2], theta2);
        row[21] = i_dq.d;
        row[22] = i_dq.q;
        row[23] = p_inj;
        row[24] = q_inj;
        row[25] = plant.applied_series_voltage(x, cmd, 0);
        let mut p_afe = 0.0;
        for ph in 0..3 {
            let limit = x[V_BUS].max(0.0) / 2.0;
            p_afe += cmd.u_afe[ph].clamp(-limit, limit) * x[I_CONV + ph];
        }
        row[26] = p_afe;
        row[27] = hb_power;
        let leg_limit = x[V_BUS].max(0.0) / 2.0;
        let u_cm_cl = cmd.u_cm[0].clamp(-leg_limit, leg_limit);
        let head = 2.0 * (leg_limit - u_cm_cl.abs()).max(0.0);
        row[28] = u_cm_cl;
        row[29] = cmd.u_dm[0].clamp(-head, head);
        ts.push_row(&row);
    };

    'outer: for step in 0..n_steps {
        let t = step as f64 * dt;

        // Controller tick at every substeps-th plant step.
        if step % substeps == 0 {
            // Events quantized to controller ticks.
            while let Some(ev) = pending_events.front() {
                if ev.time <= t + 1e-12 {
                    match &ev.action {
                        EventAction::EnableModules => modules_on = true,
                        EventAction::SetCurrentReference(r) => {
                            for m in modules.iter_mut() {
                                m.series.i_ref = *r;
                            }
                        }
                        EventAction::ReversePower => {
                            for m in modules.iter_mut() {
                                m.series.i_ref = DqVector::new(
                                    -m.series.i_ref.d,
                                    -m.series.i_ref.q,
                                );
                            }
                        }
                        EventAction::Bypass(engaged) => modules_on = !engaged,
                        EventAction::Fault => {
                            modules_on = false;
                            for ph in 0..3 {
                                x[V_DCLINK + ph] = 0.0;
                                x[I_CM + ph] = 0.0;
                                x[I_DM + ph] = 0.0;
                            }
                            events_logged.push((t, "fault: dc links discharged, modules bypassed".into()));
                        }
                    }
                    pending_events.pop_front();
                } else {
                    break;
                }
            }

            // Measure and execute the controllers.
            let plant = Plant { setup, modules_on };
            let mut new_cmd = Commands::default();
            let afe_meas = AfeMeasurements {
                v_cap: [x[V_CAP], x[V_CAP + 1], x[V_CAP + 2]],
                i_conv: [x[I_CONV], x[I_CONV + 1], x[I_CONV + 2]],
                v_bus: x[V_BUS],
            };
            let (u_afe, _) = afe.step(&afe_meas, t_s);
            new_cmd.u_afe = u_afe;

            for (ph, module) in modules.iter_mut().enumerate() {
                let v_sync = (grid.v1_inst(t, ph) + grid.v2_inst(t, ph)) / 2.0;
                let sync = module.sync.step(v_sync, t_s);
                let hb_meas = HBridgeMeasurements {
                    i_cm: x[I_CM + ph],
                    i_dm: x[I_DM + ph],
                    v_cm: plant.v_cm_terminal(t, &x, &active_cmd, ph),
                    v_dclink: x[V_DCLINK + ph],
                    v_bus: x[V_BUS],
                    p_series: plant.applied_series_voltage(&x, &active_cmd, ph)
                        * x[I_LINE + ph],
                };
                if modules_on {
                    let legs: HBridgeLegCommands = module.hb.step(&hb_meas, &sync, t_s);
                    new_cmd.u_cm[ph] = legs.u_cm;
                    new_cmd.u_dm[ph] = legs.u_dm;
                    new_cmd.v_series[ph] =
                        module.series.step(x[I_LINE + ph], x[V_DCLINK + ph], &sync, t_s);
                    if x[V_DCLINK + ph] > 0.5 * setup.refs.v_dclink_ref {
                        link_charged[ph] = true;
                    }
                    // Flag a collapse during operation, not the initial
                    // charge-up.
                    if link_charged[ph]
                        && x[V_DCLINK + ph] <= DCLINK_EPS
                        && module.series.saturated
                        && !undervoltage_flagged[ph]
                    {
                        undervoltage_flagged[ph] = true;
                        events_logged.push((
                            t,
                            format!("under-voltage: phase {ph} dc link at zero during active injection"),
                        ));
                    }
                } else {
                    module.hb.track(&hb_meas, &sync, t_s);
                    module.series.track(x[I_LINE + ph], &sync, t_s);
                }
            }

            pipeline.push_back(new_cmd);
            if let Some(cmd) = pipeline.pop_front() {
                active_cmd = cmd;
            }
        }

        let plant = Plant { setup, modules_on };
        if step % setup.sim.record_decimation == 0 {
            record(&mut ts, t, &x, &plant, &active_cmd);
        }

        x = rk4_step(&x, t, dt, |tt, xx| plant.deriv(tt, xx, &active_cmd));
        for ph in 0..3 {
            if x[V_DCLINK + ph] < 0.0 {
                x[V_DCLINK + ph] = 0.0;
            }
        }

        if x.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(t);
            events_logged.push((t, "divergence: non-finite state".into()));
            break 'outer;
        }
    }

    let summary = summarize(setup, &ts, diverged_at, events_logged);
    Ok((ts, summary))
}

fn summarize(
    setup: &RunSetup,
    ts: &TimeSeries,
    diverged_at: Option<f64>,
    events_logged: Vec<(f64, String)>,
) -> SummaryReport {
    let t_last = diverged_at.unwrap_or(setup.sim.t_end);
    let mut bounds: Vec<f64> = vec![0.0];
    bounds.extend(
        setup
            .schedule
            .iter()
            .map(|e| e.time)
            .filter(|&t| t > 0.0 && t < t_last),
    );
    bounds.push(t_last);
    bounds.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let time = ts.column("time").unwrap_or(&[]);
    let window = 2.0 * 2.0 * PI / setup.grid.omega; // two grid cycles
    let mut segments = Vec::new();
    for w in bounds.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= 0.0 {
            continue;
        }
        let w_start = (t1 - window).max(t0);
        let idx: Vec<usize> = (0..time.len())
            .filter(|&i| time[i] >= w_start && time[i] < t1)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mean = |name: &str| -> f64 {
            let col = ts.column(name).unwrap();
            idx.iter().map(|&i| col[i]).sum::<f64>() / idx.len() as f64
        };
        let rms3 = |names: [&str; 3]| -> f64 {
            let cols = names.map(|n| ts.column(n).unwrap());
            let sum: f64 = idx
                .iter()
                .map(|&i| cols.iter().map(|c| c[i] * c[i]).sum::<f64>())
                .sum();
            (sum / (3 * idx.len()) as f64).sqrt()
        };
        segments.push(SegmentSummary {
            t_start: t0,
            t_end: t1,
            i_rms: rms3(["i_line_a", "i_line_b", "i_line_c"]),
            p: mean("p_inj"),
            q: mean("q_inj"),
            v_bus_mean: mean("v_bus"),
            v_dclink_mean: (mean("v_dclink_a") + mean("v_dclink_b") + mean("v_dclink_c")) / 3.0,
            i_cm_rms: rms3(["i_cm_a", "i_cm_b", "i_cm_c"]),
        });
    }
    SummaryReport { segments, diverged_at, events_logged }
}

/// Which closed loop a probe or small-signal measurement exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeLoop {
    Cm,
    Dm,
    Voltage,
    AfeCurrent,
    SeriesCurrent,
}

/// Scalar closed-loop testbench shared by the step probe and the in-sim
/// frequency sweep: first-order plant, discrete PI, command pipeline, hold.
struct ScalarLoop {
    plant_r: f64,
    plant_l: f64,
    pi: PiController,
    pipeline: VecDeque<f64>,
    x: f64,
}

impl ScalarLoop {
    fn new(plant_r: f64, plant_l: f64, gains: PiGains, delay_samples: usize) -> Self {
        Self {
            plant_r,
            plant_l,
            pi: PiController::new(gains),
            pipeline: VecDeque::from(vec![0.0; delay_samples]),
            x: 0.0,
        }
    }

    /// Advance one controller period; plant integrated in `substeps` RK4
    /// slices under the held command. Returns the state at the period end.
    fn tick(&mut self, reference: f64, t_s: f64, substeps: usize) -> f64 {
        let u_new = self.pi.step(reference - self.x, t_s);
        self.pipeline.push_back(u_new);
        let u = self.pipeline.pop_front().unwrap();
        let dt = t_s / substeps as f64;
        for _ in 0..substeps {
            let xs = [self.x];
            let next = rk4_step(&xs, 0.0, dt, |_, s| {
                [(u - self.plant_r * s[0]) / self.plant_l]
            });
            self.x = next[0];
        }
        self.x
    }
}

/// Plant (R, L) pair of one probe loop.
fn probe_plant(which: ProbeLoop, hw: &crate::tuning::HardwareParams, series_rl: (f64, f64)) -> (f64, f64) {
    match which {
        ProbeLoop::Cm => (hw.r / 2.0, hw.l_cm_eff()),
        ProbeLoop::Dm => (2.0 * hw.r, 2.0 * hw.l_dm),
        ProbeLoop::AfeCurrent => (hw.r_f, hw.l_f),
        ProbeLoop::SeriesCurrent => series_rl,
        ProbeLoop::Voltage => unreachable!("voltage loop uses the cascade bench"),
    }
}

/// Step-response metrics of one closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 10-90% rise time, s.
    pub rise_time: f64,
    /// Percent overshoot relative to the reference.
    pub overshoot_pct: f64,
    /// 2% settling time, s.
    pub settling_time: f64,
}

/// Closed-loop testbench configuration for probes and sweeps.
#[derive(Debug, Clone)]
pub struct ProbeSetup {
    pub hw: crate::tuning::HardwareParams,
    /// (R, L) of the series current path, for [`ProbeLoop::SeriesCurrent`].
    pub series_rl: (f64, f64),
    pub gains: ControlGains,
    pub f_s: f64,
    pub delay_samples: usize,
    /// Plant integration slices per controller period.
    pub substeps: usize,
}

impl ProbeSetup {
    fn loop_gains(&self, which: ProbeLoop) -> PiGains {
        match which {
            ProbeLoop::Cm => self.gains.cm.clone(),
            ProbeLoop::Dm => self.gains.dm.clone(),
            ProbeLoop::Voltage => self.gains.dclink_voltage.clone(),
            ProbeLoop::AfeCurrent => self.gains.afe_current.clone(),
            ProbeLoop::SeriesCurrent => self.gains.series.clone(),
        }
    }

    fn crossover_estimate(&self, which: ProbeLoop) -> f64 {
        let g = self.loop_gains(which);
        match which {
            ProbeLoop::Cm => g.kp / self.hw.l_cm_eff(),
            ProbeLoop::Dm => g.kp / (2.0 * self.hw.l_dm),
            ProbeLoop::Voltage => g.kp / self.hw.c,
            ProbeLoop::AfeCurrent => g.kp / self.hw.l_f,
            ProbeLoop::SeriesCurrent => g.kp / self.series_rl.1,
        }
    }
}

/// Closed-loop reference step on the selected loop; standard 10-90% rise,
/// percent overshoot and 2% settling metrics.
pub fn step_response_probe(
    setup: &ProbeSetup,
    which: ProbeLoop,
    magnitude: f64,
) -> Result<StepMetrics, SimError> {
    if magnitude == 0.0 {
        return Ok(StepMetrics { rise_time: 0.0, overshoot_pct: 0.0, settling_time: 0.0 });
    }
    let t_s = 1.0 / setup.f_s;
    let omega_c = setup.crossover_estimate(which);
    let t_max = 50.0 / omega_c;
    let n_ticks = (t_max / t_s).ceil() as usize;

    let response: Vec<f64> = match which {
        ProbeLoop::Voltage => {
            // Cascade bench: inner dm current loop feeding the dc-link
            // capacitor, outer voltage PI commanding the current reference.
            let mut inner = ScalarLoop::new(
                2.0 * setup.hw.r,
                2.0 * setup.hw.l_dm,
                setup.gains.dm.clone(),
                setup.delay_samples,
            );
            let mut outer = PiController::new(setup.gains.dclink_voltage.clone());
            let mut v = 0.0f64;
            let mut out = Vec::with_capacity(n_ticks);
            for _ in 0..n_ticks {
                let i_ref = outer.step(magnitude - v, t_s);
                let i = inner.tick(i_ref, t_s, setup.substeps);
                v += i / setup.hw.c * t_s;
                out.push(v);
            }
            out
        }
        _ => {
            let (r, l) = probe_plant(which, &setup.hw, setup.series_rl);
            let mut bench = ScalarLoop::new(r, l, setup.loop_gains(which), setup.delay_samples);
            (0..n_ticks).map(|_| bench.tick(magnitude, t_s, setup.substeps)).collect()
        }
    };

    step_metrics(&response, magnitude, t_s, t_max)
}

fn step_metrics(
    response: &[f64],
    magnitude: f64,
    t_s: f64,
    t_max: f64,
) -> Result<StepMetrics, SimError> {
    let target = magnitude;
    let band = 0.02 * target.abs();
    let mut settled_from = None;
    for (i, &y) in response.iter().enumerate() {
        if (y - target).abs() > band {
            settled_from = None;
        } else if settled_from.is_none() {
            settled_from = Some(i);
        }
    }
    let settled_from = settled_from.ok_or(SimError::NonSettling(t_max))?;

    let t10 = response
        .iter()
        .position(|&y| (y / target) >= 0.1)
        .ok_or(SimError::NonSettling(t_max))?;
    let t90 = response
        .iter()
        .position(|&y| (y / target) >= 0.9)
        .ok_or(SimError::NonSettling(t_max))?;
    let peak = response.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let overshoot = ((peak - target) / target * 100.0).max(0.0);
    Ok(StepMetrics {
        rise_time: (t90.saturating_sub(t10)) as f64 * t_s,
        overshoot_pct: overshoot,
        settling_time: settled_from as f64 * t_s,
    })
}

/// Loop gain of the discrete closed loop measured in simulation at one
/// frequency: sinusoidal reference, steady-state correlation for the
/// closed-loop response T, then L = T / (1 - T).
pub fn measured_loop_gain(
    setup: &ProbeSetup,
    which: ProbeLoop,
    omega: f64,
) -> num_complex::Complex64 {
    use num_complex::Complex64;
    let t_s = 1.0 / setup.f_s;
    let (r, l) = probe_plant(which, &setup.hw, setup.series_rl);
    let mut bench = ScalarLoop::new(r, l, setup.loop_gains(which), setup.delay_samples);
    let period = 2.0 * PI / omega;
    // Settle, then correlate over an integer number of periods.
    let settle_ticks = (20.0 * period / t_s).ceil() as usize;
    let n_periods = 50.0_f64;
    let measure_ticks = (n_periods * period / t_s).round() as usize;
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..(settle_ticks + measure_ticks) {
        let t = k as f64 * t_s;
        let reference = (omega * t).sin();
        let y = bench.tick(reference, t_s, setup.substeps);
        if k >= settle_ticks {
            // Demodulate against the reference phase at the sample instant
            // the state corresponds to (end of the period).
            let t_end = t + t_s;
            acc += y * Complex64::from_polar(1.0, -(omega * t_end));
        }
    }
    let t_cl = acc * 2.0 / measure_ticks as f64 * Complex64::new(0.0, 1.0);
    t_cl / (Complex64::new(1.0, 0.0) - t_cl)
}

/// Phase margin of the selected loop measured from the simulated closed
/// loop: bisect for the unity-gain frequency of the reconstructed loop gain
/// and read its phase there.
pub fn simulated_phase_margin(
    setup: &ProbeSetup,
    which: ProbeLoop,
    omega_lo: f64,
    omega_hi: f64,
) -> Result<f64, SimError> {
    let mag = |w: f64| measured_loop_gain(setup, which, w).norm();
    let (mut lo, mut hi) = (omega_lo, omega_hi);
    if (mag(lo) - 1.0) * (mag(hi) - 1.0) > 0.0 {
        return Err(SimError::NonSettling(0.0));
    }
    for _ in 0..30 {
        let mid = (lo * hi).sqrt();
        if (mag(mid) - 1.0) * (mag(lo) - 1.0) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let wc = (lo * hi).sqrt();
    let g = measured_loop_gain(setup, which, wc);
    Ok(PI + g.arg())
}
