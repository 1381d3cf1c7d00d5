// Temporary scratch driver for closed-loop behavior; replaced by the real
// examples once the scenario layer lands.

use dipfc::frames::DqVector;
use dipfc::plant::{AfeParams, HBridgeParams, SeriesStageParams};
use dipfc::sim::{
    run, ControlGains, ControlRefs, Event, EventAction, GridModel, RunSetup, SimConfig,
};
use dipfc::tuning::{tune_afe, tune_cm, tune_dm, tune_series, HardwareParams, LoopSpec, PiGains};
use std::f64::consts::PI;

fn main() {
    let w = 2.0 * PI * 50.0;
    let hw = HardwareParams::table1();
    let spec = LoopSpec::new(45f64.to_radians(), 1e-4);
    let series = SeriesStageParams {
        r_line1: 0.164,
        l_line1: 0.08 / w,
        r_line2: 0.164,
        l_line2: 0.08 / w,
        l_module: 50e-6,
        c_dclink: 2.2e-3,
    };
    let v1 = 400.0 / 3f64.sqrt();
    // Published-style gain set for the bundled table1 scenarios.
    let gains = ControlGains {
        afe_current: tune_afe(&hw, &LoopSpec::new(67f64.to_radians(), 1e-4)).unwrap(),
        afe_bus: PiGains::new(2.5, 0.03).with_limit(60.0),
        cm: PiGains::new(10.0, 10.0 / 261.0),
        dm: PiGains::new(1.16, 1.16 / 1160.0),
        dclink_voltage: PiGains::new(1.276, 10.0 / 580.0).with_limit(250.0),
        series: tune_series(series.r_total(), series.l_total(), &spec).unwrap(),
    };
    let setup = RunSetup {
        grid: GridModel { omega: w, v1_mag: v1, v1_angle: 0.0, v2_mag: v1, v2_angle: 0.0 },
        series,
        afe: AfeParams { l_f: hw.l_f, r_f: hw.r_f, c_f: 20e-6, r_grid: 0.1, c_bus: 4.7e-3 },
        hbridge: HBridgeParams { r: hw.r, l_cm: hw.l_cm, l_dm: hw.l_dm },
        gains,
        refs: ControlRefs {
            v_bus_ref: 800.0,
            v_dclink_ref: 50.0,
            q_ref_afe: 0.0,
            i_series_ref: DqVector::default(),
            series_feedforward: DqVector::default(),
        },
        schedule: vec![
            Event { time: 0.3, action: EventAction::EnableModules },
            Event {
                time: 0.3,
                action: EventAction::SetCurrentReference(DqVector::new(
                    2f64.sqrt() * 95.0,
                    0.0,
                )),
            },
        ],
        sim: SimConfig { t_end: 0.6, ..SimConfig::default() },
    };
    let t0 = std::time::Instant::now();
    let (ts, summary) = run(&setup).unwrap();
    println!("wall: {:?} rows {}", t0.elapsed(), ts.rows());
    for s in &summary.segments {
        println!(
            "[{:.3},{:.3}) i_rms={:8.3} P={:10.1} Q={:10.1} v_bus={:8.2} v_dclink={:7.3} i_cm_rms={:.4}",
            s.t_start, s.t_end, s.i_rms, s.p, s.q, s.v_bus_mean, s.v_dclink_mean, s.i_cm_rms
        );
    }
    for (t, m) in &summary.events_logged {
        println!("event @{t:.4}: {m}");
    }
    // peek at saturation behavior: series voltage amplitude vs dclink
    let vs = ts.column("v_series_a").unwrap();
    let vdc = ts.column("v_dclink_a").unwrap();
    let n = vs.len();
    let vs_max = vs[n - 4000..].iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let vdc_min = vdc[n - 4000..].iter().cloned().fold(f64::MAX, f64::min);
    let vdc_max = vdc[n - 4000..].iter().cloned().fold(f64::MIN, f64::max);
    println!("|v_series| max {vs_max:.2}, v_dclink range [{vdc_min:.2},{vdc_max:.2}]");

    // harmonic decomposition of key channels over the last two cycles
    let time = ts.column("time").unwrap();
    let window = &time[n - 4000..];
    let harm = |name: &str| {
        let col = &ts.column(name).unwrap()[n - 4000..];
        let mut out = vec![];
        let dc: f64 = col.iter().sum::<f64>() / col.len() as f64;
        out.push(("dc".to_string(), dc));
        for h in [1, 2, 3] {
            let wh = 2.0 * PI * 50.0 * h as f64;
            let (mut cr, mut ci) = (0.0, 0.0);
            for (t, y) in window.iter().zip(col) {
                cr += y * (wh * t).cos();
                ci += y * (wh * t).sin();
            }
            let amp = 2.0 * (cr * cr + ci * ci).sqrt() / col.len() as f64;
            out.push((format!("h{h}"), amp));
        }
        let s: Vec<String> = out.iter().map(|(k, v)| format!("{k}={v:8.3}")).collect();
        println!("{name:12} {}", s.join(" "));
    };
    for ch in ["i_cm_a", "i_dm_a", "v_dclink_a", "i_line_a", "v_series_a", "v_bus",
               "dbg_p_afe", "dbg_p_hb", "dbg_u_cm_a", "dbg_u_dm_a"] {
        harm(ch);
    }
    let mean_prod = |a: &str, b: &str| {
        let ca = &ts.column(a).unwrap()[n - 4000..];
        let cb = &ts.column(b).unwrap()[n - 4000..];
        ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>() / 4000.0
    };
    // dc of i_cm and u_cm over consecutive 20 ms windows
    let icm = ts.column("i_cm_a").unwrap();
    let ucm = ts.column("dbg_u_cm_a").unwrap();
    for k in 0..15 {
        let a = 30000 + k * 2000;
        let b = a + 2000;
        if b > n { break; }
        let m_i: f64 = icm[a..b].iter().sum::<f64>() / 2000.0;
        let m_u: f64 = ucm[a..b].iter().sum::<f64>() / 2000.0;
        println!("t=[{:.2},{:.2}] i_cm dc={:8.3} u_cm dc={:7.3}", time[a], time[b-1], m_i, m_u);
    }
    println!("mean u_cm*i_cm = {:.1} W", mean_prod("dbg_u_cm_a", "i_cm_a"));
    println!("mean u_dm*i_dm = {:.1} W", mean_prod("dbg_u_dm_a", "i_dm_a"));
    println!("mean v_link*i_dm = {:.1} W", mean_prod("v_dclink_a", "i_dm_a"));

    // AFE dq quantities reconstructed from the recorded phase channels.
    let ia = ts.column("i_conv_a").unwrap();
    let ib = ts.column("i_conv_b").unwrap();
    let ic = ts.column("i_conv_c").unwrap();
    let vb = ts.column("v_bus").unwrap();
    for &probe_t in &[0.25, 0.35, 0.45, 0.55, 0.5999] {
        let i = ((probe_t / 0.6) * (n as f64 - 1.0)) as usize;
        let th = w * time[i];
        let idq = dipfc::frames::abc_to_dq(ia[i], ib[i], ic[i], th);
        println!(
            "t={:.3} i_conv_dq=({:7.2},{:7.2}) v_bus={:7.2}",
            time[i], idq.d, idq.q, vb[i]
        );
    }
}
