//! Design toolkit and time-domain simulator for a transformerless
//! direct-injection power-flow controller linking two low-voltage feeders.
//!
//! The device under study couples a shunt converter (an active front end
//! with a split dc bus) to per-phase floating series-injection modules
//! through non-isolated interconnecting H-bridges. This crate covers the
//! whole desk-side workflow for it:
//!
//! - [`phasor`]: steady-state power-flow math, the feasible operating
//!   envelope and the bypass decision.
//! - [`frames`]: Park transforms, SOGI orthogonal-signal generation and
//!   SRF-PLL synchronization.
//! - [`tuning`]: PI synthesis from phase-margin specs for every loop, and
//!   margin verification against the delay-aware open-loop responses.
//! - [`filter`]: ripple-based sizing of the H-bridge chokes and X-capacitor.
//! - [`plant`]: continuous-time averaged models of the three power stages.
//! - [`control`]: the discrete controllers executed at the sampling rate.
//! - [`sim`]: deterministic fixed-step RK4 scenario engine with sampled
//!   controllers, command pipeline delay and an event schedule.
//! - [`scenario`]: configuration ingestion, bundled scenario presets,
//!   power-target resolution and CSV/JSON result emission.
//!
//! Each major capability has a runnable example under `examples/`; the thin
//! `dipfc` binary exposes the same functionality as `run`, `tune`, `filter`
//! and `envelope` subcommands.
//!
//! ```
//! use dipfc::phasor::{operating_area, Phasor};
//!
//! let v1 = Phasor::new(230.0, 0.0);
//! let v2 = Phasor::new(225.0, 0.01);
//! let (inside, envelope) = operating_area(v1, v2, 50.0);
//! assert!(inside);
//! assert!(envelope.max_voltage_diff > 35.0);
//! ```

pub mod control;
pub mod filter;
pub mod frames;
pub mod phasor;
pub mod plant;
pub mod sim;
pub mod tuning;
