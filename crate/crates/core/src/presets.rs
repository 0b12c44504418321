//! Built-in scenarios.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::control::{DroopGains, NOMINAL_OMEGA};
use crate::error::ConfigError;
use crate::plant::{LineParams, LineSpec, LoadSpec, NetworkTopology, NodeRef};
use crate::powerflow::{single_source_load_resistance, SourceModel};
use crate::sim::{ClockModel, ControlMode, ConverterSpec, Event, EventAction, ScenarioSpec};

pub const PRESETS: [&str; 6] = ["blackstart", "loadstep", "sync", "sharing", "sharing_r2", "drift"];

/// Scenario I load.
pub const BLACKSTART_LOAD: f64 = 58.77;
/// Stepped Scenario I load, about 3.8 kW.
pub const STEPPED_LOAD: f64 = 41.76;
pub const LOAD_STEP_TIME: f64 = 1.0;
/// Time at which converter II joins in the two-converter scenarios.
pub const INTERCONNECTION_TIME: f64 = 1.0;
pub const SHARING_TIME: f64 = 2.0;
pub const DRIFT_EPSILON: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PresetOptions {
    /// Overrides the resistance of every line.
    pub line_resistance: Option<f64>,
    /// Overrides the control mode of every converter.
    pub mode: Option<ControlMode>,
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Fundamental bridge amplitude of a direct-mode converter at its DC reference.
/// The zero-order hold attenuates the fundamental by `sinc(ω Ts / 2)`.
pub fn direct_bridge_amplitude(c: &ConverterSpec, ts: f64) -> f64 {
    0.5 * c.modulation_amplitude * c.boost_control.v_dc_star * sinc(0.5 * c.droop.omega_star * ts)
}

/// Common-node load that draws `p_star` from converter `c` alone through `line`.
pub fn calibrated_common_load(c: &ConverterSpec, line: &LineParams, ts: f64) -> Result<f64, ConfigError> {
    let omega = c.droop.omega_star;
    let src = SourceModel::behind_filter(&c.filter, omega);
    single_source_load_resistance(&src, direct_bridge_amplitude(c, ts), line, omega, c.droop.p_star)
        .map_err(|e| ConfigError::invalid("topology.loads[0].resistance", e.to_string()))
}

fn single(name: &str, duration: f64) -> ScenarioSpec {
    ScenarioSpec { name: name.into(), duration, ..ScenarioSpec::default() }
}

fn two_converter(name: &str, duration: f64, opts: &PresetOptions) -> Result<ScenarioSpec, ConfigError> {
    let mut base = single(name, duration);
    let mut line = LineParams::default();
    if let Some(r) = opts.line_resistance {
        line.r_l = r;
    }
    let first = ConverterSpec::default();
    let second = ConverterSpec {
        droop: DroopGains { p_star: 0.0, ..DroopGains::default() },
        enabled: false,
        ..ConverterSpec::default()
    };
    let r_load = calibrated_common_load(&first, &line, base.controller_ts)?;
    base.topology = NetworkTopology {
        converters: 2,
        lines: vec![LineSpec { converter: 0, params: line }, LineSpec { converter: 1, params: line }],
        loads: vec![LoadSpec { node: NodeRef::Common, resistance: r_load }],
    };
    base.converters = vec![first, second];
    base.clock = ClockModel { epsilon: vec![0.0, 0.0], master_clock_enabled: false };
    base.events = vec![
        Event { time: 0.0, action: EventAction::CloseBreaker { converter: 0 } },
        Event {
            time: INTERCONNECTION_TIME,
            action: EventAction::EnableModulation { converter: 1, sync_to_common: true },
        },
        Event { time: INTERCONNECTION_TIME, action: EventAction::CloseBreaker { converter: 1 } },
    ];
    Ok(base)
}

fn sharing(name: &str, gains: [(f64, f64); 2], opts: &PresetOptions) -> Result<ScenarioSpec, ConfigError> {
    let mut s = two_converter(name, 20.0, opts)?;
    for (k, (gamma, p_star)) in gains.into_iter().enumerate() {
        s.events.push(Event {
            time: SHARING_TIME,
            action: EventAction::SetGains {
                converter: k,
                gains: DroopGains { gamma, p_star, ..s.converters[k].droop },
            },
        });
    }
    Ok(s)
}

/// Builds a named scenario. Unknown names are a configuration error.
pub fn preset(name: &str, opts: &PresetOptions) -> Result<ScenarioSpec, ConfigError> {
    let mut s = match name {
        "blackstart" => single(name, 2.0),
        "loadstep" => {
            let mut s = single(name, 2.0);
            s.events.push(Event {
                time: LOAD_STEP_TIME,
                action: EventAction::LoadStep { node: NodeRef::Converter(0), resistance: STEPPED_LOAD },
            });
            s
        }
        "sync" => two_converter(name, 3.0, opts)?,
        "sharing" => sharing(name, [(500.0, 1440.0), (500.0, 1440.0)], opts)?,
        "sharing_r2" => sharing(name, [(1000.0, 1920.0), (500.0, 960.0)], opts)?,
        "drift" => {
            let mut s = two_converter(name, 10.0, opts)?;
            s.clock.epsilon = vec![DRIFT_EPSILON, 0.0];
            s
        }
        other => {
            return Err(ConfigError::invalid(
                "scenario",
                format!("unknown scenario {other:?}; expected one of {}", PRESETS.join(", ")),
            ))
        }
    };
    if let Some(mode) = opts.mode {
        for c in &mut s.converters {
            c.mode = mode;
        }
        if mode != ControlMode::Direct {
            s.name = format!("{}[mode={}]", s.name, serde_json::to_value(mode).unwrap_or_default().as_str().unwrap_or("?"));
        }
    }
    if let Some(r) = opts.line_resistance {
        if !s.topology.lines.is_empty() {
            for l in &mut s.topology.lines {
                l.params.r_l = r;
            }
            s.name = format!("{}[r_l={r}]", s.name);
        }
    }
    s.validate()?;
    Ok(s)
}

/// Expected spectral frequency of the drift beat, `ω* Δε / 2π`.
pub fn drift_beat_frequency(delta_epsilon: f64) -> f64 {
    NOMINAL_OMEGA * delta_epsilon / (2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            preset(name, &PresetOptions::default()).unwrap();
        }
        assert!(preset("nope", &PresetOptions::default()).is_err());
    }

    #[test]
    fn overrides_apply() {
        let s = preset("sync", &PresetOptions { line_resistance: Some(0.0), mode: Some(ControlMode::Indirect) }).unwrap();
        assert!(s.topology.lines.iter().all(|l| l.params.r_l == 0.0));
        assert!(s.converters.iter().all(|c| c.mode == ControlMode::Indirect));
    }

    #[test]
    fn drift_beat_is_half_hertz() {
        assert!((drift_beat_frequency(1e-2) - 0.5).abs() < 1e-12);
    }
}
