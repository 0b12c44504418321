//! Fixed-step hybrid execution: RK4 plant integration between controller
//! samples, zero-order-hold controller outputs, scheduled events, per-converter
//! clock drift and trace recording.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{
    detect_steady_state, nadir, pll_step, running_cost, trailing_mean, Nadir, PllGains, PllState,
    SteadyStateWindow,
};
use crate::control::{
    boost_control_step, direct_modulation, droop_step, indirect_control_step, BoostControlGains,
    BoostMeasurement, BoostPiStates, DroopGains, DroopState, IndirectGains, IndirectMeasurement,
    IndirectPiStates, PowerFilter,
};
use crate::error::ConfigError;
use crate::frames::{park, wrap_pi, wrap_unchecked, ThreePhase};
use crate::plant::{
    boost_derivatives, bridge_dc_current, dcac_derivatives, duty_to_vc, network_port_currents,
    saturate_modulation, AcFilterParams, AcState, BoostParams, BoostState, LineState, LoadSpec,
    NetworkState, NetworkTopology, NodeRef,
};

/// Nominal modulation amplitude `2 V^d / V_dc^nom` for `V^d = 230√2`, `V_dc^nom = 750`.
pub fn nominal_modulation_amplitude() -> f64 {
    2.0 * 230.0 * 2f64.sqrt() / 750.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    #[default]
    Direct,
    Indirect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverterSpec {
    pub mode: ControlMode,
    pub droop: DroopGains,
    pub boost: BoostParams,
    pub boost_control: BoostControlGains,
    pub filter: AcFilterParams,
    pub indirect: IndirectGains,
    /// Direct-mode modulation amplitude `A`, `0 < A < 1`.
    pub modulation_amplitude: f64,
    /// Moving-average window on the measured power, seconds. 0 disables it.
    pub power_filter_window: f64,
    /// Modulation running from t = 0.
    pub enabled: bool,
}

impl Default for ConverterSpec {
    fn default() -> Self {
        ConverterSpec {
            mode: ControlMode::Direct,
            droop: DroopGains::default(),
            boost: BoostParams::default(),
            boost_control: BoostControlGains::default(),
            filter: AcFilterParams::default(),
            indirect: IndirectGains::default(),
            modulation_amplitude: nominal_modulation_amplitude(),
            power_filter_window: 0.02,
            enabled: true,
        }
    }
}

impl ConverterSpec {
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        self.droop.validate(&format!("{path}.droop"))?;
        self.boost.validate(&format!("{path}.boost"))?;
        self.boost_control.validate(&format!("{path}.boost_control"), &self.boost)?;
        self.filter.validate(&format!("{path}.filter"))?;
        self.indirect.validate(&format!("{path}.indirect"))?;
        let a = self.modulation_amplitude;
        if !(a > 0.0 && a < 1.0) {
            return Err(ConfigError::constraint(format!("{path}.modulation_amplitude"), "0 < A < 1", a));
        }
        if !(self.power_filter_window.is_finite() && self.power_filter_window >= 0.0) {
            return Err(ConfigError::constraint(
                format!("{path}.power_filter_window"),
                "power_filter_window >= 0",
                self.power_filter_window,
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockModel {
    /// Per-converter drift; missing entries are 0.
    pub epsilon: Vec<f64>,
    pub master_clock_enabled: bool,
}

impl ClockModel {
    pub fn effective_epsilon(&self, k: usize) -> f64 {
        if self.master_clock_enabled {
            0.0
        } else {
            self.epsilon.get(k).copied().unwrap_or(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EventAction {
    CloseBreaker {
        converter: usize,
    },
    LoadStep {
        node: NodeRef,
        resistance: f64,
    },
    EnableModulation {
        converter: usize,
        /// Seed the nominal angle from the common-node PLL instead of the
        /// converter's own clock.
        #[serde(default)]
        sync_to_common: bool,
    },
    /// Replace the droop gains. The nominal angle and error state carry over.
    SetGains {
        converter: usize,
        gains: DroopGains,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub time: f64,
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecordSpec {
    /// Channels written to the trace; empty means all.
    pub channels: Vec<String>,
    /// Record every `decimation` plant steps.
    pub decimation: usize,
}

impl Default for RecordSpec {
    fn default() -> Self {
        RecordSpec { channels: Vec::new(), decimation: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub name: String,
    pub duration: f64,
    pub plant_dt: f64,
    pub controller_ts: f64,
    pub topology: NetworkTopology,
    pub converters: Vec<ConverterSpec>,
    pub clock: ClockModel,
    pub events: Vec<Event>,
    pub record: RecordSpec,
    pub steady_state: SteadyStateWindow,
    pub pll: PllGains,
}

impl Default for ScenarioSpec {
    /// Scenario I black start.
    fn default() -> Self {
        ScenarioSpec {
            name: "blackstart".into(),
            duration: 2.0,
            plant_dt: 1e-5,
            controller_ts: 1e-4,
            topology: NetworkTopology {
                converters: 1,
                lines: Vec::new(),
                loads: vec![LoadSpec { node: NodeRef::Converter(0), resistance: 58.77 }],
            },
            converters: vec![ConverterSpec::default()],
            clock: ClockModel::default(),
            events: vec![Event { time: 0.0, action: EventAction::CloseBreaker { converter: 0 } }],
            record: RecordSpec::default(),
            steady_state: SteadyStateWindow::default(),
            pll: PllGains::default(),
        }
    }
}

impl ScenarioSpec {
    /// Plant steps per controller sample.
    pub fn controller_ratio(&self) -> usize {
        (self.controller_ts / self.plant_dt).round() as usize
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.plant_dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(ConfigError::constraint("duration", "duration >= 0", self.duration));
        }
        if !(self.plant_dt.is_finite() && self.plant_dt > 0.0) {
            return Err(ConfigError::constraint("plant_dt", "plant_dt > 0", self.plant_dt));
        }
        if !(self.controller_ts.is_finite() && self.controller_ts >= self.plant_dt) {
            return Err(ConfigError::constraint("controller_ts", "controller_ts >= plant_dt", self.controller_ts));
        }
        let ratio = self.controller_ts / self.plant_dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(ConfigError::constraint(
                "controller_ts",
                "controller_ts an integer multiple of plant_dt",
                self.controller_ts,
            ));
        }
        self.topology.validate("topology")?;
        if self.converters.len() != self.topology.converters {
            return Err(ConfigError::invalid(
                "converters",
                format!("{} converter entries for a topology of {}", self.converters.len(), self.topology.converters),
            ));
        }
        for (k, c) in self.converters.iter().enumerate() {
            c.validate(&format!("converters[{k}]"))?;
        }
        if self.clock.epsilon.len() > self.converters.len() {
            return Err(ConfigError::invalid("clock.epsilon", "more drift entries than converters"));
        }
        for (k, e) in self.clock.epsilon.iter().enumerate() {
            if !(e.is_finite() && *e > -1.0) {
                return Err(ConfigError::constraint(format!("clock.epsilon[{k}]"), "epsilon > -1", e));
            }
        }
        let mut last = 0.0;
        for (j, ev) in self.events.iter().enumerate() {
            let path = format!("events[{j}]");
            if !(ev.time.is_finite() && ev.time >= 0.0) {
                return Err(ConfigError::constraint(format!("{path}.time"), "time >= 0", ev.time));
            }
            if ev.time < last {
                return Err(ConfigError::invalid(format!("{path}.time"), "events must be sorted by time"));
            }
            last = ev.time;
            let conv = match &ev.action {
                EventAction::CloseBreaker { converter }
                | EventAction::EnableModulation { converter, .. }
                | EventAction::SetGains { converter, .. } => Some(*converter),
                EventAction::LoadStep { node, resistance } => {
                    if !self.topology.loads.iter().any(|l| l.node == *node) {
                        return Err(ConfigError::invalid(format!("{path}.action.node"), format!("no load at {node}")));
                    }
                    if !(resistance.is_finite() && *resistance > 0.0) {
                        return Err(ConfigError::constraint(
                            format!("{path}.action.resistance"),
                            "resistance > 0",
                            resistance,
                        ));
                    }
                    None
                }
            };
            if let Some(k) = conv {
                if k >= self.converters.len() {
                    return Err(ConfigError::invalid(format!("{path}.action.converter"), format!("no converter {k}")));
                }
            }
            if let EventAction::SetGains { gains, .. } = &ev.action {
                gains.validate(&format!("{path}.action.gains"))?;
            }
            if let EventAction::EnableModulation { sync_to_common: true, .. } = &ev.action {
                if !self.topology.has_common_node() {
                    return Err(ConfigError::invalid(
                        format!("{path}.action.sync_to_common"),
                        "PLL seeding needs a common node",
                    ));
                }
            }
        }
        if self.record.decimation == 0 {
            return Err(ConfigError::constraint("record.decimation", "decimation >= 1", 0));
        }
        let names = channel_names(self.converters.len(), self.topology.has_common_node());
        for (j, c) in self.record.channels.iter().enumerate() {
            if !names.contains(c) {
                return Err(ConfigError::invalid(format!("record.channels[{j}]"), format!("unknown channel {c:?}")));
            }
        }
        self.steady_state
            .validate()
            .map_err(|e| ConfigError::invalid("steady_state", e.to_string()))?;
        Ok(())
    }
}

const CONVERTER_CHANNELS: [&str; 29] = [
    "theta", "theta_star", "delta_theta", "omega", "u", "p", "p_filt", "q", "v_amp", "v_dc", "i_boost", "duty",
    "i_boost_ref", "v_a", "v_b", "v_c", "i_a", "i_b", "i_c", "io_a", "io_b", "io_c", "u_a", "u_b", "u_c",
    "saturated", "enabled", "breaker", "v_angle",
];

/// Channel names for a network. Converter channels carry a 1-based suffix,
/// e.g. `p_1` is the active power of the first converter.
pub fn channel_names(converters: usize, common: bool) -> Vec<String> {
    let mut out = Vec::new();
    for k in 1..=converters {
        for c in CONVERTER_CHANNELS {
            out.push(format!("{c}_{k}"));
        }
    }
    if common {
        for c in ["v0_a", "v0_b", "v0_c", "theta_pll", "omega_pll", "pll_error"] {
            out.push(c.to_string());
        }
    }
    if converters >= 2 {
        out.push("theta_diff_12".to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub time: f64,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceRecorder {
    pub sample_period: f64,
    pub time: Vec<f64>,
    pub names: Vec<String>,
    pub data: Vec<Vec<f64>>,
    pub markers: Vec<Marker>,
}

impl TraceRecorder {
    pub fn new(names: Vec<String>, sample_period: f64) -> Self {
        let data = vec![Vec::new(); names.len()];
        TraceRecorder { sample_period, time: Vec::new(), names, data, markers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.data[i].as_slice())
    }

    fn push_row(&mut self, t: f64, row: &[f64]) {
        self.time.push(t);
        for (col, v) in self.data.iter_mut().zip(row) {
            col.push(*v);
        }
    }

    /// Keep only the named channels, in the given order.
    pub fn select(&self, channels: &[String]) -> TraceRecorder {
        if channels.is_empty() {
            return self.clone();
        }
        let mut out = TraceRecorder::new(channels.to_vec(), self.sample_period);
        out.time = self.time.clone();
        out.markers = self.markers.clone();
        for (j, c) in channels.iter().enumerate() {
            if let Some(x) = self.channel(c) {
                out.data[j] = x.to_vec();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Abort {
    pub time: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConverterSummary {
    pub p_s: f64,
    pub q_s: f64,
    pub delta_theta_s: f64,
    pub omega_s: f64,
    pub v_amp_s: f64,
    pub v_dc_s: f64,
    pub p_settle_time: Option<f64>,
    pub omega_settle_time: Option<f64>,
    /// `γ Δθ^s + P^s − P*` with the gains in force at the end.
    pub droop_residual: f64,
    pub gains: DroopGains,
    /// Nominal angle at the end of the run, wrapped.
    pub theta_star_end: f64,
    pub cost: f64,
    /// Largest cost integrand over the final 10% divided by its overall peak.
    pub cost_tail_ratio: f64,
    /// Frequency excursion after the last load step.
    pub nadir: Option<Nadir>,
    pub angle_alarms: u64,
    pub saturated_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryReport {
    pub scenario: String,
    pub duration: f64,
    pub samples: usize,
    pub sample_period: f64,
    pub aborted: Option<Abort>,
    pub converters: Vec<ConverterSummary>,
    /// Steady mean of `wrap(θ_1 − θ_2)`.
    pub theta_diff_s: Option<f64>,
    /// `wrap(θ*_1 − θ*_2)` at the end of the run.
    pub theta_star_diff: Option<f64>,
    pub common_v_amp_s: Option<f64>,
    pub warnings: Vec<String>,
    /// Plant state at the final time: per converter `i_b, V_dc, i_abc, v_abc`, then line currents.
    pub final_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub trace: TraceRecorder,
    pub summary: SummaryReport,
}

const CONV_STATES: usize = 8;

#[derive(Debug, Clone)]
struct Telemetry {
    theta: f64,
    delta_theta: f64,
    omega: f64,
    u: f64,
    p: f64,
    p_filt: f64,
    q: f64,
    v_amp: f64,
    v_angle: f64,
    i_b_ref: f64,
    saturated: bool,
}

#[derive(Debug, Clone)]
struct ConverterCtl {
    enabled: bool,
    gains: DroopGains,
    droop: DroopState,
    filter: PowerFilter,
    boost_pi: BoostPiStates,
    indirect_pi: IndirectPiStates,
    duty: f64,
    u_bar: ThreePhase,
    ts_local: f64,
    epsilon: f64,
    samples: u64,
    tel: Telemetry,
    angle_alarms: u64,
    saturated_samples: u64,
    insecure: bool,
}

struct Engine<'a> {
    spec: &'a ScenarioSpec,
    net: NetworkState,
    g_term: Vec<f64>,
    x: Vec<f64>,
    ctl: Vec<ConverterCtl>,
    pll: PllState,
    pll_active: bool,
    v0: ThreePhase,
    markers: Vec<Marker>,
    warnings: Vec<String>,
}

fn three(x: &[f64]) -> ThreePhase {
    ThreePhase::new(x[0], x[1], x[2])
}

fn put(x: &mut [f64], v: ThreePhase) {
    x[0] = v.a;
    x[1] = v.b;
    x[2] = v.c;
}

/// Phase angle of a balanced set `V sin(φ)`.
fn phasor_angle(v: ThreePhase) -> f64 {
    let dq = park(0.0, v);
    dq.q.atan2(dq.d)
}

impl<'a> Engine<'a> {
    fn new(spec: &'a ScenarioSpec) -> Self {
        let n = spec.converters.len();
        let mut x = vec![0.0; n * CONV_STATES + 3 * spec.topology.lines.len()];
        for (k, c) in spec.converters.iter().enumerate() {
            x[k * CONV_STATES + 1] = c.boost.v_b;
        }
        let ctl = spec
            .converters
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let epsilon = spec.clock.effective_epsilon(k);
                let ts_local = (1.0 + epsilon) * spec.controller_ts;
                ConverterCtl {
                    enabled: c.enabled,
                    gains: c.droop,
                    droop: DroopState::new(c.droop.theta_star_0),
                    filter: PowerFilter::new(c.power_filter_window, ts_local),
                    boost_pi: BoostPiStates::default(),
                    indirect_pi: IndirectPiStates::default(),
                    duty: 0.0,
                    u_bar: ThreePhase::ZERO,
                    ts_local,
                    epsilon,
                    samples: 0,
                    tel: Telemetry {
                        theta: 0.0,
                        delta_theta: 0.0,
                        omega: 0.0,
                        u: 0.0,
                        p: 0.0,
                        p_filt: 0.0,
                        q: 0.0,
                        v_amp: 0.0,
                        v_angle: 0.0,
                        i_b_ref: 0.0,
                        saturated: false,
                    },
                    angle_alarms: 0,
                    saturated_samples: 0,
                    insecure: false,
                }
            })
            .collect();
        let net = NetworkState::initial(&spec.topology);
        let mut e = Engine {
            spec,
            g_term: vec![0.0; n],
            net,
            x,
            ctl,
            pll: PllState::new(0.0, spec.pll.omega_nominal),
            pll_active: false,
            v0: ThreePhase::ZERO,
            markers: Vec::new(),
            warnings: Vec::new(),
        };
        e.refresh_conductances();
        e
    }

    fn refresh_conductances(&mut self) {
        for k in 0..self.spec.converters.len() {
            self.g_term[k] = self.net.terminal_conductance(&self.spec.topology, k);
        }
    }

    fn line_offset(&self) -> usize {
        self.spec.converters.len() * CONV_STATES
    }

    fn line_states(&self, x: &[f64]) -> Vec<LineState> {
        let off = self.line_offset();
        (0..self.spec.topology.lines.len()).map(|j| LineState { i_l: three(&x[off + 3 * j..]) }).collect()
    }

    fn capacitor_voltages(&self, x: &[f64]) -> Vec<ThreePhase> {
        (0..self.spec.converters.len()).map(|k| three(&x[k * CONV_STATES + 5..])).collect()
    }

    fn derivatives(&self, x: &[f64], dx: &mut [f64]) {
        let caps = self.capacitor_voltages(x);
        let lines = self.line_states(x);
        let port = network_port_currents(&self.spec.topology, &self.net, &caps, &lines);
        for (k, c) in self.spec.converters.iter().enumerate() {
            let b = k * CONV_STATES;
            let boost = BoostState { i_b: x[b], v_dc: x[b + 1] };
            let ac = AcState { i: three(&x[b + 2..]), v: caps[k] };
            let i_o = port.i_o[k] + caps[k] * self.g_term[k];
            let u = self.ctl[k].u_bar;
            let d_ac = dcac_derivatives(&c.filter, &ac, u, boost.v_dc, i_o).value;
            let i_load = bridge_dc_current(&saturate_modulation(u).value, &ac.i);
            let v_c = duty_to_vc(self.ctl[k].duty, boost.v_dc).value;
            let d_b = boost_derivatives(&c.boost, &boost, v_c, i_load);
            dx[b] = d_b.i_b;
            dx[b + 1] = d_b.v_dc;
            put(&mut dx[b + 2..], d_ac.i);
            put(&mut dx[b + 5..], d_ac.v);
        }
        let off = self.line_offset();
        for (j, d) in port.line_derivatives.iter().enumerate() {
            put(&mut dx[off + 3 * j..], *d);
        }
    }

    fn rk4(&mut self, h: f64, k: &mut [Vec<f64>; 4], tmp: &mut [f64]) {
        let n = self.x.len();
        let [k1, k2, k3, k4] = k;
        self.derivatives(&self.x, k1);
        for i in 0..n {
            tmp[i] = self.x[i] + 0.5 * h * k1[i];
        }
        self.derivatives(tmp, k2);
        for i in 0..n {
            tmp[i] = self.x[i] + 0.5 * h * k2[i];
        }
        self.derivatives(tmp, k3);
        for i in 0..n {
            tmp[i] = self.x[i] + h * k3[i];
        }
        self.derivatives(tmp, k4);
        for i in 0..n {
            self.x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    fn apply(&mut self, t: f64, ev: &Event) {
        let detail = match &ev.action {
            EventAction::CloseBreaker { converter } => {
                self.net.breaker_closed[*converter] = true;
                self.refresh_conductances();
                format!("close breaker of converter {}", converter + 1)
            }
            EventAction::LoadStep { node, resistance } => {
                for (j, l) in self.spec.topology.loads.iter().enumerate() {
                    if l.node == *node {
                        self.net.load_resistance[j] = *resistance;
                    }
                }
                self.refresh_conductances();
                format!("load at {node} set to {resistance} ohm")
            }
            EventAction::EnableModulation { converter, sync_to_common } => {
                let k = *converter;
                let c = &mut self.ctl[k];
                let theta_star = if *sync_to_common {
                    if !self.pll.locked() || !self.pll_active {
                        self.warnings.push(format!("t={t}: PLL not locked when seeding converter {}", k + 1));
                    }
                    // the held modulation lags its sample angle by half a period
                    self.pll.theta_hat + 0.5 * c.gains.omega_star * c.ts_local
                } else {
                    c.gains.theta_star_0 + c.gains.omega_star * c.ts_local * c.samples as f64
                };
                c.droop = DroopState::new(theta_star);
                c.filter.reset();
                c.indirect_pi = IndirectPiStates::default();
                c.enabled = true;
                format!("enable modulation of converter {} at theta* = {}", k + 1, c.droop.theta_star)
            }
            EventAction::SetGains { converter, gains } => {
                self.ctl[*converter].gains = *gains;
                format!("new droop gains for converter {}", converter + 1)
            }
        };
        self.markers.push(Marker { time: t, kind: "event".into(), detail });
    }

    fn control_sample(&mut self, t: f64) {
        let caps = self.capacitor_voltages(&self.x);
        let lines = self.line_states(&self.x);
        let port = network_port_currents(&self.spec.topology, &self.net, &caps, &lines);
        self.v0 = port.common_voltage.unwrap_or(ThreePhase::ZERO);

        if self.spec.topology.has_common_node() && self.net.breaker_closed.iter().any(|b| *b) {
            self.pll_active = true;
        }
        if self.pll_active {
            self.pll = pll_step(&self.pll, self.v0, self.spec.controller_ts, &self.spec.pll);
        }
        let v0_angle = phasor_angle(self.v0);

        for (k, spec) in self.spec.converters.iter().enumerate() {
            let b = k * CONV_STATES;
            let boost = BoostState { i_b: self.x[b], v_dc: self.x[b + 1] };
            let v = caps[k];
            let i = three(&self.x[b + 2..]);
            let i_o = port.i_o[k] + v * self.g_term[k];
            let c = &mut self.ctl[k];
            let ts = c.ts_local;

            let bo = boost_control_step(
                &spec.boost_control,
                &spec.boost,
                &c.boost_pi,
                &BoostMeasurement { v_dc: boost.v_dc, i_b: boost.i_b, v_b: spec.boost.v_b },
                ts,
            );
            c.boost_pi = bo.states;
            c.duty = bo.duty;
            c.tel.i_b_ref = bo.i_b_ref;

            let p = v.dot(&i_o);
            c.tel.p = p;
            let dq_own = park(c.droop.theta(), v);
            c.tel.v_amp = dq_own.magnitude();
            c.tel.v_angle = phasor_angle(v);
            if !c.enabled {
                c.u_bar = ThreePhase::ZERO;
                c.tel = Telemetry { p_filt: 0.0, q: 0.0, u: 0.0, omega: 0.0, saturated: false, ..c.tel.clone() };
                c.samples += 1;
                continue;
            }
            let p_filt = c.filter.push(p);
            let theta = c.droop.theta();
            let (u_bar, saturated) = match spec.mode {
                ControlMode::Direct => {
                    let u = direct_modulation(theta, spec.modulation_amplitude).unwrap_or(ThreePhase::ZERO);
                    (u, false)
                }
                ControlMode::Indirect => {
                    let out = indirect_control_step(
                        &spec.indirect,
                        &c.indirect_pi,
                        theta,
                        &IndirectMeasurement { v, i, i_o, v_dc: boost.v_dc },
                        &spec.filter,
                        c.gains.omega_star,
                        ts,
                    );
                    c.indirect_pi = out.states;
                    (out.u_bar, out.saturated)
                }
            };
            let id = park(theta, i_o);
            let q = 1.5 * (dq_own.q * id.d - dq_own.d * id.q);
            let step = droop_step(&c.gains, &c.droop, p_filt, ts);
            c.tel = Telemetry {
                theta,
                delta_theta: c.droop.delta_theta,
                omega: (1.0 + c.epsilon) * step.omega,
                u: step.omega - c.gains.omega_star,
                p,
                p_filt,
                q,
                v_amp: c.tel.v_amp,
                v_angle: c.tel.v_angle,
                i_b_ref: c.tel.i_b_ref,
                saturated: saturated || bo.saturated,
            };
            if step.alarm {
                c.angle_alarms += 1;
                if c.angle_alarms == 1 {
                    self.markers.push(Marker {
                        time: t,
                        kind: "warning".into(),
                        detail: format!("converter {}: |delta_theta| reached pi", k + 1),
                    });
                }
            }
            if saturated {
                c.saturated_samples += 1;
            }
            c.droop = step.state;
            c.u_bar = u_bar;
            c.samples += 1;
        }

        // security constraint on every energized line
        for line in &self.spec.topology.lines {
            let k = line.converter;
            if !self.net.breaker_closed[k] || self.v0.norm_sq() == 0.0 {
                continue;
            }
            let d = wrap_pi(self.ctl[k].tel.v_angle - v0_angle);
            let insecure = d.abs() >= FRAC_PI_2;
            if insecure && !self.ctl[k].insecure {
                self.markers.push(Marker {
                    time: t,
                    kind: "warning".into(),
                    detail: format!("line of converter {}: angle difference {d} outside (-pi/2, pi/2)", k + 1),
                });
            }
            self.ctl[k].insecure = insecure;
        }
    }

    fn row(&self, out: &mut Vec<f64>) {
        out.clear();
        let caps = self.capacitor_voltages(&self.x);
        let lines = self.line_states(&self.x);
        let port = network_port_currents(&self.spec.topology, &self.net, &caps, &lines);
        for (k, c) in self.ctl.iter().enumerate() {
            let b = k * CONV_STATES;
            let i_o = port.i_o[k] + caps[k] * self.g_term[k];
            let t = &c.tel;
            out.extend_from_slice(&[
                t.theta,
                c.droop.theta_star,
                t.delta_theta,
                t.omega,
                t.u,
                t.p,
                t.p_filt,
                t.q,
                t.v_amp,
                self.x[b + 1],
                self.x[b],
                c.duty,
                t.i_b_ref,
            ]);
            out.extend_from_slice(&caps[k].to_array());
            out.extend_from_slice(&self.x[b + 2..b + 5]);
            out.extend_from_slice(&i_o.to_array());
            out.extend_from_slice(&c.u_bar.to_array());
            out.extend_from_slice(&[
                f64::from(u8::from(t.saturated)),
                f64::from(u8::from(c.enabled)),
                f64::from(u8::from(self.net.breaker_closed[k])),
                t.v_angle,
            ]);
        }
        if self.spec.topology.has_common_node() {
            out.extend_from_slice(&port.common_voltage.unwrap_or(ThreePhase::ZERO).to_array());
            out.extend_from_slice(&[self.pll.theta_hat, self.pll.omega_hat, self.pll.error]);
        }
        if self.ctl.len() >= 2 {
            out.push(wrap_pi(self.ctl[0].tel.theta - self.ctl[1].tel.theta));
        }
    }
}

/// Integrates a validated scenario. A non-finite state stops the run; the
/// trace up to that point is kept and `summary.aborted` is set.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunOutput, ConfigError> {
    spec.validate()?;
    let mut eng = Engine::new(spec);
    let names = channel_names(spec.converters.len(), spec.topology.has_common_node());
    let mut trace = TraceRecorder::new(names, spec.plant_dt * spec.record.decimation as f64);
    let n_steps = spec.steps();
    let ratio = spec.controller_ratio();
    let mut next_event = 0;
    let mut k: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; eng.x.len()]);
    let mut tmp = vec![0.0; eng.x.len()];
    let mut row = Vec::new();
    let mut aborted = None;

    for n in 0..n_steps {
        let t = n as f64 * spec.plant_dt;
        while next_event < spec.events.len() && spec.events[next_event].time <= t + 0.5 * spec.plant_dt {
            let ev = spec.events[next_event].clone();
            eng.apply(t, &ev);
            next_event += 1;
        }
        if n % ratio == 0 {
            eng.control_sample(t);
        }
        if n % spec.record.decimation == 0 {
            eng.row(&mut row);
            trace.push_row(t, &row);
        }
        eng.rk4(spec.plant_dt, &mut k, &mut tmp);
        if let Some(i) = eng.x.iter().position(|v| !v.is_finite()) {
            let t_end = (n + 1) as f64 * spec.plant_dt;
            let message = format!("non-finite plant state (index {i}) at t = {t_end} s");
            eng.markers.push(Marker { time: t_end, kind: "abort".into(), detail: message.clone() });
            aborted = Some(Abort { time: t_end, message });
            break;
        }
    }
    trace.markers = std::mem::take(&mut eng.markers);
    let summary = summarize(spec, &trace, &eng, aborted);
    let trace = trace.select(&spec.record.channels);
    Ok(RunOutput { trace, summary })
}

fn summarize(spec: &ScenarioSpec, trace: &TraceRecorder, eng: &Engine, aborted: Option<Abort>) -> SummaryReport {
    let w = &spec.steady_state;
    let t = &trace.time;
    let mean = |name: &str| trace.channel(name).and_then(|x| trailing_mean(t, x, w.window)).unwrap_or(f64::NAN);
    let last_load_step = spec
        .events
        .iter()
        .rev()
        .find(|e| matches!(e.action, EventAction::LoadStep { .. }))
        .map(|e| e.time);
    let converters = eng
        .ctl
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let s = k + 1;
            let ch = |n: &str| trace.channel(&format!("{n}_{s}")).unwrap_or(&[]);
            let p_s = mean(&format!("p_{s}"));
            let delta_theta_s = mean(&format!("delta_theta_{s}"));
            let (cost, cost_tail_ratio) = match running_cost(t, ch("delta_theta"), ch("p_filt"), ch("u"), &c.gains) {
                Ok(rc) if !rc.integrand.is_empty() => {
                    let peak = rc.integrand.iter().cloned().fold(0.0, f64::max);
                    let tail_start = rc.integrand.len() * 9 / 10;
                    let tail = rc.integrand[tail_start..].iter().cloned().fold(0.0, f64::max);
                    (rc.total, if peak > 0.0 { tail / peak } else { 0.0 })
                }
                _ => (0.0, 0.0),
            };
            let floor = SteadyStateWindow { abs_floor: w.abs_floor.max(1.0), ..*w };
            ConverterSummary {
                p_s,
                q_s: mean(&format!("q_{s}")),
                delta_theta_s,
                omega_s: mean(&format!("omega_{s}")),
                v_amp_s: mean(&format!("v_amp_{s}")),
                v_dc_s: mean(&format!("v_dc_{s}")),
                p_settle_time: detect_steady_state(t, ch("p"), &floor),
                omega_settle_time: detect_steady_state(t, ch("omega"), w),
                droop_residual: c.gains.gamma * delta_theta_s + p_s - c.gains.p_star,
                gains: c.gains,
                theta_star_end: c.droop.theta_star,
                cost,
                cost_tail_ratio,
                nadir: last_load_step.and_then(|t0| nadir(t, ch("omega"), c.gains.omega_star, t0)),
                angle_alarms: c.angle_alarms,
                saturated_samples: c.saturated_samples,
            }
        })
        .collect::<Vec<_>>();
    let two = spec.converters.len() >= 2;
    let common_v_amp_s = spec.topology.has_common_node().then(|| {
        let amp: Vec<f64> = (0..trace.len())
            .map(|i| {
                let v = ThreePhase::new(
                    trace.channel("v0_a").map_or(0.0, |x| x[i]),
                    trace.channel("v0_b").map_or(0.0, |x| x[i]),
                    trace.channel("v0_c").map_or(0.0, |x| x[i]),
                );
                park(0.0, v).magnitude()
            })
            .collect();
        trailing_mean(t, &amp, w.window).unwrap_or(f64::NAN)
    });
    let mut warnings = eng.warnings.clone();
    for m in trace.markers.iter().filter(|m| m.kind == "warning") {
        warnings.push(format!("t={}: {}", m.time, m.detail));
    }
    SummaryReport {
        scenario: spec.name.clone(),
        duration: spec.duration,
        samples: trace.len(),
        sample_period: trace.sample_period,
        aborted,
        theta_diff_s: two.then(|| mean("theta_diff_12")),
        theta_star_diff: two.then(|| wrap_pi(eng.ctl[0].droop.theta_star - eng.ctl[1].droop.theta_star)),
        common_v_amp_s,
        converters,
        warnings,
        final_state: eng.x.clone(),
    }
}

/// Resolves a sweep parameter name to a path in the scenario document.
/// `alpha`, `gamma` and `p_star` address every converter's droop gains.
pub fn resolve_alias(param: &str) -> String {
    match param {
        "alpha" | "gamma" | "p_star" | "omega_star" => format!("converters[*].droop.{param}"),
        "line_resistance" | "r_l" => "topology.lines[*].params.r_l".into(),
        "modulation_amplitude" | "power_filter_window" => format!("converters[*].{param}"),
        other => other.into(),
    }
}

fn set_path(doc: &mut Value, path: &[&str], value: &Value) -> Result<(), String> {
    let Some((head, rest)) = path.split_first() else {
        *doc = value.clone();
        return Ok(());
    };
    let (key, index) = match head.find('[') {
        Some(i) if head.ends_with(']') => (&head[..i], Some(&head[i + 1..head.len() - 1])),
        _ => (*head, None),
    };
    let obj = doc.as_object_mut().ok_or_else(|| format!("{key}: not an object"))?;
    let child = obj.get_mut(key).ok_or_else(|| format!("{key}: no such key"))?;
    match index {
        None => set_path(child, rest, value),
        Some(ix) => {
            let arr = child.as_array_mut().ok_or_else(|| format!("{key}: not an array"))?;
            if ix == "*" {
                if arr.is_empty() {
                    return Err(format!("{key}: empty array"));
                }
                arr.iter_mut().try_for_each(|el| set_path(el, rest, value))
            } else {
                let i: usize = ix.parse().map_err(|_| format!("{key}[{ix}]: bad index"))?;
                let len = arr.len();
                let el = arr.get_mut(i).ok_or_else(|| format!("{key}[{i}]: index out of range ({len})"))?;
                set_path(el, rest, value)
            }
        }
    }
}

/// Returns `spec` with the value at `param` replaced.
pub fn with_parameter(spec: &ScenarioSpec, param: &str, value: f64) -> Result<ScenarioSpec, ConfigError> {
    let path = resolve_alias(param);
    let mut doc = serde_json::to_value(spec).map_err(|e| ConfigError::invalid(param, e.to_string()))?;
    let parts: Vec<&str> = path.split('.').collect();
    set_path(&mut doc, &parts, &Value::from(value)).map_err(|m| ConfigError::invalid(param, m))?;
    let mut out: ScenarioSpec = serde_json::from_value(doc).map_err(|e| ConfigError::invalid(param, e.to_string()))?;
    out.name = format!("{}[{param}={value}]", spec.name);
    out.validate()?;
    Ok(out)
}

/// Independent runs of `spec` with `param` set to each value, in parallel.
pub fn sweep(spec: &ScenarioSpec, param: &str, values: &[f64]) -> Vec<Result<RunOutput, ConfigError>> {
    values.par_iter().map(|v| with_parameter(spec, param, *v).and_then(|s| run_scenario(&s))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftDemo {
    pub drifting: RunOutput,
    pub master_clock: RunOutput,
    pub reference: RunOutput,
    /// Largest absolute difference between the master-clock and zero-drift traces.
    pub master_vs_reference: f64,
}

/// Runs `spec` with `ε_1 − ε_2 = delta_epsilon` without a master clock, the
/// same drift with the master clock, and a drift-free reference.
pub fn clock_drift_demo(spec: &ScenarioSpec, delta_epsilon: f64) -> Result<DriftDemo, ConfigError> {
    if spec.converters.len() < 2 {
        return Err(ConfigError::invalid("converters", "clock drift demo needs two converters"));
    }
    let mut eps = vec![0.0; spec.converters.len()];
    eps[0] = delta_epsilon;
    let drifting = ScenarioSpec {
        clock: ClockModel { epsilon: eps.clone(), master_clock_enabled: false },
        ..spec.clone()
    };
    let master = ScenarioSpec { clock: ClockModel { epsilon: eps, master_clock_enabled: true }, ..spec.clone() };
    let reference = ScenarioSpec { clock: ClockModel::default(), ..spec.clone() };
    let runs: Vec<Result<RunOutput, ConfigError>> =
        [drifting, master, reference].par_iter().map(run_scenario).collect();
    let mut it = runs.into_iter();
    let (drifting, master_clock, reference) = (it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?);
    let master_vs_reference = master_clock
        .trace
        .data
        .iter()
        .flatten()
        .zip(reference.trace.data.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(DriftDemo { drifting, master_clock, reference, master_vs_reference })
}

/// Wrapped difference of two angles in `(−π, π]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    wrap_pi(wrap_unchecked(a) - wrap_unchecked(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(duration: f64) -> ScenarioSpec {
        ScenarioSpec { duration, ..Default::default() }
    }

    #[test]
    fn default_spec_is_valid() {
        ScenarioSpec::default().validate().unwrap();
    }

    #[test]
    fn zero_duration_gives_empty_traces() {
        let out = run_scenario(&short(0.0)).unwrap();
        assert!(out.trace.is_empty());
        assert!(out.trace.data.iter().all(|c| c.is_empty()));
        assert!(out.summary.aborted.is_none());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = short(0.1);
        s.controller_ts = 1.5e-5;
        assert!(s.validate().unwrap_err().to_string().contains("integer multiple"));
        let mut s = short(0.1);
        s.converters[0].modulation_amplitude = 1.2;
        assert!(s.validate().unwrap_err().to_string().contains("0 < A < 1"));
        let mut s = short(0.1);
        s.converters[0].droop.alpha = -1.0;
        assert!(s.validate().unwrap_err().to_string().contains("alpha > 0"));
        let mut s = short(0.1);
        s.events.push(Event { time: -1.0, action: EventAction::CloseBreaker { converter: 0 } });
        assert!(s.validate().is_err());
        let mut s = short(0.1);
        s.record.channels = vec!["nope".into()];
        assert!(s.validate().is_err());
    }

    #[test]
    fn channels_have_equal_length_and_uniform_time() {
        let out = run_scenario(&short(0.01)).unwrap();
        let n = out.trace.len();
        assert_eq!(n, 100);
        assert!(out.trace.data.iter().all(|c| c.len() == n));
        for (i, t) in out.trace.time.iter().enumerate() {
            assert!((t - i as f64 * 1e-4).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_selection() {
        let mut s = short(0.005);
        s.record.channels = vec!["p_1".into(), "theta_1".into()];
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.trace.names, vec!["p_1", "theta_1"]);
    }

    #[test]
    fn sweep_paths() {
        let s = short(0.0);
        let t = with_parameter(&s, "gamma", 500.0).unwrap();
        assert_eq!(t.converters[0].droop.gamma, 500.0);
        let t = with_parameter(&s, "converters[0].droop.alpha", 1000.0).unwrap();
        assert_eq!(t.converters[0].droop.alpha, 1000.0);
        assert!(with_parameter(&s, "converters[3].droop.alpha", 1.0).is_err());
        assert!(with_parameter(&s, "nope", 1.0).is_err());
        assert!(sweep(&s, "alpha", &[]).is_empty());
    }

    #[test]
    fn master_clock_zeroes_drift() {
        let c = ClockModel { epsilon: vec![0.01, 0.0], master_clock_enabled: true };
        assert_eq!(c.effective_epsilon(0), 0.0);
        let c = ClockModel { master_clock_enabled: false, ..c };
        assert_eq!(c.effective_epsilon(0), 0.01);
        assert_eq!(c.effective_epsilon(5), 0.0);
    }

    #[test]
    fn event_serde_shape() {
        let e: Event = serde_json::from_str(r#"{"time": 0.2, "action": {"load_step": {"node": "converter:0", "resistance": 41.76}}}"#)
            .unwrap();
        assert_eq!(e.action, EventAction::LoadStep { node: NodeRef::Converter(0), resistance: 41.76 });
        assert!(serde_json::from_str::<Event>(r#"{"time": 0, "action": {"explode": {}}}"#).is_err());
    }
}
