//! Continuous-time averaged models: boost stage, DC/AC bridge with LC output
//! filter, RL lines into a common resistive node.
//!
//! Everything here is a pure derivative evaluation. Integration and event
//! handling live in [`crate::sim`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::frames::ThreePhase;

/// Lower clamp on the DC-link voltage used in the `V_b I_b / V_dc` current term.
pub const V_DC_MIN: f64 = 1.0;

/// DC-side parasitic conductance calibrated so that the boost draws about 5 A
/// at 750 V while the bridge delivers 2880 W.
pub const G_DC_CALIBRATED: f64 = 2.13e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostParams {
    pub l_b: f64,
    pub r_b: f64,
    pub c_dc: f64,
    pub g_dc: f64,
    /// Stiff DC supply voltage.
    pub v_b: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams { l_b: 2.36e-3, r_b: 1e-3, c_dc: 3e-3, g_dc: G_DC_CALIBRATED, v_b: 600.0 }
    }
}

impl BoostParams {
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        positive(&format!("{path}.l_b"), "l_b > 0", self.l_b)?;
        positive(&format!("{path}.r_b"), "r_b > 0", self.r_b)?;
        positive(&format!("{path}.c_dc"), "c_dc > 0", self.c_dc)?;
        positive(&format!("{path}.v_b"), "v_b > 0", self.v_b)?;
        non_negative(&format!("{path}.g_dc"), "g_dc >= 0", self.g_dc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoostState {
    /// Boost inductor current.
    pub i_b: f64,
    /// DC-link voltage.
    pub v_dc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcFilterParams {
    pub l: f64,
    pub r: f64,
    pub c: f64,
    /// Conductance from the capacitor node to ground.
    pub g: f64,
}

impl Default for AcFilterParams {
    fn default() -> Self {
        AcFilterParams { l: 2.36e-3, r: 1e-3, c: 1e-5, g: 0.0 }
    }
}

impl AcFilterParams {
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        positive(&format!("{path}.l"), "l > 0", self.l)?;
        positive(&format!("{path}.c"), "c > 0", self.c)?;
        non_negative(&format!("{path}.r"), "r >= 0", self.r)?;
        non_negative(&format!("{path}.g"), "g >= 0", self.g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AcState {
    /// Filter inductor current.
    pub i: ThreePhase,
    /// Filter capacitor voltage.
    pub v: ThreePhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineParams {
    pub r_l: f64,
    pub l_l: f64,
}

impl Default for LineParams {
    fn default() -> Self {
        LineParams { r_l: 20e-3, l_l: 700e-6 }
    }
}

impl LineParams {
    pub fn reactance(&self, omega: f64) -> f64 {
        omega * self.l_l
    }

    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        positive(&format!("{path}.l_l"), "l_l > 0", self.l_l)?;
        non_negative(&format!("{path}.r_l"), "r_l >= 0", self.r_l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LineState {
    pub i_l: ThreePhase,
}

/// A node of the star network: a converter terminal (filter capacitor) or the
/// shared load node. Serialized as `"common"` or `"converter:<k>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NodeRef {
    Converter(usize),
    Common,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Common => write!(f, "common"),
            NodeRef::Converter(k) => write!(f, "converter:{k}"),
        }
    }
}

impl From<NodeRef> for String {
    fn from(n: NodeRef) -> String {
        n.to_string()
    }
}

impl TryFrom<String> for NodeRef {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        if s == "common" {
            return Ok(NodeRef::Common);
        }
        s.strip_prefix("converter:")
            .and_then(|k| k.parse().ok())
            .map(NodeRef::Converter)
            .ok_or_else(|| format!("node must be \"common\" or \"converter:<index>\", got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    /// Converter whose terminal feeds this line; the far end is the common node.
    pub converter: usize,
    #[serde(default)]
    pub params: LineParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub node: NodeRef,
    /// Per-phase resistance, ohm.
    pub resistance: f64,
}

/// Star network: converter terminals connect through RL lines to one common
/// resistive node. Loads may sit on the common node or directly on a terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    pub converters: usize,
    #[serde(default)]
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
}

impl NetworkTopology {
    pub fn has_common_node(&self) -> bool {
        !self.lines.is_empty()
    }

    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        if self.converters == 0 {
            return Err(ConfigError::constraint(format!("{path}.converters"), "converters >= 1", 0));
        }
        for (j, line) in self.lines.iter().enumerate() {
            let lp = format!("{path}.lines[{j}]");
            if line.converter >= self.converters {
                return Err(ConfigError::invalid(
                    format!("{lp}.converter"),
                    format!("line endpoint converter {} does not exist", line.converter),
                ));
            }
            line.params.validate(&format!("{lp}.params"))?;
        }
        for (j, load) in self.loads.iter().enumerate() {
            let lp = format!("{path}.loads[{j}]");
            positive(&format!("{lp}.resistance"), "resistance > 0", load.resistance)?;
            match load.node {
                NodeRef::Converter(k) if k >= self.converters => {
                    return Err(ConfigError::invalid(
                        format!("{lp}.node"),
                        format!("load node converter:{k} does not exist"),
                    ));
                }
                NodeRef::Common if !self.has_common_node() => {
                    return Err(ConfigError::invalid(
                        format!("{lp}.node"),
                        "load on the common node but no line reaches it",
                    ));
                }
                _ => {}
            }
        }
        if self.has_common_node() && !self.loads.iter().any(|l| l.node == NodeRef::Common) {
            return Err(ConfigError::invalid(
                format!("{path}.loads"),
                "common node has no resistive load; its voltage is undefined",
            ));
        }
        if self.converters > 1 {
            for k in 0..self.converters {
                if !self.lines.iter().any(|l| l.converter == k) {
                    return Err(ConfigError::invalid(
                        format!("{path}.lines"),
                        format!("converter {k} is not connected to the network"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Node-edge incidence matrix. Rows are converter terminals followed by the
    /// common node (when present); columns are lines, +1 at the converter end.
    pub fn incidence(&self) -> Vec<Vec<i8>> {
        let rows = self.converters + usize::from(self.has_common_node());
        let mut b = vec![vec![0i8; self.lines.len()]; rows];
        for (j, line) in self.lines.iter().enumerate() {
            b[line.converter][j] = 1;
            b[self.converters][j] = -1;
        }
        b
    }
}

/// Time-varying switch and load settings of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub breaker_closed: Vec<bool>,
    /// Resistances, indexed like `NetworkTopology::loads`.
    pub load_resistance: Vec<f64>,
}

impl NetworkState {
    pub fn initial(topology: &NetworkTopology) -> Self {
        NetworkState {
            breaker_closed: vec![false; topology.converters],
            load_resistance: topology.loads.iter().map(|l| l.resistance).collect(),
        }
    }

    /// Conductance attached directly to converter `k`'s terminal (behind its breaker).
    pub fn terminal_conductance(&self, topology: &NetworkTopology, k: usize) -> f64 {
        if !self.breaker_closed[k] {
            return 0.0;
        }
        topology
            .loads
            .iter()
            .zip(&self.load_resistance)
            .filter(|(l, _)| l.node == NodeRef::Converter(k))
            .map(|(_, r)| 1.0 / r)
            .sum()
    }

    /// Equivalent resistance of the loads on the common node.
    pub fn common_resistance(&self, topology: &NetworkTopology) -> Option<f64> {
        let g: f64 = topology
            .loads
            .iter()
            .zip(&self.load_resistance)
            .filter(|(l, _)| l.node == NodeRef::Common)
            .map(|(_, r)| 1.0 / r)
            .sum();
        (g > 0.0).then(|| 1.0 / g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortCurrents {
    /// Current leaving each converter terminal into the lines.
    pub i_o: Vec<ThreePhase>,
    /// `d i_l / dt` per line.
    pub line_derivatives: Vec<ThreePhase>,
    /// Common-node voltage, if the network has one.
    pub common_voltage: Option<ThreePhase>,
}

/// Output of a clipping operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clipped<T> {
    pub value: T,
    pub clipped: bool,
}

/// Closes the circuit formed by the lines and the algebraic common node
/// `v_0 = R_load · Σ i_l`. Lines behind an open breaker carry no current.
pub fn network_port_currents(
    topology: &NetworkTopology,
    state: &NetworkState,
    capacitor_voltages: &[ThreePhase],
    line_states: &[LineState],
) -> PortCurrents {
    let mut i_o = vec![ThreePhase::ZERO; topology.converters];
    let mut line_derivatives = vec![ThreePhase::ZERO; topology.lines.len()];
    let common_voltage = if topology.has_common_node() {
        let r0 = state.common_resistance(topology).unwrap_or(0.0);
        let total = topology
            .lines
            .iter()
            .zip(line_states)
            .filter(|(l, _)| state.breaker_closed[l.converter])
            .fold(ThreePhase::ZERO, |acc, (_, s)| acc + s.i_l);
        Some(total * r0)
    } else {
        None
    };
    let v0 = common_voltage.unwrap_or(ThreePhase::ZERO);
    for (j, (line, s)) in topology.lines.iter().zip(line_states).enumerate() {
        if !state.breaker_closed[line.converter] {
            continue;
        }
        let vk = capacitor_voltages[line.converter];
        line_derivatives[j] = (vk - s.i_l * line.params.r_l - v0) * (1.0 / line.params.l_l);
        i_o[line.converter] = i_o[line.converter] + s.i_l;
    }
    PortCurrents { i_o, line_derivatives, common_voltage }
}

/// Boost stage derivatives. `i_load` is the DC current drawn from the link by
/// the bridge (`½ ū·i` for the averaged DC/AC stage).
pub fn boost_derivatives(p: &BoostParams, s: &BoostState, v_c: f64, i_load: f64) -> BoostState {
    let i_dc = p.v_b * s.i_b / s.v_dc.max(V_DC_MIN);
    BoostState {
        i_b: (-p.r_b * s.i_b + p.v_b - v_c) / p.l_b,
        v_dc: (-p.g_dc * s.v_dc + i_dc - i_load) / p.c_dc,
    }
}

/// Switch-node voltage set by the boost duty cycle: `(1 − d)·V_dc`, with `d`
/// saturated to `[0, 1]`.
pub fn duty_to_vc(d: f64, v_dc: f64) -> Clipped<f64> {
    let dc = d.clamp(0.0, 1.0);
    Clipped { value: (1.0 - dc) * v_dc, clipped: dc != d }
}

pub fn saturate_modulation(u: ThreePhase) -> Clipped<ThreePhase> {
    let s = u.map(|x| x.clamp(-1.0, 1.0));
    Clipped { value: s, clipped: s != u }
}

/// DC current drawn by an averaged bridge from its DC link.
pub fn bridge_dc_current(u_bar: &ThreePhase, i: &ThreePhase) -> f64 {
    0.5 * u_bar.dot(i)
}

/// DC/AC bridge and LC filter:
/// `L di/dt = −R i + ½ ū V_dc − v`, `C dv/dt = −G v + i − i_o`.
pub fn dcac_derivatives(
    p: &AcFilterParams,
    s: &AcState,
    u_bar: ThreePhase,
    v_dc: f64,
    i_o: ThreePhase,
) -> Clipped<AcState> {
    let u = saturate_modulation(u_bar);
    let di = (s.i * -p.r + u.value * (0.5 * v_dc) - s.v) * (1.0 / p.l);
    let dv = (s.v * -p.g + s.i - i_o) * (1.0 / p.c);
    Clipped { value: AcState { i: di, v: dv }, clipped: u.clipped }
}

fn positive(path: &str, constraint: &str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::constraint(path, constraint, x))
    }
}

fn non_negative(path: &str, constraint: &str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::constraint(path, constraint, x))
    }
}
