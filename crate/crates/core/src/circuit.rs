//! Linear AC circuit with two phase-shifted sources, a series load and a
//! parallel load pair, simulated under nominal and faulted parameters.
//!
//! Topology: `src1` and `src2` in series drive the main loop. Load 1 sits in
//! series; loads 2 and 3 are in parallel with each other and in series with
//! load 1. All loads are pure resistances, so every loop quantity is in phase
//! with the total EMF.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Number of observed channels.
pub const CHANNELS: usize = 6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CircuitError {
    #[error("invalid circuit config: {0}")]
    InvalidConfig(String),
    #[error("invalid fault scenario: {0}")]
    InvalidScenario(String),
}

/// Observed channels, in the fixed column order of every window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    VSrc1,
    VSrc2,
    EmfTotal,
    VLoad1,
    VLoad23,
    Current,
}

impl Channel {
    pub const ALL: [Channel; CHANNELS] = [
        Channel::VSrc1,
        Channel::VSrc2,
        Channel::EmfTotal,
        Channel::VLoad1,
        Channel::VLoad23,
        Channel::Current,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Human-readable name used in prompts and answers.
    pub fn display_name(self) -> &'static str {
        match self {
            Channel::VSrc1 => "Voltage Source 1 voltage",
            Channel::VSrc2 => "Voltage Source 2 voltage",
            Channel::EmfTotal => "total EMF",
            Channel::VLoad1 => "Load 1 voltage",
            Channel::VLoad23 => "Loads 2 and 3 voltage",
            Channel::Current => "main loop current",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Channel::Current => "A",
            _ => "V",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitConfig {
    /// Shared peak amplitude of both sources, volts.
    pub amplitude_nominal: f64,
    pub phase1: f64,
    pub phase2: f64,
    pub frequency: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub sample_interval: f64,
    /// Gaussian measurement noise, relative to each channel's nominal amplitude.
    pub noise_sigma_rel: f64,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        Self {
            amplitude_nominal: 10.0,
            phase1: 0.0,
            phase2: PI / 3.0,
            frequency: 50.0,
            r1: 1.0,
            r2: 1.0,
            r3: 3.0,
            sample_interval: 1e-3,
            noise_sigma_rel: 0.005,
        }
    }
}

impl CircuitConfig {
    pub fn validate(&self) -> Result<(), CircuitError> {
        let positive = [
            ("amplitude_nominal", self.amplitude_nominal),
            ("frequency", self.frequency),
            ("r1", self.r1),
            ("r2", self.r2),
            ("r3", self.r3),
            ("sample_interval", self.sample_interval),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CircuitError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.phase1.is_finite() && self.phase2.is_finite()) {
            return Err(CircuitError::InvalidConfig("phases must be finite".into()));
        }
        if !(0.0..0.05).contains(&self.noise_sigma_rel) {
            return Err(CircuitError::InvalidConfig(format!(
                "noise_sigma_rel must be in [0, 0.05), got {}",
                self.noise_sigma_rel
            )));
        }
        Ok(())
    }

    pub fn nominal_params(&self) -> ActiveParams {
        ActiveParams {
            a1: self.amplitude_nominal,
            a2: self.amplitude_nominal,
            r1: self.r1,
            r2: self.r2,
            r3: self.r3,
        }
    }

    /// Peak amplitude of each channel under the given parameters.
    pub fn channel_amplitudes(&self, p: &ActiveParams) -> [f64; CHANNELS] {
        // |a1 e^{j phi1} + a2 e^{j phi2}|
        let re = p.a1 * self.phase1.cos() + p.a2 * self.phase2.cos();
        let im = p.a1 * self.phase1.sin() + p.a2 * self.phase2.sin();
        let e = re.hypot(im);
        let r_par = p.r_parallel();
        let i = e / (p.r1 + r_par);
        [p.a1, p.a2, e, i * p.r1, i * r_par, i]
    }

    pub fn nominal_amplitudes(&self) -> [f64; CHANNELS] {
        self.channel_amplitudes(&self.nominal_params())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    None,
    Source1Amplitude,
    Source2Amplitude,
    Load1Resistance,
    Load2Resistance,
    Load3Resistance,
}

impl FaultTarget {
    pub const ALL: [FaultTarget; 6] = [
        FaultTarget::None,
        FaultTarget::Source1Amplitude,
        FaultTarget::Source2Amplitude,
        FaultTarget::Load1Resistance,
        FaultTarget::Load2Resistance,
        FaultTarget::Load3Resistance,
    ];

    pub const FAULTS: [FaultTarget; 5] = [
        FaultTarget::Source1Amplitude,
        FaultTarget::Source2Amplitude,
        FaultTarget::Load1Resistance,
        FaultTarget::Load2Resistance,
        FaultTarget::Load3Resistance,
    ];

    /// Canonical conclusion label naming the component.
    pub fn label(self) -> &'static str {
        match self {
            FaultTarget::None => "normal",
            FaultTarget::Source1Amplitude => "voltage source 1",
            FaultTarget::Source2Amplitude => "voltage source 2",
            FaultTarget::Load1Resistance => "load 1",
            FaultTarget::Load2Resistance => "load 2",
            FaultTarget::Load3Resistance => "load 3",
        }
    }

    /// Component name as it appears in prompts.
    pub fn component_name(self) -> &'static str {
        match self {
            FaultTarget::None => "no component",
            FaultTarget::Source1Amplitude => "Voltage Source 1",
            FaultTarget::Source2Amplitude => "Voltage Source 2",
            FaultTarget::Load1Resistance => "Load 1",
            FaultTarget::Load2Resistance => "Load 2",
            FaultTarget::Load3Resistance => "Load 3",
        }
    }

    /// Name of the intrinsic parameter the fault perturbs.
    pub fn parameter_name(self) -> &'static str {
        match self {
            FaultTarget::None => "parameter",
            FaultTarget::Source1Amplitude | FaultTarget::Source2Amplitude => "amplitude",
            _ => "resistance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultScenario {
    pub target: FaultTarget,
    pub multiplier: f64,
    pub onset_index: usize,
}

impl FaultScenario {
    pub fn nominal() -> Self {
        Self { target: FaultTarget::None, multiplier: 1.0, onset_index: 0 }
    }

    /// Validated constructor for a window of `m` timesteps.
    pub fn new(target: FaultTarget, multiplier: f64, onset_index: usize, m: usize) -> Result<Self, CircuitError> {
        let s = Self { target, multiplier, onset_index };
        s.validate(m)?;
        Ok(s)
    }

    pub fn validate(&self, m: usize) -> Result<(), CircuitError> {
        if !(self.multiplier.is_finite() && self.multiplier > 0.0) {
            return Err(CircuitError::InvalidScenario(format!("multiplier must be > 0, got {}", self.multiplier)));
        }
        if self.target == FaultTarget::None && self.multiplier != 1.0 {
            return Err(CircuitError::InvalidScenario("target none requires multiplier 1".into()));
        }
        if self.onset_index >= m {
            return Err(CircuitError::InvalidScenario(format!(
                "onset_index {} outside window of {m} steps",
                self.onset_index
            )));
        }
        Ok(())
    }
}

/// Source amplitudes and load resistances in force at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveParams {
    pub a1: f64,
    pub a2: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl ActiveParams {
    pub fn r_parallel(&self) -> f64 {
        self.r2 * self.r3 / (self.r2 + self.r3)
    }
}

pub fn apply_fault(config: &CircuitConfig, scenario: &FaultScenario, t_index: usize) -> ActiveParams {
    let mut p = config.nominal_params();
    if t_index < scenario.onset_index {
        return p;
    }
    let k = scenario.multiplier;
    match scenario.target {
        FaultTarget::None => {}
        FaultTarget::Source1Amplitude => p.a1 *= k,
        FaultTarget::Source2Amplitude => p.a2 *= k,
        FaultTarget::Load1Resistance => p.r1 *= k,
        FaultTarget::Load2Resistance => p.r2 *= k,
        FaultTarget::Load3Resistance => p.r3 *= k,
    }
    p
}

/// Instantaneous values of the six observed quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstantState {
    pub v1: f64,
    pub v2: f64,
    pub e: f64,
    pub v_l1: f64,
    pub v_l23: f64,
    pub i: f64,
}

impl InstantState {
    pub fn to_row(self) -> [f64; CHANNELS] {
        [self.v1, self.v2, self.e, self.v_l1, self.v_l23, self.i]
    }
}

pub fn solve_instant(config: &CircuitConfig, active: &ActiveParams, t: f64) -> InstantState {
    let w = 2.0 * PI * config.frequency * t;
    let v1 = active.a1 * (w + config.phase1).sin();
    let v2 = active.a2 * (w + config.phase2).sin();
    let e = v1 + v2;
    let r_par = active.r_parallel();
    let i = e / (active.r1 + r_par);
    InstantState { v1, v2, e, v_l1: i * active.r1, v_l23: i * r_par, i }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub seed: u64,
    pub scenario: FaultScenario,
}

/// An `M x 6` multivariate series in the fixed channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub values: Vec<[f64; CHANNELS]>,
    pub meta: WindowMeta,
}

impl TimeSeriesWindow {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |row| row[c])
    }

    /// Rows `[start, start + len)` as a new window sharing the metadata.
    pub fn slice(&self, start: usize, len: usize) -> TimeSeriesWindow {
        TimeSeriesWindow { values: self.values[start..start + len].to_vec(), meta: self.meta }
    }
}

/// Simulate `m` steps starting at `t = 0`.
///
/// Noise is drawn from a `ChaCha8` stream seeded by `seed`, one draw per
/// element in row-major order, so the output is a pure function of the inputs.
pub fn simulate(config: &CircuitConfig, scenario: &FaultScenario, m: usize, seed: u64) -> TimeSeriesWindow {
    assert!(m >= 1, "simulate requires m >= 1");
    let mut values = Vec::with_capacity(m);
    for t in 0..m {
        let active = apply_fault(config, scenario, t);
        values.push(solve_instant(config, &active, t as f64 * config.sample_interval).to_row());
    }
    if config.noise_sigma_rel > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let nominal = config.nominal_amplitudes();
        for row in values.iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += config.noise_sigma_rel * nominal[c] * unit.sample(&mut rng);
            }
        }
    }
    TimeSeriesWindow { values, meta: WindowMeta { seed, scenario: *scenario } }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CircuitConfig {
        CircuitConfig { r2: 2.0, r3: 2.0, noise_sigma_rel: 0.0, ..CircuitConfig::default() }
    }

    #[test]
    fn identity_multiplier_keeps_nominal() {
        let c = cfg();
        let s = FaultScenario { target: FaultTarget::Load1Resistance, multiplier: 1.0, onset_index: 0 };
        assert_eq!(apply_fault(&c, &s, 10), c.nominal_params());
    }

    #[test]
    fn pre_onset_is_nominal() {
        let c = cfg();
        for target in FaultTarget::FAULTS {
            let s = FaultScenario { target, multiplier: 1.7, onset_index: 100 };
            assert_eq!(apply_fault(&c, &s, 50), c.nominal_params());
        }
    }

    #[test]
    fn load2_fault_parallel_resistance() {
        let c = cfg();
        let s = FaultScenario { target: FaultTarget::Load2Resistance, multiplier: 2.0, onset_index: 0 };
        let p = apply_fault(&c, &s, 0);
        assert!((p.r_parallel() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_sources_give_zero_state() {
        let c = cfg();
        let p = ActiveParams { a1: 0.0, a2: 0.0, ..c.nominal_params() };
        let s = solve_instant(&c, &p, 0.0123);
        assert_eq!(s.to_row(), [0.0; 6]);
    }

    #[test]
    fn antiphase_sources_cancel() {
        let c = CircuitConfig { phase1: 0.0, phase2: PI, ..cfg() };
        let p = ActiveParams { a1: 1.0, a2: 1.0, ..c.nominal_params() };
        for k in 0..20 {
            let s = solve_instant(&c, &p, k as f64 * 7.3e-4);
            assert!(s.e.abs() < 1e-15 && s.i.abs() < 1e-15);
            assert!(s.v_l1.abs() < 1e-15 && s.v_l23.abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_operating_point() {
        let c = CircuitConfig { phase1: 0.0, phase2: 0.0, r1: 1.0, r2: 2.0, r3: 2.0, ..cfg() };
        let p = ActiveParams { a1: 1.0, a2: 1.0, ..c.nominal_params() };
        // sin(2 pi f t) = 1 at t = 1/(4f)
        let s = solve_instant(&c, &p, 1.0 / (4.0 * c.frequency));
        assert!((s.e - 2.0).abs() < 1e-12);
        assert!((s.i - 1.0).abs() < 1e-12);
        assert!((s.v_l1 - 1.0).abs() < 1e-12);
        assert!((s.v_l23 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simulate_shape_and_emf_sum() {
        let c = cfg();
        let w = simulate(&c, &FaultScenario::nominal(), 256, 3);
        assert_eq!(w.len(), 256);
        for row in &w.values {
            assert!((row[2] - (row[0] + row[1])).abs() <= 1e-12);
        }
    }

    #[test]
    fn simulate_is_bit_deterministic() {
        let c = CircuitConfig::default();
        let s = FaultScenario { target: FaultTarget::Source2Amplitude, multiplier: 0.6, onset_index: 128 };
        let a = simulate(&c, &s, 256, 42);
        let b = simulate(&c, &s, 256, 42);
        let bits = |w: &TimeSeriesWindow| w.values.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let other = simulate(&c, &s, 256, 43);
        assert_ne!(bits(&a), bits(&other));
    }

    #[test]
    fn config_validation() {
        assert!(CircuitConfig::default().validate().is_ok());
        assert!(CircuitConfig { r2: 0.0, ..CircuitConfig::default() }.validate().is_err());
        assert!(CircuitConfig { noise_sigma_rel: 0.05, ..CircuitConfig::default() }.validate().is_err());
        assert!(FaultScenario::new(FaultTarget::None, 1.2, 0, 10).is_err());
        assert!(FaultScenario::new(FaultTarget::Load1Resistance, 1.2, 10, 10).is_err());
        assert!(FaultScenario::new(FaultTarget::Load1Resistance, -1.0, 0, 10).is_err());
    }
}
