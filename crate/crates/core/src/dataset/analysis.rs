//! Closed-form rules that read amplitudes, trends and the fault verdict off a
//! window. These rules are the labeler for every generated sample.

use crate::circuit::{CircuitConfig, FaultTarget, TimeSeriesWindow, CHANNELS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("ambiguous fault verdict: {0:?} all explain the observed ratios")]
    AmbiguousVerdict(Vec<FaultTarget>),
    #[error("observed ratios deviate from nominal but no single-fault hypothesis explains them")]
    Unexplained,
    #[error("window has {0} steps; need at least 2")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Rising,
    Falling,
    Stable,
}

impl Trend {
    pub fn label(self) -> &'static str {
        match self {
            Trend::Rising => "rising",
            Trend::Falling => "falling",
            Trend::Stable => "stable",
        }
    }

    pub fn classify(from: f64, to: f64, threshold: f64) -> Trend {
        let rel = relative_change(from, to);
        if rel > threshold {
            Trend::Rising
        } else if rel < -threshold {
            Trend::Falling
        } else {
            Trend::Stable
        }
    }
}

pub fn relative_change(from: f64, to: f64) -> f64 {
    if from.abs() < f64::EPSILON {
        if to.abs() < f64::EPSILON {
            0.0
        } else {
            f64::INFINITY.copysign(to)
        }
    } else {
        (to - from) / from
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increased,
    Decreased,
    None,
}

impl Direction {
    pub fn as_trend(self) -> Trend {
        match self {
            Direction::Increased => Trend::Rising,
            Direction::Decreased => Trend::Falling,
            Direction::None => Trend::Stable,
        }
    }
}

/// Fault multiplier ranges. A fault draws uniformly from `up` or `down`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierRanges {
    pub up: (f64, f64),
    pub down: (f64, f64),
}

impl Default for MultiplierRanges {
    fn default() -> Self {
        Self { up: (1.3, 2.0), down: (0.5, 0.77) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisRules {
    /// Relative half-to-half amplitude change that counts as a trend.
    pub trend_threshold: f64,
    /// Relative deviation from nominal that counts as a fault.
    pub fault_tolerance: f64,
    /// Relative widening of each hypothesis' reachable ratio interval.
    pub hypothesis_slack: f64,
    pub multipliers: MultiplierRanges,
}

impl Default for AnalysisRules {
    fn default() -> Self {
        Self { trend_threshold: 0.05, fault_tolerance: 0.10, hypothesis_slack: 0.03, multipliers: MultiplierRanges::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    /// Peak |x| per channel over `[0, M/2)`.
    pub first_half: [f64; CHANNELS],
    /// Peak |x| per channel over `[M/2, M)`.
    pub second_half: [f64; CHANNELS],
    pub whole: [f64; CHANNELS],
    pub trends: [Trend; CHANNELS],
    pub verdict: FaultTarget,
    pub direction: Direction,
    /// Source amplitudes relative to nominal, latest half.
    pub source_ratios: [f64; 2],
    /// `v_load1 / i` in the latest half, ohms.
    pub r1_estimate: f64,
    /// `v_load23 / i` in the latest half, ohms.
    pub r_par_estimate: f64,
    pub amplitude_nominal: f64,
    pub r1_nominal: f64,
    pub r2_nominal: f64,
    pub r3_nominal: f64,
    /// Peak values over a hidden continuation window (forecast labels only).
    pub continuation: Option<[f64; CHANNELS]>,
}

impl RuleReport {
    pub fn r_par_nominal(&self) -> f64 {
        self.r2_nominal * self.r3_nominal / (self.r2_nominal + self.r3_nominal)
    }

    /// Estimated value of the queried component's intrinsic parameter, under
    /// the single-fault verdict.
    pub fn parameter_estimate(&self, component: FaultTarget) -> (f64, f64) {
        let rp = self.r_par_estimate;
        match component {
            FaultTarget::None => (1.0, 1.0),
            FaultTarget::Source1Amplitude => {
                (self.source_ratios[0] * self.amplitude_nominal, self.amplitude_nominal)
            }
            FaultTarget::Source2Amplitude => {
                (self.source_ratios[1] * self.amplitude_nominal, self.amplitude_nominal)
            }
            FaultTarget::Load1Resistance => (self.r1_estimate, self.r1_nominal),
            FaultTarget::Load2Resistance => {
                let est = if self.verdict == FaultTarget::Load2Resistance && rp < self.r3_nominal {
                    rp * self.r3_nominal / (self.r3_nominal - rp)
                } else {
                    self.r2_nominal
                };
                (est, self.r2_nominal)
            }
            FaultTarget::Load3Resistance => {
                let est = if self.verdict == FaultTarget::Load3Resistance && rp < self.r2_nominal {
                    rp * self.r2_nominal / (self.r2_nominal - rp)
                } else {
                    self.r3_nominal
                };
                (est, self.r3_nominal)
            }
        }
    }
}

/// Peak absolute value of each channel over `rows`.
pub fn peak_amplitudes(rows: &[[f64; CHANNELS]]) -> [f64; CHANNELS] {
    let mut out = [0.0f64; CHANNELS];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o = o.max(v.abs());
        }
    }
    out
}

/// Interval of `r_par' / r_par` reachable by scaling `r_target` (in parallel
/// with `r_other`) by any multiplier in `[lo, hi]`.
fn parallel_ratio_interval(r_target: f64, r_other: f64, lo: f64, hi: f64) -> (f64, f64) {
    let f = |m: f64| m * (r_target + r_other) / (m * r_target + r_other);
    (f(lo), f(hi))
}

pub fn analyze(
    window: &TimeSeriesWindow,
    config: &CircuitConfig,
    rules: &AnalysisRules,
) -> Result<RuleReport, AnalysisError> {
    let m = window.len();
    if m < 2 {
        return Err(AnalysisError::TooShort(m));
    }
    let half = m / 2;
    let first_half = peak_amplitudes(&window.values[..half]);
    let second_half = peak_amplitudes(&window.values[half..]);
    let whole = peak_amplitudes(&window.values);
    let mut trends = [Trend::Stable; CHANNELS];
    for c in 0..CHANNELS {
        trends[c] = Trend::classify(first_half[c], second_half[c], rules.trend_threshold);
    }

    // Faults are judged on the latest half: with onsets at 0 or M/2 it is
    // entirely post-onset, while a whole-window peak would hide decreases.
    let a = &second_half;
    let r_par_nominal = config.r2 * config.r3 / (config.r2 + config.r3);
    let s1 = a[0] / config.amplitude_nominal;
    let s2 = a[1] / config.amplitude_nominal;
    let r1_est = a[3] / a[5];
    let rp_est = a[4] / a[5];
    let q1 = r1_est / config.r1;
    let qp = rp_est / r_par_nominal;

    let tol = rules.fault_tolerance;
    let deviates = |ratio: f64| (ratio - 1.0).abs() > tol;
    let mut candidates = Vec::new();
    if deviates(s1) {
        candidates.push((FaultTarget::Source1Amplitude, s1));
    }
    if deviates(s2) {
        candidates.push((FaultTarget::Source2Amplitude, s2));
    }
    if deviates(q1) {
        candidates.push((FaultTarget::Load1Resistance, q1));
    }
    if deviates(qp) {
        let slack = 1.0 + rules.hypothesis_slack;
        let within = |(lo, hi): (f64, f64)| qp >= lo / slack && qp <= hi * slack;
        let ranges = rules.multipliers;
        for (target, r_t, r_o) in [
            (FaultTarget::Load2Resistance, config.r2, config.r3),
            (FaultTarget::Load3Resistance, config.r3, config.r2),
        ] {
            let up = parallel_ratio_interval(r_t, r_o, ranges.up.0, ranges.up.1);
            let down = parallel_ratio_interval(r_t, r_o, ranges.down.0, ranges.down.1);
            if within(up) || within(down) {
                candidates.push((target, qp));
            }
        }
        if !candidates.iter().any(|(t, _)| matches!(t, FaultTarget::Load2Resistance | FaultTarget::Load3Resistance)) {
            return Err(AnalysisError::Unexplained);
        }
    }

    let (verdict, direction) = match candidates.as_slice() {
        [] => (FaultTarget::None, Direction::None),
        [(target, ratio)] => (*target, if *ratio > 1.0 { Direction::Increased } else { Direction::Decreased }),
        many => return Err(AnalysisError::AmbiguousVerdict(many.iter().map(|(t, _)| *t).collect())),
    };

    Ok(RuleReport {
        first_half,
        second_half,
        whole,
        trends,
        verdict,
        direction,
        source_ratios: [s1, s2],
        r1_estimate: r1_est,
        r_par_estimate: rp_est,
        amplitude_nominal: config.amplitude_nominal,
        r1_nominal: config.r1,
        r2_nominal: config.r2,
        r3_nominal: config.r3,
        continuation: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{simulate, FaultScenario};

    #[test]
    fn nominal_window_is_normal_and_stable() {
        let cfg = CircuitConfig::default();
        let w = simulate(&cfg, &FaultScenario::nominal(), 256, 1);
        let r = analyze(&w, &cfg, &AnalysisRules::default()).unwrap();
        assert_eq!(r.verdict, FaultTarget::None);
        assert_eq!(r.direction, Direction::None);
        assert!(r.trends.iter().all(|t| *t == Trend::Stable));
    }

    #[test]
    fn sine_amplitude_within_two_percent() {
        // Analytic oracle: a sampled sine's peak |x| is within cos(pi f dt) of A.
        let cfg = CircuitConfig { noise_sigma_rel: 0.0, ..CircuitConfig::default() };
        let w = simulate(&cfg, &FaultScenario::nominal(), 256, 0);
        let r = analyze(&w, &cfg, &AnalysisRules::default()).unwrap();
        let truth = cfg.nominal_amplitudes();
        for c in 0..CHANNELS {
            for est in [r.first_half[c], r.second_half[c]] {
                assert!((est - truth[c]).abs() / truth[c] <= 0.02, "channel {c}: {est} vs {}", truth[c]);
            }
        }
    }

    #[test]
    fn load1_increase_detected() {
        let cfg = CircuitConfig::default();
        let s = FaultScenario { target: FaultTarget::Load1Resistance, multiplier: 1.5, onset_index: 0 };
        let w = simulate(&cfg, &s, 256, 9);
        let r = analyze(&w, &cfg, &AnalysisRules::default()).unwrap();
        assert_eq!(r.verdict, FaultTarget::Load1Resistance);
        assert_eq!(r.direction, Direction::Increased);
        // closed-form current ratio: (r1 + r_par) / (1.5 r1 + r_par)
        let nominal = cfg.nominal_amplitudes();
        let rp = cfg.r2 * cfg.r3 / (cfg.r2 + cfg.r3);
        let expected = (cfg.r1 + rp) / (1.5 * cfg.r1 + rp);
        let measured = r.whole[5] / nominal[5];
        assert!((measured - expected).abs() < 0.03, "{measured} vs {expected}");
    }

    #[test]
    fn mid_window_decrease_reads_as_falling() {
        let cfg = CircuitConfig { noise_sigma_rel: 0.0, ..CircuitConfig::default() };
        let s = FaultScenario { target: FaultTarget::Source2Amplitude, multiplier: 0.6, onset_index: 128 };
        let w = simulate(&cfg, &s, 256, 0);
        let r = analyze(&w, &cfg, &AnalysisRules::default()).unwrap();
        assert_eq!(r.verdict, FaultTarget::Source2Amplitude);
        assert_eq!(r.direction, Direction::Decreased);
        assert_eq!(r.trends[1], Trend::Falling);
        assert_eq!(r.trends[0], Trend::Stable);
    }

    #[test]
    fn symmetric_parallel_loads_are_ambiguous() {
        let cfg = CircuitConfig { r2: 2.0, r3: 2.0, noise_sigma_rel: 0.0, ..CircuitConfig::default() };
        let s = FaultScenario { target: FaultTarget::Load2Resistance, multiplier: 1.8, onset_index: 0 };
        let w = simulate(&cfg, &s, 256, 0);
        match analyze(&w, &cfg, &AnalysisRules::default()) {
            Err(AnalysisError::AmbiguousVerdict(c)) => {
                assert_eq!(c, vec![FaultTarget::Load2Resistance, FaultTarget::Load3Resistance])
            }
            other => panic!("expected ambiguity, got {other:?}"),
        }
    }

    #[test]
    fn parameter_estimate_inverts_parallel_formula() {
        let cfg = CircuitConfig { noise_sigma_rel: 0.0, ..CircuitConfig::default() };
        let s = FaultScenario { target: FaultTarget::Load2Resistance, multiplier: 1.6, onset_index: 0 };
        let w = simulate(&cfg, &s, 256, 0);
        let r = analyze(&w, &cfg, &AnalysisRules::default()).unwrap();
        assert_eq!(r.verdict, FaultTarget::Load2Resistance);
        let (est, nom) = r.parameter_estimate(FaultTarget::Load2Resistance);
        assert!((est - 1.6 * cfg.r2).abs() < 1e-9, "{est}");
        assert_eq!(nom, cfg.r2);
    }
}
