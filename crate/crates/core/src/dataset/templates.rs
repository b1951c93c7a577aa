//! Question banks, chain-of-thought answer templates and the paraphrase bank.

use super::analysis::{relative_change, RuleReport, Trend};
use super::{QaSample, SampleMeta, TaskKind};
use crate::circuit::{Channel, FaultTarget, TimeSeriesWindow, CHANNELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("template for {kind:?} needs report field `{field}`, which is absent")]
    TemplateSlotMissing { kind: TaskKind, field: &'static str },
}

/// Marker that opens the final answer line.
pub const CONCLUSION_MARKER: &str = "Conclusion:";

fn question_bank(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::PretrainAnomaly | TaskKind::PretrainTemporal => &[""],
        TaskKind::TrendAnalysis => &[
            "What is the trend of the {channel} in this window?",
            "Describe how the {channel} amplitude changes across the window.",
            "Is the {channel} rising, falling or stable?",
        ],
        TaskKind::TrendForecast => &[
            "How will the {channel} amplitude develop in the next window?",
            "Forecast the trend of the {channel} for the coming window.",
            "Predict whether the {channel} will be rising, falling or stable next.",
        ],
        TaskKind::FaultJudgement => &[
            "Is the circuit operating normally?",
            "Judge whether a fault exists in the circuit.",
            "Does the circuit show an abnormal condition?",
        ],
        TaskKind::FaultDiagnosis => &[
            "Which component of the circuit is faulty?",
            "Diagnose the faulty component, if any.",
            "Locate the component whose parameter has changed.",
        ],
        TaskKind::FaultAnalysis => &[
            "Analyze the {component}. Has its {parameter} risen, fallen or stayed stable?",
            "How has the {parameter} of {component} changed?",
            "Examine {component} and tell whether its {parameter} is rising, falling or stable.",
        ],
    }
}

/// Deterministic stand-in for LLM query augmentation: each pattern wraps the
/// question without touching its slot words.
#[derive(Debug, Clone, PartialEq)]
pub struct ParaphraseBank {
    patterns: Vec<&'static str>,
}

impl ParaphraseBank {
    pub fn for_task(kind: TaskKind) -> Self {
        let specific: &[&str] = match kind {
            TaskKind::PretrainAnomaly | TaskKind::PretrainTemporal => &[],
            TaskKind::TrendAnalysis => &["Looking only at the recorded window, {q}"],
            TaskKind::TrendForecast => &["Assume the circuit keeps its latest state. {q}"],
            TaskKind::FaultJudgement => &["An operator needs a quick health check. {q}"],
            TaskKind::FaultDiagnosis => &["Apply the circuit laws to the measurements. {q}"],
            TaskKind::FaultAnalysis => &["Focus on a single component. {q}"],
        };
        let mut patterns = vec![
            "{q}",
            "{q} Please reason step by step.",
            "Look at the six measured variables. {q}",
            "As a circuit analyst, answer the following. {q}",
            "{q} Finish with a conclusion line.",
        ];
        if matches!(kind, TaskKind::PretrainAnomaly | TaskKind::PretrainTemporal) {
            patterns.truncate(1);
        }
        patterns.extend_from_slice(specific);
        Self { patterns }
    }

    /// Keep only the first `n` patterns (the first is always the identity).
    pub fn truncated(mut self, n: usize) -> Self {
        self.patterns.truncate(n.max(1));
        self
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn augment(&self, question: &str, seed: u64) -> String {
        if question.is_empty() {
            return String::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pattern = self.patterns[rng.random_range(0..self.patterns.len())];
        pattern.replace("{q}", question)
    }
}

pub fn augment_question(kind: TaskKind, question: &str, seed: u64) -> String {
    ParaphraseBank::for_task(kind).augment(question, seed)
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

fn pct(x: f64) -> String {
    format!("{:+.1}", 100.0 * x)
}

fn threshold_phrase(rel: f64, threshold: f64) -> &'static str {
    if rel.abs() > threshold {
        "beyond"
    } else {
        "within"
    }
}

fn perception_latest(report: &RuleReport) -> String {
    let a = &report.second_half;
    format!(
        "Perception: in the latest half the peak values are Voltage Source 1 at {} V, Voltage Source 2 at {} V, \
         Load 1 voltage {} V, Loads 2 and 3 voltage {} V, current {} A.",
        fmt2(a[0]),
        fmt2(a[1]),
        fmt2(a[3]),
        fmt2(a[4]),
        fmt2(a[5])
    )
}

/// Ohm's-law readout of the sources and loads, shared by the fault tasks.
fn circuit_law_reasoning(report: &RuleReport) -> String {
    format!(
        "Reasoning: the sources run at {} and {} of nominal. Load 1 voltage over current gives {} ohm against {} ohm. \
         Loads 2 and 3 voltage over current gives {} ohm against {} ohm.",
        fmt2(report.source_ratios[0]),
        fmt2(report.source_ratios[1]),
        fmt2(report.r1_estimate),
        fmt2(report.r1_nominal),
        fmt2(report.r_par_estimate),
        fmt2(report.r_par_nominal()),
    )
}

fn deviation_sentence(report: &RuleReport) -> String {
    match report.verdict {
        FaultTarget::None => "Every value is within 10 percent of nominal.".to_string(),
        FaultTarget::Load2Resistance | FaultTarget::Load3Resistance => format!(
            "Only the parallel resistance moved, to {} of nominal, which only {} can produce.",
            fmt2(report.r_par_estimate / report.r_par_nominal()),
            report.verdict.component_name()
        ),
        t => format!("The {} of {} deviates from nominal.", t.parameter_name(), t.component_name()),
    }
}

fn trend_word(t: Trend) -> &'static str {
    t.label()
}

fn direction_word(report: &RuleReport) -> &'static str {
    match report.direction {
        super::analysis::Direction::Increased => "increased",
        super::analysis::Direction::Decreased => "decreased",
        super::analysis::Direction::None => "unchanged",
    }
}

/// Slots chosen for a sample: which variable or component the question targets.
#[derive(Debug, Clone, Copy)]
struct Slots {
    channel: Channel,
    component: FaultTarget,
    question_index: usize,
}

fn choose_slots(kind: TaskKind, report: &RuleReport, rng: &mut ChaCha8Rng) -> Slots {
    let channel = Channel::ALL[rng.random_range(0..CHANNELS)];
    let component = if report.verdict != FaultTarget::None && rng.random_bool(0.5) {
        report.verdict
    } else {
        FaultTarget::FAULTS[rng.random_range(0..FaultTarget::FAULTS.len())]
    };
    let question_index = rng.random_range(0..question_bank(kind).len());
    Slots { channel, component, question_index }
}

/// Render one sample. The output is a pure function of the arguments.
pub fn render_sample(
    id: &str,
    kind: TaskKind,
    window: &TimeSeriesWindow,
    report: &RuleReport,
    threshold: f64,
    seed: u64,
) -> Result<QaSample, TemplateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = choose_slots(kind, report, &mut rng);
    let question = question_bank(kind)[slots.question_index]
        .replace("{channel}", slots.channel.display_name())
        .replace("{component}", slots.component.component_name())
        .replace("{parameter}", slots.component.parameter_name());

    let (body, conclusion) = match kind {
        TaskKind::PretrainTemporal => {
            let mut parts = Vec::with_capacity(CHANNELS);
            for ch in Channel::ALL {
                let c = ch.index();
                parts.push(format!(
                    "{} {} then {} {}, {}",
                    ch.display_name(),
                    fmt2(report.first_half[c]),
                    fmt2(report.second_half[c]),
                    ch.unit(),
                    trend_word(report.trends[c])
                ));
            }
            let body = format!("Peak values by half window: {}.", parts.join("; "));
            (body, report.trends[Channel::Current.index()].label().to_string())
        }
        TaskKind::PretrainAnomaly => {
            let state = match report.verdict {
                FaultTarget::None => "All components run at nominal parameters.".to_string(),
                t => {
                    let (est, nom) = report.parameter_estimate(t);
                    format!(
                        "The {} of {} {} from {} to {}.",
                        t.parameter_name(),
                        t.component_name(),
                        direction_word(report),
                        fmt2(nom),
                        fmt2(est)
                    )
                }
            };
            (format!("{} {}", perception_latest(report), state), report.verdict.label().to_string())
        }
        TaskKind::TrendAnalysis => {
            let c = slots.channel.index();
            let (f, s) = (report.first_half[c], report.second_half[c]);
            let rel = relative_change(f, s);
            let body = format!(
                "Perception: the {} peak value is {} {u} in the first half and {} {u} in the second half.\n\
                 Reasoning: the change is {} percent, {} the 5 percent threshold.",
                slots.channel.display_name(),
                fmt2(f),
                fmt2(s),
                pct(rel),
                threshold_phrase(rel, threshold),
                u = slots.channel.unit()
            );
            (body, report.trends[c].label().to_string())
        }
        TaskKind::TrendForecast => {
            let cont = report
                .continuation
                .ok_or(TemplateError::TemplateSlotMissing { kind, field: "continuation" })?;
            let c = slots.channel.index();
            let (f, s, next) = (report.first_half[c], report.second_half[c], cont[c]);
            let rel = relative_change(f, next);
            let body = format!(
                "Perception: the {} peak value opens at {} {u} and reads {} {u} in the latest half.\n\
                 Reasoning: the latest level persists, so the next window sits {} percent from the opening level, \
                 {} the 5 percent threshold.",
                slots.channel.display_name(),
                fmt2(f),
                fmt2(s),
                pct(rel),
                threshold_phrase(rel, threshold),
                u = slots.channel.unit()
            );
            (body, Trend::classify(f, next, threshold).label().to_string())
        }
        TaskKind::FaultJudgement => {
            let body =
                format!("{}\n{} {}", perception_latest(report), circuit_law_reasoning(report), deviation_sentence(report));
            let label = if report.verdict == FaultTarget::None { "normal" } else { "abnormal" };
            (body, label.to_string())
        }
        TaskKind::FaultDiagnosis => {
            let body =
                format!("{}\n{} {}", perception_latest(report), circuit_law_reasoning(report), deviation_sentence(report));
            (body, report.verdict.label().to_string())
        }
        TaskKind::FaultAnalysis => {
            let q = slots.component;
            let (est, nom) = report.parameter_estimate(q);
            let trend = if report.verdict == q { report.direction.as_trend() } else { Trend::Stable };
            let faulty = match report.verdict {
                FaultTarget::None => "no component".to_string(),
                t => t.component_name().to_string(),
            };
            let body = format!(
                "{}\n{} The readings point to {}, so the {} of {} is {} against nominal {}.",
                perception_latest(report),
                circuit_law_reasoning(report),
                faulty,
                q.parameter_name(),
                q.component_name(),
                fmt2(est),
                fmt2(nom)
            );
            (body, trend.label().to_string())
        }
    };

    let answer = format!("{body}\n{CONCLUSION_MARKER} {conclusion}");
    Ok(QaSample {
        id: id.to_string(),
        task: kind,
        series: window.values.clone(),
        question,
        answer,
        conclusion,
        meta: SampleMeta {
            target: window.meta.scenario.target,
            multiplier: window.meta.scenario.multiplier,
            onset: window.meta.scenario.onset_index,
            seed: window.meta.seed,
        },
    })
}
