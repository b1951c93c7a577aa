use proptest::prelude::*;
use serde::Deserialize;

use tsreason_core::circuit::CHANNELS;
use tsreason_core::dataset::{TaskKind, CANONICAL_LABELS};
use tsreason_core::eval::*;

#[derive(Deserialize)]
struct Labeled {
    response: String,
    label: Option<String>,
}

fn fixture() -> Vec<Labeled> {
    include_str!("fixtures/ca_hand_labeled.jsonl").lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn matcher_agrees_with_every_hand_label() {
    let rows = fixture();
    assert_eq!(rows.len(), 50);
    let agree = rows.iter().filter(|r| extract_conclusion(&r.response) == r.label).count();
    for r in &rows {
        assert_eq!(extract_conclusion(&r.response), r.label, "{:?}", r.response);
    }
    assert_eq!(agree, 50);
}

fn record(id: usize, task: TaskKind, reference: &str, said: &str) -> EvalRecord {
    EvalRecord::new(format!("s{id:03}"), task, "q", reference, format!("Conclusion: {said}"), [1.0; CHANNELS])
}

#[test]
fn average_is_the_unweighted_task_mean() {
    let targets = [(TaskKind::TrendAnalysis, 958), (TaskKind::TrendForecast, 960), (TaskKind::FaultJudgement, 658),
        (TaskKind::FaultDiagnosis, 779), (TaskKind::FaultAnalysis, 765)];
    let mut recs = Vec::new();
    for (task, correct) in targets {
        for i in 0..1000 {
            recs.push(record(recs.len(), task, "stable", if i < correct { "stable" } else { "rising" }));
        }
    }
    let rep = score_ca(&recs, &TaskKind::EVAL).unwrap();
    assert!((rep.average - 0.824).abs() < 5e-4, "{}", rep.average);
    assert_eq!(rep.per_task[&TaskKind::FaultJudgement].ca, 0.658);
}

#[test]
fn missing_conclusions_score_zero() {
    let recs: Vec<_> = (0..3)
        .map(|i| EvalRecord::new(i.to_string(), TaskKind::TrendAnalysis, "q", "rising", "no marker here", [0.0; CHANNELS]))
        .collect();
    assert_eq!(score_ca(&recs, &[TaskKind::TrendAnalysis]).unwrap().average, 0.0);
}

fn reasoning_records(per_task: usize) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for task in TaskKind::REASONING {
        for _ in 0..per_task {
            out.push(record(out.len(), task, "load 2", "load 2"));
        }
    }
    out
}

#[test]
fn review_bundle_has_25_rows_per_reasoning_task() {
    let recs = reasoning_records(40);
    let rows = export_review_bundle(&recs, 25, 9).unwrap();
    assert_eq!(rows.len(), 75);
    for task in TaskKind::REASONING {
        assert_eq!(rows.iter().filter(|r| r.task == task).count(), 25);
    }
    assert_eq!(rows, export_review_bundle(&recs, 25, 9).unwrap());
    assert_ne!(rows, export_review_bundle(&recs, 25, 10).unwrap());
    assert!(rows.iter().all(|r| r.ref_amplitudes.split(';').count() == CHANNELS));
    assert!(rows.iter().all(|r| r.perception_ok.is_none() && r.logic_ok.is_none() && r.conclusion_ok.is_none()));
    let err = export_review_bundle(&reasoning_records(10), 25, 9).unwrap_err();
    assert!(matches!(err, EvalError::InsufficientRecords { needed: 25, available: 10, .. }));
}

#[test]
fn review_sheet_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("review.csv");
    let rows = export_review_bundle(&reasoning_records(3), 2, 1).unwrap();
    write_review_csv(&path, &rows).unwrap();
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(
        header,
        "id,task,question,response,ref_conclusion,ref_amplitudes,perception_ok,logic_ok,conclusion_ok"
    );
    assert_eq!(read_review_csv(&path).unwrap(), rows);
    assert!(matches!(compute_lra_dr(&rows), Err(EvalError::MissingAnnotation { .. })));
}

#[test]
fn lra_and_dr_from_synthetic_annotations() {
    // perception, logic, conclusion
    let sheet = "\
id,task,question,response,ref_conclusion,ref_amplitudes,perception_ok,logic_ok,conclusion_ok
a,fault_judgement,q,r,normal,1;1;1;1;1;1,true,true,true
b,fault_judgement,q,r,normal,1;1;1;1;1;1,yes,no,yes
c,fault_diagnosis,q,r,load 2,1;1;1;1;1;1,0,1,1
d,fault_diagnosis,q,r,load 2,1;1;1;1;1;1,false,true,false
e,fault_analysis,q,r,rising,1;1;1;1;1;1,TRUE,TRUE,TRUE
f,fault_analysis,q,r,rising,1;1;1;1;1;1,n,n,n
g,fault_analysis,q,r,rising,1;1;1;1;1;1,y,y,n
h,fault_analysis,q,r,rising,1;1;1;1;1;1,t,t,t
";
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("annotated.csv");
    std::fs::write(&path, sheet).unwrap();
    let m = compute_lra_dr(&read_review_csv(&path).unwrap()).unwrap();
    // Sound rows: a, e, h. Deceptive rows: b, c.
    assert_eq!(m.lra, 3.0 / 8.0);
    assert_eq!(m.dr, 2.0 / 8.0);
    assert_eq!(m.conclusion_rate, 5.0 / 8.0);
    assert!(m.dr <= m.conclusion_rate);

    let flags = |p, l, c| ReviewRow {
        id: "x".into(),
        task: TaskKind::FaultJudgement,
        question: String::new(),
        response: String::new(),
        ref_conclusion: String::new(),
        ref_amplitudes: String::new(),
        perception_ok: Some(p),
        logic_ok: Some(l),
        conclusion_ok: Some(c),
    };
    let all_good = vec![flags(true, true, true); 4];
    let m = compute_lra_dr(&all_good).unwrap();
    assert_eq!((m.lra, m.dr), (1.0, 0.0));
    let one_deceptive = vec![flags(true, true, true), flags(true, true, true), flags(true, true, true), flags(true, false, true)];
    assert_eq!(compute_lra_dr(&one_deceptive).unwrap().dr, 0.25);
    let neither = compute_lra_dr(&[flags(false, true, false)]).unwrap();
    assert_eq!((neither.lra, neither.dr), (0.0, 0.0));
    std::fs::write(&path, sheet.replace("a,fault_judgement,q,r,normal,1;1;1;1;1;1,true,true,true", "a,fault_judgement,q,r,normal,1,maybe,true,true")).unwrap();
    assert!(matches!(read_review_csv(&path), Err(EvalError::BadAnnotation { .. })));
}

fn run(seed: u64, hits: [usize; 3]) -> SeedRun {
    let mut records = Vec::new();
    for (task, h) in TaskKind::REASONING.into_iter().zip(hits) {
        for i in 0..10 {
            records.push(record(records.len(), task, "load 1", if i < h { "load 1" } else { "load 2" }));
        }
    }
    SeedRun { seed, records }
}

#[test]
fn ablation_promotions() {
    let same = ablation_report("tokens", &[run(1, [5, 6, 7])], "linear", &[run(1, [5, 6, 7])]).unwrap();
    assert!(same.mean.iter().all(|t| t.promotion == Some(0.0)));
    assert_eq!(same.wins, 0);

    let a = [run(1, [8, 8, 8]), run(2, [6, 6, 6]), run(3, [2, 2, 2])];
    let b = [run(1, [4, 4, 4]), run(2, [5, 5, 5]), run(3, [3, 3, 3])];
    let rep = ablation_report("tokens", &a, "linear", &b).unwrap();
    assert_eq!(rep.seeds.len(), 3);
    assert_eq!(rep.wins, 2);
    assert!((rep.seeds[0].promotion.unwrap() - 1.0).abs() < 1e-12);
    assert!((rep.mean_reasoning_a - 16.0 / 30.0).abs() < 1e-12);
    let text = rep.to_text();
    assert!(text.contains("100.0%") && text.contains("wins 2 of 3"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ablation.csv");
    rep.write_csv(&csv).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 3 * 3 + 3);

    let mut other = run(1, [5, 5, 5]);
    other.records[0].id = "elsewhere".into();
    assert!(matches!(ablation_report("a", &[run(1, [5, 5, 5])], "b", &[other]), Err(EvalError::SplitMismatch(_))));
}

#[test]
fn paper_scale_promotion_value() {
    let p = promotion(71.7, 54.1).unwrap();
    assert_eq!(format!("{:.1}", p * 100.0), "32.5");
}

proptest! {
    #[test]
    fn extraction_is_total_and_idempotent(text in "[ -~\n]{0,80}", label in 0usize..CANONICAL_LABELS.len(), prefix in "[a-z .\n]{0,30}") {
        let first = extract_conclusion(&text);
        if let Some(l) = &first {
            prop_assert!(CANONICAL_LABELS.contains(&l.as_str()));
            prop_assert_eq!(extract_conclusion(&format!("Conclusion: {l}")), Some(l.clone()));
        }
        let l = CANONICAL_LABELS[label];
        let framed = format!("{prefix}\nConclusion: {l}.");
        prop_assert_eq!(extract_conclusion(&framed), Some(l.to_string()));
    }
}
