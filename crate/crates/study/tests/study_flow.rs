mod common;

use common::{answer, run_script, six_cases, SCRIPT};
use evalign_study::{
    read_events, report_from_log, study_report, Round, Study, StudyCase, StudyError, StudyResponse, Tier,
};

#[test]
fn hand_fixture_report() {
    let mut study = Study::new(six_cases()).unwrap();
    run_script(&mut study, "r1", Tier::Senior, 7);
    let report = study_report(&study).unwrap();

    let scores: Vec<i64> = report.cases.iter().map(|c| c.top_ranking_score).collect();
    assert_eq!(scores, vec![5, 4, 3, 2, 1, 0]);
    let mods: Vec<i64> = report.cases.iter().map(|c| c.modification_score).collect();
    assert_eq!(mods, vec![1, 1, 0, 0, -1, 0]);

    // x = (5,4,3,2,1,0), y = (1,1,0,0,-1,0): Sxy = 5.5, Sxx = 17.5, Syy = 17/6
    let expected = 5.5 / (17.5f64 * 17.0 / 6.0).sqrt();
    assert!((report.correlation.unwrap() - expected).abs() < 1e-9);

    let r = &report.readers[0];
    assert_eq!(r.tier, Tier::Senior);
    assert!((r.round1_accuracy - 2.0 / 6.0).abs() < 1e-15);
    assert!((r.round2_accuracy - 3.0 / 6.0).abs() < 1e-15);
    assert!((r.round1_mean_confidence - 17.0 / 6.0).abs() < 1e-15);
    assert!((r.round2_mean_confidence - 20.0 / 6.0).abs() < 1e-15);
    assert_eq!(report.changed_answers.incorrect_to_correct, 2);
    assert_eq!(report.changed_answers.other, 1);
    assert_eq!(report.tiers.len(), 1);
    assert_eq!(report.tiers[0].n_readers, 1);
}

#[test]
fn modification_scores_sum_over_readers() {
    let mut study = Study::new(six_cases()).unwrap();
    run_script(&mut study, "r1", Tier::Junior, 1);
    run_script(&mut study, "r2", Tier::Expert, 2);
    let report = study_report(&study).unwrap();
    let mods: Vec<i64> = report.cases.iter().map(|c| c.modification_score).collect();
    assert_eq!(mods, vec![2, 2, 0, 0, -2, 0]);
    assert_eq!(report.tiers.iter().map(|t| t.tier).collect::<Vec<_>>(), vec![Tier::Junior, Tier::Expert]);
}

#[test]
fn two_point_fixture_is_perfectly_correlated() {
    let cases: Vec<StudyCase> = six_cases().into_iter().filter(|c| c.id == "case-1" || c.id == "case-6").collect();
    let mut study = Study::new(cases).unwrap();
    study.open_session("r", Round::One, Some(Tier::Junior), None).unwrap();
    answer(&mut study, "r", Round::One, "case-1", "g", 1);
    answer(&mut study, "r", Round::One, "case-6", "g", 1);
    study.open_session("r", Round::Two, None, None).unwrap();
    answer(&mut study, "r", Round::Two, "case-1", "a", 1);
    answer(&mut study, "r", Round::Two, "case-6", "g", 1);
    let report = study_report(&study).unwrap();
    assert!((report.correlation.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn unchanged_answers_leave_correlation_undefined() {
    let mut study = Study::new(six_cases()).unwrap();
    for round in [Round::One, Round::Two] {
        study.open_session("r", round, Some(Tier::Expert), None).unwrap();
        for c in six_cases() {
            answer(&mut study, "r", round, &c.id, "a", 3);
        }
    }
    let report = study_report(&study).unwrap();
    assert!(report.cases.iter().all(|c| c.modification_score == 0));
    assert_eq!(report.correlation, None);
    assert!(report.correlation_note.is_some());
    assert_eq!(report.readers.len(), 1);
    assert_eq!(report.changed_answers.incorrect_to_correct + report.changed_answers.other, 0);
}

#[test]
fn no_completed_readers_is_an_error() {
    let mut study = Study::new(six_cases()).unwrap();
    assert!(matches!(study_report(&study), Err(StudyError::NoCompletedReaders)));
    study.open_session("r", Round::One, Some(Tier::Junior), None).unwrap();
    answer(&mut study, "r", Round::One, "case-1", "a", 3);
    assert!(matches!(study_report(&study), Err(StudyError::NoCompletedReaders)));
}

#[test]
fn same_seed_same_permutation_and_rounds_differ() {
    let mut study = Study::new(six_cases()).unwrap();
    let a = study.open_session("x", Round::One, Some(Tier::Junior), Some(42)).unwrap();
    let b = study.open_session("y", Round::One, Some(Tier::Junior), Some(42)).unwrap();
    assert_eq!(a.order, b.order);
    let again = study.open_session("x", Round::One, None, Some(99)).unwrap();
    assert_eq!(again.order, a.order);
    assert_ne!(study.permutation(42, Round::One), study.permutation(42, Round::Two));
}

#[test]
fn cases_follow_the_session_order() {
    let mut study = Study::new(six_cases()).unwrap();
    let s = study.open_session("r", Round::One, Some(Tier::Junior), Some(5)).unwrap();
    for &i in &s.order {
        let next = study.next_case("r", Round::One).unwrap().unwrap();
        assert_eq!(next.case_id, six_cases()[i].id);
        assert!(next.top5.is_none());
        answer(&mut study, "r", Round::One, &next.case_id, "a", 3);
    }
    assert!(study.next_case("r", Round::One).unwrap().is_none());
    study.open_session("r", Round::Two, None, Some(5)).unwrap();
    let next = study.next_case("r", Round::Two).unwrap().unwrap();
    assert_eq!(next.top5.unwrap().len(), 5);
}

#[test]
fn round_two_needs_round_one() {
    let mut study = Study::new(six_cases()).unwrap();
    let err = study.open_session("r", Round::Two, Some(Tier::Junior), None).unwrap_err();
    assert!(matches!(err, StudyError::Protocol(_)));
    study.open_session("r", Round::One, Some(Tier::Junior), None).unwrap();
    answer(&mut study, "r", Round::One, "case-1", "a", 3);
    assert!(matches!(study.open_session("r", Round::Two, None, None), Err(StudyError::Protocol(_))));
}

#[test]
fn response_validation() {
    let mut study = Study::new(six_cases()).unwrap();
    let resp = |confidence, label: &str, round| StudyResponse {
        reader: "r".into(),
        case_id: "case-1".into(),
        round,
        label: label.into(),
        confidence,
    };
    assert!(matches!(study.submit(resp(3, "a", Round::One)), Err(StudyError::Protocol(_))));
    study.open_session("r", Round::One, Some(Tier::Junior), None).unwrap();
    assert!(matches!(study.submit(resp(6, "a", Round::One)), Err(StudyError::Validation(_))));
    assert!(matches!(study.submit(resp(0, "a", Round::One)), Err(StudyError::Validation(_))));
    assert!(matches!(study.submit(resp(3, "zz", Round::One)), Err(StudyError::Validation(_))));
    study.submit(resp(3, "a", Round::One)).unwrap();
    assert!(matches!(study.submit(resp(4, "b", Round::One)), Err(StudyError::Conflict(_))));
    let unknown = StudyResponse { case_id: "nope".into(), ..resp(3, "a", Round::One) };
    assert!(matches!(study.submit(unknown), Err(StudyError::NotFound(_))));
}

#[test]
fn tier_is_fixed_per_reader() {
    let mut study = Study::new(six_cases()).unwrap();
    assert!(matches!(study.open_session("r", Round::One, None, None), Err(StudyError::Validation(_))));
    study.open_session("r", Round::One, Some(Tier::Junior), None).unwrap();
    assert!(matches!(
        study.open_session("r", Round::One, Some(Tier::Expert), None),
        Err(StudyError::Validation(_))
    ));
}

#[test]
fn responses_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    {
        let mut study = Study::open(six_cases(), &log).unwrap();
        study.open_session("r", Round::One, Some(Tier::Senior), Some(3)).unwrap();
        answer(&mut study, "r", Round::One, "case-4", "b", 2);
    }
    let mut study = Study::open(six_cases(), &log).unwrap();
    assert_eq!(study.answered("r", Round::One), 1);
    assert!(study.answered_at("r", "case-4", Round::One).is_some());
    let dup = StudyResponse {
        reader: "r".into(),
        case_id: "case-4".into(),
        round: Round::One,
        label: "c".into(),
        confidence: 1,
    };
    assert!(matches!(study.submit(dup), Err(StudyError::Conflict(_))));
    let next = study.next_case("r", Round::One).unwrap().unwrap();
    assert_ne!(next.case_id, "case-4");

    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, vec!["payload", "ts", "type"]);
    assert_eq!(first["type"], "session_created");
}

#[test]
fn replay_reproduces_report_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let live = {
        let mut study = Study::open(six_cases(), &log).unwrap();
        run_script(&mut study, "r1", Tier::Junior, 1);
        run_script(&mut study, "r2", Tier::Expert, 2);
        study.open_session("r3", Round::One, Some(Tier::Senior), Some(3)).unwrap();
        answer(&mut study, "r3", Round::One, "case-2", "b", 5);
        study_report(&study).unwrap().to_json()
    };
    let replayed = report_from_log(six_cases(), &log).unwrap().to_json();
    assert_eq!(live.as_bytes(), replayed.as_bytes());
    let events = read_events(&log).unwrap();
    assert_eq!(events.len(), 2 * (2 + 12) + 2);
    let again = study_report(&Study::replay(six_cases(), &events).unwrap()).unwrap().to_json();
    assert_eq!(again, live);
}

#[test]
fn corrupt_log_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    std::fs::write(&log, "{\"ts\":1,\"type\":\"session_created\"\n").unwrap();
    assert!(matches!(Study::open(six_cases(), &log), Err(StudyError::CorruptLog { line: 1, .. })));
}

#[test]
fn completion_means_every_case_answered_twice() {
    let mut study = Study::new(six_cases()).unwrap();
    run_script(&mut study, "r", Tier::Junior, 0);
    assert_eq!(study.answered("r", Round::One), SCRIPT.len());
    assert_eq!(study.answered("r", Round::Two), SCRIPT.len());
    assert_eq!(study.completed_readers(), vec!["r".to_string()]);
}
