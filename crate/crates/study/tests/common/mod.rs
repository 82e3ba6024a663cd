#![allow(dead_code)]

use evalign_study::{Round, Study, StudyCase, StudyResponse, Tier};

pub const LABELS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Six cases whose truths sit at suggestion ranks 1..5 and outside the top five.
pub fn six_cases() -> Vec<StudyCase> {
    let top5 = strings(&["a", "b", "c", "d", "e"]);
    let truths = ["a", "b", "c", "d", "e", "h"];
    truths
        .iter()
        .enumerate()
        .map(|(i, t)| StudyCase {
            id: format!("case-{}", i + 1),
            image: format!("img-{}", i + 1),
            options: strings(&LABELS),
            truth: t.to_string(),
            top5: top5.clone(),
        })
        .collect()
}

/// (round 1 label, round 1 confidence, round 2 label, round 2 confidence)
/// per case: flips +1, +1, 0 (right twice), 0 (same wrong), −1, 0 (same wrong).
pub const SCRIPT: [(&str, u8, &str, u8); 6] = [
    ("g", 2, "a", 4),
    ("h", 3, "b", 5),
    ("c", 4, "c", 4),
    ("a", 1, "a", 2),
    ("e", 5, "a", 3),
    ("g", 2, "g", 2),
];

pub fn answer(study: &mut Study, reader: &str, round: Round, case_id: &str, label: &str, confidence: u8) {
    study
        .submit(StudyResponse {
            reader: reader.into(),
            case_id: case_id.into(),
            round,
            label: label.into(),
            confidence,
        })
        .unwrap();
}

/// Runs one reader through both rounds following [`SCRIPT`].
pub fn run_script(study: &mut Study, reader: &str, tier: Tier, seed: u64) {
    study.open_session(reader, Round::One, Some(tier), Some(seed)).unwrap();
    for (i, (l1, c1, _, _)) in SCRIPT.iter().enumerate() {
        answer(study, reader, Round::One, &format!("case-{}", i + 1), l1, *c1);
    }
    study.open_session(reader, Round::Two, None, Some(seed)).unwrap();
    for (i, (_, _, l2, c2)) in SCRIPT.iter().enumerate() {
        answer(study, reader, Round::Two, &format!("case-{}", i + 1), l2, *c2);
    }
}
