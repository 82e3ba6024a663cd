use std::collections::BTreeMap;

use evalign_core::inference::pearson;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StudyError};
use crate::model::{modification_score, Round, Tier};
use crate::store::Study;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderSummary {
    pub reader: String,
    pub tier: Tier,
    pub round1_accuracy: f64,
    pub round2_accuracy: f64,
    pub round1_mean_confidence: f64,
    pub round2_mean_confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierSummary {
    pub tier: Tier,
    pub n_readers: usize,
    pub round1_accuracy: f64,
    pub round2_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub top_ranking_score: i64,
    /// Summed over completed readers.
    pub modification_score: i64,
    pub round1_correct: usize,
    pub round2_correct: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerChanges {
    pub incorrect_to_correct: usize,
    pub other: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_cases: usize,
    pub n_completed_readers: usize,
    pub readers: Vec<ReaderSummary>,
    pub tiers: Vec<TierSummary>,
    pub round1_mean_confidence: f64,
    pub round2_mean_confidence: f64,
    pub cases: Vec<CaseSummary>,
    /// Pearson r of per-case top-ranking score against summed modification
    /// score; `None` when either side has no variance.
    pub correlation: Option<f64>,
    pub correlation_note: Option<String>,
    pub changed_answers: AnswerChanges,
}

impl Report {
    /// Stable pretty JSON, identical for identical state.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates over readers who completed both rounds.
pub fn study_report(study: &Study) -> Result<Report> {
    let readers = study.completed_readers();
    if readers.is_empty() {
        return Err(StudyError::NoCompletedReaders);
    }
    let cases = study.cases();
    let correct = |reader: &str, case_idx: usize, round: Round| -> bool {
        let case = &cases[case_idx];
        study
            .answer(reader, &case.id, round)
            .is_some_and(|a| a.label == case.truth)
    };
    let confidence = |reader: &str, round: Round| -> f64 {
        mean(cases.iter().filter_map(|c| study.answer(reader, &c.id, round)).map(|a| f64::from(a.confidence)))
    };
    let n = cases.len() as f64;

    let mut summaries = Vec::with_capacity(readers.len());
    for r in &readers {
        let acc = |round| (0..cases.len()).filter(|&i| correct(r, i, round)).count() as f64 / n;
        summaries.push(ReaderSummary {
            reader: r.clone(),
            tier: study.tier_of(r).expect("completed readers have a tier"),
            round1_accuracy: acc(Round::One),
            round2_accuracy: acc(Round::Two),
            round1_mean_confidence: confidence(r, Round::One),
            round2_mean_confidence: confidence(r, Round::Two),
        });
    }

    let mut by_tier: BTreeMap<Tier, Vec<&ReaderSummary>> = BTreeMap::new();
    for s in &summaries {
        by_tier.entry(s.tier).or_default().push(s);
    }
    let tiers = by_tier
        .into_iter()
        .map(|(tier, group)| TierSummary {
            tier,
            n_readers: group.len(),
            round1_accuracy: mean(group.iter().map(|s| s.round1_accuracy)),
            round2_accuracy: mean(group.iter().map(|s| s.round2_accuracy)),
        })
        .collect();

    let mut changes = AnswerChanges::default();
    let mut case_rows = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let mut modification = 0;
        let (mut c1, mut c2) = (0, 0);
        for r in &readers {
            let (a, b) = (correct(r, i, Round::One), correct(r, i, Round::Two));
            modification += modification_score(a, b);
            c1 += usize::from(a);
            c2 += usize::from(b);
            let first = study.answer(r, &case.id, Round::One).expect("complete");
            let second = study.answer(r, &case.id, Round::Two).expect("complete");
            if first.label != second.label {
                if !a && b {
                    changes.incorrect_to_correct += 1;
                } else {
                    changes.other += 1;
                }
            }
        }
        case_rows.push(CaseSummary {
            case_id: case.id.clone(),
            top_ranking_score: case.top_ranking_score(),
            modification_score: modification,
            round1_correct: c1,
            round2_correct: c2,
        });
    }

    let xs: Vec<f64> = case_rows.iter().map(|c| c.top_ranking_score as f64).collect();
    let ys: Vec<f64> = case_rows.iter().map(|c| c.modification_score as f64).collect();
    let (correlation, correlation_note) = match pearson(&xs, &ys) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(format!("correlation undefined: {e}"))),
    };

    let all_conf = |round| {
        mean(readers.iter().flat_map(|r| {
            cases
                .iter()
                .filter_map(move |c| study.answer(r, &c.id, round))
                .map(|a| f64::from(a.confidence))
        }))
    };
    Ok(Report {
        n_cases: cases.len(),
        n_completed_readers: readers.len(),
        readers: summaries,
        tiers,
        round1_mean_confidence: all_conf(Round::One),
        round2_mean_confidence: all_conf(Round::Two),
        cases: case_rows,
        correlation,
        correlation_note,
        changed_answers: changes,
    })
}
