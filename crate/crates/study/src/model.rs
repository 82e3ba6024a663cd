use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StudyError};

pub const TOP_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Five years of experience or less.
    Junior,
    /// Five to ten years.
    Senior,
    /// More than ten years.
    Expert,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Junior => "junior",
            Tier::Senior => "senior",
            Tier::Expert => "expert",
        })
    }
}

impl std::str::FromStr for Tier {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "junior" => Ok(Tier::Junior),
            "senior" => Ok(Tier::Senior),
            "expert" => Ok(Tier::Expert),
            other => Err(StudyError::Validation(format!("unknown tier {other:?}"))),
        }
    }
}

/// Round 1 is unassisted; round 2 shows the model's top five.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Round {
    One,
    Two,
}

impl TryFrom<u8> for Round {
    type Error = StudyError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Round::One),
            2 => Ok(Round::Two),
            other => Err(StudyError::Validation(format!("round must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Round> for u8 {
    fn from(r: Round) -> u8 {
        match r {
            Round::One => 1,
            Round::Two => 2,
        }
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyCase {
    pub id: String,
    /// Synthetic id or file path, resolved by the image endpoint.
    pub image: String,
    pub options: Vec<String>,
    pub truth: String,
    /// Model suggestions, best first.
    pub top5: Vec<String>,
}

impl StudyCase {
    pub fn validate(&self) -> Result<()> {
        if !self.options.contains(&self.truth) {
            return Err(StudyError::Validation(format!("case {}: truth {:?} is not an option", self.id, self.truth)));
        }
        let distinct: BTreeSet<&String> = self.top5.iter().collect();
        if self.top5.len() != TOP_K || distinct.len() != TOP_K {
            return Err(StudyError::Validation(format!("case {}: top5 must hold {TOP_K} distinct labels", self.id)));
        }
        if let Some(l) = self.top5.iter().find(|l| !self.options.contains(l)) {
            return Err(StudyError::Validation(format!("case {}: suggestion {l:?} is not an option", self.id)));
        }
        Ok(())
    }

    /// 5 for the truth at rank 1 down to 1 at rank 5; 0 when absent.
    pub fn top_ranking_score(&self) -> i64 {
        top_ranking_score(&self.top5, &self.truth)
    }
}

pub fn top_ranking_score(top5: &[String], truth: &str) -> i64 {
    top5.iter()
        .take(TOP_K)
        .position(|l| l == truth)
        .map_or(0, |rank| (TOP_K - rank) as i64)
}

/// +1 for wrong → right between rounds, −1 for right → wrong, else 0.
pub fn modification_score(round1_correct: bool, round2_correct: bool) -> i64 {
    match (round1_correct, round2_correct) {
        (false, true) => 1,
        (true, false) => -1,
        _ => 0,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyResponse {
    pub reader: String,
    pub case_id: String,
    pub round: Round,
    pub label: String,
    pub confidence: u8,
}

impl StudyResponse {
    pub fn validate_confidence(&self) -> Result<()> {
        if (1..=5).contains(&self.confidence) {
            Ok(())
        } else {
            Err(StudyError::Validation(format!("confidence must be 1-5, got {}", self.confidence)))
        }
    }
}

/// One reader's pass through the case set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderSession {
    pub reader: String,
    pub tier: Tier,
    pub round: Round,
    pub seed: u64,
    /// Case indices in presentation order.
    pub order: Vec<usize>,
}

/// What a reader sees for one case. `top5` is present only in round 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasePayload {
    pub case_id: String,
    pub image: String,
    pub options: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<Vec<String>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ranking_points() {
        let top = labels(&["a", "b", "c", "d", "e"]);
        assert_eq!(top_ranking_score(&top, "a"), 5);
        assert_eq!(top_ranking_score(&top, "c"), 3);
        assert_eq!(top_ranking_score(&top, "e"), 1);
        assert_eq!(top_ranking_score(&top, "z"), 0);
    }

    #[test]
    fn modification_mapping() {
        assert_eq!(modification_score(false, true), 1);
        assert_eq!(modification_score(true, false), -1);
        assert_eq!(modification_score(true, true), 0);
        assert_eq!(modification_score(false, false), 0);
    }

    #[test]
    fn case_validation() {
        let mut c = StudyCase {
            id: "c1".into(),
            image: "img-1".into(),
            options: labels(&["a", "b", "c", "d", "e", "f"]),
            truth: "f".into(),
            top5: labels(&["a", "b", "c", "d", "e"]),
        };
        assert!(c.validate().is_ok());
        c.top5[4] = "a".into();
        assert!(c.validate().is_err());
        c.top5[4] = "e".into();
        c.truth = "x".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn round_wire_format() {
        assert_eq!(serde_json::to_string(&Round::Two).unwrap(), "2");
        assert!(serde_json::from_str::<Round>("3").is_err());
    }
}
