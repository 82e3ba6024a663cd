//! Backend for a two-round reading study.
//!
//! Readers first label every case unassisted (round 1), then again with the
//! model's top five suggestions visible (round 2). Each session and answer is
//! one line in an append-only JSON event log; replaying the log rebuilds the
//! state, and the report is a pure function of that state.

mod error;
pub mod http;
pub mod model;
mod report;
mod store;

pub use error::{Result, StudyError};
pub use model::{
    modification_score, top_ranking_score, CasePayload, ReaderSession, Round, StudyCase, StudyResponse, Tier,
};
pub use report::{study_report, AnswerChanges, CaseSummary, ReaderSummary, Report, TierSummary};
pub use store::{read_cases, read_events, Event, EventLine, Study};

/// Replays a log from empty and reports on it.
pub fn report_from_log(cases: Vec<StudyCase>, log: &std::path::Path) -> Result<Report> {
    let events = read_events(log)?;
    study_report(&Study::replay(cases, &events)?)
}
