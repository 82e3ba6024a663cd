//! Study state, rebuilt from and persisted to an append-only event log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StudyError};
use crate::model::{CasePayload, ReaderSession, Round, StudyCase, StudyResponse, Tier};

/// One log line: `{ts, type, payload}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLine {
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Event {
    SessionCreated(ReaderSession),
    ResponseSubmitted(StudyResponse),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Answer {
    pub label: String,
    pub confidence: u8,
    pub ts: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Reads every line of an event log.
pub fn read_events(path: &Path) -> Result<Vec<EventLine>> {
    let file = File::open(path).map_err(|e| StudyError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StudyError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| StudyError::CorruptLog {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}

/// Reads a case-set file, one [`StudyCase`] per line.
pub fn read_cases(path: &Path) -> Result<Vec<StudyCase>> {
    let file = File::open(path).map_err(|e| StudyError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StudyError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let case: StudyCase = serde_json::from_str(&line)
            .map_err(|e| StudyError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(case);
    }
    Ok(out)
}

pub struct Study {
    cases: Vec<StudyCase>,
    by_id: BTreeMap<String, usize>,
    sessions: BTreeMap<(String, Round), ReaderSession>,
    tiers: BTreeMap<String, Tier>,
    pub(crate) answers: BTreeMap<(String, String, Round), Answer>,
    log: Option<(File, PathBuf)>,
}

impl Study {
    /// In-memory study with no log.
    pub fn new(cases: Vec<StudyCase>) -> Result<Self> {
        if cases.is_empty() {
            return Err(StudyError::Validation("case set is empty".into()));
        }
        let mut by_id = BTreeMap::new();
        for (i, c) in cases.iter().enumerate() {
            c.validate()?;
            if by_id.insert(c.id.clone(), i).is_some() {
                return Err(StudyError::Validation(format!("duplicate case id {}", c.id)));
            }
        }
        Ok(Self {
            cases,
            by_id,
            sessions: BTreeMap::new(),
            tiers: BTreeMap::new(),
            answers: BTreeMap::new(),
            log: None,
        })
    }

    /// Rebuilds state by applying `events` in order.
    pub fn replay(cases: Vec<StudyCase>, events: &[EventLine]) -> Result<Self> {
        let mut study = Self::new(cases)?;
        for (i, line) in events.iter().enumerate() {
            study.check(&line.event).map_err(|e| StudyError::CorruptLog {
                path: PathBuf::from("<events>"),
                line: i + 1,
                reason: e.to_string(),
            })?;
            study.apply(line);
        }
        Ok(study)
    }

    /// Replays `log_path` if it exists, then appends new events to it.
    pub fn open(cases: Vec<StudyCase>, log_path: &Path) -> Result<Self> {
        let events = if log_path.exists() {
            read_events(log_path)?
        } else {
            Vec::new()
        };
        let mut study = Self::replay(cases, &events).map_err(|e| match e {
            StudyError::CorruptLog { line, reason, .. } => StudyError::CorruptLog {
                path: log_path.to_path_buf(),
                line,
                reason,
            },
            other => other,
        })?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| StudyError::io(log_path, e))?;
        study.log = Some((file, log_path.to_path_buf()));
        Ok(study)
    }

    pub fn cases(&self) -> &[StudyCase] {
        &self.cases
    }

    pub fn case(&self, id: &str) -> Option<&StudyCase> {
        self.by_id.get(id).map(|&i| &self.cases[i])
    }

    pub fn session(&self, reader: &str, round: Round) -> Option<&ReaderSession> {
        self.sessions.get(&(reader.to_string(), round))
    }

    pub(crate) fn tier_of(&self, reader: &str) -> Option<Tier> {
        self.tiers.get(reader).copied()
    }

    pub(crate) fn answer(&self, reader: &str, case_id: &str, round: Round) -> Option<&Answer> {
        self.answers.get(&(reader.to_string(), case_id.to_string(), round))
    }

    pub fn answered(&self, reader: &str, round: Round) -> usize {
        self.cases.iter().filter(|c| self.answer(reader, &c.id, round).is_some()).count()
    }

    pub fn is_complete(&self, reader: &str, round: Round) -> bool {
        self.session(reader, round).is_some() && self.answered(reader, round) == self.cases.len()
    }

    /// Readers who finished both rounds, in name order.
    pub fn completed_readers(&self) -> Vec<String> {
        let readers: BTreeSet<&String> = self.sessions.keys().map(|(r, _)| r).collect();
        readers
            .into_iter()
            .filter(|r| self.is_complete(r, Round::One) && self.is_complete(r, Round::Two))
            .cloned()
            .collect()
    }

    /// Seeded presentation order; rounds draw from separate streams.
    pub fn permutation(&self, seed: u64, round: Round) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(u8::from(round)));
        let mut order: Vec<usize> = (0..self.cases.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Returns the reader's session for `round`, creating it if needed.
    /// Creation needs a tier unless the reader already has one.
    pub fn open_session(&mut self, reader: &str, round: Round, tier: Option<Tier>, seed: Option<u64>) -> Result<ReaderSession> {
        if reader.trim().is_empty() {
            return Err(StudyError::Validation("reader id is empty".into()));
        }
        let known = self.tier_of(reader);
        if let (Some(k), Some(t)) = (known, tier) {
            if k != t {
                return Err(StudyError::Validation(format!("reader {reader} is registered as {k}, not {t}")));
            }
        }
        if let Some(s) = self.session(reader, round) {
            return Ok(s.clone());
        }
        let tier = tier.or(known).ok_or_else(|| {
            StudyError::Validation(format!("tier is required to start reader {reader}"))
        })?;
        let seed = seed.unwrap_or(0);
        let session = ReaderSession {
            reader: reader.to_string(),
            tier,
            round,
            seed,
            order: self.permutation(seed, round),
        };
        self.record(Event::SessionCreated(session.clone()))?;
        Ok(session)
    }

    /// The first unanswered case in the session's order, or `None` when done.
    pub fn next_case(&self, reader: &str, round: Round) -> Result<Option<CasePayload>> {
        let session = self
            .session(reader, round)
            .ok_or_else(|| StudyError::NotFound(format!("no round {round} session for {reader}")))?;
        Ok(session
            .order
            .iter()
            .map(|&i| &self.cases[i])
            .find(|c| self.answer(reader, &c.id, round).is_none())
            .map(|c| CasePayload {
                case_id: c.id.clone(),
                image: c.image.clone(),
                options: c.options.clone(),
                top5: (round == Round::Two).then(|| c.top5.clone()),
            }))
    }

    pub fn submit(&mut self, response: StudyResponse) -> Result<()> {
        self.record(Event::ResponseSubmitted(response))
    }

    fn check(&self, event: &Event) -> Result<()> {
        match event {
            Event::SessionCreated(s) => {
                if self.session(&s.reader, s.round).is_some() {
                    return Err(StudyError::Conflict(format!("round {} session for {} exists", s.round, s.reader)));
                }
                if let Some(k) = self.tier_of(&s.reader) {
                    if k != s.tier {
                        return Err(StudyError::Validation(format!("reader {} tier changed", s.reader)));
                    }
                }
                if s.round == Round::Two && !self.is_complete(&s.reader, Round::One) {
                    return Err(StudyError::Protocol(format!(
                        "reader {} must complete round 1 before round 2",
                        s.reader
                    )));
                }
                let mut sorted = s.order.clone();
                sorted.sort_unstable();
                if sorted != (0..self.cases.len()).collect::<Vec<_>>() {
                    return Err(StudyError::Validation("session order is not a permutation of the cases".into()));
                }
                Ok(())
            }
            Event::ResponseSubmitted(r) => {
                r.validate_confidence()?;
                if self.session(&r.reader, r.round).is_none() {
                    return Err(StudyError::Protocol(format!("no open round {} session for {}", r.round, r.reader)));
                }
                let case = self
                    .case(&r.case_id)
                    .ok_or_else(|| StudyError::NotFound(format!("unknown case {}", r.case_id)))?;
                if !case.options.contains(&r.label) {
                    return Err(StudyError::Validation(format!("{:?} is not an option for case {}", r.label, r.case_id)));
                }
                if self.answer(&r.reader, &r.case_id, r.round).is_some() {
                    return Err(StudyError::Conflict(format!(
                        "{} already answered case {} in round {}",
                        r.reader, r.case_id, r.round
                    )));
                }
                Ok(())
            }
        }
    }

    fn apply(&mut self, line: &EventLine) {
        match &line.event {
            Event::SessionCreated(s) => {
                self.tiers.insert(s.reader.clone(), s.tier);
                self.sessions.insert((s.reader.clone(), s.round), s.clone());
            }
            Event::ResponseSubmitted(r) => {
                self.answers.insert(
                    (r.reader.clone(), r.case_id.clone(), r.round),
                    Answer {
                        label: r.label.clone(),
                        confidence: r.confidence,
                        ts: line.ts,
                    },
                );
            }
        }
    }

    /// Validates, appends to the log (flushed to disk), then applies.
    fn record(&mut self, event: Event) -> Result<()> {
        self.check(&event)?;
        let line = EventLine { ts: now_ms(), event };
        if let Some((file, path)) = &mut self.log {
            let mut text = serde_json::to_string(&line).expect("events serialize");
            text.push('\n');
            file.write_all(text.as_bytes()).map_err(|e| StudyError::io(&*path, e))?;
            file.sync_data().map_err(|e| StudyError::io(&*path, e))?;
        }
        self.apply(&line);
        Ok(())
    }

    /// Wall-clock time of a recorded answer.
    pub fn answered_at(&self, reader: &str, case_id: &str, round: Round) -> Option<u64> {
        self.answer(reader, case_id, round).map(|a| a.ts)
    }
}
