//! Evaluation metrics over per-sample prediction logs.
//!
//! Every evaluated sample contributes one [`PredictionRow`]: the session at
//! which the evaluation happened, the sample's true and predicted class, and
//! the session that introduced the true class. All metrics are pure functions
//! of these rows, so a run's quality can be re-derived from its prediction
//! log alone.
//!
//! Conventions:
//! - micro accuracy counts samples; macro accuracy averages per-class
//!   accuracies so small late-session classes weigh as much as large base
//!   classes;
//! - novel-class accuracy at session `b` restricts to rows whose true class
//!   was introduced at `b`, then averages those per-session values (by
//!   default over the incremental sessions only, since every base-session row
//!   is trivially "novel" there);
//! - the dropping rate is the relative accuracy loss from the first to the
//!   last session; the final score is the harmonic mean of last-session
//!   accuracy and novel-class accuracy.
//!
//! All accuracies are fractions in `[0, 1]`; [`render_table`] converts to
//! percentages only for display.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmark::SessionSchedule;
use crate::error::{Error, Result};

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    /// Session at which this evaluation ran (1-based).
    pub session: usize,
    pub sample_id: String,
    pub true_label: String,
    pub pred_label: String,
    /// Session that introduced the true class.
    pub intro_session: usize,
}

/// An ordered list of prediction rows, usually covering sessions 1..=B.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionLog {
    pub rows: Vec<PredictionRow>,
}

impl PredictionLog {
    /// Wraps rows after checking session indices are 1-based and no class is
    /// marked as introduced after the session that evaluated it.
    pub fn new(rows: Vec<PredictionRow>) -> Result<Self> {
        for row in &rows {
            if row.session == 0 || row.intro_session == 0 {
                return Err(Error::Data(format!(
                    "sample {:?} has zero session index; sessions are 1-based",
                    row.sample_id
                )));
            }
            if row.intro_session > row.session {
                return Err(Error::Data(format!(
                    "sample {:?} evaluated at session {} but its class arrives at session {}",
                    row.sample_id, row.session, row.intro_session
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Highest session index present, or 0 for an empty log.
    pub fn max_session(&self) -> usize {
        self.rows.iter().map(|r| r.session).max().unwrap_or(0)
    }

    /// Rows evaluated at session `b`.
    pub fn session_rows(&self, session: usize) -> impl Iterator<Item = &PredictionRow> {
        self.rows.iter().filter(move |r| r.session == session)
    }

    /// Serializes rows as CSV with the header
    /// `session,sample_id,true_label,pred_label,intro_session`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.rows {
            out.serialize(row)
                .map_err(|e| Error::Format(format!("csv write: {e}")))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses rows from CSV produced by [`PredictionLog::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for record in input.deserialize() {
            rows.push(record.map_err(|e| Error::Format(format!("csv read: {e}")))?);
        }
        Self::new(rows)
    }

    /// Writes the log to a CSV file.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    /// Reads a log from a CSV file.
    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }
}

fn accuracy_of(rows: &[&PredictionRow]) -> f64 {
    let correct = rows.iter().filter(|r| r.pred_label == r.true_label).count();
    correct as f64 / rows.len() as f64
}

/// Fraction of session-`b` rows predicted correctly (micro average).
///
/// A session with no rows is an error: it means the protocol skipped an
/// evaluation, and reporting 0 or 1 for it would silently skew every derived
/// metric.
pub fn session_accuracy(log: &PredictionLog, session: usize) -> Result<f64> {
    let rows: Vec<&PredictionRow> = log.session_rows(session).collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("no predictions for session {session}")));
    }
    Ok(accuracy_of(&rows))
}

/// Mean of per-class accuracies over `classes` at session `b`.
///
/// Every listed class must have at least one test row in the session;
/// otherwise its accuracy is undefined and the offending class is named in
/// the error.
pub fn macro_accuracy(
    log: &PredictionLog,
    session: usize,
    classes: &[String],
) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Data(format!(
            "no classes given for macro accuracy at session {session}"
        )));
    }
    let mut total = 0.0;
    for class in classes {
        let rows: Vec<&PredictionRow> = log
            .session_rows(session)
            .filter(|r| &r.true_label == class)
            .collect();
        if rows.is_empty() {
            return Err(Error::Data(format!(
                "class {class:?} has no test rows at session {session}"
            )));
        }
        total += accuracy_of(&rows);
    }
    Ok(total / classes.len() as f64)
}

/// Distinct true labels observed at session `b`, in first-appearance order.
pub fn observed_classes(log: &PredictionLog, session: usize) -> Vec<String> {
    let mut seen = Vec::new();
    for row in log.session_rows(session) {
        if !seen.contains(&row.true_label) {
            seen.push(row.true_label.clone());
        }
    }
    seen
}

/// Per-session novel-class accuracies: for each covered session `b`, the
/// accuracy over rows whose true class was introduced at `b`.
///
/// Covers sessions 2..=B by default; `include_base` extends the range to the
/// base session, where the novel rows are simply all rows. An incremental
/// session with no novel rows is an error — its test split must contain the
/// classes it introduced.
pub fn novel_accuracy_per_session(
    log: &PredictionLog,
    include_base: bool,
) -> Result<Vec<(usize, f64)>> {
    let last = log.max_session();
    if last == 0 {
        return Err(Error::Data("prediction log is empty".into()));
    }
    let first = if include_base { 1 } else { 2 };
    if last < first {
        return Err(Error::Data(
            "novel-class accuracy needs at least one incremental session".into(),
        ));
    }
    let mut per_session = Vec::new();
    for session in first..=last {
        let rows: Vec<&PredictionRow> = log
            .session_rows(session)
            .filter(|r| r.intro_session == session)
            .collect();
        if rows.is_empty() {
            return Err(Error::Data(format!(
                "session {session} has no test rows for its newly introduced classes"
            )));
        }
        per_session.push((session, accuracy_of(&rows)));
    }
    Ok(per_session)
}

/// Mean of the per-session novel-class accuracies.
pub fn novel_class_accuracy(log: &PredictionLog, include_base: bool) -> Result<f64> {
    let per_session = novel_accuracy_per_session(log, include_base)?;
    Ok(per_session.iter().map(|(_, a)| a).sum::<f64>() / per_session.len() as f64)
}

/// Relative accuracy drop `|last - first| / first` between the first and
/// last sessions. Undefined when the first-session accuracy is zero.
pub fn dropping_rate(first: f64, last: f64) -> Result<f64> {
    if first <= 0.0 {
        return Err(Error::Data(
            "dropping rate undefined: first-session accuracy is zero".into(),
        ));
    }
    Ok((last - first).abs() / first)
}

/// Harmonic mean `2ab / (a + b)` of final-session accuracy and novel-class
/// accuracy; defined as 0 when both inputs are 0.
pub fn f_fscil(final_accuracy: f64, novel_accuracy: f64) -> f64 {
    let sum = final_accuracy + novel_accuracy;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * final_accuracy * novel_accuracy / sum
    }
}

/// Report assembly options.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Include the base session in the novel-class average.
    pub ncacc_include_base: bool,
}

/// Micro and macro accuracy of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub micro_acc: f64,
    pub macro_acc: f64,
}

/// Novel-class accuracy of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionNovel {
    pub session: usize,
    pub novel_acc: f64,
}

/// Full evaluation summary of a run; serializes to JSON at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sessions: Vec<SessionMetrics>,
    pub novel_per_session: Vec<SessionNovel>,
    /// Mean of `novel_per_session`.
    pub ncacc: f64,
    /// Relative micro-accuracy drop from session 1 to session B.
    pub delta_micro: f64,
    /// Relative macro-accuracy drop from session 1 to session B.
    pub delta_macro: f64,
    /// Harmonic mean of final micro accuracy and `ncacc`.
    pub f_micro: f64,
    /// Harmonic mean of final macro accuracy and `ncacc`.
    pub f_macro: f64,
    /// The configuration that produced the log, echoed for provenance.
    pub config_echo: serde_json::Value,
}

/// Computes every metric for a log against its schedule.
///
/// The log must contain rows for every session of the schedule, each row's
/// introduction session must agree with the schedule, and no row may test a
/// class before the session that introduces it.
pub fn compile_report(
    log: &PredictionLog,
    schedule: &SessionSchedule,
    options: ReportOptions,
    config_echo: serde_json::Value,
) -> Result<MetricsReport> {
    schedule.validate()?;
    let n_sessions = schedule.n_sessions();
    for row in &log.rows {
        if row.session > n_sessions {
            return Err(Error::Protocol(format!(
                "log row {:?} refers to session {} but the schedule has {}",
                row.sample_id, row.session, n_sessions
            )));
        }
        match schedule.intro_session(&row.true_label) {
            Some(intro) if intro == row.intro_session => {}
            Some(intro) => {
                return Err(Error::Protocol(format!(
                    "class {:?} is introduced at session {intro}, but row {:?} claims {}",
                    row.true_label, row.sample_id, row.intro_session
                )));
            }
            None => {
                return Err(Error::Protocol(format!(
                    "class {:?} in row {:?} is not part of the schedule",
                    row.true_label, row.sample_id
                )));
            }
        }
    }

    let mut sessions = Vec::with_capacity(n_sessions);
    for b in 1..=n_sessions {
        let visible = schedule.visible_classes(b)?;
        sessions.push(SessionMetrics {
            session: b,
            micro_acc: session_accuracy(log, b)?,
            macro_acc: macro_accuracy(log, b, &visible)?,
        });
    }

    let novel_per_session: Vec<SessionNovel> =
        novel_accuracy_per_session(log, options.ncacc_include_base)?
            .into_iter()
            .map(|(session, novel_acc)| SessionNovel { session, novel_acc })
            .collect();
    let ncacc = novel_per_session.iter().map(|s| s.novel_acc).sum::<f64>()
        / novel_per_session.len() as f64;

    let first = &sessions[0];
    let last = &sessions[n_sessions - 1];
    Ok(MetricsReport {
        delta_micro: dropping_rate(first.micro_acc, last.micro_acc)?,
        delta_macro: dropping_rate(first.macro_acc, last.macro_acc)?,
        f_micro: f_fscil(last.micro_acc, ncacc),
        f_macro: f_fscil(last.macro_acc, ncacc),
        sessions,
        novel_per_session,
        ncacc,
        config_echo,
    })
}

/// Pretty-printed JSON for a report; byte-identical for equal reports.
pub fn report_to_json(report: &MetricsReport) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

/// Reads a report back from JSON text.
pub fn report_from_json(text: &str) -> Result<MetricsReport> {
    Ok(serde_json::from_str(text)?)
}

fn cell(value: f64) -> String {
    format!("{:>7.1}", value * 100.0)
}

/// Renders the report as a fixed-width text table, percentages with one
/// decimal. The micro row sits above the macro row; the novel-class column
/// is a property of the run and is shared by both rows.
pub fn render_table(report: &MetricsReport) -> String {
    let mut header = String::from("average");
    for s in &report.sessions {
        header.push_str(&format!("{:>7}", s.session));
    }
    header.push_str(&format!("{:>7}{:>7}{:>7}", "ncacc", "delta", "f"));

    let mut micro = String::from("micro  ");
    for s in &report.sessions {
        micro.push_str(&cell(s.micro_acc));
    }
    micro.push_str(&cell(report.ncacc));
    micro.push_str(&cell(report.delta_micro));
    micro.push_str(&cell(report.f_micro));

    let mut macro_row = String::from("macro  ");
    for s in &report.sessions {
        macro_row.push_str(&cell(s.macro_acc));
    }
    macro_row.push_str(&cell(report.ncacc));
    macro_row.push_str(&cell(report.delta_macro));
    macro_row.push_str(&cell(report.f_macro));

    format!("{header}\n{micro}\n{macro_row}\n")
}
