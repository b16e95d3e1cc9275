//! User feedback events and the append-only JSONL feedback log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Like,
    Dislike,
}

/// One completed 1-5 agreement questionnaire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    #[serde(default)]
    pub respondent_id: String,
    pub q_relevance: u8,
    pub q_accuracy: u8,
    pub q_construction: u8,
    pub q_sources: u8,
}

impl SurveyResponse {
    pub fn scores(&self) -> [(&'static str, u8); 4] {
        [
            ("q_relevance", self.q_relevance),
            ("q_accuracy", self.q_accuracy),
            ("q_construction", self.q_construction),
            ("q_sources", self.q_sources),
        ]
    }

    /// Name of the first question scored outside 1..=5.
    pub fn out_of_range(&self) -> Option<&'static str> {
        self.scores()
            .into_iter()
            .find(|(_, s)| !(1..=5).contains(s))
            .map(|(q, _)| q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub event_id: String,
    pub query_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub signal: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub survey: Option<SurveyResponse>,
    pub timestamp: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub free_text: Option<String>,
}

/// Serialized appends to a JSONL file. Every append is flushed and synced
/// before it returns.
pub struct FeedbackLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl FeedbackLog {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(FeedbackLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &FeedbackEvent) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut file = self.file.lock();
        file.write_all(&line)?;
        file.flush()?;
        file.sync_data()
    }
}

/// Reads every event from a feedback log; blank lines are skipped.
pub fn read_feedback_log(path: &Path) -> std::io::Result<Vec<FeedbackEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })
        })
        .collect()
}
