//! Scenario corpus: a directory with `manifest.toml` and program files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsl::text::{preprocess_training, split_docstring};
use crate::harness::TraceChecker;
use crate::prompt::TrainingExample;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Manifest { path: String, source: toml::de::Error },
    #[error("scenario '{0}' has no description")]
    MissingDescription(String),
    #[error("duplicate scenario id '{0}'")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub split: Split,
    /// Program file relative to the corpus root.
    #[serde(default)]
    pub program: Option<PathBuf>,
    /// Falls back to the program's docstring.
    #[serde(default)]
    pub description: Option<String>,
    /// Bundled map name or path; the session default applies when absent.
    #[serde(default)]
    pub map: Option<String>,
    #[serde(default)]
    pub checker: Option<TraceChecker>,
    /// Comments a scripted user sends after each executable turn it rejects.
    #[serde(default)]
    pub comments: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    scenario: Vec<CorpusEntry>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self, CorpusError> {
        let path = root.join("manifest.toml");
        let text = fs::read_to_string(&path)
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|source| CorpusError::Manifest { path: path.display().to_string(), source })?;
        let mut seen = std::collections::BTreeSet::new();
        for e in &manifest.scenario {
            if !seen.insert(e.id.clone()) {
                return Err(CorpusError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { root: root.to_path_buf(), entries: manifest.scenario })
    }

    pub fn entry(&self, id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn program_text(&self, entry: &CorpusEntry) -> Result<Option<String>, CorpusError> {
        let Some(rel) = &entry.program else { return Ok(None) };
        let path = self.root.join(rel);
        fs::read_to_string(&path)
            .map(Some)
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
    }

    pub fn description(&self, entry: &CorpusEntry) -> Result<String, CorpusError> {
        if let Some(d) = &entry.description {
            return Ok(d.trim().to_string());
        }
        let text = self.program_text(entry)?.unwrap_or_default();
        match split_docstring(&text).0 {
            Some(doc) if !doc.trim().is_empty() => Ok(doc.trim().to_string()),
            _ => Err(CorpusError::MissingDescription(entry.id.clone())),
        }
    }

    /// Training pairs: description plus preprocessed code without docstring.
    pub fn training_examples(&self) -> Result<Vec<TrainingExample>, CorpusError> {
        let mut out = Vec::new();
        for e in self.split(Split::Train) {
            let Some(text) = self.program_text(e)? else { continue };
            let description = self.description(e)?;
            let body = split_docstring(&text).1;
            out.push(TrainingExample { id: e.id.clone(), description, code: preprocess_training(body) });
        }
        Ok(out)
    }
}
