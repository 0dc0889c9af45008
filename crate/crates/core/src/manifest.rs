//! Dataset manifests: one row per recording with speaker, condition and split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    QuestionedLike,
    KnownLike,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Ubm,
    Population,
    Calibration,
    Test,
    Case,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::QuestionedLike => "questioned-like",
            Condition::KnownLike => "known-like",
            Condition::Other => "other",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Ubm => "ubm",
            Split::Population => "population",
            Split::Calibration => "calibration",
            Split::Test => "test",
            Split::Case => "case",
        })
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "questioned-like" => Ok(Condition::QuestionedLike),
            "known-like" => Ok(Condition::KnownLike),
            "other" => Ok(Condition::Other),
            o => Err(format!("unknown condition {o:?}")),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "ubm" => Ok(Split::Ubm),
            "population" => Ok(Split::Population),
            "calibration" => Ok(Split::Calibration),
            "test" => Ok(Split::Test),
            "case" => Ok(Split::Case),
            o => Err(format!("unknown split {o:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub recording_path: PathBuf,
    pub speaker_id: String,
    pub condition: Condition,
    pub split: Split,
}

impl ManifestRow {
    /// File stem, used to name derived artifacts.
    pub fn recording_id(&self) -> String {
        self.recording_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

#[derive(Deserialize)]
struct RawRow {
    recording_path: String,
    speaker_id: String,
    condition: String,
    split: String,
}

impl Manifest {
    /// Reads a CSV with header `recording_path,speaker_id,condition,split`.
    /// Relative paths resolve against the manifest's directory. Checks that
    /// files exist and that speakers do not cross population, calibration
    /// and test.
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<RawRow>().enumerate() {
            let line = i + 2;
            let raw = rec.map_err(|e| Error::Manifest(format!("line {line}: {e}")))?;
            if raw.speaker_id.is_empty() {
                return Err(Error::Manifest(format!("line {line}: empty speaker_id")));
            }
            let p = PathBuf::from(&raw.recording_path);
            let recording_path = if p.is_absolute() { p } else { base.join(p) };
            rows.push(ManifestRow {
                recording_path,
                speaker_id: raw.speaker_id,
                condition: raw
                    .condition
                    .parse()
                    .map_err(|e| Error::Manifest(format!("line {line}: {e}")))?,
                split: raw
                    .split
                    .parse()
                    .map_err(|e| Error::Manifest(format!("line {line}: {e}")))?,
            });
        }
        let m = Manifest { rows };
        m.check_paths()?;
        m.check_splits()?;
        Ok(m)
    }

    pub fn check_paths(&self) -> Result<()> {
        let missing: Vec<String> = self
            .rows
            .iter()
            .filter(|r| !r.recording_path.exists())
            .map(|r| r.recording_path.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Manifest(format!("missing recordings: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// No speaker may appear in two of population, calibration and test.
    pub fn check_splits(&self) -> Result<()> {
        let speakers = |s: Split| -> BTreeSet<&str> {
            self.rows
                .iter()
                .filter(|r| r.split == s)
                .map(|r| r.speaker_id.as_str())
                .collect()
        };
        let guarded = [Split::Population, Split::Calibration, Split::Test];
        for (i, &a) in guarded.iter().enumerate() {
            for &b in &guarded[i + 1..] {
                let shared: Vec<String> = speakers(a)
                    .intersection(&speakers(b))
                    .map(|s| s.to_string())
                    .collect();
                if !shared.is_empty() {
                    return Err(Error::SplitOverlap {
                        first: a.to_string(),
                        second: b.to_string(),
                        speakers: shared,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, s: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == s).collect()
    }

    pub fn speakers_in(&self, s: Split) -> BTreeMap<&str, Vec<&ManifestRow>> {
        let mut m: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
        for r in self.split(s) {
            m.entry(r.speaker_id.as_str()).or_default().push(r);
        }
        m
    }

    pub fn to_csv(&self, relative_to: Option<&Path>) -> String {
        let mut s = String::from("recording_path,speaker_id,condition,split\n");
        for r in &self.rows {
            let p = match relative_to {
                Some(base) => r
                    .recording_path
                    .strip_prefix(base)
                    .unwrap_or(&r.recording_path)
                    .to_path_buf(),
                None => r.recording_path.clone(),
            };
            s += &format!("{},{},{},{}\n", p.display(), r.speaker_id, r.condition, r.split);
        }
        s
    }
}
