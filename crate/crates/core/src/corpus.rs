//! Utterance manifests, label unification, and zero-shot filtering.
//!
//! A manifest is line-delimited JSON, one utterance per line:
//!
//! ```text
//! {"id":"u1","dataset_id":"CREMA-D","speaker_id":"s1","linguistic_id":"t1","emotion_raw":"angry","valence":2.5,"arousal":4.0}
//! ```
//!
//! Optional fields (`valence`, `arousal`, `audio_path`, `duration_s`) are
//! omitted when absent. Dimensional scores are held as hundredths so that
//! equality tests downstream are exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::config::ExclusionTable;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("score out of range [1, 5] for record {id:?}: {field} = {value}")]
    ScoreOutOfRange {
        id: String,
        field: &'static str,
        value: f64,
    },
    #[error("line {line}: dataset {found:?} differs from manifest dataset {expected:?}")]
    MixedDatasets {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("manifest is empty")]
    Empty,
    #[error("model {0:?} is not listed in the strict zero-shot table")]
    UnknownModel(String),
    #[error("unknown utterance id {0:?}")]
    UnknownId(String),
}

/// The four unified emotion categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Neutral,
    Happy,
    Sad,
    Angry,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 4] = [
        EmotionLabel::Neutral,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Angry => "angry",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" => Ok(EmotionLabel::Neutral),
            "happy" => Ok(EmotionLabel::Happy),
            "sad" => Ok(EmotionLabel::Sad),
            "angry" => Ok(EmotionLabel::Angry),
            other => Err(format!("not a unified emotion label: {other:?}")),
        }
    }
}

/// A valence or arousal score on the [1, 5] scale, stored in hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Score(u16);

impl Score {
    pub const MIN: Score = Score(100);
    pub const MAX: Score = Score(500);

    /// Rounds to two decimals; `None` outside [1, 5].
    pub fn from_f64(value: f64) -> Option<Score> {
        if !value.is_finite() || !(1.0..=5.0).contains(&value) {
            return None;
        }
        Some(Score((value * 100.0).round() as u16))
    }

    pub fn from_hundredths(h: u16) -> Option<Score> {
        (100..=500).contains(&h).then_some(Score(h))
    }

    pub fn hundredths(self) -> u16 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 100.0
    }

    pub fn abs_diff(self, other: Score) -> ScoreDelta {
        ScoreDelta(self.0.abs_diff(other.0))
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Score::from_f64(v).ok_or_else(|| serde::de::Error::custom(format!("score {v} outside [1, 5]")))
    }
}

/// Absolute difference of two scores, in hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ScoreDelta(u16);

impl ScoreDelta {
    pub const fn from_hundredths(h: u16) -> Self {
        ScoreDelta(h)
    }

    pub fn from_f64(value: f64) -> Option<Self> {
        if !value.is_finite() || !(0.0..=4.0).contains(&value) {
            return None;
        }
        Some(ScoreDelta((value * 100.0).round() as u16))
    }

    pub fn hundredths(self) -> u16 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 100.0
    }
}

impl Serialize for ScoreDelta {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for ScoreDelta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        ScoreDelta::from_f64(v).ok_or_else(|| serde::de::Error::custom(format!("score difference {v} outside [0, 4]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub dataset_id: String,
    pub speaker_id: String,
    pub linguistic_id: String,
    pub emotion: EmotionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arousal: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

/// One manifest line as written by producers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub id: String,
    pub dataset_id: String,
    pub speaker_id: String,
    pub linguistic_id: String,
    pub emotion_raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arousal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

/// Raw label to unified label, with optional per-dataset overrides.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMap {
    #[serde(default)]
    pub common: BTreeMap<String, String>,
    #[serde(default)]
    pub datasets: BTreeMap<String, BTreeMap<String, String>>,
}

/// Unified label for a raw label, or `None` when the record should be dropped.
pub fn map_label(raw_label: &str, dataset_id: &str, label_map: &LabelMap) -> Option<EmotionLabel> {
    let key = raw_label.trim().to_lowercase();
    label_map
        .datasets
        .get(dataset_id)
        .and_then(|t| t.get(&key))
        .or_else(|| label_map.common.get(&key))
        .and_then(|target| target.parse().ok())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub dataset_id: String,
    pub records: Vec<UtteranceRecord>,
    pub label_map_applied: bool,
    /// Counts per raw label before mapping.
    pub source_counts: BTreeMap<String, usize>,
    /// Records dropped because their label had no unified mapping.
    pub dropped: usize,
    by_id: HashMap<String, usize>,
}

impl CorpusManifest {
    /// Builds a manifest from already-unified records.
    pub fn from_records(dataset_id: impl Into<String>, records: Vec<UtteranceRecord>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            for (field, v) in [("valence", r.valence), ("arousal", r.arousal)] {
                if let Some(s) = v {
                    if !(Score::MIN..=Score::MAX).contains(&s) {
                        return Err(CorpusError::ScoreOutOfRange {
                            id: r.id.clone(),
                            field,
                            value: s.as_f64(),
                        });
                    }
                }
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: r.id.clone(),
                    line: i + 1,
                });
            }
        }
        let mut source_counts = BTreeMap::new();
        for r in &records {
            *source_counts.entry(r.emotion.as_str().to_string()).or_insert(0) += 1;
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            records,
            label_map_applied: false,
            source_counts,
            dropped: 0,
            by_id,
        })
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<&UtteranceRecord, CorpusError> {
        self.get(id).ok_or_else(|| CorpusError::UnknownId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn raw_count(&self) -> usize {
        self.records.len() + self.dropped
    }

    pub fn emotion_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for r in &self.records {
            counts[r.emotion.index()] += 1;
        }
        counts
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// Parses a manifest from any reader, applying `label_map`.
pub fn parse_manifest(reader: impl BufRead, label_map: &LabelMap) -> Result<CorpusManifest, CorpusError> {
    let mut records = Vec::new();
    let mut by_id = HashMap::new();
    let mut source_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut dropped = 0;
    let mut dataset_id: Option<String> = None;
    let mut seen_any = false;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        seen_any = true;
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match &dataset_id {
            None => dataset_id = Some(raw.dataset_id.clone()),
            Some(expected) if *expected != raw.dataset_id => {
                return Err(CorpusError::MixedDatasets {
                    line: line_no,
                    expected: expected.clone(),
                    found: raw.dataset_id,
                })
            }
            Some(_) => {}
        }
        if by_id.contains_key(&raw.id) {
            return Err(CorpusError::DuplicateId {
                id: raw.id,
                line: line_no,
            });
        }
        let valence = checked_score(&raw.id, "valence", raw.valence)?;
        let arousal = checked_score(&raw.id, "arousal", raw.arousal)?;
        *source_counts.entry(raw.emotion_raw.clone()).or_insert(0) += 1;

        // Ids of dropped records still count toward uniqueness.
        by_id.insert(raw.id.clone(), usize::MAX);
        let Some(emotion) = map_label(&raw.emotion_raw, &raw.dataset_id, label_map) else {
            dropped += 1;
            continue;
        };
        by_id.insert(raw.id.clone(), records.len());
        records.push(UtteranceRecord {
            id: raw.id,
            dataset_id: raw.dataset_id,
            speaker_id: raw.speaker_id,
            linguistic_id: raw.linguistic_id,
            emotion,
            valence,
            arousal,
            audio_path: raw.audio_path,
            duration_s: raw.duration_s,
        });
    }
    if !seen_any {
        return Err(CorpusError::Empty);
    }
    by_id.retain(|_, &mut v| v != usize::MAX);
    Ok(CorpusManifest {
        dataset_id: dataset_id.unwrap_or_default(),
        records,
        label_map_applied: true,
        source_counts,
        dropped,
        by_id,
    })
}

fn checked_score(id: &str, field: &'static str, value: Option<f64>) -> Result<Option<Score>, CorpusError> {
    match value {
        None => Ok(None),
        Some(v) => Score::from_f64(v)
            .map(Some)
            .ok_or_else(|| CorpusError::ScoreOutOfRange {
                id: id.to_string(),
                field,
                value: v,
            }),
    }
}

pub fn load_manifest(path: impl AsRef<Path>, label_map: &LabelMap) -> Result<CorpusManifest, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(std::io::BufReader::new(file), label_map)
}

/// Outcome of the zero-shot check for one (model, dataset) pairing.
#[derive(Debug, Clone, PartialEq)]
pub enum ZeroShot {
    Admitted(CorpusManifest),
    /// The model saw this dataset during pre-training; reports render a dash.
    Excluded {
        model_id: String,
        dataset_id: String,
    },
}

impl ZeroShot {
    pub fn is_excluded(&self) -> bool {
        matches!(self, ZeroShot::Excluded { .. })
    }
}

pub fn filter_zero_shot(
    manifest: CorpusManifest,
    model_id: &str,
    exclusion_table: &ExclusionTable,
) -> Result<ZeroShot, CorpusError> {
    if exclusion_table.is_excluded(model_id, &manifest.dataset_id)? {
        Ok(ZeroShot::Excluded {
            model_id: model_id.to_string(),
            dataset_id: manifest.dataset_id,
        })
    } else {
        Ok(ZeroShot::Admitted(manifest))
    }
}
