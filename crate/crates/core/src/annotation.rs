//! Annotation session state: blinded presentations, vote recording, and live
//! agreement statistics over an append-only log.
//!
//! The log is line-delimited JSON. Each line is either a presentation (which
//! candidate sits in which slot for one rater) or a vote in canonical A/B/tie
//! form. Reopening a log replays it, so a restarted service resumes exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{
    consensus_filter, kappa_from_votes, AlignmentError, Candidate, Choice, PreferenceTriplet, Threshold, VoteRecord,
};
use crate::seed::{derive_seed, rng_from, SeedPart};

pub const INSTRUCTIONS: &str = "Listen to the reference clip, then to both candidates. \
Choose the candidate whose emotion best matches the reference. Ignore audio quality and artifacts. \
Choose tie only if you cannot tell them apart.";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown rater {0:?}")]
    UnknownRater(String),
    #[error("unknown triplet {0:?}")]
    UnknownTriplet(String),
    #[error("rater {rater:?} has no presentation of triplet {triplet:?}")]
    NoPresentation { rater: String, triplet: String },
    #[error("rater {rater:?} already voted on triplet {triplet:?}")]
    DuplicateVote { rater: String, triplet: String },
    #[error("no raters configured")]
    NoRaters,
    #[error("log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
}

/// Which screen side the rater picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentationRecord {
    pub triplet_id: String,
    pub rater_id: String,
    pub left_slot: Candidate,
    pub right_slot: Candidate,
    pub issued_at: u64,
}

impl PresentationRecord {
    /// Maps a side choice to the canonical answer.
    pub fn resolve(&self, side: Side) -> Choice {
        let to_choice = |c: Candidate| match c {
            Candidate::A => Choice::A,
            Candidate::B => Choice::B,
        };
        match side {
            Side::Left => to_choice(self.left_slot),
            Side::Right => to_choice(self.right_slot),
            Side::Tie => Choice::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Presentation(PresentationRecord),
    Vote(VoteRecord),
}

/// What a rater client receives. Carries no slot mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub triplet_id: String,
    pub ref_url: String,
    pub left_url: String,
    pub right_url: String,
    pub instructions: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextOutcome {
    Present(Payload),
    Complete {
        rater_id: String,
        completed: usize,
        total: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    pub triplet_id: String,
    pub rater_id: String,
    pub completed: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusCounts {
    pub retained: usize,
    pub tie_consensus: usize,
    pub below_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub votes_per_rater: BTreeMap<String, usize>,
    pub total_votes: usize,
    pub completed_triplets: usize,
    pub partial_triplets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub consensus: ConsensusCounts,
}

/// Statistics over a vote snapshot. κ and consensus use only triplets with a
/// vote from every rater; κ is absent when undefined.
pub fn compute_stats(
    pool: &[PreferenceTriplet],
    raters: &[String],
    votes: &[VoteRecord],
    threshold: Threshold,
) -> Result<Stats, AnnotationError> {
    let n = raters.len();
    let mut votes_per_rater: BTreeMap<String, usize> = raters.iter().map(|r| (r.clone(), 0)).collect();
    let mut per_triplet: HashMap<&str, usize> = HashMap::new();
    for v in votes {
        *votes_per_rater.entry(v.rater_id.clone()).or_default() += 1;
        *per_triplet.entry(&v.triplet_id).or_default() += 1;
    }
    let completed = per_triplet.values().filter(|&&c| c == n).count();
    let partial = per_triplet.len() - completed;
    let report = consensus_filter(pool, votes, n, threshold)?;
    let kappa = if completed > 0 {
        kappa_from_votes(pool, votes, n).ok()
    } else {
        None
    };
    Ok(Stats {
        votes_per_rater,
        total_votes: votes.len(),
        completed_triplets: completed,
        partial_triplets: partial,
        kappa,
        consensus: ConsensusCounts {
            retained: report.retained.len(),
            tie_consensus: report.tie_consensus.len(),
            below_threshold: report.below_threshold.len(),
        },
    })
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub raters: Vec<String>,
    pub seed: u64,
    pub threshold: Threshold,
}

type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

fn wall_clock() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Default)]
struct State {
    entries: Vec<LogEntry>,
    open: HashMap<(String, String), PresentationRecord>,
    voted: HashSet<(String, String)>,
    votes: Vec<VoteRecord>,
    done_per_rater: HashMap<String, usize>,
}

impl State {
    fn apply(&mut self, entry: LogEntry) {
        match &entry {
            LogEntry::Presentation(p) => {
                self.open.insert((p.rater_id.clone(), p.triplet_id.clone()), p.clone());
            }
            LogEntry::Vote(v) => {
                let key = (v.rater_id.clone(), v.triplet_id.clone());
                self.open.remove(&key);
                self.voted.insert(key);
                self.votes.push(v.clone());
                *self.done_per_rater.entry(v.rater_id.clone()).or_default() += 1;
            }
        }
        self.entries.push(entry);
    }
}

pub struct AnnotationService {
    pool: Vec<PreferenceTriplet>,
    by_id: HashMap<String, usize>,
    queues: HashMap<String, Vec<usize>>,
    config: ServiceConfig,
    log_path: Option<PathBuf>,
    clock: Clock,
    state: Mutex<(State, Option<File>)>,
}

impl std::fmt::Debug for AnnotationService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnnotationService")
            .field("triplets", &self.pool.len())
            .field("raters", &self.config.raters)
            .field("log_path", &self.log_path)
            .finish()
    }
}

impl AnnotationService {
    /// Opens a service over `pool`. An existing log at `log_path` is replayed
    /// and then appended to.
    pub fn open(
        pool: Vec<PreferenceTriplet>,
        config: ServiceConfig,
        log_path: Option<&Path>,
    ) -> Result<Self, AnnotationError> {
        Self::with_clock(pool, config, log_path, Box::new(wall_clock))
    }

    pub fn with_clock(
        pool: Vec<PreferenceTriplet>,
        config: ServiceConfig,
        log_path: Option<&Path>,
        clock: Clock,
    ) -> Result<Self, AnnotationError> {
        if config.raters.is_empty() {
            return Err(AnnotationError::NoRaters);
        }
        let mut by_id = HashMap::new();
        for (i, t) in pool.iter().enumerate() {
            if by_id.insert(t.triplet_id.clone(), i).is_some() {
                return Err(AlignmentError::DuplicateTriplet(t.triplet_id.clone()).into());
            }
        }
        let queues = config
            .raters
            .iter()
            .map(|r| {
                let mut order: Vec<usize> = (0..pool.len()).collect();
                let mut rng = rng_from(derive_seed(config.seed, &[SeedPart::Str("queue"), SeedPart::Str(r)]));
                order.shuffle(&mut rng);
                (r.clone(), order)
            })
            .collect();
        let mut service = Self {
            pool,
            by_id,
            queues,
            config,
            log_path: log_path.map(Path::to_path_buf),
            clock,
            state: Mutex::new((State::default(), None)),
        };
        if let Some(path) = log_path {
            let io = |source| AnnotationError::Io {
                path: path.display().to_string(),
                source,
            };
            let mut state = State::default();
            if path.exists() {
                let f = File::open(path).map_err(io)?;
                for entry in parse_log(std::io::BufReader::new(f))? {
                    service.check_entry(&state, &entry)?;
                    state.apply(entry);
                }
            }
            let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
            service.state = Mutex::new((state, Some(file)));
        }
        Ok(service)
    }

    fn check_entry(&self, state: &State, entry: &LogEntry) -> Result<(), AnnotationError> {
        let (rater, triplet) = match entry {
            LogEntry::Presentation(p) => (&p.rater_id, &p.triplet_id),
            LogEntry::Vote(v) => (&v.rater_id, &v.triplet_id),
        };
        self.require_rater(rater)?;
        self.require_triplet(triplet)?;
        let key = (rater.clone(), triplet.clone());
        if state.voted.contains(&key) {
            return Err(AnnotationError::DuplicateVote {
                rater: rater.clone(),
                triplet: triplet.clone(),
            });
        }
        if let LogEntry::Vote(_) = entry {
            if !state.open.contains_key(&key) {
                return Err(AnnotationError::NoPresentation {
                    rater: rater.clone(),
                    triplet: triplet.clone(),
                });
            }
        }
        Ok(())
    }

    fn require_rater(&self, rater: &str) -> Result<(), AnnotationError> {
        if self.queues.contains_key(rater) {
            Ok(())
        } else {
            Err(AnnotationError::UnknownRater(rater.to_string()))
        }
    }

    fn require_triplet(&self, triplet: &str) -> Result<&PreferenceTriplet, AnnotationError> {
        self.by_id
            .get(triplet)
            .map(|&i| &self.pool[i])
            .ok_or_else(|| AnnotationError::UnknownTriplet(triplet.to_string()))
    }

    pub fn pool(&self) -> &[PreferenceTriplet] {
        &self.pool
    }

    pub fn raters(&self) -> &[String] {
        &self.config.raters
    }

    /// True if `id` is the reference or a candidate of some pool triplet.
    pub fn serves_audio(&self, id: &str) -> bool {
        self.pool
            .iter()
            .any(|t| t.ref_id == id || t.candidate_a_id == id || t.candidate_b_id == id)
    }

    fn append(&self, state: &mut (State, Option<File>), entry: LogEntry) -> Result<(), AnnotationError> {
        if let Some(file) = state.1.as_mut() {
            let mut line = serde_json::to_vec(&entry).expect("log entries serialize");
            line.push(b'\n');
            let path = self
                .log_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            file.write_all(&line)
                .and_then(|()| file.flush())
                .map_err(|source| AnnotationError::Io { path, source })?;
        }
        state.0.apply(entry);
        Ok(())
    }

    /// The rater's next unvoted triplet with blinded slots. Repeated calls
    /// before voting return the same presentation.
    pub fn next_triplet(&self, rater: &str) -> Result<NextOutcome, AnnotationError> {
        self.require_rater(rater)?;
        let mut guard = self.state.lock().expect("annotation state poisoned");
        let queue = &self.queues[rater];
        let next = queue
            .iter()
            .map(|&i| &self.pool[i])
            .find(|t| !guard.0.voted.contains(&(rater.to_string(), t.triplet_id.clone())));
        let Some(t) = next else {
            return Ok(NextOutcome::Complete {
                rater_id: rater.to_string(),
                completed: guard.0.done_per_rater.get(rater).copied().unwrap_or(0),
                total: self.pool.len(),
            });
        };
        let key = (rater.to_string(), t.triplet_id.clone());
        let record = match guard.0.open.get(&key) {
            Some(p) => p.clone(),
            None => {
                let mut rng = rng_from(derive_seed(
                    self.config.seed,
                    &[
                        SeedPart::Str("slots"),
                        SeedPart::Str(rater),
                        SeedPart::Str(&t.triplet_id),
                    ],
                ));
                let left = if rng.random_bool(0.5) {
                    Candidate::A
                } else {
                    Candidate::B
                };
                let p = PresentationRecord {
                    triplet_id: t.triplet_id.clone(),
                    rater_id: rater.to_string(),
                    left_slot: left,
                    right_slot: left.other(),
                    issued_at: (self.clock)(),
                };
                self.append(&mut guard, LogEntry::Presentation(p.clone()))?;
                p
            }
        };
        let url = |id: &str| format!("/audio/{id}");
        Ok(NextOutcome::Present(Payload {
            triplet_id: t.triplet_id.clone(),
            ref_url: url(&t.ref_id),
            left_url: url(t.candidate(record.left_slot)),
            right_url: url(t.candidate(record.right_slot)),
            instructions: INSTRUCTIONS.to_string(),
        }))
    }

    /// Records a vote through the rater's slot mapping. The duplicate check
    /// and the append happen under one lock.
    pub fn record_vote(&self, rater: &str, triplet: &str, side: Side) -> Result<VoteAck, AnnotationError> {
        self.require_rater(rater)?;
        self.require_triplet(triplet)?;
        let mut guard = self.state.lock().expect("annotation state poisoned");
        let key = (rater.to_string(), triplet.to_string());
        if guard.0.voted.contains(&key) {
            return Err(AnnotationError::DuplicateVote {
                rater: rater.to_string(),
                triplet: triplet.to_string(),
            });
        }
        let presentation = guard.0.open.get(&key).ok_or_else(|| AnnotationError::NoPresentation {
            rater: rater.to_string(),
            triplet: triplet.to_string(),
        })?;
        let vote = VoteRecord {
            triplet_id: triplet.to_string(),
            rater_id: rater.to_string(),
            choice: presentation.resolve(side),
            timestamp: (self.clock)(),
        };
        self.append(&mut guard, LogEntry::Vote(vote))?;
        let completed = guard.0.done_per_rater.get(rater).copied().unwrap_or(0);
        Ok(VoteAck {
            triplet_id: triplet.to_string(),
            rater_id: rater.to_string(),
            completed,
            remaining: self.pool.len() - completed,
        })
    }

    pub fn stats(&self) -> Result<Stats, AnnotationError> {
        let votes = self.state.lock().expect("annotation state poisoned").0.votes.clone();
        compute_stats(&self.pool, &self.config.raters, &votes, self.config.threshold)
    }

    /// The full log in its on-disk form.
    pub fn export(&self) -> Vec<u8> {
        let guard = self.state.lock().expect("annotation state poisoned");
        encode_log(&guard.0.entries)
    }

    pub fn votes(&self) -> Vec<VoteRecord> {
        self.state.lock().expect("annotation state poisoned").0.votes.clone()
    }

    pub fn presentations(&self) -> Vec<PresentationRecord> {
        let guard = self.state.lock().expect("annotation state poisoned");
        guard
            .0
            .entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Presentation(p) => Some(p.clone()),
                LogEntry::Vote(_) => None,
            })
            .collect()
    }
}

pub fn encode_log(entries: &[LogEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("log entries serialize");
        out.push(b'\n');
    }
    out
}

pub fn parse_log(reader: impl BufRead) -> Result<Vec<LogEntry>, AnnotationError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let err = |message: String| AnnotationError::Log { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

/// Votes in log order.
pub fn votes_in(entries: &[LogEntry]) -> Vec<VoteRecord> {
    entries
        .iter()
        .filter_map(|e| match e {
            LogEntry::Vote(v) => Some(v.clone()),
            LogEntry::Presentation(_) => None,
        })
        .collect()
}

/// Reads the vote records out of a log file.
pub fn read_votes(path: impl AsRef<Path>) -> Result<Vec<VoteRecord>, AnnotationError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(votes_in(&parse_log(std::io::BufReader::new(f))?))
}
