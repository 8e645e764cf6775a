//! Rater agreement, consensus filtering and human-alignment accuracy.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalError, Similarity};
use crate::seed::{derive_seed, rng_from, SeedPart};
use crate::stats::{binomial_two_sided, StatsError};

pub const DEFAULT_RATERS: usize = 5;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("rater {rater:?} voted twice on triplet {triplet:?}")]
    DuplicateVote { triplet: String, rater: String },
    #[error("vote for unknown triplet {0:?}")]
    UnknownTriplet(String),
    #[error("triplet id {0:?} appears twice in the pool")]
    DuplicateTriplet(String),
    #[error("subject {row} has {found} votes, expected {expected}")]
    Ragged { row: usize, found: u32, expected: u32 },
    #[error("need at least 2 raters per subject, found {0}")]
    TooFewRaters(u32),
    #[error("need at least 2 categories")]
    TooFewCategories,
    #[error("no subjects")]
    NoSubjects,
    #[error("kappa undefined: every vote falls in one category")]
    KappaUndefined,
    #[error("invalid threshold {0:?}")]
    InvalidThreshold(String),
    #[error("source {source_id:?} has {found} consensus triplets, {need} requested")]
    InsufficientSource {
        source_id: String,
        need: usize,
        found: usize,
    },
    #[error("no consensus triplets to score")]
    Empty,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A rater's canonical answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    #[serde(rename = "tie")]
    Tie,
}

impl Choice {
    pub const ALL: [Choice; 3] = [Choice::A, Choice::B, Choice::Tie];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Candidate {
    A,
    B,
}

impl Candidate {
    pub fn other(self) -> Candidate {
        match self {
            Candidate::A => Candidate::B,
            Candidate::B => Candidate::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub triplet_id: String,
    pub rater_id: String,
    pub choice: Choice,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub triplet_id: String,
    pub ref_id: String,
    pub candidate_a_id: String,
    pub candidate_b_id: String,
    pub source_dataset: String,
}

impl PreferenceTriplet {
    pub fn candidate(&self, c: Candidate) -> &str {
        match c {
            Candidate::A => &self.candidate_a_id,
            Candidate::B => &self.candidate_b_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusTriplet {
    #[serde(flatten)]
    pub triplet: PreferenceTriplet,
    /// Human-preferred candidate.
    pub h: Candidate,
    pub agreement_count: usize,
    pub n_raters: usize,
}

/// Agreement fraction kept as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Threshold {
    pub num: u64,
    pub den: u64,
}

impl Threshold {
    pub fn new(num: u64, den: u64) -> Result<Self, AlignmentError> {
        if den == 0 || num == 0 || num > den {
            return Err(AlignmentError::InvalidThreshold(format!("{num}/{den}")));
        }
        Ok(Self { num, den })
    }

    /// `count / n >= num / den`, in integers.
    pub fn met(self, count: usize, n: usize) -> bool {
        count as u128 * self.den as u128 >= self.num as u128 * n as u128
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self { num: 4, den: 5 }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl std::str::FromStr for Threshold {
    type Err = AlignmentError;

    /// Accepts `"4/5"` or a decimal such as `"0.8"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AlignmentError::InvalidThreshold(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Threshold::new(n, d).map_err(|_| bad());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9
            || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
            || int.is_empty() && frac.is_empty()
        {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        Threshold::new(int * den + frac, den).map_err(|_| bad())
    }
}

/// Fleiss' kappa of an N x k table of per-category vote counts.
pub fn fleiss_kappa(table: &[Vec<u32>]) -> Result<f64, AlignmentError> {
    let first = table.first().ok_or(AlignmentError::NoSubjects)?;
    let k = first.len();
    if k < 2 {
        return Err(AlignmentError::TooFewCategories);
    }
    let n: u32 = first.iter().sum();
    for (row, counts) in table.iter().enumerate() {
        let found: u32 = counts.iter().sum();
        if counts.len() != k || found != n {
            return Err(AlignmentError::Ragged {
                row,
                found,
                expected: n,
            });
        }
    }
    if n < 2 {
        return Err(AlignmentError::TooFewRaters(n));
    }
    let subjects = table.len() as f64;
    let nf = f64::from(n);
    let mut column = vec![0u64; k];
    let mut p_bar = 0.0;
    for counts in table {
        let sq: u64 = counts.iter().map(|&c| u64::from(c) * u64::from(c)).sum();
        p_bar += (sq - u64::from(n)) as f64 / (nf * (nf - 1.0));
        for (c, &v) in column.iter_mut().zip(counts) {
            *c += u64::from(v);
        }
    }
    p_bar /= subjects;
    let total = subjects * nf;
    let p_e: f64 = column.iter().map(|&c| (c as f64 / total).powi(2)).sum();
    if column.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(AlignmentError::KappaUndefined);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Per-triplet vote tallies in `Choice::ALL` order, keyed by triplet id.
/// Rejects duplicate (triplet, rater) votes and votes for unknown triplets.
pub fn tally(pool: &[PreferenceTriplet], votes: &[VoteRecord]) -> Result<BTreeMap<String, [u32; 3]>, AlignmentError> {
    let mut known = HashSet::new();
    for t in pool {
        if !known.insert(t.triplet_id.as_str()) {
            return Err(AlignmentError::DuplicateTriplet(t.triplet_id.clone()));
        }
    }
    let mut seen = HashSet::new();
    let mut counts: BTreeMap<String, [u32; 3]> = BTreeMap::new();
    for v in votes {
        if !known.contains(v.triplet_id.as_str()) {
            return Err(AlignmentError::UnknownTriplet(v.triplet_id.clone()));
        }
        if !seen.insert((v.triplet_id.as_str(), v.rater_id.as_str())) {
            return Err(AlignmentError::DuplicateVote {
                triplet: v.triplet_id.clone(),
                rater: v.rater_id.clone(),
            });
        }
        counts.entry(v.triplet_id.clone()).or_default()[v.choice.index()] += 1;
    }
    Ok(counts)
}

/// Outcome of consensus filtering, with every triplet accounted for.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub retained: Vec<ConsensusTriplet>,
    /// Strong agreement on "hard to distinguish"; never retained.
    pub tie_consensus: Vec<String>,
    pub below_threshold: Vec<String>,
    /// Triplets without the full rater complement, with their vote count.
    pub incomplete: Vec<(String, u32)>,
}

/// Keeps triplets where at least `threshold` of `n_raters` votes land on the
/// same candidate and that candidate strictly outvotes each other option.
pub fn consensus_filter(
    pool: &[PreferenceTriplet],
    votes: &[VoteRecord],
    n_raters: usize,
    threshold: Threshold,
) -> Result<ConsensusReport, AlignmentError> {
    let counts = tally(pool, votes)?;
    let mut report = ConsensusReport::default();
    for t in pool {
        let c = counts.get(&t.triplet_id).copied().unwrap_or_default();
        let total: u32 = c.iter().sum();
        if total as usize != n_raters {
            report.incomplete.push((t.triplet_id.clone(), total));
            continue;
        }
        let winner = Choice::ALL.into_iter().find(|&ch| {
            let x = c[ch.index()];
            Choice::ALL.iter().all(|&o| o == ch || c[o.index()] < x) && threshold.met(x as usize, n_raters)
        });
        match winner {
            Some(Choice::A) | Some(Choice::B) => {
                let (h, agreement) = if winner == Some(Choice::A) {
                    (Candidate::A, c[0])
                } else {
                    (Candidate::B, c[1])
                };
                report.retained.push(ConsensusTriplet {
                    triplet: t.clone(),
                    h,
                    agreement_count: agreement as usize,
                    n_raters,
                });
            }
            Some(Choice::Tie) => report.tie_consensus.push(t.triplet_id.clone()),
            None => report.below_threshold.push(t.triplet_id.clone()),
        }
    }
    Ok(report)
}

/// Fleiss' kappa over the fully voted triplets (three categories).
pub fn kappa_from_votes(
    pool: &[PreferenceTriplet],
    votes: &[VoteRecord],
    n_raters: usize,
) -> Result<f64, AlignmentError> {
    let counts = tally(pool, votes)?;
    let table: Vec<Vec<u32>> = counts
        .values()
        .filter(|c| c.iter().sum::<u32>() as usize == n_raters)
        .map(|c| c.to_vec())
        .collect();
    fleiss_kappa(&table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOutcome {
    pub accuracy: f64,
    pub p_value: f64,
    pub n: usize,
    pub matches: usize,
}

/// Fraction of consensus triplets where the metric prefers the same
/// candidate as the raters. A metric tie counts as misaligned.
pub fn alignment_accuracy(
    consensus: &[ConsensusTriplet],
    sim: &dyn Similarity,
) -> Result<AlignmentOutcome, AlignmentError> {
    if consensus.is_empty() {
        return Err(AlignmentError::Empty);
    }
    let mut matches = 0usize;
    for c in consensus {
        let t = &c.triplet;
        let sa = sim.similarity(&t.ref_id, &t.candidate_a_id)?;
        let sb = sim.similarity(&t.ref_id, &t.candidate_b_id)?;
        let m = if sa > sb {
            Some(Candidate::A)
        } else if sb > sa {
            Some(Candidate::B)
        } else {
            None
        };
        if m == Some(c.h) {
            matches += 1;
        }
    }
    let n = consensus.len();
    Ok(AlignmentOutcome {
        accuracy: matches as f64 / n as f64,
        p_value: binomial_two_sided(matches as u64, n as u64)?,
        n,
        matches,
    })
}

/// Draws `per_source` consensus triplets from each source dataset, seeded.
/// Output keeps the input order.
pub fn balance_by_source(
    consensus: &[ConsensusTriplet],
    per_source: usize,
    seed: u64,
) -> Result<Vec<ConsensusTriplet>, AlignmentError> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in consensus.iter().enumerate() {
        by_source.entry(&c.triplet.source_dataset).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (source, members) in by_source {
        if members.len() < per_source {
            return Err(AlignmentError::InsufficientSource {
                source_id: source.to_string(),
                need: per_source,
                found: members.len(),
            });
        }
        let mut rng = rng_from(derive_seed(seed, &[SeedPart::Str("balance"), SeedPart::Str(source)]));
        keep.extend(
            index::sample(&mut rng, members.len(), per_source)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| consensus[i].clone()).collect())
}

/// Reads a JSONL file of preference triplets.
pub fn read_pool(path: impl AsRef<Path>) -> Result<Vec<PreferenceTriplet>, AlignmentError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| AlignmentError::Io {
        path: name.clone(),
        source,
    })?;
    let pool = parse_pool(std::io::BufReader::new(file), &name)?;
    let mut ids = HashMap::new();
    for t in &pool {
        if ids.insert(t.triplet_id.as_str(), ()).is_some() {
            return Err(AlignmentError::DuplicateTriplet(t.triplet_id.clone()));
        }
    }
    Ok(pool)
}

pub fn parse_pool(reader: impl BufRead, origin: &str) -> Result<Vec<PreferenceTriplet>, AlignmentError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let parse_err = |message: String| AlignmentError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}
