//! Constraint-governed sampling of triplets and pairs.
//!
//! Every sampler works the same way. Candidate pools are indexed by the
//! attributes a scenario constrains (emotion, speaker, linguistic content,
//! fixed-point score), so for each reference record the exact number of
//! valid positives and negatives is known without scanning. That makes the
//! feasibility precheck exact: a cell (scenario x reference emotion) is
//! refused only when it holds fewer distinct valid tuples than its quota.
//!
//! Drawing is hierarchical: a viable reference uniformly, then a positive
//! uniformly, then a negative group uniformly among non-empty groups, then a
//! negative within it. Duplicate tuples are rejected with a per-instance retry
//! cap; if the cap is hit, or the quota is more than half the cell's tuple
//! count, the cell is enumerated and sampled without replacement.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusManifest, EmotionLabel, Score, ScoreDelta, UtteranceRecord};
use crate::seed::{rng_from, run_seed};

/// Retries per instance before a cell falls back to enumeration.
pub const RETRY_CAP: usize = 10_000;
pub const DEFAULT_RUNS: u32 = 5;
pub const DEFAULT_INSTANCES: usize = 1000;
pub const MATCH_INSTANCES: usize = 500;
pub const DEFAULT_MARGIN: ScoreDelta = ScoreDelta::from_hundredths(100);

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("unknown utterance id {0:?}")]
    UnknownId(String),
    #[error("infeasible sampling request: {}", format_cells(.0))]
    Infeasible(Vec<CellShortfall>),
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
    #[error("instance file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_cells(cells: &[CellShortfall]) -> String {
    cells.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One (scenario, reference emotion) cell that cannot meet its quota.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellShortfall {
    pub scenario: String,
    /// `None` for cells without an emotion quota.
    pub emotion: Option<EmotionLabel>,
    pub required: usize,
    pub available: u64,
}

impl CellShortfall {
    pub fn shortfall(&self) -> u64 {
        (self.required as u64).saturating_sub(self.available)
    }
}

impl fmt::Display for CellShortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let emotion = self.emotion.map_or("any", EmotionLabel::as_str);
        write!(
            f,
            "{}/{}: need {}, {} distinct candidates (short by {})",
            self.scenario,
            emotion,
            self.required,
            self.available,
            self.shortfall()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Unconstrained,
    SpeakerLinguisticMatch,
    SpeakerDistractor,
    LinguisticDistractor,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Unconstrained,
        ScenarioKind::SpeakerLinguisticMatch,
        ScenarioKind::SpeakerDistractor,
        ScenarioKind::LinguisticDistractor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Unconstrained => "unconstrained",
            ScenarioKind::SpeakerLinguisticMatch => "speaker_linguistic_match",
            ScenarioKind::SpeakerDistractor => "speaker_distractor",
            ScenarioKind::LinguisticDistractor => "linguistic_distractor",
        }
    }

    pub fn default_instances(self) -> usize {
        match self {
            ScenarioKind::SpeakerLinguisticMatch => MATCH_INSTANCES,
            _ => DEFAULT_INSTANCES,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Valence,
    Arousal,
}

impl Dimension {
    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Valence => "valence",
            Dimension::Arousal => "arousal",
        }
    }

    pub fn score(self, r: &UtteranceRecord) -> Option<Score> {
        match self {
            Dimension::Valence => r.valence,
            Dimension::Arousal => r.arousal,
        }
    }

    /// The dimension held fixed when this one is evaluated.
    pub fn other(self) -> Dimension {
        match self {
            Dimension::Valence => Dimension::Arousal,
            Dimension::Arousal => Dimension::Valence,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Dimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valence" => Ok(Dimension::Valence),
            "arousal" => Ok(Dimension::Arousal),
            other => Err(format!("unknown dimension {other:?}")),
        }
    }
}

/// Scenario tag carried by a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstanceTag {
    Categorical(ScenarioKind),
    Shift(Dimension),
}

impl InstanceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            InstanceTag::Categorical(k) => k.as_str(),
            InstanceTag::Shift(Dimension::Valence) => "shift_valence",
            InstanceTag::Shift(Dimension::Arousal) => "shift_arousal",
        }
    }
}

impl fmt::Display for InstanceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InstanceTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shift_valence" => Ok(InstanceTag::Shift(Dimension::Valence)),
            "shift_arousal" => Ok(InstanceTag::Shift(Dimension::Arousal)),
            other => other.parse().map(InstanceTag::Categorical),
        }
    }
}

impl Serialize for InstanceTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for InstanceTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Splits `n` into four per-emotion quotas, remainder to the earliest labels.
pub fn equal_quotas(n: usize) -> [usize; 4] {
    let mut q = [n / 4; 4];
    for slot in q.iter_mut().take(n % 4) {
        *slot += 1;
    }
    q
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub instances_per_run: usize,
    /// Reference-emotion quotas in `EmotionLabel::ALL` order.
    pub quotas: [usize; 4],
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        Self::with_instances(kind, kind.default_instances())
    }

    pub fn with_instances(kind: ScenarioKind, instances_per_run: usize) -> Self {
        Self {
            kind,
            instances_per_run,
            quotas: equal_quotas(instances_per_run),
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let sum: usize = self.quotas.iter().sum();
        if sum != self.instances_per_run {
            return Err(SamplerError::InvalidSpec(format!(
                "quotas sum to {sum}, expected {}",
                self.instances_per_run
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub dimension: Dimension,
    pub instances_per_run: usize,
    pub margin: ScoreDelta,
    /// Also hold emotion fixed for valence triplets (arousal always does).
    pub fix_emotion: bool,
}

impl ShiftSpec {
    pub fn new(dimension: Dimension) -> Self {
        Self {
            dimension,
            instances_per_run: DEFAULT_INSTANCES,
            margin: DEFAULT_MARGIN,
            fix_emotion: false,
        }
    }

    fn fixes_emotion(&self) -> bool {
        fixes_emotion(self.dimension, self.fix_emotion)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub dimension: Dimension,
    pub pairs_per_run: usize,
    pub fix_emotion: bool,
}

impl PairSpec {
    pub fn new(dimension: Dimension) -> Self {
        Self {
            dimension,
            pairs_per_run: DEFAULT_INSTANCES,
            fix_emotion: false,
        }
    }

    fn fixes_emotion(&self) -> bool {
        fixes_emotion(self.dimension, self.fix_emotion)
    }
}

fn fixes_emotion(dimension: Dimension, flag: bool) -> bool {
    dimension == Dimension::Arousal || flag
}

/// Arousal tasks keep the 25% per-emotion balance; valence tasks do not.
fn dimensional_quotas(dimension: Dimension, n: usize) -> Option<[usize; 4]> {
    (dimension == Dimension::Arousal).then(|| equal_quotas(n))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletInstance {
    pub scenario: InstanceTag,
    pub run_index: u32,
    pub ref_id: String,
    pub pos_id: String,
    pub neg_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairInstance {
    pub dimension: Dimension,
    pub run_index: u32,
    pub i_id: String,
    pub j_id: String,
    pub score_diff: ScoreDelta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub predicate: &'static str,
    pub passed: bool,
}

/// Per-predicate outcome of validating one instance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintReport {
    pub checks: Vec<Check>,
}

impl ConstraintReport {
    fn check(&mut self, predicate: &'static str, passed: bool) {
        self.checks.push(Check { predicate, passed });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.predicate).collect()
    }
}

fn resolve<'m>(manifest: &'m CorpusManifest, id: &str) -> Result<&'m UtteranceRecord, SamplerError> {
    manifest.get(id).ok_or_else(|| SamplerError::UnknownId(id.to_string()))
}

/// Evaluates every predicate of the instance's scenario. Shift triplets are
/// checked against the default shift spec for their dimension.
pub fn validate_instance(
    instance: &TripletInstance,
    manifest: &CorpusManifest,
) -> Result<ConstraintReport, SamplerError> {
    match instance.scenario {
        InstanceTag::Categorical(kind) => validate_categorical(instance, kind, manifest),
        InstanceTag::Shift(dim) => validate_shift(instance, manifest, &ShiftSpec::new(dim)),
    }
}

fn validate_categorical(
    t: &TripletInstance,
    kind: ScenarioKind,
    manifest: &CorpusManifest,
) -> Result<ConstraintReport, SamplerError> {
    let r = resolve(manifest, &t.ref_id)?;
    let p = resolve(manifest, &t.pos_id)?;
    let n = resolve(manifest, &t.neg_id)?;
    let mut rep = ConstraintReport::default();
    rep.check(
        "ids distinct",
        t.ref_id != t.pos_id && t.ref_id != t.neg_id && t.pos_id != t.neg_id,
    );
    rep.check("pos emotion matches ref", p.emotion == r.emotion);
    rep.check("neg emotion differs from ref", n.emotion != r.emotion);
    let same_speaker = p.speaker_id == r.speaker_id && n.speaker_id == r.speaker_id;
    let same_text = p.linguistic_id == r.linguistic_id && n.linguistic_id == r.linguistic_id;
    match kind {
        ScenarioKind::Unconstrained => {}
        ScenarioKind::SpeakerLinguisticMatch => {
            rep.check("speaker shared by all", same_speaker);
            rep.check("text shared by all", same_text);
        }
        ScenarioKind::SpeakerDistractor => {
            rep.check("text shared by all", same_text);
            rep.check("neg speaker matches ref", n.speaker_id == r.speaker_id);
            rep.check("pos speaker differs", p.speaker_id != r.speaker_id);
        }
        ScenarioKind::LinguisticDistractor => {
            rep.check("speaker shared by all", same_speaker);
            rep.check("neg text matches ref", n.linguistic_id == r.linguistic_id);
            rep.check("pos text differs", p.linguistic_id != r.linguistic_id);
        }
    }
    Ok(rep)
}

/// Checks a shift triplet: fixed attributes equal, exact positive score,
/// negative at least `spec.margin` away.
pub fn validate_shift(
    t: &TripletInstance,
    manifest: &CorpusManifest,
    spec: &ShiftSpec,
) -> Result<ConstraintReport, SamplerError> {
    let r = resolve(manifest, &t.ref_id)?;
    let p = resolve(manifest, &t.pos_id)?;
    let n = resolve(manifest, &t.neg_id)?;
    let dim = spec.dimension;
    let mut rep = ConstraintReport::default();
    rep.check(
        "ids distinct",
        t.ref_id != t.pos_id && t.ref_id != t.neg_id && t.pos_id != t.neg_id,
    );
    rep.check("tag matches dimension", t.scenario == InstanceTag::Shift(dim));
    let all = [r, p, n];
    let scores_present = all.iter().all(|x| x.valence.is_some() && x.arousal.is_some());
    rep.check("scores present", scores_present);
    if !scores_present {
        return Ok(rep);
    }
    let fixed = dim.other();
    rep.check(
        match fixed {
            Dimension::Valence => "valence fixed",
            Dimension::Arousal => "arousal fixed",
        },
        all.iter().all(|x| fixed.score(x) == fixed.score(r)),
    );
    if spec.fixes_emotion() {
        rep.check("emotion fixed", all.iter().all(|x| x.emotion == r.emotion));
    }
    let s = |x: &UtteranceRecord| dim.score(x).expect("checked above");
    rep.check("pos score equals ref", s(p) == s(r));
    rep.check("neg margin", s(n).abs_diff(s(r)) >= spec.margin);
    Ok(rep)
}

/// Checks a monotonicity pair against its fixed-attribute constraints.
pub fn validate_pair(
    pair: &PairInstance,
    manifest: &CorpusManifest,
    spec: &PairSpec,
) -> Result<ConstraintReport, SamplerError> {
    let a = resolve(manifest, &pair.i_id)?;
    let b = resolve(manifest, &pair.j_id)?;
    let dim = spec.dimension;
    let mut rep = ConstraintReport::default();
    rep.check("ids distinct", pair.i_id != pair.j_id);
    rep.check("tag matches dimension", pair.dimension == dim);
    let present = [a, b].iter().all(|x| x.valence.is_some() && x.arousal.is_some());
    rep.check("scores present", present);
    if !present {
        return Ok(rep);
    }
    let fixed = dim.other();
    rep.check(
        match fixed {
            Dimension::Valence => "valence fixed",
            Dimension::Arousal => "arousal fixed",
        },
        fixed.score(a) == fixed.score(b),
    );
    if spec.fixes_emotion() {
        rep.check("emotion fixed", a.emotion == b.emotion);
    }
    let diff = dim.score(a).unwrap().abs_diff(dim.score(b).unwrap());
    rep.check("score diff recorded", diff == pair.score_diff);
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Candidate pools
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Exclude {
    Nothing,
    Record(usize),
    Speaker(u32),
    Text(u32),
}

/// Up to two sorted slices of record positions minus an exclusion, with the
/// exact size of the allowed set.
#[derive(Debug, Clone, Copy)]
struct Candidates<'a> {
    parts: [&'a [usize]; 2],
    exclude: Exclude,
    count: usize,
}

impl<'a> Candidates<'a> {
    fn new(base: &'a [usize], exclude: Exclude, count: usize) -> Self {
        Self {
            parts: [base, &[]],
            exclude,
            count,
        }
    }

    fn split(lo: &'a [usize], hi: &'a [usize]) -> Self {
        Self {
            parts: [lo, hi],
            exclude: Exclude::Nothing,
            count: lo.len() + hi.len(),
        }
    }

    fn total(&self) -> usize {
        self.parts[0].len() + self.parts[1].len()
    }

    fn at(&self, i: usize) -> usize {
        let first = self.parts[0].len();
        if i < first {
            self.parts[0][i]
        } else {
            self.parts[1][i - first]
        }
    }

    fn allowed(&self, x: usize, attrs: &Attrs) -> bool {
        match self.exclude {
            Exclude::Nothing => true,
            Exclude::Record(r) => x != r,
            Exclude::Speaker(s) => attrs.speaker[x] != s,
            Exclude::Text(t) => attrs.text[x] != t,
        }
    }

    fn iter(&self, attrs: &'a Attrs) -> impl Iterator<Item = usize> + '_ {
        self.parts[0]
            .iter()
            .chain(self.parts[1])
            .copied()
            .filter(move |&x| self.allowed(x, attrs))
    }

    /// Uniform draw from the allowed set; `count` must be positive.
    fn draw(&self, rng: &mut ChaCha8Rng, attrs: &Attrs) -> usize {
        debug_assert!(self.count > 0);
        if let Exclude::Nothing = self.exclude {
            return self.at(rng.random_range(0..self.total()));
        }
        for _ in 0..64 {
            let x = self.at(rng.random_range(0..self.total()));
            if self.allowed(x, attrs) {
                return x;
            }
        }
        let k = rng.random_range(0..self.count);
        self.iter(attrs).nth(k).expect("count matches allowed set")
    }
}

/// Interned per-record attributes.
struct Attrs {
    speaker: Vec<u32>,
    text: Vec<u32>,
    emotion: Vec<EmotionLabel>,
}

impl Attrs {
    fn new(manifest: &CorpusManifest) -> Self {
        let mut speakers: HashMap<&str, u32> = HashMap::new();
        let mut texts: HashMap<&str, u32> = HashMap::new();
        let mut out = Attrs {
            speaker: Vec::with_capacity(manifest.len()),
            text: Vec::with_capacity(manifest.len()),
            emotion: Vec::with_capacity(manifest.len()),
        };
        for r in &manifest.records {
            let n = speakers.len() as u32;
            out.speaker.push(*speakers.entry(&r.speaker_id).or_insert(n));
            let n = texts.len() as u32;
            out.text.push(*texts.entry(&r.linguistic_id).or_insert(n));
            out.emotion.push(r.emotion);
        }
        out
    }
}

/// What a reference can be paired with: positives, and non-empty negative
/// groups (a negative group is chosen uniformly, then a member uniformly).
struct RefPlan<'a> {
    reference: usize,
    pos: Candidates<'a>,
    negs: Vec<Candidates<'a>>,
}

impl RefPlan<'_> {
    fn tuple_count(&self) -> u64 {
        self.pos.count as u64 * self.negs.iter().map(|c| c.count as u64).sum::<u64>()
    }
}

type Tuple = (usize, usize, usize);

/// Draws `quota` distinct tuples from one cell.
fn sample_cell(rng: &mut ChaCha8Rng, plans: &[RefPlan<'_>], attrs: &Attrs, quota: usize, total: u64) -> Vec<Tuple> {
    if quota == 0 {
        return Vec::new();
    }
    if (quota as u64) * 2 > total {
        return enumerate_and_pick(rng, plans, attrs, quota, &HashSet::new());
    }
    let mut seen: HashSet<Tuple> = HashSet::with_capacity(quota);
    let mut out = Vec::with_capacity(quota);
    while out.len() < quota {
        let mut placed = false;
        for _ in 0..RETRY_CAP {
            let plan = &plans[rng.random_range(0..plans.len())];
            let pos = plan.pos.draw(rng, attrs);
            let group = &plan.negs[rng.random_range(0..plan.negs.len())];
            let neg = group.draw(rng, attrs);
            let t = (plan.reference, pos, neg);
            if seen.insert(t) {
                out.push(t);
                placed = true;
                break;
            }
        }
        if !placed {
            let rest = enumerate_and_pick(rng, plans, attrs, quota - out.len(), &seen);
            out.extend(rest);
        }
    }
    out
}

fn enumerate_and_pick(
    rng: &mut ChaCha8Rng,
    plans: &[RefPlan<'_>],
    attrs: &Attrs,
    want: usize,
    used: &HashSet<Tuple>,
) -> Vec<Tuple> {
    let mut all = Vec::new();
    for plan in plans {
        for pos in plan.pos.iter(attrs) {
            for group in &plan.negs {
                for neg in group.iter(attrs) {
                    let t = (plan.reference, pos, neg);
                    if !used.contains(&t) {
                        all.push(t);
                    }
                }
            }
        }
    }
    debug_assert!(all.len() >= want, "precheck guarantees enough tuples");
    let mut picks: Vec<usize> = index::sample(rng, all.len(), want).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| all[i]).collect()
}

/// A cell: its plans, quota, and exact distinct-tuple count.
struct Cell<'a> {
    emotion: Option<EmotionLabel>,
    quota: usize,
    plans: Vec<RefPlan<'a>>,
    total: u64,
}

fn precheck(scenario: &str, cells: &[Cell<'_>]) -> Result<(), SamplerError> {
    let short: Vec<CellShortfall> = cells
        .iter()
        .filter(|c| c.quota > 0 && c.total < c.quota as u64)
        .map(|c| CellShortfall {
            scenario: scenario.to_string(),
            emotion: c.emotion,
            required: c.quota,
            available: c.total,
        })
        .collect();
    if short.is_empty() {
        Ok(())
    } else {
        Err(SamplerError::Infeasible(short))
    }
}

fn run_cells(rng: &mut ChaCha8Rng, cells: &[Cell<'_>], attrs: &Attrs) -> Vec<Tuple> {
    let mut out = Vec::new();
    for c in cells {
        out.extend(sample_cell(rng, &c.plans, attrs, c.quota, c.total));
    }
    out.shuffle(rng);
    out
}

fn to_triplets(
    manifest: &CorpusManifest,
    tag: InstanceTag,
    run_index: u32,
    tuples: Vec<Tuple>,
) -> Vec<TripletInstance> {
    let id = |i: usize| manifest.records[i].id.clone();
    tuples
        .into_iter()
        .map(|(r, p, n)| TripletInstance {
            scenario: tag,
            run_index,
            ref_id: id(r),
            pos_id: id(p),
            neg_id: id(n),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Categorical scenarios
// ---------------------------------------------------------------------------

type Key2 = (u32, EmotionLabel);
type Key3 = (u32, u32, EmotionLabel);

struct CategoricalIndex {
    by_emotion: [Vec<usize>; 4],
    by_speaker: HashMap<Key2, Vec<usize>>,
    by_text: HashMap<Key2, Vec<usize>>,
    by_both: HashMap<Key3, Vec<usize>>,
}

impl CategoricalIndex {
    fn new(attrs: &Attrs) -> Self {
        let mut idx = CategoricalIndex {
            by_emotion: Default::default(),
            by_speaker: HashMap::new(),
            by_text: HashMap::new(),
            by_both: HashMap::new(),
        };
        for i in 0..attrs.emotion.len() {
            let (s, t, e) = (attrs.speaker[i], attrs.text[i], attrs.emotion[i]);
            idx.by_emotion[e.index()].push(i);
            idx.by_speaker.entry((s, e)).or_default().push(i);
            idx.by_text.entry((t, e)).or_default().push(i);
            idx.by_both.entry((s, t, e)).or_default().push(i);
        }
        idx
    }

    fn both(&self, s: u32, t: u32, e: EmotionLabel) -> &[usize] {
        self.by_both.get(&(s, t, e)).map_or(&[], Vec::as_slice)
    }

    fn plan(&self, kind: ScenarioKind, r: usize, attrs: &Attrs) -> Option<RefPlan<'_>> {
        let (s, t, e) = (attrs.speaker[r], attrs.text[r], attrs.emotion[r]);
        let same_both = self.both(s, t, e);
        let pos = match kind {
            ScenarioKind::Unconstrained => {
                let base = &self.by_emotion[e.index()];
                Candidates::new(base, Exclude::Record(r), base.len() - 1)
            }
            ScenarioKind::SpeakerLinguisticMatch => Candidates::new(same_both, Exclude::Record(r), same_both.len() - 1),
            ScenarioKind::SpeakerDistractor => {
                let base = &self.by_text[&(t, e)];
                Candidates::new(base, Exclude::Speaker(s), base.len() - same_both.len())
            }
            ScenarioKind::LinguisticDistractor => {
                let base = &self.by_speaker[&(s, e)];
                Candidates::new(base, Exclude::Text(t), base.len() - same_both.len())
            }
        };
        if pos.count == 0 {
            return None;
        }
        let negs: Vec<Candidates<'_>> = EmotionLabel::ALL
            .into_iter()
            .filter(|&other| other != e)
            .map(|other| {
                let base: &[usize] = match kind {
                    ScenarioKind::Unconstrained => &self.by_emotion[other.index()],
                    _ => self.both(s, t, other),
                };
                Candidates::new(base, Exclude::Nothing, base.len())
            })
            .filter(|c| c.count > 0)
            .collect();
        if negs.is_empty() {
            return None;
        }
        Some(RefPlan {
            reference: r,
            pos,
            negs,
        })
    }
}

fn categorical_cells<'a>(spec: &ScenarioSpec, index: &'a CategoricalIndex, attrs: &Attrs) -> Vec<Cell<'a>> {
    EmotionLabel::ALL
        .into_iter()
        .map(|e| {
            let plans: Vec<RefPlan<'_>> = index.by_emotion[e.index()]
                .iter()
                .filter_map(|&r| index.plan(spec.kind, r, attrs))
                .collect();
            let total = plans.iter().map(RefPlan::tuple_count).sum();
            Cell {
                emotion: Some(e),
                quota: spec.quotas[e.index()],
                plans,
                total,
            }
        })
        .collect()
}

/// Samples `runs` independent instance sets for one categorical scenario.
pub fn sample_categorical(
    manifest: &CorpusManifest,
    spec: &ScenarioSpec,
    seed: u64,
    runs: u32,
) -> Result<Vec<Vec<TripletInstance>>, SamplerError> {
    spec.validate()?;
    let attrs = Attrs::new(manifest);
    let index = CategoricalIndex::new(&attrs);
    let cells = categorical_cells(spec, &index, &attrs);
    precheck(spec.kind.as_str(), &cells)?;
    let tag = InstanceTag::Categorical(spec.kind);
    Ok((0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = rng_from(run_seed(seed, run, tag.as_str()));
            to_triplets(manifest, tag, run, run_cells(&mut rng, &cells, &attrs))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Dimensional tasks
// ---------------------------------------------------------------------------

/// Fixed-attribute group key: the other dimension's score, and the emotion
/// when it is held fixed.
type GroupKey = (Score, Option<EmotionLabel>);

struct DimensionalIndex {
    /// Members of each group sorted by target score.
    groups: HashMap<GroupKey, Vec<usize>>,
    scores: Vec<Option<Score>>,
}

impl DimensionalIndex {
    fn new(manifest: &CorpusManifest, dim: Dimension, fix_emotion: bool) -> Self {
        let mut groups: HashMap<GroupKey, Vec<usize>> = HashMap::new();
        let mut scores = vec![None; manifest.len()];
        for (i, r) in manifest.records.iter().enumerate() {
            let (Some(target), Some(fixed)) = (dim.score(r), dim.other().score(r)) else {
                continue;
            };
            scores[i] = Some(target);
            groups
                .entry((fixed, fix_emotion.then_some(r.emotion)))
                .or_default()
                .push(i);
        }
        for members in groups.values_mut() {
            members.sort_by_key(|&i| (scores[i], i));
        }
        Self { groups, scores }
    }

    fn score(&self, i: usize) -> Score {
        self.scores[i].expect("grouped records have scores")
    }

    /// Canonical group order, independent of hash iteration.
    fn sorted_groups(&self) -> Vec<(&GroupKey, &Vec<usize>)> {
        let mut g: Vec<_> = self.groups.iter().collect();
        g.sort_by_key(|(k, _)| **k);
        g
    }
}

fn shift_plans<'a>(
    index: &'a DimensionalIndex,
    margin: ScoreDelta,
    manifest: &CorpusManifest,
) -> Vec<(EmotionLabel, RefPlan<'a>)> {
    let mut plans = Vec::new();
    for (_, members) in index.sorted_groups() {
        for (pos_in_group, &r) in members.iter().enumerate() {
            let s = index.score(r);
            let lo_equal = members.partition_point(|&x| index.score(x) < s);
            let hi_equal = members.partition_point(|&x| index.score(x) <= s);
            let same = &members[lo_equal..hi_equal];
            debug_assert!((lo_equal..hi_equal).contains(&pos_in_group));
            if same.len() < 2 {
                continue;
            }
            let m = margin.hundredths();
            let below = members.partition_point(|&x| index.score(x).hundredths() + m <= s.hundredths());
            let above = members.partition_point(|&x| index.score(x).hundredths() < s.hundredths() + m);
            let neg = Candidates::split(&members[..below], &members[above..]);
            if neg.count == 0 {
                continue;
            }
            plans.push((
                manifest.records[r].emotion,
                RefPlan {
                    reference: r,
                    pos: Candidates::new(same, Exclude::Record(r), same.len() - 1),
                    negs: vec![neg],
                },
            ));
        }
    }
    plans.sort_by_key(|(_, p)| p.reference);
    plans
}

fn split_by_emotion<T>(
    items: Vec<(EmotionLabel, T)>,
    quotas: Option<[usize; 4]>,
    n: usize,
) -> Vec<(Option<EmotionLabel>, usize, Vec<T>)> {
    match quotas {
        Some(q) => {
            let mut buckets: [Vec<T>; 4] = Default::default();
            for (e, item) in items {
                buckets[e.index()].push(item);
            }
            EmotionLabel::ALL
                .into_iter()
                .zip(buckets)
                .map(|(e, b)| (Some(e), q[e.index()], b))
                .collect()
        }
        None => vec![(None, n, items.into_iter().map(|(_, x)| x).collect())],
    }
}

/// Samples shift-discriminability triplets: positive with exactly the
/// reference's score, negative at least `spec.margin` away, fixed attributes
/// equal across the triplet.
pub fn sample_shift(
    manifest: &CorpusManifest,
    spec: &ShiftSpec,
    seed: u64,
    runs: u32,
) -> Result<Vec<Vec<TripletInstance>>, SamplerError> {
    let index = DimensionalIndex::new(manifest, spec.dimension, spec.fixes_emotion());
    let attrs = Attrs::new(manifest);
    let plans = shift_plans(&index, spec.margin, manifest);
    let quotas = dimensional_quotas(spec.dimension, spec.instances_per_run);
    let cells: Vec<Cell<'_>> = split_by_emotion(plans, quotas, spec.instances_per_run)
        .into_iter()
        .map(|(emotion, quota, plans)| Cell {
            emotion,
            quota,
            total: plans.iter().map(RefPlan::tuple_count).sum(),
            plans,
        })
        .collect();
    let tag = InstanceTag::Shift(spec.dimension);
    precheck(tag.as_str(), &cells)?;
    Ok((0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = rng_from(run_seed(seed, run, tag.as_str()));
            to_triplets(manifest, tag, run, run_cells(&mut rng, &cells, &attrs))
        })
        .collect())
}

struct PairCell<'a> {
    emotion: Option<EmotionLabel>,
    quota: usize,
    groups: Vec<&'a [usize]>,
    /// Running pair counts, for weighted group choice.
    cumulative: Vec<u64>,
}

impl PairCell<'_> {
    fn total(&self) -> u64 {
        self.cumulative.last().copied().unwrap_or(0)
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let k = rng.random_range(0..self.total());
        let g = self.cumulative.partition_point(|&c| c <= k);
        let members = self.groups[g];
        let a = rng.random_range(0..members.len());
        let mut b = rng.random_range(0..members.len() - 1);
        if b >= a {
            b += 1;
        }
        let (x, y) = (members[a], members[b]);
        (x.min(y), x.max(y))
    }

    fn enumerate(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for members in &self.groups {
            for (i, &x) in members.iter().enumerate() {
                for &y in &members[i + 1..] {
                    out.push((x.min(y), x.max(y)));
                }
            }
        }
        out
    }
}

fn sample_pair_cell(rng: &mut ChaCha8Rng, cell: &PairCell<'_>) -> Vec<(usize, usize)> {
    let quota = cell.quota;
    if quota == 0 {
        return Vec::new();
    }
    let pick_from = |rng: &mut ChaCha8Rng, all: Vec<(usize, usize)>, want: usize| {
        let mut picks = index::sample(rng, all.len(), want).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| all[i]).collect::<Vec<_>>()
    };
    if (quota as u64) * 2 > cell.total() {
        return pick_from(rng, cell.enumerate(), quota);
    }
    let mut seen = HashSet::with_capacity(quota);
    let mut out = Vec::with_capacity(quota);
    while out.len() < quota {
        let mut placed = false;
        for _ in 0..RETRY_CAP {
            let p = cell.draw(rng);
            if seen.insert(p) {
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            let rest: Vec<_> = cell.enumerate().into_iter().filter(|p| !seen.contains(p)).collect();
            let want = quota - out.len();
            out.extend(pick_from(rng, rest, want));
        }
    }
    out
}

/// Samples unordered pairs sharing the fixed attributes for `spec.dimension`,
/// recording the absolute score difference.
pub fn sample_monotonic_pairs(
    manifest: &CorpusManifest,
    spec: &PairSpec,
    seed: u64,
    runs: u32,
) -> Result<Vec<Vec<PairInstance>>, SamplerError> {
    let dim = spec.dimension;
    let index = DimensionalIndex::new(manifest, dim, spec.fixes_emotion());
    let groups: Vec<(EmotionLabel, &[usize])> = index
        .sorted_groups()
        .into_iter()
        .filter(|(_, m)| m.len() >= 2)
        .map(|(k, m)| (k.1.unwrap_or(EmotionLabel::Neutral), m.as_slice()))
        .collect();
    let quotas = dimensional_quotas(dim, spec.pairs_per_run);
    let cells: Vec<PairCell<'_>> = split_by_emotion(groups, quotas, spec.pairs_per_run)
        .into_iter()
        .map(|(emotion, quota, groups)| {
            let mut acc = 0u64;
            let cumulative = groups
                .iter()
                .map(|m| {
                    let n = m.len() as u64;
                    acc += n * (n - 1) / 2;
                    acc
                })
                .collect();
            PairCell {
                emotion,
                quota,
                groups,
                cumulative,
            }
        })
        .collect();
    let tag = format!("pairs_{}", dim.as_str());
    let short: Vec<CellShortfall> = cells
        .iter()
        .filter(|c| c.quota > 0 && c.total() < c.quota as u64)
        .map(|c| CellShortfall {
            scenario: tag.clone(),
            emotion: c.emotion,
            required: c.quota,
            available: c.total(),
        })
        .collect();
    if !short.is_empty() {
        return Err(SamplerError::Infeasible(short));
    }
    Ok((0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = rng_from(run_seed(seed, run, &tag));
            let mut pairs: Vec<(usize, usize)> = cells.iter().flat_map(|c| sample_pair_cell(&mut rng, c)).collect();
            pairs.shuffle(&mut rng);
            pairs
                .into_iter()
                .map(|(i, j)| PairInstance {
                    dimension: dim,
                    run_index: run,
                    i_id: manifest.records[i].id.clone(),
                    j_id: manifest.records[j].id.clone(),
                    score_diff: index.score(i).abs_diff(index.score(j)),
                })
                .collect()
        })
        .collect())
}

/// Negative-emotion histogram of a categorical run, for auditing.
pub fn negative_emotion_counts(
    instances: &[TripletInstance],
    manifest: &CorpusManifest,
) -> Result<[usize; 4], SamplerError> {
    let mut counts = [0; 4];
    for t in instances {
        counts[resolve(manifest, &t.neg_id)?.emotion.index()] += 1;
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Line-delimited JSON encoding of any instance list.
pub fn encode_lines<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("instances serialize");
        out.push(b'\n');
    }
    out
}

pub fn decode_lines<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, SamplerError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SamplerError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SamplerError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_instances<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), SamplerError> {
    let path = path.as_ref();
    let io = |source| SamplerError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode_lines(items)).map_err(io)
}

pub fn read_instances<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, SamplerError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|source| SamplerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_lines(std::io::BufReader::new(f))
}

/// SHA-256 of the persisted form, hex encoded.
pub fn instances_digest<T: Serialize>(items: &[T]) -> String {
    let digest = Sha256::digest(encode_lines(items));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
