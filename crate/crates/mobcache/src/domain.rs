//! Core data types shared by every other module: person profiles, simulation
//! contexts, planar geometry, the activity token grammar, and latent
//! reasoning chains.

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latent embedding dimensionality.
pub const EMBED_DIM: usize = 64;
/// City bounding box side length in km; all coordinates live in `[0, 30]²`.
pub const CITY_SIZE_KM: f64 = 30.0;
/// Upper bound on single-hop travel distance.
pub const MAX_TRAVEL_KM: f64 = 50.0;
/// Number of activity categories.
pub const KIND_COUNT: usize = 8;
/// Half-hour time buckets per day.
pub const TIME_BUCKETS: usize = 48;
/// Log-spaced distance bins.
pub const DIST_BINS: usize = 10;
/// Minimum / maximum activities per day.
pub const MIN_ACTIVITIES: usize = 2;
pub const MAX_ACTIVITIES: usize = 9;
/// Dimensionality of the structured context feature vector.
pub const CONTEXT_FEATURE_DIM: usize = 19;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("{field} out of range: {detail}")]
    OutOfRange { field: &'static str, detail: String },
    #[error("token grammar violation at position {position}")]
    GrammarViolation { position: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Planar point, km east/north of the city origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self) -> bool {
        (0.0..=CITY_SIZE_KM).contains(&self.x) && (0.0..=CITY_SIZE_KM).contains(&self.y)
    }
}

// GeoPoint travels as a bare [x, y] array in every JSON interface.
impl Serialize for GeoPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(s)
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Self { x, y })
    }
}

/// Planar distance in km.
pub fn euclid_km(a: GeoPoint, b: GeoPoint) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// The eight activity categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    Home,
    Work,
    Dining,
    Shopping,
    Leisure,
    Errand,
    Health,
    Social,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; KIND_COUNT] = [
        ActivityKind::Home,
        ActivityKind::Work,
        ActivityKind::Dining,
        ActivityKind::Shopping,
        ActivityKind::Leisure,
        ActivityKind::Errand,
        ActivityKind::Health,
        ActivityKind::Social,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Demographic profile of one simulated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub user_id: u64,
    pub age: u32,
    pub income_level: u8,
    pub occupation: u8,
    pub home: GeoPoint,
    pub workplace: GeoPoint,
}

impl Profile {
    pub fn new(
        user_id: u64,
        age: u32,
        income_level: u8,
        occupation: u8,
        home: GeoPoint,
        workplace: GeoPoint,
    ) -> Result<Self, DomainError> {
        let p = Self { user_id, age, income_level, occupation, home, workplace };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if !(18..=80).contains(&self.age) {
            return Err(DomainError::OutOfRange {
                field: "age",
                detail: format!("{} not in [18, 80]", self.age),
            });
        }
        if self.income_level > 3 {
            return Err(DomainError::OutOfRange {
                field: "income_level",
                detail: format!("{} not in [0, 3]", self.income_level),
            });
        }
        if self.occupation > 11 {
            return Err(DomainError::OutOfRange {
                field: "occupation",
                detail: format!("{} not in [0, 11]", self.occupation),
            });
        }
        for (name, p) in [("home", self.home), ("workplace", self.workplace)] {
            if !p.in_bounds() {
                return Err(DomainError::OutOfRange {
                    field: name,
                    detail: format!("({}, {}) outside city bounds", p.x, p.y),
                });
            }
        }
        if euclid_km(self.home, self.workplace) < 0.1 {
            return Err(DomainError::OutOfRange {
                field: "workplace",
                detail: "home and workplace closer than 0.1 km".into(),
            });
        }
        Ok(())
    }
}

/// Everything the simulator knows about one person-day request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationContext {
    pub profile: Profile,
    pub date: NaiveDate,
    pub is_weekend: bool,
    pub city_id: u64,
}

impl SimulationContext {
    /// Builds a context, deriving `is_weekend` from the date.
    pub fn new(profile: Profile, date: NaiveDate, city_id: u64) -> Self {
        let is_weekend = matches!(date.weekday(), Weekday::Sat | Weekday::Sun);
        Self { profile, date, is_weekend, city_id }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        self.profile.validate()?;
        let weekend = matches!(self.date.weekday(), Weekday::Sat | Weekday::Sun);
        if weekend != self.is_weekend {
            return Err(DomainError::OutOfRange {
                field: "is_weekend",
                detail: format!("flag {} inconsistent with {}", self.is_weekend, self.date),
            });
        }
        Ok(())
    }

    /// Days-since-epoch form of the date, used in seed derivation.
    pub fn date_ordinal(&self) -> u64 {
        self.date.num_days_from_ce() as u64
    }
}

/// Structured feature vector used for context retrieval and model inputs.
///
/// Layout: `[age/80, income/3, occupation one-hot ×12, is_weekend,
/// home.x/30, home.y/30, workplace.x/30, workplace.y/30]`.
pub fn context_features(ctx: &SimulationContext) -> Vec<f64> {
    let p = &ctx.profile;
    let mut f = Vec::with_capacity(CONTEXT_FEATURE_DIM);
    f.push(p.age as f64 / 80.0);
    f.push(p.income_level as f64 / 3.0);
    for occ in 0..12 {
        f.push(if p.occupation as usize == occ { 1.0 } else { 0.0 });
    }
    f.push(if ctx.is_weekend { 1.0 } else { 0.0 });
    f.push(p.home.x / CITY_SIZE_KM);
    f.push(p.home.y / CITY_SIZE_KM);
    f.push(p.workplace.x / CITY_SIZE_KM);
    f.push(p.workplace.y / CITY_SIZE_KM);
    debug_assert_eq!(f.len(), CONTEXT_FEATURE_DIM);
    f
}

/// Cosine of two vectors, mapped from [-1, 1] to [0, 1].
pub fn cosine_unit(a: &[f64], b: &[f64]) -> f64 {
    (1.0 + cosine(a, b)) / 2.0
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarity of two contexts in [0, 1]; 1.0 iff the feature vectors match.
pub fn context_similarity(a: &SimulationContext, b: &SimulationContext) -> f64 {
    let fa = context_features(a);
    let fb = context_features(b);
    if fa == fb {
        return 1.0;
    }
    cosine_unit(&fa, &fb)
}

/// One mobility activity: movement to a place, then a stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub start_minute: u16,
    pub kind: ActivityKind,
    pub travel_km: f64,
    pub location: Option<GeoPoint>,
}

impl Activity {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.start_minute > 1439 {
            return Err(DomainError::OutOfRange {
                field: "start_minute",
                detail: format!("{} not in [0, 1439]", self.start_minute),
            });
        }
        if !(0.0..=MAX_TRAVEL_KM).contains(&self.travel_km) || !self.travel_km.is_finite() {
            return Err(DomainError::OutOfRange {
                field: "travel_km",
                detail: format!("{} not in [0, 50]", self.travel_km),
            });
        }
        Ok(())
    }
}

/// A decoded, geolocated person-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub context: SimulationContext,
    pub activities: Vec<Activity>,
}

impl Trajectory {
    pub fn new(context: SimulationContext, activities: Vec<Activity>) -> Result<Self, DomainError> {
        let t = Self { context, activities };
        t.validate()?;
        Ok(t)
    }

    /// The single validator every downstream module relies on: 2-9 activities,
    /// strictly increasing start times, every activity located.
    pub fn validate(&self) -> Result<(), DomainError> {
        let n = self.activities.len();
        if !(MIN_ACTIVITIES..=MAX_ACTIVITIES).contains(&n) {
            return Err(DomainError::InvalidTrajectory(format!(
                "{n} activities, expected 2..=9"
            )));
        }
        for (i, a) in self.activities.iter().enumerate() {
            a.validate()?;
            if a.location.is_none() {
                return Err(DomainError::InvalidTrajectory(format!(
                    "activity {i} has no location"
                )));
            }
            if i > 0 && a.start_minute <= self.activities[i - 1].start_minute {
                return Err(DomainError::InvalidTrajectory(format!(
                    "start times not strictly increasing at activity {i}"
                )));
            }
        }
        Ok(())
    }
}

/// One latent reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStep {
    pub embedding: Vec<f64>,
}

impl LatentStep {
    pub fn new(embedding: Vec<f64>) -> Result<Self, DomainError> {
        if embedding.len() != EMBED_DIM {
            return Err(DomainError::OutOfRange {
                field: "embedding",
                detail: format!("dimension {} != {EMBED_DIM}", embedding.len()),
            });
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::OutOfRange {
                field: "embedding",
                detail: "non-finite component".into(),
            });
        }
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm <= 16.0) {
            return Err(DomainError::OutOfRange {
                field: "embedding",
                detail: format!("L2 norm {norm} not in (0, 16]"),
            });
        }
        Ok(Self { embedding })
    }
}

/// Where a step in a chain came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    SplicedFrom(u64),
}

/// An ordered latent reasoning chain for one person-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub context: SimulationContext,
    pub steps: Vec<LatentStep>,
    pub provenance: Vec<Provenance>,
}

impl ReasoningChain {
    pub fn new(
        context: SimulationContext,
        steps: Vec<LatentStep>,
        provenance: Vec<Provenance>,
    ) -> Result<Self, DomainError> {
        if !(MIN_ACTIVITIES..=MAX_ACTIVITIES).contains(&steps.len()) {
            return Err(DomainError::OutOfRange {
                field: "steps",
                detail: format!("{} steps, expected 2..=9", steps.len()),
            });
        }
        if provenance.len() != steps.len() {
            return Err(DomainError::OutOfRange {
                field: "provenance",
                detail: "one tag per step required".into(),
            });
        }
        Ok(Self { context, steps, provenance })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Token grammar: BOS (kind time dist SEP)^T EOS, 2 <= T <= 9.
// ---------------------------------------------------------------------------

/// Token id layout over the 69-symbol vocabulary.
pub mod vocab {
    use super::{DIST_BINS, KIND_COUNT, TIME_BUCKETS};

    pub const KIND_BASE: u16 = 0;
    pub const TIME_BASE: u16 = KIND_COUNT as u16;
    pub const DIST_BASE: u16 = TIME_BASE + TIME_BUCKETS as u16;
    pub const SEP: u16 = DIST_BASE + DIST_BINS as u16;
    pub const BOS: u16 = SEP + 1;
    pub const EOS: u16 = BOS + 1;
    pub const SIZE: usize = EOS as usize + 1;
}

/// Half-hour bucket of a start minute.
pub fn time_bucket(start_minute: u16) -> usize {
    (start_minute / 30) as usize
}

/// Center minute of a half-hour bucket.
pub fn time_bucket_center(bucket: usize) -> u16 {
    (bucket * 30 + 15) as u16
}

/// Log-spaced distance bin of a travel distance.
pub fn distance_bin(travel_km: f64) -> usize {
    let x = (travel_km.ln_1p() / MAX_TRAVEL_KM.ln_1p()) * DIST_BINS as f64;
    (x.floor() as i64).clamp(0, DIST_BINS as i64 - 1) as usize
}

/// Lower and upper km bounds of a distance bin.
pub fn distance_bin_bounds(bin: usize) -> (f64, f64) {
    let scale = MAX_TRAVEL_KM.ln_1p() / DIST_BINS as f64;
    ((bin as f64 * scale).exp_m1(), ((bin + 1) as f64 * scale).exp_m1())
}

/// Representative km value of a distance bin (log-space center).
pub fn distance_bin_center(bin: usize) -> f64 {
    let scale = MAX_TRAVEL_KM.ln_1p() / DIST_BINS as f64;
    ((bin as f64 + 0.5) * scale).exp_m1()
}

/// A grammar-checked token sequence over the 69-symbol vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u16>,
}

impl TokenSequence {
    pub fn from_tokens(tokens: Vec<u16>) -> Result<Self, DomainError> {
        let seq = Self { tokens };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of activities encoded.
    pub fn activity_count(&self) -> usize {
        (self.tokens.len() - 2) / 4
    }

    /// Checks the `BOS (kind time dist SEP)^T EOS` grammar with `2 <= T <= 9`.
    pub fn validate(&self) -> Result<(), DomainError> {
        let t = &self.tokens;
        let fail = |position| Err(DomainError::GrammarViolation { position });
        if t.first() != Some(&vocab::BOS) {
            return fail(0);
        }
        let body = &t[1..];
        let mut pos = 1usize;
        let mut activities = 0usize;
        let mut i = 0usize;
        while i < body.len() && body[i] != vocab::EOS {
            if body.len() - i < 4 {
                return fail(pos + body.len() - i - 1 + 1);
            }
            let (kind, time, dist, sep) = (body[i], body[i + 1], body[i + 2], body[i + 3]);
            if !(vocab::KIND_BASE..vocab::TIME_BASE).contains(&kind) {
                return fail(pos);
            }
            if !(vocab::TIME_BASE..vocab::DIST_BASE).contains(&time) {
                return fail(pos + 1);
            }
            if !(vocab::DIST_BASE..vocab::SEP).contains(&dist) {
                return fail(pos + 2);
            }
            if sep != vocab::SEP {
                return fail(pos + 3);
            }
            activities += 1;
            i += 4;
            pos += 4;
        }
        if i >= body.len() {
            // ran out of tokens without seeing EOS
            return fail(t.len());
        }
        if i + 1 != body.len() {
            // trailing tokens after EOS
            return fail(pos + 1);
        }
        if !(MIN_ACTIVITIES..=MAX_ACTIVITIES).contains(&activities) {
            return fail(pos);
        }
        Ok(())
    }

    /// Iterates `(kind index, time bucket, distance bin)` triples.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.tokens[1..self.tokens.len() - 1].chunks(4).map(|c| {
            (
                (c[0] - vocab::KIND_BASE) as usize,
                (c[1] - vocab::TIME_BASE) as usize,
                (c[2] - vocab::DIST_BASE) as usize,
            )
        })
    }
}

/// Serializes activities into the canonical token grammar.
pub fn encode_tokens(activities: &[Activity]) -> Result<TokenSequence, DomainError> {
    if !(MIN_ACTIVITIES..=MAX_ACTIVITIES).contains(&activities.len()) {
        return Err(DomainError::OutOfRange {
            field: "activities",
            detail: format!("{} activities, expected 2..=9", activities.len()),
        });
    }
    let mut tokens = Vec::with_capacity(activities.len() * 4 + 2);
    tokens.push(vocab::BOS);
    for a in activities {
        a.validate()?;
        tokens.push(vocab::KIND_BASE + a.kind.index() as u16);
        tokens.push(vocab::TIME_BASE + time_bucket(a.start_minute) as u16);
        tokens.push(vocab::DIST_BASE + distance_bin(a.travel_km) as u16);
        tokens.push(vocab::SEP);
    }
    tokens.push(vocab::EOS);
    Ok(TokenSequence { tokens })
}

/// Recovers activities from a grammar-valid sequence. Kinds are exact; start
/// minutes come back as bucket centers and distances as bin centers.
pub fn decode_tokens(seq: &TokenSequence) -> Result<Vec<Activity>, DomainError> {
    seq.validate()?;
    Ok(seq
        .triples()
        .map(|(kind, bucket, bin)| Activity {
            start_minute: time_bucket_center(bucket),
            kind: ActivityKind::from_index(kind).unwrap(),
            travel_km: distance_bin_center(bin),
            location: None,
        })
        .collect())
}
