//! Shared domain types: aggregation keys, report ids, logical time, and the
//! source/trigger registration records the clients consume.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("expected 32 lowercase hex digits, got {0} characters")]
    BadHexLength(usize),
    #[error("expected lowercase hex digit, got {0:?}")]
    BadHexDigit(char),
}

/// 128-bit aggregation key. Serialized everywhere as exactly 32 lowercase
/// hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Key(pub u128);

/// 128-bit report identifier, drawn fresh per aggregatable report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReportId(pub u128);

fn parse_hex128(s: &str) -> Result<u128, ModelError> {
    if s.len() != 32 {
        return Err(ModelError::BadHexLength(s.len()));
    }
    let mut out: u128 = 0;
    for c in s.chars() {
        let d = match c {
            '0'..='9' => c as u128 - '0' as u128,
            'a'..='f' => c as u128 - 'a' as u128 + 10,
            other => return Err(ModelError::BadHexDigit(other)),
        };
        out = (out << 4) | d;
    }
    Ok(out)
}

impl Key {
    pub const ZERO: Key = Key(0);

    /// Merge two keys bitwise; how a trigger key refines a source key.
    pub fn combine(self, other: Key) -> Key {
        Key(self.0 | other.0)
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }

    pub fn from_hex(s: &str) -> Result<Key, ModelError> {
        parse_hex128(s).map(Key)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl ReportId {
    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }

    pub fn from_hex(s: &str) -> Result<ReportId, ModelError> {
        parse_hex128(s).map(ReportId)
    }

    /// Draw a fresh id from the run's seeded id stream.
    pub fn random<R: Rng>(rng: &mut R) -> ReportId {
        let hi = rng.random::<u64>() as u128;
        let lo = rng.random::<u64>() as u128;
        ReportId((hi << 64) | lo)
    }
}

impl fmt::Display for ReportId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// A point on the simulation's logical clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Tick(pub u64);

impl Tick {
    pub fn offset(self, d: u64) -> Tick {
        Tick(self.0.saturating_add(d))
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An impression registered by a publisher page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceRegistration {
    pub src_id: String,
    /// Advertiser site whose conversions may attribute to this source.
    pub dest: String,
    /// Last tick at which this source can win an attribution (inclusive).
    pub expires: Tick,
    pub filters: BTreeSet<String>,
    pub key: Key,
    pub registered_at: Tick,
}

/// A conversion registered on the advertiser site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerRegistration {
    pub trig_id: String,
    pub dest: String,
    pub filters: BTreeSet<String>,
    pub key: Key,
    pub value: u64,
    pub at: Tick,
}

/// The payload of a non-null aggregatable report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Contribution {
    pub key: Key,
    pub value: u64,
}

/// Per-trigger record sent to the ad-tech. Every trigger produces exactly
/// one report; `contribution` is `None` (a null report) when nothing was
/// attributed, so that receiving a report reveals nothing by itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatableReport {
    pub id: ReportId,
    pub contribution: Option<Contribution>,
}

impl AggregatableReport {
    pub fn null(id: ReportId) -> Self {
        AggregatableReport { id, contribution: None }
    }

    pub fn is_null(&self) -> bool {
        self.contribution.is_none()
    }
}

/// Bitwise-OR merge of source and trigger keys.
pub fn combine_keys(a: Key, b: Key) -> Key {
    a.combine(b)
}

/// Filter match = non-empty intersection. Both sides empty never matches.
pub fn filters_match(a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
    a.iter().any(|f| b.contains(f))
}

/// Whether a source can still win attributions at `now`. The expiry bound
/// is inclusive: a trigger landing exactly at `expires` still matches.
pub fn source_active(source: &SourceRegistration, now: Tick) -> bool {
    source.registered_at <= now && now <= source.expires
}
