//! The batched summary mechanism: an adversary submits (database, query)
//! turns; each turn admits new records under per-unit contribution budgets,
//! gates the query on per-item privacy budgets (aborting if any requested
//! item cannot pay), and answers with thresholded noisy per-key sums.
//!
//! This is the object the privacy accounting is stated against. Every run
//! leaves a trace from which per-unit (eps, delta) rollouts can be
//! recomputed, and [`remove_unit`] produces the neighboring database used
//! by the audits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregation::NoisePolicy;
use crate::interactive::{Adversary, InteractiveMechanism};
use crate::kahan::KahanSum;
use crate::model::Key;
use crate::noise::{compute_tau, DLap};

#[derive(Debug, Error, PartialEq)]
pub enum SummaryError {
    #[error("id {0:?} is empty or uses characters outside [A-Za-z0-9_.-]")]
    BadId(String),
    #[error("item {0} appears in more than one record")]
    DuplicateItem(String),
    #[error("unit {0:?} does not belong in a {1:?} database")]
    WrongUnitKind(String, Flavor),
    #[error("item {0:?} does not belong in a {1:?} database")]
    WrongItemKind(String, Flavor),
    #[error("query epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("query delta must lie in [0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("budgets A1 and A0 must be at least 1")]
    InvalidBudget,
    #[error("caps must be finite and non-negative")]
    InvalidCaps,
    #[error("group size must be at least 1")]
    InvalidGroupSize,
    #[error("per-key sum overflowed")]
    Overflow,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("trace line {line}: {msg}")]
pub struct TraceParseError {
    pub line: usize,
    pub msg: String,
}

/// Which deployment the database models; decides what a privacy unit is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Units are sources; removing one reassigns its records to the
    /// dummy unit (the conversions still happened, unattributed).
    Ara,
    /// Units are (device, window) pairs; removing one blanks the storage
    /// states its records were computed from.
    Paa,
}

/// A privacy unit. `Dummy` absorbs records detached from a removed source.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Unit {
    Source(String),
    DeviceWindow(String, u64),
    Dummy,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Source(s) => write!(f, "src:{s}"),
            Unit::DeviceWindow(d, w) => write!(f, "dev:{d}@{w}"),
            Unit::Dummy => write!(f, "dummy"),
        }
    }
}

/// What a record contributes through: a report id for attribution, or a
/// storage state for private aggregation. `Dummy` is the blanked state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Item {
    Id(String),
    Dummy,
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Item::Id(s) => write!(f, "id:{s}"),
            Item::Dummy => write!(f, "dummy"),
        }
    }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

fn parse_unit(s: &str) -> Option<Unit> {
    if s == "dummy" {
        return Some(Unit::Dummy);
    }
    if let Some(id) = s.strip_prefix("src:") {
        return valid_id(id).then(|| Unit::Source(id.into()));
    }
    if let Some(rest) = s.strip_prefix("dev:") {
        let (dev, win) = rest.rsplit_once('@')?;
        return (valid_id(dev) && !win.is_empty())
            .then(|| win.parse().ok().map(|w| Unit::DeviceWindow(dev.into(), w)))
            .flatten();
    }
    None
}

fn parse_item(s: &str) -> Option<Item> {
    if s == "dummy" {
        return Some(Item::Dummy);
    }
    let id = s.strip_prefix("id:")?;
    valid_id(id).then(|| Item::Id(id.into()))
}

/// Records pairing a privacy unit with the item it contributes through.
/// A real item appears in at most one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementDatabase {
    flavor: Flavor,
    records: Vec<(Unit, Item)>,
}

impl MeasurementDatabase {
    pub fn new(flavor: Flavor, records: Vec<(Unit, Item)>) -> Result<Self, SummaryError> {
        let mut seen = BTreeSet::new();
        for (unit, item) in &records {
            match (flavor, unit) {
                (Flavor::Ara, Unit::Source(s)) | (Flavor::Paa, Unit::DeviceWindow(s, _)) => {
                    if !valid_id(s) {
                        return Err(SummaryError::BadId(s.clone()));
                    }
                }
                (Flavor::Ara, Unit::Dummy) => {}
                (_, u) => return Err(SummaryError::WrongUnitKind(u.to_string(), flavor)),
            }
            match (flavor, item) {
                (_, Item::Id(s)) => {
                    if !valid_id(s) {
                        return Err(SummaryError::BadId(s.clone()));
                    }
                    if !seen.insert(s.clone()) {
                        return Err(SummaryError::DuplicateItem(s.clone()));
                    }
                }
                (Flavor::Paa, Item::Dummy) => {}
                (_, i) => return Err(SummaryError::WrongItemKind(i.to_string(), flavor)),
            }
        }
        Ok(MeasurementDatabase { flavor, records })
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn records(&self) -> &[(Unit, Item)] {
        &self.records
    }

    pub fn units(&self) -> BTreeSet<&Unit> {
        self.records.iter().map(|(u, _)| u).collect()
    }
}

/// Which unit's data to detach when forming the neighboring database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RemovalTarget {
    Source(String),
    DeviceWindow(String, u64),
    /// Every window of this device strictly after the given one; models
    /// protecting a whole time range.
    DeviceSince(String, u64),
}

/// The neighboring database with one unit's data detached. Attribution
/// records move to the dummy unit; aggregation records keep their unit but
/// lose their storage state. A target matching nothing returns the
/// database unchanged.
pub fn remove_unit(db: &MeasurementDatabase, target: &RemovalTarget) -> MeasurementDatabase {
    let records = db
        .records
        .iter()
        .map(|(unit, item)| match (target, unit) {
            (RemovalTarget::Source(x), Unit::Source(s)) if s == x => {
                (Unit::Dummy, item.clone())
            }
            (RemovalTarget::DeviceWindow(d, w), Unit::DeviceWindow(dev, win))
                if dev == d && win == w =>
            {
                (unit.clone(), Item::Dummy)
            }
            (RemovalTarget::DeviceSince(d, t), Unit::DeviceWindow(dev, win))
                if dev == d && win > t =>
            {
                (unit.clone(), Item::Dummy)
            }
            _ => (unit.clone(), item.clone()),
        })
        .collect();
    MeasurementDatabase { flavor: db.flavor, records }
}

/// The adversary-chosen map from records to (key, value) contributions.
/// Pairs not in the table contribute nothing (key 0, value 0).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContributionTable {
    map: BTreeMap<(Unit, Item), (Key, u64)>,
}

impl ContributionTable {
    pub fn new(map: BTreeMap<(Unit, Item), (Key, u64)>) -> Self {
        ContributionTable { map }
    }

    pub fn insert(&mut self, unit: Unit, item: Item, key: Key, value: u64) {
        self.map.insert((unit, item), (key, value));
    }

    pub fn get(&self, unit: &Unit, item: &Item) -> (Key, u64) {
        self.map
            .get(&(unit.clone(), item.clone()))
            .copied()
            .unwrap_or((Key::ZERO, 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsrQuery {
    epsilon: f64,
    delta: f64,
    items: BTreeSet<Item>,
    table: ContributionTable,
}

impl MsrQuery {
    pub fn new(
        epsilon: f64,
        delta: f64,
        items: BTreeSet<Item>,
        table: ContributionTable,
    ) -> Result<Self, SummaryError> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(SummaryError::InvalidEpsilon(epsilon));
        }
        if !delta.is_finite() || !(0.0..=1.0).contains(&delta) {
            return Err(SummaryError::InvalidDelta(delta));
        }
        for item in &items {
            if let Item::Id(s) = item {
                if !valid_id(s) {
                    return Err(SummaryError::BadId(s.clone()));
                }
            }
        }
        Ok(MsrQuery { epsilon, delta, items, table })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn items(&self) -> &BTreeSet<Item> {
        &self.items
    }
}

/// A turn's answer. Abort is a first-class response: the adversary sees
/// it and can continue.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsrResponse {
    Summary(Vec<(Key, i64)>),
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsrParams {
    pub a1: u64,
    pub a0: u64,
    pub eps_cap: f64,
    pub delta_cap: f64,
    /// Finite key space the summaries range over.
    pub key_universe: BTreeSet<Key>,
    pub noise: NoisePolicy,
}

impl MsrParams {
    fn validate(&self) -> Result<(), SummaryError> {
        if self.a1 == 0 || self.a0 == 0 {
            return Err(SummaryError::InvalidBudget);
        }
        let caps_ok = |c: f64| c.is_finite() && c >= 0.0;
        if !caps_ok(self.eps_cap) || !caps_ok(self.delta_cap) {
            return Err(SummaryError::InvalidCaps);
        }
        Ok(())
    }
}

/// Deterministic result of a turn's admission and budget phases; the only
/// randomness left afterwards is the per-key noise.
#[derive(Debug, Clone, PartialEq)]
pub enum TurnOutcome {
    Aborted,
    Committed {
        /// Exact sum over admitted, queried reports for every universe key.
        sums: BTreeMap<Key, i64>,
        /// Release threshold; `None` (delta = 0) releases everything.
        tau: Option<u64>,
        /// Noise scale epsilon / A1.
        scale: f64,
    },
}

#[derive(Debug, Clone)]
pub struct SummaryMechanism {
    params: MsrParams,
    /// Per-unit (value, slots) spent against (A1, A0).
    contrib: BTreeMap<Unit, (u64, u64)>,
    /// Per-item (eps, delta) spent against the caps.
    budgets: BTreeMap<Item, (f64, f64)>,
    /// Admitted reports (item, key, value).
    reports: BTreeSet<(Item, Key, u64)>,
    trace: Trace,
}

impl SummaryMechanism {
    pub fn new(params: MsrParams) -> Result<Self, SummaryError> {
        params.validate()?;
        let trace = Trace::new(params.a1, params.a0, params.eps_cap, params.delta_cap);
        Ok(SummaryMechanism {
            params,
            contrib: BTreeMap::new(),
            budgets: BTreeMap::new(),
            reports: BTreeSet::new(),
            trace,
        })
    }

    pub fn params(&self) -> &MsrParams {
        &self.params
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Run the deterministic phases of one turn.
    ///
    /// Phase 1 admits each record whose unit can still pay for its
    /// contribution; admissions persist even if the turn later aborts.
    /// Phase 2 aborts if any *queried* item lacks budget, else charges
    /// every queried item, including items with no admitted reports.
    /// Phase 3 computes exact per-key sums over queried items.
    pub fn advance(
        &mut self,
        db: &MeasurementDatabase,
        query: &MsrQuery,
    ) -> Result<TurnOutcome, SummaryError> {
        for (unit, item) in &db.records {
            let (key, value) = query.table.get(unit, item);
            let (used_value, used_slots) =
                self.contrib.get(unit).copied().unwrap_or((0, 0));
            if used_value + value <= self.params.a1 && used_slots < self.params.a0 {
                self.contrib
                    .insert(unit.clone(), (used_value + value, used_slots + 1));
                self.reports.insert((item.clone(), key, value));
                self.trace.push_report(unit.clone(), item.clone(), value);
            }
        }

        let aborted = query.items.iter().any(|item| {
            let (e, d) = self.budgets.get(item).copied().unwrap_or((0.0, 0.0));
            e + query.epsilon > self.params.eps_cap
                || d + query.delta > self.params.delta_cap
        });
        self.trace.push_turn(
            query.epsilon,
            query.delta,
            query.items.clone(),
            aborted,
        );
        if aborted {
            return Ok(TurnOutcome::Aborted);
        }
        for item in &query.items {
            let entry = self.budgets.entry(item.clone()).or_insert((0.0, 0.0));
            entry.0 += query.epsilon;
            entry.1 += query.delta;
        }

        let mut sums: BTreeMap<Key, i64> =
            self.params.key_universe.iter().map(|k| (*k, 0)).collect();
        for (item, key, value) in &self.reports {
            if !query.items.contains(item) {
                continue;
            }
            if let Some(slot) = sums.get_mut(key) {
                *slot = i64::try_from(*value)
                    .ok()
                    .and_then(|v| slot.checked_add(v))
                    .ok_or(SummaryError::Overflow)?;
            }
        }
        let tau = compute_tau(self.params.a1, self.params.a0, query.epsilon, query.delta)
            .expect("query and params were validated");
        Ok(TurnOutcome::Committed {
            sums,
            tau,
            scale: query.epsilon / self.params.a1 as f64,
        })
    }

    /// One full turn: deterministic phases plus sampled noise.
    pub fn step_checked(
        &mut self,
        db: &MeasurementDatabase,
        query: &MsrQuery,
        rng: &mut ChaCha8Rng,
    ) -> Result<MsrResponse, SummaryError> {
        match self.advance(db, query)? {
            TurnOutcome::Aborted => Ok(MsrResponse::Abort),
            TurnOutcome::Committed { sums, tau, scale } => {
                let noise = self.params.noise;
                let dist = match noise {
                    NoisePolicy::Sampled => Some(match tau {
                        Some(t) => DLap::truncated(scale, t).expect("validated scale"),
                        None => DLap::untruncated(scale).expect("validated scale"),
                    }),
                    NoisePolicy::Disabled => None,
                };
                let mut entries = Vec::new();
                for (key, sum) in sums {
                    let noisy = match &dist {
                        Some(d) => sum + d.sample(rng),
                        None => sum,
                    };
                    let released = match tau {
                        None => true,
                        Some(t) => noisy > t as i64,
                    };
                    if released {
                        entries.push((key, noisy));
                    }
                }
                Ok(MsrResponse::Summary(entries))
            }
        }
    }
}

impl InteractiveMechanism for SummaryMechanism {
    type Db = MeasurementDatabase;
    type Query = MsrQuery;
    type Response = MsrResponse;

    fn step(&mut self, db: &Self::Db, query: &Self::Query, rng: &mut ChaCha8Rng) -> MsrResponse {
        // Sums live in i64; overflowing one takes ~9e18 of admitted value,
        // far outside anything this model runs.
        self.step_checked(db, query, rng).expect("per-key sum overflow")
    }
}

/// Condition a scripted adversary can branch on.
#[derive(Debug, Clone, PartialEq)]
pub enum TurnCondition {
    Always,
    LastAborted,
    /// Previous response released this key (at any value).
    LastReleased(Key),
    /// Previous response released this key with a value above the bound.
    LastValueAbove(Key, i64),
}

impl TurnCondition {
    pub fn matches(&self, transcript: &[MsrResponse]) -> bool {
        let last = transcript.last();
        match self {
            TurnCondition::Always => true,
            TurnCondition::LastAborted => matches!(last, Some(MsrResponse::Abort)),
            TurnCondition::LastReleased(key) => match last {
                Some(MsrResponse::Summary(entries)) => {
                    entries.iter().any(|(k, _)| k == key)
                }
                _ => false,
            },
            TurnCondition::LastValueAbove(key, bound) => match last {
                Some(MsrResponse::Summary(entries)) => {
                    entries.iter().any(|(k, v)| k == key && v > bound)
                }
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct MsrMove {
    pub db: MeasurementDatabase,
    pub query: MsrQuery,
}

/// One scripted turn: the first case whose condition matches the
/// transcript fires. A turn where nothing matches halts the interaction.
#[derive(Debug, Clone)]
pub struct ScriptedTurn {
    pub cases: Vec<(TurnCondition, MsrMove)>,
}

impl ScriptedTurn {
    pub fn unconditional(db: MeasurementDatabase, query: MsrQuery) -> Self {
        ScriptedTurn { cases: vec![(TurnCondition::Always, MsrMove { db, query })] }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedMsrAdversary {
    pub turns: Vec<ScriptedTurn>,
}

impl Adversary<SummaryMechanism> for ScriptedMsrAdversary {
    fn next_move(&self, transcript: &[MsrResponse]) -> Option<(MeasurementDatabase, MsrQuery)> {
        let turn = self.turns.get(transcript.len())?;
        let (_, mv) = turn.cases.iter().find(|(c, _)| c.matches(transcript))?;
        Some((mv.db.clone(), mv.query.clone()))
    }
}

/// Group privacy: protecting k units (or a k-window range under gradual
/// expiration) costs (k·eps, delta·(e^{k·eps}-1)/(e^eps-1)). The delta
/// factor is computed as the geometric sum 1 + e^eps + ... + e^{(k-1)eps},
/// which is exact where the quotient form would round.
pub fn group_privacy(eps: f64, delta: f64, k: u32) -> Result<(f64, f64), SummaryError> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(SummaryError::InvalidEpsilon(eps));
    }
    if !delta.is_finite() || !(0.0..=1.0).contains(&delta) {
        return Err(SummaryError::InvalidDelta(delta));
    }
    if k == 0 {
        return Err(SummaryError::InvalidGroupSize);
    }
    let mut factor = KahanSum::new();
    for i in 0..k {
        factor.add((eps * i as f64).exp());
    }
    Ok((k as f64 * eps, delta * factor.value()))
}

/// Everything needed to recompute per-unit privacy spend after a run:
/// admitted reports in order, and each turn's parameters and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    a1: u64,
    a0: u64,
    eps_cap: f64,
    delta_cap: f64,
    lines: Vec<TraceLine>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceLine {
    Report { unit: Unit, item: Item, value: u64 },
    Turn { epsilon: f64, delta: f64, items: BTreeSet<Item>, aborted: bool },
}

const TRACE_MAGIC: &str = "sandbox-measure-trace";
const TRACE_VERSION: &str = "v1";

impl Trace {
    pub fn new(a1: u64, a0: u64, eps_cap: f64, delta_cap: f64) -> Self {
        Trace { a1, a0, eps_cap, delta_cap, lines: Vec::new() }
    }

    pub fn a1(&self) -> u64 {
        self.a1
    }

    pub fn a0(&self) -> u64 {
        self.a0
    }

    pub fn caps(&self) -> (f64, f64) {
        (self.eps_cap, self.delta_cap)
    }

    pub fn lines(&self) -> &[TraceLine] {
        &self.lines
    }

    pub fn push_report(&mut self, unit: Unit, item: Item, value: u64) {
        self.lines.push(TraceLine::Report { unit, item, value });
    }

    pub fn push_turn(
        &mut self,
        epsilon: f64,
        delta: f64,
        items: BTreeSet<Item>,
        aborted: bool,
    ) {
        self.lines.push(TraceLine::Turn { epsilon, delta, items, aborted });
    }

    /// All units appearing in report lines.
    pub fn units(&self) -> BTreeSet<Unit> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                TraceLine::Report { unit, .. } => Some(unit.clone()),
                _ => None,
            })
            .collect()
    }

    /// Recompute one unit's privacy rollout: per committed turn, the unit
    /// is charged eps·(queried value mass)/A1 and delta·(queried report
    /// count)/A0, over the reports admitted for it so far. Aborted turns
    /// answer identically on every neighboring database and charge 0.
    pub fn rollout(&self, unit: &Unit) -> (f64, f64) {
        let mut admitted: BTreeSet<(Item, u64)> = BTreeSet::new();
        let mut eps = KahanSum::new();
        let mut delta = KahanSum::new();
        for line in &self.lines {
            match line {
                TraceLine::Report { unit: u, item, value } if u == unit => {
                    admitted.insert((item.clone(), *value));
                }
                TraceLine::Report { .. } => {}
                TraceLine::Turn { aborted: true, .. } => {}
                TraceLine::Turn { epsilon, delta: d, items, aborted: false } => {
                    let mut value_mass = 0u64;
                    let mut queried_items: BTreeSet<&Item> = BTreeSet::new();
                    for (item, v) in &admitted {
                        if items.contains(item) {
                            value_mass += v;
                            queried_items.insert(item);
                        }
                    }
                    eps.add(epsilon / self.a1 as f64 * value_mass as f64);
                    delta.add(d / self.a0 as f64 * queried_items.len() as f64);
                }
            }
        }
        (eps.value(), delta.value())
    }

    pub fn rollout_all(&self) -> BTreeMap<Unit, (f64, f64)> {
        self.units().into_iter().map(|u| {
            let r = self.rollout(&u);
            (u, r)
        }).collect()
    }

    /// Per-turn abort flags, in turn order. Two runs that differ only in
    /// one unit's data must produce identical patterns.
    pub fn abort_pattern(&self) -> Vec<bool> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                TraceLine::Turn { aborted, .. } => Some(*aborted),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "{TRACE_MAGIC} {TRACE_VERSION}").unwrap();
        writeln!(
            out,
            "params a1={} a0={} eps_cap={} delta_cap={}",
            self.a1, self.a0, self.eps_cap, self.delta_cap
        )
        .unwrap();
        for line in &self.lines {
            match line {
                TraceLine::Report { unit, item, value } => {
                    writeln!(out, "report unit={unit} item={item} value={value}").unwrap();
                }
                TraceLine::Turn { epsilon, delta, items, aborted } => {
                    let items = items
                        .iter()
                        .map(Item::to_string)
                        .collect::<Vec<_>>()
                        .join(",");
                    let outcome = if *aborted { "abort" } else { "ok" };
                    writeln!(
                        out,
                        "turn eps={epsilon} delta={delta} items={items} outcome={outcome}"
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Trace, TraceParseError> {
        let fail = |line: usize, msg: &str| TraceParseError { line, msg: msg.into() };
        let field = |line: usize, part: Option<&str>, name: &str| -> Result<String, TraceParseError> {
            part.and_then(|p| p.strip_prefix(&format!("{name}=")))
                .map(str::to_string)
                .ok_or_else(|| fail(line, &format!("expected {name}=...")))
        };

        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fail(1, "empty file"))?;
        if header.trim() != format!("{TRACE_MAGIC} {TRACE_VERSION}") {
            return Err(fail(1, "not a supported trace file"));
        }
        let (_, params) = lines.next().ok_or_else(|| fail(2, "missing params line"))?;
        let mut parts = params.split_whitespace();
        if parts.next() != Some("params") {
            return Err(fail(2, "expected params line"));
        }
        let a1 = field(2, parts.next(), "a1")?
            .parse::<u64>()
            .map_err(|e| fail(2, &e.to_string()))?;
        let a0 = field(2, parts.next(), "a0")?
            .parse::<u64>()
            .map_err(|e| fail(2, &e.to_string()))?;
        let eps_cap = field(2, parts.next(), "eps_cap")?
            .parse::<f64>()
            .map_err(|e| fail(2, &e.to_string()))?;
        let delta_cap = field(2, parts.next(), "delta_cap")?
            .parse::<f64>()
            .map_err(|e| fail(2, &e.to_string()))?;
        if a1 == 0 || a0 == 0 {
            return Err(fail(2, "budgets must be at least 1"));
        }
        let mut trace = Trace::new(a1, a0, eps_cap, delta_cap);

        for (idx, line) in lines {
            let n = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("report") => {
                    let unit = parse_unit(&field(n, parts.next(), "unit")?)
                        .ok_or_else(|| fail(n, "bad unit"))?;
                    let item = parse_item(&field(n, parts.next(), "item")?)
                        .ok_or_else(|| fail(n, "bad item"))?;
                    let value = field(n, parts.next(), "value")?
                        .parse::<u64>()
                        .map_err(|e| fail(n, &e.to_string()))?;
                    trace.push_report(unit, item, value);
                }
                Some("turn") => {
                    let epsilon = field(n, parts.next(), "eps")?
                        .parse::<f64>()
                        .map_err(|e| fail(n, &e.to_string()))?;
                    let delta = field(n, parts.next(), "delta")?
                        .parse::<f64>()
                        .map_err(|e| fail(n, &e.to_string()))?;
                    let items_raw = field(n, parts.next(), "items")?;
                    let mut items = BTreeSet::new();
                    for piece in items_raw.split(',').filter(|p| !p.is_empty()) {
                        items.insert(
                            parse_item(piece).ok_or_else(|| fail(n, "bad item"))?,
                        );
                    }
                    let aborted = match field(n, parts.next(), "outcome")?.as_str() {
                        "ok" => false,
                        "abort" => true,
                        _ => return Err(fail(n, "outcome must be ok or abort")),
                    };
                    trace.push_turn(epsilon, delta, items, aborted);
                }
                _ => return Err(fail(n, "expected report or turn")),
            }
        }
        Ok(trace)
    }
}
