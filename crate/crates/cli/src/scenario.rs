//! Scenario files: a versioned TOML schema describing one API's event
//! timeline and the ad-tech's aggregation turns, validated into typed
//! form before anything runs. Validation failures carry field-level
//! messages and map to the schema exit code.

use std::collections::BTreeSet;

use serde::Deserialize;
use thiserror::Error;

use sandbox_measure::aggregation::AggregationMode;
use sandbox_measure::clients::ScriptedProgram;
use sandbox_measure::event_level::{EventSource, SpecEntry, TriggerSpec};
use sandbox_measure::model::{Key, SourceRegistration, Tick, TriggerRegistration};

pub const SCENARIO_FORMAT: &str = "sandbox-measure-scenario/v1";
const DEFAULT_OUTPUT_LIMIT: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct SchemaError(pub String);

fn bad(msg: impl Into<String>) -> SchemaError {
    SchemaError(msg.into())
}

// ---------------------------------------------------------------------
// Raw deserialization layer. Every field is optional where APIs differ;
// per-kind validation below rejects combinations that make no sense.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    format: String,
    api: String,
    seed: u64,
    params: RawParams,
    #[serde(default)]
    events: Vec<RawEvent>,
    #[serde(default)]
    turns: Vec<RawTurn>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    a1: Option<u64>,
    a0: Option<u64>,
    eps_cap: Option<f64>,
    delta_cap: Option<f64>,
    window_len: Option<u64>,
    key_universe: Option<Vec<String>>,
    strict_halt: Option<bool>,
    epsilon: Option<f64>,
    output_limit: Option<usize>,
    spec: Option<RawSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    entries: Vec<RawSpecEntry>,
    max_reports: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpecEntry {
    trig_data: u8,
    windows: Vec<u64>,
    buckets: Vec<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    kind: String,
    at: u64,
    src_id: Option<String>,
    trig_id: Option<String>,
    dest: Option<String>,
    expires: Option<u64>,
    filters: Option<Vec<String>>,
    key: Option<String>,
    value: Option<u64>,
    trig_data: Option<u8>,
    device: Option<String>,
    read: Option<String>,
    equals: Option<String>,
    write_on_match: Option<RawWrite>,
    emit_on_match: Option<RawEmit>,
    emit_otherwise: Option<RawEmit>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWrite {
    key: String,
    value: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEmit {
    key: String,
    value: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    eps: Option<f64>,
    delta: Option<f64>,
    mode: Option<String>,
    keys: Option<Vec<String>>,
    #[serde(default)]
    cases: Vec<RawCase>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    when: String,
    eps: f64,
    delta: f64,
    mode: Option<String>,
    keys: Option<Vec<String>>,
}

// ---------------------------------------------------------------------
// Typed form.

#[derive(Debug, Clone)]
pub enum Scenario {
    AraSummary(AraScenario),
    PaaSummary(PaaScenario),
    EventLevel(EventScenario),
}

impl Scenario {
    pub fn seed(&self) -> u64 {
        match self {
            Scenario::AraSummary(s) => s.seed,
            Scenario::PaaSummary(s) => s.seed,
            Scenario::EventLevel(s) => s.seed,
        }
    }

    /// True for the APIs that feed the aggregation service (and so own a
    /// budget ledger and a privacy trace).
    pub fn uses_ledger(&self) -> bool {
        !matches!(self, Scenario::EventLevel(_))
    }

    pub fn parse(text: &str) -> Result<Scenario, SchemaError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| bad(format!("scenario: {e}")))?;
        if raw.format != SCENARIO_FORMAT {
            return Err(bad(format!(
                "unsupported format {:?}; this build reads {SCENARIO_FORMAT:?}",
                raw.format
            )));
        }
        let mut last_at = 0u64;
        for (i, e) in raw.events.iter().enumerate() {
            if e.at < last_at {
                return Err(bad(format!(
                    "events[{i}] at={} is earlier than the previous event at={last_at}",
                    e.at
                )));
            }
            last_at = e.at;
        }
        match raw.api.as_str() {
            "ara-summary" => validate_ara(raw).map(Scenario::AraSummary),
            "paa-summary" => validate_paa(raw).map(Scenario::PaaSummary),
            "event-level" => validate_event(raw).map(Scenario::EventLevel),
            other => Err(bad(format!(
                "api must be ara-summary, paa-summary, or event-level, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AraScenario {
    pub seed: u64,
    pub a1: u64,
    pub a0: u64,
    pub eps_cap: f64,
    pub delta_cap: f64,
    pub strict_halt: bool,
    pub key_universe: Option<BTreeSet<Key>>,
    pub events: Vec<AraEvent>,
    pub turns: Vec<ScenarioTurn>,
}

#[derive(Debug, Clone)]
pub enum AraEvent {
    Source(SourceRegistration),
    Trigger(TriggerRegistration),
}

#[derive(Debug, Clone)]
pub struct PaaScenario {
    pub seed: u64,
    pub a1: u64,
    pub a0: u64,
    pub window_len: u64,
    pub eps_cap: f64,
    pub delta_cap: f64,
    pub key_universe: Option<BTreeSet<Key>>,
    pub events: Vec<PaaEvent>,
    pub turns: Vec<ScenarioTurn>,
}

#[derive(Debug, Clone)]
pub struct PaaEvent {
    pub device: String,
    pub at: Tick,
    pub program: ScriptedProgram,
}

#[derive(Debug, Clone)]
pub struct EventScenario {
    pub seed: u64,
    pub epsilon: f64,
    pub output_limit: usize,
    pub spec: TriggerSpec,
    pub sources: Vec<EventSource>,
    pub triggers: Vec<ScenarioEventTrigger>,
}

#[derive(Debug, Clone)]
pub struct ScenarioEventTrigger {
    pub dest: String,
    pub filters: BTreeSet<String>,
    pub trig_data: u8,
    pub value: u64,
    pub at: Tick,
}

/// One scripted aggregation turn: the first case whose condition matches
/// the previous reply fires; no match halts the run.
#[derive(Debug, Clone)]
pub struct ScenarioTurn {
    pub cases: Vec<(RunCondition, TurnRequest)>,
}

#[derive(Debug, Clone)]
pub struct TurnRequest {
    pub epsilon: f64,
    pub delta: f64,
    pub mode: AggregationMode,
}

/// The condition language turns can branch on:
/// `always`, `last-aborted`, `last-released <key>`,
/// `last-above <key> <value>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunCondition {
    Always,
    LastAborted,
    LastReleased(Key),
    LastValueAbove(Key, i64),
}

pub fn parse_condition(s: &str) -> Result<RunCondition, SchemaError> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    match parts.as_slice() {
        ["always"] => Ok(RunCondition::Always),
        ["last-aborted"] => Ok(RunCondition::LastAborted),
        ["last-released", key] => Ok(RunCondition::LastReleased(parse_key(key)?)),
        ["last-above", key, bound] => {
            let bound = bound
                .parse::<i64>()
                .map_err(|e| bad(format!("condition bound {bound:?}: {e}")))?;
            Ok(RunCondition::LastValueAbove(parse_key(key)?, bound))
        }
        _ => Err(bad(format!(
            "condition {s:?} is not always / last-aborted / last-released <key> / last-above <key> <value>"
        ))),
    }
}

/// Keys in scenario files are hex, up to 32 digits, leading zeros
/// optional.
pub fn parse_key(s: &str) -> Result<Key, SchemaError> {
    if s.is_empty() || s.len() > 32 {
        return Err(bad(format!("key {s:?} must be 1..=32 hex digits")));
    }
    u128::from_str_radix(s, 16)
        .map(Key)
        .map_err(|_| bad(format!("key {s:?} is not hexadecimal")))
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

fn require<T>(field: Option<T>, name: &str, ctx: &str) -> Result<T, SchemaError> {
    field.ok_or_else(|| bad(format!("{ctx}: missing {name}")))
}

fn forbid<T>(field: &Option<T>, name: &str, ctx: &str) -> Result<(), SchemaError> {
    if field.is_some() {
        return Err(bad(format!("{ctx}: {name} does not apply here")));
    }
    Ok(())
}

fn checked_id(s: String, name: &str, ctx: &str) -> Result<String, SchemaError> {
    if !valid_id(&s) {
        return Err(bad(format!(
            "{ctx}: {name} {s:?} must be non-empty [A-Za-z0-9_.-]"
        )));
    }
    Ok(s)
}

fn filters_set(filters: Option<Vec<String>>) -> BTreeSet<String> {
    filters.unwrap_or_default().into_iter().collect()
}

/// Parameters shared by both summary-report scenario kinds.
struct CommonParams {
    a1: u64,
    a0: u64,
    eps_cap: f64,
    delta_cap: f64,
    universe: Option<BTreeSet<Key>>,
}

fn agg_params(p: &RawParams) -> Result<CommonParams, SchemaError> {
    let a1 = require(p.a1, "params.a1", "params")?;
    let a0 = require(p.a0, "params.a0", "params")?;
    if a1 == 0 || a0 == 0 {
        return Err(bad("params: a1 and a0 must be at least 1"));
    }
    let eps_cap = require(p.eps_cap, "params.eps_cap", "params")?;
    let delta_cap = require(p.delta_cap, "params.delta_cap", "params")?;
    if !eps_cap.is_finite() || eps_cap < 0.0 || !delta_cap.is_finite() || delta_cap < 0.0 {
        return Err(bad("params: caps must be finite and non-negative"));
    }
    let universe = match &p.key_universe {
        None => None,
        Some(keys) => {
            let mut set = BTreeSet::new();
            for k in keys {
                set.insert(parse_key(k)?);
            }
            Some(set)
        }
    };
    Ok(CommonParams { a1, a0, eps_cap, delta_cap, universe })
}

fn validate_turns(
    raw: Vec<RawTurn>,
    universe: Option<&BTreeSet<Key>>,
) -> Result<Vec<ScenarioTurn>, SchemaError> {
    let mut turns = Vec::new();
    for (i, t) in raw.into_iter().enumerate() {
        let ctx = format!("turns[{i}]");
        let cases = if t.cases.is_empty() {
            let eps = require(t.eps, "eps", &ctx)?;
            let delta = require(t.delta, "delta", &ctx)?;
            vec![(
                RunCondition::Always,
                turn_request(eps, delta, t.mode, t.keys, universe, &ctx)?,
            )]
        } else {
            forbid(&t.eps, "eps", &format!("{ctx} with cases"))?;
            forbid(&t.delta, "delta", &format!("{ctx} with cases"))?;
            forbid(&t.mode, "mode", &format!("{ctx} with cases"))?;
            forbid(&t.keys, "keys", &format!("{ctx} with cases"))?;
            let mut cases = Vec::new();
            for (j, c) in t.cases.into_iter().enumerate() {
                let cctx = format!("{ctx}.cases[{j}]");
                cases.push((
                    parse_condition(&c.when)?,
                    turn_request(c.eps, c.delta, c.mode, c.keys, universe, &cctx)?,
                ));
            }
            cases
        };
        turns.push(ScenarioTurn { cases });
    }
    Ok(turns)
}

fn turn_request(
    eps: f64,
    delta: f64,
    mode: Option<String>,
    keys: Option<Vec<String>>,
    universe: Option<&BTreeSet<Key>>,
    ctx: &str,
) -> Result<TurnRequest, SchemaError> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(bad(format!("{ctx}: eps must be positive, got {eps}")));
    }
    if !delta.is_finite() || !(0.0..=1.0).contains(&delta) {
        return Err(bad(format!("{ctx}: delta must lie in [0, 1], got {delta}")));
    }
    let listed = match mode.as_deref() {
        Some("listed") => true,
        Some("key-discovery") => false,
        Some(other) => {
            return Err(bad(format!(
                "{ctx}: mode must be listed or key-discovery, got {other:?}"
            )))
        }
        None => keys.is_some(),
    };
    if listed {
        let keys = require(keys, "keys", ctx)?;
        if keys.is_empty() {
            return Err(bad(format!("{ctx}: listed mode needs at least one key")));
        }
        if delta != 0.0 {
            return Err(bad(format!("{ctx}: listed mode requires delta = 0")));
        }
        let mut set = BTreeSet::new();
        for k in &keys {
            let key = parse_key(k)?;
            if let Some(u) = universe {
                if !u.contains(&key) {
                    return Err(bad(format!(
                        "{ctx}: key {k} is not in params.key_universe"
                    )));
                }
            }
            set.insert(key);
        }
        Ok(TurnRequest { epsilon: eps, delta, mode: AggregationMode::Listed(set) })
    } else {
        forbid(&keys, "keys", &format!("{ctx} in key-discovery mode"))?;
        if delta <= 0.0 {
            return Err(bad(format!("{ctx}: key discovery requires delta > 0")));
        }
        Ok(TurnRequest { epsilon: eps, delta, mode: AggregationMode::KeyDiscovery })
    }
}

fn validate_ara(raw: RawScenario) -> Result<AraScenario, SchemaError> {
    let p = &raw.params;
    forbid(&p.window_len, "params.window_len", "ara-summary")?;
    forbid(&p.epsilon, "params.epsilon", "ara-summary")?;
    forbid(&p.output_limit, "params.output_limit", "ara-summary")?;
    forbid(&p.spec, "params.spec", "ara-summary")?;
    let CommonParams { a1, a0, eps_cap, delta_cap, universe } = agg_params(p)?;

    let mut events = Vec::new();
    for (i, e) in raw.events.into_iter().enumerate() {
        let ctx = format!("events[{i}]");
        match e.kind.as_str() {
            "source" => {
                forbid(&e.trig_id, "trig_id", &ctx)?;
                forbid(&e.value, "value", &ctx)?;
                forbid(&e.trig_data, "trig_data", &ctx)?;
                forbid(&e.device, "device", &ctx)?;
                forbid(&e.read, "read", &ctx)?;
                forbid(&e.emit_on_match, "emit_on_match", &ctx)?;
                let expires = require(e.expires, "expires", &ctx)?;
                if expires < e.at {
                    return Err(bad(format!("{ctx}: expires {expires} before at {}", e.at)));
                }
                events.push(AraEvent::Source(SourceRegistration {
                    src_id: checked_id(require(e.src_id, "src_id", &ctx)?, "src_id", &ctx)?,
                    dest: require(e.dest, "dest", &ctx)?,
                    expires: Tick(expires),
                    filters: filters_set(e.filters),
                    key: e.key.as_deref().map(parse_key).transpose()?.unwrap_or(Key::ZERO),
                    registered_at: Tick(e.at),
                }));
            }
            "trigger" => {
                forbid(&e.src_id, "src_id", &ctx)?;
                forbid(&e.expires, "expires", &ctx)?;
                forbid(&e.trig_data, "trig_data", &ctx)?;
                forbid(&e.device, "device", &ctx)?;
                forbid(&e.read, "read", &ctx)?;
                forbid(&e.emit_on_match, "emit_on_match", &ctx)?;
                let trig_id = match e.trig_id {
                    Some(id) => checked_id(id, "trig_id", &ctx)?,
                    None => format!("t{i}"),
                };
                events.push(AraEvent::Trigger(TriggerRegistration {
                    trig_id,
                    dest: require(e.dest, "dest", &ctx)?,
                    filters: filters_set(e.filters),
                    key: e.key.as_deref().map(parse_key).transpose()?.unwrap_or(Key::ZERO),
                    value: require(e.value, "value", &ctx)?,
                    at: Tick(e.at),
                }));
            }
            other => return Err(bad(format!("{ctx}: ara-summary events are source or trigger, got {other:?}"))),
        }
    }

    Ok(AraScenario {
        seed: raw.seed,
        a1,
        a0,
        eps_cap,
        delta_cap,
        strict_halt: p.strict_halt.unwrap_or(false),
        key_universe: universe.clone(),
        events,
        turns: validate_turns(raw.turns, universe.as_ref())?,
    })
}

fn validate_paa(raw: RawScenario) -> Result<PaaScenario, SchemaError> {
    let p = &raw.params;
    forbid(&p.strict_halt, "params.strict_halt", "paa-summary")?;
    forbid(&p.epsilon, "params.epsilon", "paa-summary")?;
    forbid(&p.output_limit, "params.output_limit", "paa-summary")?;
    forbid(&p.spec, "params.spec", "paa-summary")?;
    let CommonParams { a1, a0, eps_cap, delta_cap, universe } = agg_params(p)?;
    let window_len = require(p.window_len, "params.window_len", "paa-summary")?;
    if window_len == 0 {
        return Err(bad("params: window_len must be at least 1"));
    }

    let mut events = Vec::new();
    for (i, e) in raw.events.into_iter().enumerate() {
        let ctx = format!("events[{i}]");
        if e.kind != "storage-event" {
            return Err(bad(format!(
                "{ctx}: paa-summary events are storage-event, got {:?}",
                e.kind
            )));
        }
        forbid(&e.src_id, "src_id", &ctx)?;
        forbid(&e.trig_id, "trig_id", &ctx)?;
        forbid(&e.dest, "dest", &ctx)?;
        forbid(&e.expires, "expires", &ctx)?;
        forbid(&e.filters, "filters", &ctx)?;
        forbid(&e.key, "key", &ctx)?;
        forbid(&e.value, "value", &ctx)?;
        forbid(&e.trig_data, "trig_data", &ctx)?;
        let emit_on_match = require(e.emit_on_match, "emit_on_match", &ctx)?;
        let emit_otherwise = e.emit_otherwise.unwrap_or(RawEmit {
            key: "0".into(),
            value: 0,
        });
        events.push(PaaEvent {
            device: checked_id(require(e.device, "device", &ctx)?, "device", &ctx)?,
            at: Tick(e.at),
            program: ScriptedProgram {
                read: require(e.read, "read", &ctx)?,
                equals: e.equals,
                write_on_match: e.write_on_match.map(|w| (w.key, w.value)),
                emit_on_match: (parse_key(&emit_on_match.key)?, emit_on_match.value),
                emit_otherwise: (parse_key(&emit_otherwise.key)?, emit_otherwise.value),
            },
        });
    }

    Ok(PaaScenario {
        seed: raw.seed,
        a1,
        a0,
        window_len,
        eps_cap,
        delta_cap,
        key_universe: universe.clone(),
        events,
        turns: validate_turns(raw.turns, universe.as_ref())?,
    })
}

fn validate_event(raw: RawScenario) -> Result<EventScenario, SchemaError> {
    let p = raw.params;
    forbid(&p.a1, "params.a1", "event-level")?;
    forbid(&p.a0, "params.a0", "event-level")?;
    forbid(&p.eps_cap, "params.eps_cap", "event-level")?;
    forbid(&p.delta_cap, "params.delta_cap", "event-level")?;
    forbid(&p.window_len, "params.window_len", "event-level")?;
    forbid(&p.key_universe, "params.key_universe", "event-level")?;
    forbid(&p.strict_halt, "params.strict_halt", "event-level")?;
    if !raw.turns.is_empty() {
        return Err(bad("event-level scenarios take no turns; the timeline is the whole story"));
    }
    let epsilon = require(p.epsilon, "params.epsilon", "event-level")?;
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(bad(format!("params.epsilon must be positive, got {epsilon}")));
    }
    let raw_spec = require(p.spec, "params.spec", "event-level")?;
    let mut entries = Vec::new();
    for (i, e) in raw_spec.entries.into_iter().enumerate() {
        entries.push(
            SpecEntry::new(e.trig_data, e.windows, e.buckets)
                .map_err(|err| bad(format!("params.spec.entries[{i}]: {err}")))?,
        );
    }
    let spec = TriggerSpec::new(entries, raw_spec.max_reports)
        .map_err(|err| bad(format!("params.spec: {err}")))?;

    let mut sources = Vec::new();
    let mut triggers = Vec::new();
    for (i, e) in raw.events.into_iter().enumerate() {
        let ctx = format!("events[{i}]");
        forbid(&e.trig_id, "trig_id", &ctx)?;
        forbid(&e.key, "key", &ctx)?;
        forbid(&e.device, "device", &ctx)?;
        forbid(&e.read, "read", &ctx)?;
        forbid(&e.emit_on_match, "emit_on_match", &ctx)?;
        match e.kind.as_str() {
            "source" => {
                forbid(&e.value, "value", &ctx)?;
                forbid(&e.trig_data, "trig_data", &ctx)?;
                forbid(&e.expires, "expires", &ctx)?;
                sources.push(EventSource {
                    src_id: checked_id(require(e.src_id, "src_id", &ctx)?, "src_id", &ctx)?,
                    dest: require(e.dest, "dest", &ctx)?,
                    filters: filters_set(e.filters),
                    registered_at: Tick(e.at),
                    spec: spec.clone(),
                });
            }
            "trigger" => {
                forbid(&e.src_id, "src_id", &ctx)?;
                forbid(&e.expires, "expires", &ctx)?;
                triggers.push(ScenarioEventTrigger {
                    dest: require(e.dest, "dest", &ctx)?,
                    filters: filters_set(e.filters),
                    trig_data: require(e.trig_data, "trig_data", &ctx)?,
                    value: require(e.value, "value", &ctx)?,
                    at: Tick(e.at),
                });
            }
            other => {
                return Err(bad(format!(
                    "{ctx}: event-level events are source or trigger, got {other:?}"
                )))
            }
        }
    }

    Ok(EventScenario {
        seed: raw.seed,
        epsilon,
        output_limit: p.output_limit.unwrap_or(DEFAULT_OUTPUT_LIMIT),
        spec,
        sources,
        triggers,
    })
}
