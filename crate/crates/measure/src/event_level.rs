//! Event-level attribution reports: a per-source state machine accumulates
//! trigger value per trigger-data entry and, as each reporting window
//! passes, emits one report per newly crossed summary bucket, up to a
//! per-source report cap.
//!
//! Because a source's possible report combinations form a finite set, the
//! private version is plain randomized response over that set, decided
//! once at registration time. [`EventMechanism`] runs one independent
//! randomized response per unit, which is what the event-level privacy
//! analysis is about.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::interactive::{Adversary, InteractiveMechanism};
use crate::model::{filters_match, Tick};

pub const MAX_SPEC_ENTRIES: usize = 32;
/// Trigger data rides in 5 bits.
pub const MAX_TRIGGER_DATA: u8 = 31;
pub const MAX_WINDOWS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("a spec may list at most {MAX_SPEC_ENTRIES} trigger-data entries")]
    TooManyEntries,
    #[error("trigger data {0} does not fit in 5 bits")]
    TriggerDataTooLarge(u8),
    #[error("trigger data {0} is listed twice")]
    DuplicateTriggerData(u8),
    #[error("an entry needs between 1 and {MAX_WINDOWS} reporting windows")]
    BadWindowCount,
    #[error("reporting windows must be positive and strictly increasing")]
    WindowsNotIncreasing,
    #[error("an entry needs at least one summary bucket")]
    NoBuckets,
    #[error("summary buckets must be positive and strictly increasing")]
    BucketsNotIncreasing,
    #[error("the report cap must be at least 1")]
    InvalidMaxReports,
    #[error("output set has {0} elements, over the configured limit")]
    OutputSetTooLarge(u128),
    #[error("source id {0} already registered")]
    DuplicateSourceId(String),
    #[error("events must arrive in time order: got {at:?} after {last:?}")]
    TimeRegression { at: Tick, last: Tick },
    #[error("randomized-response epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
}

/// One trigger-data entry: when its windows pass and which cumulative-value
/// buckets produce reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecEntry {
    trig_data: u8,
    /// Window ends as tick offsets from source registration.
    windows: Vec<u64>,
    buckets: Vec<u64>,
}

impl SpecEntry {
    pub fn new(trig_data: u8, windows: Vec<u64>, buckets: Vec<u64>) -> Result<Self, EventError> {
        if trig_data > MAX_TRIGGER_DATA {
            return Err(EventError::TriggerDataTooLarge(trig_data));
        }
        if windows.is_empty() || windows.len() > MAX_WINDOWS {
            return Err(EventError::BadWindowCount);
        }
        if windows[0] == 0 || windows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EventError::WindowsNotIncreasing);
        }
        if buckets.is_empty() {
            return Err(EventError::NoBuckets);
        }
        if buckets[0] == 0 || buckets.windows(2).any(|b| b[0] >= b[1]) {
            return Err(EventError::BucketsNotIncreasing);
        }
        Ok(SpecEntry { trig_data, windows, buckets })
    }

    pub fn trig_data(&self) -> u8 {
        self.trig_data
    }

    pub fn windows(&self) -> &[u64] {
        &self.windows
    }

    pub fn buckets(&self) -> &[u64] {
        &self.buckets
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerSpec {
    entries: Vec<SpecEntry>,
    max_reports: u32,
}

impl TriggerSpec {
    pub fn new(entries: Vec<SpecEntry>, max_reports: u32) -> Result<Self, EventError> {
        if entries.len() > MAX_SPEC_ENTRIES {
            return Err(EventError::TooManyEntries);
        }
        if max_reports == 0 {
            return Err(EventError::InvalidMaxReports);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.trig_data) {
                return Err(EventError::DuplicateTriggerData(e.trig_data));
            }
        }
        Ok(TriggerSpec { entries, max_reports })
    }

    pub fn entries(&self) -> &[SpecEntry] {
        &self.entries
    }

    pub fn max_reports(&self) -> u32 {
        self.max_reports
    }

    pub fn lists(&self, trig_data: u8) -> bool {
        self.entries.iter().any(|e| e.trig_data == trig_data)
    }

    /// Offset of the last window across entries; the source stops
    /// attributing after it.
    pub fn last_window(&self) -> u64 {
        self.entries
            .iter()
            .filter_map(|e| e.windows.last().copied())
            .max()
            .unwrap_or(0)
    }
}

/// One emitted report: which entry, which of its windows (1-based), and
/// the bucket value crossed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventReport {
    pub trig_data: u8,
    pub window: usize,
    pub bucket: u64,
}

/// A complete, canonically ordered combination of reports a source can
/// send over its lifetime — one element of the finite output set.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventOutput(Vec<EventReport>);

impl EventOutput {
    pub fn from_reports(mut reports: Vec<EventReport>) -> Self {
        reports.sort_unstable();
        EventOutput(reports)
    }

    pub fn reports(&self) -> &[EventReport] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Number of report combinations a spec can produce: count vectors over
/// (entry, window) cells with each entry's total at most its bucket count
/// and the grand total at most the report cap.
pub fn count_outputs(spec: &TriggerSpec) -> u128 {
    // tally[t] = number of ways to emit t reports from the entries so far.
    let cap = spec.max_reports as usize;
    let mut tally = vec![0u128; cap + 1];
    tally[0] = 1;
    for entry in &spec.entries {
        let m = entry.buckets.len();
        let w = entry.windows.len();
        // ways[s] = count vectors over w windows summing to exactly s.
        let ways: Vec<u128> = (0..=m).map(|s| binomial(s + w - 1, w - 1)).collect();
        let mut next = vec![0u128; cap + 1];
        for t in 0..=cap {
            if tally[t] == 0 {
                continue;
            }
            for (s, w) in ways.iter().enumerate() {
                if t + s <= cap {
                    next[t + s] += tally[t] * w;
                }
            }
        }
        tally = next;
    }
    tally.iter().sum()
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc = 1u128;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Materialize the whole output set in canonical order. The limit guards
/// against specs whose set would not fit in memory.
pub fn enumerate_outputs(
    spec: &TriggerSpec,
    limit: usize,
) -> Result<Vec<EventOutput>, EventError> {
    let total = count_outputs(spec);
    if total > limit as u128 {
        return Err(EventError::OutputSetTooLarge(total));
    }

    // Depth-first over entries; within an entry, over its windows.
    fn per_entry(entry: &SpecEntry, budget: usize) -> Vec<Vec<EventReport>> {
        let mut outs = Vec::new();
        // counts[j] reports at window j+1; buckets crossed consecutively.
        fn rec(
            entry: &SpecEntry,
            window: usize,
            crossed: usize,
            budget: usize,
            acc: &mut Vec<EventReport>,
            outs: &mut Vec<Vec<EventReport>>,
        ) {
            if window == entry.windows.len() {
                outs.push(acc.clone());
                return;
            }
            let room = (entry.buckets.len() - crossed).min(budget);
            for c in 0..=room {
                let before = acc.len();
                for i in 0..c {
                    acc.push(EventReport {
                        trig_data: entry.trig_data,
                        window: window + 1,
                        bucket: entry.buckets[crossed + i],
                    });
                }
                rec(entry, window + 1, crossed + c, budget - c, acc, outs);
                acc.truncate(before);
            }
        }
        rec(entry, 0, 0, budget, &mut Vec::new(), &mut outs);
        outs
    }

    let mut outputs = vec![Vec::new()];
    let cap = spec.max_reports as usize;
    for entry in &spec.entries {
        let mut grown = Vec::new();
        for prefix in &outputs {
            for tail in per_entry(entry, cap - prefix.len()) {
                let mut o = prefix.clone();
                o.extend(tail);
                grown.push(o);
            }
        }
        outputs = grown;
    }
    let mut outputs: Vec<EventOutput> =
        outputs.into_iter().map(EventOutput::from_reports).collect();
    outputs.sort_unstable();
    outputs.dedup();
    debug_assert_eq!(outputs.len() as u128, total);
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSource {
    pub src_id: String,
    pub dest: String,
    pub filters: BTreeSet<String>,
    pub registered_at: Tick,
    pub spec: TriggerSpec,
}

#[derive(Debug, Clone)]
struct SourceState {
    src: EventSource,
    /// Accumulated value and last reported bucket, per spec entry.
    v: Vec<u64>,
    u: Vec<u64>,
    /// Next window index not yet fired, per spec entry.
    next_window: Vec<usize>,
    n: u32,
    emitted: Vec<(Tick, EventReport)>,
}

impl SourceState {
    /// Absolute tick at which entry `e`'s pending window ends.
    fn pending_end(&self, e: usize) -> Option<u64> {
        let entry = &self.src.spec.entries()[e];
        entry
            .windows
            .get(self.next_window[e])
            .map(|w| self.src.registered_at.0 + w)
    }

    fn fire(&mut self, e: usize) {
        let entry = self.src.spec.entries()[e].clone();
        let window = self.next_window[e] + 1;
        let end = Tick(self.src.registered_at.0 + entry.windows[self.next_window[e]]);
        self.next_window[e] += 1;
        for &b in &entry.buckets {
            if self.u[e] < b && b <= self.v[e] {
                // The watermark advances whether or not the report cap
                // lets this bucket out: a later window must not resend it.
                self.u[e] = b;
                if self.n < self.src.spec.max_reports() {
                    self.n += 1;
                    self.emitted.push((
                        end,
                        EventReport { trig_data: entry.trig_data, window, bucket: b },
                    ));
                }
            }
        }
    }
}

/// Device-side state machine for event-level reports (noiseless). Run the
/// registrations and triggers through it in time order, then [`finish`]
/// past the last window.
///
/// [`finish`]: EventLevelClient::finish
#[derive(Debug, Clone, Default)]
pub struct EventLevelClient {
    sources: Vec<SourceState>,
    last_tick: Tick,
}

impl EventLevelClient {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_time(&mut self, at: Tick) -> Result<(), EventError> {
        if at < self.last_tick {
            return Err(EventError::TimeRegression { at, last: self.last_tick });
        }
        self.last_tick = at;
        Ok(())
    }

    /// Fire every window that ends strictly before `t` (window processing
    /// happens at end of tick, after that tick's triggers).
    fn fire_windows_before(&mut self, t: u64) {
        for s in &mut self.sources {
            loop {
                let mut due: Option<(u64, usize)> = None;
                for e in 0..s.src.spec.entries().len() {
                    if let Some(end) = s.pending_end(e) {
                        if end < t && due.map_or(true, |(d, _)| end < d) {
                            due = Some((end, e));
                        }
                    }
                }
                match due {
                    Some((_, e)) => s.fire(e),
                    None => break,
                }
            }
        }
    }

    pub fn register_source(&mut self, src: EventSource) -> Result<(), EventError> {
        self.check_time(src.registered_at)?;
        if self.sources.iter().any(|s| s.src.src_id == src.src_id) {
            return Err(EventError::DuplicateSourceId(src.src_id));
        }
        self.fire_windows_before(src.registered_at.0);
        let n_entries = src.spec.entries().len();
        self.sources.push(SourceState {
            src,
            v: vec![0; n_entries],
            u: vec![0; n_entries],
            next_window: vec![0; n_entries],
            n: 0,
            emitted: Vec::new(),
        });
        Ok(())
    }

    /// Attribute one trigger. Returns the id of the source it landed on,
    /// if any. Scanning is newest-first; a source whose spec does not
    /// list the trigger data is passed over in favor of older ones.
    pub fn register_trigger(
        &mut self,
        dest: &str,
        filters: &BTreeSet<String>,
        trig_data: u8,
        value: u64,
        at: Tick,
    ) -> Result<Option<String>, EventError> {
        self.check_time(at)?;
        self.fire_windows_before(at.0);
        if value == 0 {
            return Ok(None);
        }
        for s in self.sources.iter_mut().rev() {
            let active = s.src.registered_at <= at
                && at.0 <= s.src.registered_at.0 + s.src.spec.last_window();
            if !active || s.src.dest != dest || !filters_match(&s.src.filters, filters) {
                continue;
            }
            if let Some(e) = s
                .src
                .spec
                .entries()
                .iter()
                .position(|entry| entry.trig_data == trig_data)
            {
                s.v[e] += value;
                return Ok(Some(s.src.src_id.clone()));
            }
        }
        Ok(None)
    }

    /// Fire every window ending at or before `t`.
    pub fn finish(&mut self, t: Tick) -> Result<(), EventError> {
        self.check_time(t)?;
        self.fire_windows_before(t.0 + 1);
        Ok(())
    }

    /// Reports emitted so far, in emission order, with their send ticks.
    pub fn emitted(&self, src_id: &str) -> Vec<(Tick, EventReport)> {
        self.sources
            .iter()
            .find(|s| s.src.src_id == src_id)
            .map(|s| s.emitted.clone())
            .unwrap_or_default()
    }

    /// A source's full output once every window has fired.
    pub fn output(&self, src_id: &str) -> EventOutput {
        EventOutput::from_reports(
            self.emitted(src_id).into_iter().map(|(_, r)| r).collect(),
        )
    }
}

/// A trigger aimed at a single-source story: offsets are ticks after the
/// source registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTrigger {
    pub trig_data: u8,
    pub value: u64,
    pub at: u64,
}

/// The deterministic output of one source given its trigger schedule.
pub fn true_output(spec: &TriggerSpec, triggers: &[EventTrigger]) -> Result<EventOutput, EventError> {
    let mut client = EventLevelClient::new();
    let filt: BTreeSet<String> = ["f".to_string()].into();
    client.register_source(EventSource {
        src_id: "s".into(),
        dest: "d".into(),
        filters: filt.clone(),
        registered_at: Tick(0),
        spec: spec.clone(),
    })?;
    let mut ordered = triggers.to_vec();
    ordered.sort_by_key(|t| t.at);
    for t in &ordered {
        client.register_trigger("d", &filt, t.trig_data, t.value, Tick(t.at))?;
    }
    client.finish(Tick(spec.last_window()))?;
    Ok(client.output("s"))
}

/// Randomized response over a spec's output set: truthful with probability
/// (e^eps - 1) / (e^eps + k - 1), otherwise uniform over all k outputs.
/// The draw can happen at registration, before any trigger exists.
#[derive(Debug, Clone)]
pub struct Irr {
    epsilon: f64,
    outputs: Vec<EventOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrrPlan {
    Truthful,
    Forced(usize),
}

impl Irr {
    pub fn new(epsilon: f64, spec: &TriggerSpec, limit: usize) -> Result<Self, EventError> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(EventError::InvalidEpsilon(epsilon));
        }
        Ok(Irr { epsilon, outputs: enumerate_outputs(spec, limit)? })
    }

    pub fn outputs(&self) -> &[EventOutput] {
        &self.outputs
    }

    pub fn truth_probability(&self) -> f64 {
        let k = self.outputs.len() as f64;
        self.epsilon.exp() / (self.epsilon.exp() + k - 1.0)
    }

    pub fn draw_plan<R: Rng + ?Sized>(&self, rng: &mut R) -> IrrPlan {
        let k = self.outputs.len() as f64;
        let e = self.epsilon.exp();
        if rng.random::<f64>() < (e - 1.0) / (e + k - 1.0) {
            IrrPlan::Truthful
        } else {
            IrrPlan::Forced(rng.random_range(0..self.outputs.len()))
        }
    }

    pub fn apply(&self, truth: &EventOutput, plan: IrrPlan) -> EventOutput {
        match plan {
            IrrPlan::Truthful => truth.clone(),
            IrrPlan::Forced(i) => self.outputs[i].clone(),
        }
    }

    /// Exact release probabilities aligned with [`outputs`](Irr::outputs).
    pub fn probabilities(&self, truth: &EventOutput) -> Vec<f64> {
        let k = self.outputs.len() as f64;
        let e = self.epsilon.exp();
        let denom = e + k - 1.0;
        self.outputs
            .iter()
            .map(|o| if o == truth { e / denom } else { 1.0 / denom })
            .collect()
    }
}

/// One unit's whole story for a turn: its spec and every trigger it will
/// ever see. Removing the unit keeps the story but strips the triggers —
/// the registration and the (noisy) reports still happen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventUnitStory {
    pub unit: String,
    pub spec: TriggerSpec,
    pub triggers: Vec<EventTrigger>,
}

impl EventUnitStory {
    pub fn without_triggers(&self) -> EventUnitStory {
        EventUnitStory { unit: self.unit.clone(), spec: self.spec.clone(), triggers: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventParams {
    pub epsilon: f64,
    /// Bail out instead of materializing absurd output sets.
    pub output_limit: usize,
}

/// The event-level reporting mechanism: each turn introduces fresh units;
/// each unit's true output goes through its own randomized response.
/// Duplicate unit ids on later turns are ignored — a unit reports once.
#[derive(Debug, Clone)]
pub struct EventMechanism {
    params: EventParams,
    seen: BTreeSet<String>,
}

impl EventMechanism {
    pub fn new(params: EventParams) -> Result<Self, EventError> {
        if !params.epsilon.is_finite() || params.epsilon <= 0.0 {
            return Err(EventError::InvalidEpsilon(params.epsilon));
        }
        Ok(EventMechanism { params, seen: BTreeSet::new() })
    }

    pub fn params(&self) -> &EventParams {
        &self.params
    }
}

impl InteractiveMechanism for EventMechanism {
    type Db = Vec<EventUnitStory>;
    type Query = ();
    type Response = Vec<(String, EventOutput)>;

    fn step(
        &mut self,
        db: &Self::Db,
        _query: &Self::Query,
        rng: &mut ChaCha8Rng,
    ) -> Self::Response {
        let mut out = Vec::new();
        for story in db {
            if !self.seen.insert(story.unit.clone()) {
                continue;
            }
            let irr = Irr::new(self.params.epsilon, &story.spec, self.params.output_limit)
                .expect("stories carry validated specs");
            let truth = true_output(&story.spec, &story.triggers)
                .expect("stories are time-ordered by construction");
            let plan = irr.draw_plan(rng);
            out.push((story.unit.clone(), irr.apply(&truth, plan)));
        }
        out
    }
}

/// Condition a scripted event adversary can branch on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventCondition {
    Always,
    /// Previous turn's response gave this unit at least this many reports.
    UnitReportedAtLeast(String, usize),
}

impl EventCondition {
    pub fn matches(&self, transcript: &[Vec<(String, EventOutput)>]) -> bool {
        match self {
            EventCondition::Always => true,
            EventCondition::UnitReportedAtLeast(unit, k) => transcript
                .last()
                .map(|resp| {
                    resp.iter()
                        .any(|(u, o)| u == unit && o.reports().len() >= *k)
                })
                .unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedEventTurn {
    pub cases: Vec<(EventCondition, Vec<EventUnitStory>)>,
}

impl ScriptedEventTurn {
    pub fn unconditional(stories: Vec<EventUnitStory>) -> Self {
        ScriptedEventTurn { cases: vec![(EventCondition::Always, stories)] }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedEventAdversary {
    pub turns: Vec<ScriptedEventTurn>,
}

impl Adversary<EventMechanism> for ScriptedEventAdversary {
    fn next_move(
        &self,
        transcript: &[Vec<(String, EventOutput)>],
    ) -> Option<(Vec<EventUnitStory>, ())> {
        let turn = self.turns.get(transcript.len())?;
        let (_, stories) = turn.cases.iter().find(|(c, _)| c.matches(transcript))?;
        Some((stories.clone(), ()))
    }
}
