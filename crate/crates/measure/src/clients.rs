//! On-device report generation.
//!
//! [`AraClient`] does last-touch attribution: a trigger scans registered
//! sources newest-first and contributes against the first active match
//! whose budgets still have room. [`PaaClient`] instead runs a contribution
//! program against per-device shared storage and budgets per device-window.
//! Both emit exactly one aggregatable report per input, null when nothing
//! could be contributed, so report traffic itself is uninformative.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::model::{
    combine_keys, filters_match, source_active, AggregatableReport, Contribution, Key, ReportId,
    SourceRegistration, Tick, TriggerRegistration,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("source id {0:?} already registered")]
    DuplicateSourceId(String),
    #[error("registration at tick {at} precedes an earlier one at tick {last}")]
    TimeRegression { at: u64, last: u64 },
    #[error("window length must be at least 1 tick")]
    InvalidWindowLength,
    #[error("contribution budget and sparsity budget must be at least 1")]
    InvalidBudget,
}

struct AraSource {
    reg: SourceRegistration,
    /// Total value contributed against this source so far (L1 use).
    used_value: u64,
    /// Number of non-zero contributions so far (L0 use).
    used_slots: u64,
}

/// A trigger's report plus the source (if any) that paid for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributionResult {
    pub report: AggregatableReport,
    pub charged: Option<String>,
}

/// Attribution client for one browser profile.
pub struct AraClient {
    a1: u64,
    a0: u64,
    /// When set, a matching source whose budget is exhausted ends the scan
    /// (null report) instead of letting an older match contribute.
    strict_halt: bool,
    /// Registration order; later entries are more recent.
    sources: Vec<AraSource>,
}

impl AraClient {
    pub fn new(a1: u64, a0: u64) -> Result<Self, ClientError> {
        if a1 == 0 || a0 == 0 {
            return Err(ClientError::InvalidBudget);
        }
        Ok(AraClient { a1, a0, strict_halt: false, sources: Vec::new() })
    }

    /// Stop the source scan at the first budget-exhausted match rather
    /// than falling through to older sources.
    pub fn with_strict_halt(mut self) -> Self {
        self.strict_halt = true;
        self
    }

    pub fn register_source(&mut self, reg: SourceRegistration) -> Result<(), ClientError> {
        if self.sources.iter().any(|s| s.reg.src_id == reg.src_id) {
            return Err(ClientError::DuplicateSourceId(reg.src_id));
        }
        if let Some(last) = self.sources.last() {
            if reg.registered_at < last.reg.registered_at {
                return Err(ClientError::TimeRegression {
                    at: reg.registered_at.0,
                    last: last.reg.registered_at.0,
                });
            }
        }
        self.sources.push(AraSource { reg, used_value: 0, used_slots: 0 });
        Ok(())
    }

    /// Attribute a trigger and emit its report. Always returns a report;
    /// attribution failures and exhausted budgets yield a null one.
    pub fn register_trigger<R: Rng>(
        &mut self,
        trig: &TriggerRegistration,
        rng: &mut R,
    ) -> AggregatableReport {
        self.register_trigger_traced(trig, rng).report
    }

    /// [`register_trigger`](Self::register_trigger), also naming the
    /// source whose budget paid for the contribution — with fall-through
    /// attribution that can differ from the newest matching source.
    pub fn register_trigger_traced<R: Rng>(
        &mut self,
        trig: &TriggerRegistration,
        rng: &mut R,
    ) -> AttributionResult {
        let id = ReportId::random(rng);
        if trig.value == 0 {
            return AttributionResult { report: AggregatableReport::null(id), charged: None };
        }
        for s in self.sources.iter_mut().rev() {
            if !source_active(&s.reg, trig.at)
                || s.reg.dest != trig.dest
                || !filters_match(&trig.filters, &s.reg.filters)
            {
                continue;
            }
            let fits = s.used_value + trig.value <= self.a1 && s.used_slots < self.a0;
            if fits {
                s.used_value += trig.value;
                s.used_slots += 1;
                return AttributionResult {
                    report: AggregatableReport {
                        id,
                        contribution: Some(Contribution {
                            key: combine_keys(s.reg.key, trig.key),
                            value: trig.value,
                        }),
                    },
                    charged: Some(s.reg.src_id.clone()),
                };
            }
            if self.strict_halt {
                break;
            }
        }
        AttributionResult { report: AggregatableReport::null(id), charged: None }
    }

    /// Which source would win attribution for this trigger, ignoring
    /// budgets. Used by the scenario runner to label reports with their
    /// privacy unit.
    pub fn attributed_source(&self, trig: &TriggerRegistration) -> Option<&SourceRegistration> {
        self.sources
            .iter()
            .rev()
            .map(|s| &s.reg)
            .find(|reg| {
                source_active(reg, trig.at)
                    && reg.dest == trig.dest
                    && filters_match(&trig.filters, &reg.filters)
            })
    }
}

/// Cross-site key-value state scoped to one device, visible only to
/// contribution programs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SharedStorage {
    entries: BTreeMap<String, String>,
}

impl SharedStorage {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Deterministic function from storage to (next storage, key, value).
/// The storage mutation happens unconditionally; whether the produced
/// contribution survives budgeting is decided by the client afterwards.
pub trait ContributionProgram {
    fn run(&self, storage: &mut SharedStorage) -> (Key, u64);
}

impl<F: Fn(&mut SharedStorage) -> (Key, u64)> ContributionProgram for F {
    fn run(&self, storage: &mut SharedStorage) -> (Key, u64) {
        self(storage)
    }
}

/// The declarative program form scenario files use: read one storage key,
/// branch on its value, optionally write, and emit a contribution. Enough
/// to express reach measurement (contribute once per device, then stop).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedProgram {
    /// Storage key to inspect.
    pub read: String,
    /// Expected value; `None` means "key absent".
    pub equals: Option<String>,
    /// Write applied when the comparison matches.
    pub write_on_match: Option<(String, String)>,
    pub emit_on_match: (Key, u64),
    pub emit_otherwise: (Key, u64),
}

impl ContributionProgram for ScriptedProgram {
    fn run(&self, storage: &mut SharedStorage) -> (Key, u64) {
        let current = storage.get(&self.read).map(str::to_string);
        if current.as_deref() == self.equals.as_deref() {
            if let Some((k, v)) = &self.write_on_match {
                storage.set(k.clone(), v.clone());
            }
            self.emit_on_match
        } else {
            self.emit_otherwise
        }
    }
}

#[derive(Debug, Default)]
struct DeviceState {
    storage: SharedStorage,
    window: u64,
    used_value: u64,
    used_slots: u64,
    last_tick: Tick,
}

/// Private aggregation client. Budgets renew per (device, window): the
/// window index is the tick divided by the window length.
pub struct PaaClient {
    a1: u64,
    a0: u64,
    window_len: u64,
    devices: BTreeMap<String, DeviceState>,
}

impl PaaClient {
    pub fn new(a1: u64, a0: u64, window_len: u64) -> Result<Self, ClientError> {
        if a1 == 0 || a0 == 0 {
            return Err(ClientError::InvalidBudget);
        }
        if window_len == 0 {
            return Err(ClientError::InvalidWindowLength);
        }
        Ok(PaaClient { a1, a0, window_len, devices: BTreeMap::new() })
    }

    pub fn window_of(&self, at: Tick) -> u64 {
        at.0 / self.window_len
    }

    pub fn storage(&self, device: &str) -> Option<&SharedStorage> {
        self.devices.get(device).map(|d| &d.storage)
    }

    /// Run a contribution program for an event on `device` at `at`.
    /// Storage is updated regardless of the outcome; the report is null
    /// when the program emits value 0 or the window budget is exhausted.
    pub fn register_event<R: Rng>(
        &mut self,
        device: &str,
        at: Tick,
        program: &dyn ContributionProgram,
        rng: &mut R,
    ) -> Result<AggregatableReport, ClientError> {
        let window = self.window_of(at);
        let state = self.devices.entry(device.to_string()).or_default();
        if at < state.last_tick {
            return Err(ClientError::TimeRegression { at: at.0, last: state.last_tick.0 });
        }
        state.last_tick = at;
        if window > state.window {
            state.window = window;
            state.used_value = 0;
            state.used_slots = 0;
        }

        let (key, value) = program.run(&mut state.storage);
        let id = ReportId::random(rng);
        if value == 0 {
            return Ok(AggregatableReport::null(id));
        }
        if state.used_value + value <= self.a1 && state.used_slots < self.a0 {
            state.used_value += value;
            state.used_slots += 1;
            Ok(AggregatableReport { id, contribution: Some(Contribution { key, value }) })
        } else {
            Ok(AggregatableReport::null(id))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn filt(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn source(id: &str, at: u64, expires: u64, filters: &[&str], key: u128) -> SourceRegistration {
        SourceRegistration {
            src_id: id.into(),
            dest: "shop.example".into(),
            expires: Tick(expires),
            filters: filt(filters),
            key: Key(key),
            registered_at: Tick(at),
        }
    }

    fn trigger(at: u64, filters: &[&str], key: u128, value: u64) -> TriggerRegistration {
        TriggerRegistration {
            trig_id: format!("t{at}"),
            dest: "shop.example".into(),
            filters: filt(filters),
            key: Key(key),
            value,
            at: Tick(at),
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn campaign_purchase_walkthrough() {
        // An ad for three shoe products; a later sneaker purchase worth 70
        // attributes to it and merges the keys bitwise.
        let mut client = AraClient::new(1 << 16, 8).unwrap();
        client
            .register_source(source(
                "campaign",
                0,
                30 * 86_400,
                &["sneakers", "sandals", "flip-flops"],
                0xff00,
            ))
            .unwrap();
        let report = client.register_trigger(&trigger(86_400, &["sneakers"], 0x70, 70), &mut rng());
        let c = report.contribution.unwrap();
        assert_eq!(c.value, 70);
        assert_eq!(c.key, Key(0xff70));
    }

    #[test]
    fn last_touch_picks_most_recent_active_match() {
        let mut client = AraClient::new(1000, 8).unwrap();
        client.register_source(source("old", 0, 100, &["a"], 1)).unwrap();
        client.register_source(source("new", 10, 100, &["a"], 2)).unwrap();
        client.register_source(source("other", 20, 100, &["b"], 4)).unwrap();

        let r = client.register_trigger(&trigger(50, &["a"], 0, 5), &mut rng());
        assert_eq!(r.contribution.unwrap().key, Key(2));

        // After "new" expires, "old" wins again.
        let r = client.register_trigger(&trigger(101, &["a"], 0, 5), &mut rng());
        assert!(r.is_null()); // both expired at 100
    }

    #[test]
    fn zero_value_and_unmatched_triggers_are_null() {
        let mut client = AraClient::new(1000, 8).unwrap();
        client.register_source(source("s", 0, 100, &["a"], 1)).unwrap();
        assert!(client.register_trigger(&trigger(5, &["a"], 0, 0), &mut rng()).is_null());
        assert!(client.register_trigger(&trigger(5, &["zz"], 0, 7), &mut rng()).is_null());
        // Wrong destination.
        let mut t = trigger(5, &["a"], 0, 7);
        t.dest = "elsewhere.example".into();
        assert!(client.register_trigger(&t, &mut rng()).is_null());
    }

    #[test]
    fn exhausted_budget_falls_through_to_older_source() {
        let mut client = AraClient::new(10, 8).unwrap();
        client.register_source(source("old", 0, 100, &["a"], 1)).unwrap();
        client.register_source(source("new", 1, 100, &["a"], 2)).unwrap();

        // Drain "new" (value budget 10).
        let r = client.register_trigger(&trigger(10, &["a"], 0, 10), &mut rng());
        assert_eq!(r.contribution.unwrap().key, Key(2));
        // Next trigger does not fit on "new"; default mode lets "old" take it.
        let r = client.register_trigger(&trigger(11, &["a"], 0, 4), &mut rng());
        assert_eq!(r.contribution.unwrap().key, Key(1));

        // Strict-halt mode stops at the exhausted match instead.
        let mut strict = AraClient::new(10, 8).unwrap().with_strict_halt();
        strict.register_source(source("old", 0, 100, &["a"], 1)).unwrap();
        strict.register_source(source("new", 1, 100, &["a"], 2)).unwrap();
        strict.register_trigger(&trigger(10, &["a"], 0, 10), &mut rng());
        let r = strict.register_trigger(&trigger(11, &["a"], 0, 4), &mut rng());
        assert!(r.is_null());
    }

    #[test]
    fn sparsity_budget_counts_contributions() {
        let mut client = AraClient::new(1000, 2).unwrap();
        client.register_source(source("s", 0, 100, &["a"], 1)).unwrap();
        assert!(!client.register_trigger(&trigger(1, &["a"], 0, 1), &mut rng()).is_null());
        assert!(!client.register_trigger(&trigger(2, &["a"], 0, 1), &mut rng()).is_null());
        assert!(client.register_trigger(&trigger(3, &["a"], 0, 1), &mut rng()).is_null());
    }

    #[test]
    fn duplicate_and_out_of_order_registrations_error() {
        let mut client = AraClient::new(10, 2).unwrap();
        client.register_source(source("s", 5, 100, &["a"], 1)).unwrap();
        assert_eq!(
            client.register_source(source("s", 6, 100, &["a"], 1)),
            Err(ClientError::DuplicateSourceId("s".into()))
        );
        assert_eq!(
            client.register_source(source("earlier", 4, 100, &["a"], 1)),
            Err(ClientError::TimeRegression { at: 4, last: 5 })
        );
    }

    fn reach_program(campaign_key: u128, half_budget: u64) -> ScriptedProgram {
        ScriptedProgram {
            read: "seen".into(),
            equals: None,
            write_on_match: Some(("seen".into(), "1".into())),
            emit_on_match: (Key(campaign_key), half_budget),
            emit_otherwise: (Key(campaign_key), 0),
        }
    }

    #[test]
    fn reach_walkthrough_first_contact_counts_once() {
        // Two devices see a campaign; one device sees it three times.
        // Expected report stream: report, report, null, report, null.
        let a1 = 1u64 << 16;
        let mut client = PaaClient::new(a1, 8, 600).unwrap();
        let prog = reach_program(0xc0ffee, a1 / 2);
        let mut r = rng();

        let outcomes = [
            ("alice", 10u64),
            ("bob", 20),
            ("alice", 30),
            ("carol", 40),
            ("carol", 50),
        ]
        .map(|(dev, t)| {
            client
                .register_event(dev, Tick(t), &prog, &mut r)
                .unwrap()
                .is_null()
        });
        assert_eq!(outcomes, [false, false, true, false, true]);
    }

    #[test]
    fn paa_budget_exhaustion_and_window_reset() {
        let mut client = PaaClient::new(100, 8, 600).unwrap();
        let mut r = rng();
        let emit = |v: u64| move |_s: &mut SharedStorage| (Key(1), v);

        assert!(!client.register_event("d", Tick(0), &emit(80), &mut r).unwrap().is_null());
        // 80 + 30 > 100: exhausted within the same window.
        assert!(client.register_event("d", Tick(10), &emit(30), &mut r).unwrap().is_null());
        // Next window renews the budget.
        assert!(!client.register_event("d", Tick(600), &emit(30), &mut r).unwrap().is_null());
    }

    #[test]
    fn paa_storage_persists_across_windows_and_time_must_advance() {
        let mut client = PaaClient::new(100, 8, 10).unwrap();
        let mut r = rng();
        let mark = |_: &mut SharedStorage| (Key(1), 1);
        client.register_event("d", Tick(25), &mark, &mut r).unwrap();
        assert_eq!(
            client.register_event("d", Tick(24), &mark, &mut r),
            Err(ClientError::TimeRegression { at: 24, last: 25 })
        );

        let prog = reach_program(5, 7);
        client.register_event("e", Tick(0), &prog, &mut r).unwrap();
        // Different window, same device: storage still says "seen".
        let rep = client.register_event("e", Tick(100), &prog, &mut r).unwrap();
        assert!(rep.is_null());
        assert_eq!(client.storage("e").unwrap().get("seen"), Some("1"));
    }

    #[test]
    fn replay_with_same_seed_is_identical() {
        let run = || {
            let mut client = AraClient::new(100, 4).unwrap();
            client.register_source(source("s", 0, 1000, &["a"], 3)).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20)
                .map(|i| client.register_trigger(&trigger(i + 1, &["a"], 1, 7), &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        /// Whatever the trigger stream, per-source spend never exceeds the
        /// budgets and every trigger yields exactly one report.
        #[test]
        fn ara_budgets_are_safe(
            triggers in proptest::collection::vec((1u64..50, 0u64..30), 0..60),
            a1 in 1u64..200,
            a0 in 1u64..10,
        ) {
            let mut client = AraClient::new(a1, a0).unwrap();
            client.register_source(source("s", 0, 1_000_000, &["a"], 1)).unwrap();
            let mut r = rng();
            let mut total = 0u64;
            let mut slots = 0u64;
            let mut at = 0u64;
            for (value, gap) in triggers {
                at += gap;
                let rep = client.register_trigger(&trigger(at, &["a"], 0, value), &mut r);
                if let Some(c) = rep.contribution {
                    total += c.value;
                    slots += 1;
                }
            }
            prop_assert!(total <= a1);
            prop_assert!(slots <= a0);
        }

        /// Per-window PAA spend respects both budgets for every device.
        #[test]
        fn paa_budgets_are_safe(
            events in proptest::collection::vec((0u8..3, 1u64..40, 0u64..20), 0..60),
            a1 in 1u64..120,
            a0 in 1u64..6,
        ) {
            let mut client = PaaClient::new(a1, a0, 50).unwrap();
            let mut r = rng();
            let mut at = 0u64;
            let mut spent: BTreeMap<(String, u64), (u64, u64)> = BTreeMap::new();
            for (dev, value, gap) in events {
                at += gap;
                let device = format!("d{dev}");
                let emit = move |_: &mut SharedStorage| (Key(1), value);
                let rep = client.register_event(&device, Tick(at), &emit, &mut r).unwrap();
                if let Some(c) = rep.contribution {
                    let w = at / 50;
                    let e = spent.entry((device, w)).or_insert((0, 0));
                    e.0 += c.value;
                    e.1 += 1;
                }
            }
            for ((_, _), (v, s)) in spent {
                prop_assert!(v <= a1);
                prop_assert!(s <= a0);
            }
        }
    }
}
