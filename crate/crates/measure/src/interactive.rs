//! Adversary-driven interaction: a mechanism answers a sequence of
//! (database, query) moves chosen adaptively from the transcript so far.
//! Also home to the privacy filters and the two filter-gated mechanisms
//! built from them.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kahan::KahanSum;

/// Default bound on transcript length; a scripted adversary that loops is
/// a bug, not a workload.
pub const DEFAULT_MAX_STEPS: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum TranscriptError {
    #[error("transcript exceeded {0} steps")]
    MaxStepsExceeded(usize),
    #[error("adversary changed the database at step {0}, expected it fixed")]
    UnstableDatabase(usize),
    #[error("adversary mixture must have positive total weight")]
    EmptyMixture,
}

/// A stateful mechanism stepped one query at a time. The state lives in
/// `self`; randomness comes only from the passed stream, so a transcript
/// is a deterministic function of (mechanism, adversary, seed).
pub trait InteractiveMechanism {
    type Db;
    type Query;
    type Response: Clone;

    fn step(&mut self, db: &Self::Db, query: &Self::Query, rng: &mut ChaCha8Rng)
        -> Self::Response;
}

/// Chooses the next move from the responses seen so far, or halts.
/// Implementations must be pure functions of the transcript; that is what
/// makes exact transcript enumeration possible.
pub trait Adversary<M: InteractiveMechanism> {
    fn next_move(&self, transcript: &[M::Response]) -> Option<(M::Db, M::Query)>;
}

/// Run the interaction to completion and return the response transcript.
pub fn run_transcript<M, A>(
    mechanism: &mut M,
    adversary: &A,
    rng: &mut ChaCha8Rng,
    max_steps: usize,
) -> Result<Vec<M::Response>, TranscriptError>
where
    M: InteractiveMechanism,
    A: Adversary<M>,
{
    let mut transcript = Vec::new();
    while let Some((db, query)) = adversary.next_move(&transcript) {
        if transcript.len() >= max_steps {
            return Err(TranscriptError::MaxStepsExceeded(max_steps));
        }
        let response = mechanism.step(&db, &query, rng);
        transcript.push(response);
    }
    Ok(transcript)
}

/// Run against an adversary drawn from a weighted mixture: the draw happens
/// once, up front, then the chosen adversary plays the whole interaction.
pub fn run_transcript_mixture<M, A>(
    mechanism: &mut M,
    mixture: &[(f64, A)],
    rng: &mut ChaCha8Rng,
    max_steps: usize,
) -> Result<Vec<M::Response>, TranscriptError>
where
    M: InteractiveMechanism,
    A: Adversary<M>,
{
    let total: f64 = mixture.iter().map(|(w, _)| w.max(0.0)).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(TranscriptError::EmptyMixture);
    }
    let mut u = rand::Rng::random::<f64>(rng) * total;
    let mut chosen = mixture.len() - 1;
    for (i, (w, _)) in mixture.iter().enumerate() {
        let w = w.max(0.0);
        if u < w {
            chosen = i;
            break;
        }
        u -= w;
    }
    run_transcript(mechanism, &mixture[chosen].1, rng, max_steps)
}

/// Like [`run_transcript`], additionally checking that the adversary
/// presents the same database every turn. Several composition arguments
/// only hold on such "static database" interactions; tests use this to
/// reject a harness misuse early.
pub fn run_transcript_stable<M, A>(
    mechanism: &mut M,
    adversary: &A,
    rng: &mut ChaCha8Rng,
    max_steps: usize,
) -> Result<Vec<M::Response>, TranscriptError>
where
    M: InteractiveMechanism,
    M::Db: PartialEq,
    A: Adversary<M>,
{
    let mut transcript = Vec::new();
    let mut first_db: Option<M::Db> = None;
    while let Some((db, query)) = adversary.next_move(&transcript) {
        if transcript.len() >= max_steps {
            return Err(TranscriptError::MaxStepsExceeded(max_steps));
        }
        match &first_db {
            None => first_db = Some(db),
            Some(d) if *d == db => {}
            Some(_) => return Err(TranscriptError::UnstableDatabase(transcript.len())),
        }
        let response = mechanism.step(first_db.as_ref().unwrap(), &query, rng);
        transcript.push(response);
    }
    Ok(transcript)
}

fn charge_sums(history: &[(f64, f64)]) -> (f64, f64) {
    let mut e = KahanSum::new();
    let mut d = KahanSum::new();
    for &(eps, delta) in history {
        e.add(eps);
        d.add(delta);
    }
    (e.value(), d.value())
}

/// Accept iff running (eps, delta) totals, including the new request, stay
/// within the caps. Comparison is exact <=; no slack.
pub fn filter_eps_delta(
    history: &[(f64, f64)],
    request: (f64, f64),
    caps: (f64, f64),
) -> bool {
    let (e, d) = charge_sums(history);
    e + request.0 <= caps.0 && d + request.1 <= caps.1
}

/// The (rho, delta) filter used with concentrated-DP accounting. The
/// arithmetic is the same additive check; only the parameter meaning
/// differs, so keep a separate name at call sites.
pub fn filter_rho_delta(
    history: &[(f64, f64)],
    request: (f64, f64),
    caps: (f64, f64),
) -> bool {
    filter_eps_delta(history, request, caps)
}

/// Filter-gated mechanism: each query declares its (eps, delta) price; a
/// rejected query returns `None` and is recorded as consuming nothing.
#[derive(Debug, Clone)]
pub struct FilteredMechanism {
    caps: (f64, f64),
    history: Vec<(f64, f64)>,
}

impl FilteredMechanism {
    pub fn new(eps_cap: f64, delta_cap: f64) -> Self {
        FilteredMechanism { caps: (eps_cap, delta_cap), history: Vec::new() }
    }

    /// Recorded per-step consumption, (0, 0) on rejected steps.
    pub fn history(&self) -> &[(f64, f64)] {
        &self.history
    }

    pub fn consumed(&self) -> (f64, f64) {
        charge_sums(&self.history)
    }

    pub fn step<U: Ord, R>(
        &mut self,
        units: &BTreeSet<U>,
        price: (f64, f64),
        query: impl FnOnce(&BTreeSet<U>) -> R,
    ) -> Option<R> {
        if filter_eps_delta(&self.history, price, self.caps) {
            self.history.push(price);
            Some(query(units))
        } else {
            self.history.push((0.0, 0.0));
            None
        }
    }
}

/// Per-unit filter gating: instead of refusing the whole query, drop the
/// units whose own budgets cannot pay for it and answer on the rest.
#[derive(Debug, Clone)]
pub struct PerUnitFilteredMechanism<U: Ord + Clone> {
    caps: (f64, f64),
    /// One map per completed step: what each unit was charged that step.
    /// A masked unit is charged (0, 0), visible in the record.
    steps: Vec<BTreeMap<U, (f64, f64)>>,
}

impl<U: Ord + Clone> PerUnitFilteredMechanism<U> {
    pub fn new(eps_cap: f64, delta_cap: f64) -> Self {
        PerUnitFilteredMechanism { caps: (eps_cap, delta_cap), steps: Vec::new() }
    }

    pub fn steps(&self) -> &[BTreeMap<U, (f64, f64)>] {
        &self.steps
    }

    /// Charges recorded for one unit across all steps so far.
    pub fn consumed(&self, unit: &U) -> Vec<(f64, f64)> {
        self.steps
            .iter()
            .map(|m| m.get(unit).copied().unwrap_or((0.0, 0.0)))
            .collect()
    }

    /// `price` maps each unit to what this query costs it; units absent
    /// from the map are free. Returns the query's answer on the masked
    /// database of units that could pay.
    pub fn step<R>(
        &mut self,
        units: &BTreeSet<U>,
        price: &BTreeMap<U, (f64, f64)>,
        query: impl FnOnce(&BTreeSet<U>) -> R,
    ) -> R {
        let mut admitted = BTreeSet::new();
        let mut record = BTreeMap::new();
        for u in units {
            let p = price.get(u).copied().unwrap_or((0.0, 0.0));
            let hist = self.consumed(u);
            if filter_eps_delta(&hist, p, self.caps) {
                admitted.insert(u.clone());
                record.insert(u.clone(), p);
            } else {
                record.insert(u.clone(), (0.0, 0.0));
            }
        }
        self.steps.push(record);
        query(&admitted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn filter_boundary_is_exact() {
        let hist = [(0.5, 0.0), (0.25, 0.0)];
        assert!(filter_eps_delta(&hist, (0.25, 0.0), (1.0, 0.0)));
        assert!(!filter_eps_delta(&hist, (0.3, 0.0), (1.0, 0.0)));
        assert!(!filter_eps_delta(&hist, (0.25, 0.1), (1.0, 0.0)));
        assert!(filter_eps_delta(&[], (0.0, 0.0), (0.0, 0.0)));
        assert!(filter_rho_delta(&hist, (0.25, 0.0), (1.0, 0.0)));
    }

    #[test]
    fn filtered_mechanism_rejects_and_records_zero() {
        let mut m = FilteredMechanism::new(1.0, 0.0);
        let units: BTreeSet<u32> = [1, 2, 3].into();
        assert_eq!(m.step(&units, (0.6, 0.0), |u| u.len()), Some(3));
        // Over cap: refused, recorded as free, later cheap query still fits.
        assert_eq!(m.step(&units, (0.6, 0.0), |u| u.len()), None);
        assert_eq!(m.step(&units, (0.4, 0.0), |u| u.len()), Some(3));
        assert_eq!(m.history(), &[(0.6, 0.0), (0.0, 0.0), (0.4, 0.0)]);
        let (e, d) = m.consumed();
        assert!(e <= 1.0 && d <= 0.0);
    }

    #[test]
    fn per_unit_masking() {
        let mut m = PerUnitFilteredMechanism::new(1.0, 0.0);
        let units: BTreeSet<&str> = ["a", "b"].into();
        let price1: BTreeMap<&str, (f64, f64)> =
            [("a", (0.8, 0.0)), ("b", (0.2, 0.0))].into();
        let seen1 = m.step(&units, &price1, |masked| masked.clone());
        assert_eq!(seen1, units);

        // Second query prices both at 0.5: only "b" can pay.
        let price2: BTreeMap<&str, (f64, f64)> =
            [("a", (0.5, 0.0)), ("b", (0.5, 0.0))].into();
        let seen2 = m.step(&units, &price2, |masked| masked.clone());
        assert_eq!(seen2, ["b"].into());

        // The masked unit's recorded consumption at that step is zero.
        assert_eq!(m.consumed(&"a"), vec![(0.8, 0.0), (0.0, 0.0)]);
        assert_eq!(m.consumed(&"b"), vec![(0.2, 0.0), (0.5, 0.0)]);
    }

    /// Counting mechanism + scripted adversary used by the runner tests.
    struct Count;
    impl InteractiveMechanism for Count {
        type Db = Vec<u32>;
        type Query = u32;
        type Response = usize;
        fn step(&mut self, db: &Vec<u32>, q: &u32, _rng: &mut ChaCha8Rng) -> usize {
            db.iter().filter(|x| **x >= *q).count()
        }
    }

    struct Script {
        moves: Vec<(Vec<u32>, u32)>,
    }
    impl Adversary<Count> for Script {
        fn next_move(&self, transcript: &[usize]) -> Option<(Vec<u32>, u32)> {
            self.moves.get(transcript.len()).cloned()
        }
    }

    #[test]
    fn transcripts_are_deterministic_and_bounded() {
        let adv = Script { moves: vec![(vec![1, 2, 3], 2), (vec![5], 1)] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = run_transcript(&mut Count, &adv, &mut rng, 10).unwrap();
        assert_eq!(t, vec![2, 1]);

        let empty = Script { moves: vec![] };
        let t = run_transcript(&mut Count, &empty, &mut rng, 10).unwrap();
        assert!(t.is_empty());

        struct Forever;
        impl Adversary<Count> for Forever {
            fn next_move(&self, _t: &[usize]) -> Option<(Vec<u32>, u32)> {
                Some((vec![], 0))
            }
        }
        assert_eq!(
            run_transcript(&mut Count, &Forever, &mut rng, 50).unwrap_err(),
            TranscriptError::MaxStepsExceeded(50)
        );
    }

    #[test]
    fn stability_check_catches_database_changes() {
        let stable = Script { moves: vec![(vec![1, 2], 1), (vec![1, 2], 2)] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(run_transcript_stable(&mut Count, &stable, &mut rng, 10).is_ok());

        let shifty = Script { moves: vec![(vec![1, 2], 1), (vec![9], 2)] };
        assert_eq!(
            run_transcript_stable(&mut Count, &shifty, &mut rng, 10).unwrap_err(),
            TranscriptError::UnstableDatabase(1)
        );
    }

    #[test]
    fn mixture_picks_by_weight_deterministically() {
        let advs = vec![
            (0.0, Script { moves: vec![(vec![1], 1)] }),
            (1.0, Script { moves: vec![(vec![1, 2, 3], 1), (vec![1], 1)] }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = run_transcript_mixture(&mut Count, &advs, &mut rng, 10).unwrap();
        assert_eq!(t, vec![3, 1]); // zero-weight adversary never chosen

        let none: Vec<(f64, Script)> = vec![(0.0, Script { moves: vec![] })];
        assert_eq!(
            run_transcript_mixture(&mut Count, &none, &mut rng, 10).unwrap_err(),
            TranscriptError::EmptyMixture
        );
    }

    proptest! {
        /// Shrinking any request below an accepted one stays accepted.
        #[test]
        fn filter_monotone(
            hist in proptest::collection::vec((0.0f64..0.5, 0.0f64..0.01), 0..10),
            req_e in 0.0f64..0.5,
            req_d in 0.0f64..0.01,
            shrink in 0.0f64..1.0,
        ) {
            let caps = (2.0, 0.05);
            if filter_eps_delta(&hist, (req_e, req_d), caps) {
                prop_assert!(filter_eps_delta(
                    &hist,
                    (req_e * shrink, req_d * shrink),
                    caps
                ));
            }
        }

        /// The universal mechanism can never drive its recorded totals
        /// past the caps, whatever the request stream does.
        #[test]
        fn filtered_mechanism_within_caps(
            prices in proptest::collection::vec((0.0f64..1.0, 0.0f64..0.2), 0..40)
        ) {
            let mut m = FilteredMechanism::new(1.5, 0.3);
            let units: BTreeSet<u8> = [0].into();
            for p in prices {
                let _ = m.step(&units, p, |u| u.len());
            }
            let (e, d) = m.consumed();
            prop_assert!(e <= 1.5 && d <= 0.3);
        }
    }
}
