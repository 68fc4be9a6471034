//! Numerical privacy audits. Everything here is exact (up to f64
//! rounding): distributions are finite and enumerated in full, divergences
//! are sums over supports, and interactive mechanisms are expanded into
//! complete transcript distributions. No sampling, no estimates — if a
//! claimed (eps, delta) bound is wrong, these checks see it.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::event_level::{true_output, EventError, EventOutput, EventParams, Irr};
use crate::interactive::Adversary;
use crate::kahan::KahanSum;
use crate::model::Key;
use crate::noise::{DLap, NoiseError};
use crate::summary::{
    remove_unit, MeasurementDatabase, MsrQuery, MsrResponse, RemovalTarget,
    SummaryError, SummaryMechanism, Trace, TurnOutcome, Unit,
};

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("a distribution needs at least one outcome with positive mass")]
    EmptyDistribution,
    #[error("outcome weight {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("epsilon must be finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("instance would need {0} cells/branches, over the limit")]
    InstanceTooLarge(u128),
    #[error("shift vector must contain at least one coordinate")]
    EmptyShift,
    #[error("exact transcript enumeration needs truncated noise (delta > 0)")]
    RequiresTruncation,
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error(transparent)]
    Event(#[from] EventError),
}

/// An exact probability distribution over finitely many outcomes.
/// Duplicate outcomes merge; the total is normalized away from tiny
/// accumulation drift at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDist<T: Ord> {
    probs: BTreeMap<T, f64>,
}

impl<T: Ord> FiniteDist<T> {
    pub fn new(weights: impl IntoIterator<Item = (T, f64)>) -> Result<Self, AuditError> {
        let mut probs: BTreeMap<T, f64> = BTreeMap::new();
        for (outcome, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(AuditError::InvalidWeight(w));
            }
            *probs.entry(outcome).or_insert(0.0) += w;
        }
        probs.retain(|_, w| *w > 0.0);
        let total: f64 = probs.values().copied().collect::<KahanSum>().value();
        if probs.is_empty() || total <= 0.0 {
            return Err(AuditError::EmptyDistribution);
        }
        for w in probs.values_mut() {
            *w /= total;
        }
        Ok(FiniteDist { probs })
    }

    pub fn prob(&self, outcome: &T) -> f64 {
        self.probs.get(outcome).copied().unwrap_or(0.0)
    }

    pub fn outcomes(&self) -> impl Iterator<Item = (&T, f64)> {
        self.probs.iter().map(|(o, p)| (o, *p))
    }

    pub fn support_len(&self) -> usize {
        self.probs.len()
    }

    /// Pushforward under `f`, merging collided outcomes.
    pub fn map<U: Ord>(&self, mut f: impl FnMut(&T) -> U) -> FiniteDist<U> {
        let mut probs: BTreeMap<U, f64> = BTreeMap::new();
        for (o, p) in &self.probs {
            *probs.entry(f(o)).or_insert(0.0) += p;
        }
        FiniteDist { probs }
    }
}

impl<T: Ord + Clone> FiniteDist<T> {
    /// Weighted mixture of distributions; weights need not be normalized.
    pub fn mixture(components: &[(f64, FiniteDist<T>)]) -> Result<Self, AuditError> {
        let mut weights = Vec::new();
        for (w, dist) in components {
            if !w.is_finite() || *w < 0.0 {
                return Err(AuditError::InvalidWeight(*w));
            }
            for (o, p) in dist.outcomes() {
                weights.push((o.clone(), w * p));
            }
        }
        FiniteDist::new(weights)
    }
}

fn one_sided_divergence<T: Ord>(p: &FiniteDist<T>, q: &FiniteDist<T>, e_eps: f64) -> f64 {
    let mut acc = KahanSum::new();
    for (o, pp) in p.outcomes() {
        let excess = pp - e_eps * q.prob(o);
        if excess > 0.0 {
            acc.add(excess);
        }
    }
    acc.value()
}

/// Hockey-stick divergence at epsilon, maximized over both directions:
/// the smallest delta for which the two distributions are
/// (eps, delta)-indistinguishable.
pub fn hockey_stick_delta<T: Ord>(
    p: &FiniteDist<T>,
    q: &FiniteDist<T>,
    eps: f64,
) -> Result<f64, AuditError> {
    if !eps.is_finite() {
        return Err(AuditError::InvalidEpsilon(eps));
    }
    let e_eps = eps.exp();
    Ok(one_sided_divergence(p, q, e_eps).max(one_sided_divergence(q, p, e_eps)))
}

/// Total variation distance — the hockey stick at epsilon 0.
pub fn total_variation<T: Ord>(p: &FiniteDist<T>, q: &FiniteDist<T>) -> f64 {
    one_sided_divergence(p, q, 1.0).max(one_sided_divergence(q, p, 1.0))
}

/// Exact hockey-stick divergence between d independent discrete-Laplace
/// coordinates and the same coordinates shifted by `shift`. Truncated
/// scales enumerate their box exactly; untruncated ones widen the window
/// until the neglected tail is below 1e-21 per side. `cell_limit` bounds
/// the enumerated product space.
pub fn audit_tdlap(
    a: f64,
    tau: Option<u64>,
    shift: &[i64],
    eps: f64,
    cell_limit: u128,
) -> Result<f64, AuditError> {
    if shift.is_empty() {
        return Err(AuditError::EmptyShift);
    }
    if !eps.is_finite() {
        return Err(AuditError::InvalidEpsilon(eps));
    }
    let dist = match tau {
        Some(t) => DLap::truncated(a, t)?,
        None => DLap::untruncated(a)?,
    };
    let half_window = match tau {
        Some(t) => t as i64,
        None => {
            let mut t = 1i64;
            while dist.tail_above(t) >= 1e-21 {
                t += 1;
            }
            t
        }
    };

    // Per coordinate, tabulate (pmf(x), pmf(x - u)) over the union of the
    // two supports; outside it both factors vanish.
    let mut tables: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut cells: u128 = 1;
    for &u in shift {
        let lo = (-half_window).min(-half_window + u);
        let hi = half_window.max(half_window + u);
        let width = (hi - lo + 1) as u128;
        cells = cells.saturating_mul(width);
        if cells > cell_limit {
            return Err(AuditError::InstanceTooLarge(cells));
        }
        tables.push((lo..=hi).map(|x| (dist.pmf(x), dist.pmf(x - u))).collect());
    }

    fn rec(
        tables: &[Vec<(f64, f64)>],
        p: f64,
        q: f64,
        e_eps: f64,
        acc: &mut (KahanSum, KahanSum),
    ) {
        match tables.split_first() {
            None => {
                let fwd = p - e_eps * q;
                if fwd > 0.0 {
                    acc.0.add(fwd);
                }
                let rev = q - e_eps * p;
                if rev > 0.0 {
                    acc.1.add(rev);
                }
            }
            Some((head, rest)) => {
                for &(pp, qq) in head {
                    if pp == 0.0 && qq == 0.0 {
                        continue;
                    }
                    rec(rest, p * pp, q * qq, e_eps, acc);
                }
            }
        }
    }

    let mut acc = (KahanSum::new(), KahanSum::new());
    rec(&tables, 1.0, 1.0, eps.exp(), &mut acc);
    Ok(acc.0.value().max(acc.1.value()))
}

/// Adversary wrapper that presents the neighboring database: every turn's
/// database goes through [`remove_unit`] before the mechanism sees it.
pub struct RemovingAdversary<'a, A> {
    pub inner: &'a A,
    pub target: RemovalTarget,
}

impl<A> Adversary<SummaryMechanism> for RemovingAdversary<'_, A>
where
    A: Adversary<SummaryMechanism>,
{
    fn next_move(&self, transcript: &[MsrResponse]) -> Option<(MeasurementDatabase, MsrQuery)> {
        let (db, query) = self.inner.next_move(transcript)?;
        Some((remove_unit(&db, &self.target), query))
    }
}

/// The exact distribution over complete transcripts of the summary
/// mechanism against an adversary. Works by expanding, per committed
/// turn, the joint distribution of per-key outcomes (suppressed, or
/// released at each reachable value) and recursing on every branch.
/// Requires truncated noise on every turn; `branch_limit` bounds the
/// number of live transcripts.
pub fn exact_msr_transcripts<A>(
    mechanism: &SummaryMechanism,
    adversary: &A,
    max_steps: usize,
    branch_limit: usize,
) -> Result<FiniteDist<Vec<MsrResponse>>, AuditError>
where
    A: Adversary<SummaryMechanism>,
{
    struct Walk<'a, A> {
        adversary: &'a A,
        max_steps: usize,
        branch_limit: usize,
        leaves: Vec<(Vec<MsrResponse>, f64)>,
        live: usize,
    }

    impl<A: Adversary<SummaryMechanism>> Walk<'_, A> {
        fn go(
            &mut self,
            mech: &SummaryMechanism,
            prefix: &mut Vec<MsrResponse>,
            mass: f64,
        ) -> Result<(), AuditError> {
            let mv = if prefix.len() >= self.max_steps {
                None
            } else {
                self.adversary.next_move(prefix)
            };
            let Some((db, query)) = mv else {
                self.leaves.push((prefix.clone(), mass));
                return Ok(());
            };

            let mut next = mech.clone();
            match next.advance(&db, &query)? {
                TurnOutcome::Aborted => {
                    prefix.push(MsrResponse::Abort);
                    self.go(&next, prefix, mass)?;
                    prefix.pop();
                }
                TurnOutcome::Committed { sums, tau, scale } => {
                    let Some(tau) = tau else {
                        return Err(AuditError::RequiresTruncation);
                    };
                    let dist = DLap::truncated(scale, tau)?;
                    // Per key: suppressed, or released at value v with
                    // v = sum + noise, v > tau. A key with sum 0 can
                    // never clear the threshold.
                    type KeyOutcomes = Vec<(Option<i64>, f64)>;
                    let mut per_key: Vec<(Key, KeyOutcomes)> = Vec::new();
                    for (&key, &sum) in &sums {
                        let tau_i = tau as i64;
                        let lo = (tau_i + 1).max(sum - tau_i);
                        let hi = sum + tau_i;
                        let mut outcomes: KeyOutcomes = Vec::new();
                        let mut suppressed = KahanSum::new();
                        for noise in -tau_i..=tau_i {
                            let v = sum + noise;
                            if (lo..=hi).contains(&v) && v > tau_i {
                                outcomes.push((Some(v), dist.pmf(noise)));
                            } else {
                                suppressed.add(dist.pmf(noise));
                            }
                        }
                        if suppressed.value() > 0.0 {
                            outcomes.push((None, suppressed.value()));
                        }
                        if outcomes.len() > 1 {
                            per_key.push((key, outcomes));
                        }
                        // A key with a single certain outcome adds no
                        // branching; released-for-sure cannot happen under
                        // truncation, so that outcome is "suppressed".
                    }

                    let branches: u128 = per_key
                        .iter()
                        .map(|(_, o)| o.len() as u128)
                        .product();
                    if self.live as u128 * branches > self.branch_limit as u128 {
                        return Err(AuditError::InstanceTooLarge(branches));
                    }
                    self.live += branches.max(1) as usize - 1;

                    // Expand the product of per-key outcome distributions.
                    let mut joint: Vec<(Vec<(Key, i64)>, f64)> = vec![(Vec::new(), mass)];
                    for (key, outcomes) in &per_key {
                        let mut grown = Vec::with_capacity(joint.len() * outcomes.len());
                        for (entries, m) in &joint {
                            for (value, p) in outcomes {
                                let mut e = entries.clone();
                                if let Some(v) = value {
                                    e.push((*key, *v));
                                }
                                grown.push((e, m * p));
                            }
                        }
                        joint = grown;
                    }
                    for (entries, m) in joint {
                        prefix.push(MsrResponse::Summary(entries));
                        self.go(&next, prefix, m)?;
                        prefix.pop();
                        self.live = self.live.saturating_sub(1);
                    }
                    self.live += 1;
                }
            }
            Ok(())
        }
    }

    let mut walk = Walk { adversary, max_steps, branch_limit, leaves: Vec::new(), live: 1 };
    walk.go(mechanism, &mut Vec::new(), 1.0)?;
    FiniteDist::new(walk.leaves)
}

/// One complete event-level transcript: for each turn, the unit-labelled
/// outputs released that turn.
pub type EventTranscript = Vec<Vec<(String, EventOutput)>>;

/// The exact transcript distribution of the event-level mechanism against
/// an adversary. `drop_unit` strips that unit's triggers wherever it
/// appears, producing the neighboring run in which the person never
/// converted — registrations and noisy reports still happen.
pub fn exact_event_transcripts<A>(
    params: &EventParams,
    adversary: &A,
    drop_unit: Option<&str>,
    max_steps: usize,
    branch_limit: usize,
) -> Result<FiniteDist<EventTranscript>, AuditError>
where
    A: Adversary<crate::event_level::EventMechanism>,
{
    struct Walk<'a, A> {
        params: &'a EventParams,
        adversary: &'a A,
        drop_unit: Option<&'a str>,
        max_steps: usize,
        branch_limit: usize,
        leaves: Vec<(EventTranscript, f64)>,
    }

    impl<A: Adversary<crate::event_level::EventMechanism>> Walk<'_, A> {
        fn go(
            &mut self,
            seen: &mut Vec<String>,
            prefix: &mut EventTranscript,
            mass: f64,
        ) -> Result<(), AuditError> {
            let mv = if prefix.len() >= self.max_steps {
                None
            } else {
                self.adversary.next_move(prefix)
            };
            let Some((stories, ())) = mv else {
                self.leaves.push((prefix.clone(), mass));
                return Ok(());
            };

            // Per fresh unit: its exact randomized-response distribution.
            let mut fresh: Vec<(String, Vec<(EventOutput, f64)>)> = Vec::new();
            let mut added: Vec<String> = Vec::new();
            let mut branches: u128 = 1;
            for story in &stories {
                if seen.contains(&story.unit) || added.contains(&story.unit) {
                    continue;
                }
                added.push(story.unit.clone());
                let story = if self.drop_unit == Some(story.unit.as_str()) {
                    story.without_triggers()
                } else {
                    story.clone()
                };
                let irr = Irr::new(self.params.epsilon, &story.spec, self.params.output_limit)?;
                let truth = true_output(&story.spec, &story.triggers)?;
                let probs = irr.probabilities(&truth);
                let dist: Vec<(EventOutput, f64)> = irr
                    .outputs()
                    .iter()
                    .cloned()
                    .zip(probs)
                    .collect();
                branches = branches.saturating_mul(dist.len() as u128);
                if branches > self.branch_limit as u128 {
                    return Err(AuditError::InstanceTooLarge(branches));
                }
                fresh.push((story.unit.clone(), dist));
            }

            // Product across this turn's units, then recurse per branch.
            let mut joint: Vec<(Vec<(String, EventOutput)>, f64)> = vec![(Vec::new(), mass)];
            for (unit, dist) in &fresh {
                let mut grown = Vec::with_capacity(joint.len() * dist.len());
                for (resp, m) in &joint {
                    for (out, p) in dist {
                        let mut r = resp.clone();
                        r.push((unit.clone(), out.clone()));
                        grown.push((r, m * p));
                    }
                }
                joint = grown;
            }
            seen.extend(added.iter().cloned());
            for (resp, m) in joint {
                prefix.push(resp);
                self.go(seen, prefix, m)?;
                prefix.pop();
            }
            seen.truncate(seen.len() - added.len());
            Ok(())
        }
    }

    let mut walk = Walk {
        params,
        adversary,
        drop_unit,
        max_steps,
        branch_limit,
        leaves: Vec::new(),
    };
    walk.go(&mut Vec::new(), &mut Vec::new(), 1.0)?;
    FiniteDist::new(walk.leaves)
}

/// A unit whose recomputed rollout exceeds the trace's caps.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutViolation {
    pub unit: Unit,
    pub eps: f64,
    pub delta: f64,
}

/// Recompute every unit's privacy rollout from a trace and report the
/// units exceeding the caps. `slack` absorbs float accumulation; the
/// guarantee itself is exact arithmetic on the trace.
pub fn audit_rollout(trace: &Trace, slack: f64) -> Vec<RolloutViolation> {
    let (eps_cap, delta_cap) = trace.caps();
    let mut violations = Vec::new();
    for (unit, (eps, delta)) in trace.rollout_all() {
        if eps > eps_cap + slack || delta > delta_cap + slack {
            violations.push(RolloutViolation { unit, eps, delta });
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::NoisePolicy;
    use crate::event_level::{
        EventTrigger, EventUnitStory, ScriptedEventAdversary, ScriptedEventTurn, SpecEntry,
        TriggerSpec,
    };
    use crate::model::Key;
    use crate::noise::compute_tau;
    use crate::summary::{
        ContributionTable, Flavor, Item, MsrParams, ScriptedMsrAdversary, ScriptedTurn,
    };
    use std::collections::BTreeSet;

    fn dist(pairs: &[(i32, f64)]) -> FiniteDist<i32> {
        FiniteDist::new(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn finite_dist_merges_normalizes_and_rejects_junk() {
        let d = FiniteDist::new([(1, 0.25), (1, 0.25), (2, 0.5)]).unwrap();
        assert_eq!(d.support_len(), 2);
        assert_eq!(d.prob(&1), 0.5);
        assert_eq!(d.prob(&3), 0.0);
        // Unnormalized weights normalize.
        let d = FiniteDist::new([(1, 2.0), (2, 6.0)]).unwrap();
        assert_eq!(d.prob(&1), 0.25);
        assert!(FiniteDist::<i32>::new([]).is_err());
        assert!(FiniteDist::new([(1, -0.1)]).is_err());
        assert!(FiniteDist::new([(1, f64::NAN)]).is_err());
        assert!(FiniteDist::new([(1, 0.0)]).is_err());

        let folded = d.map(|_| "same");
        assert_eq!(folded.prob(&"same"), 1.0);
    }

    #[test]
    fn hockey_stick_closed_forms() {
        // Identical distributions: 0 at every epsilon.
        let p = dist(&[(0, 0.5), (1, 0.5)]);
        assert_eq!(hockey_stick_delta(&p, &p, 0.0).unwrap(), 0.0);
        assert_eq!(hockey_stick_delta(&p, &p, 1.0).unwrap(), 0.0);

        // Disjoint supports: 1 at every epsilon.
        let q = dist(&[(2, 1.0)]);
        assert_eq!(hockey_stick_delta(&p, &q, 0.0).unwrap(), 1.0);
        assert_eq!(hockey_stick_delta(&p, &q, 5.0).unwrap(), 1.0);

        // Binary randomized response at eps = 1: exactly tight at 1,
        // and (e - e^t) / (e + 1) below it.
        let e = 1f64.exp();
        let rr_p = dist(&[(0, e / (e + 1.0)), (1, 1.0 / (e + 1.0))]);
        let rr_q = dist(&[(0, 1.0 / (e + 1.0)), (1, e / (e + 1.0))]);
        assert!(hockey_stick_delta(&rr_p, &rr_q, 1.0).unwrap() <= 1e-15);
        let at_half = hockey_stick_delta(&rr_p, &rr_q, 0.5).unwrap();
        assert!((at_half - (e - 0.5f64.exp()) / (e + 1.0)).abs() < 1e-15);
        // Strictly positive below the true epsilon.
        assert!(at_half > 0.25);

        assert!((total_variation(&rr_p, &rr_q) - (e - 1.0) / (e + 1.0)).abs() < 1e-15);
        assert!(hockey_stick_delta(&p, &q, f64::INFINITY).is_err());
    }

    #[test]
    fn mixtures_satisfy_joint_convexity() {
        let p1 = dist(&[(0, 0.9), (1, 0.1)]);
        let q1 = dist(&[(0, 0.1), (1, 0.9)]);
        let p2 = dist(&[(0, 0.6), (1, 0.4)]);
        let q2 = dist(&[(0, 0.4), (1, 0.6)]);
        for eps in [0.0, 0.3, 1.0] {
            let mixed_p = FiniteDist::mixture(&[(0.3, p1.clone()), (0.7, p2.clone())]).unwrap();
            let mixed_q = FiniteDist::mixture(&[(0.3, q1.clone()), (0.7, q2.clone())]).unwrap();
            let mixed = hockey_stick_delta(&mixed_p, &mixed_q, eps).unwrap();
            let parts = 0.3 * hockey_stick_delta(&p1, &q1, eps).unwrap()
                + 0.7 * hockey_stick_delta(&p2, &q2, eps).unwrap();
            assert!(mixed <= parts + 1e-15, "eps {eps}: {mixed} > {parts}");
        }
    }

    #[test]
    fn tdlap_audit_matches_tail_in_one_dimension() {
        // Shift by the full sensitivity: the divergence at eps = a*shift
        // is exactly the mass the shifted support pushes past tau.
        for (a, tau, shift) in [(0.5, 7u64, 1i64), (0.25, 14, 2), (1.0, 4, 1)] {
            let d = DLap::truncated(a, tau).unwrap();
            let eps = a * shift as f64;
            let got = audit_tdlap(a, Some(tau), &[shift], eps, 1 << 20).unwrap();
            let want = crate::noise::tdlap_tail(&d, shift as u64).unwrap();
            assert!(
                (got - want).abs() < 1e-12,
                "a={a} tau={tau} shift={shift}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn tdlap_audit_multidimensional_grid_obeys_delta() {
        // The thresholds are chosen so the per-instance failure mass stays
        // under delta; the exact divergence agrees.
        for (d, delta_budget) in [(1usize, 0.05), (2, 0.05), (3, 0.1)] {
            let a1 = 2u64;
            let eps = 1.0;
            let a = eps / a1 as f64;
            let tau = compute_tau(a1, 1, eps, delta_budget).unwrap().unwrap();
            let shift = vec![1i64; d.min(a1 as usize)];
            let full: i64 = a1 as i64 - shift.iter().sum::<i64>() + shift[0];
            let mut shift = shift;
            shift[0] = full.max(1);
            let l1: i64 = shift.iter().sum();
            assert!(l1 <= a1 as i64);
            let got = audit_tdlap(a, Some(tau), &shift, eps, 1 << 22).unwrap();
            assert!(
                got <= delta_budget + 1e-12,
                "d={d}: divergence {got} exceeds delta {delta_budget}"
            );
        }
    }

    #[test]
    fn untruncated_audit_is_pure_dp() {
        // Untruncated noise at matching epsilon leaves nothing above the
        // hockey stick, in one and two dimensions.
        let got = audit_tdlap(0.5, None, &[2], 1.0, 1 << 22).unwrap();
        assert!(got < 1e-15, "one-dim divergence {got}");
        let got = audit_tdlap(0.5, None, &[1, 1], 1.0, 1 << 22).unwrap();
        assert!(got < 1e-15, "two-dim divergence {got}");
        // Below the true epsilon it is decidedly positive.
        let got = audit_tdlap(0.5, None, &[2], 0.5, 1 << 22).unwrap();
        assert!(got > 1e-3);
    }

    #[test]
    fn tdlap_audit_guards_and_degenerate_shifts() {
        assert!(matches!(
            audit_tdlap(0.5, Some(50), &[1, 1, 1], 1.0, 100),
            Err(AuditError::InstanceTooLarge(_))
        ));
        assert!(matches!(
            audit_tdlap(0.5, Some(5), &[], 1.0, 1 << 20),
            Err(AuditError::EmptyShift)
        ));
        // Zero shift: identical distributions.
        let got = audit_tdlap(0.5, Some(5), &[0], 0.0, 1 << 20).unwrap();
        assert!(got < 1e-15);
    }

    // --- exact transcript enumeration -----------------------------------

    fn unit_item(u: &str, y: &str) -> (Unit, Item) {
        (Unit::Source(u.into()), Item::Id(y.into()))
    }

    fn msr_params(eps_cap: f64, delta_cap: f64) -> MsrParams {
        MsrParams {
            a1: 1,
            a0: 1,
            eps_cap,
            delta_cap,
            key_universe: [Key(1)].into(),
            noise: NoisePolicy::Sampled,
        }
    }

    fn one_unit_db(u: &str, y: &str) -> MeasurementDatabase {
        MeasurementDatabase::new(Flavor::Ara, vec![unit_item(u, y)]).unwrap()
    }

    fn msr_query(eps: f64, delta: f64, pairs: &[(&str, &str)]) -> MsrQuery {
        let mut table = ContributionTable::default();
        let mut items = BTreeSet::new();
        for (u, y) in pairs {
            table.insert(Unit::Source((*u).into()), Item::Id((*y).into()), Key(1), 1);
            items.insert(Item::Id((*y).into()));
        }
        MsrQuery::new(eps, delta, items, table).unwrap()
    }

    #[test]
    fn msr_transcript_distribution_is_exact_for_one_turn() {
        // One unit contributing 1 to key 1; eps 1, delta e^-1 gives
        // tau = 2 (the threshold boundary case). Enumerate by hand:
        // noise in [-2, 2], released iff 1 + noise > 2, i.e. noise = 2.
        let mech = SummaryMechanism::new(msr_params(8.0, 1.0)).unwrap();
        let delta = (-1f64).exp();
        let adversary = ScriptedMsrAdversary {
            turns: vec![ScriptedTurn::unconditional(
                one_unit_db("x", "y"),
                msr_query(1.0, delta, &[("x", "y")]),
            )],
        };
        let dist = exact_msr_transcripts(&mech, &adversary, 8, 10_000).unwrap();
        assert_eq!(dist.support_len(), 2);
        let noise = DLap::truncated(1.0, 2).unwrap();
        let released = vec![MsrResponse::Summary(vec![(Key(1), 3)])];
        let suppressed = vec![MsrResponse::Summary(vec![])];
        assert!((dist.prob(&released) - noise.pmf(2)).abs() < 1e-15);
        assert!((dist.prob(&suppressed) - (1.0 - noise.pmf(2))).abs() < 1e-15);
    }

    #[test]
    fn msr_neighboring_transcripts_meet_the_advertised_budget() {
        // Two-turn adaptive adversary against caps (1, 0.1); the removed
        // unit contributes on both turns. The transcript divergence at
        // the caps must stay at/under the hockey stick promise.
        let params = MsrParams {
            a1: 2,
            a0: 2,
            eps_cap: 1.0,
            delta_cap: 0.1,
            key_universe: [Key(1), Key(2)].into(),
            noise: NoisePolicy::Sampled,
        };
        let db1 = MeasurementDatabase::new(
            Flavor::Ara,
            vec![unit_item("x", "y1"), unit_item("z", "y2")],
        )
        .unwrap();
        let db2 = MeasurementDatabase::new(Flavor::Ara, vec![unit_item("x", "y3")]).unwrap();
        let q1 = msr_query(0.5, 0.05, &[("x", "y1"), ("z", "y2")]);
        // Branch on whether key 1 was released.
        let q2_hot = msr_query(0.5, 0.05, &[("x", "y3")]);
        let q2_cold = msr_query(0.25, 0.02, &[("x", "y3")]);
        let adversary = ScriptedMsrAdversary {
            turns: vec![
                ScriptedTurn::unconditional(db1, q1),
                ScriptedTurn {
                    cases: vec![
                        (
                            crate::summary::TurnCondition::LastReleased(Key(1)),
                            crate::summary::MsrMove { db: db2.clone(), query: q2_hot },
                        ),
                        (
                            crate::summary::TurnCondition::Always,
                            crate::summary::MsrMove { db: db2, query: q2_cold },
                        ),
                    ],
                },
            ],
        };

        let mech = SummaryMechanism::new(params).unwrap();
        let with = exact_msr_transcripts(&mech, &adversary, 8, 100_000).unwrap();
        let removing = RemovingAdversary {
            inner: &adversary,
            target: RemovalTarget::Source("x".into()),
        };
        let without = exact_msr_transcripts(&mech, &removing, 8, 100_000).unwrap();

        // x's rollout: turn 1 charges (0.5/2)*1 eps; turn 2 (hot or cold)
        // at most (0.5/2)*2 more = 0.75 total; delta at most
        // 0.05/2 + 0.05/2 = 0.05. The caps (1, 0.1) dominate, and the
        // exact divergence respects them.
        let delta_at_cap = hockey_stick_delta(&with, &without, 1.0).unwrap();
        assert!(delta_at_cap <= 0.1 + 1e-12, "divergence {delta_at_cap}");
        // The tighter rollout bound also holds.
        let delta_rollout = hockey_stick_delta(&with, &without, 0.75).unwrap();
        assert!(delta_rollout <= 0.05 + 1e-12, "divergence {delta_rollout}");
        // And the transcripts genuinely differ.
        assert!(total_variation(&with, &without) > 1e-3);
    }

    #[test]
    fn msr_enumeration_requires_truncation_and_bounds_branches() {
        let mech = SummaryMechanism::new(msr_params(8.0, 1.0)).unwrap();
        let pure = ScriptedMsrAdversary {
            turns: vec![ScriptedTurn::unconditional(
                one_unit_db("x", "y"),
                msr_query(1.0, 0.0, &[("x", "y")]),
            )],
        };
        assert_eq!(
            exact_msr_transcripts(&mech, &pure, 8, 10_000),
            Err(AuditError::RequiresTruncation)
        );

        let tight = ScriptedMsrAdversary {
            turns: vec![ScriptedTurn::unconditional(
                one_unit_db("x", "y"),
                msr_query(1.0, 0.5, &[("x", "y")]),
            )],
        };
        assert!(matches!(
            exact_msr_transcripts(&mech, &tight, 8, 1),
            Err(AuditError::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn event_transcripts_match_randomized_response_exactly() {
        // Single unit, one turn: transcript distribution IS the
        // randomized response; dropping the unit's triggers moves the
        // truth to the empty output. Divergence at the configured eps is
        // zero; just below, it matches (e^eps - e^t)/(e^eps + k - 1).
        let spec = TriggerSpec::new(
            vec![SpecEntry::new(0, vec![1, 2], vec![10, 20]).unwrap()],
            2,
        )
        .unwrap();
        assert_eq!(crate::event_level::count_outputs(&spec), 6);
        let story = EventUnitStory {
            unit: "x".into(),
            spec,
            triggers: vec![EventTrigger { trig_data: 0, value: 25, at: 0 }],
        };
        let adversary = ScriptedEventAdversary {
            turns: vec![ScriptedEventTurn::unconditional(vec![story])],
        };
        let params = EventParams { epsilon: 1.0, output_limit: 1000 };
        let with = exact_event_transcripts(&params, &adversary, None, 4, 10_000).unwrap();
        let without = exact_event_transcripts(&params, &adversary, Some("x"), 4, 10_000).unwrap();
        assert_eq!(with.support_len(), 6);

        let at_eps = hockey_stick_delta(&with, &without, 1.0).unwrap();
        assert!(at_eps <= 1e-12, "divergence at eps: {at_eps}");
        let e = 1f64.exp();
        let just_below = hockey_stick_delta(&with, &without, 0.9).unwrap();
        let want = (e - 0.9f64.exp()) / (e + 5.0);
        assert!((just_below - want).abs() <= 1e-12);
    }

    #[test]
    fn event_transcripts_stay_private_under_adaptivity() {
        // Two turns; the second unit's story depends on the first unit's
        // visible output. Only x is removed, so the whole interactive
        // transcript must stay eps-indistinguishable.
        let spec = TriggerSpec::new(
            vec![SpecEntry::new(0, vec![1], vec![5]).unwrap()],
            1,
        )
        .unwrap();
        let x = EventUnitStory {
            unit: "x".into(),
            spec: spec.clone(),
            triggers: vec![EventTrigger { trig_data: 0, value: 9, at: 0 }],
        };
        let y_probe = EventUnitStory {
            unit: "y".into(),
            spec: spec.clone(),
            triggers: vec![EventTrigger { trig_data: 0, value: 9, at: 0 }],
        };
        let y_quiet = EventUnitStory { unit: "y".into(), spec, triggers: vec![] };
        let adversary = ScriptedEventAdversary {
            turns: vec![
                ScriptedEventTurn::unconditional(vec![x]),
                ScriptedEventTurn {
                    cases: vec![
                        (
                            crate::event_level::EventCondition::UnitReportedAtLeast(
                                "x".into(),
                                1,
                            ),
                            vec![y_probe],
                        ),
                        (crate::event_level::EventCondition::Always, vec![y_quiet]),
                    ],
                },
            ],
        };
        let params = EventParams { epsilon: 0.8, output_limit: 1000 };
        let with = exact_event_transcripts(&params, &adversary, None, 4, 10_000).unwrap();
        let without = exact_event_transcripts(&params, &adversary, Some("x"), 4, 10_000).unwrap();
        let at_eps = hockey_stick_delta(&with, &without, 0.8).unwrap();
        assert!(at_eps <= 1e-12, "divergence {at_eps}");
        assert!(total_variation(&with, &without) > 1e-3);
    }

    #[test]
    fn rollout_audit_flags_over_cap_traces() {
        let mut trace = Trace::new(4, 2, 1.0, 0.1);
        trace.push_report(Unit::Source("x".into()), Item::Id("y".into()), 4);
        trace.push_turn(0.5, 0.05, [Item::Id("y".into())].into(), false);
        assert!(audit_rollout(&trace, 1e-12).is_empty());
        // A second full-price turn doubles the spend: (1.0, 0.1) stays
        // exactly at cap, still fine.
        trace.push_turn(0.5, 0.05, [Item::Id("y".into())].into(), false);
        assert!(audit_rollout(&trace, 1e-12).is_empty());
        // A third pushes over.
        trace.push_turn(0.5, 0.05, [Item::Id("y".into())].into(), false);
        let violations = audit_rollout(&trace, 1e-12);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].unit, Unit::Source("x".into()));
        assert!((violations[0].eps - 1.5).abs() < 1e-12);
        // Aborted turns charge nothing.
        let mut ok = Trace::new(4, 2, 1.0, 0.1);
        ok.push_report(Unit::Source("x".into()), Item::Id("y".into()), 4);
        for _ in 0..50 {
            ok.push_turn(0.5, 0.05, [Item::Id("y".into())].into(), true);
        }
        assert!(audit_rollout(&ok, 1e-12).is_empty());
    }

    proptest::proptest! {
        #[test]
        fn hockey_stick_is_monotone_in_eps(
            raw_p in proptest::collection::vec(0.01f64..1.0, 4),
            raw_q in proptest::collection::vec(0.01f64..1.0, 4),
            eps1 in 0.0f64..2.0,
            gap in 0.0f64..2.0,
        ) {
            let p = FiniteDist::new(raw_p.into_iter().enumerate()).unwrap();
            let q = FiniteDist::new(raw_q.into_iter().enumerate()).unwrap();
            let lo = hockey_stick_delta(&p, &q, eps1 + gap).unwrap();
            let hi = hockey_stick_delta(&p, &q, eps1).unwrap();
            proptest::prop_assert!(lo <= hi + 1e-15);
            proptest::prop_assert!((0.0..=1.0 + 1e-12).contains(&hi));
        }

        #[test]
        fn post_processing_never_increases_divergence(
            raw_p in proptest::collection::vec(0.01f64..1.0, 6),
            raw_q in proptest::collection::vec(0.01f64..1.0, 6),
            eps in 0.0f64..1.5,
        ) {
            let p = FiniteDist::new(raw_p.into_iter().enumerate()).unwrap();
            let q = FiniteDist::new(raw_q.into_iter().enumerate()).unwrap();
            let before = hockey_stick_delta(&p, &q, eps).unwrap();
            let after = hockey_stick_delta(&p.map(|i| i / 2), &q.map(|i| i / 2), eps).unwrap();
            proptest::prop_assert!(after <= before + 1e-15);
        }
    }
}
