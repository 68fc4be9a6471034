//! A desk-scale model of the Privacy Sandbox measurement pipeline, built so
//! its differential-privacy claims can be checked by exact computation.
//!
//! The pieces fit together like the deployed system:
//!
//! * [`clients`] generates aggregatable reports on-device, either by
//!   last-touch attribution across registered sources or by running a
//!   contribution program against per-device shared storage.
//! * [`aggregation`] plays the server: it sums contributions per key, adds
//!   discrete Laplace noise, and refuses batches that would push any
//!   report's privacy budget over its cap.
//! * [`event_level`] covers the event-level reporting path: the noiseless
//!   client, enumeration of its finite output space, and the interactive
//!   randomized-response mechanism over that space.
//! * [`summary`] is the batched summary mechanism the privacy analysis is
//!   stated against, with per-unit budget rollout accounting.
//! * [`interactive`] has the generic adversary/mechanism transcript harness
//!   and privacy-filter machinery shared by the above.
//! * [`audit`] computes exact output distributions of small instances and
//!   checks hockey-stick divergences against the claimed (eps, delta).
//!
//! Everything is deterministic given a seed; all randomness flows through
//! explicitly passed ChaCha streams.

pub mod aggregation;
pub mod audit;
pub mod clients;
pub mod event_level;
pub mod interactive;
pub mod model;
pub mod noise;
pub mod summary;

mod kahan;

pub use kahan::KahanSum;
