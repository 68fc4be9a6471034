//! Executes a validated scenario: feeds its timeline through the matching
//! client, plays the aggregation turns against the budget ledger, and
//! renders the run's artifacts (device reports, ad-tech transcript,
//! privacy trace) as versioned text files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sandbox_measure::aggregation::{
    AggregationError, AggregationRequest, AggregationService, NoisePolicy, PrivacyBudgetLedger,
    SummaryReport,
};
use sandbox_measure::clients::{AraClient, PaaClient};
use sandbox_measure::event_level::{EventLevelClient, EventOutput, Irr, IrrPlan};
use sandbox_measure::model::AggregatableReport;
use sandbox_measure::summary::{Item, Trace, Unit};

use crate::scenario::{
    AraEvent, AraScenario, EventScenario, PaaScenario, RunCondition, Scenario, ScenarioTurn,
};
use crate::CliError;

pub const REPORTS_HEADER: &str = "sandbox-measure-reports v1";
pub const TRANSCRIPT_HEADER: &str = "sandbox-measure-transcript v1";

/// Environment variable naming a directory for ledger files; `--ledger`
/// beats it, the scenario's own directory is the fallback.
pub const LEDGER_DIR_ENV: &str = "SANDBOX_MEASURE_LEDGER_DIR";

/// What the ad-tech saw for one turn.
#[derive(Debug, Clone, PartialEq)]
pub enum TurnReply {
    Released(SummaryReport),
    Aborted,
}

fn condition_matches(cond: &RunCondition, last: Option<&TurnReply>) -> bool {
    match cond {
        RunCondition::Always => true,
        RunCondition::LastAborted => matches!(last, Some(TurnReply::Aborted)),
        RunCondition::LastReleased(key) => match last {
            Some(TurnReply::Released(s)) => s.entries.iter().any(|(k, _)| k == key),
            _ => false,
        },
        RunCondition::LastValueAbove(key, bound) => match last {
            Some(TurnReply::Released(s)) => {
                s.entries.iter().any(|(k, v)| k == key && v > bound)
            }
            _ => false,
        },
    }
}

/// Everything a run produces, before any of it touches disk.
#[derive(Debug)]
pub struct RunArtifacts {
    pub reports: String,
    pub transcript: String,
    /// Privacy trace; only the aggregation-backed APIs have one.
    pub trace: Option<String>,
    pub replies: Vec<TurnReply>,
    pub aborted_turns: usize,
    /// Ledger state after the run; only the aggregation-backed APIs have one.
    pub ledger: Option<PrivacyBudgetLedger>,
}

/// Independent deterministic substreams of the run seed, so adding noise
/// draws never perturbs report ids and vice versa.
struct Streams {
    ids: ChaCha8Rng,
    noise: ChaCha8Rng,
    irr: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Streams {
        let mk = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Streams { ids: mk(1), noise: mk(2), irr: mk(3) }
    }
}

/// Run a scenario in memory. `prior_ledger` carries budget spend from
/// earlier runs; its caps must match the scenario's.
pub fn run_scenario(
    scenario: &Scenario,
    noise: NoisePolicy,
    seed_override: Option<u64>,
    prior_ledger: Option<PrivacyBudgetLedger>,
) -> Result<RunArtifacts, CliError> {
    let seed = seed_override.unwrap_or_else(|| scenario.seed());
    let mut streams = Streams::new(seed);
    match scenario {
        Scenario::AraSummary(sc) => run_ara(sc, noise, &mut streams, prior_ledger),
        Scenario::PaaSummary(sc) => run_paa(sc, noise, &mut streams, prior_ledger),
        Scenario::EventLevel(sc) => {
            if prior_ledger.is_some() {
                return Err(CliError::Ledger(
                    "event-level scenarios use no budget ledger".into(),
                ));
            }
            run_event(sc, noise, &mut streams)
        }
    }
}

fn open_ledger(
    eps_cap: f64,
    delta_cap: f64,
    prior: Option<PrivacyBudgetLedger>,
) -> Result<PrivacyBudgetLedger, CliError> {
    match prior {
        Some(l) => {
            if l.eps_cap() != eps_cap || l.delta_cap() != delta_cap {
                return Err(CliError::Ledger(format!(
                    "ledger caps ({}, {}) do not match scenario caps ({eps_cap}, {delta_cap})",
                    l.eps_cap(),
                    l.delta_cap()
                )));
            }
            Ok(l)
        }
        None => PrivacyBudgetLedger::new(eps_cap, delta_cap)
            .map_err(|e| CliError::Schema(e.to_string())),
    }
}

fn push_report_line(out: &mut String, report: &AggregatableReport) {
    match &report.contribution {
        Some(c) => {
            writeln!(out, "report id={} key={} value={}", report.id, c.key, c.value).unwrap()
        }
        None => writeln!(out, "report id={} null", report.id).unwrap(),
    }
}

/// Shared turn loop for the two aggregation-backed APIs. Committed turns
/// consume the pending batch; aborted turns keep it pending so a later,
/// cheaper request can retry, and charge nothing.
fn play_turns(
    turns: &[ScenarioTurn],
    service: &AggregationService,
    ledger: &mut PrivacyBudgetLedger,
    pending: &mut Vec<AggregatableReport>,
    trace: &mut Trace,
    transcript: &mut String,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(Vec<TurnReply>, usize), CliError> {
    let mut replies: Vec<TurnReply> = Vec::new();
    let mut aborted = 0usize;
    for (n, turn) in turns.iter().enumerate() {
        let Some((_, req)) = turn
            .cases
            .iter()
            .find(|(cond, _)| condition_matches(cond, replies.last()))
        else {
            break;
        };
        let request = AggregationRequest {
            epsilon: req.epsilon,
            delta: req.delta,
            mode: req.mode.clone(),
            batch: pending.clone(),
        };
        let items: std::collections::BTreeSet<Item> = pending
            .iter()
            .filter(|r| r.contribution.is_some())
            .map(|r| Item::Id(r.id.to_hex()))
            .collect();
        match service.aggregate(ledger, &request, noise_rng) {
            Ok(summary) => {
                pending.clear();
                trace.push_turn(req.epsilon, req.delta, items, false);
                writeln!(
                    transcript,
                    "turn n={n} outcome=ok released={}",
                    summary.entries.len()
                )
                .unwrap();
                for (key, value) in &summary.entries {
                    writeln!(transcript, "released n={n} key={key} value={value}").unwrap();
                }
                replies.push(TurnReply::Released(summary));
            }
            Err(AggregationError::BudgetExceeded(_)) => {
                aborted += 1;
                trace.push_turn(req.epsilon, req.delta, items, true);
                writeln!(transcript, "turn n={n} outcome=abort").unwrap();
                replies.push(TurnReply::Aborted);
            }
            Err(e) => return Err(CliError::Schema(format!("turns[{n}]: {e}"))),
        }
    }
    Ok((replies, aborted))
}

fn run_ara(
    sc: &AraScenario,
    noise: NoisePolicy,
    streams: &mut Streams,
    prior: Option<PrivacyBudgetLedger>,
) -> Result<RunArtifacts, CliError> {
    let mut client = AraClient::new(sc.a1, sc.a0).map_err(|e| CliError::Schema(e.to_string()))?;
    if sc.strict_halt {
        client = client.with_strict_halt();
    }
    let mut service =
        AggregationService::new(sc.a1, sc.a0).map_err(|e| CliError::Schema(e.to_string()))?;
    if noise == NoisePolicy::Disabled {
        service = service.with_noise_disabled_for_audit();
    }
    let mut ledger = open_ledger(sc.eps_cap, sc.delta_cap, prior)?;
    let mut trace = Trace::new(sc.a1, sc.a0, sc.eps_cap, sc.delta_cap);

    let mut reports = format!("{REPORTS_HEADER}\n");
    let mut pending = Vec::new();
    for event in &sc.events {
        match event {
            AraEvent::Source(reg) => client
                .register_source(reg.clone())
                .map_err(|e| CliError::Schema(e.to_string()))?,
            AraEvent::Trigger(trig) => {
                let attributed = client.register_trigger_traced(trig, &mut streams.ids);
                push_report_line(&mut reports, &attributed.report);
                if let (Some(src), Some(c)) = (attributed.charged, &attributed.report.contribution)
                {
                    trace.push_report(
                        Unit::Source(src),
                        Item::Id(attributed.report.id.to_hex()),
                        c.value,
                    );
                }
                pending.push(attributed.report);
            }
        }
    }

    let mut transcript = format!("{TRANSCRIPT_HEADER}\n");
    let (replies, aborted_turns) = play_turns(
        &sc.turns,
        &service,
        &mut ledger,
        &mut pending,
        &mut trace,
        &mut transcript,
        &mut streams.noise,
    )?;
    Ok(RunArtifacts {
        reports,
        transcript,
        trace: Some(trace.render()),
        replies,
        aborted_turns,
        ledger: Some(ledger),
    })
}

fn run_paa(
    sc: &PaaScenario,
    noise: NoisePolicy,
    streams: &mut Streams,
    prior: Option<PrivacyBudgetLedger>,
) -> Result<RunArtifacts, CliError> {
    let mut client = PaaClient::new(sc.a1, sc.a0, sc.window_len)
        .map_err(|e| CliError::Schema(e.to_string()))?;
    let mut service =
        AggregationService::new(sc.a1, sc.a0).map_err(|e| CliError::Schema(e.to_string()))?;
    if noise == NoisePolicy::Disabled {
        service = service.with_noise_disabled_for_audit();
    }
    let mut ledger = open_ledger(sc.eps_cap, sc.delta_cap, prior)?;
    let mut trace = Trace::new(sc.a1, sc.a0, sc.eps_cap, sc.delta_cap);

    let mut reports = format!("{REPORTS_HEADER}\n");
    let mut pending = Vec::new();
    for event in &sc.events {
        let report = client
            .register_event(&event.device, event.at, &event.program, &mut streams.ids)
            .map_err(|e| CliError::Schema(e.to_string()))?;
        push_report_line(&mut reports, &report);
        if let Some(c) = &report.contribution {
            trace.push_report(
                Unit::DeviceWindow(event.device.clone(), client.window_of(event.at)),
                Item::Id(report.id.to_hex()),
                c.value,
            );
        }
        pending.push(report);
    }

    let mut transcript = format!("{TRANSCRIPT_HEADER}\n");
    let (replies, aborted_turns) = play_turns(
        &sc.turns,
        &service,
        &mut ledger,
        &mut pending,
        &mut trace,
        &mut transcript,
        &mut streams.noise,
    )?;
    Ok(RunArtifacts {
        reports,
        transcript,
        trace: Some(trace.render()),
        replies,
        aborted_turns,
        ledger: Some(ledger),
    })
}

/// Event-level runs have two layers: the reports file shows the device's
/// true emission timeline, the transcript shows the randomized output set
/// the ad-tech actually receives. With noise disabled the two agree.
fn run_event(
    sc: &EventScenario,
    noise: NoisePolicy,
    streams: &mut Streams,
) -> Result<RunArtifacts, CliError> {
    let mut client = EventLevelClient::new();
    let schema = |e: sandbox_measure::event_level::EventError| CliError::Schema(e.to_string());

    // Replay the interleaved timeline; scenario validation already ordered
    // it by tick.
    let mut src_ids = Vec::new();
    let mut sources = sc.sources.iter().peekable();
    let mut triggers = sc.triggers.iter().peekable();
    let mut last_at = 0u64;
    loop {
        let next_src = sources.peek().map(|s| s.registered_at.0);
        let next_trig = triggers.peek().map(|t| t.at.0);
        match (next_src, next_trig) {
            (None, None) => break,
            // Sources first on ties: a registration and a same-tick trigger
            // appear in file order, and the file was validated ascending.
            (Some(s), t) if t.map_or(true, |t| s <= t) => {
                let src = sources.next().expect("peeked");
                last_at = last_at.max(src.registered_at.0);
                src_ids.push(src.src_id.clone());
                client.register_source(src.clone()).map_err(schema)?;
            }
            _ => {
                let trig = triggers.next().expect("peeked");
                last_at = last_at.max(trig.at.0);
                client
                    .register_trigger(&trig.dest, &trig.filters, trig.trig_data, trig.value, trig.at)
                    .map_err(schema)?;
            }
        }
    }
    let horizon = sc
        .sources
        .iter()
        .map(|s| s.registered_at.0 + s.spec.last_window())
        .max()
        .unwrap_or(0)
        .max(last_at);
    client.finish(sandbox_measure::model::Tick(horizon)).map_err(schema)?;

    let mut reports = format!("{REPORTS_HEADER}\n");
    let mut emitted: Vec<(u64, usize, String, sandbox_measure::event_level::EventReport)> =
        Vec::new();
    for (i, src_id) in src_ids.iter().enumerate() {
        for (at, r) in client.emitted(src_id) {
            emitted.push((at.0, i, src_id.clone(), r));
        }
    }
    emitted.sort_by_key(|e| (e.0, e.1));
    for (at, _, src, r) in &emitted {
        writeln!(
            reports,
            "event-report src={src} at={at} trig_data={} window={} bucket={}",
            r.trig_data, r.window, r.bucket
        )
        .unwrap();
    }

    let irr = Irr::new(sc.epsilon, &sc.spec, sc.output_limit)
        .map_err(|e| CliError::Schema(e.to_string()))?;
    let mut transcript = format!("{TRANSCRIPT_HEADER}\n");
    for src_id in &src_ids {
        let truth = client.output(src_id);
        let output: EventOutput = match noise {
            NoisePolicy::Sampled => {
                let plan = irr.draw_plan(&mut streams.irr);
                irr.apply(&truth, plan)
            }
            NoisePolicy::Disabled => irr.apply(&truth, IrrPlan::Truthful),
        };
        writeln!(transcript, "output unit={src_id} reports={}", output.reports().len()).unwrap();
        for r in output.reports() {
            writeln!(
                transcript,
                "output-report unit={src_id} trig_data={} window={} bucket={}",
                r.trig_data, r.window, r.bucket
            )
            .unwrap();
        }
    }

    Ok(RunArtifacts {
        reports,
        transcript,
        trace: None,
        replies: Vec::new(),
        aborted_turns: 0,
        ledger: None,
    })
}

// ---------------------------------------------------------------------
// File orchestration.

#[derive(Debug, Default, Clone)]
pub struct SimulateOptions {
    pub seed: Option<u64>,
    pub ledger: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub aborted_turns: usize,
    pub reports_path: PathBuf,
    pub transcript_path: PathBuf,
    pub trace_path: Option<PathBuf>,
    pub ledger_path: Option<PathBuf>,
}

/// Advisory lock guarding one ledger file against concurrent runs; the
/// lock file vanishes when the guard drops.
struct LedgerLock {
    path: PathBuf,
}

impl LedgerLock {
    fn acquire(ledger_path: &Path) -> Result<LedgerLock, CliError> {
        let path = ledger_path.with_extension("ledger.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LedgerLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Ledger(
                format!("ledger is locked by another run ({} exists)", path.display()),
            )),
            Err(e) => Err(CliError::Io(format!("cannot lock ledger: {e}"))),
        }
    }
}

impl Drop for LedgerLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into())
}

fn resolve_ledger_path(scenario_path: &Path, opts: &SimulateOptions) -> PathBuf {
    if let Some(p) = &opts.ledger {
        return p.clone();
    }
    let name = format!("{}.ledger", file_stem(scenario_path));
    if let Some(dir) = std::env::var_os(LEDGER_DIR_ENV) {
        return PathBuf::from(dir).join(name);
    }
    scenario_path.parent().unwrap_or(Path::new(".")).join(name)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Atomic save: a half-written ledger must never be loadable.
fn save_ledger(ledger: &PrivacyBudgetLedger, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension(format!("ledger.tmp{}", std::process::id()));
    ledger
        .save(&tmp)
        .map_err(|e| CliError::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Load, run, and persist one scenario file. Reports, transcript, and
/// trace land next to the scenario (or in `out_dir`); ledger spend
/// accumulates across invocations that share a ledger file.
pub fn simulate_file(
    scenario_path: &Path,
    opts: &SimulateOptions,
) -> Result<SimulateOutcome, CliError> {
    let text = fs::read_to_string(scenario_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", scenario_path.display())))?;
    let scenario = Scenario::parse(&text).map_err(|e| CliError::Schema(e.to_string()))?;

    let (_lock, ledger_path, prior) = if scenario.uses_ledger() {
        let ledger_path = resolve_ledger_path(scenario_path, opts);
        let lock = LedgerLock::acquire(&ledger_path)?;
        let prior = if ledger_path.exists() {
            Some(
                PrivacyBudgetLedger::load(&ledger_path)
                    .map_err(|e| CliError::Ledger(format!("{}: {e}", ledger_path.display())))?,
            )
        } else {
            None
        };
        (Some(lock), Some(ledger_path), prior)
    } else {
        (None, None, None)
    };

    let artifacts = run_scenario(&scenario, NoisePolicy::Sampled, opts.seed, prior)?;

    let out_dir = match &opts.out_dir {
        Some(d) => d.clone(),
        None => scenario_path.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let stem = file_stem(scenario_path);
    let reports_path = out_dir.join(format!("{stem}.reports.txt"));
    let transcript_path = out_dir.join(format!("{stem}.transcript.txt"));
    write_text(&reports_path, &artifacts.reports)?;
    write_text(&transcript_path, &artifacts.transcript)?;
    let trace_path = match &artifacts.trace {
        Some(trace) => {
            let p = out_dir.join(format!("{stem}.trace.txt"));
            write_text(&p, trace)?;
            Some(p)
        }
        None => None,
    };
    if let (Some(ledger), Some(path)) = (&artifacts.ledger, &ledger_path) {
        save_ledger(ledger, path)?;
    }

    Ok(SimulateOutcome {
        aborted_turns: artifacts.aborted_turns,
        reports_path,
        transcript_path,
        trace_path,
        ledger_path,
    })
}
