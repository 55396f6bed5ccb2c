use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{anyhow, bail, Context, Result};
use phenoauth::adversary::{
    pseudonym_chain, run_ind_game, run_mu_game, DistinguisherKind, GameResult, MuSetup, MuStrategy,
};
use phenoauth::metrics::{timing_report, OpCounter, OpLog, COMPLETED_SESSION};
use phenoauth::protocol::session::{run_session, SessionRecord};
use phenoauth::protocol::{enroll_group, provision_simulated, Device, NvmState, SessionOutcome};
use phenoauth::puf_sim::DpufDevice;
use phenoauth::transport::{open_socket_transport, Channel, MemoryChannel};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ScenarioConfig, TransportKind};

/// What a command produced. `passed` is false when any in-run assertion
/// failed; the report has been written either way.
#[derive(Debug)]
pub struct Outcome {
    pub report: Value,
    pub passed: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn finish(dir: &Path, file: &str, mut report: Value, checks: Vec<Check>, mut files: Vec<PathBuf>) -> Result<Outcome> {
    let passed = checks.iter().all(|c| c.passed);
    let summary = checks
        .iter()
        .map(|c| format!("{}: {} ({})", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail))
        .collect::<Vec<_>>()
        .join("\n");
    report["checks"] = serde_json::to_value(&checks)?;
    report["passed"] = json!(passed);
    let path = dir.join(file);
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    files.push(path);
    Ok(Outcome {
        report,
        passed,
        summary,
        files,
    })
}

fn provision_all(cfg: &ScenarioConfig) -> Result<Vec<Device>> {
    let (seeds, _, _) = cfg.seeds();
    let puf = cfg.puf_config();
    let proto = cfg.protocol_config();
    cfg.labels()
        .iter()
        .zip(seeds)
        .map(|(label, s)| provision_simulated(label, s.puf, &puf, &proto, s.rng).map_err(Into::into))
        .collect()
}

fn enrolled_group(cfg: &ScenarioConfig) -> Result<Vec<Device>> {
    let mut devices = provision_all(cfg)?;
    enroll_group(&mut devices)?;
    Ok(devices)
}

fn nvm_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("{label}.nvm.json"))
}

/// Devices restored from the NVM files in the output directory when all are
/// present, otherwise a fresh enrollment.
fn load_or_enroll(cfg: &ScenarioConfig) -> Result<(Vec<Device>, bool)> {
    let labels = cfg.labels();
    if !labels.iter().all(|l| nvm_path(&cfg.out, l).exists()) {
        return Ok((enrolled_group(cfg)?, false));
    }
    let (seeds, _, _) = cfg.seeds();
    let puf = cfg.puf_config();
    let devices = labels
        .iter()
        .zip(seeds)
        .map(|(label, s)| {
            let nvm = NvmState::load(&nvm_path(&cfg.out, label))?;
            if nvm.label.0 != *label {
                bail!("{} holds device {}, expected {label}", nvm_path(&cfg.out, label).display(), nvm.label);
            }
            Ok(Device::from_nvm(nvm, DpufDevice::new(s.puf, &puf)?, cfg.protocol_config(), s.rng))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((devices, true))
}

fn save_all(devices: &[Device], dir: &Path) -> Result<Vec<PathBuf>> {
    devices
        .iter()
        .map(|d| d.nvm().save(dir, &d.label().0).map_err(Into::into))
        .collect()
}

fn open_channel(kind: TransportKind) -> Result<Box<dyn Channel>> {
    Ok(match kind {
        TransportKind::Memory => Box::new(MemoryChannel::honest()),
        TransportKind::Socket => Box::new(open_socket_transport("127.0.0.1:0")?),
    })
}

pub fn cmd_enroll(cfg: &ScenarioConfig) -> Result<Outcome> {
    std::fs::create_dir_all(&cfg.out)?;
    let devices = enrolled_group(cfg)?;
    let files = save_all(&devices, &cfg.out)?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for d in &devices {
        let nvm = d.nvm();
        let labels = nvm.model.as_ref().map_or(0, |m| m.model.labels().len());
        rows.push(json!({
            "label": d.label().0,
            "peers": nvm.peers.len(),
            "model_labels": labels,
            "nvm": nvm_path(&cfg.out, &d.label().0),
            "model": cfg.out.join(format!("{}.dpan", d.label().0)),
        }));
        checks.push(Check::new(
            format!("{} records", d.label()),
            nvm.peers.len() == cfg.devices - 1 && labels == cfg.devices,
            format!("{} peers, model over {labels} labels", nvm.peers.len()),
        ));
    }
    let report = json!({ "command": "enroll", "seed": cfg.seed, "devices": rows });
    finish(&cfg.out, "enroll-report.json", report, checks, files)
}

#[derive(Debug, Clone, Default)]
pub struct AuthArgs {
    pub initiator: Option<String>,
    pub peer: Option<String>,
    pub sessions: Option<usize>,
    /// The peer initiates instead.
    pub swap: bool,
    /// Run every disjoint pair `(dev0, dev1), (dev2, dev3), ...`.
    pub all_pairs: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionRow {
    pub index: usize,
    pub prover: String,
    pub verifier: String,
    pub prover_outcome: String,
    pub verifier_outcome: Option<String>,
    pub prover_counts: OpCounter,
    pub verifier_counts: Option<OpCounter>,
    /// Both roles succeeded with one key and one stored `(C, Δ)`.
    pub agreed: bool,
    /// Both roles' counts equal the per-role cost of a completed session.
    pub cost_ok: bool,
}

fn outcome_name(o: &SessionOutcome) -> String {
    match o {
        SessionOutcome::Success { .. } => "Success".into(),
        SessionOutcome::Abort(r) => format!("Abort({r:?})"),
    }
}

fn session_row(index: usize, prover: &Device, verifier: &Device, rec: &SessionRecord) -> SessionRow {
    let verifier_counts = rec.verifier_log.as_ref().map(OpLog::snapshot);
    let same_key = matches!(
        (&rec.prover, &rec.verifier),
        (SessionOutcome::Success { mk: a }, Some(SessionOutcome::Success { mk: b })) if a == b
    );
    let (pr, vr) = (&prover.nvm().peers[verifier.label()], &verifier.nvm().peers[prover.label()]);
    let agreed = same_key && pr.c_i == vr.c_i && pr.delta == vr.delta;
    SessionRow {
        index,
        prover: prover.label().0.clone(),
        verifier: verifier.label().0.clone(),
        prover_outcome: outcome_name(&rec.prover),
        verifier_outcome: rec.verifier.as_ref().map(outcome_name),
        prover_counts: rec.prover_log.snapshot(),
        verifier_counts,
        agreed,
        cost_ok: rec.prover_log.snapshot() == COMPLETED_SESSION && verifier_counts == Some(COMPLETED_SESSION),
    }
}

fn run_pair(
    mut prover: Device,
    mut verifier: Device,
    sessions: usize,
    transport: TransportKind,
) -> Result<(Device, Device, Vec<SessionRow>, Vec<OpLog>)> {
    let mut channel = open_channel(transport)?;
    let mut rows = Vec::with_capacity(sessions);
    let mut logs = Vec::new();
    for i in 0..sessions {
        let rec = run_session(&mut prover, &mut verifier, channel.as_mut())?;
        let row = session_row(i, &prover, &verifier, &rec);
        if row.agreed {
            logs.push(rec.prover_log);
            logs.extend(rec.verifier_log);
        }
        rows.push(row);
    }
    channel.close();
    Ok((prover, verifier, rows, logs))
}

fn index_of(cfg: &ScenarioConfig, label: &str) -> Result<usize> {
    cfg.labels()
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| anyhow!("unknown device {label}; devices are {}", cfg.labels().join(", ")))
}

/// Run independent pairs, on threads when `parallel` is set. Devices not in
/// any pair are returned untouched.
fn run_pairs(
    devices: Vec<Device>,
    pairs: &[(usize, usize)],
    sessions: usize,
    transport: TransportKind,
    parallel: bool,
) -> Result<(Vec<Device>, Vec<SessionRow>, Vec<OpLog>)> {
    let mut slots: Vec<Option<Device>> = devices.into_iter().map(Some).collect();
    let mut jobs = Vec::new();
    for &(p, v) in pairs {
        let prover = slots[p].take().ok_or_else(|| anyhow!("device {p} used twice"))?;
        let verifier = slots[v].take().ok_or_else(|| anyhow!("device {v} used twice"))?;
        jobs.push((p, v, prover, verifier));
    }
    let results: Vec<_> = if parallel {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(p, v, a, b)| (p, v, thread::spawn(move || run_pair(a, b, sessions, transport))))
            .collect();
        handles
            .into_iter()
            .map(|(p, v, h)| (p, v, h.join().map_err(|_| anyhow!("session thread panicked")).and_then(|r| r)))
            .collect()
    } else {
        jobs.into_iter()
            .map(|(p, v, a, b)| (p, v, run_pair(a, b, sessions, transport)))
            .collect()
    };
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for (p, v, result) in results {
        let (a, b, r, l) = result?;
        slots[p] = Some(a);
        slots[v] = Some(b);
        rows.extend(r);
        logs.extend(l);
    }
    Ok((slots.into_iter().map(|d| d.expect("returned")).collect(), rows, logs))
}

pub fn cmd_auth(cfg: &ScenarioConfig, args: &AuthArgs) -> Result<Outcome> {
    std::fs::create_dir_all(&cfg.out)?;
    let sessions = args.sessions.unwrap_or(cfg.trials.sessions);
    let mut pairs = if args.all_pairs {
        (0..cfg.devices / 2).map(|k| (2 * k, 2 * k + 1)).collect::<Vec<_>>()
    } else {
        let a = index_of(cfg, args.initiator.as_deref().unwrap_or("dev0"))?;
        let b = index_of(cfg, args.peer.as_deref().unwrap_or("dev1"))?;
        if a == b {
            bail!("initiator and peer must differ");
        }
        vec![(a, b)]
    };
    if args.swap {
        pairs.iter_mut().for_each(|p| *p = (p.1, p.0));
    }
    let (devices, resumed) = load_or_enroll(cfg)?;
    let (devices, rows, _) = run_pairs(devices, &pairs, sessions, cfg.transport, cfg.parallel)?;
    let files = save_all(&devices, &cfg.out)?;

    let total = rows.len();
    let agreed = rows.iter().filter(|r| r.agreed).count();
    let rate = agreed as f64 / total.max(1) as f64;
    let cost_bad = rows.iter().filter(|r| r.agreed && !r.cost_ok).count();
    let checks = vec![
        Check::new("success rate", rate >= 0.99, format!("{agreed}/{total} = {rate:.4}, need >= 0.99")),
        Check::new(
            "per-role cost",
            cost_bad == 0,
            format!("{cost_bad} completed sessions off the 2/2/2/1/1 per-role count"),
        ),
    ];
    let report = json!({
        "command": "auth",
        "seed": cfg.seed,
        "transport": cfg.transport,
        "resumed_from_nvm": resumed,
        "swap": args.swap,
        "pairs": pairs.iter().map(|&(p, v)| [devices[p].label().0.clone(), devices[v].label().0.clone()]).collect::<Vec<_>>(),
        "sessions": rows,
        "success_rate": rate,
    });
    finish(&cfg.out, "auth-report.json", report, checks, files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Replay,
    BitTamper,
    RandomForge,
    NvmClone,
    Whitebox,
    /// Every MU strategy.
    Mu,
    Ind,
    All,
}

impl Suite {
    fn strategies(self) -> Vec<MuStrategy> {
        match self {
            Suite::Replay => vec![MuStrategy::Replay],
            Suite::BitTamper => vec![MuStrategy::BitTamper],
            Suite::RandomForge => vec![MuStrategy::RandomForge],
            Suite::NvmClone => vec![MuStrategy::NvmClone],
            Suite::Whitebox => vec![MuStrategy::WhiteBox],
            Suite::Mu | Suite::All => MuStrategy::ALL.to_vec(),
            Suite::Ind => vec![],
        }
    }

    pub fn name(self) -> String {
        clap::ValueEnum::to_possible_value(&self)
            .expect("no skipped variants")
            .get_name()
            .to_string()
    }

    fn includes_ind(self) -> bool {
        matches!(self, Suite::Ind | Suite::All)
    }
}

#[derive(Debug, Clone, Serialize)]
struct GameRow {
    game: &'static str,
    strategy: &'static str,
    trials: usize,
    wins: usize,
    clean_trials: usize,
    clean_wins: usize,
    win_rate: f64,
    seed: u64,
}

impl GameRow {
    fn new(game: &'static str, strategy: &'static str, r: &GameResult, seed: u64) -> Self {
        Self {
            game,
            strategy,
            trials: r.trials,
            wins: r.adversary_wins,
            clean_trials: r.clean_trials,
            clean_wins: r.clean_wins,
            win_rate: r.win_rate(),
            seed,
        }
    }
}

/// Half-width of the band a chance-level win rate must stay inside: 0.05,
/// widened to a 99.9% binomial interval for small trial counts.
pub fn chance_band(trials: usize) -> f64 {
    (3.29 * 0.5 / (trials.max(1) as f64).sqrt()).max(0.05)
}

pub fn cmd_attack(cfg: &ScenarioConfig, suite: Suite, trials: Option<usize>) -> Result<Outcome> {
    std::fs::create_dir_all(&cfg.out)?;
    let (_, adversary_seed, game_seed) = cfg.seeds();
    let mut devices = enrolled_group(cfg)?;
    devices.truncate(2);
    let verifier = devices.pop().expect("two devices");
    let prover = devices.pop().expect("two devices");
    let mut games = Vec::new();
    let mut checks = Vec::new();

    let mu_trials = trials.unwrap_or(cfg.trials.mu);
    let setup = MuSetup {
        prover: prover.clone(),
        verifier: verifier.clone(),
        adversary_puf: DpufDevice::new(adversary_seed, &cfg.puf_config())?,
    };
    for strategy in suite.strategies() {
        let r = run_mu_game(&setup, strategy, mu_trials, game_seed)?;
        let row = GameRow::new("mu", strategy.name(), &r, game_seed);
        checks.push(if strategy == MuStrategy::WhiteBox {
            let need = (mu_trials * 99).div_ceil(100);
            Check::new("mu whitebox", r.adversary_wins >= need, format!("{}/{} wins, need >= {need}", r.adversary_wins, r.trials))
        } else {
            Check::new(
                format!("mu {}", strategy.name()),
                r.clean_wins == 0 && r.clean_trials > 0,
                format!("{}/{} clean wins", r.clean_wins, r.clean_trials),
            )
        });
        games.push(row);
    }

    let mut chain = Value::Null;
    if suite.includes_ind() {
        let ind_trials = trials.unwrap_or(cfg.trials.ind);
        let band = chance_band(ind_trials);
        for kind in DistinguisherKind::BUILT_IN {
            let r = run_ind_game((prover.clone(), verifier.clone()), kind, ind_trials, game_seed)?;
            let rate = r.win_rate();
            checks.push(Check::new(
                format!("ind {}", kind.name()),
                (rate - 0.5).abs() <= band,
                format!("win rate {rate:.4}, need 0.5 +/- {band:.4}"),
            ));
            games.push(GameRow::new("ind", kind.name(), &r, game_seed));
        }
        let (mut p, mut v) = (prover.clone(), verifier.clone());
        let ids = pseudonym_chain(&mut p, &mut v, cfg.trials.chain)?;
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        checks.push(Check::new(
            "pseudonym chain",
            sorted.len() == ids.len(),
            format!("{} distinct of {} pseudonyms", sorted.len(), ids.len()),
        ));
        chain = json!({ "sessions": cfg.trials.chain, "ids": ids.len(), "distinct": sorted.len() });
    }

    let report = json!({
        "command": "attack",
        "suite": suite.name(),
        "seed": cfg.seed,
        "games": games,
        "pseudonym_chain": chain,
    });
    let name = format!("attack-{}.json", suite.name());
    finish(&cfg.out, &name, report, checks, Vec::new())
}

pub fn cmd_bench(cfg: &ScenarioConfig, sessions: Option<usize>) -> Result<Outcome> {
    std::fs::create_dir_all(&cfg.out)?;
    let sessions = sessions.unwrap_or(cfg.trials.sessions);
    let devices = enrolled_group(cfg)?;
    let (_, rows, logs) = run_pairs(devices, &[(0, 1)], sessions, cfg.transport, false)?;
    let completed = rows.iter().filter(|r| r.agreed).count();
    let timing = timing_report(&logs);
    let csv = cfg.out.join("metrics.csv");
    std::fs::write(&csv, timing.to_csv())?;
    let json_path = cfg.out.join("metrics.json");
    std::fs::write(&json_path, timing.to_json())?;

    let mut checks = vec![Check::new(
        "completed sessions",
        completed > 0,
        format!("{completed}/{sessions}"),
    )];
    for row in &timing.rows {
        let per_role = phenoauth::metrics::Primitive::ALL
            .iter()
            .find(|p| p.name() == row.primitive)
            .map_or(0, |&p| COMPLETED_SESSION.get(p)) as u64;
        let expected = per_role * 2 * completed as u64;
        checks.push(Check::new(
            format!("{} count", row.primitive),
            row.count == expected && row.total_us > 0.0,
            format!("{} calls (expected {expected}), {:.1} us total", row.count, row.total_us),
        ));
    }
    let report = json!({
        "command": "bench",
        "seed": cfg.seed,
        "transport": cfg.transport,
        "sessions": sessions,
        "completed": completed,
        "timing": timing,
    });
    finish(&cfg.out, "bench-report.json", report, checks, vec![csv, json_path])
}
