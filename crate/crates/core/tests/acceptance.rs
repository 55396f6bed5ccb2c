//! Acceptance suite: each criterion prints one PASS/FAIL line with its
//! measurements and wall time. Exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use phenoauth::adversary::{self, DistinguisherKind, MuSetup, MuStrategy};
use phenoauth::authenticator::{self, PhenotypeClassifier};
use phenoauth::metrics::COMPLETED_SESSION;
use phenoauth::phenotype::{self, imgen, ReliabilityParams};
use phenoauth::protocol::session::{run_session, SessionRecord};
use phenoauth::protocol::{
    enroll_group, provision_simulated, AbortReason, AuthMessage, Device, ProtocolConfig, SessionOutcome,
};
use phenoauth::puf_sim::{Challenge, DpufDevice, PufConfig};
use phenoauth::transport::{Action, Direction, MemoryChannel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn enrolled(names: &[&str], seed: u64) -> Vec<Device> {
    let puf = PufConfig::default();
    let cfg = ProtocolConfig::default();
    let mut devs: Vec<Device> = names
        .iter()
        .enumerate()
        .map(|(i, n)| provision_simulated(n, seed + i as u64, &puf, &cfg, seed ^ (i as u64 + 1)).unwrap())
        .collect();
    enroll_group(&mut devs).unwrap();
    devs
}

fn pair(seed: u64) -> (Device, Device) {
    let mut devs = enrolled(&["prover", "verifier"], seed);
    let v = devs.pop().unwrap();
    (devs.pop().unwrap(), v)
}

fn honest(p: &mut Device, v: &mut Device) -> SessionRecord {
    run_session(p, v, &mut MemoryChannel::honest()).unwrap()
}

fn cost_model() -> Check {
    let (mut p, mut v) = pair(100);
    let start = Instant::now();
    let mut completed = 0;
    for i in 0..100 {
        let rec = honest(&mut p, &mut v);
        if rec.both_succeeded() {
            completed += 1;
            ensure(rec.prover_log.snapshot() == COMPLETED_SESSION, format!("session {i} prover {:?}", rec.prover_log.snapshot()))?;
            let vc = rec.verifier_log.unwrap().snapshot();
            ensure(vc == COMPLETED_SESSION, format!("session {i} verifier {vc:?}"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(completed >= 99, format!("only {completed} sessions completed"))?;
    ensure(elapsed < Duration::from_secs(1), format!("100 sessions took {elapsed:?}"))?;
    Ok(format!(
        "{completed}/100 completed sessions, both roles DPUF=2 H=2 AEAD.Enc=2 DPAN=1 KDF=1; sessions took {:.3} s",
        elapsed.as_secs_f64()
    ))
}

fn honest_success() -> Check {
    let (mut p, mut v) = pair(200);
    let mut ok = 0;
    for i in 0..1000 {
        let rec = honest(&mut p, &mut v);
        if let (SessionOutcome::Success { mk: a }, Some(SessionOutcome::Success { mk: b })) = (&rec.prover, &rec.verifier) {
            ensure(a == b, format!("session {i}: mk differs"))?;
            let rp = &p.nvm().peers[v.label()];
            let rv = &v.nvm().peers[p.label()];
            ensure(rp.c_i == rv.c_i, format!("session {i}: next challenge differs"))?;
            ensure(rp.delta == rv.delta, format!("session {i}: next delta differs"))?;
            ok += 1;
        } else {
            // A failed session leaves the pair out of step; start over from
            // fresh enrolled state so every trial is independent.
            let (np, nv) = pair(200 + 1 + i as u64);
            p = np;
            v = nv;
        }
    }
    let rate = ok as f64 / 1000.0;
    ensure(rate >= 0.99, format!("success rate {rate}"))?;
    Ok(format!("{ok}/1000 sessions succeeded with equal mk, C_i+1 and delta_i+1"))
}

fn stable_cells() -> Check {
    let cfg = PufConfig::default();
    let dev = DpufDevice::new(300, &cfg).unwrap();
    let n = dev.cell_count();
    let reliable = (0..n).filter(|&i| dev.min_reliability(i) > 0.99).count();
    let fraction = reliable as f64 / n as f64;
    ensure(fraction >= 0.0267, format!("reliable fraction {fraction:.4}"))?;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let challenges = [Challenge::random(cfg.geometry(), &mut rng)];
    let params = ReliabilityParams::default();
    ensure((params.t_stable() - 0.99).abs() < 1e-12, "t_stable is not 0.99")?;
    let sc = phenotype::reliability_analysis(&dev, &challenges, &cfg.env.points(), params, 256, &mut rng)
        .map_err(|e| e.to_string())?;
    ensure(sc.cell_indices.len() == 256, format!("{} cells selected", sc.cell_indices.len()))?;
    let worst = sc
        .cell_indices
        .iter()
        .map(|&c| dev.min_reliability(c as usize))
        .fold(1.0, f64::min);
    ensure(worst >= 0.985, format!("selected cell with reliability {worst}"))?;
    Ok(format!(
        "{:.2}% of cells above 0.99 reliability; 256 selected cells, worst ground-truth reliability {worst:.6}",
        fraction * 100.0
    ))
}

fn zero_false_positives() -> Check {
    let devs = enrolled(&["e0", "e1", "e2"], 400);
    let cfg = PufConfig::default();
    let held_out: Vec<DpufDevice> = (0..2).map(|i| DpufDevice::new(450 + i, &cfg).unwrap()).collect();
    let stored = devs[0].nvm().model.clone().unwrap();
    let (model, t) = (stored.model, stored.threshold);
    let envs = cfg.env.points();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let (w, h) = (cfg.image_width, cfg.image_height);

    let mut impostors = 0;
    let mut false_accepts = 0;
    let mut worst = 0.0f64;
    for dev in &held_out {
        for _ in 0..300 {
            let c = Challenge::random(cfg.geometry(), &mut rng);
            let env = envs[rng.random_range(0..envs.len())];
            let image = imgen(&dev.read(&c, env, &mut rng).unwrap(), w, h).unwrap();
            let (_, s) = model.classify(&image).unwrap();
            worst = worst.max(s);
            impostors += 1;
            false_accepts += (s >= t.0) as usize;
        }
    }
    for _ in 0..500 {
        let image = authenticator::uniform_noise_image(w, h, &mut rng);
        let (_, s) = model.classify(&image).unwrap();
        worst = worst.max(s);
        impostors += 1;
        false_accepts += (s >= t.0) as usize;
    }

    let mut genuine = 0;
    let mut accepted = 0;
    for dev in &devs {
        for _ in 0..200 {
            let c = Challenge::random(cfg.geometry(), &mut rng);
            let env = envs[rng.random_range(0..envs.len())];
            let image = imgen(&dev.puf().read(&c, env, &mut rng).unwrap(), w, h).unwrap();
            genuine += 1;
            accepted += authenticator::accept(&model, t, &image, dev.label()) as usize;
        }
    }
    let tar = accepted as f64 / genuine as f64;
    ensure(false_accepts == 0, format!("{false_accepts}/{impostors} impostors accepted (max S {worst:.4}, t {:.4})", t.0))?;
    ensure(tar >= 0.95, format!("true-accept rate {tar:.4}"))?;
    Ok(format!(
        "0/{impostors} impostor accepts (max S {worst:.4} < t {:.4}); true-accept rate {tar:.4} over {genuine}",
        t.0
    ))
}

fn flip(bytes: &[u8], bit: usize) -> Vec<u8> {
    let mut out = bytes.to_vec();
    out[bit / 8] ^= 0x80 >> (bit % 8);
    out
}

/// Bit positions to flip: everything outside the noisy payload's content,
/// plus `sampled` positions inside it.
fn sweep_positions(msg: &AuthMessage, sampled: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let encoded = msg.encode();
    // Header (6) + dev_id, delta1, delta2 fields + payload length prefix.
    let payload_start = 6 + (4 + 32) + (4 + msg.ad.delta1.len()) + (4 + msg.ad.delta2.len()) + 4;
    let payload_end = payload_start + msg.noisy_payload.len();
    let mut positions: Vec<usize> = (0..payload_start * 8).chain(payload_end * 8..encoded.len() * 8).collect();
    positions.extend((0..sampled).map(|_| rng.random_range(payload_start * 8..payload_end * 8)));
    positions
}

fn integrity_sweep() -> Check {
    let (p0, v0) = pair(500);
    let mut rng = ChaCha20Rng::seed_from_u64(5);

    let mut p = p0.clone();
    let (m1, _) = p.auth_initiate(v0.label()).unwrap();
    let m1_bytes = m1.encode();
    let mut v = v0.clone();
    let m2 = v.auth_respond(&m1).response.ok_or("honest M1 rejected")?;
    let m2_bytes = m2.encode();

    let mut accepted = 0;
    let positions = sweep_positions(&m1, 1000, &mut rng);
    for &bit in &positions {
        let mut v = v0.clone();
        accepted += v.auth_respond_bytes(&flip(&m1_bytes, bit)).outcome.is_success() as usize;
    }
    let m1_flips = positions.len();
    let positions = sweep_positions(&m2, 1000, &mut rng);
    for &bit in &positions {
        let mut p = p0.clone();
        let (again, pending) = p.auth_initiate(v0.label()).unwrap();
        ensure(again == m1, "prover replay diverged")?;
        accepted += p.auth_finalize_bytes(pending, &flip(&m2_bytes, bit)).0.is_success() as usize;
    }
    let m2_flips = positions.len();
    ensure(accepted == 0, format!("{accepted} flipped messages accepted"))?;
    Ok(format!("0 accepts over {m1_flips} AuthRequest and {m2_flips} AuthResponse single-bit flips"))
}

fn mu_game() -> Check {
    let (prover, verifier) = pair(600);
    let setup = MuSetup {
        prover,
        verifier,
        adversary_puf: DpufDevice::new(699, &PufConfig::default()).unwrap(),
    };
    let mut lines = Vec::new();
    for strategy in [MuStrategy::Replay, MuStrategy::RandomForge, MuStrategy::NvmClone, MuStrategy::BitTamper] {
        let r = adversary::run_mu_game(&setup, strategy, 1000, 6).map_err(|e| e.to_string())?;
        ensure(r.clean_trials == 1000 && r.clean_wins == 0, format!("{}: {r:?}", strategy.name()))?;
        lines.push(format!("{} {}/{}", strategy.name(), r.clean_wins, r.clean_trials));
    }
    let r = adversary::run_mu_game(&setup, MuStrategy::WhiteBox, 1000, 6).map_err(|e| e.to_string())?;
    ensure(r.adversary_wins >= 990 && r.clean_trials == 0, format!("whitebox: {r:?}"))?;
    lines.push(format!("whitebox control {}/{} (non-clean)", r.adversary_wins, r.trials));
    Ok(format!("clean wins: {}", lines.join(", ")))
}

fn ind_game() -> Check {
    let (p, v) = pair(700);
    let mut lines = Vec::new();
    for kind in DistinguisherKind::BUILT_IN {
        let r = adversary::run_ind_game((p.clone(), v.clone()), kind, 2000, 7).map_err(|e| e.to_string())?;
        let rate = r.clean_wins as f64 / r.clean_trials as f64;
        ensure(r.clean_trials == 2000 && (rate - 0.5).abs() <= 0.05, format!("{}: {r:?}", kind.name()))?;
        lines.push(format!("{} {rate:.4}", kind.name()));
    }
    let (mut p, mut v) = (p, v);
    let ids = adversary::pseudonym_chain(&mut p, &mut v, 20).map_err(|e| e.to_string())?;
    let mut distinct = ids.clone();
    distinct.sort();
    distinct.dedup();
    ensure(distinct.len() == ids.len(), "repeated pseudonym")?;
    Ok(format!("win rates {}; {} distinct pseudonyms over 20 sessions", lines.join(", "), ids.len()))
}

fn atomicity_and_desync() -> Check {
    let (p0, v0) = pair(800);
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut aborts = 0;

    // Tampered, forged, replayed, dropped and delayed deliveries.
    let (mut p, mut v) = (p0.clone(), v0.clone());
    let old = honest(&mut p, &mut v);
    let old_m1 = old.request.clone().unwrap();
    let old_m2 = old.response.clone().unwrap();
    let attacks: Vec<(&str, Box<dyn FnMut(u64, Direction, &[u8]) -> Action>)> = vec![
        ("flip M1", Box::new(|_: u64, d: Direction, b: &[u8]| if d == Direction::ToVerifier { Action::Replace(flip(b, 1000)) } else { Action::Deliver })),
        ("flip M2", Box::new(|_: u64, d: Direction, b: &[u8]| if d == Direction::ToProver { Action::Replace(flip(b, 2000)) } else { Action::Deliver })),
        ("replay M1", Box::new(move |_: u64, d: Direction, _: &[u8]| if d == Direction::ToVerifier { Action::Replace(old_m1.clone()) } else { Action::Deliver })),
        ("replay M2", Box::new(move |_: u64, d: Direction, _: &[u8]| if d == Direction::ToProver { Action::Replace(old_m2.clone()) } else { Action::Deliver })),
        ("truncate M1", Box::new(|_: u64, d: Direction, b: &[u8]| if d == Direction::ToVerifier { Action::Replace(b[..b.len() / 2].to_vec()) } else { Action::Deliver })),
        ("drop M1", Box::new(|_: u64, d: Direction, _: &[u8]| if d == Direction::ToVerifier { Action::Drop } else { Action::Deliver })),
        ("delay M2", Box::new(|_: u64, d: Direction, _: &[u8]| if d == Direction::ToProver { Action::Delay(10) } else { Action::Deliver })),
    ];
    for (name, interposer) in attacks {
        let p_before = p.nvm().canonical_bytes();
        let v_before = v.nvm().canonical_bytes();
        let (p_snap, v_snap) = (p.clone(), v.clone());
        let rec = run_session(&mut p, &mut v, &mut MemoryChannel::new(interposer)).unwrap();
        if !rec.prover.is_success() {
            aborts += 1;
            ensure(p.nvm().canonical_bytes() == p_before, format!("{name}: prover NVM changed on abort"))?;
        }
        if let Some(out) = &rec.verifier {
            if !out.is_success() {
                aborts += 1;
                ensure(v.nvm().canonical_bytes() == v_before, format!("{name}: verifier NVM changed on abort"))?;
            }
        }
        ensure(!rec.prover.is_success() || rec.verifier.as_ref().is_some_and(|o| o.is_success()), format!("{name}: prover accepted"))?;
        // Attacks that desynchronize the pair are followed from the saved state.
        p = p_snap;
        v = v_snap;
    }
    // Corrupted delta on either device; only the verifier role reads it,
    // so the corrupted device answers.
    for side in 0..2 {
        let (mut a, mut b) = (p0.clone(), v0.clone());
        let (initiator, target) = if side == 0 { (&mut b, &mut a) } else { (&mut a, &mut b) };
        let peer = target.nvm().peers.keys().next().unwrap().clone();
        let bit = rng.random_range(0..256);
        target.nvm_mut().peers.get_mut(&peer).unwrap().delta[bit / 8] ^= 0x80 >> (bit % 8);
        let i_before = initiator.nvm().canonical_bytes();
        let t_before = target.nvm().canonical_bytes();
        let rec = honest(initiator, target);
        ensure(rec.verifier.as_ref().is_some_and(|o| !o.is_success()), "corrupted delta accepted")?;
        ensure(!rec.prover.is_success(), "initiator accepted without a response")?;
        aborts += 2;
        ensure(initiator.nvm().canonical_bytes() == i_before, "initiator NVM changed after corrupted-state abort")?;
        ensure(target.nvm().canonical_bytes() == t_before, "corrupted NVM changed after abort")?;
    }

    // Blocked M2: the verifier commits, the prover does not.
    let (mut p, mut v) = (p0.clone(), v0.clone());
    let blocked = run_session(
        &mut p,
        &mut v,
        &mut MemoryChannel::new(|_: u64, d: Direction, _: &[u8]| if d == Direction::ToProver { Action::Drop } else { Action::Deliver }),
    )
    .unwrap();
    ensure(blocked.prover == SessionOutcome::Abort(AbortReason::Timeout), format!("blocked run prover {:?}", blocked.prover))?;
    let next = honest(&mut p, &mut v);
    let desyncs = [Some(&next.prover), next.verifier.as_ref()]
        .into_iter()
        .flatten()
        .filter(|o| o.abort_reason() == Some(AbortReason::Desync))
        .count();
    ensure(desyncs == 1, format!("{desyncs} desync aborts: {:?} / {:?}", next.prover, next.verifier))?;
    Ok(format!("{aborts} aborts, NVM bit-identical on every aborting side; blocked M2 then exactly 1 Desync"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Check); 8] = [
        ("cost model", Duration::from_secs(60), cost_model),
        ("honest-run success", Duration::from_secs(120), honest_success),
        ("stable-cell availability", Duration::from_secs(60), stable_cells),
        ("zero-false-positive authenticator", Duration::from_secs(120), zero_false_positives),
        ("integrity sweep", Duration::from_secs(300), integrity_sweep),
        ("MU game", Duration::from_secs(600), mu_game),
        ("IND/unlinkability", Duration::from_secs(300), ind_game),
        ("abort atomicity and desync", Duration::from_secs(60), atomicity_and_desync),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; exceeded {limit:?}"))
            }
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({:.1} s) {detail}", i + 1, elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({:.1} s) {detail}", i + 1, elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
