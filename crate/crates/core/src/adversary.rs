//! Oracle access to a set of devices and the MU and IND games played as
//! repeated trials.
//!
//! A session is clean while its devices' PUFs were never issued to the
//! adversary and their NVM was not read or written while it was live. The
//! adversary wins a trial of the MU game when a clean session's acceptor
//! returns `Success` on a message that is not the one its partner sent in
//! that session.

use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::{self, SymmetricKey};
use crate::phenotype::DeviceLabel;
use crate::protocol::session::{self, SessionRecord};
use crate::protocol::{
    AuthMessage, Device, NvmState, PendingSession, RoleFlag, SessionOutcome, REQUEST_NONCE,
};
use crate::puf_sim::{Challenge, DpufDevice, EnvParams, NoisyResponse, PufError, StableResponse};
use crate::transport::{Action, Direction, Interposer, MemoryChannel, Passthrough, Transcript};

pub type SessionId = usize;
pub type DeviceIndex = usize;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no session {0}")]
    NoSession(SessionId),
    #[error("session {0} is not live")]
    NotLive(SessionId),
    #[error("session {0} already started")]
    AlreadyStarted(SessionId),
    #[error("message index must be 1 or 2, got {0}")]
    BadMessageIndex(u8),
    #[error("device index {0} out of range")]
    NoDevice(DeviceIndex),
    #[error(transparent)]
    Puf(#[from] PufError),
    #[error(transparent)]
    Phenotype(#[from] crate::phenotype::PhenotypeError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error("{0} honest sessions failed in a row")]
    Stalled(usize),
}

/// Every oracle call, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    Launch { prover: DeviceIndex, verifier: DeviceIndex },
    Reveal(DeviceIndex),
    Corrupt(DeviceIndex),
    Issue(DeviceIndex),
    Block { session: SessionId, message: u8 },
    Complete(SessionId),
}

enum State {
    Queued,
    Live { pending: PendingSession, m1: AuthMessage },
    Done { record: SessionRecord, transcript: Transcript },
}

struct Entry {
    prover: DeviceIndex,
    verifier: DeviceIndex,
    state: State,
    touched_while_live: bool,
    blocked: BTreeSet<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionStatus {
    Queued,
    Live,
    Done,
}

pub struct OracleContext {
    devices: Vec<Device>,
    sessions: Vec<Entry>,
    issued: Vec<bool>,
    log: Vec<Query>,
}

impl OracleContext {
    pub fn new(devices: Vec<Device>) -> Self {
        let n = devices.len();
        Self {
            devices,
            sessions: Vec::new(),
            issued: vec![false; n],
            log: Vec::new(),
        }
    }

    pub fn device(&self, i: DeviceIndex) -> &Device {
        &self.devices[i]
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn queries(&self) -> &[Query] {
        &self.log
    }

    fn check_device(&self, i: DeviceIndex) -> Result<(), HarnessError> {
        if i < self.devices.len() {
            Ok(())
        } else {
            Err(HarnessError::NoDevice(i))
        }
    }

    fn entry(&self, id: SessionId) -> Result<&Entry, HarnessError> {
        self.sessions.get(id).ok_or(HarnessError::NoSession(id))
    }

    fn same_pair(e: &Entry, a: DeviceIndex, b: DeviceIndex) -> bool {
        (e.prover == a && e.verifier == b) || (e.prover == b && e.verifier == a)
    }

    /// Start a session, or queue it behind a live one on the same pair.
    pub fn launch(&mut self, prover: DeviceIndex, verifier: DeviceIndex) -> Result<SessionId, HarnessError> {
        self.check_device(prover)?;
        self.check_device(verifier)?;
        self.log.push(Query::Launch { prover, verifier });
        let busy = self
            .sessions
            .iter()
            .any(|e| Self::same_pair(e, prover, verifier) && !matches!(e.state, State::Done { .. }));
        self.sessions.push(Entry {
            prover,
            verifier,
            state: State::Queued,
            touched_while_live: false,
            blocked: BTreeSet::new(),
        });
        let id = self.sessions.len() - 1;
        if !busy {
            self.start(id);
        }
        Ok(id)
    }

    fn start(&mut self, id: SessionId) {
        let (p, v) = (self.sessions[id].prover, self.sessions[id].verifier);
        let peer = self.devices[v].label().clone();
        self.sessions[id].state = match self.devices[p].auth_initiate(&peer) {
            Ok((m1, pending)) => State::Live { pending, m1 },
            Err(reason) => State::Done {
                record: SessionRecord {
                    prover: SessionOutcome::Abort(reason),
                    prover_log: Default::default(),
                    verifier: None,
                    verifier_log: None,
                    request: None,
                    response: None,
                },
                transcript: Transcript::default(),
            },
        };
    }

    pub fn status(&self, id: SessionId) -> Result<SessionStatus, HarnessError> {
        Ok(match self.entry(id)?.state {
            State::Queued => SessionStatus::Queued,
            State::Live { .. } => SessionStatus::Live,
            State::Done { .. } => SessionStatus::Done,
        })
    }

    /// Drop message 1 (`M₁`) or 2 (`M₂`) of a session not yet completed.
    pub fn block(&mut self, id: SessionId, message: u8) -> Result<(), HarnessError> {
        if !(1..=2).contains(&message) {
            return Err(HarnessError::BadMessageIndex(message));
        }
        let e = self.sessions.get_mut(id).ok_or(HarnessError::NoSession(id))?;
        if matches!(e.state, State::Done { .. }) {
            return Err(HarnessError::AlreadyStarted(id));
        }
        e.blocked.insert(message);
        self.log.push(Query::Block { session: id, message });
        Ok(())
    }

    /// Deliver the live session's messages through `interposer`.
    pub fn complete(&mut self, id: SessionId, interposer: impl Interposer) -> Result<&SessionRecord, HarnessError> {
        let entry = self.sessions.get_mut(id).ok_or(HarnessError::NoSession(id))?;
        if !matches!(entry.state, State::Live { .. }) {
            return Err(HarnessError::NotLive(id));
        }
        let State::Live { pending, m1 } = std::mem::replace(&mut entry.state, State::Queued) else {
            unreachable!("checked above");
        };
        self.log.push(Query::Complete(id));
        let blocked = entry.blocked.clone();
        let (p, v) = (entry.prover, entry.verifier);
        let mut inner = interposer;
        let gate = move |step: u64, dir: Direction, bytes: &[u8]| {
            let index = match dir {
                Direction::ToVerifier => 1,
                Direction::ToProver => 2,
            };
            if blocked.contains(&index) {
                Action::Drop
            } else {
                inner.intercept(step, dir, bytes)
            }
        };
        let mut channel = MemoryChannel::new(gate);
        let (prover, verifier) = crate::protocol::pair_mut(&mut self.devices, p, v);
        let record = session::drive(prover, verifier, pending, &m1, &mut channel)?;
        self.sessions[id].state = State::Done {
            record,
            transcript: channel.into_transcript(),
        };
        if let Some(next) = self
            .sessions
            .iter()
            .position(|e| Self::same_pair(e, p, v) && matches!(e.state, State::Queued))
        {
            self.start(next);
        }
        match &self.sessions[id].state {
            State::Done { record, .. } => Ok(record),
            _ => unreachable!("session just completed"),
        }
    }

    /// Launch and complete in one go.
    pub fn run(&mut self, prover: DeviceIndex, verifier: DeviceIndex, interposer: impl Interposer) -> Result<SessionId, HarnessError> {
        let id = self.launch(prover, verifier)?;
        if self.status(id)? == SessionStatus::Live {
            self.complete(id, interposer)?;
        }
        Ok(id)
    }

    pub fn run_honest(&mut self, prover: DeviceIndex, verifier: DeviceIndex) -> Result<SessionId, HarnessError> {
        self.run(prover, verifier, Passthrough)
    }

    pub fn record(&self, id: SessionId) -> Option<&SessionRecord> {
        match &self.sessions.get(id)?.state {
            State::Done { record, .. } => Some(record),
            _ => None,
        }
    }

    pub fn transcript(&self, id: SessionId) -> Option<&Transcript> {
        match &self.sessions.get(id)?.state {
            State::Done { transcript, .. } => Some(transcript),
            _ => None,
        }
    }

    fn touch_live(&mut self, device: DeviceIndex) {
        for e in &mut self.sessions {
            if matches!(e.state, State::Live { .. }) && (e.prover == device || e.verifier == device) {
                e.touched_while_live = true;
            }
        }
    }

    /// Read a device's NVM.
    pub fn reveal_nvm(&mut self, device: DeviceIndex) -> Result<NvmState, HarnessError> {
        self.check_device(device)?;
        self.log.push(Query::Reveal(device));
        self.touch_live(device);
        Ok(self.devices[device].nvm().clone())
    }

    /// Modify a device's NVM.
    pub fn corrupt_nvm(&mut self, device: DeviceIndex, mutation: impl FnOnce(&mut NvmState)) -> Result<(), HarnessError> {
        self.check_device(device)?;
        self.log.push(Query::Corrupt(device));
        self.touch_live(device);
        mutation(self.devices[device].nvm_mut());
        Ok(())
    }

    /// Physical PUF access: one evaluation of `challenge` at `env`, noisy
    /// region and the stable cells the device would use for it.
    pub fn issue_dpuf(
        &mut self,
        device: DeviceIndex,
        challenge: &Challenge,
        env: EnvParams,
        rng: &mut impl RngCore,
    ) -> Result<(NoisyResponse, StableResponse), HarnessError> {
        let puf = self.issue_puf(device)?;
        let l = self.devices[device].config().l;
        let sc = self.devices[device].nvm().stable_map.select(challenge, l)?;
        Ok((puf.read(challenge, env, rng)?, puf.read_stable(&sc, env, rng)?))
    }

    /// Unrestricted physical access to a device's PUF.
    pub fn issue_puf(&mut self, device: DeviceIndex) -> Result<DpufDevice, HarnessError> {
        self.check_device(device)?;
        self.log.push(Query::Issue(device));
        self.issued[device] = true;
        Ok(self.devices[device].puf().clone())
    }

    pub fn is_clean(&self, id: SessionId) -> Result<bool, HarnessError> {
        let e = self.entry(id)?;
        Ok(!e.touched_while_live && !self.issued[e.prover] && !self.issued[e.verifier])
    }

    /// An acceptor returned `Success` on a message its partner did not send
    /// in this session.
    pub fn adversary_won(&self, id: SessionId) -> Result<bool, HarnessError> {
        let (Some(record), Some(transcript)) = (self.record(id), self.transcript(id)) else {
            return Ok(false);
        };
        let honest = |dir: Direction| {
            transcript
                .events()
                .iter()
                .find(|e| e.direction == dir)
                .is_some_and(|e| e.untouched())
        };
        let m1_honest = honest(Direction::ToVerifier);
        let m2_honest = honest(Direction::ToProver);
        let verifier_won = record.verifier.as_ref().is_some_and(SessionOutcome::is_success) && !m1_honest;
        let prover_won = record.prover.is_success() && !(m1_honest && m2_honest);
        Ok(verifier_won || prover_won)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GameResult {
    pub trials: usize,
    pub adversary_wins: usize,
    pub clean_trials: usize,
    pub clean_wins: usize,
}

impl GameResult {
    pub fn win_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.adversary_wins as f64 / self.trials as f64
        }
    }

    pub fn report(&self, game: &str, strategy: &str, seed: u64) -> GameReport {
        GameReport {
            game: game.to_string(),
            strategy: strategy.to_string(),
            trials: self.trials,
            wins: self.adversary_wins,
            clean_trials: self.clean_trials,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GameReport {
    pub game: String,
    pub strategy: String,
    pub trials: usize,
    pub wins: usize,
    pub clean_trials: usize,
    pub seed: u64,
}

impl GameReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MuStrategy {
    /// Replay `M₁` or `M₂` from the previous session.
    Replay,
    /// Flip one random bit of `M₁` or `M₂`.
    BitTamper,
    /// Structurally valid `M₁` with the prover's current pseudonym and
    /// random contents.
    RandomForge,
    /// `M₁` from a device holding the prover's NVM but another PUF.
    NvmClone,
    /// `M₁` from a device holding the prover's NVM and its PUF. Never clean.
    WhiteBox,
}

impl MuStrategy {
    pub const ALL: [MuStrategy; 5] = [
        MuStrategy::Replay,
        MuStrategy::BitTamper,
        MuStrategy::RandomForge,
        MuStrategy::NvmClone,
        MuStrategy::WhiteBox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MuStrategy::Replay => "replay",
            MuStrategy::BitTamper => "bit-tamper",
            MuStrategy::RandomForge => "random-forge",
            MuStrategy::NvmClone => "nvm-clone",
            MuStrategy::WhiteBox => "whitebox",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// An enrolled pair, prover at index 0 and verifier at index 1, plus the
/// PUF the adversary owns.
#[derive(Clone)]
pub struct MuSetup {
    pub prover: Device,
    pub verifier: Device,
    pub adversary_puf: DpufDevice,
}

fn replace_with(bytes: Vec<u8>, dir: Direction) -> impl FnMut(u64, Direction, &[u8]) -> Action {
    move |_, d, _| if d == dir { Action::Replace(bytes.clone()) } else { Action::Deliver }
}

fn random_message(role: RoleFlag, dev_id: crate::protocol::DeviceId, template: &AuthMessage, rng: &mut impl RngCore) -> AuthMessage {
    let mut fill = |n: usize| {
        let mut v = vec![0u8; n];
        rng.fill_bytes(&mut v);
        v
    };
    let noisy_payload = fill(template.noisy_payload.len());
    AuthMessage {
        role,
        ad: crate::protocol::AssociatedData {
            dev_id,
            delta1: noisy_payload[..template.ad.delta1.len()].to_vec(),
            delta2: fill(template.ad.delta2.len()),
        },
        noisy_payload,
        alpha: fill(template.alpha.len()),
        tag: fill(template.tag.len()),
    }
}

fn play_mu(ctx: &mut OracleContext, setup: &MuSetup, strategy: MuStrategy, rng: &mut ChaCha20Rng) -> Result<SessionId, HarnessError> {
    const P: DeviceIndex = 0;
    const V: DeviceIndex = 1;
    match strategy {
        MuStrategy::Replay => {
            let first = ctx.run_honest(P, V)?;
            let record = ctx.record(first).expect("completed");
            let (old_m1, old_m2) = (record.request.clone(), record.response.clone());
            let s = ctx.launch(P, V)?;
            if rng.random::<bool>() {
                ctx.complete(s, replace_with(old_m1.unwrap_or_default(), Direction::ToVerifier))?;
            } else {
                ctx.complete(s, replace_with(old_m2.unwrap_or_default(), Direction::ToProver))?;
            }
            Ok(s)
        }
        MuStrategy::BitTamper => {
            let target = if rng.random::<bool>() { Direction::ToVerifier } else { Direction::ToProver };
            let seed = rng.next_u64();
            let s = ctx.launch(P, V)?;
            ctx.complete(s, move |_: u64, d: Direction, bytes: &[u8]| {
                if d != target {
                    return Action::Deliver;
                }
                let mut r = ChaCha20Rng::seed_from_u64(seed);
                let bit = r.random_range(0..bytes.len() * 8);
                let mut out = bytes.to_vec();
                out[bit / 8] ^= 0x80 >> (bit % 8);
                Action::Replace(out)
            })?;
            Ok(s)
        }
        MuStrategy::RandomForge => {
            let prover_nvm = ctx.reveal_nvm(P)?;
            let verifier_nvm = ctx.reveal_nvm(V)?;
            let v_label = ctx.device(V).label().clone();
            let p_label = ctx.device(P).label().clone();
            let s = ctx.launch(P, V)?;
            let template = match &ctx.sessions[s].state {
                State::Live { m1, .. } => m1.clone(),
                _ => return Ok(s),
            };
            if rng.random::<bool>() {
                let forged = random_message(RoleFlag::AuthReq, prover_nvm.peers[&v_label].local_id, &template, rng);
                ctx.complete(s, replace_with(forged.encode(), Direction::ToVerifier))?;
            } else {
                let forged = random_message(RoleFlag::AuthOk, verifier_nvm.peers[&p_label].local_id, &template, rng);
                ctx.complete(s, replace_with(forged.encode(), Direction::ToProver))?;
            }
            Ok(s)
        }
        MuStrategy::NvmClone | MuStrategy::WhiteBox => {
            let nvm = ctx.reveal_nvm(P)?;
            let puf = if strategy == MuStrategy::WhiteBox {
                ctx.issue_puf(P)?
            } else {
                setup.adversary_puf.clone()
            };
            let cfg = ctx.device(P).config().clone();
            let mut clone = Device::from_nvm(nvm, puf, cfg, rng.next_u64());
            let v_label = ctx.device(V).label().clone();
            let s = ctx.launch(P, V)?;
            match clone.auth_initiate(&v_label) {
                Ok((forged, _pending)) => {
                    ctx.complete(s, replace_with(forged.encode(), Direction::ToVerifier))?;
                }
                Err(_) => {
                    ctx.complete(s, Passthrough)?;
                }
            }
            Ok(s)
        }
    }
}

/// Play `trials` independent MU trials, each from a fresh copy of `setup`.
pub fn run_mu_game(setup: &MuSetup, strategy: MuStrategy, trials: usize, seed: u64) -> Result<GameResult, HarnessError> {
    let mut result = GameResult::default();
    for t in 0..trials {
        let trial_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(trial_seed);
        let mut prover = setup.prover.clone();
        let mut verifier = setup.verifier.clone();
        prover.reseed(rng.next_u64());
        verifier.reseed(rng.next_u64());
        let mut ctx = OracleContext::new(vec![prover, verifier]);
        let s = play_mu(&mut ctx, setup, strategy, &mut rng)?;
        let won = ctx.adversary_won(s)?;
        let clean = ctx.is_clean(s)?;
        result.trials += 1;
        result.adversary_wins += won as usize;
        result.clean_trials += clean as usize;
        result.clean_wins += (won && clean) as usize;
    }
    Ok(result)
}

/// What a distinguisher sees in one IND trial.
pub struct IndObservation<'a> {
    /// The real session view or random bytes of the same length.
    pub candidate: &'a [u8],
    /// Real view of the previous session between the same pair.
    pub previous: Option<&'a [u8]>,
    /// The session key, handed only to distinguishers that ask for it.
    pub session_key: Option<&'a SymmetricKey>,
}

pub trait Distinguisher {
    fn name(&self) -> &'static str;
    /// `true` guesses the candidate is the real view.
    fn guess(&mut self, obs: &IndObservation<'_>, rng: &mut ChaCha20Rng) -> bool;
    /// Asking for the session key makes every trial non-clean.
    fn wants_session_key(&self) -> bool {
        false
    }
}

/// Per message: `dev_id ‖ Δ² ‖ noisy_payload ‖ α ‖ tag`. `Δ¹` is left out
/// since it is by construction a copy of the payload's first bytes.
pub fn ind_view(m1: &AuthMessage, m2: &AuthMessage) -> Vec<u8> {
    let mut out = Vec::new();
    for m in [m1, m2] {
        out.extend_from_slice(&m.ad.dev_id.0);
        out.extend_from_slice(&m.ad.delta2);
        out.extend_from_slice(&m.noisy_payload);
        out.extend_from_slice(&m.alpha);
        out.extend_from_slice(&m.tag);
    }
    out
}

fn parse_view(view: &[u8], template: (&AuthMessage, &AuthMessage)) -> Option<(AuthMessage, AuthMessage)> {
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = view.get(pos..pos + n)?;
        pos += n;
        Some(s.to_vec())
    };
    let mut parse = |t: &AuthMessage| -> Option<AuthMessage> {
        let dev_id = crate::protocol::DeviceId(take(32)?.try_into().ok()?);
        let delta2 = take(t.ad.delta2.len())?;
        let noisy_payload = take(t.noisy_payload.len())?;
        Some(AuthMessage {
            role: t.role,
            ad: crate::protocol::AssociatedData {
                dev_id,
                delta1: noisy_payload[..t.ad.delta1.len()].to_vec(),
                delta2,
            },
            noisy_payload,
            alpha: take(t.alpha.len())?,
            tag: take(t.tag.len())?,
        })
    };
    let a = parse(template.0)?;
    let b = parse(template.1)?;
    Some((a, b))
}

/// Chi-square of the byte histogram against uniform, split at the median
/// of the 255-degree distribution.
#[derive(Debug, Default)]
pub struct ByteFrequency;

/// Median of a chi-square with 255 degrees of freedom.
const CHI2_255_MEDIAN: f64 = 254.334;

pub fn chi_square_bytes(data: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    let expected = data.len() as f64 / 256.0;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

impl Distinguisher for ByteFrequency {
    fn name(&self) -> &'static str {
        "byte-frequency"
    }

    fn guess(&mut self, obs: &IndObservation<'_>, _: &mut ChaCha20Rng) -> bool {
        chi_square_bytes(obs.candidate) > CHI2_255_MEDIAN
    }
}

/// Looks for any repeated aligned 16-byte chunk; guesses at random when
/// there is none.
#[derive(Debug, Default)]
pub struct RepeatedField;

impl Distinguisher for RepeatedField {
    fn name(&self) -> &'static str {
        "repeated-field"
    }

    fn guess(&mut self, obs: &IndObservation<'_>, rng: &mut ChaCha20Rng) -> bool {
        let mut seen = std::collections::HashSet::new();
        let repeated = obs.candidate.chunks_exact(16).any(|c| !seen.insert(c));
        repeated || rng.random()
    }
}

/// Links the candidate's pseudonyms to the previous session's: guesses
/// real when the two `dev_id` pairs are closer than independent random
/// strings would be on average.
#[derive(Debug)]
pub struct CrossSessionIdMatcher {
    /// Offset of the second message's `dev_id` in the view.
    pub second_id_offset: usize,
}

impl Distinguisher for CrossSessionIdMatcher {
    fn name(&self) -> &'static str {
        "cross-session-id"
    }

    fn guess(&mut self, obs: &IndObservation<'_>, rng: &mut ChaCha20Rng) -> bool {
        let Some(prev) = obs.previous else {
            return rng.random();
        };
        let o = self.second_id_offset;
        let distance: u32 = [0..32, o..o + 32]
            .into_iter()
            .map(|r| {
                obs.candidate[r.clone()]
                    .iter()
                    .zip(&prev[r])
                    .map(|(a, b)| (a ^ b).count_ones())
                    .sum::<u32>()
            })
            .sum();
        match distance.cmp(&256) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => rng.random(),
        }
    }
}

/// Control arm: verifies the first message's tag under the session key.
#[derive(Debug)]
pub struct KeyAware {
    template: Option<(AuthMessage, AuthMessage)>,
}

impl Distinguisher for KeyAware {
    fn name(&self) -> &'static str {
        "key-aware"
    }

    fn guess(&mut self, obs: &IndObservation<'_>, rng: &mut ChaCha20Rng) -> bool {
        let (Some(key), Some(t)) = (obs.session_key, &self.template) else {
            return rng.random();
        };
        match parse_view(obs.candidate, (&t.0, &t.1)) {
            Some((m1, _)) => crypto::verify_by_reencrypt(key, REQUEST_NONCE, &m1.aead_ad_bytes(), &[RoleFlag::AuthReq as u8], &m1.alpha, &m1.tag),
            None => false,
        }
    }

    fn wants_session_key(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistinguisherKind {
    ByteFrequency,
    RepeatedField,
    CrossSessionId,
    KeyAware,
}

impl DistinguisherKind {
    pub const BUILT_IN: [DistinguisherKind; 3] = [
        DistinguisherKind::ByteFrequency,
        DistinguisherKind::RepeatedField,
        DistinguisherKind::CrossSessionId,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistinguisherKind::ByteFrequency => "byte-frequency",
            DistinguisherKind::RepeatedField => "repeated-field",
            DistinguisherKind::CrossSessionId => "cross-session-id",
            DistinguisherKind::KeyAware => "key-aware",
        }
    }
}

const MAX_CONSECUTIVE_FAILURES: usize = 100;

/// Run `trials` sessions between devices 0 and 1 of `pair` (a chain, each
/// session starting from the last one's state) and ask the distinguisher
/// about each.
pub fn run_ind_game(
    pair: (Device, Device),
    kind: DistinguisherKind,
    trials: usize,
    seed: u64,
) -> Result<GameResult, HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let start = [pair.0, pair.1];
    let fresh = |rng: &mut ChaCha20Rng| {
        let mut devices = start.to_vec();
        for d in &mut devices {
            d.reseed(rng.next_u64());
        }
        OracleContext::new(devices)
    };
    let mut ctx = fresh(&mut rng);
    let mut failures = 0;
    let mut dist: Box<dyn Distinguisher> = match kind {
        DistinguisherKind::ByteFrequency => Box::new(ByteFrequency),
        DistinguisherKind::RepeatedField => Box::new(RepeatedField),
        DistinguisherKind::CrossSessionId => Box::new(CrossSessionIdMatcher { second_id_offset: 0 }),
        DistinguisherKind::KeyAware => Box::new(KeyAware { template: None }),
    };
    let mut previous: Option<Vec<u8>> = None;
    let mut result = GameResult::default();
    while result.trials < trials {
        let s = ctx.run_honest(0, 1)?;
        let record = ctx.record(s).expect("completed");
        let (Some(req), Some(resp), SessionOutcome::Success { mk }) = (&record.request, &record.response, &record.prover) else {
            // A failed session leaves the pair out of step; start over from
            // the enrolled state.
            failures += 1;
            if failures == MAX_CONSECUTIVE_FAILURES {
                return Err(HarnessError::Stalled(failures));
            }
            ctx = fresh(&mut rng);
            previous = None;
            continue;
        };
        failures = 0;
        let m1 = AuthMessage::decode(req).expect("honest encoding");
        let m2 = AuthMessage::decode(resp).expect("honest encoding");
        let view = ind_view(&m1, &m2);
        let second_id_offset = view.len() / 2;
        match kind {
            DistinguisherKind::CrossSessionId => dist = Box::new(CrossSessionIdMatcher { second_id_offset }),
            DistinguisherKind::KeyAware => dist = Box::new(KeyAware { template: Some((m1, m2)) }),
            _ => {}
        }
        let real = rng.random::<bool>();
        let candidate = if real {
            view.clone()
        } else {
            let mut r = vec![0u8; view.len()];
            rng.fill_bytes(&mut r);
            r
        };
        let wants_key = dist.wants_session_key();
        let obs = IndObservation {
            candidate: &candidate,
            previous: previous.as_deref(),
            session_key: wants_key.then_some(mk),
        };
        let guess = dist.guess(&obs, &mut rng);
        result.trials += 1;
        let won = guess == real;
        result.adversary_wins += won as usize;
        if !wants_key {
            result.clean_trials += 1;
            result.clean_wins += won as usize;
        }
        previous = Some(view);
    }
    Ok(result)
}

/// Pseudonyms a device used toward `peer` over `sessions` honest sessions,
/// starting with the current one.
pub fn pseudonym_chain(prover: &mut Device, verifier: &mut Device, sessions: usize) -> Result<Vec<crate::protocol::DeviceId>, HarnessError> {
    let peer: DeviceLabel = verifier.label().clone();
    let mut ids = vec![prover.nvm().peers[&peer].local_id];
    for _ in 0..sessions {
        session::run_session(prover, verifier, &mut MemoryChannel::honest())?;
        ids.push(prover.nvm().peers[&peer].local_id);
    }
    Ok(ids)
}
