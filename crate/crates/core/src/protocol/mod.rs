//! Enrollment and mutual authentication between DPUF devices.
//!
//! Every mask is keyed by the initiating prover's current stable response
//! `SR_p_i`, which the verifier recovers as `Δ_i ⊕ SR_v_i`. The noisy
//! response travels XOR-masked by a KDF keystream; `Δ¹` is the first `l`
//! bits of that masked stream.

pub mod nvm;
pub mod session;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;
use zeroize::Zeroize;

use crate::authenticator::{self, AuthError, Rejection, TrainConfig};
use crate::crypto::{self, CryptoError, Extracted, NonceCounter, SymmetricKey, PROTOCOL_SALT};
use crate::metrics::{OpLog, Primitive};
use crate::phenotype::{
    self, DeviceLabel, LabeledDataset, PhenotypeError, PhenotypeImage, ReliabilityParams,
};
use crate::puf_sim::{self, Challenge, DpufDevice, EnvParams, PufError};

pub use nvm::{NvmState, PeerRecord, StoredModel};
pub use wire::{AssociatedData, AuthMessage, EnrollMessage, MsgType, RoleFlag, WireError};

pub type AuthRequest = AuthMessage;
pub type AuthResponse = AuthMessage;
pub type EnrollRequest = EnrollMessage;
pub type EnrollResponse = EnrollMessage;

/// AEAD counter of `M₁`; `M₂` uses the next one.
pub const REQUEST_NONCE: NonceCounter = NonceCounter(0);
pub const RESPONSE_NONCE: NonceCounter = NonceCounter(1);

/// 32-byte pseudonym.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceId(pub [u8; 32]);

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "…)")
    }
}

impl DeviceId {
    /// `H(id ‖ mk)`.
    pub fn advance(&self, mk: &SymmetricKey) -> Self {
        DeviceId(crypto::hash_concat(&[&self.0, mk.as_bytes()]).0)
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(Phase),
    #[error("enrollment message rejected: {0}")]
    BadEnrollment(String),
    #[error("nvm: {0}")]
    Nvm(String),
    #[error(transparent)]
    Phenotype(#[from] PhenotypeError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Puf(#[from] PufError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Enrolling,
    Operational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    UnknownPeer,
    TagMismatch,
    ClassifierReject,
    LowConfidence,
    Desync,
    /// Nothing arrived within the step budget.
    Timeout,
    /// Bytes that do not parse as the expected message.
    Malformed,
    /// A session with this peer is already running.
    Busy,
    /// The device itself cannot run the step (wrong phase, no model, PUF
    /// read failure).
    LocalFault,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionOutcome {
    Success { mk: SymmetricKey },
    Abort(AbortReason),
}

impl SessionOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, SessionOutcome::Success { .. })
    }

    pub fn abort_reason(&self) -> Option<AbortReason> {
        match self {
            SessionOutcome::Abort(r) => Some(*r),
            SessionOutcome::Success { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    /// Stable response length in bits.
    pub l: usize,
    /// Challenges imaged for the enrollment dataset.
    pub enroll_challenges: usize,
    pub reads_per_point: usize,
    pub reliability: ReliabilityParams,
    pub noise_negatives: usize,
    /// Extra negatives for threshold tuning, e.g. reference devices kept by
    /// the manufacturer.
    pub impostors: Vec<PhenotypeImage>,
    pub train_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            l: 256,
            enroll_challenges: 8,
            reads_per_point: 2,
            reliability: ReliabilityParams::default(),
            noise_negatives: 64,
            impostors: Vec::new(),
            train_seed: 0x5eed,
        }
    }
}

/// Volatile state of an initiated session, wiped on drop.
pub struct PendingSession {
    peer: DeviceLabel,
    mk: SymmetricKey,
    response_mask: SymmetricKey,
    sr_current: Vec<u8>,
    sr_next: Vec<u8>,
    c_next: Challenge,
    log: OpLog,
}

impl PendingSession {
    pub fn peer(&self) -> &DeviceLabel {
        &self.peer
    }

    pub fn log(&self) -> &OpLog {
        &self.log
    }
}

impl Drop for PendingSession {
    fn drop(&mut self) {
        self.sr_current.zeroize();
        self.sr_next.zeroize();
    }
}

impl fmt::Debug for PendingSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PendingSession").field("peer", &self.peer).finish_non_exhaustive()
    }
}

/// Result of handling `M₁`.
#[derive(Debug)]
pub struct Responded {
    pub outcome: SessionOutcome,
    pub response: Option<AuthResponse>,
    pub log: OpLog,
}

/// Secrets a device produced, recorded only when enabled; used to scan
/// stored state for leaks.
#[derive(Debug, Clone, Default)]
pub struct SecretLog {
    pub values: Vec<Vec<u8>>,
}

#[derive(Clone)]
pub struct Device {
    label: DeviceLabel,
    puf: DpufDevice,
    cfg: ProtocolConfig,
    rng: ChaCha20Rng,
    phase: Phase,
    nvm: NvmState,
    own_data: LabeledDataset,
    received: LabeledDataset,
    pending_enroll: BTreeMap<[u8; puf_sim::CHALLENGE_BYTES], Vec<u8>>,
    busy: BTreeSet<DeviceLabel>,
    secrets: Option<SecretLog>,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("label", &self.label)
            .field("phase", &self.phase)
            .field("peers", &self.nvm.peers.len())
            .finish_non_exhaustive()
    }
}

fn xor(a: &[u8], b: &[u8]) -> Vec<u8> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

fn random_id(rng: &mut impl RngCore) -> DeviceId {
    let mut id = [0u8; 32];
    rng.fill_bytes(&mut id);
    DeviceId(id)
}

struct SessionKeys {
    mk: SymmetricKey,
    request_mask: SymmetricKey,
    response_mask: SymmetricKey,
}

fn session_keys(sr: &[u8], noisy_bits: usize) -> Result<SessionKeys, CryptoError> {
    let ext = Extracted::new(sr, PROTOCOL_SALT)?;
    Ok(SessionKeys {
        mk: ext.expand(256, b"mk")?,
        request_mask: ext.expand(noisy_bits, b"noisy-mask/req")?,
        response_mask: ext.expand(noisy_bits, b"noisy-mask/ok")?,
    })
}

impl Device {
    /// Characterize the PUF, image it for the enrollment dataset and pick a
    /// random enrollment pseudonym.
    pub fn provision(label: DeviceLabel, puf: DpufDevice, cfg: ProtocolConfig, seed: u64) -> Result<Self, ProtocolError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let envs = puf.config().env.points();
        let characterization = phenotype::characterize(&puf, &envs, cfg.reliability, &mut rng)?;
        let stable_map = characterization.stable_map();
        if stable_map.cells.len() < cfg.l {
            return Err(PhenotypeError::InsufficientStableCells {
                found: stable_map.cells.len(),
                needed: cfg.l,
            }
            .into());
        }
        let challenges: Vec<Challenge> = (0..cfg.enroll_challenges)
            .map(|_| Challenge::random(puf.geometry(), &mut rng))
            .collect();
        let own_data = phenotype::generate_dataset(&[(label.clone(), &puf)], &challenges, &envs, cfg.reads_per_point, &mut rng)?;
        let self_id = random_id(&mut rng);
        Ok(Self {
            nvm: NvmState::new(label.clone(), self_id, stable_map),
            label,
            puf,
            cfg,
            rng,
            phase: Phase::Enrolling,
            own_data,
            received: LabeledDataset::default(),
            pending_enroll: BTreeMap::new(),
            busy: BTreeSet::new(),
            secrets: None,
        })
    }

    /// An operational device built from stored state around a given PUF.
    /// With the wrong PUF this is an NVM clone.
    pub fn from_nvm(nvm: NvmState, puf: DpufDevice, cfg: ProtocolConfig, seed: u64) -> Self {
        Self {
            label: nvm.label.clone(),
            puf,
            cfg,
            rng: ChaCha20Rng::seed_from_u64(seed),
            phase: Phase::Operational,
            nvm,
            own_data: LabeledDataset::default(),
            received: LabeledDataset::default(),
            pending_enroll: BTreeMap::new(),
            busy: BTreeSet::new(),
            secrets: None,
        }
    }

    pub fn label(&self) -> &DeviceLabel {
        &self.label
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn nvm(&self) -> &NvmState {
        &self.nvm
    }

    pub fn nvm_mut(&mut self) -> &mut NvmState {
        &mut self.nvm
    }

    pub fn puf(&self) -> &DpufDevice {
        &self.puf
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn own_dataset(&self) -> &LabeledDataset {
        &self.own_data
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
    }

    pub fn record_secrets(&mut self, on: bool) {
        self.secrets = on.then(SecretLog::default);
    }

    pub fn secret_log(&self) -> Option<&SecretLog> {
        self.secrets.as_ref()
    }

    fn remember(&mut self, secret: &[u8]) {
        if let Some(log) = &mut self.secrets {
            log.values.push(secret.to_vec());
        }
    }

    fn session_env(&mut self) -> EnvParams {
        let points = self.puf.config().env.points();
        points[self.rng.random_range(0..points.len())]
    }

    fn read_stable(&mut self, c: &Challenge) -> Result<Vec<u8>, ProtocolError> {
        let sc = self.nvm.stable_map.select(c, self.cfg.l)?;
        let env = self.session_env();
        Ok(self.puf.read_stable(&sc, env, &mut self.rng)?.bytes)
    }

    /// One challenge evaluation: the region's noisy readout and the stable
    /// response.
    fn evaluate(&mut self, c: &Challenge) -> Result<(Vec<u8>, Vec<u8>), ProtocolError> {
        let sc = self.nvm.stable_map.select(c, self.cfg.l)?;
        let env = self.session_env();
        let noisy = self.puf.read(c, env, &mut self.rng)?.bytes;
        let stable = self.puf.read_stable(&sc, env, &mut self.rng)?.bytes;
        Ok((noisy, stable))
    }

    fn noisy_bits(&self) -> usize {
        self.puf.geometry().region_len
    }

    fn delta1_len(&self) -> usize {
        self.cfg.l / 8
    }

    fn require(&self, phase: Phase) -> Result<(), ProtocolError> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(ProtocolError::WrongPhase(self.phase))
        }
    }

    fn check_enrollment(&self, msg: &EnrollMessage) -> Result<DeviceLabel, ProtocolError> {
        let labels = msg.dataset.labels();
        let [peer] = labels.as_slice() else {
            return Err(ProtocolError::BadEnrollment(format!("dataset carries {} labels", labels.len())));
        };
        if *peer == self.label || self.nvm.peers.contains_key(peer) {
            return Err(ProtocolError::BadEnrollment(format!("label {peer} already known")));
        }
        if msg.stable_response.len() != self.cfg.l / 8 {
            return Err(ProtocolError::BadEnrollment("stable response length".into()));
        }
        Ok(peer.clone())
    }

    /// `M₀`: a fresh challenge, our stable response to it and our dataset.
    pub fn enroll_initiate(&mut self) -> Result<EnrollRequest, ProtocolError> {
        self.require(Phase::Enrolling)?;
        let challenge = Challenge::random(self.puf.geometry(), &mut self.rng);
        let sr = self.read_stable(&challenge)?;
        self.remember(&sr);
        self.pending_enroll.insert(challenge.to_bytes(), sr.clone());
        Ok(EnrollMessage {
            dev_id: self.nvm.self_id,
            challenge,
            stable_response: sr,
            dataset: self.own_data.clone(),
        })
    }

    pub fn enroll_respond(&mut self, req: &EnrollRequest) -> Result<EnrollResponse, ProtocolError> {
        self.require(Phase::Enrolling)?;
        let peer = self.check_enrollment(req)?;
        let sr_v = self.read_stable(&req.challenge)?;
        self.remember(&sr_v);
        self.received.extend(&req.dataset);
        self.retrain()?;
        self.nvm.peers.insert(
            peer.clone(),
            PeerRecord {
                label: peer,
                peer_id: req.dev_id,
                local_id: self.nvm.self_id,
                prev_peer_id: None,
                c_i: req.challenge,
                delta: xor(&sr_v, &req.stable_response),
            },
        );
        Ok(EnrollMessage {
            dev_id: self.nvm.self_id,
            challenge: req.challenge,
            stable_response: sr_v,
            dataset: self.own_data.clone(),
        })
    }

    pub fn enroll_finalize(&mut self, resp: &EnrollResponse) -> Result<(), ProtocolError> {
        self.require(Phase::Enrolling)?;
        let peer = self.check_enrollment(resp)?;
        let mut sr_p = self
            .pending_enroll
            .remove(&resp.challenge.to_bytes())
            .ok_or_else(|| ProtocolError::BadEnrollment("no enrollment pending for this challenge".into()))?;
        self.received.extend(&resp.dataset);
        self.retrain()?;
        self.nvm.peers.insert(
            peer.clone(),
            PeerRecord {
                label: peer,
                peer_id: resp.dev_id,
                local_id: self.nvm.self_id,
                prev_peer_id: None,
                c_i: resp.challenge,
                delta: xor(&resp.stable_response, &sr_p),
            },
        );
        sr_p.zeroize();
        Ok(())
    }

    /// One model over our own data and everything received so far.
    fn retrain(&mut self) -> Result<(), ProtocolError> {
        let mut data = self.own_data.clone();
        data.extend(&self.received);
        let seed = self.cfg.train_seed ^ u64::from_le_bytes(crypto::hash(self.label.0.as_bytes()).0[..8].try_into().expect("8 bytes"));
        let trained = authenticator::train(
            &data,
            &TrainConfig {
                impostors: self.cfg.impostors.clone(),
                noise_negatives: self.cfg.noise_negatives,
                seed,
                ..TrainConfig::default()
            },
        )?;
        self.nvm.model = Some(StoredModel {
            model: trained.model,
            threshold: trained.threshold,
        });
        Ok(())
    }

    /// Leave enrollment: drop datasets and pending enrollment secrets.
    pub fn close_enrollment(&mut self) -> Result<(), ProtocolError> {
        self.require(Phase::Enrolling)?;
        if self.nvm.model.is_none() {
            return Err(ProtocolError::BadEnrollment("no peer enrolled".into()));
        }
        for sr in self.pending_enroll.values_mut() {
            sr.zeroize();
        }
        self.pending_enroll.clear();
        self.own_data = LabeledDataset::default();
        self.received = LabeledDataset::default();
        self.phase = Phase::Operational;
        Ok(())
    }

    fn classify(&self, log: &mut OpLog, noisy: &[u8], expected: &DeviceLabel) -> Result<(), AbortReason> {
        let stored = self.nvm.model.as_ref().ok_or(AbortReason::LocalFault)?;
        let cfg = self.puf.config();
        let image = phenotype::imgen(&puf_sim::NoisyResponse { bytes: noisy.to_vec() }, cfg.image_width, cfg.image_height)
            .map_err(|_| AbortReason::LocalFault)?;
        log.measure(Primitive::Dpan, || authenticator::check(&stored.model, stored.threshold, &image, expected))
            .map(|_| ())
            .map_err(|r| match r {
                Rejection::WrongLabel => AbortReason::ClassifierReject,
                Rejection::LowConfidence => AbortReason::LowConfidence,
            })
    }

    fn well_formed(&self, msg: &AuthMessage) -> bool {
        msg.noisy_payload.len() * 8 == self.noisy_bits()
            && msg.ad.delta1.len() == self.delta1_len()
            && msg.ad.delta2.len() == self.cfg.l / 8
            && msg.alpha.len() == 1
            && msg.tag.len() == crypto::TAG_LEN
    }

    /// Step 1: evaluate `C_i` and `C_{i+1}`, derive `mk` and build `M₁`.
    /// NVM is left untouched.
    pub fn auth_initiate(&mut self, peer: &DeviceLabel) -> Result<(AuthRequest, PendingSession), AbortReason> {
        if self.phase != Phase::Operational {
            return Err(AbortReason::LocalFault);
        }
        let record = self.nvm.peers.get(peer).ok_or(AbortReason::UnknownPeer)?.clone();
        if self.busy.contains(peer) {
            return Err(AbortReason::Busy);
        }
        let mut log = OpLog::default();
        let sr_current = log
            .measure(Primitive::Dpuf, || self.read_stable(&record.c_i))
            .map_err(|_| AbortReason::LocalFault)?;
        let noisy_bits = self.noisy_bits();
        let keys = log
            .measure(Primitive::Kdf, || session_keys(&sr_current, noisy_bits))
            .map_err(|_| AbortReason::LocalFault)?;
        let geometry = self.puf.geometry();
        let c_next = log.measure(Primitive::Hash, || puf_sim::derive_next_challenge(&record.c_i, &keys.mk, geometry));
        let (noisy, sr_next) = log
            .measure(Primitive::Dpuf, || self.evaluate(&c_next))
            .map_err(|_| AbortReason::LocalFault)?;

        let noisy_payload = xor(&noisy, keys.request_mask.as_bytes());
        let ad = AssociatedData {
            dev_id: record.local_id,
            delta1: noisy_payload[..self.delta1_len()].to_vec(),
            delta2: xor(&sr_current, &sr_next),
        };
        let ad_bytes = wire::aead_ad_bytes(RoleFlag::AuthReq, &ad, &noisy_payload);
        let sealed = log.measure(Primitive::AeadEnc, || {
            crypto::aead_encrypt(&keys.mk, REQUEST_NONCE, &ad_bytes, &[RoleFlag::AuthReq as u8])
        });
        for s in [&sr_current, &sr_next, &noisy, &keys.mk.as_bytes().to_vec()] {
            self.remember(s);
        }
        self.busy.insert(peer.clone());
        Ok((
            AuthMessage {
                role: RoleFlag::AuthReq,
                ad,
                noisy_payload,
                alpha: sealed.ciphertext,
                tag: sealed.tag.to_vec(),
            },
            PendingSession {
                peer: peer.clone(),
                mk: keys.mk,
                response_mask: keys.response_mask,
                sr_current,
                sr_next,
                c_next,
                log,
            },
        ))
    }

    /// Step 2. Any abort leaves NVM exactly as it was.
    pub fn auth_respond(&mut self, req: &AuthRequest) -> Responded {
        let mut log = OpLog::default();
        let result = self.respond_inner(req, &mut log);
        match result {
            Ok((response, mk)) => Responded {
                outcome: SessionOutcome::Success { mk },
                response: Some(response),
                log,
            },
            Err(reason) => Responded {
                outcome: SessionOutcome::Abort(reason),
                response: None,
                log,
            },
        }
    }

    /// Step 2 from raw bytes.
    pub fn auth_respond_bytes(&mut self, bytes: &[u8]) -> Responded {
        match AuthMessage::decode(bytes) {
            Ok(msg) if msg.role == RoleFlag::AuthReq => self.auth_respond(&msg),
            _ => Responded {
                outcome: SessionOutcome::Abort(AbortReason::Malformed),
                response: None,
                log: OpLog::default(),
            },
        }
    }

    fn respond_inner(&mut self, req: &AuthRequest, log: &mut OpLog) -> Result<(AuthResponse, SymmetricKey), AbortReason> {
        if self.phase != Phase::Operational {
            return Err(AbortReason::LocalFault);
        }
        if req.role != RoleFlag::AuthReq || !self.well_formed(req) {
            return Err(AbortReason::Malformed);
        }
        let record = match self.nvm.peer_by_id(&req.ad.dev_id) {
            Some(r) => r.clone(),
            None if self.nvm.peer_by_prev_id(&req.ad.dev_id).is_some() => return Err(AbortReason::Desync),
            None => return Err(AbortReason::UnknownPeer),
        };
        if self.busy.contains(&record.label) {
            return Err(AbortReason::Busy);
        }

        let mut sr_v = log
            .measure(Primitive::Dpuf, || self.read_stable(&record.c_i))
            .map_err(|_| AbortReason::LocalFault)?;
        let mut sr_p = xor(&record.delta, &sr_v);
        sr_v.zeroize();
        let noisy_bits = self.noisy_bits();
        let keys = log
            .measure(Primitive::Kdf, || session_keys(&sr_p, noisy_bits))
            .map_err(|_| AbortReason::LocalFault)?;
        let ad_bytes = req.aead_ad_bytes();
        let authentic = log.measure(Primitive::AeadEnc, || {
            crypto::verify_by_reencrypt(&keys.mk, REQUEST_NONCE, &ad_bytes, &[RoleFlag::AuthReq as u8], &req.alpha, &req.tag)
        });
        if !authentic {
            sr_p.zeroize();
            return Err(AbortReason::TagMismatch);
        }
        if req.ad.delta1[..] != req.noisy_payload[..self.delta1_len()] {
            sr_p.zeroize();
            return Err(AbortReason::Malformed);
        }

        let prover_noisy = xor(&req.noisy_payload, keys.request_mask.as_bytes());
        if let Err(reason) = self.classify(log, &prover_noisy, &record.label) {
            sr_p.zeroize();
            return Err(reason);
        }
        let sr_p_next = xor(&req.ad.delta2, &sr_p);
        let geometry = self.puf.geometry();
        let c_next = log.measure(Primitive::Hash, || puf_sim::derive_next_challenge(&record.c_i, &keys.mk, geometry));
        let (noisy, sr_v_next) = log
            .measure(Primitive::Dpuf, || self.evaluate(&c_next))
            .map_err(|_| AbortReason::LocalFault)?;

        let noisy_payload = xor(&noisy, keys.response_mask.as_bytes());
        let ad = AssociatedData {
            dev_id: record.local_id,
            delta1: noisy_payload[..self.delta1_len()].to_vec(),
            delta2: xor(&sr_p, &sr_v_next),
        };
        let ad_bytes = wire::aead_ad_bytes(RoleFlag::AuthOk, &ad, &noisy_payload);
        let sealed = log.measure(Primitive::AeadEnc, || {
            crypto::aead_encrypt(&keys.mk, RESPONSE_NONCE, &ad_bytes, &[RoleFlag::AuthOk as u8])
        });
        let local_next = log.measure(Primitive::Hash, || record.local_id.advance(&keys.mk));
        for s in [&sr_p, &sr_v_next, &noisy, &keys.mk.as_bytes().to_vec()] {
            self.remember(s);
        }

        let stored = self.nvm.peers.get_mut(&record.label).expect("record exists");
        stored.c_i = c_next;
        stored.delta = xor(&sr_p_next, &sr_v_next);
        stored.prev_peer_id = Some(record.peer_id);
        stored.peer_id = record.peer_id.advance(&keys.mk);
        stored.local_id = local_next;
        sr_p.zeroize();

        Ok((
            AuthMessage {
                role: RoleFlag::AuthOk,
                ad,
                noisy_payload,
                alpha: sealed.ciphertext,
                tag: sealed.tag.to_vec(),
            },
            keys.mk,
        ))
    }

    /// Step 3: check `M₂` and commit. The returned log covers the whole
    /// session on this side.
    pub fn auth_finalize(&mut self, mut pending: PendingSession, resp: &AuthResponse) -> (SessionOutcome, OpLog) {
        self.busy.remove(&pending.peer);
        let result = self.finalize_inner(&mut pending, resp);
        let log = std::mem::take(&mut pending.log);
        match result {
            Ok(()) => (SessionOutcome::Success { mk: pending.mk.clone() }, log),
            Err(reason) => (SessionOutcome::Abort(reason), log),
        }
    }

    pub fn auth_finalize_bytes(&mut self, pending: PendingSession, bytes: &[u8]) -> (SessionOutcome, OpLog) {
        match AuthMessage::decode(bytes) {
            Ok(msg) if msg.role == RoleFlag::AuthOk => self.auth_finalize(pending, &msg),
            _ => self.auth_abort(pending, AbortReason::Malformed),
        }
    }

    /// Drop a pending session without touching NVM.
    pub fn auth_abort(&mut self, mut pending: PendingSession, reason: AbortReason) -> (SessionOutcome, OpLog) {
        self.busy.remove(&pending.peer);
        (SessionOutcome::Abort(reason), std::mem::take(&mut pending.log))
    }

    pub fn auth_timeout(&mut self, pending: PendingSession) -> (SessionOutcome, OpLog) {
        self.auth_abort(pending, AbortReason::Timeout)
    }

    fn finalize_inner(&mut self, pending: &mut PendingSession, resp: &AuthResponse) -> Result<(), AbortReason> {
        if resp.role != RoleFlag::AuthOk || !self.well_formed(resp) {
            return Err(AbortReason::Malformed);
        }
        let record = self.nvm.peers.get(&pending.peer).ok_or(AbortReason::UnknownPeer)?.clone();
        if resp.ad.dev_id != record.peer_id {
            return Err(AbortReason::UnknownPeer);
        }
        let ad_bytes = resp.aead_ad_bytes();
        let mk = pending.mk.clone();
        let authentic = pending.log.measure(Primitive::AeadEnc, || {
            crypto::verify_by_reencrypt(&mk, RESPONSE_NONCE, &ad_bytes, &[RoleFlag::AuthOk as u8], &resp.alpha, &resp.tag)
        });
        if !authentic {
            return Err(AbortReason::TagMismatch);
        }
        if resp.ad.delta1[..] != resp.noisy_payload[..self.delta1_len()] {
            return Err(AbortReason::Malformed);
        }
        let verifier_noisy = xor(&resp.noisy_payload, pending.response_mask.as_bytes());
        self.classify(&mut pending.log, &verifier_noisy, &record.label)?;
        let sr_v_next = xor(&resp.ad.delta2, &pending.sr_current);
        let local_next = pending.log.measure(Primitive::Hash, || record.local_id.advance(&mk));
        self.remember(&sr_v_next);

        let stored = self.nvm.peers.get_mut(&pending.peer).expect("record exists");
        stored.c_i = pending.c_next;
        stored.delta = xor(&pending.sr_next, &sr_v_next);
        stored.prev_peer_id = Some(record.peer_id);
        stored.peer_id = record.peer_id.advance(&mk);
        stored.local_id = local_next;
        Ok(())
    }
}

/// Enroll every pair of a group over a trusted channel, then close
/// enrollment on all members. Each device ends with one model over all
/// labels and one record per other member.
pub fn enroll_group(devices: &mut [Device]) -> Result<(), ProtocolError> {
    if devices.len() < 2 {
        return Err(ProtocolError::BadEnrollment(format!(
            "a group needs at least 2 devices, got {}",
            devices.len()
        )));
    }
    for i in 0..devices.len() {
        for j in i + 1..devices.len() {
            let (left, right) = devices.split_at_mut(j);
            enroll_pair(&mut left[i], &mut right[0])?;
        }
    }
    devices.iter_mut().try_for_each(Device::close_enrollment)
}

/// `M₀` and its answer, without closing enrollment.
pub fn enroll_pair(prover: &mut Device, verifier: &mut Device) -> Result<(), ProtocolError> {
    let req = prover.enroll_initiate()?;
    let resp = verifier.enroll_respond(&req)?;
    prover.enroll_finalize(&resp)
}

/// Borrow two distinct elements mutably.
pub fn pair_mut<T>(items: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b, "indices must differ");
    if a < b {
        let (left, right) = items.split_at_mut(b);
        (&mut left[a], &mut right[0])
    } else {
        let (left, right) = items.split_at_mut(a);
        (&mut right[0], &mut left[b])
    }
}

/// Seeded device from a PUF seed, for scenarios and tests.
pub fn provision_simulated(
    label: &str,
    puf_seed: u64,
    puf_cfg: &puf_sim::PufConfig,
    cfg: &ProtocolConfig,
    rng_seed: u64,
) -> Result<Device, ProtocolError> {
    let puf = DpufDevice::new(puf_seed, puf_cfg)?;
    Device::provision(DeviceLabel(label.to_string()), puf, cfg.clone(), rng_seed)
}
