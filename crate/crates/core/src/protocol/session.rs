//! Running one authentication session over a [`Channel`].

use crate::metrics::OpLog;
use crate::transport::{Channel, Direction, TransportError};

use super::{AbortReason, AuthRequest, Device, PendingSession, SessionOutcome};

#[derive(Debug)]
pub struct SessionRecord {
    pub prover: SessionOutcome,
    pub prover_log: OpLog,
    /// `None` when `M₁` never reached the verifier.
    pub verifier: Option<SessionOutcome>,
    pub verifier_log: Option<OpLog>,
    /// The honest messages as first sent.
    pub request: Option<Vec<u8>>,
    pub response: Option<Vec<u8>>,
}

impl SessionRecord {
    pub fn both_succeeded(&self) -> bool {
        self.prover.is_success() && self.verifier.as_ref().is_some_and(SessionOutcome::is_success)
    }

    fn aborted_before_send(reason: AbortReason) -> Self {
        Self {
            prover: SessionOutcome::Abort(reason),
            prover_log: OpLog::default(),
            verifier: None,
            verifier_log: None,
            request: None,
            response: None,
        }
    }
}

/// `prover` authenticates to `verifier`, which it must know by label.
pub fn run_session<C: Channel + ?Sized>(
    prover: &mut Device,
    verifier: &mut Device,
    channel: &mut C,
) -> Result<SessionRecord, TransportError> {
    let peer = verifier.label().clone();
    match prover.auth_initiate(&peer) {
        Ok((m1, pending)) => drive(prover, verifier, pending, &m1, channel),
        Err(reason) => Ok(SessionRecord::aborted_before_send(reason)),
    }
}

/// Carry an initiated session to completion.
pub fn drive<C: Channel + ?Sized>(
    prover: &mut Device,
    verifier: &mut Device,
    pending: PendingSession,
    m1: &AuthRequest,
    channel: &mut C,
) -> Result<SessionRecord, TransportError> {
    let request = m1.encode();
    channel.send(Direction::ToVerifier, &request)?;
    let (verifier_outcome, verifier_log, response) = match channel.recv(Direction::ToVerifier)? {
        Some(bytes) => {
            let responded = verifier.auth_respond_bytes(&bytes);
            let encoded = responded.response.as_ref().map(|m| m.encode());
            if let Some(m2) = &encoded {
                channel.send(Direction::ToProver, m2)?;
            }
            (Some(responded.outcome), Some(responded.log), encoded)
        }
        None => (None, None, None),
    };
    let (prover_outcome, prover_log) = match channel.recv(Direction::ToProver)? {
        Some(bytes) => prover.auth_finalize_bytes(pending, &bytes),
        None => prover.auth_timeout(pending),
    };
    Ok(SessionRecord {
        prover: prover_outcome,
        prover_log,
        verifier: verifier_outcome,
        verifier_log,
        request: Some(request),
        response,
    })
}
