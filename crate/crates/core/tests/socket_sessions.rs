use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use phenoauth::metrics::{timing_report, COMPLETED_SESSION};
use phenoauth::protocol::session::run_session;
use phenoauth::protocol::{
    enroll_group, provision_simulated, AbortReason, AuthMessage, Device, EnrollMessage, MsgType, ProtocolConfig,
    SessionOutcome,
};
use phenoauth::puf_sim::PufConfig;
use phenoauth::transport::{open_socket_transport, read_frame, Action, Channel, Direction, MemoryChannel};

fn enrolled_pair(seed: u64) -> (Device, Device) {
    let puf = PufConfig::default();
    let cfg = ProtocolConfig::default();
    let mut devs: Vec<Device> = ["alice", "bob"]
        .iter()
        .enumerate()
        .map(|(i, n)| provision_simulated(n, seed + i as u64, &puf, &cfg, seed + 10 + i as u64).unwrap())
        .collect();
    enroll_group(&mut devs).unwrap();
    let b = devs.pop().unwrap();
    (devs.pop().unwrap(), b)
}

fn shared_pair() -> (Device, Device) {
    static PAIR: OnceLock<(Device, Device)> = OnceLock::new();
    PAIR.get_or_init(|| enrolled_pair(40)).clone()
}

#[test]
fn every_message_type_survives_the_socket() {
    let puf = PufConfig::default();
    let cfg = ProtocolConfig::default();
    let mut a = provision_simulated("a", 1, &puf, &cfg, 2).unwrap();
    let mut b = provision_simulated("b", 3, &puf, &cfg, 4).unwrap();
    let req = a.enroll_initiate().unwrap();
    let resp = b.enroll_respond(&req).unwrap();
    a.enroll_finalize(&resp).unwrap();
    a.close_enrollment().unwrap();
    b.close_enrollment().unwrap();
    let (m1, pending) = a.auth_initiate(b.label()).unwrap();
    let m2 = b.auth_respond(&m1).response.unwrap();
    drop(pending);

    let mut ch = open_socket_transport("127.0.0.1:0").unwrap();
    let messages = [
        req.encode(MsgType::EnrollReq),
        resp.encode(MsgType::EnrollResp),
        m1.encode(),
        m2.encode(),
    ];
    for (i, bytes) in messages.iter().enumerate() {
        let dir = if i % 2 == 0 { Direction::ToVerifier } else { Direction::ToProver };
        ch.send(dir, bytes).unwrap();
        assert_eq!(ch.recv(dir).unwrap().as_ref(), Some(bytes));
    }
    assert_eq!(EnrollMessage::decode(&messages[0]).unwrap().1, req);
    assert_eq!(AuthMessage::decode(&messages[3]).unwrap(), m2);
}

#[test]
fn sessions_over_a_socket() {
    let (mut a, mut b) = shared_pair();
    let mut ch = open_socket_transport("127.0.0.1:0").unwrap();
    for _ in 0..3 {
        let rec = run_session(&mut a, &mut b, &mut ch).unwrap();
        assert!(rec.both_succeeded(), "{rec:?}");
        assert_eq!(rec.prover_log.snapshot(), COMPLETED_SESSION);
    }
    assert_eq!(ch.transcript().events().len(), 6);
}

#[test]
fn concurrent_pairs_on_distinct_ports() {
    let handles: Vec<_> = (0..2)
        .map(|k| {
            let (mut a, mut b) = if k == 0 { shared_pair() } else { enrolled_pair(90) };
            thread::spawn(move || {
                let mut ch = open_socket_transport("127.0.0.1:0").unwrap();
                let port = ch.local_addr().unwrap().port();
                let ok = (0..5).all(|_| run_session(&mut a, &mut b, &mut ch).unwrap().both_succeeded());
                (port, ok)
            })
        })
        .collect();
    let results: Vec<(u16, bool)> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_ne!(results[0].0, results[1].0);
    assert!(results.iter().all(|r| r.1));
}

#[test]
fn malformed_frames_are_errors() {
    let mut ch = open_socket_transport("127.0.0.1:0")
        .unwrap()
        .with_step_time(Duration::from_millis(20));
    ch.send_raw(Direction::ToVerifier, &[5, 0, 0, 0, 1, 2]).unwrap();
    assert!(ch.recv(Direction::ToVerifier).unwrap().is_none() || ch.recv(Direction::ToVerifier).is_err());

    let mut garbage = &[0xff, 0xff, 0xff, 0xff, 1][..];
    assert!(read_frame(&mut garbage).is_err());

    let (mut a, mut b) = shared_pair();
    let mut ch = open_socket_transport("127.0.0.1:0").unwrap();
    ch.send(Direction::ToVerifier, b"PHA1 not really").unwrap();
    let bytes = ch.recv(Direction::ToVerifier).unwrap().unwrap();
    assert_eq!(b.auth_respond_bytes(&bytes).outcome, SessionOutcome::Abort(AbortReason::Malformed));
    assert!(run_session(&mut a, &mut b, &mut ch).unwrap().both_succeeded());
}

#[test]
fn flipped_bit_in_transit_aborts() {
    let (mut a, mut b) = shared_pair();
    let mut ch = open_socket_transport("127.0.0.1:0")
        .unwrap()
        .with_step_time(Duration::from_millis(20))
        .with_interposer(|_: u64, d: Direction, bytes: &[u8]| {
            if d == Direction::ToVerifier {
                let mut v = bytes.to_vec();
                v[200] ^= 0x10;
                Action::Replace(v)
            } else {
                Action::Deliver
            }
        });
    let rec = run_session(&mut a, &mut b, &mut ch).unwrap();
    assert_eq!(rec.verifier, Some(SessionOutcome::Abort(AbortReason::TagMismatch)));
    assert_eq!(rec.prover, SessionOutcome::Abort(AbortReason::Timeout));
}

#[test]
fn memory_runs_replay_identically() {
    let run = || {
        let (mut a, mut b) = shared_pair();
        a.reseed(5);
        b.reseed(6);
        let mut ch = MemoryChannel::honest();
        for _ in 0..3 {
            run_session(&mut a, &mut b, &mut ch).unwrap();
        }
        ch.into_transcript()
    };
    assert_eq!(run(), run());
}

#[test]
fn timing_report_counts_are_deterministic() {
    let report = || {
        let (mut a, mut b) = shared_pair();
        let logs: Vec<_> = (0..5)
            .flat_map(|_| {
                let rec = run_session(&mut a, &mut b, &mut MemoryChannel::honest()).unwrap();
                [rec.prover_log, rec.verifier_log.unwrap()]
            })
            .collect();
        timing_report(&logs)
    };
    let (x, y) = (report(), report());
    let counts = |r: &phenoauth::metrics::TimingReport| r.rows.iter().map(|row| (row.primitive, row.count)).collect::<Vec<_>>();
    assert_eq!(counts(&x), counts(&y));
    assert_eq!(counts(&x), vec![("DPUF", 20), ("H", 20), ("AEAD.Enc", 20), ("DPAN", 10), ("KDF", 10)]);
    assert!(x.rows.iter().all(|r| r.total_us > 0.0));
}
