//! Wire encoding. Every message is
//! `"PHA1" ‖ msg_type u8 ‖ role_flag u8 ‖ fields`, each field prefixed by
//! its length as a little-endian `u32`. Integers are little-endian.

use thiserror::Error;

use crate::phenotype::{DatasetItem, DeviceLabel, LabeledDataset, PhenotypeImage};
use crate::puf_sim::{Challenge, EnvParams};

use super::DeviceId;

pub const MAGIC: &[u8; 4] = b"PHA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    EnrollReq = 0,
    EnrollResp = 1,
    AuthReq = 2,
    AuthResp = 3,
}

/// Direction constant carried in every message and used as the AEAD
/// plaintext of authentication messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RoleFlag {
    Enroll = 0x00,
    AuthReq = 0x01,
    AuthOk = 0x02,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("role flag {flag:#04x} not valid for message type {msg_type:?}")]
    BadRole { msg_type: MsgType, flag: u8 },
    #[error("truncated message")]
    Truncated,
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("field {0} malformed")]
    BadField(&'static str),
}

fn push_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_le_bytes());
    out.extend_from_slice(field);
}

fn header(msg_type: MsgType, role: RoleFlag) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.push(msg_type as u8);
    out.push(role as u8);
    out
}

/// Split a message into header and raw fields.
fn parse(bytes: &[u8]) -> Result<(MsgType, u8, Vec<&[u8]>), WireError> {
    if bytes.len() < 6 {
        return Err(WireError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let msg_type = match bytes[4] {
        0 => MsgType::EnrollReq,
        1 => MsgType::EnrollResp,
        2 => MsgType::AuthReq,
        3 => MsgType::AuthResp,
        t => return Err(WireError::UnknownType(t)),
    };
    let role = bytes[5];
    let mut fields = Vec::new();
    let mut rest = &bytes[6..];
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(WireError::Truncated);
        }
        let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(WireError::Truncated);
        }
        fields.push(&rest[..len]);
        rest = &rest[len..];
    }
    Ok((msg_type, role, fields))
}

/// The AD of an authentication message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociatedData {
    pub dev_id: DeviceId,
    /// First `l` bits of `noisy_payload`.
    pub delta1: Vec<u8>,
    pub delta2: Vec<u8>,
}

/// `M₁` (role `AuthReq`) or `M₂` (role `AuthOk`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthMessage {
    pub role: RoleFlag,
    pub ad: AssociatedData,
    pub noisy_payload: Vec<u8>,
    pub alpha: Vec<u8>,
    pub tag: Vec<u8>,
}

impl AuthMessage {
    pub fn msg_type(&self) -> MsgType {
        match self.role {
            RoleFlag::AuthOk => MsgType::AuthResp,
            _ => MsgType::AuthReq,
        }
    }

    /// Bytes bound by the AEAD tag: role flag, AD fields and the masked
    /// noisy payload, each length-prefixed.
    pub fn aead_ad_bytes(&self) -> Vec<u8> {
        aead_ad_bytes(self.role, &self.ad, &self.noisy_payload)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(self.msg_type(), self.role);
        push_field(&mut out, &self.ad.dev_id.0);
        push_field(&mut out, &self.ad.delta1);
        push_field(&mut out, &self.ad.delta2);
        push_field(&mut out, &self.noisy_payload);
        push_field(&mut out, &self.alpha);
        push_field(&mut out, &self.tag);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (msg_type, flag, fields) = parse(bytes)?;
        let role = match (msg_type, flag) {
            (MsgType::AuthReq, 0x01) => RoleFlag::AuthReq,
            (MsgType::AuthResp, 0x02) => RoleFlag::AuthOk,
            (MsgType::AuthReq | MsgType::AuthResp, _) => return Err(WireError::BadRole { msg_type, flag }),
            _ => return Err(WireError::UnknownType(msg_type as u8)),
        };
        if fields.len() != 6 {
            return Err(WireError::FieldCount {
                expected: 6,
                found: fields.len(),
            });
        }
        let dev_id = DeviceId(fields[0].try_into().map_err(|_| WireError::BadField("dev_id"))?);
        Ok(Self {
            role,
            ad: AssociatedData {
                dev_id,
                delta1: fields[1].to_vec(),
                delta2: fields[2].to_vec(),
            },
            noisy_payload: fields[3].to_vec(),
            alpha: fields[4].to_vec(),
            tag: fields[5].to_vec(),
        })
    }
}

pub fn aead_ad_bytes(role: RoleFlag, ad: &AssociatedData, noisy_payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + 16 + 32 + ad.delta1.len() + ad.delta2.len() + noisy_payload.len());
    out.push(role as u8);
    push_field(&mut out, &ad.dev_id.0);
    push_field(&mut out, &ad.delta1);
    push_field(&mut out, &ad.delta2);
    push_field(&mut out, noisy_payload);
    out
}

/// `M₀` (prover → verifier) and the verifier's answer share one shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollMessage {
    pub dev_id: DeviceId,
    pub challenge: Challenge,
    pub stable_response: Vec<u8>,
    pub dataset: LabeledDataset,
}

pub type EnrollRequest = EnrollMessage;
pub type EnrollResponse = EnrollMessage;

impl EnrollMessage {
    pub fn encode(&self, msg_type: MsgType) -> Vec<u8> {
        let mut out = header(msg_type, RoleFlag::Enroll);
        push_field(&mut out, &self.dev_id.0);
        push_field(&mut out, &self.challenge.to_bytes());
        push_field(&mut out, &self.stable_response);
        push_field(&mut out, &encode_dataset(&self.dataset));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(MsgType, Self), WireError> {
        let (msg_type, flag, fields) = parse(bytes)?;
        if !matches!(msg_type, MsgType::EnrollReq | MsgType::EnrollResp) {
            return Err(WireError::UnknownType(msg_type as u8));
        }
        if flag != RoleFlag::Enroll as u8 {
            return Err(WireError::BadRole { msg_type, flag });
        }
        if fields.len() != 4 {
            return Err(WireError::FieldCount {
                expected: 4,
                found: fields.len(),
            });
        }
        Ok((
            msg_type,
            Self {
                dev_id: DeviceId(fields[0].try_into().map_err(|_| WireError::BadField("dev_id"))?),
                challenge: Challenge::from_bytes(fields[1]).ok_or(WireError::BadField("challenge"))?,
                stable_response: fields[2].to_vec(),
                dataset: decode_dataset(fields[3])?,
            },
        ))
    }
}

/// `count u32`, then per item: label (u16 length + UTF-8), temperature
/// index u16, voltage index u16, challenge id u32, read index u32,
/// width u16, height u16, pixels.
pub fn encode_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(ds.items.len() as u32).to_le_bytes());
    for item in &ds.items {
        let label = item.label.0.as_bytes();
        out.extend_from_slice(&(label.len() as u16).to_le_bytes());
        out.extend_from_slice(label);
        out.extend_from_slice(&(item.env.temperature as u16).to_le_bytes());
        out.extend_from_slice(&(item.env.voltage as u16).to_le_bytes());
        out.extend_from_slice(&(item.challenge_id as u32).to_le_bytes());
        out.extend_from_slice(&(item.read_index as u32).to_le_bytes());
        out.extend_from_slice(&(item.image.width as u16).to_le_bytes());
        out.extend_from_slice(&(item.image.height as u16).to_le_bytes());
        out.extend_from_slice(&item.image.pixels);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset, WireError> {
    let bad = || WireError::BadField("dataset");
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], WireError> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(bad)?;
        let out = &bytes[pos..end];
        pos = end;
        Ok(out)
    };
    let u16_at = |b: &[u8]| u16::from_le_bytes(b.try_into().expect("2 bytes")) as usize;
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut items = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16_at(take(2)?);
        let label = std::str::from_utf8(take(len)?).map_err(|_| bad())?.to_string();
        let temperature = u16_at(take(2)?);
        let voltage = u16_at(take(2)?);
        let challenge_id = u32_at(take(4)?);
        let read_index = u32_at(take(4)?);
        let width = u16_at(take(2)?);
        let height = u16_at(take(2)?);
        let pixels = take(width * height)?.to_vec();
        items.push(DatasetItem {
            image: PhenotypeImage { width, height, pixels },
            label: DeviceLabel(label),
            env: EnvParams::new(temperature, voltage),
            challenge_id,
            read_index,
        });
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(LabeledDataset { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> AuthMessage {
        AuthMessage {
            role: RoleFlag::AuthReq,
            ad: AssociatedData {
                dev_id: DeviceId([7; 32]),
                delta1: vec![1; 32],
                delta2: vec![2; 32],
            },
            noisy_payload: vec![1; 64],
            alpha: vec![9],
            tag: vec![3; 16],
        }
    }

    #[test]
    fn auth_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"PHA1");
        assert_eq!(bytes[4], 2);
        assert_eq!(bytes[5], 0x01);
        assert_eq!(&bytes[6..10], &32u32.to_le_bytes());
        assert_eq!(&bytes[10..42], &[7; 32]);
        assert_eq!(bytes.len(), 6 + 6 * 4 + 32 + 32 + 32 + 64 + 1 + 16);
        assert_eq!(AuthMessage::decode(&bytes).unwrap(), sample());
    }

    #[test]
    fn malformed_auth_messages() {
        let bytes = sample().encode();
        assert_eq!(AuthMessage::decode(&bytes[..3]), Err(WireError::Truncated));
        assert_eq!(AuthMessage::decode(&bytes[..bytes.len() - 1]), Err(WireError::Truncated));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(AuthMessage::decode(&bad), Err(WireError::BadMagic));
        let mut bad = bytes.clone();
        bad[5] = 0x02;
        assert!(matches!(AuthMessage::decode(&bad), Err(WireError::BadRole { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(AuthMessage::decode(&bad), Err(WireError::UnknownType(9)));
        let mut raw = header(MsgType::AuthReq, RoleFlag::AuthReq);
        push_field(&mut raw, &[1; 31]);
        for _ in 0..5 {
            push_field(&mut raw, &[]);
        }
        assert_eq!(AuthMessage::decode(&raw), Err(WireError::BadField("dev_id")));
    }

    #[test]
    fn enroll_round_trip() {
        let msg = EnrollMessage {
            dev_id: DeviceId([1; 32]),
            challenge: Challenge {
                region_start: 512,
                region_len: 32768,
                pattern: 3,
                session_index: 0,
            },
            stable_response: vec![0xab; 32],
            dataset: LabeledDataset {
                items: vec![DatasetItem {
                    image: PhenotypeImage {
                        width: 2,
                        height: 1,
                        pixels: vec![5, 6],
                    },
                    label: "x".into(),
                    env: EnvParams::new(2, 1),
                    challenge_id: 4,
                    read_index: 1,
                }],
            },
        };
        let bytes = msg.encode(MsgType::EnrollReq);
        assert_eq!(bytes[5], 0x00);
        assert_eq!(EnrollMessage::decode(&bytes).unwrap(), (MsgType::EnrollReq, msg.clone()));
        assert!(AuthMessage::decode(&bytes).is_err());
        assert!(EnrollMessage::decode(&sample().encode()).is_err());
    }

    proptest! {
        #[test]
        fn decoding_arbitrary_bytes_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = AuthMessage::decode(&bytes);
            let _ = EnrollMessage::decode(&bytes);
        }

        #[test]
        fn auth_round_trip(
            id in any::<[u8; 32]>(),
            d1 in proptest::collection::vec(any::<u8>(), 0..40),
            payload in proptest::collection::vec(any::<u8>(), 0..200),
            tag in proptest::collection::vec(any::<u8>(), 16),
            ok in any::<bool>(),
        ) {
            let msg = AuthMessage {
                role: if ok { RoleFlag::AuthOk } else { RoleFlag::AuthReq },
                ad: AssociatedData { dev_id: DeviceId(id), delta1: d1.clone(), delta2: d1 },
                noisy_payload: payload,
                alpha: vec![1],
                tag,
            };
            prop_assert_eq!(AuthMessage::decode(&msg.encode()).unwrap(), msg);
        }
    }
}
