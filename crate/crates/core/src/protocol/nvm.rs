//! Non-volatile device state and its on-disk form: one JSON document with
//! base64 binary fields, the model kept in a separate DPAN file referenced
//! by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::authenticator::{ConfidenceThreshold, DpanModel};
use crate::phenotype::{DeviceLabel, StableMap};
use crate::puf_sim::Challenge;

use super::{DeviceId, ProtocolError};

/// Everything a device keeps about one peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRecord {
    pub label: DeviceLabel,
    /// The peer's current pseudonym toward us.
    pub peer_id: DeviceId,
    /// Our current pseudonym toward this peer.
    pub local_id: DeviceId,
    /// The peer's pseudonym before the last committed session.
    pub prev_peer_id: Option<DeviceId>,
    pub c_i: Challenge,
    /// `SR_v ⊕ SR_p` for `c_i`, `l` bits.
    pub delta: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub model: DpanModel,
    pub threshold: ConfidenceThreshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvmState {
    pub label: DeviceLabel,
    /// Pseudonym used during enrollment.
    pub self_id: DeviceId,
    pub peers: BTreeMap<DeviceLabel, PeerRecord>,
    pub model: Option<StoredModel>,
    pub stable_map: StableMap,
}

impl NvmState {
    pub fn new(label: DeviceLabel, self_id: DeviceId, stable_map: StableMap) -> Self {
        Self {
            label,
            self_id,
            peers: BTreeMap::new(),
            model: None,
            stable_map,
        }
    }

    pub fn peer_by_id(&self, id: &DeviceId) -> Option<&PeerRecord> {
        self.peers.values().find(|r| &r.peer_id == id)
    }

    pub fn peer_by_prev_id(&self, id: &DeviceId) -> Option<&PeerRecord> {
        self.peers.values().find(|r| r.prev_peer_id.as_ref() == Some(id))
    }

    /// Every stored byte in a fixed order, for bit-exact comparison and
    /// secret scans.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut field = |bytes: &[u8]| {
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        };
        field(self.label.0.as_bytes());
        field(&self.self_id.0);
        for r in self.peers.values() {
            field(r.label.0.as_bytes());
            field(&r.peer_id.0);
            field(&r.local_id.0);
            field(r.prev_peer_id.as_ref().map_or(&[][..], |p| &p.0));
            field(&r.c_i.to_bytes());
            field(&r.delta);
        }
        field(&stable_map_bytes(&self.stable_map));
        match &self.model {
            Some(m) => field(&m.model.to_bytes(m.threshold)),
            None => field(&[]),
        }
        out
    }

    fn to_document(&self, model_file: Option<String>) -> NvmDocument {
        NvmDocument {
            label: self.label.0.clone(),
            self_id: B64.encode(self.self_id.0),
            peers: self
                .peers
                .values()
                .map(|r| PeerDocument {
                    label: r.label.0.clone(),
                    peer_id: B64.encode(r.peer_id.0),
                    local_id: B64.encode(r.local_id.0),
                    prev_peer_id: r.prev_peer_id.map(|p| B64.encode(p.0)),
                    challenge: B64.encode(r.c_i.to_bytes()),
                    delta: B64.encode(&r.delta),
                })
                .collect(),
            model: model_file,
            stable_map: B64.encode(stable_map_bytes(&self.stable_map)),
        }
    }

    /// The JSON document alone, with the model reference left empty.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document(None)).expect("document serializes")
    }

    /// Write `<stem>.nvm.json` and, when a model exists, `<stem>.dpan` into
    /// `dir`. Returns the JSON path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf, ProtocolError> {
        fs::create_dir_all(dir)?;
        let model_file = self.model.as_ref().map(|m| {
            let name = format!("{stem}.dpan");
            (name.clone(), m.model.to_bytes(m.threshold))
        });
        if let Some((name, bytes)) = &model_file {
            fs::write(dir.join(name), bytes)?;
        }
        let doc = self.to_document(model_file.map(|(n, _)| n));
        let path = dir.join(format!("{stem}.nvm.json"));
        fs::write(&path, serde_json::to_string_pretty(&doc).expect("document serializes"))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let doc: NvmDocument = serde_json::from_slice(&fs::read(path)?).map_err(|e| ProtocolError::Nvm(e.to_string()))?;
        let model = match &doc.model {
            Some(name) => {
                let dir = path.parent().unwrap_or(Path::new("."));
                let (model, threshold) = DpanModel::load(&dir.join(name))?;
                Some(StoredModel { model, threshold })
            }
            None => None,
        };
        let mut peers = BTreeMap::new();
        for p in doc.peers {
            let record = PeerRecord {
                label: DeviceLabel(p.label),
                peer_id: decode_id(&p.peer_id)?,
                local_id: decode_id(&p.local_id)?,
                prev_peer_id: p.prev_peer_id.as_deref().map(decode_id).transpose()?,
                c_i: Challenge::from_bytes(&decode(&p.challenge)?).ok_or_else(|| ProtocolError::Nvm("bad challenge".into()))?,
                delta: decode(&p.delta)?,
            };
            peers.insert(record.label.clone(), record);
        }
        Ok(Self {
            label: DeviceLabel(doc.label),
            self_id: decode_id(&doc.self_id)?,
            peers,
            model,
            stable_map: parse_stable_map(&decode(&doc.stable_map)?)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NvmDocument {
    label: String,
    self_id: String,
    peers: Vec<PeerDocument>,
    model: Option<String>,
    stable_map: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PeerDocument {
    label: String,
    peer_id: String,
    local_id: String,
    prev_peer_id: Option<String>,
    challenge: String,
    delta: String,
}

fn stable_map_bytes(map: &StableMap) -> Vec<u8> {
    map.cells.iter().flat_map(|c| c.to_le_bytes()).collect()
}

fn parse_stable_map(bytes: &[u8]) -> Result<StableMap, ProtocolError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(ProtocolError::Nvm("stable map length".into()));
    }
    Ok(StableMap {
        cells: bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
    })
}

fn decode(s: &str) -> Result<Vec<u8>, ProtocolError> {
    B64.decode(s).map_err(|e| ProtocolError::Nvm(e.to_string()))
}

fn decode_id(s: &str) -> Result<DeviceId, ProtocolError> {
    let bytes = decode(s)?;
    Ok(DeviceId(
        bytes.try_into().map_err(|_| ProtocolError::Nvm("device id must be 32 bytes".into()))?,
    ))
}
