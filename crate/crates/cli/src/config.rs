use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use phenoauth::phenotype::ReliabilityParams;
use phenoauth::protocol::ProtocolConfig;
use phenoauth::puf_sim::{EnvGrid, PufConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Memory,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PufSection {
    pub cell_count: usize,
    pub f_super: f64,
    pub env_sensitivity: f64,
    pub signature_amplitude: f64,
}

impl Default for PufSection {
    fn default() -> Self {
        let d = PufConfig::default();
        Self {
            cell_count: d.cell_count,
            f_super: d.f_super,
            env_sensitivity: d.env_sensitivity,
            signature_amplitude: d.signature_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub temperatures: Vec<f64>,
    pub voltages: Vec<f64>,
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = EnvGrid::default();
        Self {
            temperatures: d.temperatures,
            voltages: d.voltages,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSection {
    pub width: usize,
    pub height: usize,
}

impl Default for ImageSection {
    fn default() -> Self {
        let d = PufConfig::default();
        Self {
            width: d.image_width,
            height: d.image_height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSection {
    /// Honest sessions per `auth` and `bench` run.
    pub sessions: usize,
    /// Trials per MU strategy.
    pub mu: usize,
    /// Trials per IND distinguisher.
    pub ind: usize,
    /// Sessions in the pseudonym chain check.
    pub chain: usize,
}

impl Default for TrialSection {
    fn default() -> Self {
        Self {
            sessions: 100,
            mu: 1000,
            ind: 2000,
            chain: 20,
        }
    }
}

/// One scenario. Every random choice flows from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub devices: usize,
    /// Stable response length in bits.
    pub l: usize,
    /// Optional; must equal `1 - t_e` when both are given.
    pub t_stable: Option<f64>,
    pub t_e: f64,
    /// Reads per cell per environment point during reliability analysis.
    pub r: u32,
    pub enroll_challenges: usize,
    pub puf: PufSection,
    pub env: EnvSection,
    pub image: ImageSection,
    pub trials: TrialSection,
    pub transport: TransportKind,
    pub parallel: bool,
    pub out: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            seed: 1,
            devices: 3,
            l: p.l,
            t_stable: None,
            t_e: p.reliability.error_threshold,
            r: p.reliability.repeats,
            enroll_challenges: p.enroll_challenges,
            puf: PufSection::default(),
            env: EnvSection::default(),
            image: ImageSection::default(),
            trials: TrialSection::default(),
            transport: TransportKind::Memory,
            parallel: false,
            out: PathBuf::from("phenoauth-out"),
        }
    }
}

/// Per-device seeds drawn from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceSeeds {
    pub puf: u64,
    pub rng: u64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing scenario config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices < 2 {
            bail!("devices = {}: a group needs at least 2 devices", self.devices);
        }
        if self.l == 0 || !self.l.is_multiple_of(8) {
            bail!("l = {} must be a positive multiple of 8", self.l);
        }
        if !(self.t_e > 0.0 && self.t_e < 0.5) {
            bail!("t_e = {} must lie in (0, 0.5)", self.t_e);
        }
        if let Some(t) = self.t_stable {
            if (t - (1.0 - self.t_e)).abs() > 1e-12 {
                bail!("t_stable = {t} disagrees with t_e = {} (expected {})", self.t_e, 1.0 - self.t_e);
            }
        }
        if self.r == 0 {
            bail!("r must be at least 1");
        }
        if self.enroll_challenges == 0 {
            bail!("enroll_challenges must be at least 1");
        }
        if self.env.temperatures.is_empty() || self.env.voltages.is_empty() {
            bail!("env grid must have at least one temperature and one voltage");
        }
        let t = &self.trials;
        if t.sessions == 0 || t.mu == 0 || t.ind == 0 || t.chain == 0 {
            bail!("trial counts must be positive");
        }
        phenoauth::puf_sim::DpufDevice::new(0, &self.puf_config()).context("PUF configuration")?;
        Ok(())
    }

    pub fn puf_config(&self) -> PufConfig {
        PufConfig {
            cell_count: self.puf.cell_count,
            image_width: self.image.width,
            image_height: self.image.height,
            f_super: self.puf.f_super,
            env_sensitivity: self.puf.env_sensitivity,
            signature_amplitude: self.puf.signature_amplitude,
            env: EnvGrid {
                temperatures: self.env.temperatures.clone(),
                voltages: self.env.voltages.clone(),
            },
            ..PufConfig::default()
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            l: self.l,
            enroll_challenges: self.enroll_challenges,
            reliability: ReliabilityParams {
                repeats: self.r,
                error_threshold: self.t_e,
            },
            train_seed: self.seed,
            ..ProtocolConfig::default()
        }
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.devices).map(|i| format!("dev{i}")).collect()
    }

    /// Seeds for each device, then one spare for the adversary's own PUF and
    /// one for the games.
    pub fn seeds(&self) -> (Vec<DeviceSeeds>, u64, u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        let devices = (0..self.devices)
            .map(|_| DeviceSeeds {
                puf: rng.next_u64(),
                rng: rng.next_u64(),
            })
            .collect();
        (devices, rng.next_u64(), rng.next_u64())
    }
}
