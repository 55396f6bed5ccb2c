//! Statistical DRAM PUF simulator.
//!
//! Each cell has a nominal probability of reading 1 when accessed in the
//! reduced-timing ("noisy read") mode. Three ingredients shape it:
//!
//! * a bias mixture: exactly `ceil(f_super * cells)` super-stable cells
//!   whose probabilities sit within `1e-5` of 0 or 1, and a body drawn from
//!   a symmetric `Beta(a, a)` rescaled into `[body_floor, 1 - body_floor]`,
//! * a per-device bitline signature: a low-frequency profile over the
//!   columns of a DRAM row that skews which polarity cells lean towards,
//! * an environmental shift in logit space, linear in temperature and
//!   voltage with per-cell sensitivities.
//!
//! Everything is a pure function of the device seed; reads take an explicit
//! RNG so whole runs replay bit-exactly.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, SymmetricKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PufError {
    #[error("bad PUF configuration: {0}")]
    BadConfig(String),
    #[error("cells [{start}, {end}) outside a device of {cell_count} cells")]
    OutOfRange {
        start: u64,
        end: u64,
        cell_count: usize,
    },
    #[error("environment index ({temperature}, {voltage}) outside the configured grid")]
    BadEnv { temperature: usize, voltage: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvGrid {
    /// Degrees Celsius.
    pub temperatures: Vec<f64>,
    /// Volts.
    pub voltages: Vec<f64>,
}

impl Default for EnvGrid {
    fn default() -> Self {
        Self {
            temperatures: vec![20.0, 40.0, 60.0],
            voltages: vec![1.45, 1.55],
        }
    }
}

impl EnvGrid {
    pub fn len(&self) -> usize {
        self.temperatures.len() * self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All grid points, temperature-major.
    pub fn points(&self) -> Vec<EnvParams> {
        let mut out = Vec::with_capacity(self.len());
        for t in 0..self.temperatures.len() {
            for v in 0..self.voltages.len() {
                out.push(EnvParams {
                    temperature: t,
                    voltage: v,
                });
            }
        }
        out
    }

    pub fn conditions(&self, env: EnvParams) -> Result<Conditions, PufError> {
        match (
            self.temperatures.get(env.temperature),
            self.voltages.get(env.voltage),
        ) {
            (Some(&t), Some(&v)) => Ok(Conditions {
                temperature_c: t,
                voltage_v: v,
            }),
            _ => Err(PufError::BadEnv {
                temperature: env.temperature,
                voltage: env.voltage,
            }),
        }
    }

    fn flat_index(&self, env: EnvParams) -> Result<usize, PufError> {
        self.conditions(env)?;
        Ok(env.temperature * self.voltages.len() + env.voltage)
    }

    /// Map a physical condition onto `[-1, 1]` per axis, grid extremes at ±1.
    fn normalized(&self, c: Conditions) -> (f64, f64) {
        fn axis(values: &[f64], x: f64) -> f64 {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (2.0 * (x - (lo + hi) / 2.0) / (hi - lo)).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        }
        (
            axis(&self.temperatures, c.temperature_c),
            axis(&self.voltages, c.voltage_v),
        )
    }

    fn nominal(&self) -> Conditions {
        let mid = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo + hi) / 2.0
        };
        Conditions {
            temperature_c: mid(&self.temperatures),
            voltage_v: mid(&self.voltages),
        }
    }
}

/// Indices into the configured [`EnvGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvParams {
    pub temperature: usize,
    pub voltage: usize,
}

impl EnvParams {
    pub const fn new(temperature: usize, voltage: usize) -> Self {
        Self {
            temperature,
            voltage,
        }
    }
}

/// Physical operating point, for reads off the configured grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditions {
    pub temperature_c: f64,
    pub voltage_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PufConfig {
    pub cell_count: usize,
    /// Phenotype image width in pixels; a DRAM row holds `8 * width` cells.
    pub image_width: usize,
    pub image_height: usize,
    pub f_super: f64,
    pub beta_shape: f64,
    pub body_floor: f64,
    /// Range of |logit| for super-stable cells.
    pub super_logit_min: f64,
    pub super_logit_max: f64,
    /// Largest logit shift the environment can apply to any cell.
    pub env_sensitivity: f64,
    /// Peak polarity skew of the bitline signature, in `[0, 1)`.
    pub signature_amplitude: f64,
    pub signature_harmonics: usize,
    pub env: EnvGrid,
}

impl Default for PufConfig {
    fn default() -> Self {
        Self {
            cell_count: 1 << 18,
            image_width: 64,
            image_height: 64,
            f_super: 0.0267,
            beta_shape: 0.15,
            body_floor: 0.05,
            super_logit_min: 12.0,
            super_logit_max: 16.0,
            env_sensitivity: 0.5,
            signature_amplitude: 0.6,
            signature_harmonics: 6,
            env: EnvGrid::default(),
        }
    }
}

impl PufConfig {
    pub fn geometry(&self) -> DeviceGeometry {
        DeviceGeometry {
            cell_count: self.cell_count,
            row_bits: 8 * self.image_width,
            region_len: 8 * self.image_width * self.image_height,
        }
    }

    pub fn validate(&self) -> Result<(), PufError> {
        let bad = |m: &str| Err(PufError::BadConfig(m.to_string()));
        if self.cell_count == 0 {
            return bad("zero cells");
        }
        if !(self.f_super > 0.0 && self.f_super <= 1.0) {
            return bad("f_super must lie in (0, 1]");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be nonzero");
        }
        let g = self.geometry();
        if g.region_len >= self.cell_count {
            return bad("device must hold more cells than one challenge region");
        }
        if !(self.beta_shape > 0.0) {
            return bad("beta_shape must be positive");
        }
        if !(0.0..0.5).contains(&self.body_floor) {
            return bad("body_floor must lie in [0, 0.5)");
        }
        if !(self.super_logit_min > 0.0 && self.super_logit_max >= self.super_logit_min) {
            return bad("super logit range must be positive and ordered");
        }
        if !(0.0..1.0).contains(&self.signature_amplitude) {
            return bad("signature_amplitude must lie in [0, 1)");
        }
        if self.env.is_empty() {
            return bad("empty environment grid");
        }
        if self.env_sensitivity < 0.0 {
            return bad("env_sensitivity must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceGeometry {
    pub cell_count: usize,
    pub row_bits: usize,
    pub region_len: usize,
}

impl DeviceGeometry {
    /// Number of row-aligned region start positions.
    pub fn slots(&self) -> u64 {
        ((self.cell_count - self.region_len) / self.row_bits) as u64
    }
}

/// Wire size of [`Challenge::to_bytes`].
pub const CHALLENGE_BYTES: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Challenge {
    pub region_start: u64,
    pub region_len: u32,
    pub pattern: u8,
    pub session_index: u64,
}

impl Challenge {
    /// Fresh challenge from a random source, as at enrollment.
    pub fn random<R: Rng + ?Sized>(geometry: DeviceGeometry, rng: &mut R) -> Self {
        let slot = rng.random_range(0..geometry.slots());
        Self {
            region_start: slot * geometry.row_bits as u64,
            region_len: geometry.region_len as u32,
            pattern: rng.random(),
            session_index: 0,
        }
    }

    /// `start u64 LE ‖ len u32 LE ‖ pattern u8 ‖ index u64 LE`.
    pub fn to_bytes(&self) -> [u8; CHALLENGE_BYTES] {
        let mut out = [0u8; CHALLENGE_BYTES];
        out[..8].copy_from_slice(&self.region_start.to_le_bytes());
        out[8..12].copy_from_slice(&self.region_len.to_le_bytes());
        out[12] = self.pattern;
        out[13..].copy_from_slice(&self.session_index.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != CHALLENGE_BYTES {
            return None;
        }
        Some(Self {
            region_start: u64::from_le_bytes(bytes[..8].try_into().ok()?),
            region_len: u32::from_le_bytes(bytes[8..12].try_into().ok()?),
            pattern: bytes[12],
            session_index: u64::from_le_bytes(bytes[13..].try_into().ok()?),
        })
    }

    pub fn cells(&self) -> std::ops::Range<u64> {
        self.region_start..self.region_start + self.region_len as u64
    }
}

/// `C_{i+1} = H(C_i ‖ mk)`: pattern is digest byte 0, the row-aligned
/// region slot comes from digest bytes 8..16 (little-endian) reduced modulo
/// the slot count.
pub fn derive_next_challenge(c: &Challenge, mk: &SymmetricKey, geometry: DeviceGeometry) -> Challenge {
    let digest = crypto::hash_concat(&[&c.to_bytes(), mk.as_bytes()]);
    let d = digest.as_bytes();
    let offset = u64::from_le_bytes(d[8..16].try_into().expect("8 bytes"));
    Challenge {
        region_start: (offset % geometry.slots()) * geometry.row_bits as u64,
        region_len: geometry.region_len as u32,
        pattern: d[0],
        session_index: c.session_index + 1,
    }
}

/// Raw region readout, packed MSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisyResponse {
    pub bytes: Vec<u8>,
}

impl NoisyResponse {
    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8
    }
}

/// Readout of the stable cells selected for a challenge, packed MSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StableResponse {
    pub bytes: Vec<u8>,
}

impl StableResponse {
    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8
    }
}

/// Cells chosen by reliability analysis. The expected polarity is known
/// only at analysis time; selections rebuilt from stored state carry none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StableChallenge {
    pub cell_indices: Vec<u32>,
    pub expected_polarity: Option<Vec<bool>>,
}

/// Read a bit `k` from an MSB-first packed buffer.
pub fn get_bit(bytes: &[u8], k: usize) -> bool {
    bytes[k / 8] >> (7 - k % 8) & 1 == 1
}

pub fn set_bit(bytes: &mut [u8], k: usize, value: bool) {
    let mask = 1u8 << (7 - k % 8);
    if value {
        bytes[k / 8] |= mask;
    } else {
        bytes[k / 8] &= !mask;
    }
}

#[derive(Debug)]
struct CellModel {
    logit: Vec<f32>,
    temp_sensitivity: Vec<f32>,
    volt_sensitivity: Vec<f32>,
    super_stable: Vec<bool>,
    signature: Vec<f32>,
    /// Per grid point, per cell: P(read 1) scaled to `u32`.
    thresholds: Vec<Vec<u32>>,
}

/// One simulated DRAM PUF. Immutable after construction; clones share the
/// cell model.
#[derive(Debug, Clone)]
pub struct DpufDevice {
    seed: u64,
    config: PufConfig,
    cells: Arc<CellModel>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn threshold(p: f64) -> u32 {
    let scaled = (p * 4_294_967_296.0).round();
    if scaled >= u32::MAX as f64 {
        u32::MAX
    } else if scaled <= 0.0 {
        0
    } else {
        scaled as u32
    }
}

#[inline]
fn draw(rng: &mut (impl RngCore + ?Sized), thr: u32) -> bool {
    // u32::MAX encodes certainty.
    thr == u32::MAX || rng.next_u32() < thr
}

impl DpufDevice {
    pub fn new(device_seed: u64, config: &PufConfig) -> Result<Self, PufError> {
        config.validate()?;
        let n = config.cell_count;
        let row_bits = config.geometry().row_bits;
        let mut rng = ChaCha20Rng::seed_from_u64(device_seed);

        let signature = signature_profile(&mut rng, row_bits, config);

        let super_count = ((config.f_super * n as f64).ceil() as usize).min(n);
        let mut super_stable = vec![false; n];
        for i in index::sample(&mut rng, n, super_count) {
            super_stable[i] = true;
        }

        let body = Beta::new(config.beta_shape, config.beta_shape)
            .map_err(|e| PufError::BadConfig(e.to_string()))?;
        let mut logits = Vec::with_capacity(n);
        let mut kt = Vec::with_capacity(n);
        let mut kv = Vec::with_capacity(n);
        for (cell, &is_super) in super_stable.iter().enumerate() {
            let magnitude = if is_super {
                rng.random_range(config.super_logit_min..=config.super_logit_max)
            } else {
                let x: f64 = body.sample(&mut rng);
                let p = config.body_floor + (1.0 - 2.0 * config.body_floor) * x;
                logit(p.max(1.0 - p))
            };
            let skew = signature[cell % row_bits] as f64;
            let leans_one = rng.random::<f64>() < (1.0 + skew) / 2.0;
            logits.push(if leans_one { magnitude } else { -magnitude } as f32);
            kt.push(rng.random_range(-1.0f32..=1.0));
            kv.push(rng.random_range(-1.0f32..=1.0));
        }

        Ok(Self::assemble(device_seed, config, logits, kt, kv, super_stable, signature))
    }

    /// Device with explicit nominal biases and no environmental sensitivity.
    pub fn from_biases(biases: &[f64], config: &PufConfig) -> Result<Self, PufError> {
        let mut config = config.clone();
        config.cell_count = biases.len();
        config.validate()?;
        let logits: Vec<f32> = biases.iter().map(|&p| logit(p.clamp(0.0, 1.0)) as f32).collect();
        let super_stable = biases.iter().map(|&p| !(0.01..=0.99).contains(&p)).collect();
        let zeros = vec![0.0f32; biases.len()];
        let signature = vec![0.0f32; config.geometry().row_bits];
        Ok(Self::assemble(0, &config, logits, zeros.clone(), zeros, super_stable, signature))
    }

    fn assemble(
        seed: u64,
        config: &PufConfig,
        logit: Vec<f32>,
        temp_sensitivity: Vec<f32>,
        volt_sensitivity: Vec<f32>,
        super_stable: Vec<bool>,
        signature: Vec<f32>,
    ) -> Self {
        let mut cells = CellModel {
            logit,
            temp_sensitivity,
            volt_sensitivity,
            super_stable,
            signature,
            thresholds: Vec::new(),
        };
        let grid = &config.env;
        let mut thresholds = Vec::with_capacity(grid.len());
        for env in grid.points() {
            let c = grid.conditions(env).expect("grid point");
            let (t, v) = grid.normalized(c);
            thresholds.push(
                (0..cells.logit.len())
                    .map(|i| threshold(cell_probability(&cells, config.env_sensitivity, i, t, v)))
                    .collect(),
            );
        }
        cells.thresholds = thresholds;
        Self {
            seed,
            config: config.clone(),
            cells: Arc::new(cells),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &PufConfig {
        &self.config
    }

    pub fn geometry(&self) -> DeviceGeometry {
        self.config.geometry()
    }

    pub fn cell_count(&self) -> usize {
        self.config.cell_count
    }

    fn check_range(&self, start: u64, len: u64) -> Result<(), PufError> {
        let end = start.saturating_add(len);
        if end > self.cell_count() as u64 {
            return Err(PufError::OutOfRange {
                start,
                end,
                cell_count: self.cell_count(),
            });
        }
        Ok(())
    }

    fn grid_thresholds(&self, env: EnvParams) -> Result<&[u32], PufError> {
        let i = self.config.env.flat_index(env)?;
        Ok(&self.cells.thresholds[i])
    }

    /// One noisy read of a challenge region.
    pub fn read<R: RngCore + ?Sized>(
        &self,
        challenge: &Challenge,
        env: EnvParams,
        rng: &mut R,
    ) -> Result<NoisyResponse, PufError> {
        self.check_range(challenge.region_start, challenge.region_len as u64)?;
        let thr = self.grid_thresholds(env)?;
        let start = challenge.region_start as usize;
        let cells = &thr[start..start + challenge.region_len as usize];
        Ok(NoisyResponse {
            bytes: pack(cells.iter().map(|&t| draw(rng, t))),
        })
    }

    /// Noisy read at an arbitrary operating point.
    pub fn read_at<R: RngCore + ?Sized>(
        &self,
        challenge: &Challenge,
        conditions: Conditions,
        rng: &mut R,
    ) -> Result<NoisyResponse, PufError> {
        self.check_range(challenge.region_start, challenge.region_len as u64)?;
        let (t, v) = self.config.env.normalized(conditions);
        let start = challenge.region_start as usize;
        let end = start + challenge.region_len as usize;
        Ok(NoisyResponse {
            bytes: pack((start..end).map(|i| {
                draw(
                    rng,
                    threshold(cell_probability(&self.cells, self.config.env_sensitivity, i, t, v)),
                )
            })),
        })
    }

    /// Raw read of the stable cells; bit `j` is cell `sc.cell_indices[j]`.
    pub fn read_stable<R: RngCore + ?Sized>(
        &self,
        sc: &StableChallenge,
        env: EnvParams,
        rng: &mut R,
    ) -> Result<StableResponse, PufError> {
        let n = self.cell_count() as u64;
        if let Some(&bad) = sc.cell_indices.iter().find(|&&i| i as u64 >= n) {
            return Err(PufError::OutOfRange {
                start: bad as u64,
                end: bad as u64 + 1,
                cell_count: self.cell_count(),
            });
        }
        let thr = self.grid_thresholds(env)?;
        Ok(StableResponse {
            bytes: pack(sc.cell_indices.iter().map(|&i| draw(rng, thr[i as usize]))),
        })
    }

    /// Hamming weight of `repeats` reads of each cell in `cells`.
    ///
    /// `repeats` independent Bernoulli reads sum to a Binomial draw, which is
    /// what this samples.
    pub fn hamming_weights<R: Rng + ?Sized>(
        &self,
        cells: std::ops::Range<u64>,
        env: EnvParams,
        repeats: u32,
        rng: &mut R,
    ) -> Result<Vec<u32>, PufError> {
        self.check_range(cells.start, cells.end.saturating_sub(cells.start))?;
        let thr = self.grid_thresholds(env)?;
        let scale = 4_294_967_296.0;
        Ok(thr[cells.start as usize..cells.end as usize]
            .iter()
            .map(|&t| {
                if t == u32::MAX {
                    repeats
                } else if t == 0 {
                    0
                } else {
                    Binomial::new(repeats as u64, t as f64 / scale)
                        .expect("probability in (0, 1)")
                        .sample(rng) as u32
                }
            })
            .collect())
    }

    /// Ground truth: P(read 1) for `cell` at a grid point.
    pub fn bias(&self, cell: usize, env: EnvParams) -> f64 {
        let c = self.config.env.conditions(env).expect("grid point");
        self.bias_at(cell, c)
    }

    pub fn bias_at(&self, cell: usize, conditions: Conditions) -> f64 {
        let (t, v) = self.config.env.normalized(conditions);
        cell_probability(&self.cells, self.config.env_sensitivity, cell, t, v)
    }

    pub fn nominal_bias(&self, cell: usize) -> f64 {
        self.bias_at(cell, self.config.env.nominal())
    }

    /// Ground truth: worst-case `max(p, 1 - p)` over the configured grid.
    pub fn min_reliability(&self, cell: usize) -> f64 {
        self.config
            .env
            .points()
            .into_iter()
            .map(|e| {
                let p = self.bias(cell, e);
                p.max(1.0 - p)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_super_stable(&self, cell: usize) -> bool {
        self.cells.super_stable[cell]
    }

    /// Majority value of each cell of the region at nominal conditions.
    pub fn nominal_majority(&self, challenge: &Challenge) -> Result<Vec<u8>, PufError> {
        self.check_range(challenge.region_start, challenge.region_len as u64)?;
        Ok(pack(challenge.cells().map(|i| self.cells.logit[i as usize] >= 0.0)))
    }

    /// The bitline signature profile, one value per column of a row.
    pub fn signature(&self) -> &[f32] {
        &self.cells.signature
    }
}

fn cell_probability(cells: &CellModel, sensitivity: f64, i: usize, t: f64, v: f64) -> f64 {
    let shift =
        sensitivity * (cells.temp_sensitivity[i] as f64 * t + cells.volt_sensitivity[i] as f64 * v) / 2.0;
    sigmoid(cells.logit[i] as f64 + shift)
}

/// Sum of random-phase cosines over the row, harmonics 1..=k, scaled so the
/// peak magnitude equals the configured amplitude.
fn signature_profile<R: Rng + ?Sized>(rng: &mut R, row_bits: usize, config: &PufConfig) -> Vec<f32> {
    if config.signature_harmonics == 0 || config.signature_amplitude == 0.0 {
        return vec![0.0; row_bits];
    }
    let comps: Vec<(f64, f64, f64)> = (1..=config.signature_harmonics)
        .map(|h| (h as f64, rng.random_range(0.3..1.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let raw: Vec<f64> = (0..row_bits)
        .map(|col| {
            let x = col as f64 / row_bits as f64;
            comps.iter().map(|&(f, a, phi)| a * (2.0 * PI * f * x + phi).cos()).sum()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    raw.into_iter()
        .map(|v| (config.signature_amplitude * v / peak) as f32)
        .collect()
}

/// Pack bits MSB-first into bytes.
pub fn pack(bits: impl Iterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut acc = 0u8;
    let mut n = 0;
    for b in bits {
        acc = (acc << 1) | b as u8;
        n += 1;
        if n == 8 {
            out.push(acc);
            acc = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(acc << (8 - n));
    }
    out
}

pub fn unpack(bytes: &[u8]) -> Vec<bool> {
    (0..bytes.len() * 8).map(|k| get_bit(bytes, k)).collect()
}

/// Fractional Hamming distance between two equal-length packed buffers.
pub fn fractional_hamming(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    diff as f64 / (a.len() * 8) as f64
}
