//! Phenotype images and stable-cell extraction.
//!
//! A phenotype is a noisy region readout viewed as an 8-bit grayscale image:
//! pixel `k = row * w + col` is bits `[8k, 8k + 8)` of the response, most
//! significant bit first.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::puf_sim::{Challenge, DpufDevice, EnvParams, NoisyResponse, PufError, StableChallenge};

#[derive(Debug, Error)]
pub enum PhenotypeError {
    #[error("response has {got} bits, a {w}x{h} image needs {expected}")]
    LengthMismatch {
        expected: usize,
        got: usize,
        w: usize,
        h: usize,
    },
    #[error("found {found} stable cells, needed {needed}")]
    InsufficientStableCells { found: usize, needed: usize },
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Puf(#[from] PufError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceLabel(pub String);

impl fmt::Display for DeviceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceLabel {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhenotypeImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PhenotypeImage {
    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Inverse of [`imgen`].
    pub fn to_response(&self) -> NoisyResponse {
        NoisyResponse {
            bytes: self.pixels.clone(),
        }
    }
}

pub fn imgen(r: &NoisyResponse, w: usize, h: usize) -> Result<PhenotypeImage, PhenotypeError> {
    if r.bytes.len() != w * h {
        return Err(PhenotypeError::LengthMismatch {
            expected: 8 * w * h,
            got: r.bit_len(),
            w,
            h,
        });
    }
    Ok(PhenotypeImage {
        width: w,
        height: h,
        pixels: r.bytes.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetItem {
    pub image: PhenotypeImage,
    pub label: DeviceLabel,
    pub env: EnvParams,
    pub challenge_id: usize,
    pub read_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledDataset {
    pub items: Vec<DatasetItem>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<DeviceLabel> {
        let mut labels: Vec<_> = self.items.iter().map(|i| i.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn extend(&mut self, other: &LabeledDataset) {
        self.items.extend(other.items.iter().cloned());
    }
}

/// Phenotype dataset over every (env, device, challenge) triple, `reads`
/// images per point, each labeled with its device.
pub fn generate_dataset<R: Rng + ?Sized>(
    devices: &[(DeviceLabel, &DpufDevice)],
    challenges: &[Challenge],
    env_grid: &[EnvParams],
    reads_per_point: usize,
    rng: &mut R,
) -> Result<LabeledDataset, PhenotypeError> {
    if devices.is_empty() || challenges.is_empty() || env_grid.is_empty() {
        return Err(PhenotypeError::BadParameters(
            "devices, challenges and env grid must be nonempty".into(),
        ));
    }
    let mut items = Vec::with_capacity(devices.len() * challenges.len() * env_grid.len() * reads_per_point);
    for &env in env_grid {
        for (label, device) in devices {
            let cfg = device.config();
            for (challenge_id, challenge) in challenges.iter().enumerate() {
                for read_index in 0..reads_per_point {
                    let r = device.read(challenge, env, rng)?;
                    items.push(DatasetItem {
                        image: imgen(&r, cfg.image_width, cfg.image_height)?,
                        label: label.clone(),
                        env,
                        challenge_id,
                        read_index,
                    });
                }
            }
        }
    }
    Ok(LabeledDataset { items })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityParams {
    /// Reads per cell per environment point.
    pub repeats: u32,
    /// Error threshold; a cell is kept when `HW/r >= 1 - t_e` or `HW/r <= t_e`
    /// at every environment point.
    pub error_threshold: f64,
}

impl Default for ReliabilityParams {
    fn default() -> Self {
        Self {
            repeats: 200,
            error_threshold: 0.01,
        }
    }
}

impl ReliabilityParams {
    pub fn t_stable(&self) -> f64 {
        1.0 - self.error_threshold
    }

    fn validate(&self) -> Result<(), PhenotypeError> {
        if self.repeats < 100 {
            return Err(PhenotypeError::BadParameters(format!(
                "at least 100 repeats required, got {}",
                self.repeats
            )));
        }
        let t = self.t_stable();
        if !(t > 0.5 && t <= 1.0) {
            return Err(PhenotypeError::BadParameters(format!(
                "stability threshold {t} outside (0.5, 1]"
            )));
        }
        Ok(())
    }
}

/// Stable cells of `cells`, in ascending order, with their majority value.
fn scan_stable<R: Rng + ?Sized>(
    device: &DpufDevice,
    cells: std::ops::Range<u64>,
    env_grid: &[EnvParams],
    params: ReliabilityParams,
    rng: &mut R,
) -> Result<Vec<(u32, bool)>, PhenotypeError> {
    let len = (cells.end - cells.start) as usize;
    let r = params.repeats as f64;
    let t = params.t_stable();
    let mut stable = vec![true; len];
    let mut weight = vec![0u64; len];
    for &env in env_grid {
        let hw = device.hamming_weights(cells.clone(), env, params.repeats, rng)?;
        for (b, &w) in hw.iter().enumerate() {
            let ratio = w as f64 / r;
            // Removed the moment any environment point violates the threshold.
            if !(ratio >= t || ratio <= 1.0 - t) {
                stable[b] = false;
            }
            weight[b] += w as u64;
        }
    }
    let half = params.repeats as u64 * env_grid.len() as u64;
    Ok((0..len)
        .filter(|&b| stable[b])
        .map(|b| ((cells.start + b as u64) as u32, 2 * weight[b] >= half))
        .collect())
}

/// Collect `l` cells that stay on one side of the threshold at every
/// environment point, scanning the challenge regions in order and then
/// contiguous regions after the last one until the device is exhausted.
pub fn reliability_analysis<R: Rng + ?Sized>(
    device: &DpufDevice,
    challenges: &[Challenge],
    env_grid: &[EnvParams],
    params: ReliabilityParams,
    l: usize,
    rng: &mut R,
) -> Result<StableChallenge, PhenotypeError> {
    params.validate()?;
    if challenges.is_empty() || env_grid.is_empty() {
        return Err(PhenotypeError::BadParameters(
            "challenges and env grid must be nonempty".into(),
        ));
    }
    let n = device.cell_count() as u64;
    let mut scanned: HashSet<u64> = HashSet::new();
    let mut indices = Vec::with_capacity(l);
    let mut polarity = Vec::with_capacity(l);

    let region_len = challenges[0].region_len as u64;
    let mut regions: Vec<(u64, u64)> = challenges
        .iter()
        .map(|c| (c.region_start, c.region_len as u64))
        .collect();
    let mut next = regions.last().map(|&(s, len)| s + len).unwrap_or(0);
    let mut covered = 0u64;
    let mut i = 0;
    while indices.len() < l {
        if i == regions.len() {
            if covered >= n {
                break;
            }
            let start = next % n;
            let len = region_len.min(n - start);
            regions.push((start, len));
            next = start + len;
        }
        let (start, len) = regions[i];
        i += 1;
        // Split the region into runs of not-yet-scanned cells.
        let mut run_start = None;
        for cell in start..=start + len {
            let fresh = cell < start + len && cell < n && !scanned.contains(&cell);
            match (fresh, run_start) {
                (true, None) => run_start = Some(cell),
                (false, Some(s)) => {
                    for (idx, bit) in scan_stable(device, s..cell, env_grid, params, rng)? {
                        if indices.len() < l {
                            indices.push(idx);
                            polarity.push(bit);
                        }
                    }
                    covered += cell - s;
                    scanned.extend(s..cell);
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    if indices.len() < l {
        return Err(PhenotypeError::InsufficientStableCells {
            found: indices.len(),
            needed: l,
        });
    }
    Ok(StableChallenge {
        cell_indices: indices,
        expected_polarity: Some(polarity),
    })
}

/// Reliable and unreliable parts of a scanned cell range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Characterization {
    pub rdpuf: Vec<u32>,
    pub udpuf: Vec<u32>,
}

impl Characterization {
    pub fn stable_map(&self) -> StableMap {
        StableMap {
            cells: self.rdpuf.clone(),
        }
    }
}

/// Whole-device reliability scan.
pub fn characterize<R: Rng + ?Sized>(
    device: &DpufDevice,
    env_grid: &[EnvParams],
    params: ReliabilityParams,
    rng: &mut R,
) -> Result<Characterization, PhenotypeError> {
    params.validate()?;
    let n = device.cell_count() as u64;
    let stable = scan_stable(device, 0..n, env_grid, params, rng)?;
    let mut is_stable = vec![false; n as usize];
    for &(i, _) in &stable {
        is_stable[i as usize] = true;
    }
    let (rdpuf, udpuf): (Vec<u32>, Vec<u32>) = (0..n as u32).partition(|&i| is_stable[i as usize]);
    Ok(Characterization { rdpuf, udpuf })
}

/// Sorted indices of cells known to be stable. Holds no polarity, so it may
/// live in non-volatile memory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StableMap {
    pub cells: Vec<u32>,
}

impl StableMap {
    /// The first `l` stable cells at or after the challenge's region start,
    /// wrapping past the end of the device.
    pub fn select(&self, challenge: &Challenge, l: usize) -> Result<StableChallenge, PhenotypeError> {
        if self.cells.len() < l {
            return Err(PhenotypeError::InsufficientStableCells {
                found: self.cells.len(),
                needed: l,
            });
        }
        let from = self
            .cells
            .partition_point(|&c| (c as u64) < challenge.region_start);
        let cell_indices = self
            .cells
            .iter()
            .cycle()
            .skip(from)
            .take(l)
            .copied()
            .collect();
        Ok(StableChallenge {
            cell_indices,
            expected_polarity: None,
        })
    }
}

/// Binary PGM (P5) encoding.
pub fn to_pgm(image: &PhenotypeImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    label: String,
    temperature: usize,
    voltage: usize,
    challenge: usize,
    read: usize,
}

/// One PGM per item plus `index.json`.
pub fn export_dataset(dir: &Path, dataset: &LabeledDataset) -> Result<(), PhenotypeError> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(dataset.len());
    for item in &dataset.items {
        let file = format!(
            "{}_t{}v{}_{}_{}.pgm",
            item.label, item.env.temperature, item.env.voltage, item.challenge_id, item.read_index
        );
        fs::write(dir.join(&file), to_pgm(&item.image))?;
        index.push(IndexEntry {
            file,
            label: item.label.0.clone(),
            temperature: item.env.temperature,
            voltage: item.env.voltage,
            challenge: item.challenge_id,
            read: item.read_index,
        });
    }
    let mut f = fs::File::create(dir.join("index.json"))?;
    f.write_all(&serde_json::to_vec_pretty(&index).map_err(io::Error::other)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puf_sim::{fractional_hamming, PufConfig};
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small() -> PufConfig {
        PufConfig {
            cell_count: 1 << 16,
            image_width: 16,
            image_height: 16,
            ..PufConfig::default()
        }
    }

    #[test]
    fn imgen_packs_msb_first() {
        let zero = NoisyResponse { bytes: vec![0; 16] };
        assert!(imgen(&zero, 4, 4).unwrap().pixels.iter().all(|&p| p == 0));
        let ones = NoisyResponse {
            bytes: vec![0b1000_0000; 16],
        };
        let img = imgen(&ones, 4, 4).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 128));
        assert_eq!(img.pixel(3, 3), 128);
    }

    #[test]
    fn imgen_length_mismatch() {
        let r = NoisyResponse { bytes: vec![0; 15] };
        assert!(matches!(
            imgen(&r, 4, 4),
            Err(PhenotypeError::LengthMismatch { expected: 128, got: 120, .. })
        ));
    }

    #[test]
    fn imgen_inverts_over_random_responses() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let mut bytes = vec![0u8; 8 * 6];
            rng.fill_bytes(&mut bytes);
            let r = NoisyResponse { bytes };
            let img = imgen(&r, 8, 6).unwrap();
            // Pixel (row, col) must equal the byte of bits [8k, 8k+8).
            let bits = crate::puf_sim::unpack(&r.bytes);
            for k in [0usize, 7, 47] {
                let v = bits[8 * k..8 * k + 8].iter().fold(0u8, |a, &b| (a << 1) | b as u8);
                assert_eq!(img.pixel(k / 8, k % 8), v);
            }
            assert_eq!(img.to_response(), r);
        }
    }

    #[test]
    fn dataset_cardinality_labels_and_replay() {
        let cfg = small();
        let devs: Vec<DpufDevice> = (0..3).map(|s| DpufDevice::new(s, &cfg).unwrap()).collect();
        let named: Vec<(DeviceLabel, &DpufDevice)> = devs
            .iter()
            .enumerate()
            .map(|(i, d)| (DeviceLabel(format!("dev{i}")), d))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let challenges: Vec<Challenge> = (0..4).map(|_| Challenge::random(cfg.geometry(), &mut rng)).collect();
        let envs = cfg.env.points();
        let a = generate_dataset(&named, &challenges, &envs, 1, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.len(), 72);
        for item in &a.items {
            let i: usize = item.label.0[3..].parse().unwrap();
            assert_eq!(named[i].0, item.label);
        }
        let b = generate_dataset(&named, &challenges, &envs, 1, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(generate_dataset(&named, &[], &envs, 1, &mut rng).is_err());
    }

    #[test]
    fn reliability_analysis_returns_truly_stable_cells() {
        let cfg = PufConfig::default();
        let dev = DpufDevice::new(77, &cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let c = Challenge::random(cfg.geometry(), &mut rng);
        let envs = cfg.env.points();
        let sc = reliability_analysis(&dev, &[c], &envs, ReliabilityParams::default(), 256, &mut rng).unwrap();
        assert_eq!(sc.cell_indices.len(), 256);
        let unique: HashSet<_> = sc.cell_indices.iter().collect();
        assert_eq!(unique.len(), 256);
        assert!(sc.cell_indices.windows(2).all(|w| w[0] < w[1]));
        let polarity = sc.expected_polarity.as_ref().unwrap();
        for (&i, &bit) in sc.cell_indices.iter().zip(polarity) {
            assert!(dev.min_reliability(i as usize) >= 0.99, "cell {i}");
            assert_eq!(bit, dev.nominal_bias(i as usize) > 0.5);
        }
    }

    #[test]
    fn vacuous_threshold_accepts_nearly_everything() {
        let cfg = small();
        let dev = DpufDevice::new(1, &cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let c = Challenge {
            region_start: 0,
            region_len: 2048,
            pattern: 0,
            session_index: 0,
        };
        let params = ReliabilityParams {
            repeats: 100,
            error_threshold: 0.5 - 1e-9,
        };
        let sc = reliability_analysis(&dev, &[c], &cfg.env.points(), params, 1024, &mut rng).unwrap();
        assert_eq!(sc.cell_indices.len(), 1024);
        // Cells with HW exactly r/2 at some env point are the only rejects.
        assert!(*sc.cell_indices.last().unwrap() < 1200);
    }

    #[test]
    fn impossible_demand_fails() {
        let cfg = small();
        let dev = DpufDevice::from_biases(&vec![0.5; cfg.cell_count], &cfg).unwrap();
        let c = Challenge {
            region_start: 0,
            region_len: 2048,
            pattern: 0,
            session_index: 0,
        };
        let params = ReliabilityParams {
            repeats: 100,
            error_threshold: 0.0,
        };
        let err = reliability_analysis(&dev, &[c], &[EnvParams::new(0, 0)], params, 16, &mut ChaCha20Rng::seed_from_u64(1))
            .unwrap_err();
        assert!(matches!(err, PhenotypeError::InsufficientStableCells { found: 0, needed: 16 }));
        let bad = ReliabilityParams {
            repeats: 99,
            error_threshold: 0.01,
        };
        assert!(matches!(
            reliability_analysis(&dev, &[c], &[EnvParams::new(0, 0)], bad, 16, &mut ChaCha20Rng::seed_from_u64(1)),
            Err(PhenotypeError::BadParameters(_))
        ));
    }

    #[test]
    fn analysis_extends_past_a_thin_region() {
        let cfg = small();
        let dev = DpufDevice::new(8, &cfg).unwrap();
        let c = Challenge {
            region_start: 0,
            region_len: 512,
            pattern: 0,
            session_index: 0,
        };
        // ~14 super cells per 512; 256 requires many contiguous regions.
        let sc = reliability_analysis(
            &dev,
            &[c],
            &cfg.env.points(),
            ReliabilityParams::default(),
            256,
            &mut ChaCha20Rng::seed_from_u64(4),
        )
        .unwrap();
        assert!(*sc.cell_indices.last().unwrap() > 512);
    }

    #[test]
    fn stable_reads_repeat_and_do_not_transfer() {
        let cfg = PufConfig::default();
        let a = DpufDevice::new(21, &cfg).unwrap();
        let b = DpufDevice::new(22, &cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let c = Challenge::random(cfg.geometry(), &mut rng);
        let envs = cfg.env.points();
        let sc = reliability_analysis(&a, &[c], &envs, ReliabilityParams::default(), 256, &mut rng).unwrap();
        let expected = crate::puf_sim::pack(sc.expected_polarity.clone().unwrap().into_iter());
        for k in 0..100 {
            let env = envs[k % envs.len()];
            assert_eq!(a.read_stable(&sc, env, &mut rng).unwrap().bytes, expected);
        }
        let cross = b.read_stable(&sc, envs[0], &mut rng).unwrap();
        let d = fractional_hamming(&cross.bytes, &expected);
        assert!((0.35..=0.65).contains(&d), "{d}");
    }

    #[test]
    fn characterization_partitions_the_device() {
        let cfg = small();
        let dev = DpufDevice::new(12, &cfg).unwrap();
        let ch = characterize(&dev, &cfg.env.points(), ReliabilityParams::default(), &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ch.rdpuf.len() + ch.udpuf.len(), cfg.cell_count);
        let r: HashSet<_> = ch.rdpuf.iter().collect();
        assert!(ch.udpuf.iter().all(|i| !r.contains(i)));
        let supers = (0..cfg.cell_count).filter(|&i| dev.is_super_stable(i)).count();
        assert!(ch.rdpuf.len() as f64 >= 0.95 * supers as f64);
        assert!(ch.rdpuf.iter().all(|&i| dev.is_super_stable(i as usize)));
    }

    #[test]
    fn stable_map_selection_wraps() {
        let map = StableMap {
            cells: vec![3, 10, 20, 30, 40],
        };
        let c = Challenge {
            region_start: 25,
            region_len: 8,
            pattern: 0,
            session_index: 0,
        };
        assert_eq!(map.select(&c, 4).unwrap().cell_indices, vec![30, 40, 3, 10]);
        assert!(matches!(
            map.select(&c, 6),
            Err(PhenotypeError::InsufficientStableCells { found: 5, needed: 6 })
        ));
    }

    #[test]
    fn pgm_export_writes_index() {
        let dir = tempfile::tempdir().unwrap();
        let img = PhenotypeImage {
            width: 2,
            height: 2,
            pixels: vec![0, 64, 128, 255],
        };
        let ds = LabeledDataset {
            items: vec![DatasetItem {
                image: img.clone(),
                label: "devA".into(),
                env: EnvParams::new(1, 0),
                challenge_id: 3,
                read_index: 0,
            }],
        };
        export_dataset(dir.path(), &ds).unwrap();
        let pgm = fs::read(dir.path().join("devA_t1v0_3_0.pgm")).unwrap();
        assert_eq!(pgm, b"P5\n2 2\n255\n\x00\x40\x80\xff");
        let index: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("index.json")).unwrap()).unwrap();
        assert_eq!(index[0]["label"], "devA");
    }
}
