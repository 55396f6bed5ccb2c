//! Phenotype authenticator: a nearest-centroid classifier over mean-pooled
//! phenotype images with a margin-softmax confidence and a threshold tuned
//! for zero false accepts.
//!
//! Confidence for an image with centroid distances `d_k` is
//! `S = exp(-d_best/τ) / Σ_k exp(-d_k/τ)`, with `τ` the median pairwise
//! centroid distance. A claim is accepted when the winning label is the
//! claimed one and `S >= t̂`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto;
use crate::phenotype::{DatasetItem, DeviceLabel, LabeledDataset, PhenotypeImage};

pub use crate::phenotype::Characterization;

pub const MODEL_MAGIC: &[u8; 4] = b"DPAN";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("labels {0} and {1} have indistinguishable centroids")]
    DegenerateLabels(DeviceLabel, DeviceLabel),
    #[error("image {width}x{height} cannot be pooled to {grid}x{grid}")]
    ShapeMismatch {
        width: usize,
        height: usize,
        grid: usize,
    },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The contract the protocol relies on; any back end producing a label and
/// a confidence in `[0, 1]` can stand behind it.
pub trait PhenotypeClassifier {
    fn classify(&self, image: &PhenotypeImage) -> Result<(DeviceLabel, f64), AuthError>;
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ConfidenceThreshold(pub f64);

/// `true` iff the image is classified as `expected` with confidence at
/// least `t̂` (the boundary accepts).
pub fn accept<C: PhenotypeClassifier + ?Sized>(
    model: &C,
    threshold: ConfidenceThreshold,
    image: &PhenotypeImage,
    expected: &DeviceLabel,
) -> bool {
    match model.classify(image) {
        Ok((label, s)) => &label == expected && s >= threshold.0,
        Err(_) => false,
    }
}

/// Why an acceptance check failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    WrongLabel,
    LowConfidence,
}

/// [`accept`] with the reason for a rejection.
pub fn check<C: PhenotypeClassifier + ?Sized>(
    model: &C,
    threshold: ConfidenceThreshold,
    image: &PhenotypeImage,
    expected: &DeviceLabel,
) -> Result<f64, Rejection> {
    let (label, s) = model.classify(image).map_err(|_| Rejection::WrongLabel)?;
    if &label != expected {
        Err(Rejection::WrongLabel)
    } else if s < threshold.0 {
        Err(Rejection::LowConfidence)
    } else {
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpanModel {
    grid: usize,
    labels: Vec<DeviceLabel>,
    centroids: Vec<Vec<f32>>,
    tau: f64,
}

fn pool(image: &PhenotypeImage, grid: usize) -> Result<Vec<f64>, AuthError> {
    if grid == 0 || !image.width.is_multiple_of(grid) || !image.height.is_multiple_of(grid) || image.pixels.len() != image.width * image.height {
        return Err(AuthError::ShapeMismatch {
            width: image.width,
            height: image.height,
            grid,
        });
    }
    let bw = image.width / grid;
    let bh = image.height / grid;
    let mut sums = vec![0u32; grid * grid];
    for row in 0..image.height {
        let out_row = (row / bh) * grid;
        let line = &image.pixels[row * image.width..(row + 1) * image.width];
        for (col, &p) in line.iter().enumerate() {
            sums[out_row + col / bw] += p as u32;
        }
    }
    let area = (bw * bh) as f64;
    Ok(sums.into_iter().map(|s| s as f64 / area).collect())
}

fn distance(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, &y)| {
            let d = x - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn median_pairwise(centroids: &[Vec<f32>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..centroids.len() {
        let a: Vec<f64> = centroids[i].iter().map(|&x| x as f64).collect();
        for c in &centroids[i + 1..] {
            d.push(distance(&a, c));
        }
    }
    d.sort_by(f64::total_cmp);
    match d.len() {
        0 => 1.0,
        n if n % 2 == 1 => d[n / 2],
        n => (d[n / 2 - 1] + d[n / 2]) / 2.0,
    }
}

impl DpanModel {
    /// Assemble a model from centroids; `τ` is derived from them.
    pub fn from_centroids(
        grid: usize,
        labels: Vec<DeviceLabel>,
        centroids: Vec<Vec<f32>>,
    ) -> Result<Self, AuthError> {
        if labels.len() != centroids.len() || centroids.iter().any(|c| c.len() != grid * grid) {
            return Err(AuthError::Format("centroid count or size mismatch".into()));
        }
        if centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AuthError::Format("non-finite centroid".into()));
        }
        for i in 0..centroids.len() {
            let a: Vec<f64> = centroids[i].iter().map(|&x| x as f64).collect();
            for j in i + 1..centroids.len() {
                if distance(&a, &centroids[j]) < 1e-6 {
                    return Err(AuthError::DegenerateLabels(labels[i].clone(), labels[j].clone()));
                }
            }
        }
        let tau = median_pairwise(&centroids);
        Ok(Self {
            grid,
            labels,
            centroids,
            tau,
        })
    }

    pub fn labels(&self) -> &[DeviceLabel] {
        &self.labels
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn centroid(&self, label: &DeviceLabel) -> Option<&[f32]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.centroids[i].as_slice())
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Distances to every centroid, in label order.
    pub fn distances(&self, image: &PhenotypeImage) -> Result<Vec<f64>, AuthError> {
        let f = pool(image, self.grid)?;
        Ok(self.centroids.iter().map(|c| distance(&f, c)).collect())
    }

    /// Confidence of every label, in label order; sums to one.
    pub fn scores(&self, image: &PhenotypeImage) -> Result<Vec<f64>, AuthError> {
        let d = self.distances(image)?;
        let best = d.iter().copied().fold(f64::INFINITY, f64::min);
        // Shifting by the best distance keeps the exponentials in range.
        let w: Vec<f64> = d.iter().map(|&x| (-(x - best) / self.tau).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / total).collect())
    }

    pub fn to_bytes(&self, threshold: ConfidenceThreshold) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.grid as u16).to_le_bytes());
        for (label, c) in self.labels.iter().zip(&self.centroids) {
            let id = label.0.as_bytes();
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id);
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&threshold.0.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, ConfidenceThreshold), AuthError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(AuthError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(AuthError::Format(format!("unsupported version {version}")));
        }
        let count = r.u16()? as usize;
        let grid = r.u16()? as usize;
        let mut labels = Vec::with_capacity(count);
        let mut centroids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| AuthError::Format("label is not UTF-8".into()))?;
            labels.push(DeviceLabel(id.to_string()));
            let raw = r.take(4 * grid * grid)?;
            centroids.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        let t = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(AuthError::Format("trailing bytes".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(AuthError::Format(format!("threshold {t} outside [0, 1]")));
        }
        Ok((Self::from_centroids(grid, labels, centroids)?, ConfidenceThreshold(t)))
    }

    pub fn save(&self, threshold: ConfidenceThreshold, path: &Path) -> Result<(), AuthError> {
        fs::write(path, self.to_bytes(threshold))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ConfidenceThreshold), AuthError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AuthError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AuthError::Format("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, AuthError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

impl PhenotypeClassifier for DpanModel {
    fn classify(&self, image: &PhenotypeImage) -> Result<(DeviceLabel, f64), AuthError> {
        let s = self.scores(image)?;
        let (best, &score) = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("model has labels");
        Ok((self.labels[best].clone(), score))
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Fraction of each label's distinct images used to fit centroids.
    pub train_fraction: f64,
    /// Fraction held out for accuracy; the remainder tunes `t̂`.
    pub test_fraction: f64,
    pub grid: usize,
    /// Images from devices outside the enrolled set, used as negatives.
    pub impostors: Vec<PhenotypeImage>,
    /// Synthetic uniform-noise negatives.
    pub noise_negatives: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            test_fraction: 0.2,
            grid: 16,
            impostors: Vec::new(),
            noise_negatives: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_items: usize,
    pub test_items: usize,
    pub tune_items: usize,
    /// Fraction of test-split images classified as their own label.
    pub test_accuracy: f64,
    /// Highest confidence any negative reached.
    pub max_negative_score: f64,
    /// Lowest confidence of a correctly classified tuning image.
    pub min_genuine_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DpanModel,
    pub threshold: ConfidenceThreshold,
    pub report: TrainReport,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
    Tune,
}

fn content_key(item: &DatasetItem) -> [u8; 32] {
    crypto::hash_concat(&[item.label.0.as_bytes(), &[0], &item.image.pixels]).0
}

/// Assign every item to a split. Decided per label over distinct images
/// ordered by content hash, so row order and duplication do not matter.
fn split(dataset: &LabeledDataset, cfg: &TrainConfig) -> Vec<Split> {
    let keys: Vec<[u8; 32]> = dataset.items.iter().map(content_key).collect();
    let mut per_label: BTreeMap<&DeviceLabel, Vec<(usize, [u8; 32])>> = BTreeMap::new();
    for (item, key) in dataset.items.iter().zip(&keys) {
        per_label.entry(&item.label).or_default().push((item.challenge_id, *key));
    }
    let mut assignment: BTreeMap<[u8; 32], Split> = BTreeMap::new();
    for (_, mut ks) in per_label {
        ks.sort_unstable();
        ks.dedup();
        let mut groups: Vec<usize> = ks.iter().map(|(c, _)| *c).collect();
        groups.dedup();
        // Whole challenges are held out when possible so the tuning scores
        // reflect regions the centroids have never seen.
        if groups.len() >= 3 {
            let ranks = ranked(groups.len(), cfg);
            for (c, k) in ks {
                let g = groups.binary_search(&c).expect("listed challenge");
                assignment.insert(k, ranks[g]);
            }
        } else {
            let ranks = ranked(ks.len(), cfg);
            for ((_, k), s) in ks.into_iter().zip(ranks) {
                assignment.insert(k, s);
            }
        }
    }
    keys.iter().map(|k| assignment[k]).collect()
}

fn ranked(n: usize, cfg: &TrainConfig) -> Vec<Split> {
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(1, n);
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).min(n - n_train);
    (0..n)
        .map(|rank| {
            if rank < n_train {
                Split::Train
            } else if rank < n_train + n_test {
                Split::Test
            } else {
                Split::Tune
            }
        })
        .collect()
}

pub fn uniform_noise_image<R: RngCore + ?Sized>(width: usize, height: usize, rng: &mut R) -> PhenotypeImage {
    let mut pixels = vec![0u8; width * height];
    rng.fill_bytes(&mut pixels);
    PhenotypeImage {
        width,
        height,
        pixels,
    }
}

/// Fit centroids on the train split, measure accuracy on the test split and
/// tune `t̂` so that no negative is accepted: above every impostor, noise and
/// misclassified tuning image, and midway to the weakest genuine tuning
/// image when there is room.
pub fn train(dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<Trained, AuthError> {
    let labels = dataset.labels();
    if labels.len() < 2 {
        return Err(AuthError::InsufficientData(format!(
            "{} label(s), at least 2 required",
            labels.len()
        )));
    }
    for label in &labels {
        let n = dataset.items.iter().filter(|i| &i.label == label).count();
        if n < 4 {
            return Err(AuthError::InsufficientData(format!(
                "label {label} has {n} items, at least 4 required"
            )));
        }
    }
    let (w, h) = (dataset.items[0].image.width, dataset.items[0].image.height);
    if dataset
        .items
        .iter()
        .any(|i| i.image.width != w || i.image.height != h)
    {
        return Err(AuthError::ShapeMismatch {
            width: w,
            height: h,
            grid: cfg.grid,
        });
    }

    let splits = split(dataset, cfg);
    let cells = cfg.grid * cfg.grid;
    let bw = w / cfg.grid.max(1);
    let bh = h / cfg.grid.max(1);
    let area = (bw * bh) as u64;
    let mut sums: BTreeMap<&DeviceLabel, (Vec<u64>, u64)> =
        labels.iter().map(|l| (l, (vec![0u64; cells], 0))).collect();
    for (item, s) in dataset.items.iter().zip(&splits) {
        if *s != Split::Train {
            continue;
        }
        // Exact integer block sums keep the centroids order independent.
        let f = pool(&item.image, cfg.grid)?;
        let entry = sums.get_mut(&item.label).expect("known label");
        for (acc, v) in entry.0.iter_mut().zip(f) {
            *acc += (v * area as f64).round() as u64;
        }
        entry.1 += 1;
    }
    let centroids: Vec<Vec<f32>> = labels
        .iter()
        .map(|l| {
            let (acc, n) = &sums[l];
            acc.iter()
                .map(|&s| (s as f64 / (*n * area) as f64) as f32)
                .collect()
        })
        .collect();
    let model = DpanModel::from_centroids(cfg.grid, labels, centroids)?;

    let mut correct = 0usize;
    let mut tested = 0usize;
    let mut max_negative = 0.0f64;
    let mut min_genuine: Option<f64> = None;
    for (item, s) in dataset.items.iter().zip(&splits) {
        match s {
            Split::Train => {}
            Split::Test => {
                tested += 1;
                if model.classify(&item.image)?.0 == item.label {
                    correct += 1;
                }
            }
            Split::Tune => {
                let (label, score) = model.classify(&item.image)?;
                if label == item.label {
                    min_genuine = Some(min_genuine.map_or(score, |m: f64| m.min(score)));
                } else {
                    max_negative = max_negative.max(score);
                }
            }
        }
    }
    for img in &cfg.impostors {
        max_negative = max_negative.max(model.classify(img)?.1);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.noise_negatives {
        let img = uniform_noise_image(w, h, &mut rng);
        max_negative = max_negative.max(model.classify(&img)?.1);
    }

    let t = match min_genuine {
        Some(g) if g > max_negative => (max_negative + g) / 2.0,
        _ => max_negative.next_up(),
    }
    .min(1.0);

    let report = TrainReport {
        train_items: splits.iter().filter(|&&s| s == Split::Train).count(),
        test_items: tested,
        tune_items: splits.iter().filter(|&&s| s == Split::Tune).count(),
        test_accuracy: if tested == 0 {
            1.0
        } else {
            correct as f64 / tested as f64
        },
        max_negative_score: max_negative,
        min_genuine_score: min_genuine,
    };
    Ok(Trained {
        model,
        threshold: ConfidenceThreshold(t),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phenotype::generate_dataset;
    use crate::puf_sim::{Challenge, DpufDevice, EnvParams, PufConfig};
    use rand::seq::SliceRandom;

    fn img(v: u8) -> PhenotypeImage {
        PhenotypeImage {
            width: 4,
            height: 4,
            pixels: vec![v; 16],
        }
    }

    fn toy_dataset() -> LabeledDataset {
        let mut items = Vec::new();
        for (label, base) in [("a", 10u8), ("b", 200u8)] {
            for k in 0..6u8 {
                items.push(DatasetItem {
                    image: img(base + k),
                    label: label.into(),
                    env: EnvParams::new(0, 0),
                    challenge_id: 0,
                    read_index: k as usize,
                });
            }
        }
        LabeledDataset { items }
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            grid: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_label_is_insufficient() {
        let mut ds = toy_dataset();
        ds.items.retain(|i| i.label.0 == "a");
        assert!(matches!(train(&ds, &toy_config()), Err(AuthError::InsufficientData(_))));
        let mut ds = toy_dataset();
        ds.items.truncate(9);
        assert!(matches!(train(&ds, &toy_config()), Err(AuthError::InsufficientData(_))));
    }

    #[test]
    fn identical_labels_are_degenerate() {
        let mut ds = toy_dataset();
        for item in &mut ds.items {
            item.image = img(50);
        }
        assert!(matches!(train(&ds, &toy_config()), Err(AuthError::DegenerateLabels(..))));
    }

    #[test]
    fn duplicates_and_shuffles_leave_model_unchanged() {
        let ds = toy_dataset();
        let base = train(&ds, &toy_config()).unwrap();
        let mut doubled = ds.clone();
        doubled.extend(&ds);
        let d = train(&doubled, &toy_config()).unwrap();
        assert_eq!(d.model, base.model);
        assert_eq!(d.threshold, base.threshold);
        let mut shuffled = doubled.clone();
        shuffled.items.shuffle(&mut ChaCha20Rng::seed_from_u64(4));
        let s = train(&shuffled, &toy_config()).unwrap();
        assert_eq!(s.model, base.model);
        assert_eq!(s.threshold, base.threshold);
    }

    #[test]
    fn accept_boundary_and_rejections() {
        let trained = train(&toy_dataset(), &toy_config()).unwrap();
        let m = &trained.model;
        let probe = img(12);
        let (label, s) = m.classify(&probe).unwrap();
        assert_eq!(label.0, "a");
        assert!(accept(m, ConfidenceThreshold(s), &probe, &label));
        assert!(!accept(m, ConfidenceThreshold(s.next_up()), &probe, &label));
        assert_eq!(
            check(m, ConfidenceThreshold(s.next_up()), &probe, &label),
            Err(Rejection::LowConfidence)
        );
        assert!(!accept(m, ConfidenceThreshold(0.0), &probe, &"b".into()));
        assert_eq!(
            check(m, ConfidenceThreshold(0.0), &probe, &"b".into()),
            Err(Rejection::WrongLabel)
        );
    }

    #[test]
    fn raising_threshold_never_converts_reject_to_accept() {
        let trained = train(&toy_dataset(), &toy_config()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..200 {
            let probe = uniform_noise_image(4, 4, &mut rng);
            for label in trained.model.labels() {
                let mut prev = true;
                for t in [0.0, 0.2, 0.5, 0.7, 0.9, 1.0] {
                    let now = accept(&trained.model, ConfidenceThreshold(t), &probe, label);
                    assert!(prev || !now);
                    prev = now;
                }
            }
        }
    }

    #[test]
    fn scores_are_a_distribution() {
        let trained = train(&toy_dataset(), &toy_config()).unwrap();
        let s = trained.model.scores(&img(100)).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn shape_mismatch() {
        let trained = train(&toy_dataset(), &toy_config()).unwrap();
        let odd = PhenotypeImage {
            width: 3,
            height: 3,
            pixels: vec![0; 9],
        };
        assert!(matches!(trained.model.classify(&odd), Err(AuthError::ShapeMismatch { .. })));
    }

    #[test]
    fn model_file_round_trip_and_layout() {
        let trained = train(&toy_dataset(), &toy_config()).unwrap();
        let bytes = trained.model.to_bytes(trained.threshold);
        assert_eq!(&bytes[..4], b"DPAN");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..8], &2u16.to_le_bytes());
        assert_eq!(&bytes[8..10], &2u16.to_le_bytes());
        // label "a": u16 length, 1 byte, then 4 floats.
        assert_eq!(&bytes[10..13], &[1, 0, b'a']);
        assert_eq!(bytes.len(), 10 + 2 * (2 + 1 + 16) + 8);
        let (m, t) = DpanModel::from_bytes(&bytes).unwrap();
        assert_eq!(m, trained.model);
        assert_eq!(t, trained.threshold);
        assert!(DpanModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DpanModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn simulated_devices_classify_and_reject_impostors() {
        let cfg = PufConfig::default();
        let devs: Vec<DpufDevice> = (0..5).map(|s| DpufDevice::new(300 + s, &cfg).unwrap()).collect();
        let named: Vec<(DeviceLabel, &DpufDevice)> = devs
            .iter()
            .enumerate()
            .map(|(i, d)| (DeviceLabel(format!("d{i}")), d))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let envs = cfg.env.points();
        let challenges: Vec<Challenge> = (0..4).map(|_| Challenge::random(cfg.geometry(), &mut rng)).collect();
        let enrolled = generate_dataset(&named[..3], &challenges, &envs, 2, &mut rng).unwrap();
        let impostor = generate_dataset(&named[3..], &challenges, &envs, 1, &mut rng).unwrap();
        let tcfg = TrainConfig {
            impostors: impostor.items.iter().map(|i| i.image.clone()).collect(),
            ..TrainConfig::default()
        };
        let trained = train(&enrolled, &tcfg).unwrap();
        assert!(trained.report.test_accuracy >= 0.95, "{:?}", trained.report);
        let t = trained.threshold;
        assert!(t.0 > trained.report.max_negative_score);

        // Training image: its own label wins.
        let first = &enrolled.items[0];
        let s = trained.model.scores(&first.image).unwrap();
        let own = trained.model.labels().iter().position(|l| *l == first.label).unwrap();
        assert!(s.iter().all(|&x| x <= s[own]));

        // Fresh reads at new regions and an off-grid midpoint.
        let mid = crate::puf_sim::Conditions {
            temperature_c: 30.0,
            voltage_v: 1.5,
        };
        for _ in 0..10 {
            let c = Challenge::random(cfg.geometry(), &mut rng);
            for (label, dev) in &named[..3] {
                let r = dev.read_at(&c, mid, &mut rng).unwrap();
                let image = crate::phenotype::imgen(&r, 64, 64).unwrap();
                assert_eq!(trained.model.classify(&image).unwrap().0, *label);
            }
        }
        for _ in 0..1000 {
            let noise = uniform_noise_image(64, 64, &mut rng);
            let (_, s) = trained.model.classify(&noise).unwrap();
            assert!(s < t.0);
        }
    }
}
