//! Synthetic Gaussian-blob data, federated partitioning, label-noise
//! synthesis and feature-space augmentation.

use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};

pub type ClientId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable index into the generated training set.
    pub id: usize,
    pub features: Vec<f64>,
    pub given_label: usize,
    /// Ground truth; only evaluation code may read it.
    pub true_label: usize,
}

impl Sample {
    pub fn is_corrupted(&self) -> bool {
        self.given_label != self.true_label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Clean,
    Sym,
    Asym,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub samples: Vec<Sample>,
    pub noise_kind: NoiseKind,
}

impl ClientDataset {
    pub fn new(client_id: ClientId, samples: Vec<Sample>) -> Self {
        Self {
            client_id,
            samples,
            noise_kind: NoiseKind::Clean,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of samples whose given label differs from the truth.
    pub fn true_noise_ratio(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let noisy = self.samples.iter().filter(|s| s.is_corrupted()).count();
        noisy as f64 / self.samples.len() as f64
    }

    pub fn class_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for s in &self.samples {
            h[s.true_label] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub class_separation: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub centers: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut StreamRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn balanced_labels(n: usize, classes: usize) -> impl Iterator<Item = usize> {
    // class c receives n / classes samples, plus one of the remainder if c < n % classes
    (0..classes).flat_map(move |c| std::iter::repeat_n(c, n / classes + usize::from(c < n % classes)))
}

/// Balanced isotropic Gaussian blobs. Class `c` is centred on a random unit
/// direction scaled by `class_separation`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<SyntheticData> {
    if spec.n_classes < 2 {
        return Err(Error::validation("n_classes", "need at least two classes"));
    }
    if !(spec.class_separation > 0.0) {
        return Err(Error::validation("class_separation", "must be positive"));
    }
    if spec.input_dim == 0 {
        return Err(Error::validation("input_dim", "must be positive"));
    }
    let mut rng = rng::stream(seed, &[tag::DATA]);
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let mut v = gaussian_vec(&mut rng, spec.input_dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x *= spec.class_separation / norm);
            v
        })
        .collect();

    let draw = |label: usize, rng: &mut StreamRng| -> Vec<f64> {
        centers[label]
            .iter()
            .map(|&c| c + rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut train: Vec<Sample> = balanced_labels(spec.n_train, spec.n_classes)
        .map(|label| Sample {
            id: 0,
            features: draw(label, &mut rng),
            given_label: label,
            true_label: label,
        })
        .collect();
    train.shuffle(&mut rng);
    for (i, s) in train.iter_mut().enumerate() {
        s.id = i;
    }
    let test = balanced_labels(spec.n_test, spec.n_classes)
        .enumerate()
        .map(|(i, label)| Sample {
            id: i,
            features: draw(label, &mut rng),
            given_label: label,
            true_label: label,
        })
        .collect();
    Ok(SyntheticData {
        train,
        test,
        centers,
    })
}

/// Random equal-size shards (sizes differ by at most one).
pub fn partition_iid(samples: &[Sample], clients: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    if clients == 0 || clients > samples.len() {
        return Err(Error::validation(
            "clients",
            format!("need 1..={} clients, got {clients}", samples.len()),
        ));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::PARTITION]));
    let base = samples.len() / clients;
    let extra = samples.len() % clients;
    let mut out = Vec::with_capacity(clients);
    let mut cursor = 0;
    for k in 0..clients {
        let size = base + usize::from(k < extra);
        let shard = order[cursor..cursor + size].iter().map(|&i| samples[i].clone()).collect();
        cursor += size;
        out.push(ClientDataset::new(k, shard));
    }
    Ok(out)
}

const DIRICHLET_RETRIES: u64 = 100;

/// Per-class Dirichlet(`alpha`·1) split across `clients`. A draw that leaves
/// any client empty is repeated with the next seed.
pub fn partition_dirichlet(
    samples: &[Sample],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::validation("dirichlet_alpha", "must be positive and finite"));
    }
    if clients == 0 || clients > samples.len() {
        return Err(Error::validation(
            "clients",
            format!("need 1..={} clients, got {clients}", samples.len()),
        ));
    }
    let n_classes = samples.iter().map(|s| s.true_label).max().map_or(0, |m| m + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;

    for attempt in 0..DIRICHLET_RETRIES {
        let mut rng = rng::stream(seed.wrapping_add(attempt), &[tag::PARTITION]);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        let mut ok = true;
        for c in 0..n_classes {
            let mut members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].true_label == c).collect();
            members.shuffle(&mut rng);
            let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                ok = false;
                break;
            }
            let mut cum = 0.0;
            let mut start = 0;
            for (k, d) in draws.iter().enumerate() {
                cum += d / total;
                let end = if k + 1 == clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64).floor() as usize).clamp(start, members.len())
                };
                assigned[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if ok && assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .enumerate()
                .map(|(k, mut idx)| {
                    idx.sort_unstable();
                    ClientDataset::new(k, idx.into_iter().map(|i| samples[i].clone()).collect())
                })
                .collect());
        }
    }
    Err(Error::Parameter(format!(
        "dirichlet partition left a client empty after {DIRICHLET_RETRIES} draws"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    Sym,
    Asym,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Fraction of clients that receive label noise.
    pub phi: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub noise_type: NoiseType,
}

impl NoiseConfig {
    pub fn clean() -> Self {
        Self {
            phi: 0.0,
            rho_min: 0.0,
            rho_max: 0.0,
            noise_type: NoiseType::Sym,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::validation("phi", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.rho_min) {
            return Err(Error::validation("rho_min", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.rho_max) || self.rho_max < self.rho_min {
            return Err(Error::validation("rho_max", "must lie in [rho_min, 1]"));
        }
        Ok(())
    }
}

/// Corrupts `round(ρ_k·n_k)` labels on each of `round(φ·K)` randomly chosen
/// clients, with `ρ_k ~ U(ρ_min, ρ_max)`. Asymmetric noise maps `c → (c+1) mod C`.
pub fn inject_noise(
    mut clients: Vec<ClientDataset>,
    cfg: &NoiseConfig,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    if n_classes < 2 {
        return Err(Error::validation("n_classes", "need at least two classes"));
    }
    let mut rng = rng::stream(seed, &[tag::NOISE]);
    let n_noisy = (cfg.phi * clients.len() as f64).round() as usize;
    let mut chosen = index::sample(&mut rng, clients.len(), n_noisy).into_vec();
    chosen.sort_unstable();

    for k in chosen {
        let client = &mut clients[k];
        let rho = if cfg.rho_max > cfg.rho_min {
            rng.random_range(cfg.rho_min..=cfg.rho_max)
        } else {
            cfg.rho_min
        };
        let kind = match cfg.noise_type {
            NoiseType::Sym => NoiseKind::Sym,
            NoiseType::Asym => NoiseKind::Asym,
            NoiseType::Mixed => {
                if rng.random_bool(0.5) {
                    NoiseKind::Sym
                } else {
                    NoiseKind::Asym
                }
            }
        };
        let n = client.len();
        let count = ((rho * n as f64).round() as usize).min(n);
        for i in index::sample(&mut rng, n, count) {
            let s = &mut client.samples[i];
            s.given_label = match kind {
                NoiseKind::Asym => (s.true_label + 1) % n_classes,
                _ => {
                    let r = rng.random_range(0..n_classes - 1);
                    if r >= s.true_label {
                        r + 1
                    } else {
                        r
                    }
                }
            };
        }
        client.noise_kind = kind;
    }
    Ok(clients)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    /// Fraction of coordinates rescaled by the strong augmentation.
    pub strong_fraction: f64,
    pub scale_low: f64,
    pub scale_high: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.05,
            strong_sigma: 0.15,
            strong_fraction: 0.3,
            scale_low: 0.5,
            scale_high: 1.5,
        }
    }
}

/// Weak: additive `N(0, σ_w²)` jitter. Strong: a random subset of
/// coordinates is rescaled by `U(scale_low, scale_high)`, then `N(0, σ_s²)`
/// jitter is added everywhere.
pub fn augment<R: Rng + ?Sized>(x: &[f64], strength: Strength, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    let sigma = match strength {
        Strength::Weak => cfg.weak_sigma,
        Strength::Strong => {
            let d = out.len();
            let k = ((cfg.strong_fraction * d as f64).round() as usize).clamp(usize::from(d > 0), d);
            for i in index::sample(rng, d, k) {
                out[i] *= rng.random_range(cfg.scale_low..cfg.scale_high);
            }
            cfg.strong_sigma
        }
    };
    if sigma > 0.0 {
        for v in &mut out {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Writes `client_id,sample_id,true_label,given_label,f_0..f_{d-1}`.
pub fn write_clients_csv<W: Write>(writer: W, clients: &[ClientDataset]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = clients
        .iter()
        .flat_map(|c| c.samples.first())
        .map(|s| s.features.len())
        .next()
        .unwrap_or(0);
    let mut header = vec![
        "client_id".to_string(),
        "sample_id".to_string(),
        "true_label".to_string(),
        "given_label".to_string(),
    ];
    header.extend((0..dim).map(|j| format!("f_{j}")));
    w.write_record(&header)?;
    for c in clients {
        for s in &c.samples {
            if s.features.len() != dim {
                return Err(Error::shape("samples have differing feature widths"));
            }
            let mut row = vec![
                c.client_id.to_string(),
                s.id.to_string(),
                s.true_label.to_string(),
                s.given_label.to_string(),
            ];
            row.extend(s.features.iter().map(|f| format!("{f:?}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump produced by [`write_clients_csv`]. Client ids must be dense
/// (`0..K`) and every label below `n_classes`. The noise kind of each client
/// is inferred from its corrupted labels.
pub fn read_clients_csv<R: Read>(reader: R, n_classes: usize) -> Result<Vec<ClientDataset>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let fixed = ["client_id", "sample_id", "true_label", "given_label"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(Error::Dataset(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    for (j, h) in header.iter().skip(fixed.len()).enumerate() {
        if h != format!("f_{j}") {
            return Err(Error::Dataset(format!("feature column {j} is named `{h}`")));
        }
    }
    let dim = header.len() - fixed.len();
    let mut by_client: Vec<Vec<Sample>> = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let row = line + 2;
        let int = |i: usize| -> Result<usize> {
            record[i]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Dataset(format!("row {row}, column {}: {e}", fixed[i])))
        };
        let client = int(0)?;
        let id = int(1)?;
        let true_label = int(2)?;
        let given_label = int(3)?;
        if true_label >= n_classes || given_label >= n_classes {
            return Err(Error::Dataset(format!("row {row}: label outside 0..{n_classes}")));
        }
        let features = (0..dim)
            .map(|j| {
                let v: f64 = record[fixed.len() + j]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Dataset(format!("row {row}, f_{j}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Dataset(format!("row {row}, f_{j}: non-finite value")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if client >= by_client.len() {
            if client > 1 << 20 {
                return Err(Error::Dataset(format!("row {row}: client id {client} is implausibly large")));
            }
            by_client.resize_with(client + 1, Vec::new);
        }
        by_client[client].push(Sample {
            id,
            features,
            given_label,
            true_label,
        });
    }
    by_client
        .into_iter()
        .enumerate()
        .map(|(k, samples)| {
            if samples.is_empty() {
                return Err(Error::Dataset(format!("client {k} has no samples")));
            }
            let corrupted: Vec<&Sample> = samples.iter().filter(|s| s.is_corrupted()).collect();
            let noise_kind = if corrupted.is_empty() {
                NoiseKind::Clean
            } else if corrupted.iter().all(|s| s.given_label == (s.true_label + 1) % n_classes) {
                NoiseKind::Asym
            } else {
                NoiseKind::Sym
            };
            Ok(ClientDataset {
                client_id: k,
                samples,
                noise_kind,
            })
        })
        .collect()
}
