//! Client-side local update: loss observation, pseudo-labelling, label
//! refinement, the globally revised EMA teacher and the composite objective
//! `CE + λ_B·KL(EMA teacher logits) + λ_R·KL(global representation)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment, AugmentConfig, ClientDataset, ClientId, Strength};
use crate::error::{Error, Result};
use crate::nn::{self, Example, GradientBuffer, LossWeights, ModelParams, SgdConfig};
use crate::noise_model::ClientSelection;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedGr,
    FedAvg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedGr => "fedgr",
            Method::FedAvg => "fedavg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedgr" => Ok(Method::FedGr),
            "fedavg" => Ok(Method::FedAvg),
            other => Err(Error::validation("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Optimisation settings shared by every method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.5,
            weight_decay: 5e-4,
            batch_size: 32,
            local_epochs: 10,
        }
    }
}

impl LocalTrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedGrConfig {
    pub lambda_b: f64,
    pub lambda_r: f64,
    /// Pseudo-label confidence threshold (strict).
    pub epsilon: f64,
    /// Estimated noise ratio above which given labels are not trusted.
    pub beta: f64,
    pub tau: f64,
    /// Per-step EMA decay of the local teacher.
    pub gamma_l: f64,
    /// Decay of the teacher towards the global model at round start.
    pub kappa: f64,
    /// Minimum refined fraction for a high-noise client to keep its teacher.
    pub mu: f64,
    /// Number of sniffing rounds.
    pub alpha: usize,
    /// First round with the distillation term active.
    pub delta: usize,
}

impl Default for FedGrConfig {
    fn default() -> Self {
        Self {
            lambda_b: 1.0,
            lambda_r: 0.1,
            epsilon: 0.9,
            beta: 0.8,
            tau: 0.5,
            gamma_l: 0.99,
            kappa: 0.9,
            mu: 0.5,
            alpha: 50,
            delta: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// One mixture per client instead of the pooled server-side fit.
    pub disable_cs: bool,
    /// Train on the estimated clean set with given labels only.
    pub disable_lr: bool,
    pub disable_b: bool,
    pub disable_r: bool,
    /// Student inputs use the weak augmentation.
    pub disable_strong_aug: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub method: Method,
    pub train: LocalTrainConfig,
    pub fedgr: FedGrConfig,
    pub ablation: Ablation,
    pub augment: AugmentConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Given,
    Blended,
    Pseudo,
    Masked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedLabel {
    pub label: Vec<f64>,
    pub provenance: Provenance,
}

impl RefinedLabel {
    pub fn given(class: usize, n_classes: usize) -> Self {
        Self {
            label: one_hot(class, n_classes),
            provenance: Provenance::Given,
        }
    }

    pub fn masked(n_classes: usize) -> Self {
        Self {
            label: vec![0.0; n_classes],
            provenance: Provenance::Masked,
        }
    }

    pub fn mass(&self) -> f64 {
        self.label.iter().sum()
    }

    pub fn is_masked(&self) -> bool {
        self.label.iter().all(|&v| v == 0.0)
    }
}

pub fn one_hot(class: usize, n_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_classes];
    v[class] = 1.0;
    v
}

/// `H(h∘f(x_i; w), ŷ_i)` for every sample, on unaugmented inputs.
pub fn compute_ledger_losses(params: &ModelParams, dataset: &ClientDataset) -> Result<Vec<f64>> {
    let c = params.arch().num_classes();
    dataset
        .samples
        .iter()
        .map(|s| nn::cross_entropy(&nn::predict(params, &s.features)?, &one_hot(s.given_label, c)))
        .collect()
}

/// One-hot of the argmax when the top softmax probability is strictly above
/// `epsilon`, otherwise the zero vector.
pub fn pseudo_label_from_logits(logits: &[f64], epsilon: f64) -> RefinedLabel {
    let p = nn::softmax(logits);
    let top = nn::argmax(&p);
    if p[top] > epsilon {
        RefinedLabel {
            label: one_hot(top, logits.len()),
            provenance: Provenance::Pseudo,
        }
    } else {
        RefinedLabel::masked(logits.len())
    }
}

/// Pseudo-label of an (already weakly augmented) input under the global model.
pub fn pseudo_label(x: &[f64], global: &ModelParams, epsilon: f64) -> Result<RefinedLabel> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Parameter(format!("confidence threshold {epsilon} outside (0, 1]")));
    }
    Ok(pseudo_label_from_logits(&nn::predict(global, x)?, epsilon))
}

/// The three-branch refinement rule for one sample.
///
/// * `r_k < β`, clean: the given label.
/// * `r_k < β`, noisy: `q·ŷ + (1 − q)·y_pse`.
/// * `r_k ≥ β`: the pseudo-label alone.
pub fn refine_label(
    given: usize,
    noise_ratio: f64,
    is_clean: bool,
    clean_posterior: f64,
    pseudo: &RefinedLabel,
    beta: f64,
) -> RefinedLabel {
    let n = pseudo.label.len();
    if noise_ratio >= beta {
        return pseudo.clone();
    }
    if is_clean {
        return RefinedLabel::given(given, n);
    }
    let q = clean_posterior;
    let mut label: Vec<f64> = pseudo.label.iter().map(|p| (1.0 - q) * p).collect();
    label[given] += q;
    RefinedLabel {
        label,
        provenance: Provenance::Blended,
    }
}

pub fn refine_labels(
    dataset: &ClientDataset,
    selection: Option<&ClientSelection>,
    pseudo: &[RefinedLabel],
    beta: f64,
) -> Result<Vec<RefinedLabel>> {
    let sel = selection.ok_or_else(|| {
        Error::Protocol(format!("client {} has no sieve result to refine with", dataset.client_id))
    })?;
    if sel.len() != dataset.len() || pseudo.len() != dataset.len() {
        return Err(Error::Protocol(format!(
            "client {}: {} samples, {} sieve entries, {} pseudo-labels",
            dataset.client_id,
            dataset.len(),
            sel.len(),
            pseudo.len()
        )));
    }
    Ok(dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            refine_label(
                s.given_label,
                sel.noise_ratio,
                sel.is_clean[i],
                sel.clean_posterior[i],
                &pseudo[i],
                beta,
            )
        })
        .collect())
}

/// Fraction of labels with nonzero mass.
pub fn refined_fraction(labels: &[RefinedLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|l| !l.is_masked()).count() as f64 / labels.len() as f64
}

/// Decay `γ_g` applied when blending the teacher towards the global model.
///
/// A client without a noise estimate is treated as low-noise. A high-noise
/// client that refined at least a `μ` fraction of its data keeps `κ`.
pub fn global_decay(noise_ratio: Option<f64>, refined_fraction: f64, cfg: &FedGrConfig) -> f64 {
    match noise_ratio {
        Some(r) if r >= cfg.beta && refined_fraction < cfg.mu => 0.0,
        _ => cfg.kappa,
    }
}

/// Round-start maintenance of the local EMA teacher. Before `δ` nothing
/// happens; at `δ` (or at a client's first round after it) the teacher is a
/// copy of the global model; afterwards it is blended towards the global
/// model with [`global_decay`].
pub fn revise_ema(
    ema: &mut Option<ModelParams>,
    global: &ModelParams,
    round: usize,
    noise_ratio: Option<f64>,
    refined_fraction: f64,
    cfg: &FedGrConfig,
) -> Result<()> {
    if round < cfg.delta {
        return Ok(());
    }
    match ema {
        Some(teacher) if round > cfg.delta => {
            teacher.blend_toward(global, global_decay(noise_ratio, refined_fraction, cfg))?;
        }
        _ => *ema = Some(global.clone()),
    }
    Ok(())
}

/// Per-step teacher update `w_ema ← γ_l·w_ema + (1 − γ_l)·w_k`.
pub fn ema_step(ema: &mut ModelParams, local: &ModelParams, gamma_l: f64) -> Result<()> {
    ema.blend_toward(local, gamma_l)
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub dataset: ClientDataset,
    pub ema: Option<ModelParams>,
    /// Latest sieve result delivered by the server.
    pub selection: Option<ClientSelection>,
    pub refined_fraction: f64,
}

impl ClientState {
    pub fn new(dataset: ClientDataset) -> Self {
        Self {
            dataset,
            ema: None,
            selection: None,
            refined_fraction: 1.0,
        }
    }

    pub fn id(&self) -> ClientId {
        self.dataset.client_id
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalStats {
    pub refined_fraction: f64,
    pub given: usize,
    pub blended: usize,
    pub pseudo: usize,
    pub masked: usize,
    /// Phase-II round run on given labels because no sieve result had arrived.
    pub missing_selection: bool,
}

impl LocalStats {
    fn from_labels(labels: &[RefinedLabel]) -> Self {
        let mut s = LocalStats {
            refined_fraction: refined_fraction(labels),
            ..Default::default()
        };
        for l in labels {
            match l.provenance {
                Provenance::Given => s.given += 1,
                Provenance::Blended => s.blended += 1,
                Provenance::Pseudo => s.pseudo += 1,
                Provenance::Masked => s.masked += 1,
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Loss observations for the server ledger (sniffing rounds only).
    pub ledger_losses: Option<Vec<f64>>,
    pub stats: LocalStats,
}

fn given_targets(dataset: &ClientDataset, n_classes: usize) -> Vec<RefinedLabel> {
    dataset
        .samples
        .iter()
        .map(|s| RefinedLabel::given(s.given_label, n_classes))
        .collect()
}

fn phase_two_targets(
    client: &ClientState,
    global: &ModelParams,
    round: usize,
    seed: u64,
    cfg: &TrainerConfig,
) -> Result<Option<Vec<RefinedLabel>>> {
    let n_classes = global.arch().num_classes();
    let Some(sel) = client.selection.as_ref() else {
        return Ok(None);
    };
    let ds = &client.dataset;
    if cfg.ablation.disable_lr {
        if sel.len() != ds.len() {
            return Err(Error::Protocol(format!("client {}: sieve size mismatch", ds.client_id)));
        }
        return Ok(Some(
            ds.samples
                .iter()
                .zip(&sel.is_clean)
                .map(|(s, &clean)| {
                    if clean {
                        RefinedLabel::given(s.given_label, n_classes)
                    } else {
                        RefinedLabel::masked(n_classes)
                    }
                })
                .collect(),
        ));
    }
    let mut rng = rng::stream(seed, &[tag::PSEUDO_AUG, round as u64, ds.client_id as u64]);
    let pseudo = ds
        .samples
        .iter()
        .map(|s| {
            let xw = augment(&s.features, Strength::Weak, &cfg.augment, &mut rng);
            pseudo_label(&xw, global, cfg.fedgr.epsilon)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(refine_labels(ds, Some(sel), &pseudo, cfg.fedgr.beta)?))
}

/// Runs one round of local training for `client`, starting from `global`.
pub fn local_update(
    client: &mut ClientState,
    global: &ModelParams,
    round: usize,
    seed: u64,
    cfg: &TrainerConfig,
) -> Result<LocalOutcome> {
    let n_classes = global.arch().num_classes();
    let fedgr = cfg.method == Method::FedGr;
    let sniffing = round < cfg.fedgr.alpha;

    let ledger_losses = if fedgr && sniffing {
        Some(compute_ledger_losses(global, &client.dataset)?)
    } else {
        None
    };

    let mut missing_selection = false;
    let targets = if fedgr && !sniffing {
        match phase_two_targets(client, global, round, seed, cfg)? {
            Some(t) => t,
            None => {
                missing_selection = true;
                given_targets(&client.dataset, n_classes)
            }
        }
    } else {
        given_targets(&client.dataset, n_classes)
    };
    let mut stats = LocalStats::from_labels(&targets);
    stats.missing_selection = missing_selection;
    client.refined_fraction = stats.refined_fraction;

    let (distill, represent) = if fedgr {
        revise_ema(
            &mut client.ema,
            global,
            round,
            client.selection.as_ref().map(|s| s.noise_ratio),
            stats.refined_fraction,
            &cfg.fedgr,
        )?;
        let lb = if round >= cfg.fedgr.delta && !cfg.ablation.disable_b {
            cfg.fedgr.lambda_b
        } else {
            0.0
        };
        let lr = if cfg.ablation.disable_r { 0.0 } else { cfg.fedgr.lambda_r };
        (lb, lr)
    } else {
        (0.0, 0.0)
    };
    let weights = LossWeights {
        distill,
        represent,
        tau: cfg.fedgr.tau,
    };
    let student_strength = if fedgr && cfg.ablation.disable_strong_aug {
        Strength::Weak
    } else {
        Strength::Strong
    };

    let id = client.id() as u64;
    let r = round as u64;
    let mut shuffle_rng = rng::stream(seed, &[tag::SHUFFLE, r, id]);
    let mut student_rng = rng::stream(seed, &[tag::STUDENT_AUG, r, id]);
    let mut teacher_rng = rng::stream(seed, &[tag::TEACHER_AUG, r, id]);

    let mut local = global.clone();
    let mut velocity = GradientBuffer::zeros_like(global);
    let sgd = cfg.train.sgd();
    let batch_size = cfg.train.batch_size.max(1);
    let samples = &client.dataset.samples;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let use_teacher = distill != 0.0 && client.ema.is_some();
    let use_global = represent != 0.0;

    for _ in 0..cfg.train.local_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch_size) {
            let mut students = Vec::with_capacity(chunk.len());
            let mut teacher_logits = Vec::with_capacity(chunk.len());
            let mut teacher_reps = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = &samples[i].features;
                students.push(augment(x, student_strength, &cfg.augment, &mut student_rng));
                if use_teacher || use_global {
                    let xw = augment(x, Strength::Weak, &cfg.augment, &mut teacher_rng);
                    if use_teacher {
                        let ema = client.ema.as_ref().expect("teacher present");
                        teacher_logits.push(nn::predict(ema, &xw)?);
                    }
                    if use_global {
                        teacher_reps.push(nn::forward(global, &xw)?.representation);
                    }
                }
            }
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| Example {
                    input: &students[j],
                    target: &targets[i].label,
                    teacher_logits: teacher_logits.get(j).map(Vec::as_slice),
                    teacher_representation: teacher_reps.get(j).map(Vec::as_slice),
                })
                .collect();
            let (_, grads) = nn::backward(&local, &batch, &weights)?;
            nn::sgd_step(&mut local, &grads, &mut velocity, &sgd)?;
            if let Some(ema) = client.ema.as_mut() {
                ema_step(ema, &local, cfg.fedgr.gamma_l)?;
            }
        }
    }

    Ok(LocalOutcome {
        params: local,
        ledger_losses,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Sample;
    use crate::nn::Architecture;
    use proptest::prelude::*;

    fn logits_for(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn uniform_model_has_log_c_losses() {
        let arch = Architecture::mlp(3, 4, 2, 10).unwrap();
        let ds = ClientDataset::new(
            0,
            (0..5)
                .map(|i| Sample {
                    id: i,
                    features: vec![i as f64, 1.0, -1.0],
                    given_label: i,
                    true_label: i,
                })
                .collect(),
        );
        let losses = compute_ledger_losses(&ModelParams::zeros(&arch), &ds).unwrap();
        for l in losses {
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_model_has_small_loss() {
        let arch = Architecture::new(vec![1, 2]).unwrap();
        let p = ModelParams::from_values(&arch, vec![0.0, 0.0, 40.0, 0.0]).unwrap();
        let ds = ClientDataset::new(
            0,
            vec![Sample {
                id: 0,
                features: vec![0.0],
                given_label: 0,
                true_label: 0,
            }],
        );
        assert!(compute_ledger_losses(&p, &ds).unwrap()[0] < 1e-12);
    }

    #[test]
    fn pseudo_label_threshold_is_strict() {
        let confident = pseudo_label_from_logits(&logits_for(&[0.95, 0.05]), 0.9);
        assert_eq!(confident.label, vec![1.0, 0.0]);
        assert_eq!(confident.provenance, Provenance::Pseudo);
        let unsure = pseudo_label_from_logits(&logits_for(&[0.6, 0.4]), 0.9);
        assert_eq!(unsure.label, vec![0.0, 0.0]);
        assert_eq!(unsure.provenance, Provenance::Masked);
        // equal logits give exactly 0.5 confidence
        assert!(pseudo_label_from_logits(&[0.0, 0.0], 0.5).is_masked());
        let arch = Architecture::new(vec![1, 2]).unwrap();
        assert!(pseudo_label(&[0.0], &ModelParams::zeros(&arch), 1.5).is_err());
    }

    #[test]
    fn refinement_branches() {
        let n = 10;
        let pseudo2 = RefinedLabel {
            label: one_hot(2, n),
            provenance: Provenance::Pseudo,
        };
        let clean = refine_label(5, 0.3, true, 0.9, &pseudo2, 0.8);
        assert_eq!(clean, RefinedLabel::given(5, n));

        let blended = refine_label(5, 0.3, false, 0.7, &pseudo2, 0.8);
        let mut expected = vec![0.0; n];
        expected[5] = 0.7;
        expected[2] = 1.0 - 0.7;
        assert_eq!(blended.label, expected);
        assert_eq!(blended.provenance, Provenance::Blended);

        let pseudo1 = RefinedLabel {
            label: one_hot(1, n),
            provenance: Provenance::Pseudo,
        };
        let high = refine_label(5, 0.9, true, 0.99, &pseudo1, 0.8);
        assert_eq!(high, pseudo1);
    }

    #[test]
    fn missing_selection_is_a_protocol_error() {
        let ds = ClientDataset::new(0, Vec::new());
        assert!(matches!(refine_labels(&ds, None, &[], 0.8), Err(Error::Protocol(_))));
    }

    #[test]
    fn ema_revision_cases() {
        let arch = Architecture::new(vec![1, 1]).unwrap();
        let scalar = |v: f64| ModelParams::from_values(&arch, vec![v, 0.0]).unwrap();
        let cfg = FedGrConfig {
            delta: 3,
            ..FedGrConfig::default()
        };
        let g = scalar(0.0);

        let mut ema = None;
        revise_ema(&mut ema, &g, 2, Some(0.3), 1.0, &cfg).unwrap();
        assert!(ema.is_none());
        revise_ema(&mut ema, &scalar(0.4), 3, Some(0.3), 1.0, &cfg).unwrap();
        assert_eq!(ema, Some(scalar(0.4)));

        let mut ema = Some(scalar(1.0));
        revise_ema(&mut ema, &g, 5, Some(0.3), 1.0, &cfg).unwrap();
        assert!((ema.unwrap().values()[0] - 0.9).abs() < 1e-15);

        let mut ema = Some(scalar(1.0));
        revise_ema(&mut ema, &scalar(0.25), 5, Some(0.9), 0.2, &cfg).unwrap();
        assert_eq!(ema, Some(scalar(0.25)));

        assert_eq!(global_decay(Some(0.9), 0.6, &cfg), cfg.kappa);
        assert_eq!(global_decay(None, 0.0, &cfg), cfg.kappa);
    }

    #[test]
    fn ema_step_cases() {
        let arch = Architecture::new(vec![1, 1]).unwrap();
        let scalar = |v: f64| ModelParams::from_values(&arch, vec![v, 0.0]).unwrap();
        let mut e = scalar(0.0);
        ema_step(&mut e, &scalar(1.0), 0.99).unwrap();
        assert!((e.values()[0] - 0.01).abs() < 1e-15);
        let mut frozen = scalar(0.3);
        ema_step(&mut frozen, &scalar(1.0), 1.0).unwrap();
        assert_eq!(frozen, scalar(0.3));
        let mut track = scalar(0.3);
        ema_step(&mut track, &scalar(1.0), 0.0).unwrap();
        assert_eq!(track, scalar(1.0));
    }

    fn small_config() -> TrainerConfig {
        TrainerConfig {
            method: Method::FedGr,
            train: LocalTrainConfig {
                local_epochs: 2,
                batch_size: 4,
                lr: 0.05,
                ..LocalTrainConfig::default()
            },
            fedgr: FedGrConfig {
                alpha: 1,
                delta: 1,
                ..FedGrConfig::default()
            },
            ablation: Ablation::default(),
            augment: AugmentConfig::default(),
        }
    }

    fn toy_client() -> ClientState {
        ClientState::new(ClientDataset::new(
            3,
            (0..10)
                .map(|i| Sample {
                    id: i,
                    features: vec![i as f64 / 5.0 - 1.0, (i % 3) as f64],
                    given_label: i % 3,
                    true_label: i % 3,
                })
                .collect(),
        ))
    }

    #[test]
    fn zero_epochs_returns_the_global_model() {
        let arch = Architecture::mlp(2, 4, 2, 3).unwrap();
        let g = ModelParams::init(&arch, &mut rng::stream(1, &[0]));
        let mut cfg = small_config();
        cfg.train.local_epochs = 0;
        let out = local_update(&mut toy_client(), &g, 0, 7, &cfg).unwrap();
        assert_eq!(out.params, g);
        assert!(out.ledger_losses.is_some());
    }

    #[test]
    fn distillation_is_gated_before_delta() {
        let arch = Architecture::mlp(2, 4, 2, 3).unwrap();
        let g = ModelParams::init(&arch, &mut rng::stream(1, &[0]));
        let mut with_b = small_config();
        with_b.fedgr.delta = 5;
        with_b.fedgr.alpha = 5;
        with_b.fedgr.lambda_r = 0.0;
        let mut without_b = with_b.clone();
        without_b.fedgr.lambda_b = 0.0;
        let mut c1 = toy_client();
        let mut c2 = toy_client();
        let a = local_update(&mut c1, &g, 2, 7, &with_b).unwrap();
        let b = local_update(&mut c2, &g, 2, 7, &without_b).unwrap();
        assert_eq!(a.params, b.params);
        assert!(c1.ema.is_none());
    }

    #[test]
    fn degenerate_fedgr_matches_fedavg_locally() {
        let arch = Architecture::mlp(2, 4, 2, 3).unwrap();
        let g = ModelParams::init(&arch, &mut rng::stream(1, &[0]));
        let mut fedgr = small_config();
        fedgr.fedgr.lambda_b = 0.0;
        fedgr.fedgr.lambda_r = 0.0;
        fedgr.fedgr.alpha = 10;
        let mut fedavg = fedgr.clone();
        fedavg.method = Method::FedAvg;
        let a = local_update(&mut toy_client(), &g, 4, 9, &fedgr).unwrap();
        let b = local_update(&mut toy_client(), &g, 4, 9, &fedavg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(b.ledger_losses.is_none());
    }

    #[test]
    fn phase_two_without_selection_falls_back_to_given_labels() {
        let arch = Architecture::mlp(2, 4, 2, 3).unwrap();
        let g = ModelParams::init(&arch, &mut rng::stream(1, &[0]));
        let out = local_update(&mut toy_client(), &g, 3, 9, &small_config()).unwrap();
        assert!(out.stats.missing_selection);
        assert_eq!(out.stats.given, 10);
        assert!(out.ledger_losses.is_none());
    }

    #[test]
    fn clean_only_training_masks_flagged_samples() {
        let arch = Architecture::mlp(2, 4, 2, 3).unwrap();
        let g = ModelParams::init(&arch, &mut rng::stream(1, &[0]));
        let mut client = toy_client();
        let q: Vec<f64> = (0..10).map(|i| if i < 4 { 0.1 } else { 0.9 }).collect();
        client.selection = Some(ClientSelection::from_posteriors(3, q));
        let mut cfg = small_config();
        cfg.ablation.disable_lr = true;
        let out = local_update(&mut client, &g, 3, 9, &cfg).unwrap();
        assert_eq!(out.stats.masked, 4);
        assert_eq!(out.stats.given, 6);
        assert!((out.stats.refined_fraction - 0.6).abs() < 1e-15);
    }

    fn pseudo_strategy() -> impl Strategy<Value = RefinedLabel> {
        prop_oneof![
            (0usize..4).prop_map(|c| RefinedLabel {
                label: one_hot(c, 4),
                provenance: Provenance::Pseudo
            }),
            Just(RefinedLabel::masked(4)),
        ]
    }

    proptest! {
        #[test]
        fn exactly_one_branch_fires(
            given in 0usize..4, r in 0.0f64..=1.0, clean in any::<bool>(),
            q in 0.0f64..=1.0, pseudo in pseudo_strategy(), beta in 0.0f64..=1.0,
        ) {
            let out = refine_label(given, r, clean, q, &pseudo, beta);
            let fired = !pseudo.is_masked();
            if r >= beta {
                prop_assert_eq!(&out, &pseudo);
            } else if clean {
                prop_assert_eq!(out.provenance, Provenance::Given);
                prop_assert_eq!(out.label, one_hot(given, 4));
            } else {
                prop_assert_eq!(out.provenance, Provenance::Blended);
                let mass = out.mass();
                let expected = if fired { 1.0 } else { q };
                prop_assert!((mass - expected).abs() < 1e-12);
                prop_assert!(mass <= 1.0 + 1e-12);
                prop_assert!(out.label.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            }
        }
    }
}
