//! Round orchestration: client sampling, broadcast, weighted aggregation,
//! loss-ledger collection and sieve distribution.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::client::{local_update, ClientState, LocalOutcome, Method, TrainerConfig};
use crate::datagen::{ClientDataset, ClientId, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, ClientRoundStats, RoundReport};
use crate::nn::{Architecture, ModelParams};
use crate::noise_model::{centralized_sieve, per_client_sieve, GmmConfig, LossLedger, SieveResult};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub sample_ratio: f64,
    pub rounds: usize,
    /// Probability that a sampled client fails to report back.
    pub drop_probability: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub seed: u64,
    pub trainer: TrainerConfig,
    pub gmm: GmmConfig,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let f = &self.trainer.fedgr;
        let t = &self.trainer.train;
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::validation("sample_ratio", "must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::validation("rounds", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(Error::validation("drop_probability", "must lie in [0, 1)"));
        }
        if self.hidden_width == 0 {
            return Err(Error::validation("hidden_width", "must be positive"));
        }
        if f.alpha == 0 || f.alpha > self.rounds {
            return Err(Error::validation("alpha", "must lie in [1, rounds]"));
        }
        if f.delta > self.rounds {
            return Err(Error::validation("delta", "must not exceed rounds"));
        }
        if !(f.epsilon > 0.0 && f.epsilon <= 1.0) {
            return Err(Error::validation("epsilon", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&f.beta) {
            return Err(Error::validation("beta", "must lie in [0, 1]"));
        }
        if !(f.tau > 0.0 && f.tau.is_finite()) {
            return Err(Error::validation("tau", "must be positive"));
        }
        for (name, v) in [("gamma_l", f.gamma_l), ("kappa", f.kappa), ("mu", f.mu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, "must lie in [0, 1]"));
            }
        }
        for (name, v) in [("lambda_b", f.lambda_b), ("lambda_r", f.lambda_r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be non-negative"));
            }
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::validation("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        if t.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Weighted average `Σ a_k w_k` with `a_k ∝ n_k`, summed in list order.
pub fn aggregate(updates: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregation weights sum to zero".into()));
    }
    let mut out = ModelParams::zeros(first.arch());
    for (p, n) in updates {
        if !p.same_shape(first) {
            return Err(Error::shape("aggregated models differ in shape"));
        }
        let a = *n as f64 / total as f64;
        for (o, v) in out.values_mut().iter_mut().zip(p.values()) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Number of clients drawn per round, `⌈ratio·K⌉`.
pub fn clients_per_round(k: usize, ratio: f64) -> usize {
    ((ratio * k as f64).ceil() as usize).clamp(1, k)
}

pub struct FederationState {
    round: usize,
    global: ModelParams,
    clients: Vec<ClientState>,
    sniff_cycle: Vec<ClientId>,
    ledger: LossLedger,
    latest_sieve: SieveResult,
    frozen_sieve: Option<SieveResult>,
    test_set: Vec<Sample>,
    config: ProtocolConfig,
}

impl FederationState {
    pub fn new(
        config: ProtocolConfig,
        n_classes: usize,
        clients: Vec<ClientDataset>,
        test_set: Vec<Sample>,
    ) -> Result<Self> {
        config.validate()?;
        for (i, c) in clients.iter().enumerate() {
            if c.client_id != i {
                return Err(Error::Protocol(format!("client at position {i} has id {}", c.client_id)));
            }
        }
        let input_dim = clients
            .iter()
            .flat_map(|c| c.samples.first())
            .next()
            .ok_or_else(|| Error::Dataset("clients hold no samples".into()))?
            .features
            .len();
        let arch = Architecture::mlp(input_dim, config.hidden_width, config.hidden_layers, n_classes)?;
        Self::with_architecture(config, &arch, clients, test_set)
    }

    pub fn with_architecture(
        config: ProtocolConfig,
        arch: &Architecture,
        clients: Vec<ClientDataset>,
        test_set: Vec<Sample>,
    ) -> Result<Self> {
        config.validate()?;
        let global = ModelParams::init(arch, &mut rng::stream(config.seed, &[tag::INIT]));
        let ledger = LossLedger::new(clients.iter().map(|c| (c.client_id, c.len())));
        Ok(Self {
            round: 0,
            global,
            sniff_cycle: (0..clients.len()).collect(),
            clients: clients.into_iter().map(ClientState::new).collect(),
            ledger,
            latest_sieve: SieveResult::default(),
            frozen_sieve: None,
            test_set,
            config,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn ledger(&self) -> &LossLedger {
        &self.ledger
    }

    pub fn frozen_sieve(&self) -> Option<&SieveResult> {
        self.frozen_sieve.as_ref()
    }

    pub fn sniff_cycle(&self) -> &[ClientId] {
        &self.sniff_cycle
    }

    pub fn datasets(&self) -> impl Iterator<Item = &ClientDataset> {
        self.clients.iter().map(|c| &c.dataset)
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    fn sniffing(&self) -> bool {
        self.round < self.config.trainer.fedgr.alpha
    }

    /// Selected client ids for the current round, in ascending order.
    pub fn sample_clients(&mut self) -> Vec<ClientId> {
        let k = self.clients.len();
        let m = clients_per_round(k, self.config.sample_ratio);
        let mut rng = rng::stream(self.config.seed, &[tag::SAMPLING, self.round as u64]);
        let mut picked: Vec<ClientId> = if self.sniffing() {
            let mut picked = draw_from(&mut self.sniff_cycle, m, &mut rng);
            if picked.len() < m {
                self.sniff_cycle = (0..k).filter(|id| !picked.contains(id)).collect();
                let rest = draw_from(&mut self.sniff_cycle, m - picked.len(), &mut rng);
                picked.extend(rest);
            }
            picked
        } else {
            index::sample(&mut rng, k, m).into_vec()
        };
        picked.sort_unstable();
        picked
    }

    fn drop_clients(&self, sampled: Vec<ClientId>) -> Vec<ClientId> {
        let p = self.config.drop_probability;
        if p == 0.0 {
            return sampled;
        }
        let mut rng = rng::stream(self.config.seed, &[tag::DROPOUT, self.round as u64]);
        sampled.into_iter().filter(|_| !rng.random_bool(p)).collect()
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        if self.is_finished() {
            return Err(Error::Protocol(format!("all {} rounds already ran", self.config.rounds)));
        }
        let t = self.round;
        let sniffing = self.sniffing();
        let fedgr = self.config.trainer.method == Method::FedGr;
        let sampled = self.sample_clients();
        let participants = self.drop_clients(sampled);

        let sieve = if sniffing {
            &self.latest_sieve
        } else {
            self.frozen_sieve.as_ref().expect("sieve frozen at alpha")
        };
        for &id in &participants {
            self.clients[id].selection = sieve.get(id).cloned();
        }

        let mut selected: Vec<&mut ClientState> = Vec::with_capacity(participants.len());
        let mut rest = self.clients.as_mut_slice();
        let mut offset = 0;
        for &id in &participants {
            let (_, tail) = rest.split_at_mut(id - offset);
            let (head, tail) = tail.split_first_mut().expect("participant in range");
            selected.push(head);
            rest = tail;
            offset = id + 1;
        }
        let global = &self.global;
        let seed = self.config.seed;
        let trainer = &self.config.trainer;
        let outcomes: Vec<LocalOutcome> = selected
            .into_par_iter()
            .map(|c| local_update(c, global, t, seed, trainer))
            .collect::<Result<_>>()?;

        if !outcomes.is_empty() {
            let updates: Vec<(&ModelParams, usize)> = participants
                .iter()
                .zip(&outcomes)
                .map(|(&id, o)| (&o.params, self.clients[id].dataset.len()))
                .collect();
            self.global = aggregate(&updates)?;
        }

        if fedgr && sniffing && !participants.is_empty() {
            let mut means = Vec::with_capacity(participants.len());
            for (&id, o) in participants.iter().zip(&outcomes) {
                let losses = o
                    .ledger_losses
                    .as_ref()
                    .ok_or_else(|| Error::Protocol(format!("client {id} returned no loss observations")))?;
                self.ledger.record_loss(id, losses)?;
                means.push((id, self.ledger.mean_losses(id)?));
            }
            let result = if self.config.trainer.ablation.disable_cs {
                per_client_sieve(&means, &self.config.gmm)?
            } else {
                centralized_sieve(&means, &self.config.gmm)?
            };
            self.latest_sieve.merge(result);
        }
        if t + 1 == self.config.trainer.fedgr.alpha {
            self.frozen_sieve = Some(self.latest_sieve.clone());
        }

        let current_sieve = self.frozen_sieve.as_ref().unwrap_or(&self.latest_sieve);
        let mut client_stats = Vec::with_capacity(participants.len());
        for (&id, o) in participants.iter().zip(&outcomes) {
            let ds = &self.clients[id].dataset;
            let sel = if fedgr { current_sieve.get(id) } else { None };
            client_stats.push(ClientRoundStats {
                client_id: id,
                estimated_noise_ratio: sel.map(|s| s.noise_ratio),
                true_noise_ratio: ds.true_noise_ratio(),
                selection: sel.map(|s| metrics::selection_f1(s, ds)).transpose()?,
                refined_fraction: o.stats.refined_fraction,
            });
        }

        let report = RoundReport {
            round: t,
            test_accuracy: metrics::test_accuracy(&self.global, &self.test_set)?,
            memorization_fraction: self.memorization()?,
            participants,
            clients: client_stats,
        };
        self.round += 1;
        Ok(report)
    }

    fn memorization(&self) -> Result<f64> {
        metrics::memorization_fraction(&self.global, self.datasets())
    }

    /// Runs every remaining round.
    pub fn run(mut self) -> Result<RunOutcome> {
        let mut reports = Vec::with_capacity(self.config.rounds - self.round);
        while !self.is_finished() {
            reports.push(self.run_round()?);
        }
        Ok(RunOutcome {
            reports,
            frozen_sieve: self.frozen_sieve,
            true_noise_ratios: self.clients.iter().map(|c| c.dataset.true_noise_ratio()).collect(),
            final_global: self.global,
        })
    }
}

fn draw_from<R: Rng>(pool: &mut Vec<ClientId>, m: usize, rng: &mut R) -> Vec<ClientId> {
    let take = m.min(pool.len());
    let mut idx = index::sample(rng, pool.len(), take).into_vec();
    let picked: Vec<ClientId> = idx.iter().map(|&i| pool[i]).collect();
    idx.sort_unstable_by(|a, b| b.cmp(a));
    for i in idx {
        pool.swap_remove(i);
    }
    pool.sort_unstable();
    picked
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub frozen_sieve: Option<SieveResult>,
    pub true_noise_ratios: Vec<f64>,
    pub final_global: ModelParams,
}

impl RunOutcome {
    /// Pearson correlation of frozen `r_k` against realized noise ratios.
    pub fn noise_ratio_pearson(&self) -> Option<f64> {
        let sieve = self.frozen_sieve.as_ref()?;
        let (est, truth): (Vec<f64>, Vec<f64>) = sieve
            .clients
            .iter()
            .map(|(&id, s)| (s.noise_ratio, self.true_noise_ratios[id]))
            .unzip();
        metrics::noise_ratio_pearson(&est, &truth)
    }

    pub fn final_memorization(&self) -> f64 {
        self.reports.last().map_or(0.0, |r| r.memorization_fraction)
    }

    pub fn last10_mean_accuracy(&self) -> f64 {
        metrics::last_n_mean_accuracy(&self.reports, 10)
    }
}

/// Plain local cross-entropy with the same sampling, data and seeds.
pub fn run_fedavg_baseline(
    mut config: ProtocolConfig,
    n_classes: usize,
    clients: Vec<ClientDataset>,
    test_set: Vec<Sample>,
) -> Result<RunOutcome> {
    config.trainer.method = Method::FedAvg;
    FederationState::new(config, n_classes, clients, test_set)?.run()
}
