//! Server-side noise modelling: per-sample loss ledgers, a two-component
//! 1-D Gaussian mixture fitted by EM, and clean/noisy sieving.

use std::collections::BTreeMap;

use crate::datagen::ClientId;
use crate::error::{Error, Result};

/// Samples with clean posterior at or above this are treated as clean.
pub const CLEAN_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
struct ClientLedger {
    /// `history[i]` holds sample `i`'s loss at each successful participation.
    history: Vec<Vec<f64>>,
    participations: usize,
}

/// Running history of global-model losses per client and sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLedger {
    clients: BTreeMap<ClientId, ClientLedger>,
}

impl LossLedger {
    pub fn new(sizes: impl IntoIterator<Item = (ClientId, usize)>) -> Self {
        let clients = sizes
            .into_iter()
            .map(|(id, n)| {
                (
                    id,
                    ClientLedger {
                        history: vec![Vec::new(); n],
                        participations: 0,
                    },
                )
            })
            .collect();
        Self { clients }
    }

    fn client(&self, id: ClientId) -> Result<&ClientLedger> {
        self.clients
            .get(&id)
            .ok_or_else(|| Error::Protocol(format!("client {id} is not registered in the ledger")))
    }

    pub fn record_loss(&mut self, id: ClientId, losses: &[f64]) -> Result<()> {
        let entry = self
            .clients
            .get_mut(&id)
            .ok_or_else(|| Error::Protocol(format!("client {id} is not registered in the ledger")))?;
        if losses.len() != entry.history.len() {
            return Err(Error::Protocol(format!(
                "client {id} reported {} losses for {} samples",
                losses.len(),
                entry.history.len()
            )));
        }
        if let Some(bad) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Protocol(format!("client {id} reported invalid loss {bad}")));
        }
        for (h, &l) in entry.history.iter_mut().zip(losses) {
            h.push(l);
        }
        entry.participations += 1;
        Ok(())
    }

    /// `T_k`, the number of recorded participations.
    pub fn participations(&self, id: ClientId) -> Result<usize> {
        Ok(self.client(id)?.participations)
    }

    pub fn history(&self, id: ClientId, sample: usize) -> Result<&[f64]> {
        self.client(id)?
            .history
            .get(sample)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Protocol(format!("client {id} has no sample {sample}")))
    }

    /// Per-sample arithmetic mean over the recorded participations.
    pub fn mean_losses(&self, id: ClientId) -> Result<Vec<f64>> {
        let c = self.client(id)?;
        if c.participations == 0 {
            return Err(Error::NotReady(format!("client {id} has no recorded losses")));
        }
        let t = c.participations as f64;
        Ok(c.history.iter().map(|h| h.iter().sum::<f64>() / t).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmConfig {
    pub max_iters: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            variance_floor: 1e-6,
        }
    }
}

/// Two-component mixture; component 0 has the lower mean and models clean samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub converged: bool,
    pub iterations: usize,
    /// Mean log-likelihood of the initial parameters and after every EM step.
    pub log_likelihoods: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl GmmFit {
    /// A fit from explicit parameters, ordered so component 0 has the lower mean.
    pub fn from_parts(means: [f64; 2], variances: [f64; 2], weights: [f64; 2]) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter("mixture variances must be positive".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0 && *w < 1.0)) || ((weights[0] + weights[1]) - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter("mixture weights must lie in (0, 1) and sum to 1".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter("mixture means must be finite".into()));
        }
        let mut fit = Self {
            means,
            variances,
            weights,
            converged: true,
            iterations: 0,
            log_likelihoods: Vec::new(),
        };
        fit.order();
        Ok(fit)
    }

    fn order(&mut self) {
        if self.means[0] > self.means[1] {
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
            self.weights.swap(0, 1);
        }
    }

    fn log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k]))
    }

    /// Log-odds `ln(π_0 N_0(x) / π_1 N_1(x))`, a quadratic in `x`.
    fn log_odds(&self, x: f64) -> f64 {
        let [a, b] = self.log_joint(x);
        a - b
    }

    /// Extremum of the log-odds over `[lo, hi]`.
    fn log_odds_extremum(&self, lo: f64, hi: f64, max: bool) -> f64 {
        let [v0, v1] = self.variances;
        let [m0, m1] = self.means;
        let quad = 0.5 / v1 - 0.5 / v0;
        let lin = m0 / v0 - m1 / v1;
        let mut best = [lo, hi].map(|x| self.log_odds(x));
        if quad != 0.0 {
            let vertex = -lin / (2.0 * quad);
            if vertex > lo && vertex < hi {
                best[0] = if max {
                    best[0].max(self.log_odds(vertex))
                } else {
                    best[0].min(self.log_odds(vertex))
                };
            }
        }
        if max {
            best[0].max(best[1])
        } else {
            best[0].min(best[1])
        }
    }

    /// Posterior of the clean (lower-mean) component, made monotone.
    ///
    /// The raw posterior of a mixture with unequal variances turns back up in
    /// the tails of the wider component. Below `μ_1` this returns the largest
    /// raw posterior on `[x, μ_1]`; above it the smallest on `[μ_1, x]`. That
    /// is the tightest non-increasing envelope that agrees with the raw
    /// posterior wherever the raw posterior is already decreasing.
    pub fn clean_posterior(&self, x: f64) -> f64 {
        let m1 = self.means[1];
        let g = if x <= m1 {
            self.log_odds_extremum(x, m1, true)
        } else {
            self.log_odds_extremum(m1, x, false)
        };
        1.0 / (1.0 + (-g).exp())
    }

    pub fn mean_log_likelihood(&self, values: &[f64]) -> f64 {
        let total: f64 = values
            .iter()
            .map(|&x| {
                let [a, b] = self.log_joint(x);
                log_add(a, b)
            })
            .sum();
        total / values.len() as f64
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// EM for a two-component 1-D Gaussian mixture.
///
/// Initialisation: means at the 10th and 90th percentiles (min and max if
/// those coincide), both variances equal to the sample variance, equal
/// weights. Values are sorted before fitting, so the result does not depend
/// on their order.
pub fn fit_gmm_1d(values: &[f64], cfg: &GmmConfig) -> Result<GmmFit> {
    if values.len() < 2 {
        return Err(Error::Parameter(format!("need at least two values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("mixture inputs must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::DegenerateFit(sorted.len()));
    }

    let mean = sorted.iter().sum::<f64>() / n;
    let var = (sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(cfg.variance_floor);
    let (mut lo, mut hi) = (percentile(&sorted, 0.1), percentile(&sorted, 0.9));
    if lo == hi {
        lo = sorted[0];
        hi = sorted[sorted.len() - 1];
    }
    let mut fit = GmmFit {
        means: [lo, hi],
        variances: [var, var],
        weights: [0.5, 0.5],
        converged: false,
        iterations: 0,
        log_likelihoods: Vec::new(),
    };
    let mut ll = fit.mean_log_likelihood(&sorted);
    fit.log_likelihoods.push(ll);

    let mut resp = vec![0.0; sorted.len()];
    for it in 0..cfg.max_iters {
        // E-step: responsibility of component 0
        for (r, &x) in resp.iter_mut().zip(&sorted) {
            let [a, b] = fit.log_joint(x);
            *r = (a - log_add(a, b)).exp();
        }
        // M-step
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        let n0c = n0.max(1e-12);
        let n1c = n1.max(1e-12);
        let m0 = resp.iter().zip(&sorted).map(|(r, x)| r * x).sum::<f64>() / n0c;
        let m1 = resp.iter().zip(&sorted).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n1c;
        let v0 = resp
            .iter()
            .zip(&sorted)
            .map(|(r, x)| r * (x - m0) * (x - m0))
            .sum::<f64>()
            / n0c;
        let v1 = resp
            .iter()
            .zip(&sorted)
            .map(|(r, x)| (1.0 - r) * (x - m1) * (x - m1))
            .sum::<f64>()
            / n1c;
        let w0 = (n0 / n).clamp(1e-12, 1.0 - 1e-12);
        fit.means = [m0, m1];
        fit.variances = [v0.max(cfg.variance_floor), v1.max(cfg.variance_floor)];
        fit.weights = [w0, 1.0 - w0];
        fit.iterations = it + 1;

        let next = fit.mean_log_likelihood(&sorted);
        fit.log_likelihoods.push(next);
        if next - ll < cfg.tol {
            fit.converged = true;
            break;
        }
        ll = next;
    }
    fit.order();
    Ok(fit)
}

/// Sieve output for one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientSelection {
    pub client_id: ClientId,
    /// `q_i`, the clean posterior of each sample.
    pub clean_posterior: Vec<f64>,
    pub is_clean: Vec<bool>,
    /// `r_k`, the fraction of samples flagged noisy.
    pub noise_ratio: f64,
}

impl ClientSelection {
    pub fn from_posteriors(client_id: ClientId, clean_posterior: Vec<f64>) -> Self {
        let is_clean: Vec<bool> = clean_posterior.iter().map(|&q| q >= CLEAN_THRESHOLD).collect();
        let noisy = is_clean.iter().filter(|c| !**c).count();
        let noise_ratio = if is_clean.is_empty() {
            0.0
        } else {
            noisy as f64 / is_clean.len() as f64
        };
        Self {
            client_id,
            clean_posterior,
            is_clean,
            noise_ratio,
        }
    }

    /// Every sample clean with certainty; used when the mixture is degenerate.
    pub fn all_clean(client_id: ClientId, n: usize) -> Self {
        Self::from_posteriors(client_id, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.is_clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_clean.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SieveResult {
    pub clients: BTreeMap<ClientId, ClientSelection>,
}

impl SieveResult {
    pub fn get(&self, id: ClientId) -> Option<&ClientSelection> {
        self.clients.get(&id)
    }

    pub fn merge(&mut self, other: SieveResult) {
        self.clients.extend(other.clients);
    }
}

/// Scores every client's mean losses against a fitted mixture.
pub fn sieve(fit: &GmmFit, mean_losses: &[(ClientId, Vec<f64>)]) -> SieveResult {
    let clients = mean_losses
        .iter()
        .map(|(id, losses)| {
            let q = losses.iter().map(|&l| fit.clean_posterior(l)).collect();
            (*id, ClientSelection::from_posteriors(*id, q))
        })
        .collect();
    SieveResult { clients }
}

/// Pools all clients' mean losses, fits one mixture and scores each client.
/// A degenerate pool marks every sample clean.
pub fn centralized_sieve(mean_losses: &[(ClientId, Vec<f64>)], cfg: &GmmConfig) -> Result<SieveResult> {
    let pooled: Vec<f64> = mean_losses.iter().flat_map(|(_, l)| l.iter().copied()).collect();
    match fit_gmm_1d(&pooled, cfg) {
        Ok(fit) => Ok(sieve(&fit, mean_losses)),
        Err(Error::DegenerateFit(_)) => Ok(SieveResult {
            clients: mean_losses
                .iter()
                .map(|(id, l)| (*id, ClientSelection::all_clean(*id, l.len())))
                .collect(),
        }),
        Err(e) => Err(e),
    }
}

/// One mixture per client over that client's own values only.
pub fn per_client_sieve(mean_losses: &[(ClientId, Vec<f64>)], cfg: &GmmConfig) -> Result<SieveResult> {
    let mut out = SieveResult::default();
    for entry in mean_losses {
        out.merge(centralized_sieve(std::slice::from_ref(entry), cfg)?);
    }
    Ok(out)
}
