//! Evaluation metrics, per-round reports and CSV export.

use std::io::Write;

use crate::datagen::{ClientDataset, ClientId, Sample};
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::noise_model::ClientSelection;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundStats {
    pub client_id: ClientId,
    /// `r_k` held by the client after this round, if any.
    pub estimated_noise_ratio: Option<f64>,
    pub true_noise_ratio: f64,
    pub selection: Option<SelectionScore>,
    pub refined_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub test_accuracy: f64,
    pub memorization_fraction: f64,
    pub participants: Vec<ClientId>,
    pub clients: Vec<ClientRoundStats>,
}

fn predicted_class(params: &ModelParams, s: &Sample) -> Result<usize> {
    Ok(nn::argmax(&nn::predict(params, &s.features)?))
}

/// Fraction of test samples whose argmax prediction equals the true label.
pub fn test_accuracy(params: &ModelParams, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let mut hits = 0usize;
    for s in test {
        if predicted_class(params, s)? == s.true_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Among corrupted training samples, the fraction predicted as their wrong
/// given label. Zero when nothing is corrupted.
pub fn memorization_fraction<'a>(
    params: &ModelParams,
    clients: impl IntoIterator<Item = &'a ClientDataset>,
) -> Result<f64> {
    let mut noisy = 0usize;
    let mut memorized = 0usize;
    for s in clients.into_iter().flat_map(|c| &c.samples).filter(|s| s.is_corrupted()) {
        noisy += 1;
        if predicted_class(params, s)? == s.given_label {
            memorized += 1;
        }
    }
    Ok(if noisy == 0 { 0.0 } else { memorized as f64 / noisy as f64 })
}

/// Precision, recall and F1 of the sieve with "clean" as the positive class.
pub fn selection_f1(selection: &ClientSelection, client: &ClientDataset) -> Result<SelectionScore> {
    if selection.len() != client.len() {
        return Err(Error::Protocol(format!(
            "selection for client {} has {} entries, dataset has {}",
            client.client_id,
            selection.len(),
            client.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (s, &flag) in client.samples.iter().zip(&selection.is_clean) {
        match (flag, !s.is_corrupted()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SelectionScore { precision, recall, f1 })
}

/// Sample Pearson correlation. `None` for fewer than two pairs or a constant
/// series.
pub fn noise_ratio_pearson(estimates: &[f64], truths: &[f64]) -> Option<f64> {
    let n = estimates.len();
    if n < 2 || truths.len() != n {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(estimates), mean(truths));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in estimates.iter().zip(truths) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean test accuracy over the final `n` reports (all of them if fewer).
pub fn last_n_mean_accuracy(reports: &[RoundReport], n: usize) -> f64 {
    let tail = &reports[reports.len().saturating_sub(n)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(|r| r.test_accuracy).sum::<f64>() / tail.len() as f64
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Formats a metric for CSV output; missing or undefined values become `NaN`.
pub fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => "NaN".to_string(),
    }
}

pub fn write_rounds_csv<W: Write>(writer: W, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "test_accuracy", "memorization_fraction", "n_participants"])?;
    for r in reports {
        w.write_record([
            r.round.to_string(),
            fmt_value(Some(r.test_accuracy)),
            fmt_value(Some(r.memorization_fraction)),
            r.participants.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_client_metrics_csv<W: Write>(writer: W, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t",
        "client_id",
        "r_k_est",
        "rho_true",
        "precision",
        "recall",
        "f1",
        "refined_fraction",
    ])?;
    for r in reports {
        for c in &r.clients {
            w.write_record([
                r.round.to_string(),
                c.client_id.to_string(),
                fmt_value(c.estimated_noise_ratio),
                fmt_value(Some(c.true_noise_ratio)),
                fmt_value(c.selection.map(|s| s.precision)),
                fmt_value(c.selection.map(|s| s.recall)),
                fmt_value(c.selection.map(|s| s.f1)),
                fmt_value(Some(c.refined_fraction)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub last10_mean_acc: f64,
    pub pearson: Option<f64>,
    pub final_memorization: f64,
    pub config_hash: String,
}

pub const SUMMARY_HEADER: [&str; 5] = ["last10_mean_acc", "pearson", "seed", "config_hash", "final_memorization"];

pub fn write_summary_csv<W: Write>(writer: W, summary: &RunSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    w.write_record(summary_record(summary))?;
    w.flush()?;
    Ok(())
}

fn summary_record(s: &RunSummary) -> [String; 5] {
    [
        fmt_value(Some(s.last10_mean_acc)),
        fmt_value(s.pearson),
        s.seed.to_string(),
        s.config_hash.clone(),
        fmt_value(Some(s.final_memorization)),
    ]
}

/// One row per seed followed by `mean` and `std` rows in the seed column.
pub fn write_aggregate_summary_csv<W: Write>(writer: W, runs: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for s in runs {
        w.write_record(summary_record(s))?;
    }
    if !runs.is_empty() {
        let acc: Vec<f64> = runs.iter().map(|s| s.last10_mean_acc).collect();
        let mem: Vec<f64> = runs.iter().map(|s| s.final_memorization).collect();
        let pearson: Vec<f64> = runs.iter().filter_map(|s| s.pearson).collect();
        let (acc_m, acc_s) = mean_and_std(&acc);
        let (mem_m, mem_s) = mean_and_std(&mem);
        let (p_m, p_s) = if pearson.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_and_std(&pearson)
        };
        let hash = runs[0].config_hash.clone();
        for (label, a, p, m) in [("mean", acc_m, p_m, mem_m), ("std", acc_s, p_s, mem_s)] {
            w.write_record([
                fmt_value(Some(a)),
                fmt_value(Some(p)),
                label.to_string(),
                hash.clone(),
                fmt_value(Some(m)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
