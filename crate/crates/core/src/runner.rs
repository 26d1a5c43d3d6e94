//! End-to-end experiments: data synthesis, federation and CSV artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::config::{Partition, RunConfig};
use crate::datagen::{self, ClientDataset, Sample};
use crate::error::Result;
use crate::metrics::{self, RunSummary};
use crate::protocol::{FederationState, RunOutcome};

pub struct SeedRun {
    pub outcome: RunOutcome,
    pub summary: RunSummary,
}

/// Synthetic data, partition and label noise for one seed.
pub fn build_federation(cfg: &RunConfig, seed: u64) -> Result<(Vec<ClientDataset>, Vec<Sample>)> {
    let data = datagen::generate_dataset(&cfg.dataset_spec(), seed)?;
    let clients = match cfg.data.partition {
        Partition::Iid => datagen::partition_iid(&data.train, cfg.federation.clients, seed)?,
        Partition::Dirichlet => {
            datagen::partition_dirichlet(&data.train, cfg.federation.clients, cfg.data.dirichlet_alpha, seed)?
        }
    };
    let clients = datagen::inject_noise(clients, &cfg.noise_config(), cfg.data.n_classes, seed)?;
    Ok((clients, data.test))
}

/// Runs one seed in memory.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let (clients, test) = build_federation(cfg, seed)?;
    let state = FederationState::new(cfg.protocol(seed), cfg.data.n_classes, clients, test)?;
    let outcome = state.run()?;
    let summary = RunSummary {
        seed,
        last10_mean_acc: outcome.last10_mean_accuracy(),
        pearson: outcome.noise_ratio_pearson(),
        final_memorization: outcome.final_memorization(),
        config_hash: cfg.hash(),
    };
    Ok(SeedRun { outcome, summary })
}

pub fn write_seed_outputs(dir: &Path, run: &SeedRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    let reports = &run.outcome.reports;
    metrics::write_rounds_csv(BufWriter::new(File::create(dir.join("rounds.csv"))?), reports)?;
    metrics::write_client_metrics_csv(BufWriter::new(File::create(dir.join("clients.csv"))?), reports)?;
    metrics::write_summary_csv(BufWriter::new(File::create(dir.join("summary.csv"))?), &run.summary)?;
    Ok(())
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn set_status(out: &Path, status: &str) -> Result<()> {
    fs::write(out.join("status.txt"), format!("{status}\n"))?;
    Ok(())
}

/// Runs every configured seed, writing `seed_N/` artifacts, an aggregate
/// `summary.csv` and `status.txt` (`running`, `ok` or `failed: ...`) under `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path, mut on_seed: impl FnMut(&RunSummary)) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    set_status(out, "running")?;
    let result = (|| {
        let mut summaries = Vec::with_capacity(cfg.run.seeds.len());
        for &seed in &cfg.run.seeds {
            let run = run_seed(cfg, seed)?;
            write_seed_outputs(&seed_dir(out, seed), &run)?;
            on_seed(&run.summary);
            summaries.push(run.summary);
        }
        metrics::write_aggregate_summary_csv(BufWriter::new(File::create(out.join("summary.csv"))?), &summaries)?;
        Ok(summaries)
    })();
    match &result {
        Ok(_) => set_status(out, "ok")?,
        Err(e) => set_status(out, &format!("failed: {e}"))?,
    }
    result
}
