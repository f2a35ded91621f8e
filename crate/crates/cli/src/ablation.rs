//! Variant × seed grid over one shared dataset.

use std::path::Path;

use atd_core::config::RunConfig;
use atd_core::metrics::{Aggregates, MetricsReport};
use atd_core::training::{train, Datasets};
use atd_core::Result;
use serde::{Deserialize, Serialize};

pub const RESULT_FILE: &str = "run_result.json";
pub const SUMMARY_FILE: &str = "ablation_summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub final_step: usize,
    pub seen: Aggregates,
    pub unseen: Aggregates,
    pub best_step: usize,
    pub best_unseen_sr: f64,
    /// Final-step report on the unseen split.
    pub unseen_report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMean {
    pub variant: String,
    pub runs: usize,
    pub unseen_sr: f64,
    pub unseen_spl: f64,
    pub best_unseen_sr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub means: Vec<VariantMean>,
    pub runs: Vec<AblationRun>,
}

impl AblationSummary {
    pub fn mean(&self, variant: &str) -> Option<&VariantMean> {
        self.means.iter().find(|m| m.variant == variant)
    }
}

/// Trains one run into `dir`, or reuses a finished result found there.
pub fn run_one(base: &RunConfig, data: &Datasets, variant: &str, seed: u64, dir: &Path) -> Result<AblationRun> {
    let done = dir.join(RESULT_FILE);
    if done.exists() {
        return Ok(serde_json::from_str(&std::fs::read_to_string(&done)?)?);
    }
    let mut cfg = base.clone();
    cfg.model.variant = variant.to_string();
    cfg.train.seed = seed;
    let outcome = train(&cfg, data, Some(dir))?;
    let last = outcome.log.evals.last().ok_or(atd_core::Error::Empty("evaluation log"))?;
    let (best_step, best_unseen_sr) = outcome.best.unwrap_or((last.step, last.unseen.aggregate.sr));
    let run = AblationRun {
        variant: variant.to_string(),
        seed,
        final_step: last.step,
        seen: last.seen.aggregate.clone(),
        unseen: last.unseen.aggregate.clone(),
        best_step,
        best_unseen_sr,
        unseen_report: last.unseen.clone(),
    };
    std::fs::write(&done, serde_json::to_string_pretty(&run)?)?;
    Ok(run)
}

pub fn summarize(config: &RunConfig, variants: &[String], seeds: &[u64], runs: Vec<AblationRun>) -> AblationSummary {
    let means = variants
        .iter()
        .map(|v| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| &r.variant == v).collect();
            let k = rs.len().max(1) as f64;
            VariantMean {
                variant: v.clone(),
                runs: rs.len(),
                unseen_sr: rs.iter().map(|r| r.unseen.sr).sum::<f64>() / k,
                unseen_spl: rs.iter().map(|r| r.unseen.spl).sum::<f64>() / k,
                best_unseen_sr: rs.iter().map(|r| r.best_unseen_sr).sum::<f64>() / k,
            }
        })
        .collect();
    AblationSummary { config: config.clone(), seeds: seeds.to_vec(), means, runs }
}

/// Runs every (variant, seed) pair in `out/<variant>/seed_<s>` and writes the summary.
pub fn run_grid(
    base: &RunConfig,
    data: &Datasets,
    variants: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<AblationSummary> {
    let mut runs = Vec::new();
    for v in variants {
        for &s in seeds {
            log::info!("ablation: variant {v}, seed {s}");
            runs.push(run_one(base, data, v, s, &out.join(v).join(format!("seed_{s}")))?);
        }
    }
    let summary = summarize(base, variants, seeds, runs);
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use atd_core::metrics::SuccessMode;

    fn run(variant: &str, seed: u64, sr: f64, best: f64) -> AblationRun {
        let agg = Aggregates { sr, spl: sr / 2.0, ..Aggregates::default() };
        AblationRun {
            variant: variant.into(),
            seed,
            final_step: 10,
            seen: agg.clone(),
            unseen: agg.clone(),
            best_step: 5,
            best_unseen_sr: best,
            unseen_report: MetricsReport {
                epsilon: 3.0,
                mode: SuccessMode::Threshold,
                episode_count: 0,
                aggregate: agg,
                episodes: vec![],
            },
        }
    }

    #[test]
    fn means_are_per_variant() {
        let variants = vec!["full".to_string(), "baseline".to_string()];
        let runs = vec![run("full", 0, 0.8, 0.9), run("full", 1, 0.6, 0.7), run("baseline", 0, 0.5, 0.5)];
        let s = summarize(&RunConfig::default(), &variants, &[0, 1], runs);
        let full = s.mean("full").unwrap();
        assert_eq!(full.runs, 2);
        assert!((full.unseen_sr - 0.7).abs() < 1e-12);
        assert!((full.unseen_spl - 0.35).abs() < 1e-12);
        assert!((full.best_unseen_sr - 0.8).abs() < 1e-12);
        assert_eq!(s.mean("baseline").unwrap().runs, 1);
        assert!(s.mean("im_only").is_none());
    }

    #[test]
    fn finished_runs_are_reused() {
        let dir = tempfile::tempdir().unwrap();
        let stored = run("full", 3, 0.25, 0.5);
        std::fs::write(dir.path().join(RESULT_FILE), serde_json::to_string(&stored).unwrap()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.train_worlds = 1;
        cfg.data.unseen_worlds = 1;
        let data = atd_core::training::build_datasets(&cfg.data).unwrap();
        let got = run_one(&cfg, &data, "full", 3, dir.path()).unwrap();
        assert_eq!(got, stored);
    }
}
