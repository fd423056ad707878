//! Scripted multi-run experiments: seen/unseen generalization with and
//! without band masking, the mask-ratio sweep and the ablation table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::runner::train;
use super::TrainError;
use crate::data::{Family, Sample};
use crate::model::Variant;

pub const RHO_GRID: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

/// Train, seen-family and unseen-family sets built from one dataset spec.
pub struct ExperimentData {
    pub train: Vec<Sample>,
    pub seen: Vec<Sample>,
    pub unseen: Vec<Sample>,
    pub unseen_family: Family,
}

impl ExperimentData {
    pub fn build(cfg: &RunConfig) -> Result<Self, TrainError> {
        let seen_family = cfg.data.train_family;
        let unseen_family = cfg
            .data
            .eval_families
            .iter()
            .copied()
            .find(|&f| f != seen_family)
            .ok_or_else(|| TrainError::Config("need an evaluation family different from the training family".into()))?;
        Ok(ExperimentData {
            train: cfg.data.train_set()?,
            seen: cfg.data.eval_set(seen_family)?,
            unseen: cfg.data.eval_set(unseen_family)?,
            unseen_family,
        })
    }
}

/// One training run scored on both evaluation families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub rho: f64,
    pub seed: u64,
    pub seen_accuracy: f64,
    pub unseen_accuracy: f64,
    pub seen_ap: f64,
    pub unseen_ap: f64,
}

impl ArmResult {
    pub fn gap(&self) -> f64 {
        self.seen_accuracy - self.unseen_accuracy
    }
}

pub fn run_arm(cfg: &RunConfig, data: &ExperimentData, rho: f64, seed: u64) -> Result<ArmResult, TrainError> {
    let mut c = cfg.clone();
    c.model.rho = rho;
    c.seed = seed;
    let run = train(&c, &data.train, &[("seen", &data.seen), ("unseen", &data.unseen)], None)?;
    let (seen, unseen) = (&run.report.eval[0], &run.report.eval[1]);
    Ok(ArmResult {
        rho,
        seed,
        seen_accuracy: seen.accuracy,
        unseen_accuracy: unseen.accuracy,
        seen_ap: seen.average_precision,
        unseen_ap: unseen.average_precision,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Medians over seeds for one mask ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub rho: f64,
    pub runs: usize,
    pub median_seen_accuracy: f64,
    pub median_unseen_accuracy: f64,
    /// Median over seeds of the per-seed (seen − unseen) gap.
    pub median_gap: f64,
    pub median_seen_ap: f64,
    pub median_unseen_ap: f64,
}

pub fn summarize(rho: f64, arms: &[ArmResult]) -> ArmSummary {
    let col = |f: fn(&ArmResult) -> f64| median(&arms.iter().map(f).collect::<Vec<_>>());
    ArmSummary {
        rho,
        runs: arms.len(),
        median_seen_accuracy: col(|a| a.seen_accuracy),
        median_unseen_accuracy: col(|a| a.unseen_accuracy),
        median_gap: col(ArmResult::gap),
        median_seen_ap: col(|a| a.seen_ap),
        median_unseen_ap: col(|a| a.unseen_ap),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub unmasked: ArmSummary,
    pub masked: ArmSummary,
    pub runs: Vec<ArmResult>,
}

impl GeneralizationReport {
    /// Masking does not widen the seen/unseen gap.
    pub fn masking_narrows_gap(&self) -> bool {
        self.masked.median_gap <= self.unmasked.median_gap
    }
}

/// Trains `ρ = 0` and `ρ = cfg.model.rho` for every seed on the same data.
pub fn run_generalization(cfg: &RunConfig, seeds: &[u64]) -> Result<GeneralizationReport, TrainError> {
    let data = ExperimentData::build(cfg)?;
    let masked_rho = cfg.model.rho;
    let mut runs = Vec::new();
    for &seed in seeds {
        runs.push(run_arm(cfg, &data, 0.0, seed)?);
        runs.push(run_arm(cfg, &data, masked_rho, seed)?);
    }
    let pick = |rho: f64| runs.iter().filter(|r| r.rho == rho).cloned().collect::<Vec<_>>();
    Ok(GeneralizationReport {
        unmasked: summarize(0.0, &pick(0.0)),
        masked: summarize(masked_rho, &pick(masked_rho)),
        runs,
    })
}

/// One summary row per mask ratio.
pub fn run_rho_sweep(cfg: &RunConfig, rhos: &[f64], seeds: &[u64]) -> Result<Vec<ArmSummary>, TrainError> {
    let data = ExperimentData::build(cfg)?;
    rhos.iter()
        .map(|&rho| {
            let arms = seeds
                .iter()
                .map(|&seed| run_arm(cfg, &data, rho, seed))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(summarize(rho, &arms))
        })
        .collect()
}

pub fn sweep_csv(rows: &[ArmSummary]) -> String {
    let mut s = String::from("rho,runs,seen_accuracy,unseen_accuracy,gap,seen_ap,unseen_ap\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.rho,
            r.runs,
            r.median_seen_accuracy,
            r.median_unseen_accuracy,
            r.median_gap,
            r.median_seen_ap,
            r.median_unseen_ap
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub average_precision: f64,
    pub unseen_accuracy: f64,
    pub unseen_ap: f64,
}

/// Trains every listed variant with identical seed and data.
pub fn run_ablation(cfg: &RunConfig, variants: &[&str]) -> Result<Vec<AblationRow>, TrainError> {
    for v in variants {
        v.parse::<Variant>()?;
    }
    let data = ExperimentData::build(cfg)?;
    variants
        .iter()
        .map(|&id| {
            let mut c = cfg.clone();
            c.model.variant = id.to_string();
            let run = train(&c, &data.train, &[("seen", &data.seen), ("unseen", &data.unseen)], None)?;
            let (seen, unseen) = (&run.report.eval[0], &run.report.eval[1]);
            Ok(AblationRow {
                variant: id.to_string(),
                accuracy: seen.accuracy,
                average_precision: seen.average_precision,
                unseen_accuracy: unseen.accuracy,
                unseen_ap: unseen.average_precision,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,accuracy,average_precision,unseen_accuracy,unseen_ap\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.variant, r.accuracy, r.average_precision, r.unseen_accuracy, r.unseen_ap
        )
        .unwrap();
    }
    s
}
