use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, TrainConfig};
use super::infer::{evaluate, train_mdsnet};
use crate::error::{Error, Result};
use crate::metrics::{two_sample_ttest, MetricReport, TTest};
use crate::volume::Case;

/// Repeated k-fold cross-validation split into two groups of repetitions
/// whose per-repetition mean Dice values are compared by a t-test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    /// Repetition counts of the two groups.
    pub repetitions: [usize; 2],
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan { folds: 4, repetitions: [10, 20], seed: 0 }
    }
}

/// Shuffles `0..n` with `seed` and deals it into `folds` contiguous folds whose
/// sizes differ by at most one.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || n < folds {
        return Err(Error::Invalid(format!("cannot split {n} cases into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RepetitionResult {
    pub index: usize,
    pub group: usize,
    pub seed: u64,
    /// Case ids of each held-out fold.
    pub folds: Vec<Vec<String>>,
    pub reports: Vec<MetricReport>,
    pub mean_dice: f64,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub repetitions: Vec<RepetitionResult>,
    /// `None` when either group has fewer than two repetitions or no spread.
    pub dice_ttest: Option<TTest>,
}

impl CvOutcome {
    pub fn group_means(&self, group: usize) -> Vec<f64> {
        self.repetitions.iter().filter(|r| r.group == group).map(|r| r.mean_dice).collect()
    }

    /// One row per held-out case per repetition.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("repetition,group,seed,fold,id,dice,jaccard,precision,recall,rmse\n");
        for r in &self.repetitions {
            for (f, report) in r.reports.iter().enumerate() {
                for c in &report.cases {
                    let rmse = c.rmse.map(|v| v.to_string()).unwrap_or_default();
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        r.index, r.group, r.seed, f, c.id, c.dice, c.jaccard, c.precision, c.recall, rmse
                    ));
                }
            }
        }
        s
    }
}

/// Runs every repetition of `plan`: a fresh case permutation and fresh
/// training seeds per repetition, one model per fold trained on the other
/// folds and scored on the held-out one.
pub fn cross_validate(cases: &[Case], plan: &CvPlan, config: &TrainConfig) -> Result<CvOutcome> {
    if cases.len() < plan.folds {
        return Err(Error::Invalid(format!("{} cases cannot fill {} folds", cases.len(), plan.folds)));
    }
    let total = plan.repetitions[0] + plan.repetitions[1];
    let mut repetitions = Vec::with_capacity(total);
    for index in 0..total {
        let group = usize::from(index >= plan.repetitions[0]);
        let seed = derive_seed(plan.seed, 1000 + index as u64);
        let folds = fold_partition(cases.len(), plan.folds, seed)?;
        let mut reports = Vec::with_capacity(folds.len());
        for (f, test_idx) in folds.iter().enumerate() {
            let train: Vec<Case> =
                (0..cases.len()).filter(|i| !test_idx.contains(i)).map(|i| cases[i].clone()).collect();
            let test: Vec<Case> = test_idx.iter().map(|&i| cases[i].clone()).collect();
            let cfg = TrainConfig { seed: derive_seed(seed, f as u64), ..config.clone() };
            let mut models = train_mdsnet(&train, &cfg, None)?;
            reports.push(evaluate(&mut models, &test, cfg.refiner, &cfg)?);
        }
        let all: Vec<f64> = reports.iter().flat_map(|r| r.cases.iter().map(|c| c.dice)).collect();
        let mean_dice = all.iter().sum::<f64>() / all.len() as f64;
        let fold_ids = folds.iter().map(|f| f.iter().map(|&i| cases[i].id.clone()).collect()).collect();
        repetitions.push(RepetitionResult { index, group, seed, folds: fold_ids, reports, mean_dice });
    }
    let mut outcome = CvOutcome { repetitions, dice_ttest: None };
    outcome.dice_ttest = two_sample_ttest(&outcome.group_means(0), &outcome.group_means(1)).ok();
    Ok(outcome)
}
