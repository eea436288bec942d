use std::fmt;

use serde::Serialize;

use super::config::TrainConfig;
use super::infer::{evaluate, train_mdsnet};
use crate::error::{Error, Result};
use crate::metrics::{sensitivity_ratio, MetricReport};
use crate::volume::Case;

/// What a sweep varies.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    StackSize(Vec<usize>),
    LambdaGrid(Vec<(f64, f64)>),
    /// Multiplicative factors applied to one coefficient at a time.
    LambdaFloat(Vec<f64>),
    /// U-Net, Stack-U-Net, MDS-Net without and with refinement.
    Ablation,
}

impl SweepAxis {
    pub fn default_stack_sizes() -> Self {
        SweepAxis::StackSize(vec![3, 5, 7, 9])
    }

    pub fn default_lambda_grid() -> Self {
        SweepAxis::LambdaGrid(vec![(0.4, 0.6), (0.5, 0.5), (0.6, 0.4)])
    }

    pub fn default_lambda_float() -> Self {
        SweepAxis::LambdaFloat(vec![0.8, 0.9, 1.1, 1.2])
    }
}

/// The four model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Single-slice input and output, plain Dice.
    UNet,
    /// `k`-slice stacks, plain Dice.
    StackUNet,
    /// `k`-slice stacks with the slice regulariser, no refinement.
    MdsNetStar,
    /// As above plus refinement.
    MdsNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::UNet, Variant::StackUNet, Variant::MdsNetStar, Variant::MdsNet];

    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        match self {
            Variant::UNet => TrainConfig { k: 1, lambda_v: 1.0, lambda_s: 0.0, refiner: false, ..base.clone() },
            Variant::StackUNet => TrainConfig { lambda_v: 1.0, lambda_s: 0.0, refiner: false, ..base.clone() },
            Variant::MdsNetStar => TrainConfig { refiner: false, ..base.clone() },
            Variant::MdsNet => TrainConfig { refiner: true, ..base.clone() },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::UNet => "U-Net",
            Variant::StackUNet => "Stack-U-Net",
            Variant::MdsNetStar => "MDS-Net*",
            Variant::MdsNet => "MDS-Net",
        })
    }
}

/// The perturbed `(λ_v, λ_s)` pairs: each coefficient scaled by each factor
/// while the other stays at its benchmark value.
pub fn lambda_float_settings(lambda_v: f64, lambda_s: f64, factors: &[f64]) -> Vec<(String, f64, f64)> {
    let mut out = Vec::with_capacity(2 * factors.len());
    for &f in factors {
        out.push((format!("lambda_v x{f}"), lambda_v * f, lambda_s));
    }
    for &f in factors {
        out.push((format!("lambda_s x{f}"), lambda_v, lambda_s * f));
    }
    out
}

/// Labelled configurations a sweep trains. The λ-float axis leads with the
/// unperturbed benchmark.
pub fn sweep_settings(axis: &SweepAxis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        SweepAxis::StackSize(ks) => ks.iter().map(|&k| (format!("k={k}"), TrainConfig { k, ..base.clone() })).collect(),
        SweepAxis::LambdaGrid(grid) => grid
            .iter()
            .map(|&(v, s)| (format!("lambda=({v},{s})"), TrainConfig { lambda_v: v, lambda_s: s, ..base.clone() }))
            .collect(),
        SweepAxis::LambdaFloat(factors) => std::iter::once(("benchmark".to_string(), base.clone()))
            .chain(
                lambda_float_settings(base.lambda_v, base.lambda_s, factors)
                    .into_iter()
                    .map(|(label, v, s)| (label, TrainConfig { lambda_v: v, lambda_s: s, ..base.clone() })),
            )
            .collect(),
        SweepAxis::Ablation => Variant::ALL.iter().map(|v| (v.to_string(), v.config(base))).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub k: usize,
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub refiner: bool,
    pub dice_mean: f64,
    pub dice_stdv: f64,
    pub rmse_mean: Option<f64>,
    /// Relative Dice change against the benchmark row (λ-float axis only).
    pub sensitivity: Option<f64>,
    #[serde(skip)]
    pub report: MetricReport,
}

fn row(setting: String, cfg: &TrainConfig, report: MetricReport) -> Result<SweepRow> {
    let agg = report.aggregate()?;
    Ok(SweepRow {
        setting,
        k: cfg.k,
        lambda_v: cfg.lambda_v,
        lambda_s: cfg.lambda_s,
        refiner: cfg.refiner,
        dice_mean: agg.dice.mean,
        dice_stdv: agg.dice.stdv,
        rmse_mean: agg.rmse.map(|r| r.mean),
        sensitivity: None,
        report,
    })
}

/// Trains and evaluates one model per setting of `axis`. In the ablation the
/// refined and unrefined MDS-Net share one set of trained networks.
pub fn sweep(train: &[Case], test: &[Case], base: &TrainConfig, axis: &SweepAxis) -> Result<Vec<SweepRow>> {
    if test.is_empty() {
        return Err(Error::Empty("sweep test cases".into()));
    }
    let mut rows = Vec::new();
    if *axis == SweepAxis::Ablation {
        for v in [Variant::UNet, Variant::StackUNet] {
            let cfg = v.config(base);
            let mut models = train_mdsnet(train, &cfg, None)?;
            rows.push(row(v.to_string(), &cfg, evaluate(&mut models, test, false, &cfg)?)?);
        }
        let cfg = Variant::MdsNet.config(base);
        let mut models = train_mdsnet(train, &cfg, None)?;
        let star = Variant::MdsNetStar.config(base);
        rows.push(row(Variant::MdsNetStar.to_string(), &star, evaluate(&mut models, test, false, &cfg)?)?);
        rows.push(row(Variant::MdsNet.to_string(), &cfg, evaluate(&mut models, test, true, &cfg)?)?);
        return Ok(rows);
    }
    for (label, cfg) in sweep_settings(axis, base) {
        let mut models = train_mdsnet(train, &cfg, None)?;
        let report = evaluate(&mut models, test, cfg.refiner, &cfg)?;
        rows.push(row(label, &cfg, report)?);
    }
    if let SweepAxis::LambdaFloat(_) = axis {
        let bench = rows[0].dice_mean;
        for r in rows.iter_mut().skip(1) {
            r.sensitivity = Some(sensitivity_ratio(r.dice_mean, bench)?);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
