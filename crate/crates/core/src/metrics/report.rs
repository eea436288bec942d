use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use super::boundary::boundary_rmse;
use super::overlap::binary_overlap_metrics;
use super::stats::{summarize, Summary};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    /// Absent when either mask is empty.
    pub rmse: Option<f64>,
}

/// Scores one binary prediction against its label. RMSE is in physical
/// units when the label carries spacing.
pub fn evaluate_case(id: &str, pred: &Volume, label: &Volume) -> Result<CaseMetrics> {
    let o = binary_overlap_metrics(pred, label)?;
    let rmse = match boundary_rmse(pred, label, label.spacing()) {
        Ok(r) => Some(r),
        Err(Error::Empty(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics { id: id.to_string(), dice: o.dice, jaccard: o.jaccard, precision: o.precision, recall: o.recall, rmse })
}

/// Metrics restricted to the slices in `range`.
pub fn slice_range_metrics(pred: &Volume, label: &Volume, range: Range<usize>) -> Result<MetricReport> {
    if pred.dims() != label.dims() {
        return Err(Error::shape("slice_range_metrics", "dims", format!("{:?} vs {:?}", pred.dims(), label.dims())));
    }
    let id = format!("slices {}..{}", range.start, range.end);
    let case = evaluate_case(&id, &pred.sub_depth(range.clone())?, &label.sub_depth(range)?)?;
    Ok(MetricReport { cases: vec![case] })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub cases: usize,
    pub dice: Summary,
    pub jaccard: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub rmse: Option<Summary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
}

impl MetricReport {
    pub fn mean_dice(&self) -> Result<f64> {
        Ok(self.aggregate()?.dice.mean)
    }

    pub fn aggregate(&self) -> Result<Aggregate> {
        let col = |f: fn(&CaseMetrics) -> f64| self.cases.iter().map(f).collect::<Vec<_>>();
        let rmse: Vec<f64> = self.cases.iter().filter_map(|c| c.rmse).collect();
        Ok(Aggregate {
            cases: self.cases.len(),
            dice: summarize(&col(|c| c.dice))?,
            jaccard: summarize(&col(|c| c.jaccard))?,
            precision: summarize(&col(|c| c.precision))?,
            recall: summarize(&col(|c| c.recall))?,
            rmse: if rmse.is_empty() { None } else { Some(summarize(&rmse)?) },
        })
    }

    /// One row per case; empty RMSE cells for undefined distances.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cases {
            w.serialize(c).map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        let mut s = String::from_utf8(bytes).expect("csv output is utf-8");
        if s.is_empty() {
            s.push_str("id,dice,jaccard,precision,recall,rmse\n");
        }
        Ok(s)
    }

    /// Aggregate as JSON, each metric with `mean`, `stdv`, `min`, `max` and a
    /// `mean±stdv [min, max]` display string.
    pub fn to_json(&self) -> Result<String> {
        let agg = self.aggregate()?;
        let fmt = |s: &Summary| format!("{:.4}±{:.4} [{:.4}, {:.4}]", s.mean, s.stdv, s.min, s.max);
        let entry = |s: &Summary| {
            serde_json::json!({ "mean": s.mean, "stdv": s.stdv, "min": s.min, "max": s.max, "display": fmt(s) })
        };
        let value = serde_json::json!({
            "cases": agg.cases,
            "dice": entry(&agg.dice),
            "jaccard": entry(&agg.jaccard),
            "precision": entry(&agg.precision),
            "recall": entry(&agg.recall),
            "rmse": agg.rmse.as_ref().map(entry),
        });
        Ok(serde_json::to_string_pretty(&value).expect("json value serialises"))
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()?)?;
        fs::write(json_path, self.to_json()?)?;
        Ok(())
    }
}
