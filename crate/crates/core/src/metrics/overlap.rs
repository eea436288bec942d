use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Set-overlap scores of two binary masks.
///
/// Two empty masks score 1 everywhere. When only one is empty every score is
/// 0, including the ratio whose denominator vanishes.
pub fn binary_overlap_metrics(pred: &Volume, label: &Volume) -> Result<Overlap> {
    if pred.dims() != label.dims() {
        return Err(Error::shape("overlap", "dims", format!("{:?} vs {:?}", pred.dims(), label.dims())));
    }
    let (mut tp, mut np, mut nl) = (0usize, 0usize, 0usize);
    for (&p, &y) in pred.voxels().iter().zip(label.voxels()) {
        for (v, what) in [(p, "prediction"), (y, "label")] {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Invalid(format!("{what} mask contains non-binary value {v}")));
            }
        }
        let (p, y) = (p == 1.0, y == 1.0);
        tp += (p && y) as usize;
        np += p as usize;
        nl += y as usize;
    }
    if np == 0 && nl == 0 {
        return Ok(Overlap { dice: 1.0, jaccard: 1.0, precision: 1.0, recall: 1.0 });
    }
    if np == 0 || nl == 0 {
        return Ok(Overlap { dice: 0.0, jaccard: 0.0, precision: 0.0, recall: 0.0 });
    }
    let (tp, np, nl) = (tp as f64, np as f64, nl as f64);
    Ok(Overlap {
        dice: 2.0 * tp / (np + nl),
        jaccard: tp / (np + nl - tp),
        precision: tp / np,
        recall: tp / nl,
    })
}
