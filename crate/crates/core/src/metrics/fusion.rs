use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Three view predictions aligned to the axial frame, their mean and the
/// thresholded mask.
#[derive(Clone, Debug)]
pub struct FusedPrediction {
    pub prob_axial: Volume,
    pub prob_coronal: Volume,
    pub prob_sagittal: Volume,
    pub mean_prob: Volume,
    pub mask: Volume,
    pub thr: f64,
}

/// Voxel-wise mean of any number of aligned probability maps and its
/// thresholded mask (`mean >= thr`). Each voxel's values are summed in sorted
/// order, so the result does not depend on the order of `maps`.
pub fn fuse_probabilities(maps: &[&Volume], thr: f64) -> Result<(Volume, Volume)> {
    let first = maps.first().ok_or_else(|| Error::Empty("probability maps to fuse".into()))?;
    if !(thr > 0.0 && thr < 1.0) {
        return Err(Error::Invalid(format!("threshold {thr} outside (0, 1)")));
    }
    for m in maps {
        if m.dims() != first.dims() {
            return Err(Error::shape("fuse_views", "dims", format!("{:?} vs {:?}", m.dims(), first.dims())));
        }
        if m.kind() == VolumeKind::Image {
            return Err(Error::Invalid("fuse_views expects probability or label volumes".into()));
        }
    }
    let n = maps.len() as f64;
    let mut vals = vec![0.0; maps.len()];
    let mean: Vec<f64> = (0..first.voxels().len())
        .map(|i| {
            for (v, m) in vals.iter_mut().zip(maps) {
                *v = m.voxels()[i];
            }
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / n
        })
        .collect();
    let mean = Volume::new(first.dims(), mean, VolumeKind::Probability)?.with_spacing(first.spacing());
    let mask = mean.threshold(thr);
    Ok((mean, mask))
}

pub fn fuse_views(prob_axial: &Volume, prob_coronal: &Volume, prob_sagittal: &Volume, thr: f64) -> Result<FusedPrediction> {
    let (mean_prob, mask) = fuse_probabilities(&[prob_axial, prob_coronal, prob_sagittal], thr)?;
    Ok(FusedPrediction {
        prob_axial: prob_axial.clone(),
        prob_coronal: prob_coronal.clone(),
        prob_sagittal: prob_sagittal.clone(),
        mean_prob,
        mask,
        thr,
    })
}
