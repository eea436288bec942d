use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{derive_seed, TrainConfig};
use crate::biclstm::{train_refiner, BiClstm};
use crate::error::{Error, Result};
use crate::nn::{Module, SgdMomentum};
use crate::tensor::Tensor;
use crate::unet::StackUNet;
use crate::volume::{
    augment, crop_to, extract_all, label_centroid, plan_stacks, random_augmentation, transpose_view, volume_center,
    Case, ViewAxis, Volume,
};

/// A case transposed into a view and cropped to the network extents.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub image: Volume,
    pub label: Volume,
}

/// Transposes a case into `view` and crops it. Training crops centre on the
/// label's bounding box; an empty label falls back to the slice centre.
pub fn prepare_view(case: &Case, view: ViewAxis, crop: Option<[usize; 2]>) -> Result<ViewData> {
    let image = transpose_view(&case.image, view);
    let label = transpose_view(&case.label, view);
    match crop {
        None => Ok(ViewData { image, label }),
        Some([l, w]) => {
            let centre = label_centroid(&label).unwrap_or_else(|| volume_center(&label));
            Ok(ViewData { image: crop_to(&image, l, w, centre)?, label: crop_to(&label, l, w, centre)? })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_v: f64,
    pub l_s: f64,
}

pub struct TrainOutcome {
    pub model: StackUNet,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,l_v,l_s\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.l_v, r.l_s));
    }
    s
}

fn salt(view: ViewAxis) -> u64 {
    match view {
        ViewAxis::Axial => 1,
        ViewAxis::Coronal => 2,
        ViewAxis::Sagittal => 3,
    }
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Trains one view's stack U-Net.
///
/// An epoch visits every stack of every training case once, in an order
/// shuffled by the seeded generator. Each mini-batch of `batch` stacks
/// accumulates gradients scaled by `1/batch` before one momentum step. With
/// `out_dir` set, the model is checkpointed after every epoch and the loss
/// history written alongside. A non-finite loss or gradient aborts with
/// [`Error::Diverged`] pointing at the last completed checkpoint.
pub fn train_unet(cases: &[Case], view: ViewAxis, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::Empty("training cases".into()));
    }
    let mut samples: Vec<(Tensor, Tensor)> = Vec::new();
    let mut extents = None;
    for case in cases {
        let data = prepare_view(case, view, config.crop(view))?;
        let [d, l, w] = data.image.dims();
        if *extents.get_or_insert((l, w)) != (l, w) {
            return Err(Error::shape("train", "extent", format!("case {} has {l}x{w} slices in the {view} view", case.id)));
        }
        let plan = plan_stacks(d, config.k)?;
        samples.extend(extract_all(&data.image, &plan)?.into_iter().zip(extract_all(&data.label, &plan)?));
    }
    let (l, w) = extents.expect("non-empty cases");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, salt(view)));
    let mut model = StackUNet::new(config.unet_config(l, w), &mut rng)?;
    let weights = config.loss_weights()?;
    let opt = SgdMomentum::new(config.lr, config.momentum);
    let ckpt_path: Option<PathBuf> = out_dir.map(|d| d.join(format!("{view}-unet.ckpt")));
    let mut last_good: Option<PathBuf> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_v, mut sum_s) = (0.0, 0.0, 0.0);
        let diverged = |_| Error::Diverged { epoch, last_good: last_good.clone() };
        for batch in order.chunks(config.batch) {
            model.zero_grad();
            for &i in batch {
                let (x, y) = &samples[i];
                let aug = if config.augment { random_augmentation(&mut rng, l == w) } else { None };
                let value = match aug {
                    Some(op) => {
                        let (xa, ya) = augment(x, y, op)?;
                        model.accumulate_gradients(&xa, &ya, &weights, 1.0 / batch.len() as f64)
                    }
                    None => model.accumulate_gradients(x, y, &weights, 1.0 / batch.len() as f64),
                };
                let value = value.map_err(|e| if is_non_finite(&e) { diverged(()) } else { e })?;
                if !value.total.is_finite() {
                    return Err(diverged(()));
                }
                sum += value.total;
                sum_v += value.l_v;
                sum_s += value.l_s;
            }
            opt.step(&mut model).map_err(|e| if is_non_finite(&e) { diverged(()) } else { e })?;
        }
        let n = samples.len() as f64;
        history.push(EpochRecord { epoch: epoch + 1, loss: sum / n, l_v: sum_v / n, l_s: sum_s / n });
        if let (Some(path), Some(dir)) = (&ckpt_path, out_dir) {
            model.to_checkpoint().save(path)?;
            fs::write(dir.join(format!("{view}-unet-history.csv")), history_csv(&history))?;
            last_good = Some(path.clone());
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Trains a refiner on `(probability, label)` pairs with the config's
/// refiner schedule; returns the model and per-epoch mean loss.
pub fn train_refiner_on(pairs: &[(Volume, Volume)], config: &TrainConfig) -> Result<(BiClstm, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4));
    let mut model = BiClstm::new(config.refiner_config(), &mut rng)?;
    let history = train_refiner(&mut model, pairs, config.refiner_epochs, config.refiner_lr, config.refiner_momentum, &mut rng)?;
    Ok((model, history))
}
