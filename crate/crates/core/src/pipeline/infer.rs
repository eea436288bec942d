use std::path::Path;

use super::config::TrainConfig;
use super::train::{train_refiner_on, train_unet, EpochRecord};
use crate::biclstm::{refine_volume, BiClstm};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, fuse_probabilities, MetricReport};
use crate::nn::{Checkpoint, Mode};
use crate::unet::StackUNet;
use crate::volume::{
    crop_window, extract_all, inverse_view, merge_stacks, plan_stacks, transpose_view, uncrop, volume_center, Case,
    ViewAxis, Volume, VolumeKind,
};

pub struct ViewModel {
    pub view: ViewAxis,
    pub model: StackUNet,
    pub history: Vec<EpochRecord>,
}

/// Per-view networks plus the optional refiner.
pub struct TrainedModels {
    pub views: Vec<ViewModel>,
    pub refiner: Option<BiClstm>,
    pub refiner_history: Vec<f64>,
}

impl TrainedModels {
    /// Loads `{view}-unet.ckpt` for every view and `refiner.ckpt` if present.
    /// Histories are not restored.
    pub fn load(dir: &Path, views: &[ViewAxis]) -> Result<Self> {
        let mut out = TrainedModels { views: Vec::new(), refiner: None, refiner_history: Vec::new() };
        for &view in views {
            let ckpt = Checkpoint::load(&dir.join(format!("{view}-unet.ckpt")))?;
            out.views.push(ViewModel { view, model: StackUNet::from_checkpoint(&ckpt)?, history: Vec::new() });
        }
        let refiner = dir.join("refiner.ckpt");
        if refiner.exists() {
            out.refiner = Some(BiClstm::from_checkpoint(&Checkpoint::load(&refiner)?)?);
        }
        Ok(out)
    }

    fn model_mut(&mut self, view: ViewAxis) -> Result<&mut StackUNet> {
        self.views
            .iter_mut()
            .find(|v| v.view == view)
            .map(|v| &mut v.model)
            .ok_or_else(|| Error::Invalid(format!("no model for the {view} view")))
    }
}

/// Probability volume in the axial frame from one view's network: stacks are
/// cut along the view's slicing axis, predicted in eval mode and merged with
/// overlap averaging. Slices wider than the network are cropped around their
/// centre and the prediction is zero outside the crop.
pub fn predict(model: &mut StackUNet, image: &Volume, view: ViewAxis) -> Result<Volume> {
    let cfg = *model.config();
    let viewed = transpose_view(image, view);
    let dims = viewed.dims();
    let win = crop_window(dims, cfg.length, cfg.width, volume_center(&viewed))
        .map_err(|e| Error::shape("predict", "extent", format!("{view} slices {}x{}: {e}", dims[1], dims[2])))?;
    let cropped = crate::volume::crop_to(&viewed, cfg.length, cfg.width, volume_center(&viewed))?;
    let plan = plan_stacks(dims[0], cfg.k)?;
    let outputs = extract_all(&cropped, &plan)?
        .iter()
        .map(|stack| model.forward(stack, Mode::Eval))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_stacks(&outputs, &plan, VolumeKind::Probability)?;
    let full = uncrop(&merged, dims, win)?;
    Ok(inverse_view(&full, view).with_spacing(image.spacing()))
}

pub struct PipelineOutput {
    pub per_view: Vec<(ViewAxis, Volume)>,
    /// Mean of the view probabilities (the single view's map when only one runs).
    pub fused: Volume,
    pub refined: Option<Volume>,
    pub mask: Volume,
}

/// Predicts each requested view, averages in the axial frame, optionally
/// refines, and thresholds at `config.thr`.
pub fn run_pipeline(image: &Volume, models: &mut TrainedModels, use_refiner: bool, config: &TrainConfig) -> Result<PipelineOutput> {
    if config.views.is_empty() {
        return Err(Error::Invalid("no views requested".into()));
    }
    let mut per_view = Vec::with_capacity(config.views.len());
    for &view in &config.views {
        let model = models.model_mut(view)?;
        per_view.push((view, predict(model, image, view)?));
    }
    let fused = if per_view.len() == 1 {
        per_view[0].1.clone()
    } else {
        let maps: Vec<&Volume> = per_view.iter().map(|(_, v)| v).collect();
        fuse_probabilities(&maps, config.thr)?.0
    };
    let refined = match (&models.refiner, use_refiner) {
        (Some(r), true) => Some(refine_volume(r, &fused)?),
        (None, true) => return Err(Error::Invalid("refinement requested but no refiner is trained".into())),
        _ => None,
    };
    let mask = refined.as_ref().unwrap_or(&fused).threshold(config.thr);
    Ok(PipelineOutput { per_view, fused, refined, mask })
}

/// Trains every configured view, then (if enabled) the refiner on the fused
/// training-set probabilities. Checkpoints go to `out_dir` when given.
pub fn train_mdsnet(cases: &[Case], config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainedModels> {
    config.validate()?;
    let mut models = TrainedModels { views: Vec::new(), refiner: None, refiner_history: Vec::new() };
    for &view in &config.views {
        let out = train_unet(cases, view, config, out_dir)?;
        models.views.push(ViewModel { view, model: out.model, history: out.history });
    }
    if config.refiner {
        let mut pairs = Vec::with_capacity(cases.len());
        for case in cases {
            let out = run_pipeline(&case.image, &mut models, false, config)?;
            pairs.push((out.fused, case.label.clone()));
        }
        let (refiner, history) = train_refiner_on(&pairs, config)?;
        if let Some(dir) = out_dir {
            refiner.to_checkpoint().save(&dir.join("refiner.ckpt"))?;
            let csv: String = std::iter::once("epoch,loss\n".to_string())
                .chain(history.iter().enumerate().map(|(e, l)| format!("{},{l}\n", e + 1)))
                .collect();
            std::fs::write(dir.join("refiner-history.csv"), csv)?;
        }
        models.refiner = Some(refiner);
        models.refiner_history = history;
    }
    Ok(models)
}

/// Runs the pipeline on each case and scores the final mask.
pub fn evaluate(models: &mut TrainedModels, cases: &[Case], use_refiner: bool, config: &TrainConfig) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for case in cases {
        let out = run_pipeline(&case.image, models, use_refiner, config)?;
        report.cases.push(evaluate_case(&case.id, &out.mask, &case.label)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_dataset, PhantomParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(k: usize, dims: [usize; 3]) -> (StackUNet, Volume) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = crate::unet::UNetConfig { k, base_channels: 2, depth: 2, length: dims[1], width: dims[2] };
        let (image, _) = crate::volume::generate_phantom(1, dims, 1.0).unwrap();
        (StackUNet::new(cfg, &mut rng).unwrap(), image)
    }

    #[test]
    fn prediction_matches_input_dims() {
        let (mut m, image) = tiny(3, [16, 16, 16]);
        let p = predict(&mut m, &image, ViewAxis::Axial).unwrap();
        assert_eq!(p.dims(), image.dims());
        assert_eq!(p.kind(), VolumeKind::Probability);
    }

    #[test]
    fn divisible_depth_concatenates_stack_outputs() {
        let (mut m, image) = tiny(4, [16, 16, 16]);
        let p = predict(&mut m, &image, ViewAxis::Axial).unwrap();
        let plan = plan_stacks(16, 4).unwrap();
        let mut concat = Vec::new();
        for s in extract_all(&image, &plan).unwrap() {
            concat.extend(m.forward(&s, Mode::Eval).unwrap().into_data());
        }
        assert_eq!(p.voxels(), concat.as_slice());
    }

    #[test]
    fn other_views_return_to_the_axial_frame() {
        let (mut m, image) = tiny(4, [16, 16, 32]);
        let p = predict(&mut m, &image, ViewAxis::Sagittal);
        assert!(p.is_err(), "sagittal slices are 16x16 but the net expects 16x32");
        let (mut m, image) = tiny(4, [32, 16, 16]);
        assert_eq!(predict(&mut m, &image, ViewAxis::Sagittal).unwrap().dims(), [32, 16, 16]);
        let (mut m, image) = tiny(4, [16, 16, 16]);
        assert_eq!(predict(&mut m, &image, ViewAxis::Coronal).unwrap().dims(), [16, 16, 16]);
    }

    #[test]
    fn without_refiner_the_mask_is_the_thresholded_mean() {
        let cases = generate_dataset(1, 3, &PhantomParams { dims: [16, 16, 16], ..Default::default() }).unwrap();
        let config = TrainConfig { k: 4, epochs: 1, base_channels: 2, depth: 2, refiner: false, ..Default::default() };
        let mut models = train_mdsnet(&cases, &config, None).unwrap();
        let out = run_pipeline(&cases[0].image, &mut models, false, &config).unwrap();
        assert_eq!(out.per_view.len(), 3);
        let maps: Vec<&Volume> = out.per_view.iter().map(|(_, v)| v).collect();
        let (mean, mask) = fuse_probabilities(&maps, 0.5).unwrap();
        assert_eq!(out.fused.voxels(), mean.voxels());
        assert_eq!(out.mask.voxels(), mask.voxels());
        assert!(run_pipeline(&cases[0].image, &mut models, true, &config).is_err());
        let single = TrainConfig { views: vec![ViewAxis::Sagittal], ..config.clone() };
        models.views.retain(|v| v.view == ViewAxis::Axial);
        assert!(run_pipeline(&cases[0].image, &mut models, false, &single).is_err());
    }
}
