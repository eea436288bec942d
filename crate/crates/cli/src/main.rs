use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mdsnet::biclstm::refine_volume;
use mdsnet::gradcheck;
use mdsnet::metrics::{evaluate_case, fuse_probabilities, reliability_curve, slice_range_metrics, MetricReport};
use mdsnet::pipeline::{
    cross_validate, evaluate, predict, run_pipeline, sweep, sweep_csv, train_mdsnet, CvPlan, SweepAxis, TrainConfig,
    TrainedModels,
};
use mdsnet::volume::{
    generate_dataset, read_dataset, read_raw, read_volume, write_dataset, write_raw, write_volume, PhantomParams,
    ViewAxis, VolumeKind, VoxelType,
};
use mdsnet::LossWeights;

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "mdsnet", version, about = "Stack U-Net volume segmentation with slice-regularised Dice training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train per-view networks and the refiner on a dataset.
    Train(TrainArgs),
    /// Predict a probability volume with trained models.
    Predict(PredictArgs),
    /// Refine a probability volume with a trained refiner.
    Refine(RefineArgs),
    /// Average probability volumes and threshold the mean.
    Fuse(FuseArgs),
    /// Score predictions against labels.
    Evaluate(EvaluateArgs),
    /// Repeated k-fold cross-validation with a t-test between two groups.
    Cv(CvArgs),
    /// Train and evaluate once per setting of a hyperparameter axis.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks, one CSV row per seed.
    Gradcheck(GradcheckArgs),
    /// Convert between volume files and headerless blobs.
    Convert(ConvertArgs),
}

/// Overrides for `TrainConfig` fields. Unset flags keep the value from
/// `--config` or the default.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, alias = "lambda_v")]
    lambda_v: Option<f64>,
    #[arg(long, alias = "lambda_s")]
    lambda_s: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "base_channels")]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Comma-separated subset of axial,coronal,sagittal.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<String>>,
    #[arg(long)]
    augment: Option<bool>,
    /// In-plane crop as LENGTH,WIDTH.
    #[arg(long, alias = "crop_axial", value_delimiter = ',', num_args = 2)]
    crop_axial: Option<Vec<usize>>,
    #[arg(long, alias = "crop_coronal", value_delimiter = ',', num_args = 2)]
    crop_coronal: Option<Vec<usize>>,
    #[arg(long, alias = "crop_sagittal", value_delimiter = ',', num_args = 2)]
    crop_sagittal: Option<Vec<usize>>,
    #[arg(long)]
    refiner: Option<bool>,
    #[arg(long, alias = "refiner_epochs")]
    refiner_epochs: Option<usize>,
    #[arg(long, alias = "refiner_lr")]
    refiner_lr: Option<f64>,
    #[arg(long, alias = "refiner_momentum")]
    refiner_momentum: Option<f64>,
    #[arg(long, alias = "refiner_hidden")]
    refiner_hidden: Option<usize>,
    #[arg(long)]
    thr: Option<f64>,
}

fn pair(v: &[usize]) -> [usize; 2] {
    [v[0], v[1]]
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_toml_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(k, lambda_v, lambda_s, lr, momentum, batch, epochs, base_channels, depth, augment, refiner);
        set!(refiner_epochs, refiner_lr, refiner_momentum, refiner_hidden, thr);
        if let Some(v) = &self.views {
            c.views = v.iter().map(|s| s.trim().parse()).collect::<mdsnet::Result<_>>()?;
        }
        if let Some(v) = &self.crop_axial {
            c.crop_axial = Some(pair(v));
        }
        if let Some(v) = &self.crop_coronal {
            c.crop_coronal = Some(pair(v));
        }
        if let Some(v) = &self.crop_sagittal {
            c.crop_sagittal = Some(pair(v));
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Depth, length and width.
    #[arg(long, num_args = 3, default_values_t = [32, 64, 64])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    variability: f64,
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    distractors: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding dataset.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, histories and the resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Probability volume output.
    #[arg(long)]
    out: PathBuf,
    /// Optional binary mask output.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Predict with one view's network only, skipping fusion and refinement.
    #[arg(long)]
    view: Option<String>,
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    prob: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// One to three probability volumes in the same frame.
    #[arg(long, num_args = 1..=3, required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    thr: f64,
    #[arg(long)]
    out_prob: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Binary prediction to score against `--label`.
    #[arg(long, requires = "label", conflicts_with_all = ["models", "data"])]
    pred: Option<PathBuf>,
    #[arg(long)]
    label: Option<PathBuf>,
    /// Score trained models on every case of `--data`.
    #[arg(long, requires = "data")]
    models: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    no_refine: bool,
    /// Restrict scoring to slices START..END of a single prediction.
    #[arg(long, num_args = 2, requires = "pred")]
    slices: Option<Vec<usize>>,
    /// Dice thresholds for a reliability curve.
    #[arg(long, value_delimiter = ',')]
    reliability: Option<Vec<f64>>,
    /// Writes PREFIX.csv, PREFIX.json and PREFIX-reliability.csv.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, default_value_t = 10)]
    group_a: usize,
    #[arg(long, default_value_t = 20)]
    group_b: usize,
    /// CSV with one row per held-out case per repetition.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    StackSize,
    LambdaGrid,
    LambdaFloat,
    Ablation,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Axis values: stack sizes, LV:LS pairs, or scale factors. Defaults per axis.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    /// Number of trailing dataset cases held out for testing.
    #[arg(long, default_value_t = 4)]
    test_cases: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    Loss,
    Unet,
    Refiner,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "loss")]
    target: Target,
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Failure threshold; 1e-4 for loss and refiner, 1e-3 for unet by default.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    U8,
    F32,
}

impl From<Dtype> for VoxelType {
    fn from(d: Dtype) -> Self {
        match d {
            Dtype::U8 => VoxelType::U8,
            Dtype::F32 => VoxelType::F32,
        }
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
    /// Treat the input as a headerless blob with these extents.
    #[arg(long, num_args = 3)]
    raw_dims: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "f32")]
    raw_dtype: Dtype,
    /// image, label or probability; used for headerless input.
    #[arg(long, default_value = "image")]
    kind: String,
    /// Write only the voxel blob.
    #[arg(long)]
    to_raw: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Refine(a) => refine(a),
        Command::Fuse(a) => fuse(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Cv(a) => cv(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Convert(a) => convert(a),
    }
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let params =
        PhantomParams { dims: [a.dims[0], a.dims[1], a.dims[2]], shape_variability: a.variability, noise_std: a.noise, distractors: a.distractors };
    let cases = generate_dataset(a.count, a.seed, &params)?;
    write_dataset(&a.out, &cases)?;
    println!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn load_models(dir: &Path) -> Result<(TrainConfig, TrainedModels)> {
    let path = dir.join(CONFIG_FILE);
    let config = TrainConfig::from_toml_file(&path).with_context(|| format!("reading {}", path.display()))?;
    let models = TrainedModels::load(dir, &config.views)?;
    Ok((config, models))
}

fn train(a: TrainArgs) -> Result<()> {
    let config = a.cfg.resolve(a.seed)?;
    let cases = read_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), config.to_toml())?;
    let models = train_mdsnet(&cases, &config, Some(&a.out))?;
    for v in &models.views {
        if let Some(last) = v.history.last() {
            println!("{}: {} epochs, final loss {:.6}", v.view, last.epoch, last.loss);
        }
    }
    if let Some(l) = models.refiner_history.last() {
        println!("refiner: final loss {l:.6}");
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let (config, mut models) = load_models(&a.models)?;
    let image = read_volume(&a.image)?;
    let prob = match &a.view {
        Some(v) => {
            let view: ViewAxis = v.parse()?;
            let vm = models.views.iter_mut().find(|m| m.view == view).with_context(|| format!("no {view} model"))?;
            predict(&mut vm.model, &image, view)?
        }
        None => {
            let out = run_pipeline(&image, &mut models, !a.no_refine && config.refiner, &config)?;
            out.refined.unwrap_or(out.fused)
        }
    };
    write_volume(&a.out, &prob, VoxelType::F32)?;
    if let Some(m) = &a.mask {
        write_volume(m, &prob.threshold(config.thr), VoxelType::U8)?;
    }
    Ok(())
}

fn refine(a: RefineArgs) -> Result<()> {
    let (_, models) = load_models(&a.models)?;
    let refiner = models.refiner.context("model directory has no refiner.ckpt")?;
    let prob = read_volume(&a.prob)?;
    write_volume(&a.out, &refine_volume(&refiner, &prob)?, VoxelType::F32)?;
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let maps = a.inputs.iter().map(|p| read_volume(p)).collect::<mdsnet::Result<Vec<_>>>()?;
    let refs: Vec<_> = maps.iter().collect();
    let (mean, mask) = fuse_probabilities(&refs, a.thr)?;
    write_volume(&a.out_prob, &mean, VoxelType::F32)?;
    write_volume(&a.out_mask, &mask, VoxelType::U8)?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let report = if let (Some(pred), Some(label)) = (&a.pred, &a.label) {
        let p = read_volume(pred)?;
        let l = read_volume(label)?;
        match &a.slices {
            Some(r) => slice_range_metrics(&p, &l, r[0]..r[1])?,
            None => MetricReport { cases: vec![evaluate_case(&pred.display().to_string(), &p, &l)?] },
        }
    } else if let (Some(models), Some(data)) = (&a.models, &a.data) {
        let (config, mut models) = load_models(models)?;
        let cases = read_dataset(data)?;
        evaluate(&mut models, &cases, !a.no_refine && config.refiner, &config)?
    } else {
        bail!("give either --pred with --label, or --models with --data");
    };
    if let Some(parent) = a.out_prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.write(&with_suffix(&a.out_prefix, ".csv"), &with_suffix(&a.out_prefix, ".json"))?;
    if let Some(t) = &a.reliability {
        let dice: Vec<f64> = report.cases.iter().map(|c| c.dice).collect();
        let curve: String = std::iter::once("threshold,fraction\n".to_string())
            .chain(reliability_curve(&dice, t)?.into_iter().map(|(t, f)| format!("{t},{f}\n")))
            .collect();
        fs::write(with_suffix(&a.out_prefix, "-reliability.csv"), curve)?;
    }
    let agg = report.aggregate()?;
    println!("dice {:.4} ± {:.4} over {} cases", agg.dice.mean, agg.dice.stdv, report.cases.len());
    Ok(())
}

fn cv(a: CvArgs) -> Result<()> {
    let config = a.cfg.resolve(Some(a.seed))?;
    let cases = read_dataset(&a.data)?;
    let plan = CvPlan { folds: a.folds, repetitions: [a.group_a, a.group_b], seed: a.seed };
    let outcome = cross_validate(&cases, &plan, &config)?;
    fs::write(&a.out, outcome.to_csv())?;
    match &outcome.dice_ttest {
        Some(t) => println!("t {:.4}, df {}, p {:.4}", t.t, t.df, t.p),
        None => println!("t-test unavailable (each group needs at least two repetitions)"),
    }
    Ok(())
}

fn parse_axis(axis: Axis, values: Option<&[String]>) -> Result<SweepAxis> {
    let Some(values) = values else {
        return Ok(match axis {
            Axis::StackSize => SweepAxis::default_stack_sizes(),
            Axis::LambdaGrid => SweepAxis::default_lambda_grid(),
            Axis::LambdaFloat => SweepAxis::default_lambda_float(),
            Axis::Ablation => SweepAxis::Ablation,
        });
    };
    Ok(match axis {
        Axis::StackSize => SweepAxis::StackSize(values.iter().map(|v| v.parse()).collect::<Result<_, _>>()?),
        Axis::LambdaGrid => SweepAxis::LambdaGrid(
            values
                .iter()
                .map(|v| {
                    let (a, b) = v.split_once(':').with_context(|| format!("expected LV:LS, got {v:?}"))?;
                    Ok((a.parse()?, b.parse()?))
                })
                .collect::<Result<_>>()?,
        ),
        Axis::LambdaFloat => SweepAxis::LambdaFloat(values.iter().map(|v| v.parse()).collect::<Result<_, _>>()?),
        Axis::Ablation => bail!("the ablation axis takes no values"),
    })
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let config = a.cfg.resolve(Some(a.seed))?;
    let axis = parse_axis(a.axis, a.values.as_deref())?;
    let cases = read_dataset(&a.data)?;
    if a.test_cases == 0 || a.test_cases >= cases.len() {
        bail!("--test-cases must leave both train and test cases ({} available)", cases.len());
    }
    let (train_cases, test_cases) = cases.split_at(cases.len() - a.test_cases);
    let rows = sweep(train_cases, test_cases, &config, &axis)?;
    fs::write(&a.out, sweep_csv(&rows)?)?;
    for r in &rows {
        let sens = r.sensitivity.map(|s| format!(", sensitivity {s:+.4}")).unwrap_or_default();
        println!("{}: dice {:.4} ± {:.4}{sens}", r.setting, r.dice_mean, r.dice_stdv);
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let tolerance = a.tolerance.unwrap_or(if a.target == Target::Unet { 1e-3 } else { 1e-4 });
    let weights = LossWeights::default();
    println!("target,seed,case,max_rel_error");
    let mut worst: f64 = 0.0;
    for seed in 0..a.seeds {
        let (case, err) = match a.target {
            Target::Loss => {
                let k = [1, 3, 7][(seed % 3) as usize];
                let perfect = seed % 5 == 4;
                let (p, y) = gradcheck::loss_case(seed, k, perfect);
                let name = if perfect { format!("k{k}-perfect") } else { format!("k{k}") };
                (name, gradcheck::check_loss(&p, &y, &weights, a.step)?)
            }
            Target::Unet => ("k3-depth2".to_string(), gradcheck::check_unet(seed, 20, a.step)?),
            Target::Refiner => ("window".to_string(), gradcheck::check_refiner_window(seed, a.step)?),
        };
        println!("{},{seed},{case},{err:e}", a.target.to_possible_value().expect("named").get_name());
        worst = worst.max(err);
    }
    if worst.is_nan() || worst >= tolerance {
        bail!("max relative error {worst:e} exceeds tolerance {tolerance:e}");
    }
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let volume = match &a.raw_dims {
        Some(d) => read_raw(&a.input, [d[0], d[1], d[2]], a.raw_dtype.into(), a.kind.parse::<VolumeKind>()?)?,
        None => read_volume(&a.input)?,
    };
    if a.to_raw {
        write_raw(&a.output, &volume, a.dtype.into())?;
    } else {
        write_volume(&a.output, &volume, a.dtype.into())?;
    }
    Ok(())
}
