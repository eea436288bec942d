//! Central finite-difference checks of analytic gradients.
//!
//! Numeric derivatives here are computed from forward evaluations only, so
//! they stay independent of every backward pass they are compared against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::biclstm::{BiClstm, RefinerConfig};
use crate::error::Result;
use crate::loss::{loss_gradient, stack_loss, LossWeights};
use crate::nn::{Mode, Module};
use crate::tensor::Tensor;
use crate::unet::{StackUNet, UNetConfig};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Uniform(-1, 1) entries.
pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Adds `delta` to the `index`-th trainable scalar of `model`.
pub fn perturb_param<M: Module + ?Sized>(model: &mut M, index: usize, delta: f64) {
    let mut offset = 0;
    model.visit_params_mut("", &mut |_, p| {
        if !p.trainable {
            return;
        }
        if index >= offset && index < offset + p.len() {
            p.value.data_mut()[index - offset] += delta;
        }
        offset += p.len();
    });
}

/// Flattened gradients of all trainable parameters, in visiting order.
pub fn flat_grads<M: Module + ?Sized>(model: &M) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params("", &mut |_, p| {
        if p.trainable {
            out.extend_from_slice(&p.grad)
        }
    });
    out
}

/// Checks a layer's input and parameter gradients against central differences
/// of the scalar `<forward(x), r>` for a random probe `r`. Returns the max
/// relative error over every input and trainable parameter entry.
pub fn check_layer<L: Module, R: Rng + ?Sized>(
    layer: &mut L,
    x: &Tensor,
    forward: impl Fn(&mut L, &Tensor) -> Result<Tensor>,
    backward: impl Fn(&mut L, &Tensor) -> Result<Tensor>,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> Result<f64> {
    let y = forward(layer, x)?;
    let probe = random_tensor(y.shape(), rng);
    layer.zero_grad();
    forward(layer, x)?;
    let dx = backward(layer, &probe)?;
    let mut analytic = dx.into_data();
    analytic.extend(flat_grads(layer));

    let mut numeric = {
        let mut failed = None;
        let n = central_difference(x.data(), step, |v| {
            let t = Tensor::new(x.shape().to_vec(), v.to_vec()).expect("same shape");
            match forward(layer, &t) {
                Ok(y) => y.dot(&probe),
                Err(e) => {
                    failed.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        n
    };
    let n_params = analytic.len() - x.len();
    for i in 0..n_params {
        perturb_param(layer, i, step);
        let plus = forward(layer, x)?.dot(&probe);
        perturb_param(layer, i, -2.0 * step);
        let minus = forward(layer, x)?.dot(&probe);
        perturb_param(layer, i, step);
        numeric.push((plus - minus) / (2.0 * step));
    }
    Ok(max_relative_error(&analytic, &numeric, floor))
}

/// Random `(pred, label)` stack of shape `[k, 8, 8]` for loss checks.
/// Otherwise one slice has an empty label when `k > 1`. `perfect` makes the
/// prediction equal to the label so every slice loss is zero; those labels
/// keep every slice non-empty, because at a perfect empty slice the slice
/// loss has unit slope and the kink of the norm at zero puts an O(step)
/// error into any central difference.
pub fn loss_case(seed: u64, k: usize, perfect: bool) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = Tensor::from_fn(&[k, 8, 8], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    for z in 0..k {
        label.data_mut()[z * 64 + 27] = 1.0;
    }
    if k > 1 && !perfect {
        let empty = rng.random_range(0..k);
        label.data_mut()[empty * 64..(empty + 1) * 64].iter_mut().for_each(|v| *v = 0.0);
    }
    let pred = if perfect {
        label.clone()
    } else {
        Tensor::from_fn(&[k, 8, 8], |_| rng.random_range(0.01..0.99))
    };
    (pred, label)
}

/// Max relative error between the analytic stack-loss gradient and central
/// differences of the loss value.
pub fn check_loss(pred: &Tensor, label: &Tensor, weights: &LossWeights, step: f64) -> Result<f64> {
    let analytic = loss_gradient(pred, label, weights)?;
    let mut failed = None;
    let numeric = central_difference(pred.data(), step, |v| {
        let p = Tensor::new(pred.shape().to_vec(), v.to_vec()).expect("same shape");
        match stack_loss(&p, label, weights) {
            Ok(l) => l.total,
            Err(e) => {
                failed.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    Ok(max_relative_error(analytic.data(), &numeric, 1e-8))
}

/// Sampled-parameter check of the full network loss on a tiny configuration
/// (`k = 3`, depth 2, 16x16, base 4).
pub fn check_unet(seed: u64, samples: usize, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = UNetConfig { k: 3, base_channels: 4, depth: 2, length: 16, width: 16 };
    let mut net = StackUNet::new(cfg, &mut rng)?;
    let x = random_tensor(&[3, 16, 16], &mut rng);
    let label = x.map(|v| if v > 0.2 { 1.0 } else { 0.0 });
    let weights = LossWeights::default();
    net.zero_grad();
    let y = net.forward(&x, Mode::Train)?;
    net.backward(&loss_gradient(&y, &label, &weights)?)?;
    let analytic = flat_grads(&net);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..analytic.len());
        perturb_param(&mut net, i, step);
        let plus = stack_loss(&net.forward(&x, Mode::Train)?, &label, &weights)?.total;
        perturb_param(&mut net, i, -2.0 * step);
        let minus = stack_loss(&net.forward(&x, Mode::Train)?, &label, &weights)?.total;
        perturb_param(&mut net, i, step);
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * step), 1e-6));
    }
    Ok(worst)
}

/// Input and parameter check of one refiner window pass (hidden 2, 5x5).
pub fn check_refiner_window(seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BiClstm::new(RefinerConfig { hidden: 2, kernel: 3 }, &mut rng)?;
    let window = Tensor::from_fn(&[3, 5, 5], |_| rng.random_range(0.0..1.0));
    check_layer(
        &mut model,
        &window,
        |m, x| m.run_window(x).map(|(y, _)| y),
        |m, g| {
            let (_, tape) = m.run_window(&window)?;
            m.backward_window(&tape, g)
        },
        step,
        1e-3,
        &mut rng,
    )
}
