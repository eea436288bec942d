//! Bidirectional convolutional LSTM that refines each probability slice from
//! its two neighbours.
//!
//! For slice `t` the forward cell reads `(ŷ_{t-1}, ŷ_t)`, the backward cell
//! reads `(ŷ_{t+1}, ŷ_t)`, and a 1x1 convolution over both centre hidden
//! states followed by a sigmoid gives the refined slice. Missing neighbours
//! at the volume ends are replaced by the edge slice.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{soft_dice_gradient, soft_dice_loss};
use crate::nn::{
    concat_channels, conv2d_backward, conv2d_forward, join, sigmoid, sigmoid_scalar, split_channels, Checkpoint,
    ConvTape, Module, Param, SgdMomentum,
};
use crate::tensor::Tensor;
use crate::volume::{Volume, VolumeKind};

pub const MODEL_KIND: &str = "biclstm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub hidden: usize,
    pub kernel: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig { hidden: 8, kernel: 3 }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Invalid(format!("refiner needs hidden >= 1 and an odd kernel: {self:?}")));
        }
        Ok(())
    }
}

/// Convolutional LSTM cell without peepholes. One convolution over
/// `concat(x_t, h_{t-1})` produces the four gate pre-activations, stacked as
/// `[input, forget, output, candidate]`, each `hidden` channels wide.
#[derive(Clone, Debug)]
pub struct ClstmCell {
    pub weight: Param,
    pub bias: Param,
    hidden: usize,
    padding: usize,
}

/// What one cell step keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct StepTape {
    conv: ConvTape,
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    plane: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zeros(hidden: usize, l: usize, w: usize) -> Self {
        CellState { h: Tensor::zeros(&[hidden, l, w]), c: Tensor::zeros(&[hidden, l, w]) }
    }
}

impl ClstmCell {
    pub fn new<R: Rng + ?Sized>(config: RefinerConfig, rng: &mut R) -> Self {
        let (h, k) = (config.hidden, config.kernel);
        ClstmCell {
            weight: Param::kaiming(&[4 * h, 1 + h, k, k], (1 + h) * k * k, rng),
            bias: Param::new(Tensor::zeros(&[4 * h])),
            hidden: h,
            padding: k / 2,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `x` is `[1, l, w]`; the state is `[hidden, l, w]`.
    pub fn step(&self, x: &Tensor, prev: &CellState) -> Result<(CellState, StepTape)> {
        let (c_in, l, w) = x.dims3("clstm step")?;
        if c_in != 1 {
            return Err(Error::shape("clstm step", "channels", format!("input must have 1 channel, got {c_in}")));
        }
        for (t, what) in [(&prev.h, "hidden"), (&prev.c, "cell")] {
            if t.shape() != [self.hidden, l, w] {
                return Err(Error::shape("clstm step", "state", format!("{what} state {:?} vs [{}, {l}, {w}]", t.shape(), self.hidden)));
            }
        }
        let input = concat_channels(x, &prev.h)?;
        let (z, conv) = conv2d_forward(&input, &self.weight.value, &self.bias.value, 1, self.padding)?;
        let n = self.hidden * l * w;
        let mut gates = z.into_data();
        for (idx, v) in gates.iter_mut().enumerate() {
            *v = if idx < 3 * n { sigmoid_scalar(*v) } else { v.tanh() };
        }
        let (sig, g) = gates.split_at(3 * n);
        let (i, rest) = sig.split_at(n);
        let (f, o) = rest.split_at(n);
        let c_prev = prev.c.data();
        let mut c = vec![0.0; n];
        let mut h = vec![0.0; n];
        let mut tanh_c = vec![0.0; n];
        for j in 0..n {
            c[j] = f[j] * c_prev[j] + i[j] * g[j];
            tanh_c[j] = c[j].tanh();
            h[j] = o[j] * tanh_c[j];
        }
        let shape = vec![self.hidden, l, w];
        let state = CellState { h: Tensor::new(shape.clone(), h)?, c: Tensor::new(shape, c)? };
        state.h.check_finite("clstm hidden state")?;
        let tape = StepTape { conv, gates, c_prev: c_prev.to_vec(), tanh_c, plane: [l, w] };
        Ok((state, tape))
    }

    /// Given `∂L/∂h_t` and `∂L/∂c_t`, accumulates weight gradients and returns
    /// `(∂L/∂x_t, ∂L/∂h_{t-1}, ∂L/∂c_{t-1})`.
    pub fn step_backward(&mut self, tape: &StepTape, dh: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let [l, w] = tape.plane;
        let n = self.hidden * l * w;
        if dh.len() != n || dc.len() != n {
            return Err(Error::shape("clstm backward", "state", "gradient does not match the recorded step"));
        }
        let (sig, g) = tape.gates.split_at(3 * n);
        let (i, rest) = sig.split_at(n);
        let (f, o) = rest.split_at(n);
        let mut dz = vec![0.0; 4 * n];
        let mut dc_prev = vec![0.0; n];
        for j in 0..n {
            let tc = tape.tanh_c[j];
            let dcj = dc.data()[j] + dh.data()[j] * o[j] * (1.0 - tc * tc);
            dz[j] = dcj * g[j] * i[j] * (1.0 - i[j]);
            dz[n + j] = dcj * tape.c_prev[j] * f[j] * (1.0 - f[j]);
            dz[2 * n + j] = dh.data()[j] * tc * o[j] * (1.0 - o[j]);
            dz[3 * n + j] = dcj * i[j] * (1.0 - g[j] * g[j]);
            dc_prev[j] = dcj * f[j];
        }
        let dz = Tensor::new(vec![4 * self.hidden, l, w], dz)?;
        let d_input = conv2d_backward(&tape.conv, &dz, &self.weight.value, &mut self.weight.grad, &mut self.bias.grad)?;
        let (dx, dh_prev) = split_channels(&d_input, 1)?;
        Ok((dx, dh_prev, Tensor::new(vec![self.hidden, l, w], dc_prev)?))
    }

    /// Runs the cell over a sequence of `[1, l, w]` inputs from a zero state,
    /// returning every state and tape.
    pub fn unroll(&self, inputs: &[Tensor]) -> Result<Vec<(CellState, StepTape)>> {
        let first = inputs.first().ok_or_else(|| Error::Empty("clstm sequence".into()))?;
        let (_, l, w) = first.dims3("clstm unroll")?;
        let mut state = CellState::zeros(self.hidden, l, w);
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (next, tape) = self.step(x, &state)?;
            state = next.clone();
            out.push((next, tape));
        }
        Ok(out)
    }

    /// Back-propagates per-step hidden-state gradients through an unrolled
    /// sequence; returns the input gradients.
    pub fn unroll_backward(&mut self, steps: &[(CellState, StepTape)], dh: &[Tensor]) -> Result<Vec<Tensor>> {
        if steps.len() != dh.len() {
            return Err(Error::shape("clstm unroll backward", "steps", format!("{} steps, {} gradients", steps.len(), dh.len())));
        }
        let Some((last, _)) = steps.last() else {
            return Ok(Vec::new());
        };
        let mut carry_h = Tensor::zeros(last.h.shape());
        let mut carry_c = Tensor::zeros(last.c.shape());
        let mut dxs = vec![Tensor::zeros(&[1]); steps.len()];
        for t in (0..steps.len()).rev() {
            let mut g = dh[t].clone();
            g.add_assign(&carry_h);
            let (dx, dh_prev, dc_prev) = self.step_backward(&steps[t].1, &g, &carry_c)?;
            dxs[t] = dx;
            carry_h = dh_prev;
            carry_c = dc_prev;
        }
        Ok(dxs)
    }
}

impl Module for ClstmCell {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// One cell update: returns `(h_t, c_t)`.
pub fn clstm_step(cell: &ClstmCell, y_t: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
    let (s, _) = cell.step(y_t, &CellState { h: h_prev.clone(), c: c_prev.clone() })?;
    Ok((s.h, s.c))
}

/// Records of one refined window, for the backward pass.
pub struct WindowTape {
    forward: Vec<(CellState, StepTape)>,
    backward: Vec<(CellState, StepTape)>,
    proj: ConvTape,
    out: Tensor,
}

#[derive(Clone, Debug)]
pub struct BiClstm {
    config: RefinerConfig,
    pub forward_cell: ClstmCell,
    pub backward_cell: ClstmCell,
    /// `[1, 2 * hidden, 1, 1]`: forward-state weights first.
    pub proj_weight: Param,
    pub proj_bias: Param,
}

impl BiClstm {
    pub fn new<R: Rng + ?Sized>(config: RefinerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let forward_cell = ClstmCell::new(config, rng);
        let backward_cell = ClstmCell::new(config, rng);
        let h2 = 2 * config.hidden;
        Ok(BiClstm {
            config,
            forward_cell,
            backward_cell,
            proj_weight: Param::kaiming(&[1, h2, 1, 1], h2, rng),
            proj_bias: Param::new(Tensor::zeros(&[1])),
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    /// The same refiner with the two directions exchanged: cells swapped and
    /// the projection halves swapped with them.
    pub fn swapped_directions(&self) -> BiClstm {
        let h = self.config.hidden;
        let mut out = self.clone();
        std::mem::swap(&mut out.forward_cell, &mut out.backward_cell);
        let w = self.proj_weight.value.data();
        let swapped: Vec<f64> = w[h..].iter().chain(&w[..h]).copied().collect();
        out.proj_weight = Param::new(Tensor::new(vec![1, 2 * h, 1, 1], swapped).expect("same length"));
        out
    }

    fn split_window(window: &Tensor) -> Result<[Tensor; 3]> {
        let (t, l, w) = window.dims3("refine")?;
        if t != 3 {
            return Err(Error::shape("refine", "window", format!("expected 3 slices, got {t}")));
        }
        let s = |i: usize| Tensor::new(vec![1, l, w], window.channel(i).to_vec());
        Ok([s(0)?, s(1)?, s(2)?])
    }

    /// Refines the centre of a `[3, l, w]` window; returns `[1, l, w]`.
    pub fn run_window(&self, window: &Tensor) -> Result<(Tensor, WindowTape)> {
        window.check_finite("refiner window")?;
        let [prev, centre, next] = Self::split_window(window)?;
        let forward = self.forward_cell.unroll(&[prev, centre.clone()])?;
        let backward = self.backward_cell.unroll(&[next, centre])?;
        let cat = concat_channels(&forward[1].0.h, &backward[1].0.h)?;
        let (logits, proj) = conv2d_forward(&cat, &self.proj_weight.value, &self.proj_bias.value, 1, 0)?;
        let out = sigmoid(&logits);
        Ok((out.clone(), WindowTape { forward, backward, proj, out }))
    }

    pub fn refine(&self, window: &Tensor) -> Result<Tensor> {
        self.run_window(window).map(|(y, _)| y)
    }

    /// Centre hidden states `(forward, backward)` for a window.
    pub fn center_states(&self, window: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, tape) = self.run_window(window)?;
        Ok((tape.forward[1].0.h.clone(), tape.backward[1].0.h.clone()))
    }

    /// Accumulates parameter gradients for `∂L/∂output` and returns the
    /// gradient with respect to the `[3, l, w]` window.
    pub fn backward_window(&mut self, tape: &WindowTape, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.shape() != tape.out.shape() {
            return Err(Error::shape("refine backward", "grad_out", format!("{:?} vs {:?}", grad_out.shape(), tape.out.shape())));
        }
        let mut dlogits = grad_out.clone();
        for (g, &s) in dlogits.data_mut().iter_mut().zip(tape.out.data()) {
            *g *= s * (1.0 - s);
        }
        let dcat = conv2d_backward(&tape.proj, &dlogits, &self.proj_weight.value, &mut self.proj_weight.grad, &mut self.proj_bias.grad)?;
        let (dh_f, dh_b) = split_channels(&dcat, self.config.hidden)?;
        let zero = Tensor::zeros(dh_f.shape());
        let dx_f = self.forward_cell.unroll_backward(&tape.forward, &[zero.clone(), dh_f])?;
        let dx_b = self.backward_cell.unroll_backward(&tape.backward, &[zero, dh_b])?;
        let plane = tape.out.len();
        let mut d = vec![0.0; 3 * plane];
        d[..plane].copy_from_slice(dx_f[0].data());
        for j in 0..plane {
            d[plane + j] = dx_f[1].data()[j] + dx_b[1].data()[j];
        }
        d[2 * plane..].copy_from_slice(dx_b[0].data());
        Tensor::new(vec![3, tape.out.shape()[1], tape.out.shape()[2]], d)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = vec![("hidden".to_string(), self.config.hidden.to_string()), ("kernel".to_string(), self.config.kernel.to_string())];
        Checkpoint::capture(self, MODEL_KIND, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.model_kind != MODEL_KIND {
            return Err(Error::Invalid(format!("checkpoint holds '{}', not {MODEL_KIND}", ckpt.model_kind)));
        }
        let get = |key: &str| -> Result<usize> {
            ckpt.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks integer meta '{key}'")))
        };
        let config = RefinerConfig { hidden: get("hidden")?, kernel: get("kernel")? };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = BiClstm::new(config, &mut rng)?;
        ckpt.restore(&mut model)?;
        Ok(model)
    }
}

impl Module for BiClstm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.forward_cell.visit_params(&join(prefix, "forward"), f);
        self.backward_cell.visit_params(&join(prefix, "backward"), f);
        f(&join(prefix, "proj.weight"), &self.proj_weight);
        f(&join(prefix, "proj.bias"), &self.proj_bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.forward_cell.visit_params_mut(&join(prefix, "forward"), f);
        self.backward_cell.visit_params_mut(&join(prefix, "backward"), f);
        f(&join(prefix, "proj.weight"), &mut self.proj_weight);
        f(&join(prefix, "proj.bias"), &mut self.proj_bias);
    }
}

/// The `[3, l, w]` window centred on slice `t`, replicating edge slices.
pub fn window_at(volume: &Volume, t: usize) -> Result<Tensor> {
    let [d, l, w] = volume.dims();
    if t >= d {
        return Err(Error::Invalid(format!("slice {t} outside depth {d}")));
    }
    let prev = t.saturating_sub(1);
    let next = (t + 1).min(d - 1);
    let mut data = Vec::with_capacity(3 * l * w);
    for z in [prev, t, next] {
        data.extend_from_slice(volume.slice(z));
    }
    Tensor::new(vec![3, l, w], data)
}

/// Refines every slice of a probability volume.
pub fn refine_volume(model: &BiClstm, prob: &Volume) -> Result<Volume> {
    let mut out = Vec::with_capacity(prob.voxels().len());
    for t in 0..prob.depth() {
        out.extend(model.refine(&window_at(prob, t)?)?.into_data());
    }
    Ok(Volume::new(prob.dims(), out, VolumeKind::Probability)?.with_spacing(prob.spacing()))
}

/// Trains on `(probability, label)` volume pairs, one SGD step per slice with
/// the slice order shuffled each epoch. Returns the mean per-slice Dice loss of
/// each epoch.
pub fn train_refiner<R: Rng + ?Sized>(
    model: &mut BiClstm,
    pairs: &[(Volume, Volume)],
    epochs: usize,
    lr: f64,
    momentum: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut order = Vec::new();
    for (v, (prob, label)) in pairs.iter().enumerate() {
        if prob.dims() != label.dims() {
            return Err(Error::shape("train_refiner", "dims", format!("pair {v}: {:?} vs {:?}", prob.dims(), label.dims())));
        }
        order.extend((0..prob.depth()).map(|t| (v, t)));
    }
    if order.is_empty() && epochs > 0 {
        return Err(Error::Empty("refiner training set".into()));
    }
    let opt = SgdMomentum::new(lr, momentum);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &(v, t) in &order {
            let (prob, label) = &pairs[v];
            let target = label.slice(t);
            model.zero_grad();
            let (y, tape) = model.run_window(&window_at(prob, t)?)?;
            let loss = soft_dice_loss(y.data(), target, 1.0)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, last_good: None });
            }
            total += loss;
            let g = Tensor::new(y.shape().to_vec(), soft_dice_gradient(y.data(), target, 1.0)?)?;
            model.backward_window(&tape, &g)?;
            opt.step(model)?;
        }
        history.push(total / order.len() as f64);
    }
    Ok(history)
}
