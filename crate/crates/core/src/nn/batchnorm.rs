use super::param::{join, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each training step.
pub const BN_DECAY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct BnTape {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
    shape: Vec<usize>,
}

/// Per-channel batch normalisation over the spatial extent of one sample.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    tape: Option<BnTape>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], 1.0)),
            tape: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (c, h, w) = x.dims3("batchnorm")?;
        if c != self.channels() {
            return Err(Error::shape("batchnorm", "channels", format!("input has {c}, layer has {}", self.channels())));
        }
        let n = h * w;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let plane = x.channel(ch);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = plane.iter().sum::<f64>() / n as f64;
                    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let rm = &mut self.running_mean.value.data_mut()[ch];
                    *rm = BN_DECAY * *rm + (1.0 - BN_DECAY) * mean;
                    let rv = &mut self.running_var.value.data_mut()[ch];
                    *rv = BN_DECAY * *rv + (1.0 - BN_DECAY) * var;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.value.data()[ch], self.running_var.value.data()[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for i in 0..n {
                let xh = (plane[i] - mean) * is;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g * xh + b;
            }
        }
        self.tape = Some(BnTape { xhat, inv_std, mode, shape: x.shape().to_vec() });
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let tape = self.tape.as_ref().ok_or(Error::NoTape("batchnorm"))?;
        if grad_out.shape() != tape.shape.as_slice() {
            return Err(Error::shape("batchnorm backward", "grad_out", format!("{:?} vs {:?}", grad_out.shape(), tape.shape)));
        }
        let c = tape.shape[0];
        let n = tape.shape[1] * tape.shape[2];
        let mut dx = vec![0.0; grad_out.len()];
        for ch in 0..c {
            let dy = grad_out.channel(ch);
            let xh = &tape.xhat[ch * n..(ch + 1) * n];
            let g = self.gamma.value.data()[ch];
            let sum_dy: f64 = dy.iter().sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let is = tape.inv_std[ch];
            let out = &mut dx[ch * n..(ch + 1) * n];
            match tape.mode {
                Mode::Train => {
                    let nf = n as f64;
                    for i in 0..n {
                        out[i] = g * is / nf * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                    }
                }
                Mode::Eval => {
                    for i in 0..n {
                        out[i] = g * is * dy[i];
                    }
                }
            }
        }
        Tensor::new(tape.shape.clone(), dx)
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
