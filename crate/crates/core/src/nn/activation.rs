use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.dims3("concat_channels")?;
    let (cb, hb, wb) = b.dims3("concat_channels")?;
    if ha != hb {
        return Err(Error::shape("concat_channels", "height", format!("{ha} vs {hb}")));
    }
    if wa != wb {
        return Err(Error::shape("concat_channels", "width", format!("{wa} vs {wb}")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.dims3("split_channels")?;
    if first == 0 || first >= c {
        return Err(Error::shape("split_channels", "channels", format!("cannot split {c} at {first}")));
    }
    let cut = first * h * w;
    Ok((
        Tensor::new(vec![first, h, w], x.data()[..cut].to_vec())?,
        Tensor::new(vec![c - first, h, w], x.data()[cut..].to_vec())?,
    ))
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        relu(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.mask.as_ref().ok_or(Error::NoTape("relu"))?;
        let mut g = grad_out.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid {
    out: Option<Tensor>,
}

impl Sigmoid {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = sigmoid(x);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let y = self.out.as_ref().ok_or(Error::NoTape("sigmoid"))?;
        let mut g = grad_out.clone();
        for (v, &s) in g.data_mut().iter_mut().zip(y.data()) {
            *v *= s * (1.0 - s);
        }
        Ok(g)
    }
}
