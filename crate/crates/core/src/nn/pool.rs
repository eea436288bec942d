use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2x2 max pooling with stride 2. Returns the pooled map and, for each output
/// cell, the flat input index of its maximum (first occurrence in row-major
/// order on ties).
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.dims3("maxpool2x2")?;
    if h % 2 != 0 {
        return Err(Error::shape("maxpool2x2", "height", format!("extent {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::shape("maxpool2x2", "width", format!("extent {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("maxpool2x2 backward", "grad_out", "length differs from recorded argmax"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] += g;
    }
    Ok(dx)
}

#[derive(Clone, Debug, Default)]
pub struct MaxPool2x2 {
    tape: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2x2 {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, argmax) = maxpool2x2(x)?;
        self.tape = Some((argmax, x.shape().to_vec()));
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (argmax, shape) = self.tape.as_ref().ok_or(Error::NoTape("maxpool2x2"))?;
        maxpool2x2_backward(grad_out, argmax, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::nn::testing::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn picks_the_maximum() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn ties_route_to_first_row_major_index() {
        let x = Tensor::full(&[2, 4, 4], 0.5);
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert_eq!(&idx[..2], &[0, 2]);
        assert_eq!(idx[2], 8);
        let g = maxpool2x2_backward(&Tensor::full(y.shape(), 1.0), &idx, x.shape()).unwrap();
        assert_eq!(g.sum(), 8.0);
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[4], 0.0);
    }

    #[test]
    fn odd_extent_is_rejected() {
        assert!(matches!(maxpool2x2(&Tensor::zeros(&[1, 3, 4])), Err(Error::Shape { dim: "height", .. })));
        assert!(matches!(maxpool2x2(&Tensor::zeros(&[1, 4, 5])), Err(Error::Shape { dim: "width", .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&[3, 6, 4], &mut rng);
            let mut pool = MaxPool2x2::default();
            let y = pool.forward(&x).unwrap();
            let r = random_tensor(y.shape(), &mut rng);
            let analytic = pool.backward(&r).unwrap();
            let numeric = central_difference(x.data(), 1e-5, |v| {
                let t = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                maxpool2x2(&t).unwrap().0.dot(&r)
            });
            assert!(max_relative_error(analytic.data(), &numeric, 1e-3) < 1e-6);
        }
    }
}
