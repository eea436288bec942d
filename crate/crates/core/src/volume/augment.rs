use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    /// Quarter turn counter-clockwise; swaps the in-plane extents.
    Rotate90,
    HFlip,
    VFlip,
}

/// Applies `op` to every slice of a `[k, h, w]` block.
pub fn augment_block(block: &Tensor, op: Augmentation) -> Result<Tensor> {
    let (k, h, w) = block.dims3("augment")?;
    let src = block.data();
    let (oh, ow) = match op {
        Augmentation::Rotate90 => (w, h),
        _ => (h, w),
    };
    let mut out = Vec::with_capacity(src.len());
    for s in 0..k {
        let plane = &src[s * h * w..(s + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                out.push(match op {
                    Augmentation::Rotate90 => plane[x * w + (w - 1 - y)],
                    Augmentation::HFlip => plane[y * w + (w - 1 - x)],
                    Augmentation::VFlip => plane[(h - 1 - y) * w + x],
                });
            }
        }
    }
    Tensor::new(vec![k, oh, ow], out)
}

/// Transforms an image stack and its label identically.
pub fn augment(stack: &Tensor, label: &Tensor, op: Augmentation) -> Result<(Tensor, Tensor)> {
    stack.same_shape(label, "augment")?;
    Ok((augment_block(stack, op)?, augment_block(label, op)?))
}

/// Draws one of {none, rotate90, hflip, vflip} uniformly; rotation is only
/// offered for square slices so block extents stay fixed.
pub fn random_augmentation<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Option<Augmentation> {
    let ops: &[Option<Augmentation>] = if square {
        &[None, Some(Augmentation::Rotate90), Some(Augmentation::HFlip), Some(Augmentation::VFlip)]
    } else {
        &[None, Some(Augmentation::HFlip), Some(Augmentation::VFlip)]
    };
    ops[rng.random_range(0..ops.len())]
}
