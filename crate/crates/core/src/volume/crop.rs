use super::{Volume, VolumeKind};
use crate::error::{Error, Result};

/// In-plane crop rectangle: top-left origin and extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub y0: usize,
    pub x0: usize,
    pub length: usize,
    pub width: usize,
}

/// The `target_l x target_w` window centred on `center`, shifted to stay inside the slice.
pub fn crop_window(dims: [usize; 3], target_l: usize, target_w: usize, center: (usize, usize)) -> Result<CropWindow> {
    let [_, l, w] = dims;
    if target_l == 0 || target_w == 0 {
        return Err(Error::Invalid("crop extents must be positive".into()));
    }
    if target_l > l || target_w > w {
        return Err(Error::Invalid(format!("crop {target_l}x{target_w} exceeds slice {l}x{w}")));
    }
    let place = |c: usize, t: usize, n: usize| c.saturating_sub(t / 2).min(n - t);
    Ok(CropWindow { y0: place(center.0, target_l, l), x0: place(center.1, target_w, w), length: target_l, width: target_w })
}

/// Crops every slice to `target_l x target_w` around `center`; depth is untouched.
pub fn crop_to(volume: &Volume, target_l: usize, target_w: usize, center: (usize, usize)) -> Result<Volume> {
    let win = crop_window(volume.dims(), target_l, target_w, center)?;
    let [d, _, w] = volume.dims();
    let mut out = Vec::with_capacity(d * target_l * target_w);
    for z in 0..d {
        let s = volume.slice(z);
        for y in win.y0..win.y0 + target_l {
            out.extend_from_slice(&s[y * w + win.x0..y * w + win.x0 + target_w]);
        }
    }
    Ok(Volume::from_parts_unchecked([d, target_l, target_w], out, volume.kind(), volume.spacing()))
}

/// Writes `cropped` back into a zero volume of the original extents.
pub fn uncrop(cropped: &Volume, dims: [usize; 3], win: CropWindow) -> Result<Volume> {
    let [d, l, w] = dims;
    if cropped.dims() != [d, win.length, win.width] || win.y0 + win.length > l || win.x0 + win.width > w {
        return Err(Error::shape("uncrop", "extent", format!("{:?} does not fit {dims:?} at {win:?}", cropped.dims())));
    }
    let mut out = vec![0.0; d * l * w];
    for z in 0..d {
        let s = cropped.slice(z);
        for y in 0..win.length {
            let dst = (z * l + win.y0 + y) * w + win.x0;
            out[dst..dst + win.width].copy_from_slice(&s[y * win.width..(y + 1) * win.width]);
        }
    }
    Ok(Volume::from_parts_unchecked(dims, out, cropped.kind(), cropped.spacing()))
}

/// In-plane centre of the foreground bounding box, `None` for an empty label.
pub fn label_centroid(label: &Volume) -> Option<(usize, usize)> {
    debug_assert_eq!(label.kind(), VolumeKind::Label);
    let [d, l, w] = label.dims();
    let (mut y_lo, mut y_hi, mut x_lo, mut x_hi) = (usize::MAX, 0, usize::MAX, 0);
    for z in 0..d {
        let s = label.slice(z);
        for y in 0..l {
            for x in 0..w {
                if s[y * w + x] > 0.0 {
                    y_lo = y_lo.min(y);
                    y_hi = y_hi.max(y);
                    x_lo = x_lo.min(x);
                    x_hi = x_hi.max(x);
                }
            }
        }
    }
    (y_lo != usize::MAX).then(|| ((y_lo + y_hi + 1) / 2, (x_lo + x_hi + 1) / 2))
}

pub fn volume_center(volume: &Volume) -> (usize, usize) {
    let [_, l, w] = volume.dims();
    (l / 2, w / 2)
}
