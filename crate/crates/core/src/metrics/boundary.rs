use crate::error::{Error, Result};
use crate::volume::Volume;

/// Foreground voxels `(z, y, x)` with at least one in-plane 4-neighbour that
/// is background. Positions outside the slice count as background.
pub fn boundary_points(mask: &Volume) -> Vec<[usize; 3]> {
    let [d, l, w] = mask.dims();
    let on = |z: usize, y: usize, x: usize| mask.get(z, y, x) >= 0.5;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..l {
            for x in 0..w {
                if !on(z, y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == l
                    || x + 1 == w
                    || !on(z, y - 1, x)
                    || !on(z, y + 1, x)
                    || !on(z, y, x - 1)
                    || !on(z, y, x + 1);
                if edge {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Label boundary points of one slice, sorted by row for pruned search.
struct SliceIndex {
    points: Vec<[f64; 2]>,
}

impl SliceIndex {
    /// Squared distance to the nearest point; rows are sorted so the scan
    /// starts at the closest row and stops once the row gap alone is too far.
    fn nearest_sq(&self, q: [f64; 2]) -> f64 {
        let pts = &self.points;
        let start = pts.partition_point(|p| p[0] < q[0]);
        let mut best = f64::INFINITY;
        for p in pts[start..].iter() {
            let dy = p[0] - q[0];
            if dy * dy > best {
                break;
            }
            best = best.min(dy * dy + (p[1] - q[1]).powi(2));
        }
        for p in pts[..start].iter().rev() {
            let dy = p[0] - q[0];
            if dy * dy > best {
                break;
            }
            best = best.min(dy * dy + (p[1] - q[1]).powi(2));
        }
        best
    }
}

/// Root-mean-square distance from each prediction boundary point to the
/// nearest label boundary point of the same slice, in voxels or, with
/// `spacing = [dz, dy, dx]`, in physical units. If a slice holds prediction
/// boundary but no label boundary, its points fall back to the nearest label
/// boundary point anywhere in the volume (through-plane spacing included).
pub fn boundary_rmse(pred: &Volume, label: &Volume, spacing: Option<[f64; 3]>) -> Result<f64> {
    if pred.dims() != label.dims() {
        return Err(Error::shape("boundary_rmse", "dims", format!("{:?} vs {:?}", pred.dims(), label.dims())));
    }
    let [sz, sy, sx] = spacing.unwrap_or([1.0; 3]);
    let pb = boundary_points(pred);
    if pb.is_empty() {
        return Err(Error::Empty("prediction boundary".into()));
    }
    let lb = boundary_points(label);
    if lb.is_empty() {
        return Err(Error::Empty("label boundary".into()));
    }
    let depth = pred.depth();
    let mut slices: Vec<SliceIndex> = (0..depth).map(|_| SliceIndex { points: Vec::new() }).collect();
    for &[z, y, x] in &lb {
        slices[z].points.push([y as f64 * sy, x as f64 * sx]);
    }
    for s in &mut slices {
        s.points.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    }
    let mut sum = 0.0;
    for &[z, y, x] in &pb {
        let q = [y as f64 * sy, x as f64 * sx];
        let d2 = if slices[z].points.is_empty() {
            slices
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.points.is_empty())
                .map(|(zz, s)| ((zz as f64 - z as f64) * sz).powi(2) + s.nearest_sq(q))
                .fold(f64::INFINITY, f64::min)
        } else {
            slices[z].nearest_sq(q)
        };
        sum += d2;
    }
    Ok((sum / pb.len() as f64).sqrt())
}
