use super::{Volume, VolumeKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a depth-`d` volume is covered by `k`-slice stacks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackPlan {
    pub k: usize,
    pub starts: Vec<usize>,
    pub depth: usize,
}

impl StackPlan {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.starts[i]..self.starts[i] + self.k
    }

    /// Number of stacks covering each slice.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.depth];
        for i in 0..self.len() {
            for z in self.range(i) {
                c[z] += 1;
            }
        }
        c
    }
}

/// Stride-`k` starts `0, k, 2k, ...`; when `k` does not divide `depth` a last
/// stack anchored at `depth - k` closes the gap, overlapping its predecessor.
pub fn plan_stacks(depth: usize, k: usize) -> Result<StackPlan> {
    if k == 0 {
        return Err(Error::Invalid("stack size must be >= 1".into()));
    }
    if k > depth {
        return Err(Error::Invalid(format!("stack size {k} exceeds depth {depth}")));
    }
    let mut starts: Vec<usize> = (0..=depth - k).step_by(k).collect();
    if depth % k != 0 {
        starts.push(depth - k);
    }
    Ok(StackPlan { k, starts, depth })
}

fn check_plan(volume: &Volume, plan: &StackPlan) -> Result<()> {
    if volume.depth() != plan.depth {
        return Err(Error::shape("stack plan", "depth", format!("plan for {} slices, volume has {}", plan.depth, volume.depth())));
    }
    Ok(())
}

/// Copies stack `i` out as a `[k, l, w]` tensor.
pub fn extract_stack(volume: &Volume, plan: &StackPlan, i: usize) -> Result<Tensor> {
    check_plan(volume, plan)?;
    if i >= plan.len() {
        return Err(Error::Invalid(format!("stack index {i} out of {}", plan.len())));
    }
    let [_, l, w] = volume.dims();
    let n = l * w;
    let range = plan.range(i);
    Tensor::new(vec![plan.k, l, w], volume.voxels()[range.start * n..range.end * n].to_vec())
}

pub fn extract_all(volume: &Volume, plan: &StackPlan) -> Result<Vec<Tensor>> {
    (0..plan.len()).map(|i| extract_stack(volume, plan, i)).collect()
}

/// Reassembles a volume from per-stack blocks, averaging slices that more
/// than one stack covers.
pub fn merge_stacks(stacks: &[Tensor], plan: &StackPlan, kind: VolumeKind) -> Result<Volume> {
    if stacks.len() != plan.len() {
        return Err(Error::Invalid(format!("plan has {} stacks, got {}", plan.len(), stacks.len())));
    }
    let first = stacks.first().ok_or_else(|| Error::Empty("stack list".into()))?;
    let (k, l, w) = first.dims3("merge_stacks")?;
    if k != plan.k {
        return Err(Error::shape("merge_stacks", "slices", format!("plan k={}, stack has {k}", plan.k)));
    }
    let n = l * w;
    let mut sum = vec![0.0; plan.depth * n];
    for (i, s) in stacks.iter().enumerate() {
        if s.shape() != first.shape() {
            return Err(Error::shape("merge_stacks", "stack", format!("stack {i} is {:?}, expected {:?}", s.shape(), first.shape())));
        }
        let start = plan.starts[i] * n;
        for (acc, v) in sum[start..start + k * n].iter_mut().zip(s.data()) {
            *acc += v;
        }
    }
    for (z, &c) in plan.coverage().iter().enumerate() {
        if c > 1 {
            sum[z * n..(z + 1) * n].iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Volume::new([plan.depth, l, w], sum, kind)
}
