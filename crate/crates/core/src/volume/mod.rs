//! Volumes, stack planning, views, cropping, augmentation, phantoms and file I/O.

mod augment;
mod crop;
mod io;
mod phantom;
mod stack;
mod view;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, augment_block, random_augmentation, Augmentation};
pub use crop::{crop_to, crop_window, label_centroid, uncrop, volume_center, CropWindow};
pub use io::{read_dataset, read_raw, read_volume, write_dataset, write_raw, write_volume, VoxelType, DATASET_INDEX};
pub use phantom::{generate_dataset, generate_phantom, generate_with, Case, PhantomParams};
pub use stack::{extract_all, extract_stack, merge_stacks, plan_stacks, StackPlan};
pub use view::{inverse_view, transpose_view, ViewAxis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
    Probability,
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VolumeKind::Image => "image",
            VolumeKind::Label => "label",
            VolumeKind::Probability => "probability",
        })
    }
}

impl FromStr for VolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(VolumeKind::Image),
            "label" => Ok(VolumeKind::Label),
            "probability" => Ok(VolumeKind::Probability),
            other => Err(Error::Invalid(format!("unknown volume kind {other:?}"))),
        }
    }
}

/// A `depth x length x width` scalar grid, slice-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f64>,
    kind: VolumeKind,
    spacing: Option<[f64; 3]>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("volume extents must be positive, got {dims:?}")));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::shape("volume", "length", format!("{dims:?} needs {n} voxels, got {}", voxels.len())));
        }
        let vol = Volume { dims, voxels, kind, spacing: None };
        vol.validate()?;
        Ok(vol)
    }

    pub fn zeros(dims: [usize; 3], kind: VolumeKind) -> Self {
        Volume::new(dims, vec![0.0; dims.iter().product()], kind).expect("zeros are valid for every kind")
    }

    fn validate(&self) -> Result<()> {
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} volume voxel {i}", self.kind)));
        }
        match self.kind {
            VolumeKind::Image => Ok(()),
            VolumeKind::Label => match self.voxels.iter().find(|&&v| v != 0.0 && v != 1.0) {
                Some(v) => Err(Error::Invalid(format!("label volume contains non-binary value {v}"))),
                None => Ok(()),
            },
            VolumeKind::Probability => match self.voxels.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                Some(v) => Err(Error::Invalid(format!("probability volume contains {v} outside [0, 1]"))),
                None => Ok(()),
            },
        }
    }

    pub fn with_spacing(mut self, spacing: Option<[f64; 3]>) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v > 0.0).count()
    }

    /// Binary label volume of `voxel >= thr`.
    pub fn threshold(&self, thr: f64) -> Volume {
        let voxels = self.voxels.iter().map(|&v| if v >= thr { 1.0 } else { 0.0 }).collect();
        Volume { dims: self.dims, voxels, kind: VolumeKind::Label, spacing: self.spacing }
    }

    /// Reinterprets the voxels under another kind, re-checking its invariants.
    pub fn into_kind(mut self, kind: VolumeKind) -> Result<Volume> {
        self.kind = kind;
        self.validate()?;
        Ok(self)
    }

    /// Slices `range` as a new volume.
    pub fn sub_depth(&self, range: std::ops::Range<usize>) -> Result<Volume> {
        if range.start >= range.end || range.end > self.depth() {
            return Err(Error::Invalid(format!("slice range {range:?} outside depth {}", self.depth())));
        }
        let n = self.slice_len();
        Ok(Volume {
            dims: [range.len(), self.dims[1], self.dims[2]],
            voxels: self.voxels[range.start * n..range.end * n].to_vec(),
            kind: self.kind,
            spacing: self.spacing,
        })
    }

    pub(crate) fn from_parts_unchecked(dims: [usize; 3], voxels: Vec<f64>, kind: VolumeKind, spacing: Option<[f64; 3]>) -> Self {
        debug_assert_eq!(voxels.len(), dims.iter().product::<usize>());
        Volume { dims, voxels, kind, spacing }
    }
}
