use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// Slicing direction. Volumes are stored axial-first (`d, l, w`); the other
/// views swap the slicing axis to the front.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    Axial,
    Coronal,
    Sagittal,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal];

    /// Source axis for each output axis.
    fn permutation(self) -> [usize; 3] {
        match self {
            ViewAxis::Axial => [0, 1, 2],
            ViewAxis::Coronal => [1, 0, 2],
            ViewAxis::Sagittal => [2, 1, 0],
        }
    }
}

impl fmt::Display for ViewAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewAxis::Axial => "axial",
            ViewAxis::Coronal => "coronal",
            ViewAxis::Sagittal => "sagittal",
        })
    }
}

impl FromStr for ViewAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(ViewAxis::Axial),
            "coronal" => Ok(ViewAxis::Coronal),
            "sagittal" => Ok(ViewAxis::Sagittal),
            other => Err(Error::Invalid(format!("unknown view {other:?}"))),
        }
    }
}

fn permute(volume: &Volume, perm: [usize; 3]) -> Volume {
    let src = volume.dims();
    let dims = [src[perm[0]], src[perm[1]], src[perm[2]]];
    let strides = [src[1] * src[2], src[2], 1];
    let (s0, s1, s2) = (strides[perm[0]], strides[perm[1]], strides[perm[2]]);
    let data = volume.voxels();
    let mut out = Vec::with_capacity(data.len());
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            let base = a * s0 + b * s1;
            out.extend((0..dims[2]).map(|c| data[base + c * s2]));
        }
    }
    let spacing = volume.spacing().map(|s| [s[perm[0]], s[perm[1]], s[perm[2]]]);
    Volume::from_parts_unchecked(dims, out, volume.kind(), spacing)
}

/// Re-slices an axial-frame volume along `axis`.
pub fn transpose_view(volume: &Volume, axis: ViewAxis) -> Volume {
    permute(volume, axis.permutation())
}

/// Brings a volume sliced along `axis` back to the axial frame.
pub fn inverse_view(volume: &Volume, axis: ViewAxis) -> Volume {
    let p = axis.permutation();
    let mut inv = [0; 3];
    for (i, &src) in p.iter().enumerate() {
        inv[src] = i;
    }
    permute(volume, inv)
}
