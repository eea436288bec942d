//! Volume files: a text header plus a raw little-endian voxel blob.
//!
//! ```text
//! mdsnet-volume 1
//! dims 32 64 64
//! dtype f32
//! order d,l,w
//! kind image
//! spacing 2.5 0.8 0.8
//! blob case000.raw
//! ```
//!
//! `spacing none` marks missing spacing metadata. `u8` stores the voxel
//! value itself and only accepts integers in `0..=255`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Case, Volume, VolumeKind};
use crate::error::{Error, Result};

pub const DATASET_INDEX: &str = "dataset.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoxelType {
    U8,
    F32,
}

impl VoxelType {
    fn name(self) -> &'static str {
        match self {
            VoxelType::U8 => "u8",
            VoxelType::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            VoxelType::U8 => 1,
            VoxelType::F32 => 4,
        }
    }

    pub fn encode(self, voxels: &[f64]) -> Result<Vec<u8>> {
        match self {
            VoxelType::U8 => voxels
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                        Ok(v as u8)
                    } else {
                        Err(Error::Invalid(format!("voxel {v} is not representable as u8")))
                    }
                })
                .collect(),
            VoxelType::F32 => Ok(voxels.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()),
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            VoxelType::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
            VoxelType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect(),
        }
    }
}

impl FromStr for VoxelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(VoxelType::U8),
            "f32" => Ok(VoxelType::F32),
            other => Err(Error::Invalid(format!("unsupported dtype {other:?}"))),
        }
    }
}

/// Writes `header` and a sibling `.raw` blob.
pub fn write_volume(header: &Path, volume: &Volume, dtype: VoxelType) -> Result<()> {
    let blob_path = header.with_extension("raw");
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad volume path {header:?}")))?;
    let [d, l, w] = volume.dims();
    let spacing = match volume.spacing() {
        Some([a, b, c]) => format!("{a} {b} {c}"),
        None => "none".to_string(),
    };
    let text = format!(
        "mdsnet-volume 1\ndims {d} {l} {w}\ndtype {}\norder d,l,w\nkind {}\nspacing {spacing}\nblob {blob_name}\n",
        dtype.name(),
        volume.kind()
    );
    let bytes = dtype.encode(volume.voxels())?;
    if let Some(dir) = header.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob_path, bytes)?;
    fs::write(header, text)?;
    Ok(())
}

pub fn read_volume(header: &Path) -> Result<Volume> {
    let text = fs::read_to_string(header)?;
    let bad = |d: String| Error::format(header, d);
    let mut lines = text.lines();
    if lines.next() != Some("mdsnet-volume 1") {
        return Err(bad("missing `mdsnet-volume 1` header".into()));
    }
    let (mut dims, mut dtype, mut kind, mut spacing, mut blob) = (None, None, None, None, None);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            ["dims", a, b, c] => {
                let p = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad extent {s:?}")));
                dims = Some([p(a)?, p(b)?, p(c)?]);
            }
            ["dtype", t] => dtype = Some(t.parse::<VoxelType>()?),
            ["order", o] if *o == "d,l,w" => {}
            ["order", o] => return Err(bad(format!("unsupported axis order {o}"))),
            ["kind", k] => kind = Some(k.parse::<VolumeKind>()?),
            ["spacing", "none"] => spacing = Some(None),
            ["spacing", a, b, c] => {
                let p = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad spacing {s:?}")));
                spacing = Some(Some([p(a)?, p(b)?, p(c)?]));
            }
            ["blob", b] => blob = Some(b.to_string()),
            _ => return Err(bad(format!("unrecognised header line {line:?}"))),
        }
    }
    let dims = dims.ok_or_else(|| bad("missing dims".into()))?;
    let dtype = dtype.ok_or_else(|| bad("missing dtype".into()))?;
    let kind = kind.ok_or_else(|| bad("missing kind".into()))?;
    let blob = blob.ok_or_else(|| bad("missing blob".into()))?;
    let blob_path = header.parent().unwrap_or(Path::new("")).join(blob);
    let bytes = fs::read(&blob_path)?;
    let expected = dims.iter().product::<usize>() * dtype.width();
    if bytes.len() != expected {
        return Err(Error::format(&blob_path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(Volume::new(dims, dtype.decode(&bytes), kind)?.with_spacing(spacing.flatten()))
}

/// Reads a headerless blob of `dims` voxels in `d, l, w` order.
pub fn read_raw(path: &Path, dims: [usize; 3], dtype: VoxelType, kind: VolumeKind) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let expected = dims.iter().product::<usize>() * dtype.width();
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Volume::new(dims, dtype.decode(&bytes), kind)
}

/// Writes only the voxel blob, without a header.
pub fn write_raw(path: &Path, volume: &Volume, dtype: VoxelType) -> Result<()> {
    fs::write(path, dtype.encode(volume.voxels())?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DatasetRow {
    id: String,
    image: String,
    label: String,
}

/// Writes every case as `{id}-image.hdr` (f32) and `{id}-label.hdr` (u8) plus
/// a `dataset.csv` index.
pub fn write_dataset(dir: &Path, cases: &[Case]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = csv::Writer::from_path(dir.join(DATASET_INDEX)).map_err(|e| Error::format(dir, e.to_string()))?;
    for case in cases {
        let row = DatasetRow { id: case.id.clone(), image: format!("{}-image.hdr", case.id), label: format!("{}-label.hdr", case.id) };
        write_volume(&dir.join(&row.image), &case.image, VoxelType::F32)?;
        write_volume(&dir.join(&row.label), &case.label, VoxelType::U8)?;
        index.serialize(&row).map_err(|e| Error::format(dir, e.to_string()))?;
    }
    index.flush()?;
    Ok(())
}

/// Reads the cases listed in `dir/dataset.csv`, in file order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Case>> {
    let path = dir.join(DATASET_INDEX);
    let mut index = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut cases = Vec::new();
    for row in index.deserialize::<DatasetRow>() {
        let row = row.map_err(|e| Error::format(&path, e.to_string()))?;
        let image = read_volume(&dir.join(&row.image))?;
        let label = read_volume(&dir.join(&row.label))?;
        if image.dims() != label.dims() {
            return Err(Error::shape("dataset", "dims", format!("case {}: {:?} vs {:?}", row.id, image.dims(), label.dims())));
        }
        cases.push(Case { id: row.id, image, label });
    }
    if cases.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    Ok(cases)
}
