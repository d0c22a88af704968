//! NIfTI-1 reading and writing for volumes, masks and label maps.
//!
//! Arrays are indexed `[x, y, z]`; the nifti crate handles the Fortran-order
//! layout on disk. Files ending in `.nii.gz` are gzip-compressed.

use std::path::Path;

use ndarray::{Array3, ArrayD, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{SegMask, Spacing, Volume};
use crate::error::{Error, Result};

const UNITS_MM: u8 = 2;

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_raw<T: nifti::DataElement>(path: &Path) -> Result<(ArrayD<T>, Spacing)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header();
    let ndim = header.dim[0] as usize;
    // trailing singleton dimensions (e.g. 64x64x32x1) are still 3D images
    let effective = (1..=ndim.min(7))
        .rev()
        .find(|&d| header.dim[d] > 1)
        .unwrap_or(0)
        .max(3.min(ndim));
    if ndim < 3 || effective != 3 {
        return Err(Error::NotThreeDimensional(ndim));
    }
    let spacing = Spacing::new([
        header.pixdim[1] as f64,
        header.pixdim[2] as f64,
        header.pixdim[3] as f64,
    ])?;
    let data = obj.into_volume().into_ndarray::<T>().map_err(|e| nifti_err(path, e))?;
    Ok((data, spacing))
}

fn into3<T: Clone>(a: ArrayD<T>, path: &Path) -> Result<Array3<T>> {
    let shape = a.shape().to_vec();
    let a = if shape.len() > 3 {
        a.into_shape_clone(&shape[..3]).map_err(|e| nifti_err(path, e))?
    } else {
        a
    };
    let a = a.into_dimensionality::<Ix3>().map_err(|e| nifti_err(path, e))?;
    Ok(a.as_standard_layout().into_owned())
}

fn write_raw<T>(path: &Path, data: &Array3<T>, spacing: Spacing) -> Result<()>
where
    T: nifti::DataElement + bytemuck::Pod,
{
    let s = spacing.0;
    let header = NiftiHeader {
        pixdim: [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 1.0, 1.0, 1.0, 1.0],
        xyzt_units: UNITS_MM,
        ..NiftiHeader::default()
    };
    let compress = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    WriterOptions::new(path)
        .reference_header(&header)
        .compress(compress)
        .write_nifti(data)
        .map_err(|e| nifti_err(path, e))
}

/// Reads a 3D scalar NIfTI image. Intensities are returned unchanged
/// (after the header's slope/intercept, which the writer leaves at identity).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (data, spacing) = read_raw::<f64>(path)?;
    let case_id = case_id_from_path(path);
    Volume::new(into3(data, path)?, spacing, case_id)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_raw(path.as_ref(), v.data(), v.spacing())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    let path = path.as_ref();
    let (data, spacing) = read_raw::<u8>(path)?;
    SegMask::new(into3(data, path)?, spacing, case_id_from_path(path))
}

pub fn save_mask(m: &SegMask, path: impl AsRef<Path>) -> Result<()> {
    write_raw(path.as_ref(), m.data(), m.spacing())
}

pub fn save_labels(labels: &Array3<u32>, spacing: Spacing, path: impl AsRef<Path>) -> Result<()> {
    write_raw(path.as_ref(), labels, spacing)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(Array3<u32>, Spacing)> {
    let path = path.as_ref();
    let (data, spacing) = read_raw::<u32>(path)?;
    Ok((into3(data, path)?, spacing))
}

fn case_id_from_path(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}
