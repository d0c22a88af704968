//! Volumes, binary masks and domain tags, plus everything that produces or
//! slices them: NIfTI I/O, z-score normalization, patch sampling and the
//! synthetic phantom generator.

mod filter;
mod io;
mod patch;
mod phantom;

pub use filter::gaussian_smooth;
pub use io::{load_labels, load_mask, load_volume, save_labels, save_mask, save_volume};
pub use patch::{sample_patch, Patch};
pub use phantom::{make_phantom, make_untagged_phantom, Phantom, PhantomSpec};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel size in millimetres along the three array axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(s: [f64; 3]) -> Result<Self> {
        if s.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Spacing(s))
        } else {
            Err(Error::InvalidSpacing(s))
        }
    }

    pub fn isotropic(s: f64) -> Result<Self> {
        Self::new([s; 3])
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new([self.0[0] * c, self.0[1] * c, self.0[2] * c])
    }

    /// Physical diagonal of a grid of the given shape.
    pub fn diagonal(&self, shape: [usize; 3]) -> f64 {
        (0..3)
            .map(|a| (shape[a] as f64 * self.0[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0; 3])
    }
}

pub(crate) fn shape3<T>(a: &ArrayView3<'_, T>) -> [usize; 3] {
    let (x, y, z) = a.dim();
    [x, y, z]
}

/// A 3D scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f64>,
    spacing: Spacing,
    case_id: String,
}

impl Volume {
    /// Rejects non-finite intensities.
    pub fn new(data: Array3<f64>, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteIntensity([idx.0, idx.1, idx.2]));
        }
        Ok(Volume {
            data,
            spacing,
            case_id: case_id.into(),
        })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.data.view())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_case_id(mut self, id: impl Into<String>) -> Self {
        self.case_id = id.into();
        self
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(self.data.iter().copied())
    }
}

pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Binary segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    data: Array3<u8>,
    spacing: Spacing,
    case_id: String,
}

impl SegMask {
    pub fn new(data: Array3<u8>, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::NonBinaryMask(*v as i64));
        }
        Ok(SegMask {
            data,
            spacing,
            case_id: case_id.into(),
        })
    }

    pub fn from_bools(data: &Array3<bool>, spacing: Spacing, case_id: impl Into<String>) -> Self {
        SegMask {
            data: data.mapv(u8::from),
            spacing,
            case_id: case_id.into(),
        }
    }

    pub fn zeros(shape: [usize; 3], spacing: Spacing, case_id: impl Into<String>) -> Self {
        SegMask {
            data: Array3::zeros(shape),
            spacing,
            case_id: case_id.into(),
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.data.view())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[p] == 1
    }

    /// Foreground voxel coordinates in C order.
    pub fn foreground(&self) -> Vec<[usize; 3]> {
        self.data
            .indexed_iter()
            .filter(|(_, v)| **v == 1)
            .map(|((x, y, z), _)| [x, y, z])
            .collect()
    }

    /// Inclusive bounding box `(lo, hi)` of the foreground.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for ((x, y, z), v) in self.data.indexed_iter() {
            if *v == 1 {
                any = true;
                for (a, c) in [x, y, z].into_iter().enumerate() {
                    lo[a] = lo[a].min(c);
                    hi[a] = hi[a].max(c);
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Checks the pairing invariant: identical shape and spacing.
    pub fn check_pair(&self, v: &Volume) -> Result<()> {
        if self.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        if self.spacing != v.spacing() {
            return Err(Error::SpacingMismatch {
                left: self.spacing.0,
                right: v.spacing().0,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Venous,
    OutOfPhase,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Venous => "venous",
            Phase::OutOfPhase => "out_of_phase",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target1,
    Target2,
}

impl DomainRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainRole::Source => "source",
            DomainRole::Target1 => "target1",
            DomainRole::Target2 => "target2",
        }
    }

    pub fn is_target(self) -> bool {
        !matches!(self, DomainRole::Source)
    }
}

/// Domain identity of a case: acquisition center, sequence phase and the
/// role the domain plays in the protocol.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainTag {
    pub center: String,
    pub phase: Phase,
    #[serde(rename = "domain_role")]
    pub role: DomainRole,
}

impl DomainTag {
    /// Target 2 is the cross-phase domain; source and target 1 are venous.
    pub fn new(center: impl Into<String>, phase: Phase, role: DomainRole) -> Result<Self> {
        let tag = DomainTag {
            center: center.into(),
            phase,
            role,
        };
        tag.validate()?;
        Ok(tag)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.role {
            DomainRole::Target2 => self.phase == Phase::OutOfPhase,
            DomainRole::Source | DomainRole::Target1 => self.phase == Phase::Venous,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDomainTag(format!(
                "role {} incompatible with phase {}",
                self.role.as_str(),
                self.phase.as_str()
            )))
        }
    }
}

/// Per-volume z-score.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let first = v.data.iter().next().copied();
    let distinct = match first {
        Some(f) => v.data.iter().any(|x| *x != f),
        None => false,
    };
    if !distinct {
        return Err(Error::DegenerateIntensity);
    }
    let (mean, std) = v.mean_std();
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::DegenerateIntensity);
    }
    Ok(Volume {
        data: v.data.mapv(|x| (x - mean) / std),
        spacing: v.spacing,
        case_id: v.case_id.clone(),
    })
}
