//! Point / box / category prompts and their encoding as input channels.

use ndarray::{s, Array3};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::squared_edt;
use crate::volume::{SegMask, Spacing};

/// Width of each point bump.
pub const POINT_SIGMA_MM: f64 = 2.0;
/// Margin added around ground-truth boxes.
pub const BOX_DILATION: usize = 2;

/// Axis-aligned box with inclusive corners, in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<[usize; 3]>,
    pub boxes: Vec<Box3>,
    pub category_id: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPolicy {
    #[default]
    None,
    Points,
    Box,
    PointsAndBox,
}

impl PromptPolicy {
    pub const ALL: [PromptPolicy; 4] = [
        PromptPolicy::None,
        PromptPolicy::Points,
        PromptPolicy::Box,
        PromptPolicy::PointsAndBox,
    ];

    pub fn uses_points(self) -> bool {
        matches!(self, PromptPolicy::Points | PromptPolicy::PointsAndBox)
    }

    pub fn uses_box(self) -> bool {
        matches!(self, PromptPolicy::Box | PromptPolicy::PointsAndBox)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptPolicy::None => "none",
            PromptPolicy::Points => "points",
            PromptPolicy::Box => "box",
            PromptPolicy::PointsAndBox => "points_and_box",
        }
    }
}

impl std::str::FromStr for PromptPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptPolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown prompt policy {s:?}")))
    }
}

/// The two prompt input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptChannels {
    pub point: Array3<f64>,
    pub boxes: Array3<f64>,
}

impl PromptChannels {
    pub fn zeros(shape: [usize; 3]) -> Self {
        PromptChannels {
            point: Array3::zeros(shape),
            boxes: Array3::zeros(shape),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.point.dim();
        [d.0, d.1, d.2]
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Self {
        let sl = s![
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ];
        PromptChannels {
            point: self.point.slice(sl).to_owned(),
            boxes: self.boxes.slice(sl).to_owned(),
        }
    }
}

fn check_point(p: [usize; 3], shape: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| p[a] >= shape[a]) {
        return Err(Error::OutOfBounds {
            point: p.map(|v| v as i64),
            shape,
        });
    }
    Ok(())
}

pub fn encode_prompts(p: &PromptSet, shape: [usize; 3], spacing: Spacing) -> Result<PromptChannels> {
    let mut ch = PromptChannels::zeros(shape);
    for b in &p.boxes {
        check_point(b.lo, shape)?;
        check_point(b.hi, shape)?;
        if (0..3).any(|a| b.lo[a] > b.hi[a]) {
            return Err(Error::InvalidConfig(format!("box {b:?} has lo > hi")));
        }
        ch.boxes
            .slice_mut(s![b.lo[0]..=b.hi[0], b.lo[1]..=b.hi[1], b.lo[2]..=b.hi[2]])
            .fill(1.0);
    }
    for &pt in &p.points {
        check_point(pt, shape)?;
    }
    if !p.points.is_empty() {
        let sig: Vec<f64> = spacing.0.iter().map(|s| POINT_SIGMA_MM / s).collect();
        // per-axis separable factors
        let factor = |a: usize, c: usize| -> Vec<f64> {
            (0..shape[a])
                .map(|i| {
                    let d = (i as f64 - c as f64) / sig[a];
                    (-0.5 * d * d).exp()
                })
                .collect()
        };
        for &pt in &p.points {
            let (fx, fy, fz) = (factor(0, pt[0]), factor(1, pt[1]), factor(2, pt[2]));
            for ((x, y, z), v) in ch.point.indexed_iter_mut() {
                *v += fx[x] * fy[y] * fz[z];
            }
        }
        ch.point.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(ch)
}

/// The foreground voxel farthest from the background (ties to the first in
/// raster order).
pub fn interior_point(mask: &SegMask) -> Option<[usize; 3]> {
    if mask.is_empty() {
        return None;
    }
    // distance to the background, with the outside of the grid counting as background
    let sh = mask.shape();
    let padded = Array3::from_shape_fn((sh[0] + 2, sh[1] + 2, sh[2] + 2), |(x, y, z)| {
        x == 0
            || y == 0
            || z == 0
            || x == sh[0] + 1
            || y == sh[1] + 1
            || z == sh[2] + 1
            || !mask.get([x - 1, y - 1, z - 1])
    });
    let d = squared_edt(&padded, mask.spacing());
    let mut best = None;
    let mut best_d = f64::NEG_INFINITY;
    for p in mask.foreground() {
        let v = d[[p[0] + 1, p[1] + 1, p[2] + 1]];
        if v > best_d {
            best_d = v;
            best = Some(p);
        }
    }
    best
}

/// Ground-truth bounding box grown by `margin` voxels and clipped to the grid.
pub fn dilated_box(mask: &SegMask, margin: usize) -> Option<Box3> {
    let (lo, hi) = mask.bounding_box()?;
    let sh = mask.shape();
    Some(Box3 {
        lo: [0, 1, 2].map(|a| lo[a].saturating_sub(margin)),
        hi: [0, 1, 2].map(|a| (hi[a] + margin).min(sh[a] - 1)),
    })
}

/// Oracle prompts used at evaluation time.
pub fn oracle_prompts(mask: &SegMask, policy: PromptPolicy, category_id: Option<usize>) -> PromptSet {
    PromptSet {
        points: if policy.uses_points() {
            interior_point(mask).into_iter().collect()
        } else {
            vec![]
        },
        boxes: if policy.uses_box() {
            dilated_box(mask, BOX_DILATION).into_iter().collect()
        } else {
            vec![]
        },
        category_id,
    }
}

/// Training-time prompts: a uniformly drawn foreground point and the dilated
/// bounding box.
pub fn sampled_prompts<R: rand::Rng>(
    mask: &SegMask,
    policy: PromptPolicy,
    category_id: Option<usize>,
    rng: &mut R,
) -> PromptSet {
    let points = if policy.uses_points() {
        mask.foreground().choose(rng).copied().into_iter().collect()
    } else {
        vec![]
    };
    PromptSet {
        points,
        boxes: if policy.uses_box() {
            dilated_box(mask, BOX_DILATION).into_iter().collect()
        } else {
            vec![]
        },
        category_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp() -> Spacing {
        Spacing::new([1.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn empty_prompts_give_zero_channels() {
        let ch = encode_prompts(&PromptSet::default(), [4, 5, 6], sp()).unwrap();
        assert!(ch.point.iter().all(|v| *v == 0.0));
        assert!(ch.boxes.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn point_peaks_at_one() {
        let p = PromptSet {
            points: vec![[2, 3, 1]],
            ..Default::default()
        };
        let ch = encode_prompts(&p, [8, 8, 4], sp()).unwrap();
        assert_eq!(ch.point[[2, 3, 1]], 1.0);
        let max = ch.point.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
        // sigma is 2 voxels in-plane and 1 voxel along z
        assert!((ch.point[[4, 3, 1]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((ch.point[[2, 3, 2]] - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn overlapping_points_clip_to_one() {
        let p = PromptSet {
            points: vec![[2, 2, 2], [2, 3, 2]],
            ..Default::default()
        };
        let ch = encode_prompts(&p, [6, 6, 6], sp()).unwrap();
        assert!(ch.point.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_box_is_all_ones() {
        let p = PromptSet {
            boxes: vec![Box3 {
                lo: [0, 0, 0],
                hi: [3, 4, 5],
            }],
            ..Default::default()
        };
        let ch = encode_prompts(&p, [4, 5, 6], sp()).unwrap();
        assert!(ch.boxes.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn out_of_bounds_prompt_errors() {
        let p = PromptSet {
            points: vec![[4, 0, 0]],
            ..Default::default()
        };
        assert!(matches!(
            encode_prompts(&p, [4, 4, 4], sp()),
            Err(Error::OutOfBounds { .. })
        ));
        let b = PromptSet {
            boxes: vec![Box3 {
                lo: [0, 0, 0],
                hi: [1, 1, 9],
            }],
            ..Default::default()
        };
        assert!(encode_prompts(&b, [4, 4, 4], sp()).is_err());
    }

    #[test]
    fn oracle_prompts_from_mask() {
        let mut a = Array3::zeros((9, 9, 9));
        a.slice_mut(s![2..7, 2..7, 2..7]).fill(1u8);
        let m = SegMask::new(a, Spacing::isotropic(1.0).unwrap(), "m").unwrap();
        assert_eq!(interior_point(&m), Some([4, 4, 4]));
        let b = dilated_box(&m, 2).unwrap();
        assert_eq!(
            b,
            Box3 {
                lo: [0, 0, 0],
                hi: [8, 8, 8]
            }
        );
        let p = oracle_prompts(&m, PromptPolicy::Box, Some(1));
        assert!(p.points.is_empty() && p.boxes.len() == 1);
        let empty = SegMask::zeros([3, 3, 3], Spacing::default(), "e");
        assert_eq!(
            oracle_prompts(&empty, PromptPolicy::PointsAndBox, None),
            PromptSet::default()
        );
    }

    #[test]
    fn policy_round_trip() {
        for p in PromptPolicy::ALL {
            assert_eq!(p.as_str().parse::<PromptPolicy>().unwrap(), p);
        }
        assert!("both".parse::<PromptPolicy>().is_err());
    }
}
