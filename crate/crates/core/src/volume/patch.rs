use ndarray::s;
use rand::Rng;

use super::{SegMask, Volume};
use crate::error::{Error, Result};
use crate::seed;

/// A patch cut out of a volume (and optionally its mask), never padded.
#[derive(Clone, Debug)]
pub struct Patch {
    pub image: Volume,
    pub mask: Option<SegMask>,
    /// Corner of the patch in volume coordinates.
    pub origin: [usize; 3],
    /// True when the foreground route was taken.
    pub foreground_centered: bool,
    /// True when foreground sampling was requested but the mask was empty,
    /// so a uniform center was used instead.
    pub fell_back_to_uniform: bool,
}

impl Patch {
    pub fn center(&self) -> [usize; 3] {
        let sh = self.image.shape();
        std::array::from_fn(|a| self.origin[a] + sh[a] / 2)
    }
}

/// Samples a patch of `size`. With probability `foreground_bias` (and a
/// non-empty mask) the patch center is a foreground voxel; otherwise the
/// corner is uniform over all positions that keep the patch inside the grid.
pub fn sample_patch(
    v: &Volume,
    m: Option<&SegMask>,
    size: [usize; 3],
    foreground_bias: f64,
    seed: u64,
) -> Result<Patch> {
    let shape = v.shape();
    if (0..3).any(|a| size[a] == 0 || size[a] > shape[a]) {
        return Err(Error::ShapeMismatch {
            left: size.to_vec(),
            right: shape.to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&foreground_bias) {
        return Err(Error::InvalidConfig(format!(
            "foreground_bias {foreground_bias} outside [0, 1]"
        )));
    }
    if let Some(m) = m {
        m.check_pair(v)?;
    }
    let mut rng = seed::rng(seed);
    let want_fg = foreground_bias > 0.0 && rng.random_bool(foreground_bias);
    let half: [usize; 3] = std::array::from_fn(|a| size[a] / 2);
    let max_origin: [usize; 3] = std::array::from_fn(|a| shape[a] - size[a]);

    let mut foreground_centered = false;
    let mut fell_back_to_uniform = false;
    let mut origin = None;
    if want_fg {
        let fg = m.map(|m| m.foreground()).unwrap_or_default();
        if fg.is_empty() {
            fell_back_to_uniform = true;
        } else {
            // prefer foreground centers whose patch fits without clamping
            let fits: Vec<&[usize; 3]> = fg
                .iter()
                .filter(|c| (0..3).all(|a| c[a] >= half[a] && c[a] - half[a] <= max_origin[a]))
                .collect();
            let c = if fits.is_empty() {
                fg[rng.random_range(0..fg.len())]
            } else {
                *fits[rng.random_range(0..fits.len())]
            };
            origin = Some(std::array::from_fn(|a| c[a].saturating_sub(half[a]).min(max_origin[a])));
            foreground_centered = true;
        }
    }
    let origin: [usize; 3] = origin.unwrap_or_else(|| std::array::from_fn(|a| rng.random_range(0..=max_origin[a])));

    let sl = s![
        origin[0]..origin[0] + size[0],
        origin[1]..origin[1] + size[1],
        origin[2]..origin[2] + size[2]
    ];
    let image = Volume::new(v.data().slice(sl).to_owned(), v.spacing(), v.case_id())?;
    let mask = m
        .map(|m| SegMask::new(m.data().slice(sl).to_owned(), m.spacing(), m.case_id()))
        .transpose()?;
    Ok(Patch {
        image,
        mask,
        origin,
        foreground_centered,
        fell_back_to_uniform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use ndarray::Array3;

    fn fixture() -> (Volume, SegMask) {
        let v = Volume::new(
            Array3::from_shape_fn((20, 18, 12), |(x, y, z)| (x * 100 + y * 10 + z) as f64),
            Spacing::default(),
            "p",
        )
        .unwrap();
        let mut m = Array3::zeros((20, 18, 12));
        for x in 8..11 {
            for y in 7..9 {
                m[[x, y, 6]] = 1;
            }
        }
        (v, SegMask::new(m, Spacing::default(), "p").unwrap())
    }

    #[test]
    fn full_size_is_identity() {
        let (v, m) = fixture();
        let p = sample_patch(&v, Some(&m), [20, 18, 12], 0.5, 1).unwrap();
        assert_eq!(p.image.data(), v.data());
        assert_eq!(p.mask.unwrap().data(), m.data());
    }

    #[test]
    fn forced_foreground_center() {
        let (v, m) = fixture();
        for seed in 0..50 {
            let p = sample_patch(&v, Some(&m), [8, 8, 8], 1.0, seed).unwrap();
            assert!(p.foreground_centered);
            assert!(m.get(p.center()));
            let pm = p.mask.as_ref().unwrap();
            assert!(pm.get([4, 4, 4]));
        }
    }

    #[test]
    fn empty_mask_falls_back() {
        let (v, _) = fixture();
        let empty = SegMask::zeros(v.shape(), Spacing::default(), "p");
        let p = sample_patch(&v, Some(&empty), [8, 8, 8], 1.0, 3).unwrap();
        assert!(p.fell_back_to_uniform && !p.foreground_centered);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let (v, _) = fixture();
        assert!(sample_patch(&v, None, [21, 4, 4], 0.0, 0).is_err());
    }

    #[test]
    fn foreground_fraction_monte_carlo() {
        let (v, m) = fixture();
        let hits = (0..1000)
            .filter(|&s| {
                let p = sample_patch(&v, Some(&m), [8, 8, 8], 0.5, s).unwrap();
                m.get(p.center())
            })
            .count();
        let frac = hits as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&frac), "{frac}");
    }

    #[test]
    fn deterministic_and_inside_grid() {
        let (v, m) = fixture();
        for seed in 0..100 {
            let a = sample_patch(&v, Some(&m), [6, 5, 4], 0.3, seed).unwrap();
            let b = sample_patch(&v, Some(&m), [6, 5, 4], 0.3, seed).unwrap();
            assert_eq!(a.origin, b.origin);
            assert!(a.origin[0] + 6 <= 20 && a.origin[1] + 5 <= 18 && a.origin[2] + 4 <= 12);
            let o = a.origin;
            assert_eq!(a.image.data()[[0, 0, 0]], v.data()[[o[0], o[1], o[2]]]);
        }
    }
}
