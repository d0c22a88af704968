//! Synthetic abdominal phantoms standing in for private MRI scans.
//!
//! The organ is a chain of overlapping ellipsoids bent along a curve
//! (pancreas-like). Venous phase renders it brighter than the surrounding
//! tissue by `contrast_gap`; out-of-phase inverts that contrast and darkens
//! the organ's one-voxel boundary shell. A center profile contributes
//! Gaussian noise and a smooth multiplicative bias field.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{gaussian_smooth, DomainTag, Phase, SegMask, Spacing, Volume};
use crate::error::{Error, Result};
use crate::seed;

const MAX_ATTEMPTS: usize = 10;
const MIN_FRACTION: f64 = 0.001;
const MAX_FRACTION: f64 = 0.10;
const BACKGROUND_LEVEL: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub n_ellipsoids: usize,
    pub center_noise_sigma: f64,
    pub bias_field_strength: f64,
    pub phase: Phase,
    pub contrast_gap: f64,
    pub boundary_suppression: f64,
    /// Non-target structures painted into the background.
    pub n_distractors: usize,
    /// Amplitude of the smooth tissue texture.
    pub texture_amplitude: f64,
    /// Organ thickness relative to the in-plane field of view.
    pub organ_radius: [f64; 2],
    /// Intensity offset of a vessel running alongside the organ, identical
    /// in both phases; 0 leaves the vessel out.
    pub vessel_contrast: f64,
    /// Give distractors the organ's texture instead of the background's.
    pub organlike_distractors: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_shape: [32, 32, 16],
            spacing: [1.25, 1.25, 2.5],
            n_ellipsoids: 3,
            center_noise_sigma: 0.1,
            bias_field_strength: 0.1,
            phase: Phase::Venous,
            contrast_gap: 0.6,
            boundary_suppression: 0.5,
            n_distractors: 3,
            texture_amplitude: 0.15,
            organ_radius: [0.09, 0.14],
            vessel_contrast: 0.0,
            organlike_distractors: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("phantom spec: {m}")));
        if self.grid_shape.iter().any(|&d| d < 4) {
            return bad("every grid dimension must be >= 4");
        }
        Spacing::new(self.spacing)?;
        if self.n_ellipsoids < 1 {
            return bad("n_ellipsoids must be >= 1");
        }
        if !(self.center_noise_sigma >= 0.0) {
            return bad("center_noise_sigma must be >= 0");
        }
        if !(0.0..=0.9).contains(&self.bias_field_strength) {
            return bad("bias_field_strength must lie in [0, 0.9]");
        }
        if !(self.contrast_gap > 0.0 && self.contrast_gap.is_finite()) {
            return bad("contrast_gap must be > 0");
        }
        if !(0.0..=1.0).contains(&self.boundary_suppression) {
            return bad("boundary_suppression must lie in [0, 1]");
        }
        if !(self.texture_amplitude >= 0.0) {
            return bad("texture_amplitude must be >= 0");
        }
        let [lo, hi] = self.organ_radius;
        if !(lo > 0.0 && hi >= lo) {
            return bad("organ_radius must satisfy 0 < lo <= hi");
        }
        if !self.vessel_contrast.is_finite() {
            return bad("vessel_contrast must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: SegMask,
    pub tag: DomainTag,
}

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

struct Ellipsoid {
    center: Vec3,
    axes: [Vec3; 3],
    radii: Vec3,
}

impl Ellipsoid {
    fn new(center: Vec3, tangent: Vec3, radii: Vec3) -> Self {
        let t = normalize(tangent);
        let helper = if t[2].abs() < 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        let u = normalize(cross(t, helper));
        let w = cross(t, u);
        Ellipsoid {
            center,
            axes: [t, u, w],
            radii,
        }
    }

    fn contains(&self, p: Vec3) -> bool {
        let d = sub(p, self.center);
        (0..3)
            .map(|i| (dot(d, self.axes[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn position(idx: (usize, usize, usize), spacing: [f64; 3]) -> Vec3 {
    [
        idx.0 as f64 * spacing[0],
        idx.1 as f64 * spacing[1],
        idx.2 as f64 * spacing[2],
    ]
}

/// Organ mask and, when enabled, the companion vessel mask.
fn organ_mask(spec: &PhantomSpec, rng: &mut seed::Rng) -> (Array3<bool>, Option<Array3<bool>>) {
    let s = spec.spacing;
    let extent: Vec3 = std::array::from_fn(|a| spec.grid_shape[a] as f64 * s[a]);
    let fov = extent[0].min(extent[1]);
    let length = fov * rng.random_range(0.35..0.55);
    let radius = fov * rng.random_range(spec.organ_radius[0]..=spec.organ_radius[1]);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = normalize([theta.cos(), theta.sin(), rng.random_range(-0.3..0.3)]);
    let perp = [-theta.sin(), theta.cos(), 0.0];
    let bend = rng.random_range(-0.3..0.3) * length;
    let anchor: Vec3 = std::array::from_fn(|a| extent[a] * rng.random_range(0.35..0.65));

    let n = spec.n_ellipsoids;
    let along = if n > 1 {
        (length / (2.0 * (n - 1) as f64) * 1.3).max(radius)
    } else {
        (length / 2.0).max(radius)
    };
    let parts: Vec<Ellipsoid> = (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
            let center =
                std::array::from_fn(|a| anchor[a] + t * length * dir[a] + bend * (t * t - 1.0 / 12.0) * perp[a]);
            let tangent = std::array::from_fn(|a| length * dir[a] + 2.0 * bend * t * perp[a]);
            let radii = [
                along,
                radius * rng.random_range(0.85..1.15),
                radius * rng.random_range(0.7..1.0),
            ];
            Ellipsoid::new(center, tangent, radii)
        })
        .collect();

    let organ = Array3::from_shape_fn(spec.grid_shape, |idx| {
        let p = position(idx, s);
        parts.iter().any(|e| e.contains(p))
    });
    if spec.vessel_contrast == 0.0 {
        return (organ, None);
    }
    // a thinner tube following the same curve, shifted sideways
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let vr = 0.5 * radius;
    let shift = side * (radius + 1.5 * vr);
    let m = 7;
    let vessel: Vec<Ellipsoid> = (0..m)
        .map(|i| {
            let t = 1.3 * (i as f64 / (m - 1) as f64 - 0.5);
            let center = std::array::from_fn(|a| {
                anchor[a] + t * length * dir[a] + (bend * (t * t - 1.0 / 12.0) + shift) * perp[a]
            });
            let tangent = std::array::from_fn(|a| length * dir[a] + 2.0 * bend * t * perp[a]);
            Ellipsoid::new(center, tangent, [(1.3 * length / (m - 1) as f64).max(vr), vr, vr])
        })
        .collect();
    let tube = Array3::from_shape_fn(spec.grid_shape, |idx| {
        let p = position(idx, s);
        !organ[idx] && vessel.iter().any(|e| e.contains(p))
    });
    (organ, Some(tube))
}

fn smooth_noise(shape: [usize; 3], sigma: f64, rng: &mut seed::Rng) -> Array3<f64> {
    let white = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng));
    let mut smooth = gaussian_smooth(&white, [sigma; 3]);
    let (_, std) = super::mean_std(smooth.iter().copied());
    if std > 0.0 {
        smooth.mapv_inplace(|v| v / std);
    }
    smooth
}

/// Smooth field in [-1, 1]: a linear ramp plus one low-frequency cosine.
fn bias_field(shape: [usize; 3], rng: &mut seed::Rng) -> Array3<f64> {
    let dir = normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..=1) as f64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let ramp_span: f64 = (0..3)
        .map(|a| dir[a].abs() * (shape[a].max(2) - 1) as f64)
        .sum::<f64>()
        .max(1e-9);
    let ramp_mid: f64 = (0..3).map(|a| dir[a] * (shape[a].max(2) - 1) as f64 / 2.0).sum();
    Array3::from_shape_fn(shape, |(x, y, z)| {
        let p = [x as f64, y as f64, z as f64];
        let ramp = (dot(p, dir) - ramp_mid) / (ramp_span / 2.0);
        let wave =
            (std::f64::consts::TAU * (0..3).map(|a| freq[a] * p[a] / shape[a] as f64).sum::<f64>() + phase).cos();
        (0.6 * ramp + 0.4 * wave).clamp(-1.0, 1.0)
    })
}

fn boundary_shell(mask: &Array3<bool>) -> Array3<bool> {
    let (nx, ny, nz) = mask.dim();
    Array3::from_shape_fn(mask.dim(), |(x, y, z)| {
        if !mask[[x, y, z]] {
            return false;
        }
        let p = [x as isize, y as isize, z as isize];
        let n = [nx as isize, ny as isize, nz as isize];
        (0..3).any(|a| {
            [-1isize, 1].into_iter().any(|d| {
                let mut q = p;
                q[a] += d;
                q[a] < 0 || q[a] >= n[a] || !mask[[q[0] as usize, q[1] as usize, q[2] as usize]]
            })
        })
    })
}

/// Generates one phantom. Deterministic in `(spec, tag, seed)`.
pub fn make_phantom(spec: &PhantomSpec, tag: &DomainTag, seed: u64) -> Result<Phantom> {
    tag.validate()?;
    if spec.phase != tag.phase {
        return Err(Error::InvalidConfig(format!(
            "phantom spec phase {} does not match tag phase {}",
            spec.phase.as_str(),
            tag.phase.as_str()
        )));
    }
    let (volume, mask) = make_untagged_phantom(spec, &tag.center, seed)?;
    Ok(Phantom {
        volume,
        mask,
        tag: tag.clone(),
    })
}

/// Phantom for a center outside the benchmark's domain roles (pretraining
/// pools). Same generator and determinism as [`make_phantom`].
pub fn make_untagged_phantom(spec: &PhantomSpec, center: &str, seed: u64) -> Result<(Volume, SegMask)> {
    spec.validate()?;
    let spacing = Spacing::new(spec.spacing)?;
    let base = seed::derive(seed::derive_label(seed, center), 0x5048_414e);
    let total = spec.grid_shape.iter().product::<usize>() as f64;

    let mut last_fraction = 0.0;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seed::rng(seed::derive(base, attempt as u64));
        let (organ, vessel) = organ_mask(spec, &mut rng);
        let fraction = organ.iter().filter(|v| **v).count() as f64 / total;
        last_fraction = fraction;
        if !(MIN_FRACTION..=MAX_FRACTION).contains(&fraction) {
            continue;
        }
        let image = render(spec, &organ, vessel.as_ref(), &mut rng);
        let case_id = format!("{center}-{seed}");
        let volume = Volume::new(image, spacing, case_id.clone())?;
        let mask = SegMask::from_bools(&organ, spacing, case_id);
        return Ok((volume, mask));
    }
    Err(Error::PhantomFraction {
        fraction: last_fraction,
        attempts: MAX_ATTEMPTS,
    })
}

fn render(spec: &PhantomSpec, organ: &Array3<bool>, vessel: Option<&Array3<bool>>, rng: &mut seed::Rng) -> Array3<f64> {
    let shape = spec.grid_shape;
    let s = spec.spacing;
    let gap = spec.contrast_gap;
    let extent: Vec3 = std::array::from_fn(|a| shape[a] as f64 * s[a]);
    let fov = extent[0].min(extent[1]);

    let texture = smooth_noise(shape, 2.0, rng);
    let mut image = texture.mapv(|t| BACKGROUND_LEVEL + spec.texture_amplitude * t);

    let early_texture = spec.organlike_distractors.then(|| smooth_noise(shape, 1.0, rng));
    let mut painted = Array3::from_elem(shape, false);
    for _ in 0..spec.n_distractors {
        let center: Vec3 = std::array::from_fn(|a| extent[a] * rng.random_range(0.1..0.9));
        let r = fov * rng.random_range(0.08..0.2);
        let radii = [r, r * rng.random_range(0.6..1.0), r * rng.random_range(0.6..1.0)];
        let tangent = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let blob = Ellipsoid::new(center, tangent, radii);
        let offset = if rng.random_bool(0.5) {
            -gap * rng.random_range(0.5..1.2)
        } else {
            gap * rng.random_range(1.6..2.4)
        };
        for (idx, v) in image.indexed_iter_mut() {
            if !organ[idx] && blob.contains(position(idx, s)) {
                if let Some(t) = &early_texture {
                    if !painted[idx] {
                        *v = BACKGROUND_LEVEL + 0.5 * spec.texture_amplitude * t[idx];
                        painted[idx] = true;
                    }
                }
                *v += offset;
            }
        }
    }

    if let Some(vessel) = vessel {
        for (v, inside) in image.iter_mut().zip(vessel) {
            if *inside {
                *v += spec.vessel_contrast;
            }
        }
    }

    let organ_texture = match early_texture {
        Some(t) => t,
        None => smooth_noise(shape, 1.0, rng),
    };
    let bias = bias_field(shape, rng).mapv(|f| 1.0 + spec.bias_field_strength * f);

    // Everything is multiplied by the bias field; the organ level is solved
    // so that the biased organ mean sits exactly `gap` above/below the biased
    // background mean.
    let mut bg_sum = 0.0;
    let mut bg_n = 0usize;
    let mut tex_bias = 0.0;
    let mut bias_sum = 0.0;
    let mut organ_n = 0usize;
    for (idx, v) in image.indexed_iter() {
        if organ[idx] {
            tex_bias += 0.5 * spec.texture_amplitude * organ_texture[idx] * bias[idx];
            bias_sum += bias[idx];
            organ_n += 1;
        } else {
            bg_sum += v * bias[idx];
            bg_n += 1;
        }
    }
    let bg_mean = bg_sum / bg_n.max(1) as f64;
    let sign = match spec.phase {
        Phase::Venous => 1.0,
        Phase::OutOfPhase => -1.0,
    };
    let target = bg_mean + sign * gap;
    let level = (target * organ_n as f64 - tex_bias) / bias_sum;

    for (idx, v) in image.indexed_iter_mut() {
        *v = if organ[idx] {
            (level + 0.5 * spec.texture_amplitude * organ_texture[idx]) * bias[idx]
        } else {
            *v * bias[idx]
        };
    }

    if spec.phase == Phase::OutOfPhase && spec.boundary_suppression > 0.0 {
        let shell = boundary_shell(organ);
        let drop = spec.boundary_suppression * bg_mean.abs();
        for (idx, v) in image.indexed_iter_mut() {
            if shell[idx] {
                *v -= drop;
            }
        }
    }

    if spec.center_noise_sigma > 0.0 {
        for v in image.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += spec.center_noise_sigma * n;
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DomainRole;
    use proptest::prelude::*;

    fn venous_tag() -> DomainTag {
        DomainTag::new("SRC_A", Phase::Venous, DomainRole::Source).unwrap()
    }

    fn oop_tag() -> DomainTag {
        DomainTag::new("TGT_D", Phase::OutOfPhase, DomainRole::Target2).unwrap()
    }

    fn organ_minus_background(p: &Phantom) -> f64 {
        let (mut so, mut no, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (idx, v) in p.volume.data().indexed_iter() {
            if p.mask.data()[idx] == 1 {
                so += v;
                no += 1;
            } else {
                sb += v;
                nb += 1;
            }
        }
        so / no as f64 - sb / nb as f64
    }

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::default();
        let a = make_phantom(&spec, &venous_tag(), 42).unwrap();
        let b = make_phantom(&spec, &venous_tag(), 42).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.mask, b.mask);
        let c = make_phantom(&spec, &venous_tag(), 43).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn venous_gap_is_exact_without_noise() {
        let spec = PhantomSpec {
            contrast_gap: 2.0,
            center_noise_sigma: 0.0,
            bias_field_strength: 0.0,
            ..PhantomSpec::default()
        };
        for seed in 0..5 {
            let p = make_phantom(&spec, &venous_tag(), seed).unwrap();
            assert!((organ_minus_background(&p) - 2.0).abs() < 1e-9);
        }
        // bias changes the field but the organ level is solved post-bias
        let biased = PhantomSpec {
            bias_field_strength: 0.4,
            ..spec
        };
        let p = make_phantom(&biased, &venous_tag(), 9).unwrap();
        assert!((organ_minus_background(&p) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_phase_organ_is_darker() {
        let spec = PhantomSpec {
            phase: Phase::OutOfPhase,
            center_noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let p = make_phantom(&spec, &oop_tag(), 3).unwrap();
        assert!(organ_minus_background(&p) < 0.0);
    }

    #[test]
    fn vessel_is_outside_the_organ_and_keeps_the_mask() {
        let quiet = PhantomSpec {
            center_noise_sigma: 0.0,
            bias_field_strength: 0.0,
            n_distractors: 0,
            texture_amplitude: 0.0,
            ..PhantomSpec::default()
        };
        let with = PhantomSpec {
            vessel_contrast: 5.0,
            ..quiet.clone()
        };
        let a = make_phantom(&quiet, &venous_tag(), 4).unwrap();
        let b = make_phantom(&with, &venous_tag(), 4).unwrap();
        assert_eq!(a.mask, b.mask);
        let bright = b
            .volume
            .data()
            .indexed_iter()
            .filter(|(idx, v)| b.mask.data()[*idx] == 0 && **v > 3.0)
            .count();
        assert!(bright > 0);
        assert!(organ_minus_background(&b) > 0.0);
    }

    #[test]
    fn organlike_distractors_keep_the_contrast_gap() {
        let spec = PhantomSpec {
            contrast_gap: 1.5,
            center_noise_sigma: 0.0,
            bias_field_strength: 0.0,
            organlike_distractors: true,
            ..PhantomSpec::default()
        };
        let p = make_phantom(&spec, &venous_tag(), 2).unwrap();
        assert!((organ_minus_background(&p) - 1.5).abs() < 1e-9);
        assert_ne!(
            p.volume,
            make_phantom(
                &PhantomSpec {
                    organlike_distractors: false,
                    ..spec
                },
                &venous_tag(),
                2
            )
            .unwrap()
            .volume
        );
    }

    #[test]
    fn phase_mismatch_is_rejected() {
        let spec = PhantomSpec::default();
        assert!(make_phantom(&spec, &oop_tag(), 0).is_err());
    }

    #[test]
    fn impossible_fraction_errors_after_retries() {
        let spec = PhantomSpec {
            organ_radius: [0.6, 0.7],
            ..PhantomSpec::default()
        };
        assert!(matches!(
            make_phantom(&spec, &venous_tag(), 0),
            Err(Error::PhantomFraction { attempts: 10, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn phase_sign_invariant(
            seed in 0u64..1000,
            gap in 0.2f64..3.0,
            bias in 0.0f64..0.9,
            suppression in 0.0f64..1.0,
            texture in 0.0f64..0.5,
            oop in any::<bool>(),
        ) {
            let phase = if oop { Phase::OutOfPhase } else { Phase::Venous };
            let spec = PhantomSpec {
                grid_shape: [20, 20, 10],
                phase,
                contrast_gap: gap,
                center_noise_sigma: 0.0,
                bias_field_strength: bias,
                boundary_suppression: suppression,
                texture_amplitude: texture,
                ..PhantomSpec::default()
            };
            let tag = if oop { oop_tag() } else { venous_tag() };
            let p = make_phantom(&spec, &tag, seed).unwrap();
            let d = organ_minus_background(&p);
            if oop { prop_assert!(d < 0.0) } else { prop_assert!(d > 0.0) }
            let frac = p.mask.count() as f64 / p.mask.data().len() as f64;
            prop_assert!((0.001..=0.1).contains(&frac));
        }
    }
}
