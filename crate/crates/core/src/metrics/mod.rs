//! Segmentation metrics: overlap (Dice, Jaccard, precision, recall) and
//! surface distances (HD95, ASSD) in millimetres, plus mean ± std summaries.
//!
//! Conventions, recorded in every report via [`CONVENTIONS`]:
//! - both masks empty: overlap metrics are 1 (`both_empty`);
//! - empty prediction: Dice = Jaccard = recall = 0, precision = 1
//!   (`empty_pred`), and symmetrically for an empty ground truth;
//! - surfaces are foreground voxels with a 6-neighbor in the background,
//!   voxels outside the grid counting as background;
//! - HD95 is the linearly interpolated 95th percentile and ASSD the mean of
//!   the concatenated directed distances pred→gt and gt→pred;
//! - if either mask is empty both surface metrics take the grid's physical
//!   diagonal as a sentinel;
//! - std is the population std (divisor n).

mod edt;

pub use edt::squared_edt;

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::volume::{mean_std, SegMask, Spacing};

pub const CONVENTIONS: &str = "hd95=linear-interpolated 95th percentile of concatenated directed \
surface distances (pred->gt U gt->pred), assd=mean of the same set, surfaces=6-connected border \
voxels with out-of-grid as background; empty pred or gt -> hd95=assd=grid diagonal (mm) sentinel; \
both empty -> overlap metrics 1; std=population (divisor n)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    EmptyPred,
    EmptyGt,
    BothEmpty,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::EmptyPred => "empty_pred",
            Flag::EmptyGt => "empty_gt",
            Flag::BothEmpty => "both_empty",
        }
    }
}

fn emptiness(pred_n: usize, gt_n: usize) -> Option<Flag> {
    match (pred_n == 0, gt_n == 0) {
        (true, true) => Some(Flag::BothEmpty),
        (true, false) => Some(Flag::EmptyPred),
        (false, true) => Some(Flag::EmptyGt),
        (false, false) => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
}

fn check_shapes(pred: &SegMask, gt: &SegMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn overlap_metrics(pred: &SegMask, gt: &SegMask) -> Result<(Overlap, Option<Flag>)> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data().iter()) {
        match (*p == 1, *g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let flag = emptiness(tp + fp, tp + fne);
    let o = match flag {
        Some(Flag::BothEmpty) => Overlap {
            dice: 1.0,
            jaccard: 1.0,
            precision: 1.0,
            recall: 1.0,
        },
        Some(Flag::EmptyPred) => Overlap {
            dice: 0.0,
            jaccard: 0.0,
            precision: 1.0,
            recall: 0.0,
        },
        Some(Flag::EmptyGt) => Overlap {
            dice: 0.0,
            jaccard: 0.0,
            precision: 0.0,
            recall: 1.0,
        },
        None => {
            let (tp, fp, fne) = (tp as f64, fp as f64, fne as f64);
            Overlap {
                dice: 2.0 * tp / (2.0 * tp + fp + fne),
                jaccard: tp / (tp + fp + fne),
                precision: tp / (tp + fp),
                recall: tp / (tp + fne),
            }
        }
    };
    Ok((o, flag))
}

/// Border voxels: foreground with at least one 6-neighbor in the background
/// (outside the grid counts as background).
pub fn surface(mask: &Array3<u8>) -> Array3<bool> {
    let (nx, ny, nz) = mask.dim();
    let n = [nx as isize, ny as isize, nz as isize];
    Array3::from_shape_fn(mask.dim(), |(x, y, z)| {
        if mask[[x, y, z]] == 0 {
            return false;
        }
        let p = [x as isize, y as isize, z as isize];
        (0..3).any(|a| {
            [-1isize, 1].iter().any(|d| {
                let mut q = p;
                q[a] += d;
                q[a] < 0 || q[a] >= n[a] || mask[[q[0] as usize, q[1] as usize, q[2] as usize]] == 0
            })
        })
    })
}

fn directed(from: &Array3<bool>, to: &Array3<bool>, spacing: Spacing, out: &mut Vec<f64>) {
    let dt = squared_edt(to, spacing);
    out.extend(from.iter().zip(dt.iter()).filter(|(f, _)| **f).map(|(_, d)| d.sqrt()));
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95_mm: f64,
    pub assd_mm: f64,
}

/// Symmetric surface distances. Returns the sentinel (grid diagonal) and a
/// flag when either mask is empty.
pub fn surface_metrics(pred: &SegMask, gt: &SegMask, spacing: Spacing) -> Result<(SurfaceDistances, Option<Flag>)> {
    check_shapes(pred, gt)?;
    let flag = emptiness(pred.count(), gt.count());
    if flag.is_some() {
        let d = spacing.diagonal(gt.shape());
        return Ok((SurfaceDistances { hd95_mm: d, assd_mm: d }, flag));
    }
    let sp = surface(pred.data());
    let sg = surface(gt.data());
    let mut all = Vec::new();
    directed(&sp, &sg, spacing, &mut all);
    directed(&sg, &sp, spacing, &mut all);
    all.sort_by(f64::total_cmp);
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    Ok((
        SurfaceDistances {
            hd95_mm: percentile(&all, 95.0),
            assd_mm: assd,
        },
        None,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95_mm: f64,
    pub assd_mm: f64,
    pub flags: Vec<Flag>,
}

impl CaseMetrics {
    pub fn is_sentinel(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn flags_string(&self) -> String {
        self.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("|")
    }
}

/// Both metric families on one prediction; spacing is taken from `gt`.
pub fn evaluate_case(pred: &SegMask, gt: &SegMask) -> Result<CaseMetrics> {
    let (o, flag) = overlap_metrics(pred, gt)?;
    let (s, _) = surface_metrics(pred, gt, gt.spacing())?;
    Ok(CaseMetrics {
        dice: o.dice,
        jaccard: o.jaccard,
        precision: o.precision,
        recall: o.recall,
        hd95_mm: s.hd95_mm,
        assd_mm: s.assd_mm,
        flags: flag.into_iter().collect(),
    })
}

pub fn evaluate_cases(pairs: &[(SegMask, SegMask)], exec: ExecMode) -> Result<Vec<CaseMetrics>> {
    exec.try_map(pairs, |(p, g)| evaluate_case(p, g))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95_mm: f64,
    pub assd_mm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Drop sentinel surface values from the HD95/ASSD statistics.
    pub exclude_sentinels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n_cases: usize,
    pub mean: MetricValues,
    pub std: MetricValues,
    /// Cases carrying an emptiness flag.
    pub n_flagged: usize,
    pub exclude_sentinels: bool,
    /// Set when exclusion was requested but every case was a sentinel, so
    /// the surface statistics fell back to including them.
    pub surface_all_sentinel: bool,
    pub std_convention: String,
}

pub fn aggregate(cases: &[CaseMetrics], opts: AggregateOptions) -> Result<SummaryStats> {
    if cases.is_empty() {
        return Err(Error::Empty("aggregate needs at least one case".into()));
    }
    let ms = |f: fn(&CaseMetrics) -> f64| mean_std(cases.iter().map(f));
    let (dice, dice_s) = ms(|c| c.dice);
    let (jac, jac_s) = ms(|c| c.jaccard);
    let (prec, prec_s) = ms(|c| c.precision);
    let (rec, rec_s) = ms(|c| c.recall);
    let kept: Vec<&CaseMetrics> = cases
        .iter()
        .filter(|c| !(opts.exclude_sentinels && c.is_sentinel()))
        .collect();
    let surface_all_sentinel = kept.is_empty();
    let surf: Vec<&CaseMetrics> = if surface_all_sentinel {
        cases.iter().collect()
    } else {
        kept
    };
    let (hd, hd_s) = mean_std(surf.iter().map(|c| c.hd95_mm));
    let (assd, assd_s) = mean_std(surf.iter().map(|c| c.assd_mm));
    Ok(SummaryStats {
        n_cases: cases.len(),
        mean: MetricValues {
            dice,
            jaccard: jac,
            precision: prec,
            recall: rec,
            hd95_mm: hd,
            assd_mm: assd,
        },
        std: MetricValues {
            dice: dice_s,
            jaccard: jac_s,
            precision: prec_s,
            recall: rec_s,
            hd95_mm: hd_s,
            assd_mm: assd_s,
        },
        n_flagged: cases.iter().filter(|c| c.is_sentinel()).count(),
        exclude_sentinels: opts.exclude_sentinels,
        surface_all_sentinel: opts.exclude_sentinels && surface_all_sentinel,
        std_convention: "population".into(),
    })
}

/// One row of the per-case CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub center: String,
    pub phase: String,
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95_mm: f64,
    pub assd_mm: f64,
    pub flags: String,
}

pub const CASE_CSV_COLUMNS: [&str; 10] = [
    "case_id",
    "center",
    "phase",
    "dice",
    "jaccard",
    "precision",
    "recall",
    "hd95_mm",
    "assd_mm",
    "flags",
];

impl CaseRow {
    pub fn new(case_id: &str, center: &str, phase: &str, m: &CaseMetrics) -> Self {
        CaseRow {
            case_id: case_id.into(),
            center: center.into(),
            phase: phase.into(),
            dice: m.dice,
            jaccard: m.jaccard,
            precision: m.precision,
            recall: m.recall,
            hd95_mm: m.hd95_mm,
            assd_mm: m.assd_mm,
            flags: m.flags_string(),
        }
    }
}

pub fn write_case_csv(rows: &[CaseRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_case_csv(path: impl AsRef<Path>) -> Result<Vec<CaseRow>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(|e| Error::Serde(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(shape: (usize, usize, usize), on: &[[usize; 3]]) -> SegMask {
        let mut a = Array3::zeros(shape);
        for p in on {
            a[*p] = 1;
        }
        SegMask::new(a, Spacing::default(), "m").unwrap()
    }

    fn random_mask(rng: &mut crate::seed::Rng, shape: (usize, usize, usize), p: f64) -> SegMask {
        let a = Array3::from_shape_fn(shape, |_| u8::from(rng.random_bool(p)));
        SegMask::new(a, Spacing::default(), "r").unwrap()
    }

    /// All-pairs reference: surfaces from an explicit neighbor scan, distances
    /// from every surface voxel to every other-surface voxel.
    fn brute_surface(pred: &SegMask, gt: &SegMask, s: Spacing) -> (f64, f64) {
        let surf = |m: &SegMask| -> Vec<[usize; 3]> {
            let sh = m.shape();
            m.foreground()
                .into_iter()
                .filter(|p| {
                    let mut border = false;
                    for a in 0..3 {
                        if p[a] == 0 || p[a] + 1 == sh[a] {
                            border = true;
                            continue;
                        }
                        let mut lo = *p;
                        lo[a] -= 1;
                        let mut hi = *p;
                        hi[a] += 1;
                        border |= !m.get(lo) || !m.get(hi);
                    }
                    border
                })
                .collect()
        };
        let d = |a: &[usize; 3], b: &[usize; 3]| {
            (0..3)
                .map(|i| ((a[i] as f64 - b[i] as f64) * s.0[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (sp, sg) = (surf(pred), surf(gt));
        let mut all = Vec::new();
        for a in &sp {
            all.push(sg.iter().map(|b| d(a, b)).fold(f64::INFINITY, f64::min));
        }
        for b in &sg {
            all.push(sp.iter().map(|a| d(a, b)).fold(f64::INFINITY, f64::min));
        }
        all.sort_by(f64::total_cmp);
        let pos = 0.95 * (all.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let hd = all[lo] + (pos - lo as f64) * (all[hi] - all[lo]);
        (hd, all.iter().sum::<f64>() / all.len() as f64)
    }

    #[test]
    fn identical_masks() {
        let m = mask((4, 4, 4), &[[1, 1, 1], [1, 2, 1], [2, 2, 2]]);
        let c = evaluate_case(&m, &m).unwrap();
        assert_eq!((c.dice, c.jaccard, c.precision, c.recall), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((c.hd95_mm, c.assd_mm), (0.0, 0.0));
        assert!(c.flags.is_empty());
    }

    #[test]
    fn hand_counted_overlap() {
        let p = mask((3, 3, 3), &[[0, 0, 0], [0, 0, 1]]);
        let g = mask((3, 3, 3), &[[0, 0, 1], [0, 0, 2]]);
        let (o, _) = overlap_metrics(&p, &g).unwrap();
        assert!((o.dice - 0.5).abs() < 1e-15);
        assert!((o.jaccard - 1.0 / 3.0).abs() < 1e-15);
        assert!((o.precision - 0.5).abs() < 1e-15);
        assert!((o.recall - 0.5).abs() < 1e-15);
    }

    #[test]
    fn disjoint_and_empty_conventions() {
        let p = mask((3, 3, 3), &[[0, 0, 0]]);
        let g = mask((3, 3, 3), &[[2, 2, 2]]);
        let (o, f) = overlap_metrics(&p, &g).unwrap();
        assert_eq!((o.dice, o.jaccard, o.precision, o.recall), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(f, None);

        let e = mask((3, 3, 3), &[]);
        let (o, f) = overlap_metrics(&e, &e).unwrap();
        assert_eq!((o.dice, o.precision, f), (1.0, 1.0, Some(Flag::BothEmpty)));
        let (o, f) = overlap_metrics(&e, &g).unwrap();
        assert_eq!((o.dice, o.jaccard, o.recall, o.precision), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(f, Some(Flag::EmptyPred));
        let (o, f) = overlap_metrics(&g, &e).unwrap();
        assert_eq!((o.dice, o.precision, o.recall), (0.0, 0.0, 1.0));
        assert_eq!(f, Some(Flag::EmptyGt));

        let c = evaluate_case(&e, &g).unwrap();
        let diag = (27.0f64).sqrt();
        assert!((c.hd95_mm - diag).abs() < 1e-12 && (c.assd_mm - diag).abs() < 1e-12);
        assert_eq!(c.flags, vec![Flag::EmptyPred]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = mask((3, 3, 3), &[]);
        let b = mask((3, 3, 4), &[]);
        assert!(overlap_metrics(&a, &b).is_err());
        assert!(surface_metrics(&a, &b, Spacing::default()).is_err());
    }

    #[test]
    fn single_voxels_three_mm_apart() {
        let p = mask((6, 3, 3), &[[0, 1, 1]]);
        let g = mask((6, 3, 3), &[[2, 1, 1]]);
        let s = Spacing::new([1.5, 1.0, 1.0]).unwrap();
        let (d, _) = surface_metrics(&p, &g, s).unwrap();
        assert!((d.hd95_mm - 3.0).abs() < 1e-12);
        assert!((d.assd_mm - 3.0).abs() < 1e-12);
    }

    #[test]
    fn surface_matches_brute_force() {
        let mut rng = crate::seed::rng(99);
        for i in 0..200 {
            let shape = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let s = Spacing::new([
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
            ])
            .unwrap();
            let p = random_mask(&mut rng, shape, 0.3);
            let g = random_mask(&mut rng, shape, 0.3);
            if p.is_empty() || g.is_empty() {
                continue;
            }
            let (d, _) = surface_metrics(&p, &g, s).unwrap();
            let (hd, assd) = brute_surface(&p, &g, s);
            assert!((d.hd95_mm - hd).abs() < 1e-6, "case {i}");
            assert!((d.assd_mm - assd).abs() < 1e-6, "case {i}");
        }
    }

    #[test]
    fn aggregate_arithmetic() {
        let base = CaseMetrics {
            dice: 0.4,
            jaccard: 0.25,
            precision: 0.5,
            recall: 0.5,
            hd95_mm: 3.0,
            assd_mm: 1.0,
            flags: vec![],
        };
        let one = aggregate(std::slice::from_ref(&base), AggregateOptions::default()).unwrap();
        assert_eq!(one.mean.dice, 0.4);
        assert_eq!(one.std.dice, 0.0);
        let other = CaseMetrics {
            dice: 0.6,
            ..base.clone()
        };
        let two = aggregate(&[base.clone(), other], AggregateOptions::default()).unwrap();
        assert!((two.mean.dice - 0.5).abs() < 1e-12);
        assert!((two.std.dice - 0.1).abs() < 1e-12);
        assert!(aggregate(&[], AggregateOptions::default()).is_err());

        let sentinel = CaseMetrics {
            hd95_mm: 100.0,
            flags: vec![Flag::EmptyPred],
            ..base.clone()
        };
        let incl = aggregate(&[base.clone(), sentinel.clone()], AggregateOptions::default()).unwrap();
        assert!((incl.mean.hd95_mm - 51.5).abs() < 1e-12);
        let excl = aggregate(
            &[base, sentinel],
            AggregateOptions {
                exclude_sentinels: true,
            },
        )
        .unwrap();
        assert!((excl.mean.hd95_mm - 3.0).abs() < 1e-12);
        assert_eq!(excl.n_cases, 2);
    }

    #[test]
    fn aggregate_matches_two_pass_recomputation() {
        let mut rng = crate::seed::rng(50);
        let cases: Vec<CaseMetrics> = (0..50)
            .map(|_| CaseMetrics {
                dice: rng.random(),
                jaccard: rng.random(),
                precision: rng.random(),
                recall: rng.random(),
                hd95_mm: rng.random_range(0.0..40.0),
                assd_mm: rng.random_range(0.0..10.0),
                flags: vec![],
            })
            .collect();
        let s = aggregate(&cases, AggregateOptions::default()).unwrap();
        // E[x^2] - E[x]^2 form, independent of the two-pass mean_std
        let n = cases.len() as f64;
        let sum: f64 = cases.iter().map(|c| c.hd95_mm).sum();
        let sq: f64 = cases.iter().map(|c| c.hd95_mm * c.hd95_mm).sum();
        let mean = sum / n;
        let std = (sq / n - mean * mean).sqrt();
        assert!((s.mean.hd95_mm - mean).abs() < 1e-9);
        assert!((s.std.hd95_mm - std).abs() < 1e-9);
        assert_eq!(s.n_cases, 50);
    }

    #[test]
    fn csv_round_trip_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cases.csv");
        let m = evaluate_case(&mask((3, 3, 3), &[]), &mask((3, 3, 3), &[[1, 1, 1]])).unwrap();
        let rows = vec![CaseRow::new("c1", "TGT_D", "out_of_phase", &m)];
        write_case_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), CASE_CSV_COLUMNS.join(","));
        assert_eq!(read_case_csv(&p).unwrap(), rows);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn dice_jaccard_identity_symmetry_and_scaling(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = crate::seed::rng(seed);
            let shape = (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(2..7));
            let p = random_mask(&mut rng, shape, 0.4);
            let g = random_mask(&mut rng, shape, 0.4);
            let (o, _) = overlap_metrics(&p, &g).unwrap();
            prop_assert!(o.jaccard <= o.dice + 1e-15);
            prop_assert!((o.dice - 2.0 * o.jaccard / (1.0 + o.jaccard)).abs() < 1e-9);
            let s = Spacing::new([1.0, 1.5, 2.5]).unwrap();
            let (a, _) = surface_metrics(&p, &g, s).unwrap();
            let (b, _) = surface_metrics(&g, &p, s).unwrap();
            prop_assert_eq!(a, b);
            if !p.is_empty() && !g.is_empty() {
                let (scaled, _) = surface_metrics(&p, &g, s.scaled(c).unwrap()).unwrap();
                prop_assert!((scaled.hd95_mm - c * a.hd95_mm).abs() <= 1e-9 * (1.0 + c * a.hd95_mm));
                prop_assert!((scaled.assd_mm - c * a.assd_mm).abs() <= 1e-9 * (1.0 + c * a.assd_mm));
            }
        }
    }
}
