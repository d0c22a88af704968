//! Exact squared Euclidean distance transform with anisotropic spacing,
//! computed separably with the lower-envelope-of-parabolas method.

use ndarray::{Array3, Axis};

use crate::volume::Spacing;

const FAR: f64 = 1e20;

/// Squared distance (mm²) from every voxel to the nearest `true` voxel of
/// `features`. Voxels are `FAR` away when there are no features.
pub fn squared_edt(features: &Array3<bool>, spacing: Spacing) -> Array3<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { FAR });
    let n_max = d.shape().iter().copied().max().unwrap_or(0);
    let mut f = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut v = vec![0usize; n_max];
    let mut z = vec![0.0; n_max + 1];
    for axis in 0..3 {
        let w2 = spacing.0[axis] * spacing.0[axis];
        for mut lane in d.lanes_mut(Axis(axis)) {
            let n = lane.len();
            for (i, x) in lane.iter().enumerate() {
                f[i] = *x;
            }
            envelope(&f[..n], w2, &mut out[..n], &mut v, &mut z);
            for (i, x) in lane.iter_mut().enumerate() {
                *x = out[i];
            }
        }
    }
    d
}

fn envelope(f: &[f64], w2: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let sep = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf))
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = sep(q, v[k]);
        while s <= z[k] {
            if k == 0 {
                break;
            }
            k -= 1;
            s = sep(q, v[k]);
        }
        if s <= z[k] {
            // k == 0 and the new parabola dominates everywhere
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w2 * d * d + f[v[k]];
    }
}
