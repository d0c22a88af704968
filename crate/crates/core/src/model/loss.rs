//! Soft Dice and binary cross-entropy on logits, with analytic gradients.

use ndarray::Array3;

pub const DICE_SMOOTH: f64 = 1.0;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `1 − (2Σpg + s) / (Σp + Σg + s)` with `p = σ(z)`; adds `weight · ∂L/∂z`
/// into `dz` when given.
pub fn dice_loss(z: &Array3<f64>, target: &Array3<f64>, weight: f64, dz: Option<&mut Array3<f64>>) -> f64 {
    let p = z.mapv(sigmoid);
    let inter: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
    let denom = p.sum() + target.sum() + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    if let Some(dz) = dz {
        let d2 = denom * denom;
        for ((g, pi), ti) in dz.iter_mut().zip(&p).zip(target) {
            let dl_dp = -(2.0 * ti * denom - num) / d2;
            *g += weight * dl_dp * pi * (1.0 - pi);
        }
    }
    1.0 - num / denom
}

/// Mean voxelwise binary cross-entropy on logits.
pub fn bce_loss(z: &Array3<f64>, target: &Array3<f64>, weight: f64, dz: Option<&mut Array3<f64>>) -> f64 {
    let n = z.len() as f64;
    let l: f64 = z
        .iter()
        .zip(target)
        .map(|(&zi, &ti)| zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;
    if let Some(dz) = dz {
        for ((g, zi), ti) in dz.iter_mut().zip(z).zip(target) {
            *g += weight * (sigmoid(*zi) - ti) / n;
        }
    }
    l
}

/// Dice + cross-entropy, the supervised objective.
pub fn dice_ce(z: &Array3<f64>, target: &Array3<f64>, weight: f64, mut dz: Option<&mut Array3<f64>>) -> f64 {
    dice_loss(z, target, weight, dz.as_deref_mut()) + bce_loss(z, target, weight, dz)
}
