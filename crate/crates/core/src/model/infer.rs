//! Full-volume inference by Gaussian-blended sliding windows.

use ndarray::{s, Array3};

use super::loss::sigmoid;
use super::net::{Model, Sample};
use super::prompt::{encode_prompts, PromptSet};
use crate::error::Result;
use crate::exec::ExecMode;
use crate::volume::{SegMask, Volume};

/// Window starts along one axis: stride `p / 2`, last window flush with the end.
pub fn window_starts(n: usize, p: usize) -> Vec<usize> {
    if n <= p {
        return vec![0];
    }
    let step = (p / 2).max(1);
    let mut v: Vec<usize> = (0..=n - p).step_by(step).collect();
    if *v.last().expect("non-empty") != n - p {
        v.push(n - p);
    }
    v
}

/// Separable Gaussian importance map with σ = size / 8 per axis, peak 1.
pub fn gaussian_weights(size: [usize; 3]) -> Array3<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = n as f64 / 8.0;
        (0..n)
            .map(|i| {
                let d = (i as f64 - c) / sigma;
                (-0.5 * d * d).exp()
            })
            .collect()
    };
    let (a, b, c) = (axis(size[0]), axis(size[1]), axis(size[2]));
    let w = Array3::from_shape_fn((size[0], size[1], size[2]), |(x, y, z)| a[x] * b[y] * c[z]);
    let min_pos = w.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    w.mapv(|v| v.max(min_pos))
}

/// Blended foreground probabilities over the whole volume.
pub fn predict_probabilities(model: &Model, v: &Volume, p: &PromptSet, exec: ExecMode) -> Result<Array3<f64>> {
    let shape = v.shape();
    let patch = model.config().patch_size;
    let padded: [usize; 3] = [0, 1, 2].map(|a| shape[a].max(patch[a]));
    let prompts = encode_prompts(p, shape, v.spacing())?;
    let pad = |a: &Array3<f64>| -> Array3<f64> {
        if padded == shape {
            return a.clone();
        }
        let mut out = Array3::zeros(padded);
        out.slice_mut(s![..shape[0], ..shape[1], ..shape[2]]).assign(a);
        out
    };
    let (img, pt, bx) = (pad(v.data()), pad(&prompts.point), pad(&prompts.boxes));
    let mut origins = Vec::new();
    for x in window_starts(padded[0], patch[0]) {
        for y in window_starts(padded[1], patch[1]) {
            for z in window_starts(padded[2], patch[2]) {
                origins.push([x, y, z]);
            }
        }
    }
    let crop = |a: &Array3<f64>, o: [usize; 3]| {
        a.slice(s![o[0]..o[0] + patch[0], o[1]..o[1] + patch[1], o[2]..o[2] + patch[2]])
            .to_owned()
    };
    let probs = exec.try_map(&origins, |o| {
        let sample = Sample {
            image: crop(&img, *o),
            point: crop(&pt, *o),
            boxes: crop(&bx, *o),
            category: p.category_id,
        };
        model.forward(&sample).map(|z| z.mapv(sigmoid))
    })?;
    let w = gaussian_weights(patch);
    let mut num = Array3::<f64>::zeros(padded);
    let mut den = Array3::<f64>::zeros(padded);
    for (o, pr) in origins.iter().zip(&probs) {
        let sl = s![o[0]..o[0] + patch[0], o[1]..o[1] + patch[1], o[2]..o[2] + patch[2]];
        num.slice_mut(sl).zip_mut_with(&(pr * &w), |a, b| *a += b);
        den.slice_mut(sl).zip_mut_with(&w, |a, b| *a += b);
    }
    let out = num / den;
    Ok(out.slice(s![..shape[0], ..shape[1], ..shape[2]]).to_owned())
}

/// Thresholded prediction; a voxel is foreground iff its probability is
/// strictly above `threshold`.
pub fn predict_mask(model: &Model, v: &Volume, p: &PromptSet, threshold: f64, exec: ExecMode) -> Result<SegMask> {
    let prob = predict_probabilities(model, v, p, exec)?;
    let fg = prob.mapv(|q| q > threshold);
    Ok(SegMask::from_bools(&fg, v.spacing(), v.case_id()))
}
