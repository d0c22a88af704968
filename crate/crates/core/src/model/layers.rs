//! Dense 5D feature maps (`n, c, x, y, z`) and the layer primitives of the
//! U-Net with explicit backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Feat {
    pub n: usize,
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(n: usize, c: usize, dims: [usize; 3]) -> Self {
        Feat {
            n,
            c,
            dims,
            data: vec![0.0; n * c * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.c * self.voxels();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.c * self.voxels();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn channel(&self, i: usize, ch: usize) -> &[f64] {
        let v = self.voxels();
        &self.sample(i)[ch * v..(ch + 1) * v]
    }

    pub fn channel_mut(&mut self, i: usize, ch: usize) -> &mut [f64] {
        let v = self.voxels();
        &mut self.sample_mut(i)[ch * v..(ch + 1) * v]
    }

    pub fn add_assign(&mut self, other: &Feat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<[Vec<f64>; 2]> = const { std::cell::RefCell::new([Vec::new(), Vec::new()]) };
}

/// Runs `f` with two reusable buffers of the given lengths (contents
/// unspecified).
fn with_scratch<R>(len_a: usize, len_b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let [a, b] = &mut *bufs;
        if a.len() < len_a {
            a.resize(len_a, 0.0);
        }
        if b.len() < len_b {
            b.resize(len_b, 0.0);
        }
        f(&mut a[..len_a], &mut b[..len_b])
    })
}

/// Column matrix for a 3×3×3 kernel with zero padding 1: rows are
/// `(cin, kx, ky, kz)`, columns are output voxels.
fn im2col(x: &[f64], cin: usize, dims: [usize; 3], k: usize, cs: &mut [f64]) {
    let [nx, ny, nz] = dims;
    let nv = nx * ny * nz;
    let r = (k / 2) as isize;
    let kk = k * k * k;
    cs.fill(0.0);
    for c in 0..cin {
        let xc = &x[c * nv..(c + 1) * nv];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = c * kk + (kx * k + ky) * k + kz;
                    let out = &mut cs[row * nv..(row + 1) * nv];
                    let (dx, dy, dz) = (kx as isize - r, ky as isize - r, kz as isize - r);
                    for x0 in 0..nx {
                        let xs = x0 as isize + dx;
                        if xs < 0 || xs >= nx as isize {
                            continue;
                        }
                        for y0 in 0..ny {
                            let ys = y0 as isize + dy;
                            if ys < 0 || ys >= ny as isize {
                                continue;
                            }
                            let z_lo = (-dz).max(0) as usize;
                            let z_hi = (nz as isize - dz).min(nz as isize).max(0) as usize;
                            if z_lo >= z_hi {
                                continue;
                            }
                            let o = (x0 * ny + y0) * nz;
                            let s = (xs as usize * ny + ys as usize) * nz;
                            let s_lo = (z_lo as isize + dz) as usize;
                            out[o + z_lo..o + z_hi].copy_from_slice(&xc[s + s_lo..s + s_lo + (z_hi - z_lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im(cs: &[f64], cin: usize, dims: [usize; 3], k: usize, dx: &mut [f64]) {
    let [nx, ny, nz] = dims;
    let nv = nx * ny * nz;
    let r = (k / 2) as isize;
    let kk = k * k * k;
    for c in 0..cin {
        let xc = &mut dx[c * nv..(c + 1) * nv];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = c * kk + (kx * k + ky) * k + kz;
                    let src = &cs[row * nv..(row + 1) * nv];
                    let (ddx, ddy, ddz) = (kx as isize - r, ky as isize - r, kz as isize - r);
                    for x0 in 0..nx {
                        let xs = x0 as isize + ddx;
                        if xs < 0 || xs >= nx as isize {
                            continue;
                        }
                        for y0 in 0..ny {
                            let ys = y0 as isize + ddy;
                            if ys < 0 || ys >= ny as isize {
                                continue;
                            }
                            let z_lo = (-ddz).max(0) as usize;
                            let z_hi = (nz as isize - ddz).min(nz as isize).max(0) as usize;
                            if z_lo >= z_hi {
                                continue;
                            }
                            let o = (x0 * ny + y0) * nz;
                            let s = (xs as usize * ny + ys as usize) * nz;
                            let s_lo = (z_lo as isize + ddz) as usize;
                            for (d, g) in xc[s + s_lo..s + s_lo + (z_hi - z_lo)]
                                .iter_mut()
                                .zip(&src[o + z_lo..o + z_hi])
                            {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A convolution's geometry; weights live in the owning block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

/// The convolution input; columns are rebuilt in the backward pass, which is
/// cheaper than keeping them.
pub struct ConvCache {
    input: Feat,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn forward(&self, w: &[f64], b: &[f64], x: &Feat, keep: bool) -> (Feat, Option<ConvCache>) {
        debug_assert_eq!(x.c, self.cin);
        let fan = self.fan_in();
        let wm = ArrayView2::from_shape((self.cout, fan), w).expect("weight shape");
        let mut y = Feat::zeros(x.n, self.cout, x.dims);
        let nv = x.voxels();
        with_scratch(if self.k == 1 { 0 } else { fan * nv }, 0, |col, _| {
            for i in 0..x.n {
                let ys = y.sample_mut(i);
                for (o, bias) in b.iter().enumerate() {
                    ys[o * nv..(o + 1) * nv].fill(*bias);
                }
                let mut ym = ArrayViewMut2::from_shape((self.cout, nv), ys).expect("out shape");
                let colv = if self.k == 1 {
                    ArrayView2::from_shape((fan, nv), x.sample(i))
                } else {
                    im2col(x.sample(i), self.cin, x.dims, self.k, col);
                    ArrayView2::from_shape((fan, nv), &*col)
                }
                .expect("col shape");
                general_mat_mul(1.0, &wm, &colv, 1.0, &mut ym);
            }
        });
        let cache = keep.then(|| ConvCache { input: x.clone() });
        (y, cache)
    }

    /// Accumulates parameter gradients when `grads` is given and returns the
    /// input gradient when `need_dx`.
    pub fn backward(
        &self,
        w: &[f64],
        cache: &ConvCache,
        dy: &Feat,
        grads: Option<(&mut [f64], &mut [f64])>,
        need_dx: bool,
    ) -> Option<Feat> {
        let nv = dy.voxels();
        let fan = self.fan_in();
        let x = &cache.input;
        let wm = ArrayView2::from_shape((self.cout, fan), w).expect("weight shape");
        let mut dx = need_dx.then(|| Feat::zeros(dy.n, self.cin, x.dims));
        let mut grads = grads;
        let im = if self.k == 1 { 0 } else { fan * nv };
        with_scratch(im, im, |col, dcol| {
            for i in 0..dy.n {
                let dym = ArrayView2::from_shape((self.cout, nv), dy.sample(i)).expect("dy");
                if let Some((gw, gb)) = grads.as_mut() {
                    let mut gwm = ArrayViewMut2::from_shape((self.cout, fan), &mut **gw).expect("grad shape");
                    let colv = if self.k == 1 {
                        ArrayView2::from_shape((fan, nv), x.sample(i))
                    } else {
                        im2col(x.sample(i), self.cin, x.dims, self.k, col);
                        ArrayView2::from_shape((fan, nv), &*col)
                    }
                    .expect("col shape");
                    general_mat_mul(1.0, &dym, &colv.t(), 1.0, &mut gwm);
                    for (o, g) in gb.iter_mut().enumerate() {
                        *g += dy.channel(i, o).iter().sum::<f64>();
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    if self.k == 1 {
                        let mut dxm = ArrayViewMut2::from_shape((fan, nv), dx.sample_mut(i)).expect("dx");
                        general_mat_mul(1.0, &wm.t(), &dym, 1.0, &mut dxm);
                    } else {
                        let mut dcm = ArrayViewMut2::from_shape((fan, nv), &mut *dcol).expect("dcol");
                        general_mat_mul(1.0, &wm.t(), &dym, 0.0, &mut dcm);
                        col2im(dcol, self.cin, x.dims, self.k, dx.sample_mut(i));
                    }
                }
            }
        });
        dx
    }
}

pub fn leaky_relu(x: &mut Feat) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Gradient through LeakyReLU given its output `y` (sign of `y` equals sign
/// of the input).
pub fn leaky_relu_backward(y: &Feat, dy: &mut Feat) {
    for (d, v) in dy.data.iter_mut().zip(&y.data) {
        if *v < 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
}

pub fn avg_pool2(x: &Feat) -> Feat {
    let [nx, ny, nz] = x.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let mut y = Feat::zeros(x.n, x.c, od);
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(i, c);
            let dst = y.channel_mut(i, c);
            for a in 0..od[0] {
                for b in 0..od[1] {
                    for d in 0..od[2] {
                        let mut s = 0.0;
                        for (ox, oy, oz) in OCT {
                            s += src[((2 * a + ox) * ny + 2 * b + oy) * nz + 2 * d + oz];
                        }
                        dst[(a * od[1] + b) * od[2] + d] = s / 8.0;
                    }
                }
            }
        }
    }
    y
}

const OCT: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

/// Nearest-neighbor ×2 upsampling; with `scale = 1/8` this is also the
/// adjoint of [`avg_pool2`].
pub fn upsample2(x: &Feat, scale: f64) -> Feat {
    let od = [x.dims[0] * 2, x.dims[1] * 2, x.dims[2] * 2];
    let mut y = Feat::zeros(x.n, x.c, od);
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(i, c);
            let dst = y.channel_mut(i, c);
            for a in 0..od[0] {
                for b in 0..od[1] {
                    for d in 0..od[2] {
                        dst[(a * od[1] + b) * od[2] + d] =
                            scale * src[((a / 2) * x.dims[1] + b / 2) * x.dims[2] + d / 2];
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`] with unit scale: sums each 2×2×2 cell.
pub fn sum_pool2(x: &Feat) -> Feat {
    let mut y = avg_pool2(x);
    for v in &mut y.data {
        *v *= 8.0;
    }
    y
}

pub fn concat(a: &Feat, b: &Feat) -> Feat {
    debug_assert_eq!((a.n, a.dims), (b.n, b.dims));
    let mut y = Feat::zeros(a.n, a.c + b.c, a.dims);
    for i in 0..a.n {
        let s = y.sample_mut(i);
        let la = a.sample(i).len();
        s[..la].copy_from_slice(a.sample(i));
        s[la..].copy_from_slice(b.sample(i));
    }
    y
}

pub fn split(x: &Feat, ca: usize) -> (Feat, Feat) {
    let mut a = Feat::zeros(x.n, ca, x.dims);
    let mut b = Feat::zeros(x.n, x.c - ca, x.dims);
    for i in 0..x.n {
        let s = x.sample(i);
        let la = ca * x.voxels();
        a.sample_mut(i).copy_from_slice(&s[..la]);
        b.sample_mut(i).copy_from_slice(&s[la..]);
    }
    (a, b)
}

pub const MIXSTYLE_EPS: f64 = 1e-6;

/// Per-sample, per-channel mean and std (population, `eps` inside the root).
pub fn channel_stats(x: &Feat) -> (Vec<f64>, Vec<f64>) {
    let mut mu = Vec::with_capacity(x.n * x.c);
    let mut sig = Vec::with_capacity(x.n * x.c);
    let nv = x.voxels() as f64;
    for i in 0..x.n {
        for c in 0..x.c {
            let ch = x.channel(i, c);
            let m = ch.iter().sum::<f64>() / nv;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nv;
            mu.push(m);
            sig.push((var + MIXSTYLE_EPS).sqrt());
        }
    }
    (mu, sig)
}

/// Style mixing with statistics treated as constants: returns the mixed map
/// and the per-(sample, channel) scale applied to gradients.
pub fn mixstyle(x: &Feat, perm: &[usize], lam: &[f64]) -> (Feat, Vec<f64>) {
    let (mu, sig) = channel_stats(x);
    let mut y = x.clone();
    let mut scale = vec![0.0; x.n * x.c];
    for i in 0..x.n {
        let j = perm[i];
        for c in 0..x.c {
            let (a, b) = (i * x.c + c, j * x.c + c);
            let m_mix = lam[i] * mu[a] + (1.0 - lam[i]) * mu[b];
            let s_mix = lam[i] * sig[a] + (1.0 - lam[i]) * sig[b];
            let k = s_mix / sig[a];
            scale[a] = k;
            for v in y.channel_mut(i, c) {
                *v = (*v - mu[a]) * k + m_mix;
            }
        }
    }
    (y, scale)
}

pub fn mixstyle_backward(dy: &mut Feat, scale: &[f64]) {
    for i in 0..dy.n {
        for c in 0..dy.c {
            let k = scale[i * dy.c + c];
            for v in dy.channel_mut(i, c) {
                *v *= k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_feat(rng: &mut crate::seed::Rng, n: usize, c: usize, dims: [usize; 3]) -> Feat {
        let mut f = Feat::zeros(n, c, dims);
        for v in &mut f.data {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    fn dot(a: &Feat, b: &Feat) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Direct-loop convolution used as the reference.
    fn naive_conv(conv: Conv, w: &[f64], b: &[f64], x: &Feat) -> Feat {
        let mut y = Feat::zeros(x.n, conv.cout, x.dims);
        let [nx, ny, nz] = x.dims;
        let k = conv.k as isize;
        let r = k / 2;
        for i in 0..x.n {
            for o in 0..conv.cout {
                for px in 0..nx as isize {
                    for py in 0..ny as isize {
                        for pz in 0..nz as isize {
                            let mut s = b[o];
                            for c in 0..conv.cin {
                                for a in 0..k {
                                    for bb in 0..k {
                                        for d in 0..k {
                                            let (qx, qy, qz) = (px + a - r, py + bb - r, pz + d - r);
                                            if qx < 0
                                                || qy < 0
                                                || qz < 0
                                                || qx >= nx as isize
                                                || qy >= ny as isize
                                                || qz >= nz as isize
                                            {
                                                continue;
                                            }
                                            let wi = ((o * conv.cin + c) * conv.k + a as usize) * conv.k * conv.k
                                                + bb as usize * conv.k
                                                + d as usize;
                                            s += w[wi]
                                                * x.channel(i, c)[(qx as usize * ny + qy as usize) * nz + qz as usize];
                                        }
                                    }
                                }
                            }
                            y.channel_mut(i, o)[(px as usize * ny + py as usize) * nz + pz as usize] = s;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = crate::seed::rng(1);
        for (k, dims) in [(3, [4, 3, 5]), (1, [2, 2, 2]), (3, [1, 1, 1])] {
            let conv = Conv { cin: 2, cout: 3, k };
            let w: Vec<f64> = (0..conv.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            let x = random_feat(&mut rng, 2, 2, dims);
            let (y, _) = conv.forward(&w, &b, &x, false);
            let want = naive_conv(conv, &w, &b, &x);
            for (a, e) in y.data.iter().zip(&want.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = crate::seed::rng(2);
        let conv = Conv { cin: 2, cout: 3, k: 3 };
        let w: Vec<f64> = (0..conv.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.0; 3];
        let x = random_feat(&mut rng, 1, 2, [3, 4, 2]);
        let dy = random_feat(&mut rng, 1, 3, [3, 4, 2]);
        let (y, cache) = conv.forward(&w, &b, &x, true);
        let dx = conv.backward(&w, &cache.unwrap(), &dy, None, true).unwrap();
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-10);
    }

    #[test]
    fn pooling_adjoints() {
        let mut rng = crate::seed::rng(3);
        let x = random_feat(&mut rng, 2, 2, [4, 2, 6]);
        let y = random_feat(&mut rng, 2, 2, [2, 1, 3]);
        let lhs = dot(&avg_pool2(&x), &y);
        let rhs = dot(&x, &upsample2(&y, 1.0 / 8.0));
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = dot(&upsample2(&y, 1.0), &x);
        let rhs = dot(&y, &sum_pool2(&x));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = crate::seed::rng(4);
        let a = random_feat(&mut rng, 2, 1, [2, 2, 2]);
        let b = random_feat(&mut rng, 2, 3, [2, 2, 2]);
        let (a2, b2) = split(&concat(&a, &b), 1);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn mixstyle_identity_and_shape() {
        let mut rng = crate::seed::rng(5);
        let one = random_feat(&mut rng, 1, 3, [2, 3, 2]);
        let mut twin = Feat::zeros(2, 3, [2, 3, 2]);
        twin.sample_mut(0).copy_from_slice(one.sample(0));
        twin.sample_mut(1).copy_from_slice(one.sample(0));
        let (y, scale) = mixstyle(&twin, &[1, 0], &[0.3, 0.8]);
        assert_eq!((y.n, y.c, y.dims), (twin.n, twin.c, twin.dims));
        for (a, b) in y.data.iter().zip(&twin.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(scale.iter().all(|s| (s - 1.0).abs() < 1e-12));

        let x = random_feat(&mut rng, 2, 3, [2, 2, 2]);
        let (y, _) = mixstyle(&x, &[1, 0], &[0.0, 1.0]);
        let (mu_x, sig_x) = channel_stats(&x);
        let (mu_y, sig_y) = channel_stats(&y);
        for c in 0..3 {
            assert!((mu_y[c] - mu_x[3 + c]).abs() < 1e-9);
            assert!((sig_y[c] - sig_x[3 + c]).abs() < 1e-6);
            assert!((mu_y[3 + c] - mu_x[3 + c]).abs() < 1e-9);
        }
    }

    #[test]
    fn mixstyle_backward_scales_by_mixed_over_own_std() {
        let mut rng = crate::seed::rng(6);
        let x = random_feat(&mut rng, 2, 2, [2, 3, 2]);
        let lam = [0.25, 0.6];
        let (_, scale) = mixstyle(&x, &[1, 0], &lam);
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64 + MIXSTYLE_EPS).sqrt()
        };
        for i in 0..2 {
            for c in 0..2 {
                let own = std(x.channel(i, c));
                let other = std(x.channel(1 - i, c));
                let want = (lam[i] * own + (1.0 - lam[i]) * other) / own;
                assert!((scale[i * 2 + c] - want).abs() < 1e-12);
            }
        }
        let mut dy = random_feat(&mut rng, 2, 2, [2, 3, 2]);
        let before = dy.clone();
        mixstyle_backward(&mut dy, &scale);
        for i in 0..2 {
            for c in 0..2 {
                for (a, b) in dy.channel(i, c).iter().zip(before.channel(i, c)) {
                    assert_eq!(*a, b * scale[i * 2 + c]);
                }
            }
        }
    }
}
