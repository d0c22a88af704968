//! 3D Felzenszwalb–Huttenlocher graph segmentation.
//!
//! Voxels are graph nodes; edges join 6- or 26-neighbors with weight
//! `|I(u) - I(v)|`. Edges are visited in non-decreasing weight (ties broken
//! by the voxel indices of the endpoints) and two components merge when the
//! edge weight does not exceed `min(Int(C) + k/|C|)` over both components,
//! where `Int(C)` is the largest edge of the component's spanning tree. A
//! final pass merges undersized components across their lightest boundary
//! edge.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{gaussian_smooth, SegMask, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbor offsets with a positive linear index, so each undirected
    /// edge is generated once.
    pub fn forward_offsets(self) -> Vec<[isize; 3]> {
        match self {
            Connectivity::Six => vec![[0, 0, 1], [0, 1, 0], [1, 0, 0]],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(13);
                for dx in -1..=1isize {
                    for dy in -1..=1isize {
                        for dz in -1..=1isize {
                            if (dx, dy, dz) > (0, 0, 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FhParams {
    /// Scale of the threshold `tau(C) = k / |C|`.
    pub k: f64,
    pub min_size: usize,
    pub connectivity: Connectivity,
    /// Gaussian pre-smoothing in voxels; 0 disables it.
    pub smoothing_sigma: f64,
}

impl FhParams {
    pub fn new(k: f64, min_size: usize, connectivity: Connectivity, smoothing_sigma: f64) -> Result<Self> {
        let p = FhParams {
            k,
            min_size,
            connectivity,
            smoothing_sigma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidConfig(format!("fh k must be > 0, got {}", self.k)));
        }
        if self.min_size < 1 {
            return Err(Error::InvalidConfig("fh min_size must be >= 1".into()));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::InvalidConfig("fh smoothing_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Defaults scaled to the volume: `k = k_scale * std(I)`.
    pub fn scaled_to(
        v: &Volume,
        k_scale: f64,
        min_size: usize,
        connectivity: Connectivity,
        smoothing_sigma: f64,
    ) -> Result<Self> {
        let (_, std) = v.mean_std();
        Self::new(
            (k_scale * std).max(f64::MIN_POSITIVE),
            min_size,
            connectivity,
            smoothing_sigma,
        )
    }
}

impl Default for FhParams {
    fn default() -> Self {
        FhParams {
            k: 50.0,
            min_size: 64,
            connectivity: Connectivity::Six,
            smoothing_sigma: 0.8,
        }
    }
}

/// Dense region labels in `[0, n_regions)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    labels: Array3<u32>,
    n_regions: usize,
    spacing: Spacing,
}

impl LabelVolume {
    /// Checks the partition invariant and relabels nothing.
    pub fn new(labels: Array3<u32>, spacing: Spacing) -> Result<Self> {
        let n_regions = labels.iter().map(|l| *l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; n_regions];
        for l in labels.iter() {
            seen[*l as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig("label values are not dense".into()));
        }
        Ok(LabelVolume {
            labels,
            n_regions,
            spacing,
        })
    }

    pub fn labels(&self) -> &Array3<u32> {
        &self.labels
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.labels.dim();
        [x, y, z]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_regions];
        for l in self.labels.iter() {
            sizes[*l as usize] += 1;
        }
        sizes
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f64) -> usize {
        let (big, small) = if (self.size[a], b) > (self.size[b], a) {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(w);
        big
    }
}

#[derive(Clone, Copy)]
struct Edge {
    w: f64,
    u: usize,
    v: usize,
}

fn build_edges(data: &Array3<f64>, connectivity: Connectivity) -> Vec<Edge> {
    let (nx, ny, nz) = data.dim();
    let flat = data.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    let offsets = connectivity.forward_offsets();
    let mut edges = Vec::with_capacity(flat.len() * offsets.len());
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let u = (x * ny + y) * nz + z;
                for o in &offsets {
                    let (qx, qy, qz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                        continue;
                    }
                    let v = (qx as usize * ny + qy as usize) * nz + qz as usize;
                    edges.push(Edge {
                        w: (flat[u] - flat[v]).abs(),
                        u: u.min(v),
                        v: u.max(v),
                    });
                }
            }
        }
    }
    edges.sort_by(|a, b| a.w.total_cmp(&b.w).then(a.u.cmp(&b.u)).then(a.v.cmp(&b.v)));
    edges
}

/// Segments a volume. Deterministic: identical inputs give identical labels.
pub fn fh_segment(v: &Volume, p: &FhParams) -> Result<LabelVolume> {
    p.validate()?;
    let smoothed;
    let data = if p.smoothing_sigma > 0.0 {
        smoothed = gaussian_smooth(v.data(), [p.smoothing_sigma; 3]);
        &smoothed
    } else {
        v.data()
    };
    let edges = build_edges(data, p.connectivity);
    let n = data.len();
    let mut ds = DisjointSet::new(n);

    for e in &edges {
        let a = ds.find(e.u);
        let b = ds.find(e.v);
        if a == b {
            continue;
        }
        let ta = ds.internal[a] + p.k / ds.size[a] as f64;
        let tb = ds.internal[b] + p.k / ds.size[b] as f64;
        if e.w <= ta.min(tb) {
            ds.union(a, b, e.w);
        }
    }
    if p.min_size > 1 {
        for e in &edges {
            let a = ds.find(e.u);
            let b = ds.find(e.v);
            if a != b && (ds.size[a] < p.min_size || ds.size[b] < p.min_size) {
                ds.union(a, b, e.w);
            }
        }
    }

    let mut dense = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let r = ds.find(i);
        if dense[r] == u32::MAX {
            dense[r] = next;
            next += 1;
        }
        labels.push(dense[r]);
    }
    let labels = Array3::from_shape_vec(data.dim(), labels).expect("shape preserved");
    Ok(LabelVolume {
        labels,
        n_regions: next as usize,
        spacing: v.spacing(),
    })
}

/// Binary mask of the region containing `point`.
pub fn region_of_point(lv: &LabelVolume, point: [i64; 3]) -> Result<SegMask> {
    let shape = lv.shape();
    if (0..3).any(|a| point[a] < 0 || point[a] as usize >= shape[a]) {
        return Err(Error::OutOfBounds { point, shape });
    }
    let target = lv.labels[[point[0] as usize, point[1] as usize, point[2] as usize]];
    SegMask::new(lv.labels.mapv(|l| u8::from(l == target)), lv.spacing, String::new())
}
