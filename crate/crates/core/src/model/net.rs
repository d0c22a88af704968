//! The promptable 3D U-Net: parameters grouped in blocks, forward pass with
//! optional activation caching, and the matching backward pass.

use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, concat, leaky_relu, leaky_relu_backward, mixstyle, mixstyle_backward, split, sum_pool2, upsample2, Conv,
    ConvCache, Feat,
};
use crate::error::{Error, Result};
use crate::seed;

pub const IN_CHANNELS: usize = 3;
/// Encoder levels that MixStyle may act on.
pub const MIXSTYLE_LEVELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub n_categories: usize,
    pub patch_size: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 3,
            base_channels: 8,
            in_channels: IN_CHANNELS,
            n_categories: 4,
            patch_size: [16, 16, 16],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 || self.base_channels == 0 || self.n_categories == 0 {
            return bad("depth, base_channels and n_categories must be >= 1".into());
        }
        if self.in_channels != IN_CHANNELS {
            return bad(format!("in_channels is fixed at {IN_CHANNELS}"));
        }
        let f = 1usize << self.depth;
        if self.patch_size.iter().any(|p| *p == 0 || p % f != 0) {
            return bad(format!(
                "patch_size {:?} must be divisible by 2^depth = {f}",
                self.patch_size
            ));
        }
        Ok(())
    }

    /// Feature width at encoder level `l` (1-based); level `depth + 1` is the
    /// bottleneck.
    pub fn width(&self, l: usize) -> usize {
        self.base_channels << (l - 1)
    }

    pub fn n_blocks(&self) -> usize {
        2 * self.depth + 2
    }

    pub fn block_names(&self) -> Vec<String> {
        let d = self.depth;
        let mut v: Vec<String> = (1..=d).map(|l| format!("encoder_{l}")).collect();
        v.push("bottleneck".into());
        v.extend((1..=d).rev().map(|l| format!("decoder_{l}")));
        v.push("head".into());
        v
    }

    fn enc_convs(&self, l: usize) -> (Conv, Conv) {
        let cin = if l == 1 { self.in_channels } else { self.width(l - 1) };
        let c = self.width(l);
        (Conv { cin, cout: c, k: 3 }, Conv { cin: c, cout: c, k: 3 })
    }

    fn bottleneck_convs(&self) -> (Conv, Conv) {
        let (cin, c) = (self.width(self.depth), self.width(self.depth + 1));
        (Conv { cin, cout: c, k: 3 }, Conv { cin: c, cout: c, k: 3 })
    }

    fn dec_convs(&self, l: usize) -> (Conv, Conv) {
        let c = self.width(l);
        let up = self.width(l + 1);
        (
            Conv {
                cin: up + c,
                cout: c,
                k: 3,
            },
            Conv { cin: c, cout: c, k: 3 },
        )
    }

    fn head_conv(&self) -> Conv {
        Conv {
            cin: self.width(1),
            cout: 1,
            k: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub params: Vec<Param>,
}

impl Block {
    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Gradients laid out like the model's blocks.
pub type Grads = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<Block>,
    trainable_from: usize,
}

fn conv_params<R: rand::Rng>(prefix: &str, conv: Conv, rng: &mut R) -> [Param; 2] {
    let std = (2.0 / conv.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    [
        Param {
            name: format!("{prefix}.weight"),
            shape: vec![conv.cout, conv.cin, conv.k, conv.k, conv.k],
            data: (0..conv.weight_len()).map(|_| normal.sample(rng)).collect(),
        },
        Param {
            name: format!("{prefix}.bias"),
            shape: vec![conv.cout],
            data: vec![0.0; conv.cout],
        },
    ]
}

/// One sample: its three input channels and an optional category.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Array3<f64>,
    pub point: Array3<f64>,
    pub boxes: Array3<f64>,
    pub category: Option<usize>,
}

/// MixStyle draw for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub perm: Vec<usize>,
    pub lambda: Vec<f64>,
}

struct DoubleCache {
    c1: ConvCache,
    y1: Feat,
    c2: ConvCache,
    y2: Feat,
}

/// Activations retained for the backward pass.
pub struct Cache {
    enc: Vec<(DoubleCache, Option<Vec<f64>>)>,
    bottleneck: DoubleCache,
    dec: Vec<DoubleCache>,
    head: ConvCache,
    categories: Vec<Option<usize>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive_label(seed, "model_init"));
        let names = config.block_names();
        let d = config.depth;
        let mut blocks = Vec::with_capacity(config.n_blocks());
        for l in 1..=d {
            let (a, b) = config.enc_convs(l);
            let mut params = conv_params("conv1", a, &mut rng).to_vec();
            params.extend(conv_params("conv2", b, &mut rng));
            blocks.push(Block {
                name: names[l - 1].clone(),
                params,
            });
        }
        let (a, b) = config.bottleneck_convs();
        let mut params = conv_params("conv1", a, &mut rng).to_vec();
        let emb_std = Normal::new(0.0, 0.5).expect("finite");
        params.push(Param {
            name: "category_embedding".into(),
            shape: vec![config.n_categories, a.cout],
            data: (0..config.n_categories * a.cout)
                .map(|_| emb_std.sample(&mut rng))
                .collect(),
        });
        params.extend(conv_params("conv2", b, &mut rng));
        blocks.push(Block {
            name: "bottleneck".into(),
            params,
        });
        for l in (1..=d).rev() {
            let (a, b) = config.dec_convs(l);
            let mut params = conv_params("conv1", a, &mut rng).to_vec();
            params.extend(conv_params("conv2", b, &mut rng));
            blocks.push(Block {
                name: format!("decoder_{l}"),
                params,
            });
        }
        blocks.push(Block {
            name: "head".into(),
            params: conv_params("conv", config.head_conv(), &mut rng).to_vec(),
        });
        Ok(Model {
            config,
            blocks,
            trainable_from: 0,
        })
    }

    /// Rebuilds a model from stored blocks, checking names and shapes.
    pub fn from_blocks(config: ModelConfig, blocks: Vec<Block>, trainable_from: usize) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        if !reference.same_architecture(&blocks) {
            return Err(Error::Architecture(
                "stored blocks do not match the configured architecture".into(),
            ));
        }
        if trainable_from >= config.n_blocks() {
            return Err(Error::BlockRange {
                k: config.n_blocks() - trainable_from,
                total: config.n_blocks(),
            });
        }
        Ok(Model {
            config,
            blocks,
            trainable_from,
        })
    }

    fn same_architecture(&self, other: &[Block]) -> bool {
        self.blocks.len() == other.len()
            && self.blocks.iter().zip(other).all(|(a, b)| {
                a.name == b.name
                    && a.params.len() == b.params.len()
                    && a.params
                        .iter()
                        .zip(&b.params)
                        .all(|(p, q)| p.name == q.name && p.shape == q.shape && p.data.len() == q.data.len())
            })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(Block::n_params).sum()
    }

    pub fn trainable_from(&self) -> usize {
        self.trainable_from
    }

    pub fn n_trainable_blocks(&self) -> usize {
        self.blocks.len() - self.trainable_from
    }

    pub fn is_trainable(&self, block: usize) -> bool {
        block >= self.trainable_from
    }

    /// Makes exactly the last `k` blocks trainable; returns the number of
    /// trainable parameters.
    pub fn set_trainable_blocks(&mut self, k: usize) -> Result<usize> {
        let total = self.blocks.len();
        if k == 0 || k > total {
            return Err(Error::BlockRange { k, total });
        }
        self.trainable_from = total - k;
        Ok(self.n_trainable_params())
    }

    pub fn n_trainable_params(&self) -> usize {
        self.blocks[self.trainable_from..].iter().map(Block::n_params).sum()
    }

    /// All parameters in block order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.params.iter().flat_map(|p| p.data.iter().copied()))
            .collect()
    }

    pub fn zero_grads(&self) -> Grads {
        self.blocks
            .iter()
            .map(|b| b.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
            .collect()
    }

    fn p(&self, block: usize, i: usize) -> &[f64] {
        &self.blocks[block].params[i].data
    }

    fn check_batch(&self, batch: &[Sample]) -> Result<[usize; 3]> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Empty("forward needs at least one sample".into()))?;
        let d = first.image.dim();
        let dims = [d.0, d.1, d.2];
        let f = 1usize << self.config.depth;
        if dims.iter().any(|v| *v == 0 || v % f != 0) {
            return Err(Error::ShapeMismatch {
                left: dims.to_vec(),
                right: self.config.patch_size.to_vec(),
            });
        }
        for s in batch {
            for a in [&s.image, &s.point, &s.boxes] {
                if a.dim() != d {
                    let e = a.dim();
                    return Err(Error::ShapeMismatch {
                        left: vec![e.0, e.1, e.2],
                        right: dims.to_vec(),
                    });
                }
            }
            if let Some(c) = s.category {
                if c >= self.config.n_categories {
                    return Err(Error::InvalidConfig(format!(
                        "category {c} outside embedding table of size {}",
                        self.config.n_categories
                    )));
                }
            }
        }
        Ok(dims)
    }

    fn stack(batch: &[Sample], dims: [usize; 3]) -> Feat {
        let mut x = Feat::zeros(batch.len(), IN_CHANNELS, dims);
        for (i, s) in batch.iter().enumerate() {
            for (c, a) in [&s.image, &s.point, &s.boxes].into_iter().enumerate() {
                let dst = x.channel_mut(i, c);
                for (d, v) in dst.iter_mut().zip(a.iter()) {
                    *d = *v;
                }
            }
        }
        x
    }

    fn double(
        &self,
        block: usize,
        convs: (Conv, Conv),
        x: &Feat,
        categories: Option<&[Option<usize>]>,
        keep: bool,
    ) -> (Feat, Option<DoubleCache>) {
        let (a, b) = convs;
        let shift = usize::from(categories.is_some());
        let (mut y1, c1) = a.forward(self.p(block, 0), self.p(block, 1), x, keep);
        leaky_relu(&mut y1);
        let h1 = match categories {
            Some(cats) => self.add_embedding(&y1, cats),
            None => y1.clone(),
        };
        let (mut y2, c2) = b.forward(self.p(block, 2 + shift), self.p(block, 3 + shift), &h1, keep);
        leaky_relu(&mut y2);
        let cache = keep.then(|| DoubleCache {
            c1: c1.expect("kept"),
            y1,
            c2: c2.expect("kept"),
            y2: y2.clone(),
        });
        (y2, cache)
    }

    fn add_embedding(&self, y1: &Feat, categories: &[Option<usize>]) -> Feat {
        let mut h = y1.clone();
        let emb = self.p(self.config.depth, 2);
        for (i, cat) in categories.iter().enumerate() {
            if let Some(cat) = *cat {
                let row = &emb[cat * h.c..(cat + 1) * h.c];
                for (ch, e) in row.iter().enumerate() {
                    for v in h.channel_mut(i, ch) {
                        *v += e;
                    }
                }
            }
        }
        h
    }

    /// Forward pass over a batch. Returns per-sample logits and, when
    /// `keep`, the cache needed by [`Model::backward`].
    pub fn forward_batch(
        &self,
        batch: &[Sample],
        mix: Option<&MixPlan>,
        keep: bool,
    ) -> Result<(Vec<Array3<f64>>, Option<Cache>)> {
        let dims = self.check_batch(batch)?;
        let categories: Vec<Option<usize>> = batch.iter().map(|s| s.category).collect();
        let cfg = &self.config;
        let d = cfg.depth;
        let mut x = Self::stack(batch, dims);
        let mut skips = Vec::with_capacity(d);
        let mut enc_caches = Vec::new();
        for l in 1..=d {
            let (mut h, cc) = self.double(l - 1, cfg.enc_convs(l), &x, None, keep);
            let mut scale = None;
            if let Some(plan) = mix.filter(|_| l <= MIXSTYLE_LEVELS) {
                let (m, s) = mixstyle(&h, &plan.perm, &plan.lambda);
                h = m;
                scale = Some(s);
            }
            x = avg_pool2(&h);
            if let Some(cc) = cc {
                enc_caches.push((cc, scale));
            }
            skips.push(h);
        }
        let (mut y, bottleneck) = self.double(d, cfg.bottleneck_convs(), &x, Some(&categories), keep);
        let mut dec_caches = Vec::new();
        for l in (1..=d).rev() {
            let cat = concat(&upsample2(&y, 1.0), &skips[l - 1]);
            let (out, cc) = self.double(2 * d + 1 - l, cfg.dec_convs(l), &cat, None, keep);
            dec_caches.extend(cc);
            y = out;
        }
        let head = 2 * d + 1;
        let (logits, hc) = cfg.head_conv().forward(self.p(head, 0), self.p(head, 1), &y, keep);
        let out = (0..batch.len())
            .map(|i| Array3::from_shape_vec(dims, logits.sample(i).to_vec()).expect("shape"))
            .collect();
        let cache = keep.then(|| Cache {
            enc: enc_caches,
            bottleneck: bottleneck.expect("kept"),
            dec: dec_caches,
            head: hc.expect("cached"),
            categories,
        });
        Ok((out, cache))
    }

    pub fn forward(&self, sample: &Sample) -> Result<Array3<f64>> {
        let (mut out, _) = self.forward_batch(std::slice::from_ref(sample), None, false)?;
        Ok(out.remove(0))
    }

    fn double_backward(
        &self,
        block: usize,
        convs: (Conv, Conv),
        cache: &DoubleCache,
        mut dy: Feat,
        grads: &mut Grads,
        categories: Option<&[Option<usize>]>,
    ) -> Option<Feat> {
        let (a, b) = convs;
        let train = self.is_trainable(block);
        let need_dx = block > self.trainable_from;
        let shift = usize::from(categories.is_some());
        leaky_relu_backward(&cache.y2, &mut dy);
        let g = &mut grads[block];
        let mut dh1 = {
            let (lo, hi) = g.split_at_mut(3 + shift);
            let gp = train.then(|| (lo[2 + shift].as_mut_slice(), hi[0].as_mut_slice()));
            b.backward(self.p(block, 2 + shift), &cache.c2, &dy, gp, train || need_dx)
        }?;
        if let (Some(cats), true) = (categories, train) {
            let c = dh1.c;
            let ge = &mut g[2];
            for (i, cat) in cats.iter().enumerate() {
                if let Some(cat) = cat {
                    for ch in 0..c {
                        ge[cat * c + ch] += dh1.channel(i, ch).iter().sum::<f64>();
                    }
                }
            }
        }
        leaky_relu_backward(&cache.y1, &mut dh1);
        let (lo, hi) = g.split_at_mut(1);
        let gp = train.then(|| (lo[0].as_mut_slice(), hi[0].as_mut_slice()));
        a.backward(self.p(block, 0), &cache.c1, &dh1, gp, need_dx)
    }

    /// Accumulates gradients of the per-sample logit gradients `dlogits` into
    /// `grads`, for trainable blocks only. Propagation stops below the first
    /// trainable block.
    pub fn backward(&self, cache: &Cache, dlogits: &[Array3<f64>], grads: &mut Grads) -> Result<()> {
        let cfg = &self.config;
        let d = cfg.depth;
        let n = dlogits.len();
        if n != cache.categories.len() {
            return Err(Error::ShapeMismatch {
                left: vec![n],
                right: vec![cache.categories.len()],
            });
        }
        let sh = dlogits[0].dim();
        let dims = [sh.0, sh.1, sh.2];
        let mut dz = Feat::zeros(n, 1, dims);
        for (i, g) in dlogits.iter().enumerate() {
            for (a, b) in dz.sample_mut(i).iter_mut().zip(g.iter()) {
                *a = *b;
            }
        }
        let head = 2 * d + 1;
        let train = self.is_trainable(head);
        let need = head > self.trainable_from;
        let gp = {
            let (lo, hi) = grads[head].split_at_mut(1);
            train.then(|| (lo[0].as_mut_slice(), hi[0].as_mut_slice()))
        };
        let Some(mut dy) = cfg.head_conv().backward(self.p(head, 0), &cache.head, &dz, gp, need) else {
            return Ok(());
        };
        let mut dskips: Vec<Option<Feat>> = (0..d).map(|_| None).collect();
        for l in 1..=d {
            // decoder caches are stored deepest level first
            let Some(dcat) = self.double_backward(2 * d + 1 - l, cfg.dec_convs(l), &cache.dec[d - l], dy, grads, None)
            else {
                return Ok(());
            };
            let (dup, dskip) = split(&dcat, cfg.width(l + 1));
            dskips[l - 1] = Some(dskip);
            dy = sum_pool2(&dup);
        }
        let Some(mut dpool) = self.double_backward(
            d,
            cfg.bottleneck_convs(),
            &cache.bottleneck,
            dy,
            grads,
            Some(&cache.categories),
        ) else {
            return Ok(());
        };
        for l in (1..=d).rev() {
            let (dc, scale) = &cache.enc[l - 1];
            let mut dh = upsample2(&dpool, 1.0 / 8.0);
            dh.add_assign(dskips[l - 1].as_ref().expect("decoder ran"));
            if let Some(s) = scale {
                mixstyle_backward(&mut dh, s);
            }
            match self.double_backward(l - 1, cfg.enc_convs(l), dc, dh, grads, None) {
                Some(dx) => dpool = dx,
                None => return Ok(()),
            }
        }
        Ok(())
    }
}

/// Elementwise `teacher ← m·teacher + (1 − m)·student`.
pub fn ema_update(teacher: &mut Model, student: &Model, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!("EMA momentum {momentum} outside [0, 1)")));
    }
    if teacher.config != student.config || !teacher.same_architecture(&student.blocks) {
        return Err(Error::Architecture("teacher and student differ".into()));
    }
    for (tb, sb) in teacher.blocks.iter_mut().zip(&student.blocks) {
        for (tp, sp) in tb.params.iter_mut().zip(&sb.params) {
            for (t, s) in tp.data.iter_mut().zip(&sp.data) {
                *t = momentum * *t + (1.0 - momentum) * s;
            }
        }
    }
    Ok(())
}
