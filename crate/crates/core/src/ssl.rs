//! Semi-supervised pretraining: a supervised branch on labeled patches, an
//! EMA teacher that pseudo-labels unlabeled patches from a sampled
//! foreground point, and a graph-segmentation regularizer.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Modality, PoolCase};
use crate::error::{Error, Result};
use crate::graphseg::{fh_segment, region_of_point, Connectivity, FhParams, LabelVolume};
use crate::model::{
    dice_ce, dice_loss, ema_update, encode_prompts, sigmoid, Adam, AdamConfig, Checkpoint, CheckpointKind, Model,
    PromptPolicy, PromptSet, Provenance, Sample,
};
use crate::seed;
use crate::train::{prompted_sample, LossGuard};
use crate::volume::{sample_patch, Volume};

/// How foreground points are picked on unlabeled patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForegroundSampler {
    /// Uniform over every graph region except the largest.
    Fh,
    /// Uniform over voxels at or above an intensity quantile.
    Intensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FhSettings {
    /// `k = k_scale · std(patch)`.
    pub k_scale: f64,
    pub min_size: usize,
    pub connectivity: Connectivity,
    pub smoothing_sigma: f64,
}

impl Default for FhSettings {
    fn default() -> Self {
        FhSettings {
            k_scale: 2.0,
            min_size: 8,
            connectivity: Connectivity::Six,
            smoothing_sigma: 0.5,
        }
    }
}

impl FhSettings {
    pub fn params_for(&self, v: &Volume) -> Result<FhParams> {
        FhParams::scaled_to(v, self.k_scale, self.min_size, self.connectivity, self.smoothing_sigma)
    }
}

/// Strong intensity augmentation for the student view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongAug {
    pub scale: [f64; 2],
    pub gamma: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for StrongAug {
    fn default() -> Self {
        StrongAug {
            scale: [0.9, 1.1],
            gamma: [0.8, 1.2],
            noise_sigma: 0.05,
        }
    }
}

impl StrongAug {
    pub fn identity() -> Self {
        StrongAug {
            scale: [1.0, 1.0],
            gamma: [1.0, 1.0],
            noise_sigma: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ok(self.scale) || !ok(self.gamma) || !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad augmentation {self:?}")));
        }
        Ok(())
    }

    /// Gamma on min-max normalized intensities (mapped back to the original
    /// range), then a global scale, then additive Gaussian noise.
    pub fn apply<R: Rng>(&self, x: &Array3<f64>, rng: &mut R) -> Array3<f64> {
        let draw = |r: [f64; 2], rng: &mut R| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..=r[1])
            }
        };
        let gamma = draw(self.gamma, rng);
        let scale = draw(self.scale, rng);
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mut out = if gamma != 1.0 && hi > lo {
            x.mapv(|v| lo + (hi - lo) * ((v - lo) / (hi - lo)).powf(gamma))
        } else {
            x.clone()
        };
        if scale != 1.0 {
            out.mapv_inplace(|v| v * scale);
        }
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            out.mapv_inplace(|v| v + n.sample(rng));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub epochs: usize,
    /// Steps per epoch; one per unlabeled case when unset.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub momentum_ema: f64,
    pub lambda_consistency: f64,
    pub lambda_graph: f64,
    pub pseudo_threshold: f64,
    pub sampler: ForegroundSampler,
    /// Quantile used by the intensity sampler.
    pub intensity_quantile: f64,
    pub fh: FhSettings,
    pub augment: StrongAug,
    /// Foreground-centered probability for labeled patches.
    pub foreground_bias: f64,
    /// Probability of dropping each prompt kind on labeled patches.
    pub prompt_dropout: f64,
    pub category: Option<usize>,
    /// Keep a copy of the student weights after every step.
    pub record_students: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            epochs: 10,
            steps_per_epoch: None,
            lr: 1e-3,
            momentum_ema: 0.99,
            lambda_consistency: 1.0,
            lambda_graph: 0.1,
            pseudo_threshold: 0.5,
            sampler: ForegroundSampler::Fh,
            intensity_quantile: 0.75,
            fh: FhSettings::default(),
            augment: StrongAug::default(),
            foreground_bias: 0.67,
            prompt_dropout: 0.0,
            category: Some(0),
            record_students: false,
        }
    }
}

impl SslConfig {
    /// Settings at the original scale (10 epochs, learning rate 1e-5).
    pub fn paper() -> Self {
        SslConfig {
            lr: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("ssl lr must be > 0, got {}", self.lr));
        }
        if !(self.lambda_consistency >= 0.0 && self.lambda_graph >= 0.0) {
            return bad("ssl loss weights must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum_ema) {
            return bad(format!("ema momentum {} outside [0, 1)", self.momentum_ema));
        }
        if !(0.0..1.0).contains(&self.pseudo_threshold) || self.pseudo_threshold <= 0.0 {
            return bad(format!("pseudo_threshold {} outside (0, 1)", self.pseudo_threshold));
        }
        if !(0.0..=1.0).contains(&self.intensity_quantile)
            || !(0.0..=1.0).contains(&self.foreground_bias)
            || !(0.0..=1.0).contains(&self.prompt_dropout)
        {
            return bad("ssl probabilities must lie in [0, 1]".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be >= 1".into());
        }
        self.augment.validate()
    }
}

fn uniform_pick<R: Rng>(v: &Volume, rng: &mut R, keep: impl Fn([usize; 3]) -> bool) -> Option<[usize; 3]> {
    let [nx, ny, nz] = v.shape();
    let coords: Vec<[usize; 3]> = (0..nx)
        .flat_map(|x| (0..ny).flat_map(move |y| (0..nz).map(move |z| [x, y, z])))
        .filter(|&c| keep(c))
        .collect();
    (!coords.is_empty()).then(|| coords[rng.random_range(0..coords.len())])
}

fn lower_quantile(v: &Volume, q: f64) -> f64 {
    let mut vals: Vec<f64> = v.data().iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    let i = ((vals.len() - 1) as f64 * q).floor() as usize;
    vals[i]
}

/// Draws a point outside the largest graph region (taken as background),
/// uniformly over the remaining voxels. With a single region the point is
/// uniform over voxels at or above the median intensity.
pub fn sample_foreground_point(v: &Volume, lv: &LabelVolume, seed: u64) -> Result<[usize; 3]> {
    if lv.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            left: lv.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let mut rng = seed::rng(seed);
    let sizes = lv.region_sizes();
    if sizes.len() > 1 {
        let largest = (0..sizes.len())
            .max_by_key(|&r| (sizes[r], std::cmp::Reverse(r)))
            .expect("non-empty") as u32;
        let labels = lv.labels();
        if let Some(p) = uniform_pick(v, &mut rng, |[x, y, z]| labels[[x, y, z]] != largest) {
            return Ok(p);
        }
    }
    Ok(sample_intensity_point(v, 0.5, &mut rng))
}

/// Uniform over voxels whose intensity is at or above the lower
/// `q`-quantile.
pub fn sample_intensity_point<R: Rng>(v: &Volume, q: f64, rng: &mut R) -> [usize; 3] {
    let t = lower_quantile(v, q);
    let data = v.data();
    uniform_pick(v, rng, |[x, y, z]| data[[x, y, z]] >= t).expect("the quantile voxel itself qualifies")
}

/// Dice of `student` logits against the thresholded `teacher` logits.
/// `None` when the pseudo-label is empty.
pub fn consistency_loss(
    student: &Array3<f64>,
    teacher: &Array3<f64>,
    threshold: f64,
    weight: f64,
    dz: Option<&mut Array3<f64>>,
) -> Option<f64> {
    let pseudo = teacher.mapv(|z| f64::from(u8::from(sigmoid(z) > threshold)));
    (pseudo.sum() > 0.0).then(|| dice_loss(student, &pseudo, weight, dz))
}

/// One labeled and one unlabeled patch.
#[derive(Clone, Debug)]
pub struct SslBatch<'a> {
    pub labeled_image: &'a Volume,
    pub labeled_mask: &'a crate::volume::SegMask,
    pub unlabeled_image: &'a Volume,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_sup: f64,
    /// Zero when skipped.
    pub l_cons: f64,
    pub l_graph: f64,
    pub l_total: f64,
    pub cons_skipped: bool,
    pub point: [usize; 3],
}

/// One optimizer step on the student followed by the teacher EMA update.
pub fn ssl_step(
    student: &mut Model,
    teacher: &mut Model,
    opt: &mut Adam,
    batch: &SslBatch<'_>,
    cfg: &SslConfig,
    seed: u64,
) -> Result<StepLosses> {
    let mut rng = seed::rng(seed);
    let (lab, target) = prompted_sample(
        batch.labeled_image,
        batch.labeled_mask,
        PromptPolicy::PointsAndBox,
        cfg.prompt_dropout,
        cfg.category,
        &mut rng,
    )?;

    let u = batch.unlabeled_image;
    let lv = fh_segment(u, &cfg.fh.params_for(u)?)?;
    let point = match cfg.sampler {
        ForegroundSampler::Fh => sample_foreground_point(u, &lv, seed::derive_label(seed, "fg_point"))?,
        ForegroundSampler::Intensity => sample_intensity_point(
            u,
            cfg.intensity_quantile,
            &mut seed::rng(seed::derive_label(seed, "fg_point")),
        ),
    };
    let prompt = PromptSet {
        points: vec![point],
        boxes: vec![],
        category_id: cfg.category,
    };
    let ch = encode_prompts(&prompt, u.shape(), u.spacing())?;
    let weak = Sample::new(u.data().clone(), ch.clone(), cfg.category);
    let strong = Sample::new(cfg.augment.apply(u.data(), &mut rng), ch, cfg.category);
    let graph_target = region_of_point(&lv, point.map(|c| c as i64))?.data().mapv(f64::from);

    let teacher_logits = teacher.forward(&weak)?;
    let (logits, cache) = student.forward_batch(&[lab, strong], None, true)?;
    let cache = cache.expect("kept");

    let mut d_lab = Array3::zeros(logits[0].raw_dim());
    let mut d_un = Array3::zeros(logits[1].raw_dim());
    let l_sup = dice_ce(&logits[0], &target, 1.0, Some(&mut d_lab));
    let l_cons = consistency_loss(
        &logits[1],
        &teacher_logits,
        cfg.pseudo_threshold,
        cfg.lambda_consistency,
        Some(&mut d_un),
    );
    let l_graph = dice_loss(&logits[1], &graph_target, cfg.lambda_graph, Some(&mut d_un));
    let l_total = l_sup + cfg.lambda_consistency * l_cons.unwrap_or(0.0) + cfg.lambda_graph * l_graph;

    let mut grads = student.zero_grads();
    student.backward(&cache, &[d_lab, d_un], &mut grads)?;
    opt.step(student, &grads);
    ema_update(teacher, student, cfg.momentum_ema)?;
    Ok(StepLosses {
        l_sup,
        l_cons: l_cons.unwrap_or(0.0),
        l_graph,
        l_total,
        cons_skipped: l_cons.is_none(),
        point,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub modality: Modality,
    pub labeled_case: String,
    pub unlabeled_case: String,
    #[serde(rename = "L_sup")]
    pub l_sup: f64,
    #[serde(rename = "L_cons")]
    pub l_cons: f64,
    #[serde(rename = "L_graph")]
    pub l_graph: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub cons_skipped: bool,
}

pub const LOSS_CSV_COLUMNS: [&str; 10] = [
    "step",
    "epoch",
    "modality",
    "labeled_case",
    "unlabeled_case",
    "L_sup",
    "L_cons",
    "L_graph",
    "L_total",
    "cons_skipped",
];

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    if log.is_empty() {
        w.write_record(LOSS_CSV_COLUMNS)?;
    }
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub struct PretrainRun {
    /// The teacher, which is the deliverable.
    pub checkpoint: Checkpoint,
    pub student: Model,
    pub log: Vec<StepRecord>,
    /// Student weights after each step, when recorded.
    pub students: Vec<Vec<f64>>,
}

impl PretrainRun {
    /// Labeled draws per modality in one epoch.
    pub fn modality_counts(&self, epoch: usize) -> (usize, usize) {
        self.log
            .iter()
            .filter(|r| r.epoch == epoch)
            .fold((0, 0), |(a, b), r| match r.modality {
                Modality::A => (a + 1, b),
                Modality::B => (a, b + 1),
            })
    }
}

/// Runs `cfg.epochs` passes over a shuffled unlabeled pool, alternating the
/// labeled modality every step. The teacher starts as a copy of `init`.
pub fn pretrain(
    init: Model,
    labeled: &[PoolCase],
    unlabeled: &[PoolCase],
    cfg: &SslConfig,
    seed: u64,
) -> Result<PretrainRun> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled pretraining pool".into()));
    }
    let mut by_modality: Vec<(Modality, Vec<&PoolCase>)> = Vec::new();
    for m in [Modality::A, Modality::B] {
        let cases: Vec<&PoolCase> = labeled.iter().filter(|c| c.modality == m).collect();
        if cases.iter().any(|c| c.mask.is_none()) {
            return Err(Error::InvalidConfig(format!(
                "labeled pool case without mask in modality {m:?}"
            )));
        }
        if !cases.is_empty() {
            by_modality.push((m, cases));
        }
    }
    if by_modality.is_empty() {
        return Err(Error::Empty("labeled pretraining pool".into()));
    }

    let patch = init.config().patch_size;
    let mut student = init;
    let mut teacher = student.clone();
    let mut opt = Adam::new(&student, AdamConfig::with_lr(cfg.lr));
    let mut order_rng = seed::rng(seed::derive_label(seed, "ssl_order"));
    let mut guard = LossGuard::new(seed);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(unlabeled.len());
    let mut cursors = vec![0usize; by_modality.len()];
    let mut queues: Vec<Vec<usize>> = by_modality.iter().map(|(_, c)| (0..c.len()).collect()).collect();
    for q in &mut queues {
        q.shuffle(&mut order_rng);
    }

    let mut log = Vec::new();
    let mut students = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..unlabeled.len()).collect();
        perm.shuffle(&mut order_rng);
        for j in 0..steps_per_epoch {
            let m = step % by_modality.len();
            if cursors[m] == queues[m].len() {
                queues[m].shuffle(&mut order_rng);
                cursors[m] = 0;
            }
            let (modality, cases) = &by_modality[m];
            let lab = cases[queues[m][cursors[m]]];
            cursors[m] += 1;
            let un = &unlabeled[perm[j % perm.len()]];

            let step_seed = seed::derive(seed, step as u64);
            let lp = sample_patch(
                &lab.volume,
                lab.mask.as_ref(),
                patch,
                cfg.foreground_bias,
                seed::derive_label(step_seed, "labeled_patch"),
            )?;
            let up = sample_patch(
                &un.volume,
                None,
                patch,
                0.0,
                seed::derive_label(step_seed, "unlabeled_patch"),
            )?;
            let batch = SslBatch {
                labeled_image: &lp.image,
                labeled_mask: lp.mask.as_ref().expect("labeled"),
                unlabeled_image: &up.image,
            };
            let losses = ssl_step(&mut student, &mut teacher, &mut opt, &batch, cfg, step_seed)?;
            guard.check(step, losses.l_total, &[&lab.id, &un.id])?;
            if cfg.record_students {
                students.push(student.flat_params());
            }
            log.push(StepRecord {
                step,
                epoch,
                modality: *modality,
                labeled_case: lab.id.clone(),
                unlabeled_case: un.id.clone(),
                l_sup: losses.l_sup,
                l_cons: losses.l_cons,
                l_graph: losses.l_graph,
                l_total: losses.l_total,
                cons_skipped: losses.cons_skipped,
            });
            step += 1;
        }
    }
    let prov = Provenance {
        kind: CheckpointKind::Pretrained,
        seed,
        epoch: cfg.epochs,
        step,
        notes: vec![("role".into(), "ema_teacher".into())],
    };
    Ok(PretrainRun {
        checkpoint: Checkpoint::new(&teacher, prov, Some(&order_rng)),
        student,
        log,
        students,
    })
}
