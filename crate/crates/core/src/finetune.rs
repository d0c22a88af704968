//! Supervised fine-tuning, the ERM and MixStyle baselines, and per-domain
//! evaluation with oracle prompts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::metrics::{aggregate, evaluate_case, AggregateOptions, CaseMetrics, SummaryStats, CONVENTIONS};
use crate::model::{
    dice_ce, oracle_prompts, predict_mask, Adam, AdamConfig, Checkpoint, CheckpointKind, MixPlan, Model, ModelConfig,
    PromptPolicy, PromptSet, Provenance,
};
use crate::seed;
use crate::split::{verify_isolation, Assignment, SplitManifest};
use crate::train::{prompted_sample, LossGuard};
use crate::volume::{sample_patch, DomainRole, Phase, SegMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepUnit {
    Steps,
    Epochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    PretrainedCheckpoint,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Training length, counted in `unit`.
    pub length: usize,
    pub unit: StepUnit,
    /// Optimizer steps per epoch; `ceil(|train| / batch_size)` when unset.
    pub iters_per_epoch: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub prompt_policy: PromptPolicy,
    /// Probability of dropping each prompt kind per training sample.
    pub prompt_dropout: f64,
    /// Train only the last k blocks; all blocks when unset.
    pub trainable_blocks_k: Option<usize>,
    pub init: InitKind,
    /// Validate every this many steps (and always at the end).
    pub val_every: Option<usize>,
    pub foreground_bias: f64,
    pub category: Option<usize>,
    /// Epoch counts at which the current weights are kept.
    pub snapshot_epochs: Vec<usize>,
    pub mixstyle_p: f64,
    pub mixstyle_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            length: 100,
            unit: StepUnit::Steps,
            iters_per_epoch: None,
            lr: 1e-3,
            batch_size: 2,
            prompt_policy: PromptPolicy::Box,
            prompt_dropout: 0.0,
            trainable_blocks_k: None,
            init: InitKind::PretrainedCheckpoint,
            val_every: Some(25),
            foreground_bias: 0.67,
            category: Some(0),
            snapshot_epochs: vec![],
            mixstyle_p: 0.5,
            mixstyle_alpha: 0.1,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning at the original scale: 100 steps at learning rate 1e-4.
    pub fn paper_finetune() -> Self {
        TrainConfig {
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.length < 1 {
            return bad("training length must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size < 1 || self.iters_per_epoch == Some(0) || self.val_every == Some(0) {
            return bad("batch_size, iters_per_epoch and val_every must be >= 1".into());
        }
        for p in [self.prompt_dropout, self.foreground_bias, self.mixstyle_p] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if !(self.mixstyle_alpha > 0.0) {
            return bad("mixstyle_alpha must be > 0".into());
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self, n_train: usize) -> usize {
        self.iters_per_epoch
            .unwrap_or_else(|| n_train.div_ceil(self.batch_size).max(1))
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        match self.unit {
            StepUnit::Steps => self.length,
            StepUnit::Epochs => self.length * self.iters_per_epoch(n_train),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    Erm,
    Mixstyle,
}

impl BaselineVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineVariant::Erm => "erm",
            BaselineVariant::Mixstyle => "mixstyle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub dice: f64,
}

pub struct TrainRun {
    /// Weights with the best source validation Dice.
    pub checkpoint: Checkpoint,
    pub final_model: Model,
    pub val_log: Vec<ValPoint>,
    pub best: ValPoint,
    pub losses: Vec<f64>,
    /// Every case id read during training and validation.
    pub touched: BTreeSet<String>,
    /// `(epoch, weights)` for each requested snapshot epoch.
    pub snapshots: Vec<(usize, Checkpoint)>,
    /// Batches where MixStyle was due but could not mix (batch of one).
    pub mixstyle_skipped: usize,
    pub manifest_hash: String,
}

/// Errors when any touched case belongs to a target domain.
pub fn audit_touched(touched: &BTreeSet<String>, manifest: &SplitManifest) -> Result<()> {
    let targets = manifest.target_ids();
    let leaked: Vec<&str> = touched
        .iter()
        .map(String::as_str)
        .filter(|id| targets.contains(id))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Isolation(format!(
            "target cases touched during training: {leaked:?}"
        )))
    }
}

struct Mixing {
    p: f64,
    beta: Beta<f64>,
    rng: seed::Rng,
}

struct Job<'a> {
    corpus: &'a Corpus,
    manifest: &'a SplitManifest,
    cfg: &'a TrainConfig,
    seed: u64,
    kind: CheckpointKind,
    notes: Vec<(String, String)>,
    exec: ExecMode,
}

fn mean_val_dice(model: &Model, corpus: &Corpus, ids: &[&str], cfg: &TrainConfig, exec: ExecMode) -> Result<f64> {
    let dice = exec.try_map(ids, |id| -> Result<f64> {
        let case = corpus.get(id)?;
        let p = oracle_prompts(&case.mask, cfg.prompt_policy, cfg.category);
        let pred = predict_mask(model, &case.volume, &p, 0.5, ExecMode::Sequential)?;
        Ok(evaluate_case(&pred, &case.mask)?.dice)
    })?;
    Ok(dice.iter().sum::<f64>() / dice.len() as f64)
}

fn run(mut model: Model, job: Job<'_>, mut mixing: Option<Mixing>) -> Result<TrainRun> {
    let Job {
        corpus,
        manifest,
        cfg,
        seed,
        kind,
        mut notes,
        exec,
    } = job;
    cfg.validate()?;
    let report = verify_isolation(manifest);
    if !report.passed {
        return Err(Error::Isolation(report.to_string()));
    }
    let train: Vec<&str> = manifest.ids(Assignment::Train);
    let val: Vec<&str> = manifest.ids(Assignment::Val);
    if train.is_empty() {
        return Err(Error::Empty("no training cases in manifest".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("no validation cases in manifest".into()));
    }
    // validation must stay on source data
    for id in &val {
        let e = manifest.get(id).expect("listed");
        if e.domain_role != DomainRole::Source {
            return Err(Error::Isolation(format!(
                "validation case {id} is not from a source domain"
            )));
        }
    }
    if let Some(k) = cfg.trainable_blocks_k {
        model.set_trainable_blocks(k)?;
    }
    let manifest_hash = manifest.hash();
    notes.push(("manifest_sha256".into(), manifest_hash.clone()));
    notes.push(("prompt_policy".into(), cfg.prompt_policy.as_str().into()));

    let patch = model.config().patch_size;
    let total = cfg.total_steps(train.len());
    let ipe = cfg.iters_per_epoch(train.len());
    let mut opt = Adam::new(&model, AdamConfig::with_lr(cfg.lr));
    let mut order_rng = seed::rng(seed::derive_label(seed, "train_order"));
    let mut guard = LossGuard::new(seed);
    let mut touched: BTreeSet<String> = BTreeSet::new();
    let mut queue: Vec<&str> = Vec::new();
    let mut losses = Vec::with_capacity(total);
    let mut val_log = Vec::new();
    let mut best: Option<(ValPoint, Model)> = None;
    let mut snapshots = Vec::new();
    let mut mixstyle_skipped = 0;
    let prov = |step: usize| Provenance {
        kind,
        seed,
        epoch: step / ipe,
        step,
        notes: notes.clone(),
    };

    let take_snapshots = |step: usize, model: &Model, snapshots: &mut Vec<(usize, Checkpoint)>| {
        for &e in &cfg.snapshot_epochs {
            if e * ipe == step {
                snapshots.push((e, Checkpoint::new(model, prov(step), None)));
            }
        }
    };
    take_snapshots(0, &model, &mut snapshots);

    for step in 0..total {
        let step_seed = seed::derive(seed, step as u64);
        let mut sample_rng = seed::rng(seed::derive_label(step_seed, "samples"));
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            if queue.is_empty() {
                queue = train.clone();
                queue.shuffle(&mut order_rng);
                queue.reverse();
            }
            let id = queue.pop().expect("refilled");
            let case = corpus.get(id)?;
            touched.insert(id.to_string());
            let ps = sample_patch(
                &case.volume,
                Some(&case.mask),
                patch,
                cfg.foreground_bias,
                seed::derive(step_seed, b as u64),
            )?;
            let (s, t) = prompted_sample(
                &ps.image,
                ps.mask.as_ref().expect("mask given"),
                cfg.prompt_policy,
                cfg.prompt_dropout,
                cfg.category,
                &mut sample_rng,
            )?;
            batch.push(s);
            targets.push(t);
            ids.push(id);
        }

        let mut plan = None;
        if let Some(m) = mixing.as_mut() {
            if m.rng.random_bool(m.p) {
                if batch.len() < 2 {
                    mixstyle_skipped += 1;
                } else {
                    let mut perm: Vec<usize> = (0..batch.len()).collect();
                    perm.shuffle(&mut m.rng);
                    let lambda = (0..batch.len()).map(|_| m.beta.sample(&mut m.rng)).collect();
                    plan = Some(MixPlan { perm, lambda });
                }
            }
        }

        let (logits, cache) = model.forward_batch(&batch, plan.as_ref(), true)?;
        let w = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut dl = Vec::with_capacity(batch.len());
        for (z, t) in logits.iter().zip(&targets) {
            let mut dz = Array3::zeros(z.raw_dim());
            loss += w * dice_ce(z, t, w, Some(&mut dz));
            dl.push(dz);
        }
        guard.check(step, loss, &ids)?;
        let mut grads = model.zero_grads();
        model.backward(&cache.expect("kept"), &dl, &mut grads)?;
        opt.step(&mut model, &grads);
        losses.push(loss);

        let done = step + 1;
        take_snapshots(done, &model, &mut snapshots);
        if done == total || cfg.val_every.is_some_and(|v| done % v == 0) {
            touched.extend(val.iter().map(|s| s.to_string()));
            let point = ValPoint {
                step: done,
                dice: mean_val_dice(&model, corpus, &val, cfg, exec)?,
            };
            val_log.push(point);
            if best.as_ref().is_none_or(|(b, _)| point.dice > b.dice) {
                best = Some((point, model.clone()));
            }
        }
    }
    audit_touched(&touched, manifest)?;
    let (best, best_model) = best.expect("at least one validation");
    notes.push(("selected_step".into(), best.step.to_string()));
    notes.push(("selected_val_dice".into(), format!("{:.6}", best.dice)));
    let checkpoint = Checkpoint::new(
        &best_model,
        Provenance {
            kind,
            seed,
            epoch: best.step / ipe,
            step: best.step,
            notes,
        },
        Some(&order_rng),
    );
    Ok(TrainRun {
        checkpoint,
        final_model: model,
        val_log,
        best,
        losses,
        touched,
        snapshots,
        mixstyle_skipped,
        manifest_hash,
    })
}

/// Supervised fine-tuning of `init` on the manifest's training split with
/// best-validation model selection.
pub fn finetune(
    init: Model,
    corpus: &Corpus,
    manifest: &SplitManifest,
    cfg: &TrainConfig,
    seed: u64,
    exec: ExecMode,
) -> Result<TrainRun> {
    let init_hash = crate::model::weights_hash(init.config(), init.blocks());
    let job = Job {
        corpus,
        manifest,
        cfg,
        seed,
        kind: CheckpointKind::Finetuned,
        notes: vec![
            ("init".into(), format!("{:?}", cfg.init).to_lowercase()),
            ("init_sha256".into(), init_hash),
        ],
        exec,
    };
    run(init, job, None)
}

/// Trains from a random initialization, plain or with MixStyle in the
/// first encoder levels.
pub fn train_baseline(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    manifest: &SplitManifest,
    variant: BaselineVariant,
    cfg: &TrainConfig,
    seed: u64,
    exec: ExecMode,
) -> Result<TrainRun> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone(), seed::derive_label(seed, "baseline_init"))?;
    let mixing = (variant == BaselineVariant::Mixstyle).then(|| Mixing {
        p: cfg.mixstyle_p,
        beta: Beta::new(cfg.mixstyle_alpha, cfg.mixstyle_alpha).expect("alpha > 0"),
        rng: seed::rng(seed::derive_label(seed, "mixstyle")),
    });
    let job = Job {
        corpus,
        manifest,
        cfg,
        seed,
        kind: CheckpointKind::Baseline,
        notes: vec![("variant".into(), variant.as_str().into())],
        exec,
    };
    run(model, job, mixing)
}

/// Anything that turns an image and prompts into a mask.
pub trait Segmenter: Sync {
    fn segment(&self, v: &Volume, prompts: &PromptSet) -> Result<SegMask>;
}

impl Segmenter for Model {
    fn segment(&self, v: &Volume, prompts: &PromptSet) -> Result<SegMask> {
        predict_mask(self, v, prompts, 0.5, ExecMode::Sequential)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    /// Test assignments to evaluate.
    pub assignments: Vec<Assignment>,
    pub policy: PromptPolicy,
    pub category: Option<usize>,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub aggregate: AggregateOptions,
}

impl EvalRequest {
    pub fn new(policy: PromptPolicy, seed: u64, checkpoint_hash: impl Into<String>) -> Self {
        EvalRequest {
            assignments: vec![Assignment::SourceTest, Assignment::TargetTest],
            policy,
            category: Some(0),
            seed,
            checkpoint_hash: checkpoint_hash.into(),
            aggregate: AggregateOptions::default(),
        }
    }
}

/// One per-case result with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case_id: String,
    pub center: String,
    pub phase: String,
    pub role: String,
    pub policy: String,
    pub seed: u64,
    pub manifest_sha256: String,
    pub checkpoint_sha256: String,
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95_mm: f64,
    pub assd_mm: f64,
    pub flags: String,
}

pub const EVAL_CSV_COLUMNS: [&str; 15] = [
    "case_id",
    "center",
    "phase",
    "role",
    "policy",
    "seed",
    "manifest_sha256",
    "checkpoint_sha256",
    "dice",
    "jaccard",
    "precision",
    "recall",
    "hd95_mm",
    "assd_mm",
    "flags",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub center: String,
    pub phase: Phase,
    pub role: DomainRole,
    pub summary: SummaryStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: PromptPolicy,
    pub seed: u64,
    pub manifest_sha256: String,
    pub checkpoint_sha256: String,
    pub conventions: String,
    pub groups: Vec<GroupSummary>,
    #[serde(skip)]
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn group(&self, center: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.center == center)
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}_cases.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        if self.rows.is_empty() {
            w.write_record(EVAL_CSV_COLUMNS)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}_summary.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))
    }
}

/// Evaluates every case of the requested test assignments with oracle
/// prompts and aggregates per (center, phase). A failed prediction is
/// scored as an empty mask and flagged.
pub fn evaluate_domain<S: Segmenter>(
    model: &S,
    corpus: &Corpus,
    manifest: &SplitManifest,
    req: &EvalRequest,
    exec: ExecMode,
) -> Result<EvalReport> {
    if let Some(a) = req.assignments.iter().find(|a| !a.is_test()) {
        return Err(Error::InvalidConfig(format!(
            "evaluation restricted to test assignments, got {a:?}"
        )));
    }
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| req.assignments.contains(&e.assignment))
        .collect();
    let manifest_hash = manifest.hash();
    let results = exec.try_map(&entries, |e| -> Result<(CaseMetrics, String)> {
        let case = corpus.get(&e.case_id)?;
        let prompts = oracle_prompts(&case.mask, req.policy, req.category);
        let (pred, err) = match model.segment(&case.volume, &prompts) {
            Ok(p) => (p, None),
            Err(err) => (
                SegMask::zeros(case.mask.shape(), case.mask.spacing(), &e.case_id),
                Some(err),
            ),
        };
        let m = evaluate_case(&pred, &case.mask)?;
        let mut flags = m.flags_string();
        if err.is_some() {
            flags = if flags.is_empty() {
                "predict_error".into()
            } else {
                format!("{flags}|predict_error")
            };
        }
        Ok((m, flags))
    })?;

    let mut rows = Vec::with_capacity(entries.len());
    let mut grouped: BTreeMap<(String, Phase), (DomainRole, Vec<CaseMetrics>)> = BTreeMap::new();
    for (e, (m, flags)) in entries.iter().zip(results) {
        rows.push(EvalRow {
            case_id: e.case_id.clone(),
            center: e.center.clone(),
            phase: e.phase.as_str().into(),
            role: e.domain_role.as_str().into(),
            policy: req.policy.as_str().into(),
            seed: req.seed,
            manifest_sha256: manifest_hash.clone(),
            checkpoint_sha256: req.checkpoint_hash.clone(),
            dice: m.dice,
            jaccard: m.jaccard,
            precision: m.precision,
            recall: m.recall,
            hd95_mm: m.hd95_mm,
            assd_mm: m.assd_mm,
            flags,
        });
        grouped
            .entry((e.center.clone(), e.phase))
            .or_insert_with(|| (e.domain_role, Vec::new()))
            .1
            .push(m);
    }
    let groups = grouped
        .into_iter()
        .map(|((center, phase), (role, cases))| {
            Ok(GroupSummary {
                center,
                phase,
                role,
                summary: aggregate(&cases, req.aggregate)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        policy: req.policy,
        seed: req.seed,
        manifest_sha256: manifest_hash,
        checkpoint_sha256: req.checkpoint_hash.clone(),
        conventions: CONVENTIONS.into(),
        groups,
        rows,
    })
}

pub fn read_eval_csv(path: impl AsRef<Path>) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
