//! Sweep orchestration: the train-size, epoch, block-depth and prompt
//! sweeps, resumable on-disk cells, trend helpers and report emission.
//!
//! A sweep is a grid of (axis value, seed) cells. Each cell writes its rows
//! and then a `done` marker holding the config fingerprint; a rerun with
//! the same config reads finished cells back instead of recomputing them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BlocksK, GlobalConfig};
use crate::corpus::{build_corpus, build_pools, Corpus};
use crate::error::{Error, Result};
use crate::finetune::{evaluate_domain, finetune, train_baseline, BaselineVariant, EvalReport, EvalRequest, EvalRow};
use crate::metrics::CONVENTIONS;
use crate::model::{Checkpoint, Model, PromptPolicy};
use crate::seed;
use crate::split::{split_source, subsample_train, verify_isolation, SplitManifest};
use crate::ssl::{pretrain, write_loss_csv};
use crate::volume::{mean_std, DomainRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainFraction,
    Epochs,
    BlocksK,
    PromptPolicy,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::TrainFraction => "train_fraction",
            SweepAxis::Epochs => "epochs",
            SweepAxis::BlocksK => "blocks_k",
            SweepAxis::PromptPolicy => "prompt_policy",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AxisValues {
    TrainFraction(Vec<f64>),
    Epochs(Vec<usize>),
    BlocksK(Vec<BlocksK>),
    PromptPolicy(Vec<PromptPolicy>),
}

impl AxisValues {
    pub fn axis(&self) -> SweepAxis {
        match self {
            AxisValues::TrainFraction(_) => SweepAxis::TrainFraction,
            AxisValues::Epochs(_) => SweepAxis::Epochs,
            AxisValues::BlocksK(_) => SweepAxis::BlocksK,
            AxisValues::PromptPolicy(_) => SweepAxis::PromptPolicy,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            AxisValues::TrainFraction(v) => v.iter().map(|f| fraction_label(*f)).collect(),
            AxisValues::Epochs(v) => v.iter().map(|e| e.to_string()).collect(),
            AxisValues::BlocksK(v) => v.iter().map(|k| k.to_string()).collect(),
            AxisValues::PromptPolicy(v) => v.iter().map(|p| p.as_str().to_string()).collect(),
        }
    }

    fn is_sorted(&self) -> bool {
        fn strictly<T: PartialOrd>(v: &[T]) -> bool {
            v.windows(2).all(|w| w[0] < w[1])
        }
        match self {
            AxisValues::TrainFraction(v) => strictly(v),
            AxisValues::Epochs(v) => strictly(v),
            AxisValues::BlocksK(v) => strictly(v),
            AxisValues::PromptPolicy(v) => strictly(v),
        }
    }

    fn len(&self) -> usize {
        self.labels().len()
    }
}

fn fraction_label(f: f64) -> String {
    format!("{f:.2}")
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub name: String,
    pub seeds: Vec<u64>,
    pub values: AxisValues,
    pub config: GlobalConfig,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    /// A plan over `values` using the config's seeds, writing under
    /// `out_dir/name`.
    pub fn new(name: &str, config: &GlobalConfig, values: AxisValues) -> Result<Self> {
        let plan = ExperimentPlan {
            name: name.to_string(),
            seeds: config.seeds.clone(),
            values,
            config: config.clone(),
            out_dir: config.out_dir.join(name),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn train_size(config: &GlobalConfig) -> Result<Self> {
        Self::new(
            "train_size",
            config,
            AxisValues::TrainFraction(config.sweeps.train_fractions.clone()),
        )
    }

    pub fn epochs(config: &GlobalConfig) -> Result<Self> {
        Self::new("epochs", config, AxisValues::Epochs(config.sweeps.epoch_grid.clone()))
    }

    pub fn blocks(config: &GlobalConfig) -> Result<Self> {
        Self::new("blocks", config, AxisValues::BlocksK(config.sweeps.blocks_k.clone()))
    }

    pub fn prompts(config: &GlobalConfig) -> Result<Self> {
        Self::new(
            "prompts",
            config,
            AxisValues::PromptPolicy(config.sweeps.prompt_policies.clone()),
        )
    }

    pub fn axis(&self) -> SweepAxis {
        self.values.axis()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment plan needs at least one seed".into()));
        }
        if self.values.len() == 0 {
            return Err(Error::InvalidConfig(format!("{}: axis values are empty", self.name)));
        }
        if !self.values.is_sorted() {
            return Err(Error::InvalidConfig(format!(
                "{}: axis values must be strictly increasing, got {:?}",
                self.name,
                self.values.labels()
            )));
        }
        self.config.validate()
    }
}

/// One (axis value, seed, group) summary. Groups are single centers
/// (`scope = center`) or all cases of a domain role (`scope = role`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub scope: String,
    pub group: String,
    pub phase: String,
    pub role: String,
    pub policy: String,
    pub n_cases: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Per-case Dice variance (population).
    pub dice_case_var: f64,
    pub jaccard_mean: f64,
    pub hd95_mean_mm: f64,
    pub hd95_std_mm: f64,
    pub assd_mean_mm: f64,
    pub n_flagged: usize,
    pub config_sha256: String,
    pub manifest_sha256: String,
    pub checkpoint_sha256: String,
    pub conventions: String,
}

pub const RESULT_CSV_COLUMNS: [&str; 22] = [
    "experiment",
    "axis",
    "value",
    "seed",
    "scope",
    "group",
    "phase",
    "role",
    "policy",
    "n_cases",
    "dice_mean",
    "dice_std",
    "dice_case_var",
    "jaccard_mean",
    "hd95_mean_mm",
    "hd95_std_mm",
    "assd_mean_mm",
    "n_flagged",
    "config_sha256",
    "manifest_sha256",
    "checkpoint_sha256",
    "conventions",
];

/// Dispersion of the mean Dice over bootstrap test subsets of one size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub experiment: String,
    pub value: String,
    pub seed: u64,
    pub group: String,
    pub n_available: usize,
    pub subset_size: usize,
    pub resamples: usize,
    pub mean_of_means: f64,
    /// Population std of the resampled mean Dice.
    pub dispersion: f64,
    pub dice_case_var: f64,
    pub config_sha256: String,
    pub manifest_sha256: String,
    pub checkpoint_sha256: String,
    pub conventions: String,
}

pub const BOOTSTRAP_CSV_COLUMNS: [&str; 14] = [
    "experiment",
    "value",
    "seed",
    "group",
    "n_available",
    "subset_size",
    "resamples",
    "mean_of_means",
    "dispersion",
    "dice_case_var",
    "config_sha256",
    "manifest_sha256",
    "checkpoint_sha256",
    "conventions",
];

/// Group name of the pooled bootstrap over every test case.
pub const ALL_TEST: &str = "all";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResults {
    pub experiment: String,
    pub axis: Option<SweepAxis>,
    pub rows: Vec<ResultRow>,
    pub bootstrap: Vec<BootstrapRow>,
    /// Cells read back from completion markers instead of recomputed.
    pub resumed: usize,
}

#[derive(Default)]
struct CellOutput {
    rows: Vec<ResultRow>,
    bootstrap: Vec<BootstrapRow>,
}

struct Ctx<'a> {
    plan: &'a ExperimentPlan,
    fingerprint: String,
}

impl Ctx<'_> {
    fn new(plan: &ExperimentPlan) -> Result<Ctx<'_>> {
        Ok(Ctx {
            plan,
            fingerprint: plan.config.fingerprint()?,
        })
    }

    fn rows(&self, value: &str, seed: u64, report: &EvalReport) -> Vec<ResultRow> {
        summarize(
            &self.plan.name,
            self.plan.axis(),
            value,
            seed,
            &self.fingerprint,
            report,
        )
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Serde(format!(
            "{}: columns {found:?} do not match the schema {header:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_cell(
    ctx: &Ctx<'_>,
    label: &str,
    seed: u64,
    compute: impl FnOnce(&Path) -> Result<CellOutput>,
) -> Result<(CellOutput, bool)> {
    let dir = ctx.plan.out_dir.join("cells").join(format!("{label}_seed{seed}"));
    let marker = dir.join("done");
    let rows_path = dir.join("rows.csv");
    let boot_path = dir.join("bootstrap.csv");
    if std::fs::read_to_string(&marker).is_ok_and(|m| m.trim() == ctx.fingerprint) {
        let rows = read_csv(&rows_path, &RESULT_CSV_COLUMNS)?;
        let bootstrap = if boot_path.exists() {
            read_csv(&boot_path, &BOOTSTRAP_CSV_COLUMNS)?
        } else {
            Vec::new()
        };
        return Ok((CellOutput { rows, bootstrap }, true));
    }
    create_dir(&dir)?;
    let _ = std::fs::remove_file(&marker);
    let out = compute(&dir)?;
    write_csv(&rows_path, &RESULT_CSV_COLUMNS, &out.rows)?;
    if !out.bootstrap.is_empty() {
        write_csv(&boot_path, &BOOTSTRAP_CSV_COLUMNS, &out.bootstrap)?;
    }
    write_atomic(&marker, ctx.fingerprint.as_bytes())?;
    Ok((out, false))
}

fn collect(plan: &ExperimentPlan, cells: Vec<(CellOutput, bool)>) -> SweepResults {
    let mut res = SweepResults {
        experiment: plan.name.clone(),
        axis: Some(plan.axis()),
        ..Default::default()
    };
    for (out, resumed) in cells {
        res.rows.extend(out.rows);
        res.bootstrap.extend(out.bootstrap);
        res.resumed += resumed as usize;
    }
    res
}

/// Name of the per-run log of every case id read during training.
pub const TOUCHED_LOG: &str = "touched.json";

fn log_touched(dir: &Path, run: &crate::finetune::TrainRun) -> Result<()> {
    let p = dir.join(TOUCHED_LOG);
    std::fs::write(&p, serde_json::to_string_pretty(&run.touched)?).map_err(|e| Error::io(&p, e))
}

/// The benchmark corpus and source split for one seed. The manifest is
/// audited before it is returned.
pub fn seed_data(cfg: &GlobalConfig, seed: u64) -> Result<(Corpus, SplitManifest)> {
    let corpus = build_corpus(&cfg.corpus, seed, cfg.exec)?;
    let manifest = split_source(&corpus.tagged(), seed)?;
    let report = verify_isolation(&manifest);
    if !report.passed {
        return Err(Error::Isolation(report.to_string()));
    }
    Ok((corpus, manifest))
}

fn role_phase(role: DomainRole, rows: &[&EvalRow]) -> String {
    rows.first()
        .map(|r| r.phase.clone())
        .unwrap_or_else(|| role.as_str().into())
}

/// Per-center and per-role summaries of one evaluation.
pub fn summarize(
    experiment: &str,
    axis: SweepAxis,
    value: &str,
    seed: u64,
    config_sha256: &str,
    report: &EvalReport,
) -> Vec<ResultRow> {
    let mut groups: BTreeMap<(String, String), Vec<&EvalRow>> = BTreeMap::new();
    for r in &report.rows {
        groups.entry(("center".into(), r.center.clone())).or_default().push(r);
        groups.entry(("role".into(), r.role.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((scope, group), rows)| {
            let (dice, dice_s) = mean_std(rows.iter().map(|r| r.dice));
            let (jac, _) = mean_std(rows.iter().map(|r| r.jaccard));
            let (hd, hd_s) = mean_std(rows.iter().map(|r| r.hd95_mm));
            let (assd, _) = mean_std(rows.iter().map(|r| r.assd_mm));
            let role = rows[0].role.clone();
            let role_enum = match role.as_str() {
                "target1" => DomainRole::Target1,
                "target2" => DomainRole::Target2,
                _ => DomainRole::Source,
            };
            ResultRow {
                experiment: experiment.into(),
                axis,
                value: value.into(),
                seed,
                phase: role_phase(role_enum, &rows),
                scope,
                group,
                role,
                policy: report.policy.as_str().into(),
                n_cases: rows.len(),
                dice_mean: dice,
                dice_std: dice_s,
                dice_case_var: dice_s * dice_s,
                jaccard_mean: jac,
                hd95_mean_mm: hd,
                hd95_std_mm: hd_s,
                assd_mean_mm: assd,
                n_flagged: rows.iter().filter(|r| !r.flags.is_empty()).count(),
                config_sha256: config_sha256.into(),
                manifest_sha256: report.manifest_sha256.clone(),
                checkpoint_sha256: report.checkpoint_sha256.clone(),
                conventions: CONVENTIONS.into(),
            }
        })
        .collect()
}

/// Population std of the mean of `size` cases drawn with replacement,
/// over `resamples` draws.
pub fn bootstrap_dispersion(dice: &[f64], size: usize, resamples: usize, seed: u64) -> (f64, f64) {
    let mut rng = seed::rng(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..size).map(|_| dice[rng.random_range(0..dice.len())]).sum::<f64>() / size as f64)
        .collect();
    mean_std(means.iter().copied())
}

fn bootstrap_rows(ctx: &Ctx<'_>, value: &str, seed: u64, report: &EvalReport) -> Vec<BootstrapRow> {
    let s = &ctx.plan.config.sweeps;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        groups.entry(r.role.clone()).or_default().push(r.dice);
        groups.entry(ALL_TEST.into()).or_default().push(r.dice);
    }
    let mut out = Vec::new();
    for (group, dice) in groups {
        let (_, sd) = mean_std(dice.iter().copied());
        for &size in &s.bootstrap_sizes {
            let key = seed::derive_label(seed::derive(seed, size as u64), &group);
            let (mean, dispersion) = bootstrap_dispersion(&dice, size, s.bootstrap_resamples, key);
            out.push(BootstrapRow {
                experiment: ctx.plan.name.clone(),
                value: value.into(),
                seed,
                group: group.clone(),
                n_available: dice.len(),
                subset_size: size,
                resamples: s.bootstrap_resamples,
                mean_of_means: mean,
                dispersion,
                dice_case_var: sd * sd,
                config_sha256: ctx.fingerprint.clone(),
                manifest_sha256: report.manifest_sha256.clone(),
                checkpoint_sha256: report.checkpoint_sha256.clone(),
                conventions: CONVENTIONS.into(),
            });
        }
    }
    out
}

fn cells(plan: &ExperimentPlan) -> Vec<(usize, u64)> {
    (0..plan.values.len())
        .flat_map(|i| plan.seeds.iter().map(move |&s| (i, s)))
        .collect()
}

fn expect_axis(plan: &ExperimentPlan, axis: SweepAxis) -> Result<()> {
    if plan.axis() == axis {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{} expects axis {}, plan has {}",
            plan.name,
            axis.as_str(),
            plan.axis().as_str()
        )))
    }
}

/// ERM per training fraction and seed, evaluated on every test group, plus
/// the bootstrap test-subset dispersion analysis.
pub fn sweep_train_size(plan: &ExperimentPlan) -> Result<SweepResults> {
    expect_axis(plan, SweepAxis::TrainFraction)?;
    let AxisValues::TrainFraction(fractions) = &plan.values else {
        unreachable!()
    };
    let ctx = Ctx::new(plan)?;
    let cfg = &plan.config;
    let labels = plan.values.labels();
    let out = cfg.exec.try_map(&cells(plan), |&(i, seed)| {
        run_cell(&ctx, &labels[i], seed, |dir| {
            let (corpus, full) = seed_data(cfg, seed)?;
            let manifest = subsample_train(&full, fractions[i], seed)?;
            manifest.save(dir.join("manifest.json"))?;
            let run = train_baseline(
                &cfg.model,
                &corpus,
                &manifest,
                BaselineVariant::Erm,
                &cfg.baseline,
                seed,
                cfg.exec,
            )?;
            log_touched(dir, &run)?;
            let req = EvalRequest::new(cfg.baseline.prompt_policy, seed, run.checkpoint.hash());
            let report = evaluate_domain(&run.checkpoint.model()?, &corpus, &manifest, &req, cfg.exec)?;
            report.write(dir, "eval")?;
            Ok(CellOutput {
                rows: ctx.rows(&labels[i], seed, &report),
                bootstrap: bootstrap_rows(&ctx, &labels[i], seed, &report),
            })
        })
    })?;
    Ok(collect(plan, out))
}

/// One ERM run per seed to the largest grid point, evaluating the weights
/// kept at every grid point.
pub fn sweep_epochs(plan: &ExperimentPlan) -> Result<SweepResults> {
    expect_axis(plan, SweepAxis::Epochs)?;
    let ctx = Ctx::new(plan)?;
    let cfg = &plan.config;
    let schedule = TrainSchedule::epochs(plan);
    let out = cfg.exec.try_map(&plan.seeds, |&seed| {
        run_cell(&ctx, "grid", seed, |dir| {
            let (corpus, manifest) = seed_data(cfg, seed)?;
            let run = train_baseline(
                &cfg.model,
                &corpus,
                &manifest,
                BaselineVariant::Erm,
                &schedule.0,
                seed,
                cfg.exec,
            )?;
            log_touched(dir, &run)?;
            manifest.save(dir.join("manifest.json"))?;
            let mut rows = Vec::new();
            for (epoch, ck) in &run.snapshots {
                let model = ck.model()?;
                let req = EvalRequest::new(cfg.baseline.prompt_policy, seed, ck.hash());
                let report = evaluate_domain(&model, &corpus, &manifest, &req, cfg.exec)?;
                report.write(dir, &format!("eval_epoch{epoch}"))?;
                rows.extend(ctx.rows(&epoch.to_string(), seed, &report));
            }
            Ok(CellOutput {
                rows,
                bootstrap: Vec::new(),
            })
        })
    })?;
    Ok(collect(plan, out))
}

struct TrainSchedule(crate::finetune::TrainConfig);

impl TrainSchedule {
    fn epochs(plan: &ExperimentPlan) -> Self {
        let AxisValues::Epochs(grid) = &plan.values else {
            unreachable!()
        };
        let mut cfg = plan.config.clone();
        cfg.sweeps.epoch_grid = grid.clone();
        TrainSchedule(cfg.epoch_sweep_schedule())
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(16)]
}

/// Fingerprint of everything pretraining depends on.
fn pretrain_fingerprint(cfg: &GlobalConfig) -> Result<String> {
    let text = serde_json::to_string(&(&cfg.corpus, &cfg.model, &cfg.ssl))?;
    Ok(crate::split::hex(&Sha256::digest(text.as_bytes())))
}

/// The pretrained EMA teacher for `seed`, computed once and cached under
/// `cfg.out_dir/cache`.
pub fn pretrained_teacher(cfg: &GlobalConfig, seed: u64) -> Result<Checkpoint> {
    let dir = cfg.out_dir.join("cache");
    let stem = format!("pretrained_{}_seed{seed}", short(&pretrain_fingerprint(cfg)?));
    let path = dir.join(format!("{stem}.json"));
    if path.exists() {
        return Checkpoint::load(&path);
    }
    create_dir(&dir)?;
    let pools = build_pools(&cfg.corpus, seed, cfg.exec)?;
    let init = Model::new(cfg.model.clone(), seed::derive_label(seed, "pretrain_init"))?;
    let run = pretrain(init, &pools.labeled, &pools.unlabeled, &cfg.ssl, seed)?;
    write_loss_csv(dir.join(format!("{stem}_losses.csv")), &run.log)?;
    let tmp = dir.join(format!("{stem}.partial"));
    run.checkpoint.save(&tmp)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(run.checkpoint)
}

/// The fine-tuned checkpoint for `seed` (pretrained init, `cfg.finetune`),
/// cached under `cfg.out_dir/cache`.
pub fn finetuned_checkpoint(cfg: &GlobalConfig, seed: u64) -> Result<Checkpoint> {
    let dir = cfg.out_dir.join("cache");
    let text = serde_json::to_string(&(pretrain_fingerprint(cfg)?, &cfg.finetune))?;
    let fp = crate::split::hex(&Sha256::digest(text.as_bytes()));
    let path = dir.join(format!("finetuned_{}_seed{seed}.json", short(&fp)));
    if path.exists() {
        return Checkpoint::load(&path);
    }
    let teacher = pretrained_teacher(cfg, seed)?.model()?;
    let (corpus, manifest) = seed_data(cfg, seed)?;
    let run = finetune(teacher, &corpus, &manifest, &cfg.finetune, seed, cfg.exec)?;
    let stem = path.file_stem().expect("file name").to_string_lossy().to_string();
    let log_dir = dir.join(format!("{stem}_log"));
    create_dir(&log_dir)?;
    log_touched(&log_dir, &run)?;
    manifest.save(log_dir.join("manifest.json"))?;
    let tmp = path.with_extension("partial");
    run.checkpoint.save(&tmp)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(run.checkpoint)
}

/// Fine-tunes the pretrained teacher once per (k, seed), training only the
/// last k blocks.
pub fn sweep_blocks(plan: &ExperimentPlan) -> Result<SweepResults> {
    expect_axis(plan, SweepAxis::BlocksK)?;
    let AxisValues::BlocksK(ks) = &plan.values else {
        unreachable!()
    };
    let ctx = Ctx::new(plan)?;
    let cfg = &plan.config;
    let labels = plan.values.labels();
    let teachers = cfg.exec.try_map(&plan.seeds, |&s| pretrained_teacher(cfg, s))?;
    let n_blocks = cfg.model.n_blocks();
    let out = cfg.exec.try_map(&cells(plan), |&(i, seed)| {
        run_cell(&ctx, &labels[i], seed, |dir| {
            let (corpus, manifest) = seed_data(cfg, seed)?;
            let j = plan.seeds.iter().position(|&s| s == seed).expect("seed in plan");
            let tc = crate::finetune::TrainConfig {
                trainable_blocks_k: Some(ks[i].resolve(n_blocks)),
                ..cfg.finetune.clone()
            };
            let run = finetune(teachers[j].model()?, &corpus, &manifest, &tc, seed, cfg.exec)?;
            log_touched(dir, &run)?;
            manifest.save(dir.join("manifest.json"))?;
            let model = run.checkpoint.model()?;
            let req = EvalRequest::new(cfg.eval_policy, seed, run.checkpoint.hash());
            let report = evaluate_domain(&model, &corpus, &manifest, &req, cfg.exec)?;
            report.write(dir, "eval")?;
            Ok(CellOutput {
                rows: ctx.rows(&labels[i], seed, &report),
                bootstrap: Vec::new(),
            })
        })
    })?;
    Ok(collect(plan, out))
}

/// Evaluates one fine-tuned checkpoint per seed under every prompt policy.
pub fn ablate_prompts(plan: &ExperimentPlan) -> Result<SweepResults> {
    expect_axis(plan, SweepAxis::PromptPolicy)?;
    let AxisValues::PromptPolicy(policies) = &plan.values else {
        unreachable!()
    };
    let ctx = Ctx::new(plan)?;
    let cfg = &plan.config;
    let labels = plan.values.labels();
    let checkpoints = cfg.exec.try_map(&plan.seeds, |&s| finetuned_checkpoint(cfg, s))?;
    let out = cfg.exec.try_map(&cells(plan), |&(i, seed)| {
        run_cell(&ctx, &labels[i], seed, |dir| {
            let (corpus, manifest) = seed_data(cfg, seed)?;
            let j = plan.seeds.iter().position(|&s| s == seed).expect("seed in plan");
            let model = checkpoints[j].model()?;
            let req = EvalRequest::new(policies[i], seed, checkpoints[j].hash());
            let report = evaluate_domain(&model, &corpus, &manifest, &req, cfg.exec)?;
            report.write(dir, "eval")?;
            Ok(CellOutput {
                rows: ctx.rows(&labels[i], seed, &report),
                bootstrap: Vec::new(),
            })
        })
    })?;
    Ok(collect(plan, out))
}

/// Runs the sweep matching the plan's axis.
pub fn run_plan(plan: &ExperimentPlan) -> Result<SweepResults> {
    match plan.axis() {
        SweepAxis::TrainFraction => sweep_train_size(plan),
        SweepAxis::Epochs => sweep_epochs(plan),
        SweepAxis::BlocksK => sweep_blocks(plan),
        SweepAxis::PromptPolicy => ablate_prompts(plan),
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn value_order(rows: &[ResultRow]) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.value) {
            order.push(r.value.clone());
        }
    }
    order
}

/// Mean Dice of `group` for each seed at `value`.
pub fn dice_by_seed(rows: &[ResultRow], value: &str, group: &str) -> BTreeMap<u64, f64> {
    rows.iter()
        .filter(|r| r.value == value && r.group == group)
        .map(|r| (r.seed, r.dice_mean))
        .collect()
}

/// Median over seeds of the mean Dice of `group`, per axis value in order
/// of first appearance.
pub fn median_dice_by_value(rows: &[ResultRow], group: &str) -> Vec<(String, f64)> {
    value_order(rows)
        .into_iter()
        .filter_map(|v| {
            let d: Vec<f64> = dice_by_seed(rows, &v, group).into_values().collect();
            median(&d).map(|m| (v, m))
        })
        .collect()
}

/// Median over seeds of `|dice(a) - dice(b)|` at `value`.
pub fn median_gap(rows: &[ResultRow], value: &str, a: &str, b: &str) -> Option<f64> {
    let da = dice_by_seed(rows, value, a);
    let db = dice_by_seed(rows, value, b);
    let gaps: Vec<f64> = da
        .iter()
        .filter_map(|(s, x)| db.get(s).map(|y| (x - y).abs()))
        .collect();
    median(&gaps)
}

/// Median over seeds of the bootstrap dispersion per subset size.
pub fn median_dispersion_by_size(rows: &[BootstrapRow], value: &str, group: &str) -> Vec<(usize, f64)> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.value == value && r.group == group) {
        by.entry(r.subset_size).or_default().push(r.dispersion);
    }
    by.into_iter().filter_map(|(n, d)| median(&d).map(|m| (n, m))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianPoint {
    pub value: String,
    pub group: String,
    pub n_seeds: usize,
    pub median_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub experiment: String,
    pub axis: Option<SweepAxis>,
    pub config_sha256: Vec<String>,
    pub conventions: String,
    pub result_columns: Vec<String>,
    pub bootstrap_columns: Vec<String>,
    pub medians: Vec<MedianPoint>,
}

fn summary(res: &SweepResults) -> ReportSummary {
    let mut fps: Vec<String> = res.rows.iter().map(|r| r.config_sha256.clone()).collect();
    fps.sort();
    fps.dedup();
    let mut groups: Vec<String> = res.rows.iter().map(|r| r.group.clone()).collect();
    groups.sort();
    groups.dedup();
    let mut medians = Vec::new();
    for v in value_order(&res.rows) {
        for g in &groups {
            let d: Vec<f64> = dice_by_seed(&res.rows, &v, g).into_values().collect();
            if let Some(m) = median(&d) {
                medians.push(MedianPoint {
                    value: v.clone(),
                    group: g.clone(),
                    n_seeds: d.len(),
                    median_dice: m,
                });
            }
        }
    }
    ReportSummary {
        experiment: res.experiment.clone(),
        axis: res.axis,
        config_sha256: fps,
        conventions: CONVENTIONS.into(),
        result_columns: RESULT_CSV_COLUMNS.iter().map(|s| s.to_string()).collect(),
        bootstrap_columns: BOOTSTRAP_CSV_COLUMNS.iter().map(|s| s.to_string()).collect(),
        medians,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub results_csv: PathBuf,
    pub bootstrap_csv: Option<PathBuf>,
    pub summary_json: PathBuf,
    pub plot_svg: PathBuf,
}

/// Writes `results.csv`, `bootstrap.csv` (when present), `summary.json` and
/// a Dice-vs-axis plot into `dir`.
pub fn report(res: &SweepResults, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    if res.rows.is_empty() {
        return Err(Error::NoResults);
    }
    let dir = dir.as_ref();
    create_dir(dir)?;
    let results_csv = dir.join("results.csv");
    write_csv(&results_csv, &RESULT_CSV_COLUMNS, &res.rows)?;
    let bootstrap_csv = if res.bootstrap.is_empty() {
        None
    } else {
        let p = dir.join("bootstrap.csv");
        write_csv(&p, &BOOTSTRAP_CSV_COLUMNS, &res.bootstrap)?;
        Some(p)
    };
    let summary_json = dir.join("summary.json");
    let s = summary(res);
    std::fs::write(&summary_json, serde_json::to_string_pretty(&s)?).map_err(|e| Error::io(&summary_json, e))?;
    let plot_svg = dir.join("dice.svg");
    plot(res, &s, &plot_svg)?;
    Ok(ReportFiles {
        results_csv,
        bootstrap_csv,
        summary_json,
        plot_svg,
    })
}

/// Reads a report directory written by [`report`].
pub fn read_results(dir: impl AsRef<Path>) -> Result<SweepResults> {
    let dir = dir.as_ref();
    let rows: Vec<ResultRow> = read_csv(&dir.join("results.csv"), &RESULT_CSV_COLUMNS)?;
    let boot = dir.join("bootstrap.csv");
    let bootstrap = if boot.exists() {
        read_csv(&boot, &BOOTSTRAP_CSV_COLUMNS)?
    } else {
        Vec::new()
    };
    Ok(SweepResults {
        experiment: rows.first().map(|r| r.experiment.clone()).unwrap_or_default(),
        axis: rows.first().map(|r| r.axis),
        rows,
        bootstrap,
        resumed: 0,
    })
}

fn plot(res: &SweepResults, s: &ReportSummary, path: &Path) -> Result<()> {
    use plotters::prelude::*;
    let err = |e: &dyn std::fmt::Display| Error::Serde(format!("plot {}: {e}", path.display()));
    let values = value_order(&res.rows);
    let roles = [("source", BLUE), ("target1", GREEN), ("target2", RED)];
    let index = |v: &str| values.iter().position(|x| x == v).unwrap_or(0) as f64;
    let mut caption = String::new();
    let _ = write!(
        caption,
        "{} | config {}",
        res.experiment,
        s.config_sha256.first().map(|f| short(f)).unwrap_or("-")
    );

    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(-0.5f64..(values.len() as f64 - 0.5), 0f64..1f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_labels(values.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                values.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc(res.axis.map(|a| a.as_str()).unwrap_or("value"))
        .y_desc("Dice")
        .draw()
        .map_err(|e| err(&e))?;
    for (role, color) in roles {
        let scatter: Vec<(f64, f64)> = res
            .rows
            .iter()
            .filter(|r| r.scope == "role" && r.group == role)
            .map(|r| (index(&r.value), r.dice_mean))
            .collect();
        if scatter.is_empty() {
            continue;
        }
        chart
            .draw_series(scatter.iter().map(|&p| Circle::new(p, 3, color.mix(0.5).filled())))
            .map_err(|e| err(&e))?;
        let line: Vec<(f64, f64)> = median_dice_by_value(&res.rows, role)
            .into_iter()
            .map(|(v, m)| (index(&v), m))
            .collect();
        chart
            .draw_series(LineSeries::new(line, color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(role)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}
