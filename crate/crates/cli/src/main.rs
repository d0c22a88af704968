use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use phasedg::bench::{self, ExperimentPlan};
use phasedg::config::GlobalConfig;
use phasedg::corpus::{build_pools, write_corpus, Corpus};
use phasedg::finetune::{evaluate_domain, finetune, train_baseline, BaselineVariant, EvalRequest};
use phasedg::model::{Checkpoint, Model, PromptPolicy};
use phasedg::seed;
use phasedg::split::{verify_isolation, Assignment, SplitManifest};
use phasedg::ssl::{pretrain, write_loss_csv};

/// Cross-center and cross-phase domain-generalization benchmark on
/// synthetic phantoms.
#[derive(Parser)]
#[command(name = "phasedg", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark phantoms as NIfTI.
    Phantoms,
    /// Split the source centers 3:1:1 and audit the manifest.
    Split,
    /// Semi-supervised pretraining on the phantom pools.
    Pretrain,
    /// Fine-tune a pretrained checkpoint on the source training split.
    Finetune {
        /// Initial weights; pretrains first when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train an ERM or MixStyle baseline from scratch.
    Baseline {
        #[arg(long, value_enum, default_value_t = Variant::Erm)]
        variant: Variant,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the source and target test cases.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's `eval_policy`.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run one sweep and write its report.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Re-emit the report of a finished sweep.
    Report {
        /// A report directory holding `results.csv`.
        dir: PathBuf,
        /// Output directory; defaults to `dir`.
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Erm,
    Mixstyle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    TrainSize,
    Epochs,
    Blocks,
    Prompts,
}

fn load_config(g: &GlobalArgs) -> Result<GlobalConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &g.out_dir {
        overrides.push(format!("out_dir={}", toml_quote(&d.display().to_string())));
    }
    GlobalConfig::load(g.config.as_deref(), &overrides).context("loading config")
}

fn toml_quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn data(cfg: &GlobalConfig, manifest: Option<&Path>) -> Result<(Corpus, SplitManifest)> {
    let (corpus, split) = bench::seed_data(cfg, cfg.seed)?;
    let manifest = match manifest {
        Some(p) => SplitManifest::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => split,
    };
    let audit = verify_isolation(&manifest);
    if !audit.passed {
        bail!("{audit}");
    }
    Ok((corpus, manifest))
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(path)?;
    println!("checkpoint {} sha256 {}", path.display(), ck.hash());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = cfg.out_dir.clone();
    let s = cfg.seed;
    match cli.command {
        Command::Phantoms => {
            let dir = out.join(format!("phantoms_seed{s}"));
            let files = write_corpus(&cfg.corpus, s, &dir, cfg.exec)?;
            println!("wrote {} cases to {}", files.len(), dir.display());
        }
        Command::Split => {
            let (_, m) = data(&cfg, None)?;
            let path = out.join(format!("split_seed{s}.json"));
            std::fs::create_dir_all(&out)?;
            m.save(&path)?;
            for a in [
                Assignment::Train,
                Assignment::Val,
                Assignment::SourceTest,
                Assignment::TargetTest,
            ] {
                println!("{a:?}: {}", m.count(a));
            }
            println!(
                "{}\nmanifest {} sha256 {}",
                verify_isolation(&m),
                path.display(),
                m.hash()
            );
        }
        Command::Pretrain => {
            let pools = build_pools(&cfg.corpus, s, cfg.exec)?;
            let init = Model::new(cfg.model.clone(), seed::derive_label(s, "pretrain_init"))?;
            let run = pretrain(init, &pools.labeled, &pools.unlabeled, &cfg.ssl, s)?;
            std::fs::create_dir_all(&out)?;
            write_loss_csv(out.join(format!("pretrain_seed{s}_losses.csv")), &run.log)?;
            save(&run.checkpoint, &out.join(format!("pretrained_seed{s}.json")))?;
        }
        Command::Finetune { init, manifest } => {
            let init = match init {
                Some(p) => Checkpoint::load(&p)?,
                None => bench::pretrained_teacher(&cfg, s)?,
            };
            let (corpus, m) = data(&cfg, manifest.as_deref())?;
            let run = finetune(init.model()?, &corpus, &m, &cfg.finetune, s, cfg.exec)?;
            println!("selected step {} val dice {:.4}", run.best.step, run.best.dice);
            save(&run.checkpoint, &out.join(format!("finetuned_seed{s}.json")))?;
        }
        Command::Baseline { variant, manifest } => {
            let v = match variant {
                Variant::Erm => BaselineVariant::Erm,
                Variant::Mixstyle => BaselineVariant::Mixstyle,
            };
            let (corpus, m) = data(&cfg, manifest.as_deref())?;
            let run = train_baseline(&cfg.model, &corpus, &m, v, &cfg.baseline, s, cfg.exec)?;
            println!("selected step {} val dice {:.4}", run.best.step, run.best.dice);
            save(
                &run.checkpoint,
                &out.join(format!("baseline_{}_seed{s}.json", v.as_str())),
            )?;
        }
        Command::Eval {
            checkpoint,
            policy,
            manifest,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let policy: PromptPolicy = match policy {
                Some(p) => p.parse()?,
                None => cfg.eval_policy,
            };
            let (corpus, m) = data(&cfg, manifest.as_deref())?;
            let req = EvalRequest::new(policy, s, ck.hash());
            let report = evaluate_domain(&ck.model()?, &corpus, &m, &req, cfg.exec)?;
            let dir = out.join("eval");
            report.write(&dir, &format!("eval_{}_seed{s}", policy.as_str()))?;
            for g in &report.groups {
                let (mean, sd) = (g.summary.mean, g.summary.std);
                println!(
                    "{:8} {:12} dice {:.4} ± {:.4}  hd95 {:.2} ± {:.2} mm",
                    g.center,
                    g.phase.as_str(),
                    mean.dice,
                    sd.dice,
                    mean.hd95_mm,
                    sd.hd95_mm
                );
            }
        }
        Command::Sweep { kind } => {
            let plan = match kind {
                SweepKind::TrainSize => ExperimentPlan::train_size(&cfg)?,
                SweepKind::Epochs => ExperimentPlan::epochs(&cfg)?,
                SweepKind::Blocks => ExperimentPlan::blocks(&cfg)?,
                SweepKind::Prompts => ExperimentPlan::prompts(&cfg)?,
            };
            let res = bench::run_plan(&plan)?;
            let files = bench::report(&res, plan.out_dir.join("report"))?;
            println!("{} rows ({} cells resumed)", res.rows.len(), res.resumed);
            for role in ["source", "target1", "target2"] {
                let line: Vec<String> = bench::median_dice_by_value(&res.rows, role)
                    .into_iter()
                    .map(|(v, d)| format!("{v}:{:.1}", 100.0 * d))
                    .collect();
                println!("{role:8} {}", line.join("  "));
            }
            println!("report {}", files.results_csv.display());
        }
        Command::Report { dir, to } => {
            let res = bench::read_results(&dir)?;
            let files = bench::report(&res, to.as_deref().unwrap_or(&dir))?;
            println!("report {}", files.summary_json.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
