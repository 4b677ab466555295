use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poseadapt::adapt_engine::{adapt, init_model, pretrain, ExperimentConfig, ExperimentData, RunOptions, TrainLog};
use poseadapt::eval_report::{emit_plots, evaluate_splits, run_ablation, AblationOptions, AblationPlan, AblationTable, PlotKind};
use poseadapt::model_zoo::{load_checkpoint, ParamGroup};
use poseadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "poseadapt", version, about = "Domain-adaptive 2D pose estimation experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `adapt.epochs=2`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Experiment seed; overrides the configured one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render every data split to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training on the source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen-data`; data is generated in memory when unset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adversarial adaptation starting from a pretrained checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PCK of a checkpoint on the held-out splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a bundled ablation plan over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// relations, structures, loss-variants, sensitivity or headline.
        #[arg(long)]
        plan: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Figures and CSVs from training logs and ablation tables.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// `train_log.jsonl` files; repeatable.
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        /// `table.json` written by `ablate`.
        #[arg(long)]
        table: Option<PathBuf>,
        /// loss, discrepancy or sensitivity; repeatable. Defaults to what the inputs support.
        #[arg(long = "kind")]
        kinds: Vec<String>,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::resolve(common.config.as_deref(), &overrides)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Resolves the configuration, creates the output directory and records the
/// resolved snapshot in it.
fn start(common: &Common) -> Result<ExperimentConfig> {
    let cfg = resolve(common)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::Io { path: common.out.clone(), source: e })?;
    write(&common.out.join("config.json"), &cfg.to_json())?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ExperimentData> {
    match dir {
        Some(d) => ExperimentData::load(cfg, d),
        None => ExperimentData::generate(cfg),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let cfg = start(&common)?;
            for m in ExperimentData::write(&cfg, &common.out)? {
                println!("{:?} {} samples sha256={}", m.domain, m.count, m.sha256);
            }
        }
        Command::Pretrain { common, data } => {
            let cfg = start(&common)?;
            let data = load_data(&cfg, data.as_deref())?;
            let mut model = init_model(&cfg)?;
            let opts = RunOptions { run_dir: Some(common.out.clone()), validation: Some(&data.source_eval), probe: None };
            let log = pretrain(&mut model, &data.source, &cfg, &opts)?;
            log.write_jsonl(&common.out.join("train_log.jsonl"))?;
            println!("wrote {}", common.out.join("pretrained.ckpt").display());
        }
        Command::Adapt { common, data, checkpoint } => {
            let cfg = start(&common)?;
            let data = load_data(&cfg, data.as_deref())?;
            let (pretrained, _) = load_checkpoint(&checkpoint)?;
            let mut model = init_model(&cfg)?;
            model
                .copy_groups_from(&pretrained, &[ParamGroup::G, ParamGroup::F])
                .map_err(|e| Error::Config(format!("checkpoint does not fit the configured model: {e}")))?;
            let opts = RunOptions {
                run_dir: Some(common.out.clone()),
                validation: Some(&data.target_eval),
                probe: Some(&data.target_eval),
            };
            let log = adapt(&mut model, &data.source, &data.target, &cfg, &opts)?;
            log.write_jsonl(&common.out.join("train_log.jsonl"))?;
            println!("wrote {}", common.out.join("adapted.ckpt").display());
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = start(&common)?;
            let data = load_data(&cfg, data.as_deref())?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let m = evaluate_splits(&model, &data, &cfg)?;
            write(&common.out.join("metrics.json"), &(serde_json::to_string_pretty(&m)? + "\n"))?;
            println!(
                "PCK@{}  target {:.2}  source {:.2}  unseen {:.2}",
                cfg.eval.threshold_ratio,
                100.0 * m.target.overall,
                100.0 * m.source.overall,
                100.0 * m.unseen.overall
            );
        }
        Command::Ablate { common, plan, seeds } => {
            let cfg = start(&common)?;
            let plan = AblationPlan::bundled(&plan, cfg, seeds)?;
            let table = run_ablation(&plan, &AblationOptions { out_dir: Some(common.out.clone()), threads: None })?;
            if table.rows.iter().any(|r| r.sweep.is_some()) {
                emit_plots(&[PlotKind::Sensitivity], &[], Some(&table), &common.out.join("plots"))?;
            }
            print!("{}", table.to_text());
        }
        Command::Plot { out, logs, table, kinds } => {
            let logs = logs
                .iter()
                .map(|p| {
                    let name = p.parent().and_then(Path::file_name).or_else(|| p.file_stem()).map_or("run".into(), |n| n.to_string_lossy().into_owned());
                    TrainLog::read_jsonl(p).map(|l| (name, l))
                })
                .collect::<Result<Vec<_>>>()?;
            let table: Option<AblationTable> = match &table {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    Some(serde_json::from_str(&text)?)
                }
                None => None,
            };
            let mut kinds = kinds.iter().map(|k| k.parse()).collect::<Result<Vec<PlotKind>>>()?;
            if kinds.is_empty() {
                if !logs.is_empty() {
                    kinds.extend([PlotKind::Loss, PlotKind::Discrepancy]);
                }
                if table.is_some() {
                    kinds.push(PlotKind::Sensitivity);
                }
            }
            if kinds.is_empty() {
                return Err(Error::Config("nothing to plot: pass --log or --table".into()));
            }
            for p in emit_plots(&kinds, &logs, table.as_ref(), &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
