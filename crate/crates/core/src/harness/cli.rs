//! Command-line interface. Every command writes its outputs, then a
//! `manifest.json` beside them.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use super::report::{self, write_csv, Manifest};
use super::{
    ablation_guidance, ablation_init_grid, ablation_lambda, dataset_seed, evaluate, init_spread,
    ood_zeroshot, phase1_diffuser, phase2_diffuser, pretrain_plm, prompt_dt_finetune, soft_prompts,
    split_by_name, stream, summarize, task_episode_counts, ExperimentConfig, FamilyData,
    PromptProvider, ProviderKind, Workbench,
};
use crate::datasets::{dataset_file_name, Dataset, NormStats};
use crate::diffuser::Diffuser;
use crate::envs::{make_task, Family, TaskSplit, Tier};
use crate::guidance::{GradientVariant, GuidanceConfig};
use crate::numerics::Checkpoint;
use crate::prompt_dt::Plm;
use crate::rng;
use crate::{datasets, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "prompt-diffuser",
    version,
    about = "Diffusion-generated prompts for a prompt-conditioned decision transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML experiment config; unspecified keys take their defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: `default` or `quick`.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p),
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AblationKind {
    Init,
    Guidance,
    Lambda,
    Ood,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Collect offline datasets, one file per task and tier.
    GenData {
        /// Family (`dir-1d`, `vel`, `dir-2d`) or `dir-2d-ood`.
        #[arg(long)]
        family: String,
        /// `expert`, `medium`, `random` or `all`.
        #[arg(long, default_value = "all")]
        tier: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the policy on the training tasks of a data directory.
    PretrainPlm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        family: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompt diffusers: phase 1 on the training corpus, then phase 2
    /// per evaluation task unless `--zero-shot`.
    TrainDiffuser {
        #[arg(long)]
        plm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        family: String,
        /// Only this evaluation task (default: all).
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        zero_shot: bool,
        /// `dm-only`, `dt-only`, `naive-sum` or `projected`.
        #[arg(long)]
        variant: Option<GradientVariant>,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the policy with a prompt provider on the evaluation tasks.
    Eval {
        #[arg(long)]
        plm: PathBuf,
        /// `none`, `random-trajectory`, `expert-trajectory`, `soft-prompt` or
        /// `diffuser`.
        #[arg(long)]
        provider: ProviderKind,
        #[arg(long)]
        family: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Data directory (trajectory and soft-prompt providers, fine-tuning).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of `diffuser_taskNN.ckpt` files.
        #[arg(long)]
        diffusers: Option<PathBuf>,
        /// Fully fine-tune the policy on each task's few-shot data first.
        #[arg(long)]
        prompt_dt_ft: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run an ablation end to end over the configured seeds.
    Ablate {
        #[arg(value_enum)]
        which: AblationKind,
        /// Comma-separated seeds (default: from the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Family (default: `vel`; all three for `guidance`).
        #[arg(long)]
        family: Option<Family>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect every summary and eval table under a directory into report.md.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on a usage error, 2 on a runtime
/// failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Records outputs and writes the manifest once the command is done.
struct Outputs<'a> {
    dir: &'a Path,
    command: &'static str,
    args: &'a [String],
    start: Instant,
    artifacts: Vec<String>,
    logs: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path, command: &'static str, args: &'a [String]) -> Result<Self> {
        create_dir(dir)?;
        Ok(Self {
            dir,
            command,
            args,
            start: Instant::now(),
            artifacts: Vec::new(),
            logs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn artifact(&mut self, name: impl Into<String>) {
        self.artifacts.push(name.into());
    }

    fn log(&mut self, name: impl Into<String>) {
        self.logs.push(name.into());
    }

    fn finish(self, config_text: &str, seeds: Vec<u64>) -> Result<()> {
        let m = Manifest::build(
            self.dir,
            self.command,
            self.args,
            config_text,
            seeds,
            self.start.elapsed().as_secs_f64(),
            &self.artifacts,
            &self.logs,
        )?;
        let p = m.write(self.dir)?;
        log::info!("wrote {}", p.display());
        Ok(())
    }
}

fn parse_tiers(s: &str) -> Result<Vec<Tier>> {
    if s == "all" {
        Ok(Tier::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

/// Reads every `(task, tier)` dataset of the split present in `dir`.
pub fn load_family_data(
    dir: &Path,
    split: &TaskSplit,
    fewshot_episodes: usize,
) -> Result<FamilyData> {
    let mut sets = BTreeMap::new();
    for (task, _) in task_episode_counts(split, 1, 1) {
        for tier in Tier::ALL {
            let p = dir.join(dataset_file_name(split.family, task, tier));
            if !p.exists() {
                continue;
            }
            let ds = Dataset::read(&p)?;
            let h = &ds.header;
            if h.family != split.family || h.task_index != task || h.tier != tier {
                return Err(Error::Format(format!(
                    "{}: header says {} task {} {}",
                    p.display(),
                    h.family,
                    h.task_index,
                    h.tier
                )));
            }
            sets.insert((task, tier), ds.trajectories);
        }
    }
    if !split.train.iter().any(|t| sets.keys().any(|(k, _)| k == t)) {
        return Err(Error::Missing(format!(
            "no {} training-task datasets in {}",
            split.family,
            dir.display()
        )));
    }
    FamilyData::from_sets(split.clone(), sets, fewshot_episodes)
}

fn load_plm(path: &Path) -> Result<(Plm, NormStats)> {
    let (mut plm, stats) = Plm::from_checkpoint(&Checkpoint::load(path)?)?;
    plm.set_training(false);
    let stats = stats.ok_or_else(|| {
        Error::Checkpoint(format!("{} has no normalisation stats", path.display()))
    })?;
    Ok((plm, stats))
}

fn diffuser_file(task: usize) -> String {
    format!("diffuser_task{task:02}.ckpt")
}

const PHASE1_FILE: &str = "diffuser_phase1.ckpt";

fn require<'p>(p: &'p Option<PathBuf>, flag: &str, provider: ProviderKind) -> Result<&'p Path> {
    p.as_deref().ok_or_else(|| {
        Error::InvalidArgument(format!("--{flag} is required for provider {provider}"))
    })
}

#[derive(Serialize)]
struct GenDataSettings<'a> {
    family: &'a str,
    tier: &'a str,
    episodes: usize,
    seed: u64,
}

fn execute(cmd: Cmd, args: &[String]) -> Result<()> {
    match cmd {
        Cmd::GenData {
            family,
            tier,
            episodes,
            seed,
            out,
        } => {
            let split = split_by_name(&family)?;
            let tiers = parse_tiers(&tier)?;
            if episodes == 0 {
                return Err(Error::InvalidArgument("--episodes must be positive".into()));
            }
            let mut o = Outputs::new(&out, "gen-data", args)?;
            for (task, _) in task_episode_counts(&split, episodes, episodes) {
                let spec = make_task(split.family, task)?;
                for &t in &tiers {
                    let s = dataset_seed(seed, split.family, task, t);
                    let trajs = datasets::collect(&spec, t, episodes, s)?;
                    let name = dataset_file_name(split.family, task, t);
                    Dataset::new(split.family, task, t, s, trajs).write(o.path(&name))?;
                    o.artifact(name);
                }
            }
            println!("wrote {} datasets to {}", o.artifacts.len(), out.display());
            let settings = GenDataSettings {
                family: &family,
                tier: &tier,
                episodes,
                seed,
            };
            let text = toml::to_string(&settings).expect("settings serialise");
            o.finish(&text, vec![seed])
        }
        Cmd::PretrainPlm {
            data,
            family,
            config,
            seed,
            out,
        } => {
            let config = config.load()?;
            let split = split_by_name(&family)?;
            let fd = load_family_data(&data, &split, config.data.fewshot_episodes)?;
            let mut o = Outputs::new(&out, "pretrain-plm", args)?;
            let (plm, log) = pretrain_plm(&fd, &config, seed)?;
            plm.to_checkpoint(Some(&fd.stats))
                .save(o.path("plm.ckpt"))?;
            o.artifact("plm.ckpt");
            write_csv(o.path("plm_train.csv"), &log)?;
            o.log("plm_train.csv");
            if let Some(last) = log.last() {
                println!(
                    "pre-trained {} iterations, final loss {:.5}",
                    last.iteration + 1,
                    last.loss
                );
            }
            o.finish(&config.canonical(), vec![seed])
        }
        Cmd::TrainDiffuser {
            plm,
            data,
            family,
            task,
            zero_shot,
            variant,
            lambda,
            config,
            seed,
            out,
        } => {
            let config = config.load()?;
            let split = split_by_name(&family)?;
            let (plm, stats) = load_plm(&plm)?;
            let mut fd = load_family_data(&data, &split, config.data.fewshot_episodes)?;
            fd.stats = stats;
            let tasks: Vec<usize> = match task {
                Some(t) if split.eval_tasks().contains(&t) => vec![t],
                Some(t) => {
                    return Err(Error::InvalidArgument(format!(
                        "task {t} is not an evaluation task of {family}"
                    )))
                }
                None => split.eval_tasks().to_vec(),
            };
            let gc = GuidanceConfig {
                variant: variant.unwrap_or(config.guidance.variant),
                lambda: lambda.unwrap_or(config.guidance.lambda),
                ..config.guidance.clone()
            };
            gc.validate()?;
            let mut o = Outputs::new(&out, "train-diffuser", args)?;
            let (base, log1) = phase1_diffuser(&fd, &config, seed)?;
            base.to_checkpoint().save(o.path(PHASE1_FILE))?;
            o.artifact(PHASE1_FILE);
            write_csv(o.path("phase1.csv"), &log1)?;
            o.log("phase1.csv");
            let tier = config.data.fewshot_tier;
            for t in tasks {
                let name = diffuser_file(t);
                if zero_shot {
                    base.to_checkpoint().save(o.path(&name))?;
                } else {
                    let (d, log2) = phase2_diffuser(&base, &plm, &fd, t, (tier, tier), &gc, seed)?;
                    d.to_checkpoint().save(o.path(&name))?;
                    let log_name = format!("phase2_task{t:02}.csv");
                    write_csv(o.path(&log_name), &log2)?;
                    o.log(log_name);
                }
                println!("wrote {name}");
                o.artifact(name);
            }
            let mut c = config.clone();
            c.guidance = gc;
            o.finish(&c.canonical(), vec![seed])
        }
        Cmd::Eval {
            plm,
            provider,
            family,
            episodes,
            seed,
            data,
            diffusers,
            prompt_dt_ft,
            config,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(n) = episodes {
                config.eval.episodes = n;
            }
            config.validate()?;
            let split = split_by_name(&family)?;
            let mut o = Outputs::new(&out, "eval", args)?;
            let (plm, stats) = load_plm(&plm)?;
            let fd = match &data {
                Some(dir) => {
                    let mut fd = load_family_data(dir, &split, config.data.fewshot_episodes)?;
                    fd.stats = stats.clone();
                    Some(fd)
                }
                None => None,
            };
            let need_data = || {
                fd.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("--data is required for provider {provider}"))
                })
            };
            let tier = config.data.fewshot_tier;
            let p = match provider {
                ProviderKind::None => PromptProvider::None,
                ProviderKind::ExpertTrajectory => PromptProvider::Trajectory {
                    tier: Tier::Expert,
                    data: need_data()?,
                },
                ProviderKind::RandomTrajectory => PromptProvider::Trajectory {
                    tier: Tier::Random,
                    data: need_data()?,
                },
                ProviderKind::SoftPrompt => PromptProvider::Fixed {
                    kind: ProviderKind::SoftPrompt,
                    prompts: soft_prompts(
                        &plm,
                        need_data()?,
                        (tier, tier),
                        &config.soft_prompt,
                        rng::derive_seed(seed, stream::SOFT),
                    )?,
                },
                ProviderKind::Diffuser => {
                    let dir = require(&diffusers, "diffusers", provider)?;
                    let mut models = BTreeMap::new();
                    for &t in split.eval_tasks() {
                        let d = Diffuser::from_checkpoint(&Checkpoint::load(
                            dir.join(diffuser_file(t)),
                        )?)?;
                        models.insert(t, Rc::new(d));
                    }
                    PromptProvider::Diffuser {
                        models,
                        target_rtg: config.eval.target_rtg.get(split.family),
                        temperature: config.diffuser.temperature,
                    }
                }
            };
            let target = config.eval.target_rtg.get(split.family);
            let n = config.eval.episodes;
            let mut rep = if prompt_dt_ft {
                let fd = fd.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("--data is required for --prompt-dt-ft".into())
                })?;
                let mut rep = evaluate(&plm, &stats, &p, split.family, &[], target, n, seed);
                for &t in split.eval_tasks() {
                    let mut r = rng::derived(rng::derive_seed(seed, stream::PLM), t as u64);
                    let ft = prompt_dt_finetune(
                        &plm,
                        fd.fewshot(t, tier)?,
                        &stats,
                        &config.prompt_dt_ft,
                        &mut r,
                    )?;
                    rep.tasks.extend(
                        evaluate(&ft, &stats, &p, split.family, &[t], target, n, seed).tasks,
                    );
                }
                rep
            } else {
                evaluate(
                    &plm,
                    &stats,
                    &p,
                    split.family,
                    split.eval_tasks(),
                    target,
                    n,
                    seed,
                )
            };
            rep.config_digest = config.digest();
            println!("{rep}");
            write_csv(o.path("eval.csv"), &rep.rows())?;
            o.artifact("eval.csv");
            o.finish(&config.canonical(), vec![seed])
        }
        Cmd::Ablate {
            which,
            seeds,
            family,
            config,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(s) = seeds {
                config.seeds = s;
            }
            let mut wb = Workbench::new(config.clone())?;
            let mut o = Outputs::new(&out, "ablate", args)?;
            let fam = family.unwrap_or(Family::Vel);
            let cells = match which {
                AblationKind::Guidance => {
                    let families = family.map_or(Family::ALL.to_vec(), |f| vec![f]);
                    ablation_guidance(&mut wb, &families)?
                }
                AblationKind::Lambda => ablation_lambda(&mut wb, fam)?,
                AblationKind::Init => ablation_init_grid(&mut wb, fam)?,
                AblationKind::Ood => ood_zeroshot(&mut wb)?,
            };
            let summary = summarize(&cells);
            write_csv(o.path("cells.csv"), &cells)?;
            o.artifact("cells.csv");
            write_csv(o.path("summary.csv"), &summary)?;
            o.artifact("summary.csv");
            println!("{}", report::render_summary(&summary));
            if which == AblationKind::Init {
                for k in [ProviderKind::SoftPrompt, ProviderKind::Diffuser] {
                    println!("{k} spread over init tiers: {:.3}", init_spread(&cells, k));
                }
            }
            o.finish(&config.canonical(), config.seeds.clone())
        }
        Cmd::Report { dir } => {
            let text = report::report(&dir)?;
            println!("{text}");
            Ok(())
        }
    }
}
