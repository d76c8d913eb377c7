//! Experiment plumbing: configuration presets, data generation, prompt
//! providers, evaluation, the soft-prompt and full fine-tune baselines,
//! linear CKA, ablation drivers, reporting and the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{self, NormStats, Segment, Trajectory};
use crate::diffuser::{Condition, Diffuser, DiffuserConfig};
use crate::envs::{make_task, Family, TaskSplit, Tier};
use crate::guidance::{self, GuidanceConfig, GuidanceLogRow};
use crate::numerics::{adamw_step, grad, AdamWConfig, AdamWState, ParamSet, Tensor};
use crate::prompt_dt::{self, BlockVars, Plm, PlmConfig, PretrainConfig, StepBlock, TaskData};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub mod ablation;
pub mod cli;
pub mod report;

pub use ablation::{
    ablation_guidance, ablation_init_grid, ablation_lambda, init_spread, ood_zeroshot, summarize,
    CellResult, SummaryRow,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Episodes per tier for every training task.
    pub train_episodes: usize,
    /// Episodes per tier for evaluation-only tasks; also caps the few-shot
    /// data taken from tasks that are both trained on and evaluated.
    pub fewshot_episodes: usize,
    /// Tier of the few-shot data outside the initialisation grid.
    pub fewshot_tier: Tier,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_episodes: 10,
            fewshot_episodes: 4,
            fewshot_tier: Tier::Expert,
        }
    }
}

/// Initial return-to-go per family, raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetRtg {
    #[serde(rename = "dir-1d")]
    pub dir_1d: f64,
    pub vel: f64,
    #[serde(rename = "dir-2d")]
    pub dir_2d: f64,
}

impl Default for TargetRtg {
    fn default() -> Self {
        Self {
            dir_1d: 40.0,
            vel: 0.0,
            dir_2d: 40.0,
        }
    }
}

impl TargetRtg {
    pub fn get(&self, family: Family) -> f64 {
        match family {
            Family::Dir1d => self.dir_1d,
            Family::Vel => self.vel,
            Family::Dir2d => self.dir_2d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub target_rtg: TargetRtg,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            target_rtg: TargetRtg::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftPromptConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
}

impl Default for SoftPromptConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Full-model fine-tuning baseline; off unless enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epochs: 20,
            steps: 100,
            batch: 32,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub lambda_grid: Vec<f64>,
    pub data: DataConfig,
    pub plm: PlmConfig,
    pub plm_train: PretrainConfig,
    pub diffuser: DiffuserConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub soft_prompt: SoftPromptConfig,
    pub prompt_dt_ft: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            lambda_grid: vec![0.0, 0.25, 1.0, 2.0, 5.0],
            data: DataConfig::default(),
            plm: PlmConfig::default(),
            plm_train: PretrainConfig::default(),
            diffuser: DiffuserConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
            soft_prompt: SoftPromptConfig::default(),
            prompt_dt_ft: FinetuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced budget that runs the whole ablation suite on one CPU core in
    /// tens of minutes.
    pub fn quick() -> Self {
        let d = Self::default();
        Self {
            plm: PlmConfig {
                layers: 2,
                dim: 32,
                ..d.plm
            },
            plm_train: PretrainConfig {
                iterations: 1500,
                batch_size: 8,
                ..d.plm_train
            },
            guidance: GuidanceConfig {
                pretrain_iterations: 2000,
                history_batch: 8,
                finetune_epochs: 1,
                finetune_steps: 100,
                ..d.guidance
            },
            soft_prompt: SoftPromptConfig {
                steps: 100,
                batch: 8,
                ..d.soft_prompt
            },
            ..d
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "quick" => Ok(Self::quick()),
            _ => Err(Error::Config(format!(
                "unknown preset {name} (expected default or quick)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The printed form that is hashed into manifests.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.plm.prompt_len != self.diffuser.prompt_len {
            return Err(Error::Config(format!(
                "plm.prompt_len {} differs from diffuser.prompt_len {}",
                self.plm.prompt_len, self.diffuser.prompt_len
            )));
        }
        if self.data.train_episodes == 0 || self.data.fewshot_episodes == 0 {
            return Err(Error::Config("episode counts must be positive".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(0.0..=5.0).contains(*l)) {
            return Err(Error::Config(format!("lambda {l} outside [0, 5]")));
        }
        self.plm.validate()?;
        self.diffuser.validate()?;
        self.guidance.validate()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn family_code(f: Family) -> u64 {
    match f {
        Family::Dir1d => 1,
        Family::Vel => 2,
        Family::Dir2d => 3,
    }
}

fn tier_code(t: Tier) -> u64 {
    match t {
        Tier::Expert => 0,
        Tier::Medium => 1,
        Tier::Random => 2,
    }
}

/// Seed of the `(task, tier)` dataset of a family.
pub fn dataset_seed(seed: u64, family: Family, task: usize, tier: Tier) -> u64 {
    rng::derive_seed(
        rng::derive_seed(seed, family_code(family)),
        task as u64 * 3 + tier_code(tier),
    )
}

/// Name of a split: the family, with an `-ood` suffix for the OOD split.
pub fn split_name(split: &TaskSplit) -> String {
    match split.ood_test {
        Some(_) => format!("{}-ood", split.family),
        None => split.family.to_string(),
    }
}

pub fn split_by_name(name: &str) -> Result<TaskSplit> {
    match name.strip_suffix("-ood") {
        Some("dir-2d") => Ok(TaskSplit::dir2d_ood()),
        Some(other) => Err(Error::InvalidArgument(format!("no OOD split for {other}"))),
        None => Ok(TaskSplit::standard(name.parse()?)),
    }
}

/// Offline data of one split: a dataset per `(task, tier)` plus the
/// normalisation fitted on the training tasks.
#[derive(Clone, Debug)]
pub struct FamilyData {
    pub split: TaskSplit,
    pub sets: BTreeMap<(usize, Tier), Vec<Trajectory>>,
    pub stats: NormStats,
    pub fewshot_episodes: usize,
}

impl FamilyData {
    /// Every training task gets `train_episodes` per tier, every
    /// evaluation-only task `fewshot_episodes` per tier.
    pub fn generate(split: &TaskSplit, dc: &DataConfig, seed: u64) -> Result<Self> {
        let mut sets = BTreeMap::new();
        for (task, n) in task_episode_counts(split, dc.train_episodes, dc.fewshot_episodes) {
            let spec = make_task(split.family, task)?;
            for tier in Tier::ALL {
                let trajs = datasets::collect(
                    &spec,
                    tier,
                    n,
                    dataset_seed(seed, split.family, task, tier),
                )?;
                sets.insert((task, tier), trajs);
            }
        }
        Self::from_sets(split.clone(), sets, dc.fewshot_episodes)
    }

    pub fn from_sets(
        split: TaskSplit,
        sets: BTreeMap<(usize, Tier), Vec<Trajectory>>,
        fewshot_episodes: usize,
    ) -> Result<Self> {
        split.validate()?;
        let train: Vec<&Trajectory> = sets
            .iter()
            .filter(|((task, _), _)| split.train.contains(task))
            .flat_map(|(_, v)| v.iter())
            .collect();
        if train.is_empty() {
            return Err(Error::Missing(format!(
                "training data for {}",
                split_name(&split)
            )));
        }
        let stats = datasets::fit_norm_stats(train)?;
        Ok(Self {
            split,
            sets,
            stats,
            fewshot_episodes,
        })
    }

    pub fn family(&self) -> Family {
        self.split.family
    }

    pub fn set(&self, task: usize, tier: Tier) -> Result<&[Trajectory]> {
        self.sets
            .get(&(task, tier))
            .map(Vec::as_slice)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Missing(format!("{} task {task} {tier} data", self.family())))
    }

    /// The few-shot data of an evaluation task.
    pub fn fewshot(&self, task: usize, tier: Tier) -> Result<&[Trajectory]> {
        let s = self.set(task, tier)?;
        Ok(&s[..s.len().min(self.fewshot_episodes)])
    }

    /// Per training task: expert prompts (any tier when no expert data is
    /// present), histories from every tier.
    pub fn plm_tasks(&self) -> Result<Vec<TaskData>> {
        self.split
            .train
            .iter()
            .map(|&task| {
                let histories: Vec<Trajectory> = Tier::ALL
                    .iter()
                    .filter_map(|&t| self.sets.get(&(task, t)))
                    .flatten()
                    .cloned()
                    .collect();
                let prompts = match self.set(task, Tier::Expert) {
                    Ok(e) => e.to_vec(),
                    Err(_) => histories.clone(),
                };
                if histories.is_empty() {
                    return Err(Error::Missing(format!(
                        "{} task {task} training data",
                        self.family()
                    )));
                }
                Ok(TaskData {
                    task,
                    prompts,
                    histories,
                })
            })
            .collect()
    }

    /// All training-task trajectories, the diffuser's phase-1 corpus.
    pub fn corpus(&self) -> Vec<Trajectory> {
        self.sets
            .iter()
            .filter(|((task, _), _)| self.split.train.contains(task))
            .flat_map(|(_, v)| v.iter().cloned())
            .collect()
    }
}

/// Episodes per task: training tasks first, then evaluation-only tasks.
pub fn task_episode_counts(split: &TaskSplit, train: usize, fewshot: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = split.train.iter().map(|&t| (t, train)).collect();
    for &t in split.eval_tasks() {
        if !split.train.contains(&t) {
            out.push((t, fewshot));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProviderKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "random-trajectory")]
    RandomTrajectory,
    #[serde(rename = "expert-trajectory")]
    ExpertTrajectory,
    #[serde(rename = "soft-prompt")]
    SoftPrompt,
    #[serde(rename = "diffuser")]
    Diffuser,
}

impl ProviderKind {
    pub const ALL: [ProviderKind; 5] = [
        ProviderKind::None,
        ProviderKind::RandomTrajectory,
        ProviderKind::ExpertTrajectory,
        ProviderKind::SoftPrompt,
        ProviderKind::Diffuser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProviderKind::None => "none",
            ProviderKind::RandomTrajectory => "random-trajectory",
            ProviderKind::ExpertTrajectory => "expert-trajectory",
            ProviderKind::SoftPrompt => "soft-prompt",
            ProviderKind::Diffuser => "diffuser",
        }
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown provider {s}")))
    }
}

/// Source of the (normalised) prompt for each evaluation task.
pub enum PromptProvider<'a> {
    /// No prompt: the policy sees only its history.
    None,
    /// A window of a stored trajectory of the given tier.
    Trajectory { tier: Tier, data: &'a FamilyData },
    /// One precomputed prompt per task.
    Fixed {
        kind: ProviderKind,
        prompts: BTreeMap<usize, Segment>,
    },
    /// A sample from a per-task diffuser conditioned on the target return.
    Diffuser {
        models: BTreeMap<usize, Rc<Diffuser>>,
        target_rtg: f64,
        temperature: f64,
    },
}

impl PromptProvider<'_> {
    pub fn kind(&self) -> ProviderKind {
        match self {
            PromptProvider::None => ProviderKind::None,
            PromptProvider::Trajectory {
                tier: Tier::Expert, ..
            } => ProviderKind::ExpertTrajectory,
            PromptProvider::Trajectory { .. } => ProviderKind::RandomTrajectory,
            PromptProvider::Fixed { kind, .. } => *kind,
            PromptProvider::Diffuser { .. } => ProviderKind::Diffuser,
        }
    }

    pub fn prompt(
        &self,
        task: usize,
        stats: &NormStats,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Option<Segment>> {
        match self {
            PromptProvider::None => Ok(None),
            PromptProvider::Trajectory { tier, data } => {
                let set = data.fewshot(task, *tier)?;
                Ok(Some(datasets::sample_prompt(set, k, rng)?.normalize(stats)))
            }
            PromptProvider::Fixed { prompts, .. } => prompts
                .get(&task)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::Missing(format!("prompt for task {task}"))),
            PromptProvider::Diffuser {
                models,
                target_rtg,
                temperature,
            } => {
                let d = models
                    .get(&task)
                    .ok_or_else(|| Error::Missing(format!("diffuser for task {task}")))?;
                diffuser_prompt(d, stats, *target_rtg, *temperature, rng).map(Some)
            }
        }
    }
}

/// Samples one prompt conditioned on a constant (raw) return-to-go from
/// timestep 0.
pub fn diffuser_prompt(
    d: &Diffuser,
    stats: &NormStats,
    target_rtg: f64,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Segment> {
    let cond = Condition::constant(stats.rtg.normalize(target_rtg), d.config.prompt_len, 0);
    let x = d.sample(std::slice::from_ref(&cond), temperature, rng)?;
    x[0].to_segment(&cond)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: Family,
    pub provider: ProviderKind,
    pub seed: u64,
    pub config_digest: String,
    pub tasks: Vec<TaskEval>,
}

impl EvalReport {
    /// Mean over the tasks that evaluated successfully.
    pub fn mean(&self) -> f64 {
        let ok: Vec<f64> = self
            .tasks
            .iter()
            .filter(|t| t.error.is_none())
            .map(|t| t.mean_return)
            .collect();
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        }
    }

    pub fn failed(&self) -> usize {
        self.tasks.iter().filter(|t| t.error.is_some()).count()
    }

    pub fn rows(&self) -> Vec<EvalRow> {
        self.tasks
            .iter()
            .map(|t| EvalRow {
                family: self.family.to_string(),
                provider: self.provider.to_string(),
                seed: self.seed,
                task: t.task,
                episodes: t.episodes,
                mean_return: t.mean_return,
                std_return: t.std_return,
                status: t.error.clone().unwrap_or_else(|| "ok".into()),
                config_digest: self.config_digest.clone(),
            })
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} / {} / seed {}",
            self.family, self.provider, self.seed
        )?;
        for t in &self.tasks {
            match &t.error {
                None => writeln!(
                    f,
                    "  task {:>2}: {:>10.3} ± {:.3} ({} episodes)",
                    t.task, t.mean_return, t.std_return, t.episodes
                )?,
                Some(e) => writeln!(f, "  task {:>2}: failed: {e}", t.task)?,
            }
        }
        write!(f, "  mean: {:.3}", self.mean())
    }
}

/// One CSV row per task of an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub family: String,
    pub provider: String,
    pub seed: u64,
    pub task: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub status: String,
    pub config_digest: String,
}

/// Mean and population standard deviation, summed in sorted order so the
/// result does not depend on the order of `xs`.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let mut d: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    d.sort_by(f64::total_cmp);
    (m, (d.iter().sum::<f64>() / n).sqrt())
}

/// Runs `n_episodes` per task with the provider's prompt. A task whose
/// prompt or rollout fails is recorded as failed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    plm: &Plm,
    stats: &NormStats,
    provider: &PromptProvider,
    family: Family,
    tasks: &[usize],
    target_rtg: f64,
    n_episodes: usize,
    seed: u64,
) -> EvalReport {
    let k = plm.config.prompt_len;
    let tasks = tasks
        .iter()
        .map(|&task| {
            let run = || -> Result<Vec<f64>> {
                let mut r = rng::derived(seed, task as u64);
                let prompt = provider.prompt(task, stats, k, &mut r)?;
                let env = make_task(family, task)?;
                let res = prompt_dt::rollout(
                    plm,
                    stats,
                    prompt.as_ref(),
                    &env,
                    target_rtg,
                    n_episodes,
                    rng::derive_seed(seed, 1_000 + task as u64),
                )?;
                Ok(res.returns)
            };
            match run() {
                Ok(returns) => {
                    let (m, s) = mean_std(&returns);
                    TaskEval {
                        task,
                        episodes: returns.len(),
                        mean_return: m,
                        std_return: s,
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("{family} task {task}: {e}");
                    TaskEval {
                        task,
                        episodes: 0,
                        mean_return: f64::NAN,
                        std_return: f64::NAN,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    EvalReport {
        family,
        provider: provider.kind(),
        seed,
        config_digest: String::new(),
        tasks,
    }
}

fn prompt_params(p: &Segment) -> Result<ParamSet> {
    let b = StepBlock::from_segment(p)?;
    let mut ps = ParamSet::new();
    ps.add("rtg", b.rtg)?;
    ps.add("states", b.states)?;
    ps.add("actions", b.actions)?;
    Ok(ps)
}

/// Action loss of the frozen policy with `prompt` on `hist`, and its
/// gradient with respect to the prompt's rtg, state and action entries.
pub fn prompt_loss_grad(
    plm: &Plm,
    prompt: &Segment,
    hist: &[Segment],
) -> Result<(f64, Vec<Tensor>)> {
    let ps = prompt_params(prompt)?;
    let hb = StepBlock::from_segments(hist)?;
    grad(&ps, |g, v| {
        let pv = g.bind_frozen(&plm.params);
        let p = BlockVars {
            rtg: v[0],
            states: v[1],
            actions: v[2],
            timesteps: prompt.timesteps.clone(),
            batch: 1,
            len: prompt.len(),
        };
        let h = hb.constants(g);
        plm.loss_dt(g, &pv, Some(&p), &h, None)
    })
}

/// AdamW on the prompt entries only, clamped to `[-1, 1]` after every step;
/// `batch` supplies the (normalised) history windows of each step.
pub fn tune_prompt(
    plm: &Plm,
    init: &Segment,
    steps: usize,
    optimizer: AdamWConfig,
    mut batch: impl FnMut() -> Result<Vec<Segment>>,
) -> Result<Segment> {
    let mut ps = prompt_params(init)?;
    let mut opt = AdamWState::new(&ps, optimizer);
    let mut cur = init.clone();
    for _ in 0..steps {
        let hist = batch()?;
        let (_, grads) = prompt_loss_grad(plm, &cur, &hist)?;
        if grads.iter().any(|t| !t.is_finite()) {
            log::warn!("non-finite soft-prompt gradient; step skipped");
            continue;
        }
        adamw_step(&mut ps, &grads, &mut opt)?;
        for t in ps.tensors_mut() {
            *t = t.map(|v| v.clamp(-1.0, 1.0));
        }
        cur = segment_from_params(&ps, init);
    }
    Ok(cur)
}

fn segment_from_params(ps: &ParamSet, init: &Segment) -> Segment {
    let (rtg, st, ac) = (ps.get(0), ps.get(1), ps.get(2));
    let k = init.len();
    Segment {
        states: (0..k).map(|t| [st.at(t, 0), st.at(t, 1)]).collect(),
        actions: (0..k).map(|t| [ac.at(t, 0), ac.at(t, 1)]).collect(),
        rewards: init.rewards.clone(),
        rtg: rtg.data().to_vec(),
        timesteps: init.timesteps.clone(),
    }
}

/// Soft-prompt baseline: tunes `init` (normalised) on fresh history batches
/// drawn from `fewshot` (raw).
pub fn soft_prompt_tune(
    plm: &Plm,
    init: &Segment,
    fewshot: &[Trajectory],
    stats: &NormStats,
    sc: &SoftPromptConfig,
    rng: &mut Rng,
) -> Result<Segment> {
    let k = plm.config.history_len;
    tune_prompt(plm, init, sc.steps, sc.optimizer, || {
        Ok(datasets::sample_history_batch(fewshot, k, sc.batch, rng)?
            .iter()
            .map(|s| s.normalize(stats))
            .collect())
    })
}

/// Full fine-tune baseline: every policy parameter is trained on the
/// task's few-shot data.
pub fn prompt_dt_finetune(
    plm: &Plm,
    fewshot: &[Trajectory],
    stats: &NormStats,
    fc: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<Plm> {
    let mut out = plm.clone();
    let tc = PretrainConfig {
        iterations: fc.epochs * fc.steps,
        batch_size: fc.batch,
        optimizer: fc.optimizer,
        ..PretrainConfig::default()
    };
    let data = [TaskData {
        task: 0,
        prompts: fewshot.to_vec(),
        histories: fewshot.to_vec(),
    }];
    prompt_dt::train_loop(&mut out, &data, stats, &tc, rng)?;
    out.set_training(false);
    Ok(out)
}

/// Linear centred kernel alignment between two feature sets with one row
/// per sample.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    if x.rows() < 2 {
        return Err(Error::InvalidArgument(
            "linear_cka needs at least two rows".into(),
        ));
    }
    let (xc, yc) = (center_columns(x), center_columns(y));
    let xty = xc.transpose().matmul(&yc)?;
    let xtx = xc.transpose().matmul(&xc)?;
    let yty = yc.transpose().matmul(&yc)?;
    let (nx, ny) = (xtx.sum_squares().sqrt(), yty.sum_squares().sqrt());
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::InvalidArgument(
            "linear_cka input has zero variance".into(),
        ));
    }
    Ok(xty.sum_squares() / (nx * ny))
}

fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let means: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64)
        .collect();
    let data = (0..n)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| x.at(i, j) - means[j])
        .collect();
    Tensor::matrix(n, d, data).expect("same shape")
}

/// Data and pre-trained policy of one split under one seed.
#[derive(Debug)]
pub struct FamilyRun {
    pub seed: u64,
    pub data: FamilyData,
    pub plm: Plm,
    pub plm_log: Vec<prompt_dt::TrainLogRow>,
}

/// Seed streams used by the workbench, offset from the run seed.
mod stream {
    pub const PLM: u64 = 10;
    pub const PHASE1: u64 = 11;
    pub const PHASE2: u64 = 12;
    pub const EVAL: u64 = 13;
    pub const SOFT: u64 = 14;
}

/// Pre-trains the policy on a split's training tasks under `seed`.
pub fn pretrain_plm(
    data: &FamilyData,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(Plm, Vec<prompt_dt::TrainLogRow>)> {
    let (mut plm, log) = prompt_dt::pretrain(
        &config.plm,
        &data.plm_tasks()?,
        &data.stats,
        &config.plm_train,
        rng::derive_seed(seed, stream::PLM),
    )?;
    plm.set_training(false);
    Ok((plm, log))
}

/// Phase 1 of the diffuser for a split under `seed`.
pub fn phase1_diffuser(
    data: &FamilyData,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(Diffuser, Vec<GuidanceLogRow>)> {
    let s = rng::derive_seed(seed, stream::PHASE1);
    let mut d = Diffuser::new(config.diffuser.clone(), rng::derive_seed(s, 0))?;
    let log = guidance::pretrain_diffuser(
        &mut d,
        &data.corpus(),
        &data.stats,
        &config.guidance,
        &mut rng::derived(s, 1),
    )?;
    Ok((d, log))
}

/// Phase 2 of the diffuser for one task, denoising on `tiers.0` prompts
/// and guided by `tiers.1` histories. The random stream depends only on
/// `(seed, task)`, so gradient variants are compared on common random
/// numbers.
pub fn phase2_diffuser(
    base: &Diffuser,
    plm: &Plm,
    data: &FamilyData,
    task: usize,
    tiers: (Tier, Tier),
    gc: &GuidanceConfig,
    seed: u64,
) -> Result<(Diffuser, Vec<GuidanceLogRow>)> {
    let mut d = base.clone();
    let mut r = rng::derived(rng::derive_seed(seed, stream::PHASE2), task as u64);
    let log = guidance::finetune_diffuser(
        &mut d,
        plm,
        data.fewshot(task, tiers.0)?,
        data.fewshot(task, tiers.1)?,
        &data.stats,
        gc,
        &mut r,
    )?;
    Ok((d, log))
}

/// Memoises data, pre-trained policies and phase-1 diffusers across
/// experiments that share them.
pub struct Workbench {
    pub config: ExperimentConfig,
    runs: BTreeMap<(String, u64), Rc<FamilyRun>>,
    phase1: BTreeMap<(String, u64), Rc<Diffuser>>,
}

impl Workbench {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            runs: BTreeMap::new(),
            phase1: BTreeMap::new(),
        })
    }

    pub fn run(&mut self, split: &TaskSplit, seed: u64) -> Result<Rc<FamilyRun>> {
        let key = (split_name(split), seed);
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        let data = FamilyData::generate(split, &self.config.data, seed)?;
        let (plm, plm_log) = pretrain_plm(&data, &self.config, seed)?;
        let r = Rc::new(FamilyRun {
            seed,
            data,
            plm,
            plm_log,
        });
        self.runs.insert(key, r.clone());
        Ok(r)
    }

    /// Phase-1 (denoising only) diffuser on the split's training corpus.
    pub fn phase1(&mut self, split: &TaskSplit, seed: u64) -> Result<Rc<Diffuser>> {
        let key = (split_name(split), seed);
        if let Some(d) = self.phase1.get(&key) {
            return Ok(d.clone());
        }
        let run = self.run(split, seed)?;
        let (d, _) = phase1_diffuser(&run.data, &self.config, seed)?;
        let d = Rc::new(d);
        self.phase1.insert(key, d.clone());
        Ok(d)
    }

    /// Phase 2 for one task from the shared phase-1 model.
    pub fn finetuned(
        &mut self,
        split: &TaskSplit,
        seed: u64,
        task: usize,
        prompt_tier: Tier,
        history_tier: Tier,
        gc: &GuidanceConfig,
    ) -> Result<Diffuser> {
        let base = self.phase1(split, seed)?;
        let run = self.run(split, seed)?;
        let (d, _) = phase2_diffuser(
            &base,
            &run.plm,
            &run.data,
            task,
            (prompt_tier, history_tier),
            gc,
            seed,
        )?;
        Ok(d)
    }

    pub fn target_rtg(&self, family: Family) -> f64 {
        self.config.eval.target_rtg.get(family)
    }

    /// Evaluates `provider` on the split's evaluation tasks.
    pub fn evaluate(&self, run: &FamilyRun, provider: &PromptProvider) -> EvalReport {
        let split = &run.data.split;
        let mut rep = evaluate(
            &run.plm,
            &run.data.stats,
            provider,
            split.family,
            split.eval_tasks(),
            self.target_rtg(split.family),
            self.config.eval.episodes,
            rng::derive_seed(run.seed, stream::EVAL),
        );
        rep.config_digest = self.config.digest();
        rep
    }

    /// Diffuser provider over the given per-task models.
    pub fn diffuser_provider(
        &self,
        family: Family,
        models: BTreeMap<usize, Rc<Diffuser>>,
    ) -> PromptProvider<'static> {
        PromptProvider::Diffuser {
            models,
            target_rtg: self.target_rtg(family),
            temperature: self.config.diffuser.temperature,
        }
    }

    /// Soft prompts for the run's evaluation tasks.
    pub fn soft_prompts(
        &self,
        run: &FamilyRun,
        init_tier: Tier,
        data_tier: Tier,
    ) -> Result<BTreeMap<usize, Segment>> {
        soft_prompts(
            &run.plm,
            &run.data,
            (init_tier, data_tier),
            &self.config.soft_prompt,
            rng::derive_seed(run.seed, stream::SOFT),
        )
    }
}

/// Soft prompts initialised from a `tiers.0` window and tuned on `tiers.1`
/// few-shot data, one per evaluation task of the split.
pub fn soft_prompts(
    plm: &Plm,
    data: &FamilyData,
    tiers: (Tier, Tier),
    sc: &SoftPromptConfig,
    seed: u64,
) -> Result<BTreeMap<usize, Segment>> {
    let k = plm.config.prompt_len;
    data.split
        .eval_tasks()
        .iter()
        .map(|&task| {
            let mut r = rng::derived(seed, task as u64);
            let init = datasets::sample_prompt(data.fewshot(task, tiers.0)?, k, &mut r)?
                .normalize(&data.stats);
            let tuned = soft_prompt_tune(
                plm,
                &init,
                data.fewshot(task, tiers.1)?,
                &data.stats,
                sc,
                &mut r,
            )?;
            Ok((task, tuned))
        })
        .collect()
}
