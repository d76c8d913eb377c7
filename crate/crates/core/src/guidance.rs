//! Downstream guidance through the reverse chain, conflict-aware gradient
//! projection and the two-phase diffuser training loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{self, NormStats, Segment, Trajectory};
use crate::diffuser::{
    sample_chain, ChainNoise, CondBatch, Condition, Diffuser, DmBatch, EpsModel, NoiseSchedule,
    PromptTensor, CHANNELS,
};
use crate::envs::{ACTION_DIM, STATE_DIM};
use crate::numerics::{
    adamw_step, clip_global_norm, global_norm, grad, AdamWConfig, AdamWState, Graph, Tensor, Var,
};
use crate::prompt_dt::{BlockVars, Plm, StepBlock};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Norm below which a denoising gradient counts as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// All parameter gradients concatenated in `ParamSet` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGrad {
    pub values: Vec<f64>,
    shapes: Vec<Vec<usize>>,
}

impl FlatGrad {
    pub fn flatten(grads: &[Tensor]) -> Self {
        Self {
            values: grads
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect(),
            shapes: grads.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    /// Same layout as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "FlatGrad",
                &[values.len()],
                &[self.values.len()],
            ));
        }
        Ok(Self {
            values,
            shapes: self.shapes.clone(),
        })
    }

    pub fn scatter(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for s in &self.shapes {
            let n: usize = s.iter().product();
            out.push(Tensor::new(s.clone(), self.values[off..off + n].to_vec()).expect("layout"));
            off += n;
        }
        out
    }

    /// Element ranges of each parameter tensor.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        self.shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                off += n;
                off - n..off
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `cos` of the angle between two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Removes from `g_dt` its component along `g_dm`. A near-zero `g_dm`
/// leaves `g_dt` unchanged.
pub fn project(g_dt: &[f64], g_dm: &[f64]) -> Vec<f64> {
    let nn = dot(g_dm, g_dm);
    if nn.sqrt() < ZERO_NORM {
        log::warn!("denoising gradient norm below {ZERO_NORM:e}; projection skipped");
        return g_dt.to_vec();
    }
    let c = dot(g_dt, g_dm) / nn;
    g_dt.iter().zip(g_dm).map(|(t, m)| t - c * m).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Conflict,
    Aligned,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Conflict => "conflict",
            Branch::Aligned => "aligned",
        })
    }
}

/// `g_dm + λ·project(g_dt, g_dm)` when the gradients conflict
/// (`g_dm·g_dt < 0`), else `g_dm + λ·g_dt`.
pub fn combine(g_dm: &[f64], g_dt: &[f64], lambda: f64) -> (Vec<f64>, Branch) {
    let (dir, branch) = if dot(g_dm, g_dt) < 0.0 {
        (project(g_dt, g_dm), Branch::Conflict)
    } else {
        (g_dt.to_vec(), Branch::Aligned)
    };
    (
        g_dm.iter().zip(&dir).map(|(m, d)| m + lambda * d).collect(),
        branch,
    )
}

/// Gradient rule used for the diffuser update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradientVariant {
    /// Denoising gradient only.
    #[serde(rename = "dm-only")]
    DmOnly,
    /// Guidance gradient only.
    #[serde(rename = "dt-only")]
    DtOnly,
    /// Plain sum of both gradients.
    #[serde(rename = "naive-sum")]
    NaiveSum,
    /// Conflict-aware projection, see [`combine`].
    #[serde(rename = "projected")]
    Projected,
}

impl GradientVariant {
    pub const ALL: [GradientVariant; 4] = [
        GradientVariant::DmOnly,
        GradientVariant::DtOnly,
        GradientVariant::NaiveSum,
        GradientVariant::Projected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradientVariant::DmOnly => "dm-only",
            GradientVariant::DtOnly => "dt-only",
            GradientVariant::NaiveSum => "naive-sum",
            GradientVariant::Projected => "projected",
        }
    }

    pub fn needs_guidance(self) -> bool {
        self != GradientVariant::DmOnly
    }

    /// Update direction and, for the projected rule, the branch taken.
    pub fn apply(self, g_dm: &[f64], g_dt: &[f64], lambda: f64) -> (Vec<f64>, Option<Branch>) {
        match self {
            GradientVariant::DmOnly => (g_dm.to_vec(), None),
            GradientVariant::DtOnly => (g_dt.to_vec(), None),
            GradientVariant::NaiveSum => {
                (g_dm.iter().zip(g_dt).map(|(a, b)| a + b).collect(), None)
            }
            GradientVariant::Projected => {
                let (v, b) = combine(g_dm, g_dt, lambda);
                (v, Some(b))
            }
        }
    }
}

impl fmt::Display for GradientVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradientVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient variant {s}")))
    }
}

/// [`combine`] applied to each parameter tensor separately.
pub fn combine_per_tensor(g_dm: &FlatGrad, g_dt: &FlatGrad, lambda: f64) -> (Vec<f64>, Branch) {
    let mut out = Vec::with_capacity(g_dm.len());
    let mut conflicts = 0;
    for r in g_dm.segments() {
        let (v, b) = combine(&g_dm.values[r.clone()], &g_dt.values[r], lambda);
        if b == Branch::Conflict {
            conflicts += 1;
        }
        out.extend(v);
    }
    let branch = if 2 * conflicts > g_dm.segments().len() {
        Branch::Conflict
    } else {
        Branch::Aligned
    };
    (out, branch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub variant: GradientVariant,
    /// Project each parameter tensor separately instead of the whole
    /// flattened gradient.
    pub per_tensor: bool,
    /// Sampling temperature inside the differentiated chain.
    pub temperature: f64,
    pub dm_batch: usize,
    pub history_batch: usize,
    pub pretrain_iterations: usize,
    pub finetune_epochs: usize,
    pub finetune_steps: usize,
    pub clip_norm: f64,
    pub pretrain_optimizer: AdamWConfig,
    pub finetune_optimizer: AdamWConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            variant: GradientVariant::Projected,
            per_tensor: false,
            temperature: 0.5,
            dm_batch: 32,
            history_batch: 32,
            pretrain_iterations: 5000,
            finetune_epochs: 20,
            finetune_steps: 100,
            clip_norm: 0.25,
            pretrain_optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            finetune_optimizer: AdamWConfig::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=5.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 5]",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 1)",
                self.temperature
            )));
        }
        if self.dm_batch == 0 || self.history_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Generated prompt on the tape: `(s, a)` from the chain output `x`
/// (`1 × D`), rtg and timesteps from the condition.
pub fn prompt_vars(g: &mut Graph, x: Var, cond: &Condition) -> Result<BlockVars> {
    let k = cond.len();
    if g.value(x).len() != CHANNELS * k {
        return Err(Error::shape(
            "prompt_vars",
            g.value(x).shape(),
            &[1, CHANNELS * k],
        ));
    }
    let rows = |from: usize, n: usize, g: &mut Graph| -> Result<Var> {
        let parts = (from..from + n)
            .map(|c| g.slice_cols(x, c * k, k))
            .collect::<Result<Vec<_>>>()?;
        let m = g.concat_rows(&parts)?;
        Ok(g.transpose(m))
    };
    let states = rows(0, STATE_DIM, g)?;
    let actions = rows(STATE_DIM, ACTION_DIM, g)?;
    let rtg = g.constant(Tensor::matrix(k, 1, cond.rtg.clone())?);
    Ok(BlockVars {
        rtg,
        states,
        actions,
        timesteps: cond.timesteps.clone(),
        batch: 1,
        len: k,
    })
}

/// Action loss of the frozen policy when prompted with the chain's sample.
#[allow(clippy::too_many_arguments)]
pub fn guidance_loss<M: EpsModel>(
    m: &M,
    g: &mut Graph,
    vars: &[Var],
    plm: &Plm,
    plm_vars: &[Var],
    cond: &Condition,
    hist: &BlockVars,
    sched: &NoiseSchedule,
    temperature: f64,
    noise: &ChainNoise,
) -> Result<Var> {
    let cb = CondBatch::repeat(cond, 1)?;
    let x = sample_chain(m, g, vars, &cb, sched, temperature, noise)?;
    let p = prompt_vars(g, x, cond)?;
    plm.loss_dt(g, plm_vars, Some(&p), hist, None)
}

/// Value and diffuser-parameter gradient of [`guidance_loss`]; the policy
/// is bound frozen.
pub fn guidance_grad(
    diff: &Diffuser,
    plm: &Plm,
    cond: &Condition,
    hist: &[Segment],
    temperature: f64,
    noise: &ChainNoise,
) -> Result<(f64, Vec<Tensor>)> {
    let block = StepBlock::from_segments(hist)?;
    grad(&diff.params, |g, v| {
        let pv = g.bind_frozen(&plm.params);
        let hv = block.constants(g);
        guidance_loss(
            &diff.net,
            g,
            v,
            plm,
            &pv,
            cond,
            &hv,
            &diff.schedule,
            temperature,
            &noise.clone(),
        )
    })
}

/// One minibatch for a guided update, all randomness drawn up front.
#[derive(Clone, Debug)]
pub struct StepSample {
    pub dm: DmBatch,
    pub cond: Condition,
    pub hist: Vec<Segment>,
    pub noise: ChainNoise,
}

impl StepSample {
    /// Prompts from `prompts` and history windows from `histories` (raw,
    /// normalised here). The guidance chain starts from the noise drawn for
    /// the first prompt of the denoising batch.
    pub fn draw(
        prompts: &[Trajectory],
        histories: &[Trajectory],
        stats: &NormStats,
        diff: &Diffuser,
        plm_history: usize,
        gc: &GuidanceConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let k = diff.config.prompt_len;
        let segs: Vec<Segment> = (0..gc.dm_batch)
            .map(|_| datasets::sample_prompt(prompts, k, rng).map(|s| s.normalize(stats)))
            .collect::<Result<_>>()?;
        let xs: Vec<PromptTensor> = segs.iter().map(PromptTensor::from_segment).collect();
        let conds: Vec<Condition> = segs.iter().map(Condition::from_segment).collect();
        let dm = DmBatch::draw(&xs, &conds, diff.schedule.n(), rng)?;
        let hist = datasets::sample_history_batch(histories, plm_history, gc.history_batch, rng)?
            .iter()
            .map(|s| s.normalize(stats))
            .collect();
        let d = diff.config.prompt_dim();
        let mut noise = ChainNoise::draw(rng, 1, d, diff.schedule.n())?;
        noise.x_n = Tensor::matrix(1, d, dm.eps.data()[..d].to_vec())?;
        Ok(Self {
            cond: conds[0].clone(),
            dm,
            hist,
            noise,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuidanceLogRow {
    pub phase: u8,
    pub iteration: usize,
    pub loss_dm: f64,
    pub loss_dt: f64,
    pub cos_angle: f64,
    pub branch_taken: String,
    pub grad_norm_dm: f64,
    pub grad_norm_dt: f64,
    pub skipped: bool,
    pub wall_ms: u128,
}

/// Outcome of one [`train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss_dm: f64,
    pub loss_dt: f64,
    pub cos_angle: f64,
    pub branch: Option<Branch>,
    pub grad_norm_dm: f64,
    pub grad_norm_dt: f64,
    pub skipped: bool,
}

/// Denoising and guidance gradients on the same sample, combined by the
/// configured rule, clipped and applied with AdamW. Non-finite gradients
/// skip the update.
pub fn train_step(
    diff: &mut Diffuser,
    plm: &Plm,
    sample: &StepSample,
    gc: &GuidanceConfig,
    opt: &mut AdamWState,
) -> Result<StepReport> {
    let (loss_dm, g_dm) = diff.loss_dm_grad(&sample.dm)?;
    let g_dm = FlatGrad::flatten(&g_dm);
    let (loss_dt, g_dt) = if gc.variant.needs_guidance()
        && !(gc.lambda == 0.0 && gc.variant == GradientVariant::Projected)
    {
        match guidance_grad(
            diff,
            plm,
            &sample.cond,
            &sample.hist,
            gc.temperature,
            &sample.noise,
        ) {
            Ok((l, g)) => (l, FlatGrad::flatten(&g)),
            Err(Error::NonFinite(_)) => (f64::NAN, g_dm.with_values(vec![f64::NAN; g_dm.len()])?),
            Err(e) => return Err(e),
        }
    } else {
        (f64::NAN, g_dm.with_values(vec![0.0; g_dm.len()])?)
    };
    let mut report = StepReport {
        loss_dm,
        loss_dt,
        cos_angle: cosine(&g_dm.values, &g_dt.values),
        branch: None,
        grad_norm_dm: g_dm.norm(),
        grad_norm_dt: g_dt.norm(),
        skipped: false,
    };
    if !g_dm.is_finite() || !g_dt.is_finite() {
        report.skipped = true;
        return Ok(report);
    }
    let (update, branch) = if gc.per_tensor && gc.variant == GradientVariant::Projected {
        let (v, b) = combine_per_tensor(&g_dm, &g_dt, gc.lambda);
        (v, Some(b))
    } else {
        gc.variant.apply(&g_dm.values, &g_dt.values, gc.lambda)
    };
    report.branch = branch;
    let mut grads = g_dm.with_values(update)?.scatter();
    clip_global_norm(&mut grads, gc.clip_norm);
    adamw_step(&mut diff.params, &grads, opt)?;
    Ok(report)
}

/// Phase 1: denoising loss only, prompts from the training corpus. The
/// learning rate follows a cosine decay to zero.
pub fn pretrain_diffuser(
    diff: &mut Diffuser,
    corpus: &[Trajectory],
    stats: &NormStats,
    gc: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Vec<GuidanceLogRow>> {
    if corpus.is_empty() {
        return Err(Error::Missing("diffuser training corpus".into()));
    }
    let start = Instant::now();
    let mut opt = AdamWState::new(&diff.params, gc.pretrain_optimizer);
    let k = diff.config.prompt_len;
    let mut log = Vec::with_capacity(gc.pretrain_iterations);
    let base_lr = gc.pretrain_optimizer.lr;
    for it in 0..gc.pretrain_iterations {
        opt.config.lr = cosine_lr(base_lr, it, gc.pretrain_iterations);
        let segs: Vec<Segment> = (0..gc.dm_batch)
            .map(|_| datasets::sample_prompt(corpus, k, rng).map(|s| s.normalize(stats)))
            .collect::<Result<_>>()?;
        let prompts: Vec<PromptTensor> = segs.iter().map(PromptTensor::from_segment).collect();
        let conds: Vec<Condition> = segs.iter().map(Condition::from_segment).collect();
        let batch = DmBatch::draw(&prompts, &conds, diff.schedule.n(), rng)?;
        let (loss, mut grads) = diff.loss_dm_grad(&batch)?;
        let norm = global_norm(&grads);
        let skipped = !norm.is_finite();
        if !skipped {
            clip_global_norm(&mut grads, gc.clip_norm);
            adamw_step(&mut diff.params, &grads, &mut opt)?;
        }
        log.push(GuidanceLogRow {
            phase: 1,
            iteration: it,
            loss_dm: loss,
            loss_dt: f64::NAN,
            cos_angle: f64::NAN,
            branch_taken: "none".into(),
            grad_norm_dm: norm,
            grad_norm_dt: f64::NAN,
            skipped,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(log)
}

pub fn cosine_lr(base: f64, it: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * it as f64 / total.max(1) as f64).cos())
}

/// Phase 2: guided fine-tuning on one task's few-shot data. The denoising
/// loss sees windows of `prompts`, the guidance loss windows of `histories`.
pub fn finetune_diffuser(
    diff: &mut Diffuser,
    plm: &Plm,
    prompts: &[Trajectory],
    histories: &[Trajectory],
    stats: &NormStats,
    gc: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Vec<GuidanceLogRow>> {
    let start = Instant::now();
    let mut opt = AdamWState::new(&diff.params, gc.finetune_optimizer);
    let total = gc.finetune_epochs * gc.finetune_steps;
    let mut log = Vec::with_capacity(total);
    let mut skipped = 0usize;
    for it in 0..total {
        let sample = StepSample::draw(
            prompts,
            histories,
            stats,
            diff,
            plm.config.history_len,
            gc,
            rng,
        )?;
        let r = train_step(diff, plm, &sample, gc, &mut opt)?;
        if r.skipped {
            skipped += 1;
            log::warn!(
                "non-finite gradient at fine-tune step {it}; update skipped ({skipped} so far)"
            );
        }
        log.push(GuidanceLogRow {
            phase: 2,
            iteration: it,
            loss_dm: r.loss_dm,
            loss_dt: r.loss_dt,
            cos_angle: r.cos_angle,
            branch_taken: r.branch.map_or("none".to_string(), |b| b.to_string()),
            grad_norm_dm: r.grad_norm_dm,
            grad_norm_dt: r.grad_norm_dt,
            skipped: r.skipped,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(log)
}

/// Both phases. Without few-shot data the second phase is skipped and the
/// phase-1 model is returned (zero-shot).
#[allow(clippy::too_many_arguments)]
pub fn train_prompt_diffuser(
    config: &crate::diffuser::DiffuserConfig,
    corpus: &[Trajectory],
    fewshot: Option<&[Trajectory]>,
    plm: &Plm,
    stats: &NormStats,
    gc: &GuidanceConfig,
    seed: u64,
) -> Result<(Diffuser, Vec<GuidanceLogRow>)> {
    gc.validate()?;
    let mut diff = Diffuser::new(config.clone(), rng::derive_seed(seed, 0))?;
    let mut r1 = rng::derived(seed, 1);
    let mut log = pretrain_diffuser(&mut diff, corpus, stats, gc, &mut r1)?;
    match fewshot.filter(|f| !f.is_empty()) {
        Some(f) => {
            let mut r2 = rng::derived(seed, 2);
            log.extend(finetune_diffuser(&mut diff, plm, f, f, stats, gc, &mut r2)?);
        }
        None => log::warn!("no few-shot data; fine-tuning skipped (zero-shot)"),
    }
    Ok((diff, log))
}

/// `L(x) = Σ a_i (x_i − c_i)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub weights: Vec<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .zip(&self.weights)
            .map(|((x, c), a)| a * (x - c) * (x - c))
            .sum()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.weights)
            .map(|((x, c), a)| 2.0 * a * (x - c))
            .collect()
    }

    /// Lipschitz constant of the gradient.
    pub fn lipschitz(&self) -> f64 {
        2.0 * self.weights.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRun {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub iterations: usize,
    pub cos_angle: f64,
    pub sum_grad_norm: f64,
    pub satisfied: bool,
}

/// Runs the projected rule with `λ = 1` on `(L₁, L₂)` from each start until
/// the gradients are opposed (`cos ≤ −1 + tol`) or the summed gradient
/// vanishes (`‖∇(L₁ + L₂)‖ ≤ tol`), or `iters` runs out.
pub fn convergence_check(
    l1: &Quadratic,
    l2: &Quadratic,
    starts: &[Vec<f64>],
    step: f64,
    iters: usize,
    tol: f64,
) -> Vec<ConvergenceRun> {
    starts
        .iter()
        .map(|s| {
            let mut x = s.clone();
            let mut it = 0;
            loop {
                let (g1, g2) = (l1.grad(&x), l2.grad(&x));
                let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
                let cos = cosine(&g1, &g2);
                let sn = norm(&sum);
                let done = sn <= tol || (norm(&g1) > 0.0 && norm(&g2) > 0.0 && cos <= -1.0 + tol);
                if done || it == iters {
                    return ConvergenceRun {
                        start: s.clone(),
                        end: x,
                        iterations: it,
                        cos_angle: cos,
                        sum_grad_norm: sn,
                        satisfied: done,
                    };
                }
                let (u, _) = combine(&g1, &g2, 1.0);
                for (xi, ui) in x.iter_mut().zip(&u) {
                    *xi -= step * ui;
                }
                it += 1;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffuser::DiffuserConfig;
    use crate::numerics::gradcheck::{central_difference, max_relative_error};
    use crate::prompt_dt::PlmConfig;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project(&[-1.0, 1.0], &[1.0, 0.0]), vec![0.0, 1.0]);
        let p = project(&[2.0, 4.0], &[1.0, 2.0]);
        assert!(p.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(project(&[3.0, -1.0], &[0.0, 0.0]), vec![3.0, -1.0]);
    }

    #[test]
    fn combine_examples() {
        assert_eq!(
            combine(&[1.0, 0.0], &[1.0, 1.0], 1.0),
            (vec![2.0, 1.0], Branch::Aligned)
        );
        assert_eq!(
            combine(&[1.0, 0.0], &[-1.0, 1.0], 1.0),
            (vec![1.0, 1.0], Branch::Conflict)
        );
        assert_eq!(combine(&[1.5, -2.0], &[-1.0, 1.0], 0.0).0, vec![1.5, -2.0]);
        assert_eq!(combine(&[1.5, -2.0], &[1.0, 1.0], 0.0).0, vec![1.5, -2.0]);
    }

    #[test]
    fn variants_select_expected_rules() {
        let (dm, dt) = ([1.0, 2.0], [-3.0, 0.5]);
        assert_eq!(GradientVariant::DmOnly.apply(&dm, &dt, 1.0).0, dm.to_vec());
        assert_eq!(GradientVariant::DtOnly.apply(&dm, &dt, 1.0).0, dt.to_vec());
        assert_eq!(
            GradientVariant::NaiveSum.apply(&dm, &dt, 1.0).0,
            vec![-2.0, 2.5]
        );
        assert_eq!(
            GradientVariant::Projected.apply(&dm, &dt, 1.0).0,
            combine(&dm, &dt, 1.0).0
        );
        for v in GradientVariant::ALL {
            assert_eq!(v.name().parse::<GradientVariant>().unwrap(), v);
        }
    }

    #[test]
    fn flat_grad_scatter_inverts_flatten() {
        let ts = vec![
            Tensor::matrix(2, 3, (0..6).map(f64::from).collect()).unwrap(),
            Tensor::vector(vec![7.0, 8.0]),
        ];
        let f = FlatGrad::flatten(&ts);
        assert_eq!(f.len(), 8);
        assert_eq!(f.scatter(), ts);
        assert_eq!(f.segments(), vec![0..6, 6..8]);
    }

    #[test]
    fn high_dimensional_orthogonality() {
        let mut r = rng::seeded(11);
        for _ in 0..5 {
            let a = rng::normal_vec(&mut r, 10_000);
            let b = rng::normal_vec(&mut r, 10_000);
            let p = project(&a, &b);
            assert!(dot(&p, &b).abs() <= 1e-9 * norm(&a) * norm(&b));
        }
    }

    proptest! {
        #[test]
        fn projection_properties(
            dm in proptest::collection::vec(-5.0f64..5.0, 2..30),
            seed in 0u64..1000,
            lambda in 0.0f64..5.0,
        ) {
            prop_assume!(norm(&dm) > 1e-3);
            let mut r = rng::seeded(seed);
            let dt: Vec<f64> = rng::normal_vec(&mut r, dm.len());
            let p = project(&dt, &dm);
            prop_assert!(dot(&p, &dm).abs() <= 1e-9 * norm(&dt) * norm(&dm) + 1e-300);
            prop_assert!(norm(&p) <= norm(&dt) * (1.0 + 1e-12));
            let (u, b) = combine(&dm, &dt, lambda);
            if b == Branch::Conflict {
                let lhs = dot(&u, &dm);
                let rhs = dot(&dm, &dm);
                prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
            }
        }
    }

    #[test]
    fn convergence_two_quadratics() {
        let l1 = Quadratic {
            weights: vec![1.0, 1.0],
            center: vec![0.0, 0.0],
        };
        let l2 = Quadratic {
            weights: vec![1.0, 1.0],
            center: vec![1.0, 0.0],
        };
        let mut r = rng::seeded(0);
        let starts: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                use rand::Rng as _;
                vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]
            })
            .collect();
        // well below 1/L; see one_sided_projection_can_cycle
        let step = 0.02;
        for run in convergence_check(&l1, &l2, &starts, step, 100_000, 1e-3) {
            assert!(run.satisfied, "{run:?}");
        }
        let same = convergence_check(&l1, &l1, &[vec![1.5, -0.5]], step, 100_000, 1e-3);
        assert!(same[0].satisfied && norm(&same[0].end) < 1e-3);
    }

    // Only g_dt is projected, so the update need not descend L₁ + L₂. From
    // these starts the iterate zigzags across the segment between the minima
    // with neither condition met, although step = 1/L. A small step reaches
    // cos ≈ −1.
    #[test]
    fn one_sided_projection_can_cycle() {
        let cases = [
            (
                Quadratic {
                    weights: vec![1.0, 1.0],
                    center: vec![0.0, 0.0],
                },
                Quadratic {
                    weights: vec![1.0, 1.0],
                    center: vec![1.0, 0.0],
                },
                vec![0.61546404, -0.275093],
                4.0,
            ),
            (
                Quadratic {
                    weights: vec![2.0, 0.5, 1.0],
                    center: vec![1.0, -1.0, 0.5],
                },
                Quadratic {
                    weights: vec![0.7, 3.0, 1.5],
                    center: vec![-0.5, 0.5, 2.0],
                },
                vec![2.370896023266244, -1.6933446326864448, 0.7406680267820338],
                7.0,
            ),
        ];
        for (l1, l2, start, lip) in cases {
            let stuck = &convergence_check(
                &l1,
                &l2,
                std::slice::from_ref(&start),
                1.0 / lip,
                20_000,
                1e-3,
            )[0];
            assert!(!stuck.satisfied);
            assert!(
                stuck.cos_angle > -0.95 && stuck.sum_grad_norm > 0.1,
                "{stuck:?}"
            );
            let small = &convergence_check(&l1, &l2, &[start], 0.02, 20_000, 1e-3)[0];
            assert!(
                small.satisfied && small.cos_angle <= -1.0 + 1e-3,
                "{small:?}"
            );
        }
    }

    fn tiny_plm() -> Plm {
        Plm::new(
            PlmConfig {
                layers: 1,
                heads: 1,
                dim: 4,
                dropout: 0.1,
                prompt_len: 1,
                history_len: 2,
                max_timestep: 50,
                mlp_ratio: 2,
            },
            3,
        )
        .unwrap()
    }

    fn tiny_diffuser(steps: usize) -> Diffuser {
        sized_diffuser(steps, 6)
    }

    fn sized_diffuser(steps: usize, hidden: usize) -> Diffuser {
        Diffuser::new(
            DiffuserConfig {
                steps,
                hidden,
                time_embed_dim: 2,
                step_embed_dim: 2,
                prompt_len: 1,
                max_timestep: 50,
                temperature: 0.5,
            },
            4,
        )
        .unwrap()
    }

    fn seg(len: usize, seed: u64) -> Segment {
        let mut r = rng::seeded(seed);
        let v: Vec<f64> = rng::normal_vec(&mut r, 6 * len)
            .iter()
            .map(|x| 0.5 * x.tanh())
            .collect();
        Segment {
            states: (0..len).map(|t| [v[6 * t], v[6 * t + 1]]).collect(),
            actions: (0..len).map(|t| [v[6 * t + 2], v[6 * t + 3]]).collect(),
            rewards: (0..len).map(|t| v[6 * t + 4]).collect(),
            rtg: (0..len).map(|t| v[6 * t + 5]).collect(),
            timesteps: (3..3 + len).collect(),
        }
    }

    #[test]
    fn generated_prompt_composition_matches_policy_loss() {
        let plm = tiny_plm();
        let p = seg(1, 0);
        let cond = Condition::from_segment(&p);
        let hist = [seg(2, 1), seg(2, 2)];
        let pt = PromptTensor::from_segment(&p);
        let mut g = Graph::new();
        let pv = g.bind_frozen(&plm.params);
        let x = g.constant(Tensor::matrix(1, pt.dim(), pt.data().to_vec()).unwrap());
        let prompt = prompt_vars(&mut g, x, &cond).unwrap();
        let hv = StepBlock::from_segments(&hist).unwrap().constants(&mut g);
        let l = plm.loss_dt(&mut g, &pv, Some(&prompt), &hv, None).unwrap();
        assert_eq!(
            g.value(l).item(),
            plm.loss_dt_batch(Some(&p), &hist).unwrap()
        );
    }

    #[test]
    fn guidance_gradient_matches_central_difference() {
        let plm = tiny_plm();
        let diff = tiny_diffuser(2);
        let cond = Condition::from_segment(&seg(1, 5));
        let hist = [seg(2, 6), seg(2, 7)];
        let mut r = rng::seeded(8);
        let mut noise = ChainNoise::draw(&mut r, 1, 5, 2).unwrap();
        // keep the start inside the clamp so the check is informative
        noise.x_n = noise.x_n.map(|v| 0.05 * v);
        let (_, analytic) = guidance_grad(&diff, &plm, &cond, &hist, 0.5, &noise).unwrap();
        let numeric = central_difference(&diff.params, 1e-5, |p| {
            let mut d = diff.clone();
            d.params = p.clone();
            Ok(guidance_grad(&d, &plm, &cond, &hist, 0.5, &noise)?.0)
        })
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "{err:e}");
        assert!(analytic.iter().any(|t| t.max_abs() > 0.0));
    }

    fn step_fixture() -> (Diffuser, Plm, StepSample) {
        let plm = tiny_plm();
        let mut diff = sized_diffuser(50, 32);
        let mut r = rng::seeded(1);
        let data: Vec<Trajectory> = (0..2)
            .map(|i| {
                let task = crate::envs::make_task(crate::envs::Family::Vel, i).unwrap();
                datasets::collect(&task, crate::envs::Tier::Medium, 1, i as u64)
                    .unwrap()
                    .remove(0)
            })
            .collect();
        let gc = GuidanceConfig {
            dm_batch: 4,
            history_batch: 2,
            ..GuidanceConfig::default()
        };
        let stats = datasets::fit_norm_stats(&data).unwrap();
        // an untrained chain saturates the output clamp and has no guidance gradient
        let warm = GuidanceConfig {
            pretrain_iterations: 300,
            dm_batch: 16,
            ..GuidanceConfig::default()
        };
        pretrain_diffuser(&mut diff, &data, &stats, &warm, &mut r).unwrap();
        let s = StepSample::draw(&data, &data, &stats, &diff, 2, &gc, &mut r).unwrap();
        (diff, plm, s)
    }

    #[test]
    fn lambda_zero_equals_dm_only_step() {
        let (diff, plm, s) = step_fixture();
        let run = |variant, lambda| {
            let mut d = diff.clone();
            let gc = GuidanceConfig {
                variant,
                lambda,
                ..GuidanceConfig::default()
            };
            let mut opt = AdamWState::new(&d.params, gc.finetune_optimizer);
            let r = train_step(&mut d, &plm, &s, &gc, &mut opt).unwrap();
            (d.params, r.grad_norm_dt)
        };
        let (a, _) = run(GradientVariant::Projected, 0.0);
        let (b, _) = run(GradientVariant::DmOnly, 1.0);
        assert_eq!(a, b);
        assert_ne!(a, diff.params);
        let (c, norm_dt) = run(GradientVariant::Projected, 1.0);
        assert!(norm_dt > 0.0, "{norm_dt}");
        assert_ne!(c, a);
    }

    #[test]
    fn train_step_is_deterministic() {
        let (diff, plm, s) = step_fixture();
        let gc = GuidanceConfig::default();
        let go = || {
            let mut d = diff.clone();
            let mut opt = AdamWState::new(&d.params, gc.finetune_optimizer);
            let r = train_step(&mut d, &plm, &s, &gc, &mut opt).unwrap();
            (d.params, r)
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn phase1_loss_decreases_on_dir1d_prompts() {
        let corpus: Vec<Trajectory> = (0..2)
            .flat_map(|i| {
                let task = crate::envs::make_task(crate::envs::Family::Dir1d, i).unwrap();
                crate::envs::Tier::ALL
                    .into_iter()
                    .flat_map(move |tier| datasets::collect(&task, tier, 3, i as u64).unwrap())
            })
            .collect();
        let stats = datasets::fit_norm_stats(&corpus).unwrap();
        let mut d = sized_diffuser(50, 32);
        let gc = GuidanceConfig {
            pretrain_iterations: 400,
            dm_batch: 16,
            ..GuidanceConfig::default()
        };
        let log = pretrain_diffuser(&mut d, &corpus, &stats, &gc, &mut rng::seeded(2)).unwrap();
        let mean = |rows: &[GuidanceLogRow]| {
            rows.iter().map(|r| r.loss_dm).sum::<f64>() / rows.len() as f64
        };
        let (first, last) = (mean(&log[..50]), mean(&log[350..]));
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_shot_training_yields_finite_samples() {
        let plm = tiny_plm();
        let task = crate::envs::make_task(crate::envs::Family::Dir1d, 0).unwrap();
        let corpus = datasets::collect(&task, crate::envs::Tier::Medium, 2, 0).unwrap();
        let stats = datasets::fit_norm_stats(&corpus).unwrap();
        let gc = GuidanceConfig {
            pretrain_iterations: 3,
            dm_batch: 4,
            ..GuidanceConfig::default()
        };
        let (d, log) = train_prompt_diffuser(
            &tiny_diffuser(3).config,
            &corpus,
            None,
            &plm,
            &stats,
            &gc,
            1,
        )
        .unwrap();
        assert_eq!(log.len(), 3);
        let mut r = rng::seeded(0);
        let out = d
            .sample(&[Condition::constant(0.5, 1, 0)], 0.5, &mut r)
            .unwrap();
        assert!(out[0].data().iter().all(|v| v.is_finite()));
        let (d2, _) = train_prompt_diffuser(
            &tiny_diffuser(3).config,
            &corpus,
            None,
            &plm,
            &stats,
            &gc,
            1,
        )
        .unwrap();
        assert_eq!(d.params, d2.params);
    }
}
