//! Prompt-conditioned decision transformer.
//!
//! Input is a trajectory prompt of `K*` steps followed by the latest `K`
//! history steps, each step contributing an (rtg, state, action) token
//! triple. A causal transformer reads the sequence and a tanh head predicts
//! the action at every state token.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{self, NormStats, Segment, Trajectory};
use crate::envs::{EnvState, Environment, ACTION_DIM, STATE_DIM};
use crate::numerics::layers::{CausalSelfAttention, Embedding, LayerNorm, Linear};
use crate::numerics::{
    adamw_step, clip_global_norm, AdamWConfig, AdamWState, Checkpoint, Graph, ParamSet, Tensor, Var,
};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlmConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub dropout: f64,
    /// `K*`
    pub prompt_len: usize,
    /// `K`
    pub history_len: usize,
    /// Timesteps must lie in `0..max_timestep`.
    pub max_timestep: usize,
    pub mlp_ratio: usize,
}

impl Default for PlmConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 1,
            dim: 128,
            dropout: 0.1,
            prompt_len: 5,
            history_len: 20,
            max_timestep: 50,
            mlp_ratio: 4,
        }
    }
}

impl PlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding width {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.history_len == 0 || self.max_timestep == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "history_len, max_timestep and mlp_ratio must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Maximum token count, `3·(K* + K)`.
    pub fn max_tokens(&self) -> usize {
        3 * (self.prompt_len + self.history_len)
    }

    fn to_meta(&self) -> Vec<f64> {
        [
            self.layers,
            self.heads,
            self.dim,
            self.prompt_len,
            self.history_len,
            self.max_timestep,
            self.mlp_ratio,
        ]
        .iter()
        .map(|&v| v as f64)
        .chain([self.dropout])
        .collect()
    }

    fn from_meta(v: &[f64]) -> Result<Self> {
        if v.len() != 8 {
            return Err(Error::Checkpoint("malformed plm_config record".into()));
        }
        let c = Self {
            layers: v[0] as usize,
            heads: v[1] as usize,
            dim: v[2] as usize,
            prompt_len: v[3] as usize,
            history_len: v[4] as usize,
            max_timestep: v[5] as usize,
            mlp_ratio: v[6] as usize,
            dropout: v[7],
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rtg,
    State,
    Action,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub modality: Modality,
    pub timestep: usize,
    pub in_prompt: bool,
    pub value: Vec<f64>,
}

/// Flat view of the interleaved model input.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.tokens.iter().map(|t| t.modality).collect()
    }
}

fn check_segment(s: &Segment, what: &'static str) -> Result<()> {
    let n = s.timesteps.len();
    if s.states.len() != n || s.actions.len() != n || s.rtg.len() != n {
        return Err(Error::shape(
            what,
            &[s.states.len(), s.actions.len(), s.rtg.len()],
            &[n, n, n],
        ));
    }
    Ok(())
}

/// Interleaves `(r̂, s, a)` for every prompt step, then every history step.
/// Prompt tuples carry the prompt's return-to-go, never its reward.
pub fn build_input(prompt: &Segment, history: &Segment) -> Result<TokenSequence> {
    check_segment(prompt, "prompt segment")?;
    check_segment(history, "history segment")?;
    let mut tokens = Vec::with_capacity(3 * (prompt.len() + history.len()));
    for (seg, in_prompt) in [(prompt, true), (history, false)] {
        for t in 0..seg.len() {
            let ts = seg.timesteps[t];
            let mut push = |modality, value: Vec<f64>| {
                tokens.push(Token {
                    modality,
                    timestep: ts,
                    in_prompt,
                    value,
                })
            };
            push(Modality::Rtg, vec![seg.rtg[t]]);
            push(Modality::State, seg.states[t].to_vec());
            push(Modality::Action, seg.actions[t].to_vec());
        }
    }
    Ok(TokenSequence { tokens })
}

/// `batch` equal-length step windows stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBlock {
    pub rtg: Tensor,
    pub states: Tensor,
    pub actions: Tensor,
    pub timesteps: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

/// A [`StepBlock`] placed on a tape.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub rtg: Var,
    pub states: Var,
    pub actions: Var,
    pub timesteps: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl StepBlock {
    pub fn from_segments(segs: &[Segment]) -> Result<Self> {
        let first = segs.first().ok_or(Error::Empty("segment batch"))?;
        let len = first.len();
        let n = segs.len() * len;
        let (mut rtg, mut states, mut actions, mut timesteps) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n * STATE_DIM),
            Vec::with_capacity(n * ACTION_DIM),
            Vec::with_capacity(n),
        );
        for s in segs {
            check_segment(s, "segment")?;
            if s.len() != len {
                return Err(Error::shape("StepBlock", &[s.len()], &[len]));
            }
            rtg.extend_from_slice(&s.rtg);
            states.extend(s.states.iter().flatten());
            actions.extend(s.actions.iter().flatten());
            timesteps.extend_from_slice(&s.timesteps);
        }
        Ok(Self {
            rtg: Tensor::matrix(n, 1, rtg)?,
            states: Tensor::matrix(n, STATE_DIM, states)?,
            actions: Tensor::matrix(n, ACTION_DIM, actions)?,
            timesteps,
            batch: segs.len(),
            len,
        })
    }

    pub fn from_segment(seg: &Segment) -> Result<Self> {
        Self::from_segments(std::slice::from_ref(seg))
    }

    fn bind(&self, g: &mut Graph, differentiable: bool) -> BlockVars {
        let mut put = |t: &Tensor| {
            if differentiable {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BlockVars {
            rtg: put(&self.rtg),
            states: put(&self.states),
            actions: put(&self.actions),
            timesteps: self.timesteps.clone(),
            batch: self.batch,
            len: self.len,
        }
    }

    pub fn constants(&self, g: &mut Graph) -> BlockVars {
        self.bind(g, false)
    }

    pub fn variables(&self, g: &mut Graph) -> BlockVars {
        self.bind(g, true)
    }

    /// Back to one [`Segment`] per batch row; rewards are zero-filled.
    pub fn to_segments(&self) -> Vec<Segment> {
        (0..self.batch)
            .map(|b| {
                let r = b * self.len..(b + 1) * self.len;
                Segment {
                    states: r
                        .clone()
                        .map(|i| [self.states.at(i, 0), self.states.at(i, 1)])
                        .collect(),
                    actions: r
                        .clone()
                        .map(|i| [self.actions.at(i, 0), self.actions.at(i, 1)])
                        .collect(),
                    rewards: vec![0.0; self.len],
                    rtg: r.clone().map(|i| self.rtg.at(i, 0)).collect(),
                    timesteps: self.timesteps[r].to_vec(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: CausalSelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_rtg: Linear,
    embed_state: Linear,
    embed_action: Linear,
    timestep: Embedding,
    segment: Embedding,
    ln_embed: LayerNorm,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Layout {
    fn build(c: &PlmConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        let d = c.dim;
        let embed_rtg = Linear::new(params, "embed_rtg", 1, d, rng)?;
        let embed_state = Linear::new(params, "embed_state", STATE_DIM, d, rng)?;
        let embed_action = Linear::new(params, "embed_action", ACTION_DIM, d, rng)?;
        let timestep = Embedding::new(params, "timestep", c.max_timestep, d, rng)?;
        let segment = Embedding::new(params, "segment", 2, d, rng)?;
        let ln_embed = LayerNorm::new(params, "ln_embed", d)?;
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("block{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(params, &format!("{p}.ln1"), d)?,
                attn: CausalSelfAttention::new(params, &format!("{p}.attn"), d, c.heads, rng)?,
                ln2: LayerNorm::new(params, &format!("{p}.ln2"), d)?,
                fc1: Linear::new(params, &format!("{p}.fc1"), d, c.mlp_ratio * d, rng)?,
                fc2: Linear::new(params, &format!("{p}.fc2"), c.mlp_ratio * d, d, rng)?,
            });
        }
        let ln_f = LayerNorm::new(params, "ln_f", d)?;
        let head = Linear::new(params, "head", d, ACTION_DIM, rng)?;
        Ok(Self {
            embed_rtg,
            embed_state,
            embed_action,
            timestep,
            segment,
            ln_embed,
            blocks,
            ln_f,
            head,
        })
    }
}

/// The pre-trained policy model.
#[derive(Clone, Debug)]
pub struct Plm {
    pub config: PlmConfig,
    pub params: ParamSet,
    layout: Layout,
    training: bool,
}

impl Plm {
    pub fn new(config: PlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::seeded(seed);
        let layout = Layout::build(&config, &mut params, &mut r)?;
        Ok(Self {
            config,
            params,
            layout,
            training: false,
        })
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Predicted (normalised) actions at every state token, stacked per
    /// batch row as `K* + L` rows. `prompt` is shared by every history row.
    /// Dropout is active only in training mode and when `rng` is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        prompt: Option<&BlockVars>,
        hist: &BlockVars,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let lay = &self.layout;
        let kp = prompt.map_or(0, |p| p.len);
        if let Some(p) = prompt {
            if p.batch != 1 {
                return Err(Error::InvalidArgument(
                    "prompt block must hold one segment".into(),
                ));
            }
        }
        let (b, l) = (hist.batch, hist.len);
        if l == 0 || b == 0 {
            return Err(Error::Empty("history block"));
        }
        if kp > c.prompt_len || l > c.history_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds the configured maximum {}",
                3 * (kp + l),
                c.max_tokens()
            )));
        }
        let seq = 3 * (kp + l);
        let mut parts = Vec::with_capacity(6);
        if let Some(p) = prompt.filter(|p| p.len > 0) {
            parts.push(lay.embed_rtg.forward(g, vars, p.rtg)?);
            parts.push(lay.embed_state.forward(g, vars, p.states)?);
            parts.push(lay.embed_action.forward(g, vars, p.actions)?);
        }
        parts.push(lay.embed_rtg.forward(g, vars, hist.rtg)?);
        parts.push(lay.embed_state.forward(g, vars, hist.states)?);
        parts.push(lay.embed_action.forward(g, vars, hist.actions)?);
        let all = g.concat_rows(&parts)?;

        let mut idx = Vec::with_capacity(b * seq);
        let mut steps = Vec::with_capacity(b * seq);
        let mut segs = Vec::with_capacity(b * seq);
        let base = 3 * kp;
        for bi in 0..b {
            if let Some(p) = prompt {
                for i in 0..kp {
                    idx.extend([i, kp + i, 2 * kp + i]);
                    steps.extend([p.timesteps[i]; 3]);
                    segs.extend([0; 3]);
                }
            }
            for t in 0..l {
                let r = bi * l + t;
                idx.extend([base + r, base + b * l + r, base + 2 * b * l + r]);
                steps.extend([hist.timesteps[r]; 3]);
                segs.extend([1; 3]);
            }
        }
        let mut x = g.gather(all, &idx)?;
        let te = lay.timestep.forward(g, vars, &steps)?;
        x = g.add(x, te)?;
        let se = lay.segment.forward(g, vars, &segs)?;
        x = g.add(x, se)?;
        x = lay.ln_embed.forward(g, vars, x)?;

        let mut rng = rng.filter(|_| self.training && c.dropout > 0.0);
        let mut drop = |g: &mut Graph, v: Var| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) => g.dropout(v, c.dropout, r),
                None => Ok(v),
            }
        };
        x = drop(g, x)?;
        for blk in &lay.blocks {
            let h = blk.ln1.forward(g, vars, x)?;
            let h = blk.attn.forward(g, vars, h, b, seq)?;
            let h = drop(g, h)?;
            x = g.add(x, h)?;
            let h = blk.ln2.forward(g, vars, x)?;
            let h = blk.fc1.forward(g, vars, h)?;
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, vars, h)?;
            let h = drop(g, h)?;
            x = g.add(x, h)?;
        }
        x = lay.ln_f.forward(g, vars, x)?;
        let state_rows: Vec<usize> = (0..b)
            .flat_map(|bi| (0..kp + l).map(move |i| bi * seq + 3 * i + 1))
            .collect();
        let s = g.gather(x, &state_rows)?;
        let y = lay.head.forward(g, vars, s)?;
        Ok(g.tanh(y))
    }

    /// Mean squared action error over the history positions only.
    pub fn loss_dt(
        &self,
        g: &mut Graph,
        vars: &[Var],
        prompt: Option<&BlockVars>,
        hist: &BlockVars,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let pred = self.forward(g, vars, prompt, hist, rng)?;
        let kp = prompt.map_or(0, |p| p.len);
        let (b, l) = (hist.batch, hist.len);
        let rows: Vec<usize> = (0..b)
            .flat_map(|bi| (0..l).map(move |t| bi * (kp + l) + kp + t))
            .collect();
        let p = g.gather(pred, &rows)?;
        g.mse(p, hist.actions)
    }

    /// Eager evaluation of [`Plm::loss_dt`] with dropout off.
    pub fn loss_dt_batch(&self, prompt: Option<&Segment>, hist: &[Segment]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params);
        let pv = prompt
            .map(|p| StepBlock::from_segment(p).map(|b| b.constants(&mut g)))
            .transpose()?;
        let hv = StepBlock::from_segments(hist)?.constants(&mut g);
        let l = self.loss_dt(&mut g, &vars, pv.as_ref(), &hv, None)?;
        Ok(g.value(l).item())
    }

    /// Eager predictions, `(batch·(K* + L)) × 2`.
    pub fn predict(&self, prompt: Option<&Segment>, hist: &[Segment]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params);
        let pv = prompt
            .map(|p| StepBlock::from_segment(p).map(|b| b.constants(&mut g)))
            .transpose()?;
        let hv = StepBlock::from_segments(hist)?.constants(&mut g);
        let y = self.forward(&mut g, &vars, pv.as_ref(), &hv, None)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self, stats: Option<&NormStats>) -> Checkpoint {
        let mut ck =
            Checkpoint::new(self.params.clone()).with_meta("plm_config", self.config.to_meta());
        if let Some(s) = stats {
            ck = ck.with_meta("norm_stats", s.to_flat());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<NormStats>)> {
        let config = PlmConfig::from_meta(ck.meta_value("plm_config")?)?;
        let mut plm = Self::new(config, 0)?;
        if !plm.params.same_layout(&ck.params) {
            return Err(Error::Checkpoint(
                "parameter layout does not match plm_config".into(),
            ));
        }
        plm.params = ck.params.clone();
        let stats = ck
            .meta
            .get("norm_stats")
            .map(|v| NormStats::from_flat(v))
            .transpose()?;
        Ok((plm, stats))
    }
}

/// Offline data for one task: prompts are drawn from `prompts`, training
/// windows from `histories`.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: usize,
    pub prompts: Vec<Trajectory>,
    pub histories: Vec<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 16,
            clip_norm: 0.25,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: u128,
}

/// AdamW on the action loss: each iteration picks a task, one prompt and a
/// history batch from that task.
pub fn train_loop(
    plm: &mut Plm,
    tasks: &[TaskData],
    stats: &NormStats,
    tc: &PretrainConfig,
    rng: &mut Rng,
) -> Result<Vec<TrainLogRow>> {
    if tasks.is_empty() {
        return Err(Error::Missing("training datasets".into()));
    }
    let start = Instant::now();
    let mut opt = AdamWState::new(&plm.params, tc.optimizer);
    let mut log = Vec::with_capacity(tc.iterations);
    let was_training = plm.is_training();
    plm.set_training(true);
    for it in 0..tc.iterations {
        let task = &tasks[rng.random_range(0..tasks.len())];
        let prompt = if plm.config.prompt_len > 0 {
            Some(
                datasets::sample_prompt(&task.prompts, plm.config.prompt_len, rng)?
                    .normalize(stats),
            )
        } else {
            None
        };
        let hist: Vec<Segment> = datasets::sample_history_batch(
            &task.histories,
            plm.config.history_len,
            tc.batch_size,
            rng,
        )?
        .iter()
        .map(|s| s.normalize(stats))
        .collect();
        let mut g = Graph::new();
        let vars = g.bind(&plm.params);
        let pv = prompt
            .as_ref()
            .map(|p| StepBlock::from_segment(p).map(|b| b.constants(&mut g)))
            .transpose()?;
        let hv = StepBlock::from_segments(&hist)?.constants(&mut g);
        let loss = plm.loss_dt(&mut g, &vars, pv.as_ref(), &hv, Some(rng))?;
        let grads = g.backward(loss)?;
        let mut grads = grads.collect(&vars);
        clip_global_norm(&mut grads, tc.clip_norm);
        adamw_step(&mut plm.params, &grads, &mut opt)?;
        log.push(TrainLogRow {
            iteration: it,
            loss: g.value(loss).item(),
            wall_ms: start.elapsed().as_millis(),
        });
    }
    plm.set_training(was_training);
    Ok(log)
}

pub fn pretrain(
    config: &PlmConfig,
    tasks: &[TaskData],
    stats: &NormStats,
    tc: &PretrainConfig,
    seed: u64,
) -> Result<(Plm, Vec<TrainLogRow>)> {
    let mut plm = Plm::new(config.clone(), rng::derive_seed(seed, 0))?;
    let mut r = rng::derived(seed, 1);
    let log = train_loop(&mut plm, tasks, stats, tc, &mut r)?;
    Ok((plm, log))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutResult {
    pub returns: Vec<f64>,
}

impl RolloutResult {
    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }
}

struct Step {
    state: [f64; STATE_DIM],
    action: [f64; ACTION_DIM],
    rtg: f64,
    t: usize,
}

/// Autoregressive control. `prompt` is already normalised; `target_rtg` is
/// in raw units. Episodes run in lockstep as one batch, episode `e` reset
/// with a seed derived from `(seed, e)`.
pub fn rollout<E: Environment>(
    plm: &Plm,
    stats: &NormStats,
    prompt: Option<&Segment>,
    env: &E,
    target_rtg: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<RolloutResult> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument(
            "n_episodes must be at least 1".into(),
        ));
    }
    let k = plm.config.history_len;
    let horizon = env.horizon();
    let mut states: Vec<EnvState> = (0..n_episodes as u64)
        .map(|e| env.reset(rng::derive_seed(seed, e)))
        .collect();
    let mut hist: Vec<Vec<Step>> = (0..n_episodes)
        .map(|_| Vec::with_capacity(horizon))
        .collect();
    let mut rtg = vec![target_rtg; n_episodes];
    let mut returns = vec![0.0; n_episodes];
    let prompt_block = prompt
        .filter(|p| !p.is_empty())
        .map(StepBlock::from_segment)
        .transpose()?;
    let kp = prompt_block.as_ref().map_or(0, |p| p.len);
    for t in 0..horizon {
        for e in 0..n_episodes {
            hist[e].push(Step {
                state: states[e].observation(),
                action: [0.0; ACTION_DIM],
                rtg: rtg[e],
                t,
            });
        }
        let l = (t + 1).min(k);
        let segs: Vec<Segment> = hist
            .iter()
            .map(|h| {
                let w = &h[h.len() - l..];
                Segment {
                    states: w
                        .iter()
                        .map(|s| std::array::from_fn(|i| stats.states[i].normalize(s.state[i])))
                        .collect(),
                    actions: w.iter().map(|s| s.action).collect(),
                    rewards: vec![0.0; l],
                    rtg: w.iter().map(|s| stats.rtg.normalize(s.rtg)).collect(),
                    timesteps: w.iter().map(|s| s.t).collect(),
                }
            })
            .collect();
        let mut g = Graph::new();
        let vars = g.bind_frozen(&plm.params);
        let pv = prompt_block.as_ref().map(|p| p.constants(&mut g));
        let hv = StepBlock::from_segments(&segs)?.constants(&mut g);
        let y = plm.forward(&mut g, &vars, pv.as_ref(), &hv, None)?;
        let pred = g.value(y);
        for e in 0..n_episodes {
            let row = e * (kp + l) + kp + l - 1;
            let a_norm = [pred.at(row, 0), pred.at(row, 1)];
            let a: [f64; ACTION_DIM] =
                std::array::from_fn(|i| stats.actions[i].denormalize(a_norm[i]).clamp(-1.0, 1.0));
            let (next, r) = env.step(&states[e], a)?;
            states[e] = next;
            returns[e] += r;
            rtg[e] -= r;
            let last = hist[e].last_mut().expect("pushed above");
            last.action = std::array::from_fn(|i| stats.actions[i].normalize(a[i]));
        }
    }
    Ok(RolloutResult { returns })
}
