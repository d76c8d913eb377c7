//! Conditional DDPM over prompt tensors.
//!
//! A prompt of `K*` steps is a `(d_s + d_a + 1) × K*` matrix whose rows are
//! the state, action and reward channels; it is stored flattened row by
//! row. The condition is the prompt's return-to-go row plus its timesteps.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::Segment;
use crate::envs::{ACTION_DIM, STATE_DIM};
use crate::numerics::layers::{Embedding, Linear};
use crate::numerics::{
    adamw_step, clip_global_norm, AdamWState, Checkpoint, Graph, ParamSet, Tensor, Var,
};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Rows of a prompt tensor: states, actions, reward.
pub const CHANNELS: usize = STATE_DIM + ACTION_DIM + 1;
const REWARD_ROW: usize = STATE_DIM + ACTION_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTensor {
    k: usize,
    data: Vec<f64>,
}

impl PromptTensor {
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * k {
            return Err(Error::shape("PromptTensor", &[data.len()], &[CHANNELS * k]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt tensor".into()));
        }
        Ok(Self { k, data })
    }

    /// From a normalised segment.
    pub fn from_segment(seg: &Segment) -> Self {
        let k = seg.len();
        let mut data = Vec::with_capacity(CHANNELS * k);
        for i in 0..STATE_DIM {
            data.extend(seg.states.iter().map(|s| s[i]));
        }
        for i in 0..ACTION_DIM {
            data.extend(seg.actions.iter().map(|a| a[i]));
        }
        data.extend_from_slice(&seg.rewards);
        Self { k, data }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.k..(c + 1) * self.k]
    }

    /// Normalised segment: states, actions and rewards from the tensor,
    /// rtg and timesteps from the condition.
    pub fn to_segment(&self, cond: &Condition) -> Result<Segment> {
        if cond.len() != self.k {
            return Err(Error::shape(
                "PromptTensor::to_segment",
                &[self.k],
                &[cond.len()],
            ));
        }
        let k = self.k;
        Ok(Segment {
            states: (0..k)
                .map(|t| std::array::from_fn(|i| self.channel(i)[t]))
                .collect(),
            actions: (0..k)
                .map(|t| std::array::from_fn(|i| self.channel(STATE_DIM + i)[t]))
                .collect(),
            rewards: self.channel(REWARD_ROW).to_vec(),
            rtg: cond.rtg.clone(),
            timesteps: cond.timesteps.clone(),
        })
    }
}

/// Return-to-go row (normalised) and timestep row of a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub rtg: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl Condition {
    pub fn from_segment(seg: &Segment) -> Self {
        Self {
            rtg: seg.rtg.clone(),
            timesteps: seg.timesteps.clone(),
        }
    }

    /// Constant rtg row over timesteps `start..start + k`.
    pub fn constant(rtg: f64, k: usize, start: usize) -> Self {
        Self {
            rtg: vec![rtg; k],
            timesteps: (start..start + k).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rtg.len() != self.timesteps.len() {
            return Err(Error::shape(
                "Condition",
                &[self.rtg.len()],
                &[self.timesteps.len()],
            ));
        }
        if self.timesteps.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::InvalidArgument(
                "condition timesteps not consecutive".into(),
            ));
        }
        Ok(())
    }
}

/// Conditions for a batch of prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct CondBatch {
    /// `batch × K*`
    pub rtg: Tensor,
    /// `batch·K*` row-major.
    pub timesteps: Vec<usize>,
}

impl CondBatch {
    pub fn new(conds: &[Condition]) -> Result<Self> {
        let k = conds.first().ok_or(Error::Empty("condition batch"))?.len();
        let mut rtg = Vec::with_capacity(conds.len() * k);
        let mut timesteps = Vec::with_capacity(conds.len() * k);
        for c in conds {
            c.validate()?;
            if c.len() != k {
                return Err(Error::shape("CondBatch", &[c.len()], &[k]));
            }
            rtg.extend_from_slice(&c.rtg);
            timesteps.extend_from_slice(&c.timesteps);
        }
        Ok(Self {
            rtg: Tensor::matrix(conds.len(), k, rtg)?,
            timesteps,
        })
    }

    pub fn repeat(cond: &Condition, batch: usize) -> Result<Self> {
        Self::new(&vec![cond.clone(); batch])
    }

    pub fn batch(&self) -> usize {
        self.rtg.rows()
    }
}

/// Linear variance schedule over `N` steps, 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// β runs linearly from `1e-4·1000/N` to `0.02·1000/N`, clamped into
    /// `(0, 0.999]`.
    pub fn linear(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "diffusion steps must be at least 1".into(),
            ));
        }
        let scale = 1000.0 / n as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                let b = if n == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                };
                b.clamp(f64::MIN_POSITIVE, 0.999)
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut prev = 1.0;
        for a in &alphas {
            prev *= a;
            alpha_bars.push(prev);
        }
        let posterior_var = (0..n)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_var,
        })
    }

    pub fn n(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.n() {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                index: k,
                limit: self.n() + 1,
            });
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// `ᾱ_k`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Reverse-step variance `Σ_k = β_k (1 − ᾱ_{k−1}) / (1 − ᾱ_k)`.
    pub fn sigma2(&self, k: usize) -> f64 {
        self.posterior_var[k - 1]
    }
}

pub fn make_schedule(n: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(n)
}

/// `√ᾱ_k·x0 + √(1 − ᾱ_k)·eps`.
pub fn q_sample(x0: &[f64], k: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(k)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("q_sample", &[x0.len()], &[eps.len()]));
    }
    let (a, b) = (sched.alpha_bar(k).sqrt(), (1.0 - sched.alpha_bar(k)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Anything that predicts the noise in `x_k`.
pub trait EpsModel {
    /// `x` is `batch × D`; `ks[i]` is the diffusion step of row `i`.
    fn eps(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        cond: &CondBatch,
        ks: &[usize],
    ) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffuserConfig {
    /// `N`
    pub steps: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub step_embed_dim: usize,
    /// `K*`
    pub prompt_len: usize,
    pub max_timestep: usize,
    pub temperature: f64,
}

impl Default for DiffuserConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            hidden: 256,
            time_embed_dim: 16,
            step_embed_dim: 16,
            prompt_len: 5,
            max_timestep: 50,
            temperature: 0.5,
        }
    }
}

impl DiffuserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.hidden == 0 || self.prompt_len == 0 || self.max_timestep == 0 {
            return Err(Error::Config(
                "steps, hidden, prompt_len and max_timestep must be positive".into(),
            ));
        }
        if !self.step_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("step_embed_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 1)",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn prompt_dim(&self) -> usize {
        CHANNELS * self.prompt_len
    }

    fn to_meta(&self) -> Vec<f64> {
        [
            self.steps,
            self.hidden,
            self.time_embed_dim,
            self.step_embed_dim,
            self.prompt_len,
            self.max_timestep,
        ]
        .iter()
        .map(|&v| v as f64)
        .chain([self.temperature])
        .collect()
    }

    fn from_meta(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return Err(Error::Checkpoint("malformed diffuser_config record".into()));
        }
        let c = Self {
            steps: v[0] as usize,
            hidden: v[1] as usize,
            time_embed_dim: v[2] as usize,
            step_embed_dim: v[3] as usize,
            prompt_len: v[4] as usize,
            max_timestep: v[5] as usize,
            temperature: v[6],
        };
        c.validate()?;
        Ok(c)
    }
}

/// `[sin(k·f_i), cos(k·f_i)]` with geometric frequencies `f_i`.
pub fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (k as f64 * f).sin();
        out[half + i] = (k as f64 * f).cos();
    }
    out
}

/// Three affine layers with Mish between them. Input is the noisy prompt,
/// the condition rtg row, the timestep embedding averaged over `K*` and a
/// sinusoidal embedding of the diffusion step.
#[derive(Clone, Debug)]
pub struct EpsNet {
    config: DiffuserConfig,
    time: Embedding,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl EpsNet {
    fn build(c: &DiffuserConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        let d = c.prompt_dim();
        let d_in = d + c.prompt_len + c.time_embed_dim + c.step_embed_dim;
        Ok(Self {
            config: c.clone(),
            time: Embedding::new(params, "time", c.max_timestep, c.time_embed_dim, rng)?,
            l1: Linear::new(params, "l1", d_in, c.hidden, rng)?,
            l2: Linear::new(params, "l2", c.hidden, c.hidden, rng)?,
            l3: Linear::new(params, "l3", c.hidden, d, rng)?,
        })
    }
}

impl EpsModel for EpsNet {
    fn eps(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        cond: &CondBatch,
        ks: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let b = g.value(x).rows();
        if cond.batch() != b || ks.len() != b || cond.rtg.cols() != c.prompt_len {
            return Err(Error::shape(
                "eps_net condition",
                &[cond.batch(), cond.rtg.cols(), ks.len()],
                &[b, c.prompt_len, b],
            ));
        }
        let kp = c.prompt_len;
        let te = self.time.forward(g, vars, &cond.timesteps)?;
        let mut avg = vec![0.0; b * b * kp];
        for i in 0..b {
            for j in 0..kp {
                avg[i * b * kp + i * kp + j] = 1.0 / kp as f64;
            }
        }
        let avg = g.constant(Tensor::matrix(b, b * kp, avg)?);
        let te = g.matmul(avg, te)?;
        let rtg = g.constant(cond.rtg.clone());
        let se: Vec<f64> = ks
            .iter()
            .flat_map(|&k| step_embedding(k, c.step_embed_dim))
            .collect();
        let se = g.constant(Tensor::matrix(b, c.step_embed_dim, se)?);
        let h = g.concat_cols(&[x, rtg, te, se])?;
        let h = self.l1.forward(g, vars, h)?;
        let h = g.mish(h);
        let h = self.l2.forward(g, vars, h)?;
        let h = g.mish(h);
        self.l3.forward(g, vars, h)
    }
}

/// One denoising-loss minibatch with its sampled steps and noise.
#[derive(Clone, Debug)]
pub struct DmBatch {
    pub x0: Tensor,
    pub cond: CondBatch,
    pub ks: Vec<usize>,
    pub eps: Tensor,
}

impl DmBatch {
    /// `k` uniform in `1..=N` and standard-normal noise per item.
    pub fn draw(
        prompts: &[PromptTensor],
        conds: &[Condition],
        n: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let first = prompts.first().ok_or(Error::Empty("prompt batch"))?;
        if conds.len() != prompts.len() {
            return Err(Error::shape("DmBatch", &[prompts.len()], &[conds.len()]));
        }
        let d = first.dim();
        let ks: Vec<usize> = (0..prompts.len())
            .map(|_| rng.random_range(1..=n))
            .collect();
        let eps = rng::normal_vec(rng, prompts.len() * d);
        let x0: Vec<f64> = prompts
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        Ok(Self {
            x0: Tensor::matrix(prompts.len(), d, x0)?,
            cond: CondBatch::new(conds)?,
            ks,
            eps: Tensor::matrix(prompts.len(), d, eps)?,
        })
    }

    pub fn noisy(&self, sched: &NoiseSchedule) -> Result<Tensor> {
        let d = self.x0.cols();
        let mut out = Vec::with_capacity(self.x0.len());
        for (i, &k) in self.ks.iter().enumerate() {
            let r = i * d..(i + 1) * d;
            out.extend(q_sample(
                &self.x0.data()[r.clone()],
                k,
                &self.eps.data()[r],
                sched,
            )?);
        }
        Tensor::matrix(self.ks.len(), d, out)
    }
}

/// Mean squared error between the drawn noise and the model's prediction.
pub fn loss_dm<M: EpsModel>(
    m: &M,
    g: &mut Graph,
    vars: &[Var],
    batch: &DmBatch,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let xk = g.constant(batch.noisy(sched)?);
    let pred = m.eps(g, vars, xk, &batch.cond, &batch.ks)?;
    let eps = g.constant(batch.eps.clone());
    g.mse(pred, eps)
}

/// `μ = (x_k − β_k/√(1 − ᾱ_k)·ε̂) / √α_k` for every row at step `k`.
pub fn p_mean<M: EpsModel>(
    m: &M,
    g: &mut Graph,
    vars: &[Var],
    x: Var,
    cond: &CondBatch,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<Var> {
    sched.check(k)?;
    let ks = vec![k; g.value(x).rows()];
    let eps = m.eps(g, vars, x, cond, &ks)?;
    let c = sched.beta(k) / (1.0 - sched.alpha_bar(k)).sqrt();
    let e = g.scale(eps, c);
    let d = g.sub(x, e)?;
    Ok(g.scale(d, 1.0 / sched.alpha(k).sqrt()))
}

/// Every random draw of one reverse chain, taken up front so the chain is a
/// deterministic, differentiable function of the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainNoise {
    pub x_n: Tensor,
    /// `z[i]` is used on the step from `k = N − i` to `k − 1`; no draw is
    /// needed for `k = 1`.
    pub z: Vec<Tensor>,
}

impl ChainNoise {
    pub fn draw(rng: &mut Rng, batch: usize, dim: usize, n: usize) -> Result<Self> {
        let x_n = Tensor::matrix(batch, dim, rng::normal_vec(rng, batch * dim))?;
        let z = (0..n.saturating_sub(1))
            .map(|_| Tensor::matrix(batch, dim, rng::normal_vec(rng, batch * dim)))
            .collect::<Result<_>>()?;
        Ok(Self { x_n, z })
    }

    /// Chain started from `x_n` with no injected noise.
    pub fn quiet(x_n: Tensor, n: usize) -> Self {
        let z = vec![Tensor::zeros(x_n.shape()); n.saturating_sub(1)];
        Self { x_n, z }
    }
}

/// Low-temperature ancestral sampling on the tape:
/// `x_{k−1} = μ + √(temperature·Σ_k)·z`, with no noise at `k = 1`, then a
/// componentwise clamp to `[−1, 1]`.
pub fn sample_chain<M: EpsModel>(
    m: &M,
    g: &mut Graph,
    vars: &[Var],
    cond: &CondBatch,
    sched: &NoiseSchedule,
    temperature: f64,
    noise: &ChainNoise,
) -> Result<Var> {
    check_temperature(temperature)?;
    let n = sched.n();
    if noise.z.len() != n.saturating_sub(1) {
        return Err(Error::shape("ChainNoise", &[noise.z.len()], &[n - 1]));
    }
    let mut x = g.constant(noise.x_n.clone());
    for k in (1..=n).rev() {
        let mu = p_mean(m, g, vars, x, cond, k, sched)?;
        x = if k > 1 && temperature > 0.0 {
            let s = (temperature * sched.sigma2(k)).sqrt();
            let z = g.constant(noise.z[n - k].map(|v| s * v));
            g.add(mu, z)?
        } else {
            mu
        };
    }
    Ok(g.clamp(x, -1.0, 1.0))
}

fn check_temperature(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "temperature {t} outside [0, 1)"
        )));
    }
    Ok(())
}

/// The diffusion model: configuration, ε-network parameters and schedule.
#[derive(Clone, Debug)]
pub struct Diffuser {
    pub config: DiffuserConfig,
    pub params: ParamSet,
    pub net: EpsNet,
    pub schedule: NoiseSchedule,
}

impl Diffuser {
    pub fn new(config: DiffuserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::seeded(seed);
        let net = EpsNet::build(&config, &mut params, &mut r)?;
        let schedule = NoiseSchedule::linear(config.steps)?;
        Ok(Self {
            config,
            params,
            net,
            schedule,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Eager ε prediction.
    pub fn eps(&self, x: &Tensor, cond: &CondBatch, ks: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params);
        let xv = g.constant(x.clone());
        let e = self.net.eps(&mut g, &vars, xv, cond, ks)?;
        Ok(g.value(e).clone())
    }

    pub fn loss_dm_value(&self, batch: &DmBatch) -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.bind_frozen(&self.params);
        let l = loss_dm(&self.net, &mut g, &vars, batch, &self.schedule)?;
        Ok(g.value(l).item())
    }

    /// Value and gradient of the denoising loss.
    pub fn loss_dm_grad(&self, batch: &DmBatch) -> Result<(f64, Vec<Tensor>)> {
        crate::numerics::grad(&self.params, |g, v| {
            loss_dm(&self.net, g, v, batch, &self.schedule)
        })
    }

    /// One clipped AdamW step on the denoising loss; returns the loss.
    pub fn dm_step(&mut self, opt: &mut AdamWState, batch: &DmBatch, clip: f64) -> Result<f64> {
        let (loss, mut grads) = self.loss_dm_grad(batch)?;
        clip_global_norm(&mut grads, clip);
        adamw_step(&mut self.params, &grads, opt)?;
        Ok(loss)
    }

    /// Runs the reverse chain one step per tape, keeping only the current
    /// iterate. Same arithmetic as [`sample_chain`].
    pub fn sample_with_noise(
        &self,
        cond: &CondBatch,
        temperature: f64,
        noise: &ChainNoise,
    ) -> Result<Tensor> {
        check_temperature(temperature)?;
        let n = self.schedule.n();
        let mut x = noise.x_n.clone();
        for k in (1..=n).rev() {
            let mut g = Graph::new();
            let vars = g.bind_frozen(&self.params);
            let xv = g.constant(x);
            let mu = p_mean(&self.net, &mut g, &vars, xv, cond, k, &self.schedule)?;
            let mut next = g.value(mu).clone();
            if k > 1 && temperature > 0.0 {
                let s = (temperature * self.schedule.sigma2(k)).sqrt();
                let z = noise.z[n - k].map(|v| s * v);
                next = next.zip_map(&z, |a, b| a + b)?;
            }
            x = next;
        }
        Ok(x.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn sample(
        &self,
        conds: &[Condition],
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Vec<PromptTensor>> {
        let cond = CondBatch::new(conds)?;
        let d = self.config.prompt_dim();
        let noise = ChainNoise::draw(rng, conds.len(), d, self.schedule.n())?;
        let x = self.sample_with_noise(&cond, temperature, &noise)?;
        x.data()
            .chunks(d)
            .map(|row| PromptTensor::new(self.config.prompt_len, row.to_vec()))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone()).with_meta("diffuser_config", self.config.to_meta())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = DiffuserConfig::from_meta(ck.meta_value("diffuser_config")?)?;
        let mut d = Self::new(config, 0)?;
        if !d.params.same_layout(&ck.params) {
            return Err(Error::Checkpoint(
                "parameter layout does not match diffuser_config".into(),
            ));
        }
        d.params = ck.params.clone();
        Ok(d)
    }
}
