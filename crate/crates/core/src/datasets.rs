//! Offline trajectories, returns-to-go, `[-1, 1]` normalisation, window
//! sampling and the line-delimited dataset file format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Family, TaskSpec, Tier, ACTION_DIM, HORIZON, STATE_DIM};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Checks equal lengths, finiteness and, unless `generated`, the exact
    /// return-to-go recurrence.
    pub fn validate(&self, generated: bool) -> Result<()> {
        let n = self.len();
        if self.states.len() != n
            || self.actions.len() != n
            || self.rtg.len() != n
            || self.timesteps.len() != n
        {
            return Err(Error::Format("trajectory fields differ in length".into()));
        }
        let finite = self
            .states
            .iter()
            .chain(&self.actions)
            .flatten()
            .chain(&self.rewards)
            .chain(&self.rtg)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("trajectory value".into()));
        }
        if !generated && self.rtg != compute_rtg(&self.rewards)? {
            return Err(Error::Format("rtg is not the suffix sum of rewards".into()));
        }
        Ok(())
    }

    /// Raw window `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Segment> {
        if start + len > self.len() {
            return Err(Error::OutOfRange {
                what: "window end",
                index: start + len,
                limit: self.len(),
            });
        }
        let r = start..start + len;
        Ok(Segment {
            states: self.states[r.clone()].to_vec(),
            actions: self.actions[r.clone()].to_vec(),
            rewards: self.rewards[r.clone()].to_vec(),
            rtg: self.rtg[r.clone()].to_vec(),
            timesteps: self.timesteps[r].to_vec(),
        })
    }
}

/// Suffix sums: `rtg[t] = rewards[t] + rtg[t + 1]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward sequence"));
    }
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = if t + 1 == rewards.len() {
            rewards[t]
        } else {
            rewards[t] + acc
        };
        rtg[t] = acc;
    }
    Ok(rtg)
}

/// One full episode of the scripted policy.
pub fn rollout_episode(
    task: &TaskSpec,
    tier: Tier,
    reset_seed: u64,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let mut s = envs::reset(task, reset_seed);
    let mut states = Vec::with_capacity(HORIZON);
    let mut actions = Vec::with_capacity(HORIZON);
    let mut rewards = Vec::with_capacity(HORIZON);
    while s.t < HORIZON {
        let a = envs::scripted_policy(task, tier, &s, rng);
        states.push(s.observation());
        actions.push(a);
        let (next, r) = envs::step(task, &s, a)?;
        rewards.push(r);
        s = next;
    }
    let rtg = compute_rtg(&rewards)?;
    Ok(Trajectory {
        timesteps: (0..states.len()).collect(),
        states,
        actions,
        rewards,
        rtg,
    })
}

/// `n_episodes` rollouts; episode `e` draws from streams derived from
/// `(seed, e)` so episodes are independent of collection order.
pub fn collect(
    task: &TaskSpec,
    tier: Tier,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument(
            "n_episodes must be at least 1".into(),
        ));
    }
    (0..n_episodes as u64)
        .map(|e| {
            let mut r = rng::derived(seed, 2 * e + 1);
            rollout_episode(task, tier, rng::derive_seed(seed, 2 * e), &mut r)
        })
        .collect()
}

/// Min/max of one scalar channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub min: f64,
    pub max: f64,
}

impl Channel {
    fn empty() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn observe(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            2.0 * (x - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            self.min
        } else {
            (x + 1.0) * 0.5 * (self.max - self.min) + self.min
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub states: [Channel; STATE_DIM],
    pub actions: [Channel; ACTION_DIM],
    pub reward: Channel,
    pub rtg: Channel,
}

impl NormStats {
    pub const FLAT_LEN: usize = 2 * (STATE_DIM + ACTION_DIM + 2);

    /// `[min, max]` pairs: states, actions, reward, rtg.
    pub fn to_flat(&self) -> Vec<f64> {
        self.states
            .iter()
            .chain(&self.actions)
            .chain([&self.reward, &self.rtg])
            .flat_map(|c| [c.min, c.max])
            .collect()
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != Self::FLAT_LEN {
            return Err(Error::shape(
                "NormStats::from_flat",
                &[v.len()],
                &[Self::FLAT_LEN],
            ));
        }
        let c = |i: usize| Channel {
            min: v[2 * i],
            max: v[2 * i + 1],
        };
        Ok(Self {
            states: std::array::from_fn(c),
            actions: std::array::from_fn(|i| c(STATE_DIM + i)),
            reward: c(STATE_DIM + ACTION_DIM),
            rtg: c(STATE_DIM + ACTION_DIM + 1),
        })
    }

    /// Names of degenerate channels.
    pub fn degenerate_channels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, c) in self.states.iter().enumerate() {
            if c.is_degenerate() {
                out.push(format!("state[{i}]"));
            }
        }
        for (i, c) in self.actions.iter().enumerate() {
            if c.is_degenerate() {
                out.push(format!("action[{i}]"));
            }
        }
        if self.reward.is_degenerate() {
            out.push("reward".into());
        }
        if self.rtg.is_degenerate() {
            out.push("rtg".into());
        }
        out
    }
}

pub fn fit_norm_stats<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<NormStats> {
    let mut st = NormStats {
        states: [Channel::empty(); STATE_DIM],
        actions: [Channel::empty(); ACTION_DIM],
        reward: Channel::empty(),
        rtg: Channel::empty(),
    };
    let mut seen = false;
    for tr in trajectories {
        for t in 0..tr.len() {
            seen = true;
            for i in 0..STATE_DIM {
                st.states[i].observe(tr.states[t][i]);
            }
            for i in 0..ACTION_DIM {
                st.actions[i].observe(tr.actions[t][i]);
            }
            st.reward.observe(tr.rewards[t]);
            st.rtg.observe(tr.rtg[t]);
        }
    }
    if !seen {
        return Err(Error::Empty("dataset"));
    }
    let degenerate = st.degenerate_channels();
    if !degenerate.is_empty() {
        log::warn!(
            "degenerate normalisation channels: {}",
            degenerate.join(", ")
        );
    }
    Ok(st)
}

/// `K` consecutive steps of one trajectory. Serves both as a prompt and as
/// a history window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl Segment {
    pub fn empty() -> Self {
        Self {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            rtg: Vec::new(),
            timesteps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    fn map(
        &self,
        fs: &[Channel],
        fa: &[Channel],
        fr: &Channel,
        frtg: &Channel,
        f: fn(&Channel, f64) -> f64,
    ) -> Segment {
        Segment {
            states: self
                .states
                .iter()
                .map(|s| std::array::from_fn(|i| f(&fs[i], s[i])))
                .collect(),
            actions: self
                .actions
                .iter()
                .map(|a| std::array::from_fn(|i| f(&fa[i], a[i])))
                .collect(),
            rewards: self.rewards.iter().map(|&r| f(fr, r)).collect(),
            rtg: self.rtg.iter().map(|&r| f(frtg, r)).collect(),
            timesteps: self.timesteps.clone(),
        }
    }

    pub fn normalize(&self, st: &NormStats) -> Segment {
        self.map(
            &st.states,
            &st.actions,
            &st.reward,
            &st.rtg,
            Channel::normalize,
        )
    }

    pub fn denormalize(&self, st: &NormStats) -> Segment {
        self.map(
            &st.states,
            &st.actions,
            &st.reward,
            &st.rtg,
            Channel::denormalize,
        )
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            states: self.states,
            actions: self.actions,
            rewards: self.rewards,
            rtg: self.rtg,
            timesteps: self.timesteps,
        }
    }
}

/// Uniform trajectory, then a uniform window start.
pub fn sample_prompt(trajectories: &[Trajectory], k: usize, rng: &mut Rng) -> Result<Segment> {
    if trajectories.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let tr = &trajectories[rng.random_range(0..trajectories.len())];
    if k > tr.len() {
        return Err(Error::InvalidArgument(format!(
            "window length {k} exceeds trajectory length {}",
            tr.len()
        )));
    }
    let start = rng.random_range(0..=tr.len() - k);
    tr.window(start, k)
}

pub fn sample_history_batch(
    trajectories: &[Trajectory],
    k: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<Segment>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    (0..batch)
        .map(|_| sample_prompt(trajectories, k, rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub family: Family,
    pub task_index: usize,
    pub tier: Tier,
    pub seed: u64,
    pub horizon: usize,
    pub norm_stats: Option<NormStats>,
    pub generated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

pub fn dataset_file_name(family: Family, task_index: usize, tier: Tier) -> String {
    format!("{family}_task{task_index:02}_{tier}.jsonl")
}

fn real(out: &mut String, x: f64) {
    // 17 significant digits round-trips every finite f64.
    write!(out, "{x:.16e}").expect("write to String");
}

fn reals<'a>(out: &mut String, xs: impl IntoIterator<Item = &'a f64>) {
    out.push('[');
    for (i, x) in xs.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        real(out, *x);
    }
    out.push(']');
}

fn pairs(out: &mut String, xs: &[[f64; 2]]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        reals(out, x);
    }
    out.push(']');
}

fn channel(out: &mut String, c: &Channel) {
    out.push_str("{\"min\":");
    real(out, c.min);
    out.push_str(",\"max\":");
    real(out, c.max);
    out.push('}');
}

fn channels(out: &mut String, cs: &[Channel]) {
    out.push('[');
    for (i, c) in cs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        channel(out, c);
    }
    out.push(']');
}

fn header_line(h: &DatasetHeader) -> String {
    let mut s = format!(
        "{{\"format_version\":{},\"family\":\"{}\",\"task_index\":{},\"tier\":\"{}\",\"seed\":{},\"horizon\":{},\"generated\":{},\"norm_stats\":",
        h.format_version, h.family, h.task_index, h.tier, h.seed, h.horizon, h.generated
    );
    match &h.norm_stats {
        None => s.push_str("null"),
        Some(ns) => {
            s.push_str("{\"states\":");
            channels(&mut s, &ns.states);
            s.push_str(",\"actions\":");
            channels(&mut s, &ns.actions);
            s.push_str(",\"reward\":");
            channel(&mut s, &ns.reward);
            s.push_str(",\"rtg\":");
            channel(&mut s, &ns.rtg);
            s.push('}');
        }
    }
    s.push('}');
    s
}

fn trajectory_line(t: &Trajectory) -> String {
    let mut s = String::from("{\"states\":");
    pairs(&mut s, &t.states);
    s.push_str(",\"actions\":");
    pairs(&mut s, &t.actions);
    s.push_str(",\"rewards\":");
    reals(&mut s, &t.rewards);
    s.push_str(",\"rtg\":");
    reals(&mut s, &t.rtg);
    s.push_str(",\"timesteps\":[");
    for (i, ts) in t.timesteps.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{ts}").expect("write to String");
    }
    s.push_str("]}");
    s
}

impl Dataset {
    pub fn new(
        family: Family,
        task_index: usize,
        tier: Tier,
        seed: u64,
        trajectories: Vec<Trajectory>,
    ) -> Self {
        Self {
            header: DatasetHeader {
                format_version: FORMAT_VERSION,
                family,
                task_index,
                tier,
                seed,
                horizon: HORIZON,
                norm_stats: None,
                generated: false,
            },
            trajectories,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = header_line(&self.header);
        s.push('\n');
        for t in &self.trajectories {
            s.push_str(&trajectory_line(t));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or(Error::Empty("dataset file"))?;
        let header: DatasetHeader = serde_json::from_str(first)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format version {}",
                header.format_version
            )));
        }
        let mut trajectories = Vec::new();
        for line in lines {
            let t: Trajectory = serde_json::from_str(line)?;
            t.validate(header.generated)?;
            trajectories.push(t);
        }
        Ok(Self {
            header,
            trajectories,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(rewards: Vec<f64>, seed: u64) -> Trajectory {
        let mut r = rng::seeded(seed);
        let n = rewards.len();
        let v = rng::normal_vec(&mut r, 4 * n);
        Trajectory {
            states: (0..n).map(|t| [v[4 * t], v[4 * t + 1]]).collect(),
            actions: (0..n).map(|t| [v[4 * t + 2], v[4 * t + 3]]).collect(),
            rtg: compute_rtg(&rewards).unwrap(),
            rewards,
            timesteps: (0..n).collect(),
        }
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(compute_rtg(&[]).is_err());
    }

    #[test]
    fn rtg_matches_reversed_cumsum() {
        let mut r = rng::seeded(4);
        let rewards = rng::normal_vec(&mut r, 50);
        let mut oracle: Vec<f64> = rewards
            .iter()
            .rev()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        oracle.reverse();
        assert_eq!(compute_rtg(&rewards).unwrap(), oracle);
    }

    #[test]
    fn collect_contract() {
        let task = envs::make_task(Family::Dir1d, 0).unwrap();
        let d = collect(&task, Tier::Medium, 3, 1).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|t| t.len() == HORIZON));
        for t in &d {
            t.validate(false).unwrap();
        }
        assert_eq!(d, collect(&task, Tier::Medium, 3, 1).unwrap());
        assert!(collect(&task, Tier::Medium, 0, 1).is_err());
    }

    #[test]
    fn expert_beats_random_on_dir1d() {
        let mean = |tier| {
            let mut s = 0.0;
            for i in 0..2 {
                let task = envs::make_task(Family::Dir1d, i).unwrap();
                s += collect(&task, tier, 25, 9)
                    .unwrap()
                    .iter()
                    .map(Trajectory::total_return)
                    .sum::<f64>();
            }
            s / 50.0
        };
        assert!(mean(Tier::Expert) > mean(Tier::Random));
    }

    #[test]
    fn channel_endpoints_and_degenerate() {
        let c = Channel { min: 0.0, max: 3.0 };
        assert_eq!(c.normalize(3.0), 1.0);
        assert_eq!(c.normalize(0.0), -1.0);
        assert_eq!(c.normalize(1.5), 0.0);
        let d = Channel { min: 7.0, max: 7.0 };
        assert_eq!(d.normalize(7.0), 0.0);
        assert_eq!(d.denormalize(0.0), 7.0);
    }

    #[test]
    fn fit_rejects_empty() {
        assert!(fit_norm_stats(&[]).is_err());
    }

    #[test]
    fn prompt_covers_whole_trajectory() {
        let t = toy(vec![1.0; 50], 0);
        let mut r = rng::seeded(0);
        let s = sample_prompt(std::slice::from_ref(&t), 50, &mut r).unwrap();
        assert_eq!(s.timesteps[0], 0);
        assert_eq!(s.len(), 50);
        assert!(sample_prompt(std::slice::from_ref(&t), 51, &mut r).is_err());
    }

    #[test]
    fn window_starts_are_uniform() {
        let t = toy(vec![0.5; 50], 1);
        let mut r = rng::seeded(77);
        let k = 5;
        let mut counts = [0usize; 46];
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_prompt(std::slice::from_ref(&t), k, &mut r).unwrap();
            for w in s.timesteps.windows(2) {
                assert_eq!(w[1], w[0] + 1);
            }
            counts[s.timesteps[0]] += 1;
        }
        let expected = draws as f64 / 46.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-squared critical value, 45 degrees of freedom, p = 0.01.
        assert!(chi2 < 69.957, "chi2 = {chi2}");
    }

    #[test]
    fn history_batches_respect_boundaries() {
        let set: Vec<Trajectory> = (0..4).map(|i| toy(vec![i as f64; 30], i)).collect();
        let mut r = rng::seeded(2);
        let b = sample_history_batch(&set, 20, 32, &mut r).unwrap();
        assert_eq!(b.len(), 32);
        for seg in &b {
            // all rewards in a window come from one trajectory
            assert!(seg.rewards.iter().all(|&x| x == seg.rewards[0]));
            assert!(seg.timesteps.last().unwrap() < &30);
        }
        let single = sample_history_batch(&set, 1, 3, &mut r).unwrap();
        assert!(single.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let task = envs::make_task(Family::Vel, 4).unwrap();
        let trajs = collect(&task, Tier::Random, 3, 5).unwrap();
        let mut d = Dataset::new(Family::Vel, 4, Tier::Random, 5, trajs);
        d.header.norm_stats = Some(fit_norm_stats(&d.trajectories).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir
            .path()
            .join(dataset_file_name(Family::Vel, 4, Tier::Random));
        d.write(&p).unwrap();
        let back = Dataset::read(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_text(), d.to_text());
    }

    #[test]
    fn tampered_rtg_rejected() {
        let mut d = Dataset::new(
            Family::Dir1d,
            0,
            Tier::Expert,
            0,
            vec![toy(vec![1.0, 2.0], 0)],
        );
        d.trajectories[0].rtg[0] = 4.0;
        assert!(Dataset::from_text(&d.to_text()).is_err());
        d.header.generated = true;
        assert!(Dataset::from_text(&d.to_text()).is_ok());
    }

    proptest! {
        #[test]
        fn normalization_round_trip(seed in 0u64..1000, n in 2usize..40) {
            let mut r = rng::seeded(seed);
            let rewards: Vec<f64> = rng::normal_vec(&mut r, n).iter().map(|x| 10.0 * x).collect();
            let set = vec![toy(rewards, seed)];
            let st = fit_norm_stats(&set).unwrap();
            let seg = set[0].window(0, n).unwrap();
            let norm = seg.normalize(&st);
            let back = norm.denormalize(&st);
            for (a, b) in seg.rewards.iter().zip(&back.rewards) {
                prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            }
            for (a, b) in seg.states.iter().flatten().zip(back.states.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let max_r = norm.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min_r = norm.rewards.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(max_r, 1.0);
            prop_assert_eq!(min_r, -1.0);
        }

        #[test]
        fn rtg_recurrence_holds(v in proptest::collection::vec(-100.0f64..100.0, 1..60)) {
            let rtg = compute_rtg(&v).unwrap();
            let n = v.len();
            prop_assert_eq!(rtg[n - 1], v[n - 1]);
            for t in 0..n - 1 {
                prop_assert_eq!(rtg[t], v[t] + rtg[t + 1]);
            }
        }
    }
}
