//! Point-mass meta-RL task families.
//!
//! Three families share damped double-integrator dynamics and differ only in
//! their reward: `dir-1d` rewards speed along ±x, `vel` penalises squared
//! error to a target x-speed and `dir-2d` rewards velocity along a planar
//! goal direction. Observations carry velocity only, so the task is never
//! visible in the state.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const HORIZON: usize = 50;
pub const V_MAX: f64 = 2.0;
pub const DAMPING: f64 = 0.9;
pub const DT: f64 = 0.1;
pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

const MEDIUM_NOISE_STD: f64 = 0.5;
const MEDIUM_RANDOM_PROB: f64 = 0.3;
const VEL_GAIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "dir-1d")]
    Dir1d,
    #[serde(rename = "vel")]
    Vel,
    #[serde(rename = "dir-2d")]
    Dir2d,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Dir1d, Family::Vel, Family::Dir2d];

    pub fn task_count(self) -> usize {
        match self {
            Family::Dir1d => 2,
            Family::Vel => 40,
            Family::Dir2d => 50,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Dir1d => "dir-1d",
            Family::Vel => "vel",
            Family::Dir2d => "dir-2d",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dir-1d" => Ok(Family::Dir1d),
            "vel" => Ok(Family::Vel),
            "dir-2d" => Ok(Family::Dir2d),
            other => Err(Error::InvalidArgument(format!("unknown family {other}"))),
        }
    }
}

/// Behaviour-policy quality level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Expert,
    Medium,
    Random,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Expert, Tier::Medium, Tier::Random];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Expert => "expert",
            Tier::Medium => "medium",
            Tier::Random => "random",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Tier::Expert),
            "medium" => Ok(Tier::Medium),
            "random" => Ok(Tier::Random),
            other => Err(Error::InvalidArgument(format!("unknown tier {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub index: usize,
    pub goal: f64,
}

/// Goal for `(family, index)`: `vel` spaces 40 target speeds over `[0, 3]`,
/// `dir-2d` spaces 50 angles over `[0, 2π)`, `dir-1d` is `+1` then `-1`.
pub fn make_task(family: Family, index: usize) -> Result<TaskSpec> {
    let count = family.task_count();
    if index >= count {
        return Err(Error::OutOfRange {
            what: "task index",
            index,
            limit: count,
        });
    }
    let goal = match family {
        Family::Dir1d => {
            if index == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Family::Vel => 3.0 * index as f64 / 39.0,
        Family::Dir2d => 2.0 * PI * index as f64 / 50.0,
    };
    Ok(TaskSpec {
        family,
        index,
        goal,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub t: usize,
}

impl EnvState {
    /// Goal-blind observation: the velocity.
    pub fn observation(&self) -> [f64; STATE_DIM] {
        self.velocity
    }
}

/// Anything a policy can be rolled out in.
pub trait Environment {
    fn horizon(&self) -> usize;
    fn reset(&self, seed: u64) -> EnvState;
    fn step(&self, state: &EnvState, action: [f64; ACTION_DIM]) -> Result<(EnvState, f64)>;
}

impl Environment for TaskSpec {
    fn horizon(&self) -> usize {
        HORIZON
    }

    fn reset(&self, seed: u64) -> EnvState {
        reset(self, seed)
    }

    fn step(&self, state: &EnvState, action: [f64; ACTION_DIM]) -> Result<(EnvState, f64)> {
        step(self, state, action)
    }
}

/// Start state: position uniform in `[-0.1, 0.1]²`, zero velocity.
pub fn reset(_task: &TaskSpec, seed: u64) -> EnvState {
    let mut r = rng::seeded(seed);
    EnvState {
        position: [r.random_range(-0.1..=0.1), r.random_range(-0.1..=0.1)],
        velocity: [0.0, 0.0],
        t: 0,
    }
}

pub fn step(
    task: &TaskSpec,
    state: &EnvState,
    action: [f64; ACTION_DIM],
) -> Result<(EnvState, f64)> {
    if state.t >= HORIZON {
        return Err(Error::EpisodeFinished(state.t));
    }
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let mut v = [0.0; 2];
    let mut p = state.position;
    for i in 0..2 {
        v[i] = (DAMPING * state.velocity[i] + DT * a[i]).clamp(-V_MAX, V_MAX);
        p[i] += DT * v[i];
    }
    let reward = match task.family {
        Family::Dir1d => task.goal * v[0],
        Family::Vel => -(v[0] - task.goal).powi(2),
        Family::Dir2d => v[0] * task.goal.cos() + v[1] * task.goal.sin(),
    };
    Ok((
        EnvState {
            position: p,
            velocity: v,
            t: state.t + 1,
        },
        reward,
    ))
}

fn expert_action(task: &TaskSpec, state: &EnvState) -> [f64; 2] {
    match task.family {
        Family::Dir1d => [task.goal, 0.0],
        Family::Dir2d => [task.goal.cos(), task.goal.sin()],
        Family::Vel => [
            (VEL_GAIN * (task.goal - state.velocity[0])).clamp(-1.0, 1.0),
            (-VEL_GAIN * state.velocity[1]).clamp(-1.0, 1.0),
        ],
    }
}

fn uniform_action(rng: &mut Rng) -> [f64; 2] {
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

/// Scripted behaviour policy for offline data collection.
pub fn scripted_policy(task: &TaskSpec, tier: Tier, state: &EnvState, rng: &mut Rng) -> [f64; 2] {
    match tier {
        Tier::Expert => expert_action(task, state),
        Tier::Random => uniform_action(rng),
        Tier::Medium => {
            if rng.random::<f64>() < MEDIUM_RANDOM_PROB {
                uniform_action(rng)
            } else {
                let a = expert_action(task, state);
                let n = rng::normal_vec(rng, 2);
                [
                    (a[0] + MEDIUM_NOISE_STD * n[0]).clamp(-1.0, 1.0),
                    (a[1] + MEDIUM_NOISE_STD * n[1]).clamp(-1.0, 1.0),
                ]
            }
        }
    }
}

/// Train/test task partition for one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub family: Family,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_test: Option<Vec<usize>>,
}

impl TaskSplit {
    /// The standard split per family.
    pub fn standard(family: Family) -> Self {
        let test: Vec<usize> = match family {
            Family::Dir1d => vec![0, 1],
            Family::Vel => vec![2, 7, 15, 23, 26],
            Family::Dir2d => vec![6, 17, 23, 30, 41],
        };
        let train = match family {
            Family::Dir1d => vec![0, 1],
            _ => (0..family.task_count())
                .filter(|i| !test.contains(i))
                .collect(),
        };
        Self {
            family,
            train,
            test,
            ood_test: None,
        }
    }

    /// `dir-2d` out-of-distribution split: eight training directions on one
    /// arc, three test directions outside it.
    pub fn dir2d_ood() -> Self {
        Self {
            family: Family::Dir2d,
            train: vec![8, 13, 16, 20, 22, 26, 32, 37],
            test: Vec::new(),
            ood_test: Some(vec![1, 4, 41]),
        }
    }

    /// Tasks used for evaluation: the OOD tasks when present, else `test`.
    pub fn eval_tasks(&self) -> &[usize] {
        self.ood_test.as_deref().unwrap_or(&self.test)
    }

    pub fn validate(&self) -> Result<()> {
        let count = self.family.task_count();
        for &i in self.train.iter().chain(self.eval_tasks()) {
            if i >= count {
                return Err(Error::OutOfRange {
                    what: "split task index",
                    index: i,
                    limit: count,
                });
            }
        }
        // dir-1d has only two tasks, which appear on both sides.
        if self.family != Family::Dir1d && self.eval_tasks().iter().any(|i| self.train.contains(i))
        {
            return Err(Error::InvalidArgument(
                "train and test tasks overlap".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode_return(task: &TaskSpec, tier: Tier, seed: u64) -> f64 {
        let mut r = rng::derived(seed, 1);
        let mut s = reset(task, seed);
        let mut total = 0.0;
        while s.t < HORIZON {
            let a = scripted_policy(task, tier, &s, &mut r);
            let (n, rew) = step(task, &s, a).unwrap();
            total += rew;
            s = n;
        }
        total
    }

    fn family_mean(family: Family, tier: Tier, episodes: u64) -> f64 {
        (0..episodes)
            .map(|e| {
                let task = make_task(family, e as usize % family.task_count()).unwrap();
                episode_return(&task, tier, 1000 + e)
            })
            .sum::<f64>()
            / episodes as f64
    }

    #[test]
    fn goal_endpoints() {
        assert_eq!(make_task(Family::Vel, 39).unwrap().goal, 3.0);
        assert_eq!(make_task(Family::Vel, 0).unwrap().goal, 0.0);
        assert!((make_task(Family::Dir2d, 25).unwrap().goal - PI).abs() < 1e-15);
        assert_eq!(make_task(Family::Dir1d, 0).unwrap().goal, 1.0);
        assert_eq!(make_task(Family::Dir1d, 1).unwrap().goal, -1.0);
        assert!(make_task(Family::Dir1d, 2).is_err());
        assert!(make_task(Family::Vel, 40).is_err());
    }

    #[test]
    fn goal_mapping_is_injective() {
        for f in Family::ALL {
            let goals: Vec<f64> = (0..f.task_count())
                .map(|i| make_task(f, i).unwrap().goal)
                .collect();
            for i in 0..goals.len() {
                for j in i + 1..goals.len() {
                    assert_ne!(goals[i], goals[j], "{f} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn one_step_examples() {
        let s0 = EnvState {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            t: 0,
        };
        let t = make_task(Family::Dir1d, 0).unwrap();
        let (s1, r) = step(&t, &s0, [1.0, 0.0]).unwrap();
        assert_eq!(s1.velocity, [0.1, 0.0]);
        assert_eq!(r, 0.1);
        assert_eq!(s1.t, 1);

        let t = make_task(Family::Vel, 0).unwrap();
        assert_eq!(step(&t, &s0, [0.0, 0.0]).unwrap().1, 0.0);

        // v' = 0.9·(1/9, 3/9) + 0.1·(0, 0) = (0.1, 0.3)
        let t = TaskSpec {
            family: Family::Dir2d,
            index: 0,
            goal: PI / 2.0,
        };
        let s = EnvState {
            velocity: [1.0 / 9.0, 3.0 / 9.0],
            ..s0
        };
        let (s1, r) = step(&t, &s, [0.0, 0.0]).unwrap();
        assert!((s1.velocity[1] - 0.3).abs() < 1e-15);
        assert!((r - 0.3).abs() < 1e-15);
    }

    #[test]
    fn actions_are_clamped_and_finished_episodes_rejected() {
        let t = make_task(Family::Dir1d, 0).unwrap();
        let s0 = reset(&t, 0);
        let (a, _) = step(&t, &s0, [5.0, -5.0]).unwrap();
        let (b, _) = step(&t, &s0, [1.0, -1.0]).unwrap();
        assert_eq!(a, b);
        let done = EnvState { t: HORIZON, ..s0 };
        assert!(matches!(
            step(&t, &done, [0.0, 0.0]),
            Err(Error::EpisodeFinished(_))
        ));
    }

    #[test]
    fn reset_contract() {
        let t = make_task(Family::Vel, 3).unwrap();
        assert_eq!(reset(&t, 7), reset(&t, 7));
        let mut differ = 0;
        for s in 0..100u64 {
            let a = reset(&t, 2 * s);
            let b = reset(&t, 2 * s + 1);
            assert_eq!(a.velocity, [0.0, 0.0]);
            assert!(a.position.iter().all(|p| p.abs() <= 0.1));
            if a.position != b.position {
                differ += 1;
            }
        }
        assert!(differ >= 99);
    }

    #[test]
    fn expert_dir1d_is_constant() {
        let t = make_task(Family::Dir1d, 0).unwrap();
        let mut r = rng::seeded(0);
        let mut s = reset(&t, 0);
        for _ in 0..10 {
            assert_eq!(scripted_policy(&t, Tier::Expert, &s, &mut r), [1.0, 0.0]);
            s = step(&t, &s, [0.3, 0.2]).unwrap().0;
        }
    }

    #[test]
    fn random_tier_mean_is_centered() {
        let t = make_task(Family::Dir2d, 3).unwrap();
        let s = reset(&t, 0);
        let mut r = rng::seeded(11);
        let mut sum = [0.0; 2];
        let n = 10_000;
        for _ in 0..n {
            let a = scripted_policy(&t, Tier::Random, &s, &mut r);
            sum[0] += a[0];
            sum[1] += a[1];
        }
        assert!((sum[0] / n as f64).abs() < 0.05);
        assert!((sum[1] / n as f64).abs() < 0.05);
    }

    #[test]
    fn tiers_are_strictly_ordered() {
        for f in Family::ALL {
            let e = family_mean(f, Tier::Expert, 60);
            let m = family_mean(f, Tier::Medium, 60);
            let r = family_mean(f, Tier::Random, 60);
            assert!(e > m && m > r, "{f}: expert {e} medium {m} random {r}");
        }
    }

    #[test]
    fn velocity_stays_clamped_and_dynamics_repeat() {
        let t = make_task(Family::Dir2d, 10).unwrap();
        let run = || {
            let mut r = rng::seeded(5);
            let mut s = reset(&t, 5);
            let mut trace = Vec::new();
            while s.t < HORIZON {
                let a = scripted_policy(&t, Tier::Medium, &s, &mut r);
                let (n, rew) = step(&t, &s, a).unwrap();
                assert!(n.velocity.iter().all(|v| v.abs() <= V_MAX));
                trace.push((n.velocity, rew));
                s = n;
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn splits_are_valid() {
        for f in Family::ALL {
            let s = TaskSplit::standard(f);
            s.validate().unwrap();
        }
        assert_eq!(TaskSplit::standard(Family::Vel).train.len(), 35);
        assert_eq!(TaskSplit::standard(Family::Dir2d).train.len(), 45);
        let ood = TaskSplit::dir2d_ood();
        ood.validate().unwrap();
        let goal = |i: usize| make_task(Family::Dir2d, i).unwrap().goal;
        let lo = ood
            .train
            .iter()
            .map(|&i| goal(i))
            .fold(f64::INFINITY, f64::min);
        let hi = ood
            .train
            .iter()
            .map(|&i| goal(i))
            .fold(f64::NEG_INFINITY, f64::max);
        for &i in ood.eval_tasks() {
            let g = goal(i);
            assert!(g < lo || g > hi, "test goal {g} inside [{lo}, {hi}]");
        }
    }
}
