//! Synthetic multi-task suites.
//!
//! Two families share a 2-D action space bounded by the unit disk:
//!
//! * **point-goal**: a point mass moves by its (clamped) action and is
//!   rewarded with the negative distance to a goal drawn per episode from a
//!   narrow annulus sector. The goal slots of the observation are zeroed
//!   unless the task is configured as fully observed, so the task identity
//!   has to come from the prompt, the rewards, or a task mask.
//! * **direction**: the action is the velocity and the reward is its inner
//!   product with a hidden unit direction.

mod dataset;

pub use dataset::{
    generate_dataset, load_dataset, load_suite_datasets, save_dataset, save_suite_datasets,
    task_dir, OfflineDataset, Quality, Trajectory,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    PointGoal,
    Direction,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::PointGoal => "point-goal",
            Family::Direction => "direction",
        }
    }
}

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
/// Proportional gain of the scripted point-goal expert.
pub const EXPERT_GAIN: f64 = 0.5;
const START_JITTER: f64 = 0.05;
/// Direction-family positions are observed in units of this many steps.
const DIR_POS_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub task_id: usize,
    /// Sector centre angle (point-goal) or direction angle, radians.
    pub angle: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    /// Point-goal only.
    pub success_threshold: f64,
    /// Point-goal goal radius range `[min, max]`.
    pub goal_radius: [f64; 2],
    /// Point-goal half angular width of the goal sector.
    pub goal_half_width: f64,
    /// When false the goal slots of the observation are zero.
    pub goal_observed: bool,
}

impl TaskSpec {
    pub fn point_goal(task_id: usize, angle: f64) -> Self {
        Self {
            family: Family::PointGoal,
            task_id,
            angle,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            horizon: 32,
            success_threshold: 0.1,
            goal_radius: [0.9, 1.0],
            goal_half_width: 0.05,
            goal_observed: false,
        }
    }

    pub fn direction(task_id: usize, angle: f64) -> Self {
        Self {
            family: Family::Direction,
            task_id,
            angle,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            horizon: 32,
            success_threshold: 0.0,
            goal_radius: [0.0, 0.0],
            goal_half_width: 0.0,
            goal_observed: false,
        }
    }

    /// Unit direction (direction family) or sector axis (point-goal).
    pub fn direction_vector(&self) -> [f64; 2] {
        [self.angle.cos(), self.angle.sin()]
    }

    fn validate(&self) -> Result<()> {
        if self.state_dim != STATE_DIM || self.action_dim != ACTION_DIM {
            return Err(Error::config(format!(
                "task {} must use state_dim {STATE_DIM} and action_dim {ACTION_DIM}",
                self.task_id
            )));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        if self.family == Family::PointGoal {
            let [lo, hi] = self.goal_radius;
            if !(lo > 0.0 && hi > lo && self.goal_half_width > 0.0) {
                return Err(Error::config(format!(
                    "task {} has a degenerate goal region",
                    self.task_id
                )));
            }
            if !(self.success_threshold > 0.0) {
                return Err(Error::config("success threshold must be positive"));
            }
        }
        Ok(())
    }
}

/// Full simulator state; observations are derived from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    pub vel: [f64; 2],
    pub t: usize,
}

impl EnvState {
    pub fn at(pos: [f64; 2], goal: [f64; 2]) -> Self {
        Self {
            pos,
            goal,
            vel: [0.0, 0.0],
            t: 0,
        }
    }
}

/// Projects an action onto the unit disk.
pub fn clamp_action(a: [f64; 2]) -> [f64; 2] {
    let a = [
        if a[0].is_finite() { a[0] } else { 0.0 },
        if a[1].is_finite() { a[1] } else { 0.0 },
    ];
    let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
    if n > 1.0 {
        [a[0] / n, a[1] / n]
    } else {
        a
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Samples a start state (and a fresh goal, for point-goal tasks).
pub fn reset<R: Rng>(task: &TaskSpec, rng: &mut R) -> EnvState {
    let pos = [
        rng.gen_range(-START_JITTER..=START_JITTER),
        rng.gen_range(-START_JITTER..=START_JITTER),
    ];
    let goal = match task.family {
        Family::PointGoal => {
            let r = rng.gen_range(task.goal_radius[0]..=task.goal_radius[1]);
            let a = task.angle + rng.gen_range(-task.goal_half_width..=task.goal_half_width);
            [r * a.cos(), r * a.sin()]
        }
        Family::Direction => [0.0, 0.0],
    };
    EnvState::at(pos, goal)
}

pub fn observe(task: &TaskSpec, s: &EnvState) -> [f64; STATE_DIM] {
    match task.family {
        Family::PointGoal => {
            let g = if task.goal_observed { s.goal } else { [0.0, 0.0] };
            [s.pos[0], s.pos[1], g[0], g[1]]
        }
        Family::Direction => [
            s.pos[0] * DIR_POS_SCALE,
            s.pos[1] * DIR_POS_SCALE,
            s.vel[0],
            s.vel[1],
        ],
    }
}

/// Deterministic transition. Returns `(next_state, reward, done)`.
pub fn step(task: &TaskSpec, s: &EnvState, action: [f64; 2]) -> (EnvState, f64, bool) {
    let a = clamp_action(action);
    let mut next = *s;
    next.pos = [s.pos[0] + a[0], s.pos[1] + a[1]];
    next.vel = a;
    next.t = s.t + 1;
    let reward = match task.family {
        Family::PointGoal => -dist(next.pos, next.goal),
        Family::Direction => {
            let d = task.direction_vector();
            a[0] * d[0] + a[1] * d[1]
        }
    };
    (next, reward, next.t >= task.horizon)
}

pub fn is_success(task: &TaskSpec, s: &EnvState) -> bool {
    match task.family {
        Family::PointGoal => dist(s.pos, s.goal) < task.success_threshold,
        Family::Direction => false,
    }
}

/// The scripted expert: proportional control toward the goal, or full speed
/// along the direction.
pub fn expert_action(task: &TaskSpec, s: &EnvState) -> [f64; 2] {
    match task.family {
        Family::PointGoal => clamp_action([
            EXPERT_GAIN * (s.goal[0] - s.pos[0]),
            EXPERT_GAIN * (s.goal[1] - s.pos[1]),
        ]),
        Family::Direction => task.direction_vector(),
    }
}

/// A named set of tasks sharing one action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
    /// Task ids withheld from training for the unseen-task protocol.
    pub held_out: Vec<usize>,
}

impl Suite {
    pub fn new(name: impl Into<String>, tasks: Vec<TaskSpec>, held_out: Vec<usize>) -> Result<Self> {
        let name = name.into();
        let Some(first) = tasks.first() else {
            return Err(Error::config("a suite needs at least one task"));
        };
        let action_dim = first.action_dim;
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            if t.action_dim != action_dim {
                return Err(Error::config(format!(
                    "task {} has action_dim {} but the suite uses {action_dim}",
                    t.task_id, t.action_dim
                )));
            }
            if t.task_id != i {
                return Err(Error::config("task ids must be 0..N in order"));
            }
        }
        if let Some(&bad) = held_out.iter().find(|&&h| h >= tasks.len()) {
            return Err(Error::config(format!("held-out task {bad} does not exist")));
        }
        Ok(Self {
            name,
            tasks,
            held_out,
        })
    }

    /// Eight point-goal tasks whose goal sectors sit at 45° increments.
    pub fn point_goal_8() -> Self {
        let tasks = (0..8)
            .map(|i| TaskSpec::point_goal(i, i as f64 * std::f64::consts::FRAC_PI_4))
            .collect();
        Self::new("pointgoal-8", tasks, vec![]).expect("static suite is valid")
    }

    /// Eight unit directions at 45° increments; tasks 2 and 5 are held out.
    pub fn dir_8() -> Self {
        let tasks = (0..8)
            .map(|i| TaskSpec::direction(i, i as f64 * std::f64::consts::FRAC_PI_4))
            .collect();
        Self::new("dir-8", tasks, vec![2, 5]).expect("static suite is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pointgoal-8" => Ok(Self::point_goal_8()),
            "dir-8" => Ok(Self::dir_8()),
            other => Err(Error::config(format!(
                "unknown suite {other}; expected pointgoal-8 or dir-8"
            ))),
        }
    }

    pub fn family(&self) -> Family {
        self.tasks[0].family
    }

    pub fn training_tasks(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|i| !self.held_out.contains(i))
            .collect()
    }

    pub fn state_dim(&self) -> usize {
        self.tasks[0].state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.tasks[0].action_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn at_goal_with_zero_action() {
        let task = TaskSpec::point_goal(0, 0.0);
        let s = EnvState::at([0.95, 0.0], [0.95, 0.0]);
        let (n, r, _) = step(&task, &s, [0.0, 0.0]);
        assert_eq!(r, 0.0);
        assert!(is_success(&task, &n));
    }

    #[test]
    fn aligned_unit_action_earns_one() {
        let task = TaskSpec::direction(0, 0.0);
        let (_, r, _) = step(&task, &EnvState::at([0.0, 0.0], [0.0, 0.0]), [1.0, 0.0]);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn proportional_controller_halves_distance() {
        // Closed form: d_t = d_0 (1 - k)^t with k = 0.5, so d_4 = 1/16 < 0.1 and d_3 = 1/8.
        let task = TaskSpec::point_goal(0, 0.0);
        let mut s = EnvState::at([0.0, 0.0], [1.0, 0.0]);
        let mut first_success = None;
        for t in 1..=6 {
            let a = [0.5 * (s.goal[0] - s.pos[0]), 0.5 * (s.goal[1] - s.pos[1])];
            let (n, r, _) = step(&task, &s, a);
            let expected = 0.5f64.powi(t);
            assert!((-r - expected).abs() < 1e-12);
            if is_success(&task, &n) && first_success.is_none() {
                first_success = Some(t);
            }
            s = n;
        }
        assert_eq!(first_success, Some(4));
    }

    #[test]
    fn expert_succeeds_from_every_start() {
        let suite = Suite::point_goal_8();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for task in &suite.tasks {
            for _ in 0..50 {
                let mut s = reset(task, &mut rng);
                let mut ok = false;
                for _ in 0..32 {
                    let (n, _, _) = step(task, &s, expert_action(task, &s));
                    s = n;
                    ok |= is_success(task, &s);
                }
                assert!(ok);
            }
        }
    }

    #[test]
    fn step_is_deterministic_and_clamps() {
        let task = TaskSpec::point_goal(1, 1.0);
        let s = EnvState::at([0.0, 0.0], [0.5, 0.5]);
        let a = step(&task, &s, [3.0, 4.0]);
        let b = step(&task, &s, [3.0, 4.0]);
        assert_eq!(a, b);
        assert!((a.0.pos[0] - 0.6).abs() < 1e-12 && (a.0.pos[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn suites_share_action_space() {
        for s in [Suite::point_goal_8(), Suite::dir_8()] {
            assert_eq!(s.tasks.len(), 8);
            for t in &s.tasks {
                let d = t.direction_vector();
                assert!(((d[0] * d[0] + d[1] * d[1]) - 1.0).abs() < 1e-12);
            }
        }
        let mut bad = TaskSpec::direction(1, 0.0);
        bad.action_dim = 3;
        assert!(Suite::new("x", vec![TaskSpec::direction(0, 0.0), bad], vec![]).is_err());
        assert_eq!(Suite::dir_8().training_tasks(), vec![0, 1, 3, 4, 6, 7]);
    }
}
