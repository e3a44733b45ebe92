//! 2-D point-mass reaching around a central disc obstacle.
//!
//! Observation is `[x, y, goal_x, goal_y]`; an action is a 2-D velocity
//! command in `[-1, 1]²` scaled by the step size. Policies emit `H`-step
//! chunks that are executed open-loop before the policy is queried again.

use serde::{Deserialize, Serialize};

use crate::diffusion::Demonstration;
use crate::error::{Error, Result};
use crate::ndnum::{Rng, Tensor2};

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Lateral offset of the expert's detour waypoint above or below the obstacle.
const WAYPOINT_OFFSET: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassEnv {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub obstacle_center: [f64; 2],
    pub obstacle_radius: f64,
    pub step_size: f64,
    pub max_steps: usize,
    pub success_radius: f64,
    /// Start positions are jittered uniformly by up to this much per axis.
    pub start_jitter: f64,
    pub horizon: usize,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        Self {
            start: [-0.8, 0.0],
            goal: [0.8, 0.0],
            obstacle_center: [0.0, 0.0],
            obstacle_radius: 0.25,
            step_size: 0.05,
            max_steps: 100,
            success_radius: 0.1,
            start_jitter: 0.05,
            horizon: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub collided: bool,
    pub steps: usize,
    pub trajectory: Vec<[f64; 2]>,
}

enum StepOutcome {
    Moving,
    Collided,
    Reached,
}

impl PointMassEnv {
    pub fn observation(&self, pos: [f64; 2]) -> Vec<f64> {
        vec![pos[0], pos[1], self.goal[0], self.goal[1]]
    }

    pub fn reset(&self, rng: &mut Rng) -> [f64; 2] {
        let j = self.start_jitter;
        [
            self.start[0] + rng.uniform(-j, j),
            self.start[1] + rng.uniform(-j, j),
        ]
    }

    /// Position after applying `action` (components clipped to `[-1, 1]`,
    /// position clipped to the arena).
    fn advance(&self, pos: [f64; 2], action: [f64; 2]) -> [f64; 2] {
        let mut next = [0.0; 2];
        for k in 0..2 {
            let a = action[k].clamp(-1.0, 1.0);
            next[k] = (pos[k] + self.step_size * a).clamp(-1.0, 1.0);
        }
        next
    }

    /// Whether the segment `a → b` enters the obstacle disc.
    pub fn segment_hits_obstacle(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let c = self.obstacle_center;
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let u = if len2 > 0.0 {
            (((c[0] - a[0]) * d[0] + (c[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let p = [a[0] + u * d[0], a[1] + u * d[1]];
        (p[0] - c[0]).hypot(p[1] - c[1]) < self.obstacle_radius
    }

    fn step(&self, pos: &mut [f64; 2], action: [f64; 2]) -> StepOutcome {
        let next = self.advance(*pos, action);
        let hit = self.segment_hits_obstacle(*pos, next);
        *pos = next;
        if hit {
            StepOutcome::Collided
        } else if (pos[0] - self.goal[0]).hypot(pos[1] - self.goal[1]) <= self.success_radius {
            StepOutcome::Reached
        } else {
            StepOutcome::Moving
        }
    }

    /// The scripted expert's next action when detouring on `side` (+1 above,
    /// −1 below the obstacle).
    pub fn expert_action(&self, pos: [f64; 2], side: f64) -> [f64; 2] {
        let target = if pos[0] < self.obstacle_center[0] {
            [self.obstacle_center[0], self.obstacle_center[1] + side * WAYPOINT_OFFSET]
        } else {
            self.goal
        };
        let d = [target[0] - pos[0], target[1] - pos[1]];
        let dist = d[0].hypot(d[1]);
        if dist == 0.0 {
            return [0.0, 0.0];
        }
        let speed = (dist / self.step_size).min(1.0);
        [speed * d[0] / dist, speed * d[1] / dist]
    }

    /// The expert's next `H` actions from `pos`, as an `H × 2` chunk.
    pub fn expert_chunk(&self, pos: [f64; 2], side: f64) -> Tensor2 {
        let mut chunk = Tensor2::zeros(self.horizon, ACTION_DIM);
        let mut p = pos;
        for h in 0..self.horizon {
            let a = self.expert_action(p, side);
            chunk.row_mut(h).copy_from_slice(&a);
            p = self.advance(p, a);
        }
        chunk
    }

    /// Expert policy usable with [`rollout`]; picks the detour side from the
    /// sign of the current lateral position.
    pub fn expert_policy(&self) -> impl FnMut(&[f64], &mut Rng) -> Result<Tensor2> + '_ {
        move |obs: &[f64], _rng: &mut Rng| {
            let side = if obs[1] >= self.obstacle_center[1] { 1.0 } else { -1.0 };
            Ok(self.expert_chunk([obs[0], obs[1]], side))
        }
    }
}

/// Runs one episode, executing each returned chunk open-loop.
///
/// The episode ends on success, collision, or `max_steps`. A chunk containing
/// NaN ends the episode as a failure without collision.
pub fn rollout<P>(policy: &mut P, env: &PointMassEnv, rng: &mut Rng) -> Result<EpisodeResult>
where
    P: FnMut(&[f64], &mut Rng) -> Result<Tensor2>,
{
    let mut pos = env.reset(rng);
    let mut trajectory = vec![pos];
    let mut steps = 0;
    let finish = |success, collided, steps, trajectory| {
        Ok(EpisodeResult {
            success,
            collided,
            steps,
            trajectory,
        })
    };
    while steps < env.max_steps {
        let chunk = policy(&env.observation(pos), rng)?;
        if chunk.cols() != ACTION_DIM || chunk.rows() == 0 {
            return Err(Error::shape("policy chunk width", ACTION_DIM, chunk.cols()));
        }
        if !chunk.is_finite() {
            return finish(false, false, steps, trajectory);
        }
        for h in 0..chunk.rows() {
            if steps >= env.max_steps {
                break;
            }
            let outcome = env.step(&mut pos, [chunk.get(h, 0), chunk.get(h, 1)]);
            steps += 1;
            trajectory.push(pos);
            match outcome {
                StepOutcome::Collided => return finish(false, true, steps, trajectory),
                StepOutcome::Reached => return finish(true, false, steps, trajectory),
                StepOutcome::Moving => {}
            }
        }
    }
    finish(false, false, steps, trajectory)
}

/// Scripted demonstrations alternating above/below detours, sliced into
/// `(observation, H-step chunk)` pairs at every step of every episode.
/// Actions are in raw units (already within `[-1, 1]`).
pub fn gen_pointmass_demos(
    env: &PointMassEnv,
    n_episodes: usize,
    seed: u64,
) -> Result<(Vec<Demonstration>, Vec<EpisodeResult>)> {
    if n_episodes < 2 {
        return Err(Error::Config("need at least 2 episodes".into()));
    }
    let root = Rng::new(seed);
    let mut demos = Vec::new();
    let mut episodes = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let side = if e % 2 == 0 { 1.0 } else { -1.0 };
        let mut rng = root.derive(e as u64);
        let mut pos = env.reset(&mut rng);
        let mut trajectory = vec![pos];
        let mut result = None;
        for step in 0..env.max_steps {
            demos.push(Demonstration {
                obs: env.observation(pos),
                actions: env.expert_chunk(pos, side),
            });
            let action = env.expert_action(pos, side);
            let outcome = env.step(&mut pos, action);
            trajectory.push(pos);
            match outcome {
                StepOutcome::Moving => {}
                StepOutcome::Collided | StepOutcome::Reached => {
                    result = Some((matches!(outcome, StepOutcome::Reached), step + 1));
                    break;
                }
            }
        }
        let (success, steps) = result.unwrap_or((false, env.max_steps));
        episodes.push(EpisodeResult {
            success,
            collided: !success && steps < env.max_steps,
            steps,
            trajectory,
        });
    }
    Ok((demos, episodes))
}
