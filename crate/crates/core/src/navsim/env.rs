use serde::{Deserialize, Serialize};

use super::{Dataset, Episode, ViewpointId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Moves after which the agent is forced to stop.
    pub action_limit: usize,
    /// Geodesic distance to the goal within which a stop counts as success.
    pub success_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            action_limit: 15,
            success_radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateAction {
    /// `None` for the stop action.
    pub target: Option<ViewpointId>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub current_viewpoint: ViewpointId,
    /// Neighbors in ascending id order, then the stop entry.
    pub candidate_actions: Vec<CandidateAction>,
    pub steps_taken: usize,
    pub trajectory: Vec<ViewpointId>,
}

impl Observation {
    pub fn stop_index(&self) -> usize {
        self.candidate_actions.len() - 1
    }

    pub fn candidate_count(&self) -> usize {
        self.candidate_actions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalResult {
    pub trajectory: Vec<ViewpointId>,
    /// Moves plus the voluntary stop, if any.
    pub action_count: usize,
    pub forced: bool,
    pub success: bool,
    pub nav_error: f64,
    pub path_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue(Observation),
    Terminal(TerminalResult),
}

fn observe(
    episode: &Episode,
    data: &Dataset,
    at: ViewpointId,
    steps_taken: usize,
    trajectory: Vec<ViewpointId>,
) -> Result<Observation> {
    let scene = data.scene(&episode.scene_id)?;
    let vp = scene.viewpoint(at)?;
    let mut candidate_actions: Vec<CandidateAction> = vp
        .candidate_features
        .iter()
        .map(|(&target, f)| CandidateAction {
            target: Some(target),
            feature: f.clone(),
        })
        .collect();
    candidate_actions.push(CandidateAction {
        target: None,
        feature: vec![0.0; scene.d_view()],
    });
    Ok(Observation {
        current_viewpoint: at,
        candidate_actions,
        steps_taken,
        trajectory,
    })
}

pub fn env_reset(episode: &Episode, data: &Dataset) -> Result<Observation> {
    let start = episode.start();
    observe(episode, data, start, 0, vec![start])
}

pub fn env_step(
    obs: &Observation,
    action_index: usize,
    episode: &Episode,
    data: &Dataset,
    config: &EnvConfig,
) -> Result<StepOutcome> {
    let count = obs.candidate_count();
    if action_index >= count {
        return Err(Error::ActionOutOfRange {
            index: action_index,
            count,
        });
    }
    data.scene(&episode.scene_id)?;
    match obs.candidate_actions[action_index].target {
        None => Ok(StepOutcome::Terminal(finish(
            obs.trajectory.clone(),
            obs.steps_taken + 1,
            false,
            episode,
            data,
            config,
        )?)),
        Some(next) => {
            let mut trajectory = obs.trajectory.clone();
            trajectory.push(next);
            let steps = obs.steps_taken + 1;
            if steps >= config.action_limit {
                Ok(StepOutcome::Terminal(finish(
                    trajectory, steps, true, episode, data, config,
                )?))
            } else {
                Ok(StepOutcome::Continue(observe(
                    episode, data, next, steps, trajectory,
                )?))
            }
        }
    }
}

fn finish(
    trajectory: Vec<ViewpointId>,
    action_count: usize,
    forced: bool,
    episode: &Episode,
    data: &Dataset,
    config: &EnvConfig,
) -> Result<TerminalResult> {
    let scene = data.scene(&episode.scene_id)?;
    let last = *trajectory.last().expect("non-empty trajectory");
    let nav_error = scene.shortest_path_distance(last, episode.goal())?;
    let path_length = scene.path_length(&trajectory)?;
    Ok(TerminalResult {
        trajectory,
        action_count,
        forced,
        success: nav_error <= config.success_radius,
        nav_error,
        path_length,
    })
}
