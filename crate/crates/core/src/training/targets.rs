use crate::navsim::{
    map_viewpoint_to_subinstruction, Episode, Observation, SceneGraph, ViewpointId,
};
use crate::tensor::Matrix;

pub const TARGET_CURRENT: f64 = 1.0;
pub const TARGET_NEXT: f64 = 0.5;
pub const TARGET_OTHER: f64 = -1.0;

/// Regression targets for the `cls`→word attention rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTarget {
    /// Row `i` belongs to step `i + 1`; one column per instruction word.
    pub rows: Matrix,
}

/// Builds one target row per step `1..=t` from the agent's viewpoint at that step.
///
/// Word `j` gets 1 inside the sub-instruction the viewpoint maps to, 0.5
/// inside the following one and −1 everywhere else.
pub fn build_attention_target(
    episode: &Episode,
    trajectory: &[ViewpointId],
    t: usize,
    scene: &SceneGraph,
) -> AttentionTarget {
    let l = episode.instruction.len();
    let mut rows = Matrix::zeros(t, l);
    for (i, &v) in trajectory.iter().take(t).enumerate() {
        let current = map_viewpoint_to_subinstruction(episode, v, scene);
        let next = episode.sub_instructions.get(current + 1);
        let cur = &episode.sub_instructions[current];
        for (j, g) in rows.row_mut(i).iter_mut().enumerate() {
            *g = if cur.contains_token(j) {
                TARGET_CURRENT
            } else if next.is_some_and(|s| s.contains_token(j)) {
                TARGET_NEXT
            } else {
                TARGET_OTHER
            };
        }
    }
    AttentionTarget { rows }
}

/// The next hop of a geodesic shortest path to the goal.
///
/// Among the neighbors, the teacher takes the one minimizing edge length plus
/// remaining distance, so following it always travels an optimal-length path.
/// Ties go to the endpoint closer to the goal, then to the lowest index. Stop
/// is chosen only when the agent is within the success radius and no
/// neighbor's endpoint is strictly closer.
pub fn teacher_action(
    scene: &SceneGraph,
    episode: &Episode,
    obs: &Observation,
    success_radius: f64,
) -> usize {
    let goal = episode.goal();
    let here = scene
        .shortest_path_distance(obs.current_viewpoint, goal)
        .unwrap_or(f64::INFINITY);
    let mut best = obs.stop_index();
    let mut best_key = (f64::INFINITY, f64::INFINITY);
    for (i, c) in obs.candidate_actions.iter().enumerate() {
        if let Some(target) = c.target {
            let rest = scene
                .shortest_path_distance(target, goal)
                .unwrap_or(f64::INFINITY);
            let via = scene
                .edge_length(obs.current_viewpoint, target)
                .unwrap_or(f64::INFINITY)
                + rest;
            // sums along different routes may differ in the last bits
            let tol = 1e-9 * via.max(1.0);
            if via < best_key.0 - tol || (via <= best_key.0 + tol && rest < best_key.1) {
                best_key = (via, rest);
                best = i;
            }
        }
    }
    if obs.current_viewpoint == goal || (here <= success_radius && here <= best_key.1) {
        obs.stop_index()
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{env_reset, generate_dataset, GeneratorConfig, Split, SubInstruction};

    fn toy() -> (Episode, SceneGraph) {
        let data = generate_dataset(&GeneratorConfig::small(), 0).unwrap();
        let mut ep = data.split(Split::Train)[0].clone();
        let scene = data.scene(&ep.scene_id).unwrap().clone();
        // three segments over a 6-word instruction
        let p = ep.path.clone();
        ep.instruction = vec![10, 11, 12, 13, 14, 15];
        ep.path = p[..4].to_vec();
        ep.sub_instructions = vec![
            SubInstruction {
                tokens: (0, 2),
                viewpoints: vec![p[0]],
            },
            SubInstruction {
                tokens: (2, 4),
                viewpoints: vec![p[1]],
            },
            SubInstruction {
                tokens: (4, 6),
                viewpoints: vec![p[2], p[3]],
            },
        ];
        (ep, scene)
    }

    #[test]
    fn current_next_other_pattern() {
        let (ep, scene) = toy();
        let g = build_attention_target(&ep, &ep.path[..1], 1, &scene);
        assert_eq!(g.rows.row(0), &[1.0, 1.0, 0.5, 0.5, -1.0, -1.0]);
    }

    #[test]
    fn last_subinstruction_has_no_half_targets() {
        let (ep, scene) = toy();
        let g = build_attention_target(&ep, &[ep.path[3]], 1, &scene);
        assert_eq!(g.rows.row(0), &[-1.0, -1.0, -1.0, -1.0, 1.0, 1.0]);
        assert!(g.rows.data.iter().all(|&x| x == 1.0 || x == -1.0));
    }

    #[test]
    fn one_row_per_step() {
        let (ep, scene) = toy();
        let g = build_attention_target(&ep, &ep.path, 3, &scene);
        assert_eq!(g.rows.shape(), (3, 6));
        assert_eq!(g.rows.row(1), &[-1.0, -1.0, 1.0, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn teacher_stops_only_at_goal_and_moves_closer_otherwise() {
        let data = generate_dataset(&GeneratorConfig::small(), 2).unwrap();
        for ep in data.split(Split::Train) {
            let scene = data.scene(&ep.scene_id).unwrap();
            let obs = env_reset(ep, &data).unwrap();
            let a = teacher_action(scene, ep, &obs, 3.0);
            assert_ne!(a, obs.stop_index());
            let next = obs.candidate_actions[a].target.unwrap();
            assert!(
                scene.shortest_path_distance(next, ep.goal()).unwrap()
                    < scene.shortest_path_distance(ep.start(), ep.goal()).unwrap()
            );
        }
    }
}
