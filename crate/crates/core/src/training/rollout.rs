use rand::distributions::{Distribution, WeightedIndex};
use rand_chacha::ChaCha8Rng;

use super::losses::{
    attention_grad, attention_loss, cross_entropy_grad, discounted_returns, imitation_loss,
    log_softmax, rl_loss,
};
use super::targets::{build_attention_target, teacher_action};
use crate::error::{Error, Result};
use crate::navsim::{
    env_reset, env_step, Dataset, EnvConfig, Episode, StepOutcome, TerminalResult, ViewpointId,
};
use crate::policy::{encode_nodes, matching_nodes, step_nodes, word_memory_nodes, PolicyParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::{argmax, softmax, Matrix};

/// How a rollout picks its actions.
pub enum ActionSource<'r> {
    /// Follow the geodesic teacher (imitation).
    Teacher,
    /// Argmax of the policy scores; ties go to the lowest index.
    Greedy,
    /// Sample from `softmax(scores)`.
    Sample(&'r mut ChaCha8Rng),
    /// Replay a fixed action sequence.
    Forced(&'r [usize]),
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub viewpoint: ViewpointId,
    pub trajectory: Vec<ViewpointId>,
    pub action: usize,
    pub teacher_action: usize,
    pub scores: Vec<f64>,
    pub value: f64,
    pub attention_rows: Matrix,
    pub reward: f64,
    score_node: NodeId,
    value_node: NodeId,
    attention_node: NodeId,
}

/// Weights of the three loss terms for one rollout plus the actor-critic constants.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub il: f64,
    pub rl: f64,
    pub attn: f64,
    pub gamma: f64,
    pub critic_weight: f64,
    /// Replaces `returns − values` when set, one entry per step.
    pub frozen_advantages: Option<Vec<f64>>,
}

/// Unweighted loss terms of one rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub il: f64,
    pub rl: f64,
    pub attn: f64,
}

/// One gradient per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            blocks: params
                .blocks
                .iter()
                .map(|b| Matrix::zeros(b.rows, b.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.scale_assign(s);
        }
    }

    /// Fails with the name of the first block holding a NaN or infinity.
    pub fn check_finite(&self, params: &PolicyParams) -> Result<()> {
        for (g, spec) in self.blocks.iter().zip(&params.layout().specs) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(spec.name.clone()));
            }
        }
        Ok(())
    }
}

/// A finished episode with its computation graph kept for backpropagation.
pub struct Rollout<'a> {
    tape: Tape<'a>,
    params: &'a PolicyParams,
    pub steps: Vec<StepRecord>,
    pub result: TerminalResult,
}

impl<'a> Rollout<'a> {
    pub fn run(
        params: &'a PolicyParams,
        episode: &Episode,
        data: &Dataset,
        env: &EnvConfig,
        mut source: ActionSource<'_>,
    ) -> Result<Self> {
        let scene = data.scene(&episode.scene_id)?;
        let goal = episode.goal();
        let mut tape = Tape::new(&params.blocks);
        let features = encode_nodes(&mut tape, params, &episode.instruction)?;
        let memory = word_memory_nodes(&mut tape, params, features);
        let mut cls = tape.slice_rows(features, 0, 1);
        let mut history: Vec<NodeId> = Vec::new();
        let mut obs = env_reset(episode, data)?;
        let mut steps = Vec::new();

        let result = loop {
            let candidates = crate::policy::candidate_matrix(&obs, params.dims.d_view)?;
            let nodes = step_nodes(
                &mut tape,
                params,
                &memory,
                cls,
                &history,
                candidates,
                episode.instruction.len(),
            );
            let scores = tape.value(nodes.scores).data.clone();
            let teacher = teacher_action(scene, episode, &obs, env.success_radius);
            let action = match &mut source {
                ActionSource::Teacher => teacher,
                ActionSource::Greedy => argmax(&scores),
                ActionSource::Sample(rng) => WeightedIndex::new(softmax(&scores))
                    .map_err(|e| {
                        Error::Shape(format!("cannot sample from scores {scores:?}: {e}"))
                    })?
                    .sample(*rng),
                ActionSource::Forced(actions) => {
                    *actions
                        .get(steps.len())
                        .ok_or_else(|| Error::ActionOutOfRange {
                            index: steps.len(),
                            count: actions.len(),
                        })?
                }
            };
            let before = scene.shortest_path_distance(obs.current_viewpoint, goal)?;
            let mut record = StepRecord {
                viewpoint: obs.current_viewpoint,
                trajectory: obs.trajectory.clone(),
                action,
                teacher_action: teacher,
                value: tape.value(nodes.value).data[0],
                attention_rows: tape.value(nodes.attention_rows).clone(),
                scores,
                reward: 0.0,
                score_node: nodes.scores,
                value_node: nodes.value,
                attention_node: nodes.attention_rows,
            };
            match env_step(&obs, action, episode, data, env)? {
                StepOutcome::Terminal(done) => {
                    let last = *done.trajectory.last().expect("non-empty trajectory");
                    let bonus = if done.success { 2.0 } else { -2.0 };
                    record.reward = before - scene.shortest_path_distance(last, goal)? + bonus;
                    steps.push(record);
                    break done;
                }
                StepOutcome::Continue(next) => {
                    record.reward =
                        before - scene.shortest_path_distance(next.current_viewpoint, goal)?;
                    steps.push(record);
                    let next_cls = matching_nodes(
                        &mut tape,
                        params,
                        nodes.cls_out,
                        nodes.candidates_out,
                        action,
                    );
                    if params.variant.keeps_history() {
                        history.push(cls);
                    }
                    cls = next_cls;
                    obs = next;
                }
            }
        };
        Ok(Self {
            tape,
            params,
            steps,
            result,
        })
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let rewards: Vec<f64> = self.steps.iter().map(|s| s.reward).collect();
        discounted_returns(&rewards, gamma)
    }

    pub fn advantages(&self, gamma: f64) -> Vec<f64> {
        self.returns(gamma)
            .iter()
            .zip(&self.steps)
            .map(|(r, s)| r - s.value)
            .collect()
    }

    /// Attention targets for every step; the original variant only has the current row.
    fn attention_targets(
        &self,
        episode: &Episode,
        data: &Dataset,
    ) -> Result<Vec<super::AttentionTarget>> {
        let scene = data.scene(&episode.scene_id)?;
        Ok(self
            .steps
            .iter()
            .map(|s| {
                if self.params.variant.keeps_history() {
                    build_attention_target(episode, &s.trajectory, s.trajectory.len(), scene)
                } else {
                    build_attention_target(episode, &[s.viewpoint], 1, scene)
                }
            })
            .collect())
    }

    /// Unweighted loss terms; `rl` includes the weighted critic term.
    pub fn loss_terms(
        &self,
        episode: &Episode,
        data: &Dataset,
        spec: &LossSpec,
    ) -> Result<LossTerms> {
        let scores: Vec<Vec<f64>> = self.steps.iter().map(|s| s.scores.clone()).collect();
        let teacher: Vec<usize> = self.steps.iter().map(|s| s.teacher_action).collect();
        let values: Vec<f64> = self.steps.iter().map(|s| s.value).collect();
        let returns = self.returns(spec.gamma);
        let rl = rl_loss(
            &scores,
            &self.actions(),
            &returns,
            &values,
            spec.frozen_advantages.as_deref(),
        );
        let mut attn = 0.0;
        for (s, g) in self
            .steps
            .iter()
            .zip(self.attention_targets(episode, data)?)
        {
            attn += attention_loss(&s.attention_rows, &g, s.attention_rows.rows)?;
        }
        Ok(LossTerms {
            il: imitation_loss(&scores, &teacher),
            rl: rl.total(spec.critic_weight),
            attn,
        })
    }

    /// Weighted scalar objective `il·w_il + rl·w_rl + attn·w_attn`.
    pub fn objective(&self, episode: &Episode, data: &Dataset, spec: &LossSpec) -> Result<f64> {
        let t = self.loss_terms(episode, data, spec)?;
        Ok(spec.il * t.il + spec.rl * t.rl + spec.attn * t.attn)
    }

    /// Loss terms and the gradient of the weighted objective.
    pub fn gradient(
        &self,
        episode: &Episode,
        data: &Dataset,
        spec: &LossSpec,
    ) -> Result<(LossTerms, Gradients)> {
        let terms = self.loss_terms(episode, data, spec)?;
        let advantages = match &spec.frozen_advantages {
            Some(a) => a.clone(),
            None => self.advantages(spec.gamma),
        };
        let returns = self.returns(spec.gamma);
        let targets = if spec.attn != 0.0 {
            self.attention_targets(episode, data)?
        } else {
            Vec::new()
        };
        let mut seeds = Vec::new();
        let per_step = 1.0 / self.steps.len() as f64;
        for (t, s) in self.steps.iter().enumerate() {
            let mut g = vec![0.0; s.scores.len()];
            if spec.il != 0.0 {
                for (gi, ce) in g
                    .iter_mut()
                    .zip(cross_entropy_grad(&s.scores, s.teacher_action))
                {
                    *gi += spec.il * ce;
                }
            }
            if spec.rl != 0.0 {
                // −A·log p(a): gradient A·(softmax − onehot)
                let p: Vec<f64> = log_softmax(&s.scores).into_iter().map(f64::exp).collect();
                for (i, (gi, pi)) in g.iter_mut().zip(p).enumerate() {
                    let onehot = if i == s.action { 1.0 } else { 0.0 };
                    *gi += spec.rl * per_step * advantages[t] * (pi - onehot);
                }
                let dv = spec.rl * per_step * spec.critic_weight * 2.0 * (s.value - returns[t]);
                seeds.push((s.value_node, Matrix::from_vec(1, 1, vec![dv])));
            }
            seeds.push((s.score_node, Matrix::row_vector(g)));
            if spec.attn != 0.0 {
                let mut ga = attention_grad(&s.attention_rows, &targets[t], s.attention_rows.rows)?;
                ga.scale_assign(spec.attn);
                seeds.push((s.attention_node, ga));
            }
        }
        let grads = Gradients {
            blocks: self.tape.backward(&seeds),
        };
        grads.check_finite(self.params)?;
        Ok((terms, grads))
    }
}

/// Greedy single-model rollouts; one terminal result per episode, in order.
pub fn evaluate_greedy(
    params: &PolicyParams,
    episodes: &[Episode],
    data: &Dataset,
    env: &EnvConfig,
) -> Result<Vec<TerminalResult>> {
    episodes
        .iter()
        .map(|ep| Rollout::run(params, ep, data, env, ActionSource::Greedy).map(|r| r.result))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{generate_dataset, GeneratorConfig, Split};
    use crate::policy::{predict, update_state, PolicyDims, PolicyState, Variant};
    use rand::SeedableRng;

    fn setup(variant: Variant) -> (Dataset, PolicyParams) {
        let data = generate_dataset(&GeneratorConfig::small(), 5).unwrap();
        let dims = PolicyDims {
            vocab_size: data.vocabulary.size,
            max_instruction_len: data.max_instruction_len(),
            d_view: data.d_view(),
            d_emb: 8,
            d_model: 8,
            d_ff: 8,
            self_layers: 1,
            cross_layers: 2,
        };
        let params = PolicyParams::init(variant, dims, 9).unwrap();
        (data, params)
    }

    #[test]
    fn teacher_rollout_succeeds_with_zero_error() {
        let (data, params) = setup(Variant::Original);
        for ep in data.split(Split::ValUnseen) {
            let r = Rollout::run(
                &params,
                ep,
                &data,
                &EnvConfig::default(),
                ActionSource::Teacher,
            )
            .unwrap();
            assert!(r.result.success);
            assert_eq!(r.result.nav_error, 0.0);
        }
    }

    #[test]
    fn tape_rollout_matches_value_level_inference() {
        for variant in Variant::ALL {
            let (data, params) = setup(variant);
            let ep = &data.split(Split::Train)[0];
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let r = Rollout::run(
                &params,
                ep,
                &data,
                &EnvConfig::default(),
                ActionSource::Sample(&mut rng),
            )
            .unwrap();
            let mut state = PolicyState::new(&params, &ep.instruction).unwrap();
            let mut obs = env_reset(ep, &data).unwrap();
            for s in &r.steps {
                let out = predict(&params, &state, &obs).unwrap();
                assert_eq!(out.scores, s.scores);
                assert_eq!(out.value, s.value);
                assert_eq!(out.attention_rows, s.attention_rows);
                match env_step(&obs, s.action, ep, &data, &EnvConfig::default()).unwrap() {
                    StepOutcome::Continue(next) => {
                        state = update_state(&params, &state, &out, s.action).unwrap();
                        obs = next;
                    }
                    StepOutcome::Terminal(_) => break,
                }
            }
        }
    }

    #[test]
    fn forced_replay_reproduces_a_sampled_rollout() {
        let (data, params) = setup(Variant::PastActionAware);
        let ep = &data.split(Split::Train)[1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Rollout::run(
            &params,
            ep,
            &data,
            &EnvConfig::default(),
            ActionSource::Sample(&mut rng),
        )
        .unwrap();
        let actions = a.actions();
        let b = Rollout::run(
            &params,
            ep,
            &data,
            &EnvConfig::default(),
            ActionSource::Forced(&actions),
        )
        .unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.steps.len(), b.steps.len());
    }

    #[test]
    fn attention_rows_grow_with_history_only_for_past_action_aware() {
        for variant in Variant::ALL {
            let (data, params) = setup(variant);
            let ep = &data.split(Split::Train)[0];
            let r = Rollout::run(
                &params,
                ep,
                &data,
                &EnvConfig::default(),
                ActionSource::Teacher,
            )
            .unwrap();
            for (i, s) in r.steps.iter().enumerate() {
                let expected = if variant.keeps_history() { i + 1 } else { 1 };
                assert_eq!(s.attention_rows.rows, expected);
                assert_eq!(s.attention_rows.cols, ep.instruction.len());
            }
        }
    }

    #[test]
    fn zero_weight_removes_a_term_from_the_gradient() {
        let (data, params) = setup(Variant::PastActionAware);
        let ep = &data.split(Split::Train)[0];
        let r = Rollout::run(
            &params,
            ep,
            &data,
            &EnvConfig::default(),
            ActionSource::Teacher,
        )
        .unwrap();
        let spec = |il, rl, attn| LossSpec {
            il,
            rl,
            attn,
            gamma: 0.9,
            critic_weight: 0.5,
            frozen_advantages: None,
        };
        let (_, il_only) = r.gradient(ep, &data, &spec(1.0, 0.0, 0.0)).unwrap();
        let (_, attn_only) = r.gradient(ep, &data, &spec(0.0, 0.0, 1.0)).unwrap();
        let (_, both) = r.gradient(ep, &data, &spec(1.0, 0.0, 1.0)).unwrap();
        let mut sum = il_only.clone();
        sum.add_assign(&attn_only);
        for (a, b) in sum.blocks.iter().zip(&both.blocks) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
        let (_, none) = r.gradient(ep, &data, &spec(0.0, 0.0, 0.0)).unwrap();
        assert!(none.blocks.iter().all(|b| b.data.iter().all(|&x| x == 0.0)));
    }
}
