//! Snapshot ensembles: fused score-summing inference and subset selection.
//!
//! Every member keeps its own recurrent state. At each step the members'
//! raw scores are summed in member order, the argmax of the sum is executed
//! and each member then advances its state with that shared action.

mod search;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use search::{
    beam_search, beam_search_select, evaluation_budget, select_with, SearchConfig, SearchTrace,
    TraceEntry,
};

use crate::error::{Error, Result};
use crate::metrics::{RunRecord, StepLog};
use crate::navsim::{env_reset, env_step, Dataset, EnvConfig, Episode, Observation, StepOutcome};
use crate::policy::{predict, update_state, ActionScores, PolicyParams, PolicyState};
use crate::tensor::argmax;
use crate::training::{Snapshot, SnapshotSet};

/// Snapshots addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    snapshots: BTreeMap<String, Snapshot>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshots(snapshots: impl IntoIterator<Item = Snapshot>) -> Result<Self> {
        let mut r = Self::new();
        for s in snapshots {
            r.insert(s)?;
        }
        Ok(r)
    }

    /// Loads every snapshot file found in the given directories.
    pub fn load_dirs(dirs: &[&Path]) -> Result<Self> {
        let mut all = Vec::new();
        for d in dirs {
            all.extend(SnapshotSet::load(d)?);
        }
        Self::from_snapshots(all)
    }

    pub fn insert(&mut self, s: Snapshot) -> Result<()> {
        if self.snapshots.contains_key(&s.snapshot_id) {
            return Err(Error::Config(format!(
                "snapshot id {} registered twice",
                s.snapshot_id
            )));
        }
        self.snapshots.insert(s.snapshot_id.clone(), s);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Snapshot> {
        self.snapshots
            .get(id)
            .ok_or_else(|| Error::UnknownSnapshot(id.to_string()))
    }

    /// Ids in sorted order.
    pub fn ids(&self) -> Vec<String> {
        self.snapshots.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Subset size at which the search found this ensemble.
    pub beam_step: usize,
    pub val_sr: f64,
    pub val_successes: usize,
    pub val_episodes: usize,
}

/// A set of snapshot ids; members run in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

impl EnsembleSpec {
    /// Sorts the ids; fails on an empty or repeated member list.
    pub fn new(members: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut members: Vec<String> = members.into_iter().collect();
        members.sort();
        if members.is_empty() {
            return Err(Error::Empty("an ensemble needs at least one member".into()));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "ensemble members repeat: {members:?}"
            )));
        }
        Ok(Self {
            members,
            provenance: None,
        })
    }

    pub fn single(id: &str) -> Self {
        Self {
            members: vec![id.to_string()],
            provenance: None,
        }
    }

    pub fn resolve<'r>(&self, registry: &'r Registry) -> Result<Vec<&'r PolicyParams>> {
        self.members
            .iter()
            .map(|id| registry.get(id).map(|s| &s.params))
            .collect()
    }
}

/// Summed scores plus each member's own output.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScores {
    pub fused: Vec<f64>,
    pub members: Vec<ActionScores>,
}

/// Sums the members' unnormalized scores in member order.
pub fn fused_predict(
    members: &[&PolicyParams],
    states: &[PolicyState],
    obs: &Observation,
) -> Result<FusedScores> {
    if members.is_empty() || members.len() != states.len() {
        return Err(Error::Shape(format!(
            "{} members but {} states",
            members.len(),
            states.len()
        )));
    }
    let outputs = members
        .iter()
        .zip(states)
        .map(|(p, s)| predict(p, s, obs))
        .collect::<Result<Vec<_>>>()?;
    let mut fused = outputs[0].scores.clone();
    for o in &outputs[1..] {
        if o.scores.len() != fused.len() {
            return Err(Error::Shape(format!(
                "member produced {} scores, expected {}",
                o.scores.len(),
                fused.len()
            )));
        }
        for (f, s) in fused.iter_mut().zip(&o.scores) {
            *f += s;
        }
    }
    Ok(FusedScores {
        fused,
        members: outputs,
    })
}

/// One greedy fused episode.
pub fn run_episode(
    spec: &EnsembleSpec,
    registry: &Registry,
    episode: &Episode,
    data: &Dataset,
    env: &EnvConfig,
) -> Result<RunRecord> {
    let members = spec.resolve(registry)?;
    run_members(&spec.members, &members, episode, data, env)
}

pub(crate) fn run_members(
    ids: &[String],
    members: &[&PolicyParams],
    episode: &Episode,
    data: &Dataset,
    env: &EnvConfig,
) -> Result<RunRecord> {
    let scene = data.scene(&episode.scene_id)?;
    let mut states = members
        .iter()
        .map(|p| PolicyState::new(p, &episode.instruction))
        .collect::<Result<Vec<_>>>()?;
    let mut obs = env_reset(episode, data)?;
    let mut steps = Vec::new();
    loop {
        let out = fused_predict(members, &states, &obs)?;
        let action = argmax(&out.fused);
        let lead = &out.members[0].attention_rows;
        steps.push(StepLog {
            viewpoint: obs.current_viewpoint,
            member_scores: out.members.iter().map(|m| m.scores.clone()).collect(),
            fused_scores: out.fused.clone(),
            action,
            attention: Some((0..lead.rows).map(|r| lead.row(r).to_vec()).collect()),
        });
        match env_step(&obs, action, episode, data, env)? {
            StepOutcome::Terminal(done) => {
                return Ok(RunRecord {
                    episode_id: episode.episode_id.clone(),
                    scene_id: episode.scene_id.clone(),
                    members: ids.to_vec(),
                    trajectory: done.trajectory,
                    action_count: done.action_count,
                    forced: done.forced,
                    success: done.success,
                    nav_error: done.nav_error,
                    path_length: done.path_length,
                    optimal_length: scene
                        .shortest_path_distance(episode.start(), episode.goal())?,
                    steps,
                });
            }
            StepOutcome::Continue(next) => {
                states = members
                    .iter()
                    .zip(&states)
                    .zip(&out.members)
                    .map(|((p, s), o)| update_state(p, s, o, action))
                    .collect::<Result<Vec<_>>>()?;
                obs = next;
            }
        }
    }
}

/// Runs the ensemble greedily over `episodes`, in order.
pub fn evaluate(
    spec: &EnsembleSpec,
    registry: &Registry,
    episodes: &[Episode],
    data: &Dataset,
    env: &EnvConfig,
) -> Result<Vec<RunRecord>> {
    let members = spec.resolve(registry)?;
    episodes
        .iter()
        .map(|ep| run_members(&spec.members, &members, ep, data, env))
        .collect()
}

/// Success rate in `[0, 1]` of a record set.
pub fn success_rate(records: &[RunRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.success).count() as f64 / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{generate_dataset, GeneratorConfig, Split};
    use crate::policy::{PolicyDims, Variant};
    use crate::training::FORMAT_VERSION;

    pub(crate) fn snapshot(id: &str, variant: Variant, seed: u64, data: &Dataset) -> Snapshot {
        let dims = PolicyDims {
            vocab_size: data.vocabulary.size,
            max_instruction_len: data.max_instruction_len(),
            d_view: data.d_view(),
            d_emb: 8,
            d_model: 8,
            d_ff: 8,
            self_layers: 1,
            cross_layers: 1,
        };
        Snapshot {
            snapshot_id: id.into(),
            params: PolicyParams::init(variant, dims, seed).unwrap().quantized(),
            period_index: 0,
            iteration: 1,
            val_sr: 0.0,
            config_fingerprint: 0,
            format_version: FORMAT_VERSION,
        }
    }

    #[test]
    fn spec_sorts_and_rejects_duplicates() {
        let s = EnsembleSpec::new(["b".to_string(), "a".to_string()]).unwrap();
        assert_eq!(s.members, ["a", "b"]);
        assert!(EnsembleSpec::new(["a".to_string(), "a".to_string()]).is_err());
        assert!(EnsembleSpec::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn fused_scores_are_the_member_sum() {
        let data = generate_dataset(&GeneratorConfig::small(), 0).unwrap();
        let a = snapshot("a", Variant::Original, 1, &data);
        let b = snapshot("b", Variant::PastActionAware, 2, &data);
        let ep = &data.split(Split::Train)[0];
        let obs = env_reset(ep, &data).unwrap();
        let sa = PolicyState::new(&a.params, &ep.instruction).unwrap();
        let sb = PolicyState::new(&b.params, &ep.instruction).unwrap();
        let one = fused_predict(&[&a.params], &[sa.clone()], &obs).unwrap();
        assert_eq!(one.fused, one.members[0].scores);
        let two = fused_predict(&[&a.params, &b.params], &[sa.clone(), sb], &obs).unwrap();
        for i in 0..two.fused.len() {
            assert_eq!(
                two.fused[i],
                two.members[0].scores[i] + two.members[1].scores[i]
            );
        }
        let dup = fused_predict(&[&a.params, &a.params], &[sa.clone(), sa], &obs).unwrap();
        let doubled: Vec<f64> = one.fused.iter().map(|x| 2.0 * x).collect();
        assert_eq!(dup.fused, doubled);
    }

    #[test]
    fn mixed_variant_pair_completes_within_the_action_limit() {
        let data = generate_dataset(&GeneratorConfig::small(), 0).unwrap();
        let reg = Registry::from_snapshots([
            snapshot("o", Variant::Original, 1, &data),
            snapshot("p", Variant::PastActionAware, 2, &data),
        ])
        .unwrap();
        let spec = EnsembleSpec::new(["p".to_string(), "o".to_string()]).unwrap();
        let recs = evaluate(
            &spec,
            &reg,
            data.split(Split::ValUnseen),
            &data,
            &EnvConfig::default(),
        )
        .unwrap();
        for r in &recs {
            assert!(r.action_count <= 15);
            assert_eq!(r.members, ["o", "p"]);
            // the lead member is the original variant: one attention row per step
            assert!(r
                .steps
                .iter()
                .all(|s| s.attention.as_ref().unwrap().len() == 1));
        }
        let again = evaluate(
            &spec,
            &reg,
            data.split(Split::ValUnseen),
            &data,
            &EnvConfig::default(),
        )
        .unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn unknown_member_is_an_error() {
        let data = generate_dataset(&GeneratorConfig::small(), 0).unwrap();
        let reg = Registry::from_snapshots([snapshot("o", Variant::Original, 1, &data)]).unwrap();
        let ep = &data.split(Split::Train)[0];
        let r = run_episode(
            &EnsembleSpec::single("x"),
            &reg,
            ep,
            &data,
            &EnvConfig::default(),
        );
        assert!(matches!(r, Err(Error::UnknownSnapshot(_))));
        assert!(Registry::from_snapshots([
            snapshot("o", Variant::Original, 1, &data),
            snapshot("o", Variant::Original, 2, &data)
        ])
        .is_err());
    }
}
