//! Scene graphs, instruction episodes, the synthetic dataset generator and
//! the single-run environment loop.

mod env;
mod generate;
mod graph;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use env::{
    env_reset, env_step, CandidateAction, EnvConfig, Observation, StepOutcome, TerminalResult,
};
pub use generate::{generate_dataset, GeneratorConfig, Vocabulary};
pub use graph::{SceneGraph, Viewpoint, ViewpointId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::ValSeen, Split::ValUnseen, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// One instruction segment: a half-open token range `[start, end)` into the
/// instruction and the path viewpoints it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubInstruction {
    pub tokens: (usize, usize),
    pub viewpoints: Vec<ViewpointId>,
}

impl SubInstruction {
    pub fn contains_token(&self, j: usize) -> bool {
        self.tokens.0 <= j && j < self.tokens.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub scene_id: String,
    pub instruction: Vec<u32>,
    pub sub_instructions: Vec<SubInstruction>,
    pub path: Vec<ViewpointId>,
    pub split: Split,
}

impl Episode {
    pub fn start(&self) -> ViewpointId {
        self.path[0]
    }

    pub fn goal(&self) -> ViewpointId {
        *self.path.last().expect("non-empty path")
    }

    /// Checks the episode against its scene.
    pub fn validate(&self, scene: &SceneGraph) -> Result<()> {
        let bad = |reason: String| Error::InvalidEpisode {
            episode: self.episode_id.clone(),
            reason,
        };
        if self.path.is_empty() {
            return Err(bad("empty path".into()));
        }
        for w in self.path.windows(2) {
            if !scene.has_edge(w[0], w[1]) {
                return Err(bad(format!("no edge between {} and {}", w[0], w[1])));
            }
        }
        let mut next = 0;
        for (i, sub) in self.sub_instructions.iter().enumerate() {
            if sub.tokens.0 != next || sub.tokens.1 <= sub.tokens.0 {
                return Err(bad(format!(
                    "sub-instruction {i} range {:?} breaks the partition",
                    sub.tokens
                )));
            }
            next = sub.tokens.1;
            if let Some(v) = sub.viewpoints.iter().find(|v| !self.path.contains(v)) {
                return Err(bad(format!(
                    "sub-instruction {i} aligned to off-path viewpoint {v}"
                )));
            }
        }
        if next != self.instruction.len() {
            return Err(bad(
                "sub-instruction ranges do not cover the instruction".into()
            ));
        }
        if let Some(v) = self.path.iter().find(|v| {
            !self
                .sub_instructions
                .iter()
                .any(|s| s.viewpoints.contains(v))
        }) {
            return Err(bad(format!("path viewpoint {v} has no sub-instruction")));
        }
        Ok(())
    }
}

/// Index of the sub-instruction the agent at `v` is working on.
///
/// Off-path viewpoints are first replaced by the geodesically nearest path
/// viewpoint (ties go to the earliest path position). Returns the 0-based
/// index of the first sub-instruction aligned to that viewpoint.
pub fn map_viewpoint_to_subinstruction(
    episode: &Episode,
    v: ViewpointId,
    scene: &SceneGraph,
) -> usize {
    let anchor = if episode.path.contains(&v) {
        v
    } else {
        let mut best = episode.path[0];
        let mut best_d = f64::INFINITY;
        for &p in &episode.path {
            let d = scene.shortest_path_distance(v, p).unwrap_or(f64::INFINITY);
            if d < best_d {
                best_d = d;
                best = p;
            }
        }
        best
    };
    episode
        .sub_instructions
        .iter()
        .position(|s| s.viewpoints.contains(&anchor))
        .unwrap_or(0)
}

/// Scenes plus episodes for every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub scenes: Vec<SceneGraph>,
    pub episodes: BTreeMap<Split, Vec<Episode>>,
}

impl Dataset {
    pub fn scene(&self, scene_id: &str) -> Result<&SceneGraph> {
        self.scenes
            .iter()
            .find(|s| s.scene_id() == scene_id)
            .ok_or_else(|| Error::UnknownScene(scene_id.to_string()))
    }

    pub fn split(&self, split: Split) -> &[Episode] {
        self.episodes.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn episode(&self, episode_id: &str) -> Result<&Episode> {
        self.episodes
            .values()
            .flatten()
            .find(|e| e.episode_id == episode_id)
            .ok_or_else(|| Error::UnknownEpisode(episode_id.to_string()))
    }

    pub fn d_view(&self) -> usize {
        self.scenes.first().map_or(0, SceneGraph::d_view)
    }

    pub fn max_instruction_len(&self) -> usize {
        self.episodes
            .values()
            .flatten()
            .map(|e| e.instruction.len())
            .max()
            .unwrap_or(0)
    }

    /// Writes `scenes.json`, `vocabulary.json` and one `episodes_<split>.json` per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("scenes.json"), &self.scenes)?;
        write_json(&dir.join("vocabulary.json"), &self.vocabulary)?;
        for split in Split::ALL {
            let eps = self.split(split);
            write_json(&dir.join(format!("episodes_{split}.json")), &eps)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scenes: Vec<SceneGraph> = read_json(&dir.join("scenes.json"))?;
        let vocabulary: Vocabulary = read_json(&dir.join("vocabulary.json"))?;
        let mut episodes = BTreeMap::new();
        for split in Split::ALL {
            let eps: Vec<Episode> = read_json(&dir.join(format!("episodes_{split}.json")))?;
            episodes.insert(split, eps);
        }
        let ds = Dataset {
            vocabulary,
            scenes,
            episodes,
        };
        for ep in ds.episodes.values().flatten() {
            ep.validate(ds.scene(&ep.scene_id)?)?;
        }
        Ok(ds)
    }

    /// Canonical JSON bytes of the whole dataset (used for determinism checks).
    pub fn to_canonical_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::graph::tests::scene_from;
    use super::*;

    fn line_scene() -> SceneGraph {
        // 0 - 1 - 2 - 3 - 4 along x, plus 5 hanging off 2 and 6 off 5.
        scene_from(
            &[
                [0.0, 0.0],
                [2.0, 0.0],
                [4.0, 0.0],
                [6.0, 0.0],
                [8.0, 0.0],
                [4.0, 2.0],
                [4.0, 4.0],
            ],
            &[(0, 1), (1, 2), (2, 3), (3, 4), (2, 5), (5, 6)],
        )
    }

    fn episode() -> Episode {
        Episode {
            episode_id: "e".into(),
            scene_id: "test".into(),
            instruction: vec![3; 10],
            sub_instructions: vec![
                SubInstruction {
                    tokens: (0, 2),
                    viewpoints: vec![0],
                },
                SubInstruction {
                    tokens: (2, 4),
                    viewpoints: vec![1],
                },
                SubInstruction {
                    tokens: (4, 6),
                    viewpoints: vec![2, 3],
                },
                SubInstruction {
                    tokens: (6, 8),
                    viewpoints: vec![3],
                },
                SubInstruction {
                    tokens: (8, 10),
                    viewpoints: vec![3, 4],
                },
            ],
            path: vec![0, 1, 2, 3, 4],
            split: Split::Train,
        }
    }

    #[test]
    fn start_maps_to_first_subinstruction() {
        let s = line_scene();
        assert_eq!(map_viewpoint_to_subinstruction(&episode(), 0, &s), 0);
    }

    #[test]
    fn shared_viewpoint_maps_to_first_aligned() {
        // viewpoint 3 is aligned to sub-instructions 2, 3 and 4
        let s = line_scene();
        assert_eq!(map_viewpoint_to_subinstruction(&episode(), 3, &s), 2);
    }

    #[test]
    fn off_path_uses_nearest_path_viewpoint() {
        let s = line_scene();
        let ep = episode();
        // brute-force nearest path viewpoint over all path entries
        for off in [5u32, 6] {
            let nearest = ep
                .path
                .iter()
                .copied()
                .min_by(|a, b| {
                    let da = s.shortest_path_distance(off, *a).unwrap();
                    let db = s.shortest_path_distance(off, *b).unwrap();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(
                map_viewpoint_to_subinstruction(&ep, off, &s),
                map_viewpoint_to_subinstruction(&ep, nearest, &s)
            );
        }
    }

    #[test]
    fn validate_catches_broken_partition() {
        let s = line_scene();
        let mut ep = episode();
        ep.validate(&s).unwrap();
        ep.sub_instructions[1].tokens = (3, 4);
        assert!(ep.validate(&s).is_err());
    }

    #[test]
    fn split_round_trips_through_str() {
        for sp in Split::ALL {
            assert_eq!(sp.as_str().parse::<Split>().unwrap(), sp);
        }
    }
}
