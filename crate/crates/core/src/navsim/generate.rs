use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Episode, SceneGraph, Split, SubInstruction, Viewpoint, ViewpointId};
use crate::error::{Error, Result};

/// Shape of the synthetic dataset.
///
/// Scenes are jittered grids whose navigability edges are a random spanning
/// tree plus extra grid edges up to `mean_degree`. Every viewpoint carries a
/// landmark class; the feature of an edge is the landmark vector of its
/// endpoint plus noise, and each sub-instruction names the landmark of the
/// viewpoint it leads to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub train_scenes: usize,
    pub val_unseen_scenes: usize,
    pub test_scenes: usize,
    pub train_episodes_per_scene: usize,
    /// val_seen reuses the train scenes.
    pub val_seen_episodes_per_scene: usize,
    pub unseen_episodes_per_scene: usize,
    pub viewpoints_per_scene: usize,
    pub grid_spacing: f64,
    pub jitter: f64,
    pub mean_degree: f64,
    pub min_path_edges: usize,
    pub max_path_edges: usize,
    pub vocab_size: usize,
    pub landmarks: usize,
    pub tokens_per_subinstruction: usize,
    pub d_view: usize,
    pub feature_noise: f64,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            train_scenes: 30,
            val_unseen_scenes: 6,
            test_scenes: 6,
            train_episodes_per_scene: 67,
            val_seen_episodes_per_scene: 4,
            unseen_episodes_per_scene: 34,
            viewpoints_per_scene: 20,
            grid_spacing: 2.0,
            jitter: 0.3,
            mean_degree: 2.6,
            min_path_edges: 5,
            max_path_edges: 7,
            vocab_size: 40,
            landmarks: 12,
            tokens_per_subinstruction: 4,
            d_view: 16,
            feature_noise: 0.15,
            max_retries: 200,
        }
    }
}

impl GeneratorConfig {
    /// A few small scenes; quick enough for unit tests.
    pub fn small() -> Self {
        Self {
            train_scenes: 4,
            val_unseen_scenes: 2,
            test_scenes: 2,
            train_episodes_per_scene: 10,
            val_seen_episodes_per_scene: 2,
            unseen_episodes_per_scene: 6,
            ..Self::default()
        }
    }

    fn grid_cols(&self) -> usize {
        (self.viewpoints_per_scene as f64).sqrt().ceil() as usize
    }

    fn grid_edges(&self) -> Vec<(ViewpointId, ViewpointId)> {
        let n = self.viewpoints_per_scene;
        let cols = self.grid_cols();
        let mut edges = Vec::new();
        for i in 0..n {
            if (i + 1) % cols != 0 && i + 1 < n {
                edges.push((i as u32, i as u32 + 1));
            }
            if i + cols < n {
                edges.push((i as u32, (i + cols) as u32));
            }
        }
        edges
    }

    fn target_edges(&self) -> usize {
        (self.mean_degree * self.viewpoints_per_scene as f64 / 2.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.viewpoints_per_scene;
        if n < 2 {
            return bad("a scene needs at least 2 viewpoints".into());
        }
        let available = self.grid_edges().len();
        let target = self.target_edges();
        if target < n - 1 {
            return bad(format!(
                "mean degree {} gives {target} edges, fewer than the {} a connected graph of {n} viewpoints needs",
                self.mean_degree,
                n - 1
            ));
        }
        if target > available {
            return bad(format!(
                "mean degree {} needs {target} edges but the layout offers only {available}",
                self.mean_degree
            ));
        }
        if self.min_path_edges == 0 || self.min_path_edges > self.max_path_edges {
            return bad(format!(
                "path length range {}..={} is empty",
                self.min_path_edges, self.max_path_edges
            ));
        }
        if self.min_path_edges >= n {
            return bad(format!(
                "paths of {} edges cannot fit in a {n}-viewpoint scene",
                self.min_path_edges
            ));
        }
        if self.landmarks == 0 || self.tokens_per_subinstruction < 2 || self.d_view == 0 {
            return bad(
                "landmarks, d_view must be positive and sub-instructions need at least 2 tokens"
                    .into(),
            );
        }
        if self.vocab_size < Vocabulary::FIRST_LANDMARK as usize + self.landmarks + 1 {
            return bad(format!(
                "vocabulary of {} cannot hold the special tokens, {} landmark words and a filler",
                self.vocab_size, self.landmarks
            ));
        }
        if !(self.grid_spacing > 0.0)
            || !(self.jitter >= 0.0)
            || self.jitter * 2.0 >= self.grid_spacing
        {
            return bad(
                "jitter must be non-negative and smaller than half the grid spacing".into(),
            );
        }
        if self.train_scenes == 0 {
            return bad("at least one train scene is required".into());
        }
        Ok(())
    }
}

/// Token layout of the synthetic vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub landmarks: usize,
}

impl Vocabulary {
    pub const CLS: u32 = 0;
    pub const SEP: u32 = 1;
    pub const STOP_WORD: u32 = 2;
    pub const FIRST_LANDMARK: u32 = 3;

    pub fn landmark_word(&self, class: usize) -> u32 {
        Self::FIRST_LANDMARK + class as u32
    }

    pub fn first_filler(&self) -> u32 {
        Self::FIRST_LANDMARK + self.landmarks as u32
    }

    pub fn token_name(&self, token: u32) -> String {
        match token {
            Self::CLS => "[CLS]".into(),
            Self::SEP => "[SEP]".into(),
            Self::STOP_WORD => "stop".into(),
            t if t < self.first_filler() => format!("landmark{}", t - Self::FIRST_LANDMARK),
            t => format!("w{}", t - self.first_filler()),
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

struct SceneDraft {
    graph: SceneGraph,
    landmark_of: Vec<usize>,
}

fn generate_scene(
    cfg: &GeneratorConfig,
    scene_id: String,
    landmark_vectors: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<SceneDraft> {
    let n = cfg.viewpoints_per_scene;
    let cols = cfg.grid_cols();
    let positions: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let gx = (i % cols) as f64 * cfg.grid_spacing;
            let gy = (i / cols) as f64 * cfg.grid_spacing;
            [
                gx + rng.gen_range(-cfg.jitter..=cfg.jitter),
                gy + rng.gen_range(-cfg.jitter..=cfg.jitter),
            ]
        })
        .collect();

    let mut candidates = cfg.grid_edges();
    candidates.shuffle(rng);
    let mut uf = UnionFind((0..n).collect());
    let mut edges = Vec::new();
    let mut spare = Vec::new();
    for (a, b) in candidates {
        if uf.union(a as usize, b as usize) {
            edges.push((a, b));
        } else {
            spare.push((a, b));
        }
    }
    let extra = cfg.target_edges() - edges.len();
    edges.extend(spare.into_iter().take(extra));
    edges.sort_unstable();

    let landmark_of: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.landmarks)).collect();
    let mut viewpoints: Vec<Viewpoint> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| Viewpoint {
            viewpoint_id: i as u32,
            position: *p,
            candidate_features: BTreeMap::new(),
        })
        .collect();
    for &(a, b) in &edges {
        for (from, to) in [(a, b), (b, a)] {
            let base = &landmark_vectors[landmark_of[to as usize]];
            let feature: Vec<f64> = base
                .iter()
                .map(|x| x + rng.gen_range(-cfg.feature_noise..=cfg.feature_noise))
                .collect();
            viewpoints[from as usize]
                .candidate_features
                .insert(to, feature);
        }
    }
    let graph = SceneGraph::new(scene_id, viewpoints, edges)?;
    Ok(SceneDraft { graph, landmark_of })
}

/// Pairs whose weighted shortest path has an admissible number of edges.
fn admissible_pairs(cfg: &GeneratorConfig, scene: &SceneGraph) -> Vec<(ViewpointId, ViewpointId)> {
    let n = scene.len() as u32;
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let hops = scene.shortest_path(a, b).map(|p| p.len() - 1).unwrap_or(0);
            if (cfg.min_path_edges..=cfg.max_path_edges).contains(&hops) {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

fn generate_episode(
    cfg: &GeneratorConfig,
    vocab: &Vocabulary,
    draft: &SceneDraft,
    pairs: &[(ViewpointId, ViewpointId)],
    episode_id: String,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let (start, goal) = pairs[rng.gen_range(0..pairs.len())];
    let path = draft.graph.shortest_path(start, goal)?;
    let segments = path.len() - 1;
    let per = cfg.tokens_per_subinstruction;
    let fillers = vocab.size as u32 - vocab.first_filler();

    let mut instruction = Vec::with_capacity(segments * per);
    let mut sub_instructions = Vec::with_capacity(segments);
    for seg in 0..segments {
        let begin = instruction.len();
        let landmark_pos = rng.gen_range(0..per);
        let stop_pos = if seg + 1 == segments {
            let mut p = rng.gen_range(0..per - 1);
            if p >= landmark_pos {
                p += 1;
            }
            Some(p)
        } else {
            None
        };
        for k in 0..per {
            let token = if k == landmark_pos {
                vocab.landmark_word(draft.landmark_of[path[seg + 1] as usize])
            } else if Some(k) == stop_pos {
                Vocabulary::STOP_WORD
            } else {
                vocab.first_filler() + rng.gen_range(0..fillers)
            };
            instruction.push(token);
        }
        // The last segment also covers the goal viewpoint.
        let viewpoints = if seg + 1 == segments {
            vec![path[seg], path[seg + 1]]
        } else {
            vec![path[seg]]
        };
        sub_instructions.push(SubInstruction {
            tokens: (begin, instruction.len()),
            viewpoints,
        });
    }
    let ep = Episode {
        episode_id,
        scene_id: draft.graph.scene_id().to_string(),
        instruction,
        sub_instructions,
        path,
        split,
    };
    ep.validate(&draft.graph)?;
    Ok(ep)
}

/// Builds the full synthetic dataset. Deterministic in `(config, seed)`.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary {
        size: cfg.vocab_size,
        landmarks: cfg.landmarks,
    };
    let landmark_vectors: Vec<Vec<f64>> = (0..cfg.landmarks)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.d_view).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * 2.0).collect()
        })
        .collect();

    let total = cfg.train_scenes + cfg.val_unseen_scenes + cfg.test_scenes;
    let mut drafts = Vec::with_capacity(total);
    for idx in 0..total {
        let scene_id = format!("scene_{idx:03}");
        let mut attempt = 0;
        loop {
            let draft = generate_scene(cfg, scene_id.clone(), &landmark_vectors, &mut rng)?;
            let pairs = admissible_pairs(cfg, &draft.graph);
            if !pairs.is_empty() {
                drafts.push((draft, pairs));
                break;
            }
            attempt += 1;
            if attempt >= cfg.max_retries {
                return Err(Error::Generation(format!(
                    "no viewpoint pair in {scene_id} has a shortest path of {}..={} edges after {attempt} attempts",
                    cfg.min_path_edges, cfg.max_path_edges
                )));
            }
        }
    }

    let train = 0..cfg.train_scenes;
    let unseen = cfg.train_scenes..cfg.train_scenes + cfg.val_unseen_scenes;
    let test = unseen.end..total;
    let plan = [
        (Split::Train, train.clone(), cfg.train_episodes_per_scene),
        (Split::ValSeen, train, cfg.val_seen_episodes_per_scene),
        (Split::ValUnseen, unseen, cfg.unseen_episodes_per_scene),
        (Split::Test, test, cfg.unseen_episodes_per_scene),
    ];
    let mut episodes = BTreeMap::new();
    for (split, scenes, per_scene) in plan {
        let mut list = Vec::new();
        for s in scenes {
            let (draft, pairs) = &drafts[s];
            for _ in 0..per_scene {
                let id = format!("{split}_{:05}", list.len());
                list.push(generate_episode(
                    cfg, &vocab, draft, pairs, id, split, &mut rng,
                )?);
            }
        }
        episodes.insert(split, list);
    }

    Ok(Dataset {
        vocabulary: vocab,
        scenes: drafts.into_iter().map(|(d, _)| d.graph).collect(),
        episodes,
    })
}
