use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ViewpointId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub viewpoint_id: ViewpointId,
    /// Planar position in meters.
    pub position: [f64; 2],
    /// View feature of the edge towards each navigable neighbor.
    pub candidate_features: BTreeMap<ViewpointId, Vec<f64>>,
}

/// On-disk form of a scene; validated into [`SceneGraph`] on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawScene {
    scene_id: String,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<(ViewpointId, ViewpointId)>,
}

/// A connected navigation graph. Viewpoint ids are dense indices `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScene", into = "RawScene")]
pub struct SceneGraph {
    scene_id: String,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<(ViewpointId, ViewpointId)>,
    neighbors: Vec<Vec<ViewpointId>>,
    /// All-pairs geodesic distances, row-major `n×n`.
    geodesic: Vec<f64>,
    d_view: usize,
}

impl TryFrom<RawScene> for SceneGraph {
    type Error = Error;

    fn try_from(raw: RawScene) -> Result<Self> {
        SceneGraph::new(raw.scene_id, raw.viewpoints, raw.edges)
    }
}

impl From<SceneGraph> for RawScene {
    fn from(s: SceneGraph) -> Self {
        RawScene {
            scene_id: s.scene_id,
            viewpoints: s.viewpoints,
            edges: s.edges,
        }
    }
}

impl SceneGraph {
    /// Validates the graph invariants and precomputes geodesic distances.
    pub fn new(
        scene_id: String,
        viewpoints: Vec<Viewpoint>,
        edges: Vec<(ViewpointId, ViewpointId)>,
    ) -> Result<Self> {
        let sid = scene_id.clone();
        let invalid = |reason: String| Error::InvalidScene {
            scene: sid.clone(),
            reason,
        };
        let n = viewpoints.len();
        if n == 0 {
            return Err(invalid("no viewpoints".into()));
        }
        for (i, vp) in viewpoints.iter().enumerate() {
            if vp.viewpoint_id as usize != i {
                return Err(invalid(format!(
                    "viewpoint at index {i} has id {}",
                    vp.viewpoint_id
                )));
            }
            if !vp.position.iter().all(|c| c.is_finite()) {
                return Err(invalid(format!("viewpoint {i} has a non-finite position")));
            }
        }

        let mut normalized = Vec::with_capacity(edges.len());
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a == b {
                return Err(invalid(format!("self edge at {a}")));
            }
            if a as usize >= n || b as usize >= n {
                return Err(invalid(format!(
                    "edge ({a}, {b}) references a missing viewpoint"
                )));
            }
            let e = (a.min(b), a.max(b));
            if normalized.contains(&e) {
                return Err(invalid(format!("duplicate edge ({a}, {b})")));
            }
            if euclidean(&viewpoints[a as usize], &viewpoints[b as usize]) <= 0.0 {
                return Err(invalid(format!("edge ({a}, {b}) has zero length")));
            }
            normalized.push(e);
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
        normalized.sort_unstable();
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let d_view = viewpoints
            .iter()
            .flat_map(|v| v.candidate_features.values())
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        for (i, vp) in viewpoints.iter().enumerate() {
            let keys: Vec<ViewpointId> = vp.candidate_features.keys().copied().collect();
            if keys != neighbors[i] {
                return Err(invalid(format!(
                    "viewpoint {i}: candidate features {keys:?} do not match neighbors {:?}",
                    neighbors[i]
                )));
            }
            if vp.candidate_features.values().any(|f| f.len() != d_view) {
                return Err(invalid(format!(
                    "viewpoint {i}: inconsistent feature dimension"
                )));
            }
        }

        let mut scene = SceneGraph {
            scene_id,
            viewpoints,
            edges: normalized,
            neighbors,
            geodesic: Vec::new(),
            d_view,
        };
        let mut geodesic = Vec::with_capacity(n * n);
        for src in 0..n {
            let row = scene.dijkstra(src as ViewpointId).0;
            if let Some(v) = row.iter().position(|d| d.is_infinite()) {
                return Err(invalid(format!(
                    "graph is disconnected ({v} unreachable from {src})"
                )));
            }
            geodesic.extend(row);
        }
        // Dijkstra from a and from b can disagree in the last ulp; keep the
        // value computed from the smaller id so the matrix is exactly symmetric.
        for a in 0..n {
            for b in 0..a {
                geodesic[a * n + b] = geodesic[b * n + a];
            }
        }
        scene.geodesic = geodesic;
        Ok(scene)
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn viewpoints(&self) -> &[Viewpoint] {
        &self.viewpoints
    }

    pub fn edges(&self) -> &[(ViewpointId, ViewpointId)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn d_view(&self) -> usize {
        self.d_view
    }

    pub fn contains(&self, v: ViewpointId) -> bool {
        (v as usize) < self.viewpoints.len()
    }

    fn check(&self, v: ViewpointId) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::UnknownViewpoint {
                scene: self.scene_id.clone(),
                viewpoint: v,
            })
        }
    }

    /// Sorted neighbor ids.
    pub fn neighbors(&self, v: ViewpointId) -> Result<&[ViewpointId]> {
        self.check(v)?;
        Ok(&self.neighbors[v as usize])
    }

    pub fn has_edge(&self, a: ViewpointId, b: ViewpointId) -> bool {
        self.contains(a) && self.neighbors[a as usize].binary_search(&b).is_ok()
    }

    pub fn edge_length(&self, a: ViewpointId, b: ViewpointId) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        if !self.has_edge(a, b) {
            return Err(Error::InvalidScene {
                scene: self.scene_id.clone(),
                reason: format!("no edge between {a} and {b}"),
            });
        }
        Ok(euclidean(
            &self.viewpoints[a as usize],
            &self.viewpoints[b as usize],
        ))
    }

    pub fn viewpoint(&self, v: ViewpointId) -> Result<&Viewpoint> {
        self.check(v)?;
        Ok(&self.viewpoints[v as usize])
    }

    /// Geodesic (graph shortest-path) distance in meters.
    pub fn shortest_path_distance(&self, a: ViewpointId, b: ViewpointId) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.geodesic[a as usize * self.len() + b as usize])
    }

    /// Minimum-weight path from `a` to `b`, inclusive of both endpoints.
    pub fn shortest_path(&self, a: ViewpointId, b: ViewpointId) -> Result<Vec<ViewpointId>> {
        self.check(a)?;
        self.check(b)?;
        let (_, prev) = self.dijkstra(a);
        let mut path = vec![b];
        let mut cur = b;
        while cur != a {
            cur = prev[cur as usize].expect("connected graph");
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }

    /// Sum of edge lengths along consecutive viewpoints.
    pub fn path_length(&self, path: &[ViewpointId]) -> Result<f64> {
        let mut total = 0.0;
        for w in path.windows(2) {
            total += self.edge_length(w[0], w[1])?;
        }
        Ok(total)
    }

    fn dijkstra(&self, src: ViewpointId) -> (Vec<f64>, Vec<Option<ViewpointId>>) {
        let n = self.viewpoints.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[src as usize] = 0.0;
        heap.push(Frontier {
            dist: 0.0,
            node: src,
        });
        while let Some(Frontier { dist: d, node }) = heap.pop() {
            if d > dist[node as usize] {
                continue;
            }
            for &nb in &self.neighbors[node as usize] {
                let nd = d + euclidean(
                    &self.viewpoints[node as usize],
                    &self.viewpoints[nb as usize],
                );
                if nd < dist[nb as usize] {
                    dist[nb as usize] = nd;
                    prev[nb as usize] = Some(node);
                    heap.push(Frontier { dist: nd, node: nb });
                }
            }
        }
        (dist, prev)
    }
}

pub(crate) fn euclidean(a: &Viewpoint, b: &Viewpoint) -> f64 {
    let dx = a.position[0] - b.position[0];
    let dy = a.position[1] - b.position[1];
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, PartialEq)]
struct Frontier {
    dist: f64,
    node: ViewpointId,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
