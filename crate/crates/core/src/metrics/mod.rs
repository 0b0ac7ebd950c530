//! Navigation metrics and the comparative analyses built on run records.

mod export;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use export::{
    export_attention, export_score_table, AttentionExport, AttentionRow, AttentionSummary,
    ClassMean, ScoreRow,
};

use crate::error::{Error, Result};
use crate::navsim::{Dataset, ViewpointId};

/// Default long-navigation threshold: an episode that used the whole action budget.
pub const LONG_NAV_THRESHOLD: usize = 15;

/// Relative slack when comparing a traveled length against the optimum, so a
/// geodesic path summed in a different order still counts as optimal.
const SPL_TOLERANCE: f64 = 1e-9;

/// One step of a (possibly ensembled) greedy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub viewpoint: ViewpointId,
    /// Raw score vector of every member, in member order, stop last.
    pub member_scores: Vec<Vec<f64>>,
    pub fused_scores: Vec<f64>,
    pub action: usize,
    /// `cls`→word attention logits of the first member; history rows first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
}

/// Outcome of one episode plus the per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub episode_id: String,
    pub scene_id: String,
    pub members: Vec<String>,
    pub trajectory: Vec<ViewpointId>,
    pub action_count: usize,
    pub forced: bool,
    pub success: bool,
    /// Final geodesic distance to the goal.
    pub nav_error: f64,
    /// Length actually traveled.
    pub path_length: f64,
    /// Geodesic distance from start to goal.
    pub optimal_length: f64,
    pub steps: Vec<StepLog>,
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneCount {
    pub episodes: usize,
    pub successes: usize,
}

/// SR and SPL in percent, TL and NE in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sr: f64,
    pub tl: f64,
    pub ne: f64,
    pub spl: f64,
    pub episodes: usize,
    pub successes: usize,
    pub per_scene: BTreeMap<String, SceneCount>,
}

/// Per-episode SPL weight `S·p / max(p, l)`.
pub fn spl_term(r: &RunRecord) -> f64 {
    if !r.success {
        return 0.0;
    }
    let p = r.optimal_length;
    let l = r.path_length;
    if l <= p + SPL_TOLERANCE * p.max(1.0) {
        1.0
    } else {
        p / l
    }
}

pub fn compute_metrics(records: &[RunRecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Empty("no run records to score".into()));
    }
    let n = records.len() as f64;
    let mut per_scene: BTreeMap<String, SceneCount> = BTreeMap::new();
    let (mut succ, mut tl, mut ne, mut spl) = (0usize, 0.0, 0.0, 0.0);
    for r in records {
        let e = per_scene.entry(r.scene_id.clone()).or_default();
        e.episodes += 1;
        if r.success {
            succ += 1;
            e.successes += 1;
        }
        tl += r.path_length;
        ne += r.nav_error;
        spl += spl_term(r);
    }
    Ok(MetricReport {
        sr: 100.0 * succ as f64 / n,
        tl: tl / n,
        ne: ne / n,
        spl: 100.0 * spl / n,
        episodes: records.len(),
        successes: succ,
        per_scene,
    })
}

pub fn success_count(records: &[RunRecord]) -> usize {
    records.iter().filter(|r| r.success).count()
}

/// Success flags keyed by episode id, rejecting duplicates.
fn outcomes(records: &[RunRecord]) -> Result<BTreeMap<&str, bool>> {
    let mut m = BTreeMap::new();
    for r in records {
        if m.insert(r.episode_id.as_str(), r.success).is_some() {
            return Err(Error::EpisodeMismatch(format!(
                "episode {} appears twice",
                r.episode_id
            )));
        }
    }
    Ok(m)
}

fn aligned<'r>(runs: &[&'r [RunRecord]]) -> Result<Vec<(&'r str, Vec<bool>)>> {
    let maps = runs
        .iter()
        .map(|r| outcomes(r))
        .collect::<Result<Vec<_>>>()?;
    let keys: BTreeSet<&str> = maps[0].keys().copied().collect();
    for (i, m) in maps.iter().enumerate().skip(1) {
        if m.len() != keys.len() || !m.keys().all(|k| keys.contains(k)) {
            return Err(Error::EpisodeMismatch(format!(
                "run {} covers a different episode set than run 0",
                i
            )));
        }
    }
    Ok(keys
        .into_iter()
        .map(|k| (k, maps.iter().map(|m| m[k]).collect()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub both_succeed: usize,
    pub only_a: usize,
    pub only_b: usize,
    pub both_fail: usize,
}

impl Disagreement {
    /// Episodes on which the two runs ended differently.
    pub fn different(&self) -> usize {
        self.only_a + self.only_b
    }

    pub fn total(&self) -> usize {
        self.both_succeed + self.only_a + self.only_b + self.both_fail
    }
}

pub fn disagreement(a: &[RunRecord], b: &[RunRecord]) -> Result<Disagreement> {
    let mut d = Disagreement {
        both_succeed: 0,
        only_a: 0,
        only_b: 0,
        both_fail: 0,
    };
    for (_, s) in aligned(&[a, b])? {
        match (s[0], s[1]) {
            (true, true) => d.both_succeed += 1,
            (true, false) => d.only_a += 1,
            (false, true) => d.only_b += 1,
            (false, false) => d.both_fail += 1,
        }
    }
    Ok(d)
}

/// Episodes partitioned by which of three runs failed them.
///
/// `regions[mask]` counts episodes whose failing runs are exactly the bits of
/// `mask` (bit 0 = first run), so `regions[0]` is "all succeed" and
/// `regions[7]` is "all fail".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Venn3 {
    pub regions: [usize; 8],
}

impl Venn3 {
    pub fn total(&self) -> usize {
        self.regions.iter().sum()
    }

    /// Failures shared by the runs in `mask` and by no other run.
    pub fn failed_exactly(&self, mask: usize) -> usize {
        self.regions[mask & 7]
    }
}

pub fn venn3(a: &[RunRecord], b: &[RunRecord], c: &[RunRecord]) -> Result<Venn3> {
    let mut regions = [0; 8];
    for (_, s) in aligned(&[a, b, c])? {
        let mask = s
            .iter()
            .enumerate()
            .fold(0, |m, (i, &ok)| if ok { m } else { m | (1 << i) });
        regions[mask] += 1;
    }
    Ok(Venn3 { regions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongNavStats {
    pub threshold: usize,
    pub count: usize,
    pub failures: usize,
    /// Percent of long navigations that failed; 0 when there are none.
    pub failure_rate: f64,
}

pub fn long_nav_stats(records: &[RunRecord], threshold: usize) -> LongNavStats {
    let long: Vec<_> = records
        .iter()
        .filter(|r| r.action_count >= threshold)
        .collect();
    let failures = long.iter().filter(|r| !r.success).count();
    LongNavStats {
        threshold,
        count: long.len(),
        failures,
        failure_rate: if long.is_empty() {
            0.0
        } else {
            100.0 * failures as f64 / long.len() as f64
        },
    }
}

/// Success counts per scene, one column per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTable {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, Vec<usize>>,
}

impl SceneTable {
    pub fn column_totals(&self) -> Vec<usize> {
        (0..self.columns.len())
            .map(|c| self.rows.values().map(|r| r[c]).sum())
            .collect()
    }
}

/// Groups each run's successes by the scene its episodes belong to in `data`.
pub fn per_scene_success(runs: &[(&str, &[RunRecord])], data: &Dataset) -> Result<SceneTable> {
    let scene_of: BTreeMap<&str, &str> = data
        .episodes
        .values()
        .flatten()
        .map(|e| (e.episode_id.as_str(), e.scene_id.as_str()))
        .collect();
    let mut rows: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (c, (_, records)) in runs.iter().enumerate() {
        for r in records.iter() {
            let scene = scene_of
                .get(r.episode_id.as_str())
                .ok_or_else(|| Error::UnknownEpisode(r.episode_id.clone()))?;
            let row = rows
                .entry(scene.to_string())
                .or_insert_with(|| vec![0; runs.len()]);
            if r.success {
                row[c] += 1;
            }
        }
    }
    Ok(SceneTable {
        columns: runs.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
    })
}

/// Fixed-width text table used by every human-readable report.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(&format!("{c:>w$}"));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn rec(
        id: &str,
        scene: &str,
        success: bool,
        actions: usize,
        l: f64,
        p: f64,
        ne: f64,
    ) -> RunRecord {
        RunRecord {
            episode_id: id.into(),
            scene_id: scene.into(),
            members: vec!["m".into()],
            trajectory: vec![0],
            action_count: actions,
            forced: actions >= 15,
            success,
            nav_error: ne,
            path_length: l,
            optimal_length: p,
            steps: Vec::new(),
        }
    }

    #[test]
    fn spl_of_double_length_success_is_half() {
        let r = rec("a", "s", true, 5, 8.0, 4.0, 0.0);
        assert_eq!(spl_term(&r), 0.5);
        let m = compute_metrics(&[r, rec("b", "s", false, 3, 2.0, 4.0, 5.0)]).unwrap();
        assert_eq!(m.sr, 50.0);
        assert_eq!(m.spl, 25.0);
        assert_eq!(m.tl, 5.0);
        assert_eq!(m.ne, 2.5);
        assert!(m.spl <= m.sr);
    }

    #[test]
    fn spl_tolerates_reordered_sums() {
        let p = 0.1 + 0.2 + 0.3;
        let l = 0.3 + 0.2 + 0.1;
        assert_ne!(p, l);
        assert_eq!(spl_term(&rec("a", "s", true, 3, l, p, 0.0)), 1.0);
    }

    #[test]
    fn empty_records_are_an_error() {
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn metrics_ignore_record_order() {
        let a = vec![
            rec("a", "s1", true, 5, 9.0, 4.0, 1.0),
            rec("b", "s2", false, 15, 20.0, 6.0, 7.0),
            rec("c", "s1", true, 4, 5.0, 5.0, 0.5),
        ];
        let mut b = a.clone();
        b.reverse();
        let (x, y) = (compute_metrics(&a).unwrap(), compute_metrics(&b).unwrap());
        assert_eq!(x.sr, y.sr);
        assert!((x.spl - y.spl).abs() < 1e-12);
        assert_eq!(x.per_scene, y.per_scene);
    }

    #[test]
    fn disagreement_with_itself_is_empty() {
        let a = vec![
            rec("a", "s", true, 5, 1.0, 1.0, 0.0),
            rec("b", "s", false, 5, 1.0, 1.0, 9.0),
        ];
        let d = disagreement(&a, &a).unwrap();
        assert_eq!(d.different(), 0);
        assert_eq!(d.total(), 2);
        assert!(disagreement(&a, &a[..1]).is_err());
    }

    #[test]
    fn identical_runs_fill_only_the_extreme_venn_regions() {
        let a = vec![
            rec("a", "s", true, 5, 1.0, 1.0, 0.0),
            rec("b", "s", false, 5, 1.0, 1.0, 9.0),
            rec("c", "s", false, 5, 1.0, 1.0, 9.0),
        ];
        let v = venn3(&a, &a, &a).unwrap();
        assert_eq!(v.regions, [1, 0, 0, 0, 0, 0, 0, 2]);
    }

    #[test]
    fn forced_timeouts_count_as_long() {
        let a = vec![
            rec("a", "s", false, 15, 1.0, 1.0, 9.0),
            rec("b", "s", true, 15, 1.0, 1.0, 0.0),
            rec("c", "s", true, 4, 1.0, 1.0, 0.0),
        ];
        let s = long_nav_stats(&a, LONG_NAV_THRESHOLD);
        assert_eq!((s.count, s.failures), (2, 1));
        assert_eq!(s.failure_rate, 50.0);
        assert_eq!(long_nav_stats(&a[2..], 15).count, 0);
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rec("a", "s", true, 2, 0.1 + 0.2, 1.0 / 3.0, 0.0);
        r.steps.push(StepLog {
            viewpoint: 3,
            member_scores: vec![vec![0.1, -7.25e-300]],
            fused_scores: vec![0.1, -7.25e-300],
            action: 0,
            attention: Some(vec![vec![std::f64::consts::PI]]),
        });
        let p = dir.path().join("r.jsonl");
        write_records(&p, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_records(&p).unwrap(), vec![r.clone(), r]);
    }

    #[test]
    fn text_table_aligns_columns() {
        let t = text_table(&["name", "SR"], &[vec!["a".into(), "50.00".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "name     SR");
        assert_eq!(lines[1], "-----------");
        assert_eq!(lines[2], "   a  50.00");
    }
}
