use std::cmp::Ordering;
use std::collections::BTreeSet;

use log::debug;
use serde::{Deserialize, Serialize};

use super::{evaluate, EnsembleSpec, Provenance, Registry};
use crate::error::{Error, Result};
use crate::navsim::{Dataset, EnvConfig, Episode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Subsets kept per size (`l`).
    pub beam_width: usize,
    /// Largest subset size (`k`).
    pub max_size: usize,
    /// Evaluate a subset reached through several beams only once.
    pub dedupe: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 3,
            max_size: 4,
            dedupe: true,
        }
    }
}

/// Worst-case number of subset evaluations without dedupe:
/// `M + l·Σ_{j=2..k} (M − j + 1)`.
pub fn evaluation_budget(candidates: usize, beam_width: usize, max_size: usize) -> usize {
    candidates
        + (2..=max_size)
            .map(|j| beam_width * (candidates + 1).saturating_sub(j))
            .sum::<usize>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Sorted candidate indices.
    pub members: Vec<usize>,
    pub ids: Vec<String>,
    pub successes: usize,
    pub sr: f64,
}

/// Every evaluated subset in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub candidates: Vec<String>,
    pub episodes: usize,
    pub entries: Vec<TraceEntry>,
    pub evaluation_count: usize,
}

impl SearchTrace {
    pub fn best_single(&self) -> Option<&TraceEntry> {
        self.entries
            .iter()
            .filter(|e| e.members.len() == 1)
            .min_by(|a, b| {
                b.successes
                    .cmp(&a.successes)
                    .then_with(|| a.members.cmp(&b.members))
            })
    }
}

/// Beam ordering: more successes first, then the smaller index tuple.
fn beam_order(a: &(Vec<usize>, usize), b: &(Vec<usize>, usize)) -> Ordering {
    b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Final ordering: more successes, then fewer members, then the smaller index tuple.
fn final_order(a: &(Vec<usize>, usize), b: &(Vec<usize>, usize)) -> Ordering {
    b.1.cmp(&a.1)
        .then_with(|| a.0.len().cmp(&b.0.len()))
        .then_with(|| a.0.cmp(&b.0))
}

/// Layered subset search over candidates `0..m`.
///
/// `eval` returns the success count of a sorted index subset. Returns the
/// winning subset and the trace of `(subset, successes)` in evaluation order.
pub fn beam_search<F>(
    m: usize,
    cfg: &SearchConfig,
    mut eval: F,
) -> Result<(Vec<usize>, Vec<(Vec<usize>, usize)>)>
where
    F: FnMut(&[usize]) -> Result<usize>,
{
    if cfg.beam_width == 0 || cfg.max_size == 0 {
        return Err(Error::Config(
            "beam width and maximum size must be at least 1".into(),
        ));
    }
    if cfg.max_size > m {
        return Err(Error::Config(format!(
            "maximum ensemble size {} exceeds the {m} candidates",
            cfg.max_size
        )));
    }
    let mut trace: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut level = Vec::with_capacity(m);
    for i in 0..m {
        let s = vec![i];
        let succ = eval(&s)?;
        seen.insert(s.clone());
        trace.push((s.clone(), succ));
        level.push((s, succ));
    }
    for size in 2..=cfg.max_size {
        level.sort_by(beam_order);
        level.truncate(cfg.beam_width);
        let mut next = Vec::new();
        for (base, _) in &level {
            for j in (0..m).filter(|j| !base.contains(j)) {
                let mut s = base.clone();
                s.push(j);
                s.sort_unstable();
                if cfg.dedupe && !seen.insert(s.clone()) {
                    continue;
                }
                let succ = eval(&s)?;
                trace.push((s.clone(), succ));
                next.push((s, succ));
            }
        }
        debug!("size {size}: {} subsets evaluated", next.len());
        level = next;
    }
    let best = trace
        .iter()
        .min_by(|a, b| final_order(a, b))
        .map(|(s, _)| s.clone())
        .expect("at least one candidate");
    Ok((best, trace))
}

/// Selects an ensemble from `candidates` by validation success on `episodes`.
pub fn beam_search_select(
    candidates: &[String],
    registry: &Registry,
    cfg: &SearchConfig,
    episodes: &[Episode],
    data: &Dataset,
    env: &EnvConfig,
) -> Result<(EnsembleSpec, SearchTrace)> {
    select_with(candidates, cfg, episodes.len(), |spec| {
        let records = evaluate(spec, registry, episodes, data, env)?;
        Ok(records.iter().filter(|r| r.success).count())
    })
}

/// Beam search over named candidates with a caller-supplied evaluator that
/// returns the success count of an ensemble on `episodes` episodes.
pub fn select_with<F>(
    candidates: &[String],
    cfg: &SearchConfig,
    episodes: usize,
    mut eval: F,
) -> Result<(EnsembleSpec, SearchTrace)>
where
    F: FnMut(&EnsembleSpec) -> Result<usize>,
{
    if episodes == 0 {
        return Err(Error::Empty("selection needs validation episodes".into()));
    }
    let spec_of = |s: &[usize]| EnsembleSpec::new(s.iter().map(|&i| candidates[i].clone()));
    let (best, raw) = beam_search(candidates.len(), cfg, |s| eval(&spec_of(s)?))?;
    let entries: Vec<TraceEntry> = raw
        .into_iter()
        .map(|(members, successes)| TraceEntry {
            ids: members.iter().map(|&i| candidates[i].clone()).collect(),
            members,
            successes,
            sr: successes as f64 / episodes as f64,
        })
        .collect();
    let winner = entries
        .iter()
        .find(|e| e.members == best)
        .expect("winner comes from the trace");
    let mut spec = spec_of(&best)?;
    spec.provenance = Some(Provenance {
        beam_step: best.len(),
        val_sr: winner.sr,
        val_successes: winner.successes,
        val_episodes: episodes,
    });
    let trace = SearchTrace {
        candidates: candidates.to_vec(),
        episodes,
        evaluation_count: entries.len(),
        entries,
    };
    Ok((spec, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Deterministic pseudo success count for a subset.
    fn score(s: &[usize], salt: u64) -> usize {
        let h = s.iter().fold(salt ^ 0x9e37_79b9, |h, &i| {
            (h ^ i as u64)
                .wrapping_mul(0x0100_0000_01b3)
                .rotate_left(17)
        });
        (h % 50) as usize
    }

    #[test]
    fn budget_for_ten_candidates_width_three_size_four_is_82() {
        assert_eq!(evaluation_budget(10, 3, 4), 82);
        assert_eq!(evaluation_budget(10, 3, 1), 10);
    }

    #[test]
    fn size_one_search_returns_best_single_with_m_evaluations() {
        let cfg = SearchConfig {
            max_size: 1,
            ..SearchConfig::default()
        };
        let (best, trace) = beam_search(10, &cfg, |s| Ok(score(s, 1))).unwrap();
        assert_eq!(trace.len(), 10);
        let top = (0..10)
            .max_by_key(|&i| (score(&[i], 1), std::cmp::Reverse(i)))
            .unwrap();
        assert_eq!(best, vec![top]);
    }

    #[test]
    fn ties_prefer_smaller_then_lexicographically_first() {
        let cfg = SearchConfig::default();
        let (best, _) = beam_search(5, &cfg, |_| Ok(7)).unwrap();
        assert_eq!(best, vec![0]);
        let (best, _) = beam_search(5, &cfg, |s| Ok(if s.len() == 2 { 9 } else { 1 })).unwrap();
        assert_eq!(best, vec![0, 1]);
    }

    #[test]
    fn oversized_request_is_rejected() {
        let cfg = SearchConfig {
            max_size: 4,
            ..SearchConfig::default()
        };
        assert!(beam_search(3, &cfg, |_| Ok(0)).is_err());
    }

    proptest! {
        #[test]
        fn budget_and_consistency(m in 1usize..12, l in 1usize..5, k_off in 0usize..4, salt in any::<u64>(), dedupe in any::<bool>()) {
            let k = 1 + k_off.min(m - 1);
            let cfg = SearchConfig { beam_width: l, max_size: k, dedupe };
            let (best, trace) = beam_search(m, &cfg, |s| Ok(score(s, salt))).unwrap();
            prop_assert!(trace.len() <= evaluation_budget(m, l, k));
            // every singleton is evaluated, so the winner dominates them
            let singles: Vec<_> = trace.iter().filter(|(s, _)| s.len() == 1).collect();
            prop_assert_eq!(singles.len(), m);
            let best_succ = trace.iter().find(|(s, _)| *s == best).unwrap().1;
            prop_assert_eq!(best_succ, trace.iter().map(|t| t.1).max().unwrap());
            prop_assert!(singles.iter().all(|(_, x)| *x <= best_succ));
            for (s, succ) in &trace {
                prop_assert!(s.len() <= k && s.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(*succ, score(s, salt));
            }
            if dedupe {
                let distinct: BTreeSet<_> = trace.iter().map(|t| t.0.clone()).collect();
                prop_assert_eq!(distinct.len(), trace.len());
            }
        }
    }
}
