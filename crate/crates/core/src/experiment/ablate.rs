use std::fs;

use log::info;
use serde::{Deserialize, Serialize};

use super::pipeline::Selection;
use super::{
    ensure_dataset_with, ensure_trained, fingerprint_of, in_stage, ExperimentConfig, MemoEvaluator,
    StageRunner,
};
use crate::ensemble::{Registry, SearchConfig};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, text_table, MetricReport};
use crate::navsim::{read_json, write_json, Split};
use crate::policy::Variant;

/// One (M, k) point of the sweep. `k = 1` rows are the best-single reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub periods: usize,
    pub max_size: usize,
    pub members: Vec<String>,
    pub val_sr: f64,
    pub test: MetricReport,
    pub evaluation_count: usize,
    pub budget: usize,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub beam_width: usize,
    pub cells: Vec<AblationCell>,
    /// Ensembles actually run on each split; repeated subsets come from the cache.
    pub val_runs: usize,
    pub test_runs: usize,
}

impl AblationReport {
    pub fn cell(&self, periods: usize, max_size: usize) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.periods == periods && c.max_size == max_size)
    }

    pub fn all_within_budget(&self) -> bool {
        self.cells.iter().all(|c| c.within_budget)
    }

    /// The grid, an M sweep per k and a k sweep per M, as text tables.
    pub fn render(&self) -> String {
        let fmt = |x: f64| format!("{x:.2}");
        let mut s = format!(
            "Ablation over {} snapshot sets, beam width {}\n\n",
            self.variant, self.beam_width
        );
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.periods.to_string(),
                    c.max_size.to_string(),
                    c.members.len().to_string(),
                    fmt(100.0 * c.val_sr),
                    fmt(c.test.tl),
                    fmt(c.test.ne),
                    fmt(c.test.sr),
                    fmt(c.test.spl),
                    format!("{}/{}", c.evaluation_count, c.budget),
                    if c.within_budget { "ok" } else { "OVER" }.to_string(),
                ]
            })
            .collect();
        s.push_str(&text_table(
            &[
                "M", "k", "size", "val SR", "TL", "NE", "SR", "SPL", "evals", "budget",
            ],
            &rows,
        ));

        let mut ms: Vec<usize> = self.cells.iter().map(|c| c.periods).collect();
        ms.dedup();
        let mut ks: Vec<usize> = self.cells.iter().map(|c| c.max_size).collect();
        ks.sort_unstable();
        ks.dedup();
        let sweep = |title: String,
                     cells: Vec<&AblationCell>,
                     key: &str,
                     pick: fn(&AblationCell) -> usize| {
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| {
                    vec![
                        pick(c).to_string(),
                        fmt(c.test.tl),
                        fmt(c.test.ne),
                        fmt(c.test.sr),
                        fmt(c.test.spl),
                    ]
                })
                .collect();
            format!(
                "\n{title}\n{}",
                text_table(&[key, "TL", "NE", "SR", "SPL"], &rows)
            )
        };
        for &k in &ks {
            let cells: Vec<&AblationCell> = ms.iter().filter_map(|&m| self.cell(m, k)).collect();
            s.push_str(&sweep(
                format!("Test metrics by M at k={k}"),
                cells,
                "M",
                |c| c.periods,
            ));
        }
        for &m in &ms {
            let cells: Vec<&AblationCell> = ks.iter().filter_map(|&k| self.cell(m, k)).collect();
            s.push_str(&sweep(
                format!("Test metrics by k at M={m}"),
                cells,
                "k",
                |c| c.max_size,
            ));
        }
        s
    }
}

/// Sweeps beam-search selection over every configured (M, k) on one
/// variant's snapshot sets, trains them first if needed, and writes
/// `ablation/ablation.json` and `ablation/ablation.txt`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let mut runner = StageRunner::open(out)?;
    let (data, data_fp) = ensure_dataset_with(cfg, &mut runner)?;
    let variant = cfg.ablation.variant;
    let (sets, train_fp) = ensure_trained(cfg, variant, &data, data_fp, &mut runner)?;

    let dir = out.join("ablation");
    let json = dir.join("ablation.json");
    let fp = fingerprint_of(&(train_fp, &cfg.ablation, &cfg.search, &cfg.env));
    let mut report = None;
    runner.run("ablate", fp, &json, || {
        let registry = Registry::from_snapshots(
            cfg.ablation
                .periods
                .iter()
                .flat_map(|m| sets[m].iter().cloned()),
        )?;
        let mut val = MemoEvaluator::new(&registry, data.split(Split::ValUnseen), &data, &cfg.env);
        let mut test = MemoEvaluator::new(&registry, data.split(Split::Test), &data, &cfg.env);
        let mut cells = Vec::new();
        for &m in &cfg.ablation.periods {
            let pool: Vec<String> = sets[&m].iter().map(|s| s.snapshot_id.clone()).collect();
            let mut sizes = vec![1];
            sizes.extend(cfg.ablation.sizes.iter().copied().filter(|&k| k != 1));
            for k in sizes {
                let search = SearchConfig {
                    max_size: k,
                    ..cfg.search
                };
                let sel =
                    Selection::run(&format!("m{m:02}_k{k}"), pool.clone(), &search, &mut val)?;
                let metrics = compute_metrics(test.records(&sel.spec)?)?;
                info!(
                    "M={m} k={k}: {:?} val SR {:.4} test SR {:.2} ({} evaluations, budget {})",
                    sel.spec.members,
                    sel.val_sr(),
                    metrics.sr,
                    sel.trace.evaluation_count,
                    sel.budget
                );
                cells.push(AblationCell {
                    periods: m,
                    max_size: k,
                    val_sr: sel.val_sr(),
                    within_budget: sel.within_budget(),
                    members: sel.spec.members,
                    test: metrics,
                    evaluation_count: sel.trace.evaluation_count,
                    budget: sel.budget,
                });
            }
        }
        let r = AblationReport {
            variant,
            beam_width: cfg.search.beam_width,
            cells,
            val_runs: val.runs,
            test_runs: test.runs,
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&json, &r)?;
        let txt = dir.join("ablation.txt");
        fs::write(&txt, r.render()).map_err(|e| Error::io(&txt, e))?;
        report = Some(r);
        Ok(())
    })?;
    match report {
        Some(r) => Ok(r),
        None => in_stage("ablate", read_json(&json)),
    }
}
