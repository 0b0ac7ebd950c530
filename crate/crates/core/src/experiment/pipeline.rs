use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{
    ensure_dataset_with, ensure_trained, fingerprint_of, in_stage, ExperimentConfig, MemoEvaluator,
    StageRunner,
};
use crate::ensemble::{
    evaluate, evaluation_budget, select_with, EnsembleSpec, Registry, SearchConfig, SearchTrace,
};
use crate::error::{Error, Result};
use crate::metrics::{
    compute_metrics, disagreement, export_attention, export_score_table, long_nav_stats,
    per_scene_success, read_records, success_count, text_table, write_records, AttentionSummary,
    Disagreement, LongNavStats, MetricReport, RunRecord, SceneTable, Venn3,
};
use crate::navsim::{read_json, write_json, Dataset, Split};
use crate::policy::Variant;
use crate::training::{write_csv, Snapshot};

/// A chosen ensemble with the search that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub name: String,
    pub pool: Vec<String>,
    pub spec: EnsembleSpec,
    pub trace: SearchTrace,
    /// Worst-case evaluation count for this pool and search config.
    pub budget: usize,
}

impl Selection {
    /// Runs the beam search over `pool` with `eval` and records the budget.
    pub fn run(
        name: &str,
        pool: Vec<String>,
        cfg: &SearchConfig,
        eval: &mut MemoEvaluator<'_>,
    ) -> Result<Self> {
        let episodes = eval.episodes();
        let (spec, trace) = select_with(&pool, cfg, episodes, |s| eval.successes(s))?;
        Ok(Self {
            name: name.to_string(),
            budget: evaluation_budget(pool.len(), cfg.beam_width, cfg.max_size),
            pool,
            spec,
            trace,
        })
    }

    pub fn within_budget(&self) -> bool {
        self.trace.evaluation_count <= self.budget
    }

    pub fn val_sr(&self) -> f64 {
        self.spec.provenance.as_ref().map_or(0.0, |p| p.val_sr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub id: String,
    pub iteration: usize,
    pub val_sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub name: String,
    pub pool_size: usize,
    pub members: Vec<String>,
    pub val_sr: f64,
    pub best_single_id: String,
    pub best_single_val_sr: f64,
    pub evaluation_count: usize,
    pub budget: usize,
}

/// One line of the headline table: validation SR and test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub members: Vec<String>,
    pub val_sr: f64,
    pub test: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementSummary {
    pub a: String,
    pub b: String,
    pub counts: Disagreement,
    /// Percent of test episodes with different outcomes.
    pub different_percent: f64,
    /// Absolute test SR difference in percent points.
    pub sr_gap_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VennSummary {
    pub snapshot_runs: [String; 3],
    pub snapshots: Venn3,
    /// The same triple with the middle run replaced by the mixed ensemble.
    pub ensemble_runs: [String; 3],
    pub with_ensemble: Venn3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongNavComparison {
    pub ensemble: LongNavStats,
    pub best_single: LongNavStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub disagreement: Option<DisagreementSummary>,
    pub venn: Option<VennSummary>,
    pub long_nav: Option<LongNavComparison>,
    pub per_scene: Option<SceneTable>,
    /// Attention of the best past-action-aware snapshot on `val_unseen`.
    pub attention: Option<AttentionSummary>,
}

/// Outcomes the run is expected to show. `None` means the analysis was disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    pub mixed_pool_is_2m: bool,
    pub ensembles_reach_best_single_val: bool,
    pub searches_within_budget: bool,
    pub disagreement_exceeds_sr_gap: Option<bool>,
    pub ensemble_long_nav_not_above_best_single: Option<bool>,
    pub mixed_test_reaches_best_single_test: bool,
    pub attention_margin_positive: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub train: usize,
    pub val_unseen: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub config_fingerprint: u64,
    pub dataset: DatasetSummary,
    pub snapshots: BTreeMap<Variant, Vec<SnapshotSummary>>,
    pub selections: Vec<SelectionSummary>,
    pub rows: Vec<ReportRow>,
    pub analysis: AnalysisSummary,
    pub expectations: Expectations,
}

impl PipelineReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn selection(&self, name: &str) -> Option<&SelectionSummary> {
        self.selections.iter().find(|s| s.name == name)
    }
}

pub const ENSEMBLES: [&str; 3] = [
    "original_ensemble",
    "past_action_aware_ensemble",
    "mixed_ensemble",
];

/// Snapshot ids of a selection trace ordered by validation successes, ties by id.
pub fn rank_snapshots(trace: &SearchTrace) -> Vec<(String, usize)> {
    let mut singles: Vec<(String, usize)> = trace
        .entries
        .iter()
        .filter(|e| e.members.len() == 1)
        .map(|e| (e.ids[0].clone(), e.successes))
        .collect();
    singles.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    singles
}

fn ids(snaps: &[Snapshot]) -> Vec<String> {
    snaps.iter().map(|s| s.snapshot_id.clone()).collect()
}

fn snapshot_label(id: &str) -> String {
    format!("snapshot_{id}")
}

/// Runs every stage and writes `report.json` and `report.txt`.
pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let out = cfg.out_dir();
    let mut runner = StageRunner::open(out)?;
    let (data, data_fp) = ensure_dataset_with(cfg, &mut runner)?;

    let mut primary: BTreeMap<Variant, Vec<Snapshot>> = BTreeMap::new();
    let mut train_fps = Vec::new();
    for v in Variant::ALL {
        let (mut sets, fp) = ensure_trained(cfg, v, &data, data_fp, &mut runner)?;
        let m = cfg.training_for(v).periods;
        primary.insert(v, sets.remove(&m).expect("primary period count is tracked"));
        train_fps.push(fp);
    }
    let registry = in_stage(
        "select",
        Registry::from_snapshots(primary.values().flatten().cloned()),
    )?;

    let select_fp = fingerprint_of(&(&train_fps, &cfg.search, &cfg.env));
    let select_dir = out.join("select");
    runner.run(
        "select",
        select_fp,
        &select_dir.join("mixed_ensemble.json"),
        || select_stage(cfg, &primary, &registry, &data, &select_dir),
    )?;
    let selections: Vec<Selection> = in_stage(
        "select",
        ENSEMBLES
            .iter()
            .map(|n| read_json(&select_dir.join(format!("{n}.json"))))
            .collect(),
    )?;

    let plan = EvalPlan::new(&selections);
    let eval_fp = fingerprint_of(&(select_fp, &plan.runs));
    let eval_dir = out.join("eval");
    runner.run(
        "eval",
        eval_fp,
        &eval_dir.join("mixed_ensemble.jsonl"),
        || {
            fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
            let test = data.split(Split::Test);
            for (label, spec) in &plan.runs {
                info!("evaluating {label} on test");
                let recs = evaluate(spec, &registry, test, &data, &cfg.env)?;
                write_records(&eval_dir.join(format!("{label}.jsonl")), &recs)?;
            }
            Ok(())
        },
    )?;
    let records: BTreeMap<String, Vec<RunRecord>> = in_stage(
        "eval",
        plan.runs
            .keys()
            .map(|label| {
                Ok((
                    label.clone(),
                    read_records(&eval_dir.join(format!("{label}.jsonl")))?,
                ))
            })
            .collect(),
    )?;

    let report_fp = fingerprint_of(&(eval_fp, &cfg.analysis));
    let report_path = out.join("report.json");
    let mut report = None;
    runner.run("report", report_fp, &report_path, || {
        let r = build_report(
            cfg,
            &data,
            &primary,
            &registry,
            &selections,
            &plan,
            &records,
        )?;
        write_json(&report_path, &r)?;
        fs::write(out.join("report.txt"), render_report(&r))
            .map_err(|e| Error::io(out.join("report.txt"), e))?;
        report = Some(r);
        Ok(())
    })?;
    match report {
        Some(r) => Ok(r),
        None => in_stage("report", read_json(&report_path)),
    }
}

fn select_stage(
    cfg: &ExperimentConfig,
    primary: &BTreeMap<Variant, Vec<Snapshot>>,
    registry: &Registry,
    data: &Dataset,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let val = data.split(Split::ValUnseen);
    let mut eval = MemoEvaluator::new(registry, val, data, &cfg.env);
    let original = ids(&primary[&Variant::Original]);
    let paa = ids(&primary[&Variant::PastActionAware]);
    let mixed: Vec<String> = original.iter().chain(&paa).cloned().collect();
    for (name, pool) in ENSEMBLES.iter().zip([original, paa, mixed]) {
        let sel = Selection::run(name, pool, &cfg.search, &mut eval)?;
        info!(
            "{name}: {:?} val SR {:.4} after {} subset evaluations (budget {})",
            sel.spec.members,
            sel.val_sr(),
            sel.trace.evaluation_count,
            sel.budget
        );
        write_json(&dir.join(format!("{name}.json")), &sel)?;
    }
    Ok(())
}

/// Which test runs the report needs, by label.
struct EvalPlan {
    runs: BTreeMap<String, EnsembleSpec>,
    ranked: Vec<(String, usize)>,
    best_by_variant: BTreeMap<Variant, String>,
}

impl EvalPlan {
    fn new(selections: &[Selection]) -> Self {
        let mixed = &selections[2];
        let ranked = rank_snapshots(&mixed.trace);
        let best_by_variant: BTreeMap<Variant, String> = selections[..2]
            .iter()
            .zip(Variant::ALL)
            .map(|(s, v)| (v, rank_snapshots(&s.trace)[0].0.clone()))
            .collect();
        let mut singles: BTreeSet<String> = ranked.iter().take(3).map(|r| r.0.clone()).collect();
        singles.extend(best_by_variant.values().cloned());
        singles.extend(mixed.spec.members.iter().cloned());
        let mut runs: BTreeMap<String, EnsembleSpec> = singles
            .into_iter()
            .map(|id| (snapshot_label(&id), EnsembleSpec::single(&id)))
            .collect();
        for s in selections {
            runs.insert(s.name.clone(), s.spec.clone());
        }
        Self {
            runs,
            ranked,
            best_by_variant,
        }
    }
}

fn build_report(
    cfg: &ExperimentConfig,
    data: &Dataset,
    primary: &BTreeMap<Variant, Vec<Snapshot>>,
    registry: &Registry,
    selections: &[Selection],
    plan: &EvalPlan,
    records: &BTreeMap<String, Vec<RunRecord>>,
) -> Result<PipelineReport> {
    let out = cfg.out_dir();
    let analysis_dir = out.join("analysis");
    fs::create_dir_all(&analysis_dir).map_err(|e| Error::io(&analysis_dir, e))?;
    let val_sr_of = |id: &str| registry.get(id).map(|s| s.val_sr);
    let single = |id: &str| &records[&snapshot_label(id)];

    let mut rows = Vec::new();
    let best = plan.ranked[0].0.clone();
    rows.push(ReportRow {
        name: "best_single".into(),
        members: vec![best.clone()],
        val_sr: val_sr_of(&best)?,
        test: compute_metrics(single(&best))?,
    });
    for (v, id) in &plan.best_by_variant {
        rows.push(ReportRow {
            name: format!("best_single_{v}"),
            members: vec![id.clone()],
            val_sr: val_sr_of(id)?,
            test: compute_metrics(single(id))?,
        });
    }
    for s in selections {
        rows.push(ReportRow {
            name: s.name.clone(),
            members: s.spec.members.clone(),
            val_sr: s.val_sr(),
            test: compute_metrics(&records[&s.name])?,
        });
    }

    let selection_summaries: Vec<SelectionSummary> = selections
        .iter()
        .map(|s| {
            let top = s.trace.best_single().expect("every pool has singletons");
            SelectionSummary {
                name: s.name.clone(),
                pool_size: s.pool.len(),
                members: s.spec.members.clone(),
                val_sr: s.val_sr(),
                best_single_id: top.ids[0].clone(),
                best_single_val_sr: top.sr,
                evaluation_count: s.trace.evaluation_count,
                budget: s.budget,
            }
        })
        .collect();

    let mixed = &records["mixed_ensemble"];
    let best_recs = single(&best);
    let n = best_recs.len() as f64;
    let a = &cfg.analysis;
    let mut analysis = AnalysisSummary::default();

    if a.disagreement && plan.ranked.len() >= 2 {
        let (ia, ib) = (&plan.ranked[0].0, &plan.ranked[1].0);
        let counts = disagreement(single(ia), single(ib))?;
        let gap = success_count(single(ia)).abs_diff(success_count(single(ib)));
        analysis.disagreement = Some(DisagreementSummary {
            a: ia.clone(),
            b: ib.clone(),
            different_percent: 100.0 * counts.different() as f64 / n,
            sr_gap_percent: 100.0 * gap as f64 / n,
            counts,
        });
    }
    if a.venn && plan.ranked.len() >= 3 {
        let t: Vec<&String> = plan.ranked.iter().take(3).map(|r| &r.0).collect();
        let snapshots = crate::metrics::venn3(single(t[0]), single(t[1]), single(t[2]))?;
        let with_ensemble = crate::metrics::venn3(single(t[0]), mixed, single(t[2]))?;
        analysis.venn = Some(VennSummary {
            snapshot_runs: [t[0].clone(), t[1].clone(), t[2].clone()],
            snapshots,
            ensemble_runs: [t[0].clone(), "mixed_ensemble".into(), t[2].clone()],
            with_ensemble,
        });
    }
    if a.long_nav {
        analysis.long_nav = Some(LongNavComparison {
            ensemble: long_nav_stats(mixed, a.long_nav_threshold),
            best_single: long_nav_stats(best_recs, a.long_nav_threshold),
        });
    }
    if a.per_scene {
        let members = &selections[2].spec.members;
        let mut runs: Vec<(&str, &[RunRecord])> = vec![("mixed_ensemble", mixed.as_slice())];
        runs.extend(
            members
                .iter()
                .map(|id| (id.as_str(), single(id).as_slice())),
        );
        let table = per_scene_success(&runs, data)?;
        write_scene_csv(&analysis_dir.join("per_scene.csv"), &table)?;
        analysis.per_scene = Some(table);
    }
    if a.attention {
        let paa_best = &plan.best_by_variant[&Variant::PastActionAware];
        debug_assert!(primary[&Variant::PastActionAware]
            .iter()
            .any(|s| &s.snapshot_id == paa_best));
        let recs = evaluate(
            &EnsembleSpec::single(paa_best),
            registry,
            data.split(Split::ValUnseen),
            data,
            &cfg.env,
        )?;
        let export = export_attention(&recs, data)?;
        export.write(&analysis_dir)?;
        analysis.attention = Some(export.summary);
    }
    if a.scores {
        write_csv(&analysis_dir.join("scores.csv"), &export_score_table(mixed))?;
    }
    write_json(&analysis_dir.join("analysis.json"), &analysis)?;

    let row = |name: &str| rows.iter().find(|r| r.name == name).expect("row exists");
    let expectations = Expectations {
        mixed_pool_is_2m: selections[2].pool.len() == primary.values().map(Vec::len).sum::<usize>()
            && primary
                .iter()
                .all(|(v, s)| s.len() == cfg.training_for(*v).periods),
        ensembles_reach_best_single_val: selection_summaries
            .iter()
            .all(|s| s.val_sr >= s.best_single_val_sr),
        searches_within_budget: selections.iter().all(Selection::within_budget),
        disagreement_exceeds_sr_gap: analysis
            .disagreement
            .as_ref()
            .map(|d| d.different_percent > d.sr_gap_percent),
        ensemble_long_nav_not_above_best_single: analysis
            .long_nav
            .as_ref()
            .map(|l| l.ensemble.count <= l.best_single.count),
        mixed_test_reaches_best_single_test: row("mixed_ensemble").test.sr
            >= row("best_single").test.sr,
        attention_margin_positive: analysis.attention.as_ref().map(|s| s.margin() > 0.0),
    };

    let mut canonical = cfg.clone();
    canonical.paths = Default::default();
    Ok(PipelineReport {
        seed: cfg.seed,
        config_fingerprint: fingerprint_of(&canonical),
        dataset: DatasetSummary {
            scenes: data.scenes.len(),
            train: data.split(Split::Train).len(),
            val_unseen: data.split(Split::ValUnseen).len(),
            test: data.split(Split::Test).len(),
        },
        snapshots: primary
            .iter()
            .map(|(v, snaps)| {
                let list = snaps
                    .iter()
                    .map(|s| SnapshotSummary {
                        id: s.snapshot_id.clone(),
                        iteration: s.iteration,
                        val_sr: s.val_sr,
                    })
                    .collect();
                (*v, list)
            })
            .collect(),
        selections: selection_summaries,
        rows,
        analysis,
        expectations,
    })
}

fn write_scene_csv(path: &Path, table: &SceneTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["scene".to_string()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header)?;
    for (scene, counts) in &table.rows {
        let mut rec = vec![scene.clone()];
        rec.extend(counts.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn pct(x: f64) -> String {
    format!("{x:.2}")
}

/// Human-readable rendering of a pipeline report.
pub(crate) fn render_report(r: &PipelineReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "seed {}  config {:016x}  scenes {}  episodes train/val_unseen/test {}/{}/{}\n",
        r.seed,
        r.config_fingerprint,
        r.dataset.scenes,
        r.dataset.train,
        r.dataset.val_unseen,
        r.dataset.test
    );
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            vec![
                row.name.clone(),
                row.members.len().to_string(),
                pct(100.0 * row.val_sr),
                pct(row.test.tl),
                pct(row.test.ne),
                pct(row.test.sr),
                pct(row.test.spl),
            ]
        })
        .collect();
    s.push_str("Test split\n");
    s.push_str(&text_table(
        &["run", "size", "val SR", "TL", "NE", "SR", "SPL"],
        &rows,
    ));

    let rows: Vec<Vec<String>> = r
        .selections
        .iter()
        .map(|x| {
            vec![
                x.name.clone(),
                x.pool_size.to_string(),
                x.members.join(" "),
                pct(100.0 * x.val_sr),
                pct(100.0 * x.best_single_val_sr),
                format!("{}/{}", x.evaluation_count, x.budget),
            ]
        })
        .collect();
    s.push_str("\nSelection on val_unseen\n");
    s.push_str(&text_table(
        &[
            "ensemble",
            "pool",
            "members",
            "val SR",
            "best single",
            "evals/budget",
        ],
        &rows,
    ));

    if let Some(d) = &r.analysis.disagreement {
        let _ = writeln!(
            s,
            "\nTop two snapshots {} and {}: {} of {} test episodes differ ({}%), SR gap {} points",
            d.a,
            d.b,
            d.counts.different(),
            d.counts.total(),
            pct(d.different_percent),
            pct(d.sr_gap_percent)
        );
    }
    if let Some(v) = &r.analysis.venn {
        for (title, runs, venn) in [
            (
                "Failures of the top three snapshots",
                &v.snapshot_runs,
                &v.snapshots,
            ),
            (
                "Failures with the mixed ensemble in second place",
                &v.ensemble_runs,
                &v.with_ensemble,
            ),
        ] {
            let _ = writeln!(s, "\n{title} ({})", runs.join(", "));
            let rows: Vec<Vec<String>> = (0..8)
                .map(|mask| {
                    let who: Vec<&str> = (0..3)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| ["1", "2", "3"][i])
                        .collect();
                    let label = if who.is_empty() {
                        "none".to_string()
                    } else {
                        who.join("+")
                    };
                    vec![label, venn.failed_exactly(mask).to_string()]
                })
                .collect();
            s.push_str(&text_table(&["failed by", "episodes"], &rows));
        }
    }
    if let Some(l) = &r.analysis.long_nav {
        let rows: Vec<Vec<String>> = [
            ("mixed_ensemble", &l.ensemble),
            ("best_single", &l.best_single),
        ]
        .iter()
        .map(|(n, x)| {
            vec![
                n.to_string(),
                x.count.to_string(),
                x.failures.to_string(),
                pct(x.failure_rate),
            ]
        })
        .collect();
        let _ = writeln!(
            s,
            "\nLong navigations (at least {} actions)",
            l.ensemble.threshold
        );
        s.push_str(&text_table(&["run", "count", "failed", "failed %"], &rows));
    }
    if let Some(t) = &r.analysis.per_scene {
        let mut header = vec!["scene"];
        header.extend(t.columns.iter().map(String::as_str));
        let mut rows: Vec<Vec<String>> = t
            .rows
            .iter()
            .map(|(scene, c)| {
                std::iter::once(scene.clone())
                    .chain(c.iter().map(usize::to_string))
                    .collect()
            })
            .collect();
        rows.push(
            std::iter::once("total".to_string())
                .chain(t.column_totals().iter().map(usize::to_string))
                .collect(),
        );
        s.push_str("\nTest successes per scene\n");
        s.push_str(&text_table(&header, &rows));
    }
    if let Some(a) = &r.analysis.attention {
        let _ = writeln!(
            s,
            "\nMean tanh attention on val_unseen: current {:.4}, next {:.4}, other {:.4} (margin {:.4})",
            a.current.mean,
            a.next.mean,
            a.other.mean,
            a.margin()
        );
    }
    let e = &r.expectations;
    let flag = |b: Option<bool>| match b {
        Some(true) => "yes",
        Some(false) => "no",
        None => "n/a",
    };
    let _ = writeln!(s, "\nChecks");
    let checks = [
        (
            "mixed pool holds both snapshot sets",
            Some(e.mixed_pool_is_2m),
        ),
        (
            "ensembles match or beat their best single on val",
            Some(e.ensembles_reach_best_single_val),
        ),
        (
            "searches within the evaluation budget",
            Some(e.searches_within_budget),
        ),
        (
            "top-two disagreement exceeds their SR gap",
            e.disagreement_exceeds_sr_gap,
        ),
        (
            "ensemble has no more long navigations",
            e.ensemble_long_nav_not_above_best_single,
        ),
        (
            "mixed ensemble test SR reaches best single",
            Some(e.mixed_test_reaches_best_single_test),
        ),
        (
            "attention favours current words",
            e.attention_margin_positive,
        ),
    ];
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|(n, b)| vec![n.to_string(), flag(*b).to_string()])
        .collect();
    s.push_str(&text_table(&["check", "holds"], &rows));
    s
}
