//! Experiment plumbing: the TOML config, per-stage seeds, the resumable
//! stage manifest and the drivers for the full pipeline and the M/k sweep.
//!
//! Artifacts live under one output directory:
//!
//! ```text
//! <out>/manifest.json            stage status and input fingerprints
//! <out>/data/                    dataset (unless paths.data_dir says otherwise)
//! <out>/train/<variant>/m<M>/    period-best snapshots for each tracked M
//! <out>/train/<variant>/curves_*.csv
//! <out>/select/<name>.json       chosen ensemble plus its search trace
//! <out>/eval/*.jsonl             test-split run records
//! <out>/analysis/                disagreement, Venn, attention and score exports
//! <out>/report.json, report.txt
//! <out>/ablation/                M × k sweep tables
//! ```
//!
//! A stage is skipped when the manifest marks it done with the same input
//! fingerprint, so an interrupted run resumes where it stopped.

mod ablate;
mod pipeline;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

pub use ablate::{cmd_ablate, AblationCell, AblationReport};
pub use pipeline::{
    cmd_pipeline, rank_snapshots, AnalysisSummary, DatasetSummary, DisagreementSummary,
    Expectations, LongNavComparison, PipelineReport, ReportRow, Selection, SelectionSummary,
    SnapshotSummary, VennSummary, ENSEMBLES,
};

use crate::ensemble::{evaluate, EnsembleSpec, Registry, SearchConfig};
use crate::error::{Error, Result};
use crate::metrics::{RunRecord, LONG_NAV_THRESHOLD};
use crate::navsim::{
    generate_dataset, read_json, write_json, Dataset, EnvConfig, Episode, GeneratorConfig,
};
use crate::policy::Variant;
use crate::training::{train, Snapshot, SnapshotSet, TrainingConfig};

/// FNV-1a, 64 bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// One splitmix64 output step.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of a named stage: `splitmix64(global ^ fnv1a(stage))`.
///
/// Stages never share a random stream, so re-running one stage alone gives
/// the same result as running it inside the pipeline.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    splitmix64(global ^ fnv1a(stage.as_bytes()))
}

fn fingerprint_of<T: Serialize + ?Sized>(parts: &T) -> u64 {
    fnv1a(&serde_json::to_vec(parts).expect("fingerprint input serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/desk"),
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantTraining {
    pub original: TrainingConfig,
    pub past_action_aware: TrainingConfig,
}

impl Default for VariantTraining {
    fn default() -> Self {
        Self {
            original: TrainingConfig {
                variant: Variant::Original,
                ..TrainingConfig::default()
            },
            past_action_aware: TrainingConfig {
                variant: Variant::PastActionAware,
                ..TrainingConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Values of `M`; each must split the training run evenly.
    pub periods: Vec<usize>,
    /// Values of `k`.
    pub sizes: Vec<usize>,
    /// Which variant's snapshot sets are swept.
    pub variant: Variant,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            periods: vec![5, 10, 15],
            sizes: vec![3, 4, 5],
            variant: Variant::Original,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub disagreement: bool,
    pub venn: bool,
    pub long_nav: bool,
    pub per_scene: bool,
    pub attention: bool,
    pub scores: bool,
    pub long_nav_threshold: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            disagreement: true,
            venn: true,
            long_nav: true,
            per_scene: true,
            attention: true,
            scores: true,
            long_nav_threshold: LONG_NAV_THRESHOLD,
        }
    }
}

/// Everything a pipeline run needs, loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub generator: GeneratorConfig,
    /// Shared by training, selection and evaluation.
    pub env: EnvConfig,
    pub training: VariantTraining,
    pub search: SearchConfig,
    pub ablation: AblationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            generator: GeneratorConfig::default(),
            env: EnvConfig::default(),
            training: VariantTraining::default(),
            search: SearchConfig::default(),
            ablation: AblationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        for v in Variant::ALL {
            self.training_for(v).validate()?;
        }
        if self.ablation.periods.is_empty() || self.ablation.sizes.is_empty() {
            return Err(Error::Config(
                "ablation needs at least one M and one k".into(),
            ));
        }
        if let Some((m, k)) = self
            .ablation
            .periods
            .iter()
            .flat_map(|&m| self.ablation.sizes.iter().map(move |&k| (m, k)))
            .find(|&(m, k)| k == 0 || k > m)
        {
            return Err(Error::Config(format!(
                "ablation cell M={m}, k={k} is impossible"
            )));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths
            .data_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("data"))
    }

    pub fn generator_seed(&self) -> u64 {
        stage_seed(self.seed, "gen-data")
    }

    /// The effective training config of one variant.
    ///
    /// The variant, seed and environment always come from the experiment; the
    /// ablation's M values ride along as extra periods of the swept variant.
    pub fn training_for(&self, variant: Variant) -> TrainingConfig {
        let base = match variant {
            Variant::Original => &self.training.original,
            Variant::PastActionAware => &self.training.past_action_aware,
        };
        let mut cfg = base.clone();
        cfg.variant = variant;
        cfg.seed = stage_seed(self.seed, &format!("train/{variant}"));
        cfg.env = self.env;
        if variant == self.ablation.variant {
            cfg.extra_periods
                .extend(self.ablation.periods.iter().copied());
        }
        let tracked = cfg.tracked_periods();
        cfg.extra_periods = tracked.into_iter().filter(|&m| m != cfg.periods).collect();
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub fingerprint: u64,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub seconds: f64,
}

/// Stage bookkeeping persisted as `manifest.json` in the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load(out: &Path) -> Result<Self> {
        let p = Self::path(out);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(Self::default())
        }
    }

    fn save(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&Self::path(out), self)
    }

    pub fn is_done(&self, stage: &str, fingerprint: u64) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|r| r.status == StageStatus::Done && r.fingerprint == fingerprint)
    }
}

/// Runs stages against a manifest, skipping those already done with the same inputs.
pub(crate) struct StageRunner {
    out: PathBuf,
    manifest: Manifest,
}

impl StageRunner {
    pub(crate) fn open(out: &Path) -> Result<Self> {
        Ok(Self {
            out: out.to_path_buf(),
            manifest: Manifest::load(out)?,
        })
    }

    /// Returns whether `run` was executed. The stage is skipped only when it
    /// is done with the same fingerprint and `output` still exists. A failure
    /// is recorded in the manifest and surfaces as [`Error::Stage`].
    pub(crate) fn run(
        &mut self,
        stage: &str,
        fingerprint: u64,
        output: &Path,
        run: impl FnOnce() -> Result<()>,
    ) -> Result<bool> {
        if self.manifest.is_done(stage, fingerprint) && output.exists() {
            info!("stage {stage}: up to date, skipping");
            return Ok(false);
        }
        info!("stage {stage}: running");
        self.record(stage, fingerprint, StageStatus::Running, None, 0.0)?;
        let started = Instant::now();
        let outcome = run();
        let seconds = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => {
                self.record(stage, fingerprint, StageStatus::Done, None, seconds)?;
                info!("stage {stage}: done in {seconds:.1}s");
                Ok(true)
            }
            Err(e) => {
                self.record(
                    stage,
                    fingerprint,
                    StageStatus::Failed,
                    Some(e.to_string()),
                    seconds,
                )?;
                Err(Error::Stage {
                    stage: stage.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn record(
        &mut self,
        stage: &str,
        fingerprint: u64,
        status: StageStatus,
        message: Option<String>,
        seconds: f64,
    ) -> Result<()> {
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                status,
                fingerprint,
                message,
                seconds,
            },
        );
        self.manifest.save(&self.out)
    }
}

/// Wraps a failure outside the stage runner with the stage's name.
pub(crate) fn in_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

/// Generates the dataset into the data directory, or reuses it.
///
/// Returns the dataset and the fingerprint later stages chain on.
pub fn ensure_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, u64)> {
    let mut runner = StageRunner::open(cfg.out_dir())?;
    ensure_dataset_with(cfg, &mut runner)
}

pub(crate) fn ensure_dataset_with(
    cfg: &ExperimentConfig,
    runner: &mut StageRunner,
) -> Result<(Dataset, u64)> {
    let dir = cfg.data_dir();
    let fp = fingerprint_of(&(&cfg.generator, cfg.generator_seed()));
    runner.run("gen-data", fp, &dir.join("scenes.json"), || {
        let data = generate_dataset(&cfg.generator, cfg.generator_seed())?;
        data.save(&dir)
    })?;
    let data = in_stage("gen-data", Dataset::load(&dir))?;
    Ok((data, fp))
}

/// Directory under a training root holding one variant's artifacts.
pub fn train_dir(root: &Path, variant: Variant) -> PathBuf {
    root.join(variant.as_str())
}

/// Directory under a training root holding the snapshot set for `M` periods.
pub fn snapshot_dir(root: &Path, variant: Variant, periods: usize) -> PathBuf {
    train_dir(root, variant).join(format!("m{periods:02}"))
}

/// Trains one variant unless an up-to-date run exists; returns its snapshot
/// sets keyed by `M` and the stage fingerprint.
pub(crate) fn ensure_trained(
    cfg: &ExperimentConfig,
    variant: Variant,
    data: &Dataset,
    data_fp: u64,
    runner: &mut StageRunner,
) -> Result<(BTreeMap<usize, Vec<Snapshot>>, u64)> {
    let tcfg = cfg.training_for(variant);
    let fp = fingerprint_of(&(data_fp, tcfg.fingerprint()));
    let stage = format!("train/{variant}");
    let out = &cfg.out_dir().join("train");
    let marker = snapshot_dir(out, variant, tcfg.periods);
    runner.run(&stage, fp, &marker, || {
        let dir = train_dir(out, variant);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let result = train(&tcfg, data)?;
        for (m, set) in &result.snapshot_sets {
            set.save(&snapshot_dir(out, variant, *m))?;
        }
        result.curves.write(&dir)
    })?;
    let sets = in_stage(
        &stage,
        tcfg.tracked_periods()
            .into_iter()
            .map(|m| {
                let snaps = SnapshotSet::load(&snapshot_dir(out, variant, m))?;
                if snaps.len() != m {
                    return Err(Error::Config(format!(
                        "expected {m} snapshots for {variant} M={m}, found {}",
                        snaps.len()
                    )));
                }
                Ok((m, snaps))
            })
            .collect::<Result<BTreeMap<_, _>>>(),
    )?;
    Ok((sets, fp))
}

/// Runs ensembles on a fixed episode list and remembers every result by member list.
pub struct MemoEvaluator<'a> {
    registry: &'a Registry,
    episodes: &'a [Episode],
    data: &'a Dataset,
    env: &'a EnvConfig,
    cache: BTreeMap<Vec<String>, Vec<RunRecord>>,
    /// Ensembles actually run (cache misses).
    pub runs: usize,
}

impl<'a> MemoEvaluator<'a> {
    pub fn new(
        registry: &'a Registry,
        episodes: &'a [Episode],
        data: &'a Dataset,
        env: &'a EnvConfig,
    ) -> Self {
        Self {
            registry,
            episodes,
            data,
            env,
            cache: BTreeMap::new(),
            runs: 0,
        }
    }

    pub fn episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn records(&mut self, spec: &EnsembleSpec) -> Result<&[RunRecord]> {
        if !self.cache.contains_key(&spec.members) {
            let recs = evaluate(spec, self.registry, self.episodes, self.data, self.env)?;
            self.runs += 1;
            self.cache.insert(spec.members.clone(), recs);
        }
        Ok(&self.cache[&spec.members])
    }

    pub fn successes(&mut self, spec: &EnsembleSpec) -> Result<usize> {
        Ok(self.records(spec)?.iter().filter(|r| r.success).count())
    }
}
