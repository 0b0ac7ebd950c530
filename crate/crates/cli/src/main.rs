use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use snapnav::ensemble::{evaluate, EnsembleSpec, Registry, SearchConfig};
use snapnav::experiment::{
    cmd_ablate, cmd_pipeline, snapshot_dir, stage_seed, train_dir, ExperimentConfig, MemoEvaluator,
    Selection,
};
use snapnav::metrics::{
    compute_metrics, disagreement, export_attention, export_score_table, long_nav_stats,
    per_scene_success, read_records, text_table, venn3, write_records, MetricReport, RunRecord,
};
use snapnav::navsim::{generate_dataset, Dataset, Split};
use snapnav::policy::Variant;
use snapnav::training::train;

#[derive(Parser)]
#[command(
    name = "snapnav",
    version,
    about = "Snapshot ensembles for graph navigation agents"
)]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; a file for `select`, a directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train one or both variants and save their snapshot sets.
    Train {
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Train only this variant; both when omitted.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Beam-search an ensemble over the snapshots found in the given directories.
    Select {
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Directories holding `.snap` files; every snapshot found becomes a candidate.
        #[arg(long, num_args = 1.., required = true)]
        snapshots: Vec<PathBuf>,
        /// Beam width.
        #[arg(long)]
        l: Option<usize>,
        /// Largest ensemble size.
        #[arg(long)]
        k: Option<usize>,
        /// Split whose episodes score the candidate subsets.
        #[arg(long, default_value = "val_unseen")]
        split: Split,
    },
    /// Run an ensemble greedily and write one run record per episode.
    Eval {
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Directories holding the ensemble's snapshots.
        #[arg(long, num_args = 1.., required = true)]
        snapshots: Vec<PathBuf>,
        /// A selection file written by `select`, or a bare ensemble spec.
        #[arg(long)]
        ensemble: PathBuf,
        /// Split to run on.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output JSON-lines file, one run record per episode.
        #[arg(long)]
        records: PathBuf,
    },
    /// Analyse run record files.
    Analyze {
        /// One to three run record files; pairwise and three-way modes need two and three.
        #[arg(long, num_args = 1..=3, required = true)]
        records: Vec<PathBuf>,
        /// Which analysis to run.
        #[arg(long, value_enum)]
        mode: Mode,
        /// Dataset directory; needed by `scenes` and `attention`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep ensemble selection over M and k.
    Ablate,
    /// Data generation, training, selection, evaluation and analysis in one go.
    Pipeline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Metrics,
    Disagree,
    Venn,
    Longnav,
    Scenes,
    Attention,
    Scores,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<&Path> {
    match &cli.out {
        Some(p) => Ok(p),
        None => bail!("this command needs --out"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_registry(dirs: &[PathBuf]) -> Result<Registry> {
    let dirs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    Ok(Registry::load_dirs(&dirs)?)
}

fn metric_rows(runs: &[(String, MetricReport)]) -> String {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|(n, m)| {
            vec![
                n.clone(),
                m.episodes.to_string(),
                format!("{:.2}", m.tl),
                format!("{:.2}", m.ne),
                format!("{:.2}", m.sr),
                format!("{:.2}", m.spl),
            ]
        })
        .collect();
    text_table(&["run", "episodes", "TL", "NE", "SR", "SPL"], &rows)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => {
            let out = require_out(&cli)?;
            let data = generate_dataset(&cfg.generator, stage_seed(cfg.seed, "gen-data"))?;
            data.save(out)?;
            println!(
                "wrote {} scenes, {} train / {} val_unseen / {} test episodes to {}",
                data.scenes.len(),
                data.split(Split::Train).len(),
                data.split(Split::ValUnseen).len(),
                data.split(Split::Test).len(),
                out.display()
            );
        }
        Command::Train { data, variant } => {
            let out = require_out(&cli)?;
            let data = load_data(data)?;
            let variants = variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
            for v in variants {
                let tcfg = cfg.training_for(v);
                let result = train(&tcfg, &data).with_context(|| format!("training {v}"))?;
                for (m, set) in &result.snapshot_sets {
                    set.save(&snapshot_dir(out, v, *m))?;
                }
                result.curves.write(&train_dir(out, v))?;
                for s in &result.primary(&tcfg).snapshots {
                    println!(
                        "{}  iteration {:>6}  val SR {:.4}",
                        s.snapshot_id, s.iteration, s.val_sr
                    );
                }
            }
        }
        Command::Select {
            data,
            snapshots,
            l,
            k,
            split,
        } => {
            let out = require_out(&cli)?;
            let data = load_data(data)?;
            let registry = load_registry(snapshots)?;
            let search = SearchConfig {
                beam_width: l.unwrap_or(cfg.search.beam_width),
                max_size: k.unwrap_or(cfg.search.max_size),
                ..cfg.search
            };
            let mut eval = MemoEvaluator::new(&registry, data.split(*split), &data, &cfg.env);
            let sel = Selection::run("ensemble", registry.ids(), &search, &mut eval)?;
            write_json(out, &sel)?;
            println!(
                "selected {:?}: {} SR {:.4} ({} of at most {} subset evaluations)",
                sel.spec.members,
                split,
                sel.val_sr(),
                sel.trace.evaluation_count,
                sel.budget
            );
        }
        Command::Eval {
            data,
            snapshots,
            ensemble,
            split,
            records,
        } => {
            let data = load_data(data)?;
            let registry = load_registry(snapshots)?;
            let text = fs::read_to_string(ensemble)
                .with_context(|| format!("reading {}", ensemble.display()))?;
            let spec: EnsembleSpec = match serde_json::from_str::<Selection>(&text) {
                Ok(sel) => sel.spec,
                Err(_) => serde_json::from_str(&text)
                    .context("neither a selection nor an ensemble spec")?,
            };
            let recs = evaluate(&spec, &registry, data.split(*split), &data, &cfg.env)?;
            write_records(records, &recs)?;
            print!(
                "{}",
                metric_rows(&[(spec.members.join("+"), compute_metrics(&recs)?)])
            );
        }
        Command::Analyze {
            records,
            mode,
            data,
        } => {
            let out = require_out(&cli)?;
            fs::create_dir_all(out)?;
            analyze(
                records,
                *mode,
                data.as_deref(),
                out,
                cfg.analysis.long_nav_threshold,
            )?;
        }
        Command::Ablate => {
            let report = cmd_ablate(&cfg)?;
            print!("{}", report.render());
        }
        Command::Pipeline => {
            cmd_pipeline(&cfg)?;
            let txt = cfg.out_dir().join("report.txt");
            print!("{}", fs::read_to_string(&txt)?);
            info!("artifacts in {}", cfg.out_dir().display());
        }
    }
    Ok(())
}

fn analyze(
    paths: &[PathBuf],
    mode: Mode,
    data: Option<&Path>,
    out: &Path,
    threshold: usize,
) -> Result<()> {
    let runs: Vec<(String, Vec<RunRecord>)> = paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            Ok((
                name,
                read_records(p).with_context(|| format!("reading {}", p.display()))?,
            ))
        })
        .collect::<Result<_>>()?;
    let need = |n: usize| -> Result<()> {
        if runs.len() != n {
            bail!(
                "this mode needs exactly {n} record files, got {}",
                runs.len()
            );
        }
        Ok(())
    };
    let dataset = || -> Result<Dataset> {
        match data {
            Some(d) => load_data(d),
            None => bail!("this mode needs --data"),
        }
    };
    match mode {
        Mode::Metrics => {
            let reports: Vec<(String, MetricReport)> = runs
                .iter()
                .map(|(n, r)| Ok((n.clone(), compute_metrics(r)?)))
                .collect::<Result<_>>()?;
            write_json(&out.join("metrics.json"), &reports)?;
            print!("{}", metric_rows(&reports));
        }
        Mode::Disagree => {
            need(2)?;
            let d = disagreement(&runs[0].1, &runs[1].1)?;
            write_json(&out.join("disagreement.json"), &d)?;
            println!(
                "both succeed {}, only {} {}, only {} {}, both fail {}; {} of {} differ",
                d.both_succeed,
                runs[0].0,
                d.only_a,
                runs[1].0,
                d.only_b,
                d.both_fail,
                d.different(),
                d.total()
            );
        }
        Mode::Venn => {
            need(3)?;
            let v = venn3(&runs[0].1, &runs[1].1, &runs[2].1)?;
            write_json(&out.join("venn.json"), &v)?;
            let rows: Vec<Vec<String>> = (0..8)
                .map(|mask| {
                    let who: Vec<&str> = (0..3)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| runs[i].0.as_str())
                        .collect();
                    let label = if who.is_empty() {
                        "none".into()
                    } else {
                        who.join(" + ")
                    };
                    vec![label, v.failed_exactly(mask).to_string()]
                })
                .collect();
            print!("{}", text_table(&["failed by", "episodes"], &rows));
        }
        Mode::Longnav => {
            let stats: Vec<_> = runs
                .iter()
                .map(|(n, r)| (n.clone(), long_nav_stats(r, threshold)))
                .collect();
            write_json(&out.join("long_nav.json"), &stats)?;
            let rows: Vec<Vec<String>> = stats
                .iter()
                .map(|(n, s)| {
                    vec![
                        n.clone(),
                        s.count.to_string(),
                        s.failures.to_string(),
                        format!("{:.2}", s.failure_rate),
                    ]
                })
                .collect();
            print!(
                "{}",
                text_table(&["run", "long", "failed", "failed %"], &rows)
            );
        }
        Mode::Scenes => {
            let data = dataset()?;
            let named: Vec<(&str, &[RunRecord])> = runs
                .iter()
                .map(|(n, r)| (n.as_str(), r.as_slice()))
                .collect();
            let table = per_scene_success(&named, &data)?;
            write_json(&out.join("per_scene.json"), &table)?;
            let mut header = vec!["scene"];
            header.extend(table.columns.iter().map(String::as_str));
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|(s, c)| {
                    std::iter::once(s.clone())
                        .chain(c.iter().map(usize::to_string))
                        .collect()
                })
                .collect();
            print!("{}", text_table(&header, &rows));
        }
        Mode::Attention => {
            let data = dataset()?;
            let all: Vec<RunRecord> = runs.into_iter().flat_map(|(_, r)| r).collect();
            let export = export_attention(&all, &data)?;
            export.write(out)?;
            let s = export.summary;
            println!(
                "{} rows; mean tanh attention current {:.4}, next {:.4}, other {:.4}",
                export.rows.len(),
                s.current.mean,
                s.next.mean,
                s.other.mean
            );
        }
        Mode::Scores => {
            let all: Vec<RunRecord> = runs.into_iter().flat_map(|(_, r)| r).collect();
            let rows = export_score_table(&all);
            let path = out.join("scores.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            println!("{} score rows written to {}", rows.len(), path.display());
        }
    }
    Ok(())
}
