//! Mixed imitation / actor-critic training with periodic snapshots.
//!
//! Each iteration draws a batch of training episodes. Every episode is rolled
//! out twice: once following the teacher (imitation term, weighted by λ) and
//! once sampling from the policy (actor-critic term). The attention
//! regularizer rides on both rollouts and only counts for the
//! past-action-aware variant. Gradients are averaged over the batch and
//! applied with Adam.
//!
//! The run is split into `M` equal periods. Every `validation_cadence`
//! iterations the current parameters are rounded to `f32` and evaluated
//! greedily on `val_unseen`; each period keeps its best validation point. One
//! run can track several values of `M` at once, which the ablation relies on.

mod losses;
mod optim;
mod rollout;
mod snapshot;
mod targets;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    attention_loss, discounted_returns, imitation_loss, log_softmax, rl_loss, total_loss, RlLoss,
};
pub use optim::{Adam, AdamConfig};
pub use rollout::{
    evaluate_greedy, ActionSource, Gradients, LossSpec, LossTerms, Rollout, StepRecord,
};
pub use snapshot::{
    decode_snapshot, encode_snapshot, load_snapshot, save_snapshot, Snapshot, FORMAT_VERSION, MAGIC,
};
pub use targets::{
    build_attention_target, teacher_action, AttentionTarget, TARGET_CURRENT, TARGET_NEXT,
    TARGET_OTHER,
};

use crate::error::{Error, Result};
use crate::navsim::{Dataset, EnvConfig, Split};
use crate::policy::{PolicyDims, PolicyParams, Variant};

/// Width and depth of the policy; the dataset supplies vocabulary, length and view size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSize {
    pub d_emb: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        let d = PolicyDims::default();
        Self {
            d_emb: d.d_emb,
            d_model: d.d_model,
            d_ff: d.d_ff,
            self_layers: d.self_layers,
            cross_layers: d.cross_layers,
        }
    }
}

impl ModelSize {
    pub fn dims_for(&self, data: &Dataset) -> PolicyDims {
        PolicyDims {
            vocab_size: data.vocabulary.size,
            max_instruction_len: data.max_instruction_len(),
            d_view: data.d_view(),
            d_emb: self.d_emb,
            d_model: self.d_model,
            d_ff: self.d_ff,
            self_layers: self.self_layers,
            cross_layers: self.cross_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub variant: Variant,
    pub total_iterations: usize,
    /// Number of periods `M`, one snapshot each.
    pub periods: usize,
    /// Further values of `M` whose snapshot sets are collected in the same run.
    pub extra_periods: Vec<usize>,
    pub lambda: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub gamma: f64,
    pub critic_weight: f64,
    pub validation_cadence: usize,
    pub seed: u64,
    pub model: ModelSize,
    pub env: EnvConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Original,
            total_iterations: 30_000,
            periods: 10,
            extra_periods: Vec::new(),
            lambda: 0.5,
            alpha: 0.5,
            batch_size: 4,
            optimizer: AdamConfig::default(),
            gamma: 0.9,
            critic_weight: 0.5,
            validation_cadence: 250,
            seed: 0,
            model: ModelSize::default(),
            env: EnvConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// `periods` followed by `extra_periods`, sorted and deduplicated.
    pub fn tracked_periods(&self) -> Vec<usize> {
        let mut all = vec![self.periods];
        all.extend_from_slice(&self.extra_periods);
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_iterations == 0 || self.batch_size == 0 || self.validation_cadence == 0 {
            return bad(
                "total_iterations, batch_size and validation_cadence must be positive".into(),
            );
        }
        if !(self.lambda >= 0.0 && self.alpha >= 0.0) {
            return bad(format!(
                "λ and α must be non-negative (λ={}, α={})",
                self.lambda, self.alpha
            ));
        }
        if !(self.optimizer.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("learning rate must be positive and γ in [0, 1]".into());
        }
        for m in self.tracked_periods() {
            if m == 0 || self.total_iterations % m != 0 {
                return bad(format!(
                    "{} iterations do not split into {m} periods",
                    self.total_iterations
                ));
            }
            let len = self.total_iterations / m;
            if len % self.validation_cadence != 0 {
                return bad(format!(
                    "validation cadence {} does not divide the period length {len} (M={m})",
                    self.validation_cadence
                ));
            }
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON form; stamped into every snapshot.
    pub fn fingerprint(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    fn il_spec(&self) -> LossSpec {
        LossSpec {
            il: self.lambda,
            rl: 0.0,
            attn: self.attention_weight(),
            gamma: self.gamma,
            critic_weight: self.critic_weight,
            frozen_advantages: None,
        }
    }

    fn rl_spec(&self) -> LossSpec {
        LossSpec {
            il: 0.0,
            rl: 1.0,
            ..self.il_spec()
        }
    }

    fn attention_weight(&self) -> f64 {
        if self.variant.keeps_history() {
            self.alpha
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub il: f64,
    pub rl: f64,
    pub attn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrPoint {
    pub iteration: usize,
    pub sr: f64,
}

/// Per-iteration batch-mean losses and per-validation success rates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurves {
    pub loss: Vec<LossPoint>,
    pub sr: Vec<SrPoint>,
}

impl TrainingCurves {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("curves_loss.csv"), &self.loss)?;
        write_csv(&dir.join("curves_sr.csv"), &self.sr)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            loss: read_csv(&dir.join("curves_loss.csv"))?,
            sr: read_csv(&dir.join("curves_sr.csv"))?,
        })
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// The `M` period-best snapshots of one run, in period order.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub periods: usize,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.snapshots {
            save_snapshot(s, &dir.join(format!("{}.snap", s.snapshot_id)))?;
        }
        Ok(())
    }

    /// Loads every `*.snap` file in `dir`, ordered by snapshot id.
    pub fn load(dir: &Path) -> Result<Vec<Snapshot>> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "snap"))
            .collect();
        paths.sort();
        paths.iter().map(|p| load_snapshot(p)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Keyed by `M`; always contains `config.periods`.
    pub snapshot_sets: BTreeMap<usize, SnapshotSet>,
    pub curves: TrainingCurves,
    pub final_params: PolicyParams,
}

impl TrainOutput {
    pub fn primary(&self, config: &TrainingConfig) -> &SnapshotSet {
        &self.snapshot_sets[&config.periods]
    }
}

struct PeriodBest {
    successes: usize,
    iteration: usize,
    val_sr: f64,
    params: PolicyParams,
}

/// Trains one variant and returns its snapshot sets and curves.
pub fn train(config: &TrainingConfig, data: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    let train_eps = data.split(Split::Train);
    let val_eps = data.split(Split::ValUnseen);
    if train_eps.is_empty() || val_eps.is_empty() {
        return Err(Error::Empty(
            "training needs train and val_unseen episodes".into(),
        ));
    }
    let dims = config.model.dims_for(data);
    let mut params = PolicyParams::init(config.variant, dims, config.seed ^ 0x5eed_0f_1a17)?;
    let mut adam = Adam::new(config.optimizer, &params.blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fingerprint = config.fingerprint();
    let n = config.total_iterations;
    let (il_spec, rl_spec) = (config.il_spec(), config.rl_spec());

    let tracked = config.tracked_periods();
    let mut best: BTreeMap<usize, Vec<Option<PeriodBest>>> = tracked
        .iter()
        .map(|&m| (m, (0..m).map(|_| None).collect()))
        .collect();
    let mut curves = TrainingCurves::default();
    let mut order: Vec<usize> = (0..train_eps.len()).collect();
    let mut cursor = order.len();

    for iteration in 1..=n {
        let mut grads = Gradients::zeros_like(&params);
        let mut sums = LossTerms::default();
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ep = &train_eps[order[cursor]];
            cursor += 1;

            let il = Rollout::run(&params, ep, data, &config.env, ActionSource::Teacher)?;
            let (il_terms, g) = il.gradient(ep, data, &il_spec)?;
            grads.add_assign(&g);
            let rl = Rollout::run(
                &params,
                ep,
                data,
                &config.env,
                ActionSource::Sample(&mut rng),
            )?;
            let (rl_terms, g) = rl.gradient(ep, data, &rl_spec)?;
            grads.add_assign(&g);

            sums.il += il_terms.il;
            sums.rl += rl_terms.rl;
            sums.attn += il_terms.attn + rl_terms.attn;
        }
        let b = config.batch_size as f64;
        let point = LossPoint {
            iteration,
            il: sums.il / b,
            rl: sums.rl / b,
            attn: sums.attn / b,
        };
        if !(point.il.is_finite() && point.rl.is_finite() && point.attn.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                il: point.il,
                rl: point.rl,
                attn: point.attn,
            });
        }
        curves.loss.push(point);
        grads.scale(1.0 / b);
        adam.step(&mut params.blocks, &grads);

        if iteration % config.validation_cadence == 0 {
            let frozen = params.quantized();
            let results = evaluate_greedy(&frozen, val_eps, data, &config.env)?;
            let successes = results.iter().filter(|r| r.success).count();
            let sr = successes as f64 / results.len() as f64;
            curves.sr.push(SrPoint { iteration, sr });
            info!(
                "{} iteration {iteration}/{n}: il {:.4} rl {:.4} attn {:.4} val_unseen SR {:.4}",
                config.variant, point.il, point.rl, point.attn, sr
            );
            for (&m, slots) in best.iter_mut() {
                let period = (iteration - 1) / (n / m);
                let slot = &mut slots[period];
                // strictly better only, so ties keep the earlier iteration
                if slot.as_ref().is_none_or(|b| successes > b.successes) {
                    debug!("M={m} period {period}: new best at iteration {iteration}");
                    *slot = Some(PeriodBest {
                        successes,
                        iteration,
                        val_sr: sr,
                        params: frozen.clone(),
                    });
                }
            }
        }
    }

    let snapshot_sets = best
        .into_iter()
        .map(|(m, slots)| {
            let snapshots = slots
                .into_iter()
                .enumerate()
                .map(|(period_index, slot)| {
                    let b =
                        slot.expect("cadence divides every period, so each has a validation point");
                    Snapshot {
                        snapshot_id: Snapshot::make_id(config.variant, m, period_index),
                        params: b.params,
                        period_index,
                        iteration: b.iteration,
                        val_sr: b.val_sr,
                        config_fingerprint: fingerprint,
                        format_version: FORMAT_VERSION,
                    }
                })
                .collect();
            (
                m,
                SnapshotSet {
                    periods: m,
                    snapshots,
                },
            )
        })
        .collect();
    Ok(TrainOutput {
        snapshot_sets,
        curves,
        final_params: params,
    })
}
