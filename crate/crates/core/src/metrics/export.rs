use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::error::Result;
use crate::navsim::Dataset;
use crate::training::{build_attention_target, write_csv, TARGET_CURRENT, TARGET_NEXT};

/// One tanh-squashed attention weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub episode_id: String,
    /// 1-based step at which the scores were produced.
    pub step: usize,
    /// 1-based step whose `cls` the row belongs to; equals `step` for the current row.
    pub cls_step: usize,
    pub word: usize,
    pub token: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub count: usize,
    pub sum: f64,
    pub mean: f64,
}

impl ClassMean {
    fn add(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.mean = self.sum / self.count as f64;
    }
}

/// Mean tanh attention per regularization target class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub current: ClassMean,
    pub next: ClassMean,
    pub other: ClassMean,
    pub skipped_records: usize,
}

impl AttentionSummary {
    /// Mean on current-segment words minus mean on unrelated words.
    pub fn margin(&self) -> f64 {
        self.current.mean - self.other.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub rows: Vec<AttentionRow>,
    pub summary: AttentionSummary,
}

impl AttentionExport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("attention.csv"), &self.rows)?;
        crate::navsim::write_json(&dir.join("attention_summary.json"), &self.summary)
    }
}

/// Flattens the first member's attention rows and summarizes them by target class.
///
/// Every row is classified with the target of the step its `cls` belongs to,
/// so history rows of the past-action-aware variant are scored against their
/// own step. Records without attention are skipped with a warning.
pub fn export_attention(records: &[RunRecord], data: &Dataset) -> Result<AttentionExport> {
    let mut rows = Vec::new();
    let mut summary = AttentionSummary::default();
    for r in records {
        if r.steps.is_empty() || r.steps.iter().any(|s| s.attention.is_none()) {
            warn!("record {} carries no attention rows; skipped", r.episode_id);
            summary.skipped_records += 1;
            continue;
        }
        let ep = data.episode(&r.episode_id)?;
        let scene = data.scene(&ep.scene_id)?;
        for (t, s) in r.steps.iter().enumerate() {
            let att = s.attention.as_ref().expect("checked above");
            let step = t + 1;
            for (i, row) in att.iter().enumerate() {
                let cls_step = step + 1 + i - att.len();
                let v = r.steps[cls_step - 1].viewpoint;
                let target = build_attention_target(ep, &[v], 1, scene);
                for (word, (&x, &g)) in row.iter().zip(target.rows.row(0)).enumerate() {
                    let value = x.tanh();
                    match g {
                        g if g == TARGET_CURRENT => summary.current.add(value),
                        g if g == TARGET_NEXT => summary.next.add(value),
                        _ => summary.other.add(value),
                    }
                    rows.push(AttentionRow {
                        episode_id: r.episode_id.clone(),
                        step,
                        cls_step,
                        word,
                        token: data.vocabulary.token_name(ep.instruction[word]),
                        value,
                    });
                }
            }
        }
    }
    Ok(AttentionExport { rows, summary })
}

/// One member's score for one action at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub episode_id: String,
    pub step: usize,
    pub member: String,
    pub action: usize,
    pub score: f64,
    pub fused: f64,
    pub taken: bool,
}

pub fn export_score_table(records: &[RunRecord]) -> Vec<ScoreRow> {
    let mut out = Vec::new();
    for r in records {
        for (t, s) in r.steps.iter().enumerate() {
            for (member, scores) in r.members.iter().zip(&s.member_scores) {
                for (action, (&score, &fused)) in scores.iter().zip(&s.fused_scores).enumerate() {
                    out.push(ScoreRow {
                        episode_id: r.episode_id.clone(),
                        step: t + 1,
                        member: member.clone(),
                        action,
                        score,
                        fused,
                        taken: action == s.action,
                    });
                }
            }
        }
    }
    out
}
