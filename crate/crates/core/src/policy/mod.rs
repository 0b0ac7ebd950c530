//! Recurrent cross-modal attention policy.
//!
//! The instruction is embedded, projected and self-attended once per episode.
//! At every step the candidate view features are projected, the recurrent
//! `cls` vector is appended, and a stack of cross + self attention layers
//! lets that set attend to the instruction words and to itself. The last
//! layer's `cls`→candidate attention logits are the action scores; the
//! post-attention `cls` and the taken action's row go through a gated map to
//! become the next step's `cls`.
//!
//! The past-action-aware variant additionally keeps every earlier `cls` in a
//! frozen history that joins the attention as extra queries (for the word
//! attention) and extra keys/values (for the self attention), but is never
//! updated itself.

mod forward;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub(crate) use forward::{
    candidate_matrix, encode_nodes, matching_nodes, step_nodes, word_memory_nodes,
};
pub use forward::{encode_instruction, predict, update_state, ActionScores, PolicyState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    PastActionAware,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Original, Variant::PastActionAware];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::PastActionAware => "past_action_aware",
        }
    }

    pub fn keeps_history(self) -> bool {
        matches!(self, Variant::PastActionAware)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyDims {
    pub vocab_size: usize,
    pub max_instruction_len: usize,
    pub d_emb: usize,
    pub d_model: usize,
    pub d_view: usize,
    pub d_ff: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            max_instruction_len: 32,
            d_emb: 32,
            d_model: 32,
            d_view: 16,
            d_ff: 32,
            self_layers: 2,
            cross_layers: 2,
        }
    }
}

impl PolicyDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.vocab_size,
            self.max_instruction_len,
            self.d_emb,
            self.d_model,
            self.d_view,
            self.d_ff,
            self.cross_layers,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "policy dimensions must be positive (cross_layers ≥ 1): {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in ±1/√rows.
    FanIn,
    /// Uniform in ±1/√cols (embedding tables).
    Embedding,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub(crate) init: Init,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln_g: usize,
    pub ln_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln_g: usize,
    pub ln_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SelfLayerIdx {
    pub attn: AttnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct CrossLayerIdx {
    pub cross: AttnIdx,
    pub selfattn: AttnIdx,
    pub ffn: FfnIdx,
}

/// Parameter block order. This order is also the snapshot payload order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub specs: Vec<BlockSpec>,
    pub(crate) token_embedding: usize,
    pub(crate) positional_embedding: usize,
    pub(crate) w_instruction: usize,
    pub(crate) w_candidate: usize,
    pub(crate) self_layers: Vec<SelfLayerIdx>,
    pub(crate) cross_layers: Vec<CrossLayerIdx>,
    pub(crate) match_w_gate: usize,
    pub(crate) match_b_gate: usize,
    pub(crate) match_w_value: usize,
    pub(crate) match_b_value: usize,
    pub(crate) critic_w: usize,
    pub(crate) critic_b: usize,
}

struct LayoutBuilder(Vec<BlockSpec>);

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.0.push(BlockSpec {
            name,
            rows,
            cols,
            init,
        });
        self.0.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(format!("{prefix}.wq"), d, d, Init::FanIn),
            wk: self.add(format!("{prefix}.wk"), d, d, Init::FanIn),
            wv: self.add(format!("{prefix}.wv"), d, d, Init::FanIn),
            wo: self.add(format!("{prefix}.wo"), d, d, Init::FanIn),
            ln_g: self.add(format!("{prefix}.ln_gain"), 1, d, Init::Ones),
            ln_b: self.add(format!("{prefix}.ln_bias"), 1, d, Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.w1"), d, d_ff, Init::FanIn),
            b1: self.add(format!("{prefix}.b1"), 1, d_ff, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), d_ff, d, Init::FanIn),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
            ln_g: self.add(format!("{prefix}.ln_gain"), 1, d, Init::Ones),
            ln_b: self.add(format!("{prefix}.ln_bias"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(dims: &PolicyDims) -> Self {
        let d = dims.d_model;
        let mut b = LayoutBuilder(Vec::new());
        let token_embedding = b.add(
            "token_embedding".into(),
            dims.vocab_size,
            dims.d_emb,
            Init::Embedding,
        );
        let positional_embedding = b.add(
            "positional_embedding".into(),
            dims.max_instruction_len + 2,
            dims.d_emb,
            Init::Embedding,
        );
        let w_instruction = b.add("w_instruction".into(), dims.d_emb, d, Init::FanIn);
        let w_candidate = b.add("w_candidate".into(), dims.d_view, d, Init::FanIn);
        let self_layers = (0..dims.self_layers)
            .map(|i| SelfLayerIdx {
                attn: b.attn(&format!("self{i}.attn"), d),
                ffn: b.ffn(&format!("self{i}.ffn"), d, dims.d_ff),
            })
            .collect();
        let cross_layers = (0..dims.cross_layers)
            .map(|i| CrossLayerIdx {
                cross: b.attn(&format!("cross{i}.cross"), d),
                selfattn: b.attn(&format!("cross{i}.self"), d),
                ffn: b.ffn(&format!("cross{i}.ffn"), d, dims.d_ff),
            })
            .collect();
        let match_w_gate = b.add("matching.w_gate".into(), 2 * d, d, Init::FanIn);
        let match_b_gate = b.add("matching.b_gate".into(), 1, d, Init::Zeros);
        let match_w_value = b.add("matching.w_value".into(), 2 * d, d, Init::FanIn);
        let match_b_value = b.add("matching.b_value".into(), 1, d, Init::Zeros);
        let critic_w = b.add("critic.w".into(), d, 1, Init::FanIn);
        let critic_b = b.add("critic.b".into(), 1, 1, Init::Zeros);
        Layout {
            specs: b.0,
            token_embedding,
            positional_embedding,
            w_instruction,
            w_candidate,
            self_layers,
            cross_layers,
            match_w_gate,
            match_b_gate,
            match_w_value,
            match_b_value,
            critic_w,
            critic_b,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|s| s.rows * s.cols).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub variant: Variant,
    pub dims: PolicyDims,
    pub blocks: Vec<Matrix>,
    layout: Layout,
}

impl PolicyParams {
    /// Seeded initialization; both variants draw identical values for the same seed.
    pub fn init(variant: Variant, dims: PolicyDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layout
            .specs
            .iter()
            .map(|spec| {
                let n = spec.rows * spec.cols;
                let data = match spec.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::FanIn | Init::Embedding => {
                        let fan = if spec.init == Init::FanIn {
                            spec.rows
                        } else {
                            spec.cols
                        };
                        let bound = 1.0 / (fan as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                    }
                };
                Matrix::from_vec(spec.rows, spec.cols, data)
            })
            .collect();
        Ok(Self {
            variant,
            dims,
            blocks,
            layout,
        })
    }

    /// Rebuilds parameters from raw blocks, checking them against the layout.
    pub fn from_blocks(variant: Variant, dims: PolicyDims, blocks: Vec<Matrix>) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        if blocks.len() != layout.specs.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, got {}",
                layout.specs.len(),
                blocks.len()
            )));
        }
        for (spec, b) in layout.specs.iter().zip(&blocks) {
            if b.shape() != (spec.rows, spec.cols) {
                return Err(Error::Shape(format!(
                    "block {} is {:?}, expected {:?}",
                    spec.name,
                    b.shape(),
                    (spec.rows, spec.cols)
                )));
            }
            if !b.is_finite() {
                return Err(Error::Shape(format!(
                    "block {} has non-finite entries",
                    spec.name
                )));
            }
        }
        Ok(Self {
            variant,
            dims,
            blocks,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    /// Copy with every entry rounded to `f32`, the snapshot storage precision.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.quantize_f32();
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(Matrix::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }
}
