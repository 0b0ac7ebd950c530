use super::{AttnIdx, FfnIdx, PolicyParams};
use crate::error::{Error, Result};
use crate::navsim::{Observation, Vocabulary};
use crate::tape::{NodeId, Tape};
use crate::tensor::Matrix;

/// Recurrent state of one policy during one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    /// `[f_cls, f_w1..f_wL, f_sep]` from the instruction encoder; fixed for the episode.
    pub instruction_features: Matrix,
    /// Current `cls`, `1×d_model`.
    pub cls: Matrix,
    /// Earlier `cls` vectors, oldest first. Always empty for the original variant.
    pub cls_history: Vec<Matrix>,
    /// 1-based step index.
    pub t: usize,
    /// Per cross layer: word keys and values, derived from `instruction_features`.
    word_memory: Vec<(Matrix, Matrix)>,
}

impl PolicyState {
    /// Encodes the instruction and returns the state for step 1.
    pub fn new(params: &PolicyParams, instruction: &[u32]) -> Result<Self> {
        let mut tape = Tape::new(&params.blocks);
        let features = encode_nodes(&mut tape, params, instruction)?;
        let memory = word_memory_nodes(&mut tape, params, features);
        let instruction_features = tape.value(features).clone();
        Ok(Self {
            cls: instruction_features.slice_rows(0, 1),
            instruction_features,
            cls_history: Vec::new(),
            t: 1,
            word_memory: memory
                .into_iter()
                .map(|(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
                .collect(),
        })
    }

    pub fn instruction_len(&self) -> usize {
        self.instruction_features.rows - 2
    }
}

/// Output of one prediction step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionScores {
    /// Unnormalized score per candidate, stop last.
    pub scores: Vec<f64>,
    /// Last-layer `cls`→word attention logits; one row per history entry
    /// (oldest first) followed by the current `cls`, one column per word.
    pub attention_rows: Matrix,
    /// Critic estimate of the state value.
    pub value: f64,
    /// Post-attention `cls`, input to the matching block.
    pub cls_out: Matrix,
    /// Post-attention candidate rows, stop last.
    pub candidates_out: Matrix,
}

pub(crate) struct StepNodes {
    pub scores: NodeId,
    pub attention_rows: NodeId,
    pub value: NodeId,
    pub cls_out: NodeId,
    pub candidates_out: NodeId,
}

/// Runs the instruction encoder: embeddings, projection, self-attention stack.
pub fn encode_instruction(params: &PolicyParams, instruction: &[u32]) -> Result<Matrix> {
    let mut tape = Tape::new(&params.blocks);
    let f = encode_nodes(&mut tape, params, instruction)?;
    Ok(tape.value(f).clone())
}

pub(crate) fn encode_nodes(
    tape: &mut Tape,
    params: &PolicyParams,
    instruction: &[u32],
) -> Result<NodeId> {
    let dims = &params.dims;
    if instruction.len() > dims.max_instruction_len {
        return Err(Error::InstructionTooLong {
            len: instruction.len(),
            max: dims.max_instruction_len,
        });
    }
    if let Some(&token) = instruction.iter().find(|&&t| t as usize >= dims.vocab_size) {
        return Err(Error::UnknownToken {
            token,
            vocab: dims.vocab_size,
        });
    }
    let lay = params.layout();
    let mut ids = Vec::with_capacity(instruction.len() + 2);
    ids.push(Vocabulary::CLS as usize);
    ids.extend(instruction.iter().map(|&t| t as usize));
    ids.push(Vocabulary::SEP as usize);

    let tok = tape.gather_rows(tape.param(lay.token_embedding), &ids);
    let pos = tape.slice_rows(tape.param(lay.positional_embedding), 0, ids.len());
    let emb = tape.add(tok, pos);
    let mut x = tape.matmul(emb, tape.param(lay.w_instruction));
    let scale = 1.0 / (dims.d_model as f64).sqrt();
    for layer in &lay.self_layers {
        let a = &layer.attn;
        let q = tape.matmul(x, tape.param(a.wq));
        let k = tape.matmul(x, tape.param(a.wk));
        let v = tape.matmul(x, tape.param(a.wv));
        let (ctx, _) = attend(tape, q, k, v, a.wo, scale);
        x = residual_norm(tape, x, ctx, a);
        x = feed_forward(tape, x, &layer.ffn);
    }
    Ok(x)
}

/// Word keys and values for every cross layer. Words are rows `1..` of the
/// encoder output (the instruction words plus the separator).
pub(crate) fn word_memory_nodes(
    tape: &mut Tape,
    params: &PolicyParams,
    features: NodeId,
) -> Vec<(NodeId, NodeId)> {
    let rows = tape.value(features).rows;
    let words = tape.slice_rows(features, 1, rows);
    params
        .layout()
        .cross_layers
        .iter()
        .map(|layer| {
            let k = tape.matmul(words, tape.param(layer.cross.wk));
            let v = tape.matmul(words, tape.param(layer.cross.wv));
            (k, v)
        })
        .collect()
}

fn attend(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    wo: usize,
    scale: f64,
) -> (NodeId, NodeId) {
    let raw = tape.matmul_bt(q, k);
    let logits = tape.scale(raw, scale);
    let weights = tape.softmax_rows(logits);
    let ctx = tape.matmul(weights, v);
    let out = tape.matmul(ctx, tape.param(wo));
    (out, logits)
}

fn residual_norm(tape: &mut Tape, x: NodeId, delta: NodeId, a: &AttnIdx) -> NodeId {
    let sum = tape.add(x, delta);
    tape.layer_norm(sum, tape.param(a.ln_g), tape.param(a.ln_b))
}

fn feed_forward(tape: &mut Tape, x: NodeId, f: &FfnIdx) -> NodeId {
    let h = tape.matmul(x, tape.param(f.w1));
    let h = tape.add_row(h, tape.param(f.b1));
    let h = tape.tanh(h);
    let o = tape.matmul(h, tape.param(f.w2));
    let o = tape.add_row(o, tape.param(f.b2));
    let sum = tape.add(x, o);
    tape.layer_norm(sum, tape.param(f.ln_g), tape.param(f.ln_b))
}

/// One prediction step on the tape.
///
/// `candidates` holds the raw view features with the all-zero stop row last.
/// `history` is empty for the original variant.
pub(crate) fn step_nodes(
    tape: &mut Tape,
    params: &PolicyParams,
    memory: &[(NodeId, NodeId)],
    cls: NodeId,
    history: &[NodeId],
    candidates: Matrix,
    n_words: usize,
) -> StepNodes {
    let lay = params.layout();
    let scale = 1.0 / (params.dims.d_model as f64).sqrt();
    let n_cand = candidates.rows;
    let h = history.len();

    let raw = tape.constant(candidates);
    let projected = tape.matmul(raw, tape.param(lay.w_candidate));
    let mut state = tape.concat_rows(&[projected, cls]);
    let with_history = |tape: &mut Tape, s: NodeId| {
        if history.is_empty() {
            s
        } else {
            let mut parts = Vec::with_capacity(h + 1);
            parts.push(s);
            parts.extend_from_slice(history);
            tape.concat_rows(&parts)
        }
    };

    let last = lay.cross_layers.len() - 1;
    let mut attention_rows = None;
    let mut scores = None;
    for (li, layer) in lay.cross_layers.iter().enumerate() {
        let (wk, wv) = memory[li];
        // History rows query the words only in the last layer, where their
        // attention rows are reported; they are never updated.
        let queries = if li == last {
            with_history(tape, state)
        } else {
            state
        };
        let q = tape.matmul(queries, tape.param(layer.cross.wq));
        let (ctx, logits) = attend(tape, q, wk, wv, layer.cross.wo, scale);
        let live = tape.slice_rows(ctx, 0, n_cand + 1);
        state = residual_norm(tape, state, live, &layer.cross);
        if li == last {
            let current = tape.slice_rows(logits, n_cand, n_cand + 1);
            let rows = if h > 0 {
                let past = tape.slice_rows(logits, n_cand + 1, n_cand + 1 + h);
                tape.concat_rows(&[past, current])
            } else {
                current
            };
            attention_rows = Some(tape.slice_cols(rows, 0, n_words));
        }

        let kv = with_history(tape, state);
        let q = tape.matmul(state, tape.param(layer.selfattn.wq));
        let k = tape.matmul(kv, tape.param(layer.selfattn.wk));
        let v = tape.matmul(kv, tape.param(layer.selfattn.wv));
        let (ctx, logits) = attend(tape, q, k, v, layer.selfattn.wo, scale);
        state = residual_norm(tape, state, ctx, &layer.selfattn);
        if li == last {
            let cls_row = tape.slice_rows(logits, n_cand, n_cand + 1);
            scores = Some(tape.slice_cols(cls_row, 0, n_cand));
        }
        state = feed_forward(tape, state, &layer.ffn);
    }

    let cls_out = tape.slice_rows(state, n_cand, n_cand + 1);
    let candidates_out = tape.slice_rows(state, 0, n_cand);
    let v = tape.matmul(cls_out, tape.param(lay.critic_w));
    let value = tape.add(v, tape.param(lay.critic_b));
    StepNodes {
        scores: scores.expect("at least one cross layer"),
        attention_rows: attention_rows.expect("at least one cross layer"),
        value,
        cls_out,
        candidates_out,
    }
}

/// Gated map from `[cls_out ⊕ taken candidate row]` to the next `cls`.
pub(crate) fn matching_nodes(
    tape: &mut Tape,
    params: &PolicyParams,
    cls_out: NodeId,
    candidates_out: NodeId,
    action: usize,
) -> NodeId {
    let lay = params.layout();
    let taken = tape.slice_rows(candidates_out, action, action + 1);
    let z = tape.concat_cols(cls_out, taken);
    let g = tape.matmul(z, tape.param(lay.match_w_gate));
    let g = tape.add(g, tape.param(lay.match_b_gate));
    let g = tape.sigmoid(g);
    let u = tape.matmul(z, tape.param(lay.match_w_value));
    let u = tape.add(u, tape.param(lay.match_b_value));
    tape.mul(u, g)
}

pub(crate) fn candidate_matrix(obs: &Observation, d_view: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(obs.candidate_actions.len() * d_view);
    for c in &obs.candidate_actions {
        if c.feature.len() != d_view {
            return Err(Error::Shape(format!(
                "candidate feature has dimension {}, policy expects {d_view}",
                c.feature.len()
            )));
        }
        data.extend_from_slice(&c.feature);
    }
    Ok(Matrix::from_vec(obs.candidate_actions.len(), d_view, data))
}

/// Scores every candidate action for the current observation.
pub fn predict(
    params: &PolicyParams,
    state: &PolicyState,
    obs: &Observation,
) -> Result<ActionScores> {
    if !params.variant.keeps_history() && !state.cls_history.is_empty() {
        return Err(Error::Shape(
            "original variant state carries a cls history".into(),
        ));
    }
    let candidates = candidate_matrix(obs, params.dims.d_view)?;
    let mut tape = Tape::new(&params.blocks);
    let memory: Vec<(NodeId, NodeId)> = state
        .word_memory
        .iter()
        .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
        .collect();
    let cls = tape.constant(state.cls.clone());
    let history: Vec<NodeId> = state
        .cls_history
        .iter()
        .map(|h| tape.constant(h.clone()))
        .collect();
    let nodes = step_nodes(
        &mut tape,
        params,
        &memory,
        cls,
        &history,
        candidates,
        state.instruction_len(),
    );
    Ok(ActionScores {
        scores: tape.value(nodes.scores).data.clone(),
        attention_rows: tape.value(nodes.attention_rows).clone(),
        value: tape.value(nodes.value).data[0],
        cls_out: tape.value(nodes.cls_out).clone(),
        candidates_out: tape.value(nodes.candidates_out).clone(),
    })
}

/// Advances the recurrent state after `taken_action` was executed.
pub fn update_state(
    params: &PolicyParams,
    state: &PolicyState,
    scores: &ActionScores,
    taken_action: usize,
) -> Result<PolicyState> {
    if taken_action >= scores.scores.len() {
        return Err(Error::ActionOutOfRange {
            index: taken_action,
            count: scores.scores.len(),
        });
    }
    let mut tape = Tape::new(&params.blocks);
    let cls_out = tape.constant(scores.cls_out.clone());
    let cands = tape.constant(scores.candidates_out.clone());
    let next = matching_nodes(&mut tape, params, cls_out, cands, taken_action);
    let mut cls_history = state.cls_history.clone();
    if params.variant.keeps_history() {
        cls_history.push(state.cls.clone());
    }
    Ok(PolicyState {
        instruction_features: state.instruction_features.clone(),
        cls: tape.value(next).clone(),
        cls_history,
        t: state.t + 1,
        word_memory: state.word_memory.clone(),
    })
}
