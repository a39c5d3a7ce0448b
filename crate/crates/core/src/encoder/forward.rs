use super::params::{ModelParams, ParamVars};
use super::{EncoderConfig, SentinelLayout, SentinelRole, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tape, Tensor, Var, MASK_BIAS};

/// Hidden states of one encoder pass, recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapedTrace {
    /// `hidden[l]` is `[seq_len x d_model]`; layer 0 is the embedding output.
    pub hidden: Vec<Var>,
    pub layout: SentinelLayout,
    pub mask: Vec<bool>,
}

impl TapedTrace {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("at least one layer")
    }
}

/// Hidden states of one encoder pass as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub hidden: Vec<Tensor>,
    pub layout: SentinelLayout,
    pub mask: Vec<bool>,
}

impl ForwardTrace {
    pub fn n_layers(&self) -> usize {
        self.hidden.len() - 1
    }

    pub fn state(&self, layer: usize, position: usize) -> &[f64] {
        self.hidden[layer].row(position)
    }

    pub fn last(&self) -> &Tensor {
        self.hidden.last().expect("at least one layer")
    }
}

fn validate_input(
    config: &EncoderConfig,
    token_ids: &[u32],
    mask: &[bool],
    layout: &SentinelLayout,
) -> Result<()> {
    if token_ids.len() != mask.len() {
        return Err(Error::contract(format!(
            "token_ids has length {} but mask has length {}",
            token_ids.len(),
            mask.len()
        )));
    }
    if token_ids.is_empty() || token_ids.len() > config.max_len {
        return Err(Error::Input(format!(
            "sequence length {} outside 1..={}",
            token_ids.len(),
            config.max_len
        )));
    }
    if let Some(&bad) = token_ids
        .iter()
        .find(|&&t| t as usize >= config.vocab_size)
    {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    layout.validate(token_ids.len(), mask, config.n_candidates)
}

/// Runs the encoder on `tape`. Padding positions (`mask == false`) are
/// removed from every attention row, so real positions never see them.
pub fn forward_taped(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &EncoderConfig,
    token_ids: &[u32],
    mask: &[bool],
    layout: &SentinelLayout,
) -> Result<TapedTrace> {
    validate_input(config, token_ids, mask, layout)?;
    let len = token_ids.len();
    let dh = config.head_dim();
    let score_scale = 1.0 / (dh as f64).sqrt();

    let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..len).collect();
    let tok = tape.gather_rows(vars.token_embedding, &ids)?;
    let pos = tape.gather_rows(vars.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut hidden = vec![x];

    let mask_bias = if mask.iter().all(|&m| m) {
        None
    } else {
        let row: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_BIAS })
            .collect();
        let data = row.repeat(len);
        Some(tape.constant(Tensor::matrix(len, len, data)?))
    };

    for (i, layer) in vars.layers.iter().enumerate() {
        let h = tape.layer_norm(x, layer.attn_norm_gamma, layer.attn_norm_beta, LAYER_NORM_EPS)?;
        let q = tape.matmul(h, layer.wq)?;
        let q = tape.add_row_bias(q, layer.bq)?;
        let k = tape.matmul(h, layer.wk)?;
        let k = tape.add_row_bias(k, layer.bk)?;
        let v = tape.matmul(h, layer.wv)?;
        let v = tape.add_row_bias(v, layer.bv)?;

        let mut heads = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let (qh, kh, vh) = if config.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, hd * dh, dh)?,
                    tape.slice_cols(k, hd * dh, dh)?,
                    tape.slice_cols(v, hd * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, score_scale);
            if let Some(mb) = mask_bias {
                scores = tape.add(scores, mb)?;
            }
            let probs = tape.softmax_rows(scores);
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn = tape.matmul(ctx, layer.wo)?;
        let attn = tape.add_row_bias(attn, layer.bo)?;
        x = tape.add(x, attn)?;

        let h = tape.layer_norm(x, layer.ffn_norm_gamma, layer.ffn_norm_beta, LAYER_NORM_EPS)?;
        let f = tape.matmul(h, layer.w1)?;
        let f = tape.add_row_bias(f, layer.b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, layer.w2)?;
        let f = tape.add_row_bias(f, layer.b2)?;
        x = tape.add(x, f)?;

        if i + 1 == vars.layers.len() {
            let out =
                tape.layer_norm(x, vars.final_norm_gamma, vars.final_norm_beta, LAYER_NORM_EPS)?;
            hidden.push(out);
        } else {
            hidden.push(x);
        }
    }

    Ok(TapedTrace {
        hidden,
        layout: layout.clone(),
        mask: mask.to_vec(),
    })
}

/// Linear head over each `<1>` state: `logit_j = w . h_j + b`.
pub fn head_logits_taped(
    tape: &mut Tape,
    trace: &TapedTrace,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let marks = &trace.layout.candidate_marks;
    let reps = tape.gather_rows(trace.last(), marks)?;
    let d = tape.shape(weight)[0];
    let w = tape.reshape(weight, &[d, 1])?;
    let scores = tape.matmul(reps, w)?;
    let scores = tape.add_row_bias(scores, bias)?;
    tape.reshape(scores, &[marks.len()])
}

/// Sequence positions holding the requested sentinel roles, ascending.
pub fn alignment_positions(layout: &SentinelLayout, roles: &[SentinelRole]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &role in roles {
        match role {
            SentinelRole::Candidate => out.extend(&layout.candidate_marks),
            SentinelRole::QuestionStart => out.push(layout.question_start),
            seg => {
                let seg_role = seg.segment().expect("segment role");
                let pos = layout.segment(seg_role).ok_or_else(|| {
                    Error::contract(format!("sentinel role {role:?} absent from this input"))
                })?;
                out.push(pos);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// `[n_layers * n_positions x d_model]` rows ordered by (layer, position).
pub fn taped_alignment_reps(
    tape: &mut Tape,
    trace: &TapedTrace,
    roles: &[SentinelRole],
    layers: &[usize],
) -> Result<Var> {
    let positions = alignment_positions(&trace.layout, roles)?;
    check_layers(layers, trace.hidden.len() - 1)?;
    let parts = layers
        .iter()
        .map(|&l| tape.gather_rows(trace.hidden[l], &positions))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

fn check_layers(layers: &[usize], n_layers: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::contract("no alignment layers requested"));
    }
    if let Some(bad) = layers.iter().find(|&&l| l > n_layers) {
        return Err(Error::contract(format!(
            "layer {bad} exceeds n_layers {n_layers}"
        )));
    }
    Ok(())
}

/// Plain-value encoder pass.
pub fn forward(
    params: &ModelParams,
    token_ids: &[u32],
    mask: &[bool],
    layout: &SentinelLayout,
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, None);
    let trace = forward_taped(&mut tape, &vars, &params.config, token_ids, mask, layout)?;
    Ok(ForwardTrace {
        hidden: trace.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
        layout: trace.layout,
        mask: trace.mask,
    })
}

/// Answer logits from the model's own head.
pub fn candidate_logits(trace: &ForwardTrace, params: &ModelParams) -> Tensor {
    let w = params.head_weight.data();
    let b = params.head_bias.data()[0];
    let last = trace.last();
    let scores = trace
        .layout
        .candidate_marks
        .iter()
        .map(|&p| kernels::dot(w, last.row(p)) + b)
        .collect();
    Tensor::vector(scores).expect("non-empty candidates")
}

/// Probe head: each candidate scores the plain sum of its `<1>` state.
pub fn sum_head_scores(trace: &ForwardTrace) -> Tensor {
    let last = trace.last();
    let scores = trace
        .layout
        .candidate_marks
        .iter()
        .map(|&p| last.row(p).iter().sum())
        .collect();
    Tensor::vector(scores).expect("non-empty candidates")
}

/// Alignment vectors ordered by (layer, position).
pub fn extract_alignment_reps(
    trace: &ForwardTrace,
    roles: &[SentinelRole],
    layers: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let positions = alignment_positions(&trace.layout, roles)?;
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    check_layers(&layers, trace.n_layers())?;
    Ok(layers
        .iter()
        .flat_map(|&l| positions.iter().map(move |&p| trace.state(l, p).to_vec()))
        .collect())
}
