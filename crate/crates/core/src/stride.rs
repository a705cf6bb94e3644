//! Joint and temporal stride attention.
//!
//! Both modules slice their token axis into sliding windows from a
//! `WindowPlan`, run the shared residual attention/FFN block per window with
//! modal tokens replicated into every window, and rebuild the axis by
//! averaging overlapping window outputs position by position. Modal-token
//! outputs are averaged over windows.

use crate::attention::{attention_block, average, AttnMap, AttnWeights, FfnWeights};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};
use crate::window::WindowPlan;

pub struct StrideAttnParams {
    pub attn: AttnWeights,
    pub ffn: FfnWeights,
}

/// Per-window attention maps captured from one stride pass.
#[derive(Debug, Clone, serde::Serialize)]
pub struct WindowAttn {
    pub query_start: usize,
    pub kv_start: usize,
    pub map: AttnMap,
}

fn empty_map() -> AttnMap {
    AttnMap { heads: 0, n_q: 0, n_k: 0, weights: Vec::new() }
}

/// Windowed attention over the joint axis of pose tokens (T, R, d).
///
/// `modal` tokens, each (T, 1, d), join every window as extra columns in the
/// given order. Returns the rebuilt pose tokens and one output per modal
/// token.
pub fn joint_stride_attention(
    p_tokens: &Tensor,
    modal: &[&Tensor],
    params: &StrideAttnParams,
    plan: &WindowPlan,
    heads: usize,
    mut trace: Option<&mut Vec<WindowAttn>>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (t, r, d) = p_tokens.dims3("joint_stride_attention")?;
    if plan.axis_length != r {
        return Err(Error::contract(
            "joint_stride_attention",
            format!("plan over {} vs joint axis {r}", plan.axis_length),
        ));
    }
    for m in modal {
        let (mt, mo, md) = m.dims3("joint_stride_attention")?;
        if mt != t || mo != 1 || md != d {
            return Err(Error::shape(
                "joint_stride_attention",
                format!("modal token {:?} vs (T,1,d)=({t},1,{d})", m.shape()),
            ));
        }
    }
    let wnd = plan.wnd;
    let cols = wnd + modal.len();

    let mut window_p = Vec::with_capacity(plan.query_starts.len());
    let mut window_modal: Vec<Vec<Tensor>> = vec![Vec::new(); modal.len()];
    for (j, &qs) in plan.query_starts.iter().enumerate() {
        let ks = plan.kv_starts[plan.pairing(j)];
        let gather = |start: usize| -> Result<Tensor> {
            let win = ops::slice(p_tokens, 1, start, wnd)?;
            let mut parts: Vec<&Tensor> = vec![&win];
            parts.extend(modal.iter().copied());
            let grid = ops::concat(&parts, 1)?;
            ops::reshape(&grid, &[t * cols, d])
        };
        let q_tok = gather(qs)?;
        let kv_tok = gather(ks)?;

        let mut map = trace.is_some().then(empty_map);
        let out = attention_block(&q_tok, &kv_tok, &params.attn, &params.ffn, heads, map.as_mut())?;
        if let (Some(tr), Some(map)) = (trace.as_deref_mut(), map) {
            tr.push(WindowAttn { query_start: qs, kv_start: ks, map });
        }
        let out = ops::reshape(&out, &[t, cols, d])?;
        window_p.push((qs, ops::slice(&out, 1, 0, wnd)?));
        for (i, sink) in window_modal.iter_mut().enumerate() {
            sink.push(ops::slice(&out, 1, wnd + i, 1)?);
        }
    }

    // Per-joint overlap average across covering windows.
    let mut joint_cols = Vec::with_capacity(r);
    for joint in 0..r {
        let mut contributions = Vec::new();
        for (qs, part) in &window_p {
            if joint >= *qs && joint < qs + wnd {
                contributions.push(ops::slice(part, 1, joint - qs, 1)?);
            }
        }
        joint_cols.push(average(&contributions)?);
    }
    let refs: Vec<&Tensor> = joint_cols.iter().collect();
    let p_out = ops::concat(&refs, 1)?;

    let modal_out = window_modal
        .into_iter()
        .map(|outs| average(&outs))
        .collect::<Result<Vec<_>>>()?;
    Ok((p_out, modal_out))
}

/// Windowed attention over the time axis of the concatenated token set.
///
/// `token_groups` are (T, n_i, d) tensors concatenated along the token axis
/// into (T, D_n, d); windows slice time. Returns the rebuilt groups in the
/// same order.
pub fn temporal_stride_attention(
    token_groups: &[&Tensor],
    params: &StrideAttnParams,
    plan: &WindowPlan,
    heads: usize,
    mut trace: Option<&mut Vec<WindowAttn>>,
) -> Result<Vec<Tensor>> {
    if token_groups.is_empty() {
        return Err(Error::contract("temporal_stride_attention", "no token groups"));
    }
    let (t, _, d) = token_groups[0].dims3("temporal_stride_attention")?;
    if plan.axis_length != t {
        return Err(Error::contract(
            "temporal_stride_attention",
            format!("plan over {} vs time axis {t}", plan.axis_length),
        ));
    }
    let n = ops::concat(token_groups, 1)?;
    let d_n = n.shape()[1];
    let wnd = plan.wnd;

    let mut windows = Vec::with_capacity(plan.query_starts.len());
    for (j, &qs) in plan.query_starts.iter().enumerate() {
        let ks = plan.kv_starts[plan.pairing(j)];
        let q_tok = ops::reshape(&ops::slice(&n, 0, qs, wnd)?, &[wnd * d_n, d])?;
        let kv_tok = ops::reshape(&ops::slice(&n, 0, ks, wnd)?, &[wnd * d_n, d])?;

        let mut map = trace.is_some().then(empty_map);
        let out = attention_block(&q_tok, &kv_tok, &params.attn, &params.ffn, heads, map.as_mut())?;
        if let (Some(tr), Some(map)) = (trace.as_deref_mut(), map) {
            tr.push(WindowAttn { query_start: qs, kv_start: ks, map });
        }
        windows.push((qs, ops::reshape(&out, &[wnd, d_n, d])?));
    }

    // Per-time-step overlap average.
    let mut time_rows = Vec::with_capacity(t);
    for step in 0..t {
        let mut contributions = Vec::new();
        for (qs, out) in &windows {
            if step >= *qs && step < qs + wnd {
                contributions.push(ops::slice(out, 0, step - qs, 1)?);
            }
        }
        time_rows.push(average(&contributions)?);
    }
    let refs: Vec<&Tensor> = time_rows.iter().collect();
    let rebuilt = ops::concat(&refs, 0)?;

    let mut outputs = Vec::with_capacity(token_groups.len());
    let mut offset = 0;
    for g in token_groups {
        let width = g.shape()[1];
        outputs.push(ops::slice(&rebuilt, 1, offset, width)?);
        offset += width;
    }
    Ok(outputs)
}
