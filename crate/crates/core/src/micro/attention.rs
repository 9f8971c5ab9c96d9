use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::{Tape, Tensor, Var};

use super::AttentionKind;

/// LeakyReLU slope inside GAT-style attention.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

/// Parameter names and `[rows, cols]` shapes of one attention head with
/// per-head feature width `dh`.
pub(crate) fn attention_param_shapes(
    kind: AttentionKind,
    dh: usize,
) -> Vec<(&'static str, [usize; 2])> {
    match kind {
        AttentionKind::Const | AttentionKind::Gcn => vec![],
        AttentionKind::Gat | AttentionKind::SymGat => vec![("w_a", [2 * dh, 1])],
        AttentionKind::Cos => vec![("w_a1", [dh, dh]), ("w_a2", [dh, dh])],
        AttentionKind::Linear => vec![("w_a", [dh, 1])],
        AttentionKind::GeneLinear => vec![("w_a1", [dh, dh]), ("w_a2", [dh, dh]), ("w_g", [dh, 1])],
    }
}

fn gat_logits(tape: &mut Tape, h: Var, graph: &Graph, w_a: Var) -> Result<Var> {
    let hd = tape.gather_rows(h, graph.edge_dst().clone())?;
    let hs = tape.gather_rows(h, graph.edge_src().clone())?;
    let cat = tape.concat_cols(&[hd, hs])?;
    let lin = tape.matmul(cat, w_a)?;
    Ok(tape.leaky_relu(lin, ATTENTION_LEAKY_SLOPE))
}

/// Unnormalized coefficient `a_ij` for every edge `j -> i`, shape `[E, 1]`.
/// `h` holds the transformed per-head features; `params` follow the order
/// of the head's registered attention parameters.
pub fn raw_attention(
    tape: &mut Tape,
    kind: AttentionKind,
    h: Var,
    graph: &Graph,
    params: &[Var],
) -> Result<Var> {
    let want = attention_param_shapes(kind, tape.value(h).cols()).len();
    if params.len() != want {
        return Err(Error::Invalid(format!(
            "{kind} attention takes {want} parameters, got {}",
            params.len()
        )));
    }
    let e = graph.num_edges();
    let n = graph.num_nodes();
    let out = match kind {
        AttentionKind::Const => tape.constant(Tensor::ones(&[e, 1])),
        AttentionKind::Gcn => {
            let d = graph.degrees();
            let data = graph
                .edge_dst()
                .iter()
                .zip(graph.edge_src().iter())
                .map(|(&i, &j)| 1.0 / ((d[i] * d[j]) as f64).sqrt())
                .collect();
            tape.constant(Tensor::column_vector(data))
        }
        AttentionKind::Gat => gat_logits(tape, h, graph, params[0])?,
        AttentionKind::SymGat => {
            let a = gat_logits(tape, h, graph, params[0])?;
            let back = tape.gather_rows(a, graph.edge_reverse().clone())?;
            tape.add(a, back)?
        }
        AttentionKind::Cos => {
            let u = tape.matmul(h, params[0])?;
            let v = tape.matmul(h, params[1])?;
            let ud = tape.gather_rows(u, graph.edge_dst().clone())?;
            let vs = tape.gather_rows(v, graph.edge_src().clone())?;
            let prod = tape.mul(ud, vs)?;
            tape.row_sum(prod)
        }
        AttentionKind::Linear => {
            // tanh(sum_{j in N(i)} W_a h_j), shared by all neighbors of i
            let s = tape.matmul(h, params[0])?;
            let s_src = tape.gather_rows(s, graph.edge_src().clone())?;
            let total = tape.segment_sum(s_src, graph.edge_dst().clone(), n)?;
            let t = tape.tanh(total);
            tape.gather_rows(t, graph.edge_dst().clone())?
        }
        AttentionKind::GeneLinear => {
            let u = tape.matmul(h, params[0])?;
            let v = tape.matmul(h, params[1])?;
            let ud = tape.gather_rows(u, graph.edge_dst().clone())?;
            let vs = tape.gather_rows(v, graph.edge_src().clone())?;
            let z = tape.add(ud, vs)?;
            let z = tape.tanh(z);
            tape.matmul(z, params[2])?
        }
    };
    Ok(out)
}

/// Coefficients used to weight messages: raw values for `Const`/`Gcn`,
/// neighborhood softmax for the learned kinds.
pub fn attention_coefficients(
    tape: &mut Tape,
    kind: AttentionKind,
    h: Var,
    graph: &Graph,
    params: &[Var],
) -> Result<Var> {
    let raw = raw_attention(tape, kind, h, graph, params)?;
    if kind.is_normalized() {
        Ok(tape.segment_softmax(raw, graph.edge_dst().clone(), graph.num_nodes())?)
    } else {
        Ok(raw)
    }
}
