//! Question-guided intra-modal selection.
//!
//! Within one modal graph, every node earns a question-conditioned importance
//! weight and every neighborhood a set of edge attention weights:
//!
//! * node weights: `alpha_i = softmax_i(node_score . tanh(W_n v_i + W_q q))`
//! * edge values: `v'_j = W_ev [v_j, r_ji]` with the connecting edge feature
//! * node-local query: `q'_i = W_eq [v_i, q]`
//! * edge weights: `beta_ji = softmax_j(edge_score . tanh(W_ep v'_j + W_eqp q'_i))`
//!   normalized over node i's neighborhood entries
//! * aggregate: `m_i = sum_j beta_ji v'_j`
//! * selected feature: `v_hat_i = relu(W_u [m_i, alpha_i v_i])`
//!
//! Softmax vectors are assembled in the graph's canonical node order, so the
//! arithmetic is independent of input order. Isolated nodes skip the edge
//! path and aggregate a zero vector.

use crate::config::ModelDims;
use crate::error::{Error, Result};
use crate::graphs::{ModalGraph, NeighborIndex};
use crate::numerics::{ParameterSet, Tape, Tensor, Var};

/// Parameter names under a modality prefix such as `select.visual`.
fn name(prefix: &str, suffix: &str) -> String {
    format!("{prefix}.{suffix}")
}

/// Registers the selection parameters for one modality.
///
/// `node_dim`/`edge_dim` are the graph's feature widths; attention projections
/// use `dims.attention_dim`, the selected output `dims.select_dim`, and the
/// question enters at `dims.hidden_dim`.
pub fn register_selection_params(
    params: &mut ParameterSet,
    prefix: &str,
    node_dim: usize,
    edge_dim: usize,
    dims: &ModelDims,
    seed: u64,
) -> Result<()> {
    let (a, s, h) = (dims.attention_dim, dims.select_dim, dims.hidden_dim);
    params.insert_glorot(&name(prefix, "node_proj"), &[a, node_dim], seed)?;
    params.insert_glorot(&name(prefix, "node_query"), &[a, h], seed)?;
    params.insert_glorot(&name(prefix, "node_score"), &[a], seed)?;
    params.insert_glorot(&name(prefix, "edge_value"), &[s, node_dim + edge_dim], seed)?;
    params.insert_glorot(&name(prefix, "edge_query"), &[h, node_dim + h], seed)?;
    params.insert_glorot(&name(prefix, "edge_proj"), &[a, s], seed)?;
    params.insert_glorot(&name(prefix, "edge_query_proj"), &[a, h], seed)?;
    params.insert_glorot(&name(prefix, "edge_score"), &[a], seed)?;
    params.insert_glorot(&name(prefix, "update"), &[s, s + node_dim], seed)?;
    Ok(())
}

/// Selection results for one graph.
pub struct SelectionOutput {
    /// Selected node features, indexed like the graph's nodes.
    pub v_hat: Vec<Var>,
    /// Node weights in canonical order; `alpha_of` maps node index to value.
    pub alpha: Var,
    /// Per node: the edge-weight vector over its neighborhood entries, with
    /// the entries it is aligned to. `None` for isolated nodes.
    pub beta: Vec<Option<(Var, Vec<(usize, usize)>)>>,
}

impl SelectionOutput {
    /// The alpha weight of node `i` as a plain value.
    pub fn alpha_of(&self, tape: &Tape, graph: &ModalGraph, i: usize) -> f64 {
        tape.value(self.alpha).data()[graph.rank(i)]
    }
}

/// Runs selection over one non-empty graph. `node_vars` holds the node
/// feature leaves, indexed like the graph's nodes; `q` is the question vector.
pub fn select(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    graph: &ModalGraph,
    neighbors: &NeighborIndex,
    node_vars: &[Var],
    q: Var,
) -> Result<SelectionOutput> {
    if graph.node_count() == 0 {
        return Err(Error::domain("select", "empty graph"));
    }
    if node_vars.len() != graph.node_count() {
        return Err(Error::dimension(
            "select",
            format!("{} node vars for {} nodes", node_vars.len(), graph.node_count()),
        ));
    }

    let node_proj = tape.param(params, &name(prefix, "node_proj"))?;
    let node_query = tape.param(params, &name(prefix, "node_query"))?;
    let node_score = tape.param(params, &name(prefix, "node_score"))?;
    let edge_value = tape.param(params, &name(prefix, "edge_value"))?;
    let edge_query = tape.param(params, &name(prefix, "edge_query"))?;
    let edge_proj = tape.param(params, &name(prefix, "edge_proj"))?;
    let edge_query_proj = tape.param(params, &name(prefix, "edge_query_proj"))?;
    let edge_score = tape.param(params, &name(prefix, "edge_score"))?;
    let update = tape.param(params, &name(prefix, "update"))?;

    let select_dim = tape.value(update).rows()?;
    let projected_query = tape.matvec(node_query, q)?;

    // Node weights, assembled canonically.
    let mut node_logits = Vec::with_capacity(graph.node_count());
    for &i in graph.canon_order() {
        let projected = tape.matvec(node_proj, node_vars[i])?;
        let summed = tape.add(projected, projected_query)?;
        let activated = tape.tanh(summed)?;
        node_logits.push(tape.dot(node_score, activated)?);
    }
    let logits = tape.concat(&node_logits)?;
    let alpha = tape.softmax(logits)?;

    // Edge features enter the tape once each, lazily.
    let mut edge_vars: Vec<Option<Var>> = vec![None; graph.edge_count()];
    let mut edge_var = |tape: &mut Tape, e: usize| -> Result<Var> {
        if let Some(v) = edge_vars[e] {
            return Ok(v);
        }
        let v = tape.input(Tensor::vector(graph.edge(e).feature.clone()))?;
        edge_vars[e] = Some(v);
        Ok(v)
    };

    let mut v_hat = vec![None; graph.node_count()];
    let mut beta_out = vec![None; graph.node_count()];
    for &i in graph.canon_order() {
        let entries = neighbors.entries(i);
        let aggregated = if entries.is_empty() {
            tape.zeros(select_dim)?
        } else {
            let local_query_in = tape.concat(&[node_vars[i], q])?;
            let local_query = tape.matvec(edge_query, local_query_in)?;
            let query_proj = tape.matvec(edge_query_proj, local_query)?;

            let mut values = Vec::with_capacity(entries.len());
            let mut logits = Vec::with_capacity(entries.len());
            for &(j, e) in entries {
                let r = edge_var(tape, e)?;
                let value_in = tape.concat(&[node_vars[j], r])?;
                let value = tape.matvec(edge_value, value_in)?;
                values.push(value);
                let proj = tape.matvec(edge_proj, value)?;
                let summed = tape.add(proj, query_proj)?;
                let activated = tape.tanh(summed)?;
                logits.push(tape.dot(edge_score, activated)?);
            }
            let logits = tape.concat(&logits)?;
            let beta = tape.softmax(logits)?;
            let aggregated = tape.weighted_sum(beta, &values)?;
            beta_out[i] = Some((beta, entries.to_vec()));
            aggregated
        };

        let alpha_i = tape.slice(alpha, graph.rank(i), 1)?;
        let scaled = tape.scale_by(node_vars[i], alpha_i)?;
        let update_in = tape.concat(&[aggregated, scaled])?;
        let pre = tape.matvec(update, update_in)?;
        v_hat[i] = Some(tape.relu(pre)?);
    }

    Ok(SelectionOutput {
        v_hat: v_hat.into_iter().map(|v| v.expect("every node visited")).collect(),
        alpha,
        beta: beta_out,
    })
}
