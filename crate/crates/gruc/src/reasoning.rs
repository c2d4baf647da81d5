//! Recurrent graph-memory reasoning.
//!
//! For one fact concept and one stream graph (visual or semantic), the module
//! keeps a control state `h` and one memory vector per graph node, then
//! iterates a fixed number of steps:
//!
//! * read: `a_j = tanh(W_rc h + W_rm m_j)`, `gamma = softmax_j(read_score . a_j)`,
//!   `c = sum_j gamma_j m_j`;
//! * control update: `h <- GRU(h, c)` with reset/update gates;
//! * memory update: for every node j, a relational neighbor term
//!   `nei_j = sum_{(k, e) in entries(j)} W_mn [m_k, r_e]` feeds the purely
//!   linear rewrite `m_j <- W_mu [m_j, nei_j, h]`, applied synchronously.
//!
//! The control state starts from the concept itself:
//! `h = W_ci [q, f_i, sum_{j in N_i} f_j]` over the fact graph. An empty
//! stream graph degenerates gracefully: reads return the zero vector and the
//! control state still evolves, so shapes never depend on instance content.
//!
//! All node iteration follows the graph's canonical order.

use crate::config::ModelDims;
use crate::error::{Error, Result};
use crate::graphs::{ModalGraph, NeighborIndex};
use crate::numerics::{ParameterSet, Tape, Var};

fn name(prefix: &str, suffix: &str) -> String {
    format!("{prefix}.{suffix}")
}

/// Registers reasoning parameters for one stream.
///
/// `memory_dim` is the width of the stream's node features (and so of its
/// memories and reads); `fact_dim` the width of fact-concept features;
/// `with_control_agg`/`with_update_agg` mirror the ablation switches since
/// they change input widths.
pub fn register_reasoning_params(
    params: &mut ParameterSet,
    prefix: &str,
    memory_dim: usize,
    edge_dim: usize,
    fact_dim: usize,
    dims: &ModelDims,
    with_control_agg: bool,
    with_update_agg: bool,
    seed: u64,
) -> Result<()> {
    let h = dims.hidden_dim;
    let a = dims.attention_dim;
    let m = memory_dim;
    let control_in = if with_control_agg {
        h + fact_dim + fact_dim
    } else {
        h + fact_dim
    };
    params.insert_glorot(&name(prefix, "control_init"), &[h, control_in], seed)?;
    params.insert_glorot(&name(prefix, "gru.input"), &[3 * h, m], seed)?;
    params.insert_glorot(&name(prefix, "gru.hidden_gates"), &[2 * h, h], seed)?;
    params.insert_glorot(&name(prefix, "gru.hidden_cand"), &[h, h], seed)?;
    params.insert_zeros(&name(prefix, "gru.bias"), &[3 * h])?;
    params.insert_glorot(&name(prefix, "read_control"), &[a, h], seed)?;
    params.insert_glorot(&name(prefix, "read_memory"), &[a, m], seed)?;
    params.insert_glorot(&name(prefix, "read_score"), &[a], seed)?;
    let update_in = if with_update_agg { m + m + h } else { m + h };
    params.insert_glorot(&name(prefix, "mem_update"), &[m, update_in], seed)?;
    if with_update_agg {
        params.insert_glorot(&name(prefix, "mem_neighbor"), &[m, m + edge_dim], seed)?;
    }
    Ok(())
}

/// One stream graph prepared for reasoning. Feature and edge leaves are built
/// once by the caller and shared across concepts.
pub struct StreamInput<'a> {
    pub prefix: &'a str,
    pub graph: &'a ModalGraph,
    pub neighbors: &'a NeighborIndex,
    /// Initial memories: the stream's selected node features.
    pub features: &'a [Var],
    /// Edge feature leaves, indexed like the graph's edges.
    pub edge_vars: &'a [Var],
    /// Memory width; needed independently in case the graph is empty.
    pub memory_dim: usize,
}

/// Read attention weights of one step, canonical node order.
#[derive(Clone, Debug)]
pub struct GammaTrace {
    pub step: usize,
    pub weights: Vec<f64>,
}

pub struct StreamResult {
    /// Control state after the final GRU update.
    pub final_control: Var,
    /// Read vector of the final step.
    pub final_read: Var,
    pub gamma: Vec<GammaTrace>,
}

/// GRU cell: `z` and `r` are sigmoid gates, the candidate uses the reset
/// hidden state, and the new state is `(1 - z) h + z h~`. With all-zero
/// weights this halves `h`, which pins the wiring in tests.
fn gru_cell(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    h: Var,
    input: Var,
) -> Result<Var> {
    let hidden = tape.value(h).len();
    let w_input = tape.param(params, &name(prefix, "gru.input"))?;
    let w_gates = tape.param(params, &name(prefix, "gru.hidden_gates"))?;
    let w_cand = tape.param(params, &name(prefix, "gru.hidden_cand"))?;
    let bias = tape.param(params, &name(prefix, "gru.bias"))?;

    let from_input = tape.matvec(w_input, input)?;
    let from_hidden = tape.matvec(w_gates, h)?;

    let z_x = tape.slice(from_input, 0, hidden)?;
    let z_h = tape.slice(from_hidden, 0, hidden)?;
    let z_b = tape.slice(bias, 0, hidden)?;
    let z_pre = tape.add(z_x, z_h)?;
    let z_pre = tape.add(z_pre, z_b)?;
    let z = tape.sigmoid(z_pre)?;

    let r_x = tape.slice(from_input, hidden, hidden)?;
    let r_h = tape.slice(from_hidden, hidden, hidden)?;
    let r_b = tape.slice(bias, hidden, hidden)?;
    let r_pre = tape.add(r_x, r_h)?;
    let r_pre = tape.add(r_pre, r_b)?;
    let r = tape.sigmoid(r_pre)?;

    let gated = tape.mul(r, h)?;
    let cand_h = tape.matvec(w_cand, gated)?;
    let cand_x = tape.slice(from_input, 2 * hidden, hidden)?;
    let cand_b = tape.slice(bias, 2 * hidden, hidden)?;
    let cand_pre = tape.add(cand_x, cand_h)?;
    let cand_pre = tape.add(cand_pre, cand_b)?;
    let candidate = tape.tanh(cand_pre)?;

    // (1 - z) h + z h~
    let keep_gate = tape.affine(z, -1.0, 1.0)?;
    let keep = tape.mul(keep_gate, h)?;
    let write = tape.mul(z, candidate)?;
    tape.add(keep, write)
}

/// Runs the reasoner for one concept over one stream.
///
/// `fact_feature` is the concept's selected fact feature; `fact_neighbor_sum`
/// the summed features of its fact-graph neighbors, absent when that term is
/// ablated. `steps` must be at least 1.
pub fn run_stream(
    tape: &mut Tape,
    params: &ParameterSet,
    stream: &StreamInput,
    q: Var,
    fact_feature: Var,
    fact_neighbor_sum: Option<Var>,
    steps: usize,
) -> Result<StreamResult> {
    if steps == 0 {
        return Err(Error::domain("run_stream", "steps must be at least 1"));
    }
    if stream.features.len() != stream.graph.node_count() {
        return Err(Error::dimension(
            "run_stream",
            format!(
                "{} features for {} nodes",
                stream.features.len(),
                stream.graph.node_count()
            ),
        ));
    }

    let control_init = tape.param(params, &name(stream.prefix, "control_init"))?;
    let read_control = tape.param(params, &name(stream.prefix, "read_control"))?;
    let read_memory = tape.param(params, &name(stream.prefix, "read_memory"))?;
    let read_score = tape.param(params, &name(stream.prefix, "read_score"))?;
    let mem_update = tape.param(params, &name(stream.prefix, "mem_update"))?;
    let with_update_agg = params.contains(&name(stream.prefix, "mem_neighbor"));
    let mem_neighbor = if with_update_agg {
        Some(tape.param(params, &name(stream.prefix, "mem_neighbor"))?)
    } else {
        None
    };

    let init_in = match fact_neighbor_sum {
        Some(agg) => tape.concat(&[q, fact_feature, agg])?,
        None => tape.concat(&[q, fact_feature])?,
    };
    let mut control = tape.matvec(control_init, init_in)?;

    // Memories in canonical order; `order[k]` is the node index.
    let order: Vec<usize> = stream.graph.canon_order().to_vec();
    let mut memories: Vec<Var> = order.iter().map(|&i| stream.features[i]).collect();
    let mut canon_pos = vec![0usize; stream.graph.node_count()];
    for (pos, &i) in order.iter().enumerate() {
        canon_pos[i] = pos;
    }

    let mut gamma_traces = Vec::with_capacity(steps);
    let mut read = tape.zeros(stream.memory_dim)?;

    for step in 1..=steps {
        // Read.
        if memories.is_empty() {
            read = tape.zeros(stream.memory_dim)?;
            gamma_traces.push(GammaTrace {
                step,
                weights: Vec::new(),
            });
        } else {
            let control_proj = tape.matvec(read_control, control)?;
            let mut logits = Vec::with_capacity(memories.len());
            for &m in &memories {
                let mem_proj = tape.matvec(read_memory, m)?;
                let summed = tape.add(control_proj, mem_proj)?;
                let activated = tape.tanh(summed)?;
                logits.push(tape.dot(read_score, activated)?);
            }
            let logits = tape.concat(&logits)?;
            let gamma = tape.softmax(logits)?;
            read = tape.weighted_sum(gamma, &memories)?;
            gamma_traces.push(GammaTrace {
                step,
                weights: tape.value(gamma).data().to_vec(),
            });
        }

        // Control update.
        control = gru_cell(tape, params, stream.prefix, control, read)?;

        // Synchronous memory rewrite from the pre-step memories.
        if !memories.is_empty() {
            let mut next = Vec::with_capacity(memories.len());
            for &j in &order {
                let m_j = memories[canon_pos[j]];
                let update_in = if let Some(w_nei) = mem_neighbor {
                    let entries = stream.neighbors.entries(j);
                    let nei = if entries.is_empty() {
                        tape.zeros(stream.memory_dim)?
                    } else {
                        let mut terms = Vec::with_capacity(entries.len());
                        for &(k, e) in entries {
                            let pair = tape.concat(&[memories[canon_pos[k]], stream.edge_vars[e]])?;
                            terms.push(tape.matvec(w_nei, pair)?);
                        }
                        tape.sum_vecs(&terms)?
                    };
                    tape.concat(&[m_j, nei, control])?
                } else {
                    tape.concat(&[m_j, control])?
                };
                next.push(tape.matvec(mem_update, update_in)?);
            }
            memories = next;
        }
    }

    Ok(StreamResult {
        final_control: control,
        final_read: read,
        gamma: gamma_traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelDims, NeighborMode};
    use crate::graphs::{build_semantic_graph, FactTriplet};
    use crate::numerics::{grad_check, GradCheckConfig};
    use crate::embeddings::EmbeddingTable;
    use approx::assert_relative_eq;

    fn dims() -> ModelDims {
        ModelDims {
            embed_dim: 2,
            visual_feature_dim: 2,
            hidden_dim: 4,
            select_dim: 3,
            attention_dim: 3,
            classifier_hidden_dim: 3,
            max_question_len: 4,
            max_detections: 8,
            assess_layers: 1,
        }
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            2,
            vec![
                ("a".to_string(), vec![1.0, 0.0]),
                ("b".to_string(), vec![0.0, 1.0]),
                ("c".to_string(), vec![0.6, 0.8]),
                ("r".to_string(), vec![0.5, -0.5]),
            ],
        )
        .unwrap()
    }

    fn graph() -> ModalGraph {
        build_semantic_graph(
            &[
                FactTriplet::new("a", "r", "b"),
                FactTriplet::new("b", "r", "c"),
                FactTriplet::new("c", "r", "a"),
            ],
            &table(),
        )
        .unwrap()
    }

    struct Fixture {
        params: ParameterSet,
        graph: ModalGraph,
        neighbors: NeighborIndex,
        dims: ModelDims,
    }

    fn fixture(seed: u64) -> Fixture {
        let dims = dims();
        let graph = graph();
        let neighbors = NeighborIndex::build(&graph, NeighborMode::Both);
        let mut params = ParameterSet::new();
        // Memories are the raw 2-dim node features here; fact features are
        // 3-dim stand-ins.
        register_reasoning_params(&mut params, "reason.semantic", 2, 2, 3, &dims, true, true, seed)
            .unwrap();
        Fixture {
            params,
            graph,
            neighbors,
            dims,
        }
    }

    fn run_fixture(
        tape: &mut Tape,
        fx: &Fixture,
        params: &ParameterSet,
        steps: usize,
    ) -> StreamResult {
        let features: Vec<Var> = fx
            .graph
            .nodes()
            .iter()
            .map(|n| tape.input_vec(&n.feature).unwrap())
            .collect();
        let edge_vars: Vec<Var> = fx
            .graph
            .edges()
            .iter()
            .map(|e| tape.input_vec(&e.feature).unwrap())
            .collect();
        let q = tape.input_vec(&[0.2, -0.1, 0.4, 0.3]).unwrap();
        let fact_feature = tape.input_vec(&[0.5, 0.1, -0.2]).unwrap();
        let fact_agg = tape.input_vec(&[0.1, 0.1, 0.1]).unwrap();
        let stream = StreamInput {
            prefix: "reason.semantic",
            graph: &fx.graph,
            neighbors: &fx.neighbors,
            features: &features,
            edge_vars: &edge_vars,
            memory_dim: 2,
        };
        run_stream(tape, params, &stream, q, fact_feature, Some(fact_agg), steps).unwrap()
    }

    #[test]
    fn gamma_normalizes_every_step() {
        let fx = fixture(3);
        let mut tape = Tape::new();
        let result = run_fixture(&mut tape, &fx, &fx.params, 3);
        assert_eq!(result.gamma.len(), 3);
        for trace in &result.gamma {
            assert_eq!(trace.weights.len(), 3);
            let sum: f64 = trace.weights.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        }
        assert_eq!(tape.value(result.final_control).shape(), &[4]);
        assert_eq!(tape.value(result.final_read).shape(), &[2]);
    }

    #[test]
    fn zero_gru_weights_halve_the_control_state() {
        let dims = dims();
        let mut params = ParameterSet::new();
        let h = dims.hidden_dim;
        params.insert_zeros("z.gru.input", &[3 * h, 2]).unwrap();
        params.insert_zeros("z.gru.hidden_gates", &[2 * h, h]).unwrap();
        params.insert_zeros("z.gru.hidden_cand", &[h, h]).unwrap();
        params.insert_zeros("z.gru.bias", &[3 * h]).unwrap();
        let mut tape = Tape::new();
        let h0 = tape.input_vec(&[1.0, -2.0, 0.5, 4.0]).unwrap();
        let c = tape.input_vec(&[0.7, 0.7]).unwrap();
        let h1 = gru_cell(&mut tape, &params, "z", h0, c).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn empty_graph_reads_zero_but_control_evolves() {
        let dims = dims();
        let mut params = ParameterSet::new();
        register_reasoning_params(&mut params, "reason.visual", 3, 5, 3, &dims, true, true, 5)
            .unwrap();
        let empty = ModalGraph::empty(crate::graphs::Modality::Visual, 3, 5);
        let neighbors = NeighborIndex::build(&empty, NeighborMode::Both);
        let mut tape = Tape::new();
        let q = tape.input_vec(&[0.2, -0.1, 0.4, 0.3]).unwrap();
        let fact_feature = tape.input_vec(&[0.5, 0.1, -0.2]).unwrap();
        let fact_agg = tape.input_vec(&[0.0, 0.0, 0.0]).unwrap();
        let stream = StreamInput {
            prefix: "reason.visual",
            graph: &empty,
            neighbors: &neighbors,
            features: &[],
            edge_vars: &[],
            memory_dim: 3,
        };
        let result =
            run_stream(&mut tape, &params, &stream, q, fact_feature, Some(fact_agg), 2).unwrap();
        assert_eq!(tape.value(result.final_read).data(), &[0.0, 0.0, 0.0]);
        assert!(result.gamma.iter().all(|t| t.weights.is_empty()));
        // Control is not a fixed point of the GRU even on zero reads.
        assert!(tape.value(result.final_control).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ablating_update_agg_changes_param_set_not_interface() {
        let dims = dims();
        let mut params = ParameterSet::new();
        register_reasoning_params(&mut params, "reason.semantic", 2, 2, 3, &dims, true, false, 7)
            .unwrap();
        assert!(!params.contains("reason.semantic.mem_neighbor"));
        // mem_update consumes [m, h] only.
        assert_eq!(
            params.get("reason.semantic.mem_update").unwrap().shape(),
            &[2, 2 + 4]
        );
        let fx = Fixture {
            params: ParameterSet::new(), // unused
            graph: graph(),
            neighbors: NeighborIndex::build(&graph(), NeighborMode::Both),
            dims,
        };
        let mut tape = Tape::new();
        let result = run_fixture(&mut tape, &fx, &params, 2);
        assert_eq!(result.gamma.len(), 2);
    }

    #[test]
    fn gradients_verify_against_finite_differences() {
        let fx = fixture(11);
        let loss = |tape: &mut Tape, params: &ParameterSet| {
            let result = run_fixture(tape, &fx, params, 3);
            let both = tape.concat(&[result.final_control, result.final_read])?;
            let squashed = tape.tanh(both)?;
            tape.sum(squashed)
        };
        let report = grad_check(loss, &fx.params, &GradCheckConfig::default()).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {:?}",
            report.max_rel_err, report.worst
        );
    }

    #[test]
    fn every_reasoning_parameter_reaches_the_loss() {
        let fx = fixture(13);
        let mut tape = Tape::new();
        let result = run_fixture(&mut tape, &fx, &fx.params, 3);
        let both = tape.concat(&[result.final_control, result.final_read]).unwrap();
        let squashed = tape.tanh(both).unwrap();
        let loss = tape.sum(squashed).unwrap();
        let grads = tape.backward(loss).unwrap();
        let by_name = tape.param_grads(&grads);
        for name in fx.params.names() {
            let g = by_name
                .get(name)
                .unwrap_or_else(|| panic!("parameter {name} never bound"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "parameter {name} got an all-zero gradient"
            );
        }
    }

    #[test]
    fn rejects_zero_steps_and_bad_feature_count() {
        let fx = fixture(1);
        let mut tape = Tape::new();
        let q = tape.input_vec(&[0.0; 4]).unwrap();
        let f = tape.input_vec(&[0.0; 3]).unwrap();
        let stream = StreamInput {
            prefix: "reason.semantic",
            graph: &fx.graph,
            neighbors: &fx.neighbors,
            features: &[],
            edge_vars: &[],
            memory_dim: 2,
        };
        let err = run_stream(&mut tape, &fx.params, &stream, q, f, None, 0);
        assert!(err.is_err());
        let err = run_stream(&mut tape, &fx.params, &stream, q, f, None, 1);
        assert!(err.is_err(), "feature count mismatch must be rejected");
    }

    #[test]
    fn results_are_invariant_to_node_input_order() {
        let fx = fixture(17);
        // Same triplets, different order.
        let shuffled = build_semantic_graph(
            &[
                FactTriplet::new("c", "r", "a"),
                FactTriplet::new("a", "r", "b"),
                FactTriplet::new("b", "r", "c"),
            ],
            &table(),
        )
        .unwrap();
        let mut tape_a = Tape::new();
        let out_a = run_fixture(&mut tape_a, &fx, &fx.params, 3);
        let fx_b = Fixture {
            params: fx.params.clone(),
            neighbors: NeighborIndex::build(&shuffled, NeighborMode::Both),
            graph: shuffled,
            dims: fx.dims.clone(),
        };
        let mut tape_b = Tape::new();
        let out_b = run_fixture(&mut tape_b, &fx_b, &fx.params, 3);
        let a = tape_a.value(out_a.final_control).data();
        let b = tape_b.value(out_b.final_control).data();
        assert_eq!(a, b);
        for (ta, tb) in out_a.gamma.iter().zip(&out_b.gamma) {
            let bits_a: Vec<u64> = ta.weights.iter().map(|w| w.to_bits()).collect();
            let bits_b: Vec<u64> = tb.weights.iter().map(|w| w.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }
}
