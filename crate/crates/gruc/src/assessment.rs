//! Fusing stream summaries into concept representations, assessing concepts
//! against each other, and scoring them as answer candidates.
//!
//! Fusion concatenates the per-concept segments (visual control, semantic
//! control, selected fact feature; streams may be absent), passes the whole
//! vector through a sigmoid gate, and projects the gated vector down:
//! `g = sigmoid(W_g x)`, `z = W_o (g * x)`. The gate values are kept around
//! so inspection can report how much mass each modality contributes.
//!
//! Global assessment is a small graph convolution over the fact graph:
//! each layer computes `z_i <- relu(W_l [z_i, mean_{j in N_i} z_j])` with a
//! zero mean vector for isolated concepts, applied synchronously.
//!
//! The classifier turns each concept into a probability:
//! `p_i = sigmoid(w_s . dropout(relu(W_h [z_i, q] + b_h)) + b_s)`, and the
//! training loss is a weighted binary cross-entropy over all candidates with
//! exactly one positive.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graphs::{ModalGraph, Modality, NeighborIndex};
use crate::numerics::{ParameterSet, Tape, Var};

pub const FUSE_GATE: &str = "fuse.gate";
pub const FUSE_OUTPUT: &str = "fuse.output";
pub const CLASSIFY_HIDDEN: &str = "classify.hidden";
pub const CLASSIFY_HIDDEN_BIAS: &str = "classify.hidden.bias";
pub const CLASSIFY_SCORE: &str = "classify.score";
pub const CLASSIFY_SCORE_BIAS: &str = "classify.score.bias";

fn assess_layer_name(layer: usize) -> String {
    format!("assess.gnn.{layer}")
}

/// Registers the fusion gate and output projection. `segment_dims` lists the
/// widths of the concatenated segments in order; `out_dim` is the fused width.
pub fn register_fusion_params(
    params: &mut ParameterSet,
    segment_dims: &[usize],
    out_dim: usize,
    seed: u64,
) -> Result<()> {
    let total: usize = segment_dims.iter().sum();
    if total == 0 {
        return Err(Error::domain("register_fusion_params", "no segments"));
    }
    params.insert_glorot(FUSE_GATE, &[total, total], seed)?;
    params.insert_glorot(FUSE_OUTPUT, &[out_dim, total], seed)?;
    Ok(())
}

/// Registers `layers` width-preserving graph-convolution matrices.
pub fn register_assess_params(
    params: &mut ParameterSet,
    width: usize,
    layers: usize,
    seed: u64,
) -> Result<()> {
    for layer in 0..layers {
        params.insert_glorot(&assess_layer_name(layer), &[width, 2 * width], seed)?;
    }
    Ok(())
}

/// Registers the two-layer candidate classifier over `[z_i, q]`.
pub fn register_classifier_params(
    params: &mut ParameterSet,
    concept_dim: usize,
    question_dim: usize,
    hidden_dim: usize,
    seed: u64,
) -> Result<()> {
    params.insert_glorot(CLASSIFY_HIDDEN, &[hidden_dim, concept_dim + question_dim], seed)?;
    params.insert_zeros(CLASSIFY_HIDDEN_BIAS, &[hidden_dim])?;
    params.insert_glorot(CLASSIFY_SCORE, &[1, hidden_dim], seed)?;
    params.insert_zeros(CLASSIFY_SCORE_BIAS, &[1])?;
    Ok(())
}

/// One gated fusion result. `segments` records the modality and width of each
/// gate slice so ratios can be attributed later.
pub struct FusedConcept {
    pub fused: Var,
    pub gate: Var,
    pub segments: Vec<(Modality, usize)>,
}

/// Fuses one concept's segments. Segment order is fixed by the caller and
/// must match the registered widths.
pub fn fuse_concept(
    tape: &mut Tape,
    params: &ParameterSet,
    segments: &[(Modality, Var)],
) -> Result<FusedConcept> {
    if segments.is_empty() {
        return Err(Error::domain("fuse_concept", "no segments"));
    }
    let parts: Vec<Var> = segments.iter().map(|&(_, v)| v).collect();
    let stacked = tape.concat(&parts)?;
    let w_gate = tape.param(params, FUSE_GATE)?;
    let gate_pre = tape.matvec(w_gate, stacked)?;
    let gate = tape.sigmoid(gate_pre)?;
    let gated = tape.mul(gate, stacked)?;
    let w_out = tape.param(params, FUSE_OUTPUT)?;
    let fused = tape.matvec(w_out, gated)?;
    let widths = segments
        .iter()
        .map(|&(m, v)| (m, tape.value(v).len()))
        .collect();
    Ok(FusedConcept {
        fused,
        gate,
        segments: widths,
    })
}

/// Share of total gate mass per modality, summed over all concepts.
/// Sigmoid outputs are strictly positive, so the total never vanishes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateRatios {
    pub visual: Option<f64>,
    pub semantic: Option<f64>,
    pub fact: f64,
}

impl GateRatios {
    pub fn sum(&self) -> f64 {
        self.visual.unwrap_or(0.0) + self.semantic.unwrap_or(0.0) + self.fact
    }
}

/// Aggregates gate activations across concepts into per-modality ratios.
pub fn gate_ratios(tape: &Tape, concepts: &[FusedConcept]) -> Result<GateRatios> {
    if concepts.is_empty() {
        return Err(Error::domain("gate_ratios", "no concepts"));
    }
    let mut visual = None;
    let mut semantic = None;
    let mut fact = 0.0;
    let mut saw_fact = false;
    for concept in concepts {
        let values = tape.value(concept.gate).data();
        let mut offset = 0;
        for &(modality, width) in &concept.segments {
            let mass: f64 = values[offset..offset + width].iter().sum();
            offset += width;
            match modality {
                Modality::Visual => *visual.get_or_insert(0.0) += mass,
                Modality::Semantic => *semantic.get_or_insert(0.0) += mass,
                Modality::Fact => {
                    fact += mass;
                    saw_fact = true;
                }
            }
        }
        if offset != values.len() {
            return Err(Error::dimension(
                "gate_ratios",
                "segment widths do not cover the gate",
            ));
        }
    }
    if !saw_fact {
        return Err(Error::domain("gate_ratios", "no fact segment"));
    }
    let total = visual.unwrap_or(0.0) + semantic.unwrap_or(0.0) + fact;
    Ok(GateRatios {
        visual: visual.map(|v| v / total),
        semantic: semantic.map(|v| v / total),
        fact: fact / total,
    })
}

/// Graph convolution over the fact graph: `layers` synchronous rounds of
/// `z_i <- relu(W_l [z_i, mean_j z_j])` with the mean over distinct
/// neighbors. `concepts` is indexed like the graph's nodes.
pub fn global_assess(
    tape: &mut Tape,
    params: &ParameterSet,
    graph: &ModalGraph,
    neighbors: &NeighborIndex,
    concepts: &[Var],
    layers: usize,
) -> Result<Vec<Var>> {
    if concepts.len() != graph.node_count() {
        return Err(Error::dimension(
            "global_assess",
            format!(
                "{} concepts for {} nodes",
                concepts.len(),
                graph.node_count()
            ),
        ));
    }
    if concepts.is_empty() {
        return Ok(Vec::new());
    }
    let width = tape.value(concepts[0]).len();
    let mut current = concepts.to_vec();
    for layer in 0..layers {
        let w = tape.param(params, &assess_layer_name(layer))?;
        let mut next = vec![None; current.len()];
        for &i in graph.canon_order() {
            let around = neighbors.nodes(i);
            let mean = if around.is_empty() {
                tape.zeros(width)?
            } else {
                let parts: Vec<Var> = around
                    .iter()
                    .map(|&j| current[j])
                    .collect();
                let summed = tape.sum_vecs(&parts)?;
                tape.affine(summed, 1.0 / around.len() as f64, 0.0)?
            };
            let stacked = tape.concat(&[current[i], mean])?;
            let pre = tape.matvec(w, stacked)?;
            next[i] = Some(tape.relu(pre)?);
        }
        current = next.into_iter().map(|v| v.expect("all nodes visited")).collect();
    }
    Ok(current)
}

/// Per-candidate answer probabilities, indexed like the fact graph's nodes.
/// Dropout applies to the hidden layer and is identity when not training.
pub fn predict_scores(
    tape: &mut Tape,
    params: &ParameterSet,
    graph: &ModalGraph,
    concepts: &[Var],
    q: Var,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Var>> {
    if concepts.len() != graph.node_count() {
        return Err(Error::dimension(
            "predict_scores",
            format!(
                "{} concepts for {} nodes",
                concepts.len(),
                graph.node_count()
            ),
        ));
    }
    let w_hidden = tape.param(params, CLASSIFY_HIDDEN)?;
    let b_hidden = tape.param(params, CLASSIFY_HIDDEN_BIAS)?;
    let w_score = tape.param(params, CLASSIFY_SCORE)?;
    let b_score = tape.param(params, CLASSIFY_SCORE_BIAS)?;
    let mut scores = vec![None; concepts.len()];
    for &i in graph.canon_order() {
        let stacked = tape.concat(&[concepts[i], q])?;
        let pre = tape.matvec(w_hidden, stacked)?;
        let pre = tape.add(pre, b_hidden)?;
        let hidden = tape.relu(pre)?;
        let kept = tape.dropout(hidden, dropout, training, rng)?;
        let logit = tape.matvec(w_score, kept)?;
        let logit = tape.add(logit, b_score)?;
        scores[i] = Some(tape.sigmoid(logit)?);
    }
    Ok(scores.into_iter().map(|v| v.expect("all nodes visited")).collect())
}

/// Candidates ranked by probability, ties broken by entity name so the
/// ordering never depends on input order.
pub fn rank_candidates(entities: &[String], probabilities: &[f64]) -> Result<Vec<(String, f64)>> {
    if entities.len() != probabilities.len() {
        return Err(Error::dimension(
            "rank_candidates",
            format!("{} entities, {} scores", entities.len(), probabilities.len()),
        ));
    }
    let mut ranked: Vec<(String, f64)> = entities
        .iter()
        .cloned()
        .zip(probabilities.iter().copied())
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(ranked)
}

/// Weighted binary cross-entropy over all candidates:
/// `-(sum_i pos_w y_i ln p_i + neg_w (1 - y_i) ln(1 - p_i))`, probabilities
/// clamped to `[1e-7, 1 - 1e-7]`. Labels must be 0/1 with exactly one
/// positive; terms are summed in canonical node order.
pub fn weighted_bce(
    tape: &mut Tape,
    graph: &ModalGraph,
    scores: &[Var],
    labels: &[f64],
    pos_weight: f64,
    neg_weight: f64,
) -> Result<Var> {
    if scores.len() != labels.len() || scores.len() != graph.node_count() {
        return Err(Error::dimension(
            "weighted_bce",
            format!(
                "{} scores, {} labels, {} nodes",
                scores.len(),
                labels.len(),
                graph.node_count()
            ),
        ));
    }
    let mut positives = 0usize;
    for &y in labels {
        if y == 1.0 {
            positives += 1;
        } else if y != 0.0 {
            return Err(Error::domain(
                "weighted_bce",
                format!("label {y} is neither 0 nor 1"),
            ));
        }
    }
    if positives != 1 {
        return Err(Error::domain(
            "weighted_bce",
            format!("expected exactly one positive label, found {positives}"),
        ));
    }
    if !(pos_weight.is_finite() && neg_weight.is_finite()) || pos_weight <= 0.0 || neg_weight <= 0.0 {
        return Err(Error::domain("weighted_bce", "class weights must be positive"));
    }

    let ordered_scores: Vec<Var> = graph.canon_order().iter().map(|&i| scores[i]).collect();
    let ordered_labels: Vec<f64> = graph.canon_order().iter().map(|&i| labels[i]).collect();

    let stacked = tape.concat(&ordered_scores)?;
    let clamped = tape.clamp(stacked, 1e-7, 1.0 - 1e-7)?;
    let ln_p = tape.ln(clamped)?;
    let one_minus = tape.affine(clamped, -1.0, 1.0)?;
    let ln_q = tape.ln(one_minus)?;
    let pos_coeffs: Vec<f64> = ordered_labels.iter().map(|&y| pos_weight * y).collect();
    let neg_coeffs: Vec<f64> = ordered_labels
        .iter()
        .map(|&y| neg_weight * (1.0 - y))
        .collect();
    let pos_vec = tape.input_vec(&pos_coeffs)?;
    let neg_vec = tape.input_vec(&neg_coeffs)?;
    let pos_term = tape.dot(pos_vec, ln_p)?;
    let neg_term = tape.dot(neg_vec, ln_q)?;
    let total = tape.add(pos_term, neg_term)?;
    tape.affine(total, -1.0, 0.0)
}
