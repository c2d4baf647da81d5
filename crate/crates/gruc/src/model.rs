//! The end-to-end pipeline.
//!
//! `Pipeline` owns the configuration and the optional relation vocabulary and
//! knows three things:
//!
//! * which parameters exist (`build_params`), a pure function of dimensions
//!   and ablation switches, never of instance content;
//! * how to turn a raw instance into graphs and labels (`prepare`): score and
//!   retain facts, optionally narrow them by relation, build the three modal
//!   graphs, and locate the answer among the fact entities;
//! * how to run the network over a prepared instance (`forward`): encode the
//!   question, select node features, reason per fact concept over each stream
//!   graph, fuse, assess, classify, and assemble the training loss.
//!
//! Everything that aggregates floating-point values walks nodes in canonical
//! order, so results are bitwise independent of input order.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::assessment::{
    fuse_concept, gate_ratios, global_assess, predict_scores, rank_candidates,
    register_assess_params, register_classifier_params, register_fusion_params, weighted_bce,
    FusedConcept, GateRatios,
};
use crate::config::{Config, FusionSource, SPATIAL_EDGE_DIM};
use crate::embeddings::{encode_question, register_encoder_params, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graphs::{
    build_fact_graph, build_semantic_graph, build_visual_graph, fold_name, FactTriplet,
    InstanceBundle, ModalGraph, Modality, NeighborIndex,
};
use crate::numerics::{ParameterSet, Tape, Var};
use crate::reasoning::{register_reasoning_params, run_stream, GammaTrace, StreamInput};
use crate::retrieval::{
    context_words, filter_facts, fold_relation, register_relation_params, relation_cross_entropy,
    relation_logits, retain_top, score_facts, top_relations, RelationVocab, ScoredFact,
    RELATION_HEAD,
};
use crate::selection::{register_selection_params, select, SelectionOutput};

const SELECT_VISUAL: &str = "select.visual";
const SELECT_SEMANTIC: &str = "select.semantic";
const SELECT_FACT: &str = "select.fact";
const REASON_VISUAL: &str = "reason.visual";
const REASON_SEMANTIC: &str = "reason.semantic";

/// How retained facts are narrowed by relation before graph construction.
pub enum RelationFilter<'a> {
    /// Keep every retained fact.
    None,
    /// Keep facts matching the instance's annotated relation; a no-op when
    /// the annotation is absent.
    Annotated,
    /// Keep facts whose folded relation is in the set (predicted relations).
    Predicted(&'a BTreeSet<String>),
}

/// A graph plus its neighborhood index.
pub struct PreparedGraph {
    pub graph: ModalGraph,
    pub neighbors: NeighborIndex,
}

impl PreparedGraph {
    fn build(graph: ModalGraph, mode: crate::config::NeighborMode) -> Self {
        let neighbors = NeighborIndex::build(&graph, mode);
        PreparedGraph { graph, neighbors }
    }
}

/// An instance after retrieval and graph construction, ready for `forward`.
pub struct PreparedInstance {
    pub id: String,
    pub question: Vec<String>,
    pub visual: Option<PreparedGraph>,
    pub semantic: Option<PreparedGraph>,
    pub fact: PreparedGraph,
    /// Facts that survived retrieval and filtering, best first.
    pub retained: Vec<ScoredFact>,
    /// One-hot answer labels over fact nodes, absent when the answer is not
    /// among the candidates.
    pub labels: Option<Vec<f64>>,
    pub answer_node: Option<usize>,
    /// Vocabulary index of the annotated relation, when both exist.
    pub relation_class: Option<usize>,
}

/// Read attention through the reasoning steps for one fact concept.
pub struct ConceptTrace {
    pub entity: String,
    pub visual: Vec<GammaTrace>,
    pub semantic: Vec<GammaTrace>,
}

/// Attention dump for the `inspect` command.
pub struct InspectDump {
    /// Per modality: (entity label, node weight) in canonical order.
    pub alpha: BTreeMap<String, Vec<(String, f64)>>,
    /// Stream node labels in canonical order, keyed like `alpha`, for
    /// interpreting the gamma traces.
    pub stream_labels: BTreeMap<String, Vec<String>>,
    pub concepts: Vec<ConceptTrace>,
}

pub struct ForwardOptions {
    pub training: bool,
    pub inspect: bool,
}

/// Everything one forward run produces.
pub struct ForwardPass {
    /// Answer probability per fact node.
    pub probabilities: Vec<f64>,
    /// Entity label per fact node.
    pub entities: Vec<String>,
    /// Candidates by descending probability, entity-name tie-break.
    pub ranked: Vec<(String, f64)>,
    pub answer_loss: Option<Var>,
    pub relation_loss: Option<Var>,
    /// Total training loss; present iff the answer loss is.
    pub loss: Option<Var>,
    pub gate_ratios: Option<GateRatios>,
    pub inspect: Option<InspectDump>,
}

/// Node features and edge leaves of one stream graph, shared by every
/// concept's reasoning run.
struct StreamData<'a> {
    prefix: &'static str,
    prepared: &'a PreparedGraph,
    features: Vec<Var>,
    edges: Vec<Var>,
    dim: usize,
}

impl<'a> StreamData<'a> {
    fn input(&self) -> StreamInput<'_> {
        StreamInput {
            prefix: self.prefix,
            graph: &self.prepared.graph,
            neighbors: &self.prepared.neighbors,
            features: &self.features,
            edge_vars: &self.edges,
            memory_dim: self.dim,
        }
    }
}

pub struct Pipeline {
    config: Config,
    vocab: Option<RelationVocab>,
}

impl Pipeline {
    /// An empty vocabulary is treated as no vocabulary: the relation head is
    /// neither registered nor trained.
    pub fn new(config: Config, vocab: Option<RelationVocab>) -> Result<Self> {
        config.validate()?;
        let vocab = vocab.filter(|v| !v.is_empty());
        Ok(Pipeline { config, vocab })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn vocab(&self) -> Option<&RelationVocab> {
        self.vocab.as_ref()
    }

    /// Width of a stream's node features after (optional) selection.
    fn stream_dim(&self, modality: Modality) -> usize {
        let d = &self.config.dims;
        if self.config.ablation.use_intra_selection {
            d.select_dim
        } else {
            match modality {
                Modality::Visual => d.visual_feature_dim,
                Modality::Semantic | Modality::Fact => d.embed_dim,
            }
        }
    }

    /// Width of a stream's segment inside fusion.
    fn segment_dim(&self, modality: Modality) -> usize {
        match self.config.options.fusion_source {
            FusionSource::Control => self.config.dims.hidden_dim,
            FusionSource::Read => self.stream_dim(modality),
        }
    }

    /// Width of the per-candidate concept entering assessment and the
    /// classifier.
    pub fn concept_width(&self) -> usize {
        let a = &self.config.ablation;
        if a.use_gruc {
            self.config.dims.select_dim
        } else {
            let mut width = self.stream_dim(Modality::Fact);
            if a.use_visual_graph {
                width += self.stream_dim(Modality::Visual);
            }
            if a.use_semantic_graph {
                width += self.stream_dim(Modality::Semantic);
            }
            width
        }
    }

    /// Registers every parameter the enabled components need. Shapes depend
    /// only on the configuration, so checkpoints restore cleanly regardless
    /// of what any particular instance contains.
    pub fn build_params(&self, seed: u64) -> Result<ParameterSet> {
        let mut params = ParameterSet::new();
        let dims = &self.config.dims;
        let a = self.config.ablation;
        register_encoder_params(&mut params, dims, seed)?;
        if a.use_intra_selection {
            register_selection_params(
                &mut params,
                SELECT_FACT,
                dims.embed_dim,
                dims.embed_dim,
                dims,
                seed,
            )?;
            if a.use_visual_graph {
                register_selection_params(
                    &mut params,
                    SELECT_VISUAL,
                    dims.visual_feature_dim,
                    SPATIAL_EDGE_DIM,
                    dims,
                    seed,
                )?;
            }
            if a.use_semantic_graph {
                register_selection_params(
                    &mut params,
                    SELECT_SEMANTIC,
                    dims.embed_dim,
                    dims.embed_dim,
                    dims,
                    seed,
                )?;
            }
        }
        let fact_dim = self.stream_dim(Modality::Fact);
        if a.use_gruc {
            if a.use_visual_graph {
                register_reasoning_params(
                    &mut params,
                    REASON_VISUAL,
                    self.stream_dim(Modality::Visual),
                    SPATIAL_EDGE_DIM,
                    fact_dim,
                    dims,
                    a.control_neighbor_agg,
                    a.update_neighbor_agg,
                    seed,
                )?;
            }
            if a.use_semantic_graph {
                register_reasoning_params(
                    &mut params,
                    REASON_SEMANTIC,
                    self.stream_dim(Modality::Semantic),
                    dims.embed_dim,
                    fact_dim,
                    dims,
                    a.control_neighbor_agg,
                    a.update_neighbor_agg,
                    seed,
                )?;
            }
            let mut segments = Vec::new();
            if a.use_visual_graph {
                segments.push(self.segment_dim(Modality::Visual));
            }
            if a.use_semantic_graph {
                segments.push(self.segment_dim(Modality::Semantic));
            }
            segments.push(fact_dim);
            register_fusion_params(&mut params, &segments, dims.select_dim, seed)?;
        }
        let width = self.concept_width();
        if a.use_global_assess {
            register_assess_params(&mut params, width, dims.assess_layers, seed)?;
        }
        register_classifier_params(
            &mut params,
            width,
            dims.hidden_dim,
            dims.classifier_hidden_dim,
            seed,
        )?;
        if let Some(vocab) = &self.vocab {
            register_relation_params(&mut params, vocab.len(), dims.hidden_dim, seed)?;
        }
        Ok(params)
    }

    /// Scores and retains facts, applies the relation filter, builds the
    /// modal graphs, and locates the answer. Filtering everything away is a
    /// `NoCandidates` error; callers decide whether that skips the instance
    /// or aborts the run.
    pub fn prepare(
        &self,
        instance: &InstanceBundle,
        table: &EmbeddingTable,
        filter: RelationFilter,
    ) -> Result<PreparedInstance> {
        instance.validate()?;
        let dims = &self.config.dims;
        if table.dim() != dims.embed_dim {
            return Err(Error::dimension(
                "prepare",
                format!("table dim {} vs embed_dim {}", table.dim(), dims.embed_dim),
            ));
        }
        if self.config.ablation.use_visual_graph {
            if let Some(det) = instance.detections.first() {
                if det.feature.len() != dims.visual_feature_dim {
                    return Err(Error::dimension(
                        "prepare",
                        format!(
                            "detection feature width {} vs visual_feature_dim {}",
                            det.feature.len(),
                            dims.visual_feature_dim
                        ),
                    ));
                }
            }
        }

        let context = context_words(&instance.question, &instance.detections);
        let scored = score_facts(
            &instance.facts,
            &context,
            table,
            self.config.options.fact_score_mode,
        );
        let retained = retain_top(scored, self.config.options.retrieval_top_n)?;
        let filtered = match filter {
            RelationFilter::None => retained,
            RelationFilter::Annotated => match &instance.relation_label {
                Some(label) => {
                    let mut allowed = BTreeSet::new();
                    allowed.insert(fold_relation(label));
                    filter_facts(&retained, &allowed)
                }
                None => retained,
            },
            RelationFilter::Predicted(allowed) => filter_facts(&retained, allowed),
        };
        if filtered.is_empty() {
            return Err(Error::NoCandidates {
                instance: instance.id.clone(),
            });
        }

        let facts: Vec<FactTriplet> = filtered.iter().map(|sf| sf.fact.clone()).collect();
        let mode = self.config.options.neighbor_mode;
        let fact = PreparedGraph::build(build_fact_graph(&facts, table)?, mode);

        let visual = if self.config.ablation.use_visual_graph {
            let graph = build_visual_graph(&instance.detections, dims.max_detections)?;
            Some(PreparedGraph::build(graph, mode))
        } else {
            None
        };
        let semantic = if self.config.ablation.use_semantic_graph {
            let kept = instance.semantic_tuples.len().min(self.config.train.captions);
            let graph = build_semantic_graph(&instance.semantic_tuples[..kept], table)?;
            Some(PreparedGraph::build(graph, mode))
        } else {
            None
        };

        let answer_node = fact.graph.find_node(&fold_name(&instance.answer));
        let labels = answer_node.map(|idx| {
            let mut labels = vec![0.0; fact.graph.node_count()];
            labels[idx] = 1.0;
            labels
        });
        let relation_class = match (&instance.relation_label, &self.vocab) {
            (Some(label), Some(vocab)) => vocab.index_of(label),
            _ => None,
        };

        Ok(PreparedInstance {
            id: instance.id.clone(),
            question: instance.question.clone(),
            visual,
            semantic,
            fact,
            retained: filtered,
            labels,
            answer_node,
            relation_class,
        })
    }

    /// Question-conditioned relation prediction on a fresh tape. Fails when
    /// no relation head was trained.
    pub fn predict_relations(
        &self,
        params: &ParameterSet,
        table: &EmbeddingTable,
        question: &[String],
    ) -> Result<Vec<(String, f64)>> {
        let vocab = self.vocab.as_ref().ok_or_else(|| {
            Error::Data("relation head is not trained (no vocabulary was available)".into())
        })?;
        let mut tape = Tape::new();
        let encoding = encode_question(
            &mut tape,
            params,
            table,
            question,
            &self.config.dims,
            self.config.options.question_readout,
        )?;
        let logits = relation_logits(&mut tape, params, encoding.q)?;
        top_relations(&tape, logits, vocab, self.config.options.relation_top_k)
    }

    /// Node feature selection for one stream, or the raw features when
    /// selection is ablated or the graph is empty.
    fn selected(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        prefix: &str,
        prepared: &PreparedGraph,
        nodes: &[Var],
        q: Var,
    ) -> Result<(Vec<Var>, Option<SelectionOutput>)> {
        if !self.config.ablation.use_intra_selection || prepared.graph.node_count() == 0 {
            return Ok((nodes.to_vec(), None));
        }
        let output = select(
            tape,
            params,
            prefix,
            &prepared.graph,
            &prepared.neighbors,
            nodes,
            q,
        )?;
        let v_hat = output.v_hat.clone();
        Ok((v_hat, Some(output)))
    }

    /// Mean over node features in canonical order; zero vector for an empty
    /// graph so ablated shapes stay fixed.
    fn mean_pool(
        tape: &mut Tape,
        graph: &ModalGraph,
        features: &[Var],
        width: usize,
    ) -> Result<Var> {
        if features.is_empty() {
            return tape.zeros(width);
        }
        let parts: Vec<Var> = graph.canon_order().iter().map(|&i| features[i]).collect();
        let summed = tape.sum_vecs(&parts)?;
        tape.affine(summed, 1.0 / parts.len() as f64, 0.0)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        prepared: &PreparedInstance,
        table: &EmbeddingTable,
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let dims = &self.config.dims;
        let ablation = self.config.ablation;
        let encoding = encode_question(
            tape,
            params,
            table,
            &prepared.question,
            dims,
            self.config.options.question_readout,
        )?;
        let q = encoding.q;

        let leaf = |tape: &mut Tape, graph: &ModalGraph| -> Result<Vec<Var>> {
            graph
                .nodes()
                .iter()
                .map(|n| tape.input_vec(&n.feature))
                .collect()
        };
        let edge_leaf = |tape: &mut Tape, graph: &ModalGraph| -> Result<Vec<Var>> {
            graph
                .edges()
                .iter()
                .map(|e| tape.input_vec(&e.feature))
                .collect()
        };

        let fact_nodes = leaf(tape, &prepared.fact.graph)?;
        let (fact_feats, fact_sel) =
            self.selected(tape, params, SELECT_FACT, &prepared.fact, &fact_nodes, q)?;
        let fact_dim = self.stream_dim(Modality::Fact);

        let mut alpha_dump: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut stream_labels: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut record_alpha = |tape: &Tape,
                                key: &str,
                                graph: &ModalGraph,
                                sel: &Option<SelectionOutput>| {
            if let Some(sel) = sel {
                let weights = tape.value(sel.alpha).data();
                let pairs = graph
                    .canon_order()
                    .iter()
                    .zip(weights)
                    .map(|(&i, &w)| (node_label(graph, i), w))
                    .collect();
                alpha_dump.insert(key.to_string(), pairs);
            }
        };
        if opts.inspect {
            record_alpha(tape, "fact", &prepared.fact.graph, &fact_sel);
        }

        // Stream data for reasoning, built once and shared across concepts.
        let mut streams: Vec<StreamData> = Vec::new();
        if ablation.use_gruc {
            if let Some(pg) = &prepared.visual {
                let nodes = leaf(tape, &pg.graph)?;
                let (feats, sel) = self.selected(tape, params, SELECT_VISUAL, pg, &nodes, q)?;
                if opts.inspect {
                    record_alpha(tape, "visual", &pg.graph, &sel);
                    stream_labels.insert("visual".into(), canon_labels(&pg.graph));
                }
                streams.push(StreamData {
                    prefix: REASON_VISUAL,
                    prepared: pg,
                    edges: edge_leaf(tape, &pg.graph)?,
                    features: feats,
                    dim: self.stream_dim(Modality::Visual),
                });
            }
            if let Some(pg) = &prepared.semantic {
                let nodes = leaf(tape, &pg.graph)?;
                let (feats, sel) = self.selected(tape, params, SELECT_SEMANTIC, pg, &nodes, q)?;
                if opts.inspect {
                    record_alpha(tape, "semantic", &pg.graph, &sel);
                    stream_labels.insert("semantic".into(), canon_labels(&pg.graph));
                }
                streams.push(StreamData {
                    prefix: REASON_SEMANTIC,
                    prepared: pg,
                    edges: edge_leaf(tape, &pg.graph)?,
                    features: feats,
                    dim: self.stream_dim(Modality::Semantic),
                });
            }
        }

        let n_fact = prepared.fact.graph.node_count();
        let mut concepts: Vec<Option<Var>> = vec![None; n_fact];
        let mut fused_concepts: Vec<FusedConcept> = Vec::new();
        let mut traces: Vec<ConceptTrace> = Vec::new();

        if ablation.use_gruc {
            for &i in prepared.fact.graph.canon_order() {
                let neighbor_sum = if ablation.control_neighbor_agg {
                    let around = prepared.fact.neighbors.nodes(i);
                    Some(if around.is_empty() {
                        tape.zeros(fact_dim)?
                    } else {
                        let parts: Vec<Var> = around.iter().map(|&j| fact_feats[j]).collect();
                        tape.sum_vecs(&parts)?
                    })
                } else {
                    None
                };

                let mut segments = Vec::with_capacity(streams.len() + 1);
                let mut trace = ConceptTrace {
                    entity: node_label(&prepared.fact.graph, i),
                    visual: Vec::new(),
                    semantic: Vec::new(),
                };
                for stream in &streams {
                    let result = run_stream(
                        tape,
                        params,
                        &stream.input(),
                        q,
                        fact_feats[i],
                        neighbor_sum,
                        self.config.train.reasoning_steps,
                    )?;
                    let segment = match self.config.options.fusion_source {
                        FusionSource::Control => result.final_control,
                        FusionSource::Read => result.final_read,
                    };
                    let modality = stream.prepared.graph.modality();
                    segments.push((modality, segment));
                    match modality {
                        Modality::Visual => trace.visual = result.gamma,
                        Modality::Semantic => trace.semantic = result.gamma,
                        Modality::Fact => {}
                    }
                }
                segments.push((Modality::Fact, fact_feats[i]));
                let fused = fuse_concept(tape, params, &segments)?;
                concepts[i] = Some(fused.fused);
                fused_concepts.push(fused);
                if opts.inspect {
                    traces.push(trace);
                }
            }
        } else {
            // Without the reasoner a concept is the concatenation of the
            // mean-pooled stream features with its own fact feature.
            let mut pooled = Vec::new();
            if let Some(pg) = &prepared.visual {
                let nodes = leaf(tape, &pg.graph)?;
                let (feats, sel) = self.selected(tape, params, SELECT_VISUAL, pg, &nodes, q)?;
                if opts.inspect {
                    record_alpha(tape, "visual", &pg.graph, &sel);
                }
                pooled.push(Self::mean_pool(
                    tape,
                    &pg.graph,
                    &feats,
                    self.stream_dim(Modality::Visual),
                )?);
            }
            if let Some(pg) = &prepared.semantic {
                let nodes = leaf(tape, &pg.graph)?;
                let (feats, sel) = self.selected(tape, params, SELECT_SEMANTIC, pg, &nodes, q)?;
                if opts.inspect {
                    record_alpha(tape, "semantic", &pg.graph, &sel);
                }
                pooled.push(Self::mean_pool(
                    tape,
                    &pg.graph,
                    &feats,
                    self.stream_dim(Modality::Semantic),
                )?);
            }
            for &i in prepared.fact.graph.canon_order() {
                let mut parts = pooled.clone();
                parts.push(fact_feats[i]);
                concepts[i] = Some(tape.concat(&parts)?);
            }
        }

        let concepts: Vec<Var> = concepts
            .into_iter()
            .map(|c| c.expect("every fact node visited"))
            .collect();

        let assessed = if ablation.use_global_assess {
            global_assess(
                tape,
                params,
                &prepared.fact.graph,
                &prepared.fact.neighbors,
                &concepts,
                dims.assess_layers,
            )?
        } else {
            concepts
        };

        let scores = predict_scores(
            tape,
            params,
            &prepared.fact.graph,
            &assessed,
            q,
            self.config.train.dropout,
            opts.training,
            rng,
        )?;

        let mut probabilities = Vec::with_capacity(scores.len());
        for &s in &scores {
            probabilities.push(tape.value(s).item()?);
        }
        let entities: Vec<String> = (0..n_fact)
            .map(|i| node_label(&prepared.fact.graph, i))
            .collect();
        let ranked = rank_candidates(&entities, &probabilities)?;

        let answer_loss = match &prepared.labels {
            Some(labels) => Some(weighted_bce(
                tape,
                &prepared.fact.graph,
                &scores,
                labels,
                self.config.train.positive_weight,
                self.config.train.negative_weight,
            )?),
            None => None,
        };
        let relation_weight = self.config.options.relation_loss_weight;
        let relation_loss = match prepared.relation_class {
            Some(class) if params.contains(RELATION_HEAD) && relation_weight > 0.0 => {
                let logits = relation_logits(tape, params, q)?;
                let ce = relation_cross_entropy(tape, logits, class)?;
                Some(if relation_weight == 1.0 {
                    ce
                } else {
                    tape.affine(ce, relation_weight, 0.0)?
                })
            }
            _ => None,
        };
        let loss = match (answer_loss, relation_loss) {
            (Some(a), Some(r)) => Some(tape.add(a, r)?),
            (Some(a), None) => Some(a),
            (None, _) => None,
        };

        let ratios = if fused_concepts.is_empty() {
            None
        } else {
            Some(gate_ratios(tape, &fused_concepts)?)
        };

        let inspect = if opts.inspect {
            Some(InspectDump {
                alpha: alpha_dump,
                stream_labels,
                concepts: traces,
            })
        } else {
            None
        };

        Ok(ForwardPass {
            probabilities,
            entities,
            ranked,
            answer_loss,
            relation_loss,
            loss,
            gate_ratios: ratios,
            inspect,
        })
    }
}

fn node_label(graph: &ModalGraph, i: usize) -> String {
    graph.nodes()[i].label.clone().unwrap_or_default()
}

fn canon_labels(graph: &ModalGraph) -> Vec<String> {
    graph
        .canon_order()
        .iter()
        .map(|&i| node_label(graph, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;
    use crate::graphs::{BBox, DetectionRecord};
    use crate::numerics::{grad_check, GradCheckConfig};
    use crate::rng::substream;
    use approx::assert_relative_eq;

    fn small_config() -> Config {
        let mut config = Config::default();
        config.dims = ModelDims {
            embed_dim: 2,
            visual_feature_dim: 3,
            hidden_dim: 4,
            select_dim: 3,
            attention_dim: 3,
            classifier_hidden_dim: 4,
            max_question_len: 5,
            max_detections: 8,
            assess_layers: 1,
        };
        config.train.reasoning_steps = 2;
        config.train.dropout = 0.0;
        config
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            2,
            vec![
                ("what".to_string(), vec![0.1, 0.3]),
                ("animal".to_string(), vec![0.7, 0.1]),
                ("cat".to_string(), vec![1.0, 0.0]),
                ("dog".to_string(), vec![0.0, 1.0]),
                ("pet".to_string(), vec![0.6, 0.8]),
                ("fish".to_string(), vec![-0.4, 0.9]),
                ("is".to_string(), vec![0.5, -0.5]),
                ("chases".to_string(), vec![-0.2, -0.6]),
                ("animal".to_string(), vec![0.7, 0.1]),
                ("sits".to_string(), vec![0.3, 0.2]),
                ("mat".to_string(), vec![-0.8, 0.2]),
                ("on".to_string(), vec![0.2, -0.3]),
            ],
        )
        .unwrap()
    }

    fn detection(x: f64, feature: [f64; 3], label: &str) -> DetectionRecord {
        DetectionRecord {
            bbox: BBox::new(x, 1.0, 2.0, 3.0).unwrap(),
            feature: feature.to_vec(),
            label: vec![label.to_string()],
            score: 0.9,
        }
    }

    fn instance() -> InstanceBundle {
        InstanceBundle {
            id: "inst-1".to_string(),
            question: vec!["what".into(), "animal".into(), "is".into(), "pet".into()],
            detections: vec![
                detection(0.0, [0.4, -0.2, 0.9], "cat"),
                detection(2.5, [0.1, 0.8, -0.3], "mat"),
            ],
            semantic_tuples: vec![
                FactTriplet::new("cat", "sits", "mat"),
                FactTriplet::new("cat", "chases", "dog"),
            ],
            facts: vec![
                FactTriplet::new("cat", "is", "pet"),
                FactTriplet::new("dog", "is", "pet"),
                FactTriplet::new("fish", "is", "animal"),
                FactTriplet::new("cat", "chases", "dog"),
            ],
            answer: "cat".to_string(),
            relation_label: Some("is".to_string()),
        }
    }

    fn pipeline() -> Pipeline {
        let vocab = RelationVocab::from_labels(["is", "chases"]);
        Pipeline::new(small_config(), Some(vocab)).unwrap()
    }

    #[test]
    fn parameter_set_tracks_ablation_switches() {
        let full = pipeline().build_params(1).unwrap();
        assert!(full.contains("select.visual.node_proj"));
        assert!(full.contains("reason.semantic.gru.input"));
        assert!(full.contains("fuse.gate"));
        assert!(full.contains("assess.gnn.0"));
        assert!(full.contains("relation.head"));

        let mut config = small_config();
        config.ablation.use_gruc = false;
        config.ablation.use_intra_selection = false;
        let lean = Pipeline::new(config, None).unwrap();
        let params = lean.build_params(1).unwrap();
        assert!(!params.names().any(|n| n.starts_with("reason.")));
        assert!(!params.names().any(|n| n.starts_with("select.")));
        assert!(!params.contains("fuse.gate"));
        assert!(!params.contains("relation.head"));
        // Raw widths: visual 3 + semantic 2 + fact 2 concepts, question 4.
        assert_eq!(lean.concept_width(), 7);
        assert_eq!(params.get("classify.hidden").unwrap().shape(), &[4, 11]);
    }

    #[test]
    fn prepare_builds_graphs_and_one_hot_labels() {
        let p = pipeline();
        let table = table();
        let prepared = p.prepare(&instance(), &table, RelationFilter::None).unwrap();
        assert_eq!(prepared.retained.len(), 4);
        // Entities: cat, pet, dog, fish, animal.
        assert_eq!(prepared.fact.graph.node_count(), 5);
        let labels = prepared.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&y| y == 1.0).count(), 1);
        let idx = prepared.answer_node.unwrap();
        assert_eq!(labels[idx], 1.0);
        assert_eq!(prepared.fact.graph.nodes()[idx].label.as_deref(), Some("cat"));
        assert_eq!(prepared.relation_class, Some(1)); // "chases" < "is"
        assert!(prepared.visual.is_some());
        assert!(prepared.semantic.is_some());
    }

    #[test]
    fn annotated_filter_narrows_candidates() {
        let p = pipeline();
        let table = table();
        let prepared = p
            .prepare(&instance(), &table, RelationFilter::Annotated)
            .unwrap();
        assert!(prepared
            .retained
            .iter()
            .all(|sf| fold_relation(&sf.fact.relation) == "is"));
        assert_eq!(prepared.retained.len(), 3);

        // A filter that matches nothing is a no-candidates error.
        let mut allowed = BTreeSet::new();
        allowed.insert("orbits".to_string());
        match p.prepare(&instance(), &table, RelationFilter::Predicted(&allowed)) {
            Err(Error::NoCandidates { .. }) => {}
            other => panic!("expected NoCandidates, got {:?}", other.err()),
        }
    }

    #[test]
    fn forward_produces_ranked_probabilities_and_finite_loss() {
        let p = pipeline();
        let table = table();
        let params = p.build_params(7).unwrap();
        let prepared = p.prepare(&instance(), &table, RelationFilter::None).unwrap();
        let mut tape = Tape::new();
        let mut rng = substream(7, "test/forward");
        let pass = p
            .forward(
                &mut tape,
                &params,
                &prepared,
                &table,
                &ForwardOptions {
                    training: true,
                    inspect: true,
                },
                &mut rng,
            )
            .unwrap();
        assert_eq!(pass.probabilities.len(), 5);
        assert!(pass.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(pass.ranked.len(), 5);
        for pair in pass.ranked.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
        let loss = pass.loss.unwrap();
        assert!(tape.value(loss).item().unwrap().is_finite());
        assert!(pass.relation_loss.is_some());
        let ratios = pass.gate_ratios.unwrap();
        assert_relative_eq!(ratios.sum(), 1.0, epsilon = 1e-9);
        let dump = pass.inspect.unwrap();
        assert!(dump.alpha.contains_key("fact"));
        assert!(dump.alpha.contains_key("visual"));
        assert_eq!(dump.concepts.len(), 5);
        for trace in &dump.concepts {
            assert_eq!(trace.visual.len(), 2);
            assert_eq!(trace.semantic.len(), 2);
        }
    }

    #[test]
    fn forward_without_reasoner_has_no_gate_ratios() {
        let mut config = small_config();
        config.ablation.use_gruc = false;
        let p = Pipeline::new(config, None).unwrap();
        let table = table();
        let params = p.build_params(7).unwrap();
        let prepared = p.prepare(&instance(), &table, RelationFilter::None).unwrap();
        let mut tape = Tape::new();
        let mut rng = substream(7, "test/forward");
        let pass = p
            .forward(
                &mut tape,
                &params,
                &prepared,
                &table,
                &ForwardOptions {
                    training: false,
                    inspect: false,
                },
                &mut rng,
            )
            .unwrap();
        assert!(pass.gate_ratios.is_none());
        assert!(pass.relation_loss.is_none());
        assert!(pass.loss.is_some(), "answer loss alone still trains");
    }

    #[test]
    fn unseen_answer_yields_no_loss() {
        let mut inst = instance();
        inst.answer = "zebra".to_string();
        let p = pipeline();
        let table = table();
        let params = p.build_params(3).unwrap();
        let prepared = p.prepare(&inst, &table, RelationFilter::None).unwrap();
        assert!(prepared.labels.is_none());
        let mut tape = Tape::new();
        let mut rng = substream(3, "test/forward");
        let pass = p
            .forward(
                &mut tape,
                &params,
                &prepared,
                &table,
                &ForwardOptions {
                    training: true,
                    inspect: false,
                },
                &mut rng,
            )
            .unwrap();
        assert!(pass.loss.is_none());
        assert_eq!(pass.ranked.len(), prepared.fact.graph.node_count());
    }

    #[test]
    fn input_order_does_not_change_any_output_bit() {
        let p = pipeline();
        let table = table();
        let params = p.build_params(23).unwrap();

        let mut shuffled = instance();
        shuffled.detections.reverse();
        shuffled.facts.reverse();
        shuffled.semantic_tuples.reverse();

        let run = |inst: &InstanceBundle| {
            let prepared = p.prepare(inst, &table, RelationFilter::None).unwrap();
            let mut tape = Tape::new();
            let mut rng = substream(23, "test/perm");
            let pass = p
                .forward(
                    &mut tape,
                    &params,
                    &prepared,
                    &table,
                    &ForwardOptions {
                        training: false,
                        inspect: false,
                    },
                    &mut rng,
                )
                .unwrap();
            let loss_bits = pass.loss.map(|l| tape.value(l).item().unwrap().to_bits());
            let ranked_bits: Vec<(String, u64)> = pass
                .ranked
                .iter()
                .map(|(e, s)| (e.clone(), s.to_bits()))
                .collect();
            let ratios = pass.gate_ratios.unwrap();
            (
                ranked_bits,
                loss_bits,
                ratios.sum().to_bits(),
                ratios.fact.to_bits(),
            )
        };
        assert_eq!(run(&instance()), run(&shuffled));
    }

    #[test]
    fn whole_pipeline_gradients_verify() {
        let p = pipeline();
        let table = table();
        let params = p.build_params(41).unwrap();
        let prepared = p.prepare(&instance(), &table, RelationFilter::None).unwrap();
        let loss_fn = |tape: &mut Tape, params: &ParameterSet| {
            let mut rng = substream(41, "test/gradcheck");
            let pass = p.forward(
                tape,
                params,
                &prepared,
                &table,
                &ForwardOptions {
                    training: false,
                    inspect: false,
                },
                &mut rng,
            )?;
            pass.loss
                .ok_or_else(|| Error::Data("expected a training loss".into()))
        };
        let config = GradCheckConfig {
            max_coords: 8,
            ..GradCheckConfig::default()
        };
        let report = grad_check(loss_fn, &params, &config).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {:?}",
            report.max_rel_err, report.worst
        );
    }

    #[test]
    fn relation_prediction_ranks_the_vocabulary() {
        let p = pipeline();
        let table = table();
        let params = p.build_params(5).unwrap();
        let question = vec!["what".to_string(), "animal".to_string()];
        let ranked = p.predict_relations(&params, &table, &question).unwrap();
        assert_eq!(ranked.len(), 2);
        let total: f64 = ranked.iter().map(|(_, p)| p).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);

        let headless = Pipeline::new(small_config(), None).unwrap();
        assert!(headless.predict_relations(&params, &table, &question).is_err());
    }
}
