//! Per-instance modal graphs.
//!
//! Three graphs are built for every instance:
//!
//! * visual: one node per object detection, fully connected, edges carrying
//!   relative spatial geometry;
//! * semantic: one node per distinct name in the caption triplets, one edge
//!   per triplet carrying the embedded relation word;
//! * fact: one node per distinct entity in the retained knowledge triplets,
//!   one edge per distinct triplet. Fact nodes are the answer candidates.
//!
//! Nodes keep their input order, and builders are permutation-equivariant:
//! feeding a permuted input yields the identically relabeled graph. On top of
//! that every graph carries a canonical visit order derived purely from node
//! content. All attention assemblies and reductions downstream iterate in
//! canonical order, which is what makes whole-pipeline outputs bitwise
//! invariant to input permutations despite float non-associativity.

mod instance;

pub use instance::{
    load_dataset, load_instance, parse_dataset, parse_instance, save_dataset, save_instance,
    DetectionRecord, InstanceBundle,
};

use serde::{Deserialize, Serialize};

use crate::config::SPATIAL_EDGE_DIM;
use crate::embeddings::{tokenize, EmbeddingTable};
use crate::error::{Error, Result};

/// Axis-aligned box, top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bbox".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::domain(
                "bbox",
                format!("extent must be positive, got w={} h={}", self.w, self.h),
            ));
        }
        Ok(())
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = String;
    fn try_from(v: [f64; 4]) -> std::result::Result<Self, String> {
        BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
    }
}

/// (subject, relation, object) triplet; also the layout of caption tuples.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[String; 3]", try_from = "[String; 3]")]
pub struct FactTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl FactTriplet {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        FactTriplet {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

impl From<FactTriplet> for [String; 3] {
    fn from(t: FactTriplet) -> Self {
        [t.subject, t.relation, t.object]
    }
}

impl TryFrom<[String; 3]> for FactTriplet {
    type Error = String;
    fn try_from(v: [String; 3]) -> std::result::Result<Self, String> {
        let [subject, relation, object] = v;
        for (field, value) in [("subject", &subject), ("relation", &relation), ("object", &object)] {
            if value.trim().is_empty() {
                return Err(format!("triplet {field} is empty"));
            }
        }
        Ok(FactTriplet {
            subject,
            relation,
            object,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Semantic,
    Fact,
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub feature: Vec<f64>,
    /// Entity name for fact/semantic nodes, joined label words for visual.
    pub label: Option<String>,
}

/// Directed edge `src -> dst` with a feature vector.
#[derive(Clone, Debug)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModalGraph {
    modality: Modality,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
    /// Canonical visit order: `canon[k]` is the node index visited k-th.
    canon: Vec<usize>,
    /// Inverse of `canon`: `rank[i]` is node i's canonical position.
    rank: Vec<usize>,
    node_dim: usize,
    edge_dim: usize,
}

impl ModalGraph {
    /// Validates structure and computes the canonical order.
    fn assemble(
        modality: Modality,
        nodes: Vec<GraphNode>,
        edges: Vec<GraphEdge>,
        node_dim: usize,
        edge_dim: usize,
    ) -> Result<Self> {
        for (i, node) in nodes.iter().enumerate() {
            if node.feature.len() != node_dim {
                return Err(Error::dimension(
                    "graph node",
                    format!("node {i} has {} dims, expected {node_dim}", node.feature.len()),
                ));
            }
            if !node.feature.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("feature of graph node {i}")));
            }
        }
        for (e, edge) in edges.iter().enumerate() {
            if edge.src >= nodes.len() || edge.dst >= nodes.len() {
                return Err(Error::domain(
                    "graph edge",
                    format!("edge {e} references node out of range"),
                ));
            }
            if edge.src == edge.dst {
                return Err(Error::domain("graph edge", format!("edge {e} is a self-loop")));
            }
            if edge.feature.len() != edge_dim {
                return Err(Error::dimension(
                    "graph edge",
                    format!("edge {e} has {} dims, expected {edge_dim}", edge.feature.len()),
                ));
            }
            if !edge.feature.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("feature of graph edge {e}")));
            }
        }

        let keys: Vec<Vec<u8>> = nodes.iter().map(node_key).collect();
        let mut canon: Vec<usize> = (0..nodes.len()).collect();
        // Ties (fully identical content) keep input order; identical content
        // makes the choice unobservable downstream.
        canon.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
        let mut rank = vec![0usize; nodes.len()];
        for (pos, &idx) in canon.iter().enumerate() {
            rank[idx] = pos;
        }

        Ok(ModalGraph {
            modality,
            nodes,
            edges,
            canon,
            rank,
            node_dim,
            edge_dim,
        })
    }

    pub fn empty(modality: Modality, node_dim: usize, edge_dim: usize) -> Self {
        ModalGraph {
            modality,
            nodes: Vec::new(),
            edges: Vec::new(),
            canon: Vec::new(),
            rank: Vec::new(),
            node_dim,
            edge_dim,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, i: usize) -> &GraphNode {
        &self.nodes[i]
    }

    pub fn edge(&self, e: usize) -> &GraphEdge {
        &self.edges[e]
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    /// Node indices in canonical (content-derived) visit order.
    pub fn canon_order(&self) -> &[usize] {
        &self.canon
    }

    /// Canonical position of node `i`.
    pub fn rank(&self, i: usize) -> usize {
        self.rank[i]
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    /// Index of the node labeled `label` (exact match on the stored label).
    pub fn find_node(&self, label: &str) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.label.as_deref() == Some(label))
    }
}

/// Order-preserving byte encoding of a finite f64: flips make the byte order
/// match numeric order, so content keys sort numerically.
fn f64_key_bytes(v: f64) -> [u8; 8] {
    let bits = v.to_bits();
    let ordered = if bits & (1 << 63) != 0 {
        !bits
    } else {
        bits | (1 << 63)
    };
    ordered.to_be_bytes()
}

/// Content key a node sorts by: label first (if any), then the feature bytes.
/// Depends only on node content, never on input position.
fn node_key(node: &GraphNode) -> Vec<u8> {
    let mut key = Vec::with_capacity(16 + node.feature.len() * 8);
    if let Some(label) = &node.label {
        key.push(1);
        key.extend_from_slice(label.as_bytes());
    } else {
        key.push(0);
    }
    key.push(0); // label terminator; labels never contain NUL after folding
    for &v in &node.feature {
        key.extend_from_slice(&f64_key_bytes(v));
    }
    key
}

/// Which side of an edge a node sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Direction {
    /// Edge arrives at the node; the neighbor is the source.
    Incoming,
    /// Edge leaves the node; the neighbor is the destination.
    Outgoing,
}

/// Precomputed neighborhoods under a fixed [`NeighborMode`].
///
/// `entries(i)` is the multiset of incident (neighbor node, edge) pairs: the
/// unit of edge attention and relational aggregation. `nodes(i)` is the
/// deduplicated neighbor set: the unit of plain feature sums and means. Both
/// are ordered canonically (neighbor rank, then direction, then edge feature
/// bytes), so iteration order is a function of content alone.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    entries: Vec<Vec<(usize, usize)>>,
    nodes: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn build(graph: &ModalGraph, mode: crate::config::NeighborMode) -> Self {
        use crate::config::NeighborMode;
        let n = graph.node_count();
        let mut raw: Vec<Vec<(usize, usize, Direction)>> = vec![Vec::new(); n];
        for (e, edge) in graph.edges().iter().enumerate() {
            if matches!(mode, NeighborMode::In | NeighborMode::Both) {
                raw[edge.dst].push((edge.src, e, Direction::Incoming));
            }
            if matches!(mode, NeighborMode::Out | NeighborMode::Both) {
                raw[edge.src].push((edge.dst, e, Direction::Outgoing));
            }
        }
        let mut entries = Vec::with_capacity(n);
        let mut nodes = Vec::with_capacity(n);
        for list in raw.iter_mut() {
            list.sort_by(|a, b| {
                graph
                    .rank(a.0)
                    .cmp(&graph.rank(b.0))
                    .then(a.2.cmp(&b.2))
                    .then_with(|| edge_feature_key(graph, a.1).cmp(&edge_feature_key(graph, b.1)))
                    .then(a.1.cmp(&b.1))
            });
            let mut distinct: Vec<usize> = list.iter().map(|(j, _, _)| *j).collect();
            distinct.dedup();
            entries.push(list.iter().map(|(j, e, _)| (*j, *e)).collect());
            nodes.push(distinct);
        }
        NeighborIndex { entries, nodes }
    }

    /// Incident (neighbor node, edge) pairs of node `i`.
    pub fn entries(&self, i: usize) -> &[(usize, usize)] {
        &self.entries[i]
    }

    /// Distinct neighbor nodes of `i` in canonical order.
    pub fn nodes(&self, i: usize) -> &[usize] {
        &self.nodes[i]
    }
}

fn edge_feature_key(graph: &ModalGraph, e: usize) -> Vec<u8> {
    graph
        .edge(e)
        .feature
        .iter()
        .flat_map(|&v| f64_key_bytes(v))
        .collect()
}

/// Relative geometry of `b_j` seen from `b_i`:
/// offsets scaled by the reference extent, extent ratios, and the area ratio.
pub fn spatial_edge_feature(b_i: &BBox, b_j: &BBox) -> Result<[f64; SPATIAL_EDGE_DIM]> {
    b_i.check()?;
    b_j.check()?;
    let feature = [
        (b_j.x - b_i.x) / b_i.w,
        (b_j.y - b_i.y) / b_i.h,
        b_j.w / b_i.w,
        b_j.h / b_i.h,
        (b_j.w * b_j.h) / (b_i.w * b_i.h),
    ];
    if !feature.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("spatial edge feature".into()));
    }
    Ok(feature)
}

/// Fully connected visual graph over the detections. Node i carries the i-th
/// detection feature; every ordered pair (i, j), i != j, gets an edge with
/// the spatial feature of j relative to i.
pub fn build_visual_graph(detections: &[DetectionRecord], max_detections: usize) -> Result<ModalGraph> {
    if detections.is_empty() {
        return Err(Error::domain("build_visual_graph", "no detections"));
    }
    if detections.len() > max_detections {
        return Err(Error::domain(
            "build_visual_graph",
            format!("{} detections exceed the limit {max_detections}", detections.len()),
        ));
    }
    let feature_dim = detections[0].feature.len();
    if feature_dim == 0 {
        return Err(Error::domain("build_visual_graph", "empty detection features"));
    }
    let nodes: Vec<GraphNode> = detections
        .iter()
        .map(|d| GraphNode {
            feature: d.feature.clone(),
            label: if d.label.is_empty() {
                None
            } else {
                Some(d.label.join(" "))
            },
        })
        .collect();
    let mut edges = Vec::with_capacity(detections.len() * detections.len().saturating_sub(1));
    for (i, di) in detections.iter().enumerate() {
        for (j, dj) in detections.iter().enumerate() {
            if i == j {
                continue;
            }
            edges.push(GraphEdge {
                src: i,
                dst: j,
                feature: spatial_edge_feature(&di.bbox, &dj.bbox)?.to_vec(),
            });
        }
    }
    ModalGraph::assemble(Modality::Visual, nodes, edges, feature_dim, SPATIAL_EDGE_DIM)
}

/// Case-folds a name into its node identity: tokenized and re-joined, so
/// "Polar Bear" and "polar  bear" merge. Answer matching must fold the same
/// way, so this is public.
pub fn fold_name(name: &str) -> String {
    tokenize(name).join(" ")
}

/// Semantic graph over caption triplets: a node per distinct (case-folded)
/// name with its embedded-phrase feature, one edge per triplet carrying the
/// embedded relation. Triplets that fold into self-loops or empty names are
/// dropped with a warning. An empty input yields an empty graph.
pub fn build_semantic_graph(tuples: &[FactTriplet], table: &EmbeddingTable) -> Result<ModalGraph> {
    build_name_graph(Modality::Semantic, tuples, table, false)
}

/// Fact graph over retained knowledge triplets. Same shape as the semantic
/// builder except exact (case-folded) duplicate triplets collapse into one
/// edge. Fact nodes are the answer candidates, so an empty input is an error
/// the caller maps to a no-candidates signal.
pub fn build_fact_graph(facts: &[FactTriplet], table: &EmbeddingTable) -> Result<ModalGraph> {
    if facts.is_empty() {
        return Err(Error::domain("build_fact_graph", "no facts"));
    }
    build_name_graph(Modality::Fact, facts, table, true)
}

fn build_name_graph(
    modality: Modality,
    triplets: &[FactTriplet],
    table: &EmbeddingTable,
    dedup: bool,
) -> Result<ModalGraph> {
    let dim = table.dim();
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut edges: Vec<GraphEdge> = Vec::new();
    let mut seen: std::collections::HashSet<(String, String, String)> = std::collections::HashSet::new();

    let mut intern = |name: &str, nodes: &mut Vec<GraphNode>| -> Option<usize> {
        let folded = fold_name(name);
        if folded.is_empty() {
            return None;
        }
        Some(*index.entry(folded.clone()).or_insert_with(|| {
            nodes.push(GraphNode {
                feature: table.embed_phrase(&tokenize(&folded)),
                label: Some(folded),
            });
            nodes.len() - 1
        }))
    };

    for t in triplets {
        let (Some(s), Some(o)) = (intern(&t.subject, &mut nodes), intern(&t.object, &mut nodes)) else {
            log::warn!("dropping triplet with empty name: {t:?}");
            continue;
        };
        if s == o {
            log::warn!("dropping self-loop triplet: {t:?}");
            continue;
        }
        let relation = fold_name(&t.relation);
        if dedup {
            let key = (
                nodes[s].label.clone().expect("interned nodes are labeled"),
                relation.clone(),
                nodes[o].label.clone().expect("interned nodes are labeled"),
            );
            if !seen.insert(key) {
                continue;
            }
        }
        edges.push(GraphEdge {
            src: s,
            dst: o,
            feature: table.embed_phrase(&tokenize(&relation)),
        });
    }

    ModalGraph::assemble(modality, nodes, edges, dim, dim)
}
