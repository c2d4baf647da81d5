//! Run configuration.
//!
//! Everything adjustable lives here: training hyperparameters, model
//! dimensions, ablation switches, and the behavioural options that select
//! between documented variants (neighborhood direction, question read-out,
//! fact scoring mode, fusion source). Defaults reproduce the full model at
//! reference size. Configs load from JSON with every field optional and
//! unknown fields rejected, so a typo fails loudly instead of silently
//! falling back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LrSchedule;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub dropout: f64,
    /// Loss weight on the positive (answer) entity.
    pub positive_weight: f64,
    /// Loss weight on each negative entity.
    pub negative_weight: f64,
    pub schedule: LrSchedule,
    /// Reasoning iterations T.
    pub reasoning_steps: usize,
    /// Dense captions kept per image when building the semantic graph.
    pub captions: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 16,
            dropout: 0.5,
            positive_weight: 0.7,
            negative_weight: 0.3,
            schedule: LrSchedule::default(),
            reasoning_steps: 3,
            captions: 12,
            seed: 0,
        }
    }
}

/// Component switches. Everything on reproduces the full model; each switch
/// removes one mechanism while keeping the rest of the pipeline intact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Build and reason over the semantic graph.
    pub use_semantic_graph: bool,
    /// Build and reason over the visual graph.
    pub use_visual_graph: bool,
    /// Feed the summed fact-neighbor term into the initial control state.
    pub control_neighbor_agg: bool,
    /// Feed the relational neighbor term into memory updates.
    pub update_neighbor_agg: bool,
    /// Run the recurrent reasoner; off replaces it with mean-pooled
    /// concatenation of the selected node features.
    pub use_gruc: bool,
    /// Question-guided intra-modal selection; off passes raw node features.
    pub use_intra_selection: bool,
    /// Graph convolution over fused concepts before classification.
    pub use_global_assess: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_semantic_graph: true,
            use_visual_graph: true,
            control_neighbor_agg: true,
            update_neighbor_agg: true,
            use_gruc: true,
            use_intra_selection: true,
            use_global_assess: true,
        }
    }
}

/// Layer sizes and structural limits. Defaults are the reference
/// configuration; tests and the synthetic benchmark shrink them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Token embedding width.
    pub embed_dim: usize,
    /// Detection feature width.
    pub visual_feature_dim: usize,
    /// LSTM hidden width; also the question representation width.
    pub hidden_dim: usize,
    /// Width of selected node features and reasoning memories.
    pub select_dim: usize,
    /// Attention projection width inside selection.
    pub attention_dim: usize,
    /// Hidden width of the answer classifier.
    pub classifier_hidden_dim: usize,
    /// Questions are truncated or zero-padded to this many tokens.
    pub max_question_len: usize,
    /// Maximum detections per image.
    pub max_detections: usize,
    /// Graph-convolution layers in global assessment.
    pub assess_layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 300,
            visual_feature_dim: 2048,
            hidden_dim: 512,
            select_dim: 512,
            attention_dim: 512,
            classifier_hidden_dim: 512,
            max_question_len: 20,
            max_detections: 36,
            assess_layers: 1,
        }
    }
}

/// Spatial edge features are fixed by their formula, not configurable.
pub const SPATIAL_EDGE_DIM: usize = 5;

/// Which incident edges count as a node's neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    /// Edges arriving at the node.
    In,
    /// Edges leaving the node.
    Out,
    /// Both directions.
    Both,
}

/// Where the question vector is read from the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionReadout {
    /// Hidden state at the final padded position.
    PaddedEnd,
    /// Hidden state at the last real token.
    LastToken,
}

/// Which reasoner output feeds fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    /// Final control state.
    Control,
    /// Final read vector.
    Read,
}

/// How a fact is scored against the question/label context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactScoreMode {
    /// Mean cosine similarity over all (fact word, context word) pairs.
    PairwiseMean,
    /// Per fact word, max over context words; then mean over fact words.
    MaxMean,
}

/// Behavioural switches between documented variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub neighbor_mode: NeighborMode,
    pub question_readout: QuestionReadout,
    pub fusion_source: FusionSource,
    pub fact_score_mode: FactScoreMode,
    /// Facts retained after scoring.
    pub retrieval_top_n: usize,
    /// Predicted relations kept when filtering facts at inference.
    pub relation_top_k: usize,
    /// Weight of the relation cross-entropy term in the training loss.
    pub relation_loss_weight: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            neighbor_mode: NeighborMode::Both,
            question_readout: QuestionReadout::PaddedEnd,
            fusion_source: FusionSource::Control,
            fact_score_mode: FactScoreMode::PairwiseMean,
            retrieval_top_n: 100,
            relation_top_k: 3,
            relation_loss_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub dims: ModelDims,
    pub options: ModelOptions,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let config: Config = serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<inline>".to_string(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: Config = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.schedule.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch == 0 || t.reasoning_steps == 0 {
            return Err(Error::domain(
                "config",
                "epochs, batch, and reasoning_steps must be positive",
            ));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::domain("config", format!("dropout {} outside [0, 1)", t.dropout)));
        }
        if t.positive_weight <= 0.0 || t.negative_weight <= 0.0 {
            return Err(Error::domain("config", "loss weights must be positive"));
        }
        let d = &self.dims;
        if [
            d.embed_dim,
            d.visual_feature_dim,
            d.hidden_dim,
            d.select_dim,
            d.attention_dim,
            d.classifier_hidden_dim,
            d.max_question_len,
            d.max_detections,
        ]
        .contains(&0)
        {
            return Err(Error::domain("config", "all dimensions must be positive"));
        }
        let o = &self.options;
        if o.retrieval_top_n == 0 || o.relation_top_k == 0 {
            return Err(Error::domain(
                "config",
                "retrieval_top_n and relation_top_k must be positive",
            ));
        }
        if !(o.relation_loss_weight.is_finite() && o.relation_loss_weight >= 0.0) {
            return Err(Error::domain(
                "config",
                format!("relation_loss_weight {}", o.relation_loss_weight),
            ));
        }
        Ok(())
    }
}
