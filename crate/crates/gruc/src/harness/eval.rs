//! Answer-accuracy evaluation over one or more test splits.
//!
//! Candidate facts are filtered by the checkpoint's relation head when one
//! was trained (the annotated relation is never consulted at test time) and
//! left unfiltered otherwise. Instances whose retrieval or filtering leaves
//! no candidates score as wrong, not as absent: a system that cannot produce
//! an answer has not answered correctly.

use std::collections::BTreeSet;

use crate::checkpoint::Checkpoint;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graphs::{fold_name, InstanceBundle};
use crate::harness::parallel_map;
use crate::model::{ForwardOptions, Pipeline, RelationFilter};
use crate::numerics::Tape;
use crate::retrieval::fold_relation;
use crate::rng::substream;

/// Accuracy on one named split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitReport {
    pub name: String,
    pub total: usize,
    /// Instances that produced no ranking (no candidates after retrieval or
    /// filtering, or malformed data). Included in `total`, scored wrong.
    pub skipped: usize,
    pub top1: f64,
    pub top3: f64,
}

/// Accuracy per split plus the unweighted mean across splits.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub splits: Vec<SplitReport>,
    pub top1: f64,
    pub top3: f64,
}

/// One system's output on one instance: candidates by descending score, or
/// nothing when the instance could not be answered at all.
pub enum Ranking {
    Ranked(Vec<(String, f64)>),
    NoAnswer,
}

/// Runs the trained model on one instance exactly as evaluation does:
/// relation filtering by the trained head when present, then a non-training
/// forward pass. `NoCandidates` propagates so callers can distinguish "could
/// not answer" from a ranking.
pub fn rank_instance(
    pipeline: &Pipeline,
    checkpoint: &Checkpoint,
    table: &EmbeddingTable,
    instance: &InstanceBundle,
) -> Result<Vec<(String, f64)>> {
    let predicted: Option<BTreeSet<String>> = match pipeline.vocab() {
        Some(_) => {
            let ranked =
                pipeline.predict_relations(&checkpoint.params, table, &instance.question)?;
            Some(
                ranked
                    .into_iter()
                    .map(|(relation, _)| fold_relation(&relation))
                    .collect(),
            )
        }
        None => None,
    };
    let filter = match &predicted {
        Some(allowed) => RelationFilter::Predicted(allowed),
        None => RelationFilter::None,
    };

    let prepared = pipeline.prepare(instance, table, filter)?;
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        training: false,
        inspect: false,
    };
    // Dropout is inactive outside training, so the stream only satisfies the
    // signature; any fixed tag keeps evaluation deterministic.
    let mut rng = substream(checkpoint.train_seed, "eval");
    let pass = pipeline.forward(&mut tape, &checkpoint.params, &prepared, table, &opts, &mut rng)?;
    Ok(pass.ranked)
}

/// Ranks one instance for scoring, mapping unanswerable instances to
/// `Ranking::NoAnswer`.
fn model_ranking(
    pipeline: &Pipeline,
    checkpoint: &Checkpoint,
    table: &EmbeddingTable,
    instance: &InstanceBundle,
) -> Result<Ranking> {
    match rank_instance(pipeline, checkpoint, table, instance) {
        Ok(ranked) => Ok(Ranking::Ranked(ranked)),
        Err(Error::NoCandidates { .. }) | Err(Error::Schema { .. }) => Ok(Ranking::NoAnswer),
        Err(other) => Err(other),
    }
}

/// Scores one split with an arbitrary ranker. The model path and the test
/// oracles share this counting code.
pub fn evaluate_split_with<F>(
    name: &str,
    instances: &[InstanceBundle],
    jobs: usize,
    rank: F,
) -> Result<SplitReport>
where
    F: Fn(&InstanceBundle) -> Result<Ranking> + Sync,
{
    if instances.is_empty() {
        return Err(Error::Data(format!("split `{name}` is empty")));
    }
    let rankings = parallel_map(instances, jobs, &rank)?;

    let mut skipped = 0usize;
    let mut top1_hits = 0usize;
    let mut top3_hits = 0usize;
    for (instance, ranking) in instances.iter().zip(&rankings) {
        match ranking {
            Ranking::NoAnswer => skipped += 1,
            Ranking::Ranked(ranked) => {
                let answer = fold_name(&instance.answer);
                let top1 = ranked.first().is_some_and(|(entity, _)| *entity == answer);
                let top3 = ranked.iter().take(3).any(|(entity, _)| *entity == answer);
                top1_hits += usize::from(top1);
                top3_hits += usize::from(top3);
            }
        }
    }

    let total = instances.len();
    Ok(SplitReport {
        name: name.to_string(),
        total,
        skipped,
        top1: top1_hits as f64 / total as f64,
        top3: top3_hits as f64 / total as f64,
    })
}

/// Scores one split with the trained model. `top1 <= top3` holds by
/// construction: the top-3 set contains the top-1 candidate.
pub fn evaluate_split(
    checkpoint: &Checkpoint,
    name: &str,
    instances: &[InstanceBundle],
    table: &EmbeddingTable,
    jobs: usize,
) -> Result<SplitReport> {
    let pipeline = Pipeline::new(checkpoint.config.clone(), checkpoint.vocab.clone())?;
    evaluate_split_with(name, instances, jobs, |instance| {
        model_ranking(&pipeline, checkpoint, table, instance)
    })
}

/// Scores every split and macro-averages the accuracies.
pub fn evaluate(
    checkpoint: &Checkpoint,
    splits: &[(String, Vec<InstanceBundle>)],
    table: &EmbeddingTable,
    jobs: usize,
) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::Data("no evaluation splits were given".into()));
    }
    let mut reports = Vec::with_capacity(splits.len());
    for (name, instances) in splits {
        reports.push(evaluate_split(checkpoint, name, instances, table, jobs)?);
    }
    let top1 = reports.iter().map(|r| r.top1).sum::<f64>() / reports.len() as f64;
    let top3 = reports.iter().map(|r| r.top3).sum::<f64>() / reports.len() as f64;
    Ok(EvalReport {
        splits: reports,
        top1,
        top3,
    })
}
