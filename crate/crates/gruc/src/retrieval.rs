//! Candidate fact retrieval and relation-based filtering.
//!
//! Facts are scored by word-level cosine similarity against a context built
//! from the question tokens and the detection label words. The top N survive.
//! A linear head over the question vector then predicts the relation type;
//! at inference the top-k predicted relations gate which facts reach the
//! reasoner, while during training the annotated relation (when present)
//! plays that role and the head itself is trained with cross-entropy.

use std::collections::BTreeSet;

use crate::config::FactScoreMode;
use crate::embeddings::{cosine, tokenize, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graphs::{DetectionRecord, FactTriplet};
use crate::numerics::{ParameterSet, Tape, Var};

/// A fact with its retrieval score and original position.
#[derive(Clone, Debug)]
pub struct ScoredFact {
    pub fact: FactTriplet,
    pub score: f64,
    /// Index into the instance's fact list.
    pub index: usize,
}

/// Deduplicated, sorted context words: question tokens plus detection label
/// words, case-folded. Sorting fixes the summation order in scoring.
pub fn context_words(question: &[String], detections: &[DetectionRecord]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for token in question {
        for word in tokenize(token) {
            set.insert(word);
        }
    }
    for det in detections {
        for label in &det.label {
            for word in tokenize(label) {
                set.insert(word);
            }
        }
    }
    set.into_iter().collect()
}

/// All words of a fact in subject, relation, object order.
fn fact_words(fact: &FactTriplet) -> Vec<String> {
    let mut words = tokenize(&fact.subject);
    words.extend(tokenize(&fact.relation));
    words.extend(tokenize(&fact.object));
    words
}

/// Scores one fact against the context.
///
/// `PairwiseMean` averages the cosine similarity over every (fact word,
/// context word) pair. `MaxMean` takes, per fact word, the best context match
/// and averages those. Out-of-vocabulary words have zero vectors and thus
/// contribute zero similarity; a fact or context with no words scores zero.
pub fn score_fact(
    fact: &FactTriplet,
    context: &[String],
    table: &EmbeddingTable,
    mode: FactScoreMode,
) -> f64 {
    let fwords = fact_words(fact);
    if fwords.is_empty() || context.is_empty() {
        return 0.0;
    }
    let fvecs: Vec<Vec<f64>> = fwords.iter().map(|w| table.embed_token(w)).collect();
    let cvecs: Vec<Vec<f64>> = context.iter().map(|w| table.embed_token(w)).collect();
    match mode {
        FactScoreMode::PairwiseMean => {
            let mut total = 0.0;
            for fv in &fvecs {
                for cv in &cvecs {
                    total += cosine(fv, cv);
                }
            }
            total / (fvecs.len() * cvecs.len()) as f64
        }
        FactScoreMode::MaxMean => {
            let mut total = 0.0;
            for fv in &fvecs {
                let best = cvecs
                    .iter()
                    .map(|cv| cosine(fv, cv))
                    .fold(f64::NEG_INFINITY, f64::max);
                total += best;
            }
            total / fvecs.len() as f64
        }
    }
}

/// Scores every fact of an instance in input order.
pub fn score_facts(
    facts: &[FactTriplet],
    context: &[String],
    table: &EmbeddingTable,
    mode: FactScoreMode,
) -> Vec<ScoredFact> {
    facts
        .iter()
        .enumerate()
        .map(|(index, fact)| ScoredFact {
            fact: fact.clone(),
            score: score_fact(fact, context, table, mode),
            index,
        })
        .collect()
}

/// Keeps the `n` best-scoring facts. The sort is stable and descending, so
/// equal scores preserve their input order.
pub fn retain_top(mut scored: Vec<ScoredFact>, n: usize) -> Result<Vec<ScoredFact>> {
    if n == 0 {
        return Err(Error::domain("retain_top", "n must be at least 1"));
    }
    scored.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("scores are finite"));
    scored.truncate(n);
    Ok(scored)
}

/// Keeps facts whose (case-folded) relation is in `allowed`, preserving
/// order. May come back empty; the caller decides whether that is fatal.
pub fn filter_facts(scored: &[ScoredFact], allowed: &BTreeSet<String>) -> Vec<ScoredFact> {
    scored
        .iter()
        .filter(|sf| allowed.contains(&fold_relation(&sf.fact.relation)))
        .cloned()
        .collect()
}

/// Canonical form relations are compared in.
pub fn fold_relation(relation: &str) -> String {
    tokenize(relation).join(" ")
}

/// Sorted, deduplicated relation vocabulary for the prediction head.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationVocab {
    relations: Vec<String>,
}

impl RelationVocab {
    /// Builds the vocabulary from annotated relation labels.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = labels
            .into_iter()
            .map(fold_relation)
            .filter(|r| !r.is_empty())
            .collect();
        RelationVocab {
            relations: set.into_iter().collect(),
        }
    }

    pub fn from_parts(relations: Vec<String>) -> Self {
        RelationVocab { relations }
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn index_of(&self, relation: &str) -> Option<usize> {
        let folded = fold_relation(relation);
        self.relations.iter().position(|r| *r == folded)
    }
}

pub const RELATION_HEAD: &str = "relation.head";

/// Registers the relation head for a vocabulary of `vocab_len` classes.
pub fn register_relation_params(
    params: &mut ParameterSet,
    vocab_len: usize,
    hidden_dim: usize,
    seed: u64,
) -> Result<()> {
    params.insert_glorot(RELATION_HEAD, &[vocab_len, hidden_dim], seed)?;
    params.insert_zeros(&format!("{RELATION_HEAD}.bias"), &[vocab_len])
}

/// Logits over the relation vocabulary from the question vector `q`.
pub fn relation_logits(tape: &mut Tape, params: &ParameterSet, q: Var) -> Result<Var> {
    if !params.contains(RELATION_HEAD) {
        return Err(Error::Data(
            "relation head is not trained (no vocabulary was available)".into(),
        ));
    }
    tape.linear(params, RELATION_HEAD, q)
}

/// Cross-entropy of the logits against the annotated class.
pub fn relation_cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let len = tape.value(logits).len();
    if label >= len {
        return Err(Error::domain(
            "relation_cross_entropy",
            format!("label {label} outside vocabulary of {len}"),
        ));
    }
    let lse = tape.logsumexp(logits)?;
    let picked = tape.slice(logits, label, 1)?;
    tape.sub(lse, picked)
}

/// The `top_k` most probable relations with their probabilities, best first.
/// Ties break toward the smaller vocabulary index.
pub fn top_relations(
    tape: &Tape,
    logits: Var,
    vocab: &RelationVocab,
    top_k: usize,
) -> Result<Vec<(String, f64)>> {
    let values = tape.value(logits).data();
    if values.len() != vocab.len() {
        return Err(Error::dimension(
            "top_relations",
            format!("{} logits for {} relations", values.len(), vocab.len()),
        ));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut ranked: Vec<(usize, f64)> = exps.iter().map(|e| e / total).enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite probabilities").then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(top_k)
        .map(|(i, p)| (vocab.relations()[i].clone(), p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            2,
            vec![
                ("cat".to_string(), vec![1.0, 0.0]),
                ("mat".to_string(), vec![0.0, 1.0]),
                ("feline".to_string(), vec![2.0, 0.0]),
            ],
        )
        .unwrap()
    }

    fn fact(s: &str, r: &str, o: &str) -> FactTriplet {
        FactTriplet::new(s, r, o)
    }

    #[test]
    fn pairwise_mean_hand_example() {
        let t = table();
        // Fact words: cat, on (OOV), mat. Context: cat.
        // Cosines: 1, 0, 0 -> mean 1/3.
        let s = score_fact(
            &fact("cat", "on", "mat"),
            &["cat".to_string()],
            &t,
            FactScoreMode::PairwiseMean,
        );
        assert_relative_eq!(s, 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn max_mean_differs_from_pairwise() {
        let t = table();
        let ctx = vec!["cat".to_string(), "mat".to_string()];
        let f = fact("feline", "on", "mat");
        // Pairwise: pairs (feline,cat)=1 (feline,mat)=0 (on,*)=0,0 (mat,cat)=0
        // (mat,mat)=1 -> 2/6.
        let pm = score_fact(&f, &ctx, &t, FactScoreMode::PairwiseMean);
        assert_relative_eq!(pm, 2.0 / 6.0, max_relative = 1e-12);
        // MaxMean: feline->1, on->0, mat->1 -> 2/3.
        let mm = score_fact(&f, &ctx, &t, FactScoreMode::MaxMean);
        assert_relative_eq!(mm, 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn empty_sides_score_zero() {
        let t = table();
        assert_eq!(
            score_fact(&fact("cat", "on", "mat"), &[], &t, FactScoreMode::PairwiseMean),
            0.0
        );
        // All-OOV fact against a real context.
        assert_eq!(
            score_fact(
                &fact("zzz", "qqq", "www"),
                &["cat".to_string()],
                &t,
                FactScoreMode::PairwiseMean
            ),
            0.0
        );
    }

    #[test]
    fn context_is_sorted_and_deduplicated() {
        let q = vec!["The".to_string(), "cat".to_string(), "cat".to_string()];
        let ctx = context_words(&q, &[]);
        assert_eq!(ctx, vec!["cat".to_string(), "the".to_string()]);
    }

    #[test]
    fn retain_top_keeps_stable_tie_order() {
        let facts: Vec<ScoredFact> = [5.0, 3.0, 3.0, 1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(index, &score)| ScoredFact {
                fact: fact("a", "b", "c"),
                score,
                index,
            })
            .collect();
        let kept = retain_top(facts, 4).unwrap();
        let order: Vec<usize> = kept.iter().map(|sf| sf.index).collect();
        assert_eq!(order, vec![0, 1, 2, 4]);
        assert!(retain_top(vec![], 0).is_err());
    }

    #[test]
    fn filter_preserves_order_and_folds() {
        let scored = vec![
            ScoredFact { fact: fact("a", "Is A", "b"), score: 0.9, index: 0 },
            ScoredFact { fact: fact("c", "part of", "d"), score: 0.8, index: 1 },
            ScoredFact { fact: fact("e", "is a", "f"), score: 0.7, index: 2 },
        ];
        let allowed: BTreeSet<String> = ["is a".to_string()].into();
        let kept = filter_facts(&scored, &allowed);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].index, 0);
        assert_eq!(kept[1].index, 2);
        // Full vocabulary filter is the identity.
        let all: BTreeSet<String> = ["is a".to_string(), "part of".to_string()].into();
        assert_eq!(filter_facts(&scored, &all).len(), 3);
    }

    #[test]
    fn vocab_folds_sorts_and_dedups() {
        let vocab = RelationVocab::from_labels(["Is A", "part of", "is a"]);
        assert_eq!(vocab.relations(), &["is a".to_string(), "part of".to_string()]);
        assert_eq!(vocab.index_of("IS A"), Some(0));
        assert_eq!(vocab.index_of("unknown"), None);
    }

    #[test]
    fn untrained_head_is_an_error() {
        let params = ParameterSet::new();
        let mut tape = Tape::new();
        let q = tape.input_vec(&[0.0; 4]).unwrap();
        assert!(relation_logits(&mut tape, &params, q).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_cross_entropy() {
        let mut params = ParameterSet::new();
        params.insert_zeros(RELATION_HEAD, &[3, 4]).unwrap();
        params.insert_zeros("relation.head.bias", &[3]).unwrap();
        let mut tape = Tape::new();
        let q = tape.input_vec(&[1.0, -1.0, 0.5, 2.0]).unwrap();
        let logits = relation_logits(&mut tape, &params, q).unwrap();
        let ce = relation_cross_entropy(&mut tape, logits, 1).unwrap();
        assert_relative_eq!(
            tape.value(ce).item().unwrap(),
            3.0f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn top_relations_rank_and_tiebreak() {
        let vocab = RelationVocab::from_labels(["alpha", "beta", "gamma"]);
        let mut tape = Tape::new();
        let logits = tape.input_vec(&[1.0, 3.0, 1.0]).unwrap();
        let top = top_relations(&tape, logits, &vocab, 2).unwrap();
        assert_eq!(top[0].0, "beta");
        // alpha and gamma tie; the smaller index wins.
        assert_eq!(top[1].0, "alpha");
        let probs: f64 = top.iter().map(|(_, p)| p).sum();
        assert!(probs < 1.0);
    }
}
