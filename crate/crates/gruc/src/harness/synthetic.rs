//! Synthetic benchmark generator.
//!
//! Each instance plants one supporting fact `(subject, relation, answer)` and
//! asks a question that names the relation but never the subject. The only
//! way to pick the right answer among same-relation distractor facts is a
//! cue: a detection carrying the subject's visual prototype (visual
//! difficulty), a caption tuple naming the subject (semantic), both, or, for
//! fact-only instances, the absence of same-relation distractors so the
//! relation alone identifies the plant.
//!
//! Everything derives from named substreams of one seed: word embeddings and
//! visual prototypes are global (per word), instance content is per index.
//! The same seed always regenerates the same corpus, word for word and bit
//! for bit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ModelDims};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graphs::{BBox, DetectionRecord, FactTriplet, InstanceBundle};
use crate::rng::substream;

/// Which graphs carry the cue that disambiguates the planted fact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Visual,
    Semantic,
    Both,
    FactOnly,
}

impl Difficulty {
    pub fn parse(s: &str) -> Result<Difficulty> {
        match s {
            "visual" => Ok(Difficulty::Visual),
            "semantic" => Ok(Difficulty::Semantic),
            "both" => Ok(Difficulty::Both),
            "fact-only" => Ok(Difficulty::FactOnly),
            other => Err(Error::domain(
                "difficulty",
                format!("`{other}` is not one of visual, semantic, both, fact-only"),
            )),
        }
    }

    fn visual_cue(self) -> bool {
        matches!(self, Difficulty::Visual | Difficulty::Both)
    }

    fn semantic_cue(self) -> bool {
        matches!(self, Difficulty::Semantic | Difficulty::Both)
    }
}

/// Subjects: what the cue points at.
const SUBJECTS: &[&str] = &[
    "horse", "cow", "dog", "cat", "sheep", "goat", "lion", "tiger", "bear", "wolf", "fox",
    "deer", "rabbit", "mouse", "eagle", "owl",
];

/// Answer entities: objects of the planted and distractor facts.
const OBJECTS: &[&str] = &[
    "riding", "milk", "guarding", "purring", "wool", "climbing", "roaring", "stripes", "honey",
    "howling", "digging", "grazing", "hopping", "squeaking", "soaring", "hooting",
];

/// Scene filler for cue-free detections and captions.
const FILLERS: &[&str] = &[
    "tree", "rock", "cloud", "river", "fence", "barn", "field", "hill", "pond", "bush", "path",
    "gate",
];

/// Fact relations, two words each so the question shares two words with the
/// planted fact.
const RELATIONS: &[&str] = &[
    "used for", "capable of", "known for", "famous for", "suited to", "prized for",
];

/// Caption relations, disjoint from fact relations.
const SEMANTIC_RELATIONS: &[&str] = &["standing near", "walking past", "resting by", "looking at"];

const WH_WORDS: &[&str] = &["what", "which"];
const PLACE_WORDS: &[&str] = &["here", "shown", "nearby", "present"];
const GLUE_WORDS: &[&str] = &["is", "the", "animal"];

/// Generation knobs. `dims` doubles as the model configuration the corpus is
/// meant to be consumed with.
///
/// The pool sizes control how often entity combinations recur across a
/// corpus. When a pool equals the cast size (`confusers + 1`), every
/// instance draws the same cast in a fresh arrangement, so the identical
/// fact set recurs with different cued subjects and memorizing "this cast
/// means that answer" cannot work: the cue is the only predictive signal.
/// Large pools make every instance a unique combination, which rewards
/// memorization over the intended cross-modal rule. For the same reason
/// everything other than the cast arrangement, the relation, and the cue is
/// constant across instances: scene geometry, filler entities, and question
/// phrasing carry no per-instance variation a model could latch onto.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub difficulty: Difficulty,
    /// Seed of the word world: embeddings and visual prototypes. Corpora
    /// generated under the same spec share this world, so train and test
    /// instances describe the same entities; the generation seed varies only
    /// the composition of instances.
    pub world_seed: u64,
    pub embed_dim: usize,
    pub visual_feature_dim: usize,
    /// Same-relation distractor facts (the confusable set).
    pub confusers: usize,
    /// How many distinct subjects the corpus draws from.
    pub subject_pool: usize,
    /// How many distinct answer entities the corpus draws from.
    pub object_pool: usize,
    /// How many distinct fact relations the corpus draws from.
    pub relation_pool: usize,
    /// Facts with unrelated relations.
    pub noise_facts: usize,
    /// Cue-free detections per image.
    pub noise_detections: usize,
    /// Cue-free caption tuples.
    pub noise_tuples: usize,
    /// Uniform jitter applied to detection features.
    pub feature_noise: f64,
    /// Detector features live in the word-embedding space, as a grounded
    /// detector would produce. Off gives every word an independent visual
    /// prototype, which the model must learn to map onto entity embeddings.
    pub aligned_visual: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            difficulty: Difficulty::Both,
            world_seed: 0,
            embed_dim: 16,
            visual_feature_dim: 16,
            confusers: 2,
            subject_pool: 3,
            object_pool: 3,
            relation_pool: 2,
            noise_facts: 0,
            noise_detections: 1,
            noise_tuples: 1,
            feature_noise: 0.0,
            aligned_visual: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.visual_feature_dim == 0 {
            return Err(Error::domain("synthetic", "dims must be positive"));
        }
        if self.subject_pool > SUBJECTS.len()
            || self.object_pool > OBJECTS.len()
            || self.relation_pool > RELATIONS.len()
        {
            return Err(Error::domain(
                "synthetic",
                format!(
                    "pools {}/{}/{} exceed the built-in word lists ({}/{}/{})",
                    self.subject_pool,
                    self.object_pool,
                    self.relation_pool,
                    SUBJECTS.len(),
                    OBJECTS.len(),
                    RELATIONS.len()
                ),
            ));
        }
        // Noise facts draw a relation different from the planted one, so two
        // relations is the floor even before fact-only uniqueness.
        if self.relation_pool < 2 {
            return Err(Error::domain("synthetic", "relation pool must be at least 2"));
        }
        if self.confusers + 1 > self.object_pool || self.confusers + 1 > self.subject_pool {
            return Err(Error::domain(
                "synthetic",
                format!("confusers {} exceeds the entity pools", self.confusers),
            ));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return Err(Error::domain(
                "synthetic",
                format!("feature_noise {}", self.feature_noise),
            ));
        }
        // Slots 0..=8 form the 3x3 scene grid; slot 0 is reserved for the cue.
        if self.noise_detections.max(1) > 8 {
            return Err(Error::domain(
                "synthetic",
                "noise detections exceed the scene grid",
            ));
        }
        if 2 * self.noise_tuples + 2 > FILLERS.len() {
            return Err(Error::domain(
                "synthetic",
                "noise tuples exceed the filler pool",
            ));
        }
        if self.aligned_visual && self.visual_feature_dim != self.embed_dim {
            return Err(Error::domain(
                "synthetic",
                format!(
                    "aligned visual features require visual_feature_dim == embed_dim, got {} and {}",
                    self.visual_feature_dim, self.embed_dim
                ),
            ));
        }
        Ok(())
    }

    /// A model configuration sized for this corpus: default training settings,
    /// scaled-down dimensions.
    pub fn config(&self) -> Config {
        let mut config = Config::default();
        config.dims = ModelDims {
            embed_dim: self.embed_dim,
            visual_feature_dim: self.visual_feature_dim,
            hidden_dim: 32,
            select_dim: 24,
            attention_dim: 16,
            classifier_hidden_dim: 32,
            max_question_len: 8,
            max_detections: self.noise_detections + 2,
            assess_layers: 1,
        };
        config
    }
}

/// A generated instance together with its planted supporting fact.
#[derive(Clone, Debug)]
pub struct SyntheticInstance {
    pub bundle: InstanceBundle,
    pub plant: FactTriplet,
}

fn every_word() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(SUBJECTS);
    words.extend(OBJECTS);
    words.extend(FILLERS);
    for rel in RELATIONS.iter().chain(SEMANTIC_RELATIONS) {
        words.extend(rel.split(' '));
    }
    words.extend(WH_WORDS);
    words.extend(PLACE_WORDS);
    words.extend(GLUE_WORDS);
    words.sort_unstable();
    words.dedup();
    words
}

fn draw_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Embeddings for the full synthetic vocabulary. Per-word substreams make the
/// table independent of iteration order.
pub fn build_table(spec: &SyntheticSpec, seed: u64) -> Result<EmbeddingTable> {
    spec.validate()?;
    let mut table = EmbeddingTable::new(spec.embed_dim);
    for word in every_word() {
        let mut stream = substream(seed, &format!("synth/emb/{word}"));
        table.insert(word.to_string(), draw_vector(spec.embed_dim, &mut stream))?;
    }
    Ok(table)
}

/// The visual prototype of a word: what a detector would emit for it. An
/// aligned prototype is the word's embedding itself; an unaligned one is an
/// independent draw the model has to associate with the word from scratch.
fn visual_prototype(spec: &SyntheticSpec, seed: u64, word: &str) -> Vec<f64> {
    let stream_name = if spec.aligned_visual {
        format!("synth/emb/{word}")
    } else {
        format!("synth/vis/{word}")
    };
    let mut stream = substream(seed, &stream_name);
    draw_vector(spec.visual_feature_dim, &mut stream)
}

/// Box geometry is a fixed function of the detection slot. Anything that
/// varies per instance besides the cast arrangement and the cue hands the
/// model a signature it can memorize instead of learning the cue, so the
/// scene layout is deliberately constant across the corpus.
fn slot_bbox(slot: usize) -> Result<BBox> {
    let x = 3.0 * (slot % 3) as f64;
    let y = 3.0 * (slot / 3) as f64;
    let w = 1.5 + (slot % 2) as f64;
    let h = 2.5 - (slot % 2) as f64;
    BBox::new(x, y, w, h)
}

fn detection(
    spec: &SyntheticSpec,
    seed: u64,
    word: &str,
    slot: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DetectionRecord> {
    let mut feature = visual_prototype(spec, seed, word);
    for v in &mut feature {
        *v += spec.feature_noise * rng.gen_range(-1.0..=1.0);
    }
    Ok(DetectionRecord {
        bbox: slot_bbox(slot)?,
        feature,
        label: vec![word.to_string()],
        score: 0.9,
    })
}

fn sample_distinct<'a>(pool: &[&'a str], count: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    indices.shuffle(rng);
    indices.truncate(count);
    indices.into_iter().map(|i| pool[i]).collect()
}

/// Generates instance `index` of the corpus under `seed`.
pub fn generate_instance(
    spec: &SyntheticSpec,
    seed: u64,
    index: u64,
) -> Result<SyntheticInstance> {
    spec.validate()?;
    let rng = &mut substream(seed, &format!("synth/instance/{index}"));

    let subjects = &SUBJECTS[..spec.subject_pool];
    let objects_pool = &OBJECTS[..spec.object_pool];
    let relations = &RELATIONS[..spec.relation_pool];

    // Cast: one true subject plus confuser subjects, each paired with its own
    // candidate object.
    let cast = sample_distinct(subjects, spec.confusers + 1, rng);
    let objects = sample_distinct(objects_pool, spec.confusers + 1, rng);
    let subject = cast[0];
    let answer = objects[0];
    let relation = *relations.choose(rng).expect("relation pool is non-empty");

    let plant = FactTriplet::new(subject, relation, answer);
    let mut facts = vec![plant.clone()];
    if spec.difficulty != Difficulty::FactOnly {
        for i in 1..=spec.confusers {
            facts.push(FactTriplet::new(cast[i], relation, objects[i]));
        }
    }
    for _ in 0..spec.noise_facts {
        let other_rel = loop {
            let r = *relations.choose(rng).expect("non-empty");
            if r != relation {
                break r;
            }
        };
        let s = *subjects.choose(rng).expect("non-empty");
        let o = *objects_pool.choose(rng).expect("non-empty");
        facts.push(FactTriplet::new(s, other_rel, o));
    }

    // Detections: the cue (when visual) plus fixed scene fillers. Filler
    // words come from a pool disjoint from subjects and objects, so they can
    // never cue; slots fix the geometry so it carries no instance identity.
    let mut detections = Vec::new();
    if spec.difficulty.visual_cue() {
        detections.push(detection(spec, seed, subject, 0, rng)?);
    }
    for (k, word) in FILLERS[..spec.noise_detections.max(1)].iter().enumerate() {
        detections.push(detection(spec, seed, word, k + 1, rng)?);
    }

    // Captions: the cue tuple plus fixed filler tuples, constant for the
    // same reason the scene layout is.
    let mut tuples = Vec::new();
    if spec.difficulty.semantic_cue() {
        tuples.push(FactTriplet::new(subject, SEMANTIC_RELATIONS[0], FILLERS[0]));
    }
    for k in 0..spec.noise_tuples {
        tuples.push(FactTriplet::new(
            FILLERS[2 * k + 1],
            SEMANTIC_RELATIONS[(k + 1) % SEMANTIC_RELATIONS.len()],
            FILLERS[2 * k + 2],
        ));
    }

    // The question names the relation, never the subject.
    let mut question: Vec<String> = vec![
        WH_WORDS[0].to_string(),
        "is".to_string(),
        "the".to_string(),
        "animal".to_string(),
        PLACE_WORDS[0].to_string(),
    ];
    question.extend(relation.split(' ').map(String::from));

    let bundle = InstanceBundle {
        id: format!("synth-{seed:016x}-{index}"),
        question,
        detections,
        semantic_tuples: tuples,
        facts,
        answer: answer.to_string(),
        relation_label: Some(relation.to_string()),
    };
    bundle.validate()?;
    Ok(SyntheticInstance {
        bundle,
        plant,
    })
}

pub fn generate_corpus(
    spec: &SyntheticSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<SyntheticInstance>> {
    (0..count as u64)
        .map(|i| generate_instance(spec, seed, i))
        .collect()
}

/// Answers an instance the way the generator intended, reading only the
/// bundle: the relation comes from the question's last two tokens, the
/// subject from whichever fact subject is cued (detection label or caption
/// subject), and for fact-only instances from the unique fact with the
/// question's relation. This is the generator's consistency oracle, not a
/// model.
pub fn oracle_answer(bundle: &InstanceBundle) -> Result<String> {
    let n = bundle.question.len();
    if n < 2 {
        return Err(Error::Data("question too short for an oracle read".into()));
    }
    let relation = format!("{} {}", bundle.question[n - 2], bundle.question[n - 1]);
    let matching: Vec<&FactTriplet> = bundle
        .facts
        .iter()
        .filter(|f| f.relation == relation)
        .collect();
    match matching.as_slice() {
        [] => Err(Error::Data(format!("no fact carries relation `{relation}`"))),
        [only] => Ok(only.object.clone()),
        several => {
            let detected: Vec<&str> = bundle
                .detections
                .iter()
                .flat_map(|d| d.label.iter().map(String::as_str))
                .collect();
            let captioned: Vec<&str> = bundle
                .semantic_tuples
                .iter()
                .map(|t| t.subject.as_str())
                .collect();
            let cued: Vec<&&FactTriplet> = several
                .iter()
                .filter(|f| {
                    detected.contains(&f.subject.as_str())
                        || captioned.contains(&f.subject.as_str())
                })
                .collect();
            match cued.as_slice() {
                [only] => Ok(only.object.clone()),
                [] => Err(Error::Data("no cue identifies the planted fact".into())),
                _ => Err(Error::Data("multiple facts are cued".into())),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_instance() {
        let spec = SyntheticSpec::default();
        let a = generate_instance(&spec, 7, 3).unwrap();
        let b = generate_instance(&spec, 7, 3).unwrap();
        assert_eq!(a.bundle.id, b.bundle.id);
        assert_eq!(a.bundle.question, b.bundle.question);
        assert_eq!(a.bundle.facts, b.bundle.facts);
        assert_eq!(a.plant, b.plant);
        let fa: Vec<Vec<u64>> = a
            .bundle
            .detections
            .iter()
            .map(|d| d.feature.iter().map(|v| v.to_bits()).collect())
            .collect();
        let fb: Vec<Vec<u64>> = b
            .bundle
            .detections
            .iter()
            .map(|d| d.feature.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(fa, fb);

        let c = generate_instance(&spec, 8, 3).unwrap();
        assert!(
            a.bundle.question != c.bundle.question || a.bundle.facts != c.bundle.facts,
            "distinct seeds should differ somewhere"
        );
    }

    #[test]
    fn generated_instances_validate_and_carry_the_plant() {
        for difficulty in [
            Difficulty::Visual,
            Difficulty::Semantic,
            Difficulty::Both,
            Difficulty::FactOnly,
        ] {
            let spec = SyntheticSpec {
                difficulty,
                ..SyntheticSpec::default()
            };
            for i in 0..20 {
                let inst = generate_instance(&spec, 11, i).unwrap();
                inst.bundle.validate().unwrap();
                assert!(inst.bundle.facts.contains(&inst.plant));
                assert_eq!(inst.bundle.answer, inst.plant.object);
                assert_eq!(
                    inst.bundle.relation_label.as_deref(),
                    Some(inst.plant.relation.as_str())
                );
                // The question shares the two relation words with the plant.
                let shared = inst
                    .plant
                    .relation
                    .split(' ')
                    .filter(|w| inst.bundle.question.iter().any(|t| t == w))
                    .count();
                assert_eq!(shared, 2);
                // The subject is never spoken.
                assert!(!inst.bundle.question.contains(&inst.plant.subject));
            }
        }
    }

    #[test]
    fn oracle_reads_the_plant_on_every_difficulty() {
        for difficulty in [
            Difficulty::Visual,
            Difficulty::Semantic,
            Difficulty::Both,
            Difficulty::FactOnly,
        ] {
            let spec = SyntheticSpec {
                difficulty,
                ..SyntheticSpec::default()
            };
            for i in 0..50 {
                let inst = generate_instance(&spec, 23, i).unwrap();
                let answered = oracle_answer(&inst.bundle).unwrap();
                assert_eq!(
                    answered, inst.bundle.answer,
                    "difficulty {difficulty:?}, instance {i}"
                );
            }
        }
    }

    #[test]
    fn table_covers_the_vocabulary_and_is_seed_stable() {
        let spec = SyntheticSpec::default();
        let table = build_table(&spec, 5).unwrap();
        for word in every_word() {
            assert!(table.lookup(word).is_some(), "missing embedding for {word}");
        }
        let again = build_table(&spec, 5).unwrap();
        let a: Vec<u64> = table.lookup("horse").unwrap().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = again.lookup("horse").unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let other = build_table(&spec, 6).unwrap();
        let c: Vec<u64> = other.lookup("horse").unwrap().iter().map(|v| v.to_bits()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn fact_only_has_a_unique_relation_match() {
        let spec = SyntheticSpec {
            difficulty: Difficulty::FactOnly,
            ..SyntheticSpec::default()
        };
        for i in 0..30 {
            let inst = generate_instance(&spec, 31, i).unwrap();
            let rel = &inst.plant.relation;
            let count = inst
                .bundle
                .facts
                .iter()
                .filter(|f| &f.relation == rel)
                .count();
            assert_eq!(count, 1);
        }
    }
}
