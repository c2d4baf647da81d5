//! Token embeddings and the question encoder.
//!
//! The embedding table is a plain text format, one token per line followed by
//! its vector. Lookups are exact after the tokenizer's case folding; misses
//! are counted and resolve to the zero vector, never an error, because
//! out-of-vocabulary words are ordinary at inference time.
//!
//! The question encoder is a single-layer LSTM over the embedded tokens,
//! zero-padded to a fixed length. By default the question vector is the
//! hidden state at the final padded position; reading the state at the last
//! real token instead is available as an option.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::{ModelDims, QuestionReadout};
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tape, Tensor, Var};

/// Lowercases and splits on every non-alphanumeric character, dropping empty
/// pieces. "Re-entry?" becomes ["re", "entry"]; digits survive.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// In-memory embedding table with hit/miss accounting.
#[derive(Debug)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    lookups: AtomicU64,
    misses: AtomicU64,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            lookups: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Builds a table from (token, vector) pairs. Later duplicates win.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut table = EmbeddingTable::new(dim);
        for (token, vector) in entries {
            table.insert(token, vector)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, token: String, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dimension(
                "EmbeddingTable::insert",
                format!("vector for `{token}` has {} dims, table is {}", vector.len(), self.dim),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for `{token}`")));
        }
        self.vectors.insert(token, vector);
        Ok(())
    }

    /// Parses `token v1 .. vD` lines from any reader. The width comes from
    /// `expected_dim` or, when absent, from the first row. A row of the wrong
    /// arity or with an unparseable number is a parse error naming the line;
    /// a duplicate token overwrites the earlier row with a warning. `origin`
    /// names the source in errors and warnings.
    pub fn from_reader(
        reader: impl BufRead,
        expected_dim: Option<usize>,
        origin: &str,
    ) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = expected_dim.map(EmbeddingTable::new);
        let mut duplicates = 0u64;

        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(origin.to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-empty line has a first field");
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                message: format!("bad float in row for `{token}`: {e}"),
            })?;

            let table = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
            if values.len() != table.dim {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno,
                    message: format!(
                        "row for `{token}` has {} values, expected {}",
                        values.len(),
                        table.dim
                    ),
                });
            }
            if table.vectors.contains_key(token) {
                duplicates += 1;
                log::warn!("{origin}:{lineno}: duplicate embedding for `{token}`, keeping the later row");
            }
            table.insert(token.to_string(), values)?;
        }

        let table = table.ok_or_else(|| Error::Data(format!("embedding table {origin} is empty")))?;
        if table.vectors.is_empty() {
            return Err(Error::Data(format!("embedding table {origin} is empty")));
        }
        if duplicates > 0 {
            log::warn!("{origin}: {duplicates} duplicate tokens overwritten");
        }
        Ok(table)
    }

    /// Loads a table from disk; see [`EmbeddingTable::from_reader`].
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_reader(BufReader::new(file), expected_dim, &path.display().to_string())
    }

    /// Writes (token, vector) pairs in the given order. `load` of the result
    /// reproduces the same table.
    pub fn save(path: &Path, dim: usize, entries: &[(String, Vec<f64>)]) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        for (token, vector) in entries {
            if vector.len() != dim {
                return Err(Error::dimension(
                    "EmbeddingTable::save",
                    format!("vector for `{token}` has {} dims, expected {dim}", vector.len()),
                ));
            }
            write!(out, "{token}").map_err(|e| Error::io(path.display().to_string(), e))?;
            for v in vector {
                write!(out, " {v}").map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            writeln!(out).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        out.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// (token, vector) pairs in sorted token order, ready for `save`.
    pub fn sorted_entries(&self) -> Vec<(String, Vec<f64>)> {
        let mut entries: Vec<(String, Vec<f64>)> = self
            .vectors
            .iter()
            .map(|(token, vector)| (token.clone(), vector.clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The vector for `token`, counting the lookup. Misses return `None`.
    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        let hit = self.vectors.get(token);
        if hit.is_none() {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        hit.map(Vec::as_slice)
    }

    /// (lookups, misses) so far.
    pub fn stats(&self) -> (u64, u64) {
        (
            self.lookups.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
        )
    }

    /// The embedding of `token`, zero vector on a miss.
    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        self.lookup(token)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// Mean of the token embeddings. Out-of-vocabulary tokens contribute the
    /// zero vector but still count in the denominator; an empty phrase is the
    /// zero vector outright.
    pub fn embed_phrase<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        if tokens.is_empty() {
            return acc;
        }
        for token in tokens {
            if let Some(v) = self.lookup(token.as_ref()) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
        }
        let n = tokens.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        acc
    }
}

/// Cosine similarity; zero whenever either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// LSTM parameter names; gate order (input, forget, cell, output), packed.
pub const ENCODER_INPUT: &str = "encoder.input";
pub const ENCODER_HIDDEN: &str = "encoder.hidden";
pub const ENCODER_BIAS: &str = "encoder.bias";

/// Registers the encoder parameters on a fresh set.
pub fn register_encoder_params(params: &mut ParameterSet, dims: &ModelDims, seed: u64) -> Result<()> {
    let (h, e) = (dims.hidden_dim, dims.embed_dim);
    params.insert_glorot(ENCODER_INPUT, &[4 * h, e], seed)?;
    params.insert_glorot(ENCODER_HIDDEN, &[4 * h, h], seed)?;
    params.insert_zeros(ENCODER_BIAS, &[4 * h])?;
    Ok(())
}

/// Encoded question on the tape.
pub struct QuestionEncoding {
    /// Hidden state per position, `max_question_len` entries.
    pub hidden: Vec<Var>,
    /// The question representation used downstream.
    pub q: Var,
    /// Number of real (unpadded) tokens.
    pub length: usize,
}

/// Runs the LSTM over the embedded tokens. Questions longer than the limit
/// are truncated; shorter ones are padded with zero vectors. `readout` picks
/// which hidden state becomes `q`.
pub fn encode_question(
    tape: &mut Tape,
    params: &ParameterSet,
    table: &EmbeddingTable,
    tokens: &[String],
    dims: &ModelDims,
    readout: QuestionReadout,
) -> Result<QuestionEncoding> {
    if tokens.is_empty() {
        return Err(Error::domain("encode_question", "empty question"));
    }
    if table.dim() != dims.embed_dim {
        return Err(Error::dimension(
            "encode_question",
            format!("table dim {} vs embed_dim {}", table.dim(), dims.embed_dim),
        ));
    }
    let max_len = dims.max_question_len;
    let h = dims.hidden_dim;
    let length = tokens.len().min(max_len);

    let w_input = tape.param(params, ENCODER_INPUT)?;
    let w_hidden = tape.param(params, ENCODER_HIDDEN)?;
    let bias = tape.param(params, ENCODER_BIAS)?;

    let mut hidden = Vec::with_capacity(max_len);
    let mut h_t = tape.zeros(h)?;
    let mut c_t = tape.zeros(h)?;

    for pos in 0..max_len {
        let x = if pos < length {
            tape.input(Tensor::vector(table.embed_token(&tokens[pos])))?
        } else {
            tape.zeros(dims.embed_dim)?
        };
        let from_x = tape.matvec(w_input, x)?;
        let from_h = tape.matvec(w_hidden, h_t)?;
        let pre0 = tape.add(from_x, from_h)?;
        let pre = tape.add(pre0, bias)?;

        let i_gate = tape.slice(pre, 0, h)?;
        let i_gate = tape.sigmoid(i_gate)?;
        let f_gate = tape.slice(pre, h, h)?;
        let f_gate = tape.sigmoid(f_gate)?;
        let g_cell = tape.slice(pre, 2 * h, h)?;
        let g_cell = tape.tanh(g_cell)?;
        let o_gate = tape.slice(pre, 3 * h, h)?;
        let o_gate = tape.sigmoid(o_gate)?;

        let keep = tape.mul(f_gate, c_t)?;
        let write = tape.mul(i_gate, g_cell)?;
        c_t = tape.add(keep, write)?;
        let c_act = tape.tanh(c_t)?;
        h_t = tape.mul(o_gate, c_act)?;
        hidden.push(h_t);
    }

    let q = match readout {
        QuestionReadout::PaddedEnd => hidden[max_len - 1],
        QuestionReadout::LastToken => hidden[length - 1],
    };
    Ok(QuestionEncoding { hidden, q, length })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tokenizer_folds_case_and_punctuation() {
        assert_eq!(
            tokenize("What color is the Dog?"),
            vec!["what", "color", "is", "the", "dog"]
        );
        assert_eq!(tokenize("re-entry"), vec!["re", "entry"]);
        assert_eq!(tokenize("route 66!"), vec!["route", "66"]);
        assert!(tokenize("--- ?!").is_empty());
    }

    #[test]
    fn phrase_mean_counts_oov_in_denominator() {
        let table = EmbeddingTable::from_entries(
            2,
            vec![("cat".to_string(), vec![2.0, 4.0])],
        )
        .unwrap();
        // "cat" + OOV "unicorn": mean over 2 tokens.
        let v = table.embed_phrase(&["cat", "unicorn"]);
        assert_eq!(v, vec![1.0, 2.0]);
        // All OOV: zero vector.
        assert_eq!(table.embed_phrase(&["x", "y"]), vec![0.0, 0.0]);
        let (lookups, misses) = table.stats();
        assert_eq!(lookups, 4);
        assert_eq!(misses, 3);
    }

    #[test]
    fn table_roundtrip_and_duplicate_policy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        EmbeddingTable::save(
            &path,
            2,
            &[
                ("a".to_string(), vec![1.0, 2.0]),
                ("b".to_string(), vec![3.0, 4.0]),
                ("a".to_string(), vec![9.0, 9.0]),
            ],
        )
        .unwrap();
        let table = EmbeddingTable::load(&path, None).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.dim(), 2);
        // Last duplicate wins.
        assert_eq!(table.lookup("a").unwrap(), &[9.0, 9.0]);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "a 1.0 2.0\nb 3.0\n").unwrap();
        let err = EmbeddingTable::load(&path, None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }

        std::fs::write(&path, "a 1.0 oops\n").unwrap();
        assert!(matches!(
            EmbeddingTable::load(&path, None),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn cosine_zero_for_zero_vectors() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_relative_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_relative_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        assert_relative_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            embed_dim: 1,
            hidden_dim: 1,
            max_question_len: 3,
            ..ModelDims::default()
        }
    }

    #[test]
    fn lstm_zero_weights_give_zero_states() {
        let dims = tiny_dims();
        let mut params = ParameterSet::new();
        params.insert_zeros(ENCODER_INPUT, &[4, 1]).unwrap();
        params.insert_zeros(ENCODER_HIDDEN, &[4, 1]).unwrap();
        params.insert_zeros(ENCODER_BIAS, &[4]).unwrap();
        let table = EmbeddingTable::from_entries(1, vec![("x".to_string(), vec![1.0])]).unwrap();
        let mut tape = Tape::new();
        let enc = encode_question(
            &mut tape,
            &params,
            &table,
            &["x".to_string()],
            &dims,
            QuestionReadout::PaddedEnd,
        )
        .unwrap();
        // Cell input tanh(0) = 0 keeps the cell at zero forever.
        for hv in &enc.hidden {
            assert_eq!(tape.value(*hv).data(), &[0.0]);
        }
        assert_eq!(enc.length, 1);
    }

    #[test]
    fn lstm_single_step_matches_hand_computation() {
        // H = E = 1, all weights 1, no recurrent/bias contribution on step 1:
        // every gate sees pre-activation 1.0.
        let dims = ModelDims {
            max_question_len: 1,
            ..tiny_dims()
        };
        let mut params = ParameterSet::new();
        params.insert_constant(ENCODER_INPUT, &[4, 1], 1.0).unwrap();
        params.insert_zeros(ENCODER_HIDDEN, &[4, 1]).unwrap();
        params.insert_zeros(ENCODER_BIAS, &[4]).unwrap();
        let table = EmbeddingTable::from_entries(1, vec![("x".to_string(), vec![1.0])]).unwrap();
        let mut tape = Tape::new();
        let enc = encode_question(
            &mut tape,
            &params,
            &table,
            &["x".to_string()],
            &dims,
            QuestionReadout::PaddedEnd,
        )
        .unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c1 = sig(1.0) * 1.0f64.tanh();
        let h1 = sig(1.0) * c1.tanh();
        assert_relative_eq!(tape.value(enc.q).data()[0], h1, max_relative = 1e-12);
    }

    #[test]
    fn readout_choice_matters_only_under_padding() {
        let dims = ModelDims {
            embed_dim: 1,
            hidden_dim: 1,
            max_question_len: 4,
            ..ModelDims::default()
        };
        let mut params = ParameterSet::new();
        params.insert_glorot(ENCODER_INPUT, &[4, 1], 3).unwrap();
        params.insert_glorot(ENCODER_HIDDEN, &[4, 1], 3).unwrap();
        params.insert_zeros(ENCODER_BIAS, &[4]).unwrap();
        let table = EmbeddingTable::from_entries(1, vec![("x".to_string(), vec![0.8])]).unwrap();
        let tokens = vec!["x".to_string(), "x".to_string()];

        let mut tape = Tape::new();
        let padded = encode_question(&mut tape, &params, &table, &tokens, &dims, QuestionReadout::PaddedEnd).unwrap();
        let last = encode_question(&mut tape, &params, &table, &tokens, &dims, QuestionReadout::LastToken).unwrap();
        // Two real tokens, limit 4: the padded readout keeps evolving through
        // zero inputs, the last-token readout stops at position 2.
        assert_eq!(tape.value(last.q).data(), tape.value(last.hidden[1]).data());
        assert_ne!(tape.value(padded.q).data(), tape.value(last.q).data());
    }

    #[test]
    fn empty_question_rejected() {
        let dims = tiny_dims();
        let mut params = ParameterSet::new();
        register_encoder_params(&mut params, &dims, 0).unwrap();
        let table = EmbeddingTable::new(1);
        let mut tape = Tape::new();
        assert!(encode_question(&mut tape, &params, &table, &[], &dims, QuestionReadout::PaddedEnd).is_err());
    }
}
