//! Token vocabularies and the LSTM sequence encoders shared by the
//! location-prediction and navigation models.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{
    lstm_step, param, LstmWeights, ParamStore, ParamTensors, Tensor, TensorError, TensorResult,
};

/// Reserved id for unknown tokens.
pub const UNK_ID: usize = 0;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("vocabulary line {line} is empty")]
    EmptyVocabLine { line: usize },
    #[error("duplicate vocabulary token `{token}` at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Token list where the line/position number is the id; id 0 is the
/// unknown-token slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list. The first entry
    /// serves as the unknown token.
    pub fn new(tokens: Vec<String>) -> Result<Vocabulary, TextError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TextError::EmptyVocabLine { line: i + 1 });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(TextError::DuplicateToken {
                    token: t.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Parses the one-token-per-line vocabulary file format.
    pub fn parse(text: &str) -> Result<Vocabulary, TextError> {
        Vocabulary::new(text.lines().map(str::to_string).collect())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenization; unknown tokens map to [`UNK_ID`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }
}

/// A validated token-id sequence (non-empty, all ids in range).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<TokenSeq, TextError> {
        if ids.is_empty() {
            return Err(TextError::EmptySequence);
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(TextError::IdOutOfRange {
                id: bad,
                vocab: vocab_size,
            });
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn init_lstm_params(
    store: &mut ParamStore,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    bound: f64,
    rng: &mut impl Rng,
) -> Result<(), TensorError> {
    store.init_uniform(&format!("{prefix}.w_x"), &[4 * hidden, input_dim], bound, rng)?;
    store.init_uniform(&format!("{prefix}.w_h"), &[4 * hidden, hidden], bound, rng)?;
    store.init_uniform(&format!("{prefix}.bias"), &[4 * hidden], bound, rng)?;
    Ok(())
}

fn lstm_weights<'a>(
    params: &'a ParamTensors,
    prefix: &str,
) -> Result<LstmWeights<'a>, TensorError> {
    Ok(LstmWeights {
        w_x: param(params, &format!("{prefix}.w_x"))?,
        w_h: param(params, &format!("{prefix}.w_h"))?,
        bias: param(params, &format!("{prefix}.bias"))?,
    })
}

/// Runs an LSTM over embedded rows and returns the hidden state after each
/// position, in input order.
fn run_lstm(
    embedded: &Tensor,
    positions: impl Iterator<Item = usize>,
    weights: &LstmWeights<'_>,
    hidden: usize,
) -> Result<Vec<Tensor>, TensorError> {
    let tape = embedded.tape().clone();
    let mut h = tape.zeros(&[hidden]);
    let mut c = tape.zeros(&[hidden]);
    let mut states = Vec::new();
    for i in positions {
        let x = embedded.row(i)?;
        let (h_next, c_next) = lstm_step(&x, &h, &c, weights)?;
        h = h_next;
        c = c_next;
        states.push(h.clone());
    }
    Ok(states)
}

/// Bidirectional LSTM encoder whose output is the average of the
/// concatenated per-position forward/backward hidden states. The output
/// dimension is `2 × hidden`.
#[derive(Debug, Clone)]
pub struct BiLstmEncoder {
    prefix: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Per-direction hidden size.
    pub hidden: usize,
}

impl BiLstmEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<BiLstmEncoder, TensorError> {
        store.init_uniform(&format!("{prefix}.embed"), &[vocab_size, embed_dim], bound, rng)?;
        init_lstm_params(store, &format!("{prefix}.fwd"), embed_dim, hidden, bound, rng)?;
        init_lstm_params(store, &format!("{prefix}.bwd"), embed_dim, hidden, bound, rng)?;
        Ok(BiLstmEncoder {
            prefix: prefix.to_string(),
            vocab_size,
            embed_dim,
            hidden,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes a token sequence. `embed_dropout` is applied to the word
    /// embeddings only when both a probability and an RNG are supplied
    /// (training); pass `None` for evaluation.
    pub fn encode(
        &self,
        params: &ParamTensors,
        tokens: &TokenSeq,
        embed_dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> TensorResult {
        let table = param(params, &format!("{}.embed", self.prefix))?;
        let mut embedded = table.embedding_lookup(tokens.ids())?;
        if let Some((p, rng)) = embed_dropout {
            embedded = embedded.dropout(p, &mut *rng)?;
        }
        let l = tokens.len();
        let fwd = lstm_weights(params, &format!("{}.fwd", self.prefix))?;
        let bwd = lstm_weights(params, &format!("{}.bwd", self.prefix))?;
        let fwd_states = run_lstm(&embedded, 0..l, &fwd, self.hidden)?;
        let mut bwd_states = run_lstm(&embedded, (0..l).rev(), &bwd, self.hidden)?;
        bwd_states.reverse(); // align index i with position i
        let mut acc: Option<Tensor> = None;
        for i in 0..l {
            let joint = fwd_states[i].concat0(&bwd_states[i])?;
            acc = Some(match acc {
                Some(a) => a.add(&joint)?,
                None => joint,
            });
        }
        Ok(acc.expect("non-empty sequence").scale(1.0 / l as f64))
    }
}

/// Unidirectional LSTM encoder that returns the hidden state after the
/// final token.
#[derive(Debug, Clone)]
pub struct UniLstmEncoder {
    prefix: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl UniLstmEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<UniLstmEncoder, TensorError> {
        store.init_uniform(&format!("{prefix}.embed"), &[vocab_size, embed_dim], bound, rng)?;
        init_lstm_params(store, &format!("{prefix}.lstm"), embed_dim, hidden, bound, rng)?;
        Ok(UniLstmEncoder {
            prefix: prefix.to_string(),
            vocab_size,
            embed_dim,
            hidden,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.hidden
    }

    pub fn encode(&self, params: &ParamTensors, tokens: &TokenSeq) -> TensorResult {
        let table = param(params, &format!("{}.embed", self.prefix))?;
        let embedded = table.embedding_lookup(tokens.ids())?;
        let weights = lstm_weights(params, &format!("{}.lstm", self.prefix))?;
        let states = run_lstm(&embedded, 0..tokens.len(), &weights, self.hidden)?;
        Ok(states.last().expect("non-empty sequence").clone())
    }
}
