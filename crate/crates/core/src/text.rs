//! Vocabulary, token embedding and LSTM text encoders.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;

pub const SPECIALS: [&str; 4] = ["PAD", "UNK", "START", "END"];

pub const MAX_QUESTION_LEN: usize = 20;
pub const MAX_ANSWER_LEN: usize = 20;
pub const MAX_HISTORY_LEN: usize = 40;

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabularyFile", from = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    min_count: usize,
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens[SPECIALS.len()..].to_vec(),
            min_count: v.min_count,
        }
    }
}

impl From<VocabularyFile> for Vocabulary {
    fn from(f: VocabularyFile) -> Self {
        Self::from_tokens(f.tokens, f.min_count)
    }
}

impl Vocabulary {
    /// Keeps tokens seen strictly more than `min_count` times, ordered by
    /// descending frequency then lexicographically, after the four specials.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in corpus.iter().flatten() {
            let tok = tok.as_ref();
            if !SPECIALS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c > min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(
            kept.into_iter().map(|(t, _)| t.to_string()).collect(),
            min_count,
        ))
    }

    /// Vocabulary with the specials followed by `tokens` in the given order.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let all: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())))
            .collect();
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens: all,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.token(i).unwrap_or("UNK").to_string())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

/// What a token sequence represents; fixes the encoder depth and length cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TextRole {
    Question,
    /// The caption or a `(question, ground-truth answer)` pair from an earlier turn.
    HistoryItem,
    Answer,
    QaPair,
}

impl TextRole {
    pub fn layers(self) -> usize {
        match self {
            TextRole::Question | TextRole::HistoryItem => 2,
            TextRole::Answer | TextRole::QaPair => 1,
        }
    }

    /// Cap on the assembled sequence, START/END markers included.
    pub fn max_len(self) -> usize {
        match self {
            TextRole::Question => MAX_QUESTION_LEN,
            TextRole::HistoryItem => MAX_HISTORY_LEN,
            TextRole::Answer => MAX_ANSWER_LEN + 2,
            TextRole::QaPair => MAX_QUESTION_LEN + MAX_ANSWER_LEN + 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TextRole::Question => "question",
            TextRole::HistoryItem => "history",
            TextRole::Answer => "answer",
            TextRole::QaPair => "qa_pair",
        }
    }
}

fn capped(tokens: &[usize], cap: usize) -> &[usize] {
    &tokens[..tokens.len().min(cap)]
}

pub fn question_sequence(question: &[usize]) -> Vec<usize> {
    capped(question, MAX_QUESTION_LEN).to_vec()
}

pub fn caption_sequence(caption: &[usize]) -> Vec<usize> {
    capped(caption, MAX_HISTORY_LEN).to_vec()
}

/// Earlier turn as history: question followed by its ground-truth answer.
pub fn history_sequence(question: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut seq = capped(question, MAX_QUESTION_LEN).to_vec();
    seq.extend_from_slice(capped(answer, MAX_ANSWER_LEN));
    seq.truncate(MAX_HISTORY_LEN);
    seq
}

/// `START answer END`
pub fn answer_sequence(answer: &[usize]) -> Vec<usize> {
    let mut seq = vec![START];
    seq.extend_from_slice(capped(answer, MAX_ANSWER_LEN));
    seq.push(END);
    seq
}

/// `question START answer END`
pub fn qa_pair_sequence(question: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut seq = capped(question, MAX_QUESTION_LEN).to_vec();
    seq.extend(answer_sequence(answer));
    seq
}

/// `[vocab × emb_dim]` table shared by every text role.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable {
    pub id: ParamId,
}

impl EmbeddingTable {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        emb_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            id: store.insert_uniform(name, &[vocab_size, emb_dim], scale, rng),
        }
    }

    /// Rows of the table for `tokens`, as `[len × emb_dim]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: &[usize]) -> Result<NodeId> {
        let table = g.param(self.id);
        g.gather_rows(table, tokens)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    /// `[4d × (input + d)]`, gate blocks ordered input, forget, cell, output.
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub role: TextRole,
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(role: TextRole, layers: Vec<LstmLayer>, hidden: usize) -> Result<Self> {
        if layers.len() != role.layers() {
            return Err(Error::LayerCount {
                role: role.name(),
                expected: role.layers(),
                got: layers.len(),
            });
        }
        Ok(Self {
            role,
            layers,
            hidden,
        })
    }

    /// Registers `layers` layers under `prefix.l{i}.{w,b}` with
    /// `uniform(-scale, scale)` initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        role: TextRole,
        layers: usize,
        input_dim: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let inp = if i == 0 { input_dim } else { hidden };
                LstmLayer {
                    w: store.insert_uniform(
                        &format!("{prefix}.l{i}.w"),
                        &[4 * hidden, inp + hidden],
                        scale,
                        rng,
                    ),
                    b: store.insert_uniform(&format!("{prefix}.l{i}.b"), &[4 * hidden], scale, rng),
                    input_dim: inp,
                }
            })
            .collect();
        Self::new(role, layers, hidden)
    }
}

/// Hidden and cell state of one LSTM layer.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros<T: Scalar>(g: &mut Graph<'_, T>, hidden: usize) -> Self {
        Self {
            h: g.constant_vec(vec![T::zero(); hidden]),
            c: g.constant_vec(vec![T::zero(); hidden]),
        }
    }
}

/// One LSTM cell update.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: &LstmLayer,
    hidden: usize,
    x: NodeId,
    state: LstmState,
) -> Result<LstmState> {
    let w = g.param(layer.w);
    let b = g.param(layer.b);
    let xh = g.concat(&[x, state.h])?;
    let pre = g.matvec(w, xh)?;
    let gates = g.add(pre, b)?;
    let d = hidden;
    let i = g.slice(gates, 0, d)?;
    let f = g.slice(gates, d, d)?;
    let c_hat = g.slice(gates, 2 * d, d)?;
    let o = g.slice(gates, 3 * d, d)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let c_hat = g.tanh(c_hat)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Number of tokens before trailing padding.
pub fn true_length(tokens: &[usize]) -> usize {
    tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
}

/// Runs the stacked LSTM over `tokens` and returns the final state of every
/// layer. Trailing PAD positions are never fed.
pub fn run_lstm<T: Scalar>(
    g: &mut Graph<'_, T>,
    embedding: &EmbeddingTable,
    lstm: &LstmParams,
    tokens: &[usize],
) -> Result<Vec<LstmState>> {
    let len = true_length(tokens).min(lstm.role.max_len());
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let emb = embedding.embed(g, &tokens[..len])?;
    let emb_dim = g.shape(emb)[1];
    let mut states: Vec<LstmState> = (0..lstm.layers.len())
        .map(|_| LstmState::zeros(g, lstm.hidden))
        .collect();
    for t in 0..len {
        let mut x = g.slice(emb, t * emb_dim, emb_dim)?;
        for (layer, state) in lstm.layers.iter().zip(states.iter_mut()) {
            *state = lstm_step(g, layer, lstm.hidden, x, *state)?;
            x = state.h;
        }
    }
    Ok(states)
}

/// Last hidden state of the top layer, `[d]`.
pub fn encode_text<T: Scalar>(
    g: &mut Graph<'_, T>,
    embedding: &EmbeddingTable,
    lstm: &LstmParams,
    tokens: &[usize],
) -> Result<NodeId> {
    let states = run_lstm(g, embedding, lstm, tokens)?;
    Ok(states.last().expect("at least one layer").h)
}

/// The shared embedding table plus one LSTM per text role.
#[derive(Clone, Debug)]
pub struct TextEncoders {
    pub embedding: EmbeddingTable,
    pub question: LstmParams,
    pub history: LstmParams,
    pub answer: LstmParams,
    pub qa_pair: LstmParams,
}

impl TextEncoders {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        emb_dim: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = EmbeddingTable::register(store, "embedding", vocab_size, emb_dim, scale, rng);
        let mut lstm = |role: TextRole| {
            LstmParams::register(
                store,
                &format!("lstm.{}", role.name()),
                role,
                role.layers(),
                emb_dim,
                hidden,
                scale,
                rng,
            )
        };
        Ok(Self {
            question: lstm(TextRole::Question)?,
            history: lstm(TextRole::HistoryItem)?,
            answer: lstm(TextRole::Answer)?,
            qa_pair: lstm(TextRole::QaPair)?,
            embedding,
        })
    }

    pub fn for_role(&self, role: TextRole) -> &LstmParams {
        match role {
            TextRole::Question => &self.question,
            TextRole::HistoryItem => &self.history,
            TextRole::Answer => &self.answer,
            TextRole::QaPair => &self.qa_pair,
        }
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, role: TextRole, tokens: &[usize]) -> Result<NodeId> {
        encode_text(g, &self.embedding, self.for_role(role), tokens)
    }
}

/// Evaluates [`encode_text`] outside of any training graph.
pub fn encode_text_value<T: Scalar>(
    store: &ParamStore<T>,
    embedding: &EmbeddingTable,
    lstm: &LstmParams,
    tokens: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::with_params(store);
    let out = encode_text(&mut g, embedding, lstm, tokens)?;
    Ok(g.to_tensor(out))
}
