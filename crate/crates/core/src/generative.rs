//! Answer decoder: sequence log-probabilities as primary scores, and beam
//! search for generating candidates.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{mfb_fuse, MfbParams};
use crate::graph::{log_sum_exp, Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;
use crate::text::{lstm_step, EmbeddingTable, LstmLayer, LstmState, END, PAD, START, UNK};

#[derive(Clone, Copy, Debug)]
pub struct DecoderParams {
    pub lstm: LstmLayer,
    pub hidden: usize,
    /// Fuses the decoder state `h_j` with the context vector `e^p`.
    pub mfb: MfbParams,
    /// `[vocab × l]`
    pub out_w: ParamId,
    /// `[vocab]`
    pub out_b: ParamId,
    pub vocab: usize,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        vocab: usize,
        emb_dim: usize,
        hidden: usize,
        context_dim: usize,
        factors: usize,
        l: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let lstm = LstmLayer {
            w: store.insert_uniform("decoder.l0.w", &[4 * hidden, emb_dim + hidden], scale, rng),
            b: store.insert_uniform("decoder.l0.b", &[4 * hidden], scale, rng),
            input_dim: emb_dim,
        };
        let mfb = MfbParams::register(store, "mfb.decoder", hidden, context_dim, factors, l, scale, rng)?;
        Ok(Self {
            lstm,
            hidden,
            mfb,
            out_w: store.insert_uniform("f_g.w", &[vocab, l], scale, rng),
            out_b: store.insert_uniform("f_g.b", &[vocab], scale, rng),
            vocab,
        })
    }
}

/// Output of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    /// Unnormalized scores over the vocabulary.
    pub logits: NodeId,
    pub state: LstmState,
}

/// Feeds `prev` and returns the next-token logits and state.
pub fn decode_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    emb: &EmbeddingTable,
    dec: &DecoderParams,
    state: LstmState,
    prev: usize,
    context: NodeId,
) -> Result<Step> {
    let x = emb.embed(g, &[prev])?;
    let width = g.shape(x)[1];
    let x = g.reshape(x, &[width])?;
    let state = lstm_step(g, &dec.lstm, dec.hidden, x, state)?;
    let fused = mfb_fuse(g, state.h, context, &dec.mfb)?;
    let w = g.param(dec.out_w);
    let b = g.param(dec.out_b);
    let logits = g.matvec(w, fused)?;
    let logits = g.add(logits, b)?;
    Ok(Step { logits, state })
}

/// Decoder state before the first step: the question's hidden state and a
/// zero cell.
pub fn initial_state<T: Scalar>(g: &mut Graph<'_, T>, question_h: NodeId, hidden: usize) -> LstmState {
    let c = g.constant_vec(vec![T::zero(); hidden]);
    LstmState { h: question_h, c }
}

/// `log p(tokens)` where `tokens` is emitted verbatim after START; no END is
/// appended. Returns a scalar node so it can be trained through.
pub fn sequence_log_prob<T: Scalar>(
    g: &mut Graph<'_, T>,
    emb: &EmbeddingTable,
    dec: &DecoderParams,
    start: LstmState,
    context: NodeId,
    tokens: &[usize],
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut state = start;
    let mut prev = START;
    let mut nll = Vec::with_capacity(tokens.len());
    for &w in tokens {
        if w >= dec.vocab {
            return Err(Error::IndexOutOfRange {
                index: w,
                len: dec.vocab,
            });
        }
        let step = decode_step(g, emb, dec, state, prev, context)?;
        let mut label = vec![T::zero(); dec.vocab];
        label[w] = T::one();
        nll.push(g.softmax_cross_entropy(step.logits, &label)?);
        state = step.state;
        prev = w;
    }
    let all = g.concat(&nll)?;
    let total = g.sum(all)?;
    g.scale(total, -T::one())
}

/// `Σⱼ log p(wⱼ | w<ⱼ, e^p)` over `answer` followed by END.
pub fn answer_log_prob<T: Scalar>(
    g: &mut Graph<'_, T>,
    emb: &EmbeddingTable,
    dec: &DecoderParams,
    start: LstmState,
    context: NodeId,
    answer: &[usize],
) -> Result<NodeId> {
    if answer.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut tokens = answer.to_vec();
    tokens.push(END);
    sequence_log_prob(g, emb, dec, start, context, &tokens)
}

/// Tokens a decoder may emit.
pub fn emittable(vocab: usize) -> impl Iterator<Item = usize> {
    (0..vocab).filter(|&t| t != PAD && t != UNK && t != START)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<T> {
    /// Emitted tokens; ends with END when the hypothesis completed.
    pub tokens: Vec<usize>,
    pub log_prob: T,
}

impl<T: Scalar> Hypothesis<T> {
    pub fn is_complete(&self) -> bool {
        self.tokens.last() == Some(&END)
    }

    /// Tokens without the trailing END.
    pub fn answer(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&END, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Higher log-probability first, ties by lexicographic token order.
pub fn rank_hypotheses<T: Scalar>(a: &Hypothesis<T>, b: &Hypothesis<T>) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search of width `width` for at most `max_len` emitted tokens
/// (END included). Each round extends every partial sequence by every
/// emittable token and keeps the best `width` extensions; those ending in
/// END move to the complete list. Partials still alive after `max_len`
/// rounds are counted as complete.
pub fn beam_search<T: Scalar>(
    store: &ParamStore<T>,
    emb: &EmbeddingTable,
    dec: &DecoderParams,
    question_h: &[T],
    context: &[T],
    width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis<T>>> {
    if width == 0 || max_len == 0 {
        return Err(Error::Config("beam width and max length must be positive".into()));
    }
    let mut g = Graph::with_params(store);
    let ctx = g.constant_vec(context.to_vec());
    let h0 = g.constant_vec(question_h.to_vec());
    let start = initial_state(&mut g, h0, dec.hidden);

    struct Live<T> {
        hyp: Hypothesis<T>,
        state: LstmState,
    }
    let mut partial = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: T::zero(),
        },
        state: start,
    }];
    let mut complete: Vec<Hypothesis<T>> = Vec::new();

    for _ in 0..max_len {
        if partial.is_empty() {
            break;
        }
        let mut expansions: Vec<(Hypothesis<T>, usize)> = Vec::new();
        let mut states = Vec::with_capacity(partial.len());
        for (i, live) in partial.iter().enumerate() {
            let prev = live.hyp.tokens.last().copied().unwrap_or(START);
            let step = decode_step(&mut g, emb, dec, live.state, prev, ctx)?;
            let logits = g.value(step.logits);
            let lse = log_sum_exp(logits);
            for t in emittable(dec.vocab) {
                let mut tokens = live.hyp.tokens.clone();
                tokens.push(t);
                expansions.push((
                    Hypothesis {
                        tokens,
                        log_prob: live.hyp.log_prob + (logits[t] - lse),
                    },
                    i,
                ));
            }
            states.push(step.state);
        }
        expansions.sort_by(|a, b| rank_hypotheses(&a.0, &b.0));
        expansions.truncate(width);
        partial = Vec::new();
        for (hyp, parent) in expansions {
            if hyp.is_complete() {
                complete.push(hyp);
            } else {
                partial.push(Live {
                    hyp,
                    state: states[parent],
                });
            }
        }
    }
    complete.extend(partial.into_iter().map(|l| l.hyp));
    complete.sort_by(rank_hypotheses);
    complete.truncate(width);
    Ok(complete)
}
