//! Primary scoring, candidate selection and synergistic re-ranking.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{attend, mfb_fuse, mfb_fuse_multi, AttentionParams, MfbParams};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;
use crate::text::{answer_sequence, qa_pair_sequence, LstmState, TextEncoders, TextRole};

/// Fusion and attention parameters of the shared context encoder.
#[derive(Clone, Copy, Debug)]
pub struct ContextParams {
    /// Question × history, feeding history attention.
    pub history_mfb: MfbParams,
    pub history_att: AttentionParams,
    /// `[question : attended history]` × objects, feeding image attention.
    pub image_mfb: MfbParams,
    pub image_att: AttentionParams,
    /// `[question : attended history]` × attended image → `e^p`.
    pub embed_mfb: MfbParams,
}

impl ContextParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        hidden: usize,
        factors: usize,
        l: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = hidden;
        Ok(Self {
            history_mfb: MfbParams::register(store, "mfb.history", d, d, factors, l, scale, rng)?,
            history_att: AttentionParams::register(store, "att.history", l, scale, rng),
            image_mfb: MfbParams::register(store, "mfb.image", 2 * d, d, factors, l, scale, rng)?,
            image_att: AttentionParams::register(store, "att.image", l, scale, rng),
            embed_mfb: MfbParams::register(store, "mfb.embed", 2 * d, d, factors, l, scale, rng)?,
        })
    }
}

/// Every intermediate of the context encoder for one turn.
#[derive(Clone, Debug)]
pub struct EncodedContext {
    /// `m^q_t`, `[d]`.
    pub question: NodeId,
    /// Final state of each question LSTM layer (the top one seeds the decoder).
    pub question_states: Vec<LstmState>,
    /// `U`, one column per history item, `[d × t]`.
    pub history: NodeId,
    pub history_weights: NodeId,
    /// `m^h_t`, `[d]`.
    pub attended_history: NodeId,
    /// `V`, one column per object, `[d × n]`.
    pub image: NodeId,
    pub image_weights: NodeId,
    /// `m^v_t`, `[d]`.
    pub attended_image: NodeId,
    /// `e^p_t`, `[l]`.
    pub embedding: NodeId,
}

/// Question/history/image encoding for one turn. `history` holds assembled
/// history sequences, caption first; `image` is `V`.
pub fn encode_context<T: Scalar>(
    g: &mut Graph<'_, T>,
    text: &TextEncoders,
    params: &ContextParams,
    question: &[usize],
    history: &[Vec<usize>],
    image: NodeId,
) -> Result<EncodedContext> {
    if history.is_empty() {
        return Err(Error::Data("history must contain at least the caption".into()));
    }
    let question_states = crate::text::run_lstm(g, &text.embedding, &text.question, question)?;
    let m_q = question_states.last().expect("question LSTM has layers").h;
    let items = history
        .iter()
        .map(|h| text.encode(g, TextRole::HistoryItem, h))
        .collect::<Result<Vec<_>>>()?;
    let u = g.stack_columns(&items)?;

    let z_h = mfb_fuse_multi(g, m_q, u, &params.history_mfb)?;
    let hist = attend(g, z_h, u, &params.history_att)?;

    let query = g.concat(&[m_q, hist.vector])?;
    let z_v = mfb_fuse_multi(g, query, image, &params.image_mfb)?;
    let img = attend(g, z_v, image, &params.image_att)?;
    let e_p = mfb_fuse(g, query, img.vector, &params.embed_mfb)?;

    Ok(EncodedContext {
        question: m_q,
        question_states,
        history: u,
        history_weights: hist.weights,
        attended_history: hist.vector,
        image,
        image_weights: img.weights,
        attended_image: img.vector,
        embedding: e_p,
    })
}

/// `f_d`: one tanh layer projecting answer encodings into the `e^p` space.
#[derive(Clone, Copy, Debug)]
pub struct ScoringHead {
    /// `[l × d]`
    pub w: ParamId,
    /// `[l]`
    pub b: ParamId,
}

impl ScoringHead {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        hidden: usize,
        l: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.insert_uniform("f_d.w", &[l, hidden], scale, rng),
            b: store.insert_uniform("f_d.b", &[l], scale, rng),
        }
    }
}

/// Encodes each candidate (with START/END markers) as a column of `[d × C]`.
pub fn encode_answers<T: Scalar>(
    g: &mut Graph<'_, T>,
    text: &TextEncoders,
    candidates: &[Vec<usize>],
) -> Result<NodeId> {
    let cols = candidates
        .iter()
        .map(|a| text.encode(g, TextRole::Answer, &answer_sequence(a)))
        .collect::<Result<Vec<_>>>()?;
    g.stack_columns(&cols)
}

/// Dot-similarity scores `s^d_i = e^pᵀ tanh(W m^a_i + b)`, `[C]`.
pub fn primary_score<T: Scalar>(
    g: &mut Graph<'_, T>,
    embedding: NodeId,
    answers: NodeId,
    head: &ScoringHead,
) -> Result<NodeId> {
    let w = g.param(head.w);
    let b = g.param(head.b);
    let proj = g.matmul(w, answers)?;
    let proj = g.add_column(proj, b)?;
    let proj = g.tanh(proj)?;
    primary_score_projected(g, embedding, proj)
}

/// `e^pᵀ · P` for already projected answers `P = f_d(m^a)`, `[l × C]`.
pub fn primary_score_projected<T: Scalar>(
    g: &mut Graph<'_, T>,
    embedding: NodeId,
    projected: NodeId,
) -> Result<NodeId> {
    let l = g.shape(embedding)[0];
    let cols = g.shape(projected).get(1).copied().unwrap_or(1);
    let row = g.reshape(embedding, &[1, l])?;
    let s = g.matmul(row, projected)?;
    g.reshape(s, &[cols])
}

/// Value of the tempered N-pair loss `log Σᵢ exp((sᵢ − s_gt)/τ)`.
pub fn npair_temperature_loss<T: Scalar>(scores: &[T], gt: usize, tau: T) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant_vec(scores.to_vec());
    let loss = g.npair_temperature_loss(s, gt, tau)?;
    Ok(g.scalar(loss))
}

/// Value of `−Σ yⱼ log softmax(s)ⱼ`.
pub fn synergy_cross_entropy<T: Scalar>(scores: &[T], labels: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant_vec(scores.to_vec());
    let loss = g.softmax_cross_entropy(s, labels)?;
    Ok(g.scalar(loss))
}

/// One-hot label vector.
pub fn one_hot<T: Scalar>(len: usize, index: usize) -> Vec<T> {
    let mut y = vec![T::zero(); len];
    y[index] = T::one();
    y
}

/// Candidate indices by descending score, ties broken by ascending index.
pub fn order_by_score<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    /// Top N by primary score.
    Test,
    /// Ground truth plus N−1 drawn uniformly from the rest of the top M.
    Train,
}

/// Picks the stage-two candidate set `B_t`, returned in primary-score order.
pub fn select_candidates<T: Scalar, R: Rng>(
    scores: &[T],
    n: usize,
    m: usize,
    mode: SelectMode,
    gt: Option<usize>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 || n > m {
        return Err(Error::Selection(format!("need 1 <= N <= M, got N={n} M={m}")));
    }
    if m > scores.len() {
        return Err(Error::Selection(format!(
            "M={m} exceeds the {} candidates",
            scores.len()
        )));
    }
    let order = order_by_score(scores);
    match mode {
        SelectMode::Test => Ok(order[..n].to_vec()),
        SelectMode::Train => {
            let gt = gt.ok_or_else(|| Error::Selection("training selection needs the ground truth".into()))?;
            if gt >= scores.len() {
                return Err(Error::IndexOutOfRange {
                    index: gt,
                    len: scores.len(),
                });
            }
            let pool: Vec<usize> = order[..m].iter().copied().filter(|&i| i != gt).collect();
            let mut chosen: BTreeSet<usize> = pool.choose_multiple(rng, n - 1).copied().collect();
            chosen.insert(gt);
            Ok(order.into_iter().filter(|i| chosen.contains(i)).collect())
        }
    }
}

/// Stage-two parameters: per-candidate image attention, fusion and the
/// linear scorer `f_r`.
#[derive(Clone, Copy, Debug)]
pub struct SynergyParams {
    pub att_mfb: MfbParams,
    pub att: AttentionParams,
    pub embed_mfb: MfbParams,
    /// `[l]`
    pub out_w: ParamId,
    /// `[1]`
    pub out_b: ParamId,
}

impl SynergyParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        hidden: usize,
        factors: usize,
        l: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = hidden;
        Ok(Self {
            att_mfb: MfbParams::register(store, "mfb.synergy_image", 2 * d, d, factors, l, scale, rng)?,
            att: AttentionParams::register(store, "att.synergy_image", l, scale, rng),
            embed_mfb: MfbParams::register(store, "mfb.synergy_embed", 2 * d, d, factors, l, scale, rng)?,
            out_w: store.insert_uniform("f_r.w", &[l], scale, rng),
            out_b: store.insert_uniform("f_r.b", &[1], scale, rng),
        })
    }
}

/// `m^b_j` for each selected answer: the question followed by the answer.
pub fn encode_qa_pairs<T: Scalar>(
    g: &mut Graph<'_, T>,
    text: &TextEncoders,
    question: &[usize],
    answers: &[&[usize]],
) -> Result<Vec<NodeId>> {
    answers
        .iter()
        .map(|a| text.encode(g, TextRole::QaPair, &qa_pair_sequence(question, a)))
        .collect()
}

/// Stage-two scores `[N]`. Each QA encoding forms its own query
/// `[m^b_j : m^h_t]`, attends `image` with it, and is fused and scored.
pub fn synergistic_score<T: Scalar>(
    g: &mut Graph<'_, T>,
    params: &SynergyParams,
    qa_encodings: &[NodeId],
    attended_history: NodeId,
    image: NodeId,
) -> Result<NodeId> {
    let w = g.param(params.out_w);
    let b = g.param(params.out_b);
    let mut scores = Vec::with_capacity(qa_encodings.len());
    for &m_b in qa_encodings {
        let query = g.concat(&[m_b, attended_history])?;
        let z = mfb_fuse_multi(g, query, image, &params.att_mfb)?;
        let att = attend(g, z, image, &params.att)?;
        let e_r = mfb_fuse(g, query, att.vector, &params.embed_mfb)?;
        let s = g.dot(w, e_r)?;
        scores.push(g.add(s, b)?);
    }
    if scores.is_empty() {
        return Err(Error::EmptyAxis {
            op: "synergistic_score",
        });
    }
    g.concat(&scores)
}

/// Final order over all candidates: the selected ones by synergy score,
/// then the rest by primary score.
pub fn fuse_rankings<T: Scalar>(primary: &[T], selected: &[usize], synergy: &[T]) -> Result<Vec<usize>> {
    if selected.len() != synergy.len() {
        return Err(Error::Ranking(format!(
            "{} selected candidates but {} synergy scores",
            selected.len(),
            synergy.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for &i in selected {
        if i >= primary.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: primary.len(),
            });
        }
        if !seen.insert(i) {
            return Err(Error::Ranking(format!("candidate {i} selected twice")));
        }
    }
    let mut head: Vec<usize> = (0..selected.len()).collect();
    head.sort_by(|&a, &b| {
        synergy[b]
            .partial_cmp(&synergy[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(selected[a].cmp(&selected[b]))
    });
    let mut ranking: Vec<usize> = head.into_iter().map(|j| selected[j]).collect();
    ranking.extend(order_by_score(primary).into_iter().filter(|i| !seen.contains(i)));
    Ok(ranking)
}

/// A score vector over all candidates whose [`order_by_score`] equals
/// [`fuse_rankings`]: selected candidates are lifted above the best primary
/// score, offset by their synergy score.
pub fn fused_scores<T: Scalar>(primary: &[T], selected: &[usize], synergy: &[T]) -> Vec<T> {
    let mut out = primary.to_vec();
    let top = primary.iter().copied().fold(T::neg_infinity(), T::max);
    let low = synergy.iter().copied().fold(T::infinity(), T::min);
    for (&i, &s) in selected.iter().zip(synergy) {
        out[i] = top + T::one() + (s - low);
    }
    out
}

/// Scores and rankings of both stages for one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct StageScores<T> {
    /// `s^d` (or `s^g`) over all candidates.
    pub primary: Vec<T>,
    /// `B_t`, candidate indices in primary order.
    pub selected: Vec<usize>,
    /// `s^r`, aligned with `selected`.
    pub synergy: Vec<T>,
    /// Fused final ranking over all candidates.
    pub ranking: Vec<usize>,
}

impl<T: Scalar> StageScores<T> {
    pub fn primary_ranking(&self) -> Vec<usize> {
        order_by_score(&self.primary)
    }
}
