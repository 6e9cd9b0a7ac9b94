//! Retrieval metrics, score ensembling and the margin loss-share diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::order_by_score;

/// One turn's submitted order, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnRanking {
    pub ranking: Vec<usize>,
    pub gt: usize,
    pub relevance: Option<Vec<f64>>,
}

impl TurnRanking {
    pub fn new(ranking: Vec<usize>, gt: usize, relevance: Option<Vec<f64>>) -> Result<Self> {
        let c = ranking.len();
        let mut seen = vec![false; c];
        for &i in &ranking {
            if i >= c || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Ranking(format!("ranking is not a permutation of 0..{c}")));
            }
        }
        if let Some(rel) = &relevance {
            if rel.len() != c {
                return Err(Error::Ranking(format!("{} relevances for {c} candidates", rel.len())));
            }
        }
        Ok(Self { ranking, gt, relevance })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankMetrics {
    pub rr: f64,
    pub hit1: f64,
    pub hit5: f64,
    pub hit10: f64,
    /// 1-based rank of the ground truth.
    pub rank: usize,
}

pub fn rank_metrics(turn: &TurnRanking) -> Result<RankMetrics> {
    let pos = turn
        .ranking
        .iter()
        .position(|&i| i == turn.gt)
        .ok_or(Error::GtAbsent(turn.gt))?;
    let rank = pos + 1;
    let hit = |k: usize| if rank <= k { 1.0 } else { 0.0 };
    Ok(RankMetrics {
        rr: 1.0 / rank as f64,
        hit1: hit(1),
        hit5: hit(5),
        hit10: hit(10),
        rank,
    })
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains
        .enumerate()
        .map(|(i, r)| r / ((i + 2) as f64).log2())
        .sum()
}

/// DCG over the top `k` positions, normalized by the ideal order, where
/// `k` is the number of candidates with positive relevance.
pub fn ndcg(turn: &TurnRanking) -> Result<f64> {
    let rel = turn.relevance.as_ref().ok_or(Error::MissingRelevance)?;
    let k = rel.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Ok(1.0);
    }
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let got = dcg(turn.ranking.iter().take(k).map(|&i| rel[i]));
    let best = dcg(ideal.into_iter().take(k));
    Ok(got / best)
}

/// Per-turn averages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndcg: f64,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
    pub turns: usize,
}

impl MetricsReport {
    /// Aggregates in the given order. Turns without relevance count as NDCG
    /// over a one-hot ground truth.
    pub fn from_turns(turns: &[TurnRanking]) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::Data("no turns to evaluate".into()));
        }
        let mut r = Self::default();
        for t in turns {
            let m = rank_metrics(t)?;
            let n = match &t.relevance {
                Some(_) => ndcg(t)?,
                None => {
                    let mut rel = vec![0.0; t.ranking.len()];
                    rel[t.gt] = 1.0;
                    ndcg(&TurnRanking {
                        relevance: Some(rel),
                        ..t.clone()
                    })?
                }
            };
            r.ndcg += n;
            r.mrr += m.rr;
            r.r1 += m.hit1;
            r.r5 += m.hit5;
            r.r10 += m.hit10;
            r.mean_rank += m.rank as f64;
        }
        let n = turns.len() as f64;
        r.ndcg /= n;
        r.mrr /= n;
        r.r1 /= n;
        r.r5 /= n;
        r.r10 /= n;
        r.mean_rank /= n;
        r.turns = turns.len();
        Ok(r)
    }
}

/// Elementwise sum of the models' score vectors.
pub fn ensemble_scores(models: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = models.first().ok_or(Error::EmptyAxis { op: "ensemble_scores" })?;
    let mut out = vec![0.0; first.len()];
    for s in models {
        if s.len() != out.len() {
            return Err(Error::ShapeMismatch {
                op: "ensemble_scores",
                left: vec![out.len()],
                right: vec![s.len()],
            });
        }
        for (o, x) in out.iter_mut().zip(s) {
            *o += x;
        }
    }
    Ok(out)
}

/// Ranking of summed scores with the standard tie-break.
pub fn ensemble_ranking(models: &[Vec<f64>]) -> Result<Vec<usize>> {
    Ok(order_by_score(&ensemble_scores(models)?))
}

/// Cumulative share of the tempered loss mass `Σ exp(margin/τ)` by margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossShare {
    pub tau: f64,
    /// Upper edge of each bin.
    pub edges: Vec<f64>,
    /// Share of the total mass at or below each edge; ends at 1.
    pub cumulative: Vec<f64>,
    /// Share contributed by negatives scored below the ground truth.
    pub easy_share: f64,
}

/// Bins non-gt margins `s_i − s_gt` into `bins` equal-width bins over their
/// range and accumulates their `exp(margin/τ)` mass.
pub fn loss_share_diagnostic(margins: &[f64], tau: f64, bins: usize) -> Result<LossShare> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidTemperature(tau));
    }
    if margins.is_empty() || bins == 0 {
        return Ok(LossShare {
            tau,
            edges: Vec::new(),
            cumulative: Vec::new(),
            easy_share: 0.0,
        });
    }
    let lo = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Shift by the largest exponent so the weights never overflow.
    let top = hi / tau;
    let weight = |m: f64| (m / tau - top).exp();
    let total: f64 = margins.iter().map(|&m| weight(m)).sum();
    let easy: f64 = margins.iter().filter(|&&m| m < 0.0).map(|&m| weight(m)).sum();

    let nbins = if hi > lo { bins } else { 1 };
    let width = (hi - lo) / nbins as f64;
    let mut mass = vec![0.0; nbins];
    for &m in margins {
        let b = if width > 0.0 {
            (((m - lo) / width) as usize).min(nbins - 1)
        } else {
            0
        };
        mass[b] += weight(m);
    }
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = mass
        .iter()
        .map(|w| {
            acc += w;
            acc / total
        })
        .collect();
    *cumulative.last_mut().expect("at least one bin") = 1.0;
    let edges = (1..=nbins)
        .map(|i| if i == nbins { hi } else { lo + width * i as f64 })
        .collect();
    Ok(LossShare {
        tau,
        edges,
        cumulative,
        easy_share: easy / total,
    })
}
