//! Ranking a dataset with a trained model and summarizing the result.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EncodedDialog;
use crate::error::{Error, Result};
use crate::metrics::{loss_share_diagnostic, LossShare, MetricsReport, TurnRanking};
use crate::model::Model;
use crate::ranking::{fused_scores, order_by_score};
use crate::tensor::Scalar;

/// Temperatures the loss-share diagnostic is reported at.
pub const DIAGNOSTIC_TAUS: [f64; 2] = [1.0, 0.25];
pub const DIAGNOSTIC_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Primary,
    TwoStage,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primary" => Ok(Self::Primary),
            "two-stage" => Ok(Self::TwoStage),
            other => Err(Error::Config(format!("unknown mode `{other}` (primary | two-stage)"))),
        }
    }
}

/// One line of a scores file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnScores {
    pub dialog_id: String,
    pub turn: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub dialog_id: String,
    pub turn: usize,
    pub gt: usize,
    pub primary: Vec<f64>,
    pub selected: Vec<usize>,
    pub synergy: Vec<f64>,
    /// Final order, best first.
    pub ranking: Vec<usize>,
    /// Scores whose descending order is `ranking`.
    pub scores: Vec<f64>,
}

impl TurnResult {
    pub fn turn_scores(&self) -> TurnScores {
        TurnScores {
            dialog_id: self.dialog_id.clone(),
            turn: self.turn,
            scores: self.scores.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: EvalMode,
    pub metrics: MetricsReport,
    pub loss_share: Vec<LossShare>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub turns: Vec<TurnResult>,
}

fn score_dialog<T: Scalar>(model: &Model<T>, dialog: &EncodedDialog, mode: EvalMode) -> Result<Vec<TurnResult>> {
    let f = |xs: &[T]| xs.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    dialog
        .turns
        .iter()
        .enumerate()
        .map(|(t, turn)| {
            let s = model.score_turn(dialog, turn, mode == EvalMode::TwoStage)?;
            let primary = f(&s.primary);
            let synergy = f(&s.synergy);
            let scores = match mode {
                EvalMode::Primary => primary.clone(),
                EvalMode::TwoStage => fused_scores(&primary, &s.selected, &synergy),
            };
            Ok(TurnResult {
                dialog_id: dialog.dialog_id.clone(),
                turn: t,
                gt: turn.gt,
                primary,
                selected: s.selected,
                synergy,
                ranking: s.ranking,
                scores,
            })
        })
        .collect()
}

/// Scores every turn, sharding dialogs over the available cores. Results
/// keep dataset order, so reports do not depend on the thread count.
pub fn score_dataset<T: Scalar>(model: &Model<T>, data: &[EncodedDialog], mode: EvalMode) -> Result<Vec<TurnResult>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(data.len().max(1));
    let chunk = data.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<TurnResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|dialogs| {
                s.spawn(move || -> Result<Vec<TurnResult>> {
                    let mut out = Vec::new();
                    for d in dialogs {
                        out.extend(score_dialog(model, d, mode)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Non-gt margins `s_i − s_gt` of the given per-turn scores.
pub fn margins(turns: &[TurnResult]) -> Vec<f64> {
    turns
        .iter()
        .flat_map(|t| {
            let gt = t.primary[t.gt];
            t.primary
                .iter()
                .enumerate()
                .filter(move |&(i, _)| i != t.gt)
                .map(move |(_, &s)| s - gt)
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[EncodedDialog], mode: EvalMode) -> Result<Evaluation> {
    let turns = score_dataset(model, data, mode)?;
    let rankings = rankings_for(data, turns.iter().map(|t| t.ranking.clone()))?;
    let metrics = MetricsReport::from_turns(&rankings)?;
    let m = margins(&turns);
    let loss_share = DIAGNOSTIC_TAUS
        .iter()
        .map(|&tau| loss_share_diagnostic(&m, tau, DIAGNOSTIC_BINS))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report: Report {
            mode,
            metrics,
            loss_share,
        },
        turns,
    })
}

fn rankings_for(data: &[EncodedDialog], rankings: impl Iterator<Item = Vec<usize>>) -> Result<Vec<TurnRanking>> {
    let mut rankings = rankings;
    let mut out = Vec::new();
    for d in data {
        for t in &d.turns {
            let r = rankings
                .next()
                .ok_or_else(|| Error::Data("fewer rankings than turns".into()))?;
            out.push(TurnRanking::new(r, t.gt, Some(t.relevance.clone()))?);
        }
    }
    if rankings.next().is_some() {
        return Err(Error::Data("more rankings than turns".into()));
    }
    Ok(out)
}

/// Metrics of externally produced scores, matched to turns by
/// `(dialog_id, turn)`.
pub fn report_from_scores(data: &[EncodedDialog], scores: &[TurnScores]) -> Result<MetricsReport> {
    let index: std::collections::HashMap<(&str, usize), &TurnScores> =
        scores.iter().map(|s| ((s.dialog_id.as_str(), s.turn), s)).collect();
    let mut ordered = Vec::new();
    for d in data {
        for (t, turn) in d.turns.iter().enumerate() {
            let s = index
                .get(&(d.dialog_id.as_str(), t))
                .ok_or_else(|| Error::Data(format!("no scores for dialog {} turn {t}", d.dialog_id)))?;
            if s.scores.len() != turn.candidates.len() {
                return Err(Error::Data(format!(
                    "dialog {} turn {t}: {} scores for {} candidates",
                    d.dialog_id,
                    s.scores.len(),
                    turn.candidates.len()
                )));
            }
            ordered.push(order_by_score(&s.scores));
        }
    }
    MetricsReport::from_turns(&rankings_for(data, ordered.into_iter())?)
}

/// Sums score files line by line; every file must list the same turns in
/// the same order.
pub fn ensemble_files(files: &[Vec<TurnScores>]) -> Result<Vec<TurnScores>> {
    let first = files.first().ok_or_else(|| Error::Data("no score files".into()))?;
    if files.iter().any(|f| f.len() != first.len()) {
        return Err(Error::Data("score files list different numbers of turns".into()));
    }
    (0..first.len())
        .map(|i| {
            let key = (&first[i].dialog_id, first[i].turn);
            if files.iter().any(|f| (&f[i].dialog_id, f[i].turn) != key) {
                return Err(Error::Data(format!("score files disagree at line {}", i + 1)));
            }
            let vectors: Vec<Vec<f64>> = files.iter().map(|f| f[i].scores.clone()).collect();
            Ok(TurnScores {
                dialog_id: first[i].dialog_id.clone(),
                turn: first[i].turn,
                scores: crate::metrics::ensemble_scores(&vectors)?,
            })
        })
        .collect()
}
