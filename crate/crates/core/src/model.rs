//! The full two-stage model: parameter layout, per-turn losses and scoring.

use rand::Rng;

use crate::config::{ModelKind, RunConfig};
use crate::data::{EncodedDialog, EncodedTurn};
use crate::error::{Error, Result};
use crate::generative::{answer_log_prob, initial_state, DecoderParams};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::ranking::{
    encode_answers, encode_context, encode_qa_pairs, fuse_rankings, one_hot, primary_score, select_candidates,
    synergistic_score, ContextParams, EncodedContext, ScoringHead, SelectMode, StageScores, SynergyParams,
};
use crate::tensor::Scalar;
use crate::text::{TextEncoders, Vocabulary};

/// Maps raw object features to the hidden size: `V = tanh(W F + b)`.
#[derive(Clone, Copy, Debug)]
pub struct ImageProjection {
    /// `[d × feature_dim]`
    pub w: ParamId,
    /// `[d]`
    pub b: ParamId,
}

/// Handles to every parameter group.
#[derive(Clone, Debug)]
pub struct Layout {
    pub text: TextEncoders,
    pub image: ImageProjection,
    pub context: ContextParams,
    pub head: Option<ScoringHead>,
    pub decoder: Option<DecoderParams>,
    pub synergy: SynergyParams,
}

impl Layout {
    fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &RunConfig,
        vocab_size: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s = cfg.init_scale;
        let (d, k, l) = (cfg.hidden, cfg.mfb_factors, cfg.mfb_hidden);
        let text = TextEncoders::register(store, vocab_size, cfg.emb_dim, d, s, rng)?;
        let image = ImageProjection {
            w: store.insert_uniform("image.w", &[d, feature_dim], s, rng),
            b: store.insert_uniform("image.b", &[d], s, rng),
        };
        let context = ContextParams::register(store, d, k, l, s, rng)?;
        let (head, decoder) = match cfg.model {
            ModelKind::Discriminative => (Some(ScoringHead::register(store, d, l, s, rng)), None),
            ModelKind::Generative => (
                None,
                Some(DecoderParams::register(store, vocab_size, cfg.emb_dim, d, l, k, l, s, rng)?),
            ),
        };
        let synergy = SynergyParams::register(store, d, k, l, s, rng)?;
        Ok(Self {
            text,
            image,
            context,
            head,
            decoder,
            synergy,
        })
    }
}

/// Which losses a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Primary stage only.
    Primary,
    /// Primary plus synergistic loss, unweighted.
    Joint,
}

/// Loss node and the value of each part.
#[derive(Clone, Copy, Debug)]
pub struct TurnLoss<T> {
    pub total: NodeId,
    pub primary: T,
    pub synergy: Option<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(config: RunConfig, vocab: Vocabulary, feature_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::register(&mut params, &config, vocab.len(), feature_dim, rng)?;
        Ok(Self {
            config,
            vocab,
            feature_dim,
            params,
            layout,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model
    }

    fn check_dialog(&self, dialog: &EncodedDialog) -> Result<()> {
        if dialog.feature_dim != self.feature_dim {
            return Err(Error::Data(format!(
                "dialog {} has feature width {}, model expects {}",
                dialog.dialog_id, dialog.feature_dim, self.feature_dim
            )));
        }
        let v = self.vocab.len();
        let oob = dialog.turns.iter().any(|t| {
            t.question.iter().chain(t.candidates.iter().flatten()).any(|&w| w >= v)
        });
        if oob {
            return Err(Error::Data(format!("dialog {} uses tokens outside the vocabulary", dialog.dialog_id)));
        }
        Ok(())
    }

    /// `V`, `[d × n]`.
    pub fn image(&self, g: &mut Graph<'_, T>, dialog: &EncodedDialog) -> Result<NodeId> {
        let f = g.constant(
            &[dialog.feature_dim, dialog.objects],
            dialog.features.iter().map(|&x| T::of(x)).collect(),
        )?;
        let w = g.param(self.layout.image.w);
        let b = g.param(self.layout.image.b);
        let v = g.matmul(w, f)?;
        let v = g.add_column(v, b)?;
        g.tanh(v)
    }

    pub fn context(&self, g: &mut Graph<'_, T>, dialog: &EncodedDialog, turn: &EncodedTurn) -> Result<EncodedContext> {
        let v = self.image(g, dialog)?;
        encode_context(g, &self.layout.text, &self.layout.context, &turn.question, &turn.history, v)
    }

    /// Log-probability of one candidate under the decoder.
    fn generative_score(&self, g: &mut Graph<'_, T>, ctx: &EncodedContext, answer: &[usize]) -> Result<NodeId> {
        let dec = self.layout.decoder.as_ref().expect("generative layout");
        let top = ctx.question_states.last().expect("question layers").h;
        let start = initial_state(g, top, dec.hidden);
        answer_log_prob(g, &self.layout.text.embedding, dec, start, ctx.embedding, answer)
    }

    /// Primary scores over every candidate, `[C]`.
    pub fn primary_scores(
        &self,
        g: &mut Graph<'_, T>,
        ctx: &EncodedContext,
        turn: &EncodedTurn,
    ) -> Result<NodeId> {
        match self.config.model {
            ModelKind::Discriminative => {
                let answers = encode_answers(g, &self.layout.text, &turn.candidates)?;
                primary_score(g, ctx.embedding, answers, self.layout.head.as_ref().expect("discriminative layout"))
            }
            ModelKind::Generative => {
                let scores = turn
                    .candidates
                    .iter()
                    .map(|a| self.generative_score(g, ctx, a))
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&scores)
            }
        }
    }

    /// Stage-two scores over `selected`, `[N]`.
    pub fn synergy_scores(
        &self,
        g: &mut Graph<'_, T>,
        ctx: &EncodedContext,
        turn: &EncodedTurn,
        selected: &[usize],
    ) -> Result<NodeId> {
        let answers: Vec<&[usize]> = selected.iter().map(|&i| turn.candidates[i].as_slice()).collect();
        let qa = encode_qa_pairs(g, &self.layout.text, &turn.question, &answers)?;
        synergistic_score(g, &self.layout.synergy, &qa, ctx.attended_history, ctx.image)
    }

    fn select_sizes(&self, candidates: usize) -> (usize, usize) {
        let m = self.config.select_m.min(candidates);
        (self.config.select_n.min(m), m)
    }

    /// Training loss for one turn.
    pub fn turn_loss<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        dialog: &EncodedDialog,
        turn: &EncodedTurn,
        phase: Phase,
        rng: &mut R,
    ) -> Result<TurnLoss<T>> {
        let ctx = self.context(g, dialog, turn)?;
        let tau = T::of(self.config.tau);
        // The generative loss only needs the ground truth; stage two needs
        // every primary score to pick its candidates.
        let (primary_loss, primary) = match (self.config.model, phase) {
            (ModelKind::Generative, Phase::Primary) => {
                let lp = self.generative_score(g, &ctx, &turn.candidates[turn.gt])?;
                (g.scale(lp, -T::one())?, None)
            }
            (ModelKind::Generative, Phase::Joint) => {
                let s = self.primary_scores(g, &ctx, turn)?;
                let lp = g.slice(s, turn.gt, 1)?;
                let lp = g.sum(lp)?;
                (g.scale(lp, -T::one())?, Some(s))
            }
            (ModelKind::Discriminative, _) => {
                let s = self.primary_scores(g, &ctx, turn)?;
                (g.npair_temperature_loss(s, turn.gt, tau)?, Some(s))
            }
        };
        let primary_value = g.scalar(primary_loss);
        if phase == Phase::Primary {
            return Ok(TurnLoss {
                total: primary_loss,
                primary: primary_value,
                synergy: None,
            });
        }
        let scores = g.value(primary.expect("joint phase scores all candidates")).to_vec();
        let (n, m) = self.select_sizes(scores.len());
        let selected = select_candidates(&scores, n, m, SelectMode::Train, Some(turn.gt), rng)?;
        let gt_pos = selected.iter().position(|&i| i == turn.gt).expect("gt is always selected");
        let s_r = self.synergy_scores(g, &ctx, turn, &selected)?;
        let l_r = g.softmax_cross_entropy(s_r, &one_hot::<T>(selected.len(), gt_pos))?;
        let synergy_value = g.scalar(l_r);
        let total = g.add(primary_loss, l_r)?;
        Ok(TurnLoss {
            total,
            primary: primary_value,
            synergy: Some(synergy_value),
        })
    }

    /// Test-time scores of both stages. With `two_stage` false the synergy
    /// fields are empty and the ranking is the primary order.
    pub fn score_turn(&self, dialog: &EncodedDialog, turn: &EncodedTurn, two_stage: bool) -> Result<StageScores<T>> {
        self.check_dialog(dialog)?;
        let mut g = Graph::with_params(&self.params);
        let ctx = self.context(&mut g, dialog, turn)?;
        let s = self.primary_scores(&mut g, &ctx, turn)?;
        let primary = g.value(s).to_vec();
        if !two_stage {
            let ranking = crate::ranking::order_by_score(&primary);
            return Ok(StageScores {
                primary,
                selected: Vec::new(),
                synergy: Vec::new(),
                ranking,
            });
        }
        let (n, m) = self.select_sizes(primary.len());
        // Test-mode selection is deterministic and never draws from the rng.
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let selected = select_candidates(&primary, n, m, SelectMode::Test, None, &mut unused)?;
        let s_r = self.synergy_scores(&mut g, &ctx, turn, &selected)?;
        let synergy = g.value(s_r).to_vec();
        let ranking = fuse_rankings(&primary, &selected, &synergy)?;
        Ok(StageScores {
            primary,
            selected,
            synergy,
            ranking,
        })
    }

    /// Question encoding and context vector for decoding, as plain values.
    pub fn decoder_inputs(&self, dialog: &EncodedDialog, turn: &EncodedTurn) -> Result<(Vec<T>, Vec<T>)> {
        self.check_dialog(dialog)?;
        let mut g = Graph::with_params(&self.params);
        let ctx = self.context(&mut g, dialog, turn)?;
        let top = ctx.question_states.last().expect("question layers").h;
        Ok((g.value(top).to_vec(), g.value(ctx.embedding).to_vec()))
    }
}
