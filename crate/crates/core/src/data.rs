//! Synthetic dialogs over small object scenes, and their JSON-lines format.
//!
//! Each scene has a few objects of distinct kinds, each with a color and a
//! count. Questions ask for a color, a count or whether a kind is present;
//! some follow-ups say "it" / "them" and can only be resolved through the
//! previous turn. Every answer exists in a short form (`red`) and a
//! descriptive form (`the cube is red`). The question wording decides which
//! one is the ground truth; the other form is a partially relevant synonym.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SyntheticConfig;
use crate::error::{Error, Result};
use crate::text::{history_sequence, Vocabulary};

pub const KINDS: [&str; 8] = ["cube", "ball", "cone", "ring", "box", "star", "disk", "cup"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "white"];
pub const NUMBERS: [&str; 4] = ["one", "two", "three", "four"];

/// Feature slots used by the attribute one-hots; the rest carry only noise.
pub const ENCODED_FEATURES: usize = KINDS.len() + COLORS.len() + NUMBERS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: usize,
    pub color: usize,
    /// 1-based.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn find(&self, kind: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.kind == kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub question: Vec<String>,
    pub candidates: Vec<Vec<String>>,
    pub gt_index: usize,
    pub relevance: Vec<f64>,
    /// The ground-truth answer, equal to `candidates[gt_index]`.
    pub answer: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogRecord {
    pub dialog_id: String,
    /// One row of features per object.
    pub object_features: Vec<Vec<f64>>,
    pub caption: Vec<String>,
    pub turns: Vec<DialogTurn>,
}

impl DialogRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("dialog {}: {msg}", self.dialog_id)));
        let Some(first) = self.object_features.first() else {
            return bad("no object features".into());
        };
        if first.is_empty() || self.object_features.iter().any(|r| r.len() != first.len()) {
            return bad("object feature rows differ in width".into());
        }
        if self.object_features.iter().flatten().any(|x| !x.is_finite()) {
            return bad("non-finite object feature".into());
        }
        if self.caption.is_empty() {
            return bad("empty caption".into());
        }
        for (t, turn) in self.turns.iter().enumerate() {
            let c = turn.candidates.len();
            if c < 2 {
                return bad(format!("turn {t} has {c} candidates"));
            }
            if turn.gt_index >= c {
                return bad(format!("turn {t} gt_index {} out of range", turn.gt_index));
            }
            if turn.relevance.len() != c {
                return bad(format!("turn {t} relevance length {}", turn.relevance.len()));
            }
            if turn.relevance.iter().any(|r| !(0.0..=1.0).contains(r)) || turn.relevance[turn.gt_index] <= 0.0 {
                return bad(format!("turn {t} relevance out of range"));
            }
            if turn.question.is_empty() || turn.candidates.iter().any(|a| a.is_empty()) {
                return bad(format!("turn {t} has an empty question or candidate"));
            }
            if turn.answer != turn.candidates[turn.gt_index] {
                return bad(format!("turn {t} answer differs from the ground-truth candidate"));
            }
        }
        Ok(())
    }
}

/// A record together with the scene it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDialog {
    pub record: DialogRecord,
    pub scene: Scene,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ask {
    Color,
    Count,
    Exists,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn plural(kind: usize) -> String {
    match KINDS[kind] {
        "box" => "boxes".into(),
        k => format!("{k}s"),
    }
}

fn question_text(ask: Ask, kind: usize, pronoun: bool, descriptive: bool) -> String {
    let k = KINDS[kind];
    let ks = plural(kind);
    match (ask, pronoun, descriptive) {
        (Ask::Color, false, false) => format!("what color is the {k} ?"),
        (Ask::Color, false, true) => format!("tell me what color the {k} is"),
        (Ask::Color, true, false) => "what color is it ?".into(),
        (Ask::Color, true, true) => "tell me what color it is".into(),
        (Ask::Count, false, false) => format!("how many {ks} are there ?"),
        (Ask::Count, false, true) => format!("tell me how many {ks} there are"),
        (Ask::Count, true, false) => "how many of them are there ?".into(),
        (Ask::Count, true, true) => "tell me how many of them there are".into(),
        (Ask::Exists, _, false) => format!("is there a {k} ?"),
        (Ask::Exists, _, true) => format!("tell me if there is a {k}"),
    }
}

/// Short and descriptive forms of an answer about `kind`. `value` is a
/// color index, a count or 0/1 for absence/presence.
fn answer_forms(ask: Ask, kind: usize, value: usize) -> (String, String) {
    let k = KINDS[kind];
    match ask {
        Ask::Color => (COLORS[value].into(), format!("the {k} is {}", COLORS[value])),
        Ask::Count if value == 1 => ("one".into(), format!("there is one {k}")),
        Ask::Count => (NUMBERS[value - 1].into(), format!("there are {} {}", NUMBERS[value - 1], plural(kind))),
        Ask::Exists if value == 1 => ("yes".into(), format!("yes there is a {k}")),
        Ask::Exists => ("no".into(), format!("no there is no {k}")),
    }
}

fn value_range(ask: Ask) -> std::ops::Range<usize> {
    match ask {
        Ask::Color => 0..COLORS.len(),
        Ask::Count => 1..NUMBERS.len() + 1,
        Ask::Exists => 0..2,
    }
}

fn true_value(scene: &Scene, ask: Ask, kind: usize) -> usize {
    match (ask, scene.find(kind)) {
        (Ask::Color, Some(o)) => o.color,
        (Ask::Count, Some(o)) => o.count,
        (Ask::Exists, o) => o.is_some() as usize,
        _ => unreachable!("color and count questions only ask about present kinds"),
    }
}

fn check_config(cfg: &SyntheticConfig) -> Result<()> {
    let fail = |m: String| Err(Error::Config(m));
    if cfg.objects == 0 || cfg.objects > KINDS.len() {
        return fail(format!("data.objects must be in 1..={}", KINDS.len()));
    }
    if cfg.feature_dim < ENCODED_FEATURES {
        return fail(format!("data.feature_dim must be at least {ENCODED_FEATURES}"));
    }
    if cfg.candidates < 2 {
        return fail("data.candidates must be at least 2".into());
    }
    if cfg.dialogs == 0 || cfg.turns == 0 {
        return fail("data.dialogs and data.turns must be positive".into());
    }
    for (name, v) in [
        ("pronoun_fraction", cfg.pronoun_fraction),
        ("descriptive_fraction", cfg.descriptive_fraction),
        ("synonym_relevance", cfg.synonym_relevance),
        ("feature_noise", cfg.feature_noise),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return fail(format!("data.{name} must be in [0, 1]"));
        }
    }
    Ok(())
}

fn gen_scene(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Scene {
    let mut kinds: Vec<usize> = (0..KINDS.len()).collect();
    kinds.shuffle(rng);
    Scene {
        objects: kinds[..cfg.objects]
            .iter()
            .map(|&kind| SceneObject {
                kind,
                color: rng.gen_range(0..COLORS.len()),
                count: rng.gen_range(1..=NUMBERS.len()),
            })
            .collect(),
    }
}

fn features(scene: &Scene, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    scene
        .objects
        .iter()
        .map(|o| {
            let mut row = vec![0.0; cfg.feature_dim];
            row[o.kind] = 1.0;
            row[KINDS.len() + o.color] = 1.0;
            row[KINDS.len() + COLORS.len() + o.count - 1] = 1.0;
            if cfg.feature_noise > 0.0 {
                for x in &mut row {
                    *x += rng.gen_range(-cfg.feature_noise..=cfg.feature_noise);
                }
            }
            row
        })
        .collect()
}

fn caption(scene: &Scene) -> String {
    let named: Vec<&str> = scene.objects.iter().take(2).map(|o| KINDS[o.kind]).collect();
    match named.as_slice() {
        [a] => format!("a picture with a {a}"),
        [a, b, ..] => format!("a picture with a {a} and a {b} among other things"),
        [] => unreachable!(),
    }
}

fn gen_turn(
    cfg: &SyntheticConfig,
    scene: &Scene,
    previous: Option<(Ask, usize, bool)>,
    rng: &mut ChaCha8Rng,
) -> (DialogTurn, (Ask, usize, bool)) {
    // Pronouns only follow a question that named its kind outright.
    let pronoun =
        matches!(previous, Some((Ask::Color | Ask::Count, _, false))) && rng.gen_bool(cfg.pronoun_fraction);
    let (ask, kind) = if pronoun {
        let kind = previous.expect("pronoun needs a referent").1;
        let ask = if rng.gen_bool(0.5) { Ask::Color } else { Ask::Count };
        (ask, kind)
    } else {
        match rng.gen_range(0..3) {
            0 => (Ask::Color, scene.objects.choose(rng).expect("objects").kind),
            1 => (Ask::Count, scene.objects.choose(rng).expect("objects").kind),
            _ => (Ask::Exists, rng.gen_range(0..KINDS.len())),
        }
    };
    let descriptive = rng.gen_bool(cfg.descriptive_fraction);
    let question = question_text(ask, kind, pronoun, descriptive);

    let value = true_value(scene, ask, kind);
    let (short, long) = answer_forms(ask, kind, value);
    let (gt, synonym) = if descriptive { (long, short) } else { (short, long) };

    // Hard distractors: the same question answered with a wrong value, or
    // the right value attached to another kind.
    let mut hard = Vec::new();
    for v in value_range(ask).filter(|&v| v != value) {
        let (s, l) = answer_forms(ask, kind, v);
        hard.push(s);
        hard.push(l);
    }
    if ask != Ask::Exists {
        for other in (0..KINDS.len()).filter(|&k| k != kind) {
            hard.push(answer_forms(ask, other, value).1);
        }
    }
    hard.shuffle(rng);

    let mut pool = vec![gt.clone()];
    let with_synonym = cfg.candidates >= 3;
    if with_synonym {
        pool.push(synonym.clone());
    }
    let slots = cfg.candidates - pool.len();
    let hard_slots = slots.div_ceil(2);
    for a in hard {
        if pool.len() - (1 + with_synonym as usize) >= hard_slots {
            break;
        }
        if !pool.contains(&a) {
            pool.push(a);
        }
    }
    // Easy distractors: answers to unrelated questions.
    while pool.len() < cfg.candidates {
        let other = match rng.gen_range(0..3) {
            0 => Ask::Color,
            1 => Ask::Count,
            _ => Ask::Exists,
        };
        if other == ask {
            continue;
        }
        let k = rng.gen_range(0..KINDS.len());
        let r = value_range(other);
        let v = rng.gen_range(r);
        let (s, l) = answer_forms(other, k, v);
        let a = if rng.gen_bool(0.5) { s } else { l };
        if !pool.contains(&a) {
            pool.push(a);
        }
    }
    pool.shuffle(rng);
    let gt_index = pool.iter().position(|a| *a == gt).expect("gt in pool");
    let relevance = pool
        .iter()
        .map(|a| {
            if *a == gt {
                1.0
            } else if *a == synonym {
                cfg.synonym_relevance
            } else {
                0.0
            }
        })
        .collect();
    let turn = DialogTurn {
        question: words(&question),
        candidates: pool.iter().map(|a| words(a)).collect(),
        gt_index,
        relevance,
        answer: words(&gt),
    };
    (turn, (ask, kind, pronoun))
}

/// Deterministic in `(cfg, seed)`.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<SyntheticDialog>> {
    check_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.dialogs);
    for d in 0..cfg.dialogs {
        let scene = gen_scene(cfg, &mut rng);
        let object_features = features(&scene, cfg, &mut rng);
        let mut turns = Vec::with_capacity(cfg.turns);
        let mut previous = None;
        for _ in 0..cfg.turns {
            let (turn, asked) = gen_turn(cfg, &scene, previous, &mut rng);
            previous = Some(asked);
            turns.push(turn);
        }
        out.push(SyntheticDialog {
            record: DialogRecord {
                dialog_id: format!("{seed}-{d}"),
                object_features,
                caption: words(&caption(&scene)),
                turns,
            },
            scene,
        });
    }
    Ok(out)
}

pub fn generate_records(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<DialogRecord>> {
    Ok(generate(cfg, seed)?.into_iter().map(|d| d.record).collect())
}

pub fn write_jsonl<W: Write, S: Serialize>(mut out: W, items: &[S]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead, D: serde::de::DeserializeOwned>(input: R) -> Result<Vec<D>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DialogRecord>> {
    let records: Vec<DialogRecord> = read_jsonl(input)?;
    if records.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Token sequences the vocabulary is counted over: captions, questions and
/// ground-truth answers.
pub fn vocab_corpus(records: &[DialogRecord]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for r in records {
        out.push(r.caption.clone());
        for t in &r.turns {
            out.push(t.question.clone());
            out.push(t.answer.clone());
        }
    }
    out
}

/// A turn with tokens mapped through a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTurn {
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt: usize,
    pub relevance: Vec<f64>,
    /// `H₀ = caption`, then one question-plus-answer item per earlier turn.
    pub history: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDialog {
    pub dialog_id: String,
    /// `[feature_dim × n]`, one column per object, row-major.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub objects: usize,
    pub turns: Vec<EncodedTurn>,
}

pub fn encode_dialog(record: &DialogRecord, vocab: &Vocabulary) -> Result<EncodedDialog> {
    record.validate()?;
    let n = record.object_features.len();
    let f = record.object_features[0].len();
    let mut features = vec![0.0; f * n];
    for (j, row) in record.object_features.iter().enumerate() {
        for (i, &x) in row.iter().enumerate() {
            features[i * n + j] = x;
        }
    }
    let caption = vocab.encode(&record.caption);
    let mut history = vec![caption];
    let mut turns = Vec::with_capacity(record.turns.len());
    for t in &record.turns {
        let question = vocab.encode(&t.question);
        let answer = vocab.encode(&t.answer);
        turns.push(EncodedTurn {
            question: question.clone(),
            candidates: t.candidates.iter().map(|a| vocab.encode(a)).collect(),
            gt: t.gt_index,
            relevance: t.relevance.clone(),
            history: history.clone(),
        });
        history.push(history_sequence(&question, &answer));
    }
    Ok(EncodedDialog {
        dialog_id: record.dialog_id.clone(),
        features,
        feature_dim: f,
        objects: n,
        turns,
    })
}

pub fn encode_dataset(records: &[DialogRecord], vocab: &Vocabulary) -> Result<Vec<EncodedDialog>> {
    records.iter().map(|r| encode_dialog(r, vocab)).collect()
}
