//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so each criterion prints exactly one PASS/FAIL line.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synergy_core::config::{ModelKind, RunConfig, SyntheticConfig};
use synergy_core::data::{encode_dataset, generate_records, vocab_corpus, EncodedDialog};
use synergy_core::eval::{evaluate, report_from_scores, EvalMode, TurnScores};
use synergy_core::fusion::{attend, mfb_fuse, mfb_fuse_multi, AttentionParams, MfbParams, NORM_EPS};
use synergy_core::generative::{beam_search, decode_step, initial_state, sequence_log_prob, DecoderParams, Hypothesis};
use synergy_core::gradcheck::{check_params, FiniteDiff};
use synergy_core::metrics::{ensemble_scores, ndcg, TurnRanking};
use synergy_core::ranking::{npair_temperature_loss, synergy_cross_entropy};
use synergy_core::text::{lstm_step, EmbeddingTable, LstmParams, LstmState, TextRole, Vocabulary, END, PAD, START, UNK};
use synergy_core::train::{Checkpoint, Trainer};
use synergy_core::{Graph, NodeId, ParamStore, Result};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("closed-form losses", closed_form_losses),
        ("ndcg oracle", ndcg_oracle),
        ("beam exactness", beam_exactness),
        ("probability mass", probability_mass),
        ("overfit", overfit),
        ("easy-negative share", easy_negative_share),
        ("two-stage over primary (discriminative)", discriminative_two_stage),
        ("two-stage over primary (generative)", generative_two_stage),
        ("determinism and persistence", determinism),
        ("ensemble sanity", ensemble_sanity),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = check();
        println!(
            "criterion {n:>2} {name}: {} ({detail}; {:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ── 1 ───────────────────────────────────────────────────────────────────

/// `Σ w ∘ node` with fixed random weights, so every output entry matters.
fn probe(g: &mut Graph<'_, f64>, node: NodeId, weights: &[f64]) -> Result<NodeId> {
    let w = g.constant(g.shape(node).to_vec().as_slice(), weights.to_vec())?;
    let prod = g.mul(node, w)?;
    g.sum(prod)
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn gradient_case(op: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f64>::new();
    // A smaller step than the default keeps the stencil clear of the
    // |z|^0.5 kink when a fused entry lands within ~1e-5 of zero.
    let fd = FiniteDiff {
        step: 1e-6,
        ..FiniteDiff::four_point()
    };
    let report = match op {
        "matmul" => {
            let a = s.insert_uniform("a", &[3, 4], 1.0, &mut rng);
            let b = s.insert_uniform("b", &[4, 2], 1.0, &mut rng);
            let w = weights(&mut rng, 6);
            check_params(&s, |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.matmul(a, b)?;
                probe(g, y, &w)
            }, fd)?
        }
        "softmax" => {
            let x = s.insert_uniform("x", &[3, 4], 2.0, &mut rng);
            let (w0, w1) = (weights(&mut rng, 12), weights(&mut rng, 12));
            check_params(&s, |g| {
                let x = g.param(x);
                let (a, b) = (g.softmax(x, 0)?, g.softmax(x, 1)?);
                let (pa, pb) = (probe(g, a, &w0)?, probe(g, b, &w1)?);
                g.add(pa, pb)
            }, fd)?
        }
        "normalize_power_l2" => {
            let v = s.insert_uniform("v", &[5], 1.0, &mut rng);
            let m = s.insert_uniform("m", &[4, 3], 1.0, &mut rng);
            let (wv, wm) = (weights(&mut rng, 5), weights(&mut rng, 12));
            check_params(&s, |g| {
                let (v, m) = (g.param(v), g.param(m));
                let a = g.normalize_power_l2(v, 0, NORM_EPS)?;
                let b = g.normalize_power_l2(m, 0, NORM_EPS)?;
                let (pa, pb) = (probe(g, a, &wv)?, probe(g, b, &wm)?);
                g.add(pa, pb)
            }, fd)?
        }
        "lstm_step" => {
            let lstm = LstmParams::register(&mut s, "lstm", TextRole::Answer, 1, 3, 4, 0.5, &mut rng)?;
            let x = s.insert_uniform("x", &[3], 1.0, &mut rng);
            let h = s.insert_uniform("h", &[4], 1.0, &mut rng);
            let c = s.insert_uniform("c", &[4], 1.0, &mut rng);
            let (wh, wc) = (weights(&mut rng, 4), weights(&mut rng, 4));
            let layer = lstm.layers[0];
            check_params(&s, |g| {
                let state = LstmState { h: g.param(h), c: g.param(c) };
                let x = g.param(x);
                let next = lstm_step(g, &layer, 4, x, state)?;
                let (ph, pc) = (probe(g, next.h, &wh)?, probe(g, next.c, &wc)?);
                g.add(ph, pc)
            }, fd)?
        }
        "mfb_fuse" => {
            let p = MfbParams::register(&mut s, "mfb", 3, 4, 2, 3, 0.5, &mut rng)?;
            let x = s.insert_uniform("x", &[3], 1.0, &mut rng);
            let y = s.insert_uniform("y", &[4], 1.0, &mut rng);
            let w = weights(&mut rng, 3);
            check_params(&s, |g| {
                let (x, y) = (g.param(x), g.param(y));
                let z = mfb_fuse(g, x, y, &p)?;
                probe(g, z, &w)
            }, fd)?
        }
        "mfb_fuse_multi" => {
            let p = MfbParams::register(&mut s, "mfb", 3, 4, 2, 3, 0.5, &mut rng)?;
            let x = s.insert_uniform("x", &[3], 1.0, &mut rng);
            let y = s.insert_uniform("y", &[4, 5], 1.0, &mut rng);
            let w = weights(&mut rng, 15);
            check_params(&s, |g| {
                let (x, y) = (g.param(x), g.param(y));
                let z = mfb_fuse_multi(g, x, y, &p)?;
                probe(g, z, &w)
            }, fd)?
        }
        "attend" => {
            let p = AttentionParams::register(&mut s, "att", 3, 1.0, &mut rng);
            let z = s.insert_uniform("z", &[3, 5], 1.0, &mut rng);
            let f = s.insert_uniform("f", &[4, 5], 1.0, &mut rng);
            let (wa, wm) = (weights(&mut rng, 5), weights(&mut rng, 4));
            check_params(&s, |g| {
                let (z, f) = (g.param(z), g.param(f));
                let a = attend(g, z, f, &p)?;
                let (pa, pm) = (probe(g, a.weights, &wa)?, probe(g, a.vector, &wm)?);
                g.add(pa, pm)
            }, fd)?
        }
        "npair_temperature_loss" => {
            let x = s.insert_uniform("s", &[6], 2.0, &mut rng);
            let gt = rng.gen_range(0..6);
            let tau = rng.gen_range(0.2..1.5);
            check_params(&s, |g| {
                let x = g.param(x);
                g.npair_temperature_loss(x, gt, tau)
            }, fd)?
        }
        "synergy_cross_entropy" => {
            let x = s.insert_uniform("s", &[6], 2.0, &mut rng);
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let labels: Vec<f64> = raw.iter().map(|r| r / total).collect();
            check_params(&s, |g| {
                let x = g.param(x);
                g.softmax_cross_entropy(x, &labels)
            }, fd)?
        }
        "decode_step" => {
            let emb = EmbeddingTable::register(&mut s, "emb", 6, 3, 0.5, &mut rng);
            let dec = DecoderParams::register(&mut s, 6, 3, 4, 4, 2, 3, 0.5, &mut rng)?;
            let h = s.insert_uniform("h", &[4], 1.0, &mut rng);
            let c = s.insert_uniform("c", &[4], 1.0, &mut rng);
            let ctx = s.insert_uniform("ctx", &[4], 1.0, &mut rng);
            let prev = rng.gen_range(0..6);
            let (wl, wh, wc) = (weights(&mut rng, 6), weights(&mut rng, 4), weights(&mut rng, 4));
            check_params(&s, |g| {
                let state = LstmState { h: g.param(h), c: g.param(c) };
                let ctx = g.param(ctx);
                let step = decode_step(g, &emb, &dec, state, prev, ctx)?;
                let pl = probe(g, step.logits, &wl)?;
                let ph = probe(g, step.state.h, &wh)?;
                let pc = probe(g, step.state.c, &wc)?;
                let t = g.add(pl, ph)?;
                g.add(t, pc)
            }, fd)?
        }
        other => panic!("unknown op {other}"),
    };
    Ok(report.max_rel_error)
}

fn gradient_suite() -> Outcome {
    const OPS: [&str; 10] = [
        "matmul",
        "softmax",
        "normalize_power_l2",
        "lstm_step",
        "mfb_fuse",
        "mfb_fuse_multi",
        "attend",
        "npair_temperature_loss",
        "synergy_cross_entropy",
        "decode_step",
    ];
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for op in OPS {
        for seed in 0..100 {
            match gradient_case(op, seed) {
                Ok(e) if e > worst.0 => worst = (e, format!("{op} seed {seed}")),
                Ok(_) => {}
                Err(e) => return (false, format!("{op} seed {seed}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst.0 < 1e-4 && secs < 60.0,
        format!("10 ops x 100 seeds, max rel error {:.2e} at {}, {secs:.1}s", worst.0, worst.1),
    )
}

// ── 2 ───────────────────────────────────────────────────────────────────

fn closed_form_losses() -> Outcome {
    let e = std::f64::consts::E;
    let s = [2.0, 1.0, 0.0];
    let mut errs = Vec::new();
    let cases = [
        (npair_temperature_loss(&s, 0, 1.0).unwrap(), (1.0 + e.powi(-1) + e.powi(-2)).ln()),
        (npair_temperature_loss(&s, 0, 0.25).unwrap(), (1.0 + e.powi(-4) + e.powi(-8)).ln()),
        (npair_temperature_loss(&[0.3; 3], 1, 0.7).unwrap(), 3f64.ln()),
        (synergy_cross_entropy(&[0.0; 10], &one_hot(10, 4)).unwrap(), 10f64.ln()),
        (synergy_cross_entropy(&[1.0, 1.0], &[0.5, 0.5]).unwrap(), 2f64.ln()),
    ];
    for (got, want) in cases {
        errs.push((got - want).abs());
    }
    // The literal values quoted alongside the formulas.
    let quoted = [(cases[0].0, 0.40761, 5e-6), (cases[1].0, 0.01848, 5e-6)];
    let quoted_ok = quoted.iter().all(|&(got, lit, tol)| (got - lit).abs() < tol);
    let max_err = errs.iter().copied().fold(0.0, f64::max);

    // Contribution of a margin −1 to the loss mass, from the loss itself:
    // L([0, −1]) = log(1 + e^{−1/τ}), so e^L − 1 isolates that term.
    let contribution = |tau: f64| npair_temperature_loss(&[0.0, -1.0], 0, tau).unwrap().exp_m1();
    let ratio = contribution(1.0) / contribution(0.25);
    let ratio_err = (ratio - e.powi(3)).abs() / e.powi(3);
    (
        max_err < 1e-9 && ratio_err < 1e-6 && quoted_ok && (ratio - 20.1).abs() < 0.05,
        format!("max abs error {max_err:.1e}, ratio {ratio:.4} (rel error {ratio_err:.1e})"),
    )
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
}

// ── 3 ───────────────────────────────────────────────────────────────────

/// Direct evaluation: DCG over the first k submitted positions, divided by
/// the DCG of relevances sorted descending; k counts positive relevances.
fn ndcg_direct(relevance: &[f64], ranking: &[usize]) -> f64 {
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return 1.0;
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = (0..k).map(|i| relevance[ranking[i]] * discount(i)).sum();
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = (0..k).map(|i| ideal[i] * discount(i)).sum();
    dcg / idcg
}

fn random_relevance(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    // Few distinct levels so ties are common.
    let levels = [0.0, 0.0, 0.25, 0.5, 1.0];
    let mut rel: Vec<f64> = (0..c).map(|_| *levels.choose(rng).unwrap()).collect();
    let gt = rng.gen_range(0..c);
    rel[gt] = 1.0;
    rel
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn ndcg_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_err = 0.0f64;
    for _ in 0..200 {
        let c = rng.gen_range(1..=20);
        let rel = random_relevance(&mut rng, c);
        let mut ranking: Vec<usize> = (0..c).collect();
        ranking.shuffle(&mut rng);
        let gt = rel.iter().position(|&r| r == 1.0).unwrap();
        let got = ndcg(&TurnRanking::new(ranking.clone(), gt, Some(rel.clone())).unwrap()).unwrap();
        max_err = max_err.max((got - ndcg_direct(&rel, &ranking)).abs());
    }

    // Every ranking with the same sequence of relevances must score the same.
    let mut groups_checked = 0;
    let mut max_spread = 0.0f64;
    for c in 1..=6 {
        for _ in 0..10 {
            let rel = random_relevance(&mut rng, c);
            let gt = rel.iter().position(|&r| r == 1.0).unwrap();
            let mut by_pattern: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
            for perm in permutations(c) {
                let pattern = perm.iter().map(|&i| rel[i].to_bits()).collect();
                let v = ndcg(&TurnRanking::new(perm, gt, Some(rel.clone())).unwrap()).unwrap();
                by_pattern.entry(pattern).or_default().push(v);
            }
            for values in by_pattern.values() {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max_spread = max_spread.max(hi - lo);
                groups_checked += 1;
            }
        }
    }
    (
        max_err < 1e-12 && max_spread == 0.0,
        format!("200 cases max error {max_err:.1e}; {groups_checked} tie classes, max spread {max_spread:.1e}"),
    )
}

// ── 4, 5 ────────────────────────────────────────────────────────────────

struct TinyDecoder {
    store: ParamStore<f64>,
    emb: EmbeddingTable,
    dec: DecoderParams,
    question_h: Vec<f64>,
    context: Vec<f64>,
}

impl TinyDecoder {
    fn new(seed: u64, vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = EmbeddingTable::register(&mut store, "emb", vocab, 3, 1.0, &mut rng);
        let dec = DecoderParams::register(&mut store, vocab, 3, 4, 4, 2, 3, 1.5, &mut rng).unwrap();
        let question_h = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let context = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            store,
            emb,
            dec,
            question_h,
            context,
        }
    }

    fn emittable(&self) -> Vec<usize> {
        (0..self.dec.vocab).filter(|&t| t != PAD && t != UNK && t != START).collect()
    }

    /// Next-token log-probabilities after feeding `prefix`.
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut g = Graph::with_params(&self.store);
        let ctx = g.constant_vec(self.context.clone());
        let h0 = g.constant_vec(self.question_h.clone());
        let mut state = initial_state(&mut g, h0, self.dec.hidden);
        let mut prev = START;
        let mut logits = None;
        for &w in prefix.iter().chain(std::iter::once(&usize::MAX)) {
            let step = decode_step(&mut g, &self.emb, &self.dec, state, prev, ctx).unwrap();
            state = step.state;
            logits = Some(g.value(step.logits).to_vec());
            prev = w;
        }
        let z = logits.unwrap();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    fn log_prob(&self, tokens: &[usize]) -> f64 {
        (0..tokens.len()).map(|i| self.next_log_probs(&tokens[..i])[tokens[i]]).sum()
    }

    /// Every sequence beam search can return: END-terminated within
    /// `max_len` tokens, or `max_len` tokens without END.
    fn universe(&self, max_len: usize) -> Vec<Hypothesis<f64>> {
        let words: Vec<usize> = self.emittable().into_iter().filter(|&t| t != END).collect();
        let mut out = Vec::new();
        let mut prefixes = vec![Vec::new()];
        for len in 0..max_len {
            let mut next = Vec::new();
            for p in &prefixes {
                let mut done = p.clone();
                done.push(END);
                out.push(done);
                if len + 1 == max_len {
                    for &w in &words {
                        let mut q = p.clone();
                        q.push(w);
                        out.push(q);
                    }
                } else {
                    for &w in &words {
                        let mut q = p.clone();
                        q.push(w);
                        next.push(q);
                    }
                }
            }
            prefixes = next;
        }
        let mut hyps: Vec<Hypothesis<f64>> = out
            .into_iter()
            .map(|tokens| Hypothesis {
                log_prob: self.log_prob(&tokens),
                tokens,
            })
            .collect();
        hyps.sort_by(order);
        hyps
    }

    fn greedy(&self, max_len: usize) -> Vec<usize> {
        let allowed = self.emittable();
        let mut tokens = Vec::new();
        while tokens.len() < max_len {
            let lp = self.next_log_probs(&tokens);
            let mut best = allowed[0];
            for &t in &allowed {
                if lp[t] > lp[best] {
                    best = t;
                }
            }
            tokens.push(best);
            if best == END {
                break;
            }
        }
        tokens
    }

    fn beam(&self, width: usize, max_len: usize) -> Vec<Hypothesis<f64>> {
        beam_search(&self.store, &self.emb, &self.dec, &self.question_h, &self.context, width, max_len).unwrap()
    }
}

fn order(a: &Hypothesis<f64>, b: &Hypothesis<f64>) -> Ordering {
    b.log_prob.partial_cmp(&a.log_prob).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
}

fn beam_exactness() -> Outcome {
    let mut failures = Vec::new();
    let mut cases = 0;
    for seed in 0..20u64 {
        for (vocab, max_len) in [(7, 4), (6, 4), (7, 3), (5, 4)] {
            cases += 1;
            let m = TinyDecoder::new(seed, vocab);
            let exhaustive = m.universe(max_len);
            let emit = m.emittable().len();

            let wide = m.beam(emit.pow(max_len as u32), max_len);
            let same = wide.len() == exhaustive.len()
                && wide
                    .iter()
                    .zip(&exhaustive)
                    .all(|(a, b)| a.tokens == b.tokens && (a.log_prob - b.log_prob).abs() < 1e-12);
            if !same {
                failures.push(format!("seed {seed} vocab {vocab}: wide beam differs"));
            }

            let greedy = m.greedy(max_len);
            let b1 = m.beam(1, max_len);
            if b1.len() != 1 || b1[0].tokens != greedy {
                failures.push(format!("seed {seed} vocab {vocab}: B=1 is not greedy"));
            }

            for width in [1, 2, 5] {
                let got = m.beam(width, max_len);
                let positions: Vec<Option<usize>> =
                    got.iter().map(|h| exhaustive.iter().position(|e| e.tokens == h.tokens)).collect();
                let scored = got.iter().zip(&positions).all(|(h, p)| {
                    p.is_some_and(|p| (exhaustive[p].log_prob - h.log_prob).abs() < 1e-12)
                });
                let increasing = positions.windows(2).all(|w| w[0] < w[1]);
                if !scored || !increasing || got.is_empty() {
                    failures.push(format!("seed {seed} vocab {vocab} B={width}: not consistent with exhaustive order"));
                }
            }
        }
    }
    (
        failures.is_empty(),
        match failures.first() {
            None => format!("{cases} decoders, exhaustive, greedy and B in {{1,2,5}} agree"),
            Some(f) => format!("{} failures, first: {f}", failures.len()),
        },
    )
}

fn probability_mass() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let m = TinyDecoder::new(seed, 7);
        let words: Vec<usize> = m.emittable().into_iter().filter(|&t| t != END).collect();
        let mut answers: Vec<Vec<usize>> = vec![Vec::new()];
        let mut frontier = vec![Vec::new()];
        for _ in 0..3 {
            frontier = frontier
                .iter()
                .flat_map(|p: &Vec<usize>| {
                    words.iter().map(move |&w| {
                        let mut q = p.clone();
                        q.push(w);
                        q
                    })
                })
                .collect();
            answers.extend(frontier.iter().cloned());
        }
        let mut total = 0.0;
        for a in &answers {
            let mut tokens = a.clone();
            tokens.push(END);
            let mut g = Graph::with_params(&m.store);
            let ctx = g.constant_vec(m.context.clone());
            let h0 = g.constant_vec(m.question_h.clone());
            let start = initial_state(&mut g, h0, m.dec.hidden);
            let lp = sequence_log_prob(&mut g, &m.emb, &m.dec, start, ctx, &tokens).unwrap();
            total += g.scalar(lp).exp();
        }
        worst = worst.max(total);
    }
    (worst <= 1.0 + 1e-9, format!("largest total mass over 20 decoders {worst:.12}"))
}

// ── 6–11: training runs ─────────────────────────────────────────────────

struct Split {
    vocab: Vocabulary,
    train: Vec<EncodedDialog>,
    val: Vec<EncodedDialog>,
}

fn split(data: &SyntheticConfig, seed: u64, val_dialogs: usize) -> Split {
    let records = generate_records(data, seed).unwrap();
    let vocab = Vocabulary::build(&vocab_corpus(&records), 4).unwrap();
    let val_cfg = SyntheticConfig {
        dialogs: val_dialogs,
        ..data.clone()
    };
    let val_records = generate_records(&val_cfg, seed + 7919).unwrap();
    Split {
        train: encode_dataset(&records, &vocab).unwrap(),
        val: encode_dataset(&val_records, &vocab).unwrap(),
        vocab,
    }
}

fn synthetic(dialogs: usize, candidates: usize) -> SyntheticConfig {
    SyntheticConfig {
        dialogs,
        candidates,
        objects: 4,
        ..SyntheticConfig::default()
    }
}

fn run_config(model: ModelKind, data: SyntheticConfig, primary: usize, joint: usize, seed: u64) -> RunConfig {
    RunConfig {
        model,
        hidden: 32,
        lr: 3e-3,
        decay_every: 1000,
        primary_epochs: primary,
        joint_epochs: joint,
        select_n: 10.min(data.candidates / 2),
        select_m: data.candidates,
        seed,
        data,
        ..RunConfig::default()
    }
}

fn trained(cfg: RunConfig, split: &Split) -> Trainer<f64> {
    let mut t = Trainer::new(cfg, split.vocab.clone(), split.train[0].feature_dim).unwrap();
    t.train(&split.train, |_, _| Ok(())).unwrap();
    t
}

fn overfit() -> Outcome {
    let data = synthetic(32, 8);
    let split = split(&data, 600, 1);
    let cfg = RunConfig {
        select_n: 4,
        select_m: 8,
        ..run_config(ModelKind::Discriminative, data, 40, 260, 6)
    };
    let start = Instant::now();
    let mut t = Trainer::<f64>::new(cfg.clone(), split.vocab.clone(), split.train[0].feature_dim).unwrap();
    let mut reached = None;
    let mut last = (0.0, 0.0);
    while t.epoch < cfg.total_epochs() {
        t.run_epoch(&split.train).unwrap();
        if t.epoch > cfg.primary_epochs && t.epoch.is_multiple_of(5) {
            let m = evaluate(&t.model, &split.train, EvalMode::TwoStage).unwrap().report.metrics;
            last = (m.r1, m.mrr);
            if m.r1 >= 0.95 && m.mrr >= 0.97 {
                reached = Some(t.epoch);
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    match reached {
        Some(epoch) => (
            secs < 600.0,
            format!("two-stage train R@1 {:.3}, MRR {:.3} after {epoch} epochs, {secs:.0}s", last.0, last.1),
        ),
        None => (false, format!("after 300 epochs R@1 {:.3}, MRR {:.3}", last.0, last.1)),
    }
}

fn easy_negative_share() -> Outcome {
    let data = synthetic(32, 20);
    let split = split(&data, 700, 32);
    let t = trained(run_config(ModelKind::Discriminative, data, 40, 0, 7), &split);
    let report = evaluate(&t.model, &split.val, EvalMode::Primary).unwrap().report;
    let share = |tau: f64| report.loss_share.iter().find(|s| s.tau == tau).unwrap().easy_share;
    let (hot, cold) = (share(1.0), share(0.25));
    (cold < hot, format!("validation easy-negative share {hot:.4} at tau=1.0, {cold:.6} at tau=0.25"))
}

/// Mean validation (primary, two-stage) metrics over five seeds.
fn two_stage_runs(model: ModelKind, primary: usize, joint: usize) -> Vec<(f64, f64, f64, f64)> {
    let data = synthetic(32, 20);
    (0..5u64)
        .map(|seed| {
            let split = split(&data, 800 + 10 * seed, 32);
            let t = trained(run_config(model, data.clone(), primary, joint, seed), &split);
            let p = evaluate(&t.model, &split.val, EvalMode::Primary).unwrap().report.metrics;
            let s = evaluate(&t.model, &split.val, EvalMode::TwoStage).unwrap().report.metrics;
            (p.mrr, s.mrr, p.r5, s.r5)
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn discriminative_two_stage() -> Outcome {
    let runs = two_stage_runs(ModelKind::Discriminative, 30, 30);
    let gain = mean(runs.iter().map(|r| r.1 - r.0));
    let detail: Vec<String> = runs.iter().map(|r| format!("{:.3}->{:.3}", r.0, r.1)).collect();
    (gain > 0.0, format!("validation MRR primary->two-stage [{}], mean gain {gain:+.4}", detail.join(", ")))
}

fn generative_two_stage() -> Outcome {
    let runs = two_stage_runs(ModelKind::Generative, 40, 40);
    let mrr = mean(runs.iter().map(|r| r.1 - r.0));
    let r5 = mean(runs.iter().map(|r| r.3 - r.2));
    let detail: Vec<String> = runs.iter().map(|r| format!("{:.3}->{:.3}", r.0, r.1)).collect();
    (
        mrr > 0.0 && r5 > 0.0,
        format!("validation MRR [{}], mean gain MRR {mrr:+.4}, R@5 {r5:+.4}", detail.join(", ")),
    )
}

fn determinism() -> Outcome {
    let data = SyntheticConfig {
        dialogs: 8,
        ..synthetic(8, 10)
    };
    let split = split(&data, 900, 6);
    let cfg = RunConfig {
        hidden: 12,
        ..run_config(ModelKind::Discriminative, data, 2, 2, 9)
    };
    let a = trained(cfg.clone(), &split);
    let b = trained(cfg, &split);
    let bits = |t: &Trainer<f64>| -> Vec<u64> {
        t.log.iter().flat_map(|e| [e.loss.to_bits(), e.primary_loss.to_bits()]).collect()
    };
    let logs_equal = bits(&a) == bits(&b) && a.log == b.log;

    let before = evaluate(&a.model, &split.val, EvalMode::TwoStage).unwrap();
    let restored = Checkpoint::from_json(&a.checkpoint().to_json().unwrap()).unwrap();
    let after = evaluate(&restored.model::<f64>().unwrap(), &split.val, EvalMode::TwoStage).unwrap();
    let scores_bits = |e: &synergy_core::eval::Evaluation| -> Vec<u64> {
        e.turns.iter().flat_map(|t| t.scores.iter().chain(&t.primary).chain(&t.synergy).map(|x| x.to_bits())).collect()
    };
    let eval_equal = before.turns == after.turns && scores_bits(&before) == scores_bits(&after) && before.report == after.report;
    (
        logs_equal && eval_equal,
        format!("loss logs identical: {logs_equal}; evaluation after checkpoint round trip identical: {eval_equal}"),
    )
}

fn ensemble_sanity() -> Outcome {
    let data = synthetic(32, 20);
    let split = split(&data, 1100, 32);
    let scores: Vec<Vec<TurnScores>> = [21u64, 22]
        .iter()
        .map(|&seed| {
            let t = trained(run_config(ModelKind::Discriminative, data.clone(), 30, 0, seed), &split);
            let ckpt = Checkpoint::from_json(&t.checkpoint().to_json().unwrap()).unwrap();
            let e = evaluate(&ckpt.model::<f64>().unwrap(), &split.val, EvalMode::Primary).unwrap();
            e.turns.iter().map(|t| t.turn_scores()).collect()
        })
        .collect();
    let single: Vec<f64> = scores.iter().map(|s| report_from_scores(&split.val, s).unwrap().ndcg).collect();
    let summed: Vec<TurnScores> = scores[0]
        .iter()
        .zip(&scores[1])
        .map(|(a, b)| TurnScores {
            scores: ensemble_scores(&[a.scores.clone(), b.scores.clone()]).unwrap(),
            ..a.clone()
        })
        .collect();
    let both = report_from_scores(&split.val, &summed).unwrap().ndcg;
    let worse = single[0].min(single[1]);
    (
        both >= worse,
        format!("validation NDCG {:.4} and {:.4}, ensemble {both:.4}", single[0], single[1]),
    )
}
