//! End-to-end acceptance checks. Each check prints one `PASS`/`FAIL`
//! line before asserting.
//!
//! Checks 1-3 and 11 are cheap and run with the default test command.
//! The rest train models from scratch (about an hour on one core) and are
//! ignored by default:
//!
//! ```text
//! cargo test -p natscale --test acceptance -- --include-ignored --nocapture
//! ```
//!
//! Timing checks take the write side of a process-wide lock so that no
//! other check in this binary competes for the CPU while they measure.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock, RwLock, RwLockReadGuard, RwLockWriteGuard};

use natscale::compute::{
    gradient_check, AttnShape, GradCheckConfig, GradCheckReport, Graph, ParameterSet, Tensor, Var, MASK_NEG,
};
use natscale::data::{
    count_modes, encode_batch, generate_synthetic_corpus, ParallelCorpus, SyntheticTask, SyntheticTaskSpec, TokenId,
    MASK,
};
use natscale::decoding::{hypotheses, mask_predict, remask_schedule, select_lowest, translate, DecodeConfig};
use natscale::eval::{
    corpus_bleu, lm_perplexity, repetition_ratio, run_probe, selen_examples, wc_examples, word_accuracy, ProbeConfig,
    ProbeTask, UniformLm,
};
use natscale::model::{ArchConfig, DecoderKind, Model, Noise, DESK_PRESETS};
use natscale::pipeline::{run_pipeline, EvalSettings, PipelineConfig, TeacherSpec};
use natscale::speedbench::{measure_speedmax, median, SpeedConfig};
use natscale::training::{at_loss, distill_corpus, train, Objective, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const TEACHER_STEPS: usize = 4000;
const STUDENT_STEPS: usize = 1000;
const SPEED_STEPS: usize = 300;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!(
        "criterion {id:>2} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} {name} failed: {detail}");
}

static GATE: RwLock<()> = RwLock::new(());

fn shared() -> RwLockReadGuard<'static, ()> {
    GATE.read().unwrap_or_else(|e| e.into_inner())
}

fn exclusive() -> RwLockWriteGuard<'static, ()> {
    GATE.write().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// 1. gradients

fn params_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new(seed);
    for (name, shape) in shapes {
        p.insert(*name, Tensor::uniform(shape, 1.0, &mut rng)).unwrap();
    }
    p
}

/// Scalar `sum(y ⊙ w)` with fixed pseudo-random weights, so every output
/// coordinate reaches the loss with a distinct coefficient.
fn project(g: &mut Graph, y: Var, seed: u64) -> natscale::Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(shape, w)?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

type Builder = Box<dyn Fn(&mut Graph, &ParameterSet) -> natscale::Result<Var>>;

fn primitive_cases() -> Vec<(&'static str, ParameterSet, Builder)> {
    let mut attn_mask = vec![0.0f32; 2 * 3 * 4];
    for i in 0..3 {
        attn_mask[12 + i * 4 + 3] = MASK_NEG;
    }
    attn_mask[1] = MASK_NEG;
    let pool_mask = [true, true, false, true, false, false];
    vec![
        (
            "matmul",
            params_with(&[("a", vec![3, 4]), ("b", vec![4, 2])], 1),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let y = g.matmul(a, b)?;
                project(g, y, 1)
            }),
        ),
        (
            "matmul_nt",
            params_with(&[("a", vec![3, 4]), ("b", vec![5, 4])], 2),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let y = g.matmul_nt(a, b)?;
                project(g, y, 2)
            }),
        ),
        (
            "linear",
            params_with(&[("x", vec![4, 6]), ("w", vec![6, 3]), ("b", vec![3])], 3),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.linear(x, w, Some(b))?;
                project(g, y, 3)
            }),
        ),
        (
            "add/add_broadcast/mul/scale/relu",
            params_with(&[("a", vec![3, 4]), ("r", vec![4]), ("c", vec![3, 4])], 4),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let (a, r, c) = (g.param(p, "a")?, g.param(p, "r")?, g.param(p, "c")?);
                let y = g.add_broadcast(a, r)?;
                let y = g.add(y, c)?;
                let y = g.mul(y, c)?;
                let y = g.scale(y, 1.7)?;
                let y = g.relu(y)?;
                project(g, y, 4)
            }),
        ),
        (
            "softmax",
            params_with(&[("a", vec![3, 5])], 5),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let a = g.param(p, "a")?;
                let y = g.softmax(a)?;
                project(g, y, 5)
            }),
        ),
        (
            "layer_norm",
            params_with(&[("x", vec![3, 6]), ("g", vec![6]), ("b", vec![6])], 6),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let (x, gn, b) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
                let y = g.layer_norm(x, gn, b)?;
                project(g, y, 6)
            }),
        ),
        (
            "embedding/gather_rows",
            params_with(&[("e", vec![5, 3])], 7),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let e = g.param(p, "e")?;
                let y = g.embedding(e, &[4, 0, 4, 2])?;
                let y = g.gather_rows(y, &[1, 1, 3, 0, 2])?;
                project(g, y, 7)
            }),
        ),
        (
            "attention",
            params_with(&[("q", vec![6, 4]), ("k", vec![8, 4]), ("v", vec![8, 4])], 8),
            Box::new(move |g: &mut Graph, p: &ParameterSet| {
                let (q, k, v) = (g.param(p, "q")?, g.param(p, "k")?, g.param(p, "v")?);
                let geo = AttnShape {
                    batch: 2,
                    q_len: 3,
                    k_len: 4,
                    heads: 2,
                };
                let y = g.attention(q, k, v, &attn_mask, geo)?;
                project(g, y, 8)
            }),
        ),
        (
            "cross_entropy",
            params_with(&[("l", vec![4, 6])], 9),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let l = g.param(p, "l")?;
                g.cross_entropy(l, &[0, 5, 2, 2], &[1.0, 0.0, 2.0, 1.0], 0.1)
            }),
        ),
        (
            "mean_pool_masked/concat",
            params_with(&[("x", vec![6, 3]), ("y", vec![2, 2])], 10),
            Box::new(move |g: &mut Graph, p: &ParameterSet| {
                let (x, y) = (g.param(p, "x")?, g.param(p, "y")?);
                let pooled = g.mean_pool_masked(x, &pool_mask, 2)?;
                let cat = g.concat(&[pooled, y])?;
                project(g, cat, 10)
            }),
        ),
        (
            "dropout",
            params_with(&[("x", vec![4, 4])], 11),
            Box::new(|g: &mut Graph, p: &ParameterSet| {
                let x = g.param(p, "x")?;
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let y = g.dropout(x, 0.3, &mut rng)?;
                project(g, y, 11)
            }),
        ),
    ]
}

/// Token loss over a small two-sentence batch, plus the length loss for
/// non-autoregressive models.
fn model_loss(m: &Model, g: &mut Graph, params: &ParameterSet) -> natscale::Result<Var> {
    let view = Model {
        config: m.config.clone(),
        kind: m.kind,
        params: params.clone(),
    };
    match m.kind {
        DecoderKind::At => {
            let pairs = [
                natscale::data::Pair {
                    source: vec![5, 6, 7],
                    target: vec![10, 11, 12],
                },
                natscale::data::Pair {
                    source: vec![8, 9],
                    target: vec![13, 14],
                },
            ];
            let cfg = TrainConfig::default();
            Ok(at_loss(&view, g, &pairs, &cfg, &mut Noise::off())?.0)
        }
        DecoderKind::Nat => {
            let src = encode_batch(&[&[5u32, 6, 7][..], &[8, 9]], 11)?;
            let tgt = encode_batch(&[&[10u32, MASK, 12][..], &[MASK, 14]], 11)?;
            let mut noise = Noise::off();
            let enc = view.encode_in(g, &src, &mut noise)?;
            let logits = view.decode_in(g, &enc, &tgt, &mut noise)?;
            let weights: Vec<f32> = tgt.mask.iter().map(|&m| f32::from(u8::from(m))).collect();
            let ce = g.cross_entropy(logits, &[10, 11, 12, 13, 14, 0], &weights, 0.1)?;
            let len_logits = view.length_logits_in(g, &enc)?;
            let len_ce = g.cross_entropy(len_logits, &[2, 1], &[1.0, 1.0], 0.0)?;
            let len_ce = g.scale(len_ce, 0.1)?;
            g.add(ce, len_ce)
        }
    }
}

#[test]
fn criterion_01_gradient_suite() {
    let _gate = shared();
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut note = |name: String, r: GradCheckReport| {
        worst = worst.max(r.max_rel_error());
        if !r.passed() {
            failures.push(format!("{name}: {:?}", r.worst()));
        }
    };
    for (name, params, builder) in primitive_cases() {
        let r = gradient_check(&params, |g, p| builder(g, p), GradCheckConfig::default()).unwrap();
        note(name.to_string(), r);
    }
    for preset in DESK_PRESETS {
        for kind in [DecoderKind::Nat, DecoderKind::At] {
            let cfg = ArchConfig::preset(preset, 40, 10).unwrap();
            let m = Model::init(cfg, kind, 3).unwrap();
            let gc = GradCheckConfig {
                max_coords: Some(3),
                ..GradCheckConfig::default()
            };
            let r = gradient_check(&m.params, |g, p| model_loss(&m, g, p), gc).unwrap();
            note(format!("{preset}/{kind:?}"), r);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient suite",
        failures.is_empty() && worst < 1e-3 && secs < 120.0,
        format!("max rel err {worst:.2e}, {secs:.1}s, failures {failures:?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. decoding schedule

fn brute_lowest(scores: &[f32], n: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if scores[i] >= scores[b] => {}
                _ => best = Some(i),
            }
        }
        taken[best.unwrap()] = true;
    }
    (0..scores.len()).filter(|&i| taken[i]).collect()
}

#[test]
fn criterion_02_decoding_schedule() {
    let _gate = shared();
    let start = std::time::Instant::now();
    let mut counts_ok = true;
    for len in 1..=16 {
        for t in 1..=10 {
            let sched = remask_schedule(len, t);
            let want: Vec<usize> = (1..=t)
                .map(|i| ((len * (t - i)) as f64 / t as f64).floor() as usize)
                .collect();
            counts_ok &= sched == want;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sets_ok = 0;
    for _ in 0..200 {
        let len = rng.gen_range(1..=16);
        // coarse values make ties common
        let scores: Vec<f32> = (0..len).map(|_| -(rng.gen_range(0..6) as f32) * 0.5).collect();
        let n = rng.gen_range(0..=len);
        if select_lowest(&scores, n) == brute_lowest(&scores, n) {
            sets_ok += 1;
        }
    }

    // the decoder's own traces follow the same rule
    let task = generate_synthetic_corpus(&SyntheticTaskSpec {
        corpus_size: 200,
        train_sources: 50,
        valid_sources: 10,
        test_sources: 10,
        ..SyntheticTaskSpec::default()
    })
    .unwrap();
    let cfg = ArchConfig::preset("base", task.vocab.len(), task.spec.max_len).unwrap();
    let model = Model::init(cfg, DecoderKind::Nat, 5).unwrap();
    let sources: Vec<&[TokenId]> = task.test.sources().collect();
    let mut traces_ok = true;
    for t in [1, 3, 10] {
        for r in mask_predict(&model, &sources, t, 2).unwrap() {
            let len = r.tokens.len();
            let sched = remask_schedule(len, t);
            for (step, tr) in r.iteration_trace.iter().enumerate() {
                let expect = brute_lowest(&tr.scores, sched[step]);
                traces_ok &= tr.remasked == expect;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "decoding-schedule oracle",
        counts_ok && sets_ok == 200 && traces_ok && secs < 60.0,
        format!("counts {counts_ok}, sets {sets_ok}/200, traces {traces_ok}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 3. metrics

fn ngrams(s: &[u32], n: usize) -> Vec<Vec<u32>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

/// Clipped matches by removing each matched reference n-gram from a pool.
fn clipped(h: &[u32], r: &[u32], n: usize) -> usize {
    let mut pool = ngrams(r, n);
    let mut hits = 0;
    for g in ngrams(h, n) {
        if let Some(i) = pool.iter().position(|x| *x == g) {
            pool.swap_remove(i);
            hits += 1;
        }
    }
    hits
}

fn brute_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let m: usize = hyps.iter().zip(refs).map(|(h, r)| clipped(h, r, n)).sum();
        let t: usize = hyps.iter().map(|h| ngrams(h, n).len()).sum();
        let p = if m > 0 {
            m as f64 / t as f64
        } else {
            1.0 / (t as f64 + 1.0)
        };
        log_p += p.ln();
    }
    log_p /= 4.0;
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    100.0 * (log_p + bp).exp()
}

fn brute_repetition(hyps: &[Vec<u32>]) -> f64 {
    let total: usize = hyps.iter().map(Vec::len).sum();
    let mut rep = 0;
    for h in hyps {
        for i in 1..h.len() {
            if h[i] == h[i - 1] {
                rep += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        rep as f64 / total as f64
    }
}

fn brute_word_f(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let (mut matched, mut ht, mut rt) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        ht += h.len();
        rt += r.len();
        matched += clipped(h, r, 1);
    }
    let p = if ht == 0 { 0.0 } else { matched as f64 / ht as f64 };
    let r = if rt == 0 { 0.0 } else { matched as f64 / rt as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[test]
fn criterion_03_metric_oracles() {
    let _gate = shared();
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = Vec::new();
    for case in 0..100 {
        let n = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=6);
        let sent = |rng: &mut ChaCha8Rng, min: usize| -> Vec<u32> {
            let len = rng.gen_range(min..=8);
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        };
        let refs: Vec<Vec<u32>> = (0..n).map(|_| sent(&mut rng, 1)).collect();
        let hyps: Vec<Vec<u32>> = (0..n).map(|_| sent(&mut rng, 0)).collect();
        let bleu = corpus_bleu(&hyps, &refs).unwrap();
        if bleu != brute_bleu(&hyps, &refs) {
            mismatches.push(format!("bleu case {case}"));
        }
        if repetition_ratio(&hyps) != brute_repetition(&hyps) {
            mismatches.push(format!("repetition case {case}"));
        }
        if word_accuracy(&hyps, &refs).unwrap().f != brute_word_f(&hyps, &refs) {
            mismatches.push(format!("word accuracy case {case}"));
        }
    }
    let mut ppl_ok = true;
    for v in [2usize, 10, 85, 1000, 37000] {
        let hyps: Vec<Vec<TokenId>> = (0..20).map(|i| (0..(i % 7) as u32).map(|t| 5 + t).collect()).collect();
        let p = lm_perplexity(&UniformLm { vocab_size: v }, &hyps).unwrap().perplexity;
        ppl_ok &= (p - v as f64).abs() <= 1e-12 * v as f64;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "metric oracles",
        mismatches.is_empty() && ppl_ok && secs < 60.0,
        format!("mismatches {mismatches:?}, uniform perplexity {ppl_ok}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// trained fixtures shared by checks 4-10

fn train_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        valid_interval: steps / 5,
        checkpoints_to_average: 1,
        validation: DecodeConfig {
            iterations: 4,
            length_beam: 1,
            ..DecodeConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

struct Lab {
    tasks: Mutex<HashMap<u64, Arc<SyntheticTask>>>,
    models: Mutex<HashMap<String, Arc<Model>>>,
    distilled: Mutex<HashMap<u64, Arc<ParallelCorpus>>>,
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| Lab {
        tasks: Mutex::new(HashMap::new()),
        models: Mutex::new(HashMap::new()),
        distilled: Mutex::new(HashMap::new()),
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Data {
    Raw,
    Kd,
}

impl Lab {
    fn task(&self, seed: u64) -> Arc<SyntheticTask> {
        let mut tasks = self.tasks.lock().unwrap_or_else(|e| e.into_inner());
        tasks
            .entry(seed)
            .or_insert_with(|| {
                Arc::new(
                    generate_synthetic_corpus(&SyntheticTaskSpec {
                        seed,
                        ..SyntheticTaskSpec::default()
                    })
                    .unwrap(),
                )
            })
            .clone()
    }

    /// Trains on first use; the lock is held so that concurrent checks
    /// wait instead of training the same model twice.
    fn model(&self, objective: Objective, preset: &str, data: Data, steps: usize, seed: u64) -> Arc<Model> {
        let key = format!("{objective:?}/{preset}/{}/{steps}/{seed}", data == Data::Kd);
        if let Some(m) = self.models.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return m.clone();
        }
        let task = self.task(seed);
        let corpus = match data {
            Data::Raw => Arc::new(task.train.clone()),
            Data::Kd => self.distilled(seed),
        };
        let mut models = self.models.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(m) = models.get(&key) {
            return m.clone();
        }
        let kind = match objective {
            Objective::At => DecoderKind::At,
            _ => DecoderKind::Nat,
        };
        let arch = ArchConfig::preset(preset, task.vocab.len(), task.spec.max_len).unwrap();
        let init = Model::init(arch, kind, seed).unwrap();
        let out = train(init, objective, &corpus, &task.valid, &train_cfg(steps, seed), None).unwrap();
        let m = Arc::new(out.model);
        models.insert(key, m.clone());
        m
    }

    fn teacher(&self, seed: u64) -> Arc<Model> {
        self.model(Objective::At, "base", Data::Raw, TEACHER_STEPS, seed)
    }

    fn distilled(&self, seed: u64) -> Arc<ParallelCorpus> {
        if let Some(c) = self.distilled.lock().unwrap_or_else(|e| e.into_inner()).get(&seed) {
            return c.clone();
        }
        let teacher = self.teacher(seed);
        let task = self.task(seed);
        let mut cache = self.distilled.lock().unwrap_or_else(|e| e.into_inner());
        cache
            .entry(seed)
            .or_insert_with(|| Arc::new(distill_corpus(&teacher, &task.train, 1).unwrap().corpus))
            .clone()
    }
}

struct Quality {
    bleu: f64,
    repetition: f64,
}

fn quality(model: &Model, task: &SyntheticTask, decode: &DecodeConfig) -> Quality {
    let sources: Vec<&[TokenId]> = task.test.sources().collect();
    let refs: Vec<&[TokenId]> = task.test.targets().collect();
    let hyps = hypotheses(&translate(model, &sources, decode).unwrap());
    Quality {
        bleu: corpus_bleu(&hyps, &refs).unwrap(),
        repetition: repetition_ratio(&hyps),
    }
}

fn decode_cfg(iterations: usize) -> DecodeConfig {
    DecodeConfig {
        iterations,
        length_beam: 1,
        ..DecodeConfig::default()
    }
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

#[test]
#[ignore = "trains a teacher; run with --include-ignored"]
fn criterion_04_kd_reduces_modes() {
    let _gate = shared();
    let start = std::time::Instant::now();
    let task = lab().task(1);
    let kd = lab().distilled(1);
    let raw = count_modes(&task.train).mean;
    let distilled = count_modes(&kd).mean;
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        "distillation reduces modes",
        distilled <= 1.2 && raw >= 3.0,
        format!("modes raw {raw:.2}, distilled {distilled:.2}, {secs:.0}s"),
    );
}

#[test]
#[ignore = "trains GLAT on three seeds; run with --include-ignored"]
fn criterion_05_kd_reduces_repetition() {
    let _gate = shared();
    let (mut raw, mut kd) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let task = lab().task(seed);
        for (data, out) in [(Data::Raw, &mut raw), (Data::Kd, &mut kd)] {
            let m = lab().model(Objective::Glat, "base", data, STUDENT_STEPS, seed);
            out.push(quality(&m, &task, &DecodeConfig::single_pass()).repetition);
        }
    }
    let (mr, mk) = (median(&raw), median(&kd));
    report(
        5,
        "distillation reduces GLAT repetition",
        mk <= 0.5 * mr,
        format!(
            "median repetition raw {mr:.4} {}, distilled {mk:.4} {}",
            fmt(&raw),
            fmt(&kd)
        ),
    );
}

#[test]
#[ignore = "trains MaskT on three seeds; run with --include-ignored"]
fn criterion_06_iterations_help() {
    let _gate = shared();
    let (mut rep1, mut rep10, mut bleu1, mut bleu10) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let task = lab().task(seed);
        let m = lab().model(Objective::Cmlm, "base", Data::Raw, STUDENT_STEPS, seed);
        let one = quality(&m, &task, &decode_cfg(1));
        let ten = quality(&m, &task, &decode_cfg(10));
        rep1.push(one.repetition);
        rep10.push(ten.repetition);
        bleu1.push(one.bleu);
        bleu10.push(ten.bleu);
    }
    let pass = median(&rep10) < median(&rep1) && median(&bleu10) >= median(&bleu1);
    report(
        6,
        "refinement iterations help MaskT",
        pass,
        format!(
            "median repetition T=1 {:.4} T=10 {:.4}; BLEU T=1 {:.2} T=10 {:.2}",
            median(&rep1),
            median(&rep10),
            median(&bleu1),
            median(&bleu10)
        ),
    );
}

fn speed_max(model: &Model, decode: &DecodeConfig, sources: &[&[TokenId]], runs: usize) -> f64 {
    let cfg = SpeedConfig {
        measured_runs: runs,
        ..SpeedConfig::default()
    };
    measure_speedmax(model, decode, sources, &cfg).unwrap().timing.median
}

#[test]
#[ignore = "trains three models and times them; run with --include-ignored"]
fn criterion_07_component_scaling_speed() {
    let models: Vec<Arc<Model>> = ["base", "enc-wide", "dec-wide"]
        .into_iter()
        .map(|p| {
            let _gate = shared();
            lab().model(Objective::Cmlm, p, Data::Raw, SPEED_STEPS, 1)
        })
        .collect();
    let task = lab().task(1);
    let sources: Vec<&[TokenId]> = task.test.sources().collect();
    let _gate = exclusive();
    let maskt = DecodeConfig {
        iterations: 10,
        length_beam: 5,
        ..DecodeConfig::default()
    };
    let glat = DecodeConfig::single_pass();
    let rates =
        |decode: &DecodeConfig| -> Vec<f64> { models.iter().map(|m| speed_max(m, decode, &sources, 5)).collect() };
    let mt = rates(&maskt);
    let gl = rates(&glat);
    let (enc_mt, dec_mt) = (mt[1] / mt[0], mt[2] / mt[0]);
    let dec_gl = gl[2] / gl[0];
    report(
        7,
        "component-scaling speed asymmetry",
        enc_mt > dec_mt && dec_mt < dec_gl,
        format!("MaskT Speed_max ratio enc {enc_mt:.2}x dec {dec_mt:.2}x; GLAT dec {dec_gl:.2}x"),
    );
}

#[test]
#[ignore = "trains three presets on three seeds; run with --include-ignored"]
fn criterion_08_cone_tradeoff() {
    let presets = ["cone", "enc-deep-wide", "base"];
    let mut bleu: Vec<Vec<f64>> = vec![Vec::new(); presets.len()];
    {
        let _gate = shared();
        for seed in SEEDS {
            let task = lab().task(seed);
            for (i, p) in presets.iter().enumerate() {
                let m = lab().model(Objective::Cmlm, p, Data::Kd, STUDENT_STEPS, seed);
                bleu[i].push(quality(&m, &task, &decode_cfg(10)).bleu);
            }
        }
    }
    let task = lab().task(1);
    let sources: Vec<&[TokenId]> = task.test.sources().collect();
    let cone = lab().model(Objective::Cmlm, "cone", Data::Kd, STUDENT_STEPS, 1);
    let wide = lab().model(Objective::Cmlm, "enc-deep-wide", Data::Kd, STUDENT_STEPS, 1);
    let _gate = exclusive();
    let decode = DecodeConfig::default();
    let (s_cone, s_wide) = (
        speed_max(&cone, &decode, &sources, 5),
        speed_max(&wide, &decode, &sources, 5),
    );
    let (b_cone, b_wide, b_base) = (median(&bleu[0]), median(&bleu[1]), median(&bleu[2]));
    report(
        8,
        "cone trade-off",
        s_cone > s_wide && (b_cone - b_wide).abs() <= 2.0 && b_cone >= b_base,
        format!(
            "Speed_max cone {s_cone:.1}/s vs both-scaled {s_wide:.1}/s; median BLEU cone {b_cone:.2}, both-scaled {b_wide:.2}, base {b_base:.2}"
        ),
    );
}

#[test]
#[ignore = "trains teachers and GLAT on three seeds; run with --include-ignored"]
fn criterion_09_teacher_student_gap() {
    let _gate = shared();
    let (mut teacher, mut raw, mut kd) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let task = lab().task(seed);
        teacher.push(quality(&lab().teacher(seed), &task, &DecodeConfig::default()).bleu);
        let single = DecodeConfig::single_pass();
        raw.push(
            quality(
                &lab().model(Objective::Glat, "base", Data::Raw, STUDENT_STEPS, seed),
                &task,
                &single,
            )
            .bleu,
        );
        kd.push(
            quality(
                &lab().model(Objective::Glat, "base", Data::Kd, STUDENT_STEPS, seed),
                &task,
                &single,
            )
            .bleu,
        );
    }
    let (t, r, k) = (median(&teacher), median(&raw), median(&kd));
    let gap = t - r;
    report(
        9,
        "teacher-student gap",
        gap > 0.0 && k - r >= 0.5 * gap,
        format!(
            "median BLEU teacher {t:.2} {}, GLAT raw {r:.2} {}, GLAT distilled {k:.2} {}",
            fmt(&teacher),
            fmt(&raw),
            fmt(&kd)
        ),
    );
}

#[test]
#[ignore = "trains AT and MaskT on three seeds; run with --include-ignored"]
fn criterion_10_probe_divergence() {
    let _gate = shared();
    let (mut wc_nat, mut wc_at, mut selen) = (Vec::new(), Vec::new(), Vec::new());
    let cfg = ProbeConfig::default();
    for seed in SEEDS {
        let task = lab().task(seed);
        let sentences = task.train.unique_sources();
        let mut words: Vec<TokenId> = sentences.iter().flat_map(|s| s.iter().copied()).collect();
        words.sort_unstable();
        words.dedup();
        let cfg = ProbeConfig { seed, ..cfg.clone() };
        let wc = wc_examples(&sentences, &words, seed);
        let sl = selen_examples(&sentences, task.spec.min_len, task.spec.max_len);
        let nat = lab().model(Objective::Cmlm, "base", Data::Kd, STUDENT_STEPS, seed);
        let at = lab().model(Objective::At, "base", Data::Kd, STUDENT_STEPS, seed);
        wc_nat.push(run_probe(&nat, ProbeTask::Wc, &wc, &cfg).unwrap().accuracy);
        wc_at.push(run_probe(&at, ProbeTask::Wc, &wc, &cfg).unwrap().accuracy);
        for m in [&nat, &at] {
            let r = run_probe(m, ProbeTask::SeLen, &sl, &cfg).unwrap();
            selen.push(r.accuracy - r.chance);
        }
    }
    let (n, a) = (median(&wc_nat), median(&wc_at));
    let selen_min = selen.iter().copied().fold(f64::INFINITY, f64::min);
    report(
        10,
        "probe divergence",
        n >= a && selen_min >= 0.15,
        format!(
            "median WC NAT {n:.3} {}, AT {a:.3} {}; SeLen margins {}",
            fmt(&wc_nat),
            fmt(&wc_at),
            fmt(&selen)
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. determinism

fn small_pipeline(dir: &std::path::Path) -> PipelineConfig {
    let quick = |steps| TrainConfig {
        steps,
        tokens_per_batch: 256,
        warmup_steps: 5,
        valid_interval: 10,
        checkpoints_to_average: 2,
        ..TrainConfig::default()
    };
    PipelineConfig {
        output_dir: dir.to_path_buf(),
        task: SyntheticTaskSpec {
            corpus_size: 300,
            train_sources: 100,
            valid_sources: 20,
            test_sources: 20,
            ..SyntheticTaskSpec::default()
        },
        teacher: TeacherSpec {
            train: quick(30),
            ..TeacherSpec::default()
        },
        train: quick(30),
        eval: EvalSettings {
            lm_steps: 20,
            ..EvalSettings::default()
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let _gate = shared();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&small_pipeline(a.path())).unwrap();
    run_pipeline(&small_pipeline(b.path())).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.jsonl")).unwrap();
    let (ra, rb) = (read(&a), read(&b));
    report(
        11,
        "end-to-end determinism",
        !ra.is_empty() && ra == rb,
        format!("{} bytes, identical {}", ra.len(), ra == rb),
    );
}
