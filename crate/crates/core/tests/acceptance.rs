//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! to stderr (bypassing the test harness capture) and the test fails if any
//! criterion fails.

mod common;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{check_op, end_to_end_errors, enumerate, tiny_ptuned_model, ToyModel};
use qbridge::config::RunConfig;
use qbridge::data::{generate_corpus, load_vocab, preprocess, Dataset, Split, SynthSpec};
use qbridge::decode::{beam_search, generate_ids, greedy, DecodeConfig, LogitSource};
use qbridge::experiment::{generate_reports, run_ablation, train_run, RowResult};
use qbridge::image::ImageTensor;
use qbridge::lm::count_ptuning_params;
use qbridge::metrics::{repeated_unigram_rate, rouge1, rouge_tokens};
use qbridge::model::{AblationSpec, CaptionModel, LmMode};
use qbridge::rng::{normal_tensor, rng_for};
use qbridge::tensor::{ParamStore, Tape, Tensor, NEG_MASK};
use qbridge::train::{prompt_ids, train, TrainConfig};
use qbridge::vision::{sequence_length, VisionConfig, VisionEncoder};
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const MEMO_LOSS: f64 = 0.05;
const MEMO_EXACT: usize = 14;
const MEMO_STEPS: usize = 300;
const MEMO_BUDGET: Duration = Duration::from_secs(300);
const ABLATION_GAP: f64 = -0.01;
const ABLATION_SPAN: f64 = 0.03;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const ROUGE_TOL: f64 = 1e-9;
const SCORE_TOL: f64 = 1e-12;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(results: &mut Vec<Outcome>, id: u32, name: &'static str, pass: bool, detail: String) {
    let line = format!(
        "{} criterion {id:>2} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    results.push(Outcome {
        id,
        name,
        pass,
        detail,
    });
}

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal_tensor(shape.to_vec(), 1.0, seed, "input")
}

fn op_errors() -> Vec<(&'static str, f64)> {
    let causal = [true, false, false, true, false, true];
    vec![
        (
            "add",
            check_op(&[t(&[2, 3], 1), t(&[2, 3], 2)], |tp, v| tp.add(v[0], v[1])),
        ),
        (
            "add_row",
            check_op(&[t(&[3, 4], 1), t(&[4], 2)], |tp, v| tp.add_row(v[0], v[1])),
        ),
        (
            "mul",
            check_op(&[t(&[2, 3], 3), t(&[2, 3], 4)], |tp, v| tp.mul(v[0], v[1])),
        ),
        (
            "scale",
            check_op(&[t(&[5], 5)], |tp, v| tp.scale(v[0], -1.7)),
        ),
        ("gelu", check_op(&[t(&[2, 5], 6)], |tp, v| tp.gelu(v[0]))),
        ("sum", check_op(&[t(&[7], 7)], |tp, v| tp.sum(v[0]))),
        (
            "matmul",
            check_op(&[t(&[3, 4], 1), t(&[4, 2], 2)], |tp, v| {
                tp.matmul(v[0], v[1])
            }),
        ),
        (
            "matmul_t",
            check_op(&[t(&[3, 4], 3), t(&[5, 4], 4)], |tp, v| {
                tp.matmul_t(v[0], v[1])
            }),
        ),
        (
            "transpose",
            check_op(&[t(&[3, 4], 5)], |tp, v| tp.transpose(v[0])),
        ),
        (
            "softmax_rows",
            check_op(&[t(&[3, 5], 1)], |tp, v| tp.softmax_rows(v[0])),
        ),
        (
            "layer_norm",
            check_op(&[t(&[3, 6], 2), t(&[6], 3), t(&[6], 4)], |tp, v| {
                tp.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        (
            "cross_entropy_rows",
            check_op(&[t(&[4, 6], 5)], |tp, v| {
                tp.cross_entropy_rows(v[0], &[0, 5, 2, 2])
            }),
        ),
        (
            "embedding",
            check_op(&[t(&[5, 3], 1)], |tp, v| tp.embedding(v[0], &[4, 0, 4, 2])),
        ),
        (
            "reshape",
            check_op(&[t(&[2, 6], 2)], |tp, v| tp.reshape(v[0], vec![3, 4])),
        ),
        (
            "concat",
            check_op(&[t(&[2, 3], 3), t(&[2, 2], 6)], |tp, v| {
                tp.concat(&[v[0], v[1]], 1)
            }),
        ),
        (
            "narrow",
            check_op(&[t(&[4, 3], 7)], |tp, v| tp.narrow(v[0], 0, 1, 2)),
        ),
        (
            "mask_fill",
            check_op(&[t(&[2, 3], 9)], |tp, v| tp.mask_fill(v[0], &causal, 0.5)),
        ),
        (
            "mask_out+softmax",
            check_op(&[t(&[2, 3], 10)], |tp, v| {
                let m = tp.mask_out(v[0], &causal)?;
                tp.softmax_rows(m)
            }),
        ),
    ]
}

fn gradient_checks(results: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for (name, err) in op_errors() {
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let mut model = tiny_ptuned_model(3);
    for prefix in [
        "vision.",
        "qformer.",
        "lm.soft.",
        "lm.blocks.",
        "lm.tok_emb",
        "lm.head",
    ] {
        let errs = end_to_end_errors(&mut model, prefix, 10, 11);
        let e = errs.into_iter().fold(0.0, f64::max);
        if e > worst.1 {
            worst = (prefix, e);
        }
    }
    let elapsed = start.elapsed();
    report(
        results,
        1,
        "gradient checks",
        worst.1 < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max rel err {:.2e} ({}) in {:.1}s",
            worst.1,
            worst.0,
            elapsed.as_secs_f64()
        ),
    );
}

fn vision_token_counts(results: &mut Vec<Outcome>) {
    let encoded_len = |size: usize| {
        let cfg = VisionConfig {
            image_size: size,
            ..VisionConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let enc = VisionEncoder::new(&mut store, &cfg, 0).unwrap();
        let mut tape = Tape::inference(&store);
        let img = ImageTensor::new(size, size, 1, vec![0.5; size * size]).unwrap();
        let out = enc.encode(&mut tape, &img).unwrap();
        tape.shape(out)[0]
    };
    let large = (
        sequence_length(364, 364, 14, true).unwrap(),
        encoded_len(364),
    );
    let small = (
        sequence_length(224, 224, 14, true).unwrap(),
        encoded_len(224),
    );
    report(
        results,
        2,
        "vision token counts",
        large == (677, 677) && small == (257, 257),
        format!("364px -> {large:?}, 224px -> {small:?}"),
    );
}

fn ptuning_count(results: &mut Vec<Outcome>) {
    let n = count_ptuning_params(28, 4, 4096);
    report(
        results,
        3,
        "p-tuning parameter count",
        n == 917_504,
        format!("{n}"),
    );
}

fn bits(model: &CaptionModel<f32>, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<u32>)> {
    model
        .store
        .iter()
        .filter(|(_, p)| keep(&p.name))
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.value.data().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

fn is_base_lm(name: &str) -> bool {
    name.starts_with("lm.") && !name.starts_with("lm.soft.")
}

fn freeze_contracts(results: &mut Vec<Outcome>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        count: 64,
        seed: 2,
        ..SynthSpec::default()
    };
    generate_corpus(&spec, dir.path()).unwrap();
    let data = Dataset::load(dir.path(), Split::All).unwrap();
    let cfg = RunConfig::default().model_config(data.vocab.len());
    let tc = TrainConfig {
        max_steps: 200,
        epochs: 100,
        ..TrainConfig::default()
    };
    let run = |spec: &AblationSpec| {
        let before = CaptionModel::<f32>::for_ablation(&cfg, spec, 1).unwrap();
        let mut after = before.clone();
        let rep = train(&mut after, &data, spec, &tc, 4, |_| {}).unwrap();
        assert_eq!(rep.log.len(), 200);
        (before, after)
    };
    let ptuning = AblationSpec {
        vision_trainable: false,
        lm_mode: LmMode::Ptuning,
        image_size: 56,
    };
    let (before, after) = run(&ptuning);
    let lm_same = bits(&before, is_base_lm) == bits(&after, is_base_lm);
    let soft_moved =
        bits(&before, |n| n.starts_with("lm.soft.")) != bits(&after, |n| n.starts_with("lm.soft."));
    let vision_same =
        bits(&before, |n| n.starts_with("vision.")) == bits(&after, |n| n.starts_with("vision."));
    report(
        results,
        4,
        "freeze contracts",
        lm_same && soft_moved && vision_same,
        format!("after 200 steps: base LM identical {lm_same}, soft prompts changed {soft_moved}, vision identical {vision_same}"),
    );
}

struct Memorized {
    model: CaptionModel<f32>,
    cfg: RunConfig,
    dir: tempfile::TempDir,
}

fn memorization_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.ablation = AblationSpec {
        vision_trainable: true,
        lm_mode: LmMode::Full,
        image_size: 56,
    };
    cfg.pretrain.epochs = 0;
    cfg.train.augment = false;
    cfg.train.batch_size = 16;
    cfg.train.epochs = MEMO_STEPS;
    cfg.train.warmup_steps = 30;
    cfg.train.peak_lr = 2e-3;
    cfg
}

fn memorization(results: &mut Vec<Outcome>) -> Memorized {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        count: 16,
        seed: 7,
        ..SynthSpec::default()
    };
    generate_corpus(&spec, &dir.path().join("data")).unwrap();
    let data = Dataset::load(&dir.path().join("data"), Split::All).unwrap();
    let cfg = memorization_config();
    let start = Instant::now();
    let (model, summary) = train_run(&cfg, &data, None, &dir.path().join("run")).unwrap();
    let elapsed = start.elapsed();
    let steps = summary.log.len();
    let per_epoch = data.len().div_ceil(cfg.train.batch_size);
    let last = &summary.log[steps - per_epoch..];
    let loss = last.iter().map(|r| r.loss_sum).sum::<f64>()
        / last.iter().map(|r| r.loss_sum / r.loss_mean).sum::<f64>();
    let mut greedy_cfg = cfg.clone();
    greedy_cfg.decode = DecodeConfig {
        beam_size: 1,
        repetition_penalty: 1.0,
        min_len: 1,
        max_len: 64,
    };
    let preds = generate_reports(&model, &greedy_cfg, &data).unwrap();
    let exact = preds
        .iter()
        .zip(data.captions())
        .filter(|(p, c)| **p == *c)
        .count();
    report(
        results,
        5,
        "memorization",
        loss < MEMO_LOSS && exact >= MEMO_EXACT && steps <= MEMO_STEPS && elapsed < MEMO_BUDGET,
        format!(
            "loss {loss:.4} after {steps} steps, {exact}/{} exact greedy captions, {:.0}s",
            data.len(),
            elapsed.as_secs_f64()
        ),
    );
    Memorized { model, cfg, dir }
}

fn ablation_config() -> RunConfig {
    RunConfig::parse(include_str!("../../../configs/ablation.cfg")).unwrap()
}

fn ablation_ordering(results: &mut Vec<Outcome>) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_corpus(&SynthSpec::default(), &data).unwrap();
    let start = Instant::now();
    let rows = run_ablation(&ablation_config(), &data, &dir.path().join("a")).unwrap();
    let elapsed = start.elapsed();
    let mean = |id: &str| {
        rows.iter()
            .find(|r| r.row.id == id)
            .map(RowResult::mean_rouge1)
            .unwrap()
    };
    let chain = [
        "frozen-lm",
        "ptuning",
        "vision+ptuning",
        "vision+ptuning-large",
    ]
    .map(mean);
    let gaps: Vec<f64> = chain.windows(2).map(|w| w[1] - w[0]).collect();
    let span = chain[3] - chain[0];
    let pass = gaps.iter().all(|&g| g >= ABLATION_GAP)
        && span > ABLATION_SPAN
        && elapsed < ABLATION_BUDGET;
    report(
        results,
        6,
        "ablation ordering",
        pass,
        format!(
            "frozen-lm {:.4} <= ptuning {:.4} <= vision+ptuning {:.4} <= large {:.4} (scratch {:.4}), span {span:.4}, {:.0}s",
            chain[0],
            chain[1],
            chain[2],
            chain[3],
            mean("tf-scratch"),
            elapsed.as_secs_f64()
        ),
    );
    dir
}

/// Three-step model over {A, B, EOS} with hand-written tables; greedy
/// follows A but the best complete sequence is [B].
struct HandModel;

impl LogitSource for HandModel {
    type State = Vec<usize>;

    fn start(&self) -> qbridge::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn logits(&self, state: &Vec<usize>) -> Vec<f64> {
        let p: [f64; 3] = match state.as_slice() {
            [] => [0.55, 0.45, 0.0],
            [0] => [0.5, 0.1, 0.4],
            [1] => [0.1, 0.1, 0.8],
            _ => [0.4, 0.3, 0.3],
        };
        p.iter()
            .map(|&x| if x > 0.0 { x.ln() } else { NEG_MASK })
            .collect()
    }

    fn advance(&self, state: &mut Vec<usize>, token: usize) -> qbridge::Result<()> {
        state.push(token);
        Ok(())
    }

    fn eos(&self) -> usize {
        2
    }
}

fn beam_exactness(results: &mut Vec<Outcome>) {
    let mut mismatches = 0;
    let mut checked = 0;
    for seed in 0..25 {
        for penalty in [1.0, 2.0] {
            let model = ToyModel {
                vocab: 4,
                eos: 1,
                seed,
                spread: 1.5,
            };
            // 3 steps over 3 non-EOS tokens: at most 1 + 3 + 9 = 13 live prefixes.
            let cfg = DecodeConfig {
                beam_size: 13,
                repetition_penalty: penalty,
                min_len: 1,
                max_len: 3,
            };
            let best = &enumerate(&model, &cfg)[0];
            let beam = &beam_search(&model, &cfg).unwrap()[0];
            checked += 1;
            if beam.tokens != best.tokens || (beam.score - best.score).abs() > SCORE_TOL {
                mismatches += 1;
            }
        }
    }
    let hand_cfg = DecodeConfig {
        beam_size: 3,
        repetition_penalty: 1.0,
        min_len: 1,
        max_len: 3,
    };
    let hand = &beam_search(&HandModel, &hand_cfg).unwrap()[0];
    let hand_ok = hand.tokens == [1] && (hand.score - 0.36f64.ln()).abs() < SCORE_TOL;
    let mut greedy_diffs = 0;
    for seed in 0..20 {
        let model = ToyModel {
            vocab: 9,
            eos: 2,
            seed: 100 + seed,
            spread: 2.0,
        };
        let cfg = DecodeConfig {
            beam_size: 1,
            repetition_penalty: 2.0,
            min_len: 3,
            max_len: 12,
        };
        let g = greedy(&model, &cfg).unwrap();
        let b = &beam_search(&model, &cfg).unwrap()[0];
        if b.tokens != g.tokens || (b.score - g.score).abs() > SCORE_TOL {
            greedy_diffs += 1;
        }
    }
    report(
        results,
        7,
        "beam search exactness",
        mismatches == 0 && hand_ok && greedy_diffs == 0,
        format!(
            "{mismatches}/{checked} toy models differ from enumeration, hand model ok {hand_ok}, beam=1 vs greedy differs on {greedy_diffs}/20"
        ),
    );
}

fn decoding_constraints(results: &mut Vec<Outcome>, memo: &Memorized) {
    let spec = SynthSpec {
        count: 200,
        seed: 8,
        ..SynthSpec::default()
    };
    let vocab = load_vocab(&memo.dir.path().join("data")).unwrap();
    let prompt = prompt_ids(&vocab, &memo.model.cfg.lm.prompt_text);
    let images: Vec<ImageTensor> = (0..spec.count)
        .map(|i| preprocess(&spec.render(i), memo.model.image_size()))
        .collect();
    let decode = |penalty: f64| -> Vec<String> {
        let cfg = DecodeConfig {
            repetition_penalty: penalty,
            ..memo.cfg.decode.clone()
        };
        images
            .iter()
            .map(|img| vocab.decode(&generate_ids(&memo.model, img, &prompt, &cfg).unwrap()))
            .collect()
    };
    let with_penalty = decode(2.0);
    let without = decode(1.0);
    let lengths: Vec<usize> = with_penalty.iter().map(|s| rouge_tokens(s).len()).collect();
    let (lo, hi) = (
        *lengths.iter().min().unwrap(),
        *lengths.iter().max().unwrap(),
    );
    let rate =
        |v: &[String]| v.iter().map(|s| repeated_unigram_rate(s)).sum::<f64>() / v.len() as f64;
    let (r2, r1) = (rate(&with_penalty), rate(&without));
    report(
        results,
        8,
        "decoding constraints",
        lo >= 8 && hi <= 64 && r2 < r1,
        format!("{} samples, lengths in [{lo}, {hi}], repeated-unigram rate {r2:.4} (penalty 2) vs {r1:.4} (penalty 1)", lengths.len()),
    );
}

/// F1 by explicit one-to-one matching of token positions.
fn oracle_f1(candidate: &str, reference: &str) -> f64 {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    let mut used = vec![false; r.len()];
    let mut m = 0usize;
    for tok in &c {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && &r[j] == tok) {
            used[j] = true;
            m += 1;
        }
    }
    if m == 0 {
        return 0.0;
    }
    let (p, rec) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

fn rouge_checks(results: &mut Vec<Outcome>) {
    let words = ["no", "acute", "finding", "ct", "dot", "the", "a", "mass"];
    let mut rng = rng_for(5, "rouge pairs");
    let sentence = |rng: &mut dyn rand::RngCore| {
        let n = rng.random_range(1..15);
        (0..n)
            .map(|_| words[rng.random_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (c, r) = (sentence(&mut rng), sentence(&mut rng));
        worst = worst.max((rouge1(&c, &r).f1 - oracle_f1(&c, &r)).abs());
    }
    let hand = [
        rouge1("no acute finding", "no acute finding").f1,
        rouge1("the cat sat", "the cat ran").f1,
        rouge1("a a a", "a b").f1,
    ];
    let hand_ok = (hand[0] - 1.0).abs() < ROUGE_TOL
        && (hand[1] - 2.0 / 3.0).abs() < ROUGE_TOL
        && (hand[2] - 0.4).abs() < ROUGE_TOL;
    report(
        results,
        9,
        "rouge-1",
        worst < ROUGE_TOL && hand_ok,
        format!("max |f1 - oracle| over 500 pairs {worst:.1e}, hand examples {hand:?}"),
    );
}

fn tree_files(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|f| f == name) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Repeats the full ablation run of `dir/a` into `dir/b` and compares bytes.
fn determinism(results: &mut Vec<Outcome>, dir: &Path) {
    let (a, b) = (dir.join("a"), dir.join("b"));
    run_ablation(&ablation_config(), &dir.join("data"), &b).unwrap();
    let table_same =
        fs::read(a.join("ablation.tsv")).unwrap() == fs::read(b.join("ablation.tsv")).unwrap();
    let checkpoints = tree_files(&a, "checkpoint.qbck");
    let differing = checkpoints
        .iter()
        .filter(|p| fs::read(a.join(p)).unwrap() != fs::read(b.join(p)).unwrap())
        .count();
    let same_set = checkpoints == tree_files(&b, "checkpoint.qbck");
    report(
        results,
        10,
        "determinism",
        table_same && same_set && differing == 0 && !checkpoints.is_empty(),
        format!(
            "table identical {table_same}, {} checkpoints, {differing} differ",
            checkpoints.len()
        ),
    );
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    gradient_checks(&mut results);
    vision_token_counts(&mut results);
    ptuning_count(&mut results);
    freeze_contracts(&mut results);
    let memo = memorization(&mut results);
    let ablation_dir = ablation_ordering(&mut results);
    beam_exactness(&mut results);
    decoding_constraints(&mut results, &memo);
    rouge_checks(&mut results);
    determinism(&mut results, ablation_dir.path());
    let failed: Vec<String> = results
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} {}: {}", o.id, o.name, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
