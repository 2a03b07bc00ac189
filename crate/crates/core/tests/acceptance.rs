//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stllm::adapters::{
    conv_backward, conv_forward, conv_output_len, ctc_collapse, projection_backward,
    projection_forward, ConvAdapterParams, FrameLabels, ProjectionParams,
};
use stllm::data::{
    read_manifest, read_report, synth_dataset, EvalReport, Manifest, SyntheticSpec, TestSetScores,
};
use stllm::decoding::{beam_search, greedy_decode, BeamConfig, DecodeError, StepModel};
use stllm::evalkit::{
    bleu_corpus, format_bleu_pair, format_wer, lpw_normalize, mwer_resegment, render_report,
    score_asr, word_wer, BleuMode, Smoothing,
};
use stllm::microlm::{
    backward, forward_cached, lm_forward, masked_cross_entropy, masked_nll_with_grad, LmConfig,
    LmParams, LoraPair, LoraParams, LoraTarget,
};
use stllm::pipeline::{
    prepare_training, run_inference, run_training, PipelineConfig, RecordOutput,
};
use stllm::promptfmt::{assemble_inference_prompt, assemble_training_sample, Vocabulary};
use stllm::tensor::{log_softmax, Matrix};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: Vec<Criterion> = vec![
        ("adapter oracles", adapter_oracles),
        ("gradient suite", gradient_suite),
        ("protocol suite", protocol_suite),
        ("decoding suite", decoding_suite),
        ("decoding suite, beam semantics", decoding_beam_semantics),
        ("metric suite", metric_suite),
        ("report fixtures", report_fixtures),
        ("end-to-end overfit", end_to_end_overfit),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|k| name.contains(k.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{} {name} ({secs:.1}s): {}",
            if v.ok { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.ok {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn within(budget: Duration, start: Instant) -> (bool, String) {
    let e = start.elapsed();
    (
        e < budget,
        format!("{:.1}s of {}s budget", e.as_secs_f64(), budget.as_secs()),
    )
}

// ---------------------------------------------------------------- adapters

/// Groups frames by scanning outwards from each frame to the edges of its run.
fn collapse_oracle(seq: &Matrix, labels: &[u32], blank: u32, keep_blanks: bool) -> Vec<Vec<f64>> {
    let t = labels.len();
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for i in 0..t {
        let mut s = i;
        while s > 0 && labels[s - 1] == labels[i] {
            s -= 1;
        }
        let mut e = i;
        while e + 1 < t && labels[e + 1] == labels[i] {
            e += 1;
        }
        if seen.contains(&(s, e)) {
            continue;
        }
        seen.push((s, e));
        if labels[i] == blank && !keep_blanks {
            continue;
        }
        let mean = (0..seq.cols())
            .map(|c| (s..=e).map(|r| seq[(r, c)]).sum::<f64>() / (e - s + 1) as f64)
            .collect();
        out.push(mean);
    }
    out
}

fn adapter_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xada);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        let n_labels = rng.random_range(2..=5u32);
        let seq = Matrix::randn(t, d, 1.0, &mut rng);
        let labels: Vec<u32> = (0..t).map(|_| rng.random_range(0..n_labels)).collect();
        let keep = rng.random_bool(0.3);
        let fl = FrameLabels {
            labels: labels.clone(),
            blank_id: 0,
        };
        let expected = collapse_oracle(&seq, &labels, 0, keep);
        match ctc_collapse(&seq, &fl, keep) {
            Ok(got) => {
                if got.rows() != expected.len() {
                    mismatches += 1;
                    continue;
                }
                for (r, row) in expected.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        worst = worst.max((got[(r, c)] - v).abs());
                    }
                }
            }
            Err(_) => {
                if !expected.is_empty() {
                    mismatches += 1;
                }
            }
        }
    }
    let mut len_ok = true;
    let mut conv_worst = 0.0f64;
    for t in 1..100usize {
        let d_in = 1 + t % 4;
        let d_out = 1 + t % 3;
        let seq = Matrix::randn(t, d_in, 1.0, &mut rng);
        let p = ConvAdapterParams::init(d_in, d_out, &mut rng);
        let out = conv_forward(&seq, &p).unwrap();
        let want = t.div_ceil(5);
        len_ok &= out.rows() == want && conv_output_len(t) == want;
        // direct windowed sum over an explicitly zero-padded copy
        let mut padded = vec![vec![0.0; d_in]; want * 5];
        for (r, row) in padded.iter_mut().enumerate().take(t) {
            row.copy_from_slice(seq.row(r));
        }
        for o in 0..want {
            for c in 0..d_out {
                let mut acc = p.bias[c];
                for j in 0..5 {
                    for i in 0..d_in {
                        acc += padded[o * 5 + j][i] * p.kernel[j][(i, c)];
                    }
                }
                conv_worst = conv_worst.max((out[(o, c)] - acc).abs());
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(10), start);
    verdict(
        mismatches == 0 && worst <= 1e-6 && len_ok && conv_worst <= 1e-9 && fast,
        format!(
            "collapse 1000 cases, {mismatches} shape mismatches, max abs err {worst:.2e}; \
             conv length ceil(T/5) for T in 1..100: {len_ok}; {time}"
        ),
    )
}

// ---------------------------------------------------------------- gradients

const FD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Central differences of `f` with respect to every coordinate of `x`.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xx = x.to_vec();
    (0..x.len())
        .map(|i| {
            xx[i] = x[i] + FD_H;
            let up = f(&xx);
            xx[i] = x[i] - FD_H;
            let dn = f(&xx);
            xx[i] = x[i];
            (up - dn) / (2.0 * FD_H)
        })
        .collect()
}

#[derive(Default)]
struct GroupStats {
    groups: BTreeMap<String, (usize, f64)>,
}

impl GroupStats {
    fn record(&mut self, group: &str, err: f64) {
        let e = self.groups.entry(group.to_string()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(err);
    }

    /// Folds per-tensor errors of one instance into one entry per group.
    fn record_instance(&mut self, errs: &[(String, f64)]) {
        let mut per: BTreeMap<String, f64> = BTreeMap::new();
        for (name, e) in errs {
            let g = per.entry(group_of(name)).or_insert(0.0);
            *g = g.max(*e);
        }
        for (g, e) in per {
            self.record(&g, e);
        }
    }
}

/// `blocks.1.attn.wq` -> `attn.wq`, `lora.0.q.a` -> `lora.q.a`.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["blocks", _, rest @ ..] => rest.join("."),
        ["lora", _, rest @ ..] => format!("lora.{}", rest.join(".")),
        _ => name.to_string(),
    }
}

fn tanh_loss(out: &Matrix, w: &Matrix) -> f64 {
    out.as_slice()
        .iter()
        .zip(w.as_slice())
        .map(|(o, w)| w * o.tanh())
        .sum()
}

fn tanh_upstream(out: &Matrix, w: &Matrix) -> Matrix {
    let data = out
        .as_slice()
        .iter()
        .zip(w.as_slice())
        .map(|(o, w)| w * (1.0 - o.tanh().powi(2)))
        .collect();
    Matrix::from_vec(out.rows(), out.cols(), data)
}

fn check_projection(rng: &mut ChaCha8Rng, stats: &mut GroupStats) {
    let (t, d_enc, d_model) = (
        rng.random_range(1..6),
        rng.random_range(1..6),
        rng.random_range(1..6),
    );
    let seq = Matrix::randn(t, d_enc, 1.0, rng);
    let mut p = ProjectionParams::init(d_enc, d_model, rng);
    p.bias = (0..d_model).map(|_| rng.random_range(-0.5..0.5)).collect();
    let w = Matrix::randn(t, d_model, 1.0, rng);
    let out = projection_forward(&seq, &p).unwrap();
    let (g_seq, g) = projection_backward(&seq, &p, &tanh_upstream(&out, &w)).unwrap();

    let num_w = numeric_grad(p.weight.as_slice(), |x| {
        let q = ProjectionParams {
            weight: Matrix::from_vec(d_enc, d_model, x.to_vec()),
            bias: p.bias.clone(),
        };
        tanh_loss(&projection_forward(&seq, &q).unwrap(), &w)
    });
    let num_b = numeric_grad(&p.bias, |x| {
        let q = ProjectionParams {
            weight: p.weight.clone(),
            bias: x.to_vec(),
        };
        tanh_loss(&projection_forward(&seq, &q).unwrap(), &w)
    });
    let num_x = numeric_grad(seq.as_slice(), |x| {
        tanh_loss(
            &projection_forward(&Matrix::from_vec(t, d_enc, x.to_vec()), &p).unwrap(),
            &w,
        )
    });
    stats.record("proj.weight", rel_err(g.weight.as_slice(), &num_w));
    stats.record("proj.bias", rel_err(&g.bias, &num_b));
    stats.record("proj.input", rel_err(g_seq.as_slice(), &num_x));
}

fn check_conv(rng: &mut ChaCha8Rng, stats: &mut GroupStats) {
    let (t, d_in, d_out) = (
        rng.random_range(1..14),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let seq = Matrix::randn(t, d_in, 1.0, rng);
    let mut p = ConvAdapterParams::init(d_in, d_out, rng);
    p.bias = (0..d_out).map(|_| rng.random_range(-0.5..0.5)).collect();
    let out = conv_forward(&seq, &p).unwrap();
    let w = Matrix::randn(out.rows(), d_out, 1.0, rng);
    let (g_seq, g) = conv_backward(&seq, &p, &tanh_upstream(&out, &w)).unwrap();

    let mut err_taps = 0.0f64;
    for j in 0..p.kernel.len() {
        let num = numeric_grad(p.kernel[j].as_slice(), |x| {
            let mut q = p.clone();
            q.kernel[j] = Matrix::from_vec(d_in, d_out, x.to_vec());
            tanh_loss(&conv_forward(&seq, &q).unwrap(), &w)
        });
        // taps that only see padding have zero gradient on both sides
        err_taps = err_taps.max(rel_err(g.kernel[j].as_slice(), &num));
    }
    let num_b = numeric_grad(&p.bias, |x| {
        let mut q = p.clone();
        q.bias = x.to_vec();
        tanh_loss(&conv_forward(&seq, &q).unwrap(), &w)
    });
    let num_x = numeric_grad(seq.as_slice(), |x| {
        tanh_loss(
            &conv_forward(&Matrix::from_vec(t, d_in, x.to_vec()), &p).unwrap(),
            &w,
        )
    });
    stats.record("conv.kernel", err_taps);
    stats.record("conv.bias", rel_err(&g.bias, &num_b));
    stats.record("conv.input", rel_err(g_seq.as_slice(), &num_x));
}

fn random_lm(rng: &mut ChaCha8Rng, tied: bool) -> LmParams {
    let d = [4, 6, 8][rng.random_range(0..3)];
    let n_heads = if d % 2 == 0 && rng.random_bool(0.5) {
        2
    } else {
        1
    };
    let cfg = LmConfig {
        vocab_size: rng.random_range(4..=8),
        d_model: d,
        n_layers: rng.random_range(1..=2),
        n_heads,
        d_ff: rng.random_range(3..=8),
        max_len: 8,
        tied_head: tied,
    };
    let mut p = LmParams::init(&cfg, rng).unwrap();
    // perturb everything away from the init so layer norms and biases are generic
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn random_lora(p: &LmParams, rng: &mut ChaCha8Rng) -> LoraParams {
    let r_max = p.config.d_model.min(p.config.d_ff);
    let r = rng.random_range(1..=r_max.min(4));
    let blocks = p
        .blocks
        .iter()
        .map(|b| {
            LoraTarget::ALL
                .iter()
                .map(|&t| {
                    let w = b.weight(t);
                    let mut pair = LoraPair::init(w.rows(), w.cols(), r, rng).unwrap();
                    // a non-zero B so the gradient of A is not trivially zero
                    pair.b = Matrix::randn(r, w.cols(), 0.3, rng);
                    (t, pair)
                })
                .collect()
        })
        .collect();
    LoraParams {
        scaling: 8.0 / r as f64,
        blocks,
    }
}

fn check_lm(rng: &mut ChaCha8Rng, tied: bool, with_lora: bool, stats: &mut GroupStats) {
    let p = random_lm(rng, tied);
    let lora = with_lora.then(|| random_lora(&p, rng));
    let (v, d) = (p.config.vocab_size, p.config.d_model);
    let len = rng.random_range(2..=6);
    let x = Matrix::randn(len, d, 1.0, rng);
    let targets: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
    mask[len - 1] = true;
    let count = mask.iter().filter(|&&m| m).count() as f64;

    let loss = |p: &LmParams, l: Option<&LoraParams>, x: &Matrix| {
        masked_cross_entropy(&lm_forward(p, l, x).unwrap(), &targets, &mask).unwrap()
    };
    let (logits, cache) = forward_cached(&p, lora.as_ref(), &x).unwrap();
    let (_, dlogits) = masked_nll_with_grad(&logits, &targets, &mask, count).unwrap();
    let (g, gl, gx) = backward(&p, lora.as_ref(), &cache, &dlogits).unwrap();

    let mut errs = Vec::new();
    for (k, (name, a)) in g.tensors().into_iter().enumerate() {
        let num = numeric_grad(p.tensors()[k].1, |vals| {
            let mut q = p.clone();
            q.tensors_mut()[k].1.copy_from_slice(vals);
            loss(&q, lora.as_ref(), &x)
        });
        errs.push((name, rel_err(a, &num)));
    }
    if let (Some(l), Some(gl)) = (&lora, &gl) {
        for (k, (name, a)) in gl.tensors().into_iter().enumerate() {
            let num = numeric_grad(l.tensors()[k].1, |vals| {
                let mut q = l.clone();
                q.tensors_mut()[k].1.copy_from_slice(vals);
                loss(&p, Some(&q), &x)
            });
            errs.push((name, rel_err(a, &num)));
        }
    }
    let num_x = numeric_grad(x.as_slice(), |vals| {
        loss(&p, lora.as_ref(), &Matrix::from_vec(len, d, vals.to_vec()))
    });
    errs.push(("input_embeddings".into(), rel_err(gx.as_slice(), &num_x)));
    stats.record_instance(&errs);
}

/// Gradients of a full training example (conv or collapse, projection, prompt
/// scatter, LM) against central differences of the example's loss.
fn check_pipeline(seed: u64, dir: &Path, stats: &mut GroupStats) {
    let spec = SyntheticSpec {
        seed,
        n_samples: 2,
        vocab_size: 4,
        len_range: (1, 2),
        repeat_range: (1, 3),
        dim: 3,
        text_pairs: 0,
        ..SyntheticSpec::default()
    };
    let manifest = synth_dataset(&spec, dir).unwrap();
    let conv = seed.is_multiple_of(2);
    let lora = seed % 4 < 2;
    let cfg = PipelineConfig::from_toml(&format!(
        "adapter = \"{}\"\nfeature_dim = 3\nconv_d_out = 2\ninit_seed = {seed}\n\
         [model]\nd_model = 4\nn_layers = 1\nn_heads = 2\nd_ff = 4\nmax_len = 24\n{}",
        if conv { "conv5x5" } else { "ctc_collapse" },
        if lora {
            "[lora]\nr = 2\nalpha = 4.0\n"
        } else {
            ""
        }
    ))
    .unwrap();
    let mut run = prepare_training(&cfg, &manifest).unwrap();
    if let Some(l) = run.model.lora.as_mut() {
        for (name, t) in l.tensors_mut() {
            if name.ends_with(".b") {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                t.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
    }
    let ex = run.examples[0].clone();
    let count = (ex.transcript_ids.len() + ex.translation_ids.len() + 2) as f64;
    let (_, grads) = run.example_grads(&ex, count).unwrap();
    let mut errs = Vec::new();
    for (name, a) in &grads {
        let base: Vec<f64> = run
            .model
            .tensors()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v.to_vec())
            .unwrap_or_else(|| panic!("no tensor named {name}"));
        let num = numeric_grad(&base, |vals| {
            let mut m = run.model.clone();
            for (n, t) in m.tensors_mut() {
                if &n == name {
                    t.copy_from_slice(vals);
                }
            }
            let r = stllm::pipeline::TrainingRun {
                model: m,
                examples: vec![ex.clone()],
            };
            r.mean_loss(&[0]).unwrap()
        });
        let e = rel_err(a, &num);
        let group = if name.starts_with("conv") || name.starts_with("proj") {
            format!("composite {}", name.split('.').next().unwrap())
        } else {
            "composite lm".to_string()
        };
        errs.push((group, e));
    }
    stats.record_instance(&errs);
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ad);
    let mut stats = GroupStats::default();
    for _ in 0..60 {
        check_projection(&mut rng, &mut stats);
        check_conv(&mut rng, &mut stats);
    }
    for i in 0..240 {
        check_lm(&mut rng, (i / 2) % 2 == 0, i % 2 == 1, &mut stats);
    }
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..8 {
        let sub = dir.path().join(seed.to_string());
        check_pipeline(seed, &sub, &mut stats);
    }
    let mut bad = Vec::new();
    let mut summary = Vec::new();
    for (g, (n, e)) in &stats.groups {
        let needed = if g.starts_with("composite") { 1 } else { 50 };
        if *n < needed || *e >= GRAD_TOL {
            bad.push(format!("{g} (n={n}, err={e:.2e})"));
        }
        summary.push(format!("{g}:{n}"));
    }
    let worst = stats.groups.values().map(|(_, e)| *e).fold(0.0, f64::max);
    let (fast, time) = within(Duration::from_secs(120), start);
    verdict(
        bad.is_empty() && fast,
        format!(
            "{} groups, max rel err {worst:.2e}, failing: [{}]; {time}; instances {}",
            stats.groups.len(),
            bad.join(", "),
            summary.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- protocol

fn protocol_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x970);
    let words: Vec<String> = (0..9).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(words.iter().map(String::as_str));
    let v = vocab.len();
    let cfg = LmConfig {
        vocab_size: v,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_len: 32,
        tied_head: false,
    };
    let mut corruptions = 0usize;
    let mut invariant = true;
    let mut count_ok = true;
    let mut prefix_ok = true;
    let mut targets_ok = true;
    for _ in 0..20 {
        let lm = LmParams::init(&cfg, &mut rng).unwrap();
        let m = rng.random_range(1..6);
        let audio = Matrix::randn(m, cfg.d_model, 1.0, &mut rng);
        let word_ids: Vec<usize> = words.iter().map(|w| vocab.id(w).unwrap()).collect();
        let n_tr = rng.random_range(1..6);
        let n_tl = rng.random_range(1..6);
        let tr: Vec<usize> = (0..n_tr)
            .map(|_| word_ids[rng.random_range(0..word_ids.len())])
            .collect();
        let tl: Vec<usize> = (0..n_tl)
            .map(|_| word_ids[rng.random_range(0..word_ids.len())])
            .collect();
        let sample = assemble_training_sample(&audio, &tr, &tl, &vocab).unwrap();

        count_ok &= sample.masked_count() == n_tr + n_tl + 2;
        let trained: Vec<usize> = sample
            .target_ids
            .iter()
            .zip(&sample.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| *t)
            .collect();
        let mut want = tr.clone();
        want.push(vocab.translation_sep());
        want.extend(&tl);
        want.push(vocab.eos());
        targets_ok &= trained == want;
        // the first trained position is the transcript separator itself
        let first = sample.loss_mask.iter().position(|&m| m).unwrap();
        targets_ok &= first == m + 2;

        let x = sample.embed_seq(&lm.tok_emb).unwrap();
        let logits = lm_forward(&lm, None, &x).unwrap();
        let base = masked_cross_entropy(&logits, &sample.target_ids, &sample.loss_mask).unwrap();
        for pos in (0..sample.len()).filter(|&i| !sample.loss_mask[i]) {
            for alt in 0..v {
                let mut t = sample.target_ids.clone();
                t[pos] = alt;
                let l = masked_cross_entropy(&logits, &t, &sample.loss_mask).unwrap();
                invariant &= l.to_bits() == base.to_bits();
                corruptions += 1;
            }
        }

        let prompt = assemble_inference_prompt(&audio, &vocab).unwrap();
        prefix_ok &= prompt.slots.as_slice() == &sample.prompt.slots[..prompt.len()];
        prefix_ok &= prompt.audio == sample.prompt.audio;
        prefix_ok &= prompt.len() == m + 3;
        // causal model: the prefix logits agree with the training pass
        let px = prompt.embed_seq(&lm.tok_emb).unwrap();
        let pl = lm_forward(&lm, None, &px).unwrap();
        for r in 0..pl.rows() {
            for c in 0..pl.cols() {
                prefix_ok &= (pl[(r, c)] - logits[(r, c)]).abs() < 1e-12;
            }
        }
    }
    verdict(
        invariant && count_ok && prefix_ok && targets_ok,
        format!(
            "{corruptions} single-position corruptions over 20 samples, loss bit-identical: {invariant}; \
             mask count = |transcript| + |translation| + 2: {count_ok}; trained targets in order: {targets_ok}; \
             inference prompt is the training prefix: {prefix_ok}"
        ),
    )
}

// ---------------------------------------------------------------- decoding

/// Next-token log-probabilities derived from a hash of (seed, prefix).
struct HashedModel {
    seed: u64,
    vocab: usize,
    sharpness: f64,
}

impl StepModel for HashedModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError> {
        let mut h = DefaultHasher::new();
        (self.seed, generated).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| self.sharpness * rng.random::<f64>())
            .collect();
        Ok(log_softmax(&logits))
    }
}

/// Every complete hypothesis up to `max_len` steps: eos-terminated, or cut at `max_len`.
fn enumerate(model: &HashedModel, max_len: usize, eos: usize) -> Vec<(Vec<usize>, f64, bool)> {
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::new(), 0.0)];
    for step in 0..max_len {
        let mut next = Vec::new();
        for (toks, lp) in frontier {
            let scores = model.next_log_probs(&toks).unwrap();
            for (t, s) in scores.iter().enumerate() {
                let mut seq: Vec<usize> = toks.clone();
                seq.push(t);
                if t == eos {
                    out.push((seq, lp + s, true));
                } else if step + 1 == max_len {
                    out.push((seq, lp + s, false));
                } else {
                    next.push((seq, lp + s));
                }
            }
        }
        frontier = next;
    }
    out
}

fn better(a: &(Vec<usize>, f64, bool), b: &(Vec<usize>, f64, bool)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

fn random_toy(rng: &mut ChaCha8Rng, i: u64) -> (HashedModel, usize, usize) {
    let vocab = rng.random_range(2..=6);
    let model = HashedModel {
        seed: i,
        vocab,
        sharpness: rng.random_range(0.5..4.0),
    };
    let max_len = rng.random_range(1..=4);
    let eos = rng.random_range(0..vocab);
    (model, max_len, eos)
}

fn decoding_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdec);
    let mut greedy_same = 0;
    for i in 0..100 {
        let (model, max_len, eos) = random_toy(&mut rng, i);
        let g = greedy_decode(&model, max_len, eos).unwrap();
        let b = beam_search(&model, &BeamConfig::new(1, max_len, eos)).unwrap();
        if g == b {
            greedy_same += 1;
        }
    }
    let mut optimum_same = 0;
    let mut first_miss = None;
    for i in 0..100 {
        let (model, max_len, eos) = random_toy(&mut rng, 1000 + i);
        let all = enumerate(&model, max_len, eos);
        let best = all
            .iter()
            .filter(|h| h.2)
            .fold(None::<&(Vec<usize>, f64, bool)>, |acc, h| match acc {
                Some(a) if !better(h, a) => Some(a),
                _ => Some(h),
            })
            .expect("eos reachable at every step");
        let b = beam_search(&model, &BeamConfig::new(2, max_len, eos)).unwrap();
        if b.finished && b.tokens == best.0 {
            optimum_same += 1;
        } else if first_miss.is_none() {
            first_miss = Some(format!(
                "model {}: beam {:?} ({:.4}) vs optimum {:?} ({:.4})",
                1000 + i,
                b.tokens,
                b.log_prob,
                best.0,
                best.1
            ));
        }
    }
    verdict(
        greedy_same == 100 && optimum_same == 100,
        format!(
            "beam=1 equals greedy on {greedy_same}/100; beam=2 equals the exhaustive optimum on {optimum_same}/100{}",
            first_miss.map(|m| format!(", first miss {m}")).unwrap_or_default()
        ),
    )
}

/// Beam pools rebuilt from the full enumeration: the step-`t` pool is the
/// best `k` of all length-`t` extensions of the previous pool plus its
/// finished members.
fn enumerated_beam(
    model: &HashedModel,
    k: usize,
    max_len: usize,
    eos: usize,
) -> (Vec<usize>, f64, bool) {
    let mut table: HashMap<Vec<usize>, f64> = HashMap::new();
    table.insert(Vec::new(), 0.0);
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in frontier {
            if p.last() == Some(&eos) {
                continue;
            }
            for (t, s) in model.next_log_probs(&p).unwrap().into_iter().enumerate() {
                let mut q = p.clone();
                q.push(t);
                table.insert(q.clone(), table[&p] + s);
                next.push(q);
            }
        }
        frontier = next;
    }
    let entry = |p: &Vec<usize>| (p.clone(), table[p], p.last() == Some(&eos));
    let mut pool = vec![entry(&Vec::new())];
    for _ in 0..max_len {
        if pool.iter().all(|h| h.2) {
            break;
        }
        let mut cands: Vec<(Vec<usize>, f64, bool)> = table
            .keys()
            .filter(|q| {
                pool.iter().any(|h| {
                    (h.2 && *q == &h.0) || (!h.2 && q.len() == h.0.len() + 1 && q.starts_with(&h.0))
                })
            })
            .map(entry)
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(k);
        pool = cands;
    }
    let pick = |v: Vec<&(Vec<usize>, f64, bool)>| {
        v.into_iter()
            .fold(None::<&(Vec<usize>, f64, bool)>, |acc, h| match acc {
                Some(a) if !better(h, a) => Some(a),
                _ => Some(h),
            })
            .cloned()
    };
    pick(pool.iter().filter(|h| h.2).collect())
        .or_else(|| pick(pool.iter().collect()))
        .unwrap()
}

fn decoding_beam_semantics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbea);
    let mut same = 0;
    let mut never_worse_than_greedy = 0;
    for i in 0..100 {
        let (model, max_len, eos) = random_toy(&mut rng, 5000 + i);
        let want = enumerated_beam(&model, 2, max_len, eos);
        let got = beam_search(&model, &BeamConfig::new(2, max_len, eos)).unwrap();
        if got.tokens == want.0 && got.finished == want.2 && (got.log_prob - want.1).abs() < 1e-12 {
            same += 1;
        }
        let g = greedy_decode(&model, max_len, eos).unwrap();
        if !g.finished || !got.finished || got.log_prob >= g.log_prob {
            never_worse_than_greedy += 1;
        }
    }
    verdict(
        same == 100,
        format!(
            "beam=2 equals the enumeration-built beam oracle on {same}/100 models \
             (beam >= greedy when both finish: {never_worse_than_greedy}/100, informational)"
        ),
    )
}

// ---------------------------------------------------------------- metrics

/// Levenshtein distance by plain recursion over suffixes, memoized.
fn brute_edit(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let sub = brute_edit(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = brute_edit(&a[1..], b, memo) + 1;
    let ins = brute_edit(a, &b[1..], memo) + 1;
    let v = sub.min(del).min(ins);
    memo.insert((a.len(), b.len()), v);
    v
}

fn random_words(rng: &mut ChaCha8Rng, max: usize, alphabet: u8) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

fn lpw_fuzz_string(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[char] = &[
        'a', 'B', 'z', 'Q', 'é', 'É', 'ß', 'İ', 'Σ', 'ς', 'ǅ', 'Ω', 'ﬁ', 'Ж', 'я', '中', '文', '7',
        ' ', ' ', '\t', '\n', '\u{a0}', '\u{2003}', '.', ',', '!', '?', '\'', '"', '-', '—', '¿',
        '«', '»', '(', ')', '[', '%', '&', '#', '@', '$', '+', '=', '^', '~', '…', '\u{301}', '😀',
    ];
    let n = rng.random_range(0..40);
    (0..n)
        .map(|_| POOL[rng.random_range(0..POOL.len())])
        .collect()
}

fn metric_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);

    let mut wer_ok = 0;
    for _ in 0..1000 {
        let r = random_words(&mut rng, 10, 4);
        let h = random_words(&mut rng, 10, 4);
        let want = brute_edit(&r, &h, &mut HashMap::new());
        let ok = match word_wer(&r, &h) {
            Ok(b) => {
                b.errors() == want
                    && b.ref_words == r.len()
                    && b.substitutions + b.deletions <= r.len()
                    && h.len() + b.deletions == r.len() + b.insertions
            }
            Err(_) => r.is_empty(),
        };
        if ok {
            wer_ok += 1;
        }
    }

    let mut reseg_ok = 0;
    for _ in 0..500 {
        let k = rng.random_range(1..=3);
        let refs: Vec<Vec<String>> = (0..k)
            .map(|_| {
                let n = rng.random_range(1..=4);
                (0..n)
                    .map(|_| format!("t{}", rng.random_range(0..4)))
                    .collect()
            })
            .collect();
        let n = rng.random_range(0..=12);
        let hyp: Vec<String> = (0..n)
            .map(|_| format!("t{}", rng.random_range(0..4)))
            .collect();
        let mut best = usize::MAX;
        for b1 in 0..=n {
            for b2 in b1..=n {
                if k < 3 && b2 != n {
                    continue;
                }
                if k < 2 && b1 != n {
                    continue;
                }
                let bounds = [0, b1, b2, n];
                let cuts: Vec<(usize, usize)> = match k {
                    1 => vec![(0, n)],
                    2 => vec![(0, b1), (b1, n)],
                    _ => vec![
                        (bounds[0], bounds[1]),
                        (bounds[1], bounds[2]),
                        (bounds[2], bounds[3]),
                    ],
                };
                let cost: usize = cuts
                    .iter()
                    .zip(&refs)
                    .map(|(&(s, e), r)| stllm::evalkit::edit_distance(r, &hyp[s..e]))
                    .sum();
                best = best.min(cost);
            }
        }
        let (doc, cost) = mwer_resegment(&hyp, &refs);
        let recomputed: usize = doc
            .segments
            .iter()
            .zip(&refs)
            .map(|(s, r)| stllm::evalkit::edit_distance(r, s))
            .sum();
        if cost == best && recomputed == best && doc.segments.concat() == hyp && doc.len() == k {
            reseg_ok += 1;
        }
    }

    let mut identical_ok = true;
    let fixed = [
        vec!["the cat sat on the mat .".to_string(), "a b c".to_string()],
        vec!["Hello, world!".to_string()],
        vec!["x".to_string()],
    ];
    let mut corpora: Vec<Vec<String>> = fixed.to_vec();
    for _ in 0..50 {
        let segs = rng.random_range(1..5);
        corpora.push(
            (0..segs)
                .map(|_| {
                    let w = rng.random_range(1..12);
                    (0..w)
                        .map(|_| format!("w{}", rng.random_range(0..6)))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect(),
        );
    }
    for c in &corpora {
        for mode in [BleuMode::DocAsWhole, BleuMode::Resegmented] {
            identical_ok &= bleu_corpus(c, c, mode, Smoothing::Exp).unwrap().score == 100.0;
        }
    }

    // c=2, r=3: BP = exp(1 - 3/2); unigram 2/2, bigram 1/1, no trigrams
    let f1 = bleu_corpus(
        &["the cat".into()],
        &["the cat sat".into()],
        BleuMode::DocAsWhole,
        Smoothing::Exp,
    )
    .unwrap()
    .score;
    // p = 3/4, 2/3, 1/2, then 0/1 smoothed to 1/2; BP = 1; (1/8)^(1/4)
    let f2 = bleu_corpus(
        &["a b c d".into()],
        &["a b c e".into()],
        BleuMode::DocAsWhole,
        Smoothing::Exp,
    )
    .unwrap()
    .score;
    let fixture_ok = format!("{f1:.4}") == "60.6531" && format!("{f2:.4}") == "59.4604";

    let mut idem = 0;
    for _ in 0..1000 {
        let s = lpw_fuzz_string(&mut rng);
        let once = lpw_normalize(&s);
        if lpw_normalize(&once) == once {
            idem += 1;
        }
    }

    let (fast, time) = within(Duration::from_secs(60), start);
    verdict(
        wer_ok == 1000 && reseg_ok == 500 && identical_ok && fixture_ok && idem == 1000 && fast,
        format!(
            "WER vs brute force {wer_ok}/1000; reseg vs exhaustive {reseg_ok}/500; identical BLEU = 100: {identical_ok}; \
             fixtures {f1:.4} and {f2:.4}; LPW idempotent {idem}/1000; {time}"
        ),
    )
}

// ---------------------------------------------------------------- report

fn report_fixtures() -> Verdict {
    let wer = format_wer(Some(0.041));
    let pair = format_bleu_pair(Some(41.33), Some(31.98));
    let mut report = EvalReport::new("cascade");
    report.upsert(TestSetScores {
        id: "tst-COMMON".into(),
        wer: Some(0.041),
        bleu_doc: Some(41.33),
        bleu_reseg: Some(31.98),
        ..Default::default()
    });
    let table = render_report(&[report]);
    let ok = wer == "4.1%"
        && pair == "41.33 / 31.98"
        && table.contains("| 4.1% ")
        && table.contains("| 41.33 / 31.98 ");
    verdict(ok, format!("cells {wer:?} and {pair:?}"))
}

// ---------------------------------------------------------------- overfit

const OVERFIT_STEPS: usize = 5000;

fn overfit_config(adapter: &str, lora: bool) -> PipelineConfig {
    let mut text = format!(
        "adapter = \"{adapter}\"\n\
         [model]\nd_model = 64\nn_layers = 2\nn_heads = 4\nd_ff = 128\nmax_len = 48\n\
         [train]\npeak_lr = 1e-4\nwarmup_steps = 10\ntotal_steps = {OVERFIT_STEPS}\nbatch_size = 2\n\
         [pretrain]\nsteps = 2000\n"
    );
    if lora {
        text.push_str("[lora]\nr = 8\nalpha = 8.0\n");
    }
    PipelineConfig::from_toml(&text).unwrap()
}

fn overfit_spec() -> SyntheticSpec {
    SyntheticSpec {
        seed: 7,
        n_samples: 32,
        vocab_size: 12,
        dim: 16,
        ..SyntheticSpec::default()
    }
}

struct OverfitResult {
    final_loss: f64,
    transcript_em: f64,
    translation_em: f64,
    wer: f64,
    bleu_reseg: f64,
    cli_wer: Option<f64>,
}

fn score_run(
    manifest: &Manifest,
    outputs: &[stllm::pipeline::InferenceRecord],
) -> (f64, f64, f64, f64) {
    let n = manifest.len() as f64;
    let refs_tr: Vec<String> = manifest
        .records()
        .iter()
        .map(|r| r.transcript.clone())
        .collect();
    let refs_tl: Vec<String> = manifest
        .records()
        .iter()
        .map(|r| r.translation.clone().unwrap())
        .collect();
    let hyp_tr: Vec<String> = outputs.iter().map(|o| o.transcript().to_string()).collect();
    let hyp_tl: Vec<String> = outputs
        .iter()
        .map(|o| o.translation().to_string())
        .collect();
    let em =
        |h: &[String], r: &[String]| h.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / n;
    let wer = score_asr(&hyp_tr, &refs_tr).unwrap().wer();
    let bleu = stllm::evalkit::score_st(&hyp_tl, &refs_tl, BleuMode::Resegmented)
        .unwrap()
        .score;
    (em(&hyp_tr, &refs_tr), em(&hyp_tl, &refs_tl), wer, bleu)
}

fn overfit(adapter: &str, lora: bool, dir: &Path, via_cli: bool) -> OverfitResult {
    let manifest = read_manifest(dir.join("manifest.jsonl")).unwrap();
    let cfg = overfit_config(adapter, lora);
    let out = run_training(&cfg, &manifest, |_, _| {}).unwrap();
    let inferred = run_inference(&out.model, &manifest);
    assert!(
        inferred
            .iter()
            .all(|r| !matches!(r.output, RecordOutput::Failed { .. })),
        "inference failed on some records"
    );
    let (transcript_em, translation_em, wer, bleu_reseg) = score_run(&manifest, &inferred);
    let cli_wer = via_cli.then(|| {
        let work = tempfile::tempdir().unwrap();
        let ck = work.path().join("model.ck");
        out.model.save(Some(&out.adam), &ck).unwrap();
        let bin = env!("CARGO_BIN_EXE_stllm");
        let m = dir.join("manifest.jsonl");
        let status = Command::new(bin)
            .args(["infer", "--checkpoint"])
            .arg(&ck)
            .arg("--manifest")
            .arg(&m)
            .arg("--out-dir")
            .arg(work.path())
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(0));
        let report = work.path().join("report.json");
        let status = Command::new(bin)
            .arg("eval")
            .arg("--hyp")
            .arg(work.path().join("transcripts.txt"))
            .arg("--manifest")
            .arg(&m)
            .args(["--task", "asr", "--mode", "reseg", "--out"])
            .arg(&report)
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(0));
        read_report(&report).unwrap().test_sets[0].wer.unwrap()
    });
    OverfitResult {
        final_loss: out.final_loss,
        transcript_em,
        translation_em,
        wer,
        bleu_reseg,
        cli_wer,
    }
}

fn end_to_end_overfit() -> Verdict {
    let start = Instant::now();
    let data = tempfile::tempdir().unwrap();
    synth_dataset(&overfit_spec(), data.path()).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut ctc_full_loss = f64::NAN;
    for adapter in ["ctc_collapse", "conv5x5"] {
        let r = overfit(adapter, false, data.path(), adapter == "ctc_collapse");
        let pass = r.transcript_em >= 0.95
            && r.translation_em >= 0.95
            && r.wer <= 0.05
            && r.bleu_reseg >= 90.0
            && r.cli_wer.is_none_or(|w| w <= 0.05);
        ok &= pass;
        if adapter == "ctc_collapse" {
            ctc_full_loss = r.final_loss;
        }
        lines.push(format!(
            "{adapter}: loss {:.5}, exact match {:.1}%/{:.1}%, WER {:.1}%, reseg BLEU {:.2}{}",
            r.final_loss,
            100.0 * r.transcript_em,
            100.0 * r.translation_em,
            100.0 * r.wer,
            r.bleu_reseg,
            r.cli_wer
                .map(|w| format!(", CLI WER {:.1}%", 100.0 * w))
                .unwrap_or_default()
        ));
    }
    let lora = overfit("ctc_collapse", true, data.path(), false);
    let ratio = lora.final_loss / ctc_full_loss;
    ok &= ratio <= 1.1;
    lines.push(format!(
        "low-rank loss {:.5} = {ratio:.2}x full fine-tuning (limit 1.10x)",
        lora.final_loss
    ));
    let (fast, time) = within(Duration::from_secs(15 * 60), start);
    ok &= fast;
    lines.push(time);
    verdict(ok, lines.join("; "))
}
