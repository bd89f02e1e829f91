//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits nonzero if any fails.
//!
//! Pass a substring of a criterion title to run only matching criteria.

#![allow(clippy::needless_range_loop)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tesl_core::convlstm::{ConvLstmCell, ConvLstmState};
use tesl_core::data::{synth_generate, write_corpus, Batch, SampleSource, SynthOptions, SynthSource};
use tesl_core::metrics::{compute_metrics, confusion, ConfusionCounts, Metrics};
use tesl_core::model::{load_weights, save_weights, Preset, TeslNet, TeslNetConfig};
use tesl_core::nn::functional as F;
use tesl_core::params::{Init, ParamKind, ParamStore};
use tesl_core::swin::{
    shift_mask, swin_pair_forward, window_merge, window_merge_layout, window_partition, window_partition_layout,
    Layout, SwinAttention, SwinBlockPair, SwinConfig,
};
use tesl_core::tensor::{Tape, Tensor};
use tesl_core::train::{
    evaluate, fit, loss_by_name, train_step, Action, Adam, EpochRecord, FitOutputs, TrainConfig, Validator, LOG_FILE,
};
use tesl_core::verify::{registry, run_suites, select, GRAD_TOLERANCE};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    title: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, title: "gradient suite", run: gradient_suite },
    Criterion { id: 2, title: "structural roundtrips", run: structural_roundtrips },
    Criterion { id: 3, title: "loop oracles", run: loop_oracles },
    Criterion { id: 4, title: "metric oracle", run: metric_oracle },
    Criterion { id: 5, title: "swin identity and mask", run: swin_identity_and_mask },
    Criterion { id: 6, title: "desk overfit", run: desk_overfit },
    Criterion { id: 7, title: "schedule conformance", run: schedule_conformance },
    Criterion { id: 8, title: "shape contract", run: shape_contract },
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let chosen: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.title.contains(f.as_str())))
        .collect();
    let mut failed = 0;
    for c in &chosen {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {}. {} ({secs:.1}s): {detail}", c.id, c.title),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {}. {} ({secs:.1}s): {why}", c.id, c.title);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", chosen.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

/// Runs `check` on `cases` seeds; the closure returns the largest deviation
/// it saw, which must stay within `tol`.
fn property(cases: u32, tol: f64, check: impl Fn(&mut ChaCha8Rng) -> Result<f64, String>) -> Result<f64, String> {
    let worst = std::cell::Cell::new(0.0f64);
    runner(cases)
        .run(&proptest::num::u64::ANY, |seed| {
            let dev = check(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(TestCaseError::fail)?;
            worst.set(worst.get().max(dev));
            if dev <= tol {
                Ok(())
            } else {
                Err(TestCaseError::fail(format!("deviation {dev:e} > {tol:e}")))
            }
        })
        .map_err(err)?;
    Ok(worst.get())
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        if p.kind == ParamKind::Trainable {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let reg = registry();
    let outcomes = run_suites(&select(&reg, "all").map_err(err)?);
    let elapsed = t0.elapsed();
    for o in &outcomes {
        println!("       {}", o.line());
    }
    let failing: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.clone()).collect();
    ensure(failing.is_empty(), || format!("suites above {GRAD_TOLERANCE:e}: {}", failing.join(", ")))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}, budget 5 min"))?;
    let worst = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    Ok(format!(
        "{} suites, worst relative error {worst:.2e} < {GRAD_TOLERANCE:e}, {:.1}s < 300s",
        outcomes.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

/// `out[n, c, i, j] = x[n, c, (i + sy) mod H, (j + sx) mod W]`.
fn roll(x: &Tensor<f64>, sy: usize, sx: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let mut out = Vec::with_capacity(x.numel());
    for a in 0..n {
        for b in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.push(x.get(&[a, b, (i + sy) % h, (j + sx) % w]));
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn window_cases(r: &mut ChaCha8Rng) -> (Tensor<f64>, usize, usize) {
    let m = r.gen_range(1..=4);
    let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
    let (h, w) = (m * r.gen_range(1..=3), m * r.gen_range(1..=3));
    let shift = if r.gen_bool(0.5) { m / 2 } else { 0 };
    (random(r, &[n, c, h, w]), m, shift)
}

fn structural_roundtrips() -> Outcome {
    let cases = property(128, 0.0, |r| {
        let (x, m, shift) = window_cases(r);
        let tape = Tape::<f64>::no_grad();
        let grid = window_partition(tape.constant(x.clone()), m, shift).map_err(err)?;
        let tokens = grid.tokens.value();
        let back = window_merge(grid).map_err(err)?.value();
        ensure(back.data() == x.data(), || "NCHW partition/merge is not the identity".into())?;

        // cyclic shift: partitioning with shift s equals plain tiling of the rolled map
        let rolled = roll(&x, shift, shift);
        let plain = window_partition(tape.constant(rolled), m, 0).map_err(err)?;
        ensure(plain.tokens.value().data() == tokens.data(), || "shifted tiling differs from roll + tile".into())?;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let unrolled = roll(&window_merge(plain).map_err(err)?.value(), (h - shift % h) % h, (w - shift % w) % w);
        ensure(unrolled.data() == x.data(), || "unshift does not invert shift".into())?;

        let nhwc = tape.constant(Tensor::new(vec![x.shape()[0], h, w, x.shape()[1]], x.data().to_vec()).unwrap());
        let g = window_partition_layout(nhwc, Layout::Nhwc, m, shift).map_err(err)?;
        let back = window_merge_layout(g, Layout::Nhwc).map_err(err)?.value();
        ensure(back.data() == x.data(), || "NHWC partition/merge is not the identity".into())?;
        Ok(0.0)
    })
    .map(|_| "128 random maps, both layouts, shifts {0, M/2}")?;

    // weights
    let cfg = TeslNetConfig::desk();
    let net = TeslNet::<f32>::build(&cfg).map_err(err)?;
    let bytes = save_weights(&net);
    let mut other = TeslNet::<f32>::build(&TeslNetConfig { seed: 1234, ..cfg }).map_err(err)?;
    ensure(save_weights(&other) != bytes, || "different seeds should give different weights".into())?;
    load_weights(&mut other, &bytes).map_err(err)?;
    ensure(save_weights(&other) == bytes, || "save/load/save is not byte-identical".into())?;
    let x = Tensor::<f32>::new(vec![1, 3, 64, 64], (0..3 * 64 * 64).map(|i| (i % 97) as f32 / 97.0).collect())
        .map_err(err)?;
    ensure(net.predict(&x).map_err(err)?.data() == other.predict(&x).map_err(err)?.data(), || {
        "reloaded network predicts differently".into()
    })?;

    // synthetic corpus regeneration
    let (a, b) = (synth_generate(8, 64, 7), synth_generate(8, 64, 7));
    for (sa, sb) in a.iter().zip(&b) {
        ensure(sa.rgb == sb.rgb && sa.sample.mask == sb.sample.mask, || "synth regeneration differs".into())?;
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    write_corpus(&da, &a).map_err(err)?;
    write_corpus(&db, &b).map_err(err)?;
    let mut files = 0;
    for sub in ["images", "masks"] {
        for e in std::fs::read_dir(da.join(sub)).map_err(err)? {
            let name = e.map_err(err)?.file_name();
            let (fa, fb) = (std::fs::read(da.join(sub).join(&name)), std::fs::read(db.join(sub).join(&name)));
            ensure(fa.map_err(err)? == fb.map_err(err)?, || format!("{name:?} differs"))?;
            files += 1;
        }
    }
    ensure(
        std::fs::read(da.join("manifest.tsv")).map_err(err)? == std::fs::read(db.join("manifest.tsv")).map_err(err)?,
        || "manifest differs".into(),
    )?;
    Ok(format!("windows: {cases}; weights byte-identical; {files} corpus files byte-identical"))
}

// ---------------------------------------------------------------- 3

/// Dense-loop window attention over an NCHW map. Tokens attend only to tokens
/// whose source pixels lie on the same side of the wrap seam in both axes.
fn attention_oracle(store: &ParamStore<f64>, attn: &SwinAttention, x: &Tensor<f64>, m: usize, s: usize) -> Vec<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let (heads, d) = (attn.heads, c / attn.heads);
    let side = 2 * m - 1;
    let lin = |l: &tesl_core::nn::Linear, v: &[f64]| -> Vec<f64> {
        let (wt, b) = (&store.get(l.weight).value, &store.get(l.bias).value);
        (0..c)
            .map(|o| b.data()[o] + (0..c).map(|i| v[i] * wt.data()[i * c + o]).sum::<f64>())
            .collect()
    };
    let table = &store.get(attn.bias_table).value;
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for wy in 0..h / m {
            for wx in 0..w / m {
                let pos: Vec<(usize, usize)> = (0..m * m).map(|t| (wy * m + t / m, wx * m + t % m)).collect();
                let src: Vec<(usize, usize)> = pos.iter().map(|&(r, q)| ((r + s) % h, (q + s) % w)).collect();
                let label: Vec<(bool, bool)> = pos.iter().map(|&(r, q)| (r + s >= h, q + s >= w)).collect();
                let feat: Vec<Vec<f64>> = src.iter().map(|&(y, xx)| (0..c).map(|ch| x.get(&[b, ch, y, xx])).collect()).collect();
                let q: Vec<_> = feat.iter().map(|f| lin(&attn.q, f)).collect();
                let k: Vec<_> = feat.iter().map(|f| lin(&attn.k, f)).collect();
                let v: Vec<_> = feat.iter().map(|f| lin(&attn.v, f)).collect();
                for i in 0..m * m {
                    let mut ctx = vec![0.0; c];
                    for hd in 0..heads {
                        let allowed: Vec<usize> = (0..m * m).filter(|&j| s == 0 || label[j] == label[i]).collect();
                        let score: Vec<f64> = allowed
                            .iter()
                            .map(|&j| {
                                let dot: f64 = (0..d).map(|e| q[i][hd * d + e] * k[j][hd * d + e]).sum();
                                let (ri, ci) = (i / m, i % m);
                                let (rj, cj) = (j / m, j % m);
                                let rel = (ri + m - 1 - rj) * side + (ci + m - 1 - cj);
                                dot / (d as f64).sqrt() + table.data()[hd * side * side + rel]
                            })
                            .collect();
                        let top = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = score.iter().map(|z| (z - top).exp()).collect();
                        let total: f64 = e.iter().sum();
                        for (wgt, &j) in e.iter().zip(&allowed) {
                            for ee in 0..d {
                                ctx[hd * d + ee] += wgt / total * v[j][hd * d + ee];
                            }
                        }
                    }
                    let y = lin(&attn.proj, &ctx);
                    let (sy, sx) = src[i];
                    for ch in 0..c {
                        out[((b * c + ch) * h + sy) * w + sx] = y[ch];
                    }
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Same-padded dense convolution by nested loops.
fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, bias: Option<&[f64]>) -> Vec<f64> {
    let [n, ci, h, w] = x.shape().try_into().unwrap();
    let [co, _, k, _] = wt.shape().try_into().unwrap();
    let p = k / 2;
    let mut out = vec![0.0; n * co * h * w];
    for b in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky, xx + kx);
                                if sy < p || sx < p || sy - p >= h || sx - p >= w {
                                    continue;
                                }
                                acc += x.get(&[b, i, sy - p, sx - p]) * wt.get(&[o, i, ky, kx]);
                            }
                        }
                    }
                    out[((b * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn loop_oracles() -> Outcome {
    let attn = property(128, 1e-10, |r| {
        let m = [2, 4][r.gen_range(0..2)];
        let (heads, d) = (r.gen_range(1..=2), r.gen_range(1..=3));
        let c = heads * d;
        let (n, h, w) = (r.gen_range(1..=2), m * r.gen_range(1..=2), m * r.gen_range(1..=2));
        let s = if r.gen_bool(0.5) { m / 2 } else { 0 };
        let mut store = ParamStore::new();
        let layer = SwinAttention::new(&mut store, &mut Init::new(0), "a", c, heads, m).map_err(err)?;
        randomize(&mut store, r);
        let x = random(r, &[n, c, h, w]);
        let tape = Tape::no_grad();
        let grid = window_partition(tape.constant(x.clone()), m, s).map_err(err)?;
        let mask = shift_mask::<f64>(&grid.spec);
        let got = window_merge(layer.forward(&store, grid, mask.as_ref()).map_err(err)?).map_err(err)?.value();
        Ok(max_diff(got.data(), &attention_oracle(&store, &layer, &x, m, s)))
    })?;

    let lstm = property(128, 1e-10, |r| {
        let (n, cin, hid) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = [1, 3][r.gen_range(0..2)];
        let (h, w) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let mut store = ParamStore::new();
        let cell = ConvLstmCell::new(&mut store, &mut Init::new(0), "c", cin, hid, k).map_err(err)?;
        randomize(&mut store, r);
        let (x, h0, c0) = (random(r, &[n, cin, h, w]), random(r, &[n, hid, h, w]), random(r, &[n, hid, h, w]));
        let tape = Tape::no_grad();
        let state = ConvLstmState {
            h: tape.constant(h0.clone()),
            c: tape.constant(c0.clone()),
        };
        let next = cell.step(&store, state, tape.constant(x.clone())).map_err(err)?;

        // [h, x] along channels, then one same-padded conv per gate
        let mut hx = Vec::with_capacity(n * (hid + cin) * h * w);
        for b in 0..n {
            hx.extend_from_slice(&h0.data()[b * hid * h * w..(b + 1) * hid * h * w]);
            hx.extend_from_slice(&x.data()[b * cin * h * w..(b + 1) * cin * h * w]);
        }
        let hx = Tensor::new(vec![n, hid + cin, h, w], hx).unwrap();
        let pre: Vec<Vec<f64>> = (0..4)
            .map(|g| {
                let wt = &store.get(cell.kernels[g]).value;
                conv_oracle(&hx, wt, Some(store.get(cell.biases[g]).value.data()))
            })
            .collect();
        let mut dev = 0.0f64;
        for idx in 0..n * hid * h * w {
            let (i, f, o) = (sigmoid(pre[0][idx]), sigmoid(pre[1][idx]), sigmoid(pre[2][idx]));
            let cand = pre[3][idx].tanh();
            let c1 = f * c0.data()[idx] + i * cand;
            let h1 = o * c1.tanh();
            dev = dev
                .max((next.c.value().data()[idx] - c1).abs())
                .max((next.h.value().data()[idx] - h1).abs());
        }
        Ok(dev)
    })?;

    let pool = property(128, 1e-10, |r| {
        let (n, c) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (2 * r.gen_range(1..=4), 2 * r.gen_range(1..=4));
        let x = random(r, &[n, c, h, w]);
        let tape = Tape::no_grad();
        let got = F::maxpool2x2(tape.constant(x.clone())).map_err(err)?.value();
        let mut want = Vec::new();
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                best = best.max(x.get(&[b, ch, 2 * y + dy, 2 * xx + dx]));
                            }
                        }
                        want.push(best);
                    }
                }
            }
        }
        Ok(max_diff(got.data(), &want))
    })?;

    let convs = property(128, 1e-10, |r| {
        let (n, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let x = random(r, &[n, ci, h, w]);
        let tape = Tape::no_grad();
        let cst = |t: &Tensor<f64>| tape.constant(t.clone());
        let mut dev = 0.0f64;

        // depthwise: dense oracle with a block-diagonal kernel
        let k = [1, 3, 5][r.gen_range(0..3)];
        let dw = random(r, &[ci, 1, k, k]);
        let mut dense = Tensor::zeros(vec![ci, ci, k, k]);
        for i in 0..ci {
            for j in 0..k * k {
                dense.data_mut()[(i * ci + i) * k * k + j] = dw.data()[i * k * k + j];
            }
        }
        let got = F::depthwise_conv2d(cst(&x), cst(&dw)).map_err(err)?.value();
        dev = dev.max(max_diff(got.data(), &conv_oracle(&x, &dense, None)));

        let pw = random(r, &[co, ci, 1, 1]);
        let b = random(r, &[co]);
        let got = F::pointwise_conv2d(cst(&x), cst(&pw), cst(&b)).map_err(err)?.value();
        dev = dev.max(max_diff(got.data(), &conv_oracle(&x, &pw, Some(b.data()))));

        let k = [1, 3][r.gen_range(0..2)];
        let full = random(r, &[co, ci, k, k]);
        let got = F::conv2d_same(cst(&x), cst(&full), cst(&b)).map_err(err)?.value();
        dev = dev.max(max_diff(got.data(), &conv_oracle(&x, &full, Some(b.data()))));

        let tk = random(r, &[ci, co, 2, 2]);
        let got = F::conv_transpose2x2(cst(&x), cst(&tk)).map_err(err)?.value();
        let mut want = vec![0.0; n * co * 4 * h * w];
        for bb in 0..n {
            for o in 0..co {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            acc += x.get(&[bb, i, oy / 2, ox / 2]) * tk.get(&[i, o, oy % 2, ox % 2]);
                        }
                        want[((bb * co + o) * 2 * h + oy) * 2 * w + ox] = acc;
                    }
                }
            }
        }
        dev = dev.max(max_diff(got.data(), &want));
        Ok(dev)
    })?;

    Ok(format!(
        "128 cases each, max |Δ|: attention {attn:.1e}, ConvLSTM {lstm:.1e}, maxpool {pool:.1e}, convs {convs:.1e} (≤ 1e-10)"
    ))
}

// ---------------------------------------------------------------- 4

fn direct_metrics(pred: &[u8], gt: &[u8]) -> (ConfusionCounts, Metrics) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let q = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (
        ConfusionCounts { tp, tn, fp, fn_ },
        Metrics {
            acc: q(tp + tn, tp + tn + fp + fn_),
            se: q(tp, tp + fn_),
            sp: q(tn, tn + fp),
            iou: q(tp, tp + fp + fn_),
            dice: q(2 * tp, 2 * tp + fp + fn_),
        },
    )
}

fn metric_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut identity_dev = 0.0f64;
    for case in 0..500 {
        let (pd, gd) = match case % 25 {
            0 => (0.0, 0.0),
            1 => (1.0, 1.0),
            2 => (0.3, 0.0),
            3 => (0.0, 0.4),
            _ => (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)),
        };
        let gt: Vec<u8> = (0..256).map(|_| u8::from(r.gen_bool(gd))).collect();
        let pred: Vec<u8> = (0..256).map(|_| u8::from(r.gen_bool(pd))).collect();
        let counts = confusion(&pred, &gt).map_err(err)?;
        let got = compute_metrics(&counts).map_err(err)?;
        let (want_counts, want) = direct_metrics(&pred, &gt);
        ensure(counts == want_counts && got == want, || format!("case {case}: {got:?} != {want:?}"))?;
        identity_dev = identity_dev.max((got.dice - 2.0 * got.iou / (1.0 + got.iou)).abs());

        let perfect = compute_metrics(&confusion(&gt, &gt).map_err(err)?).map_err(err)?;
        let ones = [perfect.acc, perfect.se, perfect.sp, perfect.iou, perfect.dice];
        ensure(ones.iter().all(|&v| v == 1.0), || format!("case {case}: perfect prediction gave {perfect:?}"))?;
    }
    ensure(identity_dev <= 1e-12, || format!("Dice-IoU identity off by {identity_dev:e}"))?;
    Ok(format!("500 random 16x16 pairs exact; Dice = 2J/(1+J) within {identity_dev:.1e}; perfect case all 1.0"))
}

// ---------------------------------------------------------------- 5

fn swin_identity_and_mask() -> Outcome {
    let cfg = SwinConfig {
        window: 4,
        heads: 2,
        mlp_ratio: 4,
    };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let pair = SwinBlockPair::new(&mut store, &mut Init::new(3), "s", &cfg, 8).map_err(err)?;
    randomize(&mut store, &mut r);
    let mut zeroed = 0;
    for block in [&pair.block1, &pair.block2] {
        let lins = [&block.attn.q, &block.attn.k, &block.attn.v, &block.attn.proj, &block.mlp.fc1, &block.mlp.fc2];
        let mut ids: Vec<_> = lins.iter().flat_map(|l| [l.weight, l.bias]).collect();
        ids.push(block.attn.bias_table);
        for id in ids {
            store.get_mut(id).value.fill(0.0);
            zeroed += 1;
        }
    }
    let x = random(&mut r, &[2, 8, 8, 8]);
    let tape = Tape::no_grad();
    let y = swin_pair_forward(&pair, &store, tape.constant(x.clone())).map_err(err)?.value();
    ensure(y.data() == x.data(), || format!("zeroed pair is not the identity (max |Δ| {:e})", max_diff(y.data(), x.data())))?;

    // cross-region attention mass under the shift mask, with large random weights
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (m, hw) in [(4usize, 8usize), (4, 4), (2, 6)] {
        let mut store = ParamStore::<f64>::new();
        let attn = SwinAttention::new(&mut store, &mut Init::new(1), "a", 4, 2, m).map_err(err)?;
        randomize(&mut store, &mut r);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 4.0);
        }
        let x = random(&mut r, &[1, 4, hw, hw]);
        let tape = Tape::no_grad();
        let s = m / 2;
        let grid = window_partition(tape.constant(x), m, s).map_err(err)?;
        let mask = shift_mask::<f64>(&grid.spec).ok_or("no mask for a shifted grid")?;
        let (_, weights) = attn.forward_with_weights(&store, grid, Some(&mask)).map_err(err)?;
        let wv = weights.value();
        let tw = m * m;
        let per_row = hw / m;
        for win in 0..per_row * per_row {
            let (wy, wx) = (win / per_row, win % per_row);
            let label = |t: usize| (wy * m + t / m + s >= hw, wx * m + t % m + s >= hw);
            for h in 0..2 {
                for i in 0..tw {
                    let cross: f64 = (0..tw)
                        .filter(|&j| label(j) != label(i))
                        .map(|j| wv.data()[((win * 2 + h) * tw + i) * tw + j])
                        .sum();
                    worst = worst.max(cross);
                    checked += 1;
                }
            }
        }
    }
    ensure(worst < 1e-9, || format!("cross-region attention mass {worst:e} ≥ 1e-9"))?;
    Ok(format!(
        "zeroed pair ({zeroed} tensors) is exactly the identity; max cross-region mass {worst:.1e} < 1e-9 over {checked} rows"
    ))
}

// ---------------------------------------------------------------- 6

fn desk_overfit() -> Outcome {
    const STEPS: usize = 200;
    const LR: f64 = 0.001;
    let t0 = Instant::now();
    let source = SynthSource::new(SynthOptions {
        n: 8,
        val_is_train: true,
        ..SynthOptions::new(7, 64)
    })
    .map_err(err)?;
    let ids = source.split().train.clone();
    let batch = Batch::load(&source, &ids).map_err(err)?;
    let mut net = TeslNet::<f32>::build(&Preset::Desk.config()).map_err(err)?;
    let mut adam = Adam::new(&net.params);
    let loss = loss_by_name("bce+dice").map_err(err)?;
    let mut losses = Vec::with_capacity(STEPS);
    for _ in 0..STEPS {
        losses.push(train_step(&mut net, &mut adam, loss.as_ref(), &batch, LR).map_err(err)?);
    }
    let report = evaluate(&net, &source, &ids, 8, 0.5, |_, _, _| Ok(())).map_err(err)?;
    let elapsed = t0.elapsed();
    let (first, last) = (losses[0], losses[STEPS - 1]);
    let dice = report.mean.dice;
    ensure(dice >= 0.95, || format!("mean training Dice {dice:.4} < 0.95"))?;
    ensure(last < 0.1 * first, || format!("final loss {last:.4} ≥ 0.1 × initial {first:.4}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}, budget 10 min"))?;
    Ok(format!(
        "{STEPS} Adam steps at lr {LR}: mean Dice {dice:.4} ≥ 0.95, loss {first:.4} → {last:.4} (ratio {:.3} < 0.1), {:.0}s",
        last / first,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 7

struct Stagnant;

impl Validator for Stagnant {
    fn validate(&mut self, _: &TeslNet<f32>, _: usize) -> tesl_core::Result<Metrics> {
        Ok(Metrics {
            acc: 0.5,
            se: 0.5,
            sp: 0.5,
            iou: 0.5,
            dice: 0.5,
        })
    }
}

fn schedule_conformance() -> Outcome {
    let source = SynthSource::new(SynthOptions {
        n: 2,
        val_is_train: true,
        ..SynthOptions::new(1, 32)
    })
    .map_err(err)?;
    let mut net = TeslNet::<f32>::build(&TeslNetConfig::tiny()).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(err)?;
    fit(
        &mut net,
        &source,
        &cfg,
        &mut Stagnant,
        &FitOutputs {
            dir: Some(dir.path().to_path_buf()),
        },
    )
    .map_err(err)?;
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).map_err(err)?;
    let log: Vec<EpochRecord> = text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(err)?;

    let stop_at = 1 + cfg.early_stop_patience;
    ensure(log.len() == stop_at, || format!("log has {} epochs, expected stop at {stop_at}", log.len()))?;
    for rec in &log {
        let (want_lr, want_action) = match rec.epoch {
            e if e < 1 + cfg.lr_patience => (0.001_f64, Action::None),
            e if e == 1 + cfg.lr_patience => (0.00025, Action::ReduceLr),
            e if e == stop_at => (0.00025, Action::EarlyStop),
            _ => (0.00025, Action::None),
        };
        ensure(rec.lr.to_bits() == want_lr.to_bits() && rec.action == want_action, || {
            format!("epoch {}: lr {:e} {:?}, expected {want_lr:e} {want_action:?}", rec.epoch, rec.lr, rec.action)
        })?;
    }
    // decisions are a pure function of the logged metric history
    let mut replay = cfg.schedule();
    for rec in &log {
        let a = replay.observe(rec.val_dice);
        ensure(a == rec.action && replay.lr().to_bits() == rec.lr.to_bits(), || {
            format!("replay diverges at epoch {}", rec.epoch)
        })?;
    }
    Ok(format!(
        "lr 0.001 ×{} epochs → 0.00025 (reduce_lr) at epoch {}, early_stop at epoch {stop_at}; bit-exact in the log and on replay",
        cfg.lr_patience,
        1 + cfg.lr_patience
    ))
}

// ---------------------------------------------------------------- 8

fn shape_contract() -> Outcome {
    let mut lines = Vec::new();
    for preset in Preset::ALL {
        let cfg = preset.config();
        let s = cfg.input_size;
        let net = TeslNet::<f32>::build(&cfg).map_err(err)?;
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::new(vec![1, 3, s, s], (0..3 * s * s).map(|_| r.gen_range(0.0..1.0)).collect())
            .map_err(err)?;
        let t0 = Instant::now();
        let y = net.predict(&x).map_err(err)?;
        let secs = t0.elapsed().as_secs_f64();
        ensure(y.shape() == [1, 1, s, s], || format!("{}: output shape {:?}", preset.name(), y.shape()))?;
        ensure(y.data().iter().all(|&v| v > 0.0 && v < 1.0), || {
            format!("{}: outputs leave the open interval (0, 1)", preset.name())
        })?;
        lines.push(format!("{}: 1x3x{s}x{s} → 1x1x{s}x{s} in (0,1) ({secs:.2}s)", preset.name()));
    }
    Ok(lines.join("; "))
}
