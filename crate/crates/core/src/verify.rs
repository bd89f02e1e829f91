//! Registry of named finite-difference gradient suites, each exercising one
//! differentiable building block in 64-bit on small shapes.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convlstm::{BiConvLstm, ConvLstmCell, ConvLstmState};
use crate::error::{Error, Result};
use crate::model::{TeslLayers, TeslNetConfig};
use crate::nn::{functional as F, BatchNorm, DwsConv, LayerNorm, Mode, TransposedConv};
use crate::params::{Init, ParamKind, ParamStore};
use crate::swin::{shift_mask, window_merge, window_partition, SwinAttention, SwinBlockPair, SwinConfig};
use crate::tensor::{grad_check_params, ops, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::train::loss_by_name;

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub const PROBE_STEP: f64 = 1e-5;

/// Step for the full network, where one bias probe shifts thousands of
/// pre-activations at once and a wider step straddles ReLU and max-pool kinks.
pub const NETWORK_PROBE_STEP: f64 = 1e-6;

pub trait GradSuite {
    fn name(&self) -> &str;
    fn about(&self) -> &str;
    fn run(&self) -> Result<GradCheckReport>;
}

struct FnSuite {
    name: &'static str,
    about: &'static str,
    run: fn() -> Result<GradCheckReport>,
}

impl GradSuite for FnSuite {
    fn name(&self) -> &str {
        self.name
    }
    fn about(&self) -> &str {
        self.about
    }
    fn run(&self) -> Result<GradCheckReport> {
        (self.run)()
    }
}

macro_rules! suites {
    ($($name:literal => $f:ident, $about:literal;)*) => {
        /// Every built-in suite, in execution order.
        pub fn registry() -> Vec<Box<dyn GradSuite>> {
            vec![$(Box::new(FnSuite { name: $name, about: $about, run: $f })),*]
        }
    };
}

suites! {
    "dws_conv" => dws_conv, "depthwise separable convolution with bias";
    "batch_norm" => batch_norm, "batch normalization, training and inference paths";
    "layer_norm" => layer_norm, "layer normalization";
    "activations" => activations, "ReLU, GELU, sigmoid, tanh";
    "maxpool" => maxpool, "2x2 max pooling";
    "conv_transpose" => conv_transpose, "2x2 stride-2 transposed convolution";
    "conv2d" => conv2d, "same-padded dense convolution";
    "matmul_softmax" => matmul_softmax, "batched and shared matmul into softmax";
    "window_attention" => window_attention, "shifted-window attention with mask and relative bias";
    "swin_pair" => swin_pair, "plain plus shifted Swin block pair";
    "convlstm_step" => convlstm_step, "one ConvLSTM step from a nonzero state";
    "bi_convlstm" => bi_convlstm, "bidirectional ConvLSTM fusion";
    "tesl_net" => tesl_net, "full network under the combined loss";
    "loss_bce" => loss_bce, "binary cross-entropy";
    "loss_dice" => loss_dice, "soft Dice loss";
    "loss_bce_dice" => loss_bce_dice, "combined BCE and Dice";
}

/// Suites matching `scope`: `all` or a single suite name.
pub fn select<'a>(suites: &'a [Box<dyn GradSuite>], scope: &str) -> Result<Vec<&'a dyn GradSuite>> {
    if scope == "all" {
        return Ok(suites.iter().map(|s| s.as_ref()).collect());
    }
    match suites.iter().find(|s| s.name() == scope) {
        Some(s) => Ok(vec![s.as_ref()]),
        None => {
            let names: Vec<_> = suites.iter().map(|s| s.name()).collect();
            Err(Error::Config(format!(
                "unknown gradcheck scope {scope:?} (expected all or one of {})",
                names.join(", ")
            )))
        }
    }
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub name: String,
    pub result: Result<GradCheckReport>,
    pub elapsed: Duration,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.max_rel_error < GRAD_TOLERANCE)
    }

    /// One human-readable status line.
    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        match &self.result {
            Ok(r) => {
                let worst = r.worst.as_ref().map_or(String::new(), |(t, i)| format!(" worst {t}[{i}]"));
                format!(
                    "{verdict} {:<18} max_rel_err {:.3e} probes {:>5} {:>7.2}s{worst}",
                    self.name,
                    r.max_rel_error,
                    r.probes,
                    self.elapsed.as_secs_f64()
                )
            }
            Err(e) => format!("{verdict} {:<18} error: {e}", self.name),
        }
    }
}

pub fn run_suites(suites: &[&dyn GradSuite]) -> Vec<SuiteOutcome> {
    suites
        .iter()
        .map(|s| {
            let t0 = Instant::now();
            let result = s.run();
            SuiteOutcome {
                name: s.name().to_string(),
                result,
                elapsed: t0.elapsed(),
            }
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.iter().product()).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Uniform values in `±[0.1, 1]`, keeping clear of the ReLU kink.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| {
            let v = r.gen_range(0.1..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Replaces every trainable parameter with `U(-0.5, 0.5)` so zero-initialized
/// tensors get exercised too.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for (_, p) in store.iter_mut() {
        if p.kind == ParamKind::Trainable {
            for v in p.value.data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
    }
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output entry matters.
fn probe<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = random(&mut rng(seed), &out.shape(), -1.0, 1.0);
    Ok(ops::sum_all(ops::mul(out, out.tape().constant(w))?))
}

fn opts(max_entries: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: PROBE_STEP,
        max_entries,
        seed: 7,
    }
}

fn dws_conv() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let layer = DwsConv::new(&mut store, &mut Init::new(1), "dws", 3, 4, 3)?;
    randomize(&mut store, 2);
    let x = random(&mut rng(3), &[2, 3, 5, 5], -1.0, 1.0);
    grad_check_params(|_, s, xs| probe(layer.forward(s, xs[0])?, 4), &store, &[x], &opts(None))
}

fn batch_norm() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3)?;
    randomize(&mut store, 2);
    let x = random(&mut rng(3), &[2, 3, 3, 4], -1.0, 1.0);
    grad_check_params(
        |_, s, xs| {
            let t = probe(bn.forward(s, xs[0], Mode::Train)?, 4)?;
            let e = probe(bn.forward(s, xs[0], Mode::Eval)?, 5)?;
            ops::add(t, e)
        },
        &store,
        &[x],
        &opts(None),
    )
}

fn layer_norm() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6)?;
    randomize(&mut store, 2);
    let x = random(&mut rng(3), &[2, 4, 6], -1.0, 1.0);
    grad_check_params(|_, s, xs| probe(ln.forward(s, xs[0])?, 4), &store, &[x], &opts(None))
}

fn activations() -> Result<GradCheckReport> {
    let x = off_zero(&mut rng(3), &[24]);
    grad_check_params(
        |_, _, xs| {
            let x = xs[0];
            let mut acc = probe(ops::relu(x), 1)?;
            for (i, y) in [ops::gelu(x), ops::sigmoid(x), ops::tanh(x)].into_iter().enumerate() {
                acc = ops::add(acc, probe(y, 2 + i as u64)?)?;
            }
            Ok(acc)
        },
        &ParamStore::new(),
        &[x],
        &opts(None),
    )
}

fn maxpool() -> Result<GradCheckReport> {
    // distinct values spaced well beyond the probe step
    let n = 2 * 2 * 4 * 6;
    let mut r = rng(3);
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut r);
    let x = Tensor::new(vec![2, 2, 4, 6], vals)?;
    grad_check_params(|_, _, xs| probe(F::maxpool2x2(xs[0])?, 4), &ParamStore::new(), &[x], &opts(None))
}

fn conv_transpose() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let up = TransposedConv::new(&mut store, &mut Init::new(1), "up", 3, 2)?;
    randomize(&mut store, 2);
    let x = random(&mut rng(3), &[2, 3, 3, 3], -1.0, 1.0);
    grad_check_params(|_, s, xs| probe(up.forward(s, xs[0])?, 4), &store, &[x], &opts(None))
}

fn conv2d() -> Result<GradCheckReport> {
    let mut r = rng(3);
    let inputs = [
        random(&mut r, &[2, 3, 4, 4], -1.0, 1.0),
        random(&mut r, &[2, 3, 3, 3], -1.0, 1.0),
        random(&mut r, &[2], -1.0, 1.0),
    ];
    grad_check_params(
        |_, _, xs| probe(F::conv2d_same(xs[0], xs[1], xs[2])?, 4),
        &ParamStore::new(),
        &inputs,
        &opts(None),
    )
}

fn matmul_softmax() -> Result<GradCheckReport> {
    let mut r = rng(3);
    let inputs = [
        random(&mut r, &[2, 3, 4], -1.0, 1.0),
        random(&mut r, &[2, 4, 5], -1.0, 1.0),
        random(&mut r, &[5, 2], -1.0, 1.0),
    ];
    grad_check_params(
        |_, _, xs| {
            let batched = ops::matmul(xs[0], xs[1])?;
            let shared = ops::matmul(ops::softmax_lastdim(batched), xs[2])?;
            probe(shared, 4)
        },
        &ParamStore::new(),
        &inputs,
        &opts(None),
    )
}

fn window_attention() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let attn = SwinAttention::new(&mut store, &mut Init::new(1), "attn", 4, 2, 2)?;
    randomize(&mut store, 2);
    let x = random(&mut rng(3), &[1, 4, 4, 4], -1.0, 1.0);
    grad_check_params(
        |_, s, xs| {
            let grid = window_partition(xs[0], 2, 1)?;
            let mask = shift_mask::<f64>(&grid.spec);
            debug_assert!(mask.is_some());
            probe(window_merge(attn.forward(s, grid, mask.as_ref())?)?, 4)
        },
        &store,
        &[x],
        &opts(None),
    )
}

fn swin_pair() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let cfg = SwinConfig {
        window: 2,
        heads: 2,
        mlp_ratio: 2,
    };
    let pair = SwinBlockPair::new(&mut store, &mut Init::new(1), "swin", &cfg, 4)?;
    randomize(&mut store, 2);
    let x = random(&mut rng(3), &[1, 4, 4, 4], -1.0, 1.0);
    grad_check_params(|_, s, xs| probe(pair.forward(s, xs[0])?, 4), &store, &[x], &opts(Some(12)))
}

fn convlstm_step() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let cell = ConvLstmCell::new(&mut store, &mut Init::new(1), "cell", 2, 3, 3)?;
    randomize(&mut store, 2);
    let mut r = rng(3);
    let inputs = [
        random(&mut r, &[1, 2, 3, 3], -1.0, 1.0),
        random(&mut r, &[1, 3, 3, 3], -1.0, 1.0),
        random(&mut r, &[1, 3, 3, 3], -1.0, 1.0),
    ];
    grad_check_params(
        |_, s, xs| {
            let next = cell.step(s, ConvLstmState { h: xs[1], c: xs[2] }, xs[0])?;
            ops::add(probe(next.h, 4)?, probe(next.c, 5)?)
        },
        &store,
        &inputs,
        &opts(Some(16)),
    )
}

fn bi_convlstm() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let bi = BiConvLstm::new(&mut store, &mut Init::new(1), "bi", 2, 2, 3)?;
    randomize(&mut store, 2);
    let mut r = rng(3);
    let seq: Vec<_> = (0..3).map(|_| random(&mut r, &[1, 2, 3, 3], -1.0, 1.0)).collect();
    grad_check_params(|_, s, xs| probe(bi.forward(s, xs)?, 4), &store, &seq, &opts(Some(16)))
}

fn tesl_net() -> Result<GradCheckReport> {
    let cfg = TeslNetConfig::tiny();
    let mut store = ParamStore::new();
    let layers = TeslLayers::build(&cfg, &mut store)?;
    let s = cfg.input_size;
    let mut r = rng(3);
    let x = random(&mut r, &[2, cfg.in_channels, s, s], 0.0, 1.0);
    let gt = random(&mut r, &[2, 1, s, s], 0.0, 1.0).map(|v| if v > 0.6 { 1.0 } else { 0.0 });
    let loss = loss_by_name("bce+dice")?;
    grad_check_params(
        |tape: &Tape<f64>, st, xs| {
            let pred = layers.forward(st, xs[0], Mode::Train)?;
            loss.forward_f64(pred, tape.constant(gt.clone()))
        },
        &store,
        &[x],
        &GradCheckOptions {
            epsilon: NETWORK_PROBE_STEP,
            ..opts(Some(3))
        },
    )
}

fn loss_suite(name: &str) -> Result<GradCheckReport> {
    let mut r = rng(3);
    let pred = random(&mut r, &[2, 1, 4, 4], 0.05, 0.95);
    let gt = random(&mut r, &[2, 1, 4, 4], 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let loss = loss_by_name(name)?;
    grad_check_params(
        |tape, _, xs| loss.forward_f64(xs[0], tape.constant(gt.clone())),
        &ParamStore::new(),
        &[pred],
        &opts(None),
    )
}

fn loss_bce() -> Result<GradCheckReport> {
    loss_suite("bce")
}

fn loss_dice() -> Result<GradCheckReport> {
    loss_suite("dice")
}

fn loss_bce_dice() -> Result<GradCheckReport> {
    loss_suite("bce+dice")
}
