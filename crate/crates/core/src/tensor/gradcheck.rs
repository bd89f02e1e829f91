use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{ParamKind, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Probe at most this many entries per tensor (sampled without
    /// replacement); `None` probes every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index where the maximum was attained.
    pub worst: Option<(String, usize)>,
    pub probes: usize,
}

/// Central-difference check of a scalar function of `inputs`. Returns
/// `max |analytic − numeric| / max(1, |analytic|)` over every entry, where
/// the numeric slope divides by the realized step `(x+ε) − (x−ε)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let opts = GradCheckOptions {
        epsilon,
        ..Default::default()
    };
    let store = ParamStore::new();
    Ok(grad_check_params(|tape, _, xs| f(tape, xs), &store, inputs, &opts)?.max_rel_error)
}

/// Like [`grad_check`] but also probes every trainable parameter of `store`.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, store, &leaves)?;
    let grads = tape.gradients(loss)?;

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let xs: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, store, &xs)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |numel: usize| -> Vec<usize> {
        match opts.max_entries {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        }
    };

    let eps = opts.epsilon;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).cloned();
        let name = format!("input[{i}]");
        for j in pick(inputs[i].numel()) {
            let orig = work[i].data()[j];
            let (hi, lo) = (orig + eps, orig - eps);
            work[i].data_mut()[j] = hi;
            let plus = eval(store, &work)?;
            work[i].data_mut()[j] = lo;
            let minus = eval(store, &work)?;
            work[i].data_mut()[j] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[j]);
            record(&mut report, &name, j, a, (plus - minus) / (hi - lo));
        }
    }

    let mut probe = store.clone();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, p)| (id, p.name.clone(), p.value.numel()))
        .collect();
    for (id, name, numel) in ids {
        let analytic = grads.param(id).cloned();
        for j in pick(numel) {
            let orig = probe.get(id).value.data()[j];
            let (hi, lo) = (orig + eps, orig - eps);
            probe.get_mut(id).value.data_mut()[j] = hi;
            let plus = eval(&probe, inputs)?;
            probe.get_mut(id).value.data_mut()[j] = lo;
            let minus = eval(&probe, inputs)?;
            probe.get_mut(id).value.data_mut()[j] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[j]);
            record(&mut report, &name, j, a, (plus - minus) / (hi - lo));
        }
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, name: &str, j: usize, analytic: f64, numeric: f64) {
    let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
    report.probes += 1;
    if report.worst.is_none() || err > report.max_rel_error {
        report.max_rel_error = err;
        report.worst = Some((name.to_string(), j));
    }
}
