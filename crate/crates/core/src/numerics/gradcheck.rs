//! Central finite differences, the reference every reverse-mode gradient is
//! checked against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, g) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-6)`.
///
/// The floor sits well above the roundoff of a central difference with the
/// default step (about 1e-11 for unit-sized outputs), so a gradient that is
/// exactly zero does not turn that roundoff into a large ratio.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    diff / scale
}

/// Compares reverse-mode and finite-difference gradients of a graph-building
/// function with respect to each of its inputs.
///
/// The scalar being differentiated is `Σ_i r_i · out_i` with a fixed random
/// projection `r`, so every output element contributes. Returns the relative
/// error per input.
pub fn check_graph_fn(
    inputs: &[Tensor],
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    check_inputs_impl(None, inputs, seed, build)
}

/// [`check_graph_fn`] for functions that also read parameters from `store`.
pub fn check_inputs(
    store: &ParamStore,
    inputs: &[Tensor],
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    check_inputs_impl(Some(store), inputs, seed, build)
}

fn check_inputs_impl(
    store: Option<&ParamStore>,
    inputs: &[Tensor],
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut projection: Option<Tensor> = None;
    let mut eval = |xs: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = match store {
            Some(s) => Graph::with_params(s),
            None => Graph::new(),
        };
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let r = projection
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = g.shape(out).to_vec();
                let n = g.value(out).len();
                Tensor::from_parts(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .clone();
        let rv = g.constant(r);
        let prod = g.mul(out, rv)?;
        let loss = g.sum(prod);
        let value = g.data(loss)[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut xs = inputs.to_vec();
        let mut failure = None;
        let fd = finite_diff_grad(
            |x| {
                xs[i] = x.clone();
                match eval(&xs, false) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &inputs[i],
            DEFAULT_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        errors.push(relative_error(&analytic[i], fd.data()));
    }
    Ok(errors)
}

/// Reverse-mode versus finite-difference gradients for every trainable
/// parameter a graph-building function reads from `store`.
///
/// With `max_entries = Some(n)`, at most `n` evenly spaced entries of each
/// parameter are probed. Returns `(name, relative error)` per parameter that
/// the output depends on, in store order.
pub fn check_params(
    store: &ParamStore,
    seed: u64,
    max_entries: Option<usize>,
    build: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<Vec<(String, f64)>> {
    let mut projection: Option<Tensor> = None;
    let mut eval = |s: &ParamStore| -> Result<(f64, Option<super::graph::Gradients>)> {
        let mut g = Graph::with_params(s);
        let out = build(&mut g)?;
        let r = projection
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = g.value(out).len();
                Tensor::from_parts(g.shape(out).to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .clone();
        let rv = g.constant(r);
        let prod = g.mul(out, rv)?;
        let loss = g.sum(prod);
        Ok((g.data(loss)[0], Some(g.backward(loss)?)))
    };
    let (_, grads) = eval(store)?;
    let grads = grads.expect("gradients requested");
    let mut report = Vec::new();
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        let Some(analytic) = grads.param(id) else { continue };
        if !p.trainable {
            continue;
        }
        let analytic = analytic.to_vec();
        let n = p.tensor.len();
        let picks: Vec<usize> = match max_entries {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut fd = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = p.tensor.data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = orig + DEFAULT_STEP;
            let up = eval(&probe)?.0;
            probe.get_mut(id).tensor.data_mut()[i] = orig - DEFAULT_STEP;
            let down = eval(&probe)?.0;
            probe.get_mut(id).tensor.data_mut()[i] = orig;
            fd.push((up - down) / (2.0 * DEFAULT_STEP));
        }
        let picked: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
        report.push((p.name.clone(), relative_error(&picked, &fd)));
    }
    Ok(report)
}
