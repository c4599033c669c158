//! Central finite-difference gradient checks (64-bit only).

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Elementwise relative error with a denominator floored at `1e-3 · max|grad|`,
/// so entries that are tiny relative to the whole gradient are judged on absolute scale.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Candidates drawn per requested coordinate, so kink crossings can be replaced.
const DRAWS_PER_COORD: usize = 4;

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::invalid("finite_diff_check", "function must be scalar-valued"));
    }
    Ok(t.data()[0])
}

/// Compares the backward pass of `f` at `x` against central differences with step `h`;
/// returns the max relative error.
///
/// Coordinates whose `±h` evaluations put some ReLU, LeakyReLU or abs input on opposite
/// sides of its kink are left out: the difference quotient there mixes two linear pieces.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    scalar(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(xv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |t: Tensor<f64>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let y = f(&mut g, v)?;
        Ok((scalar(&g, y)?, g.kink_pattern()))
    };
    let (mut a, mut numeric) = (Vec::with_capacity(x.len()), Vec::with_capacity(x.len()));
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let ((fp, kp), (fm, km)) = (eval(p)?, eval(m)?);
        if kp == km {
            a.push(analytic[i]);
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    Ok(relative_error(&a, &numeric))
}

/// Same check with respect to the parameters of `store`, sampling at most
/// `per_param` coordinates of every trainable tensor. Kink crossings are skipped as in
/// [`finite_diff_check`] and replaced by further random coordinates when available.
pub fn finite_diff_check_params<F, R>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |s: &ParamStore<f64>| -> Result<(f64, Vec<bool>)> {
        let mut ctx = Ctx::new(s, true);
        let y = f(&mut ctx)?;
        Ok((scalar(&ctx.graph, y)?, ctx.graph.kink_pattern()))
    };
    let mut ctx = Ctx::new(store, true);
    let y = f(&mut ctx)?;
    let (graph, bindings, _) = ctx.finish();
    scalar(&graph, y)?;
    let grads = graph.backward(y)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = store.clone();
    for (name, p) in store.params() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let g = bindings.get(name).and_then(|v| grads.get(v));
        let mut taken = 0;
        for i in sample(rng, n, (per_param * DRAWS_PER_COORD).min(n)).into_iter() {
            if taken == per_param {
                break;
            }
            let orig = p.value.data()[i];
            work.param_mut(name)?.value.data_mut()[i] = orig + h;
            let (fp, kp) = eval(&work)?;
            work.param_mut(name)?.value.data_mut()[i] = orig - h;
            let (fm, km) = eval(&work)?;
            work.param_mut(name)?.value.data_mut()[i] = orig;
            if kp != km {
                continue;
            }
            analytic.push(g.map_or(0.0, |t| t.data()[i]));
            numeric.push((fp - fm) / (2.0 * h));
            taken += 1;
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
