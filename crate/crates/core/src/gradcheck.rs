//! Central finite-difference checks for the autodiff engine.

use rand::Rng;

use crate::error::{Result, VoltaError};
use crate::graph::{Graph, Var};
use crate::tensor::{ParamStore, Tensor};

/// Relative error used by every check: `|ad − fd| / max(1, |ad|)`.
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / autodiff.abs().max(1.0)
}

fn eval_scalar(g: &Graph, out: Var) -> Result<f64> {
    if g.numel(out) != 1 {
        return Err(VoltaError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.item(out))
}

/// Maximum relative error between the autodiff gradient of `f` at `x` and a
/// central difference with step `eps`.
///
/// `f` receives a fresh graph and the leaf holding `x`. It is evaluated once
/// more after all probes; a different result means `f` is not deterministic
/// and the check fails with [`VoltaError::Verification`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let run = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        eval_scalar(&g, out)
    };

    let mut g = Graph::new();
    let leaf = g.leaf(&x.clone().with_grad());
    let out = f(&mut g, leaf)?;
    let base = eval_scalar(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = run(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = run(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }

    let again = run(x)?;
    if again.to_bits() != base.to_bits() {
        return Err(VoltaError::Verification(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }
    Ok(worst)
}

/// Like [`grad_check`], but over every scalar of every parameter in `store`
/// (or only those whose name passes `filter`).
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f64, filter: impl Fn(&str) -> bool) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let base = eval_scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .filter(|(name, _)| filter(name))
        .map(|(name, t)| {
            let grad = g
                .bound_params()
                .get(name.as_str())
                .and_then(|v| g.grad(*v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), grad)
        })
        .collect();

    let run = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        eval_scalar(&g, out)
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        for (i, ad) in grad.iter().enumerate() {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = run(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = run(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            worst = worst.max(relative_error(*ad, (plus - minus) / (2.0 * eps)));
        }
    }

    let again = run(store)?;
    if again.to_bits() != base.to_bits() {
        return Err(VoltaError::Verification(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }
    Ok(worst)
}

/// A named scalar test function of one input tensor, for the op suite.
pub struct OpCase {
    pub name: &'static str,
    pub input: Tensor,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>>,
}

/// Contracts an op output with fixed random weights so every output
/// element contributes a distinct gradient.
fn contract(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w);
    let flat = g.reshape(out, w.shape())?;
    let p = g.mul(flat, c)?;
    Ok(g.sum(p))
}

/// One case per differentiable op, with random shapes (every dimension at
/// most `max_dim`) and random inputs.
pub fn op_cases<R: Rng + ?Sized>(rng: &mut R, max_dim: usize) -> Vec<OpCase> {
    let max_dim = max_dim.max(2);
    let dim = |rng: &mut R| rng.random_range(1..=max_dim);
    let (r, c) = (dim(rng), dim(rng));
    let k = dim(rng);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name: &'static str,
                   shape: Vec<usize>,
                   out_len: usize,
                   rng: &mut R,
                   f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>>| {
        let input = Tensor::randn(&shape, 1.0, rng);
        let w = Tensor::randn(&[out_len], 1.0, rng);
        cases.push(OpCase {
            name,
            input,
            f: Box::new(move |g, x| {
                let out = f(g, x)?;
                contract(g, out, &w)
            }),
        });
    };
    let halves =
        move |g: &mut Graph, x: Var| -> Result<(Var, Var)> { Ok((g.slice(x, 1, 0, c)?, g.slice(x, 1, c, 2 * c)?)) };
    add(
        "add",
        vec![r, 2 * c],
        r * c,
        rng,
        Box::new(move |g, x| {
            let (a, b) = halves(g, x)?;
            g.add(a, b)
        }),
    );
    add(
        "sub",
        vec![r, 2 * c],
        r * c,
        rng,
        Box::new(move |g, x| {
            let (a, b) = halves(g, x)?;
            g.sub(a, b)
        }),
    );
    add(
        "mul",
        vec![r, 2 * c],
        r * c,
        rng,
        Box::new(move |g, x| {
            let (a, b) = halves(g, x)?;
            g.mul(a, b)
        }),
    );
    add("scale", vec![r, c], r * c, rng, Box::new(|g, x| Ok(g.scale(x, -1.7))));
    add("neg", vec![r, c], r * c, rng, Box::new(|g, x| Ok(g.neg(x))));
    add(
        "add_scalar",
        vec![r, c],
        r * c,
        rng,
        Box::new(|g, x| Ok(g.add_scalar(x, 0.3))),
    );
    add(
        "add_bias",
        vec![r + 1, c],
        r * c,
        rng,
        Box::new(move |g, x| {
            let a = g.slice(x, 0, 0, r)?;
            let b = g.slice(x, 0, r, r + 1)?;
            let b = g.reshape(b, &[c])?;
            g.add_bias(a, b)
        }),
    );
    let konst = Tensor::randn(&[r, c], 1.0, rng);
    add(
        "add_const",
        vec![r, c],
        r * c,
        rng,
        Box::new(move |g, x| g.add_const(x, &konst)),
    );
    add(
        "matmul",
        vec![r + k, k],
        r * k,
        rng,
        Box::new(move |g, x| {
            let a = g.slice(x, 0, 0, r)?;
            let b = g.slice(x, 0, r, r + k)?;
            g.matmul(a, b)
        }),
    );
    add("transpose", vec![r, c], r * c, rng, Box::new(|g, x| g.transpose(x)));
    add(
        "reshape",
        vec![r, c],
        r * c,
        rng,
        Box::new(move |g, x| g.reshape(x, &[c, r])),
    );
    add(
        "concat0",
        vec![r, c],
        2 * r * c,
        rng,
        Box::new(|g, x| {
            let e = g.exp(x);
            g.concat(&[x, e], 0)
        }),
    );
    add(
        "concat1",
        vec![r, c],
        2 * r * c,
        rng,
        Box::new(|g, x| {
            let e = g.exp(x);
            g.concat(&[e, x], 1)
        }),
    );
    add(
        "slice",
        vec![r + 1, c],
        c,
        rng,
        Box::new(move |g, x| g.slice(x, 0, r, r + 1)),
    );
    add("sum", vec![r, c], 1, rng, Box::new(|g, x| Ok(g.sum(x))));
    add("mean", vec![r, c], 1, rng, Box::new(|g, x| g.mean(x, None)));
    add("mean0", vec![r, c], c, rng, Box::new(|g, x| g.mean(x, Some(0))));
    add("mean1", vec![r, c], r, rng, Box::new(|g, x| g.mean(x, Some(1))));
    let ids: Vec<usize> = (0..k + 1).map(|_| rng.random_range(0..r)).collect();
    let n_ids = ids.len();
    add(
        "gather",
        vec![r, c],
        n_ids * c,
        rng,
        Box::new(move |g, x| g.gather(x, &ids)),
    );
    let idx: Vec<usize> = (0..k + 1).map(|_| rng.random_range(0..r * c)).collect();
    let n_idx = idx.len();
    add("take", vec![r, c], n_idx, rng, Box::new(move |g, x| g.take(x, &idx)));
    let cc = c.max(2);
    add(
        "layer_norm",
        vec![r + 2, cc],
        r * cc,
        rng,
        Box::new(move |g, x| {
            let a = g.slice(x, 0, 0, r)?;
            let gamma = g.slice(x, 0, r, r + 1)?;
            let gamma = g.reshape(gamma, &[cc])?;
            let beta = g.slice(x, 0, r + 1, r + 2)?;
            let beta = g.reshape(beta, &[cc])?;
            g.layer_norm(a, gamma, beta)
        }),
    );
    add("gelu", vec![r, c], r * c, rng, Box::new(|g, x| Ok(g.gelu(x))));
    add("exp", vec![r, c], r * c, rng, Box::new(|g, x| Ok(g.exp(x))));
    add(
        "log",
        vec![r, c],
        r * c,
        rng,
        Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let p = g.add_scalar(sq, 0.5);
            g.log(p)
        }),
    );
    add("sigmoid", vec![r, c], r * c, rng, Box::new(|g, x| Ok(g.sigmoid(x))));
    add(
        "log_sigmoid",
        vec![r, c],
        r * c,
        rng,
        Box::new(|g, x| Ok(g.log_sigmoid(x))),
    );
    add("softmax0", vec![r, c], r * c, rng, Box::new(|g, x| g.softmax(x, 0)));
    add("softmax1", vec![r, c], r * c, rng, Box::new(|g, x| g.softmax(x, 1)));
    add(
        "log_softmax0",
        vec![r, c],
        r * c,
        rng,
        Box::new(|g, x| g.log_softmax(x, 0)),
    );
    add(
        "log_softmax1",
        vec![r, c],
        r * c,
        rng,
        Box::new(|g, x| g.log_softmax(x, 1)),
    );
    let mut targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let ignore = c;
    if r > 1 {
        targets[0] = ignore;
    }
    add(
        "cross_entropy",
        vec![r, c],
        1,
        rng,
        Box::new(move |g, x| g.cross_entropy(x, &targets, ignore)),
    );
    add(
        "clamp_min",
        vec![r, c],
        r * c,
        rng,
        Box::new(|g, x| Ok(g.clamp_min(x, 0.1))),
    );
    // central differences straddling the kink measure nothing; keep inputs
    // clear of it on whichever side they fell
    if let Some(case) = cases.last_mut() {
        for v in case.input.data_mut() {
            if (*v - 0.1).abs() < 1e-2 {
                *v = if *v < 0.1 { 0.1 - 1e-2 } else { 0.1 + 1e-2 };
            }
        }
    }
    cases
}

/// Runs [`grad_check`] on every case of [`op_cases`]; returns the worst
/// error per op name.
pub fn check_ops<R: Rng + ?Sized>(rng: &mut R, max_dim: usize, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    op_cases(rng, max_dim)
        .into_iter()
        .map(|case| Ok((case.name, grad_check(&case.f, &case.input, eps)?)))
        .collect()
}
