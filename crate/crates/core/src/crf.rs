//! Linear-chain CRF scoring, normalization and decoding over `L` labels.
//!
//! Emission scores are stored token-major as an `[n, L]` tensor (entry
//! `(i, v)` scores label `v` at token `i`); transitions are `[L, L]` with
//! entry `(u, v)` scoring label `u` followed by label `v`. There are no
//! start or stop transitions.
//!
//! Path scores are accumulated left to right in the order
//! `e(0,z0) + t(z0,z1) + e(1,z1) + t(z1,z2) + ...`, which is also the order
//! in which Viterbi extends partial paths, so the Viterbi score of the best
//! path is bit-identical to [`score`] of that path.

use crate::autodiff::{log_sum_exp, Graph, Tensor, Var};
use crate::error::{Error, Result};

fn dims(emissions: &Tensor, transitions: &Tensor) -> Result<(usize, usize)> {
    let es = emissions.shape();
    let ts = transitions.shape();
    if es.len() != 2 || es[0] == 0 || ts.len() != 2 || ts[0] != es[1] || ts[1] != es[1] {
        return Err(Error::shape("crf", es, ts));
    }
    Ok((es[0], es[1]))
}

fn check_tags(tags: &[usize], n: usize, labels: usize) -> Result<()> {
    if tags.len() != n {
        return Err(Error::shape("crf tags", &[n], &[tags.len()]));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= labels) {
        return Err(Error::TagIndex { index: bad, labels });
    }
    Ok(())
}

/// Unnormalized score of one label sequence.
pub fn score(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    let (n, labels) = dims(emissions, transitions)?;
    check_tags(tags, n, labels)?;
    let mut s = emissions.at(0, tags[0]);
    for i in 1..n {
        s += transitions.at(tags[i - 1], tags[i]);
        s += emissions.at(i, tags[i]);
    }
    Ok(s)
}

/// Forward log-potentials `alpha[i * L + v]`.
fn forward(emissions: &Tensor, transitions: &Tensor, n: usize, labels: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; n * labels];
    alpha[..labels].copy_from_slice(emissions.row(0));
    let mut scratch = vec![0.0; labels];
    for i in 1..n {
        for v in 0..labels {
            for (u, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(i - 1) * labels + u] + transitions.at(u, v);
            }
            alpha[i * labels + v] = log_sum_exp(&scratch) + emissions.at(i, v);
        }
    }
    alpha
}

/// `log Σ_Y exp(score(Y))` over all `L^n` label sequences (forward algorithm).
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    let (n, labels) = dims(emissions, transitions)?;
    let alpha = forward(emissions, transitions, n, labels);
    Ok(log_sum_exp(&alpha[(n - 1) * labels..]))
}

/// Negative log-likelihood `log_partition - score`, clamped at zero.
pub fn nll(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<f64> {
    let s = score(emissions, transitions, tags)?;
    Ok((log_partition(emissions, transitions)? - s).max(0.0))
}

/// Highest-scoring label sequence and its score. Ties go to the lowest label
/// index at every step.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<(Vec<usize>, f64)> {
    let (n, labels) = dims(emissions, transitions)?;
    let mut delta: Vec<f64> = emissions.row(0).to_vec();
    let mut back = vec![0usize; n * labels];
    let mut next = vec![0.0; labels];
    for i in 1..n {
        for v in 0..labels {
            let mut best_u = 0;
            let mut best = delta[0] + transitions.at(0, v);
            for (u, &d) in delta.iter().enumerate().skip(1) {
                let cand = d + transitions.at(u, v);
                if cand > best {
                    best = cand;
                    best_u = u;
                }
            }
            back[i * labels + v] = best_u;
            next[v] = best + emissions.at(i, v);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    for v in 1..labels {
        if delta[v] > delta[last] {
            last = v;
        }
    }
    let best_score = delta[last];
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i * labels + path[i]];
    }
    Ok((path, best_score))
}

/// Posterior marginals from the forward-backward algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub log_partition: f64,
    /// `p(y_i = v)`, token-major `[n, L]`.
    pub unary: Tensor,
    /// `Σ_i p(y_i = u, y_{i+1} = v)`, `[L, L]`.
    pub pairwise: Tensor,
}

pub fn marginals(emissions: &Tensor, transitions: &Tensor) -> Result<Marginals> {
    let (n, labels) = dims(emissions, transitions)?;
    let alpha = forward(emissions, transitions, n, labels);
    let log_z = log_sum_exp(&alpha[(n - 1) * labels..]);

    let mut beta = vec![0.0; n * labels];
    let mut scratch = vec![0.0; labels];
    for i in (0..n - 1).rev() {
        for u in 0..labels {
            for (v, s) in scratch.iter_mut().enumerate() {
                *s = transitions.at(u, v) + emissions.at(i + 1, v) + beta[(i + 1) * labels + v];
            }
            beta[i * labels + u] = log_sum_exp(&scratch);
        }
    }

    let unary: Vec<f64> = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a + b - log_z).exp())
        .collect();
    let mut pairwise = vec![0.0; labels * labels];
    for i in 0..n - 1 {
        for u in 0..labels {
            let a = alpha[i * labels + u];
            for v in 0..labels {
                let lp =
                    a + transitions.at(u, v) + emissions.at(i + 1, v) + beta[(i + 1) * labels + v]
                        - log_z;
                pairwise[u * labels + v] += lp.exp();
            }
        }
    }
    Ok(Marginals {
        log_partition: log_z,
        unary: Tensor::matrix(n, labels, unary)?,
        pairwise: Tensor::matrix(labels, labels, pairwise)?,
    })
}

/// Records the CRF negative log-likelihood as one graph op whose backward
/// pass is `marginals - gold indicators`.
pub fn nll_op<'p>(
    g: &mut Graph<'p>,
    emissions: Var,
    transitions: Var,
    tags: &[usize],
) -> Result<Var> {
    let value = nll(g.value(emissions), g.value(transitions), tags)?;
    let tags = tags.to_vec();
    Ok(g.custom(
        &[emissions, transitions],
        Tensor::scalar(value),
        Box::new(move |inputs, _out, go| {
            let (e, t) = (inputs[0], inputs[1]);
            let labels = t.shape()[0];
            let m = marginals(e, t).expect("shapes validated in forward");
            let scale = go.item();
            let mut de = m.unary.into_data();
            let mut dt = m.pairwise.into_data();
            for (i, &z) in tags.iter().enumerate() {
                de[i * labels + z] -= 1.0;
                if i > 0 {
                    dt[tags[i - 1] * labels + z] -= 1.0;
                }
            }
            de.iter_mut().chain(dt.iter_mut()).for_each(|x| *x *= scale);
            vec![
                Tensor::new(e.shape().to_vec(), de).expect("shape"),
                Tensor::new(t.shape().to_vec(), dt).expect("shape"),
            ]
        }),
    ))
}

/// The same negative log-likelihood assembled from primitive graph ops
/// (row, transpose, log-sum-exp, pick, ...). Slower than [`nll_op`]; kept as
/// an independent route for checking it.
pub fn nll_composite<'p>(
    g: &mut Graph<'p>,
    emissions: Var,
    transitions: Var,
    tags: &[usize],
) -> Result<Var> {
    let (n, labels) = dims(g.value(emissions), g.value(transitions))?;
    check_tags(tags, n, labels)?;
    let incoming = g.transpose(transitions)?;
    let mut alpha = g.row(emissions, 0)?;
    for i in 1..n {
        let mut parts = Vec::with_capacity(labels);
        for v in 0..labels {
            let col = g.row(incoming, v)?;
            let s = g.add(alpha, col)?;
            parts.push(g.log_sum_exp(s)?);
        }
        let stacked = g.concat(&parts)?;
        let e = g.row(emissions, i)?;
        alpha = g.add(stacked, e)?;
    }
    let log_z = g.log_sum_exp(alpha)?;

    let mut picks = vec![g.pick(emissions, tags[0])?];
    for i in 1..n {
        picks.push(g.pick(transitions, tags[i - 1] * labels + tags[i])?);
        picks.push(g.pick(emissions, i * labels + tags[i])?);
    }
    let all = g.concat(&picks)?;
    let path_score = g.sum(all);
    g.sub(log_z, path_score)
}
