//! Closed-form machinery for a fixed target mixture.
//!
//! The constant gate guarantees an average error `Σ λ_k ε_k`. The exact
//! optimum is a clipped copy of the target: pointwise, the best achievable
//! model value is `clip(p_λ(x)/μ*, m(x), M(x))` where `[m(x), M(x)]` is the
//! convex hull of the expert probabilities at `x`, and the scalar `μ*` is
//! fixed by global normalization. `Z(μ)` is continuous and monotonically
//! decreasing, so `μ*` comes out of a bisection.

use std::sync::Arc;

use crate::dist::{merge_onto_union, DiscreteDist, MixtureWeights};
use crate::experts::{expert_matrix, SequenceModel};
use crate::gates::TabularGate;
use crate::{Error, Result};

/// Average-error guarantee of the constant gate: `Σ λ_k ε_k`.
pub fn constant_gate_bound(epsilons: &[f64], lambda: &MixtureWeights) -> Result<f64> {
    if epsilons.len() != lambda.len() {
        return Err(Error::LengthMismatch {
            expected: lambda.len(),
            got: epsilons.len(),
        });
    }
    Ok(epsilons
        .iter()
        .zip(lambda.weights())
        .map(|(&e, &l)| e * l)
        .sum())
}

/// Output of [`optimal_fixed_gate`]: the realized gate, the normalization
/// scalar, and the model values it induces on the union support.
#[derive(Debug, Clone)]
pub struct FixedOptimum {
    pub gate: TabularGate,
    pub mu_star: f64,
    pub model: DiscreteDist,
}

/// Exact optimal normalized gate for the fixed mixture `λ`.
///
/// Per support point the optimal model value is the target clipped to the
/// expert hull; the gate row realizing it interpolates between an argmin and
/// an argmax expert (ties broken by lowest index). Points with zero target
/// mass sit at the hull minimum. Bisection runs until `|Z − 1| ≤ 1e-10`.
pub fn optimal_fixed_gate<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    lambda: &MixtureWeights,
) -> Result<FixedOptimum> {
    if sources.len() != experts.len() || sources.len() != lambda.len() {
        return Err(Error::LengthMismatch {
            expected: lambda.len(),
            got: sources.len(),
        });
    }
    let (support, merged) = merge_onto_union(sources)?;
    let target = crate::dist::mixture(&merged, lambda)?;
    let p = experts.len();
    let n = support.len();
    let probs = expert_matrix(experts, &support);

    let mut lo_bounds = vec![0.0; n];
    let mut hi_bounds = vec![0.0; n];
    let mut lo_arg = vec![0usize; n];
    let mut hi_arg = vec![0usize; n];
    for i in 0..n {
        let row = &probs[i * p..(i + 1) * p];
        let (mut mi, mut ma) = (row[0], row[0]);
        let (mut ai, mut aa) = (0usize, 0usize);
        for (k, &q) in row.iter().enumerate().skip(1) {
            if q < mi {
                mi = q;
                ai = k;
            }
            if q > ma {
                ma = q;
                aa = k;
            }
        }
        lo_bounds[i] = mi;
        hi_bounds[i] = ma;
        lo_arg[i] = ai;
        hi_arg[i] = aa;
    }
    let sum_min: f64 = lo_bounds.iter().sum();
    let sum_max: f64 = hi_bounds.iter().sum();
    if sum_min > 1.0 + 1e-12 || sum_max < 1.0 - 1e-12 {
        return Err(Error::Infeasible(format!(
            "no normalized gate exists: Σmin = {sum_min}, Σmax = {sum_max}"
        )));
    }

    let z_at = |mu: f64| -> f64 {
        (0..n)
            .map(|i| {
                let t = target.prob(i);
                let unclipped = if t > 0.0 { t / mu } else { 0.0 };
                unclipped.clamp(lo_bounds[i], hi_bounds[i])
            })
            .sum()
    };

    // Bracket from the target/hull ratios, widened by a factor of 10; fall
    // back to doubling if an instance still escapes it.
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..n {
        let t = target.prob(i);
        if t > 0.0 {
            if hi_bounds[i] > 0.0 {
                lo = lo.min(t / hi_bounds[i]);
            }
            if lo_bounds[i] > 0.0 {
                hi = hi.max(t / lo_bounds[i]);
            }
        }
    }
    if !lo.is_finite() {
        lo = 1e-12;
    }
    if hi <= 0.0 {
        hi = 1.0;
    }
    lo /= 10.0;
    hi *= 10.0;
    let mut guard = 0;
    while z_at(lo) < 1.0 {
        lo /= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::Infeasible("μ bracket failed (low side)".into()));
        }
    }
    guard = 0;
    while z_at(hi) > 1.0 {
        hi *= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::Infeasible("μ bracket failed (high side)".into()));
        }
    }

    let mut mu = 0.5 * (lo + hi);
    for _ in 0..200 {
        mu = 0.5 * (lo + hi);
        let z = z_at(mu);
        if (z - 1.0).abs() <= 1e-10 {
            break;
        }
        if z > 1.0 {
            lo = mu;
        } else {
            hi = mu;
        }
    }

    // On flat stretches of Z (every point clipped) μ is not identified by the
    // root alone; prefer the canonical scalar max_x t(x)/q(x), which equals 1
    // whenever the clipped model reproduces the target exactly.
    {
        let all_clipped = (0..n).all(|i| {
            let t = target.prob(i);
            let unclipped = if t > 0.0 { t / mu } else { 0.0 };
            unclipped <= lo_bounds[i] || unclipped >= hi_bounds[i]
        });
        if all_clipped {
            let mut cand = 0.0f64;
            for i in 0..n {
                let t = target.prob(i);
                let q = if t > 0.0 { t / mu } else { 0.0 }.clamp(lo_bounds[i], hi_bounds[i]);
                if t > 0.0 && q > 0.0 {
                    cand = cand.max(t / q);
                }
            }
            if cand > 0.0 && (z_at(cand) - 1.0).abs() <= 1e-10 {
                mu = cand;
            }
        }
    }

    let mut model_vals = vec![0.0; n];
    let mut rows = vec![0.0; n * p];
    for i in 0..n {
        let t = target.prob(i);
        let unclipped = if t > 0.0 { t / mu } else { 0.0 };
        let q = unclipped.clamp(lo_bounds[i], hi_bounds[i]);
        model_vals[i] = q;
        let (m, ma) = (lo_bounds[i], hi_bounds[i]);
        let row = &mut rows[i * p..(i + 1) * p];
        if ma - m <= 0.0 {
            row[lo_arg[i].min(hi_arg[i])] = 1.0;
        } else {
            let t_mix = ((q - m) / (ma - m)).clamp(0.0, 1.0);
            row[lo_arg[i]] += 1.0 - t_mix;
            row[hi_arg[i]] += t_mix;
        }
    }
    let gate = TabularGate::new(Arc::clone(&support), p, rows)?;
    let model = DiscreteDist::from_arithmetic(Arc::clone(&support), model_vals)?;
    Ok(FixedOptimum {
        gate,
        mu_star: mu,
        model,
    })
}

/// KL of the constant gate and of the exact optimum against the target,
/// in that order. Always `kl_optimal <= kl_constant`.
pub fn kl_vs_optimal<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    lambda: &MixtureWeights,
) -> Result<(f64, f64)> {
    let (support, merged) = merge_onto_union(sources)?;
    let target = crate::dist::mixture(&merged, lambda)?;
    let probs = expert_matrix(experts, &support);
    let p = experts.len();

    let mut kl_constant = 0.0;
    for (i, &t) in target.probs().iter().enumerate() {
        if t > 0.0 {
            let mix: f64 = lambda
                .weights()
                .iter()
                .zip(&probs[i * p..(i + 1) * p])
                .map(|(&l, &q)| l * q)
                .sum();
            if mix <= 0.0 {
                kl_constant = f64::INFINITY;
                break;
            }
            kl_constant += t * (t / mix).ln();
        }
    }

    let opt = optimal_fixed_gate(sources, experts, lambda)?;
    let mut kl_optimal = 0.0;
    for (i, &t) in target.probs().iter().enumerate() {
        if t > 0.0 {
            let q = opt.model.prob(i);
            if q <= 0.0 {
                kl_optimal = f64::INFINITY;
                break;
            }
            kl_optimal += t * (t / q).ln();
        }
    }
    Ok((kl_constant, kl_optimal))
}

/// Pre-normalization clip mass at a given `μ`; exposed for monotonicity
/// checks in tests.
pub fn clip_mass_at<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    lambda: &MixtureWeights,
    mu: f64,
) -> Result<f64> {
    let (support, merged) = merge_onto_union(sources)?;
    let target = crate::dist::mixture(&merged, lambda)?;
    let p = experts.len();
    let probs = expert_matrix(experts, &support);
    let mut z = 0.0;
    for i in 0..support.len() {
        let row = &probs[i * p..(i + 1) * p];
        let m = row.iter().copied().fold(f64::INFINITY, f64::min);
        let ma = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = target.prob(i);
        let unclipped = if t > 0.0 { t / mu } else { 0.0 };
        z += unclipped.clamp(m, ma);
    }
    Ok(z)
}
