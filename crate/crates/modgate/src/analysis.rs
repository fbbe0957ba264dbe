//! Computable bounds, identities, and geometric quantities.
//!
//! Everything here is evaluated exactly over enumerated supports: the static
//! capacity floor `ln Σ e^{ε_k}` and its softmax witness weights, the overlap
//! gain (conditional entropy of the expert assignment), the worst-case bound
//! assembly `capacity − overlap − diversity`, the retraining gap
//! `Σλε − JSD`, reverse I-projection onto a mixture family, the expert
//! coincidence norm, a witness-set Lipschitz estimate, and the ℓ₁ Hausdorff
//! distance of a restricted mixture set from the full simplex.

use std::path::Path;

use crate::dist::{lse, merge_onto_union, DiscreteDist, MixtureWeights};
use crate::experts::{expert_matrix, SequenceModel};
use crate::gates::{softmax, TabularGate};
use crate::solver::LambdaSet;
use crate::textio::fmt_f64;
use crate::{Error, Result};

/// Softmax witness weights `σ_k ∝ e^{ε_k}`.
pub fn softmax_weights(epsilons: &[f64]) -> Result<MixtureWeights> {
    if epsilons.is_empty() {
        return Err(Error::EmptyInput);
    }
    if epsilons.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteLoss("infinite expert error".into()));
    }
    MixtureWeights::new(softmax(epsilons))
}

/// Static-gating capacity floor `ln Σ_k e^{ε_k}`: on disjoint domains no
/// constant weighting beats this worst-case divergence.
pub fn capacity_lower_bound(epsilons: &[f64]) -> Result<f64> {
    if epsilons.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(lse(epsilons))
}

/// Overlap gain: target-weighted conditional entropy of the expert
/// assignment under the softmax constant gate,
/// `Σ_k λ*_k E_{x∼p̂_k}[−ln(σ_k π̂_k(x) / π_σ(x))]`.
///
/// Zero `π_σ` on a source point (or a source point missed by its own expert
/// while others cover it) yields the `+∞` sentinel.
pub fn overlap_gain<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    sigma: &MixtureWeights,
    lambda_star: &MixtureWeights,
) -> Result<f64> {
    let p = experts.len();
    if sources.len() != p || sigma.len() != p || lambda_star.len() != p {
        return Err(Error::LengthMismatch {
            expected: p,
            got: sources.len(),
        });
    }
    let (support, merged) = merge_onto_union(sources)?;
    let probs = expert_matrix(experts, &support);
    let mut acc = 0.0;
    for (k, src) in merged.iter().enumerate() {
        let w = lambda_star.weights()[k];
        if w <= 0.0 {
            continue;
        }
        let sk = sigma.weights()[k];
        for (i, &px) in src.probs().iter().enumerate() {
            if px <= 0.0 {
                continue;
            }
            let row = &probs[i * p..(i + 1) * p];
            let pi_sigma: f64 = sigma.weights().iter().zip(row).map(|(&s, &q)| s * q).sum();
            let own = sk * row[k];
            if pi_sigma <= 0.0 || own <= 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += w * px * -(own / pi_sigma).ln();
        }
    }
    Ok(acc)
}

/// Assembled worst-case bound terms for a given adversarial weighting and a
/// test mixture.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub epsilons: Vec<f64>,
    pub sigma: MixtureWeights,
    /// `ln Σ e^{ε_k}`.
    pub capacity: f64,
    /// Conditional entropy of the expert assignment (≥ 0).
    pub overlap: f64,
    /// `JSD` of the sources at the test mixture (∈ [0, H(λ)]).
    pub diversity: f64,
    /// `capacity − overlap − diversity`.
    pub value: f64,
    /// Measured worst-case divergence of a concrete gate, when supplied.
    pub measured_risk: Option<f64>,
}

impl BoundReport {
    /// Report CSV: `quantity,value` rows with a provenance comment.
    pub fn write_csv(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# provenance {provenance}\n"));
        out.push_str("quantity,value\n");
        for (k, e) in self.epsilons.iter().enumerate() {
            out.push_str(&format!("epsilon_{},{}\n", k + 1, fmt_f64(*e)));
        }
        for (k, s) in self.sigma.weights().iter().enumerate() {
            out.push_str(&format!("sigma_{},{}\n", k + 1, fmt_f64(*s)));
        }
        out.push_str(&format!("capacity,{}\n", fmt_f64(self.capacity)));
        out.push_str(&format!("overlap_gain,{}\n", fmt_f64(self.overlap)));
        out.push_str(&format!("diversity_jsd,{}\n", fmt_f64(self.diversity)));
        out.push_str(&format!("bound_value,{}\n", fmt_f64(self.value)));
        if let Some(r) = self.measured_risk {
            out.push_str(&format!("measured_risk,{}\n", fmt_f64(r)));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Assembles the bound `capacity − overlap − diversity` from exact expert
/// errors, the adversarial weighting `λ*`, and the test mixture.
pub fn robust_bound_report<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    lambda_star: &MixtureWeights,
    lambda_test: &MixtureWeights,
) -> Result<BoundReport> {
    let epsilons: Vec<f64> = sources
        .iter()
        .zip(experts)
        .map(|(s, e)| crate::experts::expert_epsilon(s, e))
        .collect();
    if epsilons.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteLoss(
            "infinite expert error; smooth the experts".into(),
        ));
    }
    let sigma = softmax_weights(&epsilons)?;
    let capacity = capacity_lower_bound(&epsilons)?;
    let overlap = overlap_gain(sources, experts, &sigma, lambda_star)?;
    let (_, merged) = merge_onto_union(sources)?;
    let diversity = crate::dist::jensen_shannon(&merged, lambda_test)?;
    Ok(BoundReport {
        value: capacity - overlap - diversity,
        epsilons,
        sigma,
        capacity,
        overlap,
        diversity,
        measured_risk: None,
    })
}

/// Retraining floor: any model family whose best per-source errors are
/// `ε_k` has mixture risk at least `Σ λ_k ε_k − JSD^λ`.
pub fn jsd_gap_bound(
    sources: &[DiscreteDist],
    epsilons: &[f64],
    lambda: &MixtureWeights,
) -> Result<f64> {
    let avg = epsilons
        .iter()
        .zip(lambda.weights())
        .map(|(&e, &l)| e * l)
        .sum::<f64>();
    let (_, merged) = merge_onto_union(sources)?;
    Ok(avg - crate::dist::jensen_shannon(&merged, lambda)?)
}

/// Reverse I-projection onto the mixture family of a fixed basis:
/// `argmin_{w ∈ Δ} KL(target ‖ Σ_i w_i b_i)` by exponentiated gradient,
/// run to gradient stationarity `1e-8` (or the iteration cap).
pub fn project_onto_mixture_family(
    target: &DiscreteDist,
    basis: &[DiscreteDist],
    max_iters: usize,
) -> Result<MixtureWeights> {
    let m = basis.len();
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    if m == 1 {
        return MixtureWeights::new(vec![1.0]);
    }
    let n = target.support().len();
    let mut basis_vals = vec![0.0; n * m];
    for (j, b) in basis.iter().enumerate() {
        let re = b.reindex(target.support())?;
        for (i, &q) in re.probs().iter().enumerate() {
            basis_vals[i * m + j] = q;
        }
    }
    let mut w = vec![1.0 / m as f64; m];
    for _ in 0..max_iters {
        // a_j = Σ_x t(x) b_j(x) / mix(x); EM-stationary iff a_j = 1 on the
        // active set and ≤ 1 off it.
        let mut a = vec![0.0; m];
        for i in 0..n {
            let t = target.prob(i);
            if t <= 0.0 {
                continue;
            }
            let row = &basis_vals[i * m..(i + 1) * m];
            let mix: f64 = w.iter().zip(row).map(|(&wj, &bj)| wj * bj).sum();
            if mix <= 0.0 {
                return Err(Error::Infeasible(
                    "target outside the basis hull closure (infinite divergence)".into(),
                ));
            }
            for j in 0..m {
                a[j] += t * row[j] / mix;
            }
        }
        // Driven well past the 1e-8 stationarity requirement: flat curvature
        // near the optimum otherwise leaves visible slack in the projected
        // distribution.
        let stationarity = a.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 1.0;
        if stationarity <= 1e-12 {
            break;
        }
        // Exponentiated-gradient ascent on the responsibilities.
        let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (wj, &aj) in w.iter_mut().zip(&a) {
            *wj *= (aj - mx).exp();
            sum += *wj;
        }
        for wj in w.iter_mut() {
            *wj /= sum;
        }
    }
    MixtureWeights::new(w)
}

/// Mixture distribution induced by projection weights on the target support.
pub fn mixture_family_dist(
    weights: &MixtureWeights,
    basis: &[DiscreteDist],
    support_of: &DiscreteDist,
) -> Result<DiscreteDist> {
    let reindexed: Result<Vec<DiscreteDist>> = basis
        .iter()
        .map(|b| b.reindex(support_of.support()))
        .collect();
    crate::dist::mixture(&reindexed?, weights)
}

/// Maximum expert coincidence norm: `max_x ‖(π̂_1(x), …, π̂_p(x))‖₂`,
/// always in `[0, √p]`.
pub fn coincidence_norm<E: SequenceModel>(
    experts: &[E],
    support: &crate::dist::SupportSet,
) -> f64 {
    let p = experts.len();
    let probs = expert_matrix(experts, support);
    (0..support.len())
        .map(|i| {
            probs[i * p..(i + 1) * p]
                .iter()
                .map(|q| q * q)
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Witness-set estimate of the Lipschitz constant of `λ ↦ KL(p̂_λ ‖ π_g)`:
/// `max_{k, g ∈ witnesses} Σ_x p̂_k(x) |ln(p̂_k(x)/π_g(x))|`.
///
/// A lower estimate of the supremum over the whole normalized gate space;
/// callers fix the witness family (the pure-expert gates and the uniform
/// gate at minimum).
pub fn lipschitz_estimate<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    witness_gates: &[TabularGate],
) -> Result<f64> {
    let (support, merged) = merge_onto_union(sources)?;
    let probs = expert_matrix(experts, &support);
    let p = experts.len();
    let mut best = 0.0f64;
    for gate in witness_gates {
        let model: Vec<f64> = (0..support.len())
            .map(|i| {
                let row = crate::gates::Gate::weights(gate, support.get(i))
                    .unwrap_or_else(|| vec![0.0; p]);
                row.iter()
                    .zip(&probs[i * p..(i + 1) * p])
                    .map(|(&g, &q)| g * q)
                    .sum()
            })
            .collect();
        for src in &merged {
            let mut acc = 0.0;
            for (i, &px) in src.probs().iter().enumerate() {
                if px > 0.0 {
                    if model[i] <= 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    acc += px * (px / model[i]).ln().abs();
                }
            }
            best = best.max(acc);
        }
    }
    Ok(best)
}

/// Standard witness gates for [`lipschitz_estimate`]: the `p` pure-expert
/// constant gates plus the uniform constant gate.
pub fn standard_witness_gates<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
) -> Result<Vec<TabularGate>> {
    let (support, _) = merge_onto_union(sources)?;
    let p = experts.len();
    let mut gates = Vec::with_capacity(p + 1);
    for k in 0..p {
        let mut w = vec![0.0; p];
        w[k] = 1.0;
        gates.push(TabularGate::constant(std::sync::Arc::clone(&support), &w)?);
    }
    gates.push(TabularGate::constant(
        std::sync::Arc::clone(&support),
        &vec![1.0 / p as f64; p],
    )?);
    Ok(gates)
}

/// ℓ₁ Hausdorff distance from the restricted set to the full simplex:
/// `max_k min_{λ ∈ Λ} ‖e_k − λ‖₁` (the farthest simplex point from a convex
/// subset is always a vertex).
///
/// Since all points share total mass one, `‖e_k − λ‖₁ = 2(1 − λ_k)`, so the
/// inner minimization reduces to maximizing `λ_k` over the box∩simplex.
pub fn hausdorff_l1(set: &LambdaSet) -> f64 {
    let p = set.dims();
    let mut worst = 0.0f64;
    for k in 0..p {
        let others_min: f64 = (0..p).filter(|&j| j != k).map(|j| set.lower()[j]).sum();
        let best_k = set.upper()[k].min(1.0 - others_min).max(set.lower()[k]);
        worst = worst.max(2.0 * (1.0 - best_k));
    }
    worst
}
