//! Minimax engines for the worst-case-mixture game.
//!
//! The adversary picks mixture weights over the sources, the gate player
//! minimizes the λ-weighted sum of per-source divergences (the linearized
//! payoff, which shares its value with the original robust objective). Two
//! engines are provided:
//!
//! - [`solve_exact`]: exponentiated-gradient ascent on λ against online
//!   gradient descent on an explicit tabular gate, with exact Euclidean
//!   projection onto the normalized gate space every step. The adversary can
//!   be restricted to a box subset of the simplex, in which case its updates
//!   are KL-projected back onto the box.
//! - [`solve_primal_dual`] / [`solve_quadratic_penalty`]: a stochastic loop
//!   over a featurized softmax gate where the normalization constraint is
//!   enforced through a scalar dual variable (or a quadratic penalty), with
//!   the partition mass estimated by importance sampling against the uniform
//!   expert mixture.
//!
//! Infinite divergences are clamped at [`GAIN_CAP`] nats before adversary
//! updates so pathological configurations degrade instead of crashing.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{lse, merge_onto_union, DiscreteDist, MixtureWeights, Seq};
use crate::experts::{expert_epsilon, expert_matrix, sample_categorical, SequenceModel};
use crate::gates::{project_gate, seq_features, softmax, FeatGate, TabularGate};
use crate::textio::fmt_f64;
use crate::{Error, Result, GAIN_CAP};

// ---------------------------------------------------------------------------
// Restricted mixture sets
// ---------------------------------------------------------------------------

/// Box-restricted subset of the simplex: `{λ ∈ Δ : lower ≤ λ ≤ upper}`.
#[derive(Debug, Clone)]
pub struct LambdaSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl LambdaSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::LengthMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        let (mut lo_sum, mut hi_sum) = (0.0, 0.0);
        for (&l, &u) in lower.iter().zip(&upper) {
            if !(0.0..=1.0).contains(&l) || !(0.0..=1.0).contains(&u) || l > u {
                return Err(Error::Config(format!("bad bounds [{l}, {u}]")));
            }
            lo_sum += l;
            hi_sum += u;
        }
        if lo_sum > 1.0 + 1e-12 || hi_sum < 1.0 - 1e-12 {
            return Err(Error::Infeasible(format!(
                "empty restricted set: Σlower = {lo_sum}, Σupper = {hi_sum}"
            )));
        }
        Ok(LambdaSet { lower, upper })
    }

    /// The unrestricted simplex over `p` components.
    pub fn full_simplex(p: usize) -> Self {
        LambdaSet {
            lower: vec![0.0; p],
            upper: vec![1.0; p],
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, lambda: &MixtureWeights, tol: f64) -> bool {
        lambda.len() == self.dims()
            && lambda
                .weights()
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&w, (&l, &u))| w >= l - tol && w <= u + tol)
    }

    /// Extreme points of the box∩simplex polytope: at most one coordinate
    /// strictly between its bounds.
    pub fn extreme_points(&self) -> Vec<MixtureWeights> {
        let p = self.dims();
        assert!(p <= 20, "extreme-point enumeration needs small p");
        let mut out: Vec<Vec<f64>> = Vec::new();
        let push_unique = |out: &mut Vec<Vec<f64>>, v: Vec<f64>| {
            let dup = out
                .iter()
                .any(|w| w.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12));
            if !dup {
                out.push(v);
            }
        };
        for mask in 0u32..(1 << p) {
            let v: Vec<f64> = (0..p)
                .map(|k| {
                    if mask >> k & 1 == 1 {
                        self.upper[k]
                    } else {
                        self.lower[k]
                    }
                })
                .collect();
            let sum: f64 = v.iter().sum();
            if (sum - 1.0).abs() <= 1e-12 {
                push_unique(&mut out, v);
                continue;
            }
            // Try every coordinate as the single free one.
            for free in 0..p {
                let rest = sum - v[free];
                let cand = 1.0 - rest;
                if cand >= self.lower[free] - 1e-12 && cand <= self.upper[free] + 1e-12 {
                    let mut w = v.clone();
                    w[free] = cand.clamp(self.lower[free], self.upper[free]);
                    push_unique(&mut out, w);
                }
            }
        }
        out.into_iter()
            .map(|v| {
                let s: f64 = v.iter().sum();
                MixtureWeights::new(v.into_iter().map(|x| x / s).collect()).expect("vertex")
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Adversary updates
// ---------------------------------------------------------------------------

/// Multiplicative-weights ascent step: `λ'_k ∝ λ_k exp(η·gain_k)`.
///
/// Gains are shifted by their maximum before exponentiation, so equal gains
/// (or `η = 0`) leave the weights unchanged to the last bit.
pub fn eg_step(lambda: &MixtureWeights, gains: &[f64], eta: f64) -> Result<MixtureWeights> {
    if gains.len() != lambda.len() {
        return Err(Error::LengthMismatch {
            expected: lambda.len(),
            got: gains.len(),
        });
    }
    let clamped: Vec<f64> = gains.iter().map(|&g| g.min(GAIN_CAP)).collect();
    let m = clamped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = lambda
        .weights()
        .iter()
        .zip(&clamped)
        .map(|(&w, &g)| w * (eta * (g - m)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::NonFiniteLoss(format!("EG normalizer {sum}")));
    }
    MixtureWeights::new(raw.into_iter().map(|w| w / sum).collect())
}

/// I-projection of strictly positive weights onto a box-restricted simplex:
/// `argmin_{q ∈ Λ} KL(q ‖ λ)`.
///
/// The minimizer has the form `q_k = clip(s·λ_k, lower_k, upper_k)` with the
/// scalar `s` fixed by `Σ q = 1`; the clipped sum is monotone in `s`, so `s`
/// comes out of a bisection, and free coordinates are rescaled exactly
/// afterwards so the output sums to one to float precision.
pub fn kl_project_box(lambda: &MixtureWeights, set: &LambdaSet) -> Result<MixtureWeights> {
    if lambda.len() != set.dims() {
        return Err(Error::LengthMismatch {
            expected: set.dims(),
            got: lambda.len(),
        });
    }
    if set.contains(lambda, 0.0) {
        return Ok(lambda.clone());
    }
    let w = lambda.weights();
    if w.iter().any(|&x| x <= 0.0) {
        return Err(Error::Config(
            "KL projection needs strictly positive input weights".into(),
        ));
    }
    let q_at = |s: f64| -> Vec<f64> {
        w.iter()
            .zip(set.lower.iter().zip(&set.upper))
            .map(|(&x, (&l, &u))| (s * x).clamp(l, u))
            .collect()
    };
    let sum_at = |s: f64| -> f64 { q_at(s).iter().sum() };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut guard = 0;
    while sum_at(hi) < 1.0 {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::Infeasible("box projection bracket failed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    let mut q = q_at(s);
    // Exact cleanup: rescale the un-clipped coordinates so the sum is 1.
    let mut bound_sum = 0.0;
    let mut free_sum = 0.0;
    let free: Vec<bool> = q
        .iter()
        .zip(set.lower.iter().zip(&set.upper))
        .map(|(&x, (&l, &u))| {
            let is_free = x > l + 1e-15 && x < u - 1e-15;
            if is_free {
                free_sum += x;
            } else {
                bound_sum += x;
            }
            is_free
        })
        .collect();
    if free_sum > 0.0 {
        let target = 1.0 - bound_sum;
        for (x, &f) in q.iter_mut().zip(&free) {
            if f {
                *x *= target / free_sum;
            }
        }
    }
    let total: f64 = q.iter().sum();
    MixtureWeights::new(q.into_iter().map(|x| x / total).collect())
}

// ---------------------------------------------------------------------------
// Game traces
// ---------------------------------------------------------------------------

/// The gate a solver produced.
#[derive(Debug, Clone)]
pub enum SolvedGate {
    Tabular(TabularGate),
    Feat(FeatGate),
}

/// One checkpoint of solver state.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub lambda: Vec<f64>,
    pub losses: Vec<f64>,
    pub mu: f64,
    pub z_hat: f64,
    pub z_ema: f64,
    pub gap: f64,
    /// Running-average gate rows at this checkpoint (exact solver only).
    pub avg_gate: Option<Vec<f64>>,
    pub avg_lambda: Vec<f64>,
}

/// Full record of a solver run: checkpoints plus the averaged outputs.
#[derive(Debug, Clone)]
pub struct GameTrace {
    pub num_experts: usize,
    pub rows: Vec<TraceRow>,
    pub gate: SolvedGate,
    pub lambda_bar: MixtureWeights,
}

impl GameTrace {
    /// Time-averaged adversary weights; the least-favorable mixture.
    pub fn least_favorable_mixture(&self) -> MixtureWeights {
        self.lambda_bar.clone()
    }

    /// Writes the checkpoint CSV
    /// (`iter,lambda_1..lambda_p,loss_1..loss_p,mu,Z_hat,Z_ema,gap`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let p = self.num_experts;
        let mut out = String::new();
        let lam_cols: Vec<String> = (1..=p).map(|k| format!("lambda_{k}")).collect();
        let loss_cols: Vec<String> = (1..=p).map(|k| format!("loss_{k}")).collect();
        out.push_str(&format!(
            "iter,{},{},mu,Z_hat,Z_ema,gap\n",
            lam_cols.join(","),
            loss_cols.join(",")
        ));
        for row in &self.rows {
            let mut fields = vec![row.iter.to_string()];
            fields.extend(row.lambda.iter().map(|&x| fmt_f64(x)));
            fields.extend(row.losses.iter().map(|&x| fmt_f64(x)));
            fields.push(fmt_f64(row.mu));
            fields.push(fmt_f64(row.z_hat));
            fields.push(fmt_f64(row.z_ema));
            fields.push(fmt_f64(row.gap));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Exact no-regret solver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExactConfig {
    pub iters: usize,
    /// Adversary step size; default `√(ln p / T) / GAIN_CAP`.
    pub eta_lambda: Option<f64>,
    /// Gate step size; default `2√|support| / (G √T)` with `G` the Frobenius
    /// norm of the initial gradient.
    pub eta_g: Option<f64>,
    pub checkpoint_every: usize,
}

impl ExactConfig {
    pub fn new(iters: usize) -> Self {
        ExactConfig {
            iters,
            eta_lambda: None,
            eta_g: None,
            checkpoint_every: (iters / 100).max(1),
        }
    }
}

/// Exact per-source divergences of an explicit gate, clamped at `GAIN_CAP`.
fn losses_of(rows: &[f64], probs: &[f64], sources: &[Vec<f64>], p: usize) -> Vec<f64> {
    let n = sources[0].len();
    let model: Vec<f64> = (0..n)
        .map(|i| {
            rows[i * p..(i + 1) * p]
                .iter()
                .zip(&probs[i * p..(i + 1) * p])
                .map(|(&g, &q)| g * q)
                .sum()
        })
        .collect();
    sources
        .iter()
        .map(|src| {
            let mut acc = 0.0;
            for (i, &s) in src.iter().enumerate() {
                if s > 0.0 {
                    if model[i] <= 0.0 {
                        return GAIN_CAP;
                    }
                    acc += s * (s / model[i]).ln();
                }
            }
            acc.min(GAIN_CAP)
        })
        .collect()
}

/// Witness estimate of the duality gap at an averaged pair `(ḡ, λ̄)`.
///
/// The max side scans the extreme points of the adversary's set; the min side
/// scans a witness family: constant gates at those extreme points, the
/// uniform constant gate, the softmax-of-errors constant gate, and the
/// averaged gate itself (which keeps the estimate non-negative).
fn witness_gap(
    avg_rows: &[f64],
    avg_lambda: &[f64],
    probs: &[f64],
    sources: &[Vec<f64>],
    epsilons: &[f64],
    vertices: &[MixtureWeights],
) -> f64 {
    let p = epsilons.len();
    let n = sources[0].len();
    let avg_losses = losses_of(avg_rows, probs, sources, p);
    let max_part = vertices
        .iter()
        .map(|v| {
            v.weights()
                .iter()
                .zip(&avg_losses)
                .map(|(&l, &x)| l * x)
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);

    let value_at = |rows: &[f64]| -> f64 {
        losses_of(rows, probs, sources, p)
            .iter()
            .zip(avg_lambda)
            .map(|(&x, &l)| l * x)
            .sum()
    };
    let constant_rows = |w: &[f64]| -> Vec<f64> {
        let mut rows = Vec::with_capacity(n * p);
        for _ in 0..n {
            rows.extend_from_slice(w);
        }
        rows
    };

    let mut min_part = value_at(avg_rows);
    for v in vertices {
        min_part = min_part.min(value_at(&constant_rows(v.weights())));
    }
    min_part = min_part.min(value_at(&constant_rows(&vec![1.0 / p as f64; p])));
    let sigma = softmax(&epsilons.iter().map(|&e| e.min(GAIN_CAP)).collect::<Vec<_>>());
    min_part = min_part.min(value_at(&constant_rows(&sigma)));
    max_part - min_part
}

/// No-regret dynamics on the linearized game with exact projection.
///
/// Exponentiated gradient on the adversary (with KL projection onto the
/// restricted set when one is given), online gradient descent on the gate
/// followed by Euclidean projection onto the normalized space, and
/// time-averaged outputs.
pub fn solve_exact<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    set: &LambdaSet,
    cfg: &ExactConfig,
) -> Result<GameTrace> {
    let p = experts.len();
    if sources.len() != p || set.dims() != p {
        return Err(Error::LengthMismatch {
            expected: p,
            got: sources.len(),
        });
    }
    if cfg.iters == 0 {
        return Err(Error::Config("need at least one iteration".into()));
    }
    let (support, merged) = merge_onto_union(sources)?;
    let n = support.len();
    let probs = expert_matrix(experts, &support);
    let src_vecs: Vec<Vec<f64>> = merged.iter().map(|d| d.probs().to_vec()).collect();
    let epsilons: Vec<f64> = sources
        .iter()
        .zip(experts)
        .map(|(s, e)| expert_epsilon(s, e))
        .collect();
    let vertices = set.extreme_points();

    let t_total = cfg.iters as f64;
    let eta_lambda = cfg
        .eta_lambda
        .unwrap_or(((p as f64).ln().max(1e-12) / t_total).sqrt() / GAIN_CAP);

    let mut lambda = kl_project_box(&MixtureWeights::uniform(p), set)?;
    let mut rows = vec![1.0 / p as f64; n * p];

    let grad_at = |rows: &[f64], lam: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0; n * p];
        for i in 0..n {
            let prow = &probs[i * p..(i + 1) * p];
            let model: f64 = rows[i * p..(i + 1) * p]
                .iter()
                .zip(prow)
                .map(|(&g, &q)| g * q)
                .sum();
            let target: f64 = src_vecs.iter().zip(lam).map(|(s, &l)| l * s[i]).sum();
            if target <= 0.0 {
                continue;
            }
            let ratio = if model > 0.0 {
                (target / model).min(1e6)
            } else {
                1e6
            };
            for k in 0..p {
                v[i * p + k] = -ratio * prow[k];
            }
        }
        v
    };
    // Initial-gradient norm pins the default gate step size.
    let eta_g = cfg.eta_g.unwrap_or_else(|| {
        let g0 = grad_at(&rows, lambda.weights());
        let norm = g0.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        2.0 * (n as f64).sqrt() / (norm * t_total.sqrt())
    });

    let mut lam_sum = vec![0.0; p];
    let mut row_sum = vec![0.0; n * p];
    let mut trace_rows = Vec::new();

    for t in 0..cfg.iters {
        let losses = losses_of(&rows, &probs, &src_vecs, p);
        lambda = eg_step(&lambda, &losses, eta_lambda)?;
        lambda = kl_project_box(&lambda, set)?;

        let grad = grad_at(&rows, lambda.weights());
        let raw: Vec<f64> = rows
            .iter()
            .zip(&grad)
            .map(|(&g, &v)| g - eta_g * v)
            .collect();
        let gate = project_gate(&raw, &support, experts)?;
        rows.copy_from_slice(gate.rows());

        for (acc, &l) in lam_sum.iter_mut().zip(lambda.weights()) {
            *acc += l;
        }
        for (acc, &g) in row_sum.iter_mut().zip(&rows) {
            *acc += g;
        }

        if (t + 1) % cfg.checkpoint_every == 0 || t + 1 == cfg.iters {
            let steps = (t + 1) as f64;
            let avg_rows: Vec<f64> = row_sum.iter().map(|&x| x / steps).collect();
            let avg_lambda: Vec<f64> = lam_sum.iter().map(|&x| x / steps).collect();
            let gap = witness_gap(&avg_rows, &avg_lambda, &probs, &src_vecs, &epsilons, &vertices);
            let z_hat: f64 = rows.iter().zip(&probs).map(|(&g, &q)| g * q).sum();
            trace_rows.push(TraceRow {
                iter: t + 1,
                lambda: lambda.weights().to_vec(),
                losses,
                mu: 0.0,
                z_hat,
                z_ema: z_hat,
                gap,
                avg_gate: Some(avg_rows),
                avg_lambda,
            });
        }
    }

    let avg_rows: Vec<f64> = row_sum.iter().map(|&x| x / t_total).collect();
    let avg_gate = TabularGate::new(Arc::clone(&support), p, avg_rows)?;
    let lambda_bar = MixtureWeights::new(lam_sum.iter().map(|&x| x / t_total).collect())?;
    Ok(GameTrace {
        num_experts: p,
        rows: trace_rows,
        gate: SolvedGate::Tabular(avg_gate),
        lambda_bar,
    })
}

/// Recomputes the witness duality gap at every checkpoint of an exact trace.
pub fn duality_gap<E: SequenceModel>(
    trace: &GameTrace,
    sources: &[DiscreteDist],
    experts: &[E],
    set: &LambdaSet,
) -> Result<Vec<f64>> {
    let (support, merged) = merge_onto_union(sources)?;
    let probs = expert_matrix(experts, &support);
    let src_vecs: Vec<Vec<f64>> = merged.iter().map(|d| d.probs().to_vec()).collect();
    let epsilons: Vec<f64> = sources
        .iter()
        .zip(experts)
        .map(|(s, e)| expert_epsilon(s, e))
        .collect();
    let vertices = set.extreme_points();
    trace
        .rows
        .iter()
        .map(|row| {
            let avg = row
                .avg_gate
                .as_ref()
                .ok_or_else(|| Error::Config("trace lacks averaged-gate snapshots".into()))?;
            Ok(witness_gap(
                avg,
                &row.avg_lambda,
                &probs,
                &src_vecs,
                &epsilons,
                &vertices,
            ))
        })
        .collect()
}

/// Worst-case divergence of a tabular gate over the extreme points of a set:
/// `max_{λ ∈ vertices} KL(p̂_λ ‖ π_g)`.
pub fn worst_case_risk<E: SequenceModel>(
    gate: &TabularGate,
    sources: &[DiscreteDist],
    experts: &[E],
    set: &LambdaSet,
) -> Result<f64> {
    let (support, merged) = merge_onto_union(sources)?;
    let probs = expert_matrix(experts, &support);
    let p = experts.len();
    let n = support.len();
    let mut rows = Vec::with_capacity(n * p);
    for s in support.seqs() {
        rows.extend(crate::gates::Gate::weights(gate, s).ok_or(Error::SupportMismatch)?);
    }
    let model: Vec<f64> = (0..n)
        .map(|i| {
            rows[i * p..(i + 1) * p]
                .iter()
                .zip(&probs[i * p..(i + 1) * p])
                .map(|(&g, &q)| g * q)
                .sum()
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    for v in set.extreme_points() {
        let mut kl = 0.0;
        for i in 0..n {
            let t: f64 = merged
                .iter()
                .zip(v.weights())
                .map(|(d, &l)| l * d.prob(i))
                .sum();
            if t > 0.0 {
                if model[i] <= 0.0 {
                    kl = f64::INFINITY;
                    break;
                }
                kl += t * (t / model[i]).ln();
            }
        }
        worst = worst.max(kl);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Stochastic primal-dual solver
// ---------------------------------------------------------------------------

/// Hyperparameters of the stochastic loop.
#[derive(Debug, Clone)]
pub struct PdConfig {
    pub iters: usize,
    /// Batch size drawn from each source per iteration.
    pub batch_per_source: usize,
    pub eta_g: f64,
    pub eta_lambda: f64,
    pub eta_mu: f64,
    /// EMA factor for the partition-mass estimate.
    pub ema_alpha: f64,
    /// Iterations with the dual variable frozen at zero.
    pub warmup: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl PdConfig {
    pub fn new(iters: usize, seed: u64) -> Self {
        PdConfig {
            iters,
            batch_per_source: 64,
            eta_g: 0.1,
            eta_lambda: 0.05,
            eta_mu: 0.1,
            ema_alpha: 0.9,
            warmup: 100,
            seed,
            checkpoint_every: (iters / 100).max(1),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch_per_source == 0 {
            return Err(Error::Config("iters and batch size must be positive".into()));
        }
        if !(self.eta_g > 0.0 && self.eta_lambda > 0.0 && self.eta_mu >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0 < self.ema_alpha && self.ema_alpha < 1.0) {
            return Err(Error::Config("EMA factor must lie in (0,1)".into()));
        }
        Ok(())
    }
}

enum Penalty {
    Lagrangian,
    Quadratic(f64),
}

/// Lagrangian primal-dual loop: EG adversary, dual ascent on the scalar
/// constraint multiplier, analytic softmax gradient on the gate parameters.
pub fn solve_primal_dual<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    gate: FeatGate,
    cfg: &PdConfig,
) -> Result<GameTrace> {
    stochastic_loop(sources, experts, gate, cfg, Penalty::Lagrangian)
}

/// Quadratic-penalty variant: same loop without the dual player, objective
/// penalized by `β(Ẑ−1)²`. `β = 0` documents that the constraint is ignored.
pub fn solve_quadratic_penalty<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    gate: FeatGate,
    beta: f64,
    cfg: &PdConfig,
) -> Result<GameTrace> {
    if beta < 0.0 {
        return Err(Error::Config("penalty weight must be non-negative".into()));
    }
    stochastic_loop(sources, experts, gate, cfg, Penalty::Quadratic(beta))
}

struct Fwd {
    features: Vec<f64>,
    w: Vec<f64>,
    resp: Vec<f64>,
    log_pi: f64,
    ratio: f64,
    source: usize,
}

fn stochastic_loop<E: SequenceModel>(
    sources: &[DiscreteDist],
    experts: &[E],
    mut gate: FeatGate,
    cfg: &PdConfig,
    penalty: Penalty,
) -> Result<GameTrace> {
    cfg.validate()?;
    let p = experts.len();
    if sources.len() != p {
        return Err(Error::LengthMismatch {
            expected: p,
            got: sources.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.batch_per_source;
    let batch_total = (p * m) as f64;
    let d = gate.feature_dim();
    let vocab = gate.vocab_size();
    let ln_p = (p as f64).ln();

    let mut lambda = MixtureWeights::uniform(p);
    let mut mu = 0.0f64;
    let mut z_ema = 1.0f64;
    let mut lam_sum = vec![0.0; p];
    let mut trace_rows = Vec::new();

    for t in 0..cfg.iters {
        // Equal-size batches per source, sampled in a fixed order.
        let mut fwd: Vec<Fwd> = Vec::with_capacity(p * m);
        for (k, src) in sources.iter().enumerate() {
            for _ in 0..m {
                let idx = sample_categorical(src.probs(), &mut rng);
                let x: &Seq = src.support().get(idx);
                let log_probs: Vec<f64> = experts.iter().map(|e| e.log_prob(x)).collect();
                let features = seq_features(x, vocab);
                let logits = gate.logits_from_features(&features);
                let w = softmax(&logits);
                let terms: Vec<f64> = w
                    .iter()
                    .zip(&log_probs)
                    .map(|(&wk, &lp)| wk.ln() + lp)
                    .collect();
                let log_pi = lse(&terms);
                if !log_pi.is_finite() {
                    return Err(Error::NonFiniteLoss(
                        "model assigned zero probability to a training sequence; \
                         raise the experts' smoothing"
                            .into(),
                    ));
                }
                let resp: Vec<f64> = terms.iter().map(|&lt| (lt - log_pi).exp()).collect();
                let log_q = lse(&log_probs) - ln_p;
                fwd.push(Fwd {
                    features,
                    w,
                    resp,
                    log_pi,
                    ratio: (log_pi - log_q).exp(),
                    source: k,
                });
            }
        }

        // Partition-mass estimate against the exact uniform expert mixture.
        let z_hat: f64 = fwd.iter().map(|f| f.ratio).sum::<f64>() / batch_total;
        z_ema = cfg.ema_alpha * z_ema + (1.0 - cfg.ema_alpha) * z_hat;

        // Per-source sequence-level losses.
        let mut losses = vec![0.0; p];
        for f in &fwd {
            losses[f.source] -= f.log_pi;
        }
        for l in losses.iter_mut() {
            *l /= m as f64;
        }

        lambda = eg_step(&lambda, &losses, cfg.eta_lambda)?;

        let pen_coef = match penalty {
            Penalty::Lagrangian => {
                if t >= cfg.warmup {
                    mu += cfg.eta_mu * (z_ema - 1.0);
                }
                mu
            }
            // Clamped so a large β times batch noise cannot fling the softmax
            // into saturation, where all gradients vanish.
            Penalty::Quadratic(beta) => (2.0 * beta * (z_hat - 1.0)).clamp(-GAIN_CAP, GAIN_CAP),
        };

        // Analytic gradient of Σ λ_k ℓ_k + pen·(Ẑ−1) through the softmax.
        let mut grad = vec![0.0; d * p];
        for f in &fwd {
            let coef = lambda.weights()[f.source] / m as f64 - pen_coef * f.ratio / batch_total;
            for (dim, &fd) in f.features.iter().enumerate() {
                if fd == 0.0 {
                    continue;
                }
                for k in 0..p {
                    grad[dim * p + k] += coef * fd * (f.w[k] - f.resp[k]);
                }
            }
        }
        for (th, g) in gate.theta_mut().iter_mut().zip(&grad) {
            *th -= cfg.eta_g * g;
        }

        for (acc, &l) in lam_sum.iter_mut().zip(lambda.weights()) {
            *acc += l;
        }

        if (t + 1) % cfg.checkpoint_every == 0 || t + 1 == cfg.iters {
            let steps = (t + 1) as f64;
            // Instantaneous linearized-gap surrogate on the batch.
            let avg_loss: f64 = losses
                .iter()
                .zip(lambda.weights())
                .map(|(&l, &w)| w * l)
                .sum();
            let gap = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max) - avg_loss;
            trace_rows.push(TraceRow {
                iter: t + 1,
                lambda: lambda.weights().to_vec(),
                losses: losses.clone(),
                mu,
                z_hat,
                z_ema,
                gap,
                avg_gate: None,
                avg_lambda: lam_sum.iter().map(|&x| x / steps).collect(),
            });
        }
    }

    let t_total = cfg.iters as f64;
    let lambda_bar = MixtureWeights::new(lam_sum.iter().map(|&x| x / t_total).collect())?;
    Ok(GameTrace {
        num_experts: p,
        rows: trace_rows,
        gate: SolvedGate::Feat(gate),
        lambda_bar,
    })
}

/// Objective and analytic gradient of the stochastic loss for one sequence;
/// exposed so tests can check the gradient against central finite differences.
#[doc(hidden)]
pub fn single_seq_objective_and_grad<E: SequenceModel>(
    gate: &FeatGate,
    experts: &[E],
    x: &Seq,
    loss_weight: f64,
    z_weight: f64,
) -> (f64, Vec<f64>) {
    let p = experts.len();
    let log_probs: Vec<f64> = experts.iter().map(|e| e.log_prob(x)).collect();
    let features = seq_features(x, gate.vocab_size());
    let w = softmax(&gate.logits_from_features(&features));
    let terms: Vec<f64> = w
        .iter()
        .zip(&log_probs)
        .map(|(&wk, &lp)| wk.ln() + lp)
        .collect();
    let log_pi = lse(&terms);
    let resp: Vec<f64> = terms.iter().map(|&lt| (lt - log_pi).exp()).collect();
    let log_q = lse(&log_probs) - (p as f64).ln();
    let ratio = (log_pi - log_q).exp();
    let objective = -loss_weight * log_pi + z_weight * ratio;
    let d = features.len();
    let mut grad = vec![0.0; d * p];
    for (dim, &fd) in features.iter().enumerate() {
        if fd == 0.0 {
            continue;
        }
        for k in 0..p {
            grad[dim * p + k] +=
                fd * (loss_weight * (w[k] - resp[k]) + z_weight * ratio * (resp[k] - w[k]));
        }
    }
    (objective, grad)
}
