//! Inference from the non-causal gated model.
//!
//! The gate scores complete sequences, so token-by-token generation is not
//! available. Both samplers draw candidates from the uniform expert mixture
//! `q(x) = (1/p) Σ_k π̂_k(x)` by picking an expert at random and sampling it
//! ancestrally, then correct toward the gated target:
//!
//! - [`sir_sample`]: sampling-importance-resampling — weight `N` candidates
//!   by `π_g/q` and resample one. Asymptotically exact in `N`.
//! - [`rejection_sample`]: exact — since gate rows are simplex rows,
//!   `π_g ≤ p·q` holds pointwise, so `M = p` is a strict envelope and the
//!   acceptance probability `π_g/(p·q)` never exceeds one.
//!
//! All weights and acceptance ratios are handled in log-space; the accept
//! test compares `ln u ≤ ln A(x)`.

use std::path::Path;

use rand::{Rng, RngCore};

use crate::dist::{DiscreteDist, Seq};
use crate::experts::SequenceModel;
use crate::gates::{gate_log_pi_or_neg_inf, Gate, TabularGate};
use crate::{Error, Result};

/// One SIR draw. `fallback` records whether degenerate weights forced the
/// uniform-choice path; at desk scale tests assert it stays unset.
#[derive(Debug, Clone)]
pub struct SirDraw {
    pub seq: Seq,
    pub fallback: bool,
}

fn propose<E: SequenceModel>(experts: &[E], rng: &mut dyn RngCore) -> Seq {
    let k = rng.gen_range(0..experts.len());
    experts[k].sample(rng)
}

fn log_q<E: SequenceModel>(experts: &[E], x: &Seq) -> f64 {
    let terms: Vec<f64> = experts.iter().map(|e| e.log_prob(x)).collect();
    crate::dist::lse(&terms) - (experts.len() as f64).ln()
}

/// Sampling-importance-resampling with `N` candidates.
pub fn sir_sample<G: Gate + ?Sized, E: SequenceModel>(
    gate: &G,
    experts: &[E],
    n_candidates: usize,
    rng: &mut dyn RngCore,
) -> Result<SirDraw> {
    if n_candidates == 0 {
        return Err(Error::EmptyInput);
    }
    let mut candidates = Vec::with_capacity(n_candidates);
    let mut log_weights = Vec::with_capacity(n_candidates);
    for _ in 0..n_candidates {
        let x = propose(experts, rng);
        let lw = gate_log_pi_or_neg_inf(gate, experts, &x) - log_q(experts, &x);
        candidates.push(x);
        log_weights.push(lw);
    }
    // Filter non-finite weights; -inf (zero target mass) is a legitimate
    // zero weight, +inf/NaN are numeric degeneracy.
    let finite: Vec<usize> = (0..n_candidates)
        .filter(|&i| log_weights[i] != f64::INFINITY && !log_weights[i].is_nan())
        .collect();
    let total = if finite.is_empty() {
        f64::NEG_INFINITY
    } else {
        crate::dist::lse(&finite.iter().map(|&i| log_weights[i]).collect::<Vec<_>>())
    };
    if !total.is_finite() {
        // All weights zero or degenerate: uniform fallback over candidates.
        let i = rng.gen_range(0..n_candidates);
        return Ok(SirDraw {
            seq: candidates.swap_remove(i),
            fallback: true,
        });
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = *finite.last().expect("nonempty");
    for &i in &finite {
        acc += (log_weights[i] - total).exp();
        if u < acc {
            chosen = i;
            break;
        }
    }
    Ok(SirDraw {
        seq: candidates.swap_remove(chosen),
        fallback: false,
    })
}

/// Exact rejection sampling with the strict envelope `M = p`.
///
/// Returns the accepted sequence and the number of proposals consumed.
pub fn rejection_sample<G: Gate + ?Sized, E: SequenceModel>(
    gate: &G,
    experts: &[E],
    rng: &mut dyn RngCore,
    max_trials: usize,
) -> Result<(Seq, usize)> {
    let ln_p = (experts.len() as f64).ln();
    for trial in 1..=max_trials {
        let x = propose(experts, rng);
        // ln A(x) = ln π_g(x) − ln p − ln q(x); A ≤ 1 because π_g ≤ p·q.
        let log_accept = gate_log_pi_or_neg_inf(gate, experts, &x) - ln_p - log_q(experts, &x);
        debug_assert!(log_accept <= 1e-12, "envelope violated: {log_accept}");
        let u: f64 = rng.gen();
        if u > 0.0 && u.ln() <= log_accept {
            return Ok((x, trial));
        }
    }
    Err(Error::BudgetExhausted { trials: max_trials })
}

/// Default proposal budget for rejection sampling.
pub fn default_max_trials(num_experts: usize) -> usize {
    100 * num_experts
}

/// Exact model distribution `π_g / Z` over the gate's support.
pub fn exact_model_dist<E: SequenceModel>(
    gate: &TabularGate,
    experts: &[E],
) -> Result<DiscreteDist> {
    let eval = gate.evaluate(experts);
    if eval.z <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let probs: Vec<f64> = eval.log_pi.iter().map(|&lp| lp.exp() / eval.z).collect();
    DiscreteDist::from_arithmetic(std::sync::Arc::clone(gate.support()), probs)
}

/// Writes a sampled corpus: `# modgate-corpus v1 V T N` then one sequence of
/// space-separated token ids per line.
pub fn write_corpus(path: &Path, vocab_size: usize, seq_len: usize, seqs: &[Seq]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# modgate-corpus v1 {} {} {}\n",
        vocab_size,
        seq_len,
        seqs.len()
    ));
    for s in seqs {
        out.push_str(&s.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<(usize, usize, Vec<Seq>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "#" || fields[1] != "modgate-corpus" || fields[2] != "v1" {
        return Err(Error::Parse(format!("bad corpus header {header:?}")));
    }
    let v: usize = fields[3]
        .parse()
        .map_err(|_| Error::Parse("bad vocab size".into()))?;
    let t: usize = fields[4]
        .parse()
        .map_err(|_| Error::Parse("bad length".into()))?;
    let mut seqs = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<crate::dist::Token> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<crate::dist::Token>()
                    .map_err(|_| Error::Parse(format!("bad token {s:?}")))
            })
            .collect::<Result<_>>()?;
        if toks.len() != t {
            return Err(Error::BadSeqLen {
                expected: t,
                got: toks.len(),
            });
        }
        seqs.push(Seq::new(toks));
    }
    Ok((v, t, seqs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{MixtureWeights, SupportSet};
    use crate::experts::{domain_dist, DomainRule, DomainSpec, MarkovExpert};
    use crate::solver::{solve_exact, ExactConfig, LambdaSet, SolvedGate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn disjoint_instance() -> (Arc<SupportSet>, Vec<DiscreteDist>, Vec<MarkovExpert>) {
        let a = DomainSpec::new(3, 2, DomainRule::Increment, 0.0).unwrap();
        let b = DomainSpec::new(3, 2, DomainRule::Decrement, 0.0).unwrap();
        let da = domain_dist(&a);
        let db = domain_dist(&b);
        let support = Arc::new(SupportSet::union(&[da.support(), db.support()]).unwrap());
        let ea = MarkovExpert::fit_weighted(da.support().seqs(), da.probs(), 3, 2, 0.0).unwrap();
        let eb = MarkovExpert::fit_weighted(db.support().seqs(), db.probs(), 3, 2, 0.0).unwrap();
        (support, vec![da, db], vec![ea, eb])
    }

    fn robust_gate() -> (TabularGate, Vec<DiscreteDist>, Vec<MarkovExpert>) {
        let (_, sources, experts) = disjoint_instance();
        let trace = solve_exact(
            &sources,
            &experts,
            &LambdaSet::full_simplex(2),
            &ExactConfig::new(500),
        )
        .unwrap();
        match trace.gate {
            SolvedGate::Tabular(g) => (g, sources, experts),
            _ => unreachable!(),
        }
    }

    fn empirical_tv(dist: &DiscreteDist, counts: &std::collections::HashMap<Seq, usize>, n: usize) -> f64 {
        let mut tv = 0.0;
        let mut seen_mass = 0.0;
        for (i, s) in dist.support().seqs().iter().enumerate() {
            let emp = *counts.get(s).unwrap_or(&0) as f64 / n as f64;
            tv += 0.5 * (emp - dist.prob(i)).abs();
            seen_mass += emp;
        }
        tv + 0.5 * (1.0 - seen_mass)
    }

    #[test]
    fn uniform_gate_sir_reproduces_proposal() {
        let (support, _, experts) = disjoint_instance();
        let gate = TabularGate::constant(Arc::clone(&support), &[0.5, 0.5]).unwrap();
        // With the uniform constant gate, π_g == q so every weight is 1.
        let q = exact_model_dist(&gate, &experts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 20_000;
        let mut counts = std::collections::HashMap::new();
        let mut fallbacks = 0;
        for _ in 0..n {
            let draw = sir_sample(&gate, &experts, 8, &mut rng).unwrap();
            if draw.fallback {
                fallbacks += 1;
            }
            *counts.entry(draw.seq).or_insert(0usize) += 1;
        }
        assert_eq!(fallbacks, 0);
        assert!(empirical_tv(&q, &counts, n) < 0.05);
    }

    #[test]
    fn sir_matches_exact_robust_model() {
        let (gate, _, experts) = robust_gate();
        let exact = exact_model_dist(&gate, &experts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let draw = sir_sample(&gate, &experts, 64, &mut rng).unwrap();
            assert!(!draw.fallback);
            *counts.entry(draw.seq).or_insert(0usize) += 1;
        }
        assert!(empirical_tv(&exact, &counts, n) < 0.05);
    }

    #[test]
    fn sir_single_candidate_is_the_proposal() {
        // N = 1 resamples its only candidate, whatever the gate says.
        let (support, _, experts) = disjoint_instance();
        let gate = TabularGate::constant(Arc::clone(&support), &[1.0, 0.0]).unwrap();
        let uniform = TabularGate::constant(Arc::clone(&support), &[0.5, 0.5]).unwrap();
        let q = exact_model_dist(&uniform, &experts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let draw = sir_sample(&gate, &experts, 1, &mut rng).unwrap();
            *counts.entry(draw.seq).or_insert(0usize) += 1;
        }
        assert!(empirical_tv(&q, &counts, n) < 0.05);
    }

    #[test]
    fn rejection_acceptance_rate_is_one_over_p() {
        let (support, _, experts) = disjoint_instance();
        let gate = TabularGate::constant(Arc::clone(&support), &[0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut trials_total = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let (_, trials) = rejection_sample(&gate, &experts, &mut rng, 10_000).unwrap();
            trials_total += trials;
        }
        let acceptance = n as f64 / trials_total as f64;
        assert!((acceptance - 0.5).abs() < 0.02, "acceptance {acceptance}");
        // Mean trials within the geometric-law window around p.
        let mean_trials = trials_total as f64 / n as f64;
        assert!(mean_trials >= 0.8 * 2.0 && mean_trials <= 1.2 * 2.0);
    }

    #[test]
    fn rejection_one_hot_gate_stays_in_expert_support() {
        let (support, sources, experts) = disjoint_instance();
        let gate = TabularGate::constant(Arc::clone(&support), &[0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..500 {
            let (x, _) = rejection_sample(&gate, &experts, &mut rng, 10_000).unwrap();
            assert!(sources[1].support().index_of(&x).is_some());
        }
    }

    #[test]
    fn rejection_matches_exact_robust_model() {
        let (gate, _, experts) = robust_gate();
        let exact = exact_model_dist(&gate, &experts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 20_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let (x, _) = rejection_sample(&gate, &experts, &mut rng, 10_000).unwrap();
            *counts.entry(x).or_insert(0usize) += 1;
        }
        assert!(empirical_tv(&exact, &counts, n) < 0.05);
    }

    #[test]
    fn rejection_budget_error() {
        let (support, _, experts) = disjoint_instance();
        // Gate zeroing the generating expert everywhere: acceptance is 0.
        let mut rows = Vec::new();
        for s in support.seqs() {
            if experts[0].log_prob(s).is_finite() {
                rows.extend([0.0, 1.0]);
            } else {
                rows.extend([1.0, 0.0]);
            }
        }
        let dead = TabularGate::new(Arc::clone(&support), 2, rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = rejection_sample(&dead, &experts, &mut rng, 50);
        assert!(matches!(err, Err(Error::BudgetExhausted { trials: 50 })));
    }

    #[test]
    fn sir_weight_identity_for_constant_gates() {
        // w(x) = π_g/q = p·Σλ_kπ̂_k / Σπ̂_k, checked pointwise on the support.
        let (support, _, experts) = disjoint_instance();
        let lam = MixtureWeights::new(vec![0.3, 0.7]).unwrap();
        let gate = TabularGate::constant(Arc::clone(&support), lam.weights()).unwrap();
        for s in support.seqs() {
            let lw = gate_log_pi_or_neg_inf(&gate, &experts, s) - log_q(&experts, s);
            let num: f64 = experts
                .iter()
                .zip(lam.weights())
                .map(|(e, &l)| l * e.log_prob(s).exp())
                .sum();
            let den: f64 = experts.iter().map(|e| e.log_prob(s).exp()).sum();
            assert!((lw.exp() - 2.0 * num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn samplers_are_deterministic_given_seed() {
        let (gate, _, experts) = robust_gate();
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let da = sir_sample(&gate, &experts, 16, &mut a).unwrap();
            let db = sir_sample(&gate, &experts, 16, &mut b).unwrap();
            assert_eq!(da.seq, db.seq);
        }
    }

    #[test]
    fn corpus_round_trip() {
        let (gate, _, experts) = robust_gate();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<Seq> = (0..32)
            .map(|_| rejection_sample(&gate, &experts, &mut rng, 1000).unwrap().0)
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        write_corpus(&path, 3, 2, &seqs).unwrap();
        let (v, t, back) = read_corpus(&path).unwrap();
        assert_eq!((v, t), (3, 2));
        assert_eq!(back, seqs);
    }
}
