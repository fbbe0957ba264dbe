//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! and its runtime. Oracles (grid searches, exhaustive enumeration,
//! independent recomputation) live in this file and never share code with
//! the implementation paths they check.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use modgate::analysis::{capacity_lower_bound, robust_bound_report};
use modgate::dist::{
    jensen_shannon, kl_divergence, merge_onto_union, mixture, DiscreteDist, MixtureWeights, Seq,
    SupportSet, Token,
};
use modgate::distill::{
    chain_rule_decomposition, generate_cached_dataset, student_seq_logprob, train_router,
    CausalRouter, PosteriorRouter,
};
use modgate::experts::{
    domain_dist, expert_epsilon, expert_matrix, DomainRule, DomainSpec, MarkovExpert,
    SequenceModel,
};
use modgate::gates::{gate_log_pi_or_neg_inf, FeatGate, TabularGate};
use modgate::sampler::{exact_model_dist, rejection_sample, sir_sample};
use modgate::solver::{
    duality_gap, solve_exact, solve_primal_dual, worst_case_risk, ExactConfig, LambdaSet,
    PdConfig, SolvedGate,
};

// ---------------------------------------------------------------------------
// Shared instance builders
// ---------------------------------------------------------------------------

fn clean_rule_pair(v: usize, t: usize) -> (Vec<DiscreteDist>, Vec<MarkovExpert>) {
    let a = DomainSpec::new(v, t, DomainRule::Increment, 0.0).unwrap();
    let b = DomainSpec::new(v, t, DomainRule::Decrement, 0.0).unwrap();
    let da = domain_dist(&a);
    let db = domain_dist(&b);
    let ea = MarkovExpert::fit_weighted(da.support().seqs(), da.probs(), v, t, 0.0).unwrap();
    let eb = MarkovExpert::fit_weighted(db.support().seqs(), db.probs(), v, t, 0.0).unwrap();
    (vec![da, db], vec![ea, eb])
}

fn solved_tabular(
    sources: &[DiscreteDist],
    experts: &[MarkovExpert],
    set: &LambdaSet,
    cfg: &ExactConfig,
) -> (TabularGate, modgate::solver::GameTrace) {
    let trace = solve_exact(sources, experts, set, cfg).unwrap();
    let gate = match &trace.gate {
        SolvedGate::Tabular(g) => g.clone(),
        _ => unreachable!("exact solver yields tabular gates"),
    };
    (gate, trace)
}

/// Identical-expert instance: two copies of the fair coin against the
/// (0.6, 0.4) target on a two-point support.
fn identical_expert_pair() -> (Vec<DiscreteDist>, Vec<MarkovExpert>) {
    let support =
        Arc::new(SupportSet::new(2, 1, vec![Seq::new(vec![0]), Seq::new(vec![1])]).unwrap());
    let trans = vec![0.5, 0.5, 0.5, 0.5];
    let e1 = MarkovExpert::new(2, 1, vec![0.5, 0.5], trans.clone(), 0.0).unwrap();
    let e2 = MarkovExpert::new(2, 1, vec![0.5, 0.5], trans, 0.0).unwrap();
    let d = DiscreteDist::new(Arc::clone(&support), vec![0.6, 0.4]).unwrap();
    (vec![d.clone(), d], vec![e1, e2])
}

/// Single-token instance with disjoint expert supports whose per-source
/// errors are tuned to the requested values by skewing toward a point mass.
fn disjoint_with_errors(eps: [f64; 2]) -> (Vec<DiscreteDist>, Vec<MarkovExpert>) {
    let support =
        Arc::new(SupportSet::new(6, 1, (0..6).map(|t| Seq::new(vec![t])).collect()).unwrap());
    let s1 = DiscreteDist::new(Arc::clone(&support), vec![0.5, 0.3, 0.2, 0.0, 0.0, 0.0]).unwrap();
    let s2 =
        DiscreteDist::new(Arc::clone(&support), vec![0.0, 0.0, 0.0, 0.4, 0.35, 0.25]).unwrap();
    let trans = vec![1.0 / 6.0; 36];
    let skew = |src: &DiscreteDist, peak: usize, eps: f64| -> MarkovExpert {
        let start_at = |t: f64| -> Vec<f64> {
            src.probs()
                .iter()
                .enumerate()
                .map(|(i, &q)| (1.0 - t) * q + if i == peak { t } else { 0.0 })
                .collect()
        };
        let kl_at = |t: f64| -> f64 {
            let e = start_at(t);
            src.probs()
                .iter()
                .zip(&e)
                .filter(|(&q, _)| q > 0.0)
                .map(|(&q, &m)| q * (q / m).ln())
                .sum()
        };
        let (mut lo, mut hi) = (0.0, 1.0 - 1e-9);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if kl_at(mid) < eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        MarkovExpert::new(6, 1, start_at(0.5 * (lo + hi)), trans.clone(), 0.0).unwrap()
    };
    (
        vec![s1.clone(), s2.clone()],
        vec![skew(&s1, 0, eps[0]), skew(&s2, 3, eps[1])],
    )
}

fn exact_nll<M: Fn(&Seq) -> f64>(test: &DiscreteDist, log_prob: M) -> f64 {
    test.support()
        .seqs()
        .iter()
        .zip(test.probs())
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| -p * log_prob(s))
        .sum()
}

fn report(criterion: &str, pass: bool, detail: &str, started: Instant) {
    println!(
        "[{criterion}] {} — {detail} ({} ms)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_millis()
    );
}

// ---------------------------------------------------------------------------
// Criterion 1 — JSD decomposition identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_jsd_decomposition_identity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.gen_range(2..=4usize);
        let n = rng.gen_range(2..=50usize);
        let support = Arc::new(
            SupportSet::new(n, 1, (0..n).map(|t| Seq::new(vec![t as Token])).collect()).unwrap(),
        );
        let rand_dist = |rng: &mut ChaCha8Rng| -> DiscreteDist {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect();
            let s: f64 = raw.iter().sum();
            DiscreteDist::new(Arc::clone(&support), raw.into_iter().map(|x| x / s).collect())
                .unwrap()
        };
        let dists: Vec<DiscreteDist> = (0..p).map(|_| rand_dist(&mut rng)).collect();
        let reference = rand_dist(&mut rng);
        let raw_lam: Vec<f64> = (0..p).map(|_| rng.gen_range(1e-2..1.0)).collect();
        let s: f64 = raw_lam.iter().sum();
        let lam = MixtureWeights::new(raw_lam.into_iter().map(|x| x / s).collect()).unwrap();

        let lhs: f64 = dists
            .iter()
            .zip(lam.weights())
            .map(|(d, &w)| w * kl_divergence(d, &reference).unwrap())
            .sum();
        let mix = mixture(&dists, &lam).unwrap();
        let rhs = kl_divergence(&mix, &reference).unwrap() + jensen_shannon(&dists, &lam).unwrap();
        worst = worst.max((lhs - rhs).abs());
    }
    let pass = worst <= 1e-9 && started.elapsed().as_secs() < 1;
    report(
        "criterion 1",
        pass,
        &format!("max identity residual {worst:.3e} over 100 random instances"),
        started,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 2 — capacity lower bound vs the static-gate grid
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_capacity_lower_bound() {
    let started = Instant::now();
    let mut all_ok = true;
    let mut detail = String::new();

    // p = 2 battery with tuned disjoint errors.
    for eps in [[0.0, 0.0], [0.05, 0.3], [0.01, 0.5]] {
        let (sources, experts) = disjoint_with_errors(eps);
        let measured = [
            expert_epsilon(&sources[0], &experts[0]),
            expert_epsilon(&sources[1], &experts[1]),
        ];
        let capacity = capacity_lower_bound(&measured).unwrap();
        let (support, merged) = merge_onto_union(&sources).unwrap();
        let probs = expert_matrix(&experts, &support);
        let mut best = f64::INFINITY;
        for step in 1..1000 {
            let w = step as f64 / 1000.0;
            let mut worst = f64::NEG_INFINITY;
            for src in &merged {
                let mut kl = 0.0;
                for (i, &px) in src.probs().iter().enumerate() {
                    if px > 0.0 {
                        kl += px * (px / (w * probs[i * 2] + (1.0 - w) * probs[i * 2 + 1])).ln();
                    }
                }
                worst = worst.max(kl);
            }
            best = best.min(worst);
        }
        let ok = best >= capacity - 1e-3;
        all_ok &= ok;
        detail.push_str(&format!("p=2 eps={eps:?}: grid {best:.6} vs cap {capacity:.6}; "));
    }

    // p = 3 disjoint instance, full 1e-3 simplex grid.
    {
        let support = Arc::new(
            SupportSet::new(6, 1, (0..6).map(|t| Seq::new(vec![t])).collect()).unwrap(),
        );
        let trans = vec![1.0 / 6.0; 36];
        let mk = |probs: Vec<f64>| MarkovExpert::new(6, 1, probs, trans.clone(), 0.0).unwrap();
        let sources = vec![
            DiscreteDist::new(Arc::clone(&support), vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            DiscreteDist::new(Arc::clone(&support), vec![0.0, 0.0, 0.7, 0.3, 0.0, 0.0]).unwrap(),
            DiscreteDist::new(Arc::clone(&support), vec![0.0, 0.0, 0.0, 0.0, 0.6, 0.4]).unwrap(),
        ];
        let experts = vec![
            mk(vec![0.6, 0.4, 0.0, 0.0, 0.0, 0.0]),
            mk(vec![0.0, 0.0, 0.55, 0.45, 0.0, 0.0]),
            mk(vec![0.0, 0.0, 0.0, 0.0, 0.75, 0.25]),
        ];
        let measured: Vec<f64> = sources
            .iter()
            .zip(&experts)
            .map(|(s, e)| expert_epsilon(s, e))
            .collect();
        let capacity = capacity_lower_bound(&measured).unwrap();
        let probs = expert_matrix(&experts, &support);
        let mut best = f64::INFINITY;
        let steps = 1000usize;
        for i in 1..steps {
            for j in 1..steps - i {
                let w = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                let mut worst = f64::NEG_INFINITY;
                for src in &sources {
                    let mut kl = 0.0;
                    for (x, &px) in src.probs().iter().enumerate() {
                        if px > 0.0 {
                            let model: f64 =
                                (0..3).map(|k| w[k] * probs[x * 3 + k]).sum();
                            kl += px * (px / model).ln();
                        }
                    }
                    worst = worst.max(kl);
                }
                best = best.min(worst);
            }
        }
        let ok = best >= capacity - 1e-3;
        all_ok &= ok;
        detail.push_str(&format!("p=3: grid {best:.6} vs cap {capacity:.6}"));
    }

    let within_time = started.elapsed().as_secs() < 10;
    report("criterion 2", all_ok && within_time, &detail, started);
    assert!(all_ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 3 — robust bound on the solved gates
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_robust_bound() {
    let started = Instant::now();
    // Disjoint clean rules: the bound at the balanced mixture is
    // ln2 − 0 − ln2 = 0, so the solved gate must drive that divergence to
    // within solver slack; at each vertex the bound value is ln 2 and the
    // measurement is compared against it there (the bound is λ-dependent, so
    // measurement and bound are always paired at the same mixture).
    let (sources, experts) = clean_rule_pair(3, 2);
    let set = LambdaSet::full_simplex(2);
    let (gate, trace) = solved_tabular(&sources, &experts, &set, &ExactConfig::new(2000));
    let (support, merged) = merge_onto_union(&sources).unwrap();
    let model = exact_model_dist(&gate, &experts).unwrap();
    let lambda_star = trace.least_favorable_mixture();

    let balanced = mixture(&merged, &MixtureWeights::uniform(2)).unwrap();
    let balanced_kl = kl_divergence(&balanced.reindex(model.support()).unwrap(), &model).unwrap();
    let balanced_report =
        robust_bound_report(&sources, &experts, &lambda_star, &MixtureWeights::uniform(2))
            .unwrap();
    let mut ok = balanced_kl <= balanced_report.value + 0.02;

    for k in 0..2 {
        let vertex = MixtureWeights::one_hot(2, k);
        let vertex_kl = kl_divergence(
            &mixture(&merged, &vertex).unwrap().reindex(model.support()).unwrap(),
            &model,
        )
        .unwrap();
        let vertex_report =
            robust_bound_report(&sources, &experts, &lambda_star, &vertex).unwrap();
        ok &= vertex_kl <= vertex_report.value + 0.02;
    }
    let _ = support;

    // Identical experts: worst-case risk collapses to the single-expert
    // error.
    let (sources2, experts2) = identical_expert_pair();
    let eps = expert_epsilon(&sources2[0], &experts2[0]);
    let (gate2, _) = solved_tabular(&sources2, &experts2, &set, &ExactConfig::new(500));
    let risk2 = worst_case_risk(&gate2, &sources2, &experts2, &set).unwrap();
    ok &= risk2 <= eps + 0.005;

    let within_time = started.elapsed().as_secs() < 30;
    report(
        "criterion 3",
        ok && within_time,
        &format!(
            "balanced KL {balanced_kl:.5} vs bound 0+0.02; identical-expert risk {risk2:.6} vs ε+0.005 = {:.6}",
            eps + 0.005
        ),
        started,
    );
    assert!(ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 4 — fixed-mixture optimality vs brute-force grids
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_fixed_mixture_optimality() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_z = 0.0f64;

    // Two-point supports (the spec's asymmetric instance plus random ones)
    // and three-point supports, all 2-expert.
    let mut run_two_point = |p1: [f64; 2], p2: [f64; 2], target: [f64; 2]| {
        let support =
            Arc::new(SupportSet::new(2, 1, vec![Seq::new(vec![0]), Seq::new(vec![1])]).unwrap());
        let trans = vec![0.5, 0.5, 0.5, 0.5];
        let e1 = MarkovExpert::new(2, 1, p1.to_vec(), trans.clone(), 0.0).unwrap();
        let e2 = MarkovExpert::new(2, 1, p2.to_vec(), trans, 0.0).unwrap();
        let d = DiscreteDist::new(Arc::clone(&support), target.to_vec()).unwrap();
        let sources = vec![d.clone(), d.clone()];
        let experts = vec![e1, e2];
        let opt =
            modgate::fixedopt::optimal_fixed_gate(&sources, &experts, &MixtureWeights::uniform(2))
                .unwrap();
        let kl_opt = kl_divergence(&d, &opt.model).unwrap();
        let z_err = (opt.model.probs().iter().sum::<f64>() - 1.0).abs();
        let (m0, ma0) = (p1[0].min(p2[0]), p1[0].max(p2[0]));
        let (m1, ma1) = (p1[1].min(p2[1]), p1[1].max(p2[1]));
        let mut best = f64::INFINITY;
        for step in 0..=1000 {
            let q0 = m0 + (ma0 - m0) * step as f64 / 1000.0;
            let q1 = 1.0 - q0;
            if q1 < m1 - 1e-12 || q1 > ma1 + 1e-12 {
                continue;
            }
            let mut kl = 0.0;
            if target[0] > 0.0 {
                kl += target[0] * (target[0] / q0).ln();
            }
            if target[1] > 0.0 {
                kl += target[1] * (target[1] / q1).ln();
            }
            best = best.min(kl);
        }
        (kl_opt - best, z_err)
    };
    for (p1, p2, t) in [
        ([0.9, 0.1], [0.2, 0.8], [0.5, 0.5]),
        ([0.9, 0.1], [0.2, 0.8], [0.95, 0.05]),
        ([0.7, 0.3], [0.4, 0.6], [0.1, 0.9]),
    ] {
        let (excess, z) = run_two_point(p1, p2, t);
        worst_excess = worst_excess.max(excess);
        worst_z = worst_z.max(z);
    }

    // Random three-point instances with a 1e-3 grid oracle.
    for _ in 0..6 {
        let support = Arc::new(
            SupportSet::new(3, 1, (0..3).map(|t| Seq::new(vec![t])).collect()).unwrap(),
        );
        let trans = vec![1.0 / 3.0; 9];
        let rand_simplex = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let a = rand_simplex(&mut rng);
        let b = rand_simplex(&mut rng);
        let t = rand_simplex(&mut rng);
        let e1 = MarkovExpert::new(3, 1, a.clone(), trans.clone(), 0.0).unwrap();
        let e2 = MarkovExpert::new(3, 1, b.clone(), trans.clone(), 0.0).unwrap();
        let d = DiscreteDist::new(Arc::clone(&support), t.clone()).unwrap();
        let sources = vec![d.clone(), d.clone()];
        let experts = vec![e1, e2];
        let opt =
            modgate::fixedopt::optimal_fixed_gate(&sources, &experts, &MixtureWeights::uniform(2))
                .unwrap();
        let kl_opt = kl_divergence(&d, &opt.model).unwrap();
        worst_z = worst_z.max((opt.model.probs().iter().sum::<f64>() - 1.0).abs());

        let bounds: Vec<(f64, f64)> = (0..3).map(|i| (a[i].min(b[i]), a[i].max(b[i]))).collect();
        let mut best = f64::INFINITY;
        let steps = 1000usize;
        for i in 0..=steps {
            let q0 = bounds[0].0 + (bounds[0].1 - bounds[0].0) * i as f64 / steps as f64;
            for j in 0..=steps {
                let q1 = bounds[1].0 + (bounds[1].1 - bounds[1].0) * j as f64 / steps as f64;
                let q2 = 1.0 - q0 - q1;
                if q2 < bounds[2].0 - 1e-9 || q2 > bounds[2].1 + 1e-9 {
                    continue;
                }
                let kl = t[0] * (t[0] / q0).ln() + t[1] * (t[1] / q1).ln() + t[2] * (t[2] / q2).ln();
                best = best.min(kl);
            }
        }
        worst_excess = worst_excess.max(kl_opt - best);
    }

    let ok = worst_excess <= 1e-4 && worst_z <= 1e-10;
    let within_time = started.elapsed().as_secs() < 10;
    report(
        "criterion 4",
        ok && within_time,
        &format!("worst excess over grid {worst_excess:.2e}; worst |Z−1| {worst_z:.2e}"),
        started,
    );
    assert!(ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 5 — no-regret gap decay
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_no_regret_decay() {
    let started = Instant::now();
    let (sources, experts) = clean_rule_pair(3, 2);
    let set = LambdaSet::full_simplex(2);
    let mut cfg = ExactConfig::new(4000);
    cfg.checkpoint_every = 1000;
    let trace = solve_exact(&sources, &experts, &set, &cfg).unwrap();
    let gaps = duality_gap(&trace, &sources, &experts, &set).unwrap();
    // Uniform start is already the equilibrium on the clean symmetric
    // instance, so both gaps sit at numerical zero and the decay bound holds
    // with the epsilon guard.
    let ok = gaps.iter().all(|g| *g >= -1e-9) && gaps[3] <= 0.75 * gaps[0] + 1e-12;
    let within_time = started.elapsed().as_secs() < 60;
    report(
        "criterion 5",
        ok && within_time,
        &format!("gap(1000) = {:.3e}, gap(4000) = {:.3e}", gaps[0], gaps[3]),
        started,
    );
    assert!(ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 6 — primal-dual constraint satisfaction on the replica
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_primal_dual_constraint() {
    let started = Instant::now();
    let (v, t, alpha) = (20usize, 6usize, 0.02);
    let a = DomainSpec::new(v, t, DomainRule::Increment, 0.0).unwrap();
    let b = DomainSpec::new(v, t, DomainRule::Decrement, 0.0).unwrap();
    let da = domain_dist(&a);
    let db = domain_dist(&b);
    let ea = MarkovExpert::fit_weighted(da.support().seqs(), da.probs(), v, t, alpha).unwrap();
    let eb = MarkovExpert::fit_weighted(db.support().seqs(), db.probs(), v, t, alpha).unwrap();
    let sources = vec![da, db];
    let experts = vec![ea, eb];
    let cfg = PdConfig::new(2000, 606);
    let trace = solve_primal_dual(&sources, &experts, FeatGate::zeros(v, t, 2), &cfg).unwrap();
    let last = trace.rows.last().unwrap();
    let lam_bar = trace.least_favorable_mixture();
    let z_ok = (last.z_ema - 1.0).abs() <= 0.05;
    let lam_ok = lam_bar
        .weights()
        .iter()
        .all(|&w| (w - 0.5).abs() <= 0.1);
    // Constraint-violation decay along checkpoints (|Z̄ − 1| at 4T₀ within
    // +0.01 of its value at T₀).
    let t0 = trace.rows.iter().find(|r| r.iter >= 500).unwrap();
    let decay_ok = (last.z_ema - 1.0).abs() <= (t0.z_ema - 1.0).abs() + 0.01;
    let ok = z_ok && lam_ok && decay_ok;
    let within_time = started.elapsed().as_secs() < 300;
    report(
        "criterion 6",
        ok && within_time,
        &format!(
            "|Z̄−1| = {:.2e}; λ̄ = ({:.3}, {:.3})",
            (last.z_ema - 1.0).abs(),
            lam_bar.weights()[0],
            lam_bar.weights()[1]
        ),
        started,
    );
    assert!(ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 7 — sampler exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_sampler_exactness() {
    let started = Instant::now();
    let (sources, experts) = clean_rule_pair(3, 2);
    let set = LambdaSet::full_simplex(2);
    let (gate, _) = solved_tabular(&sources, &experts, &set, &ExactConfig::new(500));
    let exact = exact_model_dist(&gate, &experts).unwrap();

    let tv_of = |counts: &std::collections::HashMap<Seq, usize>, n: usize| -> f64 {
        let mut tv = 0.0;
        let mut seen = 0.0;
        for (i, s) in exact.support().seqs().iter().enumerate() {
            let emp = *counts.get(s).unwrap_or(&0) as f64 / n as f64;
            tv += 0.5 * (emp - exact.prob(i)).abs();
            seen += emp;
        }
        tv + 0.5 * (1.0 - seen)
    };

    // Rejection: TV against the enumerated model at 2·10⁴ accepted samples.
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let n = 20_000;
    let mut counts = std::collections::HashMap::new();
    for _ in 0..n {
        let (x, _) = rejection_sample(&gate, &experts, &mut rng, 10_000).unwrap();
        *counts.entry(x).or_insert(0usize) += 1;
    }
    let tv_rej = tv_of(&counts, n);

    // Acceptance rate of the uniform constant gate over 10⁴ samples.
    let support = Arc::clone(gate.support());
    let uniform = TabularGate::constant(support, &[0.5, 0.5]).unwrap();
    let mut trials = 0usize;
    for _ in 0..10_000 {
        let (_, used) = rejection_sample(&uniform, &experts, &mut rng, 10_000).unwrap();
        trials += used;
    }
    let acceptance = 10_000.0 / trials as f64;

    // SIR with N = 64 candidates.
    let mut counts = std::collections::HashMap::new();
    let mut fallbacks = 0usize;
    for _ in 0..n {
        let draw = sir_sample(&gate, &experts, 64, &mut rng).unwrap();
        if draw.fallback {
            fallbacks += 1;
        }
        *counts.entry(draw.seq).or_insert(0usize) += 1;
    }
    let tv_sir = tv_of(&counts, n);

    let ok =
        tv_rej <= 0.05 && (acceptance - 0.5).abs() <= 0.02 && tv_sir <= 0.05 && fallbacks == 0;
    let within_time = started.elapsed().as_secs() < 60;
    report(
        "criterion 7",
        ok && within_time,
        &format!(
            "rejection TV {tv_rej:.4}; uniform-gate acceptance {acceptance:.4}; SIR TV {tv_sir:.4}"
        ),
        started,
    );
    assert!(ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 8 — distillation exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_distillation_exactness() {
    let started = Instant::now();
    let (sources, experts) = clean_rule_pair(3, 4);
    let set = LambdaSet::full_simplex(2);
    let (gate, _) = solved_tabular(&sources, &experts, &set, &ExactConfig::new(500));

    // Posterior-mean realizability on the solved gate and on an asymmetric
    // constant gate.
    let oracle = PosteriorRouter {
        gate: &gate,
        experts: &experts,
    };
    let rep = chain_rule_decomposition(&gate, &experts, &oracle).unwrap();
    let realizable = rep.total_kl.abs() <= 1e-9;
    let const_gate =
        TabularGate::constant(Arc::clone(gate.support()), &[0.35, 0.65]).unwrap();
    let const_oracle = PosteriorRouter {
        gate: &const_gate,
        experts: &experts,
    };
    let rep_c = chain_rule_decomposition(&const_gate, &experts, &const_oracle).unwrap();
    let realizable_c = rep_c.total_kl.abs() <= 1e-9;

    // Chain-rule identity for arbitrary routers.
    let mut crooked = CausalRouter::zeros(3, 4, 2);
    for (i, w) in crooked.phi_mut().iter_mut().enumerate() {
        *w = ((i * 17 % 11) as f64 - 5.0) * 0.13;
    }
    let mut chain_ok = true;
    for router in [&CausalRouter::zeros(3, 4, 2), &crooked] {
        let r = chain_rule_decomposition(&gate, &experts, router).unwrap();
        chain_ok &= (r.total_kl - r.stepwise_sum).abs() <= 1e-9;
        chain_ok &= r.total_kl <= r.router_bound + 1e-9;
    }

    // Trained router within 0.05 NLL of the posterior oracle.
    let (_, tuples) = generate_cached_dataset(&gate, &experts, 400, 808).unwrap();
    let trained = train_router(&tuples, CausalRouter::zeros(3, 4, 2), 3000, 0.5, 9)
        .unwrap()
        .router;
    let teacher = exact_model_dist(&gate, &experts).unwrap();
    let mut trained_nll = 0.0;
    let mut oracle_nll = 0.0;
    for (i, s) in gate.support().seqs().iter().enumerate() {
        let w = teacher.prob(i);
        trained_nll -= w * student_seq_logprob(&trained, &experts, s);
        oracle_nll -= w * student_seq_logprob(&oracle, &experts, s);
    }
    let train_ok = trained_nll - oracle_nll <= 0.05;

    let ok = realizable && realizable_c && chain_ok && train_ok;
    let within_time = started.elapsed().as_secs() < 120;
    report(
        "criterion 8",
        ok && within_time,
        &format!(
            "posterior KL {:.2e}/{:.2e}; trained NLL {trained_nll:.4} vs oracle {oracle_nll:.4}",
            rep.total_kl, rep_c.total_kl
        ),
        started,
    );
    assert!(ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 9 — interference-gap reproduction (sweep at V=3, T=4)
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_interference_gap() {
    let started = Instant::now();
    let ln3 = 3f64.ln();
    let ln2 = std::f64::consts::LN_2;
    let (sources, experts) = clean_rule_pair(3, 4);
    let set = LambdaSet::full_simplex(2);
    let (gate, _) = solved_tabular(&sources, &experts, &set, &ExactConfig::new(1000));
    let (support, merged) = merge_onto_union(&sources).unwrap();

    // Baselines: fixed-retrained on the balanced aggregate; per-point oracle
    // refit.
    let balanced = mixture(&merged, &MixtureWeights::uniform(2)).unwrap();
    let fixed = MarkovExpert::fit_weighted(support.seqs(), balanced.probs(), 3, 4, 0.0).unwrap();

    let mut gate_nll = Vec::new();
    let mut oracle_nll = Vec::new();
    let mut fixed_nll = Vec::new();
    for i in 0..=10 {
        let lam = i as f64 / 10.0;
        let w = MixtureWeights::new(vec![lam, 1.0 - lam]).unwrap();
        let test = mixture(&merged, &w).unwrap();
        gate_nll.push(exact_nll(&test, |s| {
            gate_log_pi_or_neg_inf(&gate, &experts, s)
        }));
        let oracle =
            MarkovExpert::fit_weighted(support.seqs(), test.probs(), 3, 4, 0.0).unwrap();
        oracle_nll.push(exact_nll(&test, |s| oracle.log_prob(s)));
        fixed_nll.push(exact_nll(&test, |s| fixed.log_prob(s)));
    }

    // Clause A (as specified): gate NLL ≤ ln3 + 0.05 at every λ. This clause
    // is information-theoretically unattainable: any sequence distribution
    // has NLL ≥ H(p̂_λ), and H at λ = 1/2 is ln6 ≈ 1.792 > ln3 + 0.05 ≈ 1.149.
    // The normalized gate pays exactly the ln2 partition tax on top of the
    // expert-level ln3, which the threshold omits. Asserted as written; the
    // corrected flatness claim is clause A'.
    let gate_max = gate_nll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let clause_a = gate_max <= ln3 + 0.05;

    // Clause A' (entropy-floor-corrected): gate NLL ≤ ln3 + ln2 + 0.05 at
    // every λ, and the curve is flat.
    let gate_min = gate_nll.iter().copied().fold(f64::INFINITY, f64::min);
    let clause_a_fixed = gate_max <= ln3 + ln2 + 0.05 && gate_max - gate_min <= 0.02;

    // Clause B: fixed-retrained NLL at λ = 0.5 ≥ ln3 + (T−1)ln2 − 0.05.
    let clause_b = fixed_nll[5] >= ln3 + 3.0 * ln2 - 0.05;

    // Clause C: oracle curve concave with interior penalty ≥ 0.2 nats.
    let mut concave = true;
    for w in oracle_nll.windows(3) {
        concave &= w[0] + w[2] <= 2.0 * w[1] + 1e-9;
    }
    let interior_penalty = oracle_nll[5] - oracle_nll[0].max(oracle_nll[10]);
    let clause_c = concave && interior_penalty >= 0.2;

    // Clause D: gate beats the oracle at λ = 0.5 by ≥ 1.0 nat.
    let clause_d = oracle_nll[5] - gate_nll[5] >= 1.0;

    let pass = clause_a && clause_b && clause_c && clause_d;
    report(
        "criterion 9",
        pass,
        &format!(
            "A(gate ≤ ln3+0.05): {} (measured {gate_max:.4} vs {:.4}; entropy floor at λ=1/2 is ln6 = {:.4}); \
             A'(corrected ≤ ln3+ln2+0.05, flat): {}; B(fixed ≥ {:.4}): {} ({:.4}); \
             C(concave, penalty {:.3} ≥ 0.2): {}; D(gate beats oracle by {:.3} ≥ 1.0): {}",
            clause_a,
            ln3 + 0.05,
            (6f64).ln(),
            clause_a_fixed,
            ln3 + 3.0 * ln2 - 0.05,
            clause_b,
            fixed_nll[5],
            interior_penalty,
            clause_c,
            oracle_nll[5] - gate_nll[5],
            clause_d
        ),
        started,
    );
    assert!(clause_a_fixed && clause_b && clause_c && clause_d);
    // Faithful assertion of the criterion as written; see the decisions
    // ledger for the entropy-floor analysis of why this cannot pass.
    assert!(
        clause_a,
        "gate NLL ≤ ln3+0.05 is unattainable: measured {gate_max:.4}, threshold {:.4}, \
         entropy floor at λ=1/2 is ln6 ≈ {:.4}",
        ln3 + 0.05,
        (6f64).ln()
    );
}

// ---------------------------------------------------------------------------
// Criterion 10 — dominance of the specialized solution
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_dominance() {
    let started = Instant::now();
    let (sources, experts) = disjoint_with_errors([0.01, 0.5]);
    let restricted = LambdaSet::new(vec![0.0, 0.0], vec![1.0, 0.05]).unwrap();
    let full = LambdaSet::full_simplex(2);
    let mut cfg = ExactConfig::new(4000);
    cfg.eta_lambda = Some(0.5);
    let (gate_restricted, _) = solved_tabular(&sources, &experts, &restricted, &cfg);
    let (gate_full, _) = solved_tabular(&sources, &experts, &full, &cfg);

    let risk_restricted =
        worst_case_risk(&gate_restricted, &sources, &experts, &restricted).unwrap();
    let risk_full_on_restricted =
        worst_case_risk(&gate_full, &sources, &experts, &restricted).unwrap();
    let value_full = worst_case_risk(&gate_full, &sources, &experts, &full).unwrap();

    let dominance = risk_restricted <= risk_full_on_restricted + 1e-3;
    let strict = risk_restricted < value_full;
    let ok = dominance && strict;
    let within_time = started.elapsed().as_secs() < 60;
    report(
        "criterion 10",
        ok && within_time,
        &format!(
            "restricted-set risks: specialized {risk_restricted:.5} vs general {risk_full_on_restricted:.5}; \
             full-game value proxy {value_full:.5}"
        ),
        started,
    );
    assert!(ok && within_time);
}

// ---------------------------------------------------------------------------
// Criterion 11 — linear-family coincidence
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_linear_family_coincidence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let n = 6usize;
    let support = Arc::new(
        SupportSet::new(n, 1, (0..n).map(|t| Seq::new(vec![t as Token])).collect()).unwrap(),
    );
    let rand_dist = |rng: &mut ChaCha8Rng| -> DiscreteDist {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        DiscreteDist::new(Arc::clone(&support), raw.into_iter().map(|x| x / s).collect()).unwrap()
    };
    let mut worst = 0.0f64;
    for case in 0..20 {
        // Ten disjoint-support bases with arbitrary targets, ten overlapping
        // bases with in-hull targets; both classes are genuine linear
        // families for the reverse projection.
        let (basis, t1, t2): (Vec<DiscreteDist>, DiscreteDist, DiscreteDist) = if case % 2 == 0 {
            let basis: Vec<DiscreteDist> = (0..3)
                .map(|j| {
                    let a = rng.gen_range(0.1..0.9);
                    let mut probs = vec![0.0; n];
                    probs[2 * j] = a;
                    probs[2 * j + 1] = 1.0 - a;
                    DiscreteDist::new(Arc::clone(&support), probs).unwrap()
                })
                .collect();
            (basis, rand_dist(&mut rng), rand_dist(&mut rng))
        } else {
            let basis: Vec<DiscreteDist> = (0..3).map(|_| rand_dist(&mut rng)).collect();
            let wt = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                MixtureWeights::new(raw.into_iter().map(|x| x / s).collect()).unwrap()
            };
            let t1 = mixture(&basis, &wt(&mut rng)).unwrap();
            let t2 = mixture(&basis, &wt(&mut rng)).unwrap();
            (basis, t1, t2)
        };
        let a: f64 = rng.gen_range(0.2..0.8);
        let lam = MixtureWeights::new(vec![a, 1.0 - a]).unwrap();
        let blended = mixture(&[t1.clone(), t2.clone()], &lam).unwrap();

        let project = |target: &DiscreteDist| -> DiscreteDist {
            let w =
                modgate::analysis::project_onto_mixture_family(target, &basis, 500_000).unwrap();
            modgate::analysis::mixture_family_dist(&w, &basis, target).unwrap()
        };
        let p_blend = project(&blended);
        let p_mix = mixture(&[project(&t1), project(&t2)], &lam).unwrap();
        for i in 0..n {
            worst = worst.max((p_blend.prob(i) - p_mix.prob(i)).abs());
        }
    }
    let ok = worst <= 1e-5;
    let within_time = started.elapsed().as_secs() < 30;
    report(
        "criterion 11",
        ok && within_time,
        &format!("worst ℓ∞ discrepancy {worst:.2e} over 20 instances"),
        started,
    );
    assert!(ok && within_time);
}
