//! Experiment pipelines behind the CLI: expert fitting, solving, mixture
//! sweeps, sampling, distillation, and bound reports.
//!
//! Every pipeline reads a flat key=value config (unknown keys are errors),
//! takes one seed, writes its artifacts under an output directory, and is
//! bit-reproducible given the same inputs. Sweeps and comparisons use exact
//! population evaluation over enumerated supports, so there is no test-set
//! noise unless resampling is explicitly requested.

pub mod config;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{merge_onto_union, mixture, DiscreteDist, MixtureWeights, Seq};
use crate::distill::{
    generate_cached_dataset, monolithic_distill, student_seq_logprob, train_router, write_cache,
    CausalRouter,
};
use crate::experts::{
    domain_dist, domain_sample, expert_epsilon, DomainRule, DomainSpec, MarkovExpert,
    SequenceModel,
};
use crate::gates::{AnyGate, FeatGate, TabularGate};
use crate::sampler::{rejection_sample, sir_sample, write_corpus};
use crate::solver::{
    solve_exact, solve_primal_dual, solve_quadratic_penalty, worst_case_risk, ExactConfig,
    GameTrace, LambdaSet, PdConfig, SolvedGate,
};
use crate::textio::fmt_f64;
use crate::{Error, Result};
use config::Config;

/// Key reference printed by `--help`; one line per key.
pub const CONFIG_KEY_HELP: &str = "\
Configuration keys (flat key=value lines; # starts a comment; unknown keys are errors):
  instance (all subcommands)
    vocab_size          token alphabet size V (required)
    seq_len             sequence length T (required)
    num_domains         number of source domains p (default 2)
    domain_K            rule for domain K in 1..=p: increment | decrement (required)
    contamination_K     fraction of the opposite rule mixed into domain K (default 0)
    seed                default seed when --seed is not given (default 0)
  fit-experts
    alpha               additive smoothing for the fitted experts (default 0)
    samples_per_domain  0 = exact population fit, else sample count (default 0)
  solve
    experts             comma-separated expert files (required)
    method              exact | primal-dual | quadratic (required)
    iters               solver iterations (default 2000)
    eta_lambda          adversary step size (default: method-specific)
    eta_g               gate step size (default: method-specific)
    eta_mu              dual step size, primal-dual only (default 0.1)
    ema_alpha           EMA factor for the partition estimate (default 0.9)
    batch_size          per-source batch, stochastic methods (default 64)
    warmup              iterations with the dual variable frozen (default 100)
    beta                quadratic penalty weight (default 1000)
    lambda_lower        comma floats: lower bounds of the restricted set
    lambda_upper        comma floats: upper bounds of the restricted set
    checkpoint_every    trace checkpoint stride (default iters/100)
    gate_out            gate file name (default gate.txt)
  sweep
    experts, gate       model files (required)
    lambda_step         grid step over the test mixture weight (default 0.1)
    alpha_small         smoothing of the small fixed-retrained baseline (default 0.1)
    alpha_large         smoothing of the large fixed-retrained baseline (default 0.01)
    alpha_oracle        smoothing of the per-point oracle refit (default 0)
    resample            R > 0 adds mean/std columns over R sampled test sets
    resample_size       test-set size per resample (default 1000)
  sample
    experts, gate       model files (required)
    method              sir | rejection (required)
    n_sequences         corpus size (default 1000)
    sir_candidates      SIR candidate count N (default 64)
    max_trials          rejection budget per sequence (default 100p)
  distill
    experts, gate       model files (required)
    corpus_size         teacher corpus size (default 500)
    steps               router training steps (default 2000)
    eta                 router learning rate (default 0.5)
    alpha_mono          smoothing of the monolithic student (default 0)
    lambda_step         comparison grid step (default 0.1)
  analyze
    experts             expert files (required)
    gate                optional gate file for measured risk
    lambda_star         comma floats, adversarial weighting (default uniform)
    lambda_test         comma floats, test mixture (default uniform)
    lambda_lower/upper  optional restricted-set bounds for the Hausdorff row
";

/// Instance description shared by all pipelines.
pub struct Instance {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub specs: Vec<DomainSpec>,
    pub sources: Vec<DiscreteDist>,
}

impl Instance {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let vocab_size = cfg.usize_req("vocab_size")?;
        let seq_len = cfg.usize_req("seq_len")?;
        let p = cfg.usize_opt("num_domains", 2)?;
        if p == 0 {
            return Err(Error::Config("num_domains must be positive".into()));
        }
        let mut specs = Vec::with_capacity(p);
        for k in 1..=p {
            let rule = DomainRule::parse(&cfg.str_req(&format!("domain_{k}"))?)?;
            let c = cfg.f64_opt(&format!("contamination_{k}"), 0.0)?;
            specs.push(DomainSpec::new(vocab_size, seq_len, rule, c)?);
        }
        let sources = specs.iter().map(domain_dist).collect();
        Ok(Instance {
            vocab_size,
            seq_len,
            specs,
            sources,
        })
    }
}

fn load_experts(paths: &[PathBuf]) -> Result<Vec<MarkovExpert>> {
    paths.iter().map(|p| MarkovExpert::load(p)).collect()
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn lambda_from_list(list: Option<Vec<f64>>, p: usize) -> Result<MixtureWeights> {
    match list {
        None => Ok(MixtureWeights::uniform(p)),
        Some(v) => MixtureWeights::new(v),
    }
}

fn lambda_set_from_config(cfg: &Config, p: usize) -> Result<Option<LambdaSet>> {
    let lower = cfg.f64_list_maybe("lambda_lower")?;
    let upper = cfg.f64_list_maybe("lambda_upper")?;
    match (lower, upper) {
        (None, None) => Ok(None),
        (lo, hi) => {
            let lower = lo.unwrap_or_else(|| vec![0.0; p]);
            let upper = hi.unwrap_or_else(|| vec![1.0; p]);
            Ok(Some(LambdaSet::new(lower, upper)?))
        }
    }
}

/// Exact per-sequence negative log-likelihood of a model under a population
/// distribution: `E_{x~d}[-ln model(x)]`.
fn population_nll(d: &DiscreteDist, mut log_prob: impl FnMut(&Seq) -> f64) -> f64 {
    d.support()
        .seqs()
        .iter()
        .zip(d.probs())
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| -p * log_prob(s))
        .sum()
}

// ---------------------------------------------------------------------------
// fit-experts
// ---------------------------------------------------------------------------

pub fn run_fit_experts(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let inst = Instance::from_config(cfg)?;
    let alpha = cfg.f64_opt("alpha", 0.0)?;
    let samples = cfg.usize_opt("samples_per_domain", 0)?;
    cfg.reject_unknown()?;
    ensure_out(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    manifest.push_str(&format!(
        "# provenance modgate fit-experts seed={seed} alpha={} samples={samples}\n",
        fmt_f64(alpha)
    ));
    manifest.push_str("expert,path,epsilon\n");
    for (k, (spec, source)) in inst.specs.iter().zip(&inst.sources).enumerate() {
        let expert = if samples == 0 {
            MarkovExpert::fit_weighted(
                source.support().seqs(),
                source.probs(),
                inst.vocab_size,
                inst.seq_len,
                alpha,
            )?
        } else {
            let draws: Vec<Seq> = (0..samples).map(|_| domain_sample(spec, &mut rng)).collect();
            MarkovExpert::fit_mle(&draws, inst.vocab_size, inst.seq_len, alpha)?
        };
        let name = format!("expert_{}.txt", k + 1);
        expert.save(&out.join(&name))?;
        let eps = expert_epsilon(source, &expert);
        manifest.push_str(&format!("{},{},{}\n", k + 1, name, fmt_f64(eps)));
    }
    std::fs::write(out.join("manifest.csv"), manifest)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

pub fn run_solve(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let inst = Instance::from_config(cfg)?;
    let experts = load_experts(&cfg.path_list_req("experts")?)?;
    let p = experts.len();
    if p != inst.sources.len() {
        return Err(Error::Config(format!(
            "{} experts for {} domains",
            p,
            inst.sources.len()
        )));
    }
    let method = cfg.str_req("method")?;
    let iters = cfg.usize_opt("iters", 2000)?;
    let checkpoint_every = cfg.usize_opt("checkpoint_every", (iters / 100).max(1))?;
    let eta_lambda = cfg.f64_maybe("eta_lambda")?;
    let eta_g = cfg.f64_maybe("eta_g")?;
    let eta_mu = cfg.f64_opt("eta_mu", 0.1)?;
    let ema_alpha = cfg.f64_opt("ema_alpha", 0.9)?;
    let batch = cfg.usize_opt("batch_size", 64)?;
    let warmup = cfg.usize_opt("warmup", 100)?;
    let beta = cfg.f64_opt("beta", 1000.0)?;
    let set = lambda_set_from_config(cfg, p)?;
    let gate_out = cfg.str_opt("gate_out").unwrap_or_else(|| "gate.txt".into());
    cfg.reject_unknown()?;
    ensure_out(out)?;

    let trace: GameTrace = match method.as_str() {
        "exact" => {
            let set = set.unwrap_or_else(|| LambdaSet::full_simplex(p));
            let mut scfg = ExactConfig::new(iters);
            scfg.eta_lambda = eta_lambda;
            scfg.eta_g = eta_g;
            scfg.checkpoint_every = checkpoint_every;
            solve_exact(&inst.sources, &experts, &set, &scfg)?
        }
        "primal-dual" | "quadratic" => {
            let mut scfg = PdConfig::new(iters, seed);
            scfg.batch_per_source = batch;
            scfg.eta_g = eta_g.unwrap_or(0.1);
            scfg.eta_lambda = eta_lambda.unwrap_or(0.05);
            scfg.eta_mu = eta_mu;
            scfg.ema_alpha = ema_alpha;
            scfg.warmup = warmup;
            scfg.checkpoint_every = checkpoint_every;
            if method == "primal-dual" {
                solve_primal_dual(&inst.sources, &experts, FeatGate::zeros(inst.vocab_size, inst.seq_len, p), &scfg)?
            } else {
                solve_quadratic_penalty(
                    &inst.sources,
                    &experts,
                    FeatGate::zeros(inst.vocab_size, inst.seq_len, p),
                    beta,
                    &scfg,
                )?
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown solve method {other:?} (expected exact, primal-dual, or quadratic)"
            )))
        }
    };

    trace.write_csv(&out.join("trace.csv"))?;
    match &trace.gate {
        SolvedGate::Tabular(g) => g.save(&out.join(&gate_out))?,
        SolvedGate::Feat(g) => g.save(&out.join(&gate_out))?,
    }

    // Bound report at the solver's least-favorable mixture, with the
    // measured worst-case risk of the solved gate over the adversary's set.
    let lambda_star = trace.least_favorable_mixture();
    let report_set = lambda_set_from_config_unchecked(&set_bounds(&trace), p);
    let mut report = crate::analysis::robust_bound_report(
        &inst.sources,
        &experts,
        &lambda_star,
        &MixtureWeights::uniform(p),
    )?;
    let (support, _) = merge_onto_union(&inst.sources)?;
    let tabular = match &trace.gate {
        SolvedGate::Tabular(g) => g.clone(),
        SolvedGate::Feat(g) => g.tabularize(&support),
    };
    report.measured_risk = Some(worst_case_risk(
        &tabular,
        &inst.sources,
        &experts,
        &report_set,
    )?);
    report.write_csv(
        &out.join("bound_report.csv"),
        &format!("modgate solve method={method} seed={seed}"),
    )?;
    Ok(())
}

// The solve trace does not retain its restricted set; reports use the full
// simplex unless the caller restricted the run.
fn set_bounds(_trace: &GameTrace) -> Option<LambdaSet> {
    None
}

fn lambda_set_from_config_unchecked(set: &Option<LambdaSet>, p: usize) -> LambdaSet {
    set.clone().unwrap_or_else(|| LambdaSet::full_simplex(p))
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn run_sweep(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let inst = Instance::from_config(cfg)?;
    if inst.sources.len() != 2 {
        return Err(Error::Config("sweep needs exactly two domains".into()));
    }
    let experts = load_experts(&cfg.path_list_req("experts")?)?;
    let gate = AnyGate::load(&cfg.path_list_req("gate")?[0])?;
    let step = cfg.f64_opt("lambda_step", 0.1)?;
    let alpha_small = cfg.f64_opt("alpha_small", 0.1)?;
    let alpha_large = cfg.f64_opt("alpha_large", 0.01)?;
    let alpha_oracle = cfg.f64_opt("alpha_oracle", 0.0)?;
    let resample = cfg.usize_opt("resample", 0)?;
    let resample_size = cfg.usize_opt("resample_size", 1000)?;
    cfg.reject_unknown()?;
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config("lambda_step must lie in (0, 1]".into()));
    }
    ensure_out(out)?;

    let (support, merged) = merge_onto_union(&inst.sources)?;
    let gate_tab = gate.tabularize(&support)?;

    // Fixed-retrained baselines on the balanced aggregate.
    let balanced = mixture(&merged, &MixtureWeights::uniform(2))?;
    let fixed_small = MarkovExpert::fit_weighted(
        support.seqs(),
        balanced.probs(),
        inst.vocab_size,
        inst.seq_len,
        alpha_small,
    )?;
    let fixed_large = MarkovExpert::fit_weighted(
        support.seqs(),
        balanced.probs(),
        inst.vocab_size,
        inst.seq_len,
        alpha_large,
    )?;

    let grid: Vec<f64> = {
        let mut g = Vec::new();
        let mut lam = 0.0;
        let n_steps = (1.0 / step).round() as usize;
        for i in 0..=n_steps {
            lam = (i as f64 * step).min(1.0);
            g.push(lam);
        }
        let _ = lam;
        g
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &lam in &grid {
        // λ weights domain 1 (domain A); λ = 0 is pure domain 2.
        let w = MixtureWeights::new(vec![lam, 1.0 - lam])?;
        let test = mixture(&merged, &w)?;
        let oracle = MarkovExpert::fit_weighted(
            support.seqs(),
            test.probs(),
            inst.vocab_size,
            inst.seq_len,
            alpha_oracle,
        )?;
        let models: Vec<(&str, Box<dyn Fn(&Seq) -> f64>)> = vec![
            ("gate", {
                let g = &gate_tab;
                let e = &experts;
                Box::new(move |s: &Seq| crate::gates::gate_log_pi_or_neg_inf(g, e, s))
            }),
            ("fixed_small", Box::new(|s: &Seq| fixed_small.log_prob(s))),
            ("fixed_large", Box::new(|s: &Seq| fixed_large.log_prob(s))),
            ("oracle", Box::new(|s: &Seq| oracle.log_prob(s))),
            ("expert_a", Box::new(|s: &Seq| experts[0].log_prob(s))),
            ("expert_b", Box::new(|s: &Seq| experts[1].log_prob(s))),
        ];
        let mut fields = vec![fmt_f64(lam)];
        for (_, lp) in &models {
            fields.push(fmt_f64(population_nll(&test, |s| lp(s))));
        }
        if resample > 0 {
            // Mean/std of empirical NLL over resampled test sets.
            for (_, lp) in &models {
                let mut vals = Vec::with_capacity(resample);
                for _ in 0..resample {
                    let mut acc = 0.0;
                    for _ in 0..resample_size {
                        let idx =
                            crate::experts::sample_categorical(test.probs(), &mut rng);
                        acc -= lp(support.get(idx));
                    }
                    vals.push(acc / resample_size as f64);
                }
                let mean: f64 = vals.iter().sum::<f64>() / resample as f64;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / resample as f64;
                fields.push(fmt_f64(mean));
                fields.push(fmt_f64(var.sqrt()));
            }
        }
        rows.push(fields.join(","));
    }

    let mut header =
        "lambda,gate_nll,fixed_small_nll,fixed_large_nll,oracle_nll,expert_a_nll,expert_b_nll"
            .to_string();
    if resample > 0 {
        for m in ["gate", "fixed_small", "fixed_large", "oracle", "expert_a", "expert_b"] {
            header.push_str(&format!(",{m}_nll_mean,{m}_nll_std"));
        }
    }
    let mut text = header;
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(out.join("sweep.csv"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

pub fn run_sample(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let inst = Instance::from_config(cfg)?;
    let experts = load_experts(&cfg.path_list_req("experts")?)?;
    let gate = AnyGate::load(&cfg.path_list_req("gate")?[0])?;
    let method = cfg.str_req("method")?;
    let n = cfg.usize_opt("n_sequences", 1000)?;
    let candidates = cfg.usize_opt("sir_candidates", 64)?;
    let max_trials = cfg.usize_opt(
        "max_trials",
        crate::sampler::default_max_trials(experts.len()),
    )?;
    cfg.reject_unknown()?;
    ensure_out(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(n);
    match method.as_str() {
        "rejection" => {
            let mut trials_total = 0usize;
            for _ in 0..n {
                let (x, trials) = rejection_sample(&gate, &experts, &mut rng, max_trials)?;
                trials_total += trials;
                seqs.push(x);
            }
            println!(
                "rejection: {} sequences, acceptance rate {:.4} ({} proposals)",
                n,
                n as f64 / trials_total as f64,
                trials_total
            );
        }
        "sir" => {
            let mut fallbacks = 0usize;
            for _ in 0..n {
                let draw = sir_sample(&gate, &experts, candidates, &mut rng)?;
                if draw.fallback {
                    fallbacks += 1;
                }
                seqs.push(draw.seq);
            }
            println!("sir: {n} sequences with N={candidates}, {fallbacks} fallback draws");
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown sample method {other:?} (expected sir or rejection)"
            )))
        }
    }
    write_corpus(&out.join("corpus.txt"), inst.vocab_size, inst.seq_len, &seqs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

pub fn run_distill(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let inst = Instance::from_config(cfg)?;
    let experts = load_experts(&cfg.path_list_req("experts")?)?;
    let gate = AnyGate::load(&cfg.path_list_req("gate")?[0])?;
    let corpus_size = cfg.usize_opt("corpus_size", 500)?;
    let steps = cfg.usize_opt("steps", 2000)?;
    let eta = cfg.f64_opt("eta", 0.5)?;
    let alpha_mono = cfg.f64_opt("alpha_mono", 0.0)?;
    let step = cfg.f64_opt("lambda_step", 0.1)?;
    cfg.reject_unknown()?;
    if corpus_size == 0 {
        return Err(Error::Config("corpus_size must be positive".into()));
    }
    if inst.sources.len() != 2 {
        return Err(Error::Config("distill comparison needs two domains".into()));
    }
    ensure_out(out)?;

    let (support, merged) = merge_onto_union(&inst.sources)?;
    let gate_tab = gate.tabularize(&support)?;
    let p = experts.len();

    let (_, tuples) = generate_cached_dataset(&gate_tab, &experts, corpus_size, seed)?;
    write_cache(
        &out.join("cache.txt"),
        p,
        inst.vocab_size,
        inst.seq_len,
        &tuples,
    )?;
    let report = train_router(
        &tuples,
        CausalRouter::zeros(inst.vocab_size, inst.seq_len, p),
        steps,
        eta,
        seed ^ 0x5eed,
    )?;
    report.router.save(&out.join("router.txt"))?;
    let monolithic =
        monolithic_distill(&gate_tab, &experts, corpus_size, alpha_mono, seed ^ 0xd157)?;

    // Per-λ comparison, population-exact.
    let n_steps = (1.0 / step).round() as usize;
    let mut text = String::from("lambda,teacher_nll,causal_router_nll,monolithic_nll\n");
    for i in 0..=n_steps {
        let lam = (i as f64 * step).min(1.0);
        let w = MixtureWeights::new(vec![lam, 1.0 - lam])?;
        let test = mixture(&merged, &w)?;
        let teacher = population_nll(&test, |s| {
            crate::gates::gate_log_pi_or_neg_inf(&gate_tab, &experts, s)
        });
        let causal = population_nll(&test, |s| {
            student_seq_logprob(&report.router, &experts, s)
        });
        let mono = population_nll(&test, |s| monolithic.log_prob(s));
        text.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(lam),
            fmt_f64(teacher),
            fmt_f64(causal),
            fmt_f64(mono)
        ));
    }
    std::fs::write(out.join("distill_compare.csv"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

pub fn run_analyze(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    let inst = Instance::from_config(cfg)?;
    let experts = load_experts(&cfg.path_list_req("experts")?)?;
    let p = experts.len();
    let lambda_star = lambda_from_list(cfg.f64_list_maybe("lambda_star")?, p)?;
    let lambda_test = lambda_from_list(cfg.f64_list_maybe("lambda_test")?, p)?;
    let set = lambda_set_from_config(cfg, p)?;
    let gate = match cfg.str_opt("gate") {
        Some(_) => Some(AnyGate::load(&cfg.path_list_req("gate")?[0])?),
        None => None,
    };
    cfg.reject_unknown()?;
    ensure_out(out)?;

    let mut report = crate::analysis::robust_bound_report(
        &inst.sources,
        &experts,
        &lambda_star,
        &lambda_test,
    )?;
    let (support, _) = merge_onto_union(&inst.sources)?;
    let risk_set = set.clone().unwrap_or_else(|| LambdaSet::full_simplex(p));
    if let Some(g) = &gate {
        let tab = g.tabularize(&support)?;
        report.measured_risk = Some(worst_case_risk(&tab, &inst.sources, &experts, &risk_set)?);
    }

    let jsd_gap =
        crate::analysis::jsd_gap_bound(&inst.sources, &report.epsilons, &lambda_test)?;
    let coincidence = crate::analysis::coincidence_norm(&experts, &support);
    let witnesses = crate::analysis::standard_witness_gates(&inst.sources, &experts)?;
    let lipschitz = crate::analysis::lipschitz_estimate(&inst.sources, &experts, &witnesses)?;
    let hausdorff = crate::analysis::hausdorff_l1(&risk_set);

    let path = out.join("analysis.csv");
    report.write_csv(&path, &format!("modgate analyze seed={seed}"))?;
    let mut text = std::fs::read_to_string(&path)?;
    text.push_str(&format!("jsd_gap_bound,{}\n", fmt_f64(jsd_gap)));
    text.push_str(&format!("coincidence_norm,{}\n", fmt_f64(coincidence)));
    // Witness-set estimate only: a lower estimate of the supremum over the
    // whole normalized gate space.
    text.push_str(&format!("lipschitz_estimate,{}\n", fmt_f64(lipschitz)));
    text.push_str(&format!("hausdorff_l1,{}\n", fmt_f64(hausdorff)));
    std::fs::write(&path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared helpers for building robust gates in tests and acceptance suites
// ---------------------------------------------------------------------------

/// Convenience: exact-solver robust gate on an instance with exact experts.
pub fn robust_tabular_gate(
    sources: &[DiscreteDist],
    experts: &[MarkovExpert],
    iters: usize,
) -> Result<(TabularGate, GameTrace)> {
    let set = LambdaSet::full_simplex(experts.len());
    let trace = solve_exact(sources, experts, &set, &ExactConfig::new(iters))?;
    let gate = match &trace.gate {
        SolvedGate::Tabular(g) => g.clone(),
        SolvedGate::Feat(g) => {
            let (support, _) = merge_onto_union(sources)?;
            g.tabularize(&support)
        }
    };
    Ok((gate, trace))
}
