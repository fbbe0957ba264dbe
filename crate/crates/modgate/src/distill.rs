//! Distillation of the non-causal gated model into causal students.
//!
//! Two students are supported. The monolithic student refits a plain Markov
//! model on a corpus sampled from the teacher and discards the experts. The
//! structural student keeps the frozen experts and learns only a per-step
//! router `γ(x_{<t}, ·)` over them, trained on cached expert conditionals.
//!
//! The exact posterior-mean router — the expert posterior given the prefix
//! under the teacher — is computed by enumeration and serves as the oracle:
//! when the teacher's step conditionals are themselves expert-mixture
//! realizable (constant gates, or deterministic experts under the symmetric
//! robust gate), routing by the posterior reproduces the teacher with zero
//! divergence. The chain-rule decomposition splits the total divergence into
//! exact per-step terms for any router whatsoever.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{lse, MixtureWeights, Seq, Token};
use crate::experts::{MarkovExpert, SequenceModel};
use crate::gates::{softmax, TabularGate};
use crate::sampler::rejection_sample;
use crate::textio::{expect_header, fmt_f64, parse_f64, parse_usize};
use crate::{Error, Result};

/// Per-step expert-weighting policy: a simplex row for every prefix.
pub trait Router {
    fn num_experts(&self) -> usize;
    fn route(&self, prefix: &[Token]) -> Vec<f64>;
}

// ---------------------------------------------------------------------------
// Parametric causal router
// ---------------------------------------------------------------------------

/// Prefix features: last-token one-hot (`V`), last-step offset one-hot
/// (`V`, zero when fewer than two tokens are visible), position fraction,
/// and a bias. Dimension `2V + 2`.
pub fn prefix_features(prefix: &[Token], vocab_size: usize, seq_len: usize) -> Vec<f64> {
    let v = vocab_size;
    let mut f = vec![0.0; 2 * v + 2];
    if let Some(&last) = prefix.last() {
        f[last as usize] = 1.0;
    }
    if prefix.len() >= 2 {
        let a = prefix[prefix.len() - 2] as usize;
        let b = prefix[prefix.len() - 1] as usize;
        f[v + (b + v - a) % v] = 1.0;
    }
    f[2 * v] = prefix.len() as f64 / seq_len as f64;
    f[2 * v + 1] = 1.0;
    f
}

/// Softmax-linear router over [`prefix_features`].
#[derive(Debug, Clone)]
pub struct CausalRouter {
    vocab_size: usize,
    seq_len: usize,
    num_experts: usize,
    /// Row-major `d' × p` with `d' = 2V + 2`.
    phi: Vec<f64>,
}

impl CausalRouter {
    pub fn zeros(vocab_size: usize, seq_len: usize, num_experts: usize) -> Self {
        CausalRouter {
            vocab_size,
            seq_len,
            num_experts,
            phi: vec![0.0; (2 * vocab_size + 2) * num_experts],
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.vocab_size + 2
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    fn logits(&self, features: &[f64]) -> Vec<f64> {
        let p = self.num_experts;
        let mut u = vec![0.0; p];
        for (d, &fd) in features.iter().enumerate() {
            if fd != 0.0 {
                for k in 0..p {
                    u[k] += fd * self.phi[d * p + k];
                }
            }
        }
        u
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "modgate-router v1 {} {} {} {}\n",
            self.vocab_size,
            self.seq_len,
            self.feature_dim(),
            self.num_experts
        ));
        for row in self.phi.chunks(self.num_experts) {
            let line: Vec<String> = row.iter().map(|x| fmt_f64(*x)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyInput)?;
        let fields = expect_header(header, "modgate-router")?;
        if fields.len() != 4 {
            return Err(Error::Parse("router header needs V T d p".into()));
        }
        let v = parse_usize(fields[0])?;
        let t = parse_usize(fields[1])?;
        let d = parse_usize(fields[2])?;
        let p = parse_usize(fields[3])?;
        if d != 2 * v + 2 {
            return Err(Error::Parse(format!("router feature dim {d} != 2V+2")));
        }
        let mut phi = Vec::with_capacity(d * p);
        for line in lines {
            for s in line.split_whitespace() {
                phi.push(parse_f64(s)?);
            }
        }
        if phi.len() != d * p {
            return Err(Error::Parse("router weight count mismatch".into()));
        }
        Ok(CausalRouter {
            vocab_size: v,
            seq_len: t,
            num_experts: p,
            phi,
        })
    }
}

impl Router for CausalRouter {
    fn num_experts(&self) -> usize {
        self.num_experts
    }

    fn route(&self, prefix: &[Token]) -> Vec<f64> {
        let f = prefix_features(prefix, self.vocab_size, self.seq_len);
        softmax(&self.logits(&f))
    }
}

// ---------------------------------------------------------------------------
// Exact posterior-mean router
// ---------------------------------------------------------------------------

/// Expert posterior given a prefix, under the teacher:
/// `γ*_k(h) ∝ Σ_{x ∈ support, x ⊇ h} g(x,k) π̂_k(x)`.
pub fn posterior_weights<E: SequenceModel>(
    gate: &TabularGate,
    experts: &[E],
    prefix: &[Token],
) -> Result<MixtureWeights> {
    let p = experts.len();
    let mut masses = vec![0.0; p];
    for (i, s) in gate.support().seqs().iter().enumerate() {
        if s.tokens().starts_with(prefix) {
            let row = gate.row(i);
            for (k, e) in experts.iter().enumerate() {
                masses[k] += row[k] * e.log_prob(s).exp();
            }
        }
    }
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMassPrefix);
    }
    MixtureWeights::new(masses.into_iter().map(|m| m / total).collect())
}

/// The posterior-mean router as a [`Router`]; zero-mass prefixes fall back to
/// uniform weights (they are never reached by teacher-driven evaluation).
pub struct PosteriorRouter<'a, E: SequenceModel> {
    pub gate: &'a TabularGate,
    pub experts: &'a [E],
}

impl<E: SequenceModel> Router for PosteriorRouter<'_, E> {
    fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn route(&self, prefix: &[Token]) -> Vec<f64> {
        match posterior_weights(self.gate, self.experts, prefix) {
            Ok(w) => w.weights().to_vec(),
            Err(_) => vec![1.0 / self.experts.len() as f64; self.experts.len()],
        }
    }
}

// ---------------------------------------------------------------------------
// Student likelihood and the chain-rule decomposition
// ---------------------------------------------------------------------------

/// Sequence log-probability of the structural student:
/// `Σ_t ln Σ_k γ_k(x_{<t}) π̂_k(x_t | x_{<t})`.
pub fn student_seq_logprob<R: Router + ?Sized, E: SequenceModel>(
    router: &R,
    experts: &[E],
    x: &Seq,
) -> f64 {
    let toks = x.tokens();
    let mut acc = 0.0;
    for t in 0..toks.len() {
        let gamma = router.route(&toks[..t]);
        let terms: Vec<f64> = experts
            .iter()
            .zip(&gamma)
            .map(|(e, &g)| {
                if g > 0.0 {
                    g.ln() + ln_or_neg_inf(e.next_conditional(&toks[..t])[toks[t] as usize])
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        acc += lse(&terms);
    }
    acc
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Exact divergence accounting between teacher and structural student.
#[derive(Debug, Clone)]
pub struct ChainRuleReport {
    /// `KL(teacher ‖ student)` by direct enumeration of the support.
    pub total_kl: f64,
    /// Sum over steps of prefix-weighted conditional divergences; equals
    /// `total_kl` to float precision for any router.
    pub stepwise_sum: f64,
    /// Sum over steps of prefix-weighted `KL(γ* ‖ γ)`; an upper bound on the
    /// total whenever the teacher's conditionals are expert-mixture
    /// realizable.
    pub router_bound: f64,
}

/// Chain-rule decomposition of `KL(teacher ‖ student)` over the teacher's
/// enumerated support. Zero-mass prefixes carry zero weight and are skipped.
pub fn chain_rule_decomposition<R: Router + ?Sized, E: SequenceModel>(
    gate: &TabularGate,
    experts: &[E],
    router: &R,
) -> Result<ChainRuleReport> {
    let p = experts.len();
    let support = gate.support();
    let seq_len = support.seq_len();
    let n = support.len();
    // Unnormalized teacher mass per support point and its total.
    let mut point_mass = vec![0.0; n];
    let mut expert_mass = vec![0.0; n * p];
    for (i, s) in support.seqs().iter().enumerate() {
        let row = gate.row(i);
        for (k, e) in experts.iter().enumerate() {
            let m = row[k] * e.log_prob(s).exp();
            expert_mass[i * p + k] = m;
            point_mass[i] += m;
        }
    }
    let z: f64 = point_mass.iter().sum();
    if z <= 0.0 {
        return Err(Error::ZeroMass);
    }

    // total = Σ_x P*(x) (ln P*(x) − ln π_γ(x))
    let mut total_kl = 0.0;
    for (i, s) in support.seqs().iter().enumerate() {
        let mass = point_mass[i] / z;
        if mass > 0.0 {
            total_kl += mass * (mass.ln() - student_seq_logprob(router, experts, s));
        }
    }

    let mut stepwise_sum = 0.0;
    let mut router_bound = 0.0;
    for t in 0..seq_len {
        // Group support points by their length-t prefix.
        let mut groups: BTreeMap<&[Token], Vec<usize>> = BTreeMap::new();
        for (i, s) in support.seqs().iter().enumerate() {
            groups.entry(&s.tokens()[..t]).or_default().push(i);
        }
        for (prefix, members) in groups {
            let prefix_mass: f64 = members.iter().map(|&i| point_mass[i]).sum();
            if prefix_mass <= 0.0 {
                continue;
            }
            let weight = prefix_mass / z;
            let gamma = router.route(prefix);

            // Teacher next-token conditional restricted to the support tree.
            let mut next_mass: BTreeMap<Token, f64> = BTreeMap::new();
            for &i in &members {
                *next_mass.entry(support.get(i).tokens()[t]).or_insert(0.0) +=
                    point_mass[i];
            }
            let mut step_kl = 0.0;
            for (&tok, &m) in &next_mass {
                let teacher_cond = m / prefix_mass;
                if teacher_cond <= 0.0 {
                    continue;
                }
                let student_cond: f64 = experts
                    .iter()
                    .zip(&gamma)
                    .map(|(e, &g)| g * e.next_conditional(prefix)[tok as usize])
                    .sum();
                if student_cond <= 0.0 {
                    step_kl = f64::INFINITY;
                    break;
                }
                step_kl += teacher_cond * (teacher_cond / student_cond).ln();
            }
            stepwise_sum += weight * step_kl;

            // Posterior weights for the router bound.
            let mut post = vec![0.0; p];
            for &i in &members {
                for k in 0..p {
                    post[k] += expert_mass[i * p + k];
                }
            }
            let post_total: f64 = post.iter().sum();
            let mut gamma_kl = 0.0;
            for k in 0..p {
                let g_star = post[k] / post_total;
                if g_star > 0.0 {
                    if gamma[k] <= 0.0 {
                        gamma_kl = f64::INFINITY;
                        break;
                    }
                    gamma_kl += g_star * (g_star / gamma[k]).ln();
                }
            }
            router_bound += weight * gamma_kl;
        }
    }
    Ok(ChainRuleReport {
        total_kl,
        stepwise_sum,
        router_bound,
    })
}

// ---------------------------------------------------------------------------
// Cached-conditional dataset and router training
// ---------------------------------------------------------------------------

/// One training example: a history, the observed next token, and every
/// expert's probability for that token given the history.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedTuple {
    pub prefix: Vec<Token>,
    pub target: Token,
    pub expert_probs: Vec<f64>,
}

/// Samples `corpus_size` sequences from the teacher by rejection and caches
/// per-step expert conditionals for every time step.
pub fn generate_cached_dataset<E: SequenceModel>(
    gate: &TabularGate,
    experts: &[E],
    corpus_size: usize,
    seed: u64,
) -> Result<(Vec<Seq>, Vec<CachedTuple>)> {
    if corpus_size == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_trials = crate::sampler::default_max_trials(experts.len());
    let mut seqs = Vec::with_capacity(corpus_size);
    let mut tuples = Vec::new();
    for _ in 0..corpus_size {
        let (x, _) = rejection_sample(gate, experts, &mut rng, max_trials)?;
        let toks = x.tokens();
        for t in 0..toks.len() {
            let probs: Vec<f64> = experts
                .iter()
                .map(|e| e.next_conditional(&toks[..t])[toks[t] as usize])
                .collect();
            tuples.push(CachedTuple {
                prefix: toks[..t].to_vec(),
                target: toks[t],
                expert_probs: probs,
            });
        }
        seqs.push(x);
    }
    Ok((seqs, tuples))
}

/// Writes the cached dataset: header `modgate-cache v1 p V T`, then one line
/// per tuple `prefix tokens | target | p probabilities`.
pub fn write_cache(
    path: &Path,
    num_experts: usize,
    vocab_size: usize,
    seq_len: usize,
    tuples: &[CachedTuple],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "modgate-cache v1 {num_experts} {vocab_size} {seq_len}\n"
    ));
    for t in tuples {
        let prefix: Vec<String> = t.prefix.iter().map(|x| x.to_string()).collect();
        let probs: Vec<String> = t.expert_probs.iter().map(|x| fmt_f64(*x)).collect();
        out.push_str(&format!(
            "{} | {} | {}\n",
            prefix.join(" "),
            t.target,
            probs.join(" ")
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<(usize, usize, usize, Vec<CachedTuple>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput)?;
    let fields = expect_header(header, "modgate-cache")?;
    if fields.len() != 3 {
        return Err(Error::Parse("cache header needs p V T".into()));
    }
    let p = parse_usize(fields[0])?;
    let v = parse_usize(fields[1])?;
    let t = parse_usize(fields[2])?;
    let mut tuples = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("bad cache line {line:?}")));
        }
        let prefix: Vec<Token> = parts[0]
            .split_whitespace()
            .map(|s| parse_usize(s).map(|u| u as Token))
            .collect::<Result<_>>()?;
        let target = parse_usize(parts[1].trim())? as Token;
        let expert_probs: Vec<f64> = parts[2]
            .split_whitespace()
            .map(parse_f64)
            .collect::<Result<_>>()?;
        if expert_probs.len() != p {
            return Err(Error::Parse("cache probability count mismatch".into()));
        }
        tuples.push(CachedTuple {
            prefix,
            target,
            expert_probs,
        });
    }
    Ok((p, v, t, tuples))
}

/// Result of router training: the router, the full-dataset loss after every
/// step (index 0 is the pre-training loss), and how many degenerate tuples
/// were skipped.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub router: CausalRouter,
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// Minibatch gradient descent on `−ln(γ(h)·P)` over the cached tuples.
pub fn train_router(
    dataset: &[CachedTuple],
    mut router: CausalRouter,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let p = router.num_experts;
    let mut skipped = 0usize;
    let usable: Vec<&CachedTuple> = dataset
        .iter()
        .filter(|t| {
            let ok = t.expert_probs.iter().any(|&q| q > 0.0);
            if !ok {
                skipped += 1;
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyInput);
    }
    let features: Vec<Vec<f64>> = usable
        .iter()
        .map(|t| prefix_features(&t.prefix, router.vocab_size, router.seq_len))
        .collect();

    let full_loss = |r: &CausalRouter| -> f64 {
        let mut acc = 0.0;
        for (tup, f) in usable.iter().zip(&features) {
            let w = softmax(&r.logits(f));
            let mix: f64 = w
                .iter()
                .zip(&tup.expert_probs)
                .map(|(&a, &b)| a * b)
                .sum();
            acc -= mix.ln();
        }
        acc / usable.len() as f64
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = usable.len().min(128);
    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(full_loss(&router));
    for step in 0..steps {
        // Decaying step size keeps late-stage minibatch noise from lifting
        // the training loss.
        let eta_t = eta / (1.0 + 9.0 * step as f64 / steps.max(1) as f64);
        let mut grad = vec![0.0; router.phi.len()];
        for _ in 0..batch {
            let i = rng.gen_range(0..usable.len());
            let tup = usable[i];
            let f = &features[i];
            let w = softmax(&router.logits(f));
            let mix: f64 = w
                .iter()
                .zip(&tup.expert_probs)
                .map(|(&a, &b)| a * b)
                .sum();
            // ∇_u −ln(w·P) = w − r with r the posterior responsibilities.
            for (dim, &fd) in f.iter().enumerate() {
                if fd == 0.0 {
                    continue;
                }
                for k in 0..p {
                    let r = w[k] * tup.expert_probs[k] / mix;
                    grad[dim * p + k] += fd * (w[k] - r) / batch as f64;
                }
            }
        }
        for (phi, g) in router.phi.iter_mut().zip(&grad) {
            *phi -= eta_t * g;
        }
        losses.push(full_loss(&router));
    }
    Ok(TrainReport {
        router,
        losses,
        skipped,
    })
}

/// Monolithic distillation: fit a fresh Markov model on a teacher-sampled
/// corpus of `corpus_size` sequences.
pub fn monolithic_distill<E: SequenceModel>(
    gate: &TabularGate,
    experts: &[E],
    corpus_size: usize,
    alpha: f64,
    seed: u64,
) -> Result<MarkovExpert> {
    if corpus_size == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_trials = crate::sampler::default_max_trials(experts.len());
    let mut seqs = Vec::with_capacity(corpus_size);
    for _ in 0..corpus_size {
        seqs.push(rejection_sample(gate, experts, &mut rng, max_trials)?.0);
    }
    let support = gate.support();
    MarkovExpert::fit_mle(&seqs, support.vocab_size(), support.seq_len(), alpha)
}
