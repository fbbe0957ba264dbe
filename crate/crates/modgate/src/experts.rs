//! Expert sequence models with exact log-likelihoods.
//!
//! Experts are order-1 Markov models over a fixed vocabulary and sequence
//! length: a start distribution plus a row-stochastic transition matrix, with
//! optional additive smoothing. The synthetic domains (deterministic
//! increment/decrement rules with optional contamination) are exactly order-1,
//! so both perfect and controllably imperfect experts are constructible with
//! exact per-source errors.

use std::path::Path;
use std::sync::Arc;

use rand::RngCore;

use crate::dist::{DiscreteDist, Seq, SupportSet, Token};
use crate::textio::{expect_header, fmt_f64, parse_f64, parse_usize};
use crate::{Error, Result};

/// Abstract expert interface: exact sequence log-probability, per-step
/// conditionals, and ancestral sampling. Implementations are immutable after
/// construction and safe to share across threads.
pub trait SequenceModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;

    /// Exact `ln π(x)`, computed in log-space; `-inf` if any step has zero
    /// probability.
    fn log_prob(&self, x: &Seq) -> f64;

    /// Next-token distribution given a (possibly empty) prefix; length `V`.
    fn next_conditional(&self, prefix: &[Token]) -> Vec<f64>;

    /// Ancestral sample of a full sequence, deterministic given the generator.
    fn sample(&self, rng: &mut dyn RngCore) -> Seq;
}

/// Order-1 Markov expert: start distribution + transition matrix.
#[derive(Debug, Clone)]
pub struct MarkovExpert {
    vocab_size: usize,
    seq_len: usize,
    start: Vec<f64>,
    /// Row-major `V×V`; row `a` is the distribution of the token after `a`.
    trans: Vec<f64>,
    alpha: f64,
}

impl MarkovExpert {
    pub fn new(
        vocab_size: usize,
        seq_len: usize,
        start: Vec<f64>,
        trans: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        if start.len() != vocab_size || trans.len() != vocab_size * vocab_size {
            return Err(Error::LengthMismatch {
                expected: vocab_size,
                got: start.len(),
            });
        }
        check_simplex(&start)?;
        for row in trans.chunks(vocab_size) {
            check_simplex(row)?;
        }
        Ok(MarkovExpert {
            vocab_size,
            seq_len,
            start,
            trans,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn trans_row(&self, a: usize) -> &[f64] {
        &self.trans[a * self.vocab_size..(a + 1) * self.vocab_size]
    }

    /// Maximum-likelihood fit with additive smoothing `alpha`.
    ///
    /// Start probabilities are smoothed first-token frequencies; each
    /// transition row is the smoothed bigram frequency out of that token.
    /// Rows never observed as a context get a uniform row when `alpha == 0`
    /// so the matrix stays row-stochastic.
    pub fn fit_mle(samples: &[Seq], vocab_size: usize, seq_len: usize, alpha: f64) -> Result<Self> {
        let weights = vec![1.0; samples.len()];
        Self::fit_weighted(samples, &weights, vocab_size, seq_len, alpha)
    }

    /// Weighted MLE; used for population fits where each distinct sequence
    /// carries its exact probability mass.
    pub fn fit_weighted(
        samples: &[Seq],
        weights: &[f64],
        vocab_size: usize,
        seq_len: usize,
        alpha: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if samples.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: samples.len(),
                got: weights.len(),
            });
        }
        let v = vocab_size;
        let mut start_counts = vec![0.0; v];
        let mut bigram = vec![0.0; v * v];
        for (x, &w) in samples.iter().zip(weights) {
            if x.len() != seq_len {
                return Err(Error::BadSeqLen {
                    expected: seq_len,
                    got: x.len(),
                });
            }
            let toks = x.tokens();
            for &t in toks {
                if (t as usize) >= v {
                    return Err(Error::TokenOutOfRange {
                        token: t as usize,
                        vocab: v,
                    });
                }
            }
            start_counts[toks[0] as usize] += w;
            for pair in toks.windows(2) {
                bigram[pair[0] as usize * v + pair[1] as usize] += w;
            }
        }
        let start = normalize_counts(&start_counts, alpha);
        let mut trans = Vec::with_capacity(v * v);
        for a in 0..v {
            let row = &bigram[a * v..(a + 1) * v];
            let total: f64 = row.iter().sum();
            if total <= 0.0 && alpha <= 0.0 {
                trans.extend(std::iter::repeat(1.0 / v as f64).take(v));
            } else {
                trans.extend(normalize_counts(row, alpha));
            }
        }
        MarkovExpert::new(v, seq_len, start, trans, alpha)
    }

    /// Writes the versioned text format; round trips are value-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "modgate-expert v1 {} {} {}\n",
            self.vocab_size,
            self.seq_len,
            fmt_f64(self.alpha)
        ));
        for s in &self.start {
            out.push_str(&fmt_f64(*s));
            out.push('\n');
        }
        for row in self.trans.chunks(self.vocab_size) {
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
        let fields = expect_header(header, "modgate-expert")?;
        if fields.len() != 3 {
            return Err(Error::Parse("expert header needs V T alpha".into()));
        }
        let v = parse_usize(fields[0])?;
        let t = parse_usize(fields[1])?;
        let alpha = parse_f64(fields[2])?;
        let rest: Vec<&str> = lines.flat_map(|l| l.split_whitespace()).collect();
        if rest.len() != v + v * v {
            return Err(Error::Parse(format!(
                "expected {} values, got {}",
                v + v * v,
                rest.len()
            )));
        }
        let mut vals = Vec::with_capacity(rest.len());
        for s in rest {
            vals.push(parse_f64(s)?);
        }
        let start = vals[..v].to_vec();
        let trans = vals[v..].to_vec();
        MarkovExpert::new(v, t, start, trans, alpha)
    }
}

impl SequenceModel for MarkovExpert {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn log_prob(&self, x: &Seq) -> f64 {
        assert_eq!(x.len(), self.seq_len, "sequence length mismatch");
        let toks = x.tokens();
        let mut acc = ln_or_neg_inf(self.start[toks[0] as usize]);
        for pair in toks.windows(2) {
            acc += ln_or_neg_inf(self.trans[pair[0] as usize * self.vocab_size + pair[1] as usize]);
        }
        acc
    }

    fn next_conditional(&self, prefix: &[Token]) -> Vec<f64> {
        match prefix.last() {
            None => self.start.clone(),
            Some(&a) => self.trans_row(a as usize).to_vec(),
        }
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Seq {
        let mut toks = Vec::with_capacity(self.seq_len);
        let mut cur = sample_categorical(&self.start, rng);
        toks.push(cur as Token);
        for _ in 1..self.seq_len {
            cur = sample_categorical(self.trans_row(cur), rng);
            toks.push(cur as Token);
        }
        Seq::new(toks)
    }
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }
}

fn check_simplex(v: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &x in v {
        if x < 0.0 {
            return Err(Error::NegativeProbability(x));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(sum));
    }
    Ok(())
}

fn normalize_counts(counts: &[f64], alpha: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + alpha * counts.len() as f64;
    counts.iter().map(|&c| (c + alpha) / total).collect()
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    use rand::Rng;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// Synthetic domains
// ---------------------------------------------------------------------------

/// Deterministic next-token rule for a synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainRule {
    /// `x_{t+1} = (x_t + 1) mod V`
    Increment,
    /// `x_{t+1} = (x_t - 1) mod V`
    Decrement,
}

impl DomainRule {
    pub fn opposite(self) -> Self {
        match self {
            DomainRule::Increment => DomainRule::Decrement,
            DomainRule::Decrement => DomainRule::Increment,
        }
    }

    fn step(self, x: usize, v: usize) -> usize {
        match self {
            DomainRule::Increment => (x + 1) % v,
            DomainRule::Decrement => (x + v - 1) % v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainRule::Increment => "increment",
            DomainRule::Decrement => "decrement",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "increment" => Ok(DomainRule::Increment),
            "decrement" => Ok(DomainRule::Decrement),
            _ => Err(Error::Config(format!("unknown domain rule {s:?}"))),
        }
    }
}

/// A synthetic source: one deterministic rule, uniformly random first token,
/// and a contamination fraction `c` mixing in the opposite rule.
#[derive(Debug, Clone, Copy)]
pub struct DomainSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub rule: DomainRule,
    pub contamination: f64,
}

impl DomainSpec {
    pub fn new(vocab_size: usize, seq_len: usize, rule: DomainRule, contamination: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&contamination) {
            return Err(Error::Config(format!(
                "contamination {contamination} outside [0,1]"
            )));
        }
        if vocab_size < 2 || seq_len < 1 {
            return Err(Error::Config("need V >= 2 and T >= 1".into()));
        }
        Ok(DomainSpec {
            vocab_size,
            seq_len,
            rule,
            contamination,
        })
    }

    fn trajectory(&self, rule: DomainRule, first: usize) -> Seq {
        let mut toks = Vec::with_capacity(self.seq_len);
        let mut cur = first;
        toks.push(cur as Token);
        for _ in 1..self.seq_len {
            cur = rule.step(cur, self.vocab_size);
            toks.push(cur as Token);
        }
        Seq::new(toks)
    }
}

/// Exact population distribution of a synthetic domain.
///
/// Uniform over the `V` trajectories of the rule, mixed `(1-c, c)` with the
/// opposite rule's trajectories. Coinciding trajectories (e.g. `T = 1`)
/// accumulate their mass on a single support element.
pub fn domain_dist(spec: &DomainSpec) -> DiscreteDist {
    let v = spec.vocab_size;
    let c = spec.contamination;
    let mut seqs: Vec<Seq> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    let push = |s: Seq, mass: f64, seqs: &mut Vec<Seq>, probs: &mut Vec<f64>| {
        if mass <= 0.0 {
            return;
        }
        if let Some(i) = seqs.iter().position(|t| *t == s) {
            probs[i] += mass;
        } else {
            seqs.push(s);
            probs.push(mass);
        }
    };
    for first in 0..v {
        push(
            spec.trajectory(spec.rule, first),
            (1.0 - c) / v as f64,
            &mut seqs,
            &mut probs,
        );
    }
    if c > 0.0 {
        for first in 0..v {
            push(
                spec.trajectory(spec.rule.opposite(), first),
                c / v as f64,
                &mut seqs,
                &mut probs,
            );
        }
    }
    let support = Arc::new(
        SupportSet::new(v, spec.seq_len, seqs).expect("trajectories are valid and deduplicated"),
    );
    DiscreteDist::new(support, probs).expect("domain masses sum to 1")
}

/// Draws one sequence from a domain's population distribution.
pub fn domain_sample(spec: &DomainSpec, rng: &mut dyn RngCore) -> Seq {
    use rand::Rng;
    let rule = if spec.contamination > 0.0 && rng.gen::<f64>() < spec.contamination {
        spec.rule.opposite()
    } else {
        spec.rule
    };
    let first = rng.gen_range(0..spec.vocab_size);
    spec.trajectory(rule, first)
}

// ---------------------------------------------------------------------------
// Restriction to enumerated supports
// ---------------------------------------------------------------------------

/// `exp(log_prob)` for every support element; a sub-probability vector when
/// the expert leaks mass outside the support.
pub fn induced_probs<E: SequenceModel>(expert: &E, support: &SupportSet) -> Vec<f64> {
    support
        .seqs()
        .iter()
        .map(|s| expert.log_prob(s).exp())
        .collect()
}

/// `|support| × p` matrix of expert probabilities, row-major by support index.
pub fn expert_matrix<E: SequenceModel>(experts: &[E], support: &SupportSet) -> Vec<f64> {
    let p = experts.len();
    let mut m = vec![0.0; support.len() * p];
    for (k, e) in experts.iter().enumerate() {
        for (i, s) in support.seqs().iter().enumerate() {
            m[i * p + k] = e.log_prob(s).exp();
        }
    }
    m
}

/// Exact per-source error `ε = KL(source ‖ expert) = Σ_x p(x)(ln p(x) − ln π(x))`.
///
/// Only support points of `source` contribute, so this is the divergence over
/// the full sequence space.
pub fn expert_epsilon<E: SequenceModel>(source: &DiscreteDist, expert: &E) -> f64 {
    let mut acc = 0.0;
    for (i, s) in source.support().seqs().iter().enumerate() {
        let p = source.prob(i);
        if p > 0.0 {
            let lp = expert.log_prob(s);
            if lp == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            acc += p * (p.ln() - lp);
        }
    }
    acc
}
