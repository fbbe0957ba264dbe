//! Finite sequence spaces, discrete distributions, and divergence primitives.
//!
//! All divergences are in nats. `kl` returns the `f64::INFINITY` sentinel for
//! absolutely-discontinuous pairs instead of erroring, so adversarial updates
//! can clamp it. Supports are small enumerated sets, so probabilities are
//! stored in linear space here; sequence likelihoods elsewhere stay in
//! log-space.

use std::collections::HashMap;
use std::sync::Arc;

use crate::{Error, Result, ARITH_TOL, CONSTRUCT_TOL};

/// Token id. Vocabulary sizes at desk scale fit comfortably in `u16`.
pub type Token = u16;

/// A fixed-length token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seq(Vec<Token>);

impl Seq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Seq(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<Token>> for Seq {
    fn from(tokens: Vec<Token>) -> Self {
        Seq(tokens)
    }
}

impl std::fmt::Display for Seq {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut first = true;
        for t in &self.0 {
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
            first = false;
        }
        Ok(())
    }
}

/// An ordered, duplicate-free set of equal-length sequences with an index.
///
/// This is the enumerated union support over which gates, partition sums and
/// exact model distributions are defined.
#[derive(Debug, Clone)]
pub struct SupportSet {
    vocab_size: usize,
    seq_len: usize,
    seqs: Vec<Seq>,
    index: HashMap<Seq, usize>,
}

impl SupportSet {
    /// Builds a support from sequences, preserving first-occurrence order.
    pub fn new(vocab_size: usize, seq_len: usize, seqs: Vec<Seq>) -> Result<Self> {
        let mut index = HashMap::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            if s.len() != seq_len {
                return Err(Error::BadSeqLen {
                    expected: seq_len,
                    got: s.len(),
                });
            }
            for &t in s.tokens() {
                if (t as usize) >= vocab_size {
                    return Err(Error::TokenOutOfRange {
                        token: t as usize,
                        vocab: vocab_size,
                    });
                }
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::DuplicateSequence);
            }
        }
        Ok(SupportSet {
            vocab_size,
            seq_len,
            seqs,
            index,
        })
    }

    /// Ordered union of several supports (first occurrence wins).
    pub fn union(parts: &[&SupportSet]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let (v, t) = (first.vocab_size, first.seq_len);
        let mut seqs = Vec::new();
        let mut seen = HashMap::new();
        for part in parts {
            if part.vocab_size != v || part.seq_len != t {
                return Err(Error::SupportMismatch);
            }
            for s in &part.seqs {
                if !seen.contains_key(s) {
                    seen.insert(s.clone(), seqs.len());
                    seqs.push(s.clone());
                }
            }
        }
        SupportSet::new(v, t, seqs)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn seqs(&self) -> &[Seq] {
        &self.seqs
    }

    pub fn get(&self, i: usize) -> &Seq {
        &self.seqs[i]
    }

    pub fn index_of(&self, s: &Seq) -> Option<usize> {
        self.index.get(s).copied()
    }
}

impl PartialEq for SupportSet {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.seq_len == other.seq_len
            && self.seqs == other.seqs
    }
}

/// A probability vector over a shared [`SupportSet`].
#[derive(Debug, Clone)]
pub struct DiscreteDist {
    support: Arc<SupportSet>,
    probs: Vec<f64>,
}

impl DiscreteDist {
    /// Validates non-negativity and normalization to within `1e-12`, then
    /// rescales exactly so downstream identities hold to float precision.
    pub fn new(support: Arc<SupportSet>, probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(support, probs, CONSTRUCT_TOL)
    }

    /// Constructor for vectors produced by arithmetic (tolerance `1e-9`).
    pub fn from_arithmetic(support: Arc<SupportSet>, probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(support, probs, ARITH_TOL)
    }

    fn with_tolerance(support: Arc<SupportSet>, probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.len() != support.len() {
            return Err(Error::LengthMismatch {
                expected: support.len(),
                got: probs.len(),
            });
        }
        let mut sum = 0.0;
        for &p in &probs {
            if p < 0.0 {
                return Err(Error::NegativeProbability(p));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > tol {
            return Err(Error::NotNormalized(sum));
        }
        let probs = probs.into_iter().map(|p| p / sum).collect();
        Ok(DiscreteDist { support, probs })
    }

    pub fn support(&self) -> &Arc<SupportSet> {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Re-expresses this distribution on a superset support, filling zeros.
    pub fn reindex(&self, target: &Arc<SupportSet>) -> Result<DiscreteDist> {
        let mut probs = vec![0.0; target.len()];
        for (i, s) in self.support.seqs().iter().enumerate() {
            let j = target.index_of(s).ok_or(Error::SupportMismatch)?;
            probs[j] += self.probs[i];
        }
        DiscreteDist::new(Arc::clone(target), probs)
    }

    fn same_support(&self, other: &DiscreteDist) -> bool {
        Arc::ptr_eq(&self.support, &other.support) || *self.support == *other.support
    }
}

/// Convex weights over `p` components; a point of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut sum = 0.0;
        for &w in &weights {
            if w < 0.0 {
                return Err(Error::NegativeProbability(w));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > CONSTRUCT_TOL {
            return Err(Error::NotNormalized(sum));
        }
        Ok(MixtureWeights(weights.into_iter().map(|w| w / sum).collect()))
    }

    pub fn uniform(p: usize) -> Self {
        MixtureWeights(vec![1.0 / p as f64; p])
    }

    pub fn one_hot(p: usize, k: usize) -> Self {
        let mut w = vec![0.0; p];
        w[k] = 1.0;
        MixtureWeights(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

/// Merges several distributions onto their ordered union support and
/// re-expresses each of them there.
pub fn merge_onto_union(dists: &[DiscreteDist]) -> Result<(Arc<SupportSet>, Vec<DiscreteDist>)> {
    let supports: Vec<&SupportSet> = dists.iter().map(|d| d.support().as_ref()).collect();
    let union = Arc::new(SupportSet::union(&supports)?);
    let merged: Result<Vec<DiscreteDist>> = dists.iter().map(|d| d.reindex(&union)).collect();
    Ok((union, merged?))
}

/// Kullback-Leibler divergence `Σ p ln(p/q)` in nats.
///
/// Uses the convention `0·ln(0/q) = 0` and returns `+∞` when some point has
/// `p > 0` with `q = 0`.
pub fn kl_divergence(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if !p.same_support(q) {
        return Err(Error::SupportMismatch);
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// Pointwise convex combination `Σ_k λ_k p_k`.
pub fn mixture(dists: &[DiscreteDist], lambda: &MixtureWeights) -> Result<DiscreteDist> {
    if dists.len() != lambda.len() {
        return Err(Error::LengthMismatch {
            expected: lambda.len(),
            got: dists.len(),
        });
    }
    let first = dists.first().ok_or(Error::EmptyInput)?;
    let mut probs = vec![0.0; first.support.len()];
    for (d, &w) in dists.iter().zip(lambda.weights()) {
        if !first.same_support(d) {
            return Err(Error::SupportMismatch);
        }
        for (acc, &p) in probs.iter_mut().zip(&d.probs) {
            *acc += w * p;
        }
    }
    DiscreteDist::from_arithmetic(Arc::clone(&first.support), probs)
}

/// λ-weighted Jensen-Shannon divergence: `Σ_k λ_k KL(p_k ‖ p_λ)`.
///
/// Non-negative and bounded by `H(λ)`.
pub fn jensen_shannon(dists: &[DiscreteDist], lambda: &MixtureWeights) -> Result<f64> {
    let mix = mixture(dists, lambda)?;
    let mut acc = 0.0;
    for (d, &w) in dists.iter().zip(lambda.weights()) {
        if w > 0.0 {
            acc += w * kl_divergence(d, &mix)?;
        }
    }
    Ok(acc)
}

/// Shannon entropy `−Σ λ ln λ` with `0·ln 0 = 0`.
pub fn entropy(lambda: &MixtureWeights) -> f64 {
    lambda
        .weights()
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.ln())
        .sum()
}

/// Numerically stable `ln Σ e^{v_i}`.
///
/// Shift-invariant: `LSE(v) − max v == LSE(v − max v)` to float precision.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(lse(values))
}

/// Internal LSE for structurally non-empty inputs. `-inf` entries are valid
/// and an all-`-inf` input returns `-inf`.
pub(crate) fn lse(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf (or an explicit +inf/nan dominates unchanged).
        return m;
    }
    let sum: f64 = values.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}
