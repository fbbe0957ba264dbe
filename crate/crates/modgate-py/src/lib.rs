//! Python bindings for the core modgate types and operations.
//!
//! The surface mirrors the Rust library at desk scale: divergence
//! primitives over explicit probability vectors, Markov experts, the exact
//! minimax solver, samplers, and the posterior-mean router. Distributions
//! cross the boundary as `(sequences, probabilities)` pairs where sequences
//! are lists of token ids.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use modgate::dist::{self, DiscreteDist, MixtureWeights, Seq, SupportSet, Token};
use modgate::experts::{domain_dist, DomainRule, DomainSpec, SequenceModel};
use modgate::gates::TabularGate;
use modgate::sampler;
use modgate::solver::{self, ExactConfig, LambdaSet, SolvedGate};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn seqs_from_py(raw: Vec<Vec<u16>>) -> Vec<Seq> {
    raw.into_iter().map(Seq::new).collect()
}

fn seqs_to_py(seqs: &[Seq]) -> Vec<Vec<u16>> {
    seqs.iter().map(|s| s.tokens().to_vec()).collect()
}

/// Builds a distribution from `(sequences, probabilities)`.
fn dist_from_py(
    vocab_size: usize,
    seq_len: usize,
    seqs: Vec<Vec<u16>>,
    probs: Vec<f64>,
) -> PyResult<DiscreteDist> {
    let support =
        Arc::new(SupportSet::new(vocab_size, seq_len, seqs_from_py(seqs)).map_err(err)?);
    DiscreteDist::new(support, probs).map_err(err)
}

/// Anonymous single-token support for plain probability vectors.
fn vector_dist(probs: &[f64]) -> PyResult<DiscreteDist> {
    let n = probs.len();
    if n == 0 {
        return Err(PyValueError::new_err("empty probability vector"));
    }
    let support = Arc::new(
        SupportSet::new(n, 1, (0..n).map(|t| Seq::new(vec![t as Token])).collect())
            .map_err(err)?,
    );
    DiscreteDist::new(support, probs.to_vec()).map_err(err)
}

/// KL divergence between two probability vectors, in nats. Returns `inf`
/// when the first has mass where the second has none.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    dist::kl_divergence(&vector_dist(&p)?, &vector_dist(&q)?).map_err(err)
}

/// Weighted Jensen-Shannon divergence of probability vectors.
#[pyfunction]
fn jensen_shannon(dists: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<f64> {
    let ds: PyResult<Vec<DiscreteDist>> = dists.iter().map(|d| vector_dist(d)).collect();
    let w = MixtureWeights::new(weights).map_err(err)?;
    dist::jensen_shannon(&ds?, &w).map_err(err)
}

/// Shannon entropy of a weight vector, in nats.
#[pyfunction]
fn entropy(weights: Vec<f64>) -> PyResult<f64> {
    Ok(dist::entropy(&MixtureWeights::new(weights).map_err(err)?))
}

/// Numerically stable `ln Σ exp(v_i)`.
#[pyfunction]
fn log_sum_exp(values: Vec<f64>) -> PyResult<f64> {
    dist::log_sum_exp(&values).map_err(err)
}

/// Static-gating capacity floor `ln Σ e^{ε_k}`.
#[pyfunction]
fn capacity_lower_bound(epsilons: Vec<f64>) -> PyResult<f64> {
    modgate::analysis::capacity_lower_bound(&epsilons).map_err(err)
}

/// Exact population distribution of a synthetic rule domain, as
/// `(sequences, probabilities)`.
#[pyfunction]
#[pyo3(signature = (vocab_size, seq_len, rule, contamination = 0.0))]
fn domain_distribution(
    vocab_size: usize,
    seq_len: usize,
    rule: &str,
    contamination: f64,
) -> PyResult<(Vec<Vec<u16>>, Vec<f64>)> {
    let spec = DomainSpec::new(
        vocab_size,
        seq_len,
        DomainRule::parse(rule).map_err(err)?,
        contamination,
    )
    .map_err(err)?;
    let d = domain_dist(&spec);
    Ok((seqs_to_py(d.support().seqs()), d.probs().to_vec()))
}

/// Order-1 Markov expert with exact log-likelihoods.
#[pyclass(name = "MarkovExpert")]
struct PyMarkovExpert {
    inner: modgate::experts::MarkovExpert,
}

#[pymethods]
impl PyMarkovExpert {
    /// Maximum-likelihood fit with additive smoothing.
    #[staticmethod]
    #[pyo3(signature = (samples, vocab_size, seq_len, alpha = 0.0))]
    fn fit(samples: Vec<Vec<u16>>, vocab_size: usize, seq_len: usize, alpha: f64) -> PyResult<Self> {
        Ok(PyMarkovExpert {
            inner: modgate::experts::MarkovExpert::fit_mle(
                &seqs_from_py(samples),
                vocab_size,
                seq_len,
                alpha,
            )
            .map_err(err)?,
        })
    }

    /// Weighted fit: one weight per distinct sequence (population fitting).
    #[staticmethod]
    #[pyo3(signature = (samples, weights, vocab_size, seq_len, alpha = 0.0))]
    fn fit_weighted(
        samples: Vec<Vec<u16>>,
        weights: Vec<f64>,
        vocab_size: usize,
        seq_len: usize,
        alpha: f64,
    ) -> PyResult<Self> {
        Ok(PyMarkovExpert {
            inner: modgate::experts::MarkovExpert::fit_weighted(
                &seqs_from_py(samples),
                &weights,
                vocab_size,
                seq_len,
                alpha,
            )
            .map_err(err)?,
        })
    }

    fn log_prob(&self, tokens: Vec<u16>) -> f64 {
        self.inner.log_prob(&Seq::new(tokens))
    }

    /// Ancestral samples, deterministic given the seed.
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<u16>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.inner.sample(&mut rng).tokens().to_vec())
            .collect()
    }

    /// Exact per-source error against a `(sequences, probabilities)` target.
    fn epsilon(&self, seqs: Vec<Vec<u16>>, probs: Vec<f64>) -> PyResult<f64> {
        let d = dist_from_py(self.inner.vocab_size(), self.inner.seq_len(), seqs, probs)?;
        Ok(modgate::experts::expert_epsilon(&d, &self.inner))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyMarkovExpert {
            inner: modgate::experts::MarkovExpert::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
}

fn experts_from_py(experts: &[PyRef<'_, PyMarkovExpert>]) -> Vec<modgate::experts::MarkovExpert> {
    experts.iter().map(|e| e.inner.clone()).collect()
}

fn sources_from_py(
    vocab_size: usize,
    seq_len: usize,
    sources: Vec<(Vec<Vec<u16>>, Vec<f64>)>,
) -> PyResult<Vec<DiscreteDist>> {
    sources
        .into_iter()
        .map(|(seqs, probs)| dist_from_py(vocab_size, seq_len, seqs, probs))
        .collect()
}

/// Tabular gate over the enumerated union support.
#[pyclass(name = "RobustGate")]
struct PyRobustGate {
    inner: TabularGate,
    lambda_bar: Vec<f64>,
}

#[pymethods]
impl PyRobustGate {
    /// Solves the worst-case-mixture game with the exact no-regret dynamics
    /// and returns the time-averaged gate.
    #[staticmethod]
    #[pyo3(signature = (sources, experts, iters = 2000))]
    fn solve_exact(
        sources: Vec<(Vec<Vec<u16>>, Vec<f64>)>,
        experts: Vec<PyRef<'_, PyMarkovExpert>>,
        iters: usize,
    ) -> PyResult<Self> {
        let rust_experts = experts_from_py(&experts);
        let first = rust_experts
            .first()
            .ok_or_else(|| PyValueError::new_err("need at least one expert"))?;
        let (v, t) = (first.vocab_size(), first.seq_len());
        let sources = sources_from_py(v, t, sources)?;
        let set = LambdaSet::full_simplex(rust_experts.len());
        let trace = solver::solve_exact(&sources, &rust_experts, &set, &ExactConfig::new(iters))
            .map_err(err)?;
        let gate = match trace.gate {
            SolvedGate::Tabular(g) => g,
            SolvedGate::Feat(_) => unreachable!("exact solver yields tabular gates"),
        };
        Ok(PyRobustGate {
            inner: gate,
            lambda_bar: trace.lambda_bar.weights().to_vec(),
        })
    }

    /// Time-averaged adversary weights from the solve.
    #[getter]
    fn least_favorable_mixture(&self) -> Vec<f64> {
        self.lambda_bar.clone()
    }

    /// Exact partition mass of the gated mixture.
    fn partition_mass(&self, experts: Vec<PyRef<'_, PyMarkovExpert>>) -> f64 {
        self.inner.partition_z(&experts_from_py(&experts))
    }

    /// `ln π_g(x)` for a support sequence.
    fn log_pi(&self, experts: Vec<PyRef<'_, PyMarkovExpert>>, tokens: Vec<u16>) -> PyResult<f64> {
        modgate::gates::gate_log_pi(&self.inner, &experts_from_py(&experts), &Seq::new(tokens))
            .map_err(err)
    }

    /// Worst-case divergence over the simplex vertices.
    fn worst_case_risk(
        &self,
        sources: Vec<(Vec<Vec<u16>>, Vec<f64>)>,
        experts: Vec<PyRef<'_, PyMarkovExpert>>,
    ) -> PyResult<f64> {
        let rust_experts = experts_from_py(&experts);
        let (v, t) = (rust_experts[0].vocab_size(), rust_experts[0].seq_len());
        let sources = sources_from_py(v, t, sources)?;
        let set = LambdaSet::full_simplex(rust_experts.len());
        solver::worst_case_risk(&self.inner, &sources, &rust_experts, &set).map_err(err)
    }

    /// The exact model distribution as `(sequences, probabilities)`.
    fn model_distribution(
        &self,
        experts: Vec<PyRef<'_, PyMarkovExpert>>,
    ) -> PyResult<(Vec<Vec<u16>>, Vec<f64>)> {
        let d = sampler::exact_model_dist(&self.inner, &experts_from_py(&experts)).map_err(err)?;
        Ok((seqs_to_py(d.support().seqs()), d.probs().to_vec()))
    }

    /// Expert posterior given a prefix, under the gated model.
    fn posterior_weights(
        &self,
        experts: Vec<PyRef<'_, PyMarkovExpert>>,
        prefix: Vec<u16>,
    ) -> PyResult<Vec<f64>> {
        let w = modgate::distill::posterior_weights(
            &self.inner,
            &experts_from_py(&experts),
            &prefix,
        )
        .map_err(err)?;
        Ok(w.weights().to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRobustGate {
            inner: TabularGate::load(&path).map_err(err)?,
            lambda_bar: Vec::new(),
        })
    }
}

/// Exact samples from the gated model by rejection sampling.
#[pyfunction]
#[pyo3(signature = (gate, experts, n, seed, max_trials = None))]
fn rejection_sample(
    gate: PyRef<'_, PyRobustGate>,
    experts: Vec<PyRef<'_, PyMarkovExpert>>,
    n: usize,
    seed: u64,
    max_trials: Option<usize>,
) -> PyResult<Vec<Vec<u16>>> {
    let rust_experts = experts_from_py(&experts);
    let budget = max_trials.unwrap_or_else(|| sampler::default_max_trials(rust_experts.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, _) =
            sampler::rejection_sample(&gate.inner, &rust_experts, &mut rng, budget).map_err(err)?;
        out.push(x.tokens().to_vec());
    }
    Ok(out)
}

/// Approximate samples via sampling-importance-resampling.
#[pyfunction]
#[pyo3(signature = (gate, experts, n, seed, candidates = 64))]
fn sir_sample(
    gate: PyRef<'_, PyRobustGate>,
    experts: Vec<PyRef<'_, PyMarkovExpert>>,
    n: usize,
    seed: u64,
    candidates: usize,
) -> PyResult<Vec<Vec<u16>>> {
    let rust_experts = experts_from_py(&experts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let draw =
            sampler::sir_sample(&gate.inner, &rust_experts, candidates, &mut rng).map_err(err)?;
        out.push(draw.seq.tokens().to_vec());
    }
    Ok(out)
}

#[pymodule]
fn modgate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(jensen_shannon, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(log_sum_exp, m)?)?;
    m.add_function(wrap_pyfunction!(capacity_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(domain_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(rejection_sample, m)?)?;
    m.add_function(wrap_pyfunction!(sir_sample, m)?)?;
    m.add_class::<PyMarkovExpert>()?;
    m.add_class::<PyRobustGate>()?;
    Ok(())
}
