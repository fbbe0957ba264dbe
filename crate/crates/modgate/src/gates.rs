//! Gates over enumerated supports and their normalized space.
//!
//! A gate assigns every sequence a simplex row of expert weights. The
//! normalized gate space additionally requires the gated mixture to carry
//! total mass one over the support (`Z = 1`), which makes it a probability
//! distribution. Two parameterizations are provided:
//!
//! - [`TabularGate`]: one explicit row per support element; exact partition
//!   mass and exact Euclidean projection onto the normalized space.
//! - [`FeatGate`]: softmax of a linear map of fixed sequence features; used
//!   by the stochastic solver where rows must exist off-support too.

use std::path::Path;
use std::sync::Arc;

use crate::dist::{lse, Seq, SupportSet, Token};
use crate::experts::{expert_matrix, SequenceModel};
use crate::textio::{expect_header, fmt_f64, parse_f64, parse_usize};
use crate::{Error, Result, GATE_ROW_TOL, GATE_Z_PROJ_TOL};

/// Common gate interface: a simplex row of expert weights per sequence.
/// `None` marks sequences a tabular gate has no row for.
pub trait Gate: Send + Sync {
    fn num_experts(&self) -> usize;
    fn weights(&self, x: &Seq) -> Option<Vec<f64>>;
}

/// `ln π_g(x) = LSE_k(ln g(x,k) + ln π̂_k(x))`; `-inf` when every expert
/// assigns zero (or the gate has no row for `x`).
pub fn gate_log_pi<G: Gate + ?Sized, E: SequenceModel>(gate: &G, experts: &[E], x: &Seq) -> Result<f64> {
    let w = gate.weights(x).ok_or(Error::OffSupport)?;
    let terms: Vec<f64> = w
        .iter()
        .zip(experts)
        .map(|(&wk, e)| {
            if wk > 0.0 {
                wk.ln() + e.log_prob(x)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(lse(&terms))
}

/// Lenient variant for samplers: off-support means the model assigns no mass.
pub fn gate_log_pi_or_neg_inf<G: Gate + ?Sized, E: SequenceModel>(
    gate: &G,
    experts: &[E],
    x: &Seq,
) -> f64 {
    gate_log_pi(gate, experts, x).unwrap_or(f64::NEG_INFINITY)
}

/// Batch evaluation record: per-sequence model log-probabilities and the
/// partition mass of the gate on its support.
#[derive(Debug, Clone)]
pub struct GateEval {
    pub log_pi: Vec<f64>,
    pub z: f64,
}

// ---------------------------------------------------------------------------
// Tabular gate
// ---------------------------------------------------------------------------

/// Explicit gate over an enumerated support: row `i` is the expert
/// distribution for support element `i`.
#[derive(Debug, Clone)]
pub struct TabularGate {
    support: Arc<SupportSet>,
    num_experts: usize,
    /// Row-major `|support| × p`.
    rows: Vec<f64>,
}

impl TabularGate {
    pub fn new(support: Arc<SupportSet>, num_experts: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != support.len() * num_experts {
            return Err(Error::LengthMismatch {
                expected: support.len() * num_experts,
                got: rows.len(),
            });
        }
        for row in rows.chunks(num_experts) {
            let mut sum = 0.0;
            for &w in row {
                if w < -GATE_ROW_TOL {
                    return Err(Error::NegativeProbability(w));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > GATE_ROW_TOL {
                return Err(Error::NotNormalized(sum));
            }
        }
        // Snap any tolerated tiny negatives to zero.
        let rows = rows.into_iter().map(|w| w.max(0.0)).collect();
        Ok(TabularGate {
            support,
            num_experts,
            rows,
        })
    }

    /// Constant gate `g(x,·) = w` for every support element.
    pub fn constant(support: Arc<SupportSet>, weights: &[f64]) -> Result<Self> {
        let n = support.len();
        let mut rows = Vec::with_capacity(n * weights.len());
        for _ in 0..n {
            rows.extend_from_slice(weights);
        }
        TabularGate::new(support, weights.len(), rows)
    }

    pub fn support(&self) -> &Arc<SupportSet> {
        &self.support
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.num_experts..(i + 1) * self.num_experts]
    }

    /// Exact partition mass `Z = Σ_x Σ_k g(x,k) π̂_k(x)`.
    pub fn partition_z<E: SequenceModel>(&self, experts: &[E]) -> f64 {
        let probs = expert_matrix(experts, &self.support);
        partition_z_of(&self.rows, &probs)
    }

    /// Evaluates `ln π_g` on every support element together with `Z`.
    pub fn evaluate<E: SequenceModel>(&self, experts: &[E]) -> GateEval {
        let log_pi: Vec<f64> = self
            .support
            .seqs()
            .iter()
            .map(|s| gate_log_pi(self, experts, s).expect("support element has a row"))
            .collect();
        let z = log_pi.iter().map(|&lp| lp.exp()).sum();
        GateEval { log_pi, z }
    }

    /// Membership check for the normalized gate space at tolerance `z_tol`.
    pub fn is_normalized<E: SequenceModel>(&self, experts: &[E], z_tol: f64) -> bool {
        (self.partition_z(experts) - 1.0).abs() <= z_tol
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "modgate-gate-tab v1 {} {} {} {}\n",
            self.support.vocab_size(),
            self.support.seq_len(),
            self.support.len(),
            self.num_experts
        ));
        for (i, s) in self.support.seqs().iter().enumerate() {
            let toks: Vec<String> = s.tokens().iter().map(|t| t.to_string()).collect();
            let ws: Vec<String> = self.row(i).iter().map(|w| fmt_f64(*w)).collect();
            out.push_str(&format!("{} | {}\n", toks.join(" "), ws.join(" ")));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyInput)?;
        let fields = expect_header(header, "modgate-gate-tab")?;
        if fields.len() != 4 {
            return Err(Error::Parse("tab gate header needs V T n p".into()));
        }
        let v = parse_usize(fields[0])?;
        let t = parse_usize(fields[1])?;
        let n = parse_usize(fields[2])?;
        let p = parse_usize(fields[3])?;
        let mut seqs = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n * p);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (left, right) = line
                .split_once('|')
                .ok_or_else(|| Error::Parse(format!("missing `|` in {line:?}")))?;
            let toks: Vec<Token> = left
                .split_whitespace()
                .map(|s| parse_usize(s).map(|u| u as Token))
                .collect::<Result<_>>()?;
            if toks.len() != t {
                return Err(Error::BadSeqLen {
                    expected: t,
                    got: toks.len(),
                });
            }
            seqs.push(Seq::new(toks));
            for w in right.split_whitespace() {
                rows.push(parse_f64(w)?);
            }
        }
        if seqs.len() != n {
            return Err(Error::Parse(format!("expected {n} rows, got {}", seqs.len())));
        }
        let support = Arc::new(SupportSet::new(v, t, seqs)?);
        TabularGate::new(support, p, rows)
    }
}

impl Gate for TabularGate {
    fn num_experts(&self) -> usize {
        self.num_experts
    }

    fn weights(&self, x: &Seq) -> Option<Vec<f64>> {
        self.support.index_of(x).map(|i| self.row(i).to_vec())
    }
}

fn partition_z_of(rows: &[f64], probs: &[f64]) -> f64 {
    rows.iter().zip(probs).map(|(&g, &q)| g * q).sum()
}

// ---------------------------------------------------------------------------
// Euclidean projection onto the normalized gate space
// ---------------------------------------------------------------------------

/// Euclidean projection of a vector onto the probability simplex
/// (sort-based algorithm).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut css = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let cand = (css - 1.0) / (j + 1) as f64;
        if uj - cand > 0.0 {
            tau = cand;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Euclidean (Frobenius) projection of a raw `|support| × p` matrix onto the
/// intersection of the per-row simplices with `{Z = 1}`.
///
/// The affine constraint is dualized with a scalar `ν`: for fixed `ν` each row
/// of `raw − ν·π̂(x)` is projected onto the simplex independently, and `Z(ν)`
/// is continuous and non-increasing, so a bisection on `ν` drives `|Z−1|`
/// below `1e-10`.
pub fn project_gate<E: SequenceModel>(
    raw: &[f64],
    support: &Arc<SupportSet>,
    experts: &[E],
) -> Result<TabularGate> {
    let p = experts.len();
    let n = support.len();
    if raw.len() != n * p {
        return Err(Error::LengthMismatch {
            expected: n * p,
            got: raw.len(),
        });
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss("non-finite gate entries".into()));
    }
    let probs = expert_matrix(experts, support);

    // Feasibility: Σ min_k π̂_k(x) <= 1 <= Σ max_k π̂_k(x).
    let mut sum_min = 0.0;
    let mut sum_max = 0.0;
    for i in 0..n {
        let row = &probs[i * p..(i + 1) * p];
        sum_min += row.iter().copied().fold(f64::INFINITY, f64::min);
        sum_max += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    if sum_min > 1.0 + GATE_Z_PROJ_TOL || sum_max < 1.0 - GATE_Z_PROJ_TOL {
        return Err(Error::Infeasible(format!(
            "normalized gate space is empty: Σmin = {sum_min}, Σmax = {sum_max}"
        )));
    }

    let project_at = |nu: f64| -> Vec<f64> {
        let mut rows = Vec::with_capacity(n * p);
        let mut shifted = vec![0.0; p];
        for i in 0..n {
            let prow = &probs[i * p..(i + 1) * p];
            for k in 0..p {
                shifted[k] = raw[i * p + k] - nu * prow[k];
            }
            rows.extend(project_to_simplex(&shifted));
        }
        rows
    };
    let z_at = |rows: &[f64]| partition_z_of(rows, &probs);

    let rows0 = project_at(0.0);
    if (z_at(&rows0) - 1.0).abs() <= 1e-10 {
        return TabularGate::new(Arc::clone(support), p, rows0);
    }

    // Bracket the root: Z decreases in ν, Z(-∞) = Σmax, Z(+∞) = Σmin.
    let mut lo = -1.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while z_at(&project_at(lo)) < 1.0 {
        lo *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::Infeasible("projection bracket failed (low side)".into()));
        }
    }
    grow = 0;
    while z_at(&project_at(hi)) > 1.0 {
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::Infeasible("projection bracket failed (high side)".into()));
        }
    }
    let mut rows = rows0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        rows = project_at(mid);
        let z = z_at(&rows);
        if (z - 1.0).abs() <= 1e-10 {
            break;
        }
        if z > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    TabularGate::new(Arc::clone(support), p, rows)
}

// ---------------------------------------------------------------------------
// Featurized gate
// ---------------------------------------------------------------------------

/// Fixed feature map for full sequences: per-token one-hot counts (`V`),
/// counts of each step offset `(x_{t+1} − x_t) mod V` (`V`), and a bias term.
/// Dimension `2V + 1`.
pub fn seq_features(x: &Seq, vocab_size: usize) -> Vec<f64> {
    let v = vocab_size;
    let mut f = vec![0.0; 2 * v + 1];
    for &t in x.tokens() {
        f[t as usize] += 1.0;
    }
    for pair in x.tokens().windows(2) {
        let off = (pair[1] as usize + v - pair[0] as usize) % v;
        f[v + off] += 1.0;
    }
    f[2 * v] = 1.0;
    f
}

/// Softmax-linear gate over [`seq_features`]; rows are strictly positive, so
/// it is evaluable on any sequence of the right shape.
#[derive(Debug, Clone)]
pub struct FeatGate {
    vocab_size: usize,
    seq_len: usize,
    num_experts: usize,
    /// Row-major `d × p` with `d = 2V + 1`.
    theta: Vec<f64>,
}

impl FeatGate {
    pub fn zeros(vocab_size: usize, seq_len: usize, num_experts: usize) -> Self {
        FeatGate {
            vocab_size,
            seq_len,
            num_experts,
            theta: vec![0.0; (2 * vocab_size + 1) * num_experts],
        }
    }

    pub fn new(vocab_size: usize, seq_len: usize, num_experts: usize, theta: Vec<f64>) -> Result<Self> {
        let d = 2 * vocab_size + 1;
        if theta.len() != d * num_experts {
            return Err(Error::LengthMismatch {
                expected: d * num_experts,
                got: theta.len(),
            });
        }
        Ok(FeatGate {
            vocab_size,
            seq_len,
            num_experts,
            theta,
        })
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.vocab_size + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn logits(&self, x: &Seq) -> Vec<f64> {
        let f = seq_features(x, self.vocab_size);
        self.logits_from_features(&f)
    }

    pub fn logits_from_features(&self, features: &[f64]) -> Vec<f64> {
        let p = self.num_experts;
        let mut u = vec![0.0; p];
        for (d, &fd) in features.iter().enumerate() {
            if fd != 0.0 {
                for k in 0..p {
                    u[k] += fd * self.theta[d * p + k];
                }
            }
        }
        u
    }

    /// Materializes explicit rows on an enumerated support.
    pub fn tabularize(&self, support: &Arc<SupportSet>) -> TabularGate {
        let mut rows = Vec::with_capacity(support.len() * self.num_experts);
        for s in support.seqs() {
            rows.extend(self.weights(s).expect("feat gates cover every sequence"));
        }
        TabularGate::new(Arc::clone(support), self.num_experts, rows)
            .expect("softmax rows are simplex rows")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "modgate-gate-feat v1 {} {} {} {}\n",
            self.vocab_size,
            self.seq_len,
            self.feature_dim(),
            self.num_experts
        ));
        for row in self.theta.chunks(self.num_experts) {
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
        let fields = expect_header(header, "modgate-gate-feat")?;
        if fields.len() != 4 {
            return Err(Error::Parse("feat gate header needs V T d p".into()));
        }
        let v = parse_usize(fields[0])?;
        let t = parse_usize(fields[1])?;
        let d = parse_usize(fields[2])?;
        let p = parse_usize(fields[3])?;
        if d != 2 * v + 1 {
            return Err(Error::Parse(format!("feature dim {d} != 2V+1")));
        }
        let mut theta = Vec::with_capacity(d * p);
        for line in lines {
            for s in line.split_whitespace() {
                theta.push(parse_f64(s)?);
            }
        }
        FeatGate::new(v, t, p, theta)
    }
}

impl Gate for FeatGate {
    fn num_experts(&self) -> usize {
        self.num_experts
    }

    fn weights(&self, x: &Seq) -> Option<Vec<f64>> {
        Some(softmax(&self.logits(x)))
    }
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loads whichever gate format the file holds.
pub enum AnyGate {
    Tabular(TabularGate),
    Feat(FeatGate),
}

impl AnyGate {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let first = text.lines().next().unwrap_or("");
        if first.starts_with("modgate-gate-tab") {
            Ok(AnyGate::Tabular(TabularGate::load(path)?))
        } else if first.starts_with("modgate-gate-feat") {
            Ok(AnyGate::Feat(FeatGate::load(path)?))
        } else {
            Err(Error::Parse(format!("unrecognized gate header {first:?}")))
        }
    }

    /// Explicit rows on the given support regardless of representation.
    pub fn tabularize(&self, support: &Arc<SupportSet>) -> Result<TabularGate> {
        match self {
            AnyGate::Tabular(g) => {
                if *g.support().as_ref() == *support.as_ref() {
                    Ok(g.clone())
                } else {
                    // Re-express on an equal-content support in a different order.
                    let mut rows = Vec::with_capacity(support.len() * g.num_experts());
                    for s in support.seqs() {
                        let row = g.weights(s).ok_or(Error::SupportMismatch)?;
                        rows.extend(row);
                    }
                    TabularGate::new(Arc::clone(support), g.num_experts(), rows)
                }
            }
            AnyGate::Feat(g) => Ok(g.tabularize(support)),
        }
    }
}

impl Gate for AnyGate {
    fn num_experts(&self) -> usize {
        match self {
            AnyGate::Tabular(g) => g.num_experts(),
            AnyGate::Feat(g) => g.num_experts(),
        }
    }

    fn weights(&self, x: &Seq) -> Option<Vec<f64>> {
        match self {
            AnyGate::Tabular(g) => g.weights(x),
            AnyGate::Feat(g) => g.weights(x),
        }
    }
}
