//! Discrete Shannon entropy in nats and exact conditional entropies along a
//! Markov chain `Y <- A1 -> A2 -> ... -> AK`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest alphabet handled by exact enumeration.
pub const MAX_ALPHABET: usize = 64;

const SUM_TOLERANCE: f64 = 1e-9;

/// Slack allowed when checking that `H[Y|A_k]` never decreases.
pub const ORDERING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pmf(Vec<f64>);

impl Pmf {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        check_distribution(&probabilities, "pmf")?;
        Ok(Pmf(probabilities))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Pmf::new(vec![1.0 / n as f64; n])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Distribution(format!("{what} is empty")));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Distribution(format!("{what} has invalid entry {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Distribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy(p: &Pmf) -> f64 {
    let h = -p.0.iter().map(|&v| plogp(v)).sum::<f64>();
    h.max(0.0)
}

/// `H[Y|X]` from a joint table whose rows index `x` and columns index `y`.
pub fn conditional_entropy(joint: &[Vec<f64>]) -> Result<f64> {
    let width = joint.first().map_or(0, Vec::len);
    if width == 0 || joint.iter().any(|r| r.len() != width) {
        return Err(Error::Distribution("joint table must be a non-empty rectangle".into()));
    }
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    check_distribution(&flat, "joint table")?;
    Ok(conditional_entropy_unchecked(joint))
}

/// Joint law of a chain `Y <- A1 -> A2 -> ... -> AK`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    /// Distribution of `A1`.
    pub marginal: Pmf,
    /// `emission[a1][y] = P(Y = y | A1 = a1)`.
    pub emission: Vec<Vec<f64>>,
    /// `transitions[k][a][b] = P(A_{k+2} = b | A_{k+1} = a)`.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

fn check_stochastic(m: &[Vec<f64>], rows: usize, what: &str) -> Result<usize> {
    if m.len() != rows {
        return Err(Error::Distribution(format!("{what} has {} rows, expected {rows}", m.len())));
    }
    let width = m[0].len();
    if width > MAX_ALPHABET {
        return Err(Error::Distribution(format!(
            "{what} alphabet {width} exceeds {MAX_ALPHABET}"
        )));
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Distribution(format!("{what} row {i} has a different width")));
        }
        check_distribution(row, &format!("{what} row {i}"))?;
    }
    Ok(width)
}

impl ChainSpec {
    /// Number of layers `K`.
    pub fn depth(&self) -> usize {
        self.transitions.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut size = self.marginal.len();
        if size > MAX_ALPHABET {
            return Err(Error::Distribution(format!(
                "A1 alphabet {size} exceeds {MAX_ALPHABET}"
            )));
        }
        check_distribution(self.marginal.probabilities(), "marginal")?;
        check_stochastic(&self.emission, size, "emission")?;
        for (k, t) in self.transitions.iter().enumerate() {
            size = check_stochastic(t, size, &format!("transition {}", k + 1))?;
        }
        Ok(())
    }

    /// `P(Y)`.
    pub fn label_marginal(&self) -> Vec<f64> {
        let mut py = vec![0.0; self.emission[0].len()];
        for (pa, row) in self.marginal.probabilities().iter().zip(&self.emission) {
            for (acc, &e) in py.iter_mut().zip(row) {
                *acc += pa * e;
            }
        }
        py
    }

    /// Exact joint tables `P(A_k, Y)` for `k = 1..=K`, rows indexed by `a_k`.
    pub fn joints(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        self.validate()?;
        let mut joint: Vec<Vec<f64>> = self
            .marginal
            .probabilities()
            .iter()
            .zip(&self.emission)
            .map(|(pa, row)| row.iter().map(|e| pa * e).collect())
            .collect();
        let ny = self.emission[0].len();
        let mut out = vec![joint.clone()];
        for t in &self.transitions {
            let mut next = vec![vec![0.0; ny]; t[0].len()];
            for (a, row) in joint.iter().enumerate() {
                for (b, &p) in t[a].iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (acc, &pay) in next[b].iter_mut().zip(row) {
                        *acc += pay * p;
                    }
                }
            }
            joint = next;
            out.push(joint.clone());
        }
        Ok(out)
    }
}

/// `H[Y|A_k]` for `k = 1..=K`. The sequence is checked to be non-decreasing
/// within [`ORDERING_TOLERANCE`]; a violation names the first offending `k`.
pub fn chain_conditional_entropies(spec: &ChainSpec) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.depth());
    for joint in spec.joints()? {
        out.push(conditional_entropy_unchecked(&joint));
    }
    check_ordering(&out)?;
    Ok(out)
}

fn check_ordering(h: &[f64]) -> Result<()> {
    for k in 1..h.len() {
        if h[k] < h[k - 1] - ORDERING_TOLERANCE {
            return Err(Error::Ordering {
                k: k + 1,
                previous: h[k - 1],
                current: h[k],
            });
        }
    }
    Ok(())
}

fn conditional_entropy_unchecked(joint: &[Vec<f64>]) -> f64 {
    let mut h = 0.0;
    for row in joint {
        let px: f64 = row.iter().sum();
        if px > 0.0 {
            h -= row.iter().map(|&pxy| plogp(pxy / px)).sum::<f64>() * px;
        }
    }
    h.max(0.0)
}

fn random_row(rng: &mut Rng, width: usize) -> Vec<f64> {
    // Mix dense, sparse and deterministic rows so edge cases show up.
    let mode = rng.below(4);
    let mut row: Vec<f64> = match mode {
        0 => {
            let mut r = vec![0.0; width];
            r[rng.below(width)] = 1.0;
            r
        }
        1 => (0..width)
            .map(|_| if rng.below(2) == 0 { 0.0 } else { rng.uniform() })
            .collect(),
        _ => (0..width).map(|_| -(1.0 - rng.uniform()).ln()).collect(),
    };
    let sum: f64 = row.iter().sum();
    if sum == 0.0 {
        row[rng.below(width)] = 1.0;
        return row;
    }
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

/// A random chain with alphabets in `1..=max_alphabet` and depth in
/// `1..=max_depth`.
pub fn random_chain(rng: &mut Rng, max_alphabet: usize, max_depth: usize) -> ChainSpec {
    let max_alphabet = max_alphabet.clamp(1, MAX_ALPHABET);
    let depth = 1 + rng.below(max_depth.max(1));
    let ny = 1 + rng.below(max_alphabet);
    let mut size = 1 + rng.below(max_alphabet);
    let marginal = Pmf(random_row(rng, size));
    let emission = (0..size).map(|_| random_row(rng, ny)).collect();
    let mut transitions = Vec::with_capacity(depth - 1);
    for _ in 1..depth {
        let next = 1 + rng.below(max_alphabet);
        transitions.push((0..size).map(|_| random_row(rng, next)).collect());
        size = next;
    }
    ChainSpec {
        marginal,
        emission,
        transitions,
    }
}

/// Named example chains shown by the command-line demo.
pub fn builtin_chains() -> Vec<(&'static str, ChainSpec)> {
    let identity = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect()
    };
    let flip = |p: f64| vec![vec![1.0 - p, p], vec![p, 1.0 - p]];
    let uniform2 = Pmf(vec![0.5, 0.5]);
    vec![
        (
            "identity",
            ChainSpec {
                marginal: uniform2.clone(),
                emission: flip(0.1),
                transitions: vec![identity(2); 4],
            },
        ),
        (
            "noisy",
            ChainSpec {
                marginal: uniform2.clone(),
                emission: flip(0.05),
                transitions: vec![flip(0.1); 5],
            },
        ),
        (
            "erasure",
            ChainSpec {
                marginal: Pmf(vec![0.25; 4]),
                emission: vec![
                    vec![1.0, 0.0],
                    vec![1.0, 0.0],
                    vec![0.0, 1.0],
                    vec![0.2, 0.8],
                ],
                transitions: vec![identity(4), vec![vec![0.5, 0.5]; 4], identity(2)],
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_entropies() {
        assert_eq!(entropy(&Pmf::new(vec![1.0, 0.0, 0.0]).unwrap()), 0.0);
        assert!((entropy(&Pmf::uniform(4).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let h = entropy(&Pmf::new(vec![0.5, 0.25, 0.25]).unwrap());
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn binary_symmetric_channel() {
        let joint = vec![vec![0.45, 0.05], vec![0.05, 0.45]];
        let h = conditional_entropy(&joint).unwrap();
        let h2 = -(0.1f64 * 0.1f64.ln() + 0.9 * 0.9f64.ln());
        assert!((h - h2).abs() < 1e-12);
        assert!((h - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn independence_and_determinism() {
        let px = [0.3, 0.7];
        let py = [0.2, 0.5, 0.3];
        let joint: Vec<Vec<f64>> = px.iter().map(|a| py.iter().map(|b| a * b).collect()).collect();
        let hy = entropy(&Pmf::new(py.to_vec()).unwrap());
        assert!((conditional_entropy(&joint).unwrap() - hy).abs() < 1e-12);
        let det = vec![vec![0.3, 0.0], vec![0.0, 0.7]];
        assert_eq!(conditional_entropy(&det).unwrap(), 0.0);
    }

    #[test]
    fn invalid_distributions() {
        assert!(Pmf::new(vec![0.5, 0.6]).is_err());
        assert!(Pmf::new(vec![1.5, -0.5]).is_err());
        assert!(Pmf::new(vec![]).is_err());
        assert!(conditional_entropy(&[vec![0.5], vec![0.25, 0.25]]).is_err());
    }

    #[test]
    fn identity_chain_is_flat() {
        let (_, spec) = &builtin_chains()[0];
        let h = chain_conditional_entropies(spec).unwrap();
        assert!(h.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn erasure_reaches_label_entropy() {
        let (_, spec) = &builtin_chains()[2];
        let h = chain_conditional_entropies(spec).unwrap();
        let hy = entropy(&Pmf::new(spec.label_marginal()).unwrap());
        assert!(h[0] < hy);
        assert!((h[2] - hy).abs() < 1e-12 && (h[3] - hy).abs() < 1e-12);
    }

    #[test]
    fn ordering_violation_names_first_k() {
        check_ordering(&[0.1, 0.2, 0.2 + 5e-10]).unwrap();
        match check_ordering(&[0.1, 0.3, 0.2, 0.1]) {
            Err(Error::Ordering { k, .. }) => assert_eq!(k, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_stochastic_transition_is_rejected() {
        let mut spec = builtin_chains()[1].1.clone();
        spec.transitions[0] = vec![vec![1.0, 0.1], vec![0.0, 1.0]];
        assert!(matches!(chain_conditional_entropies(&spec), Err(Error::Distribution(_))));
    }

    #[test]
    fn random_chains_are_valid() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            random_chain(&mut rng, 5, 6).validate().unwrap();
        }
    }
}
