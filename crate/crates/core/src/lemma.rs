//! Constructive checks of the balance/diversity compatibility argument.
//!
//! A balanced top-k support is built round-robin, a cycle is located in its
//! bipartite row/column graph, and the uniform score matrix is perturbed by
//! alternating `±δ` along that cycle. Row and column sums survive the
//! perturbation exactly while every row on the cycle gains variance `2δ²/k`.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::math::Matrix;

/// Tolerance for every certificate clause.
pub const CERT_TOL: f64 = 1e-12;

/// Alternating row/column cycle `r0 c0 r1 c1 … r_{m−1} c_{m−1}` (closing
/// back at `r0`). Edge `(r_t, c_t)` gains `+δ`, edge `(r_{t+1}, c_t)` loses it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cycle {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Cycle {
    pub fn len(&self) -> usize {
        2 * self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Signed entries `(row, col, sign)` in traversal order.
    pub fn signed_edges(&self) -> Vec<(usize, usize, f64)> {
        let m = self.rows.len();
        let mut edges = Vec::with_capacity(2 * m);
        for t in 0..m {
            edges.push((self.rows[t], self.cols[t], 1.0));
            edges.push((self.rows[(t + 1) % m], self.cols[t], -1.0));
        }
        edges
    }
}

impl fmt::Display for Cycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .rows
            .iter()
            .zip(&self.cols)
            .map(|(r, c)| format!("r{r}-c{c}"))
            .collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Row `i` selects columns `(i·k + t) mod n` for `t < k`.
pub fn build_balanced_support(tokens: usize, experts: usize, k: usize) -> Result<Matrix> {
    if k == 0 || experts == 0 {
        return Err(LabError::InvalidArgument("need k >= 1 and n >= 1".into()));
    }
    if k > experts {
        return Err(LabError::InvalidArgument(format!(
            "k = {k} exceeds n = {experts}"
        )));
    }
    let mut values = vec![0.0; tokens * experts];
    for i in 0..tokens {
        for t in 0..k {
            values[i * experts + (i * k + t) % experts] = 1.0;
        }
    }
    Matrix::from_vec(tokens, experts, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Row(usize),
    Col(usize),
}

struct CycleSearch<'a> {
    support: &'a Matrix,
    row_seen: Vec<bool>,
    col_seen: Vec<bool>,
    path: Vec<Node>,
}

impl CycleSearch<'_> {
    fn neighbours(&self, node: Node) -> Vec<Node> {
        match node {
            Node::Row(i) => (0..self.support.cols())
                .filter(|&j| self.support.get(i, j) != 0.0)
                .map(Node::Col)
                .collect(),
            Node::Col(j) => (0..self.support.rows())
                .filter(|&i| self.support.get(i, j) != 0.0)
                .map(Node::Row)
                .collect(),
        }
    }

    fn seen(&mut self, node: Node) -> &mut bool {
        match node {
            Node::Row(i) => &mut self.row_seen[i],
            Node::Col(j) => &mut self.col_seen[j],
        }
    }

    /// DFS returning the path slice that closes on a node still on the stack.
    fn visit(&mut self, node: Node, parent: Option<Node>) -> Option<Vec<Node>> {
        *self.seen(node) = true;
        self.path.push(node);
        for next in self.neighbours(node) {
            if Some(next) == parent {
                continue;
            }
            if *self.seen(next) {
                if let Some(pos) = self.path.iter().position(|&p| p == next) {
                    return Some(self.path[pos..].to_vec());
                }
                continue;
            }
            if let Some(cycle) = self.visit(next, Some(node)) {
                return Some(cycle);
            }
        }
        self.path.pop();
        None
    }
}

/// First cycle met by an index-ordered DFS over the bipartite support graph,
/// or `None` if the graph is a forest.
pub fn find_cycle(support: &Matrix) -> Option<Cycle> {
    let mut search = CycleSearch {
        support,
        row_seen: vec![false; support.rows()],
        col_seen: vec![false; support.cols()],
        path: Vec::new(),
    };
    for i in 0..support.rows() {
        if search.row_seen[i] {
            continue;
        }
        search.path.clear();
        if let Some(mut nodes) = search.visit(Node::Row(i), None) {
            // rotate so the cycle starts at a row
            if let Some(Node::Col(_)) = nodes.first() {
                nodes.rotate_left(1);
            }
            let mut cycle = Cycle {
                rows: Vec::new(),
                cols: Vec::new(),
            };
            for node in nodes {
                match node {
                    Node::Row(r) => cycle.rows.push(r),
                    Node::Col(c) => cycle.cols.push(c),
                }
            }
            return Some(cycle);
        }
    }
    None
}

/// Adds `+δ`/`−δ` alternately along the cycle edges.
pub fn perturb_cycle(s0: &Matrix, cycle: &Cycle, delta: f64) -> Result<Matrix> {
    if cycle.is_empty() || cycle.rows.len() != cycle.cols.len() {
        return Err(LabError::InvalidArgument("malformed cycle".into()));
    }
    let edges = cycle.signed_edges();
    for &(r, c, _) in &edges {
        if r >= s0.rows() || c >= s0.cols() {
            return Err(LabError::Shape(format!(
                "cycle entry ({r}, {c}) outside {:?}",
                s0.shape()
            )));
        }
    }
    let min_entry = edges
        .iter()
        .map(|&(r, c, _)| s0.get(r, c))
        .fold(f64::INFINITY, f64::min);
    if !(0.0..=min_entry).contains(&delta) {
        return Err(LabError::InvalidArgument(format!(
            "delta {delta} outside [0, {min_entry}]"
        )));
    }
    let mut out = s0.as_array().clone();
    for (r, c, sign) in edges {
        out[[r, c]] += sign * delta;
    }
    Matrix::from_array(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub name: &'static str,
    pub passed: bool,
    /// Largest deviation from the clause's target.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub clauses: Vec<Clause>,
    /// `2δ²/k`
    pub expected_variance: f64,
    /// Variance of each cycle row, in cycle order.
    pub cycle_row_variances: Vec<f64>,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Clause> {
        self.clauses.iter().filter(|c| !c.passed).collect()
    }
}

/// Population variance of a row over the support of `pattern`.
fn support_variance(m: &Matrix, pattern: &Matrix, row: usize) -> f64 {
    let values: Vec<f64> = (0..m.cols())
        .filter(|&j| pattern.get(row, j) != 0.0)
        .map(|j| m.get(row, j))
        .collect();
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

fn clause(name: &'static str, deviations: impl Iterator<Item = f64>) -> Clause {
    let max_deviation = deviations.fold(0.0, f64::max);
    Clause {
        name,
        passed: max_deviation <= CERT_TOL,
        max_deviation,
    }
}

/// Checks the four clauses: unit row sums, unchanged column sums, `2δ²/k`
/// variance on cycle rows, unchanged variance elsewhere. Row variances are
/// taken over the support of `s0`.
pub fn certify_lemma1(
    s0: &Matrix,
    s1: &Matrix,
    cycle: &Cycle,
    delta: f64,
    k: usize,
) -> Result<Certificate> {
    if s0.shape() != s1.shape() {
        return Err(LabError::Shape(format!(
            "{:?} vs {:?}",
            s0.shape(),
            s1.shape()
        )));
    }
    if k == 0 {
        return Err(LabError::InvalidArgument("k must be positive".into()));
    }
    let (rows, cols) = s0.shape();
    let a0 = s0.as_array();
    let a1 = s1.as_array();
    let on_cycle: BTreeSet<usize> = cycle.rows.iter().copied().collect();
    let expected = 2.0 * delta * delta / k as f64;
    let cycle_row_variances: Vec<f64> = cycle
        .rows
        .iter()
        .map(|&r| support_variance(s1, s0, r))
        .collect();

    let clauses = vec![
        clause(
            "row sums equal 1",
            a1.rows().into_iter().map(|r| (r.sum() - 1.0).abs()),
        ),
        clause(
            "column sums unchanged",
            (0..cols).map(|j| (a1.column(j).sum() - a0.column(j).sum()).abs()),
        ),
        clause(
            "cycle-row variance equals 2δ²/k",
            cycle_row_variances.iter().map(|v| (v - expected).abs()),
        ),
        clause(
            "off-cycle variance unchanged",
            (0..rows)
                .filter(|r| !on_cycle.contains(r))
                .map(|r| (support_variance(s1, s0, r) - support_variance(s0, s0, r)).abs()),
        ),
    ];
    Ok(Certificate {
        clauses,
        expected_variance: expected,
        cycle_row_variances,
    })
}

/// True iff the two index sets have equal size and are disjoint.
pub fn certify_lemma2(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> bool {
    a.len() == b.len() && a.is_disjoint(b)
}

/// A balanced support, its uniform score matrix, and (when the support graph
/// has one) a cycle-perturbed copy.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaInstance {
    pub tokens: usize,
    pub experts: usize,
    pub k: usize,
    pub delta: f64,
    pub support: Matrix,
    pub s0: Matrix,
    /// Equals `s0` when no cycle exists.
    pub s1: Matrix,
    pub cycle: Option<Cycle>,
}

impl LemmaInstance {
    pub fn build(tokens: usize, experts: usize, k: usize, delta: f64) -> Result<Self> {
        if k < 2 {
            return Err(LabError::InvalidArgument(
                "the construction needs k >= 2: with one expert per token every row is a single 1 and has no variance to raise"
                    .into(),
            ));
        }
        if tokens == 0 {
            return Err(LabError::InvalidArgument("need at least one token".into()));
        }
        let support = build_balanced_support(tokens, experts, k)?;
        if !(0.0..=1.0 / k as f64).contains(&delta) {
            return Err(LabError::InvalidArgument(format!(
                "delta {delta} outside [0, 1/k]"
            )));
        }
        let s0 = Matrix::from_array(support.as_array() / k as f64)?;
        let cycle = find_cycle(&support);
        let s1 = match &cycle {
            Some(c) => perturb_cycle(&s0, c, delta)?,
            None => s0.clone(),
        };
        Ok(Self {
            tokens,
            experts,
            k,
            delta,
            support,
            s0,
            s1,
            cycle,
        })
    }

    /// `None` when the support graph is a forest.
    pub fn certify(&self) -> Option<Result<Certificate>> {
        self.cycle
            .as_ref()
            .map(|c| certify_lemma1(&self.s0, &self.s1, c, self.delta, self.k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub tokens: usize,
    pub experts: usize,
    pub k: usize,
    /// `None` for forest supports.
    pub certificate: Option<Certificate>,
}

/// Every `(N, n, k)` with `2 ≤ N ≤ max_tokens`, `2 ≤ k ≤ n ≤ max_experts`.
pub fn lemma_grid(max_tokens: usize, max_experts: usize, delta: f64) -> Result<Vec<SweepEntry>> {
    let mut cases = Vec::new();
    for tokens in 2..=max_tokens {
        for experts in 2..=max_experts {
            for k in 2..=experts {
                cases.push((tokens, experts, k));
            }
        }
    }
    cases
        .into_par_iter()
        .map(|(tokens, experts, k)| {
            let instance = LemmaInstance::build(tokens, experts, k, delta)?;
            Ok(SweepEntry {
                tokens,
                experts,
                k,
                certificate: instance.certify().transpose()?,
            })
        })
        .collect()
}
