//! Exact evaluators on full (non-recombining) trees.
//!
//! A tree branches on a finite set of innovation values at every step: the atoms
//! of a discrete lattice (exact expectations) or Gauss-Hermite nodes (Gaussian
//! expectations to quadrature accuracy). GARCH trees never recombine, so the
//! node count is `sum_n b^n` and depths stay small.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::models::{GarchSpec, GarchState, Measure, Representation};

pub const MAX_LATTICE_DEPTH: usize = 12;
pub const MAX_QUADRATURE_DEPTH: usize = 5;
pub const DEFAULT_NODE_BUDGET: u128 = 20_000_000;

/// Discrete innovation law: atoms and their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LatticeSpec {
    /// Checks positivity, unit mass (1e-14) and zero mean (1e-12).
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return domain("lattice needs matching, non-empty support and probabilities");
        }
        if probs.iter().any(|&p| !(p > 0.0)) || support.iter().any(|x| !x.is_finite()) {
            return domain("lattice probabilities must be > 0 and atoms finite");
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > 1e-14 {
            return domain(format!("lattice probabilities sum to {mass}"));
        }
        let l = LatticeSpec { support, probs };
        if l.mean().abs() > 1e-12 {
            return domain(format!("lattice mean is {}", l.mean()));
        }
        Ok(l)
    }

    /// `{-1, +1}` with equal probabilities.
    pub fn rademacher() -> Self {
        LatticeSpec {
            support: vec![-1.0, 1.0],
            probs: vec![0.5, 0.5],
        }
    }

    /// `{-sqrt 3, 0, sqrt 3}` with probabilities `{1/6, 2/3, 1/6}`.
    pub fn three_point() -> Self {
        let r = 3f64.sqrt();
        LatticeSpec {
            support: vec![-r, 0.0, r],
            probs: vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        }
    }

    /// Same probabilities, atoms multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        LatticeSpec {
            support: self.support.iter().map(|x| c * x).collect(),
            probs: self.probs.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(x, p)| x * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(x, p)| p * (x - m) * (x - m))
            .sum()
    }

    /// Innovation bound `max |x|`.
    pub fn bound(&self) -> f64 {
        self.support.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    /// Inverse-CDF draw from a uniform in (0, 1).
    pub fn sample(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for (x, p) in self.support.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *x;
            }
        }
        *self.support.last().expect("non-empty lattice")
    }

    /// `ln E[exp(t x)]`.
    pub fn log_mgf(&self, t: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(x, p)| p * (t * x).exp())
            .sum::<f64>()
            .ln()
    }
}

/// Gauss-Hermite rule for the standard normal law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub n_nodes: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { n_nodes: 15 }
    }
}

impl QuadratureSpec {
    pub fn new(n_nodes: usize) -> Self {
        QuadratureSpec { n_nodes }
    }

    pub fn nodes(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        gauss_hermite(self.n_nodes)
    }
}

/// Nodes and weights integrating polynomials of degree `< 2n` exactly against N(0, 1).
///
/// Golub-Welsch: eigen-decomposition of the Jacobi matrix of the probabilists'
/// Hermite recurrence `x He_k = He_{k+1} + k He_{k-1}`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > 200 {
        return domain(format!("number of Gauss-Hermite nodes must be in 1..=200, got {n}"));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k, k - 1)] = off;
        jacobi[(k - 1, k)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver noise
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok((
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    ))
}

/// How a tree moves from one level to the next.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dynamics {
    /// Physical recursion; branch values are the physical innovations.
    Physical,
    /// Risk-neutral recursion; branch values are `eps_tilde` (unit variance required).
    RiskNeutral(Representation),
    /// `S_n = S_{n-1} exp(sigma_n x - ln E[exp(sigma_n x)])`: prices are exact
    /// martingales under the lattice law, which also drives the variance recursion.
    LatticeMartingale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BranchKind {
    Lattice,
    Quadrature,
}

/// Shape of a tree: branch values, their probabilities, depth and dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpec {
    pub branches: Vec<f64>,
    pub probs: Vec<f64>,
    pub depth: usize,
    pub dynamics: Dynamics,
    pub node_budget: u128,
    kind: BranchKind,
}

impl TreeSpec {
    pub fn lattice(lattice: &LatticeSpec, depth: usize, dynamics: Dynamics) -> Result<Self> {
        if depth > MAX_LATTICE_DEPTH {
            return Err(Error::Resource {
                what: "lattice tree depth".into(),
                requested: depth as u128,
                limit: MAX_LATTICE_DEPTH as u128,
            });
        }
        let t = TreeSpec {
            branches: lattice.support.clone(),
            probs: lattice.probs.clone(),
            depth,
            dynamics,
            node_budget: DEFAULT_NODE_BUDGET,
            kind: BranchKind::Lattice,
        };
        t.check_budget()?;
        Ok(t)
    }

    pub fn quadrature(q: &QuadratureSpec, depth: usize, dynamics: Dynamics) -> Result<Self> {
        if depth > MAX_QUADRATURE_DEPTH {
            return Err(Error::Resource {
                what: "quadrature tree depth".into(),
                requested: depth as u128,
                limit: MAX_QUADRATURE_DEPTH as u128,
            });
        }
        if dynamics == Dynamics::LatticeMartingale {
            return Err(Error::NotApplicable(
                "lattice-martingale dynamics need lattice branches".into(),
            ));
        }
        let (x, w) = q.nodes()?;
        let t = TreeSpec {
            branches: x,
            probs: w,
            depth,
            dynamics,
            node_budget: DEFAULT_NODE_BUDGET,
            kind: BranchKind::Quadrature,
        };
        t.check_budget()?;
        Ok(t)
    }

    pub fn with_node_budget(mut self, budget: u128) -> Result<Self> {
        self.node_budget = budget;
        self.check_budget()?;
        Ok(self)
    }

    /// Total number of nodes `sum_{n=0}^{depth} b^n`.
    pub fn node_count(&self) -> u128 {
        let b = self.branches.len() as u128;
        let mut total = 0u128;
        let mut w = 1u128;
        for _ in 0..=self.depth {
            total = total.saturating_add(w);
            w = w.saturating_mul(b);
        }
        total
    }

    fn check_budget(&self) -> Result<()> {
        let n = self.node_count();
        if n > self.node_budget {
            return Err(Error::Resource {
                what: format!(
                    "tree nodes ({} branches, depth {})",
                    self.branches.len(),
                    self.depth
                ),
                requested: n,
                limit: self.node_budget,
            });
        }
        Ok(())
    }
}

/// Node data of one tree level, stored column-wise. Node `j` of level `n + 1`
/// is child `j % b` of node `j / b` of level `n`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Level {
    pub log_price: Vec<f64>,
    /// `sigma_n^2` of the step into the node (NaN at the root).
    pub variance: Vec<f64>,
    /// `sigma_{n+1}^2`, known at the node.
    pub next_var: Vec<f64>,
    /// Physical innovation of the step into the node.
    pub eps: Vec<f64>,
    /// Branch value of the step into the node (`eps`, `eps_tilde` or lattice atom).
    pub noise: Vec<f64>,
    pub cond_prob: Vec<f64>,
    pub prob: Vec<f64>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.log_price.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_price.is_empty()
    }

    pub fn price(&self, j: usize) -> f64 {
        self.log_price[j].exp()
    }
}

#[derive(Debug, Clone)]
pub struct Tree {
    pub branching: usize,
    pub depth: usize,
    pub dynamics: Dynamics,
    pub innov_var: f64,
    pub levels: Vec<Level>,
}

/// One root-to-leaf path.
#[derive(Debug, Clone, Default)]
pub struct TreePath {
    pub log_prices: Vec<f64>,
    pub variances: Vec<f64>,
    pub eps: Vec<f64>,
    pub noise: Vec<f64>,
    /// Variance of the step after the leaf.
    pub next_var: f64,
}

impl TreePath {
    pub fn terminal_log_price(&self) -> f64 {
        *self.log_prices.last().expect("non-empty path")
    }

    pub fn terminal_price(&self) -> f64 {
        self.terminal_log_price().exp()
    }
}

impl Tree {
    pub fn build(spec: &GarchSpec, tree: &TreeSpec) -> Result<Tree> {
        spec.validate()?;
        let start = GarchState::initial(spec)?;
        Tree::build_from(spec, &start, tree)
    }

    pub fn build_from(spec: &GarchSpec, start: &GarchState, tree: &TreeSpec) -> Result<Tree> {
        tree.check_budget()?;
        let b = tree.branches.len();
        let lattice_var: f64 = tree
            .branches
            .iter()
            .zip(&tree.probs)
            .map(|(x, p)| p * x * x)
            .sum();
        let scale = match (tree.dynamics, tree.kind) {
            (Dynamics::Physical, BranchKind::Quadrature) => spec.innov_var.sqrt(),
            (Dynamics::Physical, BranchKind::Lattice) => {
                if (lattice_var - spec.innov_var).abs() > 1e-12 * spec.innov_var.max(1.0) {
                    return Err(Error::Mismatch(format!(
                        "lattice variance {lattice_var} differs from innovation variance {}",
                        spec.innov_var
                    )));
                }
                1.0
            }
            (Dynamics::RiskNeutral(_), kind) => {
                if spec.innov_var != 1.0 {
                    return Err(Error::NotApplicable(
                        "risk-neutral trees require unit innovation variance".into(),
                    ));
                }
                if kind == BranchKind::Lattice && (lattice_var - 1.0).abs() > 1e-12 {
                    return Err(Error::Mismatch("risk-neutral lattice must have unit variance".into()));
                }
                1.0
            }
            (Dynamics::LatticeMartingale, _) => 1.0,
        };
        let root = Level {
            log_price: vec![start.log_price],
            variance: vec![f64::NAN],
            next_var: vec![start.next_var],
            eps: vec![0.0],
            noise: vec![0.0],
            cond_prob: vec![1.0],
            prob: vec![1.0],
        };
        let mut levels = vec![root];
        let mut frontier = vec![*start];
        for n in 0..tree.depth {
            let prev = &levels[n];
            let width = prev.len() * b;
            let mut lvl = Level {
                log_price: Vec::with_capacity(width),
                variance: Vec::with_capacity(width),
                next_var: Vec::with_capacity(width),
                eps: Vec::with_capacity(width),
                noise: Vec::with_capacity(width),
                cond_prob: Vec::with_capacity(width),
                prob: Vec::with_capacity(width),
            };
            let keep_states = n + 1 < tree.depth;
            let mut next_frontier = Vec::with_capacity(if keep_states { width } else { 0 });
            for (j, st) in frontier.iter().enumerate() {
                for (x, p) in tree.branches.iter().zip(&tree.probs) {
                    let mut s = *st;
                    let var = s.next_var;
                    let eps = match tree.dynamics {
                        Dynamics::Physical => {
                            s.step(spec, Measure::Physical, Representation::LogPrice, scale * x).eps
                        }
                        Dynamics::RiskNeutral(rep) => s.step(spec, Measure::RiskNeutral, rep, *x).eps,
                        Dynamics::LatticeMartingale => {
                            let sigma = var.sqrt();
                            let compensator = log_mgf(&tree.branches, &tree.probs, sigma);
                            s.advance_raw(sigma * x - compensator, *x);
                            s.refresh(spec);
                            *x
                        }
                    };
                    lvl.log_price.push(s.log_price);
                    lvl.variance.push(var);
                    lvl.next_var.push(s.next_var);
                    lvl.eps.push(eps);
                    lvl.noise.push(scale * x);
                    lvl.cond_prob.push(*p);
                    lvl.prob.push(prev.prob[j] * p);
                    if keep_states {
                        next_frontier.push(s);
                    }
                }
            }
            frontier = next_frontier;
            levels.push(lvl);
        }
        Ok(Tree {
            branching: b,
            depth: tree.depth,
            dynamics: tree.dynamics,
            innov_var: spec.innov_var,
            levels,
        })
    }

    pub fn level(&self, n: usize) -> &Level {
        &self.levels[n]
    }

    pub fn leaves(&self) -> &Level {
        &self.levels[self.depth]
    }

    /// Reconstructs the path ending at node `leaf` of the last level.
    pub fn path(&self, leaf: usize, out: &mut TreePath) {
        self.path_to(self.depth, leaf, out)
    }

    /// Path ending at node `j` of level `n`.
    pub fn path_to(&self, n: usize, j: usize, out: &mut TreePath) {
        out.log_prices.resize(n + 1, 0.0);
        out.variances.resize(n, 0.0);
        out.eps.resize(n, 0.0);
        out.noise.resize(n, 0.0);
        out.next_var = self.levels[n].next_var[j];
        let mut idx = j;
        for t in (0..=n).rev() {
            let lvl = &self.levels[t];
            out.log_prices[t] = lvl.log_price[idx];
            if t > 0 {
                out.variances[t - 1] = lvl.variance[idx];
                out.eps[t - 1] = lvl.eps[idx];
                out.noise[t - 1] = lvl.noise[idx];
                idx /= self.branching;
            }
        }
    }

    /// Evaluates `f` on every root-to-leaf path.
    pub fn leaf_values<F: FnMut(&TreePath) -> f64>(&self, mut f: F) -> Vec<f64> {
        let mut path = TreePath::default();
        (0..self.leaves().len())
            .map(|i| {
                self.path(i, &mut path);
                f(&path)
            })
            .collect()
    }

    /// Conditional expectations at level `k` of values given at the last level.
    pub fn rollback(&self, leaf_values: &[f64], k: usize) -> Vec<f64> {
        assert_eq!(leaf_values.len(), self.leaves().len());
        let mut vals = leaf_values.to_vec();
        for n in (k..self.depth).rev() {
            vals = self.step_back(n, &vals);
        }
        vals
    }

    /// `E_n[X]` at every node of level `n` from values at level `n + 1`.
    pub fn step_back(&self, n: usize, child_values: &[f64]) -> Vec<f64> {
        let b = self.branching;
        let cp = &self.levels[n + 1].cond_prob;
        (0..self.levels[n].len())
            .map(|j| (0..b).map(|c| cp[j * b + c] * child_values[j * b + c]).sum())
            .collect()
    }

    /// Probability mass of level `n`.
    pub fn total_mass(&self, n: usize) -> f64 {
        self.levels[n].prob.iter().sum()
    }

    /// Value of the hedging asset at every node of level `n`.
    pub fn asset(&self, n: usize, asset: Asset) -> Vec<f64> {
        match asset {
            Asset::LogPrice => self.levels[n].log_price.clone(),
            Asset::Price => self.levels[n].log_price.iter().map(|s| s.exp()).collect(),
        }
    }
}

fn log_mgf(x: &[f64], p: &[f64], t: f64) -> f64 {
    x.iter().zip(p).map(|(x, p)| p * (t * x).exp()).sum::<f64>().ln()
}

/// Conditional expectations `E_k[f(path)]` for every node at level `k`.
pub fn tree_expectation<F: FnMut(&TreePath) -> f64>(tree: &Tree, f: F, k: usize) -> Result<Vec<f64>> {
    if k > tree.depth {
        return domain(format!("condition time {k} exceeds tree depth {}", tree.depth));
    }
    let leaf = tree.leaf_values(f);
    Ok(tree.rollback(&leaf, k))
}

/// The traded asset of a hedging problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Asset {
    LogPrice,
    Price,
}

/// A generalized strategy on every node of a tree.
///
/// `values[n][j]` is `V_n` at node `j` of level `n`; `xi[n][j]` is the holding
/// `xi_{n+1}` chosen at that node.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeStrategy {
    pub asset: Asset,
    pub values: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

/// Largest violations of the local-risk-minimization characterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostResiduals {
    /// `max |E_n[C_{n+1} - C_n]|`.
    pub martingale: f64,
    /// `max |cov_n(X_{n+1} - X_n, C_{n+1} - C_n)|`.
    pub orthogonality: f64,
}

/// Local risk minimization on a tree by the backward recursion
/// `xi = cov_n(V_{n+1}, dX) / var_n(dX)`, `V_n = E_n[V_{n+1}] - xi E_n[dX]`.
pub fn lrm_tree(tree: &Tree, terminal_values: &[f64], asset: Asset) -> TreeStrategy {
    let d = tree.depth;
    let b = tree.branching;
    let mut values = vec![Vec::new(); d + 1];
    let mut xi = vec![Vec::new(); d];
    values[d] = terminal_values.to_vec();
    let mut x_child = tree.asset(d, asset);
    for n in (0..d).rev() {
        let x_node = tree.asset(n, asset);
        let cp = &tree.levels[n + 1].cond_prob;
        let width = tree.levels[n].len();
        let mut v = vec![0.0; width];
        let mut h = vec![0.0; width];
        for j in 0..width {
            let range = j * b..(j + 1) * b;
            let mut m = 0.0;
            let mut vbar = 0.0;
            for c in range.clone() {
                m += cp[c] * x_child[c];
                vbar += cp[c] * values[n + 1][c];
            }
            let mut cov = 0.0;
            let mut var = 0.0;
            for c in range {
                let dx = x_child[c] - m;
                cov += cp[c] * (values[n + 1][c] - vbar) * dx;
                var += cp[c] * dx * dx;
            }
            let ratio = if var > 0.0 { cov / var } else { 0.0 };
            h[j] = ratio;
            v[j] = vbar - ratio * (m - x_node[j]);
        }
        values[n] = v;
        xi[n] = h;
        x_child = x_node;
    }
    TreeStrategy {
        asset,
        values,
        xi,
    }
}

impl TreeStrategy {
    /// Cost-process martingale and orthogonality residuals at every node.
    pub fn cost_residuals(&self, tree: &Tree) -> CostResiduals {
        let b = tree.branching;
        let mut out = CostResiduals {
            martingale: 0.0,
            orthogonality: 0.0,
        };
        let mut x_child;
        for n in 0..tree.depth {
            let x_node = tree.asset(n, self.asset);
            x_child = tree.asset(n + 1, self.asset);
            let cp = &tree.levels[n + 1].cond_prob;
            for j in 0..tree.levels[n].len() {
                let range = j * b..(j + 1) * b;
                let mut m = 0.0;
                let mut mc = 0.0;
                for c in range.clone() {
                    let dc = self.values[n + 1][c] - self.values[n][j] - self.xi[n][j] * (x_child[c] - x_node[j]);
                    m += cp[c] * x_child[c];
                    mc += cp[c] * dc;
                }
                let mut cov = 0.0;
                for c in range {
                    let dc = self.values[n + 1][c] - self.values[n][j] - self.xi[n][j] * (x_child[c] - x_node[j]);
                    cov += cp[c] * (x_child[c] - m) * (dc - mc);
                }
                out.martingale = out.martingale.max(mc.abs());
                out.orthogonality = out.orthogonality.max(cov.abs());
            }
        }
        out
    }

    /// Cost increments `C_{n+1} - C_n` at every node of level `n + 1`.
    fn cost_increments(&self, tree: &Tree, n: usize) -> Vec<f64> {
        let b = tree.branching;
        let x_node = tree.asset(n, self.asset);
        let x_child = tree.asset(n + 1, self.asset);
        (0..tree.levels[n + 1].len())
            .map(|c| {
                let j = c / b;
                self.values[n + 1][c] - self.values[n][j] - self.xi[n][j] * (x_child[c] - x_node[j])
            })
            .collect()
    }

    /// Local risk `R_n = E_n[(C_{n+1} - C_n)^2]` at every node of levels `0..depth`.
    pub fn local_risk(&self, tree: &Tree) -> Vec<Vec<f64>> {
        (0..tree.depth)
            .map(|n| {
                let inc: Vec<f64> = self.cost_increments(tree, n).iter().map(|d| d * d).collect();
                tree.step_back(n, &inc)
            })
            .collect()
    }

    /// Remaining risk `R^R_n = E_n[(C_T - C_n)^2]` at every node of levels `0..=depth`.
    pub fn remaining_risk(&self, tree: &Tree) -> Vec<Vec<f64>> {
        let d = tree.depth;
        let b = tree.branching;
        // C_T - C_n accumulated along each leaf path
        let incs: Vec<Vec<f64>> = (0..d).map(|n| self.cost_increments(tree, n)).collect();
        (0..=d)
            .map(|n| {
                let leaf: Vec<f64> = (0..tree.leaves().len())
                    .map(|i| {
                        let mut idx = i;
                        let mut acc = 0.0;
                        for m in (n..d).rev() {
                            acc += incs[m][idx];
                            idx /= b;
                        }
                        acc * acc
                    })
                    .collect();
                tree.rollback(&leaf, n)
            })
            .collect()
    }
}

/// `E[(H - v0 - sum_k xi_k (X_k - X_{k-1}))^2]` on the tree for a self-financing
/// strategy with holdings `xi[n][j]` chosen at node `j` of level `n`.
pub fn mean_square_hedging_error(
    tree: &Tree,
    payoff: &[f64],
    v0: f64,
    xi: &[Vec<f64>],
    asset: Asset,
) -> f64 {
    let d = tree.depth;
    let b = tree.branching;
    let xs: Vec<Vec<f64>> = (0..=d).map(|n| tree.asset(n, asset)).collect();
    let leaves = tree.leaves();
    (0..leaves.len())
        .map(|i| {
            let mut idx = i;
            let mut gains = 0.0;
            for n in (0..d).rev() {
                let parent = idx / b;
                gains += xi[n][parent] * (xs[n + 1][idx] - xs[n][parent]);
                idx = parent;
            }
            let e = payoff[i] - v0 - gains;
            leaves.prob[i] * e * e
        })
        .sum()
}

/// Outcome of the minimal-martingale-measure checks on a lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmmReport {
    pub exists: bool,
    pub innovation_bound: f64,
    pub drift_bound: f64,
    /// `sigma^2 sqrt(omega) / B`.
    pub threshold: f64,
    pub min_factor: f64,
    pub all_factors_positive: bool,
    /// `|sum_leaves p Z_T - 1|`.
    pub mass_error: f64,
    /// `max |E_n[Z_{n+1}/Z_n] - 1|` and `max |Ehat_n[s_{n+1}] - s_n|`.
    pub density_martingale_error: f64,
    pub price_martingale_error: f64,
    /// Per payoff, `max |V_k - Ehat_k[h]|` over all nodes.
    pub value_errors: Vec<f64>,
    pub passed: bool,
}

/// Checks the minimal martingale measure on a physical lattice tree of depth `depth`:
/// factor positivity, unit mass, martingale property of `s` under the new measure
/// and `V_k = Ehat_k[h]` for each payoff, with `V` from [`lrm_tree`] on log-prices.
pub fn verify_mmm(
    spec: &GarchSpec,
    lattice: &LatticeSpec,
    depth: usize,
    payoffs: &[crate::hedging::Payoff],
) -> Result<MmmReport> {
    let tree = Tree::build(spec, &TreeSpec::lattice(lattice, depth, Dynamics::Physical)?)?;
    let k_bound = lattice.bound();
    let b_drift = crate::measure::observed_drift_bound(spec, &tree.levels[1..].iter().flat_map(|l| l.variance.iter().copied()).collect::<Vec<_>>());
    let threshold = if b_drift > 0.0 {
        spec.innov_var * spec.omega.sqrt() / b_drift
    } else {
        f64::INFINITY
    };
    let exists = k_bound < threshold;

    // factors f_n at every node of levels 1..=depth
    let factors: Vec<Vec<f64>> = (0..=depth)
        .map(|n| {
            let lvl = &tree.levels[n];
            if n == 0 {
                return vec![1.0];
            }
            (0..lvl.len())
                .map(|j| crate::measure::mmm_factor(spec, lvl.variance[j], lvl.eps[j]))
                .collect()
        })
        .collect();
    let min_factor = factors[1..]
        .iter()
        .flatten()
        .fold(f64::INFINITY, |a, &f| a.min(f));
    let all_positive = min_factor > 0.0;

    let bw = tree.branching;
    // Z at every node
    let mut z: Vec<Vec<f64>> = vec![vec![1.0]];
    for n in 1..=depth {
        let prev = &z[n - 1];
        let level: Vec<f64> = factors[n]
            .iter()
            .enumerate()
            .map(|(c, f)| prev[c / bw] * f)
            .collect();
        z.push(level);
    }
    let leaves = tree.leaves();
    let mass: f64 = leaves.prob.iter().zip(&z[depth]).map(|(p, z)| p * z).sum();
    let mass_error = (mass - 1.0).abs();

    let mut density_err: f64 = 0.0;
    let mut price_err: f64 = 0.0;
    for n in 0..depth {
        let ef = tree.step_back(n, &factors[n + 1]);
        let fs: Vec<f64> = factors[n + 1]
            .iter()
            .zip(&tree.levels[n + 1].log_price)
            .map(|(f, s)| f * s)
            .collect();
        let es = tree.step_back(n, &fs);
        for j in 0..tree.levels[n].len() {
            density_err = density_err.max((ef[j] - 1.0).abs());
            let s = tree.levels[n].log_price[j];
            price_err = price_err.max((es[j] - s).abs() / s.abs().max(1.0));
        }
    }

    let mut value_errors = Vec::with_capacity(payoffs.len());
    for payoff in payoffs {
        let h: Vec<f64> = leaves.log_price.iter().map(|&s| payoff.eval_log(s)).collect();
        let scale = h.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let strat = lrm_tree(&tree, &h, Asset::LogPrice);
        let zh: Vec<f64> = h.iter().zip(&z[depth]).map(|(h, z)| h * z).collect();
        let mut err: f64 = 0.0;
        for k in 0..=depth {
            let num = tree.rollback(&zh, k);
            for j in 0..num.len() {
                let ehat = num[j] / z[k][j];
                err = err.max((strat.values[k][j] - ehat).abs() / scale);
            }
        }
        value_errors.push(err);
    }
    let tol = 1e-12;
    let passed = exists
        && all_positive
        && mass_error <= tol
        && density_err <= tol
        && price_err <= tol
        && value_errors.iter().all(|&e| e <= tol);
    Ok(MmmReport {
        exists,
        innovation_bound: k_bound,
        drift_bound: b_drift,
        threshold,
        min_factor,
        all_factors_positive: all_positive,
        mass_error,
        density_martingale_error: density_err,
        price_martingale_error: price_err,
        value_errors,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hedging::Payoff;
    use crate::models::GarchSpec;

    #[test]
    fn gauss_hermite_reproduces_normal_moments() {
        for n in [1usize, 2, 5, 15, 20] {
            let (x, w) = gauss_hermite(n).unwrap();
            for k in 0..(2 * n) as i32 {
                let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
                // E[Z^k] = (k-1)!! for even k
                let exact = if k % 2 == 1 {
                    0.0
                } else {
                    (1..k).step_by(2).map(|i| i as f64).product::<f64>()
                };
                // odd moments are judged against the scale of the next even one
                let scale: f64 = (1..(k | 1)).step_by(2).map(|i| i as f64).product();
                assert!(
                    (m - exact).abs() <= 1e-10 * scale.max(1.0),
                    "n={n} k={k} m={m} exact={exact}"
                );
            }
        }
    }

    #[test]
    fn lattice_validation() {
        assert!(LatticeSpec::new(vec![-1.0, 1.0], vec![0.5, 0.5]).is_ok());
        assert!(LatticeSpec::new(vec![-1.0, 2.0], vec![0.5, 0.5]).is_err());
        assert!(LatticeSpec::new(vec![-1.0, 1.0], vec![0.5, 0.6]).is_err());
        let t = LatticeSpec::three_point();
        assert!((t.variance() - 1.0).abs() < 1e-12);
        assert_eq!(LatticeSpec::rademacher().sample(0.25), -1.0);
        assert_eq!(LatticeSpec::rademacher().sample(0.75), 1.0);
    }

    fn flat(mu: f64) -> GarchSpec {
        GarchSpec::asymmetric(1.0, vec![0.0], vec![0.0], 0.0, mu).with_initial_variance(1.0)
    }

    #[test]
    fn functional_one_and_martingale() {
        let spec = GarchSpec::duan_reference();
        let ts = TreeSpec::quadrature(&QuadratureSpec::new(7), 3, Dynamics::RiskNeutral(Representation::LogPrice)).unwrap();
        let tree = Tree::build(&spec, &ts).unwrap();
        for k in 0..=3 {
            assert!((tree.total_mass(k) - 1.0).abs() < 1e-14);
            let ones = tree_expectation(&tree, |_| 1.0, k).unwrap();
            assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-13));
            let s = tree_expectation(&tree, |p| p.terminal_log_price(), k).unwrap();
            for (j, v) in s.iter().enumerate() {
                assert!((v - tree.levels[k].log_price[j]).abs() < 1e-12);
            }
        }
        let lat = Tree::build(&flat(0.0), &TreeSpec::lattice(&LatticeSpec::three_point(), 6, Dynamics::Physical).unwrap()).unwrap();
        for k in 0..=6 {
            assert!((lat.total_mass(k) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn binary_call_matches_hand_enumeration() {
        // sigma = 0.1 flat, zero drift: s_3 = ln 100 + 0.1 * (e1 + e2 + e3)
        let spec = GarchSpec::asymmetric(0.01, vec![0.0], vec![0.0], 0.0, 0.0)
            .with_initial_variance(0.01);
        let tree = Tree::build(&spec, &TreeSpec::lattice(&LatticeSpec::rademacher(), 3, Dynamics::Physical).unwrap()).unwrap();
        let k = 100.0;
        let v = tree_expectation(&tree, |p| (p.terminal_price() - k).max(0.0), 0).unwrap();
        // eight leaves: three ups once, two ups three times, the rest out of the money
        let up3 = 100.0 * 0.3f64.exp() - k;
        let up2 = 100.0 * 0.1f64.exp() - k;
        let hand = (up3 + 3.0 * up2) / 8.0;
        assert!((v[0] - hand).abs() < 1e-12);
    }

    #[test]
    fn martingale_lattice_prices_are_martingales() {
        let spec = GarchSpec::duan(1e-4, vec![0.2], vec![0.7], 0.0);
        let tree = Tree::build(&spec, &TreeSpec::lattice(&LatticeSpec::three_point(), 4, Dynamics::LatticeMartingale).unwrap()).unwrap();
        for k in 0..4 {
            let s = tree_expectation(&tree, |p| p.terminal_price(), k).unwrap();
            for (j, v) in s.iter().enumerate() {
                assert!((v - tree.levels[k].price(j)).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn lrm_tree_of_asset_is_delta_one() {
        let spec = GarchSpec::duan(1e-4, vec![0.2], vec![0.7], 0.0);
        let tree = Tree::build(&spec, &TreeSpec::lattice(&LatticeSpec::three_point(), 3, Dynamics::LatticeMartingale).unwrap()).unwrap();
        let h: Vec<f64> = tree.leaves().log_price.iter().map(|s| s.exp()).collect();
        let st = lrm_tree(&tree, &h, Asset::Price);
        for n in 0..3 {
            assert!(st.xi[n].iter().all(|x| (x - 1.0).abs() < 1e-10));
        }
        assert!((st.values[0][0] - 100.0).abs() < 1e-10);
        let r = st.cost_residuals(&tree);
        assert!(r.martingale < 1e-12 && r.orthogonality < 1e-12);
        assert!(st.local_risk(&tree).iter().flatten().all(|v| v.abs() < 1e-18));
    }

    #[test]
    fn node_budget_is_reported() {
        let err = TreeSpec::quadrature(&QuadratureSpec::new(40), 5, Dynamics::Physical);
        match err {
            Err(Error::Resource { requested, .. }) => assert!(requested > 100_000_000),
            other => panic!("expected resource error, got {other:?}"),
        }
        assert!(TreeSpec::lattice(&LatticeSpec::rademacher(), 13, Dynamics::Physical).is_err());
    }

    #[test]
    fn mmm_zero_drift_is_physical_measure() {
        let spec = flat(0.0);
        let payoffs = [Payoff::call(1.0), Payoff::put(1.0)];
        let r = verify_mmm(&spec, &LatticeSpec::rademacher(), 3, &payoffs).unwrap();
        assert!(r.exists && r.passed);
        assert_eq!(r.min_factor, 1.0);
    }

    #[test]
    fn mmm_small_drift_passes() {
        // omega = 1e-4, drift 2e-3, Rademacher: K = 1 < 1 * 0.01 / 0.002 = 5
        let spec = GarchSpec::asymmetric(1e-4, vec![0.1], vec![0.8], 0.3, 2e-3);
        let payoffs = [Payoff::call(100.0), Payoff::put(100.0)];
        let r = verify_mmm(&spec, &LatticeSpec::rademacher(), 6, &payoffs).unwrap();
        assert!(r.exists, "{r:?}");
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mmm_large_drift_detects_negative_factor() {
        // sigma_k = 1, factor 1 - 1.5 eps vanishes below zero for eps = +1
        let spec = flat(1.5);
        let r = verify_mmm(&spec, &LatticeSpec::rademacher(), 2, &[Payoff::call(1.0)]).unwrap();
        assert!(!r.exists);
        assert!(!r.all_factors_positive);
        assert!((r.min_factor + 0.5).abs() < 1e-15);
        assert!(!r.passed);
    }
}
