//! Throughput-maximizing allocation of a resource budget across speculative tasks.
//!
//! For a fixed number `M` of candidate tasks, stationarity of the Lagrangian gives
//! `w_i = F⁻¹(μ/p_i)` with `μ = -λ ≥ 0`, and `μ` is fixed by the budget. The number of
//! funded tasks is then chosen by scanning `M`.
//!
//! Tasks whose share would fall below `w_lo` get nothing. For a prefix of `K` tasks the
//! predicate "the K-th task is not pushed below `w_lo`" is monotone in `K`, so the
//! largest fundable prefix `K*` is found by bisection and the scan only covers
//! `1..=K*`; larger `M` reproduce the `K*` solution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::CostModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("task distribution is empty")]
    EmptyDistribution,
    #[error("task probability {0} at index {1} is not in (0, 1]")]
    InvalidProbability(f64, usize),
    #[error("task utility {0} at index {1} must be finite and positive")]
    InvalidUtility(f64, usize),
    #[error("budget must be finite and positive, got {0}")]
    InvalidBudget(f64),
    #[error("task count {m} must lie in 1..={len}")]
    InvalidTaskCount { m: usize, len: usize },
    #[error("share {0} at index {1} is negative or not finite")]
    InvalidShare(f64, usize),
    #[error("{shares} shares given for {tasks} tasks")]
    TooManyShares { shares: usize, tasks: usize },
    #[error("could not bracket the Lagrange multiplier: {0}")]
    NoBracket(String),
}

pub type Result<T> = std::result::Result<T, AllocError>;

/// Task probabilities (or utilities), sorted non-increasing.
///
/// Sorting is stable, so tasks with equal probability keep their input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskProbabilityDistribution {
    p: Vec<f64>,
}

impl TaskProbabilityDistribution {
    /// Probabilities must lie in `(0, 1]`.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        for (i, &x) in p.iter().enumerate() {
            if !(x > 0.0 && x <= 1.0) {
                return Err(AllocError::InvalidProbability(x, i));
            }
        }
        Ok(Self::sorted(p))
    }

    /// Utility-weighted values: any finite positive number.
    pub fn with_utilities(p: Vec<f64>) -> Result<Self> {
        for (i, &x) in p.iter().enumerate() {
            if !(x > 0.0 && x.is_finite()) {
                return Err(AllocError::InvalidUtility(x, i));
            }
        }
        Ok(Self::sorted(p))
    }

    fn sorted(mut p: Vec<f64>) -> Self {
        p.sort_by(|a, b| b.total_cmp(a));
        TaskProbabilityDistribution { p }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.p
    }
}

/// Result of an allocation: shares are aligned with the sorted probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Number of tasks that receive a non-zero share.
    pub m_star: usize,
    pub w: Vec<f64>,
    /// Lagrange multiplier `λ ≤ 0`; absent for baseline allocators.
    pub lambda: Option<f64>,
    pub expected_throughput: f64,
}

impl Allocation {
    fn empty(len: usize) -> Self {
        Allocation {
            m_star: 0,
            w: vec![0.0; len],
            lambda: None,
            expected_throughput: 0.0,
        }
    }

    pub fn total_resources(&self) -> f64 {
        self.w.iter().sum()
    }
}

/// Solution of the budget equation for a fixed candidate count.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSolution {
    pub lambda: f64,
    /// Shares for the first `M` tasks; zeros mark tasks dropped below `w_lo`.
    pub shares: Vec<f64>,
    pub funded: usize,
}

/// Best single share size applied to the top `⌊N/w⌋` tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantAllocation {
    pub w_best: f64,
    pub tasks: usize,
    pub throughput: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanStrategy {
    /// Evaluate every `M` in `1..=K*`.
    #[default]
    Linear,
    /// Integer ternary search over `M`; exact only when throughput is unimodal in `M`.
    Unimodal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocatorOptions {
    pub scan: ScanStrategy,
    /// Relative tolerance on the budget residual.
    pub budget_tol: f64,
}

impl Default for AllocatorOptions {
    fn default() -> Self {
        AllocatorOptions {
            scan: ScanStrategy::Linear,
            budget_tol: 1e-10,
        }
    }
}

/// `Σ p_i / T(w_i)` over tasks with a positive share.
pub fn expected_throughput(
    dist: &TaskProbabilityDistribution,
    w: &[f64],
    model: &CostModel,
) -> Result<f64> {
    if w.len() > dist.len() {
        return Err(AllocError::TooManyShares {
            shares: w.len(),
            tasks: dist.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&p, &wi)) in dist.p.iter().zip(w).enumerate() {
        if !(wi >= 0.0 && wi.is_finite()) {
            return Err(AllocError::InvalidShare(wi, i));
        }
        if wi > 0.0 {
            total += p / model.time_unchecked(wi);
        }
    }
    Ok(total)
}

fn check_budget(n: f64) -> Result<()> {
    if n.is_finite() && n > 0.0 {
        Ok(())
    } else {
        Err(AllocError::InvalidBudget(n))
    }
}

/// Runs of equal probability, so tasks with identical `p` share one inversion.
struct Groups {
    values: Vec<f64>,
    // Exclusive prefix task counts: group g covers tasks starts[g]..starts[g+1].
    starts: Vec<usize>,
}

impl Groups {
    fn new(p: &[f64]) -> Self {
        let mut values = Vec::new();
        let mut starts = Vec::new();
        for (i, &x) in p.iter().enumerate() {
            if values.last() != Some(&x) {
                values.push(x);
                starts.push(i);
            }
        }
        starts.push(p.len());
        Groups { values, starts }
    }

    /// Iterates `(p, count)` over the first `m` tasks.
    fn prefix(&self, m: usize) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.values
            .iter()
            .enumerate()
            .take_while(move |&(g, _)| self.starts[g] < m)
            .map(move |(g, &p)| (p, self.starts[g + 1].min(m) - self.starts[g]))
    }
}

struct Solver<'a> {
    model: &'a CostModel,
    groups: Groups,
    p: &'a [f64],
    budget: f64,
    tol: f64,
}

impl<'a> Solver<'a> {
    fn new(dist: &'a TaskProbabilityDistribution, budget: f64, model: &'a CostModel, tol: f64) -> Self {
        Solver {
            model,
            groups: Groups::new(&dist.p),
            p: &dist.p,
            budget,
            tol,
        }
    }

    fn target(&self, m: usize) -> f64 {
        self.budget.min(m as f64 * self.model.w_max())
    }

    /// Share for a task of probability `p` at multiplier `mu`, clamped to the domain.
    #[inline]
    fn share(&self, mu: f64, p: f64) -> f64 {
        self.model.inverse_unchecked(mu / p)
    }

    /// Budget used by the first `m` tasks and its derivative in `mu`.
    fn budget_used(&self, mu: f64, m: usize) -> (f64, f64) {
        let mut total = 0.0;
        let mut slope = 0.0;
        for (p, count) in self.groups.prefix(m) {
            let (w, fp) = self.model.inverse_with_slope(mu / p);
            total += count as f64 * w;
            // dw/dmu = 1 / (p F'(w)); zero when the share is saturated.
            if fp < 0.0 {
                slope += count as f64 / (p * fp);
            }
        }
        (total, slope)
    }

    /// Multiplier `mu ≥ 0` with every one of the first `m` tasks funded (clamped to
    /// `[w_lo, w_max]`) and the budget met. `None` if `m·w_lo` already exceeds it.
    fn solve_mu(&self, m: usize, hint: f64) -> Result<Option<f64>> {
        let target = self.target(m);
        let w_lo = self.model.w_lo();
        if m as f64 * w_lo > target * (1.0 + 1e-12) {
            return Ok(None);
        }
        if self.budget >= m as f64 * self.model.w_max() {
            return Ok(Some(0.0));
        }
        let tol = self.tol * target;
        // At mu_hi every task sits at w_lo, at mu = 0 every task sits at w_max.
        let mu_cap = self.p[0] * self.model.efficiency_at_lower_bound();
        let (mut lo, mut hi) = (0.0, mu_cap);
        let mut mu = if hint > 0.0 && hint < mu_cap { hint } else { 0.5 * mu_cap };
        for _ in 0..200 {
            let (used, slope) = self.budget_used(mu, m);
            let r = used - target;
            if r.abs() <= tol {
                return Ok(Some(mu));
            }
            if r > 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            if hi - lo <= 1e-15 * hi.max(f64::MIN_POSITIVE) {
                return Ok(Some(0.5 * (lo + hi)));
            }
            let mut next = if slope < 0.0 { mu - r / slope } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            mu = next;
        }
        Err(AllocError::NoBracket(format!(
            "budget residual did not converge for M={m}, N={}",
            self.budget
        )))
    }

    /// The K-th task (1-based) is not pushed below `w_lo` by the K-prefix solution: at
    /// the multiplier that puts it exactly at `w_lo`, the prefix fits in the budget.
    fn prefix_fundable(&self, k: usize) -> bool {
        let mu = self.p[k - 1] * self.model.efficiency_at_lower_bound() * (1.0 + 1e-12);
        self.budget_used(mu, k).0 <= self.target(k) * (1.0 + 1e-12)
    }

    /// Largest fundable prefix length (0 if even one task cannot be funded).
    fn largest_fundable(&self) -> Result<usize> {
        if !self.prefix_fundable(1) {
            return Ok(0);
        }
        let (mut lo, mut hi) = (1, self.p.len());
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if self.prefix_fundable(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        Ok(lo)
    }

    fn throughput(&self, mu: f64, m: usize) -> f64 {
        self.groups
            .prefix(m)
            .map(|(p, c)| c as f64 * p / self.model.time_unchecked(self.share(mu, p)))
            .sum()
    }

    fn evaluate(&self, m: usize, hint: f64) -> Result<(f64, f64)> {
        let mu = self.solve_mu(m, hint)?.ok_or_else(|| {
            AllocError::NoBracket(format!("M={m} tasks cannot all be funded"))
        })?;
        Ok((mu, self.throughput(mu, m)))
    }
}

/// Solves `Σ_i F⁻¹(-λ/p_i) = min(N, M·w_max)` over the first `M` tasks.
///
/// Trailing tasks whose share would fall below `w_lo` are dropped (share 0) and the
/// budget is enforced over the remaining ones.
pub fn solve_lambda(
    dist: &TaskProbabilityDistribution,
    m: usize,
    budget: f64,
    model: &CostModel,
) -> Result<LambdaSolution> {
    check_budget(budget)?;
    if m == 0 || m > dist.len() {
        return Err(AllocError::InvalidTaskCount { m, len: dist.len() });
    }
    let solver = Solver::new(dist, budget, model, AllocatorOptions::default().budget_tol);
    // Largest fundable prefix within the first m tasks.
    let funded = {
        let (mut lo, mut hi) = (0usize, m);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if solver.prefix_fundable(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    };
    let mut shares = vec![0.0; m];
    if funded == 0 {
        return Ok(LambdaSolution {
            lambda: -(dist.p[0] * model.efficiency_at_lower_bound()),
            shares,
            funded: 0,
        });
    }
    let (mu, _) = solver.evaluate(funded, 0.0)?;
    for (s, &p) in shares.iter_mut().zip(&dist.p[..funded]) {
        *s = solver.share(mu, p);
    }
    Ok(LambdaSolution {
        lambda: -mu,
        shares,
        funded,
    })
}

/// Allocation maximizing expected throughput over the candidate count `M`.
pub fn optimal_allocation(
    dist: &TaskProbabilityDistribution,
    budget: f64,
    model: &CostModel,
) -> Result<Allocation> {
    optimal_allocation_with(dist, budget, model, &AllocatorOptions::default())
}

pub fn optimal_allocation_with(
    dist: &TaskProbabilityDistribution,
    budget: f64,
    model: &CostModel,
    opts: &AllocatorOptions,
) -> Result<Allocation> {
    if dist.is_empty() {
        return Err(AllocError::EmptyDistribution);
    }
    check_budget(budget)?;
    let solver = Solver::new(dist, budget, model, opts.budget_tol);
    let k_star = solver.largest_fundable()?;
    if k_star == 0 {
        return Ok(Allocation::empty(dist.len()));
    }

    let (best_m, best_mu, best_r) = match opts.scan {
        ScanStrategy::Linear => {
            let mut best = (0usize, 0.0, f64::NEG_INFINITY);
            let mut hint = 0.0;
            for m in 1..=k_star {
                let (mu, r) = solver.evaluate(m, hint)?;
                hint = mu;
                if r > best.2 {
                    best = (m, mu, r);
                }
            }
            best
        }
        ScanStrategy::Unimodal => unimodal_scan(&solver, k_star)?,
    };

    let mut w = vec![0.0; dist.len()];
    for (s, &p) in w.iter_mut().zip(&dist.p[..best_m]) {
        *s = solver.share(best_mu, p);
    }
    Ok(Allocation {
        m_star: best_m,
        w,
        lambda: Some(-best_mu),
        expected_throughput: best_r,
    })
}

fn unimodal_scan(solver: &Solver<'_>, k_star: usize) -> Result<(usize, f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut seen: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut eval = |m: usize| -> Result<(usize, f64, f64)> {
        if let Some(&(mu, r)) = seen.get(&m) {
            return Ok((m, mu, r));
        }
        let hint = seen.range(..m).next_back().or_else(|| seen.range(m..).next()).map_or(0.0, |(_, v)| v.0);
        let (mu, r) = solver.evaluate(m, hint)?;
        seen.insert(m, (mu, r));
        Ok((m, mu, r))
    };
    let (mut lo, mut hi) = (1usize, k_star);
    while hi - lo > 3 {
        let step = ((hi - lo) as f64 * INV_PHI).round() as usize;
        let (m1, m2) = (hi - step, lo + step);
        let (m1, m2) = (m1.min(m2), m1.max(m2).max(m1.min(m2) + 1));
        if eval(m1)?.2 < eval(m2)?.2 {
            lo = m1 + 1;
        } else {
            hi = m2;
        }
    }
    let mut best = eval(lo)?;
    for m in lo + 1..=hi {
        let cand = eval(m)?;
        if cand.2 > best.2 {
            best = cand;
        }
    }
    Ok(best)
}

/// Probability-blind baseline: every task gets `max(1, N/M)` resources (capped at `w_max`),
/// or the first `⌊N⌋` tasks get one resource each when `N < M`.
pub fn naive_allocation(
    dist: &TaskProbabilityDistribution,
    budget: f64,
    model: &CostModel,
) -> Result<Allocation> {
    if dist.is_empty() {
        return Err(AllocError::EmptyDistribution);
    }
    check_budget(budget)?;
    let m = dist.len();
    let (count, share) = if budget >= m as f64 {
        (m, (budget / m as f64).min(model.w_max()))
    } else {
        ((budget.floor() as usize).min(m), 1.0)
    };
    if count == 0 {
        return Ok(Allocation::empty(m));
    }
    let mut w = vec![0.0; m];
    w[..count].iter_mut().for_each(|x| *x = share);
    let t = model.time_unchecked(share);
    let expected_throughput = dist.p[..count].iter().map(|p| p / t).sum();
    Ok(Allocation {
        m_star: count,
        w,
        lambda: None,
        expected_throughput,
    })
}

/// Best throughput achievable when every funded task receives the same share `w`.
///
/// For a fixed task count `n` the throughput `P_n / T(w)` grows with `w`, so the optimum
/// sits at a breakpoint `w = N/n` or at `w_max`; all of them are enumerated.
pub fn best_constant_allocation(
    dist: &TaskProbabilityDistribution,
    budget: f64,
    model: &CostModel,
) -> Result<ConstantAllocation> {
    if dist.is_empty() {
        return Err(AllocError::EmptyDistribution);
    }
    check_budget(budget)?;
    let (w_lo, w_max) = (model.w_lo(), model.w_max());
    let mut best = ConstantAllocation {
        w_best: w_lo,
        tasks: 0,
        throughput: 0.0,
    };
    let mut prefix = 0.0;
    for (k, &p) in dist.p.iter().enumerate() {
        let n = k + 1;
        prefix += p;
        let w = (budget / n as f64).min(w_max);
        if w < w_lo {
            break;
        }
        let r = prefix / model.time_unchecked(w);
        if r > best.throughput {
            best = ConstantAllocation {
                w_best: w,
                tasks: n,
                throughput: r,
            };
        }
    }
    Ok(best)
}

/// Optimal over naive expected throughput.
pub fn boost(dist: &TaskProbabilityDistribution, budget: f64, model: &CostModel) -> Result<f64> {
    let opt = optimal_allocation(dist, budget, model)?;
    let naive = naive_allocation(dist, budget, model)?;
    Ok(ratio(opt.expected_throughput, naive.expected_throughput))
}

pub(crate) fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Largest-remainder rounding of real shares to integer slots with the same floor total.
pub fn integerize(shares: &[f64]) -> Vec<u64> {
    let total: f64 = shares.iter().sum();
    let target = (total + 1e-9).floor() as u64;
    let mut out: Vec<u64> = shares.iter().map(|&w| w.max(0.0).floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (shares[i] - shares[i].floor(), shares[j] - shares[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().take(target.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}
