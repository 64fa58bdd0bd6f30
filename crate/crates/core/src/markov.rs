//! Discrete-time Markov chains over segment endpoints, and the probability that a
//! segment generated in a given state is consumed by a trajectory within a horizon.
//!
//! Conventions used throughout:
//!
//! * A trajectory of horizon `N` starting at `i` is `X_0 = i, X_1, ..., X_N`.
//! * `v_j` counts visits to `j` at positions `X_1..=X_N` (the start is not a visit).
//! * A step out of `X_t` consumes one segment that starts in `X_t`, so a horizon of `N`
//!   segments consumes the states `X_0..=X_{N-1}`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Geometric;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::TaskProbabilityDistribution;

/// Rows must sum to one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Largest chain handled by the analytic recursions.
pub const DEFAULT_ANALYTIC_CAP: usize = 200;
/// Table entries below this probability are dropped.
pub const DEFAULT_CUTOFF: f64 = 1e-6;
pub const DEFAULT_SAMPLES: usize = 1000;
/// Default horizon in units of the expected escape time of the current state.
pub const DEFAULT_HORIZON_ESCAPES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("transition matrix must be square and non-empty, got {rows} rows and {cols} columns in row {row}")]
    NotSquare { rows: usize, cols: usize, row: usize },
    #[error("entry ({row}, {col}) = {value} is negative or not finite")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("state {index} out of range for a chain with {n} states")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("lattice3d needs a perfect cube number of states, got {0}")]
    NotCube(usize),
    #[error("toy chains need at least 3 states, got {0}")]
    TooFewStates(usize),
    #[error("self-loop probability {0} is not in [0, 1]")]
    InvalidRho(f64),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("chain has {n} states, above the analytic cap of {cap}; use the Monte Carlo estimator")]
    CapExceeded { n: usize, cap: usize },
}

pub type Result<T> = std::result::Result<T, MarkovError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Ring1d,
    Lattice3d,
    Complete,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Ring1d => "ring1d",
            Topology::Lattice3d => "lattice3d",
            Topology::Complete => "complete",
        })
    }
}

impl FromStr for Topology {
    type Err = MarkovError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring1d" => Ok(Topology::Ring1d),
            "lattice3d" => Ok(Topology::Lattice3d),
            "complete" => Ok(Topology::Complete),
            other => Err(MarkovError::InvalidArgument(format!(
                "unknown topology `{other}` (expected ring1d, lattice3d or complete)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
enum Kernel {
    Dense {
        p: Vec<f64>,
        /// Nonzero off-diagonal entries per row.
        exits: Vec<Vec<(usize, f64)>>,
        exit_sampler: Vec<Option<WeightedIndex<f64>>>,
    },
    Toy {
        topology: Topology,
        rho: f64,
        side: usize,
    },
}

/// Row-stochastic transition matrix, stored densely or generated on the fly for the toy
/// topologies.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    n: usize,
    kernel: Kernel,
    /// Holding-time distribution per state (`None` for absorbing states).
    sojourn: Vec<Option<Geometric>>,
}

impl MarkovChain {
    /// Builds a chain from a row-major dense matrix.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut p = Vec::with_capacity(n * n);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n || n == 0 {
                return Err(MarkovError::NotSquare { rows: n, cols: row.len(), row: r });
            }
            let mut sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                if !(x.is_finite() && x >= 0.0) {
                    return Err(MarkovError::BadEntry { row: r, col: c, value: x });
                }
                sum += x;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MarkovError::NotStochastic { row: r, sum });
            }
            p.extend_from_slice(row);
        }
        if n == 0 {
            return Err(MarkovError::NotSquare { rows: 0, cols: 0, row: 0 });
        }
        let mut exits = Vec::with_capacity(n);
        let mut exit_sampler = Vec::with_capacity(n);
        let mut sojourn = Vec::with_capacity(n);
        for k in 0..n {
            let row: Vec<(usize, f64)> = (0..n)
                .filter(|&l| l != k && p[k * n + l] > 0.0)
                .map(|l| (l, p[k * n + l]))
                .collect();
            exit_sampler.push(if row.is_empty() {
                None
            } else {
                WeightedIndex::new(row.iter().map(|&(_, x)| x)).ok()
            });
            sojourn.push(holding(if row.is_empty() { 1.0 } else { p[k * n + k] }));
            exits.push(row);
        }
        Ok(MarkovChain { n, kernel: Kernel::Dense { p, exits, exit_sampler }, sojourn })
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    /// The toy topology and self-loop probability, if this is a generated chain.
    pub fn topology(&self) -> Option<(Topology, f64)> {
        match self.kernel {
            Kernel::Toy { topology, rho, .. } => Some((topology, rho)),
            Kernel::Dense { .. } => None,
        }
    }

    pub fn check_state(&self, k: usize) -> Result<()> {
        if k < self.n {
            Ok(())
        } else {
            Err(MarkovError::IndexOutOfRange { index: k, n: self.n })
        }
    }

    /// `p_kk`.
    pub fn self_prob(&self, k: usize) -> f64 {
        match &self.kernel {
            Kernel::Dense { p, .. } => p[k * self.n + k],
            Kernel::Toy { rho, .. } => *rho,
        }
    }

    /// `p_kl`.
    pub fn prob(&self, k: usize, l: usize) -> f64 {
        match &self.kernel {
            Kernel::Dense { p, .. } => p[k * self.n + l],
            Kernel::Toy { .. } => {
                let mut total = 0.0;
                self.for_each_transition(k, |m, x| {
                    if m == l {
                        total += x;
                    }
                });
                total
            }
        }
    }

    /// Calls `f(l, p_kl)` for every nonzero transition out of `k`, self-loop included.
    /// A target may appear more than once (small periodic lattices); weights then add.
    pub fn for_each_transition(&self, k: usize, mut f: impl FnMut(usize, f64)) {
        match &self.kernel {
            Kernel::Dense { p, exits, .. } => {
                let stay = p[k * self.n + k];
                if stay > 0.0 {
                    f(k, stay);
                }
                for &(l, x) in &exits[k] {
                    f(l, x);
                }
            }
            Kernel::Toy { topology, rho, side } => {
                if *rho > 0.0 {
                    f(k, *rho);
                }
                let out = 1.0 - rho;
                if out <= 0.0 {
                    return;
                }
                match topology {
                    Topology::Ring1d => {
                        let n = self.n;
                        f((k + 1) % n, out / 2.0);
                        f((k + n - 1) % n, out / 2.0);
                    }
                    Topology::Lattice3d => {
                        for l in lattice_neighbors(k, *side) {
                            f(l, out / 6.0);
                        }
                    }
                    Topology::Complete => {
                        let x = out / (self.n - 1) as f64;
                        for l in (0..self.n).filter(|&l| l != k) {
                            f(l, x);
                        }
                    }
                }
            }
        }
    }

    /// Dense row-major copy of the transition matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|k| {
                let mut row = vec![0.0; self.n];
                self.for_each_transition(k, |l, x| row[l] += x);
                row
            })
            .collect()
    }

    /// Expected number of segments needed to leave `k`, `1/(1 - p_kk)`.
    pub fn expected_escape(&self, k: usize) -> f64 {
        1.0 / (1.0 - self.self_prob(k))
    }

    /// Default horizon for probability tables built at `k`.
    pub fn default_horizon(&self, k: usize) -> usize {
        let escape = self.expected_escape(k);
        if escape.is_finite() {
            ((DEFAULT_HORIZON_ESCAPES as f64 * escape).round() as usize).max(1)
        } else {
            DEFAULT_HORIZON_ESCAPES
        }
    }

    /// One chain step from `k`.
    pub fn sample_step<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.self_prob(k) {
            k
        } else {
            self.sample_exit(k, rng).unwrap_or(k)
        }
    }

    /// A step from `k` conditioned on leaving `k`; `None` if `k` is absorbing.
    pub fn sample_exit<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<usize> {
        match &self.kernel {
            Kernel::Dense { exits, exit_sampler, .. } => {
                exit_sampler[k].as_ref().map(|w| exits[k][w.sample(rng)].0)
            }
            Kernel::Toy { topology, rho, side } => {
                if *rho >= 1.0 {
                    return None;
                }
                Some(match topology {
                    Topology::Ring1d => {
                        if rng.random::<bool>() {
                            (k + 1) % self.n
                        } else {
                            (k + self.n - 1) % self.n
                        }
                    }
                    Topology::Lattice3d => lattice_neighbors(k, *side)[rng.random_range(0..6)],
                    Topology::Complete => {
                        let r = rng.random_range(0..self.n - 1);
                        if r >= k {
                            r + 1
                        } else {
                            r
                        }
                    }
                })
            }
        }
    }

    /// Number of consecutive segments consumed at `k` before the trajectory leaves it,
    /// the exiting segment included. `None` means it never leaves.
    fn sample_sojourn<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<u64> {
        self.sojourn[k].as_ref().map(|g| g.sample(rng).saturating_add(1))
    }
}

fn holding(stay: f64) -> Option<Geometric> {
    if stay >= 1.0 {
        None
    } else {
        Geometric::new(1.0 - stay).ok()
    }
}

fn lattice_neighbors(k: usize, side: usize) -> [usize; 6] {
    let (x, y, z) = (k % side, (k / side) % side, k / (side * side));
    let idx = |x: usize, y: usize, z: usize| x + side * (y + side * z);
    let up = |c: usize| (c + 1) % side;
    let down = |c: usize| (c + side - 1) % side;
    [
        idx(up(x), y, z),
        idx(down(x), y, z),
        idx(x, up(y), z),
        idx(x, down(y), z),
        idx(x, y, up(z)),
        idx(x, y, down(z)),
    ]
}

/// Generates one of the toy chains: self-loop `rho`, remaining mass split evenly across
/// neighbors, periodic boundaries.
pub fn build_toy_chain(topology: Topology, n_states: usize, rho: f64) -> Result<MarkovChain> {
    if n_states < 3 {
        return Err(MarkovError::TooFewStates(n_states));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(MarkovError::InvalidRho(rho));
    }
    let side = match topology {
        Topology::Lattice3d => {
            let side = (n_states as f64).cbrt().round() as usize;
            if side * side * side != n_states {
                return Err(MarkovError::NotCube(n_states));
            }
            side
        }
        _ => 0,
    };
    let g = holding(rho);
    Ok(MarkovChain {
        n: n_states,
        kernel: Kernel::Toy { topology, rho, side },
        sojourn: vec![g; n_states],
    })
}

/// One step of the row-vector product `out = v·M`.
fn propagate(chain: &MarkovChain, v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (k, &x) in v.iter().enumerate() {
        if x != 0.0 {
            chain.for_each_transition(k, |l, p| out[l] += x * p);
        }
    }
}

/// First-passage probabilities into every start state: `out[n-1][k] = f_kj^(n)`.
fn first_passage_all(chain: &MarkovChain, j: usize, n_max: usize) -> Vec<Vec<f64>> {
    let n = chain.n_states();
    let mut prev: Vec<f64> = (0..n).map(|k| chain.prob(k, j)).collect();
    let mut out = Vec::with_capacity(n_max);
    for _ in 1..n_max {
        let mut next = vec![0.0; n];
        for (k, slot) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            chain.for_each_transition(k, |l, p| {
                if l != j {
                    acc += p * prev[l];
                }
            });
            *slot = acc;
        }
        out.push(std::mem::replace(&mut prev, next));
    }
    out.push(prev);
    out
}

/// `f_ij^(n)` for `n = 1..=n_max`: probability that the first passage from `i` to `j`
/// takes exactly `n` steps.
pub fn first_passage(chain: &MarkovChain, i: usize, j: usize, n_max: usize) -> Result<Vec<f64>> {
    chain.check_state(i)?;
    chain.check_state(j)?;
    if i == j {
        return Err(MarkovError::InvalidArgument(
            "first passage needs distinct states; use first_return".into(),
        ));
    }
    if n_max == 0 {
        return Err(MarkovError::InvalidArgument("n_max must be at least 1".into()));
    }
    Ok(first_passage_all(chain, j, n_max).into_iter().map(|row| row[i]).collect())
}

/// `f_ii^(n)` for `n = 1..=n_max`, from diagonal entries of matrix powers.
pub fn first_return(chain: &MarkovChain, i: usize, n_max: usize) -> Result<Vec<f64>> {
    chain.check_state(i)?;
    if n_max == 0 {
        return Err(MarkovError::InvalidArgument("n_max must be at least 1".into()));
    }
    let n = chain.n_states();
    // diag[n] = [M^n]_ii
    let mut diag = vec![1.0; n_max + 1];
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    let mut next = vec![0.0; n];
    for d in diag.iter_mut().skip(1) {
        propagate(chain, &v, &mut next);
        std::mem::swap(&mut v, &mut next);
        *d = v[i];
    }
    let mut f = Vec::with_capacity(n_max);
    for m in 1..=n_max {
        let conv: f64 = (1..m).map(|k| f[k - 1] * diag[m - k]).sum();
        f.push((diag[m] - conv).clamp(0.0, 1.0));
    }
    Ok(f)
}

/// `F_ii^(N)`: probability of returning to `i` within `horizon` steps.
pub fn return_probability(chain: &MarkovChain, i: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        chain.check_state(i)?;
        return Ok(0.0);
    }
    Ok(first_return(chain, i, horizon)?.iter().sum::<f64>().min(1.0))
}

/// Distribution of visits to a fixed target state, extended one visit count at a time.
///
/// `Q(r, L)` is the probability of exactly `r` returns to the target within `L` steps
/// after standing on it; the number of visits from another start composes the first
/// passage of length `k` with `Q(·, L - k)`.
struct VisitRecursion {
    horizon: usize,
    /// `fp[t-1]`: first passage (or first return) from the start in `t` steps.
    fp: Vec<f64>,
    /// `f[t-1]`: first return to the target in `t` steps.
    f: Vec<f64>,
    /// Row `r` of `Q`, indexed by remaining horizon `0..=horizon`.
    q_last: Vec<f64>,
    /// Next visit count to emit.
    m: usize,
    mass: f64,
}

impl VisitRecursion {
    fn new(fp: Vec<f64>, f: Vec<f64>, horizon: usize) -> Self {
        let mut q0 = vec![1.0; horizon + 1];
        let mut cum = 0.0;
        for l in 1..=horizon {
            cum += f[l - 1];
            q0[l] = (1.0 - cum).max(0.0);
        }
        let reach: f64 = fp.iter().sum();
        VisitRecursion { horizon, fp, f, q_last: q0, m: 0, mass: (1.0 - reach).max(0.0) }
    }

    fn for_pair(chain: &MarkovChain, i: usize, j: usize, horizon: usize) -> Self {
        if horizon == 0 {
            return VisitRecursion::new(Vec::new(), Vec::new(), 0);
        }
        let f = first_return(chain, j, horizon).expect("checked state");
        let fp = if i == j {
            f.clone()
        } else {
            first_passage(chain, i, j, horizon).expect("checked states")
        };
        VisitRecursion::new(fp, f, horizon)
    }

    /// Returns `P(v = m)` for the next `m`, starting at `m = 0`.
    fn next_mass(&mut self) -> f64 {
        let m = self.m;
        self.m += 1;
        if m == 0 {
            return self.mass;
        }
        if m > self.horizon {
            return 0.0;
        }
        if m >= 2 {
            // Advance Q from row m-2 to row m-1.
            let prev = std::mem::take(&mut self.q_last);
            let mut row = vec![0.0; self.horizon + 1];
            for (l, slot) in row.iter_mut().enumerate().skip(m - 1) {
                *slot = (1..=l).map(|t| self.f[t - 1] * prev[l - t]).sum();
            }
            self.q_last = row;
        }
        let h = self.horizon;
        let p: f64 = (1..=h).map(|k| self.fp[k - 1] * self.q_last[h - k]).sum();
        p.clamp(0.0, 1.0)
    }
}

/// Full visit-count distribution `P_i(v_j = m | N)` for `m = 0..=horizon`.
pub fn visit_distribution(chain: &MarkovChain, i: usize, j: usize, horizon: usize) -> Result<Vec<f64>> {
    chain.check_state(i)?;
    chain.check_state(j)?;
    let mut rec = VisitRecursion::for_pair(chain, i, j, horizon);
    Ok((0..=horizon).map(|_| rec.next_mass()).collect())
}

/// `P_i(v_j = m | N)` for `m ≥ 1`.
pub fn visit_count_prob(chain: &MarkovChain, i: usize, j: usize, m: usize, horizon: usize) -> Result<f64> {
    chain.check_state(i)?;
    chain.check_state(j)?;
    if m == 0 {
        return Err(MarkovError::InvalidArgument("visit count must be at least 1".into()));
    }
    if horizon == 0 {
        return Err(MarkovError::InvalidArgument("horizon must be at least 1".into()));
    }
    let mut rec = VisitRecursion::for_pair(chain, i, j, horizon);
    let mut p = 0.0;
    for _ in 0..=m {
        p = rec.next_mass();
    }
    Ok(p)
}

/// `P_i(v_j > s | N)`.
pub fn exceed_prob(chain: &MarkovChain, i: usize, j: usize, s: usize, horizon: usize) -> Result<f64> {
    chain.check_state(i)?;
    chain.check_state(j)?;
    let mut rec = VisitRecursion::for_pair(chain, i, j, horizon);
    let below: f64 = (0..=s).map(|_| rec.next_mass()).sum();
    Ok((1.0 - below).clamp(0.0, 1.0))
}

/// Segments already accounted for: completed ones with known endpoints and pending ones
/// whose endpoints are still hidden.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentInventory {
    pending: BTreeMap<usize, u32>,
    known: BTreeMap<usize, Vec<usize>>,
}

impl SegmentInventory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` segments in `state` with unknown endpoints.
    pub fn add_pending(&mut self, state: usize, count: u32) {
        if count > 0 {
            *self.pending.entry(state).or_default() += count;
        }
    }

    /// Adds a completed segment `start → end`; known segments are consumed first, in
    /// insertion order.
    pub fn add_known(&mut self, start: usize, end: usize) {
        self.known.entry(start).or_default().push(end);
    }

    pub fn with_counts(counts: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut inv = Self::new();
        for (k, c) in counts {
            inv.add_pending(k, c);
        }
        inv
    }

    /// `S_k`: all unconsumed segments starting in `k`.
    pub fn count(&self, state: usize) -> u32 {
        self.pending.get(&state).copied().unwrap_or(0)
            + self.known.get(&state).map_or(0, |v| v.len() as u32)
    }

    pub fn pending(&self, state: usize) -> u32 {
        self.pending.get(&state).copied().unwrap_or(0)
    }

    pub fn known(&self, state: usize) -> &[usize] {
        self.known.get(&state).map_or(&[], |v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty() && self.known.is_empty()
    }

    fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.pending.keys().chain(self.known.keys()).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub state: usize,
    /// 1-based index of the fresh segment in `state`.
    pub ordinal: u32,
    pub p: f64,
}

/// Candidate segments with their probability of being consumed, most likely first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProbabilityTable {
    pub entries: Vec<TaskEntry>,
    pub horizon: usize,
    /// Trajectories behind a Monte Carlo estimate; `None` for exact tables.
    pub n_samples: Option<usize>,
}

impl TaskProbabilityTable {
    fn sorted(mut entries: Vec<TaskEntry>, horizon: usize, n_samples: Option<usize>) -> Self {
        entries.sort_by(|a, b| {
            b.p.total_cmp(&a.p).then(a.state.cmp(&b.state)).then(a.ordinal.cmp(&b.ordinal))
        });
        TaskProbabilityTable { entries, horizon, n_samples }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.p).collect()
    }

    /// Probability of `(state, ordinal)`; zero if below the cutoff.
    pub fn get(&self, state: usize, ordinal: u32) -> f64 {
        self.entries
            .iter()
            .find(|e| e.state == state && e.ordinal == ordinal)
            .map_or(0.0, |e| e.p)
    }

    /// Binomial standard error of a Monte Carlo entry; zero for exact tables.
    pub fn standard_error(&self, p: f64) -> f64 {
        match self.n_samples {
            Some(n) => (p * (1.0 - p) / n as f64).sqrt(),
            None => 0.0,
        }
    }

    /// Entries as a task distribution for the allocator; `None` when the table is empty.
    pub fn to_distribution(&self) -> Option<TaskProbabilityDistribution> {
        let p: Vec<f64> = self.entries.iter().map(|e| e.p.min(1.0)).filter(|&p| p > 0.0).collect();
        if p.is_empty() {
            None
        } else {
            TaskProbabilityDistribution::new(p).ok()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPOptions {
    pub horizon: usize,
    pub cutoff: f64,
    /// Largest ordinal emitted per state.
    pub j_max: Option<u32>,
    /// Keep only this many of the most likely entries.
    pub max_entries: Option<usize>,
    pub analytic_cap: usize,
}

impl MaxPOptions {
    pub fn new(horizon: usize) -> Self {
        MaxPOptions {
            horizon,
            cutoff: DEFAULT_CUTOFF,
            j_max: None,
            max_entries: None,
            analytic_cap: DEFAULT_ANALYTIC_CAP,
        }
    }
}

fn check_options(chain: &MarkovChain, current: usize, opts: &MaxPOptions) -> Result<()> {
    chain.check_state(current)?;
    if opts.horizon == 0 {
        return Err(MarkovError::InvalidArgument("horizon must be at least 1".into()));
    }
    if !(opts.cutoff >= 0.0 && opts.cutoff < 1.0) {
        return Err(MarkovError::InvalidArgument(format!("cutoff {} not in [0, 1)", opts.cutoff)));
    }
    Ok(())
}

/// Exact consumption probabilities.
///
/// Entry `(k, j)` is the probability that a trajectory of `horizon` segments from
/// `current` consumes at least `S_k + j` segments starting in `k`. Segments are consumed
/// at `X_0..X_{N-1}`, so the count is `v_k` over `N - 1` steps, plus one at the current
/// state.
pub fn maxp_analytic(
    chain: &MarkovChain,
    current: usize,
    inventory: &SegmentInventory,
    opts: &MaxPOptions,
) -> Result<TaskProbabilityTable> {
    check_options(chain, current, opts)?;
    if chain.n_states() > opts.analytic_cap {
        return Err(MarkovError::CapExceeded { n: chain.n_states(), cap: opts.analytic_cap });
    }
    let steps = opts.horizon - 1;
    let j_max = opts.j_max.unwrap_or(u32::MAX);
    let mut entries = Vec::new();
    for k in 0..chain.n_states() {
        // Visits needed beyond the inventory for the first fresh segment.
        let base = inventory.count(k) as usize + 1;
        let need_first = if k == current { base - 1 } else { base };
        let mut rec = VisitRecursion::for_pair(chain, current, k, steps);
        let mut below = 0.0;
        let mut emitted = 0usize;
        for j in 1..=j_max {
            // P(v_k ≥ need) with need = need_first + j - 1.
            let need = need_first + j as usize - 1;
            if need > steps {
                break;
            }
            while emitted < need {
                below += rec.next_mass();
                emitted += 1;
            }
            let p = (1.0 - below).clamp(0.0, 1.0);
            if p < opts.cutoff || p == 0.0 {
                break;
            }
            entries.push(TaskEntry { state: k, ordinal: j, p });
        }
    }
    let mut table = TaskProbabilityTable::sorted(entries, opts.horizon, None);
    if let Some(cap) = opts.max_entries {
        table.entries.truncate(cap);
    }
    Ok(table)
}

#[derive(Default, Clone, Copy)]
struct Usage {
    touched: u8,
    known: u32,
    pending: u32,
    fresh: u32,
}

/// Completed segments per state, compressed into runs of self-loops each closed by the
/// segment that leaves (`None` for a trailing run).
type KnownRuns = Vec<Vec<(u64, Option<usize>)>>;

fn known_runs(inventory: &SegmentInventory, n_states: usize) -> KnownRuns {
    let mut out = vec![Vec::new(); n_states];
    for (&k, ends) in &inventory.known {
        let runs = &mut out[k];
        let mut stay = 0u64;
        for &e in ends {
            if e == k {
                stay += 1;
            } else {
                runs.push((stay, Some(e)));
                stay = 0;
            }
        }
        if stay > 0 {
            runs.push((stay, None));
        }
    }
    out
}

/// Per-worker buffers for [`sample_fresh_counts`].
struct Walker {
    used: Vec<Usage>,
    touched: Vec<usize>,
}

impl Walker {
    fn new(n_states: usize) -> Self {
        Walker { used: vec![Usage::default(); n_states], touched: Vec::new() }
    }

    /// Walks one sampled trajectory and reports the fresh segments it needs in each state.
    #[allow(clippy::too_many_arguments)]
    fn sample_fresh_counts<R: Rng + ?Sized>(
        &mut self,
        chain: &MarkovChain,
        current: usize,
        pending: &[u32],
        runs: &KnownRuns,
        horizon: usize,
        rng: &mut R,
        mut report: impl FnMut(usize, u32),
    ) {
        let mut k = current;
        let mut remaining = horizon as u64;
        while remaining > 0 {
            let u = &mut self.used[k];
            if u.touched == 0 {
                u.touched = 1;
                self.touched.push(k);
            }
            if let Some(&(stay, exit)) = runs[k].get(u.known as usize) {
                u.known += 1;
                match exit {
                    Some(e) if stay < remaining => {
                        remaining -= stay + 1;
                        k = e;
                    }
                    Some(_) => remaining = 0,
                    None => remaining -= stay.min(remaining),
                }
                continue;
            }
            let run = chain.sample_sojourn(k, rng);
            let consumed = run.map_or(remaining, |r| r.min(remaining));
            let from_pending = (pending[k] - u.pending).min(consumed as u32);
            u.pending += from_pending;
            u.fresh += consumed as u32 - from_pending;
            remaining -= consumed;
            if remaining > 0 {
                match chain.sample_exit(k, rng) {
                    Some(next) => k = next,
                    None => break,
                }
            }
        }
        for k in self.touched.drain(..) {
            let u = std::mem::take(&mut self.used[k]);
            if u.fresh > 0 {
                report(k, u.fresh);
            }
        }
    }
}

/// RNG for trajectory `index` of a run seeded with `seed`: one ChaCha stream per
/// trajectory, so results do not depend on how trajectories are scheduled.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Monte Carlo estimate of the same table as [`maxp_analytic`].
///
/// Each trajectory walks `horizon` segments from `current`. Completed segments in the
/// inventory are followed with their recorded endpoints; pending ones and fresh ones are
/// sampled from the chain. The probability of `(k, j)` is the fraction of trajectories
/// needing at least `j` fresh segments in `k`.
pub fn maxp_monte_carlo(
    chain: &MarkovChain,
    current: usize,
    inventory: &SegmentInventory,
    opts: &MaxPOptions,
    n_samples: usize,
    seed: u64,
) -> Result<TaskProbabilityTable> {
    check_options(chain, current, opts)?;
    if n_samples == 0 {
        return Err(MarkovError::InvalidArgument("n_samples must be at least 1".into()));
    }
    for k in inventory.states() {
        chain.check_state(k)?;
    }
    for &end in inventory.known.values().flatten() {
        chain.check_state(end)?;
    }
    let n_states = chain.n_states();
    let runs = known_runs(inventory, n_states);
    let mut pending = vec![0u32; n_states];
    for (&k, &c) in &inventory.pending {
        pending[k] = c;
    }
    // hist[k][c] = trajectories needing exactly c fresh segments in k (c ≥ 1).
    let hist: Vec<Vec<u64>> = (0..n_samples as u64)
        .into_par_iter()
        .fold(
            || (Walker::new(n_states), vec![Vec::new(); n_states]),
            |(mut walker, mut acc): (Walker, Vec<Vec<u64>>), idx| {
                let mut rng = trajectory_rng(seed, idx);
                walker.sample_fresh_counts(chain, current, &pending, &runs, opts.horizon, &mut rng, |k, c| {
                    let h = &mut acc[k];
                    if h.len() <= c as usize {
                        h.resize(c as usize + 1, 0);
                    }
                    h[c as usize] += 1;
                });
                (walker, acc)
            },
        )
        .map(|(_, acc)| acc)
        .reduce(
            || vec![Vec::new(); n_states],
            |mut a, b| {
                for (ha, hb) in a.iter_mut().zip(b) {
                    if ha.len() < hb.len() {
                        ha.resize(hb.len(), 0);
                    }
                    for (x, y) in ha.iter_mut().zip(hb) {
                        *x += y;
                    }
                }
                a
            },
        );
    // tails[k][j] = trajectories needing at least j fresh segments in k.
    let j_max = opts.j_max.unwrap_or(u32::MAX) as usize;
    let min_count = ((opts.cutoff * n_samples as f64).ceil() as u64).max(1);
    let tails: Vec<(usize, Vec<u64>)> = hist
        .into_iter()
        .enumerate()
        .filter(|(_, h)| !h.is_empty())
        .map(|(k, h)| {
            let mut tail = vec![0u64; h.len()];
            let mut at_least = 0u64;
            for c in (1..h.len()).rev() {
                at_least += h[c];
                tail[c] = at_least;
            }
            let keep = tail.iter().skip(1).take(j_max).take_while(|&&c| c >= min_count).count();
            tail.truncate(keep + 1);
            (k, tail)
        })
        .collect();

    // Keep the `max_entries` most likely entries without materializing the rest: find
    // the count threshold, then take ties at the threshold in (state, ordinal) order.
    let cap = opts.max_entries.unwrap_or(usize::MAX);
    let mut by_count = vec![0usize; n_samples + 1];
    for (_, tail) in &tails {
        for &c in &tail[1..] {
            by_count[c as usize] += 1;
        }
    }
    let (mut threshold, mut at_threshold) = (min_count, usize::MAX);
    let mut above = 0usize;
    for c in (min_count as usize..=n_samples).rev() {
        if above + by_count[c] >= cap {
            threshold = c as u64;
            at_threshold = cap - above;
            break;
        }
        above += by_count[c];
    }
    let n = n_samples as f64;
    let mut entries = Vec::with_capacity(cap.min(by_count.iter().sum()));
    for (k, tail) in &tails {
        for (j, &count) in tail.iter().enumerate().skip(1) {
            if count < threshold {
                break;
            }
            if count == threshold {
                if at_threshold == 0 {
                    continue;
                }
                at_threshold -= 1;
            }
            entries.push(TaskEntry { state: *k, ordinal: j as u32, p: count as f64 / n });
        }
    }
    Ok(TaskProbabilityTable::sorted(entries, opts.horizon, Some(n_samples)))
}

/// Samples one endpoint per pending segment start.
pub fn sample_virtual_endpoints<R: Rng + ?Sized>(
    chain: &MarkovChain,
    pending: &[usize],
    rng: &mut R,
) -> Vec<usize> {
    pending.iter().map(|&k| chain.sample_step(k, rng)).collect()
}
