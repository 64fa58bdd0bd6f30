#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specalloc::markov::MarkovChain;

/// Random row-stochastic matrix with 2..=4 states; some entries forced to zero.
pub fn random_chain(seed: u64) -> MarkovChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4);
    let rows = (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() })
                .collect();
            if row.iter().all(|&x| x == 0.0) {
                row[rng.random_range(0..n)] = 1.0;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            // Push rounding residue into the largest entry so the row sums to one.
            let s: f64 = row.iter().sum();
            let big = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            row[big] += 1.0 - s;
            row
        })
        .collect();
    MarkovChain::from_rows(rows).expect("valid random chain")
}

/// Every path `X_0 = start, X_1..X_horizon` with its probability.
pub fn enumerate_paths(chain: &MarkovChain, start: usize, horizon: usize) -> Vec<(Vec<usize>, f64)> {
    let n = chain.n_states();
    let mut paths = vec![(vec![start], 1.0)];
    for _ in 0..horizon {
        let mut next = Vec::with_capacity(paths.len() * n);
        for (path, p) in &paths {
            let last = *path.last().unwrap();
            for l in 0..n {
                let q = chain.prob(last, l);
                if q > 0.0 {
                    let mut ext = path.clone();
                    ext.push(l);
                    next.push((ext, p * q));
                }
            }
        }
        paths = next;
    }
    paths
}

/// Oracle `f_ij^(n)` (first passage, or first return when `i == j`), `n = 1..=horizon`.
pub fn oracle_first_hit(chain: &MarkovChain, i: usize, j: usize, horizon: usize) -> Vec<f64> {
    let mut f = vec![0.0; horizon];
    for (path, p) in enumerate_paths(chain, i, horizon) {
        if let Some(t) = path.iter().skip(1).position(|&x| x == j) {
            f[t] += p;
        }
    }
    f
}

/// Oracle distribution of visits to `j` at positions `1..=horizon`.
pub fn oracle_visits(chain: &MarkovChain, i: usize, j: usize, horizon: usize) -> Vec<f64> {
    let mut d = vec![0.0; horizon + 1];
    for (path, p) in enumerate_paths(chain, i, horizon) {
        d[path.iter().skip(1).filter(|&&x| x == j).count()] += p;
    }
    d
}

/// Oracle probability that a `horizon`-segment trajectory consumes at least `need`
/// segments starting in `k`, i.e. `#{t < horizon : X_t = k} ≥ need`.
pub fn oracle_consumed_at_least(chain: &MarkovChain, i: usize, k: usize, horizon: usize, need: usize) -> f64 {
    enumerate_paths(chain, i, horizon - 1)
        .into_iter()
        .filter(|(path, _)| path.iter().filter(|&&x| x == k).count() >= need)
        .map(|(_, p)| p)
        .sum()
}
