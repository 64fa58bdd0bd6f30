//! Synthetic task-probability distributions.
//!
//! Values are drawn i.i.d. from a density until their running sum first reaches a
//! target total, so every distribution has the same maximal expected throughput
//! under unlimited resources. The overshooting last draw is kept.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::TaskProbabilityDistribution;

pub const DEFAULT_TARGET_SUM: f64 = 1000.0;

/// Smallest accepted beta draw; anything below is redrawn.
pub const BETA_FLOOR: f64 = 1e-300;

const MAX_DRAWS: usize = 50_000_000;

/// Beta shape pairs used for the survey plots. Read off a figure legend, so approximate.
pub const BETA_PRESETS: &[(f64, f64)] = &[
    (0.1, 1.0),
    (0.5, 0.5),
    (1.0, 1.0),
    (0.5, 2.0),
    (2.0, 5.0),
    (5.0, 1.0),
];

/// Speculative-task probabilities for the step distributions.
pub const STEP_PRESETS: &[f64] = &[0.5, 0.1, 0.01, 1e-10];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("probability {0} must lie in (0, 1]")]
    InvalidProbability(f64),
    #[error("mixture weights must be non-negative with a positive sum (low={0}, high={1})")]
    InvalidWeights(f64, f64),
    #[error("beta shape parameters must be positive and finite (alpha={0}, beta={1})")]
    InvalidShape(f64, f64),
    #[error("target sum must be positive and finite, got {0}")]
    InvalidTarget(f64),
    #[error("distribution needs more than {0} draws to reach its target sum")]
    TooManyDraws(usize),
    #[error("cannot parse distribution spec {0:?}: {1}")]
    Parse(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistributionKind {
    /// Two point masses at `p_high` and `p_low`, drawn in the ratio `low_weight:high_weight`.
    DeltaMixture {
        p_high: f64,
        p_low: f64,
        low_weight: f64,
        high_weight: f64,
    },
    Beta { alpha: f64, beta: f64 },
}

impl DistributionKind {
    /// Every draw equals `p`.
    pub fn single_delta(p: f64) -> Self {
        DistributionKind::DeltaMixture {
            p_high: p,
            p_low: p,
            low_weight: 1.0,
            high_weight: 0.0,
        }
    }

    /// Certain tasks (`p = 1`) mixed 1:9 with speculative tasks at `p_b`.
    pub fn step(p_b: f64) -> Self {
        DistributionKind::DeltaMixture {
            p_high: 1.0,
            p_low: p_b,
            low_weight: 9.0,
            high_weight: 1.0,
        }
    }

    pub fn beta(alpha: f64, beta: f64) -> Self {
        DistributionKind::Beta { alpha, beta }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        match *self {
            DistributionKind::DeltaMixture {
                p_high,
                p_low,
                low_weight,
                high_weight,
            } => {
                for p in [p_high, p_low] {
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(DistError::InvalidProbability(p));
                    }
                }
                let ok = low_weight >= 0.0
                    && high_weight >= 0.0
                    && (low_weight + high_weight).is_finite()
                    && low_weight + high_weight > 0.0;
                if !ok {
                    return Err(DistError::InvalidWeights(low_weight, high_weight));
                }
            }
            DistributionKind::Beta { alpha, beta } => {
                let ok = alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite();
                if !ok {
                    return Err(DistError::InvalidShape(alpha, beta));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DistributionKind::DeltaMixture {
                p_high,
                p_low,
                low_weight,
                high_weight,
            } => {
                if high_weight == 0.0 {
                    write!(f, "delta:{p_low}")
                } else if low_weight == 0.0 {
                    write!(f, "delta:{p_high}")
                } else {
                    write!(f, "mix:{p_high}:{p_low}:{low_weight}:{high_weight}")
                }
            }
            DistributionKind::Beta { alpha, beta } => write!(f, "beta:{alpha}:{beta}"),
        }
    }
}

/// Accepted forms: `delta:P`, `step:PB`, `step:PB:LOW:HIGH`, `mix:PA:PB:LOW:HIGH`,
/// `beta:ALPHA:BETA`.
impl FromStr for DistributionKind {
    type Err = DistError;

    fn from_str(s: &str) -> Result<Self, DistError> {
        let err = |msg: &str| DistError::Parse(s.to_string(), msg.to_string());
        let mut parts = s.trim().split(':');
        let head = parts.next().unwrap_or_default().to_ascii_lowercase();
        let nums = parts
            .map(|x| x.trim().parse::<f64>().map_err(|e| err(&e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let kind = match (head.as_str(), nums.as_slice()) {
            ("delta", [p]) => DistributionKind::single_delta(*p),
            ("step", [pb]) => DistributionKind::step(*pb),
            ("step", [pb, low, high]) => DistributionKind::DeltaMixture {
                p_high: 1.0,
                p_low: *pb,
                low_weight: *low,
                high_weight: *high,
            },
            ("mix", [pa, pb, low, high]) => DistributionKind::DeltaMixture {
                p_high: *pa,
                p_low: *pb,
                low_weight: *low,
                high_weight: *high,
            },
            ("beta", [a, b]) => DistributionKind::beta(*a, *b),
            _ => return Err(err("expected delta:P, step:PB[:LOW:HIGH], mix:PA:PB:LOW:HIGH or beta:A:B")),
        };
        kind.validate().map_err(|e| err(&e.to_string()))?;
        Ok(kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub target_sum: f64,
    pub seed: u64,
}

impl DistributionSpec {
    pub fn new(kind: DistributionKind, seed: u64) -> Self {
        DistributionSpec {
            kind,
            target_sum: DEFAULT_TARGET_SUM,
            seed,
        }
    }

    pub fn with_target_sum(mut self, target_sum: f64) -> Self {
        self.target_sum = target_sum;
        self
    }
}

/// Draws probabilities until their sum first reaches `spec.target_sum`; returns them
/// sorted descending. Deterministic in `spec.seed`.
pub fn sample_distribution(spec: &DistributionSpec) -> Result<TaskProbabilityDistribution, DistError> {
    spec.kind.validate()?;
    if !(spec.target_sum > 0.0 && spec.target_sum.is_finite()) {
        return Err(DistError::InvalidTarget(spec.target_sum));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw: Box<dyn FnMut(&mut ChaCha8Rng) -> f64> = match spec.kind {
        DistributionKind::DeltaMixture {
            p_high,
            p_low,
            low_weight,
            high_weight,
        } => {
            let high_frac = high_weight / (low_weight + high_weight);
            Box::new(move |rng| if rng.random::<f64>() < high_frac { p_high } else { p_low })
        }
        DistributionKind::Beta { alpha, beta } => {
            let density = Beta::new(alpha, beta).map_err(|_| DistError::InvalidShape(alpha, beta))?;
            Box::new(move |rng| loop {
                let x: f64 = density.sample(rng);
                if (BETA_FLOOR..=1.0).contains(&x) {
                    break x;
                }
            })
        }
    };
    let mut p = Vec::new();
    let mut total = 0.0;
    while total < spec.target_sum {
        if p.len() >= MAX_DRAWS {
            return Err(DistError::TooManyDraws(MAX_DRAWS));
        }
        let x = draw(&mut rng);
        total += x;
        p.push(x);
    }
    Ok(TaskProbabilityDistribution::new(p).expect("draws lie in (0, 1]"))
}
