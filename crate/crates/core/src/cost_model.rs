//! Task completion-time model `T(w)` and the quantities the allocator derives from it.
//!
//! The model has the form `T(w) = a + b/w + d·ln(g·w) + h/w²`, where `w` is the
//! (possibly fractional) number of resources given to a single task. Only the
//! decreasing branch of `T` is ever used: `w_max` is the location of the minimum
//! and every evaluation above it is clamped to `T(w_max)`.
//!
//! The allocator works with the marginal efficiency `F(w) = -T'(w)/T(w)²`, which is
//! the derivative of the per-task rate `1/T(w)`. On `[w_lo, w_max]` it is strictly
//! decreasing, so `F⁻¹` is well defined there.
//!
//! All tasks share one model. A per-task-type model would slot in wherever the
//! allocator takes a `&CostModel`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients of the LAMMPS benchmark fit shipped as the default model.
pub const DEFAULT_COEFFICIENTS: Coefficients = Coefficients {
    a: -2.38,
    b: 481.42,
    d: 2.32,
    g: 21.76,
    h: 7.10,
};

/// Default lower bound of the allocation domain (half-slot oversubscription).
pub const DEFAULT_W_FLOOR: f64 = 0.5;

/// Resolution of the numeric scan that locates the monotone region of `F`.
pub const DEFAULT_SCAN_STEP: f64 = 1e-3;

const INVERSE_TABLE_LEN: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostModelError {
    #[error("need at least 5 benchmark samples, got {0}")]
    TooFewSamples(usize),
    #[error("benchmark samples must span at least one decade in w (got {min}..{max})")]
    NarrowRange { min: f64, max: f64 },
    #[error("invalid benchmark sample (w={w}, t={t}): both must be finite and positive")]
    InvalidSample { w: f64, t: f64 },
    #[error("least-squares system is singular")]
    Singular,
    #[error("T(w) has no minimum in the sampled range: {0}")]
    NoMinimum(String),
    #[error("T(w) is not positive at w={0}")]
    NonPositiveTime(f64),
    #[error("resources must be positive, got {0}")]
    NonPositiveResources(f64),
    #[error("w={w} outside the allocation domain [{lo}, {hi}]")]
    OutsideDomain { w: f64, lo: f64, hi: f64 },
    #[error("efficiency value must be non-negative, got {0}")]
    NegativeEfficiency(f64),
    #[error("F(w) is not strictly decreasing on [{lo}, {hi}]")]
    EmptyDomain { lo: f64, hi: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, CostModelError>;

/// One benchmark measurement: wall-clock seconds `t` for a task run on `w` resources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSample {
    pub w: f64,
    pub t: f64,
}

impl BenchmarkSample {
    pub fn new(w: f64, t: f64) -> Result<Self> {
        if !(w.is_finite() && t.is_finite() && w > 0.0 && t > 0.0) {
            return Err(CostModelError::InvalidSample { w, t });
        }
        Ok(BenchmarkSample { w, t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub g: f64,
    pub h: f64,
}

impl Coefficients {
    #[inline]
    fn time(&self, w: f64) -> f64 {
        self.a + self.b / w + self.d * (self.g * w).ln() + self.h / (w * w)
    }

    #[inline]
    fn time_prime(&self, w: f64) -> f64 {
        (self.d * w * w - self.b * w - 2.0 * self.h) / (w * w * w)
    }

    #[inline]
    fn time_second(&self, w: f64) -> f64 {
        let w2 = w * w;
        2.0 * self.b / (w2 * w) - self.d / w2 + 6.0 * self.h / (w2 * w2)
    }

    /// Positive root of `d·w² − b·w − 2h = 0`, i.e. `T'(w) = 0` multiplied through by `w³`.
    pub fn minimum_location(&self) -> Result<f64> {
        let finite = [self.a, self.b, self.d, self.g, self.h]
            .iter()
            .all(|c| c.is_finite());
        if !finite || self.g <= 0.0 {
            return Err(CostModelError::InvalidModel(format!(
                "coefficients must be finite with g > 0: {self:?}"
            )));
        }
        if self.d <= 0.0 {
            return Err(CostModelError::NoMinimum(format!(
                "d = {} gives no interior minimum",
                self.d
            )));
        }
        let disc = self.b * self.b + 8.0 * self.d * self.h;
        if disc < 0.0 {
            return Err(CostModelError::NoMinimum(format!(
                "T'(w) = 0 has no real root (discriminant {disc})"
            )));
        }
        // The larger root is where T' changes sign from negative to positive.
        let root = (self.b + disc.sqrt()) / (2.0 * self.d);
        if !(root.is_finite() && root > 0.0) {
            return Err(CostModelError::NoMinimum(format!(
                "minimum location {root} is not positive"
            )));
        }
        Ok(root)
    }
}

/// Options for [`fit_cost_model`] and [`CostModel::from_coefficients`].
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// `a` and `d·ln(g)` are not separately identifiable; `g` is pinned to this value.
    pub g_reference: f64,
    pub w_floor: f64,
    pub scan_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            g_reference: DEFAULT_COEFFICIENTS.g,
            w_floor: DEFAULT_W_FLOOR,
            scan_step: DEFAULT_SCAN_STEP,
        }
    }
}

/// Serialized form of a [`CostModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub g: f64,
    pub h: f64,
    pub w_lo: f64,
    pub w_max: f64,
}

/// Fitted completion-time model restricted to the domain where `F` is invertible.
///
/// Immutable after construction and cheap to clone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct CostModel {
    coef: Coefficients,
    w_lo: f64,
    w_max: f64,
    t_min: f64,
    t_serial: f64,
    f_lo: f64,
    // (w, F(w)) on a log grid over [w_lo, w_max], F descending.
    table: Arc<[(f64, f64)]>,
}

impl PartialEq for CostModel {
    fn eq(&self, other: &Self) -> bool {
        self.coef == other.coef && self.w_lo == other.w_lo && self.w_max == other.w_max
    }
}

impl TryFrom<ModelFile> for CostModel {
    type Error = CostModelError;

    fn try_from(f: ModelFile) -> Result<Self> {
        let coef = Coefficients {
            a: f.a,
            b: f.b,
            d: f.d,
            g: f.g,
            h: f.h,
        };
        let root = coef.minimum_location()?;
        if !((f.w_max - root).abs() <= 1e-6 * root) {
            return Err(CostModelError::InvalidModel(format!(
                "w_max = {} does not match the minimum of T at {root}",
                f.w_max
            )));
        }
        CostModel::with_domain(coef, f.w_lo, root)
    }
}

impl From<CostModel> for ModelFile {
    fn from(m: CostModel) -> Self {
        m.to_file()
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::benchmark_default()
    }
}

impl CostModel {
    /// The model built from [`DEFAULT_COEFFICIENTS`].
    pub fn benchmark_default() -> Self {
        Self::from_coefficients(DEFAULT_COEFFICIENTS, &FitOptions::default())
            .expect("default coefficients define a valid model")
    }

    /// Builds a model from known coefficients, locating `w_max` in closed form and `w_lo`
    /// by scanning `F` upward from `opts.w_floor`.
    pub fn from_coefficients(coef: Coefficients, opts: &FitOptions) -> Result<Self> {
        let w_max = coef.minimum_location()?;
        let w_lo = monotone_lower_bound(&coef, opts.w_floor, w_max, opts.scan_step)?;
        Self::with_domain(coef, w_lo, w_max)
    }

    /// Builds a model with an explicit domain. `F` must be strictly decreasing on it.
    pub fn with_domain(coef: Coefficients, w_lo: f64, w_max: f64) -> Result<Self> {
        if !(w_lo.is_finite() && w_lo > 0.0 && w_lo < w_max) {
            return Err(CostModelError::InvalidModel(format!(
                "need 0 < w_lo < w_max, got w_lo={w_lo}, w_max={w_max}"
            )));
        }
        let n = INVERSE_TABLE_LEN;
        let (ln_lo, ln_hi) = (w_lo.ln(), w_max.ln());
        let mut table = Vec::with_capacity(n);
        for k in 0..n {
            let w = if k == 0 {
                w_lo
            } else if k == n - 1 {
                w_max
            } else {
                (ln_lo + (ln_hi - ln_lo) * k as f64 / (n - 1) as f64).exp()
            };
            let t = coef.time(w);
            if !(t.is_finite() && t > 0.0) {
                return Err(CostModelError::NonPositiveTime(w));
            }
            table.push((w, -coef.time_prime(w) / (t * t)));
        }
        // The endpoint sits on a root of T'; pin it to exactly zero.
        table[n - 1].1 = 0.0;
        if table.windows(2).any(|p| p[1].1 >= p[0].1) {
            return Err(CostModelError::EmptyDomain { lo: w_lo, hi: w_max });
        }
        let t_min = coef.time(w_max);
        let t_serial = coef.time(1.0);
        Ok(CostModel {
            coef,
            w_lo,
            w_max,
            t_min,
            t_serial,
            f_lo: table[0].1,
            table: table.into(),
        })
    }

    pub fn coefficients(&self) -> Coefficients {
        self.coef
    }

    pub fn w_lo(&self) -> f64 {
        self.w_lo
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    /// `T(w_max)`, the fastest a single task can complete.
    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    /// `T(1)`, the completion time at maximal parallel efficiency.
    pub fn t_serial(&self) -> f64 {
        self.t_serial
    }

    /// `F(w_lo)`, the largest efficiency value in the domain.
    pub fn efficiency_at_lower_bound(&self) -> f64 {
        self.f_lo
    }

    pub fn to_file(&self) -> ModelFile {
        let c = self.coef;
        ModelFile {
            a: c.a,
            b: c.b,
            d: c.d,
            g: c.g,
            h: c.h,
            w_lo: self.w_lo,
            w_max: self.w_max,
        }
    }

    /// Expected completion time with `w` resources. Values above `w_max` are clamped to
    /// `T(w_max)`: the increasing branch of `T` is never evaluated.
    pub fn time(&self, w: f64) -> Result<f64> {
        if !(w > 0.0) || !w.is_finite() {
            return Err(CostModelError::NonPositiveResources(w));
        }
        Ok(self.time_unchecked(w))
    }

    #[inline]
    pub(crate) fn time_unchecked(&self, w: f64) -> f64 {
        if w >= self.w_max {
            self.t_min
        } else {
            self.coef.time(w)
        }
    }

    /// Raw `T'(w)`, without domain checks.
    pub fn time_derivative(&self, w: f64) -> f64 {
        self.coef.time_prime(w)
    }

    /// Marginal efficiency `F(w) = -T'(w)/T(w)²` on `[w_lo, w_max]`.
    pub fn efficiency(&self, w: f64) -> Result<f64> {
        let tol = 1e-12 * self.w_max;
        if !(w >= self.w_lo - tol && w <= self.w_max + tol) {
            return Err(CostModelError::OutsideDomain {
                w,
                lo: self.w_lo,
                hi: self.w_max,
            });
        }
        Ok(self.efficiency_unchecked(w.clamp(self.w_lo, self.w_max)))
    }

    #[inline]
    pub(crate) fn efficiency_unchecked(&self, w: f64) -> f64 {
        if w >= self.w_max {
            return 0.0;
        }
        let t = self.coef.time(w);
        -self.coef.time_prime(w) / (t * t)
    }

    #[inline]
    fn efficiency_with_slope(&self, w: f64) -> (f64, f64) {
        let t = self.coef.time(w);
        let tp = self.coef.time_prime(w);
        let t2 = t * t;
        (-tp / t2, -self.coef.time_second(w) / t2 + 2.0 * tp * tp / (t2 * t))
    }

    /// `F⁻¹(y)`: the unique `w ∈ [w_lo, w_max]` with `F(w) = y`, saturating at the domain
    /// bounds.
    pub fn invert_efficiency(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(CostModelError::NegativeEfficiency(y));
        }
        Ok(self.inverse_unchecked(y))
    }

    /// `F⁻¹` for `y ≥ 0` (negative inputs saturate at `w_max`).
    #[inline]
    pub(crate) fn inverse_unchecked(&self, y: f64) -> f64 {
        self.inverse_with_slope(y).0
    }

    /// `F⁻¹(y)` together with `F'` at the returned point (0 when saturated).
    pub(crate) fn inverse_with_slope(&self, y: f64) -> (f64, f64) {
        if y >= self.f_lo {
            return (self.w_lo, 0.0);
        }
        if y <= 0.0 {
            return (self.w_max, 0.0);
        }
        let table = &self.table;
        // First index whose F value drops to y or below; F is descending.
        let hi_idx = table.partition_point(|&(_, f)| f > y);
        debug_assert!(hi_idx >= 1 && hi_idx < table.len());
        let (mut lo, f_a) = table[hi_idx - 1];
        let (mut hi, f_b) = table[hi_idx];
        // Secant start inside the bracket, then safeguarded Newton.
        let mut w = lo + (hi - lo) * (f_a - y) / (f_a - f_b);
        let mut slope = 0.0;
        for _ in 0..64 {
            let (f, s) = self.efficiency_with_slope(w);
            slope = s;
            let r = f - y;
            if r.abs() <= 1e-15 * y {
                break;
            }
            if r > 0.0 {
                lo = w;
            } else {
                hi = w;
            }
            let mut next = w - r / s;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let step = (next - w).abs();
            w = next;
            // Near w_max, F is proportional to the gap w_max - w, so that gap sets the scale.
            let tol = 1e-13 * w.min(self.w_max - w) + 4.0 * f64::EPSILON * w;
            if step <= tol || hi - lo <= tol {
                break;
            }
        }
        (w, slope)
    }
}

/// Smallest grid point `w ≥ floor` from which `F` is strictly decreasing up to `w_max`.
fn monotone_lower_bound(coef: &Coefficients, floor: f64, w_max: f64, step: f64) -> Result<f64> {
    if !(floor > 0.0) || floor >= w_max {
        return Err(CostModelError::InvalidModel(format!(
            "domain floor {floor} must lie in (0, w_max={w_max})"
        )));
    }
    let f = |w: f64| {
        let t = coef.time(w);
        if !(t.is_finite() && t > 0.0) {
            Err(CostModelError::NonPositiveTime(w))
        } else {
            Ok(-coef.time_prime(w) / (t * t))
        }
    };
    let steps = ((w_max - floor) / step).floor() as usize;
    let mut lower = floor;
    let mut prev = f(floor)?;
    for k in 1..=steps {
        let w = floor + k as f64 * step;
        if w >= w_max {
            break;
        }
        let cur = f(w)?;
        if cur >= prev {
            lower = w;
        }
        prev = cur;
    }
    // F(w_max) = 0; the last interior point must sit above it.
    if prev <= 0.0 {
        return Err(CostModelError::EmptyDomain { lo: floor, hi: w_max });
    }
    if lower >= w_max {
        return Err(CostModelError::EmptyDomain { lo: floor, hi: w_max });
    }
    Ok(lower)
}

/// Least-squares fit of `t ≈ a + b/w + d·ln(g·w) + h/w²` to benchmark samples.
///
/// The fit is linear in `(a + d·ln g, b, d, h)`; `g` is pinned to `opts.g_reference`.
pub fn fit_cost_model(samples: &[BenchmarkSample], opts: &FitOptions) -> Result<CostModel> {
    if samples.len() < 5 {
        return Err(CostModelError::TooFewSamples(samples.len()));
    }
    for s in samples {
        BenchmarkSample::new(s.w, s.t)?;
    }
    let min_w = samples.iter().map(|s| s.w).fold(f64::INFINITY, f64::min);
    let max_w = samples.iter().map(|s| s.w).fold(0.0, f64::max);
    if max_w < 10.0 * min_w * (1.0 - 1e-12) {
        return Err(CostModelError::NarrowRange { min: min_w, max: max_w });
    }
    if !(opts.g_reference > 0.0) {
        return Err(CostModelError::InvalidModel(format!(
            "g reference must be positive, got {}",
            opts.g_reference
        )));
    }

    let n = samples.len();
    let design = DMatrix::from_fn(n, 4, |r, c| {
        let w = samples[r].w;
        match c {
            0 => 1.0,
            1 => 1.0 / w,
            2 => w.ln(),
            _ => 1.0 / (w * w),
        }
    });
    let target = DVector::from_iterator(n, samples.iter().map(|s| s.t));
    // Column scaling keeps the conditioning check meaningful across wide w ranges.
    let scales: Vec<f64> = (0..4)
        .map(|c| design.column(c).norm().max(f64::MIN_POSITIVE))
        .collect();
    let mut scaled = design.clone();
    for (c, s) in scales.iter().enumerate() {
        scaled.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = scaled.svd(true, true);
    let sv_max = svd.singular_values.max();
    let sv_min = svd.singular_values.min();
    if !(sv_max > 0.0) || sv_min / sv_max < 1e-12 {
        return Err(CostModelError::Singular);
    }
    let sol = svd.solve(&target, 0.0).map_err(|_| CostModelError::Singular)?;
    let c: Vec<f64> = (0..4).map(|k| sol[k] / scales[k]).collect();
    let g = opts.g_reference;
    let coef = Coefficients {
        a: c[0] - c[2] * g.ln(),
        b: c[1],
        d: c[2],
        g,
        h: c[3],
    };
    let w_max = coef.minimum_location()?;
    if w_max > max_w {
        return Err(CostModelError::NoMinimum(format!(
            "fitted minimum at w={w_max:.3} lies beyond the largest sample w={max_w}"
        )));
    }
    CostModel::from_coefficients(coef, opts)
}
