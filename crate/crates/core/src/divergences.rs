//! Divergences and distances on discrete label distributions and on
//! low-dimensional continuous densities.
//!
//! Discrete measures operate on probability vectors over `K` classes.
//! Continuous measures operate on Gaussian mixtures and are evaluated by
//! deterministic tensor-grid trapezoid quadrature restricted to dim <= 3;
//! every quadrature result carries a grid-refinement error estimate.
//!
//! Conventions: natural logarithm everywhere, `0 ln 0 = 0`, and KL with a
//! violated absolute-continuity condition returns `f64::INFINITY` rather than
//! an error so that downstream bound verifiers can propagate it.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A probability vector on `K` classes: entries nonnegative, summing to one
/// within `1e-12`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { probs })
    }

    /// Rescales a nonnegative vector onto the simplex.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if weights.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution("all entries are zero".into()));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Self::new(weights)
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// True when every entry is strictly positive.
    pub fn strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }
}

impl TryFrom<Vec<f64>> for DiscreteDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DiscreteDistribution> for Vec<f64> {
    fn from(d: DiscreteDistribution) -> Self {
        d.probs
    }
}

fn check_same_k(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.k() != q.k() {
        return Err(Error::DimensionMismatch(p.k(), q.k()));
    }
    Ok(())
}

/// KL divergence `sum_i p_i ln(p_i / q_i)` in nats, with `0 ln 0 = 0`.
///
/// Returns `f64::INFINITY` when absolute continuity fails (`q_i = 0` with
/// `p_i > 0`).
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    check_same_k(p, q)?;
    let mut sum = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            sum += pi * (pi / qi).ln();
        }
    }
    Ok(sum.max(0.0))
}

/// Generalized Jensen-Shannon divergence with mixing constant `c in (0, 1)`:
/// `(1-c) KL(p || m) + c KL(q || m)` where `m = (1-c) p + c q`.
///
/// The standard JS divergence is recovered at `c = 1/2`. Always finite; the
/// maximum over disjoint supports is the binary entropy of `c` (`ln 2` at
/// `c = 1/2`).
pub fn generalized_js(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    c: f64,
) -> Result<f64> {
    check_same_k(p, q)?;
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "mixing constant must lie in (0,1), got {c}"
        )));
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        let mi = (1.0 - c) * pi + c * qi;
        if pi > 0.0 {
            sum += (1.0 - c) * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            sum += c * qi * (qi / mi).ln();
        }
    }
    Ok(sum.max(0.0))
}

/// Total variation distance `(1/2) sum_i |p_i - q_i|`, in `[0, 1]`.
pub fn tv_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    check_same_k(p, q)?;
    let sum: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pi, &qi)| (pi - qi).abs())
        .sum();
    Ok(0.5 * sum)
}

/// One weighted Gaussian component of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianComponentRepr", into = "GaussianComponentRepr")]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianComponentRepr {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussianComponentRepr> for GaussianComponent {
    type Error = Error;
    fn try_from(r: GaussianComponentRepr) -> Result<Self> {
        let dim = r.mean.len();
        if r.cov.len() != dim || r.cov.iter().any(|row| row.len() != dim) {
            return Err(Error::DimensionMismatch(r.cov.len(), dim));
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for (i, row) in r.cov.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cov[(i, j)] = v;
            }
        }
        Ok(Self {
            weight: r.weight,
            mean: DVector::from_vec(r.mean),
            cov,
        })
    }
}

impl From<GaussianComponent> for GaussianComponentRepr {
    fn from(c: GaussianComponent) -> Self {
        let dim = c.mean.len();
        Self {
            weight: c.weight,
            mean: c.mean.iter().copied().collect(),
            cov: (0..dim)
                .map(|i| (0..dim).map(|j| c.cov[(i, j)]).collect())
                .collect(),
        }
    }
}

/// A Gaussian mixture density: the oracle representation of class conditionals
/// and feature marginals used by every exact check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureDensityRepr", into = "MixtureDensityRepr")]
pub struct MixtureDensity {
    components: Vec<GaussianComponent>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct MixtureDensityRepr {
    components: Vec<GaussianComponent>,
    dim: usize,
}

impl TryFrom<MixtureDensityRepr> for MixtureDensity {
    type Error = Error;
    fn try_from(r: MixtureDensityRepr) -> Result<Self> {
        let m = MixtureDensity::new(r.components)?;
        if m.dim != r.dim {
            return Err(Error::DimensionMismatch(m.dim, r.dim));
        }
        Ok(m)
    }
}

impl From<MixtureDensity> for MixtureDensityRepr {
    fn from(m: MixtureDensity) -> Self {
        Self {
            dim: m.dim,
            components: m.components,
        }
    }
}

impl MixtureDensity {
    /// Builds a mixture, validating that the weights form a probability
    /// vector, the dimensions agree and every covariance admits a Cholesky
    /// factorization.
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        let dim = components[0].mean.len();
        DiscreteDistribution::new(components.iter().map(|c| c.weight).collect())?;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch(c.mean.len(), dim));
            }
            if c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::DimensionMismatch(c.cov.nrows(), dim));
            }
            let asym = (&c.cov - c.cov.transpose()).abs().max();
            if asym > 1e-9 * (1.0 + c.cov.abs().max()) {
                return Err(Error::NotPositiveDefinite);
            }
            if Cholesky::new(c.cov.clone()).is_none() {
                return Err(Error::NotPositiveDefinite);
            }
        }
        Ok(Self { components, dim })
    }

    /// Single Gaussian.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![GaussianComponent {
            weight: 1.0,
            mean,
            cov,
        }])
    }

    /// Single Gaussian with covariance `scale * I`.
    pub fn isotropic(mean: DVector<f64>, scale: f64) -> Result<Self> {
        let d = mean.len();
        Self::gaussian(mean, DMatrix::identity(d, d) * scale)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Mixes several mixtures with the given nonnegative weights (flattening
    /// components). Weights need not be normalized; they are rescaled.
    pub fn mix(parts: &[(f64, &MixtureDensity)]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Empty("mixture parts"));
        }
        let total: f64 = parts.iter().map(|(w, _)| *w).sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("all mixture weights zero".into()));
        }
        let mut comps = Vec::new();
        for (w, m) in parts {
            for c in &m.components {
                let weight = w / total * c.weight;
                if weight > 0.0 {
                    comps.push(GaussianComponent {
                        weight,
                        mean: c.mean.clone(),
                        cov: c.cov.clone(),
                    });
                }
            }
        }
        Self::new(comps)
    }

    /// Pushes the mixture through the affine map `z = linear * x + offset`.
    /// Fails when the transported covariance is singular (rank-deficient map).
    pub fn affine_pushforward(
        &self,
        linear: &DMatrix<f64>,
        offset: &DVector<f64>,
    ) -> Result<Self> {
        if linear.ncols() != self.dim {
            return Err(Error::DimensionMismatch(linear.ncols(), self.dim));
        }
        let comps = self
            .components
            .iter()
            .map(|c| GaussianComponent {
                weight: c.weight,
                mean: linear * &c.mean + offset,
                cov: linear * &c.cov * linear.transpose(),
            })
            .collect();
        Self::new(comps)
    }

    /// Precomputes per-component factorizations for fast density evaluation.
    pub fn evaluator(&self) -> MixtureEvaluator {
        let comps = self
            .components
            .iter()
            .map(|c| {
                let chol = Cholesky::new(c.cov.clone())
                    .expect("covariance validated at construction");
                let l = chol.l();
                let log_det_half: f64 = (0..self.dim).map(|i| l[(i, i)].ln()).sum();
                let log_norm = 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()
                    + log_det_half;
                ComponentEvaluator {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    l,
                    log_norm,
                }
            })
            .collect();
        MixtureEvaluator {
            comps,
            dim: self.dim,
        }
    }
}

struct ComponentEvaluator {
    weight: f64,
    mean: DVector<f64>,
    l: DMatrix<f64>,
    log_norm: f64,
}

/// Cached evaluator for a [`MixtureDensity`].
pub struct MixtureEvaluator {
    comps: Vec<ComponentEvaluator>,
    dim: usize,
}

impl MixtureEvaluator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Density at `z` (length must equal `dim`; not re-checked in this hot path).
    pub fn density(&self, z: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut y = [0.0f64; 8];
        debug_assert!(self.dim <= 8);
        for c in &self.comps {
            // forward-substitute L y = z - mean
            for i in 0..self.dim {
                let mut s = z[i] - c.mean[i];
                for j in 0..i {
                    s -= c.l[(i, j)] * y[j];
                }
                y[i] = s / c.l[(i, i)];
            }
            let quad: f64 = y[..self.dim].iter().map(|v| v * v).sum();
            total += c.weight * (-0.5 * quad - c.log_norm).exp();
        }
        total
    }
}

/// A tensor-product trapezoid grid. Each axis carries an even interval count
/// so that every-other-node coarsening reuses the same evaluations for the
/// refinement error estimate.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    axes: Vec<GridAxis>,
}

#[derive(Debug, Clone)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    /// Number of intervals (even, >= 2). Node count is `intervals + 1`.
    pub intervals: usize,
}

/// A quadrature value together with its grid-refinement error estimate
/// (absolute difference against the half-resolution grid).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadEstimate {
    pub value: f64,
    pub refinement_error: f64,
}

/// Default intervals per axis by dimension: 4096 in 1-D, 512 in 2-D, 128 in 3-D.
pub fn default_intervals(dim: usize) -> usize {
    match dim {
        1 => 4096,
        2 => 512,
        _ => 128,
    }
}

impl QuadratureGrid {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Empty("grid axes"));
        }
        if axes.len() > 3 {
            return Err(Error::DimTooHigh(axes.len()));
        }
        for a in &axes {
            if !(a.hi > a.lo) || a.intervals < 2 || a.intervals % 2 != 0 {
                return Err(Error::InvalidParameter(
                    "grid axis needs hi > lo and an even interval count >= 2".into(),
                ));
            }
        }
        Ok(Self { axes })
    }

    /// A grid covering every given mixture out to 8 marginal standard
    /// deviations per axis, with the default interval count for the dimension.
    pub fn covering(densities: &[&MixtureDensity]) -> Result<Self> {
        Self::covering_with(densities, None)
    }

    /// As [`QuadratureGrid::covering`] with an explicit interval count.
    pub fn covering_with(
        densities: &[&MixtureDensity],
        intervals: Option<usize>,
    ) -> Result<Self> {
        if densities.is_empty() {
            return Err(Error::Empty("densities"));
        }
        let dim = densities[0].dim();
        if dim > 3 {
            return Err(Error::DimTooHigh(dim));
        }
        for d in densities {
            if d.dim() != dim {
                return Err(Error::DimensionMismatch(d.dim(), dim));
            }
        }
        let n = intervals.unwrap_or_else(|| default_intervals(dim));
        let mut axes = Vec::with_capacity(dim);
        for j in 0..dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for d in densities {
                for c in d.components() {
                    let sigma = c.cov[(j, j)].sqrt();
                    lo = lo.min(c.mean[j] - 8.0 * sigma);
                    hi = hi.max(c.mean[j] + 8.0 * sigma);
                }
            }
            axes.push(GridAxis {
                lo,
                hi,
                intervals: n + n % 2,
            });
        }
        Self::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    /// Integrates `f` over the grid, returning the fine-grid value and the
    /// absolute difference against the half-resolution grid. One pass, single
    /// evaluation per node; the node order (row-major over axis indices) is
    /// fixed, so results are bitwise deterministic.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> QuadEstimate {
        let dim = self.axes.len();
        let steps: Vec<f64> = self
            .axes
            .iter()
            .map(|a| (a.hi - a.lo) / a.intervals as f64)
            .collect();
        let counts: Vec<usize> = self.axes.iter().map(|a| a.intervals + 1).collect();
        let total: usize = counts.iter().product();

        let mut idx = vec![0usize; dim];
        let mut point = vec![0.0f64; dim];
        let mut fine = 0.0;
        let mut coarse = 0.0;
        for flat in 0..total {
            let mut rem = flat;
            let mut w_fine = 1.0;
            let mut w_coarse = 1.0;
            let mut on_coarse = true;
            for d in (0..dim).rev() {
                let i = rem % counts[d];
                rem /= counts[d];
                idx[d] = i;
                point[d] = self.axes[d].lo + steps[d] * i as f64;
                let edge = i == 0 || i == self.axes[d].intervals;
                w_fine *= if edge { 0.5 * steps[d] } else { steps[d] };
                if i % 2 == 0 {
                    let h2 = 2.0 * steps[d];
                    w_coarse *= if edge { 0.5 * h2 } else { h2 };
                } else {
                    on_coarse = false;
                }
            }
            let v = f(&point);
            fine += w_fine * v;
            if on_coarse {
                coarse += w_coarse * v;
            }
        }
        QuadEstimate {
            value: fine,
            refinement_error: (fine - coarse).abs(),
        }
    }
}

const MASS_REQUIRED: f64 = 1.0 - 1e-6;

fn check_masses(grid: &QuadratureGrid, evs: &[&MixtureEvaluator]) -> Result<()> {
    for ev in evs {
        if ev.dim() != grid.dim() {
            return Err(Error::DimensionMismatch(ev.dim(), grid.dim()));
        }
        let mass = grid.integrate(|z| ev.density(z)).value;
        if mass < MASS_REQUIRED {
            return Err(Error::GridMassDeficit {
                covered: mass,
                required: MASS_REQUIRED,
            });
        }
    }
    Ok(())
}

/// Total variation distance `(1/2) int |a(z) - b(z)| dz` between two mixtures,
/// by tensor-grid quadrature. Requires matching dims <= 3 and a grid covering
/// at least `1 - 1e-6` of both masses.
pub fn tv_continuous(
    a: &MixtureDensity,
    b: &MixtureDensity,
    grid: &QuadratureGrid,
) -> Result<QuadEstimate> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.dim() > 3 {
        return Err(Error::DimTooHigh(a.dim()));
    }
    let ea = a.evaluator();
    let eb = b.evaluator();
    check_masses(grid, &[&ea, &eb])?;
    Ok(grid.integrate(|z| 0.5 * (ea.density(z) - eb.density(z)).abs()))
}

/// Generalized JS divergence between two mixtures with mixing constant
/// `c in (0, 1)`, by quadrature of the pointwise integrand
/// `(1-c) a ln(a/m) + c b ln(b/m)`, `m = (1-c) a + c b`.
pub fn js_continuous(
    a: &MixtureDensity,
    b: &MixtureDensity,
    c: f64,
    grid: &QuadratureGrid,
) -> Result<QuadEstimate> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.dim() > 3 {
        return Err(Error::DimTooHigh(a.dim()));
    }
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "mixing constant must lie in (0,1), got {c}"
        )));
    }
    let ea = a.evaluator();
    let eb = b.evaluator();
    check_masses(grid, &[&ea, &eb])?;
    let mut est = grid.integrate(|z| {
        let pa = ea.density(z);
        let pb = eb.density(z);
        let m = (1.0 - c) * pa + c * pb;
        let mut v = 0.0;
        if pa > 0.0 && m > 0.0 {
            v += (1.0 - c) * pa * (pa / m).ln();
        }
        if pb > 0.0 && m > 0.0 {
            v += c * pb * (pb / m).ln();
        }
        v
    });
    est.value = est.value.max(0.0);
    Ok(est)
}
