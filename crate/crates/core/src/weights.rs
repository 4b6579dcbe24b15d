//! Importance-weight estimation from a black-box predictor.
//!
//! Given the source confusion joint `C[i][j] ~ p(pred = i, label = j)` and the
//! predictor's marginal `q_hat` on the target, the weight vector solves
//!
//! ```text
//!     minimize   || q_hat - C w ||^2
//!     subject to w >= 0,  w' p_Y = 1
//! ```
//!
//! via projected gradient on the constraint set (Dykstra-corrected alternating
//! projections, step `1 / ||C'C||_2`) followed by an exact KKT polish on the
//! identified active set, certified by the reported KKT residual. A
//! Moore-Penrose fallback (pseudo-inverse, clip, rescale) is also provided.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::divergences::DiscreteDistribution;
use crate::{Error, Result};

/// Joint empirical distribution of (prediction, label) on the source:
/// `entries[i][j] ~ p(pred = i, label = j)`. Column sums recover the source
/// empirical label distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionJoint {
    entries: DMatrix<f64>,
}

impl ConfusionJoint {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(Error::DimensionMismatch(entries.nrows(), entries.ncols()));
        }
        if entries.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidDistribution(
                "confusion entries must be finite and nonnegative".into(),
            ));
        }
        let total = entries.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "confusion entries sum to {total}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { entries })
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Column sums: the source empirical label distribution.
    pub fn source_label_marginal(&self) -> DiscreteDistribution {
        let sums: Vec<f64> = (0..self.k()).map(|j| self.entries.column(j).sum()).collect();
        DiscreteDistribution::normalized(sums).expect("column sums of a validated joint")
    }
}

/// Plug-in estimate of the confusion joint from paired predictions and labels.
pub fn confusion_plugin(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionJoint> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut entries = DMatrix::zeros(k, k);
    let inc = 1.0 / preds.len() as f64;
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= k {
            return Err(Error::LabelOutOfRange(p, k));
        }
        if y >= k {
            return Err(Error::LabelOutOfRange(y, k));
        }
        entries[(p, y)] += inc;
    }
    ConfusionJoint::new(entries)
}

/// Plug-in estimate of a predictor's marginal over `k` classes.
pub fn pred_marginal(preds: &[usize], k: usize) -> Result<DiscreteDistribution> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut counts = vec![0.0; k];
    for &p in preds {
        if p >= k {
            return Err(Error::LabelOutOfRange(p, k));
        }
        counts[p] += 1.0;
    }
    DiscreteDistribution::normalized(counts)
}

/// Per-class importance weights `w >= 0` with `w' p_Y = 1`, so `w * p_Y` is a
/// probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ImportanceWeightsRepr", into = "ImportanceWeightsRepr")]
pub struct ImportanceWeights {
    w: Vec<f64>,
    reference_py: DiscreteDistribution,
}

#[derive(Serialize, Deserialize)]
struct ImportanceWeightsRepr {
    w: Vec<f64>,
    reference_py: DiscreteDistribution,
}

impl TryFrom<ImportanceWeightsRepr> for ImportanceWeights {
    type Error = Error;
    fn try_from(r: ImportanceWeightsRepr) -> Result<Self> {
        Self::new(r.w, r.reference_py)
    }
}

impl From<ImportanceWeights> for ImportanceWeightsRepr {
    fn from(w: ImportanceWeights) -> Self {
        Self {
            w: w.w,
            reference_py: w.reference_py,
        }
    }
}

impl ImportanceWeights {
    pub fn new(w: Vec<f64>, reference_py: DiscreteDistribution) -> Result<Self> {
        if w.len() != reference_py.k() {
            return Err(Error::DimensionMismatch(w.len(), reference_py.k()));
        }
        if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidParameter(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let dot: f64 = w
            .iter()
            .zip(reference_py.as_slice())
            .map(|(&wi, &pi)| wi * pi)
            .sum();
        if (dot - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "w' p_Y = {dot}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { w, reference_py })
    }

    /// The all-ones weight for the given reference (no correction).
    pub fn identity(reference_py: DiscreteDistribution) -> Self {
        let k = reference_py.k();
        Self {
            w: vec![1.0; k],
            reference_py,
        }
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, i: usize) -> f64 {
        self.w[i]
    }

    pub fn reference_py(&self) -> &DiscreteDistribution {
        &self.reference_py
    }

    /// The reweighted label distribution `w * p_Y` (exactly renormalized).
    pub fn reweighted_label_dist(&self) -> DiscreteDistribution {
        let v: Vec<f64> = self
            .w
            .iter()
            .zip(self.reference_py.as_slice())
            .map(|(&wi, &pi)| wi * pi)
            .collect();
        DiscreteDistribution::normalized(v).expect("validated weights")
    }

    /// Clips weights to `[0, w_max]` and rescales until `w' p_Y = 1` with no
    /// entry above the cap. Scaling down is always safe; scaling up touches
    /// only uncapped coordinates and re-clips, so the loop settles in at most
    /// `k` passes.
    pub fn clip_and_renormalize(&self, w_max: f64) -> Result<ImportanceWeights> {
        if !(w_max > 0.0) {
            return Err(Error::InvalidParameter("weight cap must be positive".into()));
        }
        let p = self.reference_py.as_slice();
        let mut w = self.w.clone();
        for _ in 0..=w.len() {
            for v in &mut w {
                *v = v.min(w_max);
            }
            let dot: f64 = w.iter().zip(p).map(|(&wi, &pi)| wi * pi).sum();
            if dot <= 0.0 {
                return Err(Error::InvalidParameter(
                    "clipping produced an all-zero weight".into(),
                ));
            }
            if (dot - 1.0).abs() <= 1e-12 {
                break;
            }
            if dot > 1.0 {
                // scaling down keeps every entry under the cap
                for v in &mut w {
                    *v /= dot;
                }
                break;
            }
            // dot < 1: raise the uncapped coordinates additively (handles
            // exact zeros) and re-clip on the next pass
            let free_p: f64 = w
                .iter()
                .zip(p)
                .filter(|(&wi, _)| wi < w_max)
                .map(|(_, &pi)| pi)
                .sum();
            if free_p <= 0.0 {
                // every coordinate capped yet dot < 1: the cap itself is
                // below the feasible range
                return Err(Error::InvalidParameter(format!(
                    "weight cap {w_max} incompatible with w' p_Y = 1"
                )));
            }
            let raise = (1.0 - dot) / free_p;
            for v in w.iter_mut() {
                if *v < w_max {
                    *v += raise;
                }
            }
        }
        // final exact renormalization absorbs accumulated roundoff
        let dot: f64 = w.iter().zip(p).map(|(&wi, &pi)| wi * pi).sum();
        for v in &mut w {
            *v /= dot;
        }
        ImportanceWeights::new(w, self.reference_py.clone())
    }
}

/// The oracle weight `w* = q_Y / p_Y`; requires strictly positive `p_Y`.
pub fn oracle_weights(
    p_y: &DiscreteDistribution,
    q_y: &DiscreteDistribution,
) -> Result<ImportanceWeights> {
    if p_y.k() != q_y.k() {
        return Err(Error::DimensionMismatch(p_y.k(), q_y.k()));
    }
    if !p_y.strictly_positive() {
        return Err(Error::InvalidParameter(
            "oracle weights need strictly positive p_Y".into(),
        ));
    }
    let w: Vec<f64> = p_y
        .as_slice()
        .iter()
        .zip(q_y.as_slice())
        .map(|(&p, &q)| q / p)
        .collect();
    ImportanceWeights::new(w, p_y.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMethod {
    Qp,
    Pinv,
}

/// Solver output: the weights plus the certification data that goes into the
/// weights JSON file.
#[derive(Debug, Clone)]
pub struct BbseSolution {
    pub weights: ImportanceWeights,
    pub method: WeightMethod,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub objective: f64,
}

/// Serialized form of a weight estimate:
/// `{"w": [...], "p_y": [...], "method": "...", "kkt_residual": x}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub w: Vec<f64>,
    pub p_y: Vec<f64>,
    pub method: WeightMethod,
    pub kkt_residual: f64,
}

impl From<&BbseSolution> for WeightsFile {
    fn from(s: &BbseSolution) -> Self {
        Self {
            w: s.weights.as_slice().to_vec(),
            p_y: s.weights.reference_py().as_slice().to_vec(),
            method: s.method,
            kkt_residual: s.kkt_residual,
        }
    }
}

impl WeightsFile {
    pub fn to_weights(&self) -> Result<ImportanceWeights> {
        ImportanceWeights::new(self.w.clone(), DiscreteDistribution::new(self.p_y.clone())?)
    }
}

fn objective_value(c: &DMatrix<f64>, q: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (c * w - q).norm_squared()
}

/// KKT residual of `min ||Cw - q||^2 s.t. w >= 0, p'w = 1` at `w`: the largest
/// of primal feasibility, stationarity on the (numerically) free coordinates
/// and dual feasibility on the active ones, with the equality multiplier fit
/// by least squares over the free set.
fn kkt_residual(c: &DMatrix<f64>, q: &DVector<f64>, p: &[f64], w: &DVector<f64>) -> f64 {
    let k = w.len();
    let grad = 2.0 * (c.transpose() * (c * w - q));
    let tau = 1e-10;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        if w[i] > tau {
            num += -grad[i] * p[i];
            den += p[i] * p[i];
        }
    }
    let lambda = if den > 0.0 { num / den } else { 0.0 };
    let mut res: f64 = 0.0;
    let dot: f64 = (0..k).map(|i| w[i] * p[i]).sum();
    res = res.max((dot - 1.0).abs());
    for i in 0..k {
        res = res.max((-w[i]).max(0.0));
        let mu = grad[i] + lambda * p[i];
        if w[i] > tau {
            res = res.max(mu.abs());
        } else {
            res = res.max((-mu).max(0.0));
        }
    }
    res
}

/// Dykstra's alternating projections onto `{w >= 0} ∩ {p'w = 1}`.
fn project_constraints(v: &DVector<f64>, p: &[f64]) -> DVector<f64> {
    let k = v.len();
    let pv = DVector::from_column_slice(p);
    let pp = pv.norm_squared();
    let mut x = v.clone();
    let mut inc_orthant = DVector::zeros(k);
    let mut inc_affine = DVector::zeros(k);
    for _ in 0..1000 {
        let y = &x + &inc_orthant;
        let y_proj = y.map(|t| t.max(0.0));
        inc_orthant = y - &y_proj;
        let z = &y_proj + &inc_affine;
        let z_proj = &z + &pv * ((1.0 - z.dot(&pv)) / pp);
        inc_affine = z - &z_proj;
        let feas = z_proj
            .iter()
            .fold(0.0f64, |m, &t| m.max((-t).max(0.0)))
            .max((z_proj.dot(&pv) - 1.0).abs());
        x = z_proj;
        if feas <= 1e-14 {
            break;
        }
    }
    x.map(|t| t.max(0.0))
}

/// Exact equality-constrained least squares on the free coordinate set; the
/// polish step that certifies the projected-gradient solution.
fn active_set_polish(
    c: &DMatrix<f64>,
    q: &DVector<f64>,
    p: &[f64],
    w: &DVector<f64>,
) -> Option<DVector<f64>> {
    let k = w.len();
    let free: Vec<usize> = (0..k).filter(|&i| w[i] > 1e-8).collect();
    if free.is_empty() {
        return None;
    }
    let f = free.len();
    let cf = DMatrix::from_fn(k, f, |r, j| c[(r, free[j])]);
    let pf = DVector::from_fn(f, |j, _| p[free[j]]);
    // KKT system: [2 Cf'Cf  pf; pf' 0] [wf; lambda] = [2 Cf'q; 1]
    let mut kkt = DMatrix::zeros(f + 1, f + 1);
    let ctc = 2.0 * cf.transpose() * &cf;
    kkt.view_mut((0, 0), (f, f)).copy_from(&ctc);
    for j in 0..f {
        kkt[(j, f)] = pf[j];
        kkt[(f, j)] = pf[j];
    }
    let mut rhs = DVector::zeros(f + 1);
    let ctq = 2.0 * cf.transpose() * q;
    rhs.rows_mut(0, f).copy_from(&ctq);
    rhs[f] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    let mut out = DVector::zeros(k);
    for (j, &i) in free.iter().enumerate() {
        let v = sol[j];
        if v < -1e-10 {
            return None;
        }
        out[i] = v.max(0.0);
    }
    // exact renormalization of the equality constraint
    let dot: f64 = (0..k).map(|i| out[i] * p[i]).sum();
    if dot <= 0.0 {
        return None;
    }
    Some(out / dot)
}

/// Exhaustive active-set enumeration for small `K`: solves the equality KKT
/// system on every free-coordinate subset and returns the candidate whose
/// primal and dual feasibility checks pass. Exact for convex problems; the
/// backstop when projected gradient stalls on an ill-conditioned instance.
fn enumerate_active_sets(
    c: &DMatrix<f64>,
    q: &DVector<f64>,
    p: &[f64],
) -> Option<DVector<f64>> {
    let k = p.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let free: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let f = free.len();
        let cf = DMatrix::from_fn(c.nrows(), f, |r, j| c[(r, free[j])]);
        let pf = DVector::from_fn(f, |j, _| p[free[j]]);
        let mut kkt = DMatrix::zeros(f + 1, f + 1);
        kkt.view_mut((0, 0), (f, f))
            .copy_from(&(2.0 * cf.transpose() * &cf));
        for j in 0..f {
            kkt[(j, f)] = pf[j];
            kkt[(f, j)] = pf[j];
        }
        let mut rhs = DVector::zeros(f + 1);
        rhs.rows_mut(0, f).copy_from(&(2.0 * cf.transpose() * q));
        rhs[f] = 1.0;
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        if (0..f).any(|j| sol[j] < -1e-12) {
            continue;
        }
        let mut w = DVector::zeros(k);
        for (j, &i) in free.iter().enumerate() {
            w[i] = sol[j].max(0.0);
        }
        let dot: f64 = (0..k).map(|i| w[i] * p[i]).sum();
        if dot <= 0.0 {
            continue;
        }
        w /= dot;
        let res = kkt_residual(c, q, p, &w);
        if best.as_ref().is_none_or(|(b, _)| res < *b) {
            best = Some((res, w));
        }
    }
    best.map(|(_, w)| w)
}

const QP_MAX_ITERS: usize = 10_000;
const QP_TOL: f64 = 1e-8;

/// Estimates importance weights from the predictor marginal and confusion
/// joint. `qp` solves the constrained least squares to a certified KKT
/// residual; `pinv` applies the Moore-Penrose inverse, clips negatives and
/// rescales onto the constraint.
pub fn bbse_solve(
    q_hat: &DiscreteDistribution,
    confusion: &ConfusionJoint,
    p_y: &DiscreteDistribution,
    method: WeightMethod,
) -> Result<BbseSolution> {
    let k = confusion.k();
    if q_hat.k() != k {
        return Err(Error::DimensionMismatch(q_hat.k(), k));
    }
    if p_y.k() != k {
        return Err(Error::DimensionMismatch(p_y.k(), k));
    }
    if !p_y.strictly_positive() {
        return Err(Error::InvalidParameter(
            "weight estimation needs strictly positive p_Y".into(),
        ));
    }
    let c = confusion.entries();
    let q = DVector::from_column_slice(q_hat.as_slice());
    let p = p_y.as_slice();

    match method {
        WeightMethod::Pinv => {
            let pinv = c
                .clone()
                .svd(true, true)
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::InvalidParameter(format!("svd failed: {e}")))?;
            let mut w = pinv * &q;
            w.apply(|v| *v = v.max(0.0));
            let dot: f64 = (0..k).map(|i| w[i] * p[i]).sum();
            if dot <= 0.0 {
                return Err(Error::NonConvergence {
                    residual: f64::INFINITY,
                    iterations: 0,
                });
            }
            w /= dot;
            let residual = kkt_residual(c, &q, p, &w);
            let objective = objective_value(c, &q, &w);
            Ok(BbseSolution {
                weights: ImportanceWeights::new(w.iter().copied().collect(), p_y.clone())?,
                method,
                kkt_residual: residual,
                iterations: 0,
                objective,
            })
        }
        WeightMethod::Qp => {
            let ctc = c.transpose() * c;
            let ctq = c.transpose() * &q;
            let spectral = ctc
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            let step = if spectral > 0.0 { 1.0 / spectral } else { 1.0 };
            // w = 1 is always feasible: p_Y sums to one
            let mut w = DVector::from_element(k, 1.0);
            let mut iterations = 0;
            let mut residual = kkt_residual(c, &q, p, &w);
            while iterations < QP_MAX_ITERS && residual > QP_TOL * 0.1 {
                let grad = 2.0 * (&ctc * &w - &ctq);
                w = project_constraints(&(&w - step * grad), p);
                iterations += 1;
                if iterations % 16 == 0 || iterations < 8 {
                    residual = kkt_residual(c, &q, p, &w);
                }
            }
            if let Some(polished) = active_set_polish(c, &q, p, &w) {
                let pol_res = kkt_residual(c, &q, p, &polished);
                if pol_res <= residual
                    && objective_value(c, &q, &polished) <= objective_value(c, &q, &w) + 1e-12
                {
                    w = polished;
                }
            }
            residual = kkt_residual(c, &q, p, &w);
            if residual > QP_TOL && k <= 12 {
                if let Some(we) = enumerate_active_sets(c, &q, p) {
                    let res = kkt_residual(c, &q, p, &we);
                    if res < residual {
                        w = we;
                        residual = res;
                    }
                }
            }
            if residual > QP_TOL {
                return Err(Error::NonConvergence {
                    residual,
                    iterations,
                });
            }
            let objective = objective_value(c, &q, &w);
            Ok(BbseSolution {
                weights: ImportanceWeights::new(w.iter().copied().collect(), p_y.clone())?,
                method,
                kkt_residual: residual,
                iterations,
                objective,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn confusion_from_counts() {
        // pairs (pred, label) = (0,0), (0,1), (1,1), (1,1)
        let preds = [0usize, 0, 1, 1];
        let labels = [0usize, 1, 1, 1];
        let c = confusion_plugin(&preds, &labels, 2).unwrap();
        let e = c.entries();
        assert_eq!(e[(0, 0)], 0.25);
        assert_eq!(e[(0, 1)], 0.25);
        assert_eq!(e[(1, 0)], 0.0);
        assert_eq!(e[(1, 1)], 0.5);
        assert_abs_diff_eq!(e.sum(), 1.0, epsilon = 1e-15);
        // column sums recover the empirical label marginal
        let m = c.source_label_marginal();
        assert_eq!(m.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn confusion_perfect_predictor_is_diagonal() {
        let labels = [0usize, 0, 0, 1, 1, 2];
        let c = confusion_plugin(&labels, &labels, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(c.entries()[(i, j)], 0.0);
                }
            }
        }
        assert_abs_diff_eq!(c.entries()[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn confusion_rejects_out_of_range() {
        assert!(matches!(
            confusion_plugin(&[2], &[0], 2),
            Err(Error::LabelOutOfRange(2, 2))
        ));
    }

    #[test]
    fn pred_marginal_counts() {
        let m = pred_marginal(&[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.as_slice(), &[0.5, 0.5]);
        let one_hot = pred_marginal(&[1, 1, 1], 3).unwrap();
        assert_eq!(one_hot.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn oracle_weight_values() {
        let w = oracle_weights(&dist(&[0.6, 0.4]), &dist(&[0.4, 0.6])).unwrap();
        assert_abs_diff_eq!(w.get(0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(1), 1.5, epsilon = 1e-15);

        let w2 = oracle_weights(&dist(&[0.5, 0.5]), &dist(&[0.9, 0.1])).unwrap();
        assert_eq!(w2.as_slice(), &[1.8, 0.2]);

        let id = oracle_weights(&dist(&[0.3, 0.7]), &dist(&[0.3, 0.7])).unwrap();
        assert_eq!(id.as_slice(), &[1.0, 1.0]);

        assert!(oracle_weights(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn bbse_diagonal_closed_form() {
        // C = diag(p_Y): a perfect predictor; q_hat = q_Y gives w = q/p
        let p = dist(&[0.6, 0.4]);
        let q_hat = dist(&[0.4, 0.6]);
        let c = ConfusionJoint::new(DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.4])).unwrap();
        for method in [WeightMethod::Qp, WeightMethod::Pinv] {
            let sol = bbse_solve(&q_hat, &c, &p, method).unwrap();
            assert_abs_diff_eq!(sol.weights.get(0), 2.0 / 3.0, epsilon = 1e-8);
            assert_abs_diff_eq!(sol.weights.get(1), 1.5, epsilon = 1e-8);
        }
    }

    #[test]
    fn bbse_identity_when_marginals_match() {
        // q_hat = C * 1: the all-ones weight is a zero-residual feasible point
        let c = ConfusionJoint::new(DMatrix::from_row_slice(
            2,
            2,
            &[0.5, 0.1, 0.1, 0.3],
        ))
        .unwrap();
        let p = c.source_label_marginal();
        let q_hat = dist(&[0.6, 0.4]);
        let sol = bbse_solve(&q_hat, &c, &p, WeightMethod::Qp).unwrap();
        assert_abs_diff_eq!(sol.weights.get(0), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.weights.get(1), 1.0, epsilon = 1e-7);
        assert!(sol.kkt_residual <= 1e-8);
        assert!(sol.objective <= 1e-16);
    }

    /// Independent dense grid search over the constraint slice (zooming); the
    /// oracle for QP correctness.
    fn grid_search_optimum(
        c: &ConfusionJoint,
        q_hat: &DiscreteDistribution,
        p: &DiscreteDistribution,
    ) -> f64 {
        let k = p.k();
        let cm = c.entries();
        let qv = DVector::from_column_slice(q_hat.as_slice());
        let obj = |w: &[f64]| {
            let wv = DVector::from_column_slice(w);
            (cm * wv - &qv).norm_squared()
        };
        let ps = p.as_slice();
        match k {
            2 => {
                let mut lo = 0.0;
                let mut hi = 1.0 / ps[0];
                let mut best = f64::INFINITY;
                for _ in 0..4 {
                    let steps = 800;
                    let mut best_t = lo;
                    for i in 0..=steps {
                        let t = lo + (hi - lo) * i as f64 / steps as f64;
                        let w1 = (1.0 - t * ps[0]) / ps[1];
                        if w1 < 0.0 {
                            continue;
                        }
                        let v = obj(&[t, w1]);
                        if v < best {
                            best = v;
                            best_t = t;
                        }
                    }
                    let span = (hi - lo) / steps as f64 * 4.0;
                    lo = (best_t - span).max(0.0);
                    hi = (best_t + span).min(1.0 / ps[0]);
                }
                best
            }
            3 => {
                let mut lo0 = 0.0;
                let mut hi0 = 1.0 / ps[0];
                let mut lo1 = 0.0;
                let mut hi1 = 1.0 / ps[1];
                let mut best = f64::INFINITY;
                for _ in 0..4 {
                    let steps = 200;
                    let (mut b0, mut b1) = (lo0, lo1);
                    for i in 0..=steps {
                        let w0 = lo0 + (hi0 - lo0) * i as f64 / steps as f64;
                        let rem = 1.0 - w0 * ps[0];
                        if rem < 0.0 {
                            continue;
                        }
                        for j in 0..=steps {
                            let w1 = lo1 + (hi1 - lo1) * j as f64 / steps as f64;
                            let w2 = (rem - w1 * ps[1]) / ps[2];
                            if w1 * ps[1] > rem || w2 < 0.0 {
                                continue;
                            }
                            let v = obj(&[w0, w1, w2]);
                            if v < best {
                                best = v;
                                b0 = w0;
                                b1 = w1;
                            }
                        }
                    }
                    let s0 = (hi0 - lo0) / steps as f64 * 4.0;
                    let s1 = (hi1 - lo1) / steps as f64 * 4.0;
                    lo0 = (b0 - s0).max(0.0);
                    hi0 = (b0 + s0).min(1.0 / ps[0]);
                    lo1 = (b1 - s1).max(0.0);
                    hi1 = (b1 + s1).min(1.0 / ps[1]);
                }
                best
            }
            _ => unreachable!("grid oracle supports K in {{2, 3}}"),
        }
    }

    fn random_instance(
        rng: &mut rand_chacha::ChaCha8Rng,
        k: usize,
    ) -> (ConfusionJoint, DiscreteDistribution, DiscreteDistribution) {
        let p = DiscreteDistribution::normalized(
            (0..k).map(|_| 0.15 + rng.random::<f64>()).collect(),
        )
        .unwrap();
        // conditional confusion columns: diagonally dominant noise
        let mut joint = DMatrix::zeros(k, k);
        for j in 0..k {
            let mut col: Vec<f64> = (0..k).map(|_| 0.05 + 0.3 * rng.random::<f64>()).collect();
            col[j] += 1.0;
            let s: f64 = col.iter().sum();
            for i in 0..k {
                joint[(i, j)] = col[i] / s * p.get(j);
            }
        }
        let c = ConfusionJoint::new(joint).unwrap();
        let q_hat =
            DiscreteDistribution::normalized((0..k).map(|_| 0.05 + rng.random::<f64>()).collect())
                .unwrap();
        (c, p, q_hat)
    }

    #[test]
    fn qp_matches_grid_search_oracle() {
        let mut rng = stream(41, Purpose::MonteCarlo);
        for trial in 0..30 {
            let k = 2 + trial % 2;
            let (c, p, q_hat) = random_instance(&mut rng, k);
            let sol = bbse_solve(&q_hat, &c, &p, WeightMethod::Qp).unwrap();
            assert!(sol.kkt_residual <= 1e-8, "trial {trial}: {}", sol.kkt_residual);
            let grid = grid_search_optimum(&c, &q_hat, &p);
            assert!(
                sol.objective <= grid + 1e-6,
                "trial {trial}: qp {} vs grid {grid}",
                sol.objective
            );
            assert!(
                sol.objective >= grid - 1e-6,
                "trial {trial}: qp {} vs grid {grid}",
                sol.objective
            );
        }
    }

    #[test]
    fn qp_and_pinv_agree_when_pinv_feasible() {
        let mut rng = stream(43, Purpose::MonteCarlo);
        let mut agreements = 0;
        for trial in 0..40 {
            let k = 2 + trial % 2;
            let (c, p, q_hat) = random_instance(&mut rng, k);
            let pinv = bbse_solve(&q_hat, &c, &p, WeightMethod::Pinv).unwrap();
            // feasible-and-optimal means a (near) zero KKT residual
            if pinv.kkt_residual <= 1e-9 {
                agreements += 1;
                let qp = bbse_solve(&q_hat, &c, &p, WeightMethod::Qp).unwrap();
                let max_diff = pinv
                    .weights
                    .as_slice()
                    .iter()
                    .zip(qp.weights.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(max_diff < 1e-6, "trial {trial}: diff {max_diff}");
            }
        }
        assert!(agreements > 0, "no feasible pinv instances sampled");
    }

    #[test]
    fn degenerate_qhat_with_empty_classes_is_allowed() {
        let c = ConfusionJoint::new(DMatrix::from_row_slice(2, 2, &[0.55, 0.05, 0.05, 0.35]))
            .unwrap();
        let p = c.source_label_marginal();
        let q_hat = dist(&[1.0, 0.0]);
        let sol = bbse_solve(&q_hat, &c, &p, WeightMethod::Qp).unwrap();
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn clip_and_renormalize_respects_cap_and_constraint() {
        let p = dist(&[0.5, 0.25, 0.25]);
        let w = ImportanceWeights::new(vec![0.2, 0.2, 3.4], p.clone()).unwrap();
        let clipped = w.clip_and_renormalize(2.0).unwrap();
        assert!(clipped.as_slice().iter().all(|&v| v <= 2.0 + 1e-12));
        let dot: f64 = clipped
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(&a, &b)| a * b)
            .sum();
        assert_abs_diff_eq!(dot, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_file_roundtrip() {
        let p = dist(&[0.6, 0.4]);
        let sol = BbseSolution {
            weights: oracle_weights(&p, &dist(&[0.4, 0.6])).unwrap(),
            method: WeightMethod::Qp,
            kkt_residual: 1e-12,
            iterations: 5,
            objective: 0.0,
        };
        let file = WeightsFile::from(&sol);
        let json = serde_json::to_string(&file).unwrap();
        assert!(json.contains("\"method\":\"qp\""));
        let back: WeightsFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_weights().unwrap(), sol.weights);
    }
}
