//! Kernel functions, Gram matrices, marginal MMD and the class-wise
//! conditional discrepancy used for alignment objectives and bound estimation.
//!
//! The conditional discrepancy treats labels as discrete: with a
//! Kronecker-delta label kernel the conditional embedding discrepancy reduces
//! to a class-weighted sum of per-class MMD² terms, which is the canonical
//! form implemented here. Sample blocks are row matrices (one sample per row).

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergences::DiscreteDistribution;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Polynomial2,
    Laplacian,
    Gaussian,
}

impl KernelKind {
    pub fn needs_bandwidth(self) -> bool {
        matches!(self, KernelKind::Laplacian | KernelKind::Gaussian)
    }
}

/// A kernel function with its bandwidth. For the Gaussian kernel the
/// bandwidth is in squared feature units (`k = exp(-||a-b||^2 / sigma)`); for
/// the Laplacian it is in feature units (`k = exp(-||a-b||_1 / sigma)`);
/// linear and degree-2 polynomial kernels ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        if kind.needs_bandwidth() && !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "{kind:?} kernel needs a positive bandwidth, got {bandwidth}"
            )));
        }
        Ok(Self { kind, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, bandwidth)
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            bandwidth: 1.0,
        }
    }

    fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => dot(a, b),
            KernelKind::Polynomial2 => {
                let d = dot(a, b) + 1.0;
                d * d
            }
            KernelKind::Laplacian => {
                let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                (-l1 / self.bandwidth).exp()
            }
            KernelKind::Gaussian => {
                let sq: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let d = x - y;
                        d * d
                    })
                    .sum();
                (-sq / self.bandwidth).exp()
            }
        }
    }

}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates the kernel on two vectors of equal dimension.
pub fn kernel_eval(spec: &KernelSpec, z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::DimensionMismatch(z1.len(), z2.len()));
    }
    Ok(spec.eval_unchecked(z1, z2))
}

/// A kernel matrix between two sample blocks.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub spec: KernelSpec,
    pub entries: DMatrix<f64>,
}

fn row_slices(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Gram matrix `entries[i][j] = k(a_i, b_j)` between the rows of `a` and `b`.
pub fn gram(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<GramMatrix> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty("gram sample block"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(a.ncols(), b.ncols()));
    }
    let ra = row_slices(a);
    let rb = row_slices(b);
    let mut entries = DMatrix::zeros(ra.len(), rb.len());
    for (i, ri) in ra.iter().enumerate() {
        for (j, rj) in rb.iter().enumerate() {
            entries[(i, j)] = spec.eval_unchecked(ri, rj);
        }
    }
    Ok(GramMatrix {
        spec: *spec,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    Biased,
    Unbiased,
}

/// Squared maximum mean discrepancy between the rows of `s` and `t`.
///
/// Biased: `mean(K_ss) + mean(K_tt) - 2 mean(K_st)` (always >= 0 up to
/// roundoff). Unbiased: diagonal-excluded within-block means; may be slightly
/// negative and needs at least two samples per block.
pub fn mmd2(
    spec: &KernelSpec,
    s: &DMatrix<f64>,
    t: &DMatrix<f64>,
    estimator: MmdEstimator,
) -> Result<f64> {
    let m = s.nrows();
    let n = t.nrows();
    if m == 0 || n == 0 {
        return Err(Error::Empty("mmd sample block"));
    }
    if estimator == MmdEstimator::Unbiased && (m < 2 || n < 2) {
        return Err(Error::InvalidParameter(
            "unbiased mmd needs at least 2 samples per block".into(),
        ));
    }
    let kss = gram(spec, s, s)?.entries;
    let ktt = gram(spec, t, t)?.entries;
    let kst = gram(spec, s, t)?.entries;
    let cross = 2.0 * kst.sum() / (m as f64 * n as f64);
    let value = match estimator {
        MmdEstimator::Biased => {
            kss.sum() / (m as f64 * m as f64) + ktt.sum() / (n as f64 * n as f64) - cross
        }
        MmdEstimator::Unbiased => {
            let ss = (kss.sum() - kss.trace()) / (m as f64 * (m - 1) as f64);
            let tt = (ktt.sum() - ktt.trace()) / (n as f64 * (n - 1) as f64);
            ss + tt - cross
        }
    };
    Ok(value)
}

impl KernelSpec {
    /// Kernel value and the gradients with respect to both arguments for one
    /// pair, sharing the distance/dot computation. `g1 = d k / d a`,
    /// `g2 = d k / d b`.
    fn pair_eval_grads(&self, a: &[f64], b: &[f64], g1: &mut [f64], g2: &mut [f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => {
                g1.copy_from_slice(b);
                g2.copy_from_slice(a);
                dot(a, b)
            }
            KernelKind::Polynomial2 => {
                let base = dot(a, b) + 1.0;
                let f = 2.0 * base;
                for ((o1, o2), (&aj, &bj)) in g1.iter_mut().zip(g2.iter_mut()).zip(a.iter().zip(b))
                {
                    *o1 = f * bj;
                    *o2 = f * aj;
                }
                base * base
            }
            KernelKind::Laplacian => {
                let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                let k = (-l1 / self.bandwidth).exp();
                let f = -k / self.bandwidth;
                for ((o1, o2), (&aj, &bj)) in g1.iter_mut().zip(g2.iter_mut()).zip(a.iter().zip(b))
                {
                    let s = if aj == bj { 0.0 } else { (aj - bj).signum() };
                    *o1 = f * s;
                    *o2 = -f * s;
                }
                k
            }
            KernelKind::Gaussian => {
                let sq: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let d = x - y;
                        d * d
                    })
                    .sum();
                let k = (-sq / self.bandwidth).exp();
                let f = -2.0 * k / self.bandwidth;
                for ((o1, o2), (&aj, &bj)) in g1.iter_mut().zip(g2.iter_mut()).zip(a.iter().zip(b))
                {
                    let v = f * (aj - bj);
                    *o1 = v;
                    *o2 = -v;
                }
                k
            }
        }
    }
}

/// Biased MMD² together with its gradient with respect to every sample
/// coordinate. `ds` and `dt` have the shapes of `s` and `t`. Pair symmetry is
/// exploited: each unordered pair is visited once.
pub fn mmd2_biased_with_grad(
    spec: &KernelSpec,
    s: &DMatrix<f64>,
    t: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let m = s.nrows();
    let n = t.nrows();
    if m == 0 || n == 0 {
        return Err(Error::Empty("mmd sample block"));
    }
    if s.ncols() != t.ncols() {
        return Err(Error::DimensionMismatch(s.ncols(), t.ncols()));
    }
    let d = s.ncols();
    let rs = row_slices(s);
    let rt = row_slices(t);
    let mut value = 0.0;
    let mut ds = vec![0.0; m * d];
    let mut dt = vec![0.0; n * d];
    let mm = (m * m) as f64;
    let nn = (n * n) as f64;
    let mn = (m * n) as f64;
    let mut g1 = vec![0.0; d];
    let mut g2 = vec![0.0; d];

    // diagonal terms depend on the sample for non-radial kernels
    let diagonal_grad = matches!(spec.kind, KernelKind::Linear | KernelKind::Polynomial2);

    // within-S block
    for i in 0..m {
        value += spec.eval_unchecked(&rs[i], &rs[i]) / mm;
        if diagonal_grad {
            spec.pair_eval_grads(&rs[i], &rs[i], &mut g1, &mut g2);
            for (c, (&a, &b)) in g1.iter().zip(g2.iter()).enumerate() {
                ds[i * d + c] += (a + b) / mm;
            }
        }
        for j in (i + 1)..m {
            let k = spec.pair_eval_grads(&rs[i], &rs[j], &mut g1, &mut g2);
            value += 2.0 * k / mm;
            for (c, (&a, &b)) in g1.iter().zip(g2.iter()).enumerate() {
                ds[i * d + c] += 2.0 / mm * a;
                ds[j * d + c] += 2.0 / mm * b;
            }
        }
    }
    // within-T block
    for i in 0..n {
        value += spec.eval_unchecked(&rt[i], &rt[i]) / nn;
        if diagonal_grad {
            spec.pair_eval_grads(&rt[i], &rt[i], &mut g1, &mut g2);
            for (c, (&a, &b)) in g1.iter().zip(g2.iter()).enumerate() {
                dt[i * d + c] += (a + b) / nn;
            }
        }
        for j in (i + 1)..n {
            let k = spec.pair_eval_grads(&rt[i], &rt[j], &mut g1, &mut g2);
            value += 2.0 * k / nn;
            for (c, (&a, &b)) in g1.iter().zip(g2.iter()).enumerate() {
                dt[i * d + c] += 2.0 / nn * a;
                dt[j * d + c] += 2.0 / nn * b;
            }
        }
    }
    // cross block
    for i in 0..m {
        for j in 0..n {
            let k = spec.pair_eval_grads(&rs[i], &rt[j], &mut g1, &mut g2);
            value -= 2.0 * k / mn;
            for (c, (&a, &b)) in g1.iter().zip(g2.iter()).enumerate() {
                ds[i * d + c] -= 2.0 / mn * a;
                dt[j * d + c] -= 2.0 / mn * b;
            }
        }
    }
    let ds = DMatrix::from_fn(m, d, |i, c| ds[i * d + c]);
    let dt = DMatrix::from_fn(n, d, |i, c| dt[i * d + c]);
    Ok((value, ds, dt))
}

fn class_rows(x: &DMatrix<f64>, labels: &[usize], class: usize) -> DMatrix<f64> {
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == class)
        .map(|(i, _)| i)
        .collect();
    let mut out = DMatrix::zeros(idx.len(), x.ncols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from(&x.row(i));
    }
    out
}

/// Class-weighted sum of per-class MMD² terms:
/// `sum_y classWeights[y] * mmd2(S|Y=y, T|Y=y)`.
///
/// Every class with positive weight must be present on both sides (>= 1
/// sample biased, >= 2 unbiased); a missing class is reported as
/// [`Error::ClassAbsent`] naming the class, and the caller decides whether to
/// drop it or fail.
pub fn conditional_discrepancy(
    spec: &KernelSpec,
    source: (&DMatrix<f64>, &[usize]),
    target: (&DMatrix<f64>, &[usize]),
    class_weights: &DiscreteDistribution,
    estimator: MmdEstimator,
) -> Result<f64> {
    let (sx, sy) = source;
    let (tx, ty) = target;
    if sx.nrows() != sy.len() {
        return Err(Error::DimensionMismatch(sx.nrows(), sy.len()));
    }
    if tx.nrows() != ty.len() {
        return Err(Error::DimensionMismatch(tx.nrows(), ty.len()));
    }
    let k = class_weights.k();
    let min_count = if estimator == MmdEstimator::Unbiased { 2 } else { 1 };
    let mut total = 0.0;
    for class in 0..k {
        let w = class_weights.get(class);
        if w == 0.0 {
            continue;
        }
        let sb = class_rows(sx, sy, class);
        if sb.nrows() < min_count {
            return Err(Error::ClassAbsent {
                class,
                side: "source",
            });
        }
        let tb = class_rows(tx, ty, class);
        if tb.nrows() < min_count {
            return Err(Error::ClassAbsent {
                class,
                side: "target",
            });
        }
        total += w * mmd2(spec, &sb, &tb, estimator)?;
    }
    Ok(total)
}

/// As [`conditional_discrepancy`] (biased estimator) with gradients scattered
/// back to the full sample blocks.
pub fn conditional_discrepancy_with_grad(
    spec: &KernelSpec,
    source: (&DMatrix<f64>, &[usize]),
    target: (&DMatrix<f64>, &[usize]),
    class_weights: &DiscreteDistribution,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let (sx, sy) = source;
    let (tx, ty) = target;
    let mut value = 0.0;
    let mut ds = DMatrix::zeros(sx.nrows(), sx.ncols());
    let mut dt = DMatrix::zeros(tx.nrows(), tx.ncols());
    for class in 0..class_weights.k() {
        let w = class_weights.get(class);
        if w == 0.0 {
            continue;
        }
        let s_idx: Vec<usize> = sy
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        let t_idx: Vec<usize> = ty
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        if s_idx.is_empty() {
            return Err(Error::ClassAbsent {
                class,
                side: "source",
            });
        }
        if t_idx.is_empty() {
            return Err(Error::ClassAbsent {
                class,
                side: "target",
            });
        }
        let sb = class_rows(sx, sy, class);
        let tb = class_rows(tx, ty, class);
        let (v, dsb, dtb) = mmd2_biased_with_grad(spec, &sb, &tb)?;
        value += w * v;
        for (r, &i) in s_idx.iter().enumerate() {
            for j in 0..sx.ncols() {
                ds[(i, j)] += w * dsb[(r, j)];
            }
        }
        for (r, &i) in t_idx.iter().enumerate() {
            for j in 0..tx.ncols() {
                dt[(i, j)] += w * dtb[(r, j)];
            }
        }
    }
    Ok((value, ds, dt))
}

/// Median-heuristic bandwidth over at most 512 rows: the median pairwise
/// squared Euclidean distance for the Gaussian kernel, the median pairwise L1
/// distance for the Laplacian. Returns 1.0 for kernels without a bandwidth.
pub fn median_bandwidth(kind: KernelKind, data: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> f64 {
    if !kind.needs_bandwidth() {
        return 1.0;
    }
    let n = data.nrows();
    if n < 2 {
        return 1.0;
    }
    let take = n.min(512);
    let idx = if take == n {
        (0..n).collect::<Vec<_>>()
    } else {
        rng::sample_indices(rng, n, take)
    };
    let rows: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| data.row(i).iter().copied().collect())
        .collect();
    let mut dists = Vec::with_capacity(take * (take - 1) / 2);
    for i in 0..take {
        for j in (i + 1)..take {
            let d = match kind {
                KernelKind::Gaussian => rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| {
                        let d = a - b;
                        d * d
                    })
                    .sum(),
                KernelKind::Laplacian => rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum(),
                _ => unreachable!(),
            };
            dists.push(d);
        }
    }
    dists.sort_by(|a: &f64, b: &f64| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    median.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn kernel_spot_values() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(kernel_eval(&g, &[0.5, 2.0], &[0.5, 2.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            kernel_eval(&g, &[0.0], &[1.0]).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        let p = KernelSpec::new(KernelKind::Polynomial2, 1.0).unwrap();
        assert_eq!(kernel_eval(&p, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let l = KernelSpec::new(KernelKind::Laplacian, 2.0).unwrap();
        assert_abs_diff_eq!(
            kernel_eval(&l, &[0.0], &[1.0]).unwrap(),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        let lin = KernelSpec::linear();
        assert_eq!(kernel_eval(&lin, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert!(kernel_eval(&g, &[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn bandwidth_validation() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::new(KernelKind::Laplacian, -1.0).is_err());
        assert!(KernelSpec::new(KernelKind::Linear, 0.0).is_ok());
    }

    #[test]
    fn gram_singleton_and_transpose() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        let a = mat(1, 1, &[0.0]);
        let gm = gram(&g, &a, &a).unwrap();
        assert_eq!(gm.entries[(0, 0)], 1.0);

        let b = mat(3, 2, &[0.0, 1.0, -1.0, 0.5, 2.0, 2.0]);
        let c = mat(2, 2, &[1.0, 1.0, 0.0, -1.0]);
        let gbc = gram(&g, &b, &c).unwrap();
        let gcb = gram(&g, &c, &b).unwrap();
        assert_eq!(gbc.entries.transpose(), gcb.entries);
    }

    #[test]
    fn gram_hand_computed_two_by_two() {
        let g = KernelSpec::gaussian(2.0).unwrap();
        let a = mat(2, 1, &[0.0, 1.0]);
        let b = mat(2, 1, &[1.0, 3.0]);
        let gm = gram(&g, &a, &b).unwrap().entries;
        assert_abs_diff_eq!(gm[(0, 0)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(gm[(0, 1)], (-4.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(gm[(1, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gm[(1, 1)], (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn gram_psd_over_random_blocks() {
        let mut rng = stream(5, Purpose::MonteCarlo);
        let specs = [
            KernelSpec::linear(),
            KernelSpec::new(KernelKind::Polynomial2, 1.0).unwrap(),
            KernelSpec::new(KernelKind::Laplacian, 0.7).unwrap(),
            KernelSpec::gaussian(1.3).unwrap(),
        ];
        for trial in 0..200 {
            let n = 2 + trial % 8;
            let d = 1 + trial % 3;
            let data: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let x = mat(n, d, &data);
            let spec = &specs[trial % specs.len()];
            let g = gram(spec, &x, &x).unwrap().entries;
            let sym = (&g + g.transpose()) * 0.5;
            let trace = sym.trace();
            let eig = sym.symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-8 * trace.max(1.0), "kernel {spec:?}: min eig {min}");
        }
    }

    #[test]
    fn mmd2_identity_and_hand_value() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        let s = mat(3, 1, &[0.0, 1.0, 2.0]);
        assert_abs_diff_eq!(
            mmd2(&g, &s, &s.clone(), MmdEstimator::Biased).unwrap(),
            0.0,
            epsilon = 1e-14
        );
        // singletons {0}, {1}: 1 + 1 - 2 e^{-1}
        let a = mat(1, 1, &[0.0]);
        let b = mat(1, 1, &[1.0]);
        assert_abs_diff_eq!(
            mmd2(&g, &a, &b, MmdEstimator::Biased).unwrap(),
            2.0 - 2.0 * (-1.0f64).exp(),
            epsilon = 1e-15
        );
        assert!(mmd2(&g, &a, &b, MmdEstimator::Unbiased).is_err());
    }

    #[test]
    fn mmd2_biased_invariant_under_permutation() {
        let g = KernelSpec::gaussian(0.8).unwrap();
        let s = mat(4, 1, &[0.0, 0.5, 1.0, 1.5]);
        let t = mat(3, 1, &[2.0, 2.5, 3.0]);
        let sp = mat(4, 1, &[1.5, 0.0, 1.0, 0.5]);
        let tp = mat(3, 1, &[3.0, 2.0, 2.5]);
        let v1 = mmd2(&g, &s, &t, MmdEstimator::Biased).unwrap();
        let v2 = mmd2(&g, &sp, &tp, MmdEstimator::Biased).unwrap();
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-14);
    }

    #[test]
    fn unbiased_mmd_near_zero_for_identical_distributions() {
        // bootstrap oracle for the U-statistic std under H0
        use rand_distr::StandardNormal;
        let g = KernelSpec::gaussian(2.0).unwrap();
        let n = 1200;
        let mut rng = stream(42, Purpose::MonteCarlo);
        let draw = |rng: &mut ChaCha8Rng, n: usize| {
            let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            mat(n, 1, &data)
        };
        let s = draw(&mut rng, n);
        let t = draw(&mut rng, n);
        let observed = mmd2(&g, &s, &t, MmdEstimator::Unbiased).unwrap();

        let mut resampled = Vec::new();
        for _ in 0..40 {
            let pick = |rng: &mut ChaCha8Rng, x: &DMatrix<f64>| {
                let rows: Vec<f64> = (0..n).map(|_| x[(rng.random_range(0..n), 0)]).collect();
                mat(n, 1, &rows)
            };
            let sb = pick(&mut rng, &s);
            let tb = pick(&mut rng, &t);
            resampled.push(mmd2(&g, &sb, &tb, MmdEstimator::Unbiased).unwrap());
        }
        let mean = resampled.iter().sum::<f64>() / resampled.len() as f64;
        let var = resampled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (resampled.len() - 1) as f64;
        let std = var.sqrt();
        assert!(
            observed.abs() <= 3.0 * std + 1e-9,
            "observed {observed}, bootstrap std {std}"
        );
    }

    #[test]
    fn conditional_matches_composition_of_mmd_examples() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        // class 0 identical on both sides, class 1 singletons {0} vs {1}
        let sx = mat(2, 1, &[5.0, 0.0]);
        let sy = vec![0usize, 1];
        let tx = mat(2, 1, &[5.0, 1.0]);
        let ty = vec![0usize, 1];
        let cw = DiscreteDistribution::new(vec![0.5, 0.5]).unwrap();
        let v = conditional_discrepancy(&g, (&sx, &sy), (&tx, &ty), &cw, MmdEstimator::Biased)
            .unwrap();
        assert_abs_diff_eq!(v, 0.5 * (2.0 - 2.0 * (-1.0f64).exp()), epsilon = 1e-15);

        // weight concentrated on the identical class
        let cw0 = DiscreteDistribution::new(vec![1.0, 0.0]).unwrap();
        let v0 = conditional_discrepancy(&g, (&sx, &sy), (&tx, &ty), &cw0, MmdEstimator::Biased)
            .unwrap();
        assert_abs_diff_eq!(v0, 0.0, epsilon = 1e-15);

        // identical sets
        let v_same =
            conditional_discrepancy(&g, (&sx, &sy), (&sx.clone(), &sy), &cw, MmdEstimator::Biased)
                .unwrap();
        assert_abs_diff_eq!(v_same, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn conditional_reports_missing_class() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        let sx = mat(2, 1, &[0.0, 1.0]);
        let sy = vec![0usize, 1];
        let tx = mat(1, 1, &[0.0]);
        let ty = vec![0usize];
        let cw = DiscreteDistribution::new(vec![0.5, 0.5]).unwrap();
        match conditional_discrepancy(&g, (&sx, &sy), (&tx, &ty), &cw, MmdEstimator::Biased) {
            Err(Error::ClassAbsent { class: 1, side: "target" }) => {}
            other => panic!("expected class-absent error, got {other:?}"),
        }
    }

    #[test]
    fn conditional_equals_mmd_for_single_class() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        let sx = mat(3, 1, &[0.0, 0.3, 0.9]);
        let tx = mat(2, 1, &[1.0, 1.4]);
        let sy = vec![0usize; 3];
        let ty = vec![0usize; 2];
        let cw = DiscreteDistribution::new(vec![1.0]).unwrap();
        let v = conditional_discrepancy(&g, (&sx, &sy), (&tx, &ty), &cw, MmdEstimator::Biased)
            .unwrap();
        let m = mmd2(&g, &sx, &tx, MmdEstimator::Biased).unwrap();
        assert_eq!(v, m);
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = stream(9, Purpose::MonteCarlo);
        for spec in [
            KernelSpec::gaussian(0.9).unwrap(),
            KernelSpec::new(KernelKind::Polynomial2, 1.0).unwrap(),
        ] {
            let m = 4;
            let n = 3;
            let d = 2;
            let sdata: Vec<f64> = (0..m * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let tdata: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let s = mat(m, d, &sdata);
            let t = mat(n, d, &tdata);
            let (_, ds, dt) = mmd2_biased_with_grad(&spec, &s, &t).unwrap();
            let h = 1e-5;
            for i in 0..m {
                for j in 0..d {
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp[(i, j)] += h;
                    sm[(i, j)] -= h;
                    let fd = (mmd2(&spec, &sp, &t, MmdEstimator::Biased).unwrap()
                        - mmd2(&spec, &sm, &t, MmdEstimator::Biased).unwrap())
                        / (2.0 * h);
                    let rel = (ds[(i, j)] - fd).abs() / fd.abs().max(1e-3);
                    assert!(rel < 1e-4, "{spec:?} dS[{i},{j}]: analytic {} fd {fd}", ds[(i, j)]);
                }
            }
            for i in 0..n {
                for j in 0..d {
                    let mut tp = t.clone();
                    let mut tm = t.clone();
                    tp[(i, j)] += h;
                    tm[(i, j)] -= h;
                    let fd = (mmd2(&spec, &s, &tp, MmdEstimator::Biased).unwrap()
                        - mmd2(&spec, &s, &tm, MmdEstimator::Biased).unwrap())
                        / (2.0 * h);
                    let rel = (dt[(i, j)] - fd).abs() / fd.abs().max(1e-3);
                    assert!(rel < 1e-4, "{spec:?} dT[{i},{j}]: analytic {} fd {fd}", dt[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn median_bandwidth_deterministic_and_positive() {
        let mut rng1 = stream(2, Purpose::Bandwidth);
        let mut rng2 = stream(2, Purpose::Bandwidth);
        let x = mat(6, 1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b1 = median_bandwidth(KernelKind::Gaussian, &x, &mut rng1);
        let b2 = median_bandwidth(KernelKind::Gaussian, &x, &mut rng2);
        assert_eq!(b1, b2);
        assert!(b1 > 0.0);
        // 15 pairwise squared distances of 0..5: median is 4.0
        assert_eq!(b1, 4.0);
    }
}
