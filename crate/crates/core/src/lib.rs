//! Numerical toolkit for dataset shift correction under generalized label shift.
//!
//! The crate models a source distribution `P` and a target distribution `Q`
//! over features and labels that differ both in their label marginals
//! (`P_Y != Q_Y`, label shift) and in their class conditionals
//! (`P_{X|Y} != Q_{X|Y}`, conditional shift). It provides:
//!
//! - [`divergences`]: KL, generalized Jensen-Shannon and total-variation
//!   measures on discrete label distributions and on low-dimensional Gaussian
//!   mixtures via deterministic tensor-grid quadrature.
//! - [`kernels`]: kernel functions, Gram matrices, MMD² estimators and the
//!   class-wise conditional discrepancy used as the alignment objective.
//! - [`shiftgen`]: seeded generators for source/target Gaussian-mixture domain
//!   pairs with controllable label and conditional shift, plus the
//!   class-subsampling protocol.
//! - [`weights`]: black-box importance-weight estimation from a predictor's
//!   confusion joint (constrained least squares via projected gradient, with a
//!   pseudo-inverse fallback) and the oracle weight `w* = q_Y / p_Y`.
//! - [`learner`]: the `(g, h, w)` triplet — a small feed-forward transformation,
//!   a linear-softmax hypothesis and a per-class weight — with manual
//!   differentiation, four shift-correction objectives and the alternating
//!   training loop with warm-up and pseudo-labels.
//! - [`oracle`]: exact ground-truth computations on scenario specifications:
//!   Bayes classifiers and error rates, Monte-Carlo true risks, posterior
//!   disagreement and conditional mutual information.
//! - [`bounds`]: end-to-end checks of the generalization inequalities with
//!   slack reports and explicit tolerance decompositions.

#![forbid(unsafe_code)]

use thiserror::Error;

pub mod bounds;
pub mod divergences;
pub mod kernels;
pub mod learner;
pub mod oracle;
pub mod rng;
pub mod shiftgen;
pub mod weights;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance matrix is not symmetric positive-definite")]
    NotPositiveDefinite,

    #[error("quadrature oracle restricted to dim <= 3, got {0}")]
    DimTooHigh(usize),

    #[error("quadrature grid covers only {covered:.9} of a density mass (need >= {required})")]
    GridMassDeficit { covered: f64, required: f64 },

    #[error("class {class} absent from {side} samples")]
    ClassAbsent { class: usize, side: &'static str },

    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        trace: Box<learner::TrainTrace>,
    },

    #[error("transformation is not affine; exact pushforward unavailable")]
    NonAffineTransform,

    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Formats a float with 9 significant digits, `%.9g` style. Used by every CSV
/// writer in the crate so that reruns are byte-identical.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            let t = s.trim_end_matches('0').trim_end_matches('.');
            t.to_string()
        } else {
            s
        }
    } else {
        let s = format!("{:.8e}", x);
        match s.split_once('e') {
            Some((mantissa, exp)) => {
                let m = if mantissa.contains('.') {
                    mantissa.trim_end_matches('0').trim_end_matches('.')
                } else {
                    mantissa
                };
                format!("{m}e{exp}")
            }
            None => s,
        }
    }
}

/// FNV-1a 64-bit digest, used to fingerprint check inputs in reports.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_g9_basic() {
        assert_eq!(fmt_g9(0.0), "0");
        assert_eq!(fmt_g9(1.0), "1");
        assert_eq!(fmt_g9(0.25), "0.25");
        assert_eq!(fmt_g9(-3.0), "-3");
        assert_eq!(fmt_g9(123456789.0), "123456789");
        assert_eq!(fmt_g9(0.123456789), "0.123456789");
    }

    #[test]
    fn fmt_g9_rounds_to_nine_significant_digits() {
        assert_eq!(fmt_g9(0.123456789123), "0.123456789");
        assert_eq!(fmt_g9(1.23456789123e12), "1.23456789e12");
        assert_eq!(fmt_g9(1e-7), "1e-7");
    }

    #[test]
    fn fnv_digest_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
