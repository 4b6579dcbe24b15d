//! Exact ground-truth computations on scenario specifications: Bayes
//! classifiers and error rates, Monte-Carlo true risks, posterior
//! disagreement between domains and the label-conditioned information terms.
//!
//! Every integral runs on deterministic tensor-grid quadrature restricted to
//! dim <= 3; transformed representations are handled exactly for affine maps
//! only (Gaussian pushforward). Verification scenarios are constructed in
//! 1-D/2-D by design.

use nalgebra::{DMatrix, DVector};

use crate::divergences::{
    generalized_js, js_continuous, tv_continuous, MixtureDensity, QuadEstimate, QuadratureGrid,
};
use crate::learner::{forward, pseudo_label, ModelParams};
use crate::shiftgen::{sample, DomainSpec, DomainTag, ShiftScenario};
use crate::weights::ImportanceWeights;
use crate::{Error, Result};

/// A representation map applied to a domain before oracle computations.
#[derive(Debug, Clone)]
pub enum ZMap {
    Identity,
    /// `z = linear x + offset` (column convention).
    Affine {
        linear: DMatrix<f64>,
        offset: DVector<f64>,
    },
}

impl ZMap {
    /// Extracts the affine form of a model's transformation, failing for
    /// nonlinear stacks.
    pub fn from_model(m: &ModelParams) -> Result<Self> {
        match m.as_affine() {
            Some((linear, offset)) => Ok(ZMap::Affine { linear, offset }),
            None => Err(Error::NonAffineTransform),
        }
    }

    /// True when the linear part is (numerically) zero: the map sends every
    /// distribution to the same point mass, so pushforward divergences of a
    /// shared map vanish.
    pub fn is_collapse(&self) -> bool {
        match self {
            ZMap::Identity => false,
            ZMap::Affine { linear, .. } => linear.amax() == 0.0,
        }
    }

    pub fn push(&self, d: &MixtureDensity) -> Result<MixtureDensity> {
        match self {
            ZMap::Identity => Ok(d.clone()),
            ZMap::Affine { linear, offset } => d.affine_pushforward(linear, offset),
        }
    }

    pub fn push_domain(&self, spec: &DomainSpec) -> Result<DomainSpec> {
        let conds = spec
            .class_conditionals()
            .iter()
            .map(|c| self.push(c))
            .collect::<Result<Vec<_>>>()?;
        DomainSpec::new(conds, spec.label_dist().clone())
    }
}

/// The posterior-argmax classifier of a domain, with ties toward the smaller
/// class index.
pub struct BayesClassifier {
    log_priors: Vec<f64>,
    evaluators: Vec<crate::divergences::MixtureEvaluator>,
}

/// Builds the Bayes classifier `argmax_k labelDist[k] density_k(z)`.
pub fn bayes_classifier(spec: &DomainSpec) -> BayesClassifier {
    BayesClassifier {
        log_priors: spec
            .label_dist()
            .as_slice()
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect(),
        evaluators: spec
            .class_conditionals()
            .iter()
            .map(|c| c.evaluator())
            .collect(),
    }
}

impl BayesClassifier {
    pub fn classify(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, (lp, ev)) in self.log_priors.iter().zip(&self.evaluators).enumerate() {
            if lp.is_finite() {
                // densities can underflow at the grid edge; the score order is
                // still deterministic
                let score = lp + ev.density(z).max(f64::MIN_POSITIVE).ln();
                if score > best_score {
                    best_score = score;
                    best = k;
                }
            }
        }
        best
    }
}

/// 1-D decision threshold of a two-class classifier found by bisection over
/// `[lo, hi]` (assumes a single crossing, class 0 on the left).
pub fn decision_threshold_1d<F: Fn(&[f64]) -> usize>(f: F, lo: f64, hi: f64) -> f64 {
    let mut a = lo;
    let mut b = hi;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if f(&[mid]) == 0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Misclassification mass of an arbitrary classifier under the domain:
/// `int sum_{k != f(z)} labelDist[k] density_k(z) dz` by quadrature.
pub fn classification_error<F: FnMut(&[f64]) -> usize>(
    spec: &DomainSpec,
    mut f: F,
    grid: &QuadratureGrid,
) -> Result<QuadEstimate> {
    if spec.dim() > 3 {
        return Err(Error::DimTooHigh(spec.dim()));
    }
    let evs: Vec<_> = spec
        .class_conditionals()
        .iter()
        .map(|c| c.evaluator())
        .collect();
    let priors = spec.label_dist().as_slice().to_vec();
    Ok(grid.integrate(|z| {
        let winner = f(z);
        let mut mass = 0.0;
        for (k, ev) in evs.iter().enumerate() {
            if k != winner {
                mass += priors[k] * ev.density(z);
            }
        }
        mass
    }))
}

/// Grid covering every class conditional of the given domains.
pub fn grid_for(specs: &[&DomainSpec], intervals: Option<usize>) -> Result<QuadratureGrid> {
    let all: Vec<&MixtureDensity> = specs
        .iter()
        .flat_map(|s| s.class_conditionals().iter())
        .collect();
    QuadratureGrid::covering_with(&all, intervals)
}

/// Bayes error rate: the misclassification mass of the Bayes classifier.
pub fn bayes_error(spec: &DomainSpec, grid: &QuadratureGrid) -> Result<QuadEstimate> {
    let f = bayes_classifier(spec);
    classification_error(spec, |z| f.classify(z), grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    ZeroOne,
    CrossEntropy,
}

/// Monte-Carlo configuration for true-risk estimation.
#[derive(Debug, Clone, Copy)]
pub struct MonteCarloConfig {
    pub n: usize,
    pub seed: u64,
}

impl MonteCarloConfig {
    pub fn new(seed: u64) -> Self {
        Self { n: 200_000, seed }
    }

    pub fn with_n(seed: u64, n: usize) -> Self {
        Self { n, seed }
    }
}

/// A Monte-Carlo risk estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn summarize(losses: &[f64]) -> RiskEstimate {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
    RiskEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
    }
}

/// True risk of a model under the domain: `E[loss(h(g(X)), Y)]` by Monte
/// Carlo with the reported standard error.
pub fn true_risk(
    spec: &DomainSpec,
    m: &ModelParams,
    loss: LossKind,
    mc: MonteCarloConfig,
) -> Result<RiskEstimate> {
    if spec.dim() != m.input_dim() {
        return Err(Error::DimensionMismatch(spec.dim(), m.input_dim()));
    }
    let set = sample(spec, mc.n, mc.seed, DomainTag::Source)?;
    let (_, probs) = forward(m, &set.features)?;
    let losses: Vec<f64> = match loss {
        LossKind::ZeroOne => {
            let preds = pseudo_label(&probs);
            preds
                .iter()
                .zip(&set.labels)
                .map(|(&p, &y)| if p == y { 0.0 } else { 1.0 })
                .collect()
        }
        LossKind::CrossEntropy => set
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -(probs[(i, y)].max(1e-12)).ln())
            .collect(),
    };
    Ok(summarize(&losses))
}

/// Zero-one true risk of an arbitrary classifier (closure form).
pub fn true_risk_fn<F: FnMut(&[f64]) -> usize>(
    spec: &DomainSpec,
    mut f: F,
    mc: MonteCarloConfig,
) -> Result<RiskEstimate> {
    let set = sample(spec, mc.n, mc.seed, DomainTag::Source)?;
    let dim = set.dim();
    let mut row = vec![0.0; dim];
    let losses: Vec<f64> = (0..set.len())
        .map(|i| {
            for j in 0..dim {
                row[j] = set.features[(i, j)];
            }
            if f(&row) == set.labels[i] {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Ok(summarize(&losses))
}

fn reweighted_source(sc: &ShiftScenario, w: &ImportanceWeights) -> Result<DomainSpec> {
    if w.k() != sc.num_classes() {
        return Err(Error::DimensionMismatch(w.k(), sc.num_classes()));
    }
    sc.source.reweighted(w.as_slice())
}

/// Pointwise generalized JS between two discrete vectors given as slices
/// (scratch-free small helper for the quadrature integrands).
fn js_vectors(p: &[f64], q: &[f64], c: f64) -> f64 {
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = (1.0 - c) * pi + c * qi;
        if pi > 0.0 && mi > 0.0 {
            sum += (1.0 - c) * pi * (pi / mi).ln();
        }
        if qi > 0.0 && mi > 0.0 {
            sum += c * qi * (qi / mi).ln();
        }
    }
    sum.max(0.0)
}

/// Disagreement on posterior distributions between the w-weighted source and
/// the target in the representation space:
/// `int max{p^w_Z, q_Z}(z) d_JS(posterior_P^w(z), posterior_Q(z)) dz`.
pub fn posterior_disagreement(
    sc: &ShiftScenario,
    w: &ImportanceWeights,
    map: &ZMap,
    grid_intervals: Option<usize>,
) -> Result<QuadEstimate> {
    let pw = map.push_domain(&reweighted_source(sc, w)?)?;
    let q = map.push_domain(&sc.target)?;
    if pw.dim() > 3 {
        return Err(Error::DimTooHigh(pw.dim()));
    }
    let grid = grid_for(&[&pw, &q], grid_intervals)?;
    let k = pw.num_classes();
    let pw_priors = pw.label_dist().as_slice().to_vec();
    let q_priors = q.label_dist().as_slice().to_vec();
    let pw_evs: Vec<_> = pw.class_conditionals().iter().map(|c| c.evaluator()).collect();
    let q_evs: Vec<_> = q.class_conditionals().iter().map(|c| c.evaluator()).collect();
    let mut post_p = vec![0.0; k];
    let mut post_q = vec![0.0; k];
    Ok(grid.integrate(|z| {
        let mut pz = 0.0;
        let mut qz = 0.0;
        for y in 0..k {
            post_p[y] = pw_priors[y] * pw_evs[y].density(z);
            post_q[y] = q_priors[y] * q_evs[y].density(z);
            pz += post_p[y];
            qz += post_q[y];
        }
        if pz <= 0.0 || qz <= 0.0 {
            return 0.0;
        }
        for y in 0..k {
            post_p[y] /= pz;
            post_q[y] /= qz;
        }
        pz.max(qz) * js_vectors(&post_p, &post_q, 0.5)
    }))
}

/// Label-conditioned dependence between representation and domain:
/// the expectation under `R^w_Y = (1-a) P^w_Y + a Q_Y` of the per-class
/// generalized JS `d_{JS,a}(P^w_{Z|Y}, Q_{Z|Y})` (quadrature per class).
pub fn conditional_mutual_info(
    sc: &ShiftScenario,
    w: &ImportanceWeights,
    a: f64,
    map: &ZMap,
    grid_intervals: Option<usize>,
) -> Result<QuadEstimate> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "domain mass a must lie in (0,1), got {a}"
        )));
    }
    let pw = map.push_domain(&reweighted_source(sc, w)?)?;
    let q = map.push_domain(&sc.target)?;
    if pw.dim() > 3 {
        return Err(Error::DimTooHigh(pw.dim()));
    }
    let k = pw.num_classes();
    let mut value = 0.0;
    let mut err = 0.0;
    for y in 0..k {
        let r_y = (1.0 - a) * pw.label_dist().get(y) + a * q.label_dist().get(y);
        if r_y == 0.0 {
            continue;
        }
        let pc = pw.class_conditional(y);
        let qc = q.class_conditional(y);
        let grid = QuadratureGrid::covering_with(&[pc, qc], grid_intervals)?;
        let est = js_continuous(pc, qc, a, &grid)?;
        value += r_y * est.value;
        err += r_y * est.refinement_error;
    }
    Ok(QuadEstimate {
        value,
        refinement_error: err,
    })
}

/// The two marginal generalized-JS terms of the necessity assumption:
/// `d_{JS,a}(P^w_Y, Q_Y)` (exact, discrete) and `d_{JS,a}(P^w_Z, Q_Z)`
/// (quadrature on the feature marginals).
#[derive(Debug, Clone, Copy)]
pub struct MarginalJsTerms {
    pub label_term: f64,
    pub z_term: QuadEstimate,
    /// `label_term >= z_term` within the slack.
    pub assumption_met: bool,
}

pub fn marginal_mutual_info(
    sc: &ShiftScenario,
    w: &ImportanceWeights,
    a: f64,
    map: &ZMap,
    grid_intervals: Option<usize>,
) -> Result<MarginalJsTerms> {
    let pw = reweighted_source(sc, w)?;
    let label_term = generalized_js(pw.label_dist(), sc.target.label_dist(), a)?;
    let z_term = if map.is_collapse() {
        // a shared constant map sends both marginals to the same point mass
        QuadEstimate {
            value: 0.0,
            refinement_error: 0.0,
        }
    } else {
        let pz = map.push(&pw.marginal_density()?)?;
        let qz = map.push(&sc.target.marginal_density()?)?;
        if pz.dim() > 3 {
            return Err(Error::DimTooHigh(pz.dim()));
        }
        let grid = QuadratureGrid::covering_with(&[&pz, &qz], grid_intervals)?;
        js_continuous(&pz, &qz, a, &grid)?
    };
    let tol = z_term.refinement_error + 1e-9;
    Ok(MarginalJsTerms {
        label_term,
        z_term,
        assumption_met: label_term >= z_term.value - tol,
    })
}

/// Joint total variation `d_TV(P^w_{ZY}, Q_{ZY})`: half the summed-over-labels
/// integral of the absolute joint density difference.
pub fn joint_tv(
    sc: &ShiftScenario,
    w: &ImportanceWeights,
    map: &ZMap,
    grid_intervals: Option<usize>,
) -> Result<QuadEstimate> {
    let pw = map.push_domain(&reweighted_source(sc, w)?)?;
    let q = map.push_domain(&sc.target)?;
    if pw.dim() > 3 {
        return Err(Error::DimTooHigh(pw.dim()));
    }
    let mut value = 0.0;
    let mut err = 0.0;
    for y in 0..pw.num_classes() {
        let py = pw.label_dist().get(y);
        let qy = q.label_dist().get(y);
        let pc = pw.class_conditional(y);
        let qc = q.class_conditional(y);
        let grid = QuadratureGrid::covering_with(&[pc, qc], grid_intervals)?;
        let pe = pc.evaluator();
        let qe = qc.evaluator();
        let est = grid.integrate(|z| 0.5 * (py * pe.density(z) - qy * qe.density(z)).abs());
        value += est.value;
        err += est.refinement_error;
    }
    Ok(QuadEstimate {
        value,
        refinement_error: err,
    })
}

/// Per-class total variation `d_TV(P^w_{Z|y}, Q_{Z|y})` for every class.
pub fn class_conditional_tvs(
    sc: &ShiftScenario,
    map: &ZMap,
    grid_intervals: Option<usize>,
) -> Result<Vec<QuadEstimate>> {
    (0..sc.num_classes())
        .map(|y| {
            let pc = map.push(sc.source.class_conditional(y))?;
            let qc = map.push(sc.target.class_conditional(y))?;
            let grid = QuadratureGrid::covering_with(&[&pc, &qc], grid_intervals)?;
            tv_continuous(&pc, &qc, &grid)
        })
        .collect()
}
