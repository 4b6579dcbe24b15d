//! Synthetic source/target domain pairs with controllable conditional shift
//! and label shift, plus the class-subsampling protocol.
//!
//! Class means sit on a deterministic lattice `3 * e_{y mod dim} * (1 + floor(y / dim))`
//! with pairwise separation >= 3 feature units, so separability is a
//! controllable knob (unit covariance by default, isotropic scale
//! configurable). Target class means are the source means translated by
//! `delta` along seeded unit directions. Everything is reproducible from the
//! scenario seed through named ChaCha streams.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::divergences::{DiscreteDistribution, MixtureDensity};
use crate::rng::{sample_indices, stream, Purpose};
use crate::{fmt_g9, Error, Result};

/// One domain: a class-conditional feature density per class plus the label
/// distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainSpecRepr", into = "DomainSpecRepr")]
pub struct DomainSpec {
    class_conditionals: Vec<MixtureDensity>,
    label_dist: DiscreteDistribution,
}

#[derive(Serialize, Deserialize)]
struct DomainSpecRepr {
    class_conditionals: Vec<MixtureDensity>,
    label_dist: DiscreteDistribution,
}

impl TryFrom<DomainSpecRepr> for DomainSpec {
    type Error = Error;
    fn try_from(r: DomainSpecRepr) -> Result<Self> {
        Self::new(r.class_conditionals, r.label_dist)
    }
}

impl From<DomainSpec> for DomainSpecRepr {
    fn from(d: DomainSpec) -> Self {
        Self {
            class_conditionals: d.class_conditionals,
            label_dist: d.label_dist,
        }
    }
}

impl DomainSpec {
    pub fn new(
        class_conditionals: Vec<MixtureDensity>,
        label_dist: DiscreteDistribution,
    ) -> Result<Self> {
        if class_conditionals.is_empty() {
            return Err(Error::Empty("class conditionals"));
        }
        if class_conditionals.len() != label_dist.k() {
            return Err(Error::DimensionMismatch(
                class_conditionals.len(),
                label_dist.k(),
            ));
        }
        let dim = class_conditionals[0].dim();
        for c in &class_conditionals {
            if c.dim() != dim {
                return Err(Error::DimensionMismatch(c.dim(), dim));
            }
        }
        Ok(Self {
            class_conditionals,
            label_dist,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_dist.k()
    }

    pub fn dim(&self) -> usize {
        self.class_conditionals[0].dim()
    }

    pub fn label_dist(&self) -> &DiscreteDistribution {
        &self.label_dist
    }

    pub fn class_conditional(&self, y: usize) -> &MixtureDensity {
        &self.class_conditionals[y]
    }

    pub fn class_conditionals(&self) -> &[MixtureDensity] {
        &self.class_conditionals
    }

    /// The feature marginal: the label-weighted mixture of class conditionals.
    pub fn marginal_density(&self) -> Result<MixtureDensity> {
        let parts: Vec<(f64, &MixtureDensity)> = self
            .class_conditionals
            .iter()
            .enumerate()
            .map(|(y, c)| (self.label_dist.get(y), c))
            .collect();
        MixtureDensity::mix(&parts)
    }

    /// The same conditionals under the reweighted label distribution
    /// `w * p_Y` (exact renormalization).
    pub fn reweighted(&self, w: &[f64]) -> Result<DomainSpec> {
        if w.len() != self.num_classes() {
            return Err(Error::DimensionMismatch(w.len(), self.num_classes()));
        }
        let probs: Vec<f64> = w
            .iter()
            .zip(self.label_dist.as_slice())
            .map(|(&wi, &pi)| wi * pi)
            .collect();
        DomainSpec::new(
            self.class_conditionals.clone(),
            DiscreteDistribution::normalized(probs)?,
        )
    }
}

/// How target class means are displaced relative to the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDirections {
    /// One seeded unit direction per class.
    PerClass,
    /// A single seeded unit direction shared by all classes.
    Shared,
}

/// The exact generative description of a source/target pair; ground truth for
/// every oracle computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShiftScenarioRepr", into = "ShiftScenarioRepr")]
pub struct ShiftScenario {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub conditional_shift_magnitude: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ShiftScenarioRepr {
    source: DomainSpec,
    target: DomainSpec,
    conditional_shift_magnitude: f64,
    seed: u64,
}

impl TryFrom<ShiftScenarioRepr> for ShiftScenario {
    type Error = Error;
    fn try_from(r: ShiftScenarioRepr) -> Result<Self> {
        ShiftScenario::new(r.source, r.target, r.conditional_shift_magnitude, r.seed)
    }
}

impl From<ShiftScenario> for ShiftScenarioRepr {
    fn from(s: ShiftScenario) -> Self {
        Self {
            source: s.source,
            target: s.target,
            conditional_shift_magnitude: s.conditional_shift_magnitude,
            seed: s.seed,
        }
    }
}

impl ShiftScenario {
    pub fn new(
        source: DomainSpec,
        target: DomainSpec,
        conditional_shift_magnitude: f64,
        seed: u64,
    ) -> Result<Self> {
        if source.num_classes() != target.num_classes() {
            return Err(Error::DimensionMismatch(
                source.num_classes(),
                target.num_classes(),
            ));
        }
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch(source.dim(), target.dim()));
        }
        if !(conditional_shift_magnitude >= 0.0) {
            return Err(Error::InvalidParameter(
                "conditional shift magnitude must be nonnegative".into(),
            ));
        }
        let identical = source.class_conditionals == target.class_conditionals;
        if (conditional_shift_magnitude == 0.0) != identical {
            return Err(Error::InvalidParameter(
                "zero shift magnitude must coincide with identical class conditionals".into(),
            ));
        }
        Ok(Self {
            source,
            target,
            conditional_shift_magnitude,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    /// Optimal importance weights `w* = q_Y / p_Y` for this scenario.
    pub fn oracle_weight_vector(&self) -> Vec<f64> {
        self.source
            .label_dist()
            .as_slice()
            .iter()
            .zip(self.target.label_dist().as_slice())
            .map(|(&p, &q)| q / p)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Deterministic lattice of source class means with pairwise separation >= 3.
pub fn lattice_mean(class: usize, dim: usize) -> DVector<f64> {
    let mut m = DVector::zeros(dim);
    m[class % dim] = 3.0 * (1 + class / dim) as f64;
    m
}

/// Options for [`make_scenario_with`].
#[derive(Debug, Clone, Copy)]
pub struct ScenarioOptions {
    /// Isotropic covariance scale (variance per axis).
    pub covariance_scale: f64,
    pub directions: ShiftDirections,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            covariance_scale: 1.0,
            directions: ShiftDirections::PerClass,
        }
    }
}

fn unit_direction(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.norm();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Builds a scenario: source class means on the lattice with isotropic
/// covariance, target means translated by `delta` along seeded unit
/// directions, label distributions as given. Fully reproducible from `seed`.
pub fn make_scenario(
    k: usize,
    dim: usize,
    delta: f64,
    p_y: DiscreteDistribution,
    q_y: DiscreteDistribution,
    seed: u64,
) -> Result<ShiftScenario> {
    make_scenario_with(k, dim, delta, p_y, q_y, seed, ScenarioOptions::default())
}

/// As [`make_scenario`] with explicit covariance scale and direction policy.
pub fn make_scenario_with(
    k: usize,
    dim: usize,
    delta: f64,
    p_y: DiscreteDistribution,
    q_y: DiscreteDistribution,
    seed: u64,
    options: ScenarioOptions,
) -> Result<ShiftScenario> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "need K >= 2 classes, got {k}"
        )));
    }
    if dim < 1 {
        return Err(Error::InvalidParameter("need dim >= 1".into()));
    }
    if p_y.k() != k || q_y.k() != k {
        return Err(Error::DimensionMismatch(p_y.k(), k));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(
            "delta must be finite and >= 0".into(),
        ));
    }
    if !(options.covariance_scale > 0.0) {
        return Err(Error::InvalidParameter(
            "covariance scale must be positive".into(),
        ));
    }

    let mut dir_rng = stream(seed, Purpose::Directions);
    let shared = unit_direction(dim, &mut dir_rng);

    let mut source_conds = Vec::with_capacity(k);
    let mut target_conds = Vec::with_capacity(k);
    for y in 0..k {
        let mean = lattice_mean(y, dim);
        let dir = match options.directions {
            ShiftDirections::Shared => shared.clone(),
            ShiftDirections::PerClass => unit_direction(dim, &mut dir_rng),
        };
        source_conds.push(MixtureDensity::isotropic(
            mean.clone(),
            options.covariance_scale,
        )?);
        let target_mean = if delta == 0.0 { mean } else { mean + dir * delta };
        target_conds.push(MixtureDensity::isotropic(
            target_mean,
            options.covariance_scale,
        )?);
    }

    ShiftScenario::new(
        DomainSpec::new(source_conds, p_y)?,
        DomainSpec::new(target_conds, q_y)?,
        delta,
        seed,
    )
}

/// A scenario whose target conditionals are the source conditionals
/// translated by `+delta` along the first axis, every class alike. The
/// canonical correctable regime: a translation on the source undoes the
/// conditional shift exactly. Deterministic; no seeded directions involved.
pub fn make_translated_scenario(
    k: usize,
    dim: usize,
    delta: f64,
    p_y: DiscreteDistribution,
    q_y: DiscreteDistribution,
    covariance_scale: f64,
) -> Result<ShiftScenario> {
    if k < 2 || dim < 1 {
        return Err(Error::InvalidParameter("need K >= 2 and dim >= 1".into()));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(
            "delta must be finite and >= 0".into(),
        ));
    }
    let mut shift = DVector::zeros(dim);
    shift[0] = delta;
    let mut source_conds = Vec::with_capacity(k);
    let mut target_conds = Vec::with_capacity(k);
    for y in 0..k {
        let mean = lattice_mean(y, dim);
        source_conds.push(MixtureDensity::isotropic(mean.clone(), covariance_scale)?);
        target_conds.push(MixtureDensity::isotropic(mean + &shift, covariance_scale)?);
    }
    ShiftScenario::new(
        DomainSpec::new(source_conds, p_y)?,
        DomainSpec::new(target_conds, q_y)?,
        delta,
        0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Source => write!(f, "source"),
            DomainTag::Target => write!(f, "target"),
        }
    }
}

/// A finite sample: feature rows, integer labels, a domain tag and optional
/// pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub domain: DomainTag,
    pub pseudo_labels: Option<Vec<usize>>,
}

impl SampleSet {
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        domain: DomainTag,
        pseudo_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(features.nrows(), labels.len()));
        }
        if let Some(p) = &pseudo_labels {
            if p.len() != labels.len() {
                return Err(Error::DimensionMismatch(p.len(), labels.len()));
            }
        }
        Ok(Self {
            features,
            labels,
            domain,
            pseudo_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Empirical label distribution over `k` classes.
    pub fn empirical_label_dist(&self, k: usize) -> Result<DiscreteDistribution> {
        let mut counts = vec![0.0; k];
        for &y in &self.labels {
            if y >= k {
                return Err(Error::LabelOutOfRange(y, k));
            }
            counts[y] += 1.0;
        }
        DiscreteDistribution::normalized(counts)
    }

    pub fn class_counts(&self, k: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; k];
        for &y in &self.labels {
            if y >= k {
                return Err(Error::LabelOutOfRange(y, k));
            }
            counts[y] += 1;
        }
        Ok(counts)
    }
}

fn draw_label(dist: &DiscreteDistribution, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in dist.as_slice().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.k() - 1
}

/// Draws `n` labeled samples from the domain: labels i.i.d. from the label
/// distribution, features from the class conditionals. Label draws and
/// feature draws come from separate streams of the seed.
pub fn sample(spec: &DomainSpec, n: usize, seed: u64, domain: DomainTag) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Empty("sample request"));
    }
    let dim = spec.dim();
    let mut label_rng = stream(seed, Purpose::Labels);
    let mut feat_rng = stream(seed, Purpose::Features);

    struct Comp {
        weight: f64,
        mean: DVector<f64>,
        l: DMatrix<f64>,
    }
    let comps: Vec<Vec<Comp>> = spec
        .class_conditionals()
        .iter()
        .map(|m| {
            m.components()
                .iter()
                .map(|c| Comp {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    l: Cholesky::new(c.cov.clone())
                        .expect("covariance validated at construction")
                        .l(),
                })
                .collect()
        })
        .collect();

    let mut features = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    let mut xi = DVector::zeros(dim);
    for i in 0..n {
        let y = draw_label(spec.label_dist(), label_rng.random::<f64>());
        labels.push(y);
        let class = &comps[y];
        let comp = if class.len() == 1 {
            &class[0]
        } else {
            let u: f64 = label_rng.random();
            let mut acc = 0.0;
            let mut pick = class.len() - 1;
            for (ci, c) in class.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = ci;
                    break;
                }
            }
            &class[pick]
        };
        for j in 0..dim {
            xi[j] = feat_rng.sample(StandardNormal);
        }
        let x = &comp.mean + &comp.l * &xi;
        for j in 0..dim {
            features[(i, j)] = x[j];
        }
    }
    SampleSet::new(features, labels, domain, None)
}

/// Class-subsampling protocol: keeps `ceil(rate * n_y)` uniformly chosen
/// samples of every class `y < k1` (ascending label order) and all samples of
/// classes `>= k1`. Row order is preserved; rows are selected, never altered.
pub fn subsample_protocol(s: &SampleSet, k1: usize, rate: f64, seed: u64) -> Result<SampleSet> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subsample rate must lie in (0, 1], got {rate}"
        )));
    }
    let k = s.labels.iter().copied().max().map_or(0, |m| m + 1);
    if k1 > k {
        return Err(Error::InvalidParameter(format!(
            "k1 = {k1} exceeds the {k} observed classes"
        )));
    }
    let mut rng = stream(seed, Purpose::Subsample);
    let mut keep = vec![true; s.len()];
    for class in 0..k1 {
        let rows: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] == class).collect();
        if rows.is_empty() {
            continue;
        }
        let want = ((rate * rows.len() as f64).ceil() as usize).min(rows.len());
        if want == 0 {
            return Err(Error::InvalidParameter(format!(
                "subsampling would empty class {class}"
            )));
        }
        if want == rows.len() {
            continue;
        }
        let chosen = sample_indices(&mut rng, rows.len(), want);
        for r in &rows {
            keep[*r] = false;
        }
        for c in chosen {
            keep[rows[c]] = true;
        }
    }
    let kept: Vec<usize> = (0..s.len()).filter(|&i| keep[i]).collect();
    let mut features = DMatrix::zeros(kept.len(), s.dim());
    let mut labels = Vec::with_capacity(kept.len());
    let mut pseudo = s
        .pseudo_labels
        .as_ref()
        .map(|_| Vec::with_capacity(kept.len()));
    for (r, &i) in kept.iter().enumerate() {
        features.row_mut(r).copy_from(&s.features.row(i));
        labels.push(s.labels[i]);
        if let (Some(pl), Some(src)) = (pseudo.as_mut(), s.pseudo_labels.as_ref()) {
            pl.push(src[i]);
        }
    }
    SampleSet::new(features, labels, s.domain, pseudo)
}

/// Writes the CSV form: header `f0,...,f{d-1},label,domain[,pseudo]`, floats
/// with 9 significant digits.
pub fn write_csv<W: Write>(s: &SampleSet, mut w: W) -> Result<()> {
    let d = s.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.push("domain".into());
    if s.pseudo_labels.is_some() {
        header.push("pseudo".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..s.len() {
        let mut fields: Vec<String> = (0..d).map(|j| fmt_g9(s.features[(i, j)])).collect();
        fields.push(s.labels[i].to_string());
        fields.push(s.domain.to_string());
        if let Some(p) = &s.pseudo_labels {
            fields.push(p[i].to_string());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

fn csv_err(line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        line,
        message: message.into(),
    }
}

/// Reads the CSV form written by [`write_csv`]. Schema errors name the
/// offending line.
pub fn read_csv<R: BufRead>(r: R) -> Result<SampleSet> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| csv_err(1, "empty file"))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let mut d = 0;
    while d < cols.len() && cols[d] == format!("f{d}") {
        d += 1;
    }
    if d == 0 {
        return Err(csv_err(1, "expected feature columns f0,..."));
    }
    let rest = &cols[d..];
    let has_pseudo = match rest {
        ["label", "domain"] => false,
        ["label", "domain", "pseudo"] => true,
        _ => return Err(csv_err(1, format!("unexpected header tail {rest:?}"))),
    };

    let mut feats: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut pseudo = Vec::new();
    let mut domain: Option<DomainTag> = None;
    let mut line_no = 1u64;
    for line in lines {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let expect = d + 2 + usize::from(has_pseudo);
        if fields.len() != expect {
            return Err(csv_err(
                line_no,
                format!("expected {expect} fields, got {}", fields.len()),
            ));
        }
        for f in &fields[..d] {
            feats.push(
                f.parse::<f64>()
                    .map_err(|e| csv_err(line_no, format!("bad float {f:?}: {e}")))?,
            );
        }
        labels.push(
            fields[d]
                .parse::<usize>()
                .map_err(|e| csv_err(line_no, format!("bad label {:?}: {e}", fields[d])))?,
        );
        let tag = match fields[d + 1] {
            "source" => DomainTag::Source,
            "target" => DomainTag::Target,
            other => return Err(csv_err(line_no, format!("bad domain {other:?}"))),
        };
        match domain {
            None => domain = Some(tag),
            Some(t) if t == tag => {}
            Some(_) => return Err(csv_err(line_no, "mixed domain tags in one file")),
        }
        if has_pseudo {
            pseudo.push(
                fields[d + 2]
                    .parse::<usize>()
                    .map_err(|e| csv_err(line_no, format!("bad pseudo label: {e}")))?,
            );
        }
    }
    if labels.is_empty() {
        return Err(csv_err(line_no, "no data rows"));
    }
    let n = labels.len();
    let features = DMatrix::from_row_slice(n, d, &feats);
    SampleSet::new(
        features,
        labels,
        domain.unwrap(),
        if has_pseudo { Some(pseudo) } else { None },
    )
}
