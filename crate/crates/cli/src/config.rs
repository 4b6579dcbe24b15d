//! The experiment configuration document: one JSON file aggregating scenario
//! parameters, training settings, verification toggles, output paths and the
//! seed list. Unknown keys are rejected everywhere; `--set key.path=value`
//! overrides individual entries before validation.

use serde::{Deserialize, Serialize};

use gls_core::divergences::DiscreteDistribution;
use gls_core::kernels::{KernelKind, KernelSpec};
use gls_core::learner::{Framework, TrainConfig};
use gls_core::shiftgen::{
    make_scenario_with, make_translated_scenario, DomainTag, ScenarioOptions, ShiftDirections,
    ShiftScenario,
};
use gls_core::weights::WeightMethod;

/// How the target class means relate to the source means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Common `+delta` translation along the first axis (deterministic).
    Translation,
    /// Seeded unit direction per class.
    PerClass,
    /// One seeded unit direction shared by all classes.
    Shared,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub classes: usize,
    pub dim: usize,
    pub delta: f64,
    pub p_y: Vec<f64>,
    pub q_y: Vec<f64>,
    #[serde(default = "default_one")]
    pub covariance_scale: f64,
    #[serde(default = "default_shift_kind")]
    pub shift: ShiftKind,
    #[serde(default = "default_n")]
    pub n_source: usize,
    #[serde(default = "default_n")]
    pub n_target: usize,
    #[serde(default)]
    pub subsample: Option<SubsampleSection>,
}

fn default_one() -> f64 {
    1.0
}
fn default_shift_kind() -> ShiftKind {
    ShiftKind::Translation
}
fn default_n() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleSection {
    pub k1: usize,
    pub rate: f64,
    #[serde(default = "default_subsample_domain")]
    pub domain: DomainTag,
}

fn default_subsample_domain() -> DomainTag {
    DomainTag::Source
}

impl ScenarioSection {
    pub fn build(&self, seed: u64) -> Result<ShiftScenario, gls_core::Error> {
        let p = DiscreteDistribution::new(self.p_y.clone())?;
        let q = DiscreteDistribution::new(self.q_y.clone())?;
        match self.shift {
            ShiftKind::Translation => make_translated_scenario(
                self.classes,
                self.dim,
                self.delta,
                p,
                q,
                self.covariance_scale,
            ),
            ShiftKind::PerClass | ShiftKind::Shared => make_scenario_with(
                self.classes,
                self.dim,
                self.delta,
                p,
                q,
                seed,
                ScenarioOptions {
                    covariance_scale: self.covariance_scale,
                    directions: if self.shift == ShiftKind::Shared {
                        ShiftDirections::Shared
                    } else {
                        ShiftDirections::PerClass
                    },
                },
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default = "default_kernel_kind")]
    pub kind: KernelKind,
    #[serde(default = "default_one")]
    pub bandwidth: f64,
}

fn default_kernel_kind() -> KernelKind {
    KernelKind::Gaussian
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            kind: default_kernel_kind(),
            bandwidth: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_framework")]
    pub framework: Framework,
    #[serde(default = "default_lambda_g")]
    pub lambda_g: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default = "default_weight_method")]
    pub weight_method: WeightMethod,
    #[serde(default = "default_smoothing")]
    pub weight_smoothing: f64,
    #[serde(default = "default_one")]
    pub loss_bound: f64,
    #[serde(default = "default_true")]
    pub median_heuristic: bool,
    #[serde(default = "default_weight_clip")]
    pub weight_clip: f64,
    #[serde(default)]
    pub pseudo_label_threshold: Option<f64>,
}

fn default_framework() -> Framework {
    Framework::Gls
}
fn default_lambda_g() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    0.1
}
fn default_max_iters() -> usize {
    200
}
fn default_weight_method() -> WeightMethod {
    WeightMethod::Qp
}
fn default_smoothing() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_weight_clip() -> f64 {
    50.0
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            framework: self.framework,
            lambda_g: self.lambda_g,
            learning_rate: self.learning_rate,
            warmup_epochs: self.warmup_epochs,
            max_iters: self.max_iters,
            batch_size: self.batch_size,
            kernel: KernelSpec {
                kind: self.kernel.kind,
                bandwidth: self.kernel.bandwidth,
            },
            weight_method: self.weight_method,
            weight_smoothing: self.weight_smoothing,
            seed,
            loss_bound: self.loss_bound,
            median_heuristic: self.median_heuristic,
            weight_clip: self.weight_clip,
            pseudo_label_threshold: self.pseudo_label_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    Sufficiency,
    Necessity,
    JointErrorLower,
    BayesGap,
    Impossibility,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_checks")]
    pub checks: Vec<CheckName>,
    #[serde(default = "default_sufficiency_trials")]
    pub sufficiency_trials: usize,
    #[serde(default = "default_joint_error_trials")]
    pub joint_error_trials: usize,
    #[serde(default = "default_necessity_points")]
    pub necessity_points: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_half")]
    pub a: f64,
    #[serde(default)]
    pub grid_intervals: Option<usize>,
}

fn default_checks() -> Vec<CheckName> {
    vec![
        CheckName::Sufficiency,
        CheckName::Necessity,
        CheckName::JointErrorLower,
        CheckName::BayesGap,
        CheckName::Impossibility,
    ]
}
fn default_sufficiency_trials() -> usize {
    50
}
fn default_joint_error_trials() -> usize {
    25
}
fn default_necessity_points() -> usize {
    10
}
fn default_mc_samples() -> usize {
    100_000
}
fn default_half() -> f64 {
    0.5
}

impl Default for VerifySection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_frameworks")]
    pub frameworks: Vec<Framework>,
    /// Optional subsampled-rate sweep applied to the source domain.
    #[serde(default)]
    pub rates: Vec<f64>,
    #[serde(default = "default_rate_k1")]
    pub rate_k1: usize,
}

fn default_frameworks() -> Vec<Framework> {
    Framework::ALL.to_vec()
}
fn default_rate_k1() -> usize {
    1
}

impl Default for CompareSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub source_preds: String,
    pub target_preds: String,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "default_weight_method")]
    pub method: WeightMethod,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".to_string()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
        }
    }
}

/// The whole experiment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub weights: Option<WeightsSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seed() -> u64 {
    7
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// Applies one `key.path=value` override to the raw JSON document. Values
/// parse as JSON when possible (numbers, booleans, arrays) and fall back to
/// strings.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<(), String> {
    let (path, raw_value) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?} is not of the form key.path=value"))?;
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                _ => return Err(format!("cannot set {path}: parent is not an object")),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default())),
            _ => return Err(format!("cannot descend into {part} of {path}")),
        };
    }
    Err("empty override path".to_string())
}

/// Loads a config document, applies overrides, then validates against the
/// schema (unknown keys rejected).
pub fn load_config(
    text: &str,
    overrides: &[String],
    seed_flag: Option<u64>,
    out_dir_flag: Option<&str>,
) -> Result<ExperimentConfig, String> {
    let mut doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("config is not valid JSON: {e}"))?;
    for assignment in overrides {
        apply_override(&mut doc, assignment)?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| format!("config schema violation: {e}"))?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    if let Some(dir) = out_dir_flag {
        cfg.output.dir = dir.to_string();
    }
    Ok(cfg)
}
