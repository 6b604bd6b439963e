//! Merging and ensembling operators over a bank of frozen models, parameter
//! offsets relative to an anchor, and the static baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{forward, MlpSpec, TaskModel};
use crate::num::{population_std, softmax, weighted_sum, ParamVec};

// ── CoopVec ──────────────────────────────────────────────────────────

/// Per-datum simplex weight vector over the T collaborating models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoopVec {
    beta: Vec<f64>,
}

impl CoopVec {
    /// Validates the simplex invariant: entries >= 0, sum within 1e-9 of 1.
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Empty("CoopVec requires at least one entry"));
        }
        if let Some(i) = beta.iter().position(|&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "CoopVec entry {} is {} (must be finite and >= 0)",
                i, beta[i]
            )));
        }
        let sum: f64 = beta.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!(
                "CoopVec entries sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(CoopVec { beta })
    }

    pub fn uniform(t: usize) -> Self {
        CoopVec {
            beta: vec![1.0 / t as f64; t],
        }
    }

    pub fn one_hot(t: usize, index: usize) -> Self {
        let mut beta = vec![0.0; t];
        beta[index] = 1.0;
        CoopVec { beta }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.beta
    }
}

// ── ModelBank ────────────────────────────────────────────────────────

/// T frozen task models sharing one spec, plus optional shared checkpoint.
///
/// The unweighted average of the parameter vectors is computed once at
/// construction; the bank is immutable afterwards, so offsets derived from
/// it are constants.
#[derive(Clone, Debug)]
pub struct ModelBank {
    models: Vec<TaskModel>,
    pub pretrained: Option<TaskModel>,
    uniform_anchor: ParamVec,
}

impl ModelBank {
    pub fn new(models: Vec<TaskModel>, pretrained: Option<TaskModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Empty("ModelBank requires at least one model"));
        }
        let spec = models[0].spec.clone();
        for (i, m) in models.iter().enumerate() {
            if m.spec != spec {
                return Err(Error::Config(format!(
                    "model {i} has a different spec than model 0"
                )));
            }
        }
        if let Some(p) = &pretrained {
            if p.spec != spec {
                return Err(Error::Config("pretrained spec differs from bank".into()));
            }
        }
        let t = models.len();
        let params: Vec<ParamVec> = models.iter().map(|m| m.params.clone()).collect();
        let uniform_anchor = weighted_sum(&params, &vec![1.0 / t as f64; t])?;
        Ok(ModelBank {
            models,
            pretrained,
            uniform_anchor,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.models[0].spec
    }

    pub fn models(&self) -> &[TaskModel] {
        &self.models
    }

    pub fn model(&self, t: usize) -> &TaskModel {
        &self.models[t]
    }

    pub fn uniform_anchor(&self) -> &ParamVec {
        &self.uniform_anchor
    }

    /// Outputs of every model on one input, in bank order.
    pub fn forward_all(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.models.iter().map(|m| m.forward(x)).collect()
    }
}

// ── Offsets ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    /// Precomputed unweighted average of the bank.
    UniformAverage,
    /// The beta-weighted average; requires a CoopVec.
    WeightedAverage,
}

/// Per-model scalar offset summaries relative to an anchor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OffsetSummary {
    /// Entry sum of each model's offset vector.
    pub xi_hat: Vec<f64>,
    /// `xi_hat` divided by its population std; zero vector when the std is 0.
    pub xi_star: Vec<f64>,
    pub anchor_kind: AnchorKind,
}

/// Offsets `theta_t - anchor`, their entry sums, and the standardized form.
pub fn compute_offsets(
    bank: &ModelBank,
    anchor_kind: AnchorKind,
    beta: Option<&CoopVec>,
) -> Result<OffsetSummary> {
    let anchor = match anchor_kind {
        AnchorKind::UniformAverage => bank.uniform_anchor().clone(),
        AnchorKind::WeightedAverage => {
            let beta = beta.ok_or_else(|| {
                Error::Config("weighted-average anchor requires a CoopVec".into())
            })?;
            merge(bank, beta)?
        }
    };
    let xi_hat: Vec<f64> = bank
        .models()
        .iter()
        .map(|m| Ok(m.params.sub(&anchor)?.entry_sum()))
        .collect::<Result<_>>()?;
    let std = population_std(&xi_hat);
    let xi_star = if std == 0.0 {
        // all summaries equal: the condition already holds in summary form
        vec![0.0; xi_hat.len()]
    } else {
        xi_hat.iter().map(|x| x / std).collect()
    };
    Ok(OffsetSummary {
        xi_hat,
        xi_star,
        anchor_kind,
    })
}

/// Full offset vectors `theta_t - anchor` (not just their sums).
pub fn offset_vectors(bank: &ModelBank, anchor: &ParamVec) -> Result<Vec<ParamVec>> {
    bank.models().iter().map(|m| m.params.sub(anchor)).collect()
}

/// Euclidean norm of `sum_t beta_t * xi_t`; diagnostic for the entrywise
/// condition that the scalar summary only aggregates.
pub fn condition_norm(offsets: &[ParamVec], beta: &CoopVec) -> Result<f64> {
    Ok(weighted_sum(offsets, beta.as_slice())?.norm())
}

// ── Merging and ensembling ───────────────────────────────────────────

/// Parameter-level combination: `sum_t beta_t * theta_t`.
pub fn merge(bank: &ModelBank, beta: &CoopVec) -> Result<ParamVec> {
    if beta.len() != bank.len() {
        return Err(Error::DimMismatch {
            index: 0,
            expected: bank.len(),
            got: beta.len(),
        });
    }
    let params: Vec<ParamVec> = bank.models().iter().map(|m| m.params.clone()).collect();
    weighted_sum(&params, beta.as_slice())
}

/// Which space model outputs are combined in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineSpace {
    /// Combine raw logits; softmax is applied downstream. The default.
    Logit,
    /// Softmax each model's output first, then combine probabilities.
    Probability,
}

/// Prediction-level combination: `sum_t beta_t * z_t` in logit space.
pub fn ensemble(outputs: &[Vec<f64>], beta: &CoopVec) -> Result<Vec<f64>> {
    ensemble_in(outputs, beta, CombineSpace::Logit)
}

pub fn ensemble_in(outputs: &[Vec<f64>], beta: &CoopVec, space: CombineSpace) -> Result<Vec<f64>> {
    if outputs.is_empty() {
        return Err(Error::Empty("ensemble requires at least one output"));
    }
    if outputs.len() != beta.len() {
        return Err(Error::DimMismatch {
            index: 0,
            expected: beta.len(),
            got: outputs.len(),
        });
    }
    let c = outputs[0].len();
    for (t, z) in outputs.iter().enumerate() {
        if z.len() != c {
            return Err(Error::DimMismatch {
                index: t,
                expected: c,
                got: z.len(),
            });
        }
    }
    let mut combined = vec![0.0; c];
    match space {
        CombineSpace::Logit => {
            for (z, &b) in outputs.iter().zip(beta.as_slice()) {
                for (o, v) in combined.iter_mut().zip(z) {
                    *o += b * v;
                }
            }
        }
        CombineSpace::Probability => {
            for (z, &b) in outputs.iter().zip(beta.as_slice()) {
                let p = softmax(z)?;
                for (o, v) in combined.iter_mut().zip(&p) {
                    *o += b * v;
                }
            }
        }
    }
    Ok(combined)
}

/// Forward pass of the merged model on one input. Allocates a fresh merged
/// parameter vector per call; safe to fan out across workers.
pub fn predict_merged(bank: &ModelBank, beta: &CoopVec, x: &[f64]) -> Result<Vec<f64>> {
    let merged = merge(bank, beta)?;
    forward(bank.spec(), &merged, x)
}

// ── Baselines ────────────────────────────────────────────────────────

/// Uniform weights over the bank.
pub fn baseline_simple_average(bank: &ModelBank) -> CoopVec {
    CoopVec::uniform(bank.len())
}

/// `theta_pre + lambda * sum_t (theta_t - theta_pre)`.
pub fn baseline_task_arithmetic(bank: &ModelBank, lambda: f64) -> Result<ParamVec> {
    let pre = bank
        .pretrained
        .as_ref()
        .ok_or_else(|| Error::Config("task arithmetic requires a pretrained checkpoint".into()))?;
    let mut acc = pre.params.clone();
    for m in bank.models() {
        let tv = m.params.sub(&pre.params)?;
        acc = acc.add_scaled(lambda, &tv)?;
    }
    Ok(acc)
}

// ── Bank manifest ────────────────────────────────────────────────────

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// On-disk description of a bank: checkpoint paths plus origin tags.
#[derive(Serialize, Deserialize)]
pub struct BankManifest {
    pub format_version: u32,
    pub checkpoints: Vec<String>,
    pub origins: Vec<crate::mlp::Origin>,
    pub pretrained: Option<String>,
}

pub fn save_bank(dir: &std::path::Path, bank: &ModelBank) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut checkpoints = Vec::new();
    for m in bank.models() {
        let name = format!("task-{}.json", m.task_id);
        crate::mlp::save_checkpoint(&dir.join(&name), m)?;
        checkpoints.push(name);
    }
    let pretrained = match &bank.pretrained {
        Some(p) => {
            crate::mlp::save_checkpoint(&dir.join("pretrained.json"), p)?;
            Some("pretrained.json".to_string())
        }
        None => None,
    };
    let manifest = BankManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        checkpoints,
        origins: bank.models().iter().map(|m| m.origin).collect(),
        pretrained,
    };
    std::fs::write(dir.join("bank.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_bank(dir: &std::path::Path) -> Result<ModelBank> {
    let manifest: BankManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("bank.json"))?)?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported bank manifest version {}",
            manifest.format_version
        )));
    }
    let models = manifest
        .checkpoints
        .iter()
        .map(|name| crate::mlp::load_checkpoint(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let pretrained = manifest
        .pretrained
        .map(|name| crate::mlp::load_checkpoint(&dir.join(name)))
        .transpose()?;
    ModelBank::new(models, pretrained)
}
