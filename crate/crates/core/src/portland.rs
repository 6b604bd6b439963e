//! The gating network: one linear layer over concatenated model outputs,
//! followed by a softmax that emits a CoopVec per datum.
//!
//! Training couples two per-datum terms. The boosting term improves the
//! ensembled prediction (cross-entropy when labels are available, entropy
//! minimization on unlabeled inputs otherwise). The alignment term penalizes
//! the weighted standardized offset summaries so that the same CoopVec also
//! works for parameter merging. Gradients are derived by hand below and
//! checked against central finite differences in the tests.

use serde::{Deserialize, Serialize};

use crate::collab::{ensemble_in, merge, CombineSpace, CoopVec, ModelBank, OffsetSummary};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::mlp::{argmax, forward, Example, Optimizer, TrainConfig};
use crate::num::{entropy, softmax, Rng};
use crate::par;

// ── Parameters ───────────────────────────────────────────────────────

/// Weights of the gating network: `w` is T x (T * C_total), row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortlandParams {
    pub n_models: usize,
    pub c_total: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl PortlandParams {
    pub fn zeros(n_models: usize, c_total: usize) -> Self {
        PortlandParams {
            n_models,
            c_total,
            w: vec![0.0; n_models * n_models * c_total],
            b: vec![0.0; n_models],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_models * self.c_total
    }

    fn check_finite(&self) -> Result<()> {
        if self.w.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                quantity: "gating parameter".into(),
                location: "after update".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_w: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta_w < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.alpha == 0.0 && self.beta_w == 0.0 {
            return Err(Error::Config("loss weights must not both be zero".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta_w: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Supervised,
    SemiSupervised,
}

/// How the alignment term reduces the per-model products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignVariant {
    /// `sum_t (beta_t * xi_star_t)^2` — the default.
    PerTerm,
    /// `(sum_t beta_t * xi_star_t)^2` — the square of the aggregate.
    SumSquare,
}

/// Everything that fixes the per-datum objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub mode: LossMode,
    pub weights: LossWeights,
    pub align_variant: AlignVariant,
    pub space: CombineSpace,
}

impl LossSpec {
    pub fn semi_default() -> Self {
        LossSpec {
            mode: LossMode::SemiSupervised,
            weights: LossWeights::default(),
            align_variant: AlignVariant::PerTerm,
            space: CombineSpace::Logit,
        }
    }

    pub fn supervised_default() -> Self {
        LossSpec {
            mode: LossMode::Supervised,
            ..Self::semi_default()
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_boost: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub mode: LossMode,
}

impl LossBreakdown {
    fn new(l_boost: f64, l_align: f64, weights: &LossWeights, mode: LossMode) -> Self {
        LossBreakdown {
            l_boost,
            l_align,
            l_total: weights.alpha * l_boost + weights.beta_w * l_align,
            mode,
        }
    }
}

// ── Forward ──────────────────────────────────────────────────────────

/// `softmax(W z_concat + b)`; always a valid simplex.
pub fn coopvec(phi: &PortlandParams, z_concat: &[f64]) -> Result<CoopVec> {
    if z_concat.len() != phi.input_dim() {
        return Err(Error::DimMismatch {
            index: 0,
            expected: phi.input_dim(),
            got: z_concat.len(),
        });
    }
    let n = phi.n_models;
    let d = phi.input_dim();
    let mut u = phi.b.clone();
    for t in 0..n {
        let row = &phi.w[t * d..(t + 1) * d];
        let mut acc = 0.0;
        for (w, z) in row.iter().zip(z_concat) {
            acc += w * z;
        }
        u[t] += acc;
    }
    CoopVec::new(softmax(&u)?)
}

pub fn concat_outputs(z_list: &[Vec<f64>]) -> Vec<f64> {
    z_list.iter().flatten().copied().collect()
}

// ── Loss terms ───────────────────────────────────────────────────────

/// Cross-entropy of the combined output against the one-hot label.
pub fn loss_boost_supervised(
    z_list: &[Vec<f64>],
    beta: &CoopVec,
    y: usize,
    space: CombineSpace,
) -> Result<f64> {
    let combined = ensemble_in(z_list, beta, space)?;
    if y >= combined.len() {
        return Err(Error::InvalidValue(format!(
            "label {} out of range [0, {})",
            y,
            combined.len()
        )));
    }
    match space {
        CombineSpace::Logit => {
            let p = softmax(&combined)?;
            Ok(-p[y].max(f64::MIN_POSITIVE).ln())
        }
        CombineSpace::Probability => Ok(-combined[y].max(f64::MIN_POSITIVE).ln()),
    }
}

/// Entropy of the combined output distribution.
pub fn loss_boost_semi(z_list: &[Vec<f64>], beta: &CoopVec, space: CombineSpace) -> Result<f64> {
    let combined = ensemble_in(z_list, beta, space)?;
    match space {
        CombineSpace::Logit => entropy(&softmax(&combined)?),
        CombineSpace::Probability => entropy(&combined),
    }
}

/// Alignment penalty on the standardized offset summaries.
pub fn loss_align(beta: &CoopVec, offsets: &OffsetSummary, variant: AlignVariant) -> Result<f64> {
    if beta.len() != offsets.xi_star.len() {
        return Err(Error::DimMismatch {
            index: 0,
            expected: offsets.xi_star.len(),
            got: beta.len(),
        });
    }
    let products = beta
        .as_slice()
        .iter()
        .zip(&offsets.xi_star)
        .map(|(b, x)| b * x);
    Ok(match variant {
        AlignVariant::PerTerm => products.map(|p| p * p).sum(),
        AlignVariant::SumSquare => {
            let s: f64 = products.sum();
            s * s
        }
    })
}

/// Per-datum combined loss.
pub fn datum_loss(
    phi: &PortlandParams,
    z_list: &[Vec<f64>],
    offsets: &OffsetSummary,
    y: Option<usize>,
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    let beta = coopvec(phi, &concat_outputs(z_list))?;
    let l_boost = match spec.mode {
        LossMode::Supervised => {
            let y = y.ok_or_else(|| Error::Config("supervised loss requires a label".into()))?;
            loss_boost_supervised(z_list, &beta, y, spec.space)?
        }
        LossMode::SemiSupervised => loss_boost_semi(z_list, &beta, spec.space)?,
    };
    let l_align = loss_align(&beta, offsets, spec.align_variant)?;
    Ok(LossBreakdown::new(
        l_boost,
        l_align,
        &spec.weights,
        spec.mode,
    ))
}

// ── Gradient ─────────────────────────────────────────────────────────

/// Gradient of the per-datum objective over (W, b).
#[derive(Clone, Debug)]
pub struct PortlandGrad {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl PortlandGrad {
    fn zeros(phi: &PortlandParams) -> Self {
        PortlandGrad {
            dw: vec![0.0; phi.w.len()],
            db: vec![0.0; phi.b.len()],
        }
    }

    fn add_assign(&mut self, other: &PortlandGrad) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.dw.iter_mut().for_each(|v| *v *= s);
        self.db.iter_mut().for_each(|v| *v *= s);
    }
}

/// Exact analytic gradient of `alpha * L_b + beta_w * L_a` through the
/// softmax gate, the output combination, and the alignment term.
pub fn grad_phi(
    phi: &PortlandParams,
    z_list: &[Vec<f64>],
    offsets: &OffsetSummary,
    y: Option<usize>,
    spec: &LossSpec,
) -> Result<PortlandGrad> {
    if spec.mode == LossMode::Supervised && y.is_none() {
        return Err(Error::Config("supervised gradient requires a label".into()));
    }
    if spec.mode == LossMode::SemiSupervised && y.is_some() {
        return Err(Error::Config(
            "semi-supervised gradient takes no label".into(),
        ));
    }
    let n = phi.n_models;
    let z_concat = concat_outputs(z_list);
    let beta = coopvec(phi, &z_concat)?;
    let bs = beta.as_slice();

    // d(boost)/d(beta_t)
    let g_boost: Vec<f64> = match spec.space {
        CombineSpace::Logit => {
            let s = ensemble_in(z_list, &beta, CombineSpace::Logit)?;
            let p = softmax(&s)?;
            let g_s: Vec<f64> = match spec.mode {
                LossMode::Supervised => {
                    let y = y.unwrap();
                    let mut g = p.clone();
                    g[y] -= 1.0;
                    g
                }
                LossMode::SemiSupervised => {
                    let h = entropy(&p)?;
                    p.iter().map(|&pk| -pk * (pk.ln() + h)).collect()
                }
            };
            z_list
                .iter()
                .map(|z| z.iter().zip(&g_s).map(|(zi, gi)| zi * gi).sum())
                .collect()
        }
        CombineSpace::Probability => {
            let q_list: Vec<Vec<f64>> =
                z_list.iter().map(|z| softmax(z)).collect::<Result<_>>()?;
            let s = {
                let mut acc = vec![0.0; q_list[0].len()];
                for (q, &b) in q_list.iter().zip(bs) {
                    for (a, v) in acc.iter_mut().zip(q) {
                        *a += b * v;
                    }
                }
                acc
            };
            match spec.mode {
                LossMode::Supervised => {
                    let y = y.unwrap();
                    let sy = s[y].max(f64::MIN_POSITIVE);
                    q_list.iter().map(|q| -q[y] / sy).collect()
                }
                LossMode::SemiSupervised => q_list
                    .iter()
                    .map(|q| {
                        q.iter()
                            .zip(&s)
                            .map(|(qc, sc)| -qc * (sc.max(f64::MIN_POSITIVE).ln() + 1.0))
                            .sum()
                    })
                    .collect(),
            }
        }
    };

    // d(align)/d(beta_t)
    let g_align: Vec<f64> = match spec.align_variant {
        AlignVariant::PerTerm => bs
            .iter()
            .zip(&offsets.xi_star)
            .map(|(b, x)| 2.0 * b * x * x)
            .collect(),
        AlignVariant::SumSquare => {
            let m: f64 = bs.iter().zip(&offsets.xi_star).map(|(b, x)| b * x).sum();
            offsets.xi_star.iter().map(|x| 2.0 * m * x).collect()
        }
    };

    let g_beta: Vec<f64> = g_boost
        .iter()
        .zip(&g_align)
        .map(|(gb, ga)| spec.weights.alpha * gb + spec.weights.beta_w * ga)
        .collect();

    // back through the softmax gate
    let inner: f64 = bs.iter().zip(&g_beta).map(|(b, g)| b * g).sum();
    let g_u: Vec<f64> = bs
        .iter()
        .zip(&g_beta)
        .map(|(b, g)| b * (g - inner))
        .collect();

    let d = phi.input_dim();
    let mut grad = PortlandGrad::zeros(phi);
    for t in 0..n {
        let gu = g_u[t];
        let row = &mut grad.dw[t * d..(t + 1) * d];
        for (g, z) in row.iter_mut().zip(&z_concat) {
            *g = gu * z;
        }
        grad.db[t] = gu;
    }
    if grad.dw.iter().chain(&grad.db).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            quantity: "gradient".into(),
            location: "grad_phi".into(),
        });
    }
    Ok(grad)
}

// ── Training ─────────────────────────────────────────────────────────

/// One row of the training trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub merge_acc: f64,
    pub ens_acc: f64,
    pub loss: LossBreakdown,
}

pub struct TrainedPortland {
    pub params: PortlandParams,
    pub trajectory: Vec<EpochStats>,
    /// Gate parameters after each epoch, for training-time diagnostics.
    pub epoch_checkpoints: Vec<PortlandParams>,
}

/// Per-datum data-level evaluation of one dataset: every test datum gets its
/// own CoopVec, applied to both merging and ensembling. Returns accuracies
/// in percent.
pub fn eval_dataset_data_level(
    bank: &ModelBank,
    phi: &PortlandParams,
    ds: &TaskDataset,
    space: CombineSpace,
) -> Result<(f64, f64)> {
    eval_examples_data_level(bank, phi, &ds.test, space)
}

pub fn eval_examples_data_level(
    bank: &ModelBank,
    phi: &PortlandParams,
    examples: &[Example],
    space: CombineSpace,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation requires a nonempty dataset"));
    }
    let hits = par::map_slice(examples, |ex| -> Result<(u32, u32)> {
        let z_list = bank.forward_all(&ex.x)?;
        let beta = coopvec(phi, &concat_outputs(&z_list))?;
        let ens = ensemble_in(&z_list, &beta, space)?;
        let merged = merge(bank, &beta)?;
        let merged_logits = forward(bank.spec(), &merged, &ex.x)?;
        Ok((
            (argmax(&merged_logits) == ex.y) as u32,
            (argmax(&ens) == ex.y) as u32,
        ))
    });
    let mut merge_hits = 0u32;
    let mut ens_hits = 0u32;
    for h in hits {
        let (m, e) = h?;
        merge_hits += m;
        ens_hits += e;
    }
    let n = examples.len() as f64;
    Ok((
        100.0 * merge_hits as f64 / n,
        100.0 * ens_hits as f64 / n,
    ))
}

/// Train the gate on the given datasets with the bank frozen.
///
/// Supervised mode consumes the labeled train splits; semi-supervised mode
/// consumes unlabeled test inputs. Model outputs are precomputed once (the
/// bank is frozen, so they are constants), and gradient contributions are
/// reduced in datum-index order for bit determinism.
pub fn train_portland(
    bank: &ModelBank,
    datasets: &[TaskDataset],
    offsets: &OffsetSummary,
    loss_spec: &LossSpec,
    cfg: &TrainConfig,
) -> Result<TrainedPortland> {
    loss_spec.weights.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("train_portland requires datasets"));
    }
    let c_total = bank.spec().output_dim();
    let t = bank.len();
    let mut phi = PortlandParams::zeros(t, c_total);

    // assemble training pool
    let pool: Vec<(Vec<f64>, Option<usize>)> = match loss_spec.mode {
        LossMode::Supervised => datasets
            .iter()
            .flat_map(|ds| ds.train.iter().map(|ex| (ex.x.clone(), Some(ex.y))))
            .collect(),
        LossMode::SemiSupervised => datasets
            .iter()
            .flat_map(|ds| ds.test.iter().map(|ex| (ex.x.clone(), None)))
            .collect(),
    };
    if pool.is_empty() {
        return Err(Error::Empty("training pool is empty"));
    }
    cfg.validate(pool.len())?;

    // frozen bank: model outputs are constants per datum
    let z_pool: Vec<Vec<Vec<f64>>> = {
        let zs = par::map_slice(&pool, |(x, _)| bank.forward_all(x));
        zs.into_iter().collect::<Result<_>>()?
    };

    // test data for the per-epoch trajectory
    let eval_examples: Vec<Example> = datasets.iter().flat_map(|ds| ds.test.clone()).collect();

    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut velocity_w = vec![0.0; phi.w.len()];
    let mut velocity_b = vec![0.0; phi.b.len()];
    const MOMENTUM: f64 = 0.9;

    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut epoch_checkpoints = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum_boost = 0.0;
        let mut sum_align = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let contributions = par::map_range(chunk.len(), |k| {
                let i = chunk[k];
                let (_, y) = &pool[i];
                let z_list = &z_pool[i];
                let loss = datum_loss(&phi, z_list, offsets, *y, loss_spec)?;
                let grad = grad_phi(&phi, z_list, offsets, *y, loss_spec)?;
                Ok::<(LossBreakdown, PortlandGrad), Error>((loss, grad))
            });
            let mut batch_grad = PortlandGrad::zeros(&phi);
            for c in contributions {
                let (loss, grad) = c?;
                if !loss.l_total.is_finite() || loss.l_total > 1e6 {
                    return Err(Error::Diverged {
                        epoch,
                        loss: loss.l_total,
                    });
                }
                sum_boost += loss.l_boost;
                sum_align += loss.l_align;
                batch_grad.add_assign(&grad);
            }
            batch_grad.scale(1.0 / chunk.len() as f64);
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in phi.w.iter_mut().zip(&batch_grad.dw) {
                        *p -= cfg.learning_rate * g;
                    }
                    for (p, g) in phi.b.iter_mut().zip(&batch_grad.db) {
                        *p -= cfg.learning_rate * g;
                    }
                }
                Optimizer::SgdMomentum => {
                    for ((p, g), v) in phi.w.iter_mut().zip(&batch_grad.dw).zip(&mut velocity_w) {
                        *v = MOMENTUM * *v - cfg.learning_rate * g;
                        *p += *v;
                    }
                    for ((p, g), v) in phi.b.iter_mut().zip(&batch_grad.db).zip(&mut velocity_b) {
                        *v = MOMENTUM * *v - cfg.learning_rate * g;
                        *p += *v;
                    }
                }
            }
            phi.check_finite()?;
        }
        let n = pool.len() as f64;
        let mean = LossBreakdown::new(
            sum_boost / n,
            sum_align / n,
            &loss_spec.weights,
            loss_spec.mode,
        );
        let (merge_acc, ens_acc) =
            eval_examples_data_level(bank, &phi, &eval_examples, loss_spec.space)?;
        log::debug!(
            "epoch {epoch}: merge {merge_acc:.2}% ens {ens_acc:.2}% boost {:.4} align {:.6}",
            mean.l_boost,
            mean.l_align
        );
        trajectory.push(EpochStats {
            epoch,
            merge_acc,
            ens_acc,
            loss: mean,
        });
        epoch_checkpoints.push(phi.clone());
    }

    Ok(TrainedPortland {
        params: phi,
        trajectory,
        epoch_checkpoints,
    })
}

// ── Checkpoint format ────────────────────────────────────────────────

pub const PORTLAND_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct PortlandCheckpoint {
    pub format_version: u32,
    pub n_models: usize,
    pub c_total: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub mode: LossMode,
    pub weights: LossWeights,
}

pub fn save_portland(
    path: &std::path::Path,
    phi: &PortlandParams,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<()> {
    let ck = PortlandCheckpoint {
        format_version: PORTLAND_FORMAT_VERSION,
        n_models: phi.n_models,
        c_total: phi.c_total,
        w: phi.w.clone(),
        b: phi.b.clone(),
        mode,
        weights: *weights,
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_portland(path: &std::path::Path) -> Result<(PortlandParams, LossMode, LossWeights)> {
    let ck: PortlandCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.format_version != PORTLAND_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported gate checkpoint version {}",
            ck.format_version
        )));
    }
    Ok((
        PortlandParams {
            n_models: ck.n_models,
            c_total: ck.c_total,
            w: ck.w,
            b: ck.b,
        },
        ck.mode,
        ck.weights,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::AnchorKind;
    use approx::assert_relative_eq;

    fn offsets_from(xi_star: Vec<f64>) -> OffsetSummary {
        OffsetSummary {
            xi_hat: xi_star.clone(),
            xi_star,
            anchor_kind: AnchorKind::UniformAverage,
        }
    }

    fn random_phi(n: usize, c: usize, seed: u64) -> PortlandParams {
        let mut rng = Rng::new(seed);
        let mut phi = PortlandParams::zeros(n, c);
        rng.fill_normal(&mut phi.w, 0.3);
        rng.fill_normal(&mut phi.b, 0.3);
        phi
    }

    fn random_z(n: usize, c: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| (0..c).map(|_| 2.0 * rng.next_normal()).collect())
            .collect()
    }

    #[test]
    fn coopvec_zero_gate_is_uniform() {
        let phi = PortlandParams::zeros(4, 3);
        let z = vec![0.5; 12];
        let beta = coopvec(&phi, &z).unwrap();
        for &b in beta.as_slice() {
            assert_relative_eq!(b, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn coopvec_bias_only_analytic() {
        let mut phi = PortlandParams::zeros(2, 3);
        phi.b = vec![2.0f64.ln(), 0.0];
        let beta = coopvec(&phi, &[1.0; 6]).unwrap();
        assert_relative_eq!(beta.as_slice()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(beta.as_slice()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn coopvec_matches_linear_softmax_oracle() {
        // independent oracle: explicit row-by-row linear map + softmax
        let phi = random_phi(3, 4, 8);
        let z = concat_outputs(&random_z(3, 4, 9));
        let beta = coopvec(&phi, &z).unwrap();
        let d = 12;
        let u: Vec<f64> = (0..3)
            .map(|t| phi.b[t] + (0..d).map(|j| phi.w[t * d + j] * z[j]).sum::<f64>())
            .collect();
        let want = softmax(&u).unwrap();
        for (a, b) in beta.as_slice().iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn coopvec_is_simplex_for_many_random_inputs() {
        let phi = random_phi(5, 3, 2);
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..15).map(|_| 5.0 * rng.next_normal()).collect();
            let beta = coopvec(&phi, &z).unwrap();
            let sum: f64 = beta.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(beta.as_slice().iter().all(|&b| b >= 0.0));
        }
    }

    #[test]
    fn coopvec_rejects_shape_mismatch() {
        let phi = PortlandParams::zeros(2, 3);
        assert!(coopvec(&phi, &[0.0; 5]).is_err());
    }

    #[test]
    fn supervised_loss_one_hot_combined_is_zero() {
        // margin 60 logits: softmax is one-hot to double precision
        let z = vec![vec![60.0, 0.0, 0.0]; 2];
        let beta = CoopVec::uniform(2);
        let l = loss_boost_supervised(&z, &beta, 0, CombineSpace::Logit).unwrap();
        assert!(l.abs() < 1e-9, "loss {l}");
    }

    #[test]
    fn supervised_loss_uniform_combined_is_ln_c() {
        let z = vec![vec![0.0; 10]; 3];
        let beta = CoopVec::uniform(3);
        let l = loss_boost_supervised(&z, &beta, 4, CombineSpace::Logit).unwrap();
        assert_relative_eq!(l, 10.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn supervised_loss_hand_case() {
        // z1 = [2,0], z2 = [0,2], beta = [1/2, 1/2]: combined [1,1], so the
        // loss is -log softmax([1,1])[0] = ln 2
        let z = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let beta = CoopVec::uniform(2);
        let l = loss_boost_supervised(&z, &beta, 0, CombineSpace::Logit).unwrap();
        assert_relative_eq!(l, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn supervised_loss_rejects_bad_label() {
        let z = vec![vec![0.0, 0.0]];
        let beta = CoopVec::uniform(1);
        assert!(loss_boost_supervised(&z, &beta, 5, CombineSpace::Logit).is_err());
    }

    #[test]
    fn semi_loss_peaked_is_tiny() {
        let z = vec![vec![60.0, 0.0, 0.0]; 2];
        let beta = CoopVec::uniform(2);
        let l = loss_boost_semi(&z, &beta, CombineSpace::Logit).unwrap();
        assert!(l < 1e-20, "entropy {l}");
    }

    #[test]
    fn semi_loss_flat_is_ln_c() {
        let z = vec![vec![3.0; 7]; 2];
        let beta = CoopVec::uniform(2);
        let l = loss_boost_semi(&z, &beta, CombineSpace::Logit).unwrap();
        assert_relative_eq!(l, 7.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn semi_loss_matches_entropy_oracle() {
        // oracle value for entropy(softmax([1,0,0])) computed independently
        let z = vec![vec![1.0, 0.0, 0.0]];
        let beta = CoopVec::uniform(1);
        let l = loss_boost_semi(&z, &beta, CombineSpace::Logit).unwrap();
        assert_relative_eq!(l, 0.975327829166222, epsilon = 1e-12);
    }

    #[test]
    fn align_zero_offsets_zero_loss() {
        let beta = CoopVec::new(vec![0.3, 0.7]).unwrap();
        let off = offsets_from(vec![0.0, 0.0]);
        assert_eq!(loss_align(&beta, &off, AlignVariant::PerTerm).unwrap(), 0.0);
        assert_eq!(
            loss_align(&beta, &off, AlignVariant::SumSquare).unwrap(),
            0.0
        );
    }

    #[test]
    fn align_hand_cases() {
        let off = offsets_from(vec![1.0, -1.0]);
        let half = CoopVec::uniform(2);
        assert_relative_eq!(
            loss_align(&half, &off, AlignVariant::PerTerm).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        let e1 = CoopVec::one_hot(2, 0);
        assert_relative_eq!(
            loss_align(&e1, &off, AlignVariant::PerTerm).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // aggregate variant vanishes for the balanced case
        assert_relative_eq!(
            loss_align(&half, &off, AlignVariant::SumSquare).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn align_permutation_invariant() {
        let mut rng = Rng::new(12);
        for _ in 0..30 {
            let logits: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
            let beta = CoopVec::new(softmax(&logits).unwrap()).unwrap();
            let xi: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
            let l = loss_align(&beta, &offsets_from(xi.clone()), AlignVariant::PerTerm).unwrap();
            let perm = [3usize, 1, 0, 2];
            let pbeta = CoopVec::new(perm.iter().map(|&i| beta.as_slice()[i]).collect()).unwrap();
            let pxi: Vec<f64> = perm.iter().map(|&i| xi[i]).collect();
            let lp = loss_align(&pbeta, &offsets_from(pxi), AlignVariant::PerTerm).unwrap();
            assert_relative_eq!(l, lp, epsilon = 1e-12);
        }
    }

    fn fd_grad_phi(
        phi: &PortlandParams,
        z_list: &[Vec<f64>],
        offsets: &OffsetSummary,
        y: Option<usize>,
        spec: &LossSpec,
        h: f64,
    ) -> PortlandGrad {
        let eval =
            |phi: &PortlandParams| datum_loss(phi, z_list, offsets, y, spec).unwrap().l_total;
        let mut g = PortlandGrad::zeros(phi);
        for i in 0..phi.w.len() {
            let mut plus = phi.clone();
            plus.w[i] += h;
            let mut minus = phi.clone();
            minus.w[i] -= h;
            g.dw[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        for i in 0..phi.b.len() {
            let mut plus = phi.clone();
            plus.b[i] += h;
            let mut minus = phi.clone();
            minus.b[i] -= h;
            g.db[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        g
    }

    fn grad_rel_err(a: &PortlandGrad, n: &PortlandGrad) -> f64 {
        let scale = a
            .dw
            .iter()
            .chain(&a.db)
            .chain(&n.dw)
            .chain(&n.db)
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(1e-12);
        let max_diff = a
            .dw
            .iter()
            .zip(&n.dw)
            .chain(a.db.iter().zip(&n.db))
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        max_diff / scale
    }

    #[test]
    fn grad_matches_finite_differences_all_modes() {
        let mut cfg_idx = 0u64;
        for mode in [LossMode::Supervised, LossMode::SemiSupervised] {
            for variant in [AlignVariant::PerTerm, AlignVariant::SumSquare] {
                for space in [CombineSpace::Logit, CombineSpace::Probability] {
                    for _ in 0..5 {
                        cfg_idx += 1;
                        let phi = random_phi(3, 4, cfg_idx);
                        let z = random_z(3, 4, 1000 + cfg_idx);
                        let mut rng = Rng::new(2000 + cfg_idx);
                        let xi: Vec<f64> = (0..3).map(|_| rng.next_normal()).collect();
                        let off = offsets_from(xi);
                        let y = match mode {
                            LossMode::Supervised => Some(rng.next_index(4)),
                            LossMode::SemiSupervised => None,
                        };
                        let spec = LossSpec {
                            mode,
                            weights: LossWeights {
                                alpha: 0.8,
                                beta_w: 1.3,
                            },
                            align_variant: variant,
                            space,
                        };
                        let analytic = grad_phi(&phi, &z, &off, y, &spec).unwrap();
                        let numeric = fd_grad_phi(&phi, &z, &off, y, &spec, 1e-6);
                        let err = grad_rel_err(&analytic, &numeric);
                        assert!(
                            err < 1e-5,
                            "cfg {cfg_idx} {mode:?} {variant:?} {space:?}: err {err}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn grad_zero_when_objective_is_flat() {
        // alpha = 0 and xi_star = 0: nothing to optimize
        let phi = random_phi(3, 4, 5);
        let z = random_z(3, 4, 6);
        let off = offsets_from(vec![0.0; 3]);
        let spec = LossSpec {
            mode: LossMode::SemiSupervised,
            weights: LossWeights {
                alpha: 0.0,
                beta_w: 1.0,
            },
            align_variant: AlignVariant::PerTerm,
            space: CombineSpace::Logit,
        };
        let g = grad_phi(&phi, &z, &off, None, &spec).unwrap();
        assert!(g.dw.iter().all(|&v| v == 0.0));
        assert!(g.db.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_rows_sum_to_zero() {
        // the softmax gate constrains beta to the simplex, so pushing all
        // logits together changes nothing; for T = 2 the two bias rows are
        // equal and opposite
        let phi = PortlandParams::zeros(2, 3);
        let z = vec![vec![1.0, -0.5, 0.2], vec![-1.0, 0.5, -0.2]];
        let off = offsets_from(vec![1.0, -1.0]);
        let spec = LossSpec::semi_default();
        let g = grad_phi(&phi, &z, &off, None, &spec).unwrap();
        assert_eq!(g.db[0], -g.db[1]);

        let phi = random_phi(4, 3, 33);
        let z = random_z(4, 3, 44);
        let off = offsets_from(vec![0.5, -0.5, 1.5, -1.5]);
        let g = grad_phi(&phi, &z, &off, None, &spec).unwrap();
        let sum: f64 = g.db.iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn grad_rejects_label_mode_mismatch() {
        let phi = PortlandParams::zeros(2, 3);
        let z = random_z(2, 3, 1);
        let off = offsets_from(vec![0.0, 0.0]);
        assert!(grad_phi(&phi, &z, &off, None, &LossSpec::supervised_default()).is_err());
        assert!(grad_phi(&phi, &z, &off, Some(0), &LossSpec::semi_default()).is_err());
    }

    #[test]
    fn loss_breakdown_combines_exactly() {
        let phi = random_phi(2, 3, 9);
        let z = random_z(2, 3, 10);
        let off = offsets_from(vec![1.0, -1.0]);
        let spec = LossSpec {
            weights: LossWeights {
                alpha: 0.7,
                beta_w: 2.5,
            },
            ..LossSpec::semi_default()
        };
        let l = datum_loss(&phi, &z, &off, None, &spec).unwrap();
        assert_eq!(l.l_total, 0.7 * l.l_boost + 2.5 * l.l_align);
    }

    #[test]
    fn scale_link_xi_star_invariant_under_common_scaling() {
        use crate::collab::{compute_offsets, ModelBank};
        use crate::mlp::{Activation, MlpSpec, Origin, TaskModel};
        use crate::num::ParamVec;
        // scaling all offsets by c > 0 scales xi_hat by c and its std by c,
        // leaving xi_star (hence the alignment loss) unchanged
        let spec = MlpSpec::new(vec![2, 3], Activation::Tanh).unwrap();
        let mk_bank = |scale: f64| {
            let base = vec![0.1; spec.param_count()];
            let models: Vec<TaskModel> = (0..3)
                .map(|i| {
                    let mut p = base.clone();
                    for (j, v) in p.iter_mut().enumerate() {
                        *v += scale * ((i + 1) as f64) * 0.01 * ((j % 3) as f64 - 1.0);
                    }
                    TaskModel::new(
                        spec.clone(),
                        ParamVec::new(p).unwrap(),
                        Origin::SharedInit,
                        i,
                    )
                    .unwrap()
                })
                .collect();
            ModelBank::new(models, None).unwrap()
        };
        let s1 = compute_offsets(&mk_bank(1.0), AnchorKind::UniformAverage, None).unwrap();
        let s2 = compute_offsets(&mk_bank(7.0), AnchorKind::UniformAverage, None).unwrap();
        for (a, b) in s1.xi_star.iter().zip(&s2.xi_star) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn portland_checkpoint_roundtrip() {
        let phi = random_phi(3, 5, 21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("portland.json");
        save_portland(&path, &phi, LossMode::SemiSupervised, &LossWeights::default()).unwrap();
        let (loaded, mode, weights) = load_portland(&path).unwrap();
        assert_eq!(loaded, phi);
        assert_eq!(mode, LossMode::SemiSupervised);
        assert_eq!(weights, LossWeights::default());
    }
}
