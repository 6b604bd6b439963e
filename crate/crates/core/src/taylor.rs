//! Measures the order of the ensembling-vs-merging residual directly.
//!
//! A family of models is built as `anchor + eps * xi_t`; shrinking `eps`
//! shrinks every offset uniformly. The residual compares the beta-weighted
//! ensemble of the scaled family against the merged model's prediction, and
//! the fitted log-log slope of residual against `eps` exposes the order:
//!
//! * weighted-mean mode merges with the same beta used for ensembling, so
//!   the weighted offset sum vanishes by construction and the first-order
//!   terms cancel — slope 2;
//! * anchored mode merges with uniform weights at the precomputed average
//!   while ensembling with beta, so a first-order term survives whenever
//!   beta is not uniform — slope 1.
//!
//! Requires smooth activations (tanh); relu banks are rejected.

use serde::{Deserialize, Serialize};

use crate::collab::{AnchorKind, CoopVec, ModelBank};
use crate::error::{Error, Result};
use crate::mlp::{forward, Activation, MlpSpec, Origin, TaskModel};
use crate::num::{weighted_sum, ParamVec, Rng};
use crate::par;

/// Where the merged model sits relative to the scaled family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    /// Merge at the beta-weighted mean of the family.
    WeightedMean,
    /// Merge with uniform weights at the fixed precomputed anchor.
    Anchored,
}

impl ScalingMode {
    pub fn anchor_kind(self) -> AnchorKind {
        match self {
            ScalingMode::WeightedMean => AnchorKind::WeightedAverage,
            ScalingMode::Anchored => AnchorKind::UniformAverage,
        }
    }
}

/// An anchor point plus per-model offset directions.
#[derive(Clone, Debug)]
pub struct OffsetFamily {
    pub spec: MlpSpec,
    pub anchor: ParamVec,
    pub offsets: Vec<ParamVec>,
}

impl OffsetFamily {
    pub fn new(spec: MlpSpec, anchor: ParamVec, offsets: Vec<ParamVec>) -> Result<Self> {
        if spec.activation != Activation::Tanh {
            return Err(Error::Config(
                "residual measurement requires the smooth (tanh) activation".into(),
            ));
        }
        if anchor.dim() != spec.param_count() {
            return Err(Error::DimMismatch {
                index: 0,
                expected: spec.param_count(),
                got: anchor.dim(),
            });
        }
        for (t, xi) in offsets.iter().enumerate() {
            if xi.dim() != anchor.dim() {
                return Err(Error::DimMismatch {
                    index: t,
                    expected: anchor.dim(),
                    got: xi.dim(),
                });
            }
        }
        if offsets.is_empty() {
            return Err(Error::Empty("OffsetFamily requires at least one offset"));
        }
        Ok(OffsetFamily {
            spec,
            anchor,
            offsets,
        })
    }

    /// Family derived from a bank: offsets of each model from the anchor the
    /// mode prescribes. Offsets are rescaled by one common factor so the
    /// largest has unit norm (a common factor preserves every weighted-sum
    /// identity; it only recenters the epsilon dial). Families already near
    /// zero are left untouched.
    pub fn from_bank(bank: &ModelBank, beta: &CoopVec, mode: ScalingMode) -> Result<Self> {
        let anchor = match mode {
            ScalingMode::WeightedMean => crate::collab::merge(bank, beta)?,
            ScalingMode::Anchored => bank.uniform_anchor().clone(),
        };
        let mut offsets: Vec<ParamVec> = bank
            .models()
            .iter()
            .map(|m| m.params.sub(&anchor))
            .collect::<Result<_>>()?;
        let max_norm = offsets.iter().map(|o| o.norm()).fold(0.0f64, f64::max);
        if max_norm > 1e-6 {
            let c = 1.0 / max_norm;
            offsets = offsets.iter().map(|o| o.scale(c)).collect::<Result<_>>()?;
        }
        OffsetFamily::new(bank.spec().clone(), anchor, offsets)
    }
}

/// `max_i | sum_t beta_t * (f(anchor + eps*xi_t, x) - f(merged, x))_i |`
/// with the merged model at `anchor + eps * sum_t beta_merge_t * xi_t`.
///
/// The difference is accumulated inside the beta sum (rather than as
/// `sum beta_t f_t - f_merged`) so the residual is exactly zero whenever all
/// family outputs coincide with the merged output, independent of how beta's
/// floating-point entries sum.
fn residual_general(
    family: &OffsetFamily,
    beta_ens: &CoopVec,
    beta_merge: &CoopVec,
    epsilon: f64,
    x: &[f64],
) -> Result<f64> {
    let t = family.offsets.len();
    if beta_ens.len() != t || beta_merge.len() != t {
        return Err(Error::DimMismatch {
            index: 0,
            expected: t,
            got: beta_ens.len(),
        });
    }
    let merge_dir = weighted_sum(&family.offsets, beta_merge.as_slice())?;
    let merged_point = family.anchor.add_scaled(epsilon, &merge_dir)?;
    let merged_out = forward(&family.spec, &merged_point, x)?;

    let mut acc = vec![0.0; merged_out.len()];
    for (xi, &b) in family.offsets.iter().zip(beta_ens.as_slice()) {
        let point = family.anchor.add_scaled(epsilon, xi)?;
        let out = forward(&family.spec, &point, x)?;
        for ((a, o), m) in acc.iter_mut().zip(&out).zip(&merged_out) {
            *a += b * (o - m);
        }
    }
    Ok(acc.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Residual with the merged model at the beta-weighted point.
pub fn residual(family: &OffsetFamily, beta: &CoopVec, epsilon: f64, x: &[f64]) -> Result<f64> {
    residual_general(family, beta, beta, epsilon, x)
}

/// Fit window: below 1e-12 float noise dominates, above 1e-2 higher-order
/// terms contaminate the slope.
const FIT_FLOOR: f64 = 1e-12;
const FIT_CEIL: f64 = 1e-2;
/// Residuals below this are indistinguishable from rounding noise.
const NOISE_FLOOR: f64 = 1e-14;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingReport {
    pub mode: ScalingMode,
    pub anchor_kind: AnchorKind,
    pub epsilons: Vec<f64>,
    /// Max-over-probes sup-norm residual at each epsilon.
    pub residuals: Vec<f64>,
    /// Least-squares slope of ln(residual) against ln(eps) over the fit
    /// window; absent when the grid is degenerate.
    pub fitted_slope: Option<f64>,
    pub degenerate: bool,
    /// `|| sum_t beta_t xi_t ||_2` for the offsets the mode prescribes.
    pub condition_norm: f64,
}

/// Geometric default grid `2^-1 .. 2^-12`.
pub fn default_eps_grid() -> Vec<f64> {
    (1..=12).map(|k| 0.5f64.powi(k)).collect()
}

/// Run the scaling experiment for one bank and beta.
pub fn scaling_experiment(
    bank: &ModelBank,
    beta: &CoopVec,
    mode: ScalingMode,
    eps_grid: &[f64],
    probes: &[Vec<f64>],
) -> Result<ScalingReport> {
    if probes.is_empty() {
        return Err(Error::Empty("scaling_experiment requires probe inputs"));
    }
    if eps_grid.is_empty() {
        return Err(Error::Empty("scaling_experiment requires an epsilon grid"));
    }
    let family = OffsetFamily::from_bank(bank, beta, mode)?;
    let beta_merge = match mode {
        ScalingMode::WeightedMean => beta.clone(),
        ScalingMode::Anchored => CoopVec::uniform(bank.len()),
    };
    let residuals: Vec<f64> = {
        let rs = par::map_slice(eps_grid, |&eps| {
            let mut worst = 0.0f64;
            for x in probes {
                let r = residual_general(&family, beta, &beta_merge, eps, x)?;
                worst = worst.max(r);
            }
            Ok::<f64, Error>(worst)
        });
        rs.into_iter().collect::<Result<_>>()?
    };
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite {
            quantity: "residual".into(),
            location: "scaling_experiment".into(),
        });
    }
    let condition_norm = weighted_sum(&family.offsets, beta.as_slice())?.norm();

    let pts: Vec<(f64, f64)> = eps_grid
        .iter()
        .zip(&residuals)
        .filter(|(_, &r)| r >= FIT_FLOOR && r <= FIT_CEIL)
        .map(|(&e, &r)| (e.ln(), r.ln()))
        .collect();
    let degenerate = residuals.iter().all(|&r| r < NOISE_FLOOR) || pts.len() < 2;
    let fitted_slope = if degenerate {
        None
    } else {
        Some(least_squares_slope(&pts))
    };
    Ok(ScalingReport {
        mode,
        anchor_kind: mode.anchor_kind(),
        epsilons: eps_grid.to_vec(),
        residuals,
        fitted_slope,
        degenerate,
        condition_norm,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

impl ScalingReport {
    /// Two-column CSV `epsilon,residual`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,residual\n");
        for (e, r) in self.epsilons.iter().zip(&self.residuals) {
            out.push_str(&format!("{e},{r}\n"));
        }
        out
    }
}

/// A bank of independently initialized tanh models, for experiments that
/// need generic curvature rather than trained weights.
pub fn random_tanh_bank(n_models: usize, seed: u64) -> ModelBank {
    let spec = MlpSpec::new(vec![6, 10, 4], Activation::Tanh).unwrap();
    let models: Vec<TaskModel> = (0..n_models)
        .map(|t| {
            let mut rng = Rng::new(seed.wrapping_mul(1315) ^ (t as u64 + 1));
            TaskModel::init(spec.clone(), Origin::IndependentInit, t, &mut rng)
        })
        .collect();
    ModelBank::new(models, None).unwrap()
}

/// Fixed probe batch drawn from a seeded stream.
pub fn probe_batch(input_dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| (0..input_dim).map(|_| rng.next_normal()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn family_from_bank(seed: u64, t: usize) -> (ModelBank, OffsetFamily, CoopVec) {
        let bank = random_tanh_bank(t, seed);
        let beta = CoopVec::uniform(t);
        let family = OffsetFamily::from_bank(&bank, &beta, ScalingMode::WeightedMean).unwrap();
        (bank, family, beta)
    }

    #[test]
    fn residual_zero_at_eps_zero() {
        let (_, family, beta) = family_from_bank(1, 3);
        let x = probe_batch(6, 1, 2).remove(0);
        assert_eq!(residual(&family, &beta, 0.0, &x).unwrap(), 0.0);
    }

    #[test]
    fn residual_zero_for_single_model() {
        let bank = random_tanh_bank(1, 3);
        let beta = CoopVec::uniform(1);
        let family = OffsetFamily::from_bank(&bank, &beta, ScalingMode::WeightedMean).unwrap();
        let x = probe_batch(6, 1, 4).remove(0);
        for eps in [0.5, 0.1, 1e-3] {
            assert_eq!(residual(&family, &beta, eps, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn residual_zero_for_identical_offsets() {
        // all models share one offset: both sides evaluate the same point —
        // exactly, for weights whose left fold reproduces the offset
        // bit-for-bit
        let spec = MlpSpec::new(vec![6, 10, 4], Activation::Tanh).unwrap();
        let mut rng = Rng::new(9);
        let anchor = {
            let m = TaskModel::init(spec.clone(), Origin::IndependentInit, 0, &mut rng);
            m.params
        };
        let mut xi = vec![0.0; spec.param_count()];
        rng.fill_normal(&mut xi, 0.5);
        let xi = ParamVec::new(xi).unwrap();
        let family =
            OffsetFamily::new(spec, anchor, vec![xi.clone(), xi.clone(), xi.clone()]).unwrap();
        let x = probe_batch(6, 1, 11).remove(0);
        for beta in [
            CoopVec::new(vec![0.25, 0.25, 0.5]).unwrap(),
            CoopVec::one_hot(3, 1),
        ] {
            for eps in [0.5, 0.01] {
                assert_eq!(residual(&family, &beta, eps, &x).unwrap(), 0.0);
            }
        }
        // arbitrary simplex weights stay at the rounding floor
        let beta = CoopVec::new(vec![0.3, 0.45, 0.25]).unwrap();
        assert!(residual(&family, &beta, 0.1, &x).unwrap() < 1e-13);
    }

    #[test]
    fn residual_invariant_under_pair_permutation() {
        let (_, family, _) = family_from_bank(5, 3);
        let beta = CoopVec::new(vec![0.6, 0.3, 0.1]).unwrap();
        let x = probe_batch(6, 1, 6).remove(0);
        let r = residual(&family, &beta, 0.05, &x).unwrap();

        let perm = [2usize, 0, 1];
        let pfam = OffsetFamily::new(
            family.spec.clone(),
            family.anchor.clone(),
            perm.iter().map(|&i| family.offsets[i].clone()).collect(),
        )
        .unwrap();
        let pbeta = CoopVec::new(perm.iter().map(|&i| beta.as_slice()[i]).collect()).unwrap();
        let rp = residual(&pfam, &pbeta, 0.05, &x).unwrap();
        assert_relative_eq!(r, rp, epsilon = 1e-12, max_relative = 1e-9);
    }

    #[test]
    fn halving_eps_quarters_residual_in_weighted_mode() {
        let bank = random_tanh_bank(3, 21);
        let beta = CoopVec::new(vec![0.5, 0.3, 0.2]).unwrap();
        let family = OffsetFamily::from_bank(&bank, &beta, ScalingMode::WeightedMean).unwrap();
        let probes = probe_batch(6, 4, 22);
        let res_at = |eps: f64| {
            probes
                .iter()
                .map(|x| residual(&family, &beta, eps, x).unwrap())
                .fold(0.0f64, f64::max)
        };
        for eps in [1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0] {
            let ratio = res_at(eps) / res_at(eps / 2.0);
            assert!(
                (3.4..=4.6).contains(&ratio),
                "eps {eps}: ratio {ratio} outside [3.4, 4.6]"
            );
        }
    }

    #[test]
    fn weighted_mode_condition_norm_vanishes() {
        for seed in 0..5u64 {
            let bank = random_tanh_bank(3, 40 + seed);
            let beta = CoopVec::new(vec![0.7, 0.2, 0.1]).unwrap();
            let report = scaling_experiment(
                &bank,
                &beta,
                ScalingMode::WeightedMean,
                &default_eps_grid(),
                &probe_batch(6, 4, seed),
            )
            .unwrap();
            assert!(report.condition_norm < 1e-12, "{}", report.condition_norm);
        }
    }

    #[test]
    fn weighted_mode_slope_is_second_order() {
        let bank = random_tanh_bank(3, 60);
        let beta = CoopVec::new(vec![0.5, 0.25, 0.25]).unwrap();
        let report = scaling_experiment(
            &bank,
            &beta,
            ScalingMode::WeightedMean,
            &default_eps_grid(),
            &probe_batch(6, 8, 61),
        )
        .unwrap();
        let slope = report.fitted_slope.expect("not degenerate");
        assert!((1.8..=2.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn anchored_mode_slope_is_first_order_for_skewed_beta() {
        let bank = random_tanh_bank(3, 62);
        let beta = CoopVec::new(vec![0.7, 0.2, 0.1]).unwrap();
        let report = scaling_experiment(
            &bank,
            &beta,
            ScalingMode::Anchored,
            &default_eps_grid(),
            &probe_batch(6, 8, 63),
        )
        .unwrap();
        let slope = report.fitted_slope.expect("not degenerate");
        assert!((0.9..=1.1).contains(&slope), "slope {slope}");
        assert!(report.condition_norm > 1e-3);
    }

    #[test]
    fn anchored_mode_uniform_beta_recovers_second_order() {
        let bank = random_tanh_bank(3, 64);
        let beta = CoopVec::uniform(3);
        let report = scaling_experiment(
            &bank,
            &beta,
            ScalingMode::Anchored,
            &default_eps_grid(),
            &probe_batch(6, 8, 65),
        )
        .unwrap();
        let slope = report.fitted_slope.expect("not degenerate");
        assert!((1.8..=2.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn identical_bank_is_degenerate_with_zero_residuals() {
        let spec = MlpSpec::new(vec![6, 10, 4], Activation::Tanh).unwrap();
        let mut rng = Rng::new(70);
        let proto = TaskModel::init(spec, Origin::SharedInit, 0, &mut rng);
        let models: Vec<TaskModel> = (0..3)
            .map(|i| TaskModel {
                task_id: i,
                ..proto.clone()
            })
            .collect();
        let bank = ModelBank::new(models, None).unwrap();
        let beta = CoopVec::new(vec![0.25, 0.25, 0.5]).unwrap();
        let report = scaling_experiment(
            &bank,
            &beta,
            ScalingMode::WeightedMean,
            &default_eps_grid(),
            &probe_batch(6, 4, 71),
        )
        .unwrap();
        assert!(report.degenerate);
        assert!(report.fitted_slope.is_none());
        assert!(report.residuals.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn relu_families_are_rejected() {
        let spec = MlpSpec::new(vec![4, 4, 2], Activation::Relu).unwrap();
        let anchor = ParamVec::zeros(spec.param_count());
        let xi = ParamVec::zeros(spec.param_count());
        assert!(OffsetFamily::new(spec, anchor, vec![xi]).is_err());
    }

    #[test]
    fn csv_export_has_two_columns() {
        let bank = random_tanh_bank(2, 80);
        let report = scaling_experiment(
            &bank,
            &CoopVec::uniform(2),
            ScalingMode::WeightedMean,
            &default_eps_grid(),
            &probe_batch(6, 2, 81),
        )
        .unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epsilon,residual");
        for line in lines {
            assert_eq!(line.split(',').count(), 2);
        }
    }
}
