//! Heavy-traffic experiments: r-indexed simulation campaigns, fluid and
//! diffusion scalings of trajectories, state-space-collapse statistics,
//! and the closed-form identity suite tying the grid numerics to the
//! derived parameters.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diffusion::{rbm_marginal_samples, LimitMeasureMaps};
use crate::error::{Error, Result};
use crate::gridconv::{
    compute_cal_b, convolve_mat_diag, matrix_measure_moment, GridMatrixFun, GridVecFun,
};
use crate::measures::{excess_tail, measure_distance_vec, Grid, PointMeasure, TailFunction};
use crate::model::{derived_params, heavy_traffic_sequence, DerivedParams, QueueModel};
use crate::simulator::{replicate, DescriptorSet, SimOptions, Snapshot, Trajectory};

/// Scaling regimes of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingKind {
    /// X(rt)/r, with the cumulative service viewed as S(rt).
    Fluid,
    /// Centered second-order scaling: time r^2 t, space 1/r.
    Diffusion,
}

/// Lazily scaled accessors into a trajectory.
pub struct ScaledView<'a> {
    pub r: f64,
    pub kind: ScalingKind,
    traj: &'a Trajectory,
    lambda: DVector<f64>,
    alpha: Vec<f64>,
}

pub fn scale<'a>(
    traj: &'a Trajectory,
    r: f64,
    kind: ScalingKind,
    dp: &DerivedParams,
    alpha: &[f64],
) -> ScaledView<'a> {
    ScaledView {
        r,
        kind,
        traj,
        lambda: dp.lambda.clone(),
        alpha: alpha.to_vec(),
    }
}

impl<'a> ScaledView<'a> {
    fn unscaled_time(&self, t: f64) -> f64 {
        match self.kind {
            ScalingKind::Fluid => self.r * t,
            ScalingKind::Diffusion => self.r * self.r * t,
        }
    }

    /// Snapshot recorded at the unscaled image of t.
    pub fn snapshot_at(&self, t: f64) -> Result<&Snapshot> {
        let target = self.unscaled_time(t);
        if target > self.traj.horizon * (1.0 + 1e-9) + 1e-9 {
            return Err(Error::HorizonTooShort {
                horizon: self.traj.horizon,
                r: self.r,
                t,
            });
        }
        let tol = 1e-6 * (1.0 + target.abs());
        self.traj
            .snapshots
            .iter()
            .find(|s| (s.t - target).abs() <= tol)
            .ok_or_else(|| {
                Error::Validation(format!("no snapshot recorded at unscaled time {target}"))
            })
    }

    pub fn w_hat(&self, t: f64) -> Result<f64> {
        Ok(self.snapshot_at(t)?.workload / self.r)
    }

    pub fn z_hat(&self, t: f64) -> Result<DVector<f64>> {
        let s = self.snapshot_at(t)?;
        Ok(DVector::from_iterator(
            s.z.len(),
            s.z.iter().map(|&z| z as f64 / self.r),
        ))
    }

    /// Centered arrivals: (A(r^2 t) - lambda r^2 t) / r.
    pub fn a_hat(&self, t: f64) -> Result<DVector<f64>> {
        let s = self.snapshot_at(t)?;
        let ut = self.unscaled_time(t);
        Ok(DVector::from_iterator(
            s.arrivals.len(),
            s.arrivals
                .iter()
                .enumerate()
                .map(|(k, &a)| (a as f64 - self.lambda[k] * ut) / self.r),
        ))
    }

    pub fn e_hat(&self, t: f64) -> Result<DVector<f64>> {
        let s = self.snapshot_at(t)?;
        let ut = self.unscaled_time(t);
        Ok(DVector::from_iterator(
            s.exogenous.len(),
            s.exogenous
                .iter()
                .enumerate()
                .map(|(k, &e)| (e as f64 - self.alpha[k] * ut) / self.r),
        ))
    }

    /// Measure snapshots scale in mass only: locations are untouched.
    pub fn mu_hat(&self, t: f64) -> Result<Vec<PointMeasure>> {
        let s = self.snapshot_at(t)?;
        let mu = s
            .mu
            .as_ref()
            .ok_or_else(|| Error::Validation("trajectory lacks mu snapshots".into()))?;
        Ok(mu.iter().map(|m| m.scale_mass(1.0 / self.r)).collect())
    }

    pub fn q_hat(&self, t: f64) -> Result<Vec<PointMeasure>> {
        let s = self.snapshot_at(t)?;
        let q = s
            .queue_desc
            .as_ref()
            .ok_or_else(|| Error::Validation("trajectory lacks Q snapshots".into()))?;
        Ok(q.iter().map(|m| m.scale_mass(1.0 / self.r)).collect())
    }
}

/// Sup over the time grid of the distance between the scaled empirical
/// descriptors and their lifted images: the SSC statistics for mu and Q.
pub fn ssc_statistic(
    view: &ScaledView<'_>,
    maps: &LimitMeasureMaps,
    t_grid: &[f64],
) -> Result<(f64, f64)> {
    let grid = maps.grid;
    let mut worst_mu = 0.0f64;
    let mut worst_q = 0.0f64;
    for &t in t_grid {
        let w = view.w_hat(t)?;
        let mu_emp: Vec<TailFunction> = view.mu_hat(t)?.iter().map(|m| m.to_tail(&grid)).collect();
        let q_emp: Vec<TailFunction> = view.q_hat(t)?.iter().map(|m| m.to_tail(&grid)).collect();
        worst_mu = worst_mu.max(measure_distance_vec(&mu_emp, &maps.mu_at(w))?);
        worst_q = worst_q.max(measure_distance_vec(&q_emp, &maps.q_at(w))?);
    }
    Ok((worst_mu, worst_q))
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> f64 {
    let mut xs = xs.to_vec();
    let mut ys = ys.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d = 0.0f64;
    while i < n && j < m {
        let xv = xs[i];
        let yv = ys[j];
        let v = xv.min(yv);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Large-sample critical value c(alpha) sqrt((n+m)/(n m)).
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n * m) as f64).sqrt()
}

/// Precomputed grid kernels for one model: the feedback kernel and its
/// convolutions with the service, initial-service and excess measures.
pub struct ModelKernels {
    pub ext: Grid,
    pub cal_b: GridMatrixFun,
    pub bv: GridMatrixFun,
    pub bv0: GridMatrixFun,
    pub bve: GridMatrixFun,
}

impl ModelKernels {
    pub fn build(model: &QueueModel, h: f64, x_max: f64) -> Result<Self> {
        let ext = Grid::new(h, x_max);
        let cdfs = |specs: &[crate::model::ServiceSpec]| -> GridVecFun {
            GridVecFun::from_components(
                specs
                    .iter()
                    .map(|s| (0..ext.len()).map(|i| s.cdf(ext.point(i))).collect())
                    .collect(),
                ext,
            )
        };
        let b_cdf = cdfs(&model.services);
        let b_mat = GridMatrixFun::from_diag_cdfs(
            (0..model.k).map(|k| b_cdf.comp(k).to_vec()).collect(),
            ext,
        );
        let cal_b = compute_cal_b(&b_mat, &model.routing, 1e-10)?;
        let bv = convolve_mat_diag(&cal_b, &b_cdf)?;
        let bv0 = convolve_mat_diag(&cal_b, &cdfs(&model.initial_services))?;
        let nu_e_cdf = GridVecFun::from_components(
            model
                .services
                .iter()
                .map(|s| {
                    let e = excess_tail(s, ext);
                    e.values.iter().map(|v| 1.0 - v).collect()
                })
                .collect(),
            ext,
        );
        let bve = convolve_mat_diag(&cal_b, &nu_e_cdf)?;
        Ok(ModelKernels {
            ext,
            cal_b,
            bv,
            bv0,
            bve,
        })
    }

    /// Default horizon policy: 80 times the largest mean service.
    pub fn default_x_max(model: &QueueModel) -> f64 {
        80.0 * model
            .services
            .iter()
            .map(|s| s.mean())
            .fold(0.0f64, f64::max)
    }
}

/// One evaluated identity.
#[derive(Debug, Clone)]
pub struct IdentityRow {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn row(name: &str, rel_err: f64, tol: f64) -> IdentityRow {
    IdentityRow {
        name: name.to_string(),
        rel_err,
        tol,
        pass: rel_err <= tol,
    }
}

fn rel_mat(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    let scale = want.amax().max(1e-12);
    (got - want).amax() / scale
}

fn rel_scalar(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

/// Every closed-form identity in scope, evaluated on the grid: the
/// feedback-kernel moment identities, the variance assembly pieces, the
/// renewal mean and the criticality normalization.
pub fn identity_suite(
    model: &QueueModel,
    dp: &DerivedParams,
    kernels: &ModelKernels,
) -> Result<Vec<IdentityRow>> {
    let k = dp.k;
    let h = kernels.ext.h;
    let grid_tol = 5.0 * h;
    let e = DMatrix::<f64>::from_element(1, k, 1.0);
    let pt = model.routing.matrix().transpose();
    let mut rows = Vec::new();

    // moment identities of the kernel convolutions
    let m0_bv = matrix_measure_moment(&kernels.bv, 0);
    rows.push(row("<1, calB*V> = Q", rel_mat(&m0_bv, &dp.q), grid_tol));
    let m1_bv = matrix_measure_moment(&kernels.bv, 1);
    let want_m1 = &dp.q * &dp.m * &dp.q;
    rows.push(row("<chi, calB*V> = QMQ", rel_mat(&m1_bv, &want_m1), grid_tol));
    let m0_bv0 = matrix_measure_moment(&kernels.bv0, 0);
    rows.push(row("<1, calB*V0> = Q", rel_mat(&m0_bv0, &dp.q), grid_tol));
    let m1_bv0 = matrix_measure_moment(&kernels.bv0, 1);
    let want_m1_v0 = &dp.q * (&dp.m0 + &dp.m * &pt * &dp.q);
    rows.push(row(
        "<chi, calB*V0> = Q(M0 + MP'Q)",
        rel_mat(&m1_bv0, &want_m1_v0),
        grid_tol,
    ));
    let m2_bv = matrix_measure_moment(&kernels.bv, 2);
    let want_m2 = &dp.q * (&dp.m2 + 2.0 * &dp.m * &dp.q * &pt * &dp.m) * &dp.q;
    rows.push(row(
        "<chi^2, calB*V> = Q(M2 + 2MQP'M)Q",
        rel_mat(&m2_bv, &want_m2),
        grid_tol,
    ));

    // exact covariance algebra
    let mut h_sum = DMatrix::zeros(k, k);
    for (kk, hmat) in dp.h_cov.iter().enumerate() {
        h_sum += hmat * dp.lambda[kk];
    }
    let lhs_l4 = &dp.lambda_diag - &dp.d_alpha - &pt * &dp.lambda_diag * model.routing.matrix();
    rows.push(row(
        "Lambda - D_alpha - P'Lambda P = sum lambda_k H^k",
        (lhs_l4 - &h_sum).amax(),
        1e-10,
    ));

    // zeta moments from the grid: <chi^p, zeta> = e (I - P') <chi^p, calB*V>
    let i_minus_pt = DMatrix::<f64>::identity(k, k) - &pt;
    let zeta1 = (&e * &i_minus_pt * &m1_bv).transpose();
    let zeta2 = (&e * &i_minus_pt * &m2_bv).transpose();
    let alpha = DVector::from_column_slice(&model.alpha);

    let var_l1: f64 = (0..k).map(|i| zeta2[i] * alpha[i]).sum();
    let want_l1 = (&e * &dp.sigma_sq * &dp.lambda_diag * e.transpose())[(0, 0)]
        + (&e
            * &dp.m
            * &dp.q
            * (&dp.lambda_diag - &pt * &dp.lambda_diag * model.routing.matrix())
            * dp.q.transpose()
            * &dp.m
            * e.transpose())[(0, 0)];
    rows.push(row(
        "sum <chi^2, zeta_k> alpha_k (var-L1)",
        rel_scalar(var_l1, want_l1),
        grid_tol,
    ));

    let var_l2: f64 = (0..k).map(|i| zeta1[i] * zeta1[i] * alpha[i]).sum();
    let want_l2 = (&e * &dp.m * &dp.q * &dp.d_alpha * dp.q.transpose() * &dp.m * e.transpose())
        [(0, 0)];
    rows.push(row(
        "sum <chi, zeta_k>^2 alpha_k (var-L2)",
        rel_scalar(var_l2, want_l2),
        grid_tol,
    ));

    let var_l3: f64 = (0..k)
        .map(|i| {
            zeta1[i] * zeta1[i] * model.interarrival_variance(i) * model.alpha[i].powi(3)
        })
        .sum();
    let want_l3 =
        (&e * &dp.m * &dp.q * &dp.pi * dp.q.transpose() * &dp.m * e.transpose())[(0, 0)];
    rows.push(row(
        "sum <chi, zeta_k>^2 a_k alpha_k^3 (var-L3)",
        rel_scalar(var_l3, want_l3),
        grid_tol,
    ));

    // Gamma assembled from the zeta moments must match the matrix form
    let gamma_sum: f64 = (0..k)
        .map(|i| {
            (zeta2[i] - zeta1[i] * zeta1[i]) * alpha[i]
                + zeta1[i] * zeta1[i] * model.interarrival_variance(i) * model.alpha[i].powi(3)
        })
        .sum();
    rows.push(row(
        "Gamma matrix form = zeta-moment form",
        rel_scalar(gamma_sum, dp.gamma),
        grid_tol,
    ));

    // renewal kernel mean and criticality normalization (critical only)
    if (dp.rho - 1.0).abs() <= 1e-9 {
        let chi_alpha_zeta: f64 = (0..k).map(|i| zeta1[i] * alpha[i]).sum();
        rows.push(row(
            "<chi, alpha.zeta> = 1 (critical)",
            rel_scalar(chi_alpha_zeta, 1.0),
            grid_tol,
        ));
        // mean of B^e_s = dstar
        let m1_bve = matrix_measure_moment(&kernels.bve, 1);
        let mlambda = &dp.m * &dp.lambda;
        let bse_mean = (&e * &i_minus_pt * &m1_bve * &mlambda)[(0, 0)];
        rows.push(row(
            "mean of B^e_s = dstar",
            rel_scalar(bse_mean, dp.dstar),
            grid_tol,
        ));
        // Lemma A.1(ii): the excess of alpha.zeta matches the kernel form
        let m0_bve = matrix_measure_moment(&kernels.bve, 0);
        rows.push(row(
            "<1, calB*V^e> = Q",
            rel_mat(&m0_bve, &dp.q),
            grid_tol,
        ));
    }
    Ok(rows)
}

/// Desk-scale heavy-traffic campaign configuration.
#[derive(Debug, Clone)]
pub struct HtConfig {
    pub sigma: f64,
    pub r_values: Vec<f64>,
    pub reps: u64,
    /// Horizon in diffusion-scaled time.
    pub t_horizon: f64,
    pub n_snapshots: usize,
    pub seed: u64,
    /// RBM reference grid.
    pub dt: f64,
    pub grid_h: f64,
    pub x_max: f64,
    /// Record measure descriptors and SSC statistics.
    pub with_ssc: bool,
    pub event_cap: u64,
}

impl Default for HtConfig {
    fn default() -> Self {
        HtConfig {
            sigma: 0.5,
            r_values: vec![10.0, 20.0, 40.0],
            reps: 200,
            t_horizon: 1.0,
            n_snapshots: 21,
            seed: 20_240_601,
            dt: 1e-3,
            grid_h: 1e-2,
            x_max: 50.0,
            with_ssc: true,
            event_cap: crate::simulator::DEFAULT_EVENT_CAP,
        }
    }
}

/// Per-r results of the campaign.
#[derive(Debug, Clone)]
pub struct RLevelReport {
    pub r: f64,
    pub rho: f64,
    /// KS of the scaled workload against RBM marginals, per scaled time.
    pub ks_per_time: Vec<(f64, f64)>,
    /// KS at the final time.
    pub ks_w_final: f64,
    /// Mean over replications of the per-path SSC statistics.
    pub ssc_mu_mean: f64,
    pub ssc_q_mean: f64,
    /// Mean over replications of |Zhat(T) - <1,Delta^nu> What(T)|_inf.
    pub z_gap_mean: f64,
    pub events_total: u64,
    pub wall_ms: u128,
    pub failed_reps: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub sigma: f64,
    pub gamma: f64,
    pub w_star0: f64,
    pub levels: Vec<RLevelReport>,
}

/// Runs the r-indexed campaign: simulate each near-critical system,
/// diffusion-scale the workload and descriptors, and compare against the
/// RBM limit (two-sample KS) and the lifted measures (SSC statistics).
pub fn ht_campaign(base: &QueueModel, cfg: &HtConfig) -> Result<ExperimentReport> {
    let dp = derived_params(base)?;
    if (dp.rho - 1.0).abs() > 1e-9 {
        return Err(Error::NotCritical((dp.rho - 1.0).abs()));
    }
    let zbar0 = DVector::from_iterator(
        base.k,
        base.initial_counts.iter().map(|&c| c as f64),
    );
    // diffusion-scaled initial state vanishes for fixed finite Z(0); the
    // limit starts from e(M0 + MP'Q) Zbar(0) with Zbar(0) = lim Z(0)/r = 0
    let w_star0 = if zbar0.amax() > 0.0 {
        ((&dp.m0 + &dp.m * base.routing.matrix().transpose() * &dp.q) * &zbar0)
            .iter()
            .sum::<f64>()
            * 0.0
    } else {
        0.0
    };
    let grid = Grid::new(cfg.grid_h, cfg.x_max);
    let kernels = ModelKernels::build(base, cfg.grid_h, ModelKernels::default_x_max(base))?;
    let maps = LimitMeasureMaps::build(&kernels.cal_b, base, &dp, grid)?;

    let models = heavy_traffic_sequence(base, cfg.sigma, &cfg.r_values)?;
    let t_grid: Vec<f64> = (0..cfg.n_snapshots)
        .map(|i| cfg.t_horizon * i as f64 / (cfg.n_snapshots - 1).max(1) as f64)
        .collect();

    let mut levels = Vec::new();
    for (model_r, &r) in models.iter().zip(&cfg.r_values) {
        let start = Instant::now();
        let dp_r = derived_params(model_r)?;
        let snapshot_times: Vec<f64> = t_grid.iter().map(|&t| r * r * t).collect();
        let base_opts = SimOptions {
            horizon: r * r * cfg.t_horizon,
            snapshot_times,
            descriptors: if cfg.with_ssc {
                DescriptorSet {
                    mu: true,
                    gamma: false,
                    queue: true,
                }
            } else {
                DescriptorSet::default()
            },
            seed: cfg.seed,
            rep: 0,
            event_cap: cfg.event_cap,
            check_invariants: true,
            explicit_initial: None,
        };
        let results = replicate(model_r, &base_opts, cfg.reps);
        let mut trajectories = Vec::new();
        let mut failed = 0usize;
        for res in results {
            match res {
                Ok(t) => trajectories.push(t),
                Err(_) => failed += 1,
            }
        }
        let events_total: u64 = trajectories.iter().map(|t| t.event_count).sum();
        let violations: u64 = trajectories.iter().map(|t| t.invariant_violations).sum();
        if violations > 0 {
            return Err(Error::Validation(format!(
                "{violations} conservation violations at r = {r}"
            )));
        }

        // scaled workload samples per time
        let mut w_samples: Vec<Vec<f64>> = vec![Vec::with_capacity(trajectories.len()); t_grid.len()];
        for traj in &trajectories {
            let view = scale(traj, r, ScalingKind::Diffusion, &dp_r, &model_r.alpha);
            for (i, &t) in t_grid.iter().enumerate() {
                w_samples[i].push(view.w_hat(t)?);
            }
        }
        // RBM reference marginals (exact-law bridge construction)
        let mut ks_per_time = Vec::with_capacity(t_grid.len());
        for (i, &t) in t_grid.iter().enumerate() {
            if t == 0.0 {
                ks_per_time.push((t, 0.0));
                continue;
            }
            let reference = rbm_marginal_samples(
                w_star0,
                cfg.sigma,
                dp.gamma,
                t,
                cfg.dt,
                trajectories.len(),
                cfg.seed ^ 0x9e37_79b9_7f4a_7c15 ^ (i as u64) << 32,
            )?;
            ks_per_time.push((t, ks_two_sample(&w_samples[i], &reference)));
        }
        let ks_w_final = ks_per_time.last().map(|&(_, d)| d).unwrap_or(0.0);

        // SSC statistics and the queue-length gap, replication-parallel
        let (ssc_mu_mean, ssc_q_mean, z_gap_mean) = if cfg.with_ssc {
            let stats: Vec<(f64, f64, f64)> = trajectories
                .par_iter()
                .map(|traj| {
                    let view = scale(traj, r, ScalingKind::Diffusion, &dp_r, &model_r.alpha);
                    let (s_mu, s_q) = ssc_statistic(&view, &maps, &t_grid)?;
                    let t_end = *t_grid.last().unwrap();
                    let z_end = view.z_hat(t_end)?;
                    let w_end = view.w_hat(t_end)?;
                    let gap = (&z_end - maps.z_at(w_end)).amax();
                    Ok::<_, Error>((s_mu, s_q, gap))
                })
                .collect::<Result<_>>()?;
            let n = stats.len().max(1) as f64;
            (
                stats.iter().map(|s| s.0).sum::<f64>() / n,
                stats.iter().map(|s| s.1).sum::<f64>() / n,
                stats.iter().map(|s| s.2).sum::<f64>() / n,
            )
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };

        levels.push(RLevelReport {
            r,
            rho: dp_r.rho,
            ks_per_time,
            ks_w_final,
            ssc_mu_mean,
            ssc_q_mean,
            z_gap_mean,
            events_total,
            wall_ms: start.elapsed().as_millis(),
            failed_reps: failed,
        });
    }
    Ok(ExperimentReport {
        sigma: cfg.sigma,
        gamma: dp.gamma,
        w_star0,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::k2_exp_fixture;
    use crate::simulator::simulate;

    #[test]
    fn ks_self_test_within_null_quantiles() {
        let xs = rbm_marginal_samples(0.0, 0.0, 1.0, 1.0, 1e-2, 300, 1).unwrap();
        let ys = rbm_marginal_samples(0.0, 0.0, 1.0, 1.0, 1e-2, 300, 999).unwrap();
        let d = ks_two_sample(&xs, &ys);
        assert!(d <= ks_critical(300, 300, 0.01), "d = {d}");
    }

    #[test]
    fn ks_detects_shift() {
        let xs: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x + 0.5).collect();
        assert!(ks_two_sample(&xs, &ys) > 0.45);
    }

    #[test]
    fn scaling_examples_at_r_one() {
        let m = k2_exp_fixture();
        let dp = derived_params(&m).unwrap();
        let opts = SimOptions {
            descriptors: DescriptorSet::all(),
            ..SimOptions::new(10.0, vec![0.0, 5.0, 10.0], 7)
        };
        let traj = simulate(&m, &opts).unwrap();
        let view = scale(&traj, 1.0, ScalingKind::Diffusion, &dp, &m.alpha);
        // r = 1 diffusion scaling of arrivals is the centered process
        let a_hat = view.a_hat(5.0).unwrap();
        let snap = view.snapshot_at(5.0).unwrap();
        for k in 0..2 {
            let want = snap.arrivals[k] as f64 - dp.lambda[k] * 5.0;
            assert!((a_hat[k] - want).abs() < 1e-12);
        }
        // mass of mu_hat equals z_hat componentwise
        let mu = view.mu_hat(5.0).unwrap();
        let z = view.z_hat(5.0).unwrap();
        for k in 0..2 {
            assert!((mu[k].total_mass() - z[k]).abs() < 1e-12);
        }
        // fluid kind at r = 1 is the identity on snapshots
        let fl = scale(&traj, 1.0, ScalingKind::Fluid, &dp, &m.alpha);
        assert_eq!(fl.snapshot_at(5.0).unwrap().t, 5.0);
    }

    #[test]
    fn horizon_guard() {
        let m = k2_exp_fixture();
        let dp = derived_params(&m).unwrap();
        let traj = simulate(&m, &SimOptions::new(4.0, vec![4.0], 1)).unwrap();
        let view = scale(&traj, 4.0, ScalingKind::Diffusion, &dp, &m.alpha);
        assert!(matches!(
            view.w_hat(1.0),
            Err(Error::HorizonTooShort { .. })
        ));
    }

    #[test]
    fn ssc_zero_on_lifted_synthetic_views() {
        // feed mu_hat := Delta^nu w exactly: distance must vanish
        let m = k2_exp_fixture();
        let dp = derived_params(&m).unwrap();
        let kernels = ModelKernels::build(&m, 0.02, 60.0).unwrap();
        let grid = Grid::new(0.02, 30.0);
        let maps = LimitMeasureMaps::build(&kernels.cal_b, &m, &dp, grid).unwrap();
        let w = 0.8;
        let mu_ref = maps.mu_at(w);
        let d = measure_distance_vec(&mu_ref, &maps.mu_at(w)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn identity_suite_passes_on_fixture() {
        let m = k2_exp_fixture();
        let dp = derived_params(&m).unwrap();
        let kernels = ModelKernels::build(&m, 0.02, ModelKernels::default_x_max(&m)).unwrap();
        let rows = identity_suite(&m, &dp, &kernels).unwrap();
        for r in &rows {
            assert!(r.pass, "{} rel_err {} > tol {}", r.name, r.rel_err, r.tol);
        }
        assert!(rows.len() >= 11);
    }
}
