//! Fluid-model solutions for critical data, computed in cumulative-service
//! coordinates. The path is parameterized by u with T(u) mapping back to
//! wall time; every object is a convolution against the feedback kernel,
//! which avoids the circular arrival/departure dependency of the fluid
//! equations in t.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gridconv::{
    compute_cal_b, convolve_mat_diag, convolve_mat_vec, scalar_convolve, solve_volterra, GridFun,
    GridMatrixFun, GridVecFun,
};
use crate::measures::{excess_tail, Grid, TailFunction};
use crate::model::{DerivedParams, QueueModel, ServiceSpec};

pub const CRITICALITY_TOL: f64 = 1e-9;
const CAL_B_TOL: f64 = 1e-10;
const BSE_MASS_TOL: f64 = 1e-3;

/// Initial condition of the fluid model.
#[derive(Debug, Clone)]
pub enum FluidInitial {
    Zero,
    /// xi_k = zbar0_k nu0_k, evaluated exactly on the working grid.
    ProductForm {
        zbar0: Vec<f64>,
        nu0: Vec<ServiceSpec>,
    },
    /// The invariant state c M Lambda nu^e.
    Invariant { c: f64 },
    /// Arbitrary tails, zero-extended beyond their own horizon.
    Tails(Vec<TailFunction>),
}

#[derive(Debug, Clone, Copy)]
pub struct FluidConfig {
    pub h: f64,
    /// Horizon of the measure tails compared by the diagnostics.
    pub x_max: f64,
    /// Wall-time horizon the solution must reach.
    pub t_max: f64,
}

impl Default for FluidConfig {
    fn default() -> Self {
        FluidConfig {
            h: 1e-2,
            x_max: 50.0,
            t_max: 40.0,
        }
    }
}

/// H^xi(u) = e (I - P') int_0^u (calB * xi)([y, oo)) dy on the grid of
/// `cal_b`; nondecreasing with H^xi(oo) equal to the initial workload.
pub fn build_h_xi(
    xi_cdf: &GridVecFun,
    cal_b: &GridMatrixFun,
    dp: &DerivedParams,
) -> Result<GridFun> {
    let conv = convolve_mat_vec(cal_b, xi_cdf)?;
    let grid = cal_b.grid;
    let k = dp.k;
    // contracted tail: sum_k w_k ((calB * xi)_k(end) - (calB * xi)_k(s))
    let w = exit_row(dp);
    let mut tail = vec![0.0; grid.len()];
    for kk in 0..k {
        let c = conv.comp(kk);
        let last = c[grid.n];
        for (i, t) in tail.iter_mut().enumerate() {
            *t += w[kk] * (last - c[i]);
        }
    }
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    values.push(0.0);
    for i in 1..grid.len() {
        acc += 0.5 * (tail[i - 1] + tail[i]) * grid.h;
        values.push(acc);
    }
    Ok(GridFun::from_values(grid, values))
}

/// B^e_s(t) = e (I - P') (calB * V^e)([0, t]) M lambda, the service-time
/// distribution driving the renewal structure. Must be proper: its tail
/// truncation at the grid end is checked.
pub fn build_bes(
    dp: &DerivedParams,
    nu_e_cdf: &GridVecFun,
    cal_b: &GridMatrixFun,
) -> Result<GridFun> {
    let grid = cal_b.grid;
    let conv = convolve_mat_diag(cal_b, nu_e_cdf)?;
    let w = exit_row(dp);
    let mlambda: Vec<f64> = (0..dp.k).map(|i| dp.beta[i] * dp.lambda[i]).collect();
    let mut values = vec![0.0; grid.len()];
    for i in 0..dp.k {
        for j in 0..dp.k {
            let e = conv.entry(i, j);
            let coef = w[i] * mlambda[j];
            if coef == 0.0 {
                continue;
            }
            for (v, c) in values.iter_mut().zip(e) {
                *v += coef * c;
            }
        }
    }
    let deficit = 1.0 - values[grid.n];
    if deficit > BSE_MASS_TOL {
        return Err(Error::MassDeficit(deficit));
    }
    Ok(GridFun::from_values(grid, values))
}

fn exit_row(dp: &DerivedParams) -> Vec<f64> {
    // e (I - P') as a dense row
    let k = dp.k;
    let q_inv = dp
        .q
        .clone()
        .try_inverse()
        .expect("Q is invertible by construction");
    (0..k).map(|j| (0..k).map(|i| q_inv[(i, j)]).sum()).collect()
}

/// Everything the fluid solution needs, precomputed on an extended grid
/// of horizon x_max + u_max.
pub struct FluidSolution {
    pub k: usize,
    pub h: f64,
    pub null: bool,
    /// Grid for the measure tails handed to diagnostics.
    pub x_grid: Grid,
    /// Number of u-grid points (cumulative-service horizon).
    pub n_u: usize,
    /// T(u): wall time as a function of cumulative service.
    pub t_of_u: GridFun,
    /// Initial fluid workload.
    pub w0: f64,
    /// e . Ztilde(u) on the u-grid.
    pub total_z: Vec<f64>,
    /// Ztilde(u) per component, u-major.
    pub z_of_u: Vec<DVector<f64>>,
    qpt: DMatrix<f64>,
    lambda: DVector<f64>,
    zbar0: DVector<f64>,
    /// xi tails on the extended grid.
    xi_tail: Vec<Vec<f64>>,
    /// (calB * xi) tails on the extended grid.
    bxi_tail: Vec<Vec<f64>>,
    /// G_k(s) = sum_l (calB * V)_{kl}([s, oo)) alpha_l on the extended grid.
    kx_kernel: Vec<Vec<f64>>,
    /// B_k CDFs on the extended grid.
    b_cdf: Vec<Vec<f64>>,
    /// int_0^s (1 - B_k) on the extended grid.
    int_ib: Vec<Vec<f64>>,
    /// Increments of T on the u-grid.
    dt_of_u: Vec<f64>,
    /// Midpoints of e.Ztilde and P'Q Ztilde on the u-grid.
    a_mid: Vec<f64>,
    w_mid: Vec<Vec<f64>>,
}

/// Diagnostic series produced by [`FluidSolution::convergence_to_invariant`].
#[derive(Debug, Clone)]
pub struct InvariantDiagnostics {
    /// Wall times actually achieved (snapped to the u-grid).
    pub t: Vec<f64>,
    pub d_mu: Vec<f64>,
    pub d_q: Vec<f64>,
    /// Reconstructed fluid workload at each diagnostic time.
    pub workload: Vec<f64>,
}

pub fn solve_fluid(
    model: &QueueModel,
    dp: &DerivedParams,
    initial: &FluidInitial,
    cfg: &FluidConfig,
) -> Result<FluidSolution> {
    let k = dp.k;
    let null = match initial {
        FluidInitial::Zero => true,
        FluidInitial::Invariant { c } => *c == 0.0,
        FluidInitial::ProductForm { zbar0, .. } => zbar0.iter().all(|&z| z == 0.0),
        FluidInitial::Tails(t) => t.iter().all(|x| x.total_mass() == 0.0),
    };
    let x_grid = Grid::new(cfg.h, cfg.x_max);
    if null {
        return Ok(FluidSolution::null_solution(k, x_grid, dp, cfg));
    }
    if (dp.rho - 1.0).abs() > CRITICALITY_TOL {
        return Err(Error::NotCritical((dp.rho - 1.0).abs()));
    }

    // adaptive u horizon: extend until T reaches t_max
    let mut u_max = cfg.t_max.max(10.0 * cfg.h);
    for _attempt in 0..6 {
        let sol = build_pipeline(model, dp, initial, cfg, u_max)?;
        if sol.t_of_u.values[sol.n_u] >= cfg.t_max {
            return Ok(sol);
        }
        u_max *= 2.0;
    }
    Err(Error::Validation(format!(
        "fluid horizon did not reach t_max = {} (slow drain)",
        cfg.t_max
    )))
}

fn xi_tails_on(
    grid: Grid,
    initial: &FluidInitial,
    dp: &DerivedParams,
    model: &QueueModel,
) -> Vec<Vec<f64>> {
    let k = dp.k;
    match initial {
        FluidInitial::Zero => vec![vec![0.0; grid.len()]; k],
        FluidInitial::ProductForm { zbar0, nu0 } => (0..k)
            .map(|kk| {
                (0..grid.len())
                    .map(|i| zbar0[kk] * nu0[kk].tail(grid.point(i)))
                    .collect()
            })
            .collect(),
        FluidInitial::Invariant { c } => (0..k)
            .map(|kk| {
                let e = excess_tail(&model.services[kk], grid);
                let w = c * dp.beta[kk] * dp.lambda[kk];
                e.values.iter().map(|v| w * v).collect()
            })
            .collect(),
        FluidInitial::Tails(tails) => (0..k)
            .map(|kk| {
                (0..grid.len())
                    .map(|i| {
                        let x = grid.point(i);
                        if x > tails[kk].grid.x_max() {
                            0.0
                        } else {
                            tails[kk].tail_at(x)
                        }
                    })
                    .collect()
            })
            .collect(),
    }
}

fn build_pipeline(
    model: &QueueModel,
    dp: &DerivedParams,
    initial: &FluidInitial,
    cfg: &FluidConfig,
    u_max: f64,
) -> Result<FluidSolution> {
    let k = dp.k;
    let h = cfg.h;
    let x_grid = Grid::new(h, cfg.x_max);
    let ext = Grid::new(h, cfg.x_max + u_max);
    let n_u = (u_max / h).round() as usize;
    let u_grid = Grid::new(h, u_max);

    // exact CDFs and their integrated complements on the extended grid
    let b_cdf: Vec<Vec<f64>> = model
        .services
        .iter()
        .map(|s| (0..ext.len()).map(|i| s.cdf(ext.point(i))).collect())
        .collect();
    let int_ib: Vec<Vec<f64>> = b_cdf
        .iter()
        .map(|c| {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(ext.len());
            out.push(0.0);
            for i in 1..ext.len() {
                acc += 0.5 * ((1.0 - c[i - 1]) + (1.0 - c[i])) * h;
                out.push(acc);
            }
            out
        })
        .collect();

    let b_mat = GridMatrixFun::from_diag_cdfs(b_cdf.clone(), ext);
    let cal_b = compute_cal_b(&b_mat, &model.routing, CAL_B_TOL)?;

    // calB * V tails, contracted with alpha: the K^x kernel
    let bv = convolve_mat_diag(&cal_b, &GridVecFun::from_components(b_cdf.clone(), ext))?;
    let mut kx_kernel = vec![vec![0.0; ext.len()]; k];
    for kk in 0..k {
        for l in 0..k {
            let e = bv.entry(kk, l);
            let last = e[ext.n];
            let al = model.alpha[l];
            if al == 0.0 {
                continue;
            }
            for (i, v) in kx_kernel[kk].iter_mut().enumerate() {
                *v += al * (last - e[i]);
            }
        }
    }

    // xi and calB * xi on the extended grid
    let xi_tail = xi_tails_on(ext, initial, dp, model);
    let xi_cdf = GridVecFun::from_components(
        xi_tail
            .iter()
            .map(|t| t.iter().map(|v| t[0] - v).collect())
            .collect(),
        ext,
    );
    let bxi = convolve_mat_vec(&cal_b, &xi_cdf)?;
    let bxi_tail: Vec<Vec<f64>> = (0..k)
        .map(|kk| {
            let c = bxi.comp(kk);
            let last = c[ext.n];
            c.iter().map(|v| last - v).collect()
        })
        .collect();

    // initial workload from xi moments: W(0) = e (<chi, xi> + M P' Q <1, xi>)
    let zbar0 = DVector::from_iterator(k, xi_tail.iter().map(|t| t[0]));
    let chi_xi: Vec<f64> = xi_tail
        .iter()
        .map(|t| {
            // int_0^inf tail dx by trapezoid
            let mut acc = 0.0;
            for i in 0..ext.n {
                acc += 0.5 * (t[i] + t[i + 1]) * h;
            }
            acc
        })
        .collect();
    let qpt = &dp.q * model.routing.matrix().transpose();
    let mpq_z = &dp.m * &qpt * &zbar0;
    let w0: f64 = chi_xi.iter().sum::<f64>() + mpq_z.iter().sum::<f64>();

    // scalar renewal structure on the u-grid
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
    let bes_ext = build_bes(dp, &nu_e_cdf, &cal_b)?;
    let bes = GridFun::from_values(u_grid, bes_ext.values[..=n_u].to_vec());
    let h_xi_ext = build_h_xi(&xi_cdf, &cal_b, dp)?;
    let h_xi = GridFun::from_values(u_grid, h_xi_ext.values[..=n_u].to_vec());
    let t_of_u = solve_volterra(&h_xi, &bes);

    // masses of the visit descriptor at x = 0 give Ztilde
    let mut q_mass = vec![DVector::<f64>::zeros(k); n_u + 1];
    for kk in 0..k {
        let conv = scalar_convolve(&kx_kernel[kk][..=n_u], &t_of_u.values);
        for (n, qm) in q_mass.iter_mut().enumerate() {
            qm[kk] = bxi_tail[kk][n] + conv[n];
        }
    }
    let i_minus_pt = DMatrix::<f64>::identity(k, k) - model.routing.matrix().transpose();
    let z_of_u: Vec<DVector<f64>> = q_mass.iter().map(|qm| &i_minus_pt * qm).collect();
    let total_z: Vec<f64> = z_of_u.iter().map(|z| z.iter().sum()).collect();

    let dt_of_u: Vec<f64> = (0..n_u)
        .map(|i| t_of_u.values[i + 1] - t_of_u.values[i])
        .collect();
    let a_mid: Vec<f64> = (0..n_u)
        .map(|i| 0.5 * (total_z[i] + total_z[i + 1]))
        .collect();
    let ptq = model.routing.matrix().transpose() * &dp.q;
    let w_of_u: Vec<DVector<f64>> = z_of_u.iter().map(|z| &ptq * z).collect();
    let w_mid: Vec<Vec<f64>> = (0..k)
        .map(|kk| {
            (0..n_u)
                .map(|i| 0.5 * (w_of_u[i][kk] + w_of_u[i + 1][kk]))
                .collect()
        })
        .collect();

    Ok(FluidSolution {
        k,
        h,
        null: false,
        x_grid,
        n_u,
        t_of_u,
        w0,
        total_z,
        z_of_u,
        qpt,
        lambda: dp.lambda.clone(),
        zbar0,
        xi_tail,
        bxi_tail,
        kx_kernel,
        b_cdf,
        int_ib,
        dt_of_u,
        a_mid,
        w_mid,
    })
}

impl FluidSolution {
    fn null_solution(k: usize, x_grid: Grid, dp: &DerivedParams, cfg: &FluidConfig) -> Self {
        let u_grid = Grid::new(cfg.h, cfg.h);
        FluidSolution {
            k,
            h: cfg.h,
            null: true,
            x_grid,
            n_u: 0,
            t_of_u: GridFun::zeros(u_grid),
            w0: 0.0,
            total_z: vec![0.0],
            z_of_u: vec![DVector::zeros(k)],
            qpt: DMatrix::zeros(k, k),
            lambda: dp.lambda.clone(),
            zbar0: DVector::zeros(k),
            xi_tail: vec![],
            bxi_tail: vec![],
            kx_kernel: vec![],
            b_cdf: vec![],
            int_ib: vec![],
            dt_of_u: vec![],
            a_mid: vec![],
            w_mid: vec![],
        }
    }

    /// Index on the u-grid whose time T(u) best matches t.
    pub fn u_index_for_time(&self, t: f64) -> usize {
        let v = &self.t_of_u.values;
        let idx = v.partition_point(|&tv| tv < t);
        idx.min(self.n_u)
    }

    pub fn time_at_index(&self, n: usize) -> f64 {
        self.t_of_u.values[n]
    }

    /// Visit-descriptor tails Qtilde(u_n)([x, oo)) on the x grid.
    pub fn q_tails_at(&self, n: usize) -> Vec<TailFunction> {
        if self.null {
            return (0..self.k).map(|_| TailFunction::zero(self.x_grid)).collect();
        }
        let nx = self.x_grid.len();
        (0..self.k)
            .map(|kk| {
                let mut vals = vec![0.0; nx];
                for (i, v) in vals.iter_mut().enumerate() {
                    *v = self.bxi_tail[kk][i + n];
                }
                // (K^x * T)(u_n) = sum_m Gmid_k[x + u_n - (m+1/2)h] dT_m
                let ker = &self.kx_kernel[kk];
                for m in 0..n {
                    let dt = self.dt_of_u[m];
                    if dt == 0.0 {
                        continue;
                    }
                    let off = n - m - 1;
                    for (i, v) in vals.iter_mut().enumerate() {
                        let gmid = 0.5 * (ker[i + off] + ker[i + off + 1]);
                        *v += gmid * dt;
                    }
                }
                tail_from_raw(self.x_grid, vals)
            })
            .collect()
    }

    /// Current-visit residual tails mutilde(u_n)([x, oo)) on the x grid.
    pub fn mu_tails_at(&self, n: usize) -> Vec<TailFunction> {
        if self.null {
            return (0..self.k).map(|_| TailFunction::zero(self.x_grid)).collect();
        }
        let nx = self.x_grid.len();
        let qpt_z0 = &self.qpt * &self.zbar0;
        let ptq_z = {
            // P'Q Ztilde(u_n); qpt equals P'Q since Q and P' commute
            &self.qpt * &self.z_of_u[n]
        };
        (0..self.k)
            .map(|kk| {
                let b = &self.b_cdf[kk];
                let ib = &self.int_ib[kk];
                let mut vals = vec![0.0; nx];
                for (i, v) in vals.iter_mut().enumerate() {
                    // C(u + x) Zbar(0) with the initial-state tail kept exact
                    *v = self.xi_tail[kk][i + n] + (1.0 - b[i + n]) * qpt_z0[kk]
                        - (1.0 - b[i]) * ptq_z[kk];
                }
                // (G^x * Q Ztilde)(u_n)
                let lam = self.lambda[kk];
                for m in 0..n {
                    let am = self.a_mid[n - m - 1];
                    let wm = self.w_mid[kk][n - m - 1];
                    if am == 0.0 && wm == 0.0 {
                        continue;
                    }
                    for (i, v) in vals.iter_mut().enumerate() {
                        let d_ib = ib[i + m + 1] - ib[i + m];
                        let d_b = b[i + m + 1] - b[i + m];
                        *v += lam * d_ib * am + d_b * wm;
                    }
                }
                tail_from_raw(self.x_grid, vals)
            })
            .collect()
    }

    /// Reconstructed fluid workload <chi, e (I-P') Qtilde(u_n)> by
    /// trapezoid over the x grid.
    pub fn workload_at(&self, n: usize, dp: &DerivedParams) -> f64 {
        let q_tails = self.q_tails_at(n);
        let w = exit_row(dp);
        let mut acc = 0.0;
        for (kk, t) in q_tails.iter().enumerate() {
            let mut integral = 0.0;
            for i in 0..t.grid.n {
                integral += 0.5 * (t.values[i] + t.values[i + 1]) * t.grid.h;
            }
            acc += w[kk] * integral;
        }
        acc
    }

    /// Max relative deviation of the numerical derivative of T from
    /// e . Ztilde over the u grid.
    pub fn t_dot_max_rel_dev(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_u {
            let fd = self.dt_of_u[i] / self.h;
            let a = self.a_mid[i];
            if a.abs() > 1e-9 {
                worst = worst.max((fd - a).abs() / a.abs());
            }
        }
        worst
    }

    /// Distance series to the invariant state lifted from W(0): reference
    /// measures are Delta^nu W(0) for mu and (calB * Delta^nu) W(0) for Q.
    pub fn convergence_to_invariant(
        &self,
        model: &QueueModel,
        dp: &DerivedParams,
        t_grid: &[f64],
    ) -> Result<InvariantDiagnostics> {
        let nu_e: Vec<TailFunction> = model
            .services
            .iter()
            .map(|s| excess_tail(s, self.x_grid))
            .collect();
        let mu_ref = crate::measures::lifting_map(self.w0, dp, &nu_e)?;
        let q_ref = self.lifted_q_reference(model, dp, self.w0)?;
        let mut out = InvariantDiagnostics {
            t: Vec::new(),
            d_mu: Vec::new(),
            d_q: Vec::new(),
            workload: Vec::new(),
        };
        for &t in t_grid {
            let n = self.u_index_for_time(t);
            out.t.push(self.time_at_index(n));
            let mu = self.mu_tails_at(n);
            let q = self.q_tails_at(n);
            out.d_mu
                .push(crate::measures::measure_distance_vec(&mu, &mu_ref)?);
            out.d_q
                .push(crate::measures::measure_distance_vec(&q, &q_ref)?);
            out.workload.push(self.workload_at(n, dp));
        }
        Ok(out)
    }

    /// (calB * Delta^nu) w as tails on the x grid: (calB * V^e) M lambda
    /// scaled by w / dstar.
    pub fn lifted_q_reference(
        &self,
        model: &QueueModel,
        dp: &DerivedParams,
        w: f64,
    ) -> Result<Vec<TailFunction>> {
        // computed on its own grid: x_max plus slack for the kernel tail
        let ext = Grid::new(self.h, self.x_grid.x_max() + 30.0 * mean_service(model));
        let b_cdf: Vec<Vec<f64>> = model
            .services
            .iter()
            .map(|s| (0..ext.len()).map(|i| s.cdf(ext.point(i))).collect())
            .collect();
        let cal_b = compute_cal_b(
            &GridMatrixFun::from_diag_cdfs(b_cdf, ext),
            &model.routing,
            CAL_B_TOL,
        )?;
        lifted_q_reference_with(&cal_b, model, dp, w, self.x_grid)
    }
}

/// (calB * Delta^nu) w on `x_grid`, reusing an already computed kernel.
pub fn lifted_q_reference_with(
    cal_b: &GridMatrixFun,
    model: &QueueModel,
    dp: &DerivedParams,
    w: f64,
    x_grid: Grid,
) -> Result<Vec<TailFunction>> {
    let ext = cal_b.grid;
    let k = dp.k;
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
    let bve = convolve_mat_diag(cal_b, &nu_e_cdf)?;
    let scale = w / dp.dstar;
    Ok((0..k)
        .map(|kk| {
            let mut vals = vec![0.0; x_grid.len()];
            for l in 0..k {
                let e = bve.entry(kk, l);
                let last = e[ext.n];
                let coef = scale * dp.beta[l] * dp.lambda[l];
                for (i, v) in vals.iter_mut().enumerate() {
                    *v += coef * (last - e[i]);
                }
            }
            tail_from_raw(x_grid, vals)
        })
        .collect())
}

fn mean_service(model: &QueueModel) -> f64 {
    model
        .services
        .iter()
        .map(|s| s.mean())
        .fold(0.0f64, f64::max)
}

/// Clamp numerical noise: nonnegative and nonincreasing.
fn tail_from_raw(grid: Grid, mut vals: Vec<f64>) -> TailFunction {
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    for i in 1..vals.len() {
        if vals[i] > vals[i - 1] {
            vals[i] = vals[i - 1];
        }
    }
    TailFunction::new(grid, vals).expect("clamped tail is valid")
}
