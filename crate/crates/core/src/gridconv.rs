//! Matrix-valued function algebra on a uniform grid: Stieltjes
//! convolution, the feedback kernel, renewal functions and Volterra
//! solvers. Quadrature is midpoint Stieltjes throughout (first order on
//! kinked integrators), with integrator jumps at the origin carried by the
//! value at index 0.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::measures::Grid;
use crate::model::RoutingMatrix;

/// K x K matrix of functions sampled on a shared grid.
#[derive(Debug, Clone)]
pub struct GridMatrixFun {
    pub k: usize,
    pub grid: Grid,
    entries: Vec<Vec<f64>>,
    /// Set when every entry is a nondecreasing sub-distribution function.
    pub monotone: bool,
}

impl GridMatrixFun {
    pub fn zeros(k: usize, grid: Grid) -> Self {
        GridMatrixFun {
            k,
            grid,
            entries: vec![vec![0.0; grid.len()]; k * k],
            monotone: true,
        }
    }

    /// Unit jump at 0 on the diagonal: the convolution identity.
    pub fn identity_jump(k: usize, grid: Grid) -> Self {
        let mut f = Self::zeros(k, grid);
        for i in 0..k {
            f.entries[i * k + i] = vec![1.0; grid.len()];
        }
        f
    }

    /// Diagonal matrix of distribution functions.
    pub fn from_diag_cdfs(cdfs: Vec<Vec<f64>>, grid: Grid) -> Self {
        let k = cdfs.len();
        let mut f = Self::zeros(k, grid);
        for (i, c) in cdfs.into_iter().enumerate() {
            assert_eq!(c.len(), grid.len());
            f.entries[i * k + i] = c;
        }
        f
    }

    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        &self.entries[i * self.k + j]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut Vec<f64> {
        &mut self.entries[i * self.k + j]
    }

    pub fn value_at(&self, i: usize, j: usize, n: usize) -> f64 {
        self.entries[i * self.k + j][n]
    }

    pub fn matrix_at(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |i, j| self.value_at(i, j, n))
    }

    pub fn last_matrix(&self) -> DMatrix<f64> {
        self.matrix_at(self.grid.n)
    }

    pub fn sup_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.iter().all(|v| v.is_finite()))
    }

    /// Entrywise tail relative to the grid end: F(end) - F(x). Keeps grid
    /// mass self-consistent instead of using the analytic limit.
    pub fn tail_from_end(&self) -> GridMatrixFun {
        let mut out = self.clone();
        for e in &mut out.entries {
            let last = *e.last().unwrap();
            for v in e.iter_mut() {
                *v = last - *v;
            }
        }
        out.monotone = false;
        out
    }
}

/// K-vector of functions on a shared grid.
#[derive(Debug, Clone)]
pub struct GridVecFun {
    pub k: usize,
    pub grid: Grid,
    comps: Vec<Vec<f64>>,
}

impl GridVecFun {
    pub fn zeros(k: usize, grid: Grid) -> Self {
        GridVecFun {
            k,
            grid,
            comps: vec![vec![0.0; grid.len()]; k],
        }
    }

    pub fn from_components(comps: Vec<Vec<f64>>, grid: Grid) -> Self {
        assert!(comps.iter().all(|c| c.len() == grid.len()));
        GridVecFun {
            k: comps.len(),
            grid,
            comps,
        }
    }

    pub fn comp(&self, i: usize) -> &[f64] {
        &self.comps[i]
    }

    pub fn comp_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.comps[i]
    }
}

/// Scalar function on a grid.
#[derive(Debug, Clone)]
pub struct GridFun {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFun {
    pub fn zeros(grid: Grid) -> Self {
        GridFun {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        GridFun { grid, values }
    }

    pub fn value_at(&self, x: f64) -> f64 {
        let pos = x / self.grid.h;
        if pos <= 0.0 {
            return self.values[0];
        }
        let i = pos.floor() as usize;
        if i >= self.grid.n {
            return *self.values.last().unwrap();
        }
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
    }
}

/// (f * g)(x) = int_0^x f(x - y) dg(y) by midpoint sums; g is the
/// integrator and g(0) carries its jump at the origin.
pub fn scalar_convolve(f: &[f64], g: &[f64]) -> Vec<f64> {
    let n = f.len() - 1;
    debug_assert_eq!(g.len(), n + 1);
    let g0 = g[0];
    let fmid: Vec<f64> = (0..n).map(|j| 0.5 * (f[j] + f[j + 1])).collect();
    let dg: Vec<f64> = (0..n).map(|m| g[m + 1] - g[m]).collect();
    let mut out = vec![0.0; n + 1];
    for (nn, o) in out.iter_mut().enumerate() {
        let mut acc = f[nn] * g0;
        acc += fmid[..nn]
            .iter()
            .rev()
            .zip(&dg[..nn])
            .map(|(a, b)| a * b)
            .sum::<f64>();
        *o = acc;
    }
    out
}

fn add_assign(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

/// Matrix Stieltjes convolution (F * G)_{ij} = sum_k F_{ik} * G_{kj}.
pub fn stieltjes_convolve(f: &GridMatrixFun, g: &GridMatrixFun) -> Result<GridMatrixFun> {
    f.grid.check_same(&g.grid)?;
    if f.k != g.k {
        return Err(Error::GridMismatch(format!(
            "matrix sizes {} vs {}",
            f.k, g.k
        )));
    }
    let k = f.k;
    let mut out = GridMatrixFun::zeros(k, f.grid);
    out.monotone = f.monotone && g.monotone;
    for i in 0..k {
        for kk in 0..k {
            let fe = f.entry(i, kk);
            if fe.iter().all(|&v| v == 0.0) {
                continue;
            }
            for j in 0..k {
                let ge = g.entry(kk, j);
                if ge.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let conv = scalar_convolve(fe, ge);
                add_assign(out.entry_mut(i, j), &conv);
            }
        }
    }
    Ok(out)
}

/// Convolution of a matrix function with a diagonal matrix of measures
/// given by their component CDFs: out_{ij} = F_{ij} * g_j.
pub fn convolve_mat_diag(f: &GridMatrixFun, diag_cdf: &GridVecFun) -> Result<GridMatrixFun> {
    f.grid.check_same(&diag_cdf.grid)?;
    let k = f.k;
    let mut out = GridMatrixFun::zeros(k, f.grid);
    out.monotone = f.monotone;
    for i in 0..k {
        for j in 0..k {
            let conv = scalar_convolve(f.entry(i, j), diag_cdf.comp(j));
            out.entry_mut(i, j).copy_from_slice(&conv);
        }
    }
    Ok(out)
}

/// (F * g)_k = sum_l F_{kl} * g_l for a vector of integrators g.
pub fn convolve_mat_vec(f: &GridMatrixFun, g: &GridVecFun) -> Result<GridVecFun> {
    f.grid.check_same(&g.grid)?;
    let k = f.k;
    let mut out = GridVecFun::zeros(k, f.grid);
    for i in 0..k {
        for l in 0..k {
            let fe = f.entry(i, l);
            if fe.iter().all(|&v| v == 0.0) {
                continue;
            }
            let ge = g.comp(l);
            if ge.iter().all(|&v| v == 0.0) {
                continue;
            }
            let conv = scalar_convolve(fe, ge);
            add_assign(out.comp_mut(i), &conv);
        }
    }
    Ok(out)
}

/// Feedback aggregation kernel: the unique solution of
/// calB = I + (B P') * calB, equal to the convolution-power series
/// sum_{n>=0} (B P')^{*n}. Stepped forward with calB as the integrator;
/// the origin cell of the kernel is implicit and resolved by one constant
/// matrix inverse.
pub fn compute_cal_b(
    b_cdf: &GridMatrixFun,
    routing: &RoutingMatrix,
    tol: f64,
) -> Result<GridMatrixFun> {
    routing.check_open()?;
    let k = b_cdf.k;
    let grid = b_cdf.grid;
    let n = grid.n;
    let pt = routing.matrix().transpose();

    // midpoints of the diagonal CDFs
    let mut midb = vec![vec![0.0; n.max(1)]; k];
    for kk in 0..k {
        let e = b_cdf.entry(kk, kk);
        for j in 0..n {
            midb[kk][j] = 0.5 * (e[j] + e[j + 1]);
        }
    }
    // inv0 = (I - diag(midb[., 0]) P')^{-1}
    let mut origin: DMatrix<f64> = DMatrix::identity(k, k);
    for i in 0..k {
        for j in 0..k {
            origin[(i, j)] -= midb[i][0] * pt[(i, j)];
        }
    }
    let inv0 = origin
        .try_inverse()
        .ok_or_else(|| Error::Singular("origin cell of the feedback kernel".into()))?;

    // time-major scratch, flattened row-major K x K per step
    let kk2 = k * k;
    let mut cal = vec![vec![0.0; kk2]; n + 1];
    for i in 0..k {
        cal[0][i * k + i] = 1.0;
    }
    // pdelta[m] = P' (cal[m+1] - cal[m])
    let mut pdelta: Vec<Vec<f64>> = Vec::with_capacity(n);
    for nn in 1..=n {
        // rhs = I + diag(B(nn)) P' + sum_{m<=nn-2} diag(midb[nn-m-1]) pdelta[m]
        //         - diag(midb[0]) P' cal[nn-1]
        let mut rhs = vec![0.0; kk2];
        for i in 0..k {
            rhs[i * k + i] = 1.0;
            let bi = b_cdf.value_at(i, i, nn);
            for j in 0..k {
                rhs[i * k + j] += bi * pt[(i, j)];
            }
        }
        for m in 0..nn.saturating_sub(1) {
            let pd = &pdelta[m];
            for i in 0..k {
                let w = midb[i][nn - m - 1];
                for j in 0..k {
                    rhs[i * k + j] += w * pd[i * k + j];
                }
            }
        }
        let prev = &cal[nn - 1];
        for i in 0..k {
            let w = midb[i][0];
            for j in 0..k {
                let mut acc = 0.0;
                for kc in 0..k {
                    acc += pt[(i, kc)] * prev[kc * k + j];
                }
                rhs[i * k + j] -= w * acc;
            }
        }
        // cal[nn] = inv0 rhs
        let mut row = vec![0.0; kk2];
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for kc in 0..k {
                    acc += inv0[(i, kc)] * rhs[kc * k + j];
                }
                row[i * k + j] = acc;
            }
        }
        // record P' (cal[nn] - cal[nn-1])
        let mut pd = vec![0.0; kk2];
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for kc in 0..k {
                    acc += pt[(i, kc)] * (row[kc * k + j] - cal[nn - 1][kc * k + j]);
                }
                pd[i * k + j] = acc;
            }
        }
        pdelta.push(pd);
        cal[nn] = row;
    }

    let mut out = GridMatrixFun::zeros(k, grid);
    out.monotone = true;
    for i in 0..k {
        for j in 0..k {
            let e = out.entry_mut(i, j);
            for nn in 0..=n {
                e[nn] = cal[nn][i * k + j];
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonConvergence(n));
    }
    let residual = cal_b_residual(&out, b_cdf, routing)?;
    let scale = out.sup_norm();
    if residual > tol + 50.0 * grid.h * scale.max(1.0) {
        return Err(Error::NonConvergence(n));
    }
    Ok(out)
}

/// Sup-norm of calB - (I + B P' * calB).
pub fn cal_b_residual(
    cal_b: &GridMatrixFun,
    b_cdf: &GridMatrixFun,
    routing: &RoutingMatrix,
) -> Result<f64> {
    let bpt = right_multiply(b_cdf, &routing.matrix().transpose());
    let conv = stieltjes_convolve(&bpt, cal_b)?;
    let k = cal_b.k;
    let mut res = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let id = if i == j { 1.0 } else { 0.0 };
            for nn in 0..cal_b.grid.len() {
                let v = cal_b.value_at(i, j, nn) - id - conv.value_at(i, j, nn);
                res = res.max(v.abs());
            }
        }
    }
    Ok(res)
}

/// Truncated convolution-power series sum (B P')^{*n}; independent route
/// to the feedback kernel, kept as a cross-check oracle.
pub fn cal_b_series(
    b_cdf: &GridMatrixFun,
    routing: &RoutingMatrix,
    tol: f64,
    max_terms: usize,
) -> Result<GridMatrixFun> {
    let k = b_cdf.k;
    let grid = b_cdf.grid;
    let bpt = right_multiply(b_cdf, &routing.matrix().transpose());
    let mut acc = GridMatrixFun::identity_jump(k, grid);
    let mut term = GridMatrixFun::identity_jump(k, grid);
    for _ in 0..max_terms {
        term = stieltjes_convolve(&term, &bpt)?;
        if !term.is_finite() {
            return Err(Error::NonConvergence(max_terms));
        }
        let norm = term.sup_norm();
        if norm < tol {
            return Ok(acc);
        }
        for i in 0..k {
            for j in 0..k {
                let t: Vec<f64> = term.entry(i, j).to_vec();
                add_assign(acc.entry_mut(i, j), &t);
            }
        }
    }
    Err(Error::NonConvergence(max_terms))
}

fn right_multiply(f: &GridMatrixFun, c: &DMatrix<f64>) -> GridMatrixFun {
    let k = f.k;
    let mut out = GridMatrixFun::zeros(k, f.grid);
    out.monotone = false;
    for i in 0..k {
        for j in 0..k {
            let e = out.entry_mut(i, j);
            for kk in 0..k {
                let fe = f.entry(i, kk);
                let w = c[(kk, j)];
                if w == 0.0 {
                    continue;
                }
                for (o, v) in e.iter_mut().zip(fe) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

/// <chi^p, dF> entrywise by midpoint Stieltjes sums; p = 0 returns the
/// total variation from 0- (the value at the grid end).
pub fn matrix_measure_moment(f: &GridMatrixFun, p: u32) -> DMatrix<f64> {
    let k = f.k;
    let n = f.grid.n;
    let h = f.grid.h;
    DMatrix::from_fn(k, k, |i, j| {
        let e = f.entry(i, j);
        if p == 0 {
            return e[n];
        }
        let mut acc = 0.0;
        for m in 0..n {
            let mid = (m as f64 + 0.5) * h;
            acc += mid.powi(p as i32) * (e[m + 1] - e[m]);
        }
        acc
    })
}

/// Renewal function solving U = 1 + F * U by forward stepping.
/// Requires F(0) = 0; the origin increment is zeroed regardless.
pub fn renewal_function(f: &GridFun) -> GridFun {
    solve_volterra(
        &GridFun::from_values(f.grid, vec![1.0; f.grid.len()]),
        f,
    )
}

/// Unique locally bounded solution of T = H + F * T on the grid (F a
/// sub-distribution with F(0) = 0). The unknown is the integrator; the
/// origin cell contributes an implicit term Fmid(0) (T(nh) - T((n-1)h))
/// resolved by dividing through, so the stepping stays explicit.
pub fn solve_volterra(h_fun: &GridFun, f: &GridFun) -> GridFun {
    let n = f.grid.n;
    debug_assert!(f.values[0].abs() < 1e-9, "integrand kernel must vanish at 0");
    let fmid: Vec<f64> = (0..n)
        .map(|j| 0.5 * (f.values[j] + f.values[j + 1]))
        .collect();
    let mut t = vec![0.0; n + 1];
    t[0] = h_fun.values[0];
    if n == 0 {
        return GridFun::from_values(f.grid, t);
    }
    let denom = 1.0 - fmid[0];
    for nn in 1..=n {
        let mut acc = h_fun.values[nn] + f.values[nn] * t[0];
        for m in 0..nn - 1 {
            acc += fmid[nn - m - 1] * (t[m + 1] - t[m]);
        }
        acc -= fmid[0] * t[nn - 1];
        t[nn] = acc / denom;
    }
    GridFun::from_values(f.grid, t)
}

/// Sup-norm of T - H - F * T with the convolution evaluated directly
/// (T as the integrator).
pub fn volterra_residual(t: &GridFun, h_fun: &GridFun, f: &GridFun) -> f64 {
    let conv = scalar_convolve(&f.values, &t.values);
    t.values
        .iter()
        .zip(&h_fun.values)
        .zip(&conv)
        .map(|((tv, hv), cv)| (tv - hv - cv).abs())
        .fold(0.0f64, f64::max)
}

/// Inverse of a strictly increasing grid function by linear interpolation,
/// sampled on a fresh grid of step `out_h` spanning [0, T(end)].
pub fn invert_monotone(t: &GridFun, out_h: f64) -> Result<GridFun> {
    let n = t.grid.n;
    for i in 0..n {
        if t.values[i + 1] <= t.values[i] {
            return Err(Error::NotIncreasing(i));
        }
    }
    let t_end = t.values[n];
    let out_grid = Grid::new(out_h, t_end.max(out_h));
    let mut vals = Vec::with_capacity(out_grid.len());
    let mut seg = 0usize;
    for j in 0..out_grid.len() {
        let tj = (out_grid.point(j)).min(t_end);
        while seg < n && t.values[seg + 1] < tj {
            seg += 1;
        }
        let u = if tj <= t.values[0] {
            0.0
        } else {
            let frac = (tj - t.values[seg]) / (t.values[seg + 1] - t.values[seg]);
            (seg as f64 + frac) * t.grid.h
        };
        vals.push(u);
    }
    Ok(GridFun::from_values(out_grid, vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ServiceSpec;
    use approx::assert_relative_eq;

    fn cdf_grid(spec: &ServiceSpec, grid: Grid) -> Vec<f64> {
        (0..grid.len()).map(|i| spec.cdf(grid.point(i))).collect()
    }

    fn exp_cdf_matrix(rate: f64, grid: Grid) -> GridMatrixFun {
        GridMatrixFun::from_diag_cdfs(
            vec![cdf_grid(&ServiceSpec::exponential(rate), grid)],
            grid,
        )
    }

    #[test]
    fn constant_matrix_convolution_convention() {
        let grid = Grid::new(0.01, 5.0);
        let g = exp_cdf_matrix(1.0, grid);
        // F = C 1_{x>=0} with C = [2] as a 1x1 constant
        let mut f = GridMatrixFun::zeros(1, grid);
        f.entry_mut(0, 0).iter_mut().for_each(|v| *v = 2.0);
        let conv = stieltjes_convolve(&f, &g).unwrap();
        for n in 0..grid.len() {
            assert_relative_eq!(conv.value_at(0, 0, n), 2.0 * g.value_at(0, 0, n), epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_jump_is_neutral() {
        let grid = Grid::new(0.01, 5.0);
        let g = exp_cdf_matrix(0.7, grid);
        let id = GridMatrixFun::identity_jump(1, grid);
        let conv = stieltjes_convolve(&g, &id).unwrap();
        for n in 0..grid.len() {
            assert_relative_eq!(conv.value_at(0, 0, n), g.value_at(0, 0, n), epsilon = 1e-12);
        }
    }

    #[test]
    fn exp_conv_exp_is_erlang() {
        let grid = Grid::new(0.01, 20.0);
        let f = exp_cdf_matrix(1.0, grid);
        let conv = stieltjes_convolve(&f, &f).unwrap();
        let erl = ServiceSpec::Erlang { shape: 2, rate: 1.0 };
        let mut err = 0.0f64;
        for n in 0..grid.len() {
            err = err.max((conv.value_at(0, 0, n) - erl.cdf(grid.point(n))).abs());
        }
        assert!(err < 5.0 * grid.h, "sup error {err}");

        // halving h at least halves the error (first-order scheme)
        let grid2 = Grid::new(0.005, 20.0);
        let f2 = exp_cdf_matrix(1.0, grid2);
        let conv2 = stieltjes_convolve(&f2, &f2).unwrap();
        let mut err2 = 0.0f64;
        for n in 0..grid2.len() {
            err2 = err2.max((conv2.value_at(0, 0, n) - erl.cdf(grid2.point(n))).abs());
        }
        assert!(err2 <= 0.6 * err, "err {err} -> {err2}");
    }

    #[test]
    fn convolution_associativity_on_monotone_triples() {
        let grid = Grid::new(0.02, 12.0);
        let mk = |rate: f64, scale: f64| {
            let mut m = GridMatrixFun::from_diag_cdfs(
                vec![
                    cdf_grid(&ServiceSpec::exponential(rate), grid),
                    cdf_grid(&ServiceSpec::Erlang { shape: 2, rate }, grid),
                ],
                grid,
            );
            // off-diagonal mass to exercise the matrix structure
            let c: Vec<f64> = cdf_grid(&ServiceSpec::exponential(rate * 2.0), grid)
                .iter()
                .map(|v| v * scale)
                .collect();
            *m.entry_mut(0, 1) = c;
            m
        };
        let f = mk(1.0, 0.4);
        let g = mk(1.7, 0.2);
        let h = mk(0.8, 0.3);
        let left = stieltjes_convolve(&stieltjes_convolve(&f, &g).unwrap(), &h).unwrap();
        let right = stieltjes_convolve(&f, &stieltjes_convolve(&g, &h).unwrap()).unwrap();
        let mut dev = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                for n in 0..grid.len() {
                    dev = dev.max((left.value_at(i, j, n) - right.value_at(i, j, n)).abs());
                }
            }
        }
        assert!(dev <= 10.0 * grid.h, "associativity deviation {dev}");
    }

    #[test]
    fn cal_b_zero_feedback_is_identity() {
        let grid = Grid::new(0.01, 10.0);
        let b = exp_cdf_matrix(1.0, grid);
        let cal = compute_cal_b(&b, &RoutingMatrix::zeros(1), 1e-10).unwrap();
        for n in 0..grid.len() {
            assert_eq!(cal.value_at(0, 0, n), 1.0);
        }
    }

    #[test]
    fn cal_b_matches_series_route() {
        let grid = Grid::new(0.02, 30.0);
        let routing = RoutingMatrix::new(nalgebra::DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 0.3, 0.2, 0.0],
        ))
        .unwrap();
        let b = GridMatrixFun::from_diag_cdfs(
            vec![
                cdf_grid(&ServiceSpec::exponential(1.0), grid),
                cdf_grid(&ServiceSpec::exponential(7.0 / 8.0), grid),
            ],
            grid,
        );
        let solved = compute_cal_b(&b, &routing, 1e-10).unwrap();
        let series = cal_b_series(&b, &routing, 1e-10, 10_000).unwrap();
        let mut dev = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                for n in 0..grid.len() {
                    dev = dev.max((solved.value_at(i, j, n) - series.value_at(i, j, n)).abs());
                }
            }
        }
        assert!(dev <= 10.0 * grid.h, "solve vs series deviation {dev}");
    }

    #[test]
    fn renewal_poisson_closed_form() {
        let grid = Grid::new(0.01, 20.0);
        let mu = 1.3;
        let bes = GridFun::from_values(grid, cdf_grid(&ServiceSpec::exponential(mu), grid));
        let u = renewal_function(&bes);
        let mut err = 0.0f64;
        for n in 0..grid.len() {
            err = err.max((u.values[n] - (1.0 + mu * grid.point(n))).abs());
        }
        assert!(err <= 5.0 * grid.h * (1.0 + mu * grid.x_max()), "sup err {err}");
    }

    #[test]
    fn renewal_of_zero_is_one() {
        let grid = Grid::new(0.01, 5.0);
        let u = renewal_function(&GridFun::zeros(grid));
        assert!(u.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn elementary_renewal_theorem() {
        let spec = ServiceSpec::Erlang { shape: 2, rate: 4.0 }; // mean 0.5
        let mean = spec.mean();
        let grid = Grid::new(0.005, 40.0 * mean);
        let bes = GridFun::from_values(grid, cdf_grid(&spec, grid));
        let u = renewal_function(&bes);
        let t = 40.0 * mean;
        let got = u.value_at(t) / t;
        assert!((got - 1.0 / mean).abs() / (1.0 / mean) < 0.02, "U(t)/t = {got}");
    }

    #[test]
    fn volterra_zero_kernel_returns_h() {
        let grid = Grid::new(0.01, 5.0);
        let h_fun = GridFun::from_values(grid, (0..grid.len()).map(|i| (i as f64).sqrt()).collect());
        let t = solve_volterra(&h_fun, &GridFun::zeros(grid));
        assert_eq!(t.values, h_fun.values);
    }

    #[test]
    fn volterra_dual_route_agreement() {
        let grid = Grid::new(0.01, 25.0);
        let h_fun = GridFun::from_values(grid, (0..grid.len()).map(|i| grid.point(i)).collect());
        let f = GridFun::from_values(grid, cdf_grid(&ServiceSpec::exponential(1.0), grid));
        let direct = solve_volterra(&h_fun, &f);
        let u = renewal_function(&f);
        // T = H * U with U the integrator
        let via_renewal = scalar_convolve(&h_fun.values, &u.values);
        let mut dev = 0.0f64;
        for (a, b) in direct.values.iter().zip(&via_renewal) {
            dev = dev.max((a - b).abs());
        }
        assert!(dev <= 10.0 * grid.h * direct.sup_norm().max(1.0), "dual route dev {dev}");
        let res = volterra_residual(&direct, &h_fun, &f);
        assert!(res <= 10.0 * grid.h * 2.0, "residual {res}");
    }

    #[test]
    fn invert_monotone_examples() {
        let grid = Grid::new(0.01, 4.0);
        let double = GridFun::from_values(grid, (0..grid.len()).map(|i| 2.0 * grid.point(i)).collect());
        let inv = invert_monotone(&double, 0.01).unwrap();
        for j in (0..inv.grid.len()).step_by(50) {
            assert_relative_eq!(inv.values[j], inv.grid.point(j) / 2.0, epsilon = 1e-9);
        }
        let ident = GridFun::from_values(grid, (0..grid.len()).map(|i| grid.point(i)).collect());
        let inv2 = invert_monotone(&ident, 0.01).unwrap();
        for j in (0..inv2.grid.len()).step_by(37) {
            assert_relative_eq!(inv2.values[j], inv2.grid.point(j), epsilon = 1e-9);
        }
        let flat = GridFun::from_values(grid, vec![1.0; grid.len()]);
        assert!(matches!(invert_monotone(&flat, 0.01), Err(Error::NotIncreasing(_))));
    }

    #[test]
    fn invert_monotone_round_trip() {
        use rand::Rng;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let grid = Grid::new(0.01, 3.0);
        let mut vals = vec![0.0];
        for _ in 0..grid.n {
            let step: f64 = rng.random_range(0.2..2.0);
            vals.push(vals.last().unwrap() + step * grid.h);
        }
        let t = GridFun::from_values(grid, vals);
        let inv = invert_monotone(&t, 0.005).unwrap();
        // round trip u -> T(u) -> S(T(u)) within one grid step
        for i in (0..grid.len()).step_by(23) {
            let u = grid.point(i);
            let back = inv.value_at(t.values[i]);
            assert!((back - u).abs() <= grid.h + 1e-9, "u {u} back {back}");
        }
    }
}
