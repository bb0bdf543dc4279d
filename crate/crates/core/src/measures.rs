//! Finite nonnegative measures on the half line in two representations:
//! weighted atoms (empirical snapshots) and gridded tails x -> mu([x, oo))
//! (analytic objects). Includes moments, the excess-life transform, the
//! workload lifting map and the implemented distance d_impl.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DerivedParams, ServiceSpec};

pub const DEFAULT_H: f64 = 1e-2;
pub const DEFAULT_X_MAX: f64 = 50.0;

/// Relative tail mass beyond the grid end above which moment integration
/// reports truncation.
pub const TRUNCATION_TOL: f64 = 1e-6;

/// Uniform grid x_i = i h for i = 0..=n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(h: f64, x_max: f64) -> Self {
        assert!(h > 0.0 && x_max > 0.0, "grid parameters must be positive");
        Grid {
            h,
            n: (x_max / h).round() as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x_max(&self) -> f64 {
        self.h * self.n as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.h * i as f64
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if (self.h - other.h).abs() > 1e-12 * self.h || self.n != other.n {
            return Err(Error::GridMismatch(format!(
                "grid (h={}, n={}) vs (h={}, n={})",
                self.h, self.n, other.h, other.n
            )));
        }
        Ok(())
    }
}

/// Finite measure as atoms at strictly positive locations. Atoms at 0 (or
/// with nonpositive mass) are dropped at construction: delta^+ semantics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointMeasure {
    atoms: Vec<(f64, f64)>,
}

impl PointMeasure {
    pub fn new(atoms: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let atoms = atoms
            .into_iter()
            .filter(|&(x, m)| x > 0.0 && m > 0.0)
            .collect();
        PointMeasure { atoms }
    }

    pub fn zero() -> Self {
        PointMeasure { atoms: Vec::new() }
    }

    pub fn dirac(x: f64) -> Self {
        Self::new([(x, 1.0)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|&(_, m)| m).sum()
    }

    /// mu([x, oo)).
    pub fn tail_at(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|&&(loc, _)| loc >= x)
            .map(|&(_, m)| m)
            .sum()
    }

    /// <chi^p, mu>, exact.
    pub fn moment(&self, p: u32) -> f64 {
        self.atoms
            .iter()
            .map(|&(x, m)| m * x.powi(p as i32))
            .sum()
    }

    /// Atoms shifted left by s with the nonpositive part removed:
    /// x -> x - s, drop x - s <= 0.
    pub fn shift_truncate(&self, s: f64) -> PointMeasure {
        assert!(s >= 0.0, "shift must be nonnegative");
        PointMeasure::new(self.atoms.iter().map(|&(x, m)| (x - s, m)))
    }

    /// Scale every mass by c.
    pub fn scale_mass(&self, c: f64) -> PointMeasure {
        PointMeasure::new(self.atoms.iter().map(|&(x, m)| (x, m * c)))
    }

    /// Discretize to a gridded tail: tail[i] = sum of masses at locations
    /// >= i h (an atom inside [ih, (i+1)h) counts for indices <= i).
    pub fn to_tail(&self, grid: &Grid) -> TailFunction {
        let mut bucket = vec![0.0; grid.len()];
        let mut beyond = 0.0;
        for &(x, m) in &self.atoms {
            let mut idx = (x / grid.h).floor() as usize;
            // guard against x sitting a hair below an exact grid point
            if (idx + 1) as f64 * grid.h <= x {
                idx += 1;
            }
            if idx >= grid.len() {
                beyond += m;
            } else {
                bucket[idx] += m;
            }
        }
        let mut values = vec![0.0; grid.len()];
        let mut acc = beyond;
        for i in (0..grid.len()).rev() {
            acc += bucket[i];
            values[i] = acc;
        }
        TailFunction { grid: *grid, values }
    }
}

/// Gridded tail t_i = mu([ih, oo)); nonincreasing, t_0 = total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TailFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl TailFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "tail has {} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        for w in values.windows(2) {
            if w[1] > w[0] + 1e-12 * (1.0 + w[0].abs()) {
                return Err(Error::Validation("tail function must be nonincreasing".into()));
            }
        }
        if values.iter().any(|&v| v < -1e-12) {
            return Err(Error::Validation("tail function must be nonnegative".into()));
        }
        Ok(TailFunction { grid, values })
    }

    pub fn zero(grid: Grid) -> Self {
        TailFunction {
            values: vec![0.0; grid.len()],
            grid,
        }
    }

    /// Tail of a service distribution evaluated exactly on the grid.
    pub fn from_service(spec: &ServiceSpec, grid: Grid) -> Self {
        let values = (0..grid.len()).map(|i| spec.tail(grid.point(i))).collect();
        TailFunction { grid, values }
    }

    pub fn total_mass(&self) -> f64 {
        self.values[0]
    }

    /// Tail at an arbitrary point by linear interpolation; constant beyond
    /// the grid end.
    pub fn tail_at(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.values[0];
        }
        let pos = x / self.grid.h;
        let i = pos.floor() as usize;
        if i >= self.grid.n {
            return *self.values.last().unwrap();
        }
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// Fraction of mass sitting beyond the grid end.
    pub fn truncated_fraction(&self) -> f64 {
        let total = self.values[0];
        if total <= 0.0 {
            0.0
        } else {
            self.values[self.grid.n] / total
        }
    }

    /// <chi^p, mu> by the midpoint Riemann-Stieltjes sum on the grid.
    pub fn moment(&self, p: u32) -> f64 {
        if p == 0 {
            return self.values[0];
        }
        let h = self.grid.h;
        let mut acc = 0.0;
        for i in 0..self.grid.n {
            let mid = (i as f64 + 0.5) * h;
            acc += mid.powi(p as i32) * (self.values[i] - self.values[i + 1]);
        }
        acc
    }

    pub fn scale_mass(&self, c: f64) -> TailFunction {
        TailFunction {
            grid: self.grid,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Test-function tags accepted by [`integrate`].
#[derive(Debug, Clone, Copy)]
pub enum TestFunction {
    One,
    /// 1_{[x, oo)}.
    IndicatorTail(f64),
    /// chi^p.
    Chi(u32),
}

/// Common surface over both measure representations.
pub trait MeasureLike {
    fn mass(&self) -> f64;
    fn tail(&self, x: f64) -> f64;
    fn chi_moment(&self, p: u32) -> Result<f64>;
}

impl MeasureLike for PointMeasure {
    fn mass(&self) -> f64 {
        self.total_mass()
    }
    fn tail(&self, x: f64) -> f64 {
        self.tail_at(x)
    }
    fn chi_moment(&self, p: u32) -> Result<f64> {
        Ok(self.moment(p))
    }
}

impl MeasureLike for TailFunction {
    fn mass(&self) -> f64 {
        self.total_mass()
    }
    fn tail(&self, x: f64) -> f64 {
        self.tail_at(x)
    }
    fn chi_moment(&self, p: u32) -> Result<f64> {
        if p > 6 {
            return Err(Error::UnsupportedMoment(p));
        }
        let deficit = self.truncated_fraction();
        if deficit > TRUNCATION_TOL {
            return Err(Error::Truncation {
                deficit: deficit * self.total_mass(),
                total: self.total_mass(),
            });
        }
        Ok(self.moment(p))
    }
}

/// <g, mu> with truncation checks on gridded tails.
pub fn integrate<M: MeasureLike>(g: TestFunction, mu: &M) -> Result<f64> {
    match g {
        TestFunction::One => Ok(mu.mass()),
        TestFunction::IndicatorTail(x) => Ok(mu.tail(x)),
        TestFunction::Chi(p) => mu.chi_moment(p),
    }
}

/// Tail of the excess lifetime distribution nu^e:
/// nu^e([x, oo)) = 1 - (1/beta) int_0^x nu([y, oo)) dy, by trapezoid
/// quadrature of the exact service tail.
pub fn excess_tail(spec: &ServiceSpec, grid: Grid) -> TailFunction {
    let beta = spec.mean();
    let h = grid.h;
    let mut values = Vec::with_capacity(grid.len());
    let mut cum = 0.0;
    let mut prev = spec.tail(0.0);
    values.push(1.0);
    for i in 1..grid.len() {
        let cur = spec.tail(grid.point(i));
        cum += 0.5 * (prev + cur) * h;
        prev = cur;
        values.push((1.0 - cum / beta).max(0.0));
    }
    // enforce monotonicity against rounding
    for i in 1..values.len() {
        if values[i] > values[i - 1] {
            values[i] = values[i - 1];
        }
    }
    TailFunction { grid, values }
}

/// Lifting map: component k has tail (w / dstar) beta_k lambda_k
/// nu^e_k([x, oo)), so a scalar workload determines the whole measure
/// vector on the invariant manifold.
pub fn lifting_map(
    w: f64,
    dp: &DerivedParams,
    nu_e: &[TailFunction],
) -> Result<Vec<TailFunction>> {
    if w < 0.0 {
        return Err(Error::NegativeWorkload(w));
    }
    assert_eq!(nu_e.len(), dp.k);
    Ok((0..dp.k)
        .map(|k| nu_e[k].scale_mass(w * dp.beta[k] * dp.lambda[k] / dp.dstar))
        .collect())
}

/// Levy distance between two gridded tails: the smallest eps = k h such
/// that T1(x + eps) - eps <= T2(x) <= T1(x - eps) + eps on the grid, with
/// constant extension at both ends.
fn levy_distance(a: &TailFunction, b: &TailFunction) -> f64 {
    let n = a.grid.n;
    let h = a.grid.h;
    // Sandwich checked in both directions: constant extension at the grid
    // end is not self-symmetric, the conjunction is.
    let sandwich = |f: &[f64], g: &[f64], k: usize, eps: f64| -> bool {
        for i in 0..=n {
            let hi = f[i.saturating_sub(k)] + eps;
            let lo = f[(i + k).min(n)] - eps;
            if g[i] > hi + 1e-12 || g[i] < lo - 1e-12 {
                return false;
            }
        }
        true
    };
    let holds = |k: usize| -> bool {
        let eps = k as f64 * h;
        sandwich(&a.values, &b.values, k, eps) && sandwich(&b.values, &a.values, k, eps)
    };
    if holds(0) {
        return 0.0;
    }
    let mut lo = 0usize; // fails
    let mut hi = n;
    while !holds(hi) {
        // masses can differ by more than the grid span covers
        hi *= 2;
        if hi > 1 << 30 {
            break;
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi as f64 * h
}

/// Implemented distance d_impl: Levy distance between the discretized
/// tails plus the absolute total-mass gap. A metric on discretized
/// representations; surrogate for the weak-convergence metric.
pub fn measure_distance(a: &TailFunction, b: &TailFunction) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    Ok(levy_distance(a, b) + (a.total_mass() - b.total_mass()).abs())
}

/// Max of d_impl over components.
pub fn measure_distance_vec(a: &[TailFunction], b: &[TailFunction]) -> Result<f64> {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        worst = worst.max(measure_distance(x, y)?);
    }
    Ok(worst)
}

/// Columnar text for plot emission: `location<TAB>mass` per atom.
pub fn atoms_columnar(mu: &PointMeasure) -> String {
    let mut out = String::from("location\tmass\n");
    for &(x, m) in mu.atoms() {
        out.push_str(&format!("{x:.9e}\t{m:.9e}\n"));
    }
    out
}

/// Columnar text: `grid_index<TAB>x<TAB>tail_value` per grid point.
pub fn tail_columnar(t: &TailFunction) -> String {
    let mut out = String::from("grid_index\tx\ttail\n");
    for (i, v) in t.values.iter().enumerate() {
        out.push_str(&format!("{i}\t{:.6e}\t{v:.9e}\n", t.grid.point(i)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::mm1_fixture;
    use crate::model::derived_params;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid() -> Grid {
        Grid::new(1e-3, 40.0)
    }

    #[test]
    fn dirac_mass_and_indicator() {
        let d = PointMeasure::dirac(2.5);
        assert_eq!(integrate(TestFunction::One, &d).unwrap(), 1.0);
        assert_eq!(integrate(TestFunction::IndicatorTail(3.0), &d).unwrap(), 0.0);
        assert_eq!(integrate(TestFunction::IndicatorTail(2.5), &d).unwrap(), 1.0);
    }

    #[test]
    fn atoms_at_zero_are_dropped() {
        let m = PointMeasure::new([(0.0, 1.0), (1.0, 2.0), (-0.5, 3.0)]);
        assert_eq!(m.atoms().len(), 1);
        assert_eq!(m.total_mass(), 2.0);
    }

    #[test]
    fn exponential_tail_mean_on_grid() {
        let spec = ServiceSpec::exponential(2.0);
        let t = TailFunction::from_service(&spec, grid());
        let mean = integrate(TestFunction::Chi(1), &t).unwrap();
        assert!((mean - 0.5).abs() < 1e-3);
    }

    #[test]
    fn moment_order_capped_on_tails() {
        let t = TailFunction::from_service(&ServiceSpec::exponential(1.0), grid());
        assert!(matches!(
            integrate(TestFunction::Chi(7), &t),
            Err(Error::UnsupportedMoment(7))
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let spec = ServiceSpec::exponential(0.05); // mean 20 on a grid to 2.0
        let t = TailFunction::from_service(&spec, Grid::new(1e-2, 2.0));
        assert!(matches!(
            integrate(TestFunction::Chi(1), &t),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn shift_truncate_examples() {
        let m = PointMeasure::new([(1.0, 1.0), (2.0, 1.0)]);
        let s = m.shift_truncate(1.5);
        assert_eq!(s.atoms(), &[(0.5, 1.0)]);
        assert_eq!(m.shift_truncate(0.0), m);
        let gone = PointMeasure::new([(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).shift_truncate(3.0);
        assert!(gone.is_zero());
    }

    #[test]
    fn excess_of_exponential_is_itself() {
        let spec = ServiceSpec::exponential(1.7);
        let e = excess_tail(&spec, grid());
        let direct = TailFunction::from_service(&spec, grid());
        let max_dev = e
            .values
            .iter()
            .zip(&direct.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-6, "max deviation {max_dev}");
    }

    #[test]
    fn excess_of_uniform_matches_closed_form() {
        let (a, b) = (0.5, 1.5);
        let spec = ServiceSpec::Uniform { lower: a, upper: b };
        let beta = (a + b) / 2.0;
        let e = excess_tail(&spec, grid());
        let closed = |x: f64| -> f64 {
            if x <= a {
                1.0 - x / beta
            } else if x <= b {
                1.0 - (a + (b - a) / 2.0 - (b - x).powi(2) / (2.0 * (b - a))) / beta
            } else {
                0.0
            }
        };
        for i in (0..e.grid.len()).step_by(97) {
            let x = e.grid.point(i);
            assert!((e.values[i] - closed(x)).abs() < 1e-5, "x = {x}");
        }
    }

    #[test]
    fn excess_of_erlang_mean() {
        let spec = ServiceSpec::Erlang { shape: 2, rate: 1.0 };
        let e = excess_tail(&spec, grid());
        // mean of nu^e = <chi^2, nu> / (2 beta) = 6 / 4
        assert!((e.moment(1) - 1.5).abs() < 1e-3);
    }

    #[test]
    fn excess_is_probability_tail() {
        for spec in [
            ServiceSpec::exponential(0.8),
            ServiceSpec::Erlang { shape: 3, rate: 2.0 },
            ServiceSpec::Uniform { lower: 0.2, upper: 2.0 },
            ServiceSpec::Hyperexponential {
                probs: vec![0.3, 0.7],
                rates: vec![3.0, 0.8],
            },
        ] {
            let e = excess_tail(&spec, grid());
            assert!((e.values[0] - 1.0).abs() < 1e-9);
            for w in e.values.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn lifting_map_single_class_mass() {
        // K = 1, beta = lambda = 1, exponential: dstar = <chi^2, nu>/2 = 1,
        // so the lifted mass equals w.
        let m = mm1_fixture(1.0);
        let dp = derived_params(&m).unwrap();
        assert_relative_eq!(dp.dstar, 1.0, max_relative = 1e-12);
        let nu_e = vec![excess_tail(&m.services[0], grid())];
        let lifted = lifting_map(2.3, &dp, &nu_e).unwrap();
        assert_relative_eq!(lifted[0].total_mass(), 2.3, max_relative = 1e-9);
    }

    #[test]
    fn lifting_map_is_linear_and_zero_at_zero() {
        let m = crate::fixtures::k2_exp_fixture();
        let dp = derived_params(&m).unwrap();
        let g = Grid::new(1e-2, 50.0);
        let nu_e: Vec<_> = m.services.iter().map(|s| excess_tail(s, g)).collect();
        let zero = lifting_map(0.0, &dp, &nu_e).unwrap();
        assert!(zero.iter().all(|t| t.total_mass() == 0.0));
        let one = lifting_map(1.0, &dp, &nu_e).unwrap();
        let two = lifting_map(2.0, &dp, &nu_e).unwrap();
        for (a, b) in one.iter().zip(&two) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_relative_eq!(2.0 * x, *y, epsilon = 1e-12);
            }
        }
        assert!(matches!(
            lifting_map(-0.1, &dp, &nu_e),
            Err(Error::NegativeWorkload(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let g = Grid::new(1e-2, 10.0);
        let mu = PointMeasure::dirac(1.0).to_tail(&g);
        assert_eq!(measure_distance(&mu, &mu).unwrap(), 0.0);

        let eps = 0.05;
        let nu = PointMeasure::dirac(1.0 + eps).to_tail(&g);
        let d = measure_distance(&mu, &nu).unwrap();
        assert!(d <= eps + 1e-12, "d = {d}");

        let double = PointMeasure::new([(1.0, 2.0)]).to_tail(&g);
        let d2 = measure_distance(&mu, &double).unwrap();
        assert!(d2 >= 1.0, "mass gap must register, d = {d2}");
    }

    proptest! {
        #[test]
        fn shift_truncate_composes(
            locs in proptest::collection::vec(0.01f64..10.0, 1..20),
            s in 0.0f64..3.0,
            t in 0.0f64..3.0,
        ) {
            let m = PointMeasure::new(locs.iter().map(|&x| (x, 1.0)));
            let a = m.shift_truncate(s).shift_truncate(t);
            let b = m.shift_truncate(s + t);
            prop_assert_eq!(a.atoms().len(), b.atoms().len());
            for (x, y) in a.atoms().iter().zip(b.atoms()) {
                prop_assert!((x.0 - y.0).abs() < 1e-12);
            }
        }

        #[test]
        fn distance_is_a_metric(
            xs in proptest::collection::vec((0.01f64..8.0, 0.05f64..2.0), 1..8),
            ys in proptest::collection::vec((0.01f64..8.0, 0.05f64..2.0), 1..8),
            zs in proptest::collection::vec((0.01f64..8.0, 0.05f64..2.0), 1..8),
        ) {
            let g = Grid::new(0.05, 10.0);
            let a = PointMeasure::new(xs).to_tail(&g);
            let b = PointMeasure::new(ys).to_tail(&g);
            let c = PointMeasure::new(zs).to_tail(&g);
            let dab = measure_distance(&a, &b).unwrap();
            let dba = measure_distance(&b, &a).unwrap();
            prop_assert!((dab - dba).abs() < 1e-12);
            let dac = measure_distance(&a, &c).unwrap();
            let dcb = measure_distance(&c, &b).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-9);
        }

        #[test]
        fn lifting_mass_identity(w in 0.0f64..5.0) {
            let m = crate::fixtures::k2_exp_fixture();
            let dp = derived_params(&m).unwrap();
            let g = Grid::new(1e-2, 60.0);
            let nu_e: Vec<_> = m.services.iter().map(|s| excess_tail(s, g)).collect();
            let lifted = lifting_map(w, &dp, &nu_e).unwrap();
            for k in 0..dp.k {
                let want = w * dp.beta[k] * dp.lambda[k] / dp.dstar;
                prop_assert!((lifted[k].total_mass() - want).abs() < 1e-9);
            }
        }
    }
}
