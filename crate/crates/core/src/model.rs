//! Primitive data of a multiclass processor-sharing queue and every
//! parameter derived from it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Service-time distribution. All four families charge (0, oo) only, have a
/// continuous CDF and closed-form moments of every integer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ServiceSpec {
    Exponential { rate: f64 },
    Erlang { shape: u32, rate: f64 },
    Hyperexponential { probs: Vec<f64>, rates: Vec<f64> },
    Uniform { lower: f64, upper: f64 },
}

impl ServiceSpec {
    pub fn exponential(rate: f64) -> Self {
        ServiceSpec::Exponential { rate }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Validation(msg));
        match self {
            ServiceSpec::Exponential { rate } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return err(format!("exponential rate must be positive, got {rate}"));
                }
            }
            ServiceSpec::Erlang { shape, rate } => {
                if *shape == 0 {
                    return err("erlang shape must be at least 1".into());
                }
                if !(*rate > 0.0 && rate.is_finite()) {
                    return err(format!("erlang rate must be positive, got {rate}"));
                }
            }
            ServiceSpec::Hyperexponential { probs, rates } => {
                if probs.is_empty() || probs.len() != rates.len() {
                    return err("hyperexponential needs matching nonempty probs and rates".into());
                }
                if probs.iter().any(|p| *p < 0.0) || rates.iter().any(|r| *r <= 0.0) {
                    return err("hyperexponential probs must be >= 0 and rates > 0".into());
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return err(format!("hyperexponential probs must sum to 1, got {total}"));
                }
            }
            ServiceSpec::Uniform { lower, upper } => {
                if !(*lower > 0.0) || !(*upper > *lower) {
                    return err(format!(
                        "uniform requires 0 < lower < upper, got [{lower}, {upper}]"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Raw moment of integer order p.
    pub fn moment(&self, p: u32) -> f64 {
        match self {
            ServiceSpec::Exponential { rate } => factorial(p) / rate.powi(p as i32),
            ServiceSpec::Erlang { shape, rate } => {
                let mut m = 1.0;
                for j in 0..p {
                    m *= (*shape + j) as f64;
                }
                m / rate.powi(p as i32)
            }
            ServiceSpec::Hyperexponential { probs, rates } => probs
                .iter()
                .zip(rates)
                .map(|(q, r)| q * factorial(p) / r.powi(p as i32))
                .sum(),
            ServiceSpec::Uniform { lower, upper } => {
                let n = p as i32 + 1;
                (upper.powi(n) - lower.powi(n)) / (n as f64 * (upper - lower))
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        self.moment(2) - self.mean().powi(2)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            ServiceSpec::Exponential { rate } => 1.0 - (-rate * x).exp(),
            ServiceSpec::Erlang { shape, rate } => {
                // 1 - e^{-rx} sum_{j<shape} (rx)^j / j!
                let rx = rate * x;
                let mut term = 1.0;
                let mut sum = 1.0;
                for j in 1..*shape {
                    term *= rx / j as f64;
                    sum += term;
                }
                1.0 - (-rx).exp() * sum
            }
            ServiceSpec::Hyperexponential { probs, rates } => probs
                .iter()
                .zip(rates)
                .map(|(q, r)| q * (1.0 - (-r * x).exp()))
                .sum(),
            ServiceSpec::Uniform { lower, upper } => {
                ((x - lower) / (upper - lower)).clamp(0.0, 1.0)
            }
        }
    }

    pub fn tail(&self, x: f64) -> f64 {
        if x <= 0.0 {
            1.0
        } else {
            (1.0 - self.cdf(x)).max(0.0)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ServiceSpec::Exponential { rate } => Exp::new(*rate).unwrap().sample(rng),
            ServiceSpec::Erlang { shape, rate } => Gamma::new(*shape as f64, 1.0 / rate)
                .unwrap()
                .sample(rng),
            ServiceSpec::Hyperexponential { probs, rates } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (q, r) in probs.iter().zip(rates) {
                    acc += q;
                    if u < acc {
                        return Exp::new(*r).unwrap().sample(rng);
                    }
                }
                Exp::new(*rates.last().unwrap()).unwrap().sample(rng)
            }
            ServiceSpec::Uniform { lower, upper } => {
                Uniform::new(*lower, *upper).unwrap().sample(rng)
            }
        }
    }

    /// Rescale the random variable X to X / c (time contraction), so the
    /// mean becomes mean / c. Used by the heavy-traffic sequence.
    pub fn scale_time(&self, c: f64) -> Self {
        match self {
            ServiceSpec::Exponential { rate } => ServiceSpec::Exponential { rate: rate * c },
            ServiceSpec::Erlang { shape, rate } => ServiceSpec::Erlang {
                shape: *shape,
                rate: rate * c,
            },
            ServiceSpec::Hyperexponential { probs, rates } => ServiceSpec::Hyperexponential {
                probs: probs.clone(),
                rates: rates.iter().map(|r| r * c).collect(),
            },
            ServiceSpec::Uniform { lower, upper } => ServiceSpec::Uniform {
                lower: lower / c,
                upper: upper / c,
            },
        }
    }
}

fn factorial(p: u32) -> f64 {
    (1..=p).map(|j| j as f64).product()
}

/// Substochastic routing matrix P; entry (k, l) is the probability that a
/// job finishing service in class k re-enters as class l.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    p: DMatrix<f64>,
}

const POWER_ITERATIONS: usize = 200;
const RADIUS_TOL: f64 = 1e-9;

impl RoutingMatrix {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::Validation("routing matrix must be square".into()));
        }
        for v in p.iter() {
            if !(*v >= 0.0 && *v <= 1.0) {
                return Err(Error::Validation(format!(
                    "routing entries must lie in [0, 1], got {v}"
                )));
            }
        }
        for r in 0..p.nrows() {
            let s: f64 = p.row(r).iter().sum();
            if s > 1.0 + 1e-12 {
                return Err(Error::Validation(format!(
                    "routing row {r} sums to {s} > 1"
                )));
            }
        }
        Ok(RoutingMatrix { p })
    }

    pub fn zeros(k: usize) -> Self {
        RoutingMatrix {
            p: DMatrix::zeros(k, k),
        }
    }

    pub fn k(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn entry(&self, from: usize, to: usize) -> f64 {
        self.p[(from, to)]
    }

    /// Exit probability after a class-k service completion.
    pub fn exit_prob(&self, k: usize) -> f64 {
        (1.0 - self.p.row(k).iter().sum::<f64>()).max(0.0)
    }

    /// Perron-root estimate by max-norm power iteration.
    pub fn spectral_radius_estimate(&self) -> f64 {
        let k = self.k();
        let mut v = DVector::from_element(k, 1.0);
        let mut radius = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let w = &self.p * &v;
            let norm = w.amax();
            if norm == 0.0 {
                return 0.0;
            }
            radius = norm;
            v = w / norm;
        }
        radius
    }

    pub fn check_open(&self) -> Result<()> {
        let radius = self.spectral_radius_estimate();
        if radius >= 1.0 - RADIUS_TOL {
            return Err(Error::SpectralRadius(radius));
        }
        Ok(())
    }
}

/// Q = (I - P')^{-1}, the expected-visit-count matrix (Q_{kl} = mean visits
/// to class k from an entry at class l).
pub fn compute_q(routing: &RoutingMatrix) -> Result<DMatrix<f64>> {
    routing.check_open()?;
    let k = routing.k();
    let i_minus_pt = DMatrix::identity(k, k) - routing.matrix().transpose();
    i_minus_pt
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("I - P' is not invertible".into()))
}

/// Truncated Neumann series sum_{n<=terms} (P')^n. Independent route to Q,
/// used as an oracle in tests.
pub fn neumann_q(routing: &RoutingMatrix, terms: usize) -> DMatrix<f64> {
    let k = routing.k();
    let pt = routing.matrix().transpose();
    let mut acc = DMatrix::identity(k, k);
    let mut term = DMatrix::identity(k, k);
    for _ in 0..terms {
        term = &pt * &term;
        acc += &term;
    }
    acc
}

/// Primitive data of one MPS queue.
#[derive(Debug, Clone)]
pub struct QueueModel {
    pub k: usize,
    /// Exogenous arrival rates alpha_k >= 0, at least one positive.
    pub alpha: Vec<f64>,
    /// Interarrival law per class; None when alpha_k = 0.
    pub interarrival: Vec<Option<ServiceSpec>>,
    /// Service distributions nu_k.
    pub services: Vec<ServiceSpec>,
    pub routing: RoutingMatrix,
    /// Initial job counts Z_k(0).
    pub initial_counts: Vec<u64>,
    /// Initial-service distributions nu0_k.
    pub initial_services: Vec<ServiceSpec>,
    /// Moment-order margin used in validation only (assumptions need
    /// <chi^{4+theta}, nu> finite).
    pub theta: f64,
}

impl QueueModel {
    /// Model with Poisson arrivals and nu0 = nu, the common starting point.
    pub fn poisson(
        alpha: Vec<f64>,
        services: Vec<ServiceSpec>,
        routing: RoutingMatrix,
        initial_counts: Vec<u64>,
    ) -> Result<Self> {
        let interarrival = alpha
            .iter()
            .map(|&a| (a > 0.0).then(|| ServiceSpec::exponential(a)))
            .collect();
        let initial_services = services.clone();
        let m = QueueModel {
            k: services.len(),
            alpha,
            interarrival,
            services,
            routing,
            initial_counts,
            initial_services,
            theta: 0.5,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        let err = |msg: String| Err(Error::Validation(msg));
        if k == 0 {
            return err("model needs at least one class".into());
        }
        if self.alpha.len() != k
            || self.interarrival.len() != k
            || self.services.len() != k
            || self.initial_counts.len() != k
            || self.initial_services.len() != k
            || self.routing.k() != k
        {
            return err(format!("inconsistent dimensions for K = {k}"));
        }
        if !(self.theta > 0.0) {
            return err("theta must be positive".into());
        }
        let check_order = (4.0 + self.theta).ceil() as u32;
        for (i, (a, ia)) in self.alpha.iter().zip(&self.interarrival).enumerate() {
            if !(*a >= 0.0 && a.is_finite()) {
                return err(format!("alpha[{i}] must be finite and >= 0, got {a}"));
            }
            match (a, ia) {
                (a, Some(spec)) if *a > 0.0 => {
                    spec.validate()?;
                    let mean = spec.mean();
                    if (mean - 1.0 / a).abs() > 1e-9 * mean.max(1.0) {
                        return err(format!(
                            "interarrival mean {mean} for class {i} does not match 1/alpha = {}",
                            1.0 / a
                        ));
                    }
                }
                (a, None) if *a > 0.0 => {
                    return err(format!("class {i} has alpha > 0 but no interarrival law"));
                }
                _ => {}
            }
        }
        for spec in self.services.iter().chain(&self.initial_services) {
            spec.validate()?;
            if !spec.moment(check_order).is_finite() {
                return err("service moments up to order 4+theta must be finite".into());
            }
        }
        self.routing.check_open()?;
        Ok(())
    }

    /// Interarrival variance a_k (0 when alpha_k = 0).
    pub fn interarrival_variance(&self, class: usize) -> f64 {
        self.interarrival[class]
            .as_ref()
            .map_or(0.0, |s| s.variance())
    }
}

/// Every matrix and scalar derived from the primitives that the limit
/// theorems use.
#[derive(Debug, Clone)]
pub struct DerivedParams {
    pub k: usize,
    /// Q = (I - P')^{-1}.
    pub q: DMatrix<f64>,
    /// lambda = Q alpha, total arrival rates.
    pub lambda: DVector<f64>,
    /// rho = e M lambda, traffic intensity.
    pub rho: f64,
    /// Service means beta_k.
    pub beta: DVector<f64>,
    /// M = diag beta.
    pub m: DMatrix<f64>,
    /// M2 = diag <chi^2, nu_k>.
    pub m2: DMatrix<f64>,
    /// M0 = diag <chi, nu0_k>.
    pub m0: DMatrix<f64>,
    /// Lambda = diag lambda.
    pub lambda_diag: DMatrix<f64>,
    /// D_alpha = diag alpha.
    pub d_alpha: DMatrix<f64>,
    /// Sigma = diag b_k, service variances.
    pub sigma_sq: DMatrix<f64>,
    /// Pi = diag alpha_k^3 a_k, interarrival covariance scaling.
    pub pi: DMatrix<f64>,
    /// H^k, covariance of the class-k routing vector.
    pub h_cov: Vec<DMatrix<f64>>,
    /// Variance of the limiting workload RBM.
    pub gamma: f64,
    /// dstar = e (1/2 M2 + M P' Q M) lambda, the lifting denominator.
    pub dstar: f64,
    /// R = e M2 lambda / (2 dstar), ratio tying W_F to W*.
    pub r_ratio: f64,
    /// Delta_F = 2 M lambda / (e M2 lambda).
    pub delta_f: DVector<f64>,
}

const IDENTITY_TOL: f64 = 1e-10;

/// Populate all derived parameters, checking the internal covariance
/// identity Lambda - D_alpha - P' Lambda P = sum_k lambda_k H^k.
pub fn derived_params(model: &QueueModel) -> Result<DerivedParams> {
    model.validate()?;
    let k = model.k;
    let q = compute_q(&model.routing)?;
    let alpha = DVector::from_column_slice(&model.alpha);
    let lambda = &q * &alpha;
    let beta = DVector::from_iterator(k, model.services.iter().map(|s| s.mean()));
    let m = DMatrix::from_diagonal(&beta);
    let m2 = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        model.services.iter().map(|s| s.moment(2)),
    ));
    let m0 = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        model.initial_services.iter().map(|s| s.mean()),
    ));
    let lambda_diag = DMatrix::from_diagonal(&lambda);
    let d_alpha = DMatrix::from_diagonal(&alpha);
    let sigma_sq = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        model.services.iter().map(|s| s.variance()),
    ));
    let pi = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        (0..k).map(|i| model.alpha[i].powi(3) * model.interarrival_variance(i)),
    ));
    let p = model.routing.matrix();
    let h_cov: Vec<DMatrix<f64>> = (0..k)
        .map(|kk| {
            DMatrix::from_fn(k, k, |l, mm| {
                if l == mm {
                    p[(kk, l)] * (1.0 - p[(kk, l)])
                } else {
                    -p[(kk, l)] * p[(kk, mm)]
                }
            })
        })
        .collect();

    // Lambda - D_alpha - P' Lambda P = sum_k lambda_k H^k, exact algebra.
    let mut h_sum = DMatrix::zeros(k, k);
    for (kk, h) in h_cov.iter().enumerate() {
        h_sum += h * lambda[kk];
    }
    let lhs = &lambda_diag - &d_alpha - p.transpose() * &lambda_diag * p;
    let dev = (&lhs - &h_sum).amax();
    if dev > IDENTITY_TOL {
        return Err(Error::Validation(format!(
            "routing covariance identity violated by {dev:.3e}"
        )));
    }

    let e = DMatrix::from_element(1, k, 1.0);
    let rho = (&e * &m * &lambda)[(0, 0)];
    if !(rho > 0.0) {
        return Err(Error::Validation(format!("rho = {rho} must be positive")));
    }
    let gamma_mat = &lambda_diag * &sigma_sq + &m * &q * (&pi + &h_sum) * q.transpose() * &m;
    let gamma = (&e * gamma_mat * e.transpose())[(0, 0)];
    let dstar = (&e * (0.5 * &m2 + &m * p.transpose() * &q * &m) * &lambda)[(0, 0)];
    if !(dstar > 0.0) {
        return Err(Error::Validation(format!("dstar = {dstar} must be positive")));
    }
    let e_m2_lambda = (&e * &m2 * &lambda)[(0, 0)];
    let r_ratio = e_m2_lambda / (2.0 * dstar);
    let delta_f = 2.0 / e_m2_lambda * (&m * &lambda);

    Ok(DerivedParams {
        k,
        q,
        lambda,
        rho,
        beta,
        m,
        m2,
        m0,
        lambda_diag,
        d_alpha,
        sigma_sq,
        pi,
        h_cov,
        gamma,
        dstar,
        r_ratio,
        delta_f,
    })
}

/// Models indexed by r satisfying the heavy-traffic condition
/// r (1 - rho^r) = sigma exactly: alpha is scaled by (1 - sigma/r) / rho_base,
/// services and routing unchanged.
pub fn heavy_traffic_sequence(
    base: &QueueModel,
    sigma: f64,
    r_values: &[f64],
) -> Result<Vec<QueueModel>> {
    let dp = derived_params(base)?;
    let mut out = Vec::with_capacity(r_values.len());
    for &r in r_values {
        if !(r > 0.0) {
            return Err(Error::Validation(format!("r must be positive, got {r}")));
        }
        let c = (1.0 - sigma / r) / dp.rho;
        if !(c > 0.0) {
            return Err(Error::InvalidScale { sigma, r });
        }
        let mut m = base.clone();
        for a in &mut m.alpha {
            *a *= c;
        }
        for ia in m.interarrival.iter_mut().flatten() {
            *ia = ia.scale_time(c);
        }
        m.validate()?;
        out.push(m);
    }
    Ok(out)
}
