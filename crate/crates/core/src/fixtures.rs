//! Shipped model fixtures used by the test suites and the CLI examples.

use nalgebra::DMatrix;

use crate::model::{QueueModel, RoutingMatrix, ServiceSpec};

/// Two classes, Poisson arrivals, exponential services, cross feedback.
/// alpha = (0.3, 0.4), P = [[0, 0.3], [0.2, 0]]; beta = (1, 8/7) puts the
/// traffic intensity at exactly 1.
pub fn k2_exp_fixture() -> QueueModel {
    let routing =
        RoutingMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.2, 0.0])).unwrap();
    QueueModel::poisson(
        vec![0.3, 0.4],
        vec![
            ServiceSpec::exponential(1.0),
            ServiceSpec::exponential(7.0 / 8.0),
        ],
        routing,
        vec![0, 0],
    )
    .unwrap()
}

/// Two classes with self loops, Erlang and hyperexponential services, and
/// non-Poisson renewals. alpha = (0.3, 0.298) is chosen so rho = 1.
pub fn k2_mixed_fixture() -> QueueModel {
    let routing =
        RoutingMatrix::new(DMatrix::from_row_slice(2, 2, &[0.1, 0.25, 0.3, 0.05])).unwrap();
    let services = vec![
        ServiceSpec::Erlang {
            shape: 2,
            rate: 2.5,
        },
        ServiceSpec::Hyperexponential {
            probs: vec![0.4, 0.6],
            rates: vec![2.0, 0.5],
        },
    ];
    let alpha = vec![0.3, 0.298];
    let interarrival = vec![
        Some(ServiceSpec::Erlang {
            shape: 2,
            rate: 2.0 * alpha[0],
        }),
        Some(ServiceSpec::Uniform {
            lower: 0.5 / alpha[1],
            upper: 1.5 / alpha[1],
        }),
    ];
    let initial_services = services.clone();
    let m = QueueModel {
        k: 2,
        alpha,
        interarrival,
        services,
        routing,
        initial_counts: vec![0, 0],
        initial_services,
        theta: 0.5,
    };
    m.validate().unwrap();
    m
}

/// Single class M/M/1-PS at load rho.
pub fn mm1_fixture(rho: f64) -> QueueModel {
    QueueModel::poisson(
        vec![rho],
        vec![ServiceSpec::exponential(1.0)],
        RoutingMatrix::zeros(1),
        vec![0],
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derived_params;
    use approx::assert_relative_eq;

    #[test]
    fn fixtures_are_critical() {
        for m in [k2_exp_fixture(), k2_mixed_fixture()] {
            let dp = derived_params(&m).unwrap();
            assert_relative_eq!(dp.rho, 1.0, max_relative = 1e-12);
        }
    }
}
