//! `solve_fluid` against the brute-force Euler integrator on many states.

use netsim_core::linalg::Matrix;
use netsim_core::network::{solve_traffic, uniformize};
use netsim_core::oracle::euler_fluid;
use netsim_core::{solve_fluid, NetworkSpec, PriorityPolicy, RngStream};

fn two_station_line() -> NetworkSpec {
    let mut r = Matrix::zeros(3, 3);
    r[(0, 1)] = 1.0;
    r[(1, 2)] = 1.0;
    NetworkSpec::new(2, vec![0, 1, 0], vec![9.0, 0.0, 0.0], vec![22.0, 10.0, 22.0], r).unwrap()
}

/// Four classes on two stations, each class passing on to the next with
/// probability in [0.6, 1], scaled so the busier station runs at 0.5.
fn random_network(rng: &mut RngStream) -> NetworkSpec {
    let n = 4;
    let mut station_of: Vec<usize> = (0..n).map(|_| (rng.uniform() * 2.0) as usize).collect();
    station_of[0] = 0;
    station_of[n - 1] = 1;
    let mu: Vec<f64> = (0..n).map(|_| 0.5 + 2.5 * rng.uniform()).collect();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n - 1 {
        r[(i, i + 1)] = 0.6 + 0.4 * rng.uniform();
    }
    let mut lambda = vec![0.0; n];
    lambda[0] = 1.0;
    let probe = NetworkSpec::new(2, station_of.clone(), lambda.clone(), mu.clone(), r.clone()).unwrap();
    let worst = solve_traffic(&probe).station_load.iter().cloned().fold(0.0, f64::max);
    lambda[0] = 0.5 / worst;
    NetworkSpec::new(2, station_of, lambda, mu, r).unwrap()
}

fn small_state(rng: &mut RngStream, n: usize) -> Vec<f64> {
    loop {
        let y: Vec<f64> = (0..n).map(|_| (rng.uniform() * 4.0).floor().min(3.0)).collect();
        if y.iter().any(|v| *v > 0.0) {
            return y;
        }
    }
}

fn worst_gap(spec: &NetworkSpec, policy: &PriorityPolicy, states: &[Vec<f64>]) -> f64 {
    states
        .iter()
        .map(|y| {
            let exact = solve_fluid(spec, policy, y).unwrap().value();
            let euler = euler_fluid(spec, policy, y, 1e-4).unwrap();
            (euler - exact).abs() / (1.0 + exact)
        })
        .fold(0.0, f64::max)
}

#[test]
fn two_station_line_agrees_with_euler() {
    let net = uniformize(&two_station_line());
    let policy = PriorityPolicy::fbfs(net.spec());
    let mut rng = RngStream::new(3, 0);
    let states: Vec<Vec<f64>> = (0..100).map(|_| small_state(&mut rng, 3)).collect();
    let gap = worst_gap(net.spec(), &policy, &states);
    assert!(gap <= 1e-3, "{gap}");
}

#[test]
fn random_two_station_networks_agree_with_euler() {
    let mut rng = RngStream::new(4, 0);
    for k in 0..10 {
        let net = uniformize(&random_network(&mut rng));
        let policy = if k % 2 == 0 {
            PriorityPolicy::fbfs(net.spec())
        } else {
            PriorityPolicy::lbfs(net.spec())
        };
        let states: Vec<Vec<f64>> = (0..10).map(|_| small_state(&mut rng, 4)).collect();
        let gap = worst_gap(net.spec(), &policy, &states);
        assert!(gap <= 1e-3, "network {k}: {gap}");
    }
}
