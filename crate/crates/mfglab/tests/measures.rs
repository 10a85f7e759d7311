use mfglab::measures::{moment, optimal_coupling, pushforward_shift, wasserstein_distance, Domain, EmpiricalMeasure};
use proptest::prelude::*;

/// Smallest assignment cost over all permutations.
fn brute_force(q: f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    fn rec(i: usize, used: &mut Vec<bool>, acc: f64, cost: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        let n = used.len();
        if i == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(i + 1, used, acc + cost(i, j), cost, best);
                used[j] = false;
            }
        }
    }
    let dom = mu.domain();
    let n = mu.len();
    let cost = |i: usize, j: usize| dom.distance(mu.point(i), nu.point(j)).powf(q);
    let mut best = f64::INFINITY;
    rec(0, &mut vec![false; n], 0.0, &cost, &mut best);
    (best / n as f64).powf(1.0 / q)
}

fn cloud(d: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n * d)
}

fn pair(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1..=2usize, 1..=max_n).prop_flat_map(|(d, n)| (Just(d), cloud(d, n), cloud(d, n)))
}

proptest! {
    #[test]
    fn matches_permutation_search((d, a, b) in pair(6), q in prop::sample::select(vec![1.0, 2.0])) {
        let mu = EmpiricalMeasure::new(d, a, Domain::Euclidean).unwrap();
        let nu = EmpiricalMeasure::new(d, b, Domain::Euclidean).unwrap();
        let w = wasserstein_distance(q, &mu, &nu).unwrap();
        let bf = brute_force(q, &mu, &nu);
        prop_assert!((w - bf).abs() <= 1e-10 * bf.max(1e-300), "{w} vs {bf}");
    }

    #[test]
    fn symmetric_and_zero_on_diagonal((d, a, b) in pair(12)) {
        let mu = EmpiricalMeasure::new(d, a, Domain::Euclidean).unwrap();
        let nu = EmpiricalMeasure::new(d, b, Domain::Euclidean).unwrap();
        let ab = wasserstein_distance(2.0, &mu, &nu).unwrap();
        let ba = wasserstein_distance(2.0, &nu, &mu).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(wasserstein_distance(2.0, &mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn triangle_inequality(d in 1..=2usize, a in cloud(2, 5), b in cloud(2, 5), c in cloud(2, 5)) {
        let m = |v: Vec<f64>| EmpiricalMeasure::new(d, v[..5 * d].to_vec(), Domain::Euclidean).unwrap();
        let (x, y, z) = (m(a), m(b), m(c));
        let w = |p: &EmpiricalMeasure, q: &EmpiricalMeasure| wasserstein_distance(2.0, p, q).unwrap();
        prop_assert!(w(&x, &z) <= w(&x, &y) + w(&y, &z) + 1e-12);
    }

    #[test]
    fn common_shift_is_invisible((d, a, b) in pair(8), s in prop::collection::vec(-5.0..5.0f64, 2)) {
        let mu = EmpiricalMeasure::new(d, a, Domain::Euclidean).unwrap();
        let nu = EmpiricalMeasure::new(d, b, Domain::Euclidean).unwrap();
        let shift = &s[..d];
        let w0 = wasserstein_distance(2.0, &mu, &nu).unwrap();
        let w1 = wasserstein_distance(2.0, &pushforward_shift(&mu, shift).unwrap(), &pushforward_shift(&nu, shift).unwrap()).unwrap();
        prop_assert!((w0 - w1).abs() <= 1e-9 * w0.max(1.0));
    }

    #[test]
    fn coupling_cost_is_the_distance((d, a, b) in pair(10)) {
        let mu = EmpiricalMeasure::new(d, a, Domain::Euclidean).unwrap();
        let nu = EmpiricalMeasure::new(d, b, Domain::Euclidean).unwrap();
        let c = optimal_coupling(2.0, &mu, &nu).unwrap();
        let w = wasserstein_distance(2.0, &mu, &nu).unwrap();
        prop_assert!((c.cost(2.0) - w).abs() <= 1e-10 * w.max(1.0));
        let (m1, m2) = c.marginals();
        prop_assert_eq!(m1.len(), mu.len());
        prop_assert_eq!(m2.len(), nu.len());
    }

    #[test]
    fn torus_distances_are_bounded(a in cloud(1, 6), b in cloud(1, 6)) {
        let dom = Domain::Torus { period: 1.0 };
        let mu = EmpiricalMeasure::new(1, a, dom).unwrap();
        let nu = EmpiricalMeasure::new(1, b, dom).unwrap();
        prop_assert!(wasserstein_distance(1.0, &mu, &nu).unwrap() <= 0.5 + 1e-12);
        let bf = brute_force(1.0, &mu, &nu);
        prop_assert!((wasserstein_distance(1.0, &mu, &nu).unwrap() - bf).abs() <= 1e-10 * bf.max(1e-300));
    }
}

#[test]
fn dirac_distance_is_the_point_distance() {
    let a = EmpiricalMeasure::dirac(&[0.0, 0.0], Domain::Euclidean).unwrap();
    let b = EmpiricalMeasure::dirac(&[3.0, 4.0], Domain::Euclidean).unwrap();
    for q in [1.0, 2.0, 3.0] {
        assert!((wasserstein_distance(q, &a, &b).unwrap() - 5.0).abs() < 1e-12);
    }
}

#[test]
fn moments_of_a_known_cloud() {
    let mu = EmpiricalMeasure::from_scalars(&[-1.0, 1.0, 3.0]).unwrap();
    assert_eq!(mu.mean(), &[1.0]);
    assert!((moment(&mu, 2.0).unwrap() - (11.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn csv_and_json_round_trip() {
    let mu = EmpiricalMeasure::new(2, vec![0.1, -0.2, 1.5, 2.25, -3.0, 0.0], Domain::Euclidean).unwrap();
    assert_eq!(EmpiricalMeasure::from_csv(&mu.to_csv(), Domain::Euclidean).unwrap(), mu);
    assert_eq!(EmpiricalMeasure::from_json(&mu.to_json(), Domain::Euclidean).unwrap(), mu);
}

#[test]
fn mismatched_inputs_are_errors() {
    let a = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
    let b = EmpiricalMeasure::new(2, vec![0.0, 1.0], Domain::Euclidean).unwrap();
    assert!(wasserstein_distance(2.0, &a, &b).is_err());
    assert!(wasserstein_distance(0.5, &a, &a).is_err());
    assert!(EmpiricalMeasure::from_scalars(&[]).is_err());
    assert!(EmpiricalMeasure::from_scalars(&[f64::NAN]).is_err());
}
