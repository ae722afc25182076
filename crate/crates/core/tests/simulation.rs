use dupire_core::curves::DiscountCurve;
use dupire_core::mc::{simulate_paths, t_forward_expectation, SimulationGrid};
use dupire_core::models::{validate_model, Correlations, Model, ModelSpec, ShortRateParams};

fn curves() -> (DiscountCurve, DiscountCurve) {
    let t = vec![0.0, 1.0, 2.0, 5.0, 6.0];
    (
        DiscountCurve::new(t.clone(), vec![1.0, 0.98, 0.955, 0.88, 0.85]).unwrap(),
        DiscountCurve::new(t, vec![1.0, 0.99, 0.975, 0.94, 0.93]).unwrap(),
    )
}

fn hybrid() -> (Model, DiscountCurve, DiscountCurve) {
    let spec = ModelSpec {
        domestic: ShortRateParams { kappa: 0.1, sigma: 0.01 },
        foreign: ShortRateParams { kappa: 0.1, sigma: 0.01 },
        correlations: Correlations {
            spot_domestic: 0.3,
            spot_foreign: -0.2,
            domestic_foreign: 0.2,
            ..Default::default()
        },
        ..ModelSpec::black_scholes(1.0, 0.2)
    };
    let (d, f) = curves();
    (validate_model(&spec, &d, &f, None).unwrap(), d, f)
}

#[test]
fn same_seed_gives_identical_batches() {
    let (m, d, _) = hybrid();
    let g = SimulationGrid::new(&[0.5, 1.0], 0.05).unwrap();
    let a = simulate_paths(&m, &g, 3000, 11).unwrap();
    let b = simulate_paths(&m, &g, 3000, 11).unwrap();
    assert_eq!(a, b);
    let p = d.discount_factor(1.0).unwrap();
    let ea = t_forward_expectation(a.slice_at(1.0).unwrap(), p, |x| x.s);
    let eb = t_forward_expectation(b.slice_at(1.0).unwrap(), p, |x| x.s);
    assert_eq!(ea.value.to_bits(), eb.value.to_bits());
    assert_eq!(ea.std_error.to_bits(), eb.std_error.to_bits());
    let c = simulate_paths(&m, &g, 3000, 12).unwrap();
    assert_ne!(a, c);
}

#[test]
fn forward_and_numeraire_at_every_grid_time() {
    let (m, d, f) = hybrid();
    let obs = [0.25, 0.5, 1.0, 2.0, 3.0];
    let g = SimulationGrid::new(&obs, 0.02).unwrap();
    let b = simulate_paths(&m, &g, 20_000, 5).unwrap();
    for &t in &obs {
        let sl = b.slice_at(t).unwrap();
        let p = d.discount_factor(t).unwrap();
        let fwd = f.discount_factor(t).unwrap() / p;
        let one = t_forward_expectation(sl, p, |_| 1.0);
        let s = t_forward_expectation(sl, p, |x| x.s);
        assert!(one.agrees_with(1.0, 3.0), "T={t}: {one:?}");
        assert!(s.agrees_with(fwd, 3.0), "T={t}: {s:?} vs {fwd}");
    }
}

#[test]
fn standard_errors_shrink_like_root_n() {
    let (m, d, _) = hybrid();
    let g = SimulationGrid::new(&[1.0], 0.05).unwrap();
    let p = d.discount_factor(1.0).unwrap();
    let se: Vec<f64> = [10_000, 40_000, 160_000]
        .iter()
        .map(|&n| {
            let b = simulate_paths(&m, &g, n, 3).unwrap();
            t_forward_expectation(b.slice_at(1.0).unwrap(), p, |x| (x.s - 1.0).max(0.0)).std_error
        })
        .collect();
    for w in se.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{se:?}");
    }
}
