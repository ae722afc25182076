use dupire_core::calibration::deterministic_local_vol;
use dupire_core::curves::{DiscountCurve, MarketSnapshot, TotalVarianceSurface};
use dupire_core::fokker_planck::{density_call_prices, solve_forward_kolmogorov, FpSettings};
use dupire_core::mc::{mc_implied_vol, simulate_paths_with, SimulationConfig, SimulationGrid, SortedSlice};
use dupire_core::models::{validate_model, ModelSpec};

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn smile_snapshot(rd: f64, rf: f64) -> MarketSnapshot {
    let surface = TotalVarianceSurface::from_fn(grid(-2.5, 2.5, 51), vec![0.1, 0.25, 0.5, 0.75, 1.0, 1.5], |y, t| {
        (0.04 - 0.01 * y + 0.02 * y * y) * t
    })
    .unwrap();
    MarketSnapshot::new(1.0, DiscountCurve::flat(rd, 3.0).unwrap(), DiscountCurve::flat(rf, 3.0).unwrap(), surface)
        .unwrap()
}

#[test]
fn density_recovers_the_input_smile() {
    let snap = smile_snapshot(0.0, 0.0);
    let strikes = grid(0.3, 3.0, 271);
    let mats: Vec<f64> = (1..=100).map(|i| 0.01 * i as f64).collect();
    let lv = deterministic_local_vol(&snap, &strikes, &mats).unwrap();
    let times = [0.5, 1.0];
    let d = solve_forward_kolmogorov(&lv, &snap.domestic, &snap.foreign, 1.0, &times, &FpSettings::default()).unwrap();
    for &t in &times {
        let fwd = snap.forward_price(t).unwrap();
        let ks: Vec<f64> = grid(-0.3, 0.3, 7).iter().map(|y| fwd * y.exp()).collect();
        let prices = density_call_prices(&d, snap.domestic.discount_factor(t).unwrap(), &ks, t).unwrap();
        for p in prices {
            let y = (p.strike / fwd).ln();
            let got = mc_implied_vol(p.price, &snap, p.strike, t).unwrap().vol;
            let want = snap.surface.implied_vol(y, t).unwrap();
            assert!((got - want).abs() * 1e4 <= 10.0, "T={t} y={y:.2}: {got} vs {want}");
        }
    }
}

#[test]
fn density_and_monte_carlo_prices_agree() {
    let snap = smile_snapshot(0.02, 0.01);
    let strikes = grid(0.3, 3.0, 271);
    let mats: Vec<f64> = (1..=100).map(|i| 0.01 * i as f64).collect();
    let lv = deterministic_local_vol(&snap, &strikes, &mats).unwrap();
    let m =
        validate_model(&ModelSpec::black_scholes(1.0, 0.2), &snap.domestic, &snap.foreign, Some(lv.clone())).unwrap();
    let t = 1.0;
    let g = SimulationGrid::new(&mats, 0.01).unwrap();
    let cfg = SimulationConfig { n_paths: 100_000, seed: 17, antithetic: true };
    let batch = simulate_paths_with(&m, &g, cfg).unwrap();
    let sorted = SortedSlice::new(batch.slice_at(t).unwrap(), &[]);
    let d = solve_forward_kolmogorov(&lv, &snap.domestic, &snap.foreign, 1.0, &[t], &FpSettings::default()).unwrap();
    let ks = grid(0.8, 1.25, 10);
    let p = snap.domestic.discount_factor(t).unwrap();
    let fp = density_call_prices(&d, p, &ks, t).unwrap();
    for (k, f) in ks.iter().zip(fp) {
        let mc = sorted.vanilla_price(*k, true);
        let tol = (3.0 * mc.std_error).max(1e-4);
        assert!((mc.value - f.price).abs() <= tol, "K={k}: mc {} ± {} vs fp {}", mc.value, mc.std_error, f.price);
    }
}
