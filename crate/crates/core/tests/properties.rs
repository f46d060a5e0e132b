use std::sync::Arc;

use npmix::grid::{DensityField, TensorGrid, DENSITY_FLOOR};
use npmix::init::InitMode;
use npmix::kernel::BandwidthMatrix;
use npmix::mm::{FitConfig, GridConfig, MmEstimator};
use npmix::simulate::{sample_mixture, table1};
use npmix::smoothing::Smoother;
use proptest::prelude::*;

fn setup() -> (Arc<TensorGrid>, Smoother) {
    let (data, _) = sample_mixture(&table1(), 200, 5).unwrap();
    let grid = Arc::new(TensorGrid::from_data(data.view(), 0.15, &[40, 40]).unwrap());
    let h = BandwidthMatrix::normal_reference(data.view()).unwrap();
    let s = Smoother::new(grid.clone(), h).unwrap();
    (grid, s)
}

fn field(grid: &Arc<TensorGrid>, params: &[(f64, f64, f64, f64)]) -> DensityField {
    let lo = grid.spec().lower().to_vec();
    let hi = grid.spec().upper().to_vec();
    let values = grid.tabulate(|x| {
        params
            .iter()
            .map(|&(a, b, s, w)| {
                let c = [lo[0] + a * (hi[0] - lo[0]), lo[1] + b * (hi[1] - lo[1])];
                w * (-((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (2.0 * s * s)).exp()
            })
            .sum()
    });
    DensityField::normalized(grid.clone(), values).unwrap()
}

fn bumps() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    proptest::collection::vec((0.0..1.0, 0.0..1.0, 0.5f64..5.0, 0.1f64..1.0), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Where the kernel keeps all of its mass inside the box, N f <= S f.
    #[test]
    fn jensen_dominance_in_the_interior(p in bumps()) {
        let (grid, s) = setup();
        let f = field(&grid, &p);
        let sf = s.linear_smooth(&f).unwrap();
        let nf = s.nonlinear_smooth(&f).unwrap();
        let mass = s.mass();
        for g in 0..grid.len() {
            if mass[g] >= 1.0 - 1e-12 {
                prop_assert!(nf[g] <= sf[g] + 1e-9 * sf[g].max(1.0));
            }
        }
    }

    #[test]
    fn smoothers_are_monotone(p in bumps(), bump in 0.0f64..2.0) {
        let (grid, s) = setup();
        let f = field(&grid, &p);
        let g_vals: Vec<f64> = f.values().iter().enumerate().map(|(i, v)| v * (1.0 + bump * ((i % 7) as f64) / 7.0)).collect();
        let g = DensityField::from_values(grid.clone(), g_vals).unwrap();
        let (sf, sg) = (s.linear_smooth(&f).unwrap(), s.linear_smooth(&g).unwrap());
        let (nf, ng) = (s.nonlinear_smooth(&f).unwrap(), s.nonlinear_smooth(&g).unwrap());
        for i in 0..grid.len() {
            prop_assert!(sf[i] <= sg[i] * (1.0 + 1e-12));
            prop_assert!(nf[i] <= ng[i] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn linear_smooth_leaks_mass_only_outward(p in bumps()) {
        let (grid, s) = setup();
        let f = field(&grid, &p);
        let total = grid.integrate(&s.linear_smooth(&f).unwrap()).unwrap();
        prop_assert!(total <= 1.0 + 1e-6);
        prop_assert!(total > 0.0);
    }
}

// Iterates stay strictly inside the simplex and above the density floor,
// and the objective stays finite.
#[test]
fn iterates_remain_bounded() {
    for seed in [1u64, 2, 3] {
        let (data, _) = sample_mixture(&table1(), 250, seed).unwrap();
        let config = FitConfig {
            max_iter: 60,
            grid: GridConfig { points_per_dim: 35, margin: 0.15 },
            ..FitConfig::default()
        };
        let est = MmEstimator::from_config(data.view(), &config).unwrap();
        let mut state = est.initial_state(3, InitMode::KMeans, seed).unwrap();
        let mut min_lambda: f64 = 1.0;
        let mut prev = est.objective(&state).unwrap().value;
        for _ in 0..config.max_iter {
            state = est.step(&state).unwrap();
            state.validate().unwrap();
            min_lambda = state.lambda.iter().copied().fold(min_lambda, f64::min);
            assert!(state.densities.iter().all(|f| f.values().iter().all(|&v| v >= DENSITY_FLOOR)));
            let obj = est.objective(&state).unwrap();
            assert!(obj.value.is_finite());
            assert!(obj.value <= prev + 1e-8 * (1.0 + prev.abs()));
            prev = obj.value;
        }
        assert!(min_lambda > 0.01, "seed {seed}: lambda fell to {min_lambda}");
    }
}

#[test]
fn gmm_and_kmeans_starts_both_descend() {
    let (data, _) = sample_mixture(&table1(), 300, 21).unwrap();
    let config = FitConfig {
        max_iter: 30,
        grid: GridConfig { points_per_dim: 35, margin: 0.15 },
        ..FitConfig::default()
    };
    let est = MmEstimator::from_config(data.view(), &config).unwrap();
    for mode in [InitMode::KMeans, InitMode::Gmm] {
        let init = est.initial_state(3, mode, 4).unwrap();
        let out = est.fit(init, &config).unwrap();
        assert!(out.trace.first_ascent(1e-8).is_none(), "{mode}");
        assert_eq!(out.state.rho.len(), 3);
    }
}

#[test]
fn permuting_initial_labels_permutes_the_fit() {
    let (data, _) = sample_mixture(&table1(), 200, 8).unwrap();
    let config = FitConfig {
        max_iter: 5,
        grid: GridConfig { points_per_dim: 30, margin: 0.15 },
        ..FitConfig::default()
    };
    let est = MmEstimator::from_config(data.view(), &config).unwrap();
    let labels = npmix::init::kmeans(data.view(), 3, 2).unwrap();
    let perm = [1usize, 2, 0];
    let permuted: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
    let a = est.fit(est.state_from_labels(&labels, 3).unwrap(), &config).unwrap();
    let b = est.fit(est.state_from_labels(&permuted, 3).unwrap(), &config).unwrap();
    for j in 0..3 {
        assert!((a.state.lambda[j] - b.state.lambda[perm[j]]).abs() < 1e-12);
        // rho comes from a golden-section search with tolerance 1e-8
        assert!((a.state.rho[j] - b.state.rho[perm[j]]).abs() < 1e-6);
    }
    let oa = a.trace.objectives();
    let ob = b.trace.objectives();
    for (x, y) in oa.iter().zip(&ob) {
        assert!((x - y).abs() < 1e-12 * x.abs());
    }
}
