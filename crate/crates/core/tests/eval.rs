//! Generalisation estimates, grids and oracle gaps.

use mfcontrol::env::{merton_oracle, sample_paths, MertonParams, MertonProblem};
use mfcontrol::eval::{gen_estimate, mean_loss, merton_gap, run_grid, slope_fit, GridSpec};
use mfcontrol::rng;
use mfcontrol::{Activation, ControlProblem, GibbsVector, InitSpec, ParticleEnsemble, TrainConfig};
use proptest::prelude::*;

fn merton() -> MertonProblem {
    MertonProblem::new(MertonParams::default()).unwrap()
}

fn constant_gibbs(m: &MertonProblem, value: &[f64]) -> GibbsVector {
    let mut g = GibbsVector::empty(2);
    g.set(1, ParticleEnsemble::constant(value, m.state_dim(), Activation::Tanh));
    g
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        width: 4,
        init: InitSpec {
            output_scale: 0.0,
            input_scale: 1.0,
        },
        ..Default::default()
    }
}

#[test]
fn grid_cells_do_not_depend_on_their_neighbours() {
    let m = merton();
    let wide = GridSpec {
        ns: vec![4, 8],
        rs: vec![3, 4],
        trials: 3,
        n_test: 20,
    };
    let narrow = GridSpec {
        ns: vec![8],
        rs: vec![4],
        trials: 2,
        n_test: 20,
    };
    let untimed = |spec| {
        let mut reports = run_grid(&m, spec, &tiny_config(), 11).unwrap();
        reports.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        reports
    };
    let a = untimed(&wide);
    let b = untimed(&narrow);
    assert_eq!(a.len(), 12);
    for rep in &b {
        let same = a
            .iter()
            .find(|x| (x.n, x.r, x.trial) == (rep.n, rep.r, rep.trial))
            .unwrap();
        assert_eq!(same, rep);
    }
    // Widths of one (n, trial) share the dataset.
    let seeds: Vec<u64> = a.iter().filter(|x| x.n == 4 && x.trial == 1).map(|x| x.seed).collect();
    assert_eq!(seeds.len(), 2);
    assert_eq!(seeds[0], seeds[1]);
}

#[test]
fn constant_control_has_no_systematic_generalisation_gap() {
    let m = merton();
    let g = constant_gibbs(&m, &m.optimal_control());
    for seed in 0..5 {
        let mut s = rng::stream(seed, &[]);
        let train = sample_paths(m.sampler(), 2000, 0, &mut s);
        let test = sample_paths(m.sampler(), 2000, 2000, &mut s);
        let est = gen_estimate(&m, &g, &train, &test).unwrap();
        let (_, se_in) = mean_loss(&m, &g, &train).unwrap();
        let (_, se_out) = mean_loss(&m, &g, &test).unwrap();
        let se = (se_in * se_in + se_out * se_out).sqrt();
        assert!(est.gen.abs() <= 3.0 * se, "seed {seed}: gen {} se {se}", est.gen);
    }
}

#[test]
fn optimal_holding_matches_the_oracle() {
    let m = merton();
    let oracle = merton_oracle(&m, 100_000, &mut rng::stream(1, &[])).unwrap();
    let eval = sample_paths(m.sampler(), 100_000, 0, &mut rng::stream(2, &[]));
    let gap = merton_gap(&m, &constant_gibbs(&m, &oracle.pi_star), &oracle, &eval).unwrap();
    assert!(gap.gap.abs() <= 3.0 * gap.se, "gap {} se {}", gap.gap, gap.se);
    // Holding nothing in the second period is strictly worse.
    let idle = merton_gap(&m, &constant_gibbs(&m, &[0.0; 10]), &oracle, &eval).unwrap();
    assert!(idle.gap < -3.0 * idle.se);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn swapping_train_and_test_negates_gen(seed in any::<u64>(), a in -2.0f64..2.0, n in 2usize..40) {
        let m = merton();
        let g = constant_gibbs(&m, &[a; 10]);
        let mut s = rng::stream(seed, &[]);
        let x = sample_paths(m.sampler(), n, 0, &mut s);
        let y = sample_paths(m.sampler(), n + 3, 100, &mut s);
        let fwd = gen_estimate(&m, &g, &x, &y).unwrap();
        let back = gen_estimate(&m, &g, &y, &x).unwrap();
        prop_assert_eq!(fwd.gen, -back.gen);
    }

    #[test]
    fn slope_of_a_noisy_power_law_is_recovered(
        c in 0.01f64..10.0,
        slope in -1.5f64..0.5,
        spread in 1.0f64..3.0,
    ) {
        // Symmetric multiplicative noise leaves each median on the law.
        let ns = [8usize, 64, 512, 1000];
        let groups: Vec<(usize, Vec<f64>)> = ns
            .iter()
            .map(|&n| {
                let m = c * (n as f64).powf(slope);
                (n, vec![m / spread, m, m * spread, -m])
            })
            .collect();
        let fit = slope_fit(&groups).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
        prop_assert!((fit.intercept - c.ln()).abs() < 1e-9);
    }
}
