use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::observation::{Datum, Quantity};
use crate::rng::stream_rng;

fn observations(values: &[f64], sd: &[f64]) -> ObservationSet {
    ObservationSet::new(
        values
            .iter()
            .zip(sd)
            .enumerate()
            .map(|(l, (&value, &sd))| Datum {
                time_days: 0.0,
                well: format!("W{l}"),
                quantity: Quantity::Facies,
                value,
                sd,
                anchor: (l, 0),
            })
            .collect(),
    )
    .unwrap()
}

fn gaussian(rows: usize, cols: usize, stream: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(42, "esmda-test", stream);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[test]
fn inflation_schedule_examples() {
    assert_eq!(inflation_schedule(1).unwrap(), vec![1.0]);
    let eight = inflation_schedule(8).unwrap();
    assert_eq!(eight, vec![8.0; 8]);
    assert_eq!(eight.iter().map(|a| 1.0 / a).sum::<f64>(), 1.0);
    assert_eq!(inflation_schedule(10).unwrap(), vec![10.0; 10]);
    assert!(inflation_schedule(0).is_err());
}

#[test]
fn inflation_condition_is_enforced() {
    assert!(check_inflation(&[9.333, 7.0, 4.0, 2.0]).is_err());
    assert!(check_inflation(&[2.0, 2.0 + 1e-8]).is_err());
    assert!(check_inflation(&[1.5, 3.0]).is_ok());
    assert!(check_inflation(&[-2.0, 2.0 / 3.0]).is_err());
    assert!(check_inflation(&[]).is_err());
    let mut cfg = EsmdaConfig::constant(4, 10, 1).unwrap();
    cfg.alphas[0] = 3.0;
    assert!(cfg.validate().is_err());
    assert!(EsmdaConfig::constant(4, 1, 1).is_err());
}

#[test]
fn zero_prediction_spread_gives_zero_update() {
    let z = gaussian(6, 10, 1);
    let d = DMatrix::from_fn(3, 10, |l, _| l as f64);
    let obs = observations(&[1.0, 5.0, -2.0], &[0.5, 1.0, 2.0]);
    let e = draw_perturbations(&obs, 4.0, 3, 0, 10);
    let z1 = update_latents(&z, &d, &obs, 4.0, &e, DEFAULT_ENERGY).unwrap();
    assert_eq!(z1, z);
}

#[test]
fn zero_residual_is_a_fixed_point() {
    let z = gaussian(4, 20, 2);
    let obs = observations(&[0.3, -1.0], &[0.1, 0.2]);
    let d = DMatrix::from_fn(2, 20, |l, _| obs.values()[l]);
    let e = DMatrix::zeros(2, 20);
    assert_eq!(update_latents(&z, &d, &obs, 1.0, &e, 1.0).unwrap(), z);
}

/// `C_zd (C_dd + α C_e)^{-1}` from explicit sums and a dense inverse.
fn brute_gain(z: &DMatrix<f64>, d: &DMatrix<f64>, sd: &[f64], alpha: f64) -> DMatrix<f64> {
    let ne = z.ncols();
    let mean = |m: &DMatrix<f64>, r: usize| (0..ne).map(|j| m[(r, j)]).sum::<f64>() / ne as f64;
    let cov = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, k: usize| {
        let (ma, mb) = (mean(a, i), mean(b, k));
        (0..ne).map(|j| (a[(i, j)] - ma) * (b[(k, j)] - mb)).sum::<f64>() / (ne - 1) as f64
    };
    let nd = d.nrows();
    let czd = DMatrix::from_fn(z.nrows(), nd, |i, k| cov(z, i, d, k));
    let mut c = DMatrix::from_fn(nd, nd, |i, k| cov(d, i, d, k));
    for l in 0..nd {
        c[(l, l)] += alpha * sd[l] * sd[l];
    }
    czd * c.try_inverse().unwrap()
}

#[test]
fn update_matches_dense_formula() {
    for (nz, nd, ne) in [(4, 5, 8), (3, 12, 6), (7, 1, 30)] {
        let z = gaussian(nz, ne, 10 + nd as u64);
        let map = gaussian(nd, nz, 20 + nd as u64);
        let d = &map * &z + gaussian(nd, ne, 30).scale(0.1);
        let sd: Vec<f64> = (0..nd).map(|l| 0.2 + 0.1 * l as f64).collect();
        let obs = observations(&vec![0.5; nd], &sd);
        let alpha = 3.0;
        let e = draw_perturbations(&obs, alpha, 7, 0, ne);
        let got = update_latents(&z, &d, &obs, alpha, &e, 1.0).unwrap();
        let k = brute_gain(&z, &d, &sd, alpha);
        let innov = DMatrix::from_fn(nd, ne, |l, j| 0.5 + e[(l, j)] - d[(l, j)]);
        let expected = &z + k * innov;
        assert!((got - &expected).amax() <= 1e-9 * expected.amax(), "{nz} {nd} {ne}");
    }
}

#[test]
fn ensemble_space_route_matches_data_space_route() {
    for (nd, ne, energy) in [(5, 8, 1.0), (12, 6, 1.0), (12, 6, 0.9), (40, 10, 0.999)] {
        let z = gaussian(3, ne, 50 + nd as u64);
        let d = gaussian(nd, 3, 60) * &z + gaussian(nd, ne, 70).scale(0.3);
        let sd = vec![0.7; nd];
        let obs = observations(&vec![0.1; nd], &sd);
        let e = draw_perturbations(&obs, 2.0, 1, 0, ne);
        let inputs = AnalysisInputs::new(&z, &d, &obs, 2.0, &e).unwrap();
        let x = data_space_solve(&inputs.sdd, &inputs.sinn, 2.0, energy).unwrap();
        let via_data = &inputs.dz * (inputs.sdd.transpose() * x);
        let g = inputs.sdd.transpose() * &inputs.sdd;
        let b = inputs.sdd.transpose() * &inputs.sinn;
        let m = ensemble_space_weights(&g, &b, nd, 2.0, energy);
        let via_ens = &inputs.dz * m;
        assert!((via_data - &via_ens).amax() <= 1e-9 * via_ens.amax().max(1e-12), "{nd} {ne} {energy}");
    }
}

#[test]
fn mean_update_is_linear_in_the_innovation() {
    let (nz, nd, ne) = (5, 4, 25);
    let z = gaussian(nz, ne, 80);
    let d = gaussian(nd, nz, 81) * &z;
    let obs = observations(&[1.0, 0.0, -1.0, 2.0], &[0.3; 4]);
    let e = draw_perturbations(&obs, 1.0, 5, 0, ne);
    let z1 = update_latents(&z, &d, &obs, 1.0, &e, 1.0).unwrap();
    let k = brute_gain(&z, &d, &obs.sd(), 1.0);
    let innov = DMatrix::from_fn(nd, ne, |l, j| obs.values()[l] + e[(l, j)] - d[(l, j)]);
    let lhs = z1.column_mean();
    let rhs = z.column_mean() + k * innov.column_mean();
    assert!((lhs - rhs).amax() < 1e-10);
}

#[test]
fn scaling_a_datum_and_its_sd_leaves_the_update_unchanged() {
    let (nz, nd, ne) = (6, 5, 40);
    let z = gaussian(nz, ne, 90);
    let d = gaussian(nd, nz, 91) * &z;
    let values = [0.4, -0.2, 1.0, 0.0, 0.3];
    let sd = [0.1, 0.2, 0.3, 0.1, 0.5];
    let obs = observations(&values, &sd);
    let base = update_latents(&z, &d, &obs, 4.0, &draw_perturbations(&obs, 4.0, 2, 1, ne), DEFAULT_ENERGY)
        .unwrap();

    let c = 1234.5;
    let (mut v2, mut s2) = (values, sd);
    v2[2] *= c;
    s2[2] *= c;
    let obs2 = observations(&v2, &s2);
    let mut d2 = d.clone();
    d2.row_mut(2).scale_mut(c);
    let scaled =
        update_latents(&z, &d2, &obs2, 4.0, &draw_perturbations(&obs2, 4.0, 2, 1, ne), DEFAULT_ENERGY)
            .unwrap();
    assert!((base - scaled).amax() <= 1e-8);
}

#[test]
fn rejects_non_finite_predictions_and_shape_errors() {
    let z = gaussian(2, 5, 3);
    let obs = observations(&[0.0], &[1.0]);
    let e = DMatrix::zeros(1, 5);
    let mut d = DMatrix::zeros(1, 5);
    d[(0, 3)] = f64::NAN;
    assert!(update_latents(&z, &d, &obs, 1.0, &e, 1.0).is_err());
    assert!(update_latents(&z, &DMatrix::zeros(2, 5), &obs, 1.0, &e, 1.0).is_err());
}

#[test]
fn zero_variance_rows_contribute_nothing() {
    let (nz, ne) = (3, 30);
    let z = gaussian(nz, ne, 100);
    let informative = gaussian(2, nz, 101) * &z;
    let obs2 = observations(&[0.5, -0.5], &[0.2, 0.2]);
    let obs3 = observations(&[0.5, -0.5, 9.0], &[0.2, 0.2, 0.2]);
    let mut d3 = DMatrix::zeros(3, ne);
    d3.rows_mut(0, 2).copy_from(&informative);
    d3.row_mut(2).fill(1.0);
    let e3 = draw_perturbations(&obs3, 1.0, 4, 0, ne);
    let e2 = e3.rows(0, 2).into_owned();
    let a = update_latents(&z, &informative, &obs2, 1.0, &e2, 1.0).unwrap();
    let b = update_latents(&z, &d3, &obs3, 1.0, &e3, 1.0).unwrap();
    assert!((a - b).amax() < 1e-10);
}

/// Linear model d = 2z, z ~ N(0, 1), one datum with sd 1: the Kalman
/// posterior has mean 2 d_obs / 5 and variance 1/5.
fn linear_gaussian_posterior(n_a: usize, ne: usize, seed: u64) -> (f64, f64) {
    let d_obs = 1.5;
    let obs = observations(&[d_obs], &[1.0]);
    let mut rng = stream_rng(seed, "linear-prior", 0);
    let mut z = DMatrix::from_fn(1, ne, |_, _| rng.sample::<f64, _>(StandardNormal));
    for (k, alpha) in inflation_schedule(n_a).unwrap().into_iter().enumerate() {
        let d = z.scale(2.0);
        let e = draw_perturbations(&obs, alpha, seed, k, ne);
        z = update_latents(&z, &d, &obs, alpha, &e, DEFAULT_ENERGY).unwrap();
    }
    let mean = z.mean();
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ne - 1) as f64;
    (mean, var)
}

#[test]
fn linear_gaussian_matches_kalman_posterior() {
    for n_a in [1, 4] {
        let (mean, var) = linear_gaussian_posterior(n_a, 100_000, 11);
        assert!((mean - 0.6).abs() <= 0.02 * 0.6, "N_a={n_a} mean {mean}");
        assert!((var - 0.2).abs() <= 0.02 * 0.2, "N_a={n_a} var {var}");
    }
}

mod driver {
    use super::*;
    use crate::exec::Execution;
    use crate::facies::{FaciesRealization, Grid2D};
    use crate::localization::LocalizationSpec;
    use crate::param::{IdentityParam, Parameterization};
    use crate::sim::{FaciesDataModel, WellSpec};
    use crate::Error;

    fn setup() -> (IdentityParam, FaciesDataModel, ObservationSet, DMatrix<f64>) {
        let grid = Grid2D::square(6, 5);
        let wells: Vec<WellSpec> = [(1, 1), (4, 1), (2, 3), (5, 4)]
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| WellSpec::producer(&format!("W{k}"), i, j, 150.0))
            .collect();
        let truth = FaciesRealization::new(grid, (0..30).map(|k| (k % 3 == 0) as u8).collect()).unwrap();
        let obs = crate::sim::facies_observations(&truth, &wells, 0.05).unwrap();
        let prior = gaussian(30, 12, 500).scale(0.4).add_scalar(0.5);
        (IdentityParam::new(grid), FaciesDataModel { wells }, obs, prior)
    }

    #[test]
    fn single_assimilation_is_one_smoother_step() {
        let (param, fwd, obs, prior) = setup();
        let cfg = EsmdaConfig::constant(1, 12, 3).unwrap();
        assert_eq!(cfg.alphas, vec![1.0]);
        let hm =
            run_history_match(&prior, &param, &fwd, &obs, &cfg, &UpdateScheme::Global, Execution::Sequential)
                .unwrap();
        assert_eq!(hm.states.len(), 2);
        let e = draw_perturbations(&obs, 1.0, 3, 0, 12);
        let z = esmda_update(hm.prior(), &obs, 1.0, &e, cfg.energy).unwrap();
        assert_eq!(hm.posterior().latents, z);
        for j in 0..12 {
            assert_eq!(hm.posterior().facies[j], param.realize(z.column(j).as_slice()).unwrap());
        }
        assert_eq!(hm.objectives.len(), 2);
    }

    #[test]
    fn trajectories_are_reproducible_across_runs_and_modes() {
        let (param, fwd, obs, prior) = setup();
        let cfg = EsmdaConfig::constant(4, 12, 8).unwrap();
        let spec = LocalizationSpec::new(3.0, 2.0, 0.0).unwrap();
        for scheme in [
            UpdateScheme::Global,
            UpdateScheme::Schur(spec),
            UpdateScheme::LocalAnalysis { spec, smooth: true },
        ] {
            let a = run_history_match(&prior, &param, &fwd, &obs, &cfg, &scheme, Execution::Parallel).unwrap();
            let b = run_history_match(&prior, &param, &fwd, &obs, &cfg, &scheme, Execution::Sequential).unwrap();
            assert_eq!(a.objective_csv(), b.objective_csv());
            for (x, y) in a.states.iter().zip(&b.states) {
                assert_eq!(x.latents, y.latents);
                assert_eq!(x.facies, y.facies);
            }
        }
    }

    #[test]
    fn hard_data_are_honoured_after_assimilation() {
        let (param, fwd, obs, prior) = setup();
        let cfg = EsmdaConfig::constant(4, 12, 8).unwrap();
        let hm =
            run_history_match(&prior, &param, &fwd, &obs, &cfg, &UpdateScheme::Global, Execution::Parallel)
                .unwrap();
        let med = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(med(hm.objectives.last().unwrap()) < med(&hm.objectives[0]));
    }

    struct Failing;

    impl ForwardModel for Failing {
        fn predict(&self, x: &FaciesRealization) -> crate::Result<Vec<f64>> {
            if x.values()[0] == 1 {
                Err(Error::Simulation {
                    member: None,
                    msg: "boom".into(),
                })
            } else {
                Ok(vec![0.0; 4])
            }
        }
    }

    #[test]
    fn forward_failures_carry_the_member_id() {
        let (param, _, obs, mut prior) = setup();
        prior.row_mut(0).fill(0.0);
        prior[(0, 7)] = 1.0;
        let cfg = EsmdaConfig::constant(2, 12, 1).unwrap();
        let err =
            run_history_match(&prior, &param, &Failing, &obs, &cfg, &UpdateScheme::Global, Execution::Parallel)
                .unwrap_err();
        assert!(matches!(err, Error::Simulation { member: Some(7), .. }), "{err}");
    }

    #[test]
    fn invalid_inputs_fail_before_any_forward_run() {
        let (param, _, obs, prior) = setup();
        let mut cfg = EsmdaConfig::constant(2, 12, 1).unwrap();
        cfg.alphas = vec![2.0, 3.0];
        // Any forward run would fail loudly; validation must come first.
        let err =
            run_history_match(&prior, &param, &Failing, &obs, &cfg, &UpdateScheme::Global, Execution::Parallel)
                .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let cfg = EsmdaConfig::constant(2, 10, 1).unwrap();
        assert!(run_history_match(&prior, &param, &Failing, &obs, &cfg, &UpdateScheme::Global, Execution::Parallel)
            .is_err());
    }

    #[test]
    fn localizer_names() {
        let spec = LocalizationSpec::new(3.0, 2.0, 0.0).unwrap();
        assert_eq!(UpdateScheme::from_name("none", None).unwrap(), UpdateScheme::Global);
        assert_eq!(UpdateScheme::from_name("schur", Some(spec)).unwrap(), UpdateScheme::Schur(spec));
        assert!(UpdateScheme::from_name("local", None).is_err());
        let msg = UpdateScheme::from_name("kriging", Some(spec)).unwrap_err().to_string();
        for name in UpdateScheme::NAMES {
            assert!(msg.contains(name), "{msg}");
        }
    }
}
