use super::*;
use crate::rng::stream_rng;
use rand::SeedableRng;

fn toy_arch(cells: usize, activation: Activation, recon: ReconstructionLoss) -> VaeArchitecture {
    VaeArchitecture {
        cells,
        encoder_hidden: vec![6],
        latent_dim: 3,
        decoder_hidden: vec![5],
        activation,
        reconstruction: recon,
    }
}

fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cells = rows / 2;
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for k in 0..cells {
            let c = rng.gen_range(0..2usize);
            m[(c * cells + k, j)] = 1.0;
        }
    }
    m
}

fn zero_heads(p: &mut VaeParameters) {
    p.mu.w.fill(0.0);
    p.mu.b.fill(0.0);
    p.logvar.w.fill(0.0);
    p.logvar.b.fill(0.0);
}

#[test]
fn kl_unit_values() {
    assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
    assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() <= 1e-12);

    let arch = toy_arch(5, Activation::Relu, ReconstructionLoss::CrossEntropy);
    let mut p = VaeParameters::init(&arch, &mut stream_rng(1, "t", 0)).unwrap();
    zero_heads(&mut p);
    let x = random_batch(10, 2, 1);
    let noise = DMatrix::zeros(3, 2);
    assert_eq!(vae_loss(&arch, &p, &x, &noise, 1.0).unwrap().kl, 0.0);
    p.mu.b[0] = 1.0;
    let l = vae_loss(&arch, &p, &x, &noise, 1.0).unwrap();
    assert!((l.kl - 0.5).abs() <= 1e-12);
    assert!((l.total - l.reconstruction - l.kl).abs() <= 1e-15);
}

#[test]
fn kl_is_nonnegative() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let mu: f64 = rng.gen_range(-3.0..3.0);
        let lv: f64 = rng.gen_range(-5.0..5.0);
        assert!(kl_divergence(&[mu], &[lv]) >= 0.0);
    }
}

#[test]
fn perfect_reconstruction_cross_entropy() {
    let arch = toy_arch(5, Activation::Relu, ReconstructionLoss::CrossEntropy);
    let mut p = VaeParameters::init(&arch, &mut stream_rng(2, "t", 0)).unwrap();
    let out = p.decoder.last_mut().unwrap();
    out.w.fill(0.0);
    for k in 0..10 {
        out.b[k] = if k < 5 { 40.0 } else { -40.0 };
    }
    let mut x = DMatrix::zeros(10, 1);
    for k in 0..5 {
        x[(k, 0)] = 1.0;
    }
    let l = vae_loss(&arch, &p, &x, &DMatrix::zeros(3, 1), 1.0).unwrap();
    let bound = 2.0 * PROB_EPS * PROB_EPS.ln().abs();
    assert!(l.reconstruction <= bound, "{} > {bound}", l.reconstruction);
}

#[test]
fn output_bias_gradient_closed_form() {
    let arch = toy_arch(4, Activation::Tanh, ReconstructionLoss::CrossEntropy);
    let mut p = VaeParameters::init(&arch, &mut stream_rng(3, "t", 0)).unwrap();
    let out = p.decoder.last_mut().unwrap();
    out.w.fill(0.0);
    for k in 0..8 {
        out.b[k] = 0.3 * k as f64 - 1.0;
    }
    let mut x = DMatrix::zeros(8, 1);
    for k in 0..4 {
        x[(k, 0)] = 1.0;
    }
    let (_, g) = vae_backward(&arch, &p, &x, &DMatrix::zeros(3, 1), 1.0).unwrap();
    for k in 0..8 {
        let p_hat = sigmoid(0.3 * k as f64 - 1.0);
        let expected = (p_hat - x[(k, 0)]) / 8.0;
        assert!((g.decoder.last().unwrap().b[k] - expected).abs() < 1e-14);
    }
}

#[test]
fn kl_gradient_wrt_mu() {
    let arch = toy_arch(4, Activation::Relu, ReconstructionLoss::CrossEntropy);
    let mut p = VaeParameters::init(&arch, &mut stream_rng(5, "t", 0)).unwrap();
    for l in &mut p.decoder {
        l.w.fill(0.0);
    }
    let x = random_batch(8, 3, 2);
    let noise = draw_noise(3, 3, &mut stream_rng(5, "n", 0));
    let (_, g) = vae_backward(&arch, &p, &x, &noise, 1.0).unwrap();
    let enc = run_stack(&p.encoder, &x, arch.activation, false);
    let mu = p.mu.forward(enc.acts.last().unwrap());
    for i in 0..3 {
        let expected: f64 = mu.row(i).iter().sum::<f64>() / 3.0;
        assert!((g.mu.b[i] - expected).abs() < 1e-13);
    }
}

/// Central differences of the total loss, same noise draw.
pub(crate) fn fd_max_rel_error(
    arch: &VaeArchitecture,
    params: &VaeParameters,
    batch: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    kl_weight: f64,
    indices: &[usize],
) -> f64 {
    let (_, g) = vae_backward(arch, params, batch, noise, kl_weight).unwrap();
    let gflat = g.flat();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = params.clone();
        *plus.get_mut(i) += h;
        let mut minus = params.clone();
        *minus.get_mut(i) -= h;
        let fp = vae_loss(arch, &plus, batch, noise, kl_weight).unwrap().total;
        let fm = vae_loss(arch, &minus, batch, noise, kl_weight).unwrap().total;
        let fd = (fp - fm) / (2.0 * h);
        let scale = gflat[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((gflat[i] - fd).abs() / scale);
    }
    worst
}

#[test]
fn finite_difference_toy_net() {
    let arch = toy_arch(5, Activation::Tanh, ReconstructionLoss::CrossEntropy);
    let p = VaeParameters::init(&arch, &mut stream_rng(6, "t", 0)).unwrap();
    let x = random_batch(10, 4, 3);
    let noise = draw_noise(3, 4, &mut stream_rng(6, "n", 0));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let idx: Vec<usize> = (0..20).map(|_| rng.gen_range(0..p.len())).collect();
    let err = fd_max_rel_error(&arch, &p, &x, &noise, 1.0, &idx);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn finite_difference_all_parameters_mse_relu() {
    let arch = toy_arch(4, Activation::Relu, ReconstructionLoss::MeanSquaredError);
    let p = VaeParameters::init(&arch, &mut stream_rng(7, "t", 0)).unwrap();
    let x = random_batch(8, 3, 4);
    let noise = draw_noise(3, 3, &mut stream_rng(7, "n", 0));
    let idx: Vec<usize> = (0..p.len()).collect();
    let err = fd_max_rel_error(&arch, &p, &x, &noise, 0.3, &idx);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn shape_errors() {
    let arch = toy_arch(5, Activation::Relu, ReconstructionLoss::CrossEntropy);
    let p = VaeParameters::init(&arch, &mut stream_rng(8, "t", 0)).unwrap();
    assert!(vae_loss(&arch, &p, &DMatrix::zeros(9, 1), &DMatrix::zeros(3, 1), 1.0).is_err());
    assert!(vae_loss(&arch, &p, &DMatrix::zeros(10, 2), &DMatrix::zeros(3, 1), 1.0).is_err());
    assert!(vae_loss(&arch, &p, &DMatrix::zeros(10, 0), &DMatrix::zeros(3, 0), 1.0).is_err());
    let bad = VaeArchitecture {
        latent_dim: 0,
        ..arch.clone()
    };
    assert!(bad.validate().is_err());
}

fn toy_model(seed: u64) -> VaeModel {
    let grid = Grid2D::square(4, 3);
    let arch = toy_arch(12, Activation::Relu, ReconstructionLoss::CrossEntropy);
    let p = VaeParameters::init(&arch, &mut stream_rng(seed, "t", 0)).unwrap();
    VaeModel::new(grid, arch, p).unwrap()
}

#[test]
fn encode_decode_contracts() {
    let m = toy_model(9);
    let x = FaciesRealization::new(m.grid, (0..12).map(|k| (k % 3 == 0) as u8).collect()).unwrap();
    assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
    let z = m.encode(&x).unwrap();
    assert_eq!(z.len(), 3);
    let d = m.decode(&z.values).unwrap();
    assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
    let wrong = FaciesRealization::filled(Grid2D::square(3, 4), 0);
    assert!(m.encode(&wrong).is_err());
    assert!(m.decode(&[0.0; 2]).is_err());
}

#[test]
fn cell_batch_matches_realize() {
    let m = toy_model(10);
    let z = draw_noise(3, 7, &mut stream_rng(10, "z", 0)) * 3.0;
    for cell in 0..12 {
        let b = m.realize_cell_batch(&z, cell).unwrap();
        for j in 0..7 {
            let col: Vec<f64> = z.column(j).iter().copied().collect();
            assert_eq!(b[j], m.realize(&col).unwrap().values()[cell]);
        }
    }
}

#[test]
fn text_round_trip() {
    let m = toy_model(11);
    let back = VaeModel::from_text(&m.to_text()).unwrap();
    assert_eq!(back, m);
    let broken = m.to_text().replacen("latentmda-vae 1", "latentmda-vae 2", 1);
    assert!(VaeModel::from_text(&broken).is_err());
}

#[test]
fn adam_matches_reference_step() {
    let mut adam = Adam::new(0.1);
    let mut p = vec![1.0, -2.0];
    adam.update(&mut p, &[0.5, -4.0]);
    // First bias-corrected step moves each coordinate by lr * sign(g).
    assert!((p[0] - 0.9).abs() < 1e-7);
    assert!((p[1] + 1.9).abs() < 1e-7);
}

fn repeated_set(copies: usize) -> Vec<FaciesRealization> {
    let cfg = crate::facies::ChannelPriorConfig {
        width_cells: crate::facies::Range::new(2.0, 3.0),
        wavelength_cells: crate::facies::Range::new(8.0, 12.0),
        amplitude_cells: crate::facies::Range::new(1.0, 2.0),
        seed: 12,
        ..Default::default()
    };
    let x = crate::facies::generate_prior(&cfg, &Grid2D::square(12, 10), 1, Execution::Sequential)
        .unwrap()
        .remove(0);
    vec![x; copies]
}

use crate::exec::Execution;

#[test]
fn memorizes_a_single_realization() {
    let xs = repeated_set(40);
    let arch = VaeArchitecture::desk(120, 4);
    let cfg = VaeTrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 200,
        seed: 3,
        ..Default::default()
    };
    let (model, log) = vae_train(&arch, &cfg, &xs, Execution::Parallel).unwrap();
    let best = log.epochs[log.best_epoch - 1];
    let bits = best.val_reconstruction / std::f64::consts::LN_2;
    assert!(bits < 0.01, "validation reconstruction {bits} bits/cell");
    let first = log.epochs[0].train_total;
    assert!(log.epochs.last().unwrap().train_total < first);
    let mut best_so_far = f64::INFINITY;
    for e in &log.epochs {
        best_so_far = best_so_far.min(e.val_total);
    }
    assert_eq!(best_so_far, best.val_total);
    let z = model.encode(&xs[0]).unwrap();
    assert_eq!(model.realize(&z.values).unwrap(), xs[0]);
}

#[test]
fn training_is_deterministic_and_logs() {
    let xs = repeated_set(10);
    let arch = VaeArchitecture {
        encoder_hidden: vec![16],
        decoder_hidden: vec![16],
        ..VaeArchitecture::desk(120, 3)
    };
    let cfg = VaeTrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: 5,
        seed: 9,
        ..Default::default()
    };
    let (a, la) = vae_train(&arch, &cfg, &xs, Execution::Parallel).unwrap();
    let (b, lb) = vae_train(&arch, &cfg, &xs, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.to_csv().lines().count(), 1 + la.epochs.len());
    assert!(vae_train(&arch, &cfg, &[], Execution::Sequential).is_err());
}

#[test]
fn early_stopping_honors_patience() {
    let xs = repeated_set(6);
    let arch = VaeArchitecture {
        encoder_hidden: vec![4],
        decoder_hidden: vec![4],
        ..VaeArchitecture::desk(120, 2)
    };
    // A huge step size makes validation loss bounce, so patience must trigger.
    let cfg = VaeTrainConfig {
        learning_rate: 5.0,
        batch_size: 2,
        max_epochs: 200,
        patience: 3,
        seed: 1,
        ..Default::default()
    };
    match vae_train(&arch, &cfg, &xs, Execution::Sequential) {
        Ok((_, log)) => {
            assert!(log.stopped_early);
            assert_eq!(log.epochs.len(), log.best_epoch + 3);
        }
        Err(Error::Divergence { .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
    }
}
