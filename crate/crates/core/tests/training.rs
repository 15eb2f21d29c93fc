//! End-to-end training behavior on small in-memory datasets: the informed VAE
//! on a coarse groundwater dataset and the conditional flow on a synthetic
//! conditional Gaussian with a known density.

use neural_mcmc_core::cnf::{log_prob, train_cnf, CnfArch, LatentInput};
use neural_mcmc_core::darcy::{observe, solve_darcy, StructuredMesh, DEFAULT_CG_TOL};
use neural_mcmc_core::field::{build_covariance, sample_log_field, truncate_basis, Truncation};
use neural_mcmc_core::graph::Graph;
use neural_mcmc_core::math;
use neural_mcmc_core::optim::TrainConfig;
use neural_mcmc_core::rng::{derive_stream, fill_standard_normal};
use neural_mcmc_core::tensor::Tensor;
use neural_mcmc_core::vae::{ivae_loss, train_ivae, VaeArch};
use neural_mcmc_core::{eigen, nn::Parameterized};

fn darcy_dataset(n_samples: usize, mesh_n: usize, n_modes: usize, seed: u64) -> (Tensor, Tensor) {
    let mesh = StructuredMesh::new(mesh_n).unwrap();
    let c = build_covariance(&mesh.coordinates, 0.25).unwrap();
    let eig = eigen::symmetric_eigen_descending(&c).unwrap();
    let basis = truncate_basis(
        &eig,
        Truncation::ModeCount(n_modes),
        vec![1.0; mesh.n_nodes()],
        1.0,
    )
    .unwrap();
    let mut x = Tensor::zeros(n_samples, 81);
    let mut lam = Tensor::zeros(n_samples, n_modes);
    let mut lambda = vec![0.0; n_modes];
    for i in 0..n_samples {
        let mut rng = derive_stream(seed, &[1, i as u64]);
        fill_standard_normal(&mut rng, &mut lambda);
        let (_, t) = sample_log_field(&basis, &lambda).unwrap();
        let sol = solve_darcy(&mesh, &t, DEFAULT_CG_TOL).unwrap();
        let obs = observe(&sol, &mesh).unwrap();
        x.data[i * 81..(i + 1) * 81].copy_from_slice(&obs);
        lam.data[i * n_modes..(i + 1) * n_modes].copy_from_slice(&lambda);
    }
    (x, lam)
}

#[test]
fn ivae_training_descends_and_improves_reconstruction() {
    let (x, lam) = darcy_dataset(400, 11, 4, 7);
    let arch = VaeArch {
        encoder_widths: vec![32, 16],
        decoder_widths: vec![16, 32],
        predictor_widths: vec![16, 8],
        beta_pred: 1e-2,
        ..VaeArch::new(81, 4, 4)
    };
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 40,
        patience: 40,
        seed: 21,
        ..TrainConfig::default()
    };

    // untrained baseline on the same data
    let untrained = neural_mcmc_core::vae::IVaeModel::init(arch.clone(), cfg.seed).unwrap();
    let mut rng = derive_stream(50, &[2]);
    let before = ivae_loss(&untrained, &x, &lam, &mut rng).unwrap();

    let (model, report) = train_ivae(&x, &lam, arch, &cfg).unwrap();
    assert!(report.history.len() >= 10);

    // training loss descends in its 5-epoch moving average over the first 10
    let losses: Vec<f64> = report.history[..10].iter().map(|e| e.train_loss).collect();
    let ma: Vec<f64> = (0..6)
        .map(|i| losses[i..i + 5].iter().sum::<f64>() / 5.0)
        .collect();
    for w in ma.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "moving average rose: {ma:?}");
    }

    let mut rng = derive_stream(50, &[2]);
    let after = ivae_loss(&model, &x, &lam, &mut rng).unwrap();
    assert!(
        after.mse < before.mse,
        "reconstruction did not improve: {} -> {}",
        before.mse,
        after.mse
    );
}

#[test]
fn cnf_learns_a_conditional_gaussian() {
    // h | lambda ~ N(lambda, 0.1 I) in two dimensions
    let n = 3000usize;
    let sigma2 = 0.1;
    let mut rng = derive_stream(31, &[3]);
    let mut h = Tensor::zeros(n, 2);
    let mut lam = Tensor::zeros(n, 2);
    for i in 0..n {
        for d in 0..2 {
            let l = neural_mcmc_core::rng::standard_normal(&mut rng);
            let noise = neural_mcmc_core::rng::standard_normal(&mut rng);
            lam.data[i * 2 + d] = l;
            h.data[i * 2 + d] = l + math::sqrt(sigma2) * noise;
        }
    }

    let arch = CnfArch {
        conditioner_widths: vec![16, 32],
        embed_width: 16,
        hidden_width: 16,
        ..CnfArch::new(2, 2, 6)
    };
    let cfg = TrainConfig {
        batch_size: 64,
        max_epochs: 150,
        initial_lr: 2e-3,
        weight_decay: 0.0,
        l2_rate: 0.0,
        patience: 30,
        seed: 41,
        ..TrainConfig::default()
    };
    // the dataset is already latent points, so train on the means directly
    let logvar = Tensor::filled(n, 2, f64::NEG_INFINITY);
    let (stack, report) = train_cnf(&h, &logvar, &lam, arch, &cfg, LatentInput::Means).unwrap();
    assert!(report.best_val_loss < report.history[0].val_loss);

    // fresh evaluation set
    let m = 500usize;
    let mut correct = 0.0;
    let mut shuffled = 0.0;
    let mut mae = 0.0;
    let mut eval_h = vec![0.0; 2];
    let mut eval_l = vec![0.0; 2];
    let mut wrong_l = vec![0.0; 2];
    for _ in 0..m {
        for d in 0..2 {
            eval_l[d] = neural_mcmc_core::rng::standard_normal(&mut rng);
            wrong_l[d] = neural_mcmc_core::rng::standard_normal(&mut rng);
            eval_h[d] = eval_l[d] + math::sqrt(sigma2) * neural_mcmc_core::rng::standard_normal(&mut rng);
        }
        let lp = log_prob(&stack, &eval_h, &eval_l).unwrap();
        correct += lp;
        shuffled += log_prob(&stack, &eval_h, &wrong_l).unwrap();
        let analytic: f64 = eval_h
            .iter()
            .zip(eval_l.iter())
            .map(|(&hv, &lv)| {
                -0.5 * (math::LN_2PI + math::ln(sigma2)) - (hv - lv) * (hv - lv) / (2.0 * sigma2)
            })
            .sum();
        mae += (lp - analytic).abs();
    }
    correct /= m as f64;
    shuffled /= m as f64;
    mae /= m as f64;

    assert!(
        correct - shuffled >= 1.0,
        "separation too small: correct {correct} vs shuffled {shuffled}"
    );
    assert!(mae <= 0.2, "mean absolute error vs analytic density: {mae}");
}

#[test]
fn cnf_zero_gradient_paths_are_absent() {
    // every flow parameter receives gradient from the NLL
    let arch = CnfArch {
        conditioner_widths: vec![8],
        embed_width: 8,
        hidden_width: 8,
        ..CnfArch::new(4, 2, 2)
    };
    let stack = neural_mcmc_core::cnf::FlowStack::init(arch, 3).unwrap();
    let mut rng = derive_stream(5, &[4]);
    let mut h = Tensor::zeros(8, 4);
    let mut lam = Tensor::zeros(8, 2);
    fill_standard_normal(&mut rng, &mut h.data);
    fill_standard_normal(&mut rng, &mut lam.data);
    let mut g = Graph::new();
    let pvars: Vec<_> = stack.params().iter().map(|t| g.param((*t).clone())).collect();
    let loss = neural_mcmc_core::cnf::nll_loss_graph(&stack, &mut g, &pvars, h, lam, None).unwrap();
    let grads = g.backward(loss).unwrap();
    for (k, &v) in pvars.iter().enumerate() {
        let shape = g.value(v).shape();
        let grad = grads.get_or_zeros(v, shape.0, shape.1);
        assert!(
            grad.data.iter().any(|&d| d != 0.0),
            "parameter {k} receives no gradient"
        );
    }
}
