use neural_mcmc_cli::checkpoint::{load_cnf, load_ivae, load_klbasis};
use neural_mcmc_cli::dataset::load_dataset;
use neural_mcmc_cli::metrics::{median, relative_error};
use neural_mcmc_core::field::sample_log_field;
use neural_mcmc_core::vae::{encode, predict};
use std::path::Path;

fn main() {
    for out in ["/tmp/deskH_out", "/tmp/desk_kt1_out"] {
        let out = Path::new(out);
        let (vae, _) = load_ivae(&out.join("ivae.ckpt")).unwrap();
        let (_cnf, _) = load_cnf(&out.join("cnf.ckpt")).unwrap();
        let (basis, _) = load_klbasis(&out.join("klbasis.bin")).unwrap();
        let test = load_dataset(&out.join("dataset_test.bin")).unwrap();
        let mut errs = Vec::new();
        for i in 0..200 {
            let latent = encode(&vae, test.x.row(i)).unwrap();
            let lam_hat = predict(&vae, &latent.mean).unwrap();
            let (_, t_true) = sample_log_field(&basis, test.lambda.row(i)).unwrap();
            let (_, t_hat) = sample_log_field(&basis, &lam_hat).unwrap();
            errs.push(relative_error(&t_true, &t_hat).unwrap());
        }
        println!("{}: predictor-head median rel err over 200 test rows = {:.4}", out.display(), median(&errs).unwrap());
    }
}
