//! Run configuration: a flat `key = value` text format with `#` comments and
//! namespaced keys (`field.`, `mesh.`, `vae.`, `cnf.`, `sampler.`, `io.`).
//! Every key has a desk-scale default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use neural_mcmc_core::cnf::{CnfArch, LatentInput};
use neural_mcmc_core::nn::Activation;
use neural_mcmc_core::optim::TrainConfig;
use neural_mcmc_core::sampler::{GammaChoice, ProposalKind, SamplerConfig};
use neural_mcmc_core::vae::VaeArch;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Everything one end-to-end run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // field.*
    pub lengthscale: f64,
    pub sigma_t: f64,
    /// Constant mean of the log-transmissivity at every node.
    pub mean_log_t: f64,
    pub n_modes: usize,
    // mesh.*
    pub mesh_n: usize,
    // io.*
    pub out_dir: PathBuf,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Signal-to-noise ratio for observation noise; 0 disables noise.
    pub noise_snr: f64,
    // vae.*
    pub vae_n_h: usize,
    pub vae_encoder_widths: Vec<usize>,
    pub vae_decoder_widths: Vec<usize>,
    pub vae_predictor_widths: Vec<usize>,
    pub vae_activation: String,
    pub vae_dropout: f64,
    pub beta_kl: f64,
    pub beta_pred: f64,
    pub sigma_x: f64,
    pub vae_train: TrainKnobs,
    // cnf.*
    pub cnf_n_flows: usize,
    pub cnf_conditioner_widths: Vec<usize>,
    pub cnf_embed_width: usize,
    pub cnf_hidden_width: usize,
    pub cnf_activation: String,
    pub cnf_dropout: f64,
    pub cnf_latent_input: String,
    pub cnf_train: TrainKnobs,
    // sampler.*
    pub chains: usize,
    pub chain_length: usize,
    /// "auto" or a positive number.
    pub gamma: String,
    pub epsilon_std: f64,
    pub archive_period: usize,
    pub archive_init_size: usize,
    /// "auto" (chain_length / 4) or an explicit count.
    pub burn_in: String,
    pub thin: usize,
    pub proposal: String,
    pub test_observations: usize,
}

/// Per-model training knobs mirroring [`TrainConfig`] minus the seed (derived
/// from the run seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainKnobs {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub decay_fraction: f64,
    pub weight_decay: f64,
    pub l2_rate: f64,
    pub patience: usize,
    pub split_fraction: f64,
}

impl TrainKnobs {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            initial_lr: self.initial_lr,
            decay_fraction: self.decay_fraction,
            weight_decay: self.weight_decay,
            l2_rate: self.l2_rate,
            patience: self.patience,
            split_fraction: self.split_fraction,
            seed,
        }
    }
}

impl Default for RunConfig {
    /// Desk-scale defaults: 21x21 mesh, 8 KL modes, 4000/1000 samples,
    /// N_h = 8, 12 coupling layers, 2 chains of 10000.
    fn default() -> Self {
        RunConfig {
            lengthscale: 0.25,
            sigma_t: 1.0,
            mean_log_t: 1.0,
            n_modes: 8,
            mesh_n: 21,
            out_dir: PathBuf::from("out"),
            seed: 0,
            train_samples: 4000,
            test_samples: 1000,
            noise_snr: 0.0,
            vae_n_h: 8,
            vae_encoder_widths: vec![64, 32],
            vae_decoder_widths: vec![32, 64],
            vae_predictor_widths: vec![64, 32],
            vae_activation: "tanh".into(),
            vae_dropout: 0.0,
            beta_kl: 2.5e-4,
            beta_pred: 1e-4,
            sigma_x: 1.0,
            vae_train: TrainKnobs {
                batch_size: 32,
                max_epochs: 250,
                initial_lr: 1e-3,
                decay_fraction: 0.8,
                weight_decay: 0.05,
                l2_rate: 1e-3,
                patience: 25,
                split_fraction: 0.8,
            },
            cnf_n_flows: 12,
            cnf_conditioner_widths: vec![32, 64],
            cnf_embed_width: 32,
            cnf_hidden_width: 32,
            cnf_activation: "elu".into(),
            cnf_dropout: 0.0,
            cnf_latent_input: "draws".into(),
            cnf_train: TrainKnobs {
                batch_size: 32,
                max_epochs: 200,
                initial_lr: 1e-3,
                decay_fraction: 0.8,
                weight_decay: 0.05,
                l2_rate: 1e-3,
                patience: 20,
                split_fraction: 0.8,
            },
            chains: 2,
            chain_length: 10_000,
            gamma: "auto".into(),
            epsilon_std: 1e-3,
            archive_period: 10,
            archive_init_size: 10,
            burn_in: "auto".into(),
            thin: 5,
            proposal: "de".into(),
            test_observations: 20,
        }
    }
}

impl RunConfig {
    /// Small smoke configuration: 11x11 mesh, 4 modes, 500 samples, tiny
    /// nets, short chains.
    pub fn smoke() -> Self {
        RunConfig {
            n_modes: 4,
            mesh_n: 11,
            train_samples: 500,
            test_samples: 100,
            vae_n_h: 4,
            vae_encoder_widths: vec![32, 16],
            vae_decoder_widths: vec![16, 32],
            vae_predictor_widths: vec![16, 8],
            vae_train: TrainKnobs {
                max_epochs: 30,
                patience: 10,
                ..RunConfig::default().vae_train
            },
            cnf_n_flows: 6,
            cnf_conditioner_widths: vec![16, 32],
            cnf_embed_width: 16,
            cnf_hidden_width: 16,
            cnf_train: TrainKnobs {
                max_epochs: 40,
                patience: 10,
                ..RunConfig::default().cnf_train
            },
            chain_length: 2000,
            test_observations: 3,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses overrides on top of the desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("key '{key}': cannot parse '{value}'"))
        }
        fn list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
            value
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| format!("key '{key}': cannot parse list '{value}'"))
                })
                .collect()
        }
        match key {
            "field.lengthscale" => self.lengthscale = num(key, value)?,
            "field.sigma_t" => self.sigma_t = num(key, value)?,
            "field.mean_log_t" => self.mean_log_t = num(key, value)?,
            "field.n_modes" => self.n_modes = num(key, value)?,
            "mesh.n" => self.mesh_n = num(key, value)?,
            "io.out_dir" => self.out_dir = PathBuf::from(value),
            "io.seed" => self.seed = num(key, value)?,
            "io.train_samples" => self.train_samples = num(key, value)?,
            "io.test_samples" => self.test_samples = num(key, value)?,
            "io.noise_snr" => self.noise_snr = num(key, value)?,
            "vae.n_h" => self.vae_n_h = num(key, value)?,
            "vae.encoder_widths" => self.vae_encoder_widths = list(key, value)?,
            "vae.decoder_widths" => self.vae_decoder_widths = list(key, value)?,
            "vae.predictor_widths" => self.vae_predictor_widths = list(key, value)?,
            "vae.activation" => self.vae_activation = value.into(),
            "vae.dropout" => self.vae_dropout = num(key, value)?,
            "vae.beta_kl" => self.beta_kl = num(key, value)?,
            "vae.beta_pred" => self.beta_pred = num(key, value)?,
            "vae.sigma_x" => self.sigma_x = num(key, value)?,
            "vae.batch_size" => self.vae_train.batch_size = num(key, value)?,
            "vae.max_epochs" => self.vae_train.max_epochs = num(key, value)?,
            "vae.initial_lr" => self.vae_train.initial_lr = num(key, value)?,
            "vae.decay_fraction" => self.vae_train.decay_fraction = num(key, value)?,
            "vae.weight_decay" => self.vae_train.weight_decay = num(key, value)?,
            "vae.l2_rate" => self.vae_train.l2_rate = num(key, value)?,
            "vae.patience" => self.vae_train.patience = num(key, value)?,
            "vae.split_fraction" => self.vae_train.split_fraction = num(key, value)?,
            "cnf.n_flows" => self.cnf_n_flows = num(key, value)?,
            "cnf.conditioner_widths" => self.cnf_conditioner_widths = list(key, value)?,
            "cnf.embed_width" => self.cnf_embed_width = num(key, value)?,
            "cnf.hidden_width" => self.cnf_hidden_width = num(key, value)?,
            "cnf.activation" => self.cnf_activation = value.into(),
            "cnf.dropout" => self.cnf_dropout = num(key, value)?,
            "cnf.latent_input" => self.cnf_latent_input = value.into(),
            "cnf.batch_size" => self.cnf_train.batch_size = num(key, value)?,
            "cnf.max_epochs" => self.cnf_train.max_epochs = num(key, value)?,
            "cnf.initial_lr" => self.cnf_train.initial_lr = num(key, value)?,
            "cnf.decay_fraction" => self.cnf_train.decay_fraction = num(key, value)?,
            "cnf.weight_decay" => self.cnf_train.weight_decay = num(key, value)?,
            "cnf.l2_rate" => self.cnf_train.l2_rate = num(key, value)?,
            "cnf.patience" => self.cnf_train.patience = num(key, value)?,
            "cnf.split_fraction" => self.cnf_train.split_fraction = num(key, value)?,
            "sampler.chains" => self.chains = num(key, value)?,
            "sampler.chain_length" => self.chain_length = num(key, value)?,
            "sampler.gamma" => self.gamma = value.into(),
            "sampler.epsilon_std" => self.epsilon_std = num(key, value)?,
            "sampler.archive_period" => self.archive_period = num(key, value)?,
            "sampler.archive_init_size" => self.archive_init_size = num(key, value)?,
            "sampler.burn_in" => self.burn_in = value.into(),
            "sampler.thin" => self.thin = num(key, value)?,
            "sampler.proposal" => self.proposal = value.into(),
            "sampler.test_observations" => self.test_observations = num(key, value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Cross-field checks beyond what the typed accessors enforce.
    pub fn validate(&self) -> Result<()> {
        if self.mesh_n < 11 || (self.mesh_n - 1) % 10 != 0 {
            return Err(CliError::Config(format!(
                "mesh.n = {} does not place the 9x9 sensor grid on nodes; (n-1) must be divisible by 10",
                self.mesh_n
            )));
        }
        if self.n_modes == 0 || self.n_modes > self.mesh_n * self.mesh_n {
            return Err(CliError::Config(format!(
                "field.n_modes = {} outside 1..={}",
                self.n_modes,
                self.mesh_n * self.mesh_n
            )));
        }
        if !(self.lengthscale > 0.0) {
            return Err(CliError::Config("field.lengthscale must be positive".into()));
        }
        if !(self.sigma_t > 0.0) {
            return Err(CliError::Config("field.sigma_t must be positive".into()));
        }
        if self.noise_snr < 0.0 {
            return Err(CliError::Config("io.noise_snr must be nonnegative".into()));
        }
        if self.train_samples == 0 {
            return Err(CliError::Config("io.train_samples must be positive".into()));
        }
        if self.test_samples < self.test_observations {
            return Err(CliError::Config(format!(
                "io.test_samples = {} below sampler.test_observations = {}",
                self.test_samples, self.test_observations
            )));
        }
        if self.chains < 2 {
            return Err(CliError::Config(
                "sampler.chains must be at least 2 for convergence diagnostics".into(),
            ));
        }
        self.vae_arch()?.validate()?;
        self.cnf_arch()?.validate()?;
        self.sampler_config(0)?.validate()?;
        self.latent_input()?;
        Ok(())
    }

    pub fn vae_arch(&self) -> Result<VaeArch> {
        Ok(VaeArch {
            n_x: neural_mcmc_core::darcy::N_SENSORS,
            n_h: self.vae_n_h,
            n_par: self.n_modes,
            encoder_widths: self.vae_encoder_widths.clone(),
            decoder_widths: self.vae_decoder_widths.clone(),
            predictor_widths: self.vae_predictor_widths.clone(),
            activation: Activation::from_tag(&self.vae_activation)?,
            dropout: self.vae_dropout,
            beta_kl: self.beta_kl,
            beta_pred: self.beta_pred,
            sigma_x: self.sigma_x,
        })
    }

    pub fn cnf_arch(&self) -> Result<CnfArch> {
        Ok(CnfArch {
            n_h: self.vae_n_h,
            n_par: self.n_modes,
            n_flows: self.cnf_n_flows,
            conditioner_widths: self.cnf_conditioner_widths.clone(),
            embed_width: self.cnf_embed_width,
            hidden_width: self.cnf_hidden_width,
            activation: Activation::from_tag(&self.cnf_activation)?,
            dropout: self.cnf_dropout,
        })
    }

    pub fn latent_input(&self) -> Result<LatentInput> {
        match self.cnf_latent_input.as_str() {
            "draws" => Ok(LatentInput::Draws),
            "means" => Ok(LatentInput::Means),
            other => Err(CliError::Config(format!(
                "cnf.latent_input must be 'draws' or 'means', got '{other}'"
            ))),
        }
    }

    pub fn resolved_burn_in(&self) -> Result<usize> {
        if self.burn_in == "auto" {
            Ok(self.chain_length / 4)
        } else {
            self.burn_in
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("sampler.burn_in '{}' invalid", self.burn_in)))
        }
    }

    pub fn sampler_config(&self, chain_seed: u64) -> Result<SamplerConfig> {
        let gamma = if self.gamma == "auto" {
            GammaChoice::Auto
        } else {
            let g = self
                .gamma
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("sampler.gamma '{}' invalid", self.gamma)))?;
            GammaChoice::Fixed(g)
        };
        let proposal = match self.proposal.as_str() {
            "de" => ProposalKind::DifferentialEvolution,
            "gaussian" => ProposalKind::GaussianBaseline,
            other => {
                return Err(CliError::Config(format!(
                    "sampler.proposal must be 'de' or 'gaussian', got '{other}'"
                )))
            }
        };
        Ok(SamplerConfig {
            chain_length: self.chain_length,
            gamma,
            epsilon_std: self.epsilon_std,
            archive_period: self.archive_period,
            archive_init_size: self.archive_init_size,
            burn_in: self.resolved_burn_in()?,
            thin: self.thin,
            seed: chain_seed,
            proposal,
        })
    }
}
