//! The staged pipeline: generate -> train-vae -> encode-dataset -> train-cnf
//! -> sample -> diagnose. Every stage writes one artifact whose header embeds
//! the configuration it was built from; a rerun with a matching header counts
//! as a cache hit and the stage is skipped.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use neural_mcmc_core::cnf::{log_prob, train_cnf, FlowStack};
use neural_mcmc_core::darcy::StructuredMesh;
use neural_mcmc_core::field::{
    build_covariance, eigendecompose_descending, sample_log_field, truncate_basis, KlBasis,
    Truncation,
};
use neural_mcmc_core::rng::{derive_seed, derive_stream};
use neural_mcmc_core::sampler::{
    burn_and_thin, gelman_rubin, run_chain, summarize, Chain, PriorSpec,
};
use neural_mcmc_core::tensor::Tensor;
use neural_mcmc_core::vae::{encode, encode_batch, train_ivae, IVaeModel};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_cnf, load_ivae, load_klbasis, load_latents, save_cnf, save_ivae, save_klbasis,
    save_latents, CnfArchSpec, VaeArchSpec, FORMAT_VERSION,
};
use crate::config::RunConfig;
use crate::dataset::{
    generate_dataset, load_dataset_if_matching, save_dataset, DataSpec, Dataset,
};
use crate::metrics::{median, pca_project, relative_error, spearman};
use crate::{CliError, Result};

const TAG_DATA: u64 = 0x64_61_74;
const TAG_VAE: u64 = 0x76_61_65;
const TAG_CNF: u64 = 0x63_6e_66;
const TAG_SAMPLE: u64 = 0x73_61_6d;
const TAG_SEPARATION: u64 = 0x73_65_70;

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub name: &'static str,
    pub cached: bool,
    pub seconds: f64,
}

fn log_stage(report: &StageReport) {
    if report.cached {
        println!("[stage {}] cached", report.name);
    } else {
        println!("[stage {}] done in {:.1}s", report.name, report.seconds);
    }
}

/// Summary of one full run; the `timing` block is the only part allowed to
/// differ between identically-seeded reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub format_version: u32,
    pub seed: u64,
    pub mesh_n: usize,
    pub n_modes: usize,
    pub n_h: usize,
    pub kl_captured_fraction: f64,
    pub n_test_observations: usize,
    pub chains_per_observation: usize,
    pub n_kept_per_observation: usize,
    pub converged: bool,
    /// Worst-case potential scale reduction per parameter dimension.
    pub r_hat: Vec<f64>,
    pub acceptance_rate_mean: f64,
    pub acceptance_rate_min: f64,
    pub acceptance_rate_max: f64,
    pub relative_error_mean: ErrorStats,
    pub relative_error_map: ErrorStats,
    pub separation: Separation,
    pub posterior_std_by_mode: Vec<f64>,
    pub spearman_std_vs_mode: f64,
    pub timing: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub median: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub correct_mean_loglik: f64,
    pub permuted_mean_loglik: f64,
    pub gap: f64,
}

/// Artifact paths under the output directory.
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Self {
        Layout { out: out.to_path_buf() }
    }
    pub fn klbasis(&self) -> PathBuf {
        self.out.join("klbasis.bin")
    }
    pub fn dataset(&self, role: &str) -> PathBuf {
        self.out.join(format!("dataset_{role}.bin"))
    }
    pub fn ivae(&self) -> PathBuf {
        self.out.join("ivae.ckpt")
    }
    pub fn latents(&self) -> PathBuf {
        self.out.join("latents.bin")
    }
    pub fn cnf(&self) -> PathBuf {
        self.out.join("cnf.ckpt")
    }
    pub fn chains_dir(&self) -> PathBuf {
        self.out.join("chains")
    }
    pub fn chain_csv(&self, obs: usize, chain: usize) -> PathBuf {
        self.chains_dir().join(format!("obs{obs:03}_chain{chain}.csv"))
    }
    pub fn chain_diagnostics(&self, obs: usize) -> PathBuf {
        self.chains_dir().join(format!("obs{obs:03}_diagnostics.json"))
    }
    pub fn chains_manifest(&self) -> PathBuf {
        self.chains_dir().join("manifest.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.out.join("summary.json")
    }
    pub fn separation_csv(&self) -> PathBuf {
        self.out.join("loglik_separation.csv")
    }
    pub fn posterior_std_csv(&self) -> PathBuf {
        self.out.join("posterior_std_by_mode.csv")
    }
    pub fn latent_pca_csv(&self) -> PathBuf {
        self.out.join("latent_pca.csv")
    }
}

fn data_spec(cfg: &RunConfig, role: &str) -> DataSpec {
    let (count, word) = match role {
        "train" => (cfg.train_samples, 0u64),
        _ => (cfg.test_samples, 1u64),
    };
    DataSpec {
        mesh_n: cfg.mesh_n,
        lengthscale: cfg.lengthscale,
        sigma_t: cfg.sigma_t,
        mean_log_t: cfg.mean_log_t,
        n_modes: cfg.n_modes,
        count,
        seed: derive_seed(cfg.seed, &[TAG_DATA, word]),
        noise_snr: cfg.noise_snr,
        role: role.into(),
    }
}

fn vae_fingerprint(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "arch": VaeArchSpec::from_arch(&cfg.vae_arch()?),
        "train": cfg.vae_train,
        "data": data_spec(cfg, "train"),
    }))
}

fn cnf_fingerprint(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "arch": CnfArchSpec::from_arch(&cfg.cnf_arch()?),
        "train": cfg.cnf_train,
        "latent_input": cfg.cnf_latent_input,
        "vae": vae_fingerprint(cfg)?,
    }))
}

fn chains_fingerprint(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "cnf": cnf_fingerprint(cfg)?,
        "sampler": {
            "chains": cfg.chains,
            "chain_length": cfg.chain_length,
            "gamma": cfg.gamma,
            "epsilon_std": cfg.epsilon_std,
            "archive_period": cfg.archive_period,
            "archive_init_size": cfg.archive_init_size,
            "burn_in": cfg.resolved_burn_in()?,
            "thin": cfg.thin,
            "proposal": cfg.proposal,
        },
        "test_observations": cfg.test_observations,
        "test_data": data_spec(cfg, "test"),
        "seed": cfg.seed,
    }))
}

/// Staged execution with in-process memoization of loaded artifacts.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub reports: Vec<StageReport>,
    mesh: Option<StructuredMesh>,
    basis: Option<KlBasis>,
    train: Option<Dataset>,
    test: Option<Dataset>,
    vae: Option<IVaeModel>,
    latents: Option<(Tensor, Tensor, Tensor)>,
    cnf: Option<FlowStack>,
    chains_done: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        let layout = Layout::new(&cfg.out_dir);
        Ok(Pipeline {
            layout,
            cfg,
            reports: Vec::new(),
            mesh: None,
            basis: None,
            train: None,
            test: None,
            vae: None,
            latents: None,
            cnf: None,
            chains_done: false,
        })
    }

    fn push_report(&mut self, name: &'static str, cached: bool, start: Instant) {
        let report = StageReport { name, cached, seconds: start.elapsed().as_secs_f64() };
        log_stage(&report);
        self.reports.push(report);
    }

    fn mesh(&mut self) -> Result<&StructuredMesh> {
        if self.mesh.is_none() {
            self.mesh = Some(StructuredMesh::new(self.cfg.mesh_n)?);
        }
        Ok(self.mesh.as_ref().unwrap())
    }

    /// KL basis of the log-transmissivity field, cached on disk because the
    /// eigendecomposition is the heaviest precomputation of the pipeline.
    pub fn ensure_basis(&mut self) -> Result<&KlBasis> {
        if self.basis.is_some() {
            return Ok(self.basis.as_ref().unwrap());
        }
        let start = Instant::now();
        let path = self.layout.klbasis();
        let cfg = self.cfg.clone();
        if path.exists() {
            if let Ok((basis, header)) = load_klbasis(&path) {
                if header.mesh_n == cfg.mesh_n
                    && header.lengthscale == cfg.lengthscale
                    && header.sigma_t == cfg.sigma_t
                    && header.mean_log_t == cfg.mean_log_t
                    && header.n_modes == cfg.n_modes
                {
                    self.basis = Some(basis);
                    self.push_report("kl-basis", true, start);
                    return Ok(self.basis.as_ref().unwrap());
                }
            }
        }
        let mesh = self.mesh()?.clone();
        let cov = build_covariance(&mesh.coordinates, cfg.lengthscale)?;
        let eig = eigendecompose_descending(&cov)?;
        let basis = truncate_basis(
            &eig,
            Truncation::ModeCount(cfg.n_modes),
            vec![cfg.mean_log_t; mesh.n_nodes()],
            cfg.sigma_t,
        )?;
        save_klbasis(&path, &basis, cfg.mesh_n, cfg.lengthscale, cfg.mean_log_t)?;
        self.basis = Some(basis);
        self.push_report("kl-basis", false, start);
        Ok(self.basis.as_ref().unwrap())
    }

    fn ensure_dataset(&mut self, role: &'static str) -> Result<&Dataset> {
        let slot_is_some = match role {
            "train" => self.train.is_some(),
            _ => self.test.is_some(),
        };
        if slot_is_some {
            return Ok(match role {
                "train" => self.train.as_ref().unwrap(),
                _ => self.test.as_ref().unwrap(),
            });
        }
        let start = Instant::now();
        let spec = data_spec(&self.cfg, role);
        let path = self.layout.dataset(role);
        let name: &'static str = if role == "train" { "generate-data(train)" } else { "generate-data(test)" };
        if let Some(ds) = load_dataset_if_matching(&path, &spec) {
            match role {
                "train" => self.train = Some(ds),
                _ => self.test = Some(ds),
            }
            self.push_report(name, true, start);
        } else {
            self.ensure_basis()?;
            let mesh = self.mesh()?.clone();
            let basis = self.basis.as_ref().unwrap();
            let ds = generate_dataset(basis, &mesh, &spec)?;
            save_dataset(&path, &ds)?;
            match role {
                "train" => self.train = Some(ds),
                _ => self.test = Some(ds),
            }
            self.push_report(name, false, start);
        }
        Ok(match role {
            "train" => self.train.as_ref().unwrap(),
            _ => self.test.as_ref().unwrap(),
        })
    }

    pub fn ensure_data(&mut self) -> Result<()> {
        self.ensure_dataset("train")?;
        self.ensure_dataset("test")?;
        Ok(())
    }

    pub fn ensure_vae(&mut self) -> Result<&IVaeModel> {
        if self.vae.is_some() {
            return Ok(self.vae.as_ref().unwrap());
        }
        let start = Instant::now();
        let fingerprint = vae_fingerprint(&self.cfg)?;
        let seed = derive_seed(self.cfg.seed, &[TAG_VAE]);
        let path = self.layout.ivae();
        if path.exists() {
            if let Ok((model, header)) = load_ivae(&path) {
                if header.trained_on == fingerprint && header.seed == seed {
                    self.vae = Some(model);
                    self.push_report("train-vae", true, start);
                    return Ok(self.vae.as_ref().unwrap());
                }
            }
        }
        self.ensure_dataset("train")?;
        let train = self.train.as_ref().unwrap();
        let arch = self.cfg.vae_arch()?;
        let cfg_train = self.cfg.vae_train.to_train_config(seed);
        let (model, report) = train_ivae(&train.x, &train.lambda, arch, &cfg_train)?;
        println!(
            "[stage train-vae] epochs {} best-val {:.6}",
            report.history.len(),
            report.best_val_loss
        );
        save_ivae(&path, &model, seed, fingerprint)?;
        self.vae = Some(model);
        self.push_report("train-vae", false, start);
        Ok(self.vae.as_ref().unwrap())
    }

    pub fn ensure_latents(&mut self) -> Result<&(Tensor, Tensor, Tensor)> {
        if self.latents.is_some() {
            return Ok(self.latents.as_ref().unwrap());
        }
        let start = Instant::now();
        let fingerprint = vae_fingerprint(&self.cfg)?;
        let path = self.layout.latents();
        if path.exists() {
            if let Ok((mu, logvar, lambda, header)) = load_latents(&path) {
                if header.encoded_with == fingerprint {
                    self.latents = Some((mu, logvar, lambda));
                    self.push_report("encode-dataset", true, start);
                    return Ok(self.latents.as_ref().unwrap());
                }
            }
        }
        self.ensure_vae()?;
        self.ensure_dataset("train")?;
        let model = self.vae.as_ref().unwrap();
        let train = self.train.as_ref().unwrap();
        let (mu, logvar) = encode_batch(model, &train.x)?;
        if !mu.is_finite() || !logvar.is_finite() {
            return Err(CliError::Core(neural_mcmc_core::Error::Evaluation(
                "encode-dataset produced non-finite latents".into(),
            )));
        }
        save_latents(&path, &mu, &logvar, &train.lambda, fingerprint)?;
        self.latents = Some((mu, logvar, train.lambda.clone()));
        self.push_report("encode-dataset", false, start);
        Ok(self.latents.as_ref().unwrap())
    }

    pub fn ensure_cnf(&mut self) -> Result<&FlowStack> {
        if self.cnf.is_some() {
            return Ok(self.cnf.as_ref().unwrap());
        }
        let start = Instant::now();
        let fingerprint = cnf_fingerprint(&self.cfg)?;
        let seed = derive_seed(self.cfg.seed, &[TAG_CNF]);
        let path = self.layout.cnf();
        if path.exists() {
            if let Ok((stack, header)) = load_cnf(&path) {
                if header.trained_on == fingerprint && header.seed == seed {
                    self.cnf = Some(stack);
                    self.push_report("train-cnf", true, start);
                    return Ok(self.cnf.as_ref().unwrap());
                }
            }
        }
        self.ensure_latents()?;
        let (mu, logvar, lambda) = self.latents.as_ref().unwrap();
        let arch = self.cfg.cnf_arch()?;
        let cfg_train = self.cfg.cnf_train.to_train_config(seed);
        let mode = self.cfg.latent_input()?;
        let (stack, report) = train_cnf(mu, logvar, lambda, arch, &cfg_train, mode)?;
        println!(
            "[stage train-cnf] epochs {} best-val {:.6}",
            report.history.len(),
            report.best_val_loss
        );
        save_cnf(&path, &stack, seed, &self.cfg.cnf_latent_input, fingerprint)?;
        self.cnf = Some(stack);
        self.push_report("train-cnf", false, start);
        Ok(self.cnf.as_ref().unwrap())
    }

    /// Runs `chains` chains for each of the first `test_observations` test
    /// rows; chains are parallel across (observation, chain) pairs and each
    /// draws its own stream from `(seed, observation, chain)`.
    pub fn ensure_chains(&mut self) -> Result<()> {
        if self.chains_done {
            return Ok(());
        }
        let start = Instant::now();
        let fingerprint = chains_fingerprint(&self.cfg)?;
        let manifest_path = self.layout.chains_manifest();
        if manifest_path.exists() {
            if let Ok(text) = std::fs::read_to_string(&manifest_path) {
                if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
                    if value.get("fingerprint") == Some(&fingerprint) && self.chain_files_exist() {
                        self.chains_done = true;
                        self.push_report("sample", true, start);
                        return Ok(());
                    }
                }
            }
        }
        self.ensure_vae()?;
        self.ensure_cnf()?;
        self.ensure_dataset("test")?;
        std::fs::create_dir_all(self.layout.chains_dir())?;
        let cfg = self.cfg.clone();
        let vae = self.vae.as_ref().unwrap();
        let cnf = self.cnf.as_ref().unwrap();
        let test = self.test.as_ref().unwrap();
        let prior = PriorSpec::StandardNormal { dim: cfg.n_modes };
        let burn_in = cfg.resolved_burn_in()?;

        let jobs: Vec<(usize, usize)> = (0..cfg.test_observations)
            .flat_map(|obs| (0..cfg.chains).map(move |c| (obs, c)))
            .collect();
        let threads = crate::worker_threads();
        let chains: Vec<Result<Chain>> = crate::parallel_map(jobs.len(), threads, |k| {
            let (obs, chain_id) = jobs[k];
            let chain_seed = derive_seed(cfg.seed, &[TAG_SAMPLE, obs as u64, chain_id as u64]);
            let sampler_cfg = cfg.sampler_config(chain_seed)?;
            let x = test.x.row(obs);
            Ok(run_chain(vae, cnf, &prior, x, &sampler_cfg)?)
        });

        let mut by_obs: Vec<Vec<Chain>> = (0..cfg.test_observations).map(|_| Vec::new()).collect();
        for (k, result) in chains.into_iter().enumerate() {
            let (obs, chain_id) = jobs[k];
            let chain = result.map_err(|e| {
                CliError::Config(format!("observation {obs} chain {chain_id}: {e}"))
            })?;
            write_chain_csv(&self.layout.chain_csv(obs, chain_id), &chain)?;
            by_obs[obs].push(chain);
        }
        for (obs, obs_chains) in by_obs.iter().enumerate() {
            let diag = observation_diagnostics(obs_chains, burn_in, cfg.thin)?;
            let text = serde_json::to_string_pretty(&diag)
                .map_err(|e| CliError::Format(format!("diagnostics encode: {e}")))?;
            std::fs::write(self.layout.chain_diagnostics(obs), text)?;
        }
        let manifest = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "fingerprint": fingerprint,
            "observations": cfg.test_observations,
            "chains": cfg.chains,
        });
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())?;
        self.chains_done = true;
        self.push_report("sample", false, start);
        Ok(())
    }

    fn chain_files_exist(&self) -> bool {
        (0..self.cfg.test_observations).all(|obs| {
            (0..self.cfg.chains).all(|c| self.layout.chain_csv(obs, c).exists())
                && self.layout.chain_diagnostics(obs).exists()
        })
    }

    /// Computes the summary and the figure-data exports from cached chains.
    pub fn diagnose(&mut self) -> Result<PipelineSummary> {
        self.ensure_chains()?;
        let start = Instant::now();
        let cfg = self.cfg.clone();
        self.ensure_basis()?;
        self.ensure_dataset("test")?;
        self.ensure_vae()?;
        self.ensure_cnf()?;
        let basis = self.basis.as_ref().unwrap();
        let test = self.test.as_ref().unwrap();
        let vae = self.vae.as_ref().unwrap();
        let cnf = self.cnf.as_ref().unwrap();
        let burn_in = cfg.resolved_burn_in()?;

        // posterior per observation from chain CSVs
        let mut r_hat_max = vec![0.0f64; cfg.n_modes];
        let mut acceptance = Vec::new();
        let mut rel_mean = Vec::new();
        let mut rel_map = Vec::new();
        let mut std_accum = vec![0.0f64; cfg.n_modes];
        let mut n_kept = 0usize;
        for obs in 0..cfg.test_observations {
            let mut chains = Vec::new();
            for c in 0..cfg.chains {
                chains.push(read_chain_csv(&self.layout.chain_csv(obs, c))?);
            }
            for chain in &chains {
                acceptance.push(chain.acceptance_rate);
            }
            for dim in 0..cfg.n_modes {
                let series: Vec<Vec<f64>> =
                    chains.iter().map(|c| c.parameter_series(dim, burn_in)).collect();
                let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
                let r = gelman_rubin(&refs)?;
                if r > r_hat_max[dim] {
                    r_hat_max[dim] = r;
                }
            }
            // pool chains after burn-in and thinning
            let mut states = Vec::new();
            let mut log_posts = Vec::new();
            for chain in &chains {
                let kept = burn_and_thin(chain, burn_in, cfg.thin)?;
                states.extend(kept.states);
                log_posts.extend(kept.log_posteriors);
            }
            n_kept = states.len();
            let summary = summarize(&states, &log_posts)?;
            for (acc, s) in std_accum.iter_mut().zip(summary.std.iter()) {
                *acc += s / cfg.test_observations as f64;
            }
            let lambda_true = test.lambda.row(obs);
            let (_, t_true) = sample_log_field(basis, lambda_true)?;
            let (_, t_mean) = sample_log_field(basis, &summary.mean)?;
            let (_, t_map) = sample_log_field(basis, &summary.map)?;
            rel_mean.push(relative_error(&t_true, &t_mean)?);
            rel_map.push(relative_error(&t_true, &t_map)?);
        }
        let converged = r_hat_max.iter().all(|&r| r < 1.01);

        // separation histogram data over held-out rows (one latent draw each,
        // incorrect labels by a fixed-point-free rotation of the test labels)
        let n_sep = test.x.rows.min(500);
        let mut rng = derive_stream(cfg.seed, &[TAG_SEPARATION]);
        let offset = 1 + (derive_seed(cfg.seed, &[TAG_SEPARATION, 1]) as usize) % (n_sep - 1);
        let mut correct_sum = 0.0;
        let mut permuted_sum = 0.0;
        {
            let file = std::fs::File::create(self.layout.separation_csv())?;
            let mut w = BufWriter::new(file);
            writeln!(w, "log_lik_correct,log_lik_permuted")?;
            for i in 0..n_sep {
                let latent = encode(vae, test.x.row(i))?;
                let h = latent.draw(&mut rng);
                let wrong = (i + offset) % n_sep;
                let lp_correct = log_prob(cnf, &h, test.lambda.row(i))?;
                let lp_permuted = log_prob(cnf, &h, test.lambda.row(wrong))?;
                correct_sum += lp_correct;
                permuted_sum += lp_permuted;
                writeln!(w, "{lp_correct},{lp_permuted}")?;
            }
            w.flush()?;
        }
        let separation = Separation {
            correct_mean_loglik: correct_sum / n_sep as f64,
            permuted_mean_loglik: permuted_sum / n_sep as f64,
            gap: (correct_sum - permuted_sum) / n_sep as f64,
        };

        // posterior spread by KL mode index
        {
            let file = std::fs::File::create(self.layout.posterior_std_csv())?;
            let mut w = BufWriter::new(file);
            writeln!(w, "mode_index,avg_posterior_std")?;
            for (i, s) in std_accum.iter().enumerate() {
                writeln!(w, "{i},{s}")?;
            }
            w.flush()?;
        }
        let mode_index: Vec<f64> = (0..cfg.n_modes).map(|i| i as f64).collect();
        let spearman_std_vs_mode = spearman(&mode_index, &std_accum)?;

        // latent PCA export for the test set
        {
            let (mu, _) = encode_batch(vae, &test.x)?;
            let comps = 3.min(vae.arch.n_h);
            let pca = pca_project(&mu, comps)?;
            let file = std::fs::File::create(self.layout.latent_pca_csv())?;
            let mut w = BufWriter::new(file);
            let mut header: Vec<String> = (1..=comps).map(|c| format!("pc{c}")).collect();
            for d in 0..3.min(cfg.n_modes) {
                header.push(format!("lambda_{d}"));
            }
            writeln!(w, "{}", header.join(","))?;
            for r in 0..mu.rows {
                let mut fields: Vec<String> =
                    (0..comps).map(|c| format!("{}", pca.coords.at(r, c))).collect();
                for d in 0..3.min(cfg.n_modes) {
                    fields.push(format!("{}", test.lambda.at(r, d)));
                }
                writeln!(w, "{}", fields.join(","))?;
            }
            w.flush()?;
        }

        let mut timing = std::collections::BTreeMap::new();
        for r in &self.reports {
            *timing.entry(r.name.to_string()).or_insert(0.0) += r.seconds;
        }
        timing.insert("diagnose".into(), start.elapsed().as_secs_f64());

        let summary = PipelineSummary {
            format_version: FORMAT_VERSION,
            seed: cfg.seed,
            mesh_n: cfg.mesh_n,
            n_modes: cfg.n_modes,
            n_h: cfg.vae_n_h,
            kl_captured_fraction: basis.captured_fraction,
            n_test_observations: cfg.test_observations,
            chains_per_observation: cfg.chains,
            n_kept_per_observation: n_kept,
            converged,
            r_hat: r_hat_max,
            acceptance_rate_mean: acceptance.iter().sum::<f64>() / acceptance.len() as f64,
            acceptance_rate_min: acceptance.iter().cloned().fold(f64::INFINITY, f64::min),
            acceptance_rate_max: acceptance.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            relative_error_mean: ErrorStats { median: median(&rel_mean)?, values: rel_mean },
            relative_error_map: ErrorStats { median: median(&rel_map)?, values: rel_map },
            separation,
            posterior_std_by_mode: std_accum,
            spearman_std_vs_mode,
            timing,
        };
        let text = serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::Format(format!("summary encode: {e}")))?;
        std::fs::write(self.layout.summary(), text)?;
        self.push_report("diagnose", false, start);
        Ok(summary)
    }

    /// All stages in order.
    pub fn run_all(&mut self) -> Result<PipelineSummary> {
        self.ensure_data()?;
        self.ensure_vae()?;
        self.ensure_latents()?;
        self.ensure_cnf()?;
        self.ensure_chains()?;
        self.diagnose()
    }
}

fn write_chain_csv(path: &Path, chain: &Chain) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let n_par = chain.n_par();
    let mut header = String::from("iter,accepted,log_post");
    for d in 0..n_par {
        header.push_str(&format!(",lambda_{d}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..chain.len() {
        let mut line = format!(
            "{},{},{}",
            i,
            if chain.accepted[i] { 1 } else { 0 },
            chain.log_posteriors[i]
        );
        for v in &chain.states[i] {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_chain_csv(path: &Path) -> Result<Chain> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Format(format!("{}: empty chain file", path.display())))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "iter" || cols[1] != "accepted" || cols[2] != "log_post" {
        return Err(CliError::Format(format!("{}: unexpected chain header", path.display())));
    }
    let n_par = cols.len() - 3;
    let mut states = Vec::new();
    let mut log_posteriors = Vec::new();
    let mut accepted = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + n_par {
            return Err(CliError::Format(format!("{}: ragged chain row", path.display())));
        }
        accepted.push(fields[1] == "1");
        log_posteriors.push(
            fields[2]
                .parse::<f64>()
                .map_err(|_| CliError::Format(format!("{}: bad log_post", path.display())))?,
        );
        let mut state = Vec::with_capacity(n_par);
        for f in &fields[3..] {
            state.push(
                f.parse::<f64>()
                    .map_err(|_| CliError::Format(format!("{}: bad state", path.display())))?,
            );
        }
        states.push(state);
    }
    let acceptance_rate =
        accepted.iter().filter(|&&a| a).count() as f64 / accepted.len().max(1) as f64;
    Ok(Chain { states, log_posteriors, accepted, acceptance_rate })
}

#[derive(Serialize)]
struct ObservationDiagnostics {
    acceptance_rate: Vec<f64>,
    r_hat: Vec<f64>,
    n_kept: usize,
}

fn observation_diagnostics(
    chains: &[Chain],
    burn_in: usize,
    thin: usize,
) -> Result<ObservationDiagnostics> {
    let n_par = chains[0].n_par();
    let mut r_hat = Vec::with_capacity(n_par);
    for dim in 0..n_par {
        let series: Vec<Vec<f64>> =
            chains.iter().map(|c| c.parameter_series(dim, burn_in)).collect();
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        r_hat.push(gelman_rubin(&refs)?);
    }
    let mut n_kept = 0;
    for chain in chains {
        n_kept += burn_and_thin(chain, burn_in, thin)?.states.len();
    }
    Ok(ObservationDiagnostics {
        acceptance_rate: chains.iter().map(|c| c.acceptance_rate).collect(),
        r_hat,
        n_kept,
    })
}
