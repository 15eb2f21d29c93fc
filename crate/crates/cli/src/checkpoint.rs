//! Binary artifact formats: a one-line JSON header followed by little-endian
//! f64 arrays concatenated in parameter-declaration order. Loaders validate
//! the format version and every tensor shape before touching any data.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use neural_mcmc_core::cnf::{CnfArch, FlowStack};
use neural_mcmc_core::field::KlBasis;
use neural_mcmc_core::nn::{Activation, Parameterized};
use neural_mcmc_core::tensor::Tensor;
use neural_mcmc_core::vae::{IVaeModel, Standardizer, VaeArch};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::read_f64_block;
use crate::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

fn write_artifact<H: Serialize>(path: &Path, header: &H, arrays: &[&[f64]]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)
        .map_err(|e| CliError::Format(format!("header encode: {e}")))?;
    w.write_all(b"\n")?;
    for arr in arrays {
        for &v in *arr {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_artifact_header<H: DeserializeOwned>(r: &mut impl Read) -> Result<H> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(CliError::Format("unexpected end of file in header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(CliError::Format("header line exceeds 1 MiB".into()));
        }
    }
    serde_json::from_slice(&line).map_err(|e| CliError::Format(format!("header decode: {e}")))
}

fn expect_no_trailing(r: &mut impl Read) -> Result<()> {
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CliError::Format("trailing bytes after arrays".into()));
    }
    Ok(())
}

fn check_version_kind(version: u32, kind: &str, expected_kind: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(CliError::Format(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION}); refusing to load"
        )));
    }
    if kind != expected_kind {
        return Err(CliError::Format(format!(
            "expected '{expected_kind}' artifact, found '{kind}'"
        )));
    }
    Ok(())
}

/// Shape-and-activation spec of one parameter tensor, stored in headers and
/// validated against the rebuilt model on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub rows: usize,
    pub cols: usize,
}

fn tensor_specs<M: Parameterized>(model: &M) -> Vec<TensorSpec> {
    model
        .params()
        .iter()
        .map(|t| TensorSpec { rows: t.rows, cols: t.cols })
        .collect()
}

fn load_params_into<M: Parameterized>(
    model: &mut M,
    specs: &[TensorSpec],
    r: &mut impl Read,
) -> Result<()> {
    let expected = tensor_specs(model);
    if expected != specs {
        return Err(CliError::Format(
            "checkpoint tensor shapes do not match the declared architecture".into(),
        ));
    }
    let mut loaded: Vec<Tensor> = Vec::with_capacity(specs.len());
    for spec in specs {
        let data = read_f64_block(r, spec.rows * spec.cols)?;
        loaded.push(Tensor { rows: spec.rows, cols: spec.cols, data });
    }
    for (slot, tensor) in model.params_mut().into_iter().zip(loaded.into_iter()) {
        *slot = tensor;
    }
    Ok(())
}

/// Serializable mirror of the VAE architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArchSpec {
    pub n_x: usize,
    pub n_h: usize,
    pub n_par: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub predictor_widths: Vec<usize>,
    pub activation: String,
    pub dropout: f64,
    pub beta_kl: f64,
    pub beta_pred: f64,
    pub sigma_x: f64,
}

impl VaeArchSpec {
    pub fn from_arch(a: &VaeArch) -> Self {
        VaeArchSpec {
            n_x: a.n_x,
            n_h: a.n_h,
            n_par: a.n_par,
            encoder_widths: a.encoder_widths.clone(),
            decoder_widths: a.decoder_widths.clone(),
            predictor_widths: a.predictor_widths.clone(),
            activation: a.activation.tag().into(),
            dropout: a.dropout,
            beta_kl: a.beta_kl,
            beta_pred: a.beta_pred,
            sigma_x: a.sigma_x,
        }
    }

    pub fn to_arch(&self) -> Result<VaeArch> {
        Ok(VaeArch {
            n_x: self.n_x,
            n_h: self.n_h,
            n_par: self.n_par,
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            predictor_widths: self.predictor_widths.clone(),
            activation: Activation::from_tag(&self.activation)?,
            dropout: self.dropout,
            beta_kl: self.beta_kl,
            beta_pred: self.beta_pred,
            sigma_x: self.sigma_x,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvaeHeader {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub arch: VaeArchSpec,
    pub standardizer_mean: Vec<f64>,
    pub standardizer_std: Vec<f64>,
    pub layers: Vec<TensorSpec>,
    /// Provenance: the spec of the dataset the model was trained on.
    pub trained_on: serde_json::Value,
}

pub fn save_ivae(
    path: &Path,
    model: &IVaeModel,
    seed: u64,
    trained_on: serde_json::Value,
) -> Result<()> {
    let header = IvaeHeader {
        format_version: FORMAT_VERSION,
        kind: "ivae".into(),
        seed,
        arch: VaeArchSpec::from_arch(&model.arch),
        standardizer_mean: model.standardizer.mean.clone(),
        standardizer_std: model.standardizer.std.clone(),
        layers: tensor_specs(model),
        trained_on,
    };
    let params = model.params();
    let arrays: Vec<&[f64]> = params.iter().map(|t| t.data.as_slice()).collect();
    write_artifact(path, &header, &arrays)
}

pub fn load_ivae(path: &Path) -> Result<(IVaeModel, IvaeHeader)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header: IvaeHeader = read_artifact_header(&mut r)?;
    check_version_kind(header.format_version, &header.kind, "ivae")?;
    let arch = header.arch.to_arch()?;
    let mut model = IVaeModel::init(arch, header.seed)?;
    if header.standardizer_mean.len() != model.arch.n_x
        || header.standardizer_std.len() != model.arch.n_x
    {
        return Err(CliError::Format("standardizer length mismatch".into()));
    }
    model.standardizer = Standardizer {
        mean: header.standardizer_mean.clone(),
        std: header.standardizer_std.clone(),
    };
    load_params_into(&mut model, &header.layers, &mut r)?;
    expect_no_trailing(&mut r)?;
    Ok((model, header))
}

/// Serializable mirror of the flow architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnfArchSpec {
    pub n_h: usize,
    pub n_par: usize,
    pub n_flows: usize,
    pub conditioner_widths: Vec<usize>,
    pub embed_width: usize,
    pub hidden_width: usize,
    pub activation: String,
    pub dropout: f64,
}

impl CnfArchSpec {
    pub fn from_arch(a: &CnfArch) -> Self {
        CnfArchSpec {
            n_h: a.n_h,
            n_par: a.n_par,
            n_flows: a.n_flows,
            conditioner_widths: a.conditioner_widths.clone(),
            embed_width: a.embed_width,
            hidden_width: a.hidden_width,
            activation: a.activation.tag().into(),
            dropout: a.dropout,
        }
    }

    pub fn to_arch(&self) -> Result<CnfArch> {
        Ok(CnfArch {
            n_h: self.n_h,
            n_par: self.n_par,
            n_flows: self.n_flows,
            conditioner_widths: self.conditioner_widths.clone(),
            embed_width: self.embed_width,
            hidden_width: self.hidden_width,
            activation: Activation::from_tag(&self.activation)?,
            dropout: self.dropout,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnfHeader {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub arch: CnfArchSpec,
    /// Frozen-subset layout: even indices in even layers (0-based), odd
    /// otherwise.
    pub mask_layout: String,
    pub latent_input: String,
    pub layers: Vec<TensorSpec>,
    pub trained_on: serde_json::Value,
}

pub fn save_cnf(
    path: &Path,
    stack: &FlowStack,
    seed: u64,
    latent_input: &str,
    trained_on: serde_json::Value,
) -> Result<()> {
    let header = CnfHeader {
        format_version: FORMAT_VERSION,
        kind: "cnf".into(),
        seed,
        arch: CnfArchSpec::from_arch(&stack.arch),
        mask_layout: "alternating-even-frozen-first".into(),
        latent_input: latent_input.into(),
        layers: tensor_specs(stack),
        trained_on,
    };
    let params = stack.params();
    let arrays: Vec<&[f64]> = params.iter().map(|t| t.data.as_slice()).collect();
    write_artifact(path, &header, &arrays)
}

pub fn load_cnf(path: &Path) -> Result<(FlowStack, CnfHeader)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header: CnfHeader = read_artifact_header(&mut r)?;
    check_version_kind(header.format_version, &header.kind, "cnf")?;
    let arch = header.arch.to_arch()?;
    let mut stack = FlowStack::init(arch, header.seed)?;
    load_params_into(&mut stack, &header.layers, &mut r)?;
    expect_no_trailing(&mut r)?;
    Ok((stack, header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlBasisHeader {
    pub format_version: u32,
    pub kind: String,
    pub mesh_n: usize,
    pub lengthscale: f64,
    pub sigma_t: f64,
    pub mean_log_t: f64,
    pub n_modes: usize,
    pub n_nodes: usize,
    pub captured_fraction: f64,
}

pub fn save_klbasis(path: &Path, basis: &KlBasis, mesh_n: usize, lengthscale: f64, mean_log_t: f64) -> Result<()> {
    let header = KlBasisHeader {
        format_version: FORMAT_VERSION,
        kind: "klbasis".into(),
        mesh_n,
        lengthscale,
        sigma_t: basis.marginal_std,
        mean_log_t,
        n_modes: basis.n_modes(),
        n_nodes: basis.n_nodes(),
        captured_fraction: basis.captured_fraction,
    };
    write_artifact(
        path,
        &header,
        &[&basis.mean, &basis.eigenvalues, &basis.modes.data],
    )
}

pub fn load_klbasis(path: &Path) -> Result<(KlBasis, KlBasisHeader)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header: KlBasisHeader = read_artifact_header(&mut r)?;
    check_version_kind(header.format_version, &header.kind, "klbasis")?;
    let mean = read_f64_block(&mut r, header.n_nodes)?;
    let eigenvalues = read_f64_block(&mut r, header.n_modes)?;
    let modes = read_f64_block(&mut r, header.n_nodes * header.n_modes)?;
    expect_no_trailing(&mut r)?;
    let basis = KlBasis {
        modes: Tensor { rows: header.n_nodes, cols: header.n_modes, data: modes },
        eigenvalues,
        mean,
        marginal_std: header.sigma_t,
        captured_fraction: header.captured_fraction,
    };
    Ok((basis, header))
}

/// Cached per-row encoder outputs for the flow-training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentsHeader {
    pub format_version: u32,
    pub kind: String,
    pub count: usize,
    pub n_h: usize,
    pub n_par: usize,
    pub encoded_with: serde_json::Value,
}

pub fn save_latents(
    path: &Path,
    mu: &Tensor,
    logvar: &Tensor,
    lambda: &Tensor,
    encoded_with: serde_json::Value,
) -> Result<()> {
    let header = LatentsHeader {
        format_version: FORMAT_VERSION,
        kind: "latents".into(),
        count: mu.rows,
        n_h: mu.cols,
        n_par: lambda.cols,
        encoded_with,
    };
    write_artifact(path, &header, &[&mu.data, &logvar.data, &lambda.data])
}

pub fn load_latents(path: &Path) -> Result<(Tensor, Tensor, Tensor, LatentsHeader)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header: LatentsHeader = read_artifact_header(&mut r)?;
    check_version_kind(header.format_version, &header.kind, "latents")?;
    let mu = read_f64_block(&mut r, header.count * header.n_h)?;
    let logvar = read_f64_block(&mut r, header.count * header.n_h)?;
    let lambda = read_f64_block(&mut r, header.count * header.n_par)?;
    expect_no_trailing(&mut r)?;
    Ok((
        Tensor { rows: header.count, cols: header.n_h, data: mu },
        Tensor { rows: header.count, cols: header.n_h, data: logvar },
        Tensor { rows: header.count, cols: header.n_par, data: lambda },
        header,
    ))
}
