//! Dataset generation through the Darcy forward model, optional observation
//! noise, and the binary dataset file format (JSON header line followed by
//! little-endian f64 records, `x` then `lambda` per record).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use neural_mcmc_core::darcy::{observe, solve_darcy, StructuredMesh, DEFAULT_CG_TOL, N_SENSORS};
use neural_mcmc_core::field::{sample_log_field, KlBasis};
use neural_mcmc_core::rng::{derive_stream, fill_standard_normal, standard_normal, Stream};
use neural_mcmc_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::FORMAT_VERSION;
use crate::{CliError, Result};

/// Identity of a generated dataset; stored in the file header and compared
/// for cache hits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub mesh_n: usize,
    pub lengthscale: f64,
    pub sigma_t: f64,
    pub mean_log_t: f64,
    pub n_modes: usize,
    pub count: usize,
    pub seed: u64,
    /// 0 means noiseless observations.
    pub noise_snr: f64,
    pub role: String,
}

/// Observation/label pairs plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub lambda: Tensor,
    pub spec: DataSpec,
}

/// One forward sweep: KL coefficients -> transmissivity field -> heads ->
/// sensor readings.
pub fn simulate_observation(
    basis: &KlBasis,
    mesh: &StructuredMesh,
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let (_, t) = sample_log_field(basis, lambda)?;
    let sol = solve_darcy(mesh, &t, DEFAULT_CG_TOL)?;
    Ok(observe(&sol, mesh)?)
}

/// Generates `spec.count` samples with `lambda_i ~ N(0, I)`. Each sample's
/// coefficients come from a stream derived from `(seed, role, index)`, so the
/// result is identical no matter how many worker threads run.
pub fn generate_dataset(basis: &KlBasis, mesh: &StructuredMesh, spec: &DataSpec) -> Result<Dataset> {
    let n_modes = basis.n_modes();
    if n_modes != spec.n_modes {
        return Err(CliError::Config(format!(
            "generate_dataset: basis has {n_modes} modes, spec wants {}",
            spec.n_modes
        )));
    }
    let count = spec.count;
    let mut x = Tensor::zeros(count, N_SENSORS);
    let mut lambda = Tensor::zeros(count, n_modes);
    let role_tag = role_word(&spec.role);

    let threads = crate::worker_threads().min(count.max(1));
    if threads <= 1 || count < 2 {
        let mut coeff = vec![0.0; n_modes];
        for i in 0..count {
            let mut rng = derive_stream(spec.seed, &[role_tag, i as u64]);
            fill_standard_normal(&mut rng, &mut coeff);
            let obs =
                simulate_observation(basis, mesh, &coeff).map_err(|e| with_sample_index(e, i))?;
            x.data[i * N_SENSORS..(i + 1) * N_SENSORS].copy_from_slice(&obs);
            lambda.data[i * n_modes..(i + 1) * n_modes].copy_from_slice(&coeff);
        }
    } else {
        let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = crate::parallel_map(count, threads, |i| {
            let mut rng = derive_stream(spec.seed, &[role_tag, i as u64]);
            let mut coeff = vec![0.0; n_modes];
            fill_standard_normal(&mut rng, &mut coeff);
            let obs = simulate_observation(basis, mesh, &coeff)?;
            Ok((obs, coeff))
        });
        for (i, r) in results.into_iter().enumerate() {
            let (obs, coeff) = r.map_err(|e| with_sample_index(e, i))?;
            x.data[i * N_SENSORS..(i + 1) * N_SENSORS].copy_from_slice(&obs);
            lambda.data[i * n_modes..(i + 1) * n_modes].copy_from_slice(&coeff);
        }
    }

    let mut ds = Dataset { x, lambda, spec: clean_spec(spec, 0.0) };
    if spec.noise_snr > 0.0 {
        let mut rng = derive_stream(spec.seed, &[role_tag, u64::MAX]);
        ds = add_noise(&ds, spec.noise_snr, &mut rng)?;
    }
    Ok(ds)
}

fn clean_spec(spec: &DataSpec, noise: f64) -> DataSpec {
    DataSpec { noise_snr: noise, ..spec.clone() }
}

/// Prefixes the failing sample index while keeping the error class (and thus
/// the exit code) intact.
fn with_sample_index(e: CliError, i: usize) -> CliError {
    use neural_mcmc_core::Error as CoreError;
    match e {
        CliError::Core(CoreError::Convergence(m)) => {
            CliError::Core(CoreError::Convergence(format!("sample {i}: {m}")))
        }
        CliError::Core(CoreError::Evaluation(m)) => {
            CliError::Core(CoreError::Evaluation(format!("sample {i}: {m}")))
        }
        CliError::Core(CoreError::Contract(m)) => {
            CliError::Core(CoreError::Contract(format!("sample {i}: {m}")))
        }
        CliError::Core(CoreError::Shape(m)) => {
            CliError::Core(CoreError::Shape(format!("sample {i}: {m}")))
        }
        CliError::Config(m) => CliError::Config(format!("sample {i}: {m}")),
        CliError::Format(m) => CliError::Format(format!("sample {i}: {m}")),
    }
}

fn role_word(role: &str) -> u64 {
    match role {
        "train" => 0x7472,
        "test" => 0x7465,
        _ => 0x6f74,
    }
}

/// Adds per-channel Gaussian noise with `sigma = RMS(channel) / snr`;
/// all-zero channels stay untouched.
pub fn add_noise(dataset: &Dataset, snr: f64, rng: &mut Stream) -> Result<Dataset> {
    if !(snr > 0.0) {
        return Err(CliError::Config(format!("add_noise: snr must be positive, got {snr}")));
    }
    let rows = dataset.x.rows;
    let cols = dataset.x.cols;
    let mut rms = vec![0.0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = dataset.x.at(r, c);
            rms[c] += v * v;
        }
    }
    for v in rms.iter_mut() {
        *v = (*v / rows as f64).sqrt();
    }
    let mut x = dataset.x.clone();
    for r in 0..rows {
        for c in 0..cols {
            if rms[c] > 0.0 {
                x.data[r * cols + c] += rms[c] / snr * standard_normal(rng);
            }
        }
    }
    Ok(Dataset { x, lambda: dataset.lambda.clone(), spec: clean_spec(&dataset.spec, snr) })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    kind: String,
    n_x: usize,
    n_par: usize,
    spec: DataSpec,
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        kind: "dataset".into(),
        n_x: dataset.x.cols,
        n_par: dataset.lambda.cols,
        spec: dataset.spec.clone(),
    };
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| CliError::Format(format!("header encode: {e}")))?;
    w.write_all(b"\n")?;
    for i in 0..dataset.x.rows {
        for &v in dataset.x.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in dataset.lambda.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header_line(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(CliError::Format("unexpected end of file in header".into()));
        }
        if byte[0] == b'\n' {
            return Ok(line);
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(CliError::Format("header line exceeds 1 MiB".into()));
        }
    }
}

pub(crate) fn read_f64_block(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| CliError::Format(format!("truncated f64 block: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header_bytes = read_header_line(&mut r)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CliError::Format(format!("header decode: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::Format(format!(
            "dataset format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.kind != "dataset" {
        return Err(CliError::Format(format!("expected dataset file, found '{}'", header.kind)));
    }
    let count = header.spec.count;
    let mut x = Tensor::zeros(count, header.n_x);
    let mut lambda = Tensor::zeros(count, header.n_par);
    for i in 0..count {
        let xrow = read_f64_block(&mut r, header.n_x)?;
        x.data[i * header.n_x..(i + 1) * header.n_x].copy_from_slice(&xrow);
        let lrow = read_f64_block(&mut r, header.n_par)?;
        lambda.data[i * header.n_par..(i + 1) * header.n_par].copy_from_slice(&lrow);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CliError::Format("trailing bytes after dataset records".into()));
    }
    Ok(Dataset { x, lambda, spec: header.spec })
}

/// Loads a dataset only when its header spec matches the expectation.
pub fn load_dataset_if_matching(path: &Path, expected: &DataSpec) -> Option<Dataset> {
    if !path.exists() {
        return None;
    }
    match load_dataset(path) {
        Ok(ds) if &ds.spec == expected => Some(ds),
        _ => None,
    }
}
