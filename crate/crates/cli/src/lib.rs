//! Orchestration layer for the inversion toolkit: run configuration, dataset
//! generation with the groundwater forward model, binary artifact formats,
//! posterior diagnostics, and the staged pipeline behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod stages;

use std::fmt;

/// Errors at the pipeline level, mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, usage, or file-system problem (exit code 2).
    Config(String),
    /// Malformed or incompatible artifact file (exit code 2).
    Format(String),
    /// Numerical failure surfaced by the core (exit code 3 for
    /// convergence/evaluation errors, 2 otherwise).
    Core(neural_mcmc_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Format(msg) => write!(f, "format error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<neural_mcmc_core::Error> for CliError {
    fn from(e: neural_mcmc_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("io: {e}"))
    }
}

impl CliError {
    /// 2 for configuration problems, 3 for convergence/evaluation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Format(_) => 2,
            CliError::Core(e) => match e {
                neural_mcmc_core::Error::Convergence(_)
                | neural_mcmc_core::Error::Evaluation(_) => 3,
                _ => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Worker-thread cap: `NEURAL_MCMC_THREADS` when set, otherwise the available
/// parallelism.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("NEURAL_MCMC_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `f(0..count)` on up to `threads` scoped workers, preserving index
/// order in the output.
pub(crate) fn parallel_map<T: Send>(
    count: usize,
    threads: usize,
    f: impl Fn(usize) -> T + Sync,
) -> Vec<T> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    if threads <= 1 || count < 2 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(count) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let value = f(i);
                results.lock().unwrap()[i] = Some(value);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|v| v.expect("worker filled every slot"))
        .collect()
}
