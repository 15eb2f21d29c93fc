//! Black-box tests of the `neural-mcmc` binary: subcommands, flag handling,
//! and exit codes (0 success, 2 config error, 3 convergence/evaluation error).

use std::path::Path;
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neural-mcmc"))
}

fn write_smoke_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.conf");
    let text = format!(
        "mesh.n = 11\n\
         field.n_modes = 4\n\
         io.train_samples = 60\n\
         io.test_samples = 20\n\
         io.out_dir = {}\n\
         vae.n_h = 4\n\
         vae.encoder_widths = 16,8\n\
         vae.decoder_widths = 8,16\n\
         vae.predictor_widths = 8\n\
         vae.max_epochs = 3\n\
         vae.patience = 3\n\
         cnf.n_flows = 2\n\
         cnf.conditioner_widths = 8\n\
         cnf.embed_width = 8\n\
         cnf.hidden_width = 8\n\
         cnf.max_epochs = 3\n\
         cnf.patience = 3\n\
         sampler.chain_length = 200\n\
         sampler.test_observations = 2\n\
         {extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_subcommand_succeeds_and_logs_stages() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path(), "");
    let out = binary()
        .args(["pipeline", "--config"])
        .arg(&config)
        .args(["--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[stage train-vae]"), "{stdout}");
    assert!(stdout.contains("pipeline complete"), "{stdout}");

    // second invocation hits the caches
    let out2 = binary()
        .args(["pipeline", "--config"])
        .arg(&config)
        .args(["--seed", "3"])
        .output()
        .unwrap();
    assert!(out2.status.success());
    let stdout2 = String::from_utf8_lossy(&out2.stdout);
    assert!(stdout2.contains("[stage train-cnf] cached"), "{stdout2}");
    assert!(stdout2.contains("[stage sample] cached"), "{stdout2}");
}

#[test]
fn stages_can_run_individually() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path(), "");
    for sub in ["generate-data", "train-vae", "train-cnf", "sample", "diagnose"] {
        let out = binary().arg(sub).arg("--config").arg(&config).output().unwrap();
        assert!(
            out.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(dir.path().join("out/summary.json").exists());
}

#[test]
fn missing_config_file_exits_2() {
    let out = binary()
        .args(["pipeline", "--config", "/nonexistent/nowhere.conf"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "mesh.n = 12\n").unwrap();
    let out = binary().args(["generate-data", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sensor"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "sampler.walkers = 8\n").unwrap();
    let out = binary().args(["sample", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path(), "");
    let alt = dir.path().join("alt_out");
    let out = binary()
        .args(["generate-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&alt)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(alt.join("dataset_train.bin").exists());
}
