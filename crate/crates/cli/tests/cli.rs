use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compdiff::config::ExperimentConfig;
use compdiff::provenance::read_provenance;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> String {
    repo().join("configs").join(name).display().to_string()
}

fn compdiff(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compdiff"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("COMPDIFF_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn verify(out_dir: &Path, artifact: &Path) {
    ok(&compdiff(out_dir, &["verify", artifact.to_str().unwrap()]));
}

#[test]
fn every_config_file_validates() {
    let mut n = 0;
    for entry in std::fs::read_dir(repo().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 6);
}

#[test]
fn schedule_dump_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    ok(&compdiff(dir.path(), &["schedule", "dump", "--config", &config("conjunction.toml")]));
    let csv = std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1002);
    let prov = read_provenance(dir.path().join("schedule.csv")).unwrap();
    assert!(prov.config.is_some());
    verify(dir.path(), &dir.path().join("schedule.csv"));

    ok(&compdiff(dir.path(), &["schedule", "dump", "--kind", "linear", "--steps", "10"]));
    assert_eq!(std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap().lines().count(), 12);
    assert_eq!(compdiff(dir.path(), &["schedule", "dump"]).status.code(), Some(1));
}

#[test]
fn composed_sample_records_terms() {
    let dir = tempfile::tempdir().unwrap();
    let out = compdiff(
        dir.path(),
        &["sample", "--config", &config("conjunction.toml"), "--compose", "c2:1.0,~c1:1.0", "--n", "64"],
    );
    ok(&out);
    let samples = dir.path().join("samples.csv");
    let text = std::fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().next(), Some("x1,x2"));
    assert_eq!(text.lines().count(), 65);
    let prov = read_provenance(&samples).unwrap();
    let terms: Vec<String> = serde_json::from_value(prov.details["terms"].clone()).unwrap();
    assert_eq!(terms, vec!["c2:1", "~c1:1"]);
    assert_eq!(prov.details["sample"]["n"], 64);
    verify(dir.path(), &samples);

    // a bad spec is a validation error and writes nothing
    let bad = compdiff(dir.path(), &["sample", "--config", &config("conjunction.toml"), "--compose", "~c1", "--name", "x"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!dir.path().join("x.csv").exists());
    let bad = compdiff(dir.path(), &["sample", "--config", &config("conjunction.toml"), "--compose", "c9", "--name", "x"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn oracle_check_passes_on_analytic_configs() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let out = compdiff(dir.path(), &["oracle-check", "--config", &config("conjunction.toml")]);
    ok(&out);
    assert!(start.elapsed().as_secs() < 60);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("PASS"));
    assert!(!table.contains("FAIL"), "{table}");
    assert!(table.contains("analytic vs grid oracle"));
    assert!(table.contains("network (untrained)"));
    verify(dir.path(), &dir.path().join("oracle_check.txt"));

    // trained configs have no closed form to check against
    let out = compdiff(dir.path(), &["oracle-check", "--config", &config("blobs.toml")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn plot_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("empty.csv", ""), ("header.csv", "x1,x2\n")] {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        let out = compdiff(dir.path(), &["plot", "--samples", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(1), "{name}");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
        assert!(!dir.path().join("plot.svg").exists());
    }
    let out = compdiff(dir.path(), &["plot", "--samples", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_and_output_dir_override() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(compdiff(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "[schedule]\nkind = \"cosine\"\nT = 0\n").unwrap();
    assert_eq!(compdiff(dir.path(), &["data", "gen", "--config", broken.to_str().unwrap()]).status.code(), Some(1));

    let env_out = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_compdiff"))
        .args(["schedule", "dump", "--steps", "5"])
        .env("COMPDIFF_OUT", &env_out)
        .output()
        .unwrap();
    ok(&out);
    assert!(env_out.join("schedule.csv").exists());
    assert!(env_out.join("schedule.csv.prov.json").exists());
}

#[test]
fn points_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config("points_train.toml");
    ok(&compdiff(d, &["data", "gen", "--config", &cfg, "--count", "500"]));
    let data = d.join("dataset.csv");
    ok(&compdiff(d, &["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--steps", "60"]));
    assert!(d.join("checkpoint.json").exists());
    assert_eq!(std::fs::read_to_string(d.join("loss.csv")).unwrap().lines().count(), 61);
    ok(&compdiff(d, &["sample", "--config", &cfg, "--n", "40"]));
    ok(&compdiff(d, &["sample", "--config", &cfg, "--n", "40", "--seed", "2", "--name", "ref"]));
    let samples = d.join("samples.csv");
    let reference = d.join("ref.csv");
    ok(&compdiff(
        d,
        &["eval", "--config", &cfg, "--samples", samples.to_str().unwrap(), "--reference", reference.to_str().unwrap()],
    ));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"], 40);
    assert!(metrics["energy_distance"].is_number());
    ok(&compdiff(d, &["plot", "--samples", samples.to_str().unwrap()]));
    assert!(std::fs::read_to_string(d.join("plot.svg")).unwrap().starts_with("<svg"));

    let prov = read_provenance(d.join("checkpoint.json")).unwrap();
    assert_eq!(prov.inputs.len(), 1);
    for artifact in ["dataset.csv", "checkpoint.json", "loss.csv", "samples.csv", "metrics.json", "plot.svg"] {
        verify(d, &d.join(artifact));
    }

    // a tampered artifact fails verification
    std::fs::write(d.join("loss.csv"), "step,loss\n").unwrap();
    assert_eq!(compdiff(d, &["verify", d.join("loss.csv").to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn blob_data_and_raster_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config("blobs.toml");
    ok(&compdiff(d, &["data", "gen", "--config", &cfg, "--count", "20"]));
    let bytes = std::fs::read(d.join("dataset.blobs")).unwrap();
    assert!(bytes.starts_with(b"CDBLOBS1"));
    verify(d, &d.join("dataset.blobs"));

    let examples = compdiff::data::load_dataset(d.join("dataset.blobs")).unwrap();
    let mut x = ndarray::Array2::zeros((examples.len(), 64));
    for (i, e) in examples.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&e.x0));
    }
    let csv = d.join("scenes.csv");
    std::fs::write(&csv, compdiff::sample::samples_to_csv(x.view())).unwrap();
    ok(&compdiff(d, &["plot", "--samples", csv.to_str().unwrap(), "--config", &cfg, "--name", "scenes"]));
    let svg = std::fs::read_to_string(d.join("scenes.svg")).unwrap();
    assert_eq!(svg.matches("<rect x=").count(), 20 * 64);
    // 64 columns are not a 2-D scatter
    assert_eq!(compdiff(d, &["plot", "--samples", csv.to_str().unwrap()]).status.code(), Some(1));
}
