use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pacloud::io;
use pacloud::model::SignalSet;

/// Desk config shrunk so a reconstruction takes a few seconds.
fn small_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    let text = text
        .replace("n_points = 4000", "n_points = 1500")
        .replace("max_iters = 300", "max_iters = 120")
        .replace("duplication_period = 100", "duplication_period = 40")
        .replace("coarse_period = 100", "coarse_period = 40")
        .replace("output_dir = \"../out/desk\"", "output_dir = \"out\"");
    let p = dir.join("small.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn pacloud(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacloud"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

#[test]
fn bad_key_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "[init]\nn_pionts = 10\n").unwrap();
    let out = pacloud(&p, &["phantom"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("init.n_pionts"), "{err}");
}

#[test]
fn missing_signals_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(pacloud(&cfg, &["phantom"]));
    let out = pacloud(&cfg, &["reconstruct"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn identical_volumes_have_zero_mse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(pacloud(&cfg, &["phantom"]));
    let truth = tmp.path().join("out/truth.pavx");
    let truth = truth.to_str().unwrap();
    let text = ok(pacloud(&cfg, &["metrics", "--volume", truth, "--reference", truth]));
    assert_eq!(metric(&text, "mse"), 0.0);
    assert_eq!(metric(&text, "ssim"), 1.0);
    assert!(text.contains("psnr=inf"), "{text}");
    let json = std::fs::read_to_string(tmp.path().join("out/metrics.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["psnr"], "inf");
    assert!(tmp.path().join("out/metrics.manifest.json").exists());
}

#[test]
fn silent_data_reports_no_evidence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(pacloud(&cfg, &["phantom"]));
    ok(pacloud(&cfg, &["simulate"]));
    let sig = tmp.path().join("out/signals.pasg");
    let s = io::read_signals(&sig).unwrap();
    io::write_signals(&sig, &SignalSet::zeros(s.grid, s.n_sensors)).unwrap();

    let text = ok(pacloud(&cfg, &["filter"]));
    assert!(text.contains("no evidence"), "{text}");
    assert!(io::read_cloud(&tmp.path().join("out/filtered.pcbg"))
        .unwrap()
        .is_empty());

    let out = pacloud(&cfg, &["reconstruct"]);
    assert_eq!(out.status.code(), Some(8));
}

#[test]
fn pipeline_beats_back_projection() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    ok(pacloud(&cfg, &["phantom"]));
    ok(pacloud(&cfg, &["simulate"]));
    ok(pacloud(&cfg, &["reconstruct"]));
    ok(pacloud(&cfg, &["ubp"]));
    for f in [
        "recon.pcbg",
        "recon.pavx",
        "trace.csv",
        "ubp.pavx",
        "reconstruct.manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let truth = out.join("truth.pavx");
    let truth = truth.to_str().unwrap();
    let score = |v: &str| {
        let v = out.join(v);
        let text = ok(pacloud(
            &cfg,
            &[
                "metrics",
                "--volume",
                v.to_str().unwrap(),
                "--reference",
                truth,
                "--cnr",
            ],
        ));
        metric(&text, "psnr")
    };
    let (recon, ubp) = (score("recon.pavx"), score("ubp.pavx"));
    assert!(recon > ubp, "recon {recon} dB vs ubp {ubp} dB");

    // Re-rendering the written cloud reproduces the written volume up to the
    // f32 rounding of the stored cloud.
    let cloud = out.join("recon.pcbg");
    let again = out.join("again.pavx");
    ok(pacloud(
        &cfg,
        &[
            "voxelize",
            "--cloud",
            cloud.to_str().unwrap(),
            "--output",
            again.to_str().unwrap(),
        ],
    ));
    let (a, b) = (
        io::read_volume(&again).unwrap(),
        io::read_volume(&out.join("recon.pavx")).unwrap(),
    );
    assert!(a.same_shape(&b));
    let peak = b.max_value();
    let worst = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-4 * peak, "{worst} vs peak {peak}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reconstruct.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "reconstruct");
    assert_eq!(manifest["deterministic"], true);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}
