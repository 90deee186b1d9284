use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[camera]
views = 2
width = 16
height = 16

[diffusion]
steps = 8
"#;

fn splatforge(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_splatforge"));
    cmd.args(args).env_remove("SPLATFORGE_THREADS");
    if let Some(t) = threads {
        cmd.env("SPLATFORGE_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn generate_succeeds_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("gen");
    let res = splatforge(
        &[
            "generate",
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
            "--prompt",
            "forest",
        ],
        Some("1"),
    );
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["details"]["primitives"], 2 * 16 * 16);
    for f in manifest["outputs"].as_array().unwrap() {
        assert!(out.join(f["path"].as_str().unwrap()).exists());
    }
}

#[test]
fn invalid_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let bad_key = write_config(dir.path(), "bad_key.toml", "[camera]\nzoom = 2\n");
    let bad_value = write_config(dir.path(), "bad_value.toml", "[camera]\nviews = 0\n");
    let small = write_config(dir.path(), "small.toml", SMALL);
    let cases: Vec<(Vec<&str>, Option<&str>)> = vec![
        (vec!["generate", "--config", &bad_key, "--out", out], None),
        (vec!["generate", "--config", &bad_value, "--out", out], None),
        (
            vec![
                "generate",
                "--config",
                &small,
                "--out",
                out,
                "--prompt",
                "no-such-label",
            ],
            None,
        ),
        (vec!["reconstruct", "--config", &small, "--out", out], Some("zero")),
        (vec!["reconstruct", "--config", &small, "--out", out], Some("0")),
    ];
    for (args, threads) in cases {
        let res = splatforge(&args, threads);
        assert_eq!(
            code(&res),
            2,
            "{args:?} {threads:?}: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        assert!(String::from_utf8_lossy(&res.stderr).starts_with("error: "));
    }
}

#[test]
fn sampler_divergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "diverge.toml", &format!("{SMALL}sigma_max = 1e300\n"));
    let out = dir.path().join("out");
    let res = splatforge(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let res = splatforge(
            &[
                "generate",
                "--config",
                &cfg,
                "--seed",
                "9",
                "--out",
                out.to_str().unwrap(),
            ],
            Some(threads),
        );
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        out
    };
    let (one, four) = (run("one", "1"), run("four", "4"));
    for name in ["scene.ply", "view_00.png", "view_01_depth.pfm", "trajectory.txt"] {
        assert_eq!(
            std::fs::read(one.join(name)).unwrap(),
            std::fs::read(four.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn missing_input_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.ply");
    let res = splatforge(
        &[
            "render",
            "--out",
            out.to_str().unwrap(),
            "--ply",
            missing.to_str().unwrap(),
            "--trajectory",
            missing.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&res), 1, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        splatforge::pipeline::Config::load(&path, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 2);
}

#[test]
fn smoke_config_runs_on_one_thread_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let out = dir.path().join("smoke");
    let start = std::time::Instant::now();
    let res = splatforge(
        &[
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "0",
            "--out",
            out.to_str().unwrap(),
        ],
        Some("1"),
    );
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(start.elapsed().as_secs_f64() < 60.0, "{:?}", start.elapsed());
}
