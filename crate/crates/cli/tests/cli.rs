use std::path::Path;
use std::process::{Command, Output};

use bgl_downscale::pipeline::{PenaltyMode, PipelineConfig};
use bgl_downscale::synthetic::ScenarioSpec;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgl-downscale"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) {
    let spec = ScenarioSpec {
        coarse_cols: 4,
        coarse_rows: 4,
        refine: 3,
        train_years: 6,
        holdout_years: 1,
        future_years: 1,
        levels: 3,
        ..ScenarioSpec::standard(5)
    };
    let mut cfg = PipelineConfig::for_scenario(spec, Path::new(""));
    cfg.penalty.mode = PenaltyMode::Fixed;
    cfg.ssim.window = 4;
    std::fs::write(dir.join("bgl.toml"), cfg.to_toml().unwrap()).unwrap();
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    ok(&bin(dir.path(), &["simulate", "-c", "bgl.toml"]));
    let fit = ok(&bin(
        dir.path(),
        &["fit", "-c", "bgl.toml", "--threads", "1"],
    ));
    assert_eq!(fit.lines().filter(|l| l.contains("lambda=")).count(), 4);

    let pred = ok(&bin(
        dir.path(),
        &["predict", "-c", "bgl.toml", "--months", "1996-01,1996-07"],
    ));
    assert!(pred.contains("wrote"));
    for f in [
        "mean_1996-01.gsf",
        "sd_1996-01.gsf",
        "mean_1996-07.gsf",
        "sd_1996-07.gsf",
    ] {
        assert!(dir.path().join("out/predict").join(f).exists(), "{f}");
    }

    let report = ok(&bin(
        dir.path(),
        &["validate", "-c", "bgl.toml", "--sequential"],
    ));
    assert!(report.starts_with("method,season,months,mse,ssim"));
    for method in ["gcm", "standard", "bgl"] {
        assert!(
            report
                .lines()
                .any(|l| l.starts_with(&format!("{method},overall,"))),
            "{method}"
        );
    }
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out/validate/report.csv")).unwrap(),
        report
    );
}

#[test]
fn init_writes_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(&bin(
        dir.path(),
        &["init", "--out", "a.toml", "--seed", "9", "--independent"],
    ));
    let cfg =
        PipelineConfig::from_toml(&std::fs::read_to_string(dir.path().join("a.toml")).unwrap())
            .unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.scenario.unwrap().correlation, 0.0);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    ok(&bin(dir.path(), &["simulate", "-c", "bgl.toml"]));
    let a = std::fs::read(dir.path().join("coarse.gsf")).unwrap();
    ok(&bin(
        dir.path(),
        &["simulate", "-c", "bgl.toml", "--seed", "77"],
    ));
    let b = std::fs::read(dir.path().join("coarse.gsf")).unwrap();
    ok(&bin(dir.path(), &["simulate", "-c", "bgl.toml"]));
    let c = std::fs::read(dir.path().join("coarse.gsf")).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, c);
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());

    let missing = bin(dir.path(), &["fit", "-c", "nope.toml"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.toml"));

    ok(&bin(dir.path(), &["simulate", "-c", "bgl.toml"]));
    let unfitted = bin(dir.path(), &["predict", "-c", "bgl.toml"]);
    assert!(!unfitted.status.success());

    let bad_month = bin(
        dir.path(),
        &["predict", "-c", "bgl.toml", "--months", "1996-13"],
    );
    assert!(!bad_month.status.success());
    assert!(String::from_utf8_lossy(&bad_month.stderr).contains("1996-13"));
}
