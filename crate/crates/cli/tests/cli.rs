use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 5] = ["synth", "train-pd", "superres", "eval", "kernels"];
const SHARED_FLAGS: [&str; 8] =
    ["--config", "--seed", "--out", "--scale", "--tnd", "--niter", "--pd-steps", "--device"];

const SMALL: &str = r#"
seed = 5

[pd_backbone]
hidden_width = 8
time_embed_dim = 16

[pd_train]
crop_size = 16
steps = 6
lr = 1e-3

[fusion]
n_iter_initial = 3
lr = 1e-3
lr_min = 5e-4
snapshot_every = 0

[fusion.inr]
layers = 3
width = 16
canvas = [5, 5]

[fusion.refiner]
levels = 3
base_filters = 4
max_filters = 16

[synth]
hr_source = "hr"

[[synth.kernel_bank]]
id = "delta"
generator = "delta"
size = 5
dy = 1

[[synth.kernel_bank]]
id = "gauss"
generator = "anisotropic_gaussian"
size = 5
sigma_x = 1.0
sigma_y = 0.7
theta = 0.3
"#;

fn blindsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blindsr")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = blindsr(dir, args);
    assert!(o.status.success(), "{args:?} failed:\n{}", stderr(&o));
    o
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("hr")).unwrap();
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.png");
    std::fs::copy(data, tmp.path().join("hr/tiny.png")).unwrap();
    std::fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    tmp
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let o = ok(tmp.path(), &[sub, "--help"]);
        let text = String::from_utf8_lossy(&o.stdout);
        for flag in SHARED_FLAGS {
            assert!(text.contains(flag), "`{sub} --help` lacks {flag}");
        }
        assert!(text.contains("default"), "`{sub} --help` shows no defaults");
    }
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[fusion]\nt_nd = 10\nn_itter = 4\n").unwrap();
    let o = blindsr(tmp.path(), &["superres", "--config", "bad.toml", "--input", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_itter"), "{}", stderr(&o));
}

#[test]
fn bad_device_and_missing_inputs_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let o = blindsr(tmp.path(), &["train-pd", "--device", "cuda", "--input", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cuda"));
    let o = blindsr(tmp.path(), &["train-pd", "--input", "missing.png"]);
    assert_eq!(o.status.code(), Some(1));
    let o = blindsr(tmp.path(), &["superres"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_train_superres_eval_pipeline() {
    let tmp = workspace();
    let dir = tmp.path();
    let common = ["--config", "small.toml", "--scale", "2", "--tnd", "3", "--niter", "2"];
    let with = |sub: &str, extra: &[&str]| -> Vec<String> {
        let mut v = vec![sub.to_string()];
        v.extend(common.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |args: Vec<String>| ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with("synth", &["--out", "data"]));
    let manifest = std::fs::read_to_string(dir.join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);

    run(with("train-pd", &["--out", "prior", "--manifest", "data/manifest.jsonl"]));
    assert!(dir.join("prior/tiny_delta.pd.safetensors").exists());
    let losses = std::fs::read_to_string(dir.join("prior/tiny_delta_pd_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 6);

    let o = run(with("superres", &["--out", "sr", "--manifest", "data/manifest.jsonl"]));
    assert!(stderr(&o).contains("using cached prior"), "prior was retrained:\n{}", stderr(&o));
    for stem in ["tiny_delta", "tiny_gauss"] {
        assert!(dir.join(format!("sr/{stem}_fusion.png")).exists());
        assert!(dir.join(format!("sr/{stem}_fusion_kernel.txt")).exists());
        let trace = std::fs::read_to_string(dir.join(format!("sr/{stem}_trace.jsonl"))).unwrap();
        assert_eq!(trace.lines().count(), 3);
    }

    // same seed, same bytes
    run(with("superres", &["--out", "sr2", "--manifest", "data/manifest.jsonl"]));
    for f in ["tiny_delta_fusion.png", "tiny_gauss_fusion_kernel.txt"] {
        assert_eq!(std::fs::read(dir.join("sr").join(f)).unwrap(), std::fs::read(dir.join("sr2").join(f)).unwrap());
    }

    let o = run(with("eval", &["--out", "report", "--manifest", "data/manifest.jsonl", "--outputs", "sr"]));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("fusion") && table.contains("bicubic") && table.contains("pinv"), "{table}");
    let csv = std::fs::read_to_string(dir.join("report/report.csv")).unwrap();
    assert!(csv.starts_with("image_id,kernel_id,method,psnr_db,ssim,kernel_mse,centroid_err"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(dir.join("report/kernels_fusion.png").exists());
    assert!(dir.join("report/strip_tiny_gauss.png").exists());

    run(with("kernels", &["--out", "grid", "--dir", "data/kernels"]));
    assert!(dir.join("grid/kernels.png").exists());

    for run_dir in ["data", "prior", "sr", "report", "grid"] {
        let echo = std::fs::read_to_string(dir.join(run_dir).join("config.toml")).unwrap();
        assert!(echo.contains("seed = 5") && echo.contains("t_nd = 3") && echo.contains("scale = 2"), "{echo}");
        let info: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join(run_dir).join("run.json")).unwrap()).unwrap();
        assert_eq!(info["seed"], 5);
        assert!(info["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    }
}
