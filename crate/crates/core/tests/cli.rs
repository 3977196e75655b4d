use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use carsr::degradation::jpeg_encode;
use carsr::fixtures::{synthetic_image, write_fixture_set};
use carsr::Image;

const CONFIG: &str = r#"
[model]
n_f = 8
num_rrdb = 1
growth_channels = 4

[train]
batch_size = 4
hr_patch = 32
lr_init = 1e-3
total_iters = 6
restart_period = 3
checkpoint_every = 3
seed = 5

[degrade]
hr_patch = 32

[prepare]
count = 10

[eval]
qfs = [40]

[ablate]
lambdas = [0.0, 1.0]
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    write_fixture_set(&root.join("data/hr"), 6, 96, 96, 100).unwrap();
    write_fixture_set(&root.join("data/test"), 5, 64, 64, 200).unwrap();
    let corpus = root.join("data/corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for i in 0..3 {
        let img = synthetic_image(300 + i, 20, 24);
        std::fs::write(corpus.join(format!("doc_{i}.jpg")), jpeg_encode(&img, 50).unwrap()).unwrap();
    }
    std::fs::write(corpus.join("broken.png"), b"not an image").unwrap();
    let config = root.join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    Workspace { _dir: dir, root, config }
}

fn carsr(ws: &Workspace, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_carsr"));
    cmd.arg(args[0]).arg("--config").arg(&ws.config).args(&args[1..]);
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn log_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prepare_train_resume_eval_preprocess() {
    let ws = workspace();
    let run = ws.root.join("run");

    ok(&carsr(&ws, &["prepare-data"]));
    let manifest = std::fs::read(run.join("manifest.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&manifest).lines().count(), 11);
    assert!(run.join("manifest.summary.json").exists());
    ok(&carsr(&ws, &["prepare-data"]));
    assert_eq!(std::fs::read(run.join("manifest.jsonl")).unwrap(), manifest);

    let out = carsr(&ws, &["train"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).trim().ends_with("ckpt_00000006.bin"));
    let ckdir = run.join("checkpoints");
    for i in [0, 3, 6] {
        assert!(ckdir.join(format!("ckpt_{i:08}.bin")).exists());
    }
    let log = log_lines(&run.join("train_log.jsonl"));
    assert_eq!(log.iter().map(|r| r["iter"].as_u64().unwrap()).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert!(log.iter().all(|r| r["l_LR"] == 0.0));

    // Interrupt after iteration 3, then resume.
    let final_bytes = std::fs::read(ckdir.join("ckpt_00000006.bin")).unwrap();
    std::fs::remove_file(ckdir.join("ckpt_00000006.bin")).unwrap();
    ok(&carsr(&ws, &["train", "--resume"]));
    assert_eq!(std::fs::read(ckdir.join("ckpt_00000006.bin")).unwrap(), final_bytes);
    let log = log_lines(&run.join("train_log.jsonl"));
    assert_eq!(log.iter().map(|r| r["iter"].as_u64().unwrap()).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());

    ok(&carsr(&ws, &["eval", "--ensemble"]));
    let report = read_json(&run.join("reports/eval.json"));
    let methods: Vec<&str> = report["results"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["direct", "ensemble", "bicubic"]);
    for r in report["results"].as_array().unwrap() {
        assert_eq!(r["result"]["per_image"].as_array().unwrap().len(), 5);
    }
    let direct = &report["results"][0]["result"]["runtime_total"];
    let ens = &report["results"][1]["result"]["runtime_total"];
    assert!(ens.as_f64().unwrap() > direct.as_f64().unwrap());
    assert_eq!(report["meta"]["shave"], 4);
    assert_eq!(report["meta"]["config_hash"].as_str().unwrap().len(), 64);
    assert!(report["meta"]["codec_id"].as_str().unwrap().contains("jpeg"));
    let csv = std::fs::read_to_string(run.join("reports/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let mismatch = carsr(&ws, &["eval", "--set", "model.n_f=16"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("different model"));

    ok(&carsr(&ws, &["preprocess"]));
    let enhanced = run.join("enhanced");
    let first = std::fs::read(enhanced.join("doc_0.png")).unwrap();
    for i in 0..3 {
        let img = Image::load(&enhanced.join(format!("doc_{i}.png"))).unwrap();
        assert_eq!((img.height(), img.width()), (80, 96));
    }
    let report = read_json(&enhanced.join("preprocess.json"));
    assert_eq!(report["skipped"].as_array().unwrap().len(), 1);
    ok(&carsr(&ws, &["preprocess"]));
    assert_eq!(std::fs::read(enhanced.join("doc_0.png")).unwrap(), first);

    ok(&carsr(&ws, &["preprocess", "--downsample"]));
    let img = Image::load(&enhanced.join("doc_1.png")).unwrap();
    assert_eq!((img.height(), img.width()), (20, 24));
}

#[test]
fn lambda_runs_log_the_lr_term() {
    let ws = workspace();
    ok(&carsr(&ws, &["prepare-data"]));
    ok(&carsr(&ws, &["train", "--set", "train.lambda_recon=16", "--set", "model.with_car_head=true"]));
    let log = log_lines(&ws.root.join("run/train_log.jsonl"));
    assert!(log.iter().all(|r| r["l_LR"].as_f64().unwrap() > 0.0));
}

#[test]
fn invalid_configs_fail_before_writing_anything() {
    let ws = workspace();
    let run = ws.root.join("run");

    let lam = carsr(&ws, &["train", "--set", "train.lambda_recon=16"]);
    assert_eq!(lam.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&lam.stderr).contains("lambda_recon"));

    let variant = carsr(&ws, &["ablate", "--set", "ablate.contexts=[\"transformer\"]"]);
    assert_eq!(variant.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&variant.stderr).contains("sequential_atrous"));

    let unknown = carsr(&ws, &["prepare-data", "--set", "model.depth=3"]);
    assert_eq!(unknown.status.code(), Some(2));

    let missing = carsr(&ws, &["prepare-data", "--set", "paths.source_dir=\"nowhere\""]);
    assert_eq!(missing.status.code(), Some(3));

    let no_manifest = carsr(&ws, &["train"]);
    assert_eq!(no_manifest.status.code(), Some(3));

    assert!(!run.exists(), "failed commands left {:?}", std::fs::read_dir(&run).map(|d| d.count()));
}

#[test]
fn ablation_matrix() {
    let ws = workspace();
    ok(&carsr(&ws, &["prepare-data"]));
    ok(&carsr(&ws, &["ablate", "--set", "train.total_iters=2", "--set", "train.restart_period=2"]));
    let report = read_json(&ws.root.join("run/reports/ablation.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let mut params: Vec<u64> = rows.iter().map(|r| r["params"].as_u64().unwrap()).collect();
    params.sort();
    params.dedup();
    assert_eq!(params.len(), 6);
    let ctx = |name: &str| {
        rows.iter()
            .find(|r| r["context"] == name)
            .map(|r| r["context_params"].as_u64().unwrap())
            .unwrap()
    };
    assert!(ctx("aspp") < ctx("nonlocal"));
    let lam = report["lambda_rows"].as_array().unwrap();
    assert_eq!(lam.len(), 2);
    assert_eq!(lam[0]["l_lr"], 0.0);
    assert!(lam[1]["l_lr"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(ws.root.join("run/reports/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}
