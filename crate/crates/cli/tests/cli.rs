use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use malaria_core::checkpoint::Checkpoint;
use malaria_core::fixtures::write_synthetic_dataset;
use malaria_core::{Architecture, ModelGraph};

const BIN: &str = env!("CARGO_BIN_EXE_malaria");

fn malaria(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_data(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    write_synthetic_dataset(&root, 4, 48, 3).unwrap();
    root
}

fn train_toy(root: &Path, out: &Path, seed: &str) -> Output {
    malaria(&[
        "train",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--width-divisor",
        "32",
        "--seed",
        seed,
    ])
}

#[test]
fn help_and_usage_errors() {
    for args in [&["--help"][..], &["train", "--help"], &["--version"]] {
        assert_eq!(malaria(args).status.code(), Some(0), "{args:?}");
    }
    for args in [&[][..], &["train", "--bogus"], &["fly"], &["predict"]] {
        assert_eq!(malaria(args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn config_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nlr = 0.01\nmomentum = 0.9\n").unwrap();
    let o = malaria(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_and_resolved_config_is_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let root = toy_data(tmp.path());
    let cfg = tmp.path().join("run.toml");
    let text = format!(
        "[data]\nroot = {:?}\nseed = 9\n[train]\nepochs = 5\nbatch_size = 4\n[model]\nwidth_divisor = 32\n[augment]\nrotation_deg = 5.0\n",
        root.to_str().unwrap()
    );
    std::fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("run");
    let o = malaria(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let err = stderr(&o);
    let echoed = err.split("# resolved config\n").nth(1).unwrap();
    assert!(echoed.contains("epochs = 1"), "{err}");
    assert!(echoed.contains("seed = 9"));
    assert!(echoed.contains("rotation_deg = 5.0"));
    assert!(echoed.contains("plateau_factor = 0.1"));
    let ck = Checkpoint::<f32>::load(out.join("checkpoint.mckp")).unwrap();
    assert_eq!(ck.config["train"]["epochs"], 1);
    assert_eq!(ck.config["data"]["seed"], 9);
    assert_eq!(ck.model.seed(), 9);
}

#[test]
fn train_toy_fixture_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = toy_data(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = train_toy(&root, &a, "1");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(train_toy(&root, &b, "1").status.code(), Some(0));

    let history = std::fs::read_to_string(a.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "epoch,train_loss,train_acc,val_loss,val_acc,lr");
    assert!(lines[1].starts_with("1,"));
    let manifest = std::fs::read_to_string(a.join("split.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 8);
    Checkpoint::<f32>::load(a.join("checkpoint.mckp")).unwrap();

    for name in ["history.csv", "split.csv", "checkpoint.mckp"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn missing_data_root_is_a_data_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-dataset");
    let o = train_toy(&missing, &tmp.path().join("out"), "0");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-dataset"), "{}", stderr(&o));
}

#[test]
fn eval_report_is_consistent_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = toy_data(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(train_toy(&root, &run, "2").status.code(), Some(0));

    let eval = || {
        let o = malaria(&["eval", "--out", run.to_str().unwrap(), "--split", "test"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let table = String::from_utf8(o.stdout).unwrap();
        assert!(table.contains("Accuracy"));
        std::fs::read_to_string(run.join("report.json")).unwrap()
    };
    let first = eval();
    assert_eq!(first, eval());
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    let cm: Vec<Vec<u64>> = serde_json::from_value(v["confusion"].clone()).unwrap();
    let total: u64 = cm.iter().flatten().sum();
    assert_eq!(total, 3);
    let trace = cm[0][0] + cm[1][1];
    assert_eq!(v["accuracy"].as_f64().unwrap(), trace as f64 / total as f64);
}

#[test]
fn eval_of_a_perfect_model_reports_accuracy_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = toy_data(tmp.path());
    // every image is parasitized and the model always says parasitized
    let mut model = ModelGraph::<f32>::with_architecture(Architecture::narrow(32), 0).unwrap();
    let bias = model.params().find("head.fc2.bias").unwrap();
    model.params_mut().get_mut(bias).value.data_mut()[0] = 50.0;
    let ck = tmp.path().join("perfect.mckp");
    Checkpoint::new(model).save(&ck).unwrap();
    let manifest = tmp.path().join("split.csv");
    let mut rows = String::from("path,label,split\n");
    for i in 0..4 {
        let p = root.join(format!("Parasitized/cell_{i:04}.png"));
        rows += &format!("{},0,test\n", p.display());
    }
    std::fs::write(&manifest, rows).unwrap();
    let out = tmp.path().join("eval");
    let o = malaria(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["accuracy"], 1.0);
    assert_eq!(v["confusion"], serde_json::json!([[4, 0], [0, 0]]));
}

struct ServeProcess {
    child: Child,
    addr: String,
}

impl ServeProcess {
    fn start(checkpoint: &Path) -> Self {
        let mut child = Command::new(BIN)
            .args([
                "serve",
                "--bind",
                "127.0.0.1:0",
                "--checkpoint",
                checkpoint.to_str().unwrap(),
            ])
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
        let addr = loop {
            let line = lines
                .next()
                .expect("server exited before listening")
                .unwrap();
            if let Some(rest) = line.split("listening on http://").nth(1) {
                break rest.trim().to_string();
            }
        };
        // keep draining so the child never blocks on a full pipe
        std::thread::spawn(move || lines.for_each(drop));
        ServeProcess { child, addr }
    }

    fn terminate(mut self) -> Option<i32> {
        let pid = self.child.id().to_string();
        assert!(Command::new("kill")
            .args(["-TERM", &pid])
            .status()
            .unwrap()
            .success());
        for _ in 0..100 {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status.code();
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        self.child.kill().unwrap();
        panic!("server ignored SIGTERM");
    }
}

fn write_model(path: &Path) {
    let model = ModelGraph::<f32>::with_architecture(Architecture::narrow(32), 5).unwrap();
    Checkpoint::new(model).save(path).unwrap();
}

#[test]
fn predict_is_deterministic_and_matches_the_server() {
    let tmp = tempfile::tempdir().unwrap();
    let root = toy_data(tmp.path());
    let ck = tmp.path().join("model.mckp");
    write_model(&ck);
    let image = root.join("Uninfected/cell_0001.png");
    let predict = |img: &Path| {
        malaria(&[
            "predict",
            "--checkpoint",
            ck.to_str().unwrap(),
            img.to_str().unwrap(),
        ])
    };

    let a = predict(&image);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, predict(&image).stdout);
    let cli_json = String::from_utf8(a.stdout).unwrap();

    let text = tmp.path().join("notes.txt");
    std::fs::write(&text, "not an image").unwrap();
    let bad = predict(&text);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("decode_error"), "{}", stderr(&bad));

    let server = ServeProcess::start(&ck);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let http_json = rt.block_on(async {
        let form = reqwest::multipart::Form::new().part(
            "image",
            reqwest::multipart::Part::bytes(std::fs::read(&image).unwrap()).file_name("cell.png"),
        );
        reqwest::Client::new()
            .post(format!("http://{}/api/v1/predict", server.addr))
            .multipart(form)
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap()
    });
    assert_eq!(cli_json.trim(), http_json);
    assert_eq!(server.terminate(), Some(0));
}

#[test]
fn serve_starts_answers_health_and_exits_cleanly_on_sigterm() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("model.mckp");
    write_model(&ck);
    let server = ServeProcess::start(&ck);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (status, body) = rt.block_on(async {
        let r = reqwest::get(format!("http://{}/api/v1/health", server.addr))
            .await
            .unwrap();
        (
            r.status().as_u16(),
            r.json::<serde_json::Value>().await.unwrap(),
        )
    });
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    assert_eq!(server.terminate(), Some(0));
}

#[test]
fn serve_with_a_bad_checkpoint_fails_at_startup() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.mckp");
    std::fs::write(&bad, b"definitely not a checkpoint").unwrap();
    for ck in [bad, tmp.path().join("missing.mckp")] {
        let o = malaria(&[
            "serve",
            "--bind",
            "127.0.0.1:0",
            "--checkpoint",
            ck.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    }
}
