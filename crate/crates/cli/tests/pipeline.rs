use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
seed = 5
workers = 2
[dataset]
source = "synthetic"
n_train = 120
n_test = 12
length = 64
[train]
epochs = 40
[attribution]
ig_steps = 8
gradshap_samples = 4
kernelshap_coalitions = 80
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{CONFIG}{extra}")).unwrap();
    path
}

fn pertcard(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pertcard"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files_in(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn train_is_accurate_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = write_config(d.path(), "");
        ok(pertcard(d.path(), &cfg, &["train"]));
    }
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("out/model/metrics.json")).unwrap()).unwrap();
    let acc = metrics["train_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert_eq!(
        fs::read(a.path().join("out/model/params.json")).unwrap(),
        fs::read(b.path().join("out/model/params.json")).unwrap()
    );
}

#[test]
fn missing_dataset_file_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let out = pertcard(d.path(), &cfg, &["train", "--dataset", "/nonexistent/Nothing_TRAIN.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("usage"), "{err}");
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn technique_selection_controls_attribution_files() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    ok(pertcard(d.path(), &cfg, &["train"]));

    ok(pertcard(d.path(), &cfg, &["attribute", "--techniques", "saliency"]));
    assert_eq!(files_in(&d.path().join("out/attributions"), "attr").len(), 1);

    ok(pertcard(d.path(), &cfg, &["attribute", "--techniques", "all"]));
    assert_eq!(files_in(&d.path().join("out/attributions"), "attr").len(), 6);

    let out = pertcard(d.path(), &cfg, &["attribute", "--techniques", "deeplift"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("import"), "{err}");
}

#[test]
fn full_grid_run_is_complete_stamped_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), "");
    ok(pertcard(a.path(), &cfg, &["run-all", "--techniques", "all", "--strategies", "all"]));
    let out = a.path().join("out");

    let results: Vec<PathBuf> = files_in(&out.join("results"), "json")
        .into_iter()
        .filter(|p| !p.ends_with("summary.json"))
        .collect();
    assert_eq!(results.len(), 96);
    assert!(out.join("results/summary.json").exists());
    let cards_json = files_in(&out.join("cards"), "json");
    assert_eq!(cards_json.len(), 96);
    assert_eq!(files_in(&out.join("cards"), "svg").len(), 96);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert!(!hash.is_empty());
    for p in results.iter().chain(&cards_json) {
        let v: Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        let stamped = v.get("config_hash").or_else(|| v["S"].get("config_hash"));
        assert_eq!(stamped.and_then(Value::as_str), Some(hash.as_str()), "{}", p.display());
    }
    for p in files_in(&out.join("attributions"), "attr") {
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.lines().next().unwrap().contains(&hash), "{}", p.display());
    }
    let card: Value = serde_json::from_str(&fs::read_to_string(&cards_json[0]).unwrap()).unwrap();
    assert_eq!(card["S"]["dataset"], "synthetic-spike");

    let before: Vec<Vec<u8>> = files_in(&out.join("cards"), "svg").iter().map(|p| fs::read(p).unwrap()).collect();
    ok(pertcard(a.path(), &cfg, &["card"]));
    let after: Vec<Vec<u8>> = files_in(&out.join("cards"), "svg").iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);

    let b = tempfile::tempdir().unwrap();
    let cfg_b = write_config(b.path(), "");
    ok(pertcard(b.path(), &cfg_b, &["run-all", "--techniques", "all", "--strategies", "all", "--workers", "1"]));
    for p in cards_json {
        let twin = b.path().join("out/cards").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(twin).unwrap(), "{}", p.display());
    }
}

#[test]
fn external_attributions_are_imported_and_evaluated() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    ok(pertcard(d.path(), &cfg, &["train"]));
    ok(pertcard(d.path(), &cfg, &["attribute", "--techniques", "occlusion"]));

    let produced = fs::read_to_string(d.path().join("out/attributions/occlusion.attr")).unwrap();
    let mut lines = produced.lines();
    let header: Value = serde_json::from_str(lines.next().unwrap().trim_start_matches("# ")).unwrap();
    let external_header = serde_json::json!({
        "format": header["format"],
        "version": header["version"],
        "technique": "deeplift",
        "dataset": header["dataset"],
        "n": header["n"],
        "m": header["m"],
    });
    let mut text = format!("# {external_header}\n");
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    let external = d.path().join("deeplift.attr");
    fs::write(&external, text).unwrap();

    let cfg = write_config(
        d.path(),
        &format!(
            "techniques = [\"saliency\"]\n[[attribution.imports]]\nname = \"deeplift\"\npath = \"{}\"\n[evaluate]\nstrategies = [\"point-zero\"]\n",
            external.display()
        ),
    );
    ok(pertcard(d.path(), &cfg, &["run-all"]));
    let result = d.path().join("out/results/deeplift__point-zero.json");
    assert!(result.exists());
    let card: Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("out/cards/deeplift__point-zero.json")).unwrap()).unwrap();
    assert_eq!(card["S"]["technique"], "deeplift");
}
