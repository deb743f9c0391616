use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use pertcard::analysis::{aggregate, percentile_sweep, AnalysisResult};
use pertcard::attribution::{
    attribute_dataset, attributions_to_text, import_attributions, read_attributions, AttributionMap, ATTRIBUTION_FORMAT,
};
use pertcard::card::{build_card, emit_json, render_svg, CardMeta};
use pertcard::dataset::{dataset_stats, load_ucr_tsv, synthetic_spike_dataset, znormalize, Dataset, Split};
use pertcard::model::{init_model, predict_batch, train, ModelConfig, ModelParams};
use pertcard::perturbation::Strategy;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ArchitectureName, Config, Source};
use crate::{DataError, UsageError};

const MANIFEST: &str = "manifest.json";
const TRAIN_DATA: &str = "data/train.json";
const TEST_DATA: &str = "data/test.json";
const PARAMS: &str = "model/params.json";
const METRICS: &str = "model/metrics.json";
const SUMMARY_JSON: &str = "results/summary.json";
const SUMMARY_CSV: &str = "results/summary.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    step: String,
    sha256: String,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config_hash: String,
    artifacts: BTreeMap<String, ManifestEntry>,
}

/// One evaluated technique × strategy cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub config_hash: String,
    pub dataset: String,
    pub technique: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub result: AnalysisResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub technique: String,
    pub strategy: String,
    pub n: usize,
    pub changed: usize,
    pub qm_original: f64,
    pub qm_perturbed: f64,
    /// Over changed samples; absent when nothing flipped.
    pub median_perturbed_count: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub dataset: String,
    pub rows: Vec<SummaryRow>,
    /// Cell with the most changed samples; earlier cells win ties.
    pub best: Option<SummaryRow>,
}

pub struct Run {
    pub cfg: Config,
    pub hash: String,
    dir: PathBuf,
    pool: rayon::ThreadPool,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn result_name(technique: &str, strategy: Strategy) -> String {
    format!("{technique}__{strategy}")
}

impl Run {
    pub fn new(cfg: Config) -> anyhow::Result<Run> {
        let hash = cfg.hash();
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .context("building worker pool")?;
        let run = Run { cfg, hash, dir, pool };
        run.write("config.json", "config", format!("{}\n", run.config_document()).as_bytes())?;
        Ok(run)
    }

    fn config_document(&self) -> Value {
        let mut v: Value = serde_json::from_str(&self.cfg.canonical_json()).expect("canonical config is JSON");
        v["config_hash"] = json!(self.hash);
        v
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn manifest(&self) -> anyhow::Result<Manifest> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(Manifest {
                format: "pertcard-run".into(),
                config_hash: self.hash.clone(),
                artifacts: BTreeMap::new(),
            });
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))
    }

    /// Writes an artifact inside the run directory and records it in the
    /// manifest.
    fn write(&self, rel: &str, step: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let mut manifest = self.manifest()?;
        manifest.config_hash = self.hash.clone();
        manifest.artifacts.insert(
            rel.to_string(),
            ManifestEntry {
                step: step.to_string(),
                sha256: sha256_hex(bytes),
                config_hash: self.hash.clone(),
            },
        );
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.path(MANIFEST), text)?;
        Ok(())
    }

    /// Adds the config hash to a JSON document's top-level object.
    fn stamped(&self, json_text: &str) -> anyhow::Result<String> {
        let mut v: Value = serde_json::from_str(json_text)?;
        v["config_hash"] = json!(self.hash);
        Ok(v.to_string() + "\n")
    }

    fn read(&self, rel: &str, produced_by: &str) -> anyhow::Result<String> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(DataError(format!(
                "{} is missing; run `pertcard {produced_by}` first",
                path.display()
            ))
            .into());
        }
        let text = fs::read_to_string(&path)?;
        if let Some(h) = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v.get("config_hash").and_then(Value::as_str).map(str::to_string))
        {
            if h != self.hash {
                log::warn!("{rel} was produced by config {h}, current config is {}", self.hash);
            }
        }
        Ok(text)
    }

    fn load_datasets(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let train = Dataset::from_json(&self.read(TRAIN_DATA, "train")?)?;
        let test = Dataset::from_json(&self.read(TEST_DATA, "train")?)?;
        Ok((train, test))
    }

    fn load_model(&self) -> anyhow::Result<ModelParams> {
        Ok(ModelParams::from_json(&self.read(PARAMS, "train")?)?)
    }

    fn attribution_path(name: &str) -> String {
        format!("attributions/{name}.attr")
    }

    fn build_datasets(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let d = &self.cfg.dataset;
        match d.source {
            Source::Synthetic => {
                let train = synthetic_spike_dataset(d.n_train, d.length, self.cfg.seed)?;
                let mut test = synthetic_spike_dataset(d.n_test, d.length, self.cfg.seed.wrapping_add(1))?;
                test.split = Split::Test;
                Ok((train, test))
            }
            Source::Ucr => {
                let train_path = d.train.as_ref().expect("validated");
                let test_path = self.cfg.test_path().ok_or_else(|| {
                    DataError(format!(
                        "no test file for {}; set dataset.test",
                        train_path.display()
                    ))
                })?;
                for p in [train_path, &test_path] {
                    if !p.exists() {
                        return Err(UsageError(format!("dataset file {} does not exist", p.display())).into());
                    }
                }
                let mut train = load_ucr_tsv(train_path)?;
                let mut test = load_ucr_tsv(&test_path)?;
                train.split = Split::Train;
                test.split = Split::Test;
                if train.label_map != test.label_map {
                    return Err(DataError(format!(
                        "train labels {:?} and test labels {:?} differ",
                        train.label_map, test.label_map
                    ))
                    .into());
                }
                if d.normalize {
                    train = znormalize(&train);
                    test = znormalize(&test);
                }
                Ok((train, test))
            }
        }
    }

    pub fn train(&self) -> anyhow::Result<()> {
        let (train_ds, test_ds) = self.build_datasets()?;
        if train_ds.series_length() != test_ds.series_length() {
            return Err(DataError("train and test series lengths differ".into()).into());
        }
        self.write(TRAIN_DATA, "train", self.stamped(&train_ds.to_json()?)?.as_bytes())?;
        self.write(TEST_DATA, "train", self.stamped(&test_ds.to_json()?)?.as_bytes())?;

        let m = train_ds.series_length();
        let mc = match self.cfg.model.architecture {
            ArchitectureName::Plain => ModelConfig::plain(m, train_ds.num_classes),
            ArchitectureName::Residual => ModelConfig::residual(m, train_ds.num_classes),
        };
        let mut params = init_model(&mc, self.cfg.seed)?;
        params.label_map = train_ds.label_map.clone();
        let report = train(&params, &train_ds, &self.cfg.train)?;
        let train_acc = predict_batch(&report.params, &train_ds)?.accuracy;
        let test_acc = predict_batch(&report.params, &test_ds)?.accuracy;
        self.write(PARAMS, "train", self.stamped(&report.params.to_json()?)?.as_bytes())?;
        let metrics = json!({
            "config_hash": self.hash,
            "epochs": report.loss_history.len(),
            "loss_history": report.loss_history,
            "train_accuracy": train_acc,
            "test_accuracy": test_acc,
        });
        self.write(METRICS, "train", format!("{metrics}\n").as_bytes())?;
        println!("train accuracy {train_acc:.4}, test accuracy {test_acc:.4}");
        Ok(())
    }

    fn stamp_map(&self, map: &mut AttributionMap) {
        let params = std::mem::take(&mut map.params);
        map.params = match params {
            Value::Object(mut o) => {
                o.insert("config_hash".into(), json!(self.hash));
                Value::Object(o)
            }
            Value::Null => json!({ "config_hash": self.hash }),
            other => json!({ "config_hash": self.hash, "original": other }),
        };
    }

    fn write_map(&self, name: &str, map: &mut AttributionMap) -> anyhow::Result<()> {
        self.stamp_map(map);
        let text = attributions_to_text(map)?;
        self.write(&Self::attribution_path(name), "attribute", text.as_bytes())
    }

    pub fn attribute(&self) -> anyhow::Result<()> {
        let (train_ds, test_ds) = self.load_datasets()?;
        let model = self.load_model()?;
        let params = &self.cfg.attribution.params;
        for &t in &self.cfg.attribution.techniques {
            let mut map = self
                .pool
                .install(|| attribute_dataset(&model, &test_ds, t, params, &train_ds.samples))?;
            self.write_map(t.name(), &mut map)?;
            println!("attributions {t}: {} x {}", map.len(), test_ds.series_length());
        }
        for imp in &self.cfg.attribution.imports {
            if !imp.path.exists() {
                return Err(DataError(format!(
                    "import {} refers to missing file {}",
                    imp.name,
                    imp.path.display()
                ))
                .into());
            }
            let mut map = import_attributions(&imp.path, &test_ds)
                .with_context(|| format!("importing {} ({ATTRIBUTION_FORMAT} file)", imp.path.display()))?;
            map.technique = imp.name.clone();
            self.write_map(&imp.name, &mut map)?;
            println!("attributions {} (imported): {} x {}", imp.name, map.len(), test_ds.series_length());
        }
        Ok(())
    }

    pub fn evaluate(&self) -> anyhow::Result<()> {
        let (_, test_ds) = self.load_datasets()?;
        let model = self.load_model()?;
        let stats = dataset_stats(&test_ds);
        let mut rows = Vec::new();
        for name in self.cfg.technique_names() {
            let rel = Self::attribution_path(&name);
            let path = self.path(&rel);
            if !path.exists() {
                return Err(DataError(format!(
                    "{} is missing; run `pertcard attribute` first",
                    path.display()
                ))
                .into());
            }
            let attrs = read_attributions(&path)?;
            for &strategy in &self.cfg.evaluate.strategies {
                let records = self.pool.install(|| {
                    percentile_sweep(&model, &test_ds, &attrs, strategy, &stats, self.cfg.seed)
                })?;
                let result = aggregate(records, &test_ds)?;
                rows.push(SummaryRow {
                    technique: name.clone(),
                    strategy: strategy.name(),
                    n: result.n,
                    changed: result.changed,
                    qm_original: result.qm_original,
                    qm_perturbed: result.qm_perturbed,
                    median_perturbed_count: result.median_perturbed_count(),
                });
                let doc = ResultDocument {
                    config_hash: self.hash.clone(),
                    dataset: test_ds.name.clone(),
                    technique: name.clone(),
                    strategy,
                    seed: self.cfg.seed,
                    result,
                };
                let rel = format!("results/{}.json", result_name(&name, strategy));
                self.write(&rel, "evaluate", (serde_json::to_string(&doc)? + "\n").as_bytes())?;
            }
        }
        let best = rows
            .iter()
            .fold(None::<&SummaryRow>, |best, r| match best {
                Some(b) if b.changed >= r.changed => Some(b),
                _ => Some(r),
            })
            .cloned();
        let summary = Summary {
            config_hash: self.hash.clone(),
            dataset: test_ds.name.clone(),
            rows,
            best,
        };
        self.write(SUMMARY_JSON, "evaluate", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
        self.write(SUMMARY_CSV, "evaluate", summary_table(&summary, &self.cfg).as_bytes())?;
        println!("{} result documents", summary.rows.len());
        if let Some(b) = &summary.best {
            println!("most changed: {} / {} ({} of {})", b.technique, b.strategy, b.changed, b.n);
        }
        Ok(())
    }

    pub fn card(&self) -> anyhow::Result<()> {
        let mut count = 0;
        for name in self.cfg.technique_names() {
            for &strategy in &self.cfg.evaluate.strategies {
                let stem = result_name(&name, strategy);
                let doc: ResultDocument =
                    serde_json::from_str(&self.read(&format!("results/{stem}.json"), "evaluate")?)?;
                let meta = CardMeta {
                    dataset: doc.dataset.clone(),
                    technique: doc.technique.clone(),
                    strategy: doc.strategy,
                    seed: doc.seed,
                    config_hash: self.hash.clone(),
                };
                let card = build_card(&doc.result, &meta)?;
                self.write(&format!("cards/{stem}.json"), "card", emit_json(&card).as_bytes())?;
                self.write(&format!("cards/{stem}.svg"), "card", render_svg(&card).as_bytes())?;
                count += 1;
            }
        }
        println!("{count} cards");
        Ok(())
    }
}

/// Technique rows × strategy columns of changed counts.
fn summary_table(summary: &Summary, cfg: &Config) -> String {
    let strategies: Vec<String> = cfg.evaluate.strategies.iter().map(Strategy::name).collect();
    let mut out = format!("# config_hash={}\ntechnique,{}\n", summary.config_hash, strategies.join(","));
    for name in cfg.technique_names() {
        let cells: Vec<String> = strategies
            .iter()
            .map(|s| {
                summary
                    .rows
                    .iter()
                    .find(|r| r.technique == name && &r.strategy == s)
                    .map(|r| r.changed.to_string())
                    .unwrap_or_default()
            })
            .collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}
