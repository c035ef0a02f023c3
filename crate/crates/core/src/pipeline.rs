//! Experiment orchestration: JSON configs, the staged
//! train / map / inject / infer / sweep / correct flow, content-addressed
//! stage caching, and artifact emission.
//!
//! Every artifact carries the resolved config's hash (a `config_hash` JSON
//! field, or a leading comment for CSV/PGM/netlist files). Stage outputs
//! are cached through hash sidecars under `.stage/`; a rerun with an
//! unchanged config loads artifacts instead of recomputing. All float
//! output goes through [`fmt_f64`], so identical configs produce
//! byte-identical files regardless of the worker-pool size.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::corrector::{self, CorrectorConfig};
use crate::crossbar::{batch_inference, map_network, CrossbarStack};
use crate::dataset::Dataset;
use crate::defects::{
    apply_defects, build_mask, pattern_for_target_pairs, sweep_csv, sweep_patterns, DefectSpec,
    FaultMode, Pattern, PatternFamily,
};
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::mlp::{self, dense_topology, MlpModel, Samples, TrainConfig};
use crate::netlist::{export_netlist, verify_netlist};
use crate::report::{bytes_hash, content_hash, derive_seed, fmt_f64};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: String,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
}

fn default_n_train() -> usize {
    1617
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainStageConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_rate: f64,
    /// Accept the first seed whose held-out accuracy reaches this gate.
    pub min_test_accuracy: f64,
    /// Additional seeds tried when a run lands under the gate.
    pub max_seed_retries: usize,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50, 20, 8],
            epochs: 150,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            dropout_rate: 0.0,
            min_test_accuracy: 0.95,
            max_seed_retries: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub target_array: usize,
    pub families: Vec<PatternFamily>,
    pub target_pair_counts: Vec<usize>,
    pub modes: Vec<FaultMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            target_array: 0,
            families: PatternFamily::ALL.to_vec(),
            target_pair_counts: vec![0, 50, 100, 200, 300, 500, 1000],
            modes: vec![FaultMode::StuckOn, FaultMode::StuckOff],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorStageConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_rates: Vec<f64>,
    /// Which entry of `defects` provides the circuit; `None` corrects the
    /// defect-free stack.
    pub defect_index: Option<usize>,
}

impl Default for CorrectorStageConfig {
    fn default() -> Self {
        let base = CorrectorConfig::default();
        Self {
            hidden: base.hidden,
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            momentum: base.momentum,
            dropout_rates: base.dropout_rates,
            defect_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainStageConfig,
    #[serde(default)]
    pub device: DeviceParams,
    #[serde(default)]
    pub defects: Vec<DefectSpec>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub corrector: Option<CorrectorStageConfig>,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker-pool size; results do not depend on it, so it is excluded
    /// from the config hash.
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version {}",
                self.schema_version
            )));
        }
        self.device.validate()?;
        if let Some(c) = &self.corrector {
            if let Some(i) = c.defect_index {
                if i >= self.defects.len() {
                    return Err(Error::Config(format!(
                        "corrector defect_index {i} but only {} defects configured",
                        self.defects.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hash of everything that determines results (jobs excluded).
    pub fn semantic_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.jobs = None;
        content_hash(&semantic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainAttempt {
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub test_accuracy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub provenance: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// Worker-pool size this run executed with (results do not depend on it).
    pub jobs: Option<usize>,
    pub stage_seeds: BTreeMap<String, u64>,
    pub train_attempts: Vec<TrainAttempt>,
    pub artifacts: Vec<ArtifactRecord>,
    pub cache_hits: Vec<String>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    pub fn artifact(&self, stage: &str, suffix: &str) -> Option<&ArtifactRecord> {
        self.artifacts
            .iter()
            .find(|a| a.stage == stage && a.path.ends_with(suffix))
    }
}

pub struct Pipeline {
    config: ExperimentConfig,
    out_dir: PathBuf,
    config_hash: String,
    manifest: RunManifest,
    dataset_file_hash: String,
    dataset: Option<Dataset>,
    model: Option<MlpModel>,
    stack: Option<CrossbarStack>,
    /// Stages already run or cache-validated this session; repeat calls
    /// must not re-record artifacts.
    completed: std::collections::BTreeSet<String>,
}

impl Pipeline {
    /// Validates the config, creates the output directory, and writes the
    /// resolved config beside the future artifacts.
    pub fn new(config: ExperimentConfig, out_dir: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::create_dir_all(out_dir.join(".stage"))?;
        let config_hash = config.semantic_hash();
        let master = config.master_seed;
        let mut stage_seeds = BTreeMap::new();
        for stream in ["split", "train-init", "train-shuffle", "corrector", "corrector-split"] {
            stage_seeds.insert(stream.to_string(), derive_seed(master, stream));
        }
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            provenance: format!("reramlab {}", env!("CARGO_PKG_VERSION")),
            config_hash: config_hash.clone(),
            master_seed: master,
            jobs: config.jobs,
            stage_seeds,
            train_attempts: Vec::new(),
            artifacts: Vec::new(),
            cache_hits: Vec::new(),
            timings: Vec::new(),
        };
        let mut pipeline = Self {
            config,
            out_dir: out_dir.to_path_buf(),
            config_hash,
            manifest,
            dataset_file_hash: String::new(),
            dataset: None,
            model: None,
            stack: None,
            completed: std::collections::BTreeSet::new(),
        };
        // The resolved config is the semantic config: the worker-pool size
        // does not influence results, so it is normalized out and recorded
        // in the manifest instead.
        let mut semantic = pipeline.config.clone();
        semantic.jobs = None;
        let mut resolved = serde_json::to_value(&semantic)?;
        resolved["config_hash"] = serde_json::Value::String(pipeline.config_hash.clone());
        pipeline.write_artifact(
            "config",
            "resolved_config.json",
            serde_json::to_string_pretty(&resolved)?.as_bytes(),
        )?;
        Ok(pipeline)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn seed(&self, stream: &str) -> u64 {
        self.manifest.stage_seeds[stream]
    }

    fn record_timing(&mut self, stage: &str, start: Instant) {
        self.manifest.timings.push(StageTiming {
            stage: stage.to_string(),
            millis: start.elapsed().as_millis(),
        });
    }

    /// Write bytes under `out_dir` and record the artifact.
    fn write_artifact(&mut self, stage: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.manifest.artifacts.push(ArtifactRecord {
            stage: stage.to_string(),
            path: rel.to_string(),
            hash: bytes_hash(bytes),
        });
        Ok(())
    }

    /// Record an existing file (cache hit) as an artifact.
    fn record_artifact(&mut self, stage: &str, rel: &str) -> Result<()> {
        let bytes = std::fs::read(self.out_dir.join(rel))?;
        self.manifest.artifacts.push(ArtifactRecord {
            stage: stage.to_string(),
            path: rel.to_string(),
            hash: bytes_hash(&bytes),
        });
        Ok(())
    }

    fn csv_with_hash(&self, body: &str) -> String {
        format!("# config_hash={}\n{}", self.config_hash, body)
    }

    fn pgm_with_hash(&self, body: &str) -> String {
        match body.split_once('\n') {
            Some((magic, rest)) => {
                format!("{magic}\n# config_hash={}\n{rest}", self.config_hash)
            }
            None => body.to_string(),
        }
    }

    /// True (and records a cache hit) when the stage's sidecar matches
    /// `stage_hash` and every artifact file exists.
    fn stage_cached(&mut self, stage: &str, stage_hash: &str, artifacts: &[&str]) -> Result<bool> {
        let sidecar = self.out_dir.join(".stage").join(format!("{stage}.hash"));
        let fresh = std::fs::read_to_string(&sidecar)
            .map(|h| h == stage_hash)
            .unwrap_or(false)
            && artifacts.iter().all(|rel| self.out_dir.join(rel).exists());
        if fresh {
            self.manifest.cache_hits.push(stage.to_string());
            for rel in artifacts {
                self.record_artifact(stage, rel)?;
            }
            self.completed.insert(stage.to_string());
        }
        Ok(fresh)
    }

    fn seal_stage(&mut self, stage: &str, stage_hash: &str) -> Result<()> {
        std::fs::write(
            self.out_dir.join(".stage").join(format!("{stage}.hash")),
            stage_hash,
        )?;
        self.completed.insert(stage.to_string());
        Ok(())
    }

    pub fn ensure_dataset(&mut self) -> Result<()> {
        if self.dataset.is_some() {
            return Ok(());
        }
        let start = Instant::now();
        let path = PathBuf::from(&self.config.dataset.path);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display())).in_stage("dataset")
        })?;
        self.dataset_file_hash = bytes_hash(&bytes);
        let ds = Dataset::load_optdigits(&path)
            .and_then(|ds| ds.with_split(self.config.dataset.n_train, self.seed("split")))
            .map_err(|e| e.in_stage("dataset"))?;
        self.dataset = Some(ds);
        self.record_timing("dataset", start);
        Ok(())
    }

    fn dataset(&self) -> &Dataset {
        self.dataset.as_ref().expect("ensure_dataset ran")
    }

    fn train_stage_hash(&self) -> String {
        content_hash(&serde_json::json!({
            "dataset_file": self.dataset_file_hash,
            "dataset": self.config.dataset,
            "train": self.config.train,
            "split_seed": self.seed("split"),
            "init_seed": self.seed("train-init"),
            "shuffle_seed": self.seed("train-shuffle"),
        }))
    }

    /// Train the digit model, retrying with successor seeds while the
    /// held-out accuracy is under the configured gate.
    pub fn ensure_model(&mut self) -> Result<()> {
        if self.model.is_some() {
            return Ok(());
        }
        self.ensure_dataset()?;
        let stage_hash = self.train_stage_hash();
        let artifacts = ["model.json", "train_curve.csv"];
        if self.stage_cached("train", &stage_hash, &artifacts)? {
            let model = MlpModel::load(&self.out_dir.join("model.json"))
                .map_err(|e| e.in_stage("train"))?;
            self.model = Some(model);
            return Ok(());
        }
        let start = Instant::now();
        let cfg = &self.config.train;
        let ds = self.dataset.as_ref().expect("ensure_dataset ran");
        let train_set = Samples::from_images(&ds.train_images()?);
        let test_set = Samples::from_images(&ds.test_images()?);
        let topology = dense_topology(
            crate::dataset::IMAGE_PIXELS,
            &cfg.hidden,
            crate::dataset::NUM_CLASSES,
        );
        let mut attempts = Vec::new();
        let mut best: Option<(f64, mlp::TrainOutcome)> = None;
        for retry in 0..=cfg.max_seed_retries {
            let init_seed = self.seed("train-init").wrapping_add(retry as u64);
            let shuffle_seed = self.seed("train-shuffle").wrapping_add(retry as u64);
            let model = MlpModel::init(topology.clone(), init_seed)?;
            let train_cfg = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                momentum: cfg.momentum,
                dropout_rate: cfg.dropout_rate,
                seed: shuffle_seed,
            };
            let outcome = mlp::train(&model, &train_set, Some(&test_set), &train_cfg)
                .map_err(|e| e.in_stage("train"))?;
            let accuracy = outcome.final_eval_accuracy.expect("test set provided");
            let accepted = accuracy >= cfg.min_test_accuracy;
            attempts.push(TrainAttempt {
                init_seed,
                shuffle_seed,
                test_accuracy: accuracy,
                accepted,
            });
            let replace = best.as_ref().is_none_or(|(a, _)| accuracy > *a);
            if replace {
                best = Some((accuracy, outcome));
            }
            if accepted {
                break;
            }
        }
        let (_, outcome) = best.expect("at least one attempt");
        self.manifest.train_attempts = attempts;

        let mut model_json = outcome.model.to_json();
        model_json["config_hash"] = serde_json::Value::String(self.config_hash.clone());
        self.write_artifact(
            "train",
            "model.json",
            serde_json::to_string_pretty(&model_json)?.as_bytes(),
        )?;
        let mut curve = String::from("epoch,mean_loss,train_accuracy\n");
        for point in &outcome.curve {
            curve.push_str(&format!(
                "{},{},{}\n",
                point.epoch,
                fmt_f64(point.mean_loss),
                fmt_f64(point.train_accuracy)
            ));
        }
        let curve = self.csv_with_hash(&curve);
        self.write_artifact("train", "train_curve.csv", curve.as_bytes())?;
        self.seal_stage("train", &stage_hash)?;
        self.model = Some(outcome.model);
        self.record_timing("train", start);
        Ok(())
    }

    fn model(&self) -> &MlpModel {
        self.model.as_ref().expect("ensure_model ran")
    }

    pub fn ensure_stack(&mut self) -> Result<()> {
        if self.stack.is_some() {
            return Ok(());
        }
        self.ensure_model()?;
        let stage_hash = content_hash(&serde_json::json!({
            "model": content_hash(&self.model().to_json()),
            "device": self.config.device,
        }));
        if self.stage_cached("map", &stage_hash, &["stack.json"])? {
            let stack = CrossbarStack::load(&self.out_dir.join("stack.json"))
                .map_err(|e| e.in_stage("map"))?;
            self.stack = Some(stack);
            return Ok(());
        }
        let start = Instant::now();
        let stack =
            map_network(self.model(), &self.config.device).map_err(|e| e.in_stage("map"))?;
        let mut stack_json = stack.to_json();
        stack_json["config_hash"] = serde_json::Value::String(self.config_hash.clone());
        self.write_artifact(
            "map",
            "stack.json",
            serde_json::to_string(&stack_json)?.as_bytes(),
        )?;
        self.seal_stage("map", &stage_hash)?;
        self.stack = Some(stack);
        self.record_timing("map", start);
        Ok(())
    }

    fn stack(&self) -> &CrossbarStack {
        self.stack.as_ref().expect("ensure_stack ran")
    }

    /// The loaded corpus, loading it first if needed.
    pub fn corpus(&mut self) -> Result<&Dataset> {
        self.ensure_dataset()?;
        Ok(self.dataset())
    }

    /// The trained model, training it first if needed.
    pub fn trained_model(&mut self) -> Result<&MlpModel> {
        self.ensure_model()?;
        Ok(self.model())
    }

    /// The mapped defect-free stack, building it first if needed.
    pub fn mapped_stack(&mut self) -> Result<&CrossbarStack> {
        self.ensure_stack()?;
        Ok(self.stack())
    }

    pub fn defect_spec(&self, index: usize) -> Result<&DefectSpec> {
        self.config.defects.get(index).ok_or_else(|| {
            Error::Config(format!(
                "defect index {index} out of range ({} configured)",
                self.config.defects.len()
            ))
        })
    }

    /// Apply defect `index`, writing the defective stack plus mask maps.
    pub fn ensure_defective_stack(&mut self, index: usize) -> Result<CrossbarStack> {
        self.ensure_stack()?;
        let spec = *self.defect_spec(index)?;
        let stage = format!("inject-{index}");
        let dir = format!("defect_{index}");
        let stack_rel = format!("{dir}/stack.json");
        let mask_csv_rel = format!("{dir}/mask.csv");
        let mask_pgm_rel = format!("{dir}/mask.pgm");
        if self.completed.contains(&stage) {
            return CrossbarStack::load(&self.out_dir.join(&stack_rel))
                .map_err(|e| e.in_stage(&stage));
        }
        let stage_hash = content_hash(&serde_json::json!({
            "stack": content_hash(&self.stack().to_json()),
            "defect": spec,
        }));
        if self.stage_cached(&stage, &stage_hash, &[&stack_rel, &mask_csv_rel, &mask_pgm_rel])? {
            return CrossbarStack::load(&self.out_dir.join(&stack_rel))
                .map_err(|e| e.in_stage(&stage));
        }
        let start = Instant::now();
        let defective =
            apply_defects(self.stack(), &spec).map_err(|e| e.in_stage(&stage))?;
        let arr = defective.array(spec.target_array)?;
        let mask = build_mask(&spec.pattern, arr.rows(), arr.cols())?;
        let mut stack_json = defective.to_json();
        stack_json["config_hash"] = serde_json::Value::String(self.config_hash.clone());
        stack_json["defect"] = serde_json::to_value(spec)?;
        stack_json["defect_pair_count"] =
            serde_json::Value::Number(mask.pair_count().into());
        self.write_artifact(&stage, &stack_rel, serde_json::to_string(&stack_json)?.as_bytes())?;
        let csv = self.csv_with_hash(&mask.to_csv());
        self.write_artifact(&stage, &mask_csv_rel, csv.as_bytes())?;
        let pgm = self.pgm_with_hash(&mask.to_pgm());
        self.write_artifact(&stage, &mask_pgm_rel, pgm.as_bytes())?;
        self.seal_stage(&stage, &stage_hash)?;
        self.record_timing(&stage, start);
        Ok(defective)
    }

    fn write_inference_report(
        &mut self,
        stage: &str,
        rel_base: &str,
        stack: &CrossbarStack,
    ) -> Result<f64> {
        let test = self.dataset().test_images()?;
        let report = batch_inference(stack, &test).map_err(|e| e.in_stage(stage))?;
        let csv = self.csv_with_hash(&report.to_csv());
        self.write_artifact(stage, &format!("{rel_base}.csv"), csv.as_bytes())?;
        let summary = report.summary_json(&self.config_hash);
        self.write_artifact(
            stage,
            &format!("{rel_base}.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
        Ok(report.accuracy)
    }

    /// Baseline inference on the test split, plus one report per defect.
    pub fn infer(&mut self) -> Result<()> {
        self.ensure_stack()?;
        let stage_hash = content_hash(&serde_json::json!({
            "stack": content_hash(&self.stack().to_json()),
            "dataset_file": self.dataset_file_hash,
            "dataset": self.config.dataset,
            "split_seed": self.seed("split"),
            "defects": self.config.defects,
        }));
        let mut artifacts = vec![
            "inference_baseline.csv".to_string(),
            "inference_baseline.json".to_string(),
        ];
        for i in 0..self.config.defects.len() {
            artifacts.push(format!("defect_{i}/inference.csv"));
            artifacts.push(format!("defect_{i}/inference.json"));
        }
        let artifact_refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
        if self.stage_cached("infer", &stage_hash, &artifact_refs)? {
            return Ok(());
        }
        let start = Instant::now();
        let stack = self.stack().clone();
        self.write_inference_report("infer", "inference_baseline", &stack)?;
        for i in 0..self.config.defects.len() {
            let defective = self.ensure_defective_stack(i)?;
            self.write_inference_report("infer", &format!("defect_{i}/inference"), &defective)?;
        }
        self.seal_stage("infer", &stage_hash)?;
        self.record_timing("infer", start);
        Ok(())
    }

    /// Accuracy-vs-pair-count curves, one CSV per pattern family with one
    /// accuracy column per fault mode.
    pub fn sweep(&mut self) -> Result<()> {
        let Some(sweep_cfg) = self.config.sweep.clone() else {
            return Ok(());
        };
        self.ensure_stack()?;
        let stage_hash = content_hash(&serde_json::json!({
            "stack": content_hash(&self.stack().to_json()),
            "dataset_file": self.dataset_file_hash,
            "dataset": self.config.dataset,
            "split_seed": self.seed("split"),
            "sweep": sweep_cfg,
        }));
        let artifacts: Vec<String> = sweep_cfg
            .families
            .iter()
            .map(|f| format!("sweep/{}.csv", f.name()))
            .collect();
        let artifact_refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
        if self.stage_cached("sweep", &stage_hash, &artifact_refs)? {
            return Ok(());
        }
        let start = Instant::now();
        let stack = self.stack().clone();
        let arr = stack.array(sweep_cfg.target_array)?;
        let (rows, cols) = (arr.rows(), arr.cols());
        let test = self.dataset().test_images()?;
        for family in &sweep_cfg.families {
            let schedule: Vec<Pattern> = sweep_cfg
                .target_pair_counts
                .iter()
                .map(|&target| pattern_for_target_pairs(*family, rows, cols, target))
                .collect::<Result<_>>()?;
            let mut names = Vec::new();
            let mut curves = Vec::new();
            for mode in &sweep_cfg.modes {
                let points =
                    sweep_patterns(&stack, sweep_cfg.target_array, &schedule, mode, &test)
                        .map_err(|e| e.in_stage("sweep"))?;
                names.push(mode_label(mode));
                curves.push(points);
            }
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let csv = self.csv_with_hash(&sweep_csv(&name_refs, &curves));
            self.write_artifact("sweep", &format!("sweep/{}.csv", family.name()), csv.as_bytes())?;
        }
        self.seal_stage("sweep", &stage_hash)?;
        self.record_timing("sweep", start);
        Ok(())
    }

    /// Harvest corrector features from the configured circuit and train
    /// one corrector per dropout rate.
    pub fn correct(&mut self) -> Result<()> {
        let Some(corr_cfg) = self.config.corrector.clone() else {
            return Ok(());
        };
        self.ensure_stack()?;
        let source_index = corr_cfg
            .defect_index
            .or(if self.config.defects.is_empty() { None } else { Some(0) });
        let source = match source_index {
            Some(i) => self.ensure_defective_stack(i)?,
            None => self.stack().clone(),
        };
        let stage_hash = content_hash(&serde_json::json!({
            "stack": content_hash(&source.to_json()),
            "dataset_file": self.dataset_file_hash,
            "corrector": corr_cfg,
            "seed": self.seed("corrector"),
            "split_seed": self.seed("corrector-split"),
        }));
        let artifacts = [
            "corrector/dataset.csv",
            "corrector/results.csv",
            "corrector/results.json",
        ];
        if self.stage_cached("correct", &stage_hash, &artifacts)? {
            return Ok(());
        }
        let start = Instant::now();
        let mut cds = corrector::harvest(&source, self.dataset(), self.seed("corrector-split"))
            .map_err(|e| e.in_stage("correct"))?;
        if let Some(i) = source_index {
            cds.set_defect_hash(content_hash(self.defect_spec(i)?));
        }
        let csv = self.csv_with_hash(&cds.to_csv());
        self.write_artifact("correct", "corrector/dataset.csv", csv.as_bytes())?;
        let run_cfg = CorrectorConfig {
            hidden: corr_cfg.hidden.clone(),
            epochs: corr_cfg.epochs,
            batch_size: corr_cfg.batch_size,
            learning_rate: corr_cfg.learning_rate,
            momentum: corr_cfg.momentum,
            dropout_rates: corr_cfg.dropout_rates.clone(),
            seed: self.seed("corrector"),
        };
        let outcomes = corrector::correct(&cds, &run_cfg).map_err(|e| e.in_stage("correct"))?;
        let csv = self.csv_with_hash(&corrector::results_csv(&outcomes));
        self.write_artifact("correct", "corrector/results.csv", csv.as_bytes())?;
        let results_json = serde_json::json!({
            "schema_version": 1,
            "config_hash": self.config_hash,
            "stack_hash": cds.stack_hash(),
            "defect_hash": cds.defect_hash(),
            "split_seed": cds.split_seed(),
            "corrector": corr_cfg,
            "outcomes": outcomes,
        });
        self.write_artifact(
            "correct",
            "corrector/results.json",
            serde_json::to_string_pretty(&results_json)?.as_bytes(),
        )?;
        self.seal_stage("correct", &stage_hash)?;
        self.record_timing("correct", start);
        Ok(())
    }

    /// Render one array quantity as CSV and/or PGM under `maps/`.
    pub fn export_map(
        &mut self,
        array_index: usize,
        quantity: MapQuantity,
        format: MapFormat,
        defect: Option<usize>,
    ) -> Result<Vec<PathBuf>> {
        self.ensure_stack()?;
        let stack = match defect {
            Some(i) => self.ensure_defective_stack(i)?,
            None => self.stack().clone(),
        };
        let suffix = match defect {
            Some(i) => format!("_defect{i}"),
            None => String::new(),
        };
        let base = format!("maps/array{array_index}_{}{suffix}", quantity.name());
        let mut written = Vec::new();
        let grid = match quantity {
            MapQuantity::DefectMask => {
                let i = defect.ok_or_else(|| {
                    Error::Config("defect_mask maps need a defect index".into())
                })?;
                let spec = *self.defect_spec(i)?;
                if spec.target_array != array_index {
                    return Err(Error::Config(format!(
                        "defect {i} targets array {}, not {array_index}",
                        spec.target_array
                    )));
                }
                let arr = stack.array(array_index)?;
                let mask = build_mask(&spec.pattern, arr.rows(), arr.cols())?;
                if matches!(format, MapFormat::Csv | MapFormat::Both) {
                    let rel = format!("{base}.csv");
                    let csv = self.csv_with_hash(&mask.to_csv());
                    self.write_artifact("export-map", &rel, csv.as_bytes())?;
                    written.push(self.out_dir.join(rel));
                }
                if matches!(format, MapFormat::Pgm | MapFormat::Both) {
                    let rel = format!("{base}.pgm");
                    let pgm = self.pgm_with_hash(&mask.to_pgm());
                    self.write_artifact("export-map", &rel, pgm.as_bytes())?;
                    written.push(self.out_dir.join(rel));
                }
                return Ok(written);
            }
            MapQuantity::Gap => gap_grid(&stack, array_index)?,
            MapQuantity::GPlus => conductance_grid(&stack, array_index, true)?,
            MapQuantity::GMinus => conductance_grid(&stack, array_index, false)?,
        };
        if matches!(format, MapFormat::Csv | MapFormat::Both) {
            let rel = format!("{base}.csv");
            let csv = self.csv_with_hash(&grid_csv(&grid));
            self.write_artifact("export-map", &rel, csv.as_bytes())?;
            written.push(self.out_dir.join(rel));
        }
        if matches!(format, MapFormat::Pgm | MapFormat::Both) {
            let rel = format!("{base}.pgm");
            let pgm = self.pgm_with_hash(&grid_pgm(&grid));
            self.write_artifact("export-map", &rel, pgm.as_bytes())?;
            written.push(self.out_dir.join(rel));
        }
        Ok(written)
    }

    /// Flat resistor netlist (defect-free or for one configured defect),
    /// verified by the built-in reader before writing.
    pub fn export_netlist_file(&mut self, defect: Option<usize>) -> Result<PathBuf> {
        self.ensure_stack()?;
        let (stack, rel) = match defect {
            Some(i) => (self.ensure_defective_stack(i)?, format!("netlist_defect{i}.sp")),
            None => (self.stack().clone(), "netlist.sp".to_string()),
        };
        let body = export_netlist(&stack);
        let text = format!("* config_hash={}\n{body}", self.config_hash);
        verify_netlist(&stack, &text).map_err(|e| e.in_stage("export-netlist"))?;
        self.write_artifact("export-netlist", &rel, text.as_bytes())?;
        Ok(self.out_dir.join(rel))
    }

    /// Every stage the config requests, in pipeline order.
    pub fn run(&mut self) -> Result<()> {
        self.ensure_dataset()?;
        self.ensure_model()?;
        self.ensure_stack()?;
        for i in 0..self.config.defects.len() {
            self.ensure_defective_stack(i)?;
        }
        self.infer()?;
        self.sweep()?;
        self.correct()?;
        Ok(())
    }

    /// Write `manifest.json` and hand the manifest back.
    pub fn finish(mut self) -> Result<RunManifest> {
        let manifest_json = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.out_dir.join("manifest.json");
        std::fs::write(&path, manifest_json)?;
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(self.manifest)
    }
}

pub fn mode_label(mode: &FaultMode) -> String {
    match mode {
        FaultMode::StuckOn => "stuck_on".to_string(),
        FaultMode::StuckOff => "stuck_off".to_string(),
        FaultMode::StuckAt { .. } => "stuck_at".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapQuantity {
    Gap,
    GPlus,
    GMinus,
    DefectMask,
}

impl MapQuantity {
    pub fn name(&self) -> &'static str {
        match self {
            MapQuantity::Gap => "gap",
            MapQuantity::GPlus => "g_plus",
            MapQuantity::GMinus => "g_minus",
            MapQuantity::DefectMask => "defect_mask",
        }
    }
}

impl std::str::FromStr for MapQuantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(MapQuantity::Gap),
            "g_plus" => Ok(MapQuantity::GPlus),
            "g_minus" => Ok(MapQuantity::GMinus),
            "defect_mask" => Ok(MapQuantity::DefectMask),
            other => Err(Error::Config(format!("unknown map quantity {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Csv,
    Pgm,
    Both,
}

impl std::str::FromStr for MapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MapFormat::Csv),
            "pgm" => Ok(MapFormat::Pgm),
            "both" => Ok(MapFormat::Both),
            other => Err(Error::Config(format!("unknown map format {other}"))),
        }
    }
}

/// Per-cell gap of the weight-side (larger-conductance) device.
/// Conductances outside the calibrated range clamp to the nearest
/// endpoint, so a dead pair (0 S) renders at the maximum gap.
fn gap_grid(stack: &CrossbarStack, array_index: usize) -> Result<Vec<Vec<f64>>> {
    let device = *stack.device();
    let arr = stack.array(array_index)?;
    let mut grid = vec![vec![0.0; arr.cols()]; arr.rows()];
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let pair = arr.pair(i, j);
            let g = pair.g_plus.max(pair.g_minus).clamp(device.g_off, device.g_on);
            *cell = device.gap_from_conductance(g)?;
        }
    }
    Ok(grid)
}

fn conductance_grid(
    stack: &CrossbarStack,
    array_index: usize,
    plus: bool,
) -> Result<Vec<Vec<f64>>> {
    let arr = stack.array(array_index)?;
    let mut grid = vec![vec![0.0; arr.cols()]; arr.rows()];
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let pair = arr.pair(i, j);
            *cell = if plus { pair.g_plus } else { pair.g_minus };
        }
    }
    Ok(grid)
}

fn grid_csv(grid: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// 8-bit PGM, linearly scaled; the scale is recorded in a header comment.
fn grid_pgm(grid: &[Vec<f64>]) -> String {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in grid.iter().flatten() {
        min = min.min(*v);
        max = max.max(*v);
    }
    let span = max - min;
    let mut out = format!(
        "P2\n# linear scale: 0 -> {}, 255 -> {}\n{cols} {rows}\n255\n",
        fmt_f64(min),
        fmt_f64(max)
    );
    for row in grid {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let gray = if span == 0.0 {
                    0.0
                } else {
                    ((v - min) / span * 255.0).round()
                };
                format!("{}", gray as u8)
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Run `work` on a private pool of `jobs` workers, or inline on the
/// default pool when `jobs` is `None`.
pub fn with_worker_pool<R: Send>(
    jobs: Option<usize>,
    work: impl FnOnce() -> R + Send,
) -> Result<R> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

/// Parse the config, apply CLI overrides, size the worker pool, run the
/// requested stages, and write the manifest.
pub fn run_experiment(
    mut config: ExperimentConfig,
    out_dir: &Path,
    seed_override: Option<u64>,
    jobs_override: Option<usize>,
) -> Result<RunManifest> {
    if let Some(seed) = seed_override {
        config.master_seed = seed;
    }
    if let Some(jobs) = jobs_override {
        config.jobs = Some(jobs);
    }
    let jobs = config.jobs;
    with_worker_pool(jobs, move || -> Result<RunManifest> {
        let mut pipeline = Pipeline::new(config, out_dir)?;
        pipeline.run()?;
        pipeline.finish()
    })?
}
