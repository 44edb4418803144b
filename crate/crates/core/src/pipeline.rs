//! Pipeline orchestration: a stage DAG over persisted artifacts.
//!
//! Every stage writes its outputs atomically (temp file + rename) and
//! records content hashes in a manifest. Re-running a stage whose input
//! hash matches the manifest and whose outputs are intact is a no-op, so
//! expensive stages (defense training) are never repeated needlessly. The
//! whole pipeline is a pure function of (input data, config, global seed),
//! timing sections aside.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{AcquisitionConfig, BudgetSnapshot};
use crate::attacks::{self, AdvDataset, AttackKind, AttackSpec, AttackSuite};
use crate::data::{self, Dataset, SplitSpec};
use crate::defenses::{self, DefenseConfig, DefenseId, Portfolio};
use crate::error::{Result, SageError};
use crate::evaluation::{
    self, AblationReport, EvalReport, ExclusionReport, ProtocolInputs, SelectionOutcome,
};
use crate::matrix::{self, AttackPool, OptimalLabel};
use crate::nnet::{self, NeuralModel, TrainConfig};
use crate::seed;
use crate::selector::{self, TreeEnsemble};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Csv {
        path: String,
        label_column: String,
    },
    Synth {
        n: usize,
        d: usize,
        classes: usize,
        imbalance: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolChoice {
    Standard,
    EpsShift,
    Exclusion {
        /// Attack kind names per tier; `None` picks the three kinds that
        /// hurt the undefended model most, nested.
        tiers: Option<Vec<Vec<String>>>,
    },
    AlAblation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSettings {
    pub kinds: Vec<String>,
    pub eps_grid: Vec<f64>,
    pub train_epsilon: f64,
    pub steps: usize,
    pub overshoot: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    pub decay: f64,
    pub scale_copies: usize,
    pub variance_samples: usize,
    pub variance_radius: f64,
    pub freeze_categorical: bool,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let spec = AttackSpec::new(AttackKind::Fgsm, 0.0);
        AttackSettings {
            kinds: AttackKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            eps_grid: vec![0.01, 0.1, 0.2, 0.3],
            train_epsilon: 0.1,
            steps: spec.steps,
            overshoot: spec.overshoot,
            max_iters: spec.max_iters,
            fd_step: spec.fd_step,
            decay: spec.decay,
            scale_copies: spec.scale_copies,
            variance_samples: spec.variance_samples,
            variance_radius: spec.variance_radius,
            freeze_categorical: spec.freeze_categorical,
        }
    }
}

impl AttackSettings {
    pub fn base_spec(&self) -> AttackSpec {
        let mut spec = AttackSpec::new(AttackKind::Fgsm, 0.0);
        spec.steps = self.steps;
        spec.overshoot = self.overshoot;
        spec.max_iters = self.max_iters;
        spec.fd_step = self.fd_step;
        spec.decay = self.decay;
        spec.scale_copies = self.scale_copies;
        spec.variance_samples = self.variance_samples;
        spec.variance_radius = self.variance_radius;
        spec.freeze_categorical = self.freeze_categorical;
        spec
    }

    pub fn parsed_kinds(&self) -> Result<Vec<AttackKind>> {
        self.kinds.iter().map(|k| AttackKind::parse(k)).collect()
    }
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_deploy_budget() -> f64 {
    0.5
}

fn default_random_runs() -> usize {
    100
}

fn default_recommend_k() -> usize {
    1
}

fn default_timing_cap() -> usize {
    2000
}

/// One config drives the whole pipeline; per-stage seeds derive from the
/// global seed and the stage name, so nested `seed` fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Standardization statistics from the training rows only, instead of
    /// the whole table.
    #[serde(default)]
    pub stats_on_train_only: bool,
    #[serde(default)]
    pub nnet: TrainConfig,
    #[serde(default)]
    pub attacks: AttackSettings,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default = "default_deploy_budget")]
    pub deploy_budget: f64,
    #[serde(default = "default_random_runs")]
    pub random_runs: usize,
    #[serde(default = "default_recommend_k")]
    pub recommend_k: usize,
    #[serde(default = "default_timing_cap")]
    pub timing_sample_cap: usize,
    pub protocol: ProtocolChoice,
    pub out_dir: String,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        seed::derive(self.seed, stage.name())
    }
}

/// Install a global worker pool. `n = 0` keeps the default. Results are
/// identical for any worker count by construction.
pub fn configure_workers(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Preprocess,
    TrainBaseline,
    Attack,
    TrainDefenses,
    Matrix,
    Acquire,
    TrainSelector,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Preprocess,
        Stage::TrainBaseline,
        Stage::Attack,
        Stage::TrainDefenses,
        Stage::Matrix,
        Stage::Acquire,
        Stage::TrainSelector,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::TrainBaseline => "train-baseline",
            Stage::Attack => "attack",
            Stage::TrainDefenses => "train-defenses",
            Stage::Matrix => "matrix",
            Stage::Acquire => "acquire",
            Stage::TrainSelector => "train-selector",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .find(|s| s.name() == name)
            .ok_or_else(|| SageError::InvalidArgument(format!("unknown stage '{name}'")))
    }

    pub fn deps(&self) -> &'static [Stage] {
        match self {
            Stage::Preprocess => &[],
            Stage::TrainBaseline => &[Stage::Preprocess],
            Stage::Attack => &[Stage::Preprocess, Stage::TrainBaseline],
            Stage::TrainDefenses => &[Stage::Preprocess, Stage::TrainBaseline],
            Stage::Matrix => &[Stage::Attack, Stage::TrainDefenses],
            Stage::Acquire => &[Stage::Matrix],
            Stage::TrainSelector => &[Stage::Acquire],
            Stage::Eval => &[
                Stage::Preprocess,
                Stage::TrainBaseline,
                Stage::Attack,
                Stage::TrainDefenses,
                Stage::Matrix,
                Stage::Acquire,
                Stage::TrainSelector,
            ],
            Stage::Report => &[Stage::Eval],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageRecord {
    input_hash: String,
    outputs: BTreeMap<String, String>,
    seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    stages: BTreeMap<String, StageRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory handle with atomic writes and manifest bookkeeping.
struct Workspace {
    root: PathBuf,
    manifest: Manifest,
}

impl Workspace {
    fn open(root: &Path) -> Result<Workspace> {
        std::fs::create_dir_all(root)?;
        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?
        } else {
            Manifest {
                version: 1,
                stages: BTreeMap::new(),
            }
        };
        Ok(Workspace {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Atomic write: temp file in the same directory, then rename.
    fn write_atomic(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(sha256_hex(bytes))
    }

    fn save_manifest(&self) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        let tmp = self.root.join("manifest.json.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, self.root.join("manifest.json"))?;
        Ok(())
    }

    fn record_stage(
        &mut self,
        stage: Stage,
        input_hash: String,
        outputs: BTreeMap<String, String>,
        stage_seed: u64,
    ) -> Result<()> {
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                input_hash,
                outputs,
                seed: stage_seed,
            },
        );
        self.save_manifest()
    }

    fn stage_done(&self, stage: Stage, input_hash: &str) -> bool {
        match self.manifest.stages.get(stage.name()) {
            None => false,
            Some(rec) => {
                rec.input_hash == input_hash
                    && rec.outputs.iter().all(|(rel, hash)| {
                        std::fs::read(self.path(rel))
                            .map(|bytes| sha256_hex(&bytes) == *hash)
                            .unwrap_or(false)
                    })
            }
        }
    }

    /// Verify an upstream stage exists and its artifacts are intact.
    fn require_stage(&self, stage: Stage, needed_by: Stage) -> Result<&StageRecord> {
        let rec = self
            .manifest
            .stages
            .get(stage.name())
            .ok_or_else(|| SageError::MissingStage {
                stage: needed_by.name().to_string(),
                needs: stage.name().to_string(),
            })?;
        for (rel, hash) in &rec.outputs {
            let bytes = std::fs::read(self.path(rel)).map_err(|_| SageError::MissingStage {
                stage: needed_by.name().to_string(),
                needs: stage.name().to_string(),
            })?;
            if sha256_hex(&bytes) != *hash {
                return Err(SageError::StaleArtifact {
                    stage: stage.name().to_string(),
                    detail: format!("artifact '{rel}' does not match its recorded hash"),
                });
            }
        }
        Ok(rec)
    }
}

/// In-memory cache of stage products, filled lazily from artifacts.
#[derive(Default)]
pub struct PipelineState {
    train_ds: Option<Dataset>,
    test_ds: Option<Dataset>,
    baseline: Option<NeuralModel>,
    suite: Option<AttackSuite>,
    portfolio: Option<Portfolio>,
    pool: Option<AttackPool>,
    perf_matrix: Option<crate::matrix::PerformanceMatrix>,
    labels: Option<Vec<OptimalLabel>>,
    snapshots: Option<Vec<BudgetSnapshot>>,
    selectors: Option<Vec<(f64, TreeEnsemble)>>,
    report: Option<ProtocolReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum ProtocolReport {
    Standard { report: EvalReport },
    EpsShift { report: EvalReport },
    Exclusion { report: ExclusionReport },
    AlAblation { report: AblationReport },
}

/// Remove every timing section from a serialized report, for byte-level
/// determinism comparisons.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timing");
            for v in map.values_mut() {
                strip_timing(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items.iter_mut() {
                strip_timing(v);
            }
        }
        _ => {}
    }
}

fn stage_input_hash(cfg: &PipelineConfig, ws: &Workspace, stage: Stage) -> Result<String> {
    // The hash covers the stage-relevant config slice, the global seed, and
    // the upstream stages' recorded output hashes.
    let slice = match stage {
        Stage::Preprocess => serde_json::json!({
            "dataset": serde_json::to_value(&cfg.dataset)?,
            "train_fraction": cfg.train_fraction,
            "stats_on_train_only": cfg.stats_on_train_only,
        }),
        Stage::TrainBaseline => serde_json::json!({
            "nnet": serde_json::to_value(&cfg.nnet)?,
        }),
        Stage::Attack => serde_json::json!({
            "attacks": serde_json::to_value(&cfg.attacks)?,
        }),
        Stage::TrainDefenses => serde_json::json!({
            "defense": serde_json::to_value(&cfg.defense)?,
        }),
        Stage::Matrix => serde_json::json!({}),
        Stage::Acquire => serde_json::json!({
            "acquisition": serde_json::to_value(&cfg.acquisition)?,
        }),
        Stage::TrainSelector => serde_json::json!({
            "forest": serde_json::to_value(&cfg.acquisition.forest)?,
            "deploy_budget": cfg.deploy_budget,
        }),
        Stage::Eval => serde_json::json!({
            "protocol": serde_json::to_value(&cfg.protocol)?,
            "random_runs": cfg.random_runs,
            "recommend_k": cfg.recommend_k,
            "timing_sample_cap": cfg.timing_sample_cap,
            "deploy_budget": cfg.deploy_budget,
        }),
        Stage::Report => serde_json::json!({}),
    };
    let mut upstream = BTreeMap::new();
    for dep in stage.deps() {
        if let Some(rec) = ws.manifest.stages.get(dep.name()) {
            upstream.insert(dep.name().to_string(), rec.outputs.clone());
        }
    }
    let blob = serde_json::json!({
        "seed": cfg.seed,
        "config": slice,
        "upstream": upstream,
    });
    Ok(sha256_hex(serde_json::to_string(&blob)?.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct SuiteManifest {
    train_epsilon: f64,
    entries: Vec<SuiteEntry>,
}

#[derive(Serialize, Deserialize)]
struct SuiteEntry {
    spec: AttackSpec,
    csv: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct BaselineMetrics {
    final_train_accuracy: f64,
    final_loss: f64,
    clean_test_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct RegistryEntry {
    id: String,
    file: String,
    clean_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct SelectorIndex {
    budgets: Vec<f64>,
    files: Vec<String>,
    deployed_budget: f64,
}

fn load_adv_csv(path: &Path, spec: AttackSpec, entry_seed: u64) -> Result<AdvDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let d = headers.len() - 4;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            row.push(record[3 + j].parse::<f64>().map_err(|_| {
                SageError::ModelFormat(format!("bad adversarial value '{}'", &record[3 + j]))
            })?);
        }
        y.push(record[3 + d].parse::<usize>().map_err(|_| {
            SageError::ModelFormat(format!("bad label '{}'", &record[3 + d]))
        })?);
        rows.push(row);
    }
    let n = rows.len();
    Ok(AdvDataset {
        x_adv: crate::mat::Mat::from_rows(&rows),
        y,
        spec,
        sample_seeds: (0..n as u64).map(|i| seed::derive_idx(entry_seed, i)).collect(),
    })
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    ws: Workspace,
    pub state: PipelineState,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Pipeline> {
        let ws = Workspace::open(Path::new(&cfg.out_dir))?;
        Ok(Pipeline {
            cfg,
            ws,
            state: PipelineState::default(),
        })
    }

    /// Run one stage: verify upstream artifacts, skip when memoized,
    /// otherwise execute and record output hashes.
    pub fn run_stage(&mut self, stage: Stage) -> Result<bool> {
        for dep in stage.deps() {
            self.ws.require_stage(*dep, stage)?;
        }
        let input_hash = stage_input_hash(&self.cfg, &self.ws, stage)?;
        if self.ws.stage_done(stage, &input_hash) {
            return Ok(false);
        }
        let stage_seed = self.cfg.stage_seed(stage);
        let outputs = match stage {
            Stage::Preprocess => self.stage_preprocess(stage_seed)?,
            Stage::TrainBaseline => self.stage_train_baseline(stage_seed)?,
            Stage::Attack => self.stage_attack(stage_seed)?,
            Stage::TrainDefenses => self.stage_train_defenses(stage_seed)?,
            Stage::Matrix => self.stage_matrix()?,
            Stage::Acquire => self.stage_acquire(stage_seed)?,
            Stage::TrainSelector => self.stage_train_selector(stage_seed)?,
            Stage::Eval => self.stage_eval(stage_seed)?,
            Stage::Report => self.stage_report()?,
        };
        self.ws.record_stage(stage, input_hash, outputs, stage_seed)?;
        Ok(true)
    }

    /// All stages in dependency order; returns the final report.
    pub fn run_all(&mut self) -> Result<ProtocolReport> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        self.load_report()
    }

    pub fn load_report(&mut self) -> Result<ProtocolReport> {
        if let Some(r) = &self.state.report {
            return Ok(r.clone());
        }
        let text = std::fs::read_to_string(self.ws.path("eval/report.json"))?;
        let report: ProtocolReport = serde_json::from_str(&text)?;
        self.state.report = Some(report.clone());
        Ok(report)
    }

    fn train_ds(&mut self) -> Result<&Dataset> {
        if self.state.train_ds.is_none() {
            let ds = data::load_dataset(
                &self.ws.path("preprocess/train.schema.json"),
                &self.ws.path("preprocess/train.csv"),
            )?;
            self.state.train_ds = Some(ds);
        }
        Ok(self.state.train_ds.as_ref().unwrap())
    }

    fn test_ds(&mut self) -> Result<&Dataset> {
        if self.state.test_ds.is_none() {
            let ds = data::load_dataset(
                &self.ws.path("preprocess/test.schema.json"),
                &self.ws.path("preprocess/test.csv"),
            )?;
            self.state.test_ds = Some(ds);
        }
        Ok(self.state.test_ds.as_ref().unwrap())
    }

    fn baseline(&mut self) -> Result<&NeuralModel> {
        if self.state.baseline.is_none() {
            let text = std::fs::read_to_string(self.ws.path("train-baseline/baseline.model.txt"))?;
            self.state.baseline = Some(nnet::deserialize_model(&text)?);
        }
        Ok(self.state.baseline.as_ref().unwrap())
    }

    fn suite(&mut self) -> Result<&AttackSuite> {
        if self.state.suite.is_none() {
            let text = std::fs::read_to_string(self.ws.path("attack/suite.json"))?;
            let manifest: SuiteManifest = serde_json::from_str(&text)?;
            let mut entries = Vec::with_capacity(manifest.entries.len());
            for e in &manifest.entries {
                entries.push(load_adv_csv(&self.ws.path(&e.csv), e.spec.clone(), e.seed)?);
            }
            self.state.suite = Some(AttackSuite {
                entries,
                train_epsilon: manifest.train_epsilon,
            });
        }
        Ok(self.state.suite.as_ref().unwrap())
    }

    fn portfolio(&mut self) -> Result<&Portfolio> {
        if self.state.portfolio.is_none() {
            let text = std::fs::read_to_string(self.ws.path("train-defenses/registry.json"))?;
            let registry: Vec<RegistryEntry> = serde_json::from_str(&text)?;
            let mut models = Vec::with_capacity(registry.len());
            for entry in &registry {
                let dtext = std::fs::read_to_string(self.ws.path(&entry.file))?;
                models.push(defenses::deserialize_defense(&dtext)?);
            }
            models.sort_by_key(|m| m.id.index());
            self.state.portfolio = Some(Portfolio::from_models(models));
        }
        Ok(self.state.portfolio.as_ref().unwrap())
    }

    /// Matrix artifacts: the pool, per-sample correctness, and labels are
    /// deterministic given portfolio and suite, so they are rebuilt in
    /// memory when a later stage starts from disk.
    fn matrix_products(
        &mut self,
    ) -> Result<(&AttackPool, &crate::matrix::PerformanceMatrix, &Vec<OptimalLabel>)> {
        if self.state.perf_matrix.is_none() {
            self.portfolio()?;
            self.suite()?;
            let suite = self.state.suite.as_ref().unwrap();
            let portfolio = self.state.portfolio.as_ref().unwrap();
            let pool = AttackPool::from_entries(&suite.train_entries())?;
            let pm = matrix::build_matrix(portfolio, &pool)?;
            let labels = matrix::label_optimal(&pm);
            self.state.pool = Some(pool);
            self.state.perf_matrix = Some(pm);
            self.state.labels = Some(labels);
        }
        Ok((
            self.state.pool.as_ref().unwrap(),
            self.state.perf_matrix.as_ref().unwrap(),
            self.state.labels.as_ref().unwrap(),
        ))
    }

    fn snapshots(&mut self) -> Result<&Vec<BudgetSnapshot>> {
        if self.state.snapshots.is_none() {
            let text = std::fs::read_to_string(self.ws.path("acquire/snapshots.json"))?;
            self.state.snapshots = Some(serde_json::from_str(&text)?);
        }
        Ok(self.state.snapshots.as_ref().unwrap())
    }

    fn selectors(&mut self) -> Result<&Vec<(f64, TreeEnsemble)>> {
        if self.state.selectors.is_none() {
            let text = std::fs::read_to_string(self.ws.path("train-selector/index.json"))?;
            let index: SelectorIndex = serde_json::from_str(&text)?;
            let mut selectors = Vec::with_capacity(index.budgets.len());
            for (budget, file) in index.budgets.iter().zip(&index.files) {
                let ftext = std::fs::read_to_string(self.ws.path(file))?;
                selectors.push((*budget, selector::deserialize_forest(&ftext)?));
            }
            self.state.selectors = Some(selectors);
        }
        Ok(self.state.selectors.as_ref().unwrap())
    }

    fn stage_preprocess(&mut self, stage_seed: u64) -> Result<BTreeMap<String, String>> {
        let full = match &self.cfg.dataset {
            DatasetSource::Synth {
                n,
                d,
                classes,
                imbalance,
            } => data::synth_generate(*n, *d, *classes, imbalance, stage_seed)?,
            DatasetSource::Csv { path, label_column } => {
                let raw = data::load_csv(Path::new(path), label_column)?;
                if self.cfg.stats_on_train_only {
                    let (labels, y) = {
                        let probe = data::preprocess(&raw)?;
                        (probe.class_names.clone(), probe.y.clone())
                    };
                    let _ = labels;
                    let (train_rows, _) = data::stratified_split_indices(
                        &y,
                        self.cfg.train_fraction,
                        seed::derive(stage_seed, "split"),
                    )?;
                    data::preprocess_with_stats(&raw, &train_rows)?
                } else {
                    data::preprocess(&raw)?
                }
            }
        };
        let spec = SplitSpec {
            train_fraction: self.cfg.train_fraction,
            seed: seed::derive(stage_seed, "split"),
        };
        let (train, test) = data::split(&full, &spec)?;

        let mut outputs = BTreeMap::new();
        let dir = self.ws.path("preprocess");
        std::fs::create_dir_all(&dir)?;
        data::save_dataset(
            &train,
            &self.ws.path("preprocess/train.schema.json"),
            &self.ws.path("preprocess/train.csv"),
        )?;
        data::save_dataset(
            &test,
            &self.ws.path("preprocess/test.schema.json"),
            &self.ws.path("preprocess/test.csv"),
        )?;
        for rel in [
            "preprocess/train.schema.json",
            "preprocess/train.csv",
            "preprocess/test.schema.json",
            "preprocess/test.csv",
        ] {
            let bytes = std::fs::read(self.ws.path(rel))?;
            outputs.insert(rel.to_string(), sha256_hex(&bytes));
        }
        self.state.train_ds = Some(train);
        self.state.test_ds = Some(test);
        Ok(outputs)
    }

    fn stage_train_baseline(&mut self, stage_seed: u64) -> Result<BTreeMap<String, String>> {
        let mut tc = self.cfg.nnet.clone();
        tc.seed = stage_seed;
        self.train_ds()?;
        self.test_ds()?;
        let train = self.state.train_ds.as_ref().unwrap();
        let test = self.state.test_ds.as_ref().unwrap();
        let outcome = nnet::train(train, &tc)?;
        let clean_test_accuracy = defenses::clean_accuracy(&outcome.model, test);

        let mut outputs = BTreeMap::new();
        let model_text = nnet::serialize_model(&outcome.model);
        outputs.insert(
            "train-baseline/baseline.model.txt".to_string(),
            self.ws
                .write_atomic("train-baseline/baseline.model.txt", model_text.as_bytes())?,
        );
        let metrics = BaselineMetrics {
            final_train_accuracy: outcome.final_train_accuracy,
            final_loss: outcome.final_loss,
            clean_test_accuracy,
        };
        outputs.insert(
            "train-baseline/baseline.metrics.json".to_string(),
            self.ws.write_atomic(
                "train-baseline/baseline.metrics.json",
                serde_json::to_string_pretty(&metrics)?.as_bytes(),
            )?,
        );
        self.state.baseline = Some(outcome.model);
        Ok(outputs)
    }

    fn stage_attack(&mut self, stage_seed: u64) -> Result<BTreeMap<String, String>> {
        let kinds = self.cfg.attacks.parsed_kinds()?;
        let base_spec = self.cfg.attacks.base_spec();
        let eps_grid = self.cfg.attacks.eps_grid.clone();
        let train_epsilon = self.cfg.attacks.train_epsilon;
        self.baseline()?;
        self.test_ds()?;
        let model = self.state.baseline.as_ref().unwrap();
        let test = self.state.test_ds.as_ref().unwrap();
        let suite = attacks::generate_suite(
            model,
            test,
            &kinds,
            &eps_grid,
            train_epsilon,
            stage_seed,
            &base_spec,
        )?;

        let mut outputs = BTreeMap::new();
        let mut entries = Vec::with_capacity(suite.entries.len());
        for adv in &suite.entries {
            let rel = format!(
                "attack/adv_{}_{}.csv",
                adv.spec.kind.name(),
                adv.spec.epsilon
            );
            let path = self.ws.path(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            attacks::save_adv_csv(adv, &test.feature_names, &path)?;
            let bytes = std::fs::read(&path)?;
            outputs.insert(rel.clone(), sha256_hex(&bytes));
            entries.push(SuiteEntry {
                spec: adv.spec.clone(),
                csv: rel,
                seed: seed::derive(
                    stage_seed,
                    &format!("attack-{}-{:?}", adv.spec.kind.name(), adv.spec.epsilon),
                ),
            });
        }
        let manifest = SuiteManifest {
            train_epsilon,
            entries,
        };
        outputs.insert(
            "attack/suite.json".to_string(),
            self.ws.write_atomic(
                "attack/suite.json",
                serde_json::to_string_pretty(&manifest)?.as_bytes(),
            )?,
        );
        self.state.suite = Some(suite);
        Ok(outputs)
    }

    fn stage_train_defenses(&mut self, stage_seed: u64) -> Result<BTreeMap<String, String>> {
        let mut dcfg = self.cfg.defense.clone();
        dcfg.train.seed = stage_seed;
        self.baseline()?;
        self.train_ds()?;
        self.test_ds()?;
        let base = self.state.baseline.as_ref().unwrap();
        let train = self.state.train_ds.as_ref().unwrap();
        let test = self.state.test_ds.as_ref().unwrap();
        let portfolio = Portfolio::train_full(train, base, &dcfg, test)?;

        let mut outputs = BTreeMap::new();
        let mut registry = Vec::with_capacity(portfolio.len());
        for dm in &portfolio.models {
            let rel = format!("train-defenses/defense_{}.txt", dm.id.name());
            let text = defenses::serialize_defense(dm);
            outputs.insert(rel.clone(), self.ws.write_atomic(&rel, text.as_bytes())?);
            registry.push(RegistryEntry {
                id: dm.id.name().to_string(),
                file: rel,
                clean_accuracy: dm.clean_accuracy,
            });
        }
        outputs.insert(
            "train-defenses/registry.json".to_string(),
            self.ws.write_atomic(
                "train-defenses/registry.json",
                serde_json::to_string_pretty(&registry)?.as_bytes(),
            )?,
        );
        self.state.portfolio = Some(portfolio);
        Ok(outputs)
    }

    fn stage_matrix(&mut self) -> Result<BTreeMap<String, String>> {
        self.state.pool = None;
        self.state.perf_matrix = None;
        self.state.labels = None;
        self.matrix_products()?;
        let pm = self.state.perf_matrix.as_ref().unwrap();
        let labels = self.state.labels.as_ref().unwrap();

        let mpath = self.ws.path("matrix/matrix.csv");
        if let Some(parent) = mpath.parent() {
            std::fs::create_dir_all(parent)?;
        }
        matrix::save_matrix_csv(pm, labels, &mpath)?;
        matrix::save_side_table_csv(pm, &self.ws.path("matrix/side_table.csv"))?;

        let mut outputs = BTreeMap::new();
        for rel in ["matrix/matrix.csv", "matrix/side_table.csv"] {
            let bytes = std::fs::read(self.ws.path(rel))?;
            outputs.insert(rel.to_string(), sha256_hex(&bytes));
        }
        Ok(outputs)
    }

    fn stage_acquire(&mut self, stage_seed: u64) -> Result<BTreeMap<String, String>> {
        let mut acq = self.cfg.acquisition.clone();
        acq.seed = stage_seed;
        self.matrix_products()?;
        let pool = self.state.pool.as_ref().unwrap();
        let labels = self.state.labels.as_ref().unwrap();
        let lpool = crate::acquisition::LabeledPool {
            x: pool.x.clone(),
            labels: labels.iter().map(|l| l.defense).collect(),
        };
        let (snapshots, trace) = crate::acquisition::run_rounds(&lpool, &acq)?;

        let tpath = self.ws.path("acquire/trace.csv");
        if let Some(parent) = tpath.parent() {
            std::fs::create_dir_all(parent)?;
        }
        trace.save_csv(&tpath)?;
        let mut outputs = BTreeMap::new();
        outputs.insert("acquire/trace.csv".to_string(), {
            let bytes = std::fs::read(&tpath)?;
            sha256_hex(&bytes)
        });
        outputs.insert(
            "acquire/snapshots.json".to_string(),
            self.ws.write_atomic(
                "acquire/snapshots.json",
                serde_json::to_string_pretty(&snapshots)?.as_bytes(),
            )?,
        );
        self.state.snapshots = Some(snapshots);
        Ok(outputs)
    }

    fn stage_train_selector(&mut self, stage_seed: u64) -> Result<BTreeMap<String, String>> {
        self.matrix_products()?;
        self.snapshots()?;
        let pool = self.state.pool.as_ref().unwrap();
        let labels = self.state.labels.as_ref().unwrap();
        let snapshots = self.state.snapshots.as_ref().unwrap();

        let mut outputs = BTreeMap::new();
        let mut budgets = Vec::new();
        let mut files = Vec::new();
        let mut selectors = Vec::new();
        for snap in snapshots {
            let x = pool.x.select_rows(&snap.labeled);
            let picked: Vec<DefenseId> = snap
                .labeled
                .iter()
                .map(|&i| labels[i].defense)
                .collect();
            let mut hyper = self.cfg.acquisition.forest.clone();
            hyper.seed = seed::derive(stage_seed, &format!("selector-{}", snap.budget));
            let ens = selector::fit_or_constant(&x, &picked, &hyper)?;
            let rel = format!("train-selector/selector_{}.txt", snap.budget);
            let text = selector::serialize_forest(&ens);
            outputs.insert(rel.clone(), self.ws.write_atomic(&rel, text.as_bytes())?);
            budgets.push(snap.budget);
            files.push(rel);
            selectors.push((snap.budget, ens));
        }
        let index = SelectorIndex {
            budgets,
            files,
            deployed_budget: self.cfg.deploy_budget,
        };
        outputs.insert(
            "train-selector/index.json".to_string(),
            self.ws.write_atomic(
                "train-selector/index.json",
                serde_json::to_string_pretty(&index)?.as_bytes(),
            )?,
        );
        self.state.selectors = Some(selectors);
        Ok(outputs)
    }

    fn stage_eval(&mut self, stage_seed: u64) -> Result<BTreeMap<String, String>> {
        self.baseline()?;
        self.suite()?;
        self.test_ds()?;
        self.portfolio()?;
        self.matrix_products()?;
        self.snapshots()?;
        self.selectors()?;

        let mut acq = self.cfg.acquisition.clone();
        acq.seed = self.cfg.stage_seed(Stage::Acquire);

        let base = self.state.baseline.as_ref().unwrap();
        let suite = self.state.suite.as_ref().unwrap();
        let clean_test = self.state.test_ds.as_ref().unwrap();
        let portfolio = self.state.portfolio.as_ref().unwrap();
        let pool = self.state.pool.as_ref().unwrap();
        let pm = self.state.perf_matrix.as_ref().unwrap();
        let labels = self.state.labels.as_ref().unwrap();
        let snapshots = self.state.snapshots.as_ref().unwrap();
        let selectors = self.state.selectors.as_ref().unwrap();

        let deployed = selectors
            .iter()
            .position(|(b, _)| (*b - self.cfg.deploy_budget).abs() < 1e-12)
            .ok_or_else(|| {
                SageError::InvalidArgument(format!(
                    "deploy budget {} is not in the schedule",
                    self.cfg.deploy_budget
                ))
            })?;
        let selection = SelectionOutcome {
            pool: pool.clone(),
            matrix: pm.clone(),
            labels: labels.clone(),
            snapshots: snapshots.clone(),
            trace: Default::default(),
            selectors: selectors.clone(),
            deployed,
        };
        let inputs = ProtocolInputs {
            base,
            portfolio,
            suite,
            clean_test,
            acq_cfg: &acq,
            deploy_budget: self.cfg.deploy_budget,
            random_runs: self.cfg.random_runs,
            recommend_k: self.cfg.recommend_k,
            seed: stage_seed,
        };

        let report = match &self.cfg.protocol {
            ProtocolChoice::Standard => {
                let mut report =
                    evaluation::evaluate_with_selection(&inputs, &selection, true, &[])?;
                report.timing = Some(evaluation::timing_report(
                    &inputs,
                    &selection,
                    self.cfg.timing_sample_cap,
                )?);
                ProtocolReport::Standard { report }
            }
            ProtocolChoice::EpsShift => {
                let mut report =
                    evaluation::evaluate_with_selection(&inputs, &selection, false, &[])?;
                report.timing = Some(evaluation::timing_report(
                    &inputs,
                    &selection,
                    self.cfg.timing_sample_cap,
                )?);
                ProtocolReport::EpsShift { report }
            }
            ProtocolChoice::Exclusion { tiers } => {
                let tiers: Vec<Vec<AttackKind>> = match tiers {
                    Some(names) => names
                        .iter()
                        .map(|tier| tier.iter().map(|k| AttackKind::parse(k)).collect())
                        .collect::<Result<_>>()?,
                    None => evaluation::default_exclusion_tiers(base, suite)?,
                };
                let report = evaluation::exclusion_protocol(&inputs, &tiers, &selection)?;
                ProtocolReport::Exclusion { report }
            }
            ProtocolChoice::AlAblation => {
                let report = evaluation::al_ablation(&inputs, pool, pm, labels)?;
                ProtocolReport::AlAblation { report }
            }
        };

        let mut outputs = BTreeMap::new();
        outputs.insert(
            "eval/report.json".to_string(),
            self.ws.write_atomic(
                "eval/report.json",
                serde_json::to_string_pretty(&report)?.as_bytes(),
            )?,
        );
        self.state.report = Some(report);
        Ok(outputs)
    }

    fn stage_report(&mut self) -> Result<BTreeMap<String, String>> {
        let report = self.load_report()?;
        let mut outputs = BTreeMap::new();
        let emit = |ws: &Workspace, rel: &str, text: &str| -> Result<(String, String)> {
            Ok((rel.to_string(), ws.write_atomic(rel, text.as_bytes())?))
        };
        match &report {
            ProtocolReport::Standard { report } | ProtocolReport::EpsShift { report } => {
                let (k, v) = emit(&self.ws, "report/table.csv", &report.table_csv())?;
                outputs.insert(k, v);
                if let Some(timing) = &report.timing {
                    let mut csv = String::from("policy,ms_per_sample,defended_calls,selector_calls\n");
                    for t in &timing.entries {
                        csv.push_str(&format!(
                            "{},{:.4},{},{}\n",
                            t.policy,
                            t.ms_per_sample,
                            t.defended_calls_per_sample,
                            t.selector_calls_per_sample
                        ));
                    }
                    let (k, v) = emit(&self.ws, "report/timing.csv", &csv)?;
                    outputs.insert(k, v);
                }
            }
            ProtocolReport::Exclusion { report } => {
                let (k, v) = emit(
                    &self.ws,
                    "report/table_baseline.csv",
                    &report.baseline.table_csv(),
                )?;
                outputs.insert(k, v);
                for (i, tier) in report.tiers.iter().enumerate() {
                    let rel = format!("report/table_tier{}.csv", i + 1);
                    let (k, v) = emit(&self.ws, &rel, &tier.report.table_csv())?;
                    outputs.insert(k, v);
                }
            }
            ProtocolReport::AlAblation { report } => {
                let mut csv =
                    String::from("strategy,budget,selector_label_f1,average_f1,average_score\n");
                for row in &report.rows {
                    csv.push_str(&format!(
                        "{},{},{:.4},{:.4},{:.4}\n",
                        row.strategy,
                        row.budget,
                        row.selector_label_f1,
                        row.average_f1,
                        row.average_score
                    ));
                }
                let (k, v) = emit(&self.ws, "report/ablation.csv", &csv)?;
                outputs.insert(k, v);
            }
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::ForestHyper;

    fn tiny_config(dir: &Path, seed: u64) -> PipelineConfig {
        PipelineConfig {
            dataset: DatasetSource::Synth {
                n: 300,
                d: 4,
                classes: 2,
                imbalance: vec![0.5, 0.5],
            },
            train_fraction: 0.8,
            stats_on_train_only: false,
            nnet: TrainConfig {
                epochs: 4,
                hidden: vec![8],
                ..TrainConfig::default()
            },
            attacks: AttackSettings {
                kinds: vec!["FGSM".into(), "BIM".into()],
                eps_grid: vec![0.1, 0.2],
                steps: 3,
                ..AttackSettings::default()
            },
            defense: DefenseConfig {
                pgd_steps: 2,
                rslad10_steps: 2,
                rslad100_steps: 3,
                ..DefenseConfig::default()
            },
            acquisition: AcquisitionConfig {
                budget_schedule: vec![0.2, 0.5],
                rounds_per_budget: 1,
                forest: ForestHyper {
                    n_trees: 15,
                    ..ForestHyper::default()
                },
                ..AcquisitionConfig::default()
            },
            deploy_budget: 0.5,
            random_runs: 5,
            recommend_k: 1,
            timing_sample_cap: 50,
            protocol: ProtocolChoice::EpsShift,
            out_dir: dir.to_string_lossy().to_string(),
            seed,
        }
    }

    #[test]
    fn dag_rejects_out_of_order_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 1);
        let mut pipeline = Pipeline::new(cfg).unwrap();
        let err = pipeline.run_stage(Stage::Matrix).unwrap_err();
        match err {
            SageError::MissingStage { stage, needs } => {
                assert_eq!(stage, "matrix");
                assert_eq!(needs, "attack");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn completed_stage_is_memoized() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 2);
        let mut pipeline = Pipeline::new(cfg).unwrap();
        assert!(pipeline.run_stage(Stage::Preprocess).unwrap());
        assert!(!pipeline.run_stage(Stage::Preprocess).unwrap());
    }

    #[test]
    fn tampered_artifact_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 3);
        let mut pipeline = Pipeline::new(cfg).unwrap();
        pipeline.run_stage(Stage::Preprocess).unwrap();
        std::fs::write(dir.path().join("preprocess/train.csv"), "tampered").unwrap();
        let err = pipeline.run_stage(Stage::TrainBaseline).unwrap_err();
        assert!(matches!(err, SageError::StaleArtifact { .. }));
    }

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::parse(stage.name()).unwrap(), stage);
        }
        assert!(Stage::parse("nope").is_err());
    }

    #[test]
    fn strip_timing_removes_all_sections() {
        let mut value = serde_json::json!({
            "timing": {"a": 1},
            "nested": [{"timing": 2, "keep": 3}],
            "keep": 4,
        });
        strip_timing(&mut value);
        assert_eq!(
            value,
            serde_json::json!({"nested": [{"keep": 3}], "keep": 4})
        );
    }
}
