//! The staged experiment: each verb reads the previous verbs' artifacts from a
//! run directory and writes its own.
//!
//! ```text
//! <run>/run.toml                 effective config (written by gen)
//! <run>/data/manifest.txt        frames/*.awf, gt_database.awgd
//! <run>/stage1.ckpt              designated expert after stage 1
//! <run>/classifier.ckpt          weather classifier
//! <run>/gate.ckpt                point-feature gate on stage-1 features
//! <run>/moe.ckpt                 stages 3 and 4
//! <run>/baseline.ckpt            stage-1 model trained on with the stage-4 budget
//! <run>/eval.json                per-model evaluation results
//! <run>/report/                  CSV and SVG tables
//! <run>/logs/*.json              training curves
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::{per_weather_eval, ApKind, EvalResult};
use crate::iwr::{classifier_accuracy, train_classifier, train_pfr, PfrGate, TrainLog, WeatherClassifier, IMAGE_SHAPE};
use crate::moe::{init_moe, pooled_features, train_stage1, train_stage4, MoEModel, RoutingMode, StageLog};
use crate::nn::{Checkpoint, Rng};
use crate::pointcloud::GridSpec;
use crate::report::{emit_expert_matrix, emit_report};
use crate::udma::{build_gt_database, GtDatabase};
use crate::weathersim::{build_dataset, load_frames, read_manifest, DatasetManifest, Frame, Split, NUM_WEATHERS};
use crate::{Error, Result};

/// Random stream ids; each stage draws from `Rng::derive(seed, stream)`.
pub mod streams {
    pub const STAGE1: u64 = 0x5_0001;
    pub const CLASSIFIER: u64 = 0x5_0002;
    pub const GATE: u64 = 0x5_0003;
    pub const STAGE4: u64 = 0x5_0004;
}

/// Model names used in `eval.json` and the report.
pub const MOE: &str = "aw-moe";
pub const BASELINE: &str = "baseline";
pub const MOE_PFR: &str = "aw-moe-pfr";

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("run.toml")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn gt_database(&self) -> PathBuf {
        self.data().join("gt_database.awgd")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1.ckpt")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }
    pub fn gate(&self) -> PathBuf {
        self.root.join("gate.ckpt")
    }
    pub fn moe(&self) -> PathBuf {
        self.root.join("moe.ckpt")
    }
    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline.ckpt")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.json"))
    }
}

/// Contents of `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub seed: u64,
    pub results: Vec<(String, EvalResult)>,
    /// AP_3D@0.3 of each trained expert forced on each weather.
    #[serde(default)]
    pub experts: Vec<[Option<f64>; NUM_WEATHERS]>,
}

impl EvalFile {
    pub fn result(&self, name: &str) -> Option<&EvalResult> {
        self.results.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLogs {
    pub classifier: TrainLog,
    pub gate: TrainLog,
    pub classifier_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLogs {
    pub moe: StageLog,
    pub baseline: StageLog,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loaded run directory with its config checked against the one `gen` recorded.
pub struct Run {
    pub paths: RunPaths,
    pub config: RunConfig,
    pub manifest: DatasetManifest,
    pub grid: GridSpec,
}

impl Run {
    pub fn open(root: &Path, config: &RunConfig) -> Result<Self> {
        let paths = RunPaths::new(root);
        let recorded = RunConfig::load(&paths.config())?;
        if recorded.seed != config.seed || recorded.dataset != config.dataset {
            return Err(Error::InvalidArgument(format!(
                "{} was generated with seed {} and a different dataset section; rerun gen",
                paths.root.display(),
                recorded.seed
            )));
        }
        let manifest = read_manifest(&paths.data())?;
        let grid = config.dataset_config()?.scene().grid;
        Ok(Self {
            paths,
            config: config.clone(),
            manifest,
            grid,
        })
    }

    pub fn frames(&self, split: Split) -> Result<Vec<Frame>> {
        load_frames(&self.paths.data(), &self.manifest, split)
    }

    pub fn gt_database(&self) -> Result<GtDatabase> {
        GtDatabase::read(&self.paths.gt_database())
    }

    fn rng(&self, stream: u64) -> Rng {
        Rng::derive(self.config.seed, stream)
    }
}

/// `gen`: writes the dataset, the GT database of the training split, and `run.toml`.
pub fn gen(config: &RunConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let paths = RunPaths::new(root);
    let manifest = build_dataset(&config.dataset_config()?, config.seed, &paths.data())?;
    let train = load_frames(&paths.data(), &manifest, Split::Train)?;
    build_gt_database(&train).write(&paths.gt_database())?;
    write_file(&paths.config(), config.to_toml().as_bytes())?;
    Ok(manifest)
}

/// `train-stage1`: trains shared backbone plus the designated expert.
pub fn train_stage1_verb(config: &RunConfig, root: &Path) -> Result<StageLog> {
    let run = Run::open(root, config)?;
    let train = run.frames(Split::Train)?;
    let db = run.gt_database()?;
    let (model, log) = train_stage1(
        &train,
        &db,
        config.designated,
        &run.grid,
        &config.stage1.to_config(),
        &mut run.rng(streams::STAGE1),
    )?;
    model.to_checkpoint().write(&run.paths.stage1())?;
    write_json(&run.paths.log("stage1"), &log)?;
    Ok(log)
}

/// `train-classifier`: trains the image classifier and, for comparison, the
/// point-feature gate on the frozen stage-1 features.
pub fn train_classifier_verb(config: &RunConfig, root: &Path) -> Result<ClassifierLogs> {
    let run = Run::open(root, config)?;
    let train = run.frames(Split::Train)?;
    let (classifier, clog) = train_classifier(&train, &config.classifier.to_config(), &mut run.rng(streams::CLASSIFIER))?;
    let mut ck = Checkpoint::new();
    ck.insert_module("classifier", &classifier);
    ck.write(&run.paths.classifier())?;

    let stage1 = MoEModel::from_checkpoint(&Checkpoint::read(&run.paths.stage1())?)?;
    let pooled = pooled_features(&stage1, &train, &run.grid)?;
    let (gate, glog) = train_pfr(&pooled, &config.gate.to_config(), &mut run.rng(streams::GATE))?;
    let mut ck = Checkpoint::new();
    ck.insert_module("gate", &gate);
    ck.write(&run.paths.gate())?;

    let test = run.frames(Split::Test)?;
    let logs = ClassifierLogs {
        classifier: clog,
        gate: glog,
        classifier_test_accuracy: classifier_accuracy(&classifier, &test)?,
    };
    write_json(&run.paths.log("classifier"), &logs)?;
    Ok(logs)
}

fn load_classifier(path: &Path) -> Result<WeatherClassifier> {
    let mut c = WeatherClassifier::new(IMAGE_SHAPE, &mut Rng::new(0))?;
    Checkpoint::read(path)?.load_module("classifier", &mut c)?;
    Ok(c)
}

fn load_gate(path: &Path) -> Result<PfrGate> {
    let mut g = PfrGate::zeros(2 * crate::wse::FEATURE_CHANNELS);
    Checkpoint::read(path)?.load_module("gate", &mut g)?;
    Ok(g)
}

/// `train-moe`: stage 3 (copy the designated expert) and stage 4 (routed
/// expert training), plus the baseline that spends the same stage-4 budget on
/// the single stage-1 expert.
pub fn train_moe_verb(config: &RunConfig, root: &Path) -> Result<MoeLogs> {
    let run = Run::open(root, config)?;
    let train = run.frames(Split::Train)?;
    let db = run.gt_database()?;
    let stage1 = MoEModel::from_checkpoint(&Checkpoint::read(&run.paths.stage1())?)?;
    let stage4 = config.stage4.to_config();

    let mut baseline = stage1.clone();
    let baseline_log = train_stage4(&mut baseline, &train, &db, &run.grid, &stage4, &mut run.rng(streams::STAGE4))?;
    baseline.to_checkpoint().write(&run.paths.baseline())?;

    let mut moe = init_moe(&stage1)?;
    moe.classifier = Some(load_classifier(&run.paths.classifier())?);
    moe.gate = Some(load_gate(&run.paths.gate())?);
    let mut moe = moe.with_routing(RoutingMode::Iwr, 1)?;
    let moe_log = train_stage4(&mut moe, &train, &db, &run.grid, &stage4, &mut run.rng(streams::STAGE4))?;
    if !moe_log.audit_failures.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "stage-4 audit failed: {}",
            moe_log.audit_failures.join("; ")
        )));
    }
    moe.to_checkpoint().write(&run.paths.moe())?;

    let logs = MoeLogs {
        moe: moe_log,
        baseline: baseline_log,
    };
    write_json(&run.paths.log("stage4"), &logs)?;
    Ok(logs)
}

/// `eval`: the configured routing, the baseline, point-feature routing, and
/// every expert forced on every weather.
pub fn eval_verb(config: &RunConfig, root: &Path) -> Result<EvalFile> {
    let run = Run::open(root, config)?;
    let test = run.frames(Split::Test)?;
    let inference = config.inference.to_config();
    let trained = MoEModel::from_checkpoint(&Checkpoint::read(&run.paths.moe())?)?;
    let moe = trained
        .clone()
        .with_routing(config.inference.routing_mode()?, config.inference.k)?;
    let pfr = trained.clone().with_routing(RoutingMode::Pfr, config.inference.k)?;
    let baseline = MoEModel::from_checkpoint(&Checkpoint::read(&run.paths.baseline())?)?;
    let mut results = Vec::new();
    for (name, model) in [(MOE, &moe), (BASELINE, &baseline), (MOE_PFR, &pfr)] {
        results.push((name.to_string(), per_weather_eval(model, &test, &run.grid, &inference)?));
    }
    let mut experts = Vec::with_capacity(NUM_WEATHERS);
    for w in 0..NUM_WEATHERS {
        let forced = trained.clone().with_routing(RoutingMode::Forced(w), 1)?;
        let r = per_weather_eval(&forced, &test, &run.grid, &inference)?;
        experts.push(r.row(ApKind::ThreeD, 0.3).map_or([None; NUM_WEATHERS], |row| row.per_weather));
    }
    let file = EvalFile {
        seed: config.seed,
        results,
        experts,
    };
    write_json(&run.paths.eval(), &file)?;
    Ok(file)
}

/// `report`: renders `eval.json` into CSV and SVG files.
pub fn report_verb(config: &RunConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let run = Run::open(root, config)?;
    let file: EvalFile = read_json(&run.paths.eval())?;
    let mut paths = emit_report(&file.results, &run.paths.report())?;
    if !file.experts.is_empty() {
        paths.push(emit_expert_matrix(&file.experts, &run.paths.report())?);
    }
    Ok(paths)
}

/// All verbs in order.
pub fn run_all(config: &RunConfig, root: &Path) -> Result<EvalFile> {
    gen(config, root)?;
    train_stage1_verb(config, root)?;
    train_classifier_verb(config, root)?;
    train_moe_verb(config, root)?;
    let file = eval_verb(config, root)?;
    report_verb(config, root)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.dataset.per_class = 4;
        c.classifier.epochs = 1;
        c.gate.epochs = 1;
        c.stage1.epochs = 1;
        c.stage4.epochs = 1;
        c
    }

    #[test]
    fn verbs_chain_and_reject_mismatched_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let file = run_all(&cfg, dir.path()).unwrap();
        assert_eq!(file.results.len(), 3);
        let moe = file.result(MOE).unwrap();
        assert_eq!(file.result(BASELINE).unwrap().confusion.total(), 0);
        assert_eq!(moe.confusion.total() as usize, moe.frames.iter().sum::<usize>());
        assert_eq!(moe.frames, [2; 7]);
        assert_eq!(file.experts.len(), 7);
        for p in [RunPaths::new(dir.path()).moe(), dir.path().join("report/ap.csv"), dir.path().join("report/experts.csv")] {
            assert!(p.exists(), "{}", p.display());
        }
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(matches!(eval_verb(&other, dir.path()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn missing_previous_stage_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        gen(&cfg, dir.path()).unwrap();
        match train_moe_verb(&cfg, dir.path()) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("stage1.ckpt")),
            other => panic!("{other:?}"),
        }
    }
}
