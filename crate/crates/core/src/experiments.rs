//! Experiment orchestration: training runs, the four-setting evaluation
//! matrix, decision-boundary maps, hyperparameter sweeps and the four-regime
//! toy study. Everything here is deterministic given config and seed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{detection_attack, pgd, AttackConfig, AttackObjective, Direction};
use crate::datasets::{
    grid, load_csv, sample_toy, sample_toy_id_test, sample_toy_ood_test, CsvSchema, LabeledSet, Origin,
    SettingInputs, ToySpec,
};
use crate::detection::{default_detectors, Detector, DetectorKind};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, AttackSetting, EvalReport, MetricCell, ScorePair};
use crate::model::{Mlp, Sgd, SgdConfig};
use crate::objectives::{training_step, Batch, HaloConfig, LossBreakdown, ObjectiveKind};
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA: &str = "halo-manifest-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    #[serde(default = "default_csv_name")]
    pub name: String,
    pub train_id: PathBuf,
    #[serde(default)]
    pub train_oe: Option<PathBuf>,
    pub test_id: PathBuf,
    pub test_ood: PathBuf,
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_csv_name() -> String {
    "csv".into()
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Toy(ToySpec),
    Csv(CsvData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Toy(ToySpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub resolution: usize,
    /// MSP detection flags points whose max-probability is below this.
    pub msp_confidence: f64,
    pub robust: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            resolution: 200,
            msp_confidence: 0.9,
            robust: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the config, e.g. `objective.beta1`. The special
    /// path `objective.beta` sets both β values.
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub objective: HaloConfig,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub layer_sizes: Vec<usize>,
    /// Defaults to a 10-step KL attack at the data's ε.
    pub train_attack: Option<AttackConfig>,
    /// Defaults to a 20-step attack at the data's ε.
    pub eval_attack: Option<AttackConfig>,
    pub data: DataConfig,
    pub detectors: Vec<Detector>,
    pub seeds: Vec<u64>,
    /// Fresh test points per side (toy data only).
    pub n_test: usize,
    pub maps: MapConfig,
    pub helper_checkpoint: Option<PathBuf>,
    /// Train the helper model with the OE objective when none is supplied.
    pub train_helper: bool,
    pub sweep: Vec<SweepAxis>,
    /// Write the training log (one row per step).
    pub log_steps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            objective: HaloConfig::default(),
            sgd: SgdConfig::default(),
            epochs: 400,
            batch_size: 128,
            layer_sizes: vec![2, 64, 64, 2],
            train_attack: None,
            eval_attack: None,
            data: DataConfig::default(),
            detectors: default_detectors(),
            seeds: vec![0, 1, 2],
            n_test: 1000,
            maps: MapConfig::default(),
            helper_checkpoint: None,
            train_helper: false,
            sweep: Vec::new(),
            log_steps: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config; relative data and checkpoint paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Csv(c) = &mut cfg.data {
            fix(&mut c.train_id);
            fix(&mut c.test_id);
            fix(&mut c.test_ood);
            if let Some(p) = &mut c.train_oe {
                fix(p);
            }
        }
        if let Some(p) = &mut cfg.helper_checkpoint {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn epsilon(&self) -> f64 {
        match &self.data {
            DataConfig::Toy(s) => s.epsilon,
            DataConfig::Csv(_) => 8.0 / 255.0,
        }
    }

    fn default_attack(&self, training: bool) -> AttackConfig {
        match &self.data {
            DataConfig::Toy(spec) => {
                let base = if training {
                    AttackConfig::training(self.epsilon(), 10)
                } else {
                    AttackConfig::evaluation(self.epsilon(), 20)
                };
                base.with_bounds(Some(spec.bounds()))
            }
            DataConfig::Csv(_) if training => AttackConfig::image_training(),
            DataConfig::Csv(_) => AttackConfig::image_evaluation(),
        }
    }

    pub fn train_attack(&self) -> AttackConfig {
        self.train_attack.clone().unwrap_or_else(|| self.default_attack(true))
    }

    pub fn eval_attack(&self) -> AttackConfig {
        self.eval_attack.clone().unwrap_or_else(|| self.default_attack(false))
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.sgd.validate()?;
        self.train_attack().validate()?;
        self.eval_attack().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer_sizes {:?}", self.layer_sizes)));
        }
        let k = *self.layer_sizes.last().expect("len ≥ 2");
        for d in &self.detectors {
            d.validate(k)?;
        }
        if let DataConfig::Toy(spec) = &self.data {
            spec.validate()?;
            if self.layer_sizes[0] != 2 || k != 2 {
                return Err(Error::Config(format!(
                    "toy data needs a 2-input, 2-class model, got {:?}",
                    self.layer_sizes
                )));
            }
        }
        if !(self.maps.msp_confidence > 0.0 && self.maps.msp_confidence < 1.0) {
            return Err(Error::Config("maps.msp_confidence must be in (0, 1)".into()));
        }
        let needs_helper = matches!(self.objective.objective, ObjectiveKind::Hat | ObjectiveKind::Halo)
            && self.objective.gamma > 0.0;
        if needs_helper && self.helper_checkpoint.is_none() && !self.train_helper {
            return Err(Error::Config(format!(
                "gamma = {} needs helper_checkpoint or train_helper = true",
                self.objective.gamma
            )));
        }
        for axis in &self.sweep {
            if axis.values.is_empty() {
                return Err(Error::Config(format!("sweep axis {} has no values", axis.param)));
            }
        }
        Ok(())
    }

    /// Returns a copy with `path` (dotted) set to `value`.
    pub fn with_param(&self, path: &str, value: f64) -> Result<Self> {
        if path == "objective.beta" {
            return self.with_param("objective.beta1", value)?.with_param("objective.beta2", value);
        }
        let mut v = self.to_json();
        set_json_path(&mut v, path, value)?;
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{path} = {value}: {e}")))
    }

    /// Applies a `key=value` override; the value is parsed as TOML.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let parsed: toml::Value = toml::from_str(&format!("v = {}", raw.trim()))
            .map(|t: toml::Table| t["v"].clone())
            .unwrap_or_else(|_| toml::Value::String(raw.trim().to_string()));
        let mut v = self.to_json();
        let json = serde_json::to_value(parsed)?;
        set_json_value(&mut v, path.trim(), json)?;
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{assignment}: {e}")))
    }
}

fn set_json_path(root: &mut Value, path: &str, value: f64) -> Result<()> {
    let current = lookup(root, path)?;
    // keep integer-typed fields integers
    let json = if current.is_u64() || current.is_i64() {
        if value.fract() != 0.0 || value < 0.0 {
            return Err(Error::Config(format!("{path} needs a non-negative integer, got {value}")));
        }
        Value::from(value as u64)
    } else {
        Value::from(value)
    };
    set_json_value(root, path, json)
}

fn lookup<'a>(root: &'a Value, path: &str) -> Result<&'a Value> {
    let mut cur = root;
    for key in path.split('.') {
        cur = cur
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config path {path:?}")))?;
    }
    Ok(cur)
}

fn set_json_value(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("config path {path:?} is not a table")))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        let next = obj.entry(key.to_string()).or_insert(Value::Null);
        if next.is_null() {
            *next = Value::Object(Default::default());
        }
        cur = next;
    }
    Ok(())
}

/// Independent RNG seed for each use of a run seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Data = 1,
    Init = 2,
    Train = 3,
    TestId = 4,
    TestOod = 5,
    Eval = 6,
    Maps = 7,
}

fn derive_seed(seed: u64, stream: Stream) -> u64 {
    // splitmix64 finalizer over the (seed, stream) pair
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train and test data for one seed.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub name: String,
    pub train_id: LabeledSet,
    pub train_oe: Option<LabeledSet>,
    pub test_id: LabeledSet,
    pub test_ood: LabeledSet,
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<Datasets> {
    match &cfg.data {
        DataConfig::Toy(spec) => {
            let (id, oe) = sample_toy(spec, derive_seed(seed, Stream::Data))?;
            Ok(Datasets {
                name: "toy".into(),
                train_id: id,
                train_oe: Some(oe),
                test_id: sample_toy_id_test(spec, derive_seed(seed, Stream::TestId), cfg.n_test)?,
                test_ood: sample_toy_ood_test(spec, derive_seed(seed, Stream::TestOod), cfg.n_test)?,
            })
        }
        DataConfig::Csv(c) => {
            let schema = |origin| CsvSchema {
                feature_columns: c.feature_columns.clone(),
                label_column: c.label_column.clone(),
                origin,
            };
            let train_oe = match &c.train_oe {
                Some(p) => Some(load_csv(p, &schema(Origin::Oe))?),
                None => None,
            };
            Ok(Datasets {
                name: c.name.clone(),
                train_id: load_csv(&c.train_id, &schema(Origin::Id))?,
                train_oe,
                test_id: load_csv(&c.test_id, &schema(Origin::Id))?,
                test_ood: load_csv(&c.test_ood, &schema(Origin::Ood))?,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub steps: usize,
    pub last_loss: Option<LossBreakdown>,
}

/// Mini-batch training. Each epoch visits the ID set once in a fresh random
/// order; OE batches of the same size are drawn by cycling through a
/// shuffled OE order. Writes `step,epoch,<loss terms>` rows to `log`.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Datasets,
    seed: u64,
    helper: Option<&Mlp>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = cfg.layer_sizes[0];
    if data.train_id.dim() != d {
        return Err(Error::Config(format!(
            "data has {} features but the model takes {d}",
            data.train_id.dim()
        )));
    }
    let oe_set = match (&data.train_oe, cfg.objective.objective.uses_oe()) {
        (Some(oe), true) => Some(oe),
        (None, true) if cfg.objective.eta > 0.0 => {
            return Err(Error::Config(format!(
                "{} objective needs an OE training set",
                cfg.objective.objective.name()
            )))
        }
        _ => None,
    };
    let attack = cfg.train_attack();
    let mut model = Mlp::init(&cfg.layer_sizes, derive_seed(seed, Stream::Init))?;
    let mut opt = Sgd::new(cfg.sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Train));

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step,epoch,{}", LossBreakdown::csv_header())?;
    }

    let n = data.train_id.len();
    let labels = data.train_id.labels();
    let mut order: Vec<usize> = (0..n).collect();
    let mut oe_order: Vec<usize> = (0..oe_set.map_or(0, |s| s.len())).collect();
    let mut oe_pos = oe_order.len();
    let mut step = 0;
    let mut last_loss = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.train_id.features.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let oe_batch = match oe_set {
                Some(set) if !oe_order.is_empty() => {
                    let mut idx = Vec::with_capacity(chunk.len());
                    while idx.len() < chunk.len() {
                        if oe_pos == oe_order.len() {
                            oe_order.shuffle(&mut rng);
                            oe_pos = 0;
                        }
                        idx.push(oe_order[oe_pos]);
                        oe_pos += 1;
                    }
                    Some(set.features.select_rows(&idx)?)
                }
                _ => None,
            };
            let batch = Batch::new(&x, &y, oe_batch.as_ref());
            let (loss, grads, _) = training_step(&model, helper, &batch, &cfg.objective, &attack, &mut rng)?;
            if !loss.total.is_finite() {
                return Err(Error::Contract(format!("non-finite loss at step {step}")));
            }
            opt.step(&mut model, &grads)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{step},{epoch},{}", loss.csv_fields())?;
            }
            last_loss = Some(loss);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        steps: step,
        last_loss,
    })
}

/// Resolves the helper model: loaded from `helper_checkpoint`, or trained
/// with the OE objective when `train_helper` is set.
pub fn helper_model(cfg: &ExperimentConfig, data: &Datasets, seed: u64) -> Result<Option<Mlp>> {
    let needs = matches!(cfg.objective.objective, ObjectiveKind::Hat | ObjectiveKind::Halo) && cfg.objective.gamma > 0.0;
    if !needs {
        return Ok(None);
    }
    if let Some(p) = &cfg.helper_checkpoint {
        return Ok(Some(Mlp::load(p)?));
    }
    let std_cfg = ExperimentConfig {
        objective: HaloConfig::oe(cfg.objective.eta.max(1.0)),
        ..cfg.clone()
    };
    Ok(Some(train(&std_cfg, data, seed, None, None)?.model))
}

/// Scores from every detector on every setting, plus clean and PGD
/// accuracy on the ID test set.
pub fn evaluate(model: &Mlp, cfg: &ExperimentConfig, data: &Datasets, seed: u64) -> Result<EvalReport> {
    Ok(evaluate_with_scores(model, cfg, data, seed)?.0)
}

/// Per-detector, per-setting scores behind an [`EvalReport`].
pub type ScoreTable = Vec<(String, ScorePair)>;

pub fn evaluate_with_scores(
    model: &Mlp,
    cfg: &ExperimentConfig,
    data: &Datasets,
    seed: u64,
) -> Result<(EvalReport, ScoreTable)> {
    let attack = cfg.eval_attack();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Eval));
    let inputs = SettingInputs::build(model, &data.test_id.features, &data.test_ood.features, &attack, &mut rng)?;
    let mut logits = Vec::new();
    for s in AttackSetting::ALL {
        let (id, ood) = inputs.inputs(s);
        logits.push((s, model.logits(id)?, model.logits(ood)?));
    }
    let mut cells = Vec::new();
    let mut table = Vec::new();
    for det in &cfg.detectors {
        for (s, zi, zo) in &logits {
            let sp = ScorePair::new(det.score(zi)?, det.score(zo)?, *s);
            cells.push(MetricCell::compute(&data.name, &det.label(), &sp)?);
            table.push((det.label(), sp));
        }
    }
    let labels = data.test_id.labels();
    let clean = accuracy(model, &data.test_id.features, labels, None, &mut rng)?;
    let robust = accuracy(model, &data.test_id.features, labels, Some(&attack), &mut rng)?;
    Ok((EvalReport::new(cells, clean, robust), table))
}

/// `detector,setting,sample,origin,score` rows.
pub fn scores_csv(table: &ScoreTable) -> String {
    let mut out = String::from("detector,setting,sample,origin,score\n");
    for (det, sp) in table {
        for (origin, scores) in [("id", &sp.id_scores), ("ood", &sp.ood_scores)] {
            for (i, s) in scores.iter().enumerate() {
                let _ = writeln!(out, "{det},{},{i},{origin},{s}", sp.setting.name());
            }
        }
    }
    out
}

/// The three decision maps over a lattice, each an `x,y,value` CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMaps {
    pub points: Tensor,
    pub entropy: Vec<f64>,
    pub class: Vec<usize>,
    pub detection: Vec<bool>,
    /// Class after a cross-entropy attack against the clean prediction.
    pub class_robust: Option<Vec<usize>>,
    /// Detection flag after the attack opposing the clean decision (OOD→ID
    /// on flagged points, ID→OOD on the rest).
    pub detection_robust: Option<Vec<bool>>,
}

pub fn boundary_maps(model: &Mlp, cfg: &ExperimentConfig, seed: u64) -> Result<BoundaryMaps> {
    if model.input_dim() != 2 {
        return Err(Error::Config(format!(
            "boundary maps need a 2-D input model, got input dim {}",
            model.input_dim()
        )));
    }
    let spec = match &cfg.data {
        DataConfig::Toy(s) => s.clone(),
        DataConfig::Csv(_) => ToySpec::default(),
    };
    let points = grid(&spec, cfg.maps.resolution)?;
    let z = model.logits(&points)?;
    let entropy = Detector::new(DetectorKind::Entropy).score(&z)?;
    let class = z.argmax_rows();
    let msp = Detector::msp_at_confidence(cfg.maps.msp_confidence);
    let detection = msp.detect(&z)?;

    let (class_robust, detection_robust) = if cfg.maps.robust {
        let attack = cfg.eval_attack();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Maps));
        let ce = attack.clone().with_objective(AttackObjective::CeMax);
        let adv = pgd(model, &points, Some(&class), &ce, &mut rng)?.adversarial;
        let class_robust = model.predict(&adv)?;

        let flagged: Vec<usize> = (0..detection.len()).filter(|&i| detection[i]).collect();
        let clear: Vec<usize> = (0..detection.len()).filter(|&i| !detection[i]).collect();
        let mut robust = detection.clone();
        for (idx, dir) in [(&clear, Direction::IdToOod), (&flagged, Direction::OodToId)] {
            if idx.is_empty() {
                continue;
            }
            let x = points.select_rows(idx)?;
            let adv = detection_attack(model, &x, dir, &attack, &mut rng)?.adversarial;
            let flags = msp.detect(&model.logits(&adv)?)?;
            for (&i, f) in idx.iter().zip(flags) {
                robust[i] = f;
            }
        }
        (Some(class_robust), Some(robust))
    } else {
        (None, None)
    };
    Ok(BoundaryMaps {
        points,
        entropy,
        class,
        detection,
        class_robust,
        detection_robust,
    })
}

impl BoundaryMaps {
    fn csv<T: std::fmt::Display>(&self, values: &[T]) -> String {
        let mut out = String::from("x,y,value\n");
        for (i, v) in values.iter().enumerate() {
            let p = self.points.row(i);
            let _ = writeln!(out, "{},{},{v}", p[0], p[1]);
        }
        out
    }

    /// `(file name, contents)` for every map present.
    pub fn files(&self) -> Vec<(String, String)> {
        let flag = |v: &[bool]| v.iter().map(|&b| u8::from(b)).collect::<Vec<_>>();
        let mut out = vec![
            ("entropy.csv".to_string(), self.csv(&self.entropy)),
            ("class.csv".to_string(), self.csv(&self.class)),
            ("detection.csv".to_string(), self.csv(&flag(&self.detection))),
        ];
        if let Some(c) = &self.class_robust {
            out.push(("class_robust.csv".into(), self.csv(c)));
        }
        if let Some(d) = &self.detection_robust {
            out.push(("detection_robust.csv".into(), self.csv(&flag(d))));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub context: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub config: Value,
    pub code_version: String,
    pub checkpoints: Vec<String>,
    pub metrics: Vec<String>,
    /// Every other output file, relative to the output directory.
    pub files: Vec<String>,
    pub failures: Vec<Failure>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            config: cfg.to_json(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            checkpoints: Vec::new(),
            metrics: Vec::new(),
            files: Vec::new(),
            failures: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn all_files(&self) -> impl Iterator<Item = &String> {
        self.checkpoints.iter().chain(&self.metrics).chain(&self.files)
    }

    fn merge(&mut self, other: RunManifest) {
        self.checkpoints.extend(other.checkpoints);
        self.metrics.extend(other.metrics);
        self.files.extend(other.files);
        self.failures.extend(other.failures);
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Schema(format!("unknown manifest schema {:?}", m.schema)));
        }
        Ok(m)
    }

    /// Every listed file exists and parses (JSON files as JSON, CSV files
    /// with a consistent column count).
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for rel in self.all_files() {
            let path = out_dir.join(rel);
            let text = fs::read_to_string(&path).map_err(|e| Error::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if rel.ends_with(".json") {
                serde_json::from_str::<Value>(&text).map_err(|e| Error::Load {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            } else if rel.ends_with(".csv") {
                let mut r = csv::Reader::from_reader(text.as_bytes());
                for rec in r.records() {
                    rec.map_err(|e| Error::Load {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?;
                }
            }
        }
        Ok(())
    }
}

enum Kind {
    Checkpoint,
    Metrics,
    Other,
}

fn emit(out_dir: &Path, rel: &str, contents: &str, kind: Kind, manifest: &mut RunManifest) -> Result<()> {
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents)?;
    let list = match kind {
        Kind::Checkpoint => &mut manifest.checkpoints,
        Kind::Metrics => &mut manifest.metrics,
        Kind::Other => &mut manifest.files,
    };
    list.push(rel.to_string());
    Ok(())
}

/// Everything produced for one (config, seed): model, report, and the
/// files written under `prefix`.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub model: Mlp,
    pub report: EvalReport,
    pub train_secs: f64,
}

/// Train, save, evaluate. Files go under `out_dir/prefix`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    prefix: &str,
    manifest: &mut RunManifest,
) -> Result<RunResult> {
    let data = load_data(cfg, seed)?;
    let start = Instant::now();
    let helper = helper_model(cfg, &data, seed)?;
    let mut log = Vec::new();
    let outcome = train(
        cfg,
        &data,
        seed,
        helper.as_ref(),
        if cfg.log_steps { Some(&mut log) } else { None },
    )?;
    let train_secs = start.elapsed().as_secs_f64();
    if cfg.log_steps {
        emit(out_dir, &format!("{prefix}train_log.csv"), std::str::from_utf8(&log).expect("utf-8 log"), Kind::Other, manifest)?;
    }
    let ckpt = outcome.model.to_checkpoint(Some(seed), cfg.to_json());
    emit(out_dir, &format!("{prefix}model.ckpt.json"), &ckpt.to_json()?, Kind::Checkpoint, manifest)?;
    let report = evaluate(&outcome.model, cfg, &data, seed)?;
    emit(out_dir, &format!("{prefix}metrics.csv"), &report.to_csv(), Kind::Metrics, manifest)?;
    emit(out_dir, &format!("{prefix}report.json"), &report.to_json()?, Kind::Metrics, manifest)?;
    log::info!(
        "{}seed {seed}: {} steps in {train_secs:.1}s, clean acc {:.4}, robust acc {:.4}",
        prefix,
        outcome.steps,
        report.clean_accuracy,
        report.robust_accuracy
    );
    Ok(RunResult {
        seed,
        model: outcome.model,
        report,
        train_secs,
    })
}

fn write_maps(maps: &BoundaryMaps, out_dir: &Path, prefix: &str, manifest: &mut RunManifest) -> Result<()> {
    for (name, text) in maps.files() {
        emit(out_dir, &format!("{prefix}{name}"), &text, Kind::Other, manifest)?;
    }
    Ok(())
}

/// `train` command: one run per seed.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(RunManifest, Vec<RunResult>)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let mut manifest = RunManifest::new("train", cfg);
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        results.push(run_seed(cfg, seed, out_dir, &format!("seed_{seed}/"), &mut manifest)?);
    }
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok((manifest, results))
}

/// `evaluate` command on a saved checkpoint, using the first seed's test data.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<(RunManifest, EvalReport)> {
    cfg.validate()?;
    let model = Mlp::load(checkpoint)?;
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let seed = cfg.seeds[0];
    let data = load_data(cfg, seed)?;
    let (report, table) = evaluate_with_scores(&model, cfg, &data, seed)?;
    let mut manifest = RunManifest::new("evaluate", cfg);
    emit(out_dir, "metrics.csv", &report.to_csv(), Kind::Metrics, &mut manifest)?;
    emit(out_dir, "report.json", &report.to_json()?, Kind::Metrics, &mut manifest)?;
    emit(out_dir, "scores.csv", &scores_csv(&table), Kind::Other, &mut manifest)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok((manifest, report))
}

/// `boundary-maps` command on a saved checkpoint.
pub fn run_boundary_maps(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<(RunManifest, BoundaryMaps)> {
    cfg.validate()?;
    let model = Mlp::load(checkpoint)?;
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let maps = boundary_maps(&model, cfg, cfg.seeds[0])?;
    let mut manifest = RunManifest::new("boundary-maps", cfg);
    write_maps(&maps, out_dir, "", &mut manifest)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok((manifest, maps))
}

/// Mean and sample standard deviation (n − 1; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub params: Vec<(String, f64)>,
    pub reports: Vec<(u64, EvalReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub manifest: RunManifest,
}

fn grid_points(axes: &[SweepAxis]) -> Vec<Vec<(String, f64)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((axis.param.clone(), v));
                    q
                })
            })
            .collect();
    }
    points
}

/// `sweep` command: the cartesian product of `cfg.sweep`, every seed per
/// point. Grid points run in parallel; a failing run is recorded in the
/// manifest and the sweep carries on.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(Error::Config("sweep needs at least one axis".into()));
    }
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let grid = grid_points(&cfg.sweep);
    let runs: Vec<(SweepPoint, RunManifest)> = grid
        .par_iter()
        .enumerate()
        .map(|(index, params)| {
            let mut m = RunManifest::new("sweep", cfg);
            let mut point = SweepPoint {
                index,
                params: params.clone(),
                reports: Vec::new(),
            };
            let point_cfg = params
                .iter()
                .try_fold(cfg.clone(), |c, (p, v)| c.with_param(p, *v))
                .and_then(|c| c.validate().map(|_| c));
            let point_cfg = match point_cfg {
                Ok(c) => c,
                Err(e) => {
                    m.failures.push(Failure {
                        context: format!("point {index}"),
                        error: e.to_string(),
                    });
                    return (point, m);
                }
            };
            for &seed in &cfg.seeds {
                let prefix = format!("point_{index}/seed_{seed}/");
                match run_seed(&point_cfg, seed, out_dir, &prefix, &mut m) {
                    Ok(r) => point.reports.push((seed, r.report)),
                    Err(e) => m.failures.push(Failure {
                        context: format!("point {index} seed {seed}"),
                        error: e.to_string(),
                    }),
                }
            }
            (point, m)
        })
        .collect();

    let mut manifest = RunManifest::new("sweep", cfg);
    let mut points = Vec::new();
    for (p, m) in runs {
        manifest.merge(m);
        points.push(p);
    }
    emit(out_dir, "sweep.csv", &sweep_csv(cfg, &points), Kind::Metrics, &mut manifest)?;
    if cfg.sweep.len() == 2 {
        for (name, text) in sweep_matrices(cfg, &points) {
            emit(out_dir, &name, &text, Kind::Metrics, &mut manifest)?;
        }
    }
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok(SweepResult { points, manifest })
}

fn aggregate(point: &SweepPoint, detector: &str, setting: AttackSetting) -> Option<[(f64, f64); 3]> {
    let cells: Vec<&MetricCell> = point
        .reports
        .iter()
        .filter_map(|(_, r)| r.cell(detector, setting))
        .collect();
    if cells.is_empty() {
        return None;
    }
    let col = |f: fn(&MetricCell) -> f64| mean_std(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
    Some([col(|c| c.auroc), col(|c| c.fpr95), col(|c| c.aupr_out)])
}

fn sweep_csv(cfg: &ExperimentConfig, points: &[SweepPoint]) -> String {
    let mut out = String::from("point");
    for axis in &cfg.sweep {
        let _ = write!(out, ",{}", axis.param);
    }
    out.push_str(",detector,setting,n_seeds,auroc_mean,auroc_std,fpr95_mean,fpr95_std,aupr_out_mean,aupr_out_std,robust_accuracy_mean,robust_accuracy_std\n");
    for p in points {
        let acc = mean_std(&p.reports.iter().map(|(_, r)| r.robust_accuracy).collect::<Vec<_>>());
        for det in &cfg.detectors {
            for s in AttackSetting::ALL {
                let Some(m) = aggregate(p, &det.label(), s) else { continue };
                let _ = write!(out, "{}", p.index);
                for (_, v) in &p.params {
                    let _ = write!(out, ",{v}");
                }
                let _ = writeln!(
                    out,
                    ",{},{},{},{},{},{},{},{},{},{},{}",
                    det.label(),
                    s.name(),
                    p.reports.len(),
                    m[0].0,
                    m[0].1,
                    m[1].0,
                    m[1].1,
                    m[2].0,
                    m[2].1,
                    acc.0,
                    acc.1
                );
            }
        }
    }
    out
}

/// Mean AUROC as an axis-0 × axis-1 matrix, one file per detector and
/// attacked setting.
fn sweep_matrices(cfg: &ExperimentConfig, points: &[SweepPoint]) -> Vec<(String, String)> {
    let (a0, a1) = (&cfg.sweep[0], &cfg.sweep[1]);
    let mut files = Vec::new();
    for det in &cfg.detectors {
        for s in AttackSetting::ALL {
            let mut out = format!("{}\\{}", a0.param, a1.param);
            for v in &a1.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
            for (i, v0) in a0.values.iter().enumerate() {
                let _ = write!(out, "{v0}");
                for j in 0..a1.values.len() {
                    let p = &points[i * a1.values.len() + j];
                    match aggregate(p, &det.label(), s) {
                        Some(m) => {
                            let _ = write!(out, ",{}", m[0].0);
                        }
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
            let name = format!("matrix_auroc_{}_{}.csv", file_safe(&det.label()), s.name());
            files.push((name, out));
        }
    }
    files
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// The four toy training regimes: OE only, plus the ID KL term, plus the
/// OE KL term, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    A,
    B,
    C,
    D,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::A, Regime::B, Regime::C, Regime::D];

    pub fn name(self) -> &'static str {
        match self {
            Regime::A => "a",
            Regime::B => "b",
            Regime::C => "c",
            Regime::D => "d",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Regime::A => "outlier exposure",
            Regime::B => "outlier exposure + ID robustness",
            Regime::C => "outlier exposure + OE robustness",
            Regime::D => "outlier exposure + ID and OE robustness",
        }
    }

    /// The base config's η, β₁, β₂ with the robustness terms this regime
    /// drops set to zero, and no helper term.
    pub fn objective(self, base: &HaloConfig) -> HaloConfig {
        let (id, oe) = match self {
            Regime::A => (false, false),
            Regime::B => (true, false),
            Regime::C => (false, true),
            Regime::D => (true, true),
        };
        HaloConfig {
            objective: ObjectiveKind::Halo,
            eta: base.eta,
            gamma: 0.0,
            beta1: if id { base.beta1 } else { 0.0 },
            beta2: if oe { base.beta2 } else { 0.0 },
            hat_oe_enabled: false,
            oe_divergence: base.oe_divergence,
        }
    }

    pub fn config(self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            objective: self.objective(&base.objective),
            helper_checkpoint: None,
            train_helper: false,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyFigureResult {
    pub runs: Vec<(Regime, RunResult)>,
    pub manifest: RunManifest,
}

impl ToyFigureResult {
    pub fn reports(&self, regime: Regime) -> Vec<&EvalReport> {
        self.runs.iter().filter(|(r, _)| *r == regime).map(|(_, x)| &x.report).collect()
    }
}

const SUMMARY_HEADER: &str = "regime,seed,detector,setting,auroc,fpr95,aupr_out,clean_accuracy,robust_accuracy";

/// `toy-figure` command: every regime for every seed, a summary table and
/// boundary maps for the first seed.
pub fn run_toy_figure(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ToyFigureResult> {
    cfg.validate()?;
    if !matches!(cfg.data, DataConfig::Toy(_)) {
        return Err(Error::Config("toy-figure needs toy data".into()));
    }
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let mut manifest = RunManifest::new("toy-figure", cfg);
    let mut runs = Vec::new();
    for regime in Regime::ALL {
        let rcfg = regime.config(cfg);
        for (k, &seed) in cfg.seeds.iter().enumerate() {
            let prefix = format!("regime_{}/seed_{seed}/", regime.name());
            let run = run_seed(&rcfg, seed, out_dir, &prefix, &mut manifest)?;
            if k == 0 {
                let maps = boundary_maps(&run.model, &rcfg, seed)?;
                write_maps(&maps, out_dir, &format!("regime_{}/maps/", regime.name()), &mut manifest)?;
            }
            runs.push((regime, run));
        }
    }
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for (regime, run) in &runs {
        for c in &run.report.cells {
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{},{},{},{}",
                regime.name(),
                run.seed,
                c.detector,
                c.setting.name(),
                c.auroc,
                c.fpr95,
                c.aupr_out,
                run.report.clean_accuracy,
                run.report.robust_accuracy
            );
        }
    }
    emit(out_dir, "summary.csv", &summary, Kind::Metrics, &mut manifest)?;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok(ToyFigureResult { runs, manifest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Qualitative checks on a toy-figure run (entropy detector): robustness of
/// the joint regime, the asymmetry of the single-side regimes, the
/// vulnerability of plain OE, and the regime ordering.
pub fn toy_checks(res: &ToyFigureResult, out_dir: &Path) -> Vec<CheckOutcome> {
    let entropy = Detector::new(DetectorKind::Entropy).label();
    let auroc = |r: Regime, s: AttackSetting| -> Vec<f64> {
        res.reports(r)
            .iter()
            .filter_map(|rep| rep.cell(&entropy, s).map(|c| c.auroc))
            .collect()
    };
    let robust = |r: Regime| -> Vec<f64> { res.reports(r).iter().map(|x| x.robust_accuracy).collect() };
    let clean = |r: Regime| -> Vec<f64> { res.reports(r).iter().map(|x| x.clean_accuracy).collect() };
    let mean = |v: Vec<f64>| mean_std(&v).0;
    let mut out = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        out.push(CheckOutcome {
            name: name.into(),
            passed,
            detail,
        })
    };
    use AttackSetting::*;
    use Regime::*;

    let d_both = auroc(D, Both);
    let d_rob = robust(D);
    let good = d_both.iter().zip(&d_rob).filter(|(a, r)| **a >= 0.99 && **r >= 0.99).count();
    let need = (2 * d_both.len()).div_ceil(3);
    let slowest = res
        .runs
        .iter()
        .filter(|(r, _)| *r == D)
        .map(|(_, run)| run.train_secs)
        .fold(0.0, f64::max);
    check(
        "regime d robust",
        good >= need && slowest < 300.0,
        format!(
            "{good}/{} seeds with robust acc ≥ 0.99 and both-AUROC ≥ 0.99 (acc {d_rob:?}, auroc {d_both:?}), slowest seed {slowest:.0}s",
            d_both.len()
        ),
    );
    let (b_rob, b_both) = (median(&robust(B)), median(&auroc(B, Both)));
    check(
        "regime b asymmetry",
        b_rob >= 0.95 && b_both <= 0.90,
        format!("median robust acc {b_rob:.4}, median both-AUROC {b_both:.4}"),
    );
    let (c_o2i, c_rob, d_rob_med) = (median(&auroc(C, OodToId)), median(&robust(C)), median(&d_rob));
    check(
        "regime c asymmetry",
        c_o2i >= 0.95 && c_rob <= d_rob_med - 0.05,
        format!("median OOD→ID AUROC {c_o2i:.4}, median robust acc {c_rob:.4} vs {d_rob_med:.4} for d"),
    );
    let (a_clean, a_acc, a_both) = (median(&auroc(A, Clean)), median(&clean(A)), median(&auroc(A, Both)));
    check(
        "regime a vulnerability",
        a_clean >= 0.99 && a_acc >= 0.99 && a_both <= 0.60,
        format!("median clean AUROC {a_clean:.4}, clean acc {a_acc:.4}, both-AUROC {a_both:.4}"),
    );
    let (md, mb, mc) = (mean(auroc(D, Both)), mean(auroc(B, Both)), mean(auroc(C, Both)));
    check(
        "ordering under both attacks",
        md > mb && md > mc,
        format!("mean both-AUROC d {md:.4}, b {mb:.4}, c {mc:.4}"),
    );
    let (b, a) = (mean(auroc(B, IdToOod)), mean(auroc(A, IdToOod)));
    check("ordering under ID→OOD", b > a, format!("mean AUROC b {b:.4}, a {a:.4}"));
    let (c, a) = (mean(auroc(C, OodToId)), mean(auroc(A, OodToId)));
    check("ordering under OOD→ID", c > a, format!("mean AUROC c {c:.4}, a {a:.4}"));
    let verified = res.manifest.verify(out_dir);
    check(
        "manifest complete",
        verified.is_ok(),
        verified.err().map_or_else(|| format!("{} files", res.manifest.all_files().count()), |e| e.to_string()),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            epochs: 1,
            batch_size: 64,
            layer_sizes: vec![2, 8, 2],
            seeds: vec![0],
            n_test: 40,
            data: DataConfig::Toy(ToySpec {
                n_per_region: 50,
                ..ToySpec::default()
            }),
            train_attack: Some(AttackConfig::training(1.5, 2).with_bounds(Some(ToySpec::default().bounds()))),
            eval_attack: Some(AttackConfig::evaluation(1.5, 2).with_bounds(Some(ToySpec::default().bounds()))),
            objective: HaloConfig::default().with_beta(1.0).tap(|c| c.gamma = 0.0),
            maps: MapConfig {
                resolution: 5,
                ..MapConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    trait Tap: Sized {
        fn tap(mut self, f: impl FnOnce(&mut Self)) -> Self {
            f(&mut self);
            self
        }
    }
    impl Tap for HaloConfig {}

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            epochs = 3
            seeds = [4]
            [objective]
            objective = "oe"
            lambda = 0.5
            [data]
            kind = "toy"
            epsilon = 1.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.objective.eta, 0.5);
        assert_eq!(cfg.eval_attack().epsilon, 1.0);
        assert_eq!(cfg.eval_attack().steps, 20);
        assert_eq!(cfg.train_attack().objective, AttackObjective::KlMax);
        assert!(ExperimentConfig::from_toml("epoch = 3").is_err());
    }

    #[test]
    fn validation_happens_before_compute() {
        let mut cfg = tiny();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ExperimentConfig {
            objective: HaloConfig::default(),
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn param_paths() {
        let cfg = tiny().with_param("objective.beta", 2.5).unwrap();
        assert_eq!((cfg.objective.beta1, cfg.objective.beta2), (2.5, 2.5));
        assert_eq!(tiny().with_param("epochs", 7.0).unwrap().epochs, 7);
        assert!(tiny().with_param("epochs", 1.5).is_err());
        assert!(tiny().with_param("objective.nope", 1.0).is_err());
        let o = tiny().with_override("sgd.momentum = 0.9").unwrap();
        assert_eq!(o.sgd.momentum, 0.9);
        let o = tiny().with_override("objective.objective=trades").unwrap();
        assert_eq!(o.objective.objective, ObjectiveKind::Trades);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = ExperimentConfig { epochs: 0, ..tiny() };
        let data = load_data(&cfg, 0).unwrap();
        let out = train(&cfg, &data, 0, None, None).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.model, Mlp::init(&cfg.layer_sizes, derive_seed(0, Stream::Init)).unwrap());
    }

    #[test]
    fn report_shape_and_clean_scores() {
        let cfg = tiny();
        let data = load_data(&cfg, 0).unwrap();
        let model = train(&cfg, &data, 0, None, None).unwrap().model;
        let (report, table) = evaluate_with_scores(&model, &cfg, &data, 0).unwrap();
        assert_eq!(report.cells.len(), 4 * cfg.detectors.len());
        let det = &cfg.detectors[0];
        let (_, clean) = table.iter().find(|(d, sp)| *d == det.label() && sp.setting == AttackSetting::Clean).unwrap();
        assert_eq!(clean.id_scores, det.score(&model.logits(&data.test_id.features).unwrap()).unwrap());
    }

    #[test]
    fn maps_need_two_dimensional_models() {
        let m = Mlp::init(&[3, 4, 2], 0).unwrap();
        assert!(matches!(boundary_maps(&m, &tiny(), 0), Err(Error::Config(_))));
        let m = Mlp::init(&[2, 4, 2], 0).unwrap();
        let maps = boundary_maps(&m, &tiny(), 0).unwrap();
        assert_eq!(maps.entropy.len(), 25);
        assert!(maps.entropy.iter().all(|&h| (0.0..=std::f64::consts::LN_2).contains(&h)));
        assert_eq!(maps.files().len(), 5);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sweep_grid_is_cartesian() {
        let axes = vec![
            SweepAxis { param: "a".into(), values: vec![1.0, 2.0] },
            SweepAxis { param: "b".into(), values: vec![3.0, 4.0, 5.0] },
        ];
        let g = grid_points(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[4], vec![("a".to_string(), 2.0), ("b".to_string(), 4.0)]);
    }

    #[test]
    fn seed_streams_differ() {
        let s: Vec<u64> = [Stream::Data, Stream::Init, Stream::Train].iter().map(|&k| derive_seed(0, k)).collect();
        assert!(s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
    }
}
