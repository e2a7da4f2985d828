//! Declarative experiments: configs, seeded multi-run execution, grid
//! search and misclassification reports.

mod grid;
mod report;

pub use grid::{apply_point, grid_search, saturation_check, GridAxis, GridParam, GridResult, GridRow, GridSpec};
pub use report::{
    read_decision_log, render_contact_sheet, report_misclassified, report_run, DecisionRow, Misclassified,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{degree_of_certainty, plurality, Certainty, VoteTally};
use crate::augment::AugmentPlan;
use crate::dataset::{load_idx_pair, split, Dataset, SplitSeed, SplitSpec};
use crate::ensemble::{error_rate, predict_fusion, save_ensemble, train_fusion, FusionNode};
use crate::error::{Error, Result};
use crate::seed;

/// Where the raw IDX files live. Relative paths resolve against the config
/// file's directory. Without a test pair, the test split is cut from the
/// training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "ten")]
    pub n_classes: usize,
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetPlan {
    Dataset1,
    Dataset2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanRef {
    Preset(PresetPlan),
    Custom(AugmentPlan),
}

impl PlanRef {
    pub fn plan(&self) -> AugmentPlan {
        match self {
            PlanRef::Preset(PresetPlan::Dataset1) => AugmentPlan::dataset1(),
            PlanRef::Preset(PresetPlan::Dataset2) => AugmentPlan::dataset2(),
            PlanRef::Custom(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Dataset to augment; `train` or another augment.
    #[serde(default = "train_name")]
    pub source: String,
    pub plan: PlanRef,
}

fn train_name() -> String {
    TRAIN.into()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossRule {
    #[default]
    DegreeOfCertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossConfig {
    #[serde(default)]
    pub rule: CrossRule,
    pub trees: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Run `r` uses `seed + r`.
    #[default]
    Sequential,
    /// Every run uses `seed`.
    Fixed,
}

pub const TRAIN: &str = "train";
const RESERVED: [&str; 2] = ["validation", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitSpec,
    #[serde(default = "canonical")]
    pub split_seed: SplitSeed,
    #[serde(default)]
    pub augments: BTreeMap<String, AugmentConfig>,
    pub trees: BTreeMap<String, FusionNode>,
    /// Trees whose test error is reported on their own.
    #[serde(default)]
    pub evaluate: Vec<String>,
    #[serde(default)]
    pub cross: Option<CrossConfig>,
    #[serde(default)]
    pub grids: BTreeMap<String, GridSpec>,
    /// Defaults to 10 with a cross rule, 50 otherwise.
    #[serde(default)]
    pub runs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seed_mode: SeedMode,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub save_models: bool,
}

fn canonical() -> SplitSeed {
    SplitSeed::CANONICAL
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse, validate and resolve relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train_images);
        fix(&mut self.data.train_labels);
        self.data.test_images.as_mut().map(fix);
        self.data.test_labels.as_mut().map(fix);
        fix(&mut self.output_dir);
        fn walk(n: &mut FusionNode, fix: &dyn Fn(&mut PathBuf)) {
            match n {
                FusionNode::Leaf { model: Some(m), .. } => fix(m),
                FusionNode::Bagged { child, .. } | FusionNode::Switched { child, .. } => walk(child, fix),
                FusionNode::WeightedCombo { children } => children.iter_mut().for_each(|c| walk(&mut c.node, fix)),
                _ => {}
            }
        }
        for tree in self.trees.values_mut() {
            walk(tree, &fix);
        }
    }

    pub fn runs(&self) -> usize {
        self.runs.unwrap_or(if self.cross.is_some() { 10 } else { 50 })
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        match self.seed_mode {
            SeedMode::Sequential => self.seed.wrapping_add(run as u64),
            SeedMode::Fixed => self.seed,
        }
    }

    /// Trees trained in each run: `evaluate` then any extra cross trees.
    pub fn active_trees(&self) -> Vec<String> {
        let mut out = self.evaluate.clone();
        if let Some(c) = &self.cross {
            for t in &c.trees {
                if !out.contains(t) {
                    out.push(t.clone());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.runs() == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.split.train == 0 {
            return bad("the train split is empty".into());
        }
        if self.data.test_images.is_some() != self.data.test_labels.is_some() {
            return bad("test_images and test_labels go together".into());
        }
        for name in self.augments.keys() {
            if name == TRAIN || RESERVED.contains(&name.as_str()) {
                return bad(format!("augment name '{name}' is reserved"));
            }
        }
        for (name, a) in &self.augments {
            if a.source != TRAIN && !self.augments.contains_key(&a.source) {
                return bad(format!("augment '{name}' reads unknown dataset '{}'", a.source));
            }
            if a.source == *name {
                return bad(format!("augment '{name}' reads itself"));
            }
        }
        for (name, tree) in &self.trees {
            tree.validate().map_err(|e| Error::ConfigInvalid(format!("tree '{name}': {e}")))?;
            for d in tree.datasets() {
                if RESERVED.contains(&d.as_str()) {
                    return bad(format!("tree '{name}' trains on the {d} split"));
                }
                if d != TRAIN && !self.augments.contains_key(&d) {
                    return bad(format!("tree '{name}' references unknown dataset '{d}'"));
                }
            }
        }
        let active = self.active_trees();
        if active.is_empty() {
            return bad("nothing to evaluate: set `evaluate` or `cross`".into());
        }
        for t in &active {
            if !self.trees.contains_key(t) {
                return bad(format!("unknown tree '{t}'"));
            }
        }
        if let Some(c) = &self.cross {
            if c.trees.len() < 2 {
                return bad("a cross rule needs at least two trees".into());
            }
        }
        for (name, g) in &self.grids {
            if !self.trees.contains_key(name) {
                return bad(format!("grid for unknown tree '{name}'"));
            }
            g.validate()?;
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn data_err(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::DataUnreadable { path: path.to_path_buf(), reason: io.to_string() },
        other => Error::DataUnreadable { path: path.to_path_buf(), reason: other.to_string() },
    }
}

fn load_pair(images: &Path, labels: &Path, n_classes: usize, name: &str) -> Result<Dataset> {
    load_idx_pair(images, labels, n_classes, name).map_err(|e| data_err(images, e))
}

/// Train and validation splits only. Grid search goes through here, so it
/// never sees test data.
pub fn load_development(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let full = load_pair(&cfg.data.train_images, &cfg.data.train_labels, cfg.data.n_classes, TRAIN)?;
    let spec = SplitSpec { test: 0, ..cfg.split };
    let (train, validation, _) = split(&full, spec, cfg.split_seed).map_err(|e| data_err(&cfg.data.train_images, e))?;
    Ok((train, validation))
}

/// Train, validation and test splits.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let full = load_pair(&cfg.data.train_images, &cfg.data.train_labels, cfg.data.n_classes, TRAIN)?;
    match (&cfg.data.test_images, &cfg.data.test_labels) {
        (Some(ti), Some(tl)) => {
            let spec = SplitSpec { test: 0, ..cfg.split };
            let (train, validation, _) =
                split(&full, spec, cfg.split_seed).map_err(|e| data_err(&cfg.data.train_images, e))?;
            let test_full = load_pair(ti, tl, cfg.data.n_classes, "test")?;
            let n = cfg.split.test;
            if n > test_full.len() {
                return Err(data_err(ti, Error::SpecExceedsDataset { requested: n, available: test_full.len() }));
            }
            let idx: Vec<usize> = (0..n).collect();
            Ok((train, validation, test_full.subset(&idx, "test")?))
        }
        _ => split(&full, cfg.split, cfg.split_seed).map_err(|e| data_err(&cfg.data.train_images, e)),
    }
}

/// `train` plus every configured augment, each built once from a seed
/// derived from the experiment seed and its name.
pub fn build_datasets(cfg: &ExperimentConfig, train: &Dataset) -> Result<BTreeMap<String, Dataset>> {
    let mut out = BTreeMap::from([(TRAIN.to_string(), train.clone())]);
    let mut pending: Vec<&String> = cfg.augments.keys().collect();
    while !pending.is_empty() {
        let before = pending.len();
        let mut i = 0;
        while i < pending.len() {
            let name = pending[i];
            let a = &cfg.augments[name];
            if let Some(src) = out.get(&a.source) {
                let built = a.plan.plan().apply(src, seed::derive_str(cfg.seed, &format!("augment:{name}")))?;
                out.insert(name.clone(), built.renamed(name.clone()));
                pending.remove(i);
            } else {
                i += 1;
            }
        }
        if pending.len() == before {
            return Err(Error::ConfigInvalid("augments form a cycle".into()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub name: String,
    /// Test error in percent, one per run.
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
    /// Validation error in percent per run; empty for the cross entry.
    #[serde(default)]
    pub validation_errors: Vec<f64>,
}

impl EntryReport {
    pub fn new(name: &str, errors: Vec<f64>, validation_errors: Vec<f64>) -> Self {
        let (mean, std_dev) = mean_std(&errors);
        Self { name: name.into(), errors, mean, std_dev, validation_errors }
    }

    pub fn median(&self) -> f64 {
        median(&self.errors)
    }
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_fingerprint: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub entries: Vec<EntryReport>,
    pub decision_logs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub test_size: usize,
}

impl RunReport {
    pub fn entry(&self, name: &str) -> Option<&EntryReport> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_COPY: &str = "config.json";
pub const CROSS_ENTRY: &str = "cross";

/// Write via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct TreeOutcome {
    tallies: Vec<VoteTally>,
    classes: Vec<(usize, bool)>,
    validation_error: f64,
}

/// Outcome of one run: test error per entry plus the decision log.
struct RunOutcome {
    errors: Vec<f64>,
    validation_errors: Vec<f64>,
    log: PathBuf,
}

fn percent_wrong(pred: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    let wrong = pred.zip(labels).filter(|(p, l)| p != *l).count();
    if labels.is_empty() {
        0.0
    } else {
        wrong as f64 * 100.0 / labels.len() as f64
    }
}

fn join_votes(t: &VoteTally) -> String {
    t.votes().iter().map(u32::to_string).collect::<Vec<_>>().join(";")
}

#[allow(clippy::too_many_arguments)]
fn run_once(
    cfg: &ExperimentConfig,
    run: usize,
    datasets: &BTreeMap<String, Dataset>,
    validation: &Dataset,
    test: &Dataset,
    trees: &[String],
    run_dir: &Path,
) -> Result<RunOutcome> {
    let run_seed = cfg.run_seed(run);
    let mut outcomes = Vec::new();
    for name in trees {
        let ens = train_fusion(&cfg.trees[name], datasets, validation, seed::derive_str(run_seed, name))?;
        let tallies = predict_fusion(&ens, test.images())?;
        let classes = tallies.iter().map(plurality).collect::<Result<Vec<_>>>()?;
        let validation_error = error_rate(&ens, validation)? * 100.0;
        if cfg.save_models {
            save_ensemble(&ens, &run_dir.join("models").join(name))?;
        }
        outcomes.push(TreeOutcome { tallies, classes, validation_error });
    }
    let labels = test.labels();
    let mut errors: Vec<f64> = outcomes.iter().map(|o| percent_wrong(o.classes.iter().map(|c| c.0), labels)).collect();
    let validation_errors: Vec<f64> = outcomes.iter().map(|o| o.validation_error).collect();

    let cross_members: Vec<usize> = cfg
        .cross
        .as_ref()
        .map(|c| c.trees.iter().map(|t| trees.iter().position(|x| x == t).expect("active")).collect())
        .unwrap_or_default();
    let certainties: Option<Vec<Certainty>> = if cross_members.is_empty() {
        None
    } else {
        let val: Vec<f64> = cross_members.iter().map(|&i| outcomes[i].validation_error).collect();
        Some(
            (0..test.len())
                .map(|s| {
                    let tallies: Vec<VoteTally> =
                        cross_members.iter().map(|&i| outcomes[i].tallies[s].clone()).collect();
                    degree_of_certainty(&tallies, &val)
                })
                .collect::<Result<_>>()?,
        )
    };
    if let Some(c) = &certainties {
        errors.push(percent_wrong(c.iter().map(|c| c.class), labels));
    }

    // decision log
    let log = run_dir.join("decisions.csv");
    let mut w = csv::Writer::from_path(&log)?;
    let mut header = vec!["sample".to_string(), "label".to_string()];
    for t in trees {
        header.extend([format!("{t}_votes"), format!("{t}_size"), format!("{t}_class"), format!("{t}_tie")]);
    }
    header.extend(["certainty".into(), "cross_invoked".into(), "cross_tie".into(), "final".into()]);
    w.write_record(&header)?;
    for s in 0..test.len() {
        let mut row = vec![s.to_string(), labels[s].to_string()];
        for o in &outcomes {
            row.extend([
                join_votes(&o.tallies[s]),
                o.tallies[s].size().to_string(),
                o.classes[s].0.to_string(),
                o.classes[s].1.to_string(),
            ]);
        }
        match &certainties {
            Some(c) => {
                let c = &c[s];
                row.extend([
                    c.scores.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
                    c.invoked.to_string(),
                    c.tie.to_string(),
                    c.class.to_string(),
                ]);
            }
            None => row.extend([String::new(), "false".into(), "false".into(), outcomes[0].classes[s].0.to_string()]),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(RunOutcome { errors, validation_errors, log })
}

/// Run every configured cycle and write `report.json` to the output
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let (train, validation, test) = load_splits(cfg)?;
    let datasets = build_datasets(cfg, &train)?;
    let trees = cfg.active_trees();
    fs::create_dir_all(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join(CONFIG_COPY), &serde_json::to_vec_pretty(cfg)?)?;

    let runs = cfg.runs();
    let mut outcomes = Vec::with_capacity(runs);
    for r in 0..runs {
        let run_dir = cfg.output_dir.join(format!("run-{r:03}"));
        fs::create_dir_all(&run_dir)?;
        let o = run_once(cfg, r, &datasets, &validation, &test, &trees, &run_dir)
            .map_err(|e| Error::Run { index: r, source: Box::new(e) })?;
        outcomes.push(o);
    }

    let mut names = trees.clone();
    if cfg.cross.is_some() {
        names.push(CROSS_ENTRY.into());
    }
    let entries = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let errs = outcomes.iter().map(|o| o.errors[i]).collect();
            let val =
                if i < trees.len() { outcomes.iter().map(|o| o.validation_errors[i]).collect() } else { Vec::new() };
            EntryReport::new(n, errs, val)
        })
        .collect();
    let report = RunReport {
        config_fingerprint: cfg.fingerprint(),
        runs,
        seeds: (0..runs).map(|r| cfg.run_seed(r)).collect(),
        entries,
        decision_logs: outcomes.into_iter().map(|o| o.log).collect(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        test_size: test.len(),
    };
    write_atomic(&cfg.output_dir.join(REPORT_FILE), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Process exit code for an error: 2 for config problems, 3 for data
/// problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Run { source, .. } => exit_code(source),
        Error::ConfigInvalid(_) | Error::UnresolvedDataset(_) | Error::InvalidTree(_) => 2,
        Error::DataUnreadable { .. }
        | Error::MalformedMagic { .. }
        | Error::TruncatedPayload { .. }
        | Error::ZeroDimension { .. }
        | Error::SpecExceedsDataset { .. } => 3,
        _ => 1,
    }
}
