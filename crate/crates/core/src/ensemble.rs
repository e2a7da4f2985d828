//! Ensemble combinators and fusion trees.
//!
//! A [`FusionNode`] describes how learners are composed: leaves are single
//! networks, `Bagged` and `Switched` train copies of a child on resampled or
//! relabeled data, `EcocStage` is a two-level binarized pipeline with
//! pre-emphasis weighting, and `WeightedCombo` runs children in parallel and
//! adds their votes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{plurality, VoteTally};
use crate::codes::{derive_dichotomy, hamming_decode, CodeKind, CodeMatrix};
use crate::dataset::{Dataset, Image};
use crate::error::{Error, Result};
use crate::nnet::{
    predict, train, train_sdae, transform, ArchSpec, SampleWeights, SdaeEncoder, SdaeSpec, Shape, TrainedModel,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreEmphasisParams {
    pub alpha: f64,
    pub beta: f64,
}

impl PreEmphasisParams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::ParamOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

/// `w = a + (1 - a) [b (t - o)^2 + (1 - b)(1 - o^2)]` per sample, before
/// normalization. The first term keeps a floor, the second emphasizes
/// errors, the third samples near the decision border.
pub fn pre_emphasis_raw(targets: &[i8], outputs: &[f64], params: PreEmphasisParams) -> Result<Vec<f64>> {
    params.validate()?;
    if targets.len() != outputs.len() {
        return Err(Error::LengthMismatch { expected: targets.len(), found: outputs.len() });
    }
    let PreEmphasisParams { alpha, beta } = params;
    targets
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(index, (&t, &o))| {
            if t != 1 && t != -1 {
                return Err(Error::InvalidTarget { index, value: t });
            }
            if !(-1.0..=1.0).contains(&o) {
                return Err(Error::OutputOutOfRange { index, value: o });
            }
            let t = f64::from(t);
            Ok(alpha + (1.0 - alpha) * (beta * (t - o) * (t - o) + (1.0 - beta) * (1.0 - o * o)))
        })
        .collect()
}

/// [`pre_emphasis_raw`] rescaled to mean 1. All-zero weights are
/// [`Error::DegenerateWeights`].
pub fn pre_emphasis_weights(targets: &[i8], outputs: &[f64], params: PreEmphasisParams) -> Result<SampleWeights> {
    SampleWeights::normalized(&pre_emphasis_raw(targets, outputs, params)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaggingParams {
    /// Bootstrap population as a fraction of the data (1.2 = 120%).
    pub fraction: f64,
    pub members: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingParams {
    pub rate: f64,
    pub members: usize,
}

fn check_members(members: usize) -> Result<()> {
    if members == 0 {
        return Err(Error::InvalidTree("ensembles need at least one member".into()));
    }
    Ok(())
}

/// `round(fraction * n)` indices drawn uniformly with replacement.
pub fn bootstrap_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if !(fraction.is_finite() && fraction > 0.0) {
        return Err(Error::ParamOutOfRange { name: "fraction", value: fraction });
    }
    let count = (fraction * n as f64).round() as usize;
    let mut rng = seed::rng(seed);
    Ok((0..count).map(|_| rng.random_range(0..n)).collect())
}

pub fn bootstrap(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let idx = bootstrap_indices(data.len(), fraction, seed)?;
    data.subset(&idx, format!("{}-boot", data.split_name()))
}

/// Replace the labels of exactly `floor(rate * n)` samples, chosen without
/// replacement, by a uniformly drawn different class. Returns the new labels
/// and the switched positions in ascending order.
pub fn switch_label_vec(labels: &[usize], n_classes: usize, rate: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::RateOutOfRange(rate));
    }
    if n_classes < 2 {
        return Err(Error::TooFewClasses(n_classes));
    }
    let n = labels.len();
    let count = (rate * n as f64).floor() as usize;
    let mut rng = seed::rng(seed);
    let mut chosen = sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    let mut out = labels.to_vec();
    for &i in &chosen {
        // draw from the n_classes - 1 other classes
        let r = rng.random_range(0..n_classes - 1);
        out[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok((out, chosen))
}

pub fn switch_labels(data: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    let (labels, _) = switch_label_vec(data.labels(), data.n_classes(), rate, seed)?;
    data.with_labels(labels, data.n_classes())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeOrder {
    /// The k-th member of every dichotomy forms one decoding committee.
    MemberWise,
    /// Majority per dichotomy first, then one decode.
    #[default]
    DichotomyWise,
}

/// Second level of an ECOC stage, trained per dichotomy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecondLevel {
    Switched(SwitchingParams),
    Bagged(BaggingParams),
}

impl SecondLevel {
    pub fn members(&self) -> usize {
        match self {
            SecondLevel::Switched(p) => p.members,
            SecondLevel::Bagged(p) => p.members,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcocStageSpec {
    pub dataset: String,
    pub code: CodeKind,
    pub pre_emphasis: PreEmphasisParams,
    /// First-stage learner whose outputs drive the emphasis weights.
    pub stage1: ArchSpec,
    pub second_level: SecondLevel,
    pub member: ArchSpec,
    /// Optional encoder shared by all second-level members.
    #[serde(default)]
    pub sdae: Option<SdaeSpec>,
    #[serde(default)]
    pub decode_order: DecodeOrder,
    #[serde(default)]
    pub keep_stage1_voter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedChild {
    #[serde(default = "one")]
    pub weight: u32,
    pub node: FusionNode,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum FusionNode {
    /// A single network. Leaves sharing an `id` are one model, trained once.
    /// `model` loads a pretrained container instead of training.
    Leaf {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        arch: Option<ArchSpec>,
        #[serde(default)]
        model: Option<PathBuf>,
        dataset: String,
    },
    Bagged {
        params: BaggingParams,
        child: Box<FusionNode>,
    },
    Switched {
        params: SwitchingParams,
        child: Box<FusionNode>,
    },
    EcocStage(Box<EcocStageSpec>),
    /// Parallel composition. Nested combos are flattened (their whole tally
    /// is added, times the weight); any other child adds its plurality
    /// class `weight` times.
    WeightedCombo {
        children: Vec<WeightedChild>,
    },
}

impl FusionNode {
    pub fn leaf(arch: ArchSpec, dataset: &str) -> Self {
        FusionNode::Leaf { id: None, arch: Some(arch), model: None, dataset: dataset.into() }
    }

    pub fn shared_leaf(id: &str, arch: ArchSpec, dataset: &str) -> Self {
        FusionNode::Leaf { id: Some(id.into()), arch: Some(arch), model: None, dataset: dataset.into() }
    }

    pub fn combo(children: Vec<FusionNode>) -> Self {
        FusionNode::WeightedCombo {
            children: children.into_iter().map(|node| WeightedChild { weight: 1, node }).collect(),
        }
    }

    /// Votes in the tally this tree emits.
    pub fn nominal_size(&self) -> usize {
        match self {
            FusionNode::Leaf { .. } => 1,
            FusionNode::Bagged { params, child } => params.members * child.nominal_size(),
            FusionNode::Switched { params, child } => params.members * child.nominal_size(),
            FusionNode::EcocStage(s) => s.second_level.members() + usize::from(s.keep_stage1_voter),
            FusionNode::WeightedCombo { children } => children
                .iter()
                .map(|c| match &c.node {
                    FusionNode::WeightedCombo { .. } => c.weight as usize * c.node.nominal_size(),
                    _ => c.weight as usize,
                })
                .sum(),
        }
    }

    /// Networks trained (or loaded) for this tree, counting shared leaves once.
    pub fn leaf_count(&self) -> usize {
        let mut ids = std::collections::BTreeSet::new();
        fn walk(n: &FusionNode, ids: &mut std::collections::BTreeSet<String>) -> usize {
            match n {
                FusionNode::Leaf { id: Some(id), .. } => usize::from(ids.insert(id.clone())),
                FusionNode::Leaf { .. } => 1,
                FusionNode::Bagged { params, child } => params.members * walk(child, ids),
                FusionNode::Switched { params, child } => params.members * walk(child, ids),
                FusionNode::EcocStage(s) => {
                    let cols = s.code.matrix(10).map_or(0, |m| m.n_columns());
                    cols * (1 + s.second_level.members())
                }
                FusionNode::WeightedCombo { children } => children.iter().map(|c| walk(&c.node, ids)).sum(),
            }
        }
        walk(self, &mut ids)
    }

    /// Votes each shared leaf casts when every leaf agrees, keyed by id.
    /// Only leaves directly reachable through combos are counted.
    pub fn effective_weights(&self) -> BTreeMap<String, u32> {
        let mut out = BTreeMap::new();
        fn walk(n: &FusionNode, factor: u32, out: &mut BTreeMap<String, u32>, path: &str) {
            match n {
                FusionNode::WeightedCombo { children } => {
                    for (i, c) in children.iter().enumerate() {
                        walk(&c.node, factor * c.weight, out, &format!("{path}/{i}"));
                    }
                }
                FusionNode::Leaf { id, .. } => {
                    *out.entry(id.clone().unwrap_or_else(|| path.to_string())).or_default() += factor;
                }
                _ => {
                    *out.entry(path.to_string()).or_default() += factor;
                }
            }
        }
        walk(self, 1, &mut out, "");
        out
    }

    /// Structural checks: member counts, weights, leaf contents, shared-id
    /// consistency and that shared leaves are not placed under resampling.
    pub fn validate(&self) -> Result<()> {
        let mut shared: HashMap<String, &FusionNode> = HashMap::new();
        self.validate_inner(false, &mut shared)
    }

    fn validate_inner<'a>(&'a self, resampled: bool, shared: &mut HashMap<String, &'a FusionNode>) -> Result<()> {
        match self {
            FusionNode::Leaf { id, arch, model, .. } => {
                if arch.is_some() == model.is_some() {
                    return Err(Error::InvalidTree("a leaf needs exactly one of `arch` or `model`".into()));
                }
                if let Some(id) = id {
                    if resampled {
                        return Err(Error::InvalidTree(format!(
                            "shared leaf '{id}' cannot sit under bagging or switching"
                        )));
                    }
                    if let Some(prev) = shared.insert(id.clone(), self) {
                        if prev != self {
                            return Err(Error::InvalidTree(format!("leaf id '{id}' is defined twice differently")));
                        }
                    }
                }
                Ok(())
            }
            FusionNode::Bagged { params, child } => {
                check_members(params.members)?;
                if !(params.fraction.is_finite() && params.fraction > 0.0) {
                    return Err(Error::ParamOutOfRange { name: "fraction", value: params.fraction });
                }
                child.validate_inner(true, shared)
            }
            FusionNode::Switched { params, child } => {
                check_members(params.members)?;
                if !(0.0..1.0).contains(&params.rate) {
                    return Err(Error::RateOutOfRange(params.rate));
                }
                child.validate_inner(true, shared)
            }
            FusionNode::EcocStage(s) => {
                s.pre_emphasis.validate()?;
                check_members(s.second_level.members())?;
                match s.second_level {
                    SecondLevel::Switched(p) if !(0.0..1.0).contains(&p.rate) => Err(Error::RateOutOfRange(p.rate)),
                    SecondLevel::Bagged(p) if !(p.fraction.is_finite() && p.fraction > 0.0) => {
                        Err(Error::ParamOutOfRange { name: "fraction", value: p.fraction })
                    }
                    _ => Ok(()),
                }
            }
            FusionNode::WeightedCombo { children } => {
                if children.is_empty() {
                    return Err(Error::InvalidTree("a combo needs at least one child".into()));
                }
                if children.iter().any(|c| c.weight == 0) {
                    return Err(Error::InvalidTree("combo weights must be at least 1".into()));
                }
                children.iter().try_for_each(|c| c.node.validate_inner(resampled, shared))
            }
        }
    }

    /// Every dataset name the tree reads.
    pub fn datasets(&self) -> Vec<String> {
        let mut out = Vec::new();
        fn walk(n: &FusionNode, out: &mut Vec<String>) {
            match n {
                FusionNode::Leaf { dataset, .. } => out.push(dataset.clone()),
                FusionNode::Bagged { child, .. } | FusionNode::Switched { child, .. } => walk(child, out),
                FusionNode::EcocStage(s) => out.push(s.dataset.clone()),
                FusionNode::WeightedCombo { children } => children.iter().for_each(|c| walk(&c.node, out)),
            }
        }
        walk(self, &mut out);
        out.sort();
        out.dedup();
        out
    }
}

/// A trained ECOC stage.
#[derive(Debug, Clone)]
pub struct TrainedEcoc {
    pub code: CodeMatrix,
    pub stage1: Vec<TrainedModel>,
    /// `members[j][k]`: k-th second-level member of dichotomy j.
    pub members: Vec<Vec<TrainedModel>>,
    pub sdae: Option<SdaeEncoder>,
    pub decode_order: DecodeOrder,
    pub keep_stage1_voter: bool,
    /// Dichotomies whose emphasis weights were all zero and fell back to
    /// uniform weighting.
    pub emphasis_fallback: Vec<bool>,
}

/// Mirror of a [`FusionNode`] holding trained models.
#[derive(Debug, Clone)]
pub enum TrainedEnsemble {
    Leaf { id: Option<String>, model: Arc<TrainedModel> },
    Committee { members: Vec<TrainedEnsemble> },
    Ecoc(Box<TrainedEcoc>),
    WeightedCombo { children: Vec<(u32, TrainedEnsemble)> },
}

/// Resampling applied to a leaf's dataset, outermost first.
#[derive(Debug, Clone, Copy)]
enum Resample {
    Bootstrap { fraction: f64, seed: u64 },
    Switch { rate: f64, seed: u64 },
}

struct TrainCtx<'a> {
    datasets: &'a BTreeMap<String, Dataset>,
    validation: &'a Dataset,
    shared: HashMap<String, Arc<TrainedModel>>,
}

impl TrainCtx<'_> {
    fn dataset(&self, name: &str) -> Result<&Dataset> {
        self.datasets.get(name).ok_or_else(|| Error::UnresolvedDataset(name.into()))
    }
}

fn train_leaf(arch: &ArchSpec, data: &Dataset, validation: &Dataset, seed: u64) -> Result<TrainedModel> {
    let (h, w) = data.image_dims().ok_or(Error::EmptyInput)?;
    let spec = arch.bind(Shape::image(h, w), data.n_classes(), seed);
    train(&spec, data, None, validation)
}

fn load_leaf(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path)
}

/// Train every node of `node`. Children get seeds derived from `seed` and
/// their position; shared leaves get seeds derived from their id.
pub fn train_fusion(
    node: &FusionNode,
    datasets: &BTreeMap<String, Dataset>,
    validation: &Dataset,
    seed: u64,
) -> Result<TrainedEnsemble> {
    node.validate()?;
    for name in node.datasets() {
        if !datasets.contains_key(&name) {
            return Err(Error::UnresolvedDataset(name));
        }
    }
    let mut ctx = TrainCtx { datasets, validation, shared: HashMap::new() };
    let mut leaves = Vec::new();
    collect_shared(node, &mut leaves);
    let trained: Vec<(String, TrainedModel)> = leaves
        .par_iter()
        .map(|&(id, arch, model, dataset)| {
            let m = match (arch, model) {
                (_, Some(path)) => load_leaf(path)?,
                (Some(arch), None) => train_leaf(arch, ctx.dataset(dataset)?, validation, seed::derive_str(seed, id))?,
                (None, None) => unreachable!("validated"),
            };
            Ok((id.to_string(), m))
        })
        .collect::<Result<_>>()?;
    ctx.shared = trained.into_iter().map(|(id, m)| (id, Arc::new(m))).collect();
    train_node(node, &ctx, &[], seed)
}

type SharedLeaf<'a> = (&'a str, Option<&'a ArchSpec>, Option<&'a PathBuf>, &'a str);

fn collect_shared<'a>(node: &'a FusionNode, out: &mut Vec<SharedLeaf<'a>>) {
    match node {
        FusionNode::Leaf { id: Some(id), arch, model, dataset } => {
            if !out.iter().any(|(i, ..)| i == id) {
                out.push((id, arch.as_ref(), model.as_ref(), dataset));
            }
        }
        FusionNode::WeightedCombo { children } => children.iter().for_each(|c| collect_shared(&c.node, out)),
        _ => {}
    }
}

fn apply_resampling(data: &Dataset, ops: &[Resample]) -> Result<Dataset> {
    let mut data = data.clone();
    for op in ops {
        data = match *op {
            Resample::Bootstrap { fraction, seed } => bootstrap(&data, fraction, seed)?,
            Resample::Switch { rate, seed } => switch_labels(&data, rate, seed)?,
        };
    }
    Ok(data)
}

fn train_node(node: &FusionNode, ctx: &TrainCtx, ops: &[Resample], seed: u64) -> Result<TrainedEnsemble> {
    match node {
        FusionNode::Leaf { id: Some(id), .. } => {
            Ok(TrainedEnsemble::Leaf { id: Some(id.clone()), model: ctx.shared[id].clone() })
        }
        FusionNode::Leaf { id: None, arch, model, dataset } => {
            let m = match (arch, model) {
                (_, Some(path)) => load_leaf(path)?,
                (Some(arch), None) => {
                    let data = apply_resampling(ctx.dataset(dataset)?, ops)?;
                    train_leaf(arch, &data, ctx.validation, seed)?
                }
                (None, None) => unreachable!("validated"),
            };
            Ok(TrainedEnsemble::Leaf { id: None, model: Arc::new(m) })
        }
        FusionNode::Bagged { params, child } => {
            let members = (0..params.members)
                .into_par_iter()
                .map(|k| {
                    let s = seed::derive(seed, k as u64);
                    let mut ops = ops.to_vec();
                    ops.push(Resample::Bootstrap { fraction: params.fraction, seed: seed::derive(s, 0) });
                    train_node(child, ctx, &ops, seed::derive(s, 1))
                })
                .collect::<Result<_>>()?;
            Ok(TrainedEnsemble::Committee { members })
        }
        FusionNode::Switched { params, child } => {
            let members = (0..params.members)
                .into_par_iter()
                .map(|k| {
                    let s = seed::derive(seed, k as u64);
                    let mut ops = ops.to_vec();
                    ops.push(Resample::Switch { rate: params.rate, seed: seed::derive(s, 0) });
                    train_node(child, ctx, &ops, seed::derive(s, 1))
                })
                .collect::<Result<_>>()?;
            Ok(TrainedEnsemble::Committee { members })
        }
        FusionNode::EcocStage(spec) => {
            let data = apply_resampling(ctx.dataset(&spec.dataset)?, ops)?;
            train_ecoc(spec, &data, ctx.validation, seed).map(|e| TrainedEnsemble::Ecoc(Box::new(e)))
        }
        FusionNode::WeightedCombo { children } => {
            let trained = children
                .par_iter()
                .enumerate()
                .map(|(i, c)| Ok((c.weight, train_node(&c.node, ctx, ops, seed::derive(seed, i as u64))?)))
                .collect::<Result<_>>()?;
            Ok(TrainedEnsemble::WeightedCombo { children: trained })
        }
    }
}

/// Map two-class probabilities to an output in [-1, 1]: `2 p(+1) - 1`.
pub fn binary_output(probs: &[f64]) -> f64 {
    (2.0 * probs[1] - 1.0).clamp(-1.0, 1.0)
}

fn train_ecoc(spec: &EcocStageSpec, data: &Dataset, validation: &Dataset, seed: u64) -> Result<TrainedEcoc> {
    let code = spec.code.matrix(data.n_classes())?;
    let sdae = spec
        .sdae
        .as_ref()
        .map(|s| train_sdae(&SdaeSpec { seed: seed::derive(seed, u64::MAX), ..s.clone() }, data))
        .transpose()?;
    let (member_data, member_val) = match &sdae {
        Some(enc) => (transform(enc, data)?, transform(enc, validation)?),
        None => (data.clone(), validation.clone()),
    };
    let per_column: Vec<(TrainedModel, Vec<TrainedModel>, bool)> = (0..code.n_columns())
        .into_par_iter()
        .map(|j| {
            let s = seed::derive(seed, j as u64);
            let dich = derive_dichotomy(data, &code, j)?;
            let dich_val = derive_dichotomy(validation, &code, j)?;
            let stage1 = train_leaf(&spec.stage1, &dich.data, &dich_val.data, seed::derive(s, 0))?;
            let outputs: Vec<f64> = predict(&stage1, dich.data.images())?.iter().map(|p| binary_output(p)).collect();
            let (weights, fallback) = match pre_emphasis_weights(&dich.targets, &outputs, spec.pre_emphasis) {
                Ok(w) => (w, false),
                Err(Error::DegenerateWeights) => (SampleWeights::uniform(dich.data.len()), true),
                Err(e) => return Err(e),
            };
            let mdich = derive_dichotomy(&member_data, &code, j)?;
            let mval = derive_dichotomy(&member_val, &code, j)?;
            let members = (0..spec.second_level.members())
                .map(|k| {
                    let ms = seed::derive(s, 1 + k as u64);
                    let (train_set, w) = match spec.second_level {
                        SecondLevel::Bagged(p) => {
                            let idx = bootstrap_indices(mdich.data.len(), p.fraction, seed::derive(ms, 0))?;
                            let w: Vec<f64> = idx.iter().map(|&i| weights.as_slice()[i]).collect();
                            (mdich.data.subset(&idx, "bag")?, w)
                        }
                        SecondLevel::Switched(p) => {
                            (switch_labels(&mdich.data, p.rate, seed::derive(ms, 0))?, weights.as_slice().to_vec())
                        }
                    };
                    let w = match SampleWeights::normalized(&w) {
                        Ok(w) => w,
                        // a bootstrap can miss every emphasized sample
                        Err(Error::DegenerateWeights) => SampleWeights::uniform(train_set.len()),
                        Err(e) => return Err(e),
                    };
                    let (h, wd) = train_set.image_dims().ok_or(Error::EmptyInput)?;
                    let net = spec.member.bind(Shape::image(h, wd), 2, seed::derive(ms, 1));
                    train(&net, &train_set, Some(&w), &mval.data)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((stage1, members, fallback))
        })
        .collect::<Result<_>>()?;
    let mut stage1 = Vec::new();
    let mut members = Vec::new();
    let mut emphasis_fallback = Vec::new();
    for (s1, m, f) in per_column {
        stage1.push(s1);
        members.push(m);
        emphasis_fallback.push(f);
    }
    Ok(TrainedEcoc {
        code,
        stage1,
        members,
        sdae,
        decode_order: spec.decode_order,
        keep_stage1_voter: spec.keep_stage1_voter,
        emphasis_fallback,
    })
}

impl TrainedEnsemble {
    pub fn n_classes(&self) -> usize {
        match self {
            TrainedEnsemble::Leaf { model, .. } => model.spec.n_classes,
            TrainedEnsemble::Committee { members } => members[0].n_classes(),
            TrainedEnsemble::Ecoc(e) => e.code.n_classes(),
            TrainedEnsemble::WeightedCombo { children } => children[0].1.n_classes(),
        }
    }

    /// Networks held, counting shared leaves once.
    pub fn leaf_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        fn walk(e: &TrainedEnsemble, seen: &mut std::collections::HashSet<String>) -> usize {
            match e {
                TrainedEnsemble::Leaf { id: Some(id), .. } => usize::from(seen.insert(id.clone())),
                TrainedEnsemble::Leaf { .. } => 1,
                TrainedEnsemble::Committee { members } => members.iter().map(|m| walk(m, seen)).sum(),
                TrainedEnsemble::Ecoc(e) => e.stage1.len() + e.members.iter().map(Vec::len).sum::<usize>(),
                TrainedEnsemble::WeightedCombo { children } => children.iter().map(|(_, c)| walk(c, seen)).sum(),
            }
        }
        walk(self, &mut seen)
    }

    /// Every trained model, in a fixed traversal order.
    pub fn models(&self) -> Vec<&TrainedModel> {
        let mut out = Vec::new();
        fn walk<'a>(e: &'a TrainedEnsemble, out: &mut Vec<&'a TrainedModel>) {
            match e {
                TrainedEnsemble::Leaf { model, .. } => out.push(model),
                TrainedEnsemble::Committee { members } => members.iter().for_each(|m| walk(m, out)),
                TrainedEnsemble::Ecoc(e) => {
                    out.extend(e.stage1.iter());
                    e.members.iter().for_each(|col| out.extend(col.iter()));
                }
                TrainedEnsemble::WeightedCombo { children } => children.iter().for_each(|(_, c)| walk(c, out)),
            }
        }
        walk(self, &mut out);
        out
    }
}

/// Per-sample vote tallies of the ensemble. Tally sizes equal the tree's
/// nominal size.
pub fn predict_fusion(ensemble: &TrainedEnsemble, images: &[Image]) -> Result<Vec<VoteTally>> {
    let mut cache = HashMap::new();
    predict_node(ensemble, images, &mut cache)
}

fn leaf_classes(model: &TrainedModel, images: &[Image]) -> Result<Vec<usize>> {
    Ok(predict(model, images)?.iter().map(|p| crate::nnet::argmax(p)).collect())
}

fn predict_node(
    e: &TrainedEnsemble,
    images: &[Image],
    cache: &mut HashMap<String, Vec<usize>>,
) -> Result<Vec<VoteTally>> {
    let n_classes = e.n_classes();
    match e {
        TrainedEnsemble::Leaf { id, model } => {
            let classes = match id {
                Some(id) => match cache.get(id) {
                    Some(c) => c.clone(),
                    None => {
                        let c = leaf_classes(model, images)?;
                        cache.insert(id.clone(), c.clone());
                        c
                    }
                },
                None => leaf_classes(model, images)?,
            };
            Ok(classes.into_iter().map(|c| VoteTally::one(n_classes, c)).collect())
        }
        TrainedEnsemble::Committee { members } => {
            let mut out = vec![VoteTally::empty(n_classes); images.len()];
            for m in members {
                for (acc, t) in out.iter_mut().zip(predict_node(m, images, cache)?) {
                    acc.absorb(&t);
                }
            }
            Ok(out)
        }
        TrainedEnsemble::Ecoc(ecoc) => predict_ecoc(ecoc, images),
        TrainedEnsemble::WeightedCombo { children } => {
            let mut out = vec![VoteTally::empty(n_classes); images.len()];
            for (w, child) in children {
                let tallies = predict_node(child, images, cache)?;
                let flatten = matches!(child, TrainedEnsemble::WeightedCombo { .. });
                for (acc, t) in out.iter_mut().zip(tallies) {
                    if flatten {
                        acc.absorb(&t.scaled(*w));
                    } else {
                        let (c, _) = plurality(&t)?;
                        acc.absorb(&VoteTally::weighted(n_classes, c, *w));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Outputs in [-1, 1] of every voter: `[voter][sample][dichotomy]`.
fn ecoc_outputs(ecoc: &TrainedEcoc, images: &[Image]) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_cols = ecoc.code.n_columns();
    let n_members = ecoc.members.first().map_or(0, Vec::len);
    let member_images: Vec<Image>;
    let member_input = match &ecoc.sdae {
        Some(enc) => {
            let codes = enc.encode(images)?;
            let width = codes.ncols();
            member_images =
                codes.rows().into_iter().map(|r| Image::from_clamped(1, width, r.iter().copied())).collect();
            &member_images[..]
        }
        None => images,
    };
    let mut voters = Vec::new();
    let mut per_voter = |models: Vec<&TrainedModel>, input: &[Image]| -> Result<()> {
        let mut out = vec![vec![0.0; n_cols]; images.len()];
        for (j, m) in models.into_iter().enumerate() {
            for (row, p) in out.iter_mut().zip(predict(m, input)?) {
                row[j] = binary_output(&p);
            }
        }
        voters.push(out);
        Ok(())
    };
    for k in 0..n_members {
        per_voter(ecoc.members.iter().map(|col| &col[k]).collect(), member_input)?;
    }
    if ecoc.keep_stage1_voter {
        per_voter(ecoc.stage1.iter().collect(), images)?;
    }
    Ok(voters)
}

fn predict_ecoc(ecoc: &TrainedEcoc, images: &[Image]) -> Result<Vec<VoteTally>> {
    let voters = ecoc_outputs(ecoc, images)?;
    let n_classes = ecoc.code.n_classes();
    let size = voters.len() as u32;
    let n_cols = ecoc.code.n_columns();
    (0..images.len())
        .map(|i| match ecoc.decode_order {
            DecodeOrder::MemberWise => {
                let mut votes = vec![0u32; n_classes];
                for v in &voters {
                    votes[hamming_decode(&ecoc.code, &v[i])?.class] += 1;
                }
                VoteTally::new(votes, size)
            }
            DecodeOrder::DichotomyWise => {
                let signs = |o: f64| if o >= 0.0 { 1i8 } else { -1 };
                let majority: Vec<f64> = (0..n_cols)
                    .map(|j| {
                        let s: i32 = voters.iter().map(|v| i32::from(signs(v[i][j]))).sum();
                        if s >= 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect();
                let class = hamming_decode(&ecoc.code, &majority)?.class;
                // strength: mean number of voters agreeing with the winner's
                // codeword over its active dichotomies
                let row = ecoc.code.row(class);
                let active: Vec<usize> = (0..n_cols).filter(|&j| row[j] != 0).collect();
                let agree: usize =
                    active.iter().map(|&j| voters.iter().filter(|v| signs(v[i][j]) == row[j]).count()).sum();
                let strength = (agree / active.len().max(1)).max(1) as u32;
                let mut votes = vec![0u32; n_classes];
                votes[class] = strength.min(size);
                VoteTally::new(votes, size)
            }
        })
        .collect()
}

/// Fraction of `data` whose plurality class differs from the label.
pub fn error_rate(ensemble: &TrainedEnsemble, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let tallies = predict_fusion(ensemble, data.images())?;
    let mut wrong = 0usize;
    for (t, &l) in tallies.iter().zip(data.labels()) {
        if plurality(t)?.0 != l {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
enum ManifestNode {
    Leaf {
        id: Option<String>,
        file: String,
    },
    Committee {
        members: Vec<ManifestNode>,
    },
    Ecoc {
        code: CodeMatrix,
        stage1: Vec<String>,
        members: Vec<Vec<String>>,
        sdae: Option<String>,
        decode_order: DecodeOrder,
        keep_stage1_voter: bool,
        emphasis_fallback: Vec<bool>,
    },
    WeightedCombo {
        children: Vec<(u32, ManifestNode)>,
    },
}

pub const MANIFEST: &str = "manifest.json";

/// Write `dir/manifest.json` plus one container per model. Shared leaves
/// are written once.
pub fn save_ensemble(ensemble: &TrainedEnsemble, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut counter = 0usize;
    let mut write_model = |m: &TrainedModel, name: Option<&str>| -> Result<String> {
        let file = match name {
            Some(id) => format!("shared-{id}.nnet"),
            None => {
                counter += 1;
                format!("model-{counter:05}.nnet")
            }
        };
        let path = dir.join(&file);
        if !path.exists() || name.is_none() {
            m.save(&path)?;
        }
        Ok(file)
    };
    fn walk(
        e: &TrainedEnsemble,
        dir: &Path,
        write: &mut dyn FnMut(&TrainedModel, Option<&str>) -> Result<String>,
        encoders: &mut usize,
    ) -> Result<ManifestNode> {
        Ok(match e {
            TrainedEnsemble::Leaf { id, model } => {
                ManifestNode::Leaf { id: id.clone(), file: write(model, id.as_deref())? }
            }
            TrainedEnsemble::Committee { members } => ManifestNode::Committee {
                members: members.iter().map(|m| walk(m, dir, write, encoders)).collect::<Result<_>>()?,
            },
            TrainedEnsemble::Ecoc(ecoc) => {
                let sdae = match &ecoc.sdae {
                    Some(enc) => {
                        *encoders += 1;
                        let file = format!("sdae-{encoders:03}.nnet");
                        fs::write(dir.join(&file), enc.to_bytes()?)?;
                        Some(file)
                    }
                    None => None,
                };
                ManifestNode::Ecoc {
                    code: ecoc.code.clone(),
                    stage1: ecoc.stage1.iter().map(|m| write(m, None)).collect::<Result<_>>()?,
                    members: ecoc
                        .members
                        .iter()
                        .map(|col| col.iter().map(|m| write(m, None)).collect::<Result<_>>())
                        .collect::<Result<_>>()?,
                    sdae,
                    decode_order: ecoc.decode_order,
                    keep_stage1_voter: ecoc.keep_stage1_voter,
                    emphasis_fallback: ecoc.emphasis_fallback.clone(),
                }
            }
            TrainedEnsemble::WeightedCombo { children } => ManifestNode::WeightedCombo {
                children: children
                    .iter()
                    .map(|(w, c)| Ok((*w, walk(c, dir, write, encoders)?)))
                    .collect::<Result<_>>()?,
            },
        })
    }
    let manifest = walk(ensemble, dir, &mut write_model, &mut 0)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<TrainedEnsemble> {
    let manifest: ManifestNode = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let mut shared: HashMap<String, Arc<TrainedModel>> = HashMap::new();
    fn walk(n: ManifestNode, dir: &Path, shared: &mut HashMap<String, Arc<TrainedModel>>) -> Result<TrainedEnsemble> {
        let load = |f: &str| TrainedModel::load(&dir.join(f));
        Ok(match n {
            ManifestNode::Leaf { id: Some(id), file } => {
                let model = match shared.get(&id) {
                    Some(m) => m.clone(),
                    None => {
                        let m = Arc::new(load(&file)?);
                        shared.insert(id.clone(), m.clone());
                        m
                    }
                };
                TrainedEnsemble::Leaf { id: Some(id), model }
            }
            ManifestNode::Leaf { id: None, file } => TrainedEnsemble::Leaf { id: None, model: Arc::new(load(&file)?) },
            ManifestNode::Committee { members } => TrainedEnsemble::Committee {
                members: members.into_iter().map(|m| walk(m, dir, shared)).collect::<Result<_>>()?,
            },
            ManifestNode::Ecoc { code, stage1, members, sdae, decode_order, keep_stage1_voter, emphasis_fallback } => {
                TrainedEnsemble::Ecoc(Box::new(TrainedEcoc {
                    code,
                    stage1: stage1.iter().map(|f| load(f)).collect::<Result<_>>()?,
                    members: members
                        .iter()
                        .map(|col| col.iter().map(|f| load(f)).collect::<Result<_>>())
                        .collect::<Result<_>>()?,
                    sdae: sdae.map(|f| SdaeEncoder::from_bytes(&fs::read(dir.join(f))?)).transpose()?,
                    decode_order,
                    keep_stage1_voter,
                    emphasis_fallback,
                }))
            }
            ManifestNode::WeightedCombo { children } => TrainedEnsemble::WeightedCombo {
                children: children.into_iter().map(|(w, c)| Ok((w, walk(c, dir, shared)?))).collect::<Result<_>>()?,
            },
        })
    }
    walk(manifest, dir, &mut shared)
}
