use std::collections::BTreeMap;
use std::fs;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_datasets, load_development, write_atomic, ExperimentConfig};
use crate::dataset::Dataset;
use crate::ensemble::{error_rate, train_fusion, FusionNode, SecondLevel};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_SATURATION_EPS: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridParam {
    Alpha,
    Beta,
    SwitchRate,
    Members,
    Fraction,
}

impl GridParam {
    pub fn name(self) -> &'static str {
        match self {
            GridParam::Alpha => "alpha",
            GridParam::Beta => "beta",
            GridParam::SwitchRate => "switch_rate",
            GridParam::Members => "members",
            GridParam::Fraction => "fraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub param: GridParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_eps() -> f64 {
    DEFAULT_SATURATION_EPS
}

fn default_folds() -> usize {
    5
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.axes.is_empty() {
            return bad("a grid needs at least one axis".into());
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.values.is_empty() {
                return bad(format!("grid axis '{}' is empty", a.param.name()));
            }
            if self.axes[..i].iter().any(|b| b.param == a.param) {
                return bad(format!("grid axis '{}' appears twice", a.param.name()));
            }
            if a.param == GridParam::Members && a.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
                return bad("member counts must be positive integers".into());
            }
        }
        if self.folds < 2 {
            return bad("cross-validation needs at least two folds".into());
        }
        Ok(())
    }

    /// Cartesian product, first axis varying slowest.
    pub fn lattice(&self) -> Vec<Vec<(GridParam, f64)>> {
        let mut out = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((axis.param, v));
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn cross_validated(&self) -> bool {
        self.axes.iter().any(|a| matches!(a.param, GridParam::Alpha | GridParam::Beta))
    }
}

/// Copy of `tree` with the grid point's values set on every node that has
/// the parameter. A parameter no node accepts is a config error.
pub fn apply_point(tree: &FusionNode, point: &[(GridParam, f64)]) -> Result<FusionNode> {
    let mut out = tree.clone();
    for &(param, value) in point {
        if set_param(&mut out, param, value) == 0 {
            return Err(Error::ConfigInvalid(format!("no node of the tree takes '{}'", param.name())));
        }
    }
    Ok(out)
}

fn set_param(node: &mut FusionNode, param: GridParam, v: f64) -> usize {
    match node {
        FusionNode::Leaf { .. } => 0,
        FusionNode::Bagged { params, child } => {
            let here = match param {
                GridParam::Members => {
                    params.members = v as usize;
                    1
                }
                GridParam::Fraction => {
                    params.fraction = v;
                    1
                }
                _ => 0,
            };
            here + set_param(child, param, v)
        }
        FusionNode::Switched { params, child } => {
            let here = match param {
                GridParam::Members => {
                    params.members = v as usize;
                    1
                }
                GridParam::SwitchRate => {
                    params.rate = v;
                    1
                }
                _ => 0,
            };
            here + set_param(child, param, v)
        }
        FusionNode::EcocStage(s) => match (param, &mut s.second_level) {
            (GridParam::Alpha, _) => {
                s.pre_emphasis.alpha = v;
                1
            }
            (GridParam::Beta, _) => {
                s.pre_emphasis.beta = v;
                1
            }
            (GridParam::Members, SecondLevel::Switched(p)) => {
                p.members = v as usize;
                1
            }
            (GridParam::Members, SecondLevel::Bagged(p)) => {
                p.members = v as usize;
                1
            }
            (GridParam::SwitchRate, SecondLevel::Switched(p)) => {
                p.rate = v;
                1
            }
            (GridParam::Fraction, SecondLevel::Bagged(p)) => {
                p.fraction = v;
                1
            }
            _ => 0,
        },
        FusionNode::WeightedCombo { children } => children.iter_mut().map(|c| set_param(&mut c.node, param, v)).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: BTreeMap<String, f64>,
    /// Validation accuracy; the mean over folds when cross-validated.
    pub accuracy: f64,
    #[serde(default)]
    pub fold_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub tree: String,
    pub rows: Vec<GridRow>,
    pub best: usize,
    /// Another lattice point matched the best accuracy.
    pub tie: bool,
    pub cross_validated: bool,
    /// Per axis: saturated at its last step (with the other axes at their
    /// best values), or `None` for single-point axes.
    pub saturation: BTreeMap<String, Option<bool>>,
}

impl GridResult {
    pub fn best_point(&self) -> &BTreeMap<String, f64> {
        &self.rows[self.best].point
    }
}

/// `true` when the last two accuracies along an axis differ by less than
/// `epsilon`.
pub fn saturation_check(axis: &str, accuracies: &[f64], epsilon: f64) -> Result<bool> {
    match accuracies {
        [.., a, b] => Ok((b - a).abs() < epsilon),
        _ => Err(Error::AxisTooShort(axis.into())),
    }
}

/// Contiguous folds over a seeded shuffle of `0..n`.
pub fn folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    (0..k).map(|f| order[f * n / k..(f + 1) * n / k].to_vec()).collect()
}

fn accuracy_of(
    tree: &FusionNode,
    datasets: &BTreeMap<String, Dataset>,
    validation: &Dataset,
    seed: u64,
) -> Result<f64> {
    let ens = train_fusion(tree, datasets, validation, seed)?;
    Ok(1.0 - error_rate(&ens, validation)?)
}

/// Train one candidate per lattice point and keep the most accurate (first
/// in lattice order on ties). Grids over `alpha` or `beta` are scored by
/// k-fold cross-validation on the train split; the others by the
/// validation split. The result is also written to
/// `<output_dir>/grid-<tree>.json`.
pub fn grid_search(cfg: &ExperimentConfig, tree_name: &str) -> Result<GridResult> {
    cfg.validate()?;
    let tree = cfg.trees.get(tree_name).ok_or_else(|| Error::ConfigInvalid(format!("unknown tree '{tree_name}'")))?;
    let grid = cfg
        .grids
        .get(tree_name)
        .ok_or_else(|| Error::ConfigInvalid(format!("no grid configured for '{tree_name}'")))?;
    let (train, validation) = load_development(cfg)?;
    let train_seed = seed::derive_str(cfg.seed, &format!("grid:{tree_name}"));
    let cv = grid.cross_validated();

    let fold_sets = if cv {
        let parts = folds(train.len(), grid.folds, seed::derive_str(cfg.seed, "folds"));
        parts
            .iter()
            .enumerate()
            .map(|(f, held)| {
                let rest: Vec<usize> =
                    parts.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, p)| p.iter().copied()).collect();
                let fold_train = train.subset(&rest, "train")?;
                Ok((build_datasets(cfg, &fold_train)?, train.subset(held, "fold")?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![(build_datasets(cfg, &train)?, validation)]
    };

    let mut rows = Vec::new();
    for point in grid.lattice() {
        let candidate = apply_point(tree, &point)?;
        let fold_accuracies =
            fold_sets.iter().map(|(d, v)| accuracy_of(&candidate, d, v, train_seed)).collect::<Result<Vec<_>>>()?;
        let accuracy = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64;
        rows.push(GridRow {
            point: point.iter().map(|(p, v)| (p.name().to_string(), *v)).collect(),
            accuracy,
            fold_accuracies: if cv { fold_accuracies } else { Vec::new() },
        });
    }
    let (best, tie) = select_best(&rows);

    let mut saturation = BTreeMap::new();
    for axis in &grid.axes {
        let name = axis.param.name();
        let along: Vec<f64> = rows
            .iter()
            .filter(|r| r.point.iter().all(|(k, v)| k == name || rows[best].point[k] == *v))
            .map(|r| r.accuracy)
            .collect();
        saturation.insert(name.to_string(), saturation_check(name, &along, grid.epsilon).ok());
    }
    let result = GridResult { tree: tree_name.into(), rows, best, tie, cross_validated: cv, saturation };
    fs::create_dir_all(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join(format!("grid-{tree_name}.json")), &serde_json::to_vec_pretty(&result)?)?;
    Ok(result)
}

fn select_best(rows: &[GridRow]) -> (usize, bool) {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.accuracy > rows[best].accuracy {
            best = i;
        }
    }
    let tie = rows.iter().filter(|r| r.accuracy == rows[best].accuracy).count() > 1;
    (best, tie)
}
