//! Random-forest classifier: bootstrapped CART trees with feature
//! subsampling and inverse-probability class weights, plus out-of-bag
//! evaluation, permutation importance and partial dependence.
//!
//! Tree `t` draws from a ChaCha8 stream seeded with
//! `fnv1a64("{seed}\x1f{t}")`, so a forest does not depend on how trees
//! are scheduled across threads.

mod inspect;
mod tree;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use inspect::{
    decile_grid, oob_accuracy, oob_probabilities, oob_report, partial_dependence, permutation_importance,
    ImportanceMode, OobReport, PartialDependence,
};
pub use tree::{Node, SplitRule, Tree, ONE_VS_REST_MAX_LEVELS};

use crate::backend::fnv1a64;
use crate::error::{Error, Result};
use crate::table::Table;
use tree::{Grower, Item};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    /// `n / (n_classes · count(c))`.
    #[default]
    InverseProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RFConfig {
    pub max_depth: usize,
    pub min_split: usize,
    pub min_leaf: usize,
    pub n_trees: usize,
    /// `round(√p)` when unset.
    pub features_per_split: Option<usize>,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
}

impl Default for RFConfig {
    fn default() -> Self {
        RFConfig {
            max_depth: 6,
            min_split: 21,
            min_leaf: 8,
            n_trees: 120,
            features_per_split: None,
            seed: 0,
            class_weighting: ClassWeighting::InverseProbability,
        }
    }
}

impl RFConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Features drawn at each split for `p` candidates.
    pub fn mtry(&self, p: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (p as f64).sqrt().round() as usize)
            .clamp(1, p.max(1))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.min_leaf < 1 {
            return Err(Error::invalid("min_leaf must be at least 1"));
        }
        if self.min_split < 2 {
            return Err(Error::invalid("min_split must be at least 2"));
        }
        if self.n_trees < 1 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        if let Some(m) = self.features_per_split {
            if m == 0 || m > p {
                return Err(Error::invalid(format!("features_per_split must be in 1..={p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    /// Values are stored as indices into `levels` (sorted).
    Categorical { levels: Vec<String> },
}

/// Declares one predictor when building a [`Dataset`] from a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(default)]
    pub categorical: bool,
}

impl FeatureSpec {
    pub fn continuous(name: &str) -> Self {
        FeatureSpec {
            name: name.into(),
            categorical: false,
        }
    }

    pub fn categorical(name: &str) -> Self {
        FeatureSpec {
            name: name.into(),
            categorical: true,
        }
    }
}

/// Column-major training data with class labels as indices into the
/// sorted class names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    kinds: Vec<FeatureKind>,
    columns: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: Vec<String>,
    dropped: usize,
}

impl Dataset {
    /// Categorical columns must hold valid level codes.
    pub fn new<S: AsRef<str>>(
        names: Vec<String>,
        kinds: Vec<FeatureKind>,
        columns: Vec<Vec<f64>>,
        labels: &[S],
    ) -> Result<Self> {
        if names.len() != kinds.len() || names.len() != columns.len() {
            return Err(Error::invalid("feature names, kinds and columns differ in number"));
        }
        if names.is_empty() {
            return Err(Error::invalid("no features"));
        }
        if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
            return Err(Error::invalid("duplicate feature name"));
        }
        let n = labels.len();
        for (j, c) in columns.iter().enumerate() {
            if c.len() != n {
                return Err(Error::invalid(format!("feature `{}` has {} values for {n} labels", names[j], c.len())));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("feature `{}` has a non-finite value", names[j])));
            }
            if let FeatureKind::Categorical { levels } = &kinds[j] {
                if c.iter().any(|v| v.fract() != 0.0 || *v < 0.0 || *v as usize >= levels.len()) {
                    return Err(Error::invalid(format!("feature `{}` has an invalid level code", names[j])));
                }
            }
        }
        let classes: Vec<String> = labels
            .iter()
            .map(|l| l.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let labels = labels
            .iter()
            .map(|l| classes.binary_search_by(|c| c.as_str().cmp(l.as_ref())).expect("collected"))
            .collect();
        Ok(Dataset {
            names,
            kinds,
            columns,
            labels,
            classes,
            dropped: 0,
        })
    }

    /// Rows with a missing feature or outcome are dropped and counted.
    pub fn from_table(table: &Table, features: &[FeatureSpec], outcome: &str) -> Result<Self> {
        let y = table.text(outcome)?;
        let raw: Vec<Vec<Option<&str>>> = features.iter().map(|f| table.text(&f.name)).collect::<Result<_>>()?;
        let keep: Vec<usize> = (0..table.n_rows())
            .filter(|&i| y[i].is_some() && raw.iter().all(|c| c[i].is_some()))
            .collect();
        let mut kinds = Vec::new();
        let mut columns = Vec::new();
        for (f, col) in features.iter().zip(&raw) {
            let vals: Vec<&str> = keep.iter().map(|&i| col[i].expect("kept")).collect();
            if f.categorical {
                let levels: Vec<String> = vals.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
                let code = |s: &str| levels.binary_search_by(|l| l.as_str().cmp(s)).expect("collected") as f64;
                columns.push(vals.iter().map(|s| code(s)).collect());
                kinds.push(FeatureKind::Categorical { levels });
            } else {
                let parsed: Vec<f64> = vals
                    .iter()
                    .map(|s| {
                        crate::table::parse_number(s)
                            .ok_or_else(|| Error::invalid(format!("feature `{}`: `{s}` is not a number", f.name)))
                    })
                    .collect::<Result<_>>()?;
                columns.push(parsed);
                kinds.push(FeatureKind::Continuous);
            }
        }
        let labels: Vec<&str> = keep.iter().map(|&i| y[i].expect("kept")).collect();
        let mut d = Self::new(features.iter().map(|f| f.name.clone()).collect(), kinds, columns, &labels)?;
        d.dropped = table.n_rows() - keep.len();
        if d.dropped > 0 {
            log::warn!("forest data: dropped {} row(s) with missing values", d.dropped);
        }
        Ok(d)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    /// Code of a categorical level.
    pub fn level_code(&self, j: usize, level: &str) -> Result<f64> {
        match &self.kinds[j] {
            FeatureKind::Categorical { levels } => levels
                .iter()
                .position(|l| l == level)
                .map(|i| i as f64)
                .ok_or_else(|| Error::invalid(format!("`{level}` is not a level of `{}`", self.names[j]))),
            FeatureKind::Continuous => Err(Error::invalid(format!("`{}` is continuous", self.names[j]))),
        }
    }

    /// Copy with feature `j` replaced.
    pub fn with_column(&self, j: usize, values: Vec<f64>) -> Dataset {
        let mut d = self.clone();
        d.columns[j] = values;
        d
    }

    fn row(&self, i: usize) -> impl Fn(usize) -> f64 + '_ {
        move |j| self.columns[j][i]
    }
}

/// Per-class weight `n / (n_classes · count(c))` for each element.
pub fn inverse_probability_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let per_class = class_weights(labels, n_classes)?;
    Ok(labels.iter().map(|&l| per_class[l]).collect())
}

/// Weight of each class under inverse-probability weighting.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label index {l} out of range")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {c} has no elements")));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (n_classes as f64 * c as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub class: String,
    /// Mean leaf proportion of `class`.
    pub probability: f64,
    pub probabilities: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    format_version: u32,
    config: RFConfig,
    feature_names: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
    classes: Vec<String>,
    trees: Vec<Tree>,
    /// Per tree, the sorted bootstrap draw (row indices, with repeats).
    in_bag: Vec<Vec<u32>>,
    n_train: usize,
}

pub fn tree_seed(seed: u64, tree: usize) -> u64 {
    fnv1a64(format!("{seed}\x1f{tree}").as_bytes())
}

fn grow(data: &Dataset, config: &RFConfig, class_w: &[f64], items: Vec<Item>, rng: &mut ChaCha8Rng) -> Tree {
    let mut g = Grower {
        data,
        config,
        class_weights: class_w,
        mtry: config.mtry(data.n_features()),
        nodes: Vec::new(),
    };
    g.grow(items, 0, rng);
    Tree::from_nodes(g.nodes)
}

fn class_weights_for(data: &Dataset, config: &RFConfig) -> Result<Vec<f64>> {
    match config.class_weighting {
        ClassWeighting::None => Ok(vec![1.0; data.classes.len()]),
        ClassWeighting::InverseProbability => class_weights(&data.labels, data.classes.len()),
    }
}

/// A single tree on all rows (no bootstrap). Pure data gives one leaf.
pub fn fit_tree(data: &Dataset, config: &RFConfig, seed: u64) -> Result<Tree> {
    config.validate(data.n_features())?;
    let w = class_weights_for(data, config)?;
    let items = (0..data.n_rows()).map(|row| Item { row, mult: 1 }).collect();
    Ok(grow(data, config, &w, items, &mut ChaCha8Rng::seed_from_u64(seed)))
}

pub fn fit_forest(data: &Dataset, config: &RFConfig) -> Result<Forest> {
    config.validate(data.n_features())?;
    if data.classes.len() < 2 {
        return Err(Error::ConstantOutcome);
    }
    let n = data.n_rows();
    if n < config.min_split {
        return Err(Error::invalid(format!("{n} rows is below min_split = {}", config.min_split)));
    }
    let w = class_weights_for(data, config)?;
    let grown: Vec<(Tree, Vec<u32>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(config.seed, t));
            let mut draw: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
            draw.sort_unstable();
            let mut items: Vec<Item> = Vec::new();
            for &r in &draw {
                match items.last_mut() {
                    Some(it) if it.row == r as usize => it.mult += 1,
                    _ => items.push(Item { row: r as usize, mult: 1 }),
                }
            }
            (grow(data, config, &w, items, &mut rng), draw)
        })
        .collect();
    let (trees, in_bag) = grown.into_iter().unzip();
    Ok(Forest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        feature_names: data.names.clone(),
        feature_kinds: data.kinds.clone(),
        classes: data.classes.clone(),
        trees,
        in_bag,
        n_train: n,
    })
}

impl Forest {
    /// Assembles a forest from hand-built trees; it has no in-bag record,
    /// so out-of-bag methods fail on it.
    pub fn from_trees(data_like: &Dataset, trees: Vec<Tree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::invalid("a forest needs at least one tree"));
        }
        Ok(Forest {
            format_version: FORMAT_VERSION,
            config: RFConfig {
                n_trees: trees.len(),
                ..RFConfig::default()
            },
            feature_names: data_like.names.clone(),
            feature_kinds: data_like.kinds.clone(),
            classes: data_like.classes.clone(),
            trees,
            in_bag: Vec::new(),
            n_train: 0,
        })
    }

    pub fn config(&self) -> &RFConfig {
        &self.config
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_kinds(&self) -> &[FeatureKind] {
        &self.feature_kinds
    }

    /// Feature declarations that rebuild a compatible [`Dataset`].
    pub fn feature_specs(&self) -> Vec<FeatureSpec> {
        self.feature_names
            .iter()
            .zip(&self.feature_kinds)
            .map(|(n, k)| match k {
                FeatureKind::Continuous => FeatureSpec::continuous(n),
                FeatureKind::Categorical { .. } => FeatureSpec::categorical(n),
            })
            .collect()
    }

    pub fn in_bag(&self) -> &[Vec<u32>] {
        &self.in_bag
    }

    pub fn uses_feature(&self, j: usize) -> bool {
        self.trees.iter().any(|t| t.uses_feature(j))
    }

    fn proba_with(&self, value: impl Fn(usize) -> f64, trees: impl Iterator<Item = usize>) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.classes.len()];
        let mut m = 0usize;
        for t in trees {
            for (a, p) in acc.iter_mut().zip(self.trees[t].proportions(&value)) {
                *a += p;
            }
            m += 1;
        }
        (m > 0).then(|| acc.into_iter().map(|a| a / m as f64).collect())
    }

    /// Mean leaf proportions over all trees for an encoded row.
    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.feature_names.len() {
            return Err(Error::invalid(format!(
                "row has {} values, forest expects {}",
                row.len(),
                self.feature_names.len()
            )));
        }
        Ok(self.proba_with(|j| row[j], 0..self.trees.len()).expect("forest has trees"))
    }

    pub fn predict(&self, row: &[f64]) -> Result<Prediction> {
        let p = self.predict_proba(row)?;
        let best = argmax(&p);
        Ok(Prediction {
            class: self.classes[best].clone(),
            probability: p[best],
            probabilities: self.classes.iter().cloned().zip(p.iter().copied()).collect(),
        })
    }

    /// Encodes named values; a missing feature or unknown level is an error.
    pub fn encode(&self, values: &BTreeMap<String, String>) -> Result<Vec<f64>> {
        self.feature_names
            .iter()
            .zip(&self.feature_kinds)
            .map(|(name, kind)| {
                let v = values
                    .get(name)
                    .ok_or_else(|| Error::invalid(format!("row is missing feature `{name}`")))?;
                match kind {
                    FeatureKind::Continuous => crate::table::parse_number(v)
                        .ok_or_else(|| Error::invalid(format!("feature `{name}`: `{v}` is not a number"))),
                    FeatureKind::Categorical { levels } => levels
                        .iter()
                        .position(|l| l == v)
                        .map(|i| i as f64)
                        .ok_or_else(|| Error::invalid(format!("`{v}` is not a level of `{name}`"))),
                }
            })
            .collect()
    }

    /// Probabilities for every row of `data`.
    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.check_compatible(data)?;
        Ok((0..data.n_rows())
            .into_par_iter()
            .map(|i| self.proba_with(data.row(i), 0..self.trees.len()).expect("forest has trees"))
            .collect())
    }

    fn check_compatible(&self, data: &Dataset) -> Result<()> {
        if data.names != self.feature_names || data.kinds != self.feature_kinds {
            return Err(Error::invalid("dataset features do not match the forest"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Forest = serde_json::from_str(s)?;
        if f.format_version != FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "forest format version {} is not supported (expected {FORMAT_VERSION})",
                f.format_version
            )));
        }
        Ok(f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// First index of the maximum, so ties go to the smaller class name.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}
