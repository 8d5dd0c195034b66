use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{argmax, fit_forest, Dataset, FeatureKind, Forest};
use crate::backend::fnv1a64;
use crate::error::{Error, Result};
use crate::evalmeta::{confusion_with_labels, report, ClassificationReport};

fn check_oob(forest: &Forest, data: &Dataset) -> Result<()> {
    forest.check_compatible(data)?;
    if forest.in_bag.is_empty() || forest.n_train != data.n_rows() {
        return Err(Error::invalid("out-of-bag evaluation needs the forest's own training rows"));
    }
    Ok(())
}

/// Per row, the mean leaf proportions over trees that did not draw it;
/// `None` for rows drawn by every tree.
pub fn oob_probabilities(forest: &Forest, data: &Dataset) -> Result<Vec<Option<Vec<f64>>>> {
    check_oob(forest, data)?;
    let n = data.n_rows();
    let in_bag: Vec<Vec<bool>> = forest
        .in_bag
        .iter()
        .map(|draw| {
            let mut m = vec![false; n];
            for &r in draw {
                m[r as usize] = true;
            }
            m
        })
        .collect();
    Ok((0..n)
        .into_par_iter()
        .map(|i| forest.proba_with(data.row(i), (0..forest.trees.len()).filter(|&t| !in_bag[t][i])))
        .collect())
}

fn oob_predicted(forest: &Forest, data: &Dataset) -> Result<Vec<Option<usize>>> {
    let probs = oob_probabilities(forest, data)?;
    let pred: Vec<Option<usize>> = probs.iter().map(|p| p.as_deref().map(argmax)).collect();
    if pred.iter().all(Option::is_none) {
        return Err(Error::NoOobCoverage);
    }
    Ok(pred)
}

/// Share of covered rows whose out-of-bag prediction is correct.
pub fn oob_accuracy(forest: &Forest, data: &Dataset) -> Result<f64> {
    let pred = oob_predicted(forest, data)?;
    let (mut hit, mut seen) = (0usize, 0usize);
    for (p, &y) in pred.iter().zip(&data.labels) {
        if let Some(p) = p {
            seen += 1;
            hit += usize::from(*p == y);
        }
    }
    Ok(hit as f64 / seen as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OobReport {
    pub report: ClassificationReport,
    /// Rows with at least one out-of-bag tree.
    pub covered: usize,
    /// Rows drawn by every tree, left out of the report.
    pub excluded: usize,
}

pub fn oob_report(forest: &Forest, data: &Dataset) -> Result<OobReport> {
    let pred = oob_predicted(forest, data)?;
    let mut gold = Vec::new();
    let mut guess = Vec::new();
    for (p, &y) in pred.iter().zip(&data.labels) {
        if let Some(p) = p {
            gold.push(data.classes[y].as_str());
            guess.push(data.classes[*p].as_str());
        }
    }
    let excluded = data.n_rows() - gold.len();
    if excluded > 0 {
        log::warn!("{excluded} row(s) are in-bag for every tree; left out of the OOB report");
    }
    let all: Vec<&str> = data.classes.iter().map(String::as_str).collect();
    Ok(OobReport {
        report: report(&confusion_with_labels(&guess, &gold, &all)?)?,
        covered: gold.len(),
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// Re-score the fitted forest on the shuffled data.
    #[default]
    ShuffleOnly,
    /// Fit a new forest on the shuffled data and use its OOB accuracy.
    ShuffleAndRefit,
}

fn permutation_seed(seed: u64, feature: &str, repeat: usize) -> u64 {
    fnv1a64(format!("{seed}\x1fpermute\x1f{feature}\x1f{repeat}").as_bytes())
}

/// OOB accuracy decrease for each of `repeats` seeded shuffles of one
/// feature column.
pub fn permutation_importance(
    forest: &Forest,
    data: &Dataset,
    feature: &str,
    repeats: usize,
    mode: ImportanceMode,
) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let j = data.feature_index(feature)?;
    let baseline = oob_accuracy(forest, data)?;
    (0..repeats)
        .map(|r| {
            let mut col = data.column(j).to_vec();
            col.shuffle(&mut ChaCha8Rng::seed_from_u64(permutation_seed(forest.config.seed, feature, r)));
            let shuffled = data.with_column(j, col);
            let acc = match mode {
                ImportanceMode::ShuffleOnly => oob_accuracy(forest, &shuffled)?,
                ImportanceMode::ShuffleAndRefit => oob_accuracy(&fit_forest(&shuffled, &forest.config)?, &shuffled)?,
            };
            Ok(baseline - acc)
        })
        .collect()
}

/// Quantiles at 0.05, 0.15, …, 0.95 (linear interpolation): one point in
/// the middle of each decile band.
pub fn decile_grid(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return Vec::new();
    }
    let last = (v.len() - 1) as f64;
    (0..10)
        .map(|k| {
            let pos = (k as f64 + 0.5) / 10.0 * last;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        })
        .collect()
}

/// Mean with one correction pass, so equal inputs average to themselves.
fn refined_mean(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    m + v.iter().map(|x| x - m).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialDependence {
    pub features: Vec<String>,
    /// Grid values per feature (level codes for categorical features).
    pub grids: Vec<Vec<f64>>,
    /// Printable grid values (level names for categorical features).
    pub grid_labels: Vec<Vec<String>>,
    /// Row-major over the grids: for two features, index `a * len(b) + b`.
    pub values: Vec<f64>,
    pub target_class: String,
}

impl PartialDependence {
    /// Value at grid indices `(a, b)`; `b` is ignored for one feature.
    pub fn at(&self, a: usize, b: usize) -> f64 {
        match self.grids.len() {
            1 => self.values[a],
            _ => self.values[a * self.grids[1].len() + b],
        }
    }

    /// Columns: one per feature, then `probability`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.features.clone();
        header.push(format!("probability_{}", self.target_class));
        w.write_record(&header)?;
        let mut k = 0;
        for a in &self.grid_labels[0] {
            match self.grid_labels.get(1) {
                None => {
                    w.write_record([a.clone(), self.values[k].to_string()])?;
                    k += 1;
                }
                Some(bs) => {
                    for b in bs {
                        w.write_record([a.clone(), b.clone(), self.values[k].to_string()])?;
                        k += 1;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Average predicted probability of `target_class` (default: the last
/// class) with the chosen feature(s) set to each grid value for all rows.
/// Missing grids default to [`decile_grid`] for continuous features and
/// all levels for categorical ones.
pub fn partial_dependence(
    forest: &Forest,
    data: &Dataset,
    features: &[&str],
    grids: Option<Vec<Vec<f64>>>,
    target_class: Option<&str>,
) -> Result<PartialDependence> {
    if features.is_empty() || features.len() > 2 {
        return Err(Error::Unsupported(format!(
            "partial dependence over {} features (1 or 2 supported)",
            features.len()
        )));
    }
    forest.check_compatible(data)?;
    let idx: Vec<usize> = features.iter().map(|f| data.feature_index(f)).collect::<Result<_>>()?;
    let target = match target_class {
        Some(c) => forest
            .classes
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| Error::invalid(format!("unknown class `{c}`")))?,
        None => forest.classes.len() - 1,
    };
    let grids = match grids {
        Some(g) if g.len() == idx.len() => g,
        Some(_) => return Err(Error::invalid("one grid per feature is required")),
        None => idx
            .iter()
            .map(|&j| match &data.kinds[j] {
                FeatureKind::Continuous => decile_grid(data.column(j)),
                FeatureKind::Categorical { levels } => (0..levels.len()).map(|l| l as f64).collect(),
            })
            .collect(),
    };
    let mut grid_labels = Vec::new();
    for (&j, g) in idx.iter().zip(&grids) {
        match &data.kinds[j] {
            FeatureKind::Continuous => {
                let col = data.column(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if g.iter().any(|v| *v < lo || *v > hi) {
                    log::warn!("grid for `{}` leaves the observed range [{lo}, {hi}]", data.names[j]);
                }
                grid_labels.push(g.iter().map(|v| v.to_string()).collect());
            }
            FeatureKind::Categorical { levels } => {
                let labels = g
                    .iter()
                    .map(|v| {
                        levels
                            .get(*v as usize)
                            .filter(|_| v.fract() == 0.0 && *v >= 0.0)
                            .cloned()
                            .ok_or_else(|| Error::invalid(format!("{v} is not a level code of `{}`", data.names[j])))
                    })
                    .collect::<Result<_>>()?;
                grid_labels.push(labels);
            }
        }
    }
    let points: Vec<Vec<f64>> = match grids.as_slice() {
        [a] => a.iter().map(|x| vec![*x]).collect(),
        [a, b] => a.iter().flat_map(|x| b.iter().map(move |y| vec![*x, *y])).collect(),
        _ => unreachable!("one or two features"),
    };
    let values = points
        .par_iter()
        .map(|pt| {
            let probs: Vec<f64> = (0..data.n_rows())
                .map(|i| {
                    let value = |j: usize| match idx.iter().position(|&k| k == j) {
                        Some(s) => pt[s],
                        None => data.columns[j][i],
                    };
                    forest.proba_with(value, 0..forest.trees.len()).expect("forest has trees")[target]
                })
                .collect();
            refined_mean(&probs)
        })
        .collect();
    Ok(PartialDependence {
        features: features.iter().map(|f| f.to_string()).collect(),
        grids,
        grid_labels,
        values,
        target_class: forest.classes[target].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{fit_forest, RFConfig, Tree};
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<&str> = (0..n).map(|i| if cols[0][i] + cols[1][i] > 0.0 { "1" } else { "0" }).collect();
        Dataset::new(
            (0..4).map(|j| format!("x{j}")).collect(),
            vec![FeatureKind::Continuous; 4],
            cols,
            &labels,
        )
        .unwrap()
    }

    #[test]
    fn single_tree_oob_is_out_of_bootstrap() {
        let d = separable(100, 2);
        let f = fit_forest(&d, &RFConfig { n_trees: 1, ..RFConfig::default() }).unwrap();
        let probs = oob_probabilities(&f, &d).unwrap();
        for (i, p) in probs.iter().enumerate() {
            assert_eq!(p.is_some(), !f.in_bag()[0].contains(&(i as u32)));
        }
    }

    #[test]
    fn identical_stumps_match_manual_accuracy() {
        let d = separable(200, 5);
        let cfg = RFConfig {
            n_trees: 15,
            max_depth: 1,
            features_per_split: Some(4),
            ..RFConfig::default()
        };
        let f = fit_forest(&d, &cfg).unwrap();
        // replace every tree with one fixed stump, keeping the bootstrap record
        let stump = Tree::stump(0, 0.0, vec![0.8, 0.2], vec![0.2, 0.8]);
        let mut g = f.clone();
        g.trees = vec![stump.clone(); 15];
        let acc = oob_accuracy(&g, &d).unwrap();
        let probs = oob_probabilities(&g, &d).unwrap();
        let (mut hit, mut seen) = (0, 0);
        for i in 0..d.n_rows() {
            if probs[i].is_some() {
                seen += 1;
                let pred = usize::from(d.column(0)[i] > 0.0);
                hit += usize::from(pred == d.labels()[i]);
            }
        }
        assert_eq!(acc, hit as f64 / seen as f64);
    }

    #[test]
    fn oob_needs_bootstrap_record() {
        let d = separable(30, 1);
        let f = Forest::from_trees(&d, vec![Tree::leaf(vec![0.5, 0.5])]).unwrap();
        assert!(oob_accuracy(&f, &d).is_err());
    }

    #[test]
    fn oob_report_shape_and_coverage() {
        let d = separable(150, 8);
        let f = fit_forest(&d, &RFConfig::default().with_seed(3)).unwrap();
        let r = oob_report(&f, &d).unwrap();
        assert_eq!(r.excluded, 0);
        assert_eq!(r.covered, 150);
        assert_eq!(r.report.classes.len(), 2);
        assert_eq!(r.report.total_support, 150);
    }

    #[test]
    fn importance_modes() {
        let d = separable(200, 6);
        let cfg = RFConfig { n_trees: 20, ..RFConfig::default().with_seed(4) };
        let f = fit_forest(&d, &cfg).unwrap();
        let a = permutation_importance(&f, &d, "x0", 3, ImportanceMode::ShuffleOnly).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, permutation_importance(&f, &d, "x0", 3, ImportanceMode::ShuffleOnly).unwrap());
        let refit = permutation_importance(&f, &d, "x0", 2, ImportanceMode::ShuffleAndRefit).unwrap();
        assert_eq!(refit.len(), 2);
        assert!(matches!(
            permutation_importance(&f, &d, "nope", 1, ImportanceMode::ShuffleOnly),
            Err(Error::UnknownFeature(_))
        ));
        assert!(permutation_importance(&f, &d, "x0", 0, ImportanceMode::ShuffleOnly).is_err());
    }

    #[test]
    fn decile_grid_points() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let g = decile_grid(&v);
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 5.0);
        assert_eq!(g[9], 95.0);
    }

    #[test]
    fn stump_oracle_and_constant_forest() {
        let d = separable(50, 7);
        let f = Forest::from_trees(&d, vec![Tree::stump(0, 0.0, vec![0.9, 0.1], vec![0.1, 0.9])]).unwrap();
        let pd = partial_dependence(&f, &d, &["x0"], Some(vec![vec![-1.0, 1.0]]), None).unwrap();
        assert_eq!(pd.values, vec![0.1, 0.9]);
        assert_eq!(pd.target_class, "1");

        // never splits on x1: flat, equal to the mean prediction
        let pd = partial_dependence(&f, &d, &["x1"], None, None).unwrap();
        let mean = f.predict_dataset(&d).unwrap().iter().map(|p| p[1]).sum::<f64>() / 50.0;
        assert_eq!(pd.values.len(), 10);
        for v in &pd.values {
            assert!((v - mean).abs() < 1e-12);
        }

        let pd2 = partial_dependence(&f, &d, &["x0", "x1"], Some(vec![vec![-1.0, 1.0], vec![0.0, 0.5, 0.7]]), None).unwrap();
        assert_eq!(pd2.values.len(), 6);
        assert_eq!(pd2.at(1, 2), 0.9);
        let mut buf = Vec::new();
        pd2.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);

        assert!(matches!(
            partial_dependence(&f, &d, &["x0", "x1", "x2"], None, None),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn categorical_grid_uses_levels() {
        let n = 40;
        let g: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let labels: Vec<&str> = (0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let d = Dataset::new(
            vec!["x".into(), "g".into()],
            vec![
                FeatureKind::Continuous,
                FeatureKind::Categorical {
                    levels: vec!["p".into(), "q".into(), "r".into()],
                },
            ],
            vec![x, g],
            &labels,
        )
        .unwrap();
        let f = fit_forest(&d, &RFConfig { n_trees: 5, ..RFConfig::default() }).unwrap();
        let pd = partial_dependence(&f, &d, &["x", "g"], None, Some("a")).unwrap();
        assert_eq!(pd.grid_labels[1], vec!["p", "q", "r"]);
        assert_eq!(pd.values.len(), 30);
        assert!(pd.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
