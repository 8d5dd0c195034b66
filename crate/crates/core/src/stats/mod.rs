//! Linear-probability regressions of candidate outcomes on letter
//! aggregates, with HC0 and one-way clustered standard errors.

mod ols;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use ols::{cluster_se, hc0_se, normal_p_value, ols_fit, OlsFit};

use crate::error::{Error, Result};
use crate::table::Table;

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTerm {
    pub column: String,
    /// Omitted level; the smallest level when not given.
    #[serde(default)]
    pub reference: Option<String>,
}

impl CategoricalTerm {
    pub fn new(column: impl Into<String>, reference: Option<&str>) -> Self {
        CategoricalTerm {
            column: column.into(),
            reference: reference.map(String::from),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: String,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<CategoricalTerm>,
    /// At most two; each gives one clustered-SE regime.
    #[serde(default)]
    pub cluster_columns: Vec<String>,
    #[serde(default = "yes")]
    pub include_intercept: bool,
}

impl ModelSpec {
    pub fn new(outcome: impl Into<String>) -> Self {
        ModelSpec {
            outcome: outcome.into(),
            continuous: Vec::new(),
            categorical: Vec::new(),
            cluster_columns: Vec::new(),
            include_intercept: true,
        }
    }

    pub fn continuous(mut self, cols: &[&str]) -> Self {
        self.continuous.extend(cols.iter().map(|c| c.to_string()));
        self
    }

    pub fn categorical(mut self, col: &str, reference: Option<&str>) -> Self {
        self.categorical.push(CategoricalTerm::new(col, reference));
        self
    }

    pub fn clusters(mut self, cols: &[&str]) -> Self {
        self.cluster_columns.extend(cols.iter().map(|c| c.to_string()));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let predictors: Vec<&str> = self
            .continuous
            .iter()
            .map(String::as_str)
            .chain(self.categorical.iter().map(|c| c.column.as_str()))
            .collect();
        if predictors.contains(&self.outcome.as_str()) {
            return Err(Error::invalid(format!("outcome `{}` is also a predictor", self.outcome)));
        }
        if predictors.iter().collect::<BTreeSet<_>>().len() != predictors.len() {
            return Err(Error::invalid("a predictor is listed twice"));
        }
        if self.cluster_columns.len() > 2 {
            return Err(Error::invalid("at most two cluster columns"));
        }
        Ok(())
    }
}

/// Regression inputs after encoding and listwise deletion.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub names: Vec<String>,
    /// Cluster ids for each kept row, one vector per cluster column.
    pub clusters: Vec<(String, Vec<String>)>,
    /// Indices of the kept table rows.
    pub rows: Vec<usize>,
    /// Rows dropped for a missing value.
    pub dropped: usize,
}

/// Intercept first, then continuous columns, then one dummy per
/// non-reference level (`column[level]`). Rows missing any used value
/// are dropped and counted.
pub fn build_design(table: &Table, spec: &ModelSpec) -> Result<Design> {
    spec.validate()?;
    let y_col = table.numeric(&spec.outcome)?;
    let cont: Vec<Vec<Option<f64>>> = spec.continuous.iter().map(|c| table.numeric(c)).collect::<Result<_>>()?;
    let cats: Vec<Vec<Option<&str>>> = spec.categorical.iter().map(|c| table.text(&c.column)).collect::<Result<_>>()?;
    let clus: Vec<Vec<Option<&str>>> = spec.cluster_columns.iter().map(|c| table.text(c)).collect::<Result<_>>()?;

    let rows: Vec<usize> = (0..table.n_rows())
        .filter(|&i| {
            y_col[i].is_some()
                && cont.iter().all(|c| c[i].is_some())
                && cats.iter().all(|c| c[i].is_some())
                && clus.iter().all(|c| c[i].is_some())
        })
        .collect();
    let dropped = table.n_rows() - rows.len();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} row(s) with missing values", spec.outcome);
    }

    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    if spec.include_intercept {
        names.push(INTERCEPT.to_string());
        columns.push(vec![1.0; rows.len()]);
    }
    for (name, c) in spec.continuous.iter().zip(&cont) {
        names.push(name.clone());
        columns.push(rows.iter().map(|&i| c[i].expect("kept rows are complete")).collect());
    }
    for (term, c) in spec.categorical.iter().zip(&cats) {
        let levels: BTreeSet<&str> = rows.iter().map(|&i| c[i].expect("kept rows are complete")).collect();
        let reference = match &term.reference {
            Some(r) if levels.contains(r.as_str()) => r.clone(),
            Some(r) => {
                return Err(Error::invalid(format!(
                    "reference level `{r}` does not occur in column `{}`",
                    term.column
                )))
            }
            None => levels.first().map(|l| l.to_string()).unwrap_or_default(),
        };
        for level in levels.iter().filter(|l| **l != reference) {
            names.push(format!("{}[{level}]", term.column));
            columns.push(rows.iter().map(|&i| f64::from(c[i] == Some(*level))).collect());
        }
    }

    let n = rows.len();
    let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    let y = DVector::from_iterator(n, rows.iter().map(|&i| y_col[i].expect("kept rows are complete")));
    let clusters = spec
        .cluster_columns
        .iter()
        .zip(&clus)
        .map(|(name, c)| (name.clone(), rows.iter().map(|&i| c[i].expect("kept").to_string()).collect()))
        .collect();
    Ok(Design {
        x,
        y,
        names,
        clusters,
        rows,
        dropped,
    })
}

/// Standard errors under one assumption about the error terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeRegime {
    /// `HC0` or `cluster:<column>`.
    pub name: String,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// HC0 first, then one entry per cluster column.
    pub regimes: Vec<SeRegime>,
    pub r2: f64,
    pub adj_r2: f64,
    pub n: usize,
    pub dropped: usize,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub term: String,
    pub regime: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

impl RegressionFit {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.index(term).map(|j| self.coefficients[j])
    }

    pub fn se(&self, term: &str, regime: &str) -> Option<f64> {
        let j = self.index(term)?;
        self.regimes.iter().find(|r| r.name == regime).map(|r| r.se[j])
    }

    fn index(&self, term: &str) -> Option<usize> {
        self.names.iter().position(|n| n == term)
    }

    /// One row per coefficient per SE regime.
    pub fn rows(&self) -> Vec<CoefficientRow> {
        let mut out = Vec::new();
        for regime in &self.regimes {
            for (j, term) in self.names.iter().enumerate() {
                let (b, se) = (self.coefficients[j], regime.se[j]);
                let z = b / se;
                out.push(CoefficientRow {
                    term: term.clone(),
                    regime: regime.name.clone(),
                    estimate: b,
                    se,
                    z,
                    p_value: normal_p_value(z),
                });
            }
        }
        out
    }
}

pub const HC0: &str = "HC0";

pub fn cluster_regime_name(column: &str) -> String {
    format!("cluster:{column}")
}

/// Encodes, fits and computes HC0 plus one clustered SE per cluster column.
/// `small_sample` applies `G/(G-1)·(n-1)/(n-k)` to clustered variances.
pub fn fit_model(table: &Table, spec: &ModelSpec, small_sample: bool) -> Result<RegressionFit> {
    let d = build_design(table, spec)?;
    let fit = ols_fit(&d.x, &d.y, &d.names)?;
    let mut regimes = vec![SeRegime {
        name: HC0.into(),
        se: hc0_se(&d.x, &fit.residuals, &fit.xtx_inv).iter().copied().collect(),
    }];
    for (col, ids) in &d.clusters {
        let se = cluster_se(&d.x, &fit.residuals, &fit.xtx_inv, ids, small_sample)?;
        regimes.push(SeRegime {
            name: cluster_regime_name(col),
            se: se.iter().copied().collect(),
        });
    }
    Ok(RegressionFit {
        names: d.names,
        coefficients: fit.coefficients.iter().copied().collect(),
        regimes,
        r2: fit.r2,
        adj_r2: fit.adj_r2,
        n: fit.n,
        dropped: d.dropped,
        residuals: fit.residuals.iter().copied().collect(),
    })
}
