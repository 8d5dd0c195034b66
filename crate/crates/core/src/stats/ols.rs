use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Columns whose Gram-Schmidt remainder falls below this fraction of their
/// norm are treated as linear combinations of earlier columns.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub r2: f64,
    pub adj_r2: f64,
    pub n: usize,
    pub k: usize,
    /// `(XᵀX)⁻¹`, from the triangular factor.
    pub xtx_inv: DMatrix<f64>,
}

fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let rest = v.norm();
        if norm == 0.0 || rest <= RANK_TOL * norm {
            bad.push(names.get(j).cloned().unwrap_or_else(|| format!("column {j}")));
        } else {
            basis.push(v / rest);
        }
    }
    bad
}

/// Least squares via Householder QR. `names` label the columns in the
/// rank-deficiency error.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<OlsFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::invalid(format!("{n} design rows but {} outcomes", y.len())));
    }
    if k == 0 {
        return Err(Error::invalid("design has no columns"));
    }
    if n <= k {
        return Err(Error::invalid(format!("{n} observations for {k} coefficients")));
    }
    let bad = collinear_columns(x, names);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let qty = q.transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient(names.to_vec()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::RankDeficient(names.to_vec()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let residuals = y - x * &coefficients;

    let ssr = residuals.norm_squared();
    let mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else if ssr == 0.0 { 1.0 } else { 0.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - k) as f64;
    Ok(OlsFit {
        coefficients,
        residuals,
        r2,
        adj_r2,
        n,
        k,
        xtx_inv,
    })
}

fn sandwich(xtx_inv: &DMatrix<f64>, meat: &DMatrix<f64>) -> DVector<f64> {
    let v = xtx_inv * meat * xtx_inv;
    DVector::from_iterator(v.nrows(), v.diagonal().iter().map(|d| d.max(0.0).sqrt()))
}

/// `sqrt(diag((XᵀX)⁻¹ Xᵀ diag(e²) X (XᵀX)⁻¹))`.
pub fn hc0_se(x: &DMatrix<f64>, residuals: &DVector<f64>, xtx_inv: &DMatrix<f64>) -> DVector<f64> {
    let mut xe = x.clone();
    for (i, mut row) in xe.row_iter_mut().enumerate() {
        row *= residuals[i];
    }
    sandwich(xtx_inv, &(xe.transpose() * &xe))
}

/// Liang-Zeger clustered SEs. Meat is `Σ_g (X_gᵀ e_g)(X_gᵀ e_g)ᵀ`.
pub fn cluster_se<S: Ord>(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    xtx_inv: &DMatrix<f64>,
    cluster_ids: &[S],
    small_sample: bool,
) -> Result<DVector<f64>> {
    let (n, k) = x.shape();
    if cluster_ids.len() != n {
        return Err(Error::invalid(format!("{} cluster ids for {n} rows", cluster_ids.len())));
    }
    let mut scores: BTreeMap<&S, DVector<f64>> = BTreeMap::new();
    for (i, g) in cluster_ids.iter().enumerate() {
        let s = scores.entry(g).or_insert_with(|| DVector::zeros(k));
        *s += x.row(i).transpose() * residuals[i];
    }
    let g = scores.len();
    if g < 2 {
        return Err(Error::invalid("clustered standard errors need at least two clusters"));
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    if small_sample {
        meat *= (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n - k) as f64);
    }
    Ok(sandwich(xtx_inv, &meat))
}

/// Two-sided p-value of `z` under the standard normal.
pub fn normal_p_value(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use num_traits::{FromPrimitive, ToPrimitive, Zero};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    fn random_system(n: usize, k: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let y = DVector::from_fn(n, |i, _| x.row(i).sum() * 0.3 + rng.random_range(-1.0..1.0));
        (x, y)
    }

    /// `(XᵀX)⁻¹Xᵀy` in exact rational arithmetic.
    fn normal_equations_exact(x: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
        let (n, k) = x.shape();
        let q = |v: f64| BigRational::from_f64(v).unwrap();
        let xs: Vec<Vec<BigRational>> = (0..n).map(|i| (0..k).map(|j| q(x[(i, j)])).collect()).collect();
        let ys: Vec<BigRational> = y.iter().map(|v| q(*v)).collect();
        // augmented [XᵀX | Xᵀy]
        let mut a: Vec<Vec<BigRational>> = (0..k)
            .map(|r| {
                let mut row: Vec<BigRational> = (0..k)
                    .map(|c| (0..n).fold(BigRational::zero(), |s, i| s + &xs[i][r] * &xs[i][c]))
                    .collect();
                row.push((0..n).fold(BigRational::zero(), |s, i| s + &xs[i][r] * &ys[i]));
                row
            })
            .collect();
        for c in 0..k {
            let p = (c..k).find(|&r| !a[r][c].is_zero()).unwrap();
            a.swap(c, p);
            for r in 0..k {
                if r != c && !a[r][c].is_zero() {
                    let f = &a[r][c] / &a[c][c];
                    for j in c..=k {
                        let t = &f * &a[c][j];
                        a[r][j] -= t;
                    }
                }
            }
        }
        (0..k).map(|c| (&a[c][k] / &a[c][c]).to_f64().unwrap()).collect()
    }

    /// Sandwich by explicit loops, without nalgebra products.
    fn brute_hc0(x: &DMatrix<f64>, e: &DVector<f64>, bread: &DMatrix<f64>) -> Vec<f64> {
        let (n, k) = x.shape();
        let mut meat = vec![vec![0.0; k]; k];
        for i in 0..n {
            for a in 0..k {
                for b in 0..k {
                    meat[a][b] += e[i] * e[i] * x[(i, a)] * x[(i, b)];
                }
            }
        }
        (0..k)
            .map(|j| {
                let mut v = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        v += bread[(j, a)] * meat[a][b] * bread[(b, j)];
                    }
                }
                v.sqrt()
            })
            .collect()
    }

    #[test]
    fn exact_line() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let f = ols_fit(&x, &y, &names(2)).unwrap();
        assert!(f.coefficients[0].abs() < 1e-12);
        assert!((f.coefficients[1] - 1.0).abs() < 1e-12);
        assert!(f.residuals.iter().all(|e| e.abs() < 1e-12));
        assert!((f.adj_r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn intercept_only_is_mean() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, -1.0, 3.0, 5.0]);
        let f = ols_fit(&x, &y, &names(1)).unwrap();
        assert!((f.coefficients[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_exact_normal_equations() {
        let (x, y) = random_system(50, 4, 7);
        let f = ols_fit(&x, &y, &names(4)).unwrap();
        let oracle = normal_equations_exact(&x, &y);
        for (b, o) in f.coefficients.iter().zip(&oracle) {
            assert!((b - o).abs() < 1e-8, "{b} vs {o}");
        }
    }

    #[test]
    fn hc0_zero_residuals() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let f = ols_fit(&x, &DVector::from_vec(vec![1.0, 2.0, 3.0]), &names(2)).unwrap();
        let e = DVector::zeros(3);
        assert!(hc0_se(&x, &e, &f.xtx_inv).iter().all(|s| *s == 0.0));
    }

    #[test]
    fn hc0_homoskedastic_identity() {
        // |e_i| = c for all i: HC0 = classical SE × sqrt((n-k)/n)
        let (x, _) = random_system(10, 2, 3);
        let f0 = ols_fit(&x, &DVector::zeros(10), &names(2)).unwrap();
        let c = 0.7;
        let e = DVector::from_fn(10, |i, _| if i % 2 == 0 { c } else { -c });
        let hc0 = hc0_se(&x, &e, &f0.xtx_inv);
        let sigma2 = e.norm_squared() / (10.0 - 2.0);
        // with e² constant the sandwich collapses to c²(XᵀX)⁻¹
        for j in 0..2 {
            let classical = (sigma2 * f0.xtx_inv[(j, j)]).sqrt();
            assert!((hc0[j] - classical * (8.0f64 / 10.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn hc0_matches_brute_force() {
        let (x, y) = random_system(20, 3, 11);
        let f = ols_fit(&x, &y, &names(3)).unwrap();
        let se = hc0_se(&x, &f.residuals, &f.xtx_inv);
        let brute = brute_hc0(&x, &f.residuals, &f.xtx_inv);
        for (a, b) in se.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn singleton_clusters_equal_hc0() {
        let (x, y) = random_system(40, 3, 5);
        let f = ols_fit(&x, &y, &names(3)).unwrap();
        let ids: Vec<usize> = (0..40).collect();
        let c = cluster_se(&x, &f.residuals, &f.xtx_inv, &ids, false).unwrap();
        let h = hc0_se(&x, &f.residuals, &f.xtx_inv);
        for (a, b) in c.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cluster_meat_brute_force() {
        // two clusters of three rows, residuals mirrored
        let x = DMatrix::from_row_slice(6, 2, &[1.0, 0.1, 1.0, 0.5, 1.0, 0.9, 1.0, 1.3, 1.0, 1.7, 1.0, 2.2]);
        let e = DVector::from_vec(vec![0.3, -0.1, 0.2, -0.3, 0.1, -0.2]);
        let f = ols_fit(&x, &DVector::from_fn(6, |i, _| i as f64), &names(2)).unwrap();
        let ids = ["a", "a", "a", "b", "b", "b"];
        let se = cluster_se(&x, &e, &f.xtx_inv, &ids, false).unwrap();
        let mut meat = [[0.0; 2]; 2];
        for g in [0..3, 3..6] {
            let mut s = [0.0; 2];
            for i in g {
                s[0] += x[(i, 0)] * e[i];
                s[1] += x[(i, 1)] * e[i];
            }
            for a in 0..2 {
                for b in 0..2 {
                    meat[a][b] += s[a] * s[b];
                }
            }
        }
        for j in 0..2 {
            let mut v = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    v += f.xtx_inv[(j, a)] * meat[a][b] * f.xtx_inv[(b, j)];
                }
            }
            assert!((se[j] - v.sqrt()).abs() < 1e-12);
        }
        assert!(cluster_se(&x, &e, &f.xtx_inv, &["z"; 6], false).is_err());
        let adj = cluster_se(&x, &e, &f.xtx_inv, &ids, true).unwrap();
        let factor: f64 = 2.0 / 1.0 * 5.0 / 4.0;
        assert!((adj[0] - se[0] * factor.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn p_values() {
        assert!((normal_p_value(0.0) - 1.0).abs() < 1e-15);
        assert!((normal_p_value(1.959963984540054) - 0.05).abs() < 1e-12);
        assert!((normal_p_value(-2.5758293035489) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn irrelevant_column_changes_nothing() {
        // noise orthogonal to the residuals gets a zero coefficient
        let (x, y) = random_system(60, 3, 21);
        let base = ols_fit(&x, &y, &names(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let raw = DVector::from_fn(60, |_, _| rng.random_range(-1.0..1.0));
        let e = &base.residuals;
        let noise = &raw - e * (e.dot(&raw) / e.norm_squared());
        let mut x2 = x.clone().insert_column(3, 0.0);
        x2.set_column(3, &noise);
        let wide = ols_fit(&x2, &y, &names(4)).unwrap();
        assert!(wide.coefficients[3].abs() < 1e-8);
        assert!((&base.residuals - &wide.residuals).amax() < 1e-6);
        assert!(wide.adj_r2 <= base.adj_r2 + 1e-6);
    }

    proptest! {
        #[test]
        fn residuals_orthogonal(seed in any::<u64>(), n in 8usize..60, k in 1usize..5) {
            prop_assume!(n > k + 1);
            let (x, y) = random_system(n, k, seed);
            let f = ols_fit(&x, &y, &names(k)).unwrap();
            for j in 0..k {
                let col = x.column(j);
                let dot = col.dot(&f.residuals);
                prop_assert!(dot.abs() <= 1e-8 * col.norm().max(1.0));
            }
            if k > 1 {
                prop_assert!(f.adj_r2 <= f.r2 + 1e-15);
            }
        }

        #[test]
        fn cluster_label_invariance(seed in any::<u64>(), perm in any::<u64>()) {
            let (x, y) = random_system(30, 3, seed);
            let f = ols_fit(&x, &y, &names(3)).unwrap();
            let ids: Vec<u64> = (0..30).map(|i| i % 6).collect();
            let relabeled: Vec<u64> = ids.iter().map(|g| (g ^ perm).wrapping_mul(0x9e3779b97f4a7c15)).collect();
            let a = cluster_se(&x, &f.residuals, &f.xtx_inv, &ids, false).unwrap();
            let b = cluster_se(&x, &f.residuals, &f.xtx_inv, &relabeled, false).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }
}
