//! One- and two-way partial dependence of a fitted forest.

use promptsent::forest::{fit_forest, partial_dependence, Dataset, FeatureKind, RFConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 400;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let sex: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3))).collect();
    let y: Vec<&str> = x
        .iter()
        .zip(&sex)
        .map(|(x, s)| if rng.random::<f64>() < 0.2 + 0.5 * x - 0.1 * s { "1" } else { "0" })
        .collect();
    let data = Dataset::new(
        vec!["sentiment".into(), "sex".into()],
        vec![
            FeatureKind::Continuous,
            FeatureKind::Categorical {
                levels: vec!["female".into(), "male".into()],
            },
        ],
        vec![x, sex],
        &y,
    )?;
    let forest = fit_forest(&data, &RFConfig::default().with_seed(11))?;
    let one = partial_dependence(&forest, &data, &["sentiment"], None, None)?;
    println!("decile grid -> P(y = 1)");
    for (g, v) in one.grids[0].iter().zip(&one.values) {
        println!("{g:>8.3} {v:.4}");
    }
    println!();
    partial_dependence(&forest, &data, &["sentiment", "sex"], None, None)?.write_csv(std::io::stdout())?;
    Ok(())
}
