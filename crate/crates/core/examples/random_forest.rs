//! Trains a forest on a small planted problem and reports OOB accuracy
//! and permutation importance.

use promptsent::forest::{
    fit_forest, oob_report, permutation_importance, Dataset, FeatureKind, ImportanceMode, RFConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 553;
    let sentiment: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..40.0)).collect();
    let length: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.5)).collect();
    let field: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8))).collect();
    let placed: Vec<&str> = sentiment
        .iter()
        .map(|s| if rng.random::<f64>() < 0.1 + 0.6 * f64::from(*s > 15.0) { "placed" } else { "not" })
        .collect();
    let data = Dataset::new(
        vec!["sentiment".into(), "length".into(), "field".into()],
        vec![
            FeatureKind::Continuous,
            FeatureKind::Continuous,
            FeatureKind::Categorical {
                levels: ["applied", "finance", "macro", "metrics", "theory"].map(String::from).to_vec(),
            },
        ],
        vec![sentiment, length, field],
        &placed,
    )?;
    let forest = fit_forest(&data, &RFConfig::default().with_seed(7))?;
    let oob = oob_report(&forest, &data)?;
    println!("{}", oob.report.render_text());
    for f in data.names() {
        let d = permutation_importance(&forest, &data, f, 30, ImportanceMode::ShuffleOnly)?;
        println!("{f:<10} mean accuracy decrease {:.4}", d.iter().sum::<f64>() / d.len() as f64);
    }
    Ok(())
}
