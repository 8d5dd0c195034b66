//! Letter scores collapsed to one row per candidate.
//!
//! Sentiment and label masses are reported in percentage points (× 100),
//! length in thousands of words.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Writer flag marking the candidate's main adviser.
pub const ADVISER_FLAG: &str = "is_adviser";

/// One scored letter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LetterScore {
    pub letter_id: String,
    pub candidate_id: String,
    pub word_count: usize,
    /// `None` when the scorer had nothing to say (lexical baselines).
    pub polarity: Option<f64>,
    /// Label masses, e.g. `standout`, `grindstone`.
    pub labels: BTreeMap<String, f64>,
    /// Boolean writer attributes such as `is_adviser`.
    pub flags: BTreeMap<String, bool>,
    /// Candidate metadata carried through to the output.
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dispersion {
    pub range: f64,
    pub mad: f64,
    pub sd: f64,
}

/// Range, mean absolute deviation and population standard deviation.
pub fn dispersion(values: &[f64]) -> Result<Dispersion> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "dispersion needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mad = values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Dispersion {
        range: max - min,
        mad,
        sd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateAggregate {
    pub candidate_id: String,
    pub n_letters: usize,
    /// Letters whose polarity was undefined.
    pub n_undefined: usize,
    pub avg_length_thousands: f64,
    pub avg_sentiment_pp: Option<f64>,
    /// Mean label mass × 100, keyed by label.
    pub avg_label_pp: BTreeMap<String, f64>,
    pub range_pp: Option<f64>,
    pub mad_pp: Option<f64>,
    pub sd_pp: Option<f64>,
    pub has_adviser_letter: bool,
    /// Number of letters carrying each writer flag.
    pub flag_counts: BTreeMap<String, usize>,
    /// Metadata values shared by all of the candidate's letters.
    pub meta: BTreeMap<String, String>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// One row per candidate, ordered by candidate id. The result does not
/// depend on the order of `letters`.
pub fn aggregate(letters: &[LetterScore]) -> Vec<CandidateAggregate> {
    let mut groups: BTreeMap<&str, Vec<&LetterScore>> = BTreeMap::new();
    for l in letters {
        groups.entry(&l.candidate_id).or_default().push(l);
    }
    groups
        .into_iter()
        .map(|(cand, mut ls)| {
            // summation order fixed by letter id
            ls.sort_by(|a, b| a.letter_id.cmp(&b.letter_id));
            aggregate_one(cand, &ls)
        })
        .collect()
}

fn aggregate_one(cand: &str, ls: &[&LetterScore]) -> CandidateAggregate {
    let pols: Vec<f64> = ls.iter().filter_map(|l| l.polarity).collect();
    let n_undefined = ls.len() - pols.len();
    if n_undefined > 0 {
        log::debug!("candidate {cand}: {n_undefined} letter(s) without a polarity");
    }
    let disp = dispersion(&pols).ok();
    let label_names: BTreeSet<&String> = ls.iter().flat_map(|l| l.labels.keys()).collect();
    let avg_label_pp = label_names
        .into_iter()
        .filter_map(|name| {
            mean(ls.iter().filter_map(|l| l.labels.get(name).copied())).map(|m| (name.clone(), m * 100.0))
        })
        .collect();
    let mut flag_counts: BTreeMap<String, usize> = BTreeMap::new();
    for l in ls {
        for (f, &on) in &l.flags {
            *flag_counts.entry(f.clone()).or_default() += usize::from(on);
        }
    }
    let meta = ls[0]
        .meta
        .iter()
        .filter(|(k, v)| ls.iter().all(|l| l.meta.get(*k) == Some(v)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    CandidateAggregate {
        candidate_id: cand.to_string(),
        n_letters: ls.len(),
        n_undefined,
        avg_length_thousands: mean(ls.iter().map(|l| l.word_count as f64)).unwrap_or(0.0) / 1000.0,
        avg_sentiment_pp: mean(pols.iter().copied()).map(|m| m * 100.0),
        avg_label_pp,
        range_pp: disp.map(|d| d.range * 100.0),
        mad_pp: disp.map(|d| d.mad * 100.0),
        sd_pp: disp.map(|d| d.sd * 100.0),
        has_adviser_letter: flag_counts.get(ADVISER_FLAG).is_some_and(|&n| n > 0),
        flag_counts,
        meta,
    }
}

/// Candidates with at least three letters, one of them from the adviser.
pub fn complete_applications(aggregates: &[CandidateAggregate]) -> Vec<CandidateAggregate> {
    aggregates
        .iter()
        .filter(|a| a.n_letters >= 3 && a.has_adviser_letter)
        .cloned()
        .collect()
}

/// CSV with fixed columns, then `avg_<label>_pp`, `n_<flag>` and metadata
/// columns. Missing values are written as `NA`.
pub fn write_aggregates_csv(aggregates: &[CandidateAggregate], out: impl Write) -> Result<()> {
    let labels: BTreeSet<&String> = aggregates.iter().flat_map(|a| a.avg_label_pp.keys()).collect();
    let flags: BTreeSet<&String> = aggregates.iter().flat_map(|a| a.flag_counts.keys()).collect();
    let metas: BTreeSet<&String> = aggregates.iter().flat_map(|a| a.meta.keys()).collect();
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());

    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "candidate_id",
        "n_letters",
        "n_undefined",
        "avg_length_thousands",
        "avg_sentiment_pp",
        "range_pp",
        "mad_pp",
        "sd_pp",
        "has_adviser_letter",
    ]
    .map(String::from)
    .to_vec();
    header.extend(labels.iter().map(|l| format!("avg_{l}_pp")));
    header.extend(flags.iter().map(|f| format!("n_{f}")));
    header.extend(metas.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for a in aggregates {
        let mut row = vec![
            a.candidate_id.clone(),
            a.n_letters.to_string(),
            a.n_undefined.to_string(),
            a.avg_length_thousands.to_string(),
            opt(a.avg_sentiment_pp),
            opt(a.range_pp),
            opt(a.mad_pp),
            opt(a.sd_pp),
            u8::from(a.has_adviser_letter).to_string(),
        ];
        row.extend(labels.iter().map(|l| opt(a.avg_label_pp.get(*l).copied())));
        row.extend(flags.iter().map(|f| a.flag_counts.get(*f).copied().unwrap_or(0).to_string()));
        row.extend(metas.iter().map(|m| a.meta.get(*m).cloned().unwrap_or_else(|| "NA".into())));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn letter(id: &str, cand: &str, words: usize, pol: Option<f64>, adviser: bool) -> LetterScore {
        LetterScore {
            letter_id: id.into(),
            candidate_id: cand.into(),
            word_count: words,
            polarity: pol,
            flags: [(ADVISER_FLAG.to_string(), adviser)].into(),
            ..LetterScore::default()
        }
    }

    #[test]
    fn single_letter() {
        let a = aggregate(&[letter("l", "c", 2000, Some(0.07), true)]);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].avg_length_thousands, 2.0);
        assert!((a[0].avg_sentiment_pp.unwrap() - 7.0).abs() < 1e-12);
        assert_eq!(a[0].range_pp, None);
        assert_eq!(a[0].sd_pp, None);
    }

    #[test]
    fn three_letter_dispersion() {
        let ls = [
            letter("a", "c", 1000, Some(0.05), true),
            letter("b", "c", 1000, Some(0.07), false),
            letter("d", "c", 1000, Some(0.10), false),
        ];
        let a = &aggregate(&ls)[0];
        // oracle: mean 0.22/3, deviations {-0.07/3, -0.01/3, 0.08/3}
        let mean = 0.22 / 3.0;
        let devs = [0.05 - mean, 0.07 - mean, 0.10 - mean];
        let mad = devs.iter().map(|d: &f64| d.abs()).sum::<f64>() / 3.0 * 100.0;
        let sd = (devs.iter().map(|d| d * d).sum::<f64>() / 3.0).sqrt() * 100.0;
        assert!((a.range_pp.unwrap() - 5.0).abs() < 1e-9);
        assert!((a.mad_pp.unwrap() - mad).abs() < 1e-12);
        assert!((a.mad_pp.unwrap() - 1.7778).abs() < 1e-4);
        assert!((a.sd_pp.unwrap() - sd).abs() < 1e-12);
        assert!((a.sd_pp.unwrap() - 2.0548).abs() < 1e-4);
    }

    #[test]
    fn dispersion_examples() {
        let d = dispersion(&[0.3, 0.3]).unwrap();
        assert_eq!((d.range, d.mad, d.sd), (0.0, 0.0, 0.0));
        let d = dispersion(&[0.0, 1.0]).unwrap();
        assert_eq!((d.range, d.mad, d.sd), (1.0, 0.5, 0.5));
        assert!(dispersion(&[1.0]).is_err());
        assert!(dispersion(&[]).is_err());
    }

    #[test]
    fn complete_application_rule() {
        let mut ls = vec![
            letter("1", "keep", 1, Some(0.1), true),
            letter("2", "keep", 1, Some(0.1), false),
            letter("3", "keep", 1, Some(0.1), false),
            letter("4", "two", 1, Some(0.1), true),
            letter("5", "two", 1, Some(0.1), false),
        ];
        for i in 0..4 {
            ls.push(letter(&format!("n{i}"), "noadv", 1, Some(0.1), false));
        }
        let kept: Vec<String> = complete_applications(&aggregate(&ls))
            .into_iter()
            .map(|a| a.candidate_id)
            .collect();
        assert_eq!(kept, vec!["keep"]);
    }

    #[test]
    fn undefined_polarity_counted_but_excluded() {
        let ls = [
            letter("a", "c", 100, Some(0.2), true),
            letter("b", "c", 300, None, false),
        ];
        let a = &aggregate(&ls)[0];
        assert_eq!(a.n_letters, 2);
        assert_eq!(a.n_undefined, 1);
        assert!((a.avg_sentiment_pp.unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(a.avg_length_thousands, 0.2);
        assert_eq!(a.sd_pp, None);
    }

    #[test]
    fn labels_flags_and_meta() {
        let mut a = letter("a", "c", 1, Some(0.0), true);
        a.labels = [("standout".to_string(), 0.3)].into();
        a.meta = [("sex".to_string(), "female".to_string()), ("writer".to_string(), "w1".to_string())].into();
        a.flags.insert("top5".into(), true);
        let mut b = letter("b", "c", 1, Some(0.0), false);
        b.labels = [("standout".to_string(), 0.1)].into();
        b.meta = [("sex".to_string(), "female".to_string()), ("writer".to_string(), "w2".to_string())].into();
        b.flags.insert("top5".into(), true);
        let agg = aggregate(&[a, b]);
        let g = &agg[0];
        assert!((g.avg_label_pp["standout"] - 20.0).abs() < 1e-12);
        assert_eq!(g.flag_counts["top5"], 2);
        assert_eq!(g.flag_counts[ADVISER_FLAG], 1);
        assert_eq!(g.meta.len(), 1);
        assert_eq!(g.meta["sex"], "female");

        let mut buf = Vec::new();
        write_aggregates_csv(&agg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.contains("avg_standout_pp") && header.contains("n_top5") && header.ends_with(",sex"));
    }

    proptest! {
        #[test]
        fn dispersion_ordering_and_translation(
            v in proptest::collection::vec(-1.0f64..1.0, 2..12),
            c in -5.0f64..5.0,
        ) {
            let d = dispersion(&v).unwrap();
            prop_assert!(d.range >= 0.0 && d.mad >= 0.0 && d.sd >= 0.0);
            prop_assert!(d.mad <= d.sd + 1e-12);
            prop_assert!(d.sd <= d.range + 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s = dispersion(&shifted).unwrap();
            prop_assert!((s.range - d.range).abs() < 1e-9);
            prop_assert!((s.mad - d.mad).abs() < 1e-9);
            prop_assert!((s.sd - d.sd).abs() < 1e-9);
        }

        #[test]
        fn order_free_and_scaled(
            pols in proptest::collection::vec((0usize..4, -1.0f64..1.0, 100usize..3000), 1..20),
            rot in 0usize..20,
        ) {
            let ls: Vec<LetterScore> = pols
                .iter()
                .enumerate()
                .map(|(i, (c, p, w))| letter(&format!("L{i:02}"), &format!("C{c}"), *w, Some(*p), i % 3 == 0))
                .collect();
            let mut rotated = ls.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            let a = aggregate(&ls);
            prop_assert_eq!(&a, &aggregate(&rotated));
            for g in &a {
                let raw: Vec<f64> = ls.iter().filter(|l| l.candidate_id == g.candidate_id).map(|l| l.polarity.unwrap()).collect();
                let m = raw.iter().sum::<f64>() / raw.len() as f64;
                prop_assert!((g.avg_sentiment_pp.unwrap() - 100.0 * m).abs() < 1e-12);
            }
        }
    }
}
