//! Answer extraction, matching and accuracy reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineTrace;
use crate::store::InstanceSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("trace refers to unknown instance {0:?}")]
    UnknownInstance(String),
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?(?:[0-9]{1,3}(?:,[0-9]{3})+|[0-9]+)(?:\.[0-9]+)?").unwrap())
}

/// The last numeric literal in `response`, with thousands separators removed.
///
/// A leading `-` counts as a sign only when it does not follow a letter or
/// digit, so ranges such as `50-300` read as `300`.
pub fn extract_numeric(response: &str) -> Option<Decimal> {
    let mut found = None;
    for m in number_pattern().find_iter(response) {
        let mut text = m.as_str();
        if text.starts_with('-')
            && response[..m.start()]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric())
        {
            text = &text[1..];
        }
        let cleaned = text.replace(',', "");
        if let Ok(d) = Decimal::from_str(&cleaned) {
            found = Some(d.normalize());
        }
    }
    found
}

/// Absolute and relative tolerance for answer matching.
pub const ABS_TOLERANCE: Decimal = Decimal::from_parts(5, 0, 0, false, 3);
pub const REL_TOLERANCE: Decimal = Decimal::from_parts(5, 0, 0, false, 5);

/// `|predicted - reference| <= max(5e-5 * |reference|, 5e-3)`.
pub fn numeric_match(predicted: Decimal, reference: Decimal) -> bool {
    let Some(diff) = predicted.checked_sub(reference) else {
        return false;
    };
    let bound = (REL_TOLERANCE * reference.abs()).max(ABS_TOLERANCE);
    diff.abs() <= bound
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub n: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_case_type: BTreeMap<String, TypeAccuracy>,
    /// Unweighted mean of the per-type accuracies.
    pub average: f64,
    pub failures: Vec<String>,
}

impl AccuracyReport {
    /// Builds a report from `(case_type, instance_id, correct)` judgements.
    pub fn from_judgements<'a>(items: impl IntoIterator<Item = (&'a str, &'a str, bool)>) -> Self {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut failures = Vec::new();
        for (case_type, id, correct) in items {
            let e = counts.entry(case_type.to_string()).or_default();
            e.0 += 1;
            if correct {
                e.1 += 1;
            } else {
                failures.push(id.to_string());
            }
        }
        let per_case_type: BTreeMap<String, TypeAccuracy> = counts
            .into_iter()
            .map(|(t, (n, c))| {
                (
                    t,
                    TypeAccuracy {
                        n,
                        n_correct: c,
                        accuracy: c as f64 / n as f64,
                    },
                )
            })
            .collect();
        let average = if per_case_type.is_empty() {
            0.0
        } else {
            per_case_type.values().map(|t| t.accuracy).sum::<f64>() / per_case_type.len() as f64
        };
        failures.sort();
        AccuracyReport {
            per_case_type,
            average,
            failures,
        }
    }

    /// Plain-text table with one row per case type and an `AVG` row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>6} {:>8} {:>9}", "case_type", "n", "correct", "accuracy");
        for (t, a) in &self.per_case_type {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>8} {:>8.2}%",
                t,
                a.n,
                a.n_correct,
                a.accuracy * 100.0
            );
        }
        let _ = writeln!(out, "{:<24} {:>6} {:>8} {:>8.2}%", "AVG", "", "", self.average * 100.0);
        out
    }
}

/// Whether a trace's extracted answer matches its instance's reference.
pub fn trace_is_correct(trace: &PipelineTrace, reference: Decimal) -> bool {
    trace
        .extracted_numeric
        .is_some_and(|p| numeric_match(p, reference))
}

pub fn evaluate(traces: &[PipelineTrace], instances: &InstanceSet) -> Result<AccuracyReport, EvalError> {
    let mut judged = Vec::with_capacity(traces.len());
    for t in traces {
        let inst = instances
            .get(&t.instance_id)
            .ok_or_else(|| EvalError::UnknownInstance(t.instance_id.clone()))?;
        judged.push((
            inst.case_type.as_str(),
            t.instance_id.as_str(),
            trace_is_correct(t, inst.reference_answer),
        ));
    }
    Ok(AccuracyReport::from_judgements(judged))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityBucket {
    pub logic_line_count: usize,
    pub mean_accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityDistribution {
    pub buckets: Vec<ComplexityBucket>,
    /// Spearman correlation between bucket line count and mean accuracy;
    /// `None` with fewer than two buckets or constant accuracy.
    pub rank_correlation: Option<f64>,
}

impl ComplexityDistribution {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("logic_line_count,mean_accuracy,count\n");
        for b in &self.buckets {
            let _ = writeln!(out, "{},{},{}", b.logic_line_count, b.mean_accuracy, b.count);
        }
        out
    }
}

/// Groups programs by exact logic line count. Takes `(line_count, score)`
/// pairs; negative scores are skipped.
pub fn complexity_distribution(programs: &[(usize, f64)]) -> ComplexityDistribution {
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(lines, score) in programs.iter().filter(|(_, s)| *s >= 0.0) {
        let g = groups.entry(lines).or_default();
        g.0 += score;
        g.1 += 1;
    }
    let buckets: Vec<ComplexityBucket> = groups
        .into_iter()
        .map(|(lines, (sum, n))| ComplexityBucket {
            logic_line_count: lines,
            mean_accuracy: sum / n as f64,
            count: n,
        })
        .collect();
    let xs: Vec<f64> = buckets.iter().map(|b| b.logic_line_count as f64).collect();
    let ys: Vec<f64> = buckets.iter().map(|b| b.mean_accuracy).collect();
    ComplexityDistribution {
        rank_correlation: spearman(&xs, &ys),
        buckets,
    }
}

/// Ranks starting at 1, ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    #[test]
    fn extracts_last_number() {
        assert_eq!(
            extract_numeric("the total payment fee is 1400 yuan + 50 yuan = 1450 yuan"),
            Some(d("1450"))
        );
        assert_eq!(
            extract_numeric("Zhang deserves 80,000 yuan /365 days x 5 days =1,095.89 yuan"),
            Some(d("1095.89"))
        );
        assert_eq!(extract_numeric("I cannot determine the answer."), None);
        assert_eq!(extract_numeric("each case pays 50-300 yuan"), Some(d("300")));
        assert_eq!(extract_numeric("a loss of -12.5 yuan"), Some(d("-12.5")));
        assert_eq!(extract_numeric("So the answer is ¥1,450."), Some(d("1450")));
        assert_eq!(extract_numeric("So the answer is 1450.0 yuan."), Some(d("1450")));
    }

    #[test]
    fn tolerance_rule() {
        assert!(numeric_match(d("1450"), d("1450")));
        assert!(numeric_match(d("1095.8904"), d("1095.89")));
        assert!(!numeric_match(d("1400"), d("1450")));
        assert!(numeric_match(d("0.004"), d("0")));
        assert!(!numeric_match(d("0.006"), d("0")));
        // Relative bound dominates for large references: 5e-5 * 1e6 = 50.
        assert!(numeric_match(d("1000050"), d("1000000")));
        assert!(!numeric_match(d("1000051"), d("1000000")));
    }

    #[test]
    fn report_is_macro_average() {
        let mut items = vec![("Tax", "t1", true), ("Tax", "t2", true)];
        items.extend([("Fees", "f1", true), ("Fees", "f2", false)]);
        let r = AccuracyReport::from_judgements(items);
        assert_eq!(r.per_case_type["Fees"].accuracy, 0.5);
        assert_eq!(r.average, 0.75);
        assert_eq!(r.failures, ["f2"]);
        assert!(r.render_table().contains("AVG"));
    }

    #[test]
    fn three_of_four() {
        let r = AccuracyReport::from_judgements([
            ("A", "1", true),
            ("A", "2", true),
            ("A", "3", false),
            ("A", "4", true),
        ]);
        assert_eq!(r.per_case_type["A"].accuracy, 0.75);
    }

    #[test]
    fn complexity_buckets() {
        let dist = complexity_distribution(&[(6, 0.8), (6, 0.6)]);
        assert_eq!(dist.buckets.len(), 1);
        assert_eq!(dist.buckets[0].logic_line_count, 6);
        assert!((dist.buckets[0].mean_accuracy - 0.7).abs() < 1e-12);
        assert_eq!(dist.buckets[0].count, 2);
        assert_eq!(dist.rank_correlation, None);

        let empty = complexity_distribution(&[]);
        assert!(empty.buckets.is_empty());
        assert_eq!(empty.to_csv(), "logic_line_count,mean_accuracy,count\n");

        let skips = complexity_distribution(&[(3, -1.0), (4, 0.5)]);
        assert_eq!(skips.buckets.len(), 1);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]), Some(1.0));
        // Ties take mean ranks: x ranks [1,2,3,4], y ranks [1.5,1.5,3,4].
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 2.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn match_is_symmetric_below_relative_range(a in -9_000i64..9_000, delta in -100i64..100) {
            // Under 100 in magnitude the absolute bound governs both ways.
            let r = Decimal::new(a, 2);
            let p = r + Decimal::new(delta, 4);
            prop_assert_eq!(numeric_match(p, r), numeric_match(r, p));
            prop_assert_eq!(numeric_match(p, r), delta.abs() <= 50);
        }

        #[test]
        fn extraction_is_total(s in "\\PC{0,60}") {
            let _ = extract_numeric(&s);
            prop_assert_eq!(extract_numeric(&s), extract_numeric(&s));
        }

        #[test]
        fn formatted_answer_round_trips(n in 0i64..10_000_000_000, scale in 0u32..5) {
            let v = Decimal::new(n, scale);
            let text = format!("So the answer is {v} yuan.");
            prop_assert_eq!(extract_numeric(&text), Some(v.normalize()));
        }
    }
}
