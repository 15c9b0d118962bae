//! Bucket and macro accuracy, multi-trial confidence intervals and per-domain
//! comparisons, with plain-text renderings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::model::{encode_inputs, Prediction, SteerModel, Vocabs};
use crate::sampler::{Label, LabeledPair};

/// Inference chunk size for evaluation.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketStat {
    pub correct: usize,
    pub total: usize,
}

impl BucketStat {
    /// Percentage, or `None` for an empty bucket.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }

    fn record(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    fn merge(&mut self, other: BucketStat) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainStat {
    pub positive: BucketStat,
    pub negative: BucketStat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub positive_accuracy: Option<f64>,
    pub negative_accuracy: Option<f64>,
    /// Unweighted mean of the two bucket accuracies; absent if either is.
    pub macro_accuracy: Option<f64>,
    pub positive: BucketStat,
    pub negative: BucketStat,
    pub per_domain: BTreeMap<String, DomainStat>,
}

impl EvalReport {
    /// Builds a report from `(label, predicted, domain)` outcomes.
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = (Label, Label, &'a str)>) -> Self {
        let mut r = Self::default();
        for (gold, pred, domain) in outcomes {
            let hit = gold == pred;
            let d = r.per_domain.entry(domain.to_string()).or_default();
            match gold {
                Label::Steering => {
                    r.positive.record(hit);
                    d.positive.record(hit);
                }
                Label::FollowUp => {
                    r.negative.record(hit);
                    d.negative.record(hit);
                }
            }
        }
        r.finish();
        r
    }

    fn finish(&mut self) {
        self.positive_accuracy = self.positive.accuracy();
        self.negative_accuracy = self.negative.accuracy();
        self.macro_accuracy = match (self.positive_accuracy, self.negative_accuracy) {
            (Some(p), Some(n)) => Some((p + n) / 2.0),
            _ => None,
        };
    }

    /// Adds another report's counts (for sharded evaluation).
    pub fn merge(&mut self, other: &EvalReport) {
        self.positive.merge(other.positive);
        self.negative.merge(other.negative);
        for (k, v) in &other.per_domain {
            let d = self.per_domain.entry(k.clone()).or_default();
            d.positive.merge(v.positive);
            d.negative.merge(v.negative);
        }
        self.finish();
    }

    pub fn require_macro(&self) -> Result<f64> {
        self.macro_accuracy.ok_or_else(|| {
            SteerError::Contract(format!(
                "macro accuracy undefined: {} positives, {} negatives",
                self.positive.total, self.negative.total
            ))
        })
    }

    /// Per-domain accuracy on the positive bucket.
    pub fn domain_accuracy(&self, domain: &str) -> Option<f64> {
        self.per_domain.get(domain).and_then(|d| d.positive.accuracy())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Predictions for `pairs` in input order.
pub fn predict_pairs(model: &SteerModel<f32>, vocabs: &Vocabs, pairs: &[LabeledPair]) -> Result<Vec<Prediction>> {
    let inputs = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            encode_inputs(p, vocabs, model.config())
                .map_err(|e| SteerError::Contract(format!("pair {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    model.predict_many(&inputs, EVAL_CHUNK)
}

pub fn evaluate(model: &SteerModel<f32>, vocabs: &Vocabs, pairs: &[LabeledPair]) -> Result<EvalReport> {
    Ok(evaluate_with_predictions(model, vocabs, pairs)?.0)
}

pub fn evaluate_with_predictions(
    model: &SteerModel<f32>,
    vocabs: &Vocabs,
    pairs: &[LabeledPair],
) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict_pairs(model, vocabs, pairs)?;
    let report = EvalReport::from_outcomes(
        pairs
            .iter()
            .zip(&preds)
            .map(|(p, y)| (p.label, y.label, p.domain.as_str())),
    );
    Ok((report, preds))
}

/// Normal-approximation 95% interval: `(mean, 1.96 * s / sqrt(n))` with the
/// sample standard deviation `s`.
pub fn ci_from_trials(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(SteerError::Contract(format!(
            "a confidence interval needs at least 2 trials, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

/// Multi-trial summary of one model variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub name: String,
    pub trials: usize,
    pub positive: Interval,
    pub negative: Interval,
    pub macro_accuracy: Interval,
}

impl TrialSummary {
    pub fn from_reports(name: impl Into<String>, reports: &[EvalReport]) -> Result<Self> {
        let collect = |f: fn(&EvalReport) -> Option<f64>, what: &str| -> Result<Interval> {
            let vals = reports
                .iter()
                .map(|r| f(r).ok_or_else(|| SteerError::Contract(format!("a trial has no {what} accuracy"))))
                .collect::<Result<Vec<_>>>()?;
            let (mean, half_width) = ci_from_trials(&vals)?;
            Ok(Interval { mean, half_width })
        };
        Ok(Self {
            name: name.into(),
            trials: reports.len(),
            positive: collect(|r| r.positive_accuracy, "positive")?,
            negative: collect(|r| r.negative_accuracy, "negative")?,
            macro_accuracy: collect(|r| r.macro_accuracy, "macro")?,
        })
    }
}

/// Aligned text table: one column per model, rows for the two buckets and
/// macro accuracy. Single reports print without intervals.
pub fn render_results_table(columns: &[(String, [Option<Interval>; 3])]) -> String {
    const ROWS: [&str; 3] = [
        "Consecutive Reiteration Accuracy",
        "Follow-up Accuracy",
        "Macro Accuracy",
    ];
    let cell = |i: &Option<Interval>| match i {
        Some(Interval { mean, half_width }) if *half_width > 0.0 => format!("{mean:.2} ± {half_width:.2}"),
        Some(Interval { mean, .. }) => format!("{mean:.2}"),
        None => "n/a".to_string(),
    };
    let label_w = ROWS.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = columns
        .iter()
        .map(|(name, cells)| cells.iter().map(|c| cell(c).chars().count()).chain([name.len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for ((name, _), w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    for (i, row) in ROWS.iter().enumerate() {
        if i == 2 {
            out.push_str(&"-".repeat(label_w + widths.iter().map(|w| w + 2).sum::<usize>()));
            out.push('\n');
        }
        let _ = write!(out, "{row:label_w$}");
        for ((_, cells), w) in columns.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", cell(&cells[i]));
        }
        out.push('\n');
    }
    out
}

pub fn report_column(name: &str, r: &EvalReport) -> (String, [Option<Interval>; 3]) {
    let iv = |v: Option<f64>| v.map(|mean| Interval { mean, half_width: 0.0 });
    (
        name.to_string(),
        [iv(r.positive_accuracy), iv(r.negative_accuracy), iv(r.macro_accuracy)],
    )
}

pub fn summary_column(s: &TrialSummary) -> (String, [Option<Interval>; 3]) {
    (s.name.clone(), [Some(s.positive), Some(s.negative), Some(s.macro_accuracy)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a` in accuracy points.
    pub delta: Option<f64>,
}

/// Positive-bucket accuracy per domain for two models, over the union of
/// their domains, sorted by `delta` descending (rows missing a side last).
pub fn domain_breakdown(a: &EvalReport, b: &EvalReport) -> Vec<DomainRow> {
    let domains: BTreeSet<&String> = a.per_domain.keys().chain(b.per_domain.keys()).collect();
    let mut rows: Vec<DomainRow> = domains
        .into_iter()
        .map(|d| {
            let (x, y) = (a.domain_accuracy(d), b.domain_accuracy(d));
            DomainRow {
                domain: d.clone(),
                a: x,
                b: y,
                delta: x.zip(y).map(|(x, y)| y - x),
            }
        })
        .collect();
    rows.sort_by(|p, q| match (p.delta, q.delta) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| p.domain.cmp(&q.domain)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => p.domain.cmp(&q.domain),
    });
    rows
}

/// `"social_conversation"` -> `"Social Conversation"`.
pub fn pretty_domain(d: &str) -> String {
    d.split(['_', ' '])
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut c = w.chars();
            c.next()
                .map(|f| f.to_uppercase().chain(c).collect::<String>())
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render_domain_table(rows: &[DomainRow], name_a: &str, name_b: &str) -> String {
    let h = [
        "Domain".to_string(),
        format!("{name_a} Accuracy (%)"),
        format!("{name_b} Accuracy (%)"),
        "Δ (%)".to_string(),
    ];
    let fmt = |v: Option<f64>| v.map_or("—".to_string(), |x| format!("{x:.2}"));
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|r| [pretty_domain(&r.domain), fmt(r.a), fmt(r.b), fmt(r.delta)])
        .collect();
    let mut w = [0usize; 4];
    for row in std::iter::once(&h).chain(&body) {
        for (wi, c) in w.iter_mut().zip(row) {
            *wi = (*wi).max(c.chars().count());
        }
    }
    let line = |row: &[String; 4]| {
        let pad = |s: &str, n: usize| " ".repeat(n - s.chars().count());
        format!(
            "{}{}  {}{}  {}{}  {}{}\n",
            row[0],
            pad(&row[0], w[0]),
            pad(&row[1], w[1]),
            row[1],
            pad(&row[2], w[2]),
            row[2],
            pad(&row[3], w[3]),
            row[3]
        )
    };
    let mut out = line(&h);
    out.push_str(&"=".repeat(w.iter().sum::<usize>() + 6));
    out.push('\n');
    let mut crossed = false;
    for (r, cells) in rows.iter().zip(&body) {
        if !crossed && r.delta.is_some_and(|d| d < 0.0) {
            out.push_str(&"-".repeat(w.iter().sum::<usize>() + 6));
            out.push('\n');
            crossed = true;
        }
        out.push_str(&line(cells));
    }
    out
}

pub fn write_domain_csv(w: impl std::io::Write, rows: &[DomainRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["domain", "accuracy_a", "accuracy_b", "delta"])?;
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for r in rows {
        csv.write_record([r.domain.clone(), f(r.a), f(r.b), f(r.delta)])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn outcomes(pos: (usize, usize), neg: (usize, usize)) -> EvalReport {
        let mut v = Vec::new();
        for i in 0..pos.1 {
            v.push((Label::Steering, if i < pos.0 { Label::Steering } else { Label::FollowUp }, "music"));
        }
        for i in 0..neg.1 {
            v.push((Label::FollowUp, if i < neg.0 { Label::FollowUp } else { Label::Steering }, "weather"));
        }
        EvalReport::from_outcomes(v)
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let r = outcomes((10, 10), (10, 10));
        assert_eq!((r.positive_accuracy, r.negative_accuracy, r.macro_accuracy), (Some(100.0), Some(100.0), Some(100.0)));
        let r = outcomes((10, 10), (0, 10));
        assert_eq!((r.positive_accuracy, r.negative_accuracy, r.macro_accuracy), (Some(100.0), Some(0.0), Some(50.0)));
    }

    #[test]
    fn macro_is_unweighted_mean() {
        // 90/100 positives, 450/900 negatives: micro would be 54%.
        let r = outcomes((90, 100), (450, 900));
        assert_eq!(r.positive_accuracy, Some(90.0));
        assert_eq!(r.negative_accuracy, Some(50.0));
        assert_eq!(r.macro_accuracy, Some(70.0));
    }

    #[test]
    fn empty_bucket_is_absent() {
        let r = outcomes((3, 4), (0, 0));
        assert_eq!(r.negative_accuracy, None);
        assert_eq!(r.macro_accuracy, None);
        assert!(r.require_macro().is_err());
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = outcomes((5, 10), (2, 4));
        a.merge(&outcomes((5, 10), (4, 4)));
        assert_eq!(a.positive, BucketStat { correct: 10, total: 20 });
        assert_eq!(a.negative_accuracy, Some(75.0));
    }

    #[test]
    fn ci_hand_values() {
        assert_eq!(ci_from_trials(&[3.0, 3.0, 3.0]).unwrap(), (3.0, 0.0));
        let (m, h) = ci_from_trials(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 0.98).abs() < 1e-12);
        assert!(ci_from_trials(&[1.0]).is_err());
    }

    #[test]
    fn ci_shrinks_like_inverse_sqrt_n() {
        // Known sigma = 2: expected half-width is 1.96 * 2 / sqrt(n).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [16usize, 64, 256, 1024] {
            let reps = 400;
            let mean_hw = (0..reps)
                .map(|_| {
                    let v: Vec<f64> = (0..n)
                        .map(|_| {
                            let u: f64 = rng.random::<f64>();
                            // Uniform on [-2*sqrt(3), 2*sqrt(3)] has sd 2.
                            (u - 0.5) * 4.0 * 3f64.sqrt()
                        })
                        .collect();
                    ci_from_trials(&v).unwrap().1
                })
                .sum::<f64>()
                / reps as f64;
            let expected = 1.96 * 2.0 / (n as f64).sqrt();
            assert!((mean_hw / expected - 1.0).abs() < 0.05, "n={n}: {mean_hw} vs {expected}");
        }
    }

    #[test]
    fn domain_breakdown_deltas() {
        let a = outcomes((7, 10), (5, 10));
        let rows = domain_breakdown(&a, &a);
        assert!(rows.iter().all(|r| r.delta.is_none() || r.delta == Some(0.0)));

        let b = EvalReport::from_outcomes(vec![
            (Label::Steering, Label::Steering, "music"),
            (Label::Steering, Label::Steering, "maps"),
        ]);
        let rows = domain_breakdown(&a, &b);
        assert_eq!(rows[0].domain, "music");
        assert_eq!(rows[0].delta, Some(30.0));
        for r in &rows {
            if let (Some(x), Some(y), Some(d)) = (r.a, r.b, r.delta) {
                assert_eq!(d, y - x);
            }
        }
        // Domains only one side has appear last, marked absent.
        assert!(rows.iter().skip(1).all(|r| r.delta.is_none()));
        let text = render_domain_table(&rows, "STEER", "STEER+");
        assert!(text.contains("Music") && text.contains("30.00"));
    }

    #[test]
    fn reference_row_delta() {
        // Messaging row of the published domain table: 93.54 -> 96.73.
        let delta: f64 = 96.73 - 93.54;
        assert!((delta - 3.18).abs() < 0.011);
    }

    #[test]
    fn results_table_layout() {
        let r = outcomes((9, 10), (8, 10));
        let t = render_results_table(&[report_column("STEER", &r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].starts_with("Consecutive Reiteration Accuracy") && lines[1].ends_with("90.00"));
        assert!(lines[2].starts_with("Follow-up Accuracy") && lines[2].ends_with("80.00"));
        assert!(lines[4].starts_with("Macro Accuracy") && lines[4].ends_with("85.00"));
        assert_eq!(pretty_domain("time_utilities"), "Time Utilities");
    }
}
