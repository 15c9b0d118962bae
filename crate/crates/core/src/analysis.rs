//! User-friction accounting and the part-of-speech boundary analysis.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Result, SteerError};
use crate::sampler::{Label, LabeledPair};
use crate::textproc::{pos_tag, tokenize, word_count, PosLexicon, PosTag};

/// Words saved (or wasted) on one positive pair under a hard prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrictionRecord<'a> {
    pub pair: &'a LabeledPair,
    pub detected: bool,
    /// Words in the context: saved when steering is detected.
    pub f_request: usize,
    /// Words in the follow-up: wasted when steering is missed.
    pub f_steer: usize,
    pub f: i64,
    /// `f` over the word count of the full reiteration.
    pub fraction: f64,
}

impl FrictionRecord<'_> {
    pub fn full_words(&self) -> usize {
        self.f_request + self.f_steer
    }

    /// Fraction saved by a perfect detector.
    pub fn oracle_fraction(&self) -> f64 {
        self.f_request as f64 / self.full_words() as f64
    }
}

pub fn friction(pair: &LabeledPair, predicted: Label) -> Result<FrictionRecord<'_>> {
    if pair.label != Label::Steering {
        return Err(SteerError::Contract("friction is defined on positive pairs only".into()));
    }
    let full = pair
        .full_reiteration_text
        .as_deref()
        .ok_or_else(|| SteerError::Contract("positive pair has no full reiteration text".into()))?;
    let f_request = word_count(&pair.context_text);
    let f_steer = word_count(&pair.followup_text);
    let full_words = word_count(full);
    if f_request + f_steer != full_words || full_words == 0 {
        return Err(SteerError::Contract(format!(
            "context ({f_request} words) and follow-up ({f_steer} words) do not add up to the full reiteration ({full_words} words)"
        )));
    }
    let detected = predicted == Label::Steering;
    let f = if detected { f_request as i64 } else { -(f_steer as i64) };
    Ok(FrictionRecord {
        pair,
        detected,
        f_request,
        f_steer,
        f,
        fraction: f as f64 / full_words as f64,
    })
}

/// Records for every positive pair, paired with its prediction.
pub fn friction_records<'a>(pairs: &'a [LabeledPair], predicted: &[Label]) -> Result<Vec<FrictionRecord<'a>>> {
    if pairs.len() != predicted.len() {
        return Err(SteerError::Contract(format!(
            "{} pairs but {} predictions",
            pairs.len(),
            predicted.len()
        )));
    }
    pairs
        .iter()
        .zip(predicted)
        .filter(|(p, _)| p.label == Label::Steering)
        .map(|(p, &y)| friction(p, y))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrictionSummary {
    pub records: usize,
    pub detected: usize,
    pub mean_words_saved: f64,
    pub mean_fraction_saved: f64,
    pub upper_bound_words: f64,
    pub upper_bound_fraction: f64,
}

pub fn aggregate_friction(records: &[FrictionRecord<'_>]) -> Result<FrictionSummary> {
    if records.is_empty() {
        return Err(SteerError::Contract("no friction records to aggregate".into()));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&FrictionRecord<'_>) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(FrictionSummary {
        records: records.len(),
        detected: records.iter().filter(|r| r.detected).count(),
        mean_words_saved: mean(&|r| r.f as f64),
        mean_fraction_saved: mean(&|r| r.fraction),
        upper_bound_words: mean(&|r| r.f_request as f64),
        upper_bound_fraction: mean(&|r| r.oracle_fraction()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub frequency: f64,
}

fn bin_count(bin_width: f64) -> Result<usize> {
    if !(bin_width > 0.0 && bin_width <= 2.0) {
        return Err(SteerError::Config(format!("bin width {bin_width} must lie in (0, 2]")));
    }
    Ok((2.0 / bin_width - 1e-9).ceil() as usize)
}

/// Half-open bins `[lo, hi)` over `[-1, 1]`; the value 1 falls in the last bin.
fn bin_index(x: f64, bin_width: f64, bins: usize) -> usize {
    // The small nudge keeps values on a bin edge (0.7 = 1.7 / 0.1) from
    // landing one bin low through rounding.
    let i = ((x + 1.0) / bin_width + 1e-9).floor();
    (i.max(0.0) as usize).min(bins - 1)
}

/// Bin edge rounded to 12 decimals so CSVs show 0.3 rather than 0.30000000000000004.
fn edge(i: usize, bin_width: f64) -> f64 {
    ((-1.0 + i as f64 * bin_width) * 1e12).round() / 1e12
}

/// Normalized histogram of per-record `fraction` values.
pub fn friction_histogram(records: &[FrictionRecord<'_>], bin_width: f64) -> Result<Vec<HistogramBin>> {
    let bins = bin_count(bin_width)?;
    if records.is_empty() {
        return Err(SteerError::Contract("no friction records to histogram".into()));
    }
    let mut counts = vec![0usize; bins];
    for r in records {
        counts[bin_index(r.fraction, bin_width, bins)] += 1;
    }
    let n = records.len() as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: edge(i, bin_width),
            hi: edge(i + 1, bin_width).min(1.0),
            count,
            frequency: count as f64 / n,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaBin {
    pub lo: f64,
    pub hi: f64,
    /// Frequency under B minus frequency under A.
    pub delta: f64,
}

fn pair_key(p: &LabeledPair) -> (&str, &str, Option<&str>) {
    (&p.context_text, &p.followup_text, p.full_reiteration_text.as_deref())
}

/// Per-bin frequency differences between two models evaluated on the same pairs.
pub fn improvement_histogram(
    a: &[FrictionRecord<'_>],
    b: &[FrictionRecord<'_>],
    bin_width: f64,
) -> Result<Vec<DeltaBin>> {
    let mut ka: Vec<_> = a.iter().map(|r| pair_key(r.pair)).collect();
    let mut kb: Vec<_> = b.iter().map(|r| pair_key(r.pair)).collect();
    ka.sort_unstable();
    kb.sort_unstable();
    if ka != kb {
        return Err(SteerError::Contract("friction records cover different pair sets".into()));
    }
    let ha = friction_histogram(a, bin_width)?;
    let hb = friction_histogram(b, bin_width)?;
    Ok(ha
        .iter()
        .zip(&hb)
        .map(|(x, y)| DeltaBin {
            lo: x.lo,
            hi: x.hi,
            delta: y.frequency - x.frequency,
        })
        .collect())
}

/// Joint distribution of (tag of the last context token, tag of the first
/// follow-up token).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TransitionMatrix {
    counts: BTreeMap<(PosTag, PosTag), u64>,
    total: u64,
    /// Pairs with an empty context or follow-up after tokenization.
    pub skipped: usize,
}

impl TransitionMatrix {
    pub fn count(&self, from: PosTag, to: PosTag) -> u64 {
        self.counts.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn probability(&self, from: PosTag, to: PosTag) -> f64 {
        self.count(from, to) as f64 / self.total as f64
    }

    pub fn from_marginal(&self, from: PosTag) -> u64 {
        self.counts.iter().filter(|((f, _), _)| *f == from).map(|(_, c)| c).sum()
    }

    pub fn to_marginal(&self, to: PosTag) -> u64 {
        self.counts.iter().filter(|((_, t), _)| *t == to).map(|(_, c)| c).sum()
    }

    /// Non-zero cells, most frequent first.
    pub fn top(&self, k: usize) -> Vec<((PosTag, PosTag), f64)> {
        let mut cells: Vec<_> = self.counts.iter().map(|(&k, &c)| (k, c)).collect();
        cells.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        cells
            .into_iter()
            .take(k)
            .map(|(cell, c)| (cell, c as f64 / self.total as f64))
            .collect()
    }

    /// Wide CSV: one row per source tag, one column per target tag.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["from".to_owned()];
        header.extend(PosTag::ALL.iter().map(|t| t.as_str().to_owned()));
        csv.write_record(&header)?;
        for from in PosTag::ALL {
            let mut row = vec![from.as_str().to_owned()];
            row.extend(PosTag::ALL.iter().map(|&to| self.probability(from, to).to_string()));
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    }
}

pub fn pos_transitions(pairs: &[LabeledPair], lexicon: &PosLexicon) -> Result<TransitionMatrix> {
    let mut m = TransitionMatrix::default();
    for p in pairs {
        if p.label != Label::Steering {
            return Err(SteerError::Contract("POS transitions are defined on positive pairs only".into()));
        }
        let ctx = tokenize(&p.context_text);
        let fol = tokenize(&p.followup_text);
        let (Some(last), Some(first)) = (ctx.last(), fol.first()) else {
            m.skipped += 1;
            continue;
        };
        let from = pos_tag(std::slice::from_ref(last), lexicon)[0];
        let to = pos_tag(std::slice::from_ref(first), lexicon)[0];
        *m.counts.entry((from, to)).or_default() += 1;
        m.total += 1;
    }
    if m.total == 0 {
        return Err(SteerError::Contract("no positive pairs to analyze".into()));
    }
    Ok(m)
}

pub fn write_friction_summary_csv(w: impl Write, rows: &[(&str, FrictionSummary)]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "model",
        "records",
        "detected",
        "mean_words_saved",
        "mean_fraction_saved",
        "upper_bound_words",
        "upper_bound_fraction",
    ])?;
    for (name, s) in rows {
        csv.write_record([
            name.to_string(),
            s.records.to_string(),
            s.detected.to_string(),
            s.mean_words_saved.to_string(),
            s.mean_fraction_saved.to_string(),
            s.upper_bound_words.to_string(),
            s.upper_bound_fraction.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// One frequency column per model; all histograms must share bins.
pub fn write_histogram_csv(w: impl Write, columns: &[(&str, Vec<HistogramBin>)]) -> Result<()> {
    let Some((_, first)) = columns.first() else {
        return Err(SteerError::Contract("no histograms to write".into()));
    };
    if columns.iter().any(|(_, h)| h.len() != first.len()) {
        return Err(SteerError::Contract("histograms have different bins".into()));
    }
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["bin_lo".to_owned(), "bin_hi".to_owned()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    csv.write_record(&header)?;
    for (i, bin) in first.iter().enumerate() {
        let mut row = vec![bin.lo.to_string(), bin.hi.to_string()];
        row.extend(columns.iter().map(|(_, h)| h[i].frequency.to_string()));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_delta_csv(w: impl Write, bins: &[DeltaBin]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["bin_lo", "bin_hi", "delta"])?;
    for b in bins {
        csv.write_record([b.lo.to_string(), b.hi.to_string(), b.delta.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}
