//! Annotation-free pair mining.
//!
//! Positives come from consecutive reiterations: a turn whose words are a
//! strict prefix of the next turn's, shortly before it. The extra words of
//! the second turn become a synthetic steering follow-up. Negatives are the
//! remaining consecutive in-window turn pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::error::{Result, SteerError};
use crate::seeds;

pub const DEFAULT_WINDOW_MS: i64 = 30_000;

/// Lowercases, collapses whitespace and strips trailing punctuation.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let keep = out
        .trim_end_matches(|c: char| c.is_whitespace() || is_punctuation(c))
        .len();
    out.truncate(keep);
    out
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '\u{2026}' | '\u{00bf}' | '\u{00a1}' | '\u{3002}')
}

/// If the words of `prefix` are a strict, non-empty prefix of the words of
/// `full`, returns how many words `prefix` has.
pub fn is_word_prefix(prefix: &str, full: &str) -> Option<usize> {
    let mut p = prefix.split_whitespace();
    let mut f = full.split_whitespace();
    let mut n = 0;
    loop {
        match (p.next(), f.next()) {
            (None, Some(_)) if n > 0 => return Some(n),
            (Some(a), Some(b)) if a == b => n += 1,
            _ => return None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub window_ms: i64,
    /// Compare normalized text; when off, raw whitespace-split words must match.
    pub normalize: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_ms: DEFAULT_WINDOW_MS,
            normalize: true,
        }
    }
}

impl SamplerConfig {
    fn view(&self, text: &str) -> String {
        if self.normalize {
            normalize(text)
        } else {
            text.to_string()
        }
    }

    fn in_window(&self, a: &Turn, b: &Turn) -> bool {
        let gap = b.timestamp_ms - a.timestamp_ms;
        (0..=self.window_ms).contains(&gap)
    }

    fn prefix_words(&self, a: &Turn, b: &Turn) -> Option<usize> {
        is_word_prefix(&self.view(&a.text), &self.view(&b.text))
    }

    /// The reiteration predicate on two consecutive turns.
    pub fn is_reiteration(&self, a: &Turn, b: &Turn) -> bool {
        a.conversation_id == b.conversation_id
            && self.in_window(a, b)
            && self.prefix_words(a, b).is_some()
    }
}

/// Consecutive turn pairs per conversation, conversations in id order. Input
/// order within each conversation is kept, so unrelated conversations may be
/// interleaved freely.
pub fn consecutive_pairs(turns: &[Turn]) -> Vec<(&Turn, &Turn)> {
    let mut convs: BTreeMap<&str, Vec<&Turn>> = BTreeMap::new();
    for t in turns {
        convs.entry(&t.conversation_id).or_default().push(t);
    }
    convs
        .into_values()
        .flat_map(|ts| ts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>())
        .collect()
}

pub fn find_reiterations<'a>(turns: &'a [Turn], config: &SamplerConfig) -> Vec<(&'a Turn, &'a Turn)> {
    consecutive_pairs(turns)
        .into_iter()
        .filter(|(a, b)| config.is_reiteration(a, b))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "steer")]
    Steering,
    #[serde(rename = "followup")]
    FollowUp,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn class(self) -> usize {
        match self {
            Label::FollowUp => 0,
            Label::Steering => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 1 {
            Label::Steering
        } else {
            Label::FollowUp
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Steering => "steer",
            Label::FollowUp => "followup",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Mined,
    #[default]
    Ingested,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    #[serde(rename = "context")]
    pub context_text: String,
    #[serde(rename = "followup")]
    pub followup_text: String,
    pub label: Label,
    pub domain: String,
    #[serde(rename = "spt", default)]
    pub context_spt: Option<String>,
    #[serde(rename = "full", default)]
    pub full_reiteration_text: Option<String>,
    #[serde(skip)]
    pub provenance: Provenance,
}

impl LabeledPair {
    pub fn new(context: impl Into<String>, followup: impl Into<String>, label: Label) -> Self {
        Self {
            context_text: context.into(),
            followup_text: followup.into(),
            label,
            domain: String::new(),
            context_spt: None,
            full_reiteration_text: None,
            provenance: Provenance::Ingested,
        }
    }
}

/// Builds the steering example for a reiteration `(first, second)`.
pub fn make_positive(first: &Turn, second: &Turn, config: &SamplerConfig) -> Result<LabeledPair> {
    if !config.is_reiteration(first, second) {
        return Err(SteerError::Contract(format!(
            "`{}` -> `{}` is not a reiteration",
            first.text, second.text
        )));
    }
    let k = config.prefix_words(first, second).expect("checked above");
    let followup = second.text.split_whitespace().skip(k).collect::<Vec<_>>().join(" ");
    Ok(LabeledPair {
        context_text: first.text.clone(),
        followup_text: followup,
        label: Label::Steering,
        domain: second.domain.clone(),
        context_spt: first.spt_source.clone(),
        full_reiteration_text: Some(second.text.clone()),
        provenance: Provenance::Mined,
    })
}

/// Consecutive in-window pairs that are not reiterations. The pair takes the
/// follow-up turn's domain.
pub fn make_negatives(turns: &[Turn], config: &SamplerConfig) -> Vec<LabeledPair> {
    consecutive_pairs(turns)
        .into_iter()
        .filter(|(a, b)| config.in_window(a, b) && config.prefix_words(a, b).is_none())
        .map(|(a, b)| LabeledPair {
            context_text: a.text.clone(),
            followup_text: b.text.clone(),
            label: Label::FollowUp,
            domain: b.domain.clone(),
            context_spt: a.spt_source.clone(),
            full_reiteration_text: None,
            provenance: Provenance::Mined,
        })
        .collect()
}

/// Positives and negatives mined from one log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mined {
    pub positives: Vec<LabeledPair>,
    pub negatives: Vec<LabeledPair>,
}

pub fn mine(turns: &[Turn], config: &SamplerConfig) -> Result<Mined> {
    let positives = find_reiterations(turns, config)
        .into_iter()
        .map(|(a, b)| make_positive(a, b, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mined {
        positives,
        negatives: make_negatives(turns, config),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<LabeledPair>,
    pub validation: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
    pub split_seed: u64,
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "validation.jsonl", "test.jsonl"];

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parts(&self) -> [&[LabeledPair]; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SteerError::io(dir.display().to_string(), e))?;
        for (name, part) in SPLIT_FILES.iter().zip(self.parts()) {
            let path = dir.join(name);
            let f = std::fs::File::create(&path)
                .map_err(|e| SteerError::io(path.display().to_string(), e))?;
            write_pairs(std::io::BufWriter::new(f), part)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path, split_seed: u64) -> Result<Self> {
        let mut parts = SPLIT_FILES.iter().map(|name| read_pairs_file(&dir.join(name)));
        Ok(Self {
            train: parts.next().expect("three files")?,
            validation: parts.next().expect("three files")?,
            test: parts.next().expect("three files")?,
            split_seed,
        })
    }
}

/// Split sizes for `n` items: 80/10/10 with rounding, remainder to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Balances classes 1:1 by seeded downsampling of the larger one, shuffles,
/// then splits 80/10/10.
pub fn build_dataset(
    positives: Vec<LabeledPair>,
    negatives: Vec<LabeledPair>,
    seed: u64,
) -> Result<DatasetSplits> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(SteerError::Config(format!(
            "cannot balance {} positives against {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let mut rng = seeds::rng(seed, seeds::stream::SAMPLE);
    let n = positives.len().min(negatives.len());
    let mut downsample = |v: Vec<LabeledPair>| -> Vec<LabeledPair> {
        if v.len() == n {
            return v;
        }
        let mut keep = index::sample(&mut rng, v.len(), n).into_vec();
        keep.sort_unstable();
        let mut slots: Vec<Option<LabeledPair>> = v.into_iter().map(Some).collect();
        keep.into_iter().map(|i| slots[i].take().expect("distinct")).collect()
    };
    let mut all = downsample(positives);
    all.extend(downsample(negatives));
    all.shuffle(&mut rng);

    let (n_train, n_val, _) = split_sizes(all.len());
    let test = all.split_off(n_train + n_val);
    let validation = all.split_off(n_train);
    Ok(DatasetSplits {
        train: all,
        validation,
        test,
        split_seed: seed,
    })
}

pub fn write_pairs(mut writer: impl Write, pairs: &[LabeledPair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Strict reader: any malformed line is an error naming its line number.
pub fn read_pairs(reader: impl BufRead) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SteerError::io(format!("reading pair line {}", i + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: LabeledPair = serde_json::from_str(&line)
            .map_err(|e| SteerError::Format(format!("line {}: {e}", i + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

pub fn read_pairs_file(path: &Path) -> Result<Vec<LabeledPair>> {
    let f = std::fs::File::open(path).map_err(|e| SteerError::io(path.display().to_string(), e))?;
    read_pairs(std::io::BufReader::new(f))
}
