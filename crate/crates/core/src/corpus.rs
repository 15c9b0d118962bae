//! Synthetic conversation logs and JSONL log ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use steer_nn::par;

use crate::error::{Result, SteerError};
use crate::sampler::{is_word_prefix, normalize};
use crate::seeds;
use crate::spt;

/// One logged utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub conversation_id: String,
    pub turn_index: u64,
    pub timestamp_ms: i64,
    pub text: String,
    pub domain: String,
    #[serde(rename = "spt", default)]
    pub spt_source: Option<String>,
}

/// A piece of a request template. A reiteration may be cut right before any
/// segment with positive `cut` weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    /// Parse-tree lines contributed by this segment, relative to the root.
    #[serde(default)]
    pub spt: Vec<String>,
    #[serde(default)]
    pub cut: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub domain: String,
    pub intent: String,
    pub segments: Vec<Segment>,
}

impl Template {
    fn cut_weights(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.segments
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, s)| s.cut > 0.0)
            .map(|(i, s)| (i, s.cut))
    }

    pub fn is_cuttable(&self) -> bool {
        self.cut_weights().next().is_some()
    }

    fn slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for seg in &self.segments {
            for s in std::iter::once(&seg.text).chain(&seg.spt) {
                let mut rest = s.as_str();
                while let Some(open) = rest.find('{') {
                    let Some(close) = rest[open..].find('}') else {
                        break;
                    };
                    out.insert(rest[open + 1..open + close].to_string());
                    rest = &rest[open + close + 1..];
                }
            }
        }
        out
    }
}

/// Templates plus the entity lexicons their `{slot}`s draw from. A slot name
/// with trailing digits (`city2`) draws from the lexicon without them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateLibrary {
    pub lexicons: BTreeMap<String, Vec<String>>,
    pub templates: Vec<Template>,
}

const DEFAULT_LIBRARY: &str = include_str!("../data/templates.json");

impl TemplateLibrary {
    /// The bundled library: 16 assistant domains, each with entity slots.
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_LIBRARY).expect("bundled template library is valid JSON")
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.templates.iter().map(|t| t.domain.as_str()).collect()
    }

    fn lexicon(&self, slot: &str) -> Option<&Vec<String>> {
        self.lexicons
            .get(slot)
            .or_else(|| self.lexicons.get(slot.trim_end_matches(|c: char| c.is_ascii_digit())))
    }

    fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(SteerError::Config("template set is empty".into()));
        }
        for t in &self.templates {
            let name = format!("{}/{}", t.domain, t.intent);
            if t.segments.is_empty() || t.segments.iter().any(|s| s.text.trim().is_empty()) {
                return Err(SteerError::Config(format!("template {name} has an empty segment")));
            }
            if t.segments.iter().any(|s| !(s.cut.is_finite() && s.cut >= 0.0)) {
                return Err(SteerError::Config(format!("template {name} has a bad cut weight")));
            }
            for slot in t.slots() {
                match self.lexicon(&slot) {
                    Some(v) if !v.is_empty() => {}
                    _ => {
                        return Err(SteerError::Config(format!(
                            "template {name} uses slot `{slot}` with no lexicon"
                        )))
                    }
                }
            }
            let mut values = BTreeMap::new();
            for slot in t.slots() {
                values.insert(slot.clone(), self.lexicon(&slot).expect("checked")[0].clone());
            }
            let src = render_spt(t, t.segments.len(), &values);
            spt::parse(&src).map_err(|e| {
                SteerError::Config(format!("template {name} renders an invalid parse tree: {e}"))
            })?;
        }
        Ok(())
    }
}

/// Log-normal gap, in milliseconds, truncated to `[0, cap_ms]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapDistribution {
    pub median_ms: f64,
    pub sigma: f64,
    pub cap_ms: i64,
}

impl GapDistribution {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.median_ms > 0.0 && self.median_ms.is_finite())
            || !(self.sigma >= 0.0 && self.sigma.is_finite())
            || self.cap_ms <= 0
        {
            return Err(SteerError::Config(format!("invalid {what} gap distribution")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> i64 {
        let d = LogNormal::new(self.median_ms.ln(), self.sigma).expect("validated");
        let v: f64 = d.sample(rng);
        (v.round() as i64).clamp(0, self.cap_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub library: TemplateLibrary,
    pub conversations: usize,
    pub turns_per_conversation: TurnRange,
    pub reiteration_probability: f64,
    /// Chance that an independent turn is replaced by a bare continuation
    /// fragment that is not a reiteration (unlabeled steering noise).
    pub steering_noise_probability: f64,
    pub gap: GapDistribution,
    pub reiteration_gap: GapDistribution,
    pub start_ms: i64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            library: TemplateLibrary::builtin(),
            conversations: 1000,
            turns_per_conversation: TurnRange { min: 2, max: 8 },
            reiteration_probability: 0.3,
            steering_noise_probability: 0.0,
            gap: GapDistribution {
                median_ms: 4_000.0,
                sigma: 1.5,
                cap_ms: 120_000,
            },
            reiteration_gap: GapDistribution {
                median_ms: 4_000.0,
                sigma: 1.0,
                cap_ms: 30_000,
            },
            start_ms: 1_700_000_000_000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conversations == 0 {
            return Err(SteerError::Config("zero conversations requested".into()));
        }
        for (name, p) in [
            ("reiteration_probability", self.reiteration_probability),
            ("steering_noise_probability", self.steering_noise_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SteerError::Config(format!("{name} {p} is outside [0, 1]")));
            }
        }
        let r = self.turns_per_conversation;
        if r.min == 0 || r.max < r.min {
            return Err(SteerError::Config(format!(
                "turns per conversation range {}..={} is invalid",
                r.min, r.max
            )));
        }
        self.gap.validate("inter-turn")?;
        self.reiteration_gap.validate("reiteration")?;
        self.library.validate()?;
        if self.reiteration_probability > 0.0 && !self.library.templates.iter().any(Template::is_cuttable) {
            return Err(SteerError::Config(
                "reiterations requested but no template has a cut point".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedLogs {
    pub turns: Vec<Turn>,
    /// Reiteration pairs the generator planted.
    pub reiterations: usize,
    pub noise_turns: usize,
}

/// Deterministic in `config` (including its seed). Conversations are
/// generated independently, each from a seed derived from its id.
pub fn generate_logs(config: &GeneratorConfig) -> Result<GeneratedLogs> {
    config.validate()?;
    let cuttable: Vec<&Template> = config
        .library
        .templates
        .iter()
        .filter(|t| t.is_cuttable())
        .collect();
    let per_conv = par::map_range(config.conversations, |i| {
        let id = format!("conv-{i:06}");
        let mut rng = seeds::rng(config.seed ^ seeds::hash_str(&id), seeds::stream::CORPUS);
        ConversationWriter::new(config, &cuttable, id).run(&mut rng)
    });
    let mut out = GeneratedLogs {
        turns: Vec::new(),
        reiterations: 0,
        noise_turns: 0,
    };
    for (turns, reiterations, noise) in per_conv {
        out.turns.extend(turns);
        out.reiterations += reiterations;
        out.noise_turns += noise;
    }
    Ok(out)
}

struct Instance {
    text: String,
    spt: String,
    domain: String,
}

const MAX_RESAMPLES: usize = 64;
const DAY_MS: i64 = 86_400_000;

struct ConversationWriter<'a> {
    config: &'a GeneratorConfig,
    cuttable: &'a [&'a Template],
    id: String,
    turns: Vec<Turn>,
    clock: i64,
    reiterations: usize,
    noise: usize,
}

impl<'a> ConversationWriter<'a> {
    fn new(config: &'a GeneratorConfig, cuttable: &'a [&'a Template], id: String) -> Self {
        Self {
            config,
            cuttable,
            id,
            turns: Vec::new(),
            clock: 0,
            reiterations: 0,
            noise: 0,
        }
    }

    fn run(mut self, rng: &mut ChaCha8Rng) -> (Vec<Turn>, usize, usize) {
        let range = self.config.turns_per_conversation;
        let target = rng.random_range(range.min..=range.max);
        self.clock = self.config.start_ms + rng.random_range(0..30 * DAY_MS);
        while self.turns.len() < target {
            let room_for_pair = target - self.turns.len() >= 2;
            if room_for_pair && rng.random_bool(self.config.reiteration_probability) {
                self.reiteration(rng);
            } else if rng.random_bool(self.config.steering_noise_probability) && !self.cuttable.is_empty() {
                self.noise_turn(rng);
            } else {
                self.independent(rng);
            }
        }
        (self.turns, self.reiterations, self.noise)
    }

    /// Whether a turn with `text` right after the current last turn would
    /// look like a reiteration of it, at any gap.
    fn extends_previous(&self, text: &str) -> bool {
        self.turns
            .last()
            .is_some_and(|prev| is_word_prefix(&normalize(&prev.text), &normalize(text)).is_some())
    }

    fn push(&mut self, inst: Instance, gap: i64) {
        if !self.turns.is_empty() {
            self.clock += gap;
        }
        let turn_index = self.turns.len() as u64;
        self.turns.push(Turn {
            conversation_id: self.id.clone(),
            turn_index,
            timestamp_ms: self.clock,
            text: inst.text,
            domain: inst.domain,
            spt_source: Some(inst.spt),
        });
    }

    fn independent(&mut self, rng: &mut ChaCha8Rng) {
        let lib = &self.config.library;
        let mut inst = None;
        for _ in 0..MAX_RESAMPLES {
            let t = lib.templates.choose(rng).expect("validated non-empty");
            let cand = instantiate(lib, t, t.segments.len(), rng);
            if !self.extends_previous(&cand.text) {
                inst = Some(cand);
                break;
            }
        }
        let gap = self.config.gap.sample(rng);
        match inst {
            Some(i) => self.push(i, gap),
            // Tiny libraries: fall back to a gap outside any plausible window.
            None => {
                let t = lib.templates.choose(rng).expect("validated non-empty");
                let i = instantiate(lib, t, t.segments.len(), rng);
                self.push(i, self.config.gap.cap_ms.max(self.config.reiteration_gap.cap_ms) + 1);
            }
        }
    }

    fn reiteration(&mut self, rng: &mut ChaCha8Rng) {
        let lib = &self.config.library;
        for _ in 0..MAX_RESAMPLES {
            let t = *self.cuttable.choose(rng).expect("checked non-empty");
            let cut = choose_cut(t, rng);
            let values = fill_slots(lib, t, rng);
            let prefix = render(t, cut, &values);
            if self.extends_previous(&prefix.text) {
                continue;
            }
            let full = render(t, t.segments.len(), &values);
            let gap = self.config.gap.sample(rng);
            self.push(prefix, gap);
            let gap = self.config.reiteration_gap.sample(rng);
            self.push(full, gap);
            self.reiterations += 1;
            return;
        }
        self.independent(rng);
    }

    /// A trailing fragment of some cuttable template, on its own.
    fn noise_turn(&mut self, rng: &mut ChaCha8Rng) {
        let lib = &self.config.library;
        let t = *self.cuttable.choose(rng).expect("checked non-empty");
        let cut = choose_cut(t, rng);
        let values = fill_slots(lib, t, rng);
        let text = t.segments[cut..]
            .iter()
            .map(|s| substitute(&s.text, &values))
            .collect::<Vec<_>>()
            .join(" ");
        if self.extends_previous(&text) {
            self.independent(rng);
            return;
        }
        let inst = Instance {
            text,
            spt: t.intent.clone(),
            domain: t.domain.clone(),
        };
        let gap = self.config.gap.sample(rng);
        self.push(inst, gap);
        self.noise += 1;
    }
}

fn choose_cut(t: &Template, rng: &mut impl Rng) -> usize {
    let weights: Vec<(usize, f64)> = t.cut_weights().collect();
    weights
        .choose_weighted(rng, |&(_, w)| w)
        .expect("cuttable template has positive weights")
        .0
}

fn fill_slots(lib: &TemplateLibrary, t: &Template, rng: &mut impl Rng) -> BTreeMap<String, String> {
    t.slots()
        .into_iter()
        .map(|slot| {
            let v = lib.lexicon(&slot).and_then(|l| l.choose(rng)).cloned().unwrap_or_default();
            (slot, v)
        })
        .collect()
}

fn instantiate(lib: &TemplateLibrary, t: &Template, upto: usize, rng: &mut impl Rng) -> Instance {
    let values = fill_slots(lib, t, rng);
    render(t, upto, &values)
}

fn substitute(s: &str, values: &BTreeMap<String, String>) -> String {
    let mut out = s.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn render(t: &Template, upto: usize, values: &BTreeMap<String, String>) -> Instance {
    let text = t.segments[..upto]
        .iter()
        .map(|s| substitute(&s.text, values))
        .collect::<Vec<_>>()
        .join(" ");
    Instance {
        text,
        spt: render_spt(t, upto, values),
        domain: t.domain.clone(),
    }
}

/// Parse tree of the first `upto` segments: the intent head plus each
/// segment's lines, one level down.
fn render_spt(t: &Template, upto: usize, values: &BTreeMap<String, String>) -> String {
    let mut out = t.intent.clone();
    for seg in &t.segments[..upto] {
        for line in &seg.spt {
            out.push('\n');
            out.push_str(&" ".repeat(spt::DEFAULT_INDENT));
            out.push_str(&substitute(line, values));
        }
    }
    out
}

/// Outcome of reading a JSONL log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub turns: Vec<Turn>,
    pub skipped: usize,
    /// Conversations whose lines arrived out of turn order.
    pub reordered: usize,
    pub warnings: Vec<String>,
}

const MAX_WARNINGS: usize = 100;

impl IngestReport {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        if self.warnings.len() < MAX_WARNINGS {
            self.warnings.push(msg);
        }
    }
}

/// Reads one turn per line, skipping (and tallying) lines that are not valid
/// turns. Output is grouped by conversation id and sorted by turn index.
pub fn ingest_logs(reader: impl BufRead) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut convs: BTreeMap<String, Vec<Turn>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SteerError::io(format!("reading log line {}", i + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Turn>(&line) {
            Ok(t) if normalize(&t.text).is_empty() => {
                report.skipped += 1;
                report.warn(format!("line {}: empty text", i + 1));
            }
            Ok(t) => convs.entry(t.conversation_id.clone()).or_default().push(t),
            Err(e) => {
                report.skipped += 1;
                report.warn(format!("line {}: {e}", i + 1));
            }
        }
    }
    for (id, mut turns) in convs {
        if turns.windows(2).any(|w| w[0].turn_index >= w[1].turn_index) {
            report.reordered += 1;
            report.warn(format!("conversation {id}: turns re-sorted by turn_index"));
            turns.sort_by_key(|t| t.turn_index);
        }
        let mut kept: Vec<Turn> = Vec::with_capacity(turns.len());
        for t in turns {
            let bad = kept.last().and_then(|p| {
                if p.turn_index == t.turn_index {
                    Some("duplicate turn_index")
                } else if p.timestamp_ms > t.timestamp_ms {
                    Some("timestamp earlier than the previous turn")
                } else {
                    None
                }
            });
            match bad {
                Some(why) => {
                    report.skipped += 1;
                    report.warn(format!("conversation {id}, turn {}: {why}", t.turn_index));
                }
                None => kept.push(t),
            }
        }
        report.turns.extend(kept);
    }
    Ok(report)
}

pub fn write_logs(mut writer: impl Write, turns: &[Turn]) -> Result<()> {
    for t in turns {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
