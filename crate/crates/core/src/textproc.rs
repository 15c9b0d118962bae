//! Word tokenization, token vocabularies and a lexicon-driven POS tagger.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};

/// Lowercases, drops punctuation (apostrophes survive only between letters
/// or digits) and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lowered: Vec<char> = chunk
            .chars()
            .flat_map(char::to_lowercase)
            .map(|c| if c == '\u{2019}' { '\'' } else { c })
            .filter(|c| c.is_alphanumeric() || *c == '\'')
            .collect();
        let mut token = String::with_capacity(lowered.len());
        for (i, &c) in lowered.iter().enumerate() {
            if c == '\'' {
                let inner = i > 0
                    && i + 1 < lowered.len()
                    && lowered[i - 1].is_alphanumeric()
                    && lowered[i + 1].is_alphanumeric();
                if !inner {
                    continue;
                }
            }
            token.push(c);
        }
        if !token.is_empty() {
            out.push(token);
        }
    }
    out
}

/// Number of words in `text` under [`tokenize`].
pub fn word_count(text: &str) -> usize {
    tokenize(text).len()
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "[PAD]";
const UNK_TOKEN: &str = "[UNK]";

/// Word-level vocabulary with reserved padding and unknown ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenVocabFile {
    min_count: usize,
    tokens: BTreeMap<String, usize>,
}

impl TokenVocab {
    /// Builds a vocabulary over every token seen at least `min_count` times.
    /// Ids follow descending frequency, ties broken alphabetically.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_count == 0 {
            return Err(SteerError::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpus {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            ids,
            tokens,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Total: unknown tokens map to [`UNK_ID`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenVocabFile {
            min_count: self.min_count,
            tokens: self.ids.iter().map(|(t, &i)| (t.clone(), i)).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenVocabFile = serde_json::from_str(json)?;
        let n = file.tokens.len();
        let mut tokens = vec![String::new(); n];
        for (t, &i) in &file.tokens {
            if i >= n || !tokens[i].is_empty() {
                return Err(SteerError::Format(format!(
                    "token vocabulary ids are not a permutation of 0..{n} (at `{t}`)"
                )));
            }
            tokens[i] = t.clone();
        }
        if tokens.get(PAD_ID).map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(UNK_ID).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(SteerError::Format(
                "token vocabulary is missing reserved ids".into(),
            ));
        }
        Ok(Self {
            ids: file.tokens.into_iter().collect(),
            tokens,
            min_count: file.min_count,
        })
    }
}

/// Closed Penn-style tag subset used for boundary analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    NN,
    NNS,
    NNP,
    IN,
    DT,
    VB,
    VBZ,
    VBG,
    CD,
    JJ,
    RB,
    PRP,
    CC,
    TO,
    UH,
}

impl PosTag {
    pub const ALL: [PosTag; 15] = [
        PosTag::NN,
        PosTag::NNS,
        PosTag::NNP,
        PosTag::IN,
        PosTag::DT,
        PosTag::VB,
        PosTag::VBZ,
        PosTag::VBG,
        PosTag::CD,
        PosTag::JJ,
        PosTag::RB,
        PosTag::PRP,
        PosTag::CC,
        PosTag::TO,
        PosTag::UH,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::NN => "NN",
            PosTag::NNS => "NNS",
            PosTag::NNP => "NNP",
            PosTag::IN => "IN",
            PosTag::DT => "DT",
            PosTag::VB => "VB",
            PosTag::VBZ => "VBZ",
            PosTag::VBG => "VBG",
            PosTag::CD => "CD",
            PosTag::JJ => "JJ",
            PosTag::RB => "RB",
            PosTag::PRP => "PRP",
            PosTag::CC => "CC",
            PosTag::TO => "TO",
            PosTag::UH => "UH",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const DEFAULT_LEXICON: &str = include_str!("../data/pos_lexicon.tsv");

/// Tags a token by lexicon lookup, then the numeral rule, then suffix rules,
/// falling back to `default_tag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosLexicon {
    pub entries: BTreeMap<String, PosTag>,
    pub suffix_rules: Vec<(String, PosTag)>,
    pub default_tag: PosTag,
}

impl PosLexicon {
    /// The bundled English lexicon (about 1,700 high-frequency words).
    pub fn english() -> Self {
        let entries = DEFAULT_LEXICON
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| {
                let (word, tag) = l.split_once('\t')?;
                Some((word.to_string(), PosTag::parse(tag.trim())?))
            })
            .collect();
        let suffix_rules = [
            ("ness", PosTag::NN),
            ("ment", PosTag::NN),
            ("tion", PosTag::NN),
            ("sion", PosTag::NN),
            ("ity", PosTag::NN),
            ("less", PosTag::JJ),
            ("able", PosTag::JJ),
            ("ible", PosTag::JJ),
            ("ous", PosTag::JJ),
            ("ful", PosTag::JJ),
            ("ive", PosTag::JJ),
            ("ing", PosTag::VBG),
            ("ly", PosTag::RB),
            ("ed", PosTag::VB),
        ]
        .into_iter()
        .map(|(s, t)| (s.to_string(), t))
        .collect();
        Self {
            entries,
            suffix_rules,
            default_tag: PosTag::NN,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tag(&self, token: &str) -> PosTag {
        if let Some(&t) = self.entries.get(token) {
            return t;
        }
        if is_numeral(token) {
            return PosTag::CD;
        }
        let chars = token.chars().count();
        for (suffix, tag) in &self.suffix_rules {
            if chars > suffix.chars().count() + 2 && token.ends_with(suffix.as_str()) {
                return *tag;
            }
        }
        // Plural nouns: "-s" but not "-ss"/"-us"/"-is".
        if chars > 3
            && token.ends_with('s')
            && !token.ends_with("ss")
            && !token.ends_with("us")
            && !token.ends_with("is")
        {
            return PosTag::NNS;
        }
        self.default_tag
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

impl Default for PosLexicon {
    fn default() -> Self {
        Self::english()
    }
}

/// Digits, optionally followed by an ordinal suffix ("7", "21st", "3rd").
fn is_numeral(token: &str) -> bool {
    let digits = token.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return false;
    }
    let rest = &token[digits..];
    rest.is_empty() || matches!(rest, "st" | "nd" | "rd" | "th" | "s")
}

/// One tag per token, deterministic.
pub fn pos_tag<S: AsRef<str>>(tokens: &[S], lexicon: &PosLexicon) -> Vec<PosTag> {
    tokens.iter().map(|t| lexicon.tag(t.as_ref())).collect()
}
