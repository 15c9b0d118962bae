//! Semantic parse trees: the indented text format, pre-order linearization
//! into (node, depth, sibling) index triples, and the node vocabulary.
//!
//! ```text
//! create:alarm
//!     .name.Str("bedtime")
//!     .time.Time
//!         .hour.Int(10)
//!         .minute.Int(30)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};

pub const DEFAULT_INDENT: usize = 4;
pub const DEFAULT_CAP: usize = 16;

/// Literal attached to a node. Quoted literals keep their quotes on output.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Payload {
    Str(String),
    Literal(String),
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Str(s) => {
                f.write_char('"')?;
                for c in s.chars() {
                    if c == '"' || c == '\\' {
                        f.write_char('\\')?;
                    }
                    f.write_char(c)?;
                }
                f.write_char('"')
            }
            Payload::Literal(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SptNode {
    pub label: String,
    pub payload: Option<Payload>,
    pub children: Vec<SptNode>,
}

impl SptNode {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            payload: None,
            children: Vec::new(),
        }
    }

    pub fn with_payload(mut self, payload: Payload) -> Self {
        self.payload = Some(payload);
        self
    }

    pub fn with_child(mut self, child: SptNode) -> Self {
        self.children.push(child);
        self
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(SptNode::node_count).sum::<usize>()
    }

    /// Pre-order walk yielding `(node, depth, sibling index)`.
    pub fn preorder(&self) -> Vec<(&SptNode, usize, usize)> {
        let mut out = Vec::with_capacity(self.node_count());
        let mut stack = vec![(self, 0usize, 0usize)];
        while let Some((node, depth, sib)) = stack.pop() {
            out.push((node, depth, sib));
            for (i, c) in node.children.iter().enumerate().rev() {
                stack.push((c, depth + 1, i));
            }
        }
        out
    }
}

impl fmt::Display for SptNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

/// Parses with the default four-space indentation unit.
pub fn parse(text: &str) -> Result<SptNode> {
    parse_with_indent(text, DEFAULT_INDENT)
}

pub fn parse_with_indent(text: &str, indent: usize) -> Result<SptNode> {
    if indent == 0 {
        return Err(SteerError::Config("indent unit must be positive".into()));
    }
    // Open path from the root to the most recent node.
    let mut stack: Vec<SptNode> = Vec::new();
    let mut root_seen = false;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| SteerError::SptParse {
            line: line_no,
            message,
        };
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let body = line.trim_start_matches(' ');
        if body.starts_with('\t') {
            return Err(err("tab in indentation".into()));
        }
        let spaces = line.len() - body.len();
        if spaces % indent != 0 {
            return Err(err(format!(
                "indentation of {spaces} spaces is not a multiple of {indent}"
            )));
        }
        let depth = spaces / indent;
        let node = parse_line(body.trim_end()).map_err(err)?;

        if depth == 0 {
            if root_seen {
                return Err(err("second root node".into()));
            }
            root_seen = true;
            stack.push(node);
            continue;
        }
        if !root_seen {
            return Err(err("indented line before the root".into()));
        }
        if depth > stack.len() {
            return Err(err(format!(
                "line is nested {depth} levels deep but its parent is at level {}",
                stack.len() - 1
            )));
        }
        while stack.len() > depth {
            close_top(&mut stack);
        }
        stack.push(node);
    }
    while stack.len() > 1 {
        close_top(&mut stack);
    }
    stack.pop().ok_or(SteerError::SptParse {
        line: 0,
        message: "empty tree".into(),
    })
}

fn close_top(stack: &mut Vec<SptNode>) {
    let done = stack.pop().expect("non-empty stack");
    stack
        .last_mut()
        .expect("closed node has a parent")
        .children
        .push(done);
}

fn parse_line(body: &str) -> std::result::Result<SptNode, String> {
    let (label, rest) = match body.find(['(', ')']) {
        Some(i) if body.as_bytes()[i] == b')' => return Err("unbalanced ')'".into()),
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    if label.is_empty() {
        return Err("empty node label".into());
    }
    if label.chars().any(char::is_whitespace) {
        return Err(format!("whitespace in node label `{label}`"));
    }
    let payload = match rest {
        None => None,
        Some(rest) => Some(parse_payload(rest)?),
    };
    Ok(SptNode {
        label: label.to_string(),
        payload,
        children: Vec::new(),
    })
}

/// `rest` is everything after the opening parenthesis.
fn parse_payload(rest: &str) -> std::result::Result<Payload, String> {
    if let Some(quoted) = rest.strip_prefix('"') {
        let mut value = String::new();
        let mut chars = quoted.char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => match chars.next() {
                    Some((_, e)) => value.push(e),
                    None => return Err("dangling escape in string literal".into()),
                },
                '"' => {
                    return match &quoted[i + 1..] {
                        ")" => Ok(Payload::Str(value)),
                        "" => Err("unbalanced '(': missing ')'".into()),
                        tail => Err(format!("unexpected `{tail}` after string literal")),
                    };
                }
                c => value.push(c),
            }
        }
        return Err("unterminated string literal".into());
    }
    let Some(close) = rest.find(')') else {
        return Err("unbalanced '(': missing ')'".into());
    };
    let literal = &rest[..close];
    if literal.contains('(') {
        return Err("nested '(' in literal".into());
    }
    if close + 1 != rest.len() {
        return Err(format!("unexpected `{}` after ')'", &rest[close + 1..]));
    }
    if literal.is_empty() {
        return Err("empty literal".into());
    }
    Ok(Payload::Literal(literal.to_string()))
}

/// Inverse of [`parse`]: four-space indentation, LF line endings, no trailing newline.
pub fn serialize(root: &SptNode) -> String {
    let mut out = String::new();
    for (node, depth, _) in root.preorder() {
        if !out.is_empty() {
            out.push('\n');
        }
        for _ in 0..depth * DEFAULT_INDENT {
            out.push(' ');
        }
        out.push_str(&node.label);
        if let Some(p) = &node.payload {
            let _ = write!(out, "({p})");
        }
    }
    out
}

pub const NODE_PAD: usize = 0;
pub const NODE_UNK: usize = 1;
const PAD_LABEL: &str = "[PAD]";
const UNK_LABEL: &str = "[UNK]";

/// Maps payload-free node labels to ids; 0 and 1 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeVocabulary {
    ids: HashMap<String, usize>,
    labels: Vec<String>,
}

impl Default for NodeVocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl NodeVocabulary {
    pub fn new() -> Self {
        let labels = vec![PAD_LABEL.to_string(), UNK_LABEL.to_string()];
        let ids = labels.iter().cloned().zip(0..).collect();
        Self { ids, labels }
    }

    /// Returns the id of `label`, assigning the next free one if unseen.
    pub fn insert(&mut self, label: &str) -> usize {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_string());
        self.ids.insert(label.to_string(), id);
        id
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    /// Frozen lookup: unseen labels map to [`NODE_UNK`].
    pub fn id(&self, label: &str) -> usize {
        self.get(label).unwrap_or(NODE_UNK)
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, usize> = self.ids.iter().map(|(l, &i)| (l.as_str(), i)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(json)?;
        let mut labels = vec![None; map.len()];
        for (label, &id) in &map {
            match labels.get_mut(id) {
                Some(slot @ None) => *slot = Some(label.clone()),
                _ => {
                    return Err(SteerError::Format(format!(
                        "node vocabulary id {id} for `{label}` is out of range or repeated"
                    )))
                }
            }
        }
        let labels: Vec<String> = labels.into_iter().map(Option::unwrap).collect();
        if labels.first().map(String::as_str) != Some(PAD_LABEL)
            || labels.get(1).map(String::as_str) != Some(UNK_LABEL)
        {
            return Err(SteerError::Format(
                "node vocabulary is missing reserved ids".into(),
            ));
        }
        Ok(Self {
            ids: map.into_iter().collect(),
            labels,
        })
    }
}

/// First-seen pre-order id assignment over `trees` in the given order.
pub fn build_node_vocab<'a>(trees: impl IntoIterator<Item = &'a SptNode>) -> NodeVocabulary {
    let mut vocab = NodeVocabulary::new();
    for tree in trees {
        for (node, _, _) in tree.preorder() {
            vocab.insert(&node.label);
        }
    }
    vocab
}

/// Embedding-table sizes for structural indices. Values past a cap clamp to
/// `cap - 1` when `clamp` is set, otherwise they are an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SptCaps {
    pub depth: usize,
    pub sibling: usize,
    pub clamp: bool,
}

impl Default for SptCaps {
    fn default() -> Self {
        Self {
            depth: DEFAULT_CAP,
            sibling: DEFAULT_CAP,
            clamp: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedSpt {
    pub node_ids: Vec<usize>,
    pub depth_ids: Vec<usize>,
    pub sibling_ids: Vec<usize>,
}

impl LinearizedSpt {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

pub fn linearize_encode(
    root: &SptNode,
    vocab: &NodeVocabulary,
    caps: SptCaps,
) -> Result<LinearizedSpt> {
    let walk = root.preorder();
    let mut lin = LinearizedSpt {
        node_ids: Vec::with_capacity(walk.len()),
        depth_ids: Vec::with_capacity(walk.len()),
        sibling_ids: Vec::with_capacity(walk.len()),
    };
    for (node, depth, sib) in walk {
        lin.node_ids.push(vocab.id(&node.label));
        lin.depth_ids.push(cap_index("depth", depth, caps.depth, caps.clamp)?);
        lin.sibling_ids.push(cap_index("sibling", sib, caps.sibling, caps.clamp)?);
    }
    Ok(lin)
}

fn cap_index(what: &str, value: usize, cap: usize, clamp: bool) -> Result<usize> {
    if value < cap {
        return Ok(value);
    }
    if clamp && cap > 0 {
        log::warn!("{what} index {value} clamped to {}", cap - 1);
        Ok(cap - 1)
    } else {
        Err(SteerError::Contract(format!(
            "{what} index {value} exceeds cap {cap}"
        )))
    }
}
