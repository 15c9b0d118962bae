//! Newline-delimited JSON prediction over any byte stream.

use std::io::{self, BufRead, BufReader, Read, Write};

use serde::Deserialize;
use serde_json::json;
use steer_core::model::{encode_inputs, InputSequence, SteerModel, Vocabs};
use steer_core::sampler::{Label, LabeledPair};

#[derive(Deserialize)]
struct Request {
    context: String,
    followup: String,
    #[serde(default)]
    spt: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamStats {
    pub lines: usize,
    pub errors: usize,
}

enum Slot {
    Ready(InputSequence),
    Failed(serde_json::Value),
}

fn parse_line(line: &[u8], model: &SteerModel<f32>, vocabs: &Vocabs) -> Slot {
    let req: Request = match std::str::from_utf8(line).ok().and_then(|s| serde_json::from_str(s).ok()) {
        Some(r) => r,
        None => return Slot::Failed(json!({ "error": "parse" })),
    };
    let pair = LabeledPair {
        context_spt: req.spt,
        ..LabeledPair::new(req.context, req.followup, Label::FollowUp)
    };
    match encode_inputs(&pair, vocabs, model.config()) {
        Ok(x) => Slot::Ready(x),
        Err(e) => Slot::Failed(json!({ "error": "invalid", "message": e.to_string() })),
    }
}

fn flush_batch(
    slots: &mut Vec<Slot>,
    model: &SteerModel<f32>,
    out: &mut impl Write,
    stats: &mut StreamStats,
) -> io::Result<()> {
    let inputs: Vec<InputSequence> = slots
        .iter()
        .filter_map(|s| match s {
            Slot::Ready(x) => Some(x.clone()),
            Slot::Failed(_) => None,
        })
        .collect();
    let preds = if inputs.is_empty() {
        Vec::new()
    } else {
        model
            .predict_inputs(&inputs)
            .map_err(|e| io::Error::other(e.to_string()))?
    };
    let mut preds = preds.into_iter();
    for slot in slots.drain(..) {
        let value = match slot {
            Slot::Ready(_) => {
                let p = preds.next().expect("one prediction per ready slot");
                json!({ "label": p.label.as_str(), "p": p.p_steer })
            }
            Slot::Failed(v) => {
                stats.errors += 1;
                v
            }
        };
        serde_json::to_writer(&mut *out, &value)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads one JSON request per line and writes one JSON result per line, in
/// input order. At most `batch` lines are held in memory at a time. A
/// malformed line yields an error object and processing continues.
///
/// `p` is the model's probability of steering.
pub fn predict_stream(
    model: &SteerModel<f32>,
    vocabs: &Vocabs,
    input: impl Read,
    mut output: impl Write,
    batch: usize,
) -> io::Result<StreamStats> {
    let batch = batch.max(1);
    let mut input = BufReader::new(input);
    let mut stats = StreamStats::default();
    let mut slots = Vec::with_capacity(batch);
    let mut line = Vec::new();
    loop {
        line.clear();
        if input.read_until(b'\n', &mut line)? == 0 {
            break;
        }
        let trimmed = line.strip_suffix(b"\n").unwrap_or(&line);
        let trimmed = trimmed.strip_suffix(b"\r").unwrap_or(trimmed);
        stats.lines += 1;
        slots.push(parse_line(trimmed, model, vocabs));
        // Answer as soon as the reader has nothing more buffered, so an
        // interactive client is not left waiting for a full batch.
        if slots.len() >= batch || input.buffer().is_empty() {
            flush_batch(&mut slots, model, &mut output, &mut stats)?;
        }
    }
    if !slots.is_empty() {
        flush_batch(&mut slots, model, &mut output, &mut stats)?;
    }
    Ok(stats)
}
