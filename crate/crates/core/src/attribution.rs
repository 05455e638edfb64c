//! Per-token attribution scores and their heatmap rendering.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreRecord {
    pub record_id: u64,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    /// Byte ranges `[start, end)` into `reply`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucinated_spans: Option<Vec<[usize; 2]>>,
}

impl TokenScoreRecord {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.scores.len() {
            return Err(Error::Shape(format!(
                "record {}: {} tokens but {} scores",
                self.record_id,
                self.tokens.len(),
                self.scores.len()
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::invalid(format!(
                "record {}: scores must be finite and non-negative, got {s}",
                self.record_id
            )));
        }
        Ok(())
    }
}

/// Reads one record per non-blank line; errors carry the 1-based line.
pub fn load_token_scores<R: BufRead>(source: R) -> Result<Vec<TokenScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: i + 1, message };
        let rec: TokenScoreRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        rec.validate().map_err(|e| parse(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_token_scores_path(path: impl AsRef<Path>) -> Result<Vec<TokenScoreRecord>> {
    load_token_scores(BufReader::new(File::open(path)?))
}

/// Min-max scales the scores of one record into [0, 1]; a constant record
/// becomes all 0.5.
pub fn normalize_scores(record: &TokenScoreRecord) -> TokenScoreRecord {
    let lo = record.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = record.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scores = record
        .scores
        .iter()
        .map(|&s| if hi > lo { (s - lo) / (hi - lo) } else { 0.5 })
        .collect();
    TokenScoreRecord {
        scores,
        ..record.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapFormat {
    Html,
    Ansi,
}

impl FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "html" => Ok(HeatmapFormat::Html),
            "ansi" => Ok(HeatmapFormat::Ansi),
            _ => Err(Error::invalid(format!("format must be html or ansi, got {s:?}"))),
        }
    }
}

/// Reply spans clipped to the reply, snapped outward to character
/// boundaries, sorted and merged.
fn clean_spans(record: &TokenScoreRecord) -> Vec<(usize, usize)> {
    let Some(raw) = &record.hallucinated_spans else {
        return Vec::new();
    };
    let Some(reply) = &record.reply else {
        if !raw.is_empty() {
            log::warn!("record {}: hallucinated spans without a reply ignored", record.record_id);
        }
        return Vec::new();
    };
    let len = reply.len();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for &[s, e] in raw {
        let (mut a, mut b) = (s.min(len), e.min(len));
        if a > b || e > len {
            log::warn!(
                "record {}: span [{s}, {e}) clamped to the {len}-byte reply",
                record.record_id
            );
            a = a.min(b);
        }
        while !reply.is_char_boundary(a) {
            a -= 1;
        }
        while !reply.is_char_boundary(b) {
            b += 1;
        }
        if a < b {
            spans.push((a, b));
        }
    }
    spans.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (a, b) in spans {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

/// Alternating (text, hallucinated) pieces of the reply.
fn reply_pieces<'a>(reply: &'a str, spans: &[(usize, usize)]) -> Vec<(&'a str, bool)> {
    let mut pieces = Vec::new();
    let mut at = 0;
    for &(a, b) in spans {
        if a > at {
            pieces.push((&reply[at..a], false));
        }
        pieces.push((&reply[a..b], true));
        at = b;
    }
    if at < reply.len() {
        pieces.push((&reply[at..], false));
    }
    pieces
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Control characters shown as their Unicode pictures so they cannot
/// disturb the terminal.
fn printable(s: &str) -> String {
    s.chars()
        .map(|c| match c as u32 {
            0..=0x1f => char::from_u32(0x2400 + c as u32).unwrap_or('?'),
            0x7f => '\u{2421}',
            _ => c,
        })
        .collect()
}

/// White to saturated red in the 256-colour cube.
const ANSI_RAMP: [u8; 6] = [231, 224, 217, 210, 203, 196];

pub fn ansi_color(intensity: f64) -> u8 {
    let i = (intensity.clamp(0.0, 1.0) * (ANSI_RAMP.len() - 1) as f64).round() as usize;
    ANSI_RAMP[i]
}

const HTML_HEAD: &str = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<style>\n\
.record { margin: 1em 0; font-family: monospace; }\n\
.tok { white-space: pre; }\n\
.hallucinated { text-decoration: underline wavy; color: #b91c1c; font-weight: bold; }\n\
</style>\n</head>\n<body>\n";

/// Renders every record, normalizing its scores first.
pub fn render_heatmap(records: &[TokenScoreRecord], format: HeatmapFormat) -> String {
    let mut out = String::new();
    if format == HeatmapFormat::Html {
        out.push_str(HTML_HEAD);
    }
    for record in records {
        let rec = normalize_scores(record);
        let spans = clean_spans(&rec);
        match format {
            HeatmapFormat::Html => {
                let _ = writeln!(out, "<div class=\"record\" data-record-id=\"{}\">", rec.record_id);
                out.push_str("<p class=\"query\">");
                for (tok, s) in rec.tokens.iter().zip(&rec.scores) {
                    let _ = write!(
                        out,
                        "<span class=\"tok\" style=\"background-color: rgba(220, 38, 38, {s:.3})\">{}</span>",
                        escape_html(tok)
                    );
                }
                out.push_str("</p>\n");
                if let Some(reply) = &rec.reply {
                    out.push_str("<p class=\"reply\">");
                    for (text, bad) in reply_pieces(reply, &spans) {
                        if bad {
                            let _ = write!(out, "<span class=\"hallucinated\">{}</span>", escape_html(text));
                        } else {
                            out.push_str(&escape_html(text));
                        }
                    }
                    out.push_str("</p>\n");
                }
                out.push_str("</div>\n");
            }
            HeatmapFormat::Ansi => {
                let _ = writeln!(out, "record {}", rec.record_id);
                for (tok, &s) in rec.tokens.iter().zip(&rec.scores) {
                    let _ = write!(out, "\x1b[38;5;16;48;5;{}m{}\x1b[0m", ansi_color(s), printable(tok));
                }
                out.push('\n');
                if let Some(reply) = &rec.reply {
                    out.push_str("reply: ");
                    for (text, bad) in reply_pieces(reply, &spans) {
                        if bad {
                            let _ = write!(out, "\x1b[4;31m{}\x1b[24;39m", printable(text));
                        } else {
                            out.push_str(&printable(text));
                        }
                    }
                    out.push('\n');
                }
            }
        }
    }
    if format == HeatmapFormat::Html {
        out.push_str("</body>\n</html>\n");
    }
    out
}
