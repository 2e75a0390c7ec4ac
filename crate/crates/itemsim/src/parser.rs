//! Parses raw generated documents (the `Qn` / `Question:` / `A)`–`D)` /
//! `Answer:` text layout) into validated pending items.
//!
//! Parsing is total: malformed blocks land in `rejected_blocks` with a
//! reason, never abort the document. Every repair the parser performs
//! (stripping decorative emphasis, dropping an answer restatement) is
//! logged as a warning.

use std::path::PathBuf;

use crate::corpus::{
    make_item_id, AnswerOption, CorpusError, EpaTopic, Item, ItemBank, Provenance, OPTION_LABELS,
};

/// A parsed block that has passed item validation but has no provenance yet.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingItem {
    /// The integer from the block's `Qn` marker.
    pub number: u32,
    pub topic: EpaTopic,
    pub stem: String,
    pub options: Vec<AnswerOption>,
    pub answer_key: char,
    pub raw_text: String,
}

impl PendingItem {
    /// Attaches provenance and an id, producing a bank-ready item.
    pub fn into_item(self, run_id: &str, provenance: Provenance) -> Result<Item, CorpusError> {
        let id = make_item_id(
            run_id,
            &provenance.provider_id,
            provenance.strategy,
            &self.topic,
            self.number,
        );
        Item::new(
            id,
            self.stem,
            self.options,
            self.answer_key,
            self.topic,
            provenance,
            self.raw_text,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseWarning {
    /// 1-based line number in the source document.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedBlock {
    pub text: String,
    pub reason: String,
}

/// Outcome of parsing one document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    pub items: Vec<PendingItem>,
    pub warnings: Vec<ParseWarning>,
    pub rejected_blocks: Vec<RejectedBlock>,
}

impl ParseReport {
    fn new() -> Self {
        Self::default()
    }
}

/// Matches a block marker line: `Q` followed by an integer, alone on the
/// line, with optional surrounding whitespace.
fn block_marker(line: &str) -> Option<u32> {
    let s = line.trim();
    let rest = s.strip_prefix('Q')?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

fn strip_stars(s: &str) -> (&str, bool) {
    let stripped = s.trim_start_matches('*');
    (stripped, stripped.len() != s.len())
}

/// Recognizes `A)`-style option lines, tolerating a leading `- ` bullet and
/// decorative `*` runs around the label. Returns (label, text, emphasized).
fn parse_option_line(line: &str) -> Option<(char, String, bool)> {
    let mut s = line.trim_start();
    if let Some(rest) = s.strip_prefix('-') {
        s = rest.trim_start();
    }
    let (mut s, mut emphasized) = strip_stars(s);
    let label = s.chars().next()?;
    if !OPTION_LABELS.contains(&label) {
        return None;
    }
    s = &s[label.len_utf8()..];
    let (s, emph2) = strip_stars(s);
    emphasized |= emph2;
    let s = s.strip_prefix(')')?;
    Some((label, s.trim().to_string(), emphasized))
}

/// Recognizes an `Answer:` line (emphasis tolerated) and extracts the first
/// standalone A–D letter after the marker. Returns
/// (key if found, emphasis seen, restatement text followed the key).
fn parse_answer_line(line: &str) -> Option<(Option<char>, bool, bool)> {
    let s = line.trim_start();
    let (s, mut emphasized) = strip_stars(s);
    let rest = s.strip_prefix("Answer:")?;
    let (rest, emph2) = strip_stars(rest.trim_start());
    emphasized |= emph2;
    let mut key = None;
    let mut restated = false;
    for token in rest.split(|c: char| !c.is_ascii_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        match key {
            None => {
                let ch = token.chars().next().unwrap();
                if token.len() == 1 && OPTION_LABELS.contains(&ch) {
                    key = Some(ch);
                } else {
                    // Prose before any key letter counts as restatement text.
                    restated = true;
                }
            }
            Some(_) => {
                restated = true;
                break;
            }
        }
    }
    if rest.contains('*') {
        emphasized = true;
    }
    Some((key, emphasized, restated))
}

fn question_marker(line: &str) -> Option<&str> {
    let s = line.trim_start();
    let (s, _) = strip_stars(s);
    s.strip_prefix("Question:")
}

#[derive(Debug, PartialEq)]
enum Section {
    Preamble,
    Stem,
    Options,
    Answer,
}

struct RawBlock {
    number: u32,
    /// 1-based line numbers paired with line text, marker line included.
    lines: Vec<(usize, String)>,
}

impl RawBlock {
    fn text(&self) -> String {
        let mut joined = self
            .lines
            .iter()
            .map(|(_, l)| l.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        joined.truncate(joined.trim_end().len());
        joined
    }
}

/// Splits a document at `Qn` markers and parses each block. Content before
/// the first marker (headings, export preamble) is ignored.
pub fn parse_document(text: &str, topic: &EpaTopic) -> ParseReport {
    let mut report = ParseReport::new();
    let mut blocks: Vec<RawBlock> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if let Some(number) = block_marker(line) {
            blocks.push(RawBlock {
                number,
                lines: vec![(idx + 1, line.to_string())],
            });
        } else if let Some(block) = blocks.last_mut() {
            block.lines.push((idx + 1, line.to_string()));
        }
    }
    for block in &blocks {
        parse_block(block, topic, &mut report);
    }
    report
}

fn parse_block(block: &RawBlock, topic: &EpaTopic, report: &mut ParseReport) {
    let raw_text = block.text();
    let reject = |report: &mut ParseReport, reason: String| {
        report.rejected_blocks.push(RejectedBlock {
            text: raw_text.clone(),
            reason,
        });
    };

    let mut section = Section::Preamble;
    let mut stem_parts: Vec<String> = Vec::new();
    let mut options: Vec<(char, String)> = Vec::new();
    let mut answer: Option<(Option<char>, bool, bool)> = None;
    let mut answer_line = 0usize;
    let mut warnings: Vec<ParseWarning> = Vec::new();

    for (lineno, line) in block.lines.iter().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = question_marker(line) {
            section = Section::Stem;
            let rest = rest.trim();
            if !rest.is_empty() {
                stem_parts.push(rest.to_string());
            }
            continue;
        }
        if section != Section::Answer {
            if let Some((key, emphasized, restated)) = parse_answer_line(line) {
                if emphasized {
                    warnings.push(ParseWarning {
                        line: *lineno,
                        message: "stripped emphasis markers from answer line".into(),
                    });
                }
                if restated {
                    warnings.push(ParseWarning {
                        line: *lineno,
                        message: "ignored restatement text after answer key".into(),
                    });
                }
                answer = Some((key, emphasized, restated));
                answer_line = *lineno;
                section = Section::Answer;
                continue;
            }
        }
        if let Some((label, text, emphasized)) = parse_option_line(line) {
            if emphasized {
                warnings.push(ParseWarning {
                    line: *lineno,
                    message: format!("stripped emphasis markers from option label {label}"),
                });
            }
            options.push((label, text));
            section = Section::Options;
            continue;
        }
        match section {
            Section::Preamble => {
                warnings.push(ParseWarning {
                    line: *lineno,
                    message: "ignored content before Question: marker".into(),
                });
            }
            Section::Stem => stem_parts.push(line.trim().to_string()),
            Section::Options => {
                if let Some((_, text)) = options.last_mut() {
                    text.push(' ');
                    text.push_str(line.trim());
                }
            }
            Section::Answer => {
                warnings.push(ParseWarning {
                    line: *lineno,
                    message: "ignored content after answer line".into(),
                });
            }
        }
    }

    if stem_parts.is_empty() {
        reject(report, "missing Question: line".into());
        return;
    }
    if options.len() != 4 {
        reject(
            report,
            format!("expected 4 options, found {}", options.len()),
        );
        return;
    }
    for ((label, text), expected) in options.iter().zip(OPTION_LABELS) {
        if *label != expected {
            reject(
                report,
                format!("option labels out of order: expected {expected}, found {label}"),
            );
            return;
        }
        if text.trim().is_empty() {
            reject(report, format!("empty text for option {label}"));
            return;
        }
    }
    let Some((key, _, _)) = answer else {
        reject(report, "missing Answer: line".into());
        return;
    };
    let Some(key) = key else {
        reject(
            report,
            format!("no answer key letter found on line {answer_line}"),
        );
        return;
    };

    report.items.push(PendingItem {
        number: block.number,
        topic: topic.clone(),
        stem: stem_parts.join(" "),
        options: options
            .into_iter()
            .map(|(label, text)| AnswerOption { label, text })
            .collect(),
        answer_key: key,
        raw_text,
    });
    report.warnings.append(&mut warnings);
}

/// Renders an item block in the canonical layout the parser accepts.
///
/// `parse_document` on the rendered text reproduces the block exactly.
pub fn render_block(number: u32, stem: &str, options: &[AnswerOption], answer_key: char) -> String {
    let mut out = format!("Q{number}\nQuestion: {stem}\n");
    for opt in options {
        out.push_str(&format!("{}) {}\n", opt.label, opt.text));
    }
    out.push_str(&format!("\nAnswer: {answer_key}"));
    out
}

/// Renders a full item back to the canonical block layout. The question
/// number is recovered from the trailing `/Qn` of the item id.
pub fn render_item(item: &Item) -> String {
    let number = item
        .id
        .rsplit('/')
        .next()
        .and_then(|tail| tail.strip_prefix('Q'))
        .and_then(|n| n.parse().ok())
        .unwrap_or(1);
    render_block(number, &item.stem, &item.options, item.answer_key)
}

/// One input file for bank assembly: where it is, what topic its items
/// cover, and the provenance to stamp on them.
#[derive(Debug, Clone)]
pub struct BankSource {
    pub path: PathBuf,
    pub topic: EpaTopic,
    pub provenance: Provenance,
}

/// Outcome of assembling a bank from many files. Per-file I/O failures are
/// collected, never fatal for the other files.
#[derive(Debug, Default)]
pub struct BankBuild {
    pub bank: ItemBank,
    pub file_errors: Vec<(PathBuf, String)>,
    pub warnings: Vec<(PathBuf, ParseWarning)>,
    pub rejected: Vec<(PathBuf, RejectedBlock)>,
}

impl BankBuild {
    /// Total count of conditions a caller may want to surface (warnings,
    /// rejected blocks, unreadable files).
    pub fn issue_count(&self) -> usize {
        self.file_errors.len() + self.warnings.len() + self.rejected.len()
    }
}

/// Parses every source file and assembles the items into one bank, with
/// ids assigned from each source's provenance.
pub fn parse_bank(sources: &[BankSource]) -> BankBuild {
    let mut build = BankBuild::default();
    for source in sources {
        let text = match std::fs::read_to_string(&source.path) {
            Ok(text) => text,
            Err(err) => {
                build
                    .file_errors
                    .push((source.path.clone(), err.to_string()));
                continue;
            }
        };
        let report = parse_document(&text, &source.topic);
        for warning in report.warnings {
            build.warnings.push((source.path.clone(), warning));
        }
        for rejected in report.rejected_blocks {
            build.rejected.push((source.path.clone(), rejected));
        }
        for pending in report.items {
            match pending.into_item(&source.provenance.run_id, source.provenance.clone()) {
                Ok(item) => {
                    if let Err(err) = build.bank.insert(item) {
                        build.file_errors.push((source.path.clone(), err.to_string()));
                    }
                }
                Err(err) => {
                    build.file_errors.push((source.path.clone(), err.to_string()));
                }
            }
        }
    }
    build
}
