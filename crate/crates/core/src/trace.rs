//! Document model and the newline-delimited JSON trace format.
//!
//! A trace line carries one story: its raw text, the subword tokens with
//! per-condition surprisal (bits), the word segmentation, and the
//! sentence/paragraph hierarchy. Everything downstream consumes [`Story`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Context condition under which a surprisal value was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Utterance in isolation.
    U,
    /// Utterance conditioned on its paired image.
    P,
    /// Utterance conditioned on the preceding discourse.
    D,
    /// Preceding discourse with interleaved images plus the current image.
    PD,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::U, Condition::P, Condition::D, Condition::PD];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::U => "U",
            Condition::P => "P",
            Condition::D => "D",
            Condition::PD => "PD",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "U" => Ok(Condition::U),
            "P" => Ok(Condition::P),
            "D" => Ok(Condition::D),
            "PD" | "P+D" => Ok(Condition::PD),
            other => Err(format!("unknown condition `{other}`")),
        }
    }
}

/// Sparse per-condition surprisal values, in bits.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Surprisals([Option<f64>; 4]);

impl Surprisals {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, condition: Condition) -> Option<f64> {
        self.0[condition.slot()]
    }

    pub fn set(&mut self, condition: Condition, value: f64) {
        self.0[condition.slot()] = Some(value);
    }

    pub fn with(mut self, condition: Condition, value: f64) -> Self {
        self.set(condition, value);
        self
    }

    pub fn contains(&self, condition: Condition) -> bool {
        self.get(condition).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }

    /// Present conditions in canonical order (U, P, D, PD).
    pub fn conditions(&self) -> Vec<Condition> {
        self.iter().map(|(c, _)| c).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Condition, f64)> + '_ {
        Condition::ALL
            .iter()
            .filter_map(move |&c| self.get(c).map(|v| (c, v)))
    }
}

impl Serialize for Surprisals {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.iter().count()))?;
        for (c, v) in self.iter() {
            map.serialize_entry(c.as_str(), &v)?;
        }
        map.end()
    }
}

/// Half-open interval of Unicode scalar values into the story text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// The Universal Dependencies part-of-speech inventory.
pub const UD_POS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub span: Span,
    pub surprisal: Surprisals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    /// Slice of the story text covered by `span`.
    pub text: String,
    pub span: Span,
    pub tokens: Range<usize>,
    pub pos: Option<String>,
    /// Word-level surprisal, filled by alignment.
    pub surprisal: Surprisals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub words: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paragraph {
    pub sentences: Range<usize>,
    pub image: Option<String>,
}

/// One document: a multi-paragraph visual story, or a caption (one paragraph).
#[derive(Debug, Clone, PartialEq)]
pub struct Story {
    pub story_id: String,
    pub language: String,
    pub source: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub words: Vec<Word>,
    pub sentences: Vec<Sentence>,
    pub paragraphs: Vec<Paragraph>,
}

impl Story {
    /// Conditions carried by the story's tokens (or words when tokens are absent).
    pub fn conditions(&self) -> Vec<Condition> {
        if let Some(t) = self.tokens.first() {
            t.surprisal.conditions()
        } else if let Some(w) = self.words.first() {
            w.surprisal.conditions()
        } else {
            Vec::new()
        }
    }

    pub fn has_condition(&self, condition: Condition) -> bool {
        self.conditions().contains(&condition)
    }

    /// Word index range covered by paragraph `p`.
    pub fn paragraph_words(&self, p: usize) -> Range<usize> {
        let sents = &self.paragraphs[p].sentences;
        self.sentences[sents.start].words.start..self.sentences[sents.end - 1].words.end
    }

    /// Paragraph index of every sentence.
    pub fn sentence_parents(&self) -> Vec<usize> {
        let mut parents = vec![0; self.sentences.len()];
        for (p, para) in self.paragraphs.iter().enumerate() {
            for s in para.sentences.clone() {
                parents[s] = p;
            }
        }
        parents
    }

    /// Word surprisals for `range` under `condition`, or `None` if any is missing.
    pub fn word_surprisals(&self, range: Range<usize>, condition: Condition) -> Option<Vec<f64>> {
        self.words[range]
            .iter()
            .map(|w| w.surprisal.get(condition))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        validate_story(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("story `{story_id}`: {field}: {message}")]
pub struct ValidationError {
    pub story_id: String,
    pub field: String,
    pub message: String,
}

impl ValidationError {
    fn new(story: &Story, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            story_id: story.story_id.clone(),
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ValidationError,
    },
}

// --- wire format -----------------------------------------------------------

/// Surprisal map as it appears on the wire; keys are checked during validation.
#[derive(Debug, Default)]
struct RawSurprisals(Vec<(String, f64)>);

impl RawSurprisals {
    fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for RawSurprisals {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for RawSurprisals {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MapVisitor;
        impl<'de> Visitor<'de> for MapVisitor {
            type Value = RawSurprisals;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map from condition to surprisal")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, f64>()? {
                    entries.push((k, v));
                }
                Ok(RawSurprisals(entries))
            }
        }
        deserializer.deserialize_map(MapVisitor)
    }
}

impl From<&Surprisals> for RawSurprisals {
    fn from(s: &Surprisals) -> Self {
        RawSurprisals(s.iter().map(|(c, v)| (c.as_str().to_string(), v)).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawToken {
    t: String,
    span: [usize; 2],
    #[serde(default)]
    s: RawSurprisals,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawWord {
    span: [usize; 2],
    tok: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pos: Option<String>,
    #[serde(default, skip_serializing_if = "RawSurprisals::is_empty")]
    s: RawSurprisals,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSentence {
    w: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct RawParagraph {
    s: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawStory {
    story_id: String,
    language: String,
    source: String,
    text: String,
    tokens: Vec<RawToken>,
    #[serde(default)]
    words: Vec<RawWord>,
    #[serde(default)]
    sentences: Vec<RawSentence>,
    #[serde(default)]
    paragraphs: Vec<RawParagraph>,
}

fn convert_surprisals(
    raw: &RawSurprisals,
    story_id: &str,
    field: &str,
) -> Result<Surprisals, ValidationError> {
    let mut out = Surprisals::new();
    for (key, value) in &raw.0 {
        let cond: Condition = key.parse().map_err(|m: String| ValidationError {
            story_id: story_id.to_string(),
            field: field.to_string(),
            message: m,
        })?;
        if out.contains(cond) {
            return Err(ValidationError {
                story_id: story_id.to_string(),
                field: field.to_string(),
                message: format!("duplicate condition `{cond}`"),
            });
        }
        out.set(cond, *value);
    }
    Ok(out)
}

fn range_of(v: [usize; 2]) -> Range<usize> {
    v[0]..v[1]
}

fn slice_chars(chars: &[char], span: Span) -> String {
    if span.start <= span.end && span.end <= chars.len() {
        chars[span.start..span.end].iter().collect()
    } else {
        String::new()
    }
}

impl RawStory {
    fn into_story(self) -> Result<Story, ValidationError> {
        let chars: Vec<char> = self.text.chars().collect();
        let id = self.story_id.clone();
        let tokens = self
            .tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                Ok(Token {
                    text: t.t,
                    span: t.span.into(),
                    surprisal: convert_surprisals(&t.s, &id, &format!("tokens[{i}].s"))?,
                })
            })
            .collect::<Result<Vec<_>, ValidationError>>()?;
        let words = self
            .words
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                let span: Span = w.span.into();
                Ok(Word {
                    text: slice_chars(&chars, span),
                    span,
                    tokens: range_of(w.tok),
                    pos: w.pos,
                    surprisal: convert_surprisals(&w.s, &id, &format!("words[{i}].s"))?,
                })
            })
            .collect::<Result<Vec<_>, ValidationError>>()?;
        let story = Story {
            story_id: self.story_id,
            language: self.language,
            source: self.source,
            text: self.text,
            tokens,
            words,
            sentences: self
                .sentences
                .into_iter()
                .map(|s| Sentence { words: range_of(s.w) })
                .collect(),
            paragraphs: self
                .paragraphs
                .into_iter()
                .map(|p| Paragraph {
                    sentences: range_of(p.s),
                    image: p.image,
                })
                .collect(),
        };
        story.validate()?;
        Ok(story)
    }

    fn from_story(story: &Story) -> Self {
        RawStory {
            story_id: story.story_id.clone(),
            language: story.language.clone(),
            source: story.source.clone(),
            text: story.text.clone(),
            tokens: story
                .tokens
                .iter()
                .map(|t| RawToken {
                    t: t.text.clone(),
                    span: t.span.into(),
                    s: (&t.surprisal).into(),
                })
                .collect(),
            words: story
                .words
                .iter()
                .map(|w| RawWord {
                    span: w.span.into(),
                    tok: [w.tokens.start, w.tokens.end],
                    pos: w.pos.clone(),
                    s: (&w.surprisal).into(),
                })
                .collect(),
            sentences: story
                .sentences
                .iter()
                .map(|s| RawSentence {
                    w: [s.words.start, s.words.end],
                })
                .collect(),
            paragraphs: story
                .paragraphs
                .iter()
                .map(|p| RawParagraph {
                    s: [p.sentences.start, p.sentences.end],
                    image: p.image.clone(),
                })
                .collect(),
        }
    }
}

// --- validation ------------------------------------------------------------

fn check_values(story: &Story, field: &str, s: &Surprisals) -> Result<(), ValidationError> {
    for (c, v) in s.iter() {
        if !v.is_finite() {
            return Err(ValidationError::new(story, field, format!("non-finite surprisal under {c}")));
        }
        if v < 0.0 {
            return Err(ValidationError::new(story, field, format!("negative surprisal under {c}")));
        }
    }
    Ok(())
}

/// Checks that `ranges` are non-empty and tile `0..total` in order.
fn check_partition(
    story: &Story,
    field: &str,
    ranges: impl Iterator<Item = Range<usize>>,
    total: usize,
) -> Result<(), ValidationError> {
    let mut next = 0;
    for (i, r) in ranges.enumerate() {
        if r.start >= r.end {
            return Err(ValidationError::new(story, format!("{field}[{i}]"), "empty range"));
        }
        if r.start != next {
            return Err(ValidationError::new(
                story,
                format!("{field}[{i}]"),
                format!("range starts at {} but previous ended at {next}", r.start),
            ));
        }
        next = r.end;
    }
    if next != total {
        return Err(ValidationError::new(
            story,
            field,
            format!("ranges cover {next} of {total} children"),
        ));
    }
    Ok(())
}

fn validate_story(story: &Story) -> Result<(), ValidationError> {
    if story.story_id.is_empty() {
        return Err(ValidationError::new(story, "story_id", "empty"));
    }
    if story.language.is_empty() {
        return Err(ValidationError::new(story, "language", "empty"));
    }
    let text_len = story.text.chars().count();

    let conditions = story.tokens.first().map(|t| t.surprisal.conditions());
    let mut prev_end = 0;
    for (i, tok) in story.tokens.iter().enumerate() {
        let field = format!("tokens[{i}]");
        if tok.span.is_empty() {
            return Err(ValidationError::new(story, &field, "empty span"));
        }
        if tok.span.end > text_len {
            return Err(ValidationError::new(story, &field, "span beyond end of text"));
        }
        if tok.span.start < prev_end {
            return Err(ValidationError::new(story, &field, "span overlaps previous token"));
        }
        prev_end = tok.span.end;
        check_values(story, &field, &tok.surprisal)?;
        if Some(tok.surprisal.conditions()) != conditions {
            return Err(ValidationError::new(
                story,
                &field,
                "condition set differs from the first token",
            ));
        }
    }

    let mut prev_span_end = 0;
    let mut prev_tok_end = 0;
    for (i, w) in story.words.iter().enumerate() {
        let field = format!("words[{i}]");
        if w.span.is_empty() {
            return Err(ValidationError::new(story, &field, "empty span"));
        }
        if w.span.end > text_len {
            return Err(ValidationError::new(story, &field, "span beyond end of text"));
        }
        if w.span.start < prev_span_end {
            return Err(ValidationError::new(story, &field, "span overlaps previous word"));
        }
        prev_span_end = w.span.end;
        if w.tokens.start >= w.tokens.end {
            return Err(ValidationError::new(story, &field, "empty token range"));
        }
        if w.tokens.end > story.tokens.len() {
            return Err(ValidationError::new(story, &field, "token range beyond token list"));
        }
        if w.tokens.start < prev_tok_end {
            return Err(ValidationError::new(
                story,
                &field,
                "token range overlaps previous word",
            ));
        }
        prev_tok_end = w.tokens.end;
        if let Some(pos) = &w.pos {
            if !UD_POS_TAGS.contains(&pos.as_str()) {
                return Err(ValidationError::new(
                    story,
                    &field,
                    format!("unknown POS tag `{pos}`"),
                ));
            }
        }
        check_values(story, &field, &w.surprisal)?;
    }

    check_partition(
        story,
        "sentences",
        story.sentences.iter().map(|s| s.words.clone()),
        story.words.len(),
    )?;
    check_partition(
        story,
        "paragraphs",
        story.paragraphs.iter().map(|p| p.sentences.clone()),
        story.sentences.len(),
    )?;

    let has_pd = conditions.as_ref().is_some_and(|c| c.contains(&Condition::PD))
        || story.words.iter().any(|w| w.surprisal.contains(Condition::PD));
    if has_pd && story.paragraphs.len() < 2 {
        return Err(ValidationError::new(
            story,
            "tokens.s",
            "condition PD requires at least two paragraphs",
        ));
    }
    Ok(())
}

// --- reading / writing -----------------------------------------------------

fn parse_line(line: &str) -> Result<Story, Result<ValidationError, String>> {
    let raw: RawStory = serde_json::from_str(line).map_err(|e| Err(e.to_string()))?;
    raw.into_story().map_err(Ok)
}

/// Reads and validates a whole trace stream. Blank lines are skipped.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<Story>, TraceError> {
    let mut stories = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let story = parse_line(&line).map_err(|e| match e {
            Ok(source) => TraceError::Invalid { line: line_no, source },
            Err(message) => TraceError::Parse { line: line_no, message },
        })?;
        let key = (story.language.clone(), story.source.clone(), story.story_id.clone());
        if !seen.insert(key) {
            return Err(TraceError::Invalid {
                line: line_no,
                source: ValidationError::new(&story, "story_id", "duplicate within (language, source)"),
            });
        }
        stories.push(story);
    }
    Ok(stories)
}

/// Serializes stories, one JSON record per line.
pub fn write_trace<W: Write>(stories: &[Story], mut writer: W) -> io::Result<()> {
    for story in stories {
        serde_json::to_writer(&mut writer, &RawStory::from_story(story))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

/// Outcome of a non-failing validation pass over a trace stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub stories: usize,
    pub tokens: usize,
    pub words: usize,
    pub languages: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Validates every line and collects all violations instead of stopping at the first.
pub fn validate_stream<R: BufRead>(reader: R) -> io::Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    let mut languages = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(story) => {
                let key = (story.language.clone(), story.source.clone(), story.story_id.clone());
                if !seen.insert(key) {
                    report.violations.push(Violation {
                        line: line_no,
                        message: ValidationError::new(
                            &story,
                            "story_id",
                            "duplicate within (language, source)",
                        )
                        .to_string(),
                    });
                    continue;
                }
                report.stories += 1;
                report.tokens += story.tokens.len();
                report.words += story.words.len();
                languages.insert(story.language);
            }
            Err(Ok(v)) => report.violations.push(Violation {
                line: line_no,
                message: v.to_string(),
            }),
            Err(Err(m)) => report.violations.push(Violation {
                line: line_no,
                message: format!("malformed record: {m}"),
            }),
        }
    }
    report.languages = languages.len();
    Ok(report)
}

// --- corpus filters --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Languages need strictly more stories than this to be kept.
    pub min_stories_per_language: usize,
    pub max_paragraphs: usize,
    pub min_words_per_paragraph: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_stories_per_language: 20,
            max_paragraphs: 20,
            min_words_per_paragraph: 3,
        }
    }
}

fn truncate_paragraphs(story: &mut Story, max_paragraphs: usize) {
    if story.paragraphs.len() <= max_paragraphs {
        return;
    }
    story.paragraphs.truncate(max_paragraphs);
    let n_sent = story.paragraphs.last().map_or(0, |p| p.sentences.end);
    story.sentences.truncate(n_sent);
    let n_words = story.sentences.last().map_or(0, |s| s.words.end);
    story.words.truncate(n_words);
    let n_tokens = story.words.last().map_or(0, |w| w.tokens.end);
    story.tokens.truncate(n_tokens);
}

/// Applies the corpus inclusion rules: truncate long stories, drop stories
/// with a too-short paragraph, then drop under-represented languages.
pub fn filter_corpus(stories: Vec<Story>, config: &FilterConfig) -> Vec<Story> {
    let kept: Vec<Story> = stories
        .into_iter()
        .filter_map(|mut story| {
            truncate_paragraphs(&mut story, config.max_paragraphs);
            // truncation can break story-level invariants (e.g. PD on a single paragraph)
            if story.validate().is_err() {
                return None;
            }
            let short = (0..story.paragraphs.len())
                .any(|p| story.paragraph_words(p).len() < config.min_words_per_paragraph);
            (!short).then_some(story)
        })
        .collect();

    let mut per_language: HashMap<&str, usize> = HashMap::new();
    for s in &kept {
        *per_language.entry(s.language.as_str()).or_default() += 1;
    }
    let keep_lang: HashSet<String> = per_language
        .into_iter()
        .filter(|&(_, n)| n > config.min_stories_per_language)
        .map(|(l, _)| l.to_string())
        .collect();
    kept.into_iter()
        .filter(|s| keep_lang.contains(&s.language))
        .collect()
}
