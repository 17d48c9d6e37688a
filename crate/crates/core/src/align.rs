//! Token-to-word surprisal aggregation.
//!
//! Word surprisal is the sum of the surprisals of the subword tokens the word
//! comprises. Under [`AlignMode::WhitespaceReassign`], tokens made only of
//! whitespace markers that open a word are moved to the preceding word before
//! summing, so a word does not pay for the boundary that introduces it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Paragraph, Sentence, Span, Story, Surprisals, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    #[default]
    #[serde(rename = "naive")]
    NaiveSum,
    #[serde(rename = "ws-reassign")]
    WhitespaceReassign,
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::NaiveSum => "naive",
            AlignMode::WhitespaceReassign => "ws-reassign",
        })
    }
}

impl FromStr for AlignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" | "naive_sum" => Ok(AlignMode::NaiveSum),
            "ws-reassign" | "whitespace_reassign" => Ok(AlignMode::WhitespaceReassign),
            other => Err(format!("unknown align mode `{other}` (expected naive|ws-reassign)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPolicy {
    pub mode: AlignMode,
    pub whitespace_markers: Vec<String>,
}

impl Default for AlignmentPolicy {
    fn default() -> Self {
        Self::new(AlignMode::NaiveSum)
    }
}

impl AlignmentPolicy {
    pub fn new(mode: AlignMode) -> Self {
        Self {
            mode,
            whitespace_markers: vec!["▁".into(), " ".into(), "Ġ".into()],
        }
    }

    /// True if `text` is non-empty and made up entirely of whitespace markers.
    pub fn is_whitespace_token(&self, text: &str) -> bool {
        let mut rest = text;
        if rest.is_empty() {
            return false;
        }
        while !rest.is_empty() {
            match self
                .whitespace_markers
                .iter()
                .find(|m| !m.is_empty() && rest.starts_with(m.as_str()))
            {
                Some(m) => rest = &rest[m.len()..],
                None => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignError {
    #[error("story `{story_id}`: token {token} belongs to no word")]
    UnassignedToken { story_id: String, token: usize },
    #[error("story `{story_id}`: word {word} has no tokens left after whitespace reassignment")]
    EmptyWord { story_id: String, word: usize },
    #[error("story `{story_id}`: token {token} spans words {first} and {second}")]
    TokenSpansWords {
        story_id: String,
        token: usize,
        first: usize,
        second: usize,
    },
}

/// Fills `Word::surprisal` for every condition carried by the tokens.
///
/// Under whitespace reassignment the word token ranges are rewritten to
/// reflect the moved tokens. Per condition, the total over words equals the
/// total over tokens.
pub fn aggregate_word_surprisal(story: &Story, policy: &AlignmentPolicy) -> Result<Story, AlignError> {
    let mut next = 0;
    for w in &story.words {
        if w.tokens.start != next {
            return Err(AlignError::UnassignedToken {
                story_id: story.story_id.clone(),
                token: next,
            });
        }
        next = w.tokens.end;
    }
    if next != story.tokens.len() {
        return Err(AlignError::UnassignedToken {
            story_id: story.story_id.clone(),
            token: next,
        });
    }

    let mut ranges: Vec<_> = story.words.iter().map(|w| w.tokens.clone()).collect();
    if policy.mode == AlignMode::WhitespaceReassign {
        for i in 1..ranges.len() {
            // only a leading run of marker tokens moves; interior markers stay put
            while ranges[i].start < ranges[i].end
                && policy.is_whitespace_token(&story.tokens[ranges[i].start].text)
            {
                ranges[i].start += 1;
                ranges[i - 1].end += 1;
            }
            if ranges[i].is_empty() {
                return Err(AlignError::EmptyWord {
                    story_id: story.story_id.clone(),
                    word: i,
                });
            }
        }
    }

    let conditions = story.conditions();
    let mut out = story.clone();
    for (word, range) in out.words.iter_mut().zip(ranges) {
        let mut s = Surprisals::new();
        for &c in &conditions {
            let total: f64 = story.tokens[range.clone()]
                .iter()
                .map(|t| t.surprisal.get(c).unwrap_or(0.0))
                .sum();
            s.set(c, total);
        }
        word.surprisal = s;
        word.tokens = range;
    }
    Ok(out)
}

/// A word produced by whitespace segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub text: String,
    pub span: Span,
}

/// Splits on Unicode whitespace; runs of whitespace collapse, punctuation
/// stays attached to its word.
pub fn fallback_segment(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let mut idx = 0;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if let Some((start, word)) = current.take() {
                out.push(Segment {
                    text: word,
                    span: Span::new(start, idx),
                });
            }
        } else {
            current.get_or_insert_with(|| (idx, String::new())).1.push(ch);
        }
        idx += 1;
    }
    if let Some((start, word)) = current {
        out.push(Segment {
            text: word,
            span: Span::new(start, idx),
        });
    }
    out
}

/// Gives a story without word annotation a whitespace segmentation.
///
/// Tokens are assigned to the word their span overlaps. Tokens overlapping no
/// word (pure whitespace) attach to the following word, or to the last word at
/// the end of the text. A token overlapping two words is rejected. The result
/// is one sentence inside one paragraph. Stories that already carry words are
/// returned unchanged.
pub fn segment_missing_words(story: &Story) -> Result<Story, AlignError> {
    if !story.words.is_empty() || story.tokens.is_empty() {
        return Ok(story.clone());
    }
    let segments = fallback_segment(&story.text);
    if segments.is_empty() {
        return Err(AlignError::UnassignedToken {
            story_id: story.story_id.clone(),
            token: 0,
        });
    }
    let mut owner = Vec::with_capacity(story.tokens.len());
    let mut seg = 0;
    for (t, tok) in story.tokens.iter().enumerate() {
        while seg < segments.len() && segments[seg].span.end <= tok.span.start {
            seg += 1;
        }
        let overlapping: Vec<usize> = (seg..segments.len())
            .take_while(|&k| segments[k].span.start < tok.span.end)
            .filter(|&k| segments[k].span.overlaps(&tok.span))
            .collect();
        let word = match overlapping.as_slice() {
            [] => seg.min(segments.len() - 1),
            [only] => *only,
            [first, second, ..] => {
                return Err(AlignError::TokenSpansWords {
                    story_id: story.story_id.clone(),
                    token: t,
                    first: *first,
                    second: *second,
                })
            }
        };
        owner.push(word);
    }

    let mut words: Vec<Word> = Vec::new();
    let mut start = 0;
    for t in 1..=owner.len() {
        if t == owner.len() || owner[t] != owner[start] {
            let s = &segments[owner[start]];
            words.push(Word {
                text: s.text.clone(),
                span: s.span,
                tokens: start..t,
                pos: None,
                surprisal: Surprisals::new(),
            });
            start = t;
        }
    }
    let mut out = story.clone();
    out.sentences = vec![Sentence { words: 0..words.len() }];
    out.paragraphs = vec![Paragraph {
        sentences: 0..1,
        image: None,
    }];
    out.words = words;
    Ok(out)
}
