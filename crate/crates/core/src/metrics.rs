//! Per-unit information measures over word surprisal sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::normalized_position;
use crate::trace::{Condition, Story};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty surprisal sequence")]
    Empty,
    #[error("local UID undefined for fewer than two words (got {0})")]
    LocalUndefined(usize),
    #[error("coefficient of variation needs at least two words (got {0})")]
    TooShort(usize),
    #[error("coefficient of variation undefined for non-positive mean {0}")]
    NonPositiveMean(f64),
    #[error("story `{story_id}`: condition(s) {missing} absent")]
    MissingCondition { story_id: String, missing: String },
    #[error("no POS tags in corpus")]
    NoPosTags,
}

fn mean(s: &[f64]) -> f64 {
    s.iter().sum::<f64>() / s.len() as f64
}

/// Global uniformity: population variance of the surprisal sequence (1/n).
pub fn uid_global(s: &[f64]) -> Result<f64, MetricError> {
    if s.is_empty() {
        return Err(MetricError::Empty);
    }
    let mu = mean(s);
    Ok(s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / s.len() as f64)
}

/// Local uniformity: mean squared difference of consecutive surprisals.
pub fn uid_local(s: &[f64]) -> Result<f64, MetricError> {
    if s.len() < 2 {
        return Err(MetricError::LocalUndefined(s.len()));
    }
    let sum: f64 = s.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    Ok(sum / (s.len() - 1) as f64)
}

/// Sample standard deviation (1/(n-1)) over the mean.
///
/// Unlike [`uid_global`], the dispersion here uses the unbiased normalisation:
/// it is the only one that reproduces the reference values (CV 1.01 and 1.74
/// for the polar-bear caption).
pub fn coeff_variation(s: &[f64]) -> Result<f64, MetricError> {
    if s.len() < 2 {
        return Err(MetricError::TooShort(s.len()));
    }
    let mu = mean(s);
    if mu <= 0.0 {
        return Err(MetricError::NonPositiveMean(mu));
    }
    let var = s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (s.len() - 1) as f64;
    Ok(var.sqrt() / mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Sentence,
    Paragraph,
    Caption,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Sentence => "sentence",
            Level::Paragraph => "paragraph",
            Level::Caption => "caption",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence" => Ok(Level::Sentence),
            "paragraph" => Ok(Level::Paragraph),
            "caption" => Ok(Level::Caption),
            other => Err(format!("unknown level `{other}`")),
        }
    }
}

/// Measurements for one unit under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub story_id: String,
    pub language: String,
    pub level: Level,
    pub unit_index: usize,
    /// Index of the enclosing unit (paragraph for sentences, 0 otherwise).
    pub parent_index: usize,
    /// Number of units of this level inside the parent.
    pub siblings: usize,
    /// Normalised position of the unit within its parent.
    pub position: f64,
    pub condition: Condition,
    pub n_words: usize,
    pub mean_surprisal: f64,
    pub uid_v: f64,
    pub uid_lv: Option<f64>,
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// POS tags whose words are removed before measuring (e.g. PUNCT).
    pub exclude_pos: Vec<String>,
}

struct Unit {
    index: usize,
    parent: usize,
    siblings: usize,
    position_in_parent: usize,
    words: std::ops::Range<usize>,
}

fn units(story: &Story, level: Level) -> Vec<Unit> {
    match level {
        Level::Sentence => {
            let mut out = Vec::new();
            for (p, para) in story.paragraphs.iter().enumerate() {
                for (k, s) in para.sentences.clone().enumerate() {
                    out.push(Unit {
                        index: s,
                        parent: p,
                        siblings: para.sentences.len(),
                        position_in_parent: k,
                        words: story.sentences[s].words.clone(),
                    });
                }
            }
            out
        }
        Level::Paragraph => (0..story.paragraphs.len())
            .map(|p| Unit {
                index: p,
                parent: 0,
                siblings: story.paragraphs.len(),
                position_in_parent: p,
                words: story.paragraph_words(p),
            })
            .collect(),
        Level::Caption if story.words.is_empty() => Vec::new(),
        Level::Caption => vec![Unit {
            index: 0,
            parent: 0,
            siblings: 1,
            position_in_parent: 0,
            words: 0..story.words.len(),
        }],
    }
}

/// One row per (unit, condition). Units left without words by the POS
/// exclusion produce no row.
pub fn compute_metrics(
    story: &Story,
    level: Level,
    conditions: &[Condition],
    options: &MetricOptions,
) -> Result<Vec<MetricRow>, MetricError> {
    let missing: Vec<String> = conditions
        .iter()
        .filter(|&&c| story.words.iter().any(|w| !w.surprisal.contains(c)))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(MetricError::MissingCondition {
            story_id: story.story_id.clone(),
            missing: missing.join(","),
        });
    }
    let mut rows = Vec::new();
    for unit in units(story, level) {
        let included: Vec<usize> = unit
            .words
            .clone()
            .filter(|&w| match &story.words[w].pos {
                Some(p) => !options.exclude_pos.contains(p),
                None => true,
            })
            .collect();
        if included.is_empty() {
            continue;
        }
        let position = normalized_position(unit.position_in_parent, unit.siblings)
            .expect("unit index within parent");
        for &c in conditions {
            let s: Vec<f64> = included
                .iter()
                .map(|&w| story.words[w].surprisal.get(c).expect("checked above"))
                .collect();
            rows.push(MetricRow {
                story_id: story.story_id.clone(),
                language: story.language.clone(),
                level,
                unit_index: unit.index,
                parent_index: unit.parent,
                siblings: unit.siblings,
                position,
                condition: c,
                n_words: s.len(),
                mean_surprisal: mean(&s),
                uid_v: uid_global(&s)?,
                uid_lv: uid_local(&s).ok(),
                cv: coeff_variation(&s).ok(),
            });
        }
    }
    Ok(rows)
}

/// Change in variance contribution for one POS tag in one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosContribution {
    pub language: String,
    pub pos_tag: String,
    pub delta_c_mean: f64,
    pub n_words: usize,
    pub pct_increase: f64,
    pub pct_decrease: f64,
}

/// Contribution of each word to the sentence's global UID: (s - mean)^2 / n.
/// The contributions sum to [`uid_global`].
pub fn variance_contributions(s: &[f64]) -> Vec<f64> {
    if s.is_empty() {
        return Vec::new();
    }
    let mu = mean(s);
    let n = s.len() as f64;
    s.iter().map(|x| (x - mu) * (x - mu) / n).collect()
}

#[derive(Default)]
struct PosAccum {
    delta_sum: f64,
    n: usize,
    increase: usize,
    decrease: usize,
}

/// Decomposes UID failures by part of speech.
///
/// Only sentences where the grounded condition has strictly higher global UID
/// than the baseline are considered. Words without a tag still count towards
/// the sentence mean but are not aggregated.
pub fn pos_decomposition(
    stories: &[Story],
    baseline: Condition,
    grounded: Condition,
    min_count: usize,
) -> Result<Vec<PosContribution>, MetricError> {
    if !stories.iter().any(|s| s.words.iter().any(|w| w.pos.is_some())) {
        return Err(MetricError::NoPosTags);
    }
    let mut acc: BTreeMap<(String, String), PosAccum> = BTreeMap::new();
    for story in stories {
        for (k, sentence) in story.sentences.iter().enumerate() {
            let range = sentence.words.clone();
            let (Some(base), Some(ground)) = (
                story.word_surprisals(range.clone(), baseline),
                story.word_surprisals(range.clone(), grounded),
            ) else {
                return Err(MetricError::MissingCondition {
                    story_id: story.story_id.clone(),
                    missing: format!("{baseline}/{grounded} in sentence {k}"),
                });
            };
            if uid_global(&ground)? <= uid_global(&base)? {
                continue;
            }
            let c_base = variance_contributions(&base);
            let c_ground = variance_contributions(&ground);
            for (i, w) in story.words[range].iter().enumerate() {
                let Some(pos) = &w.pos else { continue };
                let a = acc
                    .entry((story.language.clone(), pos.clone()))
                    .or_default();
                a.delta_sum += c_ground[i] - c_base[i];
                a.n += 1;
                if ground[i] > base[i] {
                    a.increase += 1;
                } else if ground[i] < base[i] {
                    a.decrease += 1;
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .filter(|(_, a)| a.n >= min_count && a.n > 0)
        .map(|((language, pos_tag), a)| PosContribution {
            language,
            pos_tag,
            delta_c_mean: a.delta_sum / a.n as f64,
            n_words: a.n,
            pct_increase: a.increase as f64 / a.n as f64,
            pct_decrease: a.decrease as f64 / a.n as f64,
        })
        .collect())
}

/// Mean of a metric per (language, level, condition), one unit one vote.
pub fn language_means<'a>(
    rows: impl IntoIterator<Item = &'a MetricRow>,
    metric: impl Fn(&MetricRow) -> Option<f64>,
) -> BTreeMap<(String, Level, Condition), (f64, usize)> {
    let mut acc: BTreeMap<(String, Level, Condition), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(v) = metric(r) {
            let e = acc.entry((r.language.clone(), r.level, r.condition)).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    for v in acc.values_mut() {
        v.0 /= v.1 as f64;
    }
    acc
}

/// Conditions present on every word of every story, in canonical order.
pub fn common_conditions(stories: &[Story]) -> Vec<Condition> {
    let mut common: Option<BTreeSet<Condition>> = None;
    for s in stories {
        let here: BTreeSet<Condition> = s.conditions().into_iter().collect();
        common = Some(match common {
            None => here,
            Some(c) => c.intersection(&here).copied().collect(),
        });
    }
    common.map(|c| c.into_iter().collect()).unwrap_or_default()
}
