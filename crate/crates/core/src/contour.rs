//! Positional structure of information contours: normalised positions,
//! contextual reduction scores, smoothed reduction densities and
//! boundary-window surprisal differences.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Level;
use crate::trace::{Condition, Story};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContourError {
    #[error("position index {index} out of range for {count} units")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("story `{story_id}`: condition {condition} absent")]
    MissingCondition { story_id: String, condition: Condition },
    #[error("empty density: no positive reductions")]
    EmptyDensity,
    #[error("invalid density parameters: {0}")]
    InvalidParameters(String),
    #[error("no valid {level} transitions for any window")]
    NoTransitions { level: Level },
    #[error("boundary analysis is defined for sentence and paragraph levels, not {0}")]
    UnsupportedLevel(Level),
}

/// `index / (count - 1)`, with singleton units at 0 (they are onsets).
pub fn normalized_position(index: usize, count: usize) -> Result<f64, ContourError> {
    if index >= count {
        return Err(ContourError::IndexOutOfRange { index, count });
    }
    if count == 1 {
        Ok(0.0)
    } else {
        Ok(index as f64 / (count - 1) as f64)
    }
}

/// Per-word surprisal reductions. Positive values mean the added context
/// made the word less surprising.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionScores {
    pub word_index: usize,
    /// U − P
    pub delta_p: f64,
    /// U − D
    pub delta_d: f64,
    /// D − PD
    pub delta_pd: f64,
    pub position_in_sentence: f64,
    pub position_in_paragraph: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reduction {
    #[serde(rename = "delta_P")]
    P,
    #[serde(rename = "delta_D")]
    D,
    #[serde(rename = "delta_PD")]
    PD,
}

impl Reduction {
    pub const ALL: [Reduction; 3] = [Reduction::P, Reduction::D, Reduction::PD];

    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::P => "delta_P",
            Reduction::D => "delta_D",
            Reduction::PD => "delta_PD",
        }
    }

    pub fn of(self, s: &ReductionScores) -> f64 {
        match self {
            Reduction::P => s.delta_p,
            Reduction::D => s.delta_d,
            Reduction::PD => s.delta_pd,
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn reduction_scores(story: &Story) -> Result<Vec<ReductionScores>, ContourError> {
    for c in Condition::ALL {
        if story.words.iter().any(|w| !w.surprisal.contains(c)) {
            return Err(ContourError::MissingCondition {
                story_id: story.story_id.clone(),
                condition: c,
            });
        }
    }
    let mut out = Vec::with_capacity(story.words.len());
    for p in 0..story.paragraphs.len() {
        let para_words = story.paragraph_words(p);
        for s in story.paragraphs[p].sentences.clone() {
            let sent_words = story.sentences[s].words.clone();
            for w in sent_words.clone() {
                let v = |c| story.words[w].surprisal.get(c).expect("checked above");
                let (u, pp, d, pd) = (v(Condition::U), v(Condition::P), v(Condition::D), v(Condition::PD));
                out.push(ReductionScores {
                    word_index: w,
                    delta_p: u - pp,
                    delta_d: u - d,
                    delta_pd: d - pd,
                    position_in_sentence: normalized_position(w - sent_words.start, sent_words.len())?,
                    position_in_paragraph: normalized_position(w - para_words.start, para_words.len())?,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityWeighting {
    /// Each positive reduction contributes its size.
    #[default]
    Magnitude,
    /// Each positive reduction contributes one.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub bins: usize,
    /// Gaussian sigma, in bins. Zero disables smoothing.
    pub bandwidth_bins: f64,
    pub weighting: DensityWeighting,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            bins: 50,
            bandwidth_bins: 2.0,
            weighting: DensityWeighting::Magnitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub bins: usize,
    pub bandwidth_bins: f64,
    /// Density values over [0, 1]; they integrate to one.
    pub values: Vec<f64>,
    pub n_observations: usize,
}

impl DensityCurve {
    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.bins).map(|i| (i as f64 + 0.5) / self.bins as f64).collect()
    }

    /// Riemann integral over [0, 1].
    pub fn area(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.bins as f64
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Discrete Gaussian smoothing. Each output bin averages its neighbours with
/// kernel weights renormalised over the bins that fall inside [0, 1], so a
/// flat histogram stays flat up to the edges.
pub fn gaussian_smooth(hist: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return hist.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = hist.len() as isize;
    (0..n)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for d in -radius..=radius {
                let j = i + d;
                if (0..n).contains(&j) {
                    let k = kernel[(d + radius) as usize];
                    num += k * hist[j as usize];
                    den += k;
                }
            }
            num / den
        })
        .collect()
}

/// Density of positive reductions over normalised position at `level`.
pub fn reduction_density(
    scores: &[ReductionScores],
    which: Reduction,
    level: Level,
    config: &DensityConfig,
) -> Result<DensityCurve, ContourError> {
    if config.bins == 0 {
        return Err(ContourError::InvalidParameters("bins must be positive".into()));
    }
    if !(config.bandwidth_bins >= 0.0) || !config.bandwidth_bins.is_finite() {
        return Err(ContourError::InvalidParameters("bandwidth must be finite and non-negative".into()));
    }
    let position = |s: &ReductionScores| match level {
        Level::Sentence => s.position_in_sentence,
        Level::Paragraph | Level::Caption => s.position_in_paragraph,
    };
    let mut hist = vec![0.0; config.bins];
    let mut n = 0;
    for s in scores {
        let delta = which.of(s);
        if delta > 0.0 {
            let bin = ((position(s) * config.bins as f64) as usize).min(config.bins - 1);
            hist[bin] += match config.weighting {
                DensityWeighting::Magnitude => delta,
                DensityWeighting::Count => 1.0,
            };
            n += 1;
        }
    }
    if n == 0 {
        return Err(ContourError::EmptyDensity);
    }
    let mut values = gaussian_smooth(&hist, config.bandwidth_bins);
    let total: f64 = values.iter().sum();
    let scale = config.bins as f64 / total;
    for v in &mut values {
        *v *= scale;
    }
    Ok(DensityCurve {
        bins: config.bins,
        bandwidth_bins: config.bandwidth_bins,
        values,
        n_observations: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundarySign {
    /// mean(final w of preceding) − mean(first w of following); onset spikes
    /// come out negative.
    #[default]
    FinalMinusFirst,
    FirstMinusFinal,
}

impl FromStr for BoundarySign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "final-minus-first" => Ok(BoundarySign::FinalMinusFirst),
            "first-minus-final" => Ok(BoundarySign::FirstMinusFinal),
            other => Err(format!(
                "unknown boundary sign `{other}` (expected final-minus-first|first-minus-final)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDelta {
    pub level: Level,
    pub window_w: usize,
    pub condition: Condition,
    /// `None` when every transition was skipped for this window.
    pub mean_delta: Option<f64>,
    pub n_transitions: usize,
    pub n_skipped: usize,
}

/// Mean windowed surprisal difference across adjacent units that share a
/// parent (sentences within a paragraph, paragraphs within a story).
pub fn boundary_deltas(
    stories: &[Story],
    level: Level,
    windows: &[usize],
    condition: Condition,
    sign: BoundarySign,
) -> Result<Vec<BoundaryDelta>, ContourError> {
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for story in stories {
        let unit_words: Vec<Vec<std::ops::Range<usize>>> = match level {
            Level::Sentence => story
                .paragraphs
                .iter()
                .map(|p| p.sentences.clone().map(|s| story.sentences[s].words.clone()).collect())
                .collect(),
            Level::Paragraph => vec![(0..story.paragraphs.len()).map(|p| story.paragraph_words(p)).collect()],
            Level::Caption => return Err(ContourError::UnsupportedLevel(level)),
        };
        for siblings in unit_words {
            for pair in siblings.windows(2) {
                let prev = story.word_surprisals(pair[0].clone(), condition);
                let next = story.word_surprisals(pair[1].clone(), condition);
                match (prev, next) {
                    (Some(a), Some(b)) => pairs.push((a, b)),
                    _ => {
                        return Err(ContourError::MissingCondition {
                            story_id: story.story_id.clone(),
                            condition,
                        })
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(windows.len());
    for &w in windows {
        let mut sum = 0.0;
        let mut used = 0;
        for (prev, next) in &pairs {
            if w == 0 || prev.len() < w || next.len() < w {
                continue;
            }
            let tail = prev[prev.len() - w..].iter().sum::<f64>() / w as f64;
            let head = next[..w].iter().sum::<f64>() / w as f64;
            sum += match sign {
                BoundarySign::FinalMinusFirst => tail - head,
                BoundarySign::FirstMinusFinal => head - tail,
            };
            used += 1;
        }
        out.push(BoundaryDelta {
            level,
            window_w: w,
            condition,
            mean_delta: (used > 0).then(|| sum / used as f64),
            n_transitions: used,
            n_skipped: pairs.len() - used,
        });
    }
    if out.iter().all(|d| d.n_transitions == 0) {
        return Err(ContourError::NoTransitions { level });
    }
    Ok(out)
}
