//! End-to-end analysis run: read traces, filter, align, measure, test, and
//! write every table into one output directory.
//!
//! Work is split per story and merged in story order, so the output does not
//! depend on the number of worker threads.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{aggregate_word_surprisal, segment_missing_words, AlignError, AlignmentPolicy};
use crate::contour::{
    boundary_deltas, reduction_density, reduction_scores, BoundarySign, ContourError, DensityConfig, Reduction,
};
use crate::lmm::{fit_lmm, slopes_report, Estimator, KeyedFit, LmmSpec, Observation, Response, SlopeRow};
use crate::metrics::{
    common_conditions, compute_metrics, pos_decomposition, Level, MetricError, MetricOptions, MetricRow,
};
use crate::stats::{
    bh_fdr, cohens_dz, page_test, relative_delta, significance_code, wilcoxon_signed_rank,
    PAGE_CONVOLUTION_BUDGET, PAGE_ENUMERATION_BUDGET, WILCOXON_EXACT_MAX_N,
};
use crate::trace::{filter_corpus, read_trace, Condition, FilterConfig, Story, TraceError};

pub const THREADS_ENV: &str = "UIDC_THREADS";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: TraceError,
    },
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Metrics,
    Compare,
    Boundaries,
    Densities,
    Regress,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Metrics,
        Stage::Compare,
        Stage::Boundaries,
        Stage::Densities,
        Stage::Regress,
    ];
}

/// Which p-values share one FDR correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdrFamily {
    /// Across languages, separately for every metric and comparison.
    #[default]
    PerMetric,
    /// Across languages and the metrics of one table.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmmSettings {
    pub estimator: Estimator,
    pub include_log_length: bool,
    pub responses: Vec<Response>,
    /// Sentence-level rows come only from paragraphs with at least this many sentences.
    pub min_sentences_per_paragraph: usize,
    pub max_iter: usize,
}

impl Default for LmmSettings {
    fn default() -> Self {
        Self {
            estimator: Estimator::Reml,
            include_log_length: true,
            responses: vec![Response::MeanSurprisal, Response::UidV],
            min_sentences_per_paragraph: 3,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    /// Not written to the manifest, so runs into different directories
    /// produce identical manifests.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub align: AlignmentPolicy,
    /// `None` disables the corpus inclusion filters.
    pub filter: Option<FilterConfig>,
    /// Empty selects captions for single-paragraph corpora and sentences plus
    /// paragraphs otherwise.
    pub levels: Vec<Level>,
    /// Empty selects every condition shared by all stories.
    pub conditions: Vec<Condition>,
    pub fdr_family: FdrFamily,
    pub density: DensityConfig,
    pub boundary_windows: Vec<usize>,
    pub boundary_sign: BoundarySign,
    pub lmm: LmmSettings,
    pub pos_min_count: usize,
    pub exclude_pos: Vec<String>,
    pub stages: BTreeSet<Stage>,
    /// Worker threads; results do not depend on it, so it is not recorded.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    /// Recorded for provenance; the analysis itself draws no random numbers.
    pub seed: u64,
    /// Round numbers to 9 significant digits.
    pub pretty: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            output_dir: PathBuf::from("out"),
            align: AlignmentPolicy::default(),
            filter: Some(FilterConfig::default()),
            levels: Vec::new(),
            conditions: Vec::new(),
            fdr_family: FdrFamily::PerMetric,
            density: DensityConfig::default(),
            boundary_windows: vec![1, 2, 3],
            boundary_sign: BoundarySign::FinalMinusFirst,
            lmm: LmmSettings::default(),
            pos_min_count: 1,
            exclude_pos: Vec::new(),
            stages: Stage::ALL.into_iter().collect(),
            threads: None,
            seed: 0,
            pretty: false,
        }
    }
}

impl RunConfig {
    /// Reads a config file. A run manifest is accepted too: its `config`
    /// member is used.
    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
        serde_json::from_value(value).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Thread count: the environment override wins over the config.
    pub fn effective_threads(&self) -> Option<usize> {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .filter(|&n: &usize| n > 0)
            .or(self.threads)
    }
}

/// Summary written to `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub stories_read: usize,
    pub stories_kept: usize,
    pub languages: Vec<String>,
    pub conditions: Vec<Condition>,
    pub levels: Vec<Level>,
    pub methods: BTreeMap<String, String>,
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

fn method_notes(config: &RunConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("align_mode", config.align.mode.to_string());
    put("uid_v", "population variance (divisor n)".into());
    put("uid_lv", "mean squared successive difference (divisor n-1)".into());
    put("cv", "sample standard deviation (divisor n-1) over mean".into());
    put(
        "wilcoxon",
        format!("two-sided; zero differences dropped; exact for n <= {WILCOXON_EXACT_MAX_N}, else normal with tie and continuity correction"),
    );
    put(
        "page",
        format!(
            "one-sided; exact when subjects*k! <= {PAGE_ENUMERATION_BUDGET} and convolution work <= {PAGE_CONVOLUTION_BUDGET}, else normal"
        ),
    );
    put(
        "fdr",
        match config.fdr_family {
            FdrFamily::PerMetric => "benjamini-hochberg across languages, per metric".into(),
            FdrFamily::Pooled => "benjamini-hochberg across languages, pooled over metrics".into(),
        },
    );
    put(
        "lmm",
        format!(
            "{} ; BFGS on log-Cholesky G and log sigma2; Wald p-values with normal reference",
            match config.lmm.estimator {
                Estimator::Reml => "REML",
                Estimator::Ml => "ML",
            }
        ),
    );
    put("boundary_sign", format!("{:?}", config.boundary_sign));
    put(
        "density",
        format!(
            "{} bins, gaussian sigma {} bins, {:?} weighting",
            config.density.bins, config.density.bandwidth_bins, config.density.weighting
        ),
    );
    m
}

/// Number formatting for CSV cells.
#[derive(Debug, Clone, Copy)]
pub struct NumFormat {
    pub pretty: bool,
}

impl NumFormat {
    pub fn f(&self, v: f64) -> String {
        let v = if self.pretty && v.is_finite() {
            format!("{v:.8e}").parse().expect("formatted float")
        } else {
            v
        };
        // shortest round-trip form; exponent notation outside a readable range
        let a = v.abs();
        if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
            v.to_string()
        } else {
            format!("{v:e}")
        }
    }

    pub fn opt(&self, v: Option<f64>) -> String {
        v.map_or(String::new(), |v| self.f(v))
    }
}

/// Reads every input file. Duplicate story keys across files are rejected.
pub fn read_inputs(paths: &[PathBuf]) -> Result<Vec<Story>, PipelineError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        let file = File::open(path).map_err(io_err(path))?;
        let stories = read_trace(BufReader::new(file)).map_err(|source| PipelineError::Trace {
            path: path.clone(),
            source,
        })?;
        for s in stories {
            let key = (s.language.clone(), s.source.clone(), s.story_id.clone());
            if !seen.insert(key) {
                return Err(PipelineError::Config(format!(
                    "{}: story `{}` ({}, {}) already read from an earlier input",
                    path.display(),
                    s.story_id,
                    s.language,
                    s.source
                )));
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Segments unsegmented stories and fills word surprisal.
pub fn prepare_stories(stories: &[Story], policy: &AlignmentPolicy) -> Result<Vec<Story>, PipelineError> {
    stories
        .par_iter()
        .map(|s| {
            let s = segment_missing_words(s)?;
            Ok(aggregate_word_surprisal(&s, policy)?)
        })
        .collect()
}

fn auto_levels(stories: &[Story]) -> Vec<Level> {
    if !stories.is_empty() && stories.iter().all(|s| s.paragraphs.len() == 1) {
        vec![Level::Caption]
    } else {
        vec![Level::Sentence, Level::Paragraph]
    }
}

fn resolve_conditions(stories: &[Story], requested: &[Condition]) -> Result<Vec<Condition>, PipelineError> {
    let common = common_conditions(stories);
    if requested.is_empty() {
        return Ok(common);
    }
    let missing: Vec<String> = requested
        .iter()
        .filter(|c| !common.contains(c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::Config(format!(
            "condition(s) {} requested but not present in every story",
            missing.join(",")
        )));
    }
    let mut c = requested.to_vec();
    c.sort();
    c.dedup();
    Ok(c)
}

/// Result of [`run_analyze`].
#[derive(Debug, Clone)]
pub struct AnalyzeOutcome {
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

/// Runs the configured stages and writes their tables.
pub fn run_analyze(config: &RunConfig) -> Result<AnalyzeOutcome, PipelineError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.effective_threads() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    pool.install(|| analyze_inner(config))
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn analyze_inner(config: &RunConfig) -> Result<AnalyzeOutcome, PipelineError> {
    if config.inputs.is_empty() {
        return Err(PipelineError::Config("no input traces given".into()));
    }
    let fmt = NumFormat { pretty: config.pretty };
    let mut notes = Vec::new();

    let raw = read_inputs(&config.inputs)?;
    let stories_read = raw.len();
    let filtered = match &config.filter {
        Some(f) => filter_corpus(raw, f),
        None => raw,
    };
    let stories = prepare_stories(&filtered, &config.align)?;
    if stories.is_empty() {
        notes.push("no stories left after filtering".to_string());
    }
    let conditions = resolve_conditions(&stories, &config.conditions)?;
    let levels = if config.levels.is_empty() {
        auto_levels(&stories)
    } else {
        config.levels.clone()
    };
    let languages: Vec<String> = stories
        .iter()
        .map(|s| s.language.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let mut writer = Writer {
        dir: &config.output_dir,
        files: Vec::new(),
    };

    let options = MetricOptions {
        exclude_pos: config.exclude_pos.clone(),
    };
    let per_story: Vec<Vec<MetricRow>> = stories
        .par_iter()
        .map(|s| {
            let mut rows = Vec::new();
            for &level in &levels {
                rows.extend(compute_metrics(s, level, &conditions, &options)?);
            }
            Ok(rows)
        })
        .collect::<Result<_, MetricError>>()?;
    let rows: Vec<MetricRow> = per_story.into_iter().flatten().collect();

    if config.stages.contains(&Stage::Metrics) {
        writer.csv("metrics.csv", &METRIC_HEADER, &metric_records(&rows, fmt))?;
        if conditions.contains(&Condition::U) && conditions.len() > 1 {
            let mut pos_rows = Vec::new();
            let mut tagged = true;
            for &c in conditions.iter().filter(|&&c| c != Condition::U) {
                match pos_decomposition(&stories, Condition::U, c, config.pos_min_count) {
                    Ok(v) => pos_rows.extend(v.into_iter().map(|p| {
                        vec![
                            p.language,
                            c.to_string(),
                            p.pos_tag,
                            fmt.f(p.delta_c_mean),
                            p.n_words.to_string(),
                            fmt.f(p.pct_increase),
                            fmt.f(p.pct_decrease),
                        ]
                    })),
                    Err(MetricError::NoPosTags) => {
                        notes.push("pos decomposition skipped: no POS tags".into());
                        tagged = false;
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if tagged {
                writer.csv(
                    "pos.csv",
                    &[
                        "language",
                        "condition",
                        "pos_tag",
                        "delta_c_mean",
                        "n_words",
                        "pct_increase",
                        "pct_decrease",
                    ],
                    &pos_rows,
                )?;
            }
        }
    }

    if config.stages.contains(&Stage::Compare) {
        let pairs = comparison_pairs(&conditions);
        if pairs.is_empty() {
            notes.push("comparison skipped: fewer than two conditions".into());
        } else {
            let cmp = compare_rows(&rows, &levels, &pairs, &["uid_v", "uid_lv"], config.fdr_family, fmt);
            writer.csv("comparison.csv", &COMPARE_HEADER, &cmp)?;
            let cv = compare_rows(&rows, &levels, &pairs, &["cv"], config.fdr_family, fmt);
            writer.csv("cv.csv", &COMPARE_HEADER, &cv)?;
        }
        if conditions.len() >= 3 {
            let (page, page_notes) = page_rows(&rows, &levels, &conditions, fmt);
            notes.extend(page_notes);
            writer.csv("page.csv", &PAGE_HEADER, &page)?;
        } else {
            notes.push("page test skipped: fewer than three conditions".into());
        }
    }

    if config.stages.contains(&Stage::Boundaries) {
        let (b, b_notes) = boundary_rows(&stories, &languages, &conditions, config, fmt);
        notes.extend(b_notes);
        writer.csv(
            "boundaries.csv",
            &["language", "level", "window_w", "condition", "mean_delta", "n", "n_skipped"],
            &b,
        )?;
    }

    if config.stages.contains(&Stage::Densities) {
        if Condition::ALL.iter().all(|c| conditions.contains(c)) {
            density_files(&stories, &languages, config, fmt, &mut writer, &mut notes)?;
        } else {
            notes.push("densities skipped: reduction scores need all of U, P, D, PD".into());
        }
    }

    if config.stages.contains(&Stage::Regress) {
        let (slopes, lmm_notes) = slope_rows(&rows, &languages, &levels, &conditions, &config.lmm);
        notes.extend(lmm_notes);
        writer.csv("slopes.csv", &SLOPE_HEADER, &slope_records(&slopes, fmt))?;
    }

    let mut files = writer.files;
    files.push("manifest.json".into());
    let manifest = Manifest {
        tool: "uidc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        stories_read,
        stories_kept: stories.len(),
        languages,
        conditions,
        levels,
        methods: method_notes(config),
        files,
        notes,
    };
    let path = config.output_dir.join("manifest.json");
    let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| PipelineError::Config(e.to_string()))?;
    f.write_all(b"\n").map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;
    Ok(AnalyzeOutcome {
        manifest,
        output_dir: config.output_dir.clone(),
    })
}

pub const METRIC_HEADER: [&str; 13] = [
    "story_id",
    "language",
    "level",
    "unit_index",
    "parent_index",
    "siblings",
    "position",
    "condition",
    "n_words",
    "mean_surprisal",
    "uid_v",
    "uid_lv",
    "cv",
];

pub fn metric_records(rows: &[MetricRow], fmt: NumFormat) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.story_id.clone(),
                r.language.clone(),
                r.level.to_string(),
                r.unit_index.to_string(),
                r.parent_index.to_string(),
                r.siblings.to_string(),
                fmt.f(r.position),
                r.condition.to_string(),
                r.n_words.to_string(),
                fmt.f(r.mean_surprisal),
                fmt.f(r.uid_v),
                fmt.opt(r.uid_lv),
                fmt.opt(r.cv),
            ]
        })
        .collect()
}

/// U against every other condition, then D against PD.
fn comparison_pairs(conditions: &[Condition]) -> Vec<(Condition, Condition)> {
    let mut pairs = Vec::new();
    if conditions.contains(&Condition::U) {
        for &c in conditions.iter().filter(|&&c| c != Condition::U) {
            pairs.push((Condition::U, c));
        }
    }
    if conditions.contains(&Condition::D) && conditions.contains(&Condition::PD) {
        pairs.push((Condition::D, Condition::PD));
    }
    pairs
}

fn metric_value(r: &MetricRow, metric: &str) -> Option<f64> {
    match metric {
        "uid_v" => Some(r.uid_v),
        "uid_lv" => r.uid_lv,
        "cv" => r.cv,
        "mean_surprisal" => Some(r.mean_surprisal),
        _ => None,
    }
}

type UnitKey<'a> = (&'a str, usize);

/// Values of one metric per (language, level, condition), keyed by unit.
fn unit_values<'a>(
    rows: &'a [MetricRow],
    metric: &str,
) -> BTreeMap<(&'a str, Level, Condition), BTreeMap<UnitKey<'a>, f64>> {
    let mut out: BTreeMap<_, BTreeMap<_, _>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = metric_value(r, metric) {
            out.entry((r.language.as_str(), r.level, r.condition))
                .or_default()
                .insert((r.story_id.as_str(), r.unit_index), v);
        }
    }
    out
}

pub const COMPARE_HEADER: [&str; 15] = [
    "language",
    "level",
    "metric",
    "baseline",
    "condition",
    "n",
    "mean_baseline",
    "mean_condition",
    "delta_pct",
    "d_z",
    "statistic",
    "p_value",
    "p_method",
    "q_value",
    "code",
];

struct CompareRow {
    language: String,
    level: Level,
    metric: String,
    baseline: Condition,
    condition: Condition,
    n: usize,
    mean_b: f64,
    mean_c: f64,
    delta: Option<f64>,
    dz: Option<f64>,
    statistic: Option<f64>,
    p: Option<f64>,
    method: String,
    q: Option<f64>,
}

fn compare_rows(
    rows: &[MetricRow],
    levels: &[Level],
    pairs: &[(Condition, Condition)],
    metrics: &[&str],
    family: FdrFamily,
    fmt: NumFormat,
) -> Vec<Vec<String>> {
    let mut out: Vec<CompareRow> = Vec::new();
    for &metric in metrics {
        let values = unit_values(rows, metric);
        let languages: BTreeSet<&str> = values.keys().map(|k| k.0).collect();
        for &level in levels {
            for &(b, c) in pairs {
                for &lang in &languages {
                    let (Some(vb), Some(vc)) = (values.get(&(lang, level, b)), values.get(&(lang, level, c))) else {
                        continue;
                    };
                    let paired: Vec<(f64, f64)> = vb
                        .iter()
                        .filter_map(|(k, &x)| vc.get(k).map(|&y| (x, y)))
                        .collect();
                    if paired.is_empty() {
                        continue;
                    }
                    let n = paired.len();
                    let mean_b = paired.iter().map(|p| p.0).sum::<f64>() / n as f64;
                    let mean_c = paired.iter().map(|p| p.1).sum::<f64>() / n as f64;
                    let diffs: Vec<f64> = paired.iter().map(|p| p.1 - p.0).collect();
                    let test = wilcoxon_signed_rank(&diffs).ok();
                    out.push(CompareRow {
                        language: lang.to_string(),
                        level,
                        metric: metric.to_string(),
                        baseline: b,
                        condition: c,
                        n,
                        mean_b,
                        mean_c,
                        delta: relative_delta(mean_b, mean_c).ok(),
                        dz: cohens_dz(&diffs).ok(),
                        statistic: test.as_ref().map(|t| t.statistic),
                        p: test.as_ref().map(|t| t.p_value),
                        method: test.as_ref().map_or("degenerate".into(), |t| t.method.to_string()),
                        q: None,
                    });
                }
            }
        }
    }
    // FDR within each family, across languages
    let mut families: BTreeMap<(Level, Condition, Condition, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in out.iter().enumerate() {
        if r.p.is_some() {
            let m = match family {
                FdrFamily::PerMetric => r.metric.clone(),
                FdrFamily::Pooled => String::new(),
            };
            families.entry((r.level, r.baseline, r.condition, m)).or_default().push(i);
        }
    }
    for idx in families.values() {
        let ps: Vec<f64> = idx.iter().map(|&i| out[i].p.expect("has p")).collect();
        let qs = bh_fdr(&ps).expect("p-values lie in [0, 1]");
        for (&i, q) in idx.iter().zip(qs) {
            out[i].q = Some(q);
        }
    }
    out.into_iter()
        .map(|r| {
            vec![
                r.language,
                r.level.to_string(),
                r.metric,
                r.baseline.to_string(),
                r.condition.to_string(),
                r.n.to_string(),
                fmt.f(r.mean_b),
                fmt.f(r.mean_c),
                fmt.opt(r.delta),
                fmt.opt(r.dz),
                fmt.opt(r.statistic),
                fmt.opt(r.p),
                r.method,
                fmt.opt(r.q),
                r.q.or(r.p).map_or(String::new(), |p| significance_code(p).to_string()),
            ]
        })
        .collect()
}

pub const PAGE_HEADER: [&str; 10] = [
    "language",
    "level",
    "metric",
    "order",
    "n_subjects",
    "k",
    "l_statistic",
    "p_value",
    "p_method",
    "code",
];

/// Per story, a (sum, count) accumulator for every condition column.
type StoryCells<'a> = BTreeMap<&'a str, Vec<(f64, usize)>>;

/// Page test on per-story mean UID_v, hypothesised order U > P > D > PD
/// restricted to the conditions present.
fn page_rows(
    rows: &[MetricRow],
    levels: &[Level],
    conditions: &[Condition],
    fmt: NumFormat,
) -> (Vec<Vec<String>>, Vec<String>) {
    let mut out = Vec::new();
    let mut notes = Vec::new();
    let k = conditions.len();
    let col = |c: Condition| conditions.iter().position(|&x| x == c).expect("listed");
    let order: Vec<usize> = Condition::ALL
        .into_iter()
        .filter(|c| conditions.contains(c))
        .map(col)
        .collect();
    let order_label = Condition::ALL
        .into_iter()
        .filter(|c| conditions.contains(c))
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(">");
    // (language, level) -> story -> per-condition (sum, n)
    let mut acc: BTreeMap<(&str, Level), StoryCells> = BTreeMap::new();
    for r in rows {
        let cell = acc
            .entry((r.language.as_str(), r.level))
            .or_default()
            .entry(r.story_id.as_str())
            .or_insert_with(|| vec![(0.0, 0); k]);
        let e = &mut cell[col(r.condition)];
        e.0 += r.uid_v;
        e.1 += 1;
    }
    for ((lang, level), stories) in acc {
        if !levels.contains(&level) {
            continue;
        }
        let matrix: Vec<Vec<f64>> = stories
            .values()
            .filter(|cells| cells.iter().all(|c| c.1 > 0))
            .map(|cells| cells.iter().map(|c| c.0 / c.1 as f64).collect())
            .collect();
        match page_test(&matrix, &order) {
            Ok(rep) => out.push(vec![
                lang.to_string(),
                level.to_string(),
                "uid_v".into(),
                order_label.clone(),
                rep.n_subjects.to_string(),
                rep.k_treatments.to_string(),
                fmt.f(rep.l_statistic),
                fmt.f(rep.p_value),
                rep.method.to_string(),
                significance_code(rep.p_value).to_string(),
            ]),
            Err(e) => notes.push(format!("page test {lang}/{level}: {e}")),
        }
    }
    (out, notes)
}

fn boundary_rows(
    stories: &[Story],
    languages: &[String],
    conditions: &[Condition],
    config: &RunConfig,
    fmt: NumFormat,
) -> (Vec<Vec<String>>, Vec<String>) {
    let mut out = Vec::new();
    let mut notes = Vec::new();
    let multi_paragraph = stories.iter().any(|s| s.paragraphs.len() > 1);
    let levels: &[Level] = if multi_paragraph {
        &[Level::Sentence, Level::Paragraph]
    } else {
        &[Level::Sentence]
    };
    for lang in languages {
        let subset: Vec<Story> = stories.iter().filter(|s| &s.language == lang).cloned().collect();
        for &level in levels {
            for &c in conditions {
                match boundary_deltas(&subset, level, &config.boundary_windows, c, config.boundary_sign) {
                    Ok(rows) => out.extend(rows.into_iter().map(|d| {
                        vec![
                            lang.clone(),
                            d.level.to_string(),
                            d.window_w.to_string(),
                            d.condition.to_string(),
                            fmt.opt(d.mean_delta),
                            d.n_transitions.to_string(),
                            d.n_skipped.to_string(),
                        ]
                    })),
                    Err(ContourError::NoTransitions { .. }) => {
                        notes.push(format!("boundaries {lang}/{level}/{c}: no transitions"));
                    }
                    Err(e) => notes.push(format!("boundaries {lang}/{level}/{c}: {e}")),
                }
            }
        }
    }
    (out, notes)
}

fn density_files(
    stories: &[Story],
    languages: &[String],
    config: &RunConfig,
    fmt: NumFormat,
    writer: &mut Writer<'_>,
    notes: &mut Vec<String>,
) -> Result<(), PipelineError> {
    let per_story: Vec<(String, Vec<crate::contour::ReductionScores>)> = stories
        .par_iter()
        .map(|s| (s.language.clone(), reduction_scores(s).expect("all four conditions present")))
        .collect();
    for lang in languages {
        let scores: Vec<_> = per_story
            .iter()
            .filter(|(l, _)| l == lang)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        for level in [Level::Sentence, Level::Paragraph] {
            for which in [Reduction::P, Reduction::D, Reduction::PD] {
                match reduction_density(&scores, which, level, &config.density) {
                    Ok(curve) => {
                        let rows: Vec<Vec<String>> = curve
                            .bin_centers()
                            .into_iter()
                            .zip(&curve.values)
                            .map(|(x, &v)| vec![fmt.f(x), fmt.f(v)])
                            .collect();
                        let name = format!("densities/{lang}_{level}_{}.csv", which.as_str());
                        writer.csv(&name, &["bin_center", "value"], &rows)?;
                    }
                    Err(e) => notes.push(format!("density {lang}/{level}/{}: {e}", which.as_str())),
                }
            }
        }
    }
    Ok(())
}

/// Mixed-model observations for one (language, level, response).
pub fn lmm_observations(
    rows: &[MetricRow],
    language: &str,
    level: Level,
    response: Response,
    min_sentences_per_paragraph: usize,
) -> Vec<Observation> {
    rows.iter()
        .filter(|r| r.language == language && r.level == level)
        .filter(|r| level != Level::Sentence || r.siblings >= min_sentences_per_paragraph)
        .map(|r| Observation {
            y: match response {
                Response::MeanSurprisal => r.mean_surprisal,
                Response::UidV => r.uid_v,
            },
            position: r.position,
            condition: r.condition,
            length: r.n_words,
            story_id: r.story_id.clone(),
        })
        .collect()
}

fn slope_rows(
    rows: &[MetricRow],
    languages: &[String],
    levels: &[Level],
    conditions: &[Condition],
    settings: &LmmSettings,
) -> (Vec<SlopeRow>, Vec<String>) {
    let mut jobs = Vec::new();
    for lang in languages {
        for &level in levels.iter().filter(|&&l| l != Level::Caption) {
            for &response in &settings.responses {
                jobs.push((lang.clone(), level, response));
            }
        }
    }
    if jobs.is_empty() {
        return (Vec::new(), vec!["regression skipped: no sentence or paragraph level".into()]);
    }
    let baseline = if conditions.contains(&Condition::U) {
        Condition::U
    } else {
        match conditions.first() {
            Some(&c) => c,
            None => return (Vec::new(), vec!["regression skipped: no conditions".into()]),
        }
    };
    let spec = LmmSpec {
        conditions: conditions.to_vec(),
        baseline,
        include_log_length: settings.include_log_length,
        estimator: settings.estimator,
        max_iter: settings.max_iter,
    };
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(lang, level, response)| {
            let obs = lmm_observations(rows, lang, *level, *response, settings.min_sentences_per_paragraph);
            let fit = fit_lmm(&obs, &spec);
            (lang.clone(), *level, *response, fit)
        })
        .collect();
    let mut fits = Vec::new();
    let mut notes = Vec::new();
    for (language, level, response, fit) in results {
        match fit {
            Ok(fit) => {
                for d in &fit.dropped_terms {
                    notes.push(format!("lmm {language}/{level}/{response}: dropped {d}"));
                }
                fits.push(KeyedFit {
                    language,
                    level: level.to_string(),
                    response,
                    fit,
                });
            }
            Err(e) => notes.push(format!("lmm {language}/{level}/{response}: {e}")),
        }
    }
    (slopes_report(&fits), notes)
}

pub const SLOPE_HEADER: [&str; 11] = [
    "language",
    "level",
    "response",
    "condition",
    "slope",
    "std_error",
    "p_value",
    "code",
    "status",
    "n_obs",
    "n_groups",
];

fn slope_records(rows: &[SlopeRow], fmt: NumFormat) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.language.clone(),
                r.level.clone(),
                r.response.to_string(),
                r.condition.to_string(),
                fmt.f(r.slope),
                fmt.opt(r.std_error),
                fmt.opt(r.p_value),
                r.code.clone(),
                r.status.clone(),
                r.n_obs.to_string(),
                r.n_groups.to_string(),
            ]
        })
        .collect()
}
