use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uidc_core::align::AlignMode;
use uidc_core::contour::{BoundarySign, DensityWeighting};
use uidc_core::lmm::Estimator;
use uidc_core::metrics::Level;
use uidc_core::pipeline::{run_analyze, FdrFamily, RunConfig, Stage};
use uidc_core::synth::{generate, SynthSpec};
use uidc_core::trace::{validate_stream, write_trace, Condition, FilterConfig};

#[derive(Parser)]
#[command(name = "uidc", version, about = "Information-density analysis of surprisal traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check trace files against the schema and invariants.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Write a synthetic trace corpus.
    Synth(SynthArgs),
    /// Run every analysis stage.
    Analyze(AnalyzeArgs),
    /// Per-unit measurements only (metrics.csv, pos.csv).
    Metrics(AnalyzeArgs),
    /// Paired condition comparisons and the ordered test.
    Compare(AnalyzeArgs),
    /// Windowed surprisal differences across unit boundaries.
    Boundaries(AnalyzeArgs),
    /// Positional densities of surprisal reductions.
    Densities(AnalyzeArgs),
    /// Mixed-effects slopes over position.
    Regress(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with generator settings; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output trace; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_stories: Option<usize>,
    /// Comma-separated language codes.
    #[arg(long, value_delimiter = ',')]
    languages: Option<Vec<String>>,
    #[arg(long)]
    paragraphs: Option<usize>,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    words: Option<usize>,
    #[arg(long)]
    onset_spike: Option<f64>,
    #[arg(long)]
    drift_slope: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Per-condition shrinkage, e.g. `U=1,P=0.9,D=0.7,PD=0.6`.
    #[arg(long, value_delimiter = ',')]
    shrinkage: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace files.
    inputs: Vec<PathBuf>,
    /// JSON config or a previous run's manifest.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<AlignMode>)]
    align_mode: Option<AlignMode>,
    /// Skip truncation, short-paragraph and language-size filters.
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    max_paragraphs: Option<usize>,
    #[arg(long)]
    min_words: Option<usize>,
    /// Languages need more than this many stories.
    #[arg(long)]
    min_stories: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_from_str::<Level>)]
    levels: Option<Vec<Level>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_from_str::<Condition>)]
    conditions: Option<Vec<Condition>>,
    /// FDR family: per-metric or pooled.
    #[arg(long, value_parser = parse_fdr)]
    fdr_family: Option<FdrFamily>,
    #[arg(long)]
    bins: Option<usize>,
    /// Smoothing sigma in bins.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Weight densities by counts instead of reduction size.
    #[arg(long)]
    count_weighted: bool,
    #[arg(long, value_delimiter = ',')]
    boundary_windows: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_from_str::<BoundarySign>)]
    boundary_sign: Option<BoundarySign>,
    /// reml or ml.
    #[arg(long, value_parser = parse_estimator)]
    estimator: Option<Estimator>,
    /// POS tags to drop before measuring, e.g. PUNCT.
    #[arg(long, value_delimiter = ',')]
    exclude_pos: Option<Vec<String>>,
    /// Worker threads (UIDC_THREADS takes precedence).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Round CSV numbers to 9 significant digits.
    #[arg(long)]
    pretty: bool,
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn parse_fdr(s: &str) -> Result<FdrFamily, String> {
    match s {
        "per-metric" => Ok(FdrFamily::PerMetric),
        "pooled" => Ok(FdrFamily::Pooled),
        other => Err(format!("unknown FDR family `{other}` (expected per-metric|pooled)")),
    }
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    match s {
        "reml" => Ok(Estimator::Reml),
        "ml" => Ok(Estimator::Ml),
        other => Err(format!("unknown estimator `{other}` (expected reml|ml)")),
    }
}

impl AnalyzeArgs {
    fn into_config(self, stages: Option<Stage>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if !self.inputs.is_empty() {
            cfg.inputs = self.inputs;
        }
        match self.out {
            Some(out) => cfg.output_dir = out,
            None if self.config.is_some() => bail!("--out is required with --config"),
            None => {}
        }
        if let Some(m) = self.align_mode {
            cfg.align.mode = m;
        }
        if self.no_filter {
            cfg.filter = None;
        } else if self.max_paragraphs.is_some() || self.min_words.is_some() || self.min_stories.is_some() {
            let mut f = cfg.filter.unwrap_or_else(FilterConfig::default);
            if let Some(v) = self.max_paragraphs {
                f.max_paragraphs = v;
            }
            if let Some(v) = self.min_words {
                f.min_words_per_paragraph = v;
            }
            if let Some(v) = self.min_stories {
                f.min_stories_per_language = v;
            }
            cfg.filter = Some(f);
        }
        if let Some(v) = self.levels {
            cfg.levels = v;
        }
        if let Some(v) = self.conditions {
            cfg.conditions = v;
        }
        if let Some(v) = self.fdr_family {
            cfg.fdr_family = v;
        }
        if let Some(v) = self.bins {
            cfg.density.bins = v;
        }
        if let Some(v) = self.bandwidth {
            cfg.density.bandwidth_bins = v;
        }
        if self.count_weighted {
            cfg.density.weighting = DensityWeighting::Count;
        }
        if let Some(v) = self.boundary_windows {
            cfg.boundary_windows = v;
        }
        if let Some(v) = self.boundary_sign {
            cfg.boundary_sign = v;
        }
        if let Some(v) = self.estimator {
            cfg.lmm.estimator = v;
        }
        if let Some(v) = self.exclude_pos {
            cfg.exclude_pos = v;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.pretty {
            cfg.pretty = true;
        }
        if let Some(stage) = stages {
            cfg.stages = [stage].into_iter().collect();
        }
        if cfg.inputs.is_empty() {
            bail!("no input traces given");
        }
        Ok(cfg)
    }
}

fn cmd_validate(paths: &[PathBuf]) -> Result<ExitCode> {
    let mut failed = false;
    for path in paths {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let report = validate_stream(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        println!(
            "{}: stories={} tokens={} words={} languages={} violations={}",
            path.display(),
            report.stories,
            report.tokens,
            report.words,
            report.languages,
            report.violations.len()
        );
        for v in &report.violations {
            eprintln!("{}:{}: {}", path.display(), v.line, v.message);
        }
        failed |= !report.violations.is_empty();
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = args.n_stories {
        spec.n_stories = v;
    }
    if let Some(v) = args.languages {
        spec.languages = v;
    }
    if let Some(v) = args.paragraphs {
        spec.paragraphs_per_story = v;
    }
    if let Some(v) = args.sentences {
        spec.sentences_per_paragraph = v;
    }
    if let Some(v) = args.words {
        spec.words_per_sentence = v;
    }
    if let Some(v) = args.onset_spike {
        spec.onset_spike = v;
    }
    if let Some(v) = args.drift_slope {
        spec.drift_slope = v;
    }
    if let Some(v) = args.noise_sd {
        spec.noise_sd = v;
    }
    if let Some(items) = args.shrinkage {
        spec.condition_shrinkage.clear();
        for item in items {
            let (c, k) = item
                .split_once('=')
                .with_context(|| format!("shrinkage entry `{item}` is not COND=FACTOR"))?;
            let c: Condition = c.trim().parse().map_err(anyhow::Error::msg)?;
            let k: f64 = k.trim().parse().with_context(|| format!("shrinkage factor in `{item}`"))?;
            spec.condition_shrinkage.insert(c, k);
        }
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let stories = generate(&spec)?;
    match &args.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(f);
            write_trace(&stories, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_trace(&stories, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs, stage: Option<Stage>) -> Result<()> {
    let cfg = args.into_config(stage)?;
    let outcome = run_analyze(&cfg)?;
    let m = &outcome.manifest;
    println!(
        "{}: {} of {} stories, {} language(s), conditions {}",
        outcome.output_dir.display(),
        m.stories_kept,
        m.stories_read,
        m.languages.len(),
        m.conditions.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    );
    for f in &m.files {
        println!("  wrote {f}");
    }
    for n in &m.notes {
        eprintln!("note: {n}");
    }
    Ok(())
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { paths } => return cmd_validate(&paths),
        Command::Synth(a) => cmd_synth(a)?,
        Command::Analyze(a) => cmd_analyze(a, None)?,
        Command::Metrics(a) => cmd_analyze(a, Some(Stage::Metrics))?,
        Command::Compare(a) => cmd_analyze(a, Some(Stage::Compare))?,
        Command::Boundaries(a) => cmd_analyze(a, Some(Stage::Boundaries))?,
        Command::Densities(a) => cmd_analyze(a, Some(Stage::Densities))?,
        Command::Regress(a) => cmd_analyze(a, Some(Stage::Regress))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
