//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. Exits non-zero on any failure that is not listed
//! in `KNOWN_UNATTAINABLE`.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uidc_core::contour::{boundary_deltas, reduction_density, reduction_scores, BoundarySign, DensityConfig, Reduction};
use uidc_core::lmm::{fit_lmm, fit_lmm_fixed_covariance, LmmSpec, Observation};
use uidc_core::metrics::{coeff_variation, uid_global, uid_local, variance_contributions, Level};
use uidc_core::pipeline::{run_analyze, RunConfig};
use uidc_core::stats::{bh_fdr, page_test, wilcoxon_signed_rank, PMethod};
use uidc_core::synth::{generate, mixed_dataset, MixedSynthSpec, SynthSpec};
use uidc_core::trace::{write_trace, Condition, Story};

/// Criteria that cannot be met as stated, with the reason. They still run
/// and still print FAIL.
const KNOWN_UNATTAINABLE: &[(&str, &str)] = &[(
    "worked-example",
    "the stated CV of 1.01 for the U sequence is inconsistent with its own mean and sd; \
     sd(n-1)/mean gives 1.004922, outside +/-0.005",
)];

type Outcome = Result<Vec<String>, Vec<String>>;
type Criterion = (&'static str, fn() -> Outcome);

struct Check {
    details: Vec<String>,
    ok: bool,
}

impl Check {
    fn new() -> Self {
        Self {
            details: Vec::new(),
            ok: true,
        }
    }

    fn expect(&mut self, cond: bool, msg: impl Into<String>) {
        let msg = msg.into();
        if cond {
            self.details.push(format!("ok   {msg}"));
        } else {
            self.ok = false;
            self.details.push(format!("FAIL {msg}"));
        }
    }

    fn within(&mut self, elapsed: Duration, limit: Duration) {
        self.expect(
            elapsed <= limit,
            format!("runtime {:.2}s <= {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
        );
    }

    fn finish(self) -> Outcome {
        if self.ok {
            Ok(self.details)
        } else {
            Err(self.details)
        }
    }
}

const POLAR_U: [f64; 5] = [10.34, 7.87, 0.08, 0.98, 2.95];
const POLAR_P: [f64; 5] = [10.45, 0.49, 0.01, 1.43, 0.39];

fn worked_example() -> Outcome {
    let t = Instant::now();
    let mut c = Check::new();
    let cv_u = coeff_variation(&POLAR_U).unwrap();
    let cv_p = coeff_variation(&POLAR_P).unwrap();
    let v = uid_global(&POLAR_U).unwrap();
    c.expect((cv_u - 1.01).abs() <= 0.005, format!("CV(U) = {cv_u:.6}, target 1.01 +/- 0.005"));
    c.expect((cv_p - 1.74).abs() <= 0.005, format!("CV(P) = {cv_p:.6}, target 1.74 +/- 0.005"));
    c.expect((v - 15.955).abs() <= 1e-3, format!("uid_global(U) = {v:.6}, target 15.955 +/- 1e-3"));
    c.within(t.elapsed(), Duration::from_secs(1));
    c.finish()
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let mut c = Check::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_v, mut worst_lv, mut worst_cv, mut worst_dec): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for _ in 0..10_000 {
        let n = rng.random_range(2..=40);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        worst_v = worst_v.max(rel(uid_global(&s).unwrap(), common::pairwise_population_variance(&s)));
        worst_lv = worst_lv.max(rel(uid_local(&s).unwrap(), common::successive_difference_mean(&s)));
        worst_cv = worst_cv.max(rel(coeff_variation(&s).unwrap(), common::sample_cv(&s)));
    }
    let stories = generate(&SynthSpec {
        n_stories: 30,
        onset_spike: 4.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut sentences = 0;
    for story in &stories {
        for sent in &story.sentences {
            for cond in story.conditions() {
                let s = story.word_surprisals(sent.words.clone(), cond).unwrap();
                let sum: f64 = variance_contributions(&s).iter().sum();
                worst_dec = worst_dec.max(rel(sum, uid_global(&s).unwrap()));
                sentences += 1;
            }
        }
    }
    c.expect(worst_v <= 1e-12, format!("uid_global vs pairwise oracle, worst rel err {worst_v:.2e}"));
    c.expect(worst_lv <= 1e-12, format!("uid_local vs loop oracle, worst rel err {worst_lv:.2e}"));
    c.expect(worst_cv <= 1e-12, format!("cv vs pairwise oracle, worst rel err {worst_cv:.2e}"));
    c.expect(
        worst_dec <= 1e-12,
        format!("sum of POS contributions = uid_v on {sentences} sentence-conditions, worst {worst_dec:.2e}"),
    );
    c.within(t.elapsed(), Duration::from_secs(10));
    c.finish()
}

fn exact_test_oracles() -> Outcome {
    let t = Instant::now();
    let mut c = Check::new();
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 500 {
        let n = rng.random_range(1..=12);
        // small integers give ties and zeros
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-6i32..=6) as f64).collect();
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        let r = wilcoxon_signed_rank(&d).unwrap();
        let (stat, p) = common::wilcoxon_enumerated(&d);
        if r.method != PMethod::Exact || r.statistic != stat {
            worst = f64::INFINITY;
        }
        worst = worst.max((r.p_value - p).abs());
        checked += 1;
    }
    c.expect(worst <= 1e-12, format!("wilcoxon exact p vs 2^n enumeration, 500 inputs, worst {worst:.2e}"));

    let mut worst_l = 0.0f64;
    let mut worst_p = 0.0f64;
    let order = [0usize, 1, 2, 3];
    let weights = [4.0, 3.0, 2.0, 1.0];
    for n_subjects in 1..=5 {
        for _ in 0..4 {
            let m: Vec<Vec<f64>> = (0..n_subjects)
                .map(|_| (0..4).map(|_| rng.random_range(0..4) as f64).collect())
                .collect();
            let r = page_test(&m, &order).unwrap();
            let (l, p) = common::page_enumerated(&m, &weights);
            if r.method != PMethod::Exact {
                worst_p = f64::INFINITY;
            }
            worst_l = worst_l.max((r.l_statistic - l).abs());
            worst_p = worst_p.max((r.p_value - p).abs());
        }
    }
    c.expect(worst_l == 0.0, format!("page L vs enumeration (N <= 5, k = 4), worst {worst_l:.2e}"));
    c.expect(worst_p <= 1e-12, format!("page exact p vs enumeration, worst {worst_p:.2e}"));

    let mut worst_q = 0.0f64;
    for _ in 0..100 {
        let p: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..=1.0)).collect();
        let q = bh_fdr(&p).unwrap();
        for (a, b) in q.iter().zip(common::bh_direct(&p)) {
            worst_q = worst_q.max((a - b).abs());
        }
    }
    c.expect(worst_q <= 1e-12, format!("BH q vs step-up definition, 100 x 100, worst {worst_q:.2e}"));
    c.within(t.elapsed(), Duration::from_secs(60));
    c.finish()
}

fn design_for(terms: &[String], rows: &[Observation]) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(rows.len(), terms.len(), |i, j| {
        let r = &rows[i];
        let t = terms[j].as_str();
        if t == "(Intercept)" {
            1.0
        } else if t == "position" {
            r.position
        } else if t == "log_length" {
            (r.length as f64).ln()
        } else if let Some(c) = t.strip_prefix("position:condition[") {
            if r.condition.as_str() == c.trim_end_matches(']') {
                r.position
            } else {
                0.0
            }
        } else if let Some(c) = t.strip_prefix("condition[") {
            (r.condition.as_str() == c.trim_end_matches(']')) as u8 as f64
        } else {
            panic!("unexpected term {t}")
        }
    });
    (x, DVector::from_iterator(rows.len(), rows.iter().map(|r| r.y)))
}

fn lmm_recovery() -> Outcome {
    let t = Instant::now();
    let mut c = Check::new();
    let spec = MixedSynthSpec::default();
    let rows = mixed_dataset(&spec);
    let fit = fit_lmm(&rows, &LmmSpec::default()).unwrap();
    c.expect(fit.converged, format!("REML converged in {} iterations", fit.iterations));
    let mut planted: BTreeMap<String, f64> = BTreeMap::new();
    planted.insert("(Intercept)".into(), spec.intercept);
    planted.insert("position".into(), spec.position_slope);
    planted.insert("log_length".into(), spec.log_length_coef);
    for (cond, v) in &spec.condition_effects {
        planted.insert(format!("condition[{cond}]"), *v);
    }
    for (cond, v) in &spec.slope_shifts {
        planted.insert(format!("position:condition[{cond}]"), *v);
    }
    c.expect(fit.terms.len() == planted.len(), format!("{} fixed effects", fit.terms.len()));
    for (term, &truth) in &planted {
        let est = fit.coefficient(term).unwrap_or(f64::NAN);
        let err = ((est - truth) / truth).abs();
        c.expect(err <= 0.05, format!("{term}: {est:.4} vs {truth} (rel err {:.2}%)", 100.0 * err));
    }

    let flat = mixed_dataset(&MixedSynthSpec {
        intercept_sd: 0.0,
        slope_sd: 0.0,
        ..MixedSynthSpec::default()
    });
    let zero_g = fit_lmm_fixed_covariance(&flat, &LmmSpec::default(), [[0.0; 2]; 2]).unwrap();
    let free = fit_lmm(&flat, &LmmSpec::default()).unwrap();
    let (x, y) = design_for(&zero_g.terms, &flat);
    let beta = common::ols(&x, &y);
    let d_fixed = zero_g.beta.iter().zip(beta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let d_free = free.beta.iter().zip(beta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    c.expect(d_fixed <= 1e-4, format!("G fixed at 0 vs OLS, max |diff| {d_fixed:.2e}"));
    // a free fit estimates a small non-zero G from sampling noise, so its
    // GLS estimates move away from OLS; reported, not scored
    c.details.push(format!(
        "info free REML fit on zero-variance data vs OLS, max |diff| {d_free:.2e}, G = {:?}",
        free.g
    ));
    c.within(t.elapsed(), Duration::from_secs(60));
    c.finish()
}

fn write_corpus(stories: &[Story], path: &Path) {
    let mut buf = Vec::new();
    write_trace(stories, &mut buf).unwrap();
    std::fs::write(path, buf).unwrap();
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn end_to_end_ordering() -> Outcome {
    let t = Instant::now();
    let mut c = Check::new();
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("synth.jsonl");
    write_corpus(&generate(&SynthSpec::default()).unwrap(), &trace);
    let cfg = RunConfig {
        inputs: vec![trace],
        output_dir: dir.path().join("out"),
        ..RunConfig::default()
    };
    let outcome = run_analyze(&cfg).unwrap();
    c.expect(outcome.manifest.stories_kept == 50, format!("{} stories analysed", outcome.manifest.stories_kept));
    let cmp = read_csv(&cfg.output_dir.join("comparison.csv"));
    let page = read_csv(&cfg.output_dir.join("page.csv"));
    for level in ["sentence", "paragraph"] {
        let uid_v = |cond: &str| -> f64 {
            cmp.iter()
                .find(|r| r["level"] == level && r["metric"] == "uid_v" && r["baseline"] == "U" && r["condition"] == cond)
                .map(|r| r["mean_condition"].parse().unwrap())
                .unwrap_or(f64::NAN)
        };
        let u: f64 = cmp
            .iter()
            .find(|r| r["level"] == level && r["metric"] == "uid_v" && r["baseline"] == "U")
            .map(|r| r["mean_baseline"].parse().unwrap())
            .unwrap_or(f64::NAN);
        let (p, d, pd) = (uid_v("P"), uid_v("D"), uid_v("PD"));
        c.expect(
            u > p && p > d && d > pd,
            format!("{level}: mean uid_v U {u:.3} > P {p:.3} > D {d:.3} > PD {pd:.3}"),
        );
        let row = page.iter().find(|r| r["level"] == level);
        let pp: f64 = row.map_or(f64::NAN, |r| r["p_value"].parse().unwrap());
        c.expect(pp < 0.001, format!("{level}: page p = {pp:.3e} < 0.001"));
        let up = cmp
            .iter()
            .find(|r| r["level"] == level && r["metric"] == "uid_v" && r["baseline"] == "U" && r["condition"] == "P");
        let q: f64 = up.map_or(f64::NAN, |r| r["q_value"].parse().unwrap());
        let delta: f64 = up.map_or(f64::NAN, |r| r["delta_pct"].parse().unwrap());
        c.expect(
            q < 0.001 && delta < 0.0,
            format!("{level}: wilcoxon U vs P q = {q:.3e} < 0.001, delta {delta:.2}% < 0"),
        );
    }
    c.within(t.elapsed(), Duration::from_secs(30));
    c.finish()
}

fn contour_structure() -> Outcome {
    let t = Instant::now();
    let mut c = Check::new();
    let stories = generate(&SynthSpec {
        n_stories: 30,
        onset_spike: 8.0,
        noise_sd: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    for level in [Level::Sentence, Level::Paragraph] {
        let d = boundary_deltas(&stories, level, &[1, 2, 3], Condition::U, BoundarySign::FinalMinusFirst).unwrap();
        let m: Vec<f64> = d.iter().map(|x| x.mean_delta.unwrap_or(f64::NAN)).collect();
        c.expect(m[0] == -8.0, format!("{level}: delta_1 = {}", m[0]));
        c.expect(
            m[0].abs() > m[1].abs() && m[1].abs() > m[2].abs(),
            format!("{level}: |d1| {:.3} > |d2| {:.3} > |d3| {:.3}", m[0].abs(), m[1].abs(), m[2].abs()),
        );
    }
    // shrinkage pulls the spiked onset toward the mean, so positive
    // reductions occur only at sentence onsets
    let scores: Vec<_> = stories.iter().flat_map(|s| reduction_scores(s).unwrap()).collect();
    for which in Reduction::ALL {
        let curve = reduction_density(&scores, which, Level::Sentence, &DensityConfig::default()).unwrap();
        let peak = curve.argmax();
        c.expect(
            peak < curve.bins / 10,
            format!("{which} density peaks in bin {peak} of {} (first decile)", curve.bins),
        );
    }
    c.within(t.elapsed(), Duration::from_secs(30));
    c.finish()
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let mut c = Check::new();
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("synth.jsonl");
    write_corpus(
        &generate(&SynthSpec {
            n_stories: 30,
            languages: vec!["aaa".into(), "bbb".into()],
            onset_spike: 2.0,
            drift_slope: 1.0,
            ..SynthSpec::default()
        })
        .unwrap(),
        &trace,
    );
    let mut outputs = Vec::new();
    for threads in [1, 4, 8] {
        let cfg = RunConfig {
            inputs: vec![trace.clone()],
            output_dir: dir.path().join(format!("t{threads}")),
            threads: Some(threads),
            ..RunConfig::default()
        };
        run_analyze(&cfg).unwrap();
        outputs.push(dir_contents(&cfg.output_dir));
    }
    let n_files = outputs[0].len();
    c.expect(n_files > 5, format!("{n_files} output files"));
    c.expect(outputs[0] == outputs[1], "1 vs 4 threads byte-identical");
    c.expect(outputs[0] == outputs[2], "1 vs 8 threads byte-identical");
    let mut from_manifest = RunConfig::from_json_file(&dir.path().join("t1/manifest.json")).unwrap();
    from_manifest.output_dir = dir.path().join("replay");
    run_analyze(&from_manifest).unwrap();
    c.expect(
        dir_contents(&from_manifest.output_dir) == outputs[0],
        "re-run from manifest byte-identical",
    );
    c.within(t.elapsed(), Duration::from_secs(60));
    c.finish()
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("worked-example", worked_example),
        ("metric-oracles", metric_oracles),
        ("exact-test-oracles", exact_test_oracles),
        ("lmm-recovery", lmm_recovery),
        ("end-to-end-ordering", end_to_end_ordering),
        ("contour-structure", contour_structure),
        ("determinism", determinism),
    ];
    let mut unexpected = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_UNATTAINABLE.iter().find(|(n, _)| *n == name);
        match &result {
            Ok(_) => println!("[PASS] {name} ({secs:.2}s)"),
            Err(_) => {
                println!("[FAIL] {name} ({secs:.2}s)");
                if let Some((_, why)) = known {
                    println!("       known: {why}");
                } else {
                    unexpected += 1;
                }
            }
        }
        for line in result.as_ref().unwrap_or_else(|e| e) {
            println!("       {line}");
        }
    }
    if unexpected > 0 {
        println!("{unexpected} criterion/criteria failed");
        std::process::exit(1);
    }
}
