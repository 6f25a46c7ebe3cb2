//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kipg::evaluation::{complexity_distribution, evaluate, extract_numeric};
use kipg::executor::{execute_batch, ExecutionLimits, ExecutionStatus, VariableBindings};
use kipg::gateway::{Endpoint, Gateway, MockBackend, ModelRole, PromptSet, SamplingConfig};
use kipg::pipeline::{PipelineContext, PipelineTrace};
use kipg::preference::{
    build_pairs, generate_candidates, score_candidates, score_programs, NegativeReason,
    ProgramScore, ScoreSheet, ScoringConfig,
};
use kipg::program::{lint_program, KnowledgeIntensiveProgram, LintConfig};
use kipg::retrieval::LexicalIndex;
use kipg::store::{load_documents, load_instances};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn kipg(args: &[&str], out: &Path) -> Result<String, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_kipg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!(
            "kipg {args:?} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn config(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn roles_gateway(generator: Option<&str>) -> Gateway {
    let roles = Endpoint::new(Arc::new(MockBackend::load(&fixtures().join("mock/roles")).unwrap()));
    let mut g = Gateway::new(PromptSet::default());
    for role in [ModelRole::Extractor, ModelRole::Concluder, ModelRole::LlmRetriever] {
        g.bind(role, roles.clone());
    }
    if let Some(dir) = generator {
        let gen = MockBackend::load(&fixtures().join("mock").join(dir)).unwrap();
        g.bind(ModelRole::Generator, Endpoint::new(Arc::new(gen)));
    }
    g
}

fn limits(secs: f64) -> ExecutionLimits {
    ExecutionLimits {
        wall_timeout: Duration::from_secs_f64(secs),
        ..ExecutionLimits::default()
    }
}

/// Scores in quarters; -1 marks a negative program.
fn quarter_score(id: String, q: i32) -> ProgramScore {
    if q < 0 {
        ProgramScore::new(id, 0, 4, vec![NegativeReason::RuntimeError], None)
    } else {
        ProgramScore::new(id, q as u32, 4, vec![], None)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let trials = 2000;
    for trial in 0..trials {
        let len = rng.gen_range(0..=8);
        let values: Vec<i32> = (0..len).map(|_| rng.gen_range(-1..=4)).collect();
        let scored: Vec<ProgramScore> = values
            .iter()
            .enumerate()
            .map(|(i, &q)| quarter_score(format!("p{i}"), q))
            .collect();
        let sources: BTreeMap<String, String> =
            scored.iter().map(|s| (s.program_id.clone(), String::new())).collect();
        let pairs = build_pairs(&scored, "prompt", &sources).map_err(|e| e.to_string())?;
        let got: BTreeSet<(usize, usize)> = pairs
            .iter()
            .map(|p| (p.chosen_id[1..].parse().unwrap(), p.rejected_id[1..].parse().unwrap()))
            .collect();
        ensure!(got.len() == pairs.len(), "trial {trial}: duplicate pairs");
        let mut want = BTreeSet::new();
        for (w, &sw) in values.iter().enumerate() {
            for (l, &sl) in values.iter().enumerate() {
                let ordered = sw >= 0 && sl >= 0 && sw > sl;
                let over_negative = sw >= 0 && sl < 0;
                if ordered || over_negative {
                    want.insert((w, l));
                }
            }
        }
        ensure!(got == want, "trial {trial} {values:?}: {got:?} != {want:?}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{trials} random vectors, exact match, {:.2}s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let docs = load_documents(&fixtures().join("corpus/documents.jsonl")).map_err(|e| e.to_string())?;
    let set = load_instances(&fixtures().join("corpus/instances.jsonl"), &docs).map_err(|e| e.to_string())?;
    let names = ["runtime_error.py", "missing_unit.py", "assuming.py", "clean.py"];
    let lint = LintConfig::default();
    let programs: Vec<KnowledgeIntensiveProgram> = names
        .iter()
        .map(|n| {
            let src = std::fs::read_to_string(fixtures().join("negative").join(n)).unwrap();
            KnowledgeIntensiveProgram::new(*n, "art-57", src).unwrap()
        })
        .collect();
    let reports: Vec<_> = programs.iter().map(|p| lint_program(p, &lint)).collect();
    let jobs: Vec<_> = programs.iter().zip(&reports).collect();
    let instances: Vec<_> = set.for_document("art-57").filter(|i| i.split.is_train()).collect();
    let g = roles_gateway(None);
    let l = limits(5.0);
    let ctx = PipelineContext::new(&g, &l);
    let scored = score_programs(&jobs, &instances, &docs, &ctx, 4).map_err(|e| e.to_string())?;
    let got: Vec<(f64, Vec<NegativeReason>)> = scored
        .iter()
        .map(|s| (s.score.score.as_f64(), s.score.negative_reasons.clone()))
        .collect();
    use NegativeReason::*;
    let expected_reasons = [vec![RuntimeError], vec![FuzzyParams], vec![HallucinationKeyword], vec![]];
    for (i, (score, reasons)) in got.iter().enumerate() {
        ensure!(reasons == &expected_reasons[i], "{}: reasons {reasons:?}", names[i]);
        if i < 3 {
            ensure!(*score == -1.0, "{}: score {score}", names[i]);
        } else {
            ensure!(*score >= 0.0, "{}: score {score}", names[i]);
        }
    }
    let shown: Vec<String> = got.iter().map(|(s, _)| format!("{s}")).collect();
    Ok(format!("scores ({})", shown.join(", ")))
}

fn read_traces(path: &Path) -> Vec<PipelineTrace> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn criterion_3() -> Outcome {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    kipg(&["infer", "-c", &config("infer.toml"), "--mode", "oracle", "--split", "all"], out.path())?;
    let elapsed = start.elapsed();
    let docs = load_documents(&fixtures().join("corpus/documents.jsonl")).map_err(|e| e.to_string())?;
    let set = load_instances(&fixtures().join("corpus/instances.jsonl"), &docs).map_err(|e| e.to_string())?;
    ensure!(docs.len() >= 3 && set.len() >= 10, "corpus too small");
    let traces = read_traces(&out.path().join("traces.jsonl"));
    ensure!(traces.len() == set.len(), "{} traces for {} instances", traces.len(), set.len());
    let report = evaluate(&traces, &set).map_err(|e| e.to_string())?;
    ensure!(report.average == 1.0, "accuracy {} failures {:?}", report.average, report.failures);
    let degraded = traces.iter().filter(|t| t.degraded).count();
    ensure!(degraded == 0, "{degraded} degraded traces");
    for (id, want) in [("q-lit-1", "1450"), ("q-wage-1", "1095.89")] {
        let t = traces.iter().find(|t| t.instance_id == id).unwrap();
        let got = t.extracted_numeric.map(|d| d.to_string());
        ensure!(got.as_deref() == Some(want), "{id}: {got:?}");
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{} documents, {} instances, accuracy 1.0, 0 degraded, {:.2}s",
        docs.len(),
        set.len(),
        elapsed.as_secs_f64()
    ))
}

fn probe_processes() -> usize {
    let Ok(entries) = std::fs::read_dir("/proc") else {
        return 0;
    };
    entries
        .flatten()
        .filter(|e| e.file_name().to_string_lossy().bytes().all(|b| b.is_ascii_digit()))
        .filter(|e| {
            std::fs::read(e.path().join("cmdline"))
                .map(|c| String::from_utf8_lossy(&c).contains("kipg-orphan-probe"))
                .unwrap_or(false)
        })
        .count()
}

fn criterion_4() -> Outcome {
    let load = |n: &str| {
        let src = std::fs::read_to_string(fixtures().join("faults").join(n)).unwrap();
        KnowledgeIntensiveProgram::new(n, "fault", src).unwrap()
    };
    let cases = [
        (load("raise.py"), ExecutionStatus::RuntimeError),
        (load("hang.py"), ExecutionStatus::Timeout),
        (load("garbage.py"), ExecutionStatus::ProtocolError),
        (load("forks_and_hangs.py"), ExecutionStatus::Timeout),
    ];
    let before = probe_processes();
    let mut bindings = VariableBindings::new();
    bindings.insert("x", serde_json::json!(1));
    let reps = 20;
    let jobs: Vec<_> = (0..reps)
        .flat_map(|_| cases.iter().map(|(p, _)| (p, &bindings)))
        .collect();
    let limit = 1.0;
    let results = execute_batch(&jobs, &limits(limit), 8);
    let mut worst: f64 = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| e.to_string())?;
        let (p, want) = &cases[i % cases.len()];
        ensure!(r.status == *want, "{}: {:?} ({})", p.id, r.status, r.detail);
        if r.status == ExecutionStatus::Timeout {
            let t = r.wall_time.as_secs_f64();
            worst = worst.max(t);
            ensure!(t <= limit + 0.5, "{}: timeout after {t:.3}s", p.id);
        }
    }
    std::thread::sleep(Duration::from_millis(200));
    let after = probe_processes();
    ensure!(after <= before, "{} orphaned grandchildren survive", after - before);
    Ok(format!(
        "{} runs classified, slowest timeout {worst:.3}s, no orphans",
        reps * cases.len()
    ))
}

fn criterion_5() -> Outcome {
    let cases: [(&str, Option<&str>); 20] = [
        ("Therefore, Zhang deserves 80,000 yuan /365 days x 5 days =1,095.89 yuan.", Some("1095.89")),
        ("Calculate the maximum fine: 5 million yuan ×5% = 250,000 yuan.", Some("250000")),
        ("With the minimum divorce case fee of 50 yuan, the total payment fee is 1400 yuan + 50 yuan = 1450 yuan.", Some("1450")),
        ("So the answer is 1450 yuan.", Some("1450")),
        ("So the answer is 120.8333 yuan.", Some("120.8333")),
        ("The fee is 1,234,567.50 yuan in total.", Some("1234567.5")),
        ("Step 1: 3 x 4 = 12. Step 2: 12 + 30 = 42.", Some("42")),
        ("The refund is -35.5 yuan.", Some("-35.5")),
        ("Article 13-2 applies; the fee is 300 yuan.", Some("300")),
        ("No number appears in this response.", None),
        ("", None),
        ("Rates of 1% and 5% give 50000 and 250000.", Some("250000")),
        ("The answer is 2,000.", Some("2000")),
        ("Interest: 0.05 per day over 30 days = 1.5 yuan", Some("1.5")),
        ("He earns 80000 yuan/year, which is 219.18 yuan per day.", Some("219.18")),
        ("Total: 1,400 + 50 = 1,450", Some("1450")),
        ("So the answer is 600000.00 yuan.", Some("600000")),
        ("Compensation of 4200 yuan.", Some("4200")),
        ("The answer is 7.", Some("7")),
        ("A-1 class vehicles pay 12 yuan.", Some("12")),
    ];
    for (text, want) in cases {
        let got = extract_numeric(text).map(|d| d.to_string());
        ensure!(got.as_deref() == want, "{text:?}: {got:?} != {want:?}");
    }
    Ok(format!("{}/{} strings", cases.len(), cases.len()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn criterion_6() -> Outcome {
    let one = tempfile::tempdir().map_err(|e| e.to_string())?;
    let two = tempfile::tempdir().map_err(|e| e.to_string())?;
    kipg(&["loop", "-c", &config("loop-1.toml")], one.path())?;
    kipg(&["loop", "-c", &config("loop-2.toml")], two.path())?;
    let best = |dir: &Path| -> BTreeMap<String, f64> {
        read_json(&dir.join("iteration_report.json"))["documents"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| {
                let s = d["selected"].get(1).and_then(|v| v.as_f64()).unwrap_or(-1.0);
                (d["document_id"].as_str().unwrap().to_string(), s)
            })
            .collect()
    };
    let (b1, b2) = (best(one.path()), best(two.path()));
    ensure!(b1.keys().eq(b2.keys()), "documents differ");
    for (doc, s1) in &b1 {
        ensure!(b2[doc] >= *s1, "{doc}: {s1} -> {}", b2[doc]);
    }
    let pairs = std::fs::read_to_string(two.path().join("dpo.jsonl")).unwrap_or_default();
    ensure!(pairs.lines().count() > 0, "iteration 2 has no pairs");
    let shown: Vec<String> = b1
        .iter()
        .map(|(d, s)| format!("{d} {s:.4} -> {:.4}", b2[d]))
        .collect();
    Ok(format!("{}; {} pairs at iteration 2", shown.join(", "), pairs.lines().count()))
}

fn criterion_7() -> Outcome {
    let docs = load_documents(&fixtures().join("loop_corpus/documents.jsonl")).map_err(|e| e.to_string())?;
    let set = load_instances(&fixtures().join("loop_corpus/small_set_instances.jsonl"), &docs)
        .map_err(|e| e.to_string())?;
    let g = roles_gateway(Some("gen-1"));
    let cands = generate_candidates(&docs, &g, &SamplingConfig::default(), &LintConfig::default(), 1)
        .map_err(|e| e.to_string())?;
    let l = limits(2.0);
    let full = score_candidates(&cands, &docs, &set, &g, &l, &ScoringConfig::default(), 1)
        .map_err(|e| e.to_string())?;
    let threshold = 0.25;
    let filtered_config = ScoringConfig {
        small_set_threshold: Some(threshold),
        ..ScoringConfig::default()
    };
    let filtered = score_candidates(&cands, &docs, &set, &g, &l, &filtered_config, 1)
        .map_err(|e| e.to_string())?;
    let by_id = |sheet: &ScoreSheet, doc: usize| -> BTreeMap<String, f64> {
        sheet.documents[doc]
            .scores
            .iter()
            .map(|s| (s.program_id.clone(), s.score.as_f64()))
            .collect()
    };
    let mut summary = Vec::new();
    for (i, d) in filtered.documents.iter().enumerate() {
        let small: BTreeMap<String, f64> = d
            .small_set_scores
            .as_ref()
            .unwrap()
            .iter()
            .map(|s| (s.program_id.clone(), s.score.as_f64()))
            .collect();
        let full_scores = by_id(&full, i);
        // Precondition: the two scorings never rank a pair in opposite order.
        for (a, sa) in &small {
            for (b, sb) in &small {
                if sa > sb && *sa >= 0.0 && *sb >= 0.0 {
                    ensure!(full_scores[a] >= full_scores[b], "fixture rankings disagree on {a}, {b}");
                }
            }
        }
        let retained: BTreeSet<&String> = d.retained.as_ref().unwrap().iter().collect();
        let full_best = full.documents[i].selected.as_ref().unwrap();
        ensure!(retained.contains(full_best), "{}: best {full_best} filtered out", d.document_id);
        for (id, s) in &small {
            let keep = *s >= threshold;
            ensure!(retained.contains(id) == keep, "{id}: small score {s}, retained {}", !keep);
        }
        let scored: BTreeMap<String, f64> = by_id(&filtered, i);
        for id in &retained {
            ensure!(scored[*id] == full_scores[*id], "{id}: full-set score changed");
        }
        summary.push(format!("{} keeps {}/{}", d.document_id, retained.len(), small.len()));
    }
    Ok(summary.join(", "))
}

fn criterion_8() -> Outcome {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        for cmd in ["gen", "score", "build-dpo"] {
            kipg(&[cmd, "-c", &config("loop-1.toml"), "--seed", "7"], dir.path())?;
        }
    }
    let files = ["programs.jsonl", "scores.json", "dpo.jsonl", "manifest.json"];
    for f in files {
        let a = std::fs::read(runs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(runs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(a == b, "{f} differs between runs");
    }
    Ok(format!("{} byte-identical across 2 runs", files.join(", ")))
}

fn criterion_9() -> Outcome {
    let docs = load_documents(&fixtures().join("corpus/documents.jsonl")).map_err(|e| e.to_string())?;
    let set = load_instances(&fixtures().join("corpus/instances.jsonl"), &docs).map_err(|e| e.to_string())?;
    let index = LexicalIndex::build(&docs).map_err(|e| e.to_string())?;
    for inst in set.iter() {
        let top = index.retrieve(&inst.query, 1);
        let got = top.first().map(|(id, _)| id.as_str());
        ensure!(got == Some(inst.primary_document()), "{}: top-1 {got:?}", inst.id);
    }
    Ok(format!("{}/{} queries", set.len(), set.len()))
}

fn criterion_10() -> Outcome {
    // Shorter programs score better on this constructed set.
    let programs = [
        (4, 1.0),
        (4, 1.0),
        (5, 1.0),
        (6, 0.75),
        (6, 1.0),
        (8, 0.5),
        (9, 0.75),
        (11, 0.25),
        (12, 0.5),
        (15, 0.0),
        (15, 0.25),
        (20, 0.0),
        (7, -1.0),
    ];
    let dist = complexity_distribution(&programs);
    let r = dist.rank_correlation.ok_or("correlation undefined")?;
    ensure!(r <= 0.0, "rank correlation {r}");
    ensure!(
        dist.buckets.iter().map(|b| b.count).sum::<usize>() == programs.len() - 1,
        "negative program was bucketed"
    );
    Ok(format!("rank correlation {r:.4} over {} buckets", dist.buckets.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("pair-building oracle equivalence", criterion_1),
        ("negative-filter rules", criterion_2),
        ("mock end-to-end inference", criterion_3),
        ("executor robustness", criterion_4),
        ("numeric extraction", criterion_5),
        ("iteration monotonicity", criterion_6),
        ("small-set filter consistency", criterion_7),
        ("determinism of gen, score, build-dpo", criterion_8),
        ("lexical retrieval sanity", criterion_9),
        ("complexity distribution", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
