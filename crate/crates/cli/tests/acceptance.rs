//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use commander_core::datasets::{split_stats, DatasetManifest, Split, SplitExpectation, SplitStats};
use commander_core::evaluation::f1_from;
use commander_core::evidence::parse_label;
use commander_core::registry::SubTaskKind;
use commander_core::sample::{Label, Sample};

type Check = Result<String, String>;

fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn corpus() -> PathBuf {
    manifest_dir().join("tests/fixtures/corpus50")
}

fn expected() -> Value {
    serde_json::from_str(&fs::read_to_string(corpus().join("expected.json")).unwrap()).unwrap()
}

fn commander(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_commander"))
        .args(args)
        .output()
        .expect("spawn commander")
}

fn run_into(out: &Path, extra: &[&str]) -> Result<(), String> {
    let config = corpus().join("config.toml");
    let dataset = corpus().join("test.jsonl");
    let mut args = vec![
        "run",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = commander(&args);
    if o.status.code() == Some(0) {
        Ok(())
    } else {
        Err(format!(
            "run exited {:?}: {}",
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn calls(report: &Value, kind: SubTaskKind) -> u64 {
    report["call_counts"][kind.display_name()].as_u64().unwrap()
}

fn c1_f1_identity() -> Check {
    let path = manifest_dir().join("../core/tests/fixtures/published_f1_rows.csv");
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let num = |i: usize| cols[i].trim().parse::<f64>().map_err(|e| format!("{line}: {e}"));
        let (reported, p, r) = (num(2)?, num(3)?, num(4)?);
        let dev = (f1_from(p, r) - reported).abs();
        ensure(
            dev <= 0.25,
            format!("{} {}: computed {:.2} vs {reported}", cols[0], cols[1], f1_from(p, r)),
        )?;
        worst = worst.max(dev);
        rows += 1;
    }
    ensure(rows == 8, format!("expected 8 rows, found {rows}"))?;
    Ok(format!("8/8 rows within 0.25, max deviation {worst:.3}"))
}

fn c2_call_counts(tmp: &Path) -> Check {
    use SubTaskKind::*;
    let exp = expected();
    let full = tmp.join("c2-full");
    run_into(&full, &[])?;
    let report = read_json(&full.join("report.json"));
    let n = exp["n_samples"].as_u64().unwrap();
    let imaged = exp["n_images"].as_u64().unwrap();
    ensure(n == 50 && imaged == 30, "corpus must be 50 samples with 30 images")?;
    for (kind, want) in [(Keyword, 50), (Sentiment, 50), (ImgSum, 30)] {
        ensure(
            calls(&report, kind) == want,
            format!("{kind}: {} calls, want {want}", calls(&report, kind)),
        )?;
    }

    let ablate = tmp.join("c2-ablate");
    let o = commander(&[
        "ablate",
        "--config",
        corpus().join("config.toml").to_str().unwrap(),
        "--dataset",
        corpus().join("test.jsonl").to_str().unwrap(),
        "--out",
        ablate.to_str().unwrap(),
    ]);
    ensure(
        o.status.code() == Some(0),
        format!("ablate exited {:?}", o.status.code()),
    )?;
    let summary = read_json(&ablate.join("summary.json"));
    for (row, want) in summary
        .as_array()
        .unwrap()
        .iter()
        .zip(exp["ablations"].as_array().unwrap())
    {
        for name in want["disabled"].as_array().unwrap() {
            let kind: SubTaskKind = name.as_str().unwrap().parse().unwrap();
            let got = row["call_counts"][kind.display_name()].as_u64().unwrap();
            ensure(got == 0, format!("{}: {kind} called {got} times", row["label"]))?;
        }
    }

    let text_only = tmp.join("c2-text");
    run_into(&text_only, &["--text-only"])?;
    let report = read_json(&text_only.join("report.json"));
    for kind in SubTaskKind::ALL.into_iter().filter(|k| k.is_image()) {
        ensure(calls(&report, kind) == 0, format!("text-only: {kind} called"))?;
    }
    ensure(calls(&report, Keyword) == 50, "text-only keyword count")?;
    Ok("Keyword=50 Sentiment=50 Img-sum=30; disabled kinds 0 in all 7 rows; image kinds 0 under --text-only".into())
}

fn c3_determinism(tmp: &Path) -> Check {
    let dirs: Vec<(PathBuf, &str)> = vec![
        (tmp.join("c3-w1"), "1"),
        (tmp.join("c3-w8a"), "8"),
        (tmp.join("c3-w8b"), "8"),
        (tmp.join("c3-w1b"), "1"),
    ];
    for (dir, workers) in &dirs {
        run_into(dir, &["--workers", workers])?;
    }
    for file in ["report.json", "predictions.jsonl"] {
        let first = fs::read(dirs[0].0.join(file)).unwrap();
        for (dir, workers) in &dirs[1..] {
            ensure(
                fs::read(dir.join(file)).unwrap() == first,
                format!("{file} differs at workers={workers}"),
            )?;
        }
    }
    Ok("report.json and predictions.jsonl byte-identical across 4 runs (workers 1, 8, 8, 1)".into())
}

fn c4_cache_replay(tmp: &Path) -> Check {
    let cache = tmp.join("c4-cache");
    let cache_s = cache.to_str().unwrap().to_string();
    let (cold, warm) = (tmp.join("c4-cold"), tmp.join("c4-warm"));
    run_into(&cold, &["--cache-dir", &cache_s])?;
    run_into(&warm, &["--cache-dir", &cache_s, "--workers", "8"])?;
    let cold_calls = read_json(&cold.join("run_meta.json"))["underlying_invocations"]
        .as_u64()
        .unwrap();
    let warm_calls = read_json(&warm.join("run_meta.json"))["underlying_invocations"]
        .as_u64()
        .unwrap();
    ensure(cold_calls > 0, "cold run made no calls")?;
    ensure(warm_calls == 0, format!("warm run made {warm_calls} underlying calls"))?;
    for file in ["report.json", "predictions.jsonl"] {
        ensure(
            fs::read(cold.join(file)).unwrap() == fs::read(warm.join(file)).unwrap(),
            format!("{file} differs between cold and warm runs"),
        )?;
    }
    Ok(format!(
        "cold run {cold_calls} underlying calls, warm run 0, identical report"
    ))
}

fn c5_ablation(tmp: &Path) -> Check {
    let out = tmp.join("c2-ablate");
    let summary = read_json(&out.join("summary.json"));
    let labels: Vec<&str> = summary
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    let vocab = [
        "Ours",
        "w/o Rhetoric",
        "w/o Keyword",
        "w/o Sentiment",
        "w/o Img-sum",
        "w/o Tex-ext",
        "w/o Fac-exp",
    ];
    ensure(labels == vocab, format!("labels {labels:?}"))?;
    let dirs = summary
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| out.join(r["dir"].as_str().unwrap()).join("report.json").is_file())
        .count();
    ensure(dirs == 7, format!("{dirs} report directories"))?;
    let table = fs::read_to_string(out.join("summary.md")).unwrap();
    ensure(vocab.iter().all(|l| table.contains(l)), "summary.md is missing rows")?;

    let exp = expected();
    let report = |i: usize| read_json(&out.join(summary[i]["dir"].as_str().unwrap()).join("report.json"));
    let (ours, wo_rhet) = (report(0), report(1));
    for (r, e) in [(&ours, &exp["ablations"][0]), (&wo_rhet, &exp["ablations"][1])] {
        ensure(
            r["confusion"] == e["confusion"],
            format!("{}: confusion {}", r["label"], r["confusion"]),
        )?;
    }
    let flipped = ours["confusion"]["tp"].as_u64().unwrap() - wo_rhet["confusion"]["tp"].as_u64().unwrap();
    ensure(flipped == 4, format!("{flipped} verdicts flipped"))?;
    let delta = ours["metrics"]["f1"].as_f64().unwrap() - wo_rhet["metrics"]["f1"].as_f64().unwrap();
    // 16/19 - 12/17 = 44/323.
    let hand = 100.0 * 44.0 / 323.0;
    ensure((delta - hand).abs() < 1e-9, format!("delta {delta} vs {hand}"))?;
    for i in 2..7 {
        let r = report(i);
        ensure(
            r["confusion"] == ours["confusion"],
            format!("{} changed verdicts", r["label"]),
        )?;
    }
    Ok(format!(
        "7 rows in order; w/o Rhetoric flips 4 verdicts, F1 delta {delta:.6} = 100*44/323"
    ))
}

fn synthetic(prefix: &str, n: usize, sarcastic: usize, unlabeled: usize) -> DatasetManifest {
    let samples = (0..n)
        .map(|i| {
            let s = Sample::text_only(format!("{prefix}{i}"), "t");
            match i {
                i if i < unlabeled => s,
                i if i < unlabeled + sarcastic => s.with_gold(Label::Sarcastic),
                _ => s.with_gold(Label::NonSarcastic),
            }
        })
        .collect();
    DatasetManifest {
        name: prefix.into(),
        split: Split::Test,
        samples,
        image_root: None,
    }
}

fn perturbations(exp: &SplitExpectation, base: SplitStats) -> Result<usize, String> {
    let names = ["train", "validation", "test", "sarcastic", "non_sarcastic"];
    let mut n = 0;
    for (i, name) in names.iter().enumerate() {
        for delta in [-1i64, 1, 7] {
            let mut s = base;
            let slot = [
                &mut s.n_train,
                &mut s.n_validation,
                &mut s.n_test,
                &mut s.n_sarcastic,
                &mut s.n_non_sarcastic,
            ]
            .into_iter()
            .nth(i)
            .unwrap();
            *slot = (*slot as i64 + delta) as u64;
            let err = exp.check(&s).err().ok_or(format!("{name}{delta:+} passed"))?;
            ensure(
                err.mismatches.len() == 1 && err.mismatches[0].field == *name,
                format!("{name}{delta:+}: {err}"),
            )?;
            n += 1;
        }
    }
    Ok(n)
}

fn write_split(dir: &Path, name: &str, m: &DatasetManifest) -> PathBuf {
    let path = dir.join(format!("{name}.jsonl"));
    commander_core::datasets::write_samples(m, &path).unwrap();
    path
}

fn c6_split_validation(tmp: &Path) -> Check {
    let mmsd = SplitExpectation::mmsd();
    let mmsd2 = SplitExpectation::mmsd2();
    // Class totals spread over the splits; MMSD 2.0's totals are 4 short of
    // the split sizes, so 4 test samples carry no label.
    let (tr, va, te) = (
        synthetic("tr", 19816, 8000, 0),
        synthetic("va", 2410, 1280, 0),
        synthetic("te", 2409, 1280, 0),
    );
    let stats = split_stats(&tr, &va, &te);
    mmsd.check(&stats).map_err(|e| e.to_string())?;
    let (tr2, va2, te2) = (
        synthetic("tr", 19816, 9000, 0),
        synthetic("va", 2410, 1325, 0),
        synthetic("te", 2409, 1326, 4),
    );
    let stats2 = split_stats(&tr2, &va2, &te2);
    mmsd2.check(&stats2).map_err(|e| e.to_string())?;
    let n = perturbations(&mmsd, stats)? + perturbations(&mmsd2, stats2)?;

    let dir = tmp.join("c6");
    fs::create_dir_all(&dir).unwrap();
    let paths = [
        write_split(&dir, "train", &tr),
        write_split(&dir, "validation", &va),
        write_split(&dir, "test", &te),
    ];
    let stats_cmd = |test: &Path| {
        commander(&[
            "stats",
            "--train",
            paths[0].to_str().unwrap(),
            "--validation",
            paths[1].to_str().unwrap(),
            "--test",
            test.to_str().unwrap(),
            "--expect",
            "mmsd",
        ])
    };
    let o = stats_cmd(&paths[2]);
    ensure(
        o.status.code() == Some(0),
        "stats --expect mmsd rejected conforming splits",
    )?;
    // One extra unlabeled sample moves the test size and nothing else.
    let mut long = te.clone();
    long.samples.push(Sample::text_only("extra", "t"));
    let long_path = write_split(&dir, "test-long", &long);
    let o = stats_cmd(&long_path);
    let stderr = String::from_utf8_lossy(&o.stderr);
    ensure(
        o.status.code() == Some(3)
            && stderr.contains("test expected 2409 found 2410")
            && !stderr.contains("sarcastic expected"),
        format!("off-by-one test split: exit {:?}, {stderr}", o.status.code()),
    )?;
    Ok(format!(
        "MMSD and MMSD 2.0 figures pass; {n}/30 single-field perturbations named; CLI exit 3 on test=2410"
    ))
}

fn c7_label_parsing() -> Check {
    #[derive(serde::Deserialize)]
    struct Case {
        response: String,
        label: Option<Label>,
    }
    let path = manifest_dir().join("../core/tests/fixtures/label_responses.json");
    let cases: Vec<Case> = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    ensure(cases.len() >= 20, format!("only {} cases", cases.len()))?;
    ensure(
        cases
            .iter()
            .any(|c| c.response.ends_with("Therefore, the sentence is sarcastic.")),
        "sarcastic-conclusion case missing",
    )?;
    let mut disagreements = Vec::new();
    for c in &cases {
        let got = parse_label(&c.response).ok().map(|(l, _)| l);
        if got != c.label {
            disagreements.push(c.response.clone());
        }
    }
    ensure(disagreements.is_empty(), format!("disagreements: {disagreements:?}"))?;
    Ok(format!("{n}/{n} hand-labelled responses agree", n = cases.len()))
}

fn c8_statement() -> Check {
    let readme = fs::read_to_string(manifest_dir().join("../../README.md")).map_err(|e| e.to_string())?;
    let needle = "are not reproducible at desk scale";
    let flat = readme
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .replace("**", "");
    ensure(flat.contains(needle), "README lacks the non-reproducibility statement")?;
    for reason in ["proprietary", "specialist models", "licensed Twitter data"] {
        ensure(flat.contains(reason), format!("statement does not mention {reason}"))?;
    }
    Ok("README states that published absolute scores are not reproducible here; criteria 1-7 substitute".into())
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let results: Vec<(&str, Check)> = vec![
        ("1 published f1 identity", c1_f1_identity()),
        ("2 call-count invariants", c2_call_counts(t)),
        ("3 determinism", c3_determinism(t)),
        ("4 cache replay", c4_cache_replay(t)),
        ("5 ablation suite", c5_ablation(t)),
        ("6 split validation", c6_split_validation(t)),
        ("7 label parsing", c7_label_parsing()),
        ("8 non-reproducibility statement", c8_statement()),
    ];
    let mut failed = BTreeMap::new();
    for (name, result) in &results {
        match result {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                println!("FAIL  criterion {name}: {why}");
                failed.insert(*name, why.clone());
            }
        }
    }
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
