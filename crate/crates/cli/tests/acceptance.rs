//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lcarep_core::ckpt::Container;
use lcarep_core::dataio::{decode_ppm, encode_ppm, parse_manifest, read_manifest, write_manifest};
use lcarep_core::pipeline::{ModelConfig, TrainConfig};
use lcarep_core::probe::run_benchmark;
use lcarep_core::synthetic::gen_synthetic;
use lcarep_core::{
    lca_forward, lca_window_count, tnsr, Checkpoint, FitConfig, ImageRecord, LcaConfig, LossConfig,
    PseudolabelStore, SyntheticSpec, Tensor, Weighting,
};
use rand::Rng;

/// Outcome of one criterion: pass flag plus a one-line measurement.
type Verdict = (bool, String);

const LCA_MAPS: usize = 600;
const LCA_TOL: f64 = 1e-5;
const PROBE_MARGIN: f64 = 0.10;
const STUDENT_SLACK: f64 = 0.02;
const SMOOTH_L1_DROP: f64 = 0.5;
const BENCH_BUDGET_SECS: f64 = 15.0 * 60.0;
const MIN_SPEEDUP: f64 = 2.0;

fn lcarep(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lcarep"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("lcarep binary runs")
}

fn lca_oracle_equivalence() -> Verdict {
    let started = Instant::now();
    let mut r = common::rng(2024);
    let mut worst = 0.0f64;
    for n in 0..LCA_MAPS {
        let (h, w, c) = (r.random_range(1..=10), r.random_range(1..=10), r.random_range(1..=16));
        let weighting = if n % 2 == 0 {
            Weighting::FlatOverWindows
        } else {
            Weighting::UniformPerSize
        };
        let include_1x1 = n % 3 == 0 || h * w == 1;
        let map64 = common::random_map(&mut r, h, w, c);
        let map32 = Tensor::new(map64.dims().to_vec(), map64.data().iter().map(|&v| v as f32).collect()).unwrap();
        let cfg = LcaConfig { include_1x1, weighting };
        let expected = common::oracle_lca(&map64, include_1x1, weighting);
        let fast64 = lca_forward(&map64, &cfg).unwrap();
        let fast32 = lca_forward(&map32, &cfg).unwrap();
        for ((e, a), b) in expected.iter().zip(&fast64).zip(&fast32) {
            worst = worst.max((e - a).abs()).max((e - f64::from(*b)).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    (
        worst <= LCA_TOL && secs < 30.0,
        format!("{LCA_MAPS} maps, max abs diff {worst:.2e}, {secs:.1} s"),
    )
}

fn lca_window_counts() -> Verdict {
    let cfg = |include_1x1| LcaConfig {
        include_1x1,
        weighting: Weighting::FlatOverWindows,
    };
    let seven = lca_window_count(7, 7, &cfg(false));
    let mut mismatches = 0;
    for h in 1..=12 {
        for w in 1..=12 {
            for inc in [false, true] {
                if lca_window_count(h, w, &cfg(inc)) != common::oracle_window_count(h, w, inc) {
                    mismatches += 1;
                }
            }
        }
    }
    (
        seven == 735 && mismatches == 0,
        format!("7x7 without 1x1 = {seven}, {mismatches} mismatches over H, W <= 12"),
    )
}

fn gradient_suite() -> Verdict {
    let reports = common::gradcheck::all();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({} cases, {:.2e})", r.op, r.cases, r.max_err))
        .collect();
    let worst = reports.iter().map(|r| r.max_err).fold(0.0, f64::max);
    let min_cases = reports.iter().map(|r| r.cases).min().unwrap_or(0);
    let detail = if failed.is_empty() {
        format!("{} checks, >= {min_cases} cases each, max rel err {worst:.2e}", reports.len())
    } else {
        format!("failing: {}", failed.join(", "))
    };
    (failed.is_empty(), detail)
}

/// Student settings for the benchmark run. The library default weights the
/// contrastive term at 0.5; here it is lowered and training lengthened.
fn benchmark_student_config(teacher: &TrainConfig) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        loss: LossConfig::new(1.0, 1.0, 0.05).unwrap(),
        ..teacher.clone()
    }
}

fn benchmark_criteria() -> [Verdict; 3] {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_synthetic(&SyntheticSpec::default(), dir.path()).unwrap();
    let teacher = TrainConfig::default();
    let student = benchmark_student_config(&teacher);
    let r = run_benchmark(&corpus, &ModelConfig::default(), &teacher, &student, &FitConfig::default()).unwrap();
    eprintln!("benchmark report: {}", serde_json::to_string(&r).unwrap());

    let ordered = r.teacher_accuracy >= r.raw_pixel_accuracy + PROBE_MARGIN
        && r.teacher_accuracy >= r.random_init_accuracy + PROBE_MARGIN
        && r.wall_secs < BENCH_BUDGET_SECS;
    let drop = 1.0 - r.heldout_smooth_l1_student / r.heldout_smooth_l1_init;
    let kept = r.student_accuracy >= r.teacher_accuracy - STUDENT_SLACK && drop >= SMOOTH_L1_DROP;
    [
        (
            ordered,
            format!(
                "teacher {:.3}, raw pixels {:.3}, random init {:.3}, {:.0} s",
                r.teacher_accuracy, r.raw_pixel_accuracy, r.random_init_accuracy, r.wall_secs
            ),
        ),
        (
            kept,
            format!(
                "student {:.3} vs teacher {:.3}, held-out Smooth L1 {:.5} -> {:.5} ({:.0}% drop)",
                r.student_accuracy,
                r.teacher_accuracy,
                r.heldout_smooth_l1_init,
                r.heldout_smooth_l1_student,
                100.0 * drop
            ),
        ),
        (
            r.heldout_pos_dist < r.heldout_neg_dist,
            format!(
                "held-out positive {:.4} < hard negative {:.4}",
                r.heldout_pos_dist, r.heldout_neg_dist
            ),
        ),
    ]
}

fn lca_speed() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = lcarep(dir.path(), &["lca-bench", "--h", "14", "--w", "14", "--c", "256", "--iters", "20"]);
    if !out.status.success() {
        return (false, String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let speedup = v["speedup"].as_f64().unwrap_or(0.0);
    (
        speedup >= MIN_SPEEDUP,
        format!(
            "fast {:.0} ns, naive {:.0} ns, speedup {speedup:.1}x",
            v["fast_ns_per_call"].as_f64().unwrap_or(f64::NAN),
            v["naive_ns_per_call"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

/// Every regular file below `root`, as sorted (relative path, bytes).
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data", "--out", "data"],
    &["train-teacher", "--pairs", "data/pairs.jsonl", "--out", "teacher/model.ckpt", "--train.epochs", "2"],
    &["pseudolabel", "--ckpt", "teacher/model.ckpt", "--images", "data/unlabeled.jsonl", "--out", "store"],
    &[
        "train-student",
        "--pairs",
        "data/pairs.jsonl",
        "--pseudo",
        "store",
        "--out",
        "student/model.ckpt",
        "--train.epochs",
        "2",
    ],
    &[
        "embed",
        "--ckpt",
        "student/model.ckpt",
        "--images",
        "data/probe_train.jsonl",
        "--out",
        "probe/train.tnsr",
        "--labels-out",
        "probe/train.txt",
    ],
    &[
        "embed",
        "--ckpt",
        "student/model.ckpt",
        "--images",
        "data/probe_test.jsonl",
        "--out",
        "probe/test.tnsr",
        "--labels-out",
        "probe/test.txt",
    ],
    &["fit-lr", "--embeddings", "probe/train.tnsr", "--labels", "probe/train.txt", "--out", "probe/lr.ckpt"],
    &["eval", "--model", "probe/lr.ckpt", "--embeddings", "probe/test.tnsr", "--labels", "probe/test.txt"],
];

/// Runs every stage in `work` and returns the stdout of each.
fn run_pipeline(work: &Path) -> Result<Vec<Vec<u8>>, String> {
    let mut stdouts = Vec::new();
    for stage in PIPELINE {
        let mut args = vec!["--threads", "1"];
        args.extend_from_slice(stage);
        let out = lcarep(work, &args);
        if !out.status.success() {
            return Err(format!("{} failed: {}", stage[0], String::from_utf8_lossy(&out.stderr)));
        }
        stdouts.push(out.stdout);
    }
    Ok(stdouts)
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let work = root.path().join("work");
    let mut runs = Vec::new();
    for n in 0..2 {
        std::fs::create_dir_all(&work).unwrap();
        let stdouts = match run_pipeline(&work) {
            Ok(s) => s,
            Err(e) => return (false, e),
        };
        let mut files = snapshot(&work);
        files.retain(|(p, _)| p.file_name().is_some_and(|f| f != "metrics.jsonl"));
        runs.push((stdouts, files));
        std::fs::rename(&work, root.path().join(format!("run{n}"))).unwrap();
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<String> = a
        .1
        .iter()
        .zip(&b.1)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let same_listing = a.1.len() == b.1.len();
    let same_stdout = a.0 == b.0;
    let eval: serde_json::Value = serde_json::from_slice(a.0.last().unwrap()).unwrap_or_default();
    (
        same_listing && differing.is_empty() && same_stdout,
        format!(
            "{} files and {} stdout documents compared, {} differ, stdout {}, probe accuracy {}",
            a.1.len(),
            a.0.len(),
            differing.len(),
            if same_stdout { "identical" } else { "differs" },
            eval["accuracy"]
        ),
    )
}

fn expect_code<T>(result: lcarep_core::Result<T>, code: i32, what: &str, failures: &mut Vec<String>) {
    match result {
        Err(e) if e.exit_code() == code => {}
        Err(e) => failures.push(format!("{what}: exit code {} ({e})", e.exit_code())),
        Ok(_) => failures.push(format!("{what}: accepted")),
    }
}

fn format_round_trips() -> Verdict {
    let mut failures = Vec::new();
    let mut r = common::rng(77);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let data: Vec<f32> = (0..60).map(|_| f32::from_bits(r.random())).collect();
    let t = Tensor::new(vec![3, 4, 5], data).unwrap();
    let bytes = tnsr::encode(&t);
    let back = tnsr::decode(&bytes).unwrap();
    if back.dims() != t.dims() || !back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
        failures.push("TNSR not bit-exact".into());
    }
    expect_code(tnsr::decode(&bytes[..bytes.len() - 1]), 2, "truncated TNSR", &mut failures);
    expect_code(tnsr::decode(b"XNSR\x01\x00"), 2, "TNSR bad magic", &mut failures);

    let mut c = Container::new();
    c.push("w", t.clone()).unwrap();
    c.push_text("note", "hello").unwrap();
    let enc = c.encode();
    if Container::decode(&enc).map(|x| x.encode()).ok() != Some(enc.clone()) {
        failures.push("CKPT container not bit-exact".into());
    }
    let mut flipped = enc.clone();
    flipped[enc.len() / 2] ^= 0x10;
    expect_code(Container::decode(&flipped), 2, "CKPT bit flip", &mut failures);

    let model = Checkpoint::init(Default::default(), LcaConfig::default(), 11).unwrap();
    let path = d.join("m.ckpt");
    model.save(&path).unwrap();
    if Checkpoint::load(&path).ok().as_ref() != Some(&model) {
        failures.push("model checkpoint not bit-exact".into());
    }
    let mut raw = std::fs::read(&path).unwrap();
    let last = raw.len() - 1;
    raw[last] ^= 1;
    std::fs::write(&path, &raw).unwrap();
    expect_code(Checkpoint::load(&path), 2, "corrupt model checkpoint", &mut failures);

    let pixels: Vec<f32> = (0..5 * 7 * 3).map(|_| f32::from(r.random::<u8>()) / 255.0).collect();
    let img = Tensor::new(vec![5, 7, 3], pixels).unwrap();
    let ppm = encode_ppm(&img).unwrap();
    if decode_ppm(&ppm).ok().map(|x| encode_ppm(&x).unwrap()) != Some(ppm.clone()) {
        failures.push("PPM not byte-exact".into());
    }
    expect_code(decode_ppm(b"P3\n1 1\n255\n0 0 0"), 2, "PPM wrong magic", &mut failures);
    expect_code(decode_ppm(&ppm[..ppm.len() - 2]), 2, "truncated PPM", &mut failures);

    let records = vec![
        ImageRecord {
            id: "a".into(),
            path: "x/a.ppm".into(),
            class_id: Some(3),
            pair_id: Some(0),
        },
        ImageRecord {
            id: "b".into(),
            path: "x/b.ppm".into(),
            class_id: Some(3),
            pair_id: Some(0),
        },
        ImageRecord {
            id: "c".into(),
            path: "c.ppm".into(),
            class_id: None,
            pair_id: None,
        },
    ];
    let mpath = d.join("m.jsonl");
    write_manifest(&mpath, &records).unwrap();
    if read_manifest(&mpath).ok() != Some(records.clone()) {
        failures.push("manifest did not round-trip".into());
    }
    expect_code(parse_manifest("{\"id\": 1}\n"), 2, "malformed manifest", &mut failures);

    let mut store = PseudolabelStore::new();
    store.insert("a", vec![0.6, 0.8]).unwrap();
    store.insert("b", vec![0.0, -1.0]).unwrap();
    let spath = d.join("store");
    store.save(&spath, None).unwrap();
    if PseudolabelStore::load(&spath).ok().as_ref() != Some(&store) {
        failures.push("store did not round-trip".into());
    }
    std::fs::write(spath.join("a.tnsr"), b"TNSR").unwrap();
    expect_code(PseudolabelStore::load(&spath), 2, "damaged store", &mut failures);

    std::fs::write(d.join("junk.ckpt"), b"CKPT garbage").unwrap();
    let cli = lcarep(d, &["pseudolabel", "--ckpt", "junk.ckpt", "--images", "m.jsonl", "--out", "s"]);
    if cli.status.code() != Some(2) {
        failures.push(format!("CLI on corrupt checkpoint exited {:?}", cli.status.code()));
    }

    let detail = if failures.is_empty() {
        "TNSR, CKPT, PPM, manifest and store round trips; corrupt inputs exit 2".to_string()
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut verdicts: Vec<(u8, &str, Verdict)> = vec![
        (1, "LCA fast path matches enumeration", guarded(lca_oracle_equivalence)),
        (2, "LCA window count", guarded(lca_window_counts)),
        (3, "gradient suite", guarded(gradient_suite)),
    ];
    let bench = catch_unwind(benchmark_criteria).unwrap_or_else(|_| {
        let v = (false, "benchmark panicked".to_string());
        [v.clone(), v.clone(), v]
    });
    let [probe, student, separation] = bench;
    verdicts.push((4, "probe quality ordering", probe));
    verdicts.push((5, "student non-degradation", student));
    verdicts.push((6, "held-out separation", separation));
    verdicts.push((7, "SAT pooling speedup", guarded(lca_speed)));
    verdicts.push((8, "pipeline determinism", guarded(determinism)));
    verdicts.push((9, "format round trips", guarded(format_round_trips)));

    let mut failed = 0;
    for (n, name, (pass, detail)) in &verdicts {
        println!("{} {n}. {name}: {detail}", if *pass { "PASS" } else { "FAIL" });
        failed += usize::from(!pass);
    }
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
