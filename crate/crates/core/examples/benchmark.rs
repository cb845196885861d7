//! Runs the synthetic probe benchmark and prints the report as JSON.
//!
//! `cargo run --release -p lcarep-core --example benchmark -- [key value]...`
//! where keys are run-config keys such as `train.epochs`. Keys prefixed with
//! `student.` apply to the student run only, on top of the teacher settings.

use lcarep_core::probe::run_benchmark;
use lcarep_core::synthetic::gen_synthetic;
use lcarep_core::{FitConfig, RunConfig, SyntheticSpec};

fn main() -> lcarep_core::Result<()> {
    log::set_logger(&STDERR).map(|()| log::set_max_level(log::LevelFilter::Info)).ok();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let overrides: Vec<(String, String)> = args.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
    let (student_ovr, teacher_ovr): (Vec<_>, Vec<_>) =
        overrides.into_iter().partition(|(k, _)| k.starts_with("student."));
    let teacher = RunConfig::resolve(None, &teacher_ovr)?;
    let student_ovr: Vec<_> = student_ovr
        .into_iter()
        .map(|(k, v)| (k.trim_start_matches("student.").to_string(), v))
        .collect();
    let student = RunConfig::resolve(Some(&teacher.to_toml()), &student_ovr)?;
    let dir = tempfile::tempdir().expect("temporary directory");
    let corpus = gen_synthetic(&SyntheticSpec::default(), dir.path())?;
    let report = run_benchmark(
        &corpus,
        &teacher.model_config(),
        &teacher.train_config(),
        &student.train_config(),
        &FitConfig::default(),
    )?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

struct StderrLog;

impl log::Log for StderrLog {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        eprintln!("{}", record.args());
    }

    fn flush(&self) {}
}

static STDERR: StderrLog = StderrLog;
