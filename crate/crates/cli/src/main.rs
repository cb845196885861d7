use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lcarep_core::classifier::{fit_labeled, FitConfig, LogRegModel};
use lcarep_core::config::RunConfig;
use lcarep_core::dataio::{read_embeddings, read_labels, write_embeddings, write_labels, Manifest};
use lcarep_core::pipeline::{
    embed_all, generate_pseudolabels, train_student, train_teacher, write_metrics_jsonl, PairSet, PseudoSet,
    TrainOutcome,
};
use lcarep_core::probe::raw_pixel_features;
use lcarep_core::synthetic::{gen_synthetic, SyntheticSpec};
use lcarep_core::{lca_forward, lca_forward_bruteforce, Checkpoint, Error, LcaConfig, PseudolabelStore, Result, Tensor, Weighting};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lcarep", version, about = "Train and probe LCA-pooled image representations")]
struct Cli {
    /// Worker threads for per-image stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic product corpus.
    GenData {
        /// TOML file with generator settings; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher on image pairs.
    TrainTeacher {
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Embed clean images with a checkpoint into a pseudolabel store.
    Pseudolabel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student on pairs plus pseudolabeled images.
    TrainStudent {
        #[arg(long)]
        pairs: PathBuf,
        /// Pseudolabel store directory.
        #[arg(long)]
        pseudo: PathBuf,
        /// Image manifest for the store; defaults to the one recorded in it.
        #[arg(long)]
        images: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Embed a manifest's images.
    Embed {
        #[arg(long, required_unless_present = "raw_pixels")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels_out: Option<PathBuf>,
        /// Emit flattened pixels instead of model embeddings.
        #[arg(long, conflicts_with = "ckpt")]
        raw_pixels: bool,
        /// Image side for --raw-pixels.
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Fit a logistic-regression probe.
    FitLr {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a probe; prints {"accuracy", "n", "k"}.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Time SAT pooling against per-window summation.
    LcaBench {
        #[arg(long, default_value_t = 14)]
        h: usize,
        #[arg(long, default_value_t = 14)]
        w: usize,
        #[arg(long, default_value_t = 256)]
        c: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value = "flat")]
        weighting: Weighting,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Config overrides as `--section.key value`; they follow all other options.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        let mut it = self.overrides.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::invalid(format!("expected --key before {flag:?}")))?;
            if let Some((k, v)) = key.split_once('=') {
                pairs.push((k.to_string(), v.to_string()));
                continue;
            }
            let value = it
                .next()
                .ok_or_else(|| Error::invalid(format!("override --{key} has no value")))?;
            pairs.push((key.to_string(), value.clone()));
        }
        RunConfig::load(self.config.as_deref(), &pairs)
    }

    fn out_dir(&self) -> PathBuf {
        parent_dir(&self.out)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Saves the run artifacts and prints a summary free of timing values.
fn finish_training(run: &RunArgs, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = run.out_dir();
    cfg.write_resolved(&dir)?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    write_metrics_jsonl(&metrics, &outcome.history)?;
    outcome.checkpoint.save(&run.out)?;
    let last = outcome.history.last();
    print_json(json!({
        "epochs": outcome.history.len(),
        "final_loss": last.map(|m| m.mean_loss),
        "final_pos_dist": last.map(|m| m.mean_pos_dist),
        "final_neg_dist": last.map(|m| m.mean_neg_dist),
    }));
    Ok(())
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn class_labels(manifest: &Manifest) -> Result<Vec<i64>> {
    manifest
        .records
        .iter()
        .map(|r| {
            r.class_id
                .ok_or_else(|| Error::dataset(format!("record {:?} has no class_id", r.id)))
        })
        .collect()
}

/// Deterministic pseudo-random map with entries in `[-1, 1)`.
fn bench_map(h: usize, w: usize, c: usize) -> Result<Tensor> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let data = (0..h * w * c)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::new(vec![h, w, c], data)
}

fn time_per_call(iters: usize, mut f: impl FnMut() -> Result<Vec<f32>>) -> Result<f64> {
    let started = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(f()?);
    }
    Ok(started.elapsed().as_nanos() as f64 / iters as f64)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => SyntheticSpec::default(),
            };
            spec.validate()?;
            let corpus = gen_synthetic(&spec, &out)?;
            let resolved = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
            let path = out.join("spec.resolved");
            std::fs::write(&path, resolved).map_err(|e| Error::io(&path, e))?;
            log::info!("wrote corpus to {}", corpus.root.display());
            let count = |path: &Path| -> Result<usize> { Ok(Manifest::load(path)?.records.len()) };
            print_json(json!({
                "pairs": count(&corpus.pairs)?,
                "probe_train": count(&corpus.probe_train)?,
                "probe_test": count(&corpus.probe_test)?,
                "unlabeled": count(&corpus.unlabeled)?,
                "unlabeled_holdout": count(&corpus.unlabeled_holdout)?,
                "heldout_pairs": count(&corpus.heldout_pairs)?,
            }));
        }
        Command::TrainTeacher { pairs, run } => {
            let cfg = run.resolve()?;
            create_dir(&run.out_dir())?;
            let data = PairSet::load(&pairs, cfg.backbone.input_size)?;
            let outcome = train_teacher(&data, &cfg.model_config(), &cfg.train_config())?;
            finish_training(&run, &cfg, &outcome)?;
        }
        Command::Pseudolabel { ckpt, images, out } => {
            let model = Checkpoint::load(&ckpt)?;
            let manifest = Manifest::load(&images)?;
            let store = generate_pseudolabels(&model, &manifest)?;
            store.save(&out, Some(&manifest))?;
            log::info!("stored {} pseudolabels in {}", store.len(), out.display());
            print_json(json!({"count": store.len()}));
        }
        Command::TrainStudent {
            pairs,
            pseudo,
            images,
            run,
        } => {
            let cfg = run.resolve()?;
            let train_cfg = cfg.train_config();
            train_cfg.student_slots()?;
            create_dir(&run.out_dir())?;
            let side = cfg.backbone.input_size;
            let data = PairSet::load(&pairs, side)?;
            let store = PseudolabelStore::load(&pseudo)?;
            let manifest = match images {
                Some(path) => Manifest::load(&path)?,
                None => PseudolabelStore::source_manifest(&pseudo)?,
            };
            let pseudo_set = PseudoSet::from_store(&store, &manifest, side)?;
            let outcome = train_student(&data, &pseudo_set, &cfg.model_config(), &train_cfg)?;
            finish_training(&run, &cfg, &outcome)?;
        }
        Command::Embed {
            ckpt,
            images,
            out,
            labels_out,
            raw_pixels,
            side,
        } => {
            let manifest = Manifest::load(&images)?;
            let rows = match ckpt {
                Some(path) if !raw_pixels => {
                    let model = Checkpoint::load(&path)?;
                    embed_all(&model, &manifest.load_images(model.backbone.config().input_size)?)?
                }
                _ => raw_pixel_features(&manifest.load_images(side)?),
            };
            create_dir(&parent_dir(&out))?;
            write_embeddings(&out, &rows)?;
            if let Some(path) = labels_out {
                write_labels(&path, &class_labels(&manifest)?)?;
            }
            print_json(json!({"n": rows.len(), "dim": rows.first().map_or(0, Vec::len)}));
        }
        Command::FitLr {
            embeddings,
            labels,
            l2,
            max_iters,
            out,
        } => {
            let x = read_embeddings(&embeddings)?;
            let y = read_labels(&labels)?;
            let fit = FitConfig {
                l2,
                max_iters,
                ..FitConfig::default()
            };
            let (model, report) = fit_labeled(&x, &y, &fit)?;
            log::info!(
                "fit {} classes in {} iterations (converged: {}, |grad| {:.2e})",
                model.n_classes(),
                report.iterations,
                report.converged,
                report.final_grad_inf_norm
            );
            create_dir(&parent_dir(&out))?;
            model.save(&out)?;
            print_json(json!({
                "k": model.n_classes(),
                "iterations": report.iterations,
                "converged": report.converged,
                "final_objective": report.loss_history.last(),
            }));
        }
        Command::Eval {
            model,
            embeddings,
            labels,
        } => {
            let model = LogRegModel::load(&model)?;
            let x = read_embeddings(&embeddings)?;
            let y = read_labels(&labels)?;
            let accuracy = model.evaluate(&x, &y)?;
            print_json(json!({"accuracy": accuracy, "n": x.len(), "k": model.n_classes()}));
        }
        Command::LcaBench {
            h,
            w,
            c,
            iters,
            weighting,
        } => {
            if iters == 0 {
                return Err(Error::invalid("--iters must be positive"));
            }
            let map = bench_map(h, w, c)?;
            let cfg = LcaConfig {
                include_1x1: false,
                weighting,
            };
            let fast = time_per_call(iters, || lca_forward(&map, &cfg))?;
            let naive = time_per_call(iters, || lca_forward_bruteforce(&map, &cfg))?;
            print_json(json!({
                "fast_ns_per_call": fast,
                "naive_ns_per_call": naive,
                "speedup": naive / fast,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        log::warn!("thread pool already initialized: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
