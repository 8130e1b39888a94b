use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csp_core::audio::Waveform;
use csp_core::config::RunConfig;
use csp_core::data_sim::{simulate_recipes, synthetic_corpus, write_corpus, Manifest, MixtureExample};
use csp_core::eval::metrics::{evaluate_set, metric_histogram, write_histogram_csv, write_metrics_csv};
use csp_core::eval::mi::{mi_bound_check, DiscreteJoint};
use csp_core::eval::streaming::{profile_streaming, stream_separate};
use csp_core::model::Checkpoint;
use csp_core::pretext::{StubTeacher, Teacher, TeacherCentroids, TeacherStore};
use csp_core::separation::{train_separator, FrozenFrontend, SeparationPipeline};
use csp_core::trainer::{fit_centroids, pretrain, TeacherSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "csp", version, about = "Causal self-supervised frontend for streaming speech separation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration: `default` or `tiny`.
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    /// Dotted-path override such as `loss.gamma=0`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; falls back to the config, then CSP_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "csp-out")]
    out: PathBuf,
    /// Worker threads for tensor kernels.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Mix sources into a labeled corpus (from recipes or synthetic speech-like signals).
    Simulate {
        /// JSONL mixing recipes listing source paths and optional gains.
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        /// Generate `data.synthetic_count` synthetic mixtures instead.
        #[arg(long)]
        synthetic: bool,
    },
    /// Compute stub teacher frames for a manifest and fit k-means centroids.
    ClusterTeacher {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Pretrain the frontend with the pretext losses.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// Teacher frames written by `cluster-teacher`; the stub teacher is run otherwise.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Centroids written by `cluster-teacher`; fitted on the training set otherwise.
        #[arg(long)]
        centroids: Option<PathBuf>,
    },
    /// Train the separator on labeled mixtures, optionally on top of a frozen frontend.
    TrainSep {
        #[arg(long)]
        manifest: PathBuf,
        /// Pretraining checkpoint providing the frozen frontend.
        #[arg(long)]
        frontend: Option<PathBuf>,
    },
    /// Score a separator checkpoint on a labeled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Run inference chunk by chunk instead of on whole utterances.
        #[arg(long)]
        streaming: bool,
    },
    /// Time chunked streaming inference on a single thread.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mixture to stream; a synthetic mixture is generated otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Chunk length; defaults to `profile.chunk_ms`.
        #[arg(long)]
        chunk_ms: Option<f64>,
    },
    /// Check the mutual-information bound on random discrete joints.
    MiCheck {
        /// Number of joints; defaults to `mi.joints`.
        #[arg(long)]
        joints: Option<usize>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn load_examples(manifest: &Path) -> Result<Vec<MixtureExample>> {
    let m = Manifest::load(manifest)?;
    if m.is_empty() {
        bail!("manifest {} has no entries", manifest.display());
    }
    Ok(m.entries.iter().map(|e| e.load()).collect::<csp_core::Result<_>>()?)
}

fn simulate(cfg: &RunConfig, seed: u64, out: &Path, manifest: Option<&Path>, synthetic: bool) -> Result<()> {
    let examples = match (manifest, synthetic) {
        (Some(m), false) => simulate_recipes(&Manifest::load(m)?, &cfg.data.gains, seed)?,
        (None, true) => synthetic_corpus(
            cfg.data.synthetic_count,
            cfg.data.synthetic_duration_s,
            cfg.data.sample_rate,
            &cfg.data.gains,
            seed,
        )?,
        _ => bail!("simulate needs exactly one of --manifest or --synthetic"),
    };
    let written = write_corpus(&examples, out)?;
    written.save(out.join("manifest.jsonl"))?;
    println!("simulated {} mixtures into {}", written.len(), out.display());
    Ok(())
}

fn cluster_teacher(cfg: &RunConfig, seed: u64, out: &Path, manifest: &Path) -> Result<()> {
    let examples = load_examples(manifest)?;
    let teacher = StubTeacher::new(cfg.teacher.clone(), cfg.data.sample_rate)?;
    let mut store = TeacherStore {
        frame_rate: teacher.frame_rate(cfg.data.sample_rate),
        frames: Default::default(),
    };
    for ex in &examples {
        store.frames.insert(ex.id.clone(), teacher.represent(&ex.mixture)?.rows()?);
    }
    let centroids = fit_centroids(&examples, &TeacherSource::Store(store.clone()), cfg.pretext.clusters, seed)?;
    store.save(out.join("teacher.bin"))?;
    centroids.save(out.join("centroids.bin"))?;
    println!("clustered {} utterances into {} centroids", examples.len(), centroids.k());
    Ok(())
}

fn run_pretrain(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    manifest: &Path,
    teacher: Option<&Path>,
    centroids: Option<&Path>,
) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let (train_m, val_m) = m.split_validation(cfg.data.validation_fraction);
    let load = |m: &Manifest| -> csp_core::Result<Vec<MixtureExample>> { m.entries.iter().map(|e| e.load()).collect() };
    let (train, val) = (load(&train_m)?, load(&val_m)?);
    if train.is_empty() {
        bail!("manifest {} leaves no training entries", manifest.display());
    }
    let source = match teacher {
        Some(p) => TeacherSource::Store(TeacherStore::load(p)?),
        None => TeacherSource::Stub(StubTeacher::new(cfg.teacher.clone(), cfg.data.sample_rate)?),
    };
    let centroids = match centroids {
        Some(p) => TeacherCentroids::load(p)?,
        None => fit_centroids(&train, &source, cfg.pretext.clusters, seed)?,
    };
    let mut log = create(&out.join("pretrain_log.csv"))?;
    let outcome = pretrain(&train, &val, &cfg.csp(), &cfg.pretrain, &source, centroids, Some(&mut log))?;
    log.flush()?;
    outcome.best.save(out.join("best.ckpt"))?;
    outcome.last.save(out.join("last.ckpt"))?;
    let mut v = create(&out.join("validation.csv"))?;
    writeln!(v, "step,total")?;
    for (step, loss) in &outcome.validation {
        writeln!(v, "{step},{loss}")?;
    }
    v.flush()?;
    println!(
        "pretrained {} steps; best validation loss {:.4} at step {}",
        outcome.trace.len(),
        outcome.best.header.best_val_loss.unwrap_or(f64::NAN),
        outcome.best.header.step
    );
    Ok(())
}

fn train_sep(cfg: &RunConfig, out: &Path, manifest: &Path, frontend: Option<&Path>) -> Result<()> {
    let train = load_examples(manifest)?;
    let frozen = match frontend {
        Some(p) => Some(FrozenFrontend::from_model(&Checkpoint::load(p)?.restore()?)?),
        None => None,
    };
    if cfg.separator.use_frontend && frozen.is_none() {
        bail!("separator.use_frontend is set but no --frontend checkpoint was given");
    }
    let mut log = create(&out.join("sep_log.csv"))?;
    let outcome = train_separator(frozen, &train, &cfg.separator, &cfg.sep_train, Some(&mut log))?;
    log.flush()?;
    if outcome.frontend_hash_before != outcome.frontend_hash_after {
        bail!("frontend parameters changed during separator training");
    }
    outcome.pipeline.save(out.join("separator.ckpt"), cfg.sep_train.steps)?;
    println!(
        "trained separator for {} steps; final PIT loss {:.4}",
        outcome.trace.len(),
        outcome.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, manifest: &Path, streaming: bool) -> Result<()> {
    let (pipe, _) = SeparationPipeline::load(checkpoint)?;
    let m = Manifest::load(manifest)?;
    let chunk = (cfg.profile.chunk_ms * cfg.data.sample_rate as f64 / 1000.0).round().max(1.0) as usize;
    let report = evaluate_set(&m.entries, |mix: &Waveform| {
        if streaming {
            stream_separate(&pipe, mix, chunk)
        } else {
            Ok(pipe.separate(mix)?.estimates)
        }
    });
    write_metrics_csv(&report.rows, create(&out.join("metrics.csv"))?)?;
    let bins = metric_histogram(&report.rows, cfg.eval.histogram_bin_db)?;
    write_histogram_csv(&bins, create(&out.join("histogram.csv"))?)?;
    let mut f = create(&out.join("failures.csv"))?;
    writeln!(f, "id,reason")?;
    for (id, reason) in &report.failures {
        writeln!(f, "{id},\"{}\"", reason.replace('"', "'"))?;
    }
    f.flush()?;
    println!(
        "scored {} utterances ({} failed); mean SI-SDRi {:.3} dB, SDRi {:.3} dB",
        report.summary.rows,
        report.failures.len(),
        report.summary.mean_si_sdri_db,
        report.summary.mean_sdri_db
    );
    if report.rows.is_empty() {
        bail!("no utterance could be scored");
    }
    Ok(())
}

fn profile(cfg: &RunConfig, seed: u64, out: &Path, checkpoint: &Path, input: Option<&Path>, chunk_ms: Option<f64>) -> Result<()> {
    let (pipe, _) = SeparationPipeline::load(checkpoint)?;
    let audio = match input {
        Some(p) => Waveform::read_wav(p)?,
        None => {
            let ex = synthetic_corpus(1, cfg.data.synthetic_duration_s, cfg.data.sample_rate, &cfg.data.gains, seed)?;
            ex.into_iter().next().expect("one example").mixture
        }
    };
    let report = profile_streaming(&pipe, chunk_ms.unwrap_or(cfg.profile.chunk_ms), &audio)?;
    let path = out.join("profile.json");
    std::fs::write(&path, report.to_json()? + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    println!(
        "rtf {:.3}, measured latency {:.2} ms (ideal {:.2} ms), {:.3} GMAC/s",
        report.rtf, report.measured_latency_ms, report.ideal_latency_ms, report.macs_g_per_s
    );
    Ok(())
}

fn mi_check(cfg: &RunConfig, seed: u64, out: &Path, joints: Option<usize>) -> Result<()> {
    let n = joints.unwrap_or(cfg.mi.joints);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = create(&out.join("mi_report.jsonl"))?;
    let (mut violations, mut worst_residual) = (0, 0.0f64);
    for i in 0..n {
        let joint = DiscreteJoint::random_premise(&mut rng, cfg.mi.max_alphabet)?;
        // The context estimate is taken to be the clean source itself.
        let r = mi_bound_check(&joint, |_, s1, _| s1)?;
        violations += usize::from(!r.holds);
        worst_residual = worst_residual.max(r.chain.residual.abs());
        let line = serde_json::json!({
            "joint": i,
            "alphabets": [joint.nc, joint.ns1, joint.ns2],
            "report": r,
        });
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    println!("{n} joints; bound violations {violations}; max chain residual {worst_residual:.3e}");
    if violations > 0 {
        bail!("bound violated on {violations} of {n} joints");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(w) = c.workers {
        std::env::set_var("RAYON_NUM_THREADS", w.max(1).to_string());
    }
    if matches!(cli.command, Command::Profile { .. }) {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let base = RunConfig::preset(&c.preset)?;
    let mut cfg = RunConfig::resolve(&base, c.config.as_deref(), &c.overrides)?;
    let seed = cfg.settle_seed(c.seed)?;
    let out = c.out.as_path();
    cfg.echo(out)?;
    match &cli.command {
        Command::Simulate { manifest, synthetic } => simulate(&cfg, seed, out, manifest.as_deref(), *synthetic),
        Command::ClusterTeacher { manifest } => cluster_teacher(&cfg, seed, out, manifest),
        Command::Pretrain {
            manifest,
            teacher,
            centroids,
        } => run_pretrain(&cfg, seed, out, manifest, teacher.as_deref(), centroids.as_deref()),
        Command::TrainSep { manifest, frontend } => train_sep(&cfg, out, manifest, frontend.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            streaming,
        } => eval(&cfg, out, checkpoint, manifest, *streaming),
        Command::Profile {
            checkpoint,
            input,
            chunk_ms,
        } => profile(&cfg, seed, out, checkpoint, input.as_deref(), *chunk_ms),
        Command::MiCheck { joints } => mi_check(&cfg, seed, out, *joints),
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !msg.contains(&part) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&part);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
