//! The `tsr` command line: corpus synthesis, the four training stages,
//! evaluation sweeps and the HTTP service.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tsr_core::harness::config::{parse_config, ExperimentConfig};
use tsr_core::harness::pipeline::{self, Model};
use tsr_core::harness::{self, Manifest};
use tsr_core::training::{RunLog, Stage};

#[derive(Parser, Debug)]
#[command(name = "tsr", version, about = "Controllable super-resolution by two-stage distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the stage seed (training) or the experiment seed (data, eval).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TeacherKind {
    Fidelity,
    Realness,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the procedural toy corpus into the `--out` directory.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: TeacherKind,
        #[arg(long)]
        steps: Option<usize>,
    },
    DistillStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher_f: PathBuf,
        #[arg(long)]
        teacher_r: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    DistillStage2 {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// One metrics row for a checkpoint at knob position `--t`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
    },
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt_f: PathBuf,
        #[arg(long)]
        ckpt_r: PathBuf,
    },
    SweepT {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = tsr_service::DEFAULT_MAX_SIDE)]
        max_side: usize,
    },
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on bad usage.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// `error: <Kind>: <message>` on a single line.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<tsr_core::Error>())
        .map(|c| c.kind())
        .unwrap_or("Error");
    let msg = format!("{e:#}").replace('\n', " ");
    format!("error: {kind}: {msg}")
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => parse_config(p).with_context(|| format!("config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, ".manifest.json")
}

pub fn log_path(out: &Path) -> PathBuf {
    sibling(out, ".log.csv")
}

fn write_manifest(command: &str, cfg: &ExperimentConfig, seeds: &[(&str, u64)], outputs: &[&Path]) -> Result<()> {
    let mut all: BTreeMap<String, u64> = seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    all.insert("experiment".into(), cfg.seed);
    all.insert("percep".into(), cfg.percep_seed);
    let m = Manifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seeds: all,
        code_version: env!("CARGO_PKG_VERSION").into(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    harness::write_manifest(&manifest_path(outputs[0]), &m)?;
    Ok(())
}

fn save_trained(command: &str, cfg: &ExperimentConfig, out: &Path, model: &Model, log: &RunLog) -> Result<()> {
    model.save(out)?;
    let lp = log_path(out);
    harness::write_atomic(&lp, log.to_csv().as_bytes())?;
    write_manifest(command, cfg, &[(model.meta.stage.as_str(), model.meta.seed)], &[out, &lp])?;
    log::info!("{command}: wrote {}", out.display());
    Ok(())
}

fn warn_foreign(cfg: &ExperimentConfig, m: &Model, path: &Path) {
    if m.meta.config_hash != cfg.hash() {
        log::warn!("{} was trained under a different config", path.display());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { common } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.data.corpus_dir = common.out.clone();
            let files = pipeline::ensure_corpus(&cfg)?;
            log::info!("synth-data: {} images in {}", files.len(), common.out.display());
            write_manifest("synth-data", &cfg, &[], &[&common.out])
        }
        Command::TrainTeacher { common, kind, steps } => {
            let mut cfg = load_config(common.config.as_deref())?;
            let stage = match kind {
                TeacherKind::Fidelity => Stage::TeacherF,
                TeacherKind::Realness => Stage::TeacherR,
            };
            if let Some(s) = common.seed {
                match stage {
                    Stage::TeacherF => cfg.train.teacher_f.seed = s,
                    _ => cfg.train.teacher_r.seed = s,
                }
            }
            pipeline::ensure_corpus(&cfg)?;
            let data = pipeline::load_datasets(&cfg)?;
            let codec = pipeline::build_codec(&cfg, &data.train)?;
            let (model, log) = pipeline::train_teacher(&cfg, stage, &data, &codec, steps)?;
            save_trained("train-teacher", &cfg, &common.out, &model, &log)
        }
        Command::DistillStage1 {
            common,
            teacher_f,
            teacher_r,
            steps,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.stage1.seed = s;
            }
            let tf = load_model(&teacher_f)?;
            let tr = load_model(&teacher_r)?;
            warn_foreign(&cfg, &tf, &teacher_f);
            warn_foreign(&cfg, &tr, &teacher_r);
            pipeline::ensure_corpus(&cfg)?;
            let data = pipeline::load_datasets(&cfg)?;
            let (model, log) = pipeline::distill_stage1(&cfg, &data, &tf, &tr, steps)?;
            save_trained("distill-stage1", &cfg, &common.out, &model, &log)
        }
        Command::DistillStage2 { common, ckpt, steps } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.stage2.seed = s;
            }
            let s1 = load_model(&ckpt)?;
            warn_foreign(&cfg, &s1, &ckpt);
            pipeline::ensure_corpus(&cfg)?;
            let data = pipeline::load_datasets(&cfg)?;
            let (model, log) = pipeline::distill_stage2(&cfg, &data, &s1, steps)?;
            save_trained("distill-stage2", &cfg, &common.out, &model, &log)
        }
        Command::Eval { common, ckpt, t } => {
            let (cfg, data) = eval_setup(&common)?;
            let m = load_model(&ckpt)?;
            let row = pipeline::evaluate_model(&cfg, &m, &data.eval, t)?;
            harness::write_report(&common.out, "t", &[row])?;
            write_manifest("eval", &cfg, &[], &[&common.out])
        }
        Command::SweepAlpha { common, ckpt_f, ckpt_r } => {
            let (cfg, data) = eval_setup(&common)?;
            let (mf, mr) = (load_model(&ckpt_f)?, load_model(&ckpt_r)?);
            let rows = pipeline::sweep_alpha_models(&cfg, &mf, &mr, &data.eval)?;
            harness::write_report(&common.out, "alpha", &rows)?;
            write_manifest("sweep-alpha", &cfg, &[], &[&common.out])
        }
        Command::SweepT { common, ckpt } => {
            let (cfg, data) = eval_setup(&common)?;
            let m = load_model(&ckpt)?;
            let rows = pipeline::sweep_t_model(&cfg, &m, &data.eval)?;
            harness::write_report(&common.out, "t", &rows)?;
            write_manifest("sweep-t", &cfg, &[], &[&common.out])
        }
        Command::Serve {
            config,
            models_dir,
            host,
            port,
            max_side,
        } => {
            let cfg = load_config(config.as_deref())?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .with_context(|| format!("bad listen address {host}:{port}"))?;
            let state = Arc::new(tsr_service::AppState::new(max_side, cfg.percep_seed));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(tsr_service::serve(addr, models_dir, state))?;
            Ok(())
        }
    }
}

fn eval_setup(common: &Common) -> Result<(ExperimentConfig, pipeline::Datasets)> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    pipeline::ensure_corpus(&cfg)?;
    let data = pipeline::load_datasets(&cfg)?;
    Ok((cfg, data))
}
