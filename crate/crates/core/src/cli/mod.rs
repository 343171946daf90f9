//! The `prism` command line. [`run`] returns the process exit code:
//! 0 on success, 2 for usage or configuration errors, 3 when a run fails.

mod manifest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{leave_one_out_split, InteractionDataset, ItemFeatures};
use crate::diagnostics::{gradient_suite, GRAD_TOLERANCE};
use crate::error::Error;
use crate::eval::{self, measure_complexity, metrics_csv, summarize, Stage};
use crate::model::PrismModel;
use crate::numerics::read_checkpoint;
use crate::synthetic::{classify_interaction, generate_pid_dataset, PidScenario, PidVariant};
use crate::training::{
    fusion_trace_csv, run_experiment, DataConfig, ExperimentConfig, ExperimentReport, TrainConfig,
};

pub use manifest::{InputDigest, RunManifest};

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "prism", version, about = "Multimodal sequential recommendation with interaction experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed; writes report, checkpoints, loss curves,
    /// fusion traces and a run manifest to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seeds; repeat for several seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split metrics of a checkpoint as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A dataset directory or an experiment config.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "k", default_values_t = [10, 20])]
        ks: Vec<usize>,
        /// Training config of the checkpoint; defaults to model.json next to it.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with a known interaction type.
    Synth {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        /// Probability of flipping the next-item class.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Check tape gradients of every layer type against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Per-epoch training cost against a baseline (PRISM off by default).
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Experiment config of the baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
    },
    /// Fusion weights of every test-context position as CSV.
    Weights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a JSON schema.
    Schema {
        #[arg(value_enum)]
        which: SchemaKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemaKind {
    Config,
    Report,
    Manifest,
}

/// A failed command with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

/// Errors while reading inputs.
fn usage(e: Error) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    }
}

/// Errors while running; configuration errors still count as usage.
fn runtime(e: Error) -> Failure {
    let code = match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Train { config, seeds, out } => cmd_train(&config, &seeds, &out),
        Command::Eval {
            checkpoint,
            data,
            ks,
            model_config,
            out,
        } => cmd_eval(&checkpoint, &data, &ks, model_config.as_deref(), out.as_deref()),
        Command::Synth {
            scenario,
            out,
            seed,
            users,
            items,
            noise,
        } => cmd_synth(&scenario, &out, seed, users, items, noise),
        Command::Gradcheck { seed, seeds } => cmd_gradcheck(seed, seeds),
        Command::Bench {
            config,
            baseline,
            epochs,
        } => cmd_bench(&config, baseline.as_deref(), epochs),
        Command::Weights {
            checkpoint,
            data,
            model_config,
            out,
        } => cmd_weights(&checkpoint, &data, model_config.as_deref(), out.as_deref()),
        Command::Schema { which } => {
            say!("{}", schema_json(which));
            Ok(())
        }
    }
}

/// Pretty-printed JSON schema of the config, report or manifest.
pub fn schema_json(which: SchemaKind) -> String {
    let schema = match which {
        SchemaKind::Config => schemars::schema_for!(ExperimentConfig),
        SchemaKind::Report => schemars::schema_for!(ExperimentReport),
        SchemaKind::Manifest => schemars::schema_for!(RunManifest),
    };
    serde_json::to_string_pretty(&schema).expect("schemas serialize")
}

fn write_out(path: &Path, contents: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))?;
    }
    std::fs::write(path, contents).map_err(|e| runtime(Error::io(path, e)))
}

fn emit(out: Option<&Path>, contents: &str) -> CmdResult {
    match out {
        Some(p) => write_out(p, contents),
        None => {
            use std::io::Write as _;
            let _ = std::io::stdout().write_all(contents.as_bytes());
            Ok(())
        }
    }
}

fn cmd_train(config: &Path, seeds: &[u64], out: &Path) -> CmdResult {
    let mut cfg = ExperimentConfig::load(config).map_err(usage)?;
    if !seeds.is_empty() {
        cfg.train.seeds = seeds.to_vec();
    }
    let tc = cfg.training();
    tc.validate().map_err(usage)?;
    let (ds, features) = cfg.data.load().map_err(usage)?;
    let output = run_experiment(&tc, &ds, &features, Some(out)).map_err(runtime)?;
    let report = &output.report;

    write_out(&out.join("loss_curves.csv"), &loss_curves_csv(report))?;
    let manifest = RunManifest::new(&cfg, out).map_err(runtime)?;
    write_out(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).map_err(|e| runtime(e.into()))?,
    )?;

    for s in &report.seeds {
        say!(
            "seed {}: best epoch {} of {}, test R@10 {:.4} N@10 {:.4}",
            s.seed, s.best_epoch, s.epochs_run, s.test["R@10"], s.test["N@10"]
        );
    }
    let mut line = String::from("mean");
    for (k, v) in &report.mean {
        let _ = write!(line, " {k} {v:.4}");
    }
    say!("{line}");
    say!("wrote {}", out.display());
    Ok(())
}

/// `seed,epoch,rec,uni_i,uni_t,syn,rdn,exp,total` per trained epoch.
pub fn loss_curves_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("seed,epoch,rec,uni_i,uni_t,syn,rdn,exp,total\n");
    for s in &report.seeds {
        for l in &s.losses {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.seed, l.epoch, l.rec, l.uni_i, l.uni_t, l.syn, l.rdn, l.exp, l.total
            );
        }
    }
    out
}

/// A dataset directory or an experiment config file.
fn data_config(data: &Path) -> Result<DataConfig, Failure> {
    if data.is_dir() {
        Ok(DataConfig::in_dir(data))
    } else {
        Ok(ExperimentConfig::load(data).map_err(usage)?.data)
    }
}

struct Loaded {
    model: PrismModel<f32>,
    cfg: TrainConfig,
    ds: InteractionDataset,
}

fn load_model(checkpoint: &Path, data: &Path, model_config: Option<&Path>) -> Result<Loaded, Failure> {
    let cfg_path = match model_config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("model.json"),
    };
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| usage(Error::io(&cfg_path, e)))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| usage(Error::Config(format!("{}: {e}", cfg_path.display()))))?;
    cfg.validate().map_err(usage)?;
    let params = read_checkpoint(checkpoint).map_err(usage)?;
    let (ds, features): (InteractionDataset, ItemFeatures) = data_config(data)?.load().map_err(usage)?;
    let mut model =
        PrismModel::<f32>::new(cfg.model.clone(), cfg.prism.clone(), &features, 0).map_err(usage)?;
    model.store.load_from(&params).map_err(usage)?;
    Ok(Loaded { model, cfg, ds })
}

fn cmd_eval(checkpoint: &Path, data: &Path, ks: &[usize], model_config: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let Loaded { model, cfg, ds } = load_model(checkpoint, data, model_config)?;
    let mut ec = cfg.eval.clone();
    ec.ks = ks.to_vec();
    ec.validate().map_err(usage)?;
    let split = leave_one_out_split(&ds);
    let ranks = eval::evaluate(&model, &split, Stage::Test, &ec).map_err(runtime)?;
    emit(out, &metrics_csv(&[summarize(&ranks, ks)], ks))
}

fn cmd_weights(checkpoint: &Path, data: &Path, model_config: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let Loaded { model, ds, .. } = load_model(checkpoint, data, model_config)?;
    let split = leave_one_out_split(&ds);
    emit(out, &fusion_trace_csv(&model, &ds, &split))
}

fn cmd_synth(
    scenario: &str,
    out: &Path,
    seed: u64,
    users: Option<usize>,
    items: Option<usize>,
    noise: Option<f64>,
) -> CmdResult {
    let variant: PidVariant = scenario.parse().map_err(usage)?;
    let mut s = PidScenario::new(variant, seed);
    if let Some(u) = users {
        s.num_users = u;
    }
    if let Some(n) = items {
        s.num_items = n;
    }
    if let Some(e) = noise {
        s.noise = e;
    }
    s.validate().map_err(usage)?;
    let d = generate_pid_dataset(&s).map_err(runtime)?;
    d.write(out).map_err(runtime)?;
    let data = DataConfig {
        interactions: "interactions.tsv".into(),
        image_embeddings: "image.prem".into(),
        text_embeddings: "text.prem".into(),
        five_core: true,
    };
    let experiment = serde_json::json!({ "data": data });
    write_out(
        &out.join("experiment.json"),
        &serde_json::to_string_pretty(&experiment).map_err(|e| runtime(e.into()))?,
    )?;
    let mi = d.mi();
    say!(
        "I(T;img) = {:.4} bits, I(T;txt) = {:.4} bits, I(T;img,txt) = {:.4} bits over {} transitions",
        mi.t_x1, mi.t_x2, mi.t_x12, mi.samples
    );
    let label = serde_json::to_value(classify_interaction(&mi, 0.05)).map_err(|e| runtime(e.into()))?;
    say!("dominant interaction: {}", label.as_str().unwrap_or("?"));
    say!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, seeds: u64) -> CmdResult {
    let mut failed = 0;
    for s in seed..seed + seeds.max(1) {
        let suite = gradient_suite(s).map_err(runtime)?;
        for c in suite {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            if !c.passed() {
                failed += 1;
            }
            say!("seed {s:<3} {:<22} {:.3e}  {verdict}", c.name, c.max_rel_error);
        }
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_RUNTIME,
            message: format!("{failed} checks above relative error {GRAD_TOLERANCE:e}"),
        });
    }
    Ok(())
}

fn cmd_bench(config: &Path, baseline: Option<&Path>, epochs: usize) -> CmdResult {
    let cfg = ExperimentConfig::load(config).map_err(usage)?;
    let base = match baseline {
        Some(p) => ExperimentConfig::load(p).map_err(usage)?.training(),
        None => {
            let mut b = cfg.training();
            b.prism.enabled = false;
            b
        }
    };
    let (ds, features) = cfg.data.load().map_err(usage)?;
    let split = leave_one_out_split(&ds);
    let report = measure_complexity(&cfg.training(), &base, &split, &features, epochs).map_err(runtime)?;
    say!("{}", serde_json::to_string_pretty(&report).map_err(|e| runtime(e.into()))?);
    Ok(())
}
