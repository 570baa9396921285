//! `cgans` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

pub mod data;
pub mod ppm;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use cgans_core::datagen::{make_dataset, Dataset};
use cgans_core::eval::{evaluate_model, verification_experiment, EvalConfig};
use cgans_core::gradsuite;
use cgans_core::trainer::{load_checkpoint, parse_kv, train, TrainConfig};
use cgans_core::AgeGroup;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SEED_ENV: &str = "CGANS_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{0}")]
    Core(#[from] cgans_core::Error),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cgans_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::NonFinite(_)) | CliError::GradcheckFailed(_) => 3,
            CliError::Core(_) | CliError::File { .. } => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches `path` to bare I/O failures so the message names the file.
fn at_path<T>(path: &std::path::Path, r: cgans_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        cgans_core::Error::Io(source) => CliError::File {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

#[derive(Debug, Parser)]
#[command(name = "cgans", version, about = "Conditional adversarial face aging on synthetic faces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset directory.
    MakeData(MakeDataArgs),
    /// Train the generator and both discriminators.
    Train(TrainArgs),
    /// Age one image to one or more target groups.
    Generate(GenerateArgs),
    /// Score a checkpoint on a held-out dataset.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct MakeDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    identities: usize,
    #[arg(long, default_value_t = 7)]
    groups_per_identity: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by make-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Progress line every this many iterations.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PPM).
    #[arg(long, conflicts_with_all = ["data", "sample_id"])]
    input: Option<PathBuf>,
    /// Dataset directory to take `--sample-id` from.
    #[arg(long, requires = "sample_id")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    sample_id: Option<usize>,
    /// Comma-separated target groups, or `all`.
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    max_per_cell: usize,
    /// Genuine (and as many impostor) pairs for the verification curves; 0
    /// skips them.
    #[arg(long, default_value_t = 0)]
    verification_pairs: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

fn env_seed(env: Option<&str>) -> CliResult<Option<u64>> {
    env.map(|v| {
        v.trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))
    })
    .transpose()
}

/// Effective training config: defaults, then `CGANS_SEED`, then the config
/// file, then flags. Returns the config and whether `image_size` was given.
pub fn resolve_train_config(
    file_text: Option<&str>,
    flags: &[(String, String)],
    env: Option<&str>,
) -> CliResult<(TrainConfig, bool)> {
    let mut cfg = TrainConfig::default();
    let mut sized = false;
    if let Some(seed) = env_seed(env)? {
        cfg.seed = seed;
    }
    let mut apply = |k: &str, v: &str| -> CliResult<()> {
        cfg.set(k, v)?;
        sized |= k == "image_size";
        Ok(())
    };
    if let Some(text) = file_text {
        for (k, v) in parse_kv(text)? {
            apply(&k, &v)?;
        }
    }
    for (k, v) in flags {
        apply(k, v)?;
    }
    Ok((cfg, sized))
}

fn split_set(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Parses `all` or a comma-separated list of group indices.
pub fn parse_targets(s: &str) -> CliResult<Vec<AgeGroup>> {
    if s.trim() == "all" {
        return Ok(AgeGroup::all().collect());
    }
    s.split(',')
        .map(|t| {
            let k: usize = t
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad target group {t:?}")))?;
            AgeGroup::new(k).map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn header(log: &mut dyn Write, command: &str, seed: u64, pairs: &[(&str, String)]) -> CliResult<()> {
    let kv: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(log, "cgans {VERSION} {command} seed={seed} {}", kv.join(" "))?;
    Ok(())
}

fn make_data(a: MakeDataArgs, env: Option<&str>, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    let seed = a.seed.or(env_seed(env)?).unwrap_or(0);
    header(
        log,
        "make-data",
        seed,
        &[
            ("out", a.out.display().to_string()),
            ("identities", a.identities.to_string()),
            ("groups_per_identity", a.groups_per_identity.to_string()),
            ("size", a.size.to_string()),
        ],
    )?;
    let ds = make_dataset(a.identities, a.groups_per_identity, a.size, seed)?;
    data::write_dataset(&a.out, &ds)?;
    writeln!(
        out,
        "wrote {} sequence samples, {} pairs, {} singles to {}",
        ds.sequences.iter().map(Vec::len).sum::<usize>(),
        ds.pairs.len(),
        ds.singles.len(),
        a.out.display()
    )?;
    Ok(())
}

fn train_cmd(a: TrainArgs, env: Option<&str>, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    let file_text = match &a.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut flags = a.sets.iter().map(|s| split_set(s)).collect::<CliResult<Vec<_>>>()?;
    let named = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
    ];
    flags.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let (mut cfg, sized) = resolve_train_config(file_text.as_deref(), &flags, env)?;
    // Without an explicit image_size the data decides it.
    let dataset = if sized {
        None
    } else {
        let ds = data::read_dataset(&a.data)?;
        cfg.image_size = ds.size;
        Some(ds)
    };
    cfg.validate()?;
    let pairs: Vec<_> = cfg.to_pairs().into_iter().filter(|(k, _)| *k != "seed").collect();
    header(log, "train", cfg.seed, &pairs)?;
    let dataset = match dataset {
        Some(ds) => ds,
        None => data::read_dataset(&a.data)?,
    };
    std::fs::create_dir_all(&a.out)?;
    let mut run_log = std::fs::File::create(a.out.join("train.log"))?;
    header(&mut run_log, "train", cfg.seed, &pairs)?;
    let every = a.log_every.max(1);
    let mut io_err = None;
    let outcome = train(&dataset, &cfg, Some(&a.out), |r| {
        if r.iteration % every == 0 {
            let line = format!(
                "iter {} phase {} d_age {:.4} d_trans {:.4} g_total {:.4}",
                r.iteration,
                r.phase.map(|p| p.to_string()).unwrap_or_default(),
                r.d_age_loss,
                r.d_trans_loss,
                r.g_total
            );
            if let Err(e) = writeln!(run_log, "{line}").and_then(|_| writeln!(log, "{line}")) {
                io_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    writeln!(
        out,
        "trained {} iterations; checkpoints and metrics in {}",
        outcome.bundle.iteration,
        a.out.display()
    )?;
    Ok(())
}

fn generate_cmd(a: GenerateArgs, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    let targets = parse_targets(&a.targets)?;
    let (source, stem) = match (&a.input, &a.data, a.sample_id) {
        (Some(p), None, None) => (
            p.display().to_string(),
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("image".into()),
        ),
        (None, Some(d), Some(id)) => (format!("{}#{id}", d.display()), format!("sample{id:06}")),
        _ => return Err(CliError::Usage("give either --input or --data with --sample-id".into())),
    };
    let bundle = at_path(&a.checkpoint, load_checkpoint(&a.checkpoint))?;
    let mut pairs = vec![("checkpoint", a.checkpoint.display().to_string()), ("source", source)];
    pairs.push(("targets", targets.iter().map(|g| g.index().to_string()).collect::<Vec<_>>().join(",")));
    pairs.push(("out", a.out.display().to_string()));
    header(log, "generate", bundle.config.seed, &pairs)?;

    let image = match (&a.input, &a.data, a.sample_id) {
        (Some(p), _, _) => at_path(p, ppm::read_ppm(p))?,
        (None, Some(d), Some(id)) => {
            let text = std::fs::read_to_string(d.join(data::MANIFEST_FILE))?;
            let rec = text
                .lines()
                .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
                .map(|l| l.parse::<cgans_core::datagen::ManifestRecord>())
                .find(|r| r.as_ref().map(|r| r.sample_id == id).unwrap_or(true))
                .ok_or_else(|| cgans_core::Error::Data(format!("no sample {id} in {}", d.display())))??;
            ppm::read_ppm(&d.join(&rec.path))?
        }
        _ => unreachable!("checked above"),
    };
    let s = image.dims()[1];
    let batch = cgans_core::Tensor::stack(&vec![&image; targets.len()])?.reshape(&[targets.len(), 3, s, s])?;
    let aged = bundle.generator.generate(&batch, &targets)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, g) in targets.iter().enumerate() {
        let path = a.out.join(format!("{stem}_g{}.ppm", g.index()));
        ppm::write_ppm(&path, &aged.sample(i))?;
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs, env: Option<&str>, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    let seed = a.seed.or(env_seed(env)?).unwrap_or(0);
    let bundle = at_path(&a.checkpoint, load_checkpoint(&a.checkpoint))?;
    header(
        log,
        "eval",
        seed,
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("max_per_cell", a.max_per_cell.to_string()),
            ("verification_pairs", a.verification_pairs.to_string()),
        ],
    )?;
    let test: Dataset = data::read_dataset(&a.data)?;
    let cfg = EvalConfig {
        max_per_cell: a.max_per_cell,
        ..EvalConfig::default()
    };
    let report = evaluate_model(&bundle, &test, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("aging_report.csv"), report.to_csv())?;
    writeln!(out, "mean age hit rate {:.4}", report.mean_hit_rate())?;
    writeln!(out, "adjacent-target hit rate {:.4}", report.adjacent_hit_rate())?;
    writeln!(out, "mean identity drift {:.5}", report.mean_identity_drift())?;
    if a.verification_pairs > 0 {
        let v = verification_experiment(&bundle.generator, &test, a.verification_pairs, seed)?;
        std::fs::write(a.out.join("far_frr_original.csv"), v.original_curve.to_csv())?;
        std::fs::write(a.out.join("far_frr_aged.csv"), v.aged_curve.to_csv())?;
        writeln!(out, "EER original {:.4}", v.eer_original)?;
        writeln!(out, "EER aged {:.4}", v.eer_aged)?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, env: Option<&str>, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    let seed = a.seed.or(env_seed(env)?).unwrap_or(0);
    header(log, "gradcheck", seed, &[("cases", gradsuite::CASES.len().to_string())])?;
    let mut failed = Vec::new();
    for name in gradsuite::CASES {
        let r = gradsuite::run_case(name, seed)?;
        writeln!(
            out,
            "{:<26} instances {} checked {:>4} skipped {:>3} max_rel_error {:.3e} {}",
            r.name,
            r.instances,
            r.checked,
            r.skipped,
            r.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        )?;
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}

/// Runs one command. `env_seed` is the value of `CGANS_SEED`, if set.
pub fn run_with_env<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write, log: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(log, "{e}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::MakeData(a) => make_data(a, env_seed, out, log),
        Command::Train(a) => train_cmd(a, env_seed, out, log),
        Command::Generate(a) => generate_cmd(a, out, log),
        Command::Eval(a) => eval_cmd(a, env_seed, out, log),
        Command::Gradcheck(a) => gradcheck_cmd(a, env_seed, out, log),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command with `CGANS_SEED` taken from the process environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, log: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env = std::env::var(SEED_ENV).ok();
    run_with_env(args, env.as_deref(), out, log)
}
