//! The `negmerge` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use negmerge_core::analysis::{sparsity_report, GroupingRule};
use negmerge_core::consensus_stream::SignConsensusState;
use negmerge_core::merging::{merge, MergeSpec, Method, Reduce};
use negmerge_core::task_vector::{apply, apply_sparse, diff, sparsify, Direction, NegationConfig, TaskVector};
use negmerge_core::TensorMap;
use negmerge_harness::experiment::{run_experiment_threads, ExperimentConfig};
use serde::Serialize;

use crate::codec;
use crate::error::{Error, Result};
use crate::grouping::{by_name_regex, parse_pattern};
use crate::report::{self, OutputFormat};
use crate::store;

#[derive(Debug, Parser)]
#[command(name = "negmerge", version, about = "Task-vector merging and negation for model checkpoints")]
pub struct Cli {
    /// Format of reports written to standard output.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub output_format: OutputFormat,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "NEGMERGE_THREADS")]
    pub threads: Option<usize>,
    /// Replaces the seed list of an experiment config with this one seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes fine-tuned minus base.
    Diff(DiffArgs),
    /// Merges a pool of task vectors.
    Merge(MergeArgs),
    /// Adds or subtracts a scaled task vector.
    Apply(ApplyArgs),
    /// Reports exact-zero counts of a task vector.
    Stats(StatsArgs),
    /// Runs the unlearning comparison experiment.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Task vector files; at least one unless resuming a state.
    #[arg(long, num_args = 1.., required_unless_present = "resume")]
    pub pool: Vec<PathBuf>,
    #[arg(long, default_value = "negmerge", conflicts_with = "spec")]
    pub method: String,
    #[arg(long, default_value = "avg", conflicts_with = "spec")]
    pub reduce: String,
    /// Fraction of the pool that must agree in sign.
    #[arg(long, default_value_t = 1.0, conflicts_with = "spec")]
    pub q: f64,
    #[arg(long, default_value_t = negmerge_core::merging::DEFAULT_TIES_TRIM_FRACTION, conflicts_with = "spec")]
    pub ties_k: f64,
    /// JSON merge spec file instead of the individual flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Accumulate the unanimity merge one vector at a time.
    #[arg(long)]
    pub streaming: bool,
    /// Streaming state to continue from.
    #[arg(long, requires = "streaming")]
    pub resume: Option<PathBuf>,
    /// Where to write the streaming state after absorbing the pool.
    #[arg(long, requires = "streaming")]
    pub save_state: Option<PathBuf>,
    /// Write only the non-zero elements.
    #[arg(long)]
    pub sparse_out: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Print the merge wall-clock time as a JSON record.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Dense or sparse task vector.
    #[arg(long)]
    pub tau: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: f64,
    /// Subtract instead of add.
    #[arg(long)]
    pub negate: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupMode {
    Single,
    #[value(alias = "by_depth_thirds")]
    ByDepthThirds,
    #[value(alias = "by_depth")]
    ByDepth,
    Glob,
    Regex,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub tau: PathBuf,
    /// Pool the vector came from, for frozen-zero accounting.
    #[arg(long, num_args = 1..)]
    pub pool: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = GroupMode::ByDepthThirds)]
    pub group_mode: GroupMode,
    /// Number of groups for `by-depth`.
    #[arg(long, default_value_t = 3)]
    pub groups: usize,
    /// `label=pattern` for `glob` and `regex` modes; repeatable.
    #[arg(long = "group")]
    pub group_patterns: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let _ = writeln!(err, "error: {e}");
            code
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Diff(a) => cmd_diff(a),
        Command::Merge(a) => cmd_merge(cli, a, out),
        Command::Apply(a) => cmd_apply(a),
        Command::Stats(a) => cmd_stats(cli, a, out),
        Command::Experiment(a) => cmd_experiment(cli, a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| if text.ends_with('\n') { Ok(()) } else { out.write_all(b"\n") })
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn csv_record<T: Serialize>(row: &T) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(row).expect("in-memory CSV");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8")
}

fn emit_record<T: Serialize>(cli: &Cli, out: &mut dyn Write, row: &T) -> Result<()> {
    match cli.output_format {
        OutputFormat::Json => emit(out, &serde_json::to_string(row).expect("record serializes")),
        OutputFormat::Csv => emit(out, &csv_record(row)),
    }
}

fn cmd_diff(a: &DiffArgs) -> Result<()> {
    let base = store::load(&a.base)?;
    let ft = store::load(&a.finetuned)?;
    let tau = diff(&ft, &base)?;
    store::save(tau.delta(), &a.out)
}

/// Loads a task vector file, densifying sparse encodings.
pub fn load_tau(path: &Path) -> Result<TaskVector> {
    let map = store::load(path)?;
    if codec::is_sparse(&map) {
        let s = codec::sparse_from_map(&map).map_err(|e| Error::format(path, e))?;
        Ok(negmerge_core::task_vector::densify(&s))
    } else {
        Ok(TaskVector::new(map))
    }
}

fn merge_spec(a: &MergeArgs) -> Result<MergeSpec> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => MergeSpec {
            method: a.method.parse::<Method>()?,
            reduce: a.reduce.parse::<Reduce>()?,
            q: a.q,
            ties_trim_fraction: a.ties_k,
        },
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize)]
struct MergeRecord<'a> {
    method: &'a str,
    reduce: &'a str,
    inputs: usize,
    elements: usize,
    nonzero: usize,
    merge_seconds: Option<f64>,
}

fn cmd_merge(cli: &Cli, a: &MergeArgs, out: &mut dyn Write) -> Result<()> {
    let spec = merge_spec(a)?;
    if a.streaming && (spec.method != Method::NegMerge || spec.q != 1.0) {
        return Err(Error::Config("--streaming supports only the unanimity (q = 1) negmerge method".into()));
    }
    let pool = a.pool.iter().map(|p| load_tau(p)).collect::<Result<Vec<_>>>()?;

    let started = Instant::now();
    let (tau, inputs) = if a.streaming {
        let mut state = match &a.resume {
            Some(path) => {
                let map = store::load(path)?;
                codec::state_from_map(&map).map_err(|e| Error::format(path, e))?
            }
            None => SignConsensusState::init(pool[0].schema()),
        };
        for t in &pool {
            state.update(t)?;
        }
        if let Some(path) = &a.save_state {
            store::save(&codec::state_to_map(&state), path)?;
        }
        (state.finalize(spec.reduce)?, state.count())
    } else {
        (merge(&pool, &spec)?, pool.len())
    };
    let seconds = started.elapsed().as_secs_f64();
    log::debug!("merged {inputs} vectors in {seconds:.6}s");

    if a.sparse_out {
        store::save(&codec::sparse_to_map(&sparsify(&tau)), &a.out)?;
    } else {
        store::save(tau.delta(), &a.out)?;
    }
    let record = MergeRecord {
        method: spec.method.as_str(),
        reduce: spec.reduce.as_str(),
        inputs,
        elements: tau.num_elements(),
        nonzero: tau.nnz(),
        merge_seconds: a.timing.then_some(seconds),
    };
    if a.timing {
        emit_record(cli, out, &record)?;
    }
    Ok(())
}

fn cmd_apply(a: &ApplyArgs) -> Result<()> {
    let cfg = NegationConfig {
        lambda: a.lambda,
        direction: if a.negate { Direction::Negate } else { Direction::Add },
    };
    cfg.validate()?;
    let base = store::load(&a.base)?;
    let map = store::load(&a.tau)?;
    let result: TensorMap = if codec::is_sparse(&map) {
        let s = codec::sparse_from_map(&map).map_err(|e| Error::format(&a.tau, e))?;
        apply_sparse(&base, &s, &cfg)?
    } else {
        apply(&base, &TaskVector::new(map), &cfg)?
    };
    store::save(&result, &a.out)
}

fn grouping(a: &StatsArgs, schema: &negmerge_core::Schema) -> Result<GroupingRule> {
    let patterns = a
        .group_patterns
        .iter()
        .map(|p| parse_pattern(p))
        .collect::<Result<Vec<_>>>()?;
    let needs_patterns = matches!(a.group_mode, GroupMode::Glob | GroupMode::Regex);
    if needs_patterns == patterns.is_empty() {
        return Err(Error::Config(if needs_patterns {
            "glob and regex grouping need at least one --group label=pattern".into()
        } else {
            "--group patterns apply only to glob and regex grouping".into()
        }));
    }
    Ok(match a.group_mode {
        GroupMode::Single => GroupingRule::Single,
        GroupMode::ByDepthThirds => GroupingRule::ByDepth { n_groups: 3 },
        GroupMode::ByDepth => GroupingRule::ByDepth { n_groups: a.groups },
        GroupMode::Glob => GroupingRule::Patterns(patterns),
        GroupMode::Regex => by_name_regex(schema, &patterns)?,
    })
}

fn cmd_stats(cli: &Cli, a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    let tau = load_tau(&a.tau)?;
    let pool = a.pool.iter().map(|p| load_tau(p)).collect::<Result<Vec<_>>>()?;
    let rule = grouping(a, &tau.schema())?;
    let r = sparsity_report(&tau, &rule, (!pool.is_empty()).then_some(pool.as_slice()))?;
    match cli.output_format {
        OutputFormat::Json => emit(out, &report::to_json(&r)),
        OutputFormat::Csv => emit(out, &report::sparsity_csv(&r)),
    }
}

fn cmd_experiment(cli: &Cli, a: &ExperimentArgs, out: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Error::Config("--threads must be positive".into()));
    }
    log::info!("running {} seeds on {threads} threads", cfg.seeds.len());
    let r = run_experiment_threads(&cfg, threads)?;
    report::write_experiment(&r, &a.out)?;
    log::info!("reports written to {}", a.out.display());
    match cli.output_format {
        OutputFormat::Json => emit(out, &report::to_json(&r.table())),
        OutputFormat::Csv => emit(out, &report::experiment_csv(&r)),
    }
}
